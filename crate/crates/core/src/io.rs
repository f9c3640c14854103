//! On-disk formats.
//!
//! Every array is a raw little-endian `f32` payload (`<name>.bin`) next to a
//! plain-text `key = value` header (`<name>.meta`). Grids are z-fastest,
//! gathers are trace by trace. Arithmetic stays in `f64`; values are narrowed
//! only when written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Geometry, GridDims, ModelGrid, Position, ShotGather};
use crate::linops::FreqField;

/// Sidecar header and payload paths for a `.bin`, `.meta` or extension-less path.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("bin"), path.with_extension("meta"))
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are an error.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::format(origin, format!("duplicate key '{key}'")));
        }
    }
    Ok(map)
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, origin: &Path) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format(origin, format!("missing key '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::format(origin, format!("cannot parse '{key}' = '{raw}'")))
}

fn parse_floats(raw: &str, origin: &Path) -> Result<Vec<f64>> {
    raw.split([',', ' ', '\t'])
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(origin, format!("bad number '{s}'")))
        })
        .collect()
}

/// `x,z; x,z; ...`
fn parse_positions(raw: &str, origin: &Path) -> Result<Vec<Position>> {
    raw.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let v = parse_floats(pair, origin)?;
            match v.as_slice() {
                [x, z] => Ok(Position::new(*x, *z)),
                _ => Err(Error::format(origin, format!("expected 'x,z', got '{pair}'"))),
            }
        })
        .collect()
}

fn format_positions(ps: &[Position]) -> String {
    ps.iter()
        .map(|p| format!("{},{}", p.x, p.z))
        .collect::<Vec<_>>()
        .join("; ")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "dimension mismatch: payload has {} bytes, header implies {}",
                bytes.len(),
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn dims_header(dims: &GridDims) -> String {
    format!(
        "nz = {}\nnx = {}\ndz = {}\ndx = {}\nnb = {}\n",
        dims.nz, dims.nx, dims.dz, dims.dx, dims.nb
    )
}

fn read_dims(map: &BTreeMap<String, String>, origin: &Path) -> Result<GridDims> {
    let nb = if map.contains_key("nb") { get(map, "nb", origin)? } else { 0 };
    GridDims::new(
        get(map, "nz", origin)?,
        get(map, "nx", origin)?,
        get(map, "dz", origin)?,
        get(map, "dx", origin)?,
        nb,
    )
}

/// Writes an arbitrary real grid (snapshots, gradients) in the model layout.
pub fn save_grid(path: &Path, dims: &GridDims, kind: &str, values: &[f64]) -> Result<()> {
    if values.len() != dims.len() {
        return Err(Error::Shape(format!(
            "{} values for a {}x{} grid",
            values.len(),
            dims.nz,
            dims.nx
        )));
    }
    let (bin, meta) = file_pair(path);
    write_file(&bin, &f32_bytes(values.iter().copied()))?;
    write_file(&meta, format!("kind = {kind}\n{}", dims_header(dims)).as_bytes())
}

pub fn load_grid(path: &Path) -> Result<(GridDims, Vec<f64>)> {
    let (bin, meta) = file_pair(path);
    let map = parse_key_values(&read_text(&meta)?, &meta)?;
    let dims = read_dims(&map, &meta)?;
    let values = read_f32_payload(&bin, dims.len())?;
    Ok((dims, values.into_iter().map(f64::from).collect()))
}

/// Loads a velocity file (m/s) and converts it to squared slowness.
pub fn load_model(path: &Path) -> Result<ModelGrid> {
    let (bin, meta) = file_pair(path);
    if !bin.exists() {
        return Err(Error::io(
            &bin,
            std::io::Error::new(std::io::ErrorKind::NotFound, "model payload not found"),
        ));
    }
    let map = parse_key_values(&read_text(&meta)?, &meta)?;
    if let Some(kind) = map.get("kind") {
        if kind != "velocity" {
            return Err(Error::format(&meta, format!("expected a velocity grid, found '{kind}'")));
        }
    }
    let dims = read_dims(&map, &meta)?;
    let v: Vec<f64> = read_f32_payload(&bin, dims.len())?
        .into_iter()
        .map(f64::from)
        .collect();
    ModelGrid::from_velocity(dims, &v)
}

pub fn save_model(path: &Path, model: &ModelGrid) -> Result<()> {
    save_grid(path, model.dims(), "velocity", &model.velocity())
}

pub fn save_gather(path: &Path, gather: &ShotGather, geom: &Geometry) -> Result<()> {
    if gather.nrec != geom.receivers.len() || gather.nt != geom.nt {
        return Err(Error::Shape("gather does not match geometry".into()));
    }
    let (bin, meta) = file_pair(path);
    write_file(&bin, &f32_bytes(gather.data.iter().copied()))?;
    let header = format!(
        "kind = gather\nshot_index = {}\nnt = {}\ndt = {}\nnrec = {}\nreceivers = {}\n",
        gather.shot_index,
        gather.nt,
        geom.dt,
        gather.nrec,
        format_positions(&geom.receivers)
    );
    write_file(&meta, header.as_bytes())
}

/// Returns the gather plus its time step and receiver positions.
pub fn load_gather(path: &Path) -> Result<(ShotGather, f64, Vec<Position>)> {
    let (bin, meta) = file_pair(path);
    let map = parse_key_values(&read_text(&meta)?, &meta)?;
    let nt: usize = get(&map, "nt", &meta)?;
    let nrec: usize = get(&map, "nrec", &meta)?;
    let dt: f64 = get(&map, "dt", &meta)?;
    let shot_index: usize = get(&map, "shot_index", &meta)?;
    let receivers = parse_positions(map.get("receivers").map_or("", String::as_str), &meta)?;
    if receivers.len() != nrec {
        return Err(Error::format(
            &meta,
            format!("{} receiver positions for nrec = {nrec}", receivers.len()),
        ));
    }
    let data = read_f32_payload(&bin, nt * nrec)?
        .into_iter()
        .map(f64::from)
        .collect();
    Ok((ShotGather::from_data(shot_index, nt, nrec, data)?, dt, receivers))
}

/// Interleaved `re, im` grids, one per frequency.
pub fn save_freq_field(path: &Path, field: &FreqField) -> Result<()> {
    let (bin, meta) = file_pair(path);
    let values = field
        .values
        .iter()
        .flat_map(|c| [c.re, c.im]);
    write_file(&bin, &f32_bytes(values))?;
    let freqs = field
        .freqs
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let header = format!(
        "kind = freqfield\nnpoints = {}\nnf = {}\nfrequencies = {}\n",
        field.npoints,
        field.freqs.len(),
        freqs
    );
    let header = match field.dims {
        Some(d) => format!("{header}{}", dims_header(&d)),
        None => header,
    };
    write_file(&meta, header.as_bytes())
}

/// Geometry text config. Keys: `nt`, `dt`, `f_peak`, `sources`, and either
/// `receivers = x,z; ...` or `receiver_line = x0, z0, x1, z1, n` (or both).
pub fn parse_geometry(text: &str, origin: &Path) -> Result<Geometry> {
    let map = parse_key_values(text, origin)?;
    let mut receivers = parse_positions(map.get("receivers").map_or("", String::as_str), origin)?;
    if let Some(line) = map.get("receiver_line") {
        let v = parse_floats(line, origin)?;
        let [x0, z0, x1, z1, n] = v.as_slice() else {
            return Err(Error::format(origin, "receiver_line needs x0, z0, x1, z1, n"));
        };
        let n = *n as usize;
        for i in 0..n {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            receivers.push(Position::new(x0 + t * (x1 - x0), z0 + t * (z1 - z0)));
        }
    }
    let sources = parse_positions(map.get("sources").map_or("", String::as_str), origin)?;
    if sources.is_empty() || receivers.is_empty() {
        return Err(Error::format(origin, "geometry needs at least one source and one receiver"));
    }
    Geometry::new(
        sources,
        receivers,
        get(&map, "nt", origin)?,
        get(&map, "dt", origin)?,
        get(&map, "f_peak", origin)?,
    )
}

pub fn load_geometry(path: &Path) -> Result<Geometry> {
    parse_geometry(&read_text(path)?, path)
}

pub fn format_geometry(geom: &Geometry) -> String {
    format!(
        "nt = {}\ndt = {}\nf_peak = {}\nsources = {}\nreceivers = {}\n",
        geom.nt,
        geom.dt,
        geom.f_peak,
        format_positions(&geom.sources),
        format_positions(&geom.receivers)
    )
}

/// Small CSV writer: a header row naming columns with units, then rows.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        CsvTable {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(|v| v.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes
            .write_all(self.render().as_bytes())
            .map_err(|e| Error::io(path, e))?;
        write_file(path, &bytes)
    }
}

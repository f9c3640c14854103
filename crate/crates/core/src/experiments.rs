//! Packaged experiment recipes. Each reads a TOML config (the shipped ones in
//! `configs/` are compiled in as defaults), writes CSV and binary-grid
//! artifacts to an output directory, and returns its headline metrics.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::alt::{reduced_cg, ReducedMap};
use crate::cg::{CgConfig, DenseSymmetric};
use crate::error::{Error, Result};
use crate::grid::{build_layered_1d, Geometry, GridDims, ModelGrid, Position, ShotGather};
use crate::inversion::{
    evaluate, invert_with, landscape_to_csv, misfit_landscape_scan, model_rms_error,
    data_scale, records_to_csv, solve_extended_source, spread, unimodal_width, InnerConfig, InversionConfig,
    LandscapeRow, Method, Survey,
};
use crate::io::{load_model, save_gather, save_grid, save_model, CsvTable};
use crate::linops::{AnnihilatorKind, Frequencies};
use crate::propagator::ricker;
use crate::store::WavefieldStore;
use crate::vecops::{max_abs, norm, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    TwoLayerDatafit,
    Kernels,
    LandscapeScan,
    DtftToy,
    Small2dInversion,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] = [
        ExperimentName::TwoLayerDatafit,
        ExperimentName::Kernels,
        ExperimentName::LandscapeScan,
        ExperimentName::DtftToy,
        ExperimentName::Small2dInversion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::TwoLayerDatafit => "two-layer-datafit",
            ExperimentName::Kernels => "kernels",
            ExperimentName::LandscapeScan => "landscape-scan",
            ExperimentName::DtftToy => "dtft-toy",
            ExperimentName::Small2dInversion => "small-2d-inversion",
        }
    }

    /// The shipped config for this experiment.
    pub fn default_config(self) -> &'static str {
        match self {
            ExperimentName::TwoLayerDatafit => include_str!("../../../configs/two-layer-datafit.toml"),
            ExperimentName::Kernels => include_str!("../../../configs/kernels.toml"),
            ExperimentName::LandscapeScan => include_str!("../../../configs/landscape-scan.toml"),
            ExperimentName::DtftToy => include_str!("../../../configs/dtft-toy.toml"),
            ExperimentName::Small2dInversion => include_str!("../../../configs/small-2d-inversion.toml"),
        }
    }
}

impl std::fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = ExperimentName::ALL.iter().map(|n| n.as_str()).collect();
                Error::Config(format!("unknown experiment '{s}' (known: {})", known.join(", ")))
            })
    }
}

/// Where and how an experiment runs.
#[derive(Debug)]
pub struct ExperimentContext {
    pub out_dir: PathBuf,
    pub store: WavefieldStore,
    pub seed: u64,
}

impl ExperimentContext {
    pub fn new(out_dir: impl Into<PathBuf>, store: WavefieldStore, seed: u64) -> Result<Self> {
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(ExperimentContext { out_dir, store, seed })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub files: Vec<PathBuf>,
    pub metrics: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    fn csv(&mut self, ctx: &ExperimentContext, name: &str, table: &CsvTable) -> Result<()> {
        let p = ctx.path(name);
        table.write(&p)?;
        self.files.push(p);
        Ok(())
    }

    fn gather(&mut self, ctx: &ExperimentContext, name: &str, g: &ShotGather, geom: &Geometry) -> Result<()> {
        let p = ctx.path(name);
        save_gather(&p, g, geom)?;
        self.files.push(p);
        Ok(())
    }

    fn grid(&mut self, ctx: &ExperimentContext, name: &str, dims: &GridDims, kind: &str, v: &[f64]) -> Result<()> {
        let p = ctx.path(name);
        save_grid(&p, dims, kind, v)?;
        self.files.push(p);
        Ok(())
    }

    fn finish(mut self, ctx: &ExperimentContext) -> Result<Self> {
        let mut t = CsvTable::new(["metric[-]", "value[-]"]);
        for (k, v) in &self.metrics {
            t.push([k.clone(), format!("{v:e}")]);
        }
        self.csv(ctx, "metrics.csv", &t)?;
        Ok(self)
    }
}

pub fn parse_config<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
}

/// Runs `name` with `config` (TOML text) or the shipped default.
pub fn run_experiment(name: ExperimentName, config: Option<&str>, ctx: &ExperimentContext) -> Result<ExperimentReport> {
    let text = config.unwrap_or(name.default_config());
    let report = match name {
        ExperimentName::TwoLayerDatafit => two_layer_datafit(&parse_config(text)?, ctx)?,
        ExperimentName::Kernels => kernels(&parse_config(text)?, ctx)?,
        ExperimentName::LandscapeScan => landscape_scan(&parse_config(text)?, ctx)?.report,
        ExperimentName::DtftToy => dtft_toy(&parse_config(text)?, ctx)?,
        ExperimentName::Small2dInversion => small_2d_inversion(&parse_config(text)?, ctx)?,
    };
    report.finish(ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
/// Physical node counts; the sponge adds `nb` nodes on every side.
pub struct GridSpec {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
    pub nb: usize,
}

impl GridSpec {
    pub fn dims(&self) -> Result<GridDims> {
        GridDims::new(self.nz + 2 * self.nb, self.nx + 2 * self.nb, self.dz, self.dx, self.nb)
    }
}

/// Circular velocity perturbation added to a layered background.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
    pub dv: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub tops: Vec<f64>,
    #[serde(default)]
    pub velocities: Vec<f64>,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
    /// Velocity file overriding the layered description.
    pub file: Option<PathBuf>,
}

impl ModelSpec {
    pub fn build(&self, dims: GridDims) -> Result<ModelGrid> {
        if let Some(path) = &self.file {
            let m = load_model(path)?;
            if *m.dims() != dims {
                return Err(Error::Config(format!("{} does not match the configured grid", path.display())));
            }
            return Ok(m);
        }
        let base = build_layered_1d(&self.tops, &self.velocities, dims)?;
        if self.anomalies.is_empty() {
            return Ok(base);
        }
        let mut v = base.velocity();
        for ix in 0..dims.nx {
            for iz in 0..dims.nz {
                let p = dims.position(iz, ix);
                for a in &self.anomalies {
                    if p.distance(&Position::new(a.x, a.z)) <= a.radius {
                        v[dims.index(iz, ix)] += a.dv;
                    }
                }
            }
        }
        ModelGrid::from_velocity(dims, &v)
    }
}

/// `count` evenly spaced points from `start` to `end` (inclusive), as `[x, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub start: [f64; 2],
    pub end: Option<[f64; 2]>,
    pub count: usize,
}

impl LineSpec {
    pub fn positions(&self) -> Result<Vec<Position>> {
        if self.count == 0 {
            return Err(Error::Config("a point line needs count ≥ 1".into()));
        }
        let end = self.end.unwrap_or(self.start);
        if self.count == 1 {
            return Ok(vec![Position::new(self.start[0], self.start[1])]);
        }
        let steps = (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|k| {
                let t = k as f64 / steps;
                Position::new(
                    self.start[0] + t * (end[0] - self.start[0]),
                    self.start[1] + t * (end[1] - self.start[1]),
                )
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub sources: LineSpec,
    pub receivers: Vec<LineSpec>,
    pub nt: usize,
    pub dt: f64,
    pub f_peak: f64,
}

impl AcquisitionSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        let mut receivers = Vec::new();
        for line in &self.receivers {
            receivers.extend(line.positions()?);
        }
        Geometry::new(self.sources.positions()?, receivers, self.nt, self.dt, self.f_peak)
    }
}

/// Penalty as a multiple of the data-space scale `dᴴS(BᴴB)⁻¹Sᴴd/‖d‖²` or as an absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaScale {
    DataNormalized,
    Absolute,
}

fn one() -> f64 {
    1.0
}

fn default_beta_scale() -> BetaScale {
    BetaScale::DataNormalized
}

fn resolve_beta(
    scale: BetaScale,
    beta: f64,
    method: Method,
    model: &ModelGrid,
    survey: &Survey,
    kind: AnnihilatorKind,
) -> Result<f64> {
    match scale {
        BetaScale::Absolute => Ok(beta),
        BetaScale::DataNormalized => Ok(beta * data_scale(method, model, survey, kind)?),
    }
}

fn observed(true_model: &ModelGrid, geom: &Geometry) -> Result<Survey> {
    let w = ricker(geom.f_peak, geom.nt, geom.dt)?;
    Survey::synthesize(true_model, geom.clone(), w)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoLayerConfig {
    pub grid: GridSpec,
    pub true_model: ModelSpec,
    /// Homogeneous starting model velocity (m/s).
    pub background_velocity: f64,
    pub acquisition: AcquisitionSpec,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: BetaScale,
    pub beta: f64,
    pub annihilator: AnnihilatorKind,
    #[serde(default)]
    pub inner: InnerConfig,
}

/// Per-method synthetic gathers and relative data misfits at the background model.
#[derive(Debug, Clone)]
pub struct DatafitOutcome {
    pub observed: Survey,
    /// `(method, synthetic gathers, ‖d - synthetic‖/‖d‖)`
    pub fits: Vec<(Method, Vec<ShotGather>, f64)>,
}

pub fn two_layer_fits(cfg: &TwoLayerConfig, store: &WavefieldStore) -> Result<DatafitOutcome> {
    let dims = cfg.grid.dims()?;
    let truth = cfg.true_model.build(dims)?;
    let m0 = ModelGrid::constant(dims, cfg.background_velocity)?;
    let geom = cfg.acquisition.geometry()?;
    let survey = observed(&truth, &geom)?;
    let mut fits = Vec::new();
    for method in [Method::Fwi, Method::Wri, Method::Esi] {
        let beta = match method {
            Method::Fwi => 0.0,
            _ => resolve_beta(cfg.beta_scale, cfg.beta, method, &m0, &survey, cfg.annihilator)?,
        };
        let e = evaluate(method, &m0, &survey, cfg.annihilator, beta, &cfg.inner, None, false, store)?;
        let gathers: Vec<ShotGather> = e
            .shots
            .into_iter()
            .enumerate()
            .map(|(k, s)| ShotGather { shot_index: k, nt: geom.nt, nrec: geom.receivers.len(), data: s.synthetic })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (g, d) in gathers.iter().zip(&survey.data) {
            num += norm(&sub(&d.data, &g.data)).powi(2);
            den += d.norm().powi(2);
        }
        let rel = (num / den).sqrt();
        log::info!("{method}: relative data misfit {rel:.4e} (β = {beta:.3e})");
        fits.push((method, gathers, rel));
    }
    Ok(DatafitOutcome { observed: survey, fits })
}

pub fn two_layer_datafit(cfg: &TwoLayerConfig, ctx: &ExperimentContext) -> Result<ExperimentReport> {
    let out = two_layer_fits(cfg, &ctx.store)?;
    let geom = &out.observed.geom;
    let mut report = ExperimentReport::default();
    for (k, d) in out.observed.data.iter().enumerate() {
        report.gather(ctx, &format!("observed_shot{k:02}"), d, geom)?;
    }
    let mut t = CsvTable::new(["method[-]", "relative_data_misfit[-]"]);
    for (method, gathers, rel) in &out.fits {
        for (k, g) in gathers.iter().enumerate() {
            report.gather(ctx, &format!("{method}_synthetic_shot{k:02}"), g, geom)?;
        }
        t.push([method.to_string(), format!("{rel:e}")]);
        report.metrics.push((format!("{method}_relative_misfit"), *rel));
    }
    report.csv(ctx, "relative_misfit.csv", &t)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub grid: GridSpec,
    pub true_model: ModelSpec,
    pub background_velocity: f64,
    pub acquisition: AcquisitionSpec,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: BetaScale,
    pub beta: f64,
    pub annihilator: AnnihilatorKind,
    #[serde(default)]
    pub inner: InnerConfig,
    /// Nodes closer than this (m) to the source or receiver are left out of
    /// the energy shares.
    #[serde(default)]
    pub exclusion_radius: f64,
}

/// Kernel energy on either side of the source-receiver perpendicular bisector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideEnergy {
    pub source_side: f64,
    pub receiver_side: f64,
}

impl SideEnergy {
    pub fn receiver_share(&self) -> f64 {
        self.receiver_side / (self.source_side + self.receiver_side)
    }
}

pub fn side_energy(g: &[f64], dims: &GridDims, source: Position, receiver: Position, exclusion: f64) -> SideEnergy {
    let mut e = SideEnergy { source_side: 0.0, receiver_side: 0.0 };
    for ix in 0..dims.nx {
        for iz in 0..dims.nz {
            if !dims.is_physical(iz, ix) {
                continue;
            }
            let p = dims.position(iz, ix);
            let (ds, dr) = (p.distance(&source), p.distance(&receiver));
            if ds < exclusion || dr < exclusion {
                continue;
            }
            let v = g[dims.index(iz, ix)].powi(2);
            if ds <= dr {
                e.source_side += v;
            } else {
                e.receiver_side += v;
            }
        }
    }
    e
}

#[derive(Debug, Clone)]
pub struct KernelOutcome {
    pub dims: GridDims,
    pub kernels: Vec<(Method, Vec<f64>, SideEnergy)>,
}

pub fn sensitivity_kernels(cfg: &KernelConfig, store: &WavefieldStore) -> Result<KernelOutcome> {
    let dims = cfg.grid.dims()?;
    let truth = cfg.true_model.build(dims)?;
    let m0 = ModelGrid::constant(dims, cfg.background_velocity)?;
    let geom = cfg.acquisition.geometry()?;
    if geom.sources.len() != 1 || geom.receivers.len() != 1 {
        return Err(Error::Config("kernels need exactly one source and one receiver".into()));
    }
    let survey = observed(&truth, &geom)?;
    let mut kernels = Vec::new();
    for method in [Method::Fwi, Method::Wri, Method::Esi] {
        let beta = match method {
            Method::Fwi => 0.0,
            _ => resolve_beta(cfg.beta_scale, cfg.beta, method, &m0, &survey, cfg.annihilator)?,
        };
        let e = evaluate(method, &m0, &survey, cfg.annihilator, beta, &cfg.inner, None, true, store)?;
        let g = e.gradient.unwrap_or_default();
        let sides = side_energy(&g, &dims, geom.sources[0], geom.receivers[0], cfg.exclusion_radius);
        log::info!("{method}: receiver-side energy share {:.4}", sides.receiver_share());
        kernels.push((method, g, sides));
    }
    Ok(KernelOutcome { dims, kernels })
}

pub fn kernels(cfg: &KernelConfig, ctx: &ExperimentContext) -> Result<ExperimentReport> {
    let out = sensitivity_kernels(cfg, &ctx.store)?;
    let mut report = ExperimentReport::default();
    let mut t = CsvTable::new(["method[-]", "source_side_energy[arb]", "receiver_side_energy[arb]", "receiver_share[-]"]);
    for (method, g, sides) in &out.kernels {
        report.grid(ctx, &format!("{method}_kernel"), &out.dims, "gradient", g)?;
        t.push([
            method.to_string(),
            format!("{:e}", sides.source_side),
            format!("{:e}", sides.receiver_side),
            format!("{:e}", sides.receiver_share()),
        ]);
        report.metrics.push((format!("{method}_receiver_share"), sides.receiver_share()));
    }
    report.csv(ctx, "energy_ratio.csv", &t)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl EpsGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || self.max < self.min {
            return Err(Error::Config("ε grid needs step > 0 and max ≥ min".into()));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        // Rounded to the step so ε = 0 is hit exactly.
        Ok((0..=n)
            .map(|k| {
                let v = self.min + k as f64 * self.step;
                (v / self.step).round() * self.step
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    pub grid: GridSpec,
    pub true_model: ModelSpec,
    pub acquisition: AcquisitionSpec,
    pub eps: EpsGrid,
    pub betas: Vec<f64>,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: BetaScale,
    /// Every entry of `betas` is multiplied by this before scaling.
    #[serde(default = "one")]
    pub beta_unit: f64,
    pub methods: Vec<Method>,
    pub annihilator: AnnihilatorKind,
    #[serde(default)]
    pub inner: InnerConfig,
}

/// One misfit curve of the scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeCurve {
    pub method: Method,
    /// Nominal penalty from the config (0 for FWI).
    pub beta: f64,
    pub eps: Vec<f64>,
    pub misfit: Vec<f64>,
}

impl LandscapeCurve {
    pub fn unimodal_width(&self) -> f64 {
        unimodal_width(&self.eps, &self.misfit)
    }

    pub fn spread(&self) -> f64 {
        spread(&self.misfit)
    }

    pub fn at_zero(&self) -> Option<f64> {
        self.eps.iter().position(|&e| e == 0.0).map(|i| self.misfit[i])
    }
}

pub struct LandscapeOutcome {
    pub curves: Vec<LandscapeCurve>,
    pub report: ExperimentReport,
}

pub fn landscape_scan(cfg: &LandscapeConfig, ctx: &ExperimentContext) -> Result<LandscapeOutcome> {
    let dims = cfg.grid.dims()?;
    let truth = cfg.true_model.build(dims)?;
    let geom = cfg.acquisition.geometry()?;
    let survey = observed(&truth, &geom)?;
    let eps = cfg.eps.values()?;
    let mut rows: Vec<LandscapeRow> = Vec::new();
    let mut curves = Vec::new();
    for &method in &cfg.methods {
        let nominal: Vec<f64> = if method == Method::Fwi { vec![0.0] } else { cfg.betas.clone() };
        for &beta in &nominal {
            let actual = match method {
                Method::Fwi => 0.0,
                _ => resolve_beta(cfg.beta_scale, beta * cfg.beta_unit, method, &truth, &survey, cfg.annihilator)?,
            };
            let scanned = misfit_landscape_scan(&truth, &survey, method, &[actual], &eps, cfg.annihilator, &cfg.inner, &ctx.store)?;
            let curve = LandscapeCurve {
                method,
                beta,
                eps: eps.clone(),
                misfit: scanned.iter().map(|r| r.misfit.total).collect(),
            };
            log::info!(
                "{method} β={beta:e}: unimodal width {:.2}, spread {:.3e}",
                curve.unimodal_width(),
                curve.spread()
            );
            rows.extend(scanned.into_iter().map(|r| LandscapeRow { beta, ..r }));
            curves.push(curve);
        }
    }
    let mut report = ExperimentReport::default();
    report.csv(ctx, "landscape.csv", &landscape_to_csv(&rows))?;
    let mut t = CsvTable::new(["method[-]", "beta[-]", "unimodal_width[-]", "spread[arb]", "J_at_zero[arb]"]);
    for c in &curves {
        t.push([
            c.method.to_string(),
            format!("{:e}", c.beta),
            format!("{}", c.unimodal_width()),
            format!("{:e}", c.spread()),
            format!("{:e}", c.at_zero().unwrap_or(f64::NAN)),
        ]);
        report.metrics.push((format!("{}_beta{:e}_unimodal_width", c.method, c.beta), c.unimodal_width()));
    }
    report.csv(ctx, "landscape_summary.csv", &t)?;
    Ok(LandscapeOutcome { curves, report })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtftToyConfig {
    pub nt: usize,
    pub dt: f64,
    pub frequencies: Vec<f64>,
    /// Off-diagonal decay length (in samples) of the random Toeplitz operator.
    pub decay: f64,
    pub cg: CgConfig,
}

/// Seeded symmetric Toeplitz matrix, made SPD by diagonal dominance.
pub fn random_spd_toeplitz(n: usize, decay: f64, seed: u64) -> Result<DenseSymmetric> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row: Vec<f64> = (0..n)
        .map(|k| if k == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) * (-(k as f64) / decay).exp() })
        .collect();
    let diag = 1.0 + 2.0 * row.iter().map(|v| v.abs()).sum::<f64>();
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                diag
            } else {
                row[i.abs_diff(j)]
            }
        })
        .collect();
    DenseSymmetric::new(n, data)
}

/// `(truth, reconstruction)` of the frequency-reduced toy solve.
pub fn dtft_toy_series(cfg: &DtftToyConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let freqs = Frequencies::new(cfg.frequencies.clone(), cfg.dt)?;
    let x: Vec<f64> = (0..cfg.nt)
        .map(|n| {
            freqs
                .as_slice()
                .iter()
                .map(|f| (2.0 * std::f64::consts::PI * f * n as f64 * cfg.dt).sin())
                .sum()
        })
        .collect();
    let t = random_spd_toeplitz(cfg.nt, cfg.decay, seed)?;
    let b = crate::linops::LinearMap::apply(&t, &x)?;
    let map = ReducedMap::new(&t, freqs, cfg.nt, cfg.dt, 1)?;
    let (_, rec, report) = reduced_cg(&map, &b, &cfg.cg)?;
    log::info!("frequency-reduced CG: {} iterations", report.iterations);
    Ok((x, rec))
}

pub fn dtft_toy(cfg: &DtftToyConfig, ctx: &ExperimentContext) -> Result<ExperimentReport> {
    let (x, rec) = dtft_toy_series(cfg, ctx.seed)?;
    let mut t = CsvTable::new(["t[s]", "x_true[arb]", "x_reconstructed[arb]"]);
    for n in 0..cfg.nt {
        t.push([format!("{}", n as f64 * cfg.dt), format!("{:e}", x[n]), format!("{:e}", rec[n])]);
    }
    let mut report = ExperimentReport::default();
    report.csv(ctx, "dtft_toy.csv", &t)?;
    let err = max_abs(&sub(&rec, &x)) / max_abs(&x);
    report.metrics.push(("max_abs_error_relative".into(), err));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallInversionConfig {
    pub grid: GridSpec,
    pub true_model: ModelSpec,
    /// Gaussian smoothing length (m) that turns the true model into the start.
    pub smoothing: f64,
    pub acquisition: AcquisitionSpec,
    pub inversion: InversionConfig,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: BetaScale,
    /// Write the model every this many iterations (0 disables).
    #[serde(default)]
    pub snapshot_every: usize,
}

/// Separable Gaussian smoothing of the velocity with clamped edges.
pub fn smooth_model(model: &ModelGrid, length: f64) -> Result<ModelGrid> {
    if !(length > 0.0) {
        return Ok(model.clone());
    }
    let dims = *model.dims();
    let kernel = |h: f64| {
        let sigma = length / h;
        let half = (3.0 * sigma).ceil() as isize;
        let w: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
        let s: f64 = w.iter().sum();
        (half, w.into_iter().map(|v| v / s).collect::<Vec<f64>>())
    };
    let v = model.velocity();
    let (hz, wz) = kernel(dims.dz);
    let (hx, wx) = kernel(dims.dx);
    let mut tmp = vec![0.0; v.len()];
    for ix in 0..dims.nx {
        for iz in 0..dims.nz {
            tmp[dims.index(iz, ix)] = (-hz..=hz)
                .zip(&wz)
                .map(|(k, w)| w * v[dims.index((iz as isize + k).clamp(0, dims.nz as isize - 1) as usize, ix)])
                .sum();
        }
    }
    let mut out = vec![0.0; v.len()];
    for ix in 0..dims.nx {
        for iz in 0..dims.nz {
            out[dims.index(iz, ix)] = (-hx..=hx)
                .zip(&wx)
                .map(|(k, w)| w * tmp[dims.index(iz, (ix as isize + k).clamp(0, dims.nx as isize - 1) as usize)])
                .sum();
        }
    }
    ModelGrid::from_velocity(dims, &out)
}

#[derive(Debug, Clone)]
pub struct SmallInversionOutcome {
    pub truth: ModelGrid,
    pub start: ModelGrid,
    pub result: crate::inversion::InversionOutcome,
    /// Model RMS error (squared slowness) per recorded iteration.
    pub model_error: Vec<f64>,
}

pub fn run_small_inversion(
    cfg: &SmallInversionConfig,
    store: &WavefieldStore,
    mut snapshot: impl FnMut(usize, &ModelGrid) -> Result<Option<PathBuf>>,
) -> Result<SmallInversionOutcome> {
    let dims = cfg.grid.dims()?;
    let truth = cfg.true_model.build(dims)?;
    let start = smooth_model(&truth, cfg.smoothing)?;
    let geom = cfg.acquisition.geometry()?;
    let mut survey = observed(&truth, &geom)?;
    if cfg.inversion.method == Method::Esi {
        survey.wavelet = None;
    }
    let mut inv = cfg.inversion.clone();
    if inv.method != Method::Fwi {
        if let Some(b) = inv.beta0 {
            inv.beta0 = Some(resolve_beta(cfg.beta_scale, b, inv.method, &start, &survey, inv.annihilator)?);
        }
    }
    let mut model_error = Vec::new();
    let result = invert_with(&inv, &start, &survey, store, |rec, m| {
        model_error.push(model_rms_error(m, &truth));
        if cfg.snapshot_every > 0 && rec.iter % cfg.snapshot_every == 0 {
            snapshot(rec.iter, m)
        } else {
            Ok(None)
        }
    })?;
    Ok(SmallInversionOutcome { truth, start, result, model_error })
}

pub fn small_2d_inversion(cfg: &SmallInversionConfig, ctx: &ExperimentContext) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    let mut snapshots = Vec::new();
    let out = run_small_inversion(cfg, &ctx.store, |iter, m| {
        let p = ctx.path(&format!("iterate_{iter:03}"));
        save_model(&p, m)?;
        snapshots.push(p.clone());
        Ok(Some(p))
    })?;
    report.files.extend(snapshots);
    let p = ctx.path("true_model");
    save_model(&p, &out.truth)?;
    report.files.push(p);
    report.csv(ctx, "iterations.csv", &records_to_csv(&out.result.records))?;
    let mut t = CsvTable::new(["iter[-]", "model_rms_error[s^2/m^2]"]);
    for (rec, e) in out.result.records.iter().zip(&out.model_error) {
        t.push([rec.iter.to_string(), format!("{e:e}")]);
    }
    report.csv(ctx, "model_error.csv", &t)?;

    // Inner-solve convergence at the starting model, first shot.
    let geom = cfg.acquisition.geometry()?;
    let mut survey = observed(&out.truth, &geom)?;
    if cfg.inversion.method == Method::Esi {
        survey.wavelet = None;
    }
    if cfg.inversion.method != Method::Fwi {
        let beta = out.result.records.first().map_or(0.0, |r| r.beta);
        let (_, cg) = solve_extended_source(
            cfg.inversion.method,
            &out.start,
            &survey,
            0,
            cfg.inversion.annihilator,
            beta,
            &cfg.inversion.inner,
            None,
            &ctx.store,
        )?;
        report.csv(ctx, "cg_convergence.csv", &cg.to_csv())?;
    }
    if let Some(reason) = &out.result.stopped_early {
        log::warn!("inversion stopped early: {reason}");
    }
    report.metrics.push(("accepted_iterations".into(), (out.result.records.len() - 1) as f64));
    report.metrics.push(("initial_model_error".into(), out.model_error[0]));
    report.metrics.push(("final_model_error".into(), *out.model_error.last().unwrap_or(&f64::NAN)));
    Ok(report)
}

/// Convenience for callers that only have a path.
pub fn read_config_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        for name in ExperimentName::ALL {
            let text = name.default_config();
            let ok = match name {
                ExperimentName::TwoLayerDatafit => parse_config::<TwoLayerConfig>(text).map(|_| ()),
                ExperimentName::Kernels => parse_config::<KernelConfig>(text).map(|_| ()),
                ExperimentName::LandscapeScan => parse_config::<LandscapeConfig>(text).map(|_| ()),
                ExperimentName::DtftToy => parse_config::<DtftToyConfig>(text).map(|_| ()),
                ExperimentName::Small2dInversion => parse_config::<SmallInversionConfig>(text).map(|_| ()),
            };
            assert!(ok.is_ok(), "{name}: {ok:?}");
        }
    }

    #[test]
    fn names_round_trip() {
        for name in ExperimentName::ALL {
            assert_eq!(name.as_str().parse::<ExperimentName>().unwrap(), name);
        }
        assert!("nope".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn eps_grid_hits_zero() {
        let v = EpsGrid { min: -0.5, max: 0.5, step: 0.05 }.values().unwrap();
        assert_eq!(v.len(), 21);
        assert!(v.contains(&0.0));
        assert_eq!(EpsGrid { min: 0.0, max: 0.0, step: 0.05 }.values().unwrap(), vec![0.0]);
    }

    #[test]
    fn smoothing_keeps_constants() {
        let dims = GridDims::new(9, 11, 10.0, 10.0, 2).unwrap();
        let m = ModelGrid::constant(dims, 2000.0).unwrap();
        let s = smooth_model(&m, 30.0).unwrap();
        assert!(s.velocity().iter().all(|v| (v - 2000.0).abs() < 1e-9));
    }

    #[test]
    fn bisector_split() {
        let dims = GridDims::new(5, 11, 10.0, 10.0, 0).unwrap();
        let g: Vec<f64> = (0..dims.len()).map(|i| if (i / 5) < 3 { 1.0 } else { 0.0 }).collect();
        let e = side_energy(&g, &dims, Position::new(0.0, 0.0), Position::new(100.0, 0.0), 0.0);
        assert_eq!(e.receiver_side, 0.0);
        assert_eq!(e.source_side, 15.0);
    }
}

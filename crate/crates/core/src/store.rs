//! Wavefield storage with explicit byte accounting.
//!
//! The in-memory backend refuses any request that would push the retained
//! bytes past its budget. The disk backend writes one file per time step
//! (`<dir>/<key>/step_000042.bin`, raw little-endian `f64`) and admits any
//! working-set request.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::propagator::Wavefield;

pub const DEFAULT_BUDGET_BYTES: u64 = 2 << 30;
pub const BUDGET_ENV: &str = "XFWI_STORE_BUDGET_BYTES";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreBackend {
    Memory,
    Disk(PathBuf),
}

#[derive(Debug, Default)]
struct Retained {
    fields: HashMap<String, Wavefield>,
    bytes: u64,
}

#[derive(Debug)]
pub struct WavefieldStore {
    backend: StoreBackend,
    budget: u64,
    retained: Mutex<Retained>,
}

impl Default for WavefieldStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl WavefieldStore {
    /// In-memory store with the default budget, or the one given by
    /// `XFWI_STORE_BUDGET_BYTES`.
    pub fn in_memory() -> Self {
        let budget = std::env::var(BUDGET_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(DEFAULT_BUDGET_BYTES);
        Self::with_budget(budget)
    }

    pub fn with_budget(budget: u64) -> Self {
        WavefieldStore {
            backend: StoreBackend::Memory,
            budget,
            retained: Mutex::new(Retained::default()),
        }
    }

    pub fn disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(WavefieldStore {
            backend: StoreBackend::Disk(dir),
            budget: u64::MAX,
            retained: Mutex::new(Retained::default()),
        })
    }

    pub fn backend(&self) -> &StoreBackend {
        &self.backend
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn retained_bytes(&self) -> u64 {
        self.retained.lock().unwrap().bytes
    }

    /// Fails fast if a working set of `bytes` would not fit next to what is retained.
    pub fn admit(&self, bytes: u64) -> Result<()> {
        if let StoreBackend::Disk(_) = self.backend {
            return Ok(());
        }
        let used = self.retained_bytes();
        let available = self.budget.saturating_sub(used);
        if bytes > available {
            return Err(Error::Budget {
                requested: bytes,
                available,
                budget: self.budget,
            });
        }
        Ok(())
    }

    pub fn put(&self, key: &str, field: &Wavefield) -> Result<()> {
        match &self.backend {
            StoreBackend::Memory => {
                let bytes = field.bytes();
                let mut r = self.retained.lock().unwrap();
                let replaced = r.fields.get(key).map_or(0, Wavefield::bytes);
                let available = self.budget.saturating_sub(r.bytes - replaced);
                if bytes > available {
                    return Err(Error::Budget {
                        requested: bytes,
                        available,
                        budget: self.budget,
                    });
                }
                r.bytes = r.bytes - replaced + bytes;
                r.fields.insert(key.to_string(), field.clone());
                Ok(())
            }
            StoreBackend::Disk(dir) => write_steps(&dir.join(key), field),
        }
    }

    pub fn get(&self, key: &str) -> Result<Wavefield> {
        match &self.backend {
            StoreBackend::Memory => self
                .retained
                .lock()
                .unwrap()
                .fields
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no stored wavefield '{key}'"))),
            StoreBackend::Disk(dir) => read_steps(&dir.join(key)),
        }
    }

    pub fn remove(&self, key: &str) -> Result<()> {
        match &self.backend {
            StoreBackend::Memory => {
                let mut r = self.retained.lock().unwrap();
                if let Some(f) = r.fields.remove(key) {
                    r.bytes -= f.bytes();
                }
                Ok(())
            }
            StoreBackend::Disk(dir) => {
                let path = dir.join(key);
                if path.exists() {
                    fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
                }
                Ok(())
            }
        }
    }
}

pub fn step_file_name(step: usize) -> String {
    format!("step_{step:06}.bin")
}

fn write_steps(dir: &Path, field: &Wavefield) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = format!(
        "nt = {}\nnz = {}\nnx = {}\ndt = {}\n",
        field.nt, field.nz, field.nx, field.dt
    );
    let meta = dir.join("field.meta");
    fs::write(&meta, header).map_err(|e| Error::io(&meta, e))?;
    for n in 0..field.nt {
        let bytes: Vec<u8> = field.frame(n).iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(step_file_name(n));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_steps(dir: &Path) -> Result<Wavefield> {
    let meta = dir.join("field.meta");
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let map = crate::io::parse_key_values(&text, &meta)?;
    let parse = |k: &str| -> Result<&String> {
        map.get(k).ok_or_else(|| Error::format(&meta, format!("missing '{k}'")))
    };
    let bad = |k: &str| Error::format(&meta, format!("bad '{k}'"));
    let nt: usize = parse("nt")?.parse().map_err(|_| bad("nt"))?;
    let nz: usize = parse("nz")?.parse().map_err(|_| bad("nz"))?;
    let nx: usize = parse("nx")?.parse().map_err(|_| bad("nx"))?;
    let dt: f64 = parse("dt")?.parse().map_err(|_| bad("dt"))?;
    let mut data = Vec::with_capacity(nt * nz * nx);
    for n in 0..nt {
        let path = dir.join(step_file_name(n));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != nz * nx * 8 {
            return Err(Error::format(&path, "step file size does not match header"));
        }
        data.extend(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
    }
    Wavefield::from_data(nt, nz, nx, dt, data)
}

//! Unpreconditioned conjugate gradients on a self-adjoint [`LinearMap`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::linops::LinearMap;
use crate::store::WavefieldStore;
use crate::vecops::{axpy, dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Stop once `‖r_k‖ < tol · ‖r_0‖`.
    pub tol: f64,
    pub record_history: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 10,
            tol: 1e-3,
            record_history: true,
        }
    }
}

impl CgConfig {
    pub fn new(max_iters: usize, tol: f64) -> Result<Self> {
        let cfg = CgConfig {
            max_iters,
            tol,
            record_history: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("CG needs at least one iteration".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("CG tolerance must lie in (0, 1), got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CgReport {
    pub iterations: usize,
    /// `history[k] = ‖r_k‖`, starting with `‖r_0‖`.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl CgReport {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(["iter[-]", "residual_norm[arb]"]);
        for (k, r) in self.history.iter().enumerate() {
            t.push([k.to_string(), format!("{r:e}")]);
        }
        t
    }

    pub fn final_residual(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

/// Solves `A x = b` from `x₀ = 0`.
pub fn cg_solve(a: &dyn LinearMap, b: &[f64], cfg: &CgConfig) -> Result<(Vec<f64>, CgReport)> {
    cg_solve_from(a, b, None, cfg)
}

/// Same as [`cg_solve`], first checking that the four work vectors fit in the store budget.
pub fn cg_solve_budgeted(
    a: &dyn LinearMap,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &CgConfig,
    store: &WavefieldStore,
) -> Result<(Vec<f64>, CgReport)> {
    store.admit(4 * (b.len() * std::mem::size_of::<f64>()) as u64)?;
    cg_solve_from(a, b, x0, cfg)
}

/// CG with an optional warm start. The residual test is relative to `‖r_0‖`.
pub fn cg_solve_from(
    a: &dyn LinearMap,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &CgConfig,
) -> Result<(Vec<f64>, CgReport)> {
    cfg.validate()?;
    if !a.is_self_adjoint() {
        return Err(Error::Config("CG needs a self-adjoint operator".into()));
    }
    if b.len() != a.domain_len() {
        return Err(Error::Shape(format!(
            "right-hand side of length {} for an operator of size {}",
            b.len(),
            a.domain_len()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite right-hand side".into()));
    }

    let (mut x, mut r) = match x0 {
        Some(x0) => {
            let ax = a.apply(x0)?;
            (x0.to_vec(), b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>())
        }
        None => (vec![0.0; b.len()], b.to_vec()),
    };
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let r0 = rr.sqrt();
    let mut report = CgReport {
        iterations: 0,
        history: vec![r0],
        converged: false,
    };
    if r0 == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }

    for k in 0..cfg.max_iters {
        let ap = a.apply(&p)?;
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::Breakdown {
                iteration: k,
                curvature,
            });
        }
        let alpha = rr / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_next = dot(&r, &r);
        let rn = rr_next.sqrt();
        report.iterations = k + 1;
        if cfg.record_history || k + 1 == cfg.max_iters {
            report.history.push(rn);
        }
        if rn < cfg.tol * r0 {
            report.converged = true;
            if !cfg.record_history {
                report.history.push(rn);
            }
            break;
        }
        let beta = rr_next / rr;
        rr = rr_next;
        for (p, r) in p.iter_mut().zip(&r) {
            *p = r + beta * *p;
        }
    }
    if !report.converged {
        log::debug!(
            "CG stopped after {} iterations at relative residual {:.3e}",
            report.iterations,
            report.final_residual() / r0
        );
    }
    Ok((x, report))
}

/// Dense symmetric matrix as a [`LinearMap`], for oracles and small toys.
#[derive(Debug, Clone)]
pub struct DenseSymmetric {
    n: usize,
    data: Vec<f64>,
}

impl DenseSymmetric {
    /// Row-major `n × n` entries; symmetry is the caller's promise.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        Ok(DenseSymmetric { n, data })
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }
}

impl LinearMap for DenseSymmetric {
    fn domain_len(&self) -> usize {
        self.n
    }
    fn range_len(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.data.chunks_exact(self.n).map(|row| dot(row, x)).collect())
    }
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.apply(y)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

/// `A = I`
pub struct IdentityMap(pub usize);

impl LinearMap for IdentityMap {
    fn domain_len(&self) -> usize {
        self.0
    }
    fn range_len(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(y.to_vec())
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

/// Relative residual reached by a report.
pub fn relative_residual(report: &CgReport) -> f64 {
    match report.history.first() {
        Some(&r0) if r0 > 0.0 => report.final_residual() / r0,
        _ => 0.0,
    }
}

pub fn residual_norm(a: &dyn LinearMap, x: &[f64], b: &[f64]) -> Result<f64> {
    let ax = a.apply(x)?;
    Ok(norm(&crate::vecops::sub(b, &ax)))
}

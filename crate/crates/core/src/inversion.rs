//! Misfits, adjoint-state gradients and the nested inversion loop.
//!
//! All three formulations minimize over squared slowness `m`:
//!
//! * FWI: `½‖R A⁻¹ f - d‖²`
//! * WRI: `min_q ½‖R A⁻¹(f + q) - d‖² + β ½‖q‖²`
//! * ESI: `min_q ½‖R A⁻¹ q - d‖² + β ½‖B q‖²` (no physical source needed)
//!
//! The inner minimization over `q` is the normal equation of [`crate::linops`].
//! Gradients are `Σ_n λⁿ ⊙ Dₙ(u)` with `Dₙ = ∂A/∂m` of the time stepper and
//! `λ = A⁻ᴴRᴴ(d - R u)`, which equals `β q` (WRI) or `β BᴴB q` (ESI) at the
//! inner optimum. Inner products are plain sums over nodes and steps.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alt::{data_space_solve_esi, gauss_seidel_solve};
use crate::cg::{cg_solve_budgeted, CgConfig, CgReport};
use crate::error::{Error, Result};
use crate::grid::{perturb_model, Geometry, ModelGrid, ShotGather};
use crate::io::CsvTable;
use crate::linops::{
    node_mask, op_s, point_data, Annihilator, AnnihilatorKind, LinearMap, Masked, NormalOperator,
    OpS,
};
use crate::propagator::{Propagator, SourceTerm, Wavefield};
use crate::store::{StoreBackend, WavefieldStore};
use crate::vecops::{dot, max_abs, norm, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fwi,
    Wri,
    Esi,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fwi => "fwi",
            Method::Wri => "wri",
            Method::Esi => "esi",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fwi" => Ok(Method::Fwi),
            "wri" => Ok(Method::Wri),
            "esi" => Ok(Method::Esi),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// `total = data + beta * penalty`
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MisfitBreakdown {
    pub total: f64,
    pub data: f64,
    pub penalty: f64,
    pub beta: f64,
}

impl MisfitBreakdown {
    pub fn new(data: f64, penalty: f64, beta: f64) -> Self {
        MisfitBreakdown {
            total: data + beta * penalty,
            data,
            penalty,
            beta,
        }
    }

    fn accumulate(self, other: MisfitBreakdown) -> Self {
        MisfitBreakdown::new(self.data + other.data, self.penalty + other.penalty, self.beta)
    }
}

/// How the inner normal equation is solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InnerSolver {
    Cg,
    /// CG in the whitened variable `p = B q`, i.e. on `B⁻¹SᴴSB⁻¹ + βI`.
    PreconditionedCg,
    DataSpace,
    GaussSeidel { iterations: usize },
}

impl Default for InnerSolver {
    fn default() -> Self {
        InnerSolver::Cg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    pub solver: InnerSolver,
    pub cg: CgConfig,
    /// Seed CG with the previous outer iteration's source instead of zero.
    pub warm_start: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            solver: InnerSolver::Cg,
            cg: CgConfig::default(),
            warm_start: false,
        }
    }
}

/// Observed data and acquisition shared by every evaluation.
#[derive(Debug, Clone)]
pub struct Survey {
    pub geom: Geometry,
    /// One gather per source, in source order.
    pub data: Vec<ShotGather>,
    /// Physical source wavelet, required by FWI and WRI.
    pub wavelet: Option<Vec<f64>>,
}

impl Survey {
    pub fn new(geom: Geometry, data: Vec<ShotGather>, wavelet: Option<Vec<f64>>) -> Result<Self> {
        if data.len() != geom.sources.len() {
            return Err(Error::Shape(format!(
                "{} gathers for {} sources",
                data.len(),
                geom.sources.len()
            )));
        }
        for d in &data {
            if d.nt != geom.nt || d.nrec != geom.receivers.len() {
                return Err(Error::Shape(format!("gather {} does not match the geometry", d.shot_index)));
            }
        }
        if let Some(w) = &wavelet {
            if w.len() != geom.nt {
                return Err(Error::Shape("wavelet length differs from nt".into()));
            }
        }
        Ok(Survey { geom, data, wavelet })
    }

    /// Synthetic data `R A⁻¹ f` for every shot of `geom`.
    pub fn synthesize(model: &ModelGrid, geom: Geometry, wavelet: Vec<f64>) -> Result<Self> {
        let s = op_s(model, &geom)?;
        let data = (0..geom.sources.len())
            .into_par_iter()
            .map(|shot| Ok(s.gather(point_data(&s, &geom, shot, &wavelet)?, shot)))
            .collect::<Result<Vec<_>>>()?;
        Survey::new(geom, data, Some(wavelet))
    }

    fn wavelet_for(&self, method: Method) -> Result<&[f64]> {
        self.wavelet.as_deref().ok_or_else(|| {
            Error::Config(format!("{method} needs a physical source wavelet"))
        })
    }

    pub fn data_energy(&self) -> f64 {
        self.data.iter().map(|d| dot(&d.data, &d.data)).sum()
    }
}

/// Operators for one shot.
struct ShotContext {
    s: OpS,
    b: Annihilator,
    source_node: usize,
}

fn shot_context(model: &ModelGrid, geom: &Geometry, shot: usize, method: Method, kind: AnnihilatorKind) -> Result<ShotContext> {
    let s = op_s(model, geom)?;
    let b = match method {
        Method::Esi => Annihilator::for_shot(kind, model.dims(), geom, shot)?,
        _ => Annihilator::identity(model.dims(), geom.nt),
    };
    let source_node = geom.source_node(shot, model.dims())?;
    Ok(ShotContext { s, b, source_node })
}

fn point_movie(ctx: &ShotContext, wavelet: &[f64], q: Option<&[f64]>) -> Result<Wavefield> {
    let p = ctx.s.propagator();
    let len = p.dims().len();
    let node = ctx.source_node;
    let mut u = Wavefield::zeros(p.nt(), p.dims(), p.dt());
    p.forward_streamed(
        |n, buf| {
            if let Some(q) = q {
                crate::vecops::axpy(1.0, &q[n * len..(n + 1) * len], buf);
            }
            buf[node] += wavelet[n];
        },
        |n, f| {
            u.frame_mut(n).copy_from_slice(f);
            Ok(())
        },
    )?;
    Ok(u)
}

fn source_movie(ctx: &ShotContext, q: &[f64]) -> Result<Wavefield> {
    let p = ctx.s.propagator();
    let src = Wavefield::from_data(p.nt(), p.dims().nz, p.dims().nx, p.dt(), q.to_vec())?;
    p.forward(&SourceTerm::Distributed(src))
}

fn sample(ctx: &ShotContext, u: &Wavefield) -> Vec<f64> {
    let nt = u.nt;
    let mut d = vec![0.0; ctx.s.data_len()];
    for (r, &node) in ctx.s.receivers().iter().enumerate() {
        for n in 0..nt {
            d[r * nt + n] = u.frame(n)[node];
        }
    }
    d
}

static SPILL_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Keeps the forward movie through the store: admitted against the memory
/// budget, or written to and read back from the spill directory.
fn retain(store: &WavefieldStore, u: Wavefield) -> Result<Wavefield> {
    match store.backend() {
        StoreBackend::Memory => {
            store.admit(u.bytes())?;
            Ok(u)
        }
        StoreBackend::Disk(_) => {
            let key = format!("forward_{:06}", SPILL_COUNTER.fetch_add(1, Ordering::Relaxed));
            store.put(&key, &u)?;
            drop(u);
            let back = store.get(&key)?;
            store.remove(&key)?;
            Ok(back)
        }
    }
}

/// Inner solve of the extended-source normal equation for one shot.
pub fn solve_extended_source(
    method: Method,
    model: &ModelGrid,
    survey: &Survey,
    shot: usize,
    kind: AnnihilatorKind,
    beta: f64,
    inner: &InnerConfig,
    warm: Option<&[f64]>,
    store: &WavefieldStore,
) -> Result<(Vec<f64>, CgReport)> {
    let ctx = shot_context(model, &survey.geom, shot, method, kind)?;
    solve_in_context(method, &ctx, survey, shot, beta, inner, warm, store)
}

#[allow(clippy::too_many_arguments)]
fn solve_in_context(
    method: Method,
    ctx: &ShotContext,
    survey: &Survey,
    shot: usize,
    beta: f64,
    inner: &InnerConfig,
    warm: Option<&[f64]>,
    store: &WavefieldStore,
) -> Result<(Vec<f64>, CgReport)> {
    let d = &survey.data[shot];
    let target = match method {
        Method::Fwi => return Err(Error::Config("FWI has no extended source".into())),
        Method::Esi => d.clone(),
        Method::Wri => {
            let f = survey.wavelet_for(method)?;
            let sf = ctx.s.apply_streamed(|n, buf| buf[ctx.source_node] += f[n])?;
            ShotGather {
                data: sub(&d.data, &sf),
                ..d.clone()
            }
        }
    };
    match inner.solver {
        InnerSolver::Cg => {
            let op = NormalOperator::new(ctx.s.clone(), ctx.b.clone(), beta)?;
            let rhs = ctx.s.apply_adjoint(&target.data)?;
            let x0 = if inner.warm_start { warm } else { None };
            cg_solve_budgeted(&op, &rhs, x0, &inner.cg, store)
        }
        InnerSolver::PreconditionedCg => {
            let op = Whitened(NormalOperator::new(ctx.s.clone(), ctx.b.clone(), beta)?);
            let rhs = ctx.b.apply_root(&ctx.s.apply_adjoint(&target.data)?, true)?;
            let x0 = match (inner.warm_start, warm) {
                (true, Some(q)) => Some(ctx.b.apply_root(q, false)?),
                _ => None,
            };
            let (p, report) = cg_solve_budgeted(&op, &rhs, x0.as_deref(), &inner.cg, store)?;
            Ok((ctx.b.apply_root(&p, true)?, report))
        }
        InnerSolver::DataSpace => {
            let sol = data_space_solve_esi(&ctx.s, &ctx.b, beta, &target, &inner.cg)?;
            Ok((sol.q, sol.report))
        }
        InnerSolver::GaussSeidel { iterations } => {
            let out = gauss_seidel_solve(&ctx.s, &ctx.b, beta, &target.data, iterations, None)?;
            if out.diverged {
                return Err(Error::Numerical(format!(
                    "Gauss-Seidel inner solve diverged for β = {beta:e}; the penalty is below its convergence threshold"
                )));
            }
            let history = out.update_norms.clone();
            let report = CgReport {
                iterations: out.state.k,
                converged: true,
                history: std::iter::once(norm(&target.data)).chain(history).collect(),
            };
            Ok((out.state.q, report))
        }
    }
}

/// `B⁻¹ (SᴴS + βBᴴB) B⁻¹`
struct Whitened(NormalOperator);

impl LinearMap for Whitened {
    fn domain_len(&self) -> usize {
        self.0.domain_len()
    }
    fn range_len(&self) -> usize {
        self.0.range_len()
    }
    fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let b = self.0.annihilator();
        b.apply_root(&self.0.apply(&b.apply_root(p, true)?)?, true)
    }
    fn apply_adjoint(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.apply(p)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

/// `½‖R A⁻¹ f - d‖²` summed over shots.
pub fn misfit_fwi(model: &ModelGrid, survey: &Survey) -> Result<MisfitBreakdown> {
    let f = survey.wavelet_for(Method::Fwi)?;
    let s = op_s(model, &survey.geom)?;
    let parts = (0..survey.data.len())
        .into_par_iter()
        .map(|shot| {
            let r = sub(&point_data(&s, &survey.geom, shot, f)?, &survey.data[shot].data);
            Ok(0.5 * dot(&r, &r))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MisfitBreakdown::new(parts.iter().sum(), 0.0, 0.0))
}

/// `½‖R A⁻¹(f + q) - d‖² + β ½‖q‖²` for one shot.
pub fn misfit_wri(model: &ModelGrid, survey: &Survey, shot: usize, beta: f64, q: &[f64]) -> Result<MisfitBreakdown> {
    let ctx = shot_context(model, &survey.geom, shot, Method::Wri, AnnihilatorKind::Identity)?;
    let f = survey.wavelet_for(Method::Wri)?;
    let len = ctx.s.dims().len();
    let pred = ctx.s.apply_streamed(|n, buf| {
        crate::vecops::axpy(1.0, &q[n * len..(n + 1) * len], buf);
        buf[ctx.source_node] += f[n];
    })?;
    let r = sub(&pred, &survey.data[shot].data);
    Ok(MisfitBreakdown::new(0.5 * dot(&r, &r), 0.5 * dot(q, q), beta))
}

/// `½‖R A⁻¹ q - d‖² + β ½‖B q‖²` for one shot.
pub fn misfit_esi(model: &ModelGrid, survey: &Survey, shot: usize, b: &Annihilator, beta: f64, q: &[f64]) -> Result<MisfitBreakdown> {
    let s = op_s(model, &survey.geom)?;
    let r = sub(&s.apply(q)?, &survey.data[shot].data);
    Ok(MisfitBreakdown::new(0.5 * dot(&r, &r), b.penalty(q), beta))
}

/// Per-shot result of one evaluation.
#[derive(Debug, Clone)]
pub struct ShotEvaluation {
    pub misfit: MisfitBreakdown,
    pub gradient: Option<Vec<f64>>,
    pub source: Option<Vec<f64>>,
    pub report: Option<CgReport>,
    /// `R u` of the reconstructed/modeled wavefield.
    pub synthetic: Vec<f64>,
}

/// Inner solve (WRI/ESI), misfit and optionally the gradient for one shot.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_shot(
    method: Method,
    model: &ModelGrid,
    survey: &Survey,
    shot: usize,
    kind: AnnihilatorKind,
    beta: f64,
    inner: &InnerConfig,
    warm: Option<&[f64]>,
    with_gradient: bool,
    store: &WavefieldStore,
) -> Result<ShotEvaluation> {
    let ctx = shot_context(model, &survey.geom, shot, method, kind)?;
    let d = &survey.data[shot].data;
    let prop: &Propagator = ctx.s.propagator();
    match method {
        Method::Fwi => {
            let f = survey.wavelet_for(method)?;
            let u = retain(store, point_movie(&ctx, f, None)?)?;
            let synthetic = sample(&ctx, &u);
            let residual = sub(d, &synthetic);
            let misfit = MisfitBreakdown::new(0.5 * dot(&residual, &residual), 0.0, 0.0);
            let gradient = if with_gradient {
                let g = ctx.s.gather(residual, shot);
                Some(prop.adjoint_correlate(&g, ctx.s.receivers(), &u)?)
            } else {
                None
            };
            Ok(ShotEvaluation {
                misfit,
                gradient,
                source: None,
                report: None,
                synthetic,
            })
        }
        Method::Wri | Method::Esi => {
            let (q, report) = solve_in_context(method, &ctx, survey, shot, beta, inner, warm, store)?;
            let u = match method {
                Method::Wri => point_movie(&ctx, survey.wavelet_for(method)?, Some(&q))?,
                _ => source_movie(&ctx, &q)?,
            };
            let u = retain(store, u)?;
            let synthetic = sample(&ctx, &u);
            let r = sub(&synthetic, d);
            let misfit = MisfitBreakdown::new(0.5 * dot(&r, &r), ctx.b.penalty(&q), beta);
            let gradient = if with_gradient {
                let mut lambda = ctx.b.apply_sq(&q)?;
                lambda.iter_mut().for_each(|v| *v *= beta);
                let lambda = Wavefield::from_data(u.nt, u.nz, u.nx, u.dt, lambda)?;
                Some(prop.correlate_dadm(&lambda, &u))
            } else {
                None
            };
            Ok(ShotEvaluation {
                misfit,
                gradient,
                source: Some(q),
                report: Some(report),
                synthetic,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub misfit: MisfitBreakdown,
    pub gradient: Option<Vec<f64>>,
    pub shots: Vec<ShotEvaluation>,
}

/// All shots in parallel, reduced in shot order so the result does not
/// depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    method: Method,
    model: &ModelGrid,
    survey: &Survey,
    kind: AnnihilatorKind,
    beta: f64,
    inner: &InnerConfig,
    warm: Option<&[Vec<f64>]>,
    with_gradient: bool,
    store: &WavefieldStore,
) -> Result<Evaluation> {
    // Concurrent working set: the forward movie and adjoint/source movie per
    // shot, plus four CG vectors for the extended-source methods.
    let movie = Wavefield::bytes_for(survey.geom.nt, model.dims());
    let per_shot = if method == Method::Fwi { 2 } else { 6 };
    let concurrent = survey.data.len().min(rayon::current_num_threads()).max(1) as u64;
    if let StoreBackend::Memory = store.backend() {
        store.admit(movie * per_shot * concurrent)?;
    }
    let shots = (0..survey.data.len())
        .into_par_iter()
        .map(|shot| {
            let w = warm.and_then(|w| w.get(shot)).map(Vec::as_slice);
            evaluate_shot(method, model, survey, shot, kind, beta, inner, w, with_gradient, store)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut misfit = MisfitBreakdown::new(0.0, 0.0, beta);
    let mut gradient = with_gradient.then(|| vec![0.0; model.dims().len()]);
    for s in &shots {
        misfit = misfit.accumulate(s.misfit);
        if let (Some(acc), Some(g)) = (gradient.as_mut(), s.gradient.as_ref()) {
            crate::vecops::axpy(1.0, g, acc);
        }
    }
    if let Some(g) = &gradient {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
    }
    Ok(Evaluation {
        misfit,
        gradient,
        shots,
    })
}

pub fn gradient_fwi(model: &ModelGrid, survey: &Survey, store: &WavefieldStore) -> Result<(MisfitBreakdown, Vec<f64>)> {
    let e = evaluate(Method::Fwi, model, survey, AnnihilatorKind::Identity, 0.0, &InnerConfig::default(), None, true, store)?;
    Ok((e.misfit, e.gradient.unwrap_or_default()))
}

/// `β Σₙ qⁿ ⊙ Dₙ(u)` with `u = A⁻¹(f + q)` for one shot and a given `q`.
pub fn gradient_wri(model: &ModelGrid, survey: &Survey, shot: usize, beta: f64, q: &[f64]) -> Result<Vec<f64>> {
    let ctx = shot_context(model, &survey.geom, shot, Method::Wri, AnnihilatorKind::Identity)?;
    let u = point_movie(&ctx, survey.wavelet_for(Method::Wri)?, Some(q))?;
    let lambda = Wavefield::from_data(u.nt, u.nz, u.nx, u.dt, q.iter().map(|v| beta * v).collect())?;
    Ok(ctx.s.propagator().correlate_dadm(&lambda, &u))
}

/// `Σₙ (β BᴴB q)ⁿ ⊙ Dₙ(u)` with `u = A⁻¹ q` for one shot and a given `q`.
pub fn gradient_esi(model: &ModelGrid, survey: &Survey, b: &Annihilator, beta: f64, q: &[f64]) -> Result<Vec<f64>> {
    let s = op_s(model, &survey.geom)?;
    let p = s.propagator();
    let src = Wavefield::from_data(p.nt(), p.dims().nz, p.dims().nx, p.dt(), q.to_vec())?;
    let u = p.forward(&SourceTerm::Distributed(src))?;
    let mut lambda = b.apply_sq(q)?;
    lambda.iter_mut().for_each(|v| *v *= beta);
    let lambda = Wavefield::from_data(u.nt, u.nz, u.nx, u.dt, lambda)?;
    Ok(p.correlate_dadm(&lambda, &u))
}

/// Restricted `β = 0` solve `P SᴴS P q = P Sᴴ d` with `P` selecting the source
/// node: the recovered `q` there is the source wavelet.
pub fn estimate_wavelet(
    model: &ModelGrid,
    survey: &Survey,
    shot: usize,
    cfg: &CgConfig,
) -> Result<(Vec<f64>, CgReport)> {
    let ctx = shot_context(model, &survey.geom, shot, Method::Esi, AnnihilatorKind::Identity)?;
    let op = NormalOperator::new(ctx.s.clone(), ctx.b.clone(), 0.0)?;
    let nt = survey.geom.nt;
    let masked = Masked::new(&op, node_mask(model.dims(), nt, ctx.source_node))?;
    let rhs = masked.restrict(&ctx.s.apply_adjoint(&survey.data[shot].data)?);
    let (q, report) = crate::cg::cg_solve(&masked, &rhs, cfg)?;
    let len = model.dims().len();
    Ok(((0..nt).map(|n| q[n * len + ctx.source_node]).collect(), report))
}

/// Discrepancy-principle rule: tighten the constraint once the data misfit
/// reaches the noise target.
pub fn update_beta(data_misfit: f64, noise_target: f64, beta: f64, growth: f64) -> f64 {
    if data_misfit < noise_target {
        beta * growth
    } else {
        beta
    }
}

/// Rayleigh quotient `dᴴ S (BᴴB)⁻¹ Sᴴ d / ‖d‖²` of the data-space kernel over
/// all shots (`B = I` except for ESI): the scale at which `β` starts to
/// compete with the data term.
pub fn data_scale(method: Method, model: &ModelGrid, survey: &Survey, kind: AnnihilatorKind) -> Result<f64> {
    let parts = (0..survey.data.len())
        .into_par_iter()
        .map(|shot| {
            let ctx = shot_context(model, &survey.geom, shot, method, kind)?;
            let d = &survey.data[shot].data;
            let shd = ctx.s.apply_adjoint(d)?;
            let weighted = ctx.b.apply_sq_inv(&shd)?;
            Ok((dot(&shd, &weighted), dot(d, d)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (num, den) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Starting penalty `1e-3 × data_scale`.
pub fn default_beta0(method: Method, model: &ModelGrid, survey: &Survey, kind: AnnihilatorKind) -> Result<f64> {
    Ok(1e-3 * data_scale(method, model, survey, kind)?)
}

/// Limited-memory BFGS two-loop recursion.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    memory: usize,
    scale_initial: bool,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    pub fn new(memory: usize, scale_initial: bool) -> Self {
        Lbfgs {
            memory: memory.max(1),
            scale_initial,
            pairs: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores `(s, y)`; pairs without positive curvature are skipped.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-14 * norm(&s) * norm(&y)) {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// `-H g`
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            crate::vecops::axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if self.scale_initial {
            if let Some((s, y, _)) = self.pairs.back() {
                let gamma = dot(s, y) / dot(y, y);
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            crate::vecops::axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearchConfig {
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// First trial step keeps `max |α δm| ≤ this × max |m|`.
    pub max_relative_update: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 20,
            max_relative_update: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub method: Method,
    pub annihilator: AnnihilatorKind,
    /// Starting penalty; `None` picks `1e-3 ‖Sᴴd‖²/‖d‖²`.
    pub beta0: Option<f64>,
    /// Noise target for the discrepancy rule, as a fraction of `‖d‖²`.
    pub noise_fraction: f64,
    pub beta_growth: f64,
    pub outer_iters: usize,
    pub lbfgs_memory: usize,
    pub line_search: LineSearchConfig,
    pub inner: InnerConfig,
    /// Gradient is zeroed above this depth (meters), e.g. a water column.
    pub water_depth: Option<f64>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            method: Method::Esi,
            annihilator: AnnihilatorKind::SpatialDistance,
            beta0: None,
            noise_fraction: 1e-4,
            beta_growth: 2.0,
            outer_iters: 6,
            lbfgs_memory: 5,
            line_search: LineSearchConfig::default(),
            inner: InnerConfig::default(),
            water_depth: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters < 1 {
            return Err(Error::Config("at least one outer iteration is required".into()));
        }
        if self.lbfgs_memory < 1 {
            return Err(Error::Config("L-BFGS memory must be at least 1".into()));
        }
        if let Some(b) = self.beta0 {
            if !(b >= 0.0) {
                return Err(Error::Config(format!("beta0 must be non-negative, got {b}")));
            }
        }
        if !(self.beta_growth >= 1.0) {
            return Err(Error::Config("beta growth factor must be at least 1".into()));
        }
        self.inner.cg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub misfit: MisfitBreakdown,
    pub grad_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Where the model of this iteration was written, if anywhere.
    pub snapshot: Option<std::path::PathBuf>,
}

pub fn records_to_csv(records: &[IterationRecord]) -> CsvTable {
    let mut t = CsvTable::new([
        "iter[-]",
        "J_total[arb]",
        "J_e[arb]",
        "J_p[arb]",
        "beta[-]",
        "grad_norm[arb]",
        "alpha[-]",
    ]);
    for r in records {
        t.push([
            r.iter.to_string(),
            format!("{:e}", r.misfit.total),
            format!("{:e}", r.misfit.data),
            format!("{:e}", r.misfit.penalty),
            format!("{:e}", r.beta),
            format!("{:e}", r.grad_norm),
            format!("{:e}", r.alpha),
        ]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub model: ModelGrid,
    pub records: Vec<IterationRecord>,
    /// Why the loop ended before `outer_iters`, if it did.
    pub stopped_early: Option<String>,
}

/// Physical-node mask below the optional water column.
pub fn gradient_mask(model: &ModelGrid, water_depth: Option<f64>) -> Vec<bool> {
    let dims = model.dims();
    let mut mask = vec![false; dims.len()];
    for ix in 0..dims.nx {
        for iz in 0..dims.nz {
            let below_water = water_depth.map_or(true, |w| dims.position(iz, ix).z >= w);
            mask[dims.index(iz, ix)] = dims.is_physical(iz, ix) && below_water;
        }
    }
    mask
}

pub fn invert(cfg: &InversionConfig, m0: &ModelGrid, survey: &Survey, store: &WavefieldStore) -> Result<InversionOutcome> {
    invert_with(cfg, m0, survey, store, |_, _| Ok(None))
}

/// Nested loop: inner source solve, gradient, L-BFGS direction, backtracking
/// line search, then the β update. `observe` sees every accepted model and
/// may return a snapshot path to record.
pub fn invert_with(
    cfg: &InversionConfig,
    m0: &ModelGrid,
    survey: &Survey,
    store: &WavefieldStore,
    mut observe: impl FnMut(&IterationRecord, &ModelGrid) -> Result<Option<std::path::PathBuf>>,
) -> Result<InversionOutcome> {
    cfg.validate()?;
    survey.geom.validate(m0)?;
    let method = cfg.method;
    let mut beta = match method {
        Method::Fwi => 0.0,
        _ => match cfg.beta0 {
            Some(b) => b,
            None => default_beta0(method, m0, survey, cfg.annihilator)?,
        },
    };
    if method != Method::Fwi && !(beta > 0.0) {
        log::warn!("{method} inversion started with β = 0; the penalty term is inactive");
    }
    let noise_target = cfg.noise_fraction * survey.data_energy();
    let mask = gradient_mask(m0, cfg.water_depth);
    let masked = |mut g: Vec<f64>| {
        for (v, &keep) in g.iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        g
    };

    let mut model = m0.clone();
    let eval = |m: &ModelGrid, beta: f64, warm: Option<&[Vec<f64>]>, grad: bool| {
        evaluate(method, m, survey, cfg.annihilator, beta, &cfg.inner, warm, grad, store)
    };
    let mut current = eval(&model, beta, None, true)?;
    let mut g = masked(current.gradient.take().unwrap_or_default());
    let mut lbfgs = Lbfgs::new(cfg.lbfgs_memory, true);
    let mut records = Vec::new();
    let mut record = IterationRecord {
        iter: 0,
        misfit: current.misfit,
        grad_norm: norm(&g),
        alpha: 0.0,
        beta,
        snapshot: None,
    };
    record.snapshot = observe(&record, &model)?;
    records.push(record);
    let mut stopped_early = None;

    for iter in 1..=cfg.outer_iters {
        if norm(&g) == 0.0 {
            stopped_early = Some("gradient vanished".to_string());
            break;
        }
        let mut dir = lbfgs.direction(&g);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            lbfgs.reset();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let m_now = model.slowness().to_vec();
        let mut alpha = 1.0f64.min(cfg.line_search.max_relative_update * max_abs(&m_now) / max_abs(&dir));
        let warm: Option<Vec<Vec<f64>>> = cfg
            .inner
            .warm_start
            .then(|| current.shots.iter().filter_map(|s| s.source.clone()).collect());
        let mut accepted = None;
        for _ in 0..=cfg.line_search.max_backtracks {
            let trial: Vec<f64> = m_now.iter().zip(&dir).map(|(m, d)| m + alpha * d).collect();
            if trial.iter().all(|&v| v > 0.0) {
                let trial_model = model.with_slowness(trial)?;
                match eval(&trial_model, beta, warm.as_deref(), true) {
                    Ok(e) if e.misfit.total <= current.misfit.total + cfg.line_search.c1 * alpha * slope => {
                        accepted = Some((trial_model, e));
                        break;
                    }
                    Ok(_) | Err(Error::Instability(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            alpha *= cfg.line_search.shrink;
        }
        let Some((next_model, mut next)) = accepted else {
            stopped_early = Some(format!(
                "line search failed after {} backtracks at iteration {iter}",
                cfg.line_search.max_backtracks
            ));
            log::warn!("{}", stopped_early.as_deref().unwrap_or_default());
            break;
        };
        let g_next = masked(next.gradient.take().unwrap_or_default());
        let s = sub(next_model.slowness(), model.slowness());
        let y = sub(&g_next, &g);
        lbfgs.push(s, y);

        let misfit = next.misfit;
        model = next_model;
        g = g_next;
        current = next;
        let mut record = IterationRecord {
            iter,
            misfit,
            grad_norm: norm(&g),
            alpha,
            beta,
            snapshot: None,
        };
        record.snapshot = observe(&record, &model)?;
        log::info!(
            "{method} iter {iter}: J = {:.6e} (J_e = {:.6e}, J_p = {:.6e}), β = {beta:.3e}, α = {alpha:.3e}",
            misfit.total,
            misfit.data,
            misfit.penalty
        );
        records.push(record);

        if method != Method::Fwi {
            let next_beta = update_beta(misfit.data, noise_target, beta, cfg.beta_growth);
            if next_beta != beta {
                beta = next_beta;
                lbfgs.reset();
                current = eval(&model, beta, None, true)?;
                g = masked(current.gradient.take().unwrap_or_default());
            }
        }
    }
    Ok(InversionOutcome {
        model,
        records,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LandscapeRow {
    pub method: Method,
    pub eps: f64,
    pub beta: f64,
    pub misfit: MisfitBreakdown,
}

pub fn landscape_to_csv(rows: &[LandscapeRow]) -> CsvTable {
    let mut t = CsvTable::new(["method[-]", "eps[-]", "beta[-]", "J_total[arb]", "J_e[arb]", "J_p[arb]"]);
    for r in rows {
        t.push([
            r.method.to_string(),
            format!("{}", r.eps),
            format!("{:e}", r.beta),
            format!("{:e}", r.misfit.total),
            format!("{:e}", r.misfit.data),
            format!("{:e}", r.misfit.penalty),
        ]);
    }
    t
}

/// Minimized misfit at `(1 + ε) m_true` for each `ε` (and each `β` for WRI/ESI).
#[allow(clippy::too_many_arguments)]
pub fn misfit_landscape_scan(
    m_true: &ModelGrid,
    survey: &Survey,
    method: Method,
    betas: &[f64],
    eps_grid: &[f64],
    kind: AnnihilatorKind,
    inner: &InnerConfig,
    store: &WavefieldStore,
) -> Result<Vec<LandscapeRow>> {
    let betas: Vec<f64> = if method == Method::Fwi { vec![0.0] } else { betas.to_vec() };
    let mut rows = Vec::new();
    for &beta in &betas {
        for &eps in eps_grid {
            let model = perturb_model(m_true, eps)?;
            let e = evaluate(method, &model, survey, kind, beta, inner, None, false, store)?;
            log::debug!("{method} β={beta:e} ε={eps:+.2}: J = {:.6e}", e.misfit.total);
            rows.push(LandscapeRow {
                method,
                eps,
                beta,
                misfit: e.misfit,
            });
        }
    }
    Ok(rows)
}

/// Width of the interval around `ε = 0` on which `J` is unimodal: from the
/// sample nearest zero, descend to the local minimum, then extend each way
/// while `J` keeps rising.
pub fn unimodal_width(eps: &[f64], j: &[f64]) -> f64 {
    if eps.is_empty() || eps.len() != j.len() {
        return 0.0;
    }
    let mut i = (0..eps.len())
        .min_by(|&a, &b| eps[a].abs().total_cmp(&eps[b].abs()))
        .unwrap_or(0);
    loop {
        if i > 0 && j[i - 1] < j[i] {
            i -= 1;
        } else if i + 1 < j.len() && j[i + 1] < j[i] {
            i += 1;
        } else {
            break;
        }
    }
    let (mut lo, mut hi) = (i, i);
    while lo > 0 && j[lo - 1] >= j[lo] {
        lo -= 1;
    }
    while hi + 1 < j.len() && j[hi + 1] >= j[hi] {
        hi += 1;
    }
    eps[hi] - eps[lo]
}

/// `max J - min J` of one curve.
pub fn spread(j: &[f64]) -> f64 {
    let max = j.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = j.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Data and penalty terms of the inner optimum across a `β` sweep at fixed `m`.
pub fn beta_sweep(
    method: Method,
    model: &ModelGrid,
    survey: &Survey,
    kind: AnnihilatorKind,
    betas: &[f64],
    inner: &InnerConfig,
    store: &WavefieldStore,
) -> Result<Vec<MisfitBreakdown>> {
    betas
        .iter()
        .map(|&beta| Ok(evaluate(method, model, survey, kind, beta, inner, None, false, store)?.misfit))
        .collect()
}

/// Root-mean-square difference of two models' squared slowness over physical nodes.
pub fn model_rms_error(model: &ModelGrid, truth: &ModelGrid) -> f64 {
    let dims = model.dims();
    let mut acc = 0.0;
    let mut count = 0usize;
    for ix in 0..dims.nx {
        for iz in 0..dims.nz {
            if dims.is_physical(iz, ix) {
                let i = dims.index(iz, ix);
                let d = model.slowness()[i] - truth.slowness()[i];
                acc += d * d;
                count += 1;
            }
        }
    }
    (acc / count.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cg::{cg_solve, DenseSymmetric};
    use crate::grid::{GridDims, Position};
    use crate::propagator::ricker;

    #[test]
    fn beta_rule() {
        assert_eq!(update_beta(2.0, 1.0, 0.5, 2.0), 0.5);
        let mut b = 1.0;
        for _ in 0..4 {
            b = update_beta(0.1, 1.0, b, 2.0);
        }
        assert_eq!(b, 16.0);
    }

    #[test]
    fn unimodal_width_cases() {
        let eps: Vec<f64> = (-4..=4).map(|k| k as f64 * 0.1).collect();
        let bowl: Vec<f64> = eps.iter().map(|e| e * e).collect();
        assert!((unimodal_width(&eps, &bowl) - 0.8).abs() < 1e-12);
        let mut skipped = bowl.clone();
        skipped[0] = 0.05;
        skipped[8] = 0.01;
        assert!((unimodal_width(&eps, &skipped) - 0.6).abs() < 1e-12);
        assert_eq!(unimodal_width(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn lbfgs_with_exact_line_search_reproduces_cg_on_a_quadratic() {
        let n = 8;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = 1.0 / (1.0 + (i as f64 - j as f64).abs()) + if i == j { i as f64 } else { 0.0 };
            }
        }
        let a = DenseSymmetric::new(n, a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0).sin()).collect();
        let mut x = vec![0.0; n];
        let mut lb = Lbfgs::new(n, false);
        let grad = |x: &[f64]| sub(&a.apply(x).unwrap(), &b);
        let mut g = grad(&x);
        for k in 1..=4 {
            let d = lb.direction(&g);
            let ad = a.apply(&d).unwrap();
            let alpha = -dot(&g, &d) / dot(&d, &ad);
            let x_next: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + alpha * d).collect();
            let g_next = grad(&x_next);
            lb.push(sub(&x_next, &x), sub(&g_next, &g));
            x = x_next;
            g = g_next;
            let (xcg, _) = cg_solve(&a, &b, &CgConfig { max_iters: k, tol: 1e-15, record_history: true }).unwrap();
            assert!(crate::vecops::rel_diff(&x, &xcg) < 1e-9, "iteration {k}");
        }
    }

    fn tiny_survey() -> (ModelGrid, Survey) {
        let dims = GridDims::new(13, 13, 10.0, 10.0, 3).unwrap();
        let truth = crate::grid::build_layered_1d(&[0.0, 40.0], &[1500.0, 1700.0], dims).unwrap();
        let geom = Geometry::new(
            vec![Position::new(20.0, 0.0)],
            vec![Position::new(0.0, 0.0), Position::new(40.0, 0.0), Position::new(60.0, 10.0)],
            120,
            1e-3,
            25.0,
        )
        .unwrap();
        let w = ricker(25.0, 120, 1e-3).unwrap();
        (truth.clone(), Survey::synthesize(&truth, geom, w).unwrap())
    }

    #[test]
    fn fwi_at_truth_has_zero_misfit_and_gradient() {
        let (truth, survey) = tiny_survey();
        let store = WavefieldStore::in_memory();
        let (j, g) = gradient_fwi(&truth, &survey, &store).unwrap();
        assert_eq!(j.total, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let m0 = ModelGrid::constant(*truth.dims(), 1500.0).unwrap();
        let j0 = misfit_fwi(&m0, &survey).unwrap();
        assert!(j0.total > 0.0);
    }

    #[test]
    fn fwi_gradient_matches_finite_differences() {
        let (truth, survey) = tiny_survey();
        let store = WavefieldStore::in_memory();
        let m0 = ModelGrid::constant(*truth.dims(), 1550.0).unwrap();
        let (_, g) = gradient_fwi(&m0, &survey, &store).unwrap();
        let dir: Vec<f64> = (0..g.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let h = 1e-3 * max_abs(m0.slowness());
        let shift = |s: f64| {
            let m: Vec<f64> = m0.slowness().iter().zip(&dir).map(|(m, d)| m + s * h * d).collect();
            misfit_fwi(&m0.with_slowness(m).unwrap(), &survey).unwrap().total
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
        let an = dot(&g, &dir);
        assert!((fd - an).abs() <= 1e-4 * an.abs(), "fd={fd:e} adjoint={an:e}");
    }

    fn reduced_fd_check(method: Method, kind: AnnihilatorKind) {
        let (truth, survey) = tiny_survey();
        let store = WavefieldStore::in_memory();
        let m0 = ModelGrid::constant(*truth.dims(), 1550.0).unwrap();
        let inner = InnerConfig {
            cg: CgConfig { max_iters: 400, tol: 1e-12, record_history: false },
            ..InnerConfig::default()
        };
        let beta = 1e-2 * data_scale(method, &m0, &survey, kind).unwrap();
        let eval = |m: &ModelGrid, grad: bool| evaluate(method, m, &survey, kind, beta, &inner, None, grad, &store).unwrap();
        let g = eval(&m0, true).gradient.unwrap();
        let dir: Vec<f64> = (0..g.len()).map(|i| ((i * 104729) % 17) as f64 / 17.0 - 0.5).collect();
        let h = 1e-3 * max_abs(m0.slowness());
        let shift = |s: f64| {
            let m: Vec<f64> = m0.slowness().iter().zip(&dir).map(|(m, d)| m + s * h * d).collect();
            eval(&m0.with_slowness(m).unwrap(), false).misfit.total
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
        let an = dot(&g, &dir);
        assert!((fd - an).abs() <= 1e-4 * an.abs(), "{method}: fd={fd:e} adjoint={an:e}");
    }

    #[test]
    fn wri_reduced_gradient_matches_finite_differences() {
        reduced_fd_check(Method::Wri, AnnihilatorKind::Identity);
    }

    #[test]
    fn esi_reduced_gradient_matches_finite_differences() {
        reduced_fd_check(Method::Esi, AnnihilatorKind::SpatialDistance);
    }
}

//! Alternatives to the wavefield-space CG solve of the extended-source normal
//! equation `(SᴴS + β W) q = Sᴴ d`, with `W = BᴴB`:
//!
//! * the Gauss-Seidel and surrogate (majorize-minimize) fixed-point recursions,
//! * the data-space solve obtained from the Sherman-Morrison-Woodbury identity,
//! * the frequency-reduced solve on a few DTFT coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cg::{cg_solve, CgConfig, CgReport};
use crate::error::{Error, Result};
use crate::grid::ShotGather;
use crate::io::CsvTable;
use crate::linops::{
    idtft_frame, op_s, Annihilator, DtftAccumulator, FreqField, Frequencies, LinearMap, OpS,
};
use crate::propagator::{SourceTerm, Wavefield};
use crate::vecops::{axpy, dot, norm, sub};

fn require_positive_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("penalty weight must be positive, got {beta}")));
    }
    Ok(())
}

/// `R u` for a movie stored as a flat vector.
fn sample(s: &OpS, u: &[f64]) -> Vec<f64> {
    let (nt, len) = (s.nt(), s.dims().len());
    let mut d = vec![0.0; s.data_len()];
    for (r, &node) in s.receivers().iter().enumerate() {
        for n in 0..nt {
            d[r * nt + n] = u[n * len + node];
        }
    }
    d
}

fn forward_movie(s: &OpS, q: &[f64]) -> Result<Vec<f64>> {
    let p = s.propagator();
    let src = Wavefield::from_data(p.nt(), p.dims().nz, p.dims().nx, p.dt(), q.to_vec())?;
    Ok(p.forward(&SourceTerm::Distributed(src))?.data)
}

/// `(1/β) W⁻¹ Sᴴ (d - R u)`: the source update shared by both recursions.
fn source_update(s: &OpS, b: &Annihilator, beta: f64, d: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let residual = sub(d, &sample(s, u));
    let lambda = s.apply_adjoint(&residual)?;
    let mut q = b.apply_sq_inv(&lambda)?;
    q.iter_mut().for_each(|v| *v /= beta);
    Ok((lambda, q))
}

/// `J(u) = ½‖R u - d‖² + β ½‖B A u‖²` given `A u`.
fn objective(s: &OpS, b: &Annihilator, beta: f64, d: &[f64], u: &[f64], au: &[f64]) -> f64 {
    let r = sub(&sample(s, u), d);
    0.5 * dot(&r, &r) + beta * b.penalty(au)
}

fn initial_state(s: &OpS, u0: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    match u0 {
        None => Ok((vec![0.0; s.domain_len()], vec![0.0; s.domain_len()])),
        Some(u0) => {
            if u0.len() != s.domain_len() {
                return Err(Error::Shape("initial wavefield does not match the grid".into()));
            }
            let p = s.propagator();
            let w = Wavefield::from_data(p.nt(), p.dims().nz, p.dims().nx, p.dt(), u0.to_vec())?;
            Ok((u0.to_vec(), p.apply_wave_operator(&w)?.data))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionState {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub q: Vec<f64>,
    pub k: usize,
    /// `J(u_k)`
    pub misfit: f64,
}

#[derive(Debug, Clone)]
pub struct GaussSeidelOutcome {
    pub state: RecursionState,
    /// `‖u_{k+1} - u_k‖` per iteration.
    pub update_norms: Vec<f64>,
    pub diverged: bool,
}

impl GaussSeidelOutcome {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(["iter[-]", "update_norm[arb]"]);
        for (k, v) in self.update_norms.iter().enumerate() {
            t.push([k.to_string(), format!("{v:e}")]);
        }
        t
    }
}

/// Growth of the update norm over three iterations that flags divergence.
pub const DIVERGENCE_GROWTH: f64 = 10.0;

/// `λ_k = A⁻ᴴRᴴ(d - R u_k)`, `q_k = (1/β)(BᴴB)⁻¹λ_k`, `u_{k+1} = A⁻¹ q_k`.
pub fn gauss_seidel_solve(
    s: &OpS,
    b: &Annihilator,
    beta: f64,
    d: &[f64],
    n_iters: usize,
    u0: Option<&[f64]>,
) -> Result<GaussSeidelOutcome> {
    require_positive_beta(beta)?;
    let (mut u, mut au) = initial_state(s, u0)?;
    let mut lambda = vec![0.0; u.len()];
    let mut q = vec![0.0; u.len()];
    let mut norms = Vec::with_capacity(n_iters);
    let mut diverged = false;
    let mut k = 0;
    while k < n_iters {
        let (l, qk) = source_update(s, b, beta, d, &u)?;
        let next = match forward_movie(s, &qk) {
            Ok(v) => v,
            Err(Error::Instability(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        norms.push(norm(&sub(&next, &u)));
        lambda = l;
        q = qk;
        u = next;
        au.clone_from(&q);
        k += 1;
        let last = norms.len() - 1;
        if last >= 3 && norms[last] > DIVERGENCE_GROWTH * norms[last - 3] {
            diverged = true;
            break;
        }
        if !norms[last].is_finite() {
            diverged = true;
            break;
        }
    }
    if diverged {
        log::warn!("Gauss-Seidel recursion diverged after {k} iterations (β = {beta:e})");
    }
    let misfit = objective(s, b, beta, d, &u, &au);
    Ok(GaussSeidelOutcome {
        state: RecursionState {
            u,
            lambda,
            q,
            k,
            misfit,
        },
        update_norms: norms,
        diverged,
    })
}

/// `K v = S W⁻¹ Sᴴ v`, the data-space operator sharing its nonzero spectrum
/// with `A⁻¹W⁻¹A⁻ᴴRᴴR`.
#[derive(Debug, Clone, Copy)]
pub struct DataSpaceKernel<'a> {
    s: &'a OpS,
    b: &'a Annihilator,
}

impl<'a> DataSpaceKernel<'a> {
    pub fn new(s: &'a OpS, b: &'a Annihilator) -> Self {
        DataSpaceKernel { s, b }
    }
}

impl LinearMap for DataSpaceKernel<'_> {
    fn domain_len(&self) -> usize {
        self.s.data_len()
    }
    fn range_len(&self) -> usize {
        self.s.data_len()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let lambda = self.s.apply_adjoint(v)?;
        self.s.apply(&self.b.apply_sq_inv(&lambda)?)
    }
    fn apply_adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply(v)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Relative gap between the last two Rayleigh quotients.
    pub gap: f64,
}

/// Largest eigenvalue of a symmetric PSD map by power iteration from a seeded start.
pub fn power_iteration(map: &dyn LinearMap, max_iters: usize, rel_tol: f64) -> Result<SpectralEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..map.domain_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut prev = f64::NAN;
    let mut est = SpectralEstimate {
        radius: 0.0,
        iterations: 0,
        converged: false,
        gap: f64::INFINITY,
    };
    for k in 0..max_iters {
        let kv = map.apply(&v)?;
        let rq = dot(&v, &kv);
        let nkv = norm(&kv);
        est.iterations = k + 1;
        est.radius = rq.max(0.0);
        if prev.is_finite() {
            est.gap = (rq - prev).abs() / rq.abs().max(f64::MIN_POSITIVE);
            if est.gap <= rel_tol {
                est.converged = true;
                break;
            }
        }
        if nkv == 0.0 {
            est.converged = true;
            est.gap = 0.0;
            break;
        }
        prev = rq;
        v = kv.iter().map(|x| x / nkv).collect();
    }
    Ok(est)
}

/// `λ_max(S W⁻¹ Sᴴ)`
pub fn data_space_max_eigenvalue(s: &OpS, b: &Annihilator, n_power_iters: usize) -> Result<SpectralEstimate> {
    power_iteration(&DataSpaceKernel::new(s, b), n_power_iters, 1e-8)
}

/// Spectral radius of the Gauss-Seidel iteration map `(1/β) A⁻¹W⁻¹A⁻ᴴRᴴR`.
/// The recursion converges when it is below one.
pub fn estimate_spectral_radius(
    s: &OpS,
    b: &Annihilator,
    beta: f64,
    n_power_iters: usize,
) -> Result<SpectralEstimate> {
    require_positive_beta(beta)?;
    let mut est = data_space_max_eigenvalue(s, b, n_power_iters)?;
    est.radius /= beta;
    Ok(est)
}

/// `γ = 1.05 λ_max(S W⁻¹ Sᴴ)`, which makes `γ (BA)ᴴBA - RᴴR` positive semidefinite.
pub fn surrogate_gamma(s: &OpS, b: &Annihilator, n_power_iters: usize) -> Result<f64> {
    Ok(1.05 * data_space_max_eigenvalue(s, b, n_power_iters)?.radius)
}

#[derive(Debug, Clone)]
pub struct SurrogateOutcome {
    pub u: Vec<f64>,
    /// `A u`
    pub source: Vec<f64>,
    /// `J(u_k)` for `k = 0..=n_iters`.
    pub history: Vec<f64>,
    pub diverged: bool,
}

impl SurrogateOutcome {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(["iter[-]", "objective[arb]"]);
        for (k, v) in self.history.iter().enumerate() {
            t.push([k.to_string(), format!("{v:e}")]);
        }
        t
    }
}

/// Majorize-minimize recursion: the Gauss-Seidel field `ũ_k` is blended
/// with the previous iterate, `u_{k+1} = (β ũ_k + γ u_k) / (β + γ)`.
pub fn surrogate_solve(
    s: &OpS,
    b: &Annihilator,
    beta: f64,
    gamma: f64,
    d: &[f64],
    n_iters: usize,
    u0: Option<&[f64]>,
) -> Result<SurrogateOutcome> {
    require_positive_beta(beta)?;
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("surrogate weight must be positive, got {gamma}")));
    }
    let (mut u, mut au) = initial_state(s, u0)?;
    let mut history = vec![objective(s, b, beta, d, &u, &au)];
    let (wa, wb) = (beta / (beta + gamma), gamma / (beta + gamma));
    let mut diverged = false;
    for _ in 0..n_iters {
        let (_, q) = source_update(s, b, beta, d, &u)?;
        let tilde = match forward_movie(s, &q) {
            Ok(v) => v,
            Err(Error::Instability(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        for ((u, t), (a, q)) in u.iter_mut().zip(&tilde).zip(au.iter_mut().zip(&q)) {
            *u = wa * t + wb * *u;
            *a = wa * q + wb * *a;
        }
        history.push(objective(s, b, beta, d, &u, &au));
    }
    Ok(SurrogateOutcome {
        u,
        source: au,
        history,
        diverged,
    })
}

/// `β I + S W⁻¹ Sᴴ` on data vectors.
struct RegularizedKernel<'a> {
    kernel: DataSpaceKernel<'a>,
    beta: f64,
}

impl LinearMap for RegularizedKernel<'_> {
    fn domain_len(&self) -> usize {
        self.kernel.domain_len()
    }
    fn range_len(&self) -> usize {
        self.kernel.domain_len()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.kernel.apply(v)?;
        axpy(self.beta, v, &mut out);
        Ok(out)
    }
    fn apply_adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply(v)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct DataSpaceSolution {
    pub q: Vec<f64>,
    /// Predicted data `S q`; tends to `d` as `β → 0`.
    pub w: ShotGather,
    pub report: CgReport,
}

/// Data-space form of the extended-source solve:
/// `v = S W⁻¹ Sᴴ d`, `(β I + S W⁻¹ Sᴴ) w = v`, `q = (β W)⁻¹ Sᴴ (d - w)`.
pub fn data_space_solve_esi(
    s: &OpS,
    b: &Annihilator,
    beta: f64,
    d: &ShotGather,
    cfg: &CgConfig,
) -> Result<DataSpaceSolution> {
    require_positive_beta(beta)?;
    if d.data.len() != s.data_len() {
        return Err(Error::Shape("data do not match the receiver geometry".into()));
    }
    let kernel = DataSpaceKernel::new(s, b);
    let v = kernel.apply(&d.data)?;
    let (w, report) = cg_solve(&RegularizedKernel { kernel, beta }, &v, cfg)?;
    let lambda = s.apply_adjoint(&sub(&d.data, &w))?;
    let mut q = b.apply_sq_inv(&lambda)?;
    q.iter_mut().for_each(|x| *x /= beta);
    Ok(DataSpaceSolution {
        q,
        w: s.gather(w, d.shot_index),
        report,
    })
}

/// WRI variant: the data are replaced by `d - S f` and `B = I`. The returned
/// `w` is the extended-source part of the prediction; `R u = w + S f`.
pub fn data_space_solve_wri(
    s: &OpS,
    beta: f64,
    source_node: usize,
    wavelet: &[f64],
    d: &ShotGather,
    cfg: &CgConfig,
) -> Result<DataSpaceSolution> {
    let sf = s.apply_streamed(|n, buf| buf[source_node] += wavelet[n])?;
    let reduced = ShotGather {
        data: sub(&d.data, &sf),
        ..d.clone()
    };
    let b = Annihilator::identity(s.dims(), s.nt());
    data_space_solve_esi(s, &b, beta, &reduced, cfg)
}

/// `F M Fᴴ` for a self-adjoint time-domain map `M` acting on `nt × npoints`
/// step-major samples; unknowns are realified DTFT coefficients.
pub struct ReducedMap<'a> {
    inner: &'a dyn LinearMap,
    freqs: Frequencies,
    nt: usize,
    dt: f64,
    npoints: usize,
}

impl<'a> ReducedMap<'a> {
    pub fn new(inner: &'a dyn LinearMap, freqs: Frequencies, nt: usize, dt: f64, npoints: usize) -> Result<Self> {
        if inner.domain_len() != nt * npoints {
            return Err(Error::Shape("time-domain operator does not match nt × npoints".into()));
        }
        Ok(ReducedMap {
            inner,
            freqs,
            nt,
            dt,
            npoints,
        })
    }

    pub fn forward_transform(&self, x: &[f64]) -> FreqField {
        let mut acc = DtftAccumulator::new(&self.freqs, self.npoints, self.dt, None);
        for n in 0..self.nt {
            acc.add_frame(n, &x[n * self.npoints..(n + 1) * self.npoints]);
        }
        acc.finish()
    }

    pub fn inverse_transform(&self, field: &FreqField) -> Vec<f64> {
        crate::linops::idtft(field, self.nt, self.dt)
    }

    pub fn zeros(&self) -> FreqField {
        FreqField::zeros(&self.freqs, self.npoints, None)
    }
}

impl LinearMap for ReducedMap<'_> {
    fn domain_len(&self) -> usize {
        2 * self.freqs.len() * self.npoints
    }
    fn range_len(&self) -> usize {
        self.domain_len()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let field = self.zeros().from_real(x);
        let t = self.inner.apply(&self.inverse_transform(&field))?;
        Ok(self.forward_transform(&t).to_real())
    }
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.apply(y)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

/// Solves `F M Fᴴ x̄ = F b` and returns `(x̄, Fᴴ x̄)`.
pub fn reduced_cg(map: &ReducedMap<'_>, b: &[f64], cfg: &CgConfig) -> Result<(FreqField, Vec<f64>, CgReport)> {
    let rhs = map.forward_transform(b).to_real();
    let (x, report) = cg_solve(map, &rhs, cfg)?;
    let field = map.zeros().from_real(&x);
    let time = map.inverse_transform(&field);
    Ok((field, time, report))
}

/// `F (SᴴS + β BᴴB) Fᴴ` evaluated with on-the-fly transforms inside the
/// time loops; no movie is ever stored.
pub struct FreqReducedOperator<'a> {
    s: &'a OpS,
    b: &'a Annihilator,
    beta: f64,
    freqs: Frequencies,
}

impl<'a> FreqReducedOperator<'a> {
    pub fn new(s: &'a OpS, b: &'a Annihilator, beta: f64, freqs: Frequencies) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("penalty weight must be non-negative, got {beta}")));
        }
        Ok(FreqReducedOperator { s, b, beta, freqs })
    }

    fn field(&self) -> FreqField {
        FreqField::zeros(&self.freqs, self.s.dims().len(), Some(*self.s.dims()))
    }

    /// `F Sᴴ d` by one adjoint modeling with DTFT accumulation.
    pub fn rhs(&self, d: &[f64]) -> Result<FreqField> {
        let p = self.s.propagator();
        let mut acc = DtftAccumulator::new(&self.freqs, p.dims().len(), p.dt(), Some(*p.dims()));
        self.s.adjoint_streamed(d, |n, f| {
            acc.add_frame(n, f);
            Ok(())
        })?;
        Ok(acc.finish())
    }

    pub fn to_time(&self, field: &FreqField) -> Result<Wavefield> {
        let p = self.s.propagator();
        crate::linops::idtft_movie(field, p.nt(), p.dt(), p.dims())
    }
}

impl LinearMap for FreqReducedOperator<'_> {
    fn domain_len(&self) -> usize {
        2 * self.freqs.len() * self.s.dims().len()
    }
    fn range_len(&self) -> usize {
        self.domain_len()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let qbar = self.field().from_real(x);
        let p = self.s.propagator();
        let (nt, dt, len) = (p.nt(), p.dt(), p.dims().len());
        let mut penalty = DtftAccumulator::new(&self.freqs, len, dt, None);
        let mut frame = vec![0.0; len];
        let data = self.s.apply_streamed(|n, buf| {
            idtft_frame(&qbar, n, nt, dt, &mut frame);
            axpy(1.0, &frame, buf);
            if self.beta > 0.0 {
                penalty.add_scaled_frame(n, &frame, |i, v| self.beta * self.b.weight_sq(n, i) * v);
            }
        })?;
        let mut out = self.rhs(&data)?.to_real();
        if self.beta > 0.0 {
            axpy(1.0, &penalty.finish().to_real(), &mut out);
        }
        Ok(out)
    }
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.apply(y)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct FreqReducedSolution {
    pub qbar: FreqField,
    pub q: Wavefield,
    pub report: CgReport,
}

/// CG on `F (SᴴS + β BᴴB) Fᴴ q̄ = F Sᴴ d`, returning `q̄` and `q = Fᴴ q̄`.
pub fn freq_reduced_solve(
    s: &OpS,
    b: &Annihilator,
    beta: f64,
    d: &ShotGather,
    freqs: Frequencies,
    cfg: &CgConfig,
) -> Result<FreqReducedSolution> {
    let op = FreqReducedOperator::new(s, b, beta, freqs)?;
    let rhs = op.rhs(&d.data)?;
    let (x, report) = cg_solve(&op, &rhs.to_real(), cfg)?;
    let qbar = rhs.from_real(&x);
    let q = op.to_time(&qbar)?;
    Ok(FreqReducedSolution { qbar, q, report })
}

/// Convenience wrapper building `S` for a single-shot geometry.
pub fn op_s_for(model: &crate::grid::ModelGrid, geom: &crate::grid::Geometry) -> Result<OpS> {
    op_s(model, geom)
}

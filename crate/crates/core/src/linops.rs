//! Matrix-free linear operators over flat `f64` vectors.
//!
//! Extended sources `q` and adjoint fields are movies in [`Wavefield`] layout;
//! data vectors are [`ShotGather`] payloads (trace-major). Complex
//! frequency-domain vectors are realified as interleaved `re, im` pairs so the
//! same real CG drives every solve; the inner product there is `Re(aᴴ b)`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Geometry, GridDims, ModelGrid, Position, ShotGather};
use crate::propagator::{Propagator, Wavefield};
use crate::vecops::axpy;

pub trait LinearMap: Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>>;
    fn is_self_adjoint(&self) -> bool {
        false
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape(format!("{what}: vector of length {got}, expected {expected}")));
    }
    Ok(())
}

/// `S = R A⁻¹` for one shot: extended-source movie to receiver gather.
#[derive(Debug, Clone)]
pub struct OpS {
    prop: Propagator,
    receivers: Vec<usize>,
}

impl OpS {
    pub fn new(prop: Propagator, receivers: Vec<usize>) -> Self {
        OpS { prop, receivers }
    }

    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    pub fn nt(&self) -> usize {
        self.prop.nt()
    }

    pub fn dims(&self) -> &GridDims {
        self.prop.dims()
    }

    pub fn data_len(&self) -> usize {
        self.prop.nt() * self.receivers.len()
    }

    /// `R A⁻¹ q` with `q` supplied frame by frame.
    pub fn apply_streamed(&self, mut source: impl FnMut(usize, &mut [f64])) -> Result<Vec<f64>> {
        let nt = self.prop.nt();
        let mut d = vec![0.0; self.data_len()];
        self.prop.forward_streamed(&mut source, |n, f| {
            for (r, &node) in self.receivers.iter().enumerate() {
                d[r * nt + n] = f[node];
            }
            Ok(())
        })?;
        Ok(d)
    }

    /// `A⁻ᴴ Rᴴ d`, handing each adjoint snapshot to `observe` (in reverse time).
    pub fn adjoint_streamed(
        &self,
        d: &[f64],
        observe: impl FnMut(usize, &[f64]) -> Result<()>,
    ) -> Result<()> {
        check_len("Sᴴ", d.len(), self.data_len())?;
        let nt = self.prop.nt();
        self.prop.adjoint_streamed(
            |n, buf| {
                for (r, &node) in self.receivers.iter().enumerate() {
                    buf[node] += d[r * nt + n];
                }
            },
            observe,
        )
    }

    pub fn gather(&self, d: Vec<f64>, shot_index: usize) -> ShotGather {
        ShotGather {
            shot_index,
            nt: self.prop.nt(),
            nrec: self.receivers.len(),
            data: d,
        }
    }
}

impl LinearMap for OpS {
    fn domain_len(&self) -> usize {
        self.prop.movie_len()
    }

    fn range_len(&self) -> usize {
        self.data_len()
    }

    fn apply(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_len("S", q.len(), self.domain_len())?;
        let len = self.dims().len();
        self.apply_streamed(|n, buf| axpy(1.0, &q[n * len..(n + 1) * len], buf))
    }

    fn apply_adjoint(&self, d: &[f64]) -> Result<Vec<f64>> {
        let len = self.dims().len();
        let mut out = vec![0.0; self.domain_len()];
        self.adjoint_streamed(d, |n, f| {
            out[n * len..(n + 1) * len].copy_from_slice(f);
            Ok(())
        })?;
        Ok(out)
    }
}

/// `S` for shot `shot` of `geom` (receivers are shared by all shots).
pub fn op_s(model: &ModelGrid, geom: &Geometry) -> Result<OpS> {
    let prop = Propagator::for_geometry(model, geom)?;
    let receivers = geom.receiver_nodes(model.dims())?;
    Ok(OpS::new(prop, receivers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnihilatorKind {
    Identity,
    SpatialDistance,
    TimeWeight,
}

/// Diagonal weight `B` on extended-source movies; only `BᴴB` (the squared
/// weights) is ever needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Annihilator {
    kind: AnnihilatorKind,
    nt: usize,
    frame_len: usize,
    /// Squared weight per node (spatial) or per step (time); empty for identity.
    weights_sq: Vec<f64>,
}

impl Annihilator {
    pub fn identity(dims: &GridDims, nt: usize) -> Self {
        Annihilator {
            kind: AnnihilatorKind::Identity,
            nt,
            frame_len: dims.len(),
            weights_sq: Vec::new(),
        }
    }

    /// `B = max(‖x - x_s‖, floor)`, with the floor one cell diagonal.
    pub fn spatial_distance(dims: &GridDims, nt: usize, source: Position) -> Self {
        Self::spatial_distance_with_floor(dims, nt, source, dims.cell_diagonal())
    }

    pub fn spatial_distance_with_floor(
        dims: &GridDims,
        nt: usize,
        source: Position,
        floor: f64,
    ) -> Self {
        let mut w = vec![0.0; dims.len()];
        for ix in 0..dims.nx {
            for iz in 0..dims.nz {
                let d = dims.position(iz, ix).distance(&source).max(floor);
                w[dims.index(iz, ix)] = d * d;
            }
        }
        Annihilator {
            kind: AnnihilatorKind::SpatialDistance,
            nt,
            frame_len: dims.len(),
            weights_sq: w,
        }
    }

    /// `B = max(t, dt)` with `t = n dt` in seconds.
    pub fn time_weight(dims: &GridDims, nt: usize, dt: f64) -> Self {
        Annihilator {
            kind: AnnihilatorKind::TimeWeight,
            nt,
            frame_len: dims.len(),
            weights_sq: (0..nt).map(|n| (n as f64 * dt).max(dt).powi(2)).collect(),
        }
    }

    pub fn for_shot(kind: AnnihilatorKind, dims: &GridDims, geom: &Geometry, shot: usize) -> Result<Self> {
        Ok(match kind {
            AnnihilatorKind::Identity => Self::identity(dims, geom.nt),
            AnnihilatorKind::TimeWeight => Self::time_weight(dims, geom.nt, geom.dt),
            AnnihilatorKind::SpatialDistance => {
                let s = *geom.sources.get(shot).ok_or_else(|| {
                    Error::InvalidGeometry(format!("shot {shot} out of range"))
                })?;
                Self::spatial_distance(dims, geom.nt, s)
            }
        })
    }

    pub fn kind(&self) -> AnnihilatorKind {
        self.kind
    }

    pub fn movie_len(&self) -> usize {
        self.nt * self.frame_len
    }

    /// Squared weight of node `i` at step `n`.
    #[inline]
    pub fn weight_sq(&self, n: usize, i: usize) -> f64 {
        match self.kind {
            AnnihilatorKind::Identity => 1.0,
            AnnihilatorKind::SpatialDistance => self.weights_sq[i],
            AnnihilatorKind::TimeWeight => self.weights_sq[n],
        }
    }

    /// `frame ← w² ⊙ frame` for step `n`.
    pub fn scale_frame(&self, n: usize, frame: &mut [f64], inverse: bool) {
        match self.kind {
            AnnihilatorKind::Identity => {}
            AnnihilatorKind::SpatialDistance => {
                for (v, w) in frame.iter_mut().zip(&self.weights_sq) {
                    if inverse {
                        *v /= w
                    } else {
                        *v *= w
                    }
                }
            }
            AnnihilatorKind::TimeWeight => {
                let w = self.weights_sq[n];
                let s = if inverse { 1.0 / w } else { w };
                frame.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    fn scale(&self, q: &[f64], inverse: bool) -> Result<Vec<f64>> {
        check_len("annihilator", q.len(), self.movie_len())?;
        let mut out = q.to_vec();
        for (n, frame) in out.chunks_exact_mut(self.frame_len).enumerate() {
            self.scale_frame(n, frame, inverse);
        }
        Ok(out)
    }

    /// `BᴴB q`
    pub fn apply_sq(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.scale(q, false)
    }

    /// `(BᴴB)⁻¹ λ`
    pub fn apply_sq_inv(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.scale(lambda, true)
    }

    /// `B q` (`inverse`: `B⁻¹ q`), with `B` the diagonal square root of `BᴴB`.
    pub fn apply_root(&self, q: &[f64], inverse: bool) -> Result<Vec<f64>> {
        check_len("annihilator", q.len(), self.movie_len())?;
        let mut out = q.to_vec();
        for (n, frame) in out.chunks_exact_mut(self.frame_len).enumerate() {
            for (i, v) in frame.iter_mut().enumerate() {
                let w = self.weight_sq(n, i).sqrt();
                if inverse {
                    *v /= w
                } else {
                    *v *= w
                }
            }
        }
        Ok(out)
    }

    /// `½‖B q‖²`
    pub fn penalty(&self, q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (n, frame) in q.chunks_exact(self.frame_len).enumerate() {
            for (i, v) in frame.iter().enumerate() {
                acc += self.weight_sq(n, i) * v * v;
            }
        }
        0.5 * acc
    }
}

impl LinearMap for Annihilator {
    fn domain_len(&self) -> usize {
        self.movie_len()
    }
    fn range_len(&self) -> usize {
        self.movie_len()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_sq(x)
    }
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.apply_sq(y)
    }
    fn is_self_adjoint(&self) -> bool {
        true
    }
}

pub fn apply_annihilator_sq(b: &Annihilator, q: &[f64]) -> Result<Vec<f64>> {
    b.apply_sq(q)
}

pub fn apply_annihilator_sq_inv(b: &Annihilator, lambda: &[f64]) -> Result<Vec<f64>> {
    b.apply_sq_inv(lambda)
}

/// `SᴴS + β BᴴB` over extended-source movies of one shot.
#[derive(Debug, Clone)]
pub struct NormalOperator {
    s: OpS,
    b: Annihilator,
    beta: f64,
}

impl NormalOperator {
    pub fn new(s: OpS, b: Annihilator, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("penalty weight must be non-negative, got {beta}")));
        }
        check_len("annihilator", b.movie_len(), s.domain_len())?;
        Ok(NormalOperator { s, b, beta })
    }

    pub fn op_s(&self) -> &OpS {
        &self.s
    }

    pub fn annihilator(&self) -> &Annihilator {
        &self.b
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl LinearMap for NormalOperator {
    fn domain_len(&self) -> usize {
        self.s.domain_len()
    }

    fn range_len(&self) -> usize {
        self.s.domain_len()
    }

    fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let sp = self.s.apply(p)?;
        let mut out = self.s.apply_adjoint(&sp)?;
        if self.beta > 0.0 {
            let len = self.s.dims().len();
            for (n, (o, x)) in out.chunks_exact_mut(len).zip(p.chunks_exact(len)).enumerate() {
                for (i, (o, x)) in o.iter_mut().zip(x).enumerate() {
                    *o += self.beta * self.b.weight_sq(n, i) * x;
                }
            }
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

pub fn esi_normal_operator(
    model: &ModelGrid,
    geom: &Geometry,
    b: &Annihilator,
    beta: f64,
) -> Result<NormalOperator> {
    NormalOperator::new(op_s(model, geom)?, b.clone(), beta)
}

pub fn wri_normal_operator(model: &ModelGrid, geom: &Geometry, beta: f64) -> Result<NormalOperator> {
    let b = Annihilator::identity(model.dims(), geom.nt);
    NormalOperator::new(op_s(model, geom)?, b, beta)
}

/// `Sᴴ d`
pub fn esi_rhs(model: &ModelGrid, geom: &Geometry, d: &ShotGather) -> Result<Vec<f64>> {
    op_s(model, geom)?.apply_adjoint(&d.data)
}

/// `Sᴴ (d - S f)` for a point source wavelet `f` at source `shot`.
pub fn wri_rhs(
    model: &ModelGrid,
    geom: &Geometry,
    d: &ShotGather,
    shot: usize,
    wavelet: &[f64],
) -> Result<Vec<f64>> {
    let s = op_s(model, geom)?;
    let residual = crate::vecops::sub(&d.data, &point_data(&s, geom, shot, wavelet)?);
    s.apply_adjoint(&residual)
}

/// `S f` for a point source with the given wavelet.
pub fn point_data(s: &OpS, geom: &Geometry, shot: usize, wavelet: &[f64]) -> Result<Vec<f64>> {
    let node = geom.source_node(shot, s.dims())?;
    check_len("wavelet", wavelet.len(), s.nt())?;
    s.apply_streamed(|n, buf| buf[node] += wavelet[n])
}

/// `P M P` for a 0/1 diagonal mask `P`: restricts a self-adjoint map to a sub-domain.
pub struct Masked<'a, M: LinearMap + ?Sized> {
    inner: &'a M,
    mask: Vec<bool>,
}

impl<'a, M: LinearMap + ?Sized> Masked<'a, M> {
    pub fn new(inner: &'a M, mask: Vec<bool>) -> Result<Self> {
        check_len("mask", mask.len(), inner.domain_len())?;
        Ok(Masked { inner, mask })
    }

    pub fn restrict(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect()
    }
}

impl<M: LinearMap + ?Sized> LinearMap for Masked<'_, M> {
    fn domain_len(&self) -> usize {
        self.inner.domain_len()
    }
    fn range_len(&self) -> usize {
        self.inner.domain_len()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.restrict(&self.inner.apply(&self.restrict(x))?))
    }
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.restrict(&self.inner.apply_adjoint(&self.restrict(y))?))
    }
    fn is_self_adjoint(&self) -> bool {
        self.inner.is_self_adjoint()
    }
}

/// Mask selecting one grid node at every time step of a movie.
pub fn node_mask(dims: &GridDims, nt: usize, node: usize) -> Vec<bool> {
    let len = dims.len();
    (0..nt * len).map(|k| k % len == node).collect()
}

/// Distinct frequencies in Hz for the DTFT pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Frequencies(Vec<f64>);

impl Frequencies {
    /// Frequencies strictly inside `(0, Nyquist)` and pairwise distinct.
    pub fn new(freqs: Vec<f64>, dt: f64) -> Result<Self> {
        let nyquist = 0.5 / dt;
        if freqs.is_empty() {
            return Err(Error::Config("empty frequency list".into()));
        }
        for &f in &freqs {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Config(format!(
                    "frequency {f} Hz outside (0, {nyquist}) Hz"
                )));
            }
        }
        let mut sorted = freqs.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate frequencies".into()));
        }
        Ok(Frequencies(freqs))
    }

    /// Every DFT bin `k / (nt dt)` for `k = 0..=nt/2`, DC and Nyquist included.
    /// Together these span all real signals of length `nt`.
    pub fn full_band(nt: usize, dt: f64) -> Self {
        let df = 1.0 / (nt as f64 * dt);
        Frequencies((0..=nt / 2).map(|k| k as f64 * df).collect())
    }

    /// `count` equispaced frequencies across the band of a Ricker wavelet.
    pub fn in_band(f_peak: f64, count: usize, dt: f64) -> Result<Self> {
        let (lo, hi) = (0.5 * f_peak, 2.0 * f_peak);
        let freqs = if count == 1 {
            vec![f_peak]
        } else {
            (0..count)
                .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
                .collect()
        };
        Self::new(freqs, dt)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Complex spatial fields at a few frequencies, frequency-major
/// (`values[m * npoints + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FreqField {
    pub freqs: Vec<f64>,
    pub npoints: usize,
    pub values: Vec<Complex64>,
    pub dims: Option<GridDims>,
}

impl FreqField {
    pub fn zeros(freqs: &Frequencies, npoints: usize, dims: Option<GridDims>) -> Self {
        FreqField {
            freqs: freqs.as_slice().to_vec(),
            npoints,
            values: vec![Complex64::new(0.0, 0.0); freqs.len() * npoints],
            dims,
        }
    }

    pub fn at(&self, m: usize) -> &[Complex64] {
        &self.values[m * self.npoints..(m + 1) * self.npoints]
    }

    /// Interleaved `re, im` view used by the real CG.
    pub fn to_real(&self) -> Vec<f64> {
        self.values.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_real(&self, x: &[f64]) -> FreqField {
        FreqField {
            values: x.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect(),
            ..self.clone()
        }
    }

    /// Amplitude map `|ū(x, f_m)|` at one frequency.
    pub fn amplitude(&self, m: usize) -> Vec<f64> {
        self.at(m).iter().map(|c| c.norm()).collect()
    }
}

/// Phase factors `exp(j 2π f_m n dt)` for one time step.
pub fn phases(freqs: &[f64], n: usize, dt: f64) -> Vec<Complex64> {
    freqs
        .iter()
        .map(|f| Complex64::from_polar(1.0, 2.0 * PI * f * n as f64 * dt))
        .collect()
}

/// Running DTFT `ū(f_m) = Σ_n u^n exp(j 2π f_m n dt)`, fed one frame at a
/// time in any order, so the movie never has to be stored.
#[derive(Debug, Clone)]
pub struct DtftAccumulator {
    field: FreqField,
    dt: f64,
}

impl DtftAccumulator {
    pub fn new(freqs: &Frequencies, npoints: usize, dt: f64, dims: Option<GridDims>) -> Self {
        DtftAccumulator {
            field: FreqField::zeros(freqs, npoints, dims),
            dt,
        }
    }

    pub fn add_frame(&mut self, n: usize, frame: &[f64]) {
        self.add_scaled_frame(n, frame, |_, v| v);
    }

    /// Adds `weight(i, frame[i])` transformed at step `n`.
    pub fn add_scaled_frame(&mut self, n: usize, frame: &[f64], weight: impl Fn(usize, f64) -> f64) {
        let np = self.field.npoints;
        for (m, ph) in phases(&self.field.freqs, n, self.dt).into_iter().enumerate() {
            let out = &mut self.field.values[m * np..(m + 1) * np];
            for (i, (o, &v)) in out.iter_mut().zip(frame).enumerate() {
                *o += ph * weight(i, v);
            }
        }
    }

    pub fn finish(self) -> FreqField {
        self.field
    }
}

/// `u^n = (1/N_t) Re Σ_m ū_m exp(-j 2π f_m n dt)` for one step.
pub fn idtft_frame(field: &FreqField, n: usize, nt: usize, dt: f64, out: &mut [f64]) {
    let scale = 1.0 / nt as f64;
    out.iter_mut().for_each(|v| *v = 0.0);
    for (m, ph) in phases(&field.freqs, n, dt).into_iter().enumerate() {
        let ph = ph.conj();
        for (o, c) in out.iter_mut().zip(field.at(m)) {
            *o += scale * (ph * c).re;
        }
    }
}

pub fn dtft_movie(u: &Wavefield, freqs: &Frequencies) -> Result<FreqField> {
    let dims = GridDims::new(u.nz, u.nx, 1.0, 1.0, 0).ok();
    let mut acc = DtftAccumulator::new(freqs, u.frame_len(), u.dt, dims);
    for n in 0..u.nt {
        acc.add_frame(n, u.frame(n));
    }
    Ok(acc.finish())
}

/// DTFT of each trace of a gather; point `i` is receiver `i`.
pub fn dtft_gather(d: &ShotGather, dt: f64, freqs: &Frequencies) -> FreqField {
    let mut acc = DtftAccumulator::new(freqs, d.nrec, dt, None);
    let mut frame = vec![0.0; d.nrec];
    for n in 0..d.nt {
        for (r, v) in frame.iter_mut().enumerate() {
            *v = d.data[r * d.nt + n];
        }
        acc.add_frame(n, &frame);
    }
    acc.finish()
}

/// DTFT of a plain time series (one point).
pub fn dtft_series(x: &[f64], dt: f64, freqs: &Frequencies) -> FreqField {
    let mut acc = DtftAccumulator::new(freqs, 1, dt, None);
    for (n, v) in x.iter().enumerate() {
        acc.add_frame(n, std::slice::from_ref(v));
    }
    acc.finish()
}

/// Time samples `(nt × npoints)`, step-major.
pub fn idtft(field: &FreqField, nt: usize, dt: f64) -> Vec<f64> {
    let np = field.npoints;
    let mut out = vec![0.0; nt * np];
    for n in 0..nt {
        idtft_frame(field, n, nt, dt, &mut out[n * np..(n + 1) * np]);
    }
    out
}

pub fn idtft_movie(field: &FreqField, nt: usize, dt: f64, dims: &GridDims) -> Result<Wavefield> {
    check_len("frequency field", field.npoints, dims.len())?;
    Wavefield::from_data(nt, dims.nz, dims.nx, dt, idtft(field, nt, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::{dot, norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn setup() -> (ModelGrid, Geometry) {
        let dims = GridDims::new(11, 11, 10.0, 10.0, 2).unwrap();
        let v: Vec<f64> = (0..dims.len()).map(|i| 1500.0 + (i % 7) as f64 * 20.0).collect();
        let model = ModelGrid::from_velocity(dims, &v).unwrap();
        let geom = Geometry::new(
            vec![Position::new(30.0, 10.0)],
            vec![Position::new(0.0, 0.0), Position::new(30.0, 60.0), Position::new(60.0, 20.0)],
            60,
            1e-3,
            20.0,
        )
        .unwrap();
        (model, geom)
    }

    #[test]
    fn s_dot_product() {
        let (model, geom) = setup();
        let s = op_s(&model, &geom).unwrap();
        let q = rand_vec(s.domain_len(), 1);
        let d = rand_vec(s.range_len(), 2);
        let sq = s.apply(&q).unwrap();
        let shd = s.apply_adjoint(&d).unwrap();
        let rel = (dot(&sq, &d) - dot(&q, &shd)).abs() / (norm(&sq) * norm(&d));
        assert!(rel <= 1e-10, "{rel:e}");
        assert!(s.apply(&vec![0.0; s.domain_len()]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normal_operator_is_symmetric() {
        let (model, geom) = setup();
        for b in [
            Annihilator::identity(model.dims(), 60),
            Annihilator::spatial_distance(model.dims(), 60, geom.sources[0]),
            Annihilator::time_weight(model.dims(), 60, geom.dt),
        ] {
            let op = esi_normal_operator(&model, &geom, &b, 0.3).unwrap();
            let x = rand_vec(op.domain_len(), 3);
            let y = rand_vec(op.domain_len(), 4);
            let ax = op.apply(&x).unwrap();
            let ay = op.apply(&y).unwrap();
            let rel = (dot(&ax, &y) - dot(&x, &ay)).abs() / (norm(&ax) * norm(&y));
            assert!(rel <= 1e-10, "{:?}: {rel:e}", b.kind());
            assert!(dot(&ax, &x) > 0.0);
        }
    }

    #[test]
    fn wri_operator_equals_esi_with_identity() {
        let (model, geom) = setup();
        let x = rand_vec(60 * model.dims().len(), 5);
        let a = wri_normal_operator(&model, &geom, 1.0).unwrap().apply(&x).unwrap();
        let b = esi_normal_operator(&model, &geom, &Annihilator::identity(model.dims(), 60), 1.0)
            .unwrap()
            .apply(&x)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn annihilator_definitions() {
        let dims = GridDims::new(5, 5, 1.0, 1.0, 0).unwrap();
        let b = Annihilator::spatial_distance(&dims, 2, Position::new(0.0, 0.0));
        let mut q = vec![0.0; 50];
        q[dims.index(0, 2)] = 1.0;
        assert_eq!(b.apply_sq(&q).unwrap()[dims.index(0, 2)], 4.0);
        let floored = b.apply_sq(&{
            let mut e = vec![0.0; 50];
            e[0] = 1.0;
            e
        });
        assert!((floored.unwrap()[0] - 2.0).abs() < 1e-15);
        let x = rand_vec(50, 9);
        for b in [b, Annihilator::identity(&dims, 2), Annihilator::time_weight(&dims, 2, 0.1)] {
            let back = b.apply_sq_inv(&b.apply_sq(&x).unwrap()).unwrap();
            assert!(crate::vecops::rel_diff(&back, &x) <= 1e-14);
        }
        assert_eq!(Annihilator::identity(&dims, 2).apply_sq(&x).unwrap(), x);
    }

    #[test]
    fn frequency_validation() {
        assert!(Frequencies::new(vec![1.0, 3.0], 0.005).is_ok());
        assert!(Frequencies::new(vec![0.0], 0.005).is_err());
        assert!(Frequencies::new(vec![100.0], 0.005).is_err());
        assert!(Frequencies::new(vec![1.0, 1.0], 0.005).is_err());
        assert!(Frequencies::new(vec![], 0.005).is_err());
    }

    #[test]
    fn dtft_of_cosine() {
        let (nt, dt, f1) = (200usize, 0.005, 10.0);
        let x: Vec<f64> = (0..nt).map(|n| (2.0 * PI * f1 * n as f64 * dt).cos()).collect();
        let on_grid = dtft_series(&x, dt, &Frequencies::new(vec![f1], dt).unwrap());
        assert!((on_grid.values[0].norm() - nt as f64 / 2.0).abs() < 1e-9);
        // off-grid by a quarter bin: Dirichlet-kernel main lobe plus leakage
        // from the negative-frequency image, bounded by 1 / (2 |sin(π (2 f₁ + δ) dt)|)
        let df = 1.0 / (nt as f64 * dt);
        let f = f1 + 0.25 * df;
        let off = dtft_series(&x, dt, &Frequencies::new(vec![f], dt).unwrap());
        let main = 0.5 * (PI * 0.25).sin() / (PI * 0.25 / nt as f64).sin();
        let leakage = 0.5 / (PI * (f + f1) * dt).sin().abs();
        let a = off.values[0].norm();
        assert!((a - main).abs() <= leakage, "{a} vs {main} ± {leakage}");
        let zero = dtft_series(&vec![0.0; nt], dt, &Frequencies::new(vec![f1], dt).unwrap());
        assert!(zero.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn dtft_idtft_half_identity_on_grid() {
        let (nt, dt) = (64usize, 0.01);
        let df = 1.0 / (nt as f64 * dt);
        let freqs = Frequencies::new(vec![2.0 * df, 5.0 * df, 9.0 * df], dt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ubar = FreqField::zeros(&freqs, 1, None);
        for v in ubar.values.iter_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let back = dtft_series(&idtft(&ubar, nt, dt), dt, &freqs);
        for (a, b) in back.values.iter().zip(&ubar.values) {
            assert!((a - 0.5 * b).norm() < 1e-12);
        }
        let zero = idtft(&FreqField::zeros(&freqs, 3, None), nt, dt);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dtft_idtft_adjoint_scaling() {
        // F = N_t (Fᴴ)ᵀ in the real inner product Re(aᴴb)
        let (nt, dt) = (50usize, 0.01);
        let freqs = Frequencies::new(vec![3.3, 7.1, 12.0], dt).unwrap();
        let x = rand_vec(nt * 2, 4);
        let mut ubar = FreqField::zeros(&freqs, 2, None);
        let r = rand_vec(12, 5);
        ubar = ubar.from_real(&r);
        let mut acc = DtftAccumulator::new(&freqs, 2, dt, None);
        for n in 0..nt {
            acc.add_frame(n, &x[2 * n..2 * n + 2]);
        }
        let fx = acc.finish().to_real();
        let fh = idtft(&ubar, nt, dt);
        let lhs = dot(&fx, &r);
        let rhs = nt as f64 * dot(&x, &fh);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn masked_operator_restricts() {
        let (model, geom) = setup();
        let op = wri_normal_operator(&model, &geom, 0.0).unwrap();
        let node = geom.source_node(0, model.dims()).unwrap();
        let masked = Masked::new(&op, node_mask(model.dims(), 60, node)).unwrap();
        let x = rand_vec(op.domain_len(), 6);
        let y = masked.apply(&x).unwrap();
        let len = model.dims().len();
        assert!(y.iter().enumerate().all(|(k, &v)| k % len == node || v == 0.0));
    }
}

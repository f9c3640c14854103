//! 2D constant-density acoustic time stepping and its exact discrete adjoint.
//!
//! The discrete wave operator acting on a movie `w` (snapshot `n` holds the
//! field driven by source sample `n`) is
//!
//! ```text
//! (A w)^n = m (w^n / G - 2 w^{n-1} + G w^{n-2}) / dt² - L w^{n-1}
//! ```
//!
//! with `L` the 4th-order Laplacian (zero Dirichlet data two nodes outside the
//! grid) and `G` a Cerjan sponge taper, `G = 1` in the physical interior.
//! `forward` applies `A⁻¹` by marching `n = 0 → nt-1`; `adjoint` applies the
//! transpose of that recurrence marching `n = nt-1 → 0`. Because `A` is affine
//! in `m`, `∂A/∂m · w` is the tapered second difference `D_n(w)` above, which is
//! what the gradient correlates against.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{check_cfl, Geometry, GridDims, ModelGrid, Position, ShotGather};
use crate::store::WavefieldStore;

/// Any `|u|` above this aborts the time loop as unstable.
pub const OVERFLOW_GUARD: f64 = 1e30;

const C0: f64 = -5.0 / 2.0;
const C1: f64 = 4.0 / 3.0;
const C2: f64 = -1.0 / 12.0;

/// Space-time movie `u(x, z, t)`, snapshot-major with z fastest inside a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavefield {
    pub nt: usize,
    pub nz: usize,
    pub nx: usize,
    pub dt: f64,
    pub data: Vec<f64>,
}

impl Wavefield {
    pub fn zeros(nt: usize, dims: &GridDims, dt: f64) -> Self {
        Wavefield {
            nt,
            nz: dims.nz,
            nx: dims.nx,
            dt,
            data: vec![0.0; nt * dims.len()],
        }
    }

    pub fn from_data(nt: usize, nz: usize, nx: usize, dt: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != nt * nz * nx {
            return Err(Error::Shape(format!(
                "{} values for a {nt}x{nz}x{nx} wavefield",
                data.len()
            )));
        }
        Ok(Wavefield { nt, nz, nx, dt, data })
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.nz * self.nx
    }

    #[inline]
    pub fn frame(&self, n: usize) -> &[f64] {
        let len = self.frame_len();
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn frame_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.frame_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn bytes_for(nt: usize, dims: &GridDims) -> u64 {
        (nt * dims.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn matches(&self, nt: usize, dims: &GridDims) -> bool {
        self.nt == nt && self.nz == dims.nz && self.nx == dims.nx
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Right-hand side of the wave equation.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceTerm {
    /// A wavelet injected at the node nearest to `position`.
    Point { position: Position, wavelet: Vec<f64> },
    /// A full space-time source movie.
    Distributed(Wavefield),
}

/// Standard Ricker wavelet with unit peak, delayed by `1.5 / f_peak` so it
/// starts from (numerically) zero.
pub fn ricker(f_peak: f64, nt: usize, dt: f64) -> Result<Vec<f64>> {
    if !(f_peak > 0.0) {
        return Err(Error::Config(format!("Ricker peak frequency must be positive, got {f_peak}")));
    }
    // Effective bandwidth of a Ricker wavelet is about three times its peak.
    if dt >= 1.0 / (2.0 * 3.0 * f_peak) {
        return Err(Error::Config(format!(
            "dt={dt} s aliases a {f_peak} Hz Ricker wavelet"
        )));
    }
    let t0 = ricker_delay(f_peak);
    Ok((0..nt)
        .map(|n| {
            let a = (PI * f_peak * (n as f64 * dt - t0)).powi(2);
            (1.0 - 2.0 * a) * (-a).exp()
        })
        .collect())
}

pub fn ricker_delay(f_peak: f64) -> f64 {
    1.5 / f_peak
}

/// Cerjan-style taper: 1 inside the physical domain, decaying to
/// `exp(-0.09)` at the outer edge of the sponge.
pub fn sponge_taper(dims: &GridDims) -> Vec<f64> {
    let profile = |i: usize, n: usize| -> f64 {
        let nb = dims.nb;
        if nb == 0 {
            return 1.0;
        }
        let depth = if i < nb {
            nb - i
        } else if i >= n - nb {
            i + nb + 1 - n
        } else {
            0
        };
        let r = 0.3 * depth as f64 / nb as f64;
        (-r * r).exp()
    };
    let mut g = vec![1.0; dims.len()];
    for ix in 0..dims.nx {
        let gx = profile(ix, dims.nx);
        for iz in 0..dims.nz {
            g[dims.index(iz, ix)] = gx * profile(iz, dims.nz);
        }
    }
    g
}

/// 4th-order Laplacian with zero values beyond the grid edge. The matrix is symmetric.
pub fn laplacian(dims: &GridDims, u: &[f64], out: &mut [f64]) {
    let (nz, nx) = (dims.nz, dims.nx);
    let wz = 1.0 / (dims.dz * dims.dz);
    let wx = 1.0 / (dims.dx * dims.dx);
    let get = |iz: isize, ix: isize| -> f64 {
        if iz < 0 || ix < 0 || iz >= nz as isize || ix >= nx as isize {
            0.0
        } else {
            u[ix as usize * nz + iz as usize]
        }
    };
    for ix in 0..nx {
        let interior_x = ix >= 2 && ix + 2 < nx;
        let col = ix * nz;
        for iz in 0..nz {
            let i = col + iz;
            out[i] = if interior_x && iz >= 2 && iz + 2 < nz {
                wz * (C0 * u[i] + C1 * (u[i - 1] + u[i + 1]) + C2 * (u[i - 2] + u[i + 2]))
                    + wx * (C0 * u[i]
                        + C1 * (u[i - nz] + u[i + nz])
                        + C2 * (u[i - 2 * nz] + u[i + 2 * nz]))
            } else {
                let (z, x) = (iz as isize, ix as isize);
                wz * (C0 * u[i]
                    + C1 * (get(z - 1, x) + get(z + 1, x))
                    + C2 * (get(z - 2, x) + get(z + 2, x)))
                    + wx * (C0 * u[i]
                        + C1 * (get(z, x - 1) + get(z, x + 1))
                        + C2 * (get(z, x - 2) + get(z, x + 2)))
            };
        }
    }
}

/// Time stepper for one model and time axis.
#[derive(Debug, Clone)]
pub struct Propagator {
    dims: GridDims,
    nt: usize,
    dt: f64,
    /// `dt² / m`
    coef: Vec<f64>,
    taper: Vec<f64>,
    adjoint_fault: bool,
}

impl Propagator {
    pub fn new(model: &ModelGrid, nt: usize, dt: f64) -> Result<Self> {
        check_cfl(dt, model.dims(), model.max_velocity())?;
        let dims = *model.dims();
        Ok(Propagator {
            dims,
            nt,
            dt,
            coef: model.slowness().iter().map(|&m| dt * dt / m).collect(),
            taper: sponge_taper(&dims),
            adjoint_fault: false,
        })
    }

    pub fn for_geometry(model: &ModelGrid, geom: &Geometry) -> Result<Self> {
        Self::new(model, geom.nt, geom.dt)
    }

    /// Deliberately breaks the adjoint recurrence so self-tests can prove they detect it.
    #[doc(hidden)]
    pub fn with_adjoint_fault(mut self) -> Self {
        self.adjoint_fault = true;
        self
    }

    #[inline]
    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    #[inline]
    pub fn nt(&self) -> usize {
        self.nt
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn movie_len(&self) -> usize {
        self.nt * self.dims.len()
    }

    fn guard(&self, n: usize, field: &[f64]) -> Result<()> {
        if field.iter().any(|v| !(v.abs() <= OVERFLOW_GUARD)) {
            return Err(Error::Instability(format!(
                "wavefield exceeded {OVERFLOW_GUARD:e} at step {n}"
            )));
        }
        Ok(())
    }

    /// Marches `n = 0 → nt-1`. `inject(n, buf)` adds source sample `n` into a
    /// zeroed buffer; `observe(n, w^n)` sees each new snapshot.
    pub fn forward_streamed(
        &self,
        mut inject: impl FnMut(usize, &mut [f64]),
        mut observe: impl FnMut(usize, &[f64]) -> Result<()>,
    ) -> Result<()> {
        let len = self.dims.len();
        let (mut prev2, mut prev1, mut next) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let mut src = vec![0.0; len];
        let mut lap = vec![0.0; len];
        for n in 0..self.nt {
            src.iter_mut().for_each(|v| *v = 0.0);
            inject(n, &mut src);
            laplacian(&self.dims, &prev1, &mut lap);
            for i in 0..len {
                let g = self.taper[i];
                next[i] = g * (2.0 * prev1[i] - g * prev2[i] + self.coef[i] * (lap[i] + src[i]));
            }
            self.guard(n, &next)?;
            observe(n, &next)?;
            std::mem::swap(&mut prev2, &mut prev1);
            std::mem::swap(&mut prev1, &mut next);
        }
        Ok(())
    }

    /// Transpose of [`forward_streamed`](Self::forward_streamed), marching
    /// `n = nt-1 → 0` from zero terminal conditions.
    pub fn adjoint_streamed(
        &self,
        mut inject: impl FnMut(usize, &mut [f64]),
        mut observe: impl FnMut(usize, &[f64]) -> Result<()>,
    ) -> Result<()> {
        let len = self.dims.len();
        let (mut z2, mut z1, mut z0) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let mut y = vec![0.0; len];
        let mut tmp = vec![0.0; len];
        let mut lap = vec![0.0; len];
        let mut out = vec![0.0; len];
        for n in (0..self.nt).rev() {
            y.iter_mut().for_each(|v| *v = 0.0);
            inject(n, &mut y);
            for i in 0..len {
                tmp[i] = self.coef[i] * self.taper[i] * z1[i];
            }
            laplacian(&self.dims, &tmp, &mut lap);
            for i in 0..len {
                let g = self.taper[i];
                let g2 = if self.adjoint_fault { g } else { g * g };
                z0[i] = y[i] + 2.0 * g * z1[i] + lap[i] - g2 * z2[i];
                out[i] = g * self.coef[i] * z0[i];
            }
            self.guard(n, &out)?;
            observe(n, &out)?;
            std::mem::swap(&mut z2, &mut z1);
            std::mem::swap(&mut z1, &mut z0);
        }
        Ok(())
    }

    fn injector<'a>(&self, src: &'a SourceTerm) -> Result<Box<dyn FnMut(usize, &mut [f64]) + 'a>> {
        match src {
            SourceTerm::Point { position, wavelet } => {
                let (iz, ix) = self.dims.snap(*position).ok_or_else(|| {
                    Error::InvalidGeometry(format!(
                        "point source at ({}, {}) m is outside the physical grid",
                        position.x, position.z
                    ))
                })?;
                if wavelet.len() != self.nt {
                    return Err(Error::Shape(format!(
                        "wavelet has {} samples, expected {}",
                        wavelet.len(),
                        self.nt
                    )));
                }
                let node = self.dims.index(iz, ix);
                Ok(Box::new(move |n, buf: &mut [f64]| buf[node] += wavelet[n]))
            }
            SourceTerm::Distributed(q) => {
                if !q.matches(self.nt, &self.dims) {
                    return Err(Error::Shape(format!(
                        "source movie {}x{}x{} does not match {}x{}x{}",
                        q.nt, q.nz, q.nx, self.nt, self.dims.nz, self.dims.nx
                    )));
                }
                Ok(Box::new(move |n, buf: &mut [f64]| {
                    for (b, s) in buf.iter_mut().zip(q.frame(n)) {
                        *b += s;
                    }
                }))
            }
        }
    }

    pub fn forward(&self, src: &SourceTerm) -> Result<Wavefield> {
        let inject = self.injector(src)?;
        let mut u = Wavefield::zeros(self.nt, &self.dims, self.dt);
        self.forward_streamed(inject, |n, f| {
            u.frame_mut(n).copy_from_slice(f);
            Ok(())
        })?;
        Ok(u)
    }

    pub fn adjoint(&self, src: &SourceTerm) -> Result<Wavefield> {
        let inject = self.injector(src)?;
        let mut u = Wavefield::zeros(self.nt, &self.dims, self.dt);
        self.adjoint_streamed(inject, |n, f| {
            u.frame_mut(n).copy_from_slice(f);
            Ok(())
        })?;
        Ok(u)
    }

    /// Forward modeling recording only the receiver traces (no movie kept).
    pub fn forward_to_receivers(&self, src: &SourceTerm, receivers: &[usize]) -> Result<ShotGather> {
        let inject = self.injector(src)?;
        let nt = self.nt;
        let mut d = ShotGather::zeros(0, nt, receivers.len());
        self.forward_streamed(inject, |n, f| {
            for (r, &node) in receivers.iter().enumerate() {
                d.data[r * nt + n] = f[node];
            }
            Ok(())
        })?;
        Ok(d)
    }

    /// Applies the discrete wave operator `A` to a movie, so that
    /// `apply_wave_operator(forward(s)) == s`.
    pub fn apply_wave_operator(&self, u: &Wavefield) -> Result<Wavefield> {
        if !u.matches(self.nt, &self.dims) {
            return Err(Error::Shape("wavefield does not match propagator".into()));
        }
        let len = self.dims.len();
        let zero = vec![0.0; len];
        let mut lap = vec![0.0; len];
        let mut out = Wavefield::zeros(self.nt, &self.dims, self.dt);
        for n in 0..self.nt {
            let w1 = if n >= 1 { u.frame(n - 1) } else { &zero };
            let w2 = if n >= 2 { u.frame(n - 2) } else { &zero };
            laplacian(&self.dims, w1, &mut lap);
            let w0 = u.frame(n);
            let o = out.frame_mut(n);
            for i in 0..len {
                let g = self.taper[i];
                o[i] = (w0[i] / g - 2.0 * w1[i] + g * w2[i]) / self.coef[i] - lap[i];
            }
        }
        Ok(out)
    }

    /// `D_n(u) = (u^n / G - 2 u^{n-1} + G u^{n-2}) / dt²`, the exact `∂A/∂m`
    /// of this discretization, evaluated at one time level.
    pub fn dadm_frame(&self, u: &Wavefield, n: usize, out: &mut [f64]) {
        let len = self.dims.len();
        let inv_dt2 = 1.0 / (self.dt * self.dt);
        let w0 = u.frame(n);
        for i in 0..len {
            let g = self.taper[i];
            let w1 = if n >= 1 { u.data[(n - 1) * len + i] } else { 0.0 };
            let w2 = if n >= 2 { u.data[(n - 2) * len + i] } else { 0.0 };
            out[i] = (w0[i] / g - 2.0 * w1 + g * w2) * inv_dt2;
        }
    }

    /// `Σ_n λ^n ⊙ D_n(u)`, with `λ` given as a movie.
    pub fn correlate_dadm(&self, lambda: &Wavefield, u: &Wavefield) -> Vec<f64> {
        let len = self.dims.len();
        let mut acc = vec![0.0; len];
        let mut d = vec![0.0; len];
        for n in 0..self.nt {
            self.dadm_frame(u, n, &mut d);
            for ((a, l), dv) in acc.iter_mut().zip(lambda.frame(n)).zip(&d) {
                *a += l * dv;
            }
        }
        acc
    }

    /// Adjoint modeling driven by receiver traces, correlated on the fly with
    /// `D_n(u)`; returns `Σ_n λ^n ⊙ D_n(u)` with `λ = A⁻ᵀ Rᵀ residual`.
    pub fn adjoint_correlate(
        &self,
        residual: &ShotGather,
        receivers: &[usize],
        u: &Wavefield,
    ) -> Result<Vec<f64>> {
        let len = self.dims.len();
        let nt = self.nt;
        let mut acc = vec![0.0; len];
        let mut d = vec![0.0; len];
        self.adjoint_streamed(
            |n, buf| {
                for (r, &node) in receivers.iter().enumerate() {
                    buf[node] += residual.data[r * nt + n];
                }
            },
            |n, lambda| {
                self.dadm_frame(u, n, &mut d);
                for i in 0..len {
                    acc[i] += lambda[i] * d[i];
                }
                Ok(())
            },
        )?;
        Ok(acc)
    }
}

/// `A⁻¹ src` for the geometry's time axis, admitted against the store budget.
pub fn forward(
    model: &ModelGrid,
    src: &SourceTerm,
    geom: &Geometry,
    store: &WavefieldStore,
) -> Result<Wavefield> {
    store.admit(Wavefield::bytes_for(geom.nt, model.dims()))?;
    Propagator::for_geometry(model, geom)?.forward(src)
}

/// `A⁻ᵀ adj_src`, marching backwards from zero terminal conditions.
pub fn adjoint(
    model: &ModelGrid,
    adj_src: &SourceTerm,
    geom: &Geometry,
    store: &WavefieldStore,
) -> Result<Wavefield> {
    store.admit(Wavefield::bytes_for(geom.nt, model.dims()))?;
    Propagator::for_geometry(model, geom)?.adjoint(adj_src)
}

/// `R u`: the wavefield at the receiver nodes for all time steps.
pub fn sample_r(u: &Wavefield, geom: &Geometry, dims: &GridDims) -> Result<ShotGather> {
    if u.nz != dims.nz || u.nx != dims.nx {
        return Err(Error::Shape("wavefield does not match grid".into()));
    }
    let nodes = geom.receiver_nodes(dims)?;
    let nt = u.nt;
    let mut d = ShotGather::zeros(0, nt, nodes.len());
    for n in 0..nt {
        let f = u.frame(n);
        for (r, &node) in nodes.iter().enumerate() {
            d.data[r * nt + n] = f[node];
        }
    }
    Ok(d)
}

/// `Rᴴ d`: each trace injected at its receiver node, zero elsewhere.
pub fn spread_rh(d: &ShotGather, geom: &Geometry, dims: &GridDims, dt: f64) -> Result<SourceTerm> {
    let nodes = geom.receiver_nodes(dims)?;
    if d.nrec != nodes.len() {
        return Err(Error::Shape(format!(
            "gather has {} traces for {} receivers",
            d.nrec,
            nodes.len()
        )));
    }
    let mut q = Wavefield::zeros(d.nt, dims, dt);
    for n in 0..d.nt {
        let f = q.frame_mut(n);
        for (r, &node) in nodes.iter().enumerate() {
            f[node] += d.data[r * d.nt + n];
        }
    }
    Ok(SourceTerm::Distributed(q))
}

/// Second time derivative by central differences, one-sided at both ends.
pub fn apply_dadm(u: &Wavefield) -> Result<Wavefield> {
    if u.nt < 3 {
        return Err(Error::Shape(format!(
            "second time derivative needs at least 3 steps, got {}",
            u.nt
        )));
    }
    let inv = 1.0 / (u.dt * u.dt);
    let nt = u.nt;
    let mut out = u.clone();
    for n in 0..nt {
        let c = n.clamp(1, nt - 2);
        let (a, b, d) = (u.frame(c - 1), u.frame(c), u.frame(c + 1));
        for (i, o) in out.frame_mut(n).iter_mut().enumerate() {
            *o = (a[i] - 2.0 * b[i] + d[i]) * inv;
        }
    }
    Ok(out)
}

//! Models, acquisition geometry and receiver data.
//!
//! Grids include the absorbing sponge: a `nz × nx` grid with sponge width
//! `nb` has a physical interior of `(nz - 2nb) × (nx - 2nb)` nodes. Positions
//! are in meters measured from the first physical node, so the sponge sits at
//! negative coordinates and beyond the far physical edge. Node storage is
//! z-fastest: `index = ix * nz + iz`.

use crate::error::{Error, Result};

/// Stability bound of the 2nd-order-time / 4th-order-space stencil:
/// `v_max * dt * sqrt(1/dx² + 1/dz²)` must not exceed `sqrt(3)/2`.
pub const CFL_LIMIT: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDims {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
    pub nb: usize,
}

impl GridDims {
    pub fn new(nz: usize, nx: usize, dz: f64, dx: f64, nb: usize) -> Result<Self> {
        let dims = GridDims { nz, nx, dz, dx, nb };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz < 3 || self.nx < 3 {
            return Err(Error::InvalidModel(format!(
                "grid must be at least 3x3, got {}x{}",
                self.nz, self.nx
            )));
        }
        if !(self.dz > 0.0 && self.dx > 0.0) || !self.dz.is_finite() || !self.dx.is_finite() {
            return Err(Error::InvalidModel(format!(
                "grid spacing must be positive, got dz={} dx={}",
                self.dz, self.dx
            )));
        }
        if 2 * self.nb >= self.nz || 2 * self.nb >= self.nx {
            return Err(Error::InvalidModel(format!(
                "absorbing width {} leaves no physical interior in a {}x{} grid",
                self.nb, self.nz, self.nx
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nz * self.nx
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, iz: usize, ix: usize) -> usize {
        ix * self.nz + iz
    }

    /// Physical coordinates `(x, z)` of a node.
    pub fn position(&self, iz: usize, ix: usize) -> Position {
        Position {
            x: (ix as f64 - self.nb as f64) * self.dx,
            z: (iz as f64 - self.nb as f64) * self.dz,
        }
    }

    /// Nearest node to a physical position, if that node lies in the physical interior.
    pub fn snap(&self, p: Position) -> Option<(usize, usize)> {
        let iz = (p.z / self.dz).round() + self.nb as f64;
        let ix = (p.x / self.dx).round() + self.nb as f64;
        if !iz.is_finite() || !ix.is_finite() || iz < 0.0 || ix < 0.0 {
            return None;
        }
        let (iz, ix) = (iz as usize, ix as usize);
        self.is_physical(iz, ix).then_some((iz, ix))
    }

    pub fn is_physical(&self, iz: usize, ix: usize) -> bool {
        iz >= self.nb && iz < self.nz - self.nb && ix >= self.nb && ix < self.nx - self.nb
    }

    /// Length of one cell diagonal, the floor used by the distance annihilator.
    pub fn cell_diagonal(&self) -> f64 {
        self.dx.hypot(self.dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, z: f64) -> Self {
        Position { x, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.z - other.z)
    }
}

/// Squared-slowness model `m = 1/v²` on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrid {
    dims: GridDims,
    m: Vec<f64>,
}

impl ModelGrid {
    pub fn from_slowness(dims: GridDims, m: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if m.len() != dims.len() {
            return Err(Error::InvalidModel(format!(
                "dimension mismatch: {} values for a {}x{} grid",
                m.len(),
                dims.nz,
                dims.nx
            )));
        }
        if let Some(i) = m.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel(format!(
                "non-positive velocity: squared slowness {} at node {}",
                m[i], i
            )));
        }
        Ok(ModelGrid { dims, m })
    }

    pub fn from_velocity(dims: GridDims, v: &[f64]) -> Result<Self> {
        if let Some(i) = v.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel(format!(
                "non-positive velocity: {} m/s at node {}",
                v[i], i
            )));
        }
        Self::from_slowness(dims, v.iter().map(|&v| 1.0 / (v * v)).collect())
    }

    pub fn constant(dims: GridDims, velocity: f64) -> Result<Self> {
        Self::from_velocity(dims, &vec![velocity; dims.len()])
    }

    #[inline]
    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    #[inline]
    pub fn slowness(&self) -> &[f64] {
        &self.m
    }

    pub fn into_slowness(self) -> Vec<f64> {
        self.m
    }

    pub fn velocity(&self) -> Vec<f64> {
        self.m.iter().map(|&m| 1.0 / m.sqrt()).collect()
    }

    pub fn max_velocity(&self) -> f64 {
        let m_min = self.m.iter().copied().fold(f64::INFINITY, f64::min);
        1.0 / m_min.sqrt()
    }

    /// Same grid with a different squared-slowness field.
    pub fn with_slowness(&self, m: Vec<f64>) -> Result<Self> {
        Self::from_slowness(self.dims, m)
    }
}

/// Piecewise-constant model in depth, extruded laterally. `tops[i]` is the
/// depth in meters at which layer `i` (with velocity `velocities[i]`) starts;
/// nodes above the first top (including the upper sponge) take the first layer.
pub fn build_layered_1d(tops: &[f64], velocities: &[f64], dims: GridDims) -> Result<ModelGrid> {
    dims.validate()?;
    if tops.len() != velocities.len() || tops.is_empty() {
        return Err(Error::InvalidModel(format!(
            "count mismatch: {} layer tops for {} velocities",
            tops.len(),
            velocities.len()
        )));
    }
    if tops.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidModel(
            "layer depths must be strictly increasing".into(),
        ));
    }
    let mut column = Vec::with_capacity(dims.nz);
    for iz in 0..dims.nz {
        let z = dims.position(iz, 0).z;
        let layer = tops.iter().rposition(|&top| z >= top).unwrap_or(0);
        column.push(velocities[layer]);
    }
    let v: Vec<f64> = (0..dims.nx).flat_map(|_| column.iter().copied()).collect();
    ModelGrid::from_velocity(dims, &v)
}

/// `(1 + eps) * m` at every node.
pub fn perturb_model(model: &ModelGrid, eps: f64) -> Result<ModelGrid> {
    if !(eps > -1.0) || !eps.is_finite() {
        return Err(Error::InvalidModel(format!(
            "perturbation eps={eps} makes the squared slowness non-positive"
        )));
    }
    if eps.abs() > 0.5 {
        log::warn!("perturbation eps={eps} is outside the usual [-0.5, 0.5] range");
    }
    let scale = 1.0 + eps;
    model.with_slowness(model.slowness().iter().map(|&m| m * scale).collect())
}

pub fn cfl_number(dt: f64, dims: &GridDims, v_max: f64) -> f64 {
    v_max * dt * (1.0 / (dims.dx * dims.dx) + 1.0 / (dims.dz * dims.dz)).sqrt()
}

pub fn check_cfl(dt: f64, dims: &GridDims, v_max: f64) -> Result<()> {
    let c = cfl_number(dt, dims, v_max);
    if !(dt > 0.0) || c > CFL_LIMIT {
        return Err(Error::Instability(format!(
            "dt={dt} s violates the stability bound for v_max={v_max} m/s \
             (Courant number {c:.4} > {CFL_LIMIT:.4})"
        )));
    }
    Ok(())
}

/// Sources, receivers and time sampling shared by all shots.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub sources: Vec<Position>,
    pub receivers: Vec<Position>,
    pub nt: usize,
    pub dt: f64,
    pub f_peak: f64,
}

impl Geometry {
    pub fn new(
        sources: Vec<Position>,
        receivers: Vec<Position>,
        nt: usize,
        dt: f64,
        f_peak: f64,
    ) -> Result<Self> {
        if nt < 1 {
            return Err(Error::InvalidGeometry("nt must be at least 1".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGeometry(format!("dt must be positive, got {dt}")));
        }
        if !(f_peak > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "peak frequency must be positive, got {f_peak}"
            )));
        }
        Ok(Geometry {
            sources,
            receivers,
            nt,
            dt,
            f_peak,
        })
    }

    /// Checks positions against the physical extent and `dt` against the CFL bound.
    pub fn validate(&self, model: &ModelGrid) -> Result<()> {
        let dims = model.dims();
        for (i, s) in self.sources.iter().enumerate() {
            if dims.snap(*s).is_none() {
                return Err(Error::InvalidGeometry(format!(
                    "source {i} at ({}, {}) m is outside the physical grid",
                    s.x, s.z
                )));
            }
        }
        self.receiver_nodes(dims)?;
        check_cfl(self.dt, dims, model.max_velocity())
    }

    pub fn receiver_nodes(&self, dims: &GridDims) -> Result<Vec<usize>> {
        self.receivers
            .iter()
            .enumerate()
            .map(|(i, r)| {
                dims.snap(*r).map(|(iz, ix)| dims.index(iz, ix)).ok_or_else(|| {
                    Error::InvalidGeometry(format!(
                        "receiver {i} at ({}, {}) m is off-grid",
                        r.x, r.z
                    ))
                })
            })
            .collect()
    }

    pub fn source_node(&self, shot: usize, dims: &GridDims) -> Result<usize> {
        let s = self.sources.get(shot).ok_or_else(|| {
            Error::InvalidGeometry(format!(
                "shot {shot} out of range ({} sources)",
                self.sources.len()
            ))
        })?;
        dims.snap(*s)
            .map(|(iz, ix)| dims.index(iz, ix))
            .ok_or_else(|| Error::InvalidGeometry(format!("source {shot} is off-grid")))
    }

    /// Same acquisition restricted to a single shot.
    pub fn single_shot(&self, shot: usize) -> Result<Geometry> {
        let s = *self.sources.get(shot).ok_or_else(|| {
            Error::InvalidGeometry(format!("shot {shot} out of range"))
        })?;
        Ok(Geometry {
            sources: vec![s],
            ..self.clone()
        })
    }
}

/// Receiver-sampled data of one shot, stored trace by trace
/// (`index = receiver * nt + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct ShotGather {
    pub shot_index: usize,
    pub nt: usize,
    pub nrec: usize,
    pub data: Vec<f64>,
}

impl ShotGather {
    pub fn zeros(shot_index: usize, nt: usize, nrec: usize) -> Self {
        ShotGather {
            shot_index,
            nt,
            nrec,
            data: vec![0.0; nt * nrec],
        }
    }

    pub fn from_data(shot_index: usize, nt: usize, nrec: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nt * nrec {
            return Err(Error::Shape(format!(
                "gather with {} samples, expected {nt}x{nrec}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("gather contains non-finite samples".into()));
        }
        Ok(ShotGather {
            shot_index,
            nt,
            nrec,
            data,
        })
    }

    pub fn trace(&self, r: usize) -> &[f64] {
        &self.data[r * self.nt..(r + 1) * self.nt]
    }

    pub fn norm(&self) -> f64 {
        crate::vecops::norm(&self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> GridDims {
        GridDims::new(20, 30, 10.0, 10.0, 4).unwrap()
    }

    #[test]
    fn constant_model_has_uniform_slowness() {
        let m = ModelGrid::constant(dims(), 1500.0).unwrap();
        let expected = 1.0 / (1500.0f64 * 1500.0);
        assert!(m.slowness().iter().all(|&v| v == expected));
        assert!((expected - 4.444e-7).abs() < 1e-10);
    }

    #[test]
    fn zero_velocity_is_rejected() {
        let d = dims();
        let mut v = vec![1500.0; d.len()];
        v[17] = 0.0;
        let err = ModelGrid::from_velocity(d, &v).unwrap_err();
        assert!(err.to_string().contains("non-positive velocity"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(ModelGrid::from_slowness(dims(), vec![1e-7; 5]).is_err());
    }

    #[test]
    fn grid_invariants() {
        assert!(GridDims::new(2, 10, 1.0, 1.0, 0).is_err());
        assert!(GridDims::new(10, 10, 0.0, 1.0, 0).is_err());
        assert!(GridDims::new(10, 10, 1.0, 1.0, 5).is_err());
        assert!(GridDims::new(3, 3, 1.0, 1.0, 0).is_ok());
    }

    #[test]
    fn two_layers_give_two_slowness_values() {
        let d = dims();
        let m = build_layered_1d(&[0.0, 60.0], &[1500.0, 1800.0], d).unwrap();
        let mut values: Vec<f64> = m.slowness().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![1.0 / (1800.0f64 * 1800.0), 1.0 / (1500.0f64 * 1500.0)]);
        // interface at z = 60 m, i.e. node nb + 6
        let above = m.slowness()[d.index(d.nb + 5, 3)];
        let below = m.slowness()[d.index(d.nb + 6, 3)];
        assert_eq!(above, 1.0 / (1500.0f64 * 1500.0));
        assert_eq!(below, 1.0 / (1800.0f64 * 1800.0));
    }

    #[test]
    fn one_layer_is_uniform() {
        let d = dims();
        let a = build_layered_1d(&[0.0], &[2000.0], d).unwrap();
        let b = ModelGrid::constant(d, 2000.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layered_errors() {
        let d = dims();
        assert!(build_layered_1d(&[0.0, 50.0, 40.0], &[1.0, 2.0, 3.0], d).is_err());
        assert!(build_layered_1d(&[0.0, 50.0], &[1500.0], d).is_err());
        assert!(build_layered_1d(&[0.0], &[-1500.0], d).is_err());
    }

    #[test]
    fn perturbation() {
        let m = ModelGrid::constant(dims(), 1500.0).unwrap();
        assert_eq!(perturb_model(&m, 0.0).unwrap(), m);
        let p = perturb_model(&m, 0.5).unwrap();
        let expected = 1.5 / (1500.0f64 * 1500.0);
        assert!(p.slowness().iter().all(|&v| (v - expected).abs() <= 1e-22));
        assert!(perturb_model(&m, -1.0).is_err());
    }

    #[test]
    fn cfl_boundary() {
        let d = GridDims::new(10, 10, 10.0, 10.0, 0).unwrap();
        let v = 2000.0;
        let dt_max = CFL_LIMIT / (v * (2.0f64 / 100.0).sqrt());
        assert!(check_cfl(dt_max * 0.999, &d, v).is_ok());
        assert!(check_cfl(dt_max * 1.001, &d, v).is_err());
    }

    #[test]
    fn snapping_and_physical_extent() {
        let d = dims();
        assert_eq!(d.snap(Position::new(0.0, 0.0)), Some((4, 4)));
        assert_eq!(d.snap(Position::new(14.0, 26.0)), Some((7, 5)));
        assert_eq!(d.snap(Position::new(-10.0, 0.0)), None);
        // far physical edge: nx - 2nb - 1 = 21 cells
        assert!(d.snap(Position::new(210.0, 0.0)).is_some());
        assert!(d.snap(Position::new(220.0, 0.0)).is_none());
    }
}

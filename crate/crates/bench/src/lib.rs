//! Fixtures shared by the benchmarks.

use xfwi::linops::{op_s, NormalOperator};
use xfwi::propagator::ricker;
use xfwi::{Annihilator, AnnihilatorKind, Geometry, GridDims, ModelGrid, Position, Propagator, SourceTerm};

/// Square two-layer model with `n` physical nodes per side and a 20-node sponge.
pub fn layered_model(n: usize) -> ModelGrid {
    let dims = GridDims::new(n + 40, n + 40, 10.0, 10.0, 20).expect("valid grid");
    let depth = 10.0 * (n / 2) as f64;
    xfwi::grid::build_layered_1d(&[0.0, depth], &[1800.0, 2500.0], dims).expect("valid model")
}

/// One surface source and a full surface receiver line.
pub fn surface_geometry(n: usize, nt: usize) -> Geometry {
    let width = 10.0 * (n - 1) as f64;
    Geometry::new(
        vec![Position::new(width / 2.0, 10.0)],
        (0..n).map(|k| Position::new(10.0 * k as f64, 10.0)).collect(),
        nt,
        1e-3,
        15.0,
    )
    .expect("valid geometry")
}

pub fn point_source(geom: &Geometry) -> SourceTerm {
    SourceTerm::Point {
        position: geom.sources[0],
        wavelet: ricker(geom.f_peak, geom.nt, geom.dt).expect("valid wavelet"),
    }
}

pub fn propagator(model: &ModelGrid, geom: &Geometry) -> Propagator {
    Propagator::for_geometry(model, geom).expect("stable discretization")
}

pub fn esi_operator(model: &ModelGrid, geom: &Geometry, beta: f64) -> NormalOperator {
    let s = op_s(model, geom).expect("receivers on grid");
    let b = Annihilator::for_shot(AnnihilatorKind::SpatialDistance, model.dims(), geom, 0).expect("source on grid");
    NormalOperator::new(s, b, beta).expect("positive beta")
}

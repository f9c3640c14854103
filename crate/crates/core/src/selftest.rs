//! Built-in verification suites on tiny grids: adjointness, gradient finite
//! differences, dense-matrix equivalence and the data-space identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alt::data_space_solve_esi;
use crate::cg::{cg_solve, CgConfig};
use crate::dense::{eigen_range, materialize, mat_vec, solve_spd, symmetry_error};
use crate::error::{Error, Result};
use crate::grid::{Geometry, GridDims, ModelGrid, Position, ShotGather};
use crate::inversion::{evaluate, InnerConfig, Method, Survey};
use crate::linops::{op_s, Annihilator, AnnihilatorKind, LinearMap, NormalOperator, OpS};
use crate::propagator::{ricker, sample_r, spread_rh, Propagator, SourceTerm, Wavefield};
use crate::store::WavefieldStore;
use crate::vecops::{dot, max_abs, norm, rel_diff};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    DotProduct,
    GradientFd,
    DenseOracle,
    Smw,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::DotProduct, Suite::GradientFd, Suite::DenseOracle, Suite::Smw];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::DotProduct => "dot-product",
            Suite::GradientFd => "gradient-fd",
            Suite::DenseOracle => "dense-oracle",
            Suite::Smw => "smw",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown self-test suite '{s}'")))
    }
}

/// One measured check: `value` must not exceed `limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.limit
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Use a propagator whose adjoint is deliberately wrong.
    pub inject_adjoint_fault: bool,
}

pub fn run(suites: &[Suite], opts: &SelftestOptions) -> Result<Vec<Check>> {
    if suites.is_empty() {
        return Err(Error::Config("no self-test suite selected".into()));
    }
    let mut checks = Vec::new();
    for &suite in suites {
        let mut found = match suite {
            Suite::DotProduct => dot_product_suite(opts)?,
            Suite::GradientFd => gradient_suite(opts)?,
            Suite::DenseOracle => dense_suite()?,
            Suite::Smw => smw_suite()?,
        };
        checks.append(&mut found);
    }
    Ok(checks)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Smoothly varying random velocity model.
pub fn random_model(dims: GridDims, rng: &mut ChaCha8Rng) -> Result<ModelGrid> {
    let (a, b) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0));
    let v: Vec<f64> = (0..dims.len())
        .map(|i| {
            let (ix, iz) = ((i / dims.nz) as f64, (i % dims.nz) as f64);
            1800.0 + 300.0 * (a + 0.4 * ix).sin() * (b + 0.3 * iz).cos()
        })
        .collect();
    ModelGrid::from_velocity(dims, &v)
}

/// 11×11 physical nodes, nt = 60, a few receivers and one source.
pub fn adjointness_instance(seed: u64) -> Result<(ModelGrid, Geometry)> {
    let dims = GridDims::new(17, 17, 10.0, 10.0, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(dims, &mut rng)?;
    let geom = Geometry::new(
        vec![Position::new(50.0, 0.0)],
        (0..5).map(|k| Position::new(20.0 * k as f64 + 10.0, 10.0 * (k % 2) as f64)).collect(),
        60,
        1e-3,
        25.0,
    )?;
    Ok((model, geom))
}

fn dot_check(suite: Suite, name: &str, lhs: f64, rhs: f64, scale: f64) -> Check {
    Check {
        suite,
        name: name.to_string(),
        value: (lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE),
        limit: 1e-10,
    }
}

fn dot_product_suite(opts: &SelftestOptions) -> Result<Vec<Check>> {
    let (model, geom) = adjointness_instance(opts.seed)?;
    let dims = *model.dims();
    let mut prop = Propagator::for_geometry(&model, &geom)?;
    if opts.inject_adjoint_fault {
        prop = prop.with_adjoint_fault();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xd07);
    let len = prop.movie_len();
    let mut checks = Vec::new();

    let x = Wavefield::from_data(geom.nt, dims.nz, dims.nx, geom.dt, random_vec(&mut rng, len))?;
    let y = Wavefield::from_data(geom.nt, dims.nz, dims.nx, geom.dt, random_vec(&mut rng, len))?;
    let fx = prop.forward(&SourceTerm::Distributed(x.clone()))?;
    let aty = prop.adjoint(&SourceTerm::Distributed(y.clone()))?;
    checks.push(dot_check(
        Suite::DotProduct,
        "forward/adjoint",
        dot(&fx.data, &y.data),
        dot(&x.data, &aty.data),
        norm(&fx.data) * norm(&y.data),
    ));

    let d = ShotGather::from_data(0, geom.nt, geom.receivers.len(), random_vec(&mut rng, geom.nt * geom.receivers.len()))?;
    let rx = sample_r(&x, &geom, &dims)?;
    let SourceTerm::Distributed(rhd) = spread_rh(&d, &geom, &dims, geom.dt)? else {
        return Err(Error::Numerical("receiver spreading did not give a wavefield".into()));
    };
    checks.push(dot_check(
        Suite::DotProduct,
        "sampling/spreading",
        dot(&rx.data, &d.data),
        dot(&x.data, &rhd.data),
        rx.norm() * d.norm(),
    ));

    let s = OpS::new(prop.clone(), geom.receiver_nodes(&dims)?);
    let sx = s.apply(&x.data)?;
    let shd = s.apply_adjoint(&d.data)?;
    checks.push(dot_check(Suite::DotProduct, "S/S^H", dot(&sx, &d.data), dot(&x.data, &shd), norm(&sx) * d.norm()));

    let normals = [
        ("ESI normal operator", Annihilator::for_shot(AnnihilatorKind::SpatialDistance, &dims, &geom, 0)?, 0.3),
        ("WRI normal operator", Annihilator::identity(&dims, geom.nt), 0.3),
        ("time-weighted normal operator", Annihilator::time_weight(&dims, geom.nt, geom.dt), 0.3),
    ];
    for (name, b, beta) in normals {
        let op = NormalOperator::new(s.clone(), b, beta)?;
        let (ax, ay) = (op.apply(&x.data)?, op.apply(&y.data)?);
        checks.push(dot_check(Suite::DotProduct, name, dot(&ax, &y.data), dot(&x.data, &ay), norm(&ax) * norm(&y.data)));
    }
    Ok(checks)
}

/// Small two-layer survey for gradient checks.
pub fn gradient_instance() -> Result<(ModelGrid, Survey)> {
    let dims = GridDims::new(19, 19, 10.0, 10.0, 3)?;
    let truth = crate::grid::build_layered_1d(&[0.0, 60.0], &[1500.0, 1800.0], dims)?;
    let geom = Geometry::new(
        vec![Position::new(20.0, 0.0)],
        (0..6).map(|k| Position::new(20.0 * k as f64, 0.0)).collect(),
        120,
        1e-3,
        25.0,
    )?;
    let w = ricker(25.0, 120, 1e-3)?;
    let start = ModelGrid::constant(dims, 1550.0)?;
    Ok((start, Survey::synthesize(&truth, geom, w)?))
}

/// `(adjoint-state directional derivative, central difference)` along `dir`.
pub fn directional_check(
    method: Method,
    model: &ModelGrid,
    survey: &Survey,
    beta: f64,
    dir: &[f64],
    inner: &InnerConfig,
) -> Result<(f64, f64)> {
    let store = WavefieldStore::in_memory();
    let kind = AnnihilatorKind::SpatialDistance;
    let g = evaluate(method, model, survey, kind, beta, inner, None, true, &store)?
        .gradient
        .unwrap_or_default();
    let h = 1e-3 * max_abs(model.slowness()) / max_abs(dir);
    let at = |s: f64| -> Result<f64> {
        let m: Vec<f64> = model.slowness().iter().zip(dir).map(|(m, d)| m + s * h * d).collect();
        Ok(evaluate(method, &model.with_slowness(m)?, survey, kind, beta, inner, None, false, &store)?.misfit.total)
    };
    let fd = (at(1.0)? - at(-1.0)?) / (2.0 * h);
    Ok((dot(&g, dir), fd))
}

fn gradient_suite(opts: &SelftestOptions) -> Result<Vec<Check>> {
    let (model, survey) = gradient_instance()?;
    let inner = InnerConfig {
        cg: CgConfig { max_iters: 500, tol: 1e-10, record_history: false },
        ..InnerConfig::default()
    };
    let beta = 1e-2 * crate::inversion::data_scale(Method::Wri, &model, &survey, AnnihilatorKind::Identity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6ad);
    let mut checks = Vec::new();
    for (method, limit) in [(Method::Fwi, 1e-4), (Method::Wri, 1e-3), (Method::Esi, 1e-3)] {
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let dir = random_vec(&mut rng, model.dims().len());
            let (an, fd) = directional_check(method, &model, &survey, beta, &dir, &inner)?;
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()));
        }
        checks.push(Check {
            suite: Suite::GradientFd,
            name: format!("{method} gradient vs central differences"),
            value: worst,
            limit,
        });
    }
    Ok(checks)
}

/// The dense-oracle instance: 7×7 physical nodes plus a one-node sponge, nt = 20.
pub fn dense_instance() -> Result<(OpS, Geometry, ModelGrid)> {
    let dims = GridDims::new(9, 9, 10.0, 10.0, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = random_model(dims, &mut rng)?;
    let geom = Geometry::new(
        vec![Position::new(30.0, 0.0)],
        vec![Position::new(0.0, 0.0), Position::new(30.0, 30.0), Position::new(60.0, 10.0)],
        20,
        1e-3,
        25.0,
    )?;
    Ok((op_s(&model, &geom)?, geom, model))
}

fn dense_suite() -> Result<Vec<Check>> {
    let (s, geom, model) = dense_instance()?;
    let dims = *model.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let rhs = random_vec(&mut rng, s.propagator().movie_len());
    let mut checks = Vec::new();
    for (label, b) in [
        ("ESI", Annihilator::for_shot(AnnihilatorKind::SpatialDistance, &dims, &geom, 0)?),
        ("WRI", Annihilator::identity(&dims, geom.nt)),
    ] {
        let op = NormalOperator::new(s.clone(), b, 0.5)?;
        let a = materialize(&op)?;
        let scale = a.amax();
        let (lo, _) = eigen_range(&a);
        checks.push(Check { suite: Suite::DenseOracle, name: format!("{label} symmetry"), value: symmetry_error(&a), limit: 1e-10 });
        checks.push(Check {
            suite: Suite::DenseOracle,
            name: format!("{label} positive semidefinite (negated min eigenvalue)"),
            value: -lo / scale,
            limit: 1e-10,
        });
        let direct = solve_spd(&a, &rhs)?;
        let (x, _) = cg_solve(&op, &rhs, &CgConfig { max_iters: 5000, tol: 1e-10, record_history: false })?;
        checks.push(Check { suite: Suite::DenseOracle, name: format!("{label} CG vs direct solve"), value: rel_diff(&x, &direct), limit: 1e-6 });
        let ax = mat_vec(&a, &x);
        checks.push(Check {
            suite: Suite::DenseOracle,
            name: format!("{label} dense residual of CG solution"),
            value: rel_diff(&ax, &rhs),
            limit: 1e-8,
        });
    }
    Ok(checks)
}

fn smw_suite() -> Result<Vec<Check>> {
    let (s, geom, model) = dense_instance()?;
    let dims = *model.dims();
    let b = Annihilator::for_shot(AnnihilatorKind::SpatialDistance, &dims, &geom, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = ShotGather::from_data(0, geom.nt, geom.receivers.len(), random_vec(&mut rng, s.data_len()))?;
    let tight = CgConfig { max_iters: 5000, tol: 1e-13, record_history: false };
    let mut checks = Vec::new();
    for beta in [1e-2, 1.0, 1e2] {
        let op = NormalOperator::new(s.clone(), b.clone(), beta)?;
        let a = materialize(&op)?;
        let q_model = solve_spd(&a, &s.apply_adjoint(&d.data)?)?;
        let q_data = data_space_solve_esi(&s, &b, beta, &d, &tight)?.q;
        checks.push(Check {
            suite: Suite::Smw,
            name: format!("data-space vs model-space source, beta = {beta:e}"),
            value: rel_diff(&q_data, &q_model),
            limit: 1e-6,
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_selection_is_an_error() {
        assert!(run(&[], &SelftestOptions::default()).is_err());
    }

    #[test]
    fn clean_build_passes_dot_products_and_fault_is_caught() {
        let ok = run(&[Suite::DotProduct], &SelftestOptions::default()).unwrap();
        assert!(ok.iter().all(Check::passed), "{ok:?}");
        let broken = run(&[Suite::DotProduct], &SelftestOptions { inject_adjoint_fault: true, ..Default::default() }).unwrap();
        assert!(broken.iter().any(|c| !c.passed()));
    }

    #[test]
    fn dense_and_smw_suites_pass() {
        let checks = run(&[Suite::DenseOracle, Suite::Smw], &SelftestOptions::default()).unwrap();
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let checks = run(&[Suite::GradientFd], &SelftestOptions::default()).unwrap();
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }
}

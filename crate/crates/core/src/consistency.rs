//! Mean-field consistency: the limiting state average x̄ as the fixed point of
//! the map 𝒯, together with the force rates γ and τ.
//!
//! Given x̄, the force rates solve the backward equations
//!
//! ```text
//! γ' + 𝔸γ + Θ₃x̄ − Qη = 0,        γ(T) = 0
//! τ' + Cτ + Θ₂γ + Θ₄x̄ = 0,        τ(T) = 0
//! ```
//!
//! and 𝒯x̄ is the solution of the forward equation
//!
//! ```text
//! x̄' = (𝔸 + F)x̄ + (ζ(0)x₀ + τ(0))Θ₁e^{Ct} − R⁻¹B²γ,    x̄(0) = x₀.
//! ```

use std::io::{self, Write};

use crate::csv::CsvWriter;
use crate::error::{Error, Result};
use crate::model::{DeterministicPath, ModelParams};
use crate::numerics::{component, rk4_solve_system, HalfStepTable, OdeProblem};
use crate::riccati::{check_h2, RiccatiBundle};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation weight in (0, 1]; 1 is plain Picard.
    pub damping: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200, damping: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ConsistencySolution {
    pub xbar: DeterministicPath,
    pub gamma: DeterministicPath,
    pub tau: DeterministicPath,
    /// ‖𝒯x̄ − x̄‖∞ of the returned x̄.
    pub residual: f64,
    pub iterations: usize,
    /// Geometric mean of successive residual ratios.
    pub empirical_rate: f64,
    pub residual_history: Vec<f64>,
    /// False when κ ≥ 1, i.e. convergence was not guaranteed a priori.
    pub guaranteed: bool,
    pub kappa: f64,
    pub x0: f64,
}

impl ConsistencySolution {
    /// Rows `t, xbar, gamma, tau`.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<W> {
        let mut w = CsvWriter::new(out, &["t", "xbar", "gamma", "tau"])?;
        for (k, t) in self.xbar.grid().nodes().enumerate() {
            w.float_row(&[t, self.xbar.values()[k], self.gamma.values()[k], self.tau.values()[k]])?;
        }
        w.finish()
    }
}

/// x̄-independent coefficients sampled at nodes and midpoints of the bundle grid.
struct Coefficients {
    a_cal: HalfStepTable,
    theta1_growth: HalfStepTable,
    theta2: HalfStepTable,
    theta3: HalfStepTable,
    theta4: HalfStepTable,
}

impl Coefficients {
    fn new(bundle: &RiccatiBundle, p: &ModelParams) -> Self {
        let grid = bundle.grid();
        let theta1 = bundle.theta(1);
        Self {
            a_cal: HalfStepTable::new(&bundle.a_cal, grid),
            theta1_growth: HalfStepTable::from_fn(grid, |t| theta1.eval_cubic(t) * (p.c * t).exp()),
            theta2: HalfStepTable::new(bundle.theta(2), grid),
            theta3: HalfStepTable::new(bundle.theta(3), grid),
            theta4: HalfStepTable::new(bundle.theta(4), grid),
        }
    }
}

fn check_grid(xbar: &DeterministicPath, bundle: &RiccatiBundle) -> Result<()> {
    if xbar.grid() != bundle.grid() {
        return Err(Error::InvalidInput("x̄ must be sampled on the Riccati grid".into()));
    }
    Ok(())
}

fn gamma_tau_with(
    coef: &Coefficients,
    xbar: &DeterministicPath,
    p: &ModelParams,
) -> Result<(DeterministicPath, DeterministicPath)> {
    let grid = xbar.grid();
    let xbar_at = HalfStepTable::new(xbar, grid);
    let q_eta = p.q * p.eta;
    let prob = OdeProblem::backward([0.0, 0.0], |t, y: &[f64; 2]| {
        let x = xbar_at.at(t);
        let gamma = y[0];
        [
            -(coef.a_cal.at(t) * gamma + coef.theta3.at(t) * x - q_eta),
            -(p.c * y[1] + coef.theta2.at(t) * gamma + coef.theta4.at(t) * x),
        ]
    });
    let states = rk4_solve_system(&prob, grid)?;
    Ok((component(grid, &states, 0), component(grid, &states, 1)))
}

/// Force rates (γ, τ) for a given x̄, by joint backward RK4.
pub fn gamma_tau(
    xbar: &DeterministicPath,
    bundle: &RiccatiBundle,
    p: &ModelParams,
) -> Result<(DeterministicPath, DeterministicPath)> {
    check_grid(xbar, bundle)?;
    gamma_tau_with(&Coefficients::new(bundle, p), xbar, p)
}

/// γ(t) = ∫_t^T Γ_t^v (Θ₃(v)x̄(v) − Qη) dv by quadrature.
pub fn gamma_from_integral(
    xbar: &DeterministicPath,
    bundle: &RiccatiBundle,
    p: &ModelParams,
) -> Result<DeterministicPath> {
    use crate::numerics::cumulative_integral;
    check_grid(xbar, bundle)?;
    let grid = *bundle.grid();
    let h = grid.step();
    let g = cumulative_integral(bundle.a_cal.values(), h);
    let weighted: Vec<f64> =
        (0..grid.len()).map(|k| g[k].exp() * (bundle.theta(3).values()[k] * xbar.values()[k] - p.q * p.eta)).collect();
    let w = cumulative_integral(&weighted, h);
    let total = w[w.len() - 1];
    Ok(DeterministicPath::new(grid, (0..grid.len()).map(|k| (-g[k]).exp() * (total - w[k])).collect())?)
}

fn apply_with(
    coef: &Coefficients,
    xbar_in: &DeterministicPath,
    bundle: &RiccatiBundle,
    p: &ModelParams,
    x0: f64,
) -> Result<(DeterministicPath, DeterministicPath, DeterministicPath)> {
    let (gamma, tau) = gamma_tau_with(coef, xbar_in, p)?;
    let grid = xbar_in.grid();
    let gamma_at = HalfStepTable::new(&gamma, grid);
    let weight = bundle.zeta.first() * x0 + tau.first();
    let rb2 = p.r_inv() * p.b * p.b;
    let prob = OdeProblem::forward([x0], |t, y: &[f64; 1]| {
        [(coef.a_cal.at(t) + p.f) * y[0] + weight * coef.theta1_growth.at(t) - rb2 * gamma_at.at(t)]
    });
    let states = rk4_solve_system(&prob, grid)?;
    Ok((component(grid, &states, 0), gamma, tau))
}

/// One application of the consistency map 𝒯.
pub fn apply_map(
    xbar_in: &DeterministicPath,
    bundle: &RiccatiBundle,
    p: &ModelParams,
    x0: f64,
) -> Result<DeterministicPath> {
    check_grid(xbar_in, bundle)?;
    Ok(apply_with(&Coefficients::new(bundle, p), xbar_in, bundle, p, x0)?.0)
}

/// Relaxed Picard iteration x̄ ← (1 − d)x̄ + d·𝒯x̄ from x̄⁰ ≡ x₀.
pub fn picard_solve(
    bundle: &RiccatiBundle,
    p: &ModelParams,
    x0: f64,
    opts: &PicardOptions,
) -> Result<ConsistencySolution> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidInput("damping must lie in (0, 1]".into()));
    }
    let h2 = check_h2(bundle, p);
    let coef = Coefficients::new(bundle, p);
    let mut xbar = DeterministicPath::constant(*bundle.grid(), x0);
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (mapped, gamma, tau) = apply_with(&coef, &xbar, bundle, p, x0)?;
        let residual = mapped.sup_distance(&xbar);
        history.push(residual);
        if residual <= opts.tol {
            return Ok(ConsistencySolution {
                xbar,
                gamma,
                tau,
                residual,
                iterations,
                empirical_rate: geometric_rate(&history),
                residual_history: history,
                guaranteed: h2.pass,
                kappa: h2.kappa,
                x0,
            });
        }
        if iterations >= opts.max_iter || !residual.is_finite() {
            return Err(Error::NotConverged { iterations, residual, tol: opts.tol });
        }
        let d = opts.damping;
        xbar = if d == 1.0 { mapped } else { xbar.zip_with(&mapped, |a, b| (1.0 - d) * a + d * b) };
        iterations += 1;
    }
}

/// Geometric mean of `r_{k+1} / r_k`, skipping ratios that touch round-off level residuals.
fn geometric_rate(history: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-13;
    let logs: Vec<f64> =
        history.windows(2).filter(|w| w[0] > FLOOR && w[1] > FLOOR).map(|w| (w[1] / w[0]).ln()).collect();
    if logs.is_empty() {
        return 0.0;
    }
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Largest centered-difference defect of (x̄, γ, τ) in their three ODEs over interior nodes.
pub fn crosscheck_fbode(sol: &ConsistencySolution, bundle: &RiccatiBundle, p: &ModelParams) -> f64 {
    let grid = sol.xbar.grid();
    let h = grid.step();
    let (x, g, tau) = (sol.xbar.values(), sol.gamma.values(), sol.tau.values());
    let weight = bundle.zeta.first() * sol.x0 + tau[0];
    let rb2 = p.r_inv() * p.b * p.b;
    let mut worst: f64 = 0.0;
    for k in 1..grid.steps() {
        let t = grid.node(k);
        let acal = bundle.a_cal.values()[k];
        let th = |i: usize| bundle.theta(i).values()[k];
        let d = |v: &[f64]| (v[k + 1] - v[k - 1]) / (2.0 * h);
        let dx = d(x) - ((acal + p.f) * x[k] + weight * th(1) * (p.c * t).exp() - rb2 * g[k]);
        let dg = d(g) + acal * g[k] + th(3) * x[k] - p.q * p.eta;
        let dt = d(tau) + p.c * tau[k] + th(2) * g[k] + th(4) * x[k];
        worst = worst.max(dx.abs()).max(dg.abs()).max(dt.abs());
    }
    worst
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use rand::{Rng, SeedableRng};

    pub(crate) fn reference() -> ModelParams {
        ModelParams {
            a: 0.2,
            b: 1.0,
            f: 0.4,
            sigma: 0.3,
            c: 0.1,
            d: 0.5,
            h: 0.3,
            l: 0.4,
            k: 0.5,
            q: 1.0,
            r: 2.0,
            s: 0.6,
            eta: 0.5,
            n0: 0.5,
            t: 1.0,
        }
    }

    fn setup(p: &ModelParams, m: usize) -> RiccatiBundle {
        RiccatiBundle::solve(p, &TimeGrid::new(p.t, m).unwrap()).unwrap()
    }

    #[test]
    fn gamma_zero_without_sources() {
        let p = ModelParams { a: 0.3, b: 1.0, f: 0.0, ..ModelParams::default() };
        let b = setup(&p, 200);
        let xbar = DeterministicPath::from_fn(*b.grid(), |t| (3.0 * t).cos());
        let (gamma, tau) = gamma_tau(&xbar, &b, &p).unwrap();
        assert_eq!(gamma.sup_norm(), 0.0);
        assert_eq!(tau.sup_norm(), 0.0);
    }

    #[test]
    fn gamma_linear_when_uncontrolled() {
        let p = ModelParams { q: 2.0, eta: 0.7, ..ModelParams::default() };
        let b = setup(&p, 200);
        let xbar = DeterministicPath::constant(*b.grid(), 0.0);
        let (gamma, _) = gamma_tau(&xbar, &b, &p).unwrap();
        for (k, t) in b.grid().nodes().enumerate() {
            assert!((gamma.values()[k] + 2.0 * 0.7 * (1.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_ode_matches_integral() {
        let p = reference();
        let b = setup(&p, 2000);
        let xbar = DeterministicPath::from_fn(*b.grid(), |t| 1.0 + 0.5 * (2.0 * t).sin());
        let (gamma, tau) = gamma_tau(&xbar, &b, &p).unwrap();
        let oracle = gamma_from_integral(&xbar, &b, &p).unwrap();
        assert!(gamma.sup_distance(&oracle) <= 1e-8);
        assert_eq!(gamma.last(), 0.0);
        assert_eq!(tau.last(), 0.0);
    }

    #[test]
    fn map_is_free_evolution_without_coupling() {
        let p = ModelParams { a: 0.7, b: 1.0, c: 0.3, d: 0.4, ..ModelParams::default() };
        let b = setup(&p, 400);
        let x0 = 1.3;
        let exact = DeterministicPath::from_fn(*b.grid(), |t| x0 * (0.7 * t).exp());
        for seed in 0..3 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c: f64 = rng.random_range(-2.0..2.0);
            let xbar = DeterministicPath::from_fn(*b.grid(), |t| c * t * t);
            let mapped = apply_map(&xbar, &b, &p, x0).unwrap();
            assert!(mapped.sup_distance(&exact) < 1e-10);
        }
    }

    #[test]
    fn map_of_zero_is_zero() {
        let p = ModelParams { eta: 0.0, ..reference() };
        let b = setup(&p, 400);
        let zero = DeterministicPath::constant(*b.grid(), 0.0);
        assert_eq!(apply_map(&zero, &b, &p, 0.0).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn ode_route_matches_nested_quadrature() {
        let p = reference();
        let b = setup(&p, 400);
        let xbar = DeterministicPath::from_fn(*b.grid(), |t| 0.8 + 0.3 * t - 0.2 * (3.0 * t).sin());
        let fast = apply_map(&xbar, &b, &p, 1.1).unwrap();
        let literal = oracle::apply_map_nested(&xbar, &b, &p, 1.1);
        assert!(fast.sup_distance(&literal) < 1e-8, "gap {}", fast.sup_distance(&literal));
    }

    #[test]
    fn map_contracts_at_most_by_kappa() {
        let p = reference();
        let b = setup(&p, 400);
        let h2 = check_h2(&b, &p);
        assert!(h2.pass, "kappa {}", h2.kappa);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let d: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let x = DeterministicPath::from_fn(*b.grid(), |t| c[0] + c[1] * t + c[2] * (4.0 * t).sin() + c[3] * t * t);
            let y = DeterministicPath::from_fn(*b.grid(), |t| d[0] + d[1] * t + d[2] * (4.0 * t).cos() + d[3] * t * t);
            let tx = apply_map(&x, &b, &p, 1.0).unwrap();
            let ty = apply_map(&y, &b, &p, 1.0).unwrap();
            assert!(tx.sup_distance(&ty) <= h2.kappa * 1.05 * x.sup_distance(&y));
        }
    }

    #[test]
    fn picard_trivial_case_converges_in_one_step() {
        let p = ModelParams { a: 0.5, b: 1.0, d: 0.3, ..ModelParams::default() };
        let b = setup(&p, 400);
        let sol = picard_solve(&b, &p, 2.0, &PicardOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.residual <= 1e-12);
        for (k, t) in b.grid().nodes().enumerate() {
            assert!((sol.xbar.values()[k] - 2.0 * (0.5 * t).exp()).abs() < 1e-10);
        }
        assert!(crosscheck_fbode(&sol, &b, &p) <= 1e-6);
    }

    #[test]
    fn picard_reference_set() {
        let p = reference();
        let b = setup(&p, 2000);
        let sol = picard_solve(&b, &p, 1.0, &PicardOptions::default()).unwrap();
        assert!(sol.guaranteed);
        assert!(sol.residual <= 1e-10);
        assert!(sol.iterations <= 200);
        assert!(sol.empirical_rate <= sol.kappa + 0.05, "rate {} kappa {}", sol.empirical_rate, sol.kappa);
        assert_eq!(sol.gamma.last(), 0.0);
        assert_eq!(sol.tau.last(), 0.0);
        assert_eq!(sol.xbar.first(), 1.0);
        let defect = crosscheck_fbode(&sol, &b, &p);
        assert!(defect <= 1e-5, "defect {defect}");
    }

    #[test]
    fn fbode_defect_is_second_order() {
        let p = reference();
        let coarse = setup(&p, 200);
        let fine = setup(&p, 400);
        let d1 = crosscheck_fbode(&picard_solve(&coarse, &p, 1.0, &PicardOptions::default()).unwrap(), &coarse, &p);
        let d2 = crosscheck_fbode(&picard_solve(&fine, &p, 1.0, &PicardOptions::default()).unwrap(), &fine, &p);
        let ratio = d1 / d2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn grid_refinement_is_stable() {
        let p = reference();
        let coarse = setup(&p, 100);
        let fine = setup(&p, 200);
        let xc = picard_solve(&coarse, &p, 1.0, &PicardOptions::default()).unwrap().xbar;
        let xf = picard_solve(&fine, &p, 1.0, &PicardOptions::default()).unwrap().xbar;
        let gap = (0..=100).fold(0.0f64, |m, k| m.max((xc.values()[k] - xf.values()[2 * k]).abs()));
        let h = 0.01;
        assert!(gap <= 10.0 * h * h, "gap {gap}");
    }

    #[test]
    fn strong_coupling_is_flagged() {
        let p = ModelParams { f: 3.0, q: 4.0, s: 2.0, ..reference() };
        let b = setup(&p, 400);
        assert!(!check_h2(&b, &p).pass);
        let opts = PicardOptions { damping: 0.5, max_iter: 400, ..PicardOptions::default() };
        match picard_solve(&b, &p, 1.0, &opts) {
            Ok(sol) => {
                assert!(!sol.guaranteed);
                assert!(sol.residual <= opts.tol);
            }
            Err(e) => assert!(e.is_non_convergence()),
        }
    }

    #[test]
    fn max_iter_reports_last_residual() {
        let p = reference();
        let b = setup(&p, 200);
        let err = picard_solve(&b, &p, 1.0, &PicardOptions { max_iter: 2, ..PicardOptions::default() }).unwrap_err();
        match err {
            Error::NotConverged { iterations, residual, .. } => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_options() {
        let p = reference();
        let b = setup(&p, 50);
        assert!(picard_solve(&b, &p, 1.0, &PicardOptions { tol: 0.0, ..Default::default() }).is_err());
        assert!(picard_solve(&b, &p, 1.0, &PicardOptions { damping: 1.5, ..Default::default() }).is_err());
    }
}

mod common;

use common::{equilibrium, reference};
use mflqg::nash::*;
use mflqg::numerics::{rk4_solve_system, trapezoid_values, OdeProblem};
use mflqg::simulator::*;
use mflqg::{InitialLaw, ModelParams, RngContract, TimeGrid};

fn coef(eq: &mflqg::strategy::Equilibrium, m: usize) -> SimCoefficients {
    SimCoefficients::new(eq, TimeGrid::new(eq.params.t, m).unwrap()).unwrap()
}

#[test]
fn costs_vanish_without_penalties() {
    let p = ModelParams { q: 0.0, n0: 0.0, ..reference() };
    let eq = equilibrium(p, InitialLaw::gaussian(1.0, 0.5));
    let coef = coef(&eq, 100);
    let report = cost_report(&eq, &coef, 4, 5, &RngContract::new(1)).unwrap();
    for e in report.population.iter().chain(&report.limiting) {
        assert_eq!(e.mean, 0.0);
    }
    let spec = PerturbationSpec::zero(*coef.grid());
    let margins = epsilon_nash_check(&eq, &coef, 4, 5, &[spec], &RngContract::new(1)).unwrap();
    assert_eq!(margins.rows[0].cost.mean, 0.0);
    assert_eq!(margins.baseline.mean, 0.0);
}

#[test]
fn costs_are_nonnegative() {
    let eq = equilibrium(reference(), InitialLaw::gaussian(1.0, 0.5));
    let report = cost_report(&eq, &coef(&eq, 100), 6, 10, &RngContract::new(2)).unwrap();
    assert!(report.population.iter().chain(&report.limiting).all(|e| e.mean > 0.0 && e.stderr >= 0.0));
}

#[test]
fn noiseless_cost_is_deterministic_quadrature() {
    let p = ModelParams { sigma: 0.0, n0: 0.0, ..reference() };
    let eq = equilibrium(p, InitialLaw::point(1.0));
    let grid = *eq.solver_grid();
    let integrand: Vec<f64> = grid
        .nodes()
        .map(|t| {
            let x = eq.solution.xbar.eval_cubic(t);
            let u = mflqg::strategy::feedback_control(t, x, 1.0, &eq.kit);
            p.q * (x - (p.s * x + p.eta)).powi(2) + p.r * u * u
        })
        .collect();
    let expected = 0.5 * trapezoid_values(&integrand, grid.step());
    let report = cost_report(&eq, &coef(&eq, 4000), 3, 2, &RngContract::new(3)).unwrap();
    for e in &report.population {
        assert!((e.mean - expected).abs() < 1e-3, "{} vs {expected}", e.mean);
        assert_eq!(e.stderr, 0.0);
    }
    for e in &report.limiting {
        assert_eq!(e.mean, report.limiting[0].mean);
        assert!((e.mean - expected).abs() < 1e-3);
    }
}

#[test]
fn limiting_cost_matches_second_moment_equations() {
    let eq = equilibrium(reference(), InitialLaw::point(1.0));
    let p = eq.params;
    let coef = coef(&eq, 1000);
    let grid = *coef.grid();
    let (rb, x0) = (p.b / p.r, 1.0);
    let w = eq.kit.initial_weight(x0);
    let theta1 = eq.bundle.theta(1);
    let drift_offset = |t: f64| {
        w * theta1.eval_cubic(t) * (p.c * t).exp() - rb * p.b * eq.solution.gamma.eval_cubic(t)
            + p.f * eq.solution.xbar.eval_cubic(t)
    };
    let control = |t: f64| (eq.kit.gain.eval_cubic(t), mflqg::strategy::feedback_control(t, 0.0, x0, &eq.kit));
    // E x and E x² for dx = (𝔸x + b)dt + σx dW
    let moments = OdeProblem::forward([x0, x0 * x0], |t, m: &[f64; 2]| {
        let a = eq.bundle.a_cal.eval_cubic(t);
        let b = drift_offset(t);
        [a * m[0] + b, (2.0 * a + p.sigma * p.sigma) * m[1] + 2.0 * b * m[0]]
    });
    let states = rk4_solve_system(&moments, &grid).unwrap();
    let integrand: Vec<f64> = grid
        .nodes()
        .zip(&states)
        .map(|(t, m)| {
            let target = p.s * eq.solution.xbar.eval_cubic(t) + p.eta;
            let (g, c) = control(t);
            p.q * (m[1] - 2.0 * target * m[0] + target * target) + p.r * (g * g * m[1] + 2.0 * g * c * m[0] + c * c)
        })
        .collect();
    let expected = 0.5 * trapezoid_values(&integrand, grid.step()) + 0.5 * p.n0 * eq.kit.y0_hat(x0).powi(2);

    // limiting agents are i.i.d., so pool all of them
    let xbar = coef.xbar_nodes();
    let rng = RngContract::new(8);
    let mut samples = Vec::new();
    for rep in 0..400 {
        let res = simulate_limiting(&eq, &coef, 25, &rng, rep).unwrap();
        samples.extend(cost_limiting(&res, &xbar, &p));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let se = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
}

#[test]
fn uncoupled_sweep_is_degenerate() {
    let p = ModelParams { f: 0.0, ..reference() };
    let eq = equilibrium(p, InitialLaw::gaussian(1.0, 0.5));
    let report = convergence_sweep(&eq, &coef(&eq, 50), &[2, 4, 8], 4, &RngContract::new(1)).unwrap();
    for row in &report.rows {
        assert_eq!(row.state_gap.mean, 0.0);
        assert_eq!(row.control_gap.mean, 0.0);
        assert!(row.mean_gap.mean > 0.0);
    }
    assert!(report.fits.state_gap.is_none());
    assert!(report.fits.control_gap.is_none());
}

#[test]
fn single_population_size_has_no_slopes() {
    let eq = equilibrium(reference(), InitialLaw::gaussian(1.0, 0.5));
    let report = convergence_sweep(&eq, &coef(&eq, 50), &[8], 4, &RngContract::new(1)).unwrap();
    assert!(report.fits.mean_gap.is_none() && report.fits.cost_gap.is_none());
    assert!(convergence_sweep(&eq, &coef(&eq, 50), &[], 4, &RngContract::new(1)).is_err());
}

#[test]
fn common_random_numbers_reduce_gap_variance() {
    let eq = equilibrium(reference(), InitialLaw::gaussian(1.0, 0.5));
    let p = eq.params;
    let coef = coef(&eq, 100);
    let xbar = coef.xbar_nodes();
    let rng = RngContract::new(5);
    let (mut paired, mut independent) = (Vec::new(), Vec::new());
    for rep in 0..200 {
        let pop = cost_population(&simulate_population(&eq, &coef, 16, &rng, rep).unwrap(), &p)[0];
        let lim = cost_limiting(&simulate_limiting(&eq, &coef, 16, &rng, rep).unwrap(), &xbar, &p)[0];
        let other = cost_limiting(&simulate_limiting(&eq, &coef, 16, &rng, rep + 10_000).unwrap(), &xbar, &p)[0];
        paired.push(pop - lim);
        independent.push(pop - other);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&paired) < 0.1 * var(&independent));
}

#[test]
fn agents_are_exchangeable() {
    let eq = equilibrium(reference(), InitialLaw::gaussian(1.0, 0.5));
    let report = cost_report(&eq, &coef(&eq, 100), 8, 400, &RngContract::new(6)).unwrap();
    let (a, b) = (report.population[0], report.population[7]);
    assert!((a.mean - b.mean).abs() < 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
}

#[test]
fn deviations_do_not_pay() {
    let eq = equilibrium(reference(), InitialLaw::gaussian(1.0, 0.5));
    let coef = coef(&eq, 200);
    let mut family = default_family(&eq);
    family.push(PerturbationSpec::scaled_gain(&eq.kit, 1.1));
    let sweep = epsilon_sweep(&eq, &coef, &[16, 32, 64], 20, &family, &RngContract::new(7)).unwrap();
    for report in &sweep.reports {
        let eps = sweep.extrapolate(report.n);
        assert!(report.min_margin >= -eps - 1e-15);
        let own = &report.rows[0];
        assert_eq!(own.label, "self");
        assert!(own.margin.mean.abs() <= 3.0 * own.margin.stderr);
        let zero = report.rows.iter().find(|r| r.label == "zero").unwrap();
        assert!(zero.margin.mean > 3.0 * zero.margin.stderr);
        for row in &report.rows[1..] {
            assert!(row.margin.mean >= -eps - 1e-15, "{}: {:?}", row.label, row.margin);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let eq = equilibrium(reference(), InitialLaw::gaussian(1.0, 0.5));
    let coef = coef(&eq, 50);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| convergence_sweep(&eq, &coef, &[4, 8, 16], 37, &RngContract::new(9)).unwrap())
    };
    let (one, many) = (run(1), run(5));
    for (a, b) in one.rows.iter().zip(&many.rows) {
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}

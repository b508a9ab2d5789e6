//! Monte Carlo engine for the N-agent closed loop, its limiting counterpart,
//! and single-agent deviations.
//!
//! Forward states use Euler–Maruyama with the state average taken from the
//! current step (explicit coupling). Backward initial values are never
//! simulated: `y_i(0)` is the F₀-conditional expectation of a linear
//! functional of the forward states, so it is computed from the conditional
//! mean ODEs (the multiplicative noise has zero mean) by RK4.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{sample_initials, DeterministicPath, RngContract, StreamPurpose, TimeGrid};
use crate::numerics::{rk4_solve_system, HalfStepTable, NumericsError, OdeProblem};
use crate::strategy::{Equilibrium, StrategyKit};

/// Coefficients of the closed-loop dynamics sampled on a simulation grid.
#[derive(Debug, Clone)]
pub struct SimCoefficients {
    grid: TimeGrid,
    /// 𝔸(t)
    a_cal: HalfStepTable,
    /// Θ₁(t)e^{Ct}
    theta1_growth: HalfStepTable,
    /// −R⁻¹B²γ(t)
    drift_offset: HalfStepTable,
    xbar: HalfStepTable,
    /// −R⁻¹Bβ(t)
    gain: HalfStepTable,
    /// Θ₅(t)e^{Ct}
    theta5_growth: HalfStepTable,
    /// −R⁻¹Bγ(t)
    control_offset: HalfStepTable,
    /// H − R⁻¹BDβ(t)
    backward_state: HalfStepTable,
    /// −R⁻¹BDγ(t)
    backward_offset: HalfStepTable,
    kit: StrategyKit,
}

impl SimCoefficients {
    pub fn new(eq: &Equilibrium, grid: TimeGrid) -> Result<Self> {
        let solver = eq.solver_grid();
        if (solver.horizon() - grid.horizon()).abs() > 1e-12 * solver.horizon() {
            return Err(Error::InvalidInput("simulation grid must span the model horizon".into()));
        }
        let p = &eq.params;
        let rb = p.r_inv() * p.b;
        let b = &eq.bundle;
        let s = &eq.solution;
        let theta1 = b.theta(1);
        let theta5 = b.theta(5);
        Ok(Self {
            grid,
            a_cal: HalfStepTable::new(&b.a_cal, &grid),
            theta1_growth: HalfStepTable::from_fn(&grid, |t| theta1.eval_cubic(t) * (p.c * t).exp()),
            drift_offset: HalfStepTable::from_fn(&grid, |t| -rb * p.b * s.gamma.eval_cubic(t)),
            xbar: HalfStepTable::new(&s.xbar, &grid),
            gain: HalfStepTable::from_fn(&grid, |t| -rb * b.beta.eval_cubic(t)),
            theta5_growth: HalfStepTable::from_fn(&grid, |t| theta5.eval_cubic(t) * (p.c * t).exp()),
            control_offset: HalfStepTable::from_fn(&grid, |t| -rb * s.gamma.eval_cubic(t)),
            backward_state: HalfStepTable::from_fn(&grid, |t| p.h - rb * p.d * b.beta.eval_cubic(t)),
            backward_offset: HalfStepTable::from_fn(&grid, |t| -rb * p.d * s.gamma.eval_cubic(t)),
            kit: eq.kit.clone(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// x̄ at the simulation nodes.
    pub fn xbar_nodes(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|k| self.xbar.node(k)).collect()
    }

    /// Decentralized control at node `k`.
    #[inline]
    fn control(&self, k: usize, x: f64, weight: f64) -> f64 {
        self.gain.node(k) * x + weight * self.theta5_growth.node(k) + self.control_offset.node(k)
    }

    /// Closed-loop drift at node `k` given the coupling term `avg`.
    #[inline]
    fn drift(&self, k: usize, x: f64, weight: f64, f: f64, avg: f64) -> f64 {
        self.a_cal.node(k) * x + weight * self.theta1_growth.node(k) + self.drift_offset.node(k) + f * avg
    }
}

/// One replication of the N-agent closed loop.
#[derive(Debug, Clone)]
pub struct PopulationResult {
    pub n: usize,
    pub grid: TimeGrid,
    pub replication: u64,
    pub master_seed: u64,
    pub initial: Vec<f64>,
    /// `x[i][k]`: state of agent `i` at node `k`.
    pub x: Vec<Vec<f64>>,
    /// State average at every node.
    pub xavg: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    /// Backward initial values `y_i(0)`; empty for perturbed runs, whose
    /// deviating agent's value is returned separately.
    pub y0: Vec<f64>,
}

/// The limiting auxiliary systems driven by the same noise as a population run.
#[derive(Debug, Clone)]
pub struct LimitingResult {
    pub n: usize,
    pub grid: TimeGrid,
    pub initial: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// ŷ_i(0) from the decoupled formula.
    pub y0: Vec<f64>,
}

fn brownian_streams(rng: &RngContract, replication: u64, n: usize) -> Vec<rand_chacha::ChaCha8Rng> {
    (0..n).map(|i| rng.stream(replication, i as u64, StreamPurpose::Brownian)).collect()
}

fn non_finite(grid: &TimeGrid, step: usize) -> Error {
    NumericsError::NonFinite { t: grid.node(step), step }.into()
}

/// Coupling target used by [`run_closed_loop`].
enum Coupling<'a> {
    /// The empirical state average, recomputed every step.
    Population,
    /// A fixed deterministic path (the limiting x̄).
    Fixed(&'a HalfStepTable),
}

/// Affine deviation `u = a(t)x + b(t) + c(t)x_0` for one agent.
struct Deviation<'a> {
    agent: usize,
    gain: &'a HalfStepTable,
    offset: &'a HalfStepTable,
    loading: &'a HalfStepTable,
}

struct Paths {
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    xavg: Vec<f64>,
}

fn run_closed_loop(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    initial: &[f64],
    rng: &RngContract,
    replication: u64,
    coupling: Coupling<'_>,
    deviation: Option<&Deviation<'_>>,
) -> Result<Paths> {
    let p = &eq.params;
    let grid = coef.grid;
    let m = grid.steps();
    let n = initial.len();
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let weights: Vec<f64> = initial.iter().map(|&x0| coef.kit.initial_weight(x0)).collect();
    let mut streams = brownian_streams(rng, replication, n);
    let mut x = vec![vec![0.0; m + 1]; n];
    let mut u = vec![vec![0.0; m + 1]; n];
    let mut xavg = vec![0.0; m + 1];
    for (path, &x0) in x.iter_mut().zip(initial) {
        path[0] = x0;
    }
    let control = |k: usize, i: usize, xi: f64| -> f64 {
        match deviation {
            Some(d) if d.agent == i => d.gain.node(k) * xi + d.offset.node(k) + d.loading.node(k) * initial[i],
            _ => coef.control(k, xi, weights[i]),
        }
    };
    for k in 0..=m {
        let avg = x.iter().map(|path| path[k]).sum::<f64>() / n as f64;
        xavg[k] = avg;
        for i in 0..n {
            u[i][k] = control(k, i, x[i][k]);
        }
        if k == m {
            break;
        }
        let target = match coupling {
            Coupling::Population => avg,
            Coupling::Fixed(xbar) => xbar.node(k),
        };
        for i in 0..n {
            let xi = x[i][k];
            let drift = match deviation {
                Some(d) if d.agent == i => p.a * xi + p.b * u[i][k] + p.f * target,
                _ => coef.drift(k, xi, weights[i], p.f, target),
            };
            let z: f64 = StandardNormal.sample(&mut streams[i]);
            let next = xi + drift * h + p.sigma * xi * sqrt_h * z;
            if !next.is_finite() {
                return Err(non_finite(&grid, k + 1));
            }
            x[i][k + 1] = next;
        }
    }
    Ok(Paths { x, u, xavg })
}

fn check_population(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("population needs at least one agent".into()));
    }
    Ok(())
}

/// One replication of the N-agent closed loop under the decentralized law.
pub fn simulate_population(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n: usize,
    rng: &RngContract,
    replication: u64,
) -> Result<PopulationResult> {
    check_population(n)?;
    let initial = sample_initials(&eq.law, n, rng, replication);
    simulate_population_from(eq, coef, &initial, rng, replication)
}

/// As [`simulate_population`] with the initial states given explicitly.
pub fn simulate_population_from(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    initial: &[f64],
    rng: &RngContract,
    replication: u64,
) -> Result<PopulationResult> {
    check_population(initial.len())?;
    let paths = run_closed_loop(eq, coef, initial, rng, replication, Coupling::Population, None)?;
    let y0 = backward_y0_population(eq, coef, initial)?;
    Ok(PopulationResult {
        n: initial.len(),
        grid: coef.grid,
        replication,
        master_seed: rng.master_seed,
        initial: initial.to_vec(),
        x: paths.x,
        xavg: paths.xavg,
        u: paths.u,
        y0,
    })
}

/// The limiting systems x̂_i on the same substreams as the population run.
pub fn simulate_limiting(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n: usize,
    rng: &RngContract,
    replication: u64,
) -> Result<LimitingResult> {
    check_population(n)?;
    let initial = sample_initials(&eq.law, n, rng, replication);
    let paths = run_closed_loop(eq, coef, &initial, rng, replication, Coupling::Fixed(&coef.xbar), None)?;
    let y0 = initial.iter().map(|&x0| coef.kit.y0_hat(x0)).collect();
    Ok(LimitingResult { n, grid: coef.grid, initial, x: paths.x, u: paths.u, y0 })
}

/// `y_i(0)` for every agent of a population whose initial states are `initial`.
///
/// With `m_avg = E[x^(N) | F₀]` and `m_i = E[x_i | F₀]`,
/// `y_i(0) = e^{CT}K m_i(T) + ∫₀ᵀ e^{Ct}[(H − R⁻¹BDβ)m_i + DΘ₅e^{Ct}(ζ(0)x_i0 + τ(0)) − R⁻¹BDγ + L m_avg] dt`.
/// The map `x_i0 ↦ y_i(0)` is affine for a fixed population mean, so two solves cover all agents.
pub fn backward_y0_population(eq: &Equilibrium, coef: &SimCoefficients, initial: &[f64]) -> Result<Vec<f64>> {
    check_population(initial.len())?;
    let n = initial.len() as f64;
    let mean0 = initial.iter().sum::<f64>() / n;
    let at_zero = backward_y0_single(eq, coef, 0.0, mean0)?;
    let at_one = backward_y0_single(eq, coef, 1.0, mean0)?;
    Ok(initial.iter().map(|&x0| at_zero + (at_one - at_zero) * x0).collect())
}

/// `y_i(0)` for one agent given its initial state and the population's initial mean.
pub fn backward_y0_single(eq: &Equilibrium, coef: &SimCoefficients, x_i0: f64, mean0: f64) -> Result<f64> {
    let p = &eq.params;
    let kit = &coef.kit;
    let w_avg = kit.initial_weight(mean0);
    let w_i = kit.initial_weight(x_i0);
    let prob = OdeProblem::forward([mean0, x_i0, 0.0], |t, y: &[f64; 3]| {
        let (m_avg, m_i) = (y[0], y[1]);
        let a = coef.a_cal.at(t);
        let common = coef.theta1_growth.at(t);
        let offset = coef.drift_offset.at(t);
        [
            (a + p.f) * m_avg + w_avg * common + offset,
            a * m_i + w_i * common + offset + p.f * m_avg,
            (p.c * t).exp()
                * (coef.backward_state.at(t) * m_i
                    + p.d * w_i * coef.theta5_growth.at(t)
                    + coef.backward_offset.at(t)
                    + p.l * m_avg),
        ]
    });
    let states = rk4_solve_system(&prob, &coef.grid)?;
    let end = states[states.len() - 1];
    Ok((p.c * p.t).exp() * p.k * end[1] + end[2])
}

/// Bounded affine deviation `u'(t) = a(t)·l(t) + b(t) + c(t)·x_0` for one agent.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    pub label: String,
    pub gain: DeterministicPath,
    pub offset: DeterministicPath,
    /// Loading on the deviating agent's own initial state.
    pub initial_loading: DeterministicPath,
}

impl PerturbationSpec {
    /// The decentralized law itself, written as a deviation.
    pub fn decentralized(kit: &StrategyKit) -> Self {
        Self::scaled_gain(kit, 1.0).relabel("self")
    }

    /// The decentralized law with its feedback gain multiplied by `factor`.
    pub fn scaled_gain(kit: &StrategyKit, factor: f64) -> Self {
        let c = kit.c;
        let growth = kit.theta5.zip_with(&DeterministicPath::from_fn(*kit.grid(), |t| (c * t).exp()), |a, b| a * b);
        Self {
            label: format!("gain x{factor}"),
            gain: kit.gain.map(|g| factor * g),
            offset: kit.offset_base.zip_with(&growth, |o, g| o + kit.tau0 * g),
            initial_loading: growth.map(|g| kit.zeta0 * g),
        }
    }

    /// The decentralized law plus a constant control shift.
    pub fn shifted(kit: &StrategyKit, shift: f64) -> Self {
        let mut spec = Self::decentralized(kit);
        spec.offset = spec.offset.map(|o| o + shift);
        spec.relabel(&format!("shift {shift:+}"))
    }

    /// u' ≡ 0.
    pub fn zero(grid: TimeGrid) -> Self {
        let zero = DeterministicPath::constant(grid, 0.0);
        Self { label: "zero".into(), gain: zero.clone(), offset: zero.clone(), initial_loading: zero }
    }

    pub fn relabel(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    fn validate(&self) -> Result<()> {
        let finite = |p: &DeterministicPath| p.values().iter().all(|v| v.is_finite());
        if !(finite(&self.gain) && finite(&self.offset) && finite(&self.initial_loading)) {
            return Err(Error::InvalidInput(format!("perturbation '{}' is not bounded", self.label)));
        }
        Ok(())
    }
}

/// Population run where agent `agent` plays `spec` and everyone else the decentralized law.
///
/// Returns the run and the deviating agent's backward initial value.
pub fn simulate_perturbed(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n: usize,
    spec: &PerturbationSpec,
    agent: usize,
    rng: &RngContract,
    replication: u64,
) -> Result<(PopulationResult, f64)> {
    check_population(n)?;
    if agent >= n {
        return Err(Error::InvalidInput(format!("deviating agent {agent} outside population of {n}")));
    }
    spec.validate()?;
    let grid = coef.grid;
    let gain = HalfStepTable::from_fn(&grid, |t| spec.gain.eval_cubic(t));
    let offset = HalfStepTable::from_fn(&grid, |t| spec.offset.eval_cubic(t));
    let loading = HalfStepTable::from_fn(&grid, |t| spec.initial_loading.eval_cubic(t));
    let deviation = Deviation { agent, gain: &gain, offset: &offset, loading: &loading };
    let initial = sample_initials(&eq.law, n, rng, replication);
    let paths = run_closed_loop(eq, coef, &initial, rng, replication, Coupling::Population, Some(&deviation))?;
    let m_dev = perturbed_backward_y0(eq, coef, &initial, &deviation)?;
    let result = PopulationResult {
        n,
        grid,
        replication,
        master_seed: rng.master_seed,
        initial,
        x: paths.x,
        xavg: paths.xavg,
        u: paths.u,
        y0: Vec::new(),
    };
    Ok((result, m_dev))
}

fn perturbed_backward_y0(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    initial: &[f64],
    dev: &Deviation<'_>,
) -> Result<f64> {
    let p = &eq.params;
    let n = initial.len() as f64;
    let x_dev0 = initial[dev.agent];
    let others0 = if initial.len() > 1 { (initial.iter().sum::<f64>() - x_dev0) / (n - 1.0) } else { 0.0 };
    let w_others = coef.kit.initial_weight(others0);
    let share = 1.0 / n;
    // state: E[l_dev], E[mean of the others], running integral
    let prob = OdeProblem::forward([x_dev0, others0, 0.0], |t, y: &[f64; 3]| {
        let (md, mo) = (y[0], y[1]);
        let m_avg = share * md + (1.0 - share) * mo;
        let u_dev = dev.gain.at(t) * md + dev.offset.at(t) + dev.loading.at(t) * x_dev0;
        [
            p.a * md + p.b * u_dev + p.f * m_avg,
            coef.a_cal.at(t) * mo + w_others * coef.theta1_growth.at(t) + coef.drift_offset.at(t) + p.f * m_avg,
            (p.c * t).exp() * (p.d * u_dev + p.h * md + p.l * m_avg),
        ]
    });
    let states = rk4_solve_system(&prob, &coef.grid)?;
    let end = states[states.len() - 1];
    Ok((p.c * p.t).exp() * p.k * end[0] + end[2])
}

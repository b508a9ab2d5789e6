//! Costs, population-vs-limit gap statistics, and ε-Nash margins.
//!
//! Replications run in parallel in fixed-size batches; every reduction is a
//! sequential pass in replication order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelParams, RngContract};
use crate::numerics::{loglog_slope, trapezoid_values, LogLogFit};
use crate::simulator::{
    simulate_limiting, simulate_perturbed, simulate_population, LimitingResult, PerturbationSpec, PopulationResult,
    SimCoefficients,
};
use crate::strategy::Equilibrium;

const BATCH: usize = 16;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Welford accumulator; fed in a fixed order so the result is reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let stderr = if self.count == 0 { 0.0 } else { (self.variance() / self.count as f64).sqrt() };
        Estimate { mean: self.mean, stderr }
    }
}

/// Run `work` for replications `0..reps` in parallel batches and feed the
/// results to `consume` in replication order.
pub fn for_each_replication<T: Send>(
    reps: usize,
    work: impl Fn(u64) -> Result<T> + Sync,
    mut consume: impl FnMut(T),
) -> Result<()> {
    let mut start = 0;
    while start < reps {
        let end = (start + BATCH).min(reps);
        let batch: Vec<Result<T>> = (start..end).into_par_iter().map(|r| work(r as u64)).collect();
        for item in batch {
            consume(item?);
        }
        start = end;
    }
    Ok(())
}

fn check_reps(reps: usize) -> Result<()> {
    if reps == 0 {
        return Err(Error::InvalidInput("need at least one replication".into()));
    }
    Ok(())
}

/// Realized cost of one agent:
/// `½∫ [Q(x − target)² + Ru²] dt + ½N₀y(0)²` with the integral by trapezoid on the grid nodes.
pub fn realized_cost(x: &[f64], u: &[f64], target: impl Fn(usize) -> f64, y0: f64, p: &ModelParams, h: f64) -> f64 {
    let integrand: Vec<f64> = x
        .iter()
        .zip(u)
        .enumerate()
        .map(|(k, (&x, &u))| {
            let dev = x - target(k);
            p.q * dev * dev + p.r * u * u
        })
        .collect();
    0.5 * trapezoid_values(&integrand, h) + 0.5 * p.n0 * y0 * y0
}

/// Realized costs of every agent in one population run, tracking `S·x^(N) + η`.
pub fn cost_population(res: &PopulationResult, p: &ModelParams) -> Vec<f64> {
    (0..res.n).map(|i| population_agent_cost(res, i, res.y0[i], p)).collect()
}

fn population_agent_cost(res: &PopulationResult, i: usize, y0: f64, p: &ModelParams) -> f64 {
    let target = |k: usize| p.s * res.xavg[k] + p.eta;
    realized_cost(&res.x[i], &res.u[i], target, y0, p, res.grid.step())
}

/// Realized limiting costs, tracking `S·x̄ + η`, with `ŷ_i(0)` in the initial term.
pub fn cost_limiting(res: &LimitingResult, xbar: &[f64], p: &ModelParams) -> Vec<f64> {
    let target = |k: usize| p.s * xbar[k] + p.eta;
    (0..res.n).map(|i| realized_cost(&res.x[i], &res.u[i], target, res.y0[i], p, res.grid.step())).collect()
}

/// Monte Carlo costs per agent for the population and its paired limiting systems.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub reps: usize,
    pub population: Vec<Estimate>,
    pub limiting: Vec<Estimate>,
}

pub fn cost_report(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n: usize,
    reps: usize,
    rng: &RngContract,
) -> Result<CostReport> {
    check_reps(reps)?;
    let p = &eq.params;
    let xbar = coef.xbar_nodes();
    let mut pop = vec![RunningStats::default(); n];
    let mut lim = vec![RunningStats::default(); n];
    for_each_replication(
        reps,
        |rep| {
            let a = simulate_population(eq, coef, n, rng, rep)?;
            let b = simulate_limiting(eq, coef, n, rng, rep)?;
            Ok((cost_population(&a, p), cost_limiting(&b, &xbar, p)))
        },
        |(jp, jl)| {
            for i in 0..n {
                pop[i].push(jp[i]);
                lim[i].push(jl[i]);
            }
        },
    )?;
    Ok(CostReport {
        reps,
        population: pop.iter().map(RunningStats::estimate).collect(),
        limiting: lim.iter().map(RunningStats::estimate).collect(),
    })
}

/// Gap statistics for one population size.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub n: usize,
    pub reps: usize,
    /// sup_t Ê|x^(N)(t) − x̄(t)|²
    pub mean_gap: Estimate,
    /// sup_{i,t} Ê|x̃_i(t) − x̂_i(t)|²
    pub state_gap: Estimate,
    /// sup_{i,t} Ê|ũ_i(t) − ū_i(t)|²
    pub control_gap: Estimate,
    /// Agent 1's costs under the population and the limiting system.
    pub cost_population: Estimate,
    pub cost_limiting: Estimate,
    /// |Ĵ₁(ũ) − J̄̂₁(ū)|, standard error of the paired difference.
    pub cost_gap: Estimate,
    /// Ê|J₁ − J̄₁| over paired realizations.
    pub abs_cost_gap: Estimate,
}

/// Log-log slopes of the sweep statistics against N; `None` when degenerate
/// (fewer than three N values or a statistic that is not strictly positive).
#[derive(Debug, Clone, Default)]
pub struct SlopeFits {
    pub mean_gap: Option<LogLogFit>,
    pub state_gap: Option<LogLogFit>,
    pub control_gap: Option<LogLogFit>,
    pub cost_gap: Option<LogLogFit>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<SweepRow>,
    pub fits: SlopeFits,
}

/// Fit `ys ∝ xs^slope`, or `None` if the data cannot support a fit.
pub fn fit_or_degenerate(xs: &[f64], ys: &[f64]) -> Option<LogLogFit> {
    if xs.len() < 3 || ys.iter().any(|&y| !(y > 0.0 && y.is_finite())) {
        return None;
    }
    loglog_slope(xs, ys).ok().filter(|f| f.slope.is_finite() && f.slope_stderr.is_finite())
}

fn sup_estimate(stats: &[RunningStats]) -> Estimate {
    stats.iter().max_by(|a, b| a.mean().total_cmp(&b.mean())).map(RunningStats::estimate).unwrap_or_default()
}

fn sweep_row(eq: &Equilibrium, coef: &SimCoefficients, n: usize, reps: usize, rng: &RngContract) -> Result<SweepRow> {
    let p = &eq.params;
    let xbar = coef.xbar_nodes();
    let nodes = coef.grid().len();
    let mut mean_gap = vec![RunningStats::default(); nodes];
    let mut state_gap = vec![RunningStats::default(); n * nodes];
    let mut control_gap = vec![RunningStats::default(); n * nodes];
    let [mut jp, mut jl, mut diff, mut abs_diff] = [RunningStats::default(); 4];
    for_each_replication(
        reps,
        |rep| {
            let pop = simulate_population(eq, coef, n, rng, rep)?;
            let lim = simulate_limiting(eq, coef, n, rng, rep)?;
            let j_pop = population_agent_cost(&pop, 0, pop.y0[0], p);
            let j_lim = cost_limiting(&lim, &xbar, p)[0];
            Ok((pop, lim, j_pop, j_lim))
        },
        |(pop, lim, j_pop, j_lim): (PopulationResult, LimitingResult, f64, f64)| {
            for (k, stats) in mean_gap.iter_mut().enumerate() {
                stats.push((pop.xavg[k] - xbar[k]).powi(2));
            }
            for i in 0..n {
                for k in 0..nodes {
                    state_gap[i * nodes + k].push((pop.x[i][k] - lim.x[i][k]).powi(2));
                    control_gap[i * nodes + k].push((pop.u[i][k] - lim.u[i][k]).powi(2));
                }
            }
            jp.push(j_pop);
            jl.push(j_lim);
            diff.push(j_pop - j_lim);
            abs_diff.push((j_pop - j_lim).abs());
        },
    )?;
    let gap = diff.estimate();
    Ok(SweepRow {
        n,
        reps,
        mean_gap: sup_estimate(&mean_gap),
        state_gap: sup_estimate(&state_gap),
        control_gap: sup_estimate(&control_gap),
        cost_population: jp.estimate(),
        cost_limiting: jl.estimate(),
        cost_gap: Estimate { mean: gap.mean.abs(), stderr: gap.stderr },
        abs_cost_gap: abs_diff.estimate(),
    })
}

/// Paired population/limiting runs for each N with common random numbers.
pub fn convergence_sweep(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n_list: &[usize],
    reps: usize,
    rng: &RngContract,
) -> Result<ConvergenceReport> {
    check_reps(reps)?;
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::InvalidInput("N list must be nonempty and positive".into()));
    }
    let rows = n_list.iter().map(|&n| sweep_row(eq, coef, n, reps, rng)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit = |f: fn(&SweepRow) -> f64| fit_or_degenerate(&xs, &rows.iter().map(f).collect::<Vec<_>>());
    let fits = SlopeFits {
        mean_gap: fit(|r| r.mean_gap.mean),
        state_gap: fit(|r| r.state_gap.mean),
        control_gap: fit(|r| r.control_gap.mean),
        cost_gap: fit(|r| r.cost_gap.mean),
    };
    Ok(ConvergenceReport { rows, fits })
}

/// The deviation family used by default: the law itself, gain rescalings,
/// no control at all, and a constant shift.
pub fn default_family(eq: &Equilibrium) -> Vec<PerturbationSpec> {
    let kit = &eq.kit;
    let mut family = vec![PerturbationSpec::decentralized(kit)];
    family.extend([0.5, 0.8, 1.2, 1.5].map(|theta| PerturbationSpec::scaled_gain(kit, theta)));
    family.push(PerturbationSpec::zero(*kit.grid()));
    family.push(PerturbationSpec::shifted(kit, 0.1));
    family
}

#[derive(Debug, Clone)]
pub struct MarginRow {
    pub label: String,
    /// Ĵ₁(u′, ũ₋₁) − Ĵ₁(ũ, ũ₋₁) from paired replications.
    pub margin: Estimate,
    pub cost: Estimate,
}

#[derive(Debug, Clone)]
pub struct EpsilonReport {
    pub n: usize,
    pub reps: usize,
    pub baseline: Estimate,
    pub rows: Vec<MarginRow>,
    pub min_margin: f64,
    /// max(0, −min margin)
    pub epsilon: f64,
}

/// Agent 1 deviates to each member of `family`; everyone else keeps the
/// decentralized law. Deviations and the baseline share random numbers.
pub fn epsilon_nash_check(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n: usize,
    reps: usize,
    family: &[PerturbationSpec],
    rng: &RngContract,
) -> Result<EpsilonReport> {
    check_reps(reps)?;
    if family.is_empty() {
        return Err(Error::InvalidInput("perturbation family is empty".into()));
    }
    let p = &eq.params;
    let mut baseline = RunningStats::default();
    let mut margins = vec![RunningStats::default(); family.len()];
    let mut costs = vec![RunningStats::default(); family.len()];
    for_each_replication(
        reps,
        |rep| {
            let base = simulate_population(eq, coef, n, rng, rep)?;
            let j_base = population_agent_cost(&base, 0, base.y0[0], p);
            let deviated = family
                .iter()
                .map(|spec| {
                    let (res, y0) = simulate_perturbed(eq, coef, n, spec, 0, rng, rep)?;
                    Ok(population_agent_cost(&res, 0, y0, p))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((j_base, deviated))
        },
        |(j_base, deviated)| {
            baseline.push(j_base);
            for (s, j) in deviated.into_iter().enumerate() {
                margins[s].push(j - j_base);
                costs[s].push(j);
            }
        },
    )?;
    let rows: Vec<MarginRow> = family
        .iter()
        .zip(margins.iter().zip(&costs))
        .map(|(spec, (m, c))| MarginRow { label: spec.label.clone(), margin: m.estimate(), cost: c.estimate() })
        .collect();
    let min_margin = rows.iter().map(|r| r.margin.mean).fold(f64::INFINITY, f64::min);
    Ok(EpsilonReport { n, reps, baseline: baseline.estimate(), rows, min_margin, epsilon: (-min_margin).max(0.0) })
}

#[derive(Debug, Clone)]
pub struct EpsilonSweep {
    pub reports: Vec<EpsilonReport>,
    /// ε_N against N; `None` when ε_N is zero somewhere or fewer than three N.
    pub fit: Option<LogLogFit>,
    /// Smallest `c` with ε_N ≤ c/√N for every N in the sweep.
    pub envelope: f64,
}

impl EpsilonSweep {
    /// ε at `n` from the free-slope fit, or from the `c/√N` envelope when the fit is degenerate.
    pub fn extrapolate(&self, n: usize) -> f64 {
        match &self.fit {
            Some(fit) => fit.predict(n as f64),
            None => self.envelope / (n as f64).sqrt(),
        }
    }
}

pub fn epsilon_sweep(
    eq: &Equilibrium,
    coef: &SimCoefficients,
    n_list: &[usize],
    reps: usize,
    family: &[PerturbationSpec],
    rng: &RngContract,
) -> Result<EpsilonSweep> {
    let reports =
        n_list.iter().map(|&n| epsilon_nash_check(eq, coef, n, reps, family, rng)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = reports.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.epsilon).collect();
    let envelope = xs.iter().zip(&ys).map(|(n, e)| e * n.sqrt()).fold(0.0, f64::max);
    Ok(EpsilonSweep { fit: fit_or_degenerate(&xs, &ys), envelope, reports })
}

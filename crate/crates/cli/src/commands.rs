use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use mflqg::consistency::{crosscheck_fbode, picard_solve};
use mflqg::csv::{fmt_f64, CsvWriter};
use mflqg::nash::{convergence_sweep, cost_population, epsilon_sweep, for_each_replication, Estimate, RunningStats};
use mflqg::numerics::LogLogFit;
use mflqg::riccati::{check_h2, RiccatiBundle};
use mflqg::simulator::{simulate_population, PopulationResult, SimCoefficients};
use mflqg::strategy::Equilibrium;
use mflqg::{RngContract, TimeGrid};

use crate::config::RunConfig;
use crate::CliError;

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = out.join(name);
    let file = File::create(&path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn io(e: io::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// `key = value` lines.
fn write_report(out: &Path, name: &str, lines: &[(&str, String)]) -> Result<(), CliError> {
    let mut w = create(out, name)?;
    for (key, value) in lines {
        writeln!(w, "{key} = {value}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn equilibrium(config: &RunConfig) -> Result<Equilibrium, CliError> {
    Ok(Equilibrium::solve(config.params, config.law, &config.grid()?, &config.solver.options())?)
}

fn sim_grid(config: &RunConfig, steps: usize) -> Result<TimeGrid, CliError> {
    TimeGrid::new(config.params.t, steps).map_err(|e| CliError::Config(e.to_string()))
}

pub fn riccati(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let bundle = RiccatiBundle::solve(&config.params, &config.grid()?)?;
    bundle.write_csv(create(out, "riccati.csv")?).map_err(io)?.flush().map_err(io)?;
    let h2 = check_h2(&bundle, &config.params);
    let mut lines: Vec<(&str, String)> = Vec::new();
    for (key, v) in ["theta_bar_1", "theta_bar_2", "theta_bar_3", "theta_bar_4"].into_iter().zip(bundle.theta_bar) {
        lines.push((key, fmt_f64(v)));
    }
    lines.push(("gamma_bar", fmt_f64(bundle.gamma_bar)));
    lines.push(("kappa", fmt_f64(h2.kappa)));
    lines.push(("kappa_terms", h2.terms.map(fmt_f64).join(",")));
    lines.push(("pass", h2.pass.to_string()));
    write_report(out, "h2.txt", &lines)
}

pub fn solve(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let p = &config.params;
    let bundle = RiccatiBundle::solve(p, &config.grid()?)?;
    let sol = picard_solve(&bundle, p, config.law.x0(), &config.solver.options())?;
    sol.write_csv(create(out, "consistency.csv")?).map_err(io)?.flush().map_err(io)?;
    let rate = if sol.empirical_rate.is_finite() { fmt_f64(sol.empirical_rate) } else { "undefined".into() };
    write_report(
        out,
        "diagnostics.txt",
        &[
            ("residual", fmt_f64(sol.residual)),
            ("iterations", sol.iterations.to_string()),
            ("empirical_rate", rate),
            ("fbode_defect", fmt_f64(crosscheck_fbode(&sol, &bundle, p))),
            ("kappa", fmt_f64(sol.kappa)),
            ("guaranteed", sol.guaranteed.to_string()),
        ],
    )
}

struct RepSummary {
    terminal_mean: f64,
    sup_gap: f64,
    cost_mean: f64,
    cost_min: f64,
    cost_max: f64,
    paths: Option<PopulationResult>,
}

pub fn simulate(config: &RunConfig, rng: &RngContract, out: &Path) -> Result<(), CliError> {
    let eq = equilibrium(config)?;
    let s = &config.simulate;
    let coef = SimCoefficients::new(&eq, sim_grid(config, s.steps)?)?;
    let xbar = coef.xbar_nodes();
    let mut summary = CsvWriter::new(
        create(out, "simulate.csv")?,
        &["replication", "terminal_mean", "sup_gap", "cost_mean", "cost_min", "cost_max"],
    )
    .map_err(io)?;
    let mut paths = match s.dump_paths {
        true => Some(CsvWriter::new(create(out, "paths.csv")?, &["replication", "agent", "t", "x", "u"]).map_err(io)?),
        false => None,
    };
    let mut rows = Vec::with_capacity(s.reps);
    for_each_replication(
        s.reps,
        |rep| {
            let res = simulate_population(&eq, &coef, s.agents, rng, rep)?;
            let costs = cost_population(&res, &eq.params);
            let mut stats = RunningStats::default();
            costs.iter().for_each(|&c| stats.push(c));
            Ok(RepSummary {
                terminal_mean: *res.xavg.last().unwrap_or(&f64::NAN),
                sup_gap: res.xavg.iter().zip(&xbar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                cost_mean: stats.mean(),
                cost_min: costs.iter().copied().fold(f64::INFINITY, f64::min),
                cost_max: costs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                paths: s.dump_paths.then_some(res),
            })
        },
        |row| rows.push(row),
    )?;
    for (rep, row) in rows.iter().enumerate() {
        let mut cells = vec![rep.to_string()];
        cells.extend([row.terminal_mean, row.sup_gap, row.cost_mean, row.cost_min, row.cost_max].map(fmt_f64));
        summary.row(&cells).map_err(io)?;
        if let (Some(w), Some(res)) = (paths.as_mut(), &row.paths) {
            for i in 0..res.n {
                for (k, t) in res.grid.nodes().enumerate() {
                    let cells =
                        [rep.to_string(), i.to_string(), fmt_f64(t), fmt_f64(res.x[i][k]), fmt_f64(res.u[i][k])];
                    w.row(&cells).map_err(io)?;
                }
            }
        }
    }
    summary.finish().map_err(io)?;
    if let Some(w) = paths {
        w.finish().map_err(io)?;
    }
    Ok(())
}

fn estimate_row<W: Write>(w: &mut CsvWriter<W>, n: usize, statistic: &str, e: Estimate) -> Result<(), CliError> {
    w.row(&[n.to_string(), statistic.to_string(), fmt_f64(e.mean), fmt_f64(e.stderr)]).map_err(io)
}

fn slope_lines(name: &'static str, fit: &Option<LogLogFit>) -> [(String, String); 2] {
    match fit {
        Some(f) => {
            [(format!("{name}_slope"), fmt_f64(f.slope)), (format!("{name}_slope_stderr"), fmt_f64(f.slope_stderr))]
        }
        None => [(format!("{name}_slope"), "degenerate".into()), (format!("{name}_slope_stderr"), "degenerate".into())],
    }
}

pub fn nash(config: &RunConfig, rng: &RngContract, out: &Path) -> Result<(), CliError> {
    let eq = equilibrium(config)?;
    let s = &config.nash;
    let coef = SimCoefficients::new(&eq, sim_grid(config, s.steps)?)?;
    let report = convergence_sweep(&eq, &coef, &s.agents, s.reps, rng)?;
    let family = config.family(&eq);
    let eps = epsilon_sweep(&eq, &coef, &s.agents, s.reps, &family, rng)?;

    let mut w = CsvWriter::new(create(out, "convergence.csv")?, &["N", "statistic", "value", "stderr"]).map_err(io)?;
    for r in &report.rows {
        estimate_row(&mut w, r.n, "mean_gap", r.mean_gap)?;
        estimate_row(&mut w, r.n, "state_gap", r.state_gap)?;
        estimate_row(&mut w, r.n, "control_gap", r.control_gap)?;
        estimate_row(&mut w, r.n, "cost_population", r.cost_population)?;
        estimate_row(&mut w, r.n, "cost_limiting", r.cost_limiting)?;
        estimate_row(&mut w, r.n, "cost_gap", r.cost_gap)?;
        estimate_row(&mut w, r.n, "abs_cost_gap", r.abs_cost_gap)?;
    }
    w.finish().map_err(io)?;

    let mut w = CsvWriter::new(create(out, "margins.csv")?, &["N", "statistic", "value", "stderr"]).map_err(io)?;
    for r in &eps.reports {
        estimate_row(&mut w, r.n, "baseline_cost", r.baseline)?;
        for m in &r.rows {
            estimate_row(&mut w, r.n, &format!("margin[{}]", m.label), m.margin)?;
        }
        estimate_row(&mut w, r.n, "epsilon", Estimate { mean: r.epsilon, stderr: 0.0 })?;
    }
    w.finish().map_err(io)?;

    let abs_gap = mflqg::nash::fit_or_degenerate(
        &report.rows.iter().map(|r| r.n as f64).collect::<Vec<_>>(),
        &report.rows.iter().map(|r| r.abs_cost_gap.mean).collect::<Vec<_>>(),
    );
    let mut lines: Vec<(String, String)> = Vec::new();
    lines.extend(slope_lines("mean_gap", &report.fits.mean_gap));
    lines.extend(slope_lines("state_gap", &report.fits.state_gap));
    lines.extend(slope_lines("control_gap", &report.fits.control_gap));
    lines.extend(slope_lines("cost_gap", &report.fits.cost_gap));
    lines.extend(slope_lines("abs_cost_gap", &abs_gap));
    lines.extend(slope_lines("epsilon", &eps.fit));
    lines.push(("epsilon_envelope".into(), fmt_f64(eps.envelope)));
    if let Some(last) = eps.reports.last() {
        lines.push(("epsilon_extrapolated_at_max_N".into(), fmt_f64(eps.extrapolate(last.n))));
        lines.push(("min_margin_at_max_N".into(), fmt_f64(last.min_margin)));
    }
    let borrowed: Vec<(&str, String)> = lines.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_report(out, "slopes.txt", &borrowed)
}

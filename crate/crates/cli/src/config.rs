use std::path::Path;

use mflqg::consistency::PicardOptions;
use mflqg::simulator::PerturbationSpec;
use mflqg::strategy::Equilibrium;
use mflqg::{InitialLaw, ModelParams, TimeGrid};
use serde::Deserialize;

use crate::CliError;

/// One JSON document describing a run. Sections not used by a command may be omitted.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ModelParams,
    #[serde(default = "default_law")]
    pub law: InitialLaw,
    /// Steps of the solver grid.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub simulate: SimulateSettings,
    #[serde(default)]
    pub nash: NashSettings,
}

fn default_law() -> InitialLaw {
    InitialLaw::point(0.0)
}

fn default_steps() -> usize {
    2000
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let o = PicardOptions::default();
        Self { tol: o.tol, max_iter: o.max_iter, damping: o.damping }
    }
}

impl SolverSettings {
    pub fn options(&self) -> PicardOptions {
        PicardOptions { tol: self.tol, max_iter: self.max_iter, damping: self.damping }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub agents: usize,
    pub reps: usize,
    /// Steps of the Euler grid.
    pub steps: usize,
    /// Also write every path to paths.csv.
    pub dump_paths: bool,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self { agents: 100, reps: 10, steps: 400, dump_paths: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum Deviation {
    /// The decentralized law itself.
    #[serde(rename = "self")]
    Own,
    Gain {
        factor: f64,
    },
    Zero,
    Shift {
        value: f64,
    },
}

impl Deviation {
    pub fn spec(&self, eq: &Equilibrium) -> PerturbationSpec {
        match *self {
            Deviation::Own => PerturbationSpec::decentralized(&eq.kit),
            Deviation::Gain { factor } => PerturbationSpec::scaled_gain(&eq.kit, factor),
            Deviation::Zero => PerturbationSpec::zero(*eq.kit.grid()),
            Deviation::Shift { value } => PerturbationSpec::shifted(&eq.kit, value),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NashSettings {
    pub agents: Vec<usize>,
    pub reps: usize,
    pub steps: usize,
    /// Deviation family; empty means the built-in family.
    pub family: Vec<Deviation>,
}

impl Default for NashSettings {
    fn default() -> Self {
        Self { agents: vec![32, 64, 128, 256, 512, 1024], reps: 50, steps: 400, family: Vec::new() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        config.validate()
    }

    fn validate(self) -> Result<Self, CliError> {
        let config_err = |e: mflqg::model::ModelError| CliError::Config(e.to_string());
        self.params.validate().map_err(config_err)?;
        self.law.validate().map_err(config_err)?;
        self.grid()?;
        let s = &self.solver;
        if !(s.tol > 0.0 && s.tol.is_finite()) || s.max_iter == 0 || !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(CliError::Config("solver needs tol > 0, max_iter ≥ 1 and damping in (0, 1]".into()));
        }
        if self.simulate.agents == 0 || self.simulate.reps == 0 || self.simulate.steps < 2 {
            return Err(CliError::Config("simulate needs agents ≥ 1, reps ≥ 1 and steps ≥ 2".into()));
        }
        let n = &self.nash;
        if n.agents.is_empty() || n.agents.contains(&0) || n.reps == 0 || n.steps < 2 {
            return Err(CliError::Config("nash needs a nonempty positive agents list, reps ≥ 1 and steps ≥ 2".into()));
        }
        if n.family.iter().any(|d| match *d {
            Deviation::Gain { factor: v } | Deviation::Shift { value: v } => !v.is_finite(),
            _ => false,
        }) {
            return Err(CliError::Config("deviation coefficients must be finite".into()));
        }
        Ok(self)
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.params.t, self.steps).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn family(&self, eq: &Equilibrium) -> Vec<PerturbationSpec> {
        if self.nash.family.is_empty() {
            mflqg::nash::default_family(eq)
        } else {
            self.nash.family.iter().map(|d| d.spec(eq)).collect()
        }
    }
}

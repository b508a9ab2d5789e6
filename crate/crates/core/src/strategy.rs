//! The decentralized feedback law and the decoupled Hamiltonian fields.
//!
//! An agent with initial state `x_i0` plays
//!
//! ```text
//! ũ_i(t) = −R⁻¹Bβ(t) x_i(t) + (ζ(0)x_i0 + τ(0)) Θ₅(t) e^{Ct} − R⁻¹Bγ(t)
//! ```
//!
//! which only needs its own state and offline deterministic functions.

use crate::consistency::{picard_solve, ConsistencySolution, PicardOptions};
use crate::error::Result;
use crate::model::{DeterministicPath, InitialLaw, ModelParams, TimeGrid};
use crate::numerics::{rk4_solve, HalfStepTable, OdeProblem};
use crate::riccati::RiccatiBundle;

/// ŷ(0) = (ζ(0)x_i0 + τ(0)) / (1 + ξ(0)N₀).
pub fn y0_hat(x_i0: f64, zeta0: f64, tau0: f64, xi0: f64, n0: f64) -> f64 {
    (zeta0 * x_i0 + tau0) / (1.0 + xi0 * n0)
}

/// Coefficient paths of the feedback law, shared read-only by all agents.
#[derive(Debug, Clone)]
pub struct StrategyKit {
    /// −R⁻¹Bβ(t).
    pub gain: DeterministicPath,
    /// −R⁻¹Bγ(t).
    pub offset_base: DeterministicPath,
    /// Θ₅(t).
    pub theta5: DeterministicPath,
    /// −N₀ / (1 + ξ(0)N₀).
    pub k_coef: f64,
    pub zeta0: f64,
    pub tau0: f64,
    pub xi0: f64,
    pub n0: f64,
    pub c: f64,
}

impl StrategyKit {
    pub fn new(bundle: &RiccatiBundle, sol: &ConsistencySolution, p: &ModelParams) -> Self {
        let rb = p.r_inv() * p.b;
        let xi0 = bundle.xi.first();
        Self {
            gain: bundle.beta.map(|b| -rb * b),
            offset_base: sol.gamma.map(|g| -rb * g),
            theta5: bundle.theta(5).clone(),
            k_coef: -p.n0 / (1.0 + xi0 * p.n0),
            zeta0: bundle.zeta.first(),
            tau0: sol.tau.first(),
            xi0,
            n0: p.n0,
            c: p.c,
        }
    }

    /// The same law with coefficient paths resampled on `grid`.
    pub fn on_grid(&self, grid: TimeGrid) -> Self {
        Self {
            gain: self.gain.resample(grid),
            offset_base: self.offset_base.resample(grid),
            theta5: self.theta5.resample(grid),
            ..self.clone()
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.gain.grid()
    }

    /// ζ(0)x_i0 + τ(0).
    pub fn initial_weight(&self, x_i0: f64) -> f64 {
        self.zeta0 * x_i0 + self.tau0
    }

    pub fn y0_hat(&self, x_i0: f64) -> f64 {
        y0_hat(x_i0, self.zeta0, self.tau0, self.xi0, self.n0)
    }

    /// State-independent part of the control at node `k` of the kit's grid.
    #[inline]
    pub fn open_loop_at(&self, k: usize, t: f64, x_i0: f64) -> f64 {
        self.initial_weight(x_i0) * self.theta5.values()[k] * (self.c * t).exp() + self.offset_base.values()[k]
    }
}

/// k̂(t) = −N₀(ζ(0)x_i0 + τ(0))e^{Ct} / (1 + ξ(0)N₀).
pub fn k_hat_path(x_i0: f64, kit: &StrategyKit, grid: &TimeGrid) -> DeterministicPath {
    let scale = kit.k_coef * kit.initial_weight(x_i0);
    DeterministicPath::from_fn(*grid, |t| scale * (kit.c * t).exp())
}

/// ũ_i(t) for state `x_i` and initial state `x_i0`.
pub fn feedback_control(t: f64, x_i: f64, x_i0: f64, kit: &StrategyKit) -> f64 {
    kit.gain.eval_unchecked(t) * x_i
        + kit.initial_weight(x_i0) * kit.theta5.eval_unchecked(t) * (kit.c * t).exp()
        + kit.offset_base.eval_unchecked(t)
}

/// The decoupled adjoint and backward fields along one forward path.
#[derive(Debug, Clone)]
pub struct DecoupledFields {
    pub k_hat: DeterministicPath,
    pub p_hat: DeterministicPath,
    pub y_hat: DeterministicPath,
    pub q_hat: DeterministicPath,
    pub z_hat: DeterministicPath,
}

impl DecoupledFields {
    /// R⁻¹(Dk̂ − Bp̂) node-wise.
    pub fn pontryagin_control(&self, p: &ModelParams) -> DeterministicPath {
        self.k_hat.zip_with(&self.p_hat, |k, ph| p.r_inv() * (p.d * k - p.b * ph))
    }
}

/// p̂ = αk̂ + βx̂ + γ, ŷ = ξk̂ + ζx̂ + τ, q̂ = σβx̂, ẑ = σζx̂ on the grid of `xhat`.
pub fn decouple_fields(
    xhat: &DeterministicPath,
    x_i0: f64,
    bundle: &RiccatiBundle,
    sol: &ConsistencySolution,
    p: &ModelParams,
) -> DecoupledFields {
    let grid = *xhat.grid();
    let kit = StrategyKit::new(bundle, sol, p);
    let k_hat = k_hat_path(x_i0, &kit, &grid);
    let on = |path: &DeterministicPath| path.resample(grid);
    let (alpha, beta, gamma) = (on(&bundle.alpha), on(&bundle.beta), on(&sol.gamma));
    let (xi, zeta, tau) = (on(&bundle.xi), on(&bundle.zeta), on(&sol.tau));
    let node = |f: &dyn Fn(usize) -> f64| -> DeterministicPath {
        DeterministicPath::new(grid, (0..grid.len()).map(f).collect()).expect("grid length")
    };
    let (x, k) = (xhat.values(), k_hat.values());
    DecoupledFields {
        p_hat: node(&|i| alpha.values()[i] * k[i] + beta.values()[i] * x[i] + gamma.values()[i]),
        y_hat: node(&|i| xi.values()[i] * k[i] + zeta.values()[i] * x[i] + tau.values()[i]),
        q_hat: node(&|i| p.sigma * beta.values()[i] * x[i]),
        z_hat: node(&|i| p.sigma * zeta.values()[i] * x[i]),
        k_hat,
    }
}

/// E[x̂_i(t) | x_i0]: the limiting closed-loop state with the noise removed, by RK4.
pub fn mean_state_path(
    x_i0: f64,
    bundle: &RiccatiBundle,
    sol: &ConsistencySolution,
    p: &ModelParams,
    grid: &TimeGrid,
) -> Result<DeterministicPath> {
    let weight = bundle.zeta.first() * x_i0 + sol.tau.first();
    let rb2 = p.r_inv() * p.b * p.b;
    let a_cal = HalfStepTable::new(&bundle.a_cal, grid);
    let theta1 = HalfStepTable::new(bundle.theta(1), grid);
    let gamma = HalfStepTable::new(&sol.gamma, grid);
    let xbar = HalfStepTable::new(&sol.xbar, grid);
    let prob = OdeProblem::forward([x_i0], |t, y: &[f64; 1]| {
        [a_cal.at(t) * y[0] + weight * theta1.at(t) * (p.c * t).exp() - rb2 * gamma.at(t) + p.f * xbar.at(t)]
    });
    Ok(rk4_solve(&prob, grid)?)
}

/// Everything an agent population needs: parameters, initial law, the Riccati
/// bundle, the consistency solution and the feedback law.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub params: ModelParams,
    pub law: InitialLaw,
    pub bundle: RiccatiBundle,
    pub solution: ConsistencySolution,
    pub kit: StrategyKit,
}

impl Equilibrium {
    /// Validates inputs, solves the Riccati system on `grid` and the consistency fixed point.
    pub fn solve(p: ModelParams, law: InitialLaw, grid: &TimeGrid, opts: &PicardOptions) -> Result<Self> {
        let params = p.validate()?;
        let law = law.validate()?;
        let bundle = RiccatiBundle::solve(&params, grid)?;
        let solution = picard_solve(&bundle, &params, law.x0(), opts)?;
        let kit = StrategyKit::new(&bundle, &solution, &params);
        Ok(Self { params, law, bundle, solution, kit })
    }

    pub fn solver_grid(&self) -> &TimeGrid {
        self.bundle.grid()
    }
}

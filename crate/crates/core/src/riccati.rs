//! The x̄-independent backward ODEs (β, α, ζ, ξ), the derived Θ coefficient
//! functions, and the contraction constant of the consistency map.
//!
//! ```text
//! β' + (2A + σ²)β − R⁻¹B²β² + Q = 0,                         β(T) = 0
//! α' + (A + C − R⁻¹B²β)α + R⁻¹BDβ − H = 0,                   α(T) = −K
//! ζ' + (A + C − R⁻¹B²β)ζ − (R⁻¹BDβ − H) = 0,                 ζ(T) = K
//! ξ' + 2Cξ + (R⁻¹BD − R⁻¹B²α)ζ + R⁻¹D² − R⁻¹BDα = 0,        ξ(T) = 0
//! ```

use std::io::{self, Write};

use crate::csv::CsvWriter;
use crate::error::Result;
use crate::model::{DeterministicPath, ModelParams, TimeGrid};
use crate::numerics::{cumulative_integral, rk4_solve, trapezoid, OdeProblem};

/// Positive eigenvalue `sqrt((A + σ²/2)² + B²Q/R)` of the Hamiltonian matrix.
pub fn lambda(p: &ModelParams) -> f64 {
    let shifted = p.a + 0.5 * p.sigma * p.sigma;
    (shifted * shifted + p.b * p.b * p.q / p.r).sqrt()
}

/// β(t) in closed form, with the linear (`B = 0`) and trivial (`Q = 0`) cases.
pub fn beta_closed_form(p: &ModelParams, t: f64) -> f64 {
    let remaining = (p.t - t).max(0.0);
    if p.q == 0.0 {
        return 0.0;
    }
    if p.b == 0.0 {
        // β' = −(2A + σ²)β − Q
        let a = 2.0 * p.a + p.sigma * p.sigma;
        if a == 0.0 {
            return p.q * remaining;
        }
        return p.q * (a * remaining).exp_m1() / a;
    }
    let lam = lambda(p);
    let shifted = p.a + 0.5 * p.sigma * p.sigma;
    // numerator and denominator scaled by e^{−2λ(T−t)} so nothing overflows
    let decay = (-2.0 * lam * remaining).exp();
    p.q * -(-2.0 * lam * remaining).exp_m1() / ((lam - shifted) + (lam + shifted) * decay)
}

#[derive(Debug, Clone)]
pub struct BetaSolution {
    pub closed_form: DeterministicPath,
    pub integrated: DeterministicPath,
}

impl BetaSolution {
    pub fn max_gap(&self) -> f64 {
        self.closed_form.sup_distance(&self.integrated)
    }
}

pub fn solve_beta(p: &ModelParams, grid: &TimeGrid) -> Result<BetaSolution> {
    let closed_form = DeterministicPath::from_fn(*grid, |t| beta_closed_form(p, t));
    let drift = 2.0 * p.a + p.sigma * p.sigma;
    let quad = p.r_inv() * p.b * p.b;
    let prob = OdeProblem::backward([0.0], |_, y: &[f64; 1]| [-drift * y[0] + quad * y[0] * y[0] - p.q]);
    let integrated = rk4_solve(&prob, grid)?;
    if let Some(bad) = closed_form.values().iter().position(|v| !v.is_finite()) {
        return Err(crate::numerics::NumericsError::NonFinite { t: grid.node(bad), step: bad }.into());
    }
    Ok(BetaSolution { closed_form, integrated })
}

/// `𝔸(t) = A − R⁻¹B²β(t)` on the grid of `beta`.
pub fn a_cal(p: &ModelParams, beta: &DeterministicPath) -> DeterministicPath {
    let quad = p.r_inv() * p.b * p.b;
    beta.map(|b| p.a - quad * b)
}

pub fn solve_alpha_zeta(
    p: &ModelParams,
    beta: &DeterministicPath,
    grid: &TimeGrid,
) -> Result<(DeterministicPath, DeterministicPath)> {
    let rb2 = p.r_inv() * p.b * p.b;
    let rbd = p.r_inv() * p.b * p.d;
    let coef = |t: f64| {
        let b = beta.eval_cubic(t);
        (p.a + p.c - rb2 * b, rbd * b - p.h)
    };
    let alpha = rk4_solve(
        &OdeProblem::backward([-p.k], |t, y: &[f64; 1]| {
            let (decay, theta6) = coef(t);
            [-decay * y[0] - theta6]
        }),
        grid,
    )?;
    let zeta = rk4_solve(
        &OdeProblem::backward([p.k], |t, y: &[f64; 1]| {
            let (decay, theta6) = coef(t);
            [-decay * y[0] + theta6]
        }),
        grid,
    )?;
    Ok((alpha, zeta))
}

/// α(t) = −K e^{C(T−t)}Γ_t^T + ∫_t^T e^{C(v−t)}Γ_t^v Θ₆(v) dv by quadrature.
pub fn alpha_from_integral(p: &ModelParams, beta: &DeterministicPath) -> DeterministicPath {
    let grid = *beta.grid();
    let h = grid.step();
    let acal = a_cal(p, beta);
    let exponent_rate: Vec<f64> = acal.values().iter().map(|a| a + p.c).collect();
    let g = cumulative_integral(&exponent_rate, h);
    let g_end = g[g.len() - 1];
    let rbd = p.r_inv() * p.b * p.d;
    let weighted: Vec<f64> = beta.values().iter().zip(&g).map(|(b, gv)| gv.exp() * (rbd * b - p.h)).collect();
    let w = cumulative_integral(&weighted, h);
    let w_end = w[w.len() - 1];
    let values = g.iter().zip(&w).map(|(gt, wt)| -p.k * (g_end - gt).exp() + (-gt).exp() * (w_end - wt)).collect();
    DeterministicPath::new(grid, values).expect("same grid")
}

#[derive(Debug, Clone)]
pub struct XiSolution {
    /// RK4 solution of the ξ equation.
    pub ode: DeterministicPath,
    /// ξ(t) = ∫_t^T e^{2C(v−t)} R⁻¹(Bα(v) − D)² dv by quadrature.
    pub quadrature: DeterministicPath,
}

impl XiSolution {
    pub fn max_gap(&self) -> f64 {
        self.ode.sup_distance(&self.quadrature)
    }
}

pub fn solve_xi(
    p: &ModelParams,
    alpha: &DeterministicPath,
    zeta: &DeterministicPath,
    grid: &TimeGrid,
) -> Result<XiSolution> {
    let ri = p.r_inv();
    let ode = rk4_solve(
        &OdeProblem::backward([0.0], |t, y: &[f64; 1]| {
            let a = alpha.eval_cubic(t);
            let z = zeta.eval_cubic(t);
            [-2.0 * p.c * y[0] - (ri * p.b * p.d - ri * p.b * p.b * a) * z - ri * p.d * p.d + ri * p.b * p.d * a]
        }),
        grid,
    )?;
    let h = grid.step();
    let weighted: Vec<f64> =
        grid.nodes().zip(alpha.values()).map(|(t, a)| (2.0 * p.c * t).exp() * ri * (p.b * a - p.d).powi(2)).collect();
    let cum = cumulative_integral(&weighted, h);
    let total = cum[cum.len() - 1];
    let quadrature = DeterministicPath::new(
        *grid,
        grid.nodes().zip(&cum).map(|(t, c)| (-2.0 * p.c * t).exp() * (total - c)).collect(),
    )?;
    Ok(XiSolution { ode, quadrature })
}

/// Everything about the limiting problem that does not depend on x̄.
#[derive(Debug, Clone)]
pub struct RiccatiBundle {
    pub beta: DeterministicPath,
    pub alpha: DeterministicPath,
    pub zeta: DeterministicPath,
    pub xi: DeterministicPath,
    /// Θ₁ … Θ₆ (index 0 is Θ₁).
    pub theta: [DeterministicPath; 6],
    /// Θ̄ᵢ = ∫₀ᵀ |Θᵢ(s)| ds for i = 1…4.
    pub theta_bar: [f64; 4],
    /// Γ̄ = exp(∫₀ᵀ |𝔸(r)| dr).
    pub gamma_bar: f64,
    pub a_cal: DeterministicPath,
    pub kappa: f64,
    pub lambda: f64,
}

pub fn assemble_thetas(
    p: &ModelParams,
    beta: DeterministicPath,
    alpha: DeterministicPath,
    zeta: DeterministicPath,
    xi: DeterministicPath,
) -> RiccatiBundle {
    let ri = p.r_inv();
    let scale = p.n0 / (1.0 + xi.first() * p.n0);
    let theta = [
        alpha.map(|a| (ri * p.b * p.b * a - ri * p.b * p.d) * scale),
        zeta.map(|z| -(ri * p.b * p.b * z + ri * p.b * p.d)),
        beta.map(|b| p.f * b - p.q * p.s),
        zeta.map(|z| p.f * z + p.l),
        alpha.map(|a| (ri * p.b * a - ri * p.d) * scale),
        beta.map(|b| ri * p.b * p.d * b - p.h),
    ];
    let theta_bar = [0, 1, 2, 3].map(|i| trapezoid(&theta[i].map(f64::abs)));
    let a_cal = a_cal(p, &beta);
    let gamma_bar = trapezoid(&a_cal.map(f64::abs)).exp();
    let kappa = contraction_terms(p, &theta_bar, gamma_bar).iter().sum();
    RiccatiBundle { beta, alpha, zeta, xi, theta, theta_bar, gamma_bar, a_cal, kappa, lambda: lambda(p) }
}

fn contraction_terms(p: &ModelParams, theta_bar: &[f64; 4], gamma_bar: f64) -> [f64; 3] {
    let [t1, t2, t3, t4] = *theta_bar;
    let growth = ((2.0 * p.c.abs() + p.f.abs()) * p.t).exp();
    [
        growth * gamma_bar * gamma_bar * t1 * t2 * t3,
        growth * gamma_bar * t1 * t4,
        (p.f.abs() * p.t).exp() * p.r_inv() * p.b * p.b * p.t * gamma_bar * gamma_bar * t3,
    ]
}

impl RiccatiBundle {
    /// Solves all four equations on `grid` and assembles the bundle.
    pub fn solve(p: &ModelParams, grid: &TimeGrid) -> Result<Self> {
        let beta = solve_beta(p, grid)?.closed_form;
        let (alpha, zeta) = solve_alpha_zeta(p, &beta, grid)?;
        let xi = solve_xi(p, &alpha, &zeta, grid)?.ode;
        Ok(assemble_thetas(p, beta, alpha, zeta, xi))
    }

    pub fn grid(&self) -> &TimeGrid {
        self.beta.grid()
    }

    pub fn theta(&self, i: usize) -> &DeterministicPath {
        &self.theta[i - 1]
    }

    /// Rows `t, β, α, ζ, ξ, Θ₁ … Θ₆`.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<W> {
        let mut w = CsvWriter::new(
            out,
            &["t", "beta", "alpha", "zeta", "xi", "theta1", "theta2", "theta3", "theta4", "theta5", "theta6"],
        )?;
        for (k, t) in self.grid().nodes().enumerate() {
            let mut row =
                vec![t, self.beta.values()[k], self.alpha.values()[k], self.zeta.values()[k], self.xi.values()[k]];
            row.extend(self.theta.iter().map(|th| th.values()[k]));
            w.float_row(&row)?;
        }
        w.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionReport {
    pub kappa: f64,
    /// The three summands of κ.
    pub terms: [f64; 3],
    pub pass: bool,
}

/// Contraction constant κ of the consistency map; the map is a contraction when κ < 1.
pub fn check_h2(bundle: &RiccatiBundle, p: &ModelParams) -> ContractionReport {
    let terms = contraction_terms(p, &bundle.theta_bar, bundle.gamma_bar);
    let kappa = terms.iter().sum::<f64>();
    ContractionReport { kappa, terms, pass: kappa < 1.0 }
}

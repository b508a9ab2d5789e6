//! Fixed-step RK4, grid quadrature and log-log least squares.

use crate::model::{DeterministicPath, TimeGrid};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite state at t = {t} (step {step})")]
    NonFinite { t: f64, step: usize },
    #[error("log-log fit needs at least {needed} points (got {got})")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("log-log fit needs positive finite data (x = {x}, y = {y})")]
    NonPositive { x: f64, y: f64 },
    #[error("x and y have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Value given at `t = 0`.
    Forward,
    /// Value given at `t = T`; integrated in reversed time.
    Backward,
}

/// `y' = f(t, y)` with `y` known at one end of the horizon.
pub struct OdeProblem<const D: usize, F>
where
    F: Fn(f64, &[f64; D]) -> [f64; D],
{
    pub rhs: F,
    pub value: [f64; D],
    pub direction: Direction,
}

impl<const D: usize, F> OdeProblem<D, F>
where
    F: Fn(f64, &[f64; D]) -> [f64; D],
{
    pub fn forward(initial: [f64; D], rhs: F) -> Self {
        Self { rhs, value: initial, direction: Direction::Forward }
    }

    pub fn backward(terminal: [f64; D], rhs: F) -> Self {
        Self { rhs, value: terminal, direction: Direction::Backward }
    }
}

#[inline]
fn axpy<const D: usize>(y: &[f64; D], a: f64, k: &[f64; D]) -> [f64; D] {
    let mut out = *y;
    for (o, ki) in out.iter_mut().zip(k) {
        *o += a * ki;
    }
    out
}

/// One classical RK4 step of signed size `dt` from `(t, y)`.
#[inline]
pub fn rk4_step<const D: usize>(rhs: impl Fn(f64, &[f64; D]) -> [f64; D], t: f64, y: &[f64; D], dt: f64) -> [f64; D] {
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * dt, &axpy(y, 0.5 * dt, &k1));
    let k3 = rhs(t + 0.5 * dt, &axpy(y, 0.5 * dt, &k2));
    let k4 = rhs(t + dt, &axpy(y, dt, &k3));
    let mut out = *y;
    for i in 0..D {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Solves the problem on every node of `grid`; entry `k` is the state at `t_k`.
pub fn rk4_solve_system<const D: usize, F>(
    prob: &OdeProblem<D, F>,
    grid: &TimeGrid,
) -> Result<Vec<[f64; D]>, NumericsError>
where
    F: Fn(f64, &[f64; D]) -> [f64; D],
{
    let m = grid.steps();
    let h = grid.step();
    let mut out = vec![[0.0; D]; m + 1];
    match prob.direction {
        Direction::Forward => {
            out[0] = prob.value;
            for k in 0..m {
                let next = rk4_step(&prob.rhs, grid.node(k), &out[k], h);
                check_finite(&next, grid.node(k + 1), k + 1)?;
                out[k + 1] = next;
            }
        }
        Direction::Backward => {
            out[m] = prob.value;
            for k in (1..=m).rev() {
                let next = rk4_step(&prob.rhs, grid.node(k), &out[k], -h);
                check_finite(&next, grid.node(k - 1), k - 1)?;
                out[k - 1] = next;
            }
        }
    }
    Ok(out)
}

fn check_finite<const D: usize>(y: &[f64; D], t: f64, step: usize) -> Result<(), NumericsError> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { t, step })
    }
}

/// Scalar RK4 solve returning a path on `grid`.
pub fn rk4_solve<F>(prob: &OdeProblem<1, F>, grid: &TimeGrid) -> Result<DeterministicPath, NumericsError>
where
    F: Fn(f64, &[f64; 1]) -> [f64; 1],
{
    let states = rk4_solve_system(prob, grid)?;
    Ok(component(grid, &states, 0))
}

/// Extracts component `i` of a system solution as a path.
pub fn component<const D: usize>(grid: &TimeGrid, states: &[[f64; D]], i: usize) -> DeterministicPath {
    DeterministicPath::new(*grid, states.iter().map(|s| s[i]).collect()).expect("solution has one state per node")
}

/// A coefficient sampled at the nodes and midpoints of a grid, so RK4 stages
/// read it by index instead of interpolating.
#[derive(Debug, Clone)]
pub struct HalfStepTable {
    inv_half_step: f64,
    values: Vec<f64>,
}

impl HalfStepTable {
    pub fn new(path: &DeterministicPath, grid: &TimeGrid) -> Self {
        Self { inv_half_step: 2.0 / grid.step(), values: path.half_step_samples(grid) }
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let h = grid.step();
        let n = 2 * grid.steps();
        let values = (0..=n).map(|j| f(if j == n { grid.horizon() } else { j as f64 * 0.5 * h })).collect();
        Self { inv_half_step: 2.0 / h, values }
    }

    /// Value at a node or midpoint `t`.
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        let j = (t * self.inv_half_step).round() as usize;
        self.values[j.min(self.values.len() - 1)]
    }

    /// Value at node `k`.
    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        self.values[2 * k]
    }
}

/// Composite trapezoid rule over the path's grid.
pub fn trapezoid(path: &DeterministicPath) -> f64 {
    trapezoid_values(path.values(), path.grid().step())
}

pub fn trapezoid_values(values: &[f64], h: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, inner @ .., last] => h * (0.5 * (first + last) + inner.iter().sum::<f64>()),
    }
}

/// Integral over each interval `[t_k, t_{k+1}]` from the cubic through four
/// neighbouring nodes (fourth order). Falls back to trapezoids below 3 steps.
pub fn interval_integrals(values: &[f64], h: f64) -> Vec<f64> {
    let m = values.len().saturating_sub(1);
    if m < 3 {
        return values.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).collect();
    }
    (0..m)
        .map(|k| {
            let w = if k == 0 {
                [9.0, 19.0, -5.0, 1.0]
            } else if k == m - 1 {
                [1.0, -5.0, 19.0, 9.0]
            } else {
                [-1.0, 13.0, 13.0, -1.0]
            };
            let k0 = k.saturating_sub(1).min(m - 3);
            let v = &values[k0..k0 + 4];
            h / 24.0 * (w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3])
        })
        .collect()
}

/// Running integral `int_0^{t_k}` at every node, fourth order.
pub fn cumulative_integral(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for piece in interval_integrals(values, h) {
        acc += piece;
        out.push(acc);
    }
    out
}

/// Fourth-order integral over the whole grid.
pub fn integrate(values: &[f64], h: f64) -> f64 {
    interval_integrals(values, h).iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

impl LogLogFit {
    /// `exp(intercept) * x^slope`.
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<LogLogFit, NumericsError> {
    if xs.len() != ys.len() {
        return Err(NumericsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(NumericsError::InsufficientPoints { needed: 3, got: xs.len() });
    }
    if let Some((&x, &y)) = xs.iter().zip(ys).find(|(&x, &y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(NumericsError::NonPositive { x, y });
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let slope_stderr = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(LogLogFit { slope, intercept, slope_stderr })
}

//! Model parameters, time grids, deterministic paths and the random-stream contract.
//!
//! Agent `i` has forward dynamics
//!
//! ```text
//! dx_i = (A x_i + B u_i + F x^(N)) dt + sigma x_i dW_i,        x_i(0) = x_i0
//! -dy_i = (C y_i + D u_i + H x_i + L x^(N)) dt - sum_j z_ij dW_j, y_i(T) = K x_i(T)
//! ```
//!
//! and cost `1/2 E[ int Q (x_i - (S x^(N) + eta))^2 + R u_i^2 dt + N0 y_i(0)^2 ]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{0}")]
    InvalidParameter(String),
    #[error("time grid needs at least 2 steps (got {0})")]
    GridTooCoarse(usize),
    #[error("horizon must be positive and finite (got {0})")]
    InvalidHorizon(f64),
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("path has {got} values but grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("initial law spread must be nonnegative and finite (got {0})")]
    InvalidSpread(f64),
}

/// Scalar coefficients of the dynamics and the cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub sigma: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub eta: f64,
    #[serde(rename = "N0")]
    pub n0: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

impl Default for ModelParams {
    /// `R = 1`, `T = 1`, everything else zero.
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            f: 0.0,
            sigma: 0.0,
            c: 0.0,
            d: 0.0,
            h: 0.0,
            l: 0.0,
            k: 0.0,
            q: 0.0,
            r: 1.0,
            s: 0.0,
            eta: 0.0,
            n0: 0.0,
            t: 1.0,
        }
    }
}

impl ModelParams {
    /// Checks the sign constraints `R > 0`, `Q >= 0`, `N0 >= 0`, `T > 0` and finiteness.
    pub fn validate(self) -> Result<Self, ModelError> {
        let named = [
            ("A", self.a),
            ("B", self.b),
            ("F", self.f),
            ("sigma", self.sigma),
            ("C", self.c),
            ("D", self.d),
            ("H", self.h),
            ("L", self.l),
            ("K", self.k),
            ("Q", self.q),
            ("R", self.r),
            ("S", self.s),
            ("eta", self.eta),
            ("N0", self.n0),
            ("T", self.t),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("{name} must be finite")));
        }
        if self.r <= 0.0 {
            return Err(ModelError::InvalidParameter("R must be positive".into()));
        }
        if self.q < 0.0 {
            return Err(ModelError::InvalidParameter("Q must be nonnegative".into()));
        }
        if self.n0 < 0.0 {
            return Err(ModelError::InvalidParameter("N0 must be nonnegative".into()));
        }
        if self.t <= 0.0 {
            return Err(ModelError::InvalidParameter("T must be positive".into()));
        }
        Ok(self)
    }

    pub fn r_inv(&self) -> f64 {
        1.0 / self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawKind {
    Point,
    Uniform,
    Gaussian,
}

/// Law of the i.i.d. initial states `x_i0`.
///
/// `spread` is the half-width for `uniform`, the standard deviation for
/// `gaussian`, and is ignored for `point`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub kind: LawKind,
    pub mean: f64,
    #[serde(default)]
    pub spread: f64,
}

impl InitialLaw {
    pub fn point(mean: f64) -> Self {
        Self { kind: LawKind::Point, mean, spread: 0.0 }
    }

    pub fn uniform(mean: f64, half_width: f64) -> Self {
        Self { kind: LawKind::Uniform, mean, spread: half_width }
    }

    pub fn gaussian(mean: f64, std_dev: f64) -> Self {
        Self { kind: LawKind::Gaussian, mean, spread: std_dev }
    }

    pub fn validate(self) -> Result<Self, ModelError> {
        if !self.mean.is_finite() {
            return Err(ModelError::InvalidParameter("initial law mean must be finite".into()));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(ModelError::InvalidSpread(self.spread));
        }
        Ok(self)
    }

    /// The deterministic starting point `x0` of the limiting state average.
    pub fn x0(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        match self.kind {
            LawKind::Point => 0.0,
            LawKind::Uniform => self.spread * self.spread / 3.0,
            LawKind::Gaussian => self.spread * self.spread,
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            LawKind::Point => self.mean,
            LawKind::Uniform => {
                let u: f64 = rng.random();
                self.mean + self.spread * (2.0 * u - 1.0)
            }
            LawKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                self.mean + self.spread * z
            }
        }
    }
}

/// Uniform grid `t_k = k h`, `h = T / M`, `k = 0..=M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::InvalidHorizon(horizon));
        }
        if steps < 2 {
            return Err(ModelError::GridTooCoarse(steps));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_k`; the last node is exactly `T`.
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.steps + 1).map(move |k| self.node(k))
    }

    /// The same horizon with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self { horizon: self.horizon, steps: self.steps * factor.max(1) }
    }
}

/// A deterministic function of time sampled on a [`TimeGrid`].
///
/// [`DeterministicPath::eval`] interpolates linearly between nodes. Integrators
/// that need off-node values use [`DeterministicPath::eval_cubic`], which keeps
/// their fourth-order accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl DeterministicPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != grid.len() {
            return Err(ModelError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().map(f).collect();
        Self { grid, values }
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().copied().map(f).collect() }
    }

    /// Node-wise combination of two paths on the same grid.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { grid: self.grid, values }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max_k |self_k - other_k|`.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let h = self.grid.step();
        let m = self.grid.steps();
        let mut pos = (t / h).clamp(0.0, m as f64);
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            pos = nearest;
        }
        let k = (pos.floor() as usize).min(m - 1);
        (k, pos - k as f64)
    }

    /// Piecewise-linear evaluation; exact at nodes.
    pub fn eval(&self, t: f64) -> Result<f64, ModelError> {
        self.check_range(t)?;
        Ok(self.eval_unchecked(t))
    }

    pub fn eval_unchecked(&self, t: f64) -> f64 {
        let (k, w) = self.locate(t);
        if w == 0.0 {
            return self.values[k];
        }
        (1.0 - w) * self.values[k] + w * self.values[k + 1]
    }

    /// Four-point Lagrange interpolation; exact at nodes and for cubics.
    pub fn eval_cubic(&self, t: f64) -> f64 {
        let (k, w) = self.locate(t);
        if w == 0.0 {
            return self.values[k];
        }
        let m = self.grid.steps();
        if m < 3 {
            return self.eval_unchecked(t);
        }
        // stencil k0..k0+3 containing [k, k+1], shifted inward at the ends
        let k0 = k.saturating_sub(1).min(m - 3);
        let s = (k - k0) as f64 + w;
        let v = &self.values[k0..k0 + 4];
        let l0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0;
        let l1 = s * (s - 2.0) * (s - 3.0) / 2.0;
        let l2 = -s * (s - 1.0) * (s - 3.0) / 2.0;
        let l3 = s * (s - 1.0) * (s - 2.0) / 6.0;
        l0 * v[0] + l1 * v[1] + l2 * v[2] + l3 * v[3]
    }

    fn check_range(&self, t: f64) -> Result<(), ModelError> {
        let horizon = self.grid.horizon();
        let slack = 1e-12 * horizon;
        if !(t >= -slack && t <= horizon + slack) {
            return Err(ModelError::OutOfRange { t, horizon });
        }
        Ok(())
    }

    /// Samples this path on another grid over the same horizon (cubic interpolation).
    pub fn resample(&self, grid: TimeGrid) -> Self {
        Self::from_fn(grid, |t| self.eval_cubic(t))
    }

    /// Values at `t_k` and at the midpoints `t_k + h/2` of `grid`, interleaved:
    /// entry `2k` is `t_k`, entry `2k + 1` is `t_k + h/2`.
    pub fn half_step_samples(&self, grid: &TimeGrid) -> Vec<f64> {
        let h = grid.step();
        (0..=2 * grid.steps())
            .map(|j| {
                let t = if j == 2 * grid.steps() { grid.horizon() } else { j as f64 * 0.5 * h };
                self.eval_cubic(t)
            })
            .collect()
    }
}

/// Which random quantity a substream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    InitialState,
    Brownian,
    /// Auxiliary draws used by verification routines (e.g. nested Monte Carlo).
    Auxiliary(u32),
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::InitialState => 1,
            StreamPurpose::Brownian => 2,
            StreamPurpose::Auxiliary(k) => 0x100 + k as u64,
        }
    }
}

/// Reproducible randomness: every `(replication, agent, purpose)` triple owns
/// an independent ChaCha8 stream derived from the master seed, so results do
/// not depend on scheduling or worker count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngContract {
    pub master_seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngContract {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent stream for one substream id.
    pub fn stream(&self, replication: u64, agent: u64, purpose: StreamPurpose) -> ChaCha8Rng {
        let key = splitmix64(splitmix64(splitmix64(self.master_seed) ^ replication) ^ purpose.tag());
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(agent);
        rng
    }
}

/// Draws `n` i.i.d. initial states for one replication, agent `i` from its own substream.
pub fn sample_initials(law: &InitialLaw, n: usize, rng: &RngContract, replication: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut stream = rng.stream(replication, i as u64, StreamPurpose::InitialState);
            law.sample(&mut stream)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base() -> ModelParams {
        ModelParams { q: 1.0, ..ModelParams::default() }
    }

    #[test]
    fn accepts_admissible_params() {
        let p = base();
        assert_eq!(p.validate().unwrap(), p);
    }

    #[test]
    fn rejects_each_sign_constraint() {
        let err = |p: ModelParams| p.validate().unwrap_err().to_string();
        assert_eq!(err(ModelParams { r: 0.0, ..base() }), "R must be positive");
        assert_eq!(err(ModelParams { r: -2.0, ..base() }), "R must be positive");
        assert_eq!(err(ModelParams { q: -1.0, ..base() }), "Q must be nonnegative");
        assert_eq!(err(ModelParams { n0: -0.5, ..base() }), "N0 must be nonnegative");
        assert_eq!(err(ModelParams { t: 0.0, ..base() }), "T must be positive");
        assert_eq!(err(ModelParams { a: f64::NAN, ..base() }), "A must be finite");
    }

    #[test]
    fn point_law_is_degenerate() {
        let rng = RngContract::new(3);
        assert_eq!(sample_initials(&InitialLaw::point(2.0), 3, &rng, 0), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn gaussian_sample_mean_within_clt_bound() {
        let n = 100_000;
        let xs = sample_initials(&InitialLaw::gaussian(0.0, 1.0), n, &RngContract::new(11), 0);
        let mean = xs.iter().sum::<f64>() / n as f64;
        // 3 / sqrt(N) ~ 0.0095
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn uniform_sample_stays_in_support() {
        let xs = sample_initials(&InitialLaw::uniform(1.0, 0.5), 2000, &RngContract::new(5), 7);
        assert!(xs.iter().all(|&x| (0.5..=1.5).contains(&x)));
    }

    #[test]
    fn sampling_is_reproducible() {
        let law = InitialLaw::gaussian(1.0, 2.0);
        let rng = RngContract::new(42);
        assert_eq!(sample_initials(&law, 50, &rng, 3), sample_initials(&law, 50, &rng, 3));
        assert_ne!(sample_initials(&law, 50, &rng, 3), sample_initials(&law, 50, &rng, 4));
    }

    #[test]
    fn substreams_differ_by_agent_and_purpose() {
        use rand::RngCore;
        let rng = RngContract::new(9);
        let a = rng.stream(0, 0, StreamPurpose::Brownian).next_u64();
        let b = rng.stream(0, 1, StreamPurpose::Brownian).next_u64();
        let c = rng.stream(0, 0, StreamPurpose::InitialState).next_u64();
        let d = rng.stream(1, 0, StreamPurpose::Brownian).next_u64();
        assert!(a != b && a != c && a != d);
    }

    #[test]
    fn path_eval_interpolates_linearly() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let p = DeterministicPath::from_fn(grid, |t| t);
        assert_relative_eq!(p.eval(0.5).unwrap(), 0.5);
        assert_relative_eq!(p.eval(0.25).unwrap(), 0.25);
        let two = DeterministicPath::new(TimeGrid::new(1.0, 2).unwrap(), vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(two.eval(1.0).unwrap(), 1.0);
        assert_eq!(two.eval(0.5).unwrap(), 0.5);
    }

    #[test]
    fn path_eval_exact_at_nodes_and_constant() {
        let grid = TimeGrid::new(2.0, 10).unwrap();
        let p = DeterministicPath::from_fn(grid, |t| (3.0 * t).sin());
        for (k, t) in grid.nodes().enumerate() {
            assert_eq!(p.eval(t).unwrap(), p.values()[k]);
        }
        let c = DeterministicPath::constant(grid, 4.5);
        for t in [0.0, 0.123, 1.0, 1.77, 2.0] {
            assert_eq!(c.eval(t).unwrap(), 4.5);
            assert_relative_eq!(c.eval_cubic(t), 4.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn path_eval_rejects_out_of_range() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let p = DeterministicPath::constant(grid, 1.0);
        assert!(matches!(p.eval(1.5), Err(ModelError::OutOfRange { .. })));
        assert!(p.eval(-0.1).is_err());
        assert!(p.eval(f64::NAN).is_err());
    }

    #[test]
    fn cubic_interpolation_reproduces_cubics() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t + 3.0 * t * t * t;
        let p = DeterministicPath::from_fn(grid, f);
        for t in [0.01, 0.0625, 0.3, 0.51, 0.97, 0.999] {
            assert_relative_eq!(p.eval_cubic(t), f(t), epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_invariants() {
        let grid = TimeGrid::new(3.0, 7).unwrap();
        let nodes: Vec<f64> = grid.nodes().collect();
        assert_eq!(nodes.len(), 8);
        assert_eq!(nodes[0], 0.0);
        assert_eq!(nodes[7], 3.0);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn params_roundtrip_through_json_names() {
        let json = r#"{"A":1,"B":2,"F":0.1,"sigma":0.3,"C":0.2,"D":0.5,"H":0.1,"L":0.3,"K":1,
            "Q":1,"R":2,"S":0.5,"eta":0.2,"N0":1,"T":1}"#;
        let p: ModelParams = serde_json::from_str(json).unwrap();
        assert_eq!(p.b, 2.0);
        assert_eq!(p.n0, 1.0);
        assert!(serde_json::from_str::<ModelParams>(&json.replace("\"T\"", "\"TT\"")).is_err());
    }
}

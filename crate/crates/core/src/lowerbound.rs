//! Exact evaluation of the two-environment game for a quadratic-kernel CNN.
//!
//! The model maps `x ∈ R³` to features `(⟨w, x₁:₂⟩², ⟨w, x₂:₃⟩²)` with a shared
//! kernel `w ∈ R²`, and a prompt `v ∈ R²` reads out `⟨v, features⟩`. Every
//! prediction is a quadratic polynomial in three variables, so expected
//! squared losses under the uniform law on the unit ball reduce to a fixed
//! quadratic form in the coefficient differences (the moment Gram matrix).
//!
//! The first environment's target is `x₂²`. After the learner commits a
//! prompt `v₁`, the adversary picks the second target from `{x₃², x₁²}`, and
//! the learner may then choose any kernel `w` and second prompt `v₂`. The
//! search below reports, per committed `v₁`, the best `max(loss₁, loss₂)` it
//! can find on the adversary's branch. A search can only fail to find a
//! counterexample; it does not prove the bound.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::LazyLock;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{seeded_rng, Error, Result, Rng};

/// Exponents of the ten monomials of degree at most 2 in `(x₁, x₂, x₃)`, in
/// coefficient order: `1, x₁, x₂, x₃, x₁², x₂², x₃², x₁x₂, x₁x₃, x₂x₃`.
pub const MONOMIALS: [[u32; 3]; 10] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [2, 0, 0],
    [0, 2, 0],
    [0, 0, 2],
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
];

pub const CONST: usize = 0;
pub const X1: usize = 1;
pub const X2: usize = 2;
pub const X3: usize = 3;
pub const X1_SQ: usize = 4;
pub const X2_SQ: usize = 5;
pub const X3_SQ: usize = 6;
pub const X1X2: usize = 7;
pub const X1X3: usize = 8;
pub const X2X3: usize = 9;

/// A polynomial of degree at most 2 in three variables.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadPoly3 {
    pub coeffs: [f64; 10],
}

impl QuadPoly3 {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::term(CONST, c)
    }

    /// `c` times the monomial with coefficient index `idx`.
    pub fn term(idx: usize, c: f64) -> Self {
        let mut p = Self::zero();
        p.coeffs[idx] = c;
        p
    }

    /// `x_i²` for `i ∈ {0, 1, 2}`.
    pub fn square(i: usize) -> Self {
        Self::term(X1_SQ + i, 1.0)
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        self.coeffs
            .iter()
            .zip(monomial_values(x).iter())
            .map(|(c, m)| c * m)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

fn monomial_values(x: &[f64; 3]) -> [f64; 10] {
    let [a, b, c] = *x;
    [1.0, a, b, c, a * a, b * b, c * c, a * b, a * c, b * c]
}

impl Add for QuadPoly3 {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        for (a, b) in self.coeffs.iter_mut().zip(rhs.coeffs) {
            *a += b;
        }
        self
    }
}

impl Sub for QuadPoly3 {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        for (a, b) in self.coeffs.iter_mut().zip(rhs.coeffs) {
            *a -= b;
        }
        self
    }
}

impl Mul<f64> for QuadPoly3 {
    type Output = Self;
    fn mul(mut self, s: f64) -> Self {
        for a in self.coeffs.iter_mut() {
            *a *= s;
        }
        self
    }
}

impl Neg for QuadPoly3 {
    type Output = Self;
    fn neg(self) -> Self {
        self * -1.0
    }
}

fn double_factorial_odd(n: u32) -> f64 {
    // (2m-1)!! with the convention (-1)!! = 1
    (1..=n).step_by(2).map(f64::from).product()
}

/// `E[x₁^a x₂^b x₃^c]` for `x` uniform on the unit ball in `R³`.
///
/// Zero if any exponent is odd. Otherwise, with `2s = a + b + c`, the
/// spherical average `(a−1)!!(b−1)!!(c−1)!! / (3·5·…·(2s+1))` times the
/// radial moment `E[|x|^{2s}] = 3/(3 + 2s)`.
pub fn ball_moment(exps: [u32; 3]) -> f64 {
    if exps.iter().any(|e| e % 2 == 1) {
        return 0.0;
    }
    let s = exps.iter().sum::<u32>() / 2;
    let numer: f64 = exps
        .iter()
        .map(|&e| if e == 0 { 1.0 } else { double_factorial_odd(e - 1) })
        .product();
    let sphere_denom: f64 = (0..s).map(|j| f64::from(3 + 2 * j)).product();
    let radial = 3.0 / f64::from(3 + 2 * s);
    numer / sphere_denom * radial
}

/// `G[a][b] = E[m_a m_b]` over the unit ball.
pub static MOMENT_GRAM: LazyLock<[[f64; 10]; 10]> = LazyLock::new(|| {
    let mut g = [[0.0; 10]; 10];
    for (a, ea) in MONOMIALS.iter().enumerate() {
        for (b, eb) in MONOMIALS.iter().enumerate() {
            g[a][b] = ball_moment([ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2]]);
        }
    }
    g
});

fn gram_form(c: &[f64; 10]) -> f64 {
    let g = &*MOMENT_GRAM;
    let mut total = 0.0;
    for a in 0..10 {
        if c[a] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for b in 0..10 {
            row += g[a][b] * c[b];
        }
        total += c[a] * row;
    }
    total.max(0.0)
}

fn gram_apply(c: &[f64; 10]) -> [f64; 10] {
    let g = &*MOMENT_GRAM;
    let mut out = [0.0; 10];
    for a in 0..10 {
        out[a] = (0..10).map(|b| g[a][b] * c[b]).sum();
    }
    out
}

/// Exact `E[(p(x) − target(x))²]` for `x` uniform on the unit ball.
pub fn expected_sq_loss(p: &QuadPoly3, target: &QuadPoly3) -> f64 {
    gram_form(&(*p - *target).coeffs)
}

/// Largest absolute coefficient difference.
pub fn coefficient_deviation_check(p1: &QuadPoly3, p2: &QuadPoly3) -> f64 {
    p1.coeffs
        .iter()
        .zip(p2.coeffs.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Kernel `w` and prompt `v` of the two-feature quadratic CNN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    pub w: [f64; 2],
    pub v: [f64; 2],
}

/// `v₁(w₁x₁ + w₂x₂)² + v₂(w₁x₂ + w₂x₃)²`, expanded.
pub fn predict_poly(p: &CnnParams) -> QuadPoly3 {
    predict_with_jacobian(p.w, p.v).0
}

/// Prediction coefficients and their partial derivatives with respect to
/// `(w₁, w₂, v₁, v₂)`.
fn predict_with_jacobian(w: [f64; 2], v: [f64; 2]) -> (QuadPoly3, [[f64; 10]; 4]) {
    let [w1, w2] = w;
    let [a, b] = v;
    let mut c = [0.0; 10];
    c[X1_SQ] = a * w1 * w1;
    c[X2_SQ] = a * w2 * w2 + b * w1 * w1;
    c[X3_SQ] = b * w2 * w2;
    c[X1X2] = 2.0 * a * w1 * w2;
    c[X2X3] = 2.0 * b * w1 * w2;

    let mut j = [[0.0; 10]; 4];
    j[0][X1_SQ] = 2.0 * a * w1;
    j[0][X2_SQ] = 2.0 * b * w1;
    j[0][X1X2] = 2.0 * a * w2;
    j[0][X2X3] = 2.0 * b * w2;

    j[1][X2_SQ] = 2.0 * a * w2;
    j[1][X3_SQ] = 2.0 * b * w2;
    j[1][X1X2] = 2.0 * a * w1;
    j[1][X2X3] = 2.0 * b * w1;

    j[2][X1_SQ] = w1 * w1;
    j[2][X2_SQ] = w2 * w2;
    j[2][X1X2] = 2.0 * w1 * w2;

    j[3][X2_SQ] = w1 * w1;
    j[3][X3_SQ] = w2 * w2;
    j[3][X2X3] = 2.0 * w1 * w2;
    (QuadPoly3 { coeffs: c }, j)
}

/// Uniform point in the unit ball by rejection from the cube `[-1, 1]³`.
pub fn sample_unit_ball(rng: &mut Rng) -> [f64; 3] {
    loop {
        let x = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if x.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
            return x;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Monte Carlo estimates of `E[(p − t)²]` for several pairs from one shared
/// stream of `n` ball samples.
pub fn monte_carlo_sq_losses(pairs: &[(QuadPoly3, QuadPoly3)], n: usize, rng: &mut Rng) -> Vec<McEstimate> {
    let diffs: Vec<[f64; 10]> = pairs.iter().map(|(p, t)| (*p - *t).coeffs).collect();
    let mut sum = vec![0.0; pairs.len()];
    let mut sum_sq = vec![0.0; pairs.len()];
    for _ in 0..n {
        let m = monomial_values(&sample_unit_ball(rng));
        for (k, d) in diffs.iter().enumerate() {
            let e: f64 = d.iter().zip(m.iter()).map(|(a, b)| a * b).sum();
            let s = e * e;
            sum[k] += s;
            sum_sq[k] += s * s;
        }
    }
    let nf = n as f64;
    sum.iter()
        .zip(sum_sq.iter())
        .map(|(&s, &ss)| {
            let mean = s / nf;
            let var = (ss / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
            McEstimate {
                mean,
                std_err: (var / nf).sqrt(),
            }
        })
        .collect()
}

pub fn monte_carlo_sq_loss(p: &QuadPoly3, target: &QuadPoly3, n: usize, rng: &mut Rng) -> McEstimate {
    monte_carlo_sq_losses(&[(*p, *target)], n, rng)[0]
}

/// The first environment's target, `x₂²`.
pub fn first_target() -> QuadPoly3 {
    QuadPoly3::square(1)
}

/// The adversary's choice of second target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `f₂ = x₃²`.
    X3Sq,
    /// `f₂ = x₁²`.
    X1Sq,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::X3Sq, Branch::X1Sq];

    pub fn target(&self) -> QuadPoly3 {
        match self {
            Branch::X3Sq => QuadPoly3::square(2),
            Branch::X1Sq => QuadPoly3::square(0),
        }
    }

    /// Parameters `(w, v₁, v₂)` realizing both targets exactly.
    pub fn witness(&self) -> ([f64; 2], [f64; 2], [f64; 2]) {
        match self {
            Branch::X3Sq => ([0.0, 1.0], [1.0, 0.0], [0.0, 1.0]),
            Branch::X1Sq => ([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessCheck {
    pub branch: Branch,
    pub w: [f64; 2],
    pub v1: [f64; 2],
    pub v2: [f64; 2],
    pub loss1: f64,
    pub loss2: f64,
}

/// Evaluates the two realizability witnesses.
pub fn witness_checks() -> Vec<WitnessCheck> {
    Branch::ALL
        .iter()
        .map(|&branch| {
            let (w, v1, v2) = branch.witness();
            WitnessCheck {
                branch,
                w,
                v1,
                v2,
                loss1: expected_sq_loss(&predict_poly(&CnnParams { w, v: v1 }), &first_target()),
                loss2: expected_sq_loss(&predict_poly(&CnnParams { w, v: v2 }), &branch.target()),
            }
        })
        .collect()
}

/// Search configuration for [`adversary_game`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    /// Committed prompts range over `[-range, range]²`.
    pub range: f64,
    /// Grid spacing; rounded so the grid hits both endpoints.
    pub resolution: f64,
    /// Local searches per (v₁, branch), at least 64.
    pub starts: usize,
    pub seed: u64,
    /// Target gradient norm for the final smoothing stage.
    pub grad_tol: f64,
    /// Iteration cap per smoothing stage.
    pub max_stage_iters: usize,
    /// Also evaluate the committed prompts of the realizability witnesses.
    pub include_witnesses: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            range: 3.0,
            resolution: 0.05,
            starts: 64,
            seed: 0,
            grad_tol: 1e-9,
            max_stage_iters: 200,
            include_witnesses: true,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::MalformedGrid(format!("range must be positive, got {}", self.range)));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::MalformedGrid(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.resolution > 2.0 * self.range {
            return Err(Error::MalformedGrid("resolution exceeds the grid width".into()));
        }
        if self.starts == 0 {
            return Err(Error::MalformedGrid("at least one start is required".into()));
        }
        if !(self.grad_tol > 0.0) || self.max_stage_iters == 0 {
            return Err(Error::MalformedGrid("grad_tol and max_stage_iters must be positive".into()));
        }
        Ok(())
    }

    /// Committed prompts to evaluate, row-major over the grid, then any
    /// witness prompts not already on it.
    pub fn grid(&self) -> Result<Vec<[f64; 2]>> {
        self.validate()?;
        let steps = (2.0 * self.range / self.resolution).round().max(1.0) as i64;
        let axis: Vec<f64> = (0..=steps)
            .map(|i| self.range * (2 * i - steps) as f64 / steps as f64)
            .collect();
        let mut pts: Vec<[f64; 2]> = axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| [a, b]))
            .collect();
        if self.include_witnesses {
            for branch in Branch::ALL {
                let v1 = branch.witness().1;
                if !pts.contains(&v1) {
                    pts.push(v1);
                }
            }
        }
        Ok(pts)
    }
}

/// A point found by the search, with both losses recomputed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub w: [f64; 2],
    pub v2: [f64; 2],
    pub loss1: f64,
    pub loss2: f64,
    pub max_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchStats {
    pub evaluations: u64,
    pub refinement_iterations: u64,
    pub starts: u64,
    /// Starts whose final smoothing stage reached `grad_tol`.
    pub refined_starts: u64,
    /// Visited points with a loss at most ε̄ whose coefficients were compared
    /// against the target.
    pub low_loss_checked: u64,
    /// Of those, points with some coefficient off by more than 1/4.
    pub coefficient_violations: u64,
    pub max_low_loss_deviation: f64,
}

impl SearchStats {
    fn merge(&mut self, o: &SearchStats) {
        self.evaluations += o.evaluations;
        self.refinement_iterations += o.refinement_iterations;
        self.starts += o.starts;
        self.refined_starts += o.refined_starts;
        self.low_loss_checked += o.low_loss_checked;
        self.coefficient_violations += o.coefficient_violations;
        self.max_low_loss_deviation = self.max_low_loss_deviation.max(o.max_low_loss_deviation);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchValues {
    pub x3_sq: f64,
    pub x1_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub v1: [f64; 2],
    /// The branch whose best achievable `max(loss₁, loss₂)` is larger.
    pub branch: Branch,
    /// Best point found on the adversary's branch.
    pub best_found: Candidate,
    pub branch_values: BranchValues,
    pub search_stats: SearchStats,
}

impl GameReport {
    pub fn adversary_value(&self) -> f64 {
        self.best_found.max_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    pub points: usize,
    pub epsilon_bar: f64,
    pub min_adversary_value: f64,
    pub argmin_v1: [f64; 2],
    /// Every committed prompt's adversary value exceeds ε̄.
    pub all_exceed: bool,
    pub witnesses: Vec<WitnessCheck>,
    pub witnesses_exact: bool,
    pub low_loss_checked: u64,
    pub coefficient_violations: u64,
    pub max_low_loss_deviation: f64,
}

impl GameSummary {
    pub fn success(&self) -> bool {
        self.all_exceed && self.witnesses_exact && self.coefficient_violations == 0
    }
}

pub fn summarize(reports: &[GameReport], epsilon_bar: f64) -> GameSummary {
    let mut stats = SearchStats::default();
    let mut min_value = f64::INFINITY;
    let mut argmin = [f64::NAN; 2];
    for r in reports {
        stats.merge(&r.search_stats);
        if r.adversary_value() < min_value {
            min_value = r.adversary_value();
            argmin = r.v1;
        }
    }
    let witnesses = witness_checks();
    let witnesses_exact = witnesses.iter().all(|w| w.loss1 == 0.0 && w.loss2 == 0.0);
    GameSummary {
        points: reports.len(),
        epsilon_bar,
        min_adversary_value: min_value,
        argmin_v1: argmin,
        all_exceed: !reports.is_empty() && reports.iter().all(|r| r.adversary_value() > epsilon_bar),
        witnesses,
        witnesses_exact,
        low_loss_checked: stats.low_loss_checked,
        coefficient_violations: stats.coefficient_violations,
        max_low_loss_deviation: stats.max_low_loss_deviation,
    }
}

/// Coefficient bound checked at low-loss points.
pub const COEFFICIENT_BOUND: f64 = 0.25;

/// Plays the game for every committed prompt on the grid. Grid points are
/// evaluated in parallel; results come back in grid order.
pub fn adversary_game(config: &GameConfig, epsilon_bar: f64) -> Result<Vec<GameReport>> {
    if !(epsilon_bar > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon_bar must be positive, got {epsilon_bar}")));
    }
    let grid = config.grid()?;
    Ok(grid
        .par_iter()
        .enumerate()
        .map(|(idx, &v1)| play_point(config, epsilon_bar, idx as u64, v1))
        .collect())
}

/// Plays both branches for one committed prompt.
pub fn play_point(config: &GameConfig, epsilon_bar: f64, idx: u64, v1: [f64; 2]) -> GameReport {
    let outcomes: Vec<(Branch, Candidate, SearchStats)> = Branch::ALL
        .iter()
        .enumerate()
        .map(|(b, &branch)| {
            let seed = config
                .seed
                .wrapping_add(idx.wrapping_mul(0x9E37_79B9_7F4A_7C15))
                .wrapping_add(b as u64);
            let mut search = BranchSearch::new(v1, branch, epsilon_bar, config);
            let best = search.run(&mut seeded_rng(seed));
            (branch, best, search.stats)
        })
        .collect();
    let mut stats = SearchStats::default();
    for (_, _, s) in &outcomes {
        stats.merge(s);
    }
    let (branch, best_found, _) = if outcomes[1].1.max_loss > outcomes[0].1.max_loss {
        outcomes[1]
    } else {
        outcomes[0]
    };
    GameReport {
        v1,
        branch,
        best_found,
        branch_values: BranchValues {
            x3_sq: outcomes[0].1.max_loss,
            x1_sq: outcomes[1].1.max_loss,
        },
        search_stats: stats,
    }
}

/// Smoothing levels for `τ·log(e^{l₁/τ} + e^{l₂/τ})`, which approaches
/// `max(l₁, l₂)` from above within `τ·ln 2`.
const SMOOTHING: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

/// Multi-start local minimization of `max(loss₁(w, v₁), loss₂(w, v₂))` over
/// `θ = (w₁, w₂, v₂₁, v₂₂)` for a fixed committed `v₁`.
struct BranchSearch {
    v1: [f64; 2],
    target1: QuadPoly3,
    target2: QuadPoly3,
    epsilon_bar: f64,
    starts: usize,
    grad_tol: f64,
    max_stage_iters: usize,
    best: Option<Candidate>,
    stats: SearchStats,
}

struct Eval {
    l1: f64,
    l2: f64,
    g1: [f64; 4],
    g2: [f64; 4],
}

impl BranchSearch {
    fn new(v1: [f64; 2], branch: Branch, epsilon_bar: f64, config: &GameConfig) -> Self {
        Self {
            v1,
            target1: first_target(),
            target2: branch.target(),
            epsilon_bar,
            starts: config.starts,
            grad_tol: config.grad_tol,
            max_stage_iters: config.max_stage_iters,
            best: None,
            stats: SearchStats::default(),
        }
    }

    fn run(&mut self, rng: &mut Rng) -> Candidate {
        for s in 0..self.starts {
            let theta0 = match s {
                0 => {
                    let (w, _, v2) = Branch::X3Sq.witness();
                    [w[0], w[1], v2[0], v2[1]]
                }
                1 => {
                    let (w, _, v2) = Branch::X1Sq.witness();
                    [w[0], w[1], v2[0], v2[1]]
                }
                _ => {
                    let scale = (rng.random_range(-1.0..1.0_f64)).exp();
                    let mut t = [0.0; 4];
                    for c in t.iter_mut() {
                        *c = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    t
                }
            };
            self.local_descent(theta0);
        }
        self.stats.starts = self.starts as u64;
        self.best.expect("at least one start")
    }

    /// Exact losses and gradients at `θ`; also records the point.
    fn eval(&mut self, t: &[f64; 4]) -> Eval {
        self.stats.evaluations += 1;
        let w = [t[0], t[1]];
        let (p1, j1) = predict_with_jacobian(w, self.v1);
        let (p2, j2) = predict_with_jacobian(w, [t[2], t[3]]);
        let c1 = (p1 - self.target1).coeffs;
        let c2 = (p2 - self.target2).coeffs;
        let gc1 = gram_apply(&c1);
        let gc2 = gram_apply(&c2);
        let dot = |a: &[f64; 10], b: &[f64; 10]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let l1 = dot(&c1, &gc1).max(0.0);
        let l2 = dot(&c2, &gc2).max(0.0);
        let g1 = [2.0 * dot(&j1[0], &gc1), 2.0 * dot(&j1[1], &gc1), 0.0, 0.0];
        let g2 = [
            2.0 * dot(&j2[0], &gc2),
            2.0 * dot(&j2[1], &gc2),
            2.0 * dot(&j2[2], &gc2),
            2.0 * dot(&j2[3], &gc2),
        ];

        for (l, p, target) in [(l1, &p1, self.target1), (l2, &p2, self.target2)] {
            if l <= self.epsilon_bar {
                let dev = coefficient_deviation_check(p, &target);
                self.stats.low_loss_checked += 1;
                self.stats.max_low_loss_deviation = self.stats.max_low_loss_deviation.max(dev);
                if dev > COEFFICIENT_BOUND {
                    self.stats.coefficient_violations += 1;
                }
            }
        }
        let max_loss = l1.max(l2);
        if max_loss.is_finite() && self.best.is_none_or(|b| max_loss < b.max_loss) {
            self.best = Some(Candidate {
                w,
                v2: [t[2], t[3]],
                loss1: l1,
                loss2: l2,
                max_loss,
            });
        }
        Eval { l1, l2, g1, g2 }
    }

    fn smoothed(&mut self, t: &[f64; 4], tau: f64) -> (f64, [f64; 4]) {
        let e = self.eval(t);
        let hi = e.l1.max(e.l2);
        let gap = (e.l1 - e.l2).abs() / tau;
        let value = hi + tau * (-gap).exp().ln_1p();
        // weight on loss₁
        let lam = 1.0 / (1.0 + (-(e.l1 - e.l2) / tau).exp());
        let g = std::array::from_fn(|i| lam * e.g1[i] + (1.0 - lam) * e.g2[i]);
        (value, g)
    }

    fn local_descent(&mut self, mut theta: [f64; 4]) {
        let mut reached = false;
        for (stage, &tau) in SMOOTHING.iter().enumerate() {
            let (x, ok) = self.bfgs(theta, tau);
            theta = x;
            if stage == SMOOTHING.len() - 1 {
                reached = ok;
            }
        }
        if reached {
            self.stats.refined_starts += 1;
        }
    }

    /// BFGS with Armijo backtracking on the smoothed objective. Returns the
    /// final point and whether the gradient norm reached `grad_tol`.
    fn bfgs(&mut self, mut x: [f64; 4], tau: f64) -> ([f64; 4], bool) {
        let mut h = identity4();
        let (mut f, mut g) = self.smoothed(&x, tau);
        for _ in 0..self.max_stage_iters {
            if norm4(&g) <= self.grad_tol {
                return (x, true);
            }
            self.stats.refinement_iterations += 1;
            let mut p = mat_vec4(&h, &g).map(|c| -c);
            let mut slope = dot4(&p, &g);
            if slope >= 0.0 {
                h = identity4();
                p = g.map(|c| -c);
                slope = -dot4(&g, &g);
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let xn = add_scaled4(&x, alpha, &p);
                let (fn_, gn) = self.smoothed(&xn, tau);
                if fn_.is_finite() && fn_ <= f + 1e-4 * alpha * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((xn, fn_, gn)) = accepted else {
                return (x, norm4(&g) <= self.grad_tol);
            };
            let s = sub4(&xn, &x);
            let y = sub4(&gn, &g);
            let sy = dot4(&s, &y);
            if sy > 1e-300 {
                h = bfgs_update(&h, &s, &y, sy);
            }
            let step = norm4(&s);
            x = xn;
            f = fn_;
            g = gn;
            if step <= 1e-15 * (1.0 + norm4(&x)) {
                break;
            }
        }
        (x, norm4(&g) <= self.grad_tol)
    }
}

type Mat4 = [[f64; 4]; 4];

fn identity4() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm4(a: &[f64; 4]) -> f64 {
    dot4(a, a).sqrt()
}

fn sub4(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

fn add_scaled4(a: &[f64; 4], s: f64, b: &[f64; 4]) -> [f64; 4] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]]
}

fn mat_vec4(m: &Mat4, v: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = dot4(&m[i], v);
    }
    out
}

/// Inverse-Hessian update `H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &Mat4, s: &[f64; 4], y: &[f64; 4], sy: f64) -> Mat4 {
    let rho = 1.0 / sy;
    let hy = mat_vec4(h, y);
    let yhy = dot4(y, &hy);
    let mut out = *h;
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
    out
}

//! Doubly projected gradient descent on the continual matrix factorization
//! objective `½‖U v_i − w_i‖²`, one task at a time.
//!
//! Within a task, updates to `U` are projected on the left onto `W⊥` (the
//! complement of the committed column span) and on the right onto `V⊥` (the
//! complement of the committed row span). A committed prompt `v_j` lies in
//! `V`, so `U v_j` is invariant under every later update.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{Subspace, DEFAULT_RESIDUAL_TOL};
use crate::{Error, Result, Rng};

/// Problem sizes: input dimension `d`, feature dimension `r`, task count `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub d: usize,
    pub r: usize,
    pub k: usize,
}

impl ProblemDims {
    pub fn new(d: usize, r: usize, k: usize) -> Result<Self> {
        let dims = Self { d, r, k };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::InvalidParameter("r must be at least 1".into()));
        }
        if self.r > self.d {
            return Err(Error::InvalidParameter(format!(
                "r must not exceed d (r = {}, d = {})",
                self.r, self.d
            )));
        }
        if self.k < 1 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Initialization scale, step size and iteration cap follow the
    /// asymptotic schedules with all hidden constants set to 1.
    Theory,
    /// Fixed, fast settings that finish desk-scale runs in seconds.
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma: f64,
    pub eta: f64,
    pub t_max: usize,
    pub epsilon: f64,
    pub nu: f64,
    pub big_d: f64,
    pub mode: Mode,
    pub stop_target: f64,
}

impl Hyperparams {
    /// `min(εν/(D·d·k), ν/(4√d))`: the per-task loss target, also tight
    /// enough that every coordinate of `U v − w` is below `ν/2`.
    pub fn default_stop_target(dims: ProblemDims, epsilon: f64, nu: f64, big_d: f64) -> f64 {
        let per_task = epsilon * nu / (big_d * dims.d as f64 * dims.k as f64);
        let rounding = nu / (4.0 * (dims.d as f64).sqrt());
        per_task.min(rounding)
    }

    pub fn practical(dims: ProblemDims, epsilon: f64, nu: f64, big_d: f64) -> Self {
        Self {
            sigma: 1e-2,
            eta: 5e-2 / (big_d * big_d),
            t_max: 200_000,
            epsilon,
            nu,
            big_d,
            mode: Mode::Practical,
            stop_target: Self::default_stop_target(dims, epsilon, nu, big_d),
        }
    }

    /// σ = ε/(d²kD⁴·log(dk/ε)), η = σ³/(k²D⁵),
    /// T = (D/η)·log(Dkd/(εν)) + (D/η)·log(k/σ). T saturates at `usize::MAX`.
    pub fn theory(dims: ProblemDims, epsilon: f64, nu: f64, big_d: f64) -> Self {
        let (d, k) = (dims.d as f64, dims.k as f64);
        let log_term = (d * k / epsilon).ln().max(1.0);
        let sigma = epsilon / (d * d * k * big_d.powi(4) * log_term);
        let eta = sigma.powi(3) / (k * k * big_d.powi(5));
        let t = big_d / eta * (big_d * k * d / (epsilon * nu)).ln().max(0.0)
            + big_d / eta * (k / sigma).ln().max(0.0);
        Self {
            sigma,
            eta,
            t_max: t.ceil() as usize,
            epsilon,
            nu,
            big_d,
            mode: Mode::Theory,
            stop_target: Self::default_stop_target(dims, epsilon, nu, big_d),
        }
    }

    pub fn for_mode(mode: Mode, dims: ProblemDims, epsilon: f64, nu: f64, big_d: f64) -> Self {
        match mode {
            Mode::Theory => Self::theory(dims, epsilon, nu, big_d),
            Mode::Practical => Self::practical(dims, epsilon, nu, big_d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("eta", self.eta),
            ("epsilon", self.epsilon),
            ("nu", self.nu),
            ("D", self.big_d),
            ("stop_target", self.stop_target),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.t_max == 0 {
            return Err(Error::InvalidParameter("t_max must be positive".into()));
        }
        if self.epsilon >= 0.5 {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1/2), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// The learner's live state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureState {
    /// Feature matrix, `d x r`.
    pub u: DMatrix<f64>,
    /// Committed column span `W ⊂ R^d`.
    pub col_space: Subspace,
    /// Committed row span `V ⊂ R^r`.
    pub row_space: Subspace,
    /// One prompt per completed task, each stored as its projection onto `V`.
    pub prompts: Vec<DVector<f64>>,
    pub task_index: usize,
}

impl FeatureState {
    pub fn new(d: usize, r: usize) -> Self {
        Self {
            u: DMatrix::zeros(d, r),
            col_space: Subspace::empty(d),
            row_space: Subspace::empty(r),
            prompts: Vec::new(),
            task_index: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }

    pub fn r(&self) -> usize {
        self.u.ncols()
    }

    /// Adds `σ · P_W⊥ G P_V⊥` to `U` and returns a fresh prompt `σ g`, where
    /// `G` and `g` have independent standard normal entries.
    pub fn init_task(&mut self, sigma: f64, rng: &mut Rng) -> DVector<f64> {
        let (d, r) = (self.d(), self.r());
        let g = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = DVector::from_fn(r, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        let noise = project_both_complements(&g, &self.col_space, &self.row_space);
        self.u += sigma * noise;
        v
    }

    /// One DPGrad iteration on task target `w`:
    /// `U ← U − η P_W⊥ (Uv − w) vᵀ P_V⊥` and `v ← v − η Uᵀ(Uv − w)`,
    /// both gradients taken at the current `(U, v)`.
    pub fn dpgrad_step(&mut self, v: &mut DVector<f64>, w: &DVector<f64>, eta: f64) {
        let residual = &self.u * &*v - w;
        self.apply_step(v, &residual, eta);
    }

    /// Step body with a precomputed residual `Uv − w`.
    pub(crate) fn apply_step(&mut self, v: &mut DVector<f64>, residual: &DVector<f64>, eta: f64) {
        let grad_v = self.u.tr_mul(residual);
        // P_W⊥ (res vᵀ) P_V⊥ = (P_W⊥ res)(P_V⊥ v)ᵀ
        let left = self.col_space.project_complement(residual);
        let right = self.row_space.project_complement(v);
        self.u.ger(-eta, &left, &right, 1.0);
        v.axpy(-eta, &grad_v, 1.0);
    }

    /// Closes a task. If `‖P_W⊥ ŵ‖ ≥ 1/D`, `W` gains `ŵ` and `V` gains `v`.
    /// Then `U ← P_W U P_V` and the prompt `P_V v` is committed. Returns
    /// whether the subspaces grew.
    ///
    /// Since `U = P_W U P_V` afterwards, `U P_V v = U v`: storing the
    /// projected prompt leaves the committed prediction unchanged and keeps
    /// every committed prompt inside `V`.
    pub fn finalize_task(&mut self, v: &DVector<f64>, w_hat: &DVector<f64>, big_d: f64) -> Result<bool> {
        let novel = self.col_space.residual_norm(w_hat) >= 1.0 / big_d;
        if novel {
            if self.row_space.dim() >= self.r() {
                return Err(Error::RankExceeded { r: self.r() });
            }
            let mut col = self.col_space.clone();
            let mut row = self.row_space.clone();
            let grew_col = col.extend(w_hat, DEFAULT_RESIDUAL_TOL)?;
            let grew_row = row.extend(v, DEFAULT_RESIDUAL_TOL)?;
            if !(grew_col && grew_row) {
                return Err(Error::Infeasible(
                    "learned prompt has no component outside the committed row space".into(),
                ));
            }
            self.col_space = col;
            self.row_space = row;
        }
        self.u = project_both(&self.u, &self.col_space, &self.row_space);
        self.prompts.push(self.row_space.project_onto(v));
        self.task_index += 1;
        Ok(novel)
    }

    /// Runs one task to completion without observation.
    pub fn run_task(&mut self, w: &DVector<f64>, h: &Hyperparams, rng: &mut Rng) -> Result<TaskOutcome> {
        self.run_task_observed(w, h, rng, &mut NoObserver)
    }

    /// Initialization, projected gradient iterations until the loss reaches
    /// `h.stop_target` or `h.t_max` steps have run, rounding, finalization.
    ///
    /// The observer sees iteration 0 (just after initialization) and every
    /// later iterate; the last call has `done == true`.
    pub fn run_task_observed<O: TaskObserver>(
        &mut self,
        w: &DVector<f64>,
        h: &Hyperparams,
        rng: &mut Rng,
        observer: &mut O,
    ) -> Result<TaskOutcome> {
        if w.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: w.len(),
            });
        }
        let mut v = self.init_task(h.sigma, rng);
        let mut iter = 0usize;
        let final_loss = loop {
            let residual = &self.u * &v - w;
            let loss = 0.5 * residual.norm_squared();
            let done = loss <= h.stop_target || iter >= h.t_max;
            observer.observe(IterView {
                iter,
                state: self,
                v: &v,
                w,
                loss,
                done,
            });
            if done {
                break loss;
            }
            self.apply_step(&mut v, &residual, h.eta);
            iter += 1;
        };
        let prediction = &self.u * &v;
        let w_hat = round_to_grid(&prediction, h.nu);
        let recovered_exact = same_grid_point(&w_hat, w, h.nu);
        let augmented = self.finalize_task(&v, &w_hat, h.big_d)?;
        Ok(TaskOutcome {
            iterations: iter,
            converged: final_loss <= h.stop_target,
            final_loss,
            prompt: v,
            w_hat,
            recovered_exact,
            augmented,
        })
    }
}

/// Result of one task, before any cross-task bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub iterations: usize,
    /// `false` if `t_max` ran out before the loss reached the stop target.
    pub converged: bool,
    /// Loss `½‖Uv − w‖²` at the last iterate, before finalization.
    pub final_loss: f64,
    /// The prompt as learned (unprojected).
    pub prompt: DVector<f64>,
    pub w_hat: DVector<f64>,
    pub recovered_exact: bool,
    pub augmented: bool,
}

/// What an observer sees at one iterate.
pub struct IterView<'a> {
    pub iter: usize,
    pub state: &'a FeatureState,
    pub v: &'a DVector<f64>,
    pub w: &'a DVector<f64>,
    pub loss: f64,
    pub done: bool,
}

pub trait TaskObserver {
    fn observe(&mut self, view: IterView<'_>);
}

pub struct NoObserver;

impl TaskObserver for NoObserver {
    fn observe(&mut self, _: IterView<'_>) {}
}

impl<F: FnMut(IterView<'_>)> TaskObserver for F {
    fn observe(&mut self, view: IterView<'_>) {
        self(view)
    }
}

/// `P_W⊥ m P_V⊥`.
pub fn project_both_complements(m: &DMatrix<f64>, col: &Subspace, row: &Subspace) -> DMatrix<f64> {
    let mut out = m.clone();
    for b in col.basis() {
        let c = out.tr_mul(b);
        out.ger(-1.0, b, &c, 1.0);
    }
    for b in row.basis() {
        let c = &out * b;
        out.ger(-1.0, &c, b, 1.0);
    }
    out
}

/// `P_W m P_V`.
pub fn project_both(m: &DMatrix<f64>, col: &Subspace, row: &Subspace) -> DMatrix<f64> {
    let mut left = DMatrix::zeros(m.nrows(), m.ncols());
    for b in col.basis() {
        let c = m.tr_mul(b);
        left.ger(1.0, b, &c, 1.0);
    }
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for b in row.basis() {
        let c = &left * b;
        out.ger(1.0, &c, b, 1.0);
    }
    out
}

/// `½‖Uv − w‖²`.
pub fn loss(u: &DMatrix<f64>, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    0.5 * (u * v - w).norm_squared()
}

/// Gradients of `½‖Uv − w‖²`: `((Uv − w) vᵀ, Uᵀ(Uv − w))`.
pub fn exact_gradients(u: &DMatrix<f64>, v: &DVector<f64>, w: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let residual = u * v - w;
    (&residual * v.transpose(), u.tr_mul(&residual))
}

/// Rounds each coordinate to the nearest multiple of `nu`, ties away from zero.
pub fn round_to_grid(x: &DVector<f64>, nu: f64) -> DVector<f64> {
    x.map(|c| (c / nu).round() * nu)
}

/// Coordinate-wise equality of grid indices `round(x/ν)`.
pub fn same_grid_point(a: &DVector<f64>, b: &DVector<f64>, nu: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x / nu).round() == (y / nu).round())
}

/// The split of `(U, w, v)` against the subspaces committed before a task.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionView {
    pub u_a: DMatrix<f64>,
    pub u_b: DMatrix<f64>,
    pub w_a: DVector<f64>,
    pub w_b: DVector<f64>,
    pub x: DVector<f64>,
    pub u_2: DMatrix<f64>,
    pub v_1: DVector<f64>,
    pub v_2: DVector<f64>,
}

/// `w_A = P_W w`, `U_A = P_W U P_V`, `v_1 = P_V v`; `U_B = w_B xᵀ + U_2` with
/// `x = U_Bᵀ w_B / ‖w_B‖²`. A `w_B` with norm at most 1e-10 counts as zero,
/// in which case `x = 0` and `U_2 = U_B`.
pub fn decompose(
    u: &DMatrix<f64>,
    w: &DVector<f64>,
    v: &DVector<f64>,
    prev_col: &Subspace,
    prev_row: &Subspace,
) -> Result<DecompositionView> {
    let (d, r) = (u.nrows(), u.ncols());
    for (expected, found) in [
        (d, w.len()),
        (r, v.len()),
        (d, prev_col.ambient_dim()),
        (r, prev_row.ambient_dim()),
    ] {
        if expected != found {
            return Err(Error::DimensionMismatch { expected, found });
        }
    }
    let w_a = prev_col.project_onto(w);
    let w_b = w - &w_a;
    let u_a = project_both(u, prev_col, prev_row);
    let u_b = u - &u_a;
    let wb_sq = w_b.norm_squared();
    let (x, u_2) = if wb_sq.sqrt() > DEFAULT_RESIDUAL_TOL {
        let x = u_b.tr_mul(&w_b) / wb_sq;
        let u_2 = &u_b - &w_b * x.transpose();
        (x, u_2)
    } else {
        (DVector::zeros(r), u_b.clone())
    };
    let v_1 = prev_row.project_onto(v);
    let v_2 = v - &v_1;
    Ok(DecompositionView {
        u_a,
        u_b,
        w_a,
        w_b,
        x,
        u_2,
        v_1,
        v_2,
    })
}

/// The three-term split of the task loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// `½‖U_A v_1 − w_A‖²`, error on already-learned features.
    pub existing: f64,
    /// `½‖w_B‖² (xᵀv_2 − 1)²`, error along the new direction.
    pub signal: f64,
    /// `½‖U_2 v_2‖²`, contribution of the initialization noise.
    pub noise: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.existing + self.signal + self.noise
    }
}

pub fn loss_components(dv: &DecompositionView) -> LossComponents {
    let existing = 0.5 * (&dv.u_a * &dv.v_1 - &dv.w_a).norm_squared();
    let align = dv.x.dot(&dv.v_2) - 1.0;
    let signal = 0.5 * dv.w_b.norm_squared() * align * align;
    let noise = 0.5 * (&dv.u_2 * &dv.v_2).norm_squared();
    LossComponents {
        existing,
        signal,
        noise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{nonzero_singular_bounds, orthonormal_basis};
    use crate::seeded_rng;
    use nalgebra::dvector;

    fn practical(d: usize, r: usize, k: usize) -> Hyperparams {
        Hyperparams::practical(ProblemDims::new(d, r, k).unwrap(), 1e-3, 1.0 / 64.0, 2.0)
    }

    fn finite_difference(u: &DMatrix<f64>, v: &DVector<f64>, w: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let h = 1e-6;
        let mut gu = DMatrix::zeros(u.nrows(), u.ncols());
        for i in 0..u.nrows() {
            for j in 0..u.ncols() {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                gu[(i, j)] = (loss(&up, v, w) - loss(&dn, v, w)) / (2.0 * h);
            }
        }
        let mut gv = DVector::zeros(v.len());
        for j in 0..v.len() {
            let (mut up, mut dn) = (v.clone(), v.clone());
            up[j] += h;
            dn[j] -= h;
            gv[j] = (loss(u, &up, w) - loss(u, &dn, w)) / (2.0 * h);
        }
        (gu, gv)
    }

    #[test]
    fn gradients_at_zero_and_optimum() {
        let w = dvector![1.0, -2.0, 0.5];
        let v = dvector![0.3, 2.0];
        let (gu, gv) = exact_gradients(&DMatrix::zeros(3, 2), &v, &w);
        assert_eq!(gu, -&w * v.transpose());
        assert_eq!(gv, DVector::zeros(2));

        let u = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, -1.0, 0.5, 0.0]);
        let v = dvector![1.0, 2.0];
        let w = &u * &v;
        let (gu, gv) = exact_gradients(&u, &v, &w);
        assert_eq!(gu.amax(), 0.0);
        assert_eq!(gv.amax(), 0.0);
    }

    #[test]
    fn gradient_small_example_matches_finite_differences() {
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let v = dvector![2.0];
        let w = dvector![1.0, 1.0];
        // frozen from central differences of ½‖Uv − w‖² with step 1e-6
        let (fu, fv) = finite_difference(&u, &v, &w);
        assert!((fu[(0, 0)] - 2.0).abs() < 1e-6 && (fu[(1, 0)] + 2.0).abs() < 1e-6);
        assert!((fv[0] - 1.0).abs() < 1e-6);
        let (gu, gv) = exact_gradients(&u, &v, &w);
        assert_eq!(gu, DMatrix::from_column_slice(2, 1, &[2.0, -2.0]));
        assert_eq!(gv, dvector![1.0]);
    }

    #[test]
    fn gradients_match_finite_differences_on_random_inputs() {
        let mut rng = seeded_rng(11);
        for _ in 0..20 {
            let u = DMatrix::from_fn(5, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (gu, gv) = exact_gradients(&u, &v, &w);
            let (fu, fv) = finite_difference(&u, &v, &w);
            assert!((&gu - &fu).norm() <= 1e-6 * gu.norm().max(1.0));
            assert!((&gv - &fv).norm() <= 1e-6 * gv.norm().max(1.0));
        }
    }

    #[test]
    fn init_on_first_task_is_full_gaussian() {
        // Entry variance of σ·G over many seeds, σ = 1.
        let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0.0);
        for seed in 0..10_000u64 {
            let mut s = FeatureState::new(3, 2);
            let mut rng = seeded_rng(seed);
            s.init_task(1.0, &mut rng);
            for x in s.u.iter() {
                sum += x;
                sum_sq += x * x;
                n += 1.0;
            }
        }
        let var = sum_sq / n - (sum / n).powi(2);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn init_respects_committed_column_space() {
        let d = 4;
        let mut s = FeatureState::new(d, 2);
        s.col_space = orthonormal_basis(d, &[dvector![1.0, 0.0, 0.0, 0.0]], 1e-10).unwrap();
        let mut rng = seeded_rng(3);
        s.init_task(1.0, &mut rng);
        for j in 0..2 {
            assert!(s.u[(0, j)].abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_sigma_init_is_a_no_op() {
        let mut s = FeatureState::new(3, 2);
        s.u[(1, 1)] = 0.7;
        let before = s.u.clone();
        let v = s.init_task(0.0, &mut seeded_rng(1));
        assert_eq!(s.u, before);
        assert_eq!(v, DVector::zeros(2));
    }

    #[test]
    fn step_at_optimum_changes_nothing() {
        let mut s = FeatureState::new(3, 2);
        s.u = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.0, 2.0, -1.0, 0.0]);
        let mut v = dvector![0.5, -0.25];
        let w = &s.u * &v;
        let (u0, v0) = (s.u.clone(), v.clone());
        s.dpgrad_step(&mut v, &w, 0.1);
        assert_eq!(s.u, u0);
        assert_eq!(v, v0);
    }

    #[test]
    fn first_task_step_is_plain_gradient_descent() {
        let mut s = FeatureState::new(3, 2);
        s.u = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let mut v = dvector![0.7, -0.2];
        let w = dvector![1.0, 0.0, -1.0];
        let (gu, gv) = exact_gradients(&s.u, &v, &w);
        let expect_u = &s.u - 0.05 * gu;
        let expect_v = &v - 0.05 * gv;
        s.dpgrad_step(&mut v, &w, 0.05);
        assert!((s.u - expect_u).amax() < 1e-15);
        assert!((v - expect_v).amax() < 1e-15);
    }

    #[test]
    fn step_preserves_committed_prediction() {
        let h = practical(6, 2, 2);
        let mut s = FeatureState::new(6, 2);
        let mut rng = seeded_rng(5);
        let w1 = dvector![0.5, 0.25, 0.0, 0.0, 0.0, 0.0];
        let out = s.run_task(&w1, &h, &mut rng).unwrap();
        assert!(out.converged && out.augmented);
        let v1 = s.prompts[0].clone();
        let w2 = dvector![0.0, 0.0, 0.75, -0.5, 0.0, 0.0];
        let mut v = s.init_task(0.5, &mut rng);
        for _ in 0..50 {
            let before = &s.u * &v1;
            s.dpgrad_step(&mut v, &w2, 0.05);
            assert!((&s.u * &v1 - before).norm() <= 1e-10);
        }
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_to_grid(&dvector![0.7, -0.3], 0.5), dvector![0.5, -0.5]);
        assert!((round_to_grid(&dvector![0.26], 0.1)[0] - 0.3).abs() < 1e-15);
        assert_eq!(round_to_grid(&dvector![0.25], 0.5), dvector![0.5]);
        assert_eq!(round_to_grid(&dvector![-0.25], 0.5), dvector![-0.5]);
    }

    #[test]
    fn finalize_without_new_direction_keeps_committed_u() {
        let h = practical(4, 2, 2);
        let mut s = FeatureState::new(4, 2);
        let mut rng = seeded_rng(9);
        let w1 = dvector![1.0, 0.0, 0.0, 0.0];
        s.run_task(&w1, &h, &mut rng).unwrap();
        let committed = s.u.clone();
        // w already in span: no augmentation and the projection drops the new noise.
        let mut v = s.init_task(h.sigma, &mut rng);
        for _ in 0..10 {
            s.dpgrad_step(&mut v, &w1, h.eta);
        }
        let grew = s.finalize_task(&v, &w1, h.big_d).unwrap();
        assert!(!grew);
        assert!((&s.u - committed).amax() < 1e-12);
        assert_eq!(s.col_space.dim(), 1);
    }

    #[test]
    fn finalize_threshold() {
        let big_d = 2.0;
        let mut s = FeatureState::new(3, 2);
        let w_hat = dvector![0.9 / big_d, 0.0, 0.0];
        assert!(!s.finalize_task(&dvector![1.0, 0.0], &w_hat, big_d).unwrap());
        assert!(s.col_space.is_empty());
        let w_hat = dvector![1.0 / big_d, 0.0, 0.0];
        assert!(s.finalize_task(&dvector![1.0, 0.0], &w_hat, big_d).unwrap());
        assert_eq!(s.col_space.dim(), 1);
    }

    #[test]
    fn finalize_rejects_rank_overflow() {
        let mut s = FeatureState::new(3, 1);
        s.finalize_task(&dvector![1.0], &dvector![1.0, 0.0, 0.0], 2.0).unwrap();
        let err = s.finalize_task(&dvector![1.0], &dvector![0.0, 1.0, 0.0], 2.0);
        assert!(matches!(err, Err(Error::RankExceeded { r: 1 })));
    }

    #[test]
    fn single_task_run_is_rank_one_and_exact() {
        let h = practical(4, 2, 1);
        let mut s = FeatureState::new(4, 2);
        let w = dvector![1.0, 0.0, 0.0, 0.0];
        let out = s.run_task(&w, &h, &mut seeded_rng(7)).unwrap();
        assert!(out.converged);
        assert!(out.final_loss <= h.stop_target);
        assert_eq!(out.w_hat, w);
        assert!(out.recovered_exact && out.augmented);
        assert_eq!(s.col_space.dim(), 1);
        let sv = s.u.singular_values();
        let (lo, hi) = nonzero_singular_bounds(&s.u, 1e-8).unwrap();
        assert_eq!(sv.iter().filter(|&&x| x > 1e-8 * hi).count(), 1);
        assert!((lo - hi).abs() < 1e-12);
    }

    #[test]
    fn zero_target_converges_immediately() {
        let h = practical(4, 2, 1);
        let mut s = FeatureState::new(4, 2);
        let out = s.run_task(&DVector::zeros(4), &h, &mut seeded_rng(1)).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert!(!out.augmented);
        assert!(out.prompt.norm() < 0.1);
    }

    #[test]
    fn collinear_second_task_does_not_augment() {
        let h = practical(4, 2, 2);
        let mut s = FeatureState::new(4, 2);
        let mut rng = seeded_rng(2);
        let w1 = dvector![0.5, 0.25, 0.0, 0.0];
        s.run_task(&w1, &h, &mut rng).unwrap();
        let out = s.run_task(&(2.0 * &w1), &h, &mut rng).unwrap();
        assert!(out.converged && out.recovered_exact && !out.augmented);
        assert_eq!(s.col_space.dim(), 1);
        assert_eq!(s.row_space.dim(), 1);
    }

    #[test]
    fn decomposition_on_first_task_and_axis_example() {
        let u = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let w = dvector![1.0, 2.0, 0.0];
        let v = dvector![1.0, -1.0];
        let dv = decompose(&u, &w, &v, &Subspace::empty(3), &Subspace::empty(2)).unwrap();
        assert_eq!(dv.w_a, DVector::zeros(3));
        assert_eq!(dv.w_b, w);
        assert_eq!(dv.u_a, DMatrix::zeros(3, 2));
        assert_eq!(dv.v_1, DVector::zeros(2));

        let col = orthonormal_basis(3, &[dvector![1.0, 0.0, 0.0]], 1e-10).unwrap();
        let dv = decompose(&u, &w, &v, &col, &Subspace::empty(2)).unwrap();
        assert_eq!(dv.w_a, dvector![1.0, 0.0, 0.0]);
        assert_eq!(dv.w_b, dvector![0.0, 2.0, 0.0]);
    }

    #[test]
    fn components_vanish_when_existing_part_fits() {
        let u = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let col = orthonormal_basis(3, &[dvector![1.0, 0.0, 0.0]], 1e-10).unwrap();
        let row = orthonormal_basis(2, &[dvector![1.0, 0.0]], 1e-10).unwrap();
        let w = dvector![1.0, 0.0, 0.0];
        let v = dvector![0.5, 0.0];
        let c = loss_components(&decompose(&u, &w, &v, &col, &row).unwrap());
        assert_eq!(c.existing, 0.0);
        assert_eq!(c.total(), 0.0);
    }

    #[test]
    fn components_sum_to_direct_loss_mid_training() {
        let h = practical(6, 2, 2);
        let mut s = FeatureState::new(6, 2);
        let mut rng = seeded_rng(21);
        let w1 = dvector![0.5, 0.0, 0.25, 0.0, 0.0, 0.0];
        s.run_task(&w1, &h, &mut rng).unwrap();
        let w2 = dvector![0.5, 0.0, 0.25, 0.75, 0.0, -0.5];
        let mut v = s.init_task(h.sigma, &mut rng);
        for t in 0..3000 {
            s.dpgrad_step(&mut v, &w2, h.eta);
            if t % 300 == 0 {
                let dv = decompose(&s.u, &w2, &v, &s.col_space, &s.row_space).unwrap();
                let direct = loss(&s.u, &v, &w2);
                let c = loss_components(&dv);
                assert!((c.total() - direct).abs() <= 1e-9 * direct + 1e-20, "{t} {c:?} {direct}");
                let rebuilt = &dv.u_a + &dv.w_b * dv.x.transpose() + &dv.u_2;
                assert!((rebuilt - &s.u).amax() <= 1e-10);
                let cross = dv.u_2.tr_mul(&dv.w_b);
                assert!(cross.amax() <= 1e-8 * dv.w_b.norm() * (1.0 + dv.u_2.norm()));
            }
        }
    }

    #[test]
    fn hyperparam_validation() {
        let mut h = practical(4, 2, 1);
        assert!(h.validate().is_ok());
        h.epsilon = 0.5;
        assert!(h.validate().is_err());
        let mut h = practical(4, 2, 1);
        h.eta = 0.0;
        assert!(h.validate().is_err());
        assert!(ProblemDims::new(3, 4, 1).is_err());
    }

    #[test]
    fn theory_schedule_is_tiny() {
        let dims = ProblemDims::new(16, 4, 8).unwrap();
        let h = Hyperparams::theory(dims, 1e-3, 1.0 / 64.0, 2.0);
        assert!(h.sigma < 1e-6 && h.eta < h.sigma.powi(3));
        assert!(h.t_max > 1_000_000);
        assert!(h.validate().is_ok());
    }
}

//! Synthetic continual-learning instances and sampled data.
//!
//! Instances are built from `r` base vectors with disjoint coordinate
//! supports, each on the ν-grid, so they are exactly orthogonal and every
//! integer combination stays on the grid. A task flagged novel introduces the
//! next base with coefficient ±1; its component orthogonal to earlier tasks is
//! exactly that base.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::factorization::ProblemDims;
use crate::{seeded_rng, Error, Result, Rng};

const MAX_ATTEMPTS: usize = 1000;

/// A continual-learning instance: the targets `w_1..w_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub dims: ProblemDims,
    pub big_d: f64,
    pub nu: f64,
    pub w_list: Vec<DVector<f64>>,
    pub novel_flags: Vec<bool>,
    /// Seed the instance was generated from, if any.
    pub seed: Option<u64>,
}

impl GroundTruth {
    /// Assembles an instance from explicit targets. Shapes are checked; the
    /// modelling assumptions are not (see [`validate_instance`]).
    pub fn from_targets(
        dims: ProblemDims,
        big_d: f64,
        nu: f64,
        w_list: Vec<DVector<f64>>,
        novel_flags: Vec<bool>,
    ) -> Result<Self> {
        if w_list.len() != dims.k || novel_flags.len() != dims.k {
            return Err(Error::InvalidParameter(format!(
                "expected {} targets and flags, got {} and {}",
                dims.k,
                w_list.len(),
                novel_flags.len()
            )));
        }
        if let Some(w) = w_list.iter().find(|w| w.len() != dims.d) {
            return Err(Error::DimensionMismatch {
                expected: dims.d,
                found: w.len(),
            });
        }
        Ok(Self {
            dims,
            big_d,
            nu,
            w_list,
            novel_flags,
            seed: None,
        })
    }

    /// `[w_1 … w_k]` as a `d x k` matrix.
    pub fn target_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.w_list)
    }
}

fn check_generator_params(dims: ProblemDims, big_d: f64, nu: f64, schedule: &[bool]) -> Result<()> {
    dims.validate()?;
    if schedule.len() != dims.k {
        return Err(Error::InvalidParameter(format!(
            "novel schedule has length {}, expected k = {}",
            schedule.len(),
            dims.k
        )));
    }
    let novel = schedule.iter().filter(|&&b| b).count();
    if novel > dims.r {
        return Err(Error::Infeasible(format!(
            "{novel} novel tasks requested but feature dimension r = {}",
            dims.r
        )));
    }
    if !(big_d >= 1.0 && big_d.is_finite()) {
        return Err(Error::Infeasible(format!(
            "D must be at least 1 so that [1/D, D] is non-empty, got {big_d}"
        )));
    }
    let max_nu = 1.0 / (2.0 * big_d * (dims.d as f64).sqrt());
    if !(nu > 0.0 && nu <= max_nu) {
        return Err(Error::Infeasible(format!(
            "nu must lie in (0, 1/(2D√d)] = (0, {max_nu}], got {nu}"
        )));
    }
    Ok(())
}

/// Builds an instance satisfying the range, signal, grid and rank
/// conditions exactly. `novel_schedule[i]` says whether task `i` brings a new
/// direction.
pub fn generate_instance(
    dims: ProblemDims,
    big_d: f64,
    nu: f64,
    novel_schedule: &[bool],
    rng: &mut Rng,
) -> Result<GroundTruth> {
    check_generator_params(dims, big_d, nu, novel_schedule)?;
    let (d, r) = (dims.d, dims.r);
    let novel_count = novel_schedule.iter().filter(|&&b| b).count().max(1);

    // Disjoint supports: a shuffled partition of the coordinates into r blocks.
    let mut coords: Vec<usize> = (0..d).collect();
    coords.shuffle(rng);
    let supports: Vec<Vec<usize>> = (0..r)
        .map(|j| coords[j * d / r..(j + 1) * d / r].to_vec())
        .collect();

    // With base norms at most D/√(novel_count) and coefficients in {-1, 0, 1},
    // every combination has norm at most D.
    let lo = 1.0 / big_d;
    let hi = (big_d / (novel_count as f64).sqrt()).max(lo);

    let mut bases: Vec<DVector<f64>> = Vec::new();
    let mut w_list = Vec::with_capacity(dims.k);
    for &novel in novel_schedule {
        let w = 'attempts: {
            for _ in 0..MAX_ATTEMPTS {
                let mut coeffs: Vec<i64> = (0..bases.len()).map(|_| rng.random_range(-1..=1)).collect();
                let mut fresh = None;
                if novel {
                    let base = grid_base(&supports[bases.len()], d, lo, hi, big_d, nu, rng)?;
                    coeffs.push(if rng.random_bool(0.5) { 1 } else { -1 });
                    fresh = Some(base);
                } else if !bases.is_empty() && coeffs.iter().all(|&c| c == 0) {
                    continue;
                }
                let mut w = DVector::zeros(d);
                for (c, b) in coeffs.iter().zip(bases.iter().chain(fresh.iter())) {
                    w.axpy(*c as f64, b, 1.0);
                }
                if w.norm() <= big_d {
                    if let Some(b) = fresh {
                        bases.push(b);
                    }
                    break 'attempts w;
                }
            }
            return Err(Error::Infeasible(format!(
                "could not draw a target within the norm budget D = {big_d} after {MAX_ATTEMPTS} attempts"
            )));
        };
        w_list.push(w);
    }
    GroundTruth::from_targets(dims, big_d, nu, w_list, novel_schedule.to_vec())
}

/// [`generate_instance`] with a fresh generator from `seed`; the seed is
/// recorded in the instance.
pub fn generate_instance_seeded(
    dims: ProblemDims,
    big_d: f64,
    nu: f64,
    novel_schedule: &[bool],
    seed: u64,
) -> Result<GroundTruth> {
    let mut gt = generate_instance(dims, big_d, nu, novel_schedule, &mut seeded_rng(seed))?;
    gt.seed = Some(seed);
    Ok(gt)
}

/// A random vector supported on `support`, with coordinates on the ν-grid and
/// norm within `[1/D, D]`, aimed at a norm drawn from `[lo, hi]`.
fn grid_base(
    support: &[usize],
    d: usize,
    lo: f64,
    hi: f64,
    big_d: f64,
    nu: f64,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    for _ in 0..MAX_ATTEMPTS {
        let target = lo + (hi - lo) * rng.random::<f64>();
        let mut b = DVector::zeros(d);
        for &i in support {
            b[i] = rng.sample::<f64, _>(StandardNormal);
        }
        let n = b.norm();
        if n == 0.0 {
            continue;
        }
        b *= target / n;
        let b = b.map(|c| (c / nu).round() * nu);
        let n = b.norm();
        if n >= 1.0 / big_d && n <= hi.min(big_d) {
            return Ok(b);
        }
    }
    Err(Error::Infeasible(
        "could not place a base vector on the grid within the norm window".into(),
    ))
}

/// Two orthogonal unit-norm targets `w_1 = e_1`, `w_2 = e_2` with both tasks
/// flagged novel. With `r = 1` this violates rank-`r` realizability on
/// purpose: it is the instance on which fine-tuning has to overwrite.
pub fn orthogonal_pair(d: usize, r: usize, big_d: f64, nu: f64) -> Result<GroundTruth> {
    let dims = ProblemDims::new(d, r, 2)?;
    if d < 2 {
        return Err(Error::InvalidParameter("orthogonal pair needs d >= 2".into()));
    }
    let mut w1 = DVector::zeros(d);
    let mut w2 = DVector::zeros(d);
    w1[0] = 1.0;
    w2[1] = 1.0;
    GroundTruth::from_targets(dims, big_d, nu, vec![w1, w2], vec![true, true])
}

/// Outcome of re-checking an instance from its raw numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Inputs are drawn standard normal by [`sample_batch`]: zero mean and
    /// identity covariance by construction.
    pub isotropic_inputs: bool,
    pub norms_bounded: bool,
    pub signal_condition: bool,
    pub flags_consistent: bool,
    pub on_grid: bool,
    pub rank_within_r: bool,
    pub rank: usize,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.isotropic_inputs
            && self.norms_bounded
            && self.signal_condition
            && self.flags_consistent
            && self.on_grid
            && self.rank_within_r
    }
}

/// Checks every modelling assumption directly from `w_list`, using SVD-based
/// least squares rather than the generator's bases.
pub fn validate_instance(gt: &GroundTruth) -> ValidationReport {
    const TOL: f64 = 1e-9;
    let mut problems = Vec::new();
    let (big_d, nu) = (gt.big_d, gt.nu);

    let mut norms_bounded = true;
    let mut on_grid = true;
    for (i, w) in gt.w_list.iter().enumerate() {
        if w.norm() > big_d + TOL {
            norms_bounded = false;
            problems.push(format!("task {i}: norm {} exceeds D = {big_d}", w.norm()));
        }
        if w.iter().any(|c| ((c / nu) - (c / nu).round()).abs() > TOL) {
            on_grid = false;
            problems.push(format!("task {i}: coordinate off the nu-grid"));
        }
    }

    let mut signal_condition = true;
    let mut flags_consistent = true;
    for (i, w) in gt.w_list.iter().enumerate() {
        let orth = if i == 0 {
            w.norm()
        } else {
            let prev = DMatrix::from_columns(&gt.w_list[..i]);
            let svd = prev.clone().svd(true, true);
            let coef = svd
                .solve(w, 1e-12)
                .expect("svd computed with both factors");
            (w - &prev * coef).norm()
        };
        let zero = orth <= TOL;
        let in_window = orth >= 1.0 / big_d - TOL && orth <= big_d + TOL;
        if !(zero || in_window) {
            signal_condition = false;
            problems.push(format!(
                "task {i}: orthogonal component {orth} is neither 0 nor in [1/D, D]"
            ));
        }
        if gt.novel_flags.get(i).copied() != Some(!zero) {
            flags_consistent = false;
            problems.push(format!("task {i}: novel flag disagrees with the data"));
        }
    }

    let m = gt.target_matrix();
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0_f64, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-10 * top.max(1.0)).count();
    let rank_within_r = rank <= gt.dims.r;
    if !rank_within_r {
        problems.push(format!("rank {rank} exceeds r = {}", gt.dims.r));
    }

    ValidationReport {
        isotropic_inputs: true,
        norms_bounded,
        signal_condition,
        flags_consistent,
        on_grid,
        rank_within_r,
        rank,
        problems,
    }
}

/// Samples for one task; column `j` of `xs` is input `x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub task: usize,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// `n` standard normal inputs with exact labels `y = ⟨w_task, x⟩`.
/// `task` is zero-based.
pub fn sample_batch(gt: &GroundTruth, task: usize, n: usize, rng: &mut Rng) -> Result<SampleBatch> {
    let w = gt.w_list.get(task).ok_or_else(|| {
        Error::InvalidParameter(format!("task {task} out of range for k = {}", gt.dims.k))
    })?;
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    let xs = DMatrix::from_fn(gt.dims.d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ys = xs.tr_mul(w);
    Ok(SampleBatch { xs, ys, task })
}

/// Sample-average gradients of `½(xᵀUv − y)²`:
/// `(1/n) Σ x_j s_j vᵀ` and `(1/n) Σ Uᵀ x_j s_j`, with `s_j = x_jᵀUv − y_j`.
pub fn empirical_gradients(
    batch: &SampleBatch,
    u: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if u.nrows() != batch.xs.nrows() {
        return Err(Error::DimensionMismatch {
            expected: batch.xs.nrows(),
            found: u.nrows(),
        });
    }
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let g = mean_weighted_input(batch, &(u * v));
    Ok((&g * v.transpose(), u.tr_mul(&g)))
}

/// `(1/n) Σ x_j (x_jᵀ a − y_j)`.
fn mean_weighted_input(batch: &SampleBatch, a: &DVector<f64>) -> DVector<f64> {
    let s = batch.xs.tr_mul(a) - &batch.ys;
    &batch.xs * s / batch.len() as f64
}

/// Sample mean of `½(xᵀUv − y)²`.
pub fn empirical_loss(batch: &SampleBatch, u: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let s = batch.xs.tr_mul(&(u * v)) - &batch.ys;
    0.5 * s.norm_squared() / batch.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::exact_gradients;
    use nalgebra::dvector;

    fn dims(d: usize, r: usize, k: usize) -> ProblemDims {
        ProblemDims::new(d, r, k).unwrap()
    }

    #[test]
    fn single_task_instances_satisfy_assumptions() {
        for seed in 0..100 {
            let gt = generate_instance_seeded(dims(4, 1, 1), 2.0, 1.0 / 64.0, &[true], seed).unwrap();
            let n = gt.w_list[0].norm();
            assert!((0.5..=2.0).contains(&n), "norm {n}");
            for c in gt.w_list[0].iter() {
                assert_eq!((c * 64.0).fract(), 0.0);
            }
            assert!(validate_instance(&gt).passed());
        }
    }

    #[test]
    fn reused_direction_is_collinear() {
        for seed in 0..20 {
            let gt = generate_instance_seeded(dims(8, 2, 2), 2.0, 1.0 / 64.0, &[true, false], seed).unwrap();
            let (w1, w2) = (&gt.w_list[0], &gt.w_list[1]);
            assert!(w2 == w1 || *w2 == -w1);
            let report = validate_instance(&gt);
            assert!(report.passed(), "{:?}", report.problems);
        }
    }

    #[test]
    fn too_many_novel_tasks_rejected() {
        let r = generate_instance_seeded(dims(8, 2, 3), 2.0, 1.0 / 64.0, &[true, true, true], 0);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn coarse_grid_rejected() {
        let r = generate_instance_seeded(dims(16, 2, 1), 2.0, 0.1, &[true], 0);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn headline_instances_validate() {
        let schedule = [true, false, true, false, true, false, true, false];
        for seed in 0..50 {
            let gt = generate_instance_seeded(dims(16, 4, 8), 2.0, 1.0 / 64.0, &schedule, seed).unwrap();
            let report = validate_instance(&gt);
            assert!(report.passed(), "seed {seed}: {:?}", report.problems);
            assert_eq!(report.rank, 4);
        }
    }

    #[test]
    fn validator_catches_violations() {
        let d = dims(3, 1, 2);
        let gt = GroundTruth::from_targets(
            d,
            2.0,
            0.25,
            vec![dvector![1.0, 0.0, 0.0], dvector![0.0, 0.1, 0.0]],
            vec![true, true],
        )
        .unwrap();
        let rep = validate_instance(&gt);
        assert!(!rep.on_grid && !rep.signal_condition && !rep.rank_within_r);
        assert!(!rep.passed());
        let pair = orthogonal_pair(4, 1, 2.0, 1.0 / 64.0).unwrap();
        assert!(!validate_instance(&pair).rank_within_r);
        assert!(validate_instance(&orthogonal_pair(4, 2, 2.0, 1.0 / 64.0).unwrap()).passed());
    }

    #[test]
    fn sample_moments() {
        let gt = generate_instance_seeded(dims(4, 1, 1), 2.0, 1.0 / 64.0, &[true], 1).unwrap();
        let n = 100_000;
        let b = sample_batch(&gt, 0, n, &mut seeded_rng(4)).unwrap();
        for i in 0..4 {
            let row = b.xs.row(i);
            let mean = row.sum() / n as f64;
            assert!(mean.abs() <= 3.0 / (n as f64).sqrt());
            let var = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05);
        }
        assert_eq!(b.ys, b.xs.tr_mul(&gt.w_list[0]));
    }

    #[test]
    fn zero_target_gives_zero_labels() {
        let gt = GroundTruth::from_targets(dims(3, 1, 1), 2.0, 0.25, vec![DVector::zeros(3)], vec![false]).unwrap();
        let b = sample_batch(&gt, 0, 100, &mut seeded_rng(0)).unwrap();
        assert!(b.ys.iter().all(|&y| y == 0.0));
        assert!(sample_batch(&gt, 1, 10, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn empirical_gradient_vanishes_at_exact_fit() {
        let w = dvector![0.5, -0.25, 0.0];
        let gt = GroundTruth::from_targets(dims(3, 1, 1), 2.0, 0.25, vec![w.clone()], vec![true]).unwrap();
        let b = sample_batch(&gt, 0, 500, &mut seeded_rng(8)).unwrap();
        let u = DMatrix::from_column_slice(3, 1, &[1.0, -0.5, 0.0]);
        let v = dvector![0.5];
        let (gu, gv) = empirical_gradients(&b, &u, &v).unwrap();
        assert!(gu.amax() < 1e-15 && gv.amax() < 1e-15);
    }

    #[test]
    fn single_sample_on_axis() {
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
        let v = dvector![0.5, 0.25];
        let w = dvector![0.25, 1.0, -1.0];
        let batch = SampleBatch {
            xs: DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]),
            ys: dvector![w[0]],
            task: 0,
        };
        let (gu, _) = empirical_gradients(&batch, &u, &v).unwrap();
        let s = u.row(0).dot(&v.transpose()) - w[0];
        let mut expect = DMatrix::zeros(3, 2);
        expect.set_row(0, &(s * v.transpose()));
        assert!((gu - expect).amax() < 1e-15);
    }

    #[test]
    fn empirical_gradient_close_to_exact_at_scale() {
        let mut rng = seeded_rng(17);
        let d = 8;
        let u = DMatrix::from_fn(d, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gt = GroundTruth::from_targets(dims(d, 2, 1), 10.0, 1e-3, vec![w.clone()], vec![true]).unwrap();
        let b = sample_batch(&gt, 0, 1_000_000, &mut rng).unwrap();
        let (gu, gv) = empirical_gradients(&b, &u, &v).unwrap();
        let (eu, ev) = exact_gradients(&u, &v, &w);
        assert!((gu - &eu).norm() / eu.norm() < 0.01);
        assert!((gv - &ev).norm() / ev.norm() < 0.01);
    }
}

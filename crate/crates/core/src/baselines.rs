//! Naive fine-tuning: the DPGrad task loop with both projectors replaced by
//! the identity and no subspace bookkeeping. Earlier prompts stay frozen, but
//! nothing stops `U` from drifting under them.

use nalgebra::DVector;

use crate::environments::GroundTruth;
use crate::factorization::{
    round_to_grid, same_grid_point, FeatureState, Hyperparams, IterView, TaskObserver, TaskOutcome,
};
use crate::learner::{drive, Method, RunReport, SnapshotCadence};
use crate::{Error, Result, Rng};

/// Runs naive fine-tuning over all tasks of `gt`, with the same report
/// schema as [`crate::learner::run_continual`].
pub fn run_naive(
    gt: &GroundTruth,
    h: &Hyperparams,
    rng: &mut Rng,
    cadence: SnapshotCadence,
) -> Result<(FeatureState, RunReport)> {
    h.validate()?;
    drive(gt, h, rng, cadence, Method::Naive, |s, w, h, r, o| {
        naive_task(s, w, h, r, o)
    })
}

/// One task of unprojected gradient descent on `(U, v)`. The state's
/// subspaces stay empty, so `init_task` and `apply_step` act with identity
/// projectors.
pub fn naive_task<O: TaskObserver>(
    state: &mut FeatureState,
    w: &DVector<f64>,
    h: &Hyperparams,
    rng: &mut Rng,
    observer: &mut O,
) -> Result<TaskOutcome> {
    if w.len() != state.d() {
        return Err(Error::DimensionMismatch {
            expected: state.d(),
            found: w.len(),
        });
    }
    debug_assert!(state.col_space.is_empty() && state.row_space.is_empty());
    let mut v = state.init_task(h.sigma, rng);
    let mut iter = 0usize;
    let final_loss = loop {
        let residual = &state.u * &v - w;
        let loss = 0.5 * residual.norm_squared();
        let done = loss <= h.stop_target || iter >= h.t_max;
        observer.observe(IterView {
            iter,
            state,
            v: &v,
            w,
            loss,
            done,
        });
        if done {
            break loss;
        }
        state.apply_step(&mut v, &residual, h.eta);
        iter += 1;
    };
    let w_hat = round_to_grid(&(&state.u * &v), h.nu);
    let recovered_exact = same_grid_point(&w_hat, w, h.nu);
    state.prompts.push(v.clone());
    state.task_index += 1;
    Ok(TaskOutcome {
        iterations: iter,
        converged: final_loss <= h.stop_target,
        final_loss,
        prompt: v,
        w_hat,
        recovered_exact,
        augmented: false,
    })
}

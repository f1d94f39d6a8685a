//! The k-task driver: runs tasks in order, records per-iteration snapshots
//! and per-task summaries, and measures forgetting.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::environments::GroundTruth;
use crate::factorization::{
    decompose, loss, loss_components, project_both, FeatureState, Hyperparams, IterView, TaskObserver,
    TaskOutcome,
};
use crate::linalg::{nonzero_singular_bounds, spectral_norm, Subspace, DEFAULT_RANK_TOL};
use crate::{Result, Rng};

/// How often iterations are recorded. The final iterate of a task is always
/// recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotCadence {
    /// Every iteration when `d·k·r ≤ 10⁵`, otherwise every 100.
    Auto,
    Every(usize),
}

impl SnapshotCadence {
    pub fn interval(&self, gt: &GroundTruth) -> usize {
        match *self {
            SnapshotCadence::Every(n) => n.max(1),
            SnapshotCadence::Auto => {
                let cost = gt.dims.d * gt.dims.k * gt.dims.r;
                if cost <= 100_000 {
                    1
                } else {
                    100
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpgrad,
    Naive,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Dpgrad => "dpgrad",
            Method::Naive => "naive",
        }
    }
}

/// One recorded iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iter: usize,
    /// `½‖U v_i − w_i‖²`.
    pub loss_current: f64,
    /// `max_{j<i} ½‖U v_j − w_j‖²` (0 on the first task).
    pub max_prev_loss: f64,
    pub l_existing: f64,
    pub l_signal: f64,
    pub l_noise: f64,
    /// Nonzero singular-value bounds of the committed block `P_W U P_V`;
    /// `None` while nothing is committed.
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    /// `σ_max(U_2)`, the spectral norm of the noise block.
    pub noise_sigma_max: f64,
    /// `max_{j<i} |loss_j(now) − loss_j(end of task j)|`.
    pub prev_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub iterations: usize,
    pub converged: bool,
    pub recovered_exact: bool,
    pub augmented: bool,
    /// `½‖U v_j − w_j‖²` for every `j ≤ i` after this task was finalized.
    pub final_losses: Vec<f64>,
    /// Singular-value bounds of `U` after finalization, `None` if `U = 0`.
    pub end_sigma_min: Option<f64>,
    pub end_sigma_max: Option<f64>,
    pub committed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub snapshots: Vec<Snapshot>,
    /// Largest loss seen on each earlier task during this task.
    pub prev_loss_peaks: Vec<f64>,
    pub summary: TaskSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub stop_target: f64,
    pub epsilon: f64,
    pub tasks: Vec<TaskRecord>,
}

impl RunReport {
    pub fn all_converged(&self) -> bool {
        self.tasks.iter().all(|t| t.summary.converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingProfile {
    pub max_forgetting: f64,
    pub per_task: Vec<f64>,
}

/// Worst previous-task loss over the whole run, overall and per task.
pub fn forgetting_profile(report: &RunReport) -> ForgettingProfile {
    let k = report.tasks.len();
    let mut per_task = vec![0.0_f64; k];
    let mut max_forgetting = 0.0_f64;
    for (i, rec) in report.tasks.iter().enumerate() {
        for s in &rec.snapshots {
            max_forgetting = max_forgetting.max(s.max_prev_loss);
        }
        for (j, &peak) in rec.prev_loss_peaks.iter().enumerate() {
            per_task[j] = per_task[j].max(peak);
        }
        for (j, &l) in rec.summary.final_losses.iter().enumerate().take(i + 1) {
            per_task[j] = per_task[j].max(l);
        }
    }
    ForgettingProfile {
        max_forgetting,
        per_task,
    }
}

/// Runs DPGrad over all tasks of `gt` on a fresh state. Non-converged tasks
/// are recorded and the run continues.
pub fn run_continual(
    gt: &GroundTruth,
    h: &Hyperparams,
    rng: &mut Rng,
    cadence: SnapshotCadence,
) -> Result<(FeatureState, RunReport)> {
    h.validate()?;
    drive(gt, h, rng, cadence, Method::Dpgrad, |state, w, h, rng, obs| {
        state.run_task_observed(w, h, rng, obs)
    })
}

/// Shared task loop for every method. `run_one` trains one task and
/// finalizes it (committing its prompt to `state.prompts`).
pub(crate) fn drive<F>(
    gt: &GroundTruth,
    h: &Hyperparams,
    rng: &mut Rng,
    cadence: SnapshotCadence,
    method: Method,
    mut run_one: F,
) -> Result<(FeatureState, RunReport)>
where
    F: FnMut(&mut FeatureState, &DVector<f64>, &Hyperparams, &mut Rng, &mut Recorder<'_>) -> Result<TaskOutcome>,
{
    let mut state = FeatureState::new(gt.dims.d, gt.dims.r);
    let interval = cadence.interval(gt);
    let mut end_losses: Vec<f64> = Vec::with_capacity(gt.dims.k);
    let mut tasks = Vec::with_capacity(gt.dims.k);

    for (i, w) in gt.w_list.iter().enumerate() {
        let committed = committed_bounds(&state.u, &state.col_space, &state.row_space);
        let mut recorder = Recorder {
            targets: &gt.w_list[..i],
            end_losses: &end_losses,
            interval,
            committed,
            snapshots: Vec::new(),
            peaks: vec![0.0; i],
        };
        let outcome = run_one(&mut state, w, h, rng, &mut recorder)?;
        let Recorder { snapshots, peaks, .. } = recorder;

        let final_losses: Vec<f64> = (0..=i)
            .map(|j| loss(&state.u, &state.prompts[j], &gt.w_list[j]))
            .collect();
        end_losses.push(final_losses[i]);
        let (end_sigma_min, end_sigma_max) = match nonzero_singular_bounds(&state.u, DEFAULT_RANK_TOL) {
            Ok((lo, hi)) => (Some(lo), Some(hi)),
            Err(_) => (None, None),
        };
        tasks.push(TaskRecord {
            snapshots,
            prev_loss_peaks: peaks,
            summary: TaskSummary {
                task: i,
                iterations: outcome.iterations,
                converged: outcome.converged,
                recovered_exact: outcome.recovered_exact,
                augmented: outcome.augmented,
                final_losses,
                end_sigma_min,
                end_sigma_max,
                committed_dim: state.col_space.dim(),
            },
        });
    }
    Ok((
        state,
        RunReport {
            method,
            stop_target: h.stop_target,
            epsilon: h.epsilon,
            tasks,
        },
    ))
}

fn committed_bounds(u: &nalgebra::DMatrix<f64>, col: &Subspace, row: &Subspace) -> (Option<f64>, Option<f64>) {
    if col.is_empty() {
        return (None, None);
    }
    match nonzero_singular_bounds(&project_both(u, col, row), DEFAULT_RANK_TOL) {
        Ok((lo, hi)) => (Some(lo), Some(hi)),
        Err(_) => (None, None),
    }
}

/// Observer that turns iterates into [`Snapshot`]s.
pub(crate) struct Recorder<'a> {
    targets: &'a [DVector<f64>],
    end_losses: &'a [f64],
    interval: usize,
    /// The committed block does not change within a task.
    committed: (Option<f64>, Option<f64>),
    snapshots: Vec<Snapshot>,
    peaks: Vec<f64>,
}

impl TaskObserver for Recorder<'_> {
    fn observe(&mut self, view: IterView<'_>) {
        if !(view.done || view.iter.is_multiple_of(self.interval)) {
            return;
        }
        let state = view.state;
        let mut max_prev_loss = 0.0_f64;
        let mut prev_drift = 0.0_f64;
        for (j, w_j) in self.targets.iter().enumerate() {
            let l = loss(&state.u, &state.prompts[j], w_j);
            max_prev_loss = max_prev_loss.max(l);
            prev_drift = prev_drift.max((l - self.end_losses[j]).abs());
            self.peaks[j] = self.peaks[j].max(l);
        }
        let dv = decompose(&state.u, view.w, view.v, &state.col_space, &state.row_space)
            .expect("state shapes are consistent");
        let parts = loss_components(&dv);
        self.snapshots.push(Snapshot {
            iter: view.iter,
            loss_current: view.loss,
            max_prev_loss,
            l_existing: parts.existing,
            l_signal: parts.signal,
            l_noise: parts.noise,
            sigma_min: self.committed.0,
            sigma_max: self.committed.1,
            noise_sigma_max: spectral_norm(&dv.u_2),
            prev_drift,
        });
    }
}

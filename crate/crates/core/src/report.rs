//! On-disk formats: instance files, checkpoints, iteration traces and run
//! summaries. Every writer is a pure function of its inputs, so identical
//! runs produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::environments::GroundTruth;
use crate::factorization::{FeatureState, ProblemDims};
use crate::learner::{forgetting_profile, ForgettingProfile, Method, RunReport, TaskSummary};
use crate::linalg::Subspace;
use crate::lowerbound::{GameReport, GameSummary};
use crate::{seeded_rng, Error, Result, Rng};

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Archival form of a [`GroundTruth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub d: usize,
    pub r: usize,
    pub k: usize,
    #[serde(rename = "D")]
    pub big_d: f64,
    pub nu: f64,
    pub w_list: Vec<Vec<f64>>,
    pub novel_flags: Vec<bool>,
    pub seed: Option<u64>,
}

impl From<&GroundTruth> for InstanceFile {
    fn from(gt: &GroundTruth) -> Self {
        Self {
            d: gt.dims.d,
            r: gt.dims.r,
            k: gt.dims.k,
            big_d: gt.big_d,
            nu: gt.nu,
            w_list: gt.w_list.iter().map(|w| w.iter().copied().collect()).collect(),
            novel_flags: gt.novel_flags.clone(),
            seed: gt.seed,
        }
    }
}

impl InstanceFile {
    pub fn into_ground_truth(self) -> Result<GroundTruth> {
        let dims = ProblemDims::new(self.d, self.r, self.k)?;
        if self.w_list.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: self.w_list.len(),
            });
        }
        let w_list = self
            .w_list
            .into_iter()
            .map(|w| {
                if w.len() != self.d {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        found: w.len(),
                    });
                }
                Ok(DVector::from_vec(w))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gt = GroundTruth::from_targets(dims, self.big_d, self.nu, w_list, self.novel_flags)?;
        gt.seed = self.seed;
        Ok(gt)
    }
}

pub fn save_instance(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_json(path, &InstanceFile::from(gt))
}

pub fn load_instance(path: &Path) -> Result<GroundTruth> {
    read_json::<InstanceFile>(path)?.into_ground_truth()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointDims {
    pub d: usize,
    pub r: usize,
    pub k: usize,
}

/// Learner state between tasks, including the random stream position so a
/// resumed run continues exactly where the original left off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub dims: CheckpointDims,
    /// `U` in row-major order.
    #[serde(rename = "U")]
    pub u: Vec<f64>,
    #[serde(rename = "W_basis")]
    pub w_basis: Vec<Vec<f64>>,
    #[serde(rename = "V_basis")]
    pub v_basis: Vec<Vec<f64>>,
    pub prompts: Vec<Vec<f64>>,
    pub task_index: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

fn to_rows(vs: &[DVector<f64>]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], len: usize) -> Result<Vec<DVector<f64>>> {
    rows.iter()
        .map(|r| {
            if r.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    found: r.len(),
                });
            }
            Ok(DVector::from_column_slice(r))
        })
        .collect()
}

impl Checkpoint {
    pub fn capture(state: &FeatureState, k: usize, rng_seed: u64, rng: &Rng) -> Self {
        let (d, r) = (state.d(), state.r());
        let mut u = Vec::with_capacity(d * r);
        for i in 0..d {
            u.extend(state.u.row(i).iter().copied());
        }
        Self {
            dims: CheckpointDims { d, r, k },
            u,
            w_basis: to_rows(state.col_space.basis()),
            v_basis: to_rows(state.row_space.basis()),
            prompts: to_rows(&state.prompts),
            task_index: state.task_index,
            rng_seed,
            rng_word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<(FeatureState, Rng)> {
        let CheckpointDims { d, r, .. } = self.dims;
        if self.u.len() != d * r {
            return Err(Error::DimensionMismatch {
                expected: d * r,
                found: self.u.len(),
            });
        }
        let state = FeatureState {
            u: DMatrix::from_row_slice(d, r, &self.u),
            col_space: Subspace::from_orthonormal(d, from_rows(&self.w_basis, d)?)?,
            row_space: Subspace::from_orthonormal(r, from_rows(&self.v_basis, r)?)?,
            prompts: from_rows(&self.prompts, r)?,
            task_index: self.task_index,
        };
        let mut rng = seeded_rng(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        Ok((state, rng))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub task: usize,
    pub iter: usize,
    pub loss_current: f64,
    pub max_prev_loss: f64,
    pub l_existing: f64,
    pub l_signal: f64,
    pub l_noise: f64,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
}

pub fn trace_rows(report: &RunReport) -> Vec<TraceRow> {
    report
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(task, rec)| {
            rec.snapshots.iter().map(move |s| TraceRow {
                task,
                iter: s.iter,
                loss_current: s.loss_current,
                max_prev_loss: s.max_prev_loss,
                l_existing: s.l_existing,
                l_signal: s.l_signal,
                l_noise: s.l_noise,
                sigma_min: s.sigma_min,
                sigma_max: s.sigma_max,
            })
        })
        .collect()
}

/// Trace CSV: a `# config <json>` line, the header, then one row per
/// snapshot. Missing singular values are empty fields.
pub fn write_trace<W: Write>(out: W, config: &Value, report: &RunReport) -> Result<()> {
    let mut out = out;
    writeln!(out, "# config {}", serde_json::to_string(config)?)?;
    let mut w = csv::Writer::from_writer(out);
    for row in trace_rows(report) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?)
}

/// End-of-run summary. Wall-clock time is kept out of this file so reruns
/// compare byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: Value,
    pub seed: u64,
    pub method: Method,
    pub epsilon: f64,
    pub stop_target: f64,
    pub all_converged: bool,
    pub all_recovered: bool,
    pub tasks: Vec<TaskSummary>,
    pub forgetting: ForgettingProfile,
    /// Largest change of any earlier task's loss within a later task.
    pub max_prev_drift: f64,
}

impl RunSummary {
    pub fn new(config: Value, seed: u64, report: &RunReport) -> Self {
        Self {
            config,
            seed,
            method: report.method,
            epsilon: report.epsilon,
            stop_target: report.stop_target,
            all_converged: report.all_converged(),
            all_recovered: report.tasks.iter().all(|t| t.summary.recovered_exact),
            tasks: report.tasks.iter().map(|t| t.summary.clone()).collect(),
            forgetting: forgetting_profile(report),
            max_prev_drift: report
                .tasks
                .iter()
                .flat_map(|t| t.snapshots.iter().map(|s| s.prev_drift))
                .fold(0.0, f64::max),
        }
    }

    /// Converged everywhere and forgot at most ε.
    pub fn success(&self) -> bool {
        self.all_converged && self.forgetting.max_forgetting <= self.epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameFile {
    pub config: Value,
    pub summary: GameSummary,
    pub reports: Vec<GameReport>,
}

/// One-line description of a game summary.
pub fn game_summary_line(s: &GameSummary) -> String {
    format!(
        "min adversary value {:.6e} at v1=({}, {}) over {} points; bar {:.3e}: {}; witnesses {}; coefficient bound checked at {} low-loss points, max deviation {:.4}, violations {}",
        s.min_adversary_value,
        s.argmin_v1[0],
        s.argmin_v1[1],
        s.points,
        s.epsilon_bar,
        if s.all_exceed { "exceeded everywhere" } else { "NOT exceeded everywhere" },
        if s.witnesses_exact { "exact" } else { "NOT exact" },
        s.low_loss_checked,
        s.max_low_loss_deviation,
        s.coefficient_violations,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::generate_instance_seeded;
    use crate::factorization::Hyperparams;
    use crate::learner::{run_continual, SnapshotCadence};

    #[test]
    fn instance_round_trip() {
        let dims = ProblemDims::new(8, 2, 4).unwrap();
        let gt = generate_instance_seeded(dims, 2.0, 1.0 / 64.0, &[true, false, true, false], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inst.json");
        save_instance(&p, &gt).unwrap();
        let back = load_instance(&p).unwrap();
        assert_eq!(back, gt);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"D\"") && text.contains("\"nu\""));
    }

    #[test]
    fn trace_has_config_line_and_blank_sigmas() {
        let dims = ProblemDims::new(4, 2, 1).unwrap();
        let gt = generate_instance_seeded(dims, 2.0, 1.0 / 64.0, &[true], 0).unwrap();
        let h = Hyperparams::practical(dims, 1e-3, 1.0 / 64.0, 2.0);
        let (_, rep) = run_continual(&gt, &h, &mut seeded_rng(0), SnapshotCadence::Every(50)).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &serde_json::json!({"seed": 0}), &rep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config {\"seed\":0}");
        assert_eq!(
            lines.next().unwrap(),
            "task,iter,loss_current,max_prev_loss,l_existing,l_signal,l_noise,sigma_min,sigma_max"
        );
        assert!(lines.next().unwrap().ends_with(",,"));
    }
}

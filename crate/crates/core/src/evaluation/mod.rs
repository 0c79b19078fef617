//! Displacement metrics, prediction baselines and the evaluation harness.

mod ablation;
mod plot;
mod table;

pub use ablation::{ablation_run, AblationCell, AblationGrid, AblationResult};
pub use plot::{plot_loss_curve, plot_metric_vs_k, plot_trace, MetricSeries};
pub use table::{reference_results, report_table, ReferenceRow, Table, METRIC_COLUMNS};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ScenarioTag, SampleWindow};
use crate::error::{Error, Result};
use crate::model::{constant_velocity, FollowGen, DIM};
use crate::tensor::Tensor;
use crate::training::Checkpoint;

/// Final-step error above which a case counts as a miss (m).
pub const MISS_THRESHOLD: f64 = 2.0;

/// Horizons reported by default, in seconds.
pub const DEFAULT_HORIZONS: [f64; 3] = [3.0, 4.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon_s: f64,
    pub frames: usize,
    pub rmse: f64,
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub n_samples: usize,
    pub scenario: ScenarioTag,
    pub predictor: String,
    pub seed: u64,
    pub k: usize,
    pub schedule: String,
    pub variant: String,
    /// Draws per case; values above 1 are best-of-N and not comparable to
    /// single-sample numbers.
    pub draws: usize,
}

/// Run metadata copied into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: ScenarioTag,
    pub seed: u64,
    pub k: usize,
    pub schedule: String,
    pub variant: String,
}

impl Default for RunMeta {
    fn default() -> Self {
        Self { scenario: ScenarioTag::Synthetic, seed: 0, k: 0, schedule: "-".into(), variant: "-".into() }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || pred.shape()[2] != DIM {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let (n, t) = (pred.shape()[0], pred.shape()[1]);
    if n == 0 || t == 0 {
        return Err(Error::Precondition("metrics need at least one case and one step".into()));
    }
    Ok((n, t))
}

/// Euclidean error per case and step, `[N, T]`.
pub fn step_errors(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (n, t) = check_pair(pred, gt)?;
    Ok(Tensor::from_fn(&[n, t], |i| {
        let (a, b) = (&pred.data()[i * DIM..(i + 1) * DIM], &gt.data()[i * DIM..(i + 1) * DIM]);
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }))
}

/// RMSE, ADE, FDE and miss rate for `[N, T, D]` trajectories.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    let err = step_errors(pred, gt)?;
    let (n, t) = (err.shape()[0], err.shape()[1]);
    let finals: Vec<f64> = (0..n).map(|i| err.at(&[i, t - 1])).collect();
    Ok(Metrics {
        rmse: err.map(|e| e * e).mean().sqrt(),
        ade: err.mean(),
        fde: finals.iter().sum::<f64>() / n as f64,
        mr: miss_rate_of(&finals, MISS_THRESHOLD),
        n,
    })
}

fn miss_rate_of(finals: &[f64], threshold: f64) -> f64 {
    finals.iter().filter(|&&e| e > threshold).count() as f64 / finals.len() as f64
}

/// Fraction of cases whose final-step error exceeds `threshold`.
pub fn miss_rate(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    let err = step_errors(pred, gt)?;
    let t = err.shape()[1];
    let finals: Vec<f64> = (0..err.shape()[0]).map(|i| err.at(&[i, t - 1])).collect();
    Ok(miss_rate_of(&finals, threshold))
}

/// Something that maps ego-frame windows to future follower positions.
pub trait Predictor {
    fn name(&self) -> String;

    /// Predicted positions `[N, T_fut, D]` in the windows' frame. Case `i`
    /// of the call has global index `first_index + i`.
    fn predict(&self, windows: &[&SampleWindow], first_index: usize) -> Result<Tensor>;
}

/// Extrapolates the last history velocity.
pub struct ConstantVelocity;

/// Returns the ground truth; used to check the harness plumbing.
pub struct OraclePredictor;

/// Samples the diffusion model with fixed per-case seeds.
pub struct ModelPredictor<'a> {
    pub model: &'a FollowGen,
    pub seed: u64,
    /// Best-of-N by ADE when above 1.
    pub draws: usize,
}

pub fn baseline_constant_velocity(sample: &SampleWindow) -> Vec<[f64; 2]> {
    constant_velocity(&sample.x_fol_his, sample.t_fut())
}

fn stack_trajectories(rows: impl Iterator<Item = Vec<[f64; 2]>>, n: usize, t: usize) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|r| r.into_iter().flatten()).collect();
    Tensor::new(&[n, t, DIM], data)
}

fn uniform_t_fut(windows: &[&SampleWindow]) -> Result<usize> {
    let t = windows.first().map_or(0, |w| w.t_fut());
    if windows.iter().any(|w| w.t_fut() != t) {
        return Err(Error::Shape("windows differ in future length".into()));
    }
    Ok(t)
}

/// Ground-truth future positions `[N, T_fut, D]`.
pub fn ground_truth(windows: &[&SampleWindow]) -> Result<Tensor> {
    let t = uniform_t_fut(windows)?;
    Ok(stack_trajectories(windows.iter().map(|w| w.x_fol_fut.clone()), windows.len(), t))
}

impl Predictor for ConstantVelocity {
    fn name(&self) -> String {
        "constant_velocity".into()
    }

    fn predict(&self, windows: &[&SampleWindow], _first_index: usize) -> Result<Tensor> {
        let t = uniform_t_fut(windows)?;
        if windows.iter().any(|w| w.t_his() < 2) {
            return Err(Error::Precondition("constant velocity needs two history frames".into()));
        }
        Ok(stack_trajectories(windows.iter().map(|w| baseline_constant_velocity(w)), windows.len(), t))
    }
}

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, windows: &[&SampleWindow], _first_index: usize) -> Result<Tensor> {
        ground_truth(windows)
    }
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        "followgen".into()
    }

    fn predict(&self, windows: &[&SampleWindow], first_index: usize) -> Result<Tensor> {
        let seeds = FollowGen::case_seeds(self.seed, first_index, windows.len());
        let (best, _) = self.model.sample(windows, &seeds, false)?;
        if self.draws <= 1 {
            return Ok(best);
        }
        let gt = ground_truth(windows)?;
        let ade = |p: &Tensor| -> Result<Vec<f64>> {
            let e = step_errors(p, &gt)?;
            let t = e.shape()[1];
            Ok((0..e.shape()[0]).map(|i| (0..t).map(|j| e.at(&[i, j])).sum::<f64>() / t as f64).collect())
        };
        let mut best = best;
        let mut best_ade = ade(&best)?;
        let per_case = best.len() / windows.len();
        for j in 1..self.draws {
            let seeds: Vec<u64> = seeds.iter().map(|s| s ^ ((j as u64) << 32)).collect();
            let (cand, _) = self.model.sample(windows, &seeds, false)?;
            for (i, a) in ade(&cand)?.into_iter().enumerate() {
                if a < best_ade[i] {
                    best_ade[i] = a;
                    best.data_mut()[i * per_case..(i + 1) * per_case].copy_from_slice(&cand.data()[i * per_case..(i + 1) * per_case]);
                }
            }
        }
        Ok(best)
    }
}

/// Frames covered by a horizon in seconds.
pub fn horizon_frames(horizon_s: f64, dt: f64, t_fut: usize) -> Result<usize> {
    let frames = (horizon_s / dt).round();
    if !(horizon_s > 0.0) || (frames * dt - horizon_s).abs() > 1e-6 {
        return Err(Error::Config(format!("horizon {horizon_s} s is not a positive multiple of dt = {dt}")));
    }
    let frames = frames as usize;
    if frames > t_fut {
        return Err(Error::Config(format!("horizon {horizon_s} s needs {frames} frames but T_fut = {t_fut}")));
    }
    Ok(frames)
}

const EVAL_BATCH: usize = 64;

/// Predicts every window once and reports metrics for each horizon.
pub fn evaluate(predictor: &dyn Predictor, windows: &[SampleWindow], horizons_s: &[f64], meta: &RunMeta, draws: usize) -> Result<Vec<MetricsReport>> {
    if windows.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    let t_fut = uniform_t_fut(&refs)?;
    let dt = windows[0].dt;
    let frames: Vec<usize> = horizons_s.iter().map(|&h| horizon_frames(h, dt, t_fut)).collect::<Result<_>>()?;
    let mut parts = Vec::new();
    for (ci, chunk) in refs.chunks(EVAL_BATCH).enumerate() {
        let p = predictor.predict(chunk, ci * EVAL_BATCH)?;
        if p.shape() != [chunk.len(), t_fut, DIM] {
            return Err(Error::Shape(format!("predictor returned {:?}", p.shape())));
        }
        parts.push(p);
    }
    let pred = Tensor::cat(&parts.iter().collect::<Vec<_>>(), 0);
    let gt = ground_truth(&refs)?;
    horizons_s
        .iter()
        .zip(frames)
        .map(|(&h, f)| {
            let m = compute_metrics(&pred.narrow(1, 0, f), &gt.narrow(1, 0, f))?;
            Ok(MetricsReport {
                horizon_s: h,
                frames: f,
                rmse: m.rmse,
                ade: m.ade,
                fde: m.fde,
                mr: m.mr,
                n_samples: m.n,
                scenario: meta.scenario,
                predictor: predictor.name(),
                seed: meta.seed,
                k: meta.k,
                schedule: meta.schedule.clone(),
                variant: meta.variant.clone(),
                draws: draws.max(1),
            })
        })
        .collect()
}

/// Loads a checkpoint and evaluates its model.
pub fn evaluate_checkpoint(path: &Path, windows: &[SampleWindow], horizons_s: &[f64], seed: u64, draws: usize) -> Result<Vec<MetricsReport>> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    let meta = RunMeta {
        scenario: ck.train_config.scenario,
        seed,
        k: model.schedule.steps,
        schedule: model.schedule.kind.to_string(),
        variant: model.config.variant.to_string(),
    };
    evaluate(&ModelPredictor { model: &model, seed, draws }, windows, horizons_s, &meta, draws)
}

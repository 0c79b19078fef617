//! Loss terms, the AdamW optimizer and the training loop with JSON
//! checkpoints and JSON-lines logs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{spacing_penalty, Graph, UnaryKind, Var};
use crate::data::{SampleWindow, ScenarioTag};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::model::{Batch, FollowGen, ModelConfig, DIM};
use crate::nn::{NamedParam, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "followgen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Boundary between the quadratic and linear spacing penalty (m).
    pub delta: f64,
    /// Length scale of the collision penalty (m).
    pub dist: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 0.001, lambda2: 0.001, delta: 2.0, dist: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_simple: f64,
    pub l_spacing: f64,
    pub l_collision: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub dist: f64,
}

impl LossBreakdown {
    pub fn new(l_simple: f64, l_spacing: f64, l_collision: f64, cfg: &LossConfig) -> Self {
        Self {
            l_simple,
            l_spacing,
            l_collision,
            l_total: total_loss(l_simple, l_spacing, l_collision, cfg),
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            delta: cfg.delta,
            dist: cfg.dist,
        }
    }
}

pub fn total_loss(l_simple: f64, l_spacing: f64, l_collision: f64, cfg: &LossConfig) -> f64 {
    l_simple + cfg.lambda1 * l_spacing + cfg.lambda2 * l_collision
}

/// Mean squared error over every element.
pub fn loss_simple(eps: &Tensor, eps_hat: &Tensor) -> f64 {
    eps.zip_map(eps_hat, |a, b| (a - b) * (a - b)).mean()
}

/// Signed longitudinal gaps `(x_lea - x_fol) . e_d` for `[B, T, D]`
/// trajectories and `e_d [B, 1, D]`, returned as `[B, T]`.
pub fn longitudinal_gaps(x_lea_fut: &Tensor, x_fol_pred: &Tensor, e_d: &Tensor) -> Tensor {
    let s = x_lea_fut.shape();
    assert_eq!(s, x_fol_pred.shape());
    let (b, t, d) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[b, t], |i| {
        let (bi, ti) = (i / t, i % t);
        (0..d).map(|j| (x_lea_fut.at(&[bi, ti, j]) - x_fol_pred.at(&[bi, ti, j])) * e_d.at(&[bi, 0, j])).sum()
    })
}

/// Mean piecewise spacing penalty over all gaps.
pub fn loss_spacing(x_lea_fut: &Tensor, x_fol_pred: &Tensor, e_d: &Tensor, delta: f64) -> f64 {
    longitudinal_gaps(x_lea_fut, x_fol_pred, e_d).map(|g| spacing_penalty(g, delta)).mean()
}

/// Mean of `exp(-gap / dist)`.
pub fn loss_collision(gaps: &Tensor, dist: f64) -> f64 {
    assert!(dist > 0.0, "dist must be positive");
    gaps.map(|g| (-g / dist).exp()).mean()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub scenario: ScenarioTag,
    /// Stop gradients from the noise term into the noise scale.
    pub detach_noise_scale: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam_eps: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 20,
            clip_norm: 1.0,
            seed: 0,
            scenario: ScenarioTag::HumanHuman,
            detach_noise_scale: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
            ("loss.dist", self.loss.dist),
            ("loss.delta", self.loss.delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.loss.lambda1 < 0.0 || self.loss.lambda2 < 0.0 {
            return Err(Error::Config("weight decay and loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |store: &ParamStore| store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { step: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if !store.trainable_at(i) {
                continue;
            }
            let p = store.by_index_mut(i).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let gj = grad.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                p[j] -= cfg.lr * cfg.weight_decay * p[j];
                p[j] -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Graph handles for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_simple: Var,
    pub l_spacing: Var,
    pub l_collision: Var,
    pub l_total: Var,
    pub sigma2: Var,
    pub eps_hat: Var,
}

/// Builds the full training objective for `batch` with diffusion steps `ks`
/// (one per row) and standard normal noise `eps0 [B, T_fut, D]`.
pub fn loss_graph(
    g: &mut Graph,
    model: &FollowGen,
    batch: &Batch,
    ks: &[usize],
    eps0: &Tensor,
    loss: &LossConfig,
    detach_noise_scale: bool,
) -> Result<LossVars> {
    let b = batch.len();
    let tf = model.config.t_fut;
    if ks.len() != b || eps0.shape() != [b, tf, DIM] {
        return Err(Error::Shape(format!("{} steps and noise {:?} for batch of {b}", ks.len(), eps0.shape())));
    }
    let sched = &model.schedule;
    if let Some(&k) = ks.iter().find(|&&k| k >= sched.steps) {
        return Err(Error::StepIndex { k, steps: sched.steps });
    }
    let cond = model.condition(g, batch)?;
    let sigma2 = if detach_noise_scale { g.detach(cond.sigma2) } else { cond.sigma2 };
    let sigma = g.sqrt(sigma2);
    let e0 = g.input(eps0.clone());
    let eps = g.mul(e0, sigma);

    let coef = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(&[b, 1, 1], |i| f(ks[i]));
    let sqrt_ab = g.input(coef(&|k| sched.alpha_bar[k].sqrt()));
    let sqrt_1m = g.input(coef(&|k| (1.0 - sched.alpha_bar[k]).sqrt()));
    let inv_sqrt_ab = g.input(coef(&|k| 1.0 / sched.alpha_bar[k].sqrt()));
    let x0 = g.input(batch.x0.clone());
    let a = g.mul(x0, sqrt_ab);
    let n = g.mul(eps, sqrt_1m);
    let x_k = g.add(a, n);

    let eps_hat = model.denoiser.forward(g, &model.store, x_k, ks, cond.c)?;
    let diff = g.sub(eps, eps_hat);
    let sq = g.square(diff);
    let l_simple = g.mean(sq);

    let noise = g.mul(eps_hat, sqrt_1m);
    let x0_hat = g.sub(x_k, noise);
    let x0_hat = g.mul(x0_hat, inv_sqrt_ab);
    let pred = g.scale(x0_hat, model.config.traj_scale);
    let anchor = g.input(batch.anchor.clone());
    let pred = g.add(pred, anchor);
    let lea = g.input(batch.x_lea_fut.clone());
    let rel = g.sub(lea, pred);
    let e_d = g.input(batch.e_d.clone());
    let proj = g.mul(rel, e_d);
    let gaps = g.sum_axis(proj, 2);
    let sp = g.unary(gaps, UnaryKind::SpacingPenalty(loss.delta));
    let l_spacing = g.mean(sp);
    let col = g.scale(gaps, -1.0 / loss.dist);
    let col = g.exp(col);
    let l_collision = g.mean(col);

    let ws = g.scale(l_spacing, loss.lambda1);
    let wc = g.scale(l_collision, loss.lambda2);
    let t = g.add(l_simple, ws);
    let l_total = g.add(t, wc);
    Ok(LossVars { l_simple, l_spacing, l_collision, l_total, sigma2: cond.sigma2, eps_hat })
}

/// State of a ChaCha stream, enough to reconstruct it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to rebuild a model and resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub schedule: DiffusionSchedule,
    pub params: Vec<NamedParam>,
    pub optimizer: AdamW,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<FollowGen> {
        let mut model = FollowGen::new(self.model_config.clone(), 0)?;
        model.store.load_named(&self.params).map_err(Error::Checkpoint)?;
        if model.schedule != self.schedule {
            return Err(Error::Checkpoint("stored schedule does not match the configuration".into()));
        }
        Ok(model)
    }
}

/// One JSON-lines log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_simple: f64,
    pub l_spacing: f64,
    pub l_collision: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    /// Batch-mean noise variance per dimension.
    pub sigma2: Vec<f64>,
}

pub struct TrainOutcome {
    pub model: FollowGen,
    /// Per-epoch means.
    pub epochs: Vec<LogRecord>,
    /// Per-step records.
    pub steps: Vec<LogRecord>,
    pub checkpoint: Option<PathBuf>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Batch order for an epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 2 * epoch as u64 + 1));
    idx
}

struct Logs {
    steps: Option<std::io::BufWriter<std::fs::File>>,
    epochs: Option<std::io::BufWriter<std::fs::File>>,
    dir: Option<PathBuf>,
}

impl Logs {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else { return Ok(Self { steps: None, epochs: None, dir: None }) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<_> {
            let path = dir.join(name);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(std::io::BufWriter::new(f))
        };
        Ok(Self { steps: Some(open("train_steps.jsonl")?), epochs: Some(open("train_log.jsonl")?), dir: Some(dir.to_path_buf()) })
    }

    fn write(w: &mut Option<std::io::BufWriter<std::fs::File>>, dir: &Option<PathBuf>, rec: &LogRecord) -> Result<()> {
        if let Some(w) = w {
            let line = serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
            let path = dir.clone().unwrap_or_default();
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Trains a fresh model on ego-frame windows. With `out_dir`, writes
/// `checkpoint.json` after every epoch plus `train_log.jsonl` (epoch means)
/// and `train_steps.jsonl` (per step).
pub fn train(windows: &[SampleWindow], model_config: &ModelConfig, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let model = FollowGen::new(model_config.clone(), config.seed)?;
    let optimizer = AdamW::new(&model.store);
    run(windows, model, optimizer, config, 0, out_dir, false)
}

/// Continues training from a checkpoint until its configured epoch count.
pub fn resume(checkpoint: &Checkpoint, windows: &[SampleWindow], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = checkpoint.model()?;
    run(windows, model, checkpoint.optimizer.clone(), &checkpoint.train_config, checkpoint.epoch, out_dir, true)
}

fn run(
    windows: &[SampleWindow],
    mut model: FollowGen,
    mut optimizer: AdamW,
    config: &TrainConfig,
    start_epoch: usize,
    out_dir: Option<&Path>,
    append: bool,
) -> Result<TrainOutcome> {
    if windows.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut logs = Logs::open(out_dir, append)?;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut checkpoint = None;
    let per_epoch = windows.len().div_ceil(config.batch_size);
    let k_max = model.schedule.steps;
    for epoch in start_epoch..config.epochs {
        let order = epoch_order(windows.len(), config.seed, epoch);
        let noise_stream = 2 * epoch as u64 + 2;
        let mut rng = stream_rng(config.seed, noise_stream);
        let mut sums = [0.0; 5];
        let mut sigma_sum = [0.0; DIM];
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&SampleWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = model.make_batch(&refs)?;
            let ks: Vec<usize> = (0..refs.len()).map(|_| rng.random_range(0..k_max)).collect();
            let eps0 = model.standard_noise(refs.len(), &mut rng);
            let mut g = Graph::new();
            let lv = loss_graph(&mut g, &model, &batch, &ks, &eps0, &config.loss, config.detach_noise_scale)?;
            let l_total = g.value(lv.l_total).item();
            if !l_total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = g.backward(lv.l_total);
            let mut pg = g.param_grads(&grads, &model.store);
            let grad_norm = clip_grad_norm(&mut pg, config.clip_norm);
            optimizer.update(&mut model.store, &pg, config);
            let s2 = g.value(lv.sigma2);
            let sigma2: Vec<f64> =
                (0..DIM).map(|d| (0..refs.len()).map(|i| s2.at(&[i, 0, d])).sum::<f64>() / refs.len() as f64).collect();
            let rec = LogRecord {
                epoch: epoch + 1,
                step: epoch * per_epoch + bi + 1,
                l_simple: g.value(lv.l_simple).item(),
                l_spacing: g.value(lv.l_spacing).item(),
                l_collision: g.value(lv.l_collision).item(),
                l_total,
                grad_norm,
                sigma2,
            };
            for (acc, v) in sums.iter_mut().zip([rec.l_simple, rec.l_spacing, rec.l_collision, rec.l_total, rec.grad_norm]) {
                *acc += v;
            }
            for (acc, v) in sigma_sum.iter_mut().zip(&rec.sigma2) {
                *acc += v;
            }
            Logs::write(&mut logs.steps, &logs.dir, &rec)?;
            steps.push(rec);
        }
        let nb = per_epoch as f64;
        let rec = LogRecord {
            epoch: epoch + 1,
            step: (epoch + 1) * per_epoch,
            l_simple: sums[0] / nb,
            l_spacing: sums[1] / nb,
            l_collision: sums[2] / nb,
            l_total: sums[3] / nb,
            grad_norm: sums[4] / nb,
            sigma2: sigma_sum.iter().map(|s| s / nb).collect(),
        };
        Logs::write(&mut logs.epochs, &logs.dir, &rec)?;
        epochs.push(rec);
        if let Some(dir) = out_dir {
            let ck = Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                epoch: epoch + 1,
                model_config: model.config.clone(),
                train_config: config.clone(),
                schedule: model.schedule.clone(),
                params: model.store.to_named(),
                optimizer: optimizer.clone(),
                rng: RngState::capture(config.seed, &rng),
            };
            let path = dir.join("checkpoint.json");
            ck.save(&path)?;
            checkpoint = Some(path);
        }
    }
    Ok(TrainOutcome { model, epochs, steps, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_idm_episodes, normalize_robust, window_samples, LeaderProfile, SynthesisSpec};
    use crate::denoiser::DenoiserConfig;
    use crate::encoder::EncoderConfig;
    use crate::interaction::InteractionConfig;
    use crate::model::DiffusionConfig;

    #[test]
    fn simple_loss_values() {
        let a = Tensor::from_fn(&[50, 2], |i| (i as f64).sin());
        assert_eq!(loss_simple(&a, &a), 0.0);
        assert_eq!(loss_simple(&Tensor::zeros(&[50, 2]), &Tensor::full(&[50, 2], 1.0)), 1.0);
        let b = Tensor::from_fn(&[50, 2], |i| (i as f64 * 0.7).cos());
        let mut naive = 0.0;
        for t in 0..50 {
            for d in 0..2 {
                naive += (a.at(&[t, d]) - b.at(&[t, d])).powi(2);
            }
        }
        assert!((loss_simple(&a, &b) - naive / 100.0).abs() < 1e-12);
    }

    #[test]
    fn spacing_penalty_branches() {
        assert_eq!(spacing_penalty(3.0, 2.0), 0.0);
        assert_eq!(spacing_penalty(-1.0, 2.0), 0.5);
        assert_eq!(spacing_penalty(-2.0, 2.0), 2.0);
        let quad = 0.5 * 2.0f64 * 2.0;
        let lin = 2.0 * (2.0 - 0.5 * 2.0);
        assert_eq!(quad, lin);
        let lea = Tensor::new(&[1, 2, 2], vec![10.0, 0.0, 10.0, 0.0]);
        let fol = Tensor::new(&[1, 2, 2], vec![5.0, 3.0, 11.0, 0.0]);
        let e = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]);
        assert_eq!(loss_spacing(&lea, &fol, &e, 2.0), 0.25);
    }

    #[test]
    fn collision_penalty_values() {
        assert_eq!(loss_collision(&Tensor::zeros(&[2, 3]), 2.0), 1.0);
        assert!((loss_collision(&Tensor::full(&[2, 3], 2.0), 2.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((loss_collision(&Tensor::full(&[1, 1], 4.0), 2.0) - 0.135335).abs() < 1e-6);
        let grid: Vec<f64> = (-20..=20).map(|i| loss_collision(&Tensor::full(&[1, 1], i as f64 * 0.5), 2.0)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::full(&[3], 4.0)), None, Some(Tensor::full(&[2], -3.0))];
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - (48.0f64 + 18.0).sqrt()).abs() < 1e-12);
        let post = g.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-9);
        let mut small = vec![Some(Tensor::full(&[1], 0.5))];
        assert_eq!(clip_grad_norm(&mut small, 1.0), 0.5);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn adamw_first_step_matches_formula() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[2], vec![1.0, -2.0]));
        let mut opt = AdamW::new(&store);
        let cfg = TrainConfig::default();
        let grads = vec![Some(Tensor::new(&[2], vec![0.5, 0.1]))];
        opt.update(&mut store, &grads, &cfg);
        for (j, (p0, gj)) in [(1.0, 0.5), (-2.0, 0.1f64)].into_iter().enumerate() {
            let decayed = p0 - 1e-3 * 0.01 * p0;
            // Bias-corrected first and second moments equal g and g^2 after one step.
            let expect = decayed - 1e-3 * gj / (gj.abs() + 1e-2);
            assert!((store.get(id).data()[j] - expect).abs() < 1e-15);
        }
    }

    fn tiny_setup() -> (Vec<SampleWindow>, ModelConfig) {
        let spec = SynthesisSpec { n: 4, horizon: 24, profile: LeaderProfile::StopAndGo, seed: 5, ..Default::default() };
        let windows: Vec<SampleWindow> = generate_idm_episodes(&spec)
            .unwrap()
            .iter()
            .flat_map(|e| window_samples(e, 8, 16, 4))
            .map(|w| normalize_robust(&w).unwrap())
            .collect();
        let cfg = ModelConfig {
            t_his: 8,
            t_fut: 16,
            encoder: EncoderConfig { hidden: 6, proj_width: 4, ..Default::default() },
            interaction: InteractionConfig { embed: 4, heads: 2, ffn: 8, stream_hidden: 4, ..Default::default() },
            denoiser: DenoiserConfig { channels: vec![2, 4], time_embed: 4, groups: 2, ..Default::default() },
            diffusion: DiffusionConfig { steps: 10, ..Default::default() },
            ..Default::default()
        };
        (windows, cfg)
    }

    #[test]
    fn zero_weights_reduce_to_simple_loss() {
        let (windows, mcfg) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            loss: LossConfig { lambda1: 0.0, lambda2: 0.0, ..Default::default() },
            ..Default::default()
        };
        let out = train(&windows, &mcfg, &cfg, None).unwrap();
        assert!(!out.steps.is_empty());
        for r in &out.steps {
            assert_eq!(r.l_total, r.l_simple);
            assert!(r.l_spacing >= 0.0 && r.l_collision >= 0.0);
        }
    }

    #[test]
    fn penalty_linearity() {
        let (windows, mcfg) = tiny_setup();
        let model = FollowGen::new(mcfg, 3).unwrap();
        let refs: Vec<&SampleWindow> = windows.iter().take(3).collect();
        let batch = model.make_batch(&refs).unwrap();
        let eps0 = model.standard_noise(3, &mut ChaCha8Rng::seed_from_u64(1));
        let eval = |l1: f64, l2: f64| {
            let mut g = Graph::new();
            let lc = LossConfig { lambda1: l1, lambda2: l2, ..Default::default() };
            let lv = loss_graph(&mut g, &model, &batch, &[0, 5, 9], &eps0, &lc, true).unwrap();
            (g.value(lv.l_total).item(), g.value(lv.l_spacing).item(), g.value(lv.l_collision).item())
        };
        let (t0, _, _) = eval(0.0, 0.0);
        let (t1, sp, col) = eval(0.3, 0.7);
        assert!((t1 - t0 - (0.3 * sp + 0.7 * col)).abs() < 1e-12);
    }

    #[test]
    fn training_is_bit_reproducible_and_resumable() {
        let (windows, mcfg) = tiny_setup();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..Default::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        train(&windows, &mcfg, &cfg, Some(d1.path())).unwrap();
        train(&windows, &mcfg, &cfg, Some(d2.path())).unwrap();
        for f in ["checkpoint.json", "train_log.jsonl", "train_steps.jsonl"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }

        let d3 = tempfile::tempdir().unwrap();
        let one = TrainConfig { epochs: 1, ..cfg.clone() };
        train(&windows, &mcfg, &one, Some(d3.path())).unwrap();
        let mut ck = Checkpoint::load(&d3.path().join("checkpoint.json")).unwrap();
        assert_eq!(ck.epoch, 1);
        ck.train_config.epochs = 2;
        resume(&ck, &windows, Some(d3.path())).unwrap();
        assert_eq!(
            std::fs::read(d1.path().join("checkpoint.json")).unwrap(),
            std::fs::read(d3.path().join("checkpoint.json")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.path().join("train_log.jsonl")).unwrap(),
            std::fs::read(d3.path().join("train_log.jsonl")).unwrap()
        );
    }

    #[test]
    fn checkpoint_rebuilds_model() {
        let (windows, mcfg) = tiny_setup();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&windows, &mcfg, &cfg, Some(dir.path())).unwrap();
        let ck = Checkpoint::load(out.checkpoint.as_ref().unwrap()).unwrap();
        let model = ck.model().unwrap();
        assert_eq!(model.store, out.model.store);
        std::fs::write(dir.path().join("bad.json"), "{}").unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("bad.json")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn gradient_probe_matches_finite_differences() {
        let (windows, mcfg) = tiny_setup();
        let mut model = FollowGen::new(mcfg, 11).unwrap();
        let refs: Vec<&SampleWindow> = windows.iter().take(3).collect();
        let batch = model.make_batch(&refs).unwrap();
        let eps0 = model.standard_noise(3, &mut ChaCha8Rng::seed_from_u64(2));
        let lc = LossConfig { lambda1: 0.3, lambda2: 0.2, ..Default::default() };
        let ks = [1, 4, 8];
        let loss = |m: &FollowGen| {
            let mut g = Graph::new();
            let lv = loss_graph(&mut g, m, &batch, &ks, &eps0, &lc, false).unwrap();
            g.value(lv.l_total).item()
        };
        let mut g = Graph::new();
        let lv = loss_graph(&mut g, &model, &batch, &ks, &eps0, &lc, false).unwrap();
        let grads = g.backward(lv.l_total);
        let pg = g.param_grads(&grads, &model.store);
        let prefixes = ["history.gru", "history.att", "history.proj", "interaction.query", "interaction.kv", "interaction.attn.w_q", "interaction.attn.ff1", "interaction.attn.norm2", "denoiser.first", "denoiser.time", "denoiser.head"];
        let ids: Vec<_> = model.store.ids().collect();
        for prefix in prefixes {
            let id = *ids.iter().find(|&&id| model.store.name(id).starts_with(prefix) && model.store.is_trainable(id)).unwrap_or_else(|| panic!("{prefix}"));
            let g_all = pg[id.index()].as_ref().expect("probe parameter receives a gradient");
            let j = (0..g_all.len()).max_by(|&a, &b| g_all.data()[a].abs().total_cmp(&g_all.data()[b].abs())).unwrap();
            let analytic = g_all.data()[j];
            let h = 1e-5;
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&model);
            model.store.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(&model);
            model.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{}: analytic {analytic} numeric {numeric}", model.store.name(id));
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (_, mcfg) = tiny_setup();
        assert!(matches!(train(&[], &mcfg, &TrainConfig::default(), None), Err(Error::Precondition(_))));
    }
}

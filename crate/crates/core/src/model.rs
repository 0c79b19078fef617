//! The assembled FollowGen model: history encoder, interaction block and
//! denoiser sharing one parameter store, plus batching and sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{SampleWindow, Vec2};
use crate::denoiser::{DenoiserConfig, UNetDenoiser};
use crate::diffusion::{make_schedule, sample_batch, DiffusionSchedule, NoisePredictor, ScheduleKind};
use crate::encoder::{noise_scale_var, EncoderConfig, HistoryEncoder, NoiseScale};
use crate::error::{Error, Result};
use crate::interaction::{InteractionBlock, InteractionConfig, LeaderInputs, LinearInteraction};
use crate::nn::{Linear, ParamStore};
use crate::tensor::Tensor;

pub const DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNoiseScaling,
    NoLocattnFft,
    NoCrossAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoNoiseScaling, Variant::NoLocattnFft, Variant::NoCrossAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNoiseScaling => "no_noise_scaling",
            Variant::NoLocattnFft => "no_locattn_fft",
            Variant::NoCrossAttention => "no_cross_attention",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Reference trajectory the diffusion target is measured from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Diffuse the future positions themselves.
    None,
    /// Diffuse the offset from constant-velocity extrapolation.
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta0: f64,
    pub beta_k: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: 200, beta0: 1e-4, beta_k: 0.02 }
    }
}

impl DiffusionConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.kind, self.steps, self.beta0, self.beta_k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub t_his: usize,
    pub t_fut: usize,
    pub variant: Variant,
    /// Divides history positions before they enter the networks (m).
    pub pos_scale: f64,
    /// Divides speeds before they enter the networks (m/s).
    pub speed_scale: f64,
    /// Divides the diffusion target (m).
    pub traj_scale: f64,
    pub anchor: Anchor,
    pub encoder: EncoderConfig,
    pub interaction: InteractionConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_his: 30,
            t_fut: 50,
            variant: Variant::Full,
            pos_scale: 10.0,
            speed_scale: 10.0,
            traj_scale: 1.0,
            anchor: Anchor::ConstantVelocity,
            encoder: EncoderConfig::default(),
            interaction: InteractionConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_his < 2 || self.t_fut < 1 {
            return bad(format!("need t_his >= 2 and t_fut >= 1, got {} and {}", self.t_his, self.t_fut));
        }
        for (name, v) in [("pos_scale", self.pos_scale), ("speed_scale", self.speed_scale), ("traj_scale", self.traj_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.encoder.out_dim != DIM || self.encoder.input_dim != DIM + 1 {
            return bad(format!("encoder must map {} features to {DIM} channels", DIM + 1));
        }
        let ic = &self.interaction;
        if ic.heads == 0 || ic.embed % ic.heads != 0 {
            return bad(format!("embedding width {} not divisible by {} heads", ic.embed, ic.heads));
        }
        let dc = &self.denoiser;
        if dc.channels.is_empty() || dc.channels.iter().any(|&c| c == 0 || c % dc.groups.min(c) != 0) {
            return bad(format!("denoiser channels {:?} incompatible with {} groups", dc.channels, dc.groups));
        }
        if dc.kernel % 2 == 0 {
            return bad("denoiser kernel must be odd".into());
        }
        self.diffusion.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum History {
    Encoder(HistoryEncoder),
    Linear(Linear),
}

#[derive(Clone, Debug)]
enum Interaction {
    Attention(InteractionBlock),
    Linear(LinearInteraction),
}

/// Network inputs for a batch of ego-frame windows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T_his, 3]` scaled follower position and speed.
    pub follower: Tensor,
    pub x_lea: Tensor,
    pub v_lea: Tensor,
    pub dx: Tensor,
    pub dv: Tensor,
    /// Diffusion target `[B, T_fut, D]`.
    pub x0: Tensor,
    /// Anchor trajectory in meters `[B, T_fut, D]`.
    pub anchor: Tensor,
    /// Leader future in meters `[B, T_fut, D]`.
    pub x_lea_fut: Tensor,
    /// Travel direction per row `[B, 1, D]`.
    pub e_d: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.follower.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-batch conditioning computed once and reused at every diffusion step.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// Encoded follower history `[B, T_his, D]`.
    pub z: Var,
    /// Noise variance `[B, 1, D]`.
    pub sigma2: Var,
    /// Denoiser condition `[B, embed]`.
    pub c: Var,
}

pub struct FollowGen {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub schedule: DiffusionSchedule,
    history: History,
    interaction: Interaction,
    pub denoiser: UNetDenoiser,
}

/// Positions extrapolated from the last history displacement.
pub fn constant_velocity(history: &[Vec2], t_fut: usize) -> Vec<Vec2> {
    let n = history.len();
    assert!(n >= 2, "constant-velocity extrapolation needs two history frames");
    let last = history[n - 1];
    let step = [last[0] - history[n - 2][0], last[1] - history[n - 2][1]];
    (1..=t_fut).map(|j| [last[0] + j as f64 * step[0], last[1] + j as f64 * step[1]]).collect()
}

impl FollowGen {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let history = match config.variant {
            Variant::NoLocattnFft => History::Linear(Linear::new(&mut store, "history.linear", DIM + 1, DIM, &mut rng)),
            _ => History::Encoder(HistoryEncoder::new(&mut store, "history", &config.encoder, config.t_his, &mut rng)),
        };
        let ic = &config.interaction;
        let interaction = match config.variant {
            Variant::NoCrossAttention => {
                let width = DIM + DIM + 1 + DIM + usize::from(ic.include_dv);
                Interaction::Linear(LinearInteraction::new(&mut store, "interaction", width, ic.embed, &mut rng))
            }
            _ => Interaction::Attention(InteractionBlock::new(&mut store, "interaction", ic, DIM, &mut rng)),
        };
        let denoiser = UNetDenoiser::new(&mut store, "denoiser", &config.denoiser, DIM, ic.embed, &mut rng);
        let schedule = config.diffusion.build()?;
        Ok(Self { config, store, schedule, history, interaction, denoiser })
    }

    /// Converts ego-frame windows into network inputs.
    pub fn make_batch(&self, windows: &[&SampleWindow]) -> Result<Batch> {
        let cfg = &self.config;
        let (b, th, tf) = (windows.len(), cfg.t_his, cfg.t_fut);
        if b == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        let (ps, vs, ts) = (cfg.pos_scale, cfg.speed_scale, cfg.traj_scale);
        let mut follower = Vec::with_capacity(b * th * 3);
        let mut x_lea = Vec::with_capacity(b * th * DIM);
        let mut v_lea = Vec::with_capacity(b * th);
        let mut dx = Vec::with_capacity(b * th * DIM);
        let mut dv = Vec::with_capacity(b * th);
        let mut x0 = Vec::with_capacity(b * tf * DIM);
        let mut anchor = Vec::with_capacity(b * tf * DIM);
        let mut lea_fut = Vec::with_capacity(b * tf * DIM);
        let mut e_d = Vec::with_capacity(b * DIM);
        for w in windows {
            if w.t_his() != th || w.t_fut() != tf {
                return Err(Error::Shape(format!(
                    "window {}@{} has {}/{} frames, model expects {th}/{tf}",
                    w.episode_id,
                    w.offset,
                    w.t_his(),
                    w.t_fut()
                )));
            }
            for t in 0..th {
                follower.extend([w.x_fol_his[t][0] / ps, w.x_fol_his[t][1] / ps, w.v_fol_his[t] / vs]);
                x_lea.extend([w.x_lea_his[t][0] / ps, w.x_lea_his[t][1] / ps]);
                v_lea.push(w.v_lea_his[t] / vs);
                dx.extend([w.dx_his[t][0] / ps, w.dx_his[t][1] / ps]);
                dv.push(w.dv_his[t] / vs);
            }
            let base = match cfg.anchor {
                Anchor::None => vec![[0.0, 0.0]; tf],
                Anchor::ConstantVelocity => constant_velocity(&w.x_fol_his, tf),
            };
            for t in 0..tf {
                for d in 0..DIM {
                    x0.push((w.x_fol_fut[t][d] - base[t][d]) / ts);
                    anchor.push(base[t][d]);
                    lea_fut.push(w.x_lea_fut[t][d]);
                }
            }
            e_d.extend(w.e_d);
        }
        Ok(Batch {
            follower: Tensor::new(&[b, th, 3], follower),
            x_lea: Tensor::new(&[b, th, DIM], x_lea),
            v_lea: Tensor::new(&[b, th, 1], v_lea),
            dx: Tensor::new(&[b, th, DIM], dx),
            dv: Tensor::new(&[b, th, 1], dv),
            x0: Tensor::new(&[b, tf, DIM], x0),
            anchor: Tensor::new(&[b, tf, DIM], anchor),
            x_lea_fut: Tensor::new(&[b, tf, DIM], lea_fut),
            e_d: Tensor::new(&[b, 1, DIM], e_d),
        })
    }

    /// Builds the history encoding, noise variance and condition on `g`.
    pub fn condition(&self, g: &mut Graph, batch: &Batch) -> Result<Conditioning> {
        let store = &self.store;
        let follower = g.input(batch.follower.clone());
        let z = match &self.history {
            History::Encoder(enc) => enc.forward(g, store, follower)?.z,
            History::Linear(lin) => lin.forward(g, store, follower),
        };
        let sigma2 = if self.config.variant == Variant::NoNoiseScaling {
            g.input(Tensor::full(&[batch.len(), 1, DIM], 1.0))
        } else {
            noise_scale_var(g, z)
        };
        let leader = LeaderInputs {
            x_lea: g.input(batch.x_lea.clone()),
            v_lea: g.input(batch.v_lea.clone()),
            dx: g.input(batch.dx.clone()),
            dv: self.config.interaction.include_dv.then(|| g.input(batch.dv.clone())),
        };
        let c = match &self.interaction {
            Interaction::Attention(block) => block.forward(g, store, z, &leader)?.c,
            Interaction::Linear(lin) => lin.forward(g, store, z, &leader),
        };
        Ok(Conditioning { z, sigma2, c })
    }

    /// Converts diffusion-space trajectories `[B, T_fut, D]` to ego-frame meters.
    pub fn to_meters(&self, x: &Tensor, batch: &Batch) -> Tensor {
        let s = self.config.traj_scale;
        x.zip_map(&batch.anchor, |v, a| v * s + a)
    }

    /// Noise scales for each row of a batch.
    pub fn noise_scales(&self, batch: &Batch) -> Result<Vec<NoiseScale>> {
        let mut g = Graph::new();
        let cond = self.condition(&mut g, batch)?;
        Ok(scales_from(&g, &cond))
    }

    /// Samples one trajectory per window, in ego-frame meters. Row `i` draws
    /// from its own stream seeded with `seeds[i]`. When `trace` is set the
    /// intermediate states are returned in meters as `(k, [B, T_fut, D])`.
    pub fn sample(&self, windows: &[&SampleWindow], seeds: &[u64], trace: bool) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
        let batch = self.make_batch(windows)?;
        let mut g = Graph::new();
        let cond = self.condition(&mut g, &batch)?;
        let scales = scales_from(&g, &cond);
        let c = g.value(cond.c).clone();
        let predictor = BoundDenoiser { net: &self.denoiser, store: &self.store, c: &c };
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let out = sample_batch(&predictor, &scales, &self.schedule, self.config.t_fut, &mut rngs, trace)?;
        let trace = out.trace.iter().map(|(k, x)| (*k, self.to_meters(x, &batch))).collect();
        Ok((self.to_meters(&out.x0, &batch), trace))
    }

    /// Derives the per-row seeds used by [`FollowGen::sample`].
    pub fn case_seeds(run_seed: u64, first_index: usize, n: usize) -> Vec<u64> {
        (0..n).map(|i| run_seed ^ (first_index + i) as u64).collect()
    }

    /// Draws standard normal noise for training.
    pub fn standard_noise(&self, b: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[b, self.config.t_fut, DIM], |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }
}

fn scales_from(g: &Graph, cond: &Conditioning) -> Vec<NoiseScale> {
    let zs = g.value(cond.z);
    let (b, t, d) = (zs.shape()[0], zs.shape()[1], zs.shape()[2]);
    let s2 = g.value(cond.sigma2);
    (0..b)
        .map(|i| {
            let mu = (0..d).map(|j| (0..t).map(|k| zs.at(&[i, k, j])).sum::<f64>() / t as f64).collect();
            let sigma2 = (0..d).map(|j| s2.at(&[i, 0, j])).collect();
            NoiseScale { sigma2, mu }
        })
        .collect()
}

struct BoundDenoiser<'a> {
    net: &'a UNetDenoiser,
    store: &'a ParamStore,
    c: &'a Tensor,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, x_k: &Tensor, k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(x_k.clone());
        let c = g.input(self.c.clone());
        let ks = vec![k; x_k.shape()[0]];
        let out = self.net.forward(&mut g, self.store, x, &ks, c)?;
        Ok(g.value(out).clone())
    }
}

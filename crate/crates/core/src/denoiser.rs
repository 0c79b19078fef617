//! 1-D U-Net noise predictor conditioned on the diffusion step and the
//! interaction embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvTranspose1d, GroupNorm, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channel widths of the down path; the up path mirrors them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub time_embed: usize,
    pub zero_init_head: bool,
    /// Appends a fixed ramp from -1 to 1 across the padded sequence as an
    /// extra input channel.
    pub position_channel: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32, 64, 128], kernel: 3, groups: 4, time_embed: 50, zero_init_head: false, position_channel: true }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv1d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, kernel / 2, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout, groups),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv.forward(g, store, x);
        let h = self.norm.forward(g, store, h);
        g.gelu(h)
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    up: ConvTranspose1d,
    fuse: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct UNetDenoiser {
    first: ConvBlock,
    time1: Linear,
    time2: Linear,
    down: Vec<ConvBlock>,
    up: Vec<UpBlock>,
    head: Conv1d,
    pub dim: usize,
    pub cond_dim: usize,
    pub config: DenoiserConfig,
}

/// Sinusoidal embedding of step `k`: sines in the first half, cosines in the second.
pub fn timestep_embedding(k: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = k as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl UNetDenoiser {
    pub fn new(store: &mut ParamStore, name: &str, config: &DenoiserConfig, dim: usize, cond_dim: usize, rng: &mut impl Rng) -> Self {
        let ch = &config.channels;
        assert!(!ch.is_empty(), "denoiser needs at least one channel width");
        let (k, gr) = (config.kernel, config.groups);
        let cin = dim + usize::from(config.position_channel);
        let first = ConvBlock::new(store, &format!("{name}.first"), cin, ch[0], k, 1, gr, rng);
        let time1 = Linear::new(store, &format!("{name}.time1"), config.time_embed, config.time_embed, rng);
        let time2 = Linear::new(store, &format!("{name}.time2"), config.time_embed, ch[0], rng);
        // Skip widths: the first block output with the condition appended, then each down level.
        let mut skips = vec![ch[0] + cond_dim];
        let mut down = Vec::new();
        for i in 1..ch.len() {
            down.push(ConvBlock::new(store, &format!("{name}.down{i}"), skips[i - 1], ch[i], k, 2, gr, rng));
            skips.push(ch[i]);
        }
        let mut up = Vec::new();
        let mut cur = *ch.last().unwrap();
        for i in (0..ch.len() - 1).rev() {
            let j = ch.len() - 1 - i;
            let up_conv = ConvTranspose1d::new(store, &format!("{name}.up{j}.tconv"), cur, ch[i], 4, 2, 1, rng);
            let fuse = ConvBlock::new(store, &format!("{name}.up{j}.fuse"), ch[i] + skips[i], ch[i], k, 1, gr, rng);
            up.push(UpBlock { up: up_conv, fuse });
            cur = ch[i];
        }
        let head = if config.zero_init_head {
            Conv1d::zeros(store, &format!("{name}.head"), cur, dim, 1, 0)
        } else {
            Conv1d::new(store, &format!("{name}.head"), cur, dim, 1, 1, 0, rng)
        };
        Self { first, time1, time2, down, up, head, dim, cond_dim, config: config.clone() }
    }

    /// Temporal length is padded up to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << (self.config.channels.len() - 1)
    }

    /// `x [B, T, D]`, one step index per row, `c [B, cond_dim]` to `[B, T, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, k: &[usize], c: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim || k.len() != s[0] || g.shape(c) != [s[0], self.cond_dim] {
            return Err(Error::Shape(format!(
                "denoiser got x {s:?}, {} steps, c {:?}",
                k.len(),
                g.shape(c)
            )));
        }
        if !g.value(x).all_finite() || !g.value(c).all_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        let (nb, t) = (s[0], s[1]);
        let m = self.multiple();
        let lp = t.div_ceil(m) * m;
        let left = (lp - t) / 2;
        let right = lp - t - left;

        let h = g.permute(x, &[0, 2, 1]);
        let mut parts = Vec::new();
        if left > 0 {
            parts.push(g.input(Tensor::zeros(&[nb, self.dim, left])));
        }
        parts.push(h);
        if right > 0 {
            parts.push(g.input(Tensor::zeros(&[nb, self.dim, right])));
        }
        let h = if parts.len() > 1 { g.concat(&parts, 2) } else { h };
        let h = if self.config.position_channel {
            let ramp = Tensor::from_fn(&[nb, 1, lp], |i| {
                let j = i % lp;
                if lp > 1 { 2.0 * j as f64 / (lp - 1) as f64 - 1.0 } else { 0.0 }
            });
            let ramp = g.input(ramp);
            g.concat(&[h, ramp], 1)
        } else {
            h
        };

        let h = self.first.forward(g, store, h);
        let width = self.config.time_embed;
        let emb: Vec<f64> = k.iter().flat_map(|&k| timestep_embedding(k, width)).collect();
        let emb = g.input(Tensor::new(&[nb, width], emb));
        let te = self.time1.forward(g, store, emb);
        let te = g.gelu(te);
        let te = self.time2.forward(g, store, te);
        let te = g.reshape(te, &[nb, self.config.channels[0], 1]);
        let h = g.add(h, te);
        let cc = g.reshape(c, &[nb, self.cond_dim, 1]);
        let cc = g.expand(cc, &[nb, self.cond_dim, lp]);
        let mut h = g.concat(&[h, cc], 1);

        let mut skips = vec![h];
        for block in &self.down {
            h = block.forward(g, store, h);
            skips.push(h);
        }
        skips.pop();
        for block in &self.up {
            let u = block.up.forward(g, store, h);
            let skip = skips.pop().expect("one skip per up block");
            let cat = g.concat(&[u, skip], 1);
            h = block.fuse.forward(g, store, cat);
        }
        let out = self.head.forward(g, store, h);
        let out = g.narrow(out, 2, left, t);
        Ok(g.permute(out, &[0, 2, 1]))
    }

    /// Single-sample prediction `x_k [T, D]`, condition `c [cond_dim]`.
    pub fn predict_noise(&self, store: &ParamStore, x_k: &Tensor, k: usize, c: &Tensor) -> Result<Tensor> {
        if x_k.rank() != 2 {
            return Err(Error::Shape(format!("expected [T, D], got {:?}", x_k.shape())));
        }
        let t = x_k.shape()[0];
        let mut g = Graph::new();
        let x = g.input(x_k.clone().reshape(&[1, t, x_k.shape()[1]]));
        let cv = g.input(c.clone().reshape(&[1, c.len()]));
        let out = self.forward(&mut g, store, x, &[k], cv)?;
        Ok(g.value(out).clone().reshape(&[t, self.dim]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: DenoiserConfig, seed: u64) -> (ParamStore, UNetDenoiser) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNetDenoiser::new(&mut store, "unet", &config, 2, 50, &mut rng);
        (store, net)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shapes_are_preserved() {
        let (store, net) = build(DenoiserConfig::default(), 1);
        assert_eq!(net.multiple(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = rand_tensor(&mut rng, &[50]);
        for t in [30, 40, 50, 64] {
            let x = rand_tensor(&mut rng, &[t, 2]);
            let y = net.predict_noise(&store, &x, 17, &c).unwrap();
            assert_eq!(y.shape(), &[t, 2]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn zero_head_outputs_zero() {
        let (store, net) = build(DenoiserConfig { zero_init_head: true, ..Default::default() }, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = net.predict_noise(&store, &rand_tensor(&mut rng, &[50, 2]), 5, &rand_tensor(&mut rng, &[50])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_sensitive_to_condition_and_step() {
        let (store, net) = build(DenoiserConfig::default(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[50, 2]);
        let c = rand_tensor(&mut rng, &[50]);
        let a = net.predict_noise(&store, &x, 10, &c).unwrap();
        assert_eq!(a, net.predict_noise(&store, &x, 10, &c).unwrap());
        let c2 = c.map(|v| v + 0.1);
        assert!(net.predict_noise(&store, &x, 10, &c2).unwrap().max_abs_diff(&a) > 0.0);
        let k0 = net.predict_noise(&store, &x, 0, &c).unwrap();
        let k_last = net.predict_noise(&store, &x, 199, &c).unwrap();
        assert!(k0.max_abs_diff(&k_last) > 0.0);
    }

    #[test]
    fn batched_rows_match_single_predictions() {
        let (store, net) = build(DenoiserConfig::default(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = rand_tensor(&mut rng, &[3, 40, 2]);
        let cs = rand_tensor(&mut rng, &[3, 50]);
        let ks = [0, 50, 199];
        let mut g = Graph::new();
        let x = g.input(xs.clone());
        let c = g.input(cs.clone());
        let out = net.forward(&mut g, &store, x, &ks, c).unwrap();
        for i in 0..3 {
            let single = net.predict_noise(&store, &xs.row(i), ks[i], &cs.row(i)).unwrap();
            assert!(g.value(out).row(i).max_abs_diff(&single) < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let (store, net) = build(DenoiserConfig { channels: vec![2, 4], ..Default::default() }, 1);
        let mut x = Tensor::zeros(&[8, 2]);
        x.set(&[3, 0], f64::NAN);
        assert!(matches!(net.predict_noise(&store, &x, 0, &Tensor::zeros(&[50])), Err(Error::NonFinite(_))));
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(3, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15 && (e[2] - 3f64.cos()).abs() < 1e-15);
        assert!((e[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}

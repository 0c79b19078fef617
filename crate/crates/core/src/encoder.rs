//! Follower history encoder and the history-dependent noise scale.
//!
//! The pipeline is a stacked GRU, location-based attention over time, a
//! linear projection, a DFT along time (real and imaginary parts side by
//! side) and a final projection to one channel per spatial dimension. The
//! time-mean of that output, passed through softplus, gives the per-dimension
//! noise variance used by the diffusion process.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Per-step input features (position and speed).
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Width after the post-attention projection.
    pub proj_width: usize,
    /// Output channels; equals the trajectory dimension.
    pub out_dim: usize,
    pub learnable_w0: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_dim: 3, hidden: 50, layers: 2, proj_width: 50, out_dim: 2, learnable_w0: false }
    }
}

#[derive(Clone, Debug)]
pub struct HistoryEncoder {
    gru: Gru,
    w0: ParamId,
    att_w: ParamId,
    att_b: ParamId,
    proj1: Linear,
    proj2: Linear,
    pub t_his: usize,
    pub config: EncoderConfig,
}

/// Graph handles produced by [`HistoryEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[B, T_his, out_dim]`
    pub z: Var,
    /// Location attention weights `[B, T_his, 1]`.
    pub attention: Var,
}

impl HistoryEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig, t_his: usize, rng: &mut impl Rng) -> Self {
        let gru = Gru::new(store, &format!("{name}.gru"), config.input_dim, config.hidden, config.layers, rng);
        let ones = Tensor::full(&[t_his, 1], 1.0);
        let w0 = if config.learnable_w0 {
            store.add(format!("{name}.w0"), ones)
        } else {
            store.add_frozen(format!("{name}.w0"), ones)
        };
        let bound = 1.0 / (config.hidden as f64).sqrt();
        let att_w = store.add(
            format!("{name}.att.weight"),
            Tensor::from_fn(&[config.hidden, 1], |_| rng.random_range(-bound..bound)),
        );
        let att_b = store.add(format!("{name}.att.bias"), Tensor::zeros(&[1]));
        let proj1 = Linear::new(store, &format!("{name}.proj1"), config.hidden, config.proj_width, rng);
        let proj2 = Linear::new(store, &format!("{name}.proj2"), 2 * config.proj_width, config.out_dim, rng);
        Self { gru, w0, att_w, att_b, proj1, proj2, t_his, config: config.clone() }
    }

    /// `x [B, T_his, input_dim] -> z [B, T_his, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncoderOutput> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.t_his || s[2] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "history encoder expects [B, {}, {}], got {s:?}",
                self.t_his, self.config.input_dim
            )));
        }
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite("history encoder input".into()));
        }
        let z_gru = self.gru.forward(g, store, x);
        let w0 = g.param(store, self.w0);
        let w = g.param(store, self.att_w);
        let b = g.param(store, self.att_b);
        let (z_loc, attention) = location_attention(g, z_gru, w0, w, b);
        let z1 = self.proj1.forward(g, store, z_loc);
        let zf = g.dft(z1);
        let z = self.proj2.forward(g, store, zf);
        Ok(EncoderOutput { z, attention })
    }

    /// Single-sample convenience wrapper returning `z_fol_his` as `[T_his, out_dim]`.
    pub fn encode(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let s = features.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("expected [T_his, features], got {s:?}")));
        }
        let x = g.input(features.clone().reshape(&[1, s[0], s[1]]));
        let out = self.forward(&mut g, store, x)?;
        Ok(g.value(out.z).clone().reshape(&[s[0], self.config.out_dim]))
    }
}

/// Location-based attention over time.
///
/// `z [B, T, H]`, `w0 [T, 1]`, `w [H, 1]`, `b [1]`. Returns `(z_loc, w1)` with
/// `w1 = softmax_t((z * w0) w + b)` of shape `[B, T, 1]` and `z_loc = w1 * z`.
pub fn location_attention(g: &mut Graph, z: Var, w0: Var, w: Var, b: Var) -> (Var, Var) {
    let (nb, t) = (g.shape(z)[0], g.shape(z)[1]);
    let w0 = g.reshape(w0, &[1, t, 1]);
    let zw = g.mul(z, w0);
    let scores = g.matmul(zw, w);
    let b = g.reshape(b, &[1, 1, 1]);
    let scores = g.add(scores, b);
    let scores = g.reshape(scores, &[nb, 1, t]);
    let w1 = g.softmax(scores);
    let w1 = g.reshape(w1, &[nb, t, 1]);
    let z_loc = g.mul(z, w1);
    (z_loc, w1)
}

/// DFT along time of `z [T, H]`, returned as `[T, 2H]` (real parts, then
/// imaginary parts).
pub fn fft_embed(z: &Tensor) -> Tensor {
    assert_eq!(z.rank(), 2, "fft_embed expects [T, H]");
    let (t, h) = (z.shape()[0], z.shape()[1]);
    assert!(t >= 1, "fft_embed needs at least one time step");
    let mut g = Graph::new();
    let x = g.input(z.clone().reshape(&[1, t, h]));
    let y = g.dft(x);
    g.value(y).clone().reshape(&[t, 2 * h])
}

/// Per-dimension noise variance derived from the encoded history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub sigma2: Vec<f64>,
    pub mu: Vec<f64>,
}

impl NoiseScale {
    /// `sigma2 = 1` in every dimension.
    pub fn isotropic(dim: usize) -> Self {
        Self { sigma2: vec![1.0; dim], mu: vec![f64::NAN; dim] }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| v.sqrt()).collect()
    }
}

/// `mu = mean_t z`, `sigma2 = softplus(mu)` for `z [T, D]`.
pub fn compute_noise_scale(z: &Tensor) -> NoiseScale {
    assert_eq!(z.rank(), 2, "compute_noise_scale expects [T, D]");
    let (t, d) = (z.shape()[0], z.shape()[1]);
    let mu: Vec<f64> = (0..d).map(|j| (0..t).map(|i| z.at(&[i, j])).sum::<f64>() / t as f64).collect();
    let sigma2 = mu.iter().map(|&m| softplus(m)).collect();
    NoiseScale { sigma2, mu }
}

/// Graph version of [`compute_noise_scale`] for `z [B, T, D]`; returns
/// `sigma2 [B, 1, D]`.
pub fn noise_scale_var(g: &mut Graph, z: Var) -> Var {
    let (nb, d) = (g.shape(z)[0], g.shape(z)[2]);
    let mu = g.mean_axis(z, 1);
    let mu = g.reshape(mu, &[nb, 1, d]);
    g.softplus(mu)
}

/// Draws `eps [T, D]` with column `d` i.i.d. `N(0, sigma2[d])`.
pub fn sample_scaled_noise(scale: &NoiseScale, t: usize, rng: &mut impl Rng) -> Tensor {
    let sigma = scale.sigma();
    let d = sigma.len();
    Tensor::from_fn(&[t, d], |i| sigma[i % d] * rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(t_his: usize, seed: u64) -> (ParamStore, HistoryEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = HistoryEncoder::new(&mut store, "enc", &EncoderConfig::default(), t_his, &mut rng);
        (store, enc)
    }

    fn direct_dft(z: &Tensor) -> Tensor {
        let (n, h) = (z.shape()[0], z.shape()[1]);
        let mut out = Tensor::zeros(&[n, 2 * h]);
        for k in 0..n {
            for c in 0..h {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..n {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += z.at(&[t, c]) * ang.cos();
                    im += z.at(&[t, c]) * ang.sin();
                }
                out.set(&[k, c], re);
                out.set(&[k, h + c], im);
            }
        }
        out
    }

    #[test]
    fn dft_of_constant_and_impulse() {
        let c = fft_embed(&Tensor::full(&[6, 1], 2.5));
        assert!((c.at(&[0, 0]) - 15.0).abs() < 1e-12);
        for k in 1..6 {
            assert!(c.at(&[k, 0]).abs() < 1e-12 && c.at(&[k, 1]).abs() < 1e-12);
        }
        let mut delta = Tensor::zeros(&[5, 1]);
        delta.set(&[0, 0], 1.0);
        let d = fft_embed(&delta);
        for k in 0..5 {
            assert!((d.at(&[k, 0]) - 1.0).abs() < 1e-12 && d.at(&[k, 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn dft_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 7, 8, 30, 64] {
            let z = Tensor::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0));
            assert!(fft_embed(&z).max_abs_diff(&direct_dft(&z)) < 1e-9, "n = {n}");
        }
    }

    #[test]
    fn attention_hand_case() {
        // z rows (1, 2) and (3, 4); W = (1, 0); w0 = 1; b = 0.
        let mut g = Graph::new();
        let z = g.input(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w0 = g.input(Tensor::full(&[2, 1], 1.0));
        let w = g.input(Tensor::new(&[2, 1], vec![1.0, 0.0]));
        let b = g.input(Tensor::zeros(&[1]));
        let (z_loc, w1) = location_attention(&mut g, z, w0, w, b);
        let e1 = 1.0f64.exp();
        let e3 = 3.0f64.exp();
        let expect = [e1 / (e1 + e3), e3 / (e1 + e3)];
        let got = g.value(w1).data();
        assert!((got[0] - expect[0]).abs() < 1e-12 && (got[1] - expect[1]).abs() < 1e-12);
        let zl = g.value(z_loc).data();
        assert!((zl[3] - 4.0 * expect[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_uniform_cases() {
        let mut g = Graph::new();
        let z = g.input(Tensor::from_fn(&[2, 4, 3], |i| (i % 3) as f64));
        let w0 = g.input(Tensor::full(&[4, 1], 1.0));
        let w = g.input(Tensor::new(&[3, 1], vec![0.3, -1.0, 2.0]));
        let b = g.input(Tensor::full(&[1], 0.7));
        let (_, w1) = location_attention(&mut g, z, w0, w, b);
        assert!(g.value(w1).data().iter().all(|v| (v - 0.25).abs() < 1e-12));

        let z = g.input(Tensor::from_fn(&[1, 4, 3], |i| (i as f64).sin()));
        let w0 = g.input(Tensor::zeros(&[4, 1]));
        let (_, w1) = location_attention(&mut g, z, w0, w, b);
        assert!(g.value(w1).data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn encoder_is_deterministic_and_time_length_only_changes_time_axis() {
        let (store, enc) = encoder(30, 1);
        let zero = Tensor::zeros(&[30, 3]);
        let a = enc.encode(&store, &zero).unwrap();
        let b = enc.encode(&store, &zero).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[30, 2]);
        assert!(a.all_finite());
        let (store20, enc20) = encoder(20, 1);
        assert_eq!(enc20.encode(&store20, &Tensor::zeros(&[20, 3])).unwrap().shape(), &[20, 2]);
    }

    #[test]
    fn encoder_attention_sums_to_one() {
        let (store, enc) = encoder(30, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[4, 30, 3], |_| rng.random_range(-2.0..2.0)));
        let out = enc.forward(&mut g, &store, x).unwrap();
        for row in g.value(out.attention).data().chunks(30) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let (store, enc) = encoder(30, 1);
        assert!(matches!(enc.encode(&store, &Tensor::zeros(&[29, 3])), Err(Error::Shape(_))));
        let mut bad = Tensor::zeros(&[30, 3]);
        bad.set(&[4, 1], f64::NAN);
        assert!(matches!(enc.encode(&store, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn noise_scale_values() {
        let s = compute_noise_scale(&Tensor::zeros(&[5, 2]));
        assert!((s.sigma2[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let s = compute_noise_scale(&Tensor::full(&[5, 2], 1.0));
        assert!((s.sigma2[1] - (1.0 + 1.0f64.exp()).ln()).abs() < 1e-12);
        assert!((s.sigma2[1] - 1.313262).abs() < 1e-6);
        let s = compute_noise_scale(&Tensor::full(&[5, 2], -50.0));
        assert!(s.sigma2[0] > 0.0 && s.sigma2[0] < 1e-20);
        for i in 0..=200 {
            let mu = -100.0 + i as f64;
            assert!(softplus(mu) > 0.0, "softplus({mu})");
        }
    }

    #[test]
    fn scaled_noise_moments() {
        let n = 100_000;
        for sigma2 in [[1.0, 1.0], [4.0, 1.0]] {
            let scale = NoiseScale { sigma2: sigma2.to_vec(), mu: vec![0.0; 2] };
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let eps = sample_scaled_noise(&scale, n, &mut rng);
            let eps = &eps;
            let col = |j: usize| (0..n).map(move |i| eps.at(&[i, j]));
            let mean = |j: usize| col(j).sum::<f64>() / n as f64;
            let (m0, m1) = (mean(0), mean(1));
            let var0 = col(0).map(|v| (v - m0).powi(2)).sum::<f64>() / n as f64;
            let var1 = col(1).map(|v| (v - m1).powi(2)).sum::<f64>() / n as f64;
            assert!((var0 / sigma2[0] - 1.0).abs() < 0.02, "var0 {var0}");
            assert!((var1 / sigma2[1] - 1.0).abs() < 0.02, "var1 {var1}");
            let cov = col(0).zip(col(1)).map(|(a, b)| (a - m0) * (b - m1)).sum::<f64>() / n as f64;
            // Standard error of the sample covariance of independent columns.
            let se = (sigma2[0] * sigma2[1] / n as f64).sqrt();
            assert!(cov.abs() < 3.0 * se, "cov {cov} vs se {se}");
        }
        let scale = NoiseScale { sigma2: vec![2.0, 0.5], mu: vec![0.0; 2] };
        let a = sample_scaled_noise(&scale, 10, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_scaled_noise(&scale, 10, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}

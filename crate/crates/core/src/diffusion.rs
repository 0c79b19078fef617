//! Beta schedules, the scaled-noise forward process and ancestral sampling.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::NoiseScale;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Quadratic,
    Sigmoid,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Quadratic, ScheduleKind::Sigmoid];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Quadratic => "quadratic",
            ScheduleKind::Sigmoid => "sigmoid",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            "sigmoid" => Ok(ScheduleKind::Sigmoid),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Builds a schedule of `steps` betas running from `beta0` to `beta_k`.
pub fn make_schedule(kind: ScheduleKind, steps: usize, beta0: f64, beta_k: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(beta0 > 0.0 && beta0 <= beta_k && beta_k < 1.0) {
        return Err(Error::Parameter(format!("need 0 < beta0 <= betaK < 1, got {beta0}, {beta_k}")));
    }
    let frac = |i: usize| if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
    let lerp = |a: f64, b: f64, f: f64| (1.0 - f) * a + f * b;
    let mut beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps).map(|i| lerp(beta0, beta_k, frac(i))).collect(),
        ScheduleKind::Quadratic => (0..steps).map(|i| lerp(beta0.sqrt(), beta_k.sqrt(), frac(i)).powi(2)).collect(),
        ScheduleKind::Sigmoid => {
            let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
            let (lo, hi) = (logistic(-6.0), logistic(6.0));
            (0..steps)
                .map(|i| {
                    let s = (logistic(lerp(-6.0, 6.0, frac(i))) - lo) / (hi - lo);
                    lerp(beta0, beta_k, s)
                })
                .collect()
        }
    };
    beta[0] = beta0;
    if steps > 1 {
        beta[steps - 1] = beta_k;
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule { kind, steps, beta, alpha, alpha_bar })
}

impl DiffusionSchedule {
    fn check(&self, k: usize) -> Result<()> {
        if k >= self.steps {
            return Err(Error::StepIndex { k, steps: self.steps });
        }
        Ok(())
    }

    /// Posterior variance factor `beta_k (1 - abar_{k-1}) / (1 - abar_k)`; zero at `k = 0`.
    pub fn beta_tilde(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.beta[k] * (1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k])
        }
    }
}

/// Closed-form forward process `x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps`.
pub fn forward_diffuse(x0: &Tensor, k: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check(k)?;
    let ab = schedule.alpha_bar[k];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// One step of the Markov forward chain, `x_k = sqrt(alpha_k) x_{k-1} + sqrt(beta_k) eps`.
pub fn diffuse_step(x_prev: &Tensor, k: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check(k)?;
    let (a, b) = (schedule.alpha[k].sqrt(), schedule.beta[k].sqrt());
    Ok(x_prev.zip_map(eps, |x, e| a * x + b * e))
}

/// `x0_hat = (x_k - sqrt(1 - abar_k) eps_hat) / sqrt(abar_k)`.
pub fn predict_x0(x_k: &Tensor, eps_hat: &Tensor, k: usize, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check(k)?;
    let ab = schedule.alpha_bar[k];
    let (s, r) = ((1.0 - ab).sqrt(), ab.sqrt());
    Ok(x_k.zip_map(eps_hat, |x, e| (x - s * e) / r))
}

fn reverse_rows(x: &mut [f64], eps: &[f64], k: usize, schedule: &DiffusionSchedule, sigma: &[f64], rng: &mut impl Rng) {
    let coef = schedule.beta[k] / (1.0 - schedule.alpha_bar[k]).sqrt();
    let inv = 1.0 / schedule.alpha[k].sqrt();
    let std = schedule.beta_tilde(k).sqrt();
    let d = sigma.len();
    for (i, (xi, ei)) in x.iter_mut().zip(eps).enumerate() {
        let mean = inv * (*xi - coef * ei);
        *xi = if k > 0 { mean + std * sigma[i % d] * rng.sample::<f64, _>(StandardNormal) } else { mean };
    }
}

/// One ancestral step `x_k -> x_{k-1}` with posterior noise scaled by `sigma`.
pub fn reverse_step(
    x_k: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    schedule: &DiffusionSchedule,
    scale: &NoiseScale,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    schedule.check(k)?;
    if x_k.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("x_k {:?} vs eps_hat {:?}", x_k.shape(), eps_hat.shape())));
    }
    let mut out = x_k.clone();
    reverse_rows(out.data_mut(), eps_hat.data(), k, schedule, &scale.sigma(), rng);
    Ok(out)
}

/// Anything that predicts the noise in a batch of noised trajectories.
pub trait NoisePredictor {
    /// `x_k [N, T, D] -> eps_hat [N, T, D]` at step `k`.
    fn predict(&self, x_k: &Tensor, k: usize) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&self, x_k: &Tensor, k: usize) -> Result<Tensor> {
        self(x_k, k)
    }
}

/// Result of [`sample_batch`]: final samples `[N, T, D]` and, when tracing,
/// the state after every reverse step as `(k, x_k)` with the initial draw
/// recorded at `k = K`.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub x0: Tensor,
    pub trace: Vec<(usize, Tensor)>,
}

/// Ancestral sampling for `N` independent rows, each with its own noise scale
/// and random stream, starting from `x_K ~ N(0, diag(sigma2))`.
pub fn sample_batch<R: Rng>(
    predictor: &dyn NoisePredictor,
    scales: &[NoiseScale],
    schedule: &DiffusionSchedule,
    t_fut: usize,
    rngs: &mut [R],
    trace: bool,
) -> Result<Sampled> {
    let n = scales.len();
    if rngs.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} scales but {} random streams", n, rngs.len())));
    }
    let d = scales[0].sigma2.len();
    let row = t_fut * d;
    let sigmas: Vec<Vec<f64>> = scales.iter().map(NoiseScale::sigma).collect();
    let mut x = Tensor::zeros(&[n, t_fut, d]);
    for ((chunk, sigma), rng) in x.data_mut().chunks_mut(row).zip(&sigmas).zip(rngs.iter_mut()) {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = sigma[i % d] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut steps = Vec::new();
    if trace {
        steps.push((schedule.steps, x.clone()));
    }
    for k in (0..schedule.steps).rev() {
        let eps = predictor.predict(&x, k)?;
        if eps.shape() != x.shape() {
            return Err(Error::Shape(format!("predictor returned {:?} for {:?}", eps.shape(), x.shape())));
        }
        let eps_rows = eps.data().chunks(row);
        for (((chunk, e), sigma), rng) in x.data_mut().chunks_mut(row).zip(eps_rows).zip(&sigmas).zip(rngs.iter_mut()) {
            reverse_rows(chunk, e, k, schedule, sigma, rng);
        }
        if !x.all_finite() {
            return Err(Error::SamplingDivergence { k });
        }
        if trace {
            steps.push((k, x.clone()));
        }
    }
    Ok(Sampled { x0: x, trace: steps })
}

/// Draws `n_samples` trajectories `[T, D]` for one condition.
pub fn sample_trajectory(
    predictor: &dyn NoisePredictor,
    scale: &NoiseScale,
    schedule: &DiffusionSchedule,
    t_fut: usize,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    let d = scale.sigma2.len();
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut rngs = [&mut *rng];
        let s = sample_batch(predictor, std::slice::from_ref(scale), schedule, t_fut, &mut rngs, false)?;
        out.push(s.x0.reshape(&[t_fut, d]));
    }
    Ok(out)
}

/// One line of a sampling trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: usize,
    pub positions: Vec<[f64; 2]>,
    pub abs_error_if_gt_known: Option<f64>,
}

pub fn write_trace_jsonl(path: &Path, steps: &[TraceStep]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in steps {
        let line = serde_json::to_string(s).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_endpoints_are_exact() {
        let s = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta[0], 1e-4);
        assert_eq!(s.beta[199], 0.02);
        let log_sum: f64 = s.alpha.iter().map(|a| a.ln()).sum();
        assert!((log_sum.exp() - s.alpha_bar[199]).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar, vec![0.7]);
    }

    #[test]
    fn invalid_ranges_rejected() {
        for (k, b0, bk) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
            assert!(matches!(make_schedule(ScheduleKind::Linear, k, b0, bk), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn all_kinds_monotone() {
        for kind in ScheduleKind::ALL {
            for k in [50, 100, 200, 500] {
                let s = make_schedule(kind, k, 1e-4, 0.02).unwrap();
                assert_eq!(s.beta[0], 1e-4);
                assert_eq!(s.beta[k - 1], 0.02);
                assert!(s.beta.windows(2).all(|w| w[0] <= w[1]), "{kind} {k}");
                assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]), "{kind} {k}");
            }
        }
    }

    #[test]
    fn step_index_checked() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(forward_diffuse(&x, 10, &x, &s), Err(Error::StepIndex { k: 10, steps: 10 })));
    }

    #[test]
    fn zero_signal_and_inversion() {
        let s = make_schedule(ScheduleKind::Quadratic, 50, 1e-4, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::from_fn(&[5, 2], |_| rng.random_range(-3.0..3.0));
        let eps = Tensor::from_fn(&[5, 2], |_| rng.random_range(-1.0..1.0));
        for k in 0..50 {
            let z = forward_diffuse(&Tensor::zeros(&[5, 2]), k, &eps, &s).unwrap();
            let c = (1.0 - s.alpha_bar[k]).sqrt();
            assert_eq!(z, eps.map(|e| c * e));
            let xk = forward_diffuse(&x0, k, &eps, &s).unwrap();
            assert!(predict_x0(&xk, &eps, k, &s).unwrap().max_abs_diff(&x0) < 1e-9);
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let scale = NoiseScale { sigma2: vec![2.0, 0.3], mu: vec![0.0; 2] };
        let x = Tensor::from_fn(&[4, 2], |i| i as f64);
        let e = Tensor::from_fn(&[4, 2], |i| 0.1 * i as f64);
        let a = reverse_step(&x, &e, 0, &s, &scale, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = reverse_step(&x, &e, 0, &s, &scale, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_predictor_chain_matches_hand_steps() {
        let s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let scale = NoiseScale { sigma2: vec![0.5, 1.5], mu: vec![0.0; 2] };
        let zero = |x: &Tensor, _k: usize| Ok(Tensor::zeros(x.shape()));
        let got = sample_trajectory(&zero, &scale, &s, 6, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sig = [0.5f64.sqrt(), 1.5f64.sqrt()];
        let mut x: Vec<f64> = (0..12).map(|i| sig[i % 2] * rng.sample::<f64, _>(StandardNormal)).collect();
        for k in (0..20).rev() {
            let bt = if k > 0 { s.beta[k] * (1.0 - s.alpha_bar[k - 1]) / (1.0 - s.alpha_bar[k]) } else { 0.0 };
            for (i, v) in x.iter_mut().enumerate() {
                *v /= s.alpha[k].sqrt();
                if k > 0 {
                    *v += bt.sqrt() * sig[i % 2] * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        assert!(got[0].data().iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(got[0].all_finite());
    }

    #[test]
    fn divergence_is_reported() {
        let s = make_schedule(ScheduleKind::Linear, 5, 1e-4, 0.02).unwrap();
        let scale = NoiseScale::isotropic(2);
        let bad = |x: &Tensor, k: usize| Ok(if k == 2 { Tensor::full(x.shape(), f64::INFINITY) } else { Tensor::zeros(x.shape()) });
        let err = sample_trajectory(&bad, &scale, &s, 4, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::SamplingDivergence { k: 2 }));
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = make_schedule(ScheduleKind::Sigmoid, 30, 1e-4, 0.02).unwrap();
        let scale = NoiseScale { sigma2: vec![0.7, 1.2], mu: vec![0.0; 2] };
        let p = |x: &Tensor, k: usize| Ok(x.map(|v| 0.1 * v + k as f64 * 1e-3));
        let a = sample_trajectory(&p, &scale, &s, 8, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_trajectory(&p, &scale, &s, 8, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn trace_round_trips_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let steps = vec![
            TraceStep { k: 2, positions: vec![[0.0, 1.0]], abs_error_if_gt_known: Some(0.5) },
            TraceStep { k: 1, positions: vec![[0.5, 1.5]], abs_error_if_gt_known: None },
        ];
        write_trace_jsonl(&path, &steps).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<TraceStep> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, steps);
    }
}

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Episode, Frame, ScenarioTag};
use crate::error::{Error, Result};

/// Intelligent Driver Model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    /// Desired free-road speed v0 (m/s).
    pub desired_speed: f64,
    /// Jam distance s0 (m).
    pub min_gap: f64,
    /// Safe time headway T (s).
    pub time_headway: f64,
    /// Maximum acceleration a (m/s^2).
    pub max_accel: f64,
    /// Comfortable deceleration b (m/s^2).
    pub comfortable_decel: f64,
    /// Free-road acceleration exponent.
    pub exponent: f64,
    /// Physical braking limit applied to the IDM output (m/s^2).
    pub max_brake: f64,
    /// Leader length subtracted from center spacing to get the bumper gap (m).
    pub vehicle_length: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 30.0,
            min_gap: 2.0,
            time_headway: 1.5,
            max_accel: 1.0,
            comfortable_decel: 2.0,
            exponent: 4.0,
            max_brake: 9.0,
            vehicle_length: 5.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("desired_speed", self.desired_speed),
            ("min_gap", self.min_gap),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfortable_decel", self.comfortable_decel),
            ("exponent", self.exponent),
            ("max_brake", self.max_brake),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Precondition(format!("IDM {name} must be positive, got {v}")));
            }
        }
        if !(self.vehicle_length >= 0.0) {
            return Err(Error::Precondition("IDM vehicle_length must be non-negative".into()));
        }
        Ok(())
    }

    /// IDM acceleration for speed `v`, bumper gap `gap` and approach rate
    /// `dv = v - v_leader`.
    pub fn acceleration(&self, v: f64, gap: f64, dv: f64) -> f64 {
        let s_star = self.min_gap
            + (v * self.time_headway + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt())).max(0.0);
        self.max_accel * (1.0 - (v / self.desired_speed).powf(self.exponent) - (s_star / gap).powi(2))
    }

    /// Bumper gap at which a follower at speed `v` behind a leader at the
    /// same speed has zero acceleration.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        (self.min_gap + v * self.time_headway) / (1.0 - (v / self.desired_speed).powf(self.exponent)).sqrt()
    }

    fn jittered(&self, rng: &mut impl Rng, rel: f64) -> Self {
        let mut j = |v: f64| if rel > 0.0 { v * (1.0 + rng.random_range(-rel..=rel)) } else { v };
        Self {
            desired_speed: j(self.desired_speed),
            min_gap: j(self.min_gap),
            time_headway: j(self.time_headway),
            max_accel: j(self.max_accel),
            comfortable_decel: j(self.comfortable_decel),
            exponent: self.exponent,
            max_brake: self.max_brake,
            vehicle_length: self.vehicle_length,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeaderProfile {
    Constant,
    SinusoidalSpeed,
    StopAndGo,
}

impl std::str::FromStr for LeaderProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LeaderProfile::Constant),
            "sinusoidal-speed" => Ok(LeaderProfile::SinusoidalSpeed),
            "stop-and-go" => Ok(LeaderProfile::StopAndGo),
            other => Err(Error::Config(format!("unknown leader profile {other:?}"))),
        }
    }
}

/// Everything needed to synthesize a reproducible batch of IDM episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    pub n: usize,
    /// Frames per episode.
    pub horizon: usize,
    pub dt: f64,
    pub idm: IdmParams,
    pub profile: LeaderProfile,
    pub seed: u64,
    /// Leader base speed drawn uniformly from this range (m/s).
    pub leader_speed: [f64; 2],
    /// Relative per-episode perturbation of the IDM parameters.
    pub idm_jitter: f64,
    /// Relative perturbation of the initial gap around equilibrium.
    pub gap_jitter: f64,
    pub scenario: ScenarioTag,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            n: 1,
            horizon: 200,
            dt: 0.1,
            idm: IdmParams::default(),
            profile: LeaderProfile::Constant,
            seed: 0,
            leader_speed: [8.0, 16.0],
            idm_jitter: 0.0,
            gap_jitter: 0.0,
            scenario: ScenarioTag::Synthetic,
        }
    }
}

enum Phase {
    Cruise { left: f64 },
    Brake { target: f64, rate: f64 },
    Dwell { left: f64 },
    Launch { rate: f64 },
}

/// Leader speed generator for one episode.
struct Leader {
    profile: LeaderProfile,
    base: f64,
    amp: f64,
    period: f64,
    phi: f64,
    phase: Phase,
    v: f64,
    time: f64,
}

impl Leader {
    fn new(profile: LeaderProfile, base: f64, rng: &mut impl Rng, dt: f64) -> Self {
        let mut leader = Self {
            profile,
            base,
            amp: rng.random_range(0.1..0.4),
            period: rng.random_range(8.0..30.0),
            phi: rng.random_range(0.0..2.0 * PI),
            phase: Phase::Cruise { left: rng.random_range(2.0..8.0) },
            v: base,
            time: 0.0,
        };
        if profile == LeaderProfile::StopAndGo {
            // Random starting point within the stop-and-go cycle.
            let warmup = (rng.random_range(0.0..30.0) / dt) as usize;
            for _ in 0..warmup {
                leader.step(rng, dt);
            }
            leader.time = 0.0;
        } else {
            leader.v = leader.speed_at(0.0);
        }
        leader
    }

    fn speed_at(&self, t: f64) -> f64 {
        match self.profile {
            LeaderProfile::Constant => self.base,
            LeaderProfile::SinusoidalSpeed => self.base * (1.0 + self.amp * (2.0 * PI * t / self.period + self.phi).sin()),
            LeaderProfile::StopAndGo => self.v,
        }
    }

    /// Advances by `dt` and returns the new speed.
    fn step(&mut self, rng: &mut impl Rng, dt: f64) -> f64 {
        self.time += dt;
        if self.profile != LeaderProfile::StopAndGo {
            self.v = self.speed_at(self.time).max(0.0);
            return self.v;
        }
        self.phase = match std::mem::replace(&mut self.phase, Phase::Dwell { left: 0.0 }) {
            Phase::Cruise { left } if left > dt => Phase::Cruise { left: left - dt },
            Phase::Cruise { .. } => Phase::Brake { target: rng.random_range(0.0..3.0), rate: rng.random_range(1.0..3.0) },
            Phase::Brake { target, rate } => {
                self.v = (self.v - rate * dt).max(target);
                if self.v <= target {
                    Phase::Dwell { left: rng.random_range(0.5..4.0) }
                } else {
                    Phase::Brake { target, rate }
                }
            }
            Phase::Dwell { left } if left > dt => Phase::Dwell { left: left - dt },
            Phase::Dwell { .. } => Phase::Launch { rate: rng.random_range(0.8..2.0) },
            Phase::Launch { rate } => {
                self.v = (self.v + rate * dt).min(self.base);
                if self.v >= self.base {
                    Phase::Cruise { left: rng.random_range(2.0..8.0) }
                } else {
                    Phase::Launch { rate }
                }
            }
        };
        self.v
    }
}

/// Synthesizes leader/follower episodes with an IDM follower.
///
/// The follower starts at the equilibrium gap for the leader's initial speed
/// (optionally perturbed) and is integrated with the ballistic update. Each
/// episode draws from its own ChaCha stream, so output depends only on `spec`.
pub fn generate_idm_episodes(spec: &SynthesisSpec) -> Result<Vec<Episode>> {
    if spec.n == 0 {
        return Err(Error::Precondition("episode count must be at least 1".into()));
    }
    if spec.horizon < 2 {
        return Err(Error::Precondition(format!("horizon must be at least 2 frames, got {}", spec.horizon)));
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(Error::Precondition(format!("dt must be positive, got {}", spec.dt)));
    }
    let [lo, hi] = spec.leader_speed;
    if !(0.0..1.0).contains(&spec.gap_jitter) || !(0.0..1.0).contains(&spec.idm_jitter) {
        return Err(Error::Precondition("jitter fractions must lie in [0, 1)".into()));
    }
    if !(lo >= 0.0 && hi >= lo) {
        return Err(Error::Precondition(format!("invalid leader speed range [{lo}, {hi}]")));
    }
    spec.idm.validate()?;
    (0..spec.n).map(|i| generate_one(spec, i)).collect()
}

fn generate_one(spec: &SynthesisSpec, index: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let dt = spec.dt;
    let [lo, hi] = spec.leader_speed;
    let base = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let idm = spec.idm.jittered(&mut rng, spec.idm_jitter);
    if base >= idm.desired_speed {
        return Err(Error::Generation {
            episode: index,
            message: format!("leader speed {base} not below follower desired speed {}", idm.desired_speed),
        });
    }
    let heading = rng.random_range(0.0..2.0 * PI);
    let dir = [heading.cos(), heading.sin()];
    let origin = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
    let mut leader = Leader::new(spec.profile, base, &mut rng, dt);

    let mut v_lea = leader.v;
    let mut v_fol = v_lea;
    let jitter = if spec.gap_jitter > 0.0 { 1.0 + rng.random_range(-spec.gap_jitter..=spec.gap_jitter) } else { 1.0 };
    let gap0 = idm.equilibrium_gap(v_fol) * jitter;
    let mut s_fol = 0.0;
    let mut s_lea = gap0 + idm.vehicle_length;

    let place = |s: f64| [origin[0] + s * dir[0], origin[1] + s * dir[1]];
    let mut frames = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let gap = s_lea - s_fol - idm.vehicle_length;
        if !(gap > 0.0) {
            return Err(Error::Generation { episode: index, message: format!("collision at frame {t} (gap {gap:.3} m)") });
        }
        frames.push(Frame { t: t as i64, x_lea: place(s_lea), v_lea, x_fol: place(s_fol), v_fol });

        let accel = idm.acceleration(v_fol, gap, v_fol - v_lea).max(-idm.max_brake);
        if v_fol + accel * dt < 0.0 {
            s_fol -= v_fol * v_fol / (2.0 * accel);
            v_fol = 0.0;
        } else {
            s_fol += v_fol * dt + 0.5 * accel * dt * dt;
            v_fol += accel * dt;
        }
        let v_next = leader.step(&mut rng, dt);
        s_lea += 0.5 * (v_lea + v_next) * dt;
        v_lea = v_next;
    }
    Ok(Episode { episode_id: format!("synth-{}-{index:05}", spec.seed), dt, frames, scenario: spec.scenario })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dot, sub};

    fn spec(profile: LeaderProfile) -> SynthesisSpec {
        SynthesisSpec { n: 4, horizon: 300, profile, seed: 7, idm_jitter: 0.1, gap_jitter: 0.2, ..Default::default() }
    }

    #[test]
    fn equilibrium_follower_converges_to_leader_speed() {
        let idm = IdmParams::default();
        // s_e = (s0 + v T) / sqrt(1 - (v / v0)^4) for v = 10, v0 = 30.
        let expected_gap = (2.0 + 10.0 * 1.5) / (1.0 - (10.0f64 / 30.0).powi(4)).sqrt();
        assert!((idm.equilibrium_gap(10.0) - expected_gap).abs() < 1e-12);
        assert!(idm.acceleration(10.0, expected_gap, 0.0).abs() < 1e-12);

        for gap_jitter in [0.0, 0.3] {
            let s = SynthesisSpec {
                n: 3,
                horizon: 601,
                leader_speed: [10.0, 10.0],
                gap_jitter,
                ..Default::default()
            };
            for ep in generate_idm_episodes(&s).unwrap() {
                let last = ep.frames.last().unwrap();
                assert!((last.v_fol - 10.0).abs() < 0.01, "v_fol at 60 s = {}", last.v_fol);
                let dir = ep.travel_direction().unwrap();
                let gap = dot(sub(last.x_lea, last.x_fol), dir) - idm.vehicle_length;
                assert!((gap - expected_gap).abs() < 0.05, "gap {gap} vs {expected_gap}");
            }
        }
    }

    #[test]
    fn zero_episodes_rejected() {
        let s = SynthesisSpec { n: 0, ..Default::default() };
        assert!(matches!(generate_idm_episodes(&s), Err(Error::Precondition(_))));
    }

    #[test]
    fn invalid_idm_params_rejected() {
        let s = SynthesisSpec { idm: IdmParams { time_headway: 0.0, ..Default::default() }, ..Default::default() };
        assert!(matches!(generate_idm_episodes(&s), Err(Error::Precondition(_))));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for profile in [LeaderProfile::Constant, LeaderProfile::SinusoidalSpeed, LeaderProfile::StopAndGo] {
            let a = generate_idm_episodes(&spec(profile)).unwrap();
            let b = generate_idm_episodes(&spec(profile)).unwrap();
            assert_eq!(a, b);
            let c = generate_idm_episodes(&SynthesisSpec { seed: 8, ..spec(profile) }).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn generated_episodes_satisfy_invariants() {
        for profile in [LeaderProfile::Constant, LeaderProfile::SinusoidalSpeed, LeaderProfile::StopAndGo] {
            let s = SynthesisSpec { n: 20, ..spec(profile) };
            for ep in generate_idm_episodes(&s).unwrap() {
                ep.validate().unwrap();
                assert_eq!(ep.len(), 300);
            }
        }
    }

    #[test]
    fn stop_and_go_leader_actually_slows_down() {
        let s = SynthesisSpec { n: 10, horizon: 600, ..spec(LeaderProfile::StopAndGo) };
        let eps = generate_idm_episodes(&s).unwrap();
        let slow = eps.iter().filter(|e| e.frames.iter().any(|f| f.v_lea < 3.0)).count();
        assert!(slow >= 8, "only {slow} of 10 episodes reach low speed");
    }

    #[test]
    fn aggressive_leader_braking_is_reported_as_collision() {
        // A follower that can barely brake cannot avoid a stopping leader.
        let s = SynthesisSpec {
            n: 10,
            horizon: 900,
            profile: LeaderProfile::StopAndGo,
            leader_speed: [20.0, 25.0],
            idm: IdmParams { max_brake: 0.3, ..Default::default() },
            ..Default::default()
        };
        match generate_idm_episodes(&s) {
            Err(Error::Generation { .. }) => {}
            other => panic!("expected a generation error, got {:?}", other.map(|v| v.len())),
        }
    }
}

//! Car-following episodes: CSV ingestion, IDM synthesis, windowing and the
//! ego-centric frame.

mod csv_io;
mod idm;
mod window;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_episodes, write_episodes};
pub use idm::{generate_idm_episodes, IdmParams, LeaderProfile, SynthesisSpec};
pub use window::{denormalize, normalize, normalize_robust, window_samples, FrameOrigin, SampleWindow};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioTag {
    #[serde(rename = "H-H")]
    HumanHuman,
    #[serde(rename = "A-H")]
    AvHuman,
    #[serde(rename = "H-A")]
    HumanAv,
    #[serde(rename = "SYNTH")]
    Synthetic,
}

impl ScenarioTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioTag::HumanHuman => "H-H",
            ScenarioTag::AvHuman => "A-H",
            ScenarioTag::HumanAv => "H-A",
            ScenarioTag::Synthetic => "SYNTH",
        }
    }
}

impl std::fmt::Display for ScenarioTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H-H" => Ok(ScenarioTag::HumanHuman),
            "A-H" => Ok(ScenarioTag::AvHuman),
            "H-A" => Ok(ScenarioTag::HumanAv),
            "SYNTH" => Ok(ScenarioTag::Synthetic),
            other => Err(Error::Schema(format!("unknown scenario tag {other:?}"))),
        }
    }
}

/// One sampled instant of a leader/follower pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Frame index; consecutive frames are exactly `dt` apart.
    pub t: i64,
    pub x_lea: Vec2,
    pub v_lea: f64,
    pub x_fol: Vec2,
    pub v_fol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub dt: f64,
    pub frames: Vec<Frame>,
    pub scenario: ScenarioTag,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Overall direction of travel: the follower's net displacement, or the
    /// follower-to-leader vector when the follower never moves.
    pub fn travel_direction(&self) -> Option<Vec2> {
        let first = self.frames.first()?;
        let last = self.frames.last()?;
        let d = sub(last.x_fol, first.x_fol);
        let d = if norm(d) > 1e-9 { d } else { sub(first.x_lea, first.x_fol) };
        let n = norm(d);
        (n > 1e-12).then(|| [d[0] / n, d[1] / n])
    }

    /// Checks the episode invariants: unit frame steps, non-negative speeds
    /// and positive longitudinal spacing everywhere.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidEpisode { episode: self.episode_id.clone(), message };
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad(format!("dt must be positive, got {}", self.dt)));
        }
        for w in self.frames.windows(2) {
            if w[1].t != w[0].t + 1 {
                return Err(bad(format!("frames {} and {} are not consecutive", w[0].t, w[1].t)));
            }
        }
        let dir = self.travel_direction().ok_or_else(|| bad("cannot determine travel direction".into()))?;
        for f in &self.frames {
            let finite = f.x_lea.iter().chain(&f.x_fol).chain([&f.v_lea, &f.v_fol]).all(|v| v.is_finite());
            if !finite {
                return Err(bad(format!("non-finite value at frame {}", f.t)));
            }
            if f.v_lea < 0.0 || f.v_fol < 0.0 {
                return Err(bad(format!("negative speed at frame {}", f.t)));
            }
            let spacing = dot(sub(f.x_lea, f.x_fol), dir);
            if spacing <= 0.0 {
                return Err(bad(format!("non-positive spacing {spacing} at frame {}", f.t)));
            }
        }
        Ok(())
    }
}

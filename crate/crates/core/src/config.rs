//! Run configuration shared by every pipeline stage.
//!
//! A run is described by one TOML file. Every key is optional; missing keys
//! take the defaults below. The top-level `seed` drives all randomness and
//! can be overridden with the `FOLLOWGEN_SEED` environment variable.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/default"
//! horizons = [3.0, 4.0, 5.0]
//!
//! [data]
//! window_stride = 10
//! # train_path = "episodes/train.csv"   # default: <out_dir>/data/train.csv
//! # test_path = "episodes/test.csv"     # default: <out_dir>/data/test.csv
//!
//! [data.synthesis]       # training episodes written by gen-data
//! n = 2000
//! horizon = 80
//! profile = "stop-and-go"
//!
//! [data.test_synthesis]  # held-out episodes written by gen-data
//! n = 200
//!
//! [model]                # T_his, T_fut, network widths, schedule
//! [model.diffusion]
//! steps = 200
//!
//! [train]
//! epochs = 20
//!
//! [eval]
//! draws = 1
//!
//! [ablation]
//! variants = ["full", "no_cross_attention"]
//! k_grid = [200]
//! schedules = ["linear"]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_episodes, normalize_robust, window_samples, Episode, LeaderProfile, SampleWindow, ScenarioTag, SynthesisSpec};
use crate::error::{Error, Result};
use crate::evaluation::{horizon_frames, AblationGrid, DEFAULT_HORIZONS};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "FOLLOWGEN_SEED";

/// Offset mixed into the seed of the held-out synthetic set.
const TEST_SEED_SALT: u64 = 0x7e57_5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Frames between consecutive window starts.
    pub window_stride: usize,
    pub synthesis: SynthesisSpec,
    pub test_synthesis: SynthesisSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = |n| SynthesisSpec {
            n,
            horizon: 80,
            profile: LeaderProfile::StopAndGo,
            idm_jitter: 0.2,
            gap_jitter: 0.2,
            scenario: ScenarioTag::HumanHuman,
            ..Default::default()
        };
        Self { train_path: None, test_path: None, window_stride: 10, synthesis: synth(2000), test_synthesis: synth(200) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per case; above 1 reports best-of-N.
    pub draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { draws: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub horizons: Vec<f64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            horizons: DEFAULT_HORIZONS.to_vec(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `FOLLOWGEN_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Propagates the run seed and scenario into the stage configurations.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.synthesis.seed = self.seed;
        self.data.test_synthesis.seed = self.seed ^ TEST_SEED_SALT;
        self.train.seed = self.seed;
        self.train.scenario = self.data.synthesis.scenario;
        self.data.test_synthesis.dt = self.data.synthesis.dt;
        self.data.test_synthesis.scenario = self.data.synthesis.scenario;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.window_stride == 0 {
            return Err(Error::Config("data.window_stride must be positive".into()));
        }
        let span = self.model.t_his + self.model.t_fut;
        for (name, s) in [("synthesis", &self.data.synthesis), ("test_synthesis", &self.data.test_synthesis)] {
            if s.horizon < span {
                return Err(Error::Config(format!("data.{name}.horizon {} is shorter than t_his + t_fut = {span}", s.horizon)));
            }
        }
        if self.horizons.is_empty() {
            return Err(Error::Config("at least one evaluation horizon is required".into()));
        }
        for &h in &self.horizons {
            horizon_frames(h, self.data.synthesis.dt, self.model.t_fut)?;
        }
        if self.eval.draws == 0 {
            return Err(Error::Config("eval.draws must be positive".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.data.synthesis.dt
    }

    pub fn train_path(&self) -> PathBuf {
        self.data.train_path.clone().unwrap_or_else(|| self.out_dir.join("data").join("train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.data.test_path.clone().unwrap_or_else(|| self.out_dir.join("data").join("test.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("train").join("checkpoint.json")
    }

    /// Cuts episodes into ego-frame windows sized for the model.
    pub fn windows(&self, episodes: &[Episode]) -> Result<Vec<SampleWindow>> {
        prepare_windows(episodes, self.model.t_his, self.model.t_fut, self.data.window_stride)
    }

    pub fn load_windows(&self, path: &Path) -> Result<Vec<SampleWindow>> {
        let episodes = load_episodes(path, self.dt())?;
        let windows = self.windows(&episodes)?;
        if windows.is_empty() {
            return Err(Error::Precondition(format!(
                "{} has no episode long enough for {} + {} frames",
                path.display(),
                self.model.t_his,
                self.model.t_fut
            )));
        }
        Ok(windows)
    }
}

/// Windows every episode and rotates each window into its ego frame.
pub fn prepare_windows(episodes: &[Episode], t_his: usize, t_fut: usize, stride: usize) -> Result<Vec<SampleWindow>> {
    episodes.iter().flat_map(|e| window_samples(e, t_his, t_fut, stride)).map(|w| normalize_robust(&w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default().resolve().unwrap();
        assert_eq!(cfg.model.diffusion.steps, 200);
        assert_eq!(cfg.model.diffusion.beta0, 1e-4);
        assert_eq!(cfg.model.diffusion.beta_k, 0.02);
        assert_eq!(cfg.train.batch_size, 64);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_files_and_errors() {
        let cfg = RunConfig::from_toml("seed = 7\n[model.diffusion]\nsteps = 50\nkind = \"sigmoid\"\n").unwrap().resolve().unwrap();
        assert_eq!(cfg.model.diffusion.steps, 50);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.data.synthesis.seed, 7);
        assert_ne!(cfg.data.test_synthesis.seed, 7);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("horizons = [6.0]").unwrap().resolve(), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nlr = -1.0").unwrap().resolve(), Err(Error::Config(_))));
    }
}

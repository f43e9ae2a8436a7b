//! Run configuration shared by training, evaluation and the ablation grid.
//!
//! Precedence is built-in defaults, then a TOML file, then command-line
//! overrides applied by the caller.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arena::{Arena, EnvConfig, Observation, VecEnv};
use crate::error::{Error, Result};
use crate::policy::ActorCritic;
use crate::ppo::{self, CurveRow, PpoConfig, TrainOutcome};
use crate::rng;
use crate::robot::RobotModel;
use crate::sensors::{SensorNet, SensorNetConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Robot model file; the built-in model when absent.
    pub robot: Option<PathBuf>,
    pub env: EnvConfig,
    pub sensors: SensorNetConfig,
    pub ppo: PpoConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        Ok(cfg)
    }

    /// Load a file; a relative `robot` path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml_str(&text, path)?;
        if let (Some(robot), Some(dir)) = (&cfg.robot, path.parent()) {
            if robot.is_relative() {
                cfg.robot = Some(dir.join(robot));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sensors.validate()?;
        self.ppo.validate()
    }

    pub fn robot_model(&self) -> Result<RobotModel> {
        match &self.robot {
            Some(p) => RobotModel::load(p),
            None => Ok(RobotModel::default_model()),
        }
    }

    pub fn arena(&self) -> Result<Arena> {
        self.validate()?;
        let model = self.robot_model()?;
        let sensors = SensorNet::new(&model, self.sensors.clone())?;
        Arena::new(model, sensors, self.env.clone())
    }

    /// The environment batch used for training with `seed`.
    pub fn vec_env(&self, seed: u64) -> Result<(VecEnv, Vec<Observation>)> {
        let arena = self.arena()?;
        Ok(VecEnv::new(arena, self.ppo.num_envs, rng::derive_seed(seed, rng::label("env"))))
    }

    /// Train a policy from scratch with this configuration.
    pub fn train(&self, seed: u64, on_iteration: impl FnMut(&CurveRow, &ActorCritic)) -> Result<TrainOutcome> {
        let (mut env, obs) = self.vec_env(seed)?;
        ppo::train(&mut env, obs, &self.ppo, seed, on_iteration)
    }

    /// JSON form stored in checkpoint sidecars.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run configuration serializes")
    }
}

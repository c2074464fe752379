//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use affordlab::flow::FlowConfig;
use affordlab::geometry::DEFAULT_CANDIDATES;
use affordlab::netcore::TrainerConfig;
use affordlab::pipeline::{LoopConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub structure_model: Option<PathBuf>,
    pub affordance_model: Option<PathBuf>,
}

/// Everything a command needs besides its positional arguments.
///
/// `resolution`, `channels`, `image_size` and `seed` are copied into both
/// trainer configs before training, so the values under `structure_trainer`
/// and `affordance_trainer` for those four fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    pub channels: usize,
    pub image_size: u32,
    /// Objects written by `gen-dataset`.
    pub dataset_count: usize,
    pub structure_flow: FlowConfig,
    /// Affordance flow used at sampling time.
    pub affordance_flow: FlowConfig,
    /// Affordance flow used during training.
    pub affordance_train_flow: FlowConfig,
    pub structure_trainer: TrainerConfig,
    pub affordance_trainer: TrainerConfig,
    pub candidates: usize,
    pub budget: usize,
    pub strategy: Strategy,
    /// Views used by `reconstruct` when none are given on the command line.
    pub views: usize,
    /// Largest view count swept by the views-vs-IoU benchmark.
    pub bench_max_views: usize,
    /// Rendered views and sampled points for surface metrics.
    pub eval_views: usize,
    pub eval_points: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            resolution: 8,
            channels: 16,
            image_size: 128,
            dataset_count: 20,
            structure_flow: FlowConfig::structure(),
            affordance_flow: FlowConfig::affordance_eval(),
            affordance_train_flow: FlowConfig::affordance_train(),
            structure_trainer: TrainerConfig::default(),
            affordance_trainer: TrainerConfig::default(),
            candidates: DEFAULT_CANDIDATES,
            budget: 4,
            strategy: Strategy::Active,
            views: 1,
            bench_max_views: 8,
            eval_views: 8,
            eval_points: 10_000,
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainKind {
    Structure,
    Affordance,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn trainer(&self, kind: TrainKind) -> TrainerConfig {
        let base = match kind {
            TrainKind::Structure => &self.structure_trainer,
            TrainKind::Affordance => &self.affordance_trainer,
        };
        TrainerConfig {
            seed: self.seed,
            resolution: self.resolution,
            channels: self.channels,
            image_size: self.image_size,
            ..base.clone()
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            resolution: self.resolution,
            channels: self.channels,
            image_size: self.image_size,
            candidates: self.candidates,
            structure_flow: self.structure_flow,
            affordance_flow: self.affordance_flow,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        for kind in [TrainKind::Structure, TrainKind::Affordance] {
            self.trainer(kind).validate()?;
        }
        for f in [
            &self.structure_flow,
            &self.affordance_flow,
            &self.affordance_train_flow,
        ] {
            f.validate()?;
        }
        if self.candidates == 0 || self.budget == 0 || self.views == 0 || self.bench_max_views == 0
        {
            return bad("candidates, budget, views and bench_max_views must be positive");
        }
        if self.budget > self.candidates {
            return bad("budget exceeds the candidate count");
        }
        if self.dataset_count == 0 {
            return bad("dataset_count must be positive");
        }
        if self.eval_views == 0 || self.eval_points == 0 {
            return bad("eval_views and eval_points must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig =
            serde_json::from_str(r#"{"seed": 3, "structure_flow": {"steps": 20}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.structure_flow.steps, 20);
        assert_eq!(partial.structure_flow.guidance_strength, 3.0);
    }

    #[test]
    fn shared_fields_override_trainer_values() {
        let mut c = RunConfig {
            seed: 11,
            resolution: 6,
            ..RunConfig::default()
        };
        c.affordance_trainer.resolution = 32;
        let t = c.trainer(TrainKind::Affordance);
        assert_eq!((t.seed, t.resolution), (11, 6));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = RunConfig {
            budget: 0,
            ..RunConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::default();
        c.structure_flow.steps = 0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }
}

//! Desk-scale trainer for studying update sparsity: a small policy network trained with a
//! preference objective on its own samples or a supervised objective on mismatched targets,
//! with parameters optionally stored as bfloat16.

mod data;
mod model;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{sample_action, sample_distinct_pair, sample_preference_batch, sample_sft_batch, Teacher};
pub use model::{
    dpo_loss_and_grad, forward, policy_forward, sft_loss_and_grad, Forward, Labeled, PolicyShape,
    PreferencePair, TENSOR_NAMES,
};
pub use train::{
    agreement, conjecture_replay, init_params, mean_final_sparsity, sweep, toy_schema, train, train_from,
    ReplayOutcome, SweepEntry, ToyRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Supervised next-action training on targets from a mismatched teacher.
    #[serde(rename = "SFT_OOD")]
    SftOod,
    /// Preference optimization on pairs sampled from the current policy.
    #[serde(rename = "DPO_IND")]
    DpoInd,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::SftOod => "SFT_OOD",
            Objective::DpoInd => "DPO_IND",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "SFT_OOD" => Ok(Objective::SftOod),
            "DPO_IND" => Ok(Objective::DpoInd),
            _ => Err(Error::Config(format!("unknown objective {s:?} (expected SFT_OOD or DPO_IND)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamStorage {
    /// Parameters are rounded to bfloat16 after every update.
    #[serde(rename = "BF16_EMULATED")]
    Bf16Emulated,
    #[serde(rename = "F32")]
    F32,
}

impl std::fmt::Display for ParamStorage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamStorage::Bf16Emulated => "BF16_EMULATED",
            ParamStorage::F32 => "F32",
        })
    }
}

impl std::str::FromStr for ParamStorage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "BF16_EMULATED" | "BF16" => Ok(ParamStorage::Bf16Emulated),
            "F32" => Ok(ParamStorage::F32),
            _ => Err(Error::Config(format!("unknown storage {s:?} (expected BF16_EMULATED or F32)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with f32 moment estimates (beta1 0.9, beta2 0.999, eps 1e-8).
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Inverse temperature of the preference objective.
    pub beta: f64,
    pub seed: u64,
    pub objective: Objective,
    pub param_storage: ParamStorage,
    pub optimizer: Optimizer,
    /// Softmax temperature of the teacher distribution that supplies supervised targets.
    pub teacher_temperature: f64,
    /// Keep a parameter snapshot every this many steps (0 disables).
    pub snapshot_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            input_dim: 32,
            hidden_dim: 64,
            num_actions: 16,
            steps: 2000,
            batch: 32,
            lr: 0.01,
            beta: 0.1,
            seed: 0,
            objective: Objective::DpoInd,
            param_storage: ParamStorage::Bf16Emulated,
            optimizer: Optimizer::Sgd,
            teacher_temperature: 0.5,
            snapshot_every: 0,
        }
    }
}

impl ToyConfig {
    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            num_actions: self.num_actions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_actions == 0 {
            return bad("all dimensions must be at least 1".into());
        }
        if self.objective == Objective::DpoInd && self.num_actions < 2 {
            return bad("preference training needs at least 2 actions".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.objective == Objective::DpoInd && !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta must be positive for DPO_IND, got {}", self.beta));
        }
        if !(self.teacher_temperature.is_finite() && self.teacher_temperature > 0.0) {
            return bad(format!(
                "teacher_temperature must be positive, got {}",
                self.teacher_temperature
            ));
        }
        Ok(())
    }

    /// Loads a config from TOML (`.toml`) or JSON (anything else). Missing fields take
    /// their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ToyConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

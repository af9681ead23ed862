//! Experiment configuration: one flat key-value file covering every stage.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::{CollabConfig, CollabSwitches, FusionConfig};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::neighbors::NeighborConfig;
use crate::numerics::OptimizerKind;
use crate::pretrain::PretrainConfig;
use crate::privacy::PrivacyBudget;
use crate::recommender::TrainConfig;

/// Component switched off for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Category-prediction pretraining.
    #[serde(rename = "-CP")]
    Cp,
    /// Distance-prediction pretraining.
    #[serde(rename = "-DP")]
    Dp,
    /// All neighbor exchange.
    #[serde(rename = "-AN")]
    An,
    /// Geographical neighbors.
    #[serde(rename = "-GN")]
    Gn,
    /// Semantic neighbors.
    #[serde(rename = "-SN")]
    Sn,
    /// Contrastive fusion; the two enhanced models are simply averaged.
    #[serde(rename = "-MIM")]
    Mim,
    /// Laplace perturbation.
    #[serde(rename = "-PP")]
    Pp,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [Self::Cp, Self::Dp, Self::An, Self::Gn, Self::Sn, Self::Mim, Self::Pp];

    pub fn label(self) -> &'static str {
        match self {
            Self::Cp => "-CP",
            Self::Dp => "-DP",
            Self::An => "-AN",
            Self::Gn => "-GN",
            Self::Sn => "-SN",
            Self::Mim => "-MIM",
            Self::Pp => "-PP",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().trim_start_matches('-').to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|a| a.label()[1..] == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected one of -CP -DP -AN -GN -SN -MIM -PP)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub d: usize,
    pub q: usize,
    pub mu: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub dropout: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub n_neg: usize,
    pub n_cp: usize,
    pub n1: usize,
    pub n2: usize,
    pub n_cand: usize,
    pub seq_cap: usize,
    pub threshold_km: f64,
    pub mim_steps: usize,
    pub optimizer: OptimizerKind,
    pub tolerance: f64,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_optimizer: OptimizerKind,
    pub pretrain_far_cap: usize,

    pub min_user_checkins: usize,
    pub min_poi_visits: usize,

    pub ablations: BTreeSet<Ablation>,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pre = PretrainConfig::default();
        ExperimentConfig {
            seed: 0,
            d: 32,
            q: 30,
            mu: 0.3,
            epsilon: 0.1,
            lr: 0.002,
            dropout: 0.2,
            batch: 16,
            max_epochs: 50,
            n_neg: 5,
            n_cp: 5,
            n1: 5,
            n2: 5,
            n_cand: 200,
            seq_cap: 200,
            threshold_km: 10.0,
            mim_steps: 5,
            optimizer: OptimizerKind::Sgd,
            tolerance: 1e-4,
            pretrain_epochs: pre.max_epochs,
            pretrain_lr: pre.lr,
            pretrain_batch: pre.batch_size,
            pretrain_optimizer: pre.optimizer,
            pretrain_far_cap: pre.far_cap,
            min_user_checkins: 2,
            min_poi_visits: 1,
            ablations: BTreeSet::new(),
            synth: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("q", self.q),
            ("batch", self.batch),
            ("n_neg", self.n_neg),
            ("n_cp", self.n_cp),
            ("n1", self.n1),
            ("n2", self.n2),
            ("pretrain_batch", self.pretrain_batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be >= 1")));
        }
        if self.seq_cap < 2 {
            return Err(Error::Config("`seq_cap` must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("`mu` must lie in [0, 1], got {}", self.mu)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("`epsilon` must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("`dropout` must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr >= 0.0 && self.pretrain_lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(self.threshold_km > 0.0) {
            return Err(Error::Config("`threshold_km` must be > 0".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("`tolerance` must be >= 0".into()));
        }
        self.synth.validate()
    }

    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn with_ablations(&self, ablations: &[Ablation]) -> Self {
        ExperimentConfig {
            ablations: ablations.iter().copied().collect(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn budget(&self) -> PrivacyBudget {
        PrivacyBudget {
            epsilon: self.epsilon,
            enabled: !self.ablated(Ablation::Pp),
            ..PrivacyBudget::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            dim: self.d,
            max_epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            optimizer: self.pretrain_optimizer,
            batch_size: self.pretrain_batch,
            n_cp: self.n_cp,
            far_cap: self.pretrain_far_cap,
            tolerance: self.tolerance,
            use_dp: !self.ablated(Ablation::Dp),
            use_cp: !self.ablated(Ablation::Cp),
        }
    }

    pub fn neighbors(&self) -> NeighborConfig {
        NeighborConfig {
            q: self.q,
            threshold_km: self.threshold_km,
            budget: self.budget(),
        }
    }

    pub fn collab(&self) -> CollabConfig {
        CollabConfig {
            train: TrainConfig {
                lr: self.lr,
                batch_size: self.batch,
                n_neg: self.n_neg,
                dropout: self.dropout,
                optimizer: self.optimizer,
            },
            fusion: FusionConfig {
                steps: self.mim_steps,
                lr: self.lr,
                optimizer: self.optimizer,
                n1: self.n1,
                n2: self.n2,
            },
            mu: self.mu,
            budget: self.budget(),
            switches: CollabSwitches {
                neighbors: !self.ablated(Ablation::An),
                geo: !self.ablated(Ablation::Gn),
                sem: !self.ablated(Ablation::Sn),
                mim: !self.ablated(Ablation::Mim),
            },
            max_rounds: self.max_epochs,
            tolerance: self.tolerance,
            parallel: true,
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::data::NegativePool;
use crate::error::{Error, Result};
use crate::seqmodels::loss::SoftLabelLoss;
use crate::seqmodels::{Arch, ModelConfig};
use crate::server::{ServerConfig, Sharing};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sequence exchange with perturbed uploads and soft-labeled downloads.
    #[default]
    Ptf,
    /// Parameter-transmission baseline.
    #[serde(alias = "fedavg-baseline")]
    Fedavg,
    /// Clients train alone.
    #[serde(alias = "local-only")]
    Local,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ptf => "ptf",
            Self::Fedavg => "fedavg",
            Self::Local => "local",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ptf" => Ok(Self::Ptf),
            "fedavg" | "fedavg-baseline" => Ok(Self::Fedavg),
            "local" | "local-only" => Ok(Self::Local),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Architecture and width of a model; the catalog size and window come
/// from the corpus and the protocol config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPreset {
    pub arch: Arch,
    pub embed_dim: usize,
    pub num_layers: usize,
}

impl ModelPreset {
    pub fn client() -> Self {
        Self {
            arch: Arch::Sasrec,
            embed_dim: 8,
            num_layers: 1,
        }
    }

    pub fn server() -> Self {
        Self {
            arch: Arch::Sasrec,
            embed_dim: 32,
            num_layers: 2,
        }
    }

    pub fn model_config(&self, num_items: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            embed_dim: self.embed_dim,
            hidden_dim: self.embed_dim,
            num_layers: self.num_layers,
            max_seq_len,
            num_items,
        }
    }
}

/// Every knob of a simulation run. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: Mode,
    pub seed: u64,
    pub global_rounds: u32,
    pub subround_size: usize,
    pub max_seq_len: usize,
    pub client_model: ModelPreset,
    pub server_model: ModelPreset,
    pub beta: f64,
    pub epsilon: f64,
    pub sensitivity: f64,
    pub lambda_pc: f64,
    pub lambda_is: f64,
    /// Similar-user group size.
    pub group_size: usize,
    pub temperature: f64,
    pub sharing: Sharing,
    pub lr_client: f64,
    /// The server loss is a sum over the batch, so this sits well below `lr_client`.
    pub lr_server: f64,
    pub client_epochs: usize,
    pub server_epochs: usize,
    pub num_negatives: usize,
    /// Items a client may draw as training negatives.
    pub negative_pool: NegativePool,
    pub server_batch_size: usize,
    pub soft_label_loss: SoftLabelLoss,
    /// Downloads a client keeps for training.
    pub shared_sequences: usize,
    pub eval_k: usize,
    /// Evaluate every this many rounds; 0 evaluates after the last round only.
    pub eval_every: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ptf,
            seed: 0,
            global_rounds: 20,
            subround_size: 64,
            max_seq_len: 20,
            client_model: ModelPreset::client(),
            server_model: ModelPreset::server(),
            beta: 0.5,
            epsilon: 1.0,
            sensitivity: 1.0,
            lambda_pc: 0.01,
            lambda_is: 0.01,
            group_size: 5,
            temperature: 1.0,
            sharing: Sharing::Similar,
            lr_client: 0.05,
            lr_server: 0.005,
            client_epochs: 5,
            server_epochs: 2,
            num_negatives: 1,
            negative_pool: NegativePool::TrainOnly,
            server_batch_size: 1024,
            soft_label_loss: SoftLabelLoss::Bce,
            shared_sequences: 1,
            eval_k: 20,
            eval_every: 0,
        }
    }
}

impl ProtocolConfig {
    /// Full-scale scheduling (256 clients per subround).
    pub fn full_scale() -> Self {
        Self {
            subround_size: 256,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_client", self.lr_client),
            ("lr_server", self.lr_server),
            ("sensitivity", self.sensitivity),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.beta > 0.0 && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        for (name, v) in [("lambda_pc", self.lambda_pc), ("lambda_is", self.lambda_is)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        let counts = [
            ("subround_size", self.subround_size),
            ("max_seq_len", self.max_seq_len),
            ("server_batch_size", self.server_batch_size),
            ("eval_k", self.eval_k),
            ("shared_sequences", self.shared_sequences),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_negatives >= u8::MAX as usize {
            return Err(Error::Config(format!(
                "num_negatives {} does not fit a download candidate count",
                self.num_negatives
            )));
        }
        for preset in [self.client_model, self.server_model] {
            preset.model_config(1, self.max_seq_len).validate()?;
        }
        if self.beta == 0.0 && self.mode == Mode::Ptf {
            log::warn!("beta = 0: uploads carry the true training sequences (privacy off)");
        }
        Ok(())
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            epochs: self.client_epochs,
            lr: self.lr_client,
            num_negatives: self.num_negatives,
            negative_pool: self.negative_pool,
            beta: self.beta,
            epsilon: self.epsilon,
            sensitivity: self.sensitivity,
            soft_loss: self.soft_label_loss,
            max_shared: self.shared_sequences,
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            epochs: self.server_epochs,
            lr: self.lr_server,
            num_negatives: self.num_negatives,
            lambda_pc: self.lambda_pc,
            lambda_is: self.lambda_is,
            group_size: self.group_size,
            temperature: self.temperature,
            batch_size: self.server_batch_size,
            sharing: self.sharing,
        }
    }

    pub fn client_model_config(&self, num_items: usize) -> ModelConfig {
        self.client_model.model_config(num_items, self.max_seq_len)
    }

    pub fn server_model_config(&self, num_items: usize) -> ModelConfig {
        self.server_model.model_config(num_items, self.max_seq_len)
    }
}

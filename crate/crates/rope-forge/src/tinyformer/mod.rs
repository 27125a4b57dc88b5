//! A small decoder-only transformer with rotary attention: deterministic
//! initialization, hand-written reverse-mode gradients, an Adam trainer,
//! greedy generation with an incremental cache, and perplexity scoring.

pub mod checkpoint;
pub mod math;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VOCAB_SIZE;
use crate::rope::{RescaleFactors, RotaryConfig};
use math::{Mat, Real};

pub use model::{
    forward, generate_greedy, init_model, loss_and_grads, perplexity, IncrementalState, Logits,
};
pub use train::{
    finetune_progressive, train, train_log_csv, LrSchedule, TrainConfig, TrainError,
    TrainLogRow, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at index {index} exceeds vocab size {vocab_size}")]
    Vocab {
        index: usize,
        token: u16,
        vocab_size: usize,
    },
    #[error("sequence length {len} exceeds the allowed context {max}")]
    Length { len: usize, max: usize },
    #[error("sequence length {len} below minimum {min}")]
    TooShort { len: usize, min: usize },
    #[error("rescale factors carry {got} entries, head expects {expected}")]
    FactorShape { expected: usize, got: usize },
    #[error("prompt of {prompt} tokens plus {max_new} new tokens overflows context {max}")]
    GenerationOverflow {
        prompt: usize,
        max_new: usize,
        max: usize,
    },
    #[error(transparent)]
    Rope(#[from] crate::rope::RopeError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub trained_len: usize,
    pub tied_embeddings: bool,
    pub rotary: RotaryConfig,
}

impl ModelConfig {
    /// Default desk-scale shape: 4 layers, d_model 128, 4 heads of 32
    /// (16 rotary pairs), byte-level vocab, trained context 128.
    pub fn desk_default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            vocab_size: VOCAB_SIZE,
            trained_len: 128,
            tied_embeddings: false,
            rotary: RotaryConfig::with_default_base(32, 128).expect("valid default"),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return err("layer, width, head, and vocab counts must be positive".into());
        }
        if self.head_dim % 2 != 0 || self.head_dim == 0 {
            return err(format!("head_dim must be positive and even, got {}", self.head_dim));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return err(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.rotary.head_dim() != self.head_dim {
            return err(format!(
                "rotary head_dim {} != attention head_dim {}",
                self.rotary.head_dim(),
                self.head_dim
            ));
        }
        if self.rotary.original_len() != self.trained_len {
            return err(format!(
                "trained_len {} != rotary original_len {}",
                self.trained_len,
                self.rotary.original_len()
            ));
        }
        if self.trained_len == 0 {
            return err("trained_len must be positive".into());
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub mlp_norm: Vec<T>,
    pub w_up: Mat<T>,
    pub w_down: Mat<T>,
}

/// Full parameter set; `lm_head` is absent when embeddings are tied.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub wte: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Option<Mat<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![T::zero(); d],
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                mlp_norm: vec![T::zero(); d],
                w_up: Mat::zeros(cfg.ff_dim(), d),
                w_down: Mat::zeros(d, cfg.ff_dim()),
            })
            .collect();
        Self {
            wte: Mat::zeros(cfg.vocab_size, d),
            layers,
            final_norm: vec![T::zero(); d],
            lm_head: if cfg.tied_embeddings {
                None
            } else {
                Some(Mat::zeros(cfg.vocab_size, d))
            },
        }
    }

    /// Canonical (name, data) listing; checkpoint tensor order and the
    /// finite-difference parameter walk both follow it.
    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![("wte".into(), &self.wte.data[..])];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &layer.attn_norm[..]));
            out.push((format!("layer{l}.wq"), &layer.wq.data[..]));
            out.push((format!("layer{l}.wk"), &layer.wk.data[..]));
            out.push((format!("layer{l}.wv"), &layer.wv.data[..]));
            out.push((format!("layer{l}.wo"), &layer.wo.data[..]));
            out.push((format!("layer{l}.mlp_norm"), &layer.mlp_norm[..]));
            out.push((format!("layer{l}.w_up"), &layer.w_up.data[..]));
            out.push((format!("layer{l}.w_down"), &layer.w_down.data[..]));
        }
        out.push(("final_norm".into(), &self.final_norm[..]));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".into(), &head.data[..]));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = vec![("wte".into(), &mut self.wte.data)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layer{l}.wq"), &mut layer.wq.data));
            out.push((format!("layer{l}.wk"), &mut layer.wk.data));
            out.push((format!("layer{l}.wv"), &mut layer.wv.data));
            out.push((format!("layer{l}.wo"), &mut layer.wo.data));
            out.push((format!("layer{l}.mlp_norm"), &mut layer.mlp_norm));
            out.push((format!("layer{l}.w_up"), &mut layer.w_up.data));
            out.push((format!("layer{l}.w_down"), &mut layer.w_down.data));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(head) = &mut self.lm_head {
            out.push(("lm_head".into(), &mut head.data));
        }
        out
    }

    /// Tensor shapes in canonical order, derived from the config.
    pub fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        let mut out = vec![("wte".to_string(), vec![cfg.vocab_size, d])];
        for l in 0..cfg.n_layers {
            out.push((format!("layer{l}.attn_norm"), vec![d]));
            out.push((format!("layer{l}.wq"), vec![d, d]));
            out.push((format!("layer{l}.wk"), vec![d, d]));
            out.push((format!("layer{l}.wv"), vec![d, d]));
            out.push((format!("layer{l}.wo"), vec![d, d]));
            out.push((format!("layer{l}.mlp_norm"), vec![d]));
            out.push((format!("layer{l}.w_up"), vec![cfg.ff_dim(), d]));
            out.push((format!("layer{l}.w_down"), vec![d, cfg.ff_dim()]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        if !cfg.tied_embeddings {
            out.push(("lm_head".to_string(), vec![cfg.vocab_size, d]));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            wte: self.wte.map_to(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                    wq: l.wq.map_to(),
                    wk: l.wk.map_to(),
                    wv: l.wv.map_to(),
                    wo: l.wo.map_to(),
                    mlp_norm: l.mlp_norm.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                    w_up: l.w_up.map_to(),
                    w_down: l.w_down.map_to(),
                })
                .collect(),
            final_norm: self.final_norm.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            lm_head: self.lm_head.as_ref().map(|h| h.map_to()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, data)| data.iter().all(|v| v.is_finite()))
    }
}

/// Trained model state: parameters plus the metadata needed to resume,
/// including the rescale factors active during the latest (fine-)training.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub train_steps: u64,
    pub rescale_used: Option<RescaleFactors>,
    pub rng_seed: u64,
}

impl ModelCheckpoint {
    /// Context cap for a forward pass under the given factors.
    pub fn context_cap(&self, rf: Option<&RescaleFactors>) -> usize {
        rf.map(|r| r.target_len()).unwrap_or(self.config.trained_len)
    }
}

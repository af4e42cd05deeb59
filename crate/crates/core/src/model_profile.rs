//! Transformer geometry and the closed-form cost model built on it.
//!
//! Everything here is plain arithmetic over a [`ModelProfile`] and a
//! [`SplitConfig`]: parameter counts, forward/backward FLOPs on each side of
//! the cut, per-block and device-side memory, and the payload sizes of the
//! four transfers in a round. Cost functions accept any cut in `0..=L` so the
//! degenerate "everything on the device" baseline (cut = L) can be costed with
//! the same formulas; [`SplitConfig::validate`] enforces the stricter
//! `0 < l < L` required by the split protocol itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-token, per-channel activation bytes of one block (Megatron estimate).
pub const ACTIVATION_COEFF_LINEAR: u64 = 34;
/// Per-head attention-score activation bytes of one block (Megatron estimate).
pub const ACTIVATION_COEFF_ATTENTION: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("invalid model profile: {field} {reason}")]
    Model { field: &'static str, reason: String },
    #[error("invalid split: {field} {reason}")]
    Split { field: &'static str, reason: String },
}

fn model_err(field: &'static str, reason: impl Into<String>) -> ProfileError {
    ProfileError::Model { field, reason: reason.into() }
}

fn split_err(field: &'static str, reason: impl Into<String>) -> ProfileError {
    ProfileError::Split { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamMixed,
}

impl OptimizerKind {
    /// Optimizer-state bytes held per parameter.
    pub fn state_bytes(self, bytes_per_param: u64) -> u64 {
        match self {
            OptimizerKind::Sgd => bytes_per_param,
            OptimizerKind::Adam => 2 * bytes_per_param,
            OptimizerKind::AdamMixed => 3 * bytes_per_param,
        }
    }
}

/// Static geometry of a ViT-style transformer with LoRA adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub num_layers: u64,
    pub embed_dim: u64,
    pub mlp_dim: u64,
    pub num_heads: u64,
    /// Sequence length including the class token.
    pub num_tokens: u64,
    pub patch_size: u64,
    pub img_channels: u64,
    pub num_classes: u64,
    pub lora_rank: u64,
    pub bytes_per_param: u64,
    pub optimizer: OptimizerKind,
}

impl ModelProfile {
    /// ViT-base/16 on 224x224 inputs, 100 classes, FP32, SGD.
    pub fn vit_base(lora_rank: u64) -> Self {
        ModelProfile {
            num_layers: 12,
            embed_dim: 768,
            mlp_dim: 3072,
            num_heads: 12,
            num_tokens: 197,
            patch_size: 16,
            img_channels: 3,
            num_classes: 100,
            lora_rank,
            bytes_per_param: 4,
            optimizer: OptimizerKind::Sgd,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.num_layers == 0 {
            return Err(model_err("num_layers", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(model_err("embed_dim", "must be at least 1"));
        }
        if self.mlp_dim != 4 * self.embed_dim {
            return Err(model_err(
                "mlp_dim",
                format!("must equal 4 * embed_dim = {}, got {}", 4 * self.embed_dim, self.mlp_dim),
            ));
        }
        if self.lora_rank >= self.embed_dim.min(self.mlp_dim) {
            return Err(model_err(
                "lora_rank",
                format!("must be below min(embed_dim, mlp_dim), got {}", self.lora_rank),
            ));
        }
        if !matches!(self.bytes_per_param, 2 | 4) {
            return Err(model_err(
                "bytes_per_param",
                format!("must be 2 or 4, got {}", self.bytes_per_param),
            ));
        }
        Ok(())
    }
}

/// How the model is cut and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Number of transformer blocks executed on the device.
    pub cut_layer: u64,
    pub batch_size: u64,
    pub local_epochs: u64,
    pub rounds: u64,
}

impl SplitConfig {
    pub fn validate(&self, profile: &ModelProfile) -> Result<(), ProfileError> {
        if self.cut_layer == 0 || self.cut_layer >= profile.num_layers {
            return Err(split_err(
                "cut_layer",
                format!("must satisfy 0 < l < {}, got {}", profile.num_layers, self.cut_layer),
            ));
        }
        if self.batch_size == 0 {
            return Err(split_err("batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(split_err("local_epochs", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(split_err("rounds", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_cut(&self, cut_layer: u64) -> SplitConfig {
        SplitConfig { cut_layer, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub model: u64,
    pub optimizer: u64,
    pub gradient: u64,
    pub activation: u64,
    /// Sum of the four per-block components.
    pub block_total: u64,
    /// Device-side total for the configured cut.
    pub device_total: u64,
}

/// Bytes moved by each transfer of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadSizes {
    /// Initial broadcast of the device-side blocks.
    pub block_dist: u64,
    /// Device-side LoRA adapter (broadcast after round one, uploaded every round).
    pub lora_dist: u64,
    /// Cut-layer activations, one mini-batch.
    pub activation: u64,
    /// Cut-layer activation gradients, one mini-batch.
    pub gradient: u64,
}

/// Parameters of one transformer block including its LoRA matrices.
pub fn params_per_block(profile: &ModelProfile) -> u64 {
    let d = profile.embed_dim;
    12 * d * d + 18 * d * profile.lora_rank
}

/// Patch projection, position embeddings, class token and norm parameters.
pub fn params_embedding(profile: &ModelProfile) -> u64 {
    let p = profile.patch_size;
    (p * p * profile.img_channels + profile.num_tokens + 3) * profile.embed_dim
}

pub fn params_cls(profile: &ModelProfile) -> u64 {
    profile.embed_dim * profile.num_classes + profile.num_classes
}

pub fn params_total(profile: &ModelProfile) -> u64 {
    profile.num_layers * params_per_block(profile) + params_embedding(profile) + params_cls(profile)
}

// Forward FLOPs of one block over a mini-batch: 24BND^2 + 4BN^2D.
fn block_fp_flops(profile: &ModelProfile, batch: u64) -> f64 {
    let b = batch as f64;
    let n = profile.num_tokens as f64;
    let d = profile.embed_dim as f64;
    24.0 * b * n * d * d + 4.0 * b * n * n * d
}

fn cls_flops(profile: &ModelProfile, batch: u64) -> f64 {
    batch as f64 * profile.num_tokens as f64 * profile.embed_dim as f64 * profile.num_classes as f64
}

fn server_blocks(profile: &ModelProfile, split: &SplitConfig) -> f64 {
    debug_assert!(split.cut_layer <= profile.num_layers);
    profile.num_layers.saturating_sub(split.cut_layer) as f64
}

/// Device forward FLOPs per mini-batch. The classifier term is kept on the
/// device side exactly as the cost model states it.
pub fn flops_device_fp(profile: &ModelProfile, split: &SplitConfig) -> f64 {
    split.cut_layer as f64 * block_fp_flops(profile, split.batch_size)
        + 2.0 * cls_flops(profile, split.batch_size)
}

pub fn flops_device_bp(profile: &ModelProfile, split: &SplitConfig) -> f64 {
    2.0 * split.cut_layer as f64 * block_fp_flops(profile, split.batch_size)
        + 4.0 * cls_flops(profile, split.batch_size)
}

pub fn flops_server_fp(profile: &ModelProfile, split: &SplitConfig) -> f64 {
    server_blocks(profile, split) * block_fp_flops(profile, split.batch_size)
}

pub fn flops_server_bp(profile: &ModelProfile, split: &SplitConfig) -> f64 {
    2.0 * server_blocks(profile, split) * block_fp_flops(profile, split.batch_size)
        + 4.0 * cls_flops(profile, split.batch_size)
}

/// Per-block memory components and the device total for `split.cut_layer`.
pub fn memory_block(profile: &ModelProfile, split: &SplitConfig) -> MemoryBreakdown {
    let params = params_per_block(profile);
    let alpha = profile.bytes_per_param;
    let model = alpha * params;
    let optimizer = profile.optimizer.state_bytes(alpha) * params;
    let gradient = alpha * params;
    let (b, n, d) = (split.batch_size, profile.num_tokens, profile.embed_dim);
    let activation =
        ACTIVATION_COEFF_LINEAR * b * n * d + ACTIVATION_COEFF_ATTENTION * b * n * n * profile.num_heads;
    let block_total = model + optimizer + gradient + activation;
    MemoryBreakdown {
        model,
        optimizer,
        gradient,
        activation,
        block_total,
        device_total: device_base_memory(profile, split) + split.cut_layer * block_total,
    }
}

// Embedding and output-layer footprint that every device carries.
fn device_base_memory(profile: &ModelProfile, split: &SplitConfig) -> u64 {
    let d = profile.embed_dim;
    16 * d * d + split.batch_size * profile.num_tokens * d
}

/// Device memory in bytes, `16D^2 + BND + l * M_t`.
pub fn memory_device(profile: &ModelProfile, split: &SplitConfig) -> u64 {
    memory_block(profile, split).device_total
}

pub fn payload_sizes(profile: &ModelProfile, split: &SplitConfig) -> PayloadSizes {
    let alpha = profile.bytes_per_param;
    let (b, l, d, r) = (split.batch_size, split.cut_layer, profile.embed_dim, profile.lora_rank);
    let activation = alpha * b * profile.num_tokens * d;
    PayloadSizes {
        block_dist: alpha * b * l * (params_per_block(profile) + params_embedding(profile)),
        lora_dist: alpha * 2 * l * b * d * r,
        activation,
        gradient: activation,
    }
}

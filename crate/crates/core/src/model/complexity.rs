use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Trainable scalar counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Input projection, its bias, and the position table.
    pub embedding: u64,
    pub mask_token: u64,
    pub per_layer: u64,
    pub layers: u64,
    pub recon_head: u64,
    pub class_head: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.mask_token + self.layers + self.recon_head + self.class_head
    }
}

/// Multiply-accumulate counts for one sample's forward pass through the
/// encoder and both heads. Normalizations, softmax and pooling are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    /// `T * D * d_model`
    pub embedding: u64,
    /// `4 * T * d_model^2` per layer (Q, K, V and output projections).
    pub projections: u64,
    /// `2 * H * T^2 * (d_model / H)` per layer (scores and weighted sum).
    pub attention: u64,
    /// `2 * T * d_model * d_ff` per layer.
    pub ffn: u64,
    /// `T * d_model * D`
    pub recon_head: u64,
    /// `d_model * n_classes`, applied after pooling.
    pub class_head: u64,
    pub n_layers: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.n_layers * (self.projections + self.attention + self.ffn) + self.recon_head + self.class_head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: ParamBreakdown,
    pub macs: MacBreakdown,
}

impl Complexity {
    pub fn total_params(&self) -> u64 {
        self.params.total()
    }

    pub fn macs_per_sample(&self) -> u64 {
        self.macs.total()
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params() as f64 / 1e6
    }

    pub fn macs_giga(&self) -> f64 {
        self.macs_per_sample() as f64 / 1e9
    }
}

/// Closed-form parameter and MAC counts for `cfg`.
pub fn count_complexity(cfg: &ModelConfig) -> Complexity {
    let t = cfg.t_steps as u64;
    let d_in = cfg.input_dim as u64;
    let d = cfg.d_model as u64;
    let h = cfg.n_heads as u64;
    let ff = cfg.d_ff as u64;
    let c = cfg.n_classes as u64;
    let l = cfg.n_layers as u64;

    let per_layer = 2 * (2 * d) // two layer norms
        + 4 * (d * d + d)       // q, k, v, o
        + (d * ff + ff)
        + (ff * d + d);
    let params = ParamBreakdown {
        embedding: d_in * d + d + t * d,
        mask_token: d_in,
        per_layer,
        layers: l * per_layer,
        recon_head: d * d_in + d_in,
        class_head: d * c + c,
    };
    let macs = MacBreakdown {
        embedding: t * d_in * d,
        projections: 4 * t * d * d,
        attention: 2 * h * t * t * (d / h.max(1)),
        ffn: 2 * t * d * ff,
        recon_head: t * d * d_in,
        class_head: d * c,
        n_layers: l,
    };
    Complexity { params, macs }
}

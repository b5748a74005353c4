use serde::{Deserialize, Serialize};

use crate::autograd::conv_out_len;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSharing {
    /// One encoding layer reused on every iteration.
    Shared,
    /// `max_n` distinct encoding layers applied in sequence.
    Stacked,
}

impl std::str::FromStr for LayerSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "stacked" => Ok(Self::Stacked),
            other => Err(Error::Config(format!(
                "layer_sharing must be shared|stacked, got `{other}`"
            ))),
        }
    }
}

/// Architecture hyperparameters. Defaults follow the configuration used for
/// the synthetic benchmark (D=64, D_H=256, D_RNN=128, 3 heads of width 16,
/// two iterations, kernel 3 / stride 2 / no padding, pool 2 / 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    /// 0 disables the recurrent postprocessing block.
    pub d_rnn: usize,
    pub max_n: usize,
    pub act_enabled: bool,
    pub act_threshold: f64,
    pub use_cnn_ffn: bool,
    pub layer_sharing: LayerSharing,
    pub dropout: f64,
    pub softplus_beta: f64,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub alpha_init: f64,
    pub alpha_trainable: bool,
    /// Timestamps are divided by this before use; 1.0 means no rescaling.
    pub time_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_hidden: 256,
            d_k: 16,
            d_v: 16,
            heads: 3,
            d_rnn: 128,
            max_n: 2,
            act_enabled: true,
            act_threshold: 0.99,
            use_cnn_ffn: true,
            layer_sharing: LayerSharing::Shared,
            dropout: 0.1,
            softplus_beta: 1.0,
            conv_kernel: 3,
            conv_stride: 2,
            conv_padding: 0,
            pool_size: 2,
            pool_stride: 2,
            alpha_init: -0.1,
            alpha_trainable: false,
            time_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("heads", self.heads),
            ("max_n", self.max_n),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!(
                "d_model must be even for the temporal encoding, got {}",
                self.d_model
            ));
        }
        if !(self.act_threshold > 0.0 && self.act_threshold <= 1.0) {
            return bad(format!(
                "act_threshold must be in (0, 1], got {}",
                self.act_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.softplus_beta > 0.0 && self.softplus_beta.is_finite()) {
            return bad(format!(
                "softplus_beta must be positive, got {}",
                self.softplus_beta
            ));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad(format!(
                "time_scale must be positive, got {}",
                self.time_scale
            ));
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite".into());
        }
        if self.act_enabled && self.layer_sharing == LayerSharing::Stacked {
            return bad("ACT requires a shared encoding layer (layer_sharing = shared)".into());
        }
        if self.use_cnn_ffn && self.reduced_len().is_none() {
            return bad(format!(
                "conv (k={}, s={}, p={}) and pool ({}/{}) leave no features from d_hidden={}",
                self.conv_kernel,
                self.conv_stride,
                self.conv_padding,
                self.pool_size,
                self.pool_stride,
                self.d_hidden
            ));
        }
        Ok(())
    }

    /// Feature length after conv then max-pool over `d_hidden`.
    pub fn reduced_len(&self) -> Option<usize> {
        let conv = conv_out_len(
            self.d_hidden,
            self.conv_kernel,
            self.conv_stride,
            self.conv_padding,
        )?;
        conv_out_len(conv, self.pool_size, self.pool_stride, 0)
    }

    /// Input width of the second feed-forward projection.
    pub fn ffn_out_in(&self) -> usize {
        if self.use_cnn_ffn {
            self.reduced_len().unwrap_or(0)
        } else {
            self.d_hidden
        }
    }

    /// Number of distinct encoding layers.
    pub fn num_layers(&self) -> usize {
        match self.layer_sharing {
            LayerSharing::Shared => 1,
            LayerSharing::Stacked => self.max_n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_reduces_256_to_63() {
        let c = ModelConfig::default();
        assert_eq!(conv_out_len(256, 3, 2, 0), Some(127));
        assert_eq!(c.reduced_len(), Some(63));
        c.validate().unwrap();
    }

    #[test]
    fn no_cnn_uses_hidden_width() {
        let c = ModelConfig {
            use_cnn_ffn: false,
            ..ModelConfig::default()
        };
        assert_eq!(c.ffn_out_in(), 256);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = ModelConfig::default();
        let cases = [
            ModelConfig {
                d_model: 7,
                ..base.clone()
            },
            ModelConfig {
                act_threshold: 0.0,
                ..base.clone()
            },
            ModelConfig {
                act_threshold: 1.5,
                ..base.clone()
            },
            ModelConfig {
                layer_sharing: LayerSharing::Stacked,
                ..base.clone()
            },
            ModelConfig {
                d_hidden: 3,
                ..base.clone()
            },
            ModelConfig {
                max_n: 0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
        ModelConfig {
            layer_sharing: LayerSharing::Stacked,
            act_enabled: false,
            ..base
        }
        .validate()
        .unwrap();
    }
}

//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be one of
//! [`KEYS`]; anything else is rejected with its line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use uthp::predict::LossWeights;
use uthp::train::TrainConfig;
use uthp::{Error, ModelConfig, Result};

/// Accepted keys with their defaults, in the order documented.
pub const KEYS: &[(&str, &str)] = &[
    ("d_model", "64"),
    ("d_hidden", "256"),
    ("d_k", "16"),
    ("d_v", "16"),
    ("heads", "3"),
    ("d_rnn", "128"),
    ("max_n", "2"),
    ("act_enabled", "true"),
    ("act_threshold", "0.99"),
    ("use_cnn_ffn", "true"),
    ("layer_sharing", "shared"),
    ("dropout", "0.1"),
    ("softplus_beta", "1.0"),
    ("conv_kernel", "3"),
    ("conv_stride", "2"),
    ("conv_padding", "0"),
    ("pool_size", "2"),
    ("pool_stride", "2"),
    ("alpha_init", "-0.1"),
    ("alpha_trainable", "false"),
    ("time_scale", "1.0"),
    ("mode", "likelihood"),
    ("epochs", "50"),
    ("batch_size", "16"),
    ("seed", "0"),
    ("estimator", "mc"),
    ("mc_samples", "100"),
    ("eval_mc_samples", "10000"),
    ("alpha_type", "0 (likelihood) / 1 (prediction)"),
    ("alpha_time", "0 (likelihood) / 0.01 (prediction)"),
    ("lr", "0.0001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("weight_decay", "0"),
    ("clip_norm", "5.0"),
    ("eval_every", "1"),
    ("early_stop_patience", "10"),
    ("num_types", "taken from the data"),
    ("train", "none"),
    ("dev", "none"),
    ("checkpoint", "none"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_types: Option<usize>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value `{raw}` for `{key}`"),
    })
}

/// Splits `text` into `key -> (value, line)`; duplicate keys are an error.
fn entries(text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{body}`"),
        })?;
        let k = k.trim().to_string();
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::Parse {
                line,
                message: format!("unknown key `{k}`"),
            });
        }
        if out
            .insert(k.clone(), (v.trim().to_string(), line))
            .is_some()
        {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let map = entries(text)?;
        let mut c = RunConfig::default();
        let mode = match map.get("mode") {
            Some((v, line)) => match v.as_str() {
                "likelihood" => LossWeights::LIKELIHOOD,
                "prediction" => LossWeights::PREDICTION,
                _ => {
                    return Err(Error::Parse {
                        line: *line,
                        message: format!("mode must be likelihood|prediction, got `{v}`"),
                    })
                }
            },
            None => LossWeights::LIKELIHOOD,
        };
        c.train.weights = mode;
        let m = &mut c.model;
        let t = &mut c.train;
        for (k, (v, line)) in &map {
            let line = *line;
            match k.as_str() {
                "d_model" => m.d_model = value(k, v, line)?,
                "d_hidden" => m.d_hidden = value(k, v, line)?,
                "d_k" => m.d_k = value(k, v, line)?,
                "d_v" => m.d_v = value(k, v, line)?,
                "heads" => m.heads = value(k, v, line)?,
                "d_rnn" => m.d_rnn = value(k, v, line)?,
                "max_n" => m.max_n = value(k, v, line)?,
                "act_enabled" => m.act_enabled = value(k, v, line)?,
                "act_threshold" => m.act_threshold = value(k, v, line)?,
                "use_cnn_ffn" => m.use_cnn_ffn = value(k, v, line)?,
                "layer_sharing" => m.layer_sharing = value(k, v, line)?,
                "dropout" => m.dropout = value(k, v, line)?,
                "softplus_beta" => m.softplus_beta = value(k, v, line)?,
                "conv_kernel" => m.conv_kernel = value(k, v, line)?,
                "conv_stride" => m.conv_stride = value(k, v, line)?,
                "conv_padding" => m.conv_padding = value(k, v, line)?,
                "pool_size" => m.pool_size = value(k, v, line)?,
                "pool_stride" => m.pool_stride = value(k, v, line)?,
                "alpha_init" => m.alpha_init = value(k, v, line)?,
                "alpha_trainable" => m.alpha_trainable = value(k, v, line)?,
                "time_scale" => m.time_scale = value(k, v, line)?,
                "mode" => {}
                "epochs" => t.epochs = value(k, v, line)?,
                "batch_size" => t.batch_size = value(k, v, line)?,
                "seed" => t.seed = value(k, v, line)?,
                "estimator" => t.estimator = value(k, v, line)?,
                "mc_samples" => t.mc_samples = value(k, v, line)?,
                "eval_mc_samples" => t.eval_mc_samples = value(k, v, line)?,
                "alpha_type" => t.weights.alpha_type = value(k, v, line)?,
                "alpha_time" => t.weights.alpha_time = value(k, v, line)?,
                "lr" => t.adam.lr = value(k, v, line)?,
                "beta1" => t.adam.beta1 = value(k, v, line)?,
                "beta2" => t.adam.beta2 = value(k, v, line)?,
                "adam_eps" => t.adam.eps = value(k, v, line)?,
                "weight_decay" => t.adam.weight_decay = value(k, v, line)?,
                "clip_norm" => t.clip_norm = value(k, v, line)?,
                "eval_every" => t.eval_every = value(k, v, line)?,
                "early_stop_patience" => t.early_stop_patience = value(k, v, line)?,
                "num_types" => c.num_types = Some(value(k, v, line)?),
                "train" => c.train_path = Some(PathBuf::from(v)),
                "dev" => c.dev_path = Some(PathBuf::from(v)),
                "checkpoint" => c.checkpoint = Some(PathBuf::from(v)),
                other => unreachable!("key list and match disagree on `{other}`"),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use uthp::intensity::Estimator;
    use uthp::LayerSharing;

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse(
            "# small model\nd_model = 16\nlayer_sharing=stacked\nact_enabled = false\n\nestimator = trapezoid # cheap\nmode = prediction\nalpha_time = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.layer_sharing, LayerSharing::Stacked);
        assert_eq!(c.train.estimator, Estimator::Trapezoid);
        assert_eq!(c.train.weights.alpha_type, 1.0);
        assert_eq!(c.train.weights.alpha_time, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let err = RunConfig::parse("d_model = 8\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("seed 1\n").is_err());
        assert!(RunConfig::parse("heads = three\n").is_err());
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
    }
}

//! Next-event heads, prediction losses and evaluation metrics.
//!
//! From the hidden row `h(t_i)` the heads predict the following event:
//! `t̂_{i+1} = W_time·h(t_i) + b_time` and `p̂_{i+1} = softmax(W_type·h(t_i) + b_type)`.
//! The first event of a sequence gets no prediction.

use serde::{Deserialize, Serialize};

use crate::autograd::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};

pub const TIME_WEIGHT: &str = "head.time.weight";
pub const TIME_BIAS: &str = "head.time.bias";
pub const TYPE_WEIGHT: &str = "head.type.weight";
pub const TYPE_BIAS: &str = "head.type.bias";

const LOG_FLOOR: f64 = 1e-12;

pub fn head_param_specs(cfg: &ModelConfig, num_types: usize) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    vec![
        ParamSpec::matrix(TIME_WEIGHT, d, 1),
        ParamSpec::new(TIME_BIAS, 1, 1, Init::Zeros),
        ParamSpec::matrix(TYPE_WEIGHT, d, num_types),
        ParamSpec::new(TYPE_BIAS, 1, num_types, Init::Zeros),
    ]
}

/// One prediction for event `i` (1-based, `i ≥ 2`) of sequence `seq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub seq: usize,
    pub i: usize,
    pub t_hat: f64,
    /// 1-based type id.
    pub c_hat: usize,
    pub p_hat: Vec<f64>,
}

pub fn to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("prediction record serializes"));
        out.push('\n');
    }
    out
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Scalar view of the prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_time: Vec<f64>,
    pub b_time: f64,
    /// `w_type[c]` has length `D`.
    pub w_type: Vec<Vec<f64>>,
    pub b_type: Vec<f64>,
}

impl HeadParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let wt = store.get(TYPE_WEIGHT)?;
        let w_type = (0..wt.cols())
            .map(|c| (0..wt.rows()).map(|j| wt.at(j, c)).collect())
            .collect();
        Ok(Self {
            w_time: store.get(TIME_WEIGHT)?.data().to_vec(),
            b_time: store.get(TIME_BIAS)?.item(),
            w_type,
            b_type: store.get(TYPE_BIAS)?.data().to_vec(),
        })
    }

    fn dot(w: &[f64], h: &[f64]) -> f64 {
        w.iter().zip(h).map(|(a, b)| a * b).sum()
    }

    pub fn time(&self, h: &[f64]) -> f64 {
        Self::dot(&self.w_time, h) + self.b_time
    }

    pub fn type_logits(&self, h: &[f64]) -> Vec<f64> {
        self.w_type
            .iter()
            .zip(&self.b_type)
            .map(|(w, b)| Self::dot(w, h) + b)
            .collect()
    }

    /// Predictions for events `2..=len` from the first `len − 1` hidden rows.
    pub fn predict_next(&self, hidden: &Tensor, len: usize, seq: usize) -> Vec<PredictionRecord> {
        (1..len)
            .map(|i| {
                let h = hidden.row(i - 1);
                let p_hat = softmax(&self.type_logits(h));
                PredictionRecord {
                    seq,
                    i: i + 1,
                    t_hat: self.time(h),
                    c_hat: argmax(&p_hat) + 1,
                    p_hat,
                }
            })
            .collect()
    }
}

/// `Σ (t_i − t̂_i)²` over the predicted events.
pub fn time_loss(preds: &[PredictionRecord], times: &[f64]) -> f64 {
    preds
        .iter()
        .map(|p| (times[p.i - 1] - p.t_hat).powi(2))
        .sum()
}

/// Cross-entropy of the true (1-based) types, with `log` floored at `1e-12`.
pub fn type_loss(preds: &[PredictionRecord], types: &[usize]) -> f64 {
    preds
        .iter()
        .map(|p| -p.p_hat[types[p.i - 1] - 1].max(LOG_FLOOR).ln())
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_time: Var,
    pub b_time: Var,
    pub w_type: Var,
    pub b_type: Var,
}

impl HeadVars {
    pub fn bind(params: &BoundParams) -> Result<Self> {
        Ok(Self {
            w_time: params.get(TIME_WEIGHT)?,
            b_time: params.get(TIME_BIAS)?,
            w_type: params.get(TYPE_WEIGHT)?,
            b_type: params.get(TYPE_BIAS)?,
        })
    }
}

/// Differentiable `(L_time, L_type)` for one sequence of `times.len()` events.
pub fn head_losses(
    g: &mut Graph,
    hv: &HeadVars,
    hidden: Var,
    times: &[f64],
    types: &[usize],
) -> Result<(Var, Var)> {
    let len = times.len();
    if len < 2 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((zero, zero));
    }
    let prev = g.slice_rows(hidden, 0, len - 1)?;

    let t_raw = g.matmul(prev, hv.w_time)?;
    let t_hat = g.add_row(t_raw, hv.b_time)?;
    let target = g.constant(Tensor::column(times[1..].to_vec())?);
    let err = g.sub(t_hat, target)?;
    let sq = g.mul(err, err)?;
    let l_time = g.sum(sq)?;

    let logits = g.matmul(prev, hv.w_type)?;
    let logits = g.add_row(logits, hv.b_type)?;
    let probs = g.softmax_rows(logits)?;
    let floored = g.clamp_min(probs, LOG_FLOOR)?;
    let logs = g.log(floored)?;
    let picks: Vec<(usize, usize)> = (1..len).map(|i| (i - 1, types[i] - 1)).collect();
    let chosen = g.gather(logs, &picks)?;
    let total = g.sum(chosen)?;
    let l_type = g.scale(total, -1.0)?;
    Ok((l_time, l_type))
}

/// Weighting of the prediction losses against the negative log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_type: f64,
    pub alpha_time: f64,
}

impl LossWeights {
    pub const LIKELIHOOD: Self = Self {
        alpha_type: 0.0,
        alpha_time: 0.0,
    };
    pub const PREDICTION: Self = Self {
        alpha_type: 1.0,
        alpha_time: 0.01,
    };

    pub fn validate(&self) -> Result<()> {
        if self.alpha_type >= 0.0
            && self.alpha_time >= 0.0
            && self.alpha_type.is_finite()
            && self.alpha_time.is_finite()
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got type={} time={}",
                self.alpha_type, self.alpha_time
            )))
        }
    }

    /// `−LL + α_type·L_type + α_time·L_time`.
    pub fn objective(&self, loglik: f64, l_type: f64, l_time: f64) -> f64 {
        -loglik + self.alpha_type * l_type + self.alpha_time * l_time
    }

    pub fn objective_graph(
        &self,
        g: &mut Graph,
        loglik: Var,
        l_type: Var,
        l_time: Var,
    ) -> Result<Var> {
        let neg = g.scale(loglik, -1.0)?;
        let a = g.scale(l_type, self.alpha_type)?;
        let b = g.scale(l_time, self.alpha_time)?;
        let s = g.add(neg, a)?;
        g.add(s, b)
    }
}

/// Scores for one evaluated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub loglik: f64,
    pub predictions: Vec<PredictionRecord>,
    pub squared_error: f64,
    pub correct: usize,
}

impl SequenceScore {
    pub fn new(
        loglik: f64,
        predictions: Vec<PredictionRecord>,
        times: &[f64],
        types: &[usize],
    ) -> Self {
        let squared_error = time_loss(&predictions, times);
        let correct = predictions
            .iter()
            .filter(|p| p.c_hat == types[p.i - 1])
            .count();
        Self {
            loglik,
            predictions,
            squared_error,
            correct,
        }
    }
}

/// Aggregate evaluation numbers; also the metrics file layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_event_ll: f64,
    /// Percent.
    pub accuracy: f64,
    pub rmse: f64,
    pub act_mean_iters: f64,
    #[serde(default)]
    pub per_sequence_ll: Vec<f64>,
}

impl Metrics {
    pub fn from_scores(scores: &[SequenceScore], act_mean_iters: f64) -> Result<Self> {
        let predicted: usize = scores.iter().map(|s| s.predictions.len()).sum();
        if predicted == 0 {
            return Err(Error::NoPredictions);
        }
        let n = predicted as f64;
        let total_ll: f64 = scores.iter().map(|s| s.loglik).sum();
        let sq: f64 = scores.iter().map(|s| s.squared_error).sum();
        let correct: usize = scores.iter().map(|s| s.correct).sum();
        Ok(Self {
            per_event_ll: total_ll / n,
            accuracy: 100.0 * correct as f64 / n,
            rmse: (sq / n).sqrt(),
            act_mean_iters,
            per_sequence_ll: scores.iter().map(|s| s.loglik).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize, t_hat: f64, p_hat: Vec<f64>) -> PredictionRecord {
        PredictionRecord {
            seq: 0,
            i,
            t_hat,
            c_hat: argmax(&p_hat) + 1,
            p_hat,
        }
    }

    #[test]
    fn softmax_of_ln3_and_zero() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn zero_logits_are_uniform_and_tie_to_first() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn losses_closed_forms() {
        let times = [1.0, 2.0, 3.0];
        let types = [1, 2, 1];
        let exact = vec![
            record(2, 2.0, vec![0.0, 1.0]),
            record(3, 3.0, vec![1.0, 0.0]),
        ];
        assert_eq!(time_loss(&exact, &times), 0.0);
        assert_eq!(type_loss(&exact, &types), 0.0);

        let off = vec![
            record(2, 4.0, vec![0.5, 0.5]),
            record(3, 3.0, vec![0.5, 0.5]),
        ];
        assert_eq!(time_loss(&off, &times), 4.0);
        assert!((type_loss(&off, &types) - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn no_predictions_is_an_error() {
        let s = SequenceScore::new(0.0, vec![], &[1.0], &[1]);
        assert!(matches!(
            Metrics::from_scores(&[s], 1.0),
            Err(Error::NoPredictions)
        ));
    }

    #[test]
    fn objective_is_linear_in_weights() {
        let w = LossWeights {
            alpha_type: 1.0,
            alpha_time: 0.5,
        };
        let w2 = LossWeights {
            alpha_time: 1.0,
            ..w
        };
        assert_eq!(LossWeights::LIKELIHOOD.objective(-3.0, 9.0, 9.0), 3.0);
        assert!((w2.objective(-1.0, 2.0, 4.0) - w.objective(-1.0, 2.0, 4.0) - 2.0).abs() < 1e-15);
    }
}

//! Continuous conditional intensity and sequence log-likelihood.
//!
//! On the interval `(t_{i-1}, t_i]` the type-`c` intensity is
//!
//! ```text
//! λ_c(t) = softplus_β( b_c + α_c·(t − t_{i-1})/t_{i-1} + w_c·h(t_{i-1}) )
//! ```
//!
//! where `h(t_{i-1})` is the hidden row of the event that opens the interval.
//! The event term of event `i` is also evaluated with `h(t_{i-1})`, so an
//! event never sees its own representation. The slope term is dropped when
//! `t_{i-1} = 0`.
//!
//! Two implementations are kept side by side: graph builders used for
//! training and plain scalar code used for evaluation. Both draw Monte Carlo
//! points from the same keyed streams, so they agree to rounding.

use std::sync::Once;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::rng::{self, StreamRng};
use crate::autograd::{softplus_beta, BoundParams, Graph, ParamStore, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};

pub const WEIGHT: &str = "intensity.w";
pub const BIAS: &str = "intensity.b";
pub const ALPHA: &str = "intensity.alpha";

static ZERO_TIME_WARNING: Once = Once::new();

pub fn intensity_param_specs(cfg: &ModelConfig, num_types: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::matrix(WEIGHT, cfg.d_model, num_types),
        ParamSpec::new(BIAS, 1, num_types, Init::Zeros),
        ParamSpec::new(ALPHA, 1, num_types, Init::Constant(cfg.alpha_init)),
    ]
}

/// `(t − t_prev)/t_prev`, or 0 when the interval opens at time zero.
pub fn slope_ratio(t_prev: f64, t: f64) -> f64 {
    if t_prev > 0.0 {
        (t - t_prev) / t_prev
    } else {
        ZERO_TIME_WARNING.call_once(|| {
            warn!("interval opens at t = 0; dropping the slope term of the intensity there");
        });
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mc,
    Trapezoid,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Self::Mc),
            "trapezoid" => Ok(Self::Trapezoid),
            other => Err(Error::Config(format!(
                "estimator must be mc|trapezoid, got `{other}`"
            ))),
        }
    }
}

/// Uniform points per interval for the Monte Carlo compensator.
#[derive(Clone, Debug, PartialEq)]
pub struct McSamples {
    pub per_interval: usize,
    /// `points[k]` holds the draws on `(t_k, t_{k+1})` (0-based events).
    pub points: Vec<Vec<f64>>,
}

impl McSamples {
    /// Draws `m` points on each interval; interval `k` uses the stream
    /// `key ++ [k]` so draws do not depend on batching.
    pub fn draw(times: &[f64], m: usize, seed: u64, key: &[u64]) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config(
                "Monte Carlo sample count must be >= 1".into(),
            ));
        }
        let points = times
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let mut full = key.to_vec();
                full.push(k as u64);
                let mut r: StreamRng = rng::stream(seed, &full);
                (0..m)
                    .map(|_| w[0] + r.random::<f64>() * (w[1] - w[0]))
                    .collect()
            })
            .collect();
        Ok(Self {
            per_interval: m,
            points,
        })
    }
}

/// How to estimate the compensator `∫_{t_1}^{t_I} λ(t) dt`.
#[derive(Clone, Debug)]
pub enum Compensator<'a> {
    MonteCarlo(&'a McSamples),
    Trapezoid,
}

/// Scalar view of the intensity parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityParams {
    /// `w[c]` has length `D`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
}

/// A query point `t` inside the interval opened by the event at `t_prev`
/// with hidden row `hidden_prev`.
#[derive(Clone, Copy, Debug)]
pub struct IntensityQuery<'a> {
    pub hidden_prev: &'a [f64],
    pub t_prev: f64,
    pub t: f64,
}

impl IntensityParams {
    pub fn from_store(store: &ParamStore, beta: f64) -> Result<Self> {
        let w = store.get(WEIGHT)?;
        let (d, c) = (w.rows(), w.cols());
        let w_rows = (0..c)
            .map(|k| (0..d).map(|j| w.at(j, k)).collect())
            .collect();
        Ok(Self {
            w: w_rows,
            b: store.get(BIAS)?.data().to_vec(),
            alpha: store.get(ALPHA)?.data().to_vec(),
            beta,
        })
    }

    pub fn num_types(&self) -> usize {
        self.b.len()
    }

    fn history_term(&self, c: usize, h: &[f64]) -> f64 {
        self.w[c].iter().zip(h).map(|(a, b)| a * b).sum()
    }

    /// `λ_c` for a 0-based type index `c`.
    pub fn type_intensity(&self, q: &IntensityQuery, c: usize) -> f64 {
        let logit = self.b[c]
            + self.alpha[c] * slope_ratio(q.t_prev, q.t)
            + self.history_term(c, q.hidden_prev);
        softplus_beta(logit, self.beta)
    }

    pub fn total_intensity(&self, q: &IntensityQuery) -> f64 {
        (0..self.num_types())
            .map(|c| self.type_intensity(q, c))
            .sum()
    }

    /// Per-type `(base, alpha)` so that `logit = base + alpha·ratio`.
    fn bases(&self, h: &[f64]) -> Vec<f64> {
        (0..self.num_types())
            .map(|c| self.b[c] + self.history_term(c, h))
            .collect()
    }

    fn total_from_bases(&self, bases: &[f64], ratio: f64) -> f64 {
        bases
            .iter()
            .zip(&self.alpha)
            .map(|(base, a)| softplus_beta(base + a * ratio, self.beta))
            .sum()
    }

    /// Monte Carlo compensator: `Σ_k (t_{k+1} − t_k) · mean_m λ(u_m)`.
    pub fn compensator_mc(&self, times: &[f64], hidden: &Tensor, samples: &McSamples) -> f64 {
        let mut total = 0.0;
        for (k, w) in times.windows(2).enumerate() {
            let bases = self.bases(hidden.row(k));
            let pts = &samples.points[k];
            let sum: f64 = pts
                .iter()
                .map(|&u| self.total_from_bases(&bases, slope_ratio(w[0], u)))
                .sum();
            total += (w[1] - w[0]) * sum / pts.len() as f64;
        }
        total
    }

    /// Trapezoid compensator: `Σ_k (t_{k+1} − t_k)/2 · (λ(t_{k+1}⁻) + λ(t_k⁺))`.
    pub fn compensator_trapezoid(&self, times: &[f64], hidden: &Tensor) -> f64 {
        let mut total = 0.0;
        for (k, w) in times.windows(2).enumerate() {
            let bases = self.bases(hidden.row(k));
            let start = self.total_from_bases(&bases, 0.0);
            let end = self.total_from_bases(&bases, slope_ratio(w[0], w[1]));
            total += (w[1] - w[0]) / 2.0 * (end + start);
        }
        total
    }

    /// `Σ_{i≥2} log λ_{c_i}(t_i) − Λ̂`; 0 for a single event. `types` are 1-based.
    pub fn sequence_loglik(
        &self,
        times: &[f64],
        types: &[usize],
        hidden: &Tensor,
        comp: &Compensator,
    ) -> Result<f64> {
        if times.len() < 2 {
            return Ok(0.0);
        }
        let mut events = 0.0;
        for i in 1..times.len() {
            let q = IntensityQuery {
                hidden_prev: hidden.row(i - 1),
                t_prev: times[i - 1],
                t: times[i],
            };
            let v = self.type_intensity(&q, types[i] - 1).ln();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("log intensity at event {}", i + 1),
                });
            }
            events += v;
        }
        let lambda = match comp {
            Compensator::MonteCarlo(s) => self.compensator_mc(times, hidden, s),
            Compensator::Trapezoid => self.compensator_trapezoid(times, hidden),
        };
        Ok(events - lambda)
    }
}

/// Graph handles for the intensity parameters.
#[derive(Clone, Copy, Debug)]
pub struct IntensityVars {
    pub w: Var,
    pub b: Var,
    pub alpha: Var,
    pub beta: f64,
}

impl IntensityVars {
    pub fn bind(params: &BoundParams, beta: f64) -> Result<Self> {
        Ok(Self {
            w: params.get(WEIGHT)?,
            b: params.get(BIAS)?,
            alpha: params.get(ALPHA)?,
            beta,
        })
    }
}

/// `(len−1) × C` matrix of `b_c + w_c·h(t_k)` for the interval-opening rows.
fn interval_bases(g: &mut Graph, iv: &IntensityVars, hidden: Var, len: usize) -> Result<Var> {
    let prev = g.slice_rows(hidden, 0, len - 1)?;
    let base = g.matmul(prev, iv.w)?;
    g.add_row(base, iv.b)
}

/// `base + ratio ⊗ α` for a column of slope ratios (one per row of `base`).
fn logits_at(g: &mut Graph, base: Var, iv: &IntensityVars, ratios: Vec<f64>) -> Result<Var> {
    let r = g.constant(Tensor::column(ratios)?);
    let slope = g.matmul(r, iv.alpha)?;
    g.add(base, slope)
}

/// Differentiable log-likelihood of the first `len` events; `types` are 1-based.
pub fn sequence_loglik(
    g: &mut Graph,
    iv: &IntensityVars,
    hidden: Var,
    times: &[f64],
    types: &[usize],
    comp: &Compensator,
) -> Result<Var> {
    let len = times.len();
    if len < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let base = interval_bases(g, iv, hidden, len)?;
    let end_ratios: Vec<f64> = times.windows(2).map(|w| slope_ratio(w[0], w[1])).collect();
    let end_logits = logits_at(g, base, iv, end_ratios)?;
    let end = g.softplus(end_logits, iv.beta)?;

    let picks: Vec<(usize, usize)> = (1..len).map(|i| (i - 1, types[i] - 1)).collect();
    let chosen = g.gather(end, &picks)?;
    let logs = g.log(chosen).map_err(|_| Error::NonFinite {
        op: "log intensity of an event".into(),
    })?;
    let event_term = g.sum(logs)?;

    let widths: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let lambda = match comp {
        Compensator::Trapezoid => {
            let start = g.softplus(base, iv.beta)?;
            let s_end = g.sum_rows(end)?;
            let s_start = g.sum_rows(start)?;
            let both = g.add(s_end, s_start)?;
            let half = g.constant(Tensor::row_vector(
                widths.iter().map(|w| w / 2.0).collect(),
            )?);
            let v = g.matmul(half, both)?;
            g.sum(v)?
        }
        Compensator::MonteCarlo(samples) => {
            let m = samples.per_interval;
            if samples.points.len() != len - 1 {
                return Err(Error::shape(
                    "compensator_mc",
                    "samples do not match intervals",
                ));
            }
            let reps = g.repeat_rows(base, m)?;
            let ratios: Vec<f64> = samples
                .points
                .iter()
                .zip(times)
                .flat_map(|(pts, &t0)| pts.iter().map(move |&u| slope_ratio(t0, u)))
                .collect();
            let logits = logits_at(g, reps, iv, ratios)?;
            let lam = g.softplus(logits, iv.beta)?;
            let weights: Vec<f64> = widths
                .iter()
                .flat_map(|&w| std::iter::repeat_n(w / m as f64, m))
                .collect();
            let wrow = g.constant(Tensor::row_vector(weights)?);
            let per_type = g.matmul(wrow, lam)?;
            g.sum(per_type)?
        }
    };
    g.sub(event_term, lambda)
}

//! Training loop and evaluation.
//!
//! Every random draw comes from a stream keyed by the run seed plus the
//! epoch and the sequence index, so results do not depend on thread count or
//! on how sequences are grouped into batches. Per-sequence gradients are
//! computed in parallel and summed in dataset order.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::rng::{self, purpose};
use crate::autograd::{AdamConfig, AdamState, Gradients, Graph, Tensor};
use crate::checkpoint;
use crate::data::{make_batches, Batch, Dataset};
use crate::encoder::DropoutStream;
use crate::error::{Error, Result};
use crate::intensity::{self, Compensator, Estimator, IntensityParams, IntensityVars, McSamples};
use crate::model::Model;
use crate::predict::{
    head_losses, HeadParams, HeadVars, LossWeights, Metrics, PredictionRecord, SequenceScore,
};
use crate::recurrence::{ActStats, ActTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// Monte Carlo points per interval during training.
    pub mc_samples: usize,
    /// Monte Carlo points per interval for reported evaluation.
    pub eval_mc_samples: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            estimator: Estimator::Mc,
            mc_samples: 100,
            eval_mc_samples: 10_000,
            weights: LossWeights::LIKELIHOOD,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            eval_every: 1,
            early_stop_patience: 10,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.mc_samples == 0 || self.eval_mc_samples == 0 {
            return Err(Error::Config(
                "Monte Carlo sample counts must be >= 1".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(
                "clip_norm must be finite and non-negative".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.batch_size,
            seed: self.seed,
            estimator: self.estimator,
            mc_samples: self.eval_mc_samples,
            weights: self.weights,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub estimator: Estimator,
    pub mc_samples: usize,
    pub weights: LossWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        TrainConfig::default().eval_config()
    }
}

/// Dev numbers recorded in the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub per_event_ll: f64,
    pub accuracy: f64,
    pub rmse: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub train_per_event_ll: f64,
    pub dev: Option<DevRecord>,
    pub act: ActStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_per_event_ll: Option<f64>,
    pub stopped_early: bool,
    /// Excluded from the JSON so repeated runs write identical reports.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Evaluation output: aggregate metrics, predictions and ACT statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRecord>,
    pub act: ActStats,
    /// `−LL + α_type·L_type + α_time·L_time` summed over sequences.
    pub objective: f64,
    pub total_loglik: f64,
}

pub(crate) struct RowGrad {
    pub objective: f64,
    pub loglik: f64,
    pub scored: usize,
    pub grads: Gradients,
    pub trace: ActTrace,
}

fn compensator_samples(
    times: &[f64],
    estimator: Estimator,
    m: usize,
    seed: u64,
    key: &[u64],
) -> Result<Option<McSamples>> {
    match estimator {
        Estimator::Mc if times.len() >= 2 => Ok(Some(McSamples::draw(times, m, seed, key)?)),
        _ => Ok(None),
    }
}

fn compensator(samples: &Option<McSamples>) -> Compensator<'_> {
    match samples {
        Some(s) => Compensator::MonteCarlo(s),
        None => Compensator::Trapezoid,
    }
}

/// Objective and gradients of one training sequence.
pub(crate) fn row_gradient(
    model: &Model,
    batch: &Batch,
    row: usize,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<RowGrad> {
    let seq_id = batch.seq_ids[row] as u64;
    let len = batch.lengths[row];
    let times = &batch.row_times(row)[..len];
    let types = &batch.row_types(row)[..len];

    let mut g = Graph::new();
    let params = model.params.attach(&mut g, true);
    let mut drop = DropoutStream::new(cfg.seed, &[epoch as u64, seq_id]);
    let out = model.forward_row(&mut g, &params, batch, row, Some(&mut drop))?;

    let iv = IntensityVars::bind(&params, model.config.softplus_beta)?;
    let samples = compensator_samples(
        times,
        cfg.estimator,
        cfg.mc_samples,
        cfg.seed,
        &[purpose::MC_TRAIN, epoch as u64, seq_id],
    )?;
    let ll = intensity::sequence_loglik(
        &mut g,
        &iv,
        out.hidden,
        times,
        types,
        &compensator(&samples),
    )?;
    let hv = HeadVars::bind(&params)?;
    let (l_time, l_type) = head_losses(&mut g, &hv, out.hidden, times, types)?;
    let obj = cfg.weights.objective_graph(&mut g, ll, l_type, l_time)?;
    let grads = g.backward(obj)?;
    Ok(RowGrad {
        objective: g.value(obj).item(),
        loglik: g.value(ll).item(),
        scored: len - 1,
        grads,
        trace: out.trace,
    })
}

/// Forward pass without gradients, dropout or parameter tracking.
fn row_hidden(model: &Model, batch: &Batch, row: usize) -> Result<(Tensor, ActTrace)> {
    let mut g = Graph::new();
    let params = model.params.attach(&mut g, false);
    let out = model.forward_row(&mut g, &params, batch, row, None)?;
    Ok((g.value(out.hidden).clone(), out.trace))
}

/// Scores every sequence of `data` in eval mode. Timestamps are expected in
/// model units (already divided by `time_scale`).
fn score_dataset(
    model: &Model,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<(Vec<SequenceScore>, Vec<ActTrace>, f64)> {
    let ip = IntensityParams::from_store(&model.params, model.config.softplus_beta)?;
    let heads = HeadParams::from_store(&model.params)?;
    let batches = make_batches(data, cfg.batch_size, None)?;
    let mut scores = Vec::with_capacity(data.len());
    let mut traces = Vec::with_capacity(data.len());
    let mut objective = 0.0;
    for batch in &batches {
        let rows = (0..batch.rows)
            .into_par_iter()
            .map(|row| -> Result<(SequenceScore, ActTrace, f64)> {
                let seq_id = batch.seq_ids[row];
                let len = batch.lengths[row];
                let times = &batch.row_times(row)[..len];
                let types = &batch.row_types(row)[..len];
                let (hidden, trace) = row_hidden(model, batch, row)?;
                let samples = compensator_samples(
                    times,
                    cfg.estimator,
                    cfg.mc_samples,
                    cfg.seed,
                    &[purpose::MC_EVAL, seq_id as u64],
                )?;
                let ll = ip
                    .sequence_loglik(times, types, &hidden, &compensator(&samples))
                    .map_err(|e| match e {
                        Error::NonFinite { op } => Error::NonFinite {
                            op: format!("sequence {seq_id}: {op}"),
                        },
                        other => other,
                    })?;
                let preds = heads.predict_next(&hidden, len, seq_id);
                let l_time = crate::predict::time_loss(&preds, times);
                let l_type = crate::predict::type_loss(&preds, types);
                let obj = cfg.weights.objective(ll, l_type, l_time);
                Ok((SequenceScore::new(ll, preds, times, types), trace, obj))
            })
            .collect::<Vec<_>>();
        for r in rows {
            let (s, t, o) = r?;
            scores.push(s);
            traces.push(t);
            objective += o;
        }
    }
    Ok((scores, traces, objective))
}

/// Evaluates `model` on `data` (timestamps in original units). Reported
/// log-likelihoods, times and RMSE are converted back to original units.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &EvalConfig) -> Result<Evaluation> {
    if data.total_predicted() == 0 {
        return Err(Error::NoPredictions);
    }
    let scale = model.config.time_scale;
    let scaled = data.rescaled(scale)?;
    let (mut scores, traces, objective) = score_dataset(model, &scaled, cfg)?;
    if scale != 1.0 {
        let shift = scale.ln();
        for s in &mut scores {
            s.loglik -= shift * s.predictions.len() as f64;
            s.squared_error *= scale * scale;
            for p in &mut s.predictions {
                p.t_hat *= scale;
            }
        }
    }
    let act = ActStats::from_traces(&traces, model.config.max_n);
    let metrics = Metrics::from_scores(&scores, act.mean_iters)?;
    let total_loglik = scores.iter().map(|s| s.loglik).sum();
    let predictions = scores.into_iter().flat_map(|s| s.predictions).collect();
    Ok(Evaluation {
        metrics,
        predictions,
        act,
        objective,
        total_loglik,
    })
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::BadLoss(_) => {
            Error::Diverged {
                epoch,
                batch,
                detail: e.to_string(),
            }
        }
        other => other,
    }
}

/// Trains `model` and returns the best model on `dev` (or the final model
/// when no dev set is given) together with the run report.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    dev: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    if train_set.total_predicted() == 0 {
        return Err(Error::Dataset("training set has no scored events".into()));
    }
    let start = Instant::now();
    let scale = model.config.time_scale;
    let train_scaled = train_set.rescaled(scale)?;
    let eval_cfg = cfg.eval_config();
    let mut adam = AdamState::new(cfg.adam)?;
    let mut report = RunReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_dev_per_event_ll: None,
        stopped_early: false,
        wall_seconds: 0.0,
    };
    let mut best: Option<Model> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let shuffle = rng::derive_seed(cfg.seed, &[purpose::SHUFFLE, epoch as u64]);
        let batches = make_batches(&train_scaled, cfg.batch_size, Some(shuffle))?;
        let mut epoch_obj = 0.0;
        let mut epoch_ll = 0.0;
        let mut traces = Vec::new();
        for (b, batch) in batches.iter().enumerate() {
            let rows: Vec<Result<RowGrad>> = (0..batch.rows)
                .into_par_iter()
                .map(|row| row_gradient(&model, batch, row, epoch, cfg))
                .collect();
            let mut grads = Gradients::default();
            let mut scored = 0;
            for r in rows {
                let r = r.map_err(|e| diverged(epoch, b, e))?;
                if !r.objective.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("objective {}", r.objective),
                    });
                }
                epoch_obj += r.objective;
                epoch_ll += r.loglik;
                scored += r.scored;
                grads.accumulate(&r.grads);
                traces.push(r.trace);
            }
            if scored == 0 {
                continue;
            }
            grads.scale(1.0 / scored as f64);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("gradient norm {norm}"),
                });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.step(&mut model.params, &grads)
                .map_err(|e| diverged(epoch, b, e))?;
        }

        let act = ActStats::from_traces(&traces, model.config.max_n);
        let n_scored = train_set.total_predicted() as f64;
        let mut record = EpochRecord {
            epoch,
            train_objective: epoch_obj,
            train_per_event_ll: epoch_ll / n_scored - scale.ln(),
            dev: None,
            act,
        };

        let mut stop = false;
        if let Some(dev) = dev {
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let ev = evaluate(&model, dev, &eval_cfg).map_err(|e| diverged(epoch, 0, e))?;
                let ll = ev.metrics.per_event_ll;
                record.dev = Some(DevRecord {
                    per_event_ll: ll,
                    accuracy: ev.metrics.accuracy,
                    rmse: ev.metrics.rmse,
                    objective: ev.objective,
                });
                info!(
                    "epoch {epoch}: train obj {:.4}, dev ll/event {ll:.5}, acc {:.2}%, rmse {:.4}",
                    record.train_objective, ev.metrics.accuracy, ev.metrics.rmse
                );
                if report.best_dev_per_event_ll.is_none_or(|b| ll > b) {
                    report.best_dev_per_event_ll = Some(ll);
                    report.best_epoch = Some(epoch);
                    since_best = 0;
                    if let Some(path) = &cfg.checkpoint_path {
                        checkpoint::save(&model, path)?;
                    }
                    best = Some(model.clone());
                } else {
                    since_best += cfg.eval_every;
                    if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                        stop = true;
                    }
                }
            }
        } else {
            info!("epoch {epoch}: train obj {:.4}", record.train_objective);
        }
        report.epochs.push(record);
        if stop {
            warn!("early stop after epoch {epoch}: no dev improvement for {since_best} epochs");
            report.stopped_early = true;
            break;
        }
    }

    let final_model = match best {
        Some(b) => b,
        None => {
            if let Some(path) = &cfg.checkpoint_path {
                checkpoint::save(&model, path)?;
            }
            model
        }
    };
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((final_model, report))
}

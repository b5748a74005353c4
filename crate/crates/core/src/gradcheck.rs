//! Central finite-difference check of the full training objective.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::autograd::rng;
use crate::config::ModelConfig;
use crate::data::{Batch, Dataset, Event, EventSequence};
use crate::error::Result;
use crate::intensity::Estimator;
use crate::model::Model;
use crate::predict::LossWeights;
use crate::train::{row_gradient, TrainConfig};

/// Below this magnitude both gradients are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub model: ModelConfig,
    pub num_types: usize,
    pub num_sequences: usize,
    pub seq_len: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 8,
                d_hidden: 16,
                d_k: 4,
                d_v: 4,
                heads: 2,
                d_rnn: 8,
                dropout: 0.0,
                alpha_trainable: true,
                ..ModelConfig::default()
            },
            num_types: 3,
            num_sequences: 2,
            seq_len: 6,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    #[serde(skip)]
    pub seconds: f64,
}

/// Random sequences with unit-rate exponential gaps and uniform types.
pub fn random_dataset(
    num_sequences: usize,
    len: usize,
    num_types: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut r = rng::stream(seed, &[0x6772_6164]);
    let gap = Exp::new(1.0).expect("unit rate");
    let sequences = (0..num_sequences)
        .map(|_| {
            let mut t = 0.0;
            EventSequence::new(
                (0..len)
                    .map(|_| {
                        t += 0.05 + gap.sample(&mut r);
                        Event {
                            time: t,
                            type_id: r.random_range(1..=num_types),
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    Dataset::new(sequences, num_types)
}

/// `|a − n| / max(|a|, |n|)`, or `|a − n|` when both are below [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn objective(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, crate::autograd::Gradients)> {
    let mut total = 0.0;
    let mut grads = crate::autograd::Gradients::default();
    for row in 0..batch.rows {
        let r = row_gradient(model, batch, row, 1, cfg)?;
        total += r.objective;
        grads.accumulate(&r.grads);
    }
    Ok((total, grads))
}

/// Compares every trainable entry's analytic gradient with a central difference.
pub fn grad_check(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut model = Model::build(setup.model.clone(), setup.num_types, setup.seed)?;
    let data = random_dataset(
        setup.num_sequences,
        setup.seq_len,
        setup.num_types,
        setup.seed,
    )?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let batch = Batch::from_sequences(&data, &ids)?;
    let cfg = TrainConfig {
        seed: setup.seed,
        estimator: Estimator::Mc,
        mc_samples: 20,
        weights: LossWeights::PREDICTION,
        ..TrainConfig::default()
    };
    let (_, grads) = objective(&model, &batch, &cfg)?;

    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| !model.params.is_frozen(n))
        .cloned()
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        seconds: 0.0,
    };
    for name in &names {
        let n = model.params.get(name)?.len();
        let analytic = grads
            .get(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        #[allow(clippy::needless_range_loop)]
        for k in 0..n {
            // The padding row of the embedding table is not a parameter.
            if name == crate::model::EMBEDDING && k < setup.model.d_model {
                continue;
            }
            let orig = model.params.get(name)?.data()[k];
            model.params.get_mut(name)?.data_mut()[k] = orig + setup.step;
            let (plus, _) = objective(&model, &batch, &cfg)?;
            model.params.get_mut(name)?.data_mut()[k] = orig - setup.step;
            let (minus, _) = objective(&model, &batch, &cfg)?;
            model.params.get_mut(name)?.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * setup.step);
            let err = relative_error(analytic[k], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = analytic[k];
                report.numeric = numeric;
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#![allow(dead_code)]

use rand::Rng;
use uthp::autograd::{rng, Graph, Tensor};
use uthp::data::{Dataset, Event, EventSequence};
use uthp::recurrence::ActTrace;
use uthp::{Model, ModelConfig};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_hidden: 16,
        d_k: 4,
        d_v: 4,
        heads: 2,
        d_rnn: 8,
        ..ModelConfig::default()
    }
}

pub fn random_events(seed: u64, len: usize, num_types: usize) -> Vec<Event> {
    let mut r = rng::stream(seed, &[77]);
    let mut t = 0.0;
    (0..len)
        .map(|_| {
            t += 0.05 + r.random::<f64>() * 2.0;
            Event {
                time: t,
                type_id: r.random_range(1..=num_types),
            }
        })
        .collect()
}

pub fn random_dataset(seed: u64, n: usize, max_len: usize, num_types: usize) -> Dataset {
    let mut r = rng::stream(seed, &[78]);
    let seqs = (0..n)
        .map(|k| {
            EventSequence::new(random_events(
                seed * 1000 + k as u64,
                r.random_range(1..=max_len),
                num_types,
            ))
        })
        .collect();
    Dataset::new(seqs, num_types).unwrap()
}

pub fn alternating(n: usize, len: usize) -> Dataset {
    let seqs = (0..n)
        .map(|s| {
            EventSequence::new(
                (0..len)
                    .map(|i| Event {
                        time: (i + 1) as f64,
                        type_id: 1 + (i + s) % 2,
                    })
                    .collect(),
            )
        })
        .collect();
    Dataset::new(seqs, 2).unwrap()
}

/// Eval-mode hidden rows of one unpadded sequence.
pub fn hidden(model: &Model, events: &[Event]) -> (Tensor, ActTrace) {
    let times: Vec<f64> = events.iter().map(|e| e.time).collect();
    let types: Vec<usize> = events.iter().map(|e| e.type_id).collect();
    let mask = vec![true; events.len()];
    let mut g = Graph::new();
    let params = model.params.attach(&mut g, false);
    let out = model
        .forward_seq(&mut g, &params, &times, &types, &mask, events.len(), None)
        .unwrap();
    (g.value(out.hidden).clone(), out.trace)
}

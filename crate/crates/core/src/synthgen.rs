//! Multivariate exponential-kernel Hawkes processes: simulation by Ogata
//! thinning and the closed-form log-likelihood used as ground truth.
//!
//! Kernel: `φ_{cc'}(t) = a_{cc'}·ω·e^{−ωt}`, so `a` is the branching matrix and
//! the process is stationary when its spectral radius is below one.

use std::path::Path;

use log::info;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::rng::{self, purpose};
use crate::data::{Dataset, Event, EventSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    /// `a[c][c']`: expected type-`c` offspring of a type-`c'` event.
    pub a: Vec<Vec<f64>>,
    pub decay: f64,
}

impl Default for HawkesParams {
    fn default() -> Self {
        Self {
            mu: vec![0.2, 0.2],
            a: vec![vec![0.4, 0.2], vec![0.2, 0.4]],
            decay: 1.0,
        }
    }
}

impl HawkesParams {
    pub fn num_types(&self) -> usize {
        self.mu.len()
    }

    pub fn spectral_radius(&self) -> f64 {
        let c = self.num_types();
        let m = DMatrix::from_fn(c, c, |i, j| self.a[i][j]);
        m.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_types();
        if c == 0 {
            return Err(Error::Hawkes("at least one event type is required".into()));
        }
        if self.a.len() != c || self.a.iter().any(|r| r.len() != c) {
            return Err(Error::Hawkes(format!("excitation matrix must be {c}x{c}")));
        }
        if self.mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Hawkes(
                "background rates must be positive and finite".into(),
            ));
        }
        if self
            .a
            .iter()
            .flatten()
            .any(|&x| !(x >= 0.0 && x.is_finite()))
        {
            return Err(Error::Hawkes(
                "excitation entries must be non-negative and finite".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Hawkes("decay must be positive and finite".into()));
        }
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::Hawkes(format!(
                "non-stationary: spectral radius {rho:.6} >= 1"
            )));
        }
        Ok(())
    }

    /// `Σ_c a_{c,c'}` for each source type `c'`.
    fn column_sums(&self) -> Vec<f64> {
        (0..self.num_types())
            .map(|j| self.a.iter().map(|row| row[j]).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_sequences: usize,
    pub horizon: f64,
    pub seed: u64,
}

/// Written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub mu: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub decay: f64,
    pub seed: u64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl Sidecar {
    pub fn new(p: &HawkesParams, spec: &GenSpec) -> Self {
        Self {
            mu: p.mu.clone(),
            a: p.a.clone(),
            decay: p.decay,
            seed: spec.seed,
            horizon: spec.horizon,
        }
    }

    pub fn params(&self) -> HawkesParams {
        HawkesParams {
            mu: self.mu.clone(),
            a: self.a.clone(),
            decay: self.decay,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `λ_c(t)` for every type given the events strictly before `t`.
pub fn classical_intensity(p: &HawkesParams, history: &[Event], t: f64) -> Vec<f64> {
    let mut lam = p.mu.clone();
    for e in history.iter().filter(|e| e.time < t) {
        let k = p.decay * (-p.decay * (t - e.time)).exp();
        for (c, l) in lam.iter_mut().enumerate() {
            *l += p.a[c][e.type_id - 1] * k;
        }
    }
    lam
}

fn simulate_one(p: &HawkesParams, horizon: f64, seed: u64) -> Vec<Event> {
    let c = p.num_types();
    let mut r = rng::stream(seed, &[]);
    let unit = Exp::new(1.0).expect("unit rate");
    let mu_sum: f64 = p.mu.iter().sum();
    // Excitation part of each λ_c at the current time.
    let mut excite = vec![0.0; c];
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        let bound = mu_sum + excite.iter().sum::<f64>();
        let gap = unit.sample(&mut r) / bound;
        let shrink = (-p.decay * gap).exp();
        t += gap;
        if t > horizon {
            break;
        }
        for x in excite.iter_mut() {
            *x *= shrink;
        }
        let lam: Vec<f64> = p.mu.iter().zip(&excite).map(|(m, x)| m + x).collect();
        let total: f64 = lam.iter().sum();
        let u: f64 = r.random::<f64>() * bound;
        if u >= total {
            continue;
        }
        let mut acc = 0.0;
        let mut kind = c - 1;
        for (k, l) in lam.iter().enumerate() {
            acc += l;
            if u < acc {
                kind = k;
                break;
            }
        }
        events.push(Event {
            time: t,
            type_id: kind + 1,
        });
        for (k, x) in excite.iter_mut().enumerate() {
            *x += p.a[k][kind] * p.decay;
        }
    }
    events
}

/// Simulates `spec.num_sequences` independent sequences on `(0, T]`.
/// Empty draws are repeated with a fresh derived seed.
pub fn simulate(p: &HawkesParams, spec: &GenSpec) -> Result<Dataset> {
    p.validate()?;
    if spec.num_sequences == 0 {
        return Err(Error::Config("number of sequences must be >= 1".into()));
    }
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        return Err(Error::Config("horizon must be positive and finite".into()));
    }
    let sequences: Vec<(EventSequence, u64)> = (0..spec.num_sequences)
        .into_par_iter()
        .map(|n| {
            let mut attempt = 0u64;
            loop {
                let seed = rng::derive_seed(spec.seed, &[purpose::SIMULATE, n as u64, attempt]);
                let events = simulate_one(p, spec.horizon, seed);
                if !events.is_empty() {
                    return (EventSequence::new(events), attempt);
                }
                attempt += 1;
            }
        })
        .collect();
    let redrawn: u64 = sequences.iter().map(|(_, a)| a).sum();
    if redrawn > 0 {
        info!("redrew {redrawn} empty sequence(s)");
    }
    Dataset::new(
        sequences.into_iter().map(|(s, _)| s).collect(),
        p.num_types(),
    )
}

/// Log-likelihood of the events in `(0, T]` with the compensator taken from
/// `t_1` to `T`. Events after `T` are ignored.
pub fn exact_loglik(p: &HawkesParams, seq: &EventSequence, horizon: f64) -> f64 {
    let events: Vec<&Event> = seq.events.iter().filter(|e| e.time <= horizon).collect();
    let Some(first) = events.first() else {
        return 0.0;
    };
    let c = p.num_types();
    let col = p.column_sums();
    let mut excite = vec![0.0; c];
    let mut last = first.time;
    let mut events_term = 0.0;
    let mut comp = p.mu.iter().sum::<f64>() * (horizon - first.time);
    for e in &events {
        let shrink = (-p.decay * (e.time - last)).exp();
        for x in excite.iter_mut() {
            *x *= shrink;
        }
        last = e.time;
        let k = e.type_id - 1;
        events_term += (p.mu[k] + excite[k]).ln();
        for (j, x) in excite.iter_mut().enumerate() {
            *x += p.a[j][k] * p.decay;
        }
        comp += col[k] * (1.0 - (-p.decay * (horizon - e.time)).exp());
    }
    events_term - comp
}

/// The quantity the neural model scores: events `2..=I` and the compensator
/// over `[t_1, t_I]`.
pub fn exact_loglik_scored(p: &HawkesParams, seq: &EventSequence) -> f64 {
    let Some(first) = seq.events.first() else {
        return 0.0;
    };
    let last = seq.events.last().expect("non-empty").time;
    exact_loglik(p, seq, last) - p.mu[first.type_id - 1].ln()
}

/// `Λ(t_{k−1}, t_k]` of the total intensity for each event (with `t_0 = 0`).
/// Under the true parameters these are i.i.d. Exponential(1).
pub fn rescaled_increments(p: &HawkesParams, seq: &EventSequence) -> Vec<f64> {
    let col = p.column_sums();
    let mu_sum: f64 = p.mu.iter().sum();
    // Σ_j colsum(c_j)·ω·e^{−ω(t − t_j)}, divided by ω.
    let mut pending = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(seq.len());
    for e in &seq.events {
        let dt = e.time - prev;
        let shrink = (-p.decay * dt).exp();
        out.push(mu_sum * dt + pending * (1.0 - shrink));
        pending = pending * shrink + col[e.type_id - 1];
        prev = e.time;
    }
    out
}

/// `Λ(0, T]` of the total intensity over the whole observation window.
pub fn window_compensator(p: &HawkesParams, seq: &EventSequence, horizon: f64) -> f64 {
    let col = p.column_sums();
    let mu_sum: f64 = p.mu.iter().sum::<f64>() * horizon;
    let excited: f64 = seq
        .events
        .iter()
        .filter(|e| e.time <= horizon)
        .map(|e| col[e.type_id - 1] * (1.0 - (-p.decay * (horizon - e.time)).exp()))
        .sum();
    mu_sum + excited
}

/// Gaps of all sequences' rescaled event times laid end to end, each
/// window `[0, Λ(0, T]]` following the previous one.
///
/// Per-sequence gaps alone are biased short because every window drops its
/// censored last gap; chaining the windows keeps the pooled points a single
/// unit-rate Poisson process, so the gaps are i.i.d. Exponential(1).
pub fn pooled_rescaled_gaps(p: &HawkesParams, data: &Dataset, horizon: f64) -> Vec<f64> {
    let mut gaps = Vec::with_capacity(data.total_events());
    let mut carry = 0.0;
    for seq in &data.sequences {
        let inc = rescaled_increments(p, seq);
        let mut used = 0.0;
        for (k, d) in inc.iter().enumerate() {
            gaps.push(if k == 0 { carry + d } else { *d });
            used += d;
        }
        // Datasets hold no empty sequences, so the first gap above consumed `carry`.
        carry = window_compensator(p, seq, horizon) - used;
    }
    gaps
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov–Smirnov test against Exponential(1).
pub fn ks_exponential(samples: &[f64]) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::Dataset("KS test needs at least one sample".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let cdf = 1.0 - (-x).exp();
        d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
    }
    let root = n.sqrt();
    let lambda = (root + 0.12 + 0.11 / root) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_tail(lambda),
        n: xs.len(),
    })
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

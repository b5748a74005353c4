//! Event-sequence datasets: JSON-Lines loading, splitting and padded batching.
//!
//! File format, one sequence per line:
//!
//! ```text
//! {"num_types": 3}                                 <- optional, first line only
//! {"events":[{"t":0.5,"c":1},{"t":1.25,"c":3}]}
//! ```
//!
//! Type ids are `1..=C`; id 0 is reserved for padding inside [`Batch`].

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::rng::{self, purpose};
use crate::error::{Error, Result};

/// Spacing added between events that share a timestamp.
pub const TIE_EPSILON: f64 = 1e-9;

/// Type id reserved for padding.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(rename = "c")]
    pub type_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn types(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.type_id).collect()
    }

    /// Number of events that are scored (every event but the first).
    pub fn num_predicted(&self) -> usize {
        self.events.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_types: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_types: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    t: f64,
    c: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    events: Vec<RawEvent>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Dataset("no sequences".into()));
        }
        if num_types == 0 {
            return Err(Error::Dataset("num_types must be positive".into()));
        }
        for (n, s) in sequences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Dataset(format!("sequence {n} is empty")));
            }
            for (i, e) in s.events.iter().enumerate() {
                if !(e.time.is_finite() && e.time >= 0.0) {
                    return Err(Error::Dataset(format!(
                        "sequence {n} event {i}: bad time {}",
                        e.time
                    )));
                }
                if e.type_id == 0 || e.type_id > num_types {
                    return Err(Error::Dataset(format!(
                        "sequence {n} event {i}: type_id {} not in [1, {num_types}]",
                        e.type_id
                    )));
                }
                if i > 0 && e.time <= s.events[i - 1].time {
                    return Err(Error::Dataset(format!(
                        "sequence {n} event {i}: times must be strictly increasing"
                    )));
                }
            }
        }
        Ok(Self {
            sequences,
            num_types,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    pub fn total_predicted(&self) -> usize {
        self.sequences
            .iter()
            .map(EventSequence::num_predicted)
            .sum()
    }

    /// Divides every timestamp by `scale` (1.0 leaves the data untouched).
    pub fn rescaled(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "time_scale must be positive, got {scale}"
            )));
        }
        if scale == 1.0 {
            return Ok(self.clone());
        }
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                EventSequence::new(
                    s.events
                        .iter()
                        .map(|e| Event {
                            time: e.time / scale,
                            type_id: e.type_id,
                        })
                        .collect(),
                )
            })
            .collect();
        Dataset::new(sequences, self.num_types)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            num_types: self.num_types,
        }
    }

    /// Serializes to the JSON-Lines format, header first.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&serde_json::json!({ "num_types": self.num_types }))
            .expect("header serializes");
        out.push('\n');
        for s in &self.sequences {
            out.push_str(&serde_json::to_string(s).expect("sequence serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON-Lines dataset from disk. See [`parse_dataset`].
pub fn load_dataset(path: &Path, declared_num_types: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, declared_num_types)
}

/// Parses JSON-Lines text. `C` is taken from `declared_num_types`, else from
/// the header line, else from the largest observed type id. Tied timestamps
/// are spread apart by multiples of [`TIE_EPSILON`].
pub fn parse_dataset(text: &str, declared_num_types: Option<usize>) -> Result<Dataset> {
    if declared_num_types == Some(0) {
        return Err(Error::Config("declared num_types must be positive".into()));
    }
    let mut header_types = None;
    let mut raw: Vec<(usize, RawSequence)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if raw.is_empty() && header_types.is_none() && line.contains("\"num_types\"") {
            let h: Header = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if h.num_types == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "num_types must be positive".into(),
                });
            }
            header_types = Some(h.num_types);
            continue;
        }
        let seq: RawSequence = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if seq.events.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "sequence has no events".into(),
            });
        }
        raw.push((line_no, seq));
    }
    if raw.is_empty() {
        return Err(Error::Dataset("file contains no sequences".into()));
    }

    let declared = declared_num_types.or(header_types);
    let max_seen = raw
        .iter()
        .flat_map(|(_, s)| s.events.iter().map(|e| e.c))
        .max()
        .unwrap_or(0);
    let num_types = declared.unwrap_or(max_seen.max(0) as usize);

    let mut sequences = Vec::with_capacity(raw.len());
    for (line, seq) in raw {
        let mut events = Vec::with_capacity(seq.events.len());
        for e in &seq.events {
            if e.c < 1 || e.c as usize > num_types {
                return Err(Error::TypeOutOfRange {
                    line,
                    type_id: e.c,
                    num_types,
                });
            }
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("negative or non-finite time {}", e.t),
                });
            }
            if let Some(prev) = events.last().map(|p: &Event| p.time) {
                if e.t < prev {
                    return Err(Error::Parse {
                        line,
                        message: format!("times must be non-decreasing ({} after {prev})", e.t),
                    });
                }
            }
            events.push(Event {
                time: e.t,
                type_id: e.c as usize,
            });
        }
        break_ties(&mut events, line)?;
        sequences.push(EventSequence::new(events));
    }
    Dataset::new(sequences, num_types)
}

/// Adds `k·ε` to the k-th repeat of a timestamp.
fn break_ties(events: &mut [Event], line: usize) -> Result<()> {
    let mut tied = 0usize;
    let mut run_start = 0;
    for i in 1..events.len() {
        if events[i].time == events[run_start].time {
            let k = i - run_start;
            events[i].time = events[run_start].time + k as f64 * TIE_EPSILON;
            tied += 1;
        } else {
            run_start = i;
        }
    }
    if tied > 0 {
        warn!("line {line}: {tied} tied timestamp(s) separated by {TIE_EPSILON}");
        if events.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(Error::Parse {
                line,
                message: "tied timestamps cannot be separated at this magnitude".into(),
            });
        }
    }
    Ok(())
}

/// Deterministic shuffled partition into (train, dev, test).
///
/// Part sizes are `⌊ratio·N⌋`, with the leftover sequences handed to the
/// parts with the largest fractional remainders (positive ratios only).
pub fn split_dataset(
    d: &Dataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative: {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1: {ratios:?}"
        )));
    }
    let n = d.len();
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&k| ratios[k] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[k] += 1;
        leftover -= 1;
    }
    for k in 0..3 {
        if ratios[k] > 0.0 && sizes[k] == 0 {
            return Err(Error::Config(format!(
                "split {ratios:?} of {n} sequences leaves part {k} empty"
            )));
        }
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[purpose::SPLIT]));
    let (a, rest) = idx.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    let part = |ix: &[usize]| Dataset {
        sequences: ix.iter().map(|&i| d.sequences[i].clone()).collect(),
        num_types: d.num_types,
    };
    Ok((part(a), part(b), part(c)))
}

/// Padded batch of sequences; row-major `rows × max_len` layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub max_len: usize,
    pub times: Vec<f64>,
    pub type_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// Index of each row's sequence in the source dataset.
    pub seq_ids: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(d: &Dataset, seq_ids: &[usize]) -> Result<Self> {
        if seq_ids.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let max_len = seq_ids
            .iter()
            .map(|&i| d.sequences[i].len())
            .max()
            .unwrap_or(0);
        let rows = seq_ids.len();
        let mut times = vec![0.0; rows * max_len];
        let mut type_ids = vec![PAD; rows * max_len];
        let mut pad_mask = vec![false; rows * max_len];
        let mut lengths = Vec::with_capacity(rows);
        for (r, &i) in seq_ids.iter().enumerate() {
            let s = &d.sequences[i];
            for (j, e) in s.events.iter().enumerate() {
                times[r * max_len + j] = e.time;
                type_ids[r * max_len + j] = e.type_id;
                pad_mask[r * max_len + j] = true;
            }
            lengths.push(s.len());
        }
        Ok(Self {
            rows,
            max_len,
            times,
            type_ids,
            pad_mask,
            lengths,
            seq_ids: seq_ids.to_vec(),
        })
    }

    pub fn row_times(&self, r: usize) -> &[f64] {
        &self.times[r * self.max_len..(r + 1) * self.max_len]
    }

    pub fn row_types(&self, r: usize) -> &[usize] {
        &self.type_ids[r * self.max_len..(r + 1) * self.max_len]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.pad_mask[r * self.max_len..(r + 1) * self.max_len]
    }
}

/// Splits `d` into padded batches. Without a seed, file order is kept.
pub fn make_batches(
    d: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut rng::stream(seed, &[purpose::SHUFFLE]));
    }
    idx.chunks(batch_size)
        .map(|chunk| Batch::from_sequences(d, chunk))
        .collect()
}

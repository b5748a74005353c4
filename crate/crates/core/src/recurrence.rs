//! Recursive application of the encoding layer.
//!
//! * [`run_pure`] applies the layer a fixed `max_n` times, re-adding the
//!   temporal encoding before every pass.
//! * [`run_act`] lets each position decide how many passes it receives via
//!   adaptive computation time and returns the update-weighted blend of the
//!   intermediate states.
//! * [`postprocess`] is the optional FC → gated recurrent cell → FC block.

use serde::{Deserialize, Serialize};

use crate::autograd::{BoundParams, Graph, Tensor, Var};
use crate::config::ModelConfig;
use crate::encoder::{encoding_layer, DropoutStream, LayerVars, SeqMasks};
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};

/// Fixed-count recurrence: `S ← layer_k(S + X)` for `k = 1..max_n`.
///
/// With one layer in `layers` it is reused on every pass; otherwise pass `k`
/// uses `layers[k]`.
#[allow(clippy::too_many_arguments)]
pub fn run_pure(
    g: &mut Graph,
    embedded: Var,
    temporal: Var,
    layers: &[LayerVars],
    max_n: usize,
    masks: &SeqMasks,
    cfg: &ModelConfig,
    mut drop: Option<&mut DropoutStream>,
) -> Result<Var> {
    if max_n == 0 {
        return Err(Error::Config("max_n must be >= 1".into()));
    }
    if layers.len() != 1 && layers.len() != max_n {
        return Err(Error::Config(format!(
            "{} layer parameter sets for {max_n} iterations",
            layers.len()
        )));
    }
    let mut s = embedded;
    for k in 0..max_n {
        let layer = &layers[if layers.len() == 1 { 0 } else { k }];
        s = g.add(s, temporal)?;
        s = encoding_layer(g, s, layer, masks, cfg, drop.as_deref_mut())?;
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct ActVars {
    pub w_p: Var,
    pub b_p: Var,
}

impl ActVars {
    pub fn bind(params: &BoundParams) -> Result<Self> {
        Ok(Self {
            w_p: params.get("act.w_p")?,
            b_p: params.get("act.b_p")?,
        })
    }
}

pub fn act_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::matrix("act.w_p", cfg.d_model, 1),
        ParamSpec::new("act.b_p", 1, 1, Init::Zeros),
    ]
}

/// Halting record of one real position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionTrace {
    pub n_updates: usize,
    pub halted: bool,
    /// Update weight applied on each pass the loop ran (zero once halted).
    pub weights: Vec<f64>,
    /// Largest accumulated halting probability observed.
    pub max_halting: f64,
}

impl PositionTrace {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Iteration record for one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActTrace {
    pub iterations: usize,
    pub positions: Vec<PositionTrace>,
}

impl ActTrace {
    pub fn pure(len: usize, max_n: usize) -> Self {
        Self {
            iterations: max_n,
            positions: (0..len)
                .map(|_| PositionTrace {
                    n_updates: max_n,
                    halted: false,
                    weights: Vec::new(),
                    max_halting: 0.0,
                })
                .collect(),
        }
    }
}

/// Aggregate iteration statistics over many sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActStats {
    pub positions: usize,
    pub mean_iters: f64,
    pub max_iters: usize,
    pub frac_halted: f64,
    /// `histogram[n]` counts positions that received `n` updates.
    pub histogram: Vec<usize>,
}

impl ActStats {
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a ActTrace>, max_n: usize) -> Self {
        let mut histogram = vec![0; max_n + 1];
        let mut positions = 0;
        let mut total = 0;
        let mut halted = 0;
        let mut max_iters = 0;
        for t in traces {
            for p in &t.positions {
                positions += 1;
                total += p.n_updates;
                halted += p.halted as usize;
                max_iters = max_iters.max(p.n_updates);
                if p.n_updates < histogram.len() {
                    histogram[p.n_updates] += 1;
                }
            }
        }
        let denom = positions.max(1) as f64;
        Self {
            positions,
            mean_iters: total as f64 / denom,
            max_iters,
            frac_halted: halted as f64 / denom,
            histogram,
        }
    }
}

/// Adaptive computation time over positions of one sequence.
///
/// Per pass, with `p = σ(S·w_p + b_p)` and `running` the positions that have
/// neither halted nor used `max_n` passes:
///
/// ```text
/// new_halted = running ∧ (h + p > T_h)
/// still      = running ∧ (h + p ≤ T_h)
/// h += p·still;  R += new_halted·(1 − h);  h += new_halted·R
/// w  = p·still + new_halted·R
/// S  ← layer(S + X);  P ← S·w + P·(1 − w)
/// ```
///
/// The loop runs while some real position has `h < T_h` and fewer than
/// `max_n` updates. The halting decision uses the cumulative probability.
/// Padded positions start halted. Returns `P`.
#[allow(clippy::too_many_arguments)]
pub fn run_act(
    g: &mut Graph,
    embedded: Var,
    temporal: Var,
    layer: &LayerVars,
    act: &ActVars,
    threshold: f64,
    max_n: usize,
    pad_mask: &[bool],
    masks: &SeqMasks,
    cfg: &ModelConfig,
    mut drop: Option<&mut DropoutStream>,
) -> Result<(Var, ActTrace)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "act threshold must be in (0, 1], got {threshold}"
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be >= 1".into()));
    }
    let n_pos = pad_mask.len();
    let d = g.value(embedded).cols();

    let mut halting = g.constant(Tensor::column(
        pad_mask
            .iter()
            .map(|&m| if m { 0.0 } else { 1.0 })
            .collect(),
    )?);
    let mut remainders = g.constant(Tensor::zeros(n_pos, 1));
    let mut previous = g.constant(Tensor::zeros(n_pos, d));
    let mut n_updates = vec![0usize; n_pos];
    let mut halted: Vec<bool> = pad_mask.iter().map(|&m| !m).collect();
    let mut trace = ActTrace {
        iterations: 0,
        positions: vec![PositionTrace::default(); pad_mask.iter().filter(|&&m| m).count()],
    };

    let mut s = embedded;
    loop {
        let h_now = g.value(halting).data().to_vec();
        let active = (0..n_pos)
            .any(|i| pad_mask[i] && !halted[i] && h_now[i] < threshold && n_updates[i] < max_n);
        if !active {
            break;
        }
        trace.iterations += 1;

        s = g.add(s, temporal)?;
        let logits = g.matmul(s, act.w_p)?;
        let logits = g.add_row(logits, act.b_p)?;
        let p = g.sigmoid(logits)?;
        let p_now = g.value(p).data().to_vec();

        let mut still = vec![0.0; n_pos];
        let mut new_halted = vec![0.0; n_pos];
        for i in 0..n_pos {
            if halted[i] || n_updates[i] >= max_n {
                continue;
            }
            if h_now[i] + p_now[i] > threshold {
                new_halted[i] = 1.0;
                halted[i] = true;
            } else {
                still[i] = 1.0;
            }
            n_updates[i] += 1;
        }
        let still_v = g.constant(Tensor::column(still)?);
        let new_v = g.constant(Tensor::column(new_halted)?);

        let p_still = g.mul(p, still_v)?;
        halting = g.add(halting, p_still)?;
        let neg_h = g.scale(halting, -1.0)?;
        let one_minus_h = g.add_scalar(neg_h, 1.0)?;
        let rem_inc = g.mul(new_v, one_minus_h)?;
        remainders = g.add(remainders, rem_inc)?;
        let h_inc = g.mul(new_v, remainders)?;
        halting = g.add(halting, h_inc)?;
        let w = g.add(p_still, h_inc)?;

        s = encoding_layer(g, s, layer, masks, cfg, drop.as_deref_mut())?;

        let neg_w = g.scale(w, -1.0)?;
        let keep = g.add_scalar(neg_w, 1.0)?;
        let fresh = g.mul_col(s, w)?;
        let kept = g.mul_col(previous, keep)?;
        previous = g.add(fresh, kept)?;

        let w_now = g.value(w).data().to_vec();
        let h_after = g.value(halting).data().to_vec();
        let mut k = 0;
        for i in 0..n_pos {
            if !pad_mask[i] {
                continue;
            }
            let pt = &mut trace.positions[k];
            pt.weights.push(w_now[i]);
            pt.max_halting = pt.max_halting.max(h_after[i]);
            k += 1;
        }
    }

    let mut k = 0;
    for i in 0..n_pos {
        if pad_mask[i] {
            trace.positions[k].n_updates = n_updates[i];
            trace.positions[k].halted = halted[i];
            k += 1;
        }
    }
    Ok((previous, trace))
}

/// Graph handles for the FC → GRU → FC postprocessing block.
#[derive(Clone, Copy, Debug)]
pub struct PostVars {
    pub fc3_w: Var,
    pub fc3_b: Var,
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub c_z: Var,
    pub c_r: Var,
    pub c_n: Var,
    pub fc4_w: Var,
    pub fc4_b: Var,
}

pub fn post_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, r) = (cfg.d_model, cfg.d_rnn);
    if r == 0 {
        return Vec::new();
    }
    let mut specs = vec![
        ParamSpec::matrix("post.fc3.weight", d, r),
        ParamSpec::new("post.fc3.bias", 1, r, Init::Zeros),
    ];
    for gate in ["z", "r", "n"] {
        specs.push(ParamSpec::matrix(format!("post.gru.w_{gate}"), r, r));
        specs.push(ParamSpec::new(
            format!("post.gru.b_{gate}"),
            1,
            r,
            Init::Zeros,
        ));
        specs.push(ParamSpec::matrix(format!("post.gru.u_{gate}"), r, r));
        specs.push(ParamSpec::new(
            format!("post.gru.c_{gate}"),
            1,
            r,
            Init::Zeros,
        ));
    }
    specs.push(ParamSpec::matrix("post.fc4.weight", r, d));
    specs.push(ParamSpec::new("post.fc4.bias", 1, d, Init::Zeros));
    specs
}

impl PostVars {
    pub fn bind(params: &BoundParams) -> Result<Self> {
        let get = |s: &str| params.get(&format!("post.{s}"));
        Ok(Self {
            fc3_w: get("fc3.weight")?,
            fc3_b: get("fc3.bias")?,
            w_z: get("gru.w_z")?,
            w_r: get("gru.w_r")?,
            w_n: get("gru.w_n")?,
            b_z: get("gru.b_z")?,
            b_r: get("gru.b_r")?,
            b_n: get("gru.b_n")?,
            u_z: get("gru.u_z")?,
            u_r: get("gru.u_r")?,
            u_n: get("gru.u_n")?,
            c_z: get("gru.c_z")?,
            c_r: get("gru.c_r")?,
            c_n: get("gru.c_n")?,
            fc4_w: get("fc4.weight")?,
            fc4_b: get("fc4.bias")?,
        })
    }
}

/// FC3, then a left-to-right gated recurrent pass over the first `len`
/// positions (the real ones), then FC4. Padded rows come out as zeros.
///
/// Cell: `z = σ(x W_z + b_z + h U_z + c_z)`, `r = σ(x W_r + b_r + h U_r + c_r)`,
/// `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`, `h' = n + z ⊙ (h − n)`.
pub fn postprocess(
    g: &mut Graph,
    h: Var,
    post: &PostVars,
    len: usize,
    d_rnn: usize,
) -> Result<Var> {
    if d_rnn == 0 {
        return Err(Error::Config("postprocess called with d_rnn = 0".into()));
    }
    let (n_pos, d) = {
        let t = g.value(h);
        (t.rows(), t.cols())
    };
    if len == 0 || len > n_pos {
        return Err(Error::shape(
            "postprocess",
            format!("length {len} of {n_pos} rows"),
        ));
    }
    let x = g.matmul(h, post.fc3_w)?;
    let x = g.add_row(x, post.fc3_b)?;
    let proj = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    };
    let xz = proj(g, post.w_z, post.b_z)?;
    let xr = proj(g, post.w_r, post.b_r)?;
    let xn = proj(g, post.w_n, post.b_n)?;

    let mut state = g.constant(Tensor::zeros(1, d_rnn));
    let mut rows = Vec::with_capacity(n_pos);
    for t in 0..len {
        let hz = g.matmul(state, post.u_z)?;
        let hz = g.add(hz, post.c_z)?;
        let hr = g.matmul(state, post.u_r)?;
        let hr = g.add(hr, post.c_r)?;
        let hn = g.matmul(state, post.u_n)?;
        let hn = g.add(hn, post.c_n)?;

        let xz_t = g.slice_rows(xz, t, 1)?;
        let xr_t = g.slice_rows(xr, t, 1)?;
        let xn_t = g.slice_rows(xn, t, 1)?;

        let z = g.add(xz_t, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr_t, hr)?;
        let r = g.sigmoid(r)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn_t, rn)?;
        let n = g.tanh(n)?;
        let diff = g.sub(state, n)?;
        let zd = g.mul(z, diff)?;
        state = g.add(n, zd)?;
        rows.push(state);
    }
    let hidden = g.concat_rows(&rows)?;
    let out = g.matmul(hidden, post.fc4_w)?;
    let out = g.add_row(out, post.fc4_b)?;
    if len == n_pos {
        return Ok(out);
    }
    let pad = g.constant(Tensor::zeros(n_pos - len, d));
    g.concat_rows(&[out, pad])
}

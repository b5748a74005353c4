//! The shared encoding layer: temporal encoding, type embedding, masked
//! multi-head attention and the convolution-augmented feed-forward block.
//!
//! Everything is row-per-event: a sequence padded to `I` positions is an
//! `I × D` matrix. Padded rows are computed but masked out of attention and
//! zeroed at the layer output, so they never reach a real position.

use crate::autograd::rng::{self, purpose, StreamRng};
use crate::autograd::{BoundParams, Graph, Tensor, Var, MASK_NEG};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};

const LN_EPS: f64 = 1e-6;

/// Sinusoidal encoding of event timestamps, one row per event.
///
/// Entry `j` (1-based) is `cos(t / 10000^((j-1)/D))` for odd `j` and
/// `sin(t / 10000^(j/D))` for even `j`.
pub fn temporal_encoding(times: &[f64], d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "temporal encoding needs an even dimension, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(times.len() * d);
    for &t in times {
        for j in 1..=d {
            let v = if j % 2 == 1 {
                (t / 10000f64.powf((j - 1) as f64 / d as f64)).cos()
            } else {
                (t / 10000f64.powf(j as f64 / d as f64)).sin()
            };
            out.push(v);
        }
    }
    Tensor::from_rows(times.len(), d, out)
}

/// Type embedding lookup; id 0 (padding) maps to the zero vector.
pub fn embed_types(g: &mut Graph, table: Var, type_ids: &[usize]) -> Result<Var> {
    g.embedding(table, type_ids)
}

/// Additive attention mask: query `i` may see key `j` iff `j <= i` and `j` is real.
pub fn attention_mask(pad_mask: &[bool]) -> Result<Tensor> {
    let n = pad_mask.len();
    let mut m = vec![MASK_NEG; n * n];
    for i in 0..n {
        for j in 0..=i {
            if pad_mask[j] {
                m[i * n + j] = 0.0;
            }
        }
    }
    Tensor::from_rows(n, n, m)
}

/// Per-sequence masks shared by every layer pass.
#[derive(Clone, Copy, Debug)]
pub struct SeqMasks {
    /// `I × I` additive causal + padding mask.
    pub attn: Var,
    /// `I × 1` column of 1.0 (real) / 0.0 (padding).
    pub rows: Var,
}

impl SeqMasks {
    pub fn new(g: &mut Graph, pad_mask: &[bool]) -> Result<Self> {
        let attn = g.constant(attention_mask(pad_mask)?);
        let rows = g.constant(Tensor::column(
            pad_mask
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect(),
        )?);
        Ok(Self { attn, rows })
    }
}

/// Seeded dropout source. Each dropout site draws from its own stream keyed by
/// the context key and a running call counter.
#[derive(Clone, Debug)]
pub struct DropoutStream {
    seed: u64,
    key: Vec<u64>,
    draws: u64,
}

impl DropoutStream {
    pub fn new(seed: u64, key: &[u64]) -> Self {
        let mut k = vec![purpose::DROPOUT];
        k.extend_from_slice(key);
        Self {
            seed,
            key: k,
            draws: 0,
        }
    }

    /// Number of dropout masks drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn next(&mut self) -> StreamRng {
        let mut k = self.key.clone();
        k.push(self.draws);
        self.draws += 1;
        rng::stream(self.seed, &k)
    }
}

pub(crate) fn dropout(
    g: &mut Graph,
    x: Var,
    rate: f64,
    drop: Option<&mut DropoutStream>,
) -> Result<Var> {
    match drop {
        Some(d) if rate > 0.0 => {
            let mut r = d.next();
            g.dropout(x, rate, Some(&mut r))
        }
        _ => Ok(x),
    }
}

/// Graph handles for one encoding layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub conv: Option<(Var, Var)>,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

fn layer_prefix(layer: usize) -> String {
    format!("layer{layer}")
}

/// Shapes of one encoding layer. Head `l` owns columns
/// `[l·d_k, (l+1)·d_k)` of `w_q`/`w_k` and `[l·d_v, (l+1)·d_v)` of `w_v`.
pub fn layer_param_specs(cfg: &ModelConfig, layer: usize) -> Vec<ParamSpec> {
    let p = layer_prefix(layer);
    let d = cfg.d_model;
    let hk = cfg.heads * cfg.d_k;
    let hv = cfg.heads * cfg.d_v;
    let mut specs = vec![
        ParamSpec::matrix(format!("{p}.attn.w_q"), d, hk),
        ParamSpec::matrix(format!("{p}.attn.w_k"), d, hk),
        ParamSpec::matrix(format!("{p}.attn.w_v"), d, hv),
        ParamSpec::matrix(format!("{p}.attn.w_o"), hv, d),
        ParamSpec::new(format!("{p}.norm1.gain"), 1, d, Init::Ones),
        ParamSpec::new(format!("{p}.norm1.bias"), 1, d, Init::Zeros),
        ParamSpec::matrix(format!("{p}.ffn.fc1.weight"), d, cfg.d_hidden),
        ParamSpec::new(format!("{p}.ffn.fc1.bias"), 1, cfg.d_hidden, Init::Zeros),
    ];
    if cfg.use_cnn_ffn {
        let k = cfg.conv_kernel;
        specs.push(ParamSpec::new(
            format!("{p}.ffn.conv.weight"),
            1,
            k,
            Init::Xavier {
                fan_in: k,
                fan_out: k,
            },
        ));
        specs.push(ParamSpec::new(
            format!("{p}.ffn.conv.bias"),
            1,
            1,
            Init::Zeros,
        ));
    }
    specs.extend([
        ParamSpec::matrix(format!("{p}.ffn.fc2.weight"), cfg.ffn_out_in(), d),
        ParamSpec::new(format!("{p}.ffn.fc2.bias"), 1, d, Init::Zeros),
        ParamSpec::new(format!("{p}.norm2.gain"), 1, d, Init::Ones),
        ParamSpec::new(format!("{p}.norm2.bias"), 1, d, Init::Zeros),
    ]);
    specs
}

impl LayerVars {
    pub fn bind(params: &BoundParams, cfg: &ModelConfig, layer: usize) -> Result<Self> {
        let p = layer_prefix(layer);
        let get = |s: &str| params.get(&format!("{p}.{s}"));
        Ok(Self {
            w_q: get("attn.w_q")?,
            w_k: get("attn.w_k")?,
            w_v: get("attn.w_v")?,
            w_o: get("attn.w_o")?,
            norm1_gain: get("norm1.gain")?,
            norm1_bias: get("norm1.bias")?,
            fc1_w: get("ffn.fc1.weight")?,
            fc1_b: get("ffn.fc1.bias")?,
            conv: if cfg.use_cnn_ffn {
                Some((get("ffn.conv.weight")?, get("ffn.conv.bias")?))
            } else {
                None
            },
            fc2_w: get("ffn.fc2.weight")?,
            fc2_b: get("ffn.fc2.bias")?,
            norm2_gain: get("norm2.gain")?,
            norm2_bias: get("norm2.bias")?,
        })
    }
}

/// Masked multi-head dot-product attention:
/// `A_l = softmax(Q_l K_lᵀ / √d_k + mask) V_l`, `A = [A_1 … A_L] W_o`.
pub fn masked_attention(
    g: &mut Graph,
    s: Var,
    layer: &LayerVars,
    mask: Var,
    cfg: &ModelConfig,
    mut drop: Option<&mut DropoutStream>,
) -> Result<Var> {
    let q = g.matmul(s, layer.w_q)?;
    let k = g.matmul(s, layer.w_k)?;
    let v = g.matmul(s, layer.w_v)?;
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * cfg.d_k, cfg.d_k)?;
        let kh = g.slice_cols(k, h * cfg.d_k, cfg.d_k)?;
        let vh = g.slice_cols(v, h * cfg.d_v, cfg.d_v)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.add(scores, mask)?;
        let weights = g.softmax_rows(scores)?;
        let weights = dropout(g, weights, cfg.dropout, drop.as_deref_mut())?;
        heads.push(g.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, layer.w_o)
}

/// Position-wise feed-forward block: FC1, then (conv → ReLU → max-pool) along
/// the feature axis or plain ReLU, then FC2 back to `D`.
pub fn conv_ffn(g: &mut Graph, a: Var, layer: &LayerVars, cfg: &ModelConfig) -> Result<Var> {
    let h = g.matmul(a, layer.fc1_w)?;
    let h = g.add_row(h, layer.fc1_b)?;
    let h = match layer.conv {
        Some((kernel, bias)) => {
            let c = g.conv1d_feature(h, kernel, bias, cfg.conv_stride, cfg.conv_padding)?;
            let c = g.relu(c)?;
            g.maxpool1d_feature(c, cfg.pool_size, cfg.pool_stride)?
        }
        None => g.relu(h)?,
    };
    let out = g.matmul(h, layer.fc2_w)?;
    g.add_row(out, layer.fc2_b)
}

/// One post-norm encoding layer:
/// `X = LN(attn(S) + S)`, `S' = LN(ffn(X) + X)`, padded rows zeroed.
pub fn encoding_layer(
    g: &mut Graph,
    s: Var,
    layer: &LayerVars,
    masks: &SeqMasks,
    cfg: &ModelConfig,
    mut drop: Option<&mut DropoutStream>,
) -> Result<Var> {
    let a = masked_attention(g, s, layer, masks.attn, cfg, drop.as_deref_mut())?;
    let a = dropout(g, a, cfg.dropout, drop.as_deref_mut())?;
    let x = g.add(a, s)?;
    let x = g.layer_norm(x, layer.norm1_gain, layer.norm1_bias, LN_EPS)?;
    let f = conv_ffn(g, x, layer, cfg)?;
    let f = dropout(g, f, cfg.dropout, drop)?;
    let y = g.add(f, x)?;
    let y = g.layer_norm(y, layer.norm2_gain, layer.norm2_bias, LN_EPS)?;
    g.mul_col(y, masks.rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn temporal_encoding_at_zero() {
        let t = temporal_encoding(&[0.0], 4).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn temporal_encoding_at_pi() {
        // D = 2: [cos(π / 10000^0), sin(π / 10000^(2/2))]
        let t = temporal_encoding(&[PI], 2).unwrap();
        assert!((t.data()[0] + 1.0).abs() < 1e-15);
        assert!(
            (t.data()[1] - 3.141_592_601_913_59e-4).abs() < 1e-15,
            "{}",
            t.data()[1]
        );
    }

    #[test]
    fn temporal_encoding_rejects_odd() {
        assert!(temporal_encoding(&[1.0], 3).is_err());
    }

    #[test]
    fn mask_layout() {
        let m = attention_mask(&[true, true, false]).unwrap();
        assert_eq!(m.row(0), &[0.0, MASK_NEG, MASK_NEG]);
        assert_eq!(m.row(1), &[0.0, 0.0, MASK_NEG]);
        assert_eq!(m.row(2), &[0.0, 0.0, MASK_NEG]);
    }

    #[test]
    fn dropout_stream_counts_draws() {
        let mut d = DropoutStream::new(3, &[1, 2]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(4, 4, 1.0));
        let y = dropout(&mut g, x, 0.5, Some(&mut d)).unwrap();
        assert_ne!(x, y);
        assert_eq!(d.draws(), 1);
        let z = dropout(&mut g, x, 0.5, None).unwrap();
        assert_eq!(x, z);
    }
}

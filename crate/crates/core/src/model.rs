//! Model assembly: named parameter layout, initialization, parameter counting
//! and the per-sequence forward pass producing hidden rows `H`.

use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::rng::{self, purpose};
use crate::autograd::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::config::ModelConfig;
use crate::data::Batch;
use crate::encoder::{
    embed_types, layer_param_specs, temporal_encoding, DropoutStream, LayerVars, SeqMasks,
};
use crate::error::{Error, Result};
use crate::intensity::intensity_param_specs;
use crate::predict::head_param_specs;
use crate::recurrence::{
    act_param_specs, post_param_specs, postprocess, run_act, run_pure, ActTrace, ActVars, PostVars,
};

pub const EMBEDDING: &str = "type_embedding";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform on `±√(6/(fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// Normal rows with the first (padding) row fixed at zero.
    Embedding {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }

    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(
            name,
            rows,
            cols,
            Init::Xavier {
                fan_in: rows,
                fan_out: cols,
            },
        )
    }

    /// Trainable entries; the padding row of the embedding table is excluded.
    pub fn trainable_count(&self) -> usize {
        match self.init {
            Init::Embedding { .. } => (self.rows - 1) * self.cols,
            _ => self.rows * self.cols,
        }
    }

    fn sample(&self, seed: u64) -> Tensor {
        let n = self.rows * self.cols;
        let mut r = rng::stream(seed, &[purpose::INIT, rng::name_key(&self.name)]);
        let data = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| u.sample(&mut r)).collect()
            }
            Init::Embedding { std } => {
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|i| {
                        if i < self.cols {
                            0.0
                        } else {
                            normal.sample(&mut r)
                        }
                    })
                    .collect()
            }
        };
        Tensor::from_rows(self.rows, self.cols, data).expect("spec shape")
    }
}

/// Every named tensor of a model with `num_types` event types.
pub fn param_specs(cfg: &ModelConfig, num_types: usize) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    if num_types == 0 {
        return Err(Error::Config("num_types must be positive".into()));
    }
    let d = cfg.d_model;
    let mut specs = vec![ParamSpec::new(
        EMBEDDING,
        num_types + 1,
        d,
        Init::Embedding {
            std: 1.0 / (d as f64).sqrt(),
        },
    )];
    for l in 0..cfg.num_layers() {
        specs.extend(layer_param_specs(cfg, l));
    }
    if cfg.act_enabled {
        specs.extend(act_param_specs(cfg));
    }
    specs.extend(post_param_specs(cfg));
    specs.extend(intensity_param_specs(cfg, num_types));
    specs.extend(head_param_specs(cfg, num_types));
    Ok(specs)
}

/// Trainable parameter count from shapes alone.
pub fn count_from_specs(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::trainable_count).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub num_types: usize,
    pub params: ParamStore,
}

/// Per-sequence forward result.
#[derive(Clone, Debug)]
pub struct RowOutput {
    /// `I_max × D`; rows at and beyond `len` are zero.
    pub hidden: Var,
    pub len: usize,
    pub trace: ActTrace,
}

impl Model {
    /// Builds and initializes every tensor from `seed`.
    pub fn build(config: ModelConfig, num_types: usize, seed: u64) -> Result<Self> {
        let specs = param_specs(&config, num_types)?;
        let mut params = ParamStore::new();
        for spec in &specs {
            params.insert(spec.name.clone(), spec.sample(seed));
        }
        if !config.alpha_trainable {
            params.freeze(crate::intensity::ALPHA);
        }
        Ok(Self {
            config,
            num_types,
            params,
        })
    }

    /// Restores a model from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, num_types: usize, tensors: ParamStore) -> Result<Self> {
        let specs = param_specs(&config, num_types)?;
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = ParamStore::new();
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != [spec.rows, spec.cols] {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected [{}, {}]",
                    spec.name,
                    t.shape(),
                    spec.rows,
                    spec.cols
                )));
            }
            params.insert(spec.name.clone(), t.clone());
        }
        if !config.alpha_trainable {
            params.freeze(crate::intensity::ALPHA);
        }
        Ok(Self {
            config,
            num_types,
            params,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.config, self.num_types).expect("validated at build")
    }

    /// Trainable parameters: every named tensor, minus the padding embedding row.
    pub fn count_params(&self) -> usize {
        let d = self.config.d_model;
        self.params.iter().map(|(_, t)| t.len()).sum::<usize>() - d
    }

    /// `(name, count)` per tensor, padding row excluded from the embedding.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        self.specs()
            .iter()
            .map(|s| (s.name.clone(), s.trainable_count()))
            .collect()
    }

    /// Hidden representation for row `row` of `batch`.
    pub fn forward_row(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        batch: &Batch,
        row: usize,
        drop: Option<&mut DropoutStream>,
    ) -> Result<RowOutput> {
        let len = batch.lengths[row];
        self.forward_seq(
            g,
            params,
            batch.row_times(row),
            batch.row_types(row),
            batch.row_mask(row),
            len,
            drop,
        )
    }

    /// Hidden representation for one (possibly padded) sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_seq(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        times: &[f64],
        type_ids: &[usize],
        pad_mask: &[bool],
        len: usize,
        mut drop: Option<&mut DropoutStream>,
    ) -> Result<RowOutput> {
        let cfg = &self.config;
        if times.len() != type_ids.len()
            || times.len() != pad_mask.len()
            || len == 0
            || len > times.len()
        {
            return Err(Error::shape("forward", "inconsistent sequence inputs"));
        }
        if type_ids.iter().any(|&c| c > self.num_types) {
            return Err(Error::shape("forward", "type id out of range"));
        }
        let masks = SeqMasks::new(g, pad_mask)?;
        let table = params.get(EMBEDDING)?;
        let embedded = embed_types(g, table, type_ids)?;
        let temporal = g.constant(temporal_encoding(times, cfg.d_model)?);

        let layers = (0..cfg.num_layers())
            .map(|l| LayerVars::bind(params, cfg, l))
            .collect::<Result<Vec<_>>>()?;

        let (mut hidden, trace) = if cfg.act_enabled {
            let act = ActVars::bind(params)?;
            run_act(
                g,
                embedded,
                temporal,
                &layers[0],
                &act,
                cfg.act_threshold,
                cfg.max_n,
                pad_mask,
                &masks,
                cfg,
                drop.as_deref_mut(),
            )?
        } else {
            let h = run_pure(g, embedded, temporal, &layers, cfg.max_n, &masks, cfg, drop)?;
            (h, ActTrace::pure(len, cfg.max_n))
        };
        if cfg.d_rnn > 0 {
            let post = PostVars::bind(params)?;
            hidden = postprocess(g, hidden, &post, len, cfg.d_rnn)?;
        }
        Ok(RowOutput { hidden, len, trace })
    }
}

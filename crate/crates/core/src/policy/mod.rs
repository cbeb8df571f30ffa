//! Transformer encoder with an autoregressive pointer decoder.
//!
//! The encoder embeds each node's 5-feature input (`x, y, is_current,
//! is_terminal, is_visited`) and runs `layers` blocks of multi-head
//! self-attention and a feed-forward network, each sub-layer followed by a
//! residual addition and layer normalisation. It runs once per instance with
//! all flags zero; the final residual stream is what [`crate::capture`] stores.
//!
//! The decoder builds a context from the graph embedding (mean of node
//! embeddings) and the current node's embedding (a learned start vector
//! before the first pick), refines it with one masked multi-head glimpse over
//! the nodes, and scores nodes by a tanh-clipped scaled dot product.

mod model;
mod state;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Container, SeedTree, Tensor};

pub use model::{DecodeMode, Embeddings, Rollout};
pub use state::{node_inputs, DecoderState, NodeInput};

/// Number of per-node input features.
pub const NODE_FEATURES: usize = 5;

pub const CHECKPOINT_KIND: &str = "tsp-policy";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Pointer logits are `clip · tanh(·)`.
    pub tanh_clip: f64,
    pub norm_eps: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { d_model: 128, layers: 3, heads: 8, ff_hidden: 512, tanh_clip: 10.0, norm_eps: 1e-5 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("policy sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.tanh_clip > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("tanh_clip and norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIndex {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
}

/// Positions of each named parameter in [`Policy::params`].
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub input_w: usize,
    pub input_b: usize,
    pub blocks: Vec<BlockIndex>,
    pub ctx_graph: usize,
    pub ctx_current: usize,
    pub start: usize,
    pub glimpse_k: usize,
    pub glimpse_v: usize,
    pub glimpse_out: usize,
    pub logit_k: usize,
}

/// Names, shapes and init bounds of every parameter, in storage order.
fn parameter_specs(cfg: &PolicyConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let d = cfg.d_model;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let input_w = add("input.w".into(), vec![NODE_FEATURES, d], Init::FanIn(NODE_FEATURES));
    let input_b = add("input.b".into(), vec![1, d], Init::FanIn(NODE_FEATURES));
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("block{l}.{s}");
        blocks.push(BlockIndex {
            wq: add(p("attn.wq"), vec![d, d], Init::FanIn(d)),
            wk: add(p("attn.wk"), vec![d, d], Init::FanIn(d)),
            wv: add(p("attn.wv"), vec![d, d], Init::FanIn(d)),
            wo: add(p("attn.wo"), vec![d, d], Init::FanIn(d)),
            norm1_gain: add(p("norm1.gain"), vec![1, d], Init::Ones),
            norm1_bias: add(p("norm1.bias"), vec![1, d], Init::Zeros),
            ff_w1: add(p("ff.w1"), vec![d, cfg.ff_hidden], Init::FanIn(d)),
            ff_b1: add(p("ff.b1"), vec![1, cfg.ff_hidden], Init::FanIn(d)),
            ff_w2: add(p("ff.w2"), vec![cfg.ff_hidden, d], Init::FanIn(cfg.ff_hidden)),
            ff_b2: add(p("ff.b2"), vec![1, d], Init::FanIn(cfg.ff_hidden)),
            norm2_gain: add(p("norm2.gain"), vec![1, d], Init::Ones),
            norm2_bias: add(p("norm2.bias"), vec![1, d], Init::Zeros),
        });
    }
    let layout = Layout {
        input_w,
        input_b,
        blocks,
        ctx_graph: add("decoder.ctx_graph".into(), vec![d, d], Init::FanIn(d)),
        ctx_current: add("decoder.ctx_current".into(), vec![d, d], Init::FanIn(d)),
        start: add("decoder.start".into(), vec![1, d], Init::FanIn(1)),
        glimpse_k: add("decoder.glimpse_k".into(), vec![d, d], Init::FanIn(d)),
        glimpse_v: add("decoder.glimpse_v".into(), vec![d, d], Init::FanIn(d)),
        glimpse_out: add("decoder.glimpse_out".into(), vec![d, d], Init::FanIn(d)),
        logit_k: add("decoder.logit_k".into(), vec![d, d], Init::FanIn(d)),
    };
    (specs, layout)
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Ones,
    Zeros,
}

/// Policy parameters plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl Policy {
    /// Freshly initialised parameters.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = parameter_specs(&config);
        let root = SeedTree::new(seed).named("policy-init");
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (i, (name, shape, init)) in specs.into_iter().enumerate() {
            let t = match init {
                Init::FanIn(f) => Tensor::uniform(&shape, 1.0 / (f as f64).sqrt(), &mut root.child(i as u64).rng()),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            params.push(t);
        }
        Ok(Policy { config, names, params, layout })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::json!({ "config": self.config }));
        for (n, t) in self.names.iter().zip(&self.params) {
            c.push(n.clone(), t.clone());
        }
        c
    }

    /// Takes the policy tensors out of `container`, leaving any extra entries.
    pub fn from_container(container: &mut Container) -> Result<Self> {
        if container.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`",
                container.kind
            )));
        }
        let config: PolicyConfig = serde_json::from_value(container.meta["config"].clone())
            .map_err(|e| Error::Format(format!("policy config in checkpoint: {e}")))?;
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let (specs, layout) = parameter_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            params.push(container.take(&name, &shape)?);
            names.push(name);
        }
        if params.iter().any(|t| !t.is_finite()) {
            return Err(Error::Format("checkpoint contains non-finite parameters".into()));
        }
        Ok(Policy { config, names, params, layout })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        Policy::from_container(&mut c)
    }
}

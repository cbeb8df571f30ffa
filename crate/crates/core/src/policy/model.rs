use rand::Rng as _;

use super::state::{node_inputs, DecoderState};
use super::Policy;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::tsp::{Tour, TspInstance};

/// Encoder outputs for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// Final residual stream, `n × d_model`.
    pub nodes: Tensor,
    /// Mean of the node embeddings, `1 × d_model`.
    pub graph: Tensor,
}

/// How the decoder picks the next node.
pub enum DecodeMode<'r> {
    /// Highest logit, ties to the lowest index. Log-probabilities use `T = 1`.
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Sample { temperature: f64, rng: &'r mut Rng },
    /// Follow a fixed order and score it under `softmax(logits / temperature)`.
    Replay { order: &'r [usize], temperature: f64 },
}

/// A completed construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tour: Tour,
    /// Log-probability of each selection under the decoding distribution.
    pub log_probs: Vec<f64>,
}

impl Rollout {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Tape handles for everything the decoder reuses across steps.
pub(crate) struct Encoded {
    pub nodes: Var,
    graph_ctx: Var,
    glimpse_k: Vec<Var>,
    glimpse_v: Vec<Var>,
    logit_k: Var,
}

/// Tape-side trajectory: the order chosen and the summed log-probability node.
pub(crate) struct Trajectory {
    pub order: Vec<usize>,
    pub log_prob: Var,
    pub step_log_probs: Vec<f64>,
}

impl Policy {
    /// Registers all parameters on `tape`, trainable or frozen.
    pub(crate) fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<Var> {
        self.params()
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant_ref(t) })
            .collect()
    }

    fn check_instance(&self, instance: &TspInstance) -> Result<()> {
        instance.validate()
    }

    /// Encoder forward pass; returns the node-embedding variable.
    pub(crate) fn encoder_on_tape(&self, tape: &mut Tape<'_>, p: &[Var], instance: &TspInstance) -> Result<Var> {
        let cfg = self.config();
        let lay = self.layout();
        let x = tape.constant(node_inputs(instance));
        let h = tape.matmul(x, p[lay.input_w])?;
        let mut h = tape.add_row(h, p[lay.input_b])?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &lay.blocks {
            let q = tape.matmul(h, p[b.wq])?;
            let k = tape.matmul(h, p[b.wk])?;
            let v = tape.matmul(h, p[b.wv])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores, None)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let mha = tape.matmul(cat, p[b.wo])?;
            let res = tape.add(h, mha)?;
            h = tape.layer_norm(res, p[b.norm1_gain], p[b.norm1_bias], cfg.norm_eps)?;

            let f = tape.matmul(h, p[b.ff_w1])?;
            let f = tape.add_row(f, p[b.ff_b1])?;
            let f = tape.relu(f);
            let f = tape.matmul(f, p[b.ff_w2])?;
            let f = tape.add_row(f, p[b.ff_b2])?;
            let res = tape.add(h, f)?;
            h = tape.layer_norm(res, p[b.norm2_gain], p[b.norm2_bias], cfg.norm_eps)?;
        }
        Ok(h)
    }

    /// Projections of the node embeddings that every decoding step reuses.
    pub(crate) fn decoder_cache(&self, tape: &mut Tape<'_>, p: &[Var], nodes: Var) -> Result<Encoded> {
        let cfg = self.config();
        let lay = self.layout();
        let dh = cfg.head_dim();
        let graph = tape.mean_rows(nodes)?;
        let graph_ctx = tape.matmul(graph, p[lay.ctx_graph])?;
        let gk = tape.matmul(nodes, p[lay.glimpse_k])?;
        let gv = tape.matmul(nodes, p[lay.glimpse_v])?;
        let mut glimpse_k = Vec::with_capacity(cfg.heads);
        let mut glimpse_v = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            glimpse_k.push(tape.slice_cols(gk, head * dh, dh)?);
            glimpse_v.push(tape.slice_cols(gv, head * dh, dh)?);
        }
        let logit_k = tape.matmul(nodes, p[lay.logit_k])?;
        Ok(Encoded { nodes, graph_ctx, glimpse_k, glimpse_v, logit_k })
    }

    /// Clipped pointer logits (`1 × n`) for one decoding step. Masking is left
    /// to the caller.
    pub(crate) fn step_logits_on_tape(
        &self,
        tape: &mut Tape<'_>,
        p: &[Var],
        enc: &Encoded,
        current: Option<usize>,
        selectable: &[bool],
    ) -> Result<Var> {
        let cfg = self.config();
        let lay = self.layout();
        let dh = cfg.head_dim();
        let cur = match current {
            Some(i) => tape.select_row(enc.nodes, i)?,
            None => p[lay.start],
        };
        let cur = tape.matmul(cur, p[lay.ctx_current])?;
        let query = tape.add(enc.graph_ctx, cur)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(query, head * dh, dh)?;
            let scores = tape.matmul_bt(qh, enc.glimpse_k[head])?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, Some(selectable))?;
            heads.push(tape.matmul(attn, enc.glimpse_v[head])?);
        }
        let glimpse = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let glimpse = tape.matmul(glimpse, p[lay.glimpse_out])?;
        let compat = tape.matmul_bt(glimpse, enc.logit_k)?;
        let compat = tape.scale(compat, 1.0 / (cfg.d_model as f64).sqrt());
        let compat = tape.tanh(compat);
        Ok(tape.scale(compat, cfg.tanh_clip))
    }

    /// Runs a full construction on `tape`.
    pub(crate) fn trajectory_on_tape(
        &self,
        tape: &mut Tape<'_>,
        p: &[Var],
        instance: &TspInstance,
        mode: DecodeMode<'_>,
    ) -> Result<Trajectory> {
        self.check_instance(instance)?;
        let n = instance.n;
        let nodes = self.encoder_on_tape(tape, p, instance)?;
        let enc = self.decoder_cache(tape, p, nodes)?;
        let mut state = DecoderState::new(n);
        let mut mode = mode;
        if let DecodeMode::Replay { order, .. } = &mode {
            if order.len() != n {
                return Err(Error::Contract(format!("replay order has {} nodes, instance {n}", order.len())));
            }
        }
        let mut terms = Vec::with_capacity(n);
        let mut step_log_probs = Vec::with_capacity(n);
        for step in 0..n {
            let selectable = state.selectable();
            let logits = self.step_logits_on_tape(tape, p, &enc, state.current(), &selectable)?;
            let (choice, temperature) = {
                let values = tape.value(logits).data();
                match &mut mode {
                    DecodeMode::Greedy => (argmax_masked(values, &selectable), 1.0),
                    DecodeMode::Sample { temperature, rng } => {
                        (sample_masked(values, &selectable, *temperature, rng)?, *temperature)
                    }
                    DecodeMode::Replay { order, temperature } => (order[step], *temperature),
                }
            };
            let scaled = if temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / temperature) };
            let lp = tape.log_softmax_pick(scaled, Some(&selectable), choice)?;
            step_log_probs.push(tape.scalar(lp));
            terms.push(lp);
            state.visit(choice)?;
        }
        let mut log_prob = terms[0];
        for &t in &terms[1..] {
            log_prob = tape.add(log_prob, t)?;
        }
        Ok(Trajectory { order: state.order().to_vec(), log_prob, step_log_probs })
    }

    /// Encoder pass with all dynamic flags zero.
    pub fn encode(&self, instance: &TspInstance) -> Result<Embeddings> {
        self.check_instance(instance)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let nodes = self.encoder_on_tape(&mut tape, &p, instance)?;
        let graph = tape.mean_rows(nodes)?;
        Ok(Embeddings { nodes: tape.value(nodes).clone(), graph: tape.value(graph).clone() })
    }

    /// Pointer logits for the next selection; visited nodes are `-∞`.
    pub fn decode_step(&self, embeddings: &Embeddings, state: &DecoderState) -> Result<Vec<f64>> {
        let (n, d) = embeddings.nodes.dims2()?;
        if d != self.config().d_model || n != state.n() {
            return Err(Error::Dimension(format!(
                "embeddings {n}x{d} do not match state of {} nodes / d_model {}",
                state.n(),
                self.config().d_model
            )));
        }
        if state.is_complete() {
            return Err(Error::Contract("decode_step with every node visited".into()));
        }
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let nodes = tape.constant_ref(&embeddings.nodes);
        let enc = self.decoder_cache(&mut tape, &p, nodes)?;
        let selectable = state.selectable();
        let logits = self.step_logits_on_tape(&mut tape, &p, &enc, state.current(), &selectable)?;
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .zip(&selectable)
            .map(|(&l, &ok)| if ok { l } else { f64::NEG_INFINITY })
            .collect())
    }

    /// Complete tour construction.
    pub fn rollout(&self, instance: &TspInstance, mode: DecodeMode<'_>) -> Result<Rollout> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let traj = self.trajectory_on_tape(&mut tape, &p, instance, mode)?;
        let sum = tape.scalar(traj.log_prob);
        if !sum.is_finite() {
            return Err(Error::Numerical(format!("non-finite tour log-probability {sum}")));
        }
        Ok(Rollout { tour: Tour::new(instance, traj.order)?, log_probs: traj.step_log_probs })
    }

    pub fn greedy(&self, instance: &TspInstance) -> Result<Tour> {
        Ok(self.rollout(instance, DecodeMode::Greedy)?.tour)
    }
}

fn argmax_masked(values: &[f64], selectable: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&v, &ok)) in values.iter().zip(selectable).enumerate() {
        if ok && (best == usize::MAX || v > best_v) {
            best = i;
            best_v = v;
        }
    }
    best
}

fn sample_masked(values: &[f64], selectable: &[bool], temperature: f64, rng: &mut Rng) -> Result<usize> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let max = values
        .iter()
        .zip(selectable)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values
        .iter()
        .zip(selectable)
        .map(|(&v, &ok)| if ok { ((v - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = usize::MAX;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return Ok(i);
            }
            u -= w;
        }
    }
    Ok(last)
}

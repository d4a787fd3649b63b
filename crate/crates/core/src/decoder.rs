//! Autoregressive route construction.
//!
//! At every step a context vector `[graph summary ∥ last node ∥ remaining
//! capacity]` queries the node embeddings through masked multi-head
//! attention, and a single clipped attention head turns the result into a
//! distribution over feasible next nodes. A whole batch decodes in lock
//! step; instances that finish early are held at the depot with
//! probability one.

use rand::{Rng, RngCore};

use crate::encoder::EncoderOutput;
use crate::instances::{Solution, VrpInstance};
use crate::model::{Bound, ModelError, ModelParams, ProblemBatch};
use crate::numkernel::{Float, KernelError, Tape, Var};

/// Per-instance construction state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// Index of the step about to be taken, starting at 1.
    pub t: usize,
    pub visited: Vec<bool>,
    pub remaining_demand: Vec<f64>,
    pub remaining_capacity: f64,
    pub capacity: f64,
    pub last_node: usize,
    pub partial: Vec<usize>,
}

impl DecoderState {
    pub fn new(inst: &VrpInstance) -> Self {
        DecoderState {
            t: 1,
            visited: vec![false; inst.n_nodes()],
            remaining_demand: inst.demands().to_vec(),
            remaining_capacity: inst.capacity(),
            capacity: inst.capacity(),
            last_node: 0,
            partial: vec![0],
        }
    }

    /// `true` for every node that may be chosen next: unvisited customers
    /// whose demand fits, and the depot unless this is the first step or
    /// the vehicle is already there.
    pub fn feasible(&self) -> Vec<bool> {
        let mut ok: Vec<bool> = (0..self.visited.len())
            .map(|i| i > 0 && !self.visited[i] && self.remaining_demand[i] <= self.remaining_capacity)
            .collect();
        ok[0] = self.t > 1 && self.last_node != 0;
        ok
    }

    pub fn all_served(&self) -> bool {
        self.visited[1..].iter().all(|&v| v)
    }

    pub fn is_done(&self) -> bool {
        self.all_served() && self.last_node == 0
    }

    /// Mask used while decoding a batch: finished states may only stay at
    /// the depot.
    pub fn decoding_mask(&self) -> Vec<bool> {
        if self.is_done() {
            let mut m = vec![false; self.visited.len()];
            m[0] = true;
            m
        } else {
            self.feasible()
        }
    }

    pub fn capacity_fraction(&self) -> f64 {
        self.remaining_capacity / self.capacity
    }

    pub fn step(&mut self, node: usize) -> Result<(), KernelError> {
        if node >= self.visited.len() || !self.feasible()[node] {
            return Err(KernelError::Contract(format!("node {node} is not feasible at step {}", self.t)));
        }
        if node == 0 {
            self.remaining_capacity = self.capacity;
        } else {
            self.remaining_capacity -= self.remaining_demand[node];
            self.remaining_demand[node] = 0.0;
            self.visited[node] = true;
        }
        self.last_node = node;
        self.partial.push(node);
        self.t += 1;
        Ok(())
    }
}

/// Step-invariant projections of the encoder output.
#[derive(Clone, Copy, Debug)]
pub struct DecoderCache {
    pub nodes_flat: Var,
    pub graph_context: Var,
    pub w_last: Var,
    pub w_capacity: Var,
    pub glimpse_keys: Var,
    pub glimpse_values: Var,
    pub logit_keys: Var,
    pub batch: usize,
    pub nodes: usize,
}

pub fn precompute<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    enc: &EncoderOutput<T>,
) -> Result<DecoderCache, ModelError> {
    let d = params.config.d_model;
    let heads = params.config.heads;
    let s = tape.shape(enc.nodes).to_vec();
    let (batch, nodes) = (s[0], s[1]);
    let w_ctx = bound.var("dec.w_ctx");
    let w_graph = tape.gather_rows(w_ctx, &(0..d).collect::<Vec<_>>())?;
    let w_last = tape.gather_rows(w_ctx, &(d..2 * d).collect::<Vec<_>>())?;
    let w_capacity = tape.gather_rows(w_ctx, &[2 * d])?;
    let graph_context = tape.matmul(enc.readout, w_graph)?;
    let k = tape.matmul(enc.nodes, bound.var("dec.wk"))?;
    let v = tape.matmul(enc.nodes, bound.var("dec.wv"))?;
    let glimpse_keys = tape.split_heads(k, heads)?;
    let glimpse_values = tape.split_heads(v, heads)?;
    let logit_keys = tape.matmul(enc.nodes, bound.var("dec.wk_single"))?;
    let nodes_flat = tape.reshape(enc.nodes, &[batch * nodes, d])?;
    Ok(DecoderCache {
        nodes_flat,
        graph_context,
        w_last,
        w_capacity,
        glimpse_keys,
        glimpse_values,
        logit_keys,
        batch,
        nodes,
    })
}

/// Context query `[B, d]` from the graph summary, the embedding of each
/// state's last node (the depot at the first step) and `Q_t / Q`.
pub fn build_context<T: Float>(
    tape: &mut Tape<T>,
    cache: &DecoderCache,
    states: &[DecoderState],
) -> Result<Var, ModelError> {
    let rows: Vec<usize> = states.iter().enumerate().map(|(b, s)| b * cache.nodes + s.last_node).collect();
    let last = tape.gather_rows(cache.nodes_flat, &rows)?;
    let last = tape.matmul(last, cache.w_last)?;
    let cap: Vec<f64> = states.iter().map(DecoderState::capacity_fraction).collect();
    let cap = tape.constant(crate::numkernel::Tensor::from_f64(&[states.len(), 1], &cap)?);
    let cap = tape.mul(cap, cache.w_capacity)?;
    let c = tape.add(cache.graph_context, last)?;
    Ok(tape.add(c, cap)?)
}

/// Masked multi-head attention of the context over all nodes, merged
/// back to `[B, d]`.
pub fn mha_context<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    cache: &DecoderCache,
    context: Var,
    mask: &[bool],
) -> Result<Var, ModelError> {
    let d = params.config.d_model;
    let heads = params.config.heads;
    let dh = d / heads;
    let (b, n) = (cache.batch, cache.nodes);
    let q = tape.matmul(context, bound.var("dec.wq"))?;
    // with a single query row, splitting heads is a plain reshape
    let q = tape.reshape(q, &[b * heads, 1, dh])?;
    let u = tape.bmm(q, cache.glimpse_keys, true)?;
    let u = tape.scale(u, T::one() / T::of(dh as f64).sqrt());
    let mut head_mask = Vec::with_capacity(b * heads * n);
    for row in mask.chunks(n) {
        for _ in 0..heads {
            head_mask.extend_from_slice(row);
        }
    }
    let a = tape.softmax_masked(u, Some(head_mask))?;
    let g = tape.bmm(a, cache.glimpse_values, false)?;
    let g = tape.reshape(g, &[b, d])?;
    Ok(tape.matmul(g, bound.var("dec.wm"))?)
}

/// Log-probabilities `[B, n+1]` from clipped single-head scores
/// `clip * tanh(q · k / sqrt(d))`; masked entries are `-inf`.
pub fn score_nodes<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    cache: &DecoderCache,
    glimpse: Var,
    mask: &[bool],
) -> Result<Var, ModelError> {
    let logits = clipped_logits(tape, params, bound, cache, glimpse)?;
    Ok(tape.log_softmax_masked(logits, Some(mask.to_vec()))?)
}

/// Unmasked clipped scores `[B, n+1]`, each within `[-clip, clip]`.
pub fn clipped_logits<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    cache: &DecoderCache,
    glimpse: Var,
) -> Result<Var, ModelError> {
    let d = params.config.d_model;
    let (b, n) = (cache.batch, cache.nodes);
    let q = tape.matmul(glimpse, bound.var("dec.wq_single"))?;
    let q = tape.reshape(q, &[b, 1, d])?;
    let u = tape.bmm(q, cache.logit_keys, true)?;
    let u = tape.reshape(u, &[b, n])?;
    let u = tape.scale(u, T::one() / T::of(d as f64).sqrt());
    let u = tape.tanh(u);
    Ok(tape.scale(u, T::of(params.config.clip)))
}

/// One decoding step: log-probabilities `[B, n+1]` and the mask used.
pub fn step_log_probs<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    cache: &DecoderCache,
    states: &[DecoderState],
) -> Result<(Var, Vec<bool>), ModelError> {
    let mask: Vec<bool> = states.iter().flat_map(DecoderState::decoding_mask).collect();
    let context = build_context(tape, cache, states)?;
    let glimpse = mha_context(tape, params, bound, cache, context, &mask)?;
    let logp = score_nodes(tape, params, bound, cache, glimpse, &mask)?;
    Ok((logp, mask))
}

/// How the next node is chosen.
pub enum DecodeMode<'a> {
    /// Highest probability, lowest index on ties.
    Greedy,
    /// Inverse-CDF draw from the distribution.
    Sample(&'a mut dyn RngCore),
    /// Replays given sequences (each starting at the depot).
    Forced(&'a [Vec<usize>]),
}

/// Distribution seen by one instance at one step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub feasible: Vec<bool>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug)]
pub struct RolloutOutput {
    pub solutions: Vec<Solution>,
    /// `[B]` summed log-probabilities of the chosen actions.
    pub log_prob: Var,
    /// Per instance, the records of its live steps (when requested).
    pub records: Vec<Vec<StepRecord>>,
}

fn argmax_feasible<T: Float>(row: &[T], mask: &[bool]) -> usize {
    let mut best = None;
    for (j, (&v, &ok)) in row.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best.expect("a feasible node exists").0
}

fn sample_feasible<T: Float>(row: &[T], mask: &[bool], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = None;
    for (j, (&lp, &ok)) in row.iter().zip(mask).enumerate() {
        if !ok {
            continue;
        }
        let p = lp.as_f64().exp();
        if p > 0.0 {
            last = Some(j);
        }
        cum += p;
        if u < cum {
            return j;
        }
    }
    last.unwrap_or_else(|| argmax_feasible(row, mask))
}

/// Decodes every instance of `batch` to completion.
pub fn rollout<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    enc: &EncoderOutput<T>,
    batch: &ProblemBatch<T>,
    mut mode: DecodeMode<'_>,
    record: bool,
) -> Result<RolloutOutput, ModelError> {
    let cache = precompute(tape, params, bound, enc)?;
    let b = batch.len();
    let nodes = batch.nodes();
    if let DecodeMode::Forced(seqs) = &mode {
        if seqs.len() != b || seqs.iter().any(|s| s.first() != Some(&0)) {
            return Err(ModelError::Batch("forced sequences must match the batch and start at the depot".into()));
        }
    }
    let mut states: Vec<DecoderState> = batch.instances.iter().map(|i| DecoderState::new(i)).collect();
    let mut records: Vec<Vec<StepRecord>> = vec![Vec::new(); b];
    let mut picked = Vec::new();
    let max_steps = 2 * batch.n + 1;
    while !states.iter().all(DecoderState::is_done) {
        if picked.len() >= max_steps {
            return Err(KernelError::Contract(format!("decoding exceeded {max_steps} steps")).into());
        }
        let (logp, mask) = step_log_probs(tape, params, bound, &cache, &states)?;
        let values = tape.value(logp).data();
        let mut actions = Vec::with_capacity(b);
        for (i, state) in states.iter().enumerate() {
            let row = &values[i * nodes..(i + 1) * nodes];
            let m = &mask[i * nodes..(i + 1) * nodes];
            let a = if state.is_done() {
                0
            } else {
                match &mut mode {
                    DecodeMode::Greedy => argmax_feasible(row, m),
                    DecodeMode::Sample(rng) => sample_feasible(row, m, &mut **rng),
                    DecodeMode::Forced(seqs) => seqs[i].get(state.t).copied().unwrap_or(0),
                }
            };
            actions.push(a);
        }
        for (i, state) in states.iter_mut().enumerate() {
            if state.is_done() {
                continue;
            }
            if record {
                let row = &values[i * nodes..(i + 1) * nodes];
                records[i].push(StepRecord {
                    feasible: mask[i * nodes..(i + 1) * nodes].to_vec(),
                    probs: row.iter().map(|v| v.as_f64().exp()).collect(),
                    chosen: actions[i],
                });
            }
            state.step(actions[i])?;
        }
        let chosen = tape.gather_last(logp, &actions)?;
        let chosen = tape.reshape(chosen, &[1, b])?;
        picked.push(chosen);
    }
    let log_prob = if picked.is_empty() {
        tape.constant(crate::numkernel::Tensor::zeros(&[b]))
    } else {
        let all = tape.concat(&picked, 0)?;
        tape.sum_axis(all, 0)?
    };
    let solutions = states
        .into_iter()
        .zip(&batch.instances)
        .map(|(s, inst)| Solution::from_sequence(inst, s.partial))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ModelError::Batch(e.to_string()))?;
    Ok(RolloutOutput { solutions, log_prob, records })
}

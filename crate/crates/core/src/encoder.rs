//! Graph encoder with attention sampling.
//!
//! Each layer scores all customer pairs with a scaled dot product whose
//! keys carry the edge embedding, keeps the `K` best-scored neighbours of
//! every customer, renormalizes over them and aggregates edge-fused values
//! into a residual update followed by batch norm. The depot row attends
//! densely over all customers. Edge embeddings are affine in the pair
//! distance and static across layers, so they are carried as a per-feature
//! `(slope, offset)` pair instead of an `(n+1)² × d` tensor.

use crate::model::{BatchMoments, Bound, ModelError, ModelParams, NormMode, ProblemBatch};
use crate::numkernel::{Float, NormStats, Tape, Tensor, Var, BN_EPS};

/// `e_ij = d_ij * slope + offset`, both `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeEmbedding {
    pub slope: Var,
    pub offset: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncodeOptions {
    /// Neighbours kept per customer row.
    pub neighbors: usize,
    pub mode: NormMode,
    /// Keep every layer's filtered attention for inspection.
    pub keep_attention: bool,
}

#[derive(Debug)]
pub struct EncoderOutput<T> {
    /// `[B, n+1, d]` after the last layer.
    pub nodes: Var,
    /// `[B, n+1, d]` initial embeddings.
    pub initial: Var,
    /// `[B, d]` graph summary.
    pub readout: Var,
    pub edges: EdgeEmbedding,
    /// Per layer, `[B, n+1, n+1]` renormalized attention over the kept
    /// neighbours (row and column 0 belong to the depot).
    pub attention: Vec<Tensor<T>>,
    /// Batch statistics from training-mode norms, for running averages.
    pub moments: Vec<BatchMoments<T>>,
}

/// Batch norm of `x` under the layer's parameters in the given mode.
pub fn norm<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    layer: &str,
    x: Var,
    mode: NormMode,
    moments: &mut Vec<BatchMoments<T>>,
) -> Result<Var, ModelError> {
    let gamma = bound.var(&format!("{layer}.gamma"));
    let beta = bound.var(&format!("{layer}.beta"));
    let stats = match mode {
        NormMode::Train => NormStats::Batch,
        NormMode::Eval => {
            let r = &params.running[layer];
            NormStats::Running { mean: &r.mean, var: &r.var }
        }
    };
    let rows = tape.value(x).numel() / *tape.shape(x).last().unwrap();
    let out = tape.batchnorm(x, gamma, beta, stats)?;
    if let Some((mean, var)) = out.batch_moments {
        moments.push(BatchMoments { layer: layer.to_string(), mean, var, count: rows });
    }
    Ok(out.out)
}

/// Initial node embeddings `[B, n+1, d]` and the edge embedding.
pub fn embed_initial<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    batch: &ProblemBatch<T>,
    mode: NormMode,
    moments: &mut Vec<BatchMoments<T>>,
) -> Result<(Var, EdgeEmbedding), ModelError> {
    let d = params.config.d_model;
    let b = batch.len();
    let depot = tape.constant(batch.depot.clone());
    let xd = tape.matmul(depot, bound.var("enc.depot.w"))?;
    let xd = tape.add(xd, bound.var("enc.depot.b"))?;
    let xd = tape.reshape(xd, &[b, 1, d])?;
    let cust = tape.constant(batch.customers.clone());
    let xc = tape.matmul(cust, bound.var("enc.node.w"))?;
    let xc = tape.add(xc, bound.var("enc.node.b"))?;
    let x = tape.concat(&[xd, xc], 1)?;
    let h0 = norm(tape, params, bound, "enc.node_bn", x, mode, moments)?;
    let edges = embed_edges(tape, params, bound, batch, mode, moments)?;
    Ok((h0, edges))
}

fn embed_edges<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    batch: &ProblemBatch<T>,
    mode: NormMode,
    moments: &mut Vec<BatchMoments<T>>,
) -> Result<EdgeEmbedding, ModelError> {
    let d = params.config.d_model;
    let w = tape.reshape(bound.var("enc.edge.w"), &[d])?;
    let bias = bound.var("enc.edge.b");
    let gamma = bound.var("enc.edge_bn.gamma");
    let beta = bound.var("enc.edge_bn.beta");
    let gw = tape.mul(gamma, w)?;
    match mode {
        NormMode::Train => {
            let dist = batch.dist.data();
            let count = dist.len();
            let mean = dist.iter().map(|x| x.as_f64()).sum::<f64>() / count as f64;
            let var = dist.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / count as f64;
            // the pre-norm feature w*d + b has mean w*mean + b and variance
            // w^2 * var; the bias cancels against its own mean
            let w2 = tape.mul(w, w)?;
            let den = tape.scale(w2, T::of(var));
            let den = tape.add_scalar(den, T::of(BN_EPS));
            let inv = tape.powf(den, T::of(-0.5));
            let slope = tape.mul(gw, inv)?;
            let shift = tape.scale(slope, T::of(mean));
            let offset = tape.sub(beta, shift)?;
            let wv = tape.value(w).data();
            let bv = tape.value(bias).data();
            moments.push(BatchMoments {
                layer: "enc.edge_bn".into(),
                mean: wv.iter().zip(bv).map(|(&w, &b)| w * T::of(mean) + b).collect(),
                var: wv.iter().map(|&w| w * w * T::of(var)).collect(),
                count,
            });
            Ok(EdgeEmbedding { slope, offset })
        }
        NormMode::Eval => {
            let r = &params.running["enc.edge_bn"];
            let inv: Vec<T> = r.var.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
            let inv = tape.constant(Tensor::new(vec![d], inv)?);
            let rm = tape.constant(Tensor::new(vec![d], r.mean.clone())?);
            let slope = tape.mul(gw, inv)?;
            let centered = tape.sub(bias, rm)?;
            let centered = tape.mul(centered, inv)?;
            let centered = tape.mul(gamma, centered)?;
            let offset = tape.add(beta, centered)?;
            Ok(EdgeEmbedding { slope, offset })
        }
    }
}

/// Scaled attention logits `[B, n+1, n+1]` of layer `l`:
/// `q_i · (k_j + W_k e_ij) / sqrt(d)`, dropping the row-constant
/// `q_i · (W_k offset)` term that cancels in any row softmax.
pub fn attention_logits<T: Float>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layer: usize,
    h: Var,
    edges: EdgeEmbedding,
    dist: Var,
) -> Result<Var, ModelError> {
    let d = *tape.shape(h).last().unwrap();
    let wk = bound.var(&format!("enc.layer{layer}.wk"));
    let q = tape.matmul(h, bound.var(&format!("enc.layer{layer}.wq")))?;
    let k = tape.matmul(h, wk)?;
    let slope = tape.reshape(edges.slope, &[1, d])?;
    let ka = tape.matmul(slope, wk)?;
    let ka = tape.reshape(ka, &[d, 1])?;
    let qa = tape.matmul(q, ka)?;
    let s = tape.bmm(q, k, true)?;
    let edge_term = tape.mul(dist, qa)?;
    let s = tape.add(s, edge_term)?;
    Ok(tape.scale(s, T::one() / T::of(d as f64).sqrt()))
}

/// Keep-mask hiding the depot column from every row.
fn customer_columns(batch: usize, nodes: usize) -> Vec<bool> {
    let mut mask = vec![true; batch * nodes * nodes];
    for r in 0..batch * nodes {
        mask[r * nodes] = false;
    }
    mask
}

/// Row-normalized attention over customers, `[B, n+1, n+1]` with a zero
/// depot column.
pub fn attention_matrix<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let nodes = s[2];
    let mask = customer_columns(s[0], nodes);
    let mut out = vec![T::zero(); logits.numel()];
    for (r, (row, orow)) in logits.data().chunks(nodes).zip(out.chunks_mut(nodes)).enumerate() {
        let keep = |j: usize| mask[r * nodes + j];
        let max = (0..nodes).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for j in (0..nodes).filter(|&j| keep(j)) {
            orow[j] = (row[j] - max).exp();
            sum += orow[j];
        }
        for j in (0..nodes).filter(|&j| keep(j)) {
            orow[j] /= sum;
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Binary `K`-largest selection per row of a row-major matrix with `cols`
/// columns. Ties go to the lower column index.
pub fn topk_filter<T: Float>(scores: &[T], cols: usize, k: usize) -> Result<Vec<bool>, ModelError> {
    if k == 0 || k > cols {
        return Err(ModelError::Config(format!("neighbour count {k} outside 1..={cols}")));
    }
    let mut out = vec![false; scores.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for (row, orow) in scores.chunks(cols).zip(out.chunks_mut(cols)) {
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &j in &order[..k] {
            orow[j] = true;
        }
    }
    Ok(out)
}

/// Neighbour filter `[B, n+1, n+1]`: customer rows keep their `k` best
/// customers by `alpha`, the depot row keeps every customer, and no row
/// keeps the depot column.
pub fn neighbor_filter<T: Float>(alpha: &Tensor<T>, k: usize) -> Result<Vec<bool>, ModelError> {
    let s = alpha.shape();
    let (batch, nodes) = (s[0], s[1]);
    let n = nodes - 1;
    let mut block = Vec::with_capacity(n * n);
    let mut mask = vec![false; alpha.numel()];
    for b in 0..batch {
        let base = b * nodes * nodes;
        block.clear();
        for i in 1..nodes {
            block.extend_from_slice(&alpha.data()[base + i * nodes + 1..base + (i + 1) * nodes]);
        }
        let keep = topk_filter(&block, n, k)?;
        for j in 1..nodes {
            mask[base + j] = true;
        }
        for i in 1..nodes {
            for j in 1..nodes {
                mask[base + i * nodes + j] = keep[(i - 1) * n + (j - 1)];
            }
        }
    }
    Ok(mask)
}

/// Residual aggregation of layer `l` under a fixed neighbour filter.
/// Returns the pre-norm sum `h + agg` and the renormalized attention.
#[allow(clippy::too_many_arguments)]
pub fn aggregate<T: Float>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layer: usize,
    h: Var,
    edges: EdgeEmbedding,
    dist: Var,
    logits: Var,
    filter: Vec<bool>,
) -> Result<(Var, Var), ModelError> {
    let d = *tape.shape(h).last().unwrap();
    let wv = bound.var(&format!("enc.layer{layer}.wv"));
    let v = tape.matmul(h, wv)?;
    let slope = tape.reshape(edges.slope, &[1, d])?;
    let offset = tape.reshape(edges.offset, &[1, d])?;
    let va = tape.matmul(slope, wv)?;
    let vc = tape.matmul(offset, wv)?;
    let a = tape.softmax_masked(logits, Some(filter))?;
    let agg = tape.bmm(a, v, false)?;
    let ad = tape.mul(a, dist)?;
    let ad = tape.sum_axis(ad, 2)?;
    let s = tape.shape(ad).to_vec();
    let ad = tape.reshape(ad, &[s[0], s[1], 1])?;
    let edge_part = tape.mul(ad, va)?;
    let agg = tape.add(agg, edge_part)?;
    let agg = tape.add(agg, vc)?;
    Ok((tape.add(h, agg)?, a))
}

/// Shallow MLP over `[h_last ∥ h_initial]` rows, averaged per instance.
pub fn graph_readout<T: Float>(
    tape: &mut Tape<T>,
    bound: &Bound,
    initial: Var,
    last: Var,
) -> Result<Var, ModelError> {
    let cat = tape.concat(&[last, initial], 2)?;
    let z = tape.matmul(cat, bound.var("enc.readout.w1"))?;
    let z = tape.add(z, bound.var("enc.readout.b1"))?;
    let z = tape.relu(z);
    let z = tape.matmul(z, bound.var("enc.readout.w2"))?;
    let z = tape.add(z, bound.var("enc.readout.b2"))?;
    Ok(tape.mean_axis(z, 1)?)
}

pub fn encode<T: Float>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    batch: &ProblemBatch<T>,
    opts: EncodeOptions,
) -> Result<EncoderOutput<T>, ModelError> {
    if opts.neighbors == 0 || opts.neighbors > batch.n {
        return Err(ModelError::Config(format!("neighbour count {} outside 1..={}", opts.neighbors, batch.n)));
    }
    let mut moments = Vec::new();
    let (initial, edges) = embed_initial(tape, params, bound, batch, opts.mode, &mut moments)?;
    let dist = tape.constant(batch.dist.clone());
    let mut h = initial;
    let mut attention = Vec::new();
    for l in 0..params.config.layers {
        let logits = attention_logits(tape, bound, l, h, edges, dist)?;
        let alpha = attention_matrix(tape.value(logits));
        let filter = neighbor_filter(&alpha, opts.neighbors)?;
        let (pre, a) = aggregate(tape, bound, l, h, edges, dist, logits, filter)?;
        if opts.keep_attention {
            attention.push(tape.value(a).clone());
        }
        h = norm(tape, params, bound, &format!("enc.layer{l}.bn"), pre, opts.mode, &mut moments)?;
    }
    let readout = graph_readout(tape, bound, initial, h)?;
    Ok(EncoderOutput { nodes: h, initial, readout, edges, attention, moments })
}

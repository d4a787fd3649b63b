//! Literal f64 re-computation of the model from its parameter store.
//! Edge embeddings are materialized per pair, attention is evaluated
//! entry by entry and nothing is shared with the library's kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use gase::decoder::DecoderState;
use gase::instances::VrpInstance;
use gase::model::{ModelParams, NormMode};
use gase::numkernel::BN_EPS;

pub type Mat = Vec<Vec<f64>>;

pub fn weight(p: &ModelParams<f64>, name: &str) -> Mat {
    let t = p.get(name);
    let s = t.shape();
    let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vector(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    p.get(name).data().to_vec()
}

/// Row vector times matrix.
pub fn vm(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Batch norm over a flat list of rows.
pub fn batch_norm(p: &ModelParams<f64>, layer: &str, rows: &[Vec<f64>], mode: NormMode) -> Mat {
    let d = rows[0].len();
    let gamma = vector(p, &format!("{layer}.gamma"));
    let beta = vector(p, &format!("{layer}.beta"));
    let (mean, var) = match mode {
        NormMode::Train => {
            let m = rows.len() as f64;
            let mean: Vec<f64> = (0..d).map(|f| rows.iter().map(|r| r[f]).sum::<f64>() / m).collect();
            let var: Vec<f64> = (0..d).map(|f| rows.iter().map(|r| (r[f] - mean[f]).powi(2)).sum::<f64>() / m).collect();
            (mean, var)
        }
        NormMode::Eval => {
            let r = &p.running[layer];
            (r.mean.clone(), r.var.clone())
        }
    };
    rows.iter()
        .map(|r| (0..d).map(|f| gamma[f] * (r[f] - mean[f]) / (var[f] + BN_EPS).sqrt() + beta[f]).collect())
        .collect()
}

pub struct OracleEncoding {
    /// `[B][n+1][d]`
    pub nodes: Vec<Mat>,
    pub initial: Vec<Mat>,
    /// `[B][d]`
    pub readout: Mat,
    /// Per layer `[B][n+1][n+1]`.
    pub attention: Vec<Vec<Mat>>,
}

fn top_k(alpha: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (1..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].partial_cmp(&alpha[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn encode(p: &ModelParams<f64>, insts: &[&VrpInstance], k: usize, mode: NormMode) -> OracleEncoding {
    let d = p.config.d_model;
    let b = insts.len();
    let nodes = insts[0].n_nodes();

    let wd = weight(p, "enc.depot.w");
    let bd = vector(p, "enc.depot.b");
    let wn = weight(p, "enc.node.w");
    let bn = vector(p, "enc.node.b");
    let mut raw = Vec::new();
    for inst in insts {
        let c = inst.coords();
        raw.push(add(&vm(&c[0], &wd), &bd));
        for i in 1..nodes {
            let x = [c[i][0], c[i][1], inst.demands()[i] / inst.capacity()];
            raw.push(add(&vm(&x, &wn), &bn));
        }
    }
    let flat = batch_norm(p, "enc.node_bn", &raw, mode);
    let initial: Vec<Mat> = flat.chunks(nodes).map(|c| c.to_vec()).collect();

    let we = vector(p, "enc.edge.w");
    let be = vector(p, "enc.edge.b");
    let mut edge_raw = Vec::new();
    for inst in insts {
        for i in 0..nodes {
            for j in 0..nodes {
                let dij = inst.dist(i, j);
                edge_raw.push((0..d).map(|f| dij * we[f] + be[f]).collect::<Vec<f64>>());
            }
        }
    }
    let edges = batch_norm(p, "enc.edge_bn", &edge_raw, mode);
    let edge = |bi: usize, i: usize, j: usize| &edges[(bi * nodes + i) * nodes + j];

    let mut h = initial.clone();
    let mut attention = Vec::new();
    for l in 0..p.config.layers {
        let wq = weight(p, &format!("enc.layer{l}.wq"));
        let wk = weight(p, &format!("enc.layer{l}.wk"));
        let wv = weight(p, &format!("enc.layer{l}.wv"));
        let mut pre = Vec::new();
        let mut layer_att = Vec::new();
        for bi in 0..b {
            let q: Mat = h[bi].iter().map(|r| vm(r, &wq)).collect();
            let mut att = vec![vec![0.0; nodes]; nodes];
            for i in 0..nodes {
                let score: Vec<f64> = (0..nodes)
                    .map(|j| {
                        if j == 0 {
                            return f64::NEG_INFINITY;
                        }
                        let key = vm(&add(&h[bi][j], edge(bi, i, j)), &wk);
                        dot(&q[i], &key) / (d as f64).sqrt()
                    })
                    .collect();
                let max = score[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = score[1..].iter().map(|s| (s - max).exp()).sum();
                let alpha: Vec<f64> = score.iter().map(|s| (s - max).exp() / z).collect();
                let kept = if i == 0 { (1..nodes).collect() } else { top_k(&alpha, k) };
                let zk: f64 = kept.iter().map(|&j| (score[j] - max).exp()).sum();
                let mut agg = vec![0.0; d];
                for &j in &kept {
                    att[i][j] = (score[j] - max).exp() / zk;
                    let val = vm(&add(&h[bi][j], edge(bi, i, j)), &wv);
                    for f in 0..d {
                        agg[f] += att[i][j] * val[f];
                    }
                }
                pre.push(add(&h[bi][i], &agg));
            }
            layer_att.push(att);
        }
        let normed = batch_norm(p, &format!("enc.layer{l}.bn"), &pre, mode);
        h = normed.chunks(nodes).map(|c| c.to_vec()).collect();
        attention.push(layer_att);
    }

    let w1 = weight(p, "enc.readout.w1");
    let b1 = vector(p, "enc.readout.b1");
    let w2 = weight(p, "enc.readout.w2");
    let b2 = vector(p, "enc.readout.b2");
    let readout = (0..b)
        .map(|bi| {
            let mut acc = vec![0.0; d];
            for i in 0..nodes {
                let cat: Vec<f64> = h[bi][i].iter().chain(&initial[bi][i]).cloned().collect();
                let z: Vec<f64> = add(&vm(&cat, &w1), &b1).into_iter().map(|v| v.max(0.0)).collect();
                let y = add(&vm(&z, &w2), &b2);
                for f in 0..d {
                    acc[f] += y[f] / nodes as f64;
                }
            }
            acc
        })
        .collect();
    OracleEncoding { nodes: h, initial, readout, attention }
}

/// Next-node probabilities for one instance in `state`, from its final
/// node embeddings and graph summary.
pub fn step_probs(p: &ModelParams<f64>, nodes: &Mat, readout: &[f64], state: &DecoderState) -> Vec<f64> {
    let d = p.config.d_model;
    let heads = p.config.heads;
    let dh = d / heads;
    let n = nodes.len();
    let mask = state.decoding_mask();
    let w_ctx = weight(p, "dec.w_ctx");
    let mut ctx = vec![0.0; d];
    for f in 0..d {
        for r in 0..d {
            ctx[f] += readout[r] * w_ctx[r][f] + nodes[state.last_node][r] * w_ctx[d + r][f];
        }
        ctx[f] += state.capacity_fraction() * w_ctx[2 * d][f];
    }
    let q = vm(&ctx, &weight(p, "dec.wq"));
    let keys: Mat = nodes.iter().map(|h| vm(h, &weight(p, "dec.wk"))).collect();
    let vals: Mat = nodes.iter().map(|h| vm(h, &weight(p, "dec.wv"))).collect();
    let mut glimpse = vec![0.0; d];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        let u: Vec<f64> = (0..n)
            .map(|j| if mask[j] { dot(&q[r.clone()], &keys[j][r.clone()]) / (dh as f64).sqrt() } else { f64::NEG_INFINITY })
            .collect();
        let a = softmax(&u);
        for j in 0..n {
            for (f, g) in r.clone().zip(glimpse[r.clone()].iter_mut()) {
                *g += a[j] * vals[j][f];
            }
        }
    }
    let merged = vm(&glimpse, &weight(p, "dec.wm"));
    let q2 = vm(&merged, &weight(p, "dec.wq_single"));
    let wk2 = weight(p, "dec.wk_single");
    let u: Vec<f64> = (0..n)
        .map(|j| {
            if mask[j] {
                p.config.clip * (dot(&q2, &vm(&nodes[j], &wk2)) / (d as f64).sqrt()).tanh()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    softmax(&u)
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = u.iter().map(|v| (v - max).exp()).sum();
    u.iter().map(|v| (v - max).exp() / z).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &[Mat]) -> Vec<f64> {
    m.iter().flatten().flatten().cloned().collect()
}

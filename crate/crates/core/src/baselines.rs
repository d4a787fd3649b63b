//! Non-learned references: exact enumeration for tiny instances and the
//! nearest-neighbour construction heuristic.

use thiserror::Error;

use crate::instances::{Solution, VrpInstance};

/// Largest customer count the exact solver accepts.
pub const BRUTE_FORCE_MAX: usize = 9;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("exact search refused: {n} customers exceeds the limit of {max}")]
    TooLarge { n: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub best_sequence: Vec<usize>,
    pub best_length: f64,
    /// Customer orders examined.
    pub nodes_expanded: u64,
}

/// Cheapest way to cut a fixed customer order into capacity-feasible
/// depot-to-depot routes. Every cut pattern is covered by the recurrence,
/// so the result equals an exhaustive search over depot insertions.
/// Returns the length and the cut positions.
pub fn optimal_split(inst: &VrpInstance, order: &[usize]) -> (f64, Vec<usize>) {
    let m = order.len();
    let q = inst.demands();
    let cap = inst.capacity();
    let mut best = vec![f64::INFINITY; m + 1];
    let mut prev = vec![0usize; m + 1];
    best[0] = 0.0;
    for i in 0..m {
        if !best[i].is_finite() {
            continue;
        }
        let mut load = 0.0;
        let mut inner = 0.0;
        for j in i..m {
            load += q[order[j]];
            if load > cap {
                break;
            }
            if j > i {
                inner += inst.dist(order[j - 1], order[j]);
            }
            let cost = best[i] + inst.dist(0, order[i]) + inner + inst.dist(order[j], 0);
            if cost < best[j + 1] {
                best[j + 1] = cost;
                prev[j + 1] = i;
            }
        }
    }
    let mut cuts = Vec::new();
    let mut k = m;
    while k > 0 {
        cuts.push(prev[k]);
        k = prev[k];
    }
    cuts.reverse();
    (best[m], cuts)
}

fn sequence_from_cuts(order: &[usize], cuts: &[usize]) -> Vec<usize> {
    let mut seq = vec![0];
    for (r, &start) in cuts.iter().enumerate() {
        let end = cuts.get(r + 1).copied().unwrap_or(order.len());
        seq.extend_from_slice(&order[start..end]);
        seq.push(0);
    }
    seq
}

/// Exact optimum by enumerating every customer order (Heap's algorithm)
/// and splitting each optimally.
pub fn brute_force_optimal(inst: &VrpInstance) -> Result<OracleResult, BaselineError> {
    let n = inst.n_customers();
    if n > BRUTE_FORCE_MAX {
        return Err(BaselineError::TooLarge { n, max: BRUTE_FORCE_MAX });
    }
    let mut order: Vec<usize> = (1..=n).collect();
    let mut best_len = f64::INFINITY;
    let mut best_seq = Vec::new();
    let mut expanded = 0u64;
    let mut visit = |order: &[usize]| {
        expanded += 1;
        let (len, cuts) = optimal_split(inst, order);
        if len < best_len - 1e-12 {
            best_len = len;
            best_seq = sequence_from_cuts(order, &cuts);
        }
    };
    visit(&order);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            visit(&order);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(OracleResult { best_sequence: best_seq, best_length: best_len, nodes_expanded: expanded })
}

/// Repeatedly drives to the closest unvisited customer that still fits,
/// returning to the depot when none does. Ties go to the lower index.
pub fn nearest_neighbor(inst: &VrpInstance) -> Solution {
    let n = inst.n_customers();
    let q = inst.demands();
    let mut visited = vec![false; n + 1];
    let mut left = n;
    let mut load = inst.capacity();
    let mut cur = 0;
    let mut seq = vec![0];
    while left > 0 {
        let next = (1..=n)
            .filter(|&j| !visited[j] && q[j] <= load)
            .min_by(|&a, &b| inst.dist(cur, a).partial_cmp(&inst.dist(cur, b)).unwrap().then(a.cmp(&b)));
        match next {
            Some(j) => {
                visited[j] = true;
                left -= 1;
                load -= q[j];
                cur = j;
            }
            None => {
                load = inst.capacity();
                cur = 0;
            }
        }
        seq.push(cur);
    }
    Solution::from_sequence(inst, seq).expect("indices come from the instance")
}

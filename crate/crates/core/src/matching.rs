//! Minimum-cost bipartite matching between query predictions and targets.

use crate::error::{contract_err, Result};
use crate::geometry::{giou, pair_l1, BBox};
use crate::losses::LossWeights;
use crate::model::PredictionValues;
use crate::numerics::{sigmoid, Tensor};
use crate::scenes::HoiPair;

/// `N_q × N_g` matrix of finite costs, queries along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Tensor,
}

impl CostMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(contract_err("cost matrix must be 2-D"));
        }
        if values.cols() > values.rows() {
            return Err(contract_err(format!(
                "{} targets exceed {} queries",
                values.cols(),
                values.rows()
            )));
        }
        if values.cols() == 0 {
            return Err(contract_err("cost matrix without targets"));
        }
        if !values.all_finite() {
            return Err(contract_err("cost matrix contains non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn queries(&self) -> usize {
        self.values.rows()
    }

    pub fn targets(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.values.get(query, target)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Injective query → target mapping covering every target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, target)`, sorted by target.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Identity mapping used by hard-query branches: query `i` answers for `origin[i]`.
    pub fn from_origins(origin: &[usize]) -> Self {
        let mut pairs: Vec<(usize, usize)> = origin.iter().copied().enumerate().collect();
        pairs.sort_by_key(|&(q, t)| (t, q));
        Self { pairs }
    }

    pub fn query_for_target(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == target).map(|p| p.0)
    }

    pub fn target_for_query(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    /// Sum of matched costs in target order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, t)| cost.get(q, t)).sum()
    }

    pub fn is_valid_for(&self, queries: usize, targets: usize) -> bool {
        let mut seen_q = vec![false; queries];
        let mut seen_t = vec![false; targets];
        for &(q, t) in &self.pairs {
            if q >= queries || t >= targets || seen_q[q] || seen_t[t] {
                return false;
            }
            seen_q[q] = true;
            seen_t[t] = true;
        }
        seen_t.iter().all(|&s| s)
    }
}

fn prob_of(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    (logits[class] - max).exp() / total
}

fn mean_bce(logits: &[f64], labels: &[bool]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            // softplus(x) − y·x, stable for large |x|
            let sp = if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            };
            sp - if y { x } else { 0.0 }
        })
        .sum();
    sum / logits.len() as f64
}

fn row_box(t: &Tensor, r: usize) -> BBox {
    let v = t.row(r);
    BBox::new(v[0], v[1], v[2], v[3])
}

/// Matching cost mirroring the loss terms with the same weights.
pub fn matching_cost(
    preds: &PredictionValues,
    targets: &[HoiPair],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    if targets.is_empty() {
        return Err(contract_err("matching needs at least one target"));
    }
    let nq = preds.class_logits.rows();
    let mut data = Vec::with_capacity(nq * targets.len());
    for q in 0..nq {
        let h = row_box(&preds.human_boxes, q);
        let o = row_box(&preds.object_boxes, q);
        let logits = preds.class_logits.row(q);
        let verbs = preds.verb_logits.row(q);
        for t in targets {
            let class_term = 1.0 - prob_of(logits, t.object_class);
            let l1 = pair_l1(h, t.human) + pair_l1(o, t.object);
            let g = (1.0 - giou(h, t.human)) + (1.0 - giou(o, t.object));
            let verb_term = mean_bce(verbs, &t.verbs);
            data.push(
                weights.lambda_c * class_term
                    + weights.lambda_b * l1
                    + weights.lambda_u * g
                    + weights.lambda_a * verb_term,
            );
        }
    }
    CostMatrix::new(Tensor::new(vec![nq, targets.len()], data)?)
}

/// Shortest-augmenting-path Hungarian method on a `rows ≤ cols` matrix.
/// Returns the column assigned to each row.
fn solve_rows(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    // 1-based potentials, column 0 is the virtual start
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal assignment of targets to queries.
///
/// Among optimal assignments the lexicographically smallest
/// `(query of target 0, query of target 1, …)` is returned: targets are
/// fixed in index order to the lowest query that still admits an optimal
/// completion.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (nq, nt) = (cost.queries(), cost.targets());
    // targets as rows
    let transposed = cost.values.transpose();
    let first = solve_rows(transposed.data(), nt, nq);
    let best: f64 = first.iter().enumerate().map(|(t, &q)| cost.get(q, t)).sum();
    let tol = 1e-12 * best.abs().max(1.0);

    let mut fixed: Vec<usize> = Vec::with_capacity(nt);
    let mut fixed_cost = 0.0;
    for (t, &fallback) in first.iter().enumerate() {
        let remaining_t: Vec<usize> = (t + 1..nt).collect();
        let mut chosen = None;
        for q in 0..nq {
            if fixed.contains(&q) {
                continue;
            }
            let free_q: Vec<usize> = (0..nq).filter(|c| *c != q && !fixed.contains(c)).collect();
            let rest = if remaining_t.is_empty() {
                0.0
            } else {
                let mut sub = Vec::with_capacity(remaining_t.len() * free_q.len());
                for &rt in &remaining_t {
                    for &fq in &free_q {
                        sub.push(cost.get(fq, rt));
                    }
                }
                let cols = solve_rows(&sub, remaining_t.len(), free_q.len());
                cols.iter()
                    .enumerate()
                    .map(|(i, &c)| cost.get(free_q[c], remaining_t[i]))
                    .sum()
            };
            if fixed_cost + cost.get(q, t) + rest <= best + tol {
                chosen = Some(q);
                break;
            }
        }
        // the unconstrained optimum always admits a completion; keep it if rounding disagrees
        let q = chosen.unwrap_or(fallback);
        fixed_cost += cost.get(q, t);
        fixed.push(q);
    }
    Assignment {
        pairs: fixed.into_iter().enumerate().map(|(t, q)| (q, t)).collect(),
    }
}

/// Largest query count accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX_QUERIES: usize = 8;

/// Exhaustive minimum over injections; ties keep the lexicographically first.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    let (nq, nt) = (cost.queries(), cost.targets());
    if nq > BRUTE_FORCE_MAX_QUERIES {
        return Err(contract_err(format!(
            "brute force limited to {BRUTE_FORCE_MAX_QUERIES} queries, got {nq}"
        )));
    }
    struct Search<'a> {
        cost: &'a CostMatrix,
        current: Vec<usize>,
        used: Vec<bool>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, t: usize) {
            if t == self.cost.targets() {
                let total: f64 = self
                    .current
                    .iter()
                    .enumerate()
                    .map(|(t, &q)| self.cost.get(q, t))
                    .sum();
                if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            for q in 0..self.cost.queries() {
                if self.used[q] {
                    continue;
                }
                self.used[q] = true;
                self.current.push(q);
                self.go(t + 1);
                self.current.pop();
                self.used[q] = false;
            }
        }
    }
    let mut s = Search {
        cost,
        current: Vec::with_capacity(nt),
        used: vec![false; nq],
        best: None,
    };
    s.go(0);
    let (_, qs) = s.best.expect("at least one injection exists when N_g <= N_q");
    Ok(Assignment {
        pairs: qs.into_iter().enumerate().map(|(t, q)| (q, t)).collect(),
    })
}

/// Verb probabilities for a row of logits.
pub(crate) fn verb_probs(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid(x)).collect()
}

/// Softmax probabilities for a row of class logits.
pub(crate) fn class_probs(logits: &[f64]) -> Vec<f64> {
    (0..logits.len()).map(|c| prob_of(logits, c)).collect()
}

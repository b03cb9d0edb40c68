//! Top-k mixture of lightweight GeLU experts with importance and load
//! balancing losses.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal2, slice2, slice2_mut, uniform2, ParamGroup};
use crate::scalar::{gelu, gelu_grad, softmax_into, Scalar};

/// Guard in the coefficient-of-variation denominator.
pub const CV_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Router<S> {
    /// `Ĉ × d` routing logits projection.
    pub weight: Array2<S>,
    /// Experts activated per shape.
    pub k: usize,
}

impl<S: Scalar> Router<S> {
    pub fn zeros(num_experts: usize, d: usize, k: usize) -> Self {
        Self {
            weight: Array2::zeros((num_experts, d)),
            k,
        }
    }

    pub fn init<R: Rng>(num_experts: usize, d: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: normal2(rng, num_experts, d, 0.02),
            k,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.weight.nrows()
    }
}

impl<S: Scalar> ParamGroup<S> for Router<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        vec![("router.weight".into(), slice2(&self.weight))]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        vec![("router.weight".into(), slice2_mut(&mut self.weight))]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet<S> {
    /// One `d × d` projection per expert.
    pub weights: Vec<Array2<S>>,
    /// `Ĉ × d`, row `e` is expert `e`'s bias.
    pub biases: Array2<S>,
}

impl<S: Scalar> ExpertSet<S> {
    pub fn zeros(num_experts: usize, d: usize) -> Self {
        Self {
            weights: (0..num_experts).map(|_| Array2::zeros((d, d))).collect(),
            biases: Array2::zeros((num_experts, d)),
        }
    }

    pub fn init<R: Rng>(num_experts: usize, d: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d as f64).sqrt();
        Self {
            weights: (0..num_experts).map(|_| uniform2(rng, d, d, bound)).collect(),
            biases: uniform2(rng, num_experts, d, bound),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl<S: Scalar> ParamGroup<S> for ExpertSet<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        let mut v: Vec<(String, &[S])> = self
            .weights
            .iter()
            .enumerate()
            .map(|(e, w)| (format!("experts.{e}.weight"), slice2(w)))
            .collect();
        v.push(("experts.bias".into(), slice2(&self.biases)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut v: Vec<(String, &mut [S])> = self
            .weights
            .iter_mut()
            .enumerate()
            .map(|(e, w)| (format!("experts.{e}.weight"), slice2_mut(w)))
            .collect();
        v.push(("experts.bias".into(), slice2_mut(&mut self.biases)));
        v
    }
}

/// Routing decision for one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing<S> {
    /// Full softmax over experts.
    pub probs: Vec<S>,
    /// Selected experts, ascending.
    pub selected: Vec<usize>,
    /// Renormalized gates (zero outside `selected`).
    pub gates: Vec<S>,
}

impl<S: Scalar> Routing<S> {
    /// Top-k masked softmax before renormalization.
    pub fn masked(&self) -> Vec<S> {
        let mut m = vec![S::zero(); self.probs.len()];
        for &e in &self.selected {
            m[e] = self.probs[e];
        }
        m
    }
}

/// Indices of the `k` largest values; ties prefer the smaller index.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

fn routing_from_probs<S: Scalar>(probs: Vec<S>, selected: Vec<usize>) -> Routing<S> {
    let total: S = selected.iter().map(|&e| probs[e]).sum();
    let mut gates = vec![S::zero(); probs.len()];
    for &e in &selected {
        gates[e] = probs[e] / total;
    }
    Routing {
        probs,
        selected,
        gates,
    }
}

fn check_router<S: Scalar>(router: &Router<S>, d: usize) -> Result<()> {
    if router.weight.ncols() != d {
        return Err(Error::Dimension(format!(
            "router expects width {}, got {d}",
            router.weight.ncols()
        )));
    }
    if router.k < 1 || router.k > router.num_experts() {
        return Err(Error::Config(format!(
            "k = {} outside [1, {}]",
            router.k,
            router.num_experts()
        )));
    }
    Ok(())
}

pub fn route<S: Scalar>(embedding: &[S], router: &Router<S>) -> Result<Routing<S>> {
    check_router(router, embedding.len())?;
    let logits = router.weight.dot(&ArrayView1::from(embedding));
    let mut probs = vec![S::zero(); logits.len()];
    softmax_into(logits.as_slice().expect("contiguous"), &mut probs);
    let selected = top_k_indices(&probs, router.k);
    Ok(routing_from_probs(probs, selected))
}

/// Renormalized top-k gate vector for one embedding.
pub fn route_topk<S: Scalar>(embedding: &[S], router: &Router<S>) -> Result<Vec<S>> {
    Ok(route(embedding, router)?.gates)
}

/// Gate statistics accumulated over every shape routed in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats<S> {
    /// Σ over shapes of the top-k masked softmax.
    pub importance: Vec<S>,
    /// Σ over shapes of the renormalized gates.
    pub soft_load: Vec<S>,
    /// Shapes assigned to each expert.
    pub hard_load: Vec<u64>,
    pub routed: usize,
    /// Expert networks evaluated.
    pub expert_evals: usize,
}

impl<S: Scalar> GateStats<S> {
    pub fn new(num_experts: usize) -> Self {
        Self {
            importance: vec![S::zero(); num_experts],
            soft_load: vec![S::zero(); num_experts],
            hard_load: vec![0; num_experts],
            routed: 0,
            expert_evals: 0,
        }
    }

    pub fn record(&mut self, routing: &Routing<S>) {
        for &e in &routing.selected {
            self.importance[e] += routing.probs[e];
            self.soft_load[e] += routing.gates[e];
            self.hard_load[e] += 1;
        }
        self.routed += 1;
    }

    pub fn merge(&mut self, other: &GateStats<S>) {
        for e in 0..self.importance.len() {
            self.importance[e] += other.importance[e];
            self.soft_load[e] += other.soft_load[e];
            self.hard_load[e] += other.hard_load[e];
        }
        self.routed += other.routed;
        self.expert_evals += other.expert_evals;
    }

    pub fn num_experts(&self) -> usize {
        self.importance.len()
    }

    /// Per-expert share of total importance.
    pub fn importance_share(&self) -> Vec<f64> {
        share(self.importance.iter().map(|v| v.to_f64_lossy()))
    }

    /// Per-expert share of hard assignments.
    pub fn hard_load_share(&self) -> Vec<f64> {
        share(self.hard_load.iter().map(|&v| v as f64))
    }
}

fn share(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter().map(|x| x / total).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// One shape through the mixture: `x + Σ_e Ĝ_e · GeLU(W_e x + b_e)`.
pub fn expert_mixture<S: Scalar>(
    embedding: &[S],
    router: &Router<S>,
    experts: &ExpertSet<S>,
    stats: &mut GateStats<S>,
) -> Result<Vec<S>> {
    if experts.len() != router.num_experts() {
        return Err(Error::Dimension(format!(
            "{} experts for a router over {}",
            experts.len(),
            router.num_experts()
        )));
    }
    let routing = route(embedding, router)?;
    let x = ArrayView1::from(embedding);
    let mut out = x.to_owned();
    for &e in &routing.selected {
        let pre = experts.weights[e].dot(&x) + experts.biases.row(e);
        let g = routing.gates[e];
        for (o, &u) in out.iter_mut().zip(&pre) {
            *o += g * gelu(u);
        }
        stats.expert_evals += 1;
    }
    stats.record(&routing);
    Ok(out.to_vec())
}

/// Population std over mean.
pub fn coefficient_of_variation<S: Scalar>(v: &[S]) -> S {
    let n = S::lit(v.len() as f64);
    let mean = v.iter().copied().sum::<S>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    var.sqrt() / (mean + S::lit(CV_EPS))
}

/// `CV(v)²` and its gradient with respect to `v`.
pub fn cv_squared_with_grad<S: Scalar>(v: &[S]) -> (S, Vec<S>) {
    let n = S::lit(v.len() as f64);
    let mean = v.iter().copied().sum::<S>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    let denom = mean + S::lit(CV_EPS);
    let value = var / (denom * denom);
    let two = S::lit(2.0);
    let grad = v
        .iter()
        .map(|&x| two * (x - mean) / (n * denom * denom) - two * var / (n * denom * denom * denom))
        .collect();
    (value, grad)
}

/// `(L_imp, L_load)` = squared CVs of importance and soft load.
pub fn aux_losses<S: Scalar>(stats: &GateStats<S>) -> (S, S) {
    (
        cv_squared_with_grad(&stats.importance).0,
        cv_squared_with_grad(&stats.soft_load).0,
    )
}

/// Per-expert rows routed through a batched mixture evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ExpertBucket<S> {
    pub rows: Vec<usize>,
    /// Pre-activations, one row per entry of `rows`.
    pub pre: Array2<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct MoeCache<S> {
    pub routings: Vec<Routing<S>>,
    pub buckets: Vec<ExpertBucket<S>>,
}

impl<S: Scalar> MoeCache<S> {
    pub fn selections(&self) -> Vec<Vec<usize>> {
        self.routings.iter().map(|r| r.selected.clone()).collect()
    }
}

/// Batched mixture term `Σ_e Ĝ_e · GeLU(W_e x + b_e)` (no residual). When
/// `frozen` is given, those expert sets replace the top-k choice.
pub(crate) fn moe_forward<S: Scalar>(
    rows: ArrayView2<S>,
    router: &Router<S>,
    experts: &ExpertSet<S>,
    frozen: Option<&[Vec<usize>]>,
    stats: &mut GateStats<S>,
) -> (Array2<S>, MoeCache<S>) {
    let n_experts = router.num_experts();
    let logits = rows.dot(&router.weight.t());
    let mut routings = Vec::with_capacity(rows.nrows());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (r, l) in logits.rows().into_iter().enumerate() {
        let mut probs = vec![S::zero(); n_experts];
        softmax_into(l.as_slice().expect("contiguous"), &mut probs);
        let selected = match frozen {
            Some(f) => f[r].clone(),
            None => top_k_indices(&probs, router.k),
        };
        for &e in &selected {
            members[e].push(r);
        }
        let routing = routing_from_probs(probs, selected);
        stats.record(&routing);
        routings.push(routing);
    }

    let mut mix = Array2::zeros(rows.raw_dim());
    let mut buckets = Vec::with_capacity(n_experts);
    for (e, idx) in members.into_iter().enumerate() {
        let x = rows.select(Axis(0), &idx);
        let mut pre = x.dot(&experts.weights[e].t());
        pre += &experts.biases.row(e);
        for (i, &r) in idx.iter().enumerate() {
            let g = routings[r].gates[e];
            for (m, &u) in mix.row_mut(r).iter_mut().zip(pre.row(i)) {
                *m += g * gelu(u);
            }
        }
        stats.expert_evals += idx.len();
        buckets.push(ExpertBucket { rows: idx, pre });
    }
    (mix, MoeCache { routings, buckets })
}

/// Backward of [`moe_forward`]. `d_importance` / `d_soft_load` are the loss
/// gradients with respect to the accumulated statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn moe_backward<S: Scalar>(
    rows: ArrayView2<S>,
    cache: &MoeCache<S>,
    grad_mix: ArrayView2<S>,
    d_importance: &[S],
    d_soft_load: &[S],
    router: &Router<S>,
    experts: &ExpertSet<S>,
    grad_router: &mut Router<S>,
    grad_experts: &mut ExpertSet<S>,
) -> Array2<S> {
    let n = rows.nrows();
    let n_experts = router.num_experts();
    let mut drows = Array2::zeros(rows.raw_dim());
    // dL/dĜ per row and expert
    let mut dgate = Array2::<S>::zeros((n, n_experts));

    for (e, bucket) in cache.buckets.iter().enumerate() {
        if bucket.rows.is_empty() {
            continue;
        }
        let mut dpre = Array2::zeros(bucket.pre.raw_dim());
        for (i, &r) in bucket.rows.iter().enumerate() {
            let g = cache.routings[r].gates[e];
            let gm = grad_mix.row(r);
            let mut acc = S::zero();
            for ((dp, &u), &gv) in dpre.row_mut(i).iter_mut().zip(bucket.pre.row(i)).zip(gm) {
                acc += gv * gelu(u);
                *dp = g * gv * gelu_grad(u);
            }
            dgate[[r, e]] = acc + d_soft_load[e];
        }
        let x = rows.select(Axis(0), &bucket.rows);
        grad_experts.weights[e] += &dpre.t().dot(&x);
        let mut db = grad_experts.biases.row_mut(e);
        db += &dpre.sum_axis(Axis(0));
        let dx = dpre.dot(&experts.weights[e]);
        for (i, &r) in bucket.rows.iter().enumerate() {
            let mut dr = drows.row_mut(r);
            dr += &dx.row(i);
        }
    }

    // Through renormalization Ĝ = G / ΣG and the softmax.
    let mut dlogits = Array2::<S>::zeros((n, n_experts));
    for (r, routing) in cache.routings.iter().enumerate() {
        let total: S = routing.selected.iter().map(|&e| routing.probs[e]).sum();
        let weighted: S = routing
            .selected
            .iter()
            .map(|&e| dgate[[r, e]] * routing.gates[e])
            .sum();
        let mut dprobs = vec![S::zero(); n_experts];
        for &e in &routing.selected {
            dprobs[e] = (dgate[[r, e]] - weighted) / total + d_importance[e];
        }
        let dot: S = dprobs.iter().zip(&routing.probs).map(|(&a, &b)| a * b).sum();
        for e in 0..n_experts {
            dlogits[[r, e]] = routing.probs[e] * (dprobs[e] - dot);
        }
    }
    grad_router.weight += &dlogits.t().dot(&rows);
    drows += &dlogits.dot(&router.weight);
    drows
}

/// Convenience record for telemetry output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertUtilization {
    pub expert: usize,
    pub importance_share: f64,
    pub hard_load_share: f64,
}

pub fn utilization<S: Scalar>(stats: &GateStats<S>) -> Vec<ExpertUtilization> {
    stats
        .importance_share()
        .into_iter()
        .zip(stats.hard_load_share())
        .enumerate()
        .map(|(expert, (importance_share, hard_load_share))| ExpertUtilization {
            expert,
            importance_share,
            hard_load_share,
        })
        .collect()
}

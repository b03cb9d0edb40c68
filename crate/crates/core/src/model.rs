//! The assembled network: shape embedding, `L` soft shape learning blocks
//! with shared attention head and experts, conjunctive pooling, and the
//! training objective with its hand-derived backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{score_rows, score_rows_backward, AttentionCache, AttentionHead, DEFAULT_ATTN_WIDTH};
use crate::embedding::{embed_backward, embed_forward, unfold, EmbedKind, EmbedParams, ShapeConfig};
use crate::error::{Error, Result};
use crate::inter::{inter_backward, inter_forward, InterCache, SharedExpertParams, DEFAULT_KERNELS};
use crate::moe::{cv_squared_with_grad, moe_backward, moe_forward, ExpertSet, GateStats, MoeCache, Router};
use crate::norm::{norm_backward, norm_forward, LayerNorm, NormCache};
use crate::params::{slice1, slice1_mut, slice2, slice2_mut, uniform1, uniform2, ParamGroup};
use crate::scalar::{gelu, gelu_grad, softmax_into, Scalar};
use crate::sparsify::{apply_selection, apply_selection_backward, output_count, Selection};

/// Lower clamp applied to the true-class probability inside the log.
pub const CE_CLAMP: f64 = 1e-12;

/// Table 2 style component switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Discard low-score shapes instead of fusing them.
    pub no_soft_sparse: bool,
    pub no_intra: bool,
    pub no_inter: bool,
    /// Replace the convolutional embedding with a dense per-window projection.
    pub linear_embed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub shape: ShapeConfig,
    pub num_classes: usize,
    pub num_experts: usize,
    pub k: usize,
    pub depth: usize,
    pub d_attn: usize,
    pub eta: f64,
    pub warmup_epochs: usize,
    pub ablation: Ablation,
    pub inter_kernels: Vec<usize>,
    pub inter_bottleneck: bool,
}

impl ModelConfig {
    /// Defaults for everything except the data-dependent sizes.
    pub fn new(shape: ShapeConfig, num_classes: usize) -> Self {
        Self {
            shape,
            num_classes,
            num_experts: num_classes,
            k: 1,
            depth: 2,
            d_attn: DEFAULT_ATTN_WIDTH,
            eta: 0.5,
            warmup_epochs: 150,
            ablation: Ablation::default(),
            inter_kernels: DEFAULT_KERNELS.to_vec(),
            inter_bottleneck: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ShapeConfig::new(self.shape.m, self.shape.q, self.shape.d, self.shape.series_len)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 1 {
            return bad("need at least one class".into());
        }
        if self.num_experts < 1 || self.k < 1 || self.k > self.num_experts {
            return bad(format!("k = {} must lie in [1, {}]", self.k, self.num_experts));
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.d_attn < 1 {
            return bad("attention width must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta = {} outside (0, 1]", self.eta));
        }
        if self.inter_kernels.contains(&0) {
            return bad("kernel sizes must be positive".into());
        }
        if !self.ablation.no_inter && self.inter_kernels.is_empty() {
            return bad("shared expert needs at least one kernel".into());
        }
        Ok(())
    }

    pub fn shape_count(&self) -> usize {
        self.shape.shape_count()
    }

    pub fn embed_kind(&self) -> EmbedKind {
        if self.ablation.linear_embed {
            EmbedKind::Linear
        } else {
            EmbedKind::Conv
        }
    }

    pub fn sparsifying(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
    }

    /// Rows per sample leaving each block at `epoch`.
    pub fn block_output_counts(&self, epoch: usize) -> Vec<usize> {
        let mut n = self.shape_count();
        (0..self.depth)
            .map(|_| {
                if self.sparsifying(epoch) {
                    n = output_count(n, self.eta, !self.ablation.no_soft_sparse);
                }
                n
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    /// `C × d`.
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Classifier<S> {
    pub fn zeros(classes: usize, d: usize) -> Self {
        Self {
            weight: Array2::zeros((classes, d)),
            bias: Array1::zeros(classes),
        }
    }
}

impl<S: Scalar> ParamGroup<S> for Classifier<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        vec![
            ("classifier.weight".into(), slice2(&self.weight)),
            ("classifier.bias".into(), slice1(&self.bias)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        vec![
            ("classifier.weight".into(), slice2_mut(&mut self.weight)),
            ("classifier.bias".into(), slice1_mut(&mut self.bias)),
        ]
    }
}

/// Every trainable tensor. The attention head and the expert set exist
/// once and are used by every block.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub embed: EmbedParams<S>,
    pub attention: AttentionHead<S>,
    pub router: Router<S>,
    pub experts: ExpertSet<S>,
    pub shared: SharedExpertParams<S>,
    pub norms: Vec<LayerNorm<S>>,
    pub classifier: Classifier<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.shape.d;
        Self {
            embed: EmbedParams::zeros(cfg.embed_kind(), cfg.shape.m, d, cfg.shape_count()),
            attention: AttentionHead::zeros(d, cfg.d_attn),
            router: Router::zeros(cfg.num_experts, d, cfg.k),
            experts: ExpertSet::zeros(cfg.num_experts, d),
            shared: SharedExpertParams::zeros(d, &cfg.inter_kernels, cfg.inter_bottleneck),
            norms: (0..cfg.depth).map(|i| LayerNorm::zeros(d, i)).collect(),
            classifier: Classifier::zeros(cfg.num_classes, d),
        }
    }

    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.shape.d;
        let bound = (1.0 / d as f64).sqrt();
        Self {
            embed: EmbedParams::init(cfg.embed_kind(), cfg.shape.m, d, cfg.shape_count(), rng),
            attention: AttentionHead::init(d, cfg.d_attn, rng),
            router: Router::init(cfg.num_experts, d, cfg.k, rng),
            experts: ExpertSet::init(cfg.num_experts, d, rng),
            shared: SharedExpertParams::init(d, &cfg.inter_kernels, cfg.inter_bottleneck, rng),
            norms: (0..cfg.depth).map(|i| LayerNorm::new(d, i)).collect(),
            classifier: Classifier {
                weight: uniform2(rng, cfg.num_classes, d, bound),
                bias: uniform1(rng, cfg.num_classes, bound),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl<S: Scalar> ParamGroup<S> for Params<S> {
    fn tensors(&self) -> Vec<(String, &[S])> {
        let mut v = self.embed.tensors();
        v.extend(self.attention.tensors());
        v.extend(self.router.tensors());
        v.extend(self.experts.tensors());
        v.extend(self.shared.tensors());
        for n in &self.norms {
            v.extend(n.tensors());
        }
        v.extend(self.classifier.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut v = self.embed.tensors_mut();
        v.extend(self.attention.tensors_mut());
        v.extend(self.router.tensors_mut());
        v.extend(self.experts.tensors_mut());
        v.extend(self.shared.tensors_mut());
        for n in &mut self.norms {
            v.extend(n.tensors_mut());
        }
        v.extend(self.classifier.tensors_mut());
        v
    }
}

/// Routing decisions of one forward pass, reusable to evaluate the same
/// piecewise-smooth branch again (finite-difference checks).
#[derive(Debug, Clone, PartialEq)]
pub struct Routes {
    pub blocks: Vec<BlockRoutes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockRoutes {
    /// One per sample.
    pub selections: Vec<Selection>,
    /// Selected experts per stacked row.
    pub experts: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    input: Array2<S>,
    norm: NormCache<S>,
    normed: Array2<S>,
    attn: AttentionCache<S>,
    selections: Vec<Selection>,
    in_group: usize,
    out_group: usize,
    sparse: Array2<S>,
    moe: Option<(Array2<S>, MoeCache<S>)>,
    inter: Option<(Array2<S>, InterCache<S>)>,
    pre: Array2<S>,
}

/// Result of a batched forward pass, with everything backward needs.
#[derive(Debug, Clone)]
pub struct BatchForward<S> {
    pub batch: usize,
    pub epoch: usize,
    /// `B × C`.
    pub probs: Array2<S>,
    pub logits: Array2<S>,
    pub stats: GateStats<S>,
    /// Rows per sample leaving each block.
    pub block_rows: Vec<usize>,
    windows: Array2<S>,
    embedded: Array2<S>,
    blocks: Vec<BlockCache<S>>,
    output: Array2<S>,
    final_attn: AttentionCache<S>,
    projected: Array2<S>,
}

impl<S: Scalar> BatchForward<S> {
    /// `(B·Num_L) × d` final rows.
    pub fn output(&self) -> &Array2<S> {
        &self.output
    }

    pub fn final_scores(&self) -> &Array1<S> {
        &self.final_attn.scores
    }

    pub fn routes(&self) -> Routes {
        Routes {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRoutes {
                    selections: b.selections.clone(),
                    experts: b.moe.as_ref().map(|(_, c)| c.selections()),
                })
                .collect(),
        }
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous")))
            .collect()
    }
}

pub(crate) fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss value and its components (reported in `f64`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub imp: f64,
    pub load: f64,
}

impl LossParts {
    pub fn compose(ce: f64, imp: f64, load: f64, lambda: f64) -> Self {
        Self {
            total: ce + lambda * (imp + load),
            ce,
            imp,
            load,
        }
    }
}

/// Per-sample view of a forward pass, for interpretability exports.
#[derive(Debug, Clone)]
pub struct SampleTrace<S> {
    /// `J × d` embedding-layer output.
    pub embeddings: Array2<S>,
    /// Attention scores of the rows entering each block.
    pub block_scores: Vec<Array1<S>>,
    pub selections: Vec<Selection>,
    /// Mixture term of the last block (absent when disabled).
    pub intra: Option<Array2<S>>,
    /// Shared-expert term of the last block (absent when disabled).
    pub inter: Option<Array2<S>>,
    pub output: Array2<S>,
    pub final_scores: Array1<S>,
    /// Originating shape index of each output row; `None` for fused rows.
    pub provenance: Vec<Option<usize>>,
    pub probs: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftShape<S> {
    pub config: ModelConfig,
    pub params: Params<S>,
}

impl<S: Scalar> SoftShape<S> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(Self { config, params })
    }

    /// The attention head used at block `depth` (one shared instance).
    pub fn attention_for_block(&self, _depth: usize) -> &AttentionHead<S> {
        &self.params.attention
    }

    /// The experts used at block `depth` (one shared instance).
    pub fn experts_for_block(&self, _depth: usize) -> &ExpertSet<S> {
        &self.params.experts
    }

    fn block_step(
        &self,
        input: Array2<S>,
        group: usize,
        block: usize,
        epoch: usize,
        frozen: Option<&BlockRoutes>,
        stats: &mut GateStats<S>,
    ) -> (Array2<S>, BlockCache<S>) {
        let p = &self.params;
        let cfg = &self.config;
        let batch = input.nrows() / group;
        let (normed, norm) = norm_forward(input.view(), &p.norms[block]);
        let attn = score_rows(normed.view(), &p.attention);

        let selections: Vec<Selection> = match frozen {
            Some(f) => f.selections.clone(),
            None => (0..batch)
                .map(|b| {
                    if cfg.sparsifying(epoch) {
                        let sc = attn.scores.slice(s![b * group..(b + 1) * group]);
                        Selection::top_eta(sc.as_slice().expect("contiguous"), cfg.eta, !cfg.ablation.no_soft_sparse)
                    } else {
                        Selection::keep_all(group)
                    }
                })
                .collect(),
        };
        let out_group = selections[0].output_rows();
        let d = cfg.shape.d;
        let mut sparse = Array2::zeros((batch * out_group, d));
        for (b, sel) in selections.iter().enumerate() {
            let rows = normed.slice(s![b * group..(b + 1) * group, ..]);
            let sc = attn.scores.slice(s![b * group..(b + 1) * group]);
            sparse
                .slice_mut(s![b * out_group..(b + 1) * out_group, ..])
                .assign(&apply_selection(rows, sc, sel));
        }

        let mut pre = sparse.clone();
        let moe = (!cfg.ablation.no_intra).then(|| {
            let fz = frozen.and_then(|f| f.experts.as_deref());
            let (mix, cache) = moe_forward(sparse.view(), &p.router, &p.experts, fz, stats);
            pre += &mix;
            (mix, cache)
        });
        let inter = (!cfg.ablation.no_inter).then(|| {
            let (out, cache) = inter_forward(sparse.view(), out_group, &p.shared);
            pre += &out;
            (out, cache)
        });
        let output = pre.mapv(gelu);
        (
            output,
            BlockCache {
                input,
                norm,
                normed,
                attn,
                selections,
                in_group: group,
                out_group,
                sparse,
                moe,
                inter,
                pre,
            },
        )
    }

    fn check_batch(&self, batch: &[&[S]]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        for s in batch {
            if s.len() != self.config.shape.series_len {
                return Err(Error::Dimension(format!(
                    "series length {} does not match model length {}",
                    s.len(),
                    self.config.shape.series_len
                )));
            }
        }
        Ok(())
    }

    /// Batched forward. `frozen` replays an earlier pass's discrete choices.
    pub fn forward_batch(&self, batch: &[&[S]], epoch: usize, frozen: Option<&Routes>) -> Result<BatchForward<S>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let p = &self.params;
        let b = batch.len();
        let j = cfg.shape_count();
        let windows = unfold(batch, &cfg.shape);
        let embedded = embed_forward(&windows, &p.embed, j);

        let mut stats = GateStats::new(cfg.num_experts);
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut current = embedded.clone();
        let mut group = j;
        for l in 0..cfg.depth {
            let fz = frozen.map(|f| &f.blocks[l]);
            let (out, cache) = self.block_step(current, group, l, epoch, fz, &mut stats);
            group = cache.out_group;
            blocks.push(cache);
            current = out;
        }
        let output = current;
        let block_rows = blocks.iter().map(|c| c.out_group).collect();

        let final_attn = score_rows(output.view(), &p.attention);
        let mut projected = output.dot(&p.classifier.weight.t());
        projected += &p.classifier.bias;
        let c = cfg.num_classes;
        let inv_n = S::one() / S::lit(group as f64);
        let mut logits = Array2::zeros((b, c));
        for bi in 0..b {
            let mut acc = logits.row_mut(bi);
            for i in bi * group..(bi + 1) * group {
                acc.scaled_add(final_attn.scores[i] * inv_n, &projected.row(i));
            }
        }
        let mut probs = Array2::zeros((b, c));
        for (l, mut pr) in logits.rows().into_iter().zip(probs.rows_mut()) {
            softmax_into(
                l.as_slice().expect("contiguous"),
                pr.as_slice_mut().expect("contiguous"),
            );
        }

        Ok(BatchForward {
            batch: b,
            epoch,
            probs,
            logits,
            stats,
            block_rows,
            windows,
            embedded,
            blocks,
            output,
            final_attn,
            projected,
        })
    }

    /// Loss of a forward pass against `labels`.
    pub fn loss(&self, fwd: &BatchForward<S>, labels: &[usize], lambda: f64) -> Result<LossParts> {
        total_loss(fwd.probs.view(), labels, &fwd.stats, lambda)
    }

    /// Gradients of the total loss with respect to every parameter.
    pub fn backward(&self, fwd: &BatchForward<S>, labels: &[usize], lambda: f64) -> Result<(Params<S>, LossParts)> {
        let loss = self.loss(fwd, labels, lambda)?;
        let cfg = &self.config;
        let p = &self.params;
        let mut g = p.zeros_like();
        let b = fwd.batch;
        let lam = S::lit(lambda);
        let inv_b = S::one() / S::lit(b as f64);
        let clamp = S::lit(CE_CLAMP);

        let mut dlogits = fwd.probs.clone();
        for (bi, &y) in labels.iter().enumerate() {
            let mut row = dlogits.row_mut(bi);
            if fwd.probs[[bi, y]] < clamp {
                row.fill(S::zero());
                continue;
            }
            row[y] -= S::one();
            row.mapv_inplace(|v| v * inv_b);
        }

        let (_, gi) = cv_squared_with_grad(&fwd.stats.importance);
        let (_, gl) = cv_squared_with_grad(&fwd.stats.soft_load);
        let d_imp: Vec<S> = gi.into_iter().map(|v| v * lam).collect();
        let d_load: Vec<S> = gl.into_iter().map(|v| v * lam).collect();

        // Pooling.
        let group = *fwd.block_rows.last().expect("depth >= 1");
        let inv_n = S::one() / S::lit(group as f64);
        let mut dproj = Array2::zeros(fwd.projected.raw_dim());
        let mut dscores = Array1::zeros(fwd.final_attn.scores.len());
        for bi in 0..b {
            let dl = dlogits.row(bi);
            for i in bi * group..(bi + 1) * group {
                let s = fwd.final_attn.scores[i];
                dproj.row_mut(i).assign(&dl.mapv(|v| v * s * inv_n));
                dscores[i] = dl.dot(&fwd.projected.row(i)) * inv_n;
            }
        }
        g.classifier.weight += &dproj.t().dot(&fwd.output);
        g.classifier.bias += &dproj.sum_axis(Axis(0));
        let mut dout = dproj.dot(&p.classifier.weight);
        dout += &score_rows_backward(
            fwd.output.view(),
            &fwd.final_attn,
            dscores.view(),
            &p.attention,
            &mut g.attention,
        );

        for (l, bc) in fwd.blocks.iter().enumerate().rev() {
            let mut dpre = dout;
            for (dv, &u) in dpre.iter_mut().zip(&bc.pre) {
                *dv *= gelu_grad(u);
            }
            let mut dsparse = dpre.clone();
            if let Some((_, cache)) = &bc.moe {
                dsparse += &moe_backward(
                    bc.sparse.view(),
                    cache,
                    dpre.view(),
                    &d_imp,
                    &d_load,
                    &p.router,
                    &p.experts,
                    &mut g.router,
                    &mut g.experts,
                );
            }
            if let Some((_, cache)) = &bc.inter {
                dsparse += &inter_backward(bc.sparse.view(), cache, dpre.view(), &p.shared, &mut g.shared);
            }
            let (gin, gout) = (bc.in_group, bc.out_group);
            let mut dnormed = Array2::zeros(bc.normed.raw_dim());
            let mut dalpha = Array1::zeros(bc.attn.scores.len());
            for (bi, sel) in bc.selections.iter().enumerate() {
                let (dr, ds) = apply_selection_backward(
                    bc.normed.slice(s![bi * gin..(bi + 1) * gin, ..]),
                    bc.attn.scores.slice(s![bi * gin..(bi + 1) * gin]),
                    sel,
                    dsparse.slice(s![bi * gout..(bi + 1) * gout, ..]),
                );
                dnormed.slice_mut(s![bi * gin..(bi + 1) * gin, ..]).assign(&dr);
                dalpha.slice_mut(s![bi * gin..(bi + 1) * gin]).assign(&ds);
            }
            dnormed += &score_rows_backward(bc.normed.view(), &bc.attn, dalpha.view(), &p.attention, &mut g.attention);
            dout = norm_backward(&bc.norm, dnormed.view(), &p.norms[l], &mut g.norms[l]);
            debug_assert_eq!(bc.input.nrows(), dout.nrows());
        }
        let j = cfg.shape_count();
        embed_backward(&fwd.windows, dout.view(), &p.embed, &mut g.embed, j);
        Ok((g, loss))
    }

    /// Runs one block on a single sample's rows.
    pub fn block_forward(&self, shapes: ArrayView2<S>, block: usize, epoch: usize) -> Result<Array2<S>> {
        if shapes.nrows() == 0 {
            return Err(Error::Dimension("block input needs at least one row".into()));
        }
        if shapes.ncols() != self.config.shape.d {
            return Err(Error::Dimension(format!(
                "block input width {} does not match {}",
                shapes.ncols(),
                self.config.shape.d
            )));
        }
        if block >= self.config.depth {
            return Err(Error::Config(format!("block {block} beyond depth {}", self.config.depth)));
        }
        let mut stats = GateStats::new(self.config.num_experts);
        let (out, _) = self.block_step(shapes.to_owned(), shapes.nrows(), block, epoch, None, &mut stats);
        Ok(out)
    }

    /// Final rows and their attention scores for one series.
    pub fn model_forward(&self, series: &[S], epoch: usize) -> Result<(Array2<S>, Array1<S>)> {
        let f = self.forward_batch(&[series], epoch, None)?;
        Ok((f.output.clone(), f.final_attn.scores.clone()))
    }

    pub fn predict_proba(&self, series: &[S], epoch: usize) -> Result<Vec<S>> {
        let f = self.forward_batch(&[series], epoch, None)?;
        Ok(f.probs.row(0).to_vec())
    }

    pub fn trace(&self, series: &[S], epoch: usize) -> Result<SampleTrace<S>> {
        let f = self.forward_batch(&[series], epoch, None)?;
        let mut provenance: Vec<Option<usize>> = (0..self.config.shape_count()).map(Some).collect();
        for bc in &f.blocks {
            let sel = &bc.selections[0];
            let mut next: Vec<Option<usize>> = sel.kept.iter().map(|&k| provenance[k]).collect();
            if sel.fused {
                next.push(None);
            }
            provenance = next;
        }
        let last = f.blocks.last().expect("depth >= 1");
        Ok(SampleTrace {
            embeddings: f.embedded.clone(),
            block_scores: f.blocks.iter().map(|b| b.attn.scores.clone()).collect(),
            selections: f.blocks.iter().map(|b| b.selections[0].clone()).collect(),
            intra: last.moe.as_ref().map(|(m, _)| m.clone()),
            inter: last.inter.as_ref().map(|(o, _)| o.clone()),
            output: f.output.clone(),
            final_scores: f.final_attn.scores.clone(),
            provenance,
            probs: f.probs.row(0).to_vec(),
        })
    }
}

/// `softmax((1/Num) Σ_i score_i · (φ O_i + bias))`.
pub fn conjunctive_pool<S: Scalar>(rows: ArrayView2<S>, scores: ArrayView1<S>, classifier: &Classifier<S>) -> Result<Vec<S>> {
    if rows.nrows() == 0 || rows.nrows() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} rows with {} scores",
            rows.nrows(),
            scores.len()
        )));
    }
    if rows.ncols() != classifier.weight.ncols() {
        return Err(Error::Dimension("classifier width mismatch".into()));
    }
    let n = S::lit(rows.nrows() as f64);
    let mut logits = Array1::<S>::zeros(classifier.bias.len());
    for (r, &s) in rows.rows().into_iter().zip(scores) {
        let proj = classifier.weight.dot(&r) + &classifier.bias;
        logits.scaled_add(s / n, &proj);
    }
    let mut out = vec![S::zero(); logits.len()];
    softmax_into(logits.as_slice().expect("contiguous"), &mut out);
    Ok(out)
}

/// `L_ce + λ (L_imp + L_load)` with clamped log.
pub fn total_loss<S: Scalar>(probs: ArrayView2<S>, labels: &[usize], stats: &GateStats<S>, lambda: f64) -> Result<LossParts> {
    if probs.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let classes = probs.ncols();
    let mut ce = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        ce -= row[y].to_f64_lossy().clamp(CE_CLAMP, 1.0).ln();
    }
    ce /= labels.len() as f64;
    let (imp, load) = if stats.routed > 0 {
        (
            cv_squared_with_grad(&stats.importance).0.to_f64_lossy(),
            cv_squared_with_grad(&stats.soft_load).0.to_f64_lossy(),
        )
    } else {
        (0.0, 0.0)
    };
    Ok(LossParts::compose(ce, imp, load, lambda))
}

pub type SoftShape32 = SoftShape<f32>;
pub type SoftShape64 = SoftShape<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_score;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(depth: usize) -> ModelConfig {
        let mut c = ModelConfig::new(ShapeConfig::new(8, 4, 8, 20).unwrap(), 3);
        c.depth = depth;
        c.warmup_epochs = 2;
        c
    }

    fn series(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..t).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    fn layer_norm_oracle(x: &[f64], scale: &[f64], offset: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * scale[i] + offset[i])
            .collect()
    }

    #[test]
    fn bare_block_is_gelu_of_scaled_norm() {
        let mut cfg = tiny_config(1);
        cfg.ablation.no_intra = true;
        cfg.ablation.no_inter = true;
        cfg.eta = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = SoftShape::<f64>::new(cfg, &mut rng).unwrap();
        model.params.norms[0].scale.mapv_inplace(|_| rng.random_range(0.5..1.5));
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        for epoch in [0, 10] {
            let out = model.block_forward(x.view(), 0, epoch).unwrap();
            assert_eq!(out.nrows(), 5);
            let ln = &model.params.norms[0];
            for (r, o) in x.rows().into_iter().zip(out.rows()) {
                let y = layer_norm_oracle(r.as_slice().unwrap(), ln.scale.as_slice().unwrap(), ln.offset.as_slice().unwrap());
                let a = attention_score(&y, &model.params.attention).unwrap();
                for (yv, ov) in y.iter().zip(o) {
                    assert!((gelu(a * yv) - ov).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warmup_keeps_rows_then_sparsifies() {
        let mut cfg = ModelConfig::new(ShapeConfig::new(64, 4, 8, 275).unwrap(), 4);
        cfg.warmup_epochs = 150;
        assert_eq!(cfg.shape_count(), 53);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SoftShape::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let x = Array2::from_shape_fn((53, 8), |(i, j)| (i as f64 - j as f64 * 0.5).cos());
        assert_eq!(model.block_forward(x.view(), 0, 149).unwrap().nrows(), 53);
        assert_eq!(model.block_forward(x.view(), 0, 150).unwrap().nrows(), 27);
        assert_eq!(cfg.block_output_counts(150), vec![27, 14]);
        assert_eq!(cfg.block_output_counts(0), vec![53, 53]);
        let s = series(&mut rng, 1, 275).pop().unwrap();
        let (o, sc) = model.model_forward(&s, 200).unwrap();
        assert_eq!((o.nrows(), sc.len()), (14, 14));
        assert!(o.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_model_outputs_zero_rows_half_scores() {
        let mut cfg = tiny_config(1);
        cfg.eta = 1.0;
        let model = SoftShape::<f64>::zeros(cfg).unwrap();
        let s: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let (o, sc) = model.model_forward(&s, 5).unwrap();
        assert!(o.iter().all(|&v| v == 0.0));
        assert!(sc.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shared_instances_across_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SoftShape::<f64>::new(tiny_config(3), &mut rng).unwrap();
        assert!(std::ptr::eq(model.attention_for_block(0), model.attention_for_block(2)));
        assert!(std::ptr::eq(model.experts_for_block(0), model.experts_for_block(1)));
        assert_eq!(model.params.norms.len(), 3);
    }

    #[test]
    fn pool_single_row_unit_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cls = Classifier {
            weight: uniform2::<f64, _>(&mut rng, 3, 4, 1.0),
            bias: uniform1::<f64, _>(&mut rng, 3, 1.0),
        };
        let o = Array2::from_shape_vec((1, 4), vec![0.2, -0.4, 1.0, 0.3]).unwrap();
        let p = conjunctive_pool(o.view(), ArrayView1::from(&[1.0]), &cls).unwrap();
        let logits = cls.weight.dot(&o.row(0)) + &cls.bias;
        let expect = crate::scalar::softmax(logits.as_slice().unwrap());
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn pool_identical_rows() {
        let cls = Classifier {
            weight: Array2::from_shape_vec((2, 2), vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            bias: Array1::from(vec![0.1, -0.2]),
        };
        let o = Array2::from_shape_vec((3, 2), vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]).unwrap();
        let s = 0.4;
        let p = conjunctive_pool(o.view(), ArrayView1::from(&[s, s, s]), &cls).unwrap();
        let logits: Vec<f64> = (cls.weight.dot(&o.row(0)) + &cls.bias).iter().map(|v| s * v).collect();
        let expect = crate::scalar::softmax(&logits);
        assert!((p[0] - expect[0]).abs() < 1e-14 && (p[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn loss_examples() {
        let stats = GateStats::<f64>::new(2);
        let onehot = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_loss(onehot.view(), &[0, 2], &stats, 0.001).unwrap().ce, 0.0);
        let uniform = Array2::from_elem((3, 4), 0.25);
        let l = total_loss(uniform.view(), &[0, 1, 3], &stats, 0.0).unwrap();
        assert!((l.ce - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l.total, l.ce);
        assert!(matches!(
            total_loss(uniform.view(), &[0, 1, 4], &stats, 0.0),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
        // A zero true-class probability is clamped, not infinite.
        let l = total_loss(onehot.view(), &[1, 2], &stats, 0.0).unwrap();
        assert!((l.ce - (-(1e-12f64).ln() / 2.0)).abs() < 1e-9);
    }

    /// Norm-wise relative error of every parameter tensor against central
    /// differences, with discrete choices replayed from the unperturbed pass.
    fn gradient_errors(model: &SoftShape<f64>, batch: &[Vec<f64>], labels: &[usize], epoch: usize, lambda: f64) -> Vec<(String, f64)> {
        let views: Vec<&[f64]> = batch.iter().map(|s| s.as_slice()).collect();
        let fwd = model.forward_batch(&views, epoch, None).unwrap();
        let routes = fwd.routes();
        let (grads, _) = model.backward(&fwd, labels, lambda).unwrap();
        let loss_at = |m: &SoftShape<f64>| {
            let f = m.forward_batch(&views, epoch, Some(&routes)).unwrap();
            m.loss(&f, labels, lambda).unwrap().total
        };
        let h = 1e-6;
        let mut probe = model.clone();
        let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
        let mut out = Vec::new();
        for (ti, name) in names.iter().enumerate() {
            let analytic = grads.tensors()[ti].1.to_vec();
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = probe.params.tensors()[ti].1[i];
                probe.params.tensors_mut()[ti].1[i] = orig + h;
                let lp = loss_at(&probe);
                probe.params.tensors_mut()[ti].1[i] = orig - h;
                let lm = loss_at(&probe);
                probe.params.tensors_mut()[ti].1[i] = orig;
                *slot = (lp - lm) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            out.push((name.clone(), diff / na.max(nn).max(1e-7)));
        }
        out
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = SoftShape::<f64>::new(tiny_config(1), &mut rng).unwrap();
        let batch = series(&mut rng, 3, 20);
        for epoch in [0, 5] {
            for (name, err) in gradient_errors(&model, &batch, &[0, 2, 1], epoch, 1.0) {
                assert!(err < 1e-4, "epoch {epoch} {name}: {err:e}");
            }
        }
    }

    #[test]
    fn deep_ablated_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = tiny_config(2);
        cfg.ablation.no_soft_sparse = true;
        cfg.ablation.linear_embed = true;
        cfg.k = 2;
        cfg.inter_bottleneck = false;
        let model = SoftShape::<f64>::new(cfg, &mut rng).unwrap();
        let batch = series(&mut rng, 2, 20);
        for (name, err) in gradient_errors(&model, &batch, &[1, 0], 5, 0.5) {
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }

    #[test]
    fn trace_provenance_follows_selection() {
        let mut cfg = ModelConfig::new(ShapeConfig::new(8, 4, 8, 60).unwrap(), 2);
        cfg.warmup_epochs = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = SoftShape::<f64>::new(cfg, &mut rng).unwrap();
        let s = series(&mut rng, 1, 60).pop().unwrap();
        let tr = model.trace(&s, 1).unwrap();
        assert_eq!(tr.embeddings.nrows(), 14);
        assert_eq!(tr.provenance.len(), tr.output.nrows());
        assert_eq!(tr.provenance.last(), Some(&None));
        let first = &tr.selections[0];
        let second = &tr.selections[1];
        for (row, &k) in second.kept.iter().enumerate() {
            let expect = first.kept.get(k).copied();
            assert_eq!(tr.provenance[row], expect);
        }
    }

    proptest! {
        #[test]
        fn pooled_probabilities_sum_to_one(seed in any::<u64>(), num in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cls = Classifier {
                weight: uniform2::<f64, _>(&mut rng, 4, 3, 3.0),
                bias: uniform1::<f64, _>(&mut rng, 4, 3.0),
            };
            let o = uniform2::<f64, _>(&mut rng, num, 3, 5.0);
            let sc: Vec<f64> = (0..num).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = conjunctive_pool(o.view(), ArrayView1::from(&sc), &cls).unwrap();
            // Direct double loop over the pooling sum.
            let mut logits = [0.0; 4];
            for c in 0..4 {
                for i in 0..num {
                    let mut z = cls.bias[c];
                    for j in 0..3 {
                        z += cls.weight[[c, j]] * o[[i, j]];
                    }
                    logits[c] += sc[i] * z / num as f64;
                }
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in p.iter().zip(&e) {
                prop_assert!((a - b / z).abs() < 1e-6);
            }
        }

        #[test]
        fn batch_matches_single_sample(seed in any::<u64>(), epoch in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = SoftShape::<f64>::new(tiny_config(2), &mut rng).unwrap();
            let batch = series(&mut rng, 3, 20);
            let views: Vec<&[f64]> = batch.iter().map(|s| s.as_slice()).collect();
            let f = model.forward_batch(&views, epoch, None).unwrap();
            for (b, s) in batch.iter().enumerate() {
                let p = model.predict_proba(s, epoch).unwrap();
                for c in 0..3 {
                    prop_assert!((p[c] - f.probs[[b, c]]).abs() < 1e-12);
                }
            }
        }
    }
}

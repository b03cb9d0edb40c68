//! Optimisation loop, evaluation, and validation-driven window selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_size, Prepared, TimeSeriesRecord};
use crate::embedding::ShapeConfig;
use crate::error::{Error, Result};
use crate::inter::DEFAULT_KERNELS;
use crate::model::{argmax, Ablation, LossParts, ModelConfig, SoftShape, CE_CLAMP};
use crate::moe::{utilization, ExpertUtilization, GateStats};
use crate::params::ParamGroup;
use crate::scalar::Scalar;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fixed window length; chosen on the validation split when absent.
    pub m: Option<usize>,
    /// Overrides the default candidate list used for window selection.
    pub m_candidates: Option<Vec<usize>>,
    pub q: usize,
    pub d: usize,
    pub d_attn: usize,
    pub eta: f64,
    pub k: usize,
    /// Number of experts; defaults to the class count.
    pub c_hat: Option<usize>,
    pub depth: usize,
    pub lambda: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Overrides the size-derived batch size.
    pub batch_size: Option<usize>,
    pub inter_kernels: Vec<usize>,
    pub inter_bottleneck: bool,
    pub no_soft_sparse: bool,
    pub no_intra: bool,
    pub no_inter: bool,
    pub linear_embed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: None,
            m_candidates: None,
            q: 4,
            d: 32,
            d_attn: 8,
            eta: 0.5,
            k: 1,
            c_hat: None,
            depth: 2,
            lambda: 0.001,
            lr: 0.001,
            max_epochs: 500,
            warmup_epochs: 150,
            patience: 50,
            seed: 0,
            batch_size: None,
            inter_kernels: DEFAULT_KERNELS.to_vec(),
            inter_bottleneck: true,
            no_soft_sparse: false,
            no_intra: false,
            no_inter: false,
            linear_embed: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta = {} outside (0, 1]", self.eta));
        }
        if self.warmup_epochs > self.max_epochs {
            return bad(format!(
                "warmup_epochs {} exceeds max_epochs {}",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.q < 1 || self.d < 1 || self.d_attn < 1 || self.k < 1 {
            return bad("q, d, d_attn and k must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return bad("lr must be positive and lambda non-negative".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_soft_sparse: self.no_soft_sparse,
            no_intra: self.no_intra,
            no_inter: self.no_inter,
            linear_embed: self.linear_embed,
        }
    }

    pub fn model_config(&self, m: usize, series_len: usize, num_classes: usize) -> Result<ModelConfig> {
        let shape = ShapeConfig::new(m, self.q, self.d, series_len)?;
        let mc = ModelConfig {
            shape,
            num_classes,
            num_experts: self.c_hat.unwrap_or(num_classes),
            k: self.k,
            depth: self.depth,
            d_attn: self.d_attn,
            eta: self.eta,
            warmup_epochs: self.warmup_epochs,
            ablation: self.ablation(),
            inter_kernels: self.inter_kernels.clone(),
            inter_bottleneck: self.inter_bottleneck,
        };
        mc.validate()?;
        Ok(mc)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<S>>,
    pub second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<P: ParamGroup<S>>(params: &P, lr: f64) -> Self {
        let shapes: Vec<Vec<S>> = params.tensors().iter().map(|(_, t)| vec![S::zero(); t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.clone(),
            second: shapes,
        }
    }

    pub fn update<P: ParamGroup<S>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let lr = S::lit(self.lr);
        let eps = S::lit(self.eps);
        let one = S::one();
        let gs = grads.tensors();
        for ((((_, p), (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// A trained network plus the epoch whose regime it was selected in.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    pub model: SoftShape<S>,
    /// Epoch at which these parameters were recorded; evaluation uses its
    /// sparsification regime.
    pub epoch: usize,
    pub optimizer: Adam<S>,
}

impl<S: Scalar> ModelState<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub ce: f64,
    pub imp: f64,
    pub load: f64,
    /// Rows per sample leaving each block.
    pub shape_counts: Vec<usize>,
    pub utilization: Vec<ExpertUtilization>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub state: ModelState<S>,
    pub metrics: Vec<EpochMetrics>,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
}

/// Series and labels converted to the working precision.
#[derive(Debug, Clone)]
pub struct Samples<S> {
    pub series: Vec<Vec<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Samples<S> {
    pub fn from_records(records: &[&TimeSeriesRecord]) -> Self {
        Self {
            series: records
                .iter()
                .map(|r| r.values.iter().map(|&v| S::lit(v)).collect())
                .collect(),
            labels: records.iter().map(|r| r.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy and accuracy of `model` on `samples` at `epoch`.
pub fn score_samples<S: Scalar>(model: &SoftShape<S>, samples: &Samples<S>, epoch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    let mut ce = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let views: Vec<&[S]> = chunk.iter().map(|&i| samples.series[i].as_slice()).collect();
        let fwd = model.forward_batch(&views, epoch, None)?;
        for (row, &i) in fwd.probs.rows().into_iter().zip(chunk) {
            let y = samples.labels[i];
            if y >= row.len() {
                return Err(Error::LabelOutOfRange { label: y, classes: row.len() });
            }
            ce -= row[y].to_f64_lossy().clamp(CE_CLAMP, 1.0).ln();
            if argmax(row.as_slice().expect("contiguous")) == y {
                correct += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok((ce / n, correct as f64 / n))
}

/// Predicted class per sample.
pub fn predict<S: Scalar>(state: &ModelState<S>, samples: &Samples<S>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.series.chunks(EVAL_CHUNK) {
        let views: Vec<&[S]> = chunk.iter().map(|s| s.as_slice()).collect();
        out.extend(state.model.forward_batch(&views, state.epoch, None)?.predictions());
    }
    Ok(out)
}

/// Accuracy in `[0, 1]` on preprocessed records.
pub fn evaluate<S: Scalar>(state: &ModelState<S>, records: &[&TimeSeriesRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no records to evaluate".into()));
    }
    let samples = Samples::from_records(records);
    let preds = predict(state, &samples)?;
    let correct = preds.iter().zip(&samples.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Trains with window length `m` on the prepared splits.
pub fn train_with_m<S: Scalar>(data: &Prepared, cfg: &TrainConfig, m: usize) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let ds = &data.dataset;
    if data.split.train.is_empty() {
        return Err(Error::EmptyDataset("empty training split".into()));
    }
    if data.split.val.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let train = Samples::<S>::from_records(&ds.subset(&data.split.train));
    let val = Samples::<S>::from_records(&ds.subset(&data.split.val));
    let mc = cfg.model_config(m, ds.series_length, ds.num_classes)?;
    fit(mc, cfg, &train, &val)
}

/// Core loop over already converted samples.
pub fn fit<S: Scalar>(mc: ModelConfig, cfg: &TrainConfig, train: &Samples<S>, val: &Samples<S>) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SoftShape::<S>::new(mc, &mut rng)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let bs = cfg.batch_size.unwrap_or_else(|| batch_size(train.len()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, f64, ModelState<S>)> = None;
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        let mut stats = GateStats::<S>::new(model.config.num_experts);
        for chunk in order.chunks(bs) {
            let views: Vec<&[S]> = chunk.iter().map(|&i| train.series[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let fwd = model.forward_batch(&views, epoch, None)?;
            let (grads, loss) = model.backward(&fwd, &labels, cfg.lambda)?;
            adam.update(&mut model.params, &grads);
            sums[0] += loss.ce;
            sums[1] += loss.imp;
            sums[2] += loss.load;
            batches += 1;
            stats.merge(&fwd.stats);
        }
        let nb = batches as f64;
        let parts = LossParts::compose(sums[0] / nb, sums[1] / nb, sums[2] / nb, cfg.lambda);
        let (val_loss, val_acc) = score_samples(&model, val, epoch)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: parts.total,
            val_loss,
            val_accuracy: val_acc,
            ce: parts.ce,
            imp: parts.imp,
            load: parts.load,
            shape_counts: model.config.block_output_counts(epoch),
            utilization: utilization(&stats),
        });
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best_epoch = epoch;
            best = Some((
                val_loss,
                val_acc,
                ModelState {
                    model: model.clone(),
                    epoch,
                    optimizer: adam.clone(),
                },
            ));
        }
        // Patience is counted only once the sparse regime is active.
        if epoch >= cfg.warmup_epochs && epoch - best_epoch.max(cfg.warmup_epochs) >= cfg.patience {
            break;
        }
    }
    let (best_val_loss, best_val_accuracy, state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        state,
        metrics,
        best_val_loss,
        best_val_accuracy,
    })
}

/// Candidate window lengths for a series of length `t` and stride `q`.
pub fn shape_candidates(t: usize, q: usize) -> Vec<usize> {
    let mut c = vec![4, 8, 16, 24, 32, 48, 64, t / 10, t * 8 / 10];
    c.retain(|&m| m >= 2 && m < t && m >= q);
    c.sort_unstable();
    c.dedup();
    c
}

#[derive(Debug, Clone)]
pub struct ShapeSelection<S> {
    pub m: usize,
    /// `(m, best validation accuracy)` per candidate, ascending in `m`.
    pub scores: Vec<(usize, f64)>,
    pub outcome: TrainOutcome<S>,
}

/// Trains every candidate and keeps the best validation accuracy (ties go
/// to the smaller window).
pub fn select_shape_length_full<S: Scalar>(data: &Prepared, cfg: &TrainConfig) -> Result<ShapeSelection<S>> {
    let t = data.dataset.series_length;
    let cands = match &cfg.m_candidates {
        Some(list) => {
            let mut c: Vec<usize> = list.iter().copied().filter(|&m| m >= 2 && m < t && m >= cfg.q).collect();
            c.sort_unstable();
            c.dedup();
            c
        }
        None => shape_candidates(t, cfg.q),
    };
    if cands.is_empty() {
        return Err(Error::NoCandidates { t, q: cfg.q });
    }
    let mut scores = Vec::with_capacity(cands.len());
    let mut best: Option<(usize, TrainOutcome<S>)> = None;
    for &m in &cands {
        let out = train_with_m::<S>(data, cfg, m)?;
        scores.push((m, out.best_val_accuracy));
        if best.as_ref().is_none_or(|(_, b)| out.best_val_accuracy > b.best_val_accuracy) {
            best = Some((m, out));
        }
    }
    let (m, outcome) = best.expect("non-empty candidates");
    Ok(ShapeSelection { m, scores, outcome })
}

pub fn select_shape_length<S: Scalar>(data: &Prepared, cfg: &TrainConfig) -> Result<usize> {
    Ok(select_shape_length_full::<S>(data, cfg)?.m)
}

/// Trains with the configured window, or selects one on validation.
pub fn train<S: Scalar>(data: &Prepared, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    match cfg.m {
        Some(m) => train_with_m(data, cfg, m),
        None => Ok(select_shape_length_full(data, cfg)?.outcome),
    }
}

/// Default sparse ratios for [`sweep_eta`]; the keep fraction is `1 − ratio`.
pub const SPARSE_RATIOS: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];

/// A finished training run with its test accuracy.
#[derive(Debug, Clone)]
pub struct RunResult<S> {
    pub m: usize,
    /// Validation accuracy per candidate window (empty when `m` was fixed).
    pub m_scores: Vec<(usize, f64)>,
    pub outcome: TrainOutcome<S>,
    pub test_accuracy: f64,
}

/// Selects or fixes `m`, trains, then scores the test split.
pub fn run<S: Scalar>(data: &Prepared, cfg: &TrainConfig) -> Result<RunResult<S>> {
    let (m, m_scores, outcome) = match cfg.m {
        Some(m) => (m, Vec::new(), train_with_m(data, cfg, m)?),
        None => {
            let sel = select_shape_length_full(data, cfg)?;
            (sel.m, sel.scores, sel.outcome)
        }
    };
    let test = data.dataset.subset(&data.split.test);
    let test_accuracy = evaluate(&outcome.state, &test)?;
    Ok(RunResult {
        m,
        m_scores,
        outcome,
        test_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparse_ratio: f64,
    pub eta: f64,
    pub m: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub final_shapes: usize,
}

/// Trains once per sparse ratio. An unset `m` is selected once, with the
/// configured `eta`, and reused for every ratio.
pub fn sweep_eta<S: Scalar>(data: &Prepared, cfg: &TrainConfig, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    for &r in ratios {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("sparse ratio {r} outside [0, 1)")));
        }
    }
    let m = match cfg.m {
        Some(m) => m,
        None => select_shape_length::<S>(data, cfg)?,
    };
    ratios
        .iter()
        .map(|&ratio| {
            let eta = 1.0 - ratio;
            let c = TrainConfig {
                m: Some(m),
                eta,
                ..cfg.clone()
            };
            let r = run::<S>(data, &c)?;
            Ok(SweepRow {
                sparse_ratio: ratio,
                eta,
                m,
                val_accuracy: r.outcome.best_val_accuracy,
                test_accuracy: r.test_accuracy,
                best_epoch: r.outcome.state.epoch,
                final_shapes: *r.outcome.state.config().block_output_counts(r.outcome.state.epoch).last().expect("depth >= 1"),
            })
        })
        .collect()
}

//! Interpretability exports: timestep attention maps and per-stage shape
//! embeddings.

use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::ModelState;

/// Spreads per-shape scores over the timesteps each window covers; a
/// timestep's value is the mean over covering windows, `None` if uncovered.
pub fn timestep_scores(scores: &[f64], m: usize, q: usize, t: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; t];
    let mut count = vec![0usize; t];
    for (j, &s) in scores.iter().enumerate() {
        let start = j * q;
        for ts in start..(start + m).min(t) {
            sum[ts] += s;
            count[ts] += 1;
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `(timestep, input value, score)`.
    pub rows: Vec<(usize, f64, Option<f64>)>,
    /// Score the fused row received where it was next scored.
    pub fused_score: Option<f64>,
}

/// First-block attention mapped back onto `series` (already preprocessed).
pub fn attention_map<S: Scalar>(state: &ModelState<S>, series: &[S]) -> Result<AttentionMap> {
    let cfg = state.config();
    let tr = state.model.trace(series, state.epoch)?;
    let first: Vec<f64> = tr.block_scores[0].iter().map(|v| v.to_f64_lossy()).collect();
    let per_t = timestep_scores(&first, cfg.shape.m, cfg.shape.q, series.len());
    let rows = series
        .iter()
        .zip(per_t)
        .enumerate()
        .map(|(t, (v, s))| (t, v.to_f64_lossy(), s))
        .collect();
    let fused_score = if tr.selections[0].fused {
        let next = tr.block_scores.get(1).unwrap_or(&tr.final_scores);
        next.iter().last().map(|v| v.to_f64_lossy())
    } else {
        None
    };
    Ok(AttentionMap { rows, fused_score })
}

pub fn write_attention<W: Write>(out: W, map: &AttentionMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestep", "value", "score"])?;
    for (t, v, s) in &map.rows {
        w.write_record([t.to_string(), v.to_string(), s.map_or(String::new(), |x| x.to_string())])?;
    }
    if let Some(s) = map.fused_score {
        w.write_record(["fused".to_string(), String::new(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<attention>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Embedding-layer output.
    Input,
    /// Mixture-of-experts term of the last block.
    Intra,
    /// Shared-expert term of the last block.
    Inter,
    /// Final rows fed to pooling.
    Output,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Stage::Input),
            "intra" => Ok(Stage::Intra),
            "inter" => Ok(Stage::Inter),
            "output" => Ok(Stage::Output),
            other => Err(Error::UnknownStage(other.to_string())),
        }
    }
}

/// Rows of one sample at `stage`, each tagged with its originating shape
/// (`None` for a fused row).
pub fn stage_rows<S: Scalar>(state: &ModelState<S>, series: &[S], stage: Stage) -> Result<(Vec<Option<usize>>, Array2<S>)> {
    let tr = state.model.trace(series, state.epoch)?;
    let disabled = |name: &str| Error::Config(format!("{name} stage is disabled in this model"));
    Ok(match stage {
        Stage::Input => ((0..tr.embeddings.nrows()).map(Some).collect(), tr.embeddings),
        Stage::Intra => (tr.provenance, tr.intra.ok_or_else(|| disabled("intra"))?),
        Stage::Inter => (tr.provenance, tr.inter.ok_or_else(|| disabled("inter"))?),
        Stage::Output => (tr.provenance, tr.output),
    })
}

/// One CSV row per (sample, shape) of a preprocessed dataset.
pub fn write_embeddings<W: Write, S: Scalar>(out: W, state: &ModelState<S>, dataset: &Dataset, stage: Stage) -> Result<()> {
    let d = state.config().shape.d;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "shape".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (i, rec) in dataset.records.iter().enumerate() {
        let series: Vec<S> = rec.values.iter().map(|&v| S::lit(v)).collect();
        let (prov, rows) = stage_rows(state, &series, stage)?;
        let label = dataset.class_labels[rec.label].to_string();
        for (p, r) in prov.iter().zip(rows.rows()) {
            let mut row = vec![
                i.to_string(),
                p.map_or("fused".to_string(), |j| j.to_string()),
                label.clone(),
            ];
            row.extend(r.iter().map(|v| v.to_f64_lossy().to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeriesRecord;
    use crate::embedding::ShapeConfig;
    use crate::model::{ModelConfig, SoftShape};
    use crate::train::Adam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(m: usize, q: usize, t: usize, eta: f64, depth: usize, epoch: usize) -> ModelState<f64> {
        let mut cfg = ModelConfig::new(ShapeConfig::new(m, q, 3, t).unwrap(), 2);
        cfg.eta = eta;
        cfg.depth = depth;
        cfg.warmup_epochs = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = SoftShape::new(cfg, &mut rng).unwrap();
        let optimizer = Adam::new(&model.params, 0.001);
        ModelState { model, epoch, optimizer }
    }

    #[test]
    fn overlapping_windows_average() {
        let s = timestep_scores(&[0.2, 0.6, 0.9], 8, 4, 16);
        assert!((s[5].unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(s[0], Some(0.2));
        assert!((s[9].unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(s[15], Some(0.9));
        assert_eq!(timestep_scores(&[0.5], 4, 4, 6)[5], None);
    }

    #[test]
    fn partition_case_one_score_per_timestep() {
        let st = state(4, 4, 20, 0.5, 1, 20);
        let series: Vec<f64> = (0..20).map(|t| (t as f64 * 0.3).sin()).collect();
        let map = attention_map(&st, &series).unwrap();
        let tr = st.model.trace(&series, st.epoch).unwrap();
        for (t, v, s) in &map.rows {
            assert_eq!(*v, series[*t]);
            assert_eq!(s.unwrap(), tr.block_scores[0][t / 4]);
            assert!(s.unwrap() > 0.0 && s.unwrap() < 1.0);
        }
        assert!(map.fused_score.is_some());
        let mut buf = Vec::new();
        write_attention(&mut buf, &map).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 22);
        assert!(text.lines().last().unwrap().starts_with("fused,,"));
    }

    #[test]
    fn no_footer_without_fusion() {
        let st = state(4, 4, 20, 0.5, 2, 0);
        let series = vec![0.1; 20];
        assert_eq!(attention_map(&st, &series).unwrap().fused_score, None);
    }

    #[test]
    fn embedding_row_counts() {
        // J = 5 with m = 8, q = 4, T = 24.
        let ds = Dataset {
            name: "two".into(),
            records: (0..2)
                .map(|i| TimeSeriesRecord {
                    values: (0..24).map(|t| (t + i) as f64 * 0.1).collect(),
                    label: i,
                })
                .collect(),
            num_classes: 2,
            series_length: 24,
            class_labels: vec![3.0, 5.0],
        };
        let count = |st: &ModelState<f64>, stage| {
            let mut buf = Vec::new();
            write_embeddings(&mut buf, st, &ds, stage).unwrap();
            let text = String::from_utf8(buf).unwrap();
            for l in text.lines().skip(1) {
                assert_eq!(l.split(',').count(), 3 + 3);
            }
            text.lines().count() - 1
        };
        let sparse = state(8, 4, 24, 0.5, 1, 20);
        assert_eq!(count(&sparse, Stage::Input), 10);
        assert_eq!(count(&sparse, Stage::Output), 6);
        assert_eq!(count(&sparse, Stage::Intra), 6);
        assert_eq!(count(&sparse, Stage::Inter), 6);
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &sparse, &ds, Stage::Output).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(3).unwrap().starts_with("0,fused,3,"));
        assert!(matches!("middle".parse::<Stage>(), Err(Error::UnknownStage(_))));
    }
}

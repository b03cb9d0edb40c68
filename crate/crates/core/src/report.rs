//! CSV and JSON run artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossParts;
use crate::train::EpochMetrics;

/// Per-epoch losses and shape counts. Contains no timing, so identical runs
/// give identical bytes.
pub fn write_metrics<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let blocks = metrics.first().map_or(0, |m| m.shape_counts.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "train_loss", "val_loss", "val_accuracy", "ce", "imp", "load"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..blocks).map(|b| format!("shapes_block{b}")));
    w.write_record(&header)?;
    for m in metrics {
        let mut row = vec![
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.val_loss.to_string(),
            m.val_accuracy.to_string(),
            m.ce.to_string(),
            m.imp.to_string(),
            m.load.to_string(),
        ];
        row.extend(m.shape_counts.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

/// Per-epoch, per-expert routing shares.
pub fn write_experts<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "expert", "importance_share", "hard_load_share"])?;
    for m in metrics {
        for u in &m.utilization {
            w.write_record([
                m.epoch.to_string(),
                u.expert.to_string(),
                u.importance_share.to_string(),
                u.hard_load_share.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<experts>", e))?;
    Ok(())
}

pub fn write_metrics_file(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(f, metrics)
}

pub fn write_experts_file(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_experts(f, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub m: usize,
    /// Validation accuracy per candidate window, when one was selected.
    pub m_scores: Vec<(usize, f64)>,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub lambda: f64,
    /// Training loss decomposition at the selected epoch.
    pub loss: LossParts,
    pub num_params: usize,
    pub wall_time_secs: f64,
}

impl Summary {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::ExpertUtilization;

    fn metric(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 0.5 + epoch as f64,
            val_loss: 0.25,
            val_accuracy: 0.75,
            ce: 0.5,
            imp: 0.125,
            load: 0.0,
            shape_counts: vec![53, 27],
            utilization: vec![
                ExpertUtilization {
                    expert: 0,
                    importance_share: 0.5,
                    hard_load_share: 1.0,
                },
                ExpertUtilization {
                    expert: 1,
                    importance_share: 0.5,
                    hard_load_share: 0.0,
                },
            ],
        }
    }

    #[test]
    fn metrics_layout() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[metric(0), metric(1)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,train_loss,val_loss,val_accuracy,ce,imp,load,shapes_block0,shapes_block1"
        );
        assert_eq!(lines[2], "1,1.5,0.25,0.75,0.5,0.125,0,53,27");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn experts_layout() {
        let mut buf = Vec::new();
        write_experts(&mut buf, &[metric(3)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,expert,importance_share,hard_load_share\n3,0,0.5,1\n3,1,0.5,0\n"
        );
    }
}

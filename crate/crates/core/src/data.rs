//! UCR-format loading, preprocessing and merged 3:1:1 splitting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator guard for z-normalization.
pub const ZNORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRecord {
    /// Observations; `NaN` marks a missing value.
    pub values: Vec<f64>,
    pub label: usize,
}

impl TimeSeriesRecord {
    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<TimeSeriesRecord>,
    pub num_classes: usize,
    pub series_length: usize,
    /// Original file label for each class index, ascending.
    pub class_labels: Vec<f64>,
}

impl Dataset {
    pub fn sample_count(&self) -> usize {
        self.records.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&TimeSeriesRecord> {
        indices.iter().map(|&i| &self.records[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

fn parse_token(tok: &str, line: usize) -> Result<f64> {
    let t = tok.trim();
    if t.eq_ignore_ascii_case("nan") || t == "?" {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| Error::NonNumeric {
        line,
        token: t.to_string(),
    })
}

/// Parses UCR text content. `sep` is the field separator.
pub fn parse_ucr(name: &str, content: &str, sep: char) -> Result<Dataset> {
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(sep)
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() < 2 {
            return Err(Error::TooFewFields { line: lineno });
        }
        let label = parse_token(fields[0], lineno)?;
        if label.is_nan() {
            return Err(Error::NonNumeric {
                line: lineno,
                token: fields[0].to_string(),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| parse_token(f, lineno))
            .collect::<Result<Vec<_>>>()?;
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(name.to_string()));
    }

    // Distinct labels in ascending order define the class index.
    let mut distinct: Vec<f64> = rows.iter().map(|(l, _)| *l).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let index: BTreeMap<u64, usize> = distinct
        .iter()
        .enumerate()
        .map(|(i, l)| (l.to_bits(), i))
        .collect();

    let series_length = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let records = rows
        .into_iter()
        .map(|(l, mut values)| {
            values.resize(series_length, f64::NAN);
            TimeSeriesRecord {
                values,
                label: index[&l.to_bits()],
            }
        })
        .collect();

    Ok(Dataset {
        name: name.to_string(),
        records,
        num_classes: distinct.len(),
        series_length,
        class_labels: distinct,
    })
}

/// Loads a UCR file. Files ending in `.csv` are comma-separated, anything
/// else is tab-separated.
pub fn load_ucr_tsv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sep = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => ',',
        _ => '\t',
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    parse_ucr(&name, &content, sep)
}

/// Per-timestamp mean of observed training values; `0.0` where no
/// training sample is observed.
pub fn timestamp_means(dataset: &Dataset, train_indices: &[usize]) -> Vec<f64> {
    let t = dataset.series_length;
    let mut sum = vec![0.0; t];
    let mut count = vec![0usize; t];
    for &i in train_indices {
        for (k, &v) in dataset.records[i].values.iter().enumerate() {
            if !v.is_nan() {
                sum[k] += v;
                count[k] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

pub fn impute_with_means(dataset: &Dataset, means: &[f64]) -> Dataset {
    let mut out = dataset.clone();
    for r in &mut out.records {
        for (v, &m) in r.values.iter_mut().zip(means) {
            if v.is_nan() {
                *v = m;
            }
        }
    }
    out
}

/// Replaces each missing value with the mean of the observed training
/// values at the same timestamp.
pub fn impute_missing(dataset: &Dataset, train_indices: &[usize]) -> Dataset {
    let means = timestamp_means(dataset, train_indices);
    impute_with_means(dataset, &means)
}

/// Z-normalizes with the population standard deviation.
pub fn znormalize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ZNORM_EPS;
    series.iter().map(|v| (v - mean) / denom).collect()
}

/// Like [`znormalize`] but ignores missing entries, which stay `NaN`.
pub fn znormalize_observed(series: &[f64]) -> Vec<f64> {
    let observed: Vec<f64> = series.iter().copied().filter(|v| !v.is_nan()).collect();
    if observed.is_empty() {
        return series.to_vec();
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ZNORM_EPS;
    series
        .iter()
        .map(|&v| if v.is_nan() { v } else { (v - mean) / denom })
        .collect()
}

/// Shuffles `0..N` under `seed` and cuts it into train/val/test with
/// `|val| = |test| = floor(N/5)`.
pub fn split_merged(dataset: &Dataset, seed: u64) -> Result<SplitSpec> {
    split_indices(dataset.sample_count(), seed)
}

pub fn split_indices(n: usize, seed: u64) -> Result<SplitSpec> {
    if n < 5 {
        return Err(Error::TooFewSamples { need: 5, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let fifth = n / 5;
    let train_len = n - 2 * fifth;
    let test = idx.split_off(train_len + fifth);
    let val = idx.split_off(train_len);
    Ok(SplitSpec {
        train: idx,
        val,
        test,
        seed,
    })
}

pub fn batch_size(n_train: usize) -> usize {
    (n_train / 10).clamp(1, 16)
}

/// Output of [`prepare`]: normalized and imputed data plus the statistics
/// needed to preprocess new data identically.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub impute_means: Vec<f64>,
}

/// Z-normalizes every series over its observed values, then imputes
/// missing entries from the training split.
pub fn prepare(raw: &Dataset, seed: u64) -> Result<Prepared> {
    let split = split_merged(raw, seed)?;
    let mut normalized = raw.clone();
    for r in &mut normalized.records {
        r.values = znormalize_observed(&r.values);
    }
    let impute_means = timestamp_means(&normalized, &split.train);
    let dataset = impute_with_means(&normalized, &impute_means);
    Ok(Prepared {
        dataset,
        split,
        impute_means,
    })
}

/// Applies a stored preprocessing to a raw dataset (evaluation path).
pub fn prepare_with_means(raw: &Dataset, means: &[f64]) -> Result<Dataset> {
    if means.len() != raw.series_length {
        return Err(Error::Dimension(format!(
            "imputation table has {} timestamps, dataset has {}",
            means.len(),
            raw.series_length
        )));
    }
    let mut normalized = raw.clone();
    for r in &mut normalized.records {
        r.values = znormalize_observed(&r.values);
    }
    Ok(impute_with_means(&normalized, means))
}

/// Re-indexes labels against a stored class list.
pub fn align_labels(dataset: &Dataset, class_labels: &[f64]) -> Result<Dataset> {
    let mut out = dataset.clone();
    for r in &mut out.records {
        let raw = dataset.class_labels[r.label];
        r.label = class_labels
            .iter()
            .position(|&c| c.to_bits() == raw.to_bits())
            .ok_or(Error::UnknownLabel(raw))?;
    }
    out.num_classes = class_labels.len();
    out.class_labels = class_labels.to_vec();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(rows: &[(usize, &[f64])]) -> Dataset {
        let t = rows.iter().map(|r| r.1.len()).max().unwrap();
        Dataset {
            name: "t".into(),
            records: rows
                .iter()
                .map(|(l, v)| TimeSeriesRecord {
                    values: v.to_vec(),
                    label: *l,
                })
                .collect(),
            num_classes: 2,
            series_length: t,
            class_labels: vec![0.0, 1.0],
        }
    }

    #[test]
    fn align_labels_against_stored_classes() {
        let d = parse_ucr("a", "3\t1\t2\n7\t0\t1\n", '\t').unwrap();
        let a = align_labels(&d, &[1.0, 3.0, 7.0]).unwrap();
        assert_eq!(a.labels(), vec![1, 2]);
        assert_eq!(a.num_classes, 3);
        assert!(matches!(align_labels(&d, &[3.0]), Err(Error::UnknownLabel(l)) if l == 7.0));
    }

    #[test]
    fn minimal_file() {
        let d = parse_ucr("x", "0\t1.0\t2.0\n", '\t').unwrap();
        assert_eq!((d.sample_count(), d.num_classes, d.series_length), (1, 1, 2));
    }

    #[test]
    fn labels_remapped_by_rank() {
        let d = parse_ucr("x", "5\t1\t2\n1\t1\t2\n3\t0\t0\n5\t2\t2\n", '\t').unwrap();
        // rank of each original label within the sorted distinct set {1,3,5}
        let sorted = [1.0, 3.0, 5.0];
        let expected: Vec<usize> = [5.0, 1.0, 3.0, 5.0]
            .iter()
            .map(|l| sorted.iter().position(|s| s == l).unwrap())
            .collect();
        assert_eq!(d.labels(), expected);
        assert_eq!(d.class_labels, sorted.to_vec());
        assert_eq!(d.num_classes, 3);
    }

    #[test]
    fn short_records_padded_with_missing() {
        let d = parse_ucr("x", "0\t1\t2\t3\n1\t4\n", '\t').unwrap();
        assert_eq!(d.series_length, 3);
        assert_eq!(d.records[1].values[0], 4.0);
        assert!(d.records[1].values[1].is_nan() && d.records[1].values[2].is_nan());
    }

    #[test]
    fn nan_tokens_and_commas() {
        let d = parse_ucr("x", "1,NaN,2\n2,1,?\n", ',').unwrap();
        assert!(d.records[0].values[0].is_nan());
        assert!(d.records[1].values[1].is_nan());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_ucr("x", "", '\t'), Err(Error::EmptyDataset(_))));
        assert!(matches!(parse_ucr("x", "\n\n", '\t'), Err(Error::EmptyDataset(_))));
        assert!(matches!(
            parse_ucr("x", "0\t1\n1\tabc\n", '\t'),
            Err(Error::NonNumeric { line: 2, .. })
        ));
        assert!(matches!(
            parse_ucr("x", "0\n", '\t'),
            Err(Error::TooFewFields { line: 1 })
        ));
    }

    #[test]
    fn imputation_uses_training_mean_per_timestamp() {
        let nan = f64::NAN;
        let d = ds(&[
            (0, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            (1, &[0.0, 0.0, 0.0, 0.0, 0.0, 3.0]),
            (0, &[0.0, 0.0, 0.0, 0.0, 0.0, nan]),
            (1, &[0.0, 0.0, 0.0, 0.0, 0.0, 100.0]),
        ]);
        let out = impute_missing(&d, &[0, 1, 2]);
        assert_eq!(out.records[2].values[5], 2.0);
        assert_eq!(out.records[3].values[5], 100.0);
    }

    #[test]
    fn imputation_zero_fill_when_unobserved() {
        let nan = f64::NAN;
        let d = ds(&[(0, &[1.0, nan]), (1, &[2.0, 5.0])]);
        let out = impute_missing(&d, &[0]);
        assert_eq!(out.records[0].values[1], 0.0);
        assert_eq!(out.records[1].values[1], 5.0);
    }

    #[test]
    fn imputation_identity_without_missing() {
        let d = ds(&[(0, &[1.0, 2.0]), (1, &[3.0, 4.0])]);
        assert_eq!(impute_missing(&d, &[0]), d);
    }

    #[test]
    fn znorm_examples() {
        assert_eq!(znormalize(&[3.0, 3.0, 3.0]), vec![0.0, 0.0, 0.0]);
        let z = znormalize(&[1.0, 2.0, 3.0]);
        let s = (2.0f64 / 3.0).sqrt();
        for (a, b) in z.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!((z[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(200, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (120, 40, 40));
        let s = split_indices(10, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert!(matches!(split_indices(4, 0), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn batch_size_rule() {
        assert_eq!(batch_size(200), 16);
        assert_eq!(batch_size(50), 5);
        assert_eq!(batch_size(5), 1);
        assert_eq!(batch_size(1), 1);
    }

    #[test]
    fn prepare_normalizes_then_imputes() {
        let nan = f64::NAN;
        let rows: Vec<(usize, Vec<f64>)> = (0..10)
            .map(|i| (i % 2, vec![i as f64, 2.0 * i as f64 + 1.0, if i == 3 { nan } else { -(i as f64) }]))
            .collect();
        let d = Dataset {
            name: "p".into(),
            records: rows
                .into_iter()
                .map(|(label, values)| TimeSeriesRecord { values, label })
                .collect(),
            num_classes: 2,
            series_length: 3,
            class_labels: vec![0.0, 1.0],
        };
        let p = prepare(&d, 1).unwrap();
        assert!(p.dataset.records.iter().all(|r| !r.has_missing()));
        let again = prepare_with_means(&d, &p.impute_means).unwrap();
        assert_eq!(again, p.dataset);
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 5usize..400, seed in any::<u64>()) {
            let s = split_indices(n, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.val.len(), n / 5);
            prop_assert_eq!(s.test.len(), n / 5);
        }

        #[test]
        fn znorm_affine_invariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 2..40),
            a in 0.1f64..50.0,
            b in -100.0f64..100.0,
        ) {
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let z = znormalize(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let zs = znormalize(&shifted);
            for (u, v) in z.iter().zip(&zs) {
                prop_assert!((u - v).abs() < 1e-6);
            }
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }

        #[test]
        fn imputation_idempotent(
            vals in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 12),
            train in proptest::collection::vec(0usize..4, 1..4),
        ) {
            let records: Vec<TimeSeriesRecord> = vals
                .chunks(3)
                .enumerate()
                .map(|(i, c)| TimeSeriesRecord {
                    values: c.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
                    label: i % 2,
                })
                .collect();
            let d = Dataset { name: "i".into(), records, num_classes: 2, series_length: 3, class_labels: vec![0.0, 1.0] };
            let once = impute_missing(&d, &train);
            let twice = impute_missing(&once, &train);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn remap_is_bijection(labels in proptest::collection::vec(-20i32..20, 1..30)) {
            let content: String = labels.iter().map(|l| format!("{l}\t1.0\n")).collect();
            let d = parse_ucr("r", &content, '\t').unwrap();
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(d.num_classes, distinct.len());
            for (rec, l) in d.records.iter().zip(&labels) {
                prop_assert_eq!(d.class_labels[rec.label], *l as f64);
                prop_assert!(rec.label < d.num_classes);
            }
        }
    }
}

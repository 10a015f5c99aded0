//! Evaluation of a mapper (or the identity) on one split: fidelity loss,
//! and frozen-classifier cross-entropy and frame accuracy on the mapped
//! features, overall and per SNR bucket.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::models::Model;
use crate::tensor::Tensor;
use crate::training::{classify, cross_entropy, enhance, FeatureSet, Result, TrainError};

pub const WER_CAVEAT: &str =
    "frame accuracy of a frozen classifier is a proxy; no word error rate is computed";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnrBucket {
    pub snr_db: i32,
    pub utterances: usize,
    pub frames: usize,
    pub fidelity: f64,
    pub ce: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub split: String,
    /// `identity` when features were scored unmapped.
    pub mapper: String,
    pub classifier: Option<String>,
    pub utterances: usize,
    pub frames: usize,
    pub fidelity: f64,
    pub ce: Option<f64>,
    pub accuracy: Option<f64>,
    pub per_snr: Vec<SnrBucket>,
    pub note: String,
}

#[derive(Default)]
struct Sums {
    utterances: usize,
    frames: usize,
    sq: f64,
    ce: f64,
    correct: usize,
}

impl Sums {
    fn add(&mut self, mapped: &Tensor, clean: &Tensor, scored: Option<(f64, usize)>) {
        self.utterances += 1;
        self.frames += clean.dims()[0];
        self.sq += mapped
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / clean.dims()[1] as f64;
        if let Some((ce, k)) = scored {
            self.ce += ce;
            self.correct += k;
        }
    }
}

/// Scores `data`. Without a mapper the noisy features are scored as-is;
/// without a classifier only fidelity is reported.
pub fn evaluate(
    mapper: Option<&Model>,
    classifier: Option<&Model>,
    data: &FeatureSet,
    split: &str,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let mut total = Sums::default();
    let mut buckets: BTreeMap<i32, Sums> = BTreeMap::new();
    for u in &data.utterances {
        let mapped = match mapper {
            Some(m) => enhance(m, &u.noisy)?,
            None => u.noisy.clone(),
        };
        let scored = match classifier {
            Some(c) => Some(cross_entropy(&classify(c, &mapped)?, &u.labels)),
            None => None,
        };
        total.add(&mapped, &u.clean, scored);
        buckets
            .entry(u.snr_db)
            .or_default()
            .add(&mapped, &u.clean, scored);
    }
    let has_cls = classifier.is_some();
    let rates = |s: &Sums| {
        let n = s.frames as f64;
        (
            s.sq / n,
            has_cls.then(|| s.ce / n),
            has_cls.then(|| s.correct as f64 / n),
        )
    };
    let (fidelity, ce, accuracy) = rates(&total);
    let per_snr = buckets
        .iter()
        .map(|(&snr_db, s)| {
            let (fidelity, ce, accuracy) = rates(s);
            SnrBucket {
                snr_db,
                utterances: s.utterances,
                frames: s.frames,
                fidelity,
                ce,
                accuracy,
            }
        })
        .collect();
    let describe = |m: &Model| format!("{}/{}", m.role(), m.arch().tag());
    Ok(MetricsReport {
        split: split.to_string(),
        mapper: mapper.map_or_else(|| "identity".to_string(), describe),
        classifier: classifier.map(describe),
        utterances: total.utterances,
        frames: total.frames,
        fidelity,
        ce,
        accuracy,
        per_snr,
        note: WER_CAVEAT.to_string(),
    })
}

impl MetricsReport {
    /// Frame-weighted recombination of the buckets: `(fidelity, ce, accuracy)`.
    pub fn recombine(&self) -> (f64, Option<f64>, Option<f64>) {
        let n: usize = self.per_snr.iter().map(|b| b.frames).sum();
        let avg = |f: &dyn Fn(&SnrBucket) -> Option<f64>| -> Option<f64> {
            self.per_snr
                .iter()
                .map(|b| f(b).map(|v| v * b.frames as f64))
                .sum::<Option<f64>>()
                .map(|s| s / n as f64)
        };
        (
            avg(&|b| Some(b.fidelity)).unwrap_or(f64::NAN),
            avg(&|b| b.ce),
            avg(&|b| b.accuracy),
        )
    }

    /// Spearman correlation between noisiness (negated SNR) and fidelity
    /// loss across buckets; positive when noisier inputs are harder.
    pub fn snr_trend(&self) -> f64 {
        let x: Vec<f64> = self.per_snr.iter().map(|b| -(b.snr_db as f64)).collect();
        let y: Vec<f64> = self.per_snr.iter().map(|b| b.fidelity).collect();
        spearman(&x, &y)
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation with average ranks for ties; NaN for fewer than two
/// points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

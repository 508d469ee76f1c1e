//! Evaluation and representation analysis: accuracy, confusion matrix,
//! expected calibration error, negative log likelihood, patch-wise Pearson
//! profiles, and linear centered kernel alignment.

use serde::Serialize;

use crate::data::ModelData;
use crate::distill::losses::SimilarityMap;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Tensor};
use crate::nn::model::Model;
use crate::nn::ops::softmax_rows;

pub const ECE_BINS: usize = 15;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<usize>>,
    pub ece: f64,
    pub nll: f64,
    pub per_class_recall: Vec<f64>,
    pub samples: usize,
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece_from_predictions(confidences: &[f64], correct: &[bool], bins: usize) -> f64 {
    assert_eq!(confidences.len(), correct.len());
    if confidences.is_empty() {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct.iter()) {
        let idx = ((c * bins as f64) as usize).min(bins - 1);
        count[idx] += 1;
        conf_sum[idx] += c;
        acc_sum[idx] += if ok { 1.0 } else { 0.0 };
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    for i in 0..bins {
        if count[i] == 0 {
            continue;
        }
        let m = count[i] as f64;
        ece += m / n * (acc_sum[i] / m - conf_sum[i] / m).abs();
    }
    ece
}

/// Mean negative log likelihood of the true-class probabilities.
pub fn nll_from_probs(p_true: &[f64]) -> f64 {
    if p_true.is_empty() {
        return 0.0;
    }
    let s: f64 = p_true.iter().map(|&p| -(p.max(1e-300)).ln()).sum();
    s / p_true.len() as f64
}

/// Evaluate a model over a dataset: argmax predictions, 15-bin ECE over
/// max-probability confidence, and mean NLL of the true class.
pub fn evaluate(model: &Model, data: &ModelData) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = data.classes();
    let n = data.len();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut confidences = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    let mut p_true = Vec::with_capacity(n);

    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (shape, values, labels) = data.gather(&indices);
        let g = Graph::inference();
        let input = g.tensor(shape, values);
        let (logits, _) = model.forward_eval(&g, &input, &[])?;
        let b = end - start;
        let probs = softmax_rows(&logits.data(), b, classes, 1.0);
        for i in 0..b {
            let row = &probs[i * classes..(i + 1) * classes];
            // NaN-tolerant argmax: a diverged model still yields a report so
            // the caller's next loss check can flag it
            let (pred, &conf) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap();
            let truth = labels[i];
            confusion[truth][pred] += 1;
            confidences.push(conf);
            correct.push(pred == truth);
            p_true.push(row[truth]);
        }
        start = end;
    }

    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_recall: Vec<f64> = (0..classes)
        .map(|c| {
            let row: usize = confusion[c].iter().sum();
            if row == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / row as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: trace as f64 / n as f64,
        confusion,
        ece: ece_from_predictions(&confidences, &correct, ECE_BINS),
        nll: nll_from_probs(&p_true),
        per_class_recall,
        samples: n,
    })
}

/// Histogram of pairwise Pearson coefficients between per-sample patch
/// columns of a similarity map.
#[derive(Debug, Clone, Serialize)]
pub struct PearsonProfile {
    /// Counts over equal-width bins spanning [-1, 1].
    pub histogram: Vec<usize>,
    pub bins: usize,
    /// Pairs skipped because one column had zero variance.
    pub skipped: usize,
    pub total_pairs: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Build patch columns as in the orthogonal-knowledge extraction (row-wise
/// L2 normalization, contiguous segments) and histogram the Pearson
/// coefficient of every unordered column pair within each sample.
pub fn pearson_patch_profile(map: &SimilarityMap, k: usize, bins: usize) -> Result<PearsonProfile> {
    let b = map.batch();
    if k == 0 || b % k != 0 {
        return Err(Error::BatchNotDivisible { batch: b, k });
    }
    let d = b / k;
    let values = map.values.to_vec();
    let mut histogram = vec![0usize; bins];
    let mut skipped = 0usize;
    let mut total = 0usize;
    for i in 0..b {
        let row = &values[i * b..(i + 1) * b];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let normalized: Vec<f64> = if norm > 0.0 {
            row.iter().map(|v| v / norm).collect()
        } else {
            row.to_vec()
        };
        for c1 in 0..k {
            for c2 in c1 + 1..k {
                total += 1;
                let s1 = &normalized[c1 * d..(c1 + 1) * d];
                let s2 = &normalized[c2 * d..(c2 + 1) * d];
                match pearson(s1, s2) {
                    Some(r) => {
                        let idx = (((r + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
                        histogram[idx] += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    Ok(PearsonProfile {
        histogram,
        bins,
        skipped,
        total_pairs: total,
    })
}

/// Linear centered kernel alignment between two activation sets with a
/// shared batch dimension. Computed through the `b x b` Gram matrices of the
/// column-centered features. Zero features give 0.
pub fn linear_cka(acts_a: &Tensor, acts_b: &Tensor) -> Result<f64> {
    let ba = *acts_a.shape().first().unwrap_or(&0);
    let bb = *acts_b.shape().first().unwrap_or(&0);
    if ba != bb || ba == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("matching batch dims ({ba})"),
            actual: format!("{bb}"),
        });
    }
    let n = ba;
    let center = |t: &Tensor| -> Vec<f64> {
        let f = t.numel() / n;
        let mut x = t.to_vec();
        for j in 0..f {
            let mean: f64 = (0..n).map(|i| x[i * f + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                x[i * f + j] -= mean;
            }
        }
        x
    };
    let gram = |x: &[f64], f: usize| -> Vec<f64> {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..f {
                    acc += x[i * f + t] * x[j * f + t];
                }
                g[i * n + j] = acc;
            }
        }
        g
    };
    let xa = center(acts_a);
    let xb = center(acts_b);
    let ga = gram(&xa, acts_a.numel() / n);
    let gb = gram(&xb, acts_b.numel() / n);
    let dot: f64 = ga.iter().zip(gb.iter()).map(|(a, b)| a * b).sum();
    let na: f64 = ga.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = gb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

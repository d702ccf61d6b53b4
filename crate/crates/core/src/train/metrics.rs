use serde::{Deserialize, Serialize};

use super::loss::cross_entropy_value;
use crate::error::{data_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn rows<T: Element>(scores: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    match scores.shape() {
        &[n, c] if n == labels.len() && c >= 1 => Ok(c),
        s => Err(data_err(format!("{} labels for scores of shape {s:?}", labels.len()))),
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = rows(logits, labels)?;
    if labels.is_empty() {
        return Err(data_err("accuracy of an empty batch"));
    }
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve of a binary problem through the rank-sum
/// statistic (average ranks, so a tied positive/negative pair counts ½).
/// `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC over the columns of `scores`. Classes that are
/// absent from `labels` are skipped.
pub fn auc_macro_ovr<T: Element>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = rows(scores, labels)?;
    if labels.len() < 2 {
        return Err(Error::Undefined("AUC needs at least two samples".into()));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for k in 0..c {
        let col: Vec<f64> = scores.data().chunks(c).map(|r| r[k].as_f64()).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        if let Some(a) = binary_auc(&col, &pos) {
            total += a;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Undefined("AUC is undefined when every sample has the same label".into()));
    }
    Ok(total / counted as f64)
}

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<f64> {
    let c = logits.shape().last().copied().unwrap_or(1);
    let mut out = Vec::with_capacity(logits.numel());
    for r in logits.data().chunks(c) {
        let m = r.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Evaluation of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Mean cross-entropy.
    pub loss: f64,
    pub acc: f64,
    /// Macro one-vs-rest AUC on softmax scores; `None` when only one class
    /// is present.
    pub auc: Option<f64>,
    pub class_counts: Vec<usize>,
    pub class_correct: Vec<usize>,
}

impl EvalReport {
    pub fn from_logits<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let c = rows(logits, labels)?;
        let loss = cross_entropy_value(logits, labels)?;
        let acc = accuracy(logits, labels)?;
        let auc = match auc_macro_ovr(&softmax_rows(logits), labels) {
            Ok(a) => Some(a),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        let mut class_counts = vec![0; c];
        let mut class_correct = vec![0; c];
        for (r, &l) in logits.data().chunks(c).zip(labels) {
            class_counts[l] += 1;
            if argmax(r) == l {
                class_correct[l] += 1;
            }
        }
        Ok(Self {
            n: labels.len(),
            loss,
            acc,
            auc,
            class_counts,
            class_correct,
        })
    }
}

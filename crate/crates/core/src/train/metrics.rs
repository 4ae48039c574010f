use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unit_rows(x: &Tensor) -> Result<(Vec<Vec<f64>>, usize)> {
    let s = x.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Invalid(format!(
            "kNN needs a nonempty [N, d] matrix, got {s:?}"
        )));
    }
    let rows = x
        .data()
        .chunks(s[1])
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect();
    Ok((rows, s[1]))
}

/// 1-nearest-neighbour predictions by cosine similarity. Ties go to the
/// earliest training row.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], query: &Tensor) -> Result<Vec<usize>> {
    let (tr, d) = unit_rows(train)?;
    let (q, dq) = unit_rows(query)?;
    if d != dq || tr.len() != train_labels.len() {
        return Err(Error::Invalid(format!(
            "kNN: train {:?} with {} labels, query {:?}",
            train.shape(),
            train_labels.len(),
            query.shape()
        )));
    }
    Ok(q.iter()
        .map(|row| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, t) in tr.iter().enumerate() {
                let s: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, i);
                }
            }
            train_labels[best.1]
        })
        .collect())
}

/// Fraction of query rows whose nearest training row has the same label.
pub fn knn_validate(
    train: &Tensor,
    train_labels: &[usize],
    val: &Tensor,
    val_labels: &[usize],
) -> Result<f64> {
    if val.shape().first() != Some(&val_labels.len()) {
        return Err(Error::Invalid(format!(
            "kNN: {} validation labels for {:?}",
            val_labels.len(),
            val.shape()
        )));
    }
    let pred = knn_predict(train, train_labels, val)?;
    accuracy(&pred, val_labels)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "accuracy over {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over `n_classes`; a class with no true or
/// predicted members scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() || n_classes == 0 {
        return Err(Error::Invalid(
            "macro_f1 needs matching nonempty inputs".into(),
        ));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Invalid(format!(
                "class index out of range for {n_classes}"
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

/// Index of the largest entry of each row.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let k = x.shape().last().copied().unwrap_or(1).max(1);
    x.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0
        })
        .collect()
}

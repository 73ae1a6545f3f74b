//! Classification metrics over logit matrices.

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};

/// Row-wise argmax of a `[rows, classes]` logit matrix. Ties break
/// toward the lowest class index, so results are deterministic.
pub fn argmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Vec<usize>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::input(format!(
            "argmax needs a non-empty 2-d matrix, got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let data = logits.data();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `classes x classes` confusion counts, `counts[truth][pred]`.
pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::input(format!(
                "entry ({y}, {p}) outside {classes} classes"
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

//! Pearson / Spearman correlation of label columns, plus the small
//! Cholesky factorization the copula sampler needs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrKind {
    Pearson,
    Spearman,
}

/// Correlation matrix of equally long columns.
///
/// A constant column has no defined correlation with anything; that is
/// reported as an error rather than silently zeroed.
pub fn correlation_matrix(columns: &[Vec<f64>], kind: CorrKind) -> Result<Vec<Vec<f64>>> {
    let t = columns.len();
    if t == 0 {
        return Err(Error::input("correlation_matrix: no columns"));
    }
    let n = columns[0].len();
    if n < 2 {
        return Err(Error::input(format!(
            "correlation_matrix: need n >= 2 rows, got {n}"
        )));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::input("correlation_matrix: ragged columns"));
    }
    let prepared: Vec<Vec<f64>> = match kind {
        CorrKind::Pearson => columns.to_vec(),
        CorrKind::Spearman => columns.iter().map(|c| ranks(c)).collect(),
    };
    for (i, col) in prepared.iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(Error::UndefinedCorrelation(format!(
                "column {i} is constant; correlations involving it are undefined"
            )));
        }
    }
    let mut m = vec![vec![0.0; t]; t];
    for i in 0..t {
        m[i][i] = 1.0;
        for j in 0..i {
            let r = pearson(&prepared[i], &prepared[j]);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Ranks with ties averaged (fractional ranks), 1-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("non-NaN values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // positions i..=j share the averaged rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Lower-triangular Cholesky factor of a `dim x dim` row-major
/// symmetric matrix; `None` if not positive definite.
pub(crate) fn cholesky(dim: usize, m: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(m.len(), dim * dim);
    let mut l = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = m[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if s <= 1e-12 {
                    return None;
                }
                l[i * dim + j] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Some(l)
}

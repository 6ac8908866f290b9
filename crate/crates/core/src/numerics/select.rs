//! Top-k selection and softmax restricted to a selected index set.

use super::Array;
use crate::error::{Error, Result};

/// Indices of the `k` largest entries of `row`, returned in ascending index
/// order. Equal scores rank the lower index first.
pub fn topk_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(Error::invalid(format!(
            "top-k: k = {k} must lie in 1..={}",
            row.len()
        )));
    }
    if row.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "topk" });
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Gap between the k-th and (k+1)-th largest entries; `inf` when `k` covers
/// the whole row.
pub fn topk_margin(row: &[f64], k: usize) -> f64 {
    if k >= row.len() {
        return f64::INFINITY;
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1] - sorted[k]
}

/// Writes the softmax of `logits[selected]` into `out`, leaving every other
/// entry at exactly zero.
pub(crate) fn softmax_selected(logits: &[f64], selected: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let max = selected
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &i in selected {
        let e = (logits[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in selected {
        out[i] /= total;
    }
}

pub(crate) fn validate_selection(selected: &[Vec<usize>], rows: usize, cols: usize) -> Result<()> {
    if selected.len() != rows {
        return Err(Error::invalid(format!(
            "masked softmax: {} selection sets for {rows} rows",
            selected.len()
        )));
    }
    for (row, set) in selected.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptySelection { row });
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid(format!(
                "masked softmax: row {row} selects index {bad} outside 0..{cols}"
            )));
        }
        let mut sorted = set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != set.len() {
            return Err(Error::invalid(format!(
                "masked softmax: row {row} selects an index twice"
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax over the selected entries only.
pub fn masked_softmax_rows(logits: &Array, selected: &[Vec<usize>]) -> Result<Array> {
    let (rows, cols) = logits.dims2()?;
    validate_selection(selected, rows, cols)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            op: "masked_softmax_rows",
        });
    }
    let mut out = vec![0.0; rows * cols];
    for (r, set) in selected.iter().enumerate() {
        softmax_selected(logits.row(r), set, &mut out[r * cols..(r + 1) * cols]);
    }
    Array::matrix(rows, cols, out)
}

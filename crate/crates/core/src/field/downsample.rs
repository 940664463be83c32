//! Domain-based downsampling.
//!
//! Each basis `j` gets a coverage score `s(j) = sum_{i != j} g_i(c_j)`: how
//! strongly the other surviving domains already cover its center. The basis
//! with the largest score is removed (ties to the lower index) and the
//! remaining scores drop by that basis' contribution, until `n_keep` remain.
//!
//! Weights are quantized to 64 fractional bits before summing, so the
//! incremental update and a full recomputation are the same integer sums and
//! agree exactly regardless of operation order.

use super::{BasisField, FieldError};

const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

fn quantize(g: f64) -> u128 {
    (g * SCALE).round() as u128
}

/// `m[i][j] = g_i(c_j)`: weight of basis `i` at the effective center of `j`.
pub fn coverage_matrix(field: &BasisField) -> Vec<Vec<f64>> {
    (0..field.len())
        .map(|i| (0..field.len()).map(|j| field.rbf_weight(i, &field.center(j))).collect())
        .collect()
}

fn quantized(field: &BasisField) -> Vec<Vec<u128>> {
    coverage_matrix(field)
        .into_iter()
        .map(|row| row.into_iter().map(quantize).collect())
        .collect()
}

fn check(field: &BasisField, n_keep: usize) -> Result<(), FieldError> {
    if n_keep == 0 || n_keep > field.len() {
        return Err(FieldError::KeepCount {
            n_keep,
            n: field.len(),
        });
    }
    Ok(())
}

fn argmax(alive: &[bool], score: impl Fn(usize) -> u128) -> usize {
    let mut best: Option<(usize, u128)> = None;
    for j in (0..alive.len()).filter(|&j| alive[j]) {
        let s = score(j);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.expect("at least one live basis").0
}

/// Indices (ascending) of the `n_keep` bases that survive downsampling.
pub fn domain_downsample(field: &BasisField, n_keep: usize) -> Result<Vec<usize>, FieldError> {
    check(field, n_keep)?;
    let m = quantized(field);
    let n = field.len();
    let mut alive = vec![true; n];
    let mut s: Vec<u128> = (0..n)
        .map(|j| (0..n).filter(|&i| i != j).map(|i| m[i][j]).sum())
        .collect();
    for _ in n_keep..n {
        let k = argmax(&alive, |j| s[j]);
        alive[k] = false;
        for j in (0..n).filter(|&j| alive[j]) {
            s[j] -= m[k][j];
        }
    }
    Ok((0..n).filter(|&j| alive[j]).collect())
}

/// Same selection, recomputing every score from scratch each round.
pub fn domain_downsample_reference(
    field: &BasisField,
    n_keep: usize,
) -> Result<Vec<usize>, FieldError> {
    check(field, n_keep)?;
    let m = quantized(field);
    let n = field.len();
    let mut alive = vec![true; n];
    for _ in n_keep..n {
        let k = argmax(&alive, |j| {
            (0..n)
                .filter(|&i| i != j && alive[i])
                .map(|i| m[i][j])
                .sum()
        });
        alive[k] = false;
    }
    Ok((0..n).filter(|&j| alive[j]).collect())
}

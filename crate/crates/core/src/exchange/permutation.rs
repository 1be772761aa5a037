//! Explicit integer matrix form of a binary-mask exchange.
//!
//! With `D = diag(epsilon)` and `E = I - D`, the stacked pair `z = [x; y]`
//! maps to `P z` where `P = [[E, D], [D, E]]` is `2m x 2m`.

use serde::Serialize;

use crate::exchange::ExchangeMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationOperator {
    m: usize,
    d: Vec<i64>,
    e: Vec<i64>,
    p: Vec<i64>,
}

impl PermutationOperator {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Order of the square matrix `P`, i.e. `2m`.
    pub fn order(&self) -> usize {
        2 * self.m
    }

    /// Diagonal of `D`.
    pub fn d(&self) -> &[i64] {
        &self.d
    }

    /// Diagonal of `E`.
    pub fn e(&self) -> &[i64] {
        &self.e
    }

    pub fn entry(&self, row: usize, col: usize) -> i64 {
        self.p[row * self.order() + col]
    }

    /// Row-major dense matrix.
    pub fn matrix(&self) -> &[i64] {
        &self.p
    }

    pub fn swapped(&self) -> usize {
        self.d.iter().filter(|&&v| v == 1).count()
    }

    /// `P z` for `z = [x; y]`. Zero entries contribute nothing, so every
    /// output is exactly one input value.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = self.order();
        assert_eq!(z.len(), n, "stacked vector must have length 2m");
        (0..n)
            .map(|row| {
                let mut acc: Option<f64> = None;
                for (col, &zv) in z.iter().enumerate() {
                    match self.entry(row, col) {
                        0 => {}
                        1 => acc = Some(acc.map_or(zv, |a| a + zv)),
                        k => acc = Some(acc.unwrap_or(0.0) + k as f64 * zv),
                    }
                }
                acc.unwrap_or(0.0)
            })
            .collect()
    }

    /// `P z` over integers (used by the discrete information oracle).
    pub fn apply_int(&self, z: &[i64]) -> Vec<i64> {
        let n = self.order();
        assert_eq!(z.len(), n, "stacked vector must have length 2m");
        (0..n)
            .map(|row| {
                self.p[row * n..(row + 1) * n]
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn transpose(&self) -> Vec<i64> {
        let n = self.order();
        let mut t = vec![0; n * n];
        for r in 0..n {
            for c in 0..n {
                t[c * n + r] = self.p[r * n + c];
            }
        }
        t
    }
}

pub fn build_permutation(mask: &ExchangeMask) -> PermutationOperator {
    let m = mask.len();
    let d: Vec<i64> = mask.epsilon.iter().map(|&e| i64::from(e)).collect();
    let e: Vec<i64> = d.iter().map(|&v| 1 - v).collect();
    let n = 2 * m;
    let mut p = vec![0i64; n * n];
    for i in 0..m {
        p[i * n + i] = e[i];
        p[i * n + m + i] = d[i];
        p[(m + i) * n + i] = d[i];
        p[(m + i) * n + m + i] = e[i];
    }
    PermutationOperator { m, d, e, p }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OrthogonalityReport {
    /// `P^T P == I` in exact integer arithmetic.
    pub orthogonal: bool,
    /// `(-1)^{|S|}`.
    pub det_sign: i8,
    /// Sign recovered from the cycle structure of `P`, if it is a permutation.
    pub parity_sign: Option<i8>,
    /// Exact determinant by fraction-free elimination (small orders only).
    pub elimination_det: Option<i64>,
}

impl OrthogonalityReport {
    pub fn consistent(&self) -> bool {
        self.orthogonal
            && self.parity_sign == Some(self.det_sign)
            && self
                .elimination_det
                .map_or(true, |d| d == i64::from(self.det_sign))
    }
}

/// Largest order for which the elimination determinant is computed.
pub const ELIMINATION_MAX_ORDER: usize = 32;

pub fn verify_orthogonality(op: &PermutationOperator) -> OrthogonalityReport {
    let n = op.order();
    let pt = op.transpose();
    // (P^T P)_{ij} = sum_k P_{ki} P_{kj}; skipping zero P_{ki} keeps this O(n^2)
    // for permutation-like inputs while remaining an exact dense product.
    let mut prod = vec![0i64; n * n];
    for k in 0..n {
        for i in 0..n {
            let pki = pt[i * n + k];
            if pki == 0 {
                continue;
            }
            for j in 0..n {
                prod[i * n + j] += pki * op.p[k * n + j];
            }
        }
    }
    let orthogonal = (0..n).all(|i| (0..n).all(|j| prod[i * n + j] == i64::from(i == j)));
    let det_sign = if op.swapped() % 2 == 0 { 1 } else { -1 };
    let elimination_det = (n <= ELIMINATION_MAX_ORDER).then(|| bareiss_det(&op.p, n));
    OrthogonalityReport {
        orthogonal,
        det_sign,
        parity_sign: permutation_parity(&op.p, n),
        elimination_det,
    }
}

/// Sign of the permutation encoded by a 0/1 matrix with one 1 per row and column.
fn permutation_parity(p: &[i64], n: usize) -> Option<i8> {
    let mut target = vec![usize::MAX; n];
    for r in 0..n {
        let row = &p[r * n..(r + 1) * n];
        if row.iter().any(|&v| v != 0 && v != 1) || row.iter().filter(|&&v| v == 1).count() != 1 {
            return None;
        }
        target[r] = row.iter().position(|&v| v == 1)?;
    }
    let mut cols = target.clone();
    cols.sort_unstable();
    cols.dedup();
    if cols.len() != n {
        return None;
    }
    let mut seen = vec![false; n];
    let mut transpositions = 0usize;
    for start in 0..n {
        let mut len = 0usize;
        let mut cur = start;
        while !seen[cur] {
            seen[cur] = true;
            cur = target[cur];
            len += 1;
        }
        transpositions += len.saturating_sub(1);
    }
    Some(if transpositions % 2 == 0 { 1 } else { -1 })
}

/// Exact integer determinant by Bareiss fraction-free elimination with row pivoting.
fn bareiss_det(p: &[i64], n: usize) -> i64 {
    if n == 0 {
        return 1;
    }
    let mut a: Vec<i128> = p.iter().map(|&v| i128::from(v)).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k * n + k] == 0 {
            let Some(swap) = (k + 1..n).find(|&r| a[r * n + k] != 0) else {
                return 0;
            };
            for c in 0..n {
                a.swap(k * n + c, swap * n + c);
            }
            sign = -sign;
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            for j in k + 1..n {
                a[i * n + j] = (a[i * n + j] * pivot - a[i * n + k] * a[k * n + j]) / prev;
            }
        }
        prev = pivot;
    }
    (sign * a[n * n - 1]) as i64
}

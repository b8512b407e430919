//! Nonnegative least squares by the active-set method of Lawson and Hanson
//! (Solving Least Squares Problems, 1974, ch. 23). Small dense systems only;
//! the unconstrained subproblems are solved by SVD.

use nalgebra::{DMatrix, DVector};

/// Solves `min ‖A x − b‖₂` subject to `x ≥ 0`.
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.amax().max(1.0) * b.amax().max(1.0);

    for _ in 0..max_iter {
        let residual = b - a * &x;
        let w = a.transpose() * &residual;
        // Most negative gradient among the active (zero) coordinates.
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !passive[i] && w[i] > tol && best.map(|(_, v)| w[i] > v).unwrap_or(true) {
                best = Some((i, w[i]));
            }
        }
        let Some((j, _)) = best else { break };
        passive[j] = true;

        // Inner loop: solve on the passive set, clip negatives.
        loop {
            let cols: Vec<usize> = (0..n).filter(|i| passive[*i]).collect();
            let sub = a.select_columns(cols.iter());
            let svd = sub.svd(true, true);
            let s = svd.solve(b, 1e-12).unwrap_or_else(|_| DVector::zeros(cols.len()));
            if s.iter().all(|v| *v > 0.0) {
                for (k, &i) in cols.iter().enumerate() {
                    x[i] = s[k];
                }
                break;
            }
            // Step toward s until the first passive coordinate hits zero.
            let mut alpha = f64::INFINITY;
            for (k, &i) in cols.iter().enumerate() {
                if s[k] <= 0.0 {
                    let denom = x[i] - s[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in cols.iter().enumerate() {
                x[i] += alpha * (s[k] - x[i]);
                if x[i] <= 1e-14 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if cols.iter().all(|&i| !passive[i]) {
                break;
            }
        }
    }
    x
}

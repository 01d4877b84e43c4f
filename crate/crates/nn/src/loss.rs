//! Softmax cross-entropy kernels shared by every objective.

use crate::Real;
use ndarray::{Array1, Array2, Axis};

/// Row-wise log-softmax with max subtraction for stability.
pub fn log_softmax<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| v - max);
        let lse = row.iter().map(|v| v.exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Per-sample cross-entropy against integer labels (natural log).
pub fn cross_entropy_per_sample<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Array1<T> {
    assert_eq!(logits.nrows(), labels.len(), "batch/label length mismatch");
    let ls = log_softmax(logits);
    Array1::from_iter(labels.iter().enumerate().map(|(i, &y)| -ls[[i, y]]))
}

/// Gradient of `sum_i w_i * ce_i` with respect to the logits:
/// `dlogits[i] = w_i * (softmax(logits[i]) - onehot(y_i))`.
pub fn weighted_ce_grad<T: Real>(
    logits: &Array2<T>,
    labels: &[usize],
    weights: &Array1<T>,
) -> Array2<T> {
    assert_eq!(logits.nrows(), labels.len());
    assert_eq!(logits.nrows(), weights.len());
    let mut grad = log_softmax(logits).mapv(|v| v.exp());
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] = grad[[i, y]] - T::one();
    }
    for (mut row, &w) in grad.rows_mut().into_iter().zip(weights.iter()) {
        row.mapv_inplace(|v| v * w);
    }
    grad
}

/// Argmax predictions, ties resolved to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_n() {
        let logits = Array2::<f64>::zeros((4, 10));
        let ce = cross_entropy_per_sample(&logits, &[0, 3, 5, 9]);
        for v in ce.iter() {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let a = array![[1.0f64, 2.0, 3.0]];
        let b = array![[101.0f64, 102.0, 103.0]];
        let la = log_softmax(&a);
        let lb = log_softmax(&b);
        for (x, y) in la.iter().zip(lb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_grad_matches_finite_differences() {
        let logits = array![[0.3f64, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let labels = [2usize, 0];
        let weights = array![0.7f64, -1.3];
        let grad = weighted_ce_grad(&logits, &labels, &weights);
        let h = 1e-6;
        let f = |l: &Array2<f64>| -> f64 {
            let ce = cross_entropy_per_sample(l, &labels);
            ce.iter().zip(weights.iter()).map(|(c, w)| c * w).sum()
        };
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let fd = (f(&lp) - f(&lm)) / (2.0 * h);
                assert!(
                    (fd - grad[[i, j]]).abs() < 1e-8,
                    "fd {fd} vs analytic {}",
                    grad[[i, j]]
                );
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = array![[1.0f32, 1.0, 0.5]];
        assert_eq!(argmax_rows(&logits), vec![0]);
    }
}

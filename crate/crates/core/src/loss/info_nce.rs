use super::MatchBatch;
use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone)]
pub struct InfoNceOutput<T> {
    pub loss: T,
    pub grad_f1: Matrix<T>,
    pub grad_f2: Matrix<T>,
    /// Gradient of the loss with respect to the logit matrix.
    pub grad_logits: Matrix<T>,
}

/// Mean softmax cross-entropy of `f1·f2ᵀ/τ` with the diagonal as labels.
pub fn point_info_nce<T: Scalar>(batch: &MatchBatch<T>, tau: T) -> Result<InfoNceOutput<T>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyMatches);
    }
    if !(tau > T::zero()) {
        return Err(Error::Config("loss: tau must be positive".into()));
    }
    let mut logits = batch.f1.matmul_t(&batch.f2);
    logits.scale(tau.recip());
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let nt = T::from_usize_lossy(n);
    let mut total = T::zero();
    let mut grad_logits = Matrix::zeros(n, n);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[r];
        for (c, g) in grad_logits.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - max).exp() / sum;
            let y = if c == r { T::one() } else { T::zero() };
            *g = (p - y) / nt;
        }
    }
    let loss = total / nt;
    let mut grad_f1 = grad_logits.matmul(&batch.f2);
    grad_f1.scale(tau.recip());
    let mut grad_f2 = grad_logits.t_matmul(&batch.f1);
    grad_f2.scale(tau.recip());
    Ok(InfoNceOutput {
        loss,
        grad_f1,
        grad_f2,
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_match_is_zero() {
        let b = MatchBatch::new(Matrix::from_rows(&[vec![0.3, 0.4]]), Matrix::from_rows(&[vec![1.0, 0.0]])).unwrap();
        let out = point_info_nce(&b, 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_f1.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_identity_rows() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = MatchBatch::new(eye.clone(), eye).unwrap();
        let out = point_info_nce(&b, 1.0).unwrap();
        let expect = (1.0f64 + (-1.0f64).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-15);
        assert!((out.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn uniform_features_give_log_n() {
        let n = 256;
        let f = Matrix::filled(n, 4, 0.5);
        let b = MatchBatch::new(f.clone(), f).unwrap();
        let out = point_info_nce(&b, 0.07).unwrap();
        assert!((out.loss - (n as f64).ln()).abs() < 1e-9);
        assert!((out.loss - 5.545177).abs() < 1e-6);
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let f1 = Matrix::from_rows(&[vec![0.1, -0.5], vec![0.7, 0.2], vec![-0.3, 0.9]]);
        let f2 = Matrix::from_rows(&[vec![0.4, 0.1], vec![-0.2, 0.6], vec![0.8, -0.7]]);
        let out = point_info_nce(&MatchBatch::new(f1, f2).unwrap(), 0.5).unwrap();
        for r in 0..3 {
            let s: f64 = out.grad_logits.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let f = Matrix::from_rows(&[vec![1e300], vec![1e300]]);
        let b = MatchBatch::new(f.clone(), f).unwrap();
        assert!(matches!(point_info_nce(&b, 1e-10), Err(Error::NonFinite(_))));
    }
}

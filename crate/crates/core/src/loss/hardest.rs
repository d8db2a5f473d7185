use rand::seq::index::sample;
use rand::Rng;

use super::{LossConfig, MatchBatch};
use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

/// Candidate negatives: feature rows together with their source row indices
/// in the view they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativePool<T> {
    pub features: Matrix<T>,
    pub sources: Vec<usize>,
}

impl<T: Scalar> NegativePool<T> {
    pub fn new(features: Matrix<T>, sources: Vec<usize>) -> Result<Self> {
        if features.rows() != sources.len() {
            return Err(Error::ChannelMismatch {
                expected: sources.len(),
                got: features.rows(),
            });
        }
        Ok(Self { features, sources })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            sources: Vec::new(),
        }
    }

    /// Up to `size` distinct rows of `all`, drawn uniformly, in row order.
    pub fn sample<R: Rng + ?Sized>(all: &Matrix<T>, size: usize, rng: &mut R) -> Self {
        let n = all.rows();
        let mut sources = if size >= n {
            (0..n).collect()
        } else {
            sample(rng, n, size).into_vec()
        };
        sources.sort_unstable();
        Self {
            features: all.gather_rows(&sources),
            sources,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HardestOutput<T> {
    pub loss: T,
    pub grad_f1: Matrix<T>,
    pub grad_f2: Matrix<T>,
    /// Gradients for the rows of the pool mined by view-1 anchors.
    pub grad_pool_for_f1: Matrix<T>,
    /// Gradients for the rows of the pool mined by view-2 anchors.
    pub grad_pool_for_f2: Matrix<T>,
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(T::zero(), |s, v| s + v)
        .sqrt()
}

/// Adds `coef · (a − b)/‖a − b‖` to `ga` and its negation to `gb`.
fn push_distance_grad<T: Scalar>(a: &[T], b: &[T], d: T, coef: T, ga: &mut [T], gb: &mut [T]) {
    if !(d > T::zero()) {
        return;
    }
    for k in 0..a.len() {
        let g = coef * (a[k] - b[k]) / d;
        ga[k] += g;
        gb[k] -= g;
    }
}

/// Hardest negative for `anchor` among pool rows whose source differs from
/// `partner`; ties resolve to the lowest pool index.
fn mine<T: Scalar>(anchor: &[T], pool: &NegativePool<T>, partner: usize) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (k, &src) in pool.sources.iter().enumerate() {
        if src == partner {
            continue;
        }
        let d = distance(anchor, pool.features.row(k));
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best
}

/// One side of the negative term: anchors in `anchors` mine `pool`.
fn negative_term<T: Scalar>(
    anchors: &Matrix<T>,
    partners: &[usize],
    pool: &NegativePool<T>,
    m_n: T,
    grad_anchor: &mut Matrix<T>,
    grad_pool: &mut Matrix<T>,
) -> T {
    let mined: Vec<Option<(usize, T)>> = (0..anchors.rows())
        .map(|i| mine(anchors.row(i), pool, partners[i]))
        .collect();
    let count = mined.iter().filter(|m| m.is_some()).count();
    if count == 0 {
        return T::zero();
    }
    let ct = T::from_usize_lossy(count);
    let half = T::lit(0.5);
    let mut sum = T::zero();
    for (i, m) in mined.iter().enumerate() {
        let Some((k, d)) = *m else { continue };
        let h = m_n - d;
        if h > T::zero() {
            sum += h * h;
            // d/dd of 0.5·h²/count is −h/count.
            let coef = -h / ct;
            let mut gp = vec![T::zero(); anchors.cols()];
            push_distance_grad(anchors.row(i), pool.features.row(k), d, coef, grad_anchor.row_mut(i), &mut gp);
            for (o, g) in grad_pool.row_mut(k).iter_mut().zip(gp) {
                *o += g;
            }
        }
    }
    half * sum / ct
}

/// Margin loss with hardest-negative mining. `pool_for_f1` holds view-2
/// candidates mined by view-1 anchors, and vice versa; a candidate whose
/// source equals the anchor's partner is excluded.
pub fn hardest_contrastive<T: Scalar>(
    batch: &MatchBatch<T>,
    pool_for_f1: &NegativePool<T>,
    pool_for_f2: &NegativePool<T>,
    cfg: &LossConfig,
) -> Result<HardestOutput<T>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyMatches);
    }
    let (m_p, m_n) = (T::lit(cfg.m_p), T::lit(cfg.m_n));
    let dim = batch.f1.cols();
    let mut grad_f1 = Matrix::zeros(n, dim);
    let mut grad_f2 = Matrix::zeros(n, dim);

    let nt = T::from_usize_lossy(n);
    let mut pos = T::zero();
    for i in 0..n {
        let (a, b) = (batch.f1.row(i), batch.f2.row(i));
        let d = distance(a, b);
        let h = d - m_p;
        if h > T::zero() {
            pos += h * h;
            let coef = T::lit(2.0) * h / nt;
            let mut gb = vec![T::zero(); dim];
            push_distance_grad(a, b, d, coef, grad_f1.row_mut(i), &mut gb);
            grad_f2.row_mut(i).copy_from_slice(&gb);
        }
    }
    let mut loss = pos / nt;

    let mut grad_pool_for_f1 = Matrix::zeros(pool_for_f1.len(), dim);
    let mut grad_pool_for_f2 = Matrix::zeros(pool_for_f2.len(), dim);
    loss += negative_term(&batch.f1, &batch.idx2, pool_for_f1, m_n, &mut grad_f1, &mut grad_pool_for_f1);
    loss += negative_term(&batch.f2, &batch.idx1, pool_for_f2, m_n, &mut grad_f2, &mut grad_pool_for_f2);

    Ok(HardestOutput {
        loss,
        grad_f1,
        grad_f2,
        grad_pool_for_f1,
        grad_pool_for_f2,
    })
}

//! Contrastive objectives over matched point features.

mod hardest;
mod info_nce;

pub use hardest::{hardest_contrastive, HardestOutput, NegativePool};
pub use info_nce::{point_info_nce, InfoNceOutput};

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    HardestContrastive,
    PointInfoNce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Softmax temperature.
    pub tau: f64,
    /// Matches sampled per step for the softmax objective.
    pub ns: usize,
    pub m_p: f64,
    pub m_n: f64,
    /// Positive pairs sampled per step for the margin objective.
    pub pos_sample: usize,
    /// Size of each view's random negative pool for hardest-negative mining.
    pub hardest_neg_sample: usize,
    pub normalize_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::PointInfoNce,
            tau: 0.07,
            ns: 4096,
            m_p: 0.1,
            m_n: 1.4,
            pos_sample: 1024,
            hardest_neg_sample: 256,
            normalize_features: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("loss: tau must be positive".into()));
        }
        if self.ns < 2 {
            return Err(Error::Config("loss: ns must be at least 2".into()));
        }
        if !(self.m_p >= 0.0 && self.m_p < self.m_n) {
            return Err(Error::Config("loss: need 0 <= m_p < m_n".into()));
        }
        if self.pos_sample == 0 {
            return Err(Error::Config("loss: pos_sample must be positive".into()));
        }
        Ok(())
    }
}

/// Row-aligned matched features: row `k` of `f1` matches row `k` of `f2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchBatch<T> {
    pub f1: Matrix<T>,
    pub f2: Matrix<T>,
    /// Source rows of each match in the full feature matrices.
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
}

impl<T: Scalar> MatchBatch<T> {
    pub fn new(f1: Matrix<T>, f2: Matrix<T>) -> Result<Self> {
        if f1.rows() != f2.rows() || f1.cols() != f2.cols() {
            return Err(Error::ChannelMismatch {
                expected: f1.rows(),
                got: f2.rows(),
            });
        }
        let n = f1.rows();
        Ok(Self {
            f1,
            f2,
            idx1: (0..n).collect(),
            idx2: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.f1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.f1.rows() == 0
    }
}

/// Positions of `min(ns, |matches|)` matches drawn uniformly without
/// replacement, in increasing order.
pub fn sample_match_positions<R: Rng + ?Sized>(n_matches: usize, ns: usize, rng: &mut R) -> Vec<usize> {
    if ns >= n_matches {
        return (0..n_matches).collect();
    }
    let mut pos = sample(rng, n_matches, ns).into_vec();
    pos.sort_unstable();
    pos
}

pub fn subsample_matches<T: Scalar, R: Rng + ?Sized>(
    matches: &[(usize, usize)],
    f1_all: &Matrix<T>,
    f2_all: &Matrix<T>,
    ns: usize,
    rng: &mut R,
) -> Result<MatchBatch<T>> {
    if matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    let pos = sample_match_positions(matches.len(), ns, rng);
    let idx1: Vec<usize> = pos.iter().map(|&p| matches[p].0).collect();
    let idx2: Vec<usize> = pos.iter().map(|&p| matches[p].1).collect();
    Ok(MatchBatch {
        f1: f1_all.gather_rows(&idx1),
        f2: f2_all.gather_rows(&idx2),
        idx1,
        idx2,
    })
}

/// Unit-norm rows; a zero row is an error.
pub fn l2_normalize_rows<T: Scalar>(features: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(l2_normalize_with_norms(features)?.0)
}

pub(crate) fn l2_normalize_with_norms<T: Scalar>(features: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let (out, norms) = normalize_lenient(features);
    match norms.iter().position(|n| !(*n > T::zero())) {
        Some(r) => Err(Error::ZeroRow(r)),
        None => Ok((out, norms)),
    }
}

/// Like [`l2_normalize_rows`], but zero rows stay zero (with zero norm).
fn normalize_lenient<T: Scalar>(features: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut out = features.clone();
    let mut norms = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let row = out.row_mut(r);
        let n = crate::linalg::dot(row, row).sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Backward of row normalization: `dx = (dy − y·(y·dy)) / ‖x‖`; rows with
/// zero norm get zero gradient.
pub fn l2_normalize_backward<T: Scalar>(normalized: &Matrix<T>, norms: &[T], dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        if !(norms[r] > T::zero()) {
            continue;
        }
        let y = normalized.row(r);
        let g = dy.row(r);
        let proj = crate::linalg::dot(y, g);
        for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(y).zip(g) {
            *o = (gv - yv * proj) / norms[r];
        }
    }
    dx
}

/// Mean per-dimension standard deviation of the L2-normalized rows; zero iff
/// all rows point the same way. Zero rows are left as zero.
pub fn collapse_metric<T: Scalar>(features: &Matrix<T>) -> T {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 || d == 0 {
        return T::zero();
    }
    let mut normed = features.clone();
    for r in 0..n {
        let row = normed.row_mut(r);
        let norm = crate::linalg::dot(row, row).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let nt = T::from_usize_lossy(n);
    let mut total = T::zero();
    for c in 0..d {
        // Shifting by the first row makes identical columns give exactly 0.
        let x0 = normed.get(0, c);
        let mut mean = T::zero();
        for r in 0..n {
            mean += normed.get(r, c) - x0;
        }
        mean /= nt;
        let mut var = T::zero();
        for r in 0..n {
            let e = normed.get(r, c) - x0 - mean;
            var += e * e;
        }
        total += (var / nt).sqrt();
    }
    total / T::from_usize_lossy(d)
}

/// Loss value and gradients with respect to both views' full feature matrices.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad1: Matrix<T>,
    pub grad2: Matrix<T>,
    /// Number of positive pairs that entered the loss.
    pub positives: usize,
}

/// Applies the configured objective to per-voxel features of two views and
/// their voxel-level matches: optional row normalization, match sampling,
/// negative pools (margin variant), and the chained backward pass.
pub fn contrastive_loss<T: Scalar, R: Rng + ?Sized>(
    f1_all: &Matrix<T>,
    f2_all: &Matrix<T>,
    matches: &[(usize, usize)],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    let (n1, n2) = if cfg.normalize_features {
        // A voxel whose last activations are all dead has a zero feature row;
        // it is treated as a constant rather than aborting the step.
        (Some(normalize_lenient(f1_all)), Some(normalize_lenient(f2_all)))
    } else {
        (None, None)
    };
    let g1 = n1.as_ref().map_or(f1_all, |(m, _)| m);
    let g2 = n2.as_ref().map_or(f2_all, |(m, _)| m);
    let mut grad1 = Matrix::zeros(g1.rows(), g1.cols());
    let mut grad2 = Matrix::zeros(g2.rows(), g2.cols());
    let (loss, positives) = match cfg.variant {
        LossVariant::PointInfoNce => {
            let batch = subsample_matches(matches, g1, g2, cfg.ns, rng)?;
            let out = point_info_nce(&batch, T::lit(cfg.tau))?;
            grad1.scatter_add_rows(&batch.idx1, &out.grad_f1);
            grad2.scatter_add_rows(&batch.idx2, &out.grad_f2);
            (out.loss, batch.len())
        }
        LossVariant::HardestContrastive => {
            let batch = subsample_matches(matches, g1, g2, cfg.pos_sample, rng)?;
            // Anchors of view 1 mine negatives among view-2 rows and vice versa.
            let pool2 = NegativePool::sample(g2, cfg.hardest_neg_sample, rng);
            let pool1 = NegativePool::sample(g1, cfg.hardest_neg_sample, rng);
            if pool1.is_empty() || pool2.is_empty() {
                warn!("empty negative pool, using the positive term only");
            }
            let out = hardest_contrastive(&batch, &pool2, &pool1, cfg)?;
            grad1.scatter_add_rows(&batch.idx1, &out.grad_f1);
            grad2.scatter_add_rows(&batch.idx2, &out.grad_f2);
            grad2.scatter_add_rows(&pool2.sources, &out.grad_pool_for_f1);
            grad1.scatter_add_rows(&pool1.sources, &out.grad_pool_for_f2);
            (out.loss, batch.len())
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if let Some((y, norms)) = &n1 {
        grad1 = l2_normalize_backward(y, norms, &grad1);
    }
    if let Some((y, norms)) = &n2 {
        grad2 = l2_normalize_backward(y, norms, &grad2);
    }
    Ok(LossOutput {
        loss,
        grad1,
        grad2,
        positives,
    })
}

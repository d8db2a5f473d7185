//! Feature-matching hit ratio and recall over voxelized view pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_transform, AugmentationConfig};
use crate::dataset::ScenePair;
use crate::geometry::{apply_transform, PointCloud};
use crate::linalg::{dist2, Matrix};
use crate::nn::{Mode, ParameterSet, UNet};
use crate::train::{mix, voxel_matches};
use crate::voxel::{quantize, SparseTensor};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmrConfig {
    /// Spatial radius (meters) within which a feature match counts as a hit.
    pub inlier_distance: f64,
    /// Minimum hit ratio for a pair to count as recalled.
    pub inlier_ratio: f64,
}

impl Default for FmrConfig {
    fn default() -> Self {
        Self {
            inlier_distance: 0.1,
            inlier_ratio: 0.05,
        }
    }
}

impl FmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_distance > 0.0 && self.inlier_distance.is_finite()) {
            return Err(Error::Config("eval: inlier_distance must be positive".into()));
        }
        // A pair is recalled when its hit ratio exceeds the threshold, so 1 or
        // more could never be met.
        if !(self.inlier_ratio > 0.0 && self.inlier_ratio < 1.0) {
            return Err(Error::Config("eval: inlier_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// How the two views are posed before voxelization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPose {
    /// Both views stay in the shared world frame.
    World,
    /// Each view gets an independent seeded random rotation, so matching
    /// must rely on rotation-robust features.
    RandomRotation,
}

/// A pair reduced to voxel rows: per-row world positions (of each voxel's
/// lowest-index point), the input tensors and one-to-one voxel matches.
#[derive(Debug, Clone)]
pub struct VoxelizedPair<T> {
    pub p1: Vec<[T; 3]>,
    pub p2: Vec<[T; 3]>,
    pub input1: SparseTensor<T>,
    pub input2: SparseTensor<T>,
    pub matches: Vec<(usize, usize)>,
}

impl<T: Scalar> VoxelizedPair<T> {
    pub fn new(pair: &ScenePair<T>, voxel_size: T, pose: EvalPose, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot_only = AugmentationConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            ..AugmentationConfig::default()
        };
        let mut posed = |pc: &PointCloud<T>| -> Result<PointCloud<T>> {
            match pose {
                EvalPose::World => Ok(pc.clone()),
                EvalPose::RandomRotation => apply_transform(pc, &sample_transform(&rot_only, &mut rng)),
            }
        };
        let c1 = posed(&pair.x1)?;
        let c2 = posed(&pair.x2)?;
        let v1 = quantize(&c1, voxel_size)?;
        let v2 = quantize(&c2, voxel_size)?;
        let rows1: Vec<_> = v1.origin_map.iter().map(|&r| Some(r)).collect();
        let rows2: Vec<_> = v2.origin_map.iter().map(|&r| Some(r)).collect();
        let matches = voxel_matches(pair.correspondences.matches(), &rows1, &rows2, v1.len(), v2.len());
        let p1 = v1.representatives().iter().map(|&i| pair.x1.points()[i]).collect();
        let p2 = v2.representatives().iter().map(|&i| pair.x2.points()[i]).collect();
        Ok(Self {
            p1,
            p2,
            input1: v1.tensor,
            input2: v2.tensor,
            matches,
        })
    }

    /// Coordinate features: each row's world position.
    pub fn coordinate_features(&self) -> (Matrix<T>, Matrix<T>) {
        let m = |p: &[[T; 3]]| Matrix::from_vec(p.len(), 3, p.iter().flatten().copied().collect());
        (m(&self.p1), m(&self.p2))
    }
}

/// Index of the nearest row of `pool` to `q` (squared Euclidean; ties to the lowest index).
fn nearest_row<T: Scalar>(q: &[T], pool: &Matrix<T>) -> usize {
    let mut best = (0, T::infinity());
    for k in 0..pool.rows() {
        let d = q
            .iter()
            .zip(pool.row(k))
            .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Fraction of matches `(i, j)` whose feature-space nearest neighbor of
/// `f1[i]` among the rows of `f2` lies within `inlier_distance` of `p2[j]`.
pub fn hit_ratio<T: Scalar>(
    pair: &VoxelizedPair<T>,
    f1: &Matrix<T>,
    f2: &Matrix<T>,
    inlier_distance: f64,
) -> Result<f64> {
    if pair.matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    if f1.rows() != pair.p1.len() || f2.rows() != pair.p2.len() || f1.cols() != f2.cols() {
        return Err(Error::ChannelMismatch {
            expected: pair.p1.len(),
            got: f1.rows(),
        });
    }
    let tau2 = T::lit(inlier_distance * inlier_distance);
    let hits = pair
        .matches
        .iter()
        .filter(|&&(i, j)| dist2(&pair.p2[nearest_row(f1.row(i), f2)], &pair.p2[j]) <= tau2)
        .count();
    Ok(hits as f64 / pair.matches.len() as f64)
}

/// Source of per-voxel features for evaluation.
pub enum FeatureSource<'a, T> {
    Network { net: &'a UNet, params: &'a ParameterSet<T> },
    Coordinates,
}

impl<T: Scalar> FeatureSource<'_, T> {
    pub fn features(&self, pair: &VoxelizedPair<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        match self {
            Self::Network { net, params } => {
                let (a, _) = net.forward(params, &pair.input1, Mode::Eval)?;
                let (b, _) = net.forward(params, &pair.input2, Mode::Eval)?;
                Ok((a.features, b.features))
            }
            Self::Coordinates => Ok(pair.coordinate_features()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairResult {
    pub pair_id: String,
    pub hit_ratio: f64,
    pub recalled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmrReport {
    pub fmr: f64,
    pub mean_hit_ratio: f64,
    pub pairs: Vec<PairResult>,
}

impl FmrReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("pair_id,hit_ratio,inlier\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{}\n", p.pair_id, p.hit_ratio, u8::from(p.recalled)));
        }
        s
    }
}

pub fn pair_id<T>(pair: &ScenePair<T>) -> String {
    format!("{}_{}_{}", pair.scene_id, pair.frame_ids.0, pair.frame_ids.1)
}

/// Evaluates every pair; pair `k` is posed with seed `mix(seed, k)`. Pairs
/// with no surviving matches count as not recalled with hit ratio 0.
pub fn feature_match_recall<T: Scalar>(
    pairs: &[ScenePair<T>],
    source: &FeatureSource<'_, T>,
    cfg: &FmrConfig,
    voxel_size: f64,
    pose: EvalPose,
    seed: u64,
) -> Result<FmrReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut results = Vec::with_capacity(pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let vp = VoxelizedPair::new(pair, T::lit(voxel_size), pose, mix(seed, k as u64))?;
        let ratio = if vp.matches.is_empty() {
            0.0
        } else {
            let (f1, f2) = source.features(&vp)?;
            hit_ratio(&vp, &f1, &f2, cfg.inlier_distance)?
        };
        results.push(PairResult {
            pair_id: pair_id(pair),
            hit_ratio: ratio,
            recalled: ratio > cfg.inlier_ratio,
        });
    }
    let n = results.len() as f64;
    Ok(FmrReport {
        fmr: results.iter().filter(|r| r.recalled).count() as f64 / n,
        mean_hit_ratio: results.iter().map(|r| r.hit_ratio).sum::<f64>() / n,
        pairs: results,
    })
}

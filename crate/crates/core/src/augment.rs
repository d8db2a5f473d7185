//! Random geometric transformations applied independently to each view.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{apply_transform, axis_angle_matrix, PointCloud, RigidScaleTransform};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub rotation_enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of per-coordinate Gaussian jitter (meters); 0 disables.
    #[serde(default)]
    pub jitter_sigma: f64,
    /// Probability of removing each point; 0 disables.
    #[serde(default)]
    pub dropout: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_enabled: true,
            scale_min: 0.8,
            scale_max: 1.2,
            jitter_sigma: 0.0,
            dropout: 0.0,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "augment: need 0 < scale_min <= scale_max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.jitter_sigma >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("augment: jitter_sigma >= 0 and dropout in [0, 1) required".into()));
        }
        Ok(())
    }
}

/// Raw draw behind a sampled transform. `axis` is a unit vector; with
/// rotation disabled it is `None` and the angle is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformDraw {
    pub axis: Option<[f64; 3]>,
    pub angle: f64,
    pub scale: f64,
}

impl TransformDraw {
    pub fn to_transform<T: Scalar>(&self) -> RigidScaleTransform<T> {
        let rotation = match self.axis {
            Some(axis) => axis_angle_matrix(axis.map(T::lit), T::lit(self.angle)).expect("unit axis"),
            None => crate::linalg::mat3_identity(),
        };
        RigidScaleTransform::new(rotation, [T::zero(); 3], T::lit(self.scale)).expect("valid sampled transform")
    }
}

/// Axis uniform on the unit sphere, angle uniform in `[0, 2π)`, scale uniform
/// in `[scale_min, scale_max]`.
pub fn sample_draw<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> TransformDraw {
    let (axis, angle) = if cfg.rotation_enabled {
        // An isotropic Gaussian direction is uniform on the sphere.
        let a = loop {
            let a: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
            let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                break a.map(|v| v / n);
            }
        };
        (Some(a), rng.random_range(0.0..std::f64::consts::TAU))
    } else {
        (None, 0.0)
    };
    let scale = if cfg.scale_min < cfg.scale_max {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    TransformDraw { axis, angle, scale }
}

/// Rotation about a uniformly random axis by a uniform angle in `[0, 2π)`,
/// times a uniform scale in `[scale_min, scale_max]`. No translation.
pub fn sample_transform<T: Scalar, R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> RigidScaleTransform<T> {
    sample_draw(cfg, rng).to_transform()
}

/// One augmented view: the transformed cloud, the transform used and the
/// indices of the original points that survived dropout.
#[derive(Debug, Clone)]
pub struct AugmentedView<T> {
    pub cloud: PointCloud<T>,
    pub transform: RigidScaleTransform<T>,
    pub kept: Vec<usize>,
}

pub fn augment_view<T: Scalar, R: Rng + ?Sized>(
    pc: &PointCloud<T>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentedView<T>> {
    let transform = sample_transform(cfg, rng);
    let mut cloud = apply_transform(pc, &transform)?;
    let mut kept: Vec<usize> = (0..pc.len()).collect();
    if cfg.dropout > 0.0 {
        kept.retain(|_| !rng.random_bool(cfg.dropout));
        if kept.is_empty() {
            kept.push(0);
        }
        cloud = cloud.select(&kept)?;
    }
    if cfg.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let pts = cloud
            .points()
            .iter()
            .map(|p| p.map(|c| c + T::lit(noise.sample(rng))))
            .collect();
        cloud = PointCloud::with_features(pts, cloud.features().cloned())?;
    }
    Ok(AugmentedView { cloud, transform, kept })
}

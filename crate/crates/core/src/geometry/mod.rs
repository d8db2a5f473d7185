//! Point clouds, rigid+scale transforms and nearest-neighbor search.

mod kdtree;
pub mod ply;

pub use kdtree::{brute_force_nearest, NeighborIndex};

use crate::linalg::{
    add3, cross3, dot3, mat3_det, mat3_identity, mat3_transpose, mat3_vec, norm3,
    orthonormality_error, rotation_tolerance, scale3, Mat3, Matrix, Vec3,
};
use crate::{Error, Result, Scalar};

/// Ordered 3D points with optional per-point feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Vec3<T>>,
    features: Option<Matrix<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        Self::with_features(points, None)
    }

    pub fn with_features(points: Vec<Vec3<T>>, features: Option<Matrix<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("point count must be at least 1".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        if let Some(f) = &features {
            if f.rows() != points.len() {
                return Err(Error::InvalidCloud(format!(
                    "{} feature rows for {} points",
                    f.rows(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, features })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    #[inline]
    pub fn features(&self) -> Option<&Matrix<T>> {
        self.features.as_ref()
    }

    /// Sub-cloud made of the given point indices, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pts = idx.iter().map(|&i| self.points[i]).collect();
        let feats = self.features.as_ref().map(|f| f.gather_rows(idx));
        Self::with_features(pts, feats)
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.map(|c| U::lit(c.as_f64())))
                .collect(),
            features: self.features.as_ref().map(Matrix::cast),
        }
    }

    /// Applies `t` to every point; features are copied unchanged.
    pub fn transform(&self, t: &RigidScaleTransform<T>) -> Result<Self> {
        apply_transform(self, t)
    }
}

/// `p ↦ scale · (rotation · p) + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidScaleTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
    scale: T,
}

impl<T: Scalar> RigidScaleTransform<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>, scale: T) -> Result<Self> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::InvalidTransform(format!("scale must be positive, got {scale}")));
        }
        if rotation.iter().flatten().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let tol = rotation_tolerance::<T>();
        if orthonormality_error(&rotation) > tol || (mat3_det(&rotation) - T::one()).abs() > tol {
            return Err(Error::InvalidTransform(
                "rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: mat3_identity(),
            translation: [T::zero(); 3],
            scale: T::one(),
        }
    }

    pub fn translation(t: Vec3<T>) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rodrigues rotation about `axis` (any nonzero length) by `angle` radians.
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Result<Self> {
        Self::new(axis_angle_matrix(axis, angle)?, [T::zero(); 3], T::one())
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation_vec(&self) -> &Vec3<T> {
        &self.translation
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn with_scale(mut self, scale: T) -> Result<Self> {
        Self::new(self.rotation, self.translation, scale).map(|t| {
            self.scale = t.scale;
            self
        })
    }

    #[inline]
    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        add3(&scale3(&mat3_vec(&self.rotation, p), self.scale), &self.translation)
    }

    /// `p = Rᵀ (p' − t) / s`.
    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.rotation);
        let inv_s = T::one() / self.scale;
        let t = scale3(&mat3_vec(&rt, &self.translation), -inv_s);
        Self {
            rotation: rt,
            translation: t,
            scale: inv_s,
        }
    }
}

pub(crate) fn axis_angle_matrix<T: Scalar>(axis: Vec3<T>, angle: T) -> Result<Mat3<T>> {
    let n = norm3(&axis);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::InvalidTransform("rotation axis must be nonzero".into()));
    }
    let k = scale3(&axis, T::one() / n);
    let (s, c) = angle.sin_cos();
    let v = T::one() - c;
    let (x, y, z) = (k[0], k[1], k[2]);
    Ok([
        [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
        [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
        [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
    ])
}

/// Rotation whose columns are the camera axes (right, down, forward) looking from `eye` to `target`.
pub(crate) fn look_at_rotation<T: Scalar>(eye: &Vec3<T>, target: &Vec3<T>, up: &Vec3<T>) -> Result<Mat3<T>> {
    let f = crate::linalg::sub3(target, eye);
    let fnorm = norm3(&f);
    if !(fnorm > T::zero()) {
        return Err(Error::InvalidTransform("camera eye equals target".into()));
    }
    let fwd = scale3(&f, T::one() / fnorm);
    let r = cross3(&fwd, up);
    let rnorm = norm3(&r);
    if !(rnorm > T::lit(1e-9)) {
        return Err(Error::InvalidTransform("view direction parallel to up vector".into()));
    }
    let right = scale3(&r, T::one() / rnorm);
    let down = cross3(&fwd, &right);
    debug_assert!(dot3(&down, up) <= T::zero());
    Ok([
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ])
}

pub fn apply_transform<T: Scalar>(pc: &PointCloud<T>, t: &RigidScaleTransform<T>) -> Result<PointCloud<T>> {
    let mut points = Vec::with_capacity(pc.len());
    for p in &pc.points {
        let q = t.apply(p);
        if q.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidTransform("transform produced a non-finite point".into()));
        }
        points.push(q);
    }
    Ok(PointCloud {
        points,
        features: pc.features.clone(),
    })
}

pub fn build_index<T: Scalar>(pc: &PointCloud<T>) -> NeighborIndex<T> {
    NeighborIndex::new(pc.points().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cloud() -> PointCloud<f64> {
        PointCloud::new(vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 4.0], [0.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn identity_is_noop() {
        let pc = cloud();
        assert_eq!(apply_transform(&pc, &RigidScaleTransform::identity()).unwrap(), pc);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidScaleTransform::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2).unwrap();
        let q = t.apply(&[1.0, 0.0, 0.0]);
        for (a, b) in q.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_scale() {
        let t = RigidScaleTransform::<f64>::identity().with_scale(2.0).unwrap();
        assert_eq!(t.apply(&[1.0, 2.0, 3.0]), [2.0, 4.0, 6.0]);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(PointCloud::<f64>::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloud::with_features(vec![[0.0; 3]], Some(Matrix::zeros(2, 1))).is_err());
        let refl = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidScaleTransform::new(refl, [0.0; 3], 1.0).is_err());
        assert!(RigidScaleTransform::new(mat3_identity(), [0.0; 3], 0.0).is_err());
        let huge = RigidScaleTransform::new(mat3_identity(), [0.0; 3], f64::MAX).unwrap();
        let pc = PointCloud::new(vec![[f64::MAX, 0.0, 0.0]]).unwrap();
        assert!(matches!(apply_transform(&pc, &huge), Err(Error::InvalidTransform(_))));
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let r = look_at_rotation(&[0.0f64, 0.0, 0.0], &[2.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!([r[0][2], r[1][2], r[2][2]], [1.0, 0.0, 0.0]);
        assert!((mat3_det(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f32_transform() {
        let t = RigidScaleTransform::<f32>::from_axis_angle([0.0, 1.0, 0.0], 0.7).unwrap();
        let pc = cloud().cast::<f32>();
        let back = apply_transform(&apply_transform(&pc, &t).unwrap(), &t.inverse()).unwrap();
        for (a, b) in back.points().iter().zip(pc.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
    }
}

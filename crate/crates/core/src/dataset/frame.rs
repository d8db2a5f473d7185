use std::io::{Read, Write};

use crate::error::format_err;
use crate::geometry::PointCloud;
use crate::io::{read_f32, read_f64, read_magic, read_u32};
use crate::linalg::{mat3_det, orthonormality_error, rotation_tolerance, Mat3, Vec3};
use crate::{Error, Result, Scalar};

pub const FRAME_MAGIC: &[u8; 4] = b"PCFD";

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

/// One depth image with its intrinsics and camera-to-world pose.
///
/// Depths are meters, stored row-major; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame<T> {
    height: usize,
    width: usize,
    depth: Vec<f32>,
    intrinsics: Intrinsics<T>,
    pose: [[T; 4]; 4],
}

impl<T: Scalar> DepthFrame<T> {
    pub fn new(
        height: usize,
        width: usize,
        depth: Vec<f32>,
        intrinsics: Intrinsics<T>,
        pose: [[T; 4]; 4],
    ) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::InvalidFrame(format!(
                "{} depth values for a {height}x{width} image",
                depth.len()
            )));
        }
        if !(intrinsics.fx > T::zero() && intrinsics.fy > T::zero()) {
            return Err(Error::InvalidFrame("focal lengths must be positive".into()));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidFrame("depths must be finite and non-negative".into()));
        }
        let rot = rotation_of(&pose);
        let tol = rotation_tolerance::<T>();
        if orthonormality_error(&rot) > tol || (mat3_det(&rot) - T::one()).abs() > tol {
            return Err(Error::InvalidFrame("pose rotation must be orthonormal with det +1".into()));
        }
        if pose.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame("pose must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            depth,
            intrinsics,
            pose,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn intrinsics(&self) -> &Intrinsics<T> {
        &self.intrinsics
    }

    pub fn pose(&self) -> &[[T; 4]; 4] {
        &self.pose
    }

    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FRAME_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        let k = &self.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        for v in self.pose.iter().flatten() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        for d in &self.depth {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, FRAME_MAGIC, "frame")?;
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let mut k = [T::zero(); 4];
        for v in &mut k {
            *v = T::lit(read_f64(r)?);
        }
        let mut pose = [[T::zero(); 4]; 4];
        for v in pose.iter_mut().flatten() {
            *v = T::lit(read_f64(r)?);
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| format_err("frame", "implausible image size"))?;
        let mut depth = Vec::with_capacity(n);
        for _ in 0..n {
            depth.push(read_f32(r)?);
        }
        Self::new(
            height,
            width,
            depth,
            Intrinsics {
                fx: k[0],
                fy: k[1],
                cx: k[2],
                cy: k[3],
            },
            pose,
        )
    }
}

pub(crate) fn rotation_of<T: Scalar>(pose: &[[T; 4]; 4]) -> Mat3<T> {
    let mut r = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = pose[i][j];
        }
    }
    r
}

pub fn pose_from_parts<T: Scalar>(rotation: &Mat3<T>, translation: &Vec3<T>) -> [[T; 4]; 4] {
    let mut pose = [[T::zero(); 4]; 4];
    for i in 0..3 {
        pose[i][..3].copy_from_slice(&rotation[i]);
        pose[i][3] = translation[i];
    }
    pose[3][3] = T::one();
    pose
}

/// Lifts every valid pixel `(u, v)` with depth `d` to the camera point
/// `((u − cx)·d/fx, (v − cy)·d/fy, d)` and maps it to world coordinates with
/// the frame pose. Pixels are visited row-major.
pub fn backproject<T: Scalar>(frame: &DepthFrame<T>) -> Result<PointCloud<T>> {
    let k = &frame.intrinsics;
    let p = &frame.pose;
    let mut points = Vec::with_capacity(frame.valid_pixels());
    for v in 0..frame.height {
        for u in 0..frame.width {
            let d = frame.depth[v * frame.width + u];
            if d <= 0.0 {
                continue;
            }
            let d = T::lit(d as f64);
            let x = (T::from_usize_lossy(u) - k.cx) * d / k.fx;
            let y = (T::from_usize_lossy(v) - k.cy) * d / k.fy;
            let cam = [x, y, d];
            let mut w = [T::zero(); 3];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = p[i][0] * cam[0] + p[i][1] * cam[1] + p[i][2] * cam[2] + p[i][3];
            }
            points.push(w);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyView);
    }
    PointCloud::new(points)
}

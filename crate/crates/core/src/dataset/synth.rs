//! Procedural indoor scenes rendered to depth frames.
//!
//! A scene is a set of axis-aligned rectangles (room shell, free-standing
//! panels and box faces) sampled into surface points. Each camera renders a
//! depth image by projecting those points and keeping the nearest depth per
//! pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::frame::{pose_from_parts, DepthFrame, Intrinsics};
use crate::geometry::look_at_rotation;
use crate::linalg::{mat3_transpose, mat3_vec, sub3, Vec3};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Room extents along x, y, z (meters); `None` for no enclosing shell.
    pub room: Option<[f64; 3]>,
    pub box_count: usize,
    /// Side length range for boxes (meters).
    pub box_extent: [f64; 2],
    pub plane_count: usize,
    /// Side length range for free-standing vertical panels (meters).
    pub plane_extent: [f64; 2],
    /// Surface samples per square meter.
    pub density: f64,
    pub cameras: CameraRig,
}

/// Cameras spaced evenly along a horizontal arc around the room center,
/// each looking at a jittered point near the center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub orbit_radius: f64,
    /// Total arc swept by the trajectory (degrees).
    pub arc_degrees: f64,
    pub eye_height: f64,
    pub target_height: f64,
    /// Uniform jitter on the look-at target (meters).
    pub target_jitter: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            room: Some([4.0, 4.0, 2.5]),
            box_count: 6,
            box_extent: [0.3, 0.9],
            plane_count: 2,
            plane_extent: [0.6, 1.4],
            density: 4000.0,
            cameras: CameraRig::default(),
        }
    }
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            count: 8,
            width: 80,
            height: 60,
            fx: 60.0,
            fy: 60.0,
            orbit_radius: 1.5,
            arc_degrees: 120.0,
            eye_height: 1.4,
            target_height: 0.6,
            target_jitter: 0.3,
        }
    }
}

/// Axis-aligned rectangle: the plane `x[axis] = offset`, spanning `lo..hi` on
/// the two remaining axes (in increasing axis order).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub axis: usize,
    pub offset: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    fn other_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    /// Stratified samples: one jittered point per grid cell of side `1/√density`.
    fn sample(&self, density: f64, rng: &mut ChaCha8Rng, out: &mut Vec<[f64; 3]>) {
        let step = 1.0 / density.sqrt();
        let [a, b] = self.other_axes();
        let nu = ((self.hi[0] - self.lo[0]) / step).ceil().max(1.0) as usize;
        let nv = ((self.hi[1] - self.lo[1]) / step).ceil().max(1.0) as usize;
        let du = (self.hi[0] - self.lo[0]) / nu as f64;
        let dv = (self.hi[1] - self.lo[1]) / nv as f64;
        for i in 0..nu {
            for j in 0..nv {
                let mut p = [0.0; 3];
                p[self.axis] = self.offset;
                p[a] = self.lo[0] + (i as f64 + rng.random::<f64>()) * du;
                p[b] = self.lo[1] + (j as f64 + rng.random::<f64>()) * dv;
                out.push(p);
            }
        }
    }
}

fn box_faces(min: [f64; 3], max: [f64; 3]) -> [Rect; 6] {
    let face = |axis: usize, offset: f64| {
        let [a, b] = match axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        Rect {
            axis,
            offset,
            lo: [min[a], min[b]],
            hi: [max[a], max[b]],
        }
    };
    [
        face(0, min[0]),
        face(0, max[0]),
        face(1, min[1]),
        face(1, max[1]),
        face(2, min[2]),
        face(2, max[2]),
    ]
}

/// A pinhole camera placed in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub eye: Vec3<f64>,
    pub target: Vec3<f64>,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Sampled scene surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
}

impl Scene {
    pub fn from_rects(rects: &[Rect], density: f64, seed: u64) -> Result<Self> {
        if rects.is_empty() {
            return Err(Error::DegenerateScene("scene has zero primitives".into()));
        }
        if !(density > 0.0) {
            return Err(Error::DegenerateScene("density must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        for r in rects {
            r.sample(density, &mut rng, &mut points);
        }
        Ok(Self { points })
    }

    /// Renders a depth frame; each pixel keeps the minimum camera depth of the
    /// points projecting into it.
    pub fn render<T: Scalar>(&self, cam: &Camera) -> Result<DepthFrame<T>> {
        let rot = look_at_rotation(&cam.eye, &cam.target, &[0.0, 0.0, 1.0])?;
        let rt = mat3_transpose(&rot);
        let (cx, cy) = ((cam.width as f64 - 1.0) / 2.0, (cam.height as f64 - 1.0) / 2.0);
        let mut depth = vec![0f32; cam.width * cam.height];
        for p in &self.points {
            let c = mat3_vec(&rt, &sub3(p, &cam.eye));
            if c[2] <= 1e-3 {
                continue;
            }
            let u = (cam.fx * c[0] / c[2] + cx).round();
            let v = (cam.fy * c[1] / c[2] + cy).round();
            if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                continue;
            }
            let k = v as usize * cam.width + u as usize;
            let z = c[2] as f32;
            if depth[k] == 0.0 || z < depth[k] {
                depth[k] = z;
            }
        }
        let lit = |v: f64| T::lit(v);
        let pose = pose_from_parts(&rot.map(|r| r.map(lit)), &cam.eye.map(lit));
        DepthFrame::new(
            cam.height,
            cam.width,
            depth,
            Intrinsics {
                fx: lit(cam.fx),
                fy: lit(cam.fy),
                cx: lit(cx),
                cy: lit(cy),
            },
            pose,
        )
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.is_none() && self.box_count == 0 && self.plane_count == 0 {
            return Err(Error::DegenerateScene("scene has zero primitives".into()));
        }
        let c = &self.cameras;
        if c.count == 0 || c.width == 0 || c.height == 0 {
            return Err(Error::DegenerateScene("camera rig renders no pixels".into()));
        }
        if !(c.fx > 0.0 && c.fy > 0.0 && self.density > 0.0) {
            return Err(Error::DegenerateScene("focal lengths and density must be positive".into()));
        }
        for [lo, hi] in [self.box_extent, self.plane_extent] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::DegenerateScene("extent ranges must satisfy 0 < min <= max".into()));
            }
        }
        if let Some(room) = self.room {
            if room.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::DegenerateScene("room extents must be positive".into()));
            }
        }
        Ok(())
    }

    /// Primitives and cameras drawn from the seeded generator.
    pub fn layout(&self) -> Result<(Vec<Rect>, Vec<Camera>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let room = self.room.unwrap_or([4.0, 4.0, 2.5]);
        let half = [room[0] / 2.0, room[1] / 2.0];
        let mut rects = Vec::new();
        if self.room.is_some() {
            rects.extend(box_faces([-half[0], -half[1], 0.0], [half[0], half[1], room[2]]));
        }
        for _ in 0..self.box_count {
            let e = [0, 1, 2].map(|_| rng.random_range(self.box_extent[0]..=self.box_extent[1]));
            let cx = rng.random_range(-half[0] * 0.6..=half[0] * 0.6);
            let cy = rng.random_range(-half[1] * 0.6..=half[1] * 0.6);
            let lift = if rng.random::<f64>() < 0.3 { rng.random_range(0.0..=0.6) } else { 0.0 };
            let min = [cx - e[0] / 2.0, cy - e[1] / 2.0, lift];
            let max = [cx + e[0] / 2.0, cy + e[1] / 2.0, lift + e[2]];
            rects.extend(box_faces(min, max));
        }
        for _ in 0..self.plane_count {
            let w = rng.random_range(self.plane_extent[0]..=self.plane_extent[1]);
            let h = rng.random_range(self.plane_extent[0]..=self.plane_extent[1]).min(room[2]);
            let axis = rng.random_range(0..2usize);
            let offset = rng.random_range(-half[axis] * 0.7..=half[axis] * 0.7);
            let other = 1 - axis;
            let c = rng.random_range(-half[other] * 0.6..=half[other] * 0.6);
            rects.push(Rect {
                axis,
                offset,
                lo: [c - w / 2.0, 0.0],
                hi: [c + w / 2.0, h],
            });
        }
        let rig = &self.cameras;
        let start = rng.random_range(0.0..std::f64::consts::TAU);
        let arc = rig.arc_degrees.to_radians();
        let cameras = (0..rig.count)
            .map(|k| {
                let t = if rig.count > 1 { k as f64 / (rig.count - 1) as f64 } else { 0.0 };
                let ang = start + arc * t;
                let eye = [rig.orbit_radius * ang.cos(), rig.orbit_radius * ang.sin(), rig.eye_height];
                let j = rig.target_jitter;
                let target = [
                    rng.random_range(-j..=j),
                    rng.random_range(-j..=j),
                    rig.target_height,
                ];
                Camera {
                    eye,
                    target,
                    width: rig.width,
                    height: rig.height,
                    fx: rig.fx,
                    fy: rig.fy,
                }
            })
            .collect();
        Ok((rects, cameras))
    }
}

/// Deterministic in `spec.seed`: equal specs give bit-identical frames.
pub fn synthesize_scene<T: Scalar>(spec: &SyntheticSceneSpec) -> Result<Vec<DepthFrame<T>>> {
    let (rects, cameras) = spec.layout()?;
    let scene = Scene::from_rects(&rects, spec.density, spec.seed ^ 0x5EED_5CE7E)?;
    cameras.iter().map(|c| scene.render(c)).collect()
}

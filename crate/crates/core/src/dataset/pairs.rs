use std::io::{BufRead, Write};

use log::warn;

use crate::dataset::frame::{backproject, DepthFrame};
use crate::error::format_err;
use crate::geometry::ply::{read_ply, write_ply, PlyEncoding};
use crate::geometry::{NeighborIndex, PointCloud};
use crate::io::{read_f64, read_magic, read_u32, read_u64};
use crate::linalg::dist2;
use crate::voxel::quantize;
use crate::{Error, Result, Scalar};

pub const PAIR_MAGIC: &[u8; 4] = b"PCPR";

/// Index pairs `(i, j)` linking points of the first view to the second.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrespondenceMap {
    matches: Vec<(usize, usize)>,
}

impl CorrespondenceMap {
    /// Validates index ranges against the view sizes and rejects duplicates.
    pub fn new(matches: Vec<(usize, usize)>, n1: usize, n2: usize) -> Result<Self> {
        if let Some(&(i, j)) = matches.iter().find(|&&(i, j)| i >= n1 || j >= n2) {
            return Err(format_err("correspondence", format!("match ({i}, {j}) out of range")));
        }
        let mut sorted = matches.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(format_err("correspondence", "duplicate match"));
        }
        Ok(Self { matches })
    }

    pub fn matches(&self) -> &[(usize, usize)] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Two partial views of one scene in a shared world frame, with their matches.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair<T> {
    pub x1: PointCloud<T>,
    pub x2: PointCloud<T>,
    pub correspondences: CorrespondenceMap,
    pub overlap: f64,
    pub scene_id: String,
    pub frame_ids: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGenConfig<T> {
    /// Keep every `stride`-th frame.
    pub stride: usize,
    pub overlap_threshold: f64,
    /// Match radius (meters).
    pub radius: T,
    /// Views are reduced to voxel centers at this size before matching.
    pub voxel_size: T,
}

impl<T: Scalar> Default for PairGenConfig<T> {
    fn default() -> Self {
        Self {
            stride: 25,
            overlap_threshold: 0.30,
            radius: T::lit(0.025),
            voxel_size: T::lit(0.025),
        }
    }
}

impl<T: Scalar> PairGenConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::Config("overlap threshold must lie in (0, 1]".into()));
        }
        if !(self.radius >= T::zero()) || !(self.voxel_size > T::zero()) {
            return Err(Error::Config("radius must be >= 0 and voxel size > 0".into()));
        }
        Ok(())
    }
}

fn inlier_fraction<T: Scalar>(from: &PointCloud<T>, to: &NeighborIndex<T>, radius: T) -> f64 {
    let hits = from
        .points()
        .iter()
        .filter(|p| to.has_neighbor_within(p, radius))
        .count();
    hits as f64 / from.len() as f64
}

/// `min` of the two directed fractions of points having a neighbor within
/// `radius` in the other cloud.
pub fn compute_overlap<T: Scalar>(x1: &PointCloud<T>, x2: &PointCloud<T>, radius: T) -> f64 {
    let i1 = NeighborIndex::from_cloud(x1);
    let i2 = NeighborIndex::from_cloud(x2);
    inlier_fraction(x1, &i2, radius).min(inlier_fraction(x2, &i1, radius))
}

/// Nearest neighbor in `x2` for every point of `x1`, kept when within `radius`.
pub fn compute_correspondences<T: Scalar>(x1: &PointCloud<T>, x2: &PointCloud<T>, radius: T) -> CorrespondenceMap {
    let idx = NeighborIndex::from_cloud(x2);
    let matches = x1
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d) = idx.nearest(p)?;
            (d <= radius).then_some((i, j))
        })
        .collect();
    CorrespondenceMap { matches }
}

/// Back-projects a frame and reduces it to the centers of its occupied
/// voxels, rounded to single precision so stored views reload bit-exactly.
pub fn prepare_view<T: Scalar>(frame: &DepthFrame<T>, voxel_size: T) -> Result<PointCloud<T>> {
    let pc = backproject(frame)?;
    let vox = quantize(&pc, voxel_size)?;
    let pts = vox
        .centers()
        .into_iter()
        .map(|c| c.map(|v| T::lit(v.as_f64() as f32 as f64)))
        .collect();
    PointCloud::new(pts)
}

/// Views at frame indices `0, stride, 2·stride, …`; every unordered pair of
/// views whose overlap reaches the threshold is emitted with its matches.
/// Frames without valid pixels are skipped.
pub fn generate_pairs<T: Scalar>(
    frames: &[DepthFrame<T>],
    cfg: &PairGenConfig<T>,
    scene_id: &str,
) -> Result<Vec<ScenePair<T>>> {
    cfg.validate()?;
    let mut views = Vec::new();
    for fid in (0..frames.len()).step_by(cfg.stride) {
        match prepare_view(&frames[fid], cfg.voxel_size) {
            Ok(v) => views.push((fid, v)),
            Err(Error::EmptyView) => warn!("{scene_id}: frame {fid} has no valid depth, skipped"),
            Err(e) => return Err(e),
        }
    }
    let indices: Vec<_> = views.iter().map(|(_, v)| NeighborIndex::from_cloud(v)).collect();
    let mut pairs = Vec::new();
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            let (x1, x2) = (&views[a].1, &views[b].1);
            let overlap = inlier_fraction(x1, &indices[b], cfg.radius)
                .min(inlier_fraction(x2, &indices[a], cfg.radius));
            if overlap < cfg.overlap_threshold {
                continue;
            }
            let correspondences = compute_correspondences(x1, x2, cfg.radius);
            if correspondences.is_empty() {
                continue;
            }
            pairs.push(ScenePair {
                x1: x1.clone(),
                x2: x2.clone(),
                correspondences,
                overlap,
                scene_id: scene_id.to_string(),
                frame_ids: (views[a].0, views[b].0),
            });
        }
    }
    Ok(pairs)
}

impl<T: Scalar> ScenePair<T> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PAIR_MAGIC)?;
        write_ply(&self.x1, PlyEncoding::BinaryLittleEndian, w)?;
        write_ply(&self.x2, PlyEncoding::BinaryLittleEndian, w)?;
        w.write_all(&(self.correspondences.len() as u64).to_le_bytes())?;
        for &(i, j) in self.correspondences.matches() {
            w.write_all(&(i as u32).to_le_bytes())?;
            w.write_all(&(j as u32).to_le_bytes())?;
        }
        w.write_all(&self.overlap.to_le_bytes())?;
        Ok(())
    }

    /// Reads a pair file body. Identifiers are not part of the format and
    /// are supplied by the caller.
    pub fn read_from<R: BufRead>(r: &mut R, scene_id: &str, frame_ids: (usize, usize)) -> Result<Self> {
        read_magic(r, PAIR_MAGIC, "pair")?;
        let x1 = read_ply(r)?;
        let x2 = read_ply(r)?;
        let n = read_u64(r)? as usize;
        if n > x1.len() * x2.len() {
            return Err(format_err("pair", "match count exceeds view sizes"));
        }
        let mut matches = Vec::with_capacity(n);
        for _ in 0..n {
            let i = read_u32(r)? as usize;
            let j = read_u32(r)? as usize;
            matches.push((i, j));
        }
        let overlap = read_f64(r)?;
        let correspondences = CorrespondenceMap::new(matches, x1.len(), x2.len())?;
        Ok(Self {
            x1,
            x2,
            correspondences,
            overlap,
            scene_id: scene_id.to_string(),
            frame_ids,
        })
    }

    /// Re-checks the emitted invariants: overlap recomputes to the stored
    /// value and reaches `threshold`, and every match is within `radius`.
    pub fn revalidate(&self, radius: T, threshold: f64) -> Result<()> {
        if self.correspondences.is_empty() {
            return Err(format_err("pair", "no correspondences"));
        }
        let overlap = compute_overlap(&self.x1, &self.x2, radius);
        if (overlap - self.overlap).abs() > 1e-12 {
            return Err(format_err(
                "pair",
                format!("stored overlap {} but recomputed {overlap}", self.overlap),
            ));
        }
        if overlap < threshold {
            return Err(format_err("pair", format!("overlap {overlap} below threshold {threshold}")));
        }
        for &(i, j) in self.correspondences.matches() {
            if dist2(&self.x1.points()[i], &self.x2.points()[j]).sqrt() > radius {
                return Err(format_err("pair", format!("match ({i}, {j}) farther than radius")));
            }
        }
        Ok(())
    }
}

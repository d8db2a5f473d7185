//! Sparse voxel tensors: quantization of point clouds onto an integer grid
//! and the coordinate hash used for kernel-neighbor lookups.

use std::sync::Arc;

use crate::geometry::PointCloud;
use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

pub type VoxelCoord = [i32; 3];

const EMPTY: u32 = u32::MAX;

#[inline]
fn mix(c: &VoxelCoord) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut h = ((c[0] as u32 as u64) | ((c[1] as u32 as u64) << 32))
        ^ (c[2] as u32 as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Ordered set of unique voxel coordinates with O(1) coordinate→row lookup
/// (open addressing, linear probing). Row order is insertion order, so
/// results never depend on table layout.
#[derive(Debug, Clone)]
pub struct CoordMap {
    coords: Vec<VoxelCoord>,
    slots: Vec<u32>,
    mask: usize,
}

impl PartialEq for CoordMap {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl CoordMap {
    pub fn with_capacity(n: usize) -> Self {
        let cap = (2 * n.max(4)).next_power_of_two();
        Self {
            coords: Vec::with_capacity(n),
            slots: vec![EMPTY; cap],
            mask: cap - 1,
        }
    }

    /// Builds from coordinates that must already be unique.
    pub fn from_unique(coords: Vec<VoxelCoord>) -> Result<Self> {
        let mut map = Self::with_capacity(coords.len());
        for c in coords {
            let (_, fresh) = map.insert(c);
            if !fresh {
                return Err(Error::InvalidCloud(format!("duplicate voxel coordinate {c:?}")));
            }
        }
        Ok(map)
    }

    /// Returns `(row, inserted)`.
    pub fn insert(&mut self, c: VoxelCoord) -> (usize, bool) {
        if (self.coords.len() + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let mut slot = mix(&c) as usize & self.mask;
        loop {
            let s = self.slots[slot];
            if s == EMPTY {
                let row = self.coords.len();
                self.slots[slot] = row as u32;
                self.coords.push(c);
                return (row, true);
            }
            if self.coords[s as usize] == c {
                return (s as usize, false);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    #[inline]
    pub fn get(&self, c: &VoxelCoord) -> Option<usize> {
        let mut slot = mix(c) as usize & self.mask;
        loop {
            let s = self.slots[slot];
            if s == EMPTY {
                return None;
            }
            if self.coords[s as usize] == *c {
                return Some(s as usize);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![EMPTY; cap];
        self.mask = cap - 1;
        for (row, c) in self.coords.iter().enumerate() {
            let mut slot = mix(c) as usize & self.mask;
            while self.slots[slot] != EMPTY {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = row as u32;
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    /// Unique `floor(c / 2)` coordinates in first-occurrence order.
    pub fn downsample(&self) -> CoordMap {
        let mut out = CoordMap::with_capacity(self.len() / 2 + 1);
        for c in &self.coords {
            out.insert(c.map(|v| v.div_euclid(2)));
        }
        out
    }
}

/// Active coordinates plus one feature row per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T> {
    pub coords: Arc<CoordMap>,
    pub features: Matrix<T>,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(coords: Arc<CoordMap>, features: Matrix<T>) -> Result<Self> {
        if coords.len() != features.rows() {
            return Err(Error::InvalidCloud(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        Ok(Self { coords, features })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

/// Quantized point cloud: a sparse tensor plus the map from every original
/// point to the row of the voxel it fell into.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor<T> {
    pub tensor: SparseTensor<T>,
    pub voxel_size: T,
    pub origin_map: Vec<usize>,
}

impl<T: Scalar> SparseVoxelTensor<T> {
    pub fn coords(&self) -> &[VoxelCoord] {
        self.tensor.coords.coords()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.tensor.features
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    /// For each voxel row, the lowest-index original point inside it.
    pub fn representatives(&self) -> Vec<usize> {
        let mut rep = vec![usize::MAX; self.len()];
        for (i, &row) in self.origin_map.iter().enumerate() {
            if rep[row] == usize::MAX {
                rep[row] = i;
            }
        }
        rep
    }

    /// World-space centers of the voxels, one per row.
    pub fn centers(&self) -> Vec<[T; 3]> {
        let half = T::lit(0.5);
        self.coords()
            .iter()
            .map(|c| c.map(|v| (T::lit(v as f64) + half) * self.voxel_size))
            .collect()
    }
}

#[inline]
pub fn voxel_of<T: Scalar>(p: &[T; 3], voxel_size: T) -> VoxelCoord {
    p.map(|v| {
        (v / voxel_size)
            .floor()
            .to_i32()
            .expect("voxel coordinate out of i32 range")
    })
}

/// `floor(p / voxel_size)` per point. Colliding points share a voxel whose
/// feature row comes from the lowest-index point; with no point features the
/// tensor carries a single constant-one channel.
pub fn quantize<T: Scalar>(pc: &PointCloud<T>, voxel_size: T) -> Result<SparseVoxelTensor<T>> {
    if !(voxel_size > T::zero()) || !voxel_size.is_finite() {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut map = CoordMap::with_capacity(pc.len());
    let mut origin_map = Vec::with_capacity(pc.len());
    let mut first_point = Vec::new();
    for (i, p) in pc.points().iter().enumerate() {
        let (row, fresh) = map.insert(voxel_of(p, voxel_size));
        if fresh {
            first_point.push(i);
        }
        origin_map.push(row);
    }
    let features = match pc.features() {
        Some(f) => f.gather_rows(&first_point),
        None => Matrix::filled(map.len(), 1, T::one()),
    };
    Ok(SparseVoxelTensor {
        tensor: SparseTensor::new(Arc::new(map), features)?,
        voxel_size,
        origin_map,
    })
}

/// Row `i` of the output is the feature row of original point `i`'s voxel.
pub fn devoxelize<T: Scalar>(t: &SparseVoxelTensor<T>) -> Matrix<T> {
    t.tensor.features.gather_rows(&t.origin_map)
}

pub fn voxel_hash_lookup<T: Scalar>(t: &SparseVoxelTensor<T>, coord: &VoxelCoord) -> Option<usize> {
    t.tensor.coords.get(coord)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_voxel() {
        let pc = PointCloud::new(vec![[0.01, 0.01, 0.01], [0.04, 0.04, 0.04]]).unwrap();
        let t = quantize(&pc, 0.05).unwrap();
        assert_eq!(t.coords(), &[[0, 0, 0]]);
        assert_eq!(t.origin_map, vec![0, 0]);
    }

    #[test]
    fn floor_semantics_for_negatives() {
        let pc = PointCloud::new(vec![[-0.01, 0.0, 0.0]]).unwrap();
        assert_eq!(quantize(&pc, 0.05).unwrap().coords(), &[[-1, 0, 0]]);
    }

    #[test]
    fn unit_cube_is_one_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = (0..1000).map(|_| rng.random::<[f64; 3]>()).collect();
        let t = quantize(&PointCloud::new(pts).unwrap(), 1.0).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn lowest_index_feature_wins() {
        let f = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let pc = PointCloud::with_features(vec![[0.9, 0.0, 0.0], [0.1, 0.0, 0.0], [1.5, 0.0, 0.0]], Some(f)).unwrap();
        let t = quantize(&pc, 1.0).unwrap();
        assert_eq!(t.features().as_slice(), &[1.0, 3.0]);
        assert_eq!(devoxelize(&t).as_slice(), &[1.0, 1.0, 3.0]);
        assert_eq!(t.representatives(), vec![0, 2]);
    }

    #[test]
    fn lookup_present_and_absent() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [3.2, -1.0, 0.5]]).unwrap();
        let t = quantize(&pc, 1.0).unwrap();
        assert_eq!(voxel_hash_lookup(&t, &[3, -1, 0]), Some(1));
        assert_eq!(voxel_hash_lookup(&t, &[0, 0, 0]), Some(0));
        assert_eq!(voxel_hash_lookup(&t, &[1, 1, 1]), None);
    }

    #[test]
    fn coord_map_round_trips_many_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut map = CoordMap::with_capacity(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20_000 {
            let c = [rng.random_range(-50..50), rng.random_range(-50..50), rng.random_range(-5..5)];
            let (_, fresh) = map.insert(c);
            assert_eq!(fresh, seen.insert(c));
        }
        for (row, c) in map.coords().iter().enumerate() {
            assert_eq!(map.get(c), Some(row));
        }
        assert!(CoordMap::from_unique(vec![[0, 0, 0], [0, 0, 0]]).is_err());
    }

    #[test]
    fn downsample_floors_negative_coords() {
        let map = CoordMap::from_unique(vec![[-1, 0, 1], [-2, 1, 0], [3, 3, 3]]).unwrap();
        assert_eq!(map.downsample().coords(), &[[-1, 0, 0], [1, 1, 1]]);
    }
}

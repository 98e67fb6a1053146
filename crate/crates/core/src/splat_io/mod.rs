//! Splat and point-cloud ingestion: PLY I/O, per-sample normalization,
//! voxel assignment, synthetic shapes and dataset splits.

mod dataset;
mod ply;
mod synthetic;
mod voxel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tensor};
use crate::error::{Error, Result};

pub use dataset::{split_dataset, Dataset, DatasetSplit, Manifest, ManifestEntry, MANIFEST_VERSION};
pub use ply::{load_ply, read_ply, write_ply, write_ply_with, PlyEncoding};
pub use synthetic::{generate_synthetic, generate_with, ShapeClass, SyntheticConfig};
pub use voxel::{assign_voxels, normalize_positions, VoxelAssignment};

/// Width of the per-primitive network input.
pub const INPUT_FEATURES: usize = 11;

/// Which attribute set a file (and the network input) carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMode {
    /// Position, scale, rotation quaternion, opacity.
    #[serde(rename = "gaussian-11d")]
    Gaussian11,
    /// Position and surface normal.
    #[serde(rename = "pointcloud-6d")]
    PointCloud6,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Gaussian11 => "gaussian-11d",
            FeatureMode::PointCloud6 => "pointcloud-6d",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-11d" => Ok(FeatureMode::Gaussian11),
            "pointcloud-6d" => Ok(FeatureMode::PointCloud6),
            other => Err(Error::Config(format!(
                "unknown feature mode {other:?} (expected gaussian-11d or pointcloud-6d)"
            ))),
        }
    }
}

/// One splat with activated attributes.
///
/// In point-cloud mode `scale` carries the surface normal, and `rotation`
/// and `opacity` are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub position: [f32; 3],
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
    pub opacity: f32,
}

impl GaussianPrimitive {
    pub fn point(position: [f32; 3], normal: [f32; 3]) -> Self {
        Self {
            position,
            scale: normal,
            rotation: [0.0; 4],
            opacity: 0.0,
        }
    }

    pub fn normal(&self) -> [f32; 3] {
        self.scale
    }
}

/// A normalized, voxelized cloud with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub label: usize,
    pub feature_mode: FeatureMode,
    pub primitives: Vec<GaussianPrimitive>,
    /// Per-primitive position mapped into `[0, 1]^3`.
    pub normalized_positions: Vec<[f32; 3]>,
    /// Per-primitive voxel index `v(i)`, fixed at load time.
    pub voxel_index: Vec<u32>,
    /// Primitive count per voxel, length `G^3`.
    pub voxel_counts: Vec<u32>,
    pub grid_size: usize,
    /// Largest axis extent of the raw positions; scales are expressed
    /// relative to it.
    pub extent: f32,
}

impl LabeledSample {
    pub fn new(
        id: impl Into<String>,
        label: usize,
        feature_mode: FeatureMode,
        primitives: Vec<GaussianPrimitive>,
        grid_size: usize,
    ) -> Result<Self> {
        let normalized_positions = normalize_positions(&primitives)?;
        let VoxelAssignment { index, counts } = assign_voxels(&normalized_positions, grid_size)?;
        let extent = raw_extent(&primitives);
        Ok(Self {
            id: id.into(),
            label,
            feature_mode,
            primitives,
            normalized_positions,
            voxel_index: index,
            voxel_counts: counts,
            grid_size,
            extent,
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_counts.len()
    }

    /// Voxel ids with at least one primitive, ascending.
    pub fn occupied_voxels(&self) -> Vec<usize> {
        self.voxel_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(v, _)| v)
            .collect()
    }

    /// Re-assigns voxels on the stored normalized positions for another grid.
    pub fn regrid(&self, grid_size: usize) -> Result<Self> {
        if grid_size == self.grid_size {
            return Ok(self.clone());
        }
        let VoxelAssignment { index, counts } =
            assign_voxels(&self.normalized_positions, grid_size)?;
        Ok(Self {
            voxel_index: index,
            voxel_counts: counts,
            grid_size,
            ..self.clone()
        })
    }

    /// Keeps the listed primitives together with their stored normalization
    /// and voxel indices; counts are re-tallied.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut counts = vec![0u32; self.voxel_counts.len()];
        let voxel_index: Vec<u32> = keep.iter().map(|&i| self.voxel_index[i]).collect();
        for &v in &voxel_index {
            counts[v as usize] += 1;
        }
        Self {
            id: self.id.clone(),
            label: self.label,
            feature_mode: self.feature_mode,
            primitives: keep.iter().map(|&i| self.primitives[i]).collect(),
            normalized_positions: keep.iter().map(|&i| self.normalized_positions[i]).collect(),
            voxel_index,
            voxel_counts: counts,
            grid_size: self.grid_size,
            extent: self.extent,
        }
    }

    /// Drops every primitive stored in one of `voxels`.
    pub fn without_voxels(&self, voxels: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !voxels.contains(&(self.voxel_index[i] as usize)))
            .collect();
        self.subset(&keep)
    }

    /// Channel-major network input, `11 x N`.
    ///
    /// Rows 0..3 are the normalized position recentred to `[-1, 1]`. In
    /// Gaussian mode rows 3..6 hold `ln(scale / extent)`, rows 6..10 the
    /// quaternion and row 10 the opacity; in point-cloud mode rows 3..6 hold
    /// the normal and the rest stay zero.
    pub fn input_features<T: Real>(&self) -> Tensor<T> {
        let n = self.len();
        let mut out = Tensor::zeros(INPUT_FEATURES, n);
        let extent = self.extent.max(f32::MIN_POSITIVE);
        for (i, (prim, pos)) in self.primitives.iter().zip(&self.normalized_positions).enumerate() {
            for a in 0..3 {
                out.set(a, i, T::lit(2.0 * pos[a] as f64 - 1.0));
            }
            match self.feature_mode {
                FeatureMode::Gaussian11 => {
                    for a in 0..3 {
                        let s = (prim.scale[a] / extent).max(f32::MIN_POSITIVE);
                        out.set(3 + a, i, T::lit((s as f64).ln()));
                    }
                    for a in 0..4 {
                        out.set(6 + a, i, T::lit(prim.rotation[a] as f64));
                    }
                    out.set(10, i, T::lit(prim.opacity as f64));
                }
                FeatureMode::PointCloud6 => {
                    for a in 0..3 {
                        out.set(3 + a, i, T::lit(prim.scale[a] as f64));
                    }
                }
            }
        }
        out
    }
}

fn raw_extent(primitives: &[GaussianPrimitive]) -> f32 {
    (0..3)
        .map(|a| {
            let (lo, hi) = primitives.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.position[a]), hi.max(p.position[a]))
            });
            hi - lo
        })
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prim(x: f32, y: f32, z: f32) -> GaussianPrimitive {
        GaussianPrimitive {
            position: [x, y, z],
            scale: [0.1, 0.1, 0.1],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.8,
        }
    }

    #[test]
    fn counts_sum_to_primitive_count() {
        let prims: Vec<_> = (0..50).map(|i| prim(i as f32, (i * 7 % 13) as f32, (i % 5) as f32)).collect();
        let s = LabeledSample::new("a", 0, FeatureMode::Gaussian11, prims, 3).unwrap();
        assert_eq!(s.voxel_counts.iter().sum::<u32>(), 50);
        assert_eq!(s.voxel_counts.len(), 27);
        assert!(s.voxel_index.iter().all(|&v| v < 27));
    }

    #[test]
    fn subset_keeps_stored_metadata() {
        let prims: Vec<_> = (0..10).map(|i| prim(i as f32, 0.0, 0.0)).collect();
        let s = LabeledSample::new("a", 1, FeatureMode::Gaussian11, prims, 2).unwrap();
        let sub = s.subset(&[9]);
        assert_eq!(sub.normalized_positions[0], [1.0, 0.5, 0.5]);
        assert_eq!(sub.voxel_index[0], s.voxel_index[9]);
        assert_eq!(sub.voxel_counts.iter().sum::<u32>(), 1);
        let dropped = s.without_voxels(&[s.voxel_index[0] as usize]);
        assert!(dropped.voxel_index.iter().all(|&v| v != s.voxel_index[0]));
    }

    #[test]
    fn pointcloud_features_zero_pad() {
        let prims = vec![
            GaussianPrimitive::point([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            GaussianPrimitive::point([1.0, 1.0, 1.0], [1.0, 0.0, 0.0]),
        ];
        let s = LabeledSample::new("p", 0, FeatureMode::PointCloud6, prims, 2).unwrap();
        let f: Tensor<f32> = s.input_features();
        assert_eq!(f.shape(), (11, 2));
        assert_eq!(f.column(0), vec![-1., -1., -1., 0., 0., 1., 0., 0., 0., 0., 0.]);
        assert_eq!(f.column(1)[3], 1.0);
    }
}

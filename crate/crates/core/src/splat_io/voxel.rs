use super::GaussianPrimitive;
use crate::error::{Error, Result};

/// Per-axis min-max into `[0, 1]^3`; an axis with zero spread maps to 0.5.
pub fn normalize_positions(primitives: &[GaussianPrimitive]) -> Result<Vec<[f32; 3]>> {
    if primitives.is_empty() {
        return Err(Error::Data("cannot normalize an empty cloud".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in primitives {
        for a in 0..3 {
            let x = p.position[a] as f64;
            lo[a] = lo[a].min(x);
            hi[a] = hi[a].max(x);
        }
    }
    Ok(primitives
        .iter()
        .map(|p| {
            let mut out = [0.5f32; 3];
            for a in 0..3 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    out[a] = ((p.position[a] as f64 - lo[a]) / span) as f32;
                }
            }
            out
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelAssignment {
    pub index: Vec<u32>,
    pub counts: Vec<u32>,
}

/// `v = fx * G^2 + fy * G + fz` with each `f = clip(floor(x * G), 0, G-1)`.
pub fn assign_voxels(normalized: &[[f32; 3]], grid_size: usize) -> Result<VoxelAssignment> {
    if grid_size == 0 {
        return Err(Error::Config("grid size must be >= 1".into()));
    }
    let g = grid_size as i64;
    let mut counts = vec![0u32; grid_size.pow(3)];
    let index = normalized
        .iter()
        .map(|p| {
            let cell = |x: f32| ((x as f64 * g as f64).floor() as i64).clamp(0, g - 1);
            let v = cell(p[0]) * g * g + cell(p[1]) * g + cell(p[2]);
            counts[v as usize] += 1;
            v as u32
        })
        .collect();
    Ok(VoxelAssignment { index, counts })
}

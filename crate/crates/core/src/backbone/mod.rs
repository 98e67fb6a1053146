//! Point network with voxel aggregation.
//!
//! Per-primitive features pass through an input alignment net, shared
//! per-point layers, a feature alignment net and more per-point layers.
//! They are then max-pooled inside each voxel of the stored grid
//! assignment, averaged over all voxels and classified by a bias-free
//! linear layer.

mod forward;
mod params;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forward::{
    argmax, build_graph, density_distributions, forward, sample_gradients, stage1_loss, stage1_loss_graph,
    stn_graph, target_density, ForwardTrace, Graph, Stage1Terms,
};
pub use params::{Architecture, BackboneParams, Dense, Hyper, Net, Stn, Widths};

use crate::archive::Archive;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "backbone";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: Architecture,
    class_names: Vec<String>,
    seed: u64,
    #[serde(default)]
    extra: serde_json::Value,
}

impl BackboneParams<f32> {
    pub fn to_archive(&self, extra: serde_json::Value) -> Archive {
        let meta = CheckpointMeta {
            arch: self.arch.clone(),
            class_names: self.class_names.clone(),
            seed: self.seed,
            extra,
        };
        let mut a = Archive::new(CHECKPOINT_KIND, &meta);
        for (name, t) in self.net.named() {
            a.push_f32(name, t.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a backbone archive, found {:?}", a.kind)));
        }
        let meta: CheckpointMeta = a.metadata()?;
        let mut params = Self::init(meta.arch, meta.class_names, meta.seed)?;
        let names: Vec<String> = params.net.named().into_iter().map(|(n, _)| n).collect();
        for (slot, name) in params.net.slots_mut().into_iter().zip(names) {
            let t = a.f32(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    /// Writes the checkpoint; `extra` lands in the metadata block.
    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_archive(extra).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path, CHECKPOINT_KIND)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use crate::splat_io::{generate_synthetic, FeatureMode, GaussianPrimitive, LabeledSample, ShapeClass};

    fn arch(g: usize, c: usize) -> Architecture {
        Architecture {
            hyper: Hyper::new(g, c, 4),
            widths: Widths::tiny(),
        }
    }

    fn params(g: usize, c: usize, seed: u64) -> BackboneParams<f64> {
        BackboneParams::init(arch(g, c), (0..4).map(|i| format!("c{i}")).collect(), seed).unwrap()
    }

    fn prim(p: [f32; 3]) -> GaussianPrimitive {
        GaussianPrimitive {
            position: p,
            scale: [0.1, 0.05, 0.01],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.9,
        }
    }

    #[test]
    fn fresh_alignment_nets_are_identity() {
        let p = params(2, 8, 1);
        let s = generate_synthetic(ShapeClass::Torus, 64, 3).unwrap().regrid(2).unwrap();
        let t = forward(&s, &p).unwrap();
        assert_eq!(t.input_transform, Tensor::identity(3));
        assert_eq!(t.feature_transform, Tensor::identity(5));
        assert_eq!(p.net.stn_feat.out.weight.shape(), (25, 5));
    }

    #[test]
    fn single_primitive_single_voxel() {
        let p = params(1, 8, 2);
        let s = LabeledSample::new("one", 0, FeatureMode::Gaussian11, vec![prim([0.3, 0.2, 0.1])], 1).unwrap();
        let t = forward(&s, &p).unwrap();
        assert_eq!(t.voxel_features, t.point_features);
        assert_eq!(t.global, t.point_features);
    }

    #[test]
    fn duplicates_leave_voxel_features_unchanged() {
        let p = params(2, 8, 3);
        let prims: Vec<_> = (0..20).map(|i| prim([(i % 4) as f32, (i % 3) as f32, (i % 5) as f32])).collect();
        let doubled: Vec<_> = prims.iter().chain(&prims).copied().collect();
        let a = LabeledSample::new("a", 0, FeatureMode::Gaussian11, prims, 2).unwrap();
        let b = LabeledSample::new("b", 0, FeatureMode::Gaussian11, doubled, 2).unwrap();
        let (ta, tb) = (forward(&a, &p).unwrap(), forward(&b, &p).unwrap());
        assert!(ta.voxel_features.max_abs_diff(&tb.voxel_features) < 1e-12);
    }

    #[test]
    fn empty_voxels_are_zero_columns_and_z_is_their_mean() {
        let p = params(3, 8, 4);
        let s = generate_synthetic(ShapeClass::Sphere, 64, 1).unwrap().regrid(3).unwrap();
        let t = forward(&s, &p).unwrap();
        let occupied = s.occupied_voxels();
        let zero_cols = (0..27)
            .filter(|&v| t.voxel_features.column(v).iter().all(|&x| x == 0.0))
            .count();
        assert!(zero_cols >= 27 - occupied.len());
        for v in 0..27 {
            if !occupied.contains(&v) {
                assert!(t.voxel_features.column(v).iter().all(|&x| x == 0.0));
            }
        }
        for c in 0..8 {
            let mean: f64 = t.voxel_features.row(c).iter().sum::<f64>() / 27.0;
            assert!((mean - t.global.get(c, 0)).abs() < 1e-12);
        }
        let logits = p.net.classifier.matmul(&t.global).unwrap();
        assert!(logits.max_abs_diff(&t.logits) < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let p = params(2, 8, 5);
        let s = generate_synthetic(ShapeClass::Box, 64, 1).unwrap();
        assert!(matches!(forward(&s, &p), Err(Error::Config(_))));
    }

    #[test]
    fn target_density_closed_forms() {
        let g3 = 27;
        let mut counts = vec![0u32; g3];
        counts[4] = 8;
        let q = target_density::<f64>(&counts, 1.0, 1e-6);
        let expect = (8.0 + 1e-6) / (8.0 + g3 as f64 * 1e-6);
        assert!((q.get(4, 0) - expect).abs() < 1e-14);

        let uniform = target_density::<f64>(&[3; 8], 2.5, 1e-6);
        assert!(uniform.data().iter().all(|&x| (x - 0.125).abs() < 1e-15));
        let flat = target_density::<f64>(&[0, 1, 9, 40], 0.0, 1e-6);
        assert!(flat.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn density_term_rewards_mass_on_dense_voxels() {
        // three voxels with counts 1, 1, 10; moving norm from a sparse voxel
        // to the dense one lowers the KL term
        let counts = [1u32, 1, 10];
        let h = |a: [f64; 3]| Tensor::from_fn(1, 3, |_, c| a[c]);
        let kl = |a| {
            let (p, q) = density_distributions(&h(a), &counts, 1.0, 1.0, 1e-6).unwrap();
            p.data().iter().zip(q.data()).map(|(p, q)| p * (p / q).ln()).sum::<f64>()
        };
        assert!(kl([0.5, 1.0, 3.5]) < kl([1.5, 1.0, 2.5]));
    }

    #[test]
    fn stage1_loss_parts() {
        let mut p = params(2, 8, 6);
        let s = generate_synthetic(ShapeClass::Cylinder, 64, 2).unwrap().regrid(2).unwrap();
        let t = forward(&s, &p).unwrap();
        let with = stage1_loss(&t, 1, p.hyper()).unwrap();
        assert!((with.total - (with.cls + 3.5 * with.density)).abs() < 1e-12);
        p.arch.hyper.lambda = 0.0;
        let without = stage1_loss(&t, 1, p.hyper()).unwrap();
        assert_eq!(without.total, without.cls);
        assert!(without.density > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = params(2, 8, 7).cast::<f32>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        p.save(&path, serde_json::json!({"epoch": 3})).unwrap();
        let back = BackboneParams::load(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.digest(), p.digest());
    }

    #[test]
    fn digest_tracks_values() {
        let p = params(2, 8, 8);
        let mut q = p.clone();
        q.net.classifier.data_mut()[0] += 1e-9;
        assert_ne!(p.digest(), q.digest());
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        use crate::diffmath::finite_diff::{check_gradient, GradCheckOptions};
        use rand::{Rng, SeedableRng};

        let mut p = params(2, 6, 9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for t in p.net.slots_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
        let s = generate_synthetic(ShapeClass::Box, 32, 4).unwrap().subset(&(0..16).collect::<Vec<_>>()).regrid(2).unwrap();
        let inputs: Vec<Tensor<f64>> = p.net.named().into_iter().map(|(_, t)| t.clone()).collect();
        let hyper = p.hyper().clone();
        let opts = GradCheckOptions::default();
        let report = check_gradient("stage1", &inputs, &opts, |tape, vars| {
            let mut it = vars.iter();
            let net = p.net.map(|_| *it.next().unwrap());
            let g = build_graph(tape, &net, &hyper, &s)?;
            Ok(stage1_loss_graph(tape, &g, s.label, &hyper)?.0)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

//! Prediction explanations: ranked channels, their located voxels, the
//! primitives inside those voxels and the matching training prototypes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use crate::disentangler::localize;

use crate::diffmath::{Real, Tensor};
use crate::disentangler::{DisentangleState, Registry};
use crate::error::{Error, Result};
use crate::splat_io::{write_ply, Dataset, GaussianPrimitive, LabeledSample};
use crate::trainer::FrozenBackbone;

pub const EXPLANATION_VERSION: u32 = 1;

/// `w'_{y,c} * relu(z~_c)` for every channel.
pub fn channel_importance<T: Real>(global: &Tensor<T>, w_prime: &Tensor<T>, predicted: usize) -> Result<Vec<f64>> {
    if predicted >= w_prime.rows() {
        return Err(Error::Index(format!(
            "class {predicted} outside {} classes",
            w_prime.rows()
        )));
    }
    if global.len() != w_prime.cols() {
        return Err(Error::Dimension {
            op: "channel_importance",
            left: w_prime.shape(),
            right: global.shape(),
        });
    }
    Ok(w_prime
        .row(predicted)
        .iter()
        .zip(global.data())
        .map(|(&w, &z)| w.as_f64() * z.as_f64().max(0.0))
        .collect())
}

/// The `m` highest-scoring channels, best first; ties go to the lower id.
pub fn top_channels(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::Config(format!("m = {m} must lie in [1, {}]", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(order)
}

/// Top-`m` channels with strictly negative scores dropped.
pub fn supporting_channels(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    Ok(top_channels(scores, m)?.into_iter().filter(|&c| scores[c] >= 0.0).collect())
}

/// Ids of the primitives whose stored voxel is `voxel`.
pub fn extract_subset(sample: &LabeledSample, voxel: usize) -> Result<Vec<usize>> {
    if voxel >= sample.n_voxels() {
        return Err(Error::Index(format!("voxel {voxel} outside {} voxels", sample.n_voxels())));
    }
    if sample.voxel_counts[voxel] == 0 {
        return Err(Error::EmptySubset { voxel });
    }
    Ok((0..sample.len()).filter(|&i| sample.voxel_index[i] as usize == voxel).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeFragment {
    pub sample_id: String,
    pub rank: usize,
    pub activation: f64,
    pub voxel: usize,
    pub primitive_ids: Vec<usize>,
}

/// Loads each registered prototype of `channel` and cuts out its voxel.
pub fn retrieve_prototypes(registry: &Registry, channel: usize, dataset: &Dataset) -> Result<Vec<PrototypeFragment>> {
    let list = registry
        .channels
        .get(channel)
        .ok_or_else(|| Error::Registry(format!("channel {channel} not in registry")))?;
    list.iter()
        .enumerate()
        .map(|(rank, e)| {
            let s = dataset
                .get(&e.sample_id)
                .ok_or_else(|| Error::Registry(format!("stale prototype id {:?}", e.sample_id)))?;
            let ids = extract_subset(s, e.voxel)
                .map_err(|err| Error::Registry(format!("prototype {:?}: {err}", e.sample_id)))?;
            Ok(PrototypeFragment {
                sample_id: e.sample_id.clone(),
                rank,
                activation: e.activation,
                voxel: e.voxel,
                primitive_ids: ids,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEvidence {
    pub channel: usize,
    pub importance: f64,
    pub voxel: usize,
    pub primitive_ids: Vec<usize>,
    pub prototypes: Vec<PrototypeFragment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    /// Compensated logits `W' U z`.
    pub logits: Vec<f32>,
    pub channels: Vec<ChannelEvidence>,
}

/// Builds the explanation of `sample`'s prediction from the top `m`
/// positively contributing channels.
pub fn explain(
    frozen: &FrozenBackbone,
    state: &DisentangleState,
    dataset: &Dataset,
    sample: &LabeledSample,
    m: usize,
) -> Result<Explanation> {
    state.check_backbone(frozen)?;
    let trace = frozen.forward(sample)?;
    let comp = state.compensated(&trace)?;
    let predicted = comp.predicted();
    let h = state.transformed_voxels(&trace)?;
    let scores = channel_importance(&comp.global, &state.w_prime_f32(), predicted)?;
    let channels = supporting_channels(&scores, m)?
        .into_iter()
        .map(|c| {
            let voxel = localize(&h, c, &sample.voxel_counts)?;
            Ok(ChannelEvidence {
                channel: c,
                importance: scores[c],
                voxel,
                primitive_ids: extract_subset(sample, voxel)?,
                prototypes: retrieve_prototypes(&state.registry, c, dataset)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Explanation {
        sample_id: sample.id.clone(),
        label: sample.label,
        predicted,
        logits: comp.logits.data().to_vec(),
        channels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedChannel {
    pub channel: usize,
    pub importance: f64,
    pub voxel: usize,
    pub primitives: usize,
    pub file: PathBuf,
    pub prototypes: Vec<ExportedPrototype>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedPrototype {
    pub sample_id: String,
    pub rank: usize,
    pub activation: f64,
    pub voxel: usize,
    pub primitives: usize,
    pub file: PathBuf,
}

/// `explanation.json` schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationManifest {
    pub version: u32,
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub predicted_class: String,
    pub logits: Vec<f32>,
    pub channels: Vec<ExportedChannel>,
}

fn pick(sample: &LabeledSample, ids: &[usize]) -> Vec<GaussianPrimitive> {
    ids.iter().map(|&i| sample.primitives[i]).collect()
}

/// Writes one PLY per query subset and prototype fragment plus
/// `explanation.json` into `out_dir`.
pub fn export_explanation(
    expl: &Explanation,
    sample: &LabeledSample,
    dataset: &Dataset,
    out_dir: impl AsRef<Path>,
) -> Result<ExplanationManifest> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mode = dataset.feature_mode;
    let mut channels = Vec::with_capacity(expl.channels.len());
    for ch in &expl.channels {
        let file = PathBuf::from(format!("query_c{:03}_v{}.ply", ch.channel, ch.voxel));
        write_ply(&pick(sample, &ch.primitive_ids), dir.join(&file), mode)?;
        let mut prototypes = Vec::with_capacity(ch.prototypes.len());
        for p in &ch.prototypes {
            let src = dataset
                .get(&p.sample_id)
                .ok_or_else(|| Error::Registry(format!("stale prototype id {:?}", p.sample_id)))?;
            let pfile = PathBuf::from(format!("proto_c{:03}_r{}_{}.ply", ch.channel, p.rank, p.sample_id));
            write_ply(&pick(src, &p.primitive_ids), dir.join(&pfile), mode)?;
            prototypes.push(ExportedPrototype {
                sample_id: p.sample_id.clone(),
                rank: p.rank,
                activation: p.activation,
                voxel: p.voxel,
                primitives: p.primitive_ids.len(),
                file: pfile,
            });
        }
        channels.push(ExportedChannel {
            channel: ch.channel,
            importance: ch.importance,
            voxel: ch.voxel,
            primitives: ch.primitive_ids.len(),
            file,
            prototypes,
        });
    }
    let manifest = ExplanationManifest {
        version: EXPLANATION_VERSION,
        sample_id: expl.sample_id.clone(),
        label: expl.label,
        predicted: expl.predicted,
        predicted_class: dataset.class_names.get(expl.predicted).cloned().unwrap_or_default(),
        logits: expl.logits.clone(),
        channels,
    };
    let path = dir.join("explanation.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat_io::{generate_synthetic, FeatureMode, ShapeClass};

    #[test]
    fn importance_hand_cases() {
        let w = Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let z = Tensor::vector(vec![3.0, 5.0]);
        assert_eq!(channel_importance(&z, &w, 0).unwrap(), vec![3.0, -5.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]);
        assert_eq!(channel_importance(&neg, &w, 0).unwrap(), vec![0.0, 0.0]);
        let e1 = Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            channel_importance(&Tensor::vector(vec![7.0, 2.0, 1.0]), &e1, 0).unwrap(),
            vec![0.0, 2.0, 0.0]
        );
        assert!(matches!(channel_importance(&z, &w, 1), Err(Error::Index(_))));
    }

    #[test]
    fn top_channels_tie_rule() {
        assert_eq!(top_channels(&[1.0, 3.0, 3.0, 0.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_channels(&[1.0, 3.0, 3.0, 0.0], 4).unwrap(), vec![1, 2, 0, 3]);
        assert!(matches!(top_channels(&[1.0], 2), Err(Error::Config(_))));
        assert!(top_channels(&[1.0], 0).is_err());
        assert_eq!(supporting_channels(&[3.0, -5.0], 2).unwrap(), vec![0]);
    }

    #[test]
    fn subsets_partition_the_sample() {
        let s = generate_synthetic(ShapeClass::Torus, 128, 9).unwrap().regrid(3).unwrap();
        let mut seen = vec![false; s.len()];
        for v in s.occupied_voxels() {
            let ids = extract_subset(&s, v).unwrap();
            assert_eq!(ids.len(), s.voxel_counts[v] as usize);
            for i in ids {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
        let empty = (0..27).find(|&v| s.voxel_counts[v] == 0).unwrap();
        assert!(matches!(extract_subset(&s, empty), Err(Error::EmptySubset { .. })));
        assert!(matches!(extract_subset(&s, 27), Err(Error::Index(_))));
    }

    #[test]
    fn single_voxel_sample_is_its_own_subset() {
        let prims: Vec<_> = (0..10)
            .map(|i| GaussianPrimitive::point([i as f32, 0.0, 0.0], [0.0, 0.0, 1.0]))
            .collect();
        let s = LabeledSample::new("x", 0, FeatureMode::PointCloud6, prims, 1).unwrap();
        assert_eq!(extract_subset(&s, 0).unwrap(), (0..10).collect::<Vec<_>>());
    }
}

//! Stage 2: an orthogonal rotation `U = exp(P - P^T)` of the voxel feature
//! space trained for prototype purity on a frozen backbone, with the
//! classifier compensated as `W' = W U^T` so decisions do not move.

mod registry;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use registry::{
    cache_voxel_features, channel_activation, curriculum_k, discover_from_samples, discover_prototypes, localize,
    purity, sample_channel_stats, transform_voxels, CachedVoxels, Purity, Registry, RegistryEntry,
};

use crate::archive::Archive;
use crate::backbone::{argmax, ForwardTrace};
use crate::diffmath::linalg::determinant;
use crate::diffmath::{orthogonality_defect, skew_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::splat_io::{Dataset, LabeledSample};
use crate::trainer::{Adam, AdamConfig, FrozenBackbone};

pub const STATE_KIND: &str = "disentangle";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curriculum {
    pub k_init: usize,
    pub k_final: usize,
    /// Total Stage-2 epochs.
    pub epochs: usize,
    /// Registry refresh interval in epochs.
    pub update_period: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            k_init: 10,
            k_final: 3,
            epochs: 50,
            update_period: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTwoConfig {
    pub curriculum: Curriculum,
    /// (channel, prototype) pairs per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl StageTwoConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            curriculum: Curriculum::default(),
            batch_size: 32,
            optimizer: AdamConfig {
                cosine: false,
                ..AdamConfig::with_lr(1e-4)
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.curriculum;
        if c.k_final == 0 || c.k_init < c.k_final {
            return Err(Error::Config("curriculum needs k_init >= k_final >= 1".into()));
        }
        if c.update_period == 0 {
            return Err(Error::Config("update_period must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Learned rotation, compensated classifier and prototype registry.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangleState {
    pub p: Tensor<f64>,
    pub u: Tensor<f64>,
    pub w_prime: Tensor<f64>,
    pub registry: Registry,
    pub curriculum: Curriculum,
    /// Digest of the backbone this state was trained against.
    pub backbone_digest: String,
}

/// `W' = W U^T`.
pub fn compensate_classifier(w: &Tensor<f64>, u: &Tensor<f64>) -> Result<Tensor<f64>> {
    if u.rows() != u.cols() || w.cols() != u.rows() {
        return Err(Error::Dimension {
            op: "compensate_classifier",
            left: w.shape(),
            right: u.shape(),
        });
    }
    Tensor::<f64>::matmul(w, &u.transpose())
}

/// Transformed global feature and compensated logits for one trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensated {
    /// `U z` in single precision.
    pub global: Tensor<f32>,
    /// `W' U z` in single precision.
    pub logits: Tensor<f32>,
}

impl Compensated {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.data())
    }
}

impl DisentangleState {
    /// `P = 0`, so `U = I` and `W' = W`.
    pub fn identity(frozen: &FrozenBackbone, registry: Registry, curriculum: Curriculum) -> Self {
        let c = frozen.params().hyper().channels;
        let w: Tensor<f64> = frozen.params().net.classifier.cast();
        Self {
            p: Tensor::zeros(c, c),
            u: Tensor::identity(c),
            w_prime: w,
            registry,
            curriculum,
            backbone_digest: frozen.digest().to_string(),
        }
    }

    pub fn check_backbone(&self, frozen: &FrozenBackbone) -> Result<()> {
        if frozen.digest() != self.backbone_digest {
            return Err(Error::FrozenViolation(format!(
                "state was trained on backbone {} but {} was supplied",
                self.backbone_digest,
                frozen.digest()
            )));
        }
        Ok(())
    }

    pub fn u_f32(&self) -> Tensor<f32> {
        self.u.cast()
    }

    pub fn w_prime_f32(&self) -> Tensor<f32> {
        self.w_prime.cast()
    }

    /// Single-precision `U z` and `W' (U z)`.
    pub fn compensated(&self, trace: &ForwardTrace<f32>) -> Result<Compensated> {
        let global = self.u_f32().matmul(&trace.global)?;
        let logits = self.w_prime_f32().matmul(&global)?;
        Ok(Compensated { global, logits })
    }

    /// `U H` in single precision.
    pub fn transformed_voxels(&self, trace: &ForwardTrace<f32>) -> Result<Tensor<f32>> {
        transform_voxels(&trace.voxel_features, &self.u_f32())
    }

    pub fn orthogonality_defect(&self) -> f64 {
        orthogonality_defect(&self.u)
    }

    pub fn determinant(&self) -> f64 {
        determinant(&self.u)
    }

    pub fn to_archive(&self) -> Archive {
        #[derive(Serialize)]
        struct Meta<'a> {
            registry: &'a Registry,
            curriculum: &'a Curriculum,
            backbone_digest: &'a str,
        }
        let mut a = Archive::new(
            STATE_KIND,
            &Meta {
                registry: &self.registry,
                curriculum: &self.curriculum,
                backbone_digest: &self.backbone_digest,
            },
        );
        a.push_f64("P", self.p.clone());
        a.push_f64("U", self.u.clone());
        a.push_f64("W_prime", self.w_prime.clone());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            registry: Registry,
            curriculum: Curriculum,
            backbone_digest: String,
        }
        if a.kind != STATE_KIND {
            return Err(Error::Format(format!("expected a {STATE_KIND} archive, found {:?}", a.kind)));
        }
        let meta: Meta = a.metadata()?;
        Ok(Self {
            p: a.f64("P")?,
            u: a.f64("U")?,
            w_prime: a.f64("W_prime")?,
            registry: meta.registry,
            curriculum: meta.curriculum,
            backbone_digest: meta.backbone_digest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path, STATE_KIND)?)
    }

    /// Registry as JSON: per channel, the ranked sample ids with voxels.
    pub fn export_registry(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Channel<'a> {
            channel: usize,
            prototypes: &'a [RegistryEntry],
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            k: usize,
            mean_purity: f64,
            mean_density: f64,
            channels: Vec<Channel<'a>>,
        }
        let doc = Doc {
            k: self.registry.k,
            mean_purity: self.registry.mean_purity(),
            mean_density: self.registry.mean_density(),
            channels: self
                .registry
                .channels
                .iter()
                .enumerate()
                .map(|(channel, l)| Channel {
                    channel,
                    prototypes: l,
                })
                .collect(),
        };
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&doc).expect("registry serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One (channel, prototype) pair of a purity batch.
#[derive(Clone, Copy, Debug)]
pub struct PurityPair<'a> {
    pub sample: &'a CachedVoxels,
    pub channel: usize,
}

/// `-mean purity` over `pairs` as a tape node, differentiable in `p`.
///
/// Each pair's located voxel is chosen from `u_now` outside the tape; the
/// loss then reads that voxel's column through `exp(P - P^T)`.
pub fn purity_loss_graph(
    tape: &mut Tape<f64>,
    p: Var,
    u_now: &Tensor<f64>,
    pairs: &[PurityPair<'_>],
    epsilon: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Usage("purity loss over an empty batch".into()));
    }
    let c = u_now.rows();
    let b = pairs.len();
    let mut columns = Tensor::zeros(c, b);
    for (j, pair) in pairs.iter().enumerate() {
        let stats = sample_channel_stats(pair.sample, u_now, epsilon)?;
        let (col, _, _) = stats[pair.channel];
        for r in 0..c {
            columns.set(r, j, pair.sample.features.get(r, col));
        }
    }
    let u = tape.matrix_exp_skew(p)?;
    let m = tape.constant(columns);
    let y = tape.matmul(u, m)?;
    let norms = tape.column_norms(y);
    let index: Vec<usize> = pairs.iter().enumerate().map(|(j, pair)| pair.channel * b + j).collect();
    let picked = tape.gather(y, &index)?;
    let denom = tape.add_scalar(norms, epsilon);
    let ratio = tape.div(picked, denom)?;
    let total = tape.sum(ratio);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Loss value and gradient w.r.t. `P`.
pub fn purity_loss(p: &Tensor<f64>, pairs: &[PurityPair<'_>], epsilon: f64) -> Result<(f64, Tensor<f64>)> {
    let u_now = skew_exp(p)?;
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let loss = purity_loss_graph(&mut tape, pv, &u_now, pairs, epsilon)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.get_or_zeros(pv, p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub k: usize,
    pub mean_purity: f64,
    pub mean_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoReport {
    pub refreshes: Vec<RefreshRecord>,
    /// Mean of the batch losses in each epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_mean_purity: f64,
    pub final_mean_purity: f64,
    pub steps: usize,
    pub orthogonality_defect: f64,
    /// Worst defect of `U` seen after any optimizer step.
    pub max_step_defect: f64,
    pub determinant: f64,
    pub backbone_digest_before: String,
    pub backbone_digest_after: String,
    /// Not serialized, so reruns write identical reports.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Learns `P` from zero on the train split; the backbone is never written.
pub fn train_stage2(
    frozen: &FrozenBackbone,
    dataset: &Dataset,
    config: &StageTwoConfig,
) -> Result<(DisentangleState, StageTwoReport)> {
    let train = dataset.train();
    let cache = cache_voxel_features(frozen, &train)?;
    train_stage2_cached(frozen, &cache, config)
}

/// [`train_stage2`] over precomputed voxel features of the train split.
pub fn train_stage2_cached(
    frozen: &FrozenBackbone,
    cache: &[CachedVoxels],
    config: &StageTwoConfig,
) -> Result<(DisentangleState, StageTwoReport)> {
    config.validate()?;
    frozen.verify()?;
    let start = Instant::now();
    let digest_before = frozen.digest().to_string();
    let hyper = frozen.params().hyper();
    let eps = hyper.epsilon;
    let channels = hyper.channels;
    let cur = config.curriculum.clone();

    let mut p = Tensor::<f64>::zeros(channels, channels);
    let mut u = Tensor::<f64>::identity(channels);
    let mut adam = Adam::new(config.optimizer.clone(), [p.shape()]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut registry = discover_prototypes(cache, &u, curriculum_k(0, cur.epochs, cur.k_init, cur.k_final), eps)?;
    let initial_mean_purity = registry.mean_purity();
    let mut refreshes = vec![RefreshRecord {
        epoch: 0,
        k: registry.k,
        mean_purity: initial_mean_purity,
        mean_density: registry.mean_density(),
    }];
    let by_id: std::collections::HashMap<&str, &CachedVoxels> = cache.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut epoch_losses = Vec::with_capacity(cur.epochs);
    let mut max_step_defect: f64 = 0.0;
    let total_steps = cur.epochs * (channels * registry.k).div_ceil(config.batch_size);

    for epoch in 0..cur.epochs {
        if epoch > 0 && epoch % cur.update_period == 0 {
            registry = discover_prototypes(cache, &u, curriculum_k(epoch, cur.epochs, cur.k_init, cur.k_final), eps)?;
            refreshes.push(RefreshRecord {
                epoch,
                k: registry.k,
                mean_purity: registry.mean_purity(),
                mean_density: registry.mean_density(),
            });
        }
        let mut pairs: Vec<PurityPair<'_>> = registry
            .entries()
            .map(|(c, e)| PurityPair {
                sample: by_id[e.sample_id.as_str()],
                channel: c,
            })
            .collect();
        pairs.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in pairs.chunks(config.batch_size) {
            let (loss, grad) = purity_loss(&p, batch, eps)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite purity loss {loss}"),
                });
            }
            let lr = config.optimizer.lr_at(adam.steps_taken(), total_steps);
            adam.step(&mut [&mut p], &[&grad], lr);
            u = skew_exp(&p)?;
            max_step_defect = max_step_defect.max(orthogonality_defect(&u));
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    if cur.epochs > 0 {
        registry = discover_prototypes(cache, &u, curriculum_k(cur.epochs, cur.epochs, cur.k_init, cur.k_final), eps)?;
        refreshes.push(RefreshRecord {
            epoch: cur.epochs,
            k: registry.k,
            mean_purity: registry.mean_purity(),
            mean_density: registry.mean_density(),
        });
    }

    frozen.verify()?;
    let w: Tensor<f64> = frozen.params().net.classifier.cast();
    let w_prime = compensate_classifier(&w, &u)?;
    let state = DisentangleState {
        p,
        u,
        w_prime,
        registry,
        curriculum: cur,
        backbone_digest: digest_before.clone(),
    };
    let report = StageTwoReport {
        initial_mean_purity,
        final_mean_purity: state.registry.mean_purity(),
        refreshes,
        epoch_losses,
        steps: adam.steps_taken(),
        orthogonality_defect: state.orthogonality_defect(),
        max_step_defect,
        determinant: state.determinant(),
        backbone_digest_before: digest_before,
        backbone_digest_after: frozen.params().digest(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Predictions before and after compensation for a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreservationCheck {
    pub samples: usize,
    pub argmax_agreement: f64,
    pub max_logit_deviation: f64,
}

impl PreservationCheck {
    pub fn exact(&self) -> bool {
        self.argmax_agreement == 1.0
    }
}

/// Compares `argmax(W z)` with `argmax(W' U z)` in single precision.
pub fn decision_preservation(
    frozen: &FrozenBackbone,
    state: &DisentangleState,
    samples: &[&LabeledSample],
) -> Result<PreservationCheck> {
    use rayon::prelude::*;
    state.check_backbone(frozen)?;
    let rows = samples
        .par_iter()
        .map(|s| {
            let t = frozen.forward(s)?;
            let comp = state.compensated(&t)?;
            let dev = t.logits.max_abs_diff(&comp.logits) as f64;
            Ok((t.predicted() == comp.predicted(), dev))
        })
        .collect::<Result<Vec<_>>>()?;
    let agree = rows.iter().filter(|r| r.0).count();
    Ok(PreservationCheck {
        samples: rows.len(),
        argmax_agreement: if rows.is_empty() { 1.0 } else { agree as f64 / rows.len() as f64 },
        max_logit_deviation: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff::{check_gradient, GradCheckOptions};
    use rand::Rng;

    fn toy_cache(n: usize, c: usize, seed: u64) -> Vec<CachedVoxels> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let voxels: Vec<usize> = (0..5).map(|j| j * 2 + (i % 2)).collect();
                CachedVoxels {
                    id: format!("s{i:02}"),
                    counts: voxels.iter().map(|&v| 1 + v as u32).collect(),
                    voxels,
                    features: Tensor::from_fn(c, 5, |_, _| rng.random_range(0.0..1.0)),
                }
            })
            .collect()
    }

    fn skew(c: usize, scale: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, c, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn compensation_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(compensate_classifier(&w, &Tensor::identity(8)).unwrap(), w);
        let u = skew_exp(&skew(8, 1.0, 4)).unwrap();
        let wp = compensate_classifier(&w, &u).unwrap();
        let (w32, wp32, u32_): (Tensor<f32>, Tensor<f32>, Tensor<f32>) = (w.cast(), wp.cast(), u.cast());
        for _ in 0..100 {
            let z = Tensor::<f32>::from_fn(8, 1, |_, _| rng.random_range(-3.0..3.0));
            let a = w32.matmul(&z).unwrap();
            let b = wp32.matmul(&u32_.matmul(&z).unwrap()).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }

    #[test]
    fn purity_loss_bounds_and_pure_batch() {
        let c = 4;
        let pure = CachedVoxels {
            id: "p".into(),
            voxels: vec![0, 1, 2, 3],
            counts: vec![1; 4],
            features: Tensor::from_fn(c, 4, |r, j| if r == j { 2.0 } else { 0.0 }),
        };
        let pairs: Vec<_> = (0..c).map(|ch| PurityPair { sample: &pure, channel: ch }).collect();
        let (loss, _) = purity_loss(&Tensor::zeros(c, c), &pairs, 1e-6).unwrap();
        assert!((loss + 1.0).abs() < 1e-6);

        let cache = toy_cache(6, c, 1);
        let pairs: Vec<_> = cache.iter().map(|s| PurityPair { sample: s, channel: 1 }).collect();
        let (loss, _) = purity_loss(&skew(c, 0.5, 2), &pairs, 1e-6).unwrap();
        assert!((-1.0..0.0).contains(&loss));
        assert!(matches!(purity_loss(&Tensor::zeros(c, c), &[], 1e-6), Err(Error::Usage(_))));
    }

    #[test]
    fn purity_gradient_matches_finite_differences() {
        let c = 8;
        let cache = toy_cache(5, c, 7);
        let pairs: Vec<_> = cache
            .iter()
            .enumerate()
            .map(|(i, s)| PurityPair { sample: s, channel: (3 * i) % c })
            .collect();
        let p0 = skew(c, 0.3, 8);
        let u_now = skew_exp(&p0).unwrap();
        let report = check_gradient("purity", &[p0], &GradCheckOptions::default(), |tape, v| {
            purity_loss_graph(tape, v[0], &u_now, &pairs, 1e-6)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn registry_saturates_and_identity_matches_raw() {
        let cache = toy_cache(7, 3, 2);
        let r = discover_prototypes(&cache, &Tensor::identity(3), 7, 1e-6).unwrap();
        for list in &r.channels {
            let mut ids: Vec<_> = list.iter().map(|e| e.sample_id.clone()).collect();
            ids.sort();
            assert_eq!(ids.len(), 7);
            ids.dedup();
            assert_eq!(ids.len(), 7);
        }
        assert!(matches!(discover_prototypes(&cache, &Tensor::identity(3), 8, 1e-6), Err(Error::Config(_))));
        // U = I activations are the raw per-channel maxima
        for (c, list) in r.channels.iter().enumerate() {
            for e in list {
                let s = cache.iter().find(|s| s.id == e.sample_id).unwrap();
                let raw = s.features.row(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(e.activation, raw);
            }
        }
    }
}

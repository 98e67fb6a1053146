//! Faithfulness and interpretability metrics plus the ablation harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, ForwardTrace};
use crate::diffmath::Tensor;
use crate::disentangler::{
    cache_voxel_features, decision_preservation, discover_prototypes, train_stage2_cached, CachedVoxels,
    DisentangleState, PreservationCheck, StageTwoConfig, StageTwoReport,
};
use crate::error::{Error, Result};
use crate::explainer::{channel_importance, localize, supporting_channels};
use crate::splat_io::{Dataset, LabeledSample};
use crate::trainer::{freeze, train_stage1, FrozenBackbone, StageOneConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionReport {
    pub k: usize,
    pub samples: usize,
    pub baseline_accuracy: f64,
    pub perturbed_accuracy: f64,
    /// `(baseline - perturbed) / baseline * 100`.
    pub degradation_pct: f64,
    pub mean_voxels_removed: f64,
    pub mean_primitives_removed: f64,
    /// Ids of samples with nothing left after deletion; scored as wrong.
    pub emptied: Vec<String>,
    /// Fraction of perturbed samples on which `W z` and `W' U z` agree.
    pub cross_check_agreement: f64,
}

struct Outcome {
    base_ok: bool,
    pert_ok: bool,
    agree: bool,
    voxels: usize,
    removed: usize,
    emptied: bool,
}

/// Deduplicated located voxels of the top-`k` supporting channels, in
/// channel rank order.
pub fn deletion_voxels(frozen: &FrozenBackbone, state: &DisentangleState, sample: &LabeledSample, k: usize) -> Result<Vec<usize>> {
    let trace = frozen.forward(sample)?;
    located_voxels(state, sample, &trace, k)
}

fn located_voxels(state: &DisentangleState, sample: &LabeledSample, trace: &ForwardTrace<f32>, k: usize) -> Result<Vec<usize>> {
    let comp = state.compensated(trace)?;
    let h = state.transformed_voxels(trace)?;
    let scores = channel_importance(&comp.global, &state.w_prime_f32(), comp.predicted())?;
    let mut voxels = Vec::new();
    for c in supporting_channels(&scores, k.min(scores.len()))? {
        let v = localize(&h, c, &sample.voxel_counts)?;
        if !voxels.contains(&v) {
            voxels.push(v);
        }
    }
    Ok(voxels)
}

fn score(
    frozen: &FrozenBackbone,
    state: &DisentangleState,
    sample: &LabeledSample,
    pick: impl FnOnce(&LabeledSample, &ForwardTrace<f32>) -> Result<Vec<usize>>,
) -> Result<Outcome> {
    let trace = frozen.forward(sample)?;
    let base_ok = state.compensated(&trace)?.predicted() == sample.label;
    let voxels = pick(sample, &trace)?;
    let cut = sample.without_voxels(&voxels);
    let removed = sample.len() - cut.len();
    if cut.is_empty() {
        return Ok(Outcome {
            base_ok,
            pert_ok: false,
            agree: true,
            voxels: voxels.len(),
            removed,
            emptied: true,
        });
    }
    let t = frozen.forward(&cut)?;
    let pred = state.compensated(&t)?.predicted();
    Ok(Outcome {
        base_ok,
        pert_ok: pred == sample.label,
        agree: pred == argmax(t.logits.data()),
        voxels: voxels.len(),
        removed,
        emptied: false,
    })
}

fn assemble(k: usize, samples: &[&LabeledSample], rows: Vec<Outcome>) -> Result<DeletionReport> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data("deletion test needs at least one sample".into()));
    }
    let frac = |f: &dyn Fn(&Outcome) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n as f64;
    let baseline = frac(&|r| r.base_ok);
    let perturbed = frac(&|r| r.pert_ok);
    if baseline == 0.0 {
        return Err(Error::DegenerateMetric("baseline accuracy is zero".into()));
    }
    let scored = rows.iter().filter(|r| !r.emptied).count();
    Ok(DeletionReport {
        k,
        samples: n,
        baseline_accuracy: baseline,
        perturbed_accuracy: perturbed,
        degradation_pct: 100.0 * (baseline - perturbed) / baseline,
        mean_voxels_removed: rows.iter().map(|r| r.voxels as f64).sum::<f64>() / n as f64,
        mean_primitives_removed: rows.iter().map(|r| r.removed as f64).sum::<f64>() / n as f64,
        emptied: rows.iter().zip(samples).filter(|(r, _)| r.emptied).map(|(_, s)| s.id.clone()).collect(),
        cross_check_agreement: if scored == 0 {
            1.0
        } else {
            rows.iter().filter(|r| !r.emptied && r.agree).count() as f64 / scored as f64
        },
    })
}

/// Removes every primitive in the voxels located for the top-`k` channels of
/// each prediction and re-scores the compensated classifier.
pub fn deletion_test(
    frozen: &FrozenBackbone,
    state: &DisentangleState,
    samples: &[&LabeledSample],
    k: usize,
) -> Result<DeletionReport> {
    state.check_backbone(frozen)?;
    if k == 0 {
        return Err(Error::Config("deletion needs k >= 1".into()));
    }
    let rows = samples
        .par_iter()
        .map(|s| score(frozen, state, s, |s, t| located_voxels(state, s, t, k)))
        .collect::<Result<Vec<_>>>()?;
    assemble(k, samples, rows)
}

/// Same protocol with `k` occupied voxels drawn uniformly per sample.
pub fn random_deletion_control(
    frozen: &FrozenBackbone,
    state: &DisentangleState,
    samples: &[&LabeledSample],
    k: usize,
    seed: u64,
) -> Result<DeletionReport> {
    state.check_backbone(frozen)?;
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            // one stream per sample so the draw does not depend on scheduling
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            score(frozen, state, s, |s, _| {
                let occupied = s.occupied_voxels();
                Ok(occupied.choose_multiple(&mut rng, k.min(occupied.len())).copied().collect())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(k, samples, rows)
}

/// `100 (after - before) / before` for two mean purities.
pub fn relative_gain(before: f64, after: f64) -> Result<f64> {
    if !(before.abs() > 0.0) || !before.is_finite() || !after.is_finite() {
        return Err(Error::DegenerateMetric(format!("purity before = {before}, after = {after}")));
    }
    Ok(100.0 * (after - before) / before)
}

/// Gain of registry purity from rotation `before` to `after`, with both
/// registries rediscovered at the same `k` on the same cache.
pub fn purity_gain_cached(cache: &[CachedVoxels], before: &Tensor<f64>, after: &Tensor<f64>, k: usize, epsilon: f64) -> Result<f64> {
    let b = discover_prototypes(cache, before, k, epsilon)?;
    let a = discover_prototypes(cache, after, k, epsilon)?;
    relative_gain(b.mean_purity(), a.mean_purity())
}

/// Purity gain of `after` over `before` on the train split, at the final
/// registry size of `after`.
pub fn purity_gain(
    frozen: &FrozenBackbone,
    before: &DisentangleState,
    after: &DisentangleState,
    dataset: &Dataset,
) -> Result<f64> {
    before.check_backbone(frozen)?;
    after.check_backbone(frozen)?;
    let cache = cache_voxel_features(frozen, &dataset.train())?;
    purity_gain_cached(&cache, &before.u, &after.u, after.registry.k, frozen.params().hyper().epsilon)
}

/// Mean primitive count of the registered voxels.
pub fn mean_activated_density(state: &DisentangleState) -> f64 {
    state.registry.mean_density()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stage1: StageOneConfig,
    pub stage2: StageTwoConfig,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub frozen: FrozenBackbone,
    pub state: DisentangleState,
    pub train: TrainReport,
    pub stage2: StageTwoReport,
    pub purity_gain: f64,
    pub density: f64,
    pub preservation: PreservationCheck,
}

/// Stage 1, Stage 2 and the headline metrics on one dataset.
pub fn run_pipeline(dataset: &Dataset, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let g = cfg.stage1.arch.hyper.grid_size;
    let regridded;
    let ds = if dataset.grid_size == g {
        dataset
    } else {
        regridded = dataset.regrid(g)?;
        &regridded
    };
    let (params, train) = train_stage1(ds, &cfg.stage1)?;
    let frozen = freeze(params);
    let cache = cache_voxel_features(&frozen, &ds.train())?;
    let (state, stage2) = train_stage2_cached(&frozen, &cache, &cfg.stage2)?;
    let eps = frozen.params().hyper().epsilon;
    let c = frozen.params().hyper().channels;
    let purity_gain = purity_gain_cached(&cache, &Tensor::identity(c), &state.u, state.registry.k, eps)?;
    let preservation = decision_preservation(&frozen, &state, &ds.test())?;
    Ok(PipelineOutcome {
        density: mean_activated_density(&state),
        frozen,
        state,
        train,
        stage2,
        purity_gain,
        preservation,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub lambda: Vec<f64>,
    pub grid_size: Vec<usize>,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: f64,
    pub accuracy: Option<f64>,
    pub purity_gain: Option<f64>,
    pub density: Option<f64>,
    /// Not serialized, so reruns write identical reports.
    #[serde(skip)]
    pub wall_seconds: f64,
    pub error: Option<String>,
}

impl AblationGrid {
    /// One configuration per grid value, everything else from `base`.
    pub fn expand(&self, base: &PipelineConfig) -> Vec<(String, f64, PipelineConfig)> {
        let mut out = Vec::new();
        for &l in &self.lambda {
            let mut c = base.clone();
            c.stage1.arch.hyper.lambda = l;
            out.push(("lambda".to_string(), l, c));
        }
        for &g in &self.grid_size {
            let mut c = base.clone();
            c.stage1.arch.hyper.grid_size = g;
            out.push(("grid_size".to_string(), g as f64, c));
        }
        for &ch in &self.channels {
            let mut c = base.clone();
            c.stage1.arch.hyper.channels = ch;
            out.push(("channels".to_string(), ch as f64, c));
        }
        out
    }
}

/// Runs the full pipeline once per grid value; a failing row is recorded
/// and the sweep moves on.
pub fn ablation_run(
    dataset: &Dataset,
    base: &PipelineConfig,
    grid: &AblationGrid,
    mut on_row: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    grid.expand(base)
        .into_iter()
        .map(|(parameter, value, cfg)| {
            let start = Instant::now();
            let result = cfg.stage1.validate().and_then(|_| run_pipeline(dataset, &cfg));
            let row = match result {
                Ok(o) => AblationRow {
                    parameter,
                    value,
                    accuracy: Some(o.train.test_accuracy),
                    purity_gain: Some(o.purity_gain),
                    density: Some(o.density),
                    wall_seconds: start.elapsed().as_secs_f64(),
                    error: None,
                },
                Err(e) => AblationRow {
                    parameter,
                    value,
                    accuracy: None,
                    purity_gain: None,
                    density: None,
                    wall_seconds: start.elapsed().as_secs_f64(),
                    error: Some(e.to_string()),
                },
            };
            on_row(&row);
            row
        })
        .collect()
}

fn cell(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10} {:>8} {:>8} {:>10} {:>8}\n", "param", "value", "acc %", "pur gain", "dens");
    for r in rows {
        let _ = write!(
            s,
            "{:<10} {:>8} {:>8} {:>10} {:>8}",
            r.parameter,
            r.value,
            cell(r.accuracy, |a| format!("{:.1}", 100.0 * a)),
            cell(r.purity_gain, |g| format!("{g:+.1}%")),
            cell(r.density, |d| format!("{d:.1}")),
        );
        if let Some(e) = &r.error {
            let _ = write!(s, "  failed: {e}");
        }
        s.push('\n');
    }
    s
}

pub fn deletion_table(rows: &[(&str, &DeletionReport)]) -> String {
    let mut s = format!(
        "{:<10} {:>3} {:>8} {:>8} {:>10} {:>8} {:>7}\n",
        "mode", "k", "base %", "pert %", "degr %", "voxels", "empty"
    );
    for (mode, r) in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>8.2} {:>8.2} {:>10.2} {:>8.2} {:>7}",
            mode,
            r.k,
            100.0 * r.baseline_accuracy,
            100.0 * r.perturbed_accuracy,
            r.degradation_pct,
            r.mean_voxels_removed,
            r.emptied.len()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_arithmetic() {
        assert!((relative_gain(13.0, 22.5).unwrap() - 73.076_923_076_923_08).abs() < 1e-12);
        assert_eq!(relative_gain(0.4, 0.4).unwrap(), 0.0);
        assert!(matches!(relative_gain(0.0, 0.3), Err(Error::DegenerateMetric(_))));
        assert!(relative_gain(f64::NAN, 0.3).is_err());
    }

    #[test]
    fn grid_expands_one_parameter_at_a_time() {
        use crate::backbone::{Architecture, Hyper, Widths};
        let arch = Architecture {
            hyper: Hyper::new(7, 64, 4),
            widths: Widths::compact(),
        };
        let base = PipelineConfig {
            stage1: StageOneConfig::new(arch, 1),
            stage2: StageTwoConfig::new(1),
        };
        let grid = AblationGrid {
            lambda: vec![0.0],
            grid_size: vec![5],
            channels: vec![128],
        };
        let rows = grid.expand(&base);
        assert_eq!(rows.len(), 3);
        let h: Vec<_> = rows.iter().map(|r| r.2.stage1.arch.hyper.clone()).collect();
        assert_eq!((h[0].lambda, h[0].grid_size, h[0].channels), (0.0, 7, 64));
        assert_eq!((h[1].lambda, h[1].grid_size, h[1].channels), (3.5, 5, 64));
        assert_eq!((h[2].lambda, h[2].grid_size, h[2].channels), (3.5, 7, 128));
    }

    #[test]
    fn failed_rows_are_recorded() {
        use crate::backbone::{Architecture, Hyper, Widths};
        use crate::splat_io::{ShapeClass, SyntheticConfig};
        let ds = Dataset::synthetic(
            &SyntheticConfig::default(),
            &[ShapeClass::Sphere, ShapeClass::Box],
            3,
            32,
            [0.34, 0.33, 0.33],
            1,
        )
        .unwrap();
        let arch = Architecture {
            hyper: Hyper::new(2, 6, 2),
            widths: Widths::tiny(),
        };
        let base = PipelineConfig {
            stage1: StageOneConfig::new(arch, 1),
            stage2: StageTwoConfig::new(1),
        };
        let grid = AblationGrid {
            channels: vec![0],
            ..Default::default()
        };
        let rows = ablation_run(&ds, &base, &grid, |_| {});
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error.is_some());
        assert!(ablation_table(&rows).contains("failed"));
    }
}

//! A small trained pipeline exercised across module boundaries.

use std::sync::OnceLock;

use xsplain_core::backbone::*;
use xsplain_core::diffmath::Tensor;
use xsplain_core::disentangler::*;
use xsplain_core::evalsuite::*;
use xsplain_core::explainer::*;
use xsplain_core::splat_io::*;
use xsplain_core::trainer::*;
use xsplain_core::Error;

struct Fixture {
    ds: Dataset,
    frozen: FrozenBackbone,
    state: DisentangleState,
    report: StageTwoReport,
}

fn arch(g: usize, c: usize) -> Architecture {
    Architecture {
        hyper: Hyper::new(g, c, 2),
        widths: Widths::tiny(),
    }
}

fn stage2_config() -> StageTwoConfig {
    let mut c = StageTwoConfig::new(5);
    c.curriculum = Curriculum {
        k_init: 4,
        k_final: 3,
        epochs: 6,
        update_period: 2,
    };
    c.optimizer.lr = 1e-2;
    c
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = Dataset::synthetic(
            &SyntheticConfig {
                grid_size: 3,
                ..SyntheticConfig::default()
            },
            &[ShapeClass::Sphere, ShapeClass::Box],
            10,
            64,
            [0.6, 0.2, 0.2],
            9,
        )
        .unwrap();
        let mut cfg = StageOneConfig::new(arch(3, 8), 2);
        cfg.epochs = 4;
        cfg.batch_size = 4;
        let (params, _) = train_stage1(&ds, &cfg).unwrap();
        let frozen = freeze(params);
        let (state, report) = train_stage2(&frozen, &ds, &stage2_config()).unwrap();
        Fixture {
            ds,
            frozen,
            state,
            report,
        }
    })
}

#[test]
fn stage_two_keeps_u_orthogonal_and_backbone_untouched() {
    let f = fixture();
    assert!(f.report.max_step_defect < 1e-5, "{}", f.report.max_step_defect);
    assert!((f.report.determinant - 1.0).abs() < 1e-5);
    assert_eq!(f.report.backbone_digest_before, f.report.backbone_digest_after);
    f.frozen.verify().unwrap();
    assert_eq!(f.state.registry.k, 3);
}

#[test]
fn compensation_preserves_every_decision() {
    let f = fixture();
    let all: Vec<&LabeledSample> = f.ds.samples.iter().collect();
    let check = decision_preservation(&f.frozen, &f.state, &all).unwrap();
    assert!(check.exact());
    assert!(check.max_logit_deviation < 1e-4);
}

#[test]
fn stored_activations_match_a_fresh_scan() {
    let f = fixture();
    let eps = f.frozen.params().hyper().epsilon;
    for (c, e) in f.state.registry.entries() {
        let s = f.ds.get(&e.sample_id).unwrap();
        let t = f.frozen.forward(s).unwrap();
        let h: Tensor<f64> = transform_voxels(&t.voxel_features.cast(), &f.state.u).unwrap();
        let a = channel_activation(&h, &s.voxel_counts).unwrap();
        assert_eq!(a[c], e.activation);
        assert_eq!(localize(&h, c, &s.voxel_counts).unwrap(), e.voxel);
        assert_eq!(purity(&h, c, &s.voxel_counts, eps).unwrap().value, e.purity);
    }
}

#[test]
fn prototypes_outrank_non_registry_samples() {
    let f = fixture();
    let train = f.ds.train();
    for c in 0..f.state.registry.n_channels() {
        let protos = retrieve_prototypes(&f.state.registry, c, &f.ds).unwrap();
        let weakest = protos.iter().map(|p| p.activation).fold(f64::INFINITY, f64::min);
        for s in &train {
            if protos.iter().any(|p| p.sample_id == s.id) {
                continue;
            }
            let t = f.frozen.forward(s).unwrap();
            let h: Tensor<f64> = transform_voxels(&t.voxel_features.cast(), &f.state.u).unwrap();
            assert!(channel_activation(&h, &s.voxel_counts).unwrap()[c] <= weakest);
        }
        for p in &protos {
            let s = f.ds.get(&p.sample_id).unwrap();
            assert_eq!(p.primitive_ids.len(), s.voxel_counts[p.voxel] as usize);
        }
    }
}

#[test]
fn stale_prototype_ids_are_reported() {
    let f = fixture();
    let mut reg = f.state.registry.clone();
    reg.channels[0][0].sample_id = "gone".into();
    assert!(matches!(retrieve_prototypes(&reg, 0, &f.ds), Err(Error::Registry(_))));
    assert!(matches!(retrieve_prototypes(&reg, 99, &f.ds), Err(Error::Registry(_))));
}

#[test]
fn explanation_export_is_complete_and_deterministic() {
    let f = fixture();
    let s = f.ds.test()[0];
    let expl = explain(&f.frozen, &f.state, &f.ds, s, 4).unwrap();
    let trace = f.frozen.forward(s).unwrap();
    let scores = channel_importance(&f.state.compensated(&trace).unwrap().global, &f.state.w_prime_f32(), expl.predicted).unwrap();
    let supporting = scores.iter().filter(|&&x| x >= 0.0).count().min(4);
    assert_eq!(expl.channels.len(), supporting);
    assert!(expl.channels.windows(2).all(|w| w[0].importance >= w[1].importance));

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = export_explanation(&expl, s, &f.ds, d1.path()).unwrap();
    export_explanation(&expl, s, &f.ds, d2.path()).unwrap();
    let plys = std::fs::read_dir(d1.path()).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ply")
    });
    assert_eq!(plys.count(), supporting * (1 + 3));
    let j1 = std::fs::read(d1.path().join("explanation.json")).unwrap();
    let j2 = std::fs::read(d2.path().join("explanation.json")).unwrap();
    assert_eq!(j1, j2);

    for ch in &m1.channels {
        assert!(s.voxel_counts[ch.voxel] > 0);
        let q = load_ply(d1.path().join(&ch.file), f.ds.feature_mode).unwrap();
        assert_eq!(q.len(), s.voxel_counts[ch.voxel] as usize);
        for p in &ch.prototypes {
            let a = std::fs::read(d1.path().join(&p.file)).unwrap();
            let b = std::fs::read(d2.path().join(&p.file)).unwrap();
            assert_eq!(a, b);
        }
    }
    let logits = f.state.compensated(&trace).unwrap().logits;
    for (a, b) in m1.logits.iter().zip(logits.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn deletion_grows_with_k() {
    let f = fixture();
    for s in f.ds.test() {
        let mut prev: Vec<usize> = Vec::new();
        for k in 1..=8 {
            let v = deletion_voxels(&f.frozen, &f.state, s, k).unwrap();
            assert!(prev.iter().all(|x| v.contains(x)), "k={k}");
            prev = v;
        }
    }
}

#[test]
fn random_control_contract() {
    let f = fixture();
    let test = f.ds.test();
    let none = random_deletion_control(&f.frozen, &f.state, &test, 0, 1).unwrap();
    assert_eq!(none.degradation_pct, 0.0);
    assert_eq!(none.baseline_accuracy, none.perturbed_accuracy);
    let a = random_deletion_control(&f.frozen, &f.state, &test, 2, 7).unwrap();
    let b = random_deletion_control(&f.frozen, &f.state, &test, 2, 7).unwrap();
    assert_eq!(a, b);
    // drawing every occupied voxel empties every sample
    let all = random_deletion_control(&f.frozen, &f.state, &test, 27, 1).unwrap();
    assert_eq!(all.emptied.len(), test.len());
    assert_eq!(all.perturbed_accuracy, 0.0);
    assert!(matches!(deletion_test(&f.frozen, &f.state, &test, 0), Err(Error::Config(_))));
}

#[test]
fn identity_has_no_purity_gain() {
    let f = fixture();
    let id = DisentangleState::identity(&f.frozen, f.state.registry.clone(), f.state.curriculum.clone());
    assert_eq!(purity_gain(&f.frozen, &id, &id, &f.ds).unwrap(), 0.0);
    assert_eq!(purity_gain(&f.frozen, &f.state, &f.state, &f.ds).unwrap(), 0.0);
}

#[test]
fn state_round_trips_and_rejects_other_backbones() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    f.state.save(&path).unwrap();
    assert_eq!(DisentangleState::load(&path).unwrap(), f.state);
    let other = freeze(BackboneParams::init(arch(3, 8), f.ds.class_names.clone(), 99).unwrap());
    assert!(matches!(
        explain(&other, &f.state, &f.ds, f.ds.test()[0], 2),
        Err(Error::FrozenViolation(_))
    ));
}

#[test]
fn single_voxel_density_is_sample_size() {
    // with one cell every located voxel holds the whole sample
    let ds = Dataset::synthetic(
        &SyntheticConfig {
            grid_size: 1,
            ..SyntheticConfig::default()
        },
        &[ShapeClass::Sphere, ShapeClass::Torus],
        4,
        40,
        [0.5, 0.25, 0.25],
        1,
    )
    .unwrap();
    let frozen = freeze(BackboneParams::init(arch(1, 4), ds.class_names.clone(), 1).unwrap());
    let mut cfg = stage2_config();
    cfg.curriculum = Curriculum {
        k_init: 2,
        k_final: 1,
        epochs: 2,
        update_period: 1,
    };
    let (state, _) = train_stage2(&frozen, &ds, &cfg).unwrap();
    assert_eq!(mean_activated_density(&state), 40.0);
}

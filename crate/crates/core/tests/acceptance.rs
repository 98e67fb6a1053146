//! Acceptance criteria, one PASS/FAIL line each. Runs without libtest so the
//! lines reach the terminal; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsplain_core::backbone::*;
use xsplain_core::diffmath::*;
use xsplain_core::disentangler::*;
use xsplain_core::evalsuite::*;
use xsplain_core::explainer::extract_subset;
use xsplain_core::gradcheck::{run_suite, TOLERANCE};
use xsplain_core::splat_io::*;
use xsplain_core::trainer::*;

const DATA_SEED: u64 = 42;
const MODEL_SEED: u64 = 1;
const EVAL_SETS: u64 = 20;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, ok: bool, detail: String, took: Duration) {
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} {id} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn suite_config() -> SyntheticConfig {
    SyntheticConfig {
        random_pose: true,
        ..SyntheticConfig::default()
    }
}

fn suite(seed: u64) -> Dataset {
    Dataset::synthetic(&suite_config(), &ShapeClass::ALL, 200, 512, [0.8, 0.1, 0.1], seed).unwrap()
}

fn pipeline_config(lambda: f64) -> PipelineConfig {
    let mut hyper = Hyper::new(7, 64, 4);
    hyper.lambda = lambda;
    let arch = Architecture {
        hyper,
        widths: Widths::compact(),
    };
    PipelineConfig {
        stage1: StageOneConfig::new(arch, MODEL_SEED),
        stage2: StageTwoConfig::new(MODEL_SEED),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn gradient_oracle(r: &mut Report) {
    let (checks, took) = timed(|| run_suite(7).unwrap());
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let ok = checks.iter().all(|c| c.passes(TOLERANCE)) && took < Duration::from_secs(120);
    r.line(
        3,
        "gradient oracle",
        ok,
        format!("{} checks, worst {} at {:.2e} (< {TOLERANCE:e})", checks.len(), worst.name, worst.max_rel_error),
        took,
    );
}

/// Everything the registry and explainer report, recomputed by exhaustive scans.
fn brute_force(r: &mut Report) {
    let start = Instant::now();
    let mut problems: Vec<String> = Vec::new();
    let mut checked = 0usize;
    for seed in 0..4u64 {
        let (g, c) = (3, 8);
        let ds = Dataset::synthetic(
            &SyntheticConfig {
                grid_size: g,
                ..suite_config()
            },
            &ShapeClass::ALL,
            5,
            48,
            [0.6, 0.2, 0.2],
            seed,
        )
        .unwrap();
        let arch = Architecture {
            hyper: Hyper::new(g, c, 4),
            widths: Widths::tiny(),
        };
        let frozen = freeze(BackboneParams::init(arch, ds.class_names.clone(), seed).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = skew_exp(&Tensor::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let eps = frozen.params().hyper().epsilon;
        let samples: Vec<&LabeledSample> = ds.samples.iter().collect();
        assert!(samples.len() <= 20);

        // full transformed grids, one per sample
        let raw: Vec<Tensor<f64>> = samples.iter().map(|s| frozen.forward(s).unwrap().voxel_features.cast()).collect();
        let grids: Vec<Tensor<f64>> = raw.iter().map(|h| transform_voxels(h, &u).unwrap()).collect();

        for ((s, h), hr) in samples.iter().zip(&grids).zip(&raw) {
            // transform against a naive triple loop
            let naive = (0..c).all(|i| {
                (0..g * g * g).all(|v| {
                    let x: f64 = (0..c).map(|k| u.get(i, k) * hr.get(k, v)).sum();
                    (x - h.get(i, v)).abs() <= 1e-12 * (1.0 + x.abs())
                })
            });
            if !naive {
                problems.push(format!("{}: transformed grid", s.id));
            }
            let act = channel_activation(h, &s.voxel_counts).unwrap();
            for ch in 0..c {
                let mut best = usize::MAX;
                for v in 0..g * g * g {
                    if s.voxel_counts[v] > 0 && (best == usize::MAX || h.get(ch, v) > h.get(ch, best)) {
                        best = v;
                    }
                }
                if localize(h, ch, &s.voxel_counts).unwrap() != best || act[ch] != h.get(ch, best) {
                    problems.push(format!("{} channel {ch}: localization", s.id));
                }
                checked += 1;
            }
            for v in s.occupied_voxels() {
                let gi = g as f64;
                let cell = |x: f32| ((x as f64 * gi).floor().max(0.0) as usize).min(g - 1);
                let scan: Vec<usize> = (0..s.len())
                    .filter(|&i| {
                        let p = s.normalized_positions[i];
                        cell(p[0]) * g * g + cell(p[1]) * g + cell(p[2]) == v
                    })
                    .collect();
                if extract_subset(s, v).unwrap() != scan {
                    problems.push(format!("{} voxel {v}: subset", s.id));
                }
            }
        }

        let cache = cache_voxel_features(&frozen, &samples).unwrap();
        for k in 1..=6 {
            let reg = discover_prototypes(&cache, &u, k, eps).unwrap();
            for ch in 0..c {
                let mut all: Vec<(f64, &str, usize)> = samples
                    .iter()
                    .zip(&grids)
                    .map(|(s, h)| {
                        let v = localize(h, ch, &s.voxel_counts).unwrap();
                        (h.get(ch, v), s.id.as_str(), v)
                    })
                    .collect();
                all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
                let got: Vec<(f64, &str, usize)> = reg.channels[ch]
                    .iter()
                    .map(|e| (e.activation, e.sample_id.as_str(), e.voxel))
                    .collect();
                if got[..] != all[..k] {
                    problems.push(format!("seed {seed} k {k} channel {ch}: registry"));
                }
            }
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("{checked} channel scans, registries for k = 1..6 on 4 instances")
    } else {
        format!("{} mismatches, first {}", problems.len(), problems[0])
    };
    r.line(8, "brute-force equivalence", ok, detail, start.elapsed());
}

fn permutation_invariance(r: &mut Report, frozen: &FrozenBackbone, samples: &[&LabeledSample]) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut broken = 0;
    for s in samples {
        let base: Vec<u32> = frozen.forward(s).unwrap().logits.data().iter().map(|x| x.to_bits()).collect();
        let mut order: Vec<usize> = (0..s.len()).collect();
        for _ in 0..50 {
            order.shuffle(&mut rng);
            let t = frozen.forward(&s.subset(&order)).unwrap();
            let bits: Vec<u32> = t.logits.data().iter().map(|x| x.to_bits()).collect();
            if bits != base {
                broken += 1;
            }
        }
    }
    r.line(
        9,
        "permutation invariance",
        broken == 0,
        format!("{} samples x 50 permutations, {broken} differ", samples.len()),
        start.elapsed(),
    );
}

fn faithfulness(r: &mut Report, frozen: &FrozenBackbone, state: &DisentangleState) {
    let start = Instant::now();
    let (mut top1, mut top5, mut random) = (0.0, 0.0, 0.0);
    for s in 0..EVAL_SETS {
        let eval = suite(1000 + s);
        let test = eval.test();
        top1 += deletion_test(frozen, state, &test, 1).unwrap().degradation_pct;
        top5 += deletion_test(frozen, state, &test, 5).unwrap().degradation_pct;
        random += random_deletion_control(frozen, state, &test, 1, s).unwrap().degradation_pct;
    }
    let n = EVAL_SETS as f64;
    let (top1, top5, random) = (top1 / n, top5 / n, random / n);
    let took = start.elapsed();
    let ok = top1 > random && top5 >= top1 && took <= Duration::from_secs(300);
    r.line(
        6,
        "deletion faithfulness",
        ok,
        format!("over {EVAL_SETS} sets: top-1 {top1:.3}%, random {random:.3}%, top-5 {top5:.3}%"),
        took,
    );
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    gradient_oracle(&mut r);
    brute_force(&mut r);

    let ds = suite(DATA_SEED);
    let (main, took) = timed(|| run_pipeline(&ds, &pipeline_config(3.5)).unwrap());
    let test = ds.test();
    let accuracy = evaluate(main.frozen.params(), &test).unwrap();

    let (check, t1) = timed(|| decision_preservation(&main.frozen, &main.state, &test).unwrap());
    r.line(
        1,
        "decision preservation",
        check.exact() && check.max_logit_deviation < 1e-4,
        format!(
            "{:.1}% of {} test samples agree, max |logit diff| {:.2e}",
            100.0 * check.argmax_agreement,
            check.samples,
            check.max_logit_deviation
        ),
        t1,
    );

    let rep = &main.stage2;
    let defect = orthogonality_defect(&main.state.u);
    let det = (main.state.determinant() - 1.0).abs();
    r.line(
        2,
        "orthogonality",
        defect < 1e-5 && det < 1e-5 && rep.max_step_defect < 1e-5,
        format!("final defect {defect:.2e}, worst step {:.2e}, |det - 1| {det:.2e}", rep.max_step_defect),
        Duration::ZERO,
    );

    let stage1_time = Duration::from_secs_f64(main.train.wall_seconds);
    r.line(
        4,
        "classification",
        accuracy >= 0.90 && stage1_time <= Duration::from_secs(1200),
        format!("test accuracy {accuracy:.4} on {} samples (best epoch {})", test.len(), main.train.best_epoch),
        stage1_time,
    );

    let stage2_time = Duration::from_secs_f64(rep.wall_seconds);
    r.line(
        5,
        "purity gain",
        main.purity_gain >= 20.0 && stage2_time <= Duration::from_secs(600),
        format!(
            "{:+.2}% relative ({} steps, registry purity {:.4} -> {:.4})",
            main.purity_gain, rep.steps, rep.initial_mean_purity, rep.final_mean_purity
        ),
        stage2_time,
    );

    faithfulness(&mut r, &main.frozen, &main.state);

    let (plain, took0) = timed(|| run_pipeline(&ds, &pipeline_config(0.0)).unwrap());
    let total = took + took0;
    r.line(
        7,
        "density regularization",
        main.density > plain.density && total <= Duration::from_secs(2400),
        format!("mean activated density {:.3} at lambda 3.5, {:.3} at lambda 0", main.density, plain.density),
        total,
    );

    permutation_invariance(&mut r, &main.frozen, &test);

    println!("{} of 9 criteria failed", r.failures);
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

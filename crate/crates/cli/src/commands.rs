use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use xsplain_core::archive::hex_digest;
use xsplain_core::backbone::BackboneParams;
use xsplain_core::disentangler::{decision_preservation, train_stage2, DisentangleState, PreservationCheck};
use xsplain_core::evalsuite::{
    ablation_run, ablation_table, deletion_table, deletion_test, mean_activated_density, purity_gain,
    random_deletion_control, DeletionReport,
};
use xsplain_core::explainer::{explain as explain_sample, export_explanation};
use xsplain_core::gradcheck::{run_suite, TOLERANCE};
use xsplain_core::splat_io::Dataset;
use xsplain_core::trainer::{freeze, train_stage1_with, FrozenBackbone};
use xsplain_core::Error;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("missing {path}; run `xsplain {step}` first")]
    Missing { path: PathBuf, step: &'static str },
    #[error("{0} is not empty; pass --force to overwrite")]
    Refused(PathBuf),
    #[error("{0}")]
    Check(String),
    #[error("setup failed: {0}")]
    Setup(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Missing { .. } => "missing_artifact",
            CliError::Refused(_) => "refused",
            CliError::Check(_) => "check_failed",
            CliError::Setup(_) => "setup",
        }
    }

    /// One JSON object per failure, for scripts.
    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

const BACKBONE: &str = "backbone.bin";
const STATE: &str = "disentangle.bin";

fn require(path: PathBuf, step: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing { path, step })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(())
}

/// Writes the fully resolved configuration next to the outputs.
pub fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    ensure_out(cfg)?;
    write_text(&cfg.out.join(format!("{command}.config.toml")), &cfg.to_toml())
}

fn load_dataset(cfg: &RunConfig, grid_size: usize) -> Result<Dataset> {
    let manifest = require(cfg.manifest_path(), "generate")?;
    Ok(Dataset::load(manifest, grid_size)?)
}

fn load_backbone(cfg: &RunConfig) -> Result<FrozenBackbone> {
    let path = require(cfg.out.join(BACKBONE), "train")?;
    Ok(freeze(BackboneParams::load(path)?))
}

fn load_state(cfg: &RunConfig) -> Result<(FrozenBackbone, DisentangleState, Dataset)> {
    let state_path = require(cfg.out.join(STATE), "disentangle")?;
    let frozen = load_backbone(cfg)?;
    let state = DisentangleState::load(state_path)?;
    state.check_backbone(&frozen)?;
    let ds = load_dataset(cfg, frozen.params().hyper().grid_size)?;
    Ok((frozen, state, ds))
}

pub fn generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = cfg.data_dir();
    if dir.exists() {
        let non_empty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Refused(dir));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let ds = Dataset::synthetic(
        &cfg.synthetic(),
        &cfg.data.classes,
        cfg.data.per_class,
        cfg.data.n_primitives,
        cfg.data.ratios,
        cfg.seed,
    )?;
    ds.save(&dir)?;
    let bytes = fs::read(cfg.manifest_path()).map_err(|e| Error::io(cfg.manifest_path(), e))?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        ds.samples.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        dir.display()
    );
    println!("manifest sha256 {}", hex_digest(&bytes));
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg, cfg.hyper.grid_size)?;
    ensure_out(cfg)?;
    let stage1 = cfg.stage1(ds.n_classes());
    stage1.validate()?;
    let (params, report) = train_stage1_with(&ds, &stage1, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  cls {:.4}  dens {:.4}  train {:.3}  val {:.3}",
            e.epoch, e.train_loss, e.cls_loss, e.density_loss, e.train_accuracy, e.val_accuracy
        );
    })?;
    params.save(cfg.out.join(BACKBONE), serde_json::json!({ "best_epoch": report.best_epoch }))?;
    write_json(&cfg.out.join("train_report.json"), &report)?;
    println!(
        "best epoch {}  val {:.4}  test {:.4}  ({} parameters, {:.1}s)",
        report.best_epoch, report.best_val_accuracy, report.test_accuracy, report.n_parameters, report.wall_seconds
    );
    println!("backbone sha256 {}", report.digest);
    Ok(())
}

pub fn disentangle(cfg: &RunConfig) -> Result<()> {
    let frozen = load_backbone(cfg)?;
    let ds = load_dataset(cfg, frozen.params().hyper().grid_size)?;
    let stage2 = cfg.stage2();
    let (state, report) = train_stage2(&frozen, &ds, &stage2)?;
    for r in &report.refreshes {
        eprintln!("epoch {:>3}  k {:>2}  purity {:.4}  density {:.2}", r.epoch, r.k, r.mean_purity, r.mean_density);
    }
    let identity = DisentangleState::identity(&frozen, state.registry.clone(), state.curriculum.clone());
    let gain = purity_gain(&frozen, &identity, &state, &ds)?;
    state.save(cfg.out.join(STATE))?;
    state.export_registry(cfg.out.join("registry.json"))?;
    write_json(&cfg.out.join("stage2_report.json"), &report)?;
    println!(
        "purity gain {gain:+.2}%  density {:.2}  |U^T U - I| {:.2e}  det U {:.12}",
        mean_activated_density(&state),
        report.orthogonality_defect,
        report.determinant
    );
    Ok(())
}

pub fn explain(cfg: &RunConfig) -> Result<()> {
    let (frozen, state, ds) = load_state(cfg)?;
    let sample = match &cfg.explain.sample {
        Some(id) => ds
            .get(id)
            .ok_or_else(|| Error::Data(format!("no sample {id:?} in the dataset")))?,
        None => *ds
            .test()
            .first()
            .ok_or_else(|| Error::Data("test split is empty".into()))?,
    };
    let expl = explain_sample(&frozen, &state, &ds, sample, cfg.hyper.top_m)?;
    let dir = cfg.out.join("explain").join(&sample.id);
    let manifest = export_explanation(&expl, sample, &ds, &dir)?;
    println!(
        "{}: label {} predicted {} ({})",
        sample.id, ds.class_names[sample.label], manifest.predicted_class, expl.predicted
    );
    for ch in &manifest.channels {
        println!(
            "  channel {:>4}  importance {:.4}  voxel {:>4}  {} primitives  {} prototypes",
            ch.channel,
            ch.importance,
            ch.voxel,
            ch.primitives,
            ch.prototypes.len()
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    samples: usize,
    accuracy: f64,
    preservation: PreservationCheck,
    deletion: Vec<DeletionReport>,
    /// Random control per `k`, averaged over the control seeds.
    random_control: Vec<RandomControl>,
}

#[derive(Serialize)]
struct RandomControl {
    k: usize,
    seeds: u64,
    mean_degradation_pct: f64,
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (frozen, state, ds) = load_state(cfg)?;
    let test = ds.test();
    let preservation = decision_preservation(&frozen, &state, &test)?;
    println!(
        "decision preservation: {:.2}% argmax agreement over {} test samples, max |logit diff| {:.3e}",
        100.0 * preservation.argmax_agreement,
        preservation.samples,
        preservation.max_logit_deviation
    );
    let mut deletion = Vec::new();
    let mut random_control = Vec::new();
    for &k in &cfg.evaluate.top_k_delete {
        deletion.push(deletion_test(&frozen, &state, &test, k)?);
        let mut sum = 0.0;
        for seed in 0..cfg.evaluate.control_seeds {
            sum += random_deletion_control(&frozen, &state, &test, k, cfg.seed.wrapping_add(seed))?.degradation_pct;
        }
        random_control.push(RandomControl {
            k,
            seeds: cfg.evaluate.control_seeds,
            mean_degradation_pct: sum / cfg.evaluate.control_seeds as f64,
        });
    }
    let accuracy = deletion[0].baseline_accuracy;
    println!("test accuracy {:.4}", accuracy);
    let rows: Vec<(&str, &DeletionReport)> = deletion.iter().map(|r| ("top", r)).collect();
    let mut table = deletion_table(&rows);
    for r in &random_control {
        table.push_str(&format!(
            "random k={} mean degradation over {} seeds: {:.2}%\n",
            r.k, r.seeds, r.mean_degradation_pct
        ));
    }
    print!("{table}");
    write_text(&cfg.out.join("evaluation.txt"), &table)?;
    write_json(
        &cfg.out.join("evaluation.json"),
        &Evaluation {
            samples: test.len(),
            accuracy,
            preservation,
            deletion,
            random_control,
        },
    )
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg, cfg.hyper.grid_size)?;
    ensure_out(cfg)?;
    let base = cfg.pipeline(ds.n_classes());
    let rows = ablation_run(&ds, &base, &cfg.ablate, |r| {
        eprintln!("{} = {} done in {:.1}s", r.parameter, r.value, r.wall_seconds);
    });
    let table = ablation_table(&rows);
    print!("{table}");
    write_text(&cfg.out.join("ablation.txt"), &table)?;
    write_json(&cfg.out.join("ablation.json"), &rows)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let checks = run_suite(cfg.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.passes(TOLERANCE);
        println!(
            "{:<24} max rel {:.3e}  ({} coords)  {}",
            c.name,
            c.max_rel_error,
            c.coordinates,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.name.clone());
        }
    }
    ensure_out(cfg)?;
    write_json(&cfg.out.join("gradcheck.json"), &checks)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient checks above {TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

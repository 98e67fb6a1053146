use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xsplain_core::backbone::{Architecture, Hyper, Widths};
use xsplain_core::disentangler::{Curriculum, StageTwoConfig};
use xsplain_core::evalsuite::{AblationGrid, PipelineConfig};
use xsplain_core::splat_io::{ShapeClass, SyntheticConfig};
use xsplain_core::trainer::{AdamConfig, StageOneConfig};
use xsplain_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    /// Root of every artifact the commands read and write.
    pub out: PathBuf,
    pub data: DataSection,
    pub hyper: HyperSection,
    pub model: ModelSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub explain: ExplainSection,
    pub evaluate: EvaluateSection,
    pub ablate: AblationGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory; `<out>/data` when unset.
    pub dir: Option<PathBuf>,
    pub classes: Vec<ShapeClass>,
    pub per_class: usize,
    pub n_primitives: usize,
    pub ratios: [f64; 3],
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub grid_size: usize,
    pub channels: usize,
    pub lambda: f64,
    pub tau: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Channels per explanation.
    pub top_m: usize,
    pub k_init: usize,
    pub k_final: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthPreset {
    Compact,
    Standard,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: WidthPreset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub cosine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub epochs: usize,
    pub update_period: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Sample id; the first test sample when unset.
    pub sample: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub top_k_delete: Vec<usize>,
    /// Seeds averaged by the random-deletion control.
    pub control_seeds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 1,
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            hyper: HyperSection::default(),
            model: ModelSection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            explain: ExplainSection::default(),
            evaluate: EvaluateSection::default(),
            ablate: AblationGrid {
                lambda: vec![0.0, 1.0, 3.5],
                grid_size: vec![5, 7],
                channels: vec![64, 256],
            },
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            classes: ShapeClass::ALL.to_vec(),
            per_class: 200,
            n_primitives: 512,
            ratios: [0.8, 0.1, 0.1],
            synthetic: SyntheticConfig {
                random_pose: true,
                ..SyntheticConfig::default()
            },
        }
    }
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = Hyper::new(7, 256, 1);
        let c = Curriculum::default();
        Self {
            grid_size: h.grid_size,
            channels: h.channels,
            lambda: h.lambda,
            tau: h.tau,
            beta: h.beta,
            epsilon: h.epsilon,
            top_m: 4,
            k_init: c.k_init,
            k_final: c.k_final,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: WidthPreset::Compact,
        }
    }
}

impl Default for Stage1Section {
    fn default() -> Self {
        let o = AdamConfig::default();
        Self {
            epochs: 60,
            batch_size: 16,
            patience: 15,
            lr: o.lr,
            cosine: o.cosine,
        }
    }
}

impl Default for Stage2Section {
    fn default() -> Self {
        let c = StageTwoConfig::new(0);
        Self {
            epochs: c.curriculum.epochs,
            update_period: c.curriculum.update_period,
            batch_size: c.batch_size,
            lr: c.optimizer.lr,
        }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            top_k_delete: vec![1, 5],
            control_seeds: 20,
        }
    }
}

impl WidthPreset {
    pub fn widths(self) -> Widths {
        match self {
            WidthPreset::Compact => Widths::compact(),
            WidthPreset::Standard => Widths::standard(),
            WidthPreset::Tiny => Widths::tiny(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            grid_size: self.hyper.grid_size,
            ..self.data.synthetic.clone()
        }
    }

    pub fn architecture(&self, n_classes: usize) -> Architecture {
        let h = &self.hyper;
        let mut hyper = Hyper::new(h.grid_size, h.channels, n_classes);
        hyper.lambda = h.lambda;
        hyper.tau = h.tau;
        hyper.beta = h.beta;
        hyper.epsilon = h.epsilon;
        Architecture {
            hyper,
            widths: self.model.widths.widths(),
        }
    }

    pub fn stage1(&self, n_classes: usize) -> StageOneConfig {
        let mut c = StageOneConfig::new(self.architecture(n_classes), self.seed);
        c.epochs = self.stage1.epochs;
        c.batch_size = self.stage1.batch_size;
        c.patience = self.stage1.patience;
        c.optimizer.lr = self.stage1.lr;
        c.optimizer.cosine = self.stage1.cosine;
        c
    }

    pub fn stage2(&self) -> StageTwoConfig {
        let mut c = StageTwoConfig::new(self.seed);
        c.curriculum = Curriculum {
            k_init: self.hyper.k_init,
            k_final: self.hyper.k_final,
            epochs: self.stage2.epochs,
            update_period: self.stage2.update_period,
        };
        c.batch_size = self.stage2.batch_size;
        c.optimizer.lr = self.stage2.lr;
        c
    }

    pub fn pipeline(&self, n_classes: usize) -> PipelineConfig {
        PipelineConfig {
            stage1: self.stage1(n_classes),
            stage2: self.stage2(),
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.data.classes.is_empty() {
            return bad("data.classes is empty".into());
        }
        let mut seen = self.data.classes.clone();
        seen.sort_by_key(|c| c.as_str());
        seen.dedup();
        if seen.len() != self.data.classes.len() {
            return bad("data.classes lists a class twice".into());
        }
        if self.data.per_class < 3 {
            return bad("data.per_class must be >= 3".into());
        }
        if self.data.n_primitives < 32 {
            return bad("data.n_primitives must be >= 32".into());
        }
        let r = self.data.ratios;
        if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.ratios {r:?} must be non-negative and sum to 1"));
        }
        if !(0.0..1.0).contains(&self.data.synthetic.floater_fraction) {
            return bad("data.synthetic.floater_fraction must lie in [0, 1)".into());
        }
        let h = &self.hyper;
        if h.top_m == 0 || h.top_m > h.channels {
            return bad(format!("hyper.top_m = {} must lie in [1, {}]", h.top_m, h.channels));
        }
        self.stage1(self.data.classes.len()).validate()?;
        self.stage2().validate()?;
        if self.evaluate.top_k_delete.is_empty() || self.evaluate.top_k_delete.contains(&0) {
            return bad("evaluate.top_k_delete needs values >= 1".into());
        }
        if self.evaluate.control_seeds == 0 {
            return bad("evaluate.control_seeds must be >= 1".into());
        }
        for &l in &self.ablate.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("ablate.lambda value {l} must be finite and >= 0"));
            }
        }
        if self.ablate.grid_size.contains(&0) || self.ablate.channels.contains(&0) {
            return bad("ablate grid values must be >= 1".into());
        }
        Ok(())
    }
}

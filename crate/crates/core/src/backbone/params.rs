use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{Real, Tensor};
use crate::error::{Error, Result};
use crate::splat_io::INPUT_FEATURES;

/// Scalars shared by the forward pass and the Stage-1 objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub grid_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    /// Softmax temperature on voxel activation norms.
    pub tau: f64,
    /// Exponent on voxel point counts in the target density.
    pub beta: f64,
    pub epsilon: f64,
    /// Weight of the density term.
    pub lambda: f64,
}

impl Hyper {
    pub fn new(grid_size: usize, channels: usize, n_classes: usize) -> Self {
        Self {
            grid_size,
            channels,
            n_classes,
            tau: 1.0,
            beta: 1.0,
            epsilon: 1e-6,
            lambda: 3.5,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.grid_size.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_size == 0 {
            return bad("grid_size must be >= 1");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be finite and > 0");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and > 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be finite and > 0");
        }
        Ok(())
    }
}

/// Hidden widths. The feature-alignment net acts on the last `mlp1` width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    pub mlp1: Vec<usize>,
    pub mlp2_hidden: Vec<usize>,
    /// Per-point layers inside each alignment net.
    pub stn_point: Vec<usize>,
    /// Dense layers after the alignment net's max pool.
    pub stn_fc: Vec<usize>,
}

impl Widths {
    /// Per-point widths of the usual point network with a slimmer
    /// alignment net; this is what desk-scale runs use.
    pub fn compact() -> Self {
        Self {
            mlp1: vec![64, 64],
            mlp2_hidden: vec![128],
            stn_point: vec![64, 128, 256],
            stn_fc: vec![128, 64],
        }
    }

    /// Alignment nets at full point-network width.
    pub fn standard() -> Self {
        Self {
            stn_point: vec![64, 128, 1024],
            stn_fc: vec![512, 256],
            ..Self::compact()
        }
    }

    /// Small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        Self {
            mlp1: vec![6, 5],
            mlp2_hidden: vec![7],
            stn_point: vec![6, 8],
            stn_fc: vec![5],
        }
    }

    pub fn feature_size(&self) -> usize {
        *self.mlp1.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mlp1", &self.mlp1), ("stn_point", &self.stn_point)] {
            if v.is_empty() {
                return Err(Error::Config(format!("{name} needs at least one layer")));
            }
        }
        let all = self.mlp1.iter().chain(&self.mlp2_hidden).chain(&self.stn_point).chain(&self.stn_fc);
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for Widths {
    fn default() -> Self {
        Self::compact()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hyper: Hyper,
    pub widths: Widths,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.widths.validate()
    }
}

/// `y = W x + b` with `W` as `out x in` and `b` as `out x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<W> {
    pub weight: W,
    pub bias: W,
}

/// Alignment net predicting a `size x size` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Stn<W> {
    pub size: usize,
    pub point: Vec<Dense<W>>,
    pub fc: Vec<Dense<W>>,
    pub out: Dense<W>,
}

/// Every learnable slot of the backbone, generic over what fills a slot
/// (tensors, tape handles, optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Net<W> {
    pub stn3: Stn<W>,
    pub mlp1: Vec<Dense<W>>,
    pub stn_feat: Stn<W>,
    pub mlp2: Vec<Dense<W>>,
    /// `K x C`, no bias.
    pub classifier: W,
}

impl<W> Dense<W> {
    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Dense<U> {
        Dense {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<W> Stn<W> {
    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Stn<U> {
        Stn {
            size: self.size,
            point: self.point.iter().map(|d| d.map(f)).collect(),
            fc: self.fc.iter().map(|d| d.map(f)).collect(),
            out: self.out.map(f),
        }
    }

    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a W)>) {
        for (i, d) in self.point.iter().enumerate() {
            out.push((format!("{prefix}.point{i}.weight"), &d.weight));
            out.push((format!("{prefix}.point{i}.bias"), &d.bias));
        }
        for (i, d) in self.fc.iter().enumerate() {
            out.push((format!("{prefix}.fc{i}.weight"), &d.weight));
            out.push((format!("{prefix}.fc{i}.bias"), &d.bias));
        }
        out.push((format!("{prefix}.out.weight"), &self.out.weight));
        out.push((format!("{prefix}.out.bias"), &self.out.bias));
    }

    fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut W>) {
        for d in self.point.iter_mut().chain(self.fc.iter_mut()) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.out.weight);
        out.push(&mut self.out.bias);
    }
}

impl<W> Net<W> {
    /// Applies `f` to every slot in [`named`](Self::named) order.
    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> Net<U> {
        Net {
            stn3: self.stn3.map(&mut f),
            mlp1: self.mlp1.iter().map(|d| d.map(&mut f)).collect(),
            stn_feat: self.stn_feat.map(&mut f),
            mlp2: self.mlp2.iter().map(|d| d.map(&mut f)).collect(),
            classifier: f(&self.classifier),
        }
    }

    /// Slots with stable dotted names.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.stn3.slots("stn3", &mut out);
        for (i, d) in self.mlp1.iter().enumerate() {
            out.push((format!("mlp1.{i}.weight"), &d.weight));
            out.push((format!("mlp1.{i}.bias"), &d.bias));
        }
        self.stn_feat.slots("stn_feat", &mut out);
        for (i, d) in self.mlp2.iter().enumerate() {
            out.push((format!("mlp2.{i}.weight"), &d.weight));
            out.push((format!("mlp2.{i}.bias"), &d.bias));
        }
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    /// Mutable slots in [`named`](Self::named) order.
    pub fn slots_mut(&mut self) -> Vec<&mut W> {
        let mut out = Vec::new();
        self.stn3.slots_mut(&mut out);
        for d in &mut self.mlp1 {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        self.stn_feat.slots_mut(&mut out);
        for d in &mut self.mlp2 {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.classifier);
        out
    }
}

impl<T: Real> Net<Tensor<T>> {
    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.rows(), t.cols()))
    }

    pub fn n_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, slot by slot.
    pub fn accumulate(&mut self, other: &Self) {
        let src = other.named();
        for (dst, (_, s)) in self.slots_mut().into_iter().zip(src) {
            for (d, &x) in dst.data_mut().iter_mut().zip(s.data()) {
                *d += x;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slots_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Learned Stage-1 weights plus the architecture they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub arch: Architecture,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub net: Net<Tensor<T>>,
}

fn dense<T: Real>(rng: &mut ChaCha8Rng, out: usize, inp: usize, gain: f64) -> Dense<Tensor<T>> {
    let normal = Normal::new(0.0, (gain / inp as f64).sqrt()).expect("positive std");
    Dense {
        weight: Tensor::from_fn(out, inp, |_, _| T::lit(normal.sample(rng))),
        bias: Tensor::zeros(out, 1),
    }
}

fn stack<T: Real>(rng: &mut ChaCha8Rng, mut inp: usize, widths: &[usize]) -> Vec<Dense<Tensor<T>>> {
    widths
        .iter()
        .map(|&w| {
            let d = dense(rng, w, inp, 2.0);
            inp = w;
            d
        })
        .collect()
}

fn stn<T: Real>(rng: &mut ChaCha8Rng, size: usize, widths: &Widths) -> Stn<Tensor<T>> {
    let point = stack(rng, size, &widths.stn_point);
    let pooled = *widths.stn_point.last().expect("validated");
    let fc = stack(rng, pooled, &widths.stn_fc);
    let last = widths.stn_fc.last().copied().unwrap_or(pooled);
    let identity = Tensor::<T>::identity(size);
    Stn {
        size,
        point,
        fc,
        out: Dense {
            weight: Tensor::zeros(size * size, last),
            bias: Tensor::from_vec(size * size, 1, identity.into_data()).expect("square"),
        },
    }
}

impl<T: Real> BackboneParams<T> {
    /// He-normal per-point and dense layers, identity alignment nets,
    /// Xavier-normal classifier.
    pub fn init(arch: Architecture, class_names: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if class_names.len() != arch.hyper.n_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                arch.hyper.n_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &arch.widths;
        let stn3 = stn(&mut rng, 3, w);
        let mlp1 = stack(&mut rng, INPUT_FEATURES, &w.mlp1);
        let stn_feat = stn(&mut rng, w.feature_size(), w);
        let mut widths2 = w.mlp2_hidden.clone();
        widths2.push(arch.hyper.channels);
        let mlp2 = stack(&mut rng, w.feature_size(), &widths2);
        let (k, c) = (arch.hyper.n_classes, arch.hyper.channels);
        let classifier = dense(&mut rng, k, c, 2.0 * c as f64 / (k + c) as f64).weight;
        Ok(Self {
            arch,
            class_names,
            seed,
            net: Net {
                stn3,
                mlp1,
                stn_feat,
                mlp2,
                classifier,
            },
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.arch.hyper
    }

    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        BackboneParams {
            arch: self.arch.clone(),
            class_names: self.class_names.clone(),
            seed: self.seed,
            net: self.net.map(|t| t.cast()),
        }
    }

    /// SHA-256 over slot names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.net.named() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

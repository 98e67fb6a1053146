use serde::Serialize;

use super::{BackboneParams, Hyper, Net, Stn};
use crate::diffmath::{Axis, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::splat_io::LabeledSample;

/// Every intermediate of one forward pass, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    /// `C x N` per-primitive features.
    pub point_features: Tensor<T>,
    /// `C x G^3` voxel features; empty voxels are zero columns.
    pub voxel_features: Tensor<T>,
    /// `C x 1` mean over all voxels.
    pub global: Tensor<T>,
    /// `K x 1`.
    pub logits: Tensor<T>,
    /// `G^3 x 1` column norms of the voxel features.
    pub activation_norms: Tensor<T>,
    pub p: Tensor<T>,
    pub q: Tensor<T>,
    pub input_transform: Tensor<T>,
    pub feature_transform: Tensor<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.data())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Graph {
    pub point_features: Var,
    pub voxel_features: Var,
    pub global: Var,
    pub logits: Var,
    pub activation_norms: Var,
    pub p: Var,
    pub q: Var,
    pub input_transform: Var,
    pub feature_transform: Var,
}

/// Stage-1 objective split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stage1Terms {
    pub total: f64,
    pub cls: f64,
    pub density: f64,
}

/// Pushes the alignment net for `x` (`size x N`) and returns its matrix.
pub fn stn_graph<T: Real>(tape: &mut Tape<T>, stn: &Stn<Var>, x: Var) -> Result<Var> {
    let n = tape.shape(x).1;
    let mut h = x;
    for d in &stn.point {
        let l = tape.linear(h, d.weight, d.bias)?;
        h = tape.relu(l);
    }
    h = tape.masked_max_pool(h, &vec![0; n], 1)?;
    for d in &stn.fc {
        let l = tape.linear(h, d.weight, d.bias)?;
        h = tape.relu(l);
    }
    let flat = tape.linear(h, stn.out.weight, stn.out.bias)?;
    tape.reshape(flat, stn.size, stn.size)
}

/// Applies a predicted alignment by right-multiplying each point (row)
/// vector: `x_i^T T`, i.e. `T^T X` on the channel-major batch.
fn align<T: Real>(tape: &mut Tape<T>, transform: Var, x: Var) -> Result<Var> {
    let tt = tape.transpose(transform);
    tape.matmul(tt, x)
}

/// `(n_v^beta + eps) / sum_u (n_u^beta + eps)` as a `G^3 x 1` vector.
pub fn target_density<T: Real>(counts: &[u32], beta: f64, epsilon: f64) -> Tensor<T> {
    let raw: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(beta) + epsilon).collect();
    let total: f64 = raw.iter().sum();
    Tensor::vector(raw.into_iter().map(|x| T::lit(x / total)).collect())
}

/// Builds the forward pass for `sample` over parameter handles `net`.
pub fn build_graph<T: Real>(
    tape: &mut Tape<T>,
    net: &Net<Var>,
    hyper: &Hyper,
    sample: &LabeledSample,
) -> Result<Graph> {
    if sample.grid_size != hyper.grid_size {
        return Err(Error::Config(format!(
            "sample {:?} voxelized at G={} but the model uses G={}",
            sample.id, sample.grid_size, hyper.grid_size
        )));
    }
    if sample.is_empty() {
        return Err(Error::Data(format!("sample {:?} has no primitives", sample.id)));
    }
    let n_voxels = hyper.n_voxels();
    let features = tape.constant(sample.input_features());
    let positions = tape.slice_rows(features, 0, 3)?;
    let rest = tape.slice_rows(features, 3, tape.shape(features).0)?;

    let input_transform = stn_graph(tape, &net.stn3, positions)?;
    let aligned = align(tape, input_transform, positions)?;
    let mut h = tape.concat_rows(&[aligned, rest])?;
    for d in &net.mlp1 {
        let l = tape.linear(h, d.weight, d.bias)?;
        h = tape.relu(l);
    }
    let feature_transform = stn_graph(tape, &net.stn_feat, h)?;
    h = align(tape, feature_transform, h)?;
    for d in &net.mlp2 {
        let l = tape.linear(h, d.weight, d.bias)?;
        h = tape.relu(l);
    }
    let point_features = h;

    let groups: Vec<usize> = sample.voxel_index.iter().map(|&v| v as usize).collect();
    let voxel_features = tape.masked_max_pool(point_features, &groups, n_voxels)?;
    let global = tape.mean_pool(voxel_features, Axis::Cols);
    let logits = tape.matmul(net.classifier, global)?;

    let activation_norms = tape.column_norms(voxel_features);
    let p = tape.temp_softmax(activation_norms, T::lit(hyper.tau))?;
    let q = tape.constant(target_density(&sample.voxel_counts, hyper.beta, hyper.epsilon));
    Ok(Graph {
        point_features,
        voxel_features,
        global,
        logits,
        activation_norms,
        p,
        q,
        input_transform,
        feature_transform,
    })
}

/// `CE(logits, label) + lambda * KL(p || q)`; returns `(total, cls, density)`.
pub fn stage1_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    g: &Graph,
    label: usize,
    hyper: &Hyper,
) -> Result<(Var, Var, Var)> {
    let cls = tape.softmax_cross_entropy(g.logits, label)?;
    let density = tape.kl_divergence(g.p, g.q)?;
    let weighted = tape.scale(density, T::lit(hyper.lambda));
    let total = tape.add(cls, weighted)?;
    Ok((total, cls, density))
}

fn extract<T: Real>(tape: &Tape<T>, g: &Graph) -> ForwardTrace<T> {
    let v = |x: Var| tape.value(x).clone();
    ForwardTrace {
        point_features: v(g.point_features),
        voxel_features: v(g.voxel_features),
        global: v(g.global),
        logits: v(g.logits),
        activation_norms: v(g.activation_norms),
        p: v(g.p),
        q: v(g.q),
        input_transform: v(g.input_transform),
        feature_transform: v(g.feature_transform),
    }
}

/// Inference pass with no gradient bookkeeping.
pub fn forward<T: Real>(sample: &LabeledSample, params: &BackboneParams<T>) -> Result<ForwardTrace<T>> {
    let mut tape = Tape::new();
    let net = params.net.map(|t| tape.constant(t.clone()));
    let g = build_graph(&mut tape, &net, params.hyper(), sample)?;
    Ok(extract(&tape, &g))
}

/// `p = temp_softmax(||h_v||, tau)` over all voxels and the count target `q`.
pub fn density_distributions<T: Real>(
    voxel_features: &Tensor<T>,
    counts: &[u32],
    tau: f64,
    beta: f64,
    epsilon: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if counts.len() != voxel_features.cols() {
        return Err(Error::Dimension {
            op: "density_distributions",
            left: voxel_features.shape(),
            right: (counts.len(), 1),
        });
    }
    let mut tape = Tape::new();
    let h = tape.constant(voxel_features.clone());
    let a = tape.column_norms(h);
    let p = tape.temp_softmax(a, T::lit(tau))?;
    Ok((tape.value(p).clone(), target_density(counts, beta, epsilon)))
}

/// Stage-1 objective evaluated on a finished trace.
pub fn stage1_loss<T: Real>(trace: &ForwardTrace<T>, label: usize, hyper: &Hyper) -> Result<Stage1Terms> {
    let mut tape = Tape::new();
    let logits = tape.constant(trace.logits.clone());
    let p = tape.constant(trace.p.clone());
    let q = tape.constant(trace.q.clone());
    let cls = tape.softmax_cross_entropy(logits, label)?;
    let density = tape.kl_divergence(p, q)?;
    let (c, d) = (tape.value(cls).item().as_f64(), tape.value(density).item().as_f64());
    Ok(Stage1Terms {
        total: c + hyper.lambda * d,
        cls: c,
        density: d,
    })
}

/// Loss terms, the forward trace's prediction, and parameter gradients
/// for one sample.
pub fn sample_gradients<T: Real>(
    params: &BackboneParams<T>,
    sample: &LabeledSample,
) -> Result<(Stage1Terms, usize, Net<Tensor<T>>)> {
    let mut tape = Tape::new();
    let net = params.net.map(|t| tape.leaf(t.clone()));
    let g = build_graph(&mut tape, &net, params.hyper(), sample)?;
    let (total, cls, density) = stage1_loss_graph(&mut tape, &g, sample.label, params.hyper())?;
    let terms = Stage1Terms {
        total: tape.value(total).item().as_f64(),
        cls: tape.value(cls).item().as_f64(),
        density: tape.value(density).item().as_f64(),
    };
    let predicted = argmax(tape.value(g.logits).data());
    let grads = tape.backward(total)?;
    let out = net.map(|&v| grads.get_or_zeros(v, tape.value(v)));
    Ok((terms, predicted, out))
}

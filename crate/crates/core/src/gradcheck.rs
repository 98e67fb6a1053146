//! Finite-difference checks for every differentiable tape operation and for
//! both training losses, run on small double-precision instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_graph, stage1_loss_graph, Architecture, BackboneParams, Hyper, Widths};
use crate::diffmath::finite_diff::{check_gradient, GradCheck, GradCheckOptions};
use crate::diffmath::{skew_exp, Axis, Tape, Tensor, Var};
use crate::disentangler::{purity_loss_graph, CachedVoxels, PurityPair};
use crate::error::Result;
use crate::splat_io::{generate_synthetic, ShapeClass};

/// Largest relative error any check may report.
pub const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Values whose magnitudes stay at least `gap` from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced by at least 0.05, shuffled.
fn spaced(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..rows * cols).map(|i| -1.0 + 0.1 * i as f64 + rng.random_range(0.0..0.05)).collect();
    v.shuffle(rng);
    Tensor::from_vec(rows, cols, v).expect("sized")
}

/// `sum(out * r)` for a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, r, c, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn tiny_cache(c: usize, seed: u64) -> Vec<CachedVoxels> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5)
        .map(|i| CachedVoxels {
            id: format!("s{i}"),
            voxels: (0..4).collect(),
            counts: vec![1, 2, 3, 4],
            features: uniform(&mut rng, c, 4, 0.0, 1.0),
        })
        .collect()
}

/// Runs every check; the caller compares each against [`TOLERANCE`].
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        out.push(check_gradient(name, &inputs, &opts, |t, v| f(t, v))?);
        Ok(())
    };

    let a = uniform(&mut rng, 3, 4, -1.0, 1.0);
    let b = uniform(&mut rng, 4, 2, -1.0, 1.0);
    check("matmul", vec![a.clone(), b], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    })?;
    check("transpose", vec![a.clone()], &|t, v| {
        let y = t.transpose(v[0]);
        project(t, y, 2)
    })?;
    let a2 = uniform(&mut rng, 3, 4, -1.0, 1.0);
    check("add", vec![a.clone(), a2.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 3)
    })?;
    check("sub", vec![a.clone(), a2.clone()], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 4)
    })?;
    check("mul", vec![a.clone(), a2], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 5)
    })?;
    let den = uniform(&mut rng, 3, 4, 0.5, 2.0);
    check("div", vec![a.clone(), den], &|t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y, 6)
    })?;
    check("scale", vec![a.clone()], &|t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y, 7)
    })?;
    check("add_scalar", vec![a.clone()], &|t, v| {
        let y = t.add_scalar(v[0], 0.3);
        project(t, y, 8)
    })?;
    let bias = uniform(&mut rng, 3, 1, -1.0, 1.0);
    check("add_column_bias", vec![a.clone(), bias], &|t, v| {
        let y = t.add_column_bias(v[0], v[1])?;
        project(t, y, 9)
    })?;
    let x = uniform(&mut rng, 4, 6, -1.0, 1.0);
    let w = uniform(&mut rng, 5, 4, -1.0, 1.0);
    let lb = uniform(&mut rng, 5, 1, -1.0, 1.0);
    check("linear", vec![x, w, lb], &|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, 10)
    })?;
    check("relu", vec![away_from_zero(&mut rng, 3, 5, 0.05)], &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, 11)
    })?;
    check("mean_pool_rows", vec![a.clone()], &|t, v| {
        let y = t.mean_pool(v[0], Axis::Rows);
        project(t, y, 12)
    })?;
    check("mean_pool_cols", vec![a.clone()], &|t, v| {
        let y = t.mean_pool(v[0], Axis::Cols);
        project(t, y, 13)
    })?;
    check("sum", vec![a.clone()], &|t, v| Ok(t.sum(v[0])))?;
    check("l2_norm", vec![a.clone()], &|t, v| Ok(t.l2_norm(v[0])))?;
    check("column_norms", vec![a.clone()], &|t, v| {
        let y = t.column_norms(v[0]);
        project(t, y, 14)
    })?;
    let groups = [0, 2, 0, 1, 2, 2, 0];
    check("masked_max_pool", vec![spaced(&mut rng, 3, 7)], &|t, v| {
        let y = t.masked_max_pool(v[0], &groups, 4)?;
        project(t, y, 15)
    })?;
    let logits = uniform(&mut rng, 5, 1, -2.0, 2.0);
    check("softmax_cross_entropy", vec![logits], &|t, v| t.softmax_cross_entropy(v[0], 3))?;
    check("temp_softmax", vec![away_from_zero(&mut rng, 6, 1, 0.05)], &|t, v| {
        let y = t.temp_softmax(v[0], 0.7)?;
        project(t, y, 16)
    })?;
    let (pa, qa) = (uniform(&mut rng, 5, 1, 0.1, 2.0), uniform(&mut rng, 5, 1, 0.1, 2.0));
    check("kl_divergence", vec![pa, qa], &|t, v| {
        let p = t.temp_softmax(v[0], 1.0)?;
        let q = t.temp_softmax(v[1], 1.0)?;
        t.kl_divergence(p, q)
    })?;
    let c = uniform(&mut rng, 2, 4, -1.0, 1.0);
    check("concat_rows", vec![a.clone(), c], &|t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        project(t, y, 17)
    })?;
    check("slice_rows", vec![a.clone()], &|t, v| {
        let y = t.slice_rows(v[0], 1, 3)?;
        project(t, y, 18)
    })?;
    check("reshape", vec![a.clone()], &|t, v| {
        let y = t.reshape(v[0], 6, 2)?;
        project(t, y, 19)
    })?;
    check("gather", vec![a], &|t, v| {
        let y = t.gather(v[0], &[0, 5, 5, 11, 7])?;
        project(t, y, 20)
    })?;
    check("matrix_exp", vec![uniform(&mut rng, 4, 4, -0.8, 0.8)], &|t, v| {
        let y = t.matrix_exp(v[0])?;
        project(t, y, 21)
    })?;
    // large enough to need several squarings
    check("matrix_exp_skew", vec![uniform(&mut rng, 5, 5, -2.0, 2.0)], &|t, v| {
        let y = t.matrix_exp_skew(v[0])?;
        project(t, y, 22)
    })?;

    out.push(stage1_check(seed, &opts)?);
    out.push(purity_check(seed, &opts)?);
    Ok(out)
}

fn stage1_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheck> {
    let hyper = Hyper::new(2, 6, 4);
    let arch = Architecture {
        hyper,
        widths: Widths::tiny(),
    };
    let mut p = BackboneParams::<f64>::init(arch, (0..4).map(|i| format!("c{i}")).collect(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    // move the output transforms off the identity so every path is exercised
    for t in p.net.slots_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
    }
    let s = generate_synthetic(ShapeClass::Box, 32, seed)?
        .subset(&(0..16).collect::<Vec<_>>())
        .regrid(2)?;
    let inputs: Vec<Tensor<f64>> = p.net.named().into_iter().map(|(_, t)| t.clone()).collect();
    let hyper = p.hyper().clone();
    check_gradient("stage1_loss", &inputs, opts, |tape, vars| {
        let mut it = vars.iter();
        let net = p.net.map(|_| *it.next().expect("one var per tensor"));
        let g = build_graph(tape, &net, &hyper, &s)?;
        Ok(stage1_loss_graph(tape, &g, s.label, &hyper)?.0)
    })
}

fn purity_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheck> {
    let c = 8;
    let cache = tiny_cache(c, seed);
    let pairs: Vec<_> = cache
        .iter()
        .enumerate()
        .map(|(i, s)| PurityPair {
            sample: s,
            channel: (3 * i) % c,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x52);
    let p0 = uniform(&mut rng, c, c, -0.3, 0.3);
    let u_now = skew_exp(&p0)?;
    check_gradient("purity_loss", &[p0], opts, |tape, v| {
        purity_loss_graph(tape, v[0], &u_now, &pairs, 1e-6)
    })
}

//! Procedural labeled shapes for desk-scale runs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::{FeatureMode, GaussianPrimitive, LabeledSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Box,
    Torus,
    Cylinder,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Sphere, ShapeClass::Box, ShapeClass::Torus, ShapeClass::Cylinder];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Torus => "torus",
            ShapeClass::Cylinder => "cylinder",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub grid_size: usize,
    pub feature_mode: FeatureMode,
    /// Bounding radius of every shape before posing.
    pub radius: f64,
    /// Half-width of the uniform displacement along the surface normal.
    pub jitter: f64,
    /// Share of primitives scattered uniformly through the bounding box.
    pub floater_fraction: f64,
    /// Apply a uniformly random rotation to each sample.
    pub random_pose: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid_size: 7,
            feature_mode: FeatureMode::Gaussian11,
            radius: 1.0,
            jitter: 0.02,
            floater_fraction: 0.0,
            random_pose: false,
        }
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Row-major 3x3 times vector.
fn apply(m: &[[f64; 3]; 3], v: V3) -> V3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Quaternion (w, x, y, z) of a proper rotation matrix.
fn quat_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q = q.map(|x| x / n);
    if q[0] < 0.0 {
        q.map(|x| -x)
    } else {
        q
    }
}

fn matrix_from_quat(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    matrix_from_quat(q.map(|x| x / n))
}

/// Surface point and outward normal in the shape's own frame.
fn surface_point(class: ShapeClass, shape: &[f64; 3], rng: &mut ChaCha8Rng) -> (V3, V3) {
    match class {
        ShapeClass::Sphere => {
            let n: V3 = UnitSphere.sample(rng);
            (n.map(|x| x * shape[0]), n)
        }
        ShapeClass::Box => {
            let h = shape;
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut axis = 2;
            for (a, &area) in areas.iter().enumerate() {
                if pick < area {
                    axis = a;
                    break;
                }
                pick -= area;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut p: V3 = std::array::from_fn(|a| rng.random_range(-h[a]..h[a]));
            p[axis] = sign * h[axis];
            let mut n = [0.0; 3];
            n[axis] = sign;
            (p, n)
        }
        ShapeClass::Torus => {
            let (major, minor) = (shape[0], shape[1]);
            loop {
                let u = rng.random::<f64>() * 2.0 * PI;
                let v = rng.random::<f64>() * 2.0 * PI;
                // area element is proportional to R + r cos v
                if rng.random::<f64>() * (major + minor) > major + minor * v.cos() {
                    continue;
                }
                let n = [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()];
                let ring = major + minor * v.cos();
                return ([ring * u.cos(), ring * u.sin(), minor * v.sin()], n);
            }
        }
        ShapeClass::Cylinder => {
            let (r, h) = (shape[0], shape[1]);
            let side = 2.0 * PI * r * 2.0 * h;
            let caps = 2.0 * PI * r * r;
            let u = rng.random::<f64>() * 2.0 * PI;
            if rng.random::<f64>() * (side + caps) < side {
                let z = rng.random_range(-h..h);
                ([r * u.cos(), r * u.sin(), z], [u.cos(), u.sin(), 0.0])
            } else {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let rho = r * rng.random::<f64>().sqrt();
                ([rho * u.cos(), rho * u.sin(), sign * h], [0.0, 0.0, sign])
            }
        }
    }
}

/// Random shape parameters scaled so the shape fits in a ball of `radius`.
fn shape_params(class: ShapeClass, radius: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        ShapeClass::Sphere => [radius, 0.0, 0.0],
        ShapeClass::Box => {
            let h: V3 = std::array::from_fn(|_| rng.random_range(0.45..1.0));
            let n = dot(h, h).sqrt();
            h.map(|x| x * radius / n)
        }
        ShapeClass::Torus => {
            let minor: f64 = rng.random_range(0.18..0.35);
            [radius * (1.0 - minor), radius * minor, 0.0]
        }
        ShapeClass::Cylinder => {
            let r: f64 = rng.random_range(0.35..0.75);
            let h = (1.0 - r * r).sqrt();
            [radius * r, radius * h, 0.0]
        }
    }
}

fn surface_area(class: ShapeClass, s: &[f64; 3]) -> f64 {
    match class {
        ShapeClass::Sphere => 4.0 * PI * s[0] * s[0],
        ShapeClass::Box => 8.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2]),
        ShapeClass::Torus => 4.0 * PI * PI * s[0] * s[1],
        ShapeClass::Cylinder => 2.0 * PI * s[0] * (2.0 * s[1] + s[0]),
    }
}

/// Default-configured sample, labelled by the class's position in [`ShapeClass::ALL`].
pub fn generate_synthetic(class: ShapeClass, n_primitives: usize, seed: u64) -> Result<LabeledSample> {
    generate_with(&SyntheticConfig::default(), class, n_primitives, seed)
}

pub fn generate_with(
    config: &SyntheticConfig,
    class: ShapeClass,
    n_primitives: usize,
    seed: u64,
) -> Result<LabeledSample> {
    if n_primitives < 32 {
        return Err(Error::Config(format!("need at least 32 primitives, got {n_primitives}")));
    }
    if !(0.0..1.0).contains(&config.floater_fraction) {
        return Err(Error::Config("floater_fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = shape_params(class, config.radius, &mut rng);
    let pose = if config.random_pose {
        random_rotation(&mut rng)
    } else {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    };
    let spacing = (surface_area(class, &shape) / n_primitives as f64).sqrt();
    let n_floaters = (n_primitives as f64 * config.floater_fraction).round() as usize;

    let mut primitives = Vec::with_capacity(n_primitives);
    for _ in 0..n_primitives - n_floaters {
        let (p, n) = surface_point(class, &shape, &mut rng);
        let d = rng.random_range(-config.jitter..=config.jitter);
        let p = [p[0] + d * n[0], p[1] + d * n[1], p[2] + d * n[2]];
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let t1 = unit(cross(n, helper));
        let t2 = cross(n, t1);
        let phi = rng.random::<f64>() * 2.0 * PI;
        let (a, b) = (
            [t1[0] * phi.cos() + t2[0] * phi.sin(), t1[1] * phi.cos() + t2[1] * phi.sin(), t1[2] * phi.cos() + t2[2] * phi.sin()],
            [t2[0] * phi.cos() - t1[0] * phi.sin(), t2[1] * phi.cos() - t1[1] * phi.sin(), t2[2] * phi.cos() - t1[2] * phi.sin()],
        );
        let (wp, wa, wb, wn) = (apply(&pose, p), apply(&pose, a), apply(&pose, b), apply(&pose, n));
        let frame = [[wa[0], wb[0], wn[0]], [wa[1], wb[1], wn[1]], [wa[2], wb[2], wn[2]]];
        primitives.push(make_primitive(
            config.feature_mode,
            wp,
            wn,
            [
                spacing * rng.random_range(0.6..1.4),
                spacing * rng.random_range(0.3..0.55),
                spacing * rng.random_range(0.05..0.15),
            ],
            quat_from_matrix(&frame),
            rng.random_range(0.5..=1.0),
        ));
    }
    for _ in 0..n_floaters {
        let p: V3 = std::array::from_fn(|_| rng.random_range(-config.radius..config.radius));
        let n: V3 = UnitSphere.sample(&mut rng);
        let s = spacing * rng.random_range(0.3..1.0);
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        primitives.push(make_primitive(
            config.feature_mode,
            p,
            n,
            [s, s, s],
            q.map(|x| x / qn),
            rng.random_range(0.5..=1.0),
        ));
    }
    let label = ShapeClass::ALL.iter().position(|&c| c == class).unwrap();
    LabeledSample::new(format!("{class}-{seed}"), label, config.feature_mode, primitives, config.grid_size)
}

fn make_primitive(mode: FeatureMode, p: V3, n: V3, scale: V3, q: [f64; 4], opacity: f64) -> GaussianPrimitive {
    let position = p.map(|x| x as f32);
    match mode {
        FeatureMode::PointCloud6 => GaussianPrimitive::point(position, n.map(|x| x as f32)),
        FeatureMode::Gaussian11 => GaussianPrimitive {
            position,
            scale: scale.map(|x| x as f32),
            rotation: q.map(|x| x as f32),
            opacity: opacity as f32,
        },
    }
}

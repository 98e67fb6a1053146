use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tensor};
use crate::error::{Error, Result};
use crate::splat_io::LabeledSample;
use crate::trainer::FrozenBackbone;

/// Occupied-voxel columns of one training sample's `H`, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedVoxels {
    pub id: String,
    /// Occupied voxel ids, ascending.
    pub voxels: Vec<usize>,
    /// `n_v` for each entry of `voxels`.
    pub counts: Vec<u32>,
    /// `C x voxels.len()`.
    pub features: Tensor<f64>,
}

impl CachedVoxels {
    pub fn from_trace(id: &str, voxel_features: &Tensor<f32>, counts: &[u32]) -> Self {
        let voxels: Vec<usize> = (0..counts.len()).filter(|&v| counts[v] > 0).collect();
        let c = voxel_features.rows();
        let features = Tensor::from_fn(c, voxels.len(), |r, j| voxel_features.get(r, voxels[j]) as f64);
        Self {
            id: id.to_string(),
            counts: voxels.iter().map(|&v| counts[v]).collect(),
            voxels,
            features,
        }
    }

    /// `U` applied to the cached columns.
    pub fn transformed(&self, u: &Tensor<f64>) -> Result<Tensor<f64>> {
        u.matmul(&self.features)
    }
}

/// Forward passes every sample once and keeps its occupied voxel columns.
pub fn cache_voxel_features(frozen: &FrozenBackbone, samples: &[&LabeledSample]) -> Result<Vec<CachedVoxels>> {
    samples
        .par_iter()
        .map(|s| {
            let t = frozen.forward(s)?;
            Ok(CachedVoxels::from_trace(&s.id, &t.voxel_features, &s.voxel_counts))
        })
        .collect()
}

/// `H~ = U H`, column by column.
pub fn transform_voxels<T: Real>(h: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    if u.rows() != u.cols() || u.cols() != h.rows() {
        return Err(Error::Dimension {
            op: "transform_voxels",
            left: u.shape(),
            right: h.shape(),
        });
    }
    u.matmul(h)
}

fn check_counts<T: Real>(h: &Tensor<T>, counts: &[u32]) -> Result<()> {
    if counts.len() != h.cols() {
        return Err(Error::Dimension {
            op: "voxel counts",
            left: h.shape(),
            right: (counts.len(), 1),
        });
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Data("every voxel is empty".into()));
    }
    Ok(())
}

/// `v*_c`: the non-empty voxel with the largest `h~_{c,v}`, ties to the lowest `v`.
pub fn localize<T: Real>(h: &Tensor<T>, channel: usize, counts: &[u32]) -> Result<usize> {
    check_counts(h, counts)?;
    if channel >= h.rows() {
        return Err(Error::Index(format!("channel {channel} outside {} channels", h.rows())));
    }
    let row = h.row(channel);
    let mut best: Option<usize> = None;
    for v in 0..counts.len() {
        if counts[v] > 0 && best.is_none_or(|b| row[v] > row[b]) {
            best = Some(v);
        }
    }
    Ok(best.expect("checked non-empty"))
}

/// `a_c = max over non-empty v of h~_{c,v}` for every channel.
pub fn channel_activation<T: Real>(h: &Tensor<T>, counts: &[u32]) -> Result<Vec<T>> {
    check_counts(h, counts)?;
    (0..h.rows())
        .map(|c| localize(h, c, counts).map(|v| h.get(c, v)))
        .collect()
}

/// Channel share of the feature norm at a channel's located voxel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub voxel: usize,
    pub value: f64,
}

/// `h~_{c,v*} / (||h~_{:,v*}|| + eps)`.
pub fn purity<T: Real>(h: &Tensor<T>, channel: usize, counts: &[u32], epsilon: f64) -> Result<Purity> {
    let voxel = localize(h, channel, counts)?;
    let column = h.column(voxel);
    let norm = column.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    Ok(Purity {
        voxel,
        value: h.get(channel, voxel).as_f64() / (norm + epsilon),
    })
}

/// One ranked prototype of a channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub sample_id: String,
    pub activation: f64,
    pub voxel: usize,
    /// Primitive count of `voxel` in that sample.
    pub count: u32,
    pub purity: f64,
}

/// Per-channel top-k prototypes, ordered by activation (descending) then
/// sample id (ascending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub k: usize,
    pub channels: Vec<Vec<RegistryEntry>>,
}

fn ranks_before(a: &RegistryEntry, b: &RegistryEntry) -> bool {
    a.activation > b.activation || (a.activation == b.activation && a.sample_id < b.sample_id)
}

/// Inserts into a list kept sorted and capped at `k`.
fn offer(list: &mut Vec<RegistryEntry>, entry: RegistryEntry, k: usize) {
    if list.len() == k && !ranks_before(&entry, list.last().expect("k >= 1")) {
        return;
    }
    let at = list.partition_point(|e| ranks_before(e, &entry));
    list.insert(at, entry);
    list.truncate(k);
}

/// Best voxel, activation and purity of every channel for one cached sample.
pub fn sample_channel_stats(cache: &CachedVoxels, u: &Tensor<f64>, epsilon: f64) -> Result<Vec<(usize, f64, f64)>> {
    if cache.voxels.is_empty() {
        return Err(Error::Data(format!("sample {:?} has no occupied voxel", cache.id)));
    }
    let y = cache.transformed(u)?;
    let (c, n) = y.shape();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..c).map(|r| y.get(r, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok((0..c)
        .map(|ch| {
            let row = y.row(ch);
            let mut j = 0;
            for i in 1..n {
                if row[i] > row[j] {
                    j = i;
                }
            }
            (j, row[j], row[j] / (norms[j] + epsilon))
        })
        .collect())
}

impl Registry {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &RegistryEntry)> {
        self.channels.iter().enumerate().flat_map(|(c, l)| l.iter().map(move |e| (c, e)))
    }

    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_purity(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return f64::NAN;
        }
        self.entries().map(|(_, e)| e.purity).sum::<f64>() / n as f64
    }

    /// Mean primitive count of the registered voxels.
    pub fn mean_density(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return f64::NAN;
        }
        self.entries().map(|(_, e)| e.count as f64).sum::<f64>() / n as f64
    }
}

/// Top-`k` training samples per channel under rotation `u`.
///
/// Samples are scanned in order and each channel keeps a bounded sorted
/// list, so memory stays at `C * k` entries.
pub fn discover_prototypes(cache: &[CachedVoxels], u: &Tensor<f64>, k: usize, epsilon: f64) -> Result<Registry> {
    if k == 0 {
        return Err(Error::Config("prototype count k must be >= 1".into()));
    }
    if k > cache.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} training samples", cache.len())));
    }
    let stats = cache
        .par_iter()
        .map(|s| sample_channel_stats(s, u, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let n_channels = u.rows();
    let mut channels: Vec<Vec<RegistryEntry>> = vec![Vec::with_capacity(k + 1); n_channels];
    for (s, per_channel) in cache.iter().zip(stats) {
        for (c, (j, activation, purity)) in per_channel.into_iter().enumerate() {
            offer(
                &mut channels[c],
                RegistryEntry {
                    sample_id: s.id.clone(),
                    activation,
                    voxel: s.voxels[j],
                    count: s.counts[j],
                    purity,
                },
                k,
            );
        }
    }
    Ok(Registry { k, channels })
}

/// [`discover_prototypes`] straight from samples and a frozen backbone.
pub fn discover_from_samples(
    frozen: &FrozenBackbone,
    samples: &[&LabeledSample],
    u: &Tensor<f64>,
    k: usize,
) -> Result<Registry> {
    let cache = cache_voxel_features(frozen, samples)?;
    discover_prototypes(&cache, u, k, frozen.params().hyper().epsilon)
}

/// `floor(k_init - (t / T) (k_init - k_final))`, computed exactly.
pub fn curriculum_k(t: usize, total: usize, k_init: usize, k_final: usize) -> usize {
    if total == 0 {
        return k_init;
    }
    let t = t.min(total);
    let span = k_init.saturating_sub(k_final);
    (k_init * total - t * span) / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_hand_cases() {
        assert_eq!(curriculum_k(0, 50, 10, 3), 10);
        assert_eq!(curriculum_k(50, 50, 10, 3), 3);
        assert_eq!(curriculum_k(50, 100, 10, 3), 6);
        assert_eq!(curriculum_k(0, 0, 10, 3), 10);
        for t in 0..=50 {
            let exact = (10.0 - (t as f64 / 50.0) * 7.0).floor() as usize;
            assert_eq!(curriculum_k(t, 50, 10, 3), exact);
        }
    }

    #[test]
    fn purity_hand_cases() {
        let eps = 1e-6;
        let one_hot = Tensor::from_fn(3, 1, |r, _| if r == 1 { 4.0 } else { 0.0 });
        let p = purity(&one_hot, 1, &[2], eps).unwrap();
        assert!((p.value - 4.0 / (4.0 + eps)).abs() < 1e-15);

        let c = 16;
        let uniform = Tensor::filled(c, 1, 0.5);
        let p = purity(&uniform, 3, &[1], 1e-12).unwrap();
        assert!((p.value - 1.0 / (c as f64).sqrt()).abs() < 1e-9);

        let mixed = Tensor::from_vec(2, 1, vec![3.0, -4.0]).unwrap();
        let p = purity(&mixed, 0, &[1], eps).unwrap();
        assert!((p.value - 3.0 / (5.0 + eps)).abs() < 1e-15);
    }

    #[test]
    fn activation_ignores_empty_voxels() {
        let mut h = Tensor::from_fn(2, 4, |r, c| (r * 4 + c) as f64);
        let counts = [1, 0, 2, 0];
        let a = channel_activation(&h, &counts).unwrap();
        assert_eq!(a, vec![2.0, 6.0]);
        h.set(0, 1, 100.0);
        h.set(1, 3, 100.0);
        assert_eq!(channel_activation(&h, &counts).unwrap(), a);
        assert!(matches!(channel_activation(&h, &[0; 4]), Err(Error::Data(_))));
    }

    #[test]
    fn localize_ties_and_row_independence() {
        let mut h = Tensor::from_vec(2, 4, vec![1.0, 3.0, 3.0, 0.0, 5.0, 1.0, 5.0, 2.0]).unwrap();
        assert_eq!(localize(&h, 0, &[1, 1, 1, 1]).unwrap(), 1);
        assert_eq!(localize(&h, 1, &[1, 1, 1, 1]).unwrap(), 0);
        assert_eq!(localize(&h, 1, &[0, 1, 1, 1]).unwrap(), 2);
        for v in 0..4 {
            h.set(1, v, h.get(1, v) + 7.0);
        }
        assert_eq!(localize(&h, 0, &[1, 1, 1, 1]).unwrap(), 1);
    }

    #[test]
    fn offer_keeps_order_and_cap() {
        let e = |id: &str, a: f64| RegistryEntry {
            sample_id: id.into(),
            activation: a,
            voxel: 0,
            count: 1,
            purity: 0.5,
        };
        let mut list = Vec::new();
        for (id, a) in [("d", 1.0), ("b", 3.0), ("c", 3.0), ("a", 3.0), ("e", 0.5), ("f", 2.0)] {
            offer(&mut list, e(id, a), 3);
        }
        let ids: Vec<_> = list.iter().map(|x| x.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn transform_checks_shapes() {
        let h = Tensor::<f64>::zeros(3, 5);
        assert!(transform_voxels(&h, &Tensor::identity(4)).is_err());
        assert_eq!(transform_voxels(&h, &Tensor::identity(3)).unwrap(), h);
    }
}

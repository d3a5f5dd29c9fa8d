//! Channel connectivity from spatial attention, spectral clustering of the
//! connectivity graph, and probe-driven selection of channel groups.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::Graph;

use crate::coarse::CoarseModel;
use crate::recording::payload_path;
use crate::train::{rng_for, stack_windows};
use crate::{Error, Result};

/// Running mean of per-sample attention maps (each already averaged over
/// layers, heads and temporal positions).
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    pub p: Array2<f64>,
    pub n_samples: usize,
}

impl ConnectivityMatrix {
    pub fn new(c: usize) -> Self {
        Self { p: Array2::zeros((c, c)), n_samples: 0 }
    }

    pub fn n_channels(&self) -> usize {
        self.p.nrows()
    }

    /// Folds in one sample given as `layers x heads` attention matrices.
    pub fn accumulate(&mut self, attn: &[Vec<Array2<f64>>]) -> Result<()> {
        let maps: Vec<&Array2<f64>> = attn.iter().flatten().collect();
        if maps.is_empty() {
            return Err(Error::Empty("attention maps".into()));
        }
        let c = self.n_channels();
        let mut a = Array2::<f64>::zeros((c, c));
        for m in &maps {
            if m.dim() != (c, c) {
                return Err(Error::Shape(format!("attention {:?} for {c} channels", m.dim())));
            }
            a += *m;
        }
        a /= maps.len() as f64;
        self.n_samples += 1;
        let w = 1.0 / self.n_samples as f64;
        self.p.zip_mut_with(&a, |p, &x| *p += (x - *p) * w);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ConnectivityManifest {
    shape: [usize; 2],
    n_samples: usize,
    dtype: String,
    data_file: String,
}

impl ConnectivityMatrix {
    /// Writes a JSON manifest at `path` and the matrix as little-endian f32
    /// rows next to it, the same layout recordings use.
    pub fn write(&self, path: &Path) -> Result<()> {
        let data_path = payload_path(path);
        let manifest = ConnectivityManifest {
            shape: [self.p.nrows(), self.p.ncols()],
            n_samples: self.n_samples,
            dtype: "f32le".into(),
            data_file: data_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let bytes: Vec<u8> = self.p.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let io = |e: std::io::Error, p: &Path| Error::Io(format!("{}: {e}", p.display()));
        fs::write(&data_path, bytes).map_err(|e| io(e, &data_path))?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| io(e, path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let m: ConnectivityManifest = serde_json::from_str(&text)?;
        if m.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype {}", m.dtype)));
        }
        let data_path = path.with_file_name(&m.data_file);
        let bytes = fs::read(&data_path).map_err(|e| Error::Io(format!("{}: {e}", data_path.display())))?;
        let [r, c] = m.shape;
        if bytes.len() != r * c * 4 {
            return Err(Error::Format(format!("payload has {} bytes, expected {}", bytes.len(), r * c * 4)));
        }
        let vals = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let p = Array2::from_shape_vec((r, c), vals).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { p, n_samples: m.n_samples })
    }
}

/// Runs the coarse model on each window (batched) and averages its spatial
/// attention over layers, heads, patches and windows.
pub fn accumulate_connectivity(
    model: &CoarseModel,
    windows: &[ArrayView2<'_, f32>],
    batch_size: usize,
) -> Result<ConnectivityMatrix> {
    if windows.is_empty() {
        return Err(Error::Empty("no windows for connectivity".into()));
    }
    let mut conn = ConnectivityMatrix::new(model.n_channels());
    for chunk in windows.chunks(batch_size.max(1)) {
        let g = Graph::inference();
        let out = model.forward(&g, &stack_windows(chunk))?;
        for sample in model.attention_maps(&g, &out) {
            conn.accumulate(&sample)?;
        }
    }
    Ok(conn)
}

/// Min-max scales every row to [0, 1]; constant rows become zeros.
pub fn normalize_per_channel(p: &Array2<f64>) -> Array2<f64> {
    let mut out = p.clone();
    for mut row in out.rows_mut() {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - lo) / (hi - lo));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelClustering {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ChannelClustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c] == cluster).collect()
    }
}

/// Renumbers labels by order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns labels and inertia.
/// Empty clusters are refilled with the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng, max_iter: usize) -> (Vec<usize>, f64) {
    let n = points.len();
    let dim = points.first().map_or(0, Vec::len);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> =
            points.iter().map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centers.push(points[next].clone());
    }
    let mut labels = vec![0usize; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b]))).unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for j in 0..k {
            if !labels.contains(&j) {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    })
                    .unwrap_or(0);
                labels[far] = j;
                changed = true;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            *c = (0..dim).map(|t| members.iter().map(|m| m[t]).sum::<f64>() / members.len() as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { k: 10, restarts: 10, seed: 0 }
    }
}

/// Normalized spectral clustering of the symmetrized connectivity.
/// Zero-degree channels each get their own cluster.
pub fn spectral_cluster(p: &Array2<f64>, cfg: &SpectralConfig) -> Result<ChannelClustering> {
    let c = p.nrows();
    let k = cfg.k;
    if p.ncols() != c {
        return Err(Error::Shape(format!("connectivity must be square, got {:?}", p.dim())));
    }
    if k == 0 || k > c {
        return Err(Error::InvalidConfig(format!("k = {k} for {c} channels")));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("connectivity".into()));
    }
    let a = Array2::from_shape_fn((c, c), |(i, j)| (0.5 * (p[[i, j]] + p[[j, i]])).max(0.0));
    let degree: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    let isolated: Vec<usize> = (0..c).filter(|&i| degree[i] <= 0.0).collect();
    let live: Vec<usize> = (0..c).filter(|&i| degree[i] > 0.0).collect();
    if !isolated.is_empty() {
        log::warn!("{} channel(s) have zero degree and form singleton clusters", isolated.len());
    }
    let k_live = k.saturating_sub(isolated.len());
    if (live.is_empty() && isolated.len() != k) || (!live.is_empty() && (k_live == 0 || k_live > live.len())) {
        return Err(Error::InvalidConfig(format!(
            "cannot form {k} clusters from {} isolated and {} connected channels",
            isolated.len(),
            live.len()
        )));
    }
    let mut labels = vec![0usize; c];
    for (j, &i) in isolated.iter().enumerate() {
        labels[i] = k_live + j;
    }
    if !live.is_empty() {
        let n = live.len();
        let lap = DMatrix::from_fn(n, n, |i, j| {
            let (u, v) = (live[i], live[j]);
            let norm = a[[u, v]] / (degree[u] * degree[v]).sqrt();
            if i == j {
                1.0 - norm
            } else {
                -norm
            }
        });
        let eig = SymmetricEigen::new(lap);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = order[..k_live].iter().map(|&e| eig.eigenvectors[(i, e)]).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                row
            })
            .collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for r in 0..cfg.restarts.max(1) {
            let mut rng = rng_for(cfg.seed, &[r as u64]);
            let (lab, inertia) = kmeans(&points, k_live, &mut rng, 300);
            if best.as_ref().is_none_or(|(_, b)| inertia < *b - 1e-12) {
                best = Some((lab, inertia));
            }
        }
        let live_labels = canonical(&best.expect("at least one restart").0);
        for (&i, &l) in live.iter().zip(&live_labels) {
            labels[i] = l;
        }
    }
    Ok(ChannelClustering { labels, k })
}

/// Chosen clusters, their channels and the probe score of the union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSelection {
    pub clusters: Vec<usize>,
    pub channels: Vec<usize>,
    pub score: f64,
}

fn union(cl: &ChannelClustering, clusters: &[usize]) -> Vec<usize> {
    let mut ch: Vec<usize> = clusters.iter().flat_map(|&k| cl.members(k)).collect();
    ch.sort_unstable();
    ch
}

/// Greedy forward selection: start from the best single cluster, then keep
/// adding whichever cluster gives the best union score while that score
/// strictly improves and the channel budget allows. Ties go to the lower
/// cluster id.
pub fn select_groups(
    cl: &ChannelClustering,
    mut probe: impl FnMut(&[usize]) -> Result<f64>,
    budget: usize,
) -> Result<GroupSelection> {
    let nonempty: Vec<usize> = (0..cl.k).filter(|&k| !cl.members(k).is_empty()).collect();
    let mut singles = Vec::new();
    for &k in &nonempty {
        singles.push((k, probe(&cl.members(k))?));
    }
    let &(first, first_score) = singles
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .ok_or_else(|| Error::Empty("no clusters".into()))?;
    if cl.members(first).len() > budget {
        return Err(Error::InvalidConfig(format!(
            "best cluster has {} channels, over the budget of {budget}",
            cl.members(first).len()
        )));
    }
    let mut chosen = vec![first];
    let mut score = first_score;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for &k in &nonempty {
            if chosen.contains(&k) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(k);
            let ch = union(cl, &trial);
            if ch.len() > budget {
                continue;
            }
            let s = probe(&ch)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, s)) if s > score => {
                chosen.push(k);
                score = s;
            }
            _ => break,
        }
    }
    chosen.sort_unstable();
    Ok(GroupSelection { channels: union(cl, &chosen), clusters: chosen, score })
}

/// Scores every non-empty subset of clusters within the budget and returns
/// the best (ties: fewer clusters, then lexicographically smaller). Only for
/// small `k`.
pub fn select_groups_exhaustive(
    cl: &ChannelClustering,
    mut probe: impl FnMut(&[usize]) -> Result<f64>,
    budget: usize,
) -> Result<GroupSelection> {
    if cl.k > 4 {
        return Err(Error::InvalidConfig(format!("exhaustive search limited to k <= 4, got {}", cl.k)));
    }
    let mut best: Option<GroupSelection> = None;
    for mask in 1u32..(1 << cl.k) {
        let clusters: Vec<usize> = (0..cl.k).filter(|&k| mask & (1 << k) != 0).collect();
        let ch = union(cl, &clusters);
        if ch.is_empty() || ch.len() > budget {
            continue;
        }
        let s = probe(&ch)?;
        let better = match &best {
            None => true,
            Some(b) => s > b.score || (s == b.score && (clusters.len(), &clusters) < (b.clusters.len(), &b.clusters)),
        };
        if better {
            best = Some(GroupSelection { clusters, channels: ch, score: s });
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("no cluster subset fits the budget".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::adjusted_rand_index;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(m: Array2<f64>) -> Vec<Vec<Array2<f64>>> {
        vec![vec![m]]
    }

    #[test]
    fn single_and_two_term_means() {
        let a = ndarray::array![[0.6, 0.4], [0.3, 0.7]];
        let b = ndarray::array![[0.2, 0.8], [0.5, 0.5]];
        let mut c = ConnectivityMatrix::new(2);
        c.accumulate(&one(a.clone())).unwrap();
        assert_eq!(c.p, a);
        c.accumulate(&one(b.clone())).unwrap();
        let want = (&a + &b) / 2.0;
        assert!(c.p.iter().zip(want.iter()).all(|(x, y)| (x - y).abs() < 1e-15));
        assert_eq!(c.n_samples, 2);
        assert!(ConnectivityMatrix::new(2).accumulate(&[]).is_err());
    }

    #[test]
    fn layers_and_heads_are_averaged() {
        let a = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let b = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        let mut c = ConnectivityMatrix::new(2);
        c.accumulate(&[vec![a.clone(), b.clone()], vec![a.clone(), a]]).unwrap();
        assert_eq!(c.p, ndarray::array![[0.75, 0.25], [0.25, 0.75]]);
    }

    fn random_stochastic(c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((c, c), |_| rng.random::<f64>());
        for mut r in m.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        m
    }

    #[test]
    fn streaming_equals_batch_mean_in_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mats: Vec<Array2<f64>> = (0..50).map(|_| random_stochastic(6, &mut rng)).collect();
        let batch: Array2<f64> = mats.iter().fold(Array2::zeros((6, 6)), |acc, m| acc + m) / 50.0;
        let mut fwd = ConnectivityMatrix::new(6);
        let mut rev = ConnectivityMatrix::new(6);
        for m in &mats {
            fwd.accumulate(&one(m.clone())).unwrap();
        }
        for m in mats.iter().rev() {
            rev.accumulate(&one(m.clone())).unwrap();
        }
        for ((a, b), c) in fwd.p.iter().zip(rev.p.iter()).zip(batch.iter()) {
            assert!((a - c).abs() < 1e-6 && (b - c).abs() < 1e-6);
        }
        for row in fwd.p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn min_max_rows() {
        let p = ndarray::array![[0.2, 0.5, 0.8], [0.3, 0.3, 0.3]];
        let n = normalize_per_channel(&p);
        let want = [0.0, 0.5, 1.0];
        assert!(n.row(0).iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(n.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(normalize_per_channel(&n), n);
    }

    fn blocks(sizes: &[usize], within: f64, across: f64) -> (Array2<f64>, Vec<usize>) {
        let truth: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(g, s)).collect();
        let c = truth.len();
        let p = Array2::from_shape_fn((c, c), |(i, j)| if truth[i] == truth[j] { within } else { across });
        (p, truth)
    }

    #[test]
    fn two_blocks_recovered_exactly() {
        let (p, truth) = blocks(&[5, 5], 1.0, 0.0);
        let cl = spectral_cluster(&p, &SpectralConfig { k: 2, ..Default::default() }).unwrap();
        assert_eq!(adjusted_rand_index(&cl.labels, &truth), 1.0);
    }

    #[test]
    fn identity_gives_singletons() {
        let p = Array2::<f64>::eye(6);
        let cl = spectral_cluster(&p, &SpectralConfig { k: 6, ..Default::default() }).unwrap();
        let mut l = cl.labels.clone();
        l.sort_unstable();
        assert_eq!(l, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn isolated_node_gets_own_cluster() {
        let (mut p, _) = blocks(&[4, 4], 1.0, 0.0);
        let mut big = Array2::zeros((9, 9));
        big.slice_mut(ndarray::s![..8, ..8]).assign(&p);
        p = big;
        let cl = spectral_cluster(&p, &SpectralConfig { k: 3, ..Default::default() }).unwrap();
        assert_eq!(cl.members(cl.labels[8]), vec![8]);
        assert!(spectral_cluster(&p, &SpectralConfig { k: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn noisy_planted_blocks_over_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (base, truth) = blocks(&[10, 10, 10, 10], 0.08, 0.02);
        for seed in 0..20 {
            let p = base.mapv(|v| v * (0.5 + rng.random::<f64>()));
            let cl = spectral_cluster(&p, &SpectralConfig { k: 4, restarts: 5, seed }).unwrap();
            assert!(adjusted_rand_index(&cl.labels, &truth) >= 0.9);
        }
    }

    proptest! {
        #[test]
        fn permuting_channels_permutes_labels(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (base, _) = blocks(&[4, 3, 5], 0.1, 0.01);
            let p = base.mapv(|v| v * (0.8 + 0.4 * rng.random::<f64>()));
            let mut perm: Vec<usize> = (0..12).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pp = Array2::from_shape_fn((12, 12), |(i, j)| p[[perm[i], perm[j]]]);
            let cfg = SpectralConfig { k: 3, restarts: 4, seed: 1 };
            let a = spectral_cluster(&p, &cfg).unwrap();
            let b = spectral_cluster(&pp, &cfg).unwrap();
            let a_perm: Vec<usize> = perm.iter().map(|&i| a.labels[i]).collect();
            prop_assert_eq!(adjusted_rand_index(&a_perm, &b.labels), 1.0);
            for k in 0..3 {
                prop_assert!(!b.members(k).is_empty());
            }
        }
    }

    fn table_probe<'a>(
        table: &'a [(&'a [usize], f64)],
        cl: &ChannelClustering,
    ) -> impl FnMut(&[usize]) -> Result<f64> + use<'a> {
        let cl = cl.clone();
        move |ch: &[usize]| {
            let mut clusters: Vec<usize> = ch.iter().map(|&c| cl.labels[c]).collect();
            clusters.sort_unstable();
            clusters.dedup();
            Ok(table.iter().find(|(k, _)| *k == clusters.as_slice()).map_or(0.0, |t| t.1))
        }
    }

    #[test]
    fn dominant_cluster_alone() {
        let cl = ChannelClustering { labels: vec![0, 0, 1, 1, 2, 2], k: 3 };
        let table: Vec<(&[usize], f64)> = vec![(&[0], 0.3), (&[1], 0.9), (&[2], 0.2), (&[0, 1], 0.8), (&[1, 2], 0.85)];
        let sel = select_groups(&cl, table_probe(&table, &cl), 6).unwrap();
        assert_eq!(sel.clusters, vec![1]);
        assert_eq!(sel.channels, vec![2, 3]);
        let ex = select_groups_exhaustive(&cl, table_probe(&table, &cl), 6).unwrap();
        assert_eq!(ex.clusters, sel.clusters);
    }

    #[test]
    fn complementary_clusters_are_combined() {
        let cl = ChannelClustering { labels: vec![0, 1, 2, 0, 1, 2], k: 3 };
        let table: Vec<(&[usize], f64)> = vec![
            (&[0], 0.4),
            (&[1], 0.35),
            (&[2], 0.3),
            (&[0, 1], 0.9),
            (&[0, 2], 0.45),
            (&[1, 2], 0.5),
            (&[0, 1, 2], 0.85),
        ];
        let sel = select_groups(&cl, table_probe(&table, &cl), 6).unwrap();
        assert_eq!(sel.clusters, vec![0, 1]);
        assert_eq!(sel.score, 0.9);
        let ex = select_groups_exhaustive(&cl, table_probe(&table, &cl), 6).unwrap();
        assert_eq!(ex.clusters, vec![0, 1]);
    }

    #[test]
    fn infeasible_budget_and_probe_errors() {
        let cl = ChannelClustering { labels: vec![0, 0, 0, 1], k: 2 };
        let table: Vec<(&[usize], f64)> = vec![(&[0], 0.9), (&[1], 0.1)];
        assert!(select_groups(&cl, table_probe(&table, &cl), 2).is_err());
        let failing = |_: &[usize]| -> Result<f64> { Err(Error::Probe("boom".into())) };
        assert!(matches!(select_groups(&cl, failing, 4), Err(Error::Probe(_))));
    }

    #[test]
    fn connectivity_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conn.json");
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let conn = ConnectivityMatrix { p: random_stochastic(5, &mut rng), n_samples: 12 };
        conn.write(&path).unwrap();
        let back = ConnectivityMatrix::read(&path).unwrap();
        assert_eq!(back.n_samples, 12);
        assert!(back.p.iter().zip(&conn.p).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

//! Lloyd's k-means with k-means++ seeding, and the two labelers built on it:
//! pseudo-style labels from style statistics and environment labels from
//! extracted features.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Architecture, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::rng::sub_seed;
use crate::stylefeat::compute_sdf;
use crate::synthdata::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent seedings; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning run.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total.is_infinite() {
            // squared distances overflowed; take the farthest point
            d2.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                .0
        } else if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> KMeansResult {
    let (n, k, dim) = (points.len(), centroids.len(), points[0].len());
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let (assignments, dists): (Vec<usize>, Vec<f64>) = points.iter().map(|p| nearest(p, &centroids)).unzip();
        let inertia = dists.iter().sum();
        trace.push(inertia);
        if iterations == params.max_iter {
            return KMeansResult {
                centroids,
                assignments,
                inertia,
                iterations,
                inertia_trace: trace,
            };
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        // empty clusters move to the points farthest from their centroid
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        let mut far = far.into_iter();
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let next = if counts[j] == 0 {
                points[far.next().expect("n >= k")].to_vec()
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < params.tol {
            let (assignments, dists): (Vec<usize>, Vec<f64>) =
                points.iter().map(|p| nearest(p, &centroids)).unzip();
            let inertia = dists.iter().sum();
            trace.push(inertia);
            return KMeansResult {
                centroids,
                assignments,
                inertia,
                iterations,
                inertia_trace: trace,
            };
        }
    }
}

/// Clusters `points` into `k` groups.
///
/// Points are processed in a canonical (lexicographic) order, so permuting
/// the input rows permutes the assignments and leaves the centroids unchanged.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, params: &KMeansParams) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 || points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Contract("k-means points must share one non-zero dimension".into()));
    }
    if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::Contract("k-means points must be finite".into()));
    }
    if params.max_iter == 0 || params.restarts == 0 {
        return Err(Error::Config("k-means needs max_iter >= 1 and restarts >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(points[a].as_ref(), points[b].as_ref()).then(a.cmp(&b)));
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_ref()).collect();

    let mut best: Option<KMeansResult> = None;
    for r in 0..params.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0, r as u64));
        let init = plus_plus(&sorted, k, &mut rng);
        let run = lloyd(&sorted, init, params);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("restarts >= 1");
    let mut assignments = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = best.assignments[pos];
    }
    best.assignments = assignments;
    Ok(best)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Clusters style statistics of the whole dataset into `styles` groups and
/// writes the result into every sample's `pseudo_style`. When every sample
/// already carries a pseudo-style, the new ids are aligned to the old ones.
pub fn assign_style_labels(
    data: &mut Dataset,
    params: &ModelParams,
    arch: &Architecture,
    taps: &[usize],
    styles: usize,
    seed: u64,
    kmeans_params: &KMeansParams,
) -> Result<KMeansResult> {
    let x = data.all_x()?;
    let sdf = compute_sdf(params, arch, &x, taps)?;
    let points: Vec<Vec<f64>> = sdf.into_iter().map(|s| s.values).collect();
    let mut result = kmeans(&points, styles, seed, kmeans_params)?;
    let previous: Option<Vec<usize>> = data.samples.iter().map(|s| s.pseudo_style).collect();
    if let Some(prev) = previous {
        let aligned = align_labels(&prev, &result.assignments, styles);
        let mut centroids = result.centroids.clone();
        for (c, &a) in result.assignments.iter().zip(&aligned) {
            centroids[a] = result.centroids[*c].clone();
        }
        result.assignments = aligned;
        result.centroids = centroids;
    }
    for (s, &a) in data.samples.iter_mut().zip(&result.assignments) {
        s.pseudo_style = Some(a);
    }
    Ok(result)
}

/// Relabels `current` (ids in `0..k`) so that it agrees with `previous` as
/// much as possible, by greedy maximum-overlap matching of cluster ids.
/// Cluster ids are arbitrary, so this keeps them stable across re-clusterings.
pub fn align_labels(previous: &[usize], current: &[usize], k: usize) -> Vec<usize> {
    let mut overlap = vec![vec![0usize; k]; k];
    for (&p, &c) in previous.iter().zip(current) {
        if p < k && c < k {
            overlap[c][p] += 1;
        }
    }
    let mut map = vec![usize::MAX; k];
    let mut taken = vec![false; k];
    for _ in 0..k {
        let mut best: Option<(usize, usize, usize)> = None;
        for (c, row) in overlap.iter().enumerate() {
            if map[c] != usize::MAX {
                continue;
            }
            for (p, &n) in row.iter().enumerate() {
                if !taken[p] && best.is_none_or(|(_, _, b)| n > b) {
                    best = Some((c, p, n));
                }
            }
        }
        let (c, p, _) = best.expect("an unmatched pair remains");
        map[c] = p;
        taken[p] = true;
    }
    current.iter().map(|&c| map[c]).collect()
}

/// Clusters the rows of `features` (one per entry of `batch`) into `k_env`
/// environments and writes `env_label` on those samples. A batch smaller
/// than `k_env` uses one environment per sample instead.
pub fn assign_env_labels(
    data: &mut Dataset,
    batch: &[usize],
    features: &Tensor,
    k_env: usize,
    seed: u64,
    kmeans_params: &KMeansParams,
) -> Result<KMeansResult> {
    if features.rows() != batch.len() {
        return Err(Error::shape("environment features", &[batch.len()], &[features.rows()]));
    }
    let k = k_env.min(batch.len());
    let points: Vec<&[f64]> = (0..features.rows()).map(|i| features.row(i)).collect();
    let result = kmeans(&points, k, seed, kmeans_params)?;
    for (&i, &a) in batch.iter().zip(&result.assignments) {
        data.samples[i].env_label = Some(a);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn identical_points_single_cluster() {
        let p = pts(&[[1.0, 2.0]; 5]);
        let r = kmeans(&p, 1, 0, &KMeansParams::default()).unwrap();
        assert_eq!(r.centroids, vec![vec![1.0, 2.0]]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn two_obvious_pairs() {
        let p = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let r = kmeans(&p, 2, 3, &KMeansParams::default()).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let mut c = r.centroids.clone();
        c.sort_by(|a, b| lex_cmp(a, b));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let p = pts(&[[0.0, 3.0], [1.0, -1.0], [4.0, 4.0]]);
        let r = kmeans(&p, 3, 1, &KMeansParams::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&p, 2, 0, &KMeansParams::default()), Err(Error::Config(_))));
    }

    #[test]
    fn ari_perfect_and_permuted() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 0.0);
    }

    #[test]
    fn env_fallback_when_batch_small() {
        let mut data = Dataset {
            samples: (0..3).map(|i| crate::synthdata::Sample::new(vec![i as f64], 0, 0)).collect(),
            sample_shape: vec![1],
            classes: 2,
        };
        let f = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let r = assign_env_labels(&mut data, &[0, 1, 2], &f, 5, 0, &KMeansParams::default()).unwrap();
        assert_eq!(r.centroids.len(), 3);
        let mut labels: Vec<usize> = data.samples.iter().map(|s| s.env_label.unwrap()).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn align_follows_previous_ids() {
        let prev = [0, 0, 0, 1, 1, 2];
        let cur = [2, 2, 0, 1, 1, 0];
        assert_eq!(align_labels(&prev, &cur, 3), vec![0, 0, 2, 1, 1, 2]);
        // a pure relabelling is undone exactly
        assert_eq!(align_labels(&[0, 1, 1, 0], &[1, 0, 0, 1], 2), vec![0, 1, 1, 0]);
    }

    #[test]
    fn huge_coordinates_do_not_break_seeding() {
        let p = pts(&[[1e200, 0.0], [-1e200, 0.0], [1e200, 1.0], [-1e200, 1.0]]);
        let r = kmeans(&p, 2, 3, &KMeansParams::default()).unwrap();
        assert_eq!(r.assignments[0], r.assignments[2]);
        assert_ne!(r.assignments[0], r.assignments[1]);
    }
}

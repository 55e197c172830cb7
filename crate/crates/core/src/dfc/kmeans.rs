//! Lloyd's k-means with greedy k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::assign::sq_dist;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Independent seedings; the run with the lowest inertia is kept.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iter: 300,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

pub fn kmeans(data: &[Vec<f64>], n_c: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(data, n_c, seed, &KMeansOptions::default())
}

pub fn kmeans_with(
    data: &[Vec<f64>],
    n_c: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    if n_c == 0 || data.len() < n_c {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= n_c <= n, got n_c={n_c}, n={}",
            data.len()
        )));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::Shape("k-means rows differ in dimension".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..opts.restarts.max(1) {
        let init = seed_plus_plus(data, n_c, &mut rng);
        let run = lloyd(data, init, opts.max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Greedy k-means++: each new center is the best of several D^2-weighted
/// candidates, judged by the resulting potential.
fn seed_plus_plus(data: &[Vec<f64>], n_c: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let trials = 2 + (n_c as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centers = vec![data[first].clone()];
    let mut closest: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[first])).collect();

    while centers.len() < n_c {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    acc += d;
                    if acc > target {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = closest
                .iter()
                .zip(data)
                .map(|(&c, x)| c.min(sq_dist(x, &data[cand])))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, cand, updated) = best.expect("at least one trial");
        centers.push(data[cand].clone());
        closest = updated;
    }
    centers
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lloyd(data: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centers.len();
    let dim = data[0].len();
    let mut labels: Vec<usize> = data.iter().map(|x| nearest(x, &centers).0).collect();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Empty clusters take over the point that is worst served by its
        // current centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..data.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&data[a], &centers[labels[a]]);
                        let db = sq_dist(&data[b], &centers[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    counts[j] = 1;
                    labels[i] = j;
                    centers[j] = data[i].clone();
                }
            }
        }
        let next: Vec<usize> = data.iter().map(|x| nearest(x, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = data
        .iter()
        .zip(&labels)
        .map(|(x, &l)| sq_dist(x, &centers[l]))
        .sum();
    KMeansResult {
        centroids: centers,
        labels,
        inertia,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn one_point_per_cluster() {
        let data: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 3.0, (i * i) as f64]).collect();
        let r = kmeans(&data, 6, 1).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut labels = r.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 6);
    }

    #[test]
    fn duplicates_single_cluster() {
        let data = vec![vec![2.5, -1.0]; 7];
        let r = kmeans(&data, 1, 3).unwrap();
        assert_eq!(r.centroids, vec![vec![2.5, -1.0]]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn too_many_clusters_rejected() {
        assert!(kmeans(&[vec![1.0]], 2, 0).is_err());
        assert!(kmeans(&[vec![1.0]], 0, 0).is_err());
    }

    /// Exhaustive search over all two-way partitions.
    fn best_bipartition(data: &[Vec<f64>]) -> Vec<usize> {
        let n = data.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> =
                    data.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(x, _)| x).collect();
                let mean: Vec<f64> = (0..data[0].len())
                    .map(|d| members.iter().map(|x| x[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members.iter().map(|x| sq_dist(x, &mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best.1
    }

    #[test]
    fn two_blobs_match_exhaustive_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 0.5).unwrap();
        for trial in 0..5 {
            let data: Vec<Vec<f64>> = (0..12)
                .map(|i| {
                    let cx = if i % 2 == 0 { -4.0 } else { 4.0 };
                    vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)]
                })
                .collect();
            let oracle = best_bipartition(&data);
            let got = kmeans(&data, 2, trial).unwrap().labels;
            let same = got.iter().zip(&oracle).all(|(a, b)| a == b);
            let swapped = got.iter().zip(&oracle).all(|(a, b)| *a == 1 - *b);
            assert!(same || swapped, "trial {trial}: {got:?} vs {oracle:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        assert_eq!(kmeans(&data, 7, 5).unwrap(), kmeans(&data, 7, 5).unwrap());
    }
}

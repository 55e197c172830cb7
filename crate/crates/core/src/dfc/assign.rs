//! Soft cluster assignment with a Student's t kernel, optionally weighted by
//! anatomical agreement, and the self-training KL objective.

use std::collections::{BTreeMap, BTreeSet};

use super::ClusterModel;
use crate::error::{Error, Result};
use crate::tractogram::{Fiber, UNLABELED};

/// Row-stochastic `rows x n_c` matrix of assignment probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    n_c: usize,
    data: Vec<f64>,
}

impl SoftAssignment {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_c = rows.first().map_or(0, Vec::len);
        if n_c == 0 || rows.iter().any(|r| r.len() != n_c) {
            return Err(Error::Shape("assignment rows must share a nonzero width".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("row {i} is not a probability vector")));
            }
        }
        Ok(SoftAssignment {
            n_c,
            data: rows.concat(),
        })
    }

    fn from_flat(n_c: usize, data: Vec<f64>) -> Self {
        SoftAssignment { n_c, data }
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn len(&self) -> usize {
        if self.n_c == 0 {
            0
        } else {
            self.data.len() / self.n_c
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_c..(i + 1) * self.n_c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_c.max(1))
    }

    /// Most probable cluster of row `i` and its probability; ties go to the
    /// smallest cluster index.
    pub fn argmax(&self, i: usize) -> (usize, f64) {
        argmax(self.row(i))
    }
}

pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Dice overlap `2|A ∩ B| / (|A| + |B|)`, zero when both sets are empty.
pub fn dice_regions(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 0.0;
    }
    let common = a.intersection(b).count();
    2.0 * common as f64 / total as f64
}

/// Fiber regions minus the unlabeled marker.
pub(crate) fn labeled_set(fiber: &Fiber) -> BTreeSet<u32> {
    fiber.labeled_regions().collect()
}

fn labeled_endpoints(parcels: [u32; 2]) -> BTreeSet<u32> {
    parcels.into_iter().filter(|&p| p != UNLABELED).collect()
}

/// Fraction of a cluster's endpoints that land in one of the fiber's own
/// (labeled) endpoint parcels.
pub fn endpoint_agreement(fiber_parcels: [u32; 2], cluster_endpoints: &[[u32; 2]]) -> Result<f64> {
    if cluster_endpoints.is_empty() {
        return Err(Error::invalid("endpoint agreement against an empty cluster"));
    }
    let own = labeled_endpoints(fiber_parcels);
    if own.is_empty() {
        return Ok(0.0);
    }
    let hits = cluster_endpoints
        .iter()
        .flatten()
        .filter(|p| own.contains(p))
        .count();
    Ok(hits as f64 / (2 * cluster_endpoints.len()) as f64)
}

/// Same quantity read off a surface profile: the profile already stores
/// per-parcel endpoint fractions, so agreement is their sum over the
/// fiber's parcels.
pub(crate) fn endpoint_agreement_from_profile(fiber_parcels: [u32; 2], tsp: &BTreeMap<u32, f64>) -> f64 {
    labeled_endpoints(fiber_parcels)
        .iter()
        .filter_map(|p| tsp.get(p))
        .sum()
}

/// Per-cluster factor `(1 - D^a)(1 - D^c)` scaling the squared embedding
/// distance.
pub fn anatomical_weights(fiber: &Fiber, model: &ClusterModel) -> Vec<f64> {
    let regions = labeled_set(fiber);
    model
        .tap
        .iter()
        .zip(&model.tsp)
        .map(|(tap, tsp)| {
            let da = dice_regions(&regions, tap);
            let dc = endpoint_agreement_from_profile(fiber.endpoint_parcels, tsp);
            (1.0 - da) * (1.0 - dc)
        })
        .collect()
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unnormalized kernel values `1 / (1 + w_j |z - mu_j|^2)` and their
/// normalization. With `weights = None` every `w_j` is exactly 1.
pub(crate) fn kernel(z: &[f64], centroids: &[Vec<f64>], weights: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let u: Vec<f64> = centroids
        .iter()
        .enumerate()
        .map(|(j, mu)| {
            let w = weights.map_or(1.0, |w| w[j]);
            1.0 / (1.0 + sq_dist(z, mu) * w)
        })
        .collect();
    let total: f64 = u.iter().sum();
    let q = u.iter().map(|v| v / total).collect();
    (q, u)
}

/// Student's t soft assignment over the model's centroids.
pub fn soft_assign_geometric(z: &[f64], model: &ClusterModel) -> Vec<f64> {
    kernel(z, &model.centroids, None).0
}

/// Soft assignment with each squared distance scaled by the fiber's
/// anatomical disagreement with the cluster.
pub fn soft_assign_anatomical(z: &[f64], fiber: &Fiber, model: &ClusterModel) -> Vec<f64> {
    let w = anatomical_weights(fiber, model);
    kernel(z, &model.centroids, Some(&w)).0
}

/// Kernel intermediates for a batch of embeddings, kept for the gradient.
#[derive(Debug, Clone)]
pub struct AssignmentBatch {
    pub q: SoftAssignment,
    u: Vec<f64>,
    weights: Option<Vec<Vec<f64>>>,
}

impl AssignmentBatch {
    /// Assigns every embedding. `weights`, when given, holds one
    /// anatomical weight row per embedding.
    pub fn compute(
        z: &[Vec<f64>],
        centroids: &[Vec<f64>],
        weights: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n_c = centroids.len();
        if n_c == 0 {
            return Err(Error::invalid("no centroids"));
        }
        if let Some(w) = &weights {
            if w.len() != z.len() || w.iter().any(|r| r.len() != n_c) {
                return Err(Error::Shape("weight rows do not match batch".into()));
            }
        }
        let mut q = Vec::with_capacity(z.len() * n_c);
        let mut u = Vec::with_capacity(z.len() * n_c);
        for (i, zi) in z.iter().enumerate() {
            let (qi, ui) = kernel(zi, centroids, weights.as_ref().map(|w| w[i].as_slice()));
            q.extend(qi);
            u.extend(ui);
        }
        Ok(AssignmentBatch {
            q: SoftAssignment::from_flat(n_c, q),
            u,
            weights,
        })
    }
}

/// Sharpened self-training target `p_ij ∝ q_ij^2 / f_j` with `f_j` the
/// column mass of `q`. Columns with zero mass are skipped.
pub fn target_distribution(q: &SoftAssignment) -> SoftAssignment {
    let n_c = q.n_c;
    let mut f = vec![0.0; n_c];
    for row in q.rows() {
        for (fj, &v) in f.iter_mut().zip(row) {
            *fj += v;
        }
    }
    let mut data = Vec::with_capacity(q.data.len());
    for row in q.rows() {
        let raw: Vec<f64> = row
            .iter()
            .zip(&f)
            .map(|(&v, &fj)| if fj > 0.0 { v * v / fj } else { 0.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / total));
    }
    SoftAssignment::from_flat(n_c, data)
}

/// Mean over rows of `KL(p_i || q_i)`.
pub fn kl_divergence(p: &SoftAssignment, q: &SoftAssignment) -> f64 {
    let n = q.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = p
        .rows()
        .zip(q.rows())
        .map(|(pr, qr)| kl_row(pr, qr))
        .sum();
    total / n as f64
}

/// Clamped at zero: when `p` equals `q` rounding can leave a few ulps below.
fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Clustering loss and its gradient.
#[derive(Debug, Clone)]
pub struct KlGradient {
    pub loss: f64,
    /// Per embedding, `d loss / d z_i`.
    pub dz: Vec<Vec<f64>>,
    /// Per centroid, `d loss / d mu_j`.
    pub dmu: Vec<Vec<f64>>,
}

/// Row-level KL term and gradient; the caller divides by the batch size.
pub(crate) fn kl_row_grad(
    z: &[f64],
    centroids: &[Vec<f64>],
    q: &[f64],
    u: &[f64],
    w: Option<&[f64]>,
    p: &[f64],
    dz: &mut [f64],
    dmu: &mut [Vec<f64>],
) -> f64 {
    for (j, mu) in centroids.iter().enumerate() {
        let wj = w.map_or(1.0, |w| w[j]);
        let coef = 2.0 * (p[j] - q[j]) * wj * u[j];
        if coef == 0.0 {
            continue;
        }
        for ((d, m), (zk, mk)) in dz.iter_mut().zip(dmu[j].iter_mut()).zip(z.iter().zip(mu)) {
            let g = coef * (zk - mk);
            *d += g;
            *m -= g;
        }
    }
    kl_row(p, q)
}

/// Mean KL between the (constant) target `p` and the assignments in
/// `batch`, with exact gradients with respect to embeddings and centroids.
/// Anatomical weights are treated as constants.
pub fn kl_loss_and_grad(
    batch: &AssignmentBatch,
    p: &SoftAssignment,
    z: &[Vec<f64>],
    centroids: &[Vec<f64>],
) -> Result<KlGradient> {
    let n = batch.q.len();
    let n_c = batch.q.n_c;
    if p.len() != n || p.n_c != n_c || z.len() != n || centroids.len() != n_c {
        return Err(Error::Shape("kl inputs disagree in size".into()));
    }
    let n_e = centroids[0].len();
    let mut dz = vec![vec![0.0; n_e]; n];
    let mut dmu = vec![vec![0.0; n_e]; n_c];
    let mut loss = 0.0;
    for i in 0..n {
        loss += kl_row_grad(
            &z[i],
            centroids,
            batch.q.row(i),
            &batch.u[i * n_c..(i + 1) * n_c],
            batch.weights.as_ref().map(|w| w[i].as_slice()),
            p.row(i),
            &mut dz[i],
            &mut dmu,
        );
    }
    let inv = 1.0 / n as f64;
    for v in dz.iter_mut().chain(dmu.iter_mut()).flatten() {
        *v *= inv;
    }
    Ok(KlGradient {
        loss: loss * inv,
        dz,
        dmu,
    })
}

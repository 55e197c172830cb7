//! Central finite-difference verification of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, distance_loss, forward, pair_loss_grad, EncoderConfig, EncoderParams, ParamBlocks};
use crate::dfc::{kernel, kl_row_grad};
use crate::distance::mdf_points;
use crate::error::Result;
use crate::tractogram::{resample_points, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub encoder: EncoderConfig,
    pub n_pairs: usize,
    pub n_c: usize,
    /// Finite-difference step.
    pub h: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            encoder: EncoderConfig {
                n_p: 8,
                k: 2,
                edgeconv_widths: vec![4, 8],
                fc_widths: vec![8, 6, 4],
                ..EncoderConfig::default()
            },
            n_pairs: 3,
            n_c: 3,
            h: 1e-5,
            seed: 0,
        }
    }
}

/// Largest relative error `|analytic - numeric| / max(1, |numeric|)` within
/// one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub distance_loss: Vec<BlockError>,
    pub cluster_loss: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_distance_error(&self) -> f64 {
        self.distance_loss.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_cluster_error(&self) -> f64 {
        self.cluster_loss.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

fn random_fiber(rng: &mut impl Rng, n_p: usize) -> Vec<Point> {
    let n = rng.random_range(5..15);
    let mut p = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    let mut pts = vec![p];
    for _ in 1..n {
        for c in &mut p {
            *c += rng.random_range(-2.0..2.0);
        }
        p[0] += 1.5;
        pts.push(p);
    }
    resample_points(&pts, n_p).expect("random walk has distinct points")
}

/// Probability row with every entry bounded away from zero.
fn random_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

struct ClusterProblem {
    fibers: Vec<Vec<Point>>,
    weights: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

impl ClusterProblem {
    fn loss(&self, cfg: &EncoderConfig, params: &EncoderParams, centroids: &[Vec<f64>]) -> f64 {
        let graph = cfg.graph().expect("validated");
        let total: f64 = self
            .fibers
            .iter()
            .zip(&self.weights)
            .zip(&self.target)
            .map(|((f, w), p)| {
                let z = forward(f, &graph, params, cfg.leaky_slope).0;
                let q = kernel(&z, centroids, Some(w)).0;
                p.iter().zip(&q).map(|(pv, qv)| pv * (pv / qv).ln()).sum::<f64>()
            })
            .sum();
        total / self.fibers.len() as f64
    }

    fn grad(&self, cfg: &EncoderConfig, params: &EncoderParams, centroids: &[Vec<f64>]) -> (EncoderParams, Vec<Vec<f64>>) {
        let graph = cfg.graph().expect("validated");
        let inv = 1.0 / self.fibers.len() as f64;
        let mut g = params.zeros_like();
        let mut dmu = vec![vec![0.0; centroids[0].len()]; centroids.len()];
        for ((f, w), p) in self.fibers.iter().zip(&self.weights).zip(&self.target) {
            let (z, trace) = forward(f, &graph, params, cfg.leaky_slope);
            let (q, u) = kernel(&z, centroids, Some(w));
            let mut dz = vec![0.0; z.len()];
            kl_row_grad(&z, centroids, &q, &u, Some(w), p, &mut dz, &mut dmu);
            backward(&trace, &dz, params, cfg.leaky_slope, &mut g);
        }
        g.scale(inv);
        dmu.iter_mut().flatten().for_each(|v| *v *= inv);
        (g, dmu)
    }
}

/// Compares every analytic partial derivative with a central difference,
/// per parameter block.
fn compare<P: ParamBlocks + Clone>(
    at: &P,
    analytic: &P,
    names: &[String],
    h: f64,
    loss: impl Fn(&P) -> f64,
) -> Vec<BlockError> {
    let mut probe = at.clone();
    let sizes: Vec<usize> = at.blocks().iter().map(|b| b.len()).collect();
    let grads = analytic.blocks();
    let mut out = Vec::with_capacity(sizes.len());
    for (b, &size) in sizes.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..size {
            let orig = probe.blocks()[b][k];
            probe.blocks_mut()[b][k] = orig + h;
            let up = loss(&probe);
            probe.blocks_mut()[b][k] = orig - h;
            let down = loss(&probe);
            probe.blocks_mut()[b][k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grads[b][k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        out.push(BlockError {
            block: names[b].clone(),
            max_rel_error: worst,
        });
    }
    out
}

/// Checks the distance-loss gradient with respect to the encoder, and the
/// clustering-loss gradient with respect to both encoder and centroids, on a
/// small random problem.
pub fn finite_difference_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let ecfg = &cfg.encoder;
    ecfg.validate()?;
    let graph = ecfg.graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = EncoderParams::init(&EncoderConfig {
        seed: rng.random(),
        ..ecfg.clone()
    })?;
    let names = params.block_names();

    let pairs: Vec<(Vec<Point>, Vec<Point>)> = (0..cfg.n_pairs.max(1))
        .map(|_| (random_fiber(&mut rng, ecfg.n_p), random_fiber(&mut rng, ecfg.n_p)))
        .collect();
    let labels: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| mdf_points(a, b))
        .collect::<Result<_>>()?;
    let inv = 1.0 / pairs.len() as f64;
    let distance_objective = |p: &EncoderParams| -> f64 {
        pairs
            .iter()
            .zip(&labels)
            .map(|((a, b), &l)| {
                let za = forward(a, &graph, p, ecfg.leaky_slope).0;
                let zb = forward(b, &graph, p, ecfg.leaky_slope).0;
                distance_loss(&za, &zb, l).0
            })
            .sum::<f64>()
            * inv
    };
    let mut grad = params.zeros_like();
    for ((a, b), &l) in pairs.iter().zip(&labels) {
        pair_loss_grad(a, b, l, &graph, &params, ecfg.leaky_slope, &mut grad);
    }
    grad.scale(inv);
    let distance = compare(&params, &grad, &names, cfg.h, distance_objective);

    let n_c = cfg.n_c.max(1);
    let fibers: Vec<Vec<Point>> = pairs.iter().map(|(a, _)| a.clone()).collect();
    let problem = ClusterProblem {
        weights: (0..fibers.len())
            .map(|_| (0..n_c).map(|_| rng.random_range(0.1..1.0)).collect())
            .collect(),
        target: (0..fibers.len()).map(|_| random_row(&mut rng, n_c)).collect(),
        fibers,
    };
    // Centroids near the embeddings keep every assignment away from 0 and 1.
    let anchor = forward(&problem.fibers[0], &graph, &params, ecfg.leaky_slope).0;
    let centroids: Vec<Vec<f64>> = (0..n_c)
        .map(|_| anchor.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let (g_params, g_centroids) = problem.grad(ecfg, &params, &centroids);
    let mut cluster = compare(&params, &g_params, &names, cfg.h, |p| problem.loss(ecfg, p, &centroids));
    let centroid_names: Vec<String> = (0..n_c).map(|j| format!("centroid{j}")).collect();
    cluster.extend(compare(&centroids, &g_centroids, &centroid_names, cfg.h, |c| {
        problem.loss(ecfg, &params, c)
    }));

    Ok(GradCheckReport {
        distance_loss: distance,
        cluster_loss: cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_problem_passes() {
        let r = finite_difference_check(&GradCheckConfig::default()).unwrap();
        assert!(r.max_distance_error() <= 1e-4, "{r:?}");
        assert!(r.max_cluster_error() <= 1e-4, "{r:?}");
        assert_eq!(r.cluster_loss.len(), 2 * 5 + 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let at = vec![vec![1.0, 2.0]];
        let wrong = vec![vec![2.0, 0.0]];
        let r = compare(&at, &wrong, &["x".into()], 1e-5, |p| p[0][0] * p[0][0] + p[0][1]);
        assert!(r[0].max_rel_error > 0.5);
    }
}

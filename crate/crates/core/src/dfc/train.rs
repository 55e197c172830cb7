//! Two-stage training: distance-prediction pretraining of the encoder, then
//! joint refinement of encoder and centroids under the clustering loss.

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compute_profiles, kernel, kl_divergence, kl_row_grad, kmeans_with, target_distribution,
    anatomical_weights, ClusterModel, KMeansOptions, SoftAssignment, TrainConfig, TrainedModel,
};
use crate::distance::mdf_points;
use crate::encoder::{
    adam_step, backward, distance_loss, forward, pair_loss_grad, AdamState, ChainGraph,
    EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::tractogram::{resample_fiber, Fiber, Tractogram};

/// Pairs per parallel work unit. Fixed so the reduction order, and with it
/// every floating-point sum, does not depend on the thread count.
const CHUNK: usize = 16;

/// Independent random streams derived from the training seed.
mod stream {
    pub const POOL: u64 = 1;
    pub const PRETRAIN_PAIRS: u64 = 2;
    pub const EVAL_PAIRS: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const CLUSTER_PAIRS: u64 = 5;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Resampled training fibers drawn from one or more tractograms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPool {
    pub fibers: Vec<Fiber>,
    /// `(tractogram index, fiber index)` of each pooled fiber.
    pub origin: Vec<(usize, usize)>,
}

impl TrainingPool {
    /// Takes up to `per_subject` fibers from each tractogram, chosen
    /// uniformly without replacement and kept in file order.
    pub fn build(tractograms: &[Tractogram], per_subject: usize, n_p: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, stream::POOL);
        let mut fibers = Vec::new();
        let mut origin = Vec::new();
        for (t, tract) in tractograms.iter().enumerate() {
            let mut picked: Vec<usize> = if tract.len() > per_subject {
                sample(&mut rng, tract.len(), per_subject).into_vec()
            } else {
                (0..tract.len()).collect()
            };
            picked.sort_unstable();
            for i in picked {
                fibers.push(resample_fiber(&tract.fibers[i], n_p)?);
                origin.push((t, i));
            }
        }
        if fibers.len() < 2 {
            return Err(Error::invalid(format!(
                "training needs at least 2 fibers, pool has {}",
                fibers.len()
            )));
        }
        Ok(TrainingPool { fibers, origin })
    }

    pub fn len(&self) -> usize {
        self.fibers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fibers.is_empty()
    }
}

/// Each epoch visits the pool in a fresh random order and pairs every fiber
/// with a uniformly random distinct partner.
struct PairSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    partner: Vec<usize>,
    cursor: usize,
}

impl PairSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        PairSampler {
            rng,
            order: (0..n).collect(),
            partner: vec![0; n],
            cursor: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<(usize, usize)> {
        let n = self.partner.len();
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                for i in 0..n {
                    let j = self.rng.random_range(0..n - 1);
                    self.partner[i] = if j >= i { j + 1 } else { j };
                }
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            out.push((i, self.partner[i]));
            self.cursor += 1;
        }
        out
    }
}

fn pair_labels(pool: &[Fiber], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(i, j)| mdf_points(&pool[i].points, &pool[j].points))
        .collect()
}

/// Mean distance loss over `pairs` and its gradient.
fn pretrain_batch(
    pool: &[Fiber],
    pairs: &[(usize, usize)],
    labels: &[f64],
    graph: &ChainGraph,
    params: &EncoderParams,
    slope: f64,
) -> (f64, EncoderParams) {
    let partial: Vec<(f64, EncoderParams)> = pairs
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(pc, lc)| {
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            for (&(i, j), &label) in pc.iter().zip(lc) {
                loss += pair_loss_grad(&pool[i].points, &pool[j].points, label, graph, params, slope, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &partial {
        loss += l;
        grad.add_assign(g);
    }
    let inv = 1.0 / pairs.len() as f64;
    grad.scale(inv);
    (loss * inv, grad)
}

fn eval_loss(
    pool: &[Fiber],
    pairs: &[(usize, usize)],
    labels: &[f64],
    graph: &ChainGraph,
    params: &EncoderParams,
    slope: f64,
) -> f64 {
    let z = embed_pool(pool, graph, params, slope);
    let total: f64 = pairs
        .iter()
        .zip(labels)
        .map(|(&(i, j), &l)| distance_loss(&z[i], &z[j], l).0)
        .sum();
    total / pairs.len() as f64
}

fn embed_pool(pool: &[Fiber], graph: &ChainGraph, params: &EncoderParams, slope: f64) -> Vec<Vec<f64>> {
    pool.par_iter()
        .map(|f| forward(&f.points, graph, params, slope).0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainTrace {
    /// Mean distance loss of every training batch.
    pub batch_loss: Vec<f64>,
    /// Mean loss over a fixed held-aside pairing of the pool, before and
    /// after training.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub trace: PretrainTrace,
}

pub fn train_pretrain(
    tractograms: &[Tractogram],
    cfg: &TrainConfig,
    ecfg: &EncoderConfig,
) -> Result<PretrainOutcome> {
    let pool = TrainingPool::build(tractograms, cfg.samples_per_subject, ecfg.n_p, cfg.seed)?;
    pretrain_on_pool(&pool, cfg, ecfg)
}

/// Trains a freshly initialized encoder to predict MDF distances.
pub fn pretrain_on_pool(pool: &TrainingPool, cfg: &TrainConfig, ecfg: &EncoderConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    ecfg.validate()?;
    if pool.len() < 2 {
        return Err(Error::invalid("training needs at least 2 fibers"));
    }
    let graph = ecfg.graph()?;
    let slope = ecfg.leaky_slope;
    let mut params = EncoderParams::init(ecfg)?;
    let mut adam = AdamState::new(&params);

    let eval_pairs = PairSampler::new(pool.len(), rng_for(cfg.seed, stream::EVAL_PAIRS)).next_batch(pool.len());
    let eval_labels = pair_labels(&pool.fibers, &eval_pairs)?;
    let initial_eval_loss = eval_loss(&pool.fibers, &eval_pairs, &eval_labels, &graph, &params, slope);
    info!("pretraining on {} fibers, initial loss {initial_eval_loss:.4}", pool.len());

    let mut sampler = PairSampler::new(pool.len(), rng_for(cfg.seed, stream::PRETRAIN_PAIRS));
    let total = cfg.pretrain_iters + cfg.pretrain_tail_iters;
    let mut batch_loss = Vec::with_capacity(total);
    for it in 0..total {
        let lr = if it < cfg.pretrain_iters { cfg.pretrain_lr } else { cfg.pretrain_tail_lr };
        let pairs = sampler.next_batch(cfg.batch_size);
        let labels = pair_labels(&pool.fibers, &pairs)?;
        let (loss, grad) = pretrain_batch(&pool.fibers, &pairs, &labels, &graph, &params, slope);
        adam_step(&mut params, &grad, &mut adam, lr)
            .map_err(|e| Error::NonFinite(format!("pretraining iteration {it}: {e}")))?;
        if it % 100 == 0 {
            debug!("pretrain {it}: loss {loss:.4}");
        }
        batch_loss.push(loss);
    }

    let final_eval_loss = eval_loss(&pool.fibers, &eval_pairs, &eval_labels, &graph, &params, slope);
    info!("pretraining done, loss {initial_eval_loss:.4} -> {final_eval_loss:.4}");
    Ok(PretrainOutcome {
        params,
        trace: PretrainTrace {
            batch_loss,
            initial_eval_loss,
            final_eval_loss,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrace {
    pub batch_distance_loss: Vec<f64>,
    pub batch_cluster_loss: Vec<f64>,
    /// Pool-wide clustering loss right after each target refresh.
    pub refresh_cluster_loss: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub params: EncoderParams,
    pub model: ClusterModel,
    /// Centroids produced by k-means, before any gradient step.
    pub initial_centroids: Vec<Vec<f64>>,
    /// Final hard assignment of every pooled fiber.
    pub labels: Vec<usize>,
    pub trace: ClusterTrace,
}

pub fn train_cluster(
    tractograms: &[Tractogram],
    params: EncoderParams,
    cfg: &TrainConfig,
    ecfg: &EncoderConfig,
) -> Result<ClusterOutcome> {
    let pool = TrainingPool::build(tractograms, cfg.samples_per_subject, ecfg.n_p, cfg.seed)?;
    cluster_on_pool(&pool, params, cfg, ecfg)
}

/// Per-fiber anatomical weight rows and anatomy-weighted assignments of
/// the whole pool.
fn assign_pool(pool: &[Fiber], z: &[Vec<f64>], model: &ClusterModel) -> (Vec<Vec<f64>>, SoftAssignment) {
    let weights: Vec<Vec<f64>> = pool.par_iter().map(|f| anatomical_weights(f, model)).collect();
    let rows: Vec<Vec<f64>> = z
        .iter()
        .zip(&weights)
        .map(|(zi, w)| kernel(zi, &model.centroids, Some(w)).0)
        .collect();
    let q = SoftAssignment::from_rows(&rows).expect("kernel rows are probability vectors");
    (weights, q)
}

fn hard_labels(q: &SoftAssignment) -> Vec<usize> {
    (0..q.len()).map(|i| q.argmax(i).0).collect()
}

fn refresh_profiles(
    pool: &[Fiber],
    labels: &[usize],
    model: &mut ClusterModel,
    it: usize,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let (tap, tsp) = compute_profiles(labels, pool, model.n_c())?;
    model.tap = tap;
    model.tsp = tsp;
    let mut sizes = vec![0usize; model.n_c()];
    for &l in labels {
        sizes[l] += 1;
    }
    for (j, &s) in sizes.iter().enumerate() {
        if s == 0 {
            let msg = format!("cluster {j} is empty at iteration {it}; its profiles are cleared");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(())
}

struct ChunkGrad {
    distance_loss: f64,
    cluster_loss: f64,
    params: EncoderParams,
    centroids: Vec<Vec<f64>>,
}

/// Joint gradient of `L_p + lambda * L_c` over one batch of `(anchor,
/// partner)` pairs; the clustering term is evaluated on the anchors.
#[allow(clippy::too_many_arguments)]
fn cluster_batch(
    pool: &[Fiber],
    pairs: &[(usize, usize)],
    labels: &[f64],
    weights: &[Vec<f64>],
    target: &SoftAssignment,
    model: &ClusterModel,
    graph: &ChainGraph,
    params: &EncoderParams,
    slope: f64,
    lambda: f64,
) -> ChunkGrad {
    let n_e = model.centroids[0].len();
    let partial: Vec<ChunkGrad> = pairs
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(pc, lc)| {
            let mut acc = ChunkGrad {
                distance_loss: 0.0,
                cluster_loss: 0.0,
                params: params.zeros_like(),
                centroids: vec![vec![0.0; n_e]; model.n_c()],
            };
            let mut dmu = vec![vec![0.0; n_e]; model.n_c()];
            for (&(i, j), &label) in pc.iter().zip(lc) {
                let (za, ta) = forward(&pool[i].points, graph, params, slope);
                let (zb, tb) = forward(&pool[j].points, graph, params, slope);
                let (lp, mut ga, gb) = distance_loss(&za, &zb, label);
                let (q, u) = kernel(&za, &model.centroids, Some(&weights[i]));
                let mut dz = vec![0.0; n_e];
                for row in dmu.iter_mut() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
                let lc = kl_row_grad(&za, &model.centroids, &q, &u, Some(&weights[i]), target.row(i), &mut dz, &mut dmu);
                for (g, d) in ga.iter_mut().zip(&dz) {
                    *g += lambda * d;
                }
                for (a, d) in acc.centroids.iter_mut().flatten().zip(dmu.iter().flatten()) {
                    *a += lambda * d;
                }
                backward(&ta, &ga, params, slope, &mut acc.params);
                backward(&tb, &gb, params, slope, &mut acc.params);
                acc.distance_loss += lp;
                acc.cluster_loss += lc;
            }
            acc
        })
        .collect();

    let mut total = ChunkGrad {
        distance_loss: 0.0,
        cluster_loss: 0.0,
        params: params.zeros_like(),
        centroids: vec![vec![0.0; n_e]; model.n_c()],
    };
    for p in &partial {
        total.distance_loss += p.distance_loss;
        total.cluster_loss += p.cluster_loss;
        total.params.add_assign(&p.params);
        for (a, b) in total.centroids.iter_mut().flatten().zip(p.centroids.iter().flatten()) {
            *a += b;
        }
    }
    let inv = 1.0 / pairs.len() as f64;
    total.distance_loss *= inv;
    total.cluster_loss *= inv;
    total.params.scale(inv);
    total.centroids.iter_mut().flatten().for_each(|v| *v *= inv);
    total
}

/// Initializes centroids by k-means on the pretrained embeddings, then
/// refines encoder and centroids jointly.
pub fn cluster_on_pool(
    pool: &TrainingPool,
    mut params: EncoderParams,
    cfg: &TrainConfig,
    ecfg: &EncoderConfig,
) -> Result<ClusterOutcome> {
    cfg.validate()?;
    ecfg.validate()?;
    params.check(ecfg)?;
    if pool.len() < cfg.n_c {
        return Err(Error::invalid(format!(
            "{} clusters requested from a pool of {} fibers",
            cfg.n_c,
            pool.len()
        )));
    }
    let graph = ecfg.graph()?;
    let slope = ecfg.leaky_slope;
    let fibers = &pool.fibers;

    let z = embed_pool(fibers, &graph, &params, slope);
    let km_opts = KMeansOptions {
        restarts: cfg.kmeans_restarts,
        ..KMeansOptions::default()
    };
    let mut kmeans_rng = rng_for(cfg.seed, stream::KMEANS);
    let km = kmeans_with(&z, cfg.n_c, kmeans_rng.random(), &km_opts)?;
    info!("k-means on {} embeddings: inertia {:.4}", z.len(), km.inertia);
    let initial_centroids = km.centroids.clone();
    let mut model = ClusterModel::new(km.centroids);
    let mut trace = ClusterTrace {
        batch_distance_loss: Vec::with_capacity(cfg.cluster_iters),
        batch_cluster_loss: Vec::with_capacity(cfg.cluster_iters),
        refresh_cluster_loss: Vec::new(),
        warnings: Vec::new(),
    };
    refresh_profiles(fibers, &km.labels, &mut model, 0, &mut trace.warnings)?;

    let mut adam_params = AdamState::new(&params);
    let mut adam_centroids = AdamState::new(&model.centroids);
    let mut sampler = PairSampler::new(pool.len(), rng_for(cfg.seed, stream::CLUSTER_PAIRS));
    let mut weights = Vec::new();
    let mut target = None;

    for it in 0..cfg.cluster_iters {
        let profile_due = it > 0 && it % cfg.profile_update_interval == 0;
        let target_due = it % cfg.target_update_interval == 0;
        if profile_due || target_due || target.is_none() {
            let z = embed_pool(fibers, &graph, &params, slope);
            if profile_due {
                let (_, q) = assign_pool(fibers, &z, &model);
                refresh_profiles(fibers, &hard_labels(&q), &mut model, it, &mut trace.warnings)?;
            }
            let (w, q) = assign_pool(fibers, &z, &model);
            weights = w;
            if target_due || target.is_none() {
                let p = target_distribution(&q);
                let lc = kl_divergence(&p, &q);
                debug!("cluster {it}: target refreshed, pool loss {lc:.6}");
                trace.refresh_cluster_loss.push(lc);
                target = Some(p);
            }
        }
        let target_ref = target.as_ref().expect("target set above");

        let pairs = sampler.next_batch(cfg.batch_size);
        let labels = pair_labels(fibers, &pairs)?;
        let g = cluster_batch(
            fibers, &pairs, &labels, &weights, target_ref, &model, &graph, &params, slope, cfg.lambda,
        );
        adam_step(&mut params, &g.params, &mut adam_params, cfg.cluster_lr)
            .map_err(|e| Error::NonFinite(format!("clustering iteration {it}: {e}")))?;
        adam_step(&mut model.centroids, &g.centroids, &mut adam_centroids, cfg.cluster_lr)
            .map_err(|e| Error::NonFinite(format!("clustering iteration {it}: {e}")))?;
        trace.batch_distance_loss.push(g.distance_loss);
        trace.batch_cluster_loss.push(g.cluster_loss);
    }

    // Final profiles come from the final geometry; the reported hard
    // labels are the ones the finished model itself produces.
    let z = embed_pool(fibers, &graph, &params, slope);
    let (_, q) = assign_pool(fibers, &z, &model);
    refresh_profiles(fibers, &hard_labels(&q), &mut model, cfg.cluster_iters, &mut trace.warnings)?;
    let (_, q) = assign_pool(fibers, &z, &model);
    let labels = hard_labels(&q);
    info!("clustering done after {} iterations", cfg.cluster_iters);

    Ok(ClusterOutcome {
        params,
        model,
        initial_centroids,
        labels,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub pretrain: PretrainTrace,
    pub cluster: ClusterTrace,
    pub pool_origin: Vec<(usize, usize)>,
    pub pool_labels: Vec<usize>,
}

/// Both stages on one shared pool.
pub fn train(
    tractograms: &[Tractogram],
    cfg: &TrainConfig,
    ecfg: &EncoderConfig,
) -> Result<(TrainedModel, TrainingReport)> {
    let pool = TrainingPool::build(tractograms, cfg.samples_per_subject, ecfg.n_p, cfg.seed)?;
    let pre = pretrain_on_pool(&pool, cfg, ecfg)?;
    let cl = cluster_on_pool(&pool, pre.params, cfg, ecfg)?;
    Ok((
        TrainedModel {
            encoder: ecfg.clone(),
            params: cl.params,
            clusters: cl.model,
        },
        TrainingReport {
            pretrain: pre.trace,
            cluster: cl.trace,
            pool_origin: pool.origin,
            pool_labels: cl.labels,
        },
    ))
}

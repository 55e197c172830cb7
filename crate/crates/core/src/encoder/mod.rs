//! Siamese point-cloud encoder.
//!
//! A fiber is resampled to `n_p` points and treated as a graph whose edges
//! join each point to its `k` nearest neighbors along the fiber. A stack of
//! EdgeConv layers, a global max-pool, and a small fully connected head map
//! it to an embedding. Two fibers share one parameter set; the Euclidean
//! distance between their embeddings is trained to match their MDF
//! distance.
//!
//! Because the chain graph is mirror symmetric and every aggregation is a
//! max, reversing a fiber's point order yields exactly the same embedding.

mod adam;
mod gradcheck;
mod graph;
mod network;
mod params;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tractogram::{check_finite, resample_points, Fiber, Point};

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_check, BlockError, GradCheckConfig, GradCheckReport};
pub use graph::ChainGraph;
pub use network::Features;
pub use params::{EncoderParams, Layer, ParamBlocks};

pub(crate) use network::{backward, forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Points per resampled fiber.
    pub n_p: usize,
    /// Chain-graph neighbors per point.
    pub k: usize,
    pub edgeconv_widths: Vec<usize>,
    /// Hidden widths of the fully connected head; the last entry is the
    /// embedding dimension.
    pub fc_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_p: 14,
            k: 4,
            edgeconv_widths: vec![16, 32, 64],
            fc_widths: vec![128, 64, 10],
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edgeconv_widths.is_empty() || self.fc_widths.is_empty() {
            return Err(Error::invalid("edgeconv_widths and fc_widths must be nonempty"));
        }
        if self.edgeconv_widths.iter().chain(&self.fc_widths).any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be >= 1"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::invalid("leaky_slope must be finite and >= 0"));
        }
        let graph = ChainGraph::build(self.n_p, self.k)?;
        if !graph.is_reversal_symmetric() {
            return Err(Error::invalid(format!(
                "k={} on n_p={} gives a chain graph that is not mirror symmetric; use an even k",
                self.k, self.n_p
            )));
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<ChainGraph> {
        ChainGraph::build(self.n_p, self.k)
    }

    /// Embedding dimension.
    pub fn n_e(&self) -> usize {
        *self.fc_widths.last().unwrap_or(&0)
    }
}

/// A fiber's position in embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl std::ops::Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Embedding {
    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Applies a single EdgeConv layer: per point, the max over neighbors of
/// `LeakyReLU([x_i ; x_j - x_i] W + b)`.
pub fn edgeconv_forward(
    x: &Features,
    graph: &ChainGraph,
    layer: &Layer,
    leaky_slope: f64,
) -> Result<Features> {
    if x.n != graph.n_p() || x.data.len() != x.n * x.d || layer.inputs() != 2 * x.d {
        return Err(Error::Shape(format!(
            "{}x{} features, graph over {} points, layer with {} inputs",
            x.n,
            x.d,
            graph.n_p(),
            layer.inputs()
        )));
    }
    Ok(network::edgeconv_layer(x, graph, layer, leaky_slope).0)
}

/// Embeds points that are already resampled to `cfg.n_p`.
pub fn encode_points(
    points: &[Point],
    cfg: &EncoderConfig,
    graph: &ChainGraph,
    params: &EncoderParams,
) -> Result<Embedding> {
    if points.len() != graph.n_p() {
        return Err(Error::Shape(format!(
            "{} points for a graph over {}",
            points.len(),
            graph.n_p()
        )));
    }
    check_finite(points)?;
    Ok(Embedding(forward(points, graph, params, cfg.leaky_slope).0))
}

/// Resamples `fiber` to `cfg.n_p` points and embeds it.
pub fn encode(fiber: &Fiber, cfg: &EncoderConfig, params: &EncoderParams) -> Result<Embedding> {
    let graph = cfg.graph()?;
    let points = resample_points(&fiber.points, cfg.n_p)?;
    encode_points(&points, cfg, &graph, params)
}

/// Embeds every fiber, preserving input order.
pub fn encode_batch(
    fibers: &[Fiber],
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<Vec<Embedding>> {
    let graph = cfg.graph()?;
    fibers
        .par_iter()
        .map(|f| {
            let points = resample_points(&f.points, cfg.n_p)?;
            encode_points(&points, cfg, &graph, params)
        })
        .collect()
}

/// Squared error between embedding distance and `label`, and the gradient
/// of that error with respect to the pair of embeddings.
///
/// At zero embedding distance the distance's derivative is taken to be 0.
pub(crate) fn distance_loss(za: &[f64], zb: &[f64], label: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let d = euclidean(za, zb);
    let r = d - label;
    let loss = r * r;
    if d == 0.0 {
        return (loss, vec![0.0; za.len()], vec![0.0; zb.len()]);
    }
    let scale = 2.0 * r / d;
    let ga: Vec<f64> = za.iter().zip(zb).map(|(a, b)| scale * (a - b)).collect();
    let gb = ga.iter().map(|g| -g).collect();
    (loss, ga, gb)
}

/// Distance-prediction loss `(|z_a - z_b| - label)^2` for one pair, with
/// its exact gradient.
pub fn pretrain_loss_and_grad(
    pair: (&Fiber, &Fiber),
    label: f64,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<(f64, EncoderParams)> {
    if !(label >= 0.0 && label.is_finite()) {
        return Err(Error::invalid(format!("distance label must be >= 0, got {label}")));
    }
    let graph = cfg.graph()?;
    let pa = resample_points(&pair.0.points, cfg.n_p)?;
    let pb = resample_points(&pair.1.points, cfg.n_p)?;
    let mut grad = params.zeros_like();
    let loss = pair_loss_grad(&pa, &pb, label, &graph, params, cfg.leaky_slope, &mut grad);
    Ok((loss, grad))
}

/// Accumulates one pair's distance-loss gradient into `grad`.
pub(crate) fn pair_loss_grad(
    pa: &[Point],
    pb: &[Point],
    label: f64,
    graph: &ChainGraph,
    params: &EncoderParams,
    slope: f64,
    grad: &mut EncoderParams,
) -> f64 {
    let (za, ta) = forward(pa, graph, params, slope);
    let (zb, tb) = forward(pb, graph, params, slope);
    let (loss, ga, gb) = distance_loss(&za, &zb, label);
    backward(&ta, &ga, params, slope, grad);
    backward(&tb, &gb, params, slope, grad);
    loss
}

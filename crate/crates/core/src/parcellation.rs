//! Applying a trained model to a tractogram: hard assignment by maximum
//! soft probability, followed by cluster-adaptive outlier removal.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dfc::{argmax, soft_assign_anatomical, soft_assign_geometric, TrainedModel};
use crate::encoder::encode_points;
use crate::error::{Error, Result};
use crate::tractogram::{resample_points, Tractogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParcellationConfig {
    /// Standard deviations below a cluster's mean confidence at which a
    /// fiber is rejected.
    pub outlier_sigma: f64,
    /// Weight assignments by anatomical agreement with each cluster.
    pub use_anatomy: bool,
}

impl Default for ParcellationConfig {
    fn default() -> Self {
        ParcellationConfig {
            outlier_sigma: 0.7,
            use_anatomy: true,
        }
    }
}

impl ParcellationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outlier_sigma.is_finite() && self.outlier_sigma >= 0.0) {
            return Err(Error::invalid("outlier_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Hard labels and the probability of each chosen cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignments {
    pub labels: Vec<usize>,
    pub q_max: Vec<f64>,
}

pub fn infer_assignments(
    t: &Tractogram,
    model: &TrainedModel,
    pcfg: &ParcellationConfig,
) -> Result<Assignments> {
    model.check()?;
    pcfg.validate()?;
    let cfg = &model.encoder;
    let graph = cfg.graph()?;
    let rows: Vec<(usize, f64)> = t
        .fibers
        .par_iter()
        .map(|f| {
            let pts = resample_points(&f.points, cfg.n_p)?;
            let z = encode_points(&pts, cfg, &graph, &model.params)?;
            let q = if pcfg.use_anatomy {
                soft_assign_anatomical(&z, f, &model.clusters)
            } else {
                soft_assign_geometric(&z, &model.clusters)
            };
            Ok(argmax(&q))
        })
        .collect::<Result<_>>()?;
    let (labels, q_max) = rows.into_iter().unzip();
    Ok(Assignments { labels, q_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterThreshold {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub threshold: f64,
}

/// Per-cluster rejection threshold `mean - n * std` of the maximum soft
/// probabilities of the cluster's fibers. Empty clusters get all zeros.
pub fn outlier_thresholds(
    labels: &[usize],
    q_max: &[f64],
    n: f64,
    n_c: usize,
) -> Result<Vec<ClusterThreshold>> {
    if !(n.is_finite() && n >= 0.0) {
        return Err(Error::invalid(format!("outlier sigma must be >= 0, got {n}")));
    }
    if labels.len() != q_max.len() {
        return Err(Error::Shape(format!("{} labels, {} probabilities", labels.len(), q_max.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_c) {
        return Err(Error::invalid(format!("label {l} outside [0, {n_c})")));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n_c];
    for (&l, &q) in labels.iter().zip(q_max) {
        members[l].push(q);
    }
    Ok(members
        .iter()
        .map(|qs| {
            if qs.is_empty() {
                return ClusterThreshold { mean: 0.0, std: 0.0, threshold: 0.0 };
            }
            let lo = qs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                // A constant cluster keeps every member regardless of rounding.
                return ClusterThreshold { mean: lo, std: 0.0, threshold: lo };
            }
            let len = qs.len() as f64;
            let mean = qs.iter().sum::<f64>() / len;
            let std = (qs.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / len).sqrt();
            ClusterThreshold {
                mean,
                std,
                threshold: mean - n * std,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberResult {
    pub index: usize,
    pub cluster: usize,
    pub q: f64,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub before: usize,
    pub after: usize,
    #[serde(flatten)]
    pub threshold: ClusterThreshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcellationResult {
    pub fibers: Vec<FiberResult>,
    pub clusters: Vec<ClusterSummary>,
}

impl ParcellationResult {
    pub fn labels(&self) -> Vec<usize> {
        self.fibers.iter().map(|f| f.cluster).collect()
    }

    pub fn outliers(&self) -> Vec<bool> {
        self.fibers.iter().map(|f| f.outlier).collect()
    }

    pub fn n_c(&self) -> usize {
        self.clusters.len()
    }
}

/// Flags every fiber whose probability is strictly below its cluster's
/// threshold.
pub fn remove_outliers(
    labels: &[usize],
    q_max: &[f64],
    thresholds: &[ClusterThreshold],
) -> Result<ParcellationResult> {
    if labels.len() != q_max.len() {
        return Err(Error::Shape(format!("{} labels, {} probabilities", labels.len(), q_max.len())));
    }
    let n_c = thresholds.len();
    if let Some(&l) = labels.iter().find(|&&l| l >= n_c) {
        return Err(Error::invalid(format!("label {l} has no threshold")));
    }
    let mut clusters: Vec<ClusterSummary> = thresholds
        .iter()
        .enumerate()
        .map(|(cluster, &threshold)| ClusterSummary {
            cluster,
            before: 0,
            after: 0,
            threshold,
        })
        .collect();
    let fibers = labels
        .iter()
        .zip(q_max)
        .enumerate()
        .map(|(index, (&cluster, &q))| {
            let outlier = q < thresholds[cluster].threshold;
            clusters[cluster].before += 1;
            if !outlier {
                clusters[cluster].after += 1;
            }
            FiberResult {
                index,
                cluster,
                q,
                outlier,
            }
        })
        .collect();
    Ok(ParcellationResult { fibers, clusters })
}

/// Fixed-threshold rejection, kept for comparison with the adaptive rule.
pub fn remove_outliers_absolute(q_max: &[f64], threshold: f64) -> Vec<bool> {
    q_max.iter().map(|&q| q < threshold).collect()
}

/// Full inference: assignment, per-subject thresholds, outlier flags.
pub fn parcellate(
    t: &Tractogram,
    model: &TrainedModel,
    pcfg: &ParcellationConfig,
) -> Result<ParcellationResult> {
    let a = infer_assignments(t, model, pcfg)?;
    let th = outlier_thresholds(&a.labels, &a.q_max, pcfg.outlier_sigma, model.clusters.n_c())?;
    remove_outliers(&a.labels, &a.q_max, &th)
}

#[derive(Serialize, Deserialize)]
struct Summary {
    clusters: Vec<ClusterSummary>,
    config: Option<ParcellationConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Fiber(FiberResult),
    Summary { summary: Summary },
}

/// One JSON object per fiber, then a summary line with the per-cluster
/// statistics and the configuration used.
pub fn write_parcellation(
    result: &ParcellationResult,
    config: Option<&ParcellationConfig>,
    mut w: impl Write,
) -> Result<()> {
    for f in &result.fibers {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n").map_err(|e| Error::io("<parcellation>", e))?;
    }
    let summary = Line::Summary {
        summary: Summary {
            clusters: result.clusters.clone(),
            config: config.cloned(),
        },
    };
    serde_json::to_writer(&mut w, &summary)?;
    w.write_all(b"\n").map_err(|e| Error::io("<parcellation>", e))?;
    Ok(())
}

pub fn read_parcellation(r: impl Read) -> Result<(ParcellationResult, Option<ParcellationConfig>)> {
    let mut fibers = Vec::new();
    let mut summary = None;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<parcellation>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(Error::Schema(format!("line {}: content after summary", i + 1)));
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            Line::Fiber(f) => {
                if f.index != fibers.len() {
                    return Err(Error::Schema(format!(
                        "line {}: fiber index {} out of sequence",
                        i + 1,
                        f.index
                    )));
                }
                fibers.push(f);
            }
            Line::Summary { summary: s } => summary = Some(s),
        }
    }
    let s = summary.ok_or_else(|| Error::Schema("parcellation has no summary line".into()))?;
    if let Some(f) = fibers.iter().find(|f| f.cluster >= s.clusters.len()) {
        return Err(Error::Schema(format!("fiber {} names cluster {}", f.index, f.cluster)));
    }
    Ok((
        ParcellationResult {
            fibers,
            clusters: s.clusters,
        },
        s.config,
    ))
}

pub fn save_parcellation(
    result: &ParcellationResult,
    config: Option<&ParcellationConfig>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_parcellation(result, config, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_parcellation(path: impl AsRef<Path>) -> Result<(ParcellationResult, Option<ParcellationConfig>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_parcellation(file)
}

//! Deep fiber clustering: cluster centroids in embedding space, anatomical
//! profiles, and the two-stage training procedure.

mod assign;
mod kmeans;
mod profiles;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub use assign::{
    anatomical_weights, dice_regions, endpoint_agreement, kl_divergence, kl_loss_and_grad,
    soft_assign_anatomical, soft_assign_geometric, target_distribution, AssignmentBatch,
    KlGradient, SoftAssignment,
};
pub use kmeans::{kmeans, kmeans_with, KMeansOptions, KMeansResult};
pub use profiles::compute_profiles;
pub use train::{
    cluster_on_pool, pretrain_on_pool, train, train_cluster, train_pretrain, ClusterOutcome,
    ClusterTrace, PretrainOutcome, PretrainTrace, TrainingPool, TrainingReport,
};

pub(crate) use assign::{argmax, kernel, kl_row_grad, labeled_set};

/// The clustering layer plus the anatomical profile of every cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Regions crossed by more than 40% of member fibers.
    pub tap: Vec<BTreeSet<u32>>,
    /// Fraction of member endpoints landing in each labeled parcel.
    pub tsp: Vec<BTreeMap<u32, f64>>,
}

impl ClusterModel {
    /// Centroids with empty profiles.
    pub fn new(centroids: Vec<Vec<f64>>) -> Self {
        let n_c = centroids.len();
        ClusterModel {
            centroids,
            tap: vec![BTreeSet::new(); n_c],
            tsp: vec![BTreeMap::new(); n_c],
        }
    }

    pub fn n_c(&self) -> usize {
        self.centroids.len()
    }

    pub fn validate(&self, n_e: usize) -> Result<()> {
        let n_c = self.n_c();
        if n_c == 0 {
            return Err(Error::invalid("cluster model has no centroids"));
        }
        if self.tap.len() != n_c || self.tsp.len() != n_c {
            return Err(Error::Shape(format!(
                "{n_c} centroids but {} anatomical and {} surface profiles",
                self.tap.len(),
                self.tsp.len()
            )));
        }
        if let Some(j) = self.centroids.iter().position(|c| c.len() != n_e) {
            return Err(Error::Shape(format!(
                "centroid {j} has dimension {}, encoder embeds in {n_e}",
                self.centroids[j].len()
            )));
        }
        if self.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid".into()));
        }
        if self
            .tsp
            .iter()
            .flat_map(|m| m.values())
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid("surface profile fraction outside [0, 1]"));
        }
        Ok(())
    }
}

/// Hyperparameters of both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_c: usize,
    /// Weight of the clustering loss against the distance loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    /// Low learning-rate iterations appended to pretraining.
    pub pretrain_tail_iters: usize,
    pub pretrain_tail_lr: f64,
    pub cluster_iters: usize,
    pub cluster_lr: f64,
    /// Batches between recomputations of the anatomical profiles.
    pub profile_update_interval: usize,
    /// Batches between refreshes of the self-training target.
    pub target_update_interval: usize,
    /// Fibers drawn from each tractogram into the training pool.
    pub samples_per_subject: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_c: 10,
            lambda: 0.1,
            batch_size: 256,
            pretrain_iters: 2000,
            pretrain_lr: 1e-3,
            pretrain_tail_iters: 200,
            pretrain_tail_lr: 1e-4,
            cluster_iters: 1000,
            cluster_lr: 1e-4,
            profile_update_interval: 200,
            target_update_interval: 100,
            samples_per_subject: 10_000,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_c", self.n_c),
            ("batch_size", self.batch_size),
            ("profile_update_interval", self.profile_update_interval),
            ("target_update_interval", self.target_update_interval),
            ("samples_per_subject", self.samples_per_subject),
            ("kmeans_restarts", self.kmeans_restarts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("pretrain_tail_lr", self.pretrain_tail_lr),
            ("cluster_lr", self.cluster_lr),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Everything inference needs: the encoder and the cluster vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub encoder: EncoderConfig,
    pub params: EncoderParams,
    pub clusters: ClusterModel,
}

impl TrainedModel {
    pub fn check(&self) -> Result<()> {
        self.encoder.validate()?;
        self.params.check(&self.encoder)?;
        self.clusters.validate(self.encoder.n_e())
    }
}

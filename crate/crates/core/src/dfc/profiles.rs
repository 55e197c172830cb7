use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tractogram::{Fiber, UNLABELED};

/// Anatomical and surface profiles of every cluster under the hard
/// assignment `labels`. Empty clusters get empty profiles.
///
/// A region joins a cluster's anatomical profile when strictly more than
/// 40% of the cluster's fibers cross it.
#[allow(clippy::type_complexity)]
pub fn compute_profiles(
    labels: &[usize],
    fibers: &[Fiber],
    n_c: usize,
) -> Result<(Vec<BTreeSet<u32>>, Vec<BTreeMap<u32, f64>>)> {
    if labels.len() != fibers.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} fibers",
            labels.len(),
            fibers.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_c) {
        return Err(Error::invalid(format!("label {l} outside [0, {n_c})")));
    }
    let mut sizes = vec![0usize; n_c];
    let mut regions: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); n_c];
    let mut parcels: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); n_c];
    for (&l, f) in labels.iter().zip(fibers) {
        sizes[l] += 1;
        for r in f.labeled_regions() {
            *regions[l].entry(r).or_default() += 1;
        }
        for p in f.endpoint_parcels {
            if p != UNLABELED {
                *parcels[l].entry(p).or_default() += 1;
            }
        }
    }
    let tap = regions
        .iter()
        .zip(&sizes)
        .map(|(counts, &n)| {
            counts
                .iter()
                .filter(|(_, &c)| 5 * c > 2 * n)
                .map(|(&r, _)| r)
                .collect()
        })
        .collect();
    let tsp = parcels
        .iter()
        .zip(&sizes)
        .map(|(counts, &n)| {
            counts
                .iter()
                .map(|(&p, &c)| (p, c as f64 / (2 * n) as f64))
                .collect()
        })
        .collect();
    Ok((tap, tsp))
}

//! Clustering quality: geometric compactness (Davies-Bouldin over MDF),
//! cluster detection rate, and anatomical coherence of regions and
//! endpoints.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dfc::{compute_profiles, dice_regions, labeled_set};
use crate::distance::{medoid_by, mdf_points};
use crate::error::{Error, Result};
use crate::tractogram::{resample_points, Fiber, Point, UNLABELED};

/// Clusters with more than this many fibers count as detected.
pub const DETECTION_MIN_FIBERS: usize = 20;

fn members_by_cluster(labels: &[usize], n_c: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_c];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

fn cluster_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

fn check_labels(fibers: &[Fiber], labels: &[usize]) -> Result<()> {
    if fibers.len() != labels.len() {
        return Err(Error::Shape(format!("{} fibers, {} labels", fibers.len(), labels.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbDetail {
    pub value: f64,
    /// Per cluster, the medoid's fiber index (`None` for empty clusters).
    pub medoids: Vec<Option<usize>>,
    /// Per cluster, mean MDF from each member to the medoid.
    pub spread: Vec<Option<f64>>,
    /// Per cluster, its worst ratio against any other cluster.
    pub worst_ratio: Vec<Option<f64>>,
    pub diagnostic: Option<String>,
}

/// Davies-Bouldin index with medoid fibers as cluster centers and MDF as
/// the distance. Smaller is better.
pub fn db_index(fibers: &[Fiber], labels: &[usize], n_p: usize) -> Result<f64> {
    Ok(db_index_detailed(fibers, labels, n_p)?.value)
}

pub fn db_index_detailed(fibers: &[Fiber], labels: &[usize], n_p: usize) -> Result<DbDetail> {
    check_labels(fibers, labels)?;
    let n_c = cluster_count(labels);
    let members = members_by_cluster(labels, n_c);
    let nonempty: Vec<usize> = (0..n_c).filter(|&c| !members[c].is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::invalid(format!(
            "Davies-Bouldin needs at least 2 nonempty clusters, got {}",
            nonempty.len()
        )));
    }
    let points: Vec<Vec<Point>> = fibers
        .iter()
        .map(|f| resample_points(&f.points, n_p))
        .collect::<Result<_>>()?;
    let d = |a: usize, b: usize| mdf_points(&points[a], &points[b]).expect("equal point counts");

    let mut medoids = vec![None; n_c];
    let mut spread = vec![None; n_c];
    for &c in &nonempty {
        let m = medoid_by(&members[c], d)?;
        let total: f64 = members[c].iter().map(|&i| d(i, m)).sum();
        medoids[c] = Some(m);
        spread[c] = Some(total / members[c].len() as f64);
    }

    let mut worst_ratio = vec![None; n_c];
    let mut diagnostic = None;
    for &i in &nonempty {
        let mut worst = 0.0f64;
        for &j in &nonempty {
            if i == j {
                continue;
            }
            let sep = d(medoids[i].unwrap(), medoids[j].unwrap());
            let ratio = if sep == 0.0 {
                diagnostic.get_or_insert_with(|| {
                    format!("clusters {i} and {j} have geometrically coincident medoids")
                });
                f64::INFINITY
            } else {
                (spread[i].unwrap() + spread[j].unwrap()) / sep
            };
            worst = worst.max(ratio);
        }
        worst_ratio[i] = Some(worst);
    }
    if let Some(msg) = &diagnostic {
        warn!("Davies-Bouldin index is infinite: {msg}");
    }
    let value = nonempty.iter().map(|&c| worst_ratio[c].unwrap()).sum::<f64>() / nonempty.len() as f64;
    Ok(DbDetail {
        value,
        medoids,
        spread,
        worst_ratio,
        diagnostic,
    })
}

/// Fraction of the `n_c` clusters that hold more than 20 fibers.
pub fn wmpg(labels: &[usize], n_c: usize) -> Result<f64> {
    if n_c == 0 {
        return Err(Error::invalid("wmpg needs n_c >= 1"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_c) {
        return Err(Error::invalid(format!("label {l} outside [0, {n_c})")));
    }
    let mut sizes = vec![0usize; n_c];
    for &l in labels {
        sizes[l] += 1;
    }
    let detected = sizes.iter().filter(|&&s| s > DETECTION_MIN_FIBERS).count();
    Ok(detected as f64 / n_c as f64)
}

/// Per nonempty cluster, the mean Dice overlap between each member's
/// regions and the cluster's anatomical profile.
pub fn tapc_per_cluster(fibers: &[Fiber], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    check_labels(fibers, labels)?;
    let n_c = cluster_count(labels);
    let (tap, _) = compute_profiles(labels, fibers, n_c)?;
    Ok(members_by_cluster(labels, n_c)
        .iter()
        .zip(&tap)
        .map(|(m, profile)| {
            if m.is_empty() {
                return None;
            }
            let total: f64 = m.iter().map(|&i| dice_regions(&labeled_set(&fibers[i]), profile)).sum();
            Some(total / m.len() as f64)
        })
        .collect())
}

/// Per nonempty cluster, the mean of its surface-profile fractions.
///
/// The fractions share the denominator `2 * size`, so their mean is the
/// labeled endpoint count over `2 * size * parcels`, taken in one division.
pub fn tspc_per_cluster(fibers: &[Fiber], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    check_labels(fibers, labels)?;
    let n_c = cluster_count(labels);
    let (_, tsp) = compute_profiles(labels, fibers, n_c)?;
    Ok(members_by_cluster(labels, n_c)
        .iter()
        .zip(&tsp)
        .map(|(m, profile)| {
            if m.is_empty() {
                return None;
            }
            if profile.is_empty() {
                return Some(0.0);
            }
            let endpoints: usize = m
                .iter()
                .map(|&i| fibers[i].endpoint_parcels.iter().filter(|&&p| p != UNLABELED).count())
                .sum();
            Some(endpoints as f64 / (2 * m.len() * profile.len()) as f64)
        })
        .collect())
}

fn mean_present(values: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("no nonempty clusters"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn tapc(fibers: &[Fiber], labels: &[usize]) -> Result<f64> {
    mean_present(&tapc_per_cluster(fibers, labels)?)
}

pub fn tspc(fibers: &[Fiber], labels: &[usize]) -> Result<f64> {
    mean_present(&tspc_per_cluster(fibers, labels)?)
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub cluster: usize,
    pub size: usize,
    pub detected: bool,
    pub medoid: Option<usize>,
    pub spread: Option<f64>,
    pub db_ratio: Option<f64>,
    pub tapc: Option<f64>,
    pub tspc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Written as `null` when infinite.
    #[serde(with = "infinite_as_null")]
    pub db: f64,
    pub wmpg: f64,
    pub tapc: f64,
    pub tspc: f64,
    pub per_cluster: Vec<ClusterMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// All four metrics over `fibers` labeled into `n_c` clusters.
pub fn evaluate(fibers: &[Fiber], labels: &[usize], n_c: usize, n_p: usize) -> Result<MetricsReport> {
    check_labels(fibers, labels)?;
    let wmpg = wmpg(labels, n_c)?;
    let db = db_index_detailed(fibers, labels, n_p)?;
    let tap = tapc_per_cluster(fibers, labels)?;
    let tsp = tspc_per_cluster(fibers, labels)?;
    let members = members_by_cluster(labels, n_c);
    let get = |v: &[Option<f64>], c: usize| v.get(c).copied().flatten();
    let per_cluster = (0..n_c)
        .map(|c| ClusterMetrics {
            cluster: c,
            size: members[c].len(),
            detected: members[c].len() > DETECTION_MIN_FIBERS,
            medoid: db.medoids.get(c).copied().flatten(),
            spread: get(&db.spread, c),
            db_ratio: get(&db.worst_ratio, c).filter(|r| r.is_finite()),
            tapc: get(&tap, c),
            tspc: get(&tsp, c),
        })
        .collect();
    Ok(MetricsReport {
        db: db.value,
        wmpg,
        tapc: mean_present(&tap)?,
        tspc: mean_present(&tsp)?,
        per_cluster,
        diagnostic: db.diagnostic,
    })
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Chance-corrected agreement between two labelings of the same items.
/// Two trivial labelings (everything together, or everything apart) agree
/// perfectly by convention.
pub fn adjusted_rand_index<A: Eq + Hash + Ord, B: Eq + Hash + Ord>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: BTreeMap<&A, u64> = BTreeMap::new();
    let mut cols: BTreeMap<&B, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let mut cells: Vec<u64> = table.into_values().collect();
    cells.sort_unstable();
    let index: f64 = cells.iter().map(|&n| pairs(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(offset: f64, regions: &[u32], parcels: [u32; 2]) -> Fiber {
        Fiber::new(
            (0..5).map(|i| [offset, 0.0, 10.0 * i as f64]).collect(),
            regions.iter().copied(),
            parcels,
        )
        .unwrap()
    }

    #[test]
    fn db_two_tight_clusters() {
        let fibers = [
            line(0.0, &[], [0, 0]),
            line(0.2, &[], [0, 0]),
            line(5.0, &[], [0, 0]),
            line(5.2, &[], [0, 0]),
        ];
        let v = db_index(&fibers, &[0, 0, 1, 1], 5).unwrap();
        assert!((v - 0.04).abs() < 1e-12, "{v}");
    }

    #[test]
    fn db_singletons_and_errors() {
        let fibers = [line(0.0, &[], [0, 0]), line(3.0, &[], [0, 0])];
        assert_eq!(db_index(&fibers, &[0, 1], 5).unwrap(), 0.0);
        assert!(db_index(&fibers, &[0, 0], 5).is_err());
        assert!(db_index(&fibers, &[0], 5).is_err());
    }

    #[test]
    fn db_coincident_medoids_are_infinite() {
        let fibers = [line(0.0, &[], [0, 0]), line(0.0, &[], [0, 0])];
        let d = db_index_detailed(&fibers, &[0, 1], 5).unwrap();
        assert!(d.value.is_infinite());
        assert!(d.diagnostic.is_some());
    }

    #[test]
    fn wmpg_examples() {
        let mut labels = vec![0; 25];
        labels.extend(vec![1; 20]);
        labels.extend(vec![2; 5]);
        assert_eq!(wmpg(&labels, 4).unwrap(), 0.25);
        assert_eq!(wmpg(&[], 1).unwrap(), 0.0);
        assert_eq!(wmpg(&vec![0; 21], 1).unwrap(), 1.0);
    }

    #[test]
    fn tapc_examples() {
        let same = [line(0.0, &[3, 4], [0, 0]), line(1.0, &[3, 4], [0, 0])];
        assert_eq!(tapc(&same, &[0, 0]).unwrap(), 1.0);
        let mixed = [line(0.0, &[1, 2], [0, 0]), line(1.0, &[1, 3], [0, 0]), line(2.0, &[1, 2], [0, 0])];
        assert!((tapc(&mixed, &[0, 0, 0]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn tspc_examples() {
        let one = [line(0.0, &[], [7, 7]), line(1.0, &[], [7, 7])];
        assert_eq!(tspc(&one, &[0, 0]).unwrap(), 1.0);
        let three = [line(0.0, &[], [10, 20]), line(1.0, &[], [10, 20]), line(2.0, &[], [10, 30])];
        assert!((tspc(&three, &[0, 0, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let half = [line(0.0, &[], [0, 7]), line(1.0, &[], [7, 0])];
        assert_eq!(tspc(&half, &[0, 0]).unwrap(), 0.5);
        let none = [line(0.0, &[], [0, 0])];
        assert_eq!(tspc(&none, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn report_serializes_infinite_db_as_null() {
        let fibers = [line(0.0, &[1], [2, 3]), line(0.0, &[1], [2, 3])];
        let r = evaluate(&fibers, &[0, 1], 2, 5).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with(r#"{"db":null,"wmpg":0.0"#), "{json}");
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert!(back.db.is_infinite());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 9, 9]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        // Classic example: contingency [[1,1],[1,1]] gives -0.5.
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }
}

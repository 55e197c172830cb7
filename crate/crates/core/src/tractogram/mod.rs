//! Fibers, tractograms, and the geometric preprocessing applied before
//! anything is embedded: arc-length resampling, length filtering, and
//! orientation reversal.

mod io;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_tractogram, read_tractogram, save_tractogram, write_tractogram, FORMAT_NAME};
pub use synthetic::{generate_synthetic, SyntheticSpec, OUTLIER_TRUTH};

/// A point in millimeters.
pub type Point = [f64; 3];

/// Label shared by regions and parcels meaning "not labeled". It never
/// participates in profiles, Dice scores, or endpoint agreement.
pub const UNLABELED: u32 = 0;

/// A single streamline with its anatomical annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fiber {
    pub points: Vec<Point>,
    /// Anatomical regions the fiber passes through.
    pub region_set: BTreeSet<u32>,
    /// Cortical parcels at the first and last point, in point order.
    pub endpoint_parcels: [u32; 2],
    pub source_id: Option<u64>,
}

impl Fiber {
    /// Builds a fiber, checking that it has at least two finite points.
    pub fn new(
        points: Vec<Point>,
        region_set: impl IntoIterator<Item = u32>,
        endpoint_parcels: [u32; 2],
    ) -> Result<Self> {
        let fiber = Fiber {
            points,
            region_set: region_set.into_iter().collect(),
            endpoint_parcels,
            source_id: None,
        };
        fiber.validate()?;
        Ok(fiber)
    }

    /// Fiber without annotations, mostly useful for geometry-only work.
    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        Fiber::new(points, [], [UNLABELED; 2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::invalid(format!(
                "fiber needs at least 2 points, got {}",
                self.points.len()
            )));
        }
        check_finite(&self.points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Polyline arc length in millimeters.
    pub fn arc_length(&self) -> f64 {
        arc_length(&self.points)
    }

    /// Region labels with [`UNLABELED`] removed.
    pub fn labeled_regions(&self) -> impl Iterator<Item = u32> + '_ {
        self.region_set.iter().copied().filter(|&r| r != UNLABELED)
    }
}

/// One subject's fibers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tractogram {
    pub subject_id: String,
    pub fibers: Vec<Fiber>,
    /// Ground-truth bundle ids for synthetic data, aligned with `fibers`.
    pub truth_labels: Option<Vec<i64>>,
}

impl Tractogram {
    pub fn new(subject_id: impl Into<String>, fibers: Vec<Fiber>) -> Self {
        Tractogram {
            subject_id: subject_id.into(),
            fibers,
            truth_labels: None,
        }
    }

    pub fn with_truth(mut self, truth: Vec<i64>) -> Result<Self> {
        if truth.len() != self.fibers.len() {
            return Err(Error::invalid(format!(
                "{} truth labels for {} fibers",
                truth.len(),
                self.fibers.len()
            )));
        }
        self.truth_labels = Some(truth);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.fibers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fibers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.fibers.iter().enumerate() {
            f.validate()
                .map_err(|e| Error::invalid(format!("fiber {i}: {e}")))?;
        }
        match &self.truth_labels {
            Some(t) if t.len() != self.fibers.len() => Err(Error::invalid(format!(
                "{} truth labels for {} fibers",
                t.len(),
                self.fibers.len()
            ))),
            _ => Ok(()),
        }
    }
}

pub(crate) fn check_finite(points: &[Point]) -> Result<()> {
    match points
        .iter()
        .position(|p| p.iter().any(|c| !c.is_finite()))
    {
        Some(i) => Err(Error::NonFinite(format!("coordinate of point {i}"))),
        None => Ok(()),
    }
}

#[inline]
pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn arc_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

/// Resamples a polyline to `n` points spaced uniformly in arc length.
///
/// The first and last points are copied exactly; intermediate points are
/// linear interpolations along the segment containing their arc-length
/// target. A polyline of zero length collapses to `n` copies of its first
/// point.
///
/// Targets in the first half are located walking from the first point and
/// the rest walking from the last, so resampling a reversed polyline gives
/// exactly the reversed result.
pub fn resample_points(points: &[Point], n: usize) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(Error::invalid(format!("cannot resample to {n} points")));
    }
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "fiber needs at least 2 points, got {}",
            points.len()
        )));
    }
    check_finite(points)?;

    let seg: Vec<f64> = points.windows(2).map(|w| dist(&w[0], &w[1])).collect();
    let m = seg.len();
    let mut total = 0.0;
    for i in 0..m / 2 {
        total += seg[i] + seg[m - 1 - i];
    }
    if m % 2 == 1 {
        total += seg[m / 2];
    }
    let first = points[0];
    let last = points[points.len() - 1];
    if total == 0.0 {
        return Ok(vec![first; n]);
    }

    // Interior indices k with 2k < n - 1 come from the front walk, their
    // mirror images from the back walk.
    let half = (n - 1) / 2;
    let targets: Vec<f64> = (1..=half)
        .map(|k| total * k as f64 / (n - 1) as f64)
        .collect();
    let reversed: Vec<Point> = points.iter().rev().copied().collect();
    let front = walk(points, &targets);
    let back = walk(&reversed, &targets);

    let mut out = vec![first; n];
    out[n - 1] = last;
    for k in 1..=half {
        let (a, b) = (front[k - 1], back[k - 1]);
        if 2 * k == n - 1 {
            out[k] = [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5];
        } else {
            out[k] = a;
            out[n - 1 - k] = b;
        }
    }
    Ok(out)
}

/// Points at increasing arc-length `targets` measured from `points[0]`.
fn walk(points: &[Point], targets: &[f64]) -> Vec<Point> {
    let mut out = Vec::with_capacity(targets.len());
    let last_seg = points.len() - 2;
    let mut seg = 0;
    let mut start = 0.0;
    let mut len = dist(&points[0], &points[1]);
    for &target in targets {
        while seg < last_seg && start + len < target {
            start += len;
            seg += 1;
            len = dist(&points[seg], &points[seg + 1]);
        }
        let t = if len > 0.0 {
            ((target - start) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = points[seg];
        let b = points[seg + 1];
        out.push([
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
        ]);
    }
    out
}

/// Returns a copy of `fiber` with `n_p` uniformly spaced points. Labels are
/// carried over untouched.
pub fn resample_fiber(fiber: &Fiber, n_p: usize) -> Result<Fiber> {
    Ok(Fiber {
        points: resample_points(&fiber.points, n_p)?,
        region_set: fiber.region_set.clone(),
        endpoint_parcels: fiber.endpoint_parcels,
        source_id: fiber.source_id,
    })
}

/// Keeps fibers whose arc length is at least `min_len` millimeters.
pub fn filter_by_length(t: &Tractogram, min_len: f64) -> Tractogram {
    let keep: Vec<bool> = t.fibers.iter().map(|f| f.arc_length() >= min_len).collect();
    let fibers = t
        .fibers
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(f, _)| f.clone())
        .collect();
    let truth_labels = t.truth_labels.as_ref().map(|labels| {
        labels
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&l, _)| l)
            .collect()
    });
    Tractogram {
        subject_id: t.subject_id.clone(),
        fibers,
        truth_labels,
    }
}

/// The same streamline traversed from the other end.
pub fn reverse_fiber(fiber: &Fiber) -> Fiber {
    let mut points = fiber.points.clone();
    points.reverse();
    Fiber {
        points,
        region_set: fiber.region_set.clone(),
        endpoint_parcels: [fiber.endpoint_parcels[1], fiber.endpoint_parcels[0]],
        source_id: fiber.source_id,
    }
}

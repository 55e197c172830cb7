//! Seeded synthetic tractograms with known bundle membership.
//!
//! Bundles are noisy copies of planar circular arcs. Outliers are rotated
//! copies of a random bundle's centerline, walked in a random direction until
//! they clear every centerline by three bundle separations.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{dist, reverse_fiber, Fiber, Point, Tractogram, UNLABELED};
use crate::error::{Error, Result};

/// Truth label given to injected outlier fibers.
pub const OUTLIER_TRUTH: i64 = -1;

const REGION_POOL: u32 = 40;
const PARCEL_POOL: u32 = 70;
const DENSE_SPACING: f64 = 0.25;
const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_bundles: usize,
    pub fibers_per_bundle: usize,
    pub points_per_centerline: usize,
    /// Standard deviation (mm) of each fiber's perpendicular displacement.
    pub noise_sigma: f64,
    /// Minimum distance (mm) between any two bundle centerlines.
    pub bundle_separation: f64,
    pub flip_fraction: f64,
    pub outlier_fraction: f64,
    /// Per-label probability of dropping, adding, or replacing an
    /// anatomical label on a bundle fiber.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_bundles: 10,
            fibers_per_bundle: 100,
            points_per_centerline: 40,
            noise_sigma: 1.5,
            bundle_separation: 12.0,
            flip_fraction: 0.5,
            outlier_fraction: 0.05,
            label_noise: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bundles == 0 || self.fibers_per_bundle == 0 {
            return Err(Error::invalid("n_bundles and fibers_per_bundle must be >= 1"));
        }
        if self.points_per_centerline < 2 {
            return Err(Error::invalid("points_per_centerline must be >= 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if !(self.bundle_separation >= 0.0 && self.bundle_separation.is_finite()) {
            return Err(Error::invalid("bundle_separation must be finite and >= 0"));
        }
        for (name, p) in [
            ("flip_fraction", self.flip_fraction),
            ("outlier_fraction", self.outlier_fraction),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn bundle_fiber_count(&self) -> usize {
        self.n_bundles * self.fibers_per_bundle
    }

    pub fn outlier_count(&self) -> usize {
        // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
        (self.outlier_fraction * self.bundle_fiber_count() as f64 + 1e-9).floor() as usize
    }
}

struct Centerline {
    points: Vec<Point>,
    dense: Vec<Point>,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(&v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn arc(center: Point, radius: f64, u: [f64; 3], v: [f64; 3], theta0: f64, span: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let th = theta0 + span * i as f64 / (n - 1) as f64;
            let (s, c) = th.sin_cos();
            [
                center[0] + radius * (c * u[0] + s * v[0]),
                center[1] + radius * (c * u[1] + s * v[1]),
                center[2] + radius * (c * u[2] + s * v[2]),
            ]
        })
        .collect()
}

fn random_arc(rng: &mut ChaCha8Rng, n_points: usize) -> Centerline {
    let center = [
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
    ];
    let radius: f64 = rng.random_range(35.0..60.0);
    let length: f64 = rng.random_range(60.0..100.0);
    let u = unit_vector(rng);
    let w = unit_vector(rng);
    let mut v = [
        w[0] - dot(&w, &u) * u[0],
        w[1] - dot(&w, &u) * u[1],
        w[2] - dot(&w, &u) * u[2],
    ];
    let vn = norm(&v).max(1e-12);
    v = [v[0] / vn, v[1] / vn, v[2] / vn];
    let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
    let span = length / radius;
    let n_dense = (length / DENSE_SPACING).ceil() as usize + 1;
    Centerline {
        points: arc(center, radius, u, v, theta0, span, n_points),
        dense: arc(center, radius, u, v, theta0, span, n_dense),
    }
}

fn min_distance(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .flat_map(|p| b.iter().map(move |q| dist(p, q)))
        .fold(f64::INFINITY, f64::min)
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    c
}

/// Tangent of a polyline at point `i` by central differences.
fn tangent(points: &[Point], i: usize) -> [f64; 3] {
    let a = points[i.saturating_sub(1)];
    let b = points[(i + 1).min(points.len() - 1)];
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let n = norm(&d);
    if n > 0.0 {
        [d[0] / n, d[1] / n, d[2] / n]
    } else {
        [0.0; 3]
    }
}

/// Displaces a centerline by a smooth offset interpolated between two
/// random endpoint offsets, keeping only the component perpendicular to the
/// local tangent.
fn jitter(points: &[Point], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let start = [noise.sample(rng), noise.sample(rng), noise.sample(rng)];
    let end = [noise.sample(rng), noise.sample(rng), noise.sample(rng)];
    let n = points.len();
    (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            let o = [
                (1.0 - s) * start[0] + s * end[0],
                (1.0 - s) * start[1] + s * end[1],
                (1.0 - s) * start[2] + s * end[2],
            ];
            let t = tangent(points, i);
            let along = dot(&o, &t);
            let p = points[i];
            [
                p[0] + (o[0] - along * t[0]),
                p[1] + (o[1] - along * t[1]),
                p[2] + (o[2] - along * t[2]),
            ]
        })
        .collect()
}

/// Rodrigues rotation of `points` about their centroid.
fn rotate(points: &[Point], axis: [f64; 3], angle: f64) -> Vec<Point> {
    let c = centroid(points);
    let (s, co) = angle.sin_cos();
    points
        .iter()
        .map(|p| {
            let r = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let kxr = [
                axis[1] * r[2] - axis[2] * r[1],
                axis[2] * r[0] - axis[0] * r[2],
                axis[0] * r[1] - axis[1] * r[0],
            ];
            let kdr = dot(&axis, &r);
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = c[k] + r[k] * co + kxr[k] * s + axis[k] * kdr * (1.0 - co);
            }
            out
        })
        .collect()
}

fn random_regions(rng: &mut ChaCha8Rng) -> BTreeSet<u32> {
    let size = rng.random_range(2..=4);
    let mut set = BTreeSet::new();
    while set.len() < size {
        set.insert(rng.random_range(1..=REGION_POOL));
    }
    set
}

fn noisy_regions(base: &BTreeSet<u32>, p: f64, rng: &mut ChaCha8Rng) -> BTreeSet<u32> {
    let mut out: BTreeSet<u32> = base.iter().copied().filter(|_| !rng.random_bool(p)).collect();
    if out.is_empty() {
        out.insert(*base.iter().next().expect("bundle region sets are nonempty"));
    }
    if rng.random_bool(p) {
        out.insert(rng.random_range(1..=REGION_POOL));
    }
    out
}

fn noisy_parcel(base: u32, p: f64, rng: &mut ChaCha8Rng) -> u32 {
    if rng.random_bool(p) {
        rng.random_range(UNLABELED..=PARCEL_POOL)
    } else {
        base
    }
}

/// Generates a deterministic synthetic tractogram.
///
/// Fibers come bundle by bundle, followed by the outliers. Truth labels are
/// bundle indices, with [`OUTLIER_TRUTH`] marking outliers.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Tractogram> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::invalid(format!("noise_sigma: {e}")))?;
    let sep = spec.bundle_separation;

    let mut centerlines: Vec<Centerline> = Vec::with_capacity(spec.n_bundles);
    for b in 0..spec.n_bundles {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = random_arc(&mut rng, spec.points_per_centerline);
            if centerlines
                .iter()
                .all(|c| min_distance(&c.dense, &cand.dense) >= sep + DENSE_SPACING)
            {
                placed = Some(cand);
                break;
            }
        }
        let cand = placed.ok_or_else(|| {
            Error::invalid(format!(
                "could not place bundle {b} at separation {sep} mm; reduce n_bundles or bundle_separation"
            ))
        })?;
        centerlines.push(cand);
    }

    let mut region_sets: Vec<BTreeSet<u32>> = Vec::with_capacity(spec.n_bundles);
    while region_sets.len() < spec.n_bundles {
        let s = random_regions(&mut rng);
        if !region_sets.contains(&s) {
            region_sets.push(s);
        }
    }
    let mut parcel_pairs: Vec<[u32; 2]> = Vec::with_capacity(spec.n_bundles);
    while parcel_pairs.len() < spec.n_bundles {
        let a = rng.random_range(1..=PARCEL_POOL);
        let b = rng.random_range(1..=PARCEL_POOL);
        if a != b && !parcel_pairs.iter().any(|p| (p[0] == a && p[1] == b) || (p[0] == b && p[1] == a)) {
            parcel_pairs.push([a, b]);
        }
    }

    let total = spec.bundle_fiber_count() + spec.outlier_count();
    let mut fibers = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);

    for (b, line) in centerlines.iter().enumerate() {
        for _ in 0..spec.fibers_per_bundle {
            let points = jitter(&line.points, &noise, &mut rng);
            let regions = noisy_regions(&region_sets[b], spec.label_noise, &mut rng);
            let parcels = [
                noisy_parcel(parcel_pairs[b][0], spec.label_noise, &mut rng),
                noisy_parcel(parcel_pairs[b][1], spec.label_noise, &mut rng),
            ];
            let fiber = Fiber {
                points,
                region_set: regions,
                endpoint_parcels: parcels,
                source_id: None,
            };
            fibers.push(fiber);
            truth.push(b as i64);
        }
    }

    let all_dense: Vec<Point> = centerlines.iter().flat_map(|c| c.dense.iter().copied()).collect();
    let clearance = 3.0 * sep;
    for _ in 0..spec.outlier_count() {
        // Independent hosts and directions keep outliers from forming a clump
        // of their own.
        let host = &centerlines[rng.random_range(0..spec.n_bundles)];
        let axis = unit_vector(&mut rng);
        let angle = rng.random_range(0.5..1.5);
        let shape = rotate(&host.points, axis, angle);
        let dir = unit_vector(&mut rng);

        let base = jitter(&shape, &noise, &mut rng);
        // Walk away from the host and stop at the first clear position, so
        // outliers sit just beyond the clearance instead of far outside.
        let mut shift = 0.0;
        let points = loop {
            let moved: Vec<Point> = base
                .iter()
                .map(|p| [p[0] + shift * dir[0], p[1] + shift * dir[1], p[2] + shift * dir[2]])
                .collect();
            if min_distance(&moved, &all_dense) >= clearance + DENSE_SPACING {
                break moved;
            }
            shift += sep.max(1.0) * 0.25;
        };
        fibers.push(Fiber {
            points,
            region_set: random_regions(&mut rng),
            endpoint_parcels: [
                rng.random_range(1..=PARCEL_POOL),
                rng.random_range(1..=PARCEL_POOL),
            ],
            source_id: None,
        });
        truth.push(OUTLIER_TRUTH);
    }

    for (i, f) in fibers.iter_mut().enumerate() {
        if rng.random_bool(spec.flip_fraction) {
            *f = reverse_fiber(f);
        }
        f.source_id = Some(i as u64);
    }

    Tractogram::new(format!("synthetic-{}", spec.seed), fibers).with_truth(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tractogram::write_tractogram;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_bundles: 4,
            fibers_per_bundle: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_tractogram(&a, &mut ba).unwrap();
        write_tractogram(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = generate_synthetic(&SyntheticSpec { seed: 7, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_fibers_equal_centerline() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            flip_fraction: 0.0,
            outlier_fraction: 0.0,
            ..small()
        };
        let t = generate_synthetic(&spec).unwrap();
        let truth = t.truth_labels.as_ref().unwrap();
        for b in 0..spec.n_bundles {
            let members: Vec<&Fiber> = t
                .fibers
                .iter()
                .zip(truth)
                .filter(|(_, &l)| l == b as i64)
                .map(|(f, _)| f)
                .collect();
            assert_eq!(members.len(), spec.fibers_per_bundle);
            assert!(members.iter().all(|f| f.points == members[0].points));
        }
    }

    #[test]
    fn counts_include_outliers() {
        let spec = SyntheticSpec::default();
        let t = generate_synthetic(&spec).unwrap();
        assert_eq!(t.len(), 1050);
        let truth = t.truth_labels.as_ref().unwrap();
        assert_eq!(truth.iter().filter(|&&l| l == OUTLIER_TRUTH).count(), 50);
    }

    #[test]
    fn bundles_are_separated_and_outliers_are_far() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            flip_fraction: 0.0,
            ..SyntheticSpec::default()
        };
        let t = generate_synthetic(&spec).unwrap();
        let truth = t.truth_labels.as_ref().unwrap();
        let first_of = |b: i64| {
            let i = truth.iter().position(|&l| l == b).unwrap();
            &t.fibers[i].points
        };
        for a in 0..spec.n_bundles as i64 {
            for b in a + 1..spec.n_bundles as i64 {
                assert!(min_distance(first_of(a), first_of(b)) >= spec.bundle_separation);
            }
        }
        for (f, &l) in t.fibers.iter().zip(truth) {
            if l == OUTLIER_TRUTH {
                for b in 0..spec.n_bundles as i64 {
                    assert!(min_distance(&f.points, first_of(b)) >= 3.0 * spec.bundle_separation);
                }
            }
        }
    }

    #[test]
    fn synthetic_fibers_survive_length_filter() {
        let t = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert!(t.fibers.iter().all(|f| f.arc_length() >= 40.0));
    }

    #[test]
    fn flip_rate_matches_fraction() {
        let spec = SyntheticSpec {
            fibers_per_bundle: 120,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            flip_fraction: 0.5,
            ..SyntheticSpec::default()
        };
        let t = generate_synthetic(&spec).unwrap();
        let noflip = generate_synthetic(&SyntheticSpec { flip_fraction: 0.0, ..spec.clone() }).unwrap();
        let flipped = t
            .fibers
            .iter()
            .zip(&noflip.fibers)
            .filter(|(a, b)| a.points[0] != b.points[0])
            .count();
        let rate = flipped as f64 / t.len() as f64;
        assert!(t.len() >= 1000);
        assert!((rate - 0.5).abs() <= 0.05, "flip rate {rate}");
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticSpec { n_bundles: 0, ..small() },
            SyntheticSpec { fibers_per_bundle: 0, ..small() },
            SyntheticSpec { flip_fraction: 1.5, ..small() },
            SyntheticSpec { outlier_fraction: -0.1, ..small() },
            SyntheticSpec { noise_sigma: -1.0, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn bundles_get_distinct_labels() {
        let spec = SyntheticSpec { label_noise: 0.0, outlier_fraction: 0.0, ..small() };
        let t = generate_synthetic(&spec).unwrap();
        let truth = t.truth_labels.as_ref().unwrap();
        let mut seen: Vec<BTreeSet<u32>> = Vec::new();
        for b in 0..spec.n_bundles as i64 {
            let i = truth.iter().position(|&l| l == b).unwrap();
            let rs = &t.fibers[i].region_set;
            assert!((2..=4).contains(&rs.len()));
            assert!(!seen.contains(rs));
            seen.push(rs.clone());
        }
    }
}

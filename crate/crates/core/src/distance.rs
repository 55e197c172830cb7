//! Minimum average direct-flip (MDF) distance between streamlines and the
//! bulk computations built on it.

use std::borrow::Cow;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tractogram::{dist, resample_points, Fiber, Point};

/// Which streamline distance to use. Only MDF is implemented; the enum is
/// where mean-closest-point or Hausdorff variants would plug in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    Mdf,
}

fn resampled(points: &[Point], n_p: usize) -> Result<Cow<'_, [Point]>> {
    if points.len() == n_p {
        Ok(Cow::Borrowed(points))
    } else {
        Ok(Cow::Owned(resample_points(points, n_p)?))
    }
}

/// MDF between two point sequences of identical length.
///
/// Terms are summed in mirrored pairs `(k, n-1-k)`, which makes the result
/// bit-identical under swapping the arguments or reversing either one.
pub fn mdf_points(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invariant(format!(
            "mdf needs equal nonzero point counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let direct = paired_sum(n, |k| dist(&a[k], &b[k]));
    let flipped = paired_sum(n, |k| dist(&a[k], &b[n - 1 - k]));
    Ok(direct.min(flipped) / n as f64)
}

fn paired_sum(n: usize, term: impl Fn(usize) -> f64) -> f64 {
    let mut sum = 0.0;
    for k in 0..n / 2 {
        sum += term(k) + term(n - 1 - k);
    }
    if n % 2 == 1 {
        sum += term(n / 2);
    }
    sum
}

/// MDF distance (mm) between two fibers after resampling each to `n_p`
/// points. Fibers already holding `n_p` points are used as they are.
pub fn mdf(a: &Fiber, b: &Fiber, n_p: usize) -> Result<f64> {
    let pa = resampled(&a.points, n_p)?;
    let pb = resampled(&b.points, n_p)?;
    mdf_points(&pa, &pb)
}

/// Dense symmetric matrix of pairwise distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

const MATRIX_MAGIC: &[u8; 8] = b"FCDMAT01";

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        DistanceMatrix {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Writes the little-endian binary dump: magic, `u64` size, then the
    /// row-major entries.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e| Error::io("<distance matrix>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Schema("distance matrix has wrong magic bytes".into()));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(io)?;
        let n = u64::from_le_bytes(buf) as usize;
        let mut values = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            r.read_exact(&mut buf).map_err(io)?;
            values.push(f64::from_le_bytes(buf));
        }
        let m = DistanceMatrix { n, values };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::Schema(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let v = self.get(i, j);
                if !(v.is_finite() && v >= 0.0) || v != self.get(j, i) {
                    return Err(Error::Schema(format!("bad entry at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// All pairwise MDF distances. Each unordered pair is evaluated once and
/// mirrored; rows are computed in parallel but every cell has exactly one
/// writer, so the result is schedule independent.
pub fn pairwise_mdf(fibers: &[Fiber], n_p: usize) -> Result<DistanceMatrix> {
    if fibers.is_empty() {
        return Err(Error::invalid("pairwise_mdf needs at least one fiber"));
    }
    let points: Vec<Cow<'_, [Point]>> = fibers
        .iter()
        .map(|f| resampled(&f.points, n_p))
        .collect::<Result<_>>()?;
    let n = fibers.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| mdf_points(&points[i], &points[j]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut m = DistanceMatrix::zeros(n);
    for (i, row) in upper.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            m.values[i * n + j] = d;
            m.values[j * n + i] = d;
        }
    }
    Ok(m)
}

/// Index of the member with the smallest mean distance to the other
/// members. Ties go to the smallest index.
pub fn medoid_index(m: &DistanceMatrix, members: &[usize]) -> Result<usize> {
    medoid_by(members, |a, b| m.get(a, b))
}

pub(crate) fn medoid_by(members: &[usize], d: impl Fn(usize, usize) -> f64) -> Result<usize> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let (&first, rest) = sorted
        .split_first()
        .ok_or_else(|| Error::invalid("medoid of an empty member set"))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let others = (sorted.len() - 1) as f64;
    let mut best = (f64::INFINITY, first);
    for &i in &sorted {
        let total: f64 = sorted.iter().filter(|&&j| j != i).map(|&j| d(i, j)).sum();
        let mean = total / others;
        if mean < best.0 {
            best = (mean, i);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tractogram::reverse_fiber;
    use proptest::prelude::*;

    fn line(offset: f64, n: usize) -> Fiber {
        Fiber::from_points((0..n).map(|i| [i as f64, offset, 0.0]).collect()).unwrap()
    }

    #[test]
    fn worked_flip_example() {
        let a = Fiber::from_points(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let b = Fiber::from_points(vec![[2.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(mdf(&a, &b, 3).unwrap(), 1.0);
        // Direct pairing: (sqrt(5) + 1 + sqrt(5)) / 3.
        let direct = (2.0 * 5f64.sqrt() + 1.0) / 3.0;
        assert!((direct - 1.8240).abs() < 1e-4);
    }

    #[test]
    fn parallel_offset_is_exact() {
        for d in [0.5, 1.0, 3.25, 10.0] {
            assert_eq!(mdf(&line(0.0, 6), &line(d, 6), 6).unwrap(), d);
        }
    }

    #[test]
    fn identity_and_flip() {
        let f = Fiber::from_points(vec![[0.0, 1.0, 2.0], [3.0, 5.0, 1.0], [4.0, 4.0, 4.0]]).unwrap();
        assert_eq!(mdf(&f, &f, 5).unwrap(), 0.0);
        assert!(mdf(&f, &reverse_fiber(&f), 5).unwrap() <= 1e-12);
        assert_eq!(mdf(&f, &reverse_fiber(&f), 3).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_counts_are_an_invariant_error() {
        let a = [[0.0; 3]; 3];
        let b = [[0.0; 3]; 4];
        assert!(matches!(mdf_points(&a, &b), Err(Error::Invariant(_))));
    }

    #[test]
    fn pairwise_matches_single_calls() {
        let fibers = vec![line(0.0, 4), line(2.0, 7), reverse_fiber(&line(5.0, 3))];
        let m = pairwise_mdf(&fibers, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { mdf(&fibers[i], &fibers[j], 5).unwrap() };
                assert!((m.get(i, j) - expect).abs() <= 1e-12);
            }
        }
        let single = pairwise_mdf(&fibers[..1], 5).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.get(0, 0), 0.0);
        assert!(pairwise_mdf(&[], 5).is_err());
    }

    #[test]
    fn permutation_permutes_matrix() {
        let fibers = vec![line(0.0, 4), line(2.0, 7), line(5.0, 3), line(-1.0, 5)];
        let perm = [2, 0, 3, 1];
        let permuted: Vec<Fiber> = perm.iter().map(|&i| fibers[i].clone()).collect();
        let m = pairwise_mdf(&fibers, 6).unwrap();
        let p = pairwise_mdf(&permuted, 6).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(p.get(a, b), m.get(perm[a], perm[b]));
            }
        }
    }

    #[test]
    fn medoid_rules() {
        let fibers = vec![line(0.0, 5), line(1.0, 5), line(2.0, 5)];
        let m = pairwise_mdf(&fibers, 5).unwrap();
        assert_eq!(medoid_index(&m, &[0, 1, 2]).unwrap(), 1);
        assert_eq!(medoid_index(&m, &[2]).unwrap(), 2);
        assert_eq!(medoid_index(&m, &[2, 0]).unwrap(), 0);
        assert!(medoid_index(&m, &[]).is_err());
    }

    #[test]
    fn matrix_dump_round_trips() {
        let fibers = vec![line(0.0, 4), line(2.0, 7), line(5.0, 3)];
        let m = pairwise_mdf(&fibers, 5).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"FCDMAT01");
        assert_eq!(buf.len(), 16 + 9 * 8);
        assert_eq!(DistanceMatrix::read_from(buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(DistanceMatrix::read_from(buf.as_slice()).is_err());
    }

    fn fiber_strategy() -> impl Strategy<Value = Fiber> {
        prop::collection::vec(prop::array::uniform3(-40.0f64..40.0), 2..20)
            .prop_map(|p| Fiber::from_points(p).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric_and_flip_invariant(a in fiber_strategy(), b in fiber_strategy(), n_p in 2usize..16) {
            let ab = mdf(&a, &b, n_p).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, mdf(&b, &a, n_p).unwrap());
            prop_assert!((ab - mdf(&reverse_fiber(&a), &b, n_p).unwrap()).abs() <= 1e-12);
            prop_assert!((ab - mdf(&a, &reverse_fiber(&b), n_p).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn flip_invariance_is_bitwise_on_equal_counts(a in fiber_strategy()) {
            let n = a.points.len();
            let b = Fiber::from_points(a.points.iter().map(|p| [p[1], p[2] + 1.0, p[0]]).collect()).unwrap();
            let ab = mdf_points(&a.points, &b.points).unwrap();
            prop_assert_eq!(ab, mdf_points(&reverse_fiber(&a).points, &b.points).unwrap());
            prop_assert_eq!(ab, mdf_points(&a.points, &reverse_fiber(&b).points).unwrap());
            prop_assert_eq!(ab, mdf_points(&b.points, &a.points).unwrap());
            prop_assert_eq!(mdf_points(&a.points, &a.points).unwrap(), 0.0);
            prop_assert_eq!(n, b.points.len());
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static neighborhood graph over the points of a resampled fiber: each
/// point connects to the `k` points nearest to it by position along the
/// fiber.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainGraph {
    n_p: usize,
    k: usize,
    /// `neighbors[i]` in ascending index order.
    neighbors: Vec<Vec<usize>>,
}

impl ChainGraph {
    /// Neighbors of `i` are the `k` indices `j != i` with the smallest
    /// `|i - j|`. When both `i - d` and `i + d` compete for the last free
    /// slot, the smaller index wins.
    pub fn build(n_p: usize, k: usize) -> Result<Self> {
        if k == 0 || n_p <= k {
            return Err(Error::invalid(format!(
                "chain graph needs 1 <= k < n_p, got n_p={n_p}, k={k}"
            )));
        }
        let neighbors = (0..n_p)
            .map(|i| {
                let mut candidates: Vec<usize> = (0..n_p).filter(|&j| j != i).collect();
                candidates.sort_by_key(|&j| (i.abs_diff(j), j));
                let mut chosen = candidates[..k].to_vec();
                chosen.sort_unstable();
                chosen
            })
            .collect();
        Ok(ChainGraph { n_p, k, neighbors })
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Whether mapping `i -> n_p - 1 - i` carries every neighbor list onto
    /// the list of the mirrored point. This holds for every even `k` and for
    /// the complete graph; odd `k` breaks it at interior points.
    pub fn is_reversal_symmetric(&self) -> bool {
        let m = self.n_p - 1;
        (0..self.n_p).all(|i| {
            let mut mirrored: Vec<usize> = self.neighbors[i].iter().map(|&j| m - j).collect();
            mirrored.sort_unstable();
            mirrored == self.neighbors[m - i]
        })
    }
}

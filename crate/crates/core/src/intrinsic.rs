//! Prototype-guided k-nearest-neighbour exploration bonus.
//!
//! Each prototype picks the candidate projection it is most similar to;
//! picks are appended to a FIFO set `Q`. The bonus for a projection is the
//! Euclidean distance to its k-th nearest member of `Q`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::ndmath::{l2_normalize_rows, Scalar, Tensor};

/// FIFO set of latent vectors tagged with the id of the sample they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    capacity: usize,
    entries: VecDeque<(u64, Vec<f64>)>,
}

impl ProjectionSet {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.entries.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn push(&mut self, id: u64, z: Vec<f64>) -> Result<()> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("projection pushed into Q".into()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((id, z));
        Ok(())
    }
}

/// Index of the candidate each prototype selects (highest cosine
/// similarity, lowest index on ties).
pub fn select_candidates<T: Scalar>(candidates: &Tensor<T>, prototypes_normalized: &Tensor<T>) -> Result<Vec<usize>> {
    if candidates.is_empty() || candidates.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let zn = l2_normalize_rows(candidates)?;
    let d = zn.row_len();
    if prototypes_normalized.row_len() != d {
        return Err(Error::shape(format!(
            "candidate width {d} vs prototype width {}",
            prototypes_normalized.row_len()
        )));
    }
    let picks = (0..prototypes_normalized.rows())
        .map(|j| {
            let c = prototypes_normalized.row(j);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for i in 0..zn.rows() {
                let s: f64 = zn.row(i).iter().zip(c).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            best
        })
        .collect();
    Ok(picks)
}

/// Append the candidate chosen by every prototype. `ids[i]` tags row `i`.
pub fn update_q<T: Scalar>(
    q: &mut ProjectionSet,
    candidates: &Tensor<T>,
    ids: &[u64],
    prototypes_normalized: &Tensor<T>,
) -> Result<()> {
    if candidates.is_empty() || ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if ids.len() != candidates.rows() {
        return Err(Error::shape(format!("{} ids for {} candidates", ids.len(), candidates.rows())));
    }
    for i in select_candidates(candidates, prototypes_normalized)? {
        let z = candidates.row(i).iter().map(|x| x.as_f64()).collect();
        q.push(ids[i], z)?;
    }
    Ok(())
}

/// Distance from `z` to its k-th nearest member of `q`, skipping members
/// whose id equals `exclude`.
pub fn knn_reward(z: &[f64], q: &ProjectionSet, k: usize, exclude: Option<u64>) -> Result<f64> {
    let mut dists: Vec<f64> = q
        .iter()
        .filter(|(id, _)| Some(*id) != exclude)
        .map(|(_, v)| sq_dist(z, v))
        .collect();
    if k == 0 || dists.len() < k {
        return Err(Error::InsufficientNeighbors {
            k,
            available: dists.len(),
        });
    }
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(kth.sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `r + beta * r_hat`.
pub fn augment_reward(reward: f64, bonus: f64, beta: f64) -> f64 {
    reward + beta * bonus
}

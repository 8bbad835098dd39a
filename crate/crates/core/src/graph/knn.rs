//! Exact k-nearest-neighbour search in the 5-d pixel feature space.
//!
//! Ordering is by `(squared distance, pixel index)`, so ties always resolve
//! to the lower index and both strategies return identical lists.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::PixelFeatures;
use crate::error::{Error, Result};

/// Brute force is used up to this many pixels (and always when `eta == 0`).
pub const BRUTE_FORCE_LIMIT: usize = 16_384;

/// `k` neighbours per pixel, nearest first, stored flat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<u32>,
}

impl Neighbors {
    pub fn of(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn n_nodes(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    j: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.j.cmp(&other.j))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::contract(format!(
            "k must satisfy 1 <= k < n_nodes, got k={k} for {n} nodes"
        )));
    }
    Ok(())
}

/// Exact KNN, choosing brute force or the grid search by size.
pub fn knn_search(features: &PixelFeatures, k: usize) -> Result<Neighbors> {
    if features.len() <= BRUTE_FORCE_LIMIT || features.eta == 0.0 {
        knn_brute_force(features, k)
    } else {
        knn_grid(features, k)
    }
}

/// All-pairs search with partial selection per row.
pub fn knn_brute_force(features: &PixelFeatures, k: usize) -> Result<Neighbors> {
    let n = features.len();
    check_k(n, k)?;
    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |cands: &mut Vec<Cand>, i| {
            cands.clear();
            cands.extend((0..n).filter(|&j| j != i).map(|j| Cand {
                d2: features.dist2(i, j),
                j: j as u32,
            }));
            cands.select_nth_unstable(k - 1);
            let best = &mut cands[..k];
            best.sort_unstable();
            best.iter().map(|c| c.j).collect()
        })
        .collect();
    Ok(Neighbors {
        k,
        indices: rows.concat(),
    })
}

/// Exact search that visits pixels in growing square rings around the query
/// and stops once the spatial part of the distance alone rules out the
/// remaining rings.
pub fn knn_grid(features: &PixelFeatures, k: usize) -> Result<Neighbors> {
    let n = features.len();
    check_k(n, k)?;
    let (w, h) = (features.width, features.height);
    let step = features.eta / w.max(h) as f64;
    let max_ring = w.max(h);

    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map_init(BinaryHeap::<Cand>::new, |heap, i| {
            heap.clear();
            let (x0, y0) = ((i % w) as isize, (i / w) as isize);
            let visit = |x: isize, y: isize, heap: &mut BinaryHeap<Cand>| {
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    return;
                }
                let j = y as usize * w + x as usize;
                if j == i {
                    return;
                }
                let c = Cand {
                    d2: features.dist2(i, j),
                    j: j as u32,
                };
                if heap.len() < k {
                    heap.push(c);
                } else if c < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(c);
                }
            };
            for r in 0..=max_ring as isize {
                if heap.len() == k {
                    // Every pixel on ring r is at least r grid steps away on one axis.
                    let lb = step * r as f64;
                    let lb2 = lb * lb * (1.0 - 1e-12);
                    if lb2 > heap.peek().expect("heap is full").d2 {
                        break;
                    }
                }
                if r == 0 {
                    visit(x0, y0, heap);
                    continue;
                }
                for x in x0 - r..=x0 + r {
                    visit(x, y0 - r, heap);
                    visit(x, y0 + r, heap);
                }
                for y in y0 - r + 1..y0 + r {
                    visit(x0 - r, y, heap);
                    visit(x0 + r, y, heap);
                }
            }
            let mut best = std::mem::take(heap).into_sorted_vec();
            let out = best.iter().map(|c| c.j).collect();
            best.clear();
            *heap = BinaryHeap::from(best);
            out
        })
        .collect();
    Ok(Neighbors {
        k,
        indices: rows.concat(),
    })
}

//! Sparse KNN-matting affinity graphs over image pixels and their
//! Laplacians.
//!
//! Each pixel becomes a node with feature `(r, g, b, d_x, d_y)`, where the
//! spatial coordinates are scaled by `eta / max(h, w)`. A node connects to
//! its `k` nearest neighbours in that space with weight
//! `clamp(1 - |phi(i) - phi(j)|, 0, 1)`; the directed KNN relation is then
//! symmetrized by averaging. All graph arithmetic is done in `f64`.

mod knn;

use std::io::Write;

pub use knn::{knn_brute_force, knn_grid, knn_search, Neighbors, BRUTE_FORCE_LIMIT};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Feature vector of one pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelFeature {
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub d_x: f64,
    pub d_y: f64,
}

impl PixelFeature {
    pub fn to_array(self) -> [f64; 5] {
        [self.r, self.g, self.b, self.d_x, self.d_y]
    }

    #[inline]
    pub fn dist2(&self, other: &Self) -> f64 {
        let d = [
            self.r - other.r,
            self.g - other.g,
            self.b - other.b,
            self.d_x - other.d_x,
            self.d_y - other.d_y,
        ];
        d.iter().map(|v| v * v).sum()
    }
}

/// Features of all pixels of one image, row-major (`i = y * width + x`).
#[derive(Clone, Debug)]
pub struct PixelFeatures {
    pub width: usize,
    pub height: usize,
    pub eta: f64,
    pub data: Vec<PixelFeature>,
}

impl PixelFeatures {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dist2(&self, i: usize, j: usize) -> f64 {
        self.data[i].dist2(&self.data[j])
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist2(i, j).sqrt()
    }
}

/// Builds per-pixel features from a `[3, H, W]` image with values in `[0, 1]`.
pub fn extract_features<T: Real>(image: &Tensor<T>, eta: f64) -> Result<PixelFeatures> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::Dimension(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!("eta must be finite and >= 0, got {eta}")));
    }
    let px = image.data();
    if let Some(bad) = px.iter().find(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
        return Err(Error::InputRange(format!(
            "image values must lie in [0, 1], found {bad}"
        )));
    }
    let plane = h * w;
    let scale = eta / h.max(w) as f64;
    let data = (0..plane)
        .map(|i| PixelFeature {
            r: px[i].f64(),
            g: px[plane + i].f64(),
            b: px[2 * plane + i].f64(),
            d_x: scale * (i % w) as f64,
            d_y: scale * (i / w) as f64,
        })
        .collect();
    Ok(PixelFeatures {
        width: w,
        height: h,
        eta,
        data,
    })
}

/// Affinity weight for a feature distance.
pub fn knn_weight(distance: f64) -> f64 {
    (1.0 - distance).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    Affinity,
    Laplacian,
}

/// Square sparse matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    kind: GraphKind,
}

impl SparseGraph {
    /// Builds from `(row, col, value)` triplets that are sorted by
    /// `(row, col)` and free of duplicates.
    fn from_sorted(n: usize, triplets: &[(usize, usize, f64)], kind: GraphKind) -> Self {
        let mut row_offsets = vec![0usize; n + 1];
        for &(i, _, _) in triplets {
            row_offsets[i + 1] += 1;
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        Self {
            n,
            row_offsets,
            col_indices: triplets.iter().map(|t| t.1).collect(),
            values: triplets.iter().map(|t| t.2).collect(),
            kind,
        }
    }

    /// Builds from arbitrary triplets, summing duplicates.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>, kind: GraphKind) -> Result<Self> {
        if let Some(t) = triplets.iter().find(|t| t.0 >= n || t.1 >= n) {
            return Err(Error::contract(format!("entry ({}, {}) outside {n}x{n}", t.0, t.1)));
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for t in triplets {
            match merged.last_mut() {
                Some(last) if last.0 == t.0 && last.1 == t.1 => last.2 += t.2,
                _ => merged.push(t),
            }
        }
        Ok(Self::from_sorted(n, &merged, kind))
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stored `(col, value)` pairs of one row, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        match self.col_indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    /// Number of undirected edges (stored off-diagonal pairs).
    pub fn edge_count(&self) -> usize {
        (0..self.n).map(|i| self.row(i).filter(|&(j, v)| j > i && v != 0.0).count()).sum()
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok((0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::contract(format!(
                "vector of length {len} for a graph with {} nodes",
                self.n
            )));
        }
        Ok(())
    }

    fn require(&self, kind: GraphKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::contract(format!("expected a {kind:?} matrix, got {:?}", self.kind)));
        }
        Ok(())
    }

    /// `y^T L y` through a sparse matrix-vector product.
    pub fn quadratic_form(&self, y: &[f64]) -> Result<f64> {
        self.require(GraphKind::Laplacian)?;
        let ly = self.matvec(y)?;
        Ok(y.iter().zip(&ly).map(|(a, b)| a * b).sum())
    }

    /// `sum_{i<j} w(i, j) (y_i - y_j)^2` over the stored edges; works for
    /// either kind and equals [`quadratic_form`](Self::quadratic_form) of the
    /// matching Laplacian.
    pub fn quadratic_form_edges(&self, y: &[f64]) -> Result<f64> {
        self.check_len(y.len())?;
        let sign = match self.kind {
            GraphKind::Affinity => 1.0,
            GraphKind::Laplacian => -1.0,
        };
        let mut total = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j > i {
                    let d = y[i] - y[j];
                    total += sign * v * d * d;
                }
            }
        }
        Ok(total)
    }

    /// Gradient of `y^T L y`, i.e. `2 L y`.
    pub fn quadratic_form_grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.require(GraphKind::Laplacian)?;
        Ok(self.matvec(y)?.into_iter().map(|v| 2.0 * v).collect())
    }

    /// Largest Gershgorin disc bound on the spectrum.
    pub fn gershgorin_bound(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Connected components over nonzero off-diagonal entries.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut count = self.n;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j != i && v != 0.0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a] = b;
                        count -= 1;
                    }
                }
            }
        }
        count
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }

    /// MatrixMarket coordinate dump (1-based, all stored entries).
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        let kind = match self.kind {
            GraphKind::Affinity => "affinity",
            GraphKind::Laplacian => "laplacian",
        };
        writeln!(out, "% {kind}")?;
        writeln!(out, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(out, "{} {} {v:e}", i + 1, j + 1)?;
            }
        }
        Ok(())
    }
}

/// Symmetrized KNN affinity `W = (A + A^T) / 2`, where `A` holds the directed
/// KNN weights. Zero weights are not stored.
pub fn build_affinity(features: &PixelFeatures, neighbors: &Neighbors) -> Result<SparseGraph> {
    let n = features.len();
    if neighbors.n_nodes() != n {
        return Err(Error::contract(format!(
            "neighbour lists cover {} nodes, features {n}",
            neighbors.n_nodes()
        )));
    }
    // Directed rows sorted by column for lookup of the reverse edge.
    let directed: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = neighbors
                .of(i)
                .iter()
                .map(|&j| (j as usize, knn_weight(features.dist(i, j as usize))))
                .collect();
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    let lookup = |i: usize, j: usize| -> f64 {
        directed[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(0.0, |k| directed[i][k].1)
    };
    let mut triplets = Vec::with_capacity(2 * n * neighbors.k);
    for (i, row) in directed.iter().enumerate() {
        for &(j, w_ij) in row {
            let v = (w_ij + lookup(j, i)) * 0.5;
            if v != 0.0 {
                triplets.push((i, j, v));
                triplets.push((j, i, v));
            }
        }
    }
    triplets.sort_by_key(|t| (t.0, t.1));
    triplets.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    Ok(SparseGraph::from_sorted(n, &triplets, GraphKind::Affinity))
}

/// `L = D - W` with an explicit diagonal on every row.
pub fn build_laplacian(w: &SparseGraph) -> Result<SparseGraph> {
    w.require(GraphKind::Affinity)?;
    if !w.is_symmetric() {
        return Err(Error::contract("affinity matrix is not symmetric"));
    }
    let mut triplets = Vec::with_capacity(w.nnz() + w.n);
    for i in 0..w.n {
        let degree: f64 = w.row(i).filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
        let mut placed = false;
        for (j, v) in w.row(i) {
            if j == i {
                continue;
            }
            if !placed && j > i {
                triplets.push((i, i, degree));
                placed = true;
            }
            triplets.push((i, j, -v));
        }
        if !placed {
            triplets.push((i, i, degree));
        }
    }
    Ok(SparseGraph::from_sorted(w.n, &triplets, GraphKind::Laplacian))
}

/// Graph construction parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub eta: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 10, eta: 1.0 }
    }
}

/// Features, KNN, affinity and Laplacian for a `[3, H, W]` image.
pub fn image_laplacian<T: Real>(image: &Tensor<T>, cfg: GraphConfig) -> Result<SparseGraph> {
    let feats = extract_features(image, cfg.eta)?;
    let nbrs = knn_search(&feats, cfg.k)?;
    build_laplacian(&build_affinity(&feats, &nbrs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor::from_vec([3, h, w], data).unwrap()
    }

    #[test]
    fn features_of_black_and_white_pixels() {
        let black = extract_features(&img(4, 4, |_, _, _| 0.0), 1.0).unwrap();
        assert_eq!(black.data[0].to_array(), [0.0; 5]);
        let white = extract_features(&img(4, 4, |_, _, _| 1.0), 1.0).unwrap();
        assert_eq!(white.data[3].to_array(), [1.0, 1.0, 1.0, 0.75, 0.0]);
    }

    #[test]
    fn eta_zero_leaves_only_color() {
        let f = extract_features(&img(3, 5, |c, y, x| (c + y + x) as f64 / 10.0), 0.0).unwrap();
        assert!(f.data.iter().all(|p| p.d_x == 0.0 && p.d_y == 0.0));
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let e = extract_features(&img(2, 2, |_, _, _| 1.5), 1.0).unwrap_err();
        assert!(matches!(e, Error::InputRange(_)));
    }

    #[test]
    fn two_pixels_are_each_others_neighbor() {
        let f = extract_features(&img(1, 2, |c, _, x| (c * x) as f64 * 0.1), 1.0).unwrap();
        let n = knn_search(&f, 1).unwrap();
        assert_eq!(n.of(0), &[1]);
        assert_eq!(n.of(1), &[0]);
        assert!(knn_search(&f, 2).is_err());
    }

    #[test]
    fn uniform_image_neighbors_are_spatial_with_low_index_ties() {
        let f = extract_features(&img(3, 3, |_, _, _| 0.5), 1.0).unwrap();
        let n = knn_search(&f, 1).unwrap();
        // center (4) has four equidistant neighbours; lowest index is 1
        assert_eq!(n.of(4), &[1]);
        assert_eq!(n.of(0), &[1]);
        assert_eq!(n.of(8), &[5]);
    }

    #[test]
    fn weight_formula_and_clamp() {
        assert_eq!(knn_weight(0.0), 1.0);
        assert_eq!(knn_weight(0.25), 0.75);
        assert_eq!(knn_weight(1.3), 0.0);
    }

    #[test]
    fn identical_pixels_have_unit_affinity() {
        let f = extract_features(&img(1, 2, |_, _, _| 0.3), 0.0).unwrap();
        let w = build_affinity(&f, &knn_search(&f, 1).unwrap()).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert_eq!(w.get(1, 0), 1.0);
    }

    #[test]
    fn two_node_laplacian() {
        let w = SparseGraph::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 1.0)], GraphKind::Affinity).unwrap();
        let l = build_laplacian(&w).unwrap();
        assert_eq!(l.to_dense(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(l.quadratic_form(&[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(l.quadratic_form_grad(&[1.0, 0.0]).unwrap(), vec![2.0, -2.0]);
        assert_eq!(l.quadratic_form(&[3.0, 3.0]).unwrap(), 0.0);
        assert!(l.quadratic_form(&[1.0]).is_err());
    }

    #[test]
    fn asymmetric_affinity_is_rejected() {
        let w = SparseGraph::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 0.5)], GraphKind::Affinity).unwrap();
        assert!(matches!(build_laplacian(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn isolated_nodes_keep_a_zero_diagonal() {
        let w = SparseGraph::from_triplets(3, vec![(0, 2, 0.5), (2, 0, 0.5)], GraphKind::Affinity).unwrap();
        let l = build_laplacian(&w).unwrap();
        assert_eq!(l.nnz(), 5);
        assert_eq!(l.get(1, 1), 0.0);
        assert_eq!(l.component_count(), 2);
    }

    #[test]
    fn matrix_market_dump() {
        let w = SparseGraph::from_triplets(2, vec![(0, 1, 0.5), (1, 0, 0.5)], GraphKind::Affinity).unwrap();
        let mut buf = Vec::new();
        build_laplacian(&w).unwrap().write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[2], "2 2 4");
        assert_eq!(lines[3], "1 1 5e-1");
        assert_eq!(lines[4], "1 2 -5e-1");
    }
}

//! Reference eigensolvers for graph Laplacians.
//!
//! Two independent routes to the smallest eigenpairs: a dense
//! tridiagonalization + QL solver for small graphs, and Lanczos with full
//! reorthogonalization on the shifted operator `cI - L` for larger ones.
//! Both canonicalize eigenvector signs so their output can be compared.

mod tridiag;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::model::EigenMaps;
use crate::tensor::{Real, Tensor};

pub(crate) use tridiag::{symmetric_eigen, tridiagonal_eigen, Dense};

/// Largest graph the dense path accepts.
pub const DENSE_LIMIT: usize = 4096;

/// Ascending eigenvalues with unit-norm eigenvectors.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// `vectors[j]` belongs to `values[j]`.
    pub vectors: Vec<Vec<f64>>,
    /// `|L v_j - lambda_j v_j|_2`.
    pub residuals: Vec<f64>,
    /// False when an iterative solve stopped before every residual met the
    /// tolerance; the pairs are then the best available estimates.
    pub converged: bool,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best * (1.0 + 1e-9) {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn residual(l: &SparseGraph, v: &[f64], lambda: f64) -> Result<f64> {
    let lv = l.matvec(v)?;
    Ok(lv.iter().zip(v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt())
}

fn check_m(l: &SparseGraph, m: usize) -> Result<()> {
    if m == 0 || m > l.n_nodes() {
        return Err(Error::contract(format!(
            "cannot take {m} eigenpairs of a {}-node graph",
            l.n_nodes()
        )));
    }
    Ok(())
}

/// `m` smallest eigenpairs through a full dense decomposition.
pub fn dense_smallest_eigs(l: &SparseGraph, m: usize) -> Result<EigenPairs> {
    check_m(l, m)?;
    let n = l.n_nodes();
    if n > DENSE_LIMIT {
        return Err(Error::contract(format!(
            "{n} nodes exceeds the dense limit of {DENSE_LIMIT}; use lanczos_smallest_eigs"
        )));
    }
    let (vals, vecs) = symmetric_eigen(&Dense { n, a: l.to_dense() })?;
    let mut out = EigenPairs {
        values: Vec::with_capacity(m),
        vectors: Vec::with_capacity(m),
        residuals: Vec::with_capacity(m),
        converged: true,
    };
    for (j, &lambda) in vals.iter().enumerate().take(m) {
        let mut v: Vec<f64> = (0..n).map(|i| vecs.a[i * n + j]).collect();
        canonical_sign(&mut v);
        out.residuals.push(residual(l, &v, lambda)?);
        out.values.push(lambda);
        out.vectors.push(v);
    }
    Ok(out)
}

/// Settings for [`lanczos_smallest_eigs`].
#[derive(Clone, Copy, Debug)]
pub struct LanczosOptions {
    /// Residual tolerance, relative to `max(1, |lambda|)`.
    pub tol: f64,
    /// Krylov dimension cap; defaults to `4 m sqrt(n)`.
    pub max_iter: Option<usize>,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            seed: 0x5eed,
        }
    }
}

fn random_orthogonal(locked: &[Vec<f64>], basis: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        orthogonalize(&mut q, locked, basis);
        let nq = norm(&q);
        if nq > 1e-8 {
            q.iter_mut().for_each(|x| *x /= nq);
            return Some(q);
        }
    }
    None
}

/// Two passes of Gram-Schmidt against both sets.
fn orthogonalize(w: &mut [f64], locked: &[Vec<f64>], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for v in locked.iter().chain(basis) {
            let h = dot(v, w);
            w.iter_mut().zip(v).for_each(|(x, y)| *x -= h * y);
        }
    }
}

/// `m` smallest eigenpairs of a symmetric PSD matrix via Lanczos on
/// `cI - L`, `c` being the Gershgorin bound, with full reorthogonalization.
///
/// A single Krylov sequence sees only one direction of each eigenspace, so
/// a repeated eigenvalue (one zero per connected component, for instance)
/// would be reported once. Converged pairs are therefore locked and the
/// iteration restarted in their orthogonal complement until a fresh run
/// finds nothing below the current `m`-th value.
pub fn lanczos_smallest_eigs(l: &SparseGraph, m: usize, opts: &LanczosOptions) -> Result<EigenPairs> {
    check_m(l, m)?;
    let n = l.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut locked = EigenPairs {
        values: Vec::new(),
        vectors: Vec::new(),
        residuals: Vec::new(),
        converged: true,
    };
    let mut runs = 0;
    while locked.len() < n {
        let want = m.min(n - locked.len());
        let run = lanczos_run(l, &locked.vectors, want, opts, &mut rng)?;
        runs += 1;
        let cutoff = if locked.len() >= m {
            let t = locked.values[m - 1];
            t - 1e-10 * t.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        let mut added = 0;
        for j in 0..run.len() {
            if run.values[j] < cutoff {
                locked.values.push(run.values[j]);
                locked.vectors.push(run.vectors[j].clone());
                locked.residuals.push(run.residuals[j]);
                added += 1;
            }
        }
        locked.converged &= run.converged;
        if added == 0 || !run.converged {
            break;
        }
        // keep the m smallest; anything above cannot enter the answer
        let mut order: Vec<usize> = (0..locked.len()).collect();
        order.sort_by(|&a, &b| locked.values[a].total_cmp(&locked.values[b]));
        order.truncate(m);
        locked = EigenPairs {
            values: order.iter().map(|&i| locked.values[i]).collect(),
            vectors: order.iter().map(|&i| locked.vectors[i].clone()).collect(),
            residuals: order.iter().map(|&i| locked.residuals[i]).collect(),
            converged: locked.converged,
        };
    }
    log::debug!("lanczos locked {} pairs in {runs} runs", locked.len());
    if locked.len() < m {
        locked.converged = false;
    }
    if !locked.converged {
        log::warn!(
            "lanczos stopped with max residual {:e}",
            locked.residuals.iter().copied().fold(0.0, f64::max)
        );
    }
    Ok(locked)
}

/// One Lanczos sequence in the orthogonal complement of `locked`.
fn lanczos_run(
    l: &SparseGraph,
    locked: &[Vec<f64>],
    m: usize,
    opts: &LanczosOptions,
    rng: &mut ChaCha8Rng,
) -> Result<EigenPairs> {
    let n = l.n_nodes();
    let room = n - locked.len();
    let c = l.gershgorin_bound().max(1.0);
    let default_iter = (4.0 * m as f64 * (n as f64).sqrt()).ceil() as usize;
    let max_iter = opts.max_iter.unwrap_or(default_iter).max(m).min(room);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_iter);
    let mut alpha: Vec<f64> = Vec::with_capacity(max_iter);
    let mut beta: Vec<f64> = Vec::with_capacity(max_iter);
    let mut q = random_orthogonal(locked, &basis, n, rng)
        .ok_or_else(|| Error::NotConverged("could not draw a start vector".into()))?;

    let mut ritz: Option<(Vec<f64>, Dense)> = None;
    loop {
        let lq = l.matvec(&q)?;
        let mut w: Vec<f64> = q.iter().zip(&lq).map(|(a, b)| c * a - b).collect();
        let a = dot(&q, &w);
        w.iter_mut().zip(&q).for_each(|(x, y)| *x -= a * y);
        if let (Some(prev), Some(&b)) = (basis.last(), beta.last()) {
            w.iter_mut().zip(prev).for_each(|(x, y)| *x -= b * y);
        }
        basis.push(q);
        alpha.push(a);
        orthogonalize(&mut w, locked, &basis);
        let b = norm(&w);
        let j = basis.len();

        if j >= m {
            let (theta, s) = tridiagonal_eigen(&alpha, &beta)?;
            let done = (j - m..j).all(|idx| {
                let est = (b * s.a[(j - 1) * j + idx]).abs();
                est <= opts.tol * (c - theta[idx]).abs().max(1.0)
            });
            ritz = Some((theta, s));
            if done || j >= max_iter {
                break;
            }
        }
        if b <= 1e-10 * c {
            // Invariant subspace found; continue in its orthogonal complement.
            match random_orthogonal(locked, &basis, n, rng) {
                Some(next) if j < room => {
                    beta.push(0.0);
                    q = next;
                }
                _ => break,
            }
        } else {
            beta.push(b);
            q = w.into_iter().map(|x| x / b).collect();
        }
        ritz = None;
    }

    let j = basis.len();
    let (theta, s) = match ritz {
        Some(r) => r,
        None => tridiagonal_eigen(&alpha, &beta)?,
    };
    let mut out = EigenPairs {
        values: Vec::with_capacity(m),
        vectors: Vec::with_capacity(m),
        residuals: Vec::with_capacity(m),
        converged: true,
    };
    for idx in (j.saturating_sub(m)..j).rev() {
        let lambda = c - theta[idx];
        let mut u = vec![0.0; n];
        for (k, qk) in basis.iter().enumerate() {
            let coef = s.a[k * j + idx];
            u.iter_mut().zip(qk).for_each(|(x, y)| *x += coef * y);
        }
        let nu = norm(&u);
        u.iter_mut().for_each(|x| *x /= nu);
        canonical_sign(&mut u);
        let r = residual(l, &u, lambda)?;
        out.converged &= r <= opts.tol * lambda.abs().max(1.0);
        out.values.push(lambda);
        out.vectors.push(u);
        out.residuals.push(r);
    }
    if out.len() < m {
        out.converged = false;
    }
    Ok(out)
}

/// Dense path when the graph is small enough, Lanczos otherwise.
pub fn smallest_eigs(l: &SparseGraph, m: usize) -> Result<EigenPairs> {
    if l.n_nodes() <= 1024 {
        dense_smallest_eigs(l, m)
    } else {
        lanczos_smallest_eigs(l, m, &LanczosOptions::default())
    }
}

/// Soft segmentation from the `n` smallest non-constant eigenvectors, each
/// min-max scaled to `[0, 1]` and, for `n >= 2`, renormalized per pixel to
/// sum to one.
pub fn reference_softseg<T: Real>(
    pairs: &EigenPairs,
    n: usize,
    height: usize,
    width: usize,
) -> Result<EigenMaps<T>> {
    let nodes = height * width;
    if n == 0 {
        return Err(Error::contract("need at least one map"));
    }
    let mut maps: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, v) in pairs.vectors.iter().enumerate() {
        if maps.len() == n {
            break;
        }
        if v.len() != nodes {
            return Err(Error::contract(format!(
                "eigenvector of length {} for a {height}x{width} image",
                v.len()
            )));
        }
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-8 {
            if j == 0 {
                log::debug!("skipping constant eigenvector 0");
            } else {
                log::warn!("skipping constant eigenvector {j}");
            }
            continue;
        }
        maps.push(v.iter().map(|x| (x - lo) / (hi - lo)).collect());
    }
    if maps.len() < n {
        return Err(Error::contract(format!(
            "only {} non-constant eigenvectors available, {n} requested",
            maps.len()
        )));
    }
    if n >= 2 {
        let uniform = 1.0 / n as f64;
        for p in 0..nodes {
            let total: f64 = maps.iter().map(|m| m[p]).sum();
            for m in maps.iter_mut() {
                m[p] = if total > 0.0 { m[p] / total } else { uniform };
            }
        }
    }
    let data = maps.concat().into_iter().map(T::of).collect();
    EigenMaps::new(Tensor::from_vec([1, n, height, width], data)?)
}

/// Cosines of the principal angles between two sets of orthonormal vectors,
/// ascending (the first is the worst-aligned direction).
pub fn principal_angle_cosines(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = a.len();
    if b.len() != m {
        return Err(Error::contract("subspaces of different dimension"));
    }
    // singular values of A^T B are sqrt of eigenvalues of (A^T B)^T (A^T B)
    let mut atb = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            atb[i * m + j] = dot(&a[i], &b[j]);
        }
    }
    let mut gram = Dense { n: m, a: vec![0.0; m * m] };
    for i in 0..m {
        for j in 0..m {
            gram.a[i * m + j] = (0..m).map(|k| atb[k * m + i] * atb[k * m + j]).sum();
        }
    }
    let (vals, _) = symmetric_eigen(&gram)?;
    Ok(vals.into_iter().map(|v| v.max(0.0).sqrt().min(1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, GraphKind};

    fn path2() -> SparseGraph {
        let w = SparseGraph::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 1.0)], GraphKind::Affinity).unwrap();
        build_laplacian(&w).unwrap()
    }

    #[test]
    fn two_node_path_by_hand() {
        let p = dense_smallest_eigs(&path2(), 2).unwrap();
        assert!(p.values[0].abs() < 1e-15);
        assert!((p.values[1] - 2.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.vectors[0][0] - r).abs() < 1e-14 && (p.vectors[0][1] - r).abs() < 1e-14);
        assert!((p.vectors[1][0].abs() - r).abs() < 1e-14);
        assert!((p.vectors[1][0] + p.vectors[1][1]).abs() < 1e-14);
    }

    #[test]
    fn lanczos_on_two_nodes() {
        let p = lanczos_smallest_eigs(&path2(), 2, &LanczosOptions::default()).unwrap();
        assert!(p.converged);
        assert!(p.values[0].abs() < 1e-12 && (p.values[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lanczos_finds_repeated_eigenvalues() {
        // three disjoint edges: spectrum 0, 0, 0, 2, 2, 2
        let t = (0..3).flat_map(|e| [(2 * e, 2 * e + 1, 1.0), (2 * e + 1, 2 * e, 1.0)]).collect();
        let l = build_laplacian(&SparseGraph::from_triplets(6, t, GraphKind::Affinity).unwrap()).unwrap();
        let p = lanczos_smallest_eigs(&l, 5, &LanczosOptions::default()).unwrap();
        assert!(p.converged);
        for (got, want) in p.values.iter().zip([0.0, 0.0, 0.0, 2.0, 2.0]) {
            assert!((got - want).abs() < 1e-10, "{:?}", p.values);
        }
    }

    #[test]
    fn rejects_bad_m_and_oversized_dense() {
        assert!(dense_smallest_eigs(&path2(), 3).is_err());
        assert!(dense_smallest_eigs(&path2(), 0).is_err());
        let big = SparseGraph::from_triplets(DENSE_LIMIT + 1, vec![], GraphKind::Laplacian).unwrap();
        assert!(matches!(dense_smallest_eigs(&big, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn single_map_is_normalized_fiedler_vector() {
        let p = dense_smallest_eigs(&path2(), 2).unwrap();
        let maps: EigenMaps<f64> = reference_softseg(&p, 1, 1, 2).unwrap();
        let f = &p.vectors[1];
        let (lo, hi) = (f[0].min(f[1]), f[0].max(f[1]));
        let want: Vec<f64> = f.iter().map(|x| (x - lo) / (hi - lo)).collect();
        assert_eq!(maps.maps.data(), &want[..]);
    }

    #[test]
    fn principal_angles_of_identical_frames() {
        let a = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let b = vec![vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0]];
        let cos = principal_angle_cosines(&a, &b).unwrap();
        assert!(cos.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }
}

//! Unsupervised training objective: a graph-partition energy over the
//! network's maps plus a concave sparsity penalty.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{GraphKind, SparseGraph};
use crate::model::EigenMaps;
use crate::tensor::{CustomOp, Real, Tensor, Var};

/// Inside this distance from 0 or 1 the `|.|^gamma` terms contribute no
/// gradient; their slope is unbounded there.
pub const KINK_BAND: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Divide both terms by the pixel count before combining.
    pub normalize_per_pixel: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 40.0,
            gamma: 0.9,
            normalize_per_pixel: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::contract(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss values of one evaluation, in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub eigen: f64,
    pub spatial: f64,
    pub total: f64,
}

/// Sparsity penalty of a single pixel's channel vector.
pub fn spatial_loss_per_pixel(values: &[f64], gamma: f64) -> f64 {
    values
        .iter()
        .map(|&y| y.abs().powf(gamma) + (1.0 - y).abs().powf(gamma))
        .sum::<f64>()
        - 1.0
}

fn spatial_grad(y: f64, gamma: f64) -> f64 {
    let mut g = 0.0;
    if y.abs() > KINK_BAND {
        g += gamma * y.abs().powf(gamma - 1.0) * y.signum();
    }
    let z = 1.0 - y;
    if z.abs() > KINK_BAND {
        g -= gamma * z.abs().powf(gamma - 1.0) * z.signum();
    }
    g
}

fn check_graphs(shape: &[usize], graphs: &[&SparseGraph]) -> Result<()> {
    let [b, _, h, w] = *shape else {
        return Err(Error::dim(format!("expected maps [B, n, H, W], got {shape:?}")));
    };
    if graphs.len() != b {
        return Err(Error::contract(format!("{} Laplacians for a batch of {b}", graphs.len())));
    }
    for l in graphs {
        if l.kind() != GraphKind::Laplacian {
            return Err(Error::contract("eigen loss needs a Laplacian, got an affinity graph"));
        }
        if l.n_nodes() != h * w {
            return Err(Error::contract(format!(
                "Laplacian has {} nodes but the maps have {h}x{w} pixels",
                l.n_nodes()
            )));
        }
    }
    Ok(())
}

fn eigen_value<T: Real>(maps: &Tensor<T>, graphs: &[&SparseGraph]) -> Result<f64> {
    let [b, n, h, w] = maps.dims4()?;
    let plane = h * w;
    let mut total = 0.0;
    let mut y = vec![0.0; plane];
    for (bi, l) in graphs.iter().enumerate() {
        for k in 0..n {
            let start = (bi * n + k) * plane;
            for (dst, src) in y.iter_mut().zip(&maps.data()[start..start + plane]) {
                *dst = src.f64();
            }
            total += l.quadratic_form(&y)?;
        }
    }
    Ok(total / b as f64)
}

fn spatial_value<T: Real>(maps: &Tensor<T>, gamma: f64) -> Result<f64> {
    let [b, n, h, w] = maps.dims4()?;
    let plane = h * w;
    let data = maps.data();
    let mut total = 0.0;
    let mut px = vec![0.0; n];
    for bi in 0..b {
        for p in 0..plane {
            for (k, v) in px.iter_mut().enumerate() {
                *v = data[(bi * n + k) * plane + p].f64();
            }
            total += spatial_loss_per_pixel(&px, gamma);
        }
    }
    Ok(total / b as f64)
}

struct EigenLoss {
    graphs: Vec<Arc<SparseGraph>>,
    scale: f64,
}

impl<T: Real> CustomOp<T> for EigenLoss {
    fn name(&self) -> &str {
        "eigen_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let maps = inputs[0];
        let shape = maps.shape();
        let (n, plane) = (shape[1], shape[2] * shape[3]);
        let c = 2.0 * grad_output[0].f64() * self.scale;
        let mut out = vec![T::zero(); maps.numel()];
        let mut y = vec![0.0; plane];
        for (bi, l) in self.graphs.iter().enumerate() {
            for k in 0..n {
                let start = (bi * n + k) * plane;
                for (dst, src) in y.iter_mut().zip(&maps.data()[start..start + plane]) {
                    *dst = src.f64();
                }
                let ly = l.matvec(&y).expect("sizes were checked in forward");
                for (o, v) in out[start..start + plane].iter_mut().zip(ly) {
                    *o = T::of(c * v);
                }
            }
        }
        vec![Some(out)]
    }
}

struct SpatialLoss {
    gamma: f64,
    scale: f64,
}

impl<T: Real> CustomOp<T> for SpatialLoss {
    fn name(&self) -> &str {
        "spatial_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let c = grad_output[0].f64() * self.scale;
        let g = inputs[0].data().iter().map(|y| T::of(c * spatial_grad(y.f64(), self.gamma))).collect();
        vec![Some(g)]
    }
}

fn pixel_scale(shape: &[usize], normalize: bool) -> f64 {
    if normalize {
        1.0 / (shape[2] * shape[3]) as f64
    } else {
        1.0
    }
}

/// `sum_k Y_k^T L Y_k`, averaged over the batch. One Laplacian per batch item.
pub fn eigen_loss<'t, T: Real>(y: Var<'t, T>, graphs: &[Arc<SparseGraph>]) -> Result<Var<'t, T>> {
    eigen_loss_scaled(y, graphs, false)
}

fn eigen_loss_scaled<'t, T: Real>(y: Var<'t, T>, graphs: &[Arc<SparseGraph>], normalize: bool) -> Result<Var<'t, T>> {
    let shape = y.shape();
    let refs: Vec<&SparseGraph> = graphs.iter().map(|g| g.as_ref()).collect();
    check_graphs(&shape, &refs)?;
    let scale = pixel_scale(&shape, normalize);
    let value = eigen_value(&y.value(), &refs)? * scale;
    let op = EigenLoss {
        graphs: graphs.to_vec(),
        scale: scale / shape[0] as f64,
    };
    Ok(y.tape().custom(&[y], Tensor::scalar(T::of(value)), Box::new(op)))
}

/// Per-pixel `sum_k (|Y_k|^g + |1 - Y_k|^g) - 1`, summed over pixels and
/// averaged over the batch.
pub fn spatial_loss<'t, T: Real>(y: Var<'t, T>, gamma: f64) -> Result<Var<'t, T>> {
    spatial_loss_scaled(y, gamma, false)
}

fn spatial_loss_scaled<'t, T: Real>(y: Var<'t, T>, gamma: f64, normalize: bool) -> Result<Var<'t, T>> {
    let shape = y.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("expected maps [B, n, H, W], got {shape:?}")));
    }
    let scale = pixel_scale(&shape, normalize);
    let value = spatial_value(&y.value(), gamma)? * scale;
    let op = SpatialLoss {
        gamma,
        scale: scale / shape[0] as f64,
    };
    Ok(y.tape().custom(&[y], Tensor::scalar(T::of(value)), Box::new(op)))
}

/// The three loss nodes of one recorded evaluation.
pub struct LossVars<'t, T: Real> {
    pub eigen: Var<'t, T>,
    pub spatial: Var<'t, T>,
    pub total: Var<'t, T>,
}

impl<T: Real> LossVars<'_, T> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            eigen: self.eigen.value().item().f64(),
            spatial: self.spatial.value().item().f64(),
            total: self.total.value().item().f64(),
        }
    }
}

/// `eigen + lambda * spatial` on the tape.
pub fn total_loss<'t, T: Real>(y: Var<'t, T>, graphs: &[Arc<SparseGraph>], cfg: &LossConfig) -> Result<LossVars<'t, T>> {
    cfg.validate()?;
    let eigen = eigen_loss_scaled(y, graphs, cfg.normalize_per_pixel)?;
    let spatial = spatial_loss_scaled(y, cfg.gamma, cfg.normalize_per_pixel)?;
    let total = eigen.add(&spatial.scale(T::of(cfg.lambda)))?;
    Ok(LossVars { eigen, spatial, total })
}

/// Evaluates the objective without recording anything.
pub fn evaluate<T: Real>(y: &EigenMaps<T>, graphs: &[&SparseGraph], cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_graphs(y.maps.shape(), graphs)?;
    let scale = pixel_scale(y.maps.shape(), cfg.normalize_per_pixel);
    let eigen = eigen_value(&y.maps, graphs)? * scale;
    let spatial = spatial_value(&y.maps, cfg.gamma)? * scale;
    Ok(LossBreakdown {
        eigen,
        spatial,
        total: eigen + cfg.lambda * spatial,
    })
}

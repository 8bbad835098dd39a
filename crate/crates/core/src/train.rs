//! Seeded mini-batch training of the guidance network.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{image_laplacian, GraphConfig, SparseGraph};
use crate::io::pad_reflect;
use crate::loss::{evaluate, total_loss, LossBreakdown, LossConfig};
use crate::model::{EigenMaps, SsgNet};
use crate::optim::AdamState;
use crate::tensor::{Real, Tape, Tensor};

/// Laplacians keyed by image content and graph parameters.
#[derive(Default)]
pub struct LaplacianCache {
    map: HashMap<[u8; 32], Arc<SparseGraph>>,
    hits: usize,
}

impl LaplacianCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key<T: Real>(image: &Tensor<T>, cfg: GraphConfig) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in image.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in image.data() {
            h.update(v.f64().to_le_bytes());
        }
        h.update((cfg.k as u64).to_le_bytes());
        h.update(cfg.eta.to_le_bytes());
        h.finalize().into()
    }

    pub fn get_or_build<T: Real>(&mut self, image: &Tensor<T>, cfg: GraphConfig) -> Result<Arc<SparseGraph>> {
        let key = Self::key(image, cfg);
        if let Some(l) = self.map.get(&key) {
            self.hits += 1;
            return Ok(Arc::clone(l));
        }
        let l = Arc::new(image_laplacian(image, cfg)?);
        self.map.insert(key, Arc::clone(&l));
        Ok(l)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}

/// Equally sized training images, their padded copies and Laplacians.
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    padded: Vec<Tensor<f32>>,
    pub laplacians: Vec<Arc<SparseGraph>>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    /// Images must all be `[3, H, W]` with the same `H, W`. Laplacians are
    /// built at that size; the network sees reflect-padded copies.
    pub fn new(images: Vec<Tensor<f32>>, graph: GraphConfig, cache: &mut LaplacianCache) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::contract("dataset is empty"))?;
        let (height, width) = match *first.shape() {
            [3, h, w] => (h, w),
            ref s => return Err(Error::dim(format!("expected [3, H, W] images, got {s:?}"))),
        };
        if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
            return Err(Error::dim(format!(
                "all images must share one size; found {:?} and {:?}",
                first.shape(),
                bad.shape()
            )));
        }
        let laplacians = images
            .iter()
            .map(|im| cache.get_or_build(im, graph))
            .collect::<Result<Vec<_>>>()?;
        let padded = images.iter().map(|im| pad_reflect(im, 4)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            padded,
            laplacians,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<Arc<SparseGraph>>)> {
        let items: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.padded[i]).collect();
        let graphs = idx.iter().map(|&i| Arc::clone(&self.laplacians[i])).collect();
        Ok((Tensor::stack(&items)?, graphs))
    }
}

/// Runs the network on a `[3, H, W]` image of any size: reflect-pads to a
/// multiple of 4 and crops the maps back.
pub fn predict<T: Real>(net: &SsgNet<T>, image: &Tensor<T>) -> Result<EigenMaps<T>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::dim(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let padded = pad_reflect(image, 4)?;
    let batch = Tensor::stack(&[&padded])?;
    let y = net.forward(&batch)?;
    if (y.height(), y.width()) == (h, w) {
        return Ok(y);
    }
    let n = y.n();
    let pw = y.width();
    let mut data = Vec::with_capacity(n * h * w);
    for k in 0..n {
        let ch = y.channel(0, k);
        for row in 0..h {
            data.extend_from_slice(&ch[row * pw..row * pw + w]);
        }
    }
    EigenMaps::new(Tensor::from_vec([1, n, h, w], data)?)
}

/// Maps for every image of the dataset.
pub fn predict_dataset(net: &SsgNet<f32>, data: &Dataset) -> Result<Vec<EigenMaps<f32>>> {
    data.images.iter().map(|im| predict(net, im)).collect()
}

/// Loss of the current network averaged over the whole dataset.
pub fn evaluate_dataset(net: &SsgNet<f32>, data: &Dataset, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for (im, l) in data.images.iter().zip(&data.laplacians) {
        let b = evaluate(&predict(net, im)?, &[l.as_ref()], cfg)?;
        acc.eigen += b.eigen;
        acc.spatial += b.spatial;
        acc.total += b.total;
    }
    let n = data.len() as f64;
    Ok(LossBreakdown {
        eigen: acc.eigen / n,
        spatial: acc.spatial / n,
        total: acc.total / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 1e-4,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

/// One line of the loss trace; losses are those of the step's batch
/// before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub wall_ms: u128,
}

pub const TRACE_HEADER: &str = "step,l_eigen,l_spatial,l_ssg,wall_ms";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.loss.eigen, r.loss.spatial, r.loss.total, r.wall_ms
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Whole-dataset loss before the first and after the last update.
    pub initial: LossBreakdown,
    pub final_: LossBreakdown,
}

/// Batch indices drawn from reshuffled passes over the dataset.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains `net` in place. `on_step` sees every trace row together with the
/// updated network and optimizer (for checkpointing).
pub fn train(
    net: &mut SsgNet<f32>,
    adam: &mut AdamState<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow, &SsgNet<f32>, &AdamState<f32>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    if data.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    adam.lr = cfg.lr;
    let start = Instant::now();
    let initial = evaluate_dataset(net, data, &cfg.loss)?;
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let (images, graphs) = data.batch(&idx)?;
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let x = tape.constant(images);
        let mut y = net.forward_on(&bound, x)?;
        if y.shape()[2..] != [data.height, data.width] {
            y = y.crop(0, 0, data.height, data.width)?;
        }
        let losses = total_loss(y, &graphs, &cfg.loss)?;
        let grads = losses.total.backward()?;
        net.zero_grad();
        net.accumulate_grads(&bound, &grads)?;
        adam.step(&mut net.params_mut())?;
        let row = TraceRow {
            step,
            loss: losses.breakdown(),
            wall_ms: start.elapsed().as_millis(),
        };
        if !row.loss.total.is_finite() {
            log::warn!("non-finite loss at step {step}");
        }
        log::debug!("step {step}: {:?}", row.loss);
        on_step(&row, net, adam)?;
        trace.push(row);
    }
    let final_ = evaluate_dataset(net, data, &cfg.loss)?;
    Ok(TrainReport { trace, initial, final_ })
}

//! Finite-difference verification of every differentiable piece: the
//! layers, both loss terms and the whole network end to end.
//!
//! The analytic side is a single vector-Jacobian product with a random
//! cotangent `c`, computed in the precision under test. The numeric side
//! differentiates the scalar `sum(c * out)` by central differences of the
//! same function evaluated in f64 at the same points. Errors are norm-wise
//! per input tensor: `|a - n| / max(|a|, |n|)`.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{image_laplacian, GraphConfig, SparseGraph};
use crate::loss::{eigen_loss, evaluate, spatial_loss, total_loss, LossConfig, KINK_BAND};
use crate::model::{SsgConfig, SsgNet};
use crate::tensor::layers::BoundParams;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub precision: &'static str,
    /// Worst norm-wise relative error over the checked inputs.
    pub rel_error: f64,
    pub threshold: f64,
    /// Number of scalar entries perturbed.
    pub entries: usize,
    /// Entries whose perturbation crossed a kink at the nominal step and
    /// were differenced with a smaller one.
    pub refined: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < self.threshold
    }
}

/// Central-difference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    /// Perturb at most this many entries per input (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

#[derive(Default)]
struct ErrAcc {
    diff2: f64,
    a2: f64,
    n2: f64,
}

impl ErrAcc {
    fn add(&mut self, a: f64, n: f64) {
        self.diff2 += (a - n) * (a - n);
        self.a2 += a * a;
        self.n2 += n * n;
    }

    fn rel(&self) -> f64 {
        let scale = self.a2.sqrt().max(self.n2.sqrt());
        if scale == 0.0 {
            0.0
        } else {
            self.diff2.sqrt() / scale
        }
    }
}

fn vjp<T: Real, F>(inputs: &[Tensor<T>], f: &F, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let n_out = out.value().numel();
    let cot: Vec<f64> = if out.value().is_scalar() {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let seed: Vec<T> = cot.iter().map(|&c| T::of(c)).collect();
    let grads = tape.backward_with(out, &seed)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(v) {
            Some(g) => g.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    Ok((cot, analytic))
}

fn entries(rng: &mut ChaCha8Rng, n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => sample(rng, n, m).into_vec(),
        _ => (0..n).collect(),
    }
}

/// Central differences of `sum(cot * f(xs))` against `analytic`, one error
/// per input.
fn numeric_errors<U: Real, F>(
    inputs: &[Tensor<U>],
    f: &F,
    cot: &[f64],
    analytic: &[Vec<f64>],
    opts: &FdOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)>
where
    F: for<'t> Fn(&'t Tape<U>, &[Var<'t, U>]) -> Result<Var<'t, U>>,
{
    let project = |xs: &[Tensor<U>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = out.value();
        Ok(value.data().iter().zip(cot).map(|(a, c)| a.f64() * c).sum())
    };
    let mut xs = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    let mut count = 0;
    for i in 0..inputs.len() {
        let mut acc = ErrAcc::default();
        let idx = entries(rng, inputs[i].numel(), opts.max_entries);
        for &j in &idx {
            let x0 = inputs[i].data()[j];
            let xp = U::of(x0.f64() + opts.step);
            let xm = U::of(x0.f64() - opts.step);
            xs[i].data_mut()[j] = xp;
            let fp = project(&xs)?;
            xs[i].data_mut()[j] = xm;
            let fm = project(&xs)?;
            xs[i].data_mut()[j] = x0;
            // the representable step, not the requested one
            acc.add(analytic[i][j], (fp - fm) / (xp.f64() - xm.f64()));
        }
        count += idx.len();
        errors.push(acc.rel());
    }
    Ok((errors, count))
}

/// Compares the tape's gradient of `f` against central differences of `f`
/// itself, both in precision `T`. Returns per-input relative errors and the
/// number of entries perturbed.
pub fn check_fn<T: Real, F>(inputs: &[Tensor<T>], f: F, opts: &FdOptions) -> Result<(Vec<f64>, usize)>
where
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (cot, analytic) = vjp(inputs, &f, &mut rng)?;
    numeric_errors(inputs, &f, &cot, &analytic, opts, &mut rng)
}

/// The differentiable pieces the suite covers.
#[derive(Clone)]
pub enum Probe {
    Conv2d { stride: usize },
    Deconv2d { stride: usize },
    LayerNorm,
    Gelu,
    LeakyRelu,
    Softmax,
    Fusion,
    EigenLoss(Vec<Arc<SparseGraph>>),
    SpatialLoss,
    TotalLoss(Vec<Arc<SparseGraph>>),
}

fn bound<'t, T: Real>(v: &[Var<'t, T>]) -> BoundParams<'t, T> {
    BoundParams {
        weight: v[1],
        bias: v[2],
    }
}

impl Probe {
    pub fn name(&self) -> String {
        match self {
            Probe::Conv2d { stride } => format!("conv2d/stride{stride}"),
            Probe::Deconv2d { stride } => format!("deconv2d/stride{stride}"),
            Probe::LayerNorm => "layer_norm".into(),
            Probe::Gelu => "gelu".into(),
            Probe::LeakyRelu => "leaky_relu".into(),
            Probe::Softmax => "channel_softmax".into(),
            Probe::Fusion => "fusion_1x1".into(),
            Probe::EigenLoss(_) => "eigen_loss".into(),
            Probe::SpatialLoss => "spatial_loss".into(),
            Probe::TotalLoss(_) => "total_loss".into(),
        }
    }

    pub fn apply<'t, T: Real>(&self, _tape: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        match self {
            Probe::Conv2d { stride } => v[0].conv2d(&bound(v), *stride),
            Probe::Deconv2d { stride } => v[0].deconv2d(&bound(v), *stride),
            Probe::LayerNorm => v[0].layer_norm(&bound(v), 1e-6),
            Probe::Gelu => Ok(v[0].gelu()),
            Probe::LeakyRelu => Ok(v[0].leaky_relu(T::of(0.2))),
            Probe::Softmax => v[0].channel_softmax(),
            Probe::Fusion => v[0].pointwise(&bound(v)),
            Probe::EigenLoss(g) => eigen_loss(v[0], g),
            Probe::SpatialLoss => spatial_loss(v[0], 0.9),
            Probe::TotalLoss(g) => Ok(total_loss(v[0], g, &LossConfig::default())?.total),
        }
    }
}

/// Analytic gradient of `probe` in precision `T` against central
/// differences of the f64 evaluation at the same points.
pub fn check_probe<T: Real>(probe: &Probe, inputs: &[Tensor<f64>], opts: &FdOptions, threshold: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let typed: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let (cot, analytic) = vjp(&typed, &|tape, v| probe.apply(tape, v), &mut rng)?;
    let points: Vec<Tensor<f64>> = typed.iter().map(|t| t.cast()).collect();
    let (errors, entries) = numeric_errors(&points, &|tape, v| probe.apply(tape, v), &cot, &analytic, opts, &mut rng)?;
    Ok(GradCheck {
        name: probe.name(),
        precision: T::NAME,
        rel_error: errors.into_iter().fold(0.0, f64::max),
        threshold,
        entries,
        refined: 0,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, rng)
}

fn random_laplacians(count: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Arc<SparseGraph>>> {
    (0..count)
        .map(|_| image_laplacian(&uniform(&[3, h, w], 0.0, 1.0, rng), GraphConfig { k: 5, eta: 1.0 }).map(Arc::new))
        .collect()
}

/// Simplex-valued maps bounded away from the 0/1 kinks.
fn random_maps(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    crate::tensor::layers::channel_softmax(&uniform(shape, -1.0, 1.0, rng)).expect("valid shape")
}

/// Every probe with its inputs, drawn from `seed`.
pub fn layer_cases(seed: u64) -> Result<Vec<(Probe, Vec<Tensor<f64>>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();
    for stride in [1, 2] {
        let conv = vec![uniform(&[2, 3, 6, 6], -1.0, 1.0, r), uniform(&[4, 3, 3, 3], -0.5, 0.5, r), uniform(&[4], -0.5, 0.5, r)];
        cases.push((Probe::Conv2d { stride }, conv));
        let deconv = vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, r), uniform(&[4, 3, 3, 3], -0.5, 0.5, r), uniform(&[4], -0.5, 0.5, r)];
        cases.push((Probe::Deconv2d { stride }, deconv));
    }
    let ln = vec![uniform(&[2, 4, 3, 3], -2.0, 2.0, r), uniform(&[4], 0.5, 1.5, r), uniform(&[4], -0.5, 0.5, r)];
    cases.push((Probe::LayerNorm, ln));
    cases.push((Probe::Gelu, vec![uniform(&[2, 3, 4, 4], -3.0, 3.0, r)]));
    // keep every entry well away from the kink at zero
    let away = uniform(&[2, 3, 4, 4], -1.0, 1.0, r).map(|x| x.signum() * (0.1 + x.abs()));
    cases.push((Probe::LeakyRelu, vec![away]));
    cases.push((Probe::Softmax, vec![uniform(&[2, 3, 4, 4], -2.0, 2.0, r)]));
    let fusion = vec![random_maps(&[2, 3, 4, 4], r), uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2], -0.5, 0.5, r)];
    cases.push((Probe::Fusion, fusion));
    let graphs = random_laplacians(2, 4, 4, r)?;
    cases.push((Probe::EigenLoss(graphs.clone()), vec![random_maps(&[2, 3, 4, 4], r)]));
    cases.push((Probe::SpatialLoss, vec![random_maps(&[2, 3, 4, 4], r)]));
    cases.push((Probe::TotalLoss(graphs), vec![random_maps(&[2, 3, 4, 4], r)]));
    Ok(cases)
}

/// All layer and loss probes with the analytic side in precision `T`.
pub fn check_layers<T: Real>(opts: &FdOptions, threshold: f64) -> Result<Vec<GradCheck>> {
    layer_cases(opts.seed)?
        .iter()
        .map(|(probe, inputs)| check_probe::<T>(probe, inputs, opts, threshold))
        .collect()
}

/// Settings of the end-to-end check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCheckOptions {
    /// Input is `size x size`.
    pub size: usize,
    pub step: f64,
    /// Entries perturbed per parameter tensor; `None` checks every entry.
    pub samples_per_tensor: Option<usize>,
    /// Extra random directions through the full parameter vector.
    pub directions: usize,
    pub seed: u64,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            size: 16,
            step: 1e-4,
            samples_per_tensor: Some(64),
            directions: 4,
            seed: 11,
        }
    }
}

/// Full network plus total loss in f64: sampled entries of every parameter
/// tensor, then directional derivatives along random unit directions that
/// touch every parameter at once.
///
/// The network is piecewise smooth (LeakyReLU, and the zero-slope bands of
/// the sparsity term). When the two evaluations of a difference land on
/// different sides of a kink the quotient says nothing about the gradient,
/// so the step is divided by ten until they agree.
pub fn check_model(opts: &ModelCheckOptions, threshold: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = SsgNet::<f64>::new(SsgConfig::default(), opts.seed)?;
    let s = opts.size;
    let image = uniform(&[3, s, s], 0.0, 1.0, &mut rng);
    let graph = Arc::new(image_laplacian(&image, GraphConfig::default())?);
    let batch = Tensor::stack(&[&image])?;
    let cfg = LossConfig::default();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let b = net.bind(&tape);
        let x = tape.constant(batch.clone());
        let y = net.forward_on(&b, x)?;
        let loss = total_loss(y, std::slice::from_ref(&graph), &cfg)?;
        let grads = loss.total.backward()?;
        net.zero_grad();
        net.accumulate_grads(&b, &grads)?;
        net.params_mut().iter().map(|p| p.grad.clone().unwrap_or_default()).collect()
    };
    net.zero_grad();
    let loss_at = |net: &SsgNet<f64>| -> Result<(f64, Vec<bool>)> {
        let (y, kinks) = net.forward_with_kinks(&batch, KINK_BAND)?;
        Ok((evaluate(&y, &[graph.as_ref()], &cfg)?.total, kinks))
    };
    // central difference, shrinking the step while it straddles a kink
    let refined = std::cell::Cell::new(0usize);
    let difference = |net: &mut SsgNet<f64>, set: &dyn Fn(&mut SsgNet<f64>, f64)| -> Result<f64> {
        let mut h = opts.step;
        loop {
            set(net, h);
            let (fp, kp) = loss_at(net)?;
            set(net, -h);
            let (fm, km) = loss_at(net)?;
            set(net, 0.0);
            if kp == km || h < opts.step * 1e-3 {
                if h < opts.step {
                    refined.set(refined.get() + 1);
                }
                return Ok((fp - fm) / (2.0 * h));
            }
            h /= 10.0;
        }
    };

    let names: Vec<&str> = net.named_params().iter().map(|(n, _)| *n).collect();
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let idx = entries(&mut rng, analytic[t].len(), opts.samples_per_tensor);
        let before = refined.get();
        let mut acc = ErrAcc::default();
        for &j in &idx {
            let x0 = net.params_mut()[t].data()[j];
            let num = difference(&mut net, &|net, d| net.params_mut()[t].data_mut()[j] = x0 + d)?;
            acc.add(analytic[t][j], num);
        }
        out.push(GradCheck {
            name: format!("model/{name}"),
            precision: f64::NAME,
            rel_error: acc.rel(),
            threshold,
            entries: idx.len(),
            refined: refined.get() - before,
        });
    }

    let total: usize = analytic.iter().map(Vec::len).sum();
    let base: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.data().to_vec()).collect();
    for d in 0..opts.directions {
        let dir: Vec<Vec<f64>> = analytic
            .iter()
            .map(|g| (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let a: f64 = dir.iter().flatten().zip(analytic.iter().flatten()).map(|(d, g)| d * g).sum::<f64>() / norm;
        let before = refined.get();
        let num = difference(&mut net, &|net, h| {
            for ((p, b), dv) in net.params_mut().into_iter().zip(&base).zip(&dir) {
                for ((x, x0), v) in p.data_mut().iter_mut().zip(b).zip(dv) {
                    *x = x0 + h * v / norm;
                }
            }
        })?;
        let mut acc = ErrAcc::default();
        acc.add(a, num);
        out.push(GradCheck {
            name: format!("model/direction{d}"),
            precision: f64::NAME,
            rel_error: acc.rel(),
            threshold,
            entries: total,
            refined: refined.get() - before,
        });
    }
    Ok(out)
}

/// Thresholds and steps of the complete suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub f32_step: f64,
    pub f32_threshold: f64,
    pub f64_step: f64,
    pub f64_threshold: f64,
    pub model: ModelCheckOptions,
    pub model_threshold: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            f32_step: 1e-3,
            f32_threshold: 1e-4,
            f64_step: 1e-5,
            f64_threshold: 1e-6,
            model: ModelCheckOptions::default(),
            model_threshold: 1e-4,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<GradCheck>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(GradCheck::passed)
    }
}

/// Layers and losses in both precisions, then the full network.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let f32_opts = FdOptions {
        step: opts.f32_step,
        max_entries: None,
        seed: opts.seed,
    };
    let f64_opts = FdOptions {
        step: opts.f64_step,
        ..f32_opts
    };
    let mut checks = check_layers::<f32>(&f32_opts, opts.f32_threshold)?;
    checks.extend(check_layers::<f64>(&f64_opts, opts.f64_threshold)?);
    checks.extend(check_model(&opts.model, opts.model_threshold)?);
    Ok(SuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // treating one factor of x * x as a constant halves the analytic
        // gradient but not the numeric one
        let ins = [Tensor::<f64>::from_vec([3], vec![0.3, -0.7, 1.1]).unwrap()];
        let opts = FdOptions {
            step: 1e-5,
            max_entries: None,
            seed: 0,
        };
        let (ok, _) = check_fn(&ins, |_, v| v[0].mul(&v[0]), &opts).unwrap();
        assert!(ok[0] < 1e-9);
        let (wrong, _) = check_fn(
            &ins,
            |t, v| {
                let frozen = v[0].value().clone();
                t.constant(frozen).mul(&v[0])
            },
            &opts,
        )
        .unwrap();
        assert!(wrong[0] > 0.4);
    }

    #[test]
    fn f64_layers_pass() {
        let opts = FdOptions {
            step: 1e-5,
            max_entries: None,
            seed: 9,
        };
        for c in check_layers::<f64>(&opts, 1e-6).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}

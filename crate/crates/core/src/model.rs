//! The guidance network: a five-layer encoder-decoder mapping an RGB image
//! to `n` per-pixel soft-assignment maps, plus the 1x1 fusion layer that
//! mixes those maps into task-specific guidance.
//!
//! ```text
//! conv s2 -> LN -> GeLU -> conv s2 -> LN -> GeLU
//!   -> deconv x2 -> LN -> LeakyReLU -> deconv x2 -> LN -> LeakyReLU
//!   -> deconv s1 -> channel softmax
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::layers::{self, BoundParams};
use crate::tensor::{Gradients, LayerParams, Real, Tape, Tensor, Var};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SsgConfig {
    /// Output channels of enc1, enc2, dec1, dec2.
    pub widths: [usize; 4],
    pub n_eigenmaps: usize,
    pub ln_eps: f64,
    pub leaky_slope: f64,
}

impl Default for SsgConfig {
    fn default() -> Self {
        Self {
            widths: [36, 72, 36, 18],
            n_eigenmaps: 3,
            ln_eps: 1e-6,
            leaky_slope: 0.2,
        }
    }
}

/// Per-image stack of `n` maps whose channel vectors lie on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenMaps<T> {
    /// `[B, n, H, W]`
    pub maps: Tensor<T>,
}

impl<T: Real> EigenMaps<T> {
    pub fn new(maps: Tensor<T>) -> Result<Self> {
        maps.dims4()?;
        Ok(Self { maps })
    }

    pub fn batch(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[3]
    }

    /// Map `k` of batch item `b`, row-major.
    pub fn channel(&self, b: usize, k: usize) -> &[T] {
        let plane = self.height() * self.width();
        let start = (b * self.n() + k) * plane;
        &self.maps.data()[start..start + plane]
    }

    /// Largest deviation of a per-pixel channel sum from one, and the
    /// smallest entry.
    pub fn simplex_error(&self) -> (f64, f64) {
        let plane = self.height() * self.width();
        let mut worst = 0.0f64;
        for b in 0..self.batch() {
            for p in 0..plane {
                let s: f64 = (0..self.n()).map(|k| self.channel(b, k)[p].f64()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        let min = self.maps.data().iter().map(|v| v.f64()).fold(f64::INFINITY, f64::min);
        (worst, min)
    }

    /// Mean over pixels of the largest channel value.
    pub fn mean_max_channel(&self) -> f64 {
        let plane = self.height() * self.width();
        let mut total = 0.0;
        for b in 0..self.batch() {
            for p in 0..plane {
                total += (0..self.n())
                    .map(|k| self.channel(b, k)[p].f64())
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        total / (self.batch() * plane) as f64
    }

    /// Mean over pixels and channel pairs of `|Y_k - Y_l|`.
    pub fn mean_interchannel_l1(&self) -> f64 {
        let n = self.n();
        let plane = self.height() * self.width();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for b in 0..self.batch() {
            for k in 0..n {
                for l in k + 1..n {
                    let (a, c) = (self.channel(b, k), self.channel(b, l));
                    total += a.iter().zip(c).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>();
                }
            }
        }
        total / (self.batch() * plane * n * (n - 1) / 2) as f64
    }

    pub fn cast<U: Real>(&self) -> EigenMaps<U> {
        EigenMaps { maps: self.maps.cast() }
    }
}

/// Learnable parameters of the guidance network.
#[derive(Clone, Debug, PartialEq)]
pub struct SsgNet<T> {
    pub config: SsgConfig,
    pub enc1: LayerParams<T>,
    pub enc2: LayerParams<T>,
    pub dec1: LayerParams<T>,
    pub dec2: LayerParams<T>,
    pub dec3: LayerParams<T>,
    pub ln1: LayerParams<T>,
    pub ln2: LayerParams<T>,
    pub ln3: LayerParams<T>,
    pub ln4: LayerParams<T>,
}

/// Parameter names in a fixed order; checkpoints use these.
pub const PARAM_NAMES: [&str; 18] = [
    "enc1.weight",
    "enc1.bias",
    "ln1.weight",
    "ln1.bias",
    "enc2.weight",
    "enc2.bias",
    "ln2.weight",
    "ln2.bias",
    "dec1.weight",
    "dec1.bias",
    "ln3.weight",
    "ln3.bias",
    "dec2.weight",
    "dec2.bias",
    "ln4.weight",
    "ln4.bias",
    "dec3.weight",
    "dec3.bias",
];

/// The network's parameters recorded on a tape.
pub struct BoundSsgNet<'t, T: Real> {
    layers: [BoundParams<'t, T>; 9],
}

impl<T: Real> SsgNet<T> {
    /// Fan-in scaled normal kernels, zero biases, unit/zero layer norms.
    pub fn new(config: SsgConfig, seed: u64) -> Result<Self> {
        let [w1, w2, w3, w4] = config.widths;
        let n = config.n_eigenmaps;
        if n < 2 {
            return Err(Error::contract("the network needs at least two output maps"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            enc1: LayerParams::kaiming3x3(w1, 3, &mut rng)?,
            enc2: LayerParams::kaiming3x3(w2, w1, &mut rng)?,
            dec1: LayerParams::kaiming3x3(w3, w2, &mut rng)?,
            dec2: LayerParams::kaiming3x3(w4, w3, &mut rng)?,
            dec3: LayerParams::kaiming3x3(n, w4, &mut rng)?,
            ln1: LayerParams::norm(w1)?,
            ln2: LayerParams::norm(w2)?,
            ln3: LayerParams::norm(w3)?,
            ln4: LayerParams::norm(w4)?,
            config,
        })
    }

    fn layers(&self) -> [&LayerParams<T>; 9] {
        [
            &self.enc1, &self.ln1, &self.enc2, &self.ln2, &self.dec1, &self.ln3, &self.dec2, &self.ln4, &self.dec3,
        ]
    }

    fn layers_mut(&mut self) -> [&mut LayerParams<T>; 9] {
        [
            &mut self.enc1,
            &mut self.ln1,
            &mut self.enc2,
            &mut self.ln2,
            &mut self.dec1,
            &mut self.ln3,
            &mut self.dec2,
            &mut self.ln4,
            &mut self.dec3,
        ]
    }

    /// Parameter tensors paired with their [`PARAM_NAMES`] entry.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let tensors = self.layers().into_iter().flat_map(|l| [&l.weight, &l.bias]);
        PARAM_NAMES.iter().copied().zip(tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Rebuilds a network from named tensors; widths are read off the shapes.
    pub fn from_named(mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor<T>> {
            lookup(name)
                .map(Tensor::with_grad)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mut layer = |name: &str| -> Result<LayerParams<T>> {
            Ok(LayerParams {
                weight: take(&format!("{name}.weight"))?,
                bias: take(&format!("{name}.bias"))?,
            })
        };
        let enc1 = layer("enc1")?;
        let enc2 = layer("enc2")?;
        let dec1 = layer("dec1")?;
        let dec2 = layer("dec2")?;
        let dec3 = layer("dec3")?;
        let ln1 = layer("ln1")?;
        let ln2 = layer("ln2")?;
        let ln3 = layer("ln3")?;
        let ln4 = layer("ln4")?;
        let out_ch = |p: &LayerParams<T>| p.weight.shape().first().copied().unwrap_or(0);
        let config = SsgConfig {
            widths: [out_ch(&enc1), out_ch(&enc2), out_ch(&dec1), out_ch(&dec2)],
            n_eigenmaps: out_ch(&dec3),
            ..SsgConfig::default()
        };
        let net = Self {
            config,
            enc1,
            enc2,
            dec1,
            dec2,
            dec3,
            ln1,
            ln2,
            ln3,
            ln4,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let [w1, w2, w3, w4] = self.config.widths;
        let n = self.config.n_eigenmaps;
        let expect = [
            ("enc1", &self.enc1, vec![w1, 3, 3, 3], w1),
            ("enc2", &self.enc2, vec![w2, w1, 3, 3], w2),
            ("dec1", &self.dec1, vec![w3, w2, 3, 3], w3),
            ("dec2", &self.dec2, vec![w4, w3, 3, 3], w4),
            ("dec3", &self.dec3, vec![n, w4, 3, 3], n),
            ("ln1", &self.ln1, vec![w1], w1),
            ("ln2", &self.ln2, vec![w2], w2),
            ("ln3", &self.ln3, vec![w3], w3),
            ("ln4", &self.ln4, vec![w4], w4),
        ];
        for (name, p, wshape, bias) in expect {
            if p.weight.shape() != wshape.as_slice() || p.bias.shape() != [bias] {
                return Err(Error::Checkpoint(format!(
                    "{name} has shapes {:?}/{:?}, expected {wshape:?}/[{bias}]",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        if n < 2 || [w1, w2, w3, w4].contains(&0) {
            return Err(Error::Checkpoint("degenerate layer widths".into()));
        }
        Ok(())
    }

    /// Number of learnable scalars, biases and norm affines included.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.numel()).sum()
    }

    pub fn n_eigenmaps(&self) -> usize {
        self.config.n_eigenmaps
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().into_iter().for_each(LayerParams::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> SsgNet<U> {
        let [enc1, ln1, enc2, ln2, dec1, ln3, dec2, ln4, dec3] = self.layers().map(|l| l.cast());
        SsgNet {
            config: self.config.clone(),
            enc1,
            enc2,
            dec1,
            dec2,
            dec3,
            ln1,
            ln2,
            ln3,
            ln4,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundSsgNet<'t, T> {
        BoundSsgNet {
            layers: self.layers().map(|l| l.bind(tape)),
        }
    }

    /// Adds the gradients of `bound` into every parameter's `grad`.
    pub fn accumulate_grads(&mut self, bound: &BoundSsgNet<'_, T>, grads: &Gradients<T>) -> Result<()> {
        for (layer, b) in self.layers_mut().into_iter().zip(&bound.layers) {
            layer.accumulate_grads(b, grads)?;
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, 3, h, w] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => Ok(()),
            [_, 3, h, w] => Err(Error::contract(format!(
                "input {h}x{w} is not divisible by 4; pad to a multiple of 4 first (see io::pad_reflect)"
            ))),
            _ => Err(Error::dim(format!("expected a [B, 3, H, W] image batch, got {shape:?}"))),
        }
    }

    /// Records a forward pass on the tape of `image`; returns the softmax
    /// output `[B, n, H, W]`.
    pub fn forward_on<'t>(&self, bound: &BoundSsgNet<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&image.shape())?;
        let [enc1, ln1, enc2, ln2, dec1, ln3, dec2, ln4, dec3] = &bound.layers;
        let eps = self.config.ln_eps;
        let slope = T::of(self.config.leaky_slope);
        let x = image.conv2d(enc1, 2)?.layer_norm(ln1, eps)?.gelu();
        let x = x.conv2d(enc2, 2)?.layer_norm(ln2, eps)?.gelu();
        let x = x.deconv2d(dec1, 2)?.layer_norm(ln3, eps)?.leaky_relu(slope);
        let x = x.deconv2d(dec2, 2)?.layer_norm(ln4, eps)?.leaky_relu(slope);
        x.deconv2d(dec3, 1)?.channel_softmax()
    }

    /// Inference without gradient bookkeeping.
    pub fn forward(&self, image: &Tensor<T>) -> Result<EigenMaps<T>> {
        self.forward_inner(image, None)
    }

    /// Forward pass that also records which side of every non-smooth point
    /// each activation falls on: the sign of both LeakyReLU inputs and
    /// whether an output sits at 0 or 1.
    pub(crate) fn forward_with_kinks(&self, image: &Tensor<T>, band: f64) -> Result<(EigenMaps<T>, Vec<bool>)> {
        let mut kinks = Vec::new();
        let y = self.forward_inner(image, Some(&mut kinks))?;
        for v in y.maps.data() {
            let v = v.f64();
            kinks.push(v.abs() <= band);
            kinks.push((1.0 - v).abs() <= band);
        }
        Ok((y, kinks))
    }

    fn forward_inner(&self, image: &Tensor<T>, mut kinks: Option<&mut Vec<bool>>) -> Result<EigenMaps<T>> {
        self.check_input(image.shape())?;
        let eps = self.config.ln_eps;
        let slope = T::of(self.config.leaky_slope);
        let mut leaky = |x: Tensor<T>| {
            if let Some(k) = kinks.as_mut() {
                k.extend(x.data().iter().map(|v| *v > T::zero()));
            }
            layers::leaky_relu(&x, slope)
        };
        let x = layers::conv2d(image, &self.enc1, 2)?;
        let x = layers::gelu(&layers::layer_norm(&x, &self.ln1, eps)?);
        let x = layers::conv2d(&x, &self.enc2, 2)?;
        let x = layers::gelu(&layers::layer_norm(&x, &self.ln2, eps)?);
        let x = layers::deconv2d(&x, &self.dec1, 2)?;
        let x = leaky(layers::layer_norm(&x, &self.ln3, eps)?);
        let x = layers::deconv2d(&x, &self.dec2, 2)?;
        let x = leaky(layers::layer_norm(&x, &self.ln4, eps)?);
        let x = layers::deconv2d(&x, &self.dec3, 1)?;
        EigenMaps::new(layers::channel_softmax(&x)?)
    }
}

/// Single 1x1 convolution mixing the `n` maps into `c_out` guidance channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer<T> {
    pub attn: LayerParams<T>,
}

impl<T: Real> FusionLayer<T> {
    pub fn new(n: usize, c_out: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            attn: LayerParams::pointwise(c_out, n, &mut rng)?,
        })
    }

    /// Fixed mixing weights `[c_out][n]` with zero bias.
    pub fn from_weights(weights: &[Vec<f64>]) -> Result<Self> {
        let c_out = weights.len();
        let n = weights.first().map_or(0, Vec::len);
        if c_out == 0 || n == 0 || weights.iter().any(|r| r.len() != n) {
            return Err(Error::contract("fusion weights must be a non-empty rectangular matrix"));
        }
        let data = weights.iter().flatten().map(|&v| T::of(v)).collect();
        Ok(Self {
            attn: LayerParams {
                weight: Tensor::from_vec([c_out, n], data)?.with_grad(),
                bias: Tensor::zeros([c_out]).with_grad(),
            },
        })
    }

    pub fn c_out(&self) -> usize {
        self.attn.weight.shape()[0]
    }

    pub fn fuse_on<'t>(&self, bound: &BoundParams<'t, T>, maps: Var<'t, T>) -> Result<Var<'t, T>> {
        maps.pointwise(bound)
    }
}

/// Per-pixel linear combination of the maps.
pub fn fuse_guidance<T: Real>(f: &FusionLayer<T>, y: &EigenMaps<T>) -> Result<Tensor<T>> {
    layers::pointwise(&y.maps, &f.attn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let net = SsgNet::<f32>::new(SsgConfig::default(), 0).unwrap();
        // kernels 972 + 23328 + 23328 + 5832 + 486, biases 165, norm affines 324
        assert_eq!(net.param_count(), 54_435);
    }

    #[test]
    fn more_maps_only_grow_the_last_layer() {
        let base = SsgNet::<f32>::new(SsgConfig::default(), 0).unwrap();
        let wide = SsgNet::<f32>::new(
            SsgConfig {
                n_eigenmaps: 10,
                ..SsgConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(wide.param_count() - base.param_count(), 7 * (18 * 9 + 1));
        assert_eq!(wide.enc1, base.enc1);
    }

    #[test]
    fn zero_width_is_rejected() {
        let cfg = SsgConfig {
            widths: [0, 72, 36, 18],
            ..SsgConfig::default()
        };
        assert!(SsgNet::<f32>::new(cfg, 0).is_err());
        let cfg = SsgConfig {
            n_eigenmaps: 1,
            ..SsgConfig::default()
        };
        assert!(SsgNet::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = SsgNet::<f32>::new(SsgConfig::default(), 0).unwrap();
        let err = net.forward(&Tensor::zeros([1, 3, 10, 12])).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn fusion_selects_and_averages() {
        let maps = EigenMaps::new(Tensor::<f64>::from_vec([1, 3, 1, 2], vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap()).unwrap();
        let pick = FusionLayer::from_weights(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(fuse_guidance(&pick, &maps).unwrap().data(), &[0.2, 0.5]);
        let third = 1.0 / 3.0;
        let avg = FusionLayer::from_weights(&[vec![third; 3]]).unwrap();
        let out = fuse_guidance(&avg, &maps).unwrap();
        assert!(out.data().iter().all(|v| (v - third).abs() < 1e-15));
    }
}

//! Worked values checked against independently computed references.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssgnet::gradcheck::{check_fn, FdOptions};
use ssgnet::graph::{extract_features, knn_search};
use ssgnet::loss::{eigen_loss, evaluate, spatial_loss_per_pixel, total_loss, LossConfig};
use ssgnet::spectral::{
    dense_smallest_eigs, lanczos_smallest_eigs, principal_angle_cosines, reference_softseg, smallest_eigs,
    LanczosOptions,
};
use ssgnet::synthetic::random_image;
use ssgnet::tensor::layers::{conv2d, LayerParams};
use ssgnet::{image_laplacian, EigenMaps, FusionLayer, GraphConfig, SsgConfig, SsgNet, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Features written out from the definition: color, then position scaled
/// by `eta / max(h, w)`.
fn features(img: &Tensor<f64>, eta: f64) -> Vec<[f64; 5]> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let s = eta / h.max(w) as f64;
    (0..h * w)
        .map(|i| [d[i], d[h * w + i], d[2 * h * w + i], s * (i % w) as f64, s * (i / w) as f64])
        .collect()
}

fn dist(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Every other pixel sorted by (distance, index); the first `k` are kept.
fn sorted_neighbors(f: &[[f64; 5]], k: usize) -> Vec<Vec<usize>> {
    (0..f.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..f.len()).filter(|&j| j != i).map(|j| (dist(&f[i], &f[j]), j)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

#[test]
fn knn_matches_an_exhaustive_sort() {
    let img = random_image::<f64>(8, 8, &mut rng(1));
    let got = knn_search(&extract_features(&img, 1.0).unwrap(), 10).unwrap();
    let want = sorted_neighbors(&features(&img, 1.0), 10);
    for (i, row) in want.iter().enumerate() {
        let got: Vec<usize> = got.of(i).iter().map(|&j| j as usize).collect();
        assert_eq!(&got, row, "pixel {i}");
    }
}

#[test]
fn laplacian_matches_dense_construction() {
    let img = random_image::<f64>(4, 4, &mut rng(2));
    let k = 5;
    let f = features(&img, 1.0);
    let n = f.len();
    let mut a = vec![0.0; n * n];
    for (i, row) in sorted_neighbors(&f, k).iter().enumerate() {
        for &j in row {
            a[i * n + j] = (1.0 - dist(&f[i], &f[j])).clamp(0.0, 1.0);
        }
    }
    let l = image_laplacian(&img, GraphConfig { k, eta: 1.0 }).unwrap();
    for i in 0..n {
        let degree: f64 = (0..n).map(|j| 0.5 * (a[i * n + j] + a[j * n + i])).sum();
        for j in 0..n {
            let want = if i == j { degree } else { -0.5 * (a[i * n + j] + a[j * n + i]) };
            assert!((l.get(i, j) - want).abs() < 1e-12, "({i}, {j}): {} vs {want}", l.get(i, j));
        }
    }
}

#[test]
fn quadratic_form_gradient_matches_differences() {
    let r = &mut rng(3);
    let l = image_laplacian(&random_image::<f64>(5, 5, r), GraphConfig::default()).unwrap();
    let y: Vec<f64> = (0..25).map(|_| r.random_range(-1.0..1.0)).collect();
    let g = l.quadratic_form_grad(&y).unwrap();
    let h = 1e-5;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for i in 0..25 {
        let mut p = y.clone();
        p[i] += h;
        let mut m = y.clone();
        m[i] -= h;
        let num = (l.quadratic_form(&p).unwrap() - l.quadratic_form(&m).unwrap()) / (2.0 * h);
        diff += (num - g[i]).powi(2);
        scale += g[i] * g[i];
    }
    assert!(diff.sqrt() / scale.sqrt() < 1e-7);
}

#[test]
fn strided_conv_shape_and_input_gradient() {
    let r = &mut rng(4);
    let x = Tensor::<f64>::randn([2, 3, 16, 16], 1.0, r);
    let p = LayerParams::<f64>::kaiming3x3(5, 3, r).unwrap();
    assert_eq!(conv2d(&x, &p, 2).unwrap().shape(), &[2, 5, 8, 8]);
    let opts = FdOptions {
        step: 1e-5,
        max_entries: None,
        seed: 0,
    };
    let (errs, _) = check_fn(
        &[x],
        |t, v| {
            let b = p.bind(t);
            Ok(v[0].conv2d(&b, 2)?.sum())
        },
        &opts,
    )
    .unwrap();
    assert!(errs[0] < 1e-5, "{errs:?}");
}

#[test]
fn smallest_eigenvalues_bound_random_frames() {
    let r = &mut rng(5);
    let l = image_laplacian(&random_image::<f64>(8, 8, r), GraphConfig::default()).unwrap();
    let m = 3;
    let exact: f64 = dense_smallest_eigs(&l, m).unwrap().values.iter().sum();
    let n = l.n_nodes();
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        // Gram-Schmidt on Gaussian vectors gives a random orthonormal frame
        let mut frame: Vec<Vec<f64>> = Vec::new();
        while frame.len() < m {
            let mut v: Vec<f64> = Tensor::<f64>::randn([n], 1.0, r).into_data();
            for u in &frame {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
            frame.push(v);
        }
        let energy: f64 = frame.iter().map(|v| l.quadratic_form(v).unwrap()).sum();
        best = best.min(energy);
    }
    assert!(exact <= best + 1e-12, "eigen sum {exact} above sampled {best}");
}

#[test]
fn lanczos_agrees_with_dense_on_64_node_graphs() {
    let r = &mut rng(6);
    for _ in 0..5 {
        let l = image_laplacian(&random_image::<f64>(8, 8, r), GraphConfig::default()).unwrap();
        let m = 4;
        let d = dense_smallest_eigs(&l, m).unwrap();
        let z = lanczos_smallest_eigs(&l, m, &LanczosOptions::default()).unwrap();
        for (a, b) in d.values.iter().zip(&z.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let worst = principal_angle_cosines(&d.vectors, &z.vectors).unwrap()[0];
        assert!(worst.min(1.0).acos() < 1e-4, "cos {worst}");
    }
}

#[test]
fn single_pair_of_a_connected_graph_is_constant() {
    let r = &mut rng(7);
    let l = image_laplacian(&random_image::<f64>(6, 6, r), GraphConfig::default()).unwrap();
    assert_eq!(l.component_count(), 1);
    let p = lanczos_smallest_eigs(&l, 1, &LanczosOptions::default()).unwrap();
    assert!(p.values[0].abs() < 1e-8);
    let c = 1.0 / 6.0;
    assert!(p.vectors[0].iter().all(|v| (v.abs() - c).abs() < 1e-8));
}

#[test]
fn fiedler_map_separates_two_blobs() {
    let (h, w) = (12, 16);
    let r = &mut rng(8);
    let mut img = Tensor::<f64>::zeros([3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let base = if x < w / 2 { [0.3, 0.4, 0.5] } else { [0.6, 0.7, 0.8] };
            for (c, b) in base.iter().enumerate() {
                img.data_mut()[(c * h + y) * w + x] = b + r.random_range(-0.02..0.02);
            }
        }
    }
    let l = image_laplacian(&img, GraphConfig::default()).unwrap();
    let map = reference_softseg::<f64>(&smallest_eigs(&l, 2).unwrap(), 1, h, w).unwrap();
    let v = map.channel(0, 0);
    let mean = |left: bool| {
        let px: Vec<f64> = (0..h * w).filter(|i| (i % w < w / 2) == left).map(|i| v[i]).collect();
        px.iter().sum::<f64>() / px.len() as f64
    };
    assert!((mean(true) - mean(false)).abs() > 0.5, "{} vs {}", mean(true), mean(false));
}

#[test]
fn network_keeps_input_resolution() {
    let net = SsgNet::<f32>::new(SsgConfig::default(), 0).unwrap();
    for s in [64, 256] {
        let x = Tensor::<f32>::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut rng(9));
        assert_eq!(net.forward(&x).unwrap().maps.shape(), &[1, 3, s, s]);
    }
}

#[test]
fn fused_loss_reaches_every_parameter() {
    let mut net = SsgNet::<f64>::new(SsgConfig::default(), 1).unwrap();
    let fusion = FusionLayer::<f64>::new(3, 1, 2).unwrap();
    let x = Tensor::<f64>::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng(10));
    let tape = Tape::new();
    let bound = net.bind(&tape);
    let fb = fusion.attn.bind(&tape);
    let y = net.forward_on(&bound, tape.constant(x)).unwrap();
    let loss = fusion.fuse_on(&fb, y).unwrap().square().sum();
    let grads = loss.backward().unwrap();
    net.zero_grad();
    net.accumulate_grads(&bound, &grads).unwrap();
    for (name, p) in net.named_params() {
        let g = p.grad.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|v| *v != 0.0), "{name} gradient is zero");
    }
}

#[test]
fn eigen_loss_gradient_is_twice_laplacian_times_maps() {
    let r = &mut rng(11);
    let l = Arc::new(image_laplacian(&random_image::<f64>(5, 6, r), GraphConfig::default()).unwrap());
    let y = Tensor::<f64>::rand_uniform([1, 3, 5, 6], 0.0, 1.0, r);
    let tape = Tape::new();
    let v = tape.variable(y.clone());
    let grads = eigen_loss(v, std::slice::from_ref(&l)).unwrap().backward().unwrap();
    let g = grads.get(&v).unwrap();
    let dense = l.to_dense();
    let n = 30;
    for k in 0..3 {
        let yk = &y.data()[k * n..(k + 1) * n];
        for i in 0..n {
            let want = 2.0 * (0..n).map(|j| dense[i * n + j] * yk[j]).sum::<f64>();
            let got = g[k * n + i];
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-9), "{got} vs {want}");
        }
    }
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_terms() {
    let r = &mut rng(12);
    let (h, w) = (4, 5);
    let graphs: Vec<Arc<_>> = (0..2)
        .map(|_| Arc::new(image_laplacian(&random_image::<f64>(h, w, r), GraphConfig::default()).unwrap()))
        .collect();
    let raw = Tensor::<f64>::rand_uniform([2, 3, h, w], 0.0, 1.0, r);
    // normalize by hand so the maps lie on the simplex
    let mut y = raw.clone();
    let n = h * w;
    for b in 0..2 {
        for p in 0..n {
            let s: f64 = (0..3).map(|k| raw.data()[(b * 3 + k) * n + p]).sum();
            for k in 0..3 {
                y.data_mut()[(b * 3 + k) * n + p] /= s;
            }
        }
    }
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let got = total_loss(tape.constant(y.clone()), &graphs, &cfg).unwrap().breakdown();

    let (mut eigen, mut spatial) = (0.0, 0.0);
    for (b, l) in graphs.iter().enumerate() {
        let dense = l.to_dense();
        for k in 0..3 {
            let yk = &y.data()[(b * 3 + k) * n..(b * 3 + k + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    eigen += yk[i] * dense[i * n + j] * yk[j];
                }
            }
        }
        for p in 0..n {
            let px: Vec<f64> = (0..3).map(|k| y.data()[(b * 3 + k) * n + p]).collect();
            spatial += spatial_loss_per_pixel(&px, cfg.gamma);
        }
    }
    let (eigen, spatial) = (eigen / 2.0, spatial / 2.0);
    assert!((got.eigen - eigen).abs() < 1e-9 * eigen.max(1.0));
    assert!((got.spatial - spatial).abs() < 1e-9 * spatial.max(1.0));
    assert!((got.total - (eigen + cfg.lambda * spatial)).abs() < 1e-9 * got.total.max(1.0));

    let maps = EigenMaps::new(y).unwrap();
    let refs: Vec<&_> = graphs.iter().map(|g| g.as_ref()).collect();
    let eval = evaluate(&maps, &refs, &cfg).unwrap();
    assert!((eval.total - got.total).abs() < 1e-9 * got.total.max(1.0));
}

#[test]
fn uniform_pixel_spatial_value() {
    let third = 1.0f64 / 3.0;
    let want = 3.0 * third.powf(0.9) + 3.0 * (2.0 * third).powf(0.9) - 1.0;
    let got = spatial_loss_per_pixel(&[third; 3], 0.9);
    assert!((got - want).abs() < 1e-12);
    assert!((got - 2.199).abs() < 5e-4);
}

use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compares analytic parameter gradients of `sum(out * probe)` against
/// central finite differences.
fn grad_check<F>(params: &ParamSet<f64>, probe_seed: u64, build: F)
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> NodeId,
{
    let mut g = Graph::new();
    let out = build(&mut g, params);
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = rand_tensor(&mut rng, g.value(out).shape(), 1.0);
    let grads = g.backward_from(out, &probe, params).unwrap();

    let objective = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let out = build(&mut g, p);
        dot(g.value(out).data(), probe.data())
    };
    let h = 1e-6;
    let mut work = params.clone();
    for i in 0..params.len() {
        for j in 0..params.get(i).len() {
            let orig = work.get(i).data()[j];
            work.get_mut(i).data_mut()[j] = orig + h;
            let up = objective(&work);
            work.get_mut(i).data_mut()[j] = orig - h;
            let down = objective(&work);
            work.get_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(i).map_or(0.0, |t| t.data()[j]);
            assert!(
                rel_err(analytic, numeric) < 1e-4,
                "param {} [{j}]: analytic {analytic} vs numeric {numeric}",
                params.name(i)
            );
        }
    }
}

fn set_of(tensors: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, t) in tensors {
        p.insert(n, t).unwrap();
    }
    p
}

const SEEDS: u64 = 20;

#[test]
fn identity_linear_passes_input_through() {
    let mut p = ParamSet::<f64>::new();
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    p.insert("w", Tensor::new(vec![3, 3], eye).unwrap()).unwrap();
    p.insert("b", Tensor::zeros(vec![3])).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap());
    let (w, b) = (g.param(&p, 0).unwrap(), g.param(&p, 1).unwrap());
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn relu_of_known_values() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_shapes_round_trip_64_31_64() {
    assert_eq!(conv_out(64), Some((64 - 4) / 2 + 1));
    assert_eq!(conv_out(64), Some(31));
    assert_eq!(deconv_out(31), 64);
    assert_eq!(conv_out(3), None);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamSet::<f32>::new();
    LayerSpec::Conv2d { in_channels: 3, out_channels: 4 }
        .init_params("c", &mut p, &mut rng)
        .unwrap();
    LayerSpec::TransposedConv2d { in_channels: 4, out_channels: 3 }
        .init_params("d", &mut p, &mut rng)
        .unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2, 3, 64, 64]));
    let (cw, cb) = (g.param(&p, 0).unwrap(), g.param(&p, 1).unwrap());
    let y = g.conv2d(x, cw, cb).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 31, 31]);
    let (dw, db) = (g.param(&p, 2).unwrap(), g.param(&p, 3).unwrap());
    let z = g.conv_transpose2d(y, dw, db).unwrap();
    assert_eq!(g.value(z).shape(), &[2, 3, 64, 64]);
    assert_eq!(
        LayerSpec::Conv2d { in_channels: 3, out_channels: 4 }.spatial_out(64),
        Some(31)
    );
}

/// Direct nested-loop convolution used as an oracle.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, _] = x.shape().try_into().unwrap();
    let oc = w.shape()[0];
    let o = (h - 4) / 2 + 1;
    let mut out = vec![0.0; n * oc * o * o];
    for s in 0..n {
        for k in 0..oc {
            for oy in 0..o {
                for ox in 0..o {
                    let mut acc = b.data()[k];
                    for ch in 0..c {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let xv = x.data()[((s * c + ch) * h + oy * 2 + ky) * h + ox * 2 + kx];
                                acc += w.data()[k * c * 16 + ch * 16 + ky * 4 + kx] * xv;
                            }
                        }
                    }
                    out[((s * oc + k) * o + oy) * o + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 9, 9], 1.0);
    let w = rand_tensor(&mut rng, &[4, 48], 1.0);
    let b = rand_tensor(&mut rng, &[4], 1.0);
    let expected = naive_conv(&x, &w, &b);
    let p = set_of(vec![("w", w), ("b", b)]);
    let mut g = Graph::new();
    let xi = g.input(x);
    let (wi, bi) = (g.param(&p, 0).unwrap(), g.param(&p, 1).unwrap());
    let y = g.conv2d(xi, wi, bi).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 3, 3]);
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> = <x, deconv(y)> with the same weights and no bias.
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 10, 10], 1.0);
        let y = rand_tensor(&mut rng, &[2, 5, 4, 4], 1.0);
        let w = rand_tensor(&mut rng, &[5, 48], 1.0);
        let p = set_of(vec![
            ("w", w),
            ("b5", Tensor::zeros(vec![5])),
            ("b3", Tensor::zeros(vec![3])),
        ]);
        let mut g = Graph::new();
        let (xi, yi) = (g.input(x.clone()), g.input(y.clone()));
        let w = g.param(&p, 0).unwrap();
        let (b5, b3) = (g.param(&p, 1).unwrap(), g.param(&p, 2).unwrap());
        let cx = g.conv2d(xi, w, b5).unwrap();
        let dy = g.conv_transpose2d(yi, w, b3).unwrap();
        assert_eq!(g.value(dy).shape(), x.shape());
        let lhs = dot(g.value(cx).data(), y.data());
        let rhs = dot(x.data(), g.value(dy).data());
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn gradcheck_linear() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = set_of(vec![
            ("x", rand_tensor(&mut rng, &[3, 4], 1.0)),
            ("w", rand_tensor(&mut rng, &[4, 5], 1.0)),
            ("b", rand_tensor(&mut rng, &[5], 1.0)),
        ]);
        grad_check(&p, seed + 100, |g, p| {
            let x = g.param(p, 0).unwrap();
            let w = g.param(p, 1).unwrap();
            let b = g.param(p, 2).unwrap();
            g.linear(x, w, b).unwrap()
        });
    }
}

#[test]
fn gradcheck_conv2d() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = set_of(vec![
            ("x", rand_tensor(&mut rng, &[2, 2, 8, 8], 1.0)),
            ("w", rand_tensor(&mut rng, &[3, 32], 0.5)),
            ("b", rand_tensor(&mut rng, &[3], 0.5)),
        ]);
        grad_check(&p, seed + 100, |g, p| {
            let x = g.param(p, 0).unwrap();
            let w = g.param(p, 1).unwrap();
            let b = g.param(p, 2).unwrap();
            g.conv2d(x, w, b).unwrap()
        });
    }
}

#[test]
fn gradcheck_transposed_conv2d() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = set_of(vec![
            ("x", rand_tensor(&mut rng, &[2, 2, 3, 3], 1.0)),
            ("w", rand_tensor(&mut rng, &[2, 48], 0.5)),
            ("b", rand_tensor(&mut rng, &[3], 0.5)),
        ]);
        grad_check(&p, seed + 100, |g, p| {
            let x = g.param(p, 0).unwrap();
            let w = g.param(p, 1).unwrap();
            let b = g.param(p, 2).unwrap();
            g.conv_transpose2d(x, w, b).unwrap()
        });
    }
}

#[test]
fn gradcheck_relu_concat_slice_reshape_add_scale() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = set_of(vec![
            ("a", rand_tensor(&mut rng, &[3, 4], 1.0)),
            ("b", rand_tensor(&mut rng, &[3, 2], 1.0)),
            ("c", rand_tensor(&mut rng, &[3, 3], 1.0)),
        ]);
        grad_check(&p, seed + 100, |g, p| {
            let a = g.param(p, 0).unwrap();
            let b = g.param(p, 1).unwrap();
            let c = g.param(p, 2).unwrap();
            let r = g.relu(a);
            let cat = g.concat(r, b).unwrap();
            let s = g.slice(cat, 2, 3).unwrap();
            let sum = g.add(s, c).unwrap();
            let sc = g.scale(sum, -1.7);
            g.reshape(sc, vec![9]).unwrap()
        });
    }
}

#[test]
fn gradcheck_losses_and_reparameterize() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = rand_tensor(&mut rng, &[4, 3], 2.0);
        let p = set_of(vec![
            ("mu", rand_tensor(&mut rng, &[4, 3], 1.0)),
            ("lv", rand_tensor(&mut rng, &[4, 3], 1.5)),
            ("t", rand_tensor(&mut rng, &[4, 3], 1.0)),
        ]);
        grad_check(&p, seed + 100, |g, p| {
            let mu = g.param(p, 0).unwrap();
            let lv = g.param(p, 1).unwrap();
            let t = g.param(p, 2).unwrap();
            let z = g.reparameterize(mu, lv, &eps).unwrap();
            let m = g.mse(z, t).unwrap();
            let k = g.kl(mu, lv).unwrap();
            g.add(m, k).unwrap()
        });
    }
}

#[test]
fn gradcheck_small_network_end_to_end() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        LayerSpec::Conv2d { in_channels: 1, out_channels: 2 }
            .init_params("conv", &mut p, &mut rng)
            .unwrap();
        LayerSpec::FullyConnected { inputs: 18 + 2, outputs: 6 }
            .init_params("enc", &mut p, &mut rng)
            .unwrap();
        LayerSpec::FullyConnected { inputs: 3 + 2, outputs: 4 }
            .init_params("dec", &mut p, &mut rng)
            .unwrap();
        // Non-zero biases so every parameter sees a generic point.
        for name in ["conv.b", "enc.b", "dec.b"] {
            let i = p.index_of(name).unwrap();
            for v in p.get_mut(i).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let img = rand_tensor(&mut rng, &[2, 1, 8, 8], 1.0);
        let cond = rand_tensor(&mut rng, &[2, 2], 1.0);
        let target = rand_tensor(&mut rng, &[2, 4], 1.0);
        let eps = rand_tensor(&mut rng, &[2, 3], 1.0);
        grad_check(&p, seed, |g, p| {
            let x = g.input(img.clone());
            let c = g.input(cond.clone());
            let t = g.input(target.clone());
            let cw = g.param_named(p, "conv.w").unwrap();
            let cb = g.param_named(p, "conv.b").unwrap();
            let h = g.conv2d(x, cw, cb).unwrap();
            let h = g.relu(h);
            let h = g.reshape(h, vec![2, 18]).unwrap();
            let h = g.concat(h, c).unwrap();
            let ew = g.param_named(p, "enc.w").unwrap();
            let eb = g.param_named(p, "enc.b").unwrap();
            let stats = g.linear(h, ew, eb).unwrap();
            let mu = g.slice(stats, 0, 3).unwrap();
            let lv = g.slice(stats, 3, 3).unwrap();
            let z = g.reparameterize(mu, lv, &eps).unwrap();
            let zc = g.concat(z, c).unwrap();
            let dw = g.param_named(p, "dec.w").unwrap();
            let db = g.param_named(p, "dec.b").unwrap();
            let y = g.linear(zc, dw, db).unwrap();
            let m = g.mse(y, t).unwrap();
            let k = g.kl(mu, lv).unwrap();
            g.add(m, k).unwrap()
        });
    }
}

#[test]
fn mse_known_values_and_minimum() {
    assert_eq!(mse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(mse(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());

    let p = set_of(vec![("x", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap())]);
    let mut g = Graph::new();
    let x = g.param(&p, 0).unwrap();
    let c = g.input(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let l = g.mse(x, c).unwrap();
    assert_eq!(g.value(l).data(), &[0.0]);
    let grads = g.backward(l, &p).unwrap();
    assert!(grads.get(0).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn graph_mse_matches_reference_and_rejects_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let b = g.input(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let m = g.mse(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[1.0]);
    let c = g.input(Tensor::zeros(vec![3]));
    assert!(matches!(g.mse(a, c), Err(NnError::Shape(_))));
}

#[test]
fn scaling_loss_scales_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = set_of(vec![
        ("w", rand_tensor(&mut rng, &[4, 2], 1.0)),
        ("b", rand_tensor(&mut rng, &[2], 1.0)),
    ]);
    let x = rand_tensor(&mut rng, &[5, 4], 1.0);
    let t = rand_tensor(&mut rng, &[5, 2], 1.0);
    let grads_for = |c: f64| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let ti = g.input(t.clone());
        let (w, b) = (g.param(&p, 0).unwrap(), g.param(&p, 1).unwrap());
        let y = g.linear(xi, w, b).unwrap();
        let l = g.mse(y, ti).unwrap();
        let l = g.scale(l, c);
        g.backward(l, &p).unwrap()
    };
    let base = grads_for(1.0);
    let scaled = grads_for(3.0);
    for i in 0..p.len() {
        for (a, b) in base.get(i).unwrap().data().iter().zip(scaled.get(i).unwrap().data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }
}

/// KL divergence by Simpson integration of p(x) ln(p(x)/q(x)).
fn kl_by_integration(mu: f64, sigma: f64) -> f64 {
    let pdf = |x: f64, m: f64, s: f64| {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let (a, b, n) = (-30.0, 30.0, 60_000);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let p = pdf(x, mu, sigma);
        if p < 1e-300 {
            0.0
        } else {
            p * (p / pdf(x, 0.0, 1.0)).ln()
        }
    };
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn kl_known_values_against_integration() {
    let cases = [(0.0, 0.0), (1.0, 0.0), (0.0, 4f64.ln())];
    for (mu, lv) in cases {
        let oracle = kl_by_integration(mu, (lv / 2.0).exp());
        let closed = kl_to_standard_normal(&[mu], &[lv]).unwrap();
        assert!((closed - oracle).abs() < 1e-3, "{closed} vs {oracle}");
    }
    assert_eq!(kl_to_standard_normal(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    assert!((kl_to_standard_normal(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-12);
    let v = kl_to_standard_normal(&[0.0], &[4f64.ln()]).unwrap();
    assert!((v - (1.5 - 2f64.ln())).abs() < 1e-12);
    assert!((v - 0.8069).abs() < 1e-4);
}

#[test]
fn graph_kl_is_batch_mean_of_row_sums() {
    let mu = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let lv = Tensor::from_rows(&[vec![0.0, 0.0], vec![4f64.ln(), 0.0]]).unwrap();
    let mut g = Graph::new();
    let (m, l) = (g.input(mu), g.input(lv));
    let k = g.kl(m, l).unwrap();
    let expected = (0.5 + (1.5 - 2f64.ln())) / 2.0;
    assert!((g.value(k).data()[0] - expected).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kl_is_non_negative(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..16)) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_to_standard_normal(&mu, &lv).unwrap() >= 0.0);
    }

    #[test]
    fn mse_is_symmetric(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }
}

#[test]
fn reparameterize_limits() {
    let mu = [0.3, -1.2, 4.0];
    assert_eq!(reparameterize(&mu, &[0.5, -0.2, 1.0], &[0.0; 3]).unwrap(), mu.to_vec());
    let z = reparameterize(&mu, &[-40.0; 3], &[2.5, -3.0, 1.0]).unwrap();
    for (a, b) in z.iter().zip(&mu) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(reparameterize(&mu, &[0.0; 2], &[0.0; 3]).is_err());
}

#[test]
fn reparameterize_monte_carlo_moments() {
    let (mu, lv) = (1.5, (0.64f64).ln());
    let sigma = (lv / 2.0).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = reparameterize(&vec![mu; n], &vec![lv; n], &eps).unwrap();
    let mean = z.iter().sum::<f64>() / n as f64;
    let sd = (z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    assert!(((mean - mu) / mu).abs() < 0.02, "mean {mean}");
    assert!(((sd - sigma) / sigma).abs() < 0.02, "sd {sd}");
}

fn quadratic_grad(p: &ParamSet<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Grads<f64> {
    // Route through the tape so Adam sees real `Grads`.
    let mut g = Graph::new();
    let w = g.param(p, 0).unwrap();
    let grad = Tensor::new(p.get(0).shape().to_vec(), f(p.get(0).data())).unwrap();
    g.backward_from(w, &grad, p).unwrap()
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut p = set_of(vec![("w", Tensor::new(vec![2], vec![0.7, -0.4]).unwrap())]);
    let before = p.clone();
    let mut opt = Adam::new(AdamConfig::default(), &p);
    for _ in 0..10 {
        let g = quadratic_grad(&p, |w| vec![0.0; w.len()]);
        opt.step(&mut p, &g).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_descends_on_square() {
    let mut p = set_of(vec![("w", Tensor::new(vec![1], vec![1.0]).unwrap())]);
    let mut opt = Adam::new(AdamConfig::default(), &p);
    let g = quadratic_grad(&p, |w| vec![2.0 * w[0]]);
    opt.step(&mut p, &g).unwrap();
    assert!(p.get(0).data()[0].abs() < 1.0);
}

#[test]
fn adam_reaches_quadratic_minimum() {
    // f(w) = (w - a)^T A (w - a) with A = [[3, 1], [1, 2]].
    let a = [1.5, -0.5];
    let grad = |w: &[f64]| {
        let d = [w[0] - a[0], w[1] - a[1]];
        vec![2.0 * (3.0 * d[0] + d[1]), 2.0 * (d[0] + 2.0 * d[1])]
    };
    let mut p = set_of(vec![("w", Tensor::zeros(vec![2]))]);
    let cfg = AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(cfg, &p);
    for _ in 0..200 {
        let g = quadratic_grad(&p, grad);
        opt.step(&mut p, &g).unwrap();
    }
    let w = p.get(0).data();
    assert!((w[0] - a[0]).abs() < 1e-3 && (w[1] - a[1]).abs() < 1e-3, "{w:?}");
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut p = set_of(vec![("w", Tensor::zeros(vec![2]))]);
    let mut opt = Adam::new(AdamConfig::default(), &p);
    let g = quadratic_grad(&p, |_| vec![f64::NAN, 0.0]);
    assert!(matches!(opt.step(&mut p, &g), Err(NnError::NonFinite(_))));
    assert_eq!(p.get(0).data(), &[0.0, 0.0]);
    let other = set_of(vec![("w", Tensor::zeros(vec![3]))]);
    let g = quadratic_grad(&other, |_| vec![1.0; 3]);
    assert!(matches!(opt.step(&mut p, &g), Err(NnError::Shape(_))));
}

#[test]
fn stale_tape_is_rejected() {
    let mut p = set_of(vec![("w", Tensor::new(vec![1], vec![2.0]).unwrap())]);
    let mut g = Graph::new();
    let w = g.param(&p, 0).unwrap();
    let l = g.mse(w, w).unwrap();
    assert!(g.backward(l, &p).is_ok());
    p.get_mut(0).data_mut()[0] = 3.0;
    assert!(matches!(g.backward(l, &p), Err(NnError::StaleTape)));
    // A different set with the same contents is a different identity.
    let q = p.clone();
    let mut g = Graph::new();
    let w = g.param(&p, 0).unwrap();
    let l = g.mse(w, w).unwrap();
    assert!(matches!(g.backward(l, &q), Err(NnError::StaleTape)));
    assert!(matches!(g.param(&q, 0), Err(NnError::StaleTape)));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(vec![2, 3]));
    let w = g.input(Tensor::zeros(vec![4, 5]));
    let b = g.input(Tensor::zeros(vec![5]));
    assert!(matches!(g.linear(x, w, b), Err(NnError::Shape(_))));
    assert!(matches!(g.slice(x, 2, 2), Err(NnError::Shape(_))));
    assert!(matches!(g.reshape(x, vec![5]), Err(NnError::Shape(_))));
    let img = g.input(Tensor::zeros(vec![1, 1, 3, 3]));
    let cw = g.input(Tensor::zeros(vec![1, 16]));
    let cb = g.input(Tensor::zeros(vec![1]));
    assert!(matches!(g.conv2d(img, cw, cb), Err(NnError::Shape(_))));
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn glorot_init_names_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamSet::<f32>::new();
    let spec = LayerSpec::FullyConnected { inputs: 30, outputs: 10 };
    spec.init_params("fc1", &mut p, &mut rng).unwrap();
    LayerSpec::Relu.init_params("r", &mut p, &mut rng).unwrap();
    assert_eq!(p.len(), 2);
    let limit = (6.0f32 / 40.0).sqrt();
    let w = p.by_name("fc1.w").unwrap();
    assert_eq!(w.shape(), &[30, 10]);
    assert!(w.data().iter().all(|v| v.abs() <= limit));
    assert!(w.data().iter().any(|v| v.abs() > limit / 2.0));
    assert!(p.by_name("fc1.b").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(spec.init_params("fc1", &mut p, &mut rng).is_err());
}

fn sample_model() -> ModelFile {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::new();
    LayerSpec::Conv2d { in_channels: 3, out_channels: 2 }
        .init_params("conv", &mut params, &mut rng)
        .unwrap();
    LayerSpec::FullyConnected { inputs: 5, outputs: 7 }
        .init_params("fc", &mut params, &mut rng)
        .unwrap();
    let mut stats = crate::dataset::NormStats {
        mean: [0.0; crate::dataset::N_CHANNELS],
        std: [1.0; crate::dataset::N_CHANNELS],
        clamped: [false; crate::dataset::N_CHANNELS],
    };
    stats.mean[3] = 0.25;
    stats.std[7] = 2.5;
    stats.clamped[40] = true;
    ModelFile {
        descriptor: "{\"kind\":\"test\"}".into(),
        stats,
        params,
    }
}

#[test]
fn ssm1_round_trip_through_disk() {
    let m = sample_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ssm");
    save_params(&m, &path).unwrap();
    assert!(!dir.path().join("m.ssm.partial").exists());
    let back = load_params(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_bytes(), m.to_bytes());
}

#[test]
fn ssm1_corruption_is_classified() {
    let bytes = sample_model().to_bytes();
    assert_eq!(&bytes[..4], &SSM_MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ModelFile::from_bytes(&bad), Err(NnError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(SSM_VERSION + 1).to_le_bytes());
    assert!(matches!(
        ModelFile::from_bytes(&bad),
        Err(NnError::UnsupportedVersion(2))
    ));

    for cut in [2, 10, 30, bytes.len() - 1] {
        assert!(
            matches!(ModelFile::from_bytes(&bytes[..cut]), Err(NnError::Truncated { .. })),
            "cut at {cut}"
        );
    }

    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(ModelFile::from_bytes(&longer), Err(NnError::Corrupt(_))));

    for pos in [20, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(
            matches!(ModelFile::from_bytes(&bad), Err(NnError::Checksum { .. })),
            "flip at {pos}"
        );
    }

    // Valid checksum over a structurally broken payload.
    let mut bad = bytes.clone();
    bad[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
    let end = bad.len() - 4;
    let crc = crc32fast::hash(&bad[8..end]);
    bad[end..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(ModelFile::from_bytes(&bad), Err(NnError::Corrupt(_))));
}

#[test]
fn f32_and_f64_forward_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p64 = set_of(vec![
        ("w", rand_tensor(&mut rng, &[2, 32], 0.5)),
        ("b", rand_tensor(&mut rng, &[2], 0.5)),
    ]);
    let x64 = rand_tensor(&mut rng, &[1, 2, 6, 6], 1.0);
    let p32: ParamSet<f32> = p64.cast();
    let run = |p: &ParamSet<f32>| {
        let mut g = Graph::new();
        let x = g.input(x64.cast());
        let (w, b) = (g.param(p, 0).unwrap(), g.param(p, 1).unwrap());
        let y = g.conv2d(x, w, b).unwrap();
        g.value(y).clone()
    };
    let mut g = Graph::new();
    let x = g.input(x64.clone());
    let (w, b) = (g.param(&p64, 0).unwrap(), g.param(&p64, 1).unwrap());
    let y = g.conv2d(x, w, b).unwrap();
    for (a, b) in run(&p32).data().iter().zip(g.value(y).data()) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

//! Minimal differentiable tensor computation: dense tensors, a reverse-mode
//! tape, and the checkpoint format for parameter tensors.

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::real::Real;

/// Central finite differences of a scalar function at `x`.
pub fn numeric_gradient<R: Real>(f: impl Fn(&[R]) -> R, x: &[R], h: R) -> Vec<R> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad.push((fp - fm) / (R::two() * h));
    }
    grad
}

/// Largest relative error between an analytic and a numeric gradient.
pub fn max_relative_error<R: Real>(analytic: &[R], numeric: &[R]) -> R {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = R::zero();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(R::from_f64_lossy(1e-6));
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Gradient comparison with a relative bound plus a small absolute floor
/// soaking up central-difference roundoff on near-zero entries.
pub fn grads_close<R: Real>(analytic: &[R], numeric: &[R], rel_tol: R, abs_tol: R) -> bool {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).all(|(&a, &n)| {
        (a - n).abs() <= abs_tol + rel_tol * a.abs().max(n.abs())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::DensityKind;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let input = Tensor::from_vec(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        // 1x1 kernel = 2x2 identity matrix.
        let kernel = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let bias = Tensor::zeros(vec![2]);
        let x = tape.leaf(input.clone(), false);
        let k = tape.constant(kernel);
        let b = tape.constant(bias);
        let y = tape.conv2d(x, k, b, 1);
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn conv_zero_kernel_outputs_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![3, 3, 2], 5.0));
        let k = tape.constant(Tensor::zeros(vec![3, 3, 2, 1]));
        let b = tape.constant(Tensor::from_vec(vec![1], vec![2.5]));
        let y = tape.conv2d(x, k, b, 1);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    /// Direct nested-loop convolution reference (stride 1, SAME padding).
    fn conv_reference(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += input.at3(iy as usize, ix as usize, ci)
                                    * kernel.data()[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(oy * w + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let input = rand_tensor(&mut rng, vec![5, 5, 3], -1.0, 1.0);
            let kernel = rand_tensor(&mut rng, vec![3, 3, 3, 2], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, vec![2], -1.0, 1.0);
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let k = tape.constant(kernel.clone());
            let b = tape.constant(bias.clone());
            let y = tape.conv2d(x, k, b, 1);
            let want = conv_reference(&input, &kernel, &bias);
            for (a, e) in tape.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![4], vec![0.0, 20.0, 50.0, -50.0]));
        let sw = tape.swish(x);
        assert_eq!(tape.value(sw).data()[0], 0.0);
        assert!((tape.value(sw).data()[1] - 20.0).abs() < 1e-6);

        let th = tape.tanh(x);
        assert_eq!(tape.value(th).data()[0], 0.0);
        assert!((tape.value(th).data()[2] - 1.0).abs() < 1e-12);
        assert!((tape.value(th).data()[3] + 1.0).abs() < 1e-12);

        let sp = tape.softplus(x);
        assert!((tape.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.value(sp).data()[2] - 50.0).abs() < 1e-12);
        assert!(tape.value(sp).data()[3] > 0.0);
    }

    #[test]
    fn softmax_properties() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2, 3], vec![1.0, 1.0, 1.0, 5.0, 6.0, 7.0]));
        let y = tape.softmax_last(x);
        let d = tape.value(y).data().to_vec();
        for v in &d[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));

        // Shift invariance.
        let xs = tape.constant(Tensor::from_vec(vec![1, 3], vec![105.0, 106.0, 107.0]));
        let ys = tape.softmax_last(xs);
        for (a, b) in tape.value(ys).data().iter().zip(&d[3..6]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]), true);
        let s = tape.sum(x);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]), true);
        let sq = tape.mul(x, x);
        let s = tape.sum(sq);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
        let y = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]), true);
        let ysg = tape.stop_gradient(y);
        let prod = tape.mul(x, ysg);
        let s = tape.sum(prod);
        let grads = tape.backward(s);
        assert_eq!(grads.get(y), &[0.0, 0.0]);
        assert_eq!(grads.get(x), &[3.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
        let sg = tape.stop_gradient(x);
        let s = tape.sum(sg);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
        tape.backward(x);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, vec![4, 4, 2], -1.0, 1.0);
        let kernel = rand_tensor(&mut rng, vec![3, 3, 2, 2], -0.5, 0.5);
        let bias = rand_tensor(&mut rng, vec![2], -0.1, 0.1);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let k = tape.leaf(kernel.clone(), true);
            let b = tape.leaf(bias.clone(), true);
            let c = tape.conv2d(x, k, b, 1);
            let a = tape.swish(c);
            let s = tape.sum(a);
            let grads = tape.backward(s);
            grads.get(k).to_vec()
        };
        assert_eq!(run(), run());
    }

    /// Finite-difference check for a scalar loss built on tape ops, taking
    /// the gradient w.r.t. a chosen leaf.
    fn check_grad(
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
        x0: Tensor,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).to_vec();
        let shape = x0.shape().to_vec();
        let numeric = numeric_gradient(
            |vals| {
                let mut t = Tape::new();
                let xv = t.leaf(Tensor::from_vec(shape.clone(), vals.to_vec()), false);
                let l = build(&mut t, xv);
                t.value(l).item()
            },
            x0.data(),
            1e-5,
        );
        assert!(
            grads_close(&analytic, &numeric, tol, 1e-9),
            "gradient mismatch: rel err {}",
            max_relative_error(&analytic, &numeric)
        );
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x0 = rand_tensor(&mut rng, vec![7], -2.0, 2.0);
            check_grad(|t, x| { let y = t.swish(x); t.sum(y) }, x0.clone(), 1e-6);
            check_grad(|t, x| { let y = t.tanh(x); t.sum(y) }, x0.clone(), 1e-6);
            check_grad(|t, x| { let y = t.softplus(x); t.sum(y) }, x0.clone(), 1e-6);
            // Weighted softmax so the gradient is not the trivial zero.
            check_grad(
                |t, x| {
                    let y = t.softmax_flat(x);
                    let w = t.constant(Tensor::from_vec(
                        vec![7],
                        (0..7).map(|i| (i as f64) * 0.3 - 1.0).collect(),
                    ));
                    let wy = t.mul(y, w);
                    t.sum(wy)
                },
                x0,
                1e-4,
            );
        }
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_tensor(&mut rng, vec![1, 5], -2.0, 2.0);
        // Each output y_i as a function of logits: numeric Jacobian row sums ~ 0.
        for i in 0..5 {
            let numeric = numeric_gradient(
                |vals| {
                    let mut t = Tape::new();
                    let xv = t.leaf(Tensor::from_vec(vec![1, 5], vals.to_vec()), false);
                    let y = t.softmax_last(xv);
                    t.value(y).data()[i]
                },
                x0.data(),
                1e-6,
            );
            assert!(numeric.iter().sum::<f64>().abs() < 1e-8);
        }
    }

    #[test]
    fn composed_conv_swish_softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kernel = rand_tensor(&mut rng, vec![3, 3, 2, 3], -0.6, 0.6);
        let bias = rand_tensor(&mut rng, vec![3], -0.2, 0.2);
        let input = rand_tensor(&mut rng, vec![4, 4, 2], -1.0, 1.0);
        let weights = rand_tensor(&mut rng, vec![4 * 4 * 3], -1.0, 1.0);
        let build = |t: &mut Tape<f64>, k: Var| {
            let x = t.constant(input.clone());
            let b = t.constant(bias.clone());
            let c = t.conv2d(x, k, b, 1);
            let a = t.swish(c);
            let flat = t.concat_flat(&[a]);
            let sm = t.softmax_flat(flat);
            let w = t.constant(weights.clone());
            let wy = t.mul(sm, w);
            t.sum(wy)
        };
        check_grad(build, kernel, 1e-4);
    }

    #[test]
    fn strided_conv_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = rand_tensor(&mut rng, vec![4, 4, 2], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![2], -0.2, 0.2);
        let kernel0 = rand_tensor(&mut rng, vec![3, 3, 2, 2], -0.5, 0.5);
        check_grad(
            |t, k| {
                let x = t.constant(input.clone());
                let b = t.constant(bias.clone());
                let c = t.conv2d(x, k, b, 2);
                let u = t.upsample2x(c);
                let s = t.swish(u);
                t.sum(s)
            },
            kernel0,
            1e-5,
        );
    }

    #[test]
    fn slice_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        check_grad(
            |t, x| {
                let a = t.slice_last(x, 0, 2);
                let b = t.slice_last(x, 2, 4);
                let prod = t.mul(a, b);
                let cat = t.concat_last(&[prod, a]);
                let sq = t.mul(cat, cat);
                t.sum(sq)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn mixture_nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for kind in [DensityKind::Cauchy, DensityKind::Gaussian] {
            for _ in 0..5 {
                let k = 4;
                let mu0 = rand_tensor(&mut rng, vec![k, 4], 0.0, 20.0);
                let gamma0 = rand_tensor(&mut rng, vec![k, 4], 0.5, 4.0);
                let raw_pi: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw_pi.iter().sum();
                let pi0 = Tensor::from_vec(vec![k], raw_pi.iter().map(|v| v / s).collect());
                let targets: Vec<[f64; 4]> =
                    (0..3).map(|_| std::array::from_fn(|_| rng.random_range(0.0..20.0))).collect();

                // Gradient w.r.t. mu with gamma/pi fixed.
                let gamma_c = gamma0.clone();
                let pi_c = pi0.clone();
                let t_c = targets.clone();
                check_grad(
                    move |t, mu| {
                        let ga = t.constant(gamma_c.clone());
                        let pi = t.constant(pi_c.clone());
                        t.mixture_coord_nll(mu, ga, pi, &t_c, kind)
                    },
                    mu0.clone(),
                    1e-4,
                );

                // Gradient w.r.t. gamma.
                let mu_c = mu0.clone();
                let pi_c = pi0.clone();
                let t_c = targets.clone();
                check_grad(
                    move |t, ga| {
                        let mu = t.constant(mu_c.clone());
                        let pi = t.constant(pi_c.clone());
                        t.mixture_coord_nll(mu, ga, pi, &t_c, kind)
                    },
                    gamma0.clone(),
                    1e-4,
                );

                // Gradient w.r.t. pi (off the simplex is fine for the check).
                let mu_c = mu0.clone();
                let gamma_c = gamma0.clone();
                let t_c = targets.clone();
                check_grad(
                    move |t, pi| {
                        let mu = t.constant(mu_c.clone());
                        let ga = t.constant(gamma_c.clone());
                        t.mixture_coord_nll(mu, ga, pi, &t_c, kind)
                    },
                    pi0.clone(),
                    1e-4,
                );
            }
        }
    }

    #[test]
    fn full_nll_gradient_wrt_class_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = 3;
        let mu0 = rand_tensor(&mut rng, vec![k, 4], 0.0, 10.0);
        let gamma0 = rand_tensor(&mut rng, vec![k, 4], 0.5, 3.0);
        let pi0 = Tensor::from_vec(vec![k], vec![0.2, 0.5, 0.3]);
        let p0 = rand_tensor(&mut rng, vec![k, 4], 0.05, 1.0);
        let rois: Vec<([f64; 4], usize)> = (0..4)
            .map(|_| (std::array::from_fn(|_| rng.random_range(0.0..10.0)), rng.random_range(0..4)))
            .collect();
        let (mu_c, ga_c, pi_c, rois_c) = (mu0, gamma0, pi0, rois);
        check_grad(
            move |t, p| {
                let mu = t.constant(mu_c.clone());
                let ga = t.constant(ga_c.clone());
                let pi = t.constant(pi_c.clone());
                t.mixture_full_nll(mu, ga, pi, p, &rois_c, DensityKind::Cauchy)
            },
            p0,
            1e-5,
        );
    }

    #[test]
    fn f32_tape_smoke() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0f32, 2.0]), true);
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x), &[2.0f32, 4.0]);
    }
}

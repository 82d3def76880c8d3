//! Central finite-difference gradient verification.
//!
//! The reference gradient is computed purely from forward evaluations of the
//! function under test, so it shares nothing with the backward pass it
//! checks. Used across the test suites for every differentiable op and
//! assembled block.

use super::{backward, Tape, Tensor};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error bound.
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor that keeps near-zero gradients from
/// amplifying finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite difference of `f` w.r.t. every element of `inputs[wrt]`.
pub fn finite_diff(
    f: &dyn Fn(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    wrt: usize,
    step: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; inputs[wrt].numel()];
    for (j, g) in grad.iter_mut().enumerate() {
        let eval = |delta: f64| -> f64 {
            let mut probe: Vec<Tensor> = inputs.to_vec();
            let mut data = probe[wrt].data().to_vec();
            data[j] += delta;
            probe[wrt] = Tensor::from_vec(data, probe[wrt].shape().to_vec());
            f(&probe).item()
        };
        *g = (eval(step) - eval(-step)) / (2.0 * step);
    }
    grad
}

/// Compare reverse-mode gradients of the scalar function `f` against central
/// finite differences for every input. Returns the worst relative error.
///
/// `f` receives tensors that may or may not be tracked; it must be pure.
pub fn check_grads(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], step: f64) -> f64 {
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&tracked);
    assert_eq!(loss.numel(), 1, "check_grads needs a scalar function");
    let grads = backward(&loss).expect("backward failed during grad check");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads
            .wrt(&tracked[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let fd = finite_diff(f, inputs, i, step);
        for (a, b) in ad.data().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Stream};
    use crate::tensor::ops;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::derive(seed, Purpose::Init, 99);
        Tensor::randn(shape, &mut s)
    }

    fn uniform(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::derive(seed, Purpose::Init, 98);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| s.uniform_in(-1.0, 1.0)).collect();
        Tensor::from_vec(data, shape.to_vec())
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        for seed in 0..5 {
            let a = uniform(&[3, 4], seed);
            let b = uniform(&[3, 4], seed + 100);
            let err = check_grads(
                &|xs| {
                    let s = ops::silu(&ops::mul(&xs[0], &xs[1]).unwrap());
                    let t = ops::add(&ops::sub(&xs[0], &xs[1]).unwrap(), &s).unwrap();
                    ops::mean_all(&ops::scale(&t, 1.7))
                },
                &[a, b],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        for seed in 0..5 {
            let a = uniform(&[3, 4], seed);
            let b = uniform(&[4, 2], seed + 50);
            let err = check_grads(
                &|xs| ops::mean_all(&ops::mul(&ops::matmul(&xs[0], &xs[1]).unwrap(), &ops::matmul(&xs[0], &xs[1]).unwrap()).unwrap()),
                &[a, b],
                FD_STEP,
            );
            assert!(err < 1e-6, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn batched_matmul_grads_match_finite_differences() {
        for seed in 0..5 {
            let a = uniform(&[2, 3, 4], seed);
            let b = uniform(&[2, 4, 3], seed + 50);
            let err = check_grads(
                &|xs| {
                    let y = ops::matmul(&xs[0], &xs[1]).unwrap();
                    ops::mean_all(&ops::mul(&y, &y).unwrap())
                },
                &[a, b],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        for seed in 0..5 {
            let x = uniform(&[2, 2, 5, 4], seed);
            let w = uniform(&[3, 2, 3, 3], seed + 7);
            let b = uniform(&[3], seed + 13);
            for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
                let err = check_grads(
                    &move |xs| {
                        let y = ops::conv2d(&xs[0], &xs[1], Some(&xs[2]), stride, pad).unwrap();
                        ops::mean_all(&ops::mul(&y, &y).unwrap())
                    },
                    &[x.clone(), w.clone(), b.clone()],
                    FD_STEP,
                );
                assert!(err < FD_TOL, "seed {seed} s{stride} p{pad}: rel err {err}");
            }
        }
    }

    #[test]
    fn group_norm_grads_match_finite_differences() {
        for seed in 0..5 {
            let x = uniform(&[2, 8, 3, 2], seed);
            let gamma = uniform(&[8], seed + 3);
            let beta = uniform(&[8], seed + 5);
            let err = check_grads(
                &|xs| {
                    let y = ops::group_norm(&xs[0], 2, &xs[1], &xs[2], 1e-6).unwrap();
                    ops::mean_all(&ops::mul(&y, &y).unwrap())
                },
                &[x, gamma, beta],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        for seed in 0..5 {
            let x = uniform(&[3, 5], seed);
            let w = uniform(&[3, 5], seed + 9);
            let err = check_grads(
                &|xs| {
                    let y = ops::softmax(&xs[0], 1).unwrap();
                    ops::mean_all(&ops::mul(&y, &xs[1]).unwrap())
                },
                &[x, w],
                FD_STEP,
            );
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn concat_split_grads_route_to_sources() {
        for seed in 0..5 {
            let a = uniform(&[2, 3, 2], seed);
            let b = uniform(&[2, 2, 2], seed + 21);
            let err = check_grads(
                &|xs| {
                    let cat = ops::concat(&[&xs[0], &xs[1]], 1).unwrap();
                    let parts = ops::split(&cat, &[1, 4], 1).unwrap();
                    let q = ops::mul(&parts[1], &parts[1]).unwrap();
                    ops::add(&ops::sum_all(&parts[0]), &ops::mean_all(&q)).unwrap()
                },
                &[a, b],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn resampling_grads_match_finite_differences() {
        for seed in 0..5 {
            let x = uniform(&[1, 2, 4, 4], seed);
            let err = check_grads(
                &|xs| {
                    let up = ops::upsample_nearest(&xs[0], 2).unwrap();
                    let down = ops::avg_pool(&up, 4).unwrap();
                    ops::mean_all(&ops::mul(&down, &down).unwrap())
                },
                &[x],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn full_composition_grad_check() {
        // conv -> norm -> softmax-attention-ish mix -> loss, one graph.
        for seed in 0..5 {
            let x = uniform(&[1, 4, 4, 4], seed);
            let w = uniform(&[4, 4, 3, 3], seed + 1);
            let gamma = uniform(&[4], seed + 2);
            let beta = uniform(&[4], seed + 3);
            let proj = uniform(&[4, 4], seed + 4);
            let err = check_grads(
                &|xs| {
                    let y = ops::conv2d(&xs[0], &xs[1], None, 1, 1).unwrap();
                    let y = ops::group_norm(&y, 1, &xs[2], &xs[3], 1e-6).unwrap();
                    let tokens = ops::reshape(&y, &[1, 4, 16]).unwrap();
                    let tokens = ops::permute(&tokens, &[0, 2, 1]).unwrap();
                    let q = ops::linear(&tokens, &xs[4], None).unwrap();
                    let scores =
                        ops::matmul(&q, &ops::permute(&tokens, &[0, 2, 1]).unwrap()).unwrap();
                    let attn = ops::softmax(&ops::scale(&scores, 0.5), 2).unwrap();
                    let mixed = ops::matmul(&attn, &tokens).unwrap();
                    ops::mean_all(&ops::mul(&mixed, &mixed).unwrap())
                },
                &[x, w, gamma, beta, proj],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn randn_grads_for_add_channel_bias_and_clamp() {
        for seed in 0..5 {
            let x = ops::scale(&randn(&[2, 3, 2, 2], seed), 0.4);
            let t = ops::scale(&randn(&[2, 3], seed + 11), 0.4);
            let err = check_grads(
                &|xs| {
                    let y = ops::add_channel_bias(&xs[0], &xs[1]).unwrap();
                    let y = ops::clamp(&y, -0.9, 0.9);
                    ops::mean_all(&ops::mul(&y, &y).unwrap())
                },
                &[x, t],
                FD_STEP,
            );
            assert!(err < FD_TOL, "seed {seed}: rel err {err}");
        }
    }
}

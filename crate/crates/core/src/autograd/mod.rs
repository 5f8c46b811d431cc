//! Dense f64 tensors plus a tape-based reverse-mode differentiation engine.
//!
//! The op set is exactly what the three convolutional heads and the
//! policy-gradient objective need: conv2d, channel concatenation, pooling,
//! softmax, cross-entropy, detach, and a handful of elementwise/reduction
//! primitives. Everything is checked against central finite differences in
//! [`crate::gradcheck`].

mod graph;
mod tensor;

pub use graph::{Graph, TensorId, PROB_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    /// Independent naive sliding-window convolution: plain triple loop over
    /// output pixels, summing input*kernel products in index order.
    fn naive_conv2d(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        padding: usize,
    ) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, k) = (kernel.shape()[0], kernel.shape()[2]);
        let out_h = h + 2 * padding - k + 1;
        let out_w = w + 2 * padding - k + 1;
        let mut out = vec![0.0; c_out * out_h * out_w];
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy + ky;
                                let ix = ox + kx;
                                if iy < padding || ix < padding {
                                    continue;
                                }
                                let (iy, ix) = (iy - padding, ix - padding);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                acc += input.data()[ci * h * w + iy * w + ix]
                                    * kernel.data()[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
        Tensor::new(vec![c_out, out_h, out_w], out).unwrap()
    }

    fn lcg_values(seed: u64, count: usize) -> Vec<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..count)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let kernel = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let bias = g.constant(Tensor::zeros(&[1]));
        let out = g.conv2d(input, kernel, bias, 0).unwrap();
        assert_eq!(g.value(out).data(), g.value(input).data());
    }

    #[test]
    fn conv2d_zero_input_yields_bias() {
        let mut g = Graph::new();
        let input = g.constant(Tensor::zeros(&[2, 4, 4]));
        let kernel = g.constant(Tensor::new(vec![3, 2, 3, 3], lcg_values(5, 54)).unwrap());
        let bias = g.constant(Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap());
        let out = g.conv2d(input, kernel, bias, 1).unwrap();
        let t = g.value(out);
        for co in 0..3 {
            for v in &t.data()[co * 16..(co + 1) * 16] {
                approx(*v, [0.5, -1.5, 2.0][co], 1e-15);
            }
        }
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let input = Tensor::new(vec![1, 4, 4], lcg_values(11, 16)).unwrap();
        let kernel = Tensor::new(vec![2, 1, 3, 3], lcg_values(13, 18)).unwrap();
        let bias = Tensor::new(vec![2], lcg_values(17, 2)).unwrap();
        let expected = naive_conv2d(&input, &kernel, &bias, 1);

        let mut g = Graph::new();
        let i = g.constant(input);
        let k = g.constant(kernel);
        let b = g.constant(bias);
        let out = g.conv2d(i, k, b, 1).unwrap();
        assert_eq!(g.value(out).shape(), expected.shape());
        for (a, e) in g.value(out).data().iter().zip(expected.data()) {
            approx(*a, *e, 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let input = g.constant(Tensor::zeros(&[2, 4, 4]));
        let kernel = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let bias = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(input, kernel, bias, 1).is_err());
    }

    #[test]
    fn concat_orders_channels_and_routes_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single).data(), g.value(a).data());

        let total = g.sum(cat);
        g.backward(total).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn global_avg_pool_means_and_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2, 2], vec![3.0; 8]).unwrap());
        let pooled = g.global_avg_pool(a).unwrap();
        assert_eq!(g.value(pooled).data(), &[3.0, 3.0]);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let pooled = g.global_avg_pool(a).unwrap();
        approx(g.value(pooled).data()[0], 4.0, 1e-15);
        let root = g.sum(pooled);
        g.backward(root).unwrap();
        for v in g.grad(a).unwrap() {
            approx(*v, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_uniform_shift_invariant_and_matches_formula() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[5], 2.5));
        let s = g.softmax(a);
        for v in g.value(s).data() {
            approx(*v, 0.2, 1e-15);
        }

        let raw = lcg_values(23, 5);
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![5], raw.clone()).unwrap());
        let shifted: Vec<f64> = raw.iter().map(|v| v + 17.25).collect();
        let b = g.constant(Tensor::new(vec![5], shifted).unwrap());
        let sa = g.softmax(a);
        let sb = g.softmax(b);
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            approx(*x, *y, 1e-12);
        }

        // Direct exp/normalize oracle.
        let exps: Vec<f64> = raw.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (x, e) in g.value(sa).data().iter().zip(&exps) {
            approx(*x, e / total, 1e-12);
        }
        let sum: f64 = g.value(sa).data().iter().sum();
        approx(sum, 1.0, 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        let mut g = Graph::new();
        let exact = g.constant(Tensor::one_hot(4, 2).unwrap());
        let label = g.constant(Tensor::one_hot(4, 2).unwrap());
        let ce = g.cross_entropy(exact, label).unwrap();
        approx(g.value(ce).item(), 0.0, 1e-15);

        let mut g = Graph::new();
        let pred = g.constant(Tensor::full(&[10], 0.1));
        let label = g.constant(Tensor::one_hot(10, 7).unwrap());
        let ce = g.cross_entropy(pred, label).unwrap();
        approx(g.value(ce).item(), (10.0f64).ln(), 1e-12);

        let raw: Vec<f64> = lcg_values(31, 6).iter().map(|v| v.abs() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let weights: Vec<f64> = lcg_values(37, 6).iter().map(|v| v.abs()).collect();
        let direct: f64 = probs
            .iter()
            .zip(&weights)
            .map(|(p, l)| -l * p.ln())
            .sum();
        let mut g = Graph::new();
        let pred = g.constant(Tensor::new(vec![6], probs).unwrap());
        let label = g.constant(Tensor::new(vec![6], weights).unwrap());
        let ce = g.cross_entropy(pred, label).unwrap();
        approx(g.value(ce).item(), direct, 1e-12);
    }

    #[test]
    fn detach_blocks_gradient_but_keeps_values() {
        // d/dθ [ detach(θ²) ] = 0
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::scalar(3.0));
        let squared = g.mul(theta, theta).unwrap();
        let stopped = g.detach(squared);
        assert_eq!(g.value(stopped).data(), g.value(squared).data());
        g.backward(stopped).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[0.0]);

        // d/dθ [ detach(f(θ)) · g(θ) ] = f(θ) · g'(θ) with f=θ², g=θ³
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::scalar(2.0));
        let f = g.mul(theta, theta).unwrap();
        let f_const = g.detach(f);
        let theta_sq = g.mul(theta, theta).unwrap();
        let cube = g.mul(theta_sq, theta).unwrap();
        let prod = g.mul(f_const, cube).unwrap();
        g.backward(prod).unwrap();
        // f(2)=4, g'(2)=3·4=12 → 48
        approx(g.grad(theta).unwrap()[0], 48.0, 1e-12);
    }

    #[test]
    fn backward_simple_identities() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let root = g.sum(a);
        g.backward(root).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let sq = g.mul(a, a).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn backward_requires_scalar_root_and_runs_once() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(a).is_err());

        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0));
        let root = g.scale(a, 2.0);
        g.backward(root).unwrap();
        assert!(g.backward(root).is_err());
    }

    #[test]
    fn avg_pool_half_partial_windows() {
        let mut g = Graph::new();
        // 3x3 single channel: windows 2x2, 2x1, 1x2, 1x1
        let a = g.leaf(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let out = g.avg_pool_half(a).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 2, 2]);
        let d = g.value(out).data().to_vec();
        approx(d[0], (1.0 + 2.0 + 4.0 + 5.0) / 4.0, 1e-15);
        approx(d[1], (3.0 + 6.0) / 2.0, 1e-15);
        approx(d[2], (7.0 + 8.0) / 2.0, 1e-15);
        approx(d[3], 9.0, 1e-15);
        let root = g.sum(out);
        g.backward(root).unwrap();
        let grads = g.grad(a).unwrap();
        approx(grads[0], 0.25, 1e-15);
        approx(grads[2], 0.5, 1e-15);
        approx(grads[8], 1.0, 1e-15);
    }

    #[test]
    fn log_clamps_at_floor() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let l = g.log(a);
        approx(g.value(l).data()[0], PROB_EPS.ln(), 1e-9);
        approx(g.value(l).data()[1], 0.0, 1e-15);
        let root = g.sum(l);
        g.backward(root).unwrap();
        // Clamped entry contributes zero gradient.
        assert_eq!(g.grad(a).unwrap()[0], 0.0);
        approx(g.grad(a).unwrap()[1], 1.0, 1e-15);
    }
}

//! Dense tensors with a tape-based reverse-mode autodiff.
//!
//! Storage is row-major with no views; the only broadcast is the trailing-dim
//! bias add. Ops are methods on [`Graph`], each appending one node, and
//! [`Graph::backward`] walks the tape once in reverse. Nodes built only from
//! leaves with `requires_grad = false` never receive gradient storage, which is
//! how frozen parameters stay untouched.

mod backward;
pub mod counter_rng;
mod dense;
mod graph;
mod scalar;

pub use backward::Gradients;
pub use counter_rng::DropoutKey;
pub use dense::Tensor;
pub use graph::{Graph, Unary, Var};
pub use scalar::Scalar;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{grad_check, random_tensor, weighted_sum};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(weighted_sum(g, y, 3))
            },
            vec![random_tensor(&[3, 4], 1), random_tensor(&[4, 2], 2)],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[1, 2], &[1., 2.]));
        let y = g.softmax(x);
        let e = std::f64::consts::E;
        assert!((g.value(y).data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((g.value(y).data()[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((g.value(y).data()[0] - 0.26894).abs() < 1e-5);

        let x = g.constant(random_tensor(&[5, 7], 9));
        let y = g.softmax(x);
        for r in 0..5 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_square_and_independent_param() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.]), true);
        let p = g.leaf(t(&[1], &[5.]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.]);
        assert!(grads.get(p).unwrap_or(&[0.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient_storage() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(random_tensor(&[3, 3], 4), false);
        let x = g.leaf(random_tensor(&[2, 3], 5), true);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn glu_of_one_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1., 0.]));
        let y = g.glu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn group_norm_single_group_matches_layer_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[4, 6], 11));
        let gamma = g.constant(random_tensor(&[6], 12));
        let beta = g.constant(random_tensor(&[6], 13));
        let a = g.layer_norm(x, gamma, beta).unwrap();
        let b = g.group_norm(x, gamma, beta, 1).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-6);
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let gm = g.constant(Tensor::zeros(&[6]));
        assert!(matches!(g.group_norm(x, gm, gm, 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[8, 8], 1.0));
        let key = DropoutKey { seed: 1, step: 2, layer: 3 };
        let y = g.dropout(x, 0.5, key, false).unwrap();
        assert_eq!(y, x);
        let a = g.dropout(x, 0.5, key, true).unwrap();
        let b = g.dropout(x, 0.5, key, true).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let zeros = g.value(a).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 10 && zeros < 54, "{zeros}");
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let other = DropoutKey { step: 3, ..key };
        let c = g.dropout(x, 0.5, other, true).unwrap();
        assert_ne!(g.value(a), g.value(c));
    }

    #[test]
    fn time_shift_helpers_pad_and_slice() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.pad_rows(x, 3).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4., 0., 0.]);
        let s = g.slice_cols(p, 1, 1).unwrap();
        assert_eq!(g.value(s).data(), &[2., 4., 0.]);
        let r = g.slice_rows(p, 1, 2).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4., 0., 0.]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[5, 4], 3));
        let k = g.constant(t(&[3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]));
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn depthwise_conv_with_centered_delta_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[6, 3], 3));
        let mut w = Tensor::zeros(&[5, 3]);
        w.data_mut()[2 * 3..3 * 3].fill(1.0);
        let w = g.constant(w);
        let y = g.depthwise_conv1d(x, w).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(random_tensor(&[4, 4], 1).cast());
            let w = g.constant(random_tensor(&[4, 4], 2).cast());
            let y = g.matmul(x, w).unwrap();
            let y = g.dropout(y, 0.3, DropoutKey { seed: 9, step: 0, layer: 0 }, true).unwrap();
            let y = g.swish(y);
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn straight_through_takes_the_value_and_passes_the_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(random_tensor(&[2, 3], 6), true);
        let q = t(&[2, 3], &[1., 0., -1., 2., 0., 3.]);
        let y = g.straight_through(x, q.clone()).unwrap();
        assert_eq!(g.value(y), &q);
        let loss = weighted_sum(&mut g, y, 7);
        let grads = g.backward(loss).unwrap();
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(random_tensor(&[2, 3], 6), true);
        let loss2 = weighted_sum(&mut g2, x2, 7);
        assert_eq!(grads.get(x).unwrap(), g2.backward(loss2).unwrap().get(x2).unwrap());
    }
}

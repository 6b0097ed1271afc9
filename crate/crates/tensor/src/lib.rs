//! Dense tensors generic over [`Scalar`] (`f32` / `f64`) with a small
//! reverse-mode autodiff tape, parameter stores and Adam.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Grads, Graph, Unary, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamStore};
pub use scalar::{gemm, DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

#[cfg(test)]
mod op_tests {
    use super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor64 {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn pos(shape: &[usize], seed: u64) -> Tensor64 {
        rnd(shape, seed).map(|v| v.abs() + 0.1)
    }

    /// Contracts an arbitrary output with a fixed random tensor so every
    /// output entry contributes to the checked scalar.
    fn project<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
        let r = g.constant(rnd(&y.shape(), seed));
        (y * r).sum()
    }

    fn assert_grads<F>(inputs: &[Tensor64], f: F)
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let res = check(inputs, 24, 3, 1e-5, f);
        assert!(res.passes(1e-6), "max rel err {} in {:?}", res.max_rel_err(), res.probes);
    }

    #[test]
    fn elementwise_and_unary() {
        let a = rnd(&[2, 3, 4], 1);
        let b = rnd(&[2, 3, 4], 2);
        assert_grads(&[a.clone(), b.clone()], |g, v| project(g, v[0] * v[1] - v[0].scale(0.3), 9));
        assert_grads(&[a.clone()], |g, v| project(g, v[0].tanh() + v[0].sigmoid() + v[0].softplus(), 9));
        assert_grads(&[a.clone()], |g, v| project(g, v[0].leaky_relu(0.2) + v[0].square().exp().scale(0.1), 9));
        assert_grads(&[pos(&[7], 4)], |g, v| project(g, v[0].sqrt(0.0) + v[0].rsqrt(1e-3), 9));
        assert_grads(&[a], |g, v| project(g, v[0].add_scalar(2.0).mean() + v[0].sum(), 9));
    }

    #[test]
    fn matmul_linear_transpose() {
        assert_grads(&[rnd(&[3, 4], 1), rnd(&[4, 5], 2)], |g, v| project(g, v[0].matmul(v[1]).transpose(), 8));
        assert_grads(&[rnd(&[3, 4], 1), rnd(&[5, 4], 2), rnd(&[5], 3)], |g, v| {
            project(g, v[0].linear(v[1], Some(v[2])), 8)
        });
    }

    #[test]
    fn convolutions() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            assert_grads(&[rnd(&[2, 3, 6, 6], 1), rnd(&[4, 3, k, k], 2)], move |g, v| {
                project(g, v[0].conv2d(v[1], stride, pad), 8)
            });
        }
    }

    #[test]
    fn channel_ops_and_resampling() {
        assert_grads(&[rnd(&[2, 3, 4, 4], 1), rnd(&[3], 2), rnd(&[2, 3], 3)], |g, v| {
            project(g, v[0].add_channel_bias(v[1]).mul_channel(v[2]), 8)
        });
        assert_grads(&[rnd(&[2, 3, 4, 4], 1)], |g, v| {
            project(g, v[0].upsample2x().avg_pool2x2().avg_pool2x2(), 8) + project(g, v[0].global_avg_pool(), 7)
        });
        assert_grads(&[rnd(&[2, 5], 1), rnd(&[5], 2), rnd(&[1, 5], 3)], |g, v| {
            project(g, v[0].add_broadcast(v[1]) + v[2].broadcast_batch(2), 8)
        });
        assert_grads(&[rnd(&[2, 3, 4, 4], 1), rnd(&[1], 2)], |g, v| {
            let noise = g.constant(rnd(&[4, 4], 5));
            project(g, v[0].add_noise(noise, v[1]), 8)
        });
        assert_grads(&[rnd(&[2, 3, 2, 2], 1)], |g, v| project(g, v[0].normalize1(1e-8), 8));
    }

    #[test]
    fn shape_ops() {
        assert_grads(&[rnd(&[2, 3, 4], 1), rnd(&[2, 2, 4], 2)], |g, v| {
            let c = Var::concat1(&[v[0], v[1]]);
            project(g, c.slice1(1, 4).reshape(&[2, 12]), 8) + project(g, c.sum_inner(4), 6)
        });
        assert_grads(&[rnd(&[2, 3], 1), rnd(&[1, 3], 2)], |g, v| {
            let c = Var::concat0(&[v[0], v[1]]);
            project(g, c.slice0(1, 3), 8) + project(g, c.sum_per_sample(), 4)
        });
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x * x uses x twice; dy/dx = 2x.
        let g = Graph::new();
        let x = g.param(Tensor::<f64>::from_vec(&[2], vec![3.0, -1.5]).unwrap());
        let y = (x * x).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let w = g.constant(Tensor::<f32>::ones(&[2]));
        let x = g.param(Tensor::<f32>::ones(&[2]));
        let loss = (w * x).sum();
        let grads = g.backward(loss);
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
        assert!(!w.requires_grad());
    }
}

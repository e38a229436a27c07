//! Parameterized building blocks over [`Graph`] and [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BnBuffers, Graph, ParamId, ParamStore, Tensor, Var};

/// Tensor with entries drawn from U(−bound, bound).
pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                T::lit(rng.random_range(-bound..bound))
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("uniform init shape")
}

/// Fully connected layer `y = x·W (+ b)` on the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights ~ U(−1/√fan_in, 1/√fan_in); bias zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add_param(&format!("{name}.w"), uniform(&[fan_in, fan_out], bound, rng));
        let b = bias.then(|| store.add_param(&format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch norm with learned affine parameters and running statistics kept as
/// store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Number of training batches folded into the running statistics.
    pub batches: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            batches: store.add_buffer(&format!("{name}.batches"), Tensor::zeros(&[1])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let running = (
            store.get(self.running_mean).data(),
            store.get(self.running_var).data(),
        );
        g.batch_norm(
            x,
            gamma,
            beta,
            Some(running),
            Some(BnBuffers {
                mean: self.running_mean,
                var: self.running_var,
                count: self.batches,
            }),
        )
    }
}

/// Bias-free 2D convolution with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub size: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * size * size) as f64).sqrt();
        let k = store.add_param(
            &format!("{name}.k"),
            uniform(&[c_out, c_in, size, size], bound, rng),
        );
        Conv2d {
            k,
            c_in,
            c_out,
            size,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.k);
        g.conv2d(x, k, 1, self.pad)
    }
}

//! Parameterized building blocks shared by the models.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::SeededRng;

fn fan_in_normal(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), fan_in_normal(&[d_in, d_out], d_in, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row_vec(y, b)
    }
}

/// 2-D convolution with per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), fan_in_normal(&[c_out, c_in, k, k], c_in * k * k, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_col_vec(y, b)
    }
}

/// Transposed 2-D convolution with per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Self {
        // each output pixel sees roughly c_in·(k/stride)² inputs
        let fan = c_in * (k / stride.max(1)).pow(2);
        Self {
            w: store.add(format!("{name}.w"), fan_in_normal(&[c_in, c_out, k, k], fan, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv_transpose2d(x, w, self.stride, self.pad)?;
        g.add_col_vec(y, b)
    }
}

/// Overwrite every parameter with Gaussian noise. Used by gradient checks,
/// where zero-initialized layers would hide most of the graph.
pub fn randomize(store: &mut ParamStore, std: f64, rng: &mut SeededRng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, std, rng);
    }
}

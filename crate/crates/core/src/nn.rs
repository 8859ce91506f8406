//! Building blocks shared by the encoder and decoder.

use alloc::vec::Vec;

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::params::{ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.scope(name);
        let weight = s.xavier("weight", d_in, d_out);
        let bias = Some(s.zeros("bias", 1, d_out));
        Self { weight, bias }
    }

    /// He-initialised variant for layers followed by a ReLU.
    pub fn new_relu(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.scope(name);
        let weight = s.he("weight", d_in, d_out);
        let bias = Some(s.zeros("bias", 1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        core::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            gamma: s.constant("gamma", 1, d, 1.0),
            beta: s.zeros("beta", 1, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, heads: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            query: Linear::new(&mut s, "query", d_model, d_model),
            key: Linear::new(&mut s, "key", d_model, d_model),
            value: Linear::new(&mut s, "value", d_model, d_model),
            output: Linear::new(&mut s, "output", d_model, d_model),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, g: &mut Graph, x_q: Var, x_kv: Var, causal: bool) -> Var {
        let q = self.query.forward(g, x_q);
        let k = self.key.forward(g, x_kv);
        let v = self.value.forward(g, x_kv);
        let mixed = attend(g, q, k, v, self.heads, causal);
        self.output.forward(g, mixed)
    }
}

/// Splits projected `q`, `k`, `v` into heads, applies softmax attention per
/// head and concatenates the results.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores, causal);
        outs.push(g.matmul(probs, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, d_ff: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            hidden: Linear::new_relu(&mut s, "hidden", d_model, d_ff),
            output: Linear::new(&mut s, "output", d_ff, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Square-kernel convolution on an `(h*w) x c_in` grid, realised as patch
/// extraction followed by a matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu_init: bool,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let linear = if relu_init {
            Linear::new_relu(pb, name, fan_in, c_out)
        } else {
            Linear::new(pb, name, fan_in, c_out)
        };
        Self {
            linear,
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    pub fn geometry(&self, h: usize, w: usize) -> ConvGeometry {
        ConvGeometry {
            in_h: h,
            in_w: w,
            channels: self.c_in,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Returns the output grid and its spatial size.
    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let geom = self.geometry(h, w);
        let patches = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x
        } else {
            g.im2col(x, geom)
        };
        (self.linear.forward(g, patches), geom.out_h(), geom.out_w())
    }
}

use candle_core::{Tensor, D};

use super::store::{Init, ParamStore};
use crate::Result;

/// Numerically stable softmax over the last axis. The max shift is detached;
/// softmax is invariant to it so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// `y = x W + b` with `W: [in, out]`, applied over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(store, prefix, d_in, d_out, Init::TruncNormal(0.02))
    }

    pub fn with_init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let weight = store.param(&format!("{prefix}/weight"), &[d_in, d_out], init)?;
        let bias = store.param(&format!("{prefix}/bias"), &[d_out], Init::Zeros)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, d_in))?;
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.d_out();
        y.reshape(out_dims)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.param(&format!("{prefix}/gamma"), &[width], Init::Ones)?,
            beta: store.param(&format!("{prefix}/beta"), &[width], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{prefix}/fc1"), d_in, hidden)?,
            fc2: Linear::new(store, &format!("{prefix}/fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head self-attention over axis 1 of `[N, L, d]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::Error::Config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            qkv: Linear::new(store, &format!("{prefix}/qkv"), width, 3 * width)?,
            proj: Linear::new(store, &format!("{prefix}/proj"), width, width)?,
            heads,
        })
    }

    /// Returns the output and the attention weights `[N, heads, L, L]`.
    pub fn forward_with_weights(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let (n, l, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, l, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let out = weights
            .matmul(&v)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((n, l, d))?;
        Ok((self.proj.forward(&out)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(store, &format!("{prefix}/norm1"), width)?,
            attn: SelfAttention::new(store, &format!("{prefix}/attn"), width, heads)?,
            norm2: LayerNorm::new(store, &format!("{prefix}/norm2"), width)?,
            mlp: Mlp::new(store, &format!("{prefix}/mlp"), width, width * mlp_ratio, width)?,
        })
    }

    pub fn forward_with_weights(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let (a, w) = self.attn.forward_with_weights(&self.norm1.forward(x)?)?;
        let x = (x + a)?;
        let x = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((x, w))
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{prefix}/layer{i}"), width, heads, mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(TransformerStack { layers })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Forward pass keeping each layer's attention weights.
    pub fn forward_with_weights(&self, x: &Tensor) -> candle_core::Result<(Tensor, Vec<Tensor>)> {
        let mut x = x.clone();
        let mut all = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward_with_weights(&x)?;
            x = y;
            all.push(w);
        }
        Ok((x, all))
    }
}

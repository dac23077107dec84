//! Multi-head attention and the four attention patterns of an ST-DiT block.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamBuilder};

/// Softmax over the last axis. Composed from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Layer normalisation over the last axis without a learned affine.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionParams {
    /// Projections `d → d` for queries and output, `kv_dim → d` for keys and
    /// values.
    pub fn new(pb: &ParamBuilder, d: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: pb.linear(d, d, "q", Init::Uniform)?,
            k: pb.linear(kv_dim, d, "k", Init::Uniform)?,
            v: pb.linear(kv_dim, d, "v", Init::Uniform)?,
            o: pb.linear(d, d, "o", Init::Uniform)?,
            heads,
        })
    }

    /// Builds from explicit weight matrices (`out × in`), no biases.
    pub fn from_weights(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        let d = wq.dims2()?.0;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(wq, None),
            k: Linear::new(wk, None),
            v: Linear::new(wv, None),
            o: Linear::new(wo, None),
            heads,
        })
    }

    fn dim(&self) -> usize {
        self.q.weight().dims()[0]
    }

    fn kv_dim(&self) -> usize {
        self.k.weight().dims()[1]
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention probabilities `b × heads × Lq × Lk`.
    pub fn weights(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        self.check(query, kv)?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let scale = 1.0 / ((self.dim() / self.heads) as f64).sqrt();
        softmax_last(&(q.matmul(&k.t()?.contiguous()?)? * scale)?)
    }

    fn check(&self, query: &Tensor, kv: &Tensor) -> Result<()> {
        let (bq, _, dq) = query.dims3()?;
        let (bk, lk, dk) = kv.dims3()?;
        if dq != self.dim() || dk != self.kv_dim() {
            return shape_err(format!(
                "attention expects query dim {} and key dim {}, got {dq} and {dk}",
                self.dim(),
                self.kv_dim()
            ));
        }
        if bq != bk {
            return shape_err(format!("query batch {bq} != key batch {bk}"));
        }
        if lk == 0 {
            return shape_err("empty key sequence");
        }
        Ok(())
    }

    /// `query: b × Lq × d`, `kv: b × Lk × kv_dim` → `b × Lq × d`.
    pub fn attend(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let w = self.weights(query, kv)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let (b, h, lq, _) = w.dims4()?;
        let dh = self.dim() / h;
        let out = w.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, h * dh))?;
        Ok(self.o.forward(&out)?)
    }
}

pub fn multi_head_attention(query: &Tensor, kv: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    params.attend(query, kv)
}

/// Attention over the spatial tokens of each frame independently.
pub fn spatial_self_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    params.attend(x, x)
}

/// Attention over frames at each spatial site independently.
pub fn temporal_self_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let xt = x.transpose(0, 1)?.contiguous()?;
    Ok(params.attend(&xt, &xt)?.transpose(0, 1)?.contiguous()?)
}

/// Every token attends to the (already projected) prompt tokens `L_p × d`.
pub fn prompt_cross_attention(x: &Tensor, prompt: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (f, _, _) = x.dims3()?;
    let (lp, dp) = prompt.dims2()?;
    if lp == 0 {
        return shape_err("prompt embedding is empty");
    }
    let kv = prompt.unsqueeze(0)?.broadcast_as((f, lp, dp))?.contiguous()?;
    params.attend(x, &kv)
}

/// Repeats a single-frame feature `1 × s × d` along the temporal axis.
pub fn broadcast_temporal(feature: &Tensor, frames: usize) -> Result<Tensor> {
    let (one, s, d) = feature.dims3()?;
    if one != 1 {
        return shape_err(format!("garment feature must have one frame, got {one}"));
    }
    if frames == 0 {
        return shape_err("cannot broadcast to zero frames");
    }
    Ok(feature.broadcast_as((frames, s, d))?.contiguous()?)
}

/// Garment fusion: `SSA(r_p, r_p) + SCA(r_p, r_c)`, with `r_c` already
/// broadcast to the frame count of `r_p`.
pub fn attention_fusion(
    r_p: &Tensor,
    r_c: &Tensor,
    ssa: &AttentionParams,
    sca: &AttentionParams,
) -> Result<Tensor> {
    let (f, _, d) = r_p.dims3()?;
    let (fc, _, dc) = r_c.dims3()?;
    if f != fc || d != dc {
        return shape_err(format!("fusion inputs disagree: {:?} vs {:?}", r_p.dims(), r_c.dims()));
    }
    Ok((spatial_self_attention(r_p, ssa)? + sca.attend(r_p, r_c)?)?)
}

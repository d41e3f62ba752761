//! Transformer building blocks shared by the encoders and the decoder.
//!
//! Every parameter is a [`Weight`] tagged with a [`ParamGroup`]. Forward
//! passes receive a [`GradMask`]; weights outside the mask enter the graph
//! detached, so frozen groups never receive gradients and cost nothing in
//! the backward pass.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive attention bias for disallowed positions; `exp` of it underflows to exactly zero.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// High-level encoder body (patch embedding, positions, blocks).
    HighBody,
    /// High-level encoder final norm and projection to the decoder width.
    HighHead,
    LowEncoder,
    QualityHead,
    /// Decoder embeddings, MLPs, norms and output head.
    Decoder,
    /// Base query/key/value matrices of the decoder attention.
    DecoderQkv,
    DecoderLora,
}

impl ParamGroup {
    const fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of parameter groups that participate in gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradMask(u8);

impl GradMask {
    pub const NONE: GradMask = GradMask(0);

    pub fn all() -> Self {
        GradMask(0x7f)
    }

    pub fn with(self, g: ParamGroup) -> Self {
        GradMask(self.0 | g.bit())
    }

    pub fn without(self, g: ParamGroup) -> Self {
        GradMask(self.0 & !g.bit())
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }
}

#[derive(Debug, Clone)]
pub struct Weight {
    pub name: String,
    pub var: Var,
    pub group: ParamGroup,
}

impl Weight {
    pub fn tensor(&self, mask: GradMask) -> Tensor {
        if mask.contains(self.group) {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }
}

/// Creates and registers parameters with seeded initialization.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
    pub weights: Vec<Weight>,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng, dtype: DType, device: Device) -> Self {
        Self {
            rng,
            dtype,
            device,
            weights: Vec::new(),
        }
    }

    fn register(&mut self, name: String, group: ParamGroup, shape: &[usize], data: Vec<f64>) -> Result<Weight> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let w = Weight {
            name,
            var: Var::from_tensor(&t)?,
            group,
        };
        self.weights.push(w.clone());
        Ok(w)
    }

    pub fn normal(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], std: f64) -> Result<Weight> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name.into(), group, shape, data)
    }

    pub fn constant(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], value: f64) -> Result<Weight> {
        let n: usize = shape.iter().product();
        self.register(name.into(), group, shape, vec![value; n])
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// `y = x·W + b` with `W` stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Weight,
    pub bias: Option<Weight>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = pb.normal(format!("{name}.weight"), group, &[d_in, d_out], (1.0 / d_in as f64).sqrt())?;
        let bias = Some(pb.constant(format!("{name}.bias"), group, &[d_out], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.var.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.var.dims()[1]
    }

    pub fn forward(&self, x: &Tensor, mask: GradMask) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Input("linear layer on a scalar".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let flat = x.reshape((rows, d_in))?;
        let mut y = flat.matmul(&self.weight.tensor(mask))?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.tensor(mask))?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Low-rank additive update `scale·(A·B)` for a square projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Weight,
    pub b: Weight,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// `A` is Gaussian, `B` starts at zero so the adapted layer initially equals its base.
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must be in 1..={} for a {d_in}x{d_out} matrix",
                d_in.min(d_out)
            )));
        }
        let a = pb.normal(format!("{name}.lora_a"), ParamGroup::DecoderLora, &[d_in, rank], (1.0 / d_in as f64).sqrt())?;
        let b = pb.constant(format!("{name}.lora_b"), ParamGroup::DecoderLora, &[rank, d_out], 0.0)?;
        Ok(Self {
            a,
            b,
            rank,
            scale: 1.0 / rank as f64,
        })
    }

    pub fn param_count(&self) -> usize {
        self.a.var.elem_count() + self.b.var.elem_count()
    }

    /// Materialized `W + scale·A·B`; the base tensor is not modified.
    pub fn effective_weight(&self, base: &Tensor) -> Result<Tensor> {
        let delta = self.a.var.as_tensor().matmul(self.b.var.as_tensor())?;
        Ok((base + (delta * self.scale)?)?)
    }
}

/// A linear projection that may carry a LoRA adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub lora: Option<LoraAdapter>,
}

impl AdaptedLinear {
    pub fn forward(&self, x: &Tensor, mask: GradMask) -> Result<Tensor> {
        let y = self.base.forward(x, mask)?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let low = Linear {
                    weight: l.a.clone(),
                    bias: None,
                }
                .forward(x, mask)?;
                let up = Linear {
                    weight: l.b.clone(),
                    bias: None,
                }
                .forward(&low, mask)?;
                Ok((y + (up * l.scale)?)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Weight,
    pub beta: Weight,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, group: ParamGroup, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant(format!("{name}.gamma"), group, &[dim], 1.0)?,
            beta: pb.constant(format!("{name}.beta"), group, &[dim], 0.0)?,
            eps: 1e-6,
        })
    }

    /// Zero-mean, unit-variance rows, before the learned affine.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centered.broadcast_div(&(var + self.eps)?.sqrt()?)?)
    }

    pub fn forward(&self, x: &Tensor, mask: GradMask) -> Result<Tensor> {
        let n = self.normalize(x)?;
        Ok(n.broadcast_mul(&self.gamma.tensor(mask))?
            .broadcast_add(&self.beta.tensor(mask))?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        group: ParamGroup,
        qkv_group: ParamGroup,
        dim: usize,
        heads: usize,
        lora_rank: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        let proj = |pb: &mut ParamBuilder, which: &str| -> Result<AdaptedLinear> {
            let pname = format!("{name}.{which}");
            let base = Linear::new(pb, &pname, qkv_group, dim, dim)?;
            let lora = match lora_rank {
                Some(r) => Some(LoraAdapter::new(pb, &pname, dim, dim, r)?),
                None => None,
            };
            Ok(AdaptedLinear { base, lora })
        };
        let q = proj(pb, "q")?;
        let k = proj(pb, "k")?;
        let v = proj(pb, "v")?;
        let o = Linear::new(pb, &format!("{name}.o"), group, dim, dim)?;
        Ok(Self { q, k, v, o, heads })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        Ok(x.reshape((b, s, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, h, s, hd) = q.dims4()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let scores = match bias {
            Some(bias) => scores.broadcast_add(bias)?,
            None => scores,
        };
        let p = softmax_last(&scores)?;
        Ok(p.matmul(v)?.transpose(1, 2)?.reshape((b, s, h * hd))?)
    }

    /// `x`: (B, S, D); `bias`: broadcastable to (B, H, S, S).
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mask: GradMask) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(x, mask)?)?;
        let k = self.split_heads(&self.k.forward(x, mask)?)?;
        let v = self.split_heads(&self.v.forward(x, mask)?)?;
        let y = self.attend(&q, &k, &v, bias)?;
        self.o.forward(&y, mask)
    }

    /// Like [`forward`](Self::forward) but appends this call's keys/values to `cache`.
    /// `bias` covers the full (cached + new) key axis.
    pub fn forward_cached(&self, x: &Tensor, bias: Option<&Tensor>, cache: &mut Option<LayerCache>) -> Result<Tensor> {
        let m = GradMask::NONE;
        let q = self.split_heads(&self.q.forward(x, m)?)?;
        let mut k = self.split_heads(&self.k.forward(x, m)?)?;
        let mut v = self.split_heads(&self.v.forward(x, m)?)?;
        if let Some(c) = cache.as_ref() {
            k = Tensor::cat(&[&c.k, &k], 2)?;
            v = Tensor::cat(&[&c.v, &v], 2)?;
        }
        let y = self.attend(&q, &k, &v, bias)?;
        *cache = Some(LayerCache { k, v });
        self.o.forward(&y, m)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor, mask: GradMask) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x, mask)?.gelu()?, mask)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockSpec<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub qkv_group: ParamGroup,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub lora_rank: Option<usize>,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, spec: &BlockSpec) -> Result<Self> {
        let n = spec.name;
        Ok(Self {
            ln1: LayerNorm::new(pb, &format!("{n}.ln1"), spec.group, spec.dim)?,
            attn: Attention::new(pb, &format!("{n}.attn"), spec.group, spec.qkv_group, spec.dim, spec.heads, spec.lora_rank)?,
            ln2: LayerNorm::new(pb, &format!("{n}.ln2"), spec.group, spec.dim)?,
            mlp: Mlp {
                fc1: Linear::new(pb, &format!("{n}.mlp.fc1"), spec.group, spec.dim, spec.mlp_dim)?,
                fc2: Linear::new(pb, &format!("{n}.mlp.fc2"), spec.group, spec.mlp_dim, spec.dim)?,
            },
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mask: GradMask) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x, mask)?, bias, mask)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x, mask)?, mask)?)?)
    }

    pub fn forward_cached(&self, x: &Tensor, bias: Option<&Tensor>, cache: &mut Option<LayerCache>) -> Result<Tensor> {
        let m = GradMask::NONE;
        let x = (x + self.attn.forward_cached(&self.ln1.forward(x, m)?, bias, cache)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x, m)?, m)?)?)
    }
}

/// Fails with the offending stage name if `t` holds NaN or infinity.
pub fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    let bad = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .any(|v| !v.is_finite());
    if bad {
        return Err(Error::Numeric(format!("non-finite activations after {stage}")));
    }
    Ok(())
}

//! High-level (context) and low-level (pixel) vision encoders.
//!
//! Both are small ViTs with learned positional embeddings. The high-level
//! encoder sees the aspect-destroying resize of the whole frame; the
//! low-level encoder sees K full-resolution patches, projects each to the
//! decoder width, averages over the patch axis and layer-normalizes.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{FloatImage, FrameBundle, ViewConfig};
use crate::nn::{Block, BlockSpec, GradMask, LayerNorm, Linear, ParamBuilder, ParamGroup, Weight};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    High,
    Low,
    Text,
}

/// `T×D` token embeddings tagged with their origin.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub tokens: Tensor,
    pub segment: Segment,
    pub frame_index: usize,
}

impl EmbeddingSequence {
    pub fn new(tokens: Tensor, segment: Segment, frame_index: usize) -> Result<Self> {
        tokens.dims2()?;
        Ok(Self {
            tokens,
            segment,
            frame_index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub patch_embed_size: usize,
    pub frozen: bool,
}

impl EncoderConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{what}.model_dim ({}) must be divisible by {what}.heads ({})",
                self.model_dim, self.heads
            )));
        }
        if self.patch_embed_size == 0 {
            return Err(Error::Config(format!("{what}.patch_embed_size must be positive")));
        }
        Ok(())
    }
}

/// ViT over non-overlapping patch tokens of a fixed-size image.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    pub patch_embed: Linear,
    pub pos: Weight,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub patch: usize,
    pub image: (usize, usize),
}

impl VisionTransformer {
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cfg: &EncoderConfig,
        image: (usize, usize),
        body: ParamGroup,
        head: ParamGroup,
    ) -> Result<Self> {
        cfg.validate(name)?;
        let p = cfg.patch_embed_size;
        if image.0 % p != 0 || image.1 % p != 0 {
            return Err(Error::Config(format!(
                "{name}: input {}x{} is not divisible by patch_embed_size {p}",
                image.0, image.1
            )));
        }
        let tokens = (image.0 / p) * (image.1 / p);
        let patch_embed = Linear::new(pb, &format!("{name}.patch_embed"), body, p * p * 3, cfg.model_dim)?;
        let pos = pb.normal(format!("{name}.pos"), body, &[tokens, cfg.model_dim], 0.02)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    pb,
                    &BlockSpec {
                        name: &format!("{name}.blocks.{i}"),
                        group: body,
                        qkv_group: body,
                        dim: cfg.model_dim,
                        heads: cfg.heads,
                        mlp_dim: cfg.mlp_dim,
                        lora_rank: None,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(pb, &format!("{name}.ln_f"), head, cfg.model_dim)?;
        Ok(Self {
            patch_embed,
            pos,
            blocks,
            ln_f,
            patch: p,
            image,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.image.0 / self.patch) * (self.image.1 / self.patch)
    }

    pub fn token_width(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// `tokens`: (N, T, p·p·3) → (N, T, model_dim).
    pub fn forward(&self, tokens: &Tensor, mask: GradMask) -> Result<Tensor> {
        let mut x = self
            .patch_embed
            .forward(tokens, mask)?
            .broadcast_add(&self.pos.tensor(mask))?;
        for b in &self.blocks {
            x = b.forward(&x, None, mask)?;
        }
        self.ln_f.forward(&x, mask)
    }

    fn check_image(&self, img: &FloatImage, what: &str) -> Result<()> {
        if (img.height, img.width) != self.image {
            return Err(Error::Config(format!(
                "{what} is {}x{}, encoder expects {}x{}",
                img.height, img.width, self.image.0, self.image.1
            )));
        }
        Ok(())
    }
}

/// Context pathway: ViT on the resized frame, then a linear projection to `D`.
#[derive(Debug, Clone)]
pub struct HighLevelEncoder {
    pub vit: VisionTransformer,
    pub proj: Linear,
}

impl HighLevelEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig, view: &ViewConfig, out_dim: usize) -> Result<Self> {
        let vit = VisionTransformer::new(
            pb,
            "high",
            cfg,
            (view.high_h, view.high_w),
            ParamGroup::HighBody,
            ParamGroup::HighHead,
        )?;
        let proj = Linear::new(pb, "high.proj", ParamGroup::HighHead, cfg.model_dim, out_dim)?;
        Ok(Self { vit, proj })
    }

    /// (N, T_h, p²·3) → (N, T_h, D).
    pub fn forward(&self, tokens: &Tensor, mask: GradMask) -> Result<Tensor> {
        self.proj.forward(&self.vit.forward(tokens, mask)?, mask)
    }

    pub fn encode_high(&self, frame: &FloatImage) -> Result<EmbeddingSequence> {
        self.vit.check_image(frame, "high-level view")?;
        let t = self.vit.tokens();
        let data = frame.to_patch_tokens(self.vit.patch)?;
        let dev = self.proj.weight.var.device().clone();
        let x = Tensor::from_vec(data, (1, t, self.vit.token_width()), &dev)?.to_dtype(self.proj.weight.var.dtype())?;
        let u = self.forward(&x, GradMask::NONE)?.squeeze(0)?;
        EmbeddingSequence::new(u, Segment::High, 0)
    }
}

/// Pixel pathway: per-patch ViT, projection to `D`, mean over patches, layer norm.
#[derive(Debug, Clone)]
pub struct LowLevelEncoder {
    pub vit: VisionTransformer,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patches: usize,
}

impl LowLevelEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig, view: &ViewConfig, out_dim: usize) -> Result<Self> {
        let g = ParamGroup::LowEncoder;
        let vit = VisionTransformer::new(pb, "low", cfg, (view.patch, view.patch), g, g)?;
        let proj = Linear::new(pb, "low.proj", g, cfg.model_dim, out_dim)?;
        let norm = LayerNorm::new(pb, "low.norm", g, out_dim)?;
        Ok(Self {
            vit,
            proj,
            norm,
            patches: view.patches_per_frame,
        })
    }

    /// Projected, pooled embeddings before the final normalization: (N·K, T_q, P) → (N, T_q, D).
    pub fn pooled(&self, tokens: &Tensor, mask: GradMask) -> Result<Tensor> {
        let (nk, t, _) = tokens.dims3()?;
        if nk % self.patches != 0 {
            return Err(Error::Input(format!(
                "{nk} patch token sets is not a multiple of K={}",
                self.patches
            )));
        }
        let h = self.proj.forward(&self.vit.forward(tokens, mask)?, mask)?;
        let d = h.dims()[2];
        Ok(h.reshape((nk / self.patches, self.patches, t, d))?.mean(1)?)
    }

    pub fn forward(&self, tokens: &Tensor, mask: GradMask) -> Result<Tensor> {
        self.norm.forward(&self.pooled(tokens, mask)?, mask)
    }

    fn patch_tensor(&self, patches: &[FloatImage]) -> Result<Tensor> {
        if patches.len() != self.patches {
            return Err(Error::Input(format!(
                "expected {} patches, got {}",
                self.patches,
                patches.len()
            )));
        }
        let mut data = Vec::new();
        for p in patches {
            if (p.height, p.width) != self.vit.image {
                return Err(Error::Input(format!(
                    "patch is {}x{}, expected {}x{}",
                    p.height, p.width, self.vit.image.0, self.vit.image.1
                )));
            }
            data.extend(p.to_patch_tokens(self.vit.patch)?);
        }
        let dev = self.proj.weight.var.device().clone();
        Ok(Tensor::from_vec(data, (patches.len(), self.vit.tokens(), self.vit.token_width()), &dev)?
            .to_dtype(self.proj.weight.var.dtype())?)
    }

    pub fn encode_low(&self, patches: &[FloatImage]) -> Result<EmbeddingSequence> {
        let x = self.patch_tensor(patches)?;
        let v = self.forward(&x, GradMask::NONE)?.squeeze(0)?;
        EmbeddingSequence::new(v, Segment::Low, 0)
    }

    /// Pooled features before the learned affine of the final norm.
    pub fn encode_low_normalized(&self, patches: &[FloatImage]) -> Result<Tensor> {
        let x = self.patch_tensor(patches)?;
        self.norm.normalize(&self.pooled(&x, GradMask::NONE)?)?.squeeze(0).map_err(Into::into)
    }
}

/// Patch-token matrices of one clip, ready to be stacked into encoder batches.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVideo {
    pub frames: usize,
    /// M × T_h × (p_h²·3)
    pub high: Vec<f32>,
    /// M × K × T_q × (p_l²·3)
    pub low: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub high: HighLevelEncoder,
    pub low: LowLevelEncoder,
}

impl DualEncoder {
    pub fn prepare(&self, bundle: &FrameBundle) -> Result<PreparedVideo> {
        let mut high = Vec::new();
        let mut low = Vec::new();
        for (hv, ps) in bundle.high_view.iter().zip(&bundle.patch_view) {
            self.high.vit.check_image(hv, "high-level view")?;
            high.extend(hv.to_patch_tokens(self.high.vit.patch)?);
            if ps.patches.len() != self.low.patches {
                return Err(Error::Input(format!(
                    "expected {} patches, got {}",
                    self.low.patches,
                    ps.patches.len()
                )));
            }
            for p in &ps.patches {
                self.low.vit.check_image(p, "patch")?;
                low.extend(p.to_patch_tokens(self.low.vit.patch)?);
            }
        }
        Ok(PreparedVideo {
            frames: bundle.len(),
            high,
            low,
        })
    }

    /// Stacks videos (all with the same frame count) into encoder inputs.
    pub fn batch_inputs(&self, videos: &[&PreparedVideo], device: &Device, dtype: candle_core::DType) -> Result<(Tensor, Tensor)> {
        let m = videos.first().map(|v| v.frames).unwrap_or(0);
        if videos.iter().any(|v| v.frames != m) {
            return Err(Error::Input("videos in one batch must share the key-frame count".into()));
        }
        let n = videos.len() * m;
        let high: Vec<f32> = videos.iter().flat_map(|v| v.high.iter().copied()).collect();
        let low: Vec<f32> = videos.iter().flat_map(|v| v.low.iter().copied()).collect();
        let high = Tensor::from_vec(high, (n, self.high.vit.tokens(), self.high.vit.token_width()), device)?.to_dtype(dtype)?;
        let low = Tensor::from_vec(
            low,
            (n * self.low.patches, self.low.vit.tokens(), self.low.vit.token_width()),
            device,
        )?
        .to_dtype(dtype)?;
        Ok((high, low))
    }

    /// Per-frame (u, v) for a batch: (N·M, T_h, D) and (N·M, T_l, D).
    pub fn forward(&self, high: &Tensor, low: &Tensor, mask: GradMask) -> Result<(Tensor, Tensor)> {
        Ok((self.high.forward(high, mask)?, self.low.forward(low, mask)?))
    }

    pub fn encode_video(&self, bundle: &FrameBundle) -> Result<Vec<(EmbeddingSequence, EmbeddingSequence)>> {
        bundle
            .high_view
            .iter()
            .zip(&bundle.patch_view)
            .enumerate()
            .map(|(i, (hv, ps))| {
                let mut u = self.high.encode_high(hv)?;
                let mut v = self.low.encode_low(&ps.patches)?;
                u.frame_index = i;
                v.frame_index = i;
                Ok((u, v))
            })
            .collect()
    }
}

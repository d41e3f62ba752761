//! The assembled model: dual encoders, quality head and prefix-LM decoder.

use candle_core::{DType, Device, IndexOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    build_prefix_sequence, prompt_tokens, Decoder, DecoderConfig, DecoderTuning, Generation, Strategy, TokenSequence,
    VisualBlock, PAD, SUMMARY_PROMPT,
};
use crate::encoders::{DualEncoder, EmbeddingSequence, EncoderConfig, HighLevelEncoder, LowLevelEncoder, PreparedVideo, Segment};
use crate::error::{Error, Result};
use crate::media::{FrameBundle, VideoClip, ViewConfig};
use crate::nn::{GradMask, ParamBuilder, ParamGroup, Weight};
use crate::quality_head::{QualityHead, QualityScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub view: ViewConfig,
    pub high_encoder: EncoderConfig,
    pub low_encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Hidden width of the quality MLP; 0 means "same as the decoder width".
    pub head_hidden: usize,
    pub prompt: String,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            view: ViewConfig::default(),
            high_encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                model_dim: 64,
                mlp_dim: 128,
                patch_embed_size: 16,
                frozen: false,
            },
            low_encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                model_dim: 64,
                mlp_dim: 128,
                patch_embed_size: 8,
                frozen: false,
            },
            decoder: DecoderConfig::default(),
            head_hidden: 0,
            prompt: SUMMARY_PROMPT.to_string(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.decoder.dim
    }

    /// Visual tokens contributed by one video to the decoder prefix.
    pub fn visual_tokens_per_video(&self) -> usize {
        let v = &self.view;
        let th = (v.high_h / self.high_encoder.patch_embed_size) * (v.high_w / self.high_encoder.patch_embed_size);
        let tl = (v.patch / self.low_encoder.patch_embed_size).pow(2);
        v.key_frames * (th + tl)
    }
}

/// How much of the high-level encoder is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    Frozen,
    Head,
    All,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(Self::Frozen),
            "head" => Ok(Self::Head),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown freeze mode `{s}` (frozen|head|all)"))),
        }
    }
}

/// One sequence in a decoder training batch.
#[derive(Debug, Clone)]
pub struct TextSample {
    /// Index of the first video in the encoded batch.
    pub first: usize,
    /// Index of the second video, or `None` when it is a masked duplicate of the first.
    pub second: Option<usize>,
    pub target: TokenSequence,
}

#[derive(Debug, Clone)]
pub struct DuoVqa {
    pub cfg: ModelConfig,
    pub encoders: DualEncoder,
    pub head: QualityHead,
    pub decoder: Decoder,
    weights: Vec<Weight>,
    prompt: TokenSequence,
    device: Device,
    dtype: DType,
}

impl DuoVqa {
    pub fn new(cfg: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        let d = cfg.width();
        if cfg.decoder.heads == 0 || d % cfg.decoder.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.dim ({d}) must be divisible by decoder.heads ({})",
                cfg.decoder.heads
            )));
        }
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(cfg.init_seed), dtype, device.clone());
        let high = HighLevelEncoder::new(&mut pb, &cfg.high_encoder, &cfg.view, d)?;
        let low = LowLevelEncoder::new(&mut pb, &cfg.low_encoder, &cfg.view, d)?;
        let hidden = if cfg.head_hidden == 0 { d } else { cfg.head_hidden };
        let head = QualityHead::new(&mut pb, d, hidden)?;
        let decoder = Decoder::new(&mut pb, &cfg.decoder)?;
        let prompt = prompt_tokens(&cfg.prompt);
        let needed = 2 * cfg.visual_tokens_per_video() + prompt.len() + 1;
        if needed > cfg.decoder.max_positions {
            return Err(Error::Config(format!(
                "decoder.max_positions ({}) cannot hold two videos and the prompt ({needed} tokens)",
                cfg.decoder.max_positions
            )));
        }
        Ok(Self {
            encoders: DualEncoder { high, low },
            head,
            decoder,
            weights: pb.weights,
            prompt,
            device: device.clone(),
            dtype,
            cfg,
        })
    }

    pub fn weights(&self) -> &[Weight] {
        &self.weights
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn prompt(&self) -> &TokenSequence {
        &self.prompt
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.var.elem_count()).sum()
    }

    /// Parameter groups updated under the given freeze and decoder-tuning choices.
    pub fn grad_mask(&self, freeze: FreezeMode, tuning: DecoderTuning) -> GradMask {
        let mut m = GradMask::NONE.with(ParamGroup::QualityHead);
        if !self.cfg.high_encoder.frozen {
            match freeze {
                FreezeMode::Frozen => {}
                FreezeMode::Head => m = m.with(ParamGroup::HighHead),
                FreezeMode::All => m = m.with(ParamGroup::HighHead).with(ParamGroup::HighBody),
            }
        }
        if !self.cfg.low_encoder.frozen {
            m = m.with(ParamGroup::LowEncoder);
        }
        let has_lora = self.cfg.decoder.lora_rank > 0;
        match tuning {
            DecoderTuning::Frozen => {}
            DecoderTuning::AdaptersOnly => m = m.with(ParamGroup::DecoderLora),
            DecoderTuning::Adapters => {
                m = m.with(ParamGroup::DecoderLora).with(ParamGroup::Decoder);
                if !has_lora {
                    m = m.with(ParamGroup::DecoderQkv);
                }
            }
            DecoderTuning::Full => {
                m = m
                    .with(ParamGroup::DecoderLora)
                    .with(ParamGroup::Decoder)
                    .with(ParamGroup::DecoderQkv)
            }
        }
        m
    }

    pub fn prepare_clip(&self, clip: &VideoClip) -> Result<PreparedVideo> {
        self.encoders.prepare(&FrameBundle::from_clip(clip, &self.cfg.view)?)
    }

    /// Per-frame embeddings of a batch of videos: u (N·M, T_h, D), v (N·M, T_l, D).
    pub fn encode(&self, videos: &[&PreparedVideo], mask: GradMask) -> Result<(Tensor, Tensor)> {
        let (high, low) = self.encoders.batch_inputs(videos, &self.device, self.dtype)?;
        self.encoders.forward(&high, &low, mask)
    }

    /// Video-level raw scores (mean over key frames), (N,).
    pub fn video_scores(&self, u: &Tensor, v: &Tensor, n_videos: usize, mask: GradMask) -> Result<Tensor> {
        let frames = self.head.forward(u, v, mask)?;
        let m = frames.dims()[0] / n_videos.max(1);
        Ok(frames.reshape((n_videos, m))?.mean(1)?)
    }

    /// Decoder visual block per video, frames interleaved as [u_0, v_0, u_1, v_1, ...]: (N, M·(T_h+T_l), D).
    pub fn visual_tokens(&self, u: &Tensor, v: &Tensor, n_videos: usize) -> Result<Tensor> {
        let (nm, th, d) = u.dims3()?;
        let tl = v.dims()[1];
        let m = nm / n_videos.max(1);
        let per_frame = Tensor::cat(&[u, v], 1)?;
        Ok(per_frame.reshape((n_videos, m * (th + tl), d))?)
    }

    /// Mean next-token negative log-likelihood over all target tokens of the batch.
    pub fn text_loss(&self, visual: &Tensor, samples: &[TextSample], mask: GradMask) -> Result<Tensor> {
        let b = samples.len();
        if b == 0 {
            return Err(Error::Input("empty text batch".into()));
        }
        if samples.iter().any(|s| s.target.is_empty()) {
            return Err(Error::Input("text targets must be non-empty".into()));
        }
        let (_, tv, d) = visual.dims3()?;
        let lp = self.prompt.len();
        let omax = samples.iter().map(|s| s.target.len()).max().unwrap_or(0);
        let s_len = 2 * tv + lp + omax;
        if s_len > self.cfg.decoder.max_positions {
            return Err(Error::Input(format!(
                "training sequence of {s_len} tokens exceeds the decoder context limit of {}",
                self.cfg.decoder.max_positions
            )));
        }
        let first: Vec<u32> = samples.iter().map(|s| s.first as u32).collect();
        let second: Vec<u32> = samples.iter().map(|s| s.second.unwrap_or(s.first) as u32).collect();
        let first = visual.index_select(&Tensor::new(first.as_slice(), &self.device)?, 0)?;
        let second = visual.index_select(&Tensor::new(second.as_slice(), &self.device)?, 0)?;
        let prompt = self
            .decoder
            .embed_ids(self.prompt.ids(), mask)?
            .unsqueeze(0)?
            .broadcast_as((b, lp, d))?
            .contiguous()?;
        let mut ids = Vec::with_capacity(b * omax);
        for s in samples {
            ids.extend_from_slice(s.target.ids());
            ids.extend(std::iter::repeat(PAD).take(omax - s.target.len()));
        }
        let target = self.decoder.embed_ids(&ids, mask)?.reshape((b, omax, d))?;
        let x = Tensor::cat(&[&first, &second, &prompt, &target], 1)?;

        let prefix_len = 2 * tv + lp;
        let mut bias = Vec::with_capacity(b * s_len * s_len);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let mut valid = vec![true; s_len];
            if s.second.is_none() {
                valid[tv..2 * tv].iter_mut().for_each(|x| *x = false);
            }
            valid[prefix_len + s.target.len()..].iter_mut().for_each(|x| *x = false);
            let m = crate::decoder::AttentionMask::prefix_lm(valid, prefix_len);
            bias.extend(m.bias());
            for (k, &tok) in s.target.ids().iter().enumerate() {
                rows.push((i * s_len + prefix_len - 1 + k) as u32);
                labels.push(tok);
            }
        }
        let bias = Tensor::from_vec(bias, (b, 1, s_len, s_len), &self.device)?.to_dtype(self.dtype)?;
        let hidden = self.decoder.hidden(&x, &bias, mask)?.reshape((b * s_len, d))?;
        let picked = hidden.index_select(&Tensor::new(rows.as_slice(), &self.device)?, 0)?;
        let logits = self.decoder.logits(&picked, mask)?;
        let labels = Tensor::new(labels.as_slice(), &self.device)?;
        crate::training::loss_text(&logits, &labels)
    }

    /// Inference scores, batched in chunks to bound memory.
    pub fn score(&self, videos: &[PreparedVideo]) -> Result<Vec<QualityScore>> {
        let mut out = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(16) {
            let refs: Vec<&PreparedVideo> = chunk.iter().collect();
            let (u, v) = self.encode(&refs, GradMask::NONE)?;
            let frames = self.head.forward(&u, &v, GradMask::NONE)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let m = frames.len() / chunk.len();
            for f in frames.chunks(m) {
                out.push(QualityScore::from_frames(f.to_vec())?);
            }
        }
        Ok(out)
    }

    /// Per-frame (u, v) embedding sequences of one prepared video.
    pub fn frame_embeddings(&self, video: &PreparedVideo) -> Result<Vec<(EmbeddingSequence, EmbeddingSequence)>> {
        let (u, v) = self.encode(&[video], GradMask::NONE)?;
        (0..video.frames)
            .map(|i| {
                Ok((
                    EmbeddingSequence::new(u.i(i)?, Segment::High, i)?,
                    EmbeddingSequence::new(v.i(i)?, Segment::Low, i)?,
                ))
            })
            .collect()
    }

    fn blocks_for(pairs: &[(EmbeddingSequence, EmbeddingSequence)], masked: bool) -> Vec<VisualBlock> {
        pairs
            .iter()
            .flat_map(|(u, v)| {
                [
                    VisualBlock { seq: u.clone(), masked },
                    VisualBlock { seq: v.clone(), masked },
                ]
            })
            .collect()
    }

    /// Generates text for one video (`second = None`, duplicated and masked) or a pair.
    pub fn describe(&self, first: &PreparedVideo, second: Option<&PreparedVideo>, max_len: usize, strategy: Strategy) -> Result<Generation> {
        let a = self.frame_embeddings(first)?;
        let mut blocks = Self::blocks_for(&a, false);
        match second {
            Some(sv) => blocks.extend(Self::blocks_for(&self.frame_embeddings(sv)?, false)),
            None => blocks.extend(Self::blocks_for(&a, true)),
        }
        let prompt = self.decoder.embed_text(&self.prompt)?;
        let prefix = build_prefix_sequence(&blocks, &prompt, None, self.cfg.decoder.max_positions)?;
        self.decoder.generate(&prefix, max_len, strategy)
    }
}

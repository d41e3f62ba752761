//! Prefix-LM language decoder over interleaved visual and text embeddings.
//!
//! The prefix (visual tokens of every input video followed by the prompt)
//! attends bidirectionally; target tokens attend causally. Padding blocks,
//! such as the duplicated second video of a single-input sample, are
//! removed from every row and column of the mask.

use candle_core::{DType, Device, IndexOp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingSequence, Segment};
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, softmax_last, Block, BlockSpec, GradMask, LayerCache, LayerNorm, Linear, ParamBuilder, ParamGroup, Weight, MASK_BIAS};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const VOCAB_SIZE: usize = 259;

/// Instruction used both to annotate the corpus and to condition the decoder.
pub const SUMMARY_PROMPT: &str = "Based on the provided video frames, create a three-sentence summary. First, describe the visual content of the video in detail. Second, identify the style of the video. Third, assess the technical quality.";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte-level encoding without special tokens.
pub fn encode_text(s: &str) -> TokenSequence {
    TokenSequence {
        ids: s.bytes().map(u32::from).collect(),
    }
}

/// Inverse of [`encode_text`]; special tokens are dropped.
pub fn decode_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `BOS` followed by the prompt bytes.
pub fn prompt_tokens(prompt: &str) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(prompt.bytes().map(u32::from));
    TokenSequence { ids }
}

/// Caption bytes terminated by `EOS`.
pub fn target_tokens(caption: &str) -> TokenSequence {
    let mut ids: Vec<u32> = caption.bytes().map(u32::from).collect();
    ids.push(EOS);
    TokenSequence { ids }
}

/// S×S visibility matrix (true = may attend).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    prefix_len: usize,
    valid: Vec<bool>,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Prefix rows see every valid prefix column; later rows see valid columns up to themselves.
    pub fn prefix_lm(valid: Vec<bool>, prefix_len: usize) -> Self {
        let size = valid.len();
        let mut allowed = vec![false; size * size];
        for p in 0..size {
            if !valid[p] {
                continue;
            }
            let limit = if p < prefix_len { prefix_len } else { p + 1 };
            for q in 0..limit.min(size) {
                allowed[p * size + q] = valid[q];
            }
        }
        Self {
            size,
            prefix_len,
            valid,
            allowed,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn is_valid(&self, p: usize) -> bool {
        self.valid[p]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.size + q]
    }

    /// Additive bias (0 or a large negative value), row-major S×S.
    pub fn bias(&self) -> Vec<f32> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_BIAS as f32 })
            .collect()
    }
}

/// A visual embedding block placed in the prefix; `masked` blocks are padding.
#[derive(Debug, Clone)]
pub struct VisualBlock {
    pub seq: EmbeddingSequence,
    pub masked: bool,
}

#[derive(Debug, Clone)]
pub struct PrefixSequence {
    /// S×D
    pub embeddings: Tensor,
    pub mask: AttentionMask,
    pub prefix_len: usize,
}

/// Lays out `[visual blocks..., prompt, target]` and its prefix-LM mask.
pub fn build_prefix_sequence(
    visuals: &[VisualBlock],
    prompt: &EmbeddingSequence,
    target: Option<&EmbeddingSequence>,
    max_positions: usize,
) -> Result<PrefixSequence> {
    let dim = prompt.dim();
    let mut parts = Vec::new();
    let mut valid = Vec::new();
    for b in visuals {
        if b.seq.dim() != dim {
            return Err(Error::Input(format!(
                "visual block has width {}, prompt has {dim}",
                b.seq.dim()
            )));
        }
        parts.push(b.seq.tokens.clone());
        valid.extend(std::iter::repeat(!b.masked).take(b.seq.len()));
    }
    parts.push(prompt.tokens.clone());
    valid.extend(std::iter::repeat(true).take(prompt.len()));
    let prefix_len = valid.len();
    if let Some(t) = target {
        if t.dim() != dim {
            return Err(Error::Input("target width differs from prompt width".into()));
        }
        parts.push(t.tokens.clone());
        valid.extend(std::iter::repeat(true).take(t.len()));
    }
    if valid.len() > max_positions {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds the decoder context limit of {max_positions}",
            valid.len()
        )));
    }
    let parts: Vec<&Tensor> = parts.iter().filter(|t| t.dims()[0] > 0).collect();
    let embeddings = Tensor::cat(&parts, 0)?;
    Ok(PrefixSequence {
        embeddings,
        mask: AttentionMask::prefix_lm(valid, prefix_len),
        prefix_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderTuning {
    /// No decoder parameter is updated.
    Frozen,
    /// Only the query/key/value adapters are updated.
    AdaptersOnly,
    /// Adapters plus every non-attention-projection parameter; q/k/v bases stay fixed.
    Adapters,
    /// Everything, including the q/k/v bases.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Embedding width `D`, shared with the visual projections.
    pub dim: usize,
    pub mlp_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// LoRA rank on q/k/v; 0 disables adapters.
    pub lora_rank: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            mlp_dim: 128,
            max_positions: 512,
            vocab_size: VOCAB_SIZE,
            lora_rank: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub text: String,
    /// The context limit was reached before EOS or the length budget.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok_emb: Weight,
    pub pos: Weight,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        if cfg.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "decoder.vocab_size must be at least {VOCAB_SIZE}"
            )));
        }
        let g = ParamGroup::Decoder;
        let tok_emb = pb.normal("dec.tok_emb", g, &[cfg.vocab_size, cfg.dim], 0.1)?;
        let pos = pb.normal("dec.pos", g, &[cfg.max_positions, cfg.dim], 0.02)?;
        let lora = (cfg.lora_rank > 0).then_some(cfg.lora_rank);
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    pb,
                    &BlockSpec {
                        name: &format!("dec.blocks.{i}"),
                        group: g,
                        qkv_group: ParamGroup::DecoderQkv,
                        dim: cfg.dim,
                        heads: cfg.heads,
                        mlp_dim: cfg.mlp_dim,
                        lora_rank: lora,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(pb, "dec.ln_f", g, cfg.dim)?;
        let lm_head = Linear::new(pb, "dec.lm_head", g, cfg.dim, cfg.vocab_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos,
            blocks,
            ln_f,
            lm_head,
        })
    }

    fn device(&self) -> &Device {
        self.tok_emb.var.device()
    }

    pub fn dtype(&self) -> DType {
        self.tok_emb.var.dtype()
    }

    /// Rows of the token embedding table, (n, D).
    pub fn embed_ids(&self, ids: &[u32], mask: GradMask) -> Result<Tensor> {
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        if ids.is_empty() {
            return Ok(Tensor::zeros((0, self.cfg.dim), self.dtype(), self.device())?);
        }
        let idx = Tensor::new(ids, self.device())?;
        Ok(self.tok_emb.tensor(mask).index_select(&idx, 0)?)
    }

    pub fn embed_text(&self, tokens: &TokenSequence) -> Result<EmbeddingSequence> {
        EmbeddingSequence::new(self.embed_ids(tokens.ids(), GradMask::NONE)?, Segment::Text, 0)
    }

    fn positions(&self, start: usize, len: usize, mask: GradMask) -> Result<Tensor> {
        if start + len > self.cfg.max_positions {
            return Err(Error::Input(format!(
                "position {} exceeds the decoder context limit of {}",
                start + len,
                self.cfg.max_positions
            )));
        }
        Ok(self.pos.tensor(mask).narrow(0, start, len)?)
    }

    /// Final hidden states for a batch: `x` (B, S, D), `bias` (B, 1, S, S).
    pub fn hidden(&self, x: &Tensor, bias: &Tensor, mask: GradMask) -> Result<Tensor> {
        let s = x.dims()[1];
        let mut h = x.broadcast_add(&self.positions(0, s, mask)?)?;
        for b in &self.blocks {
            h = b.forward(&h, Some(bias), mask)?;
        }
        self.ln_f.forward(&h, mask)
    }

    pub fn logits(&self, hidden: &Tensor, mask: GradMask) -> Result<Tensor> {
        self.lm_head.forward(hidden, mask)
    }

    fn bias_tensor(&self, mask: &AttentionMask) -> Result<Tensor> {
        let s = mask.size();
        Ok(Tensor::from_vec(mask.bias(), (1, 1, s, s), self.device())?.to_dtype(self.dtype())?)
    }

    /// Logits at every position of one sequence, (S, V). Activations are
    /// checked after each layer and a numeric error names the first bad one.
    pub fn forward_logits(&self, embeddings: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let (s, _) = embeddings.dims2()?;
        if s != mask.size() {
            return Err(Error::Input(format!("mask is {0}x{0} for {s} embeddings", mask.size())));
        }
        let m = GradMask::NONE;
        let bias = self.bias_tensor(mask)?;
        let mut h = embeddings.unsqueeze(0)?.broadcast_add(&self.positions(0, s, m)?)?;
        ensure_finite(&h, "decoder input")?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(&h, Some(&bias), m)?;
            ensure_finite(&h, &format!("decoder layer {i}"))?;
        }
        let logits = self.logits(&self.ln_f.forward(&h, m)?, m)?.squeeze(0)?;
        ensure_finite(&logits, "decoder output head")?;
        Ok(logits)
    }

    /// Next-token logits after the last position, (V).
    pub fn decode_step(&self, embeddings: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let logits = self.forward_logits(embeddings, mask)?;
        let s = logits.dims()[0];
        Ok(logits.i(s - 1)?)
    }

    /// Autoregressive continuation of a prefix using a key/value cache.
    pub fn generate(&self, prefix: &PrefixSequence, max_len: usize, strategy: Strategy) -> Result<Generation> {
        let mut out = Vec::new();
        if max_len == 0 {
            return Ok(Generation {
                tokens: TokenSequence::default(),
                text: String::new(),
                truncated: false,
            });
        }
        let m = GradMask::NONE;
        let s = prefix.prefix_len;
        if prefix.mask.size() != s {
            return Err(Error::Input("generation prefix must not contain target tokens".into()));
        }
        let mut rng = match strategy {
            Strategy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Strategy::Greedy => None,
        };
        let mut caches: Vec<Option<LayerCache>> = vec![None; self.blocks.len()];
        let mut h = prefix
            .embeddings
            .unsqueeze(0)?
            .broadcast_add(&self.positions(0, s, m)?)?;
        let bias = self.bias_tensor(&prefix.mask)?;
        for (b, c) in self.blocks.iter().zip(caches.iter_mut()) {
            h = b.forward_cached(&h, Some(&bias), c)?;
        }
        let mut last = self.logits(&self.ln_f.forward(&h.i((.., s - 1..s, ..))?, m)?, m)?.flatten_all()?;
        let mut col_bias: Vec<f32> = prefix
            .mask
            .valid()
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_BIAS as f32 })
            .collect();
        let mut truncated = false;
        loop {
            ensure_finite(&last, "generation step")?;
            let next = pick_token(&last, strategy, rng.as_mut())?;
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() >= max_len {
                break;
            }
            let pos = s + out.len() - 1;
            if pos + 1 > self.cfg.max_positions {
                truncated = true;
                break;
            }
            col_bias.push(0.0);
            let step_bias = Tensor::from_vec(col_bias.clone(), (1, 1, 1, col_bias.len()), self.device())?.to_dtype(self.dtype())?;
            let mut x = self
                .embed_ids(&[next], m)?
                .broadcast_add(&self.positions(pos, 1, m)?)?
                .unsqueeze(0)?;
            for (b, c) in self.blocks.iter().zip(caches.iter_mut()) {
                x = b.forward_cached(&x, Some(&step_bias), c)?;
            }
            last = self.logits(&self.ln_f.forward(&x, m)?, m)?.flatten_all()?;
        }
        let text = decode_text(&out);
        Ok(Generation {
            tokens: TokenSequence { ids: out },
            text,
            truncated,
        })
    }
}

fn pick_token(logits: &Tensor, strategy: Strategy, rng: Option<&mut ChaCha8Rng>) -> Result<u32> {
    let v = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    match (strategy, rng) {
        (Strategy::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
            let t = Tensor::new(v.as_slice(), &Device::Cpu)?;
            let probs = softmax_last(&(t / temperature)?)?.to_vec1::<f64>()?;
            let mut u: f64 = rng.gen();
            for (i, p) in probs.iter().enumerate() {
                u -= p;
                if u <= 0.0 {
                    return Ok(i as u32);
                }
            }
            Ok((probs.len() - 1) as u32)
        }
        _ => {
            let mut best = 0usize;
            for (i, x) in v.iter().enumerate() {
                if *x > v[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny(max_positions: usize) -> Decoder {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(3), DType::F64, Device::Cpu);
        Decoder::new(
            &mut pb,
            &DecoderConfig {
                layers: 2,
                heads: 2,
                dim: 8,
                mlp_dim: 16,
                max_positions,
                vocab_size: VOCAB_SIZE,
                lora_rank: 2,
            },
        )
        .unwrap()
    }

    fn block(len: usize, dim: usize, fill: f64, masked: bool) -> VisualBlock {
        VisualBlock {
            seq: EmbeddingSequence::new(Tensor::full(fill, (len, dim), &Device::Cpu).unwrap(), Segment::High, 0).unwrap(),
            masked,
        }
    }

    #[test]
    fn tokenizer_round_trip_and_specials() {
        let s = "Third, assess the technical quality: 4/5 ~ good!";
        assert_eq!(decode_text(encode_text(s).ids()), s);
        assert_eq!(prompt_tokens("ab").ids(), &[BOS, 97, 98]);
        assert_eq!(target_tokens("ab").ids(), &[97, 98, EOS]);
        assert!(TokenSequence::new(vec![259], VOCAB_SIZE).is_err());
    }

    #[test]
    fn embed_text_rows() {
        let dec = tiny(64);
        let e = dec.embed_text(&TokenSequence::default()).unwrap();
        assert_eq!(e.tokens.dims(), &[0, 8]);
        let e = dec.embed_text(&TokenSequence::new(vec![5, 5, 258], VOCAB_SIZE).unwrap()).unwrap();
        let rows = e.tokens.to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], rows[1]);
        let table = dec.tok_emb.var.as_tensor().to_vec2::<f64>().unwrap();
        assert_eq!(rows[2], table[VOCAB_SIZE - 1]);
        assert!(matches!(dec.embed_ids(&[300], GradMask::NONE), Err(Error::Input(_))));
    }

    #[test]
    fn pure_prefix_mask_all_true() {
        let dec = tiny(64);
        let prompt = dec.embed_text(&TokenSequence::new(vec![1, 2, 3], VOCAB_SIZE).unwrap()).unwrap();
        let vis = [block(4, 8, 0.1, false), block(4, 8, 0.2, false)];
        let seq = build_prefix_sequence(&vis, &prompt, None, 64).unwrap();
        assert_eq!((seq.mask.size(), seq.prefix_len), (11, 11));
        assert!((0..11).all(|p| (0..11).all(|q| seq.mask.get(p, q))));

        let target = dec.embed_text(&TokenSequence::new(vec![7, 8], VOCAB_SIZE).unwrap()).unwrap();
        let seq = build_prefix_sequence(&vis, &prompt, Some(&target), 64).unwrap();
        assert_eq!(seq.mask.size(), 13);
        assert!(!seq.mask.get(11, 12));
        assert!(seq.mask.get(12, 11));
        assert!(seq.mask.get(11, 0) && !seq.mask.get(0, 11));
    }

    #[test]
    fn padded_block_fully_masked() {
        let dec = tiny(64);
        let prompt = dec.embed_text(&TokenSequence::new(vec![1, 2], VOCAB_SIZE).unwrap()).unwrap();
        let vis = [block(3, 8, 0.1, false), block(3, 8, 0.2, true)];
        let seq = build_prefix_sequence(&vis, &prompt, None, 64).unwrap();
        for p in 0..seq.mask.size() {
            for q in 3..6 {
                assert!(!seq.mask.get(p, q) && !seq.mask.get(q, p));
            }
        }
    }

    #[test]
    fn context_limit_is_named() {
        let dec = tiny(8);
        let prompt = dec.embed_text(&TokenSequence::new(vec![1; 5], VOCAB_SIZE).unwrap()).unwrap();
        let err = build_prefix_sequence(&[block(4, 8, 0.0, false)], &prompt, None, 8).unwrap_err();
        assert!(err.to_string().contains("limit of 8"), "{err}");
    }

    #[test]
    fn logits_normalize_and_repeat() {
        let dec = tiny(64);
        let prompt = dec.embed_text(&prompt_tokens("hi")).unwrap();
        let seq = build_prefix_sequence(&[block(2, 8, 0.3, false)], &prompt, None, 64).unwrap();
        let a = dec.decode_step(&seq.embeddings, &seq.mask).unwrap();
        let b = dec.decode_step(&seq.embeddings, &seq.mask).unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        let total = softmax_last(&a).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masked_position_does_not_move_logits() {
        let dec = tiny(64);
        let prompt = dec.embed_text(&prompt_tokens("ok")).unwrap();
        let a = build_prefix_sequence(&[block(2, 8, 0.3, false), block(2, 8, 0.5, true)], &prompt, None, 64).unwrap();
        let b = build_prefix_sequence(&[block(2, 8, 0.3, false), block(2, 8, -9.0, true)], &prompt, None, 64).unwrap();
        let la = dec.decode_step(&a.embeddings, &a.mask).unwrap().to_vec1::<f64>().unwrap();
        let lb = dec.decode_step(&b.embeddings, &b.mask).unwrap().to_vec1::<f64>().unwrap();
        let d = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn nan_is_reported_with_stage() {
        let dec = tiny(64);
        let prompt = dec.embed_text(&prompt_tokens("x")).unwrap();
        let mut seq = build_prefix_sequence(&[block(1, 8, f64::NAN, false)], &prompt, None, 64).unwrap();
        let err = dec.decode_step(&seq.embeddings, &seq.mask).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        seq.embeddings = seq.embeddings.zeros_like().unwrap();
        dec.decode_step(&seq.embeddings, &seq.mask).unwrap();
    }

    #[test]
    fn generation_basics() {
        let dec = tiny(40);
        let prompt = dec.embed_text(&prompt_tokens("q")).unwrap();
        let seq = build_prefix_sequence(&[block(2, 8, 0.3, false)], &prompt, None, 40).unwrap();
        let g = dec.generate(&seq, 0, Strategy::Greedy).unwrap();
        assert!(g.tokens.is_empty() && !g.truncated);
        let a = dec.generate(&seq, 12, Strategy::Greedy).unwrap();
        let b = dec.generate(&seq, 12, Strategy::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 12);
        // A 4-token prefix in a 40-position context truncates an unbounded request.
        let long = dec.generate(&seq, 1000, Strategy::Greedy).unwrap();
        assert!(long.truncated || long.tokens.len() < 36);
        let s1 = dec.generate(&seq, 8, Strategy::Sample { temperature: 1.0, seed: 5 }).unwrap();
        let s2 = dec.generate(&seq, 8, Strategy::Sample { temperature: 1.0, seed: 5 }).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn cached_generation_matches_full_forward() {
        let dec = tiny(64);
        for blk in &dec.blocks {
            for p in [&blk.attn.q, &blk.attn.k, &blk.attn.v] {
                let l = p.lora.as_ref().unwrap();
                l.b.var.set(&Tensor::randn(0f64, 0.5, l.b.var.shape(), &Device::Cpu).unwrap()).unwrap();
            }
        }
        let prompt = dec.embed_text(&prompt_tokens("abc")).unwrap();
        let vis = [block(2, 8, 0.3, false), block(2, 8, 0.7, true)];
        let seq = build_prefix_sequence(&vis, &prompt, None, 64).unwrap();
        let g = dec.generate(&seq, 6, Strategy::Greedy).unwrap();
        // Replay: each generated token must be the argmax of a full forward over prefix + tokens so far.
        let mut ids: Vec<u32> = Vec::new();
        for &tok in g.tokens.ids() {
            let target = dec.embed_text(&TokenSequence::new(ids.clone(), VOCAB_SIZE).unwrap()).unwrap();
            let full = build_prefix_sequence(&vis, &prompt, Some(&target), 64).unwrap();
            let logits = dec.decode_step(&full.embeddings, &full.mask).unwrap();
            let best = pick_token(&logits, Strategy::Greedy, None).unwrap();
            assert_eq!(best, tok);
            ids.push(tok);
        }
    }
}

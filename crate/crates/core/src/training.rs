//! Multi-task objective (pairwise hinge, masked regression, caption NLL),
//! mixed single/pairwise batch assembly and the Adam training loop.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderTuning, TokenSequence};
use crate::encoders::PreparedVideo;
use crate::error::{Error, Result};
use crate::model::{DuoVqa, FreezeMode, TextSample};
use crate::nn::{log_softmax_last, GradMask};

/// Floor applied to probabilities before taking logs in [`text_loss_from_probs`].
pub const PROB_EPSILON: f64 = 1e-12;

/// Pairwise hinge: `Σ active·max(0, margin − (q¹−q²)(q̂¹−q̂²)) / B`.
///
/// Inactive slots (single samples) still count in `B`.
pub fn loss_rank(pred1: &Tensor, pred2: &Tensor, gt1: &Tensor, gt2: &Tensor, active: &Tensor, margin: f64) -> Result<Tensor> {
    let b = pred1.dims1()?;
    if b == 0 {
        return Err(Error::Input("loss_rank on an empty batch".into()));
    }
    let agree = (gt1 - gt2)?.mul(&(pred1 - pred2)?)?;
    let hinge = agree.neg()?.affine(1.0, margin)?.relu()?;
    Ok((hinge.mul(active)?.sum_all()? / b as f64)?)
}

/// Regression on first-slot originals only: `Σ 1·(q−q̂)² / max(Σ 1, 1)`.
pub fn loss_mse(pred1: &Tensor, gt1: &Tensor, is_original: &Tensor) -> Result<Tensor> {
    if pred1.dims1()? == 0 {
        return Err(Error::Input("loss_mse on an empty batch".into()));
    }
    let count = is_original.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let sq = (gt1 - pred1)?.sqr()?.mul(is_original)?;
    Ok((sq.sum_all()? / count.max(1.0))?)
}

/// Mean token NLL. `logits` (N, V) are the rows predicting each target token, `labels` (N,).
pub fn loss_text(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let n = labels.dims1()?;
    if n == 0 {
        return Err(Error::Input("loss_text needs at least one target token".into()));
    }
    let lp = log_softmax_last(logits)?;
    let picked = lp.gather(&labels.unsqueeze(1)?, 1)?;
    Ok((picked.sum_all()?.neg()? / n as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextLoss {
    pub value: f64,
    /// Some target probability fell below [`PROB_EPSILON`] and was clamped.
    pub clamped: bool,
}

/// Text loss from the probabilities assigned to each target token, one vector per sample.
pub fn text_loss_from_probs(samples: &[Vec<f64>]) -> Result<TextLoss> {
    let total: usize = samples.iter().map(Vec::len).sum();
    if samples.is_empty() || samples.iter().any(Vec::is_empty) {
        return Err(Error::Input("text targets must be non-empty".into()));
    }
    let mut clamped = false;
    let mut nll = 0.0;
    for &p in samples.iter().flatten() {
        if !(p >= PROB_EPSILON) {
            clamped = true;
        }
        nll -= p.max(PROB_EPSILON).ln();
    }
    if clamped {
        log::warn!("text loss clamped a target probability below {PROB_EPSILON}");
    }
    Ok(TextLoss {
        value: nll / total as f64,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rank: f64,
    pub mse: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rank: 1.0,
            mse: 1.0,
            text: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("rank", self.rank), ("mse", self.mse), ("text", self.text)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn total(&self, l1: f64, l2: f64, l3: f64) -> f64 {
        self.rank * l1 + self.mse * l2 + self.text * l3
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;
    /// Parses `w1,w2,w3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("bad loss weights `{s}`: {e}")))?;
        let [rank, mse, text] = parts[..] else {
            return Err(Error::Config(format!("loss weights need three values, got `{s}`")));
        };
        let w = Self { rank, mse, text };
        w.validate()?;
        Ok(w)
    }
}

/// `w1·l1 + w2·l2 + w3·l3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, weights: &LossWeights) -> f64 {
    weights.total(l1, l2, l3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimizer steps; one step consumes one assembled batch.
    pub steps: usize,
    pub loss_weights: LossWeights,
    /// Fraction of batch slots that are pairwise samples.
    pub single_pair_mix: f64,
    pub encoder_freeze_mode: FreezeMode,
    pub decoder_tuning: DecoderTuning,
    /// Hinge margin; 0 reproduces the plain ranking loss.
    pub rank_margin: f64,
    pub seed: u64,
    /// Evaluate on the held-out split every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-3,
            steps: 300,
            loss_weights: LossWeights::default(),
            single_pair_mix: 0.5,
            encoder_freeze_mode: FreezeMode::Frozen,
            decoder_tuning: DecoderTuning::Adapters,
            rank_margin: 0.0,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.single_pair_mix) {
            return Err(Error::Config(format!(
                "training.single_pair_mix must lie in [0, 1], got {}",
                self.single_pair_mix
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("training.learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Number of pairwise slots in a batch.
    pub fn pairwise_slots(&self) -> usize {
        (self.single_pair_mix * self.batch_size as f64).round() as usize
    }
}

/// One labelled clip of the training corpus.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub id: String,
    pub source_id: String,
    pub severity: u32,
    /// MOS for originals, pseudo-MOS for distorted variants.
    pub score: f64,
    pub is_original: bool,
    pub caption: TokenSequence,
    pub video: PreparedVideo,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    items: Vec<TrainingItem>,
    sources: Vec<Vec<usize>>,
    originals: Vec<usize>,
}

impl TrainingSet {
    pub fn new(items: Vec<TrainingItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut by_source: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, it) in items.iter().enumerate() {
            match by_source.iter_mut().find(|(s, _)| *s == it.source_id) {
                Some((_, v)) => v.push(i),
                None => by_source.push((it.source_id.clone(), vec![i])),
            }
        }
        let originals = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.is_original)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            sources: by_source.into_iter().map(|(_, v)| v).collect(),
            items,
            originals,
        })
    }

    pub fn items(&self) -> &[TrainingItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Pairwise,
    Single,
}

/// One batch slot. Indices point into the [`TrainingSet`]; for single
/// samples `video_b == video_a` and the second video is masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityPair {
    pub video_a: usize,
    pub video_b: usize,
    pub q_a: f64,
    pub q_b: f64,
    pub a_is_original: bool,
    pub kind: PairKind,
}

/// Draws one batch: `round(mix·B)` same-source pairs, the rest single originals.
pub fn assemble_batch(set: &TrainingSet, cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> Result<Vec<QualityPair>> {
    let n_pairs = cfg.pairwise_slots();
    let n_single = cfg.batch_size - n_pairs;
    if n_pairs > 0 && !set.sources.iter().any(|s| s.len() >= 2) {
        return Err(Error::Input("pairwise samples requested but no source has two variants".into()));
    }
    if n_single > 0 && set.originals.is_empty() {
        return Err(Error::Input("single samples requested but the set has no originals".into()));
    }
    let mut out = Vec::with_capacity(cfg.batch_size);
    while out.len() < n_pairs {
        let src = &set.sources[rng.gen_range(0..set.sources.len())];
        if src.len() < 2 {
            log::debug!("source of `{}` has one variant, resampling", set.items[src[0]].id);
            continue;
        }
        let picked: Vec<usize> = src.choose_multiple(rng, 2).copied().collect();
        let (mut a, mut b) = (picked[0], picked[1]);
        if set.items[a].score == set.items[b].score {
            continue;
        }
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut a, &mut b);
        }
        let (ia, ib) = (&set.items[a], &set.items[b]);
        out.push(QualityPair {
            video_a: a,
            video_b: b,
            q_a: ia.score,
            q_b: ib.score,
            a_is_original: ia.is_original,
            kind: PairKind::Pairwise,
        });
    }
    for _ in 0..n_single {
        let a = *set.originals.choose(rng).expect("checked non-empty");
        let q = set.items[a].score;
        out.push(QualityPair {
            video_a: a,
            video_b: a,
            q_a: q,
            q_b: q,
            a_is_original: true,
            kind: PairKind::Single,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rank: f64,
    pub mse: f64,
    pub text: f64,
    pub total: f64,
}

/// Builds the total loss of one batch as a differentiable scalar.
pub fn batch_loss(
    model: &DuoVqa,
    set: &TrainingSet,
    batch: &[QualityPair],
    cfg: &TrainingConfig,
    mask: GradMask,
) -> Result<(Tensor, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    // Encode every distinct clip once; single samples reuse their first video.
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    for p in batch {
        for idx in [p.video_a, p.video_b] {
            slot.entry(idx).or_insert_with(|| {
                order.push(idx);
                order.len() - 1
            });
        }
    }
    let videos: Vec<&PreparedVideo> = order.iter().map(|&i| &set.items[i].video).collect();
    let (u, v) = model.encode(&videos, mask)?;
    let scores = model.video_scores(&u, &v, videos.len(), mask)?;

    let dev = model.device();
    let dt = model.dtype();
    let ia: Vec<u32> = batch.iter().map(|p| slot[&p.video_a] as u32).collect();
    let ib: Vec<u32> = batch.iter().map(|p| slot[&p.video_b] as u32).collect();
    let pred_a = scores.index_select(&Tensor::new(ia.as_slice(), dev)?, 0)?;
    let pred_b = scores.index_select(&Tensor::new(ib.as_slice(), dev)?, 0)?;
    let col = |f: &dyn Fn(&QualityPair) -> f64| -> Result<Tensor> {
        let vals: Vec<f64> = batch.iter().map(f).collect();
        Ok(Tensor::new(vals.as_slice(), dev)?.to_dtype(dt)?)
    };
    let gt_a = col(&|p| p.q_a)?;
    let gt_b = col(&|p| p.q_b)?;
    let active = col(&|p| if p.kind == PairKind::Pairwise { 1.0 } else { 0.0 })?;
    let orig = col(&|p| if p.a_is_original { 1.0 } else { 0.0 })?;

    let w = &cfg.loss_weights;
    let l1 = loss_rank(&pred_a, &pred_b, &gt_a, &gt_b, &active, cfg.rank_margin)?;
    let l2 = loss_mse(&pred_a, &gt_a, &orig)?;
    let mut total = ((&l1 * w.rank)? + (&l2 * w.mse)?)?;
    let mut l3v = 0.0;
    if w.text > 0.0 {
        let visual = model.visual_tokens(&u, &v, videos.len())?;
        let samples: Vec<TextSample> = batch
            .iter()
            .map(|p| TextSample {
                first: slot[&p.video_a],
                second: (p.kind == PairKind::Pairwise).then(|| slot[&p.video_b]),
                target: set.items[p.video_a].caption.clone(),
            })
            .collect();
        let l3 = model.text_loss(&visual, &samples, mask)?;
        l3v = scalar(&l3)?;
        total = (total + (l3 * w.text)?)?;
    }
    let parts = LossBreakdown {
        rank: scalar(&l1)?,
        mse: scalar(&l2)?,
        text: l3v,
        total: scalar(&total)?,
    };
    Ok((total, parts))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Append-only TSV of `step, l1, l2, l3, total, lr`.
pub struct TrainingLog {
    file: File,
}

impl TrainingLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if file.metadata().map(|m| m.len() == 0).unwrap_or(false) {
            writeln!(file, "step\tl1\tl2\tl3\ttotal\tlr").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, step: usize, l: &LossBreakdown, lr: f64) -> Result<()> {
        writeln!(self.file, "{step}\t{}\t{}\t{}\t{}\t{lr}", l.rank, l.mse, l.text, l.total)
            .map_err(|e| Error::io("<training log>", e))
    }
}

/// Owns the optimizer state for one training run.
pub struct Trainer {
    pub cfg: TrainingConfig,
    mask: GradMask,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    pub history: Vec<LossBreakdown>,
    log: Option<TrainingLog>,
}

impl Trainer {
    pub fn new(model: &DuoVqa, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mask = model.grad_mask(cfg.encoder_freeze_mode, cfg.decoder_tuning);
        let vars: Vec<Var> = model
            .weights()
            .iter()
            .filter(|w| mask.contains(w.group))
            .map(|w| w.var.clone())
            .collect();
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            mask,
            opt,
            step: 0,
            history: Vec::new(),
            log: None,
        })
    }

    pub fn with_log(mut self, log: TrainingLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn mask(&self) -> GradMask {
        self.mask
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update on the trainable parameters. A non-finite loss aborts
    /// the step before any parameter moves.
    pub fn train_step(&mut self, model: &DuoVqa, set: &TrainingSet, batch: &[QualityPair]) -> Result<LossBreakdown> {
        let (total, parts) = batch_loss(model, set, batch, &self.cfg, self.mask)?;
        if !parts.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|p| set.items[p.video_a].id.as_str()).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (l1={}, l2={}, l3={}) for samples {ids:?}",
                self.step, parts.rank, parts.mse, parts.text
            )));
        }
        self.opt.backward_step(&total)?;
        self.step += 1;
        if let Some(log) = &mut self.log {
            log.append(self.step, &parts, self.cfg.learning_rate)?;
        }
        self.history.push(parts);
        Ok(parts)
    }

    /// Draws a batch with the trainer's seeded sampler and applies one step.
    pub fn sample_and_step(&mut self, model: &DuoVqa, set: &TrainingSet) -> Result<LossBreakdown> {
        let batch = assemble_batch(set, &self.cfg, &mut self.rng)?;
        self.train_step(model, set, &batch)
    }

    /// Runs the configured number of steps, calling `on_step` after each one.
    pub fn run(
        &mut self,
        model: &DuoVqa,
        set: &TrainingSet,
        mut on_step: impl FnMut(usize, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let l = self.sample_and_step(model, set)?;
            on_step(self.step, &l)?;
        }
        Ok(())
    }
}

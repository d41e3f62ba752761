//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duovqa::datagen::{apply_distortion, assign_pseudo_mos, synth_source, DistortionKind, DistortionTag};
use duovqa::decoder::{target_tokens, DecoderConfig, DecoderTuning, VOCAB_SIZE};
use duovqa::encoders::EncoderConfig;
use duovqa::media::ViewConfig;
use duovqa::model::{DuoVqa, FreezeMode, ModelConfig};
use duovqa::training::{batch_loss, LossWeights, PairKind, QualityPair, TrainingConfig, TrainingItem, TrainingSet};

/// D=8, one layer everywhere, one key frame, 8x8 high view, two 8x8 patches.
pub fn toy_config(init_seed: u64) -> ModelConfig {
    let enc = EncoderConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        mlp_dim: 8,
        patch_embed_size: 4,
        frozen: false,
    };
    ModelConfig {
        view: ViewConfig {
            key_frames: 1,
            high_h: 8,
            high_w: 8,
            box_h: 8,
            box_w: 16,
            patch: 8,
            patches_per_frame: 2,
        },
        high_encoder: enc.clone(),
        low_encoder: enc,
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            mlp_dim: 8,
            max_positions: 64,
            vocab_size: VOCAB_SIZE,
            lora_rank: 2,
        },
        head_hidden: 0,
        prompt: "rate".into(),
        init_seed,
    }
}

/// A source and `severities` of its ladder, prepared for `model`. Captions are
/// `caption` plus EOS.
pub fn toy_items(model: &DuoVqa, seed: u64, kind: DistortionKind, severities: &[u32], caption: &str) -> Vec<TrainingItem> {
    let (clip, spec) = synth_source(seed, 8, 16, 1).unwrap();
    severities
        .iter()
        .map(|&s| {
            let c = if s == 0 {
                clip.clone()
            } else {
                apply_distortion(&clip, &DistortionTag::new(kind, s)).unwrap()
            };
            TrainingItem {
                id: format!("{}/s{s:02}", spec.source_id),
                source_id: spec.source_id.clone(),
                severity: s,
                score: assign_pseudo_mos(spec.mos, s, 20).unwrap(),
                is_original: s == 0,
                caption: target_tokens(caption),
                video: model.prepare_clip(&c).unwrap(),
            }
        })
        .collect()
}

pub fn toy_set(model: &DuoVqa, sources: &[u64], severities: &[u32]) -> TrainingSet {
    let items = sources
        .iter()
        .enumerate()
        .flat_map(|(i, &seed)| toy_items(model, seed, DistortionKind::ALL[i % 3], severities, "ok"))
        .collect();
    TrainingSet::new(items).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    pub params: usize,
    pub worst: String,
}

/// Central-difference check of the full total loss on one pairwise sample with a
/// two-token caption, every parameter group trainable, float64. The pair is
/// chosen so the ranking hinge is active and the first video is the original,
/// which makes all three loss terms contribute. Tensors with more than
/// `per_tensor` entries are checked on a seeded sample of coordinates.
pub fn gradient_check(per_tensor: usize) -> GradReport {
    let dev = Device::Cpu;
    let (model, set) = (0..256)
        .find_map(|seed| {
            let model = DuoVqa::new(toy_config(seed), DType::F64, &dev).unwrap();
            let items = toy_items(&model, 7, DistortionKind::AddNoise, &[0, 12], "a");
            let scores = model.score(&[items[0].video.clone(), items[1].video.clone()]).unwrap();
            // Original must score below the variant by a clear gap: the hinge is then active and smooth.
            (scores[1].value - scores[0].value > 1e-5).then(|| (model, TrainingSet::new(items).unwrap()))
        })
        .expect("some toy init misorders the pair");
    let items = set.items();
    let batch = [QualityPair {
        video_a: 0,
        video_b: 1,
        q_a: items[0].score,
        q_b: items[1].score,
        a_is_original: true,
        kind: PairKind::Pairwise,
    }];
    let cfg = TrainingConfig {
        batch_size: 1,
        single_pair_mix: 1.0,
        loss_weights: LossWeights { rank: 1.0, mse: 1.0, text: 1.0 },
        ..TrainingConfig::default()
    };
    let mask = model.grad_mask(FreezeMode::All, DecoderTuning::Full);
    let (loss, parts) = batch_loss(&model, &set, &batch, &cfg, mask).unwrap();
    assert!(parts.rank > 0.0 && parts.mse > 0.0 && parts.text > 0.0, "{parts:?}");
    let grads = loss.backward().unwrap();
    let eval = || {
        let (l, _) = batch_loss(&model, &set, &batch, &cfg, mask).unwrap();
        scalar(&l)
    };

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rep = GradReport {
        max_rel: 0.0,
        checked: 0,
        params: 0,
        worst: String::new(),
    };
    for w in model.weights() {
        let t = w.var.as_tensor();
        let shape = t.shape().clone();
        let base: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
        rep.params += base.len();
        let analytic: Vec<f64> = match grads.get(t) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let idx: Vec<usize> = if base.len() <= per_tensor {
            (0..base.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..base.len())).collect()
        };
        for i in idx {
            let mut v = base.clone();
            v[i] = base[i] + h;
            w.var.set(&Tensor::from_vec(v.clone(), &shape, &dev).unwrap()).unwrap();
            let fp = eval();
            v[i] = base[i] - h;
            w.var.set(&Tensor::from_vec(v, &shape, &dev).unwrap()).unwrap();
            let fm = eval();
            w.var.set(&Tensor::from_vec(base.clone(), &shape, &dev).unwrap()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            rep.checked += 1;
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", w.name);
            }
        }
    }
    rep
}

/// Average 1-based ranks by counting, O(n²).
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation from the textbook sums formula.
pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn brute_srcc(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

/// Random vector pair of length 3..=60, rounded to a coarse grid half the time so ties occur.
pub fn random_vectors(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(3..=60);
    let coarse = rng.gen_bool(0.5);
    let draw = |rng: &mut ChaCha8Rng| {
        let v: f64 = rng.gen_range(-5.0..5.0);
        if coarse {
            v.round()
        } else {
            v
        }
    };
    loop {
        let x: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if !constant(&x) && !constant(&y) {
            return (x, y);
        }
    }
}

/// Flip count by enumerating every ordered pair of ladder positions.
/// `scores[s]` is the score at severity `s`; returns (flips, pairs) for difference `d`.
pub fn enumerate_flips(scores: &[f64], d: usize, ties_flip: bool) -> (usize, usize) {
    let (mut flips, mut pairs) = (0, 0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if j != i + d {
                continue;
            }
            if scores[i] == scores[j] {
                if ties_flip {
                    flips += 1;
                    pairs += 1;
                }
            } else {
                pairs += 1;
                if scores[i] < scores[j] {
                    flips += 1;
                }
            }
        }
    }
    (flips, pairs)
}

pub struct MaskReport {
    pub trials: usize,
    /// Largest change at a position before a perturbed suffix token.
    pub causal_delta: f64,
    /// Largest change at a valid position when masked padding content is replaced.
    pub pad_delta: f64,
    /// Smallest change at the first valid prefix position when the last prefix token moves.
    pub bidir_delta: f64,
    /// Visibility matrix disagreements with the prefix-LM rule.
    pub mask_errors: usize,
}

fn max_row_delta(a: &[Vec<f64>], b: &[Vec<f64>], rows: impl Iterator<Item = usize>) -> f64 {
    rows.flat_map(|r| a[r].iter().zip(&b[r]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Randomized prefix-LM mask trials on a two-layer decoder in float64. Each trial
/// draws visual blocks (some masked as padding), a prompt and a target.
pub fn mask_trials(n: usize, seed: u64) -> MaskReport {
    use duovqa::decoder::{build_prefix_sequence, Decoder, VisualBlock};
    use duovqa::encoders::{EmbeddingSequence, Segment};
    use duovqa::nn::ParamBuilder;

    let dev = Device::Cpu;
    let dim = 8;
    let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(seed), DType::F64, dev.clone());
    let dec = Decoder::new(
        &mut pb,
        &DecoderConfig {
            layers: 2,
            heads: 2,
            dim,
            mlp_dim: 16,
            max_positions: 64,
            vocab_size: VOCAB_SIZE,
            lora_rank: 2,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let randn = |rng: &mut ChaCha8Rng, len: usize, seg: Segment| {
        let v: Vec<f64> = (0..len * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        EmbeddingSequence::new(Tensor::from_vec(v, (len, dim), &dev).unwrap(), seg, 0).unwrap()
    };
    let mut rep = MaskReport {
        trials: n,
        causal_delta: 0.0,
        pad_delta: 0.0,
        bidir_delta: f64::INFINITY,
        mask_errors: 0,
    };
    for _ in 0..n {
        let n_blocks = rng.gen_range(1..=3);
        let mut blocks: Vec<VisualBlock> = (0..n_blocks)
            .map(|i| {
                let len = rng.gen_range(1..=4);
                let seg = if i % 2 == 0 { Segment::High } else { Segment::Low };
                VisualBlock {
                    seq: randn(&mut rng, len, seg),
                    masked: i > 0 && rng.gen_bool(0.5),
                }
            })
            .collect();
        // Guarantee one padding block so the pad invariance check always has content to replace.
        if !blocks.iter().any(|b| b.masked) {
            let len = rng.gen_range(1..=4);
            blocks.push(VisualBlock {
                seq: randn(&mut rng, len, Segment::Low),
                masked: true,
            });
        }
        let (lp, lt) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let prompt = randn(&mut rng, lp, Segment::Text);
        let target = randn(&mut rng, lt, Segment::Text);
        let seq = build_prefix_sequence(&blocks, &prompt, Some(&target), 64).unwrap();
        let m = &seq.mask;
        let s = m.size();
        let p_len = seq.prefix_len;
        for p in 0..s {
            for q in 0..s {
                let expect = m.is_valid(p) && m.is_valid(q) && (q < p_len && p < p_len || q <= p);
                rep.mask_errors += usize::from(m.get(p, q) != expect);
            }
        }
        let logits = |e: &Tensor| -> Vec<Vec<f64>> { dec.forward_logits(e, m).unwrap().to_vec2().unwrap() };
        let base = logits(&seq.embeddings);
        let valid: Vec<usize> = (0..s).filter(|&p| m.is_valid(p)).collect();
        let rows: Vec<Vec<f64>> = seq.embeddings.to_vec2().unwrap();
        let with_rows = |rows: &[Vec<f64>]| Tensor::new(rows.to_vec(), &dev).unwrap();

        // Suffix causality: perturb one target token; nothing before it may move.
        let t = rng.gen_range(p_len..s);
        let mut r = rows.clone();
        r[t].iter_mut().for_each(|v| *v += rng.gen_range(0.5..3.0));
        let out = logits(&with_rows(&r));
        rep.causal_delta = rep.causal_delta.max(max_row_delta(&base, &out, valid.iter().copied().filter(|&p| p < t)));

        // Prefix bidirectionality: the first valid prefix position sees the last prefix token.
        let mut r = rows.clone();
        // Random direction: a uniform shift would be erased by the layer norms.
        r[p_len - 1].iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
        let out = logits(&with_rows(&r));
        let first = valid[0];
        rep.bidir_delta = rep.bidir_delta.min(max_row_delta(&base, &out, std::iter::once(first)));

        // Padding invariance: replace every masked block position with fresh content.
        let mut r = rows.clone();
        for p in (0..p_len).filter(|&p| !m.is_valid(p)) {
            r[p].iter_mut().for_each(|v| *v = rng.gen_range(-50.0..50.0));
        }
        let out = logits(&with_rows(&r));
        rep.pad_delta = rep.pad_delta.max(max_row_delta(&base, &out, valid.iter().copied()));
    }
    rep
}

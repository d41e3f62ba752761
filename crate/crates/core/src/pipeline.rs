//! Glue between the corpus, the model, the trainer and the benchmark.

use std::path::Path;

use candle_core::{DType, Device};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::datagen::{DatasetManifest, Split};
use crate::decoder::target_tokens;
use crate::error::{Error, Result};
use crate::eval::{benchmark_items, EvalItem, EvalOptions, EvalReport};
use crate::media::load_clip;
use crate::model::DuoVqa;
use crate::training::{Trainer, TrainingItem, TrainingLog, TrainingSet};

/// Loads and preprocesses every record of `split` for training.
pub fn load_training_set(model: &DuoVqa, manifest: &DatasetManifest, split: Split) -> Result<TrainingSet> {
    let items = manifest
        .records_in(split)
        .par_iter()
        .map(|r| {
            let clip = load_clip(&manifest.clip_dir(r))?;
            Ok(TrainingItem {
                id: r.id(),
                source_id: r.source_id.clone(),
                severity: r.severity(),
                score: r.score,
                is_original: r.is_original,
                caption: target_tokens(&r.caption),
                video: model.prepare_clip(&clip)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(items)
}

pub fn evaluate(model: &DuoVqa, manifest: &DatasetManifest, split: Option<Split>, opts: &EvalOptions) -> Result<EvalReport> {
    let items = EvalItem::from_manifest(manifest, split);
    let id = match split {
        Some(s) => format!("synthetic:{s}"),
        None => "synthetic".to_string(),
    };
    Ok(benchmark_items(model, &id, &items, opts)?.0)
}

pub struct TrainOutcome {
    pub model: DuoVqa,
    pub trainer: Trainer,
}

/// Builds a fresh model from `cfg.model` and trains it on the train split.
/// Writes the step log to `log_dir/train.log` when a directory is given.
pub fn train_model(cfg: &RunConfig, manifest: &DatasetManifest, log_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = DuoVqa::new(cfg.model.clone(), DType::F32, &Device::Cpu)?;
    let set = load_training_set(&model, manifest, Split::Train)?;
    let mut trainer = Trainer::new(&model, cfg.training.clone())?;
    if let Some(dir) = log_dir {
        trainer = trainer.with_log(TrainingLog::create(&dir.join("train.log"))?);
    }
    let every = cfg.training.eval_every;
    let has_test = !manifest.records_in(Split::Test).is_empty();
    let total = cfg.training.steps;
    trainer.run(&model, &set, |step, l| {
        if step % 25 == 0 || step == total {
            log::info!(
                "step {step}/{total}: rank {:.4} mse {:.4} text {:.4} total {:.4}",
                l.rank,
                l.mse,
                l.text,
                l.total
            );
        }
        if every > 0 && has_test && step % every == 0 && step < total {
            let r = evaluate(&model, manifest, Some(Split::Test), &cfg.eval)?;
            log::info!("step {step}: held-out srcc {:?} fr_pooled {:?}", r.srcc, r.fr_pooled);
        }
        Ok(())
    })
    .map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("training aborted: {m}")),
        other => other,
    })?;
    Ok(TrainOutcome { model, trainer })
}

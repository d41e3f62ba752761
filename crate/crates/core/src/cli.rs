//! `duovqa` subcommands: gen-data, train, eval, infer, compare.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::datagen::{build_corpus, DatasetManifest, Split, MANIFEST_FILE};
use crate::decoder::Strategy;
use crate::error::{Error, Result};
use crate::eval::{run_benchmark, write_report, Thresholds};
use crate::media::load_clip;
use crate::model::DuoVqa;
use crate::pipeline::{evaluate, train_model};
use crate::quality_head::quality_band;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Parser)]
#[command(name = "duovqa", version, about = "Dual-encoder video quality assessment with text explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file layered over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set training.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data generation, initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a corpus of source clips and severity ladders.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sources: Option<usize>,
        #[arg(long)]
        levels: Option<u32>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the train split of a corpus and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of pairwise samples per batch.
        #[arg(long)]
        mix: Option<f64>,
        /// `rank,mse,text` loss weights.
        #[arg(long)]
        loss_weights: Option<String>,
        /// frozen | head | all
        #[arg(long)]
        freeze_mode: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Score a corpus split and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated severity differences.
        #[arg(long)]
        diffs: Option<String>,
        /// train | test | all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        min_srcc: Option<f64>,
        #[arg(long)]
        min_plcc: Option<f64>,
        /// `DIFF=MAX` flip-rate ceiling. Repeatable.
        #[arg(long = "max-fr", value_name = "DIFF=MAX")]
        max_fr: Vec<String>,
    },
    /// Score one video and describe it.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame directory or single image.
        video: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_len: usize,
    },
    /// Compare two videos.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        video_a: PathBuf,
        video_b: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_len: usize,
    },
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        overrides.extend([
            format!("data.seed={s}"),
            format!("model.init_seed={s}"),
            format!("training.seed={s}"),
        ]);
    }
    overrides.extend(extra);
    overrides.extend(common.overrides.iter().cloned());
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Input(format!("{} exists and is not empty (use --force)", dir.display())));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run_log(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(RUN_LOG);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let text = format!("# duovqa {command}\n# resolved configuration\n{}", cfg.to_toml());
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    log::info!("resolved configuration:\n{}", cfg.to_toml());
    Ok(())
}

fn append_run_log(dir: &Path, line: &str) -> Result<()> {
    let path = dir.join(RUN_LOG);
    let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} entry `{p}`"))))
        .collect()
}

pub fn manifest_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData {
            common,
            out,
            sources,
            levels,
            force,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = sources {
                extra.push(format!("data.sources={n}"));
            }
            if let Some(s) = levels {
                extra.push(format!("data.levels={s}"));
            }
            let cfg = resolve(&common, extra)?;
            prepare_out(&out, force)?;
            write_run_log(&out, "gen-data", &cfg)?;
            let m = build_corpus(&cfg.data, &out)?;
            let originals = m.records.iter().filter(|r| r.is_original).count();
            let test = m.records_in(Split::Test).len();
            let path = out.join(MANIFEST_FILE);
            let hash = manifest_hash(&path)?;
            println!("manifest: {}", path.display());
            println!(
                "records: {} ({originals} originals, {} variants; {} train, {test} test)",
                m.records.len(),
                m.records.len() - originals,
                m.records.len() - test
            );
            println!("manifest_sha256: {hash}");
            append_run_log(&out, &format!("manifest_sha256: {hash}"))?;
            Ok(0)
        }
        Command::Train {
            common,
            data,
            out,
            mix,
            loss_weights,
            freeze_mode,
            force,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mix {
                extra.push(format!("training.single_pair_mix={m}"));
            }
            if let Some(w) = loss_weights {
                let w: crate::training::LossWeights = w.parse()?;
                extra.push(format!("training.loss_weights={}", serde_json::to_string(&w).expect("weights")));
            }
            if let Some(f) = freeze_mode {
                let f: crate::model::FreezeMode = f.parse()?;
                extra.push(format!("training.encoder_freeze_mode={}", serde_json::to_string(&f).expect("mode")));
            }
            let cfg = resolve(&common, extra)?;
            let manifest = DatasetManifest::read(&data)?;
            prepare_out(&out, force)?;
            write_run_log(&out, "train", &cfg)?;
            fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out.join("config.toml"), e))?;
            let outcome = train_model(&cfg, &manifest, Some(&out))?;
            let ckpt = out.join(CHECKPOINT_FILE);
            save_checkpoint(&outcome.model, &ckpt)?;
            if let Some(last) = outcome.trainer.history.last() {
                append_run_log(&out, &format!("final_loss: {:?}", last))?;
            }
            println!("checkpoint: {}", ckpt.display());
            if !manifest.records_in(Split::Test).is_empty() {
                let r = evaluate(&outcome.model, &manifest, Some(Split::Test), &cfg.eval)?;
                write_report(&r, &out.join("heldout_report.txt"))?;
                println!("held-out srcc: {:?}, fr_pooled: {:?}", r.srcc, r.fr_pooled);
            }
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            diffs,
            split,
            min_srcc,
            min_plcc,
            max_fr,
        } => {
            let mut extra = Vec::new();
            if let Some(d) = diffs {
                let d: Vec<u32> = parse_list(&d, "diff")?;
                extra.push(format!("eval.diffs={}", serde_json::to_string(&d).expect("diffs")));
            }
            let cfg = resolve(&common, extra)?;
            let split = match split.as_str() {
                "all" => None,
                s => Some(s.parse::<Split>()?),
            };
            let max_fr = max_fr
                .iter()
                .map(|s| {
                    let (d, v) = s
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("--max-fr expects DIFF=MAX, got `{s}`")))?;
                    Ok((
                        d.parse().map_err(|_| Error::Config(format!("bad diff `{d}`")))?,
                        v.parse().map_err(|_| Error::Config(format!("bad flip-rate bound `{v}`")))?,
                    ))
                })
                .collect::<Result<Vec<(u32, f64)>>>()?;
            let thresholds = Thresholds {
                min_srcc,
                min_plcc,
                max_fr,
            };
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_run_log(&out, "eval", &cfg)?;
            let model = load_checkpoint(&checkpoint, &Device::Cpu)?;
            let manifest = DatasetManifest::read(&data)?;
            let reports = run_benchmark(&model, std::slice::from_ref(&manifest), split, &cfg.eval, Some(&out))?;
            let mut code = 0;
            for r in &reports {
                print!("{}", crate::eval::render_report(r));
                let v = thresholds.violations(r);
                for msg in &v {
                    eprintln!("threshold violated: {msg}");
                    append_run_log(&out, &format!("threshold violated: {msg}"))?;
                }
                if !v.is_empty() {
                    code = 2;
                }
            }
            Ok(code)
        }
        Command::Infer {
            checkpoint,
            video,
            max_len,
        } => {
            let model = load_checkpoint(&checkpoint, &Device::Cpu)?;
            let out = infer(&model, &video, max_len)?;
            print!("{}", out.render());
            Ok(0)
        }
        Command::Compare {
            checkpoint,
            video_a,
            video_b,
            max_len,
        } => {
            let model = load_checkpoint(&checkpoint, &Device::Cpu)?;
            let out = compare(&model, &video_a, &video_b, max_len)?;
            print!("{}", out.render());
            Ok(0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub score: f64,
    pub per_frame: Vec<f64>,
    pub description: String,
    pub truncated: bool,
}

impl InferOutput {
    pub fn render(&self) -> String {
        format!(
            "score: {:.4}\nband: {}\nper_frame: {:?}\ndescription: {}\ntruncated: {}\n",
            self.score,
            quality_band(self.score),
            self.per_frame,
            self.description,
            self.truncated
        )
    }
}

pub fn infer(model: &DuoVqa, video: &Path, max_len: usize) -> Result<InferOutput> {
    let clip = load_clip(video)?;
    let prepared = model.prepare_clip(&clip)?;
    let q = model.score(std::slice::from_ref(&prepared))?.remove(0);
    let g = model.describe(&prepared, None, max_len, Strategy::Greedy)?;
    Ok(InferOutput {
        score: q.value,
        per_frame: q.per_frame,
        description: g.text,
        truncated: g.truncated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutput {
    pub name_a: String,
    pub name_b: String,
    pub score_a: f64,
    pub score_b: f64,
    /// `Some(true)` when A wins, `Some(false)` when B wins, `None` on a tie.
    pub a_wins: Option<bool>,
    pub verdict: String,
    pub description: String,
    pub truncated: bool,
}

impl CompareOutput {
    pub fn render(&self) -> String {
        format!(
            "score_a: {:.4} ({})\nscore_b: {:.4} ({})\nverdict: {}\ndescription: {}\ntruncated: {}\n",
            self.score_a, self.name_a, self.score_b, self.name_b, self.verdict, self.description, self.truncated
        )
    }
}

/// The verdict follows the printed score ordering; the decoder text is the pair description.
pub fn compare(model: &DuoVqa, a: &Path, b: &Path, max_len: usize) -> Result<CompareOutput> {
    let (ca, cb) = (load_clip(a)?, load_clip(b)?);
    let (pa, pb) = (model.prepare_clip(&ca)?, model.prepare_clip(&cb)?);
    let s = model.score(&[pa.clone(), pb.clone()])?;
    let (score_a, score_b) = (s[0].value, s[1].value);
    let (name_a, name_b) = (a.display().to_string(), b.display().to_string());
    let a_wins = if score_a > score_b {
        Some(true)
    } else if score_b > score_a {
        Some(false)
    } else {
        None
    };
    let verdict = match a_wins {
        Some(true) => format!("{name_a} has higher quality than {name_b}"),
        Some(false) => format!("{name_b} has higher quality than {name_a}"),
        None => format!("tie: {name_a} and {name_b} have equal quality"),
    };
    let g = model.describe(&pa, Some(&pb), max_len, Strategy::Greedy)?;
    Ok(CompareOutput {
        name_a,
        name_b,
        score_a,
        score_b,
        a_wins,
        verdict,
        description: g.text,
        truncated: g.truncated,
    })
}

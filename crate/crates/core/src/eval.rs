//! Correlation metrics, flip rate over same-source severity pairs, benchmark
//! runs over a manifest, and report/plot emission.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::media::load_clip;
use crate::model::DuoVqa;

pub const DEFAULT_DIFFS: [u32; 6] = [2, 4, 6, 8, 10, 20];

fn check_lengths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("length mismatch: {} predictions, {} targets", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Input("correlation needs at least two items".into()));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// 1-based ranks, ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(format!("{what} is undefined for constant input")));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    pearson(&average_ranks(pred), &average_ranks(gt), "SRCC")
}

/// Pearson correlation on raw scores.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    pearson(pred, gt, "PLCC")
}

/// Monotone 4-parameter logistic `b2 + (b1 − b2) / (1 + exp(−(x − b3)/|b4|))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic4(pub [f64; 4]);

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.0;
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / b4.abs().max(1e-12)).exp())
    }

    fn jacobian(&self, x: f64) -> [f64; 4] {
        let [b1, b2, b3, b4] = self.0;
        let s = b4.abs().max(1e-12);
        let z = (x - b3) / s;
        let sig = 1.0 / (1.0 + (-z).exp());
        let ds = sig * (1.0 - sig);
        [sig, 1.0 - sig, -(b1 - b2) * ds / s, -(b1 - b2) * ds * z / s * b4.signum()]
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let p = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            for k in c..4 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Levenberg-Marquardt least squares fit of [`Logistic4`] mapping `pred` onto `gt`.
pub fn fit_logistic(pred: &[f64], gt: &[f64]) -> Result<Logistic4> {
    check_lengths(pred, gt)?;
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let sd = (pred.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(Error::Undefined("logistic fit needs non-constant predictions".into()));
    }
    let gmax = gt.iter().cloned().fold(f64::MIN, f64::max);
    let gmin = gt.iter().cloned().fold(f64::MAX, f64::min);
    let sse = |m: &Logistic4| pred.iter().zip(gt).map(|(&x, &y)| (y - m.eval(x)).powi(2)).sum::<f64>();
    let mut m = Logistic4([gmax, gmin, mean, sd]);
    let mut cost = sse(&m);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&x, &y) in pred.iter().zip(gt) {
            let j = m.jacobian(x);
            let r = y - m.eval(x);
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut damped = jtj;
        for (a, row) in damped.iter_mut().enumerate() {
            row[a] += lambda * (jtj[a][a] + 1e-12);
        }
        let Some(step) = solve4(damped, jtr) else { break };
        let cand = Logistic4([0, 1, 2, 3].map(|i| m.0[i] + step[i]));
        let c = sse(&cand);
        if c < cost {
            let done = (cost - c) < 1e-14 * cost.max(1e-300);
            m = cand;
            cost = c;
            lambda = (lambda * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    Ok(m)
}

/// PLCC after the logistic remapping.
pub fn plcc_logistic(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let m = fit_logistic(pred, gt)?;
    let mapped: Vec<f64> = pred.iter().map(|&x| m.eval(x)).collect();
    plcc(&mapped, gt)
}

/// How equal scores within a severity pair are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// A tie is a flip.
    Flip,
    /// Ties are dropped from numerator and denominator.
    Exclude,
}

/// Fraction of `(score_low_severity, score_high_severity)` pairs ranked wrongly.
pub fn flip_rate(pairs: &[(f64, f64)], ties: TiePolicy) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("flip rate of an empty pair list".into()));
    }
    let (mut flips, mut counted) = (0usize, 0usize);
    for &(lo, hi) in pairs {
        if lo == hi {
            if ties == TiePolicy::Flip {
                flips += 1;
                counted += 1;
            }
        } else {
            counted += 1;
            if lo < hi {
                flips += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Undefined("every pair is tied and ties are excluded".into()));
    }
    Ok(flips as f64 / counted as f64)
}

/// One scored clip of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub path: PathBuf,
    pub source_id: String,
    pub severity: u32,
    pub gt: f64,
    pub is_original: bool,
}

impl EvalItem {
    pub fn from_manifest(m: &DatasetManifest, split: Option<Split>) -> Vec<EvalItem> {
        m.records
            .iter()
            .filter(|r| split.map_or(true, |s| r.split == s))
            .map(|r| EvalItem {
                id: r.id(),
                path: m.clip_dir(r),
                source_id: r.source_id.clone(),
                severity: r.severity(),
                gt: r.score,
                is_original: r.is_original,
            })
            .collect()
    }
}

/// For each `d`, index pairs `(lower severity, higher severity)` of same-source
/// items whose severities differ by exactly `d`. Buckets may be empty.
pub fn build_diff_pairs(items: &[EvalItem], diffs: &[u32]) -> BTreeMap<u32, Vec<(usize, usize)>> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_source.entry(&it.source_id).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for &d in diffs {
        let mut pairs = Vec::new();
        for idx in by_source.values() {
            for &a in idx {
                for &b in idx {
                    if items[b].severity == items[a].severity + d && d > 0 {
                        pairs.push((a, b));
                    }
                }
            }
        }
        if pairs.is_empty() {
            log::warn!("no same-source pairs with severity difference {d}");
        }
        out.insert(d, pairs);
    }
    out
}

/// Anything that can put a quality number on a benchmark item.
pub trait QualityScorer: Sync {
    fn score_item(&self, item: &EvalItem) -> Result<f64>;

    fn score_items(&self, items: &[EvalItem]) -> Vec<Result<f64>> {
        items.par_iter().map(|it| self.score_item(it)).collect()
    }
}

impl QualityScorer for DuoVqa {
    fn score_item(&self, item: &EvalItem) -> Result<f64> {
        let clip = load_clip(&item.path)?;
        Ok(self.score(&[self.prepare_clip(&clip)?])?[0].value)
    }

    fn score_items(&self, items: &[EvalItem]) -> Vec<Result<f64>> {
        let prepared: Vec<Result<_>> = items
            .par_iter()
            .map(|it| load_clip(&it.path).and_then(|c| self.prepare_clip(&c)))
            .collect();
        let ok: Vec<_> = prepared.iter().filter_map(|p| p.as_ref().ok().cloned()).collect();
        let mut scores = match self.score(&ok) {
            Ok(s) => s.into_iter().map(|q| Ok(q.value)).collect::<Vec<_>>().into_iter(),
            Err(e) => {
                let msg = e.to_string();
                return items.iter().map(|_| Err(Error::Numeric(msg.clone()))).collect();
            }
        };
        prepared
            .into_iter()
            .map(|p| match p {
                Ok(_) => scores.next().expect("one score per prepared clip"),
                Err(e) => Err(e),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub diffs: Vec<u32>,
    pub ties: TiePolicy,
    /// Also report PLCC after a 4-parameter logistic fit.
    pub logistic: bool,
    pub plots: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            diffs: DEFAULT_DIFFS.to_vec(),
            ties: TiePolicy::Flip,
            logistic: false,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub plcc_logistic: Option<f64>,
    /// Correlations of predicted against ground-truth drops from each source's original.
    pub dmos_srcc: Option<f64>,
    pub dmos_plcc: Option<f64>,
    /// Flip rate per severity difference; `None` marks an empty bucket.
    pub fr_by_diff: BTreeMap<u32, Option<f64>>,
    pub pairs_by_diff: BTreeMap<u32, usize>,
    /// Flip rate over the union of all requested buckets.
    pub fr_pooled: Option<f64>,
    pub n_items: usize,
    pub n_pairs: usize,
    pub n_skipped: usize,
    /// Metrics that could not be computed, with reasons.
    pub errors: Vec<String>,
}

fn metric(name: &str, r: Result<f64>, errors: &mut Vec<String>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{name}: {e}"));
            None
        }
    }
}

/// Computes every metric from per-item scores (`None` = skipped).
pub fn evaluate_scores(dataset_id: &str, items: &[EvalItem], scores: &[Option<f64>], opts: &EvalOptions) -> Result<EvalReport> {
    if items.len() != scores.len() {
        return Err(Error::Input("one score slot per item required".into()));
    }
    let kept: Vec<(EvalItem, f64)> = items
        .iter()
        .zip(scores)
        .filter_map(|(it, s)| s.map(|s| (it.clone(), s)))
        .collect();
    let n_skipped = items.len() - kept.len();
    let (kitems, pred): (Vec<EvalItem>, Vec<f64>) = kept.into_iter().unzip();
    let gt: Vec<f64> = kitems.iter().map(|i| i.gt).collect();
    let mut errors = Vec::new();
    let srcc_v = metric("srcc", srcc(&pred, &gt), &mut errors);
    let plcc_v = metric("plcc", plcc(&pred, &gt), &mut errors);
    let plcc_logistic = if opts.logistic {
        metric("plcc_logistic", plcc_logistic(&pred, &gt), &mut errors)
    } else {
        None
    };

    let mut originals: HashMap<&str, (f64, f64)> = HashMap::new();
    for (it, &p) in kitems.iter().zip(&pred) {
        if it.is_original {
            originals.insert(&it.source_id, (it.gt, p));
        }
    }
    let (mut dp, mut dg) = (Vec::new(), Vec::new());
    for (it, &p) in kitems.iter().zip(&pred) {
        if let (false, Some(&(go, po))) = (it.is_original, originals.get(it.source_id.as_str())) {
            dp.push(po - p);
            dg.push(go - it.gt);
        }
    }
    let dmos_srcc = metric("dmos_srcc", srcc(&dp, &dg), &mut errors);
    let dmos_plcc = metric("dmos_plcc", plcc(&dp, &dg), &mut errors);

    let buckets = build_diff_pairs(&kitems, &opts.diffs);
    let mut fr_by_diff = BTreeMap::new();
    let mut pairs_by_diff = BTreeMap::new();
    let mut pooled = Vec::new();
    for (d, pairs) in &buckets {
        let scored: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (pred[a], pred[b])).collect();
        pairs_by_diff.insert(*d, scored.len());
        let fr = if scored.is_empty() {
            errors.push(format!("fr_diff_{d}: no pairs with this severity difference"));
            None
        } else {
            metric(&format!("fr_diff_{d}"), flip_rate(&scored, opts.ties), &mut errors)
        };
        fr_by_diff.insert(*d, fr);
        pooled.extend(scored);
    }
    let fr_pooled = if pooled.is_empty() {
        None
    } else {
        metric("fr_pooled", flip_rate(&pooled, opts.ties), &mut errors)
    };
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        srcc: srcc_v,
        plcc: plcc_v,
        plcc_logistic,
        dmos_srcc,
        dmos_plcc,
        fr_by_diff,
        pairs_by_diff,
        fr_pooled,
        n_items: kitems.len(),
        n_pairs: pooled.len(),
        n_skipped,
        errors,
    })
}

/// Scores every item once and computes the report. Unreadable media are skipped and counted.
pub fn benchmark_items(scorer: &dyn QualityScorer, dataset_id: &str, items: &[EvalItem], opts: &EvalOptions) -> Result<(EvalReport, Vec<Option<f64>>)> {
    let scores: Vec<Option<f64>> = scorer
        .score_items(items)
        .into_iter()
        .zip(items)
        .map(|(r, it)| match r {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("skipping {}: {e}", it.id);
                None
            }
        })
        .collect();
    Ok((evaluate_scores(dataset_id, items, &scores, opts)?, scores))
}

/// One report per manifest; writes `report_<i>.txt` and plots when `out` is given.
pub fn run_benchmark(
    scorer: &dyn QualityScorer,
    manifests: &[DatasetManifest],
    split: Option<Split>,
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for (i, m) in manifests.iter().enumerate() {
        let name = m.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
        let id = match split {
            Some(s) => format!("{name}:{s}"),
            None => name,
        };
        let items = EvalItem::from_manifest(m, split);
        let (report, scores) = benchmark_items(scorer, &id, &items, opts)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let stem = if manifests.len() == 1 { "report".to_string() } else { format!("report_{i}") };
            write_report(&report, &dir.join(format!("{stem}.txt")))?;
            if opts.plots {
                plot_scatter(&items, &scores, &dir.join(format!("{stem}_scatter.png")))?;
                plot_ladders(&items, &scores, &dir.join(format!("{stem}_ladders.png")))?;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// One metric per line, then the full report as JSON between markers.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = format!("dataset_id: {}\n", r.dataset_id);
    s += &format!("srcc: {}\nplcc: {}\n", fmt_opt(r.srcc), fmt_opt(r.plcc));
    if r.plcc_logistic.is_some() {
        s += &format!("plcc_logistic: {}\n", fmt_opt(r.plcc_logistic));
    }
    s += &format!("dmos_srcc: {}\ndmos_plcc: {}\n", fmt_opt(r.dmos_srcc), fmt_opt(r.dmos_plcc));
    for (d, fr) in &r.fr_by_diff {
        s += &format!("fr_diff_{d}: {} ({} pairs)\n", fmt_opt(*fr), r.pairs_by_diff.get(d).copied().unwrap_or(0));
    }
    s += &format!("fr_pooled: {}\n", fmt_opt(r.fr_pooled));
    s += &format!("n_items: {}\nn_pairs: {}\nn_skipped: {}\n", r.n_items, r.n_pairs, r.n_skipped);
    for e in &r.errors {
        s += &format!("error: {e}\n");
    }
    s += "--- json ---\n";
    s += &serde_json::to_string_pretty(r).expect("report serializes");
    s += "\n--- end ---\n";
    s
}

pub fn write_report(r: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, render_report(r)).map_err(|e| Error::io(path, e))
}

/// Parses the JSON block of a rendered report.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let body = text
        .split("--- json ---\n")
        .nth(1)
        .and_then(|t| t.split("\n--- end ---").next())
        .ok_or_else(|| Error::Input("report has no JSON block".into()))?;
    serde_json::from_str(body).map_err(|e| Error::Input(format!("report JSON: {e}")))
}

/// Acceptance thresholds supplied on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Thresholds {
    pub min_srcc: Option<f64>,
    pub min_plcc: Option<f64>,
    pub max_fr: Vec<(u32, f64)>,
}

impl Thresholds {
    /// Human-readable violations; empty means pass.
    pub fn violations(&self, r: &EvalReport) -> Vec<String> {
        let mut v = Vec::new();
        let mut low = |name: &str, got: Option<f64>, min: f64| match got {
            Some(x) if x >= min => {}
            _ => v.push(format!("{name} {} below {min}", fmt_opt(got))),
        };
        if let Some(m) = self.min_srcc {
            low("srcc", r.srcc, m);
        }
        if let Some(m) = self.min_plcc {
            low("plcc", r.plcc, m);
        }
        for &(d, max) in &self.max_fr {
            match r.fr_by_diff.get(&d).copied().flatten() {
                Some(x) if x <= max => {}
                got => v.push(format!("fr_diff_{d} {} above {max}", fmt_opt(got))),
            }
        }
        v
    }
}

struct Canvas {
    img: RgbImage,
    margin: u32,
}

impl Canvas {
    fn new() -> Self {
        let mut img = RgbImage::from_pixel(480, 360, Rgb([255, 255, 255]));
        let m = 30;
        for x in m..480 - m / 2 {
            img.put_pixel(x, 360 - m, Rgb([0, 0, 0]));
        }
        for y in m / 2..360 - m {
            img.put_pixel(m, y, Rgb([0, 0, 0]));
        }
        Self { img, margin: m }
    }

    fn dot(&mut self, fx: f64, fy: f64, color: Rgb<u8>) {
        let (w, h) = (self.img.width() - self.margin * 3 / 2, self.img.height() - self.margin * 3 / 2);
        let x = self.margin as i64 + (fx.clamp(0.0, 1.0) * w as f64) as i64;
        let y = (self.img.height() - self.margin) as i64 - (fy.clamp(0.0, 1.0) * h as f64) as i64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < self.img.width() && (py as u32) < self.img.height() {
                    self.img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn unit(lo: f64, hi: f64, v: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

const COLORS: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

/// Predicted (y) against ground truth (x).
pub fn plot_scatter(items: &[EvalItem], scores: &[Option<f64>], path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = items.iter().zip(scores).filter_map(|(i, s)| s.map(|s| (i.gt, s))).collect();
    let mut c = Canvas::new();
    let (xl, xh) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (yl, yh) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    for (x, y) in pts {
        c.dot(unit(xl, xh, x), unit(yl, yh, y), Rgb(COLORS[0]));
    }
    c.save(path)
}

/// Predicted score against severity, one colour per source.
pub fn plot_ladders(items: &[EvalItem], scores: &[Option<f64>], path: &Path) -> Result<()> {
    let max_s = items.iter().map(|i| i.severity).max().unwrap_or(1).max(1) as f64;
    let ys: Vec<f64> = scores.iter().flatten().copied().collect();
    let (yl, yh) = ys.iter().fold((f64::MAX, f64::MIN), |(a, b), &y| (a.min(y), b.max(y)));
    let mut sources: Vec<&str> = items.iter().map(|i| i.source_id.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut c = Canvas::new();
    for (it, s) in items.iter().zip(scores) {
        if let Some(s) = s {
            let k = sources.iter().position(|x| *x == it.source_id).unwrap_or(0);
            c.dot(it.severity as f64 / max_s, unit(yl, yh, *s), Rgb(COLORS[k % COLORS.len()]));
        }
    }
    c.save(path)
}

//! Synthetic corpus: procedural source clips, a monotone distortion ladder,
//! pseudo-MOS labels, templated captions and the text manifest tying them together.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{save_frames, VideoClip, Variant};
use crate::quality_head::quality_band;

pub const MOS_MIN: f64 = 1.5;
pub const MOS_MAX: f64 = 4.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    BlockQuant,
    GaussBlur,
    AddNoise,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 3] = [Self::BlockQuant, Self::GaussBlur, Self::AddNoise];

    pub fn name(self) -> &'static str {
        match self {
            Self::BlockQuant => "block_quant",
            Self::GaussBlur => "gauss_blur",
            Self::AddNoise => "add_noise",
        }
    }

    /// Objective strength at severity `s`: quantizer step, blur sigma or noise std.
    /// Zero at `s = 0`, strictly increasing afterwards.
    pub fn strength(self, s: u32) -> f64 {
        if s == 0 {
            return 0.0;
        }
        let s = s as f64;
        match self {
            Self::BlockQuant => 2.0 * s,
            Self::GaussBlur => 0.3 + 0.12 * s,
            Self::AddNoise => 2.0 * s,
        }
    }

    fn artifact(self) -> &'static str {
        match self {
            Self::BlockQuant => "blocking artifacts",
            Self::GaussBlur => "blur",
            Self::AddNoise => "noise",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "block_quant" => Ok(Self::BlockQuant),
            "gauss_blur" => Ok(Self::GaussBlur),
            "add_noise" => Ok(Self::AddNoise),
            _ => Err(Error::Config(format!(
                "unknown distortion kind `{s}` (block_quant|gauss_blur|add_noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionTag {
    pub kind: DistortionKind,
    pub severity: u32,
    /// Quantizer step, blur sigma or noise std, depending on `kind`.
    pub strength: f64,
}

impl DistortionTag {
    pub fn new(kind: DistortionKind, severity: u32) -> Self {
        Self {
            kind,
            severity,
            strength: kind.strength(severity),
        }
    }
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a, stable across runs and platforms.
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Planar f32 copy of an RGB frame, values in [0, 255].
struct Planes {
    h: usize,
    w: usize,
    c: [Vec<f32>; 3],
}

impl Planes {
    fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut c = [vec![0f32; h * w], vec![0f32; h * w], vec![0f32; h * w]];
        for (i, p) in img.pixels().enumerate() {
            for k in 0..3 {
                c[k][i] = p[k] as f32;
            }
        }
        Self { h, w, c }
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            let i = y as usize * self.w + x as usize;
            Rgb([0, 1, 2].map(|k| self.c[k][i].round().clamp(0.0, 255.0) as u8))
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / s) as f32).collect()
}

fn blur_plane(src: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += k * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let mut p = Planes::from_rgb(img);
    for k in 0..3 {
        p.c[k] = blur_plane(&p.c[k], p.h, p.w, &kernel);
    }
    p.to_rgb()
}

/// Adds a fixed standard-normal field scaled by `std`. The field depends only
/// on `seed`, so larger `std` moves every pixel at least as far.
fn add_noise(img: &RgbImage, std: f64, seed: u64) -> RgbImage {
    if std <= 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Planes::from_rgb(img);
    for i in 0..p.h * p.w {
        for k in 0..3 {
            let n: f64 = StandardNormal.sample(&mut rng);
            p.c[k][i] += (std * n) as f32;
        }
    }
    p.to_rgb()
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Orthonormal 8×8 DCT per channel, quantization with `step·(1 + (u+v)/2)` so
/// high frequencies go first, inverse transform. Edge blocks are padded by replication.
fn block_quantize(img: &RgbImage, step: f64) -> RgbImage {
    if step <= 0.0 {
        return img.clone();
    }
    let basis = dct_basis();
    let mut p = Planes::from_rgb(img);
    let (h, w) = (p.h, p.w);
    for plane in p.c.iter_mut() {
        let src = plane.clone();
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut blk = [[0.0f64; 8]; 8];
                for (y, row) in blk.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let yy = (by + y).min(h - 1);
                        let xx = (bx + x).min(w - 1);
                        *v = src[yy * w + xx] as f64 - 128.0;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += basis[u][y] * basis[v][x] * blk[y][x];
                            }
                        }
                        let q = step * (1.0 + (u + v) as f64 / 2.0);
                        coef[u][v] = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += basis[u][y] * basis[v][x] * coef[u][v];
                            }
                        }
                        plane[(by + y) * w + bx + x] = (acc + 128.0) as f32;
                    }
                }
            }
        }
    }
    p.to_rgb()
}

/// Deterministic distortion of every frame; severity 0 is a pixel-identical copy.
pub fn apply_distortion(clip: &VideoClip, tag: &DistortionTag) -> Result<VideoClip> {
    if !tag.strength.is_finite() || tag.strength < 0.0 {
        return Err(Error::Config(format!("distortion strength must be finite and >= 0, got {}", tag.strength)));
    }
    if tag.severity == 0 {
        return clip.map_frames(Variant::Original, |_, f| f.clone());
    }
    let seed = hash_str(&clip.source_id);
    clip.map_frames(Variant::Distorted(tag.clone()), |i, f| match tag.kind {
        DistortionKind::BlockQuant => block_quantize(f, tag.strength),
        DistortionKind::GaussBlur => gaussian_blur(f, tag.strength),
        DistortionKind::AddNoise => add_noise(f, tag.strength, seed.wrapping_add(i as u64)),
    })
}

/// `mos − (s/S)(mos − 1)`: the original's MOS at `s = 0`, 1.0 at `s = S`.
pub fn assign_pseudo_mos(mos_orig: f64, severity: u32, levels: u32) -> Result<f64> {
    if levels == 0 || severity > levels {
        return Err(Error::Input(format!("severity {severity} outside [0, {levels}]")));
    }
    Ok(mos_orig - (severity as f64 / levels as f64) * (mos_orig - 1.0))
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.as_raw().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Mean absolute 4-neighbour Laplacian of the luma channel.
pub fn laplacian_energy(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma: Vec<f64> = img
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = luma[y * w + x];
            let l = luma[(y - 1) * w + x] + luma[(y + 1) * w + x] + luma[y * w + x - 1] + luma[y * w + x + 1] - 4.0 * c;
            acc += l.abs();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [200.0, 45.0, 40.0]),
    ("orange", [235.0, 140.0, 30.0]),
    ("yellow", [230.0, 215.0, 60.0]),
    ("green", [50.0, 170.0, 70.0]),
    ("teal", [30.0, 150.0, 150.0]),
    ("blue", [40.0, 80.0, 210.0]),
    ("purple", [130.0, 60.0, 170.0]),
    ("gray", [128.0, 128.0, 128.0]),
];

const GLYPHS: [(char, [u8; 7]); 14] = [
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('C', [0b01111, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b01111]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes { freq: f64, angle: f64 },
    Checker { cell: u32 },
    Rings { freq: f64 },
}

impl Texture {
    fn describe(&self) -> &'static str {
        match *self {
            Texture::Stripes { freq, .. } if freq > 0.18 => "fine stripes",
            Texture::Stripes { .. } => "coarse stripes",
            Texture::Checker { .. } => "a checkerboard",
            Texture::Rings { .. } => "rings",
        }
    }

    fn value(&self, x: f64, y: f64, cx: f64, cy: f64) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            Texture::Stripes { freq, angle } => (TAU * freq * (x * angle.cos() + y * angle.sin())).sin(),
            Texture::Checker { cell } => {
                let c = cell as f64;
                if ((x / c).floor() + (y / c).floor()) as i64 % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Rings { freq } => (TAU * freq * ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
}

/// Procedural parameters of one source clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: String,
    pub mos: f64,
    pub colors: (usize, usize),
    pub gradient_angle: f64,
    pub texture: Texture,
    pub texture_amp: f64,
    pub shape: ShapeKind,
    pub shape_color: usize,
    /// (cx, cy, radius) in relative units.
    pub shapes: Vec<(f64, f64, f64)>,
    pub word: String,
    pub word_pos: (f64, f64),
    /// Horizontal pan in pixels per frame.
    pub pan: f64,
}

impl SourceSpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c0_de);
        let mos = rng.gen_range(MOS_MIN..MOS_MAX);
        let c1 = rng.gen_range(0..PALETTE.len());
        let c2 = (c1 + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
        let texture = match rng.gen_range(0..3) {
            0 => Texture::Stripes {
                freq: rng.gen_range(0.08..0.3),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
            1 => Texture::Checker {
                cell: rng.gen_range(3..9),
            },
            _ => Texture::Rings {
                freq: rng.gen_range(0.06..0.2),
            },
        };
        let n_shapes = rng.gen_range(1..4);
        let shapes = (0..n_shapes)
            .map(|_| (rng.gen_range(0.15..0.85), rng.gen_range(0.2..0.8), rng.gen_range(0.08..0.18)))
            .collect();
        let word_len = rng.gen_range(3..6);
        let word = (0..word_len).map(|_| GLYPHS[rng.gen_range(0..GLYPHS.len())].0).collect();
        Self {
            source_id: format!("src_{seed:04}"),
            mos,
            colors: (c1, c2),
            gradient_angle: rng.gen_range(0.0..std::f64::consts::TAU),
            texture,
            texture_amp: rng.gen_range(25.0..55.0),
            shape: if rng.gen_bool(0.5) { ShapeKind::Disc } else { ShapeKind::Square },
            shape_color: rng.gen_range(0..PALETTE.len()),
            shapes,
            word,
            word_pos: (rng.gen_range(0.05..0.45), rng.gen_range(0.1..0.6)),
            pan: [0.0, 1.0, 2.0, -1.0][rng.gen_range(0..4)],
        }
    }

    /// Intrinsic capture degradation tied to the source MOS: 0 at the top of
    /// the MOS range, 1 at the bottom.
    pub fn intrinsic_degradation(&self) -> f64 {
        ((MOS_MAX - self.mos) / (MOS_MAX - MOS_MIN)).clamp(0.0, 1.0)
    }

    fn render(&self, h: usize, w: usize, t: usize) -> RgbImage {
        let (c1, c2) = (PALETTE[self.colors.0].1, PALETTE[self.colors.1].1);
        let sc = PALETTE[self.shape_color].1;
        let (ga, gb) = (self.gradient_angle.cos(), self.gradient_angle.sin());
        let shift = self.pan * t as f64;
        let scale = h.min(w) as f64;
        let glyph_px = ((h as f64 / 48.0).round() as usize).max(1);
        let (wx, wy) = (self.word_pos.0 * w as f64 + shift, self.word_pos.1 * h as f64);
        RgbImage::from_fn(w as u32, h as u32, |xi, yi| {
            let (x, y) = (xi as f64, yi as f64);
            let g = (((x / w as f64 - 0.5) * ga + (y / h as f64 - 0.5) * gb) + 0.5).clamp(0.0, 1.0) as f32;
            let tex = (self.texture_amp * self.texture.value(x - shift, y, w as f64 / 2.0, h as f64 / 2.0)) as f32;
            let mut px = [0, 1, 2].map(|k| c1[k] * (1.0 - g) + c2[k] * g + tex);
            for &(cx, cy, r) in &self.shapes {
                let (dx, dy) = (x - (cx * w as f64 + shift), y - cy * h as f64);
                let r = r * scale;
                let inside = match self.shape {
                    ShapeKind::Disc => dx * dx + dy * dy <= r * r,
                    ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
                };
                if inside {
                    px = sc;
                }
            }
            let (gx, gy) = (x - wx, y - wy);
            if gx >= 0.0 && gy >= 0.0 {
                let (col, row) = (gx as usize / glyph_px, gy as usize / glyph_px);
                let (ci, cx) = (col / 6, col % 6);
                if row < 7 && cx < 5 {
                    if let Some(ch) = self.word.chars().nth(ci) {
                        let bits = GLYPHS.iter().find(|(c, _)| *c == ch).map(|g| g.1).unwrap_or([0; 7]);
                        if bits[row] >> (4 - cx) & 1 == 1 {
                            px = [250.0, 250.0, 250.0];
                        }
                    }
                }
            }
            Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }

    /// First caption sentence (content) and second (style).
    fn content_sentences(&self) -> (String, String) {
        let n = self.shapes.len();
        let count = ["One", "Two", "Three", "Four"][n.min(4) - 1];
        let kind = match (self.shape, n) {
            (ShapeKind::Disc, 1) => "disc",
            (ShapeKind::Disc, _) => "discs",
            (ShapeKind::Square, 1) => "square",
            (ShapeKind::Square, _) => "squares",
        };
        let content = format!(
            "{count} {} {kind} and the word {} on a {} to {} gradient.",
            PALETTE[self.shape_color].0, self.word, PALETTE[self.colors.0].0, PALETTE[self.colors.1].0
        );
        let motion = if self.pan == 0.0 { "static" } else { "panning" };
        let style = format!("Flat graphics over {}, {motion}.", self.texture.describe());
        (content, style)
    }
}

/// Renders a source clip with its intrinsic degradation applied.
pub fn synth_source(seed: u64, height: usize, width: usize, n_frames: usize) -> Result<(VideoClip, SourceSpec)> {
    if height == 0 || width == 0 || n_frames == 0 {
        return Err(Error::Input(format!("bad source geometry {height}x{width}x{n_frames}")));
    }
    let spec = SourceSpec::from_seed(seed);
    let d = spec.intrinsic_degradation();
    let noise_seed = hash_str(&spec.source_id) ^ 0xa5a5;
    let frames = (0..n_frames)
        .map(|t| {
            let f = spec.render(height, width, t);
            let f = gaussian_blur(&f, 1.2 * d);
            add_noise(&f, 10.0 * d, noise_seed.wrapping_add(t as u64))
        })
        .collect();
    Ok((VideoClip::new(frames, spec.source_id.clone(), Variant::Original)?, spec))
}

/// Three sentences: content, style, technical quality.
pub fn template_caption(spec: &SourceSpec, tag: Option<&DistortionTag>, score: f64, levels: u32) -> String {
    let (content, style) = spec.content_sentences();
    let band = quality_band(score);
    let artifact = match tag {
        Some(t) if t.severity > 0 => {
            let frac = t.severity as f64 / levels.max(1) as f64;
            let adj = if frac <= 0.3 {
                "slight"
            } else if frac <= 0.65 {
                "visible"
            } else {
                "heavy"
            };
            format!(", with {adj} {}", t.kind.artifact())
        }
        _ if spec.intrinsic_degradation() > 0.5 => ", with soft noisy capture".to_string(),
        _ => String::new(),
    };
    format!("{content} {style} Quality is {band}{artifact}.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Clip directory relative to the manifest.
    pub clip_path: PathBuf,
    pub source_id: String,
    /// `None` for originals.
    pub tag: Option<DistortionTag>,
    /// MOS for originals, pseudo-MOS for variants.
    pub score: f64,
    pub is_original: bool,
    pub split: Split,
    pub caption: String,
}

impl ManifestRecord {
    pub fn severity(&self) -> u32 {
        self.tag.as_ref().map_or(0, |t| t.severity)
    }

    pub fn id(&self) -> String {
        self.clip_path.to_string_lossy().into_owned()
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that `clip_path`s are relative to.
    pub root: PathBuf,
    pub levels: u32,
    pub records: Vec<ManifestRecord>,
}

fn field<'a>(fields: &'a [(&str, &str)], key: &str, line: usize) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Input(format!("manifest line {line}: missing field `{key}`")))
}

fn parse<T: FromStr>(s: &str, key: &str, line: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse()
        .map_err(|e| Error::Input(format!("manifest line {line}: bad `{key}` value `{s}`: {e}")))
}

impl DatasetManifest {
    pub fn clip_dir(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.clip_path)
    }

    pub fn records_in(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn original(&self, source_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.is_original && r.source_id == source_id)
    }

    /// Text form: a `#` header line, then one tab-separated `key:value` record per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("# duovqa manifest v1 levels={}\n", self.levels);
        for r in &self.records {
            let (kind, strength) = match &r.tag {
                Some(t) => (t.kind.name(), t.strength),
                None => ("original", 0.0),
            };
            s.push_str(&format!(
                "clip_path:{}\tsource_id:{}\tkind:{kind}\tseverity:{}\tstrength:{strength}\tscore:{}\tis_original:{}\tsplit:{}\tcaption:{}\n",
                r.clip_path.display(),
                r.source_id,
                r.severity(),
                r.score,
                r.is_original,
                r.split,
                r.caption
            ));
        }
        s
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut levels = None;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if let Some(h) = line.strip_prefix('#') {
                if let Some(v) = h.split_whitespace().find_map(|w| w.strip_prefix("levels=")) {
                    levels = Some(parse::<u32>(v, "levels", n)?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<(&str, &str)> = line
                .split('\t')
                .map(|kv| {
                    kv.split_once(':')
                        .ok_or_else(|| Error::Input(format!("manifest line {n}: field `{kv}` is not key:value")))
                })
                .collect::<Result<_>>()?;
            let kind = field(&fields, "kind", n)?;
            let severity: u32 = parse(field(&fields, "severity", n)?, "severity", n)?;
            let tag = if kind == "original" {
                None
            } else {
                Some(DistortionTag {
                    kind: kind.parse()?,
                    severity,
                    strength: parse(field(&fields, "strength", n)?, "strength", n)?,
                })
            };
            records.push(ManifestRecord {
                clip_path: PathBuf::from(field(&fields, "clip_path", n)?),
                source_id: field(&fields, "source_id", n)?.to_string(),
                tag,
                score: parse(field(&fields, "score", n)?, "score", n)?,
                is_original: parse(field(&fields, "is_original", n)?, "is_original", n)?,
                split: field(&fields, "split", n)?.parse()?,
                caption: field(&fields, "caption", n)?.to_string(),
            });
        }
        let m = Self {
            root,
            levels: levels.ok_or_else(|| Error::Input("manifest header lacks `levels=`".into()))?,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Reads `path` (a manifest file, or a directory containing one).
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// Referential integrity, single original per source, strictly decreasing ladders.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.is_original != r.tag.is_none() {
                return Err(Error::Input(format!("record {}: is_original disagrees with its tag", r.id())));
            }
            if r.is_original {
                continue;
            }
            let o = self.original(&r.source_id).ok_or_else(|| {
                Error::Input(format!("variant {} refers to missing source {}", r.id(), r.source_id))
            })?;
            if o.split != r.split {
                return Err(Error::Input(format!("source {} spans both splits", r.source_id)));
            }
        }
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.source_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let mut ladder: Vec<&ManifestRecord> = self.records.iter().filter(|r| r.source_id == id).collect();
            if ladder.iter().filter(|r| r.is_original).count() != 1 {
                return Err(Error::Input(format!("source {id} must have exactly one original")));
            }
            ladder.sort_by_key(|r| r.severity());
            for w in ladder.windows(2) {
                if w[1].severity() == w[0].severity() || !(w[1].score < w[0].score) {
                    return Err(Error::Input(format!(
                        "source {id}: scores must strictly decrease with severity ({} at s={}, {} at s={})",
                        w[0].score,
                        w[0].severity(),
                        w[1].score,
                        w[1].severity()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub sources: usize,
    /// Severity steps S; each ladder has S+1 members including the original.
    pub levels: u32,
    /// Distortion kinds, assigned to sources round-robin.
    pub kinds: Vec<DistortionKind>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Fraction of sources held out for testing.
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sources: 10,
            levels: 20,
            kinds: DistortionKind::ALL.to_vec(),
            seed: 0,
            height: 96,
            width: 192,
            frames: 2,
            test_fraction: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 {
            return Err(Error::Config("data.sources must be at least 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("data.levels must be at least 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("data.kinds must not be empty".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("data.test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        Ok(())
    }

    /// Source seeds in generation order.
    pub fn source_seeds(&self) -> Vec<u64> {
        (0..self.sources as u64).map(|i| self.seed * 1000 + i).collect()
    }

    /// Held-out source indices, chosen by a seeded shuffle.
    pub fn test_sources(&self) -> Vec<usize> {
        let n_test = ((self.test_fraction * self.sources as f64).round() as usize).min(self.sources - 1);
        let mut idx: Vec<usize> = (0..self.sources).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x7e57)));
        let mut t = idx[..n_test].to_vec();
        t.sort_unstable();
        t
    }
}

/// Writes originals plus full severity ladders under `out/clips` and returns
/// the manifest (also written to `out/manifest.tsv`).
pub fn build_corpus(cfg: &CorpusConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let test = cfg.test_sources();
    let seeds = cfg.source_seeds();
    let per_source: Vec<Vec<ManifestRecord>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (clip, spec) = synth_source(seed, cfg.height, cfg.width, cfg.frames)?;
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let split = if test.contains(&i) { Split::Test } else { Split::Train };
            (0..=cfg.levels)
                .map(|s| {
                    let rel = PathBuf::from("clips").join(&spec.source_id).join(format!("s{s:02}"));
                    let tag = (s > 0).then(|| DistortionTag::new(kind, s));
                    let variant = match &tag {
                        Some(t) => apply_distortion(&clip, t)?,
                        None => clip.clone(),
                    };
                    save_frames(&out.join(&rel), variant.frames())?;
                    let score = assign_pseudo_mos(spec.mos, s, cfg.levels)?;
                    Ok(ManifestRecord {
                        caption: template_caption(&spec, tag.as_ref(), score, cfg.levels),
                        clip_path: rel,
                        source_id: spec.source_id.clone(),
                        is_original: tag.is_none(),
                        tag,
                        score,
                        split,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        levels: cfg.levels,
        records: per_source.into_iter().flatten().collect(),
    };
    manifest.validate()?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Optional real-codec ladder: runs a command template with `{input}`,
/// `{crf}` and `{output}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEncoder {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalEncoder {
    /// CRF for severity `s` on the 15..=53 step-2 ladder.
    pub fn crf_for_severity(s: u32) -> u32 {
        15 + 2 * s.saturating_sub(1)
    }

    pub fn command(&self, input: &Path, crf: u32, output: &Path) -> Command {
        let mut cmd = Command::new(&self.program);
        for a in &self.args {
            cmd.arg(
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{crf}", &crf.to_string())
                    .replace("{output}", &output.to_string_lossy()),
            );
        }
        cmd
    }

    pub fn encode(&self, input: &Path, crf: u32, output: &Path) -> Result<()> {
        let status = self
            .command(input, crf, output)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(Error::Input(format!(
                "encoder `{}` failed on {} at crf {crf} ({status})",
                self.program,
                input.display()
            )));
        }
        Ok(())
    }
}

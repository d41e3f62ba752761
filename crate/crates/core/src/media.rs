//! Frame containers, key-frame sampling and the two preprocessing views
//! (aspect-destroying high-level view, aspect-preserving patch view).

use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datagen::DistortionTag;
use crate::error::{Error, Result};

/// Which member of a severity ladder a clip is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    Original,
    Distorted(DistortionTag),
}

impl Variant {
    pub fn severity(&self) -> u32 {
        match self {
            Variant::Original => 0,
            Variant::Distorted(tag) => tag.severity,
        }
    }
}

/// A decoded frame sequence. All frames share one height and width.
#[derive(Debug, Clone)]
pub struct VideoClip {
    frames: Vec<RgbImage>,
    pub source_id: String,
    pub variant: Variant,
}

impl VideoClip {
    pub fn new(frames: Vec<RgbImage>, source_id: impl Into<String>, variant: Variant) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("video clip has no frames".into()))?;
        let (w, h) = first.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::Input("video clip has empty frames".into()));
        }
        if let Some(i) = frames.iter().position(|f| f.dimensions() != (w, h)) {
            return Err(Error::Input(format!(
                "frame {i} is {:?}, expected {w}x{h}",
                frames[i].dimensions()
            )));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
            variant,
        })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height() as usize
    }

    pub fn width(&self) -> usize {
        self.frames[0].width() as usize
    }

    /// Rebuilds the clip with every frame passed through `f`.
    pub fn map_frames(&self, variant: Variant, mut f: impl FnMut(usize, &RgbImage) -> RgbImage) -> Result<Self> {
        let frames = self.frames.iter().enumerate().map(|(i, fr)| f(i, fr)).collect();
        Self::new(frames, self.source_id.clone(), variant)
    }
}

/// H×W×3 float image, channel-interleaved, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    /// Maps 8-bit pixels to [-1, 1].
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn crop(&self, rect: Rect) -> FloatImage {
        let mut data = Vec::with_capacity(rect.height * rect.width * 3);
        for y in rect.top..rect.top + rect.height {
            let start = (y * self.width + rect.left) * 3;
            data.extend_from_slice(&self.data[start..start + rect.width * 3]);
        }
        FloatImage {
            height: rect.height,
            width: rect.width,
            data,
        }
    }

    /// Splits the image into non-overlapping `p`×`p` tokens in raster order.
    /// Each token is flattened as (row, col, channel), giving a
    /// `(h/p)·(w/p)` × `p·p·3` row-major matrix.
    pub fn to_patch_tokens(&self, p: usize) -> Result<Vec<f32>> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch embedding size {p}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Vec::with_capacity(self.data.len());
        for ty in 0..gh {
            for tx in 0..gw {
                for dy in 0..p {
                    let start = ((ty * p + dy) * self.width + tx * p) * 3;
                    out.extend_from_slice(&self.data[start..start + p * 3]);
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &FloatImage, out_h: usize, out_w: usize) -> FloatImage {
    if out_h == src.height && out_w == src.width {
        return src.clone();
    }
    let axis = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, src.height);
    let xs = axis(out_w, src.width);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = lerp(src.get(y0, x0, c), src.get(y0, x1, c), fx);
                let bottom = lerp(src.get(y1, x0, c), src.get(y1, x1, c), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    FloatImage {
        height: out_h,
        width: out_w,
        data,
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Key-frame indices `floor(i·n/m)` for `i` in `0..m`.
pub fn key_frame_indices(n: usize, m: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Input("cannot sample key frames from an empty clip".into()));
    }
    if m == 0 {
        return Err(Error::Config("key frame count must be positive".into()));
    }
    Ok((0..m).map(|i| i * n / m).collect())
}

pub fn sample_key_frames(clip: &VideoClip, m: usize) -> Result<Vec<RgbImage>> {
    Ok(key_frame_indices(clip.frame_count(), m)?
        .into_iter()
        .map(|i| clip.frames()[i].clone())
        .collect())
}

/// Resize to exactly `h`×`w` (aspect ratio not preserved), normalized to [-1, 1].
pub fn high_level_view(frame: &RgbImage, h: usize, w: usize) -> Result<FloatImage> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("high-level view size {h}x{w} must be positive")));
    }
    if frame.width() == 0 || frame.height() == 0 {
        return Err(Error::Input("empty frame".into()));
    }
    Ok(resize_bilinear(&FloatImage::from_rgb(frame), h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn intersects(&self, other: &Rect) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

/// K patches cut from the aspect-preserving resized frame.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<FloatImage>,
    pub rects: Vec<Rect>,
    /// (height, width) of the resized frame the patches were cut from.
    pub resized: (usize, usize),
    /// (rows, cols) of the patch grid.
    pub grid: (usize, usize),
    /// Set when the fitted frame was too small for the grid and had to be enlarged.
    pub upscaled: bool,
}

/// Grid `rows × cols = k` whose aspect best matches `h/w`; ties go to more columns.
pub fn patch_grid(k: usize, h: usize, w: usize) -> (usize, usize) {
    let target = h as f64 / w as f64;
    let mut best = (1, k);
    let mut best_cost = f64::INFINITY;
    // Ascending rows means descending columns, so a strict improvement keeps the wider grid on ties.
    for rows in 1..=k {
        if k % rows != 0 {
            continue;
        }
        let cols = k / rows;
        let cost = (rows as f64 / cols as f64 - target).abs();
        if cost < best_cost - 1e-12 {
            best_cost = cost;
            best = (rows, cols);
        }
    }
    best
}

pub fn patch_view(frame: &RgbImage, box_h: usize, box_w: usize, patch: usize, k: usize) -> Result<PatchSet> {
    if patch == 0 || k == 0 {
        return Err(Error::Config("patch size and patch count must be positive".into()));
    }
    if patch > box_h || patch > box_w {
        return Err(Error::Config(format!(
            "patch {patch} does not fit the {box_h}x{box_w} box"
        )));
    }
    let (h, w) = (frame.height() as usize, frame.width() as usize);
    if h == 0 || w == 0 {
        return Err(Error::Input("empty frame".into()));
    }
    let aspect = w as f64 / h as f64;
    let scale = (box_h as f64 / h as f64).min(box_w as f64 / w as f64);
    // Height is fixed first and width derived from it, which bounds the aspect error by 0.5/out_h.
    let mut out_h = ((h as f64 * scale + 1e-9).floor() as usize).max(1);
    let mut out_w = ((out_h as f64 * aspect).round() as usize).max(1);
    let (rows, cols) = patch_grid(k, out_h, out_w);
    let mut upscaled = false;
    if out_h < rows * patch || out_w < cols * patch {
        let grow = (rows as f64 * patch as f64 / h as f64).max(cols as f64 * patch as f64 / w as f64);
        let new_h = ((h as f64 * grow - 1e-9).ceil() as usize).max(rows * patch);
        let new_w = ((new_h as f64 * aspect).round() as usize).max(cols * patch);
        log::info!(
            "patch view: {out_h}x{out_w} cannot host a {rows}x{cols} grid of {patch}px patches, enlarging to {new_h}x{new_w}"
        );
        out_h = new_h;
        out_w = new_w;
        upscaled = true;
    }
    let resized = resize_bilinear(&FloatImage::from_rgb(frame), out_h, out_w);
    let cell_h = out_h as f64 / rows as f64;
    let cell_w = out_w as f64 / cols as f64;
    let mut rects = Vec::with_capacity(k);
    for r in 0..rows {
        for c in 0..cols {
            rects.push(Rect {
                top: (r as f64 * cell_h + (cell_h - patch as f64) / 2.0).floor() as usize,
                left: (c as f64 * cell_w + (cell_w - patch as f64) / 2.0).floor() as usize,
                height: patch,
                width: patch,
            });
        }
    }
    let patches = rects.iter().map(|&r| resized.crop(r)).collect();
    Ok(PatchSet {
        patches,
        rects,
        resized: (out_h, out_w),
        grid: (rows, cols),
        upscaled,
    })
}

/// Geometry of the two preprocessing views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    /// Number of key frames M.
    pub key_frames: usize,
    pub high_h: usize,
    pub high_w: usize,
    pub box_h: usize,
    pub box_w: usize,
    pub patch: usize,
    /// Number of low-level patches K.
    pub patches_per_frame: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            key_frames: 1,
            high_h: 64,
            high_w: 64,
            box_h: 96,
            box_w: 192,
            patch: 32,
            patches_per_frame: 8,
        }
    }
}

impl ViewConfig {
    /// Full-scale geometry: 448² high view, 540×1080 box, eight 224² patches.
    pub fn full_scale() -> Self {
        Self {
            key_frames: 5,
            high_h: 448,
            high_w: 448,
            box_h: 540,
            box_w: 1080,
            patch: 224,
            patches_per_frame: 8,
        }
    }
}

/// Key frames with their high-level and patch views.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub key_frames: Vec<RgbImage>,
    pub high_view: Vec<FloatImage>,
    pub patch_view: Vec<PatchSet>,
}

impl FrameBundle {
    pub fn from_clip(clip: &VideoClip, cfg: &ViewConfig) -> Result<Self> {
        let key_frames = sample_key_frames(clip, cfg.key_frames)?;
        let high_view = key_frames
            .iter()
            .map(|f| high_level_view(f, cfg.high_h, cfg.high_w))
            .collect::<Result<Vec<_>>>()?;
        let patch_view = key_frames
            .iter()
            .map(|f| patch_view(f, cfg.box_h, cfg.box_w, cfg.patch, cfg.patches_per_frame))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            key_frames,
            high_view,
            patch_view,
        })
    }

    pub fn len(&self) -> usize {
        self.key_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_frames.is_empty()
    }
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:04}.png"))
}

/// Writes frames as lossless PNGs `frame_0000.png`, `frame_0001.png`, ...
pub fn save_frames(dir: &Path, frames: &[RgbImage]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        let path = frame_path(dir, i);
        f.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Loads every `*.png` in `dir`, sorted by file name.
pub fn load_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no frames found in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|path| {
            image::open(&path)
                .map(|img| img.to_rgb8())
                .map_err(|source| Error::Image { path, source })
        })
        .collect()
}

/// Decodes a video file to frames by shelling out to an external decoder.
///
/// `args` may contain `{input}` and `{output}`; `{output}` expands to a
/// printf-style PNG pattern inside a scratch directory.
#[derive(Debug, Clone)]
pub struct ExternalDecoder {
    pub program: String,
    pub args: Vec<String>,
}

impl Default for ExternalDecoder {
    fn default() -> Self {
        Self {
            program: "ffmpeg".into(),
            args: ["-loglevel", "error", "-i", "{input}", "{output}"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl ExternalDecoder {
    pub fn decode(&self, input: &Path, scratch: &Path) -> Result<Vec<RgbImage>> {
        std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
        let pattern = scratch.join("frame_%05d.png");
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &pattern.to_string_lossy())
            })
            .collect();
        let status = Command::new(&self.program)
            .args(&args)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(Error::Input(format!(
                "decoder `{}` failed on {} ({status})",
                self.program,
                input.display()
            )));
        }
        load_frames(scratch)
    }
}

/// Loads a clip either from a directory of PNG frames or a single image file.
pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let frames = if path.is_dir() {
        load_frames(path)?
    } else {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        vec![img]
    };
    let id = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoClip::new(frames, id, Variant::Original)
}

//! Synthetic paragraph images, preprocessing and augmentation.
//!
//! Glyphs are patterns on a 3×5 cell grid, drawn as filled cells. A sample
//! is a pure function of the config and its index, so corpora never need to
//! be stored.

use std::fmt::Write as _;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::Alphabet;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const GRID_COLS: usize = 3;
pub const GRID_ROWS: usize = 5;
const GRID_CELLS: usize = GRID_COLS * GRID_ROWS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of glyph symbols `N`, named `a`, `b`, ...
    pub glyphs: usize,
    /// Chance that an inner position of a line is a space (never two in a row).
    pub space_prob: f64,
    pub height: usize,
    pub width: usize,
    /// Pixel size of one grid cell; a glyph is `3·cell_w × 5·cell_h`.
    pub cell_w: usize,
    pub cell_h: usize,
    /// Horizontal distance between glyph origins.
    pub advance: usize,
    /// Vertical distance between line origins.
    pub line_pitch: usize,
    pub margin_top: usize,
    pub margin_left: usize,
    pub lines_min: usize,
    pub lines_max: usize,
    pub chars_min: usize,
    pub chars_max: usize,
    /// Per-line vertical offset amplitude in pixels.
    pub baseline_jitter: usize,
    /// Per-glyph offset amplitude in pixels, both axes.
    pub glyph_jitter: usize,
    /// Chance that a glyph is drawn one pixel bolder.
    pub thickness_jitter: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            glyphs: 10,
            space_prob: 0.15,
            height: 128,
            width: 256,
            cell_w: 4,
            cell_h: 4,
            advance: 16,
            line_pitch: 28,
            margin_top: 6,
            margin_left: 8,
            lines_min: 2,
            lines_max: 4,
            chars_min: 3,
            chars_max: 8,
            baseline_jitter: 2,
            glyph_jitter: 1,
            thickness_jitter: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn glyph_size(&self) -> (usize, usize) {
        (GRID_ROWS * self.cell_h, GRID_COLS * self.cell_w)
    }

    pub fn alphabet(&self) -> Alphabet {
        let mut symbols: Vec<char> = (0..self.glyphs as u8).map(|i| (b'a' + i) as char).collect();
        if self.space_prob > 0.0 {
            symbols.push(' ');
        }
        Alphabet::new(symbols).expect("validated glyph count")
    }

    pub fn validate(&self) -> Result<()> {
        if self.glyphs == 0 || self.glyphs > 26 {
            return Err(Error::InvalidArgument(format!("glyph count {} must be in 1..=26", self.glyphs)));
        }
        if self.lines_min == 0
            || self.lines_min > self.lines_max
            || self.chars_min == 0
            || self.chars_min > self.chars_max
        {
            return Err(Error::InvalidArgument(
                "line and character ranges must be non-empty and start at 1 or more".into(),
            ));
        }
        if self.cell_w == 0 || self.cell_h == 0 {
            return Err(Error::InvalidArgument("glyph cells must be at least one pixel".into()));
        }
        if !(0.0..1.0).contains(&self.space_prob) || !(0.0..=1.0).contains(&self.thickness_jitter) || self.noise < 0.0 {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1) and noise must be non-negative".into(),
            ));
        }
        if self.margin_top < self.glyph_jitter || self.margin_left < self.glyph_jitter {
            return Err(Error::TextOverflow("glyph jitter exceeds the margins".into()));
        }
        let (gh, gw) = self.glyph_size();
        let bottom = self.margin_top
            + self.baseline_jitter
            + (self.lines_max - 1) * self.line_pitch
            + self.baseline_jitter
            + self.glyph_jitter
            + gh
            + 1;
        let right = self.margin_left + (self.chars_max - 1) * self.advance + self.glyph_jitter + gw + 1;
        if bottom > self.height || right > self.width {
            return Err(Error::TextOverflow(format!(
                "{} lines of {} glyphs need {bottom}×{right} pixels, image is {}×{}",
                self.lines_max, self.chars_max, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Cell patterns for `n` glyphs: `3×5` grids with 5 to 10 inked cells,
/// every pair differing in at least 4 cells. Depends only on `(n, seed)`.
pub fn glyph_patterns(n: usize, seed: u64) -> Vec<[bool; GRID_CELLS]> {
    let mut r = rng::stream(seed, "glyphs");
    let mut out: Vec<[bool; GRID_CELLS]> = Vec::with_capacity(n);
    let mut min_dist = 4;
    let mut attempts = 0;
    while out.len() < n {
        let mut cells = [false; GRID_CELLS];
        cells.iter_mut().for_each(|c| *c = r.gen_bool(0.5));
        let ink = cells.iter().filter(|&&c| c).count();
        let far = out.iter().all(|p| p.iter().zip(&cells).filter(|(a, b)| a != b).count() >= min_dist);
        if (5..=10).contains(&ink) && far {
            out.push(cells);
        }
        attempts += 1;
        if attempts % 10_000 == 0 && min_dist > 1 {
            min_dist -= 1;
        }
    }
    out
}

/// Vertical extent of one rendered line, in raw pixel rows `[top, bottom)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineBox {
    pub top: usize,
    pub bottom: usize,
}

impl LineBox {
    /// Feature-map rows `[first, last]` covered by this box after scaling the
    /// image by `scale` and downsampling rows by `down_h`.
    pub fn feature_rows(&self, scale: f64, down_h: usize) -> (usize, usize) {
        let first = ((self.top as f64 * scale).floor() as usize) / down_h;
        let last = ((self.bottom as f64 * scale).ceil() as usize).saturating_sub(1) / down_h;
        (first, last.max(first))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    /// Diagnostics only; never shown to the model.
    pub line_boxes: Vec<LineBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParagraphSample {
    /// `[H×W×1]`, ink 1 on background 0.
    pub image: Tensor<f32>,
    /// Transcriptions in top-to-bottom order.
    pub lines: Vec<String>,
    pub meta: SampleMeta,
}

impl ParagraphSample {
    /// Lines joined with `'\n'`.
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

fn line_text<R: Rng>(cfg: &SynthConfig, symbols: &[char], r: &mut R) -> String {
    let n = r.gen_range(cfg.chars_min..=cfg.chars_max);
    let mut s = String::with_capacity(n);
    let mut prev_space = true;
    for k in 0..n {
        let inner = k > 0 && k + 1 < n;
        if inner && !prev_space && cfg.space_prob > 0.0 && r.gen_bool(cfg.space_prob) {
            s.push(' ');
            prev_space = true;
        } else {
            s.push(symbols[r.gen_range(0..cfg.glyphs)]);
            prev_space = false;
        }
    }
    s
}

fn jitter<R: Rng>(r: &mut R, amp: usize) -> isize {
    if amp == 0 {
        0
    } else {
        r.gen_range(-(amp as isize)..=amp as isize)
    }
}

/// Renders paragraph `index` of the corpus described by `cfg`.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<ParagraphSample> {
    cfg.validate()?;
    let patterns = glyph_patterns(cfg.glyphs, cfg.seed);
    let symbols = cfg.alphabet().symbols().to_vec();
    let mut r = rng::stream(cfg.seed, &format!("sample.{index}"));
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0f32; h * w];
    let n_lines = r.gen_range(cfg.lines_min..=cfg.lines_max);
    let mut lines = Vec::with_capacity(n_lines);
    let mut boxes = Vec::with_capacity(n_lines);
    for li in 0..n_lines {
        let text = line_text(cfg, &symbols, &mut r);
        let y0 =
            (cfg.margin_top + cfg.baseline_jitter + li * cfg.line_pitch) as isize + jitter(&mut r, cfg.baseline_jitter);
        let mut top = usize::MAX;
        let mut bottom = 0;
        for (k, ch) in text.chars().enumerate() {
            if ch == ' ' {
                continue;
            }
            let glyph = symbols.iter().position(|&s| s == ch).expect("generated from the alphabet");
            let gx = (cfg.margin_left + k * cfg.advance) as isize + jitter(&mut r, cfg.glyph_jitter);
            let gy = y0 + jitter(&mut r, cfg.glyph_jitter);
            let bold = usize::from(cfg.thickness_jitter > 0.0 && r.gen_bool(cfg.thickness_jitter));
            for (cell, _) in patterns[glyph].iter().enumerate().filter(|(_, &on)| on) {
                let (cr, cc) = (cell / GRID_COLS, cell % GRID_COLS);
                let y_start = (gy + (cr * cfg.cell_h) as isize) as usize;
                let x_start = (gx + (cc * cfg.cell_w) as isize) as usize;
                for y in y_start..y_start + cfg.cell_h + bold {
                    img[y * w + x_start..y * w + x_start + cfg.cell_w + bold].fill(1.0);
                }
                top = top.min(y_start);
                bottom = bottom.max(y_start + cfg.cell_h + bold);
            }
        }
        boxes.push(LineBox { top, bottom });
        lines.push(text);
    }
    if cfg.noise > 0.0 {
        for px in img.iter_mut() {
            *px = (*px + r.gen_range(-cfg.noise..=cfg.noise) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(ParagraphSample {
        image: Tensor::new(vec![h, w, 1], img)?,
        lines,
        meta: SampleMeta { seed: cfg.seed, index, line_boxes: boxes },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Sample indices of a split of `size` samples; splits never overlap
    /// for sizes below one million.
    pub fn indices(self, size: usize) -> Range<u64> {
        let base = match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        };
        base..base + size as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}; expected train, val or test")))
    }
}

pub fn generate_split(cfg: &SynthConfig, split: Split, size: usize) -> Result<Vec<ParagraphSample>> {
    split.indices(size).map(|i| generate_sample(cfg, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Bilinear resize factor applied first.
    pub scale: f64,
    pub min_height: usize,
    pub min_width: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { scale: 0.5, min_height: 64, min_width: 128 }
    }
}

/// Bilinear resize of `[H×W×C]` with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("resize_bilinear", format!("target {out_h}×{out_w}")));
    }
    let src = |dst: usize, n_in: usize, n_out: usize| {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(n_in - 1), x - x0 as f64)
    };
    let d = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = src(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| d[(y * w + x) * c + ch].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

fn padded_dim(n: usize, min: usize, div: usize) -> usize {
    n.max(min).div_ceil(div) * div
}

/// Output shape of [`preprocess`] for a `height × width` input.
pub fn preprocessed_shape(
    height: usize,
    width: usize,
    cfg: &PreprocessConfig,
    divisors: (usize, usize),
) -> (usize, usize) {
    let (sh, sw) = scaled_dims(height, width, cfg.scale);
    (padded_dim(sh, cfg.min_height, divisors.0), padded_dim(sw, cfg.min_width, divisors.1))
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1))
}

/// Rescales by `cfg.scale`, then zero-pads bottom and right to at least the
/// minimum size and to multiples of `divisors = (down_h, down_w)`.
pub fn preprocess<T: Real>(image: &Tensor<T>, cfg: &PreprocessConfig, divisors: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if divisors.0 == 0 || divisors.1 == 0 || cfg.scale <= 0.0 {
        return Err(Error::InvalidArgument("preprocess needs positive divisors and scale".into()));
    }
    let (sh, sw) = scaled_dims(h, w, cfg.scale);
    let scaled = if (sh, sw) == (h, w) { image.clone() } else { resize_bilinear(image, sh, sw)? };
    let (ph, pw) = preprocessed_shape(h, w, cfg, divisors);
    if (ph, pw) == (sh, sw) {
        return Ok(scaled);
    }
    let mut out = vec![T::zero(); ph * pw * c];
    for y in 0..sh {
        out[y * pw * c..(y * pw + sw) * c].copy_from_slice(&scaled.data()[y * sw * c..(y + 1) * sw * c]);
    }
    Tensor::new(vec![ph, pw, c], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub brightness: bool,
    pub contrast: bool,
    pub morphology: bool,
    /// Chance of applying each enabled transform.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { brightness: false, contrast: false, morphology: false, probability: 0.2 }
    }
}

impl AugmentConfig {
    pub fn any(&self) -> bool {
        self.brightness || self.contrast || self.morphology
    }
}

fn filter3x3<T: Real>(image: &Tensor<T>, take_max: bool) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = d[(y * w + x) * c + ch];
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let u = d[(yy * w + xx) * c + ch];
                        v = if take_max { v.max(u) } else { v.min(u) };
                    }
                }
                out.push(v);
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Brightness shift, contrast scaling about 0.5, and 3×3 erosion or
/// dilation, each enabled one applied independently with `cfg.probability`.
pub fn augment<T: Real, R: Rng>(image: &Tensor<T>, cfg: &AugmentConfig, r: &mut R) -> Result<Tensor<T>> {
    let mut img = image.clone();
    let clamp = |v: f64| T::of(v.clamp(0.0, 1.0));
    if cfg.brightness && r.gen_bool(cfg.probability) {
        let shift = r.gen_range(-0.2..=0.2);
        img = img.map(|v| clamp(v.as_f64() + shift));
    }
    if cfg.contrast && r.gen_bool(cfg.probability) {
        let k = r.gen_range(0.8..=1.25);
        img = img.map(|v| clamp((v.as_f64() - 0.5) * k + 0.5));
    }
    if cfg.morphology && r.gen_bool(cfg.probability) {
        let dilate = r.gen_bool(0.5);
        img = filter3x3(&img, dilate)?;
    }
    Ok(img)
}

/// Binary 8-bit portable graymap.
pub fn write_pgm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (h, w, _) = image.dims3()?;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    let bad = || Error::InvalidArgument(format!("{} is not a binary 8-bit PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if fields[0] != "P5" || max != 255 || bytes.len() < pos + 1 + w * h {
        return Err(bad());
    }
    let data = bytes[pos + 1..pos + 1 + w * h].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![h, w, 1], data)
}

pub fn sample_stem(split: Split, index: u64) -> String {
    format!("{}_{index:05}", split.name())
}

/// Writes `{split}_{index:05}.pgm` and `.txt` (one line per text line).
pub fn export_sample(dir: &Path, split: Split, sample: &ParagraphSample) -> Result<(PathBuf, PathBuf)> {
    let stem = sample_stem(split, sample.meta.index);
    let pgm = dir.join(format!("{stem}.pgm"));
    let txt = dir.join(format!("{stem}.txt"));
    write_pgm(&pgm, &sample.image)?;
    let mut body = String::new();
    for line in &sample.lines {
        writeln!(body, "{line}").expect("writing to a String");
    }
    std::fs::File::create(&txt)?.write_all(body.as_bytes())?;
    Ok((pgm, txt))
}

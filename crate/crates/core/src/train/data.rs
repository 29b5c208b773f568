use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{io_err, TrainError, IGNORE_INDEX};
use crate::tensor::{Shape4, Tensor4};
use crate::Scalar;

/// Where a batch came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, first_index: usize, config: SynthConfig },
    Files { paths: Vec<PathBuf> },
    Derived { from: Box<Provenance>, note: String },
}

/// Images in `[0, 1]` with one label map per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    pub images: Tensor4<T>,
    /// `n * h * w` labels, row-major per image.
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn new(images: Tensor4<T>, labels: Vec<u8>, num_classes: usize, provenance: Provenance) -> Result<Self, TrainError> {
        let s = images.shape();
        if s.c != 3 {
            return Err(TrainError::Input(format!("images need 3 channels, got {s}")));
        }
        if labels.len() != s.n * s.plane() {
            return Err(TrainError::Input(format!("{} labels for images {s}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            return Err(TrainError::Input(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape().h
    }

    pub fn width(&self) -> usize {
        self.images.shape().w
    }

    pub fn label_map(&self, i: usize) -> &[u8] {
        let p = self.height() * self.width();
        &self.labels[i * p..(i + 1) * p]
    }

    /// The samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let images: Vec<Tensor4<T>> = idx.iter().map(|&i| self.images.batch_item(i)).collect();
        let labels = idx.iter().flat_map(|&i| self.label_map(i).iter().copied()).collect();
        Self {
            images: Tensor4::concat_batch(&images).expect("same-shaped items"),
            labels,
            num_classes: self.num_classes,
            provenance: Provenance::Derived {
                from: Box::new(self.provenance.clone()),
                note: format!("select {idx:?}"),
            },
        }
    }
}

/// Shape-on-texture generator. The image is split into a `grid x grid`
/// array of cells; each cell independently holds one object with
/// probability `object_prob`, of a uniformly drawn foreground class.
/// Class `c >= 1` draws a rectangle, disk or triangle for `c % 3` = 1, 2, 0
/// in its own base colour; class 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub grid: usize,
    pub object_prob: f64,
    /// Object extent as a fraction of the cell side, drawn uniformly.
    pub size_range: (f64, f64),
    /// Std of the per-object colour shift.
    pub color_noise: f64,
    /// Std of independent per-pixel noise.
    pub pixel_noise: f64,
    /// Amplitude of the striped background texture.
    pub texture: f64,
    /// Flat colours, no texture or noise: colour determines the class.
    pub noise_free: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: 2,
            object_prob: 0.85,
            size_range: (0.45, 0.95),
            color_noise: 0.06,
            pixel_noise: 0.04,
            texture: 0.12,
            noise_free: false,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.80, 0.25, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.10],
];

/// Base colour of a class. Classes past the palette cycle through it with
/// a brightness offset.
pub fn class_color(class: usize) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()];
    let dim = 0.6f64.powi((class / PALETTE.len()) as i32);
    base.map(|v| v * dim)
}

#[derive(Copy, Clone)]
enum ShapeKind {
    Rect,
    Disk,
    Triangle,
}

fn shape_of(class: usize) -> ShapeKind {
    match class % 3 {
        1 => ShapeKind::Rect,
        2 => ShapeKind::Disk,
        _ => ShapeKind::Triangle,
    }
}

impl SynthConfig {
    pub fn validate(&self, size: (usize, usize), num_classes: usize) -> Result<(), TrainError> {
        let (h, w) = size;
        if !(2..=255).contains(&num_classes) {
            return Err(TrainError::Config(format!("num_classes must lie in [2, 255], got {num_classes}")));
        }
        if self.grid == 0 || h == 0 || w == 0 || h % self.grid != 0 || w % self.grid != 0 || h / self.grid < 4 || w / self.grid < 4 {
            return Err(TrainError::Config(format!(
                "image {h}x{w} must split into a {g}x{g} grid of cells at least 4 pixels wide",
                g = self.grid
            )));
        }
        let (a, b) = self.size_range;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return Err(TrainError::Config(format!("size_range must satisfy 0 < lo <= hi <= 1, got {a}..{b}")));
        }
        if !(0.0..=1.0).contains(&self.object_prob) {
            return Err(TrainError::Config(format!("object_prob must lie in [0, 1], got {}", self.object_prob)));
        }
        if self.color_noise < 0.0 || self.pixel_noise < 0.0 || self.texture < 0.0 {
            return Err(TrainError::Config("noise and texture levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Expected fraction of pixels per class, from the continuous shape areas.
pub fn expected_class_frequencies(cfg: &SynthConfig, num_classes: usize) -> Vec<f64> {
    let (a, b) = cfg.size_range;
    let e_sq = (a * a + a * b + b * b) / 3.0;
    let per_class = cfg.object_prob / (num_classes - 1) as f64;
    let mut freq = vec![0.0; num_classes];
    for (c, f) in freq.iter_mut().enumerate().skip(1) {
        let area = match shape_of(c) {
            ShapeKind::Rect => ((a + b) / 2.0).powi(2),
            ShapeKind::Disk => PI / 4.0 * e_sq,
            ShapeKind::Triangle => e_sq / 2.0,
        };
        *f = per_class * area;
    }
    freq[0] = 1.0 - freq.iter().sum::<f64>();
    freq
}

/// One image as (rgb planes, labels).
fn render(cfg: &SynthConfig, h: usize, w: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let mut labels = vec![0u8; h * w];
    let mut color = vec![[0.0f64; 3]; h * w];
    let bg = class_color(0);
    let (freq, phase, tilt) = (rng.random_range(0.3..0.9), rng.random_range(0.0..2.0 * PI), rng.random_range(-1.0..1.0));
    for y in 0..h {
        for x in 0..w {
            let t = if cfg.noise_free {
                0.0
            } else {
                cfg.texture * ((x as f64 + tilt * y as f64) * freq + phase).sin()
            };
            color[y * w + x] = bg.map(|v| v + t);
        }
    }
    let (ch, cw) = (h / cfg.grid, w / cfg.grid);
    let shift = Normal::new(0.0, cfg.color_noise.max(1e-12)).expect("positive std");
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            if rng.random::<f64>() >= cfg.object_prob {
                continue;
            }
            let class = rng.random_range(1..num_classes);
            let (a, b) = cfg.size_range;
            let (sw, sh) = match shape_of(class) {
                ShapeKind::Rect => (rng.random_range(a..=b), rng.random_range(a..=b)),
                _ => {
                    let d = rng.random_range(a..=b);
                    (d, d)
                }
            };
            let (bw, bh) = (sw * cw as f64, sh * ch as f64);
            let x0 = (gx * cw) as f64 + rng.random_range(0.0..=(cw as f64 - bw));
            let y0 = (gy * ch) as f64 + rng.random_range(0.0..=(ch as f64 - bh));
            let mut c = class_color(class);
            if !cfg.noise_free {
                for v in &mut c {
                    *v += shift.sample(rng);
                }
            }
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    let (u, v) = ((x as f64 + 0.5 - x0) / bw, (y as f64 + 0.5 - y0) / bh);
                    let inside = match shape_of(class) {
                        ShapeKind::Rect => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
                        ShapeKind::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
                        // Apex at the top centre, base along the bottom edge.
                        ShapeKind::Triangle => (0.0..1.0).contains(&v) && (u - 0.5).abs() < v / 2.0,
                    };
                    if inside {
                        labels[y * w + x] = class as u8;
                        color[y * w + x] = c;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("positive std");
    let mut planes = vec![0.0; 3 * h * w];
    for (i, px) in color.iter().enumerate() {
        for ch in 0..3 {
            let n = if cfg.noise_free { 0.0 } else { noise.sample(rng) };
            planes[ch * h * w + i] = (px[ch] + n).clamp(0.0, 1.0);
        }
    }
    (planes, labels)
}

/// Images `first_index .. first_index + n` of the stream for `seed`. Each
/// image has its own RNG stream, so any slice of the stream is reproducible
/// on its own.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    first_index: usize,
    n: usize,
    size: (usize, usize),
    num_classes: usize,
    cfg: &SynthConfig,
) -> Result<SampleBatch<T>, TrainError> {
    cfg.validate(size, num_classes)?;
    if n == 0 {
        return Err(TrainError::Config("dataset needs at least one image".into()));
    }
    let (h, w) = size;
    let mut data = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for i in first_index..first_index + n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (planes, lab) = render(cfg, h, w, num_classes, &mut rng);
        data.extend(planes.into_iter().map(T::lit));
        labels.extend(lab);
    }
    SampleBatch::new(
        Tensor4::from_vec(Shape4::new(n, 3, h, w), data)?,
        labels,
        num_classes,
        Provenance::Synthetic {
            seed,
            first_index,
            config: cfg.clone(),
        },
    )
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), TrainError> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(TrainError::Corrupt("truncated PNM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((tokens, i + 1))
}

fn read_pnm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>), TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (t, start) = header_tokens(&bytes, 4)?;
    if t[0] != magic {
        return Err(TrainError::Corrupt(format!("{}: expected {magic}, found {}", path.display(), t[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| TrainError::Corrupt(format!("{}: bad header field {s:?}", path.display())));
    let (w, h, max) = (parse(&t[1])?, parse(&t[2])?, parse(&t[3])?);
    if max != 255 {
        return Err(TrainError::Corrupt(format!("{}: only 8-bit files are supported", path.display())));
    }
    let len = w * h * channels;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| TrainError::Corrupt(format!("{}: raster shorter than {w}x{h}", path.display())))?;
    Ok((w, h, raster.to_vec()))
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, raster: &[u8]) -> Result<(), TrainError> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(io_err(path))
}

/// Binary P6, interleaved RGB.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), TrainError> {
    read_pnm(path, "P6", 3)
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<(), TrainError> {
    write_pnm(path, "P6", w, h, rgb)
}

/// Binary P5, one byte per pixel.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), TrainError> {
    read_pnm(path, "P5", 1)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<(), TrainError> {
    write_pnm(path, "P5", w, h, gray)
}

/// Writes `NNNN.ppm` / `NNNN.pgm` pairs into `dir`.
pub fn save_dataset<T: Scalar>(dir: &Path, batch: &SampleBatch<T>) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = (batch.height(), batch.width());
    for i in 0..batch.len() {
        let mut rgb = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = batch.images.at(i, c, y, x).to_f64_lossy();
                    rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        write_ppm(&dir.join(format!("{i:04}.ppm")), w, h, &rgb)?;
        write_pgm(&dir.join(format!("{i:04}.pgm")), w, h, batch.label_map(i))?;
    }
    Ok(())
}

/// Reads every `NNNN.ppm` with its `NNNN.pgm` from `dir`, sorted by name.
pub fn load_dataset<T: Scalar>(dir: &Path, num_classes: usize) -> Result<SampleBatch<T>, TrainError> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(TrainError::Input(format!("no .ppm images in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut size = None;
    let mut paths = Vec::new();
    for img in &images {
        let lab = img.with_extension("pgm");
        let (w, h, rgb) = read_ppm(img)?;
        let (lw, lh, gray) = read_pgm(&lab)?;
        if (w, h) != (lw, lh) {
            return Err(TrainError::Input(format!("{} and its label map differ in size", img.display())));
        }
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(TrainError::Input(format!("{} differs in size from earlier images", img.display())));
        }
        for c in 0..3 {
            data.extend((0..h * w).map(|p| T::lit(rgb[3 * p + c] as f64 / 255.0)));
        }
        labels.extend(gray);
        paths.push(img.clone());
        paths.push(lab);
    }
    let (w, h) = size.expect("at least one image");
    SampleBatch::new(
        Tensor4::from_vec(Shape4::new(images.len(), 3, h, w), data)?,
        labels,
        num_classes,
        Provenance::Files { paths },
    )
}

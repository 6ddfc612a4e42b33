//! Synthetic optic-disc/cup images, the corruption ladder used as a stand-in
//! for progressively shifted datasets, external image-folder ingestion and
//! on-disk persistence (PNG files plus a CSV manifest).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DrueError, Result};
use crate::nn::FeatureMap;

/// Cup-to-disc ratio above which a synthetic eye is labelled class 1.
pub const CUP_DISC_THRESHOLD: f64 = 0.6;

/// RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Batch entry `index` of a 3-channel feature map as an image.
    pub fn from_feature_map(map: &FeatureMap<f32>, index: usize) -> Self {
        assert_eq!(map.channels, 3);
        let chw = map.sample(index);
        let plane = map.plane();
        let data = (0..plane)
            .flat_map(|p| (0..3).map(move |c| (p, c)))
            .map(|(p, c)| chw[c * plane + p])
            .collect();
        Self::new(map.height, map.width, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(y as usize, x as usize, c));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .flat_map(|p| p.0)
            .map(|v| f32::from(v) / 255.0)
            .collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: u8,
    pub source: String,
    pub sample_id: String,
}

/// Stacks sample images into a channel-major batch.
pub fn stack_images(samples: &[&Sample]) -> FeatureMap<f32> {
    let first = &samples.first().expect("non-empty batch").image;
    let (h, w) = (first.height, first.width);
    let n = samples.len();
    let mut out = FeatureMap::zeros(3, n, h, w);
    let plane = h * w;
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(
            (s.image.height, s.image.width),
            (h, w),
            "mixed image sizes in batch"
        );
        for p in 0..plane {
            for c in 0..3 {
                out.data[(c * n + i) * plane + p] = s.image.data[p * 3 + c];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

/// Class rule of the synthetic task (strict inequality).
pub fn label_for_ratio(cup_to_disc: f64) -> u8 {
    u8::from(cup_to_disc > CUP_DISC_THRESHOLD)
}

pub(crate) fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Geometry of one synthetic eye.
#[derive(Debug, Clone, Copy)]
struct EyeLayout {
    disc_center: (f64, f64),
    disc_radius: f64,
    cup_offset: (f64, f64),
    cup_ratio: f64,
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render_eye(size: usize, layout: EyeLayout, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let scale = s / 64.0;
    let center = (s / 2.0 - 0.5, s / 2.0 - 0.5);
    let fundus_radius = 0.47 * s;

    // low-frequency texture
    let waves: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            let freq = rng.random_range(0.04..0.18) / scale;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let tint = [
        0.62 + rng.random_range(-0.05..0.05),
        0.27 + rng.random_range(-0.04..0.04),
        0.12 + rng.random_range(-0.03..0.03),
    ];

    // vessels: curved polylines leaving the disc
    let mut vessel_points = Vec::new();
    let n_vessels = 5;
    for v in 0..n_vessels {
        let mut angle =
            std::f64::consts::TAU * v as f64 / n_vessels as f64 + rng.random_range(-0.4..0.4);
        let bend = rng.random_range(-0.035..0.035);
        let (mut x, mut y) = layout.disc_center;
        for _ in 0..60 {
            x += angle.cos() * 0.6 * scale;
            y += angle.sin() * 0.6 * scale;
            angle += bend;
            vessel_points.push((x, y));
        }
    }
    let vessel_width = 0.9 * scale;

    let cup_center = (
        layout.disc_center.0 + layout.cup_offset.0,
        layout.disc_center.1 + layout.cup_offset.1,
    );
    let cup_radius = layout.cup_ratio * layout.disc_radius;
    let disc_color = [0.95, 0.72, 0.42];
    let cup_color = [1.0, 0.93, 0.76];
    let edge = 0.8 * scale;

    let mut data = Vec::with_capacity(size * size * 3);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64, yi as f64);
            let r = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
            let inside = 1.0 - smoothstep(fundus_radius - edge, fundus_radius + edge, r);
            let texture: f64 = waves
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * (fx * x + fy * y + phase).sin())
                .sum();
            let vignette = 1.0 - 0.35 * (r / fundus_radius).powi(2);
            let mut rgb = [0.0f64; 3];
            for c in 0..3 {
                let grain: f64 = StandardNormal.sample(rng);
                rgb[c] = tint[c] * vignette * (1.0 + texture) + 0.012 * grain;
            }
            let d_vessel = vessel_points
                .iter()
                .map(|&(vx, vy)| (vx - x).powi(2) + (vy - y).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let vessel = 0.5 * (-(d_vessel / vessel_width).powi(2)).exp();
            rgb[0] *= 1.0 - 0.6 * vessel;
            rgb[1] *= 1.0 - 0.8 * vessel;
            rgb[2] *= 1.0 - 0.8 * vessel;

            let dd =
                ((x - layout.disc_center.0).powi(2) + (y - layout.disc_center.1).powi(2)).sqrt();
            let a_disc = 1.0 - smoothstep(layout.disc_radius - edge, layout.disc_radius + edge, dd);
            let dc = ((x - cup_center.0).powi(2) + (y - cup_center.1).powi(2)).sqrt();
            let a_cup = 1.0 - smoothstep(cup_radius - edge, cup_radius + edge, dc);
            for c in 0..3 {
                let mut v = rgb[c] * (1.0 - a_disc) + disc_color[c] * a_disc;
                v = v * (1.0 - a_cup) + cup_color[c] * a_cup;
                v = v * inside + 0.02 * (1.0 - inside);
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
            }
        }
    }
    Image::new(size, size, data)
}

fn synth_sample(index: usize, label: u8, size: usize, seed: u64) -> Sample {
    let sample_id = format!("syn{seed}-c{label}-{index:05}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"synthetic", sample_id.as_bytes()]));
    let s = size as f64;
    // class ranges keep a margin around the threshold so the task is learnable
    let cup_ratio = if label == 1 {
        rng.random_range(0.70..=0.85)
    } else {
        rng.random_range(0.30..=0.50)
    };
    debug_assert_eq!(label_for_ratio(cup_ratio), label);
    let layout = EyeLayout {
        disc_center: (
            s / 2.0 - 0.5 + rng.random_range(-0.08..0.08) * s,
            s / 2.0 - 0.5 + rng.random_range(-0.08..0.08) * s,
        ),
        disc_radius: rng.random_range(0.14..0.19) * s,
        cup_offset: (
            rng.random_range(-0.05..0.05) * s * 0.2,
            rng.random_range(-0.05..0.05) * s * 0.2,
        ),
        cup_ratio,
    };
    Sample {
        image: render_eye(size, layout, &mut rng),
        label,
        source: "synthetic".to_string(),
        sample_id,
    }
}

/// Generates a balanced disc/cup dataset split 80/10/10 per class.
pub fn generate_synthetic(
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_per_class < 1 {
        return Err(DrueError::config("n_per_class must be at least 1"));
    }
    if image_size < 32 {
        return Err(DrueError::config(format!(
            "image_size {image_size} below the minimum of 32"
        )));
    }
    let n_train = n_per_class * 8 / 10;
    let n_val = n_per_class / 10;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    // interleave classes so every prefix stays balanced
    for i in 0..n_per_class {
        for label in 0..2u8 {
            let s = synth_sample(i, label, image_size, seed);
            if i < n_train {
                split.train.push(s);
            } else if i < n_train + n_val {
                split.val.push(s);
            } else {
                split.test.push(s);
            }
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    HueShift,
    Contrast,
    UniformNoiseReplace,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur,
        CorruptionKind::HueShift,
        CorruptionKind::Contrast,
        CorruptionKind::UniformNoiseReplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::HueShift => "hue_shift",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::UniformNoiseReplace => "uniform_noise_replace",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DrueError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DrueError::config(format!("unknown corruption kind `{s}`")))
    }
}

fn noise_rng(sample_id: &str, kind: CorruptionKind, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[
        b"corruption",
        sample_id.as_bytes(),
        kind.name().as_bytes(),
        &seed.to_le_bytes(),
    ]))
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.height as isize, img.width as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y as usize, reflect(x + o, w))
                        } else {
                            (reflect(y + o, h), x as usize)
                        };
                        acc += kv * f64::from(src[(yy * w as usize + xx) * 3 + c]);
                    }
                    out[(y * w + x) as usize * 3 + c] = (acc / norm) as f32;
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    Image::new(img.height, img.width, pass(&tmp, false))
}

fn hue_rotation(theta: f64) -> [[f64; 3]; 3] {
    // rotation about the grey axis (1,1,1)/√3
    let u = 1.0 / 3f64.sqrt();
    let (c, s) = (theta.cos(), theta.sin());
    let t = 1.0 - c;
    let a = c + t * u * u;
    let b = t * u * u - s * u;
    let d = t * u * u + s * u;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Applies a corruption at `severity ∈ [0, 1]`. Severity 0 is the identity.
/// Random fields depend only on `(sample_id, kind, seed)`, so per-pixel
/// deviation from the clean image grows monotonically with severity.
pub fn apply_corruption(
    sample: &Sample,
    kind: CorruptionKind,
    severity: f64,
    seed: u64,
) -> Result<Sample> {
    if !(0.0..=1.0).contains(&severity) || severity.is_nan() {
        return Err(DrueError::config(format!(
            "severity {severity} outside [0, 1]"
        )));
    }
    let mut out = sample.clone();
    if severity == 0.0 {
        return Ok(out);
    }
    let img = &sample.image;
    let s = severity as f32;
    match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = noise_rng(&sample.sample_id, kind, seed);
            for v in out.image.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + 0.4 * s * z as f32).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::Blur => {
            let sigma = 2.5 * severity * img.width as f64 / 64.0;
            out.image = gaussian_blur(img, sigma.max(1e-3));
        }
        CorruptionKind::HueShift => {
            let m = hue_rotation(severity * std::f64::consts::PI);
            for (dst, src) in out.image.data.chunks_mut(3).zip(img.data.chunks(3)) {
                for (r, row) in m.iter().enumerate() {
                    let v: f64 = row.iter().zip(src).map(|(a, &b)| a * f64::from(b)).sum();
                    dst[r] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        CorruptionKind::Contrast => {
            let n = (img.height * img.width) as f32;
            let mut mean = [0f32; 3];
            for px in img.data.chunks(3) {
                for c in 0..3 {
                    mean[c] += px[c] / n;
                }
            }
            for px in out.image.data.chunks_mut(3) {
                for c in 0..3 {
                    px[c] = (mean[c] + (1.0 - s) * (px[c] - mean[c])).clamp(0.0, 1.0);
                }
            }
        }
        CorruptionKind::UniformNoiseReplace => {
            let mut rng = noise_rng(&sample.sample_id, kind, seed);
            for v in out.image.data.iter_mut() {
                let u: f32 = rng.random();
                *v = ((1.0 - s) * *v + s * u).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub name: String,
    /// `None` for the clean rung and for external image folders.
    pub kind: Option<CorruptionKind>,
    pub severity: f64,
    pub samples: Vec<Sample>,
}

pub const CLEAN_RUNG: &str = "clean";

pub fn rung_name(kind: Option<CorruptionKind>, severity: f64) -> String {
    match kind {
        None => CLEAN_RUNG.to_string(),
        Some(k) => format!("{k}@{severity}"),
    }
}

/// Ordered corrupted copies of the in-distribution test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftLadder {
    pub rungs: Vec<Rung>,
}

impl ShiftLadder {
    /// Rung indices per corruption kind, in increasing severity, each chain
    /// starting at the clean rung when there is one. Rungs without a kind
    /// other than the clean one (external folders) belong to no chain.
    pub fn chains(&self) -> Vec<(CorruptionKind, Vec<usize>)> {
        let clean = self.rungs.iter().position(|r| r.name == CLEAN_RUNG);
        let mut kinds: Vec<CorruptionKind> = Vec::new();
        for r in &self.rungs {
            if let Some(k) = r.kind {
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
        }
        kinds
            .into_iter()
            .map(|k| {
                let chain = clean
                    .into_iter()
                    .chain(
                        self.rungs
                            .iter()
                            .enumerate()
                            .filter(|(_, r)| r.kind == Some(k))
                            .map(|(i, _)| i),
                    )
                    .collect();
                (k, chain)
            })
            .collect()
    }

    pub fn rung(&self, name: &str) -> Option<&Rung> {
        self.rungs.iter().find(|r| r.name == name)
    }
}

/// One rung per `(kind, severity > 0)`, preceded by a single clean rung when
/// `severities` contains 0.
pub fn build_ladder(
    id_test: &[Sample],
    kinds: &[CorruptionKind],
    severities: &[f64],
    seed: u64,
) -> Result<ShiftLadder> {
    if severities.is_empty() {
        return Err(DrueError::config("ladder needs at least one severity"));
    }
    if kinds.is_empty() {
        return Err(DrueError::config(
            "ladder needs at least one corruption kind",
        ));
    }
    if severities.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DrueError::config(
            "ladder severities must be strictly increasing",
        ));
    }
    if severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(DrueError::config("ladder severities must lie in [0, 1]"));
    }
    let mut rungs = Vec::new();
    let relabel = |samples: Vec<Sample>, name: &str| -> Vec<Sample> {
        samples
            .into_iter()
            .map(|mut s| {
                s.source = name.to_string();
                s
            })
            .collect()
    };
    if severities[0] == 0.0 {
        let name = rung_name(None, 0.0);
        rungs.push(Rung {
            samples: relabel(id_test.to_vec(), &name),
            name,
            kind: None,
            severity: 0.0,
        });
    }
    for &kind in kinds {
        for &sev in severities.iter().filter(|&&s| s > 0.0) {
            let name = rung_name(Some(kind), sev);
            let samples = id_test
                .iter()
                .map(|s| apply_corruption(s, kind, sev, seed))
                .collect::<Result<Vec<_>>>()?;
            rungs.push(Rung {
                samples: relabel(samples, &name),
                name,
                kind: Some(kind),
                severity: sev,
            });
        }
    }
    Ok(ShiftLadder { rungs })
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub source: String,
    pub label: u8,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ExternalLoad {
    pub samples: Vec<Sample>,
    pub manifest: Vec<ManifestRecord>,
    pub warnings: Vec<LoadWarning>,
}

/// Loads every readable raster in `dir` (non-recursive, sorted by file name),
/// bilinearly resized to `image_size`. Unreadable files are skipped with a
/// warning.
pub fn load_external(dir: &Path, image_size: usize) -> Result<ExternalLoad> {
    let source = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".to_string());
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DrueError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DrueError::config(format!(
            "{} contains no files",
            dir.display()
        )));
    }
    let mut out = ExternalLoad {
        samples: Vec::new(),
        manifest: Vec::new(),
        warnings: Vec::new(),
    };
    for path in paths {
        let decoded = image::ImageReader::open(&path)
            .map_err(|e| e.to_string())
            .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|r| r.decode().map_err(|e| e.to_string()));
        let img = match decoded {
            Ok(img) => img,
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                out.warnings.push(LoadWarning { path, reason });
                continue;
            }
        };
        let mut rgb = img.to_rgb8();
        if rgb.width() as usize != image_size || rgb.height() as usize != image_size {
            rgb = image::imageops::resize(
                &rgb,
                image_size as u32,
                image_size as u32,
                FilterType::Triangle,
            );
        }
        let file = path
            .file_name()
            .expect("file")
            .to_string_lossy()
            .into_owned();
        let stem = path
            .file_stem()
            .expect("file")
            .to_string_lossy()
            .into_owned();
        let sample_id = format!("{source}-{stem}");
        out.manifest.push(ManifestRecord {
            sample_id: sample_id.clone(),
            source: source.clone(),
            label: 0,
            path: file,
        });
        out.samples.push(Sample {
            image: Image::from_rgb8(&rgb),
            label: 0,
            source: source.clone(),
            sample_id,
        });
    }
    if out.samples.is_empty() {
        return Err(DrueError::config(format!(
            "{} contains no readable images",
            dir.display()
        )));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DrueError::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => DrueError::missing(path.display().to_string(), "prepare"),
        _ => DrueError::Csv(e),
    })?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sample_id", "source", "label", "path"] {
        return Err(DrueError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected manifest header {headers:?}"),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| DrueError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes samples as 8-bit PNGs under `dir/images/` plus `dir/manifest.csv`.
pub fn save_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| DrueError::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{}.png", file_safe(&s.sample_id));
        s.image.to_rgb8().save(dir.join(&rel))?;
        records.push(ManifestRecord {
            sample_id: s.sample_id.clone(),
            source: s.source.clone(),
            label: s.label,
            path: rel,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)
}

/// Reads back a directory written by [`save_samples`].
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(&dir.join(MANIFEST_FILE))?
        .into_iter()
        .map(|r| {
            let path = dir.join(&r.path);
            let img = image::open(&path)?.to_rgb8();
            Ok(Sample {
                image: Image::from_rgb8(&img),
                label: r.label,
                source: r.source,
                sample_id: r.sample_id,
            })
        })
        .collect()
}

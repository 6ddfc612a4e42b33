//! Uncertainty scorers. Every score is "higher = more uncertain".

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::datasets::{derive_seed, stack_images, Sample};
use crate::error::{DrueError, Result};
use crate::nn::FeatureMap;
use crate::training::{CheckpointBundle, Stage};

/// Samples per inference batch when scoring.
const SCORE_CHUNK: usize = 32;

/// Which reconstruction a RUE score compares against the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// `G1(F_{l-1}(x))`.
    Penultimate,
    /// `G0(F_l(x))`.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Drue,
    Rue,
    Entropy,
    McDropout,
}

impl MethodName {
    pub const ALL: [MethodName; 4] = [
        MethodName::Drue,
        MethodName::Rue,
        MethodName::Entropy,
        MethodName::McDropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Drue => "drue",
            MethodName::Rue => "rue",
            MethodName::Entropy => "entropy",
            MethodName::McDropout => "mc_dropout",
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = DrueError;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DrueError::config(format!("unknown method `{s}`")))
    }
}

/// A scoring method with its settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncertaintyMethod {
    Drue,
    Rue { tap: Tap },
    Entropy,
    McDropout { n_passes: usize, dropout_rate: f64 },
}

impl UncertaintyMethod {
    pub const DEFAULT_MC_PASSES: usize = 20;
    pub const DEFAULT_MC_RATE: f64 = 0.3;

    /// The method with default settings (`rue` reads from the final tap).
    pub fn from_name(name: MethodName) -> Self {
        match name {
            MethodName::Drue => UncertaintyMethod::Drue,
            MethodName::Rue => UncertaintyMethod::Rue { tap: Tap::Final },
            MethodName::Entropy => UncertaintyMethod::Entropy,
            MethodName::McDropout => UncertaintyMethod::McDropout {
                n_passes: Self::DEFAULT_MC_PASSES,
                dropout_rate: Self::DEFAULT_MC_RATE,
            },
        }
    }

    pub fn name(&self) -> MethodName {
        match self {
            UncertaintyMethod::Drue => MethodName::Drue,
            UncertaintyMethod::Rue { .. } => MethodName::Rue,
            UncertaintyMethod::Entropy => MethodName::Entropy,
            UncertaintyMethod::McDropout { .. } => MethodName::McDropout,
        }
    }

    /// Label used in score files and reports.
    pub fn label(&self) -> String {
        match self {
            UncertaintyMethod::Rue {
                tap: Tap::Penultimate,
            } => "rue_penultimate".to_string(),
            m => m.name().to_string(),
        }
    }

    /// Parses a report label (`drue`, `rue`, `rue_penultimate`, `entropy`,
    /// `mc_dropout`) with the given MC-dropout settings.
    pub fn from_label(label: &str, mc_passes: usize, mc_rate: f64) -> Result<Self> {
        if label == "rue_penultimate" {
            return Ok(UncertaintyMethod::Rue {
                tap: Tap::Penultimate,
            });
        }
        Ok(match label.parse::<MethodName>()? {
            MethodName::McDropout => UncertaintyMethod::McDropout {
                n_passes: mc_passes,
                dropout_rate: mc_rate,
            },
            name => Self::from_name(name),
        })
    }

    /// Training stages the method reads from.
    pub fn required_stages(&self) -> &'static [Stage] {
        match self {
            UncertaintyMethod::Drue => &[Stage::G1, Stage::G0],
            UncertaintyMethod::Rue { tap: Tap::Final } => &[Stage::G0],
            UncertaintyMethod::Rue {
                tap: Tap::Penultimate,
            } => &[Stage::G1],
            UncertaintyMethod::Entropy | UncertaintyMethod::McDropout { .. } => {
                &[Stage::Classifier]
            }
        }
    }

    pub fn check_bundle(&self, bundle: &CheckpointBundle) -> Result<()> {
        self.required_stages()
            .iter()
            .try_for_each(|&s| bundle.require(s))
    }
}

/// Mean of `|a - b|` accumulated in `f64`.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Per-sample mean absolute difference of two image batches.
pub fn per_sample_mad(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    (0..a.batch)
        .map(|n| mean_abs_diff(&a.sample(n), &b.sample(n)))
        .collect()
}

/// Both reconstructions `(x̂, x̂′)` for an image batch.
pub fn reconstructions(
    bundle: &CheckpointBundle,
    x: &FeatureMap<f32>,
) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
    UncertaintyMethod::Drue.check_bundle(bundle)?;
    let pair = bundle.decoders()?;
    let taps = bundle.classifier.forward_features(x)?;
    Ok((
        pair.reconstruct_from_penultimate(&taps.m1)?,
        pair.reconstruct_from_final(&taps.m0)?,
    ))
}

/// DRUE scores `mean |G1(m1) − G1(g0(m0))|` for an image batch.
pub fn drue_scores(bundle: &CheckpointBundle, x: &FeatureMap<f32>) -> Result<Vec<f64>> {
    let (a, b) = reconstructions(bundle, x)?;
    Ok(per_sample_mad(&a, &b))
}

/// RUE scores `mean |x − G(F(x))|` from the given tap.
pub fn rue_scores(bundle: &CheckpointBundle, x: &FeatureMap<f32>, tap: Tap) -> Result<Vec<f64>> {
    UncertaintyMethod::Rue { tap }.check_bundle(bundle)?;
    let pair = bundle
        .decoders
        .as_ref()
        .expect("checked stage implies decoders");
    let taps = bundle.classifier.forward_features(x)?;
    let recon = match tap {
        Tap::Penultimate => pair.reconstruct_from_penultimate(&taps.m1)?,
        Tap::Final => pair.reconstruct_from_final(&taps.m0)?,
    };
    Ok(per_sample_mad(x, &recon))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy_score(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(DrueError::contract(
            "probabilities must be finite and nonnegative",
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(DrueError::contract(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Predictive entropy of the mean distribution across passes.
pub fn mc_dropout_from_passes(passes: &[Vec<f64>]) -> Result<f64> {
    let first = passes
        .first()
        .ok_or_else(|| DrueError::config("need at least one pass"))?;
    let mut mean = vec![0.0; first.len()];
    for p in passes {
        if p.len() != mean.len() {
            return Err(DrueError::contract(
                "passes disagree on the number of classes",
            ));
        }
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= passes.len() as f64);
    entropy_score(&mean)
}

/// Dropout masks are seeded per sample id, so a score does not depend on
/// which other samples share its batch.
pub fn mc_seed(seed: u64, sample_id: &str) -> u64 {
    derive_seed(&[b"mc_dropout", sample_id.as_bytes(), &seed.to_le_bytes()])
}

/// Scores samples with `method`. `seed` only affects MC dropout.
pub fn score_samples(
    bundle: &CheckpointBundle,
    samples: &[Sample],
    method: &UncertaintyMethod,
    seed: u64,
) -> Result<Vec<f64>> {
    method.check_bundle(bundle)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_CHUNK) {
        let x = stack_images(&chunk.iter().collect::<Vec<_>>());
        match *method {
            UncertaintyMethod::Drue => out.extend(drue_scores(bundle, &x)?),
            UncertaintyMethod::Rue { tap } => out.extend(rue_scores(bundle, &x, tap)?),
            UncertaintyMethod::Entropy => {
                for p in bundle.classifier.predict(&x)? {
                    out.push(entropy_score(&p)?);
                }
            }
            UncertaintyMethod::McDropout {
                n_passes,
                dropout_rate,
            } => {
                for (i, s) in chunk.iter().enumerate() {
                    let xi = x.select_batch(&[i]);
                    let passes = bundle.classifier.predict_mc(
                        &xi,
                        n_passes,
                        dropout_rate,
                        mc_seed(seed, &s.sample_id),
                    )?;
                    let per_pass: Vec<Vec<f64>> =
                        passes.into_iter().map(|mut p| p.remove(0)).collect();
                    out.push(mc_dropout_from_passes(&per_pass)?);
                }
            }
        }
    }
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(DrueError::contract(format!("non-finite score {bad}")));
    }
    Ok(out)
}

/// Per-pixel reconstruction discrepancy for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    /// Channel-mean `|x̂ − x̂′|`, row-major.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to `[0, 1]`; all zeros for a constant map.
    pub normalized: Vec<f64>,
}

pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

impl UncertaintyMap {
    /// Map for batch entry `index` of two reconstruction batches.
    pub fn from_reconstructions(a: &FeatureMap<f32>, b: &FeatureMap<f32>, index: usize) -> Self {
        assert_eq!(a.shape(), b.shape(), "shape mismatch");
        let (sa, sb) = (a.sample(index), b.sample(index));
        let plane = a.plane();
        let c = a.channels as f64;
        let raw: Vec<f64> = (0..plane)
            .map(|p| {
                (0..a.channels)
                    .map(|ch| (f64::from(sa[ch * plane + p]) - f64::from(sb[ch * plane + p])).abs())
                    .sum::<f64>()
                    / c
            })
            .collect();
        Self {
            height: a.height,
            width: a.width,
            normalized: min_max_normalize(&raw),
            raw,
        }
    }

    pub fn raw_mean(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.normalized[y as usize * self.width + x as usize];
            Luma([(v * 255.0).round() as u8])
        })
    }

    /// Writes an 8-bit PNG plus a JSON sidecar holding the float values.
    pub fn save(&self, png: &Path) -> Result<()> {
        self.to_gray8().save(png)?;
        let sidecar = png.with_extension("json");
        let body = serde_json::json!({
            "height": self.height,
            "width": self.width,
            "raw": self.raw,
            "normalized": self.normalized,
        });
        fs::write(&sidecar, serde_json::to_string(&body)? + "\n")
            .map_err(|e| DrueError::io(&sidecar, e))
    }
}

/// Uncertainty map of a single sample.
pub fn uncertainty_map(bundle: &CheckpointBundle, sample: &Sample) -> Result<UncertaintyMap> {
    let x = stack_images(&[sample]);
    let (a, b) = reconstructions(bundle, &x)?;
    Ok(UncertaintyMap::from_reconstructions(&a, &b, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, n: usize) -> FeatureMap<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(
            3,
            n,
            4,
            5,
            (0..3 * n * 20).map(|_| rng.random::<f32>()).collect(),
        )
    }

    #[test]
    fn drue_definitional_values() {
        let a = random_map(1, 2);
        assert_eq!(per_sample_mad(&a, &a), vec![0.0, 0.0]);
        let base = a.map(|v| v * 0.5);
        let shifted = base.map(|v| v + 0.2);
        for s in per_sample_mad(&base, &shifted) {
            assert!((s - 0.2).abs() < 1e-7);
        }
        let ones = FeatureMap::from_vec(3, 1, 2, 2, vec![1.0f32; 12]);
        let zeros = FeatureMap::from_vec(3, 1, 2, 2, vec![0.0f32; 12]);
        assert_eq!(per_sample_mad(&ones, &zeros), vec![1.0]);
    }

    #[test]
    fn batch_scores_match_per_sample() {
        let (a, b) = (random_map(2, 3), random_map(3, 3));
        let batch = per_sample_mad(&a, &b);
        for i in 0..3 {
            let single = per_sample_mad(&a.select_batch(&[i]), &b.select_batch(&[i]));
            assert_eq!(single[0], batch[i]);
        }
    }

    #[test]
    fn entropy_values_and_contract() {
        assert!((entropy_score(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(entropy_score(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_score(&[0.9, 0.1]).unwrap() - 0.3251).abs() < 5e-5);
        assert!(matches!(
            entropy_score(&[1.2, -0.2]),
            Err(DrueError::Contract(_))
        ));
        assert!(matches!(
            entropy_score(&[0.5, 0.6]),
            Err(DrueError::Contract(_))
        ));
        assert!(entropy_score(&[0.5, 0.50005]).is_ok());
    }

    #[test]
    fn mc_dropout_aggregation() {
        let s = mc_dropout_from_passes(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-12);
        let same = vec![vec![0.9, 0.1]; 5];
        assert_eq!(
            mc_dropout_from_passes(&same).unwrap(),
            entropy_score(&[0.9, 0.1]).unwrap()
        );
        assert!(mc_dropout_from_passes(&[]).is_err());
    }

    #[test]
    fn map_normalization() {
        let n = min_max_normalize(&[0.1, 0.3, 0.2]);
        assert!((n[0]).abs() < 1e-12 && (n[1] - 1.0).abs() < 1e-12 && (n[2] - 0.5).abs() < 1e-12);
        assert_eq!(min_max_normalize(&[0.4; 4]), vec![0.0; 4]);
        assert_eq!(min_max_normalize(&[0.0; 4]), vec![0.0; 4]);
        let a = random_map(5, 2);
        let same = UncertaintyMap::from_reconstructions(&a, &a, 1);
        assert!(same.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_mean_equals_scalar_score() {
        let (a, b) = (random_map(6, 2), random_map(7, 2));
        let scores = per_sample_mad(&a, &b);
        for i in 0..2 {
            let m = UncertaintyMap::from_reconstructions(&a, &b, i);
            assert!((m.raw_mean() - scores[i]).abs() < 1e-7);
            assert!(m.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn map_export_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = UncertaintyMap::from_reconstructions(&random_map(8, 1), &random_map(9, 1), 0);
        let png = dir.path().join("map.png");
        m.save(&png).unwrap();
        let img = image::open(&png).unwrap().to_luma8();
        assert_eq!((img.width(), img.height()), (5, 4));
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(png.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["raw"].as_array().unwrap().len(), 20);
    }

    #[test]
    fn method_labels_and_parsing() {
        assert_eq!(
            "mc_dropout".parse::<MethodName>().unwrap(),
            MethodName::McDropout
        );
        assert!("bnn".parse::<MethodName>().is_err());
        assert_eq!(
            UncertaintyMethod::Rue {
                tap: Tap::Penultimate
            }
            .label(),
            "rue_penultimate"
        );
        assert_eq!(UncertaintyMethod::from_name(MethodName::Rue).label(), "rue");
    }
}

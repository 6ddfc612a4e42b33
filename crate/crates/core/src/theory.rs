//! Numerical checks that the gap between the two reconstructions behaves like
//! a Jacobian-vector product of `G1` with a second-order remainder.
//!
//! Everything here runs in `f64` so that remainders at small scales are not
//! drowned by single-precision rounding.

use serde::{Deserialize, Serialize};

use crate::datasets::{stack_images, Sample};
use crate::decoders::DecoderStack;
use crate::error::{DrueError, Result};
use crate::nn::FeatureMap;
use crate::training::CheckpointBundle;
use crate::uncertainty::UncertaintyMethod;

/// A map `R^n → R^m` with an optional exact directional derivative.
pub trait DifferentiableMap {
    fn input_len(&self) -> usize;
    fn eval(&self, z: &[f64]) -> Vec<f64>;
    /// Exact forward-mode JVP, if the map provides one.
    fn exact_jvp(&self, _z: &[f64], _dz: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Elementwise `g(z) = z²`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub len: usize,
}

impl DifferentiableMap for Quadratic {
    fn input_len(&self) -> usize {
        self.len
    }

    fn eval(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * v).collect()
    }

    fn exact_jvp(&self, z: &[f64], dz: &[f64]) -> Option<Vec<f64>> {
        Some(z.iter().zip(dz).map(|(a, d)| 2.0 * a * d).collect())
    }
}

/// `g(z) = A z + b` with row-major `A`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Affine {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        self.a
            .chunks(n)
            .map(|row| row.iter().zip(z).map(|(w, v)| w * v).sum())
            .collect()
    }
}

impl DifferentiableMap for Affine {
    fn input_len(&self) -> usize {
        self.a.len() / self.b.len()
    }

    fn eval(&self, z: &[f64]) -> Vec<f64> {
        self.apply(z)
            .into_iter()
            .zip(&self.b)
            .map(|(v, b)| v + b)
            .collect()
    }

    fn exact_jvp(&self, _z: &[f64], dz: &[f64]) -> Option<Vec<f64>> {
        Some(self.apply(dz))
    }
}

/// `G1` on a single feature grid of shape `(c, h, w)`.
#[derive(Debug, Clone)]
pub struct DecoderMap {
    pub tail: DecoderStack<f64>,
    pub shape: (usize, usize, usize),
}

impl DecoderMap {
    fn wrap(&self, z: &[f64]) -> FeatureMap<f64> {
        let (c, h, w) = self.shape;
        FeatureMap::from_vec(c, 1, h, w, z.to_vec())
    }
}

impl DifferentiableMap for DecoderMap {
    fn input_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    fn eval(&self, z: &[f64]) -> Vec<f64> {
        self.tail.forward(&self.wrap(z)).data
    }

    fn exact_jvp(&self, z: &[f64], dz: &[f64]) -> Option<Vec<f64>> {
        Some(self.tail.jvp(&self.wrap(z), &self.wrap(dz)).1.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JvpMethod {
    ForwardMode,
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jvp {
    pub tangent: Vec<f64>,
    pub method: JvpMethod,
    /// Finite-difference step, when one was used.
    pub step: Option<f64>,
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn axpy(z: &[f64], s: f64, dz: &[f64]) -> Vec<f64> {
    z.iter().zip(dz).map(|(a, d)| a + s * d).collect()
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DrueError::contract(format!("non-finite value in {what}")));
    }
    Ok(())
}

fn check_shapes(map: &dyn DifferentiableMap, z: &[f64], dz: &[f64]) -> Result<()> {
    if z.len() != map.input_len() || dz.len() != map.input_len() {
        return Err(DrueError::contract(format!(
            "probe has {} / {} values, map expects {}",
            z.len(),
            dz.len(),
            map.input_len()
        )));
    }
    Ok(())
}

/// Directional derivative of `map` at `z` along `dz`. Uses the exact
/// forward-mode product when available, otherwise central differences with
/// `h = 1e-4 · ‖z‖ / ‖dz‖`.
pub fn jvp(map: &dyn DifferentiableMap, z: &[f64], dz: &[f64], method: JvpMethod) -> Result<Jvp> {
    check_shapes(map, z, dz)?;
    check_finite("probe", z)?;
    check_finite("probe direction", dz)?;
    let out = match (method, map.exact_jvp(z, dz)) {
        (JvpMethod::ForwardMode, Some(t)) => Jvp {
            tangent: t,
            method: JvpMethod::ForwardMode,
            step: None,
        },
        _ => {
            let ndz = l2(dz);
            if ndz == 0.0 {
                return Ok(Jvp {
                    tangent: vec![0.0; map.eval(z).len()],
                    method: JvpMethod::CentralDifference,
                    step: None,
                });
            }
            let nz = l2(z);
            let h = 1e-4 * if nz > 0.0 { nz } else { 1.0 } / ndz;
            let plus = map.eval(&axpy(z, h, dz));
            let minus = map.eval(&axpy(z, -h, dz));
            Jvp {
                tangent: plus
                    .iter()
                    .zip(&minus)
                    .map(|(p, m)| (p - m) / (2.0 * h))
                    .collect(),
                method: JvpMethod::CentralDifference,
                step: Some(h),
            }
        }
    };
    check_finite("jvp", &out.tangent)?;
    Ok(out)
}

/// JVP of the bundle's `G1` at `z` along `dz`, in `f64`.
pub fn jvp_g1(
    bundle: &CheckpointBundle,
    z: &FeatureMap<f64>,
    dz: &FeatureMap<f64>,
    method: JvpMethod,
) -> Result<Jvp> {
    let map = decoder_map(bundle)?;
    if (z.channels, z.height, z.width) != map.shape || z.batch != 1 || z.shape() != dz.shape() {
        return Err(DrueError::contract(
            "probe shape does not match the decoder input",
        ));
    }
    jvp(&map, &z.data, &dz.data, method)
}

pub fn decoder_map(bundle: &CheckpointBundle) -> Result<DecoderMap> {
    let pair = bundle.decoders()?;
    Ok(DecoderMap {
        tail: pair.shared_tail.cast(),
        shape: pair.config.m1_shape,
    })
}

/// Absolute remainder `‖G(z+s·dz) − G(z) − s·jvp‖₁` and the increment
/// `‖G(z+s·dz) − G(z)‖₁`.
fn remainder(
    map: &dyn DifferentiableMap,
    z: &[f64],
    g0: &[f64],
    dz: &[f64],
    jvp: &[f64],
    s: f64,
) -> Result<(f64, f64, f64)> {
    let moved = map.eval(&axpy(z, s, dz));
    check_finite("decoder output", &moved)?;
    let diff: Vec<f64> = moved.iter().zip(g0).map(|(a, b)| a - b).collect();
    let rem: Vec<f64> = diff.iter().zip(jvp).map(|(d, j)| d - s * j).collect();
    Ok((l1(&rem), l1(&diff), l1(&moved) + l1(g0)))
}

/// Relative first-order Taylor residual
/// `‖G(z+s·dz) − G(z) − s·jvp‖₁ / max(‖G(z+s·dz) − G(z)‖₁, 1e-12)`.
pub fn taylor_residual(
    map: &dyn DifferentiableMap,
    z: &[f64],
    dz: &[f64],
    scale: f64,
) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(DrueError::config("scale must be positive"));
    }
    let j = jvp(map, z, dz, JvpMethod::ForwardMode)?;
    let g0 = map.eval(z);
    let (rem, inc, _) = remainder(map, z, &g0, dz, &j.tangent, scale)?;
    Ok(rem / inc.max(1e-12))
}

/// A feature point, a direction and the scales to probe along it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationProbe {
    pub z: Vec<f64>,
    pub dz: Vec<f64>,
    pub scales: Vec<f64>,
}

impl PerturbationProbe {
    pub fn validate(&self) -> Result<()> {
        if self.dz.iter().all(|&v| v == 0.0) {
            return Err(DrueError::config("probe direction must be nonzero"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(DrueError::config("probe scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(DrueError::config(
                "probe scales must be strictly decreasing",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub scale: f64,
    pub remainder: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub points: Vec<ProbePoint>,
    /// Least-squares slope of log remainder against log scale.
    pub slope: Option<f64>,
    /// True when every remainder is at rounding level (the map is affine
    /// along the probe).
    pub exact: bool,
    /// Scales whose remainder fell to rounding level and were left out.
    pub dropped: Vec<f64>,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Fits the log-log slope of the absolute Taylor remainder. Needs at least
/// three scales spanning two decades; remainders at rounding level are
/// dropped with a warning.
pub fn residual_scaling_exponent(
    map: &dyn DifferentiableMap,
    probe: &PerturbationProbe,
) -> Result<ScalingFit> {
    probe.validate()?;
    if probe.scales.len() < 3 {
        return Err(DrueError::config("need at least three scales"));
    }
    let span = probe.scales[0] / probe.scales[probe.scales.len() - 1];
    if span < 100.0 * (1.0 - 1e-9) {
        return Err(DrueError::config("scales must span at least two decades"));
    }
    let j = jvp(map, &probe.z, &probe.dz, JvpMethod::ForwardMode)?;
    let g0 = map.eval(&probe.z);
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for &s in &probe.scales {
        let (rem, inc, mag) = remainder(map, &probe.z, &g0, &probe.dz, &j.tangent, s)?;
        points.push(ProbePoint {
            scale: s,
            remainder: rem,
            residual: rem / inc.max(1e-12),
        });
        // rounding floor of the difference of two outputs of this magnitude
        if rem <= 64.0 * f64::EPSILON * mag.max(f64::MIN_POSITIVE) {
            log::warn!("remainder at scale {s} is at rounding level; dropping it");
            dropped.push(s);
        } else {
            kept.push((s.ln(), rem.ln()));
        }
    }
    if kept.is_empty() {
        return Ok(ScalingFit {
            points,
            slope: None,
            exact: true,
            dropped,
        });
    }
    if kept.len() < 3 {
        return Err(DrueError::contract(format!(
            "only {} scales survive the underflow filter, need 3",
            kept.len()
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = kept.into_iter().unzip();
    Ok(ScalingFit {
        points,
        slope: Some(ls_slope(&x, &y)),
        exact: false,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrueJvpCheck {
    /// Multiplier applied to `Δz`.
    pub scale: f64,
    /// `mean |G1(z + scale·Δz) − G1(z)|`; at scale 1 this is the DRUE score.
    pub u_d: f64,
    /// `mean |J_G1(z) · scale·Δz|`.
    pub jvp_estimate: f64,
    /// `|u_d − jvp_estimate| / u_d`, defined as 0 when both vanish.
    pub relative_gap: f64,
}

/// `z = F_{l-1}(x)` and `Δz = g0(f_l(z)) − z` for one sample, in `f64`.
pub fn feature_gap(bundle: &CheckpointBundle, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
    UncertaintyMethod::Drue.check_bundle(bundle)?;
    let pair = bundle.decoders()?.cast::<f64>();
    let classifier = bundle.classifier.cast::<f64>();
    let x = stack_images(&[sample]).cast::<f64>();
    let taps = classifier.forward_features(&x)?;
    let z0 = pair.map_to_penultimate(&taps.m0)?;
    let dz = z0
        .data
        .iter()
        .zip(&taps.m1.data)
        .map(|(a, b)| a - b)
        .collect();
    Ok((taps.m1.data, dz))
}

/// Compares the true reconstruction gap with its first-order estimate for
/// `Δz` scaled by each of `scales`. Both means run over every pixel of every
/// sample in `samples`, so the gap describes the batch as a whole.
pub fn drue_vs_jvp_check(
    bundle: &CheckpointBundle,
    samples: &[&Sample],
    scales: &[f64],
) -> Result<Vec<DrueJvpCheck>> {
    if samples.is_empty() {
        return Err(DrueError::config(
            "drue_vs_jvp_check needs at least one sample",
        ));
    }
    let map = decoder_map(bundle)?;
    let mut sums = vec![(0.0, 0.0); scales.len()];
    let mut n = 0.0;
    for sample in samples {
        let (z, dz) = feature_gap(bundle, sample)?;
        let base = map.eval(&z);
        n += base.len() as f64;
        for (&a, sum) in scales.iter().zip(sums.iter_mut()) {
            let sdz: Vec<f64> = dz.iter().map(|d| a * d).collect();
            let moved = map.eval(&axpy(&z, 1.0, &sdz));
            sum.0 += moved
                .iter()
                .zip(&base)
                .map(|(m, b)| (m - b).abs())
                .sum::<f64>();
            sum.1 += l1(&jvp(&map, &z, &sdz, JvpMethod::ForwardMode)?.tangent);
        }
    }
    Ok(scales
        .iter()
        .zip(sums)
        .map(|(&scale, (diff, est))| {
            let (u_d, jvp_estimate) = (diff / n, est / n);
            let relative_gap = if u_d == 0.0 && jvp_estimate == 0.0 {
                0.0
            } else {
                (u_d - jvp_estimate).abs() / u_d.max(1e-300)
            };
            DrueJvpCheck {
                scale,
                u_d,
                jvp_estimate,
                relative_gap,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::StageSpec;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_closed_forms() {
        let q = Quadratic { len: 1 };
        let j = jvp(&q, &[1.0], &[1.0], JvpMethod::ForwardMode).unwrap();
        assert_eq!(j.tangent, vec![2.0]);
        let fd = jvp(&q, &[1.0], &[1.0], JvpMethod::CentralDifference).unwrap();
        assert!((fd.tangent[0] - 2.0).abs() < 1e-9);
        assert_eq!(fd.method, JvpMethod::CentralDifference);
        let r = taylor_residual(&q, &[1.0], &[1.0], 0.1).unwrap();
        assert!((r - 0.01 / 0.21).abs() < 1e-12);
    }

    #[test]
    fn quadratic_slope_is_two() {
        let q = Quadratic { len: 3 };
        let probe = PerturbationProbe {
            z: vec![1.0, -0.5, 2.0],
            dz: vec![0.3, 1.0, -0.7],
            scales: vec![1e-1, 1e-2, 1e-3],
        };
        let fit = residual_scaling_exponent(&q, &probe).unwrap();
        assert!((fit.slope.unwrap() - 2.0).abs() < 1e-3);
        assert!(!fit.exact);
    }

    #[test]
    fn affine_maps_have_no_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aff = Affine {
            a: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: vec![0.5, -0.25, 1.0],
        };
        let z = [0.3, -1.2, 0.8, 2.0];
        let dz = [1.0, 0.5, -0.3, 0.1];
        let j = jvp(&aff, &z, &dz, JvpMethod::ForwardMode).unwrap();
        let diff: Vec<f64> = aff
            .eval(&axpy(&z, 1.0, &dz))
            .iter()
            .zip(aff.eval(&z))
            .map(|(a, b)| a - b)
            .collect();
        assert!(j
            .tangent
            .iter()
            .zip(&diff)
            .all(|(a, b)| (a - b).abs() < 1e-10));
        for s in [1.0, 0.1, 1e-3] {
            assert!(taylor_residual(&aff, &z, &dz, s).unwrap() < 1e-10);
        }
        let fit = residual_scaling_exponent(
            &aff,
            &PerturbationProbe {
                z: z.to_vec(),
                dz: dz.to_vec(),
                scales: vec![1e-1, 1e-2, 1e-3],
            },
        )
        .unwrap();
        assert!(fit.exact);
        assert_eq!(fit.slope, None);
    }

    #[test]
    fn probe_validation() {
        let q = Quadratic { len: 1 };
        let bad = |dz: f64, scales: Vec<f64>| PerturbationProbe {
            z: vec![1.0],
            dz: vec![dz],
            scales,
        };
        assert!(residual_scaling_exponent(&q, &bad(0.0, vec![1e-1, 1e-2, 1e-3])).is_err());
        assert!(residual_scaling_exponent(&q, &bad(1.0, vec![1e-1, 1e-2])).is_err());
        assert!(residual_scaling_exponent(&q, &bad(1.0, vec![1e-1, 5e-2, 2e-2])).is_err());
        assert!(residual_scaling_exponent(&q, &bad(1.0, vec![1e-3, 1e-2, 1e-1])).is_err());
        assert!(taylor_residual(&q, &[1.0], &[1.0], 0.0).is_err());
        assert!(jvp(&q, &[1.0, 2.0], &[1.0], JvpMethod::ForwardMode).is_err());
    }

    fn smooth_decoder(seed: u64) -> DecoderMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [
            StageSpec {
                in_channels: 4,
                out_channels: 3,
                upsample: true,
                activation: Activation::Silu,
            },
            StageSpec {
                in_channels: 3,
                out_channels: 3,
                upsample: false,
                activation: Activation::Sigmoid,
            },
        ];
        DecoderMap {
            tail: DecoderStack::new("t", &specs, &mut rng),
            shape: (4, 3, 3),
        }
    }

    #[test]
    fn decoder_jvp_is_linear_and_matches_differences() {
        let map = smooth_decoder(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v = || {
            (0..36)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (z, u, w) = (v(), v(), v());
        let ju = jvp(&map, &z, &u, JvpMethod::ForwardMode).unwrap().tangent;
        let jw = jvp(&map, &z, &w, JvpMethod::ForwardMode).unwrap().tangent;
        let comb: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let jc = jvp(&map, &z, &comb, JvpMethod::ForwardMode)
            .unwrap()
            .tangent;
        for i in 0..jc.len() {
            let expect = 2.0 * ju[i] - 0.5 * jw[i];
            assert!((jc[i] - expect).abs() <= 1e-6 * expect.abs().max(1e-12) + 1e-12);
        }
        let fd = jvp(&map, &z, &u, JvpMethod::CentralDifference)
            .unwrap()
            .tangent;
        assert!(ju.iter().zip(&fd).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn smooth_decoder_remainder_is_quadratic() {
        let map = smooth_decoder(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe = PerturbationProbe {
            z: (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dz: (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
            scales: vec![1e-1, 5e-2, 1e-2, 1e-3],
        };
        let fit = residual_scaling_exponent(&map, &probe).unwrap();
        let slope = fit.slope.unwrap();
        assert!((1.8..=2.2).contains(&slope), "slope {slope}");
        // halving the scale quarters the remainder
        let j = jvp(&map, &probe.z, &probe.dz, JvpMethod::ForwardMode).unwrap();
        let g0 = map.eval(&probe.z);
        let r = |s| {
            remainder(&map, &probe.z, &g0, &probe.dz, &j.tangent, s)
                .unwrap()
                .0
        };
        let ratio = r(2e-3) / r(1e-3);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

//! The decoder pair. `G1` reconstructs the image from `m1`; `G0` first maps
//! `m0` back into `m1`-space with a one-stage head `g0` and then runs the very
//! same tail as `G1`. There is exactly one copy of the tail parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, FeatureShape};
use crate::error::{DrueError, Result};
use crate::nn::{
    upsample_nearest2x, upsample_nearest2x_backward, Activation, Conv2d, ConvCache, FeatureMap,
    Grads, HasParams, Param, Scalar,
};

/// One decoder stage: optional nearest 2× upsample, 3×3 convolution, activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsample: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub image_size: usize,
    pub m1_shape: FeatureShape,
    pub m0_shape: FeatureShape,
    /// Mirror of encoder stage `l`; maps `m0`-space to `m1`-space.
    pub head: StageSpec,
    /// Mirror of the stem and stages `1..l-1`, ending in a `[0, 1]`-bounded
    /// 3-channel output.
    pub tail: Vec<StageSpec>,
}

/// Builds the decoder layout that mirrors `cfg`: stages in reverse order with
/// reversed channel progression, each encoder downsample turned into an
/// upsample, and a sigmoid on the final 3-channel layer.
pub fn mirror_architecture(cfg: &EncoderConfig) -> DecoderConfig {
    let l = cfg.num_blocks();
    let act = cfg.activation;
    let input_channels = |i: usize| {
        if i == 0 {
            cfg.stem_channels
        } else {
            cfg.channels[i - 1]
        }
    };
    let head = StageSpec {
        in_channels: cfg.channels[l - 1],
        out_channels: input_channels(l - 1),
        upsample: cfg.downsample[l - 1],
        activation: act,
    };
    let mut tail: Vec<StageSpec> = (0..l - 1)
        .rev()
        .map(|i| StageSpec {
            in_channels: cfg.channels[i],
            out_channels: input_channels(i),
            upsample: cfg.downsample[i],
            activation: act,
        })
        .collect();
    tail.push(StageSpec {
        in_channels: cfg.stem_channels,
        out_channels: 3,
        upsample: cfg.stem_downsample,
        activation: Activation::Sigmoid,
    });
    DecoderConfig {
        image_size: cfg.image_size,
        m1_shape: cfg.m1_shape(),
        m0_shape: cfg.m0_shape(),
        head,
        tail,
    }
}

impl DecoderConfig {
    /// Same layout with every hidden activation replaced (the output stage
    /// keeps its sigmoid).
    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.head.activation = activation;
        let last = self.tail.len() - 1;
        for s in &mut self.tail[..last] {
            s.activation = activation;
        }
        self
    }

    /// Spatial/channel shape after running `stages` on an input of `shape`.
    pub fn output_shape(stages: &[StageSpec], shape: FeatureShape) -> FeatureShape {
        stages.iter().fold(shape, |(_, h, w), s| {
            let f = if s.upsample { 2 } else { 1 };
            (s.out_channels, h * f, w * f)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage<T> {
    pub spec: StageSpec,
    pub conv: Conv2d<T>,
}

struct StageCache<T> {
    conv: ConvCache<T>,
    pre: FeatureMap<T>,
}

impl<T: Scalar> DecoderStage<T> {
    fn new(name: &str, spec: StageSpec, rng: &mut impl Rng) -> Self {
        let gain = if spec.activation == Activation::Sigmoid {
            0.5
        } else {
            1.0
        };
        Self {
            spec,
            conv: Conv2d::new(
                &format!("{name}.conv"),
                spec.in_channels,
                spec.out_channels,
                3,
                1,
                1,
                gain,
                rng,
            ),
        }
    }

    fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let pre = if self.spec.upsample {
            self.conv.forward(&upsample_nearest2x(x))
        } else {
            self.conv.forward(x)
        };
        self.spec.activation.forward(&pre)
    }

    fn forward_train(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, StageCache<T>) {
        let (pre, conv) = if self.spec.upsample {
            self.conv.forward_train(&upsample_nearest2x(x))
        } else {
            self.conv.forward_train(x)
        };
        (self.spec.activation.forward(&pre), StageCache { conv, pre })
    }

    fn backward(
        &self,
        cache: &StageCache<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let g_pre = self.spec.activation.backward(&cache.pre, grad_out);
        let g_in = self
            .conv
            .backward(&cache.conv, &g_pre, grads, need_input_grad)?;
        Some(if self.spec.upsample {
            upsample_nearest2x_backward(&g_in)
        } else {
            g_in
        })
    }

    /// Forward-mode derivative: value and tangent together.
    fn jvp(&self, x: &FeatureMap<T>, dx: &FeatureMap<T>) -> (FeatureMap<T>, FeatureMap<T>) {
        let (x, dx) = if self.spec.upsample {
            (upsample_nearest2x(x), upsample_nearest2x(dx))
        } else {
            (x.clone(), dx.clone())
        };
        let pre = self.conv.forward(&x);
        let dpre = self.conv.forward_linear(&dx);
        let act = self.spec.activation;
        let tangent = dpre.zip_map(&pre, |d, p| d * act.derivative(p));
        (act.forward(&pre), tangent)
    }

    fn cast<U: Scalar>(&self) -> DecoderStage<U> {
        DecoderStage {
            spec: self.spec,
            conv: self.conv.cast(),
        }
    }
}

/// An ordered chain of decoder stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStack<T> {
    pub stages: Vec<DecoderStage<T>>,
}

/// Training-mode caches for a [`DecoderStack`].
pub struct StackCache<T>(Vec<StageCache<T>>);

impl<T: Scalar> DecoderStack<T> {
    pub fn new(prefix: &str, specs: &[StageSpec], rng: &mut impl Rng) -> Self {
        Self {
            stages: specs
                .iter()
                .enumerate()
                .map(|(i, &s)| DecoderStage::new(&format!("{prefix}.stage{}", i + 1), s, rng))
                .collect(),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.stages.iter().fold(x.clone(), |h, s| s.forward(&h))
    }

    pub fn forward_train(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, StackCache<T>) {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for s in &self.stages {
            let (out, c) = s.forward_train(&h);
            caches.push(c);
            h = out;
        }
        (h, StackCache(caches))
    }

    pub fn backward(
        &self,
        cache: &StackCache<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let mut g = grad_out.clone();
        for (i, (s, c)) in self.stages.iter().zip(&cache.0).enumerate().rev() {
            g = s.backward(c, &g, grads, need_input_grad || i > 0)?;
        }
        Some(g)
    }

    /// Exact forward-mode Jacobian-vector product at `x` along `dx`.
    pub fn jvp(&self, x: &FeatureMap<T>, dx: &FeatureMap<T>) -> (FeatureMap<T>, FeatureMap<T>) {
        let mut h = x.clone();
        let mut dh = dx.clone();
        for s in &self.stages {
            let (a, b) = s.jvp(&h, &dh);
            h = a;
            dh = b;
        }
        (h, dh)
    }

    pub fn cast<U: Scalar>(&self) -> DecoderStack<U> {
        DecoderStack {
            stages: self.stages.iter().map(|s| s.cast()).collect(),
        }
    }
}

impl<T> HasParams<T> for DecoderStack<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.stages.iter().flat_map(|s| s.conv.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.conv.params_mut())
            .collect()
    }
}

/// `G1 = shared_tail`, `G0 = shared_tail ∘ g0_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderPair<T> {
    pub config: DecoderConfig,
    pub g0_head: DecoderStack<T>,
    pub shared_tail: DecoderStack<T>,
}

pub const HEAD_PREFIX: &str = "decoder.g0_head";
pub const TAIL_PREFIX: &str = "decoder.tail";

impl<T: Scalar> DecoderPair<T> {
    pub fn new(config: DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared_tail = DecoderStack::new(TAIL_PREFIX, &config.tail, &mut rng);
        let g0_head = DecoderStack::new(HEAD_PREFIX, &[config.head], &mut rng);
        Self {
            config,
            g0_head,
            shared_tail,
        }
    }

    /// Re-initialises only the head, keeping the tail.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.g0_head = DecoderStack::new(HEAD_PREFIX, &[self.config.head], &mut rng);
    }

    /// Rescales the head so that `g0(m0)` matches the RMS of `m1`. A freshly
    /// initialised head can overshoot the range the tail was trained on by an
    /// order of magnitude, saturating the output sigmoid so that no gradient
    /// reaches the head. With a ReLU head the rescaling changes only the
    /// output scale.
    pub fn calibrate_head(&mut self, m0: &FeatureMap<T>, m1: &FeatureMap<T>) -> Result<f64> {
        let out = self.map_to_penultimate(m0)?;
        let rms = |v: &[T]| {
            (v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
        };
        let (have, want) = (rms(&out.data), rms(&m1.data));
        if !(have > 0.0 && want > 0.0 && have.is_finite() && want.is_finite()) {
            return Ok(1.0);
        }
        let factor = want / have;
        let f = T::lit(factor);
        for p in self.g0_head.params_mut() {
            p.value.iter_mut().for_each(|v| *v = *v * f);
        }
        Ok(factor)
    }

    /// Names of the parameters shared by `G0` and `G1`.
    pub fn shared_manifest(&self) -> Vec<String> {
        self.shared_tail.param_names()
    }

    pub fn head_names(&self) -> Vec<String> {
        self.g0_head.param_names()
    }

    fn check(&self, x: &FeatureMap<T>, expected: FeatureShape, tap: &str) -> Result<()> {
        if (x.channels, x.height, x.width) != expected {
            return Err(DrueError::contract(format!(
                "{tap} features have shape {}×{}×{}, decoder expects {}×{}×{}",
                x.channels, x.height, x.width, expected.0, expected.1, expected.2
            )));
        }
        Ok(())
    }

    /// `x̂ = G1(m1)`.
    pub fn reconstruct_from_penultimate(&self, m1: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(m1, self.config.m1_shape, "m1")?;
        Ok(self.shared_tail.forward(m1))
    }

    /// `g0(m0)`, an estimate of `m1`.
    pub fn map_to_penultimate(&self, m0: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check(m0, self.config.m0_shape, "m0")?;
        Ok(self.g0_head.forward(m0))
    }

    /// `x̂′ = G0(m0) = G1(g0(m0))`.
    pub fn reconstruct_from_final(&self, m0: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let z = self.map_to_penultimate(m0)?;
        Ok(self.shared_tail.forward(&z))
    }

    pub fn cast<U: Scalar>(&self) -> DecoderPair<U> {
        DecoderPair {
            config: self.config.clone(),
            g0_head: self.g0_head.cast(),
            shared_tail: self.shared_tail.cast(),
        }
    }
}

impl<T> HasParams<T> for DecoderPair<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.g0_head.params();
        v.extend(self.shared_tail.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.g0_head.params_mut();
        v.extend(self.shared_tail.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Classifier;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            stem_channels: 4,
            channels: vec![4, 6, 8],
            downsample: vec![false, true, true],
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn mirror_reverses_the_channel_progression() {
        let cfg = EncoderConfig {
            stem_channels: 32,
            channels: vec![32, 64, 128, 256],
            ..EncoderConfig::default()
        };
        let d = mirror_architecture(&cfg);
        assert_eq!(
            (d.head.in_channels, d.head.out_channels, d.head.upsample),
            (256, 128, true)
        );
        let outs: Vec<usize> = d.tail.iter().map(|s| s.out_channels).collect();
        assert_eq!(outs, vec![64, 32, 32, 3]);
        let ins: Vec<usize> = d.tail.iter().map(|s| s.in_channels).collect();
        assert_eq!(ins, vec![128, 64, 32, 32]);
        assert_eq!(d.tail.last().unwrap().activation, Activation::Sigmoid);
        assert_eq!(
            DecoderConfig::output_shape(&[d.head], d.m0_shape),
            d.m1_shape
        );
        assert_eq!(d.m0_shape, (256, 4, 4));
        assert_eq!(d.m1_shape, (128, 8, 8));
        assert_eq!(
            DecoderConfig::output_shape(&d.tail, d.m1_shape),
            (3, 64, 64)
        );
    }

    #[test]
    fn no_downsampling_means_no_upsampling() {
        let cfg = EncoderConfig {
            image_size: 16,
            stem_channels: 4,
            stem_downsample: false,
            channels: vec![4, 8],
            downsample: vec![false, false],
            ..EncoderConfig::default()
        };
        let d = mirror_architecture(&cfg);
        assert!(!d.head.upsample && d.tail.iter().all(|s| !s.upsample));
        assert_eq!(
            DecoderConfig::output_shape(&d.tail, d.m1_shape),
            (3, 16, 16)
        );
    }

    #[test]
    fn reconstructions_have_image_shape_and_unit_range() {
        let cfg = small_cfg();
        let model = Classifier::<f32>::new(&cfg, 0).unwrap();
        let pair = DecoderPair::<f32>::new(mirror_architecture(&cfg), 1);
        let x = FeatureMap::from_vec(
            3,
            2,
            32,
            32,
            (0..6144).map(|i| ((i % 17) as f32) / 16.0).collect(),
        );
        let f = model.forward_features(&x).unwrap();
        let a = pair.reconstruct_from_penultimate(&f.m1).unwrap();
        let b = pair.reconstruct_from_final(&f.m0).unwrap();
        assert_eq!(a.shape(), [3, 2, 32, 32]);
        assert_eq!(b.shape(), [3, 2, 32, 32]);
        assert!(a
            .data
            .iter()
            .chain(&b.data)
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, pair.reconstruct_from_penultimate(&f.m1).unwrap());
        assert_eq!(b, pair.reconstruct_from_final(&f.m0).unwrap());
        assert!(matches!(
            pair.reconstruct_from_penultimate(&f.m0),
            Err(DrueError::Contract(_))
        ));
        assert!(pair.reconstruct_from_final(&f.m1).is_err());
    }

    #[test]
    fn zero_final_layer_gives_a_constant_image() {
        let cfg = small_cfg();
        let mut pair = DecoderPair::<f64>::new(mirror_architecture(&cfg), 3);
        let last = pair.shared_tail.stages.last_mut().unwrap();
        last.conv.weight.value.iter_mut().for_each(|w| *w = 0.0);
        last.conv.bias.value = vec![0.0, 1.0, -1.0];
        let (c, h, w) = cfg.m1_shape();
        let m1 = FeatureMap::from_vec(
            c,
            1,
            h,
            w,
            (0..c * h * w).map(|i| i as f64 * 0.01).collect(),
        );
        let out = pair.reconstruct_from_penultimate(&m1).unwrap();
        let plane = out.plane();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for (ch, bias) in [0.0, 1.0, -1.0].iter().enumerate() {
            assert!(out.data[ch * plane..(ch + 1) * plane]
                .iter()
                .all(|&v| v == sig(*bias)));
        }
    }

    #[test]
    fn identity_head_makes_the_two_decoders_agree() {
        let cfg = EncoderConfig {
            image_size: 16,
            stem_channels: 3,
            channels: vec![4, 4],
            downsample: vec![true, false],
            ..EncoderConfig::default()
        };
        let mut pair = DecoderPair::<f64>::new(mirror_architecture(&cfg), 5);
        // 3×3 conv with a centred delta kernel and ReLU is the identity on m ≥ 0
        let head = &mut pair.g0_head.stages[0].conv;
        head.weight.value.iter_mut().for_each(|w| *w = 0.0);
        head.bias.value.iter_mut().for_each(|b| *b = 0.0);
        for c in 0..4 {
            head.weight.value[((c * 4 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let m = FeatureMap::from_vec(4, 1, 4, 4, (0..64).map(|i| (i % 7) as f64 * 0.1).collect());
        assert_eq!(
            pair.reconstruct_from_penultimate(&m).unwrap(),
            pair.reconstruct_from_final(&m).unwrap()
        );
    }

    #[test]
    fn tail_storage_is_shared_between_views() {
        let cfg = small_cfg();
        let mut pair = DecoderPair::<f32>::new(mirror_architecture(&cfg), 9);
        let (c, h, w) = cfg.m1_shape();
        let (c0, h0, w0) = cfg.m0_shape();
        let m1 = FeatureMap::from_vec(c, 1, h, w, vec![0.3; c * h * w]);
        let m0 = FeatureMap::from_vec(c0, 1, h0, w0, vec![0.2; c0 * h0 * w0]);
        let (g1_before, g0_before) = (
            pair.reconstruct_from_penultimate(&m1).unwrap(),
            pair.reconstruct_from_final(&m0).unwrap(),
        );
        let last = pair.shared_tail.stages.last_mut().unwrap();
        last.conv.bias.value[0] += 1.0;
        assert_ne!(g1_before, pair.reconstruct_from_penultimate(&m1).unwrap());
        assert_ne!(g0_before, pair.reconstruct_from_final(&m0).unwrap());
        assert!(pair
            .shared_manifest()
            .iter()
            .all(|n| n.starts_with(TAIL_PREFIX)));
        assert!(pair.head_names().iter().all(|n| n.starts_with(HEAD_PREFIX)));
    }

    #[test]
    fn jvp_matches_central_differences() {
        let cfg = small_cfg();
        let pair = DecoderPair::<f64>::new(
            mirror_architecture(&cfg).with_activation(Activation::Silu),
            2,
        );
        let (c, h, w) = cfg.m1_shape();
        let n = c * h * w;
        let z = FeatureMap::from_vec(
            c,
            1,
            h,
            w,
            (0..n).map(|i| ((i * 7 % 11) as f64) * 0.05).collect(),
        );
        let dz = FeatureMap::from_vec(
            c,
            1,
            h,
            w,
            (0..n).map(|i| ((i * 3 % 5) as f64 - 2.0) * 0.1).collect(),
        );
        let (_, tangent) = pair.shared_tail.jvp(&z, &dz);
        let eps = 1e-5;
        let plus = pair
            .shared_tail
            .forward(&z.zip_map(&dz, |a, b| a + eps * b));
        let minus = pair
            .shared_tail
            .forward(&z.zip_map(&dz, |a, b| a - eps * b));
        for i in 0..tangent.len() {
            let fd = (plus.data[i] - minus.data[i]) / (2.0 * eps);
            assert!((fd - tangent.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn decoder_backward_matches_finite_differences() {
        let cfg = small_cfg();
        let pair = DecoderPair::<f64>::new(
            mirror_architecture(&cfg).with_activation(Activation::Silu),
            4,
        );
        let (c0, h0, w0) = cfg.m0_shape();
        let m0 = FeatureMap::from_vec(
            c0,
            1,
            h0,
            w0,
            (0..c0 * h0 * w0).map(|i| (i % 5) as f64 * 0.2).collect(),
        );
        let target: Vec<f64> = (0..3 * 32 * 32).map(|i| (i % 9) as f64 / 9.0).collect();
        let loss = |p: &DecoderPair<f64>| -> f64 {
            let out = p.reconstruct_from_final(&m0).unwrap();
            out.data
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let mut grads = Grads::new(pair.param_names());
        let (z, hc) = pair.g0_head.forward_train(&m0);
        let (out, tc) = pair.shared_tail.forward_train(&z);
        let g = FeatureMap::from_vec(
            3,
            1,
            32,
            32,
            out.data
                .iter()
                .zip(&target)
                .map(|(a, b)| 2.0 * (a - b))
                .collect(),
        );
        let gz = pair
            .shared_tail
            .backward(&tc, &g, &mut grads, true)
            .unwrap();
        pair.g0_head.backward(&hc, &gz, &mut grads, false);
        let h = 1e-6;
        for name in [
            "decoder.g0_head.stage1.conv.weight",
            "decoder.tail.stage1.conv.bias",
            "decoder.tail.stage3.conv.weight",
        ] {
            let mut plus = pair.clone();
            let mut minus = pair.clone();
            for (p, s) in [(&mut plus, h), (&mut minus, -h)] {
                p.params_mut()
                    .into_iter()
                    .find(|q| q.name == name)
                    .unwrap()
                    .value[2] += s;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.get(name).unwrap()[2];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                "{name}: {fd} vs {an}"
            );
        }
    }
}

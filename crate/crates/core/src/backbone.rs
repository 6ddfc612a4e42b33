//! The classifier `M = B ∘ F`: a residual convolutional feature extractor `F`
//! split into `l` stages, with feature taps after stage `l-1` (`m1`) and stage
//! `l` (`m0`), followed by global average pooling and a linear predictor `B`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DrueError, Result};
use crate::nn::{
    dropout_mask, global_avg_pool, global_avg_pool_backward, Activation, Conv2d, ConvCache,
    FeatureMap, Grads, HasParams, Linear, Param, Scalar,
};

/// Architecture of the feature extractor and classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input side length in pixels (square RGB images).
    pub image_size: usize,
    pub stem_channels: usize,
    /// Stride-2 stem convolution.
    pub stem_downsample: bool,
    /// Output channels of each residual stage; its length is `l`.
    pub channels: Vec<usize>,
    /// Whether each stage halves the spatial size.
    pub downsample: Vec<bool>,
    pub activation: Activation,
    /// Dropout after every stage; only the MC-dropout baseline turns it on
    /// at inference time.
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: 16,
            stem_downsample: true,
            channels: vec![16, 32, 64, 128],
            downsample: vec![false, true, true, true],
            activation: Activation::Relu,
            dropout_rate: 0.0,
            num_classes: 2,
        }
    }
}

/// `(channels, height, width)` of one tapped feature grid.
pub type FeatureShape = (usize, usize, usize);

impl EncoderConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.channels.len();
        if l < 2 {
            return Err(DrueError::config("encoder needs at least two stages"));
        }
        if self.downsample.len() != l {
            return Err(DrueError::config(format!(
                "len(channels) = {l} but len(downsample) = {}",
                self.downsample.len()
            )));
        }
        if self.channels.contains(&0) || self.stem_channels == 0 {
            return Err(DrueError::config("channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(DrueError::config("dropout_rate must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(DrueError::config("num_classes must be at least 2"));
        }
        let mut size = self.image_size;
        for down in std::iter::once(self.stem_downsample).chain(self.downsample.iter().copied()) {
            if down {
                if !size.is_multiple_of(2) {
                    return Err(DrueError::config(format!(
                        "spatial size {size} is odd before a downsampling step"
                    )));
                }
                size /= 2;
            }
        }
        if size < 2 {
            return Err(DrueError::config(format!(
                "spatial size after all stages is {size}×{size}, need at least 2×2"
            )));
        }
        Ok(())
    }

    fn spatial_after(&self, stages: usize) -> usize {
        let mut size = self.image_size;
        if self.stem_downsample {
            size /= 2;
        }
        for &down in &self.downsample[..stages] {
            if down {
                size /= 2;
            }
        }
        size
    }

    /// Shape of `m1`, the output of stage `l-1`.
    pub fn m1_shape(&self) -> FeatureShape {
        let l = self.num_blocks();
        let s = self.spatial_after(l - 1);
        (self.channels[l - 2], s, s)
    }

    /// Shape of `m0`, the output of stage `l`.
    pub fn m0_shape(&self) -> FeatureShape {
        let l = self.num_blocks();
        let s = self.spatial_after(l);
        (self.channels[l - 1], s, s)
    }

    pub fn stem_shape(&self) -> FeatureShape {
        let s = self.spatial_after(0);
        (self.stem_channels, s, s)
    }

    /// Short digest identifying the architecture; stored in checkpoints.
    pub fn arch_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Features tapped after the penultimate (`m1`) and final (`m0`) stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair<T> {
    pub m1: FeatureMap<T>,
    pub m0: FeatureMap<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
    pub activation: Activation,
}

pub struct BlockCache<T> {
    conv1: ConvCache<T>,
    pre1: FeatureMap<T>,
    conv2: ConvCache<T>,
    shortcut: Option<ConvCache<T>>,
    pre_out: FeatureMap<T>,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let stride = if downsample { 2 } else { 1 };
        let shortcut = (downsample || cin != cout).then(|| {
            Conv2d::new(
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
                0,
                0.5,
                rng,
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, 1.0, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, 0.3, rng),
            shortcut,
            activation,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let h = self.activation.forward(&self.conv1.forward(x));
        let mut out = self.conv2.forward(&h);
        match &self.shortcut {
            Some(sc) => out.add_assign(&sc.forward(x)),
            None => out.add_assign(x),
        }
        self.activation.forward(&out)
    }

    fn forward_train(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, BlockCache<T>) {
        let (pre1, c1) = self.conv1.forward_train(x);
        let h = self.activation.forward(&pre1);
        let (mut pre_out, c2) = self.conv2.forward_train(&h);
        let sc_cache = match &self.shortcut {
            Some(sc) => {
                let (s, cache) = sc.forward_train(x);
                pre_out.add_assign(&s);
                Some(cache)
            }
            None => {
                pre_out.add_assign(x);
                None
            }
        };
        let out = self.activation.forward(&pre_out);
        let cache = BlockCache {
            conv1: c1,
            pre1,
            conv2: c2,
            shortcut: sc_cache,
            pre_out,
            mask: None,
        };
        (out, cache)
    }

    fn backward(
        &self,
        cache: &BlockCache<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let g = match &cache.mask {
            Some(mask) => {
                let mut g = grad_out.clone();
                g.data.iter_mut().zip(mask).for_each(|(v, &m)| *v = *v * m);
                g
            }
            None => grad_out.clone(),
        };
        let g_pre = self.activation.backward(&cache.pre_out, &g);
        let g_h = self
            .conv2
            .backward(&cache.conv2, &g_pre, grads, true)
            .expect("input grad requested");
        let g_pre1 = self.activation.backward(&cache.pre1, &g_h);
        let dx_main = self
            .conv1
            .backward(&cache.conv1, &g_pre1, grads, need_input_grad);
        let dx_short = match (&self.shortcut, &cache.shortcut) {
            (Some(sc), Some(c)) => sc.backward(c, &g_pre, grads, need_input_grad),
            _ => need_input_grad.then(|| g_pre.clone()),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn cast<U: Scalar>(&self) -> ResidualBlock<U> {
        ResidualBlock {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            shortcut: self.shortcut.as_ref().map(|s| s.cast()),
            activation: self.activation,
        }
    }
}

impl<T> HasParams<T> for ResidualBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        if let Some(sc) = &self.shortcut {
            v.extend(sc.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        if let Some(sc) = &mut self.shortcut {
            v.extend(sc.params_mut());
        }
        v
    }
}

/// Feature extractor `F`: a stem convolution followed by `l` residual stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub stem: Conv2d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

/// Cached intermediate state of a training-mode encoder pass.
pub struct EncoderCache<T> {
    stem: ConvCache<T>,
    stem_pre: FeatureMap<T>,
    blocks: Vec<BlockCache<T>>,
}

/// Per-stage dropout during a forward pass.
pub struct StageDropout<'a, R> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stride = if config.stem_downsample { 2 } else { 1 };
        let stem = Conv2d::new(
            "encoder.stem",
            3,
            config.stem_channels,
            3,
            stride,
            1,
            1.0,
            rng,
        );
        let mut cin = config.stem_channels;
        let blocks = config
            .channels
            .iter()
            .zip(&config.downsample)
            .enumerate()
            .map(|(i, (&c, &down))| {
                let b = ResidualBlock::new(
                    &format!("encoder.block{}", i + 1),
                    cin,
                    c,
                    down,
                    config.activation,
                    rng,
                );
                cin = c;
                b
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
        })
    }

    pub fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let s = self.config.image_size;
        if x.channels != 3 || x.height != s || x.width != s {
            return Err(DrueError::contract(format!(
                "encoder expects 3×{s}×{s} inputs, got {}×{}×{}",
                x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Pixels are shifted to `[-0.5, 0.5]` before the stem. Uncentred
    /// inputs left some seeds stuck at chance from the first epoch.
    fn centered(x: &FeatureMap<T>) -> FeatureMap<T> {
        let half = T::lit(0.5);
        x.map(|v| v - half)
    }

    fn stem_forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.config
            .activation
            .forward(&self.stem.forward(&Self::centered(x)))
    }

    /// Applies the single stage `f_i` (1-based index).
    pub fn stage(&self, index: usize, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.blocks[index - 1].forward(x)
    }

    /// `F_{l-1}(x)` and `F_l(x) = f_l(F_{l-1}(x))`.
    pub fn forward_features(&self, x: &FeatureMap<T>) -> Result<FeaturePair<T>> {
        self.check_input(x)?;
        let mut h = self.stem_forward(x);
        let l = self.blocks.len();
        for block in &self.blocks[..l - 1] {
            h = block.forward(&h);
        }
        let m0 = self.blocks[l - 1].forward(&h);
        Ok(FeaturePair { m1: h, m0 })
    }

    /// Full extractor output `F_l(x)` computed without splitting at the tap.
    pub fn forward_full(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        Ok(self
            .blocks
            .iter()
            .fold(self.stem_forward(x), |h, b| b.forward(&h)))
    }

    /// Forward pass keeping caches; dropout (if given) is applied after each stage.
    pub fn forward_train<R: Rng>(
        &self,
        x: &FeatureMap<T>,
        mut dropout: Option<StageDropout<'_, R>>,
    ) -> Result<(FeaturePair<T>, EncoderCache<T>)> {
        self.check_input(x)?;
        let (stem_pre, stem_cache) = self.stem.forward_train(&Self::centered(x));
        let mut h = self.config.activation.forward(&stem_pre);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut m1 = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let (mut out, mut cache) = block.forward_train(&h);
            if let Some(d) = dropout.as_mut() {
                if d.rate > 0.0 {
                    let mask = dropout_mask::<T>(out.len(), d.rate, d.rng);
                    out.data
                        .iter_mut()
                        .zip(&mask)
                        .for_each(|(v, &m)| *v = *v * m);
                    cache.mask = Some(mask);
                }
            }
            if i + 2 == self.blocks.len() {
                m1 = Some(out.clone());
            }
            caches.push(cache);
            h = out;
        }
        let pair = FeaturePair {
            m1: m1.expect("at least two stages"),
            m0: h,
        };
        Ok((
            pair,
            EncoderCache {
                stem: stem_cache,
                stem_pre,
                blocks: caches,
            },
        ))
    }

    /// Back-propagates a gradient on `m0` into the trainable encoder parameters.
    pub fn backward(&self, cache: &EncoderCache<T>, grad_m0: &FeatureMap<T>, grads: &mut Grads<T>) {
        let mut g = grad_m0.clone();
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = block
                .backward(bc, &g, grads, true)
                .expect("input grad requested");
        }
        let g_stem = self.config.activation.backward(&cache.stem_pre, &g);
        self.stem.backward(&cache.stem, &g_stem, grads, false);
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            stem: self.stem.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
        }
    }
}

impl<T> HasParams<T> for Encoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

/// Row-wise softmax over a `classes × batch` logit matrix, returned per sample.
pub fn softmax_columns<T: Scalar>(logits: &[T], classes: usize, batch: usize) -> Vec<Vec<f64>> {
    (0..batch)
        .map(|n| {
            let col: Vec<f64> = (0..classes)
                .map(|k| logits[k * batch + n].as_f64())
                .collect();
            softmax(&col)
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// The predictive model: encoder `F` plus pooled linear head `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config, &mut rng)?;
        let width = *config.channels.last().expect("validated");
        let head = Linear::new("head.linear", width, config.num_classes, &mut rng);
        Ok(Self { encoder, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn forward_features(&self, x: &FeatureMap<T>) -> Result<FeaturePair<T>> {
        self.encoder.forward_features(x)
    }

    /// Logits (`classes × batch`) from pooled `m0`.
    pub fn logits_from_m0(&self, m0: &FeatureMap<T>) -> Vec<T> {
        self.head.forward(&global_avg_pool(m0), m0.batch)
    }

    /// Class-probability vectors, one per batch entry.
    pub fn predict(&self, x: &FeatureMap<T>) -> Result<Vec<Vec<f64>>> {
        let pair = self.forward_features(x)?;
        let logits = self.logits_from_m0(&pair.m0);
        Ok(softmax_columns(&logits, self.config().num_classes, x.batch))
    }

    /// `n_passes` stochastic passes with stage dropout active. Returns
    /// `passes[p][n]`, the probability vector of sample `n` on pass `p`.
    pub fn predict_mc(
        &self,
        x: &FeatureMap<T>,
        n_passes: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        if n_passes == 0 {
            return Err(DrueError::config("n_passes must be at least 1"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(DrueError::config(format!(
                "dropout_rate {dropout_rate} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_passes)
            .map(|_| {
                let dropout = Some(StageDropout {
                    rate: dropout_rate,
                    rng: &mut rng,
                });
                let (pair, _) = self.encoder.forward_train(x, dropout)?;
                let logits = self.logits_from_m0(&pair.m0);
                Ok(softmax_columns(&logits, self.config().num_classes, x.batch))
            })
            .collect()
    }

    /// Cross-entropy training step helper: returns mean loss and accumulates
    /// gradients for every trainable parameter.
    pub fn loss_and_grads<R: Rng>(
        &self,
        x: &FeatureMap<T>,
        labels: &[usize],
        dropout: Option<StageDropout<'_, R>>,
        grads: &mut Grads<T>,
    ) -> Result<f64> {
        let (pair, cache) = self.encoder.forward_train(x, dropout)?;
        let pooled = global_avg_pool(&pair.m0);
        let batch = x.batch;
        let logits = self.head.forward(&pooled, batch);
        let (loss, dlogits) = cross_entropy(&logits, labels, self.config().num_classes);
        let dpooled = self.head.backward(&pooled, &dlogits, batch, grads);
        let dm0 = global_avg_pool_backward(&dpooled, pair.m0.shape());
        self.encoder.backward(&cache, &dm0, grads);
        Ok(loss)
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            encoder: self.encoder.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T> HasParams<T> for Classifier<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

/// Mean softmax cross-entropy over a `classes × batch` logit matrix and the
/// gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let batch = labels.len();
    let probs = softmax_columns(logits, classes, batch);
    let mut grad = vec![T::zero(); classes * batch];
    let mut loss = 0.0;
    for (n, (p, &y)) in probs.iter().zip(labels).enumerate() {
        loss -= p[y].max(1e-300).ln();
        for k in 0..classes {
            let target = if k == y { 1.0 } else { 0.0 };
            grad[k * batch + n] = T::lit((p[k] - target) / batch as f64);
        }
    }
    (loss / batch as f64, grad)
}

//! Staged training: the classifier first, then `G1` on penultimate features,
//! then the `g0` head on final features with the shared tail frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{cross_entropy, Classifier, EncoderConfig, StageDropout};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::datasets::{stack_images, DatasetSplit, Sample};
use crate::decoders::{mirror_architecture, DecoderConfig, DecoderPair};
use crate::error::{DrueError, Result};
use crate::nn::{Adam, FeatureMap, Grads, HasParams, Param};

pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const G1_CKPT: &str = "g1.ckpt";
pub const G0_CKPT: &str = "g0.ckpt";
pub const HISTORY_FILE: &str = "history.json";

/// Inference chunk size for validation passes and feature caching.
const EVAL_CHUNK: usize = 64;
/// Epochs of feature matching `g0(m0) ≈ m1` before the reconstruction loss.
const HEAD_WARMUP_EPOCHS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classifier,
    G1,
    G0,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Classifier, Stage::G1, Stage::G0];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::G1 => "g1",
            Stage::G0 => "g0",
        }
    }

    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Stage::Classifier => CLASSIFIER_CKPT,
            Stage::G1 => G1_CKPT,
            Stage::G0 => G0_CKPT,
        }
    }

    /// The CLI invocation that produces this stage.
    pub fn command(self) -> String {
        format!("train --stage {}", self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = DrueError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| DrueError::config(format!("unknown stage `{s}`")))
    }
}

/// Optimiser and early-stopping settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DrueError::config("learning_rate must be positive"));
        }
        if self.patience < 1 {
            return Err(DrueError::config("patience must be at least 1"));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(DrueError::config(
                "batch_size and max_epochs must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss; returns true on a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistory {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Classifier, decoder pair and training metadata for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub classifier: Classifier<f32>,
    pub decoders: Option<DecoderPair<f32>>,
    pub completed: BTreeSet<Stage>,
    pub history: Vec<StageHistory>,
    pub train_configs: BTreeMap<Stage, TrainConfig>,
    /// Whether the shared tail was frozen while training `g0`.
    pub g0_freeze: Option<bool>,
    /// Max absolute drift of the shared tail during the `g0` stage.
    pub freeze_report: Option<f64>,
}

impl CheckpointBundle {
    pub fn encoder_config(&self) -> &EncoderConfig {
        self.classifier.config()
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    /// Errors with the command that produces `stage` when it has not run.
    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.has(stage) {
            Ok(())
        } else {
            Err(DrueError::missing(stage.checkpoint_file(), stage.command()))
        }
    }

    pub fn decoders(&self) -> Result<&DecoderPair<f32>> {
        self.require(Stage::G1)?;
        Ok(self.decoders.as_ref().expect("g1 stage implies decoders"))
    }

    fn set_history(&mut self, h: StageHistory) {
        self.history.retain(|x| x.stage != h.stage);
        self.history.push(h);
        self.history.sort_by_key(|x| x.stage);
    }

    /// Writes the checkpoint of every completed stage plus `history.json`,
    /// removing checkpoints of stages invalidated by a retrain.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DrueError::io(dir, e))?;
        let hash = self.encoder_config().arch_hash();
        for stage in Stage::ALL {
            let path = dir.join(stage.checkpoint_file());
            if !self.has(stage) {
                if path.exists() {
                    fs::remove_file(&path).map_err(|e| DrueError::io(&path, e))?;
                }
                continue;
            }
            let cfg = self.train_configs.get(&stage);
            match stage {
                Stage::Classifier => write_checkpoint(
                    &path,
                    &hash,
                    stage.name(),
                    &self.classifier.params(),
                    serde_json::json!({
                        "encoder": self.encoder_config(),
                        "train": cfg,
                    }),
                )?,
                Stage::G1 => {
                    let pair = self.decoders()?;
                    write_checkpoint(
                        &path,
                        &hash,
                        stage.name(),
                        &pair.shared_tail.params(),
                        serde_json::json!({
                            "decoder": pair.config,
                            "shared_manifest": pair.shared_manifest(),
                            "train": cfg,
                        }),
                    )?
                }
                Stage::G0 => {
                    let pair = self.decoders.as_ref().expect("g0 stage implies decoders");
                    let mut params = pair.g0_head.params();
                    params.extend(pair.shared_tail.params());
                    write_checkpoint(
                        &path,
                        &hash,
                        stage.name(),
                        &params,
                        serde_json::json!({
                            "decoder": pair.config,
                            "shared_manifest": pair.shared_manifest(),
                            "head": pair.head_names(),
                            "freeze": self.g0_freeze,
                            "freeze_report": self.freeze_report,
                            "train": cfg,
                        }),
                    )?
                }
            }
        }
        let history = serde_json::to_string_pretty(&self.history)?;
        let path = dir.join(HISTORY_FILE);
        fs::write(&path, history + "\n").map_err(|e| DrueError::io(&path, e))
    }

    /// Loads whatever stages exist under `dir`. The classifier checkpoint is
    /// required; architecture hashes must match `encoder`.
    pub fn load(dir: &Path, encoder: &EncoderConfig) -> Result<Self> {
        let hash = encoder.arch_hash();
        let cpath = dir.join(CLASSIFIER_CKPT);
        if !cpath.exists() {
            return Err(DrueError::missing(
                cpath.display().to_string(),
                Stage::Classifier.command(),
            ));
        }
        let mut classifier = Classifier::<f32>::new(encoder, 0)?;
        let cfile = read_checkpoint(&cpath)?;
        cfile.expect_arch(&cpath, &hash)?;
        cfile.load_into(&cpath, classifier.params_mut())?;
        let mut bundle = CheckpointBundle {
            classifier,
            decoders: None,
            completed: BTreeSet::from([Stage::Classifier]),
            history: Vec::new(),
            train_configs: BTreeMap::new(),
            g0_freeze: None,
            freeze_report: None,
        };
        let read_train = |meta: &serde_json::Value| -> Option<TrainConfig> {
            serde_json::from_value(meta.get("train")?.clone()).ok()
        };
        if let Some(t) = read_train(&cfile.header.metadata) {
            bundle.train_configs.insert(Stage::Classifier, t);
        }
        let mut pair = DecoderPair::<f32>::new(mirror_architecture(encoder), 0);
        let gpath = dir.join(G1_CKPT);
        if gpath.exists() {
            let f = read_checkpoint(&gpath)?;
            f.expect_arch(&gpath, &hash)?;
            f.load_into(&gpath, pair.shared_tail.params_mut())?;
            bundle.completed.insert(Stage::G1);
            if let Some(t) = read_train(&f.header.metadata) {
                bundle.train_configs.insert(Stage::G1, t);
            }
        }
        let zpath = dir.join(G0_CKPT);
        if zpath.exists() {
            let f = read_checkpoint(&zpath)?;
            f.expect_arch(&zpath, &hash)?;
            f.load_into(&zpath, pair.params_mut())?;
            bundle.completed.insert(Stage::G0);
            let meta = &f.header.metadata;
            bundle.g0_freeze = meta.get("freeze").and_then(|v| v.as_bool());
            bundle.freeze_report = meta.get("freeze_report").and_then(|v| v.as_f64());
            if let Some(t) = read_train(meta) {
                bundle.train_configs.insert(Stage::G0, t);
            }
        }
        if bundle.has(Stage::G1) || bundle.has(Stage::G0) {
            bundle.decoders = Some(pair);
        }
        let hpath = dir.join(HISTORY_FILE);
        if hpath.exists() {
            let text = fs::read_to_string(&hpath).map_err(|e| DrueError::io(&hpath, e))?;
            bundle.history = serde_json::from_str(&text)?;
        }
        Ok(bundle)
    }
}

/// Mean squared error over every element and its gradient.
pub fn mse_loss(pred: &FeatureMap<f32>, target: &FeatureMap<f32>) -> (f64, FeatureMap<f32>) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.len() as f64;
    let loss = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = f64::from(p) - f64::from(t);
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = (2.0 / n) as f32;
    (loss, pred.zip_map(target, |p, t| scale * (p - t)))
}

/// One stage's mutable training state.
trait StageTrainer {
    type Snapshot;
    fn train_batch(&mut self, indices: &[usize]) -> Result<f64>;
    fn val_loss(&self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stage as u64 + 1)
}

fn run_stage<S: StageTrainer>(
    stage: Stage,
    cfg: &TrainConfig,
    n_train: usize,
    trainer: &mut S,
) -> Result<StageHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));
    let mut early = EarlyStopping::new(cfg.patience);
    let mut best = trainer.snapshot();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = trainer.train_batch(batch)?;
            if !loss.is_finite() {
                return Err(DrueError::Diverged {
                    stage: stage.to_string(),
                    epoch,
                    detail: format!("non-finite training loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
        }
        let val_loss = trainer.val_loss()?;
        if !val_loss.is_finite() {
            return Err(DrueError::Diverged {
                stage: stage.to_string(),
                epoch,
                detail: format!("non-finite validation loss {val_loss}"),
            });
        }
        let train_loss = total / n_train as f64;
        log::info!("{stage} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if early.observe(epoch, val_loss) {
            best = trainer.snapshot();
        }
        if early.should_stop() {
            break;
        }
    }
    trainer.restore(best);
    let stopped_early = epochs.len() < cfg.max_epochs;
    Ok(StageHistory {
        stage,
        epochs,
        best_epoch: early.best_epoch(),
        stopped_early,
    })
}

fn require_nonempty(split: &DatasetSplit) -> Result<()> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(DrueError::config(
            "training needs non-empty train and val sets",
        ));
    }
    Ok(())
}

fn stack(samples: &[Sample]) -> FeatureMap<f32> {
    stack_images(&samples.iter().collect::<Vec<_>>())
}

fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| usize::from(s.label)).collect()
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn values_of(params: Vec<&Param<f32>>) -> Vec<Vec<f32>> {
    params.into_iter().map(|p| p.value.clone()).collect()
}

fn restore_values(params: Vec<&mut Param<f32>>, values: Vec<Vec<f32>>) {
    for (p, v) in params.into_iter().zip(values) {
        p.value = v;
    }
}

struct ClassifierTrainer<'a> {
    model: &'a mut Classifier<f32>,
    adam: Adam<f32>,
    train_x: FeatureMap<f32>,
    train_y: Vec<usize>,
    val_x: FeatureMap<f32>,
    val_y: Vec<usize>,
    dropout_rng: ChaCha8Rng,
}

impl StageTrainer for ClassifierTrainer<'_> {
    type Snapshot = Vec<Vec<f32>>;

    fn train_batch(&mut self, indices: &[usize]) -> Result<f64> {
        let x = self.train_x.select_batch(indices);
        let y: Vec<usize> = indices.iter().map(|&i| self.train_y[i]).collect();
        let mut grads = Grads::new(self.model.param_names());
        let rate = self.model.config().dropout_rate;
        let dropout = (rate > 0.0).then_some(StageDropout {
            rate,
            rng: &mut self.dropout_rng,
        });
        let loss = self.model.loss_and_grads(&x, &y, dropout, &mut grads)?;
        self.adam.step(self.model.params_mut(), &grads);
        Ok(loss)
    }

    fn val_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for idx in chunks(self.val_y.len()) {
            let x = self.val_x.select_batch(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| self.val_y[i]).collect();
            let m0 = self.model.forward_features(&x)?.m0;
            let logits = self.model.logits_from_m0(&m0);
            let (loss, _) = cross_entropy(&logits, &y, self.model.config().num_classes);
            total += loss * idx.len() as f64;
        }
        Ok(total / self.val_y.len() as f64)
    }

    fn snapshot(&self) -> Self::Snapshot {
        values_of(self.model.params())
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        restore_values(self.model.params_mut(), snapshot);
    }
}

/// Trains a fresh classifier with cross-entropy and early stopping.
pub fn train_classifier(
    split: &DatasetSplit,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<CheckpointBundle> {
    cfg.validate()?;
    require_nonempty(split)?;
    let mut model = Classifier::<f32>::new(encoder, cfg.seed)?;
    let mut trainer = ClassifierTrainer {
        model: &mut model,
        adam: Adam::new(cfg.learning_rate),
        train_x: stack(&split.train),
        train_y: labels(&split.train),
        val_x: stack(&split.val),
        val_y: labels(&split.val),
        dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD50F),
    };
    let history = run_stage(Stage::Classifier, cfg, split.train.len(), &mut trainer)?;
    Ok(CheckpointBundle {
        classifier: model,
        decoders: None,
        completed: BTreeSet::from([Stage::Classifier]),
        history: vec![history],
        train_configs: BTreeMap::from([(Stage::Classifier, cfg.clone())]),
        g0_freeze: None,
        freeze_report: None,
    })
}

/// Encoder taps for a whole sample list, computed in inference chunks.
pub fn cache_features(
    model: &Classifier<f32>,
    images: &FeatureMap<f32>,
) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
    let mut m1 = Vec::new();
    let mut m0 = Vec::new();
    for idx in chunks(images.batch) {
        let pair = model.forward_features(&images.select_batch(&idx))?;
        m1.push(pair.m1);
        m0.push(pair.m0);
    }
    Ok((FeatureMap::concat_batch(&m1), FeatureMap::concat_batch(&m0)))
}

/// Which decoder path a reconstruction trainer optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecoderPath {
    /// `G1(m1)`.
    Penultimate,
    /// `G1(g0(m0))`.
    Final,
}

struct DecoderTrainer<'a> {
    pair: &'a mut DecoderPair<f32>,
    path: DecoderPath,
    trainable: Vec<String>,
    adam: Adam<f32>,
    train_in: FeatureMap<f32>,
    train_x: FeatureMap<f32>,
    val_in: FeatureMap<f32>,
    val_x: FeatureMap<f32>,
}

impl DecoderTrainer<'_> {
    fn reconstruct(&self, input: &FeatureMap<f32>) -> FeatureMap<f32> {
        match self.path {
            DecoderPath::Penultimate => self.pair.shared_tail.forward(input),
            DecoderPath::Final => self
                .pair
                .shared_tail
                .forward(&self.pair.g0_head.forward(input)),
        }
    }
}

impl StageTrainer for DecoderTrainer<'_> {
    type Snapshot = Vec<Vec<f32>>;

    fn train_batch(&mut self, indices: &[usize]) -> Result<f64> {
        let input = self.train_in.select_batch(indices);
        let target = self.train_x.select_batch(indices);
        let mut grads = Grads::new(self.trainable.iter().cloned());
        let loss = match self.path {
            DecoderPath::Penultimate => {
                let (out, cache) = self.pair.shared_tail.forward_train(&input);
                let (loss, g) = mse_loss(&out, &target);
                self.pair
                    .shared_tail
                    .backward(&cache, &g, &mut grads, false);
                loss
            }
            DecoderPath::Final => {
                let (z, head_cache) = self.pair.g0_head.forward_train(&input);
                let (out, tail_cache) = self.pair.shared_tail.forward_train(&z);
                let (loss, g) = mse_loss(&out, &target);
                let gz = self
                    .pair
                    .shared_tail
                    .backward(&tail_cache, &g, &mut grads, true)
                    .expect("input grad requested");
                self.pair
                    .g0_head
                    .backward(&head_cache, &gz, &mut grads, false);
                loss
            }
        };
        self.adam.step(self.pair.params_mut(), &grads);
        Ok(loss)
    }

    fn val_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for idx in chunks(self.val_x.batch) {
            let out = self.reconstruct(&self.val_in.select_batch(&idx));
            let (loss, _) = mse_loss(&out, &self.val_x.select_batch(&idx));
            total += loss * idx.len() as f64;
        }
        Ok(total / self.val_x.batch as f64)
    }

    fn snapshot(&self) -> Self::Snapshot {
        values_of(self.pair.params())
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        restore_values(self.pair.params_mut(), snapshot);
    }
}

fn decoder_seed(seed: u64, stage: Stage) -> u64 {
    stage_seed(seed, stage) ^ 0x00DE_C0DE
}

/// Trains `G1` on `m1` with the encoder frozen. Any earlier decoder state,
/// including a trained `g0` head, is discarded.
pub fn train_g1(
    bundle: CheckpointBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<CheckpointBundle> {
    let config = mirror_architecture(bundle.encoder_config());
    train_g1_with(bundle, split, cfg, config)
}

/// [`train_g1`] with an explicit decoder layout, e.g. a smooth-activation
/// variant. Bundles with a non-mirrored layout are not loadable from disk.
pub fn train_g1_with(
    mut bundle: CheckpointBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    config: DecoderConfig,
) -> Result<CheckpointBundle> {
    cfg.validate()?;
    require_nonempty(split)?;
    bundle.require(Stage::Classifier)?;
    let expected = mirror_architecture(bundle.encoder_config());
    if config.m1_shape != expected.m1_shape
        || config.m0_shape != expected.m0_shape
        || config.image_size != expected.image_size
    {
        return Err(DrueError::contract(
            "decoder layout does not match the encoder feature shapes",
        ));
    }
    let mut pair = DecoderPair::new(config, decoder_seed(cfg.seed, Stage::G1));
    let train_x = stack(&split.train);
    let val_x = stack(&split.val);
    let (train_in, _) = cache_features(&bundle.classifier, &train_x)?;
    let (val_in, _) = cache_features(&bundle.classifier, &val_x)?;
    let mut trainer = DecoderTrainer {
        trainable: pair.shared_manifest(),
        pair: &mut pair,
        path: DecoderPath::Penultimate,
        adam: Adam::new(cfg.learning_rate),
        train_in,
        train_x,
        val_in,
        val_x,
    };
    let history = run_stage(Stage::G1, cfg, split.train.len(), &mut trainer)?;
    bundle.decoders = Some(pair);
    bundle.completed.insert(Stage::G1);
    bundle.completed.remove(&Stage::G0);
    bundle.history.retain(|h| h.stage != Stage::G0);
    bundle.g0_freeze = None;
    bundle.freeze_report = None;
    bundle.set_history(history);
    bundle.train_configs.insert(Stage::G1, cfg.clone());
    Ok(bundle)
}

/// Fits the head to `m1` directly with a feature MSE. The reconstruction
/// loss alone can start with every hidden unit of the tail switched off by
/// the random head, in which case the head never receives a gradient.
/// Returns the last epoch's mean loss.
fn warm_up_head(
    pair: &mut DecoderPair<f32>,
    m0: &FeatureMap<f32>,
    m1: &FeatureMap<f32>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, Stage::G0) ^ 0x3A5E);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..m0.batch).collect();
    let mut last = f64::NAN;
    for _ in 0..HEAD_WARMUP_EPOCHS {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Grads::new(pair.head_names());
            let (z, cache) = pair.g0_head.forward_train(&m0.select_batch(batch));
            let (loss, g) = mse_loss(&z, &m1.select_batch(batch));
            if !loss.is_finite() {
                return Err(DrueError::Diverged {
                    stage: Stage::G0.to_string(),
                    epoch: 0,
                    detail: format!("non-finite head warm-up loss {loss}"),
                });
            }
            pair.g0_head.backward(&cache, &g, &mut grads, false);
            adam.step(pair.g0_head.params_mut(), &grads);
            total += loss * batch.len() as f64;
        }
        last = total / m0.batch as f64;
    }
    Ok(last)
}

/// Trains the `g0` head on `m0`. With `freeze` the shared tail keeps its
/// `G1` values; without it every decoder parameter is optimised, starting
/// from the `G1` tail if one exists and from a fresh decoder otherwise.
pub fn train_g0(
    mut bundle: CheckpointBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    freeze: bool,
) -> Result<CheckpointBundle> {
    cfg.validate()?;
    require_nonempty(split)?;
    bundle.require(Stage::Classifier)?;
    if freeze {
        // The frozen tail is G1's.
        bundle.require(Stage::G1)?;
    }
    let seed = decoder_seed(cfg.seed, Stage::G0);
    let mut pair = match bundle.decoders.take() {
        Some(mut p) => {
            p.reset_head(seed);
            p
        }
        None => DecoderPair::new(mirror_architecture(bundle.encoder_config()), seed),
    };
    let tail_before = values_of(pair.shared_tail.params());
    let mut trainable = pair.head_names();
    if !freeze {
        trainable.extend(pair.shared_manifest());
    }
    let train_x = stack(&split.train);
    let val_x = stack(&split.val);
    let (train_m1, train_in) = cache_features(&bundle.classifier, &train_x)?;
    let (_, val_in) = cache_features(&bundle.classifier, &val_x)?;
    let probe: Vec<usize> = (0..train_in.batch.min(64)).collect();
    let factor = pair.calibrate_head(
        &train_in.select_batch(&probe),
        &train_m1.select_batch(&probe),
    )?;
    log::debug!("g0 head rescaled by {factor:.4}");
    let warm = warm_up_head(&mut pair, &train_in, &train_m1, cfg)?;
    log::debug!("g0 head feature loss after warm-up {warm:.6}");
    let mut trainer = DecoderTrainer {
        pair: &mut pair,
        path: DecoderPath::Final,
        trainable,
        adam: Adam::new(cfg.learning_rate),
        train_in,
        train_x,
        val_in,
        val_x,
    };
    let history = run_stage(Stage::G0, cfg, split.train.len(), &mut trainer)?;
    let drift = pair
        .shared_tail
        .params()
        .iter()
        .zip(&tail_before)
        .flat_map(|(p, before)| {
            p.value
                .iter()
                .zip(before)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        })
        .fold(0.0, f64::max);
    bundle.decoders = Some(pair);
    bundle.completed.insert(Stage::G0);
    bundle.g0_freeze = Some(freeze);
    bundle.freeze_report = Some(drift);
    bundle.set_history(history);
    bundle.train_configs.insert(Stage::G0, cfg.clone());
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Image;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            stem_channels: 4,
            channels: vec![4, 8],
            downsample: vec![true, true],
            ..EncoderConfig::default()
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            max_epochs: epochs,
            patience: 3,
            seed: 1,
        }
    }

    /// Two colour blobs; class decided by the blob's colour.
    fn blob_split(n: usize) -> DatasetSplit {
        let make = |i: usize, label: u8| {
            let mut data = Vec::with_capacity(32 * 32 * 3);
            let cx = 8.0 + (i % 5) as f32 * 3.0;
            for y in 0..32 {
                for x in 0..32 {
                    let inside = ((x as f32 - cx).powi(2) + (y as f32 - 16.0).powi(2)) < 36.0;
                    let c = match (inside, label) {
                        (false, _) => [0.2, 0.2, 0.2],
                        (true, 0) => [0.9, 0.1, 0.1],
                        (true, _) => [0.1, 0.1, 0.9],
                    };
                    data.extend(c);
                }
            }
            Sample {
                image: Image::new(32, 32, data),
                label,
                source: "blobs".into(),
                sample_id: format!("b{label}-{i}"),
            }
        };
        let part = |range: std::ops::Range<usize>| {
            range
                .flat_map(|i| [make(i, 0), make(i, 1)])
                .collect::<Vec<_>>()
        };
        DatasetSplit {
            train: part(0..n),
            val: part(n..n + 4),
            test: part(n + 4..n + 8),
            seed: 0,
        }
    }

    #[test]
    fn early_stopping_rule() {
        let mut es = EarlyStopping::new(1);
        assert!(es.observe(1, 1.0));
        assert!(!es.should_stop());
        assert!(!es.observe(2, 2.0));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 1);

        let mut es = EarlyStopping::new(2);
        for (e, v) in [(1, 3.0), (2, 2.0), (3, 2.5), (4, 1.0), (5, 1.5)] {
            es.observe(e, v);
            assert!(!es.should_stop());
        }
        es.observe(6, 1.0);
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 4);
    }

    #[test]
    fn mse_identity_and_gradient() {
        let a = FeatureMap::from_vec(3, 1, 1, 2, vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let (loss, g) = mse_loss(&a, &a);
        assert_eq!(loss, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
        let b = a.map(|v| v + 0.5);
        let (loss, g) = mse_loss(&a, &b);
        assert!((loss - 0.25).abs() < 1e-7);
        assert!(g.data.iter().all(|&v| (v + 1.0 / 6.0).abs() < 1e-6));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            patience: 0,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(cfg(1).validate().is_ok());
        assert_eq!("g0".parse::<Stage>().unwrap(), Stage::G0);
        assert!("g2".parse::<Stage>().is_err());
    }

    #[test]
    fn classifier_separates_blobs_and_is_deterministic() {
        let split = blob_split(12);
        let a = train_classifier(&split, &tiny_encoder(), &cfg(15)).unwrap();
        let probs = a.classifier.predict(&stack(&split.val)).unwrap();
        let correct = probs
            .iter()
            .zip(labels(&split.val))
            .filter(|(p, y)| usize::from(p[1] > p[0]) == *y)
            .count();
        assert_eq!(correct, split.val.len());
        let b = train_classifier(&split, &tiny_encoder(), &cfg(15)).unwrap();
        assert_eq!(a, b);
        let h = &a.history[0];
        let best = h
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(h.epochs[h.best_epoch - 1].val_loss, best);
    }

    #[test]
    fn decoder_stages_respect_their_parameter_sets() {
        let split = blob_split(6);
        let bundle = train_classifier(&split, &tiny_encoder(), &cfg(2)).unwrap();
        let encoder_before = bundle.classifier.clone();
        let g1 = train_g1(bundle, &split, &cfg(2)).unwrap();
        assert_eq!(g1.classifier, encoder_before);
        let tail_g1 = g1.decoders.as_ref().unwrap().shared_tail.clone();

        let frozen = train_g0(g1.clone(), &split, &cfg(2), true).unwrap();
        assert_eq!(frozen.classifier, encoder_before);
        assert_eq!(frozen.freeze_report, Some(0.0));
        let pair = frozen.decoders.as_ref().unwrap();
        assert_eq!(pair.shared_tail, tail_g1);
        let fresh_head =
            DecoderPair::<f32>::new(pair.config.clone(), decoder_seed(1, Stage::G0)).g0_head;
        assert_ne!(pair.g0_head, fresh_head);

        let free = train_g0(g1, &split, &cfg(2), false).unwrap();
        assert!(free.freeze_report.unwrap() > 0.0);
        assert_ne!(free.decoders.as_ref().unwrap().shared_tail, tail_g1);
    }

    #[test]
    fn frozen_g0_requires_g1() {
        let split = blob_split(4);
        let bundle = train_classifier(&split, &tiny_encoder(), &cfg(1)).unwrap();
        assert!(matches!(
            train_g0(bundle.clone(), &split, &cfg(1), true),
            Err(DrueError::MissingDependency { .. })
        ));
        let free = train_g0(bundle, &split, &cfg(1), false).unwrap();
        assert!(free.has(Stage::G0) && !free.has(Stage::G1));
    }

    #[test]
    fn g1_overfits_a_single_image() {
        let mut split = blob_split(1);
        let one = split.train[1].clone();
        split.train = vec![one.clone(); 8];
        split.val = vec![one];
        let bundle = train_classifier(&split, &tiny_encoder(), &cfg(1)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            max_epochs: 1500,
            patience: 1500,
            seed: 0,
        };
        let g1 = train_g1(bundle, &split, &cfg).unwrap();
        let last = g1.history.iter().find(|h| h.stage == Stage::G1).unwrap();
        let best = last
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "train loss {best}");
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let split = blob_split(4);
        let enc = tiny_encoder();
        let b = train_classifier(&split, &enc, &cfg(1)).unwrap();
        let b = train_g1(b, &split, &cfg(1)).unwrap();
        let b = train_g0(b, &split, &cfg(1), true).unwrap();
        b.save(dir.path()).unwrap();
        let loaded = CheckpointBundle::load(dir.path(), &enc).unwrap();
        assert_eq!(loaded, b);

        // retraining g1 invalidates g0 on disk
        let b2 = train_g1(loaded, &split, &cfg(1)).unwrap();
        b2.save(dir.path()).unwrap();
        assert!(!dir.path().join(G0_CKPT).exists());
        let reloaded = CheckpointBundle::load(dir.path(), &enc).unwrap();
        assert!(matches!(
            reloaded.require(Stage::G0),
            Err(DrueError::MissingDependency { .. })
        ));

        let other = EncoderConfig {
            channels: vec![4, 16],
            ..enc
        };
        assert!(CheckpointBundle::load(dir.path(), &other).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            CheckpointBundle::load(empty.path(), &other),
            Err(DrueError::MissingDependency { .. })
        ));
    }
}

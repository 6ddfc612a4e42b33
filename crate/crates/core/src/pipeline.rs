//! Run-directory commands: prepare, train, score, evaluate, ablate, theory
//! and plot. Every artifact lives under the configured run directory:
//!
//! ```text
//! config.snapshot.toml
//! data/{train,val,test}/            PNGs + manifest.csv
//! data/ladder/<rung>/               one directory per rung
//! data/external/<name>/             ingested image folders
//! data/ladder.json                  rung order
//! seed-<s>/{classifier,g1,g0}.ckpt  plus history.json
//! scores/<dataset>_<method>_seed-<s>.csv
//! eval/report.json, eval/scores_seed-<s>.csv,
//! eval/distributions_seed-<s>.json, eval/classifier_metrics.json
//! ablation/ablation.json, ablation/ablation.csv
//! theory/probe_report.json
//! plots/*.png
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datasets::{
    build_ladder, generate_synthetic, load_external, load_samples, save_samples, DatasetSplit,
    Rung, Sample, ShiftLadder,
};
use crate::decoders::mirror_architecture;
use crate::error::{DrueError, Result};
use crate::evaluation::{
    classifier_metrics, distributions_from_records, run_ablation, run_ood_eval, write_scores,
    AblationTable, ClassifierMetrics, EvalReport, ScoreRecord, SeededBundle, ID_DATASET,
};
use crate::nn::Activation;
use crate::theory::{
    decoder_map, drue_vs_jvp_check, feature_gap, residual_scaling_exponent, taylor_residual,
    DrueJvpCheck, PerturbationProbe, Quadratic, ScalingFit,
};
use crate::training::{
    train_classifier, train_g0, train_g1, train_g1_with, CheckpointBundle, Stage,
};
use crate::uncertainty::{score_samples, UncertaintyMethod};

pub const SNAPSHOT_FILE: &str = "config.snapshot.toml";
pub const LOCK_FILE: &str = ".lock";
const PREPARE_STAMP: &str = "prepared.json";
const LADDER_INDEX: &str = "ladder.json";
/// Seed mixed into the extra decoder of ablation row 0.
const ABLATION_SEED: u64 = 0xAB1A;

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_dir(&self, part: &str) -> PathBuf {
        self.data().join(part)
    }

    pub fn rung_dir(&self, rung: &str) -> PathBuf {
        self.data().join("ladder").join(rung)
    }

    pub fn external_dir(&self, name: &str) -> PathBuf {
        self.data().join("external").join(name)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }

    pub fn eval_scores(&self, seed: u64) -> PathBuf {
        self.eval_dir().join(format!("scores_seed-{seed}.csv"))
    }

    pub fn distributions(&self, seed: u64) -> PathBuf {
        self.eval_dir()
            .join(format!("distributions_seed-{seed}.json"))
    }

    pub fn classifier_metrics(&self) -> PathBuf {
        self.eval_dir().join("classifier_metrics.json")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn probe_report(&self) -> PathBuf {
        self.root.join("theory").join("probe_report.json")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| DrueError::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(DrueError::Locked(root.to_path_buf()))
            }
            Err(e) => Err(DrueError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Which stages `train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Only(Stage),
}

impl std::str::FromStr for StageSelection {
    type Err = DrueError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(StageSelection::All)
        } else {
            s.parse().map(StageSelection::Only)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LadderEntry {
    name: String,
    kind: Option<String>,
    severity: f64,
    external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub dataset_hash: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub rungs: Vec<String>,
    pub external_warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub stages: Vec<String>,
    pub freeze_report: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCheck {
    pub z: f64,
    pub dz: f64,
    pub scale: f64,
    pub residual: f64,
    /// `s·dz² / (2·z·dz + s·dz²)`.
    pub closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProbe {
    pub sample_id: String,
    pub fit: ScalingFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGap {
    pub sample_id: String,
    pub points: Vec<DrueJvpCheck>,
    pub monotone: bool,
}

/// Gap check of one seed over the whole probe batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub seed: u64,
    pub sample_ids: Vec<String>,
    pub points: Vec<DrueJvpCheck>,
    /// Relative gap strictly decreasing as the scale shrinks.
    pub monotone: bool,
    /// The same check on single images. With ReLU decoders the difference
    /// of two L1 norms can stall or tick up where kink crossings cancel, so
    /// these are reported only.
    pub per_sample: Vec<SampleGap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub scales: Vec<f64>,
    pub quadratic: QuadraticCheck,
    /// Slope fits on a `G1` retrained with SiLU activations (seed of the
    /// first configured run).
    pub smooth_decoder: Vec<SampleProbe>,
    pub smooth_slope_range: Option<(f64, f64)>,
    /// Slope fits on the default ReLU `G1`; reported, not gated.
    pub default_decoder: Vec<SampleProbe>,
    pub gap_checks: Vec<GapCheck>,
}

/// Row-major ablation table rendered as CSV.
fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from(
        "row,name,decoder_tap,freeze,score,auc_mean,auc_std,aupr_mean,aupr_std,max_freeze_drift\n",
    );
    for r in &table.rows {
        let drift = r.freeze_report.iter().copied().fold(0.0, f64::max);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.row,
            r.name,
            r.decoder_tap,
            r.freeze,
            r.score,
            r.auc.mean,
            r.auc.std,
            r.aupr.mean,
            r.aupr.std,
            drift
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DrueError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| DrueError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DrueError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn hex_sha256(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Runs `f` once per seed on scoped threads and returns results in seed order.
fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || f(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// A validated configuration bound to its run directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub run: RunDir,
    config_hash: String,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        let run = RunDir::new(config.paths.run_dir.clone());
        Ok(Self {
            config,
            run,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Takes the lock and records the configuration in use.
    fn begin(&self) -> Result<RunLock> {
        let lock = RunLock::acquire(&self.run.root)?;
        write_text(&self.run.root.join(SNAPSHOT_FILE), &self.config.to_toml()?)?;
        Ok(lock)
    }

    fn dataset_hash(&self) -> Result<String> {
        let text = toml::to_string(&self.config.dataset)
            .map_err(|e| DrueError::config(format!("cannot serialize dataset section: {e}")))?;
        Ok(hex_sha256(text.as_bytes()))
    }

    fn require_prepared(&self) -> Result<()> {
        let stamp = self.run.data().join(PREPARE_STAMP);
        if !stamp.exists() {
            return Err(DrueError::missing(stamp.display().to_string(), "prepare"));
        }
        let summary: PrepareSummary = read_json(&stamp)?;
        if summary.dataset_hash != self.dataset_hash()? {
            return Err(DrueError::missing(
                "data prepared with the current dataset section".to_string(),
                "prepare",
            ));
        }
        Ok(())
    }

    // ---- prepare ----

    pub fn prepare(&self) -> Result<PrepareSummary> {
        let _lock = self.begin()?;
        let ds = &self.config.dataset;
        let data = self.run.data();
        if data.exists() {
            fs::remove_dir_all(&data).map_err(|e| DrueError::io(&data, e))?;
        }
        let split = generate_synthetic(ds.n_per_class, ds.image_size, ds.seed)?;
        for (part, samples) in [
            ("train", &split.train),
            ("val", &split.val),
            ("test", &split.test),
        ] {
            save_samples(&self.run.split_dir(part), samples)?;
        }
        let ladder = build_ladder(
            &split.test,
            &ds.ladder_kinds,
            &ds.ladder_severities,
            ds.seed,
        )?;
        let mut index = Vec::new();
        for rung in &ladder.rungs {
            save_samples(&self.run.rung_dir(&rung.name), &rung.samples)?;
            index.push(LadderEntry {
                name: rung.name.clone(),
                kind: rung.kind.map(|k| k.to_string()),
                severity: rung.severity,
                external: false,
            });
        }
        let mut warnings = Vec::new();
        for dir in &ds.external {
            let load = load_external(dir, ds.image_size)?;
            let name = load.samples[0].source.clone();
            if index.iter().any(|e| e.name == name) || name == ID_DATASET {
                return Err(DrueError::config(format!(
                    "external dataset name `{name}` is already in use"
                )));
            }
            warnings.extend(
                load.warnings
                    .iter()
                    .map(|w| format!("{}: {}", w.path.display(), w.reason)),
            );
            save_samples(&self.run.external_dir(&name), &load.samples)?;
            index.push(LadderEntry {
                name,
                kind: None,
                severity: 1.0,
                external: true,
            });
        }
        write_json(&data.join(LADDER_INDEX), &index)?;
        let summary = PrepareSummary {
            dataset_hash: self.dataset_hash()?,
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
            rungs: index.iter().map(|e| e.name.clone()).collect(),
            external_warnings: warnings,
        };
        write_json(&data.join(PREPARE_STAMP), &summary)?;
        log::info!(
            "prepared {} / {} / {} samples and {} rungs",
            summary.train,
            summary.val,
            summary.test,
            summary.rungs.len()
        );
        Ok(summary)
    }

    pub fn load_split(&self) -> Result<DatasetSplit> {
        self.require_prepared()?;
        Ok(DatasetSplit {
            train: load_samples(&self.run.split_dir("train"))?,
            val: load_samples(&self.run.split_dir("val"))?,
            test: load_samples(&self.run.split_dir("test"))?,
            seed: self.config.dataset.seed,
        })
    }

    /// The corruption ladder followed by any external datasets.
    pub fn load_ladder(&self) -> Result<ShiftLadder> {
        self.require_prepared()?;
        let index: Vec<LadderEntry> = read_json(&self.run.data().join(LADDER_INDEX))?;
        let rungs = index
            .into_iter()
            .map(|e| {
                let dir = if e.external {
                    self.run.external_dir(&e.name)
                } else {
                    self.run.rung_dir(&e.name)
                };
                Ok(Rung {
                    samples: load_samples(&dir)?,
                    kind: e.kind.as_deref().map(str::parse).transpose()?,
                    name: e.name,
                    severity: e.severity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ShiftLadder { rungs })
    }

    /// Samples of a named dataset: `id_test`, `train`, `val`, a rung or an
    /// external folder.
    pub fn load_dataset(&self, name: &str) -> Result<Vec<Sample>> {
        match name {
            ID_DATASET | "test" => Ok(self.load_split()?.test),
            "train" | "val" => load_samples(&self.run.split_dir(name)),
            _ => {
                let ladder = self.load_ladder()?;
                match ladder.rungs.into_iter().find(|r| r.name == name) {
                    Some(r) => Ok(r.samples),
                    None => Err(DrueError::config(format!("unknown dataset `{name}`"))),
                }
            }
        }
    }

    // ---- train ----

    pub fn load_bundle(&self, seed: u64) -> Result<CheckpointBundle> {
        CheckpointBundle::load(&self.run.seed_dir(seed), &self.config.model)
    }

    fn train_seed(
        &self,
        split: &DatasetSplit,
        seed: u64,
        stages: StageSelection,
    ) -> Result<TrainSummary> {
        let t = &self.config.training;
        let dir = self.run.seed_dir(seed);
        let run: Vec<Stage> = match stages {
            StageSelection::All => Stage::ALL.to_vec(),
            StageSelection::Only(s) => vec![s],
        };
        let mut bundle: Option<CheckpointBundle> = None;
        for stage in &run {
            let current = match (stage, bundle.take()) {
                (Stage::Classifier, _) => None,
                (_, Some(b)) => Some(b),
                (_, None) => Some(self.load_bundle(seed)?),
            };
            let next = match stage {
                Stage::Classifier => {
                    train_classifier(split, &self.config.model, &t.classifier.train_config(seed))?
                }
                Stage::G1 => train_g1(current.expect("loaded"), split, &t.g1.train_config(seed))?,
                Stage::G0 => train_g0(
                    current.expect("loaded"),
                    split,
                    &t.g0.train_config(seed),
                    t.freeze,
                )?,
            };
            next.save(&dir)?;
            log::info!("seed {seed}: stage {} done", stage.name());
            bundle = Some(next);
        }
        let bundle = bundle.expect("at least one stage");
        Ok(TrainSummary {
            seed,
            stages: run.iter().map(|s| s.name().to_string()).collect(),
            freeze_report: bundle.freeze_report,
        })
    }

    pub fn train(&self, stages: StageSelection) -> Result<Vec<TrainSummary>> {
        let _lock = self.begin()?;
        let split = self.load_split()?;
        per_seed(&self.config.eval.seeds, |s| {
            self.train_seed(&split, s, stages)
        })
    }

    fn load_bundles(&self) -> Result<Vec<CheckpointBundle>> {
        self.config
            .eval
            .seeds
            .iter()
            .map(|&s| self.load_bundle(s))
            .collect()
    }

    // ---- score ----

    /// Scores one dataset with one method for every seed and writes
    /// `scores/<dataset>_<method>_seed-<s>.csv`.
    pub fn score(&self, method: &str, dataset: &str) -> Result<Vec<PathBuf>> {
        let _lock = self.begin()?;
        let e = &self.config.eval;
        let method = UncertaintyMethod::from_label(method, e.mc_passes, e.mc_rate)?;
        let bundles = self.load_bundles()?;
        for b in &bundles {
            method.check_bundle(b)?;
        }
        let samples = self.load_dataset(dataset)?;
        let label = method.label();
        let is_ood = !matches!(dataset, ID_DATASET | "test" | "train" | "val");
        let mut paths = Vec::new();
        for (b, &seed) in bundles.iter().zip(&e.seeds) {
            let scores = score_samples(b, &samples, &method, seed)?;
            let records: Vec<ScoreRecord> = samples
                .iter()
                .zip(scores)
                .map(|(s, score)| ScoreRecord {
                    sample_id: s.sample_id.clone(),
                    dataset: dataset.to_string(),
                    method: label.clone(),
                    score,
                    is_ood,
                })
                .collect();
            let dir = self.run.scores_dir();
            fs::create_dir_all(&dir).map_err(|e| DrueError::io(&dir, e))?;
            let path = dir.join(format!("{dataset}_{label}_seed-{seed}.csv"));
            write_scores(&path, &records)?;
            paths.push(path);
        }
        Ok(paths)
    }

    // ---- evaluate ----

    pub fn evaluate(&self) -> Result<EvalReport> {
        let _lock = self.begin()?;
        let split = self.load_split()?;
        let ladder = self.load_ladder()?;
        let bundles = self.load_bundles()?;
        let seeded: Vec<SeededBundle<'_>> = self
            .config
            .eval
            .seeds
            .iter()
            .zip(&bundles)
            .map(|(&seed, bundle)| SeededBundle { seed, bundle })
            .collect();
        let methods = self.config.methods()?;
        let out = run_ood_eval(&seeded, &ladder, &methods, &split.test, &self.config_hash)?;
        for e in &out.report.errors {
            log::warn!("method {} skipped: {}", e.method, e.message);
        }
        let dir = self.run.eval_dir();
        fs::create_dir_all(&dir).map_err(|e| DrueError::io(&dir, e))?;
        for (seed, records) in &out.scores {
            write_scores(&self.run.eval_scores(*seed), records)?;
            let dist = distributions_from_records(records, self.config.eval.bins)?;
            write_json(&self.run.distributions(*seed), &dist)?;
        }
        let mut metrics: BTreeMap<String, ClassifierMetrics> = BTreeMap::new();
        for s in &seeded {
            metrics.insert(
                format!("seed-{}", s.seed),
                classifier_metrics(s.bundle, &split.test)?,
            );
        }
        write_json(&self.run.classifier_metrics(), &metrics)?;
        write_text(&self.run.report(), &out.report.to_json()?)?;
        Ok(out.report)
    }

    pub fn read_report(&self) -> Result<EvalReport> {
        let path = self.run.report();
        if !path.exists() {
            return Err(DrueError::missing(path.display().to_string(), "evaluate"));
        }
        read_json(&path)
    }

    // ---- ablate ----

    pub fn ablate(&self) -> Result<AblationTable> {
        let _lock = self.begin()?;
        let split = self.load_split()?;
        let ladder = self.load_ladder()?;
        let bundles = self.load_bundles()?;
        let seeded: Vec<SeededBundle<'_>> = self
            .config
            .eval
            .seeds
            .iter()
            .zip(&bundles)
            .map(|(&seed, bundle)| SeededBundle { seed, bundle })
            .collect();
        let g0 = self.config.training.g0.train_config(ABLATION_SEED);
        let table = run_ablation(&split, &ladder, &seeded, &g0)?;
        write_json(&self.run.ablation_dir().join("ablation.json"), &table)?;
        write_text(
            &self.run.ablation_dir().join("ablation.csv"),
            &ablation_csv(&table),
        )?;
        Ok(table)
    }

    // ---- theory ----

    /// Taylor checks on the quadratic toy, on a SiLU variant of `G1` and on
    /// the trained decoders. `scales` overrides `eval.theory_scales`.
    pub fn theory(&self, scales: Option<Vec<f64>>) -> Result<ProbeReport> {
        let _lock = self.begin()?;
        let scales = scales.unwrap_or_else(|| self.config.eval.theory_scales.clone());
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(DrueError::config("scales must be positive"));
        }
        let split = self.load_split()?;
        let bundles = self.load_bundles()?;
        let probes: Vec<&Sample> = split
            .test
            .iter()
            .take(self.config.eval.theory_samples.max(1))
            .collect();
        let (z, dz, s) = (1.0, 1.0, 0.1);
        let quadratic = QuadraticCheck {
            z,
            dz,
            scale: s,
            residual: taylor_residual(&Quadratic { len: 1 }, &[z], &[dz], s)?,
            closed_form: s * dz * dz / (2.0 * z * dz + s * dz * dz),
        };
        let probe_fits =
            |bundle: &CheckpointBundle, source: &CheckpointBundle| -> Result<Vec<SampleProbe>> {
                let map = decoder_map(bundle)?;
                probes
                    .iter()
                    .map(|sample| {
                        let (z, dz) = feature_gap(source, sample)?;
                        let probe = PerturbationProbe {
                            z,
                            dz,
                            scales: scales.clone(),
                        };
                        Ok(SampleProbe {
                            sample_id: sample.sample_id.clone(),
                            fit: residual_scaling_exponent(&map, &probe)?,
                        })
                    })
                    .collect()
            };
        let first = &bundles[0];
        UncertaintyMethod::Drue.check_bundle(first)?;
        let smooth_layout =
            mirror_architecture(&self.config.model).with_activation(Activation::Silu);
        let mut smooth_cfg = self
            .config
            .training
            .g1
            .train_config(self.config.eval.seeds[0]);
        smooth_cfg.max_epochs = smooth_cfg.max_epochs.min(3);
        let mut base = first.clone();
        base.decoders = None;
        base.completed.retain(|&s| s == Stage::Classifier);
        let smooth = train_g1_with(base, &split, &smooth_cfg, smooth_layout)?;
        let smooth_decoder = probe_fits(&smooth, first)?;
        let slopes: Vec<f64> = smooth_decoder.iter().filter_map(|p| p.fit.slope).collect();
        let smooth_slope_range = (!slopes.is_empty()).then(|| {
            (
                slopes.iter().copied().fold(f64::INFINITY, f64::min),
                slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        });
        let default_decoder = probe_fits(first, first)?;
        let mut check_scales = vec![1.0];
        check_scales.extend(scales.iter().copied().filter(|&s| s < 1.0));
        let strictly_falling = |points: &[DrueJvpCheck]| {
            points
                .windows(2)
                .all(|w| w[1].relative_gap < w[0].relative_gap)
        };
        let mut gap_checks = Vec::new();
        for (b, &seed) in bundles.iter().zip(&self.config.eval.seeds) {
            let points = drue_vs_jvp_check(b, &probes, &check_scales)?;
            let per_sample = probes
                .iter()
                .map(|sample| {
                    let points = drue_vs_jvp_check(b, &[*sample], &check_scales)?;
                    Ok(SampleGap {
                        sample_id: sample.sample_id.clone(),
                        monotone: strictly_falling(&points),
                        points,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            gap_checks.push(GapCheck {
                seed,
                sample_ids: probes.iter().map(|s| s.sample_id.clone()).collect(),
                monotone: strictly_falling(&points),
                points,
                per_sample,
            });
        }
        let report = ProbeReport {
            scales,
            quadratic,
            smooth_decoder,
            smooth_slope_range,
            default_decoder,
            gap_checks,
        };
        write_json(&self.run.probe_report(), &report)?;
        Ok(report)
    }

    // ---- plot ----

    pub fn plot(&self) -> Result<Vec<PathBuf>> {
        let _lock = self.begin()?;
        let report = self.read_report()?;
        crate::plots::render_all(self, &report)
    }
}

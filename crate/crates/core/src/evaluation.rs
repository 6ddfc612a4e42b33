//! OOD-detection metrics, multi-rung reports, the decoder ablation, classifier
//! sanity metrics and score-distribution export.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{stack_images, DatasetSplit, Sample, ShiftLadder};
use crate::error::{DrueError, Result};
use crate::training::{train_g0, CheckpointBundle, Stage, TrainConfig};
use crate::uncertainty::{score_samples, Tap, UncertaintyMethod};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Dataset name used for the in-distribution test scores.
pub const ID_DATASET: &str = "id_test";
pub const SCORE_HEADER: [&str; 5] = ["sample_id", "dataset", "method", "score", "is_ood"];

fn check_nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(DrueError::config(
            "metric needs non-empty ID and OOD score lists",
        ));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(DrueError::contract("NaN score"));
    }
    Ok(())
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half (Mann-Whitney statistic from mid-ranks).
pub fn auc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_ood += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0) / (n_id * n_ood))
}

/// Step-wise average precision with OOD as the positive class. Tied scores
/// form one threshold.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = ood_scores.len() as f64;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut group_tp = 0;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                group_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (group_tp as f64 / n_pos);
        }
        i = j;
    }
    Ok(ap)
}

/// One scored sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub dataset: String,
    pub method: String,
    pub score: f64,
    pub is_ood: bool,
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORE_HEADER)?;
    for r in records {
        w.write_record([
            r.sample_id.as_str(),
            r.dataset.as_str(),
            r.method.as_str(),
            &r.score.to_string(),
            if r.is_ood { "true" } else { "false" },
        ])?;
    }
    w.flush().map_err(|e| DrueError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let parse_err = |line: usize, message: String| DrueError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DrueError::missing(path.display().to_string(), "evaluate"),
            _ => DrueError::Csv(e),
        })?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if line == 1 {
            if row.iter().collect::<Vec<_>>() != SCORE_HEADER {
                return Err(parse_err(
                    1,
                    format!("expected header {}", SCORE_HEADER.join(",")),
                ));
            }
            continue;
        }
        if row.len() != 5 {
            return Err(parse_err(
                line,
                format!("expected 5 fields, found {}", row.len()),
            ));
        }
        let score: f64 = row[3]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid score `{}`", &row[3])))?;
        if !score.is_finite() {
            return Err(parse_err(line, "score is not finite".to_string()));
        }
        let is_ood = match &row[4] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => return Err(parse_err(line, format!("invalid is_ood `{other}`"))),
        };
        out.push(ScoreRecord {
            sample_id: row[0].to_string(),
            dataset: row[1].to_string(),
            method: row[2].to_string(),
            score,
            is_ood,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (n − 1 denominator) of per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl SeedStat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub dataset: String,
    pub method: String,
    pub auc: SeedStat,
    pub aupr: SeedStat,
    /// Median OOD score on this dataset, per seed.
    pub median_score: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungInfo {
    pub name: String,
    pub kind: Option<String>,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodError {
    pub method: String,
    pub message: String,
}

/// AUC/AUPR per (dataset, method) aggregated across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub conventions: BTreeMap<String, String>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub id_dataset: String,
    /// Median ID test score per method, per seed.
    pub id_median_score: BTreeMap<String, Vec<f64>>,
    pub datasets: Vec<RungInfo>,
    pub methods: Vec<String>,
    pub cells: Vec<ReportCell>,
    pub errors: Vec<MethodError>,
}

impl EvalReport {
    pub fn cell(&self, dataset: &str, method: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn metric_conventions() -> BTreeMap<String, String> {
    BTreeMap::from([
        (
            "auc".to_string(),
            "P(ood score > id score), ties count 1/2".to_string(),
        ),
        (
            "aupr".to_string(),
            "step-wise average precision, OOD positive, tied scores form one threshold".to_string(),
        ),
        (
            "score_orientation".to_string(),
            "higher = more uncertain".to_string(),
        ),
        (
            "std".to_string(),
            "sample standard deviation across seeds (n-1)".to_string(),
        ),
    ])
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(values: &[f64]) -> f64 {
    quantile(&sorted(values), 0.5)
}

/// A trained model for one seed.
pub struct SeededBundle<'a> {
    pub seed: u64,
    pub bundle: &'a CheckpointBundle,
}

pub struct EvalOutput {
    pub report: EvalReport,
    /// Score records per seed, in the same order as `report.seeds`.
    pub scores: Vec<(u64, Vec<ScoreRecord>)>,
}

fn records(
    samples: &[Sample],
    dataset: &str,
    method: &str,
    scores: &[f64],
    is_ood: bool,
) -> Vec<ScoreRecord> {
    samples
        .iter()
        .zip(scores)
        .map(|(s, &score)| ScoreRecord {
            sample_id: s.sample_id.clone(),
            dataset: dataset.to_string(),
            method: method.to_string(),
            score,
            is_ood,
        })
        .collect()
}

/// Scores the ID test set and every ladder rung with every method for every
/// seed. A method whose required stage is missing is reported in `errors`
/// while the others proceed.
pub fn run_ood_eval(
    bundles: &[SeededBundle<'_>],
    ladder: &ShiftLadder,
    methods: &[UncertaintyMethod],
    id_test: &[Sample],
    config_hash: &str,
) -> Result<EvalOutput> {
    if bundles.is_empty() {
        return Err(DrueError::config("evaluation needs at least one seed"));
    }
    if id_test.is_empty() {
        return Err(DrueError::config(
            "evaluation needs a non-empty ID test set",
        ));
    }
    let mut errors = Vec::new();
    let mut ok_methods = Vec::new();
    for m in methods {
        match bundles.iter().try_for_each(|b| m.check_bundle(b.bundle)) {
            Ok(()) => ok_methods.push(*m),
            Err(e) => errors.push(MethodError {
                method: m.label(),
                message: e.to_string(),
            }),
        }
    }
    // per seed → method → dataset → scores
    type Table = BTreeMap<String, BTreeMap<String, Vec<f64>>>;
    let score_seed = |b: &SeededBundle<'_>| -> Result<(Table, Vec<ScoreRecord>)> {
        let mut recs = Vec::new();
        let mut table = Table::new();
        for m in &ok_methods {
            let label = m.label();
            let id = score_samples(b.bundle, id_test, m, b.seed)?;
            recs.extend(records(id_test, ID_DATASET, &label, &id, false));
            let entry = table.entry(label.clone()).or_default();
            entry.insert(ID_DATASET.to_string(), id);
            for rung in &ladder.rungs {
                let s = score_samples(b.bundle, &rung.samples, m, b.seed)?;
                recs.extend(records(&rung.samples, &rung.name, &label, &s, true));
                entry.insert(rung.name.clone(), s);
            }
        }
        Ok((table, recs))
    };
    // seeds are scored concurrently; results are collected in seed order
    let results: Vec<Result<(Table, Vec<ScoreRecord>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = bundles
            .iter()
            .map(|b| scope.spawn(move || score_seed(b)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let mut per_seed: Vec<Table> = Vec::new();
    let mut score_files = Vec::new();
    for (b, r) in bundles.iter().zip(results) {
        let (table, recs) = r?;
        per_seed.push(table);
        score_files.push((b.seed, recs));
    }
    let mut cells = Vec::new();
    let mut id_median_score = BTreeMap::new();
    for m in &ok_methods {
        let label = m.label();
        id_median_score.insert(
            label.clone(),
            per_seed
                .iter()
                .map(|t| median(&t[&label][ID_DATASET]))
                .collect(),
        );
        for rung in &ladder.rungs {
            let mut aucs = Vec::new();
            let mut auprs = Vec::new();
            let mut medians = Vec::new();
            for t in &per_seed {
                let id = &t[&label][ID_DATASET];
                let ood = &t[&label][&rung.name];
                aucs.push(auc(id, ood)?);
                auprs.push(aupr(id, ood)?);
                medians.push(median(ood));
            }
            cells.push(ReportCell {
                dataset: rung.name.clone(),
                method: label.clone(),
                auc: SeedStat::from_values(aucs),
                aupr: SeedStat::from_values(auprs),
                median_score: medians,
            });
        }
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        conventions: metric_conventions(),
        config_hash: config_hash.to_string(),
        seeds: bundles.iter().map(|b| b.seed).collect(),
        id_dataset: ID_DATASET.to_string(),
        id_median_score,
        datasets: ladder
            .rungs
            .iter()
            .map(|r| RungInfo {
                name: r.name.clone(),
                kind: r.kind.map(|k| k.to_string()),
                severity: r.severity,
            })
            .collect(),
        methods: ok_methods.iter().map(|m| m.label()).collect(),
        cells,
        errors,
    };
    Ok(EvalOutput {
        report,
        scores: score_files,
    })
}

/// For every seed and every corruption chain of `ladder`: whether the
/// per-seed median score of `method` is nondecreasing along the chain.
pub fn median_monotonicity(
    report: &EvalReport,
    ladder: &ShiftLadder,
    method: &str,
) -> Vec<(u64, String, bool)> {
    let mut out = Vec::new();
    for (seed_idx, &seed) in report.seeds.iter().enumerate() {
        for (kind, chain) in ladder.chains() {
            let medians: Vec<f64> = chain
                .iter()
                .filter_map(|&i| report.cell(&ladder.rungs[i].name, method))
                .map(|c| c.median_score[seed_idx])
                .collect();
            let ok = medians.len() == chain.len() && medians.windows(2).all(|w| w[0] <= w[1]);
            out.push((seed, kind.to_string(), ok));
        }
    }
    out
}

/// One ablation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: String,
    pub decoder_tap: String,
    pub freeze: bool,
    pub score: String,
    pub auc: SeedStat,
    pub aupr: SeedStat,
    /// Max tail drift during the `g0` stage of the row's bundle, per seed.
    pub freeze_report: Vec<f64>,
    /// Per-rung AUC mean across seeds.
    pub rung_auc: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    /// Rungs pooled into the OOD set (every corrupted rung with severity > 0).
    pub ood_rungs: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// The four decoder configurations, each scored against the pooled shifted
/// rungs: (0) a fresh decoder at the final tap trained without freezing,
/// scored with RUE; (1) `G1` at the penultimate tap, RUE; (2) `G0` with the
/// tail frozen from `G1`, RUE; (3) both decoders, DRUE. Rows 1–3 reuse the
/// fully trained bundles; row 0 trains one extra decoder per seed on top of
/// the same classifier.
pub fn run_ablation(
    split: &DatasetSplit,
    ladder: &ShiftLadder,
    bundles: &[SeededBundle<'_>],
    g0_config: &TrainConfig,
) -> Result<AblationTable> {
    if bundles.is_empty() {
        return Err(DrueError::config("ablation needs at least one seed"));
    }
    let ood_rungs: Vec<&crate::datasets::Rung> = ladder
        .rungs
        .iter()
        .filter(|r| r.kind.is_some() && r.severity > 0.0)
        .collect();
    if ood_rungs.is_empty() {
        return Err(DrueError::config(
            "ablation needs at least one shifted rung",
        ));
    }
    let pooled: Vec<Sample> = ood_rungs
        .iter()
        .flat_map(|r| r.samples.iter().cloned())
        .collect();
    let specs: [(&str, &str, bool, UncertaintyMethod); 4] = [
        (
            "final/no-freeze",
            "final",
            false,
            UncertaintyMethod::Rue { tap: Tap::Final },
        ),
        (
            "penultimate",
            "penultimate",
            false,
            UncertaintyMethod::Rue {
                tap: Tap::Penultimate,
            },
        ),
        (
            "final/freeze",
            "final",
            true,
            UncertaintyMethod::Rue { tap: Tap::Final },
        ),
        ("both/freeze", "both", true, UncertaintyMethod::Drue),
    ];
    for b in bundles {
        UncertaintyMethod::Drue.check_bundle(b.bundle)?;
    }
    let train_row0 = |b: &SeededBundle<'_>| -> Result<CheckpointBundle> {
        let mut base = b.bundle.clone();
        base.decoders = None;
        base.completed.retain(|&s| s == Stage::Classifier);
        base.history.retain(|h| h.stage == Stage::Classifier);
        let cfg = TrainConfig {
            seed: g0_config.seed ^ b.seed,
            ..g0_config.clone()
        };
        train_g0(base, split, &cfg, false)
    };
    let row0_bundles = std::thread::scope(|scope| {
        let handles: Vec<_> = bundles
            .iter()
            .map(|b| scope.spawn(move || train_row0(b)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for (row, (name, tap, freeze, method)) in specs.iter().enumerate() {
        let mut aucs = Vec::new();
        let mut auprs = Vec::new();
        let mut drift = Vec::new();
        let mut rung_auc: BTreeMap<String, f64> = BTreeMap::new();
        for (b, row0) in bundles.iter().zip(&row0_bundles) {
            let bundle = if row == 0 { row0 } else { b.bundle };
            let id = score_samples(bundle, &split.test, method, b.seed)?;
            let ood = score_samples(bundle, &pooled, method, b.seed)?;
            aucs.push(auc(&id, &ood)?);
            auprs.push(aupr(&id, &ood)?);
            drift.push(bundle.freeze_report.unwrap_or(0.0));
            let mut offset = 0;
            for r in &ood_rungs {
                let part = &ood[offset..offset + r.samples.len()];
                offset += r.samples.len();
                *rung_auc.entry(r.name.clone()).or_default() +=
                    auc(&id, part)? / bundles.len() as f64;
            }
        }
        rows.push(AblationRow {
            row,
            name: name.to_string(),
            decoder_tap: tap.to_string(),
            freeze: *freeze,
            score: method.label(),
            auc: SeedStat::from_values(aucs),
            aupr: SeedStat::from_values(auprs),
            freeze_report: drift,
            rung_auc,
        });
    }
    Ok(AblationTable {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds: bundles.iter().map(|b| b.seed).collect(),
        ood_rungs: ood_rungs.iter().map(|r| r.name.clone()).collect(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    /// Rank AUC of the class-1 probability against the true label.
    pub auc: f64,
}

/// Accuracy and AUC from class-probability vectors.
pub fn classification_metrics(probs: &[Vec<f64>], labels: &[u8]) -> Result<ClassifierMetrics> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(DrueError::config(
            "classifier metrics need a non-empty labelled test set",
        ));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| {
            let arg = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            arg == usize::from(y)
        })
        .count();
    let neg: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(p, _)| p[1])
        .collect();
    let pos: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(p, _)| p[1])
        .collect();
    let auc = if neg.is_empty() || pos.is_empty() {
        f64::NAN
    } else {
        auc(&neg, &pos)?
    };
    Ok(ClassifierMetrics {
        accuracy: correct as f64 / probs.len() as f64,
        auc,
    })
}

pub fn classifier_metrics(bundle: &CheckpointBundle, test: &[Sample]) -> Result<ClassifierMetrics> {
    if test.is_empty() {
        return Err(DrueError::config(
            "classifier metrics need a non-empty test set",
        ));
    }
    let mut probs = Vec::with_capacity(test.len());
    for chunk in test.chunks(32) {
        probs.extend(
            bundle
                .classifier
                .predict(&stack_images(&chunk.iter().collect::<Vec<_>>()))?,
        );
    }
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    classification_metrics(&probs, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub dataset: String,
    pub counts: Vec<usize>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDistributions {
    pub method: String,
    /// Shared by every dataset of this method.
    pub bin_edges: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distributions {
    pub bins: usize,
    pub methods: Vec<MethodDistributions>,
}

pub const DEFAULT_BINS: usize = 30;

/// Histograms with shared bin edges per method; datasets keep first-seen order.
pub fn distributions_from_records(records: &[ScoreRecord], bins: usize) -> Result<Distributions> {
    if bins == 0 {
        return Err(DrueError::config("need at least one bin"));
    }
    let mut methods: Vec<String> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut out = Vec::new();
    for m in methods {
        let rs: Vec<&ScoreRecord> = records.iter().filter(|r| r.method == m).collect();
        let lo = rs.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
        let mut hi = rs.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let bin_edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut datasets: Vec<&str> = Vec::new();
        for r in &rs {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
        let histograms = datasets
            .into_iter()
            .map(|d| {
                let scores: Vec<f64> = rs
                    .iter()
                    .filter(|r| r.dataset == d)
                    .map(|r| r.score)
                    .collect();
                let mut counts = vec![0usize; bins];
                for &s in &scores {
                    let k = (((s - lo) / width) as usize).min(bins - 1);
                    counts[k] += 1;
                }
                let sorted = sorted(&scores);
                Histogram {
                    dataset: d.to_string(),
                    counts,
                    median: quantile(&sorted, 0.5),
                    q1: quantile(&sorted, 0.25),
                    q3: quantile(&sorted, 0.75),
                    n: scores.len(),
                }
            })
            .collect();
        out.push(MethodDistributions {
            method: m,
            bin_edges,
            histograms,
        });
    }
    Ok(Distributions { bins, methods: out })
}

/// Reads a score file and builds its histogram export.
pub fn export_distributions(score_file: &Path, bins: usize) -> Result<Distributions> {
    distributions_from_records(&read_scores(score_file)?, bins)
}

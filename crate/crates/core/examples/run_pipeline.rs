//! The staged pipeline driven from code: prepare, train, evaluate, ablate,
//! probe and plot, on a configuration small enough to finish in a minute.
//!
//! cargo run --release --example run_pipeline -- [run_dir]

use drue::config::RunConfig;
use drue::pipeline::{Pipeline, StageSelection};

const CONFIG: &str = r#"
[dataset]
n_per_class = 40
image_size = 32
ladder_kinds = ["gaussian_noise", "uniform_noise_replace"]
ladder_severities = [0.0, 0.5, 1.0]

[model]
image_size = 32
stem_channels = 8
channels = [8, 16, 32]
downsample = [false, true, true]

[training.classifier]
learning_rate = 1e-3
batch_size = 8
max_epochs = 6
patience = 2

[eval]
seeds = [0, 1]
mc_passes = 5
theory_samples = 2
"#;

fn main() -> drue::Result<()> {
    let mut config = RunConfig::from_toml(CONFIG)?;
    config.paths.run_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/example".into())
        .into();
    let pipeline = Pipeline::new(config)?;

    let prepared = pipeline.prepare()?;
    println!("rungs: {}", prepared.rungs.join(", "));
    pipeline.train(StageSelection::All)?;

    let report = pipeline.evaluate()?;
    for cell in report.cells.iter().filter(|c| c.method == "drue") {
        println!(
            "{:<28} drue AUC {:.3} ± {:.3}",
            cell.dataset, cell.auc.mean, cell.auc.std
        );
    }
    for row in pipeline.ablate()?.rows {
        println!("ablation {:<16} AUC {:.3}", row.name, row.auc.mean);
    }
    let probe = pipeline.theory(None)?;
    println!("smooth-decoder slopes {:?}", probe.smooth_slope_range);
    let plots = pipeline.plot()?;
    println!(
        "{} figures under {}",
        plots.len(),
        pipeline.run.plots_dir().display()
    );
    Ok(())
}

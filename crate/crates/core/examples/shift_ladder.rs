//! Generates the synthetic fundus-like data, builds a corruption ladder and
//! writes one image per rung.
//!
//! cargo run --release --example shift_ladder -- [out_dir]

use std::path::PathBuf;

use drue::datasets::{build_ladder, generate_synthetic, CorruptionKind};

fn main() -> drue::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "ladder_preview".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| drue::DrueError::io(&out, e))?;
    let split = generate_synthetic(20, 64, 0)?;
    println!(
        "train {} / val {} / test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let ladder = build_ladder(&split.test, &CorruptionKind::ALL, &[0.0, 0.5, 1.0], 0)?;
    let clean = &ladder.rungs[0].samples;
    for rung in &ladder.rungs {
        let mse = rung
            .samples
            .iter()
            .zip(clean)
            .map(|(a, b)| a.image.mse(&b.image))
            .sum::<f64>()
            / clean.len() as f64;
        println!("{:<28} mse vs clean {mse:.5}", rung.name);
        let path = out.join(format!("{}.png", rung.name));
        rung.samples[0].image.to_rgb8().save(&path)?;
    }
    println!("previews written to {}", out.display());
    Ok(())
}

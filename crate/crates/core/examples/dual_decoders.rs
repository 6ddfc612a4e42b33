//! Trains a small classifier and both decoders, then compares DRUE with the
//! single-decoder baselines on clean and noisy test images and saves one
//! uncertainty map.
//!
//! cargo run --release --example dual_decoders

use drue::backbone::EncoderConfig;
use drue::datasets::{apply_corruption, generate_synthetic, stack_images, CorruptionKind, Sample};
use drue::evaluation::{auc, classifier_metrics};
use drue::training::{train_classifier, train_g0, train_g1, TrainConfig};
use drue::uncertainty::{score_samples, uncertainty_map, Tap, UncertaintyMethod};

fn stage(learning_rate: f64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate,
        batch_size: 8,
        max_epochs,
        patience: 3,
        seed: 0,
    }
}

fn main() -> drue::Result<()> {
    let encoder = EncoderConfig {
        image_size: 32,
        stem_channels: 8,
        channels: vec![8, 16, 32],
        downsample: vec![false, true, true],
        ..EncoderConfig::default()
    };
    let split = generate_synthetic(60, 32, 0)?;

    let bundle = train_classifier(&split, &encoder, &stage(1e-3, 8))?;
    let m = classifier_metrics(&bundle, &split.test)?;
    println!("classifier: accuracy {:.3}, auc {:.3}", m.accuracy, m.auc);
    let bundle = train_g1(bundle, &split, &stage(1e-3, 10))?;
    // The shared tail stays frozen at its G1 values.
    let bundle = train_g0(bundle, &split, &stage(1e-4, 10), true)?;
    println!("tail drift while training g0: {:?}", bundle.freeze_report);

    let noisy: Vec<Sample> = split
        .test
        .iter()
        .map(|s| apply_corruption(s, CorruptionKind::GaussianNoise, 0.75, 1))
        .collect::<drue::Result<_>>()?;
    let methods = [
        UncertaintyMethod::Drue,
        UncertaintyMethod::Rue {
            tap: Tap::Penultimate,
        },
        UncertaintyMethod::Rue { tap: Tap::Final },
        UncertaintyMethod::Entropy,
    ];
    for method in &methods {
        let id = score_samples(&bundle, &split.test, method, 0)?;
        let ood = score_samples(&bundle, &noisy, method, 0)?;
        println!(
            "{:<16} AUC clean vs noise {:.3}",
            method.label(),
            auc(&id, &ood)?
        );
    }

    let map = uncertainty_map(&bundle, &noisy[0])?;
    let drue = drue::uncertainty::drue_scores(&bundle, &stack_images(&[&noisy[0]]))?[0];
    println!(
        "map mean {:.6} equals the DRUE score {drue:.6}",
        map.raw_mean()
    );
    map.save(std::path::Path::new("uncertainty_map.png"))?;
    println!("wrote uncertainty_map.png");
    Ok(())
}

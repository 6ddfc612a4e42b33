mod common;

use common::{correlation, mse};
use drue::datasets::{
    apply_corruption, build_ladder, generate_synthetic, load_samples, save_samples, CorruptionKind,
    Sample,
};
use proptest::prelude::*;

const LADDER: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn samples(seed: u64) -> Vec<Sample> {
    generate_synthetic(6, 32, seed).unwrap().test
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mse_is_nondecreasing_along_every_chain(data_seed in 0u64..1000, noise_seed in any::<u64>(), pick in 0usize..2) {
        let s = &samples(data_seed)[pick];
        for kind in CorruptionKind::ALL {
            let mut last = -1.0;
            for sev in LADDER {
                let c = apply_corruption(s, kind, sev, noise_seed).unwrap();
                let e = mse(&s.image.data, &c.image.data);
                prop_assert!(e >= last, "{kind} at {sev}: {e} < {last}");
                last = e;
            }
        }
    }

    #[test]
    fn corrupted_images_stay_in_unit_range(data_seed in 0u64..1000, noise_seed in any::<u64>(), sev in 0.0f64..=1.0) {
        for s in samples(data_seed).iter().take(2) {
            for kind in CorruptionKind::ALL {
                let c = apply_corruption(s, kind, sev, noise_seed).unwrap();
                prop_assert!(c.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(&c.sample_id, &s.sample_id);
            }
        }
    }

    #[test]
    fn corruption_is_a_function_of_id_and_seed(data_seed in 0u64..1000, noise_seed in any::<u64>(), sev in 0.01f64..=1.0) {
        let s = &samples(data_seed)[0];
        for kind in CorruptionKind::ALL {
            prop_assert_eq!(
                apply_corruption(s, kind, sev, noise_seed).unwrap(),
                apply_corruption(s, kind, sev, noise_seed).unwrap()
            );
        }
    }
}

#[test]
fn severity_zero_is_identity_and_noise_changes_pixels() {
    let s = &samples(3)[0];
    for kind in CorruptionKind::ALL {
        assert_eq!(&apply_corruption(s, kind, 0.0, 9).unwrap(), s);
    }
    let noisy = apply_corruption(s, CorruptionKind::GaussianNoise, 0.5, 9).unwrap();
    assert!(mse(&s.image.data, &noisy.image.data) > 0.0);
}

#[test]
fn full_replacement_forgets_the_source() {
    let test = generate_synthetic(20, 32, 1).unwrap().test;
    let mut clean = Vec::new();
    let mut replaced = Vec::new();
    for s in &test {
        let c = apply_corruption(s, CorruptionKind::UniformNoiseReplace, 1.0, 4).unwrap();
        clean.extend(s.image.data.iter().map(|&v| f64::from(v)));
        replaced.extend(c.image.data.iter().map(|&v| f64::from(v)));
    }
    assert!(correlation(&clean, &replaced).abs() < 0.02);
}

#[test]
fn ladder_shape_and_clean_rung() {
    let test: Vec<Sample> = generate_synthetic(50, 32, 2).unwrap().test;
    assert_eq!(test.len(), 10);
    let twenty: Vec<Sample> = generate_synthetic(100, 32, 2).unwrap().test;
    assert_eq!(twenty.len(), 20);
    let ladder =
        build_ladder(&twenty, &[CorruptionKind::Blur], &[0.25, 0.5, 0.75, 1.0], 0).unwrap();
    assert_eq!(ladder.rungs.len(), 4);
    assert!(ladder.rungs.iter().all(|r| r.samples.len() == 20));

    let ladder = build_ladder(&twenty, &CorruptionKind::ALL, &LADDER, 0).unwrap();
    assert_eq!(ladder.rungs.len(), 1 + 5 * 4);
    let clean = &ladder.rungs[0];
    assert_eq!(clean.severity, 0.0);
    for (a, b) in clean.samples.iter().zip(&twenty) {
        assert_eq!(a.image.data, b.image.data);
    }
    for (_, chain) in ladder.chains() {
        let sev: Vec<f64> = chain.iter().map(|&i| ladder.rungs[i].severity).collect();
        assert!(sev.windows(2).all(|w| w[0] < w[1]));
    }
    assert!(build_ladder(&twenty, &[CorruptionKind::Blur], &[], 0).is_err());
    assert!(build_ladder(&twenty, &[CorruptionKind::Blur], &[0.5, 0.25], 0).is_err());
}

#[test]
fn png_roundtrip_is_lossless_for_clean_samples() {
    let split = generate_synthetic(5, 32, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_samples(dir.path(), &split.train).unwrap();
    assert_eq!(load_samples(dir.path()).unwrap(), split.train);
}

//! Taylor remainder checks: the quadratic toy and a random smooth decoder,
//! whose remainder should shrink with the square of the step.

use drue::decoders::{DecoderStack, StageSpec};
use drue::nn::Activation;
use drue::theory::{
    jvp, residual_scaling_exponent, taylor_residual, DecoderMap, JvpMethod, PerturbationProbe,
    Quadratic,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> drue::Result<()> {
    let r = taylor_residual(&Quadratic { len: 1 }, &[1.0], &[1.0], 0.1)?;
    println!(
        "quadratic residual at s = 0.1: {r:.6} (closed form {:.6})",
        0.01 / 0.21
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = |i, o, upsample, activation| StageSpec {
        in_channels: i,
        out_channels: o,
        upsample,
        activation,
    };
    let map = DecoderMap {
        tail: DecoderStack::new(
            "tail",
            &[
                spec(8, 8, true, Activation::Silu),
                spec(8, 3, true, Activation::Sigmoid),
            ],
            &mut rng,
        ),
        shape: (8, 4, 4),
    };
    let z: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dz: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();

    let fwd = jvp(&map, &z, &dz, JvpMethod::ForwardMode)?;
    let fd = jvp(&map, &z, &dz, JvpMethod::CentralDifference)?;
    let err = fwd
        .tangent
        .iter()
        .zip(&fd.tangent)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("forward mode vs central difference: max diff {err:.2e}");

    let probe = PerturbationProbe {
        z,
        dz,
        scales: vec![1e-1, 1e-2, 1e-3],
    };
    let fit = residual_scaling_exponent(&map, &probe)?;
    for p in &fit.points {
        println!(
            "scale {:>6.0e}  remainder {:.3e}  relative {:.3e}",
            p.scale, p.remainder, p.residual
        );
    }
    println!("log-log slope {:.3}", fit.slope.unwrap_or(f64::NAN));
    Ok(())
}

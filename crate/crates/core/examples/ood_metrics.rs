//! AUC and AUPR on hand-made score lists, including ties.

use drue::evaluation::{auc, aupr};

fn main() -> drue::Result<()> {
    let cases: [(&str, Vec<f64>, Vec<f64>); 4] = [
        ("separated", vec![0.1, 0.2], vec![0.8, 0.9]),
        ("interleaved", vec![0.1, 0.5], vec![0.3, 0.7]),
        ("inverted", vec![0.8, 0.9], vec![0.1, 0.2]),
        ("tied", vec![0.2, 0.5, 0.5], vec![0.5, 0.5, 0.9]),
    ];
    println!("{:<12} {:>7} {:>7}", "case", "auc", "aupr");
    for (name, id, ood) in &cases {
        println!("{name:<12} {:>7.4} {:>7.4}", auc(id, ood)?, aupr(id, ood)?);
    }
    // Any strictly increasing transform leaves both metrics unchanged.
    let (_, id, ood) = &cases[3];
    let warp = |v: &Vec<f64>| v.iter().map(|s| (3.0 * s).exp()).collect::<Vec<_>>();
    assert_eq!(auc(id, ood)?, auc(&warp(id), &warp(ood))?);
    Ok(())
}

//! Reference implementations the library is checked against. They share no
//! code with the crate's metrics.

#![allow(dead_code)]

/// Pairwise count: wins plus half the ties over all (ID, OOD) pairs.
pub fn auc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                credit += 1.0;
            } else if o == i {
                credit += 0.5;
            }
        }
    }
    credit / (id.len() * ood.len()) as f64
}

/// Walks every distinct threshold from the top, predicting OOD for
/// `score >= t`, and sums precision times recall increment.
pub fn aupr_enumerated(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let fp = id.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / ood.len() as f64;
        if tp + fp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Per-pixel MSE written out longhand.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = f64::from(a[k]) - f64::from(b[k]);
        s += d * d;
    }
    s / a.len() as f64
}

use rand::Rng;

use super::{FeatureMap, Grads, HasParams, Param, Scalar};

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample_nearest2x<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (x.height, x.width);
    let mut out = FeatureMap::zeros(x.channels, x.batch, 2 * h, 2 * w);
    for (src, dst) in x.data.chunks(h * w).zip(out.data.chunks_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2x`]: sums each 2×2 block.
pub fn upsample_nearest2x_backward<T: Scalar>(grad: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = FeatureMap::zeros(grad.channels, grad.batch, h, w);
    for (src, dst) in grad.data.chunks(4 * h * w).zip(out.data.chunks_mut(h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * 2 * w + xx];
            }
        }
    }
    out
}

/// Spatial mean per (channel, batch) → `channels × batch` matrix.
pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Vec<T> {
    let inv = T::one() / T::lit(x.plane() as f64);
    x.data
        .chunks(x.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &[T], shape: [usize; 4]) -> FeatureMap<T> {
    let [c, n, h, w] = shape;
    let inv = T::one() / T::lit((h * w) as f64);
    let mut out = FeatureMap::zeros(c, n, h, w);
    for (dst, &g) in out.data.chunks_mut(h * w).zip(grad) {
        dst.iter_mut().for_each(|v| *v = g * inv);
    }
    out
}

/// Inverted-dropout keep mask (`0` or `1/(1-rate)`) for `len` elements.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                scale
            }
        })
        .collect()
}

/// Fully-connected layer over a `features × batch` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::he_normal(
                format!("{name}.weight"),
                &[out_features, in_features],
                in_features,
                0.5,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
            in_features,
            out_features,
        }
    }

    /// `x` is `in_features × batch`; returns `out_features × batch`.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_features * batch];
        T::gemm(
            self.out_features,
            self.in_features,
            batch,
            &self.weight.value,
            false,
            x,
            false,
            &mut out,
            false,
        );
        for (row, &b) in out.chunks_mut(batch).zip(&self.bias.value) {
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        out
    }

    pub fn backward(&self, x: &[T], grad_out: &[T], batch: usize, grads: &mut Grads<T>) -> Vec<T> {
        if grads.wants(&self.weight.name) {
            let mut dw = vec![T::zero(); self.out_features * self.in_features];
            T::gemm(
                self.out_features,
                batch,
                self.in_features,
                grad_out,
                false,
                x,
                true,
                &mut dw,
                false,
            );
            grads.accumulate(&self.weight.name, &dw);
        }
        if grads.wants(&self.bias.name) {
            let db: Vec<T> = grad_out
                .chunks(batch)
                .map(|r| r.iter().copied().sum())
                .collect();
            grads.accumulate(&self.bias.name, &db);
        }
        let mut dx = vec![T::zero(); self.in_features * batch];
        T::gemm(
            self.in_features,
            self.out_features,
            batch,
            &self.weight.value,
            true,
            grad_out,
            false,
            &mut dx,
            false,
        );
        dx
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_features: self.in_features,
            out_features: self.out_features,
        }
    }
}

impl<T> HasParams<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = FeatureMap::from_vec(1, 2, 2, 2, (0..8).map(|v| v as f64).collect());
        let g = FeatureMap::from_vec(1, 2, 4, 4, (0..32).map(|v| (v as f64).sin()).collect());
        let up = upsample_nearest2x(&x);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = upsample_nearest2x_backward(&g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(up.data[0..4], [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn pooling_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::new("fc", 3, 2, &mut rng);
        let x = vec![0.2, -0.1, 0.5, 0.3, 0.9, -0.7];
        let r = vec![1.0, -2.0, 0.5, 0.25];
        let loss = |l: &Linear<f64>, x: &[f64]| -> f64 {
            l.forward(x, 2).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut grads = Grads::new(lin.param_names());
        let dx = lin.backward(&x, &r, 2, &mut grads);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert!(((loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
        let pooled = global_avg_pool(&FeatureMap::from_vec(
            1,
            1,
            2,
            2,
            vec![1.0f64, 2.0, 3.0, 6.0],
        ));
        assert_eq!(pooled, vec![3.0]);
        let back = global_avg_pool_backward(&[4.0f64], [1, 1, 2, 2]);
        assert_eq!(back.data, vec![1.0; 4]);
    }

    #[test]
    fn dropout_mask_rate_zero_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask: Vec<f32> = dropout_mask(100, 0.0, &mut rng);
        assert!(mask.iter().all(|&m| m == 1.0));
        let mask: Vec<f32> = dropout_mask(10_000, 0.5, &mut rng);
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((4_500..5_500).contains(&kept));
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
    }
}

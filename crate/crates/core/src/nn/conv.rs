use rand::Rng;

use super::{FeatureMap, Grads, HasParams, Param, Scalar};

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// im2col matrix, or `None` for 1×1 stride-1 convolutions where the
    /// input itself is the column matrix.
    cols: Option<Vec<T>>,
    input: Option<FeatureMap<T>>,
    in_shape: [usize; 4],
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::he_normal(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                gain,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let out = |v: usize| (v + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(height), out(width))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &FeatureMap<T>) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (ho, wo) = self.output_size(x.height, x.width);
        let cols_per_row = x.batch * ho * wo;
        let mut cols = vec![T::zero(); self.in_channels * k * k * cols_per_row];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst_row = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                    for n in 0..x.batch {
                        let src = &x.data[(c * x.batch + n) * x.plane()..][..x.plane()];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.width..][..x.width];
                            let dst = &mut dst_row[(n * ho + oy) * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < x.width as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], shape: [usize; 4]) -> FeatureMap<T> {
        let [cin, batch, h, w] = shape;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (ho, wo) = self.output_size(h, w);
        let cols_per_row = batch * ho * wo;
        let mut out = FeatureMap::zeros(cin, batch, h, w);
        let plane = h * w;
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src_row = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                    for n in 0..batch {
                        let dst = &mut out.data[(c * batch + n) * plane..][..plane];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..][..w];
                            let src = &src_row[(n * ho + oy) * wo..][..wo];
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] = dst_row[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply_weights(
        &self,
        cols: &[T],
        batch: usize,
        ho: usize,
        wo: usize,
        bias: bool,
    ) -> FeatureMap<T> {
        let n = batch * ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = FeatureMap::zeros(self.out_channels, batch, ho, wo);
        T::gemm(
            self.out_channels,
            kdim,
            n,
            &self.weight.value,
            false,
            cols,
            false,
            &mut out.data,
            false,
        );
        if bias {
            for (co, row) in out.data.chunks_mut(n).enumerate() {
                let b = self.bias.value[co];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
        }
        out
    }

    fn check_input(&self, x: &FeatureMap<T>) {
        assert_eq!(
            x.channels, self.in_channels,
            "{}: expected {} input channels, got {}",
            self.weight.name, self.in_channels, x.channels
        );
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.check_input(x);
        let (ho, wo) = self.output_size(x.height, x.width);
        if self.is_pointwise() {
            self.apply_weights(&x.data, x.batch, ho, wo, true)
        } else {
            let cols = self.im2col(x);
            self.apply_weights(&cols, x.batch, ho, wo, true)
        }
    }

    /// The convolution's linear part applied to a tangent (no bias).
    pub fn forward_linear(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.check_input(x);
        let (ho, wo) = self.output_size(x.height, x.width);
        if self.is_pointwise() {
            self.apply_weights(&x.data, x.batch, ho, wo, false)
        } else {
            let cols = self.im2col(x);
            self.apply_weights(&cols, x.batch, ho, wo, false)
        }
    }

    /// Forward pass retaining what `backward` needs.
    pub fn forward_train(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        self.check_input(x);
        let (ho, wo) = self.output_size(x.height, x.width);
        if self.is_pointwise() {
            let out = self.apply_weights(&x.data, x.batch, ho, wo, true);
            let cache = ConvCache {
                cols: None,
                input: Some(x.clone()),
                in_shape: x.shape(),
            };
            (out, cache)
        } else {
            let cols = self.im2col(x);
            let out = self.apply_weights(&cols, x.batch, ho, wo, true);
            let cache = ConvCache {
                cols: Some(cols),
                input: None,
                in_shape: x.shape(),
            };
            (out, cache)
        }
    }

    /// Accumulates weight gradients (if trainable) and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let cols: &[T] = match (&cache.cols, &cache.input) {
            (Some(c), _) => c,
            (None, Some(x)) => &x.data,
            (None, None) => unreachable!("conv cache without inputs"),
        };
        let n = grad_out.batch * grad_out.plane();
        let kdim = self.in_channels * self.kernel * self.kernel;
        if grads.wants(&self.weight.name) {
            let mut dw = vec![T::zero(); self.out_channels * kdim];
            T::gemm(
                self.out_channels,
                n,
                kdim,
                &grad_out.data,
                false,
                cols,
                true,
                &mut dw,
                false,
            );
            grads.accumulate(&self.weight.name, &dw);
        }
        if grads.wants(&self.bias.name) {
            let db: Vec<T> = grad_out
                .data
                .chunks(n)
                .map(|row| row.iter().copied().sum())
                .collect();
            grads.accumulate(&self.bias.name, &db);
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * n];
        T::gemm(
            kdim,
            self.out_channels,
            n,
            &self.weight.value,
            true,
            &grad_out.data,
            false,
            &mut dcols,
            false,
        );
        if self.is_pointwise() {
            let [c, b, h, w] = cache.in_shape;
            Some(FeatureMap::from_vec(c, b, h, w, dcols))
        } else {
            Some(self.col2im(&dcols, cache.in_shape))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl<T> HasParams<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

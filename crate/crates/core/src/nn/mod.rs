//! Minimal dense CNN engine used by the backbone and the decoders.
//!
//! Activations are stored channel-major (`C × N × H × W`) so that every
//! convolution is a single GEMM over the whole batch. Backward passes are
//! written by hand per layer; there is no tape. Everything is single-threaded
//! and therefore bitwise reproducible for a fixed input order.

mod adam;
mod conv;
mod layers;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use layers::{
    dropout_mask, global_avg_pool, global_avg_pool_backward, upsample_nearest2x,
    upsample_nearest2x_backward, Linear,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Floating-point element type supported by the engine.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// `C (m×n) = A (m×k) · B (k×n) [+ C]`, all row-major; `ta`/`tb` read
    /// the operand as its transpose (A stored k×m, B stored n×k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols); storage is row-major of the (possibly transposed) matrix
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:ident) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the bounds were asserted above and the strides describe
                // dense row-major storage of exactly those dimensions.
                unsafe {
                    matrixmultiply::$f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);

/// Channel-major activation tensor (`channels × batch × height × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Self {
        assert_eq!(
            data.len(),
            channels * batch * height * width,
            "feature map size"
        );
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Copies the listed batch entries into a new map.
    pub fn select_batch(&self, indices: &[usize]) -> Self {
        let plane = self.plane();
        let mut out = Self::zeros(self.channels, indices.len(), self.height, self.width);
        for c in 0..self.channels {
            for (j, &i) in indices.iter().enumerate() {
                let src = (c * self.batch + i) * plane;
                let dst = (c * indices.len() + j) * plane;
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }

    /// Concatenates maps along the batch axis.
    pub fn concat_batch(parts: &[Self]) -> Self {
        let first = parts.first().expect("at least one part");
        let plane = first.plane();
        let total: usize = parts.iter().map(|p| p.batch).sum();
        let mut out = Self::zeros(first.channels, total, first.height, first.width);
        for c in 0..first.channels {
            let mut offset = 0;
            for p in parts {
                assert_eq!(
                    (p.channels, p.height, p.width),
                    (first.channels, first.height, first.width)
                );
                let src = c * p.batch * plane;
                let dst = (c * total + offset) * plane;
                out.data[dst..dst + p.batch * plane]
                    .copy_from_slice(&p.data[src..src + p.batch * plane]);
                offset += p.batch;
            }
        }
        out
    }

    /// Values of one batch entry in `C × H × W` order.
    pub fn sample(&self, index: usize) -> Vec<T> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let src = (c * self.batch + index) * plane;
            out.extend_from_slice(&self.data[src..src + plane]);
        }
        out
    }
}

/// Element-wise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation input.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }

    pub fn forward<T: Scalar>(self, pre: &FeatureMap<T>) -> FeatureMap<T> {
        pre.map(|v| self.apply(v))
    }

    pub fn backward<T: Scalar>(self, pre: &FeatureMap<T>, grad: &FeatureMap<T>) -> FeatureMap<T> {
        grad.zip_map(pre, |g, x| g * self.derivative(x))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Named dense parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::zero(); shape.iter().product()],
        }
    }

    /// He-normal initialisation scaled by `gain`.
    pub fn he_normal(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
        let value = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Anything that owns named parameters.
pub trait HasParams<T> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.clone()).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient accumulator restricted to a trainable parameter set.
#[derive(Debug, Default)]
pub struct Grads<T> {
    trainable: BTreeSet<String>,
    map: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(trainable: impl IntoIterator<Item = String>) -> Self {
        Self {
            trainable: trainable.into_iter().collect(),
            map: BTreeMap::new(),
        }
    }

    pub fn wants(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn accumulate(&mut self, name: &str, grad: &[T]) {
        if !self.wants(name) {
            return;
        }
        match self.map.get_mut(name) {
            Some(acc) => {
                for (a, &g) in acc.iter_mut().zip(grad) {
                    *a = *a + g;
                }
            }
            None => {
                self.map.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

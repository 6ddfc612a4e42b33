use std::collections::BTreeMap;

use super::{Grads, Param, Scalar};

/// Adam with bias correction. Parameters without a gradient entry are left
/// untouched, which is how frozen parameters stay bitwise constant.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &Grads<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = T::lit(self.learning_rate / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for p in params {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p
                .value
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w = *w - step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::zeros("w", &[2]);
        p.value = vec![1.0, -1.0];
        let mut grads = Grads::new(["w".to_string()]);
        grads.accumulate("w", &[0.3, -5.0]);
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p], &grads);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::<f64>::zeros("w", &[1]);
        p.value = vec![5.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut grads = Grads::new(["w".to_string()]);
            grads.accumulate("w", &[2.0 * (p.value[0] - 2.0)]);
            opt.step(vec![&mut p], &grads);
        }
        assert!((p.value[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut p = Param::<f32>::zeros("frozen", &[3]);
        p.value = vec![0.1, 0.2, 0.3];
        let before = p.value.clone();
        let grads = Grads::new(Vec::<String>::new());
        Adam::new(1.0).step(vec![&mut p], &grads);
        assert_eq!(p.value, before);
    }
}

//! Adaptive-moment optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Adam, with optional decoupled weight decay (AdamW).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::new(lr, 0.9, 0.999) }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Bias-corrected update direction scaled by `lr`, without applying it.
    ///
    /// A parameter whose gradient has been exactly zero since the first step
    /// gets an exactly zero direction.
    pub fn directions(&mut self, grads: &[&[T]]) -> Vec<Vec<T>> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        grads
            .iter()
            .enumerate()
            .map(|(slot, g)| {
                let m = &mut self.m[slot];
                let v = &mut self.v[slot];
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        lr * mhat / (vhat.sqrt() + eps)
                    })
                    .collect()
            })
            .collect()
    }

    /// In-place update. `decay[slot]` selects which slots receive weight decay.
    pub fn step(&mut self, params: &mut [&mut Vec<T>], grads: &[Vec<T>], decay: &[bool]) {
        let views: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        let dirs = self.directions(&views);
        let wd = T::lit(self.lr * self.weight_decay);
        for (slot, (p, d)) in params.iter_mut().zip(dirs).enumerate() {
            let apply_decay = self.weight_decay > 0.0 && decay.get(slot).copied().unwrap_or(false);
            for (pi, di) in p.iter_mut().zip(d) {
                if apply_decay {
                    *pi -= wd * *pi;
                }
                *pi -= di;
            }
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Linear warmup followed by cosine decay to zero.
    Cosine { warmup_epochs: usize },
}

impl Schedule {
    /// Multiplier for `epoch` (0-based) out of `total`.
    pub fn factor(&self, epoch: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { warmup_epochs } => {
                let warm = warmup_epochs.min(total.saturating_sub(1));
                if epoch < warm {
                    (epoch + 1) as f64 / (warm + 1) as f64
                } else {
                    let span = (total - warm).max(1) as f64;
                    let progress = (epoch - warm) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_gives_zero_direction() {
        let mut adam = Adam::<f64>::new(0.05, 0.5, 0.9);
        for _ in 0..5 {
            let d = adam.directions(&[&[0.0, 1.0]]);
            assert_eq!(d[0][0], 0.0);
            assert!(d[0][1] > 0.0);
        }
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut adam = Adam::<f64>::new(0.1, 0.9, 0.999);
        let d = adam.directions(&[&[3.0, -0.5]]);
        assert!((d[0][0] - 0.1).abs() < 1e-6);
        assert!((d[0][1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adamw_decays_only_flagged_slots() {
        let mut adam = Adam::<f64>::adamw(0.1, 0.5);
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        adam.step(&mut [&mut a, &mut b], &[vec![0.0], vec![0.0]], &[true, false]);
        assert!((a[0] - 0.95).abs() < 1e-12);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = Schedule::Cosine { warmup_epochs: 5 };
        assert!(s.factor(0, 100) < s.factor(4, 100));
        assert!((s.factor(5, 100) - 1.0).abs() < 1e-12);
        assert!(s.factor(99, 100) < 0.01);
        assert_eq!(Schedule::Constant.factor(7, 10), 1.0);
    }
}

use super::model::Param;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// One Adam step with bias correction at step `t` (1-based), in place.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) -> Result<()> {
    for (what, len) in [("gradient", grad.len()), ("first moment", m.len()), ("second moment", v.len())] {
        if len != param.len() {
            return Err(Error::shape("adam_step", what, param.len(), len));
        }
    }
    if t == 0 {
        return Err(Error::Param("adam step counter starts at 1".into()));
    }
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let c1 = T::lit(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(t as f64));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for a model's parameter list. Moments are allocated on
/// first use; frozen parameters and absent gradients are skipped.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub cfg: AdamConfig,
    t: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam_step", "parameter count", params.len(), grads.len()));
        }
        if self.moments.len() != params.len() {
            self.moments = vec![None; params.len()];
        }
        self.t += 1;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    "gradient shape",
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let n = p.value.numel();
            let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            adam_update(p.value.data_mut(), g.data(), m, v, self.t, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [0.3f64, -1.2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, [0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [0.5f64, -3.0, 1e-3] {
            let mut p = [1.0f64];
            let (mut m, mut v) = ([0.0], [0.0]);
            let cfg = AdamConfig::default();
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &cfg).unwrap();
            let want = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - want).abs() < 1e-15);
            assert!(((1.0 - p[0]) - cfg.lr * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn twenty_steps_match_scalar_recurrence() {
        let cfg = AdamConfig::with_lr(0.01);
        let grads: Vec<f64> = (1..=20).map(|i| ((i as f64) * 0.7).sin() * (1.0 + i as f64 / 10.0)).collect();
        // independent recurrence written with explicit powers
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-7);
        }
        let mut p = [0.5f64];
        let (mut mm, mut vv) = ([0.0], [0.0]);
        for (i, g) in grads.iter().enumerate() {
            adam_update(&mut p, &[*g], &mut mm, &mut vv, i as u64 + 1, &cfg).unwrap();
        }
        assert!((p[0] - x).abs() < 1e-10, "{} vs {x}", p[0]);
    }

    #[test]
    fn frozen_and_mismatched() {
        let mut params = vec![
            Param {
                name: "a".into(),
                value: Tensor::full(&[2], 1.0f64),
                trainable: false,
            },
            Param {
                name: "b".into(),
                value: Tensor::full(&[2], 1.0f64),
                trainable: true,
            },
        ];
        let g = Some(Tensor::full(&[2], 1.0));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &[g.clone(), g.clone()]).unwrap();
        assert_eq!(params[0].value.data(), &[1.0, 1.0]);
        assert!(params[1].value.data()[0] < 1.0);
        let bad = Some(Tensor::full(&[3], 1.0));
        assert!(matches!(opt.step(&mut params, &[None, bad]), Err(Error::Shape { .. })));
    }
}

//! Adam with an optional cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr · (1 + cos(π · t / T)) / 2` over the total step count `T`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 2e-4,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(
                "optimizer.lr must be finite and non-negative".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "optimizer.{name} must lie in [0, 1)"
                )));
            }
        }
        // Also rejects NaN.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) {
            return Err(Error::Config("optimizer.eps must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = if total == 0 {
                    0.0
                } else {
                    (step as f64 / total as f64).min(1.0)
                };
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: OptimConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: OptimConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            let mut z = ParamSet::new();
            for (name, t) in p.iter() {
                z.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            cfg,
            step: 0,
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::from_f64(lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let eps = T::from_f64(self.cfg.eps);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let m = self
                .m
                .get_mut(name)
                .expect("moment registered with its parameter");
            let v = self
                .v
                .get_mut(name)
                .expect("moment registered with its parameter");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0, 100), 2e-4);
        assert!(c.lr_at(100, 100).abs() < 1e-20);
        assert!((c.lr_at(50, 100) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr · sign(g) (up to eps).
        let mut p = ParamSet::<f64>::new();
        p.insert("a", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut g = ParamSet::<f64>::new();
        g.insert("a", Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut opt = Adam::new(OptimConfig::default(), &p);
        opt.update(&mut p, &g, 0.01).unwrap();
        let d = p.get("a").unwrap().data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::new(vec![1], vec![0.3]).unwrap());
        let before = p.clone();
        let mut g = ParamSet::<f32>::new();
        g.insert("a", Tensor::new(vec![1], vec![10.0]).unwrap());
        let mut opt = Adam::new(OptimConfig::default(), &p);
        opt.update(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }
}

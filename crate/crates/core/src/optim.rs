//! Adam and the cosine-annealing learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam state keyed by parameter path.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub step: u64,
    pub moments: IndexMap<String, Moments<T>>,
}

impl<T: Element> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> PartialEq for Adam<T> {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step && self.moments == other.moments
    }
}

impl<T: Element> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One Adam update over `(name, param, grad)` triples.
    ///
    /// Every gradient is checked before anything is modified; a non-finite
    /// gradient aborts the whole step and names the offending parameter.
    pub fn step<'a, I>(&mut self, lr: f64, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name} at optimizer step {}", self.step + 1),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, param, grad) in updates {
            let st = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(param.shape().to_vec()),
                    v: Tensor::zeros(param.shape().to_vec()),
                });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.to_f64();
                let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *p = T::from_f64(p.to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate with optional warm restarts:
///
/// `lr = η_min + ½(η_max − η_min)(1 + cos(π · T_cur / T_i))`
///
/// `T_cur` counts epochs since the last restart; `T_i` is the cycle length.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineSchedule {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_i: u32,
    pub t_cur: u32,
    /// Restart at `T_cur = T_i`; otherwise `T_cur` stays clamped there.
    pub restart: bool,
    /// Cycle length multiplier applied at each restart.
    pub t_mult: u32,
}

impl CosineSchedule {
    pub fn new(eta_min: f64, eta_max: f64, t_i: u32) -> Result<Self> {
        let s = CosineSchedule {
            eta_min,
            eta_max,
            t_i,
            t_cur: 0,
            restart: false,
            t_mult: 1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_restarts(mut self, t_mult: u32) -> Self {
        self.restart = true;
        self.t_mult = t_mult.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_i == 0 {
            return Err(Error::InvalidArgument("cosine schedule: T_i must be positive".into()));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cosine schedule: need 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_cur > self.t_i {
            return Err(Error::InvalidArgument(format!(
                "cosine schedule: T_cur {} exceeds T_i {}",
                self.t_cur, self.t_i
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self) -> Result<f64> {
        self.validate()?;
        Ok(cosine_lr(self.eta_min, self.eta_max, self.t_cur as f64, self.t_i as f64))
    }

    /// Advances one epoch.
    pub fn epoch_tick(&mut self) {
        self.t_cur += 1;
        if self.t_cur >= self.t_i && self.restart {
            self.t_cur = 0;
            self.t_i = self.t_i.saturating_mul(self.t_mult);
        } else if self.t_cur > self.t_i {
            self.t_cur = self.t_i;
        }
    }
}

pub fn cosine_lr(eta_min: f64, eta_max: f64, t_cur: f64, t_i: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
}

//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::sparse::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per trainable tensor, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update at learning rate `lr`. Tensors without a gradient are skipped.
    pub fn update<P: Parameters<f64> + ?Sized>(&mut self, params: &mut P, lr: f64) -> Result<()> {
        let init = self.names.is_empty();
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..
        } = self.cfg;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut k = 0;
        let mut err = None;
        params.visit_params(&mut |p| {
            let Some(g) = p.grad else { return };
            if init {
                self.names.push(p.name.clone());
                self.m.push(vec![0.0; p.value.len()]);
                self.v.push(vec![0.0; p.value.len()]);
            } else if self.names.get(k) != Some(&p.name) || self.m[k].len() != p.value.len() {
                err.get_or_insert_with(|| Error::ShapeMismatch(format!("optimizer state does not match `{}`", p.name)));
                k += 1;
                return;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * (mh / (vh.sqrt() + eps) + wd * p.value[i]);
            }
            k += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if k != self.names.len() {
            return Err(Error::ShapeMismatch("optimizer state covers a different parameter set".into()));
        }
        Ok(())
    }
}

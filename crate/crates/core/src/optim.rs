//! Adam with one learning rate per parameter group.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{Gradients, Model, ParamGroup, ParamId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_encoder: f64,
    pub lr_projection: f64,
    pub lr_classifier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_encoder: 1e-5,
            lr_projection: 1e-5,
            lr_classifier: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Projection => self.lr_projection,
            ParamGroup::Classifier => self.lr_classifier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_encoder, self.lr_projection, self.lr_classifier];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates. The classifier grows between tasks,
/// so moments are created lazily to match the current parameter shapes.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One Adam step. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.dim() != model.param(id).dim() {
                return Err(Error::contract(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    id.name(),
                    g.dim(),
                    model.param(id).dim()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training {
                    param: id.name().to_string(),
                    message: "non-finite gradient".into(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = model.params().map(|(_, p)| Array2::zeros(p.dim())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in ParamId::ALL {
            let k = id.index();
            let g = grads.get(id);
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            if m.dim() != g.dim() {
                // Classifier grew: keep moments of old rows, zero for new ones.
                let mut nm = Array2::zeros(g.dim());
                let mut nv = Array2::zeros(g.dim());
                let (r, c) = (m.nrows().min(g.nrows()), m.ncols().min(g.ncols()));
                nm.slice_mut(ndarray::s![..r, ..c]).assign(&m.slice(ndarray::s![..r, ..c]));
                nv.slice_mut(ndarray::s![..r, ..c]).assign(&v.slice(ndarray::s![..r, ..c]));
                *m = nm;
                *v = nv;
            }
            let lr = self.config.lr(id.group());
            let p = model.param_mut(id);
            ndarray::Zip::from(p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

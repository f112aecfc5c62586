use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{ParamSet, ParamView, Submodule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adaptive moment estimation over one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) t: u64,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_with_lr(params, grads, self.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Optimizer for generator parameters that only touches the submodules of
/// a [`ParamView`]. Moment state is kept per submodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub(crate) adam: BTreeMap<Submodule, Adam>,
}

impl ParamOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            adam: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        view: &ParamView,
    ) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::Dimension(
                "gradient layout differs from parameters".into(),
            ));
        }
        for m in view.iter() {
            let p = params.get_mut(m);
            let g = grads.get(m);
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g).for_each(|(x, d)| *x -= self.lr * d),
                OptimizerKind::Adam => self
                    .adam
                    .entry(m)
                    .or_insert_with(|| Adam::new(self.lr, p.len()))
                    .step_with_lr(p, g, self.lr)?,
            }
        }
        Ok(())
    }
}

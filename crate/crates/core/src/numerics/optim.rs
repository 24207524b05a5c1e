use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamGroup, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            _ => Err(format!("unknown optimizer {s:?} (expected adam or rmsprop)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSProp decay.
    pub alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam()
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            eps: 1e-6,
            beta1: 0.99,
            beta2: 0.999,
            alpha: 0.99,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            lr: 5e-4,
            eps: 0.01,
            beta1: 0.99,
            beta2: 0.999,
            alpha: 0.99,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Moment buffers and step counter for one parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn second_moment(&self, idx: usize) -> Option<&Tensor> {
        self.second.get(idx).and_then(Option::as_ref)
    }

    pub fn first_moment(&self, idx: usize) -> Option<&Tensor> {
        self.first.get(idx).and_then(Option::as_ref)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), NumericsError> {
        self.step_groups(params, grads, |_| true)
    }

    /// Like [`Optimizer::step`] but only touches parameters whose group
    /// passes `keep`. Parameters without a gradient keep their value and
    /// their moments.
    pub fn step_groups(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        keep: impl Fn(ParamGroup) -> bool,
    ) -> Result<(), NumericsError> {
        for g in grads.params().iter().flatten() {
            if !g.is_finite() {
                return Err(NumericsError::NonFinite("optimizer gradient"));
            }
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            if !keep(params.group(id)) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(NumericsError::Shape {
                    op: "optimizer",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            match c.kind {
                OptimizerKind::Adam => {
                    let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::Rmsprop => {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = c.alpha * *vi + (1.0 - c.alpha) * gi * gi;
                        *w -= c.lr * gi / (vi.sqrt() + c.eps);
                    }
                }
            }
            if !p.is_finite() {
                return Err(NumericsError::NonFinite("optimizer update"));
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

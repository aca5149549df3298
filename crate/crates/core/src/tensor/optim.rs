use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerMode {
    /// SGD with Nesterov momentum: `v ← μv + g`, `p ← p − lr·(g + μv)`.
    SgdNesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Which entries of a parameter an update may touch. Frozen entries keep
/// both their value and their accumulators.
#[derive(Debug, Clone, PartialEq)]
pub enum Touch {
    All,
    Frozen,
    Mask(Vec<bool>),
}

impl Touch {
    fn allows(&self, i: usize) -> bool {
        match self {
            Touch::All => true,
            Touch::Frozen => false,
            Touch::Mask(m) => m[i],
        }
    }

    /// Union of two touch sets over the same parameter.
    pub fn union(&self, other: &Touch) -> Touch {
        match (self, other) {
            (Touch::All, _) | (_, Touch::All) => Touch::All,
            (Touch::Frozen, t) | (t, Touch::Frozen) => t.clone(),
            (Touch::Mask(a), Touch::Mask(b)) => {
                Touch::Mask(a.iter().zip(b).map(|(&x, &y)| x || y).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub mode: OptimizerMode,
    pub learning_rate: f64,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn sgd_nesterov(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        OptimizerState::new(OptimizerMode::SgdNesterov { momentum }, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        OptimizerState::new(
            OptimizerMode::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        )
    }

    pub fn new(mode: OptimizerMode, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if let OptimizerMode::Adam { beta1, beta2, .. } = mode {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config("adam betas must lie in [0, 1)".into()));
            }
        }
        Ok(OptimizerState {
            mode,
            learning_rate,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `touch`, when given, restricts which entries of
    /// each parameter move.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], touch: Option<&[Touch]>) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Length(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some(t) = touch {
            if t.len() != params.len() {
                return Err(Error::Length(format!("{} touch sets for {} parameters", t.len(), params.len())));
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(Error::shape("optimizer_step", params.tensor(i).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter `{}`",
                    params.name(i)
                )));
            }
        }
        if self.first.is_empty() {
            self.first = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
            if matches!(self.mode, OptimizerMode::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().enumerate().any(|(i, a)| a.shape() != params.tensor(i).shape())
        {
            return Err(Error::Contract("optimizer accumulators do not match parameters".into()));
        }

        self.steps += 1;
        let lr = self.learning_rate;
        let all = Touch::All;
        for (i, g) in grads.iter().enumerate() {
            let touch = touch.map_or(&all, |t| &t[i]);
            if *touch == Touch::Frozen {
                continue;
            }
            let p = params.tensor_mut(i).data_mut();
            let g = g.data();
            match self.mode {
                OptimizerMode::SgdNesterov { momentum } => {
                    let v = self.first[i].data_mut();
                    for j in 0..p.len() {
                        if !touch.allows(j) {
                            continue;
                        }
                        v[j] = momentum * v[j] + g[j];
                        p[j] -= lr * (g[j] + momentum * v[j]);
                    }
                }
                OptimizerMode::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for j in 0..p.len() {
                        if !touch.allows(j) {
                            continue;
                        }
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

/// Mini-batch gradient descent, optionally with per-parameter adaptive
/// step sizes (first and second moment estimates).
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies the accumulated gradients of `params` (all store entries when
    /// `None`) and leaves the accumulators untouched.
    pub fn step(&mut self, store: &mut ParamStore, params: Option<&[ParamId]>) {
        let ids: Vec<ParamId> = match params {
            Some(ids) => ids.to_vec(),
            None => store.ids().collect(),
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let grad = store.grad(id).clone();
                    for (w, g) in store.value_mut(id).data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() < store.len() {
                    for id in store.ids().skip(self.m.len()) {
                        self.m.push(Tensor::zeros(store.value(id).shape()));
                        self.v.push(Tensor::zeros(store.value(id).shape()));
                    }
                }
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for id in ids {
                    let i = id.index();
                    let grad = store.grad(id).clone();
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    let w = store.value_mut(id).data_mut();
                    for k in 0..w.len() {
                        let g = grad.data()[k];
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{forward_backward, Graph};

    fn minimise(kind: OptimizerKind, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![3.0])).unwrap();
        let mut opt = Optimizer::new(kind, lr);
        let build = move |g: &mut Graph<'_>| {
            let v = g.param(x);
            let s = g.square(v)?;
            g.sum(s)
        };
        for _ in 0..500 {
            store.zero_grads();
            forward_backward(&build, &mut store).unwrap();
            opt.step(&mut store, None);
        }
        store.value(x).data()[0]
    }

    #[test]
    fn both_optimizers_descend() {
        assert!(minimise(OptimizerKind::Sgd, 0.1).abs() < 1e-6);
        assert!(minimise(OptimizerKind::Adam, 0.05).abs() < 0.05);
    }
}

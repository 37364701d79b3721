//! RMSProp with global gradient-norm clipping.

use std::collections::BTreeMap;

use ndarray::Zip;

use super::{AdError, AdResult, Arr, ParameterSet};

/// Per-parameter running mean-square accumulators plus hyperparameters.
pub struct RmsPropState {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    acc: BTreeMap<String, Arr>,
}

impl RmsPropState {
    pub fn new(lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            acc: BTreeMap::new(),
        }
    }

    pub fn accumulators(&self) -> impl Iterator<Item = (&str, &Arr)> + '_ {
        self.acc.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_accumulator(&mut self, name: &str, acc: Arr) {
        self.acc.insert(name.to_string(), acc);
    }
}

/// RMSProp optimizer over one [`ParameterSet`].
pub struct RmsProp {
    pub state: RmsPropState,
    pub grad_clip: f64,
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64, eps: f64, grad_clip: f64) -> Self {
        Self {
            state: RmsPropState::new(lr, alpha, eps),
            grad_clip,
        }
    }

    /// One update:
    ///   g   <- grad, rescaled so the global L2 norm is at most `grad_clip`
    ///   acc <- alpha * acc + (1 - alpha) * g^2
    ///   p   <- p - lr * g / sqrt(acc + eps)
    /// Gradients are cleared afterwards. Every trainable parameter must have
    /// a gradient.
    pub fn step(&mut self, params: &ParameterSet) -> AdResult<()> {
        let mut grads: Vec<(String, super::Value, Arr)> = Vec::new();
        for (name, value) in params.trainable() {
            let g = value
                .grad()
                .ok_or_else(|| AdError::MissingGradient(name.to_string()))?;
            grads.push((name.to_string(), value, g));
        }
        let norm = grads
            .iter()
            .map(|(_, _, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let (lr, alpha, eps) = (self.state.lr, self.state.alpha, self.state.eps);
        for (name, value, mut g) in grads {
            if scale != 1.0 {
                g.mapv_inplace(|x| x * scale);
            }
            let acc = self
                .state
                .acc
                .entry(name)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let mut data = value.data_clone();
            Zip::from(&mut data)
                .and(acc)
                .and(&g)
                .for_each(|p, a, &gi| {
                    *a = alpha * *a + (1.0 - alpha) * gi * gi;
                    *p -= lr * gi / (*a + eps).sqrt();
                });
            value.set_data(data);
            value.zero_grad();
        }
        Ok(())
    }
}

/// Global L2 norm over the gradients of all trainable parameters.
pub fn global_grad_norm(params: &ParameterSet) -> f64 {
    params
        .trainable()
        .filter_map(|(_, v)| v.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

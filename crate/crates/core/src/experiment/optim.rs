use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter so far.
    pub steps: u64,
}

/// Adam with decoupled weight decay. Biases, norm weights and learnable
/// tokens are not decayed. Parameters without a gradient in a step are left
/// untouched, decay included.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, Moments>,
}

pub fn decays(name: &str, rank: usize) -> bool {
    rank > 1 && !["cls_token", "mask_token", "pos_embed"].iter().any(|t| name.ends_with(t))
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr`. Returns the names of the
    /// parameters that moved.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<Vec<String>> {
        let mut touched = Vec::new();
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let theta = var.as_tensor().detach();
            let slot = match self.state.remove(&name) {
                Some(s) => s,
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                    steps: 0,
                },
            };
            let t = slot.steps + 1;
            let m = ((&slot.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / (1.0 - self.beta1.powi(t as i32)))?;
            let v_hat = (&v / (1.0 - self.beta2.powi(t as i32)))?;
            let mut next = theta.clone();
            if decays(&name, theta.rank()) && self.weight_decay != 0.0 {
                next = (&next * (1.0 - lr * self.weight_decay))?;
            }
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            next = (next - (update * lr)?)?;
            var.set(&next)?;
            self.state.insert(name.clone(), Moments { m, v, steps: t });
            touched.push(name);
        }
        Ok(touched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let w = store.scope("", true).get("w", &[2, 2], Init::Values(vec![1.0, -1.0, 2.0, 0.5])).unwrap();
        let b = store.scope("", true).get("b", &[2], Init::Values(vec![3.0, 3.0])).unwrap();
        let _unused = store.scope("", true).get("u", &[2, 2], Init::Ones).unwrap();
        let loss = ((w.sum_all().unwrap() * 2.0).unwrap() + b.sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(0.9, 0.95, 0.5);
        let touched = opt.step(&store, &grads, 0.1).unwrap();
        assert_eq!(touched, vec!["b".to_string(), "w".to_string()]);
        // decoupled decay then a unit bias-corrected Adam step
        let w1 = store.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b0) in w1.iter().zip([1.0, -1.0, 2.0, 0.5]) {
            let expected = b0 * (1.0 - 0.05) - 0.1 * (2.0 / (2.0 + 1e-8));
            assert!((a - expected).abs() < 1e-12);
        }
        // biases are not decayed
        let b1 = store.get("b").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!((b1[0] - (3.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        // no gradient, no change
        let u = store.get("u").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(u, vec![1.0; 4]);
        assert!(!opt.state.contains_key("u"));
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays("encoder.blocks.0.attn.qkv.weight", 2));
        assert!(!decays("encoder.blocks.0.norm1.weight", 1));
        assert!(!decays("encoder.cls_token", 3));
        assert!(!decays("decoder.mask_token", 3));
    }
}

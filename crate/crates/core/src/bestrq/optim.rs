use crate::error::{Error, Result};
use crate::tensorcore::nn::{named_parameters, Module};
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the full gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction. Moment buffers follow the module's parameter
/// visiting order and are keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, module: &dyn Module) -> Self {
        let params = named_parameters(module);
        Adam {
            config,
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// L2 norm of the module's accumulated gradient.
    pub fn grad_norm(module: &dyn Module) -> f64 {
        let mut sq = 0.0;
        module.visit("", &mut |_, t| {
            if let Some(g) = t.grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        });
        sq.sqrt()
    }

    /// One update from the gradients currently stored on `module`'s
    /// parameters. Parameters are replaced by fresh leaves.
    pub fn update(&mut self, module: &mut dyn Module) -> Result<()> {
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = Adam::grad_norm(module);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let mut k = 0;
        let mut res = Ok(());
        module.visit_mut("", &mut |name, p| {
            if res.is_err() {
                return;
            }
            if self.names.get(k).map(String::as_str) != Some(name) || self.m[k].len() != p.numel() {
                res = Err(Error::Contract(format!(
                    "optimizer state does not match parameter {name}"
                )));
                return;
            }
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut w = p.to_vec();
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                w[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
            match Tensor::param(w, p.shape()) {
                Ok(t) => *p = t,
                Err(e) => res = Err(e),
            }
            k += 1;
        });
        res?;
        if k != self.names.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, module has {k}",
                self.names.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::backward;
    use crate::tensorcore::nn::Linear;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut l = Linear::new(1, "l", 3, 2, true).unwrap();
        let before = l.weight.to_vec();
        let x = Tensor::new(vec![1.0, -2.0, 0.5], &[1, 3]).unwrap();
        backward(&l.forward(&x).unwrap().sum_all().unwrap()).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                clip_norm: None,
                ..Default::default()
            },
            &l,
        );
        opt.update(&mut l).unwrap();
        for ((a, b), xi) in before.iter().zip(l.weight.data()).zip([1.0, 1.0, -2.0, -2.0, 0.5, 0.5]) {
            let expect = a - 1e-3 * f64::signum(xi);
            assert!((b - expect).abs() < 1e-9, "{b} vs {expect}");
        }
        assert!(l.weight.grad().is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut l = Linear::new(2, "l", 2, 1, false).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &l,
        );
        let x = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        for _ in 0..500 {
            let y = l.forward(&x).unwrap();
            backward(&y.mul(&y).unwrap().sum_all().unwrap()).unwrap();
            opt.update(&mut l).unwrap();
        }
        assert!(l.weight.data().iter().all(|w| w.abs() < 1e-2), "{:?}", l.weight.data());
    }
}

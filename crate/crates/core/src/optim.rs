//! Adaptive optimizer with decoupled weight decay and global-norm gradient
//! clipping. Only trainable tensors are ever updated; frozen tensors are
//! untouchable by construction.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::{s, to_f64, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamWCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWCfg {
    fn default() -> Self {
        AdamWCfg {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl AdamWCfg {
    pub fn from_train(t: &crate::config::TrainCfg) -> Self {
        AdamWCfg {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
        }
    }
}

/// Diagnostics from one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// True when the clip ceiling rescaled the update.
    pub clipped: bool,
}

pub struct AdamW<T: Scalar> {
    pub cfg: AdamWCfg,
    step: u64,
    m: BTreeMap<String, Array2<T>>,
    v: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWCfg) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients must address trainable tensors only and
    /// must be finite; moment buffers are created lazily per tensor.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Array2<T>>,
    ) -> Result<StepStats> {
        // Validate everything before mutating anything.
        let mut sq_sum = 0.0f64;
        for (name, g) in grads {
            if !store.contains(name) {
                return Err(Error::numeric(format!("gradient for unknown tensor {name}")));
            }
            if !store.is_trainable(name) {
                return Err(Error::numeric(format!("gradient for frozen tensor {name}")));
            }
            if store.get(name).raw_dim() != g.raw_dim() {
                return Err(Error::numeric(format!("gradient shape mismatch for {name}")));
            }
            for &x in g.iter() {
                let x = to_f64(x);
                if !x.is_finite() {
                    return Err(Error::numeric(format!("non-finite gradient in {name}")));
                }
                sq_sum += x * x;
            }
        }
        let grad_norm = sq_sum.sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / grad_norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let (lr, eps, wd) = (self.cfg.lr, self.cfg.eps, self.cfg.weight_decay);

        for (name, g) in grads {
            let param = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(param.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(param.raw_dim()));
            Zip::from(&mut *param)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &gr| {
                    let gr = to_f64(gr) * scale;
                    let mf = b1 * to_f64(*m) + (1.0 - b1) * gr;
                    let vf = b2 * to_f64(*v) + (1.0 - b2) * gr * gr;
                    *m = s(mf);
                    *v = s(vf);
                    let step = lr * (mf / bias1) / ((vf / bias2).sqrt() + eps);
                    let decay = lr * wd * to_f64(*p);
                    *p = s(to_f64(*p) - step - decay);
                });
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

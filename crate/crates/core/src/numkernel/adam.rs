use indexmap::IndexMap;

use super::{Float, KernelError, Tensor};

/// Adam with bias correction and a per-epoch multiplicative lr decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_decay: f64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f64, lr_decay: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..=1.0).contains(&lr_decay), "lr decay must lie in [0, 1]");
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn decay_lr(&mut self) {
        self.lr *= self.lr_decay;
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    pub fn step<T: Float>(
        &mut self,
        params: &mut IndexMap<String, Tensor<T>>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<(), KernelError> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                None => return Err(KernelError::Contract(format!("no gradient for parameter {name}"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(KernelError::Dimension {
                        op: "adam_step",
                        detail: format!("{name}: grad {:?} for param {:?}", g.shape(), p.shape()),
                    })
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                let mn = b1 * (*mi as f64) + (1.0 - b1) * gi;
                let vn = b2 * (*vi as f64) + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

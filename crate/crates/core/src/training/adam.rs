use crate::error::{Error, Result};
use crate::policy::PolicyParameters;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: PolicyParameters,
    v: PolicyParameters,
    t: i32,
}

impl Adam {
    pub fn new(like: &PolicyParameters, lr: f64) -> Self {
        Adam {
            lr,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut PolicyParameters, grads: &PolicyParameters) -> Result<()> {
        if !params.same_shape(grads) {
            return Err(Error::Dimension("gradient shape differs from parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &g) in g.data().iter().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

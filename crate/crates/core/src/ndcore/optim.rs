use super::{Tensor, TensorError};

/// Clamp every gradient entry into `[lo, hi]` in place.
pub fn clip_gradients(grads: &mut [Tensor], lo: f64, hi: f64) -> Result<(), TensorError> {
    if lo > hi {
        return Err(TensorError::Invalid { op: "clip_gradients", detail: format!("lo {lo} > hi {hi}") });
    }
    for g in grads {
        for v in g.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(())
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-4;
    pub const DEFAULT_BETA1: f64 = 0.5;
    pub const DEFAULT_BETA2: f64 = 0.9;

    pub fn new(params: &[&Tensor], lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, state: AdamState { step: 0, m: zeros.clone(), v: zeros } }
    }

    pub fn with_defaults(params: &[&Tensor]) -> Self {
        Self::new(params, Self::DEFAULT_LR, Self::DEFAULT_BETA1, Self::DEFAULT_BETA2)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.state.m.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.state.m[i].shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::row(vec![20.0, -20.0, 3.7]), Tensor::row(vec![-100.0, 0.0, 100.0])];
        clip_gradients(&mut g, -15.0, 15.0).unwrap();
        assert_eq!(g[0].data(), &[15.0, -15.0, 3.7]);
        assert_eq!(g[1].data(), &[-15.0, 0.0, 15.0]);
        assert!(clip_gradients(&mut g, 1.0, -1.0).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut adam = Adam::with_defaults(&[&p]);
        adam.step(&mut [&mut p], &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step: m̂ = g, v̂ = g², update = lr * g / (|g| + eps).
        let mut p = Tensor::row(vec![0.0, 0.0, 0.0]);
        let mut adam = Adam::with_defaults(&[&p]);
        adam.step(&mut [&mut p], &[Tensor::row(vec![0.3, -7.0, 1e3])]).unwrap();
        for (&v, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 1e-4).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn defaults() {
        let adam = Adam::with_defaults(&[]);
        assert_eq!((adam.lr, adam.beta1, adam.beta2), (1e-4, 0.5, 0.9));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::row(vec![0.0; 2]);
        let mut adam = Adam::with_defaults(&[&p]);
        assert!(adam.step(&mut [&mut p], &[Tensor::zeros(&[1, 3])]).is_err());
    }
}

//! Adam and the warmup-plus-cosine learning-rate schedule.

use crate::real::Real;
use crate::tensor::Tensor;
use ndarray::Array2;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 7e-5;

/// Adam with bias correction. Parameters without a gradient this step are
/// skipped; applying a step consumes (clears) the gradients.
pub struct Adam<R: Real> {
    params: Vec<Tensor<R>>,
    m: Vec<Array2<R>>,
    v: Vec<Array2<R>>,
    t: usize,
}

impl<R: Real> Adam<R> {
    pub fn new(params: Vec<Tensor<R>>) -> Self {
        let m = params.iter().map(|p| Array2::zeros(p.shape())).collect();
        let v = params.iter().map(|p| Array2::zeros(p.shape())).collect();
        Adam { params, m, v, t: 0 }
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let b1 = R::from_f64(BETA1);
        let b2 = R::from_f64(BETA2);
        let eps = R::from_f64(EPS);
        let corr1 = R::from_f64(1.0 - BETA1.powi(self.t as i32));
        let corr2 = R::from_f64(1.0 - BETA2.powi(self.t as i32));
        let lr = R::from_f64(lr);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let mut value = p.to_owned_value();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mv, vv), (pv, gv)) in
                m.iter_mut().zip(v.iter_mut()).zip(value.iter_mut().zip(g.iter()))
            {
                *mv = b1 * *mv + (R::one() - b1) * *gv;
                *vv = b2 * *vv + (R::one() - b2) * *gv * *gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
            p.set_value(value);
            p.zero_grad();
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

/// Linear warmup over the first `warmup_frac` of steps, then cosine decay
/// to zero. `step` counts from 0.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

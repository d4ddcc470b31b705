//! Adam with L2 weight decay and a per-epoch cosine schedule.

use std::f64::consts::PI;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr · ½(1 + cos(π·epoch/total_epochs))`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let e = epoch.min(total_epochs) as f64;
    base_lr * 0.5 * (1.0 + (PI * e / total_epochs as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub total_epochs: usize,
    pub base_lr: f64,
}

impl ScheduleState {
    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.epoch, self.total_epochs)
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state over the trainable tensors of an [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    /// `None` for frozen tensors.
    pub moments: Vec<Option<Moments>>,
    pub step: u64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(params: &EncoderParams, trainable: &[bool], weight_decay: f64) -> Result<Self> {
        let tensors = params.tensors();
        if trainable.len() != tensors.len() {
            return Err(Error::DimensionMismatch {
                axis: "trainable flags".into(),
                expected: tensors.len(),
                actual: trainable.len(),
            });
        }
        let moments = tensors
            .iter()
            .zip(trainable)
            .map(|((_, data), &t)| {
                t.then(|| Moments {
                    m: vec![0.0; data.len()],
                    v: vec![0.0; data.len()],
                })
            })
            .collect();
        Ok(Self {
            moments,
            step: 0,
            weight_decay,
        })
    }

    pub fn is_trainable(&self, tensor: usize) -> bool {
        self.moments[tensor].is_some()
    }

    /// One bias-corrected update; frozen tensors are not read or written.
    pub fn step(&mut self, params: &mut EncoderParams, grad: &EncoderParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let wd = self.weight_decay;
        for ((slot, (_, p)), (_, g)) in self.moments.iter_mut().zip(params.tensors_mut()).zip(grad.tensors()) {
            let Some(mom) = slot else { continue };
            for i in 0..p.len() {
                let gi = g[i] + wd * p[i];
                mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * gi;
                mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = mom.m[i] / c1;
                let vhat = mom.v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderDims, FreezeMask};
    use crate::rng::substream;
    use crate::TrainConfig;

    fn tiny() -> EncoderParams {
        let cfg = TrainConfig {
            frames: 2,
            height: 8,
            width: 8,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            patch_t: 2,
            patch_hw: 4,
            d_proj: 4,
            num_classes: 3,
            ..Default::default()
        };
        EncoderParams::init(EncoderDims::from_config(&cfg), &mut substream(1, "init", 0)).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for e in 0..=10 {
            let lr = cosine_lr(0.1, e, 10);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = tiny();
        let before = p.clone();
        let flags = vec![true; p.tensors().len()];
        let mut opt = Adam::new(&p, &flags, 0.0).unwrap();
        let g = p.zeros_like();
        for _ in 0..3 {
            opt.step(&mut p, &g, 0.01);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_tensors_untouched() {
        let mut p = tiny();
        let mask = FreezeMask::from_fraction(2, 0.5).unwrap();
        let flags: Vec<bool> = p.infos().iter().map(|i| !mask.is_frozen(i.layer)).collect();
        let mut opt = Adam::new(&p, &flags, 1e-3).unwrap();
        let mut g = p.zeros_like();
        for (_, d) in g.tensors_mut() {
            d.fill(1.0);
        }
        let before = p.clone();
        opt.step(&mut p, &g, 0.01);
        for (((info, a), (_, b)), frozen) in p.tensors().into_iter().zip(before.tensors()).zip(flags.iter().map(|f| !f)) {
            if frozen {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", info.name);
            } else {
                assert_ne!(a, b, "{}", info.name);
            }
        }
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and a single step decay:
/// `v <- momentum * v + g; p <- p - lr(epoch) * mult * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub base_lr: f32,
    pub momentum: f32,
    /// First epoch (0-based) that runs at `base_lr / 10`.
    pub decay_epoch: usize,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(base_lr: f32, momentum: f32, decay_epoch: usize) -> Result<Self> {
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {base_lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} must be in [0, 1)")));
        }
        Ok(SgdMomentum {
            base_lr,
            momentum,
            decay_epoch,
            velocity: Vec::new(),
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        if epoch < self.decay_epoch {
            self.base_lr
        } else {
            self.base_lr / 10.0
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Updates `params[i]` with `grads[i]` scaled by `lr_mults[i]`.
    /// Velocity buffers are created on the first call and pinned to those shapes.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        lr_mults: &[f32],
        epoch: usize,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lr_mults.len() {
            return Err(Error::shape(format!(
                "sgd: {} params, {} grads, {} multipliers",
                params.len(),
                grads.len(),
                lr_mults.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "sgd param {i}: {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect::<Result<_>>()?;
        } else if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.shape() != p.shape())
        {
            return Err(Error::shape("sgd: parameter set changed between steps"));
        }
        let lr = self.lr_at(epoch);
        for (((p, g), v), &mult) in params
            .iter_mut()
            .zip(grads)
            .zip(self.velocity.iter_mut())
            .zip(lr_mults)
        {
            let step = lr * mult;
            for ((pv, &gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + gv;
                *pv -= step * *vv;
            }
        }
        Ok(())
    }
}

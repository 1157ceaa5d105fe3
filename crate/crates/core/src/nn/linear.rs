use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{linalg, Tensor};

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).expect("shape unchanged")
}

/// Passes `grad_out` through where `x > 0`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Bias-free classifier: `logits[c] = dot(weight[c], h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (classes, in_dim)
    pub weight: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor) -> Result<Self> {
        match weight.shape() {
            [p, _] if *p >= 2 => Ok(Linear { weight }),
            s => Err(Error::shape(format!(
                "linear weight must be (classes >= 2, in_dim), got {s:?}"
            ))),
        }
    }

    pub fn init(rng: &mut Rng, in_dim: usize, classes: usize) -> Result<Self> {
        Linear::init_bounded(rng, in_dim, classes, super::fan_in_bound(in_dim))
    }

    pub fn init_bounded(rng: &mut Rng, in_dim: usize, classes: usize, a: f32) -> Result<Self> {
        Linear::new(Tensor::uniform(rng, &[classes, in_dim], -a, a)?)
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, h: &[f32]) -> Result<Vec<f32>> {
        self.check_len(h.len())?;
        Ok(self
            .weight
            .data()
            .chunks(self.in_dim())
            .map(|row| linalg::dot(row, h))
            .collect())
    }

    /// Returns `(grad_h, grad_weight)`.
    pub fn backward(&self, h: &[f32], grad_logits: &[f32]) -> Result<(Vec<f32>, Tensor)> {
        let x = Tensor::from_vec(&[1, h.len()], h.to_vec())?;
        let g = Tensor::from_vec(&[1, grad_logits.len()], grad_logits.to_vec())?;
        let (gx, gw) = self.backward_batch(&x, &g)?;
        Ok((gx.into_data(), gw))
    }

    /// `(N, in_dim) -> (N, classes)`
    pub fn forward_batch(&self, h: &Tensor) -> Result<Tensor> {
        let (n, d) = self.batch_dims(h)?;
        let p = self.classes();
        let mut out = vec![0.0f32; n * p];
        linalg::gemm_nt(n, d, p, h.data(), self.weight.data(), &mut out);
        Tensor::from_vec(&[n, p], out)
    }

    pub fn backward_batch(&self, h: &Tensor, grad_logits: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, d) = self.batch_dims(h)?;
        let p = self.classes();
        if grad_logits.shape() != [n, p] {
            return Err(Error::shape(format!(
                "linear grad {:?}, expected [{n}, {p}]",
                grad_logits.shape()
            )));
        }
        let mut gh = vec![0.0f32; n * d];
        linalg::gemm_nn(n, p, d, grad_logits.data(), self.weight.data(), &mut gh);
        let mut gw = vec![0.0f32; p * d];
        linalg::gemm_tn(p, n, d, grad_logits.data(), h.data(), &mut gw);
        Ok((Tensor::from_vec(&[n, d], gh)?, Tensor::from_vec(&[p, d], gw)?))
    }

    fn batch_dims(&self, h: &Tensor) -> Result<(usize, usize)> {
        match h.shape() {
            [n, d] => {
                self.check_len(*d)?;
                Ok((*n, *d))
            }
            s => Err(Error::shape(format!("linear input must be (N, D), got {s:?}"))),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.in_dim() {
            return Err(Error::shape(format!(
                "linear expects length {}, got {len}",
                self.in_dim()
            )));
        }
        Ok(())
    }
}

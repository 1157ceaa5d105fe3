use crate::error::{Error, Result};
use crate::exec;
use crate::rng::Rng;
use crate::tensor::{linalg, Tensor};

/// 2-D cross-correlation with bias over NCHW input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Tensor,
    /// (out_channels)
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvGrads {
    pub fn zeros_like(layer: &Conv2d) -> ConvGrads {
        ConvGrads {
            weight: Tensor::zeros(layer.weight.shape()).expect("valid shape"),
            bias: Tensor::zeros(layer.bias.shape()).expect("valid shape"),
        }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "conv weight must be rank 4, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match {} output channels",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Weights uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in))`, zero bias.
    pub fn init(
        rng: &mut Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let a = super::fan_in_bound(in_channels * kernel * kernel);
        Conv2d::init_bounded(rng, in_channels, out_channels, kernel, stride, padding, a)
    }

    /// Weights uniform in `[-a, a)`, zero bias.
    pub fn init_bounded(
        rng: &mut Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        a: f32,
    ) -> Result<Self> {
        let weight = Tensor::uniform(rng, &[out_channels, in_channels, kernel, kernel], -a, a)?;
        Conv2d::new(weight, Tensor::zeros(&[out_channels])?, stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "input {h}x{w} (padding {}) smaller than kernel {kh}x{kw}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, Geometry)> {
        let [n, c, h, w] = match x.shape() {
            [n, c, h, w] => [*n, *c, *h, *w],
            s => return Err(Error::shape(format!("conv input must be NCHW, got {s:?}"))),
        };
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel();
        Ok((
            n,
            Geometry {
                c,
                h,
                w,
                kh,
                kw,
                oh,
                ow,
                stride: self.stride,
                pad: self.padding,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geometry(x)?;
        let cout = self.out_channels();
        let in_len = g.c * g.h * g.w;
        let out_len = cout * g.positions();
        let mut out = vec![0.0f32; n * out_len];
        exec::for_each_chunk_mut(&mut out, out_len, |i, dst| {
            let sample = &x.data()[i * in_len..(i + 1) * in_len];
            for (co, row) in dst.chunks_mut(g.positions()).enumerate() {
                row.fill(self.bias.data()[co]);
            }
            if g.is_pointwise() {
                linalg::gemm_nn(cout, g.c, g.positions(), self.weight.data(), sample, dst);
            } else {
                let cols = im2col(sample, &g);
                linalg::gemm_nn(
                    cout,
                    g.patch_len(),
                    g.positions(),
                    self.weight.data(),
                    &cols,
                    dst,
                );
            }
        });
        Tensor::from_vec(&[n, cout, g.oh, g.ow], out)
    }

    /// Gradients of the forward map with respect to input, weight and bias.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, ConvGrads)> {
        let (gx, grads) = self.backward_impl(x, grad_out, true)?;
        Ok((gx.expect("input gradient requested"), grads))
    }

    /// Parameter gradients only; skips the input-gradient scatter.
    pub fn backward_params(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        Ok(self.backward_impl(x, grad_out, false)?.1)
    }

    fn backward_impl(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        want_input: bool,
    ) -> Result<(Option<Tensor>, ConvGrads)> {
        let (n, g) = self.geometry(x)?;
        let cout = self.out_channels();
        let expected = [n, cout, g.oh, g.ow];
        if grad_out.shape() != expected {
            return Err(Error::shape(format!(
                "conv grad_out {:?}, expected {expected:?}",
                grad_out.shape()
            )));
        }
        let in_len = g.c * g.h * g.w;
        let out_len = cout * g.positions();
        let k = g.patch_len();
        let p = g.positions();

        let per_sample = exec::map_indexed(n, |i| {
            let sample = &x.data()[i * in_len..(i + 1) * in_len];
            let go = &grad_out.data()[i * out_len..(i + 1) * out_len];
            let cols_owned;
            let cols: &[f32] = if g.is_pointwise() {
                sample
            } else {
                cols_owned = im2col(sample, &g);
                &cols_owned
            };
            let mut gw = vec![0.0f32; cout * k];
            linalg::gemm_nt(cout, p, k, go, cols, &mut gw);
            let gb: Vec<f32> = go.chunks(p).map(|row| row.iter().sum()).collect();
            let gx = want_input.then(|| {
                let mut gcols = vec![0.0f32; k * p];
                linalg::gemm_tn(k, cout, p, self.weight.data(), go, &mut gcols);
                if g.is_pointwise() {
                    gcols
                } else {
                    col2im(&gcols, &g)
                }
            });
            (gx, gw, gb)
        });

        let mut gw = vec![0.0f32; cout * k];
        let mut gb = vec![0.0f32; cout];
        let mut gx = want_input.then(|| Vec::with_capacity(n * in_len));
        for (sx, sw, sb) in per_sample {
            gw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
            gb.iter_mut().zip(&sb).for_each(|(a, b)| *a += b);
            if let (Some(acc), Some(sx)) = (gx.as_mut(), sx) {
                acc.extend_from_slice(&sx);
            }
        }
        let grads = ConvGrads {
            weight: Tensor::from_vec(self.weight.shape(), gw)?,
            bias: Tensor::from_vec(&[cout], gb)?,
        };
        let gx = gx
            .map(|d| Tensor::from_vec(x.shape(), d))
            .transpose()?;
        Ok((gx, grads))
    }
}

/// Unfolds one (C, H, W) sample into a (C*kh*kw, oh*ow) patch matrix.
fn im2col(sample: &[f32], g: &Geometry) -> Vec<f32> {
    let p = g.positions();
    let mut cols = vec![0.0f32; g.patch_len() * p];
    for c in 0..g.c {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im(cols: &[f32], g: &Geometry) -> Vec<f32> {
    let p = g.positions();
    let mut out = vec![0.0f32; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

//! Horizontal pyramid pooling head.
//!
//! For every scale `n` in the pyramid the feature map is cut into `n` equal
//! horizontal bins. Each bin is pooled to one vector per sample, reduced by its
//! own 1x1 convolution, and scored by its own bias-free classifier. No
//! parameters are shared between bins, within or across scales.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{softmax_cross_entropy, Conv2d, ConvGrads, Init, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pooling {
    Avg,
    Max,
    AvgPlusMax,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Avg, Pooling::Max, Pooling::AvgPlusMax];

    fn uses_avg(self) -> bool {
        matches!(self, Pooling::Avg | Pooling::AvgPlusMax)
    }

    fn uses_max(self) -> bool {
        matches!(self, Pooling::Max | Pooling::AvgPlusMax)
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Avg => "avg",
            Pooling::Max => "max",
            Pooling::AvgPlusMax => "avg_plus_max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "avg" => Ok(Pooling::Avg),
            "max" => Ok(Pooling::Max),
            "avg_plus_max" | "avg+max" => Ok(Pooling::AvgPlusMax),
            other => Err(Error::invalid(format!(
                "unknown pooling `{other}` (expected avg, max or avg_plus_max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidConfig {
    /// Bin counts per scale, strictly increasing.
    pub scales: Vec<usize>,
    pub reduced_dim: usize,
    pub pooling: Pooling,
    pub num_classes: usize,
}

impl PyramidConfig {
    pub fn new(scales: Vec<usize>, reduced_dim: usize, pooling: Pooling, num_classes: usize) -> Result<Self> {
        let cfg = PyramidConfig {
            scales,
            reduced_dim,
            pooling,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::invalid("pyramid needs at least one scale"));
        }
        if self.scales[0] == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "scales {:?} must be positive and strictly increasing",
                self.scales
            )));
        }
        if self.reduced_dim == 0 {
            return Err(Error::invalid("reduced_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Checks that every scale divides the feature-map height.
    pub fn check_height(&self, height: usize) -> Result<()> {
        match self.scales.iter().find(|&&s| height % s != 0) {
            Some(s) => Err(Error::shape(format!(
                "feature height {height} is not divisible by scale {s}"
            ))),
            None => Ok(()),
        }
    }

    pub fn total_bins(&self) -> usize {
        self.scales.iter().sum()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.reduced_dim * self.total_bins()
    }

    /// `(scale_index, bin_index)` pairs in scale-major, top-to-bottom order.
    pub fn bins(&self) -> Vec<(usize, usize)> {
        self.scales
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| (0..n).map(move |j| (i, j)))
            .collect()
    }
}

/// Row range `[start, end)` of bin `j` when `height` rows are cut into `n` bins.
pub fn bin_rows(height: usize, n: usize, j: usize) -> (usize, usize) {
    let h = height / n;
    (j * h, (j + 1) * h)
}

fn nchw(f: &Tensor, what: &str) -> Result<[usize; 4]> {
    match f.shape() {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        s => Err(Error::shape(format!("{what} must be NCHW, got {s:?}"))),
    }
}

/// Cuts `f` into `n` equal horizontal bins of shape `(N, C, H/n, W)`.
pub fn slice_bins(f: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let [b, c, h, w] = nchw(f, "feature map")?;
    if n == 0 || h % n != 0 {
        return Err(Error::shape(format!(
            "height {h} cannot be cut into {n} equal bins"
        )));
    }
    let bh = h / n;
    (0..n)
        .map(|j| {
            let mut data = Vec::with_capacity(b * c * bh * w);
            for plane in f.data().chunks(h * w) {
                data.extend_from_slice(&plane[j * bh * w..(j + 1) * bh * w]);
            }
            Tensor::from_vec(&[b, c, bh, w], data)
        })
        .collect()
}

/// Pools a whole `(N, C, h, W)` bin to `(N, C)`.
pub fn pool_bin(bin: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let [_, _, h, _] = nchw(bin, "bin")?;
    pool_rows(bin, 0, h, pooling)
}

/// Pools rows `[r0, r1)` of every (sample, channel) plane to `(N, C)`.
pub(crate) fn pool_rows(f: &Tensor, r0: usize, r1: usize, pooling: Pooling) -> Result<Tensor> {
    let [b, c, h, w] = nchw(f, "feature map")?;
    if r0 >= r1 || r1 > h {
        return Err(Error::shape(format!("row range [{r0}, {r1}) invalid for height {h}")));
    }
    let count = ((r1 - r0) * w) as f32;
    let data = f
        .data()
        .chunks(h * w)
        .map(|plane| {
            let region = &plane[r0 * w..r1 * w];
            let mut out = 0.0f32;
            if pooling.uses_avg() {
                out += region.iter().sum::<f32>() / count;
            }
            if pooling.uses_max() {
                out += region.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            }
            out
        })
        .collect();
    Tensor::from_vec(&[b, c], data)
}

/// Adds the pooling gradient for rows `[r0, r1)` into `grad_f`.
/// Max routes to the first maximum in row-major order.
fn pool_rows_backward(
    f: &Tensor,
    r0: usize,
    r1: usize,
    pooling: Pooling,
    grad_pooled: &[f32],
    grad_f: &mut [f32],
) {
    let [_, _, h, w] = f.dims4();
    let count = ((r1 - r0) * w) as f32;
    for ((plane, gplane), &g) in f
        .data()
        .chunks(h * w)
        .zip(grad_f.chunks_mut(h * w))
        .zip(grad_pooled)
    {
        let region = &plane[r0 * w..r1 * w];
        let gregion = &mut gplane[r0 * w..r1 * w];
        if pooling.uses_avg() {
            let share = g / count;
            gregion.iter_mut().for_each(|v| *v += share);
        }
        if pooling.uses_max() {
            let mut best = 0;
            for (k, &v) in region.iter().enumerate() {
                if v > region[best] {
                    best = k;
                }
            }
            gregion[best] += g;
        }
    }
}

/// Intermediate and output values of every bin for a batch, in
/// [`PyramidConfig::bins`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BinFeatures {
    /// G: pooled bin vectors, each `(N, C_in)`.
    pub pooled: Vec<Tensor>,
    /// H: reduced bin vectors, each `(N, reduced_dim)`.
    pub reduced: Vec<Tensor>,
    /// Class scores, each `(N, classes)`.
    pub logits: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub reduce: Vec<ConvGrads>,
    pub classifiers: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidHead {
    pub config: PyramidConfig,
    /// One 1x1 conv (C_in -> reduced_dim) per bin.
    pub reduce: Vec<Conv2d>,
    /// One classifier (reduced_dim -> classes) per bin.
    pub classifiers: Vec<Linear>,
}

impl PyramidHead {
    pub fn init(config: PyramidConfig, in_channels: usize, rng: &mut Rng) -> Result<Self> {
        PyramidHead::init_with(config, in_channels, Init::default(), rng)
    }

    pub fn init_with(config: PyramidConfig, in_channels: usize, init: Init, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let bins = config.total_bins();
        let mut reduce = Vec::with_capacity(bins);
        let mut classifiers = Vec::with_capacity(bins);
        for _ in 0..bins {
            let a = init.bound(in_channels, false);
            reduce.push(Conv2d::init_bounded(rng, in_channels, config.reduced_dim, 1, 1, 0, a)?);
            let a = init.bound(config.reduced_dim, false);
            classifiers.push(Linear::init_bounded(rng, config.reduced_dim, config.num_classes, a)?);
        }
        Ok(PyramidHead {
            config,
            reduce,
            classifiers,
        })
    }

    pub fn from_parts(config: PyramidConfig, reduce: Vec<Conv2d>, classifiers: Vec<Linear>) -> Result<Self> {
        config.validate()?;
        let bins = config.total_bins();
        if reduce.len() != bins || classifiers.len() != bins {
            return Err(Error::shape(format!(
                "head needs {bins} reduction and classifier layers, got {} and {}",
                reduce.len(),
                classifiers.len()
            )));
        }
        let cin = reduce[0].in_channels();
        for (r, fc) in reduce.iter().zip(&classifiers) {
            if r.kernel() != (1, 1)
                || r.in_channels() != cin
                || r.out_channels() != config.reduced_dim
                || fc.in_dim() != config.reduced_dim
                || fc.classes() != config.num_classes
            {
                return Err(Error::shape("head layer shapes disagree with pyramid config"));
            }
        }
        Ok(PyramidHead {
            config,
            reduce,
            classifiers,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce[0].in_channels()
    }

    fn check_input(&self, f: &Tensor) -> Result<[usize; 4]> {
        let dims = nchw(f, "feature map")?;
        if dims[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "head expects {} channels, got {}",
                self.in_channels(),
                dims[1]
            )));
        }
        self.config.check_height(dims[2])?;
        Ok(dims)
    }

    fn bin_ranges(&self, height: usize) -> Vec<(usize, usize)> {
        self.config
            .bins()
            .into_iter()
            .map(|(i, j)| bin_rows(height, self.config.scales[i], j))
            .collect()
    }

    pub fn forward(&self, f: &Tensor) -> Result<BinFeatures> {
        let [n, c, h, _] = self.check_input(f)?;
        let ranges = self.bin_ranges(h);
        let d = self.config.reduced_dim;
        let per_bin = exec::map_indexed(ranges.len(), |k| -> Result<(Tensor, Tensor, Tensor)> {
            let (r0, r1) = ranges[k];
            let g = pool_rows(f, r0, r1, self.config.pooling)?;
            let hv = self.reduce[k]
                .forward(&g.clone().reshape(&[n, c, 1, 1])?)?
                .reshape(&[n, d])?;
            let logits = self.classifiers[k].forward_batch(&hv)?;
            Ok((g, hv, logits))
        });
        let mut out = BinFeatures {
            pooled: Vec::with_capacity(ranges.len()),
            reduced: Vec::with_capacity(ranges.len()),
            logits: Vec::with_capacity(ranges.len()),
        };
        for r in per_bin {
            let (g, hv, l) = r?;
            out.pooled.push(g);
            out.reduced.push(hv);
            out.logits.push(l);
        }
        Ok(out)
    }

    /// Only the reduced vectors, skipping classifiers.
    pub fn reduced_features(&self, f: &Tensor) -> Result<Vec<Tensor>> {
        let [n, c, h, _] = self.check_input(f)?;
        let ranges = self.bin_ranges(h);
        let d = self.config.reduced_dim;
        exec::map_indexed(ranges.len(), |k| {
            let (r0, r1) = ranges[k];
            let g = pool_rows(f, r0, r1, self.config.pooling)?;
            self.reduce[k].forward(&g.reshape(&[n, c, 1, 1])?)?.reshape(&[n, d])
        })
        .into_iter()
        .collect()
    }

    /// Gradient of the feature map and of all head parameters, given
    /// per-bin logit gradients. Recomputes the forward pass.
    pub fn backward(&self, f: &Tensor, grad_logits: &[Tensor]) -> Result<(Tensor, HeadGrads)> {
        let feats = self.forward(f)?;
        self.backward_cached(f, &feats, grad_logits)
    }

    pub fn backward_cached(
        &self,
        f: &Tensor,
        feats: &BinFeatures,
        grad_logits: &[Tensor],
    ) -> Result<(Tensor, HeadGrads)> {
        let [n, c, h, _] = self.check_input(f)?;
        let bins = self.config.total_bins();
        if grad_logits.len() != bins || feats.logits.len() != bins {
            return Err(Error::shape(format!(
                "expected {bins} per-bin gradients, got {}",
                grad_logits.len()
            )));
        }
        let d = self.config.reduced_dim;
        let per_bin = exec::map_indexed(bins, |k| -> Result<(Tensor, ConvGrads, Tensor)> {
            let (gh, gfc) = self.classifiers[k].backward_batch(&feats.reduced[k], &grad_logits[k])?;
            let gin = feats.pooled[k].clone().reshape(&[n, c, 1, 1])?;
            let (gg, gred) = self.reduce[k].backward(&gin, &gh.reshape(&[n, d, 1, 1])?)?;
            Ok((gg.reshape(&[n, c])?, gred, gfc))
        });
        let ranges = self.bin_ranges(h);
        let mut grad_f = vec![0.0f32; f.len()];
        let mut grads = HeadGrads {
            reduce: Vec::with_capacity(bins),
            classifiers: Vec::with_capacity(bins),
        };
        for (k, r) in per_bin.into_iter().enumerate() {
            let (gg, gred, gfc) = r?;
            let (r0, r1) = ranges[k];
            pool_rows_backward(f, r0, r1, self.config.pooling, gg.data(), &mut grad_f);
            grads.reduce.push(gred);
            grads.classifiers.push(gfc);
        }
        Ok((Tensor::from_vec(f.shape(), grad_f)?, grads))
    }
}

/// Sum over samples and bins of the per-bin cross-entropy, with per-bin
/// logit gradients. Each entry of `bin_logits` is `(N, classes)`.
pub fn hpm_loss(bin_logits: &[Tensor], labels: &[usize]) -> Result<(f32, Vec<Tensor>)> {
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(bin_logits.len());
    for logits in bin_logits {
        let (n, p) = match logits.shape() {
            [n, p] => (*n, *p),
            s => return Err(Error::shape(format!("bin logits must be (N, P), got {s:?}"))),
        };
        if n != labels.len() {
            return Err(Error::shape(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        let mut g = Vec::with_capacity(n * p);
        for (row, &label) in logits.data().chunks(p).zip(labels) {
            let (loss, grow) = softmax_cross_entropy(row, label)?;
            total += f64::from(loss);
            g.extend_from_slice(&grow);
        }
        grads.push(Tensor::from_vec(&[n, p], g)?);
    }
    Ok((total as f32, grads))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_bin(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

//! Dense row-major `f32` arrays of rank 1 to 4.
//!
//! Rank-4 tensors use (batch, channel, height, width) order. Lower-rank
//! tensors index as if padded with leading unit extents, so a `[C, H, W]`
//! image and a `[1, C, H, W]` batch share element addressing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"HPMT";
pub const FORMAT_VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent {pos} of {shape:?} is zero"
        )));
    }
    shape.iter().try_fold(1usize, |acc, &e| {
        acc.checked_mul(e)
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
    })
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Elements drawn uniformly from `[lo, hi)`.
    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "uniform bounds need lo < hi, got [{lo}, {hi})"
            )));
        }
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| rng.uniform_f32(lo, hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Shape padded with leading ones to (n, c, h, w).
    pub fn dims4(&self) -> [usize; 4] {
        let mut d = [1usize; 4];
        let off = MAX_RANK - self.shape.len();
        d[off..].copy_from_slice(&self.shape);
        d
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    /// Row-major offset of (n, c, h, w).
    pub fn flatten_index(&self, idx: [usize; 4]) -> Result<usize> {
        let d = self.dims4();
        if idx.iter().zip(d.iter()).any(|(&i, &e)| i >= e) {
            return Err(Error::shape(format!("index {idx:?} out of bounds {d:?}")));
        }
        Ok(((idx[0] * d[1] + idx[1]) * d[2] + idx[2]) * d[3] + idx[3])
    }

    /// Inverse of [`Tensor::flatten_index`].
    pub fn unflatten_index(&self, offset: usize) -> Result<[usize; 4]> {
        if offset >= self.data.len() {
            return Err(Error::shape(format!(
                "offset {offset} out of bounds for {} elements",
                self.data.len()
            )));
        }
        let d = self.dims4();
        let w = offset % d[3];
        let rest = offset / d[3];
        let h = rest % d[2];
        let rest = rest / d[2];
        let c = rest % d[1];
        let n = rest / d[1];
        Ok([n, c, h, w])
    }

    pub fn get(&self, idx: [usize; 4]) -> Result<f32> {
        Ok(self.data[self.flatten_index(idx)?])
    }

    pub fn set(&mut self, idx: [usize; 4], value: f32) -> Result<()> {
        let i = self.flatten_index(idx)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul lhs")?;
        let (k2, n) = as_matrix(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {m}x{k} . {k2}x{n}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        linalg::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Tensor::from_vec(&[m, n], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION, self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let mut head = [0u8; 6];
        read_exact(&mut r, &mut head, "tensor header")?;
        if &head[..4] != MAGIC {
            return Err(Error::format(format!(
                "bad tensor magic {:?}",
                String::from_utf8_lossy(&head[..4])
            )));
        }
        if head[4] != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported tensor version {}",
                head[4]
            )));
        }
        let rank = head[5] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "tensor extents")?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let len = check_shape(&shape).map_err(|e| Error::format(e.to_string()))?;
        let mut raw = vec![0u8; len * 4];
        read_exact(&mut r, &mut raw, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_from(BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated {what}"))
        } else {
            Error::format(format!("reading {what}: {e}"))
        }
    })
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// Slice-level matrix kernels. All matrices are dense row-major and the
/// output is accumulated into, not overwritten.
pub mod linalg {
    /// `c[m,n] += a[m,k] * b[k,n]`
    pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c[m,n] += a[k,m]^T * b[k,n]`
    pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c[m,n] += a[m,k] * b[n,k]^T`
    pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(c.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// Squared Euclidean distance with eight fixed-order partial sums.
    pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f32; 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
            for l in 0..8 {
                let d = xa[l] - xb[l];
                acc[l] += d * d;
            }
        }
        let mut tail = 0.0f32;
        for i in chunks * 8..a.len() {
            let d = a[i] - b[i];
            tail += d * d;
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    /// Dot product with eight fixed-order partial sums.
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f32; 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
            for l in 0..8 {
                acc[l] += xa[l] * xb[l];
            }
        }
        let mut tail = 0.0f32;
        for i in chunks * 8..a.len() {
            tail += a[i] * b[i];
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }
}

//! Descriptor extraction, distances, ranking and feature heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::HpmModel;
use crate::tensor::{linalg, Tensor};
use crate::trainer::{flip_horizontal, Normalization};

/// One image's retrieval vector with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub vector: Vec<f32>,
    pub person_id: i64,
    pub camera_id: u32,
    pub is_query: bool,
}

impl Descriptor {
    pub fn new(vector: Vec<f32>, person_id: i64, camera_id: u32, is_query: bool) -> Self {
        Descriptor {
            vector,
            person_id,
            camera_id,
            is_query,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// L2-normalises the vector in place.
    pub fn finalize(&mut self) -> Result<()> {
        self.vector = normalize(&self.vector)?;
        Ok(())
    }
}

impl AsRef<[f32]> for Descriptor {
    fn as_ref(&self) -> &[f32] {
        &self.vector
    }
}

pub const MIN_NORM: f64 = 1e-12;

pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !(norm > MIN_NORM) {
        return Err(Error::Numeric(format!(
            "cannot normalise a vector of norm {norm:e}"
        )));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Stacks `(3, H, W)` images into a normalised `(N, 3, H, W)` batch.
fn stack(images: &[&Tensor], norm: &Normalization, flip: bool) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no images to stack"))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != first.as_slice() {
            return Err(Error::shape(format!(
                "image {:?} differs from {:?}",
                img.shape(),
                first
            )));
        }
        let img = if flip { flip_horizontal(img)? } else { (*img).clone() };
        data.extend(norm.apply(&img)?.into_data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&first);
    Tensor::from_vec(&shape, data)
}

/// Concatenated reduced bin vectors (scale-major, top-to-bottom) per sample.
fn raw_vectors(model: &HpmModel, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
    let n = model.check_images(batch)?;
    let f = model.backbone.forward(batch)?;
    let reduced = model.head.reduced_features(&f)?;
    let d = model.pyramid().reduced_dim;
    Ok((0..n)
        .map(|i| {
            reduced
                .iter()
                .flat_map(|r| r.data()[i * d..(i + 1) * d].iter().copied())
                .collect()
        })
        .collect())
}

/// Raw (unnormalised) descriptors for `(3, H, W)` images in `[0, 1]`.
/// With `flip_sum` the mirrored image's vector is added to each.
pub fn extract_descriptors(
    model: &HpmModel,
    images: &[&Tensor],
    flip_sum: bool,
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size) {
        let mut vecs = raw_vectors(model, &stack(chunk, norm, false)?)?;
        if flip_sum {
            let flipped = raw_vectors(model, &stack(chunk, norm, true)?)?;
            for (v, f) in vecs.iter_mut().zip(flipped) {
                v.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            }
        }
        out.extend(vecs);
    }
    Ok(out)
}

pub fn extract_descriptor(
    model: &HpmModel,
    image: &Tensor,
    flip_sum: bool,
    norm: &Normalization,
) -> Result<Vec<f32>> {
    Ok(extract_descriptors(model, &[image], flip_sum, norm, 1)?.remove(0))
}

/// Squared Euclidean distances as a `(queries, gallery)` matrix.
pub fn distance_matrix<Q, G>(queries: &[Q], gallery: &[G]) -> Result<Tensor>
where
    Q: AsRef<[f32]> + Sync,
    G: AsRef<[f32]> + Sync,
{
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("distance matrix needs non-empty sets"));
    }
    let d = queries[0].as_ref().len();
    if let Some(bad) = queries
        .iter()
        .map(|q| q.as_ref().len())
        .chain(gallery.iter().map(|g| g.as_ref().len()))
        .find(|&l| l != d)
    {
        return Err(Error::shape(format!(
            "descriptor dimensions differ: {d} vs {bad}"
        )));
    }
    let g = gallery.len();
    let mut out = vec![0.0f32; queries.len() * g];
    exec::for_each_chunk_mut(&mut out, g, |qi, row| {
        let q = queries[qi].as_ref();
        for (dst, item) in row.iter_mut().zip(gallery) {
            *dst = linalg::sq_dist(q, item.as_ref());
        }
    });
    Tensor::from_vec(&[queries.len(), g], out)
}

/// Valid gallery indices by ascending distance, ties by ascending index.
pub fn rank(distances: &[f32], valid: &[bool]) -> Result<Vec<usize>> {
    if distances.len() != valid.len() {
        return Err(Error::shape(format!(
            "{} distances but {} mask entries",
            distances.len(),
            valid.len()
        )));
    }
    let mut idx: Vec<usize> = (0..distances.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::Data("no valid gallery items to rank".into()));
    }
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    Ok(idx)
}

/// Per-channel min-max normalisation, summed over channels, rescaled to `[0, 1]`.
/// Constant channels (and a constant sum) contribute zeros.
pub fn heatmap(f: &Tensor) -> Result<Tensor> {
    let [c, h, w] = match f.shape() {
        [c, h, w] => [*c, *h, *w],
        [1, c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape(format!("heatmap needs (C, H, W), got {s:?}"))),
    };
    let mut acc = vec![0.0f32; h * w];
    for plane in f.data().chunks(h * w).take(c) {
        add_min_max(plane, &mut acc);
    }
    let mut out = vec![0.0f32; h * w];
    add_min_max(&acc, &mut out);
    Tensor::from_vec(&[h, w], out)
}

fn add_min_max(src: &[f32], dst: &mut [f32]) {
    let lo = src.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if span > 0.0 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += (s - lo) / span;
        }
    }
}

pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

/// Writes an `(M, D)` HPMT matrix to `path` and `index pid cam is_query`
/// lines to `path.labels`.
pub fn save_descriptors(path: &Path, descriptors: &[Descriptor]) -> Result<()> {
    let first = descriptors
        .first()
        .ok_or_else(|| Error::Data("no descriptors to save".into()))?;
    let d = first.dim();
    let mut data = Vec::with_capacity(descriptors.len() * d);
    let mut labels = String::new();
    for (i, desc) in descriptors.iter().enumerate() {
        if desc.dim() != d {
            return Err(Error::shape("descriptors have mixed dimensions"));
        }
        data.extend_from_slice(&desc.vector);
        labels.push_str(&format!(
            "{i} {} {} {}\n",
            desc.person_id,
            desc.camera_id,
            u8::from(desc.is_query)
        ));
    }
    Tensor::from_vec(&[descriptors.len(), d], data)?.save(path)?;
    let lp = labels_path(path);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))
}

pub fn load_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    let matrix = Tensor::load(path)?;
    let (m, d) = match matrix.shape() {
        [m, d] => (*m, *d),
        s => return Err(Error::format(format!("descriptor file must hold a matrix, got {s:?}"))),
    };
    let lp = labels_path(path);
    let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
    let mut out = Vec::with_capacity(m);
    for (line_no, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(format!("{}: bad label line {}: `{line}`", lp.display(), line_no + 1));
        if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(line_no) {
            return Err(bad());
        }
        let pid: i64 = fields[1].parse().map_err(|_| bad())?;
        let cam: u32 = fields[2].parse().map_err(|_| bad())?;
        let is_query = match fields[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if line_no >= m {
            return Err(bad());
        }
        out.push(Descriptor::new(
            matrix.data()[line_no * d..(line_no + 1) * d].to_vec(),
            pid,
            cam,
            is_query,
        ));
    }
    if out.len() != m {
        return Err(Error::format(format!(
            "{} label lines for {m} descriptors",
            out.len()
        )));
    }
    Ok(out)
}

//! Images, dataset layout and the synthetic striped-person generator.
//!
//! Images are binary PPM (P6, maxval 255). A dataset root holds `train/`,
//! `query/` and `gallery/` directories of Market-1501 style filenames
//! (`0002_c1s1_000451_03.ppm`) plus a `manifest.txt` of `path pid cam` lines.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.dir_name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}` (train, query, gallery)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// (3, H, W), values in [0, 1].
    pub image: Tensor,
    /// Negative for junk/distractor images.
    pub person_id: i64,
    pub camera_id: u32,
    pub split: Split,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Parses `{pid}_c{cam}{rest}.{ext}`, where pid is 4+ digits or `-1`.
pub fn parse_market_filename(name: &str) -> Result<(i64, u32)> {
    let bad = |why: &str| Error::Data(format!("malformed image name `{name}`: {why}"));
    let (pid_str, rest) = name.split_once('_').ok_or_else(|| bad("no `_` separator"))?;
    let pid = if pid_str == "-1" {
        -1
    } else if pid_str.len() >= 4 && pid_str.bytes().all(|b| b.is_ascii_digit()) {
        pid_str.parse().map_err(|_| bad("person id overflows"))?
    } else {
        return Err(bad("person id must be 4+ digits or -1"));
    };
    let rest = rest.strip_prefix('c').ok_or_else(|| bad("camera tag `c` missing"))?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return Err(bad("camera number missing"));
    }
    let cam: u32 = rest[..digits].parse().map_err(|_| bad("camera number overflows"))?;
    if cam == 0 {
        return Err(bad("camera numbers start at 1"));
    }
    match rest[digits..].rsplit_once('.') {
        Some((_, ext)) if !ext.is_empty() => Ok((pid, cam)),
        _ => Err(bad("missing extension")),
    }
}

pub fn format_market_filename(person_id: i64, camera_id: u32, seq: usize) -> String {
    if person_id < 0 {
        format!("-1_c{camera_id}s1_{seq:06}_00.ppm")
    } else {
        format!("{person_id:04}_c{camera_id}s1_{seq:06}_00.ppm")
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `(3, H, W)` tensor as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape(format!("ppm needs (3, H, W), got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape(format!("ppm needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Encodes an `(H, W)` map in `[0, 1]` as binary PGM.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = match map.shape() {
        [h, w] => [*h, *w],
        s => return Err(Error::shape(format!("pgm needs (H, W), got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("bad number in ppm header"))
    }
}

/// Decodes a binary P6 image with maxval 255 into `(3, H, W)` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format("not a binary PPM (P6) image"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let w = hdr.number()?;
    let h = hdr.number()?;
    let maxval = hdr.number()?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported ppm maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("ppm has zero extent"));
    }
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(Error::format("ppm header not terminated"));
    }
    let body = &bytes[hdr.pos + 1..];
    let plane = w * h;
    if body.len() < 3 * plane {
        return Err(Error::format(format!(
            "truncated ppm: {} of {} pixel bytes",
            body.len(),
            3 * plane
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = f32::from(body[3 * p + ch]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Nearest-neighbour resize of a `(C, h, w)` image.
pub fn resize_nearest(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape(format!("resize needs (C, H, W), got {s:?}"))),
    };
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(c * height * width);
    for plane in image.data().chunks(h * w) {
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                data.push(plane[sy * w + x * w / width]);
            }
        }
    }
    Tensor::from_vec(&[c, height, width], data)
}

/// Reads a PPM and resizes it to `height x width`.
pub fn load_ppm(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    resize_nearest(&img, height, width)
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn save_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

/// Loads every `.ppm` under `root/{train,query,gallery}` in filename order.
/// Missing split directories are treated as empty; a missing root is an error.
pub fn load_dataset(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} not found", root.display())));
    }
    let mut samples = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".ppm"))
            .collect();
        names.sort();
        for name in names {
            let (person_id, camera_id) = parse_market_filename(&name)?;
            let image = load_ppm(&dir.join(&name), height, width)?;
            samples.push(Sample {
                image,
                person_id,
                camera_id,
                split,
                name,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    Ok(Dataset { samples })
}

/// Writes images into the split layout plus `manifest.txt`.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = Vec::new();
    for s in &dataset.samples {
        let rel = format!("{}/{}", s.split.dir_name(), s.name);
        save_ppm(&root.join(&rel), &s.image)?;
        writeln!(manifest, "{rel} {} {}", s.person_id, s.camera_id).expect("write to vec");
    }
    let mpath = root.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Colours identities are painted with: corners of the cube `{0.25, 0.75}^3`.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.25, 0.25, 0.25],
    [0.75, 0.25, 0.25],
    [0.25, 0.75, 0.25],
    [0.25, 0.25, 0.75],
    [0.75, 0.75, 0.25],
    [0.75, 0.25, 0.75],
    [0.25, 0.75, 0.75],
    [0.75, 0.75, 0.75],
];

/// Camera brightness offsets are drawn from `[-CAMERA_OFFSET_MAX, CAMERA_OFFSET_MAX)`.
pub const CAMERA_OFFSET_MAX: f32 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id_per_cam: usize,
    pub num_cams: usize,
    /// Horizontal colour bands encoding an identity.
    pub band_count: usize,
    /// Number of palette colours in use (2..=8).
    pub palette_size: usize,
    /// Largest vertical shift in pixels, applied per image.
    pub misalignment_max: usize,
    pub noise_std: f32,
    pub height: usize,
    pub width: usize,
    /// Train on identities disjoint from the query/gallery identities.
    pub disjoint_train_ids: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_ids: 16,
            images_per_id_per_cam: 10,
            num_cams: 3,
            band_count: 4,
            palette_size: 8,
            misalignment_max: 4,
            noise_std: 0.05,
            height: 128,
            width: 64,
            disjoint_train_ids: false,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.num_ids < 2 {
            return fail(format!("num_ids {} must be at least 2", self.num_ids));
        }
        if self.num_cams < 2 {
            return fail(format!("num_cams {} must be at least 2", self.num_cams));
        }
        if self.images_per_id_per_cam < 1 || (!self.disjoint_train_ids && self.images_per_id_per_cam < 2) {
            return fail("images_per_id_per_cam must leave images for training and evaluation".into());
        }
        if self.disjoint_train_ids && self.num_ids < 4 {
            return fail("disjoint_train_ids needs at least 4 identities".into());
        }
        if self.band_count < 2 || self.band_count > self.height {
            return fail(format!("band_count {} must be in 2..=height", self.band_count));
        }
        if !(2..=PALETTE.len()).contains(&self.palette_size) {
            return fail(format!("palette_size {} must be in 2..=8", self.palette_size));
        }
        if self.height == 0 || self.width == 0 {
            return fail("image extents must be positive".into());
        }
        if self.misalignment_max * 4 >= self.height {
            return fail(format!(
                "misalignment_max {} must be below height/4",
                self.misalignment_max
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return fail(format!("noise_std {} must be >= 0", self.noise_std));
        }
        let distinct = (self.palette_size as f64).powi(self.band_count as i32);
        if distinct < self.num_ids as f64 {
            return fail(format!(
                "{} identities cannot have distinct signatures with {} colours x {} bands",
                self.num_ids, self.palette_size, self.band_count
            ));
        }
        Ok(())
    }

    /// Number of images per (identity, camera) assigned to training when
    /// identities are shared between training and evaluation.
    pub fn train_images_per_cam(&self) -> usize {
        self.images_per_id_per_cam.div_ceil(2)
    }
}

/// Draws one palette index per band for every identity; signatures are distinct.
pub fn sample_signatures(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(cfg.num_ids);
    while out.len() < cfg.num_ids {
        let sig: Vec<usize> = (0..cfg.band_count).map(|_| rng.index(cfg.palette_size)).collect();
        if !out.contains(&sig) {
            out.push(sig);
        }
    }
    out
}

/// Paints `signature` as horizontal bands shifted down by `shift` rows, adds
/// `brightness` and Gaussian noise, and clamps to `[0, 1]`.
pub fn render_person(
    signature: &[usize],
    cfg: &SynthConfig,
    shift: i64,
    brightness: f32,
    rng: &mut Rng,
) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let bands = signature.len() as i64;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let band = ((y as i64 - shift) * bands).div_euclid(h as i64).clamp(0, bands - 1) as usize;
        let color = PALETTE[signature[band]];
        for (ch, &base) in color.iter().enumerate() {
            let row = &mut data[(ch * h + y) * w..(ch * h + y + 1) * w];
            row.fill(base + brightness);
        }
    }
    if cfg.noise_std > 0.0 {
        for v in &mut data {
            *v += cfg.noise_std * rng.normal_f32();
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[3, h, w], data).expect("valid image shape")
}

/// Renders the full dataset. Person ids are 1-based, cameras 1-based.
///
/// With shared identities, the first half (rounded up) of each
/// (identity, camera) image set is training data. With disjoint identities,
/// the first half of the identities is training data. Evaluation images from
/// camera 1 are queries; other cameras form the gallery.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let signatures = sample_signatures(cfg, &mut root.child("signatures"));
    let offsets: Vec<f32> = (1..=cfg.num_cams)
        .map(|c| {
            root.child(&format!("camera/{c}"))
                .uniform_f32(-CAMERA_OFFSET_MAX, CAMERA_OFFSET_MAX)
        })
        .collect();
    let train_ids = cfg.num_ids.div_ceil(2);
    let m = cfg.misalignment_max as i64;
    let mut samples = Vec::with_capacity(cfg.num_ids * cfg.num_cams * cfg.images_per_id_per_cam);
    for (id, sig) in signatures.iter().enumerate() {
        let pid = id as i64 + 1;
        for cam in 1..=cfg.num_cams as u32 {
            for k in 0..cfg.images_per_id_per_cam {
                let mut rng = root.child(&format!("image/{pid}/{cam}/{k}"));
                let shift = if m > 0 { rng.range_inclusive(-m, m) } else { 0 };
                let image = render_person(sig, cfg, shift, offsets[cam as usize - 1], &mut rng);
                let is_train = if cfg.disjoint_train_ids {
                    id < train_ids
                } else {
                    k < cfg.train_images_per_cam()
                };
                let split = match (is_train, cam) {
                    (true, _) => Split::Train,
                    (false, 1) => Split::Query,
                    (false, _) => Split::Gallery,
                };
                samples.push(Sample {
                    image,
                    person_id: pid,
                    camera_id: cam,
                    split,
                    name: format_market_filename(pid, cam, k),
                });
            }
        }
    }
    Ok(Dataset { samples })
}

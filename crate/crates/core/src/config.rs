//! Flat `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key has a typed default; unknown keys and out-of-range values are
//! rejected with the key named.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::hpp::{Pooling, PyramidConfig};
use crate::nn::Init;
use crate::trainer::{Normalization, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stage_channels: [usize; 4],
    pub init: Init,

    pub scales: Vec<usize>,
    pub reduced_dim: usize,
    pub pooling: Pooling,

    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f32,
    pub decay_epoch: usize,
    pub momentum: f32,
    pub backbone_lr_mult: f32,
    pub seed: u64,
    pub flip_augment: bool,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    /// Write an intermediate checkpoint every N epochs (0 disables).
    pub save_every: usize,

    pub num_ids: usize,
    pub images_per_id_per_cam: usize,
    pub num_cams: usize,
    pub band_count: usize,
    pub palette_size: usize,
    pub misalignment_max: usize,
    pub noise_std: f32,
    pub disjoint_train_ids: bool,

    pub data_dir: PathBuf,
    pub flip_sum: bool,
    pub topk: usize,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            input_height: b.input_height,
            input_width: b.input_width,
            stage_channels: b.stage_channels,
            init: Init::default(),
            scales: vec![1, 2, 4, 8],
            reduced_dim: 32,
            pooling: Pooling::AvgPlusMax,
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.base_lr,
            decay_epoch: t.decay_epoch,
            momentum: t.momentum,
            backbone_lr_mult: t.backbone_lr_mult,
            seed: t.seed,
            flip_augment: t.flip_augment,
            norm_mean: t.normalization.mean,
            norm_std: t.normalization.std,
            save_every: 0,
            num_ids: s.num_ids,
            images_per_id_per_cam: s.images_per_id_per_cam,
            num_cams: s.num_cams,
            band_count: s.band_count,
            palette_size: s.palette_size,
            misalignment_max: s.misalignment_max,
            noise_std: s.noise_std,
            disjoint_train_ids: s.disjoint_train_ids,
            data_dir: PathBuf::from("data"),
            flip_sum: true,
            topk: 10,
            eval_batch_size: 32,
        }
    }
}

/// Every accepted key, in canonical output order.
pub const KEYS: &[&str] = &[
    "input_height",
    "input_width",
    "stage_channels",
    "init",
    "scales",
    "reduced_dim",
    "pooling",
    "batch_size",
    "epochs",
    "base_lr",
    "decay_epoch",
    "momentum",
    "backbone_lr_mult",
    "seed",
    "flip_augment",
    "norm_mean",
    "norm_std",
    "save_every",
    "num_ids",
    "images_per_id_per_cam",
    "num_cams",
    "band_count",
    "palette_size",
    "misalignment_max",
    "noise_std",
    "disjoint_train_ids",
    "data_dir",
    "flip_sum",
    "topk",
    "eval_batch_size",
];

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_one(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true/false, got `{other}`"))),
    }
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        Err(Error::config(key, "must be positive"))
    } else {
        Ok(v)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {} is not `key=value`", no + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_height" => self.input_height = positive(key, parse_one(key, value)?)?,
            "input_width" => self.input_width = positive(key, parse_one(key, value)?)?,
            "stage_channels" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.stage_channels = v
                    .try_into()
                    .map_err(|_| Error::config(key, "needs exactly 4 values"))?;
            }
            "init" => {
                self.init = value
                    .parse()
                    .map_err(|e: Error| Error::config(key, e.to_string()))?
            }
            "scales" => self.scales = parse_list(key, value)?,
            "reduced_dim" => self.reduced_dim = positive(key, parse_one(key, value)?)?,
            "pooling" => {
                self.pooling = value
                    .parse()
                    .map_err(|e: Error| Error::config(key, e.to_string()))?
            }
            "batch_size" => self.batch_size = positive(key, parse_one(key, value)?)?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "base_lr" => self.base_lr = parse_one(key, value)?,
            "decay_epoch" => self.decay_epoch = parse_one(key, value)?,
            "momentum" => self.momentum = parse_one(key, value)?,
            "backbone_lr_mult" => self.backbone_lr_mult = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "flip_augment" => self.flip_augment = parse_bool(key, value)?,
            "norm_mean" => self.norm_mean = parse_list(key, value)?,
            "norm_std" => self.norm_std = parse_list(key, value)?,
            "save_every" => self.save_every = parse_one(key, value)?,
            "num_ids" => self.num_ids = parse_one(key, value)?,
            "images_per_id_per_cam" => self.images_per_id_per_cam = parse_one(key, value)?,
            "num_cams" => self.num_cams = parse_one(key, value)?,
            "band_count" => self.band_count = parse_one(key, value)?,
            "palette_size" => self.palette_size = parse_one(key, value)?,
            "misalignment_max" => self.misalignment_max = parse_one(key, value)?,
            "noise_std" => self.noise_std = parse_one(key, value)?,
            "disjoint_train_ids" => self.disjoint_train_ids = parse_bool(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "flip_sum" => self.flip_sum = parse_bool(key, value)?,
            "topk" => self.topk = positive(key, parse_one(key, value)?)?,
            "eval_batch_size" => self.eval_batch_size = positive(key, parse_one(key, value)?)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Range and cross-field checks, reporting the first offending key.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| r.map_err(|e| Error::config(key, e.to_string()));
        wrap("input_height", self.backbone().validate())?;
        let pyr = PyramidConfig::new(self.scales.clone(), self.reduced_dim, self.pooling, 2);
        wrap("scales", pyr.map(|_| ()))?;
        let (fh, _) = self.backbone().feature_hw();
        wrap(
            "scales",
            PyramidConfig::new(self.scales.clone(), self.reduced_dim, self.pooling, 2)?.check_height(fh),
        )?;
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config("base_lr", "must be a finite value >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.backbone_lr_mult > 0.0) || !self.backbone_lr_mult.is_finite() {
            return Err(Error::config("backbone_lr_mult", "must be positive"));
        }
        if self.decay_epoch > self.epochs {
            return Err(Error::config("decay_epoch", "must not exceed epochs"));
        }
        if self.norm_mean.len() != 3 {
            return Err(Error::config("norm_mean", "needs 3 values"));
        }
        if self.norm_std.len() != 3 || self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("norm_std", "needs 3 positive values"));
        }
        let synth = self.synth();
        let synth_key = if synth.num_ids < 2 || (synth.disjoint_train_ids && synth.num_ids < 4) {
            "num_ids"
        } else if synth.num_cams < 2 {
            "num_cams"
        } else if synth.images_per_id_per_cam < 2 && !synth.disjoint_train_ids
            || synth.images_per_id_per_cam == 0
        {
            "images_per_id_per_cam"
        } else if synth.band_count < 2 || synth.band_count > synth.height {
            "band_count"
        } else if !(2..=8).contains(&synth.palette_size) {
            "palette_size"
        } else if synth.misalignment_max * 4 >= synth.height {
            "misalignment_max"
        } else {
            "noise_std"
        };
        wrap(synth_key, synth.validate())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stage_channels: self.stage_channels,
            input_height: self.input_height,
            input_width: self.input_width,
        }
    }

    pub fn pyramid(&self, num_classes: usize) -> Result<PyramidConfig> {
        PyramidConfig::new(self.scales.clone(), self.reduced_dim, self.pooling, num_classes)
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.norm_mean.clone(),
            std: self.norm_std.clone(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            base_lr: self.base_lr,
            decay_epoch: self.decay_epoch,
            momentum: self.momentum,
            backbone_lr_mult: self.backbone_lr_mult,
            seed: self.seed,
            flip_augment: self.flip_augment,
            normalization: self.normalization(),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_ids: self.num_ids,
            images_per_id_per_cam: self.images_per_id_per_cam,
            num_cams: self.num_cams,
            band_count: self.band_count,
            palette_size: self.palette_size,
            misalignment_max: self.misalignment_max,
            noise_std: self.noise_std,
            height: self.input_height,
            width: self.input_width,
            disjoint_train_ids: self.disjoint_train_ids,
            seed: self.seed,
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "input_height" => self.input_height.to_string(),
            "input_width" => self.input_width.to_string(),
            "stage_channels" => join(&self.stage_channels),
            "init" => self.init.to_string(),
            "scales" => join(&self.scales),
            "reduced_dim" => self.reduced_dim.to_string(),
            "pooling" => self.pooling.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "decay_epoch" => self.decay_epoch.to_string(),
            "momentum" => self.momentum.to_string(),
            "backbone_lr_mult" => self.backbone_lr_mult.to_string(),
            "seed" => self.seed.to_string(),
            "flip_augment" => self.flip_augment.to_string(),
            "norm_mean" => join(&self.norm_mean),
            "norm_std" => join(&self.norm_std),
            "save_every" => self.save_every.to_string(),
            "num_ids" => self.num_ids.to_string(),
            "images_per_id_per_cam" => self.images_per_id_per_cam.to_string(),
            "num_cams" => self.num_cams.to_string(),
            "band_count" => self.band_count.to_string(),
            "palette_size" => self.palette_size.to_string(),
            "misalignment_max" => self.misalignment_max.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "disjoint_train_ids" => self.disjoint_train_ids.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "flip_sum" => self.flip_sum.to_string(),
            "topk" => self.topk.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            _ => return None,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key}={}", self.get(key).expect("every listed key has a value")).unwrap();
        }
        s
    }
}

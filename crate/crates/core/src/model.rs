//! Backbone plus pyramid head, parameter bookkeeping, and checkpoints.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "HPMC" version:u8
//! meta_len:u32 meta:utf8      key=value lines describing the architecture
//! count:u32
//! count x { name_len:u16 name:utf8 tensor:HPMT }
//! ```
//!
//! Backbone layers are named `conv_K`, head layers `reduce_I_J` and `fc_I_J`
//! (scale index I, bin index J).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::error::{Error, Result};
use crate::hpp::{BinFeatures, HeadGrads, Pooling, PyramidConfig, PyramidHead};
use crate::nn::{Conv2d, ConvGrads, Init, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HPMC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct HpmModel {
    pub backbone_config: BackboneConfig,
    pub backbone: Backbone,
    pub head: PyramidHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: Vec<ConvGrads>,
    pub head: HeadGrads,
}

impl ModelGrads {
    /// Gradients in [`HpmModel::params_mut`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for g in self.backbone.iter().chain(&self.head.reduce) {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out.extend(self.head.classifiers.iter());
        out
    }
}

/// Output of a training forward pass, kept for the backward pass.
pub struct ForwardState {
    pub backbone: BackboneCache,
    pub bins: BinFeatures,
}

impl HpmModel {
    pub fn new(backbone_config: BackboneConfig, pyramid: PyramidConfig, rng: &Rng) -> Result<Self> {
        HpmModel::new_with(backbone_config, pyramid, Init::default(), rng)
    }

    pub fn new_with(
        backbone_config: BackboneConfig,
        pyramid: PyramidConfig,
        init: Init,
        rng: &Rng,
    ) -> Result<Self> {
        backbone_config.validate()?;
        pyramid.validate()?;
        let (fh, _) = backbone_config.feature_hw();
        pyramid.check_height(fh)?;
        let backbone = Backbone::build_with(&backbone_config, init, &mut rng.child("backbone"))?;
        let head = PyramidHead::init_with(pyramid, backbone.out_channels(), init, &mut rng.child("head"))?;
        Ok(HpmModel {
            backbone_config,
            backbone,
            head,
        })
    }

    pub fn pyramid(&self) -> &PyramidConfig {
        &self.head.config
    }

    pub fn descriptor_dim(&self) -> usize {
        self.head.config.descriptor_dim()
    }

    pub fn check_images(&self, images: &Tensor) -> Result<usize> {
        let c = &self.backbone_config;
        match images.shape() {
            [n, ch, h, w] if *ch == c.in_channels && *h == c.input_height && *w == c.input_width => Ok(*n),
            s => Err(Error::shape(format!(
                "images {s:?} do not match configured input (N, {}, {}, {})",
                c.in_channels, c.input_height, c.input_width
            ))),
        }
    }

    pub fn feature_maps(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        self.backbone.forward(images)
    }

    pub fn forward_train(&self, images: &Tensor) -> Result<ForwardState> {
        self.check_images(images)?;
        let backbone = self.backbone.forward_cached(images)?;
        let bins = self.head.forward(backbone.output())?;
        Ok(ForwardState { backbone, bins })
    }

    pub fn backward(&self, state: &ForwardState, grad_logits: &[Tensor]) -> Result<ModelGrads> {
        let f = state.backbone.output();
        let (grad_f, head) = self.head.backward_cached(f, &state.bins, grad_logits)?;
        let backbone = self.backbone.backward_cached(&state.backbone, &grad_f)?;
        Ok(ModelGrads { backbone, head })
    }

    /// Named parameters in a fixed order: backbone convs, reductions, classifiers.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("conv_{k}.weight"), &l.weight));
            out.push((format!("conv_{k}.bias"), &l.bias));
        }
        let bins = self.head.config.bins();
        for ((i, j), l) in bins.iter().zip(&self.head.reduce) {
            out.push((format!("reduce_{i}_{j}.weight"), &l.weight));
            out.push((format!("reduce_{i}_{j}.bias"), &l.bias));
        }
        for ((i, j), l) in bins.iter().zip(&self.head.classifiers) {
            out.push((format!("fc_{i}_{j}.weight"), &l.weight));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.backbone.layers.iter_mut().chain(self.head.reduce.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend(self.head.classifiers.iter_mut().map(|l| &mut l.weight));
        out
    }

    /// Number of leading entries of [`HpmModel::params_mut`] that belong to the backbone.
    pub fn backbone_param_count(&self) -> usize {
        self.backbone.layers.len() * 2
    }

    pub fn architecture(&self) -> BTreeMap<String, String> {
        let b = &self.backbone_config;
        let p = &self.head.config;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("in_channels".into(), b.in_channels.to_string()),
            ("stage_channels".into(), join(&b.stage_channels)),
            ("input_height".into(), b.input_height.to_string()),
            ("input_width".into(), b.input_width.to_string()),
            ("scales".into(), join(&p.scales)),
            ("reduced_dim".into(), p.reduced_dim.to_string()),
            ("pooling".into(), p.pooling.to_string()),
            ("num_classes".into(), p.num_classes.to_string()),
        ])
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        let meta: String = self
            .architecture()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        let params = self.named_params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, t) in params {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 5];
        read_exact(&mut r, &mut head)?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        if head[4] != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", head[4])));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta = String::from_utf8(meta).map_err(|_| Error::format("checkpoint metadata is not UTF-8"))?;
        let arch = parse_meta(&meta)?;
        let (bcfg, pcfg) = configs_from_arch(&arch)?;

        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("parameter name is not UTF-8"))?;
            let t = Tensor::read_from(&mut r)?;
            tensors.insert(name, t);
        }

        let mut take = |name: String| {
            tensors
                .remove(&name)
                .ok_or_else(|| Error::format(format!("checkpoint is missing `{name}`")))
        };
        let mut layers = Vec::new();
        for k in 0..crate::backbone::NUM_LAYERS {
            let w = take(format!("conv_{k}.weight"))?;
            let b = take(format!("conv_{k}.bias"))?;
            layers.push(Conv2d::new(w, b, crate::backbone::layer_stride(k), 1)?);
        }
        let backbone = Backbone::from_layers(layers)?;
        let mut reduce = Vec::new();
        let mut classifiers = Vec::new();
        for (i, j) in pcfg.bins() {
            let w = take(format!("reduce_{i}_{j}.weight"))?;
            let b = take(format!("reduce_{i}_{j}.bias"))?;
            reduce.push(Conv2d::new(w, b, 1, 0)?);
            classifiers.push(Linear::new(take(format!("fc_{i}_{j}.weight"))?)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format(format!("unexpected checkpoint entry `{extra}`")));
        }
        let head = PyramidHead::from_parts(pcfg, reduce, classifiers)?;
        let model = HpmModel {
            backbone_config: bcfg,
            backbone,
            head,
        };
        let reference = HpmModel::new(model.backbone_config.clone(), model.head.config.clone(), &Rng::new(0))?;
        for ((name, a), (_, b)) in model.named_params().iter().zip(reference.named_params()) {
            if a.shape() != b.shape() {
                return Err(Error::format(format!(
                    "`{name}` has shape {:?}, architecture implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        HpmModel::read_checkpoint(BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_meta(meta: &str) -> Result<BTreeMap<String, String>> {
    meta.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(format!("bad checkpoint metadata line `{l}`")))
        })
        .collect()
}

fn configs_from_arch(arch: &BTreeMap<String, String>) -> Result<(BackboneConfig, PyramidConfig)> {
    let get = |k: &str| {
        arch.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("checkpoint metadata lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("checkpoint metadata `{k}` is not an integer")))
    };
    let list = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::format(format!("bad list in `{k}`"))))
            .collect()
    };
    let stages = list("stage_channels")?;
    let stage_channels: [usize; 4] = stages
        .try_into()
        .map_err(|_| Error::format("stage_channels must list 4 values"))?;
    let bcfg = BackboneConfig {
        in_channels: num("in_channels")?,
        stage_channels,
        input_height: num("input_height")?,
        input_width: num("input_width")?,
    };
    let pooling: Pooling = get("pooling")?.parse()?;
    let pcfg = PyramidConfig::new(list("scales")?, num("reduced_dim")?, pooling, num("num_classes")?)?;
    Ok((bcfg, pcfg))
}

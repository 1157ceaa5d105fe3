//! End-to-end runs: build, train, describe and score a model from a
//! [`RunConfig`], plus the scale/pooling ablation sweep.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::dataio::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::hpp::Pooling;
use crate::metrics::{evaluate, EvalReport};
use crate::model::HpmModel;
use crate::retrieval::{extract_descriptors, Descriptor};
use crate::rng::Rng;
use crate::trainer::{train, EpochRecord, TrainData, TrainLog};

/// Fresh model for `num_classes` identities, initialised from `cfg.seed`.
pub fn build_model(cfg: &RunConfig, num_classes: usize) -> Result<HpmModel> {
    HpmModel::new_with(
        cfg.backbone(),
        cfg.pyramid(num_classes)?,
        cfg.init,
        &Rng::new(cfg.seed).child("init"),
    )
}

pub fn train_model(
    cfg: &RunConfig,
    dataset: &Dataset,
    on_epoch: impl FnMut(&HpmModel, &EpochRecord) -> Result<()>,
) -> Result<(HpmModel, TrainData, TrainLog)> {
    let data = TrainData::from_samples(&dataset.split(Split::Train))?;
    let mut model = build_model(cfg, data.num_classes())?;
    let log = train(&mut model, &data, &cfg.train(), on_epoch)?;
    Ok((model, data, log))
}

/// L2-normalised descriptors for `samples`.
pub fn describe(model: &HpmModel, cfg: &RunConfig, samples: &[&Sample]) -> Result<Vec<Descriptor>> {
    let images: Vec<&_> = samples.iter().map(|s| &s.image).collect();
    let vectors = extract_descriptors(
        model,
        &images,
        cfg.flip_sum,
        &cfg.normalization(),
        cfg.eval_batch_size,
    )?;
    samples
        .iter()
        .zip(vectors)
        .map(|(s, v)| {
            let mut d = Descriptor::new(v, s.person_id, s.camera_id, s.split == Split::Query);
            d.finalize()?;
            Ok(d)
        })
        .collect()
}

pub fn evaluate_model(model: &HpmModel, cfg: &RunConfig, dataset: &Dataset) -> Result<EvalReport> {
    let queries = describe(model, cfg, &dataset.split(Split::Query))?;
    let gallery = describe(model, cfg, &dataset.split(Split::Gallery))?;
    evaluate(&queries, &gallery, cfg.topk)
}

/// One ablation variant: a scale set with a pooling mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub scales: Vec<usize>,
    pub pooling: Pooling,
}

impl Variant {
    pub fn label(&self) -> String {
        let s: Vec<String> = self.scales.iter().map(usize::to_string).collect();
        format!("{{{}}}/{}", s.join(","), self.pooling)
    }
}

/// Variants and seeds of an ablation sweep.
///
/// Text form: `scales=1;1,2;1,2,4,8`, `pooling=avg,max` and `seeds=1,2,3`,
/// one per line. Variants are the cross product, scales outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Sweep {
    pub fn parse(text: &str) -> Result<Self> {
        let mut scales: Option<Vec<Vec<usize>>> = None;
        let mut poolings: Option<Vec<Pooling>> = None;
        let mut seeds: Option<Vec<u64>> = None;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected `key=value`"))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::config(k, format!("cannot parse {what} in `{v}`"));
            match k {
                "scales" => {
                    scales = Some(
                        v.split(';')
                            .map(|set| {
                                set.split(',')
                                    .map(|x| x.trim().parse().map_err(|_| bad("scale")))
                                    .collect::<Result<Vec<usize>>>()
                            })
                            .collect::<Result<_>>()?,
                    )
                }
                "pooling" => {
                    poolings = Some(
                        v.split(',')
                            .map(|x| x.trim().parse().map_err(|_| bad("pooling")))
                            .collect::<Result<_>>()?,
                    )
                }
                "seeds" => {
                    seeds = Some(
                        v.split(',')
                            .map(|x| x.trim().parse().map_err(|_| bad("seed")))
                            .collect::<Result<_>>()?,
                    )
                }
                other => return Err(Error::config(other, "unknown sweep key")),
            }
        }
        let scales = scales.ok_or_else(|| Error::config("scales", "missing"))?;
        let poolings = poolings.unwrap_or_else(|| vec![Pooling::AvgPlusMax]);
        let seeds = seeds.unwrap_or_else(|| vec![7]);
        if scales.is_empty() || poolings.is_empty() || seeds.is_empty() {
            return Err(Error::config("scales", "sweep is empty"));
        }
        let variants = scales
            .iter()
            .flat_map(|s| {
                poolings.iter().map(move |&pooling| Variant {
                    scales: s.clone(),
                    pooling,
                })
            })
            .collect();
        Ok(Sweep { variants, seeds })
    }
}

/// Seed-averaged retrieval scores of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub descriptor_dim: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// mAP of each seed, in sweep order.
    pub seed_maps: Vec<f64>,
}

/// Retrains and scores every variant of `sweep` for every seed. The data set
/// is fixed; the seed only changes initialisation and batch order.
pub fn run_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    sweep: &Sweep,
    mut progress: impl FnMut(&Variant, u64, &EvalReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(sweep.variants.len());
    for variant in &sweep.variants {
        let mut cfg = base.clone();
        cfg.scales = variant.scales.clone();
        cfg.pooling = variant.pooling;
        let ctx = format!("variant {}", variant.label());
        cfg.validate().map_err(|e| e.context(&ctx))?;
        let mut sums = [0.0f64; 3];
        let mut maps = Vec::with_capacity(sweep.seeds.len());
        let mut dim = 0;
        for &seed in &sweep.seeds {
            cfg.seed = seed;
            let (model, _, _) =
                train_model(&cfg, dataset, |_, _| Ok(())).map_err(|e| e.context(&ctx))?;
            dim = model.descriptor_dim();
            let report = evaluate_model(&model, &cfg, dataset).map_err(|e| e.context(&ctx))?;
            for (s, k) in sums.iter_mut().zip([1, 5, 10]) {
                *s += report.rank_k(k).unwrap_or(f64::NAN);
            }
            maps.push(report.map);
            progress(variant, seed, &report);
        }
        let n = sweep.seeds.len() as f64;
        rows.push(AblationRow {
            variant: variant.clone(),
            descriptor_dim: dim,
            rank1: sums[0] / n,
            rank5: sums[1] / n,
            rank10: sums[2] / n,
            map: maps.iter().sum::<f64>() / n,
            seed_maps: maps,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tdim\tr1\tr5\tr10\tmap\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.variant.label(),
            r.descriptor_dim,
            r.rank1,
            r.rank5,
            r.rank10,
            r.map
        )
        .unwrap();
    }
    s
}

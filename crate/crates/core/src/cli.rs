//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataio::{generate_synthetic, load_dataset, load_ppm, save_pgm, Split};
use crate::error::{Error, Result};
use crate::experiment::{ablation_table, describe, run_ablation, train_model, Sweep};
use crate::metrics::evaluate;
use crate::model::HpmModel;
use crate::retrieval::{heatmap, load_descriptors, save_descriptors};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hpm", version, about = "Horizontal pyramid matching for person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Run configuration (`key=value` lines). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic striped data set.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `data_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on `data_dir/train` and write a checkpoint and an epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Epoch log path.
        #[arg(long, default_value = "train.log")]
        out: PathBuf,
    },
    /// Write descriptors of one split (matrix plus `.labels` sidecar).
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "query")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score query descriptors against gallery descriptors.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// CMC depth; overrides the config.
        #[arg(long)]
        topk: Option<usize>,
        /// Report path; the CMC curve goes to `<out>.cmc.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain and score every variant of a sweep file.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the feature-map heatmap of one image as a PGM.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Shape(_) | Error::Format(_) | Error::Data(_) | Error::Io { .. } => EXIT_DATA,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fails unless `model` has the architecture `cfg` describes.
pub fn check_compatible(model: &HpmModel, cfg: &RunConfig) -> Result<()> {
    let p = model.pyramid();
    let b = &model.backbone_config;
    let mismatch = [
        ("scales", p.scales != cfg.scales),
        ("reduced_dim", p.reduced_dim != cfg.reduced_dim),
        ("pooling", p.pooling != cfg.pooling),
        ("stage_channels", b.stage_channels != cfg.stage_channels),
        ("input_height", b.input_height != cfg.input_height),
        ("input_width", b.input_width != cfg.input_width),
    ]
    .into_iter()
    .find(|(_, differs)| *differs);
    match mismatch {
        Some((key, _)) => Err(Error::Data(format!(
            "checkpoint does not match config key `{key}`"
        ))),
        None => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            let ds = generate_synthetic(&cfg.synth())?;
            crate::dataio::write_dataset(&out, &ds)?;
            println!("wrote {} images to {}", ds.samples.len(), out.display());
        }
        Command::Train {
            common,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&cfg.data_dir, cfg.input_height, cfg.input_width)?;
            let save_every = cfg.save_every;
            let (model, _, log) = train_model(&cfg, &ds, |m, rec| {
                let bins = m.pyramid().bins();
                eprintln!("{}", rec.to_line(&bins));
                if save_every > 0 && (rec.epoch + 1) % save_every == 0 {
                    let mut p = checkpoint.as_os_str().to_owned();
                    p.push(format!(".epoch{}", rec.epoch + 1));
                    m.save(PathBuf::from(p))?;
                }
                Ok(())
            })?;
            model.save(&checkpoint)?;
            write(&out, &log.to_text(&model.pyramid().bins()))?;
        }
        Command::Extract {
            common,
            checkpoint,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = HpmModel::load(&checkpoint)?;
            check_compatible(&model, &cfg)?;
            let ds = load_dataset(&cfg.data_dir, cfg.input_height, cfg.input_width)?;
            let samples = ds.split(split);
            if samples.is_empty() {
                return Err(Error::Data(format!("split `{split}` is empty")));
            }
            let descriptors = describe(&model, &cfg, &samples)?;
            save_descriptors(&out, &descriptors)?;
        }
        Command::Eval {
            common,
            query,
            gallery,
            topk,
            out,
        } => {
            let cfg = load_config(&common)?;
            let k = topk.unwrap_or(cfg.topk);
            let report = evaluate(&load_descriptors(&query)?, &load_descriptors(&gallery)?, k)?;
            write(&out, &report.to_text())?;
            let mut csv = out.as_os_str().to_owned();
            csv.push(".cmc.csv");
            write(Path::new(&csv), &report.cmc_csv())?;
            print!("{}", report.to_text());
        }
        Command::Ablate { common, sweep, out } => {
            let cfg = load_config(&common)?;
            let text = fs::read_to_string(&sweep).map_err(|e| Error::io(&sweep, e))?;
            let sweep = Sweep::parse(&text)?;
            let ds = load_dataset(&cfg.data_dir, cfg.input_height, cfg.input_width)?;
            let rows = run_ablation(&cfg, &ds, &sweep, |v, seed, r| {
                eprintln!("{} seed={seed} map={:.4}", v.label(), r.map);
            })?;
            let table = ablation_table(&rows);
            write(&out, &table)?;
            print!("{table}");
        }
        Command::Heatmap {
            common,
            checkpoint,
            image,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = HpmModel::load(&checkpoint)?;
            check_compatible(&model, &cfg)?;
            let img = cfg
                .normalization()
                .apply(&load_ppm(&image, cfg.input_height, cfg.input_width)?)?;
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            let f = model.feature_maps(&Tensor::from_vec(&shape, img.into_data())?)?;
            save_pgm(&out, &heatmap(&f)?)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

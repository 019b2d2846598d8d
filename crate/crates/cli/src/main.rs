use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dualsamp::data_model::load_manifest;
use dualsamp::harness::{cross_validate, evaluate, export_attention, train, TrainConfig};
use dualsamp::synth::{generate_dataset, DatasetSpec};
use dualsamp::volume_prep::{preprocess_cached, PrepParams, CANONICAL_SHAPE};

/// Dual-sampling attention classifier for COVID-19 vs CAP chest CT.
#[derive(Parser)]
#[command(name = "dualsamp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic CT phantoms and a manifest.
    GenData {
        #[arg(long, default_value_t = 60)]
        n_covid: usize,
        #[arg(long, default_value_t = 40)]
        n_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Phantom grid as D,H,W.
        #[arg(long, value_delimiter = ',', default_values_t = [32, 48, 48])]
        shape: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocess every scan of a manifest into the cache.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
        /// Network input grid as D,H,W.
        #[arg(long, value_delimiter = ',')]
        input_shape: Option<Vec<usize>>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `sampling_strategy` from the config (US or SS).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Patient-level k-fold cross-validation with both strategies.
    CrossValidate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Fuse a US and an SS checkpoint and report metrics.
    Evaluate {
        #[arg(long)]
        us_ckpt: PathBuf,
        #[arg(long)]
        ss_ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Write attention maps (and optionally Grad-CAM) per scan.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grad_cam: bool,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

fn shape3(v: &[usize]) -> Result<[usize; 3]> {
    match v {
        [d, h, w] => Ok([*d, *h, *w]),
        _ => bail!("expected three dims, got {v:?}"),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            n_covid,
            n_cap,
            seed,
            shape,
            out,
        } => {
            let spec = DatasetSpec {
                shape: shape3(&shape)?,
                ..DatasetSpec::new(n_covid, n_cap, seed)
            };
            let manifest = generate_dataset(&spec, &out)?;
            println!("wrote {} phantoms to {}", manifest.len(), out.display());
        }
        Command::Preprocess {
            manifest,
            cache_dir,
            input_shape,
        } => {
            let m = load_manifest(&manifest)?;
            let shape = input_shape.as_deref().map(shape3).transpose()?.unwrap_or(CANONICAL_SHAPE);
            let params = PrepParams::with_shape(shape);
            for record in &m.records {
                let s = preprocess_cached(&m, record, &params, Some(&cache_dir))?;
                log::info!("{}: ratio {:.5}", s.scan_id, s.ratio);
            }
            println!("preprocessed {} scans into {} (key {})", m.len(), cache_dir.display(), params.cache_key());
        }
        Command::Train { config, strategy } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = strategy {
                cfg.sampling_strategy = s;
            }
            let result = train(&cfg)?;
            println!(
                "best epoch {} val AUC {:?}: {}",
                result.best_epoch,
                result.best_val_auc,
                result.best_checkpoint.display()
            );
        }
        Command::CrossValidate { config, k } => {
            let cfg = TrainConfig::load(&config)?;
            let cv = cross_validate(&cfg, k)?;
            let o = &cv.combined;
            println!(
                "combined validation AUC: US {:?} SS {:?} DS {:?}",
                o.us.overall.auc, o.ss.overall.auc, o.ds.overall.auc
            );
            println!("report: {}", cfg.checkpoint_dir.join(dualsamp::harness::CV_REPORT).display());
        }
        Command::Evaluate {
            us_ckpt,
            ss_ckpt,
            manifest,
            out,
            cache_dir,
        } => {
            let report = evaluate(&us_ckpt, &ss_ckpt, &manifest, cache_dir.as_deref())?;
            write_json(&out, &report)?;
            println!(
                "DS AUC {:?} accuracy {:?} over {} scans; report: {}",
                report.ds.overall.auc,
                report.ds.overall.accuracy,
                report.predictions.len(),
                out.display()
            );
        }
        Command::ExportAttention {
            ckpt,
            manifest,
            out,
            grad_cam,
            cache_dir,
        } => {
            let files = export_attention(&ckpt, &manifest, &out, grad_cam, cache_dir.as_deref())?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

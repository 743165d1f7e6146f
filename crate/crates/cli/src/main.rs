//! `fnocg`: generate the dataset, train the operator network, evaluate the
//! CG / FNO / FNO-CG comparison, and render the figures.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fnocg::config::ExperimentConfig;
use fnocg::datagen::{generate_dataset, read_dataset, Window};
use fnocg::fno::{save_model, train};
use fnocg::harness::plots::emit_plots;
use fnocg::harness::run_suite;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fnocg", version, about = "4D-Var with an FNO-initialized CG solver")]
struct Cli {
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test dataset files and manifest.
    Generate {
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the FNO on a generated dataset.
    Train {
        /// Directory holding train.bin (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.fno and training_log.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run CG, FNO and FNO-CG over the test window and write the CSVs.
    Evaluate {
        /// Directory holding test.bin.
        #[arg(long)]
        data: PathBuf,
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for records/deltas/summary/curves CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG figures from an evaluation directory.
    Plot {
        /// Directory holding records.csv/deltas.csv/curves.csv.
        #[arg(long)]
        records: PathBuf,
        /// Output directory for the SVG files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

/// Reproducibility block written into every output directory.
fn write_run_info(out: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let cfg_text = cfg.to_toml_string();
    let hash = Sha256::digest(cfg_text.as_bytes());
    let info = format!(
        "command = \"{command}\"\nversion = \"{}\"\nconfig_sha256 = \"{:x}\"\nmaster_seed = {}\nfno_seed = {}\niteration_convention = \"loop iterations, one Hessian-vector product each; the initial-residual product is not counted\"\n\n[config]\n{}",
        env!("CARGO_PKG_VERSION"),
        hash,
        cfg.dataset.master_seed,
        cfg.fno.seed,
        cfg_text
            .lines()
            .map(|l| format!("# {l}"))
            .collect::<Vec<_>>()
            .join("\n"),
    );
    std::fs::write(out.join("run_info.toml"), info)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.config)?;

    match cli.command {
        Command::Generate { seed, out } => {
            if let Some(s) = seed {
                cfg.dataset.master_seed = s;
            }
            write_run_info(&out, &cfg, "generate")?;
            let manifest = generate_dataset(&cfg, &out).context("generating dataset")?;
            for w in &manifest.windows {
                log::info!("wrote {} samples to {}", w.n_samples, out.join(&w.file).display());
            }
        }
        Command::Train { data, out } => {
            write_run_info(&out, &cfg, "train")?;
            let train_path = data.join(Window::Train.file_name());
            let (window, _, samples) = read_dataset(&train_path)
                .with_context(|| format!("reading {}", train_path.display()))?;
            anyhow::ensure!(window == Window::Train, "expected the train window");
            let g = cfg.grid_config()?;
            let fno_cfg = cfg.fno_config();
            let (model, log) = train(&fno_cfg, &samples, &g).context("training")?;
            let model_path = out.join("model.fno");
            save_model(&model, &model_path)?;
            let log_file = std::fs::File::create(out.join("training_log.csv"))?;
            log.write_csv(std::io::BufWriter::new(log_file))?;
            let last = log.records.last();
            log::info!(
                "saved {} (best epoch {}, final val loss {:.4e})",
                model_path.display(),
                log.best_epoch,
                last.map(|r| r.val_loss).unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate { data, model, out } => {
            write_run_info(&out, &cfg, "evaluate")?;
            let output = run_suite(&cfg, &data, &model, &out).context("evaluating")?;
            let s = &output.summary;
            log::info!(
                "evaluated {} samples: E_CG {:.4e} ({:.1} iters), E_FNO {:.4e}, E_FNO-CG {:.4e} ({:.1} iters); error reduction {:.1}%, iteration reduction {:.1}%",
                s.n_samples,
                s.mean_error_cg,
                s.mean_iterations_cg,
                s.mean_error_fno,
                s.mean_error_fnocg,
                s.mean_iterations_fnocg,
                s.error_reduction_pct,
                s.iteration_reduction_pct
            );
        }
        Command::Plot { records, out } => {
            emit_plots(&records, &out).context("rendering plots")?;
            log::info!("figures written to {}", out.display());
        }
    }
    Ok(())
}

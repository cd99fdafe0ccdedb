use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stillguard_core::diffusion::sample;
use stillguard_core::image_io::{load_image, save_image};
use stillguard_core::metrics::{flow_magnitude, temporal_ssim};
use stillguard_core::{pgd, LossKind};
use stillguard_harness::experiment::{self, save_frames};
use stillguard_harness::report::{self, markdown_table, summarize};
use stillguard_harness::{ExperimentConfig, HarnessError, Result};

#[derive(Debug, Parser)]
#[command(name = "stillguard", version, about = "Image immunization against toy image-to-video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (`training.seed` for `train`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the autoencoder and the denoiser and save checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a video from one image.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        /// Directory for the numbered frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Protect one image with PGD.
    Immunize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// enc, hs, diff, attn-full or attn-cross.
        #[arg(long, default_value = "attn-full")]
        loss: LossKind,
        /// Budget on the 0-255 scale; config default when omitted.
        #[arg(long)]
        eps: Option<u32>,
        /// PGD iterations; config default when omitted.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "")]
        caption: String,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare videos generated from clean and protected images.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of clean `.ppm` images.
        #[arg(long)]
        clean: PathBuf,
        /// Directory of protected images with matching file names.
        #[arg(long)]
        adv: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
    },
    /// Method comparison table over the evaluation images.
    Table {
        #[command(flatten)]
        common: Common,
    },
    /// attn_full budget sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets; config default when omitted.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<u32>>,
    },
    /// Caption and attention-scope ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Generate { common, .. }
            | Command::Immunize { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Table { common }
            | Command::Sweep { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

fn load_config(common: &Common, training: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    }
    .with_env_override();
    if let Some(seed) = common.seed {
        if training {
            cfg.training.seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    Ok(cfg)
}

fn print_summary(title: &str, rows: &[stillguard_harness::ReportRow], csv: &Path) {
    println!("{title}\n{}", markdown_table(&summarize(rows)));
    println!("rows: {}", csv.display());
}

fn run(cli: Cli) -> Result<()> {
    let training = matches!(cli.command, Command::Train { .. });
    let cfg = load_config(cli.command.common(), training)?;
    match cli.command {
        Command::Train { .. } => {
            let (_, r) = experiment::train_models(&cfg)?;
            println!(
                "vae: {} steps in {:.1}s, loss {:.5} -> {:.5}, held-out MAE {:.4}",
                r.vae_log.losses.len(),
                r.vae_seconds,
                r.vae_log.first().unwrap_or(f64::NAN),
                r.vae_log.last().unwrap_or(f64::NAN),
                r.heldout_mae
            );
            println!(
                "dit: {} steps in {:.1}s, loss {:.5} -> {:.5}",
                r.dit_log.losses.len(),
                r.dit_seconds,
                r.dit_log.first().unwrap_or(f64::NAN),
                r.dit_log.last().unwrap_or(f64::NAN)
            );
            println!("checkpoints: {}", cfg.checkpoint_dir().display());
        }
        Command::Generate { image, caption, out, .. } => {
            let models = experiment::load_models(&cfg)?;
            let x = load_image(&image)?;
            let video =
                sample(&models.dit, &models.vae, &models.sched, &x, &caption, cfg.model.frames, cfg.schedule.sampling_steps, cfg.seed)?;
            save_frames(&video, &out)?;
            println!(
                "{} frames -> {}; flow {:.4}, temporal SSIM {:.4}",
                video.frame_count(),
                out.display(),
                flow_magnitude(&video)?,
                temporal_ssim(&video)?
            );
        }
        Command::Immunize { image, loss, eps, iters, caption, out, .. } => {
            let models = experiment::load_models(&cfg)?;
            let x = load_image(&image)?;
            let mut attack = cfg.attack_config(loss, eps.unwrap_or(cfg.attack.epsilon), caption);
            if let Some(n) = iters {
                attack.iterations = n;
            }
            attack.seed = cfg.seed;
            let r = pgd(&x, &attack, &models.pipeline(cfg.model.frames))?;
            save_image(&r.adversarial, &out)?;
            println!(
                "{loss}: loss {:.5} -> {:.5} over {} iterations, |delta|inf = {}/255 -> {}",
                r.loss_log.first().copied().unwrap_or(f64::NAN),
                r.loss_log.last().copied().unwrap_or(f64::NAN),
                r.loss_log.len(),
                (r.delta.max_abs() * 255.0).round(),
                out.display()
            );
        }
        Command::Evaluate { clean, adv, caption, .. } => {
            let models = experiment::load_models(&cfg)?;
            let rows = experiment::evaluate_dirs(&cfg, &models, &clean, &adv, &caption)?;
            let files = report::write_table(&cfg.run_dir(), "evaluate", &rows)?;
            print_summary("evaluate", &rows, &files.csv);
        }
        Command::Table { .. } => {
            let models = experiment::load_models(&cfg)?;
            let (rows, files) = experiment::run_table(&cfg, &models)?;
            print_summary("table", &rows, &files.csv);
        }
        Command::Sweep { eps, .. } => {
            let models = experiment::load_models(&cfg)?;
            let eps = eps.unwrap_or_else(|| cfg.sweep.epsilons.clone());
            let r = experiment::run_epsilon_sweep(&cfg, &models, &eps)?;
            print_summary("sweep (attn_full)", &r.rows, &r.files.csv);
            println!("plot: {}", r.plot.display());
        }
        Command::Ablate { .. } => {
            let models = experiment::load_models(&cfg)?;
            let a = experiment::run_ablations(&cfg, &models)?;
            print_summary("caption ablation", &a.caption, &a.caption_files.csv);
            print_summary("attention ablation", &a.attention, &a.attention_files.csv);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let HarnessError::Core(stillguard_core::Error::MissingCheckpoint(_)) = &e {
                eprintln!("hint: run `stillguard train` with the same --config");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

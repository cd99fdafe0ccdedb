//! Training, evaluation images and the table / sweep / ablation runs.
//!
//! Artifacts of one cell land in `{run}/{image_id}/{arm}/{eps}/`: the
//! generated frames, the protected image (attacked arms only) and the cell's
//! report row as `metrics.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use stillguard_core::checkpoint::{load_checkpoint, save_checkpoint};
use stillguard_core::diffusion::{make_sprite_dataset, sample, train_denoiser, DenoiserTraining};
use stillguard_core::image_io::save_image;
use stillguard_core::metrics::perturbation_visibility;
use stillguard_core::{pgd, Dit, LossKind, MetricsReport, NoiseSchedule, Pipeline, Tensor, TrainingLog, Vae, VideoTensor};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report::{self, write_file, ReportRow, TableFiles, UNPROTECTED};
use crate::svg;

pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const DIT_CHECKPOINT: &str = "dit.ckpt";

/// Offset between the training-set seed and evaluation-image seeds, so
/// evaluation sprites never come from the training set's generator stream.
const EVAL_SEED_OFFSET: u64 = 0x5eed_0000;

/// Trained networks plus the schedule they were trained with.
#[derive(Debug, Clone)]
pub struct Models {
    pub vae: Vae,
    pub dit: Dit,
    pub sched: NoiseSchedule,
}

impl Models {
    pub fn pipeline(&self, frames: usize) -> Pipeline<'_> {
        Pipeline { vae: &self.vae, dit: &self.dit, sched: &self.sched, frames }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub vae_log: TrainingLog,
    pub dit_log: TrainingLog,
    pub heldout_mae: f64,
    pub vae_seconds: f64,
    pub dit_seconds: f64,
}

fn log_csv(log: &TrainingLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in log.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.into_inner().map_err(|e| HarnessError::Usage(e.to_string()))
}

/// Trains the autoencoder and then the denoiser, saving both checkpoints and
/// loss curves under the checkpoint directory.
pub fn train_models(cfg: &ExperimentConfig) -> Result<(Models, TrainingReport)> {
    let m = &cfg.model;
    let t = &cfg.training;
    let data = make_sprite_dataset(t.dataset_size, m.frames, m.height, m.width, t.seed)?;
    let sched = cfg.noise_schedule()?;
    let mut vae = Vae::new(cfg.vae_config(), t.seed);
    let start = Instant::now();
    let vae_log = vae.train_autoencoder(&data.videos(), t.vae_epochs, t.vae_lr, t.seed)?;
    let vae_seconds = start.elapsed().as_secs_f64();
    let mut dit = Dit::new(cfg.dit_config(), t.seed.wrapping_add(1))?;
    let start = Instant::now();
    let opts = DenoiserTraining { epochs: t.dit_epochs, lr: t.dit_lr, batch: t.dit_batch, seed: t.seed };
    let dit_log = train_denoiser(&mut dit, &vae, &data, &sched, &opts)?;
    let dit_seconds = start.elapsed().as_secs_f64();

    let held = make_sprite_dataset(cfg.evaluation.images, m.frames, m.height, m.width, eval_seed(cfg))?;
    let mut mae = 0.0;
    for c in &held.clips {
        mae += vae.reconstruction_mae(&c.video)?;
    }
    let heldout_mae = mae / held.len() as f64;

    let dir = cfg.checkpoint_dir();
    save_checkpoint(&vae.to_named(), &dir.join(VAE_CHECKPOINT))?;
    save_checkpoint(&dit.to_named(), &dir.join(DIT_CHECKPOINT))?;
    write_file(&dir.join("vae_loss.csv"), &log_csv(&vae_log)?)?;
    write_file(&dir.join("dit_loss.csv"), &log_csv(&dit_log)?)?;
    let report = TrainingReport { vae_log, dit_log, heldout_mae, vae_seconds, dit_seconds };
    Ok((Models { vae, dit, sched }, report))
}

/// Loads both checkpoints, or trains when they are absent and the config
/// allows it.
pub fn load_models(cfg: &ExperimentConfig) -> Result<Models> {
    let dir = cfg.checkpoint_dir();
    let load = || -> Result<Models> {
        let vae = Vae::from_named(cfg.vae_config(), &load_checkpoint(&dir.join(VAE_CHECKPOINT))?)?;
        let dit = Dit::from_named(cfg.dit_config(), &load_checkpoint(&dir.join(DIT_CHECKPOINT))?)?;
        Ok(Models { vae, dit, sched: cfg.noise_schedule()? })
    };
    match load() {
        Err(HarnessError::Core(stillguard_core::Error::MissingCheckpoint(_))) if cfg.training.train_if_missing => Ok(train_models(cfg)?.0),
        other => other,
    }
}

/// A clean evaluation image, its caption and per-image seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub id: String,
    pub image: Tensor,
    pub caption: String,
    /// Seeds PGD draws; shared by every arm for this image.
    pub attack_seed: u64,
    /// Seeds DDIM noise; shared by every arm for this image.
    pub sample_seed: u64,
}

fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_add(EVAL_SEED_OFFSET)
}

/// SplitMix64 finalizer, used to derive independent per-image seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First frames of held-out sprite clips.
pub fn evaluation_images(cfg: &ExperimentConfig) -> Result<Vec<EvalImage>> {
    let m = &cfg.model;
    let held = make_sprite_dataset(cfg.evaluation.images, m.frames, m.height, m.width, eval_seed(cfg))?;
    held.clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(EvalImage {
                id: format!("img{i:02}"),
                image: c.video.frame(0)?,
                caption: c.caption.clone(),
                attack_seed: mix(cfg.seed ^ mix(2 * i as u64)),
                sample_seed: mix(cfg.seed ^ mix(2 * i as u64 + 1)),
            })
        })
        .collect()
}

/// What happens to the image before generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Unprotected,
    /// `caption` says whether the attacker optimizes against the image's
    /// caption or the empty caption.
    Protected {
        loss: LossKind,
        eps: u32,
        caption: bool,
    },
}

impl Arm {
    pub fn protected(loss: LossKind, eps: u32) -> Self {
        Arm::Protected { loss, eps, caption: true }
    }

    pub fn method(self) -> &'static str {
        match self {
            Arm::Unprotected => UNPROTECTED,
            Arm::Protected { loss, .. } => loss.name(),
        }
    }

    pub fn name(self) -> String {
        match self {
            Arm::Protected { caption: false, .. } => format!("{}_no_caption", self.method()),
            _ => self.method().to_string(),
        }
    }

    pub fn epsilon(self) -> u32 {
        match self {
            Arm::Unprotected => 0,
            Arm::Protected { eps, .. } => eps,
        }
    }
}

pub fn cell_dir(run_dir: &Path, image_id: &str, arm: Arm) -> PathBuf {
    run_dir.join(image_id).join(arm.name()).join(arm.epsilon().to_string())
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:02}.ppm")
}

pub fn save_frames(video: &VideoTensor, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for t in 0..video.frame_count() {
        save_image(&video.frame(t)?, &dir.join(frame_file(t)))?;
    }
    Ok(())
}

/// Runs one cell: optional PGD, generation with the image's sampling seed,
/// metrics, and artifact export.
pub fn run_cell(cfg: &ExperimentConfig, models: &Models, img: &EvalImage, arm: Arm) -> Result<ReportRow> {
    let frames = cfg.model.frames;
    let start = Instant::now();
    let (input, protected) = match arm {
        Arm::Unprotected => (img.image.clone(), None),
        Arm::Protected { loss, eps, caption } => {
            let text = if caption { img.caption.clone() } else { String::new() };
            let mut attack = cfg.attack_config(loss, eps, text);
            attack.seed = img.attack_seed;
            let result = pgd(&img.image, &attack, &models.pipeline(frames))?;
            (result.adversarial.clone(), Some(result))
        }
    };
    let video =
        sample(&models.dit, &models.vae, &models.sched, &input, &img.caption, frames, cfg.schedule.sampling_steps, img.sample_seed)?;
    let visibility = perturbation_visibility(&img.image, &input, &models.vae, frames)?;
    let metrics = MetricsReport::new(&video, visibility)?;
    let wall = start.elapsed().as_secs_f64();
    let row = ReportRow::new(&img.id, arm.method(), &arm.name(), arm.epsilon(), metrics, wall);

    let dir = cell_dir(&cfg.run_dir(), &img.id, arm);
    save_frames(&video, &dir)?;
    save_image(&video.frame(frames - 1)?, &dir.join("final_frame.ppm"))?;
    if let Some(r) = &protected {
        save_image(&r.adversarial, &dir.join("protected.ppm"))?;
    }
    write_file(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&row)?)?;
    Ok(row)
}

/// Runs `cells` on the configured worker pool; rows come back in `cells` order.
pub fn run_cells(cfg: &ExperimentConfig, models: &Models, images: &[EvalImage], cells: &[(usize, Arm)]) -> Result<Vec<ReportRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.runtime.workers)
        .build()
        .map_err(|e| HarnessError::Usage(format!("worker pool: {e}")))?;
    let run_dir = cfg.run_dir();
    for img in images {
        let dir = run_dir.join(&img.id);
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        save_image(&img.image, &dir.join("source.ppm"))?;
    }
    pool.install(|| cells.par_iter().map(|&(i, arm)| run_cell(cfg, models, &images[i], arm)).collect())
}

/// Unprotected rows plus one row per configured method at `attack.epsilon`.
pub fn run_table(cfg: &ExperimentConfig, models: &Models) -> Result<(Vec<ReportRow>, TableFiles)> {
    let images = evaluation_images(cfg)?;
    let mut cells = Vec::new();
    for i in 0..images.len() {
        cells.push((i, Arm::Unprotected));
        for &loss in &cfg.attack.methods {
            cells.push((i, Arm::protected(loss, cfg.attack.epsilon)));
        }
    }
    let rows = run_cells(cfg, models, &images, &cells)?;
    let files = report::write_table(&cfg.run_dir(), "table", &rows)?;
    Ok((rows, files))
}

/// One point of the ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub epsilon: u32,
    pub flow_magnitude: f64,
    pub temporal_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<ReportRow>,
    /// Ascending in ε.
    pub points: Vec<SweepPoint>,
    pub files: TableFiles,
    pub plot: PathBuf,
}

/// attn_full at each budget over the evaluation set.
pub fn run_epsilon_sweep(cfg: &ExperimentConfig, models: &Models, epsilons: &[u32]) -> Result<SweepResult> {
    if epsilons.is_empty() {
        return Err(HarnessError::Usage("epsilon sweep needs at least one budget".into()));
    }
    let mut eps = epsilons.to_vec();
    eps.sort_unstable();
    eps.dedup();
    let images = evaluation_images(cfg)?;
    let mut cells = Vec::new();
    for &e in &eps {
        for i in 0..images.len() {
            cells.push((i, Arm::protected(LossKind::AttnFull, e)));
        }
    }
    let rows = run_cells(cfg, models, &images, &cells)?;
    let points: Vec<SweepPoint> = report::summarize(&rows)
        .into_iter()
        .map(|s| SweepPoint { epsilon: s.epsilon, flow_magnitude: s.flow_magnitude, temporal_ssim: s.temporal_ssim })
        .collect();
    let run_dir = cfg.run_dir();
    let files = report::write_table(&run_dir, "sweep", &rows)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.epsilon as f64, p.flow_magnitude)).collect();
    let plot = run_dir.join("sweep_flow.svg");
    write_file(&plot, svg::line_plot("attn_full: flow magnitude vs budget", "epsilon (0-255)", "mean flow magnitude", &xy).as_bytes())?;
    Ok(SweepResult { rows, points, files, plot })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablations {
    /// attn_full with the image caption vs the empty caption.
    pub caption: Vec<ReportRow>,
    /// attn_full vs attn_cross.
    pub attention: Vec<ReportRow>,
    pub caption_files: TableFiles,
    pub attention_files: TableFiles,
}

/// Both two-arm comparisons at `attack.epsilon`, sharing the attn_full cells
/// and every per-image seed.
pub fn run_ablations(cfg: &ExperimentConfig, models: &Models) -> Result<Ablations> {
    let images = evaluation_images(cfg)?;
    let eps = cfg.attack.epsilon;
    let full = Arm::protected(LossKind::AttnFull, eps);
    let no_caption = Arm::Protected { loss: LossKind::AttnFull, eps, caption: false };
    let cross = Arm::protected(LossKind::AttnCross, eps);
    let mut cells = Vec::new();
    for i in 0..images.len() {
        cells.extend([(i, full), (i, no_caption), (i, cross)]);
    }
    let rows = run_cells(cfg, models, &images, &cells)?;
    let pick = |arms: [Arm; 2]| -> Vec<ReportRow> { rows.iter().filter(|r| arms.iter().any(|a| a.name() == r.arm)).cloned().collect() };
    let caption = pick([full, no_caption]);
    let attention = pick([full, cross]);
    let run_dir = cfg.run_dir();
    let caption_files = report::write_table(&run_dir, "ablation_caption", &caption)?;
    let attention_files = report::write_table(&run_dir, "ablation_attention", &attention)?;
    Ok(Ablations { caption, attention, caption_files, attention_files })
}

/// Method label of rows generated from externally protected images.
pub const IMMUNIZED: &str = "immunized";

/// Pairs `*.ppm` files by name across `clean` and `adv`, generates a video
/// from each with `caption`, and reports both. The ε column holds the
/// measured budget, rounded up to whole pixel levels.
pub fn evaluate_dirs(cfg: &ExperimentConfig, models: &Models, clean: &Path, adv: &Path, caption: &str) -> Result<Vec<ReportRow>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(clean)
        .map_err(|e| HarnessError::io(clean, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    let frames = cfg.model.frames;
    let mut rows = Vec::new();
    for path in names {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let file = path.file_name().expect("listed file");
        let other = adv.join(file);
        if !other.exists() {
            continue;
        }
        let x = stillguard_core::image_io::load_image(&path)?;
        let x_adv = stillguard_core::image_io::load_image(&other)?;
        for (method, input) in [(UNPROTECTED, &x), (IMMUNIZED, &x_adv)] {
            let start = Instant::now();
            let video = sample(&models.dit, &models.vae, &models.sched, input, caption, frames, cfg.schedule.sampling_steps, cfg.seed)?;
            let vis = perturbation_visibility(&x, input, &models.vae, frames)?;
            // Grid values carry float error of a few ulps after scaling.
            let eps = (vis.linf - 1e-6).ceil().max(0.0) as u32;
            let metrics = MetricsReport::new(&video, vis)?;
            rows.push(ReportRow::new(&stem, method, method, eps, metrics, start.elapsed().as_secs_f64()));
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::Usage(format!("no matching .ppm files in {} and {}", clean.display(), adv.display())));
    }
    Ok(rows)
}

/// Mean of `f` over the rows of one arm.
pub fn arm_mean(rows: &[ReportRow], arm: &str, f: impl Fn(&ReportRow) -> f64) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(f).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

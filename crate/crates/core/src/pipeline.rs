//! The staged pipeline: train-bayes -> make-masks -> train-diff -> infer ->
//! eval, plus selfcheck. Every stage reads its inputs from and writes its
//! artifacts to the configured work directory.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::{crop_patches, degrade, gen_dataset, upscale};
use crate::diffusion::{
    init_encoder, init_noise_predictor, make_schedule, prepare_examples, pretrain_encoder, sample_sr,
    train_diffusion, DiffusionExample, SrModels, UNet,
};
use crate::error::{config_err, BuffError, Result};
use crate::grid::ImageGrid;
use crate::io::{self, MetricsRow};
use crate::metrics::{ause, mask_quality_label, psnr, sparsification, ssim};
use crate::refine::refine_mask;
use crate::selfcheck;
use crate::uncertainty::{forward_uncertainty, init_uncertainty_net, predict_mask, train_uncertainty, variance_map, UncertaintyMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainBayes,
    MakeMasks,
    TrainDiff,
    Infer,
    Eval,
    Selfcheck,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainBayes,
        Stage::MakeMasks,
        Stage::TrainDiff,
        Stage::Infer,
        Stage::Eval,
        Stage::Selfcheck,
    ];

    /// The five stages of a full run, in order.
    pub const PIPELINE: [Stage; 5] = [
        Stage::TrainBayes,
        Stage::MakeMasks,
        Stage::TrainDiff,
        Stage::Infer,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainBayes => "train-bayes",
            Stage::MakeMasks => "make-masks",
            Stage::TrainDiff => "train-diff",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::Selfcheck => "selfcheck",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = BuffError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| config_err(format!("unknown stage {s}")))
    }
}

/// Locations of every artifact of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub train_hr: PathBuf,
    pub test_hr: PathBuf,
    pub bayes: PathBuf,
    pub encoder: PathBuf,
    pub diffusion: PathBuf,
    pub masks: PathBuf,
    pub outputs: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub log: PathBuf,
    pub lock: PathBuf,
}

impl Artifacts {
    pub fn new(cfg: &RunConfig) -> Self {
        let data = cfg.dataset_path();
        let ckpt = cfg.checkpoint_path();
        let out = cfg.output_path();
        Self {
            train_hr: data.join("train_hr.bin"),
            test_hr: data.join("test_hr.bin"),
            bayes: ckpt.join("bayes.ckpt"),
            encoder: ckpt.join("encoder.ckpt"),
            diffusion: ckpt.join("diffusion.ckpt"),
            masks: cfg.mask_path().join("masks.bin"),
            metrics: out.join("metrics.csv"),
            summary: out.join("summary.txt"),
            outputs: out,
            log: cfg.work_dir.join("run.log"),
            lock: cfg.work_dir.join(".buff.lock"),
        }
    }

    pub fn sr_image(&self, index: usize) -> PathBuf {
        self.outputs.join(format!("sr_{index:04}.pgm"))
    }
}

/// Advisory lock on the work directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path.to_path_buf()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(BuffError::Locked { path: path.to_path_buf() }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Plain-text run log, mirrored to the `log` facade. No timestamps, so logs
/// of identical runs are identical.
struct RunLog(File);

impl RunLog {
    fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(RunLog(OpenOptions::new().create(true).append(true).open(path)?))
    }

    fn line(&mut self, msg: impl AsRef<str>) -> Result<()> {
        let msg = msg.as_ref();
        log::info!("{msg}");
        writeln!(self.0, "{msg}")?;
        Ok(())
    }
}

fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(BuffError::MissingArtifact {
            path: path.to_path_buf(),
            reason: format!("run `{producer}` first"),
        })
    }
}

/// Run one stage. Selfcheck touches nothing on disk; the other stages lock
/// the work directory and append to its run log.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<()> {
    if stage == Stage::Selfcheck {
        let results = selfcheck::run_all();
        let failed = results.iter().filter(|r| !r.passed).count();
        for r in &results {
            let status = if r.passed { "ok" } else { "FAIL" };
            log::info!("selfcheck {status:4} {}: {}", r.name, r.detail);
        }
        if failed > 0 {
            return Err(BuffError::SelfCheck { failed, total: results.len() });
        }
        return Ok(());
    }

    let art = Artifacts::new(cfg);
    let _lock = DirLock::acquire(&art.lock)?;
    let mut log = RunLog::open(&art.log)?;
    log.line(format!("== {stage}"))?;
    for line in cfg.render().lines() {
        log.line(format!("config {line}"))?;
    }
    match stage {
        Stage::TrainBayes => train_bayes(cfg, &art, &mut log),
        Stage::MakeMasks => make_masks(cfg, &art, &mut log),
        Stage::TrainDiff => train_diff(cfg, &art, &mut log),
        Stage::Infer => infer(cfg, &art, &mut log),
        Stage::Eval => eval(cfg, &art, &mut log),
        Stage::Selfcheck => unreachable!("handled above"),
    }
}

/// Run train-bayes through eval in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    for stage in Stage::PIPELINE {
        run_stage(stage, cfg)?;
    }
    Ok(())
}

fn bayes_pairs(cfg: &RunConfig, hrs: &[ImageGrid]) -> Result<Vec<(ImageGrid, ImageGrid)>> {
    let mut pairs = Vec::new();
    for hr in hrs {
        let lr = degrade(hr, cfg.data_scale)?;
        let blank = UncertaintyMask::new(ImageGrid::zeros(hr.height(), hr.width()))?;
        for p in crop_patches(hr, &lr, &blank, cfg.data_patch, cfg.data_stride)?.triples {
            pairs.push((upscale(&p.lr, cfg.data_scale)?, p.hr));
        }
    }
    Ok(pairs)
}

fn train_bayes(cfg: &RunConfig, art: &Artifacts, log: &mut RunLog) -> Result<()> {
    io::save_grids(&art.train_hr, "hr", &gen_dataset(&cfg.dataset_spec())?)?;
    io::save_grids(&art.test_hr, "hr", &gen_dataset(&cfg.test_dataset_spec())?)?;
    // Train on the stored (f32) values so every later stage sees the same data.
    let train = io::load_grids(&art.train_hr, "hr")?;
    log.line(format!("dataset: {} train, {} test images", train.len(), cfg.data_test_count))?;

    let pairs = bayes_pairs(cfg, &train)?;
    let net = init_uncertainty_net(cfg.bayes_seed, cfg.bayes_channels)?;
    let (net, history) = train_uncertainty(&net, &pairs, &cfg.bayes_train())?;
    log_history(log, "bayes", &history)?;
    io::save_checkpoint(&art.bayes, &net)?;
    log.line(format!("wrote {}", art.bayes.display()))
}

fn make_masks(cfg: &RunConfig, art: &Artifacts, log: &mut RunLog) -> Result<()> {
    require(&art.bayes, Stage::TrainBayes)?;
    require(&art.train_hr, Stage::TrainBayes)?;
    let net = io::load_checkpoint(&art.bayes)?;
    let masks = io::load_grids(&art.train_hr, "hr")?
        .iter()
        .map(|hr| Ok(predict_mask(&net, &degrade(hr, cfg.data_scale)?, cfg.data_scale)?.into_grid()))
        .collect::<Result<Vec<_>>>()?;
    io::save_grids(&art.masks, "mask", &masks)?;
    let mean: f64 = masks.iter().map(ImageGrid::mean).sum::<f64>() / masks.len() as f64;
    log.line(format!("masks: {} images, mean variance {mean:.6e}", masks.len()))?;
    log.line(format!("wrote {}", art.masks.display()))
}

fn diffusion_examples(cfg: &RunConfig, art: &Artifacts) -> Result<Vec<DiffusionExample>> {
    let hrs = io::load_grids(&art.train_hr, "hr")?;
    let masks = io::load_grids(&art.masks, "mask")?;
    if hrs.len() != masks.len() {
        return Err(BuffError::Format(format!(
            "{} holds {} masks for {} training images; rerun make-masks",
            art.masks.display(),
            masks.len(),
            hrs.len()
        )));
    }
    let mut examples = Vec::new();
    for (hr, m) in hrs.iter().zip(masks) {
        let lr = degrade(hr, cfg.data_scale)?;
        let mask = UncertaintyMask::new(m)?;
        for p in crop_patches(hr, &lr, &mask, cfg.data_patch, cfg.data_stride)?.triples {
            examples.push(DiffusionExample {
                mask: refine_mask(&p.mask, &cfg.refine)?,
                lr: p.lr,
                hr: p.hr,
            });
        }
    }
    Ok(examples)
}

fn train_diff(cfg: &RunConfig, art: &Artifacts, log: &mut RunLog) -> Result<()> {
    require(&art.train_hr, Stage::TrainBayes)?;
    require(&art.masks, Stage::MakeMasks)?;
    let examples = diffusion_examples(cfg, art)?;
    log.line(format!(
        "diffusion: {} patches, bg={} be={}",
        examples.len(),
        cfg.guidance.use_bg,
        cfg.guidance.use_be
    ))?;

    let mut encoder = init_encoder(cfg.encoder_seed, cfg.encoder_channels, cfg.guidance.use_be)?;
    if cfg.encoder_pretrain_iterations > 0 {
        let prepared = prepare_examples(&examples)?;
        let (trained, history) = pretrain_encoder(&encoder, &prepared, &cfg.encoder_train(), cfg.guidance.use_be)?;
        log_history(log, "encoder", &history)?;
        encoder = trained;
    }
    io::save_checkpoint(&art.encoder, &encoder)?;

    let sched = make_schedule(cfg.diffusion_steps, cfg.diffusion_beta_start, cfg.diffusion_beta_end)?;
    let predictor = init_noise_predictor(cfg.diffusion_seed, cfg.diffusion_channels, cfg.encoder_channels, &sched)?;
    let (predictor, history) = train_diffusion(
        &predictor,
        &encoder,
        &examples,
        &sched,
        &cfg.diffusion_train(),
        cfg.guidance,
    )?;
    log_history(log, "diffusion", &history)?;
    io::save_checkpoint(&art.diffusion, &predictor)?;
    log.line(format!("wrote {} and {}", art.encoder.display(), art.diffusion.display()))
}

fn infer(cfg: &RunConfig, art: &Artifacts, log: &mut RunLog) -> Result<()> {
    for (p, producer) in [
        (&art.test_hr, Stage::TrainBayes),
        (&art.bayes, Stage::TrainBayes),
        (&art.encoder, Stage::TrainDiff),
        (&art.diffusion, Stage::TrainDiff),
    ] {
        require(p, producer)?;
    }
    let bayes = io::load_checkpoint(&art.bayes)?;
    let encoder = io::load_checkpoint(&art.encoder)?;
    let predictor = io::load_checkpoint(&art.diffusion)?;
    let sched = make_schedule(cfg.diffusion_steps, cfg.diffusion_beta_start, cfg.diffusion_beta_end)?;
    let unet = UNet(&predictor);
    let models = SrModels {
        predictor: &unet,
        encoder: &encoder,
        bayes: Some(&bayes),
        schedule: &sched,
        refine: &cfg.refine,
        guidance: cfg.guidance,
    };
    let tests = io::load_grids(&art.test_hr, "hr")?;
    for (i, hr) in tests.iter().enumerate() {
        let lr = degrade(hr, cfg.data_scale)?;
        let sr = sample_sr(&lr, &models, cfg.data_scale, cfg.infer_seed.wrapping_add(i as u64))?;
        io::write_pgm(&art.sr_image(i), &sr)?;
    }
    log.line(format!("wrote {} SR images to {}", tests.len(), art.outputs.display()))
}

/// Per-image and mean evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<MetricsRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_ause: f64,
    pub bicubic_psnr_db: f64,
    pub bicubic_ssim: f64,
}

impl EvalSummary {
    pub fn render(&self) -> String {
        format!(
            "images={}\nmean_psnr_db={:.6}\nmean_ssim={:.6}\nbicubic_psnr_db={:.6}\nbicubic_ssim={:.6}\npsnr_gain_db={:.6}\nmean_ause={:.6}\nmask_quality={}\n",
            self.rows.len(),
            self.mean_psnr_db,
            self.mean_ssim,
            self.bicubic_psnr_db,
            self.bicubic_ssim,
            self.mean_psnr_db - self.bicubic_psnr_db,
            self.mean_ause,
            mask_quality_label(self.mean_ause),
        )
    }

    /// Read back a summary written by eval.
    pub fn parse_value(text: &str, key: &str) -> Option<f64> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.parse().ok())
    }
}

/// Compute the evaluation without writing anything.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalSummary> {
    let art = Artifacts::new(cfg);
    require(&art.test_hr, Stage::TrainBayes)?;
    require(&art.bayes, Stage::TrainBayes)?;
    let bayes = io::load_checkpoint(&art.bayes)?;
    let tests = io::load_grids(&art.test_hr, "hr")?;
    let mut rows = Vec::with_capacity(tests.len());
    let (mut bic_psnr, mut bic_ssim) = (0.0, 0.0);
    for (i, hr) in tests.iter().enumerate() {
        let path = art.sr_image(i);
        require(&path, Stage::Infer)?;
        let sr = io::read_pgm(&path)?;
        let lr = degrade(hr, cfg.data_scale)?;
        let lr_up = upscale(&lr, cfg.data_scale)?;
        let bic = lr_up.clamp(0.0, 1.0);
        bic_psnr += psnr(&bic, hr, 1.0)?;
        bic_ssim += ssim(&bic, hr)?;

        let field = forward_uncertainty(&bayes, &lr_up)?;
        let var = variance_map(&field)?;
        let err = field.mean().zip_map(hr, |m, y| (m - y).abs())?;
        let a = ause(&sparsification(var.grid(), &err, cfg.eval_steps)?);
        if !a.defined {
            log::warn!("image {i}: zero uncertainty-net error, AUSE undefined");
        }
        rows.push(MetricsRow {
            image_id: format!("{i:04}"),
            psnr_db: psnr(&sr, hr, 1.0)?,
            ssim: ssim(&sr, hr)?,
            ause: a.value,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalSummary {
        mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_ause: rows.iter().map(|r| r.ause).sum::<f64>() / n,
        bicubic_psnr_db: bic_psnr / n,
        bicubic_ssim: bic_ssim / n,
        rows,
    })
}

fn eval(cfg: &RunConfig, art: &Artifacts, log: &mut RunLog) -> Result<()> {
    let summary = evaluate(cfg)?;
    fs::create_dir_all(&art.outputs)?;
    fs::write(&art.metrics, io::format_metrics_csv(&summary.rows))?;
    fs::write(&art.summary, summary.render())?;
    for line in summary.render().lines() {
        log.line(format!("eval {line}"))?;
    }
    log.line(format!("wrote {}", art.metrics.display()))
}

fn log_history(log: &mut RunLog, what: &str, history: &[f64]) -> Result<()> {
    if history.is_empty() {
        return Ok(());
    }
    let window = (history.len() / 10).max(1);
    for (k, chunk) in history.chunks(window).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        log.line(format!("{what} iters {}..{} mean loss {mean:.6}", k * window + 1, k * window + chunk.len()))?;
    }
    Ok(())
}

//! End-to-end runs: data resolution, both training stages, evaluation, and
//! the files each step leaves in the output directory.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{model_hash, RunConfig};
use crate::data::{load_dataset, save_image, synth_image, DataError, ImageBuffer};
use crate::eval::{bicubic_baseline, run_benchmark, EvalError, MetricReport};
use crate::model::{Model, ModelError};
use crate::train::{log_csv, model_from_checkpoint, train_stage, transfer_weights, EpochRecord, Objective, StageInputs, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const STAGE1_CKPT: &str = "stage1.c2dk";
pub const STAGE2_CKPT: &str = "stage2.c2dk";
pub const FAILURE_CKPT: &str = "failure.c2dk";
pub const TRAIN1_LOG: &str = "train1_log.csv";
pub const TRAIN2_LOG: &str = "train2_log.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const BICUBIC_CSV: &str = "bicubic.csv";

// independent random streams derived from the run seed
const STREAM_INIT1: u64 = 1;
const STREAM_DATA1: u64 = 2;
const STREAM_INIT2: u64 = 3;
const STREAM_DATA2: u64 = 4;
const STREAM_SYNTH_TRAIN: u64 = 5;
const STREAM_SYNTH_VAL: u64 = 6;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Procedural training and validation sets; the same seed gives the same
/// images whether they are kept in memory or written by `gen-data`.
pub fn synthetic_sets(cfg: &RunConfig) -> (Vec<(String, ImageBuffer)>, Vec<(String, ImageBuffer)>) {
    let d = &cfg.data;
    let make = |stream, n: usize, size, tag: &str| {
        let mut rng = rng_for(d.synth_seed, stream);
        (0..n)
            .map(|i| (format!("{tag}{i:04}"), synth_image(&mut rng, size, size)))
            .collect::<Vec<_>>()
    };
    (
        make(STREAM_SYNTH_TRAIN, d.synth_train, d.synth_train_size, "train"),
        make(STREAM_SYNTH_VAL, d.synth_val, d.synth_val_size, "val"),
    )
}

/// Writes the synthetic sets as `<root>/train/hr/*.png`, `<root>/val/hr/*.png`.
pub fn generate_data(cfg: &RunConfig, root: &Path) -> Result<(usize, usize)> {
    let (train, val) = synthetic_sets(cfg);
    for (sub, set) in [("train", &train), ("val", &val)] {
        let dir = root.join(sub).join("hr");
        ensure_dir(&dir)?;
        for (name, img) in set {
            save_image(img, &dir.join(format!("{name}.png")))?;
        }
    }
    Ok((train.len(), val.len()))
}

fn resolve_dir(explicit: &str, sub: &str) -> Option<PathBuf> {
    if !explicit.is_empty() {
        return Some(PathBuf::from(explicit));
    }
    std::env::var_os("C2D_DATA_ROOT").map(|root| PathBuf::from(root).join(sub))
}

/// Training pool and validation set per the data section.
pub fn load_sets(cfg: &RunConfig) -> Result<(Vec<ImageBuffer>, Vec<(String, ImageBuffer)>)> {
    let train_dir = resolve_dir(&cfg.data.train_dir, "train");
    let val_dir = resolve_dir(&cfg.data.val_dir, "val");
    let needs_synth = train_dir.is_none() || val_dir.is_none();
    let (synth_train, synth_val) = if needs_synth {
        synthetic_sets(cfg)
    } else {
        (Vec::new(), Vec::new())
    };
    let train = match train_dir {
        Some(d) => load_dataset(&d)?,
        None => synth_train,
    };
    let val = match val_dir {
        Some(d) => load_dataset(&d)?,
        None => synth_val,
    };
    Ok((train.into_iter().map(|(_, i)| i).collect(), val))
}

pub struct StageResult {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

fn inputs<'a>(cfg: &RunConfig, pool: &'a [ImageBuffer], val: &'a [(String, ImageBuffer)], out: &Path, stage: u8) -> StageInputs<'a> {
    StageInputs {
        pool,
        val,
        patch: cfg.data.patch,
        val_scale: cfg.model.scale,
        metrics: cfg.eval,
        failure_path: Some(out.join(FAILURE_CKPT)),
        config_hash: model_hash(&cfg.stage_model(stage)),
        stage,
    }
}

/// Continuous-scale pre-training; writes `stage1.c2dk` and `train1_log.csv`.
pub fn run_stage1(cfg: &RunConfig, pool: &[ImageBuffer], val: &[(String, ImageBuffer)], out: &Path) -> Result<StageResult> {
    cfg.validate()?;
    ensure_dir(out)?;
    let mcfg = cfg.stage_model(1);
    let mut model = Model::new(&mcfg, &mut rng_for(cfg.seed, STREAM_INIT1))?;
    let objective = Objective::Continuous {
        q_count: cfg.data.q_count,
        scale_min: cfg.data.scale_min,
        scale_max: cfg.data.scale_max,
    };
    let inp = inputs(cfg, pool, val, out, 1);
    let res = train_stage(&mut model, &cfg.train1, objective, &inp, &mut rng_for(cfg.seed, STREAM_DATA1), None)?;
    let adam = cfg.train1.save_optimizer.then_some(&res.adam);
    let path = out.join(STAGE1_CKPT);
    Checkpoint::from_params(model.params(), model_hash(&mcfg), 1, adam).save(&path)?;
    write(&out.join(TRAIN1_LOG), &log_csv(&res.log))?;
    Ok(StageResult {
        model,
        log: res.log,
        checkpoint: path,
    })
}

/// Discrete fine-tuning from a stage-1 checkpoint, or training from scratch
/// when `init` is `None` (then both stages' epochs with stage-1 rates).
/// Writes `stage2.c2dk` and `train2_log.csv`.
pub fn run_stage2(
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    pool: &[ImageBuffer],
    val: &[(String, ImageBuffer)],
    out: &Path,
) -> Result<StageResult> {
    cfg.validate()?;
    ensure_dir(out)?;
    let mcfg = cfg.stage_model(2);
    let mut init_rng = rng_for(cfg.seed, STREAM_INIT2);
    let (mut model, plan) = match init {
        Some(ck) => (transfer_weights(ck, &mcfg, &mut init_rng)?, cfg.train2.clone()),
        None => {
            let plan = crate::config::StagePlan {
                epochs: cfg.train1.epochs + cfg.train2.epochs,
                ..cfg.train1.clone()
            };
            (Model::new(&mcfg, &mut init_rng)?, plan)
        }
    };
    let inp = inputs(cfg, pool, val, out, 2);
    let objective = Objective::Discrete { scale: cfg.model.scale };
    let res = train_stage(&mut model, &plan, objective, &inp, &mut rng_for(cfg.seed, STREAM_DATA2), None)?;
    let adam = plan.save_optimizer.then_some(&res.adam);
    let path = out.join(STAGE2_CKPT);
    Checkpoint::from_params(model.params(), model_hash(&mcfg), 2, adam).save(&path)?;
    write(&out.join(TRAIN2_LOG), &log_csv(&res.log))?;
    Ok(StageResult {
        model,
        log: res.log,
        checkpoint: path,
    })
}

/// Loads a stage-2 checkpoint for `cfg`.
pub fn load_stage2(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    if ck.stage != 2 {
        return Err(CheckpointError::Stage {
            found: ck.stage,
            expected: 2,
        }
        .into());
    }
    Ok(model_from_checkpoint(&ck, &cfg.stage_model(2), &mut rng_for(cfg.seed, STREAM_INIT2))?)
}

pub struct EvalResult {
    pub model: MetricReport,
    pub bicubic: MetricReport,
}

/// Scores `model` and the bicubic baseline; writes `eval.csv` and `bicubic.csv`.
pub fn run_eval(cfg: &RunConfig, model: &Model, val: &[(String, ImageBuffer)], out: &Path) -> Result<EvalResult> {
    ensure_dir(out)?;
    let s = cfg.model.scale;
    let m = run_benchmark(model, val, s, &cfg.eval, &cfg.name, "val")?;
    let b = bicubic_baseline(val, s, &cfg.eval, "val")?;
    write(&out.join(EVAL_CSV), &m.to_csv())?;
    write(&out.join(BICUBIC_CSV), &b.to_csv())?;
    Ok(EvalResult { model: m, bicubic: b })
}

pub struct RunSummary {
    pub stage1: Option<Vec<EpochRecord>>,
    pub stage2: Vec<EpochRecord>,
    pub eval: EvalResult,
}

/// Stage 1 (if enabled), stage 2 and evaluation in one go.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    let (pool, val) = load_sets(cfg)?;
    let (stage1, init) = if cfg.c2d {
        let r = run_stage1(cfg, &pool, &val, out)?;
        (Some(r.log), Some(Checkpoint::load(&r.checkpoint)?))
    } else {
        (None, None)
    };
    let s2 = run_stage2(cfg, init.as_ref(), &pool, &val, out)?;
    let eval = run_eval(cfg, &s2.model, &val, out)?;
    Ok(RunSummary {
        stage1,
        stage2: s2.log,
        eval,
    })
}

//! Training loops for the continuous (stage 1) and discrete (stage 2) phases.

use crate::checkpoint::{Checkpoint, CheckpointError, ADAM_PREFIX};
use crate::config::StagePlan;
use crate::data::{sample_stage1, sample_stage2, DataError, ImageBuffer};
use crate::eval::{run_benchmark, EvalError, MetricOptions};
use crate::model::{Model, ModelConfig, ModelError, Upsampler, UPSAMPLER_PREFIX};
use crate::optim::{AdamState, OptimError};
use crate::params::Grads;
use crate::tensor::{Graph, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at epoch {epoch}, step {step}; pre-step parameters saved to {saved:?}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        saved: Option<PathBuf>,
    },
    #[error("stage {stage} needs a {need} upsampler")]
    WrongStage { stage: u8, need: &'static str },
    #[error("empty training pool")]
    EmptyPool,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// What one training item supervises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Random real scale per item, L1 on sampled HR pixels.
    Continuous {
        q_count: usize,
        scale_min: f64,
        scale_max: f64,
    },
    /// Fixed integer scale, L1 on the whole HR patch.
    Discrete { scale: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: Option<f64>,
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_psnr\n");
    for r in records {
        let val = r.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:e},{:.8},{}", r.epoch, r.lr, r.train_loss, val);
    }
    s
}

/// Everything a stage needs besides the model.
pub struct StageInputs<'a> {
    pub pool: &'a [ImageBuffer],
    pub val: &'a [(String, ImageBuffer)],
    pub patch: usize,
    /// Integer scale used for validation PSNR.
    pub val_scale: usize,
    pub metrics: MetricOptions,
    /// Where to write the pre-step parameters if training diverges.
    pub failure_path: Option<PathBuf>,
    pub config_hash: u64,
    pub stage: u8,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub log: Vec<EpochRecord>,
    pub adam: AdamState,
}

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> std::result::Result<f64, TensorError> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let l = g.l1_loss(p, target)?;
    Ok(g.value(l).item() as f64)
}

/// One item's loss and parameter gradients.
enum Item {
    Continuous(crate::data::Stage1Sample),
    Discrete(crate::data::Stage2Sample),
}

fn item_grads(model: &Model, item: &Item) -> Result<(f64, Grads)> {
    let mut g = Graph::with_params(model.params());
    let (pred, target) = match item {
        Item::Continuous(s) => {
            let x = g.input(s.lr.to_tensor());
            let q = s.query_batch()?;
            (model.forward_continuous(&mut g, x, &q)?, s.targets())
        }
        Item::Discrete(s) => {
            let x = g.input(s.lr.to_tensor());
            (model.forward_discrete(&mut g, x)?, s.hr.to_tensor())
        }
    };
    let loss = g.l1_loss(pred, &target)?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

fn global_norm(g: &Grads, n: usize) -> f64 {
    (0..n)
        .filter_map(|i| g.get(crate::params::ParamId(i)))
        .map(|t| t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Runs one stage in place on `model`. Items are drawn in a fixed order from
/// `rng`; per-item gradients may be computed in parallel but are summed in
/// item order, so results do not depend on the thread count.
pub fn train_stage<R: Rng>(
    model: &mut Model,
    plan: &StagePlan,
    objective: Objective,
    inputs: &StageInputs<'_>,
    rng: &mut R,
    resume: Option<AdamState>,
) -> Result<StageOutcome> {
    match (objective, model.upsampler()) {
        (Objective::Continuous { .. }, Upsampler::Continuous(_)) | (Objective::Discrete { .. }, Upsampler::Discrete { .. }) => {}
        (Objective::Continuous { .. }, _) => {
            return Err(TrainError::WrongStage {
                stage: inputs.stage,
                need: "continuous",
            })
        }
        (Objective::Discrete { .. }, _) => {
            return Err(TrainError::WrongStage {
                stage: inputs.stage,
                need: "discrete",
            })
        }
    }
    if inputs.pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let schedule = plan.schedule()?;
    let mut adam = resume.unwrap_or_else(|| AdamState::new(model.params()));
    let mut log = Vec::with_capacity(plan.epochs);
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        let lr = schedule.lr_at_epoch(epoch)?;
        let mut order: Vec<usize> = (0..inputs.pool.len()).flat_map(|i| std::iter::repeat(i).take(plan.repeat)).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(plan.batch) {
            let items = chunk
                .iter()
                .map(|&i| -> Result<Item> {
                    let img = &inputs.pool[i];
                    Ok(match objective {
                        Objective::Continuous {
                            q_count,
                            scale_min,
                            scale_max,
                        } => Item::Continuous(sample_stage1(rng, img, inputs.patch, q_count, (scale_min, scale_max))?),
                        Objective::Discrete { scale } => Item::Discrete(sample_stage2(rng, img, inputs.patch, scale)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let results = crate::parallel::map(&items, |_, it| item_grads(model, it));
            let mut grads = Grads::new(model.params().len());
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                grads.merge(&g);
            }
            let n = items.len() as f32;
            grads.scale(1.0 / n);
            if !batch_loss.is_finite() || !grads.all_finite() {
                let saved = inputs.failure_path.clone();
                if let Some(p) = &saved {
                    Checkpoint::from_params(model.params(), inputs.config_hash, inputs.stage, None).save(p)?;
                }
                return Err(TrainError::NonFinite {
                    what: if batch_loss.is_finite() { "gradient" } else { "loss" },
                    epoch,
                    step,
                    saved,
                });
            }
            if plan.grad_clip > 0.0 {
                let norm = global_norm(&grads, model.params().len());
                if norm > plan.grad_clip {
                    grads.scale((plan.grad_clip / norm) as f32);
                }
            }
            adam.step(model.params_mut(), &grads, lr as f32)?;
            loss_sum += batch_loss;
            step += 1;
        }
        let train_loss = loss_sum / order.len() as f64;
        let last = epoch + 1 == plan.epochs;
        let val_psnr = if !inputs.val.is_empty() && (last || (epoch + 1) % plan.val_every == 0) {
            Some(validate(model, inputs)?)
        } else {
            None
        };
        log::info!(
            "stage {} epoch {}/{} lr {:.3e} loss {:.5}{}",
            inputs.stage,
            epoch + 1,
            plan.epochs,
            lr,
            train_loss,
            val_psnr.map(|v| format!(" val {v:.3} dB")).unwrap_or_default()
        );
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_psnr,
        });
    }
    Ok(StageOutcome { log, adam })
}

/// Mean validation PSNR at the stage's integer scale.
pub fn validate(model: &Model, inputs: &StageInputs<'_>) -> Result<f64> {
    let r = run_benchmark(model, inputs.val, inputs.val_scale, &inputs.metrics, "val", "val")?;
    Ok(r.mean_psnr())
}

/// Fresh stage-2 model whose shallow and deep extractor come from a stage-1
/// checkpoint; the discrete upsampler keeps its new initialization.
pub fn transfer_weights<R: Rng>(ckpt: &Checkpoint, cfg2: &ModelConfig, rng: &mut R) -> Result<Model> {
    if ckpt.stage != 1 {
        return Err(CheckpointError::Stage {
            found: ckpt.stage,
            expected: 1,
        }
        .into());
    }
    let mut model = Model::new(cfg2, rng)?;
    ckpt.load_into(model.params_mut(), |n| !n.starts_with(UPSAMPLER_PREFIX) && !n.starts_with(ADAM_PREFIX))?;
    Ok(model)
}

/// Rebuilds a model from a checkpoint whose hash must match `cfg`.
pub fn model_from_checkpoint<R: Rng>(ckpt: &Checkpoint, cfg: &ModelConfig, rng: &mut R) -> Result<Model> {
    ckpt.expect_hash(crate::config::model_hash(cfg))?;
    let mut model = Model::new(cfg, rng)?;
    ckpt.load_into(model.params_mut(), |_| true)?;
    Ok(model)
}

//! `c2d`: data generation, both training stages, evaluation, single-image
//! inference, complexity accounting and ablation runs.

use c2d_core::checkpoint::Checkpoint;
use c2d_core::complexity::count_complexity;
use c2d_core::config::{apply_ablation, ConfigError, RunConfig, ABLATIONS};
use c2d_core::data::{load_image, save_image, ImageBuffer};
use c2d_core::pipeline::{self, PipelineError, STAGE1_CKPT, STAGE2_CKPT};
use c2d_core::train::model_from_checkpoint;
use clap::{Args, Parser, Subcommand};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "c2d", version, about = "Windowed channel-correlation super-resolution")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Preset name or path to a .toml / .json config.
    #[arg(long, global = true, default_value = "desk")]
    config: String,
    /// Override a field, e.g. `--set model.channels=24`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to `runs/<config name>`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural training and validation images as PNG.
    GenData {
        /// Defaults to `<out-dir>/data`.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Continuous-scale pre-training.
    Train1,
    /// Fixed-scale training, from `<out-dir>/stage1.c2dk` when `c2d` is on.
    Train2 {
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a stage-2 checkpoint and bicubic on the validation set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Super-resolve one PNG.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Stage-1 checkpoints take any scale in [1, 4]; stage-2 ones only
        /// their own. Defaults to the stage-2 checkpoint in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Parameter and FLOP count of the stage-2 model.
    Complexity {
        /// Output size as HxW.
        #[arg(long, default_value = "720x1280", value_parser = parse_size)]
        out_size: (usize, usize),
        /// Count the continuous stage-1 model instead, at this scale.
        #[arg(long)]
        continuous_scale: Option<f64>,
    },
    /// Apply ablation transforms and train each variant.
    Ablation {
        /// Comma-separated subset of v1.1, v2.1, v3.1, v3.2, v3.3, v3.4.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Only print each variant's complexity.
        #[arg(long)]
        complexity_only: bool,
        #[arg(long, default_value = "720x1280", value_parser = parse_size)]
        out_size: (usize, usize),
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((dim(h)?, dim(w)?))
}

/// Exit code 2 for configuration mistakes, 1 for everything else.
struct Failure {
    code: u8,
    msg: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 2, msg: e.to_string() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            other => fail(other),
        }
    }
}

fn fail(e: impl Display) -> Failure {
    Failure { code: 1, msg: e.to_string() }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&common.config)?.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = common
        .out_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cfg.name.replace(['/', '\\', '+'], "_")));
    Ok((cfg, out))
}

fn announce(cfg: &RunConfig) {
    println!("# config {} hash {:016x}", cfg.name, cfg.hash());
    print!("{}", cfg.to_toml());
    println!("# end config");
}

fn record_config(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    pipeline::ensure_dir(out)?;
    let text = format!("# hash {:016x}\n{}", cfg.hash(), cfg.to_toml());
    std::fs::write(out.join("config.toml"), text).map_err(fail)
}

fn report_line(label: &str, r: &pipeline::EvalResult) {
    println!(
        "{label}: model {:.3} dB / {:.4}, bicubic {:.3} dB / {:.4}",
        r.model.mean_psnr(),
        r.model.mean_ssim(),
        r.bicubic.mean_psnr(),
        r.bicubic.mean_ssim()
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (cfg, out) = resolve(&cli.common)?;
    announce(&cfg);
    match cli.command {
        Command::GenData { root } => {
            let root = root.unwrap_or_else(|| out.join("data"));
            let (n_train, n_val) = pipeline::generate_data(&cfg, &root)?;
            println!("wrote {n_train} training and {n_val} validation images under {}", root.display());
        }
        Command::Train1 => {
            record_config(&cfg, &out)?;
            let (pool, val) = pipeline::load_sets(&cfg)?;
            let r = pipeline::run_stage1(&cfg, &pool, &val, &out)?;
            let last = r.log.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
            println!("stage 1 done, final loss {last:.5}, checkpoint {}", r.checkpoint.display());
        }
        Command::Train2 { init } => {
            record_config(&cfg, &out)?;
            let init = match init {
                Some(p) => Some(p),
                None if cfg.c2d => Some(out.join(STAGE1_CKPT)),
                None => None,
            };
            let ck = init.as_deref().map(Checkpoint::load).transpose().map_err(fail)?;
            let (pool, val) = pipeline::load_sets(&cfg)?;
            let r = pipeline::run_stage2(&cfg, ck.as_ref(), &pool, &val, &out)?;
            if let Some(p) = r.log.iter().rev().find_map(|e| e.val_psnr) {
                println!("last validation PSNR {p:.3} dB");
            }
            println!("stage 2 done, checkpoint {}", r.checkpoint.display());
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| out.join(STAGE2_CKPT));
            let model = pipeline::load_stage2(&cfg, &path)?;
            let (_, val) = pipeline::load_sets(&cfg)?;
            let r = pipeline::run_eval(&cfg, &model, &val, &out)?;
            report_line(&format!("x{} on {} images", cfg.model.scale, val.len()), &r);
        }
        Command::Infer {
            input,
            output,
            checkpoint,
            scale,
        } => {
            let path = checkpoint.unwrap_or_else(|| out.join(STAGE2_CKPT));
            let ck = Checkpoint::load(&path).map_err(fail)?;
            let mcfg = cfg.stage_model(ck.stage);
            let model = model_from_checkpoint(&ck, &mcfg, &mut pipeline::rng_for(cfg.seed, 0)).map_err(fail)?;
            let s = scale.unwrap_or(cfg.model.scale as f64);
            let lr = load_image(&input).map_err(fail)?;
            let sr = model.super_resolve(&lr.to_tensor(), s).map_err(fail)?;
            let img = ImageBuffer::from_tensor(&sr).map_err(fail)?;
            save_image(&img, &output).map_err(fail)?;
            println!("{}x{} -> {}x{} at x{s}", lr.height(), lr.width(), img.height(), img.width());
        }
        Command::Complexity {
            out_size,
            continuous_scale,
        } => {
            let (mcfg, s) = match continuous_scale {
                Some(s) => (cfg.stage_model(1), s),
                None => (cfg.stage_model(2), cfg.model.scale as f64),
            };
            let r = count_complexity(&mcfg, out_size.0, out_size.1, s).map_err(fail)?;
            print!("{}", r.to_text());
        }
        Command::Ablation {
            variants,
            complexity_only,
            out_size,
        } => {
            let names = variants.unwrap_or_else(|| ABLATIONS.iter().map(|s| s.to_string()).collect());
            let mut rows = Vec::new();
            for v in &names {
                let vc = apply_ablation(&cfg, v)?;
                println!("## {v}: windows {:?}, hash {:016x}", vc.model.windows, vc.hash());
                let r = count_complexity(&vc.stage_model(2), out_size.0, out_size.1, vc.model.scale as f64).map_err(fail)?;
                let mut row = format!("{v:<6} {:>10.1}K {:>9.2}G", r.params() as f64 / 1e3, r.flops() as f64 / 1e9);
                if !complexity_only {
                    let dir = out.join(v);
                    record_config(&vc, &dir)?;
                    let s = pipeline::run_all(&vc, &dir)?;
                    report_line(v, &s.eval);
                    row += &format!(" {:>9.3} dB", s.eval.model.mean_psnr());
                }
                rows.push(row);
            }
            println!("variant     params     FLOPs{}", if complexity_only { "" } else { "      PSNR" });
            for r in rows {
                println!("{r}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

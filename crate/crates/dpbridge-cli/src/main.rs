//! Command-line surface tying the pipeline into reproducible runs.
//!
//! Subcommands: `gen-data`, `train`, `sample`, `eval`, `verify`,
//! `sweep-steps`, `robustness`. A TOML config supplies run parameters;
//! flags override individual values. Exit codes: 0 success, 2 usage/config,
//! 3 i/o, 4 data/model validation, 5 verification failure.

mod config;
mod pnm;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use dpbridge::bridge::BridgeCoefficients;
use dpbridge::dataset::{self, NoiseKind, SamplePair, Split, Task};
use dpbridge::evaluator::{self, EvalRow};
use dpbridge::sampler::{accelerated_sample, GMode, SamplerConfig};
use dpbridge::trainer::{self, Trainer};
use dpbridge::verify;
use dpbridge::{Checkpoint, Error, LinearCodec};

#[derive(Parser)]
#[command(
    name = "dpbridge",
    about = "Diffusion-bridge dense prediction on procedural toy tasks",
    version
)]
struct Cli {
    /// TOML run configuration; omitted sections take documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override (propagates into dataset and training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset (train/val/test splits + manifest).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// "depth" or "normal"; defaults to the config's task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Train a model on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        omega2: Option<f64>,
        /// Enable/disable input normalization before the network.
        #[arg(long)]
        dan: Option<bool>,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run inference on one test sample; writes P5/P6 plus raw tensors.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        g_mode: Option<String>,
    },
    /// Evaluate on the test split; writes a metrics CSV row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        noise_kind: Option<String>,
        #[arg(long)]
        noise_level: Option<f64>,
    },
    /// Run the closed-form/Monte-Carlo verification suite.
    Verify {
        /// JSON-lines report (one object per check).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump the bridge coefficient table as CSV.
        #[arg(long)]
        dump_coeffs: Option<PathBuf>,
    },
    /// Evaluate across the configured step-count sweep.
    SweepSteps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate across the input-noise grid.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::OutOfRange { .. } => 2,
        Error::Io { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> dpbridge::Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli_seed.is_some() {
        cfg.master_seed = cli_seed;
        cfg.propagate_seed();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> dpbridge::Result<u8> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::GenData { out, task } => cmd_gen_data(&cfg, &out, task),
        Command::Train {
            data,
            out,
            log,
            iters,
            omega2,
            dan,
            resume,
        } => cmd_train(&cfg, &data, &out, log.as_deref(), iters, omega2, dan, resume.as_deref()),
        Command::Sample {
            checkpoint,
            data,
            index,
            out_prefix,
            steps,
            g_mode,
        } => cmd_sample(&cfg, &checkpoint, &data, index, &out_prefix, steps, g_mode),
        Command::Eval {
            checkpoint,
            data,
            out,
            steps,
            noise_kind,
            noise_level,
        } => cmd_eval(&cfg, &checkpoint, &data, &out, steps, noise_kind, noise_level),
        Command::Verify { out, dump_coeffs } => cmd_verify(&cfg, out.as_deref(), dump_coeffs.as_deref()),
        Command::SweepSteps {
            checkpoint,
            data,
            out,
        } => cmd_sweep_steps(&cfg, &checkpoint, &data, &out),
        Command::Robustness {
            checkpoint,
            data,
            out,
        } => cmd_robustness(&cfg, &checkpoint, &data, &out),
    }
}

fn resolve_task(cfg: &RunConfig, flag: Option<String>) -> dpbridge::Result<Task> {
    let name = flag
        .or_else(|| cfg.task.clone())
        .unwrap_or_else(|| "depth".to_string());
    name.parse()
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, task: Option<String>) -> dpbridge::Result<u8> {
    let task = resolve_task(cfg, task)?;
    cfg.dataset.validate(cfg.codec.factor)?;
    let entries = dataset::write_dataset(&cfg.dataset, task, out)?;
    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {} pairs ({} train / {} val / {} test) for task '{}' to {}",
        entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        task,
        out.display()
    );
    Ok(0)
}

struct LoadedData {
    dir: PathBuf,
    entries: Vec<dataset::ManifestEntry>,
    task: Task,
}

fn load_data(dir: &Path) -> dpbridge::Result<LoadedData> {
    let entries = dataset::read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::Format(format!(
            "empty manifest in {}",
            dir.display()
        )));
    }
    let task = entries[0].task;
    Ok(LoadedData {
        dir: dir.to_path_buf(),
        entries,
        task,
    })
}

fn load_split_pairs(data: &LoadedData, split: Split) -> dpbridge::Result<Vec<SamplePair>> {
    let pairs = dataset::load_split(&data.dir, &data.entries, split)?;
    if pairs.is_empty() {
        return Err(Error::Format(format!(
            "no samples in split '{}' of {}",
            split.as_str(),
            data.dir.display()
        )));
    }
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    log_path: Option<&Path>,
    iters: Option<usize>,
    omega2: Option<f64>,
    dan: Option<bool>,
    resume: Option<&Path>,
) -> dpbridge::Result<u8> {
    let data = load_data(data_dir)?;
    let train_pairs = load_split_pairs(&data, Split::Train)?;
    let shape = train_pairs[0].x.shape().to_vec();

    let mut train_cfg = cfg.train.clone();
    if let Some(i) = iters {
        train_cfg.total_iters = i;
    }
    if let Some(w) = omega2 {
        train_cfg.omega2 = w;
    }
    if let Some(d) = dan {
        train_cfg.dan_enabled = d;
    }

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Trainer::from_checkpoint(&ckpt, train_cfg)?
        }
        None => {
            let codec =
                LinearCodec::calibrated_default(shape[0], shape[1], shape[2], cfg.codec.factor)?;
            Trainer::new(cfg.schedule, codec, data.task, train_cfg)?
        }
    };

    let mut log = Vec::new();
    let ckpt = trainer.train(&train_pairs, Some(out), &mut log)?;
    if let Some(path) = log_path {
        trainer::write_log_csv(path, &log)?;
    }
    let last = log.last();
    println!(
        "trained {} iterations; final elbo {:.4}, ic {:.4}; checkpoint {}",
        ckpt.iteration,
        last.map_or(f64::NAN, |r| r.elbo_loss),
        last.map_or(f64::NAN, |r| r.ic_loss),
        out.display()
    );
    Ok(0)
}

struct ModelBundle {
    ckpt: Checkpoint,
    bridge: BridgeCoefficients,
    codec: LinearCodec,
    denoiser: dpbridge::Denoiser,
}

fn load_bundle(path: &Path) -> dpbridge::Result<ModelBundle> {
    let ckpt = Checkpoint::load(path)?;
    let schedule = ckpt.build_schedule()?;
    let bridge = BridgeCoefficients::from_schedule(&schedule)?;
    let codec = ckpt.build_codec()?;
    let denoiser = ckpt.build_denoiser()?;
    Ok(ModelBundle {
        ckpt,
        bridge,
        codec,
        denoiser,
    })
}

fn sampler_config(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    steps: Option<usize>,
    g_mode: Option<String>,
) -> dpbridge::Result<SamplerConfig> {
    let section = config::SamplerSection {
        n_steps: steps.unwrap_or(cfg.sampler.n_steps),
        g_mode: g_mode.unwrap_or_else(|| cfg.sampler.g_mode.clone()),
        eta: cfg.sampler.eta,
    };
    Ok(SamplerConfig {
        n_steps: section.n_steps,
        g_mode: section.g_mode()?,
        seed: cfg.master_seed.unwrap_or(bundle.ckpt.master_seed),
        dan_enabled: bundle.ckpt.dan_enabled,
    })
}

fn cmd_sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    index: usize,
    out_prefix: &Path,
    steps: Option<usize>,
    g_mode: Option<String>,
) -> dpbridge::Result<u8> {
    let bundle = load_bundle(checkpoint)?;
    let data = load_data(data_dir)?;
    let test = load_split_pairs(&data, Split::Test)?;
    if index >= test.len() {
        return Err(Error::OutOfRange {
            what: "sample index",
            got: index as i64,
            lo: 0,
            hi: test.len() as i64 - 1,
        });
    }
    let pair = &test[index];
    let scfg = sampler_config(cfg, &bundle, steps, g_mode)?;
    let (y_hat, z0_hat) =
        accelerated_sample(&bundle.denoiser, &bundle.bridge, &bundle.codec, &pair.x, &scfg)?;

    let with_suffix = |suffix: &str| -> PathBuf {
        let mut s = out_prefix.as_os_str().to_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    let img_path = with_suffix(if pair.y.shape()[2] == 1 { ".pgm" } else { ".ppm" });
    pnm::write_pnm(&img_path, &y_hat)?;
    y_hat.save(&with_suffix("_pred.dpbt"))?;
    z0_hat.save(&with_suffix("_latent.dpbt"))?;
    println!(
        "sampled test[{index}] with {} steps -> {}",
        scfg.n_steps,
        img_path.display()
    );
    Ok(0)
}

fn write_csv(path: &Path, rows: &[EvalRow]) -> dpbridge::Result<()> {
    dpbridge::write_atomic(path, |w| {
        writeln!(w, "{}", EvalRow::csv_header())?;
        for row in rows {
            writeln!(w, "{}", row.to_csv())?;
        }
        Ok(())
    })
}

fn eval_pairs_subset(cfg: &RunConfig, data: &LoadedData) -> dpbridge::Result<Vec<SamplePair>> {
    let mut pairs = load_split_pairs(data, Split::Test)?;
    pairs.truncate(cfg.eval.n_eval.max(1));
    Ok(pairs)
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    steps: Option<usize>,
    noise_kind: Option<String>,
    noise_level: Option<f64>,
) -> dpbridge::Result<u8> {
    let bundle = load_bundle(checkpoint)?;
    let data = load_data(data_dir)?;
    let pairs = eval_pairs_subset(cfg, &data)?;
    let scfg = sampler_config(cfg, &bundle, steps, None)?;
    let noise = match (noise_kind, noise_level) {
        (Some(kind), Some(level)) => Some((kind.parse::<NoiseKind>()?, level)),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "--noise-kind and --noise-level must be given together".into(),
            ))
        }
    };
    let row = evaluator::evaluate_set(
        &bundle.denoiser,
        &bundle.bridge,
        &bundle.codec,
        &pairs,
        data.task,
        &scfg,
        noise,
        scfg.seed,
    )?;
    println!("{}", EvalRow::csv_header());
    println!("{}", row.to_csv());
    write_csv(out, &[row])?;
    Ok(0)
}

fn cmd_verify(
    cfg: &RunConfig,
    out: Option<&Path>,
    dump_coeffs: Option<&Path>,
) -> dpbridge::Result<u8> {
    if let Some(path) = dump_coeffs {
        let schedule = cfg.schedule.build()?;
        let bc = BridgeCoefficients::from_schedule(&schedule)?;
        dpbridge::write_atomic(path, |w| {
            writeln!(w, "t,m,n,sbar,a,b,delta,k1,k2,k3,post_std")?;
            for t in 0..=bc.t_max() {
                let step = if t >= 1 {
                    let (a, b, d) = (bc.k1(t), bc.k2(t), bc.k3(t));
                    let (sa, sb, sd) = bc.step_kernel(t).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
                    format!(
                        "{sa:.17e},{sb:.17e},{sd:.17e},{a:.17e},{b:.17e},{d:.17e},{:.17e}",
                        bc.post_std(t)
                    )
                } else {
                    ",,,,,,".to_string()
                };
                writeln!(
                    w,
                    "{t},{:.17e},{:.17e},{:.17e},{step}",
                    bc.m(t),
                    bc.n(t),
                    bc.sbar(t)
                )?;
            }
            Ok(())
        })?;
        println!("coefficient table written to {}", path.display());
    }

    let seed = cfg.master_seed.unwrap_or(42);
    let reports = verify::run_all(seed)?;
    println!(
        "{:<42} {:>14} {:>12} {:>6}",
        "check", "max residual", "tolerance", "pass"
    );
    for r in &reports {
        println!(
            "{:<42} {:>14.4e} {:>12.3e} {:>6}",
            r.name,
            r.max_residual,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        dpbridge::write_atomic(path, |w| {
            for r in &reports {
                let line = serde_json::to_string(r).expect("report serializes");
                writeln!(w, "{line}")?;
            }
            Ok(())
        })?;
    }
    let all_pass = reports.iter().all(|r| r.pass);
    println!(
        "{} / {} checks passed",
        reports.iter().filter(|r| r.pass).count(),
        reports.len()
    );
    Ok(if all_pass { 0 } else { 5 })
}

fn cmd_sweep_steps(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
) -> dpbridge::Result<u8> {
    let bundle = load_bundle(checkpoint)?;
    let data = load_data(data_dir)?;
    let pairs = eval_pairs_subset(cfg, &data)?;
    let mut rows = Vec::new();
    for &steps in &cfg.eval.sweep_steps {
        let scfg = SamplerConfig {
            n_steps: steps,
            g_mode: GMode::Deterministic,
            seed: cfg.master_seed.unwrap_or(bundle.ckpt.master_seed),
            dan_enabled: bundle.ckpt.dan_enabled,
        };
        rows.push(evaluator::evaluate_set(
            &bundle.denoiser,
            &bundle.bridge,
            &bundle.codec,
            &pairs,
            data.task,
            &scfg,
            None,
            scfg.seed,
        )?);
    }
    write_csv(out, &rows)?;
    println!("step sweep ({} rows) written to {}", rows.len(), out.display());
    Ok(0)
}

fn cmd_robustness(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
) -> dpbridge::Result<u8> {
    let bundle = load_bundle(checkpoint)?;
    let data = load_data(data_dir)?;
    let pairs = eval_pairs_subset(cfg, &data)?;
    let scfg = sampler_config(cfg, &bundle, None, None)?;
    let rows = evaluator::robustness_sweep(
        &bundle.denoiser,
        &bundle.bridge,
        &bundle.codec,
        &pairs,
        data.task,
        &scfg,
        scfg.seed,
    )?;
    write_csv(out, &rows)?;
    println!(
        "robustness sweep ({} rows) written to {}",
        rows.len(),
        out.display()
    );
    Ok(0)
}

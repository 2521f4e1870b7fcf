use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use wdda::alignment::{
    append_csv, load_checkpoint, phase1_global_align, phase2_local_align, save_checkpoint, train_source, StageOutput,
};
use wdda::config::load_config;
use wdda::critic::bench::{gradient_contrast, TrainCriticConfig};
use wdda::data::{gen_gaussian_pair, load_dataset, make_domain_pair, save_dataset};
use wdda::eval::evaluate;
use wdda::{Error, RunConfig, Scenario};

#[derive(Parser)]
#[command(name = "wdda", version, about = "Wasserstein domain adaptation for a small object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV to append to (default: metrics.csv next to --out).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target dataset pair.
    GenData {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; `source/` and `target/` are created inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the source detector.
    TrainSource {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Global (backbone-level) alignment.
    AlignGlobal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Local (proposal-level) alignment; needs a global-alignment checkpoint.
    AlignLocal {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "global-ckpt")]
        source_ckpt: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: Domain,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Train a critic on a shifted Gaussian pair and compare its
    /// generator gradient with a cross-entropy domain classifier's.
    CriticBench {
        #[arg(long)]
        dim: usize,
        /// Shift per dimension; a single value is repeated.
        #[arg(long, num_args = 1.., value_delimiter = ',', allow_negative_numbers = true)]
        delta: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 2048)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure caused by the invocation rather than by the computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            existing(p, "config file")?;
            load_config(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.alignment.seed = s;
    }
    Ok(cfg)
}

fn dataset_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let p = flag
        .or_else(|| configured.clone())
        .ok_or_else(|| usage(format!("no {name} dataset: pass --{name} or set {name}_data in the config")))?;
    existing(&p, &format!("{name} dataset"))?;
    Ok(p)
}

fn finish(out: &StageOutput, ckpt: &Path, metrics: Option<PathBuf>) -> Result<()> {
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    save_checkpoint(&out.checkpoint, ckpt)?;
    let metrics = metrics.unwrap_or_else(|| ckpt.with_file_name("metrics.csv"));
    append_csv(&metrics, &out.metrics)?;
    println!(
        "wrote {} ({} phase, {} steps); metrics in {}",
        ckpt.display(),
        out.checkpoint.phase,
        out.metrics.len(),
        metrics.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            scenario,
            count,
            seed,
            out,
        } => {
            let scenario: Scenario = scenario.parse().map_err(|e: Error| usage(e.to_string()))?;
            if count == 0 {
                return Err(usage("--count must be positive"));
            }
            let (s, t) = make_domain_pair(scenario, count, seed)?;
            save_dataset(&s, &out.join("source"))?;
            save_dataset(&t, &out.join("target"))?;
            println!("wrote {count} {} image pairs to {}", scenario.preset_name(), out.display());
        }
        Command::TrainSource { common, data, out } => {
            let cfg = run_config(&common)?;
            let data = load_dataset(&dataset_path(data, &cfg.source_data, "data")?)?;
            let res = train_source(&data, &cfg.alignment)?;
            finish(&res, &out, common.metrics)?;
        }
        Command::AlignGlobal {
            common,
            source_ckpt,
            source,
            target,
            out,
        } => {
            let cfg = run_config(&common)?;
            existing(&source_ckpt, "checkpoint")?;
            let ckpt = load_checkpoint(&source_ckpt)?;
            let src = load_dataset(&dataset_path(source, &cfg.source_data, "source")?)?;
            let tgt = load_dataset(&dataset_path(target, &cfg.target_data, "target")?)?;
            let res = phase1_global_align(&ckpt, &src, &tgt, &cfg.alignment)?;
            finish(&res, &out, common.metrics)?;
        }
        Command::AlignLocal {
            common,
            source_ckpt,
            source,
            target,
            out,
        } => {
            let cfg = run_config(&common)?;
            existing(&source_ckpt, "checkpoint")?;
            let ckpt = load_checkpoint(&source_ckpt)?;
            let src = load_dataset(&dataset_path(source, &cfg.source_data, "source")?)?;
            let tgt = load_dataset(&dataset_path(target, &cfg.target_data, "target")?)?;
            let res = phase2_local_align(&ckpt, &src, &tgt, &cfg.alignment)?;
            finish(&res, &out, common.metrics)?;
        }
        Command::Evaluate {
            ckpt,
            data,
            domain,
            iou,
        } => {
            existing(&ckpt, "checkpoint")?;
            existing(&data, "dataset")?;
            if !(iou > 0.0 && iou <= 1.0) {
                return Err(usage(format!("--iou {iou} outside (0, 1]")));
            }
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let report = evaluate(&ck, &ds, matches!(domain, Domain::Target), iou)?;
            println!("{}", report.to_json());
        }
        Command::CriticBench {
            dim,
            delta,
            steps,
            count,
            seed,
        } => {
            if dim == 0 {
                return Err(usage("--dim must be positive"));
            }
            let delta = match delta.len() {
                0 => return Err(usage("--delta is required")),
                1 => vec![delta[0]; dim],
                n if n == dim => delta,
                n => return Err(usage(format!("--delta has {n} values for --dim {dim}"))),
            };
            let truth = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            let (xs, xt) = gen_gaussian_pair(dim, &delta, count, seed)?;
            let cfg = TrainCriticConfig {
                steps,
                seed,
                ..Default::default()
            };
            let r = gradient_contrast(&xs, &xt, &cfg, 1e-3)?;
            println!("truth {truth:.6}");
            println!("estimate {:.6}", r.w_estimate);
            println!("relative_error {:.6}", (r.w_estimate - truth).abs() / truth.max(f64::MIN_POSITIVE));
            println!("ce_loss {:.3e}", r.ce_loss);
            println!("grad_norm_ce_minimax {:.3e}", r.ce_minimax_norm);
            println!("grad_norm_ce_reversed {:.3e}", r.ce_reversed_norm);
            println!("grad_norm_wasserstein {:.3e}", r.wasserstein_norm);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::PhaseOrder(_) | Error::Config(_) | Error::Io { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

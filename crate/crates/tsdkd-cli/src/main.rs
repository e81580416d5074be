//! Operator surface: pretraining, distillation runs, evaluation, the
//! numerical check suites, analysis tools, and plot emission.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
//! check failure, 4 I/O error.

mod config;
mod plot;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use tsdkd::distill::{pretrain, run_distillation, MetricsRecord, ModelRole};
use tsdkd::harness::{
    bimodal_teacher, entropy_profile, evaluate_exact_match, mode_fit_demo, write_mode_demo_csv,
};
use tsdkd::lm::{checkpoint, TaskCodec};
use tsdkd::verify;
use tsdkd::{Error, Result};

const OUT_DIR_ENV: &str = "TSDKD_OUT_DIR";

#[derive(Parser)]
#[command(name = "tsdkd", version, about = "Token-selective dual knowledge distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pretraining on the task references until the exact-match
    /// target is reached.
    PretrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set seed=3 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which model dimensions to train: "teacher" or "student" (a
        /// student warm start for distillation baselines).
        #[arg(long, default_value = "teacher")]
        role: String,
    },
    /// Run the configured distillation objective against a pretrained
    /// teacher checkpoint.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out exact-match accuracy of a checkpoint on the configured task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Finite-difference verification of every loss gradient plus the
    /// ranking-normalization, JSD-limit, and gate-rescaling identities.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0xACCE97)]
        seed: u64,
    },
    /// Token-level vs sentence-level preference probability agreement over
    /// random tiny models.
    Prop1Check {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0xACCE97)]
        seed: u64,
    },
    /// Per-position mean entropy of sampled responses from a checkpoint.
    EntropyProfile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Number of traces to sample.
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a unimodal student to a bimodal teacher under JSD(beta).
    ModeDemo {
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG + CSV plots from a metrics stream or an analysis CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// One of: loss-curves, entropy-profile, mode-demo.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Let clap render help/version itself; everything else is a
            // usage error.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::InvalidParameter(_) | Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Checkpoint(_) => 4,
    }
}

/// --out flag, then the environment default, then the fallback.
fn resolve_out(flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::InvalidInput(format!("unserializable record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::PretrainTeacher { config, set, out, role } => {
            let mut cfg = config::parse_config(config.as_deref(), &set)?;
            let out_dir = resolve_out(out, &cfg.out_dir);
            cfg.out_dir = out_dir.to_string_lossy().into_owned();
            ensure_dir(&out_dir)?;
            let role = match role.as_str() {
                "teacher" => ModelRole::Teacher,
                "student" => ModelRole::Student,
                other => {
                    return Err(Error::Config(format!(
                        "role must be teacher or student, got {other:?}"
                    )))
                }
            };
            let (model, record) = pretrain(&cfg, role)?;
            let name = match role {
                ModelRole::Teacher => "teacher.ckpt",
                ModelRole::Student => "student_init.ckpt",
            };
            let ckpt = out_dir.join(name);
            checkpoint::save(&model, &ckpt)?;
            let metrics_name = match role {
                ModelRole::Teacher => "pretrain_teacher.metrics.jsonl",
                ModelRole::Student => "pretrain_student.metrics.jsonl",
            };
            write_metrics(&out_dir.join(metrics_name), &record.records)?;
            println!(
                "pretrained {} for {} steps: held-out exact match {:.4} (checkpoint {})",
                match role {
                    ModelRole::Teacher => "teacher",
                    ModelRole::Student => "student",
                },
                record.records.len(),
                record.final_eval,
                ckpt.display()
            );
            if let Some(warning) = &record.warning {
                println!("warning: {warning}");
            }
            Ok(0)
        }
        Command::Distill { config, set, out } => {
            let mut cfg = config::parse_config(config.as_deref(), &set)?;
            let out_dir = resolve_out(out, &cfg.out_dir);
            cfg.out_dir = out_dir.to_string_lossy().into_owned();
            let artifacts = run_distillation(&cfg)?;
            println!(
                "{} distillation finished: final exact match {:.4}, best {:.4} at step {}",
                cfg.objective.as_str(),
                artifacts.record.final_eval,
                artifacts.record.best_eval,
                artifacts.record.best_step
            );
            println!("metrics: {}", out_dir.join("metrics.jsonl").display());
            Ok(0)
        }
        Command::Eval { checkpoint: ckpt_path, config, set } => {
            let cfg = config::parse_config(config.as_deref(), &set)?;
            let model = checkpoint::load(&ckpt_path)?;
            let codec = TaskCodec::new();
            let (_, eval_set) = tsdkd::distill::task_datasets(&cfg)?;
            let acc = evaluate_exact_match(&model, &eval_set, &codec, cfg.max_response_len)?;
            println!(
                "exact match on {} held-out {} items: {:.4}",
                eval_set.len(),
                cfg.task.as_str(),
                acc
            );
            Ok(0)
        }
        Command::Gradcheck { trials, seed } => {
            let mut failed = false;
            let mut stdout = std::io::stdout().lock();
            let mut row = |name: &str, trials: usize, worst: f64, tol: f64, ok: bool| {
                let _ = writeln!(
                    stdout,
                    "{name:<18} {trials:>6}  worst {worst:>12.3e}  tolerance {tol:>8.0e}  {}",
                    if ok { "ok" } else { "FAIL" }
                );
            };
            for report in verify::gradient_suite(trials, seed)? {
                failed |= !report.passed();
                row(&report.name, report.trials, report.worst, report.tolerance, report.passed());
            }
            let pl = verify::pl_normalization_suite(trials, seed)?;
            failed |= !pl.passed();
            row(&pl.name, pl.trials, pl.worst, pl.tolerance, pl.passed());
            let (fwd, rev) = verify::jsd_limit_suite(trials, seed)?;
            for report in [fwd, rev] {
                failed |= !report.passed();
                row(&report.name, report.trials, report.worst, report.tolerance, report.passed());
            }
            let rescale = verify::rescaling_suite(10_000, seed)?;
            failed |= !rescale.passed();
            row(
                "rescaling",
                rescale.trials,
                rescale.worst_gap,
                rescale.tolerance,
                rescale.passed(),
            );
            if rescale.ordering_violations > 0 {
                let _ = writeln!(
                    stdout,
                    "rescaling ordering violations: {}",
                    rescale.ordering_violations
                );
            }
            Ok(if failed { 3 } else { 0 })
        }
        Command::Prop1Check { trials, seed } => {
            let report = verify::prop1_suite(trials, seed)?;
            println!(
                "{} instances: max |token-level - sentence-level| = {:.3e} (tolerance {:.0e}), label disagreements = {}",
                report.trials, report.worst_gap, report.tolerance, report.label_disagreements
            );
            Ok(if report.passed() { 0 } else { 3 })
        }
        Command::EntropyProfile { checkpoint: ckpt_path, config, set, n, seed, out } => {
            let cfg = config::parse_config(config.as_deref(), &set)?;
            let out_dir = resolve_out(out, &cfg.out_dir);
            ensure_dir(&out_dir)?;
            let model = checkpoint::load(&ckpt_path)?;
            let codec = TaskCodec::new();
            let (_, eval_set) = tsdkd::distill::task_datasets(&cfg)?;
            let prompts = eval_set
                .iter()
                .map(|item| codec.encode_prompt(&item.prompt))
                .collect::<Result<Vec<_>>>()?;
            let profile = entropy_profile(&model, &prompts, n, cfg.max_response_len, seed)?;
            let csv_path = out_dir.join("entropy_profile.csv");
            profile.write_csv(&csv_path)?;
            plot::plot_entropy_profile(&csv_path, &out_dir)?;
            println!(
                "profiled {} traces over {} positions: peak mean entropy {:.4} nats at position {}",
                n,
                profile.max_position(),
                profile.mean_entropy[profile.peak_position()],
                profile.peak_position()
            );
            println!("wrote {}", csv_path.display());
            Ok(0)
        }
        Command::ModeDemo { beta, steps, seed, out } => {
            let out_dir = resolve_out(out, ".");
            ensure_dir(&out_dir)?;
            let bins = 64;
            let centers = (16.0, 48.0);
            let teacher = bimodal_teacher(bins, centers.0, centers.1, 3.0, 0.55)?;
            let result = mode_fit_demo(&teacher, centers, 10.0, beta, steps, seed)?;
            let csv_path = out_dir.join("mode_demo.csv");
            write_mode_demo_csv(&result, &csv_path)?;
            plot::plot_mode_demo(&csv_path, &out_dir)?;
            println!(
                "beta {beta}: mass within {} bins of modes = {:.4} / {:.4}, final divergence {:.6e}{}",
                result.neighborhood,
                result.mass_near_mode_a,
                result.mass_near_mode_b,
                result.final_divergence,
                if result.converged { "" } else { " (best iterate, not converged)" }
            );
            Ok(0)
        }
        Command::Plot { metrics, kind, out } => {
            let out_dir = resolve_out(out, ".");
            ensure_dir(&out_dir)?;
            let files = match kind.as_str() {
                "loss-curves" => plot::plot_loss_curves(&metrics, &out_dir)?,
                "entropy-profile" => plot::plot_entropy_profile(&metrics, &out_dir)?,
                "mode-demo" => plot::plot_mode_demo(&metrics, &out_dir)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown plot kind {other:?} (expected loss-curves, entropy-profile or mode-demo)"
                    )))
                }
            };
            for file in files {
                println!("wrote {}", file.display());
            }
            Ok(0)
        }
    }
}

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use qsformer::config::RunConfig;
use qsformer::data::{sample_episode, EpisodeSpec};
use qsformer::emd::selftest::{run_selftest, OBJECTIVE_TOLERANCE, RESIDUAL_TOLERANCE};
use qsformer::par::{init_threads, Execution};
use qsformer::report::{metric_report, run_sweep, sweep_csv};
use qsformer::seed::derive_seed;
use qsformer::trainer::{
    evaluate, init_model, load_checkpoint, prepare_data, run_grad_check, save_checkpoint,
    tiny_gradcheck_config, train, Checkpoint, TrainConfig,
};
use qsformer::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qsformer",
    version,
    about = "Few-shot query-support transformer"
)]
struct Cli {
    /// Run every data-parallel section on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes metrics.jsonl, checkpoint.qsfc and config.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean test accuracy with a 95% interval.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Finite-difference check of the total loss (tiny config by default).
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Transport solver against brute-force and assignment oracles.
    EmdSelftest {
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints sampled training episodes as JSON lines.
    SampleEpisodes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Histogram CSV of normalized positive and negative pair similarities.
    MetricReport {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// λ × sampleFormer-depth grid; writes a CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::UnknownKey(_) | Error::BadValue { .. } => 2,
        Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::UnknownKey(_) => "unknown_key",
        Error::BadValue { .. } => "bad_value",
        Error::Io { .. } => "io",
        Error::VersionMismatch { .. } => "version_mismatch",
        Error::Corrupt(_) | Error::BadMagic(_) | Error::Truncated { .. } => "corrupt",
        Error::ParamShape { .. } | Error::UnknownParam(_) => "param_shape",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        _ => "error",
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn stdout_line(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn threads_from_env() -> Option<usize> {
    std::env::var("QSF_THREADS").ok()?.trim().parse().ok()
}

/// Config from `--config`, falling back to the one stored in the checkpoint.
fn config_and_checkpoint(
    config: Option<&Path>,
    checkpoint: &Path,
) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(&ckpt.config_text)?,
    };
    Ok((cfg, ckpt))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o.display().to_string();
            }
            let out_dir = PathBuf::from(&cfg.out_dir);
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let text = cfg.to_text();
            write_file(&out_dir.join("config.txt"), text.as_bytes())?;
            let started = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);

            let (data, split) = prepare_data(&cfg)?;
            let (model, mut store) = init_model(&cfg, &data)?;
            let tc = TrainConfig::from_run(&cfg)?;
            let log_path = out_dir.join("metrics.jsonl");
            let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = BufWriter::new(file);
            let summary = train(
                &model,
                &mut store,
                &data.view(&split.train)?,
                &tc,
                exec,
                &mut log,
            )?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;

            let ckpt = Checkpoint::capture(
                &store,
                text.clone(),
                cfg.epochs as u64,
                cfg.seed,
                summary.episodes_seen,
            );
            save_checkpoint(&out_dir.join("checkpoint.qsfc"), &ckpt)?;
            let val = evaluate(
                &model,
                &store,
                &data.view(&split.val)?,
                tc.episode,
                cfg.val_episodes,
                derive_seed(cfg.seed, "val", 0),
                exec,
            )?;
            let result = format!(
                "val_accuracy = {:.6}\nval_ci95 = {:.6}\n",
                val.mean, val.ci95
            );
            write_file(&out_dir.join("result.txt"), result.as_bytes())?;
            let finished = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let info = format!(
                "started_unix = {started}\nfinished_unix = {finished}\nthreads = {}\nexecution = {exec:?}\n",
                threads_from_env().map_or("default".to_string(), |t| t.to_string())
            );
            write_file(&out_dir.join("run_info.txt"), info.as_bytes())?;
            stdout_line(format!("{text}{result}").trim_end_matches('\n'))
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
        } => {
            let (cfg, ckpt) = config_and_checkpoint(config.as_deref(), &checkpoint)?;
            let (data, split) = prepare_data(&cfg)?;
            let (model, mut store) = init_model(&cfg, &data)?;
            ckpt.restore_into(&mut store)?;
            let spec = EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries)?;
            let n = episodes.unwrap_or(cfg.test_episodes);
            let res = evaluate(
                &model,
                &store,
                &data.view(&split.test)?,
                spec,
                n,
                derive_seed(cfg.seed, "test", 0),
                exec,
            )?;
            stdout_line(&format!(
                "episodes = {n}\ntest_accuracy = {:.6}\ntest_ci95 = {:.6}",
                res.mean, res.ci95
            ))
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => tiny_gradcheck_config(),
            };
            let report = run_grad_check(&cfg, exec)?;
            for (module, err) in report.per_module() {
                stdout_line(&format!("module {module} max_rel_err = {err:.3e}"))?;
            }
            let pass = report.passed(cfg.gradcheck_tolerance);
            stdout_line(&format!(
                "max_rel_err = {:.3e} tolerance = {:.1e} {}",
                report.max_rel_error,
                cfg.gradcheck_tolerance,
                if pass { "PASS" } else { "FAIL" }
            ))?;
            if !report.non_finite.is_empty() {
                stdout_line(&format!("non_finite_entries = {}", report.non_finite.len()))?;
            }
            if pass {
                Ok(())
            } else {
                let worst = report
                    .worst
                    .map(|w| format!("{}[{}]", w.param, w.index))
                    .unwrap_or_default();
                Err(Error::InvalidParam(format!(
                    "gradient check failed at {worst}"
                )))
            }
        }
        Command::EmdSelftest { instances, seed } => {
            let report = run_selftest(instances, seed, exec)?;
            let pass = report.passed();
            stdout_line(&format!(
                "instances = {}\nmax_objective_error = {:.3e} (tolerance {OBJECTIVE_TOLERANCE:.0e})\nmax_residual = {:.3e} (tolerance {RESIDUAL_TOLERANCE:.0e})\n{}",
                report.cases.len(),
                report.max_objective_error(),
                report.max_residual(),
                if pass { "PASS" } else { "FAIL" }
            ))?;
            if pass {
                Ok(())
            } else {
                Err(Error::InvalidParam(
                    "transport solver disagrees with its oracles".into(),
                ))
            }
        }
        Command::SampleEpisodes { config, count } => {
            let cfg = load_config(config.as_deref())?;
            let (data, split) = prepare_data(&cfg)?;
            let view = data.view(&split.train)?;
            let spec = EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries)?;
            let mut out = io::stdout().lock();
            for k in 0..count as u64 {
                let ep = sample_episode(&view, spec, derive_seed(cfg.seed, "train-episode", k))?;
                writeln!(out, "{}", ep.to_json_line())
                    .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
            }
            Ok(())
        }
        Command::MetricReport {
            config,
            checkpoint,
            episodes,
        } => {
            let (cfg, ckpt) = config_and_checkpoint(config.as_deref(), &checkpoint)?;
            let (data, split) = prepare_data(&cfg)?;
            let (model, mut store) = init_model(&cfg, &data)?;
            ckpt.restore_into(&mut store)?;
            let report = metric_report(
                &model,
                &store,
                &data.view(&split.test)?,
                EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries)?,
                episodes,
                derive_seed(cfg.seed, "report", 0),
                cfg.report_bins,
                exec,
            )?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (data, split) = prepare_data(&cfg)?;
            let rows = run_sweep(&cfg, &data, &split, exec)?;
            let csv = sweep_csv(&rows);
            match out {
                Some(p) => write_file(&p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(threads_from_env());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

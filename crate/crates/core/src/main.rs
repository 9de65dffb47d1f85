//! `itl` — experiment harness CLI.
//!
//! Verbs: `run` (execute a config), `report` (render CSVs/SVG/summary from a
//! run directory), `eval` (re-evaluate one task from a checkpoint),
//! `count-params` (closed-form parameter counts), `gen-stream` (write a task
//! stream manifest). Config errors exit with status 2, runtime errors with 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use itl::checkpoint::{self, SavedRun};
use itl::config::ExperimentConfig;
use itl::data::TaskTransform;
use itl::error::{ItlError, Result};
use itl::metrics::{count_params, format_mega};
use itl::report;
use itl::trainer::{evaluate, resume_sequence, RunMode, RunRecord};

#[derive(Parser)]
#[command(name = "itl", version, about = "Incremental task learning with low-rank rank increments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run(RunArgs),
    /// Render report artifacts (curves, heatmap, text summary) from a run directory.
    Report(ReportArgs),
    /// Evaluate one task from a checkpoint; must reproduce the recorded accuracy.
    Eval(EvalArgs),
    /// Closed-form parameter counts for an architecture and rank schedule.
    CountParams(CountParamsArgs),
    /// Materialize a task stream manifest (per-task permutations/angles/class sets).
    GenStream(GenStreamArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override epochs per task.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the number of tasks in the stream.
    #[arg(long)]
    tasks: Option<usize>,
    /// Override the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the run mode (incremental | parallel:N | parallel:full).
    #[arg(long)]
    mode: Option<String>,
    /// Override the data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `itl run`.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by `itl run`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// The config the run was started with (stream definition must match).
    #[arg(long)]
    config: PathBuf,
    /// Task id to evaluate (1-based).
    #[arg(long)]
    task: usize,
    /// Override the data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CountParamsArgs {
    #[arg(long, default_value_t = 784)]
    input_dim: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![256, 256])]
    hidden: Vec<usize>,
    /// Classes per task head.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    tasks: usize,
    #[arg(long, default_value_t = 11)]
    rank_first: usize,
    #[arg(long, default_value_t = 1)]
    rank_increment: usize,
    /// Also write the breakdown as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenStreamArgs {
    /// Experiment config defining the stream.
    #[arg(long)]
    config: PathBuf,
    /// Manifest output path (defaults to `<output_dir>/stream.json`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Eval(args) => cmd_eval(args),
        Command::CountParams(args) => cmd_count_params(args),
        Command::GenStream(args) => cmd_gen_stream(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ItlError::Config { .. } | ItlError::InvalidArgument { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &Path, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(tasks) = args.tasks {
        config.stream.tasks = tasks;
    }
    if let Some(lr) = args.lr {
        config.optim.lr = lr;
    }
    if let Some(mode) = &args.mode {
        config.mode = mode.clone();
    }
    if let Some(dir) = &args.data_dir {
        config.stream.data_dir = Some(dir.clone());
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("checkpoint_task_{task:03}.bin"))
}

fn find_latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| ItlError::io(dir.display().to_string(), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name
            .strip_prefix("checkpoint_task_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().is_none_or(|(b, _)| num > *b) {
                best = Some((num, entry.path()));
            }
        }
    }
    Ok(best)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = load_config(&args.config, &args)?;
    let out_dir = config.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| ItlError::io(out_dir.display().to_string(), e))?;

    let stream = config.load_stream()?;
    if stream.input_dim() != config.arch.input_dim {
        return Err(ItlError::Config {
            field: "arch.input_dim".into(),
            detail: format!(
                "config says {} but the data has dimension {}",
                config.arch.input_dim,
                stream.input_dim()
            ),
        });
    }
    let hyper = config.hyper();
    let mode = config.mode()?;

    let state = if args.resume {
        match find_latest_checkpoint(&out_dir)? {
            Some((task, path)) => {
                let saved = checkpoint::load(&path)?;
                if !saved.meta.same_run(&config.run_meta(0)) {
                    return Err(ItlError::Config {
                        field: "config".into(),
                        detail: format!("checkpoint {} belongs to a different run", path.display()),
                    });
                }
                println!("resuming after task {task} from {}", path.display());
                let mut record = RunRecord::new(mode);
                record.matrix = saved.matrix.clone();
                record.params_after_task = saved.params_after_task.clone();
                record.wall_secs = vec![0.0; task];
                Some((saved.net, record))
            }
            None => None,
        }
    } else {
        None
    };

    let mut on_task = |net: &itl::network::MultiHeadNet, record: &RunRecord| -> Result<()> {
        let t = record.tasks_done();
        let saved = SavedRun {
            meta: config.run_meta(t),
            net: net.clone(),
            matrix: record.matrix.clone(),
            params_after_task: record.params_after_task.clone(),
        };
        checkpoint::save(&checkpoint_path(&out_dir, t), &saved)?;
        report::write_accuracy_matrix_csv(&out_dir.join("accuracy_matrix.csv"), &record.matrix)?;
        let avg = record.matrix.avg_accuracy(t)?;
        let log = record.task_logs.last();
        println!(
            "task {t}/{total} done in {secs:.1}s  A_{t}={avg:.4}  train_acc={tacc:.4}  params={params}",
            total = stream.num_tasks(),
            secs = record.wall_secs.last().copied().unwrap_or(0.0),
            tacc = log.map_or(0.0, |l| l.final_train_accuracy),
            params = record.params_after_task.last().copied().unwrap_or(0),
        );
        Ok(())
    };

    let (record, _net) = resume_sequence(
        &stream,
        &config.arch.hidden_dims,
        &hyper,
        mode,
        state,
        &mut on_task,
    )?;

    let t = record.tasks_done();
    let avg_series: Vec<f64> = (1..=t)
        .map(|i| record.matrix.avg_accuracy(i))
        .collect::<Result<_>>()?;
    let summary = report::RunSummary {
        mode: mode.as_str(),
        tasks: t,
        final_avg_accuracy: *avg_series.last().expect("at least one task"),
        avg_accuracy: avg_series,
        final_forgetting: if t >= 2 {
            Some(record.matrix.forgetting(t)?)
        } else {
            None
        },
        total_params: record.params_after_task.last().copied().unwrap_or(0),
        params_after_task: record.params_after_task.clone(),
        wall_secs: record.wall_secs.clone(),
        config: serde_json::to_value(&config)?,
    };
    report::write_summary_json(&out_dir.join("summary.json"), &summary)?;
    println!(
        "run complete: A_{t}={:.4}  F_{t}={}  artifacts in {}",
        summary.final_avg_accuracy,
        summary
            .final_forgetting
            .map_or("n/a".to_string(), |f| format!("{f}")),
        out_dir.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let dir = &args.run_dir;
    let matrix = report::read_accuracy_matrix_csv(&dir.join("accuracy_matrix.csv"))?;
    report::write_avg_accuracy_csv(&dir.join("avg_accuracy.csv"), &matrix)?;
    if matrix.num_stages() >= 2 {
        report::write_forgetting_csv(&dir.join("forgetting.csv"), &matrix)?;
    }
    report::write_heatmap_svg(&dir.join("heatmap.svg"), &matrix)?;

    let mut text = report::render_text_summary(&matrix, None)?;
    if let Ok(summary) = report::read_summary_json(&dir.join("summary.json")) {
        text.push_str(&format!(
            "total params: {} ({})\nwall time: {:.1}s\n",
            summary.total_params,
            format_mega(summary.total_params),
            summary.wall_secs.iter().sum::<f64>()
        ));
    }
    std::fs::write(dir.join("report.txt"), &text)
        .map_err(|e| ItlError::io(dir.display().to_string(), e))?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let saved = checkpoint::load(&args.checkpoint)?;
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(dir) = &args.data_dir {
        config.stream.data_dir = Some(dir.clone());
    }
    config.validate()?;
    if !saved.meta.same_run(&config.run_meta(0)) {
        return Err(ItlError::Config {
            field: "config".into(),
            detail: "checkpoint and config describe different runs".into(),
        });
    }
    let task = args.task;
    if task == 0 || task > saved.meta.tasks_done {
        return Err(ItlError::UnknownTask {
            task,
            detail: format!("checkpoint has {} trained tasks", saved.meta.tasks_done),
        });
    }
    let mode = RunMode::parse(&saved.meta.mode)?;
    let net_task = match mode {
        RunMode::Incremental => task,
        RunMode::ParallelRank(_) | RunMode::ParallelFullRank => {
            if task != saved.meta.tasks_done {
                return Err(ItlError::UnknownTask {
                    task,
                    detail: format!(
                        "parallel checkpoint holds only task {}'s network",
                        saved.meta.tasks_done
                    ),
                });
            }
            1
        }
    };

    let stream = config.load_stream()?;
    let test = stream.test_task(task)?;
    let accuracy = evaluate(&saved.net, &test, net_task)?;
    println!("task={task} n={} accuracy={accuracy}", test.len());
    if let Some(recorded) = saved.matrix.get(saved.meta.tasks_done, task) {
        println!("recorded={recorded}");
    }
    Ok(())
}

fn cmd_count_params(args: CountParamsArgs) -> Result<()> {
    let classes = vec![args.classes; args.tasks];
    let r = count_params(
        args.input_dim,
        &args.hidden,
        &classes,
        args.rank_first,
        args.rank_increment,
        args.tasks,
    )?;
    println!(
        "factors={} selectors={} hidden_biases={} heads={} total={} ({})",
        r.factor_entries,
        r.selector_entries,
        r.hidden_bias_entries,
        r.head_entries,
        r.total,
        format_mega(r.total)
    );
    if let Some(path) = &args.csv {
        report::write_param_count_csv(path, &r)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen_stream(args: GenStreamArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(dir) = &args.data_dir {
        config.stream.data_dir = Some(dir.clone());
    }
    config.validate()?;
    let stream = config.load_stream()?;

    let per_task: Vec<serde_json::Value> = (1..=stream.num_tasks())
        .map(|t| {
            let transform = stream.transform(t).expect("task in range");
            match transform {
                TaskTransform::Permutation(p) => serde_json::json!({
                    "task": t,
                    "permutation": p,
                }),
                TaskTransform::Rotation(angle) => serde_json::json!({
                    "task": t,
                    "angle_degrees": angle,
                }),
                TaskTransform::ClassSet(set) => serde_json::json!({
                    "task": t,
                    "classes": set,
                }),
            }
        })
        .collect();
    let train = stream.train_task(1)?;
    let test = stream.test_task(1)?;
    let manifest = serde_json::json!({
        "kind": stream.kind().as_str(),
        "tasks": stream.num_tasks(),
        "seed": stream.seed(),
        "input_dim": stream.input_dim(),
        "base": {
            "train_samples": train.len(),
            "test_samples": test.len(),
        },
        "per_task": per_task,
    });

    let out = match &args.out {
        Some(path) => path.clone(),
        None => {
            std::fs::create_dir_all(&config.output_dir)
                .map_err(|e| ItlError::io(config.output_dir.display().to_string(), e))?;
            config.output_dir.join("stream.json")
        }
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&out, text).map_err(|e| ItlError::io(out.display().to_string(), e))?;
    println!("wrote {}", out.display());
    Ok(())
}

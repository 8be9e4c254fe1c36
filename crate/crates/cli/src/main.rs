use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cacl::compression::{compress_with_report, PruneConfig};
use cacl::harness::{config::RunConfig, io, report, stream};
use cacl::trainer::{self, Samples, TrainedModel};
use cacl::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cacl", version, about = "Compression-aware continual learning")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a continual-learning stream and write the model and metrics.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of one stored task on a labeled CSV file.
    Eval {
        /// Shared-space file (.cacl).
        #[arg(long)]
        model: PathBuf,
        /// 1-based task index.
        #[arg(long)]
        task: usize,
        /// CSV rows of `label,x1,x2,...`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Re-compress a saved task checkpoint at a given energy threshold.
    Compress {
        /// Uncompressed task checkpoint (.ctsk).
        #[arg(long)]
        model: PathBuf,
        /// Energy threshold e in [0, 1).
        #[arg(long)]
        energy: f64,
        /// Destination for the compressed checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics.json files of several runs into a summary table.
    Report {
        /// Directory holding metrics.json files, directly or one level down.
        #[arg(long)]
        runs: PathBuf,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let spec = cfg.network()?;
    let tasks = stream::generate_stream(&cfg.stream())?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;

    let shapes = spec.shapes();
    let mut checkpoint_err = None;
    let run = trainer::run_continual_with(&tasks, &spec, &cfg.train(), &mut |ev| {
        if let Some(f) = ev.trained {
            let path = out.join(format!("task_{}.ctsk", ev.task));
            if let Err(e) = io::save_task(&shapes, f, path) {
                checkpoint_err.get_or_insert(e);
            }
        }
        eprintln!(
            "task {}/{}: accuracies {:?}",
            ev.task,
            tasks.len(),
            ev.accuracies
                .iter()
                .map(|a| format!("{:.4}", a))
                .collect::<Vec<_>>()
        );
    })?;
    if let Some(e) = checkpoint_err {
        return Err(e);
    }

    match &run.model {
        TrainedModel::Shared(space) => io::save_space(&spec, space, out.join("model.cacl"))?,
        TrainedModel::PerTask(spaces) => {
            for (t, space) in spaces.iter().enumerate() {
                io::save_space(&spec, space, out.join(format!("model_task_{}.cacl", t + 1)))?;
            }
        }
        TrainedModel::Dense(_) => {}
    }
    let mut metrics = run.report;
    metrics.config = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Data(e.to_string()))?;
    write(&out.join("metrics.json"), json + "\n")?;
    write(&out.join("ranks.csv"), report::rank_csv(&metrics))?;
    for (t, task) in tasks.iter().enumerate() {
        write(
            &out.join(format!("task_{}_test.csv", t + 1)),
            stream::write_labeled_csv(&task.test),
        )?;
    }
    println!(
        "mode {}  ACC {:.2}%  BWT {:.2}%  size {} bytes ({:.6} MB)",
        metrics.mode,
        100.0 * metrics.acc,
        100.0 * metrics.bwt,
        metrics.final_size_bytes,
        metrics.size_mb
    );
    Ok(())
}

fn eval(model: &Path, task: usize, data: &Path) -> Result<()> {
    let (spec, space) = io::load_space(model)?;
    let sub = space.extract_subnetwork(task)?;
    let text = fs::read_to_string(data).map_err(|e| Error::Io {
        path: data.display().to_string(),
        source: e,
    })?;
    let (inputs, labels) = stream::parse_labeled_csv(&text, spec.input_len())?;
    let classes = sub.head.classes();
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {y} outside 0..{classes}")));
    }
    let acc = trainer::evaluate(&sub, &spec, &Samples { inputs, labels })?;
    println!("{acc}");
    Ok(())
}

fn compress(model: &Path, energy: f64, out: &Path) -> Result<()> {
    let (shapes, factors) = io::load_task(model)?;
    let cfg = PruneConfig::with_energy(energy);
    cfg.validate()?;
    let (pruned, layers) = compress_with_report(&factors, &cfg)?;
    io::save_task(&shapes, &pruned, out)?;
    println!("layer  rank  kept  error_sq      tail_energy   gram_dev_u  gram_dev_v");
    for l in &layers {
        println!(
            "{:>5} {:>5} {:>5}  {:<12.6e}  {:<12.6e}  {:<10.3e}  {:<10.3e}",
            l.layer + 1,
            l.original_rank,
            l.retained_rank,
            l.error_sq,
            l.tail_energy,
            l.gram_deviation_u,
            l.gram_deviation_v
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { model, task, data } => eval(&model, task, &data),
        Command::Compress { model, energy, out } => compress(&model, energy, &out),
        Command::Report { runs } => {
            let reports = report::load_reports(&runs)?;
            print!("{}", report::render_table(&report::summarize(&reports)));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

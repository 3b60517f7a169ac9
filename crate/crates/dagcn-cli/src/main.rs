use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dagcn::checkpoint::{load_checkpoint, save_checkpoint};
use dagcn::config::RunConfig;
use dagcn::train::{evaluate, render_report, run_cv, trace_csv};
use dagcn::tu::load_tu_dataset;
use dagcn::verify::{
    gradcheck_model, run_verification, verification_config, GRADCHECK_TOL,
};

/// Graph classification with dual attention: training, evaluation, and
/// verification, reproducible from a single seed.
#[derive(Parser)]
#[command(name = "dagcn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding TU-format datasets.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset name, e.g. MUTAG.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run stratified cross-validation training and write the report,
    /// per-epoch trace, and per-fold checkpoints.
    Train {
        /// Configuration file (TOML); every key has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for the report, trace, and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fold-parallel threads (results are identical for any value).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate a checkpoint over a full dataset.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Check backward gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full verification battery: reference transcript, gradient
    /// checks, permutation invariance, and mean-pool degeneracy.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print dataset statistics.
    DataStats {
        #[command(flatten)]
        data: DataArgs,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            seed,
            jobs,
        } => cmd_train(config, data, out, seed, jobs),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Verify { seed } => cmd_verify(seed),
        Command::DataStats { data } => cmd_data_stats(data),
    }
}

fn effective_config(
    config_path: Option<PathBuf>,
    data: DataArgs,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> anyhow::Result<RunConfig> {
    let mut config = match config_path {
        Some(path) => RunConfig::load(&path)
            .with_context(|| format!("loading configuration {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(dir) = data.dataset {
        config.dataset_dir = dir;
    }
    if let Some(name) = data.name {
        config.dataset = name;
    }
    if let Some(out) = out {
        config.out_dir = out;
    }
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(jobs) = jobs {
        config.jobs = jobs.max(1);
    }
    Ok(config)
}

fn cmd_train(
    config_path: Option<PathBuf>,
    data: DataArgs,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let config = effective_config(config_path, data, out, seed, jobs)?;
    let dataset = load_tu_dataset(&config.dataset_dir, &config.dataset)?;
    println!(
        "{}: {} graphs, {} classes, {} features",
        dataset.name,
        dataset.len(),
        dataset.num_classes,
        dataset.feature_dim
    );

    let report = run_cv(&dataset, &config.train, config.jobs)?;

    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    fs::write(config.out_dir.join("config.toml"), config.to_toml())?;
    fs::write(config.out_dir.join("report.toml"), render_report(&report))?;
    fs::write(config.out_dir.join("trace.csv"), trace_csv(&report))?;
    let model_config = config
        .train
        .model
        .resolve(dataset.num_classes, dataset.feature_dim);
    for fold in &report.folds {
        let path = config
            .out_dir
            .join(format!("checkpoint_fold_{}.json", fold.fold));
        let fold_seed = config.train.seed.wrapping_add(fold.fold as u64);
        save_checkpoint(&path, &model_config, fold_seed, &fold.params)?;
    }

    for fold in &report.folds {
        println!(
            "fold {}: test accuracy {:.4} (lr {})",
            fold.fold, fold.final_test_accuracy, fold.chosen_learning_rate
        );
    }
    println!(
        "{}: mean accuracy {:.4} +/- {:.4} over {} folds",
        report.dataset,
        report.mean_accuracy,
        report.std_accuracy,
        report.folds.len()
    );
    println!("outputs written to {}", config.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: PathBuf, data: DataArgs) -> anyhow::Result<ExitCode> {
    let (model_config, _, params) = load_checkpoint(&checkpoint)?;
    let dir = data.dataset.unwrap_or_else(|| PathBuf::from("data"));
    let name = data.name.unwrap_or_else(|| "MUTAG".into());
    let dataset = load_tu_dataset(&dir, &name)?;
    if dataset.feature_dim != model_config.feature_dim
        || dataset.num_classes != model_config.num_classes
    {
        bail!(
            "checkpoint was trained for {} features / {} classes, dataset has {} / {}",
            model_config.feature_dim,
            model_config.num_classes,
            dataset.feature_dim,
            dataset.num_classes
        );
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let accuracy = evaluate(&params, &dataset, &indices, &model_config)?;
    println!("{}: accuracy {:.6} over {} graphs", name, accuracy, dataset.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> anyhow::Result<ExitCode> {
    let config = verification_config();
    let mut all_ok = true;
    for s in 0..5 {
        let report = gradcheck_model(&config, seed.wrapping_add(s))?;
        let ok = report.passed();
        all_ok &= ok;
        println!(
            "seed {}: worst relative error {:.3e} (tolerance {:.0e}) .. {}",
            report.seed,
            report.worst(),
            GRADCHECK_TOL,
            if ok { "ok" } else { "FAIL" }
        );
        for (name, err) in &report.per_tensor {
            println!("    {name}: {err:.3e}");
        }
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_verify(seed: u64) -> anyhow::Result<ExitCode> {
    let report = run_verification(seed)?;
    print!("{}", report.render());
    Ok(if report.passed() {
        println!("verification passed");
        ExitCode::SUCCESS
    } else {
        println!("verification FAILED");
        ExitCode::FAILURE
    })
}

fn cmd_data_stats(data: DataArgs) -> anyhow::Result<ExitCode> {
    let dir = data.dataset.unwrap_or_else(|| PathBuf::from("data"));
    let name = data.name.unwrap_or_else(|| "MUTAG".into());
    let dataset = load_tu_dataset(&dir, &name)?;
    println!(
        "graphs: {}, max nodes: {}, avg nodes: {:.2}",
        dataset.len(),
        dataset.max_nodes(),
        dataset.mean_nodes()
    );
    println!("feature dimension: {}", dataset.feature_dim);
    println!("classes: {}", dataset.num_classes);
    for (original, &index) in &dataset.label_map {
        let count = dataset
            .graphs
            .iter()
            .filter(|g| g.label() == index)
            .count();
        println!("  class {index} (label {original}): {count} graphs");
    }
    Ok(ExitCode::SUCCESS)
}

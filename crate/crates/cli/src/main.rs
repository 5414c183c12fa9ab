use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use uamp_core::data::load_meta_dataset;
use uamp_core::embed::{
    collect_embeddings, project, read_embeddings_csv, write_embeddings_csv, write_points_csv,
    ProjectionMethod, TsneParams,
};
use uamp_core::harness::{run_experiment, ExperimentConfig};
use uamp_core::meta::{train_logged, HyperParams, LearnerKind, TrainedModel};
use uamp_core::sim::{gen_meta_dataset, EnvConfig, GenConfig};

#[derive(Parser)]
#[command(name = "uamp", about = "User-adaptive motion prediction toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-user interaction dataset.
    GenData(GenDataArgs),
    /// Train one learner on a dataset directory.
    Train(TrainArgs),
    /// Run a cross-validation experiment from a config file.
    Run(RunArgs),
    /// Collect adapted user embeddings from a trained model.
    Embed(EmbedArgs),
    /// Project collected embeddings to 2-D points.
    Project(ProjectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of users to simulate.
    #[arg(long)]
    users: usize,
    /// Episodes per user.
    #[arg(long)]
    episodes: usize,
    /// Timesteps per episode.
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for per-user files and stats.txt.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-user CSV exports.
    #[arg(long)]
    csv: bool,
    /// Compute normalization statistics over the first N users only.
    #[arg(long)]
    train_users: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Learner kind (e.g. proposed, cavia, maml, supervised-fixed).
    #[arg(long)]
    kind: String,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the model checkpoint and training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Users sampled per meta-update (K).
    #[arg(long)]
    users_per_update: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Batches sampled per user.
    #[arg(long, default_value_t = 50)]
    batches: usize,
    /// Samples per batch.
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV of (user_id, batch, phi...).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    /// Embeddings CSV produced by `embed`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Projection method: pca or tsne.
    #[arg(long, default_value = "tsne")]
    method: String,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV of (user_id, batch, px, py).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Run(args) => run_cmd(args),
        Command::Embed(args) => embed_cmd(args),
        Command::Project(args) => project_cmd(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        n_users: args.users,
        episodes_per_user: args.episodes,
        env: EnvConfig { episode_len: args.len, ..EnvConfig::default() },
        seed: args.seed,
        train_users: args.train_users,
        csv_export: args.csv,
    };
    let (meta, _, _) = gen_meta_dataset(&cfg, &args.out).context("generating dataset")?;
    let total: usize = meta.users.iter().map(|u| u.len()).sum();
    println!(
        "wrote {} users x {} episodes ({} samples) to {}",
        meta.n_users(),
        args.episodes,
        total,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let kind = LearnerKind::parse(&args.kind)?;
    let data = load_meta_dataset(&args.data).context("loading dataset")?;
    let mut hyper = HyperParams::defaults_for(kind);
    if let Some(v) = args.iterations {
        hyper.iterations = v;
    }
    if let Some(v) = args.batch_size {
        hyper.batch_size = v;
    }
    if let Some(v) = args.hidden {
        hyper.hidden = v;
    }
    if let Some(v) = args.embed {
        hyper.embed = v;
    }
    if let Some(v) = args.seed {
        hyper.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        hyper.checkpoint_every = v;
    }
    if let Some(v) = args.users_per_update {
        hyper.users_per_update = v;
    }
    std::fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train.log");
    let outcome = train_logged(kind, &data, &hyper, Some(&log_path), Some(&args.out))
        .context("training")?;
    let ckpt = args.out.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    if let Some(last) = outcome.log.last() {
        println!("{}", last.to_line());
    }
    println!("saved {}", ckpt.display());
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config).context("loading config")?;
    let results = run_experiment(&config).context("running experiment")?;
    print!("{}", results.table.to_text());
    for cell in &results.cells {
        if let Some(err) = &cell.error {
            eprintln!("cell {} fold {} seed {} failed: {}", cell.method, cell.fold, cell.seed, err);
        }
    }
    println!("results written to {}", config.output_dir.display());
    Ok(())
}

fn embed_cmd(args: EmbedArgs) -> Result<()> {
    let model = TrainedModel::load(&args.model).context("loading model")?;
    let data = load_meta_dataset(&args.data).context("loading dataset")?;
    let records = collect_embeddings(&model, &data, args.batches, args.batch_size, args.seed)?;
    write_embeddings_csv(&args.out, &records)?;
    println!("wrote {} embeddings to {}", records.len(), args.out.display());
    Ok(())
}

fn project_cmd(args: ProjectArgs) -> Result<()> {
    let mut records = read_embeddings_csv(&args.input)?;
    let method = ProjectionMethod::parse(&args.method)?;
    let params = TsneParams {
        perplexity: args.perplexity,
        iterations: args.iterations,
        learning_rate: args.learning_rate,
        ..TsneParams::default()
    };
    project(&mut records, method, &params, args.seed)?;
    write_points_csv(&args.out, &records)?;
    println!("wrote {} points to {}", records.len(), args.out.display());
    Ok(())
}

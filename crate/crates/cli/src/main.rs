use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prosona_core::ablation::{default_values, run_ablation};
use prosona_core::checkpoint;
use prosona_core::dataset::{generate_dataset, Dataset, Split};
use prosona_core::interpolation::export_interpolation;
use prosona_core::metrics::{evaluate, EvalConfig};
use prosona_core::synthetic::{default_styles, GenerationConfig};
use prosona_core::train::{eval_prompts, train_stage1, train_stage2, TrainConfig, TrainableSet};
use prosona_serve::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "prosona", version, about = "Prompt-guided multi-rater segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-rater dataset.
    Datagen(DatagenArgs),
    /// Train the probabilistic backbone.
    TrainStage1(TrainArgs),
    /// Train the prompt projection on top of a stage-1 checkpoint.
    TrainStage2(TrainArgs),
    /// Compute GED and Dice metrics on a split.
    Eval(EvalArgs),
    /// Train one stage-2 model per (alpha, beta) cell.
    Ablate(AblateArgs),
    /// Export a strip and area curve between two prompts.
    Interpolate(InterpolateArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

/// Explicit `--seed`, else `PROSONA_SEED`, else `default`.
fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("PROSONA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("PROSONA_SEED={v:?} is not an unsigned integer")),
        Err(_) => Ok(default),
    }
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 2)]
    annotators: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Stage-1 checkpoint directory (stage 2 only).
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// `stage2_mlp_only` or `stage2_full`.
    #[arg(long)]
    trainable_set: Option<String>,
}

impl TrainArgs {
    fn config(&self, stage: u8) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        cfg.seed = resolve_seed(self.seed, cfg.seed)?;
        if let Some(d) = &self.data {
            cfg.data_dir = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        let st = if stage == 1 { &mut cfg.stage1 } else { &mut cfg.stage2 };
        if let Some(v) = self.epochs {
            st.epochs = v;
        }
        if let Some(v) = self.lr {
            st.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            st.batch_size = v;
        }
        if let Some(v) = self.k {
            st.k = v;
        }
        if let Some(p) = &self.stage1 {
            cfg.stage1_checkpoint = Some(p.clone());
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.loss.beta = v;
        }
        if let Some(v) = self.tau {
            cfg.loss.tau = v;
        }
        if let Some(s) = &self.trainable_set {
            cfg.trainable_set = match s.as_str() {
                "stage2_mlp_only" => TrainableSet::Stage2MlpOnly,
                "stage2_full" => TrainableSet::Stage2Full,
                other => bail!("unknown trainable set {other:?}"),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    case: String,
    #[arg(long)]
    prompt_a: String,
    #[arg(long)]
    prompt_b: String,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Allowed CORS origin; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let cfg = GenerationConfig {
        height: a.height,
        width: a.width,
        cases: a.cases,
        ..Default::default()
    };
    let seed = resolve_seed(a.seed, 0)?;
    let manifest = generate_dataset(seed, &cfg, &default_styles(a.annotators), &a.out, a.force)?;
    println!(
        "wrote {} cases with {} annotators to {}",
        manifest.cases.len(),
        manifest.annotators(),
        a.out.display()
    );
    Ok(())
}

fn report_outcome(outcome: &prosona_core::train::TrainOutcome) {
    println!(
        "best epoch {} (val GED {:.4}) -> {}\nlast -> {}",
        outcome.best_epoch,
        outcome.best_val_ged,
        outcome.best.display(),
        outcome.last.display()
    );
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint, None)?;
    let ds = Dataset::open(&a.data)?;
    let cases = ds.load_split(a.split)?;
    let seed = resolve_seed(a.seed, 0)?;
    let mut cfg = EvalConfig::new(&a.split.to_string(), a.k, seed, eval_prompts(&ds));
    cfg.threshold = a.threshold;
    let report = evaluate(&model, &cases, cfg)?;
    report.write(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.train.config(2)?;
    let alphas = a.alphas.unwrap_or_else(default_values);
    let betas = a.betas.unwrap_or_else(default_values);
    let out = cfg.out_dir.clone();
    let grid = run_ablation(&cfg, &alphas, &betas, &out)?;
    for c in &grid.cells {
        match c.val_ged {
            Some(g) => println!("alpha={} beta={} val_ged={g:.4} ({})", c.alpha, c.beta, c.status),
            None => println!("alpha={} beta={} {}", c.alpha, c.beta, c.status),
        }
    }
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint, None)?;
    let ds = Dataset::open(&a.data)?;
    let case = ds.load_case(&a.case)?;
    let seed = resolve_seed(a.seed, 0)?;
    let curve = export_interpolation(
        &model,
        &case,
        &a.prompt_a,
        &a.prompt_b,
        a.steps,
        a.k,
        seed,
        a.threshold,
        &a.out,
    )?;
    for p in &curve {
        println!("t={:.3} area={}", p.t, p.area);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let dataset = a.data.as_deref().map(Dataset::open).transpose()?;
    let state = AppState::new(
        ServiceConfig {
            workers: a.workers,
            cors_origin: a.cors_origin.clone(),
            ..Default::default()
        },
        dataset,
    );
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        let loader = Arc::clone(&state);
        let ckpt = a.checkpoint.clone();
        tokio::task::spawn_blocking(move || match checkpoint::load(&ckpt, None) {
            Ok((model, meta)) => {
                tracing::info!("loaded checkpoint {}", meta.checkpoint_id);
                loader.set_model(model, meta);
            }
            Err(e) => {
                tracing::error!("failed to load {}: {e}", ckpt.display());
                std::process::exit(1);
            }
        });
        prosona_serve::serve(listener, state).await?;
        Ok(())
    })
}

fn check_stage1(path: &Path) -> Result<()> {
    let meta = checkpoint::read_meta(path)?;
    if meta.stage != 1 {
        bail!("{} is a stage-{} checkpoint, expected stage 1", path.display(), meta.stage);
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Datagen(a) => datagen(a),
        Command::TrainStage1(a) => {
            let cfg = a.config(1)?;
            report_outcome(&train_stage1(&cfg, &cfg.out_dir)?);
            Ok(())
        }
        Command::TrainStage2(a) => {
            let cfg = a.config(2)?;
            let Some(s1) = &cfg.stage1_checkpoint else {
                bail!("stage 2 needs a stage-1 checkpoint (--stage1 or stage1_checkpoint)");
            };
            check_stage1(s1)?;
            report_outcome(&train_stage2(&cfg, &cfg.out_dir)?);
            Ok(())
        }
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Serve(a) => serve(a),
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use set_encoder::encoder::{attention_cost, InteractionMode, ModelConfig};
use set_encoder::harness::formats::text_map;
use set_encoder::harness::{
    generate_synthetic, matrix_csv, mean_listwise_loss, perturb, rank_change_matrix, rankings,
    rerank, train_stage1, train_stage2, write_run, Dataset, ModelBundle, PerturbMode,
    Stage1Config, Stage1Loss, Stage2Config, Stage2Loss, SyntheticConfig,
};
use set_encoder::metrics::{evaluate, Gain, Metric, SubtopicMap};
use set_encoder::novelty::parse_clusters;
use set_encoder::numerics::AdamWConfig;

/// Set-encoder re-ranking experiments.
#[derive(Parser, Debug)]
#[command(name = "setenc", version)]
struct Cli {
    /// Where to write the run manifest (defaults next to the command's output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Write a synthetic collection to a directory.
    Generate(GenerateArgs),
    /// Fine-tune a model (stage 1 from scratch, stage 2 from a checkpoint).
    Train(TrainArgs),
    /// Re-rank the top passages of a run.
    Rerank(RerankArgs),
    /// Reorder a run randomly or by relevance judgments.
    Perturb(PerturbArgs),
    /// Evaluate a run against qrels.
    Eval(EvalArgs),
    /// Rank-change matrix between an input run and a re-ranked run.
    RankChanges(RankChangesArgs),
    /// Attention score-entry counts per layer.
    AttnCost(AttnCostArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    num_queries: usize,
    #[arg(long, default_value_t = 30)]
    passages_per_query: usize,
    #[arg(long, default_value_t = 600)]
    vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    passage_length: usize,
    #[arg(long, default_value_t = 3)]
    query_length: usize,
    #[arg(long, default_value_t = 4)]
    hard_negatives: usize,
    #[arg(long, default_value_t = 2)]
    variants: usize,
    #[arg(long, default_value_t = 0.5)]
    duplicate_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum LossArg {
    InfoNce,
    DaInfoNce,
    RankNet,
    NaRankNet,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    IntToken,
    ClsToken,
    None,
}

impl From<ModeArg> for InteractionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::IntToken => Self::IntToken,
            ModeArg::ClsToken => Self::ClsToken,
            ModeArg::None => Self::None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// 1 or 2.
    #[arg(long)]
    stage: u8,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint directory (required for stage 2).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: LossArg,
    #[arg(long, value_enum, default_value = "int-token")]
    interaction_mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stage-1 step cap.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Stage-2 epochs.
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Trailing queries held out for monitoring.
    #[arg(long, default_value_t = 50)]
    holdout: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Stage-2 candidates per query.
    #[arg(long, default_value_t = 20)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 256)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 512)]
    max_positions: usize,
}

#[derive(Args, Debug, Serialize)]
struct RerankArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// JSONL corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// `id<TAB>text` queries.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value = "set-encoder")]
    tag: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum PerturbArg {
    Random,
    Ideal,
    ReverseIdeal,
}

#[derive(Args, Debug, Serialize)]
struct PerturbArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, value_enum)]
    mode: PerturbArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MetricArg {
    Ndcg,
    AlphaNdcg,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum GainArg {
    Exponential,
    Linear,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Cluster file (`query_id<TAB>passage_id<TAB>cluster_id`) for alpha-ndcg.
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "exponential")]
    gain: GainArg,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RankChangesArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long, default_value_t = 100)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AttnCostArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    len: usize,
    #[arg(long, value_enum, default_value = "int-token")]
    interaction_mode: ModeArg,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

impl Command {
    fn default_manifest(&self) -> Option<PathBuf> {
        match self {
            Self::Generate(a) => Some(a.out.join("manifest.json")),
            Self::Train(a) => Some(a.out.join("manifest.json")),
            Self::Rerank(a) => Some(sibling_manifest(&a.out)),
            Self::Perturb(a) => Some(sibling_manifest(&a.out)),
            Self::Eval(a) => a.out.as_deref().map(sibling_manifest),
            Self::RankChanges(a) => Some(sibling_manifest(&a.out)),
            Self::AttnCost(_) => None,
        }
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_queries: a.num_queries,
        passages_per_query: a.passages_per_query,
        vocab_size: a.vocab_size,
        passage_length: a.passage_length,
        query_length: a.query_length,
        hard_negatives: a.hard_negatives,
        variants: a.variants,
        duplicate_rate: a.duplicate_rate,
        noise_rate: a.noise_rate,
        seed: a.seed,
    };
    let data = generate_synthetic(&cfg)?;
    data.save(&a.out)?;
    eprintln!(
        "wrote {} queries, {} passages to {}",
        data.queries.len(),
        data.corpus.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let n = data.queries.len();
    if a.holdout >= n {
        bail!("--holdout {} leaves no training queries out of {n}", a.holdout);
    }
    let (train_set, heldout) = data.split(n - a.holdout);
    let optimizer = AdamWConfig {
        learning_rate: a.learning_rate,
        ..AdamWConfig::default()
    };
    let log = match a.stage {
        1 => {
            let loss = match a.loss {
                LossArg::InfoNce => Stage1Loss::InfoNce,
                LossArg::DaInfoNce => Stage1Loss::DaInfoNce,
                other => bail!("{other:?} is a stage-2 loss"),
            };
            let config = ModelConfig {
                layers: a.layers,
                heads: a.heads,
                model_dim: a.model_dim,
                ffn_dim: a.ffn_dim,
                max_positions: a.max_positions,
                interaction_mode: a.interaction_mode.into(),
                ..ModelConfig::desk(0)
            };
            let mut bundle = ModelBundle::init(config, data.vocab()?, a.seed)?;
            let cfg = Stage1Config {
                loss,
                steps: a.steps,
                batch_size: a.batch_size,
                optimizer,
                seed: a.seed,
                ..Stage1Config::default()
            };
            let log = train_stage1(
                &mut bundle,
                &train_set.stage1_pools()?,
                &heldout.stage1_pools()?,
                &cfg,
            )?;
            bundle.save(&a.out)?;
            log
        }
        2 => {
            let loss = match a.loss {
                LossArg::RankNet => Stage2Loss::RankNet,
                LossArg::NaRankNet => Stage2Loss::NaRankNet,
                other => bail!("{other:?} is a stage-1 loss"),
            };
            let init = a.init.as_ref().context("stage 2 needs --init <stage-1 model dir>")?;
            let mut bundle = ModelBundle::load(init)?;
            let cfg = Stage2Config {
                loss,
                epochs: a.epochs,
                depth: a.depth,
                batch_size: a.batch_size,
                optimizer,
                seed: a.seed,
            };
            let log = train_stage2(&mut bundle, &train_set.instances(a.depth, true)?, &cfg)?;
            if !heldout.queries.is_empty() {
                let l = mean_listwise_loss(&bundle, &heldout.instances(a.depth, true)?, loss)?;
                eprintln!("held-out {loss}: {l:.6}");
            }
            bundle.save(&a.out)?;
            log
        }
        s => bail!("--stage must be 1 or 2, got {s}"),
    };
    write(&a.out.join("train_log.json"), &serde_json::to_string_pretty(&log)?)?;
    eprintln!(
        "trained {} steps, final loss {:.6}",
        log.steps,
        log.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn rerank_cmd(a: &RerankArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let run = set_encoder::harness::parse_run(&read(&a.run)?)?;
    let corpus = text_map(&set_encoder::harness::parse_corpus(&read(&a.corpus)?)?);
    let queries = text_map(&set_encoder::harness::parse_queries(&read(&a.queries)?)?);
    let out = rerank(&bundle, &run, &corpus, &queries, a.top_k, &a.tag)?;
    write(&a.out, &write_run(&out))
}

fn perturb_cmd(a: &PerturbArgs) -> Result<()> {
    let run = set_encoder::harness::parse_run(&read(&a.run)?)?;
    let qrels = set_encoder::harness::parse_qrels(&read(&a.qrels)?)?;
    let mode = match a.mode {
        PerturbArg::Random => PerturbMode::Random,
        PerturbArg::Ideal => PerturbMode::Ideal,
        PerturbArg::ReverseIdeal => PerturbMode::ReverseIdeal,
    };
    write(&a.out, &write_run(&perturb(&run, mode, &qrels, a.seed)))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let run = set_encoder::harness::parse_run(&read(&a.run)?)?;
    let qrels = set_encoder::harness::parse_qrels(&read(&a.qrels)?)?;
    let mut subtopics = SubtopicMap::new();
    if let Some(p) = &a.clusters {
        for c in parse_clusters(&read(p)?)? {
            subtopics.insert(&c.query_id, &c.passage_id, c.cluster_id);
        }
    }
    let metric = match a.metric {
        MetricArg::Ndcg => Metric::Ndcg {
            k: a.k,
            gain: match a.gain {
                GainArg::Exponential => Gain::Exponential,
                GainArg::Linear => Gain::Linear,
            },
        },
        MetricArg::AlphaNdcg => Metric::AlphaNdcg {
            k: a.k,
            alpha: a.alpha,
        },
    };
    let report = evaluate(&rankings(&run), &qrels, &subtopics, metric)?;
    match &a.out {
        Some(p) => write(p, &report.to_text()),
        None => {
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn rank_changes(a: &RankChangesArgs) -> Result<()> {
    let before = set_encoder::harness::parse_run(&read(&a.before)?)?;
    let after = set_encoder::harness::parse_run(&read(&a.after)?)?;
    let m = rank_change_matrix(&before, &after, a.depth)?;
    write(&a.out, &matrix_csv(&m))
}

fn attn_cost(a: &AttnCostArgs) -> Result<()> {
    let config = ModelConfig {
        interaction_mode: a.interaction_mode.into(),
        ..ModelConfig::desk(1)
    };
    let cost = attention_cost(&config, a.k, a.len)?;
    let mut out: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    out.insert("k", a.k.into());
    out.insert("len", a.len.into());
    out.insert("set_encoder_entries", cost.set_encoder_entries.into());
    out.insert("concat_entries", cost.concat_entries.into());
    out.insert("ratio", cost.ratio().into());
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(a) => generate(a)?,
        Command::Train(a) => train(a)?,
        Command::Rerank(a) => rerank_cmd(a)?,
        Command::Perturb(a) => perturb_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::RankChanges(a) => rank_changes(a)?,
        Command::AttnCost(a) => attn_cost(a)?,
    }
    if let Some(path) = cli.manifest.clone().or_else(|| cli.command.default_manifest()) {
        let manifest = serde_json::json!({
            "tool": "setenc",
            "version": env!("CARGO_PKG_VERSION"),
            "argv": std::env::args().collect::<Vec<_>>(),
            "flags": &cli.command,
        });
        write(&path, &serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

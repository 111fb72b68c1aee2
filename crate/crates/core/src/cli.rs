//! Command-line entry points.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::kg::{Dataset, KnowledgeGraph, Split, Triple};
use crate::model::Model;
use crate::trainer::{self, HistoryRow, TrainObserver, TrainState};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_SNAPSHOT: &str = "config.resolved";
/// Setting this to `1` turns on non-finite checks after every op.
pub const CHECKED_ENV: &str = "NCKGE_CHECKED";

#[derive(Debug, Parser)]
#[command(name = "nckge", version, about = "Knowledge graph embedding with contrastive training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write vocabularies and split statistics for a dataset directory.
    Preprocess {
        /// Directory holding train.tsv, valid.tsv and test.tsv.
        dir: PathBuf,
        /// Output directory (defaults to the dataset directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop repeated triples within each split.
        #[arg(long)]
        dedup: bool,
    },
    /// Train a model and write best.ckpt, history.csv and config.resolved.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides of the form --key=value.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Filtered ranking metrics for a checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Add one row per unordered entity-type pair.
        #[arg(long)]
        by_type: bool,
        /// Report path (defaults to eval_<split>.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Highest-scoring tails for a (head, relation) query.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        head: String,
        #[arg(long)]
        relation: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Skip tails already known to be true.
        #[arg(long)]
        filtered: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration (defaults to config.resolved next to the checkpoint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::UnknownName { .. } | Error::Parse { .. } | Error::Io(_) => 2,
        Error::Diverged { .. } | Error::NonFinite { .. } => 3,
        Error::FingerprintMismatch { .. } | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { dir, out, dedup } => preprocess(&dir, out.as_deref().unwrap_or(&dir), dedup),
        Command::Train { config, overrides } => {
            let mut cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            if std::env::var(CHECKED_ENV).is_ok_and(|v| v == "1") {
                cfg.train.checked = true;
            }
            train(&cfg).map(|_| ())
        }
        Command::Evaluate {
            run,
            split,
            by_type,
            out,
        } => {
            let split: Split = split.parse()?;
            let rows = evaluate(&run, split, by_type)?;
            let mut buf = Vec::new();
            eval::write_report_csv(&mut buf, &rows)?;
            io::stdout().write_all(&buf)?;
            let path = out.unwrap_or_else(|| sibling(&run.checkpoint, &format!("eval_{split}.csv")));
            fs::write(&path, &buf)?;
            Ok(())
        }
        Command::Predict {
            run,
            head,
            relation,
            k,
            filtered,
        } => {
            let rows = predict(&run, &head, &relation, k, filtered)?;
            let mut out = io::stdout().lock();
            for (e, s) in rows {
                writeln!(out, "{e}\t{s:.6}")?;
            }
            Ok(())
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn split_stats(name: &str, triples: &[&Triple]) -> [String; 4] {
    let ents: BTreeSet<&str> = triples.iter().flat_map(|t| [t.head.as_str(), t.tail.as_str()]).collect();
    let rels: BTreeSet<&str> = triples.iter().map(|t| t.relation.as_str()).collect();
    [
        name.to_string(),
        ents.len().to_string(),
        rels.len().to_string(),
        triples.len().to_string(),
    ]
}

/// Writes `entities.txt`, `relations.txt` and `stats.csv` into `out`.
pub fn preprocess(dir: &Path, out: &Path, dedup: bool) -> Result<()> {
    let data = Dataset::load(dir, dedup)?;
    let kg = KnowledgeGraph::build(&data.train, &data.valid, &data.test, false)?;
    fs::create_dir_all(out)?;
    let mut ents = String::new();
    for n in kg.entities().names() {
        ents.push_str(n);
        ents.push('\n');
    }
    fs::write(out.join("entities.txt"), ents)?;
    let mut rels = String::new();
    for n in kg.relations().names() {
        rels.push_str(n);
        rels.push('\n');
    }
    fs::write(out.join("relations.txt"), rels)?;
    let mut w = csv::Writer::from_path(out.join("stats.csv"))?;
    w.write_record(["split", "entities", "relations", "triples"])?;
    let all: Vec<&Triple> = data.train.iter().chain(&data.valid).chain(&data.test).collect();
    w.write_record(split_stats("train", &data.train.iter().collect::<Vec<_>>()))?;
    w.write_record(split_stats("valid", &data.valid.iter().collect::<Vec<_>>()))?;
    w.write_record(split_stats("test", &data.test.iter().collect::<Vec<_>>()))?;
    w.write_record(split_stats("all", &all))?;
    w.flush()?;
    info!(
        "{}: {} entities, {} relations",
        dir.display(),
        kg.num_entities(),
        kg.num_relations()
    );
    Ok(())
}

fn load_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    Dataset::load(&cfg.dataset_dir, cfg.dedup)?.build_graph(cfg.inverses)
}

struct RunDir {
    dir: PathBuf,
    fingerprint: u64,
    seed: u64,
    rows: Vec<HistoryRow>,
}

impl TrainObserver for RunDir {
    fn on_epoch(&mut self, row: &HistoryRow) -> Result<()> {
        self.rows.push(row.clone());
        let mut buf = Vec::new();
        trainer::write_history(&mut buf, self.seed, &self.rows)?;
        fs::write(self.dir.join(HISTORY_FILE), buf)?;
        Ok(())
    }

    fn on_best(&mut self, state: &TrainState) -> Result<()> {
        state.to_checkpoint(self.fingerprint).save(self.dir.join(BEST_CHECKPOINT))
    }
}

/// Outcome of the train command.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<HistoryRow>,
    pub best_mrr: Option<f64>,
}

/// Runs training for a resolved configuration, writing artefacts into
/// `run.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let kg = load_graph(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x1417));
    let mut model = Model::init(cfg.model.clone(), &kg, &mut rng)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_SNAPSHOT), cfg.to_text())?;
    let mut dir = RunDir {
        dir: cfg.out_dir.clone(),
        fingerprint: cfg.fingerprint(),
        seed: cfg.train.seed,
        rows: Vec::new(),
    };
    let mut buf = Vec::new();
    trainer::write_history(&mut buf, cfg.train.seed, &[])?;
    fs::write(cfg.out_dir.join(HISTORY_FILE), buf)?;
    let out = trainer::train(&kg, &mut model, &cfg.train, &mut dir)?;
    if let Some(epoch) = out.diverged {
        return Err(Error::Diverged { epoch });
    }
    Ok(TrainSummary {
        history: out.history,
        best_mrr: out.best.best_mrr,
    })
}

/// Loads the configuration, graph and model behind a checkpoint.
pub fn load_run(run: &RunArgs) -> Result<(RunConfig, KnowledgeGraph, Model)> {
    let cfg_path = run
        .config
        .clone()
        .unwrap_or_else(|| sibling(&run.checkpoint, CONFIG_SNAPSHOT));
    let cfg = RunConfig::resolve(Some(&cfg_path), &run.overrides)?;
    let ckpt = Checkpoint::load(&run.checkpoint).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("cannot read {}: {io}", run.checkpoint.display())),
        other => other,
    })?;
    if ckpt.fingerprint != cfg.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: cfg.fingerprint(),
            found: ckpt.fingerprint,
        });
    }
    let kg = load_graph(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference = Model::init(cfg.model.clone(), &kg, &mut rng)?;
    let names: Vec<String> = reference.params.iter().map(|(n, _)| n.to_string()).collect();
    let state = TrainState::from_checkpoint(&ckpt, &names, Default::default(), cfg.train.adamw.clone())?;
    let model = Model::from_params(cfg.model.clone(), &kg, state.params)?;
    Ok((cfg, kg, model))
}

pub fn evaluate(run: &RunArgs, split: Split, by_type: bool) -> Result<Vec<(String, EvalReport)>> {
    let (cfg, kg, model) = load_run(run)?;
    if by_type && !kg.has_entity_types() {
        return Err(Error::Config(format!(
            "--by-type needs {}",
            cfg.dataset_dir.join("entity_types.tsv").display()
        )));
    }
    let frozen = model.freeze()?;
    let opts = cfg.eval_options();
    if by_type {
        eval::evaluate_subdomains(&kg, &frozen, split, &opts)
    } else {
        Ok(vec![(eval::ALL_BUCKET.to_string(), eval::evaluate(&kg, &frozen, split, &opts)?)])
    }
}

pub fn predict(run: &RunArgs, head: &str, relation: &str, k: usize, filtered: bool) -> Result<Vec<(String, crate::tensor::Real)>> {
    let (_, kg, model) = load_run(run)?;
    // resolve names before the expensive encode
    kg.entity_id(head)?;
    kg.relation_id(relation)?;
    let n = kg.num_entities();
    let k = if k > n {
        warn!("k={k} exceeds {n} entities; clipping");
        eprintln!("warning: k={k} exceeds the {n} entities; clipping to {n}");
        n
    } else {
        k
    };
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    eval::predict_topk(&kg, &model.freeze()?, head, relation, k, filtered)
}

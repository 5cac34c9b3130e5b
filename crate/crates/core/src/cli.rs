//! Batch commands over a [`RunConfig`]. Every command's outputs are a pure
//! function of the config, the seed and the files already on disk; only
//! `pretrain` and `add-task` write model state.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::backbone::{pretrain_backbones, BackboneBundle, PretrainTrace};
use crate::config::{config_path, RunConfig};
use crate::engine::{Engine, GenerationResult, TrainTrace};
use crate::error::{Error, Result};
use crate::metrics::{
    audit_forgetting, audit_retrieval, bag_grid_coords, bench, bench_csv, evaluate_task, evaluations_csv,
    export_heatmap_scores, forgetting_csv, heatmap_csv, predictions_csv, retrieval_csv, BenchReport, ForgettingAudit,
    HeatmapRow, PromptMode, RetrievalAudit, Selection, TaskEvaluation,
};
use crate::storage::AdaptorStore;
use crate::tasks::{load_dataset, save_dataset, Dataset, Image, Input, Level, Split};
use crate::vocab::Vocabulary;
use crate::workflow::{build_pretrain_corpus, vocabulary_specs};

#[derive(Debug, Parser)]
#[command(name = "kvadapt", version, about = "Continual task adaptation with retrieved low-rank adaptors")]
pub struct Cli {
    /// Run config (TOML); falls back to $KVADAPT_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the report directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a config with every default filled in.
    InitConfig,
    /// Build the vocabulary, pretrain and freeze the backbone.
    Pretrain,
    /// Train one task's key and adaptors and append them to the store.
    AddTask {
        /// Task id from the config.
        #[arg(long, required_unless_present = "all")]
        task: Option<String>,
        /// Add every configured task not yet stored, in config order.
        #[arg(long, conflicts_with = "task")]
        all: bool,
    },
    /// Generate a label for one patch (PNG file) or bag (directory of PNGs).
    Predict {
        /// `auto` retrieves the adaptors; a task id bypasses retrieval.
        #[arg(long, default_value = "auto")]
        task: String,
        #[arg(long)]
        input: PathBuf,
        /// Prompt text; required with `--task auto`.
        #[arg(long)]
        prompt: Option<String>,
        /// Prompt variant used with `--task <id>` when no prompt is given.
        #[arg(long, default_value = "full", value_parser = parse_mode)]
        prompt_mode: PromptMode,
    },
    /// Score every stored task on its test split.
    Evaluate,
    /// Mis-retrieval rates under full and ablated prompts.
    AuditPrompts {
        /// Restrict to one prompt variant.
        #[arg(long, value_parser = parse_mode)]
        prompt_mode: Option<PromptMode>,
    },
    /// Check that each appended task leaves earlier predictions unchanged.
    AuditForgetting,
    /// Storage and training-time comparison against full fine-tuning.
    Bench {
        /// Overrides the epoch count of both presets.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attention heatmap scores of one bag.
    ExportHeatmap {
        #[arg(long)]
        task: String,
        /// Item id from the task's dataset, or a directory of PNGs.
        #[arg(long)]
        bag: String,
    },
}

fn parse_mode(s: &str) -> std::result::Result<PromptMode, String> {
    s.parse::<PromptMode>().map_err(|e| e.to_string())
}

/// Machine-readable failure line.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({ "error": err.kind(), "message": err.to_string() }).to_string()
}

/// Loads the config and applies the global flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&config_path(cli.config.as_deref())?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.reports = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::InitConfig = cli.command {
        let mut cfg = RunConfig::with_seed(cli.seed.unwrap_or(0));
        if let Some(out) = &cli.out {
            cfg.paths.reports = out.clone();
        }
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::InitConfig => unreachable!(),
        Command::Pretrain => {
            let trace = cmd_pretrain(&cfg)?;
            println!(
                "pretrained backbone written to {} (encoder loss {:.4}, decoder loss {:.4})",
                cfg.paths.backbone.display(),
                trace.encoder_loss.last().copied().unwrap_or(f64::NAN),
                trace.decoder_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::AddTask { task, all } => {
            let ids: Vec<String> = if *all {
                let stored = existing_task_ids(&cfg)?;
                cfg.tasks
                    .iter()
                    .map(|p| p.spec.task_id.clone())
                    .filter(|id| !stored.contains(id))
                    .collect()
            } else {
                vec![task.clone().expect("clap enforces --task or --all")]
            };
            for id in ids {
                let trace = cmd_add_task(&cfg, &id)?;
                println!(
                    "added {id}: {} epochs, best epoch {}, {:.3} ms/image",
                    trace.epochs.len(),
                    trace.best_epoch,
                    trace.ms_per_image()
                );
            }
        }
        Command::Predict {
            task,
            input,
            prompt,
            prompt_mode,
        } => {
            let out = cmd_predict(&cfg, task, input, prompt.as_deref(), *prompt_mode)?;
            println!("{}", serde_json::to_string(&out)?);
        }
        Command::Evaluate => {
            let rows = cmd_evaluate(&cfg)?;
            print!("{}", evaluations_csv(&rows));
        }
        Command::AuditPrompts { prompt_mode } => {
            let modes = prompt_mode.map_or(PromptMode::ALL.to_vec(), |m| vec![m]);
            print!("{}", retrieval_csv(&cmd_audit_prompts(&cfg, &modes)?));
        }
        Command::AuditForgetting => {
            let rows = cmd_audit_forgetting(&cfg)?;
            let changed: usize = rows.iter().map(|(_, r)| r.changed).sum();
            println!("{} checks, {changed} changed outputs", rows.len());
        }
        Command::Bench { epochs } => {
            let report = cmd_bench(&cfg, *epochs)?;
            print!("{}", bench_csv(&report));
            println!("storage ratio {:.4}", report.storage_ratio());
        }
        Command::ExportHeatmap { task, bag } => {
            print!("{}", heatmap_csv(&cmd_export_heatmap(&cfg, task, bag)?));
        }
    }
    Ok(())
}

fn write_report(cfg: &RunConfig, name: &str, contents: &str) -> Result<PathBuf> {
    let dir = &cfg.paths.reports;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(cfg: &RunConfig, name: &str, value: &T) -> Result<PathBuf> {
    write_report(cfg, name, &serde_json::to_string_pretty(value)?)
}

pub fn build_vocabulary(cfg: &RunConfig) -> Result<Vocabulary> {
    Vocabulary::build(&vocabulary_specs(&cfg.tasks, &cfg.pretrain_tasks))
}

/// Writes the frozen checkpoint and its vocabulary.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainTrace> {
    let vocab = build_vocabulary(cfg)?;
    let mut bcfg = cfg.backbone.clone();
    bcfg.vocab_size = vocab.len();
    let corpus = build_pretrain_corpus(&cfg.tasks, &cfg.pretrain_tasks, &vocab, cfg.data_seed())?;
    let (bundle, trace) = pretrain_backbones(bcfg, &corpus, &cfg.pretrain, cfg.backbone_seed())?;
    for w in &trace.warnings {
        log::warn!("{w}");
    }
    bundle.save(&cfg.paths.backbone)?;
    vocab.save(&cfg.paths.vocab())?;
    let mut csv = String::from("stage,epoch,loss\n");
    for (stage, losses) in [("encoder", &trace.encoder_loss), ("decoder", &trace.decoder_loss)] {
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{stage},{i},{l}\n"));
        }
    }
    write_report(cfg, "pretrain_loss.csv", &csv)?;
    Ok(trace)
}

pub fn load_backbone(cfg: &RunConfig) -> Result<(BackboneBundle, Vocabulary)> {
    let missing = |path: PathBuf| Error::MissingArtifact {
        what: "backbone checkpoint",
        path,
        command: "pretrain",
    };
    let manifest = cfg.paths.backbone.join("manifest.json");
    if !manifest.is_file() {
        return Err(missing(cfg.paths.backbone.clone()));
    }
    if !cfg.paths.vocab().is_file() {
        return Err(missing(cfg.paths.vocab()));
    }
    Ok((BackboneBundle::load(&cfg.paths.backbone)?, Vocabulary::load(&cfg.paths.vocab())?))
}

fn store_exists(cfg: &RunConfig) -> bool {
    cfg.paths.store.join("manifest.json").is_file()
}

/// The stored adaptors; `create` yields an empty store when none exists yet.
pub fn load_store(cfg: &RunConfig, bundle: &BackboneBundle, create: bool) -> Result<AdaptorStore> {
    if store_exists(cfg) {
        AdaptorStore::load(&cfg.paths.store, Some(&bundle.checksum()))
    } else if create {
        Ok(AdaptorStore::new(&bundle.checksum()))
    } else {
        Err(Error::MissingArtifact {
            what: "adaptor store",
            path: cfg.paths.store.clone(),
            command: "add-task",
        })
    }
}

fn existing_task_ids(cfg: &RunConfig) -> Result<Vec<String>> {
    if !store_exists(cfg) {
        return Ok(Vec::new());
    }
    let (bundle, _) = load_backbone(cfg)?;
    Ok(load_store(cfg, &bundle, false)?.task_ids().into_iter().map(String::from).collect())
}

/// Loads the task's dataset directory, generating and saving it first if absent.
pub fn dataset(cfg: &RunConfig, task_id: &str) -> Result<Dataset> {
    let dir = cfg.paths.dataset(task_id);
    if dir.join("task_spec.json").is_file() {
        let ds = load_dataset(&dir)?;
        if ds.spec.task_id != task_id {
            return Err(Error::InvalidData(format!("{} holds task {}", dir.display(), ds.spec.task_id)));
        }
        return Ok(ds);
    }
    let plan = cfg.plan(task_id)?;
    let ds = plan.generate(cfg.data_seed())?;
    save_dataset(&ds, &dir)?;
    Ok(ds)
}

/// Trains `task_id` against the frozen backbone and appends it to the store.
pub fn cmd_add_task(cfg: &RunConfig, task_id: &str) -> Result<TrainTrace> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let mut store = load_store(cfg, &bundle, true)?;
    if store.contains(task_id) {
        return Err(Error::Conflict(task_id.to_string()));
    }
    let data = dataset(cfg, task_id)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let tcfg = cfg.train_config(data.spec.level);
    let outcome = engine.train_task(&data.spec, &data, &store, &tcfg)?;
    store.add_task(outcome.key, outcome.set)?;
    store.save(&cfg.paths.store)?;
    write_report(cfg, &format!("train_{task_id}.csv"), &outcome.trace.to_csv())?;
    Ok(outcome.trace)
}

/// A PNG file is a patch; a directory is a bag of its PNGs in numeric order.
pub fn read_input(path: &Path) -> Result<Input> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort_by_key(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            (stem.parse::<u64>().ok(), stem)
        });
        if files.is_empty() {
            return Err(Error::EmptyBag);
        }
        Ok(Input::Bag(files.iter().map(|f| Image::read_png(f)).collect::<Result<_>>()?))
    } else {
        Ok(Input::Patch(Image::read_png(path)?))
    }
}

pub fn cmd_predict(
    cfg: &RunConfig,
    task: &str,
    input: &Path,
    prompt: Option<&str>,
    mode: PromptMode,
) -> Result<GenerationResult> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let store = load_store(cfg, &bundle, false)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let input = read_input(input)?;
    if task == "auto" {
        let text = prompt.ok_or_else(|| Error::InvalidInput("--task auto needs --prompt".into()))?;
        let max_len = cfg.train.patch.max_generate_len;
        return engine.infer(&input, &vocab.encode_prompt(text)?, &store, max_len);
    }
    let (_, set) = store.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))?;
    let text = prompt.map_or_else(|| mode.prompt_for(&set.spec), str::to_string);
    let max_len = cfg.train_config(set.level()).max_generate_len;
    engine.generate(&input, &vocab.encode_prompt(&text)?, set, max_len)
}

/// Datasets of every stored task, in insertion order.
fn stored_datasets(cfg: &RunConfig, store: &AdaptorStore) -> Result<Vec<Dataset>> {
    store.task_ids().into_iter().map(|id| dataset(cfg, id)).collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<TaskEvaluation>> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let store = load_store(cfg, &bundle, false)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for data in stored_datasets(cfg, &store)? {
        let max_len = cfg.train_config(data.spec.level).max_generate_len;
        let (ev, p) = evaluate_task(&engine, &store, &data, Split::Test, Selection::Retrieve, max_len)?;
        rows.push(ev);
        preds.extend(p);
    }
    write_report(cfg, "evaluation.csv", &evaluations_csv(&rows))?;
    write_report(cfg, "predictions.csv", &predictions_csv(&preds)?)?;
    write_json(cfg, "evaluation.json", &rows)?;
    Ok(rows)
}

pub fn cmd_audit_prompts(cfg: &RunConfig, modes: &[PromptMode]) -> Result<Vec<RetrievalAudit>> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let store = load_store(cfg, &bundle, false)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let sets = stored_datasets(cfg, &store)?;
    let mut rows = Vec::new();
    for &mode in modes {
        rows.extend(audit_retrieval(&engine, &store, &sets, mode)?);
    }
    write_report(cfg, "retrieval_audit.csv", &retrieval_csv(&rows))?;
    Ok(rows)
}

/// For every insertion `k`, compares predictions of tasks `1..k` under the
/// store prefix before and after it. Returns `(k, audit)` pairs.
pub fn cmd_audit_forgetting(cfg: &RunConfig) -> Result<Vec<(usize, ForgettingAudit)>> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let store = load_store(cfg, &bundle, false)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let sets = stored_datasets(cfg, &store)?;
    let max_len = cfg.train.patch.max_generate_len.max(cfg.train.slide.max_generate_len);
    let mut rows = Vec::new();
    for k in 2..=store.len() {
        let before = store.prefix(k - 1);
        let after = store.prefix(k);
        for r in audit_forgetting(&engine, &before, &after, &sets, max_len)? {
            rows.push((k, r));
        }
    }
    let mut csv = String::from("after_task,");
    let body = forgetting_csv(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    let mut lines = body.lines();
    csv.push_str(lines.next().unwrap_or_default());
    csv.push('\n');
    for ((k, _), line) in rows.iter().zip(lines) {
        csv.push_str(&format!("{k},{line}\n"));
    }
    write_report(cfg, "forgetting_audit.csv", &csv)?;
    Ok(rows)
}

/// Trains every configured task both ways in memory; writes no model state.
pub fn cmd_bench(cfg: &RunConfig, epochs: Option<usize>) -> Result<BenchReport> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let sets = cfg
        .tasks
        .iter()
        .map(|p| dataset(cfg, &p.spec.task_id))
        .collect::<Result<Vec<_>>>()?;
    let report = bench(&engine, &sets, |level| {
        let mut t = cfg.train_config(level);
        if let Some(e) = epochs {
            t.epochs = e;
        }
        t
    })?;
    write_report(cfg, "bench.csv", &bench_csv(&report))?;
    write_json(cfg, "bench.json", &report)?;
    Ok(report)
}

pub fn cmd_export_heatmap(cfg: &RunConfig, task: &str, bag: &str) -> Result<Vec<HeatmapRow>> {
    let (bundle, vocab) = load_backbone(cfg)?;
    let store = load_store(cfg, &bundle, false)?;
    let engine = Engine::new(&bundle, &vocab)?;
    let (_, set) = store.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))?;
    if set.level() != Level::Slide {
        return Err(Error::InvalidInput(format!("{task} is not a slide-level task")));
    }
    let (input, name) = if Path::new(bag).is_dir() {
        let name = Path::new(bag)
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("bag")
            .to_string();
        (read_input(Path::new(bag))?, name)
    } else {
        let data = dataset(cfg, task)?;
        let item = data
            .items
            .iter()
            .find(|i| i.id == bag)
            .ok_or_else(|| Error::InvalidInput(format!("no bag {bag:?} in {task}")))?;
        (item.input.clone(), bag.to_string())
    };
    let Input::Bag(patches) = &input else {
        return Err(Error::InvalidInput(format!("{bag} is not a bag")));
    };
    let out = engine.generate(&input, &set.prompt, set, cfg.train.slide.max_generate_len)?;
    let att = out
        .attention
        .ok_or_else(|| Error::InvalidData("slide prediction carried no attention weights".into()))?;
    let rows = export_heatmap_scores(&att, &bag_grid_coords(patches.len()))?;
    write_report(cfg, &format!("heatmap_{task}_{name}.csv"), &heatmap_csv(&rows))?;
    Ok(rows)
}

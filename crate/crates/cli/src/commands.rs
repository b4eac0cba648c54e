use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};

use anyhow::{bail, Context as _};
use clap::Args;
use ctxlm::context::{parse_context, ContextExtras, ContextField, DialoguePrompt};
use ctxlm::corpus::{
    corpus_hash, format_corpus, generate_synthetic, load_corpus, partition_head_tail, split,
    GeneratorConfig, Partition, SplitSpec, Utterance,
};
use ctxlm::evaluation::{
    attention_trace, confidence_interval, probability_sweep, relative_reduction, shuffled_ablation,
    ConfidenceInterval, EvalReport, Experiment, SweepQuery,
};
use ctxlm::training::{curve_csv, load_checkpoint, write_checkpoint, TrainOutcome};
use ctxlm::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::manifest::{load_manifest, Recorder, RunManifest, MANIFEST_FILE};
use crate::settings::{DataSection, RunFlags, RunSettings};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run_dir(explicit: Option<PathBuf>, root: &Path, command: &str, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| root.join(command).join(name))
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn read_corpus(path: &Path) -> anyhow::Result<Vec<Utterance>> {
    let loaded = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if loaded.skipped_empty > 0 {
        eprintln!(
            "note: skipped {} lines with empty text",
            loaded.skipped_empty
        );
    }
    Ok(loaded.utterances)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator TOML (templates, slots, conditioning); the built-in planted corpus when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the number of utterances in the config
    #[arg(long)]
    pub num_utterances: Option<usize>,
    /// Keep the template mix but remove every context dependence
    #[arg(long)]
    pub no_context_effects: bool,
    /// Corpus output path [default: <run dir>/corpus.tsv]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the effective generator config as TOML and exit
    #[arg(long)]
    pub print_config: bool,
    /// Output directory for the manifest [default: <out-root>/generate/seed-<seed>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateSettings {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn generate(root: &Path, a: GenerateArgs) -> anyhow::Result<()> {
    let mut generator = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            GeneratorConfig::from_toml(&text)?
        }
        None => GeneratorConfig::default_planted(),
    };
    if let Some(n) = a.num_utterances {
        generator.num_utterances = n;
    }
    if a.no_context_effects {
        generator = generator.without_context_effects();
    }
    generator.validate()?;
    if a.print_config {
        print!("{}", generator.to_toml());
        return Ok(());
    }
    let settings = GenerateSettings {
        generator,
        seed: a.seed,
        out: a.out,
    };
    let dir = run_dir(a.run_dir, root, "generate", &format!("seed-{}", a.seed));
    run_generate(&settings, &dir, a.config.as_deref())
}

fn run_generate(
    s: &GenerateSettings,
    dir: &Path,
    config_path: Option<&Path>,
) -> anyhow::Result<()> {
    let mut rec = Recorder::start("generate", dir, s)?;
    rec.config_path(config_path).seed(s.seed);
    let corpus = generate_synthetic(&s.generator, s.seed)?;
    let hash = corpus_hash(&corpus);
    rec.corpus_hash(&hash);
    let out = s.out.clone().unwrap_or_else(|| dir.join("corpus.tsv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, format_corpus(&corpus))
        .with_context(|| format!("writing {}", out.display()))?;
    rec.record("corpus", &out)?;

    let unique: std::collections::HashSet<String> = corpus.iter().map(Utterance::text).collect();
    let spec = SplitSpec {
        ratios: [90, 5, 5],
        seed: s.seed,
    };
    let splits = split(&corpus, &spec)?;
    let labels = partition_head_tail(&splits.test, &corpus);
    println!(
        "wrote {} utterances to {} (sha256 {})",
        corpus.len(),
        out.display(),
        &rec.artifact_hash("corpus").unwrap_or_default()[..12]
    );
    println!("unique texts {}; corpus hash {}", unique.len(), &hash[..12]);
    println!(
        "90/5/5 split: train {} dev {} test {}; test head {} tail {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        labels.count(Partition::Head),
        labels.count(Partition::Tail)
    );
    rec.finish()?;
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Output directory [default: <out-root>/train/<model>-seed<seed>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// Splits and vocabularies for one run.
fn experiment(s: &RunSettings) -> anyhow::Result<(Experiment, String)> {
    let corpus = read_corpus(&s.corpus)?;
    let hash = corpus_hash(&corpus);
    let splits = split(&corpus, &s.split_spec())?;
    Ok((Experiment::new(splits, s.data.min_count), hash))
}

fn run_metadata(s: &RunSettings, hash: &str, outcome: &TrainOutcome<f64>) -> serde_json::Value {
    serde_json::json!({
        "train": s.train,
        "data": s.data,
        "corpus_hash": hash,
        "best_step": outcome.best_step,
        "best_dev_ppl": outcome.best_dev_ppl,
    })
}

fn write_report(rec: &mut Recorder, stem: &str, report: &EvalReport) -> anyhow::Result<()> {
    rec.write(
        &format!("{stem}_json"),
        &format!("{stem}.json"),
        report.to_json(),
    )?;
    rec.write(
        &format!("{stem}_table"),
        &format!("{stem}.txt"),
        report.table(),
    )?;
    Ok(())
}

pub fn train(root: &Path, a: TrainArgs) -> anyhow::Result<()> {
    let s = RunSettings::resolve(&a.run)?;
    let name = format!("{}-seed{}", slug(&s.model.config().label()), s.train.seed);
    let dir = run_dir(a.run_dir, root, "train", &name);
    run_train(&s, &dir, a.run.config.as_deref())
}

fn run_train(s: &RunSettings, dir: &Path, config_path: Option<&Path>) -> anyhow::Result<()> {
    let mut rec = Recorder::start("train", dir, s)?;
    rec.config_path(config_path).seed(s.train.seed);
    let (exp, hash) = experiment(s)?;
    rec.corpus_hash(&hash);
    let outcome = exp.train::<f64>(&s.model.config(), &s.train)?;
    let report = exp.evaluate(&outcome.best, s.train.seed, s.train.eval_batch_size)?;
    let ckpt = Checkpoint {
        model: outcome.best.clone(),
        vocab: exp.vocab.clone(),
        context_vocab: exp.context_vocab.clone(),
        metadata: run_metadata(s, &hash, &outcome),
    };
    rec.write("checkpoint", "model.ckpt", write_checkpoint(&ckpt))?;
    rec.write("curve", "curve.csv", curve_csv(&outcome.curve))?;
    write_report(&mut rec, "report", &report)?;
    println!(
        "best dev perplexity {:.4} at step {} of {}",
        outcome.best_dev_ppl, outcome.best_step, s.train.max_steps
    );
    print!("{}", report.table());
    println!("outputs in {}", dir.display());
    rec.finish()?;
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Dev,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to split and score
    #[arg(long)]
    pub corpus: PathBuf,
    /// Report JSON of a baseline model on the same corpus, for relative reductions
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Which split to score
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Split percentages [default: those used in training]
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<u32>>,
    /// Split seed [default: the one used in training]
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Utterances per scoring batch
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Output directory [default: <out-root>/eval/<checkpoint stem>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub baseline: Option<PathBuf>,
    pub split: SplitName,
    pub split_spec: SplitSpec,
    pub batch_size: usize,
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Split spec stored with a checkpoint by `train`.
fn trained_split(ckpt: &Checkpoint) -> Option<SplitSpec> {
    let data: DataSection = serde_json::from_value(ckpt.metadata.get("data")?.clone()).ok()?;
    let seed = data
        .split_seed
        .or_else(|| ckpt.metadata.get("train")?.get("seed")?.as_u64())?;
    Some(SplitSpec {
        ratios: data.split,
        seed,
    })
}

pub fn eval(root: &Path, a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&a.checkpoint)?;
    let mut spec = trained_split(&ckpt).unwrap_or_default();
    if let Some(r) = &a.ratios {
        spec.ratios = [r[0], r[1], r[2]];
    }
    if let Some(seed) = a.split_seed {
        spec.seed = seed;
    }
    let settings = EvalSettings {
        checkpoint: a.checkpoint.clone(),
        corpus: a.corpus,
        baseline: a.baseline,
        split: a.split,
        split_spec: spec,
        batch_size: a.batch_size,
    };
    let stem = a
        .checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .map_or("model".into(), |s| s.to_string_lossy().to_string());
    let dir = run_dir(a.run_dir, root, "eval", &stem);
    run_eval(&settings, &dir)
}

fn run_eval(s: &EvalSettings, dir: &Path) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&s.checkpoint)?;
    let mut rec = Recorder::start("eval", dir, s)?;
    rec.seed(s.split_spec.seed);
    let corpus = read_corpus(&s.corpus)?;
    let hash = corpus_hash(&corpus);
    rec.corpus_hash(&hash);
    if let Some(trained) = ckpt.metadata.get("corpus_hash").and_then(|h| h.as_str()) {
        if trained != hash {
            eprintln!(
                "note: checkpoint was trained on a different corpus ({})",
                &trained[..trained.len().min(12)]
            );
        }
    }
    let mut splits = split(&corpus, &s.split_spec)?;
    if s.split == SplitName::Dev {
        std::mem::swap(&mut splits.test, &mut splits.dev);
    }
    let mut exp = Experiment::new(splits, 1);
    exp.vocab = ckpt.vocab.clone();
    exp.context_vocab = ckpt.context_vocab.clone();
    let mut report = exp.evaluate(&ckpt.model, s.split_spec.seed, s.batch_size)?;
    if s.split == SplitName::Dev {
        report.split = "dev".into();
    }
    if let Some(b) = &s.baseline {
        let text = std::fs::read_to_string(b)
            .map_err(|e| usage(format!("cannot read baseline {}: {e}", b.display())))?;
        let base: EvalReport = serde_json::from_str(&text)
            .map_err(|e| usage(format!("baseline {} is not a report: {e}", b.display())))?;
        report.relative = Some(relative_reduction(&report, &base)?);
    }
    write_report(&mut rec, "report", &report)?;
    print!("{}", report.table());
    rec.finish()?;
    Ok(())
}

// ------------------------------------------------------------------ ablate

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Output directory [default: <out-root>/ablate/<model>-seed<seed>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

pub fn ablate(root: &Path, a: AblateArgs) -> anyhow::Result<()> {
    let s = RunSettings::resolve(&a.run)?;
    let name = format!("{}-seed{}", slug(&s.model.config().label()), s.train.seed);
    let dir = run_dir(a.run_dir, root, "ablate", &name);
    run_ablate(&s, &dir, a.run.config.as_deref())
}

fn run_ablate(s: &RunSettings, dir: &Path, config_path: Option<&Path>) -> anyhow::Result<()> {
    let mut rec = Recorder::start("ablate", dir, s)?;
    rec.config_path(config_path).seed(s.train.seed);
    let (exp, hash) = experiment(s)?;
    rec.corpus_hash(&hash);
    let result = shuffled_ablation::<f64>(&exp, &s.model.config(), &s.train)?;
    rec.write(
        "ablation",
        "ablation.json",
        serde_json::to_string_pretty(&result)?,
    )?;
    print!(
        "{}\n{}",
        result.true_context.table(),
        result.shuffled.table()
    );
    let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:+.2}%"));
    println!(
        "shuffled vs true context: full {} head {} tail {} (negative = shuffling hurt)",
        fmt(result.delta.full),
        fmt(result.delta.head),
        fmt(result.delta.tail)
    );
    rec.finish()?;
    Ok(())
}

// ------------------------------------------------------------------- sweep

fn parse_prompt(s: &str) -> Result<DialoguePrompt, String> {
    s.parse()
        .map_err(|e: ctxlm::context::ContextError| e.to_string())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint of the contextual model
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Context-free checkpoint whose (constant) probability is reported alongside
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Context field to vary: hour, weekday, week, month, geo or prompt
    #[arg(long, default_value = "hour")]
    pub field: ContextField,
    /// Word whose probability is tracked
    #[arg(long, default_value = "snooze")]
    pub target: String,
    /// Words between BOS and the target
    #[arg(long, default_value = "")]
    pub prefix: String,
    /// Context the other fields are taken from
    #[arg(long, default_value = "2021-03-04 10:00")]
    pub reference: String,
    /// Geo-hash of the reference context
    #[arg(long)]
    pub geo: Option<String>,
    /// Dialogue prompt of the reference context (initial or follow_up)
    #[arg(long, value_parser = parse_prompt)]
    pub prompt: Option<DialoguePrompt>,
    /// Field values to visit (0-based) [default: the whole domain]
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    /// Output directory [default: <out-root>/sweep/<field>-<target>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSettings {
    pub checkpoint: PathBuf,
    pub baseline: Option<PathBuf>,
    pub field: ContextField,
    pub target: String,
    pub prefix: Vec<String>,
    pub reference: String,
    pub geo: Option<String>,
    pub prompt: Option<String>,
    pub values: Option<Vec<usize>>,
}

pub fn sweep(root: &Path, a: SweepArgs) -> anyhow::Result<()> {
    let settings = SweepSettings {
        checkpoint: a.checkpoint,
        baseline: a.baseline,
        field: a.field,
        target: a.target.to_lowercase(),
        prefix: a.prefix.split_whitespace().map(str::to_lowercase).collect(),
        reference: a.reference,
        geo: a.geo,
        prompt: a.prompt.map(|p| p.as_str().to_string()),
        values: a.values,
    };
    let name = format!(
        "{}-{}",
        format!("{:?}", a.field).to_lowercase(),
        slug(&settings.target)
    );
    let dir = run_dir(a.run_dir, root, "sweep", &name);
    run_sweep(&settings, &dir)
}

fn extras(geo: &Option<String>, prompt: &Option<String>) -> anyhow::Result<ContextExtras> {
    Ok(ContextExtras {
        geo_hash: geo.clone(),
        prompt: prompt
            .as_deref()
            .map(parse_prompt)
            .transpose()
            .map_err(usage)?,
    })
}

fn run_sweep(s: &SweepSettings, dir: &Path) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&s.checkpoint)?;
    let baseline = s.baseline.as_deref().map(load_ckpt).transpose()?;
    let mut rec = Recorder::start("sweep", dir, s)?;
    let reference = parse_context(&s.reference, extras(&s.geo, &s.prompt)?)
        .map_err(|e| usage(e.to_string()))?;
    let values: Vec<usize> = match &s.values {
        Some(v) => v.clone(),
        None => {
            let n = s
                .field
                .cardinality()
                .unwrap_or(ckpt.context_vocab.geo_hashes().len());
            (0..n).collect()
        }
    };
    let query = SweepQuery {
        prefix: &s.prefix,
        target: &s.target,
        field: s.field,
        values: &values,
        reference: &reference,
    };
    let curve = probability_sweep(
        &ckpt.model,
        &ckpt.vocab,
        &ckpt.context_vocab,
        &query,
        baseline.as_ref().map(|c| &c.model),
    )?;
    rec.write("curve_csv", "sweep.csv", curve.to_csv())?;
    rec.write(
        "curve_json",
        "sweep.json",
        serde_json::to_string_pretty(&curve)?,
    )?;
    print!("{}", curve.to_csv());
    if let Some(v) = curve.argmax() {
        println!("argmax {} = {v}", format!("{:?}", s.field).to_lowercase());
    }
    rec.finish()?;
    Ok(())
}

// ------------------------------------------------------------------- trace

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Checkpoint of a model with attention
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Utterance text
    #[arg(long)]
    pub text: String,
    /// Utterance context, `YYYY-MM-DD HH:MM`
    #[arg(long)]
    pub context: String,
    /// Geo-hash of the utterance (for geo-conditioned models)
    #[arg(long)]
    pub geo: Option<String>,
    /// Dialogue prompt of the utterance (initial or follow_up)
    #[arg(long, value_parser = parse_prompt)]
    pub prompt: Option<DialoguePrompt>,
    /// Output directory [default: <out-root>/trace/<text>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSettings {
    pub checkpoint: PathBuf,
    pub text: String,
    pub context: String,
    pub geo: Option<String>,
    pub prompt: Option<String>,
}

pub fn trace(root: &Path, a: TraceArgs) -> anyhow::Result<()> {
    let settings = TraceSettings {
        checkpoint: a.checkpoint,
        text: a.text,
        context: a.context,
        geo: a.geo,
        prompt: a.prompt.map(|p| p.as_str().to_string()),
    };
    let dir = run_dir(a.run_dir, root, "trace", &slug(&settings.text));
    run_trace(&settings, &dir)
}

fn run_trace(s: &TraceSettings, dir: &Path) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&s.checkpoint)?;
    let mut rec = Recorder::start("trace", dir, s)?;
    let context =
        parse_context(&s.context, extras(&s.geo, &s.prompt)?).map_err(|e| usage(e.to_string()))?;
    let utterance = Utterance {
        tokens: s.text.split_whitespace().map(str::to_lowercase).collect(),
        context,
    };
    let export = attention_trace(&ckpt.model, &ckpt.vocab, &ckpt.context_vocab, &utterance)?;
    rec.write("trace", "trace.csv", export.to_csv())?;
    let width = export
        .tokens
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(5);
    print!("{:<width$}", "token");
    for l in &export.trace.labels {
        print!(" {l:>8}");
    }
    println!();
    for (tok, alpha) in export.tokens.iter().zip(&export.trace.steps) {
        print!("{tok:<width$}");
        for a in alpha {
            print!(" {a:>8.4}");
        }
        println!();
    }
    rec.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------- ci

#[derive(Debug, Args)]
pub struct CiArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Number of training runs; run i uses seed + i with a fixed data split
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Training processes to run at once
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Output directory [default: <out-root>/ci/<model>-seed<seed>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiSettings {
    pub run: RunSettings,
    pub runs: usize,
    pub jobs: usize,
    pub level: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiSummary {
    pub model: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<PathBuf>,
    pub full: ConfidenceInterval,
    pub head: Option<ConfidenceInterval>,
    pub tail: Option<ConfidenceInterval>,
}

pub fn ci(root: &Path, a: CiArgs) -> anyhow::Result<()> {
    let run = RunSettings::resolve(&a.run)?;
    if a.runs < 2 {
        return Err(usage("--runs must be at least 2"));
    }
    if a.jobs == 0 {
        return Err(usage("--jobs must be positive"));
    }
    let name = format!(
        "{}-seed{}",
        slug(&run.model.config().label()),
        run.train.seed
    );
    let dir = run_dir(a.run_dir, root, "ci", &name);
    let settings = CiSettings {
        run,
        runs: a.runs,
        jobs: a.jobs,
        level: a.level,
    };
    run_ci(root, &settings, &dir, a.run.config.as_deref())
}

fn wait(child: &mut (u64, Child)) -> anyhow::Result<()> {
    let status = child.1.wait()?;
    if !status.success() {
        bail!("training run with seed {} failed ({status})", child.0);
    }
    Ok(())
}

fn run_ci(
    root: &Path,
    s: &CiSettings,
    dir: &Path,
    config_path: Option<&Path>,
) -> anyhow::Result<()> {
    let mut rec = Recorder::start("ci", dir, s)?;
    rec.config_path(config_path).seed(s.run.train.seed);
    let config = rec.write(
        "config",
        "config.json",
        serde_json::to_string_pretty(&s.run.file_config())?,
    )?;
    let exe = std::env::current_exe()?;
    let seeds: Vec<u64> = (0..s.runs as u64).map(|i| s.run.train.seed + i).collect();
    let run_dirs: Vec<PathBuf> = seeds
        .iter()
        .map(|seed| dir.join(format!("seed-{seed}")))
        .collect();

    let mut running: Vec<(u64, Child)> = Vec::new();
    for (&seed, run_dir) in seeds.iter().zip(&run_dirs) {
        if running.len() == s.jobs {
            let mut first = running.remove(0);
            wait(&mut first)?;
        }
        let child = Process::new(&exe)
            .arg("--out-root")
            .arg(root)
            .arg("train")
            .arg("--corpus")
            .arg(&s.run.corpus)
            .arg("--config")
            .arg(&config)
            .args(["--seed", &seed.to_string()])
            .arg("--run-dir")
            .arg(run_dir)
            .stdout(std::process::Stdio::null())
            .spawn()
            .context("starting a training process")?;
        running.push((seed, child));
    }
    for mut child in running {
        wait(&mut child)?;
    }

    let mut reports = Vec::new();
    for d in &run_dirs {
        let path = d.join("report.json");
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        rec.corpus_hash(&report.corpus_hash);
        reports.push((path, report));
    }
    let interval = |p: Partition| -> anyhow::Result<Option<ConfidenceInterval>> {
        let values: Option<Vec<f64>> = reports.iter().map(|(_, r)| r.partitions.ppl(p)).collect();
        values
            .map(|v| confidence_interval(&v, s.level))
            .transpose()
            .map_err(Into::into)
    };
    let summary = CiSummary {
        model: reports[0].1.model.clone(),
        seeds,
        full: interval(Partition::Full)?.context("empty test split")?,
        head: interval(Partition::Head)?,
        tail: interval(Partition::Tail)?,
        reports: reports.iter().map(|(p, _)| p.clone()).collect(),
    };
    rec.write(
        "summary",
        "ci.json",
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{} over {} runs, {:.0}% intervals",
        summary.model,
        s.runs,
        100.0 * s.level
    );
    for (name, ci) in [
        ("full", Some(summary.full)),
        ("head", summary.head),
        ("tail", summary.tail),
    ] {
        match ci {
            Some(ci) => println!("{name:<5} {:.4} ± {:.4}", ci.mean, ci.half_width),
            None => println!("{name:<5} absent"),
        }
    }
    rec.finish()?;
    Ok(())
}

// ------------------------------------------------------------------ replay

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest of the run to repeat (or its directory)
    pub manifest: PathBuf,
    /// Output directory [default: <out-root>/replay/<original dir name>]
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

pub fn replay(root: &Path, a: ReplayArgs) -> anyhow::Result<()> {
    let path = if a.manifest.is_dir() {
        a.manifest.join(MANIFEST_FILE)
    } else {
        a.manifest.clone()
    };
    let m: RunManifest = load_manifest(&path)?;
    let name = m
        .output_dir
        .file_name()
        .map_or("run".into(), |s| s.to_string_lossy().to_string());
    let dir = run_dir(a.run_dir, root, "replay", &name);
    let settings = m.settings.clone();
    let parse = |what: &str| {
        usage(format!(
            "manifest {} has malformed {what} settings",
            path.display()
        ))
    };
    match m.command.as_str() {
        "generate" => run_generate(
            &serde_json::from_value(settings).map_err(|_| parse("generate"))?,
            &dir,
            None,
        ),
        "train" => run_train(
            &serde_json::from_value(settings).map_err(|_| parse("train"))?,
            &dir,
            None,
        ),
        "eval" => run_eval(
            &serde_json::from_value(settings).map_err(|_| parse("eval"))?,
            &dir,
        ),
        "ablate" => run_ablate(
            &serde_json::from_value(settings).map_err(|_| parse("ablate"))?,
            &dir,
            None,
        ),
        "sweep" => run_sweep(
            &serde_json::from_value(settings).map_err(|_| parse("sweep"))?,
            &dir,
        ),
        "trace" => run_trace(
            &serde_json::from_value(settings).map_err(|_| parse("trace"))?,
            &dir,
        ),
        "ci" => run_ci(
            root,
            &serde_json::from_value(settings).map_err(|_| parse("ci"))?,
            &dir,
            None,
        ),
        other => Err(usage(format!("cannot replay unknown command {other:?}"))),
    }
}

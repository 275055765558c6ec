use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use zebra_core::builder::{failures_jsonl, generate_kb, SilverConfig};
use zebra_core::eval::{
    answer_all, evaluate as run_evaluate, records_jsonl, sweep_k as run_sweep, sweep_to_csv,
    EvalConfig, EvalError, Pipeline,
};
use zebra_core::kb::{passages_tsv, to_jsonl};
use zebra_core::reasoning::Mode;
use zebra_core::retrieval::{embed_passages, QueryEmbedder, RetrievalHit};
use zebra_core::trainer::{trace_to_csv, train_adapter, TrainConfig, TrainError, TrainInputs};

use crate::error::CliError;
use crate::gateway;
use crate::settings::Settings;
use crate::setup::{self, ProviderArgs, RetrievalArgs};
use crate::GlobalArgs;

pub fn kb_validate(path: &Path) -> Result<(), CliError> {
    let set = setup::load_set(path)?;
    println!("{} examples OK", set.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct KbBuildArgs {
    /// Labeled dataset to explain.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Knowledge-base JSONL to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Failure manifest (default: <out>.failures.jsonl).
    #[arg(long)]
    failures: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn kb_build(g: &GlobalArgs, s: &Settings, a: KbBuildArgs) -> Result<(), CliError> {
    let dataset: PathBuf = s.require(a.dataset, "dataset")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let failures = s
        .pick(a.failures, "failures")?
        .unwrap_or_else(|| sibling(&out, "failures.jsonl"));
    let set = setup::load_set(&dataset)?;
    let concurrency = setup::concurrency(g, s)?;
    let gw = gateway::build(g, s, concurrency)?;
    let cfg = SilverConfig {
        concurrency,
        ..SilverConfig::default()
    };
    let outcome = generate_kb(&set, gw.as_dyn(), &cfg);
    if outcome.kb.is_empty() {
        setup::write_file(&failures, &failures_jsonl(&outcome.failures))?;
        return Err(CliError::Runtime(format!(
            "every entry failed; see {}",
            failures.display()
        )));
    }
    setup::write_file(&out, &to_jsonl(&outcome.kb))?;
    setup::write_file(&failures, &failures_jsonl(&outcome.failures))?;
    for (id, missing) in &outcome.incomplete {
        let labels: String = missing.iter().collect();
        eprintln!("warning: {id}: no sentence for {labels}");
    }
    if let Some(line) = gw.cache_summary() {
        eprintln!("{line}");
    }
    println!(
        "{} entries written to {}, {} failures",
        outcome.kb.len(),
        out.display(),
        outcome.failures.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Examples whose passages are embedded.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[command(flatten)]
    encoder: ProviderArgs,
    /// Embedding JSONL to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write `id<TAB>passage` lines for an external encoder.
    #[arg(long)]
    texts_out: Option<PathBuf>,
}

pub fn embed(g: &GlobalArgs, s: &Settings, a: EmbedArgs) -> Result<(), CliError> {
    let kb: PathBuf = s.require(a.kb, "kb")?;
    let set = setup::load_set(&kb)?;
    let out = s.pick(a.out, "out")?;
    if let Some(path) = s.pick(a.texts_out, "texts-out")? {
        setup::write_file(&path, &passages_tsv(&set).map_err(CliError::Validation)?)?;
    }
    let Some(out) = out else {
        return Ok(());
    };
    let seed = setup::seed(g, s)?;
    let provider = setup::provider(&a.encoder, s, seed)?
        .unwrap_or_else(|| zebra_core::retrieval::HashingProvider::new(setup::DEFAULT_DIM, seed));
    let table = embed_passages(&provider, &set).map_err(CliError::runtime)?;
    setup::write_file(&out, &table.to_jsonl())?;
    println!(
        "{} vectors of dimension {} written to {}",
        table.len(),
        table.dim(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Questions to retrieve for (JSONL, same schema as the knowledge base).
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// Hits per query (default 5).
    #[arg(long)]
    k: Option<usize>,
    /// Write hits here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct HitsLine<'a> {
    id: &'a str,
    hits: Vec<RetrievalHit>,
}

pub fn retrieve(g: &GlobalArgs, s: &Settings, a: RetrieveArgs) -> Result<(), CliError> {
    let seed = setup::seed(g, s)?;
    let queries_path: PathBuf = s.require(a.query_file, "query-file")?;
    let k = s.pick(a.k, "k")?.unwrap_or(5);
    if k == 0 {
        return Err(CliError::Validation("--k must be at least 1".into()));
    }
    let r = setup::retrieval(&a.retrieval, s, seed, "for retrieval")?;
    let queries = setup::load_set(&queries_path)?;
    let mut out = String::new();
    for ex in &queries {
        let q = ex.query_view();
        let vector = r.queries.embed_query(&q).map_err(CliError::validation)?;
        let exclude = HashSet::from([q.id.clone()]);
        let hits =
            r.kb.index()
                .search(&vector, k, &exclude)
                .map_err(CliError::runtime)?;
        let line = HitsLine { id: &q.id, hits };
        out.push_str(&serde_json::to_string(&line).expect("hits serialize"));
        out.push('\n');
    }
    emit(s.pick(a.out, "out")?.as_deref(), &out)
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => setup::write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Topic-tagged training examples.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Base vectors for the training examples.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Topic-tagged validation examples (same vectors file).
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Adapter JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Peak learning rate, decayed linearly to zero.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Most same-topic positives kept per query.
    #[arg(long)]
    positive_cap: Option<usize>,
    /// Most in-batch negatives kept per query.
    #[arg(long)]
    negative_cap: Option<usize>,
    /// Queries per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Augmented variants per positive; variants are embedded with --provider.
    #[arg(long)]
    augmentations: Option<usize>,
    /// Adapter output dimension (default: input dimension).
    #[arg(long)]
    d_out: Option<usize>,
    /// Standard deviation of the noise added to the identity at start.
    #[arg(long)]
    init_noise: Option<f64>,
    /// Steps between validation recall checks.
    #[arg(long)]
    validation_every: Option<usize>,
    #[command(flatten)]
    encoder: ProviderArgs,
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_)
        | TrainError::UntopicedQuery(_)
        | TrainError::UnusableBatch(_)
        | TrainError::UnknownId(_)
        | TrainError::Retrieval(_) => CliError::validation(e),
        other => CliError::runtime(other),
    }
}

pub fn train_retriever(g: &GlobalArgs, s: &Settings, a: TrainArgs) -> Result<(), CliError> {
    let defaults = TrainConfig::default();
    let seed = setup::seed(g, s)?;
    let cfg = TrainConfig {
        learning_rate: s
            .pick(a.learning_rate, "learning-rate")?
            .unwrap_or(defaults.learning_rate),
        max_steps: s
            .pick(a.max_steps, "max-steps")?
            .unwrap_or(defaults.max_steps),
        positive_cap: s
            .pick(a.positive_cap, "positive-cap")?
            .unwrap_or(defaults.positive_cap),
        negative_cap: s
            .pick(a.negative_cap, "negative-cap")?
            .unwrap_or(defaults.negative_cap),
        batch_size: s
            .pick(a.batch_size, "batch-size")?
            .unwrap_or(defaults.batch_size),
        seed,
        augmentations_per_positive: s
            .pick(a.augmentations, "augmentations")?
            .unwrap_or(defaults.augmentations_per_positive),
        d_out: s.pick(a.d_out, "d-out")?.or(defaults.d_out),
        init_noise: s
            .pick(a.init_noise, "init-noise")?
            .unwrap_or(defaults.init_noise),
        validation_every: s
            .pick(a.validation_every, "validation-every")?
            .unwrap_or(defaults.validation_every),
    };
    cfg.validate().map_err(train_error)?;
    let kb: PathBuf = s.require(a.kb, "kb")?;
    let vectors: PathBuf = s.require(a.vectors, "vectors")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let set = setup::load_set(&kb)?;
    let base = setup::load_table(&vectors)?;
    let validation = match s.pick(a.validation, "validation")? {
        Some(p) => Some(setup::load_set(&p)?),
        None => None,
    };
    let augmenter = setup::provider(&a.encoder, s, seed)?;
    if cfg.augmentations_per_positive > 0 && augmenter.is_none() {
        return Err(CliError::Validation(
            "--augmentations needs --provider to embed the variants; pass --augmentations 0 for precomputed vectors".into(),
        ));
    }
    let inputs = TrainInputs {
        validation: validation.as_ref(),
        augmenter: augmenter
            .as_ref()
            .map(|p| p as &dyn zebra_core::retrieval::EmbeddingProvider),
    };
    let outcome = train_adapter(&cfg, &base, &set, inputs).map_err(train_error)?;
    setup::write_file(&out, &outcome.weights.to_json())?;
    if let Some(trace) = s.pick(a.trace, "trace")? {
        setup::write_file(&trace, &trace_to_csv(&outcome.trace))?;
    }
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    match outcome.best_step {
        Some(step) => println!(
            "adapter written to {} (best validation step {step}, final train loss {last:.6})",
            out.display()
        ),
        None => println!(
            "adapter written to {} (final train loss {last:.6})",
            out.display()
        ),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Questions to answer.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// zero_shot, zebra or oracle.
    #[arg(long)]
    mode: Option<String>,
    /// Demonstrations retrieved per question in zebra mode.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    retrieval: RetrievalArgs,
}

struct Prepared {
    dataset: zebra_core::kb::ExampleSet,
    cfg: EvalConfig,
    retrieval: Option<setup::Retrieval>,
    gateway: gateway::Gateway,
}

impl Prepared {
    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            gateway: self.gateway.as_dyn(),
            kb: self.retrieval.as_ref().map(|r| &r.kb),
            embedder: self
                .retrieval
                .as_ref()
                .map(|r| &r.queries as &dyn QueryEmbedder),
        }
    }
}

fn prepare(
    g: &GlobalArgs,
    s: &Settings,
    a: RunArgs,
    force_zebra: bool,
) -> Result<Prepared, CliError> {
    let seed = setup::seed(g, s)?;
    let dataset_path: PathBuf = s.require(a.dataset, "dataset")?;
    let mode = if force_zebra {
        Mode::Zebra
    } else {
        s.pick(a.mode, "mode")?
            .map(|m| m.parse::<Mode>())
            .transpose()
            .map_err(CliError::Validation)?
            .unwrap_or(Mode::Zebra)
    };
    let k = s.pick(a.k, "k")?.unwrap_or(5);
    let concurrency = setup::concurrency(g, s)?;
    let retrieval = if mode == Mode::Zebra {
        Some(setup::retrieval(&a.retrieval, s, seed, "in zebra mode")?)
    } else {
        None
    };
    let dataset = setup::load_set(&dataset_path)?;
    let gateway = gateway::build(g, s, concurrency)?;
    Ok(Prepared {
        dataset,
        cfg: EvalConfig {
            mode,
            k,
            concurrency,
            ..EvalConfig::default()
        },
        retrieval,
        gateway,
    })
}

fn eval_error(e: EvalError, partial_to: Option<&Path>) -> CliError {
    match e {
        EvalError::Precondition(m) => CliError::Validation(m),
        EvalError::Aborted { completed, source } => {
            if let Some(path) = partial_to {
                if let Err(w) = setup::write_file(path, &records_jsonl(&completed)) {
                    eprintln!("error: could not write partial results: {w}");
                } else {
                    eprintln!(
                        "{} completed records written to {}",
                        completed.len(),
                        path.display()
                    );
                }
            }
            match *source {
                EvalError::Precondition(m) => CliError::Validation(m),
                other => CliError::runtime(other),
            }
        }
        other => CliError::runtime(other),
    }
}

#[derive(Args, Debug)]
pub struct AnswerArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Predictions JSONL (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn answer(g: &GlobalArgs, s: &Settings, a: AnswerArgs) -> Result<(), CliError> {
    let out = s.pick(a.out, "out")?;
    let p = prepare(g, s, a.run, false)?;
    let records =
        answer_all(&p.dataset, &p.pipeline(), &p.cfg).map_err(|e| eval_error(e, out.as_deref()))?;
    emit(out.as_deref(), &records_jsonl(&records))?;
    if let Some(line) = p.gateway.cache_summary() {
        eprintln!("{line}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Report JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-question records (default: <out>.records.jsonl).
    #[arg(long)]
    records: Option<PathBuf>,
}

pub fn evaluate(g: &GlobalArgs, s: &Settings, a: EvaluateArgs) -> Result<(), CliError> {
    let out: PathBuf = s.require(a.out, "out")?;
    let records = s
        .pick(a.records, "records")?
        .unwrap_or_else(|| sibling(&out, "records.jsonl"));
    let p = prepare(g, s, a.run, false)?;
    let report = run_evaluate(&p.dataset, &p.pipeline(), &p.cfg)
        .map_err(|e| eval_error(e, Some(&records)))?;
    setup::write_file(&out, &report.summary_json())?;
    setup::write_file(&records, &report.records_jsonl())?;
    if let Some(line) = p.gateway.cache_summary() {
        eprintln!("{line}");
    }
    println!(
        "accuracy {} ({}/{})",
        report.accuracy, report.correct, report.n
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Values of k, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// CSV to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sweep_k(g: &GlobalArgs, s: &Settings, a: SweepArgs) -> Result<(), CliError> {
    let ks: Vec<usize> = s.require(a.ks, "ks")?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Validation("--ks needs positive values".into()));
    }
    let out = s.pick(a.out, "out")?;
    if a.run.mode.as_deref().is_some_and(|m| m != "zebra") {
        return Err(CliError::Validation(
            "sweep-k always runs in zebra mode".into(),
        ));
    }
    let p = prepare(g, s, a.run, true)?;
    let rows =
        run_sweep(&p.dataset, &p.pipeline(), &ks, &p.cfg).map_err(|e| eval_error(e, None))?;
    emit(out.as_deref(), &sweep_to_csv(&rows))
}

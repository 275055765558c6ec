//! Loading inputs and assembling retrieval from flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use zebra_core::kb::{load_examples, ExampleSet, KbError, QueryView};
use zebra_core::knowledge::KnowledgeBase;
use zebra_core::retrieval::{
    embed_passages, Embedding, EmbeddingTable, HashingProvider, ProviderQueries, QueryEmbedder,
    RetrievalError, TableQueries,
};
use zebra_core::trainer::{adapt_table, AdapterWeights};

use crate::error::CliError;
use crate::settings::Settings;
use crate::GlobalArgs;

pub const DEFAULT_DIM: usize = 64;

pub fn load_set(path: &Path) -> Result<ExampleSet, CliError> {
    load_examples(path).map_err(|e| match e {
        KbError::Io { .. } => CliError::runtime(e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable, CliError> {
    EmbeddingTable::load(path).map_err(CliError::validation)
}

pub fn load_adapter(path: &Path) -> Result<AdapterWeights, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn seed(global: &GlobalArgs, settings: &Settings) -> Result<u64, CliError> {
    Ok(settings.pick(global.seed, "seed")?.unwrap_or(0))
}

pub fn concurrency(global: &GlobalArgs, settings: &Settings) -> Result<usize, CliError> {
    let n = settings
        .pick(global.concurrency, "concurrency")?
        .unwrap_or(4);
    if n == 0 {
        return Err(CliError::Validation(
            "--concurrency must be at least 1".into(),
        ));
    }
    Ok(n)
}

/// Encoder selection shared by commands that embed text.
#[derive(Args, Debug, Clone, Default)]
pub struct ProviderArgs {
    /// Text encoder; only the built-in `hash` encoder is available.
    #[arg(long)]
    pub provider: Option<String>,
    /// Output dimension of the hash encoder.
    #[arg(long)]
    pub dim: Option<usize>,
}

pub fn provider(
    args: &ProviderArgs,
    settings: &Settings,
    seed: u64,
) -> Result<Option<HashingProvider>, CliError> {
    let dim = settings.pick(args.dim, "dim")?;
    match settings.pick(args.provider.clone(), "provider")?.as_deref() {
        None if dim.is_none() => Ok(None),
        None | Some("hash") => {
            let dim = dim.unwrap_or(DEFAULT_DIM);
            if dim == 0 {
                return Err(CliError::Validation("--dim must be positive".into()));
            }
            Ok(Some(HashingProvider::new(dim, seed)))
        }
        Some(other) => Err(CliError::Validation(format!(
            "unknown --provider {other:?}; vectors from other encoders are passed with --vectors and --query-vectors"
        ))),
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct RetrievalArgs {
    /// Knowledge base JSONL (entries with explanations).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Precomputed passage vectors for the knowledge base.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Precomputed query vectors, keyed by question id.
    #[arg(long)]
    pub query_vectors: Option<PathBuf>,
    /// Trained adapter applied to passage and query vectors.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: ProviderArgs,
}

/// Query vectors from a table or a live encoder, optionally adapted.
pub struct Queries {
    table: Option<EmbeddingTable>,
    provider: Option<HashingProvider>,
    adapter: Option<AdapterWeights>,
}

impl QueryEmbedder for Queries {
    fn embed_query(&self, query: &QueryView) -> Result<Embedding, RetrievalError> {
        let base = match (&self.table, &self.provider) {
            (Some(t), _) => TableQueries(t).embed_query(query)?,
            (None, Some(p)) => ProviderQueries(p).embed_query(query)?,
            (None, None) => unreachable!("checked at setup"),
        };
        match &self.adapter {
            Some(a) => a.apply(&base),
            None => Ok(base),
        }
    }
}

pub struct Retrieval {
    pub kb: KnowledgeBase,
    pub queries: Queries,
}

pub fn retrieval(
    args: &RetrievalArgs,
    settings: &Settings,
    seed: u64,
    kb_flag_context: &str,
) -> Result<Retrieval, CliError> {
    let kb_path: PathBuf = settings
        .pick(args.kb.clone(), "kb")?
        .ok_or_else(|| CliError::Validation(format!("--kb is required {kb_flag_context}")))?;
    let set = load_set(&kb_path)?;
    let vectors = settings.pick(args.vectors.clone(), "vectors")?;
    let query_vectors = settings.pick(args.query_vectors.clone(), "query-vectors")?;
    let mut encoder = provider(&args.encoder, settings, seed)?;
    if encoder.is_none() && (vectors.is_none() || query_vectors.is_none()) {
        if vectors.is_some() {
            return Err(CliError::Validation(
                "--query-vectors or --provider is needed to embed queries alongside --vectors"
                    .into(),
            ));
        }
        encoder = Some(HashingProvider::new(DEFAULT_DIM, seed));
    }

    let passages = match &vectors {
        Some(path) => load_table(path)?,
        None => {
            let p = encoder.as_ref().expect("encoder chosen above");
            embed_passages(p, &set).map_err(CliError::runtime)?
        }
    };
    let query_table = match &query_vectors {
        Some(path) => Some(load_table(path)?),
        None => None,
    };
    let query_dim = match (&query_table, &encoder) {
        (Some(t), _) => t.dim(),
        (None, Some(p)) => zebra_core::retrieval::EmbeddingProvider::dim(p),
        (None, None) => unreachable!(),
    };
    if query_dim != passages.dim() {
        return Err(CliError::Validation(format!(
            "query vectors have dimension {query_dim} but passage vectors {}",
            passages.dim()
        )));
    }

    let adapter = match settings.pick(args.adapter.clone(), "adapter")? {
        Some(path) => Some(load_adapter(&path)?),
        None => None,
    };
    let passages = match &adapter {
        Some(a) => {
            if a.d_in() != passages.dim() {
                return Err(CliError::Validation(format!(
                    "adapter expects dimension {} but vectors have {}",
                    a.d_in(),
                    passages.dim()
                )));
            }
            adapt_table(a, &passages).map_err(CliError::validation)?
        }
        None => passages,
    };
    let kb = KnowledgeBase::new(&set, &passages).map_err(CliError::validation)?;
    Ok(Retrieval {
        kb,
        queries: Queries {
            table: query_table,
            provider: encoder,
            adapter,
        },
    })
}

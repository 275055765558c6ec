//! Builds the process-wide chat gateway from flags and config.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use zebra_core::llm::{
    CachedGateway, ChatGateway, InFlightLimit, MockGateway, MockScript, RemoteConfig,
    RemoteGateway, ReqwestTransport, RetryPolicy, Retrying,
};

use crate::error::CliError;
use crate::settings::Settings;
use crate::GlobalArgs;

type Stack = InFlightLimit<Retrying<Box<dyn ChatGateway>>>;

pub enum Gateway {
    Plain(Stack),
    Cached(CachedGateway<Stack>),
}

impl Gateway {
    pub fn as_dyn(&self) -> &dyn ChatGateway {
        match self {
            Gateway::Plain(g) => g,
            Gateway::Cached(g) => g,
        }
    }

    /// Cache statistics line, when a cache is in use.
    pub fn cache_summary(&self) -> Option<String> {
        match self {
            Gateway::Plain(_) => None,
            Gateway::Cached(g) => Some(format!(
                "cache: {} hits, {} misses ({})",
                g.hits(),
                g.misses(),
                g.path()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            )),
        }
    }
}

pub const CACHE_FILE: &str = "chat_cache.jsonl";

pub fn build(
    global: &GlobalArgs,
    settings: &Settings,
    concurrency: usize,
) -> Result<Gateway, CliError> {
    let seed = settings.pick(global.seed, "seed")?.unwrap_or(0);
    let base: Box<dyn ChatGateway> = if settings.switch(global.mock, "mock")? {
        let script = match settings.pick(global.mock_script.clone(), "mock-script")? {
            Some(path) => load_script(&path)?,
            None => MockScript {
                fallback_seed: seed,
                ..MockScript::default()
            },
        };
        Box::new(MockGateway::from_script(script))
    } else {
        let endpoint = settings
            .pick(global.endpoint.clone(), "endpoint")?
            .or_else(|| std::env::var("ZEBRA_ENDPOINT").ok())
            .ok_or_else(|| {
                CliError::Validation(
                    "no gateway configured: pass --mock, or --endpoint and --model".into(),
                )
            })?;
        let model = settings
            .pick(global.model.clone(), "model")?
            .or_else(|| std::env::var("ZEBRA_MODEL").ok())
            .ok_or_else(|| CliError::Validation("--model is required with --endpoint".into()))?;
        let mut config = RemoteConfig::new(endpoint, model);
        config.api_key_env = Some(
            settings
                .pick(global.api_key_env.clone(), "api-key-env")?
                .unwrap_or_else(|| "OPENAI_API_KEY".to_string()),
        );
        config.assistant_prefill =
            settings.switch(global.assistant_prefill, "assistant-prefill")?;
        let transport =
            ReqwestTransport::new(Duration::from_secs(120)).map_err(CliError::Runtime)?;
        Box::new(RemoteGateway::new(config, transport).map_err(CliError::validation)?)
    };
    let stack = InFlightLimit::new(Retrying::new(base, RetryPolicy::default()), concurrency);

    let cache_dir = settings
        .pick(global.cache.clone(), "cache")?
        .or_else(|| std::env::var_os("ZEBRA_CACHE_DIR").map(PathBuf::from));
    Ok(match cache_dir {
        Some(dir) => Gateway::Cached(
            CachedGateway::open(stack, dir.join(CACHE_FILE)).map_err(CliError::runtime)?,
        ),
        None => Gateway::Plain(stack),
    })
}

fn load_script(path: &PathBuf) -> Result<MockScript, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("--mock-script {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("--mock-script {}: {e}", path.display())))
}

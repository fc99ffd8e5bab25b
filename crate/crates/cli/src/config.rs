//! Run configuration: command-line flags, environment, an optional TOML
//! file and built-in defaults, resolved in that order of precedence into a
//! snapshot that is written to every run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use dat_core::gateway::{
    Gateway, GatewayConfig, GenerationParams, HttpGateway, SecretString, TranscriptMode,
    DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_MODEL, DEFAULT_TEMPERATURE,
};
use dat_core::mmr::{DEFAULT_CANDIDATES, DEFAULT_KEEP, DEFAULT_LAMBDA};
use dat_core::pipeline::DEFAULT_SHOTS;
use dat_core::pool::DEFAULT_TOP_N;
use dat_core::prompt::Templates;
use dat_core::{
    DemonstrationPair, DemonstrationPool, FilterConfig, LanguagePair, Mode, PipelineConfig,
    Provenance,
};

use crate::exit::{CmdResult, Failure, Tag};
use crate::lock::PoolLock;

pub const ENV_CONFIG: &str = "DAT_CONFIG";
pub const ENV_ENDPOINT: &str = "DAT_ENDPOINT_URL";
pub const ENV_API_KEY: &str = "DAT_API_KEY";
const DEFAULT_SOURCE_LANG: &str = "English";

/// Flags shared by every command that talks to the model.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file (also read from DAT_CONFIG).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// zero-shot, few-shot, dat, dat-fixed or dat-accumulate.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Candidate source sentences requested per query.
    #[arg(long)]
    pub m: Option<usize>,
    /// Candidates kept after filtering.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the diversity term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Demonstrations in the final prompt.
    #[arg(long)]
    pub shots: Option<usize>,
    /// BM25 shortlist size for pool retrieval.
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub source_lang: Option<String>,
    #[arg(long)]
    pub target_lang: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Tab-separated `source<TAB>target` file.
    #[arg(long, value_name = "FILE")]
    pub fixed_pairs: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub pool: Option<PathBuf>,
    /// Directory holding source_generation.txt and translation.txt.
    #[arg(long, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Chat-completion endpoint (also read from DAT_ENDPOINT_URL).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Serve model calls from a transcript store instead of the endpoint.
    #[arg(long, value_name = "STORE", conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Call the endpoint and append every exchange to a transcript store.
    #[arg(long, value_name = "STORE")]
    pub record: Option<PathBuf>,
    #[arg(long)]
    pub retry_limit: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub gateway: GatewaySection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub mode: Option<String>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub shots: Option<usize>,
    pub top_n: Option<usize>,
    pub source_lang: Option<String>,
    pub target_lang: Option<String>,
    pub fixed_pairs: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    pub endpoint_url: Option<String>,
    pub auth_token: Option<String>,
    pub retry_limit: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub timeout_secs: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

/// Fully resolved settings. The auth token is never part of it; only
/// whether one was configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub mode: Mode,
    pub m: usize,
    pub k: usize,
    pub lambda: f64,
    pub shots: usize,
    pub top_n: usize,
    pub source_lang: String,
    pub target_lang: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub fixed_pairs: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub gateway_mode: GatewayMode,
    pub endpoint_url: Option<String>,
    pub transcript_store: Option<PathBuf>,
    pub auth_token_configured: bool,
    pub retry_limit: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Settings that differ from the built-in defaults, and where each came from.
    pub overrides: BTreeMap<String, String>,
}

#[derive(Clone, Copy)]
enum Origin {
    Flag,
    Env,
    File,
}

impl Origin {
    fn as_str(self) -> &'static str {
        match self {
            Origin::Flag => "flag",
            Origin::Env => "environment",
            Origin::File => "config file",
        }
    }
}

#[derive(Default)]
struct Resolver {
    overrides: BTreeMap<String, String>,
}

impl Resolver {
    fn pick<T>(&mut self, name: &str, flag: Option<T>, file: Option<T>, default: T) -> T {
        self.pick_env(name, flag, None, file, default)
    }

    fn pick_env<T>(
        &mut self,
        name: &str,
        flag: Option<T>,
        env: Option<T>,
        file: Option<T>,
        default: T,
    ) -> T {
        let chosen = [(flag, Origin::Flag), (env, Origin::Env), (file, Origin::File)]
            .into_iter()
            .find_map(|(v, origin)| v.map(|v| (v, origin)));
        match chosen {
            Some((value, origin)) => {
                self.overrides.insert(name.to_string(), origin.as_str().to_string());
                value
            }
            None => default,
        }
    }
}

fn env_value(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

/// The resolved settings plus the secret, which stays out of the snapshot.
pub struct Resolved {
    pub config: ResolvedConfig,
    pub auth_token: Option<SecretString>,
}

pub fn resolve(args: &RunArgs) -> CmdResult<Resolved> {
    let config_path = args.config.clone().or_else(|| env_value(ENV_CONFIG).map(PathBuf::from));
    let file = match &config_path {
        Some(path) => FileConfig::load(path).usage_err()?,
        None => FileConfig::default(),
    };
    let p = file.pipeline;
    let g = file.generation;
    let gw = file.gateway;
    let mut r = Resolver::default();

    let file_mode = p
        .mode
        .as_deref()
        .map(str::parse::<Mode>)
        .transpose()
        .map_err(|e| Failure::usage(anyhow!("config file: {e}")))?;
    let mode = r.pick("mode", args.mode, file_mode, Mode::Dat);
    let m = r.pick("m", args.m, p.m, DEFAULT_CANDIDATES);
    let k = r.pick("k", args.k, p.k, DEFAULT_KEEP);
    let lambda = r.pick("lambda", args.lambda, p.lambda, DEFAULT_LAMBDA);
    let shots = r.pick("shots", args.shots, p.shots, DEFAULT_SHOTS);
    let top_n = r.pick("top_n", args.top_n, p.top_n, DEFAULT_TOP_N);
    let source_lang = r.pick(
        "source_lang",
        args.source_lang.clone(),
        p.source_lang,
        DEFAULT_SOURCE_LANG.to_string(),
    );
    let target_lang = r.pick("target_lang", args.target_lang.clone(), p.target_lang, String::new());
    if target_lang.trim().is_empty() {
        return Err(Failure::usage(anyhow!(
            "no target language: pass --target-lang or set pipeline.target_lang"
        )));
    }
    let model = r.pick("model", args.model.clone(), g.model, DEFAULT_MODEL.to_string());
    let temperature = r.pick("temperature", args.temperature, g.temperature, DEFAULT_TEMPERATURE);
    let max_output_tokens = r.pick(
        "max_output_tokens",
        args.max_tokens,
        g.max_output_tokens,
        DEFAULT_MAX_OUTPUT_TOKENS,
    );
    let fixed_pairs = r.pick("fixed_pairs", args.fixed_pairs.clone().map(Some), p.fixed_pairs.map(Some), None);
    let pool = r.pick("pool", args.pool.clone().map(Some), p.pool.map(Some), None);
    let templates = r.pick("templates", args.templates.clone().map(Some), p.templates.map(Some), None);

    let endpoint_url = r.pick_env(
        "endpoint_url",
        args.endpoint.clone().map(Some),
        env_value(ENV_ENDPOINT).map(Some),
        gw.endpoint_url.map(Some),
        None,
    );
    let auth_token = env_value(ENV_API_KEY)
        .or(gw.auth_token)
        .map(SecretString::new);
    let defaults = GatewayConfig::new("");
    let retry_limit = r.pick("retry_limit", args.retry_limit, gw.retry_limit, defaults.retry_limit);
    let backoff_ms = r.pick("backoff_ms", None, gw.backoff_ms, defaults.backoff_base.as_millis() as u64);
    let timeout_secs = r.pick("timeout_secs", args.timeout_secs, gw.timeout_secs, defaults.timeout.as_secs());

    let (gateway_mode, transcript_store) = match (&args.replay, &args.record) {
        (Some(store), _) => (GatewayMode::Replay, Some(store.clone())),
        (None, Some(store)) => (GatewayMode::Record, Some(store.clone())),
        (None, None) => (GatewayMode::Live, None),
    };
    if gateway_mode != GatewayMode::Replay && endpoint_url.is_none() {
        return Err(Failure::usage(anyhow!(
            "no model endpoint: pass --endpoint, set {ENV_ENDPOINT}, or use --replay <store>"
        )));
    }

    Ok(Resolved {
        config: ResolvedConfig {
            mode,
            m,
            k,
            lambda,
            shots,
            top_n,
            source_lang,
            target_lang,
            model,
            temperature,
            max_output_tokens,
            fixed_pairs,
            pool,
            templates,
            gateway_mode,
            endpoint_url,
            transcript_store,
            auth_token_configured: auth_token.is_some(),
            retry_limit,
            backoff_ms,
            timeout_secs,
            overrides: r.overrides,
        },
        auth_token,
    })
}

/// Reads `source<TAB>target` lines; blank lines and `#` comments are skipped.
pub fn read_pairs(path: &Path, provenance: Provenance) -> anyhow::Result<Vec<DemonstrationPair>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading pairs {}", path.display()))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((source, target)) = line.split_once('\t') else {
            bail!("{}: line {}: expected source<TAB>target", path.display(), i + 1);
        };
        let pair = DemonstrationPair::new(source, target, provenance)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

impl ResolvedConfig {
    pub fn require_file(path: &Path, what: &str) -> CmdResult {
        if path.is_file() {
            Ok(())
        } else {
            Err(Failure::usage(anyhow!("{what} {} does not exist", path.display())))
        }
    }

    pub fn templates(&self) -> CmdResult<Templates> {
        match &self.templates {
            Some(dir) => Templates::load_dir(dir).usage_err(),
            None => Ok(Templates::default()),
        }
    }

    /// Builds the pipeline configuration. `pool` is attached only in the
    /// modes that read it.
    pub fn pipeline(&self, pool: Option<Arc<RwLock<DemonstrationPool>>>) -> CmdResult<PipelineConfig> {
        let mut c = PipelineConfig::new(
            self.mode,
            LanguagePair::new(self.source_lang.clone(), self.target_lang.clone()),
        );
        c.filter = FilterConfig::new(self.m, self.k, self.lambda).usage_err()?;
        c.shot_count = self.shots;
        c.top_n = self.top_n;
        c.params = GenerationParams {
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        };
        c.templates = self.templates()?;
        if let Some(path) = &self.fixed_pairs {
            Self::require_file(path, "fixed pairs file")?;
            let pairs = read_pairs(path, Provenance::Fixed).usage_err()?;
            c.fixed_pairs = Some(pairs);
        }
        c.pool = pool;
        c.validate()?;
        Ok(c)
    }

    /// Loads the pool named in the configuration for retrieval, holding a
    /// shared lock on it.
    pub fn load_pool(&self) -> CmdResult<(Arc<RwLock<DemonstrationPool>>, PoolLock)> {
        let path = self
            .pool
            .as_ref()
            .ok_or_else(|| Failure::usage(anyhow!("mode dat-accumulate needs --pool <file>")))?;
        Self::require_file(path, "pool file")?;
        let lock = PoolLock::shared(path).runtime_err()?;
        let pool = DemonstrationPool::load(path).runtime_err()?;
        Ok((Arc::new(RwLock::new(pool)), lock))
    }

    pub fn gateway(&self, auth_token: Option<SecretString>) -> CmdResult<Arc<dyn Gateway>> {
        let live = || -> CmdResult<Arc<dyn Gateway>> {
            let url = self.endpoint_url.clone().expect("checked during resolution");
            let config = GatewayConfig {
                endpoint_url: url,
                auth_token: auth_token.clone(),
                retry_limit: self.retry_limit,
                backoff_base: Duration::from_millis(self.backoff_ms),
                timeout: Duration::from_secs(self.timeout_secs),
            };
            Ok(Arc::new(HttpGateway::new(config).usage_err()?))
        };
        match self.gateway_mode {
            GatewayMode::Live => live(),
            GatewayMode::Record => {
                let store = self.transcript_store.as_ref().expect("record mode has a store");
                TranscriptMode::Record(live()?).open(store).runtime_err()
            }
            GatewayMode::Replay => {
                let store = self.transcript_store.as_ref().expect("replay mode has a store");
                Self::require_file(store, "transcript store")?;
                TranscriptMode::Replay.open(store).runtime_err()
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use dlrepro_core::agent::OutcomeStatus;
use dlrepro_core::pipeline::{
    build_gateway, cmd_ablate, cmd_index, cmd_reproduce, cmd_verify, Component, EmbedderKind, PipelineError,
    ProviderMode, ReproduceSummary, RunConfig, ScorerKind,
};

#[derive(Parser, Debug)]
#[command(name = "dlrepro", version, about = "Reproduce deep-learning bugs from issue reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk and index a repository (reused when the corpus is unchanged).
    Index(Common),
    /// Build contexts, restructure the report, plan and generate a reproduction script.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Verify the final script against this bug signature.
        #[arg(long)]
        signature: Option<PathBuf>,
    },
    /// Run a script under several seeds and judge it against a bug signature.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        signature: PathBuf,
    },
    /// `reproduce` with one component switched off.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Component to disable.
        component: Component,
        #[arg(long)]
        signature: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmbedderArg {
    Http,
    Hash,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScorerArg {
    Http,
    Jaccard,
}

/// Flags shared by every subcommand. Anything given here wins over the
/// config file, which wins over built-in defaults.
#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    repo: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_modules: Option<usize>,
    #[arg(long)]
    max_attempts: Option<usize>,
    #[arg(long)]
    max_contexts: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Comma-separated trial seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Components to switch off (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    disable: Vec<Component>,
    #[arg(long)]
    provider_url: Option<String>,
    /// role=model pairs, e.g. `text=qwen,code=qwen-coder`.
    #[arg(long)]
    model_map: Option<String>,
    /// Serve completions from recorded exchange logs in this directory.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, value_enum)]
    embedder: Option<EmbedderArg>,
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    #[arg(long)]
    grammar: Option<String>,
    /// External lint command; `{file}` is replaced by the script path. Pass an
    /// empty string to use the built-in checks only.
    #[arg(long)]
    lint_command: Option<String>,
    /// Per-trial timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    python: Option<String>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(PipelineError::Config)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set! {
            repo => c.repo,
            report => c.report,
            out_dir => c.out_dir,
            alpha => c.alpha,
            top_k => c.top_k,
            max_modules => c.max_modules,
            max_attempts => c.max_attempts,
            max_contexts => c.max_contexts,
            margin => c.margin,
            seeds => c.seeds,
            provider_url => c.provider.http.endpoint,
            grammar => c.grammar,
            timeout => c.trial_timeout_secs,
            python => c.python,
        }
        c.disabled_components.extend(self.disable.iter().copied());
        if let Some(spec) = &self.model_map {
            c.provider.http.apply_model_map(spec).map_err(PipelineError::Config)?;
        }
        if let Some(dir) = &self.replay {
            c.provider.mode = ProviderMode::Replay;
            c.provider.exchanges = Some(dir.clone());
        }
        if let Some(e) = self.embedder {
            c.provider.embedder = match e {
                EmbedderArg::Http => EmbedderKind::Http,
                EmbedderArg::Hash => EmbedderKind::Hash,
            };
        }
        if let Some(s) = self.scorer {
            c.provider.scorer = match s {
                ScorerArg::Http => ScorerKind::Http,
                ScorerArg::Jaccard => ScorerKind::Jaccard,
            };
        }
        if let Some(cmd) = &self.lint_command {
            c.lint_command = cmd.split_whitespace().map(String::from).collect();
        }
        if self.taxonomy.is_some() {
            c.taxonomy = self.taxonomy.clone();
        }
        c.validate().map_err(PipelineError::Config)?;
        Ok(c)
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value).context("serializing summary")?);
    Ok(())
}

fn reproduce_exit(summary: &ReproduceSummary) -> u8 {
    let ok = match &summary.verdict {
        Some(v) => v.reproduced,
        None => summary.outcome.status == OutcomeStatus::Reproduced,
    };
    if ok {
        0
    } else {
        1
    }
}

#[derive(serde::Serialize)]
struct ReproduceReport<'a> {
    status: OutcomeStatus,
    attempts_total: usize,
    contexts_tried: usize,
    contexts: usize,
    index_reused: bool,
    script: Option<&'a PathBuf>,
    reproduced: Option<bool>,
}

fn report_reproduce(summary: &ReproduceSummary) -> anyhow::Result<u8> {
    print_json(&ReproduceReport {
        status: summary.outcome.status,
        attempts_total: summary.outcome.attempts_total,
        contexts_tried: summary.outcome.contexts_tried,
        contexts: summary.contexts,
        index_reused: summary.index_reused,
        script: summary.script_path.as_ref(),
        reproduced: summary.verdict.as_ref().map(|v| v.reproduced),
    })?;
    Ok(reproduce_exit(summary))
}

fn run(cli: Cli) -> Result<u8, PipelineError> {
    let out = match &cli.command {
        Command::Index(common) => {
            let config = common.resolve()?;
            let gateway = build_gateway(&config)?;
            let summary = cmd_index(&config, &gateway)?;
            print_json(&summary).map(|_| 0)
        }
        Command::Reproduce { common, signature } => {
            let config = common.resolve()?;
            let gateway = build_gateway(&config)?;
            let summary = cmd_reproduce(&config, &gateway, signature.as_deref())?;
            report_reproduce(&summary)
        }
        Command::Verify {
            common,
            script,
            signature,
        } => {
            let config = common.resolve()?;
            let verdict = cmd_verify(&config, script, signature)?;
            print_json(&verdict).map(|_| u8::from(!verdict.reproduced))
        }
        Command::Ablate {
            common,
            component,
            signature,
        } => {
            let config = common.resolve()?;
            let gateway = build_gateway(&config)?;
            let summary = cmd_ablate(&config, *component, &gateway, signature.as_deref())?;
            report_reproduce(&summary)
        }
    };
    out.map_err(|e| PipelineError::Io {
        path: PathBuf::from("<stdout>"),
        message: e.to_string(),
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("DLREPRO_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use editgate_core::augment::{Pipeline, Stage};
use editgate_core::editors::{DemoIndex, Editor, EditorConfig, EditorKind, DEFAULT_SERAC_THRESHOLD};
use editgate_core::harness::{
    compare_editors, run_eval, run_memory_scaling, EvalConfig, EvalContext, DEFAULT_SCALING_SIZES,
};
use editgate_core::memory::{EditMemory, KeyPolicy};
use editgate_core::templates::{DemoLibrary, DEFAULT_IKE_DEMOS};
use editgate_core::types::{parse_dataset_file, parse_dataset_str, parse_edit_string, Edit, QueryRecord};
use editgate_core::Error;
use serde_json::json;
use tokio::net::TcpListener;

use crate::config::{GatewayConfig, Providers, ScriptFile};
use crate::server::{check_reachable, serve, AppState};

#[derive(Parser, Debug)]
#[command(name = "editgate", version, about = "Post-editing gateway for black-box language models")]
pub struct Cli {
    /// JSON file with scripted replies per model role (offline runs).
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,

    /// Edit memory file; overrides EG_MEMORY_PATH.
    #[arg(long, global = true)]
    pub memory: Option<PathBuf>,

    /// Retrieval key: the raw edit string or its prompt only.
    #[arg(long, global = true, value_parser = ["raw-edit", "prompt-only"], default_value = "raw-edit")]
    pub key: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Manage the persisted edit memory.
    #[command(subcommand)]
    Edits(EditsCommand),
    /// Answer one query.
    Respond(RespondArgs),
    /// Evaluate editors over a dataset.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Build post-editor training data.
    Augment(AugmentArgs),
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Fail at startup when a configured endpoint is unreachable.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub editor: Option<EditorKind>,
    /// Dataset whose records become IKE demonstrations.
    #[arg(long)]
    pub demos: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EditsCommand {
    /// Add one edit written as `old >> new || prompt`.
    Add { edit: String },
    List,
    /// Import raw edit lines or a JSONL dataset.
    Import { file: PathBuf },
    /// Write the memory in its persistence format.
    Export { file: PathBuf },
}

#[derive(Args, Debug)]
pub struct RespondArgs {
    #[arg(long)]
    pub editor: Option<EditorKind>,
    #[arg(short, long)]
    pub query: String,
    /// Print the full decision as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DatasetArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for reports and traces.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SERAC_THRESHOLD)]
    pub serac_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_IKE_DEMOS)]
    pub ike_demos: usize,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value = "postedit")]
        editor: EditorKind,
        #[arg(long)]
        memory_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    MemoryScaling {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value = "postedit")]
        editor: EditorKind,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Compare {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, value_delimiter = ',', default_value = "postedit,prompt,ike,serac")]
        editors: Vec<EditorKind>,
    },
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub stage: Stage,
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Input dataset for the first stage.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Destination of the export stage.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
}

/// Runs the CLI and maps failures to an exit code, printing a one-line
/// JSON error on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return fail(&anyhow::Error::from(e)),
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &anyhow::Error) -> ExitCode {
    let kind = e.downcast_ref::<Error>().map_or("Error", Error::kind);
    let line = json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
    eprintln!("{line}");
    ExitCode::FAILURE
}

struct Env {
    config: GatewayConfig,
    providers: Providers,
    memory_path: Option<PathBuf>,
    key_policy: KeyPolicy,
}

impl Env {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let config = GatewayConfig::from_env()?;
        let script = cli.script.as_deref().map(ScriptFile::load).transpose()?;
        let providers = Providers::build(&config, script.as_ref())?;
        let key_policy = match cli.key.as_str() {
            "prompt-only" => KeyPolicy::PromptOnly,
            _ => KeyPolicy::RawEdit,
        };
        Ok(Self {
            memory_path: cli.memory.clone().or_else(|| config.memory_path.clone()),
            config,
            providers,
            key_policy,
        })
    }

    fn memory_path(&self) -> anyhow::Result<&Path> {
        match &self.memory_path {
            Some(p) => Ok(p),
            None => bail!(Error::Config("no memory file: pass --memory or set EG_MEMORY_PATH".into())),
        }
    }

    /// The persisted memory, or an empty one when the file does not exist yet.
    async fn memory(&self) -> anyhow::Result<EditMemory> {
        let provider = self.providers.embedder.clone();
        match &self.memory_path {
            Some(p) if p.exists() => Ok(EditMemory::load(p, provider, self.key_policy).await?),
            _ => Ok(EditMemory::new(provider, self.key_policy)),
        }
    }

    async fn demos(&self, path: Option<&Path>, fallback: &[QueryRecord]) -> anyhow::Result<DemoIndex> {
        let records = match path {
            Some(p) => parse_dataset_file(p)?,
            None => fallback.to_vec(),
        };
        let library = DemoLibrary::from_records(&records);
        Ok(DemoIndex::ranked(library, self.providers.embedder.as_ref()).await?)
    }

    fn context(&self, demos: DemoIndex) -> anyhow::Result<EvalContext> {
        let mut ctx = EvalContext::new(
            self.providers.models()?,
            self.providers.embedder.clone(),
            self.providers.nli.clone(),
        )
        .with_demos(Arc::new(demos));
        ctx.key_policy = self.key_policy;
        Ok(ctx)
    }
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let env = Env::new(&cli)?;
    match cli.command {
        Command::Serve(args) => cmd_serve(&env, args).await,
        Command::Edits(cmd) => cmd_edits(&env, cmd).await,
        Command::Respond(args) => cmd_respond(&env, args).await,
        Command::Eval(cmd) => cmd_eval(&env, cmd).await,
        Command::Augment(args) => cmd_augment(&env, args).await,
    }
}

async fn cmd_serve(env: &Env, args: ServeArgs) -> anyhow::Result<()> {
    let editor = args.editor.unwrap_or(env.config.editor);
    if args.strict {
        let urls = Providers::required_urls(&env.config, editor);
        check_reachable(urls.iter().map(|(k, v)| (*k, v.as_str()))).await?;
    }
    let demos = match &args.demos {
        Some(p) => env.demos(Some(p), &[]).await?,
        None => DemoIndex::default(),
    };
    let state = AppState::new(Arc::new(env.memory().await?), env.providers.models()?, editor)
        .with_memory_path(env.memory_path.clone())
        .with_admin_token(env.config.admin_token.clone())
        .with_demos(Arc::new(demos));
    let listener = TcpListener::bind(&args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    eprintln!("{}", json!({ "listening": listener.local_addr()?.to_string(), "editor": editor }));
    serve(listener, Arc::new(state), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

/// Raw edit lines, or the distinct edits of a JSON dataset.
fn read_import(text: &str) -> anyhow::Result<Vec<Edit>> {
    let first = text.trim_start().chars().next();
    if matches!(first, Some('{') | Some('[')) {
        let mut edits: Vec<Edit> = Vec::new();
        for r in parse_dataset_str(text)? {
            if !edits.iter().any(|e| e.raw == r.edit.raw) {
                edits.push(r.edit);
            }
        }
        return Ok(edits);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_edit_string(0, l).map_err(|e| {
                anyhow::Error::from(Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

async fn cmd_edits(env: &Env, cmd: EditsCommand) -> anyhow::Result<()> {
    let path = env.memory_path()?.to_owned();
    let memory = env.memory().await?;
    match cmd {
        EditsCommand::Add { edit } => {
            let edit = parse_edit_string(memory.next_edit_id(), &edit)?;
            let id = memory.add_edit(edit).await?;
            memory.save(&path)?;
            println!("{}", json!({ "edit_id": id }));
        }
        EditsCommand::List => print!("{}", memory.dump()),
        EditsCommand::Import { file } => {
            let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let mut next = memory.next_edit_id();
            let edits: Vec<Edit> = read_import(&text)?
                .into_iter()
                .map(|mut e| {
                    e.edit_id = next;
                    next += 1;
                    e
                })
                .collect();
            let n = edits.len();
            memory.extend(edits).await?;
            memory.save(&path)?;
            println!("{}", json!({ "imported": n, "total": memory.len() }));
        }
        EditsCommand::Export { file } => {
            memory.save(&file)?;
            println!("{}", json!({ "exported": memory.len() }));
        }
    }
    Ok(())
}

async fn cmd_respond(env: &Env, args: RespondArgs) -> anyhow::Result<()> {
    let memory = Arc::new(env.memory().await?);
    let mut kind = args.editor.unwrap_or(env.config.editor);
    if memory.is_empty() {
        kind = EditorKind::Passthrough;
    }
    let editor = Editor::new(EditorConfig::new(kind), memory, env.providers.models()?)?;
    let decision = editor.respond(&args.query, None).await?;
    if args.json {
        println!("{}", serde_json::to_string(&decision)?);
    } else {
        println!("{}", decision.pair.edited);
    }
    Ok(())
}

fn eval_config(data: &DatasetArgs, kind: EditorKind) -> EvalConfig {
    let mut cfg = EvalConfig::new(EditorConfig {
        serac_threshold: data.serac_threshold,
        ike_demos: data.ike_demos,
        ..EditorConfig::new(kind)
    });
    cfg.concurrency = data.concurrency;
    cfg
}

async fn cmd_eval(env: &Env, cmd: EvalCommand) -> anyhow::Result<()> {
    let data = match &cmd {
        EvalCommand::Run { data, .. } | EvalCommand::MemoryScaling { data, .. } | EvalCommand::Compare { data, .. } => {
            data.clone()
        }
    };
    let dataset = parse_dataset_file(&data.dataset)?;
    let ctx = env.context(env.demos(data.demos.as_deref(), &dataset).await?)?;
    match cmd {
        EvalCommand::Run {
            editor,
            memory_size,
            seed,
            ..
        } => {
            let mut cfg = eval_config(&data, editor);
            cfg.memory_size = memory_size;
            cfg.seed = seed;
            let run = run_eval(&dataset, &ctx, &cfg).await?;
            if let Some(out) = &data.out {
                run.write_to_dir(out)?;
            }
            print!("{}", run.report.to_tsv());
            if !run.quarantine.is_empty() {
                eprintln!("{}", json!({ "quarantined": run.quarantine.len() }));
            }
        }
        EvalCommand::MemoryScaling {
            editor, sizes, seed, ..
        } => {
            let sizes = sizes.unwrap_or_else(|| DEFAULT_SCALING_SIZES.to_vec());
            let run = run_memory_scaling(&dataset, &ctx, &eval_config(&data, editor), &sizes, seed).await?;
            if let Some(out) = &data.out {
                run.write_to_dir(out)?;
            }
            print!("{}", run.to_tsv());
        }
        EvalCommand::Compare { editors, .. } => {
            let cfg = eval_config(&data, EditorKind::PostEdit);
            let cmp = compare_editors(&dataset, &ctx, &editors, &cfg).await?;
            let tsv = cmp.to_tsv();
            if let Some(out) = &data.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let path = out.join("compare.tsv");
                std::fs::write(&path, &tsv).map_err(|e| Error::io(&path, e))?;
            }
            print!("{tsv}");
            for g in cmp.groups.iter().filter(|g| g.error.is_some()) {
                eprintln!("{}", json!({ "editor": g.editor, "error": g.error }));
            }
        }
    }
    Ok(())
}

async fn cmd_augment(env: &Env, args: AugmentArgs) -> anyhow::Result<()> {
    let pipeline = Pipeline::new(&args.run_dir).with_concurrency(args.concurrency);
    let report = match args.stage {
        Stage::Original => {
            pipeline
                .stage_original(args.dataset.as_deref(), env.providers.base()?.as_ref())
                .await?
        }
        Stage::Edited => pipeline.stage_edited(env.providers.augmenter()?.as_ref()).await?,
        Stage::Filter => pipeline.stage_filter(env.providers.nli.as_ref()).await?,
        Stage::Export => pipeline.stage_export(args.out.as_deref())?,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

//! Headless driver: project setup, ingestion, scripted simulation, export,
//! verification and the HTTP service.
//!
//! Exit codes: 0 success, 1 violation or trajectory deviation, 2 usage or
//! input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use promptsci::audit::{self, verify, verify_transcript, AuditBundle, AuditError};
use promptsci::corpus::ingest;
use promptsci::gateway::Transcript;
use promptsci::service::{self, DatasetUpload, GatewayMode, ProjectDir, ProjectSpec, Service, ServiceConfig};
use promptsci::simulation::{bundled, bundled_names, simulate, SimulationFixture};

#[derive(Parser)]
#[command(name = "promptsci", version, about = "Verifiable prompt development workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Create a project directory from a project definition or a bundled fixture.
    Init {
        #[arg(long)]
        project_dir: PathBuf,
        /// JSON project definition (config, codebook, prompt, optional dataset and transcript).
        #[arg(long, conflicts_with = "fixture")]
        config: Option<PathBuf>,
        /// Bundled fixture name or fixture JSON path to take the definition from.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long, default_value = "lead")]
        actor: String,
    },
    /// Load a JSONL dataset into a project directory; starts the project once set up.
    Ingest {
        #[arg(long)]
        project_dir: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset id; defaults to the file stem.
        #[arg(long)]
        dataset_id: Option<String>,
        #[arg(long, default_value = "lead")]
        actor: String,
    },
    /// Run a scripted end-to-end simulation in replay mode.
    Simulate {
        /// Bundled fixture name or fixture JSON path.
        #[arg(long)]
        fixture: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write events, transcript, bundle and report.
        #[arg(long)]
        project_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Serve every project under a root directory over HTTP.
    Serve {
        /// Root directory holding one subdirectory per project.
        #[arg(long)]
        project_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// JSON list of sessions; defaults to `<project-dir>/sessions.json`.
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Call model providers instead of replaying transcripts.
        #[arg(long)]
        live: bool,
    },
    /// Write the audit bundle (json) or report (markdown) of a project.
    Export {
        #[arg(long)]
        project_dir: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check an audit bundle and list violations.
    Verify {
        bundle: PathBuf,
        /// Transcript to check response hashes against.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

/// A failure with its exit code.
struct Failure(u8, String);

impl Failure {
    fn usage(msg: impl std::fmt::Display) -> Self {
        Failure(2, msg.to_string())
    }
}

impl From<service::StoreError> for Failure {
    fn from(e: service::StoreError) -> Self {
        Failure::usage(e)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_fixture(name: &str) -> Result<SimulationFixture, Failure> {
    if let Ok(f) = bundled(name) {
        return Ok(f);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(Failure::usage(format!(
            "unknown fixture {name:?}; bundled: {}",
            bundled_names().join(", ")
        )));
    }
    let fixture: SimulationFixture =
        serde_json::from_str(&read(path)?).map_err(|e| Failure::usage(format!("{name}: {e}")))?;
    fixture.validate().map_err(Failure::usage)?;
    Ok(fixture)
}

fn fixture_spec(f: &SimulationFixture) -> ProjectSpec {
    ProjectSpec {
        config: f.config.clone(),
        codebook: Some(f.codebook.clone()),
        prompt: Some(f.prompt.clone()),
        dataset: Some(DatasetUpload {
            id: f.dataset_id.clone(),
            source: format!("fixture:{}", f.name),
            jsonl: f.dataset_jsonl.clone(),
        }),
        transcript: f.transcript.clone(),
    }
}

fn init(project_dir: PathBuf, config: Option<PathBuf>, fixture: Option<String>, actor: &str) -> Result<(), Failure> {
    let mut spec = match (config, fixture) {
        (Some(path), None) => serde_json::from_str::<ProjectSpec>(&read(&path)?)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => fixture_spec(&load_fixture(&name)?),
        _ => return Err(Failure::usage("init needs --config or --fixture")),
    };
    let dir = ProjectDir::new(project_dir);
    if dir.is_started() || dir.setup_path().exists() {
        return Err(Failure::usage(format!("{} is already initialized", dir.path().display())));
    }
    let pending = dir.dataset_path();
    if spec.dataset.is_none() && pending.exists() {
        let id = pending.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        spec.dataset = Some(DatasetUpload { id, source: pending.display().to_string(), jsonl: read(&pending)? });
    }
    dir.save_spec(&spec)?;
    if spec.dataset.is_some() {
        let engine = dir.start(&spec, actor)?;
        println!("project {} started in {}", engine.state().config.id, engine.state().phase);
    } else {
        println!("project {} initialized; ingest a dataset to start it", spec.config.id);
    }
    Ok(())
}

fn ingest_cmd(project_dir: PathBuf, dataset: PathBuf, dataset_id: Option<String>, actor: &str) -> Result<(), Failure> {
    let dir = ProjectDir::new(project_dir);
    if dir.is_started() {
        return Err(Failure::usage("the project has started; its dataset is fixed"));
    }
    let bytes = fs::read(&dataset).map_err(|e| Failure::usage(format!("{}: {e}", dataset.display())))?;
    let id = dataset_id.unwrap_or_else(|| {
        dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
    });
    let source = dataset.display().to_string();
    let parsed = ingest(&id, &source, &bytes).map_err(Failure::usage)?;
    println!("dataset {id}: {} items, sha256 {}", parsed.len(), parsed.content_hash);
    let text = String::from_utf8(bytes).expect("ingest checked UTF-8");
    dir.create_dir()?;
    write(&dir.dataset_path(), &text)?;
    if let Some(mut spec) = dir.load_spec()? {
        spec.dataset = Some(DatasetUpload { id, source, jsonl: text });
        dir.save_spec(&spec)?;
        let engine = dir.start(&spec, actor)?;
        println!("project {} started in {}", engine.state().config.id, engine.state().phase);
    }
    Ok(())
}

fn simulate_cmd(fixture: &str, seed: Option<u64>, project_dir: Option<PathBuf>, format: Format) -> Result<bool, Failure> {
    let fixture = load_fixture(fixture)?;
    let outcome = simulate(&fixture, seed).map_err(Failure::usage)?;
    let bundle = audit::export(&outcome.engine);
    let violations = verify(&bundle);

    let dir = project_dir.unwrap_or_else(|| PathBuf::from(format!("simulation-{}", fixture.name)));
    let project = ProjectDir::new(&dir);
    project.write_events(&outcome.engine)?;
    project.save_transcript(&outcome.transcript)?;
    write(&dir.join("bundle.json"), &bundle.to_json())?;
    let report = audit::render_report(&bundle).ok();
    if let Some(md) = &report {
        write(&dir.join("report.md"), md)?;
    }

    match format {
        Format::Json => {
            let summary = serde_json::json!({
                "fixture": fixture.name,
                "final_phase": outcome.engine.state().phase,
                "rounds": outcome.rounds,
                "deviations": outcome.deviations,
                "violations": violations.iter().map(ToString::to_string).collect::<Vec<_>>(),
                "bundle": dir.join("bundle.json"),
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Format::Markdown if report.is_some() => print!("{}", report.as_deref().unwrap_or_default()),
        _ => {
            println!("fixture {}: {} rounds", fixture.name, outcome.rounds.len());
            for r in &outcome.rounds {
                let icr: Vec<String> = r
                    .icr
                    .iter()
                    .map(|(c, v)| format!("{c}={}", v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())))
                    .collect();
                let rate = r.pass_rate.map(|p| format!(" pass-rate {p:.2}")).unwrap_or_default();
                println!("  {:<16} {} icr[{}]{}", r.id, if r.passed { "pass" } else { "fail" }, icr.join(" "), rate);
            }
            println!("final phase: {}", outcome.engine.state().phase);
            for d in &outcome.deviations {
                println!("DEVIATION {d}");
            }
            for v in &violations {
                println!("VIOLATION {v}");
            }
            println!("bundle written to {}", dir.join("bundle.json").display());
        }
    }
    Ok(outcome.ok() && violations.is_empty())
}

fn serve_cmd(root: PathBuf, port: u16, sessions: Option<PathBuf>, live: bool) -> Result<(), Failure> {
    let sessions_path = sessions.unwrap_or_else(|| root.join("sessions.json"));
    let sessions = service::load_sessions(&sessions_path)?;
    let svc = Service::open(ServiceConfig {
        root,
        sessions,
        gateway: if live { GatewayMode::Live } else { GatewayMode::Replay },
    })?;
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::usage)?;
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
    runtime.block_on(service::serve(svc, addr)).map_err(Failure::usage)
}

fn export_cmd(project_dir: PathBuf, format: Format, out: Option<PathBuf>) -> Result<bool, Failure> {
    let dir = ProjectDir::new(project_dir);
    let engine = dir
        .load_engine()?
        .ok_or_else(|| Failure::usage(format!("{} holds no started project", dir.path().display())))?;
    let bundle = audit::export(&engine);
    let text = match format {
        Format::Markdown => match audit::render_report(&bundle) {
            Ok(md) => md,
            Err(AuditError::RefusesToRender(v)) => {
                for x in &v {
                    eprintln!("VIOLATION {x}");
                }
                return Ok(false);
            }
            Err(e) => return Err(Failure::usage(e)),
        },
        _ => bundle.to_json(),
    };
    match out {
        Some(path) => write(&path, &text)?,
        None => print!("{text}"),
    }
    Ok(true)
}

fn verify_cmd(bundle: PathBuf, transcript: Option<PathBuf>, format: Format) -> Result<bool, Failure> {
    let text = read(&bundle)?;
    let mut violations = match AuditBundle::from_json(&text) {
        Ok(b) => {
            let mut v = verify(&b);
            if let Some(path) = transcript {
                let file = fs::File::open(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                let t = Transcript::read_jsonl(std::io::BufReader::new(file)).map_err(Failure::usage)?;
                v.extend(verify_transcript(&b, &t));
            }
            v.into_iter().map(|v| v.to_string()).collect::<Vec<_>>()
        }
        Err(e) => vec![e.to_string()],
    };
    violations.dedup();
    match format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({ "violations": violations })).expect("list serializes")
        ),
        _ if violations.is_empty() => println!("ok: no violations"),
        _ => {
            println!("{} violations", violations.len());
            for v in &violations {
                println!("  {v}");
            }
        }
    }
    Ok(violations.is_empty())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Init { project_dir, config, fixture, actor } => init(project_dir, config, fixture, &actor).map(|_| true),
        Command::Ingest { project_dir, dataset, dataset_id, actor } => {
            ingest_cmd(project_dir, dataset, dataset_id, &actor).map(|_| true)
        }
        Command::Simulate { fixture, seed, project_dir, format } => simulate_cmd(&fixture, seed, project_dir, format),
        Command::Serve { project_dir, port, sessions, live } => serve_cmd(project_dir, port, sessions, live).map(|_| true),
        Command::Export { project_dir, format, out } => export_cmd(project_dir, format, out),
        Command::Verify { bundle, transcript, format } => verify_cmd(bundle, transcript, format),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PROMPTSCI_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tsgflow_core::dag::{extract_dag, serialize_dag};
use tsgflow_core::engine::{
    run, ClockMode, ExternalProcessBackend, RunConfig, RunReport, RunStatus, Scenario, ScriptedBackend,
};
use tsgflow_core::harness::{oracle_makespan, parse_executor_range, sweep, Bundle};
use tsgflow_core::lint::{format_text, has_errors, lint_source, ExternalAnalyzer};
use tsgflow_core::memory::MemoryValue;
use tsgflow_core::qpp::{extract_templates, prepare_query, QppManifest};
use tsgflow_core::tsg::parse_tsg;

#[derive(Parser)]
#[command(name = "tsgflow", version, about = "Lint, compile and execute troubleshooting guides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a guide against the authoring rules.
    Lint {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// External analyzer command whose findings are appended.
        #[arg(long)]
        analyzer: Option<String>,
        #[arg(long = "analyzer-arg", allow_hyphen_values = true)]
        analyzer_args: Vec<String>,
    },
    /// Compile a guide into its DAG or query manifest.
    Extract {
        #[command(subcommand)]
        what: Extract,
    },
    /// Instantiate one template of a query manifest.
    Prepare {
        manifest: PathBuf,
        template: String,
        /// Binding as `name=value`; repeatable.
        #[arg(long = "param", value_name = "NAME=VALUE")]
        params: Vec<String>,
    },
    /// Execute a bundle against a scenario.
    Run {
        bundle: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 1)]
        executors: usize,
        #[arg(long, value_enum, default_value_t = Mode::Virtual)]
        mode: Mode,
        #[arg(long, default_value_t = 2)]
        retry: u32,
        /// Trace output (JSON lines).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Milliseconds per latency unit in wall mode.
        #[arg(long, default_value_t = 1)]
        time_unit_ms: u64,
        /// Run every step through this program instead of the scenario script.
        #[arg(long)]
        exec: Option<String>,
        #[arg(long = "exec-arg", allow_hyphen_values = true)]
        exec_args: Vec<String>,
    },
    /// Run a bundle once per executor count.
    Sweep {
        bundle: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArg,
        /// `A..B`, `A,B,C` or a single count.
        #[arg(long, default_value = "1..5")]
        executors: String,
        #[arg(long, default_value_t = 2)]
        retry: u32,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Critical path, serial sum and width computed without the engine.
    Oracle {
        bundle: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 2)]
        retry: u32,
    },
}

#[derive(Subcommand)]
enum Extract {
    Dag {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    Qpp {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ScenarioArg {
    /// Scenario file, or the name of one under `<bundle>/scenarios`.
    #[arg(long)]
    scenario: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Virtual,
    Wall,
}

enum Failure {
    Usage { subcommand: &'static str, message: String },
    Error(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

type Outcome = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage { subcommand, message }) => {
            eprintln!("error: {message}");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(subcommand) {
                eprintln!("\n{}", sub.render_usage());
            }
            ExitCode::from(2)
        }
        Err(Failure::Error(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Lint {
            file,
            format,
            analyzer,
            analyzer_args,
        } => cmd_lint(&file, format, analyzer.map(|program| ExternalAnalyzer { program, args: analyzer_args })),
        Command::Extract { what } => cmd_extract(what),
        Command::Prepare {
            manifest,
            template,
            params,
        } => cmd_prepare(&manifest, &template, &params),
        Command::Run {
            bundle,
            scenario,
            executors,
            mode,
            retry,
            trace,
            time_unit_ms,
            exec,
            exec_args,
        } => {
            if executors < 1 {
                return Err(Failure::Usage {
                    subcommand: "run",
                    message: "--executors must be at least 1".into(),
                });
            }
            let bundle = Bundle::load(&bundle)?;
            let scenario = load_scenario(&bundle, &scenario.scenario)?;
            let config = RunConfig {
                max_executors: executors,
                retry_limit: retry,
                clock: match mode {
                    Mode::Virtual => ClockMode::Virtual,
                    Mode::Wall => ClockMode::Wall,
                },
                run_id: scenario.id.clone(),
            };
            let env = bundle.env_for(&bundle.guide)?;
            let rb = bundle.guide.run_bundle();
            let report = match exec {
                Some(program) => run(
                    &rb,
                    &ExternalProcessBackend::new(program, exec_args),
                    &config,
                    &scenario.incident,
                    &env,
                )?,
                None => {
                    let mut backend = ScriptedBackend::from_scenario(scenario.clone())?;
                    backend.time_unit = Duration::from_millis(time_unit_ms);
                    run(&rb, &backend, &config, &scenario.incident, &env)?
                }
            };
            cmd_run_output(&report, trace.as_deref())
        }
        Command::Sweep {
            bundle,
            scenario,
            executors,
            retry,
            report,
        } => {
            let ks = parse_executor_range(&executors).ok_or_else(|| Failure::Usage {
                subcommand: "sweep",
                message: format!("invalid --executors `{executors}`; expected A..B, A,B,C or N with every count >= 1"),
            })?;
            let bundle = Bundle::load(&bundle)?;
            let scenario = load_scenario(&bundle, &scenario.scenario)?;
            let r = sweep(&bundle, &scenario, &ks, retry)?;
            emit(report.as_deref(), &r.to_json())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { bundle, scenario, retry } => {
            let bundle = Bundle::load(&bundle)?;
            let scenario = load_scenario(&bundle, &scenario.scenario)?;
            let o = oracle_makespan(&bundle.guide.dag, &scenario, retry)?;
            println!("{}", serde_json::to_string_pretty(&o)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Error(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_scenario(bundle: &Bundle, arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(Scenario::load(path)?);
    }
    Ok(bundle.scenario(arg)?)
}

fn cmd_lint(file: &Path, format: Format, analyzer: Option<ExternalAnalyzer>) -> Outcome {
    let text = read(file)?;
    let mut findings = lint_source(&text);
    if let Some(a) = analyzer {
        findings.extend(a.analyze(&parse_tsg(&text)?)?);
        findings.sort_by(|a, b| a.line.cmp(&b.line).then_with(|| a.rule.cmp(&b.rule)));
    }
    let name = file.display().to_string();
    match format {
        Format::Text => print!("{}", format_text(&name, &findings)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&json!({ "file": name, "findings": findings }))?),
    }
    Ok(if has_errors(&findings) { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_extract(what: Extract) -> Outcome {
    match what {
        Extract::Dag { file, output } => {
            let dag = extract_dag(&parse_tsg(&read(&file)?)?)?;
            emit(output.as_deref(), &serialize_dag(&dag))?;
        }
        Extract::Qpp { file, output } => {
            let doc = parse_tsg(&read(&file)?)?;
            let templates = extract_templates(&doc)?;
            emit(output.as_deref(), &QppManifest::new(&doc.tsg_id, &templates).to_json())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Numbers and booleans bind as typed scalars, everything else as text.
fn param_value(raw: &str) -> MemoryValue {
    match serde_json::from_str::<serde_json::Value>(raw) {
        Ok(v @ (serde_json::Value::Number(_) | serde_json::Value::Bool(_))) => {
            MemoryValue::from_literal(&v).unwrap_or_else(|_| MemoryValue::text(raw))
        }
        _ => MemoryValue::text(raw),
    }
}

fn cmd_prepare(manifest: &Path, template: &str, params: &[String]) -> Outcome {
    let mut bindings = BTreeMap::new();
    for p in params {
        let (k, v) = p.split_once('=').ok_or_else(|| Failure::Usage {
            subcommand: "prepare",
            message: format!("--param `{p}` is not NAME=VALUE"),
        })?;
        bindings.insert(k.to_string(), param_value(v));
    }
    let tmpl = QppManifest::from_json(&read(manifest)?)?.template(template)?;
    let q = prepare_query(&tmpl, &bindings)?;
    println!("{}", q.text);
    Ok(ExitCode::SUCCESS)
}

fn cmd_run_output(report: &RunReport, trace: Option<&Path>) -> Outcome {
    if let Some(p) = trace {
        std::fs::write(p, report.trace_jsonl()).map_err(|e| Failure::Error(format!("{}: {e}", p.display())))?;
    }
    let summary = json!({
        "run_id": report.run_id,
        "tsg_id": report.tsg_id,
        "status": report.status.name(),
        "conclusion": report.conclusion,
        "makespan": report.makespan,
        "executed": report.executed,
        "cancelled": report.cancelled,
        "failed": report.failed,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(match report.status {
        RunStatus::Failed(_) => ExitCode::from(1),
        _ => ExitCode::SUCCESS,
    })
}

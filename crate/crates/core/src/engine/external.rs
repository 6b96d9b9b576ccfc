use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::backend::{BackendError, ExecutorBackend, StepContext, StepEnv};
use super::scripted::resolve_decisions;
use super::state::{EdgeDecision, StepOutcome, StepResult};
use crate::memory::MemoryValue;
use crate::tsg::Label;

/// Reply line written by the child process.
#[derive(Debug, Clone, Deserialize)]
struct Reply {
    result: StepResult,
    #[serde(default)]
    summary: String,
    #[serde(default)]
    answer: Option<Label>,
    #[serde(default)]
    edge_decisions: BTreeMap<String, EdgeDecision>,
    #[serde(default)]
    memory_writes: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    duration: Option<f64>,
}

/// Runs every step in a fresh child process. The step context is written
/// to the child's stdin as one JSON line and one outcome line is read back
/// from stdout. Closing stdin signals cancellation.
#[derive(Debug, Clone)]
pub struct ExternalProcessBackend {
    pub program: String,
    pub args: Vec<String>,
    pub poll: Duration,
}

impl ExternalProcessBackend {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ExternalProcessBackend {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
            poll: Duration::from_millis(5),
        }
    }

    fn spawn(&self) -> Result<Child, BackendError> {
        Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", self.program)))
    }
}

fn stop(mut child: Child) {
    drop(child.stdin.take());
    let _ = child.kill();
    let _ = child.wait();
}

impl ExecutorBackend for ExternalProcessBackend {
    fn execute(&self, ctx: &StepContext, env: &StepEnv<'_>) -> Result<StepOutcome, BackendError> {
        let started = Instant::now();
        let mut child = self.spawn()?;
        let mut line = serde_json::to_string(ctx).map_err(|e| BackendError::Step(e.to_string()))?;
        line.push('\n');
        let stdin = child.stdin.as_mut().expect("piped stdin");
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            stop(child);
            return Err(BackendError::Step(format!("cannot write step context: {e}")));
        }
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reply = String::new();
            let read = BufReader::new(stdout).read_line(&mut reply).map(|_| reply);
            let _ = tx.send(read);
        });
        let reply = loop {
            if env.cancelled() {
                stop(child);
                return Err(BackendError::Cancelled);
            }
            match rx.recv_timeout(self.poll) {
                Ok(r) => break r,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => break Ok(String::new()),
            }
        };
        stop(child);
        let reply = reply.map_err(|e| BackendError::Step(format!("cannot read outcome: {e}")))?;
        if reply.trim().is_empty() {
            return Err(BackendError::Step("child exited without an outcome".into()));
        }
        let reply: Reply =
            serde_json::from_str(reply.trim()).map_err(|e| BackendError::Step(format!("malformed outcome: {e}")))?;
        let mut written = Vec::new();
        for (key, literal) in &reply.memory_writes {
            let value = MemoryValue::from_literal(literal).map_err(|e| BackendError::Step(e.to_string()))?;
            env.memory.put(key, value).map_err(|e| BackendError::Step(e.to_string()))?;
            written.push(key.clone());
        }
        let duration = reply.duration.unwrap_or_else(|| started.elapsed().as_secs_f64());
        Ok(match reply.result {
            StepResult::Success => StepOutcome {
                result: StepResult::Success,
                summary: reply.summary,
                edge_decisions: resolve_decisions(&ctx.outgoing, reply.answer, &reply.edge_decisions),
                memory_writes: written,
                error: None,
                duration,
            },
            StepResult::Failure => StepOutcome {
                summary: reply.summary,
                memory_writes: written,
                ..StepOutcome::failure(reply.error.unwrap_or_else(|| "external step failed".into())).with_duration(duration)
            },
        })
    }
}

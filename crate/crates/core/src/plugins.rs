//! Plugin contract, registry and the fixture-backed plugin suite.
//!
//! Plugins never return tables inline: tabular output is written to the
//! blackboard under a fresh `plugin.<name>.<n>` key and only its
//! [`MemoryRef`] (with a compact summary) is returned.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory::{
    parse_timestamp, read_table_file, Blackboard, Column, ColumnType, MemoryError, MemoryRef, MemoryValue, Scalar,
    Table,
};
use crate::qpp::{prepare_query, QppError, QueryTemplate};

pub type Args = BTreeMap<String, MemoryValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Text,
    Integer,
    Number,
    Timestamp,
    Boolean,
    Record,
    /// Any scalar or list.
    Value,
}

impl ParamKind {
    fn accepts(self, v: &MemoryValue) -> bool {
        match (self, v) {
            (ParamKind::Text, MemoryValue::Scalar(Scalar::Text(_))) => true,
            (ParamKind::Integer, MemoryValue::Scalar(Scalar::Integer(_))) => true,
            (ParamKind::Number, MemoryValue::Scalar(s)) => s.as_f64().is_some(),
            (ParamKind::Timestamp, MemoryValue::Scalar(Scalar::Timestamp(_))) => true,
            (ParamKind::Boolean, MemoryValue::Scalar(Scalar::Boolean(_))) => true,
            (ParamKind::Record, MemoryValue::Record(_)) => true,
            (ParamKind::Value, MemoryValue::Scalar(_) | MemoryValue::List(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
}

impl ParamSpec {
    pub fn required(name: &str, kind: ParamKind) -> Self {
        ParamSpec {
            name: name.into(),
            kind,
            required: true,
        }
    }

    pub fn optional(name: &str, kind: ParamKind) -> Self {
        ParamSpec {
            name: name.into(),
            kind,
            required: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultContract {
    InlineScalar,
    MemoryRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
    pub result: ResultContract,
}

impl PluginDescriptor {
    pub fn new(name: &str, description: &str, params: Vec<ParamSpec>, result: ResultContract) -> Self {
        PluginDescriptor {
            name: name.into(),
            description: description.into(),
            params,
            result,
        }
    }

    fn check(&self) -> Result<(), PluginError> {
        let first_optional = self.params.iter().position(|p| !p.required);
        if let Some(i) = first_optional {
            if self.params[i..].iter().any(|p| p.required) {
                return Err(PluginError::InvalidDescriptor(format!(
                    "{}: required parameters must precede optional ones",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Converts text arguments into timestamps where the schema asks for
    /// one, so JSON literals can feed timestamp parameters.
    pub fn coerce(&self, mut args: Args) -> Args {
        for p in self.params.iter().filter(|p| p.kind == ParamKind::Timestamp) {
            if let Some(MemoryValue::Scalar(Scalar::Text(s))) = args.get(&p.name) {
                if let Some(t) = parse_timestamp(s) {
                    args.insert(p.name.clone(), MemoryValue::Scalar(Scalar::Timestamp(t)));
                }
            }
        }
        args
    }

    /// Checks `args` against the parameter schema.
    pub fn validate(&self, args: &Args) -> Result<(), PluginError> {
        let violation = |message: String| PluginError::ArgSchemaViolation {
            plugin: self.name.clone(),
            message,
        };
        for p in &self.params {
            match args.get(&p.name) {
                None if p.required => return Err(violation(format!("missing `{}`", p.name))),
                Some(v) if !p.kind.accepts(v) => {
                    return Err(violation(format!("`{}` must be {:?}", p.name, p.kind)))
                }
                _ => {}
            }
        }
        if let Some(extra) = args.keys().find(|k| !self.params.iter().any(|p| &p.name == *k)) {
            return Err(violation(format!("unexpected argument `{extra}`")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginResult {
    pub status: PluginStatus,
    /// Scalar or record; never a table.
    pub inline: Option<MemoryValue>,
    pub refs: Vec<MemoryRef>,
    pub message: String,
}

impl PluginResult {
    pub fn ok(message: impl Into<String>) -> Self {
        PluginResult {
            status: PluginStatus::Ok,
            inline: None,
            refs: Vec::new(),
            message: message.into(),
        }
    }

    pub fn with_inline(mut self, v: MemoryValue) -> Self {
        self.inline = Some(v);
        self
    }

    pub fn with_ref(mut self, r: MemoryRef) -> Self {
        self.refs.push(r);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("memory key not found: {0}")]
    KeyNotFound(String),
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("`{0}` does not hold numeric data")]
    NonNumeric(String),
    #[error("unknown aggregate `{0}`")]
    UnknownOp(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PluginError {
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("plugin `{0}` registered twice")]
    DuplicatePlugin(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("{plugin}: argument schema violation: {message}")]
    ArgSchemaViolation { plugin: String, message: String },
    #[error("{plugin} failed: {message}")]
    PluginFailure { plugin: String, message: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Query(#[from] QppError),
    #[error("fixture error: {0}")]
    Fixture(String),
}

pub trait Plugin: Send + Sync {
    fn descriptor(&self) -> &PluginDescriptor;
    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError>;
}

/// Immutable after construction; `invoke` may be called concurrently.
#[derive(Default, Clone)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, Arc<dyn Plugin>>,
}

impl fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.plugins.keys()).finish()
    }
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, plugin: Arc<dyn Plugin>) -> Result<(), PluginError> {
        let d = plugin.descriptor();
        d.check()?;
        if self.plugins.contains_key(&d.name) {
            return Err(PluginError::DuplicatePlugin(d.name.clone()));
        }
        self.plugins.insert(d.name.clone(), plugin);
        Ok(())
    }

    /// Standard suite: fixture-backed log, metric and DevOps plugins, the
    /// analysis operations, and one query-preparation plugin per template.
    pub fn standard(fixtures: Arc<FixtureSet>, templates: &[QueryTemplate]) -> Result<Self, PluginError> {
        let mut reg = PluginRegistry::new();
        reg.register(Arc::new(LogQueryPlugin::new(fixtures.clone())))?;
        reg.register(Arc::new(MetricPlugin::new(fixtures.clone())))?;
        reg.register(Arc::new(DeploymentsPlugin::new(fixtures.clone())))?;
        reg.register(Arc::new(CodeChangesPlugin::new(fixtures)))?;
        reg.register(Arc::new(PearsonPlugin::new()))?;
        reg.register(Arc::new(AggregatePlugin::new()))?;
        for t in templates {
            reg.register(Arc::new(QppPlugin::new(t.clone())))?;
        }
        Ok(reg)
    }

    pub fn descriptors(&self) -> Vec<PluginDescriptor> {
        self.plugins.values().map(|p| p.descriptor().clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Plugin>> {
        self.plugins.get(name)
    }

    pub fn invoke(&self, name: &str, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let plugin = self
            .plugins
            .get(name)
            .ok_or_else(|| PluginError::UnknownPlugin(name.to_string()))?;
        plugin.descriptor().validate(args)?;
        let result = plugin.call(args, memory)?;
        debug_assert!(!matches!(result.inline, Some(MemoryValue::Table(_))));
        Ok(result)
    }
}

fn text_arg<'a>(args: &'a Args, name: &str) -> Option<&'a str> {
    match args.get(name) {
        Some(MemoryValue::Scalar(Scalar::Text(s))) => Some(s),
        _ => None,
    }
}

fn time_arg(args: &Args, name: &str) -> Option<DateTime<Utc>> {
    match args.get(name) {
        Some(MemoryValue::Scalar(Scalar::Timestamp(t))) => Some(*t),
        _ => None,
    }
}

fn deposit(memory: &dyn Blackboard, plugin: &str, table: Table) -> Result<MemoryRef, PluginError> {
    let key = memory.fresh_key(&format!("plugin.{plugin}"));
    Ok(memory.put(&key, MemoryValue::Table(table))?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixture file stem for an exact query text: first 16 hex digits of its SHA-256.
pub fn query_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))[..16].to_string()
}

fn encode_component(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Fixture file stem for a template invocation:
/// `<template>@<k1>=<v1>&<k2>=<v2>` with bindings sorted by name and
/// components percent-encoded.
pub fn binding_stem(template: &str, bindings: &BTreeMap<String, String>) -> String {
    let pairs: Vec<String> = bindings
        .iter()
        .map(|(k, v)| format!("{}={}", encode_component(k), encode_component(v)))
        .collect();
    format!("{}@{}", encode_component(template), pairs.join("&"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub id: String,
    pub service: String,
    pub ring: String,
    pub started: DateTime<Utc>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeChange {
    pub commit: String,
    pub author: String,
    pub file: String,
    pub title: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DevOpsFixture {
    #[serde(default)]
    pub deployments: Vec<Deployment>,
    #[serde(default)]
    pub code_changes: BTreeMap<String, Vec<CodeChange>>,
}

/// Read-only fixture data for one guide:
/// `queries/<stem>.csv`, `metrics/<metric>.csv`, `devops.json`.
#[derive(Debug, Clone, Default)]
pub struct FixtureSet {
    pub queries: HashMap<String, Table>,
    pub metrics: HashMap<String, Table>,
    pub devops: DevOpsFixture,
}

impl FixtureSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(dir: &Path) -> Result<FixtureSet, PluginError> {
        let fixture_err = |e: String| PluginError::Fixture(e);
        let read_dir = |sub: &str| -> Result<HashMap<String, Table>, PluginError> {
            let mut out = HashMap::new();
            let path = dir.join(sub);
            if !path.is_dir() {
                return Ok(out);
            }
            let entries = std::fs::read_dir(&path).map_err(|e| fixture_err(format!("{}: {e}", path.display())))?;
            for entry in entries {
                let p = entry.map_err(|e| fixture_err(e.to_string()))?.path();
                if p.extension().and_then(|e| e.to_str()) != Some("csv") {
                    continue;
                }
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let table = read_table_file(&p).map_err(|e| fixture_err(format!("{}: {e}", p.display())))?;
                out.insert(stem, table);
            }
            Ok(out)
        };
        let devops_path = dir.join("devops.json");
        let devops = if devops_path.exists() {
            let text = std::fs::read_to_string(&devops_path).map_err(|e| fixture_err(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| fixture_err(format!("devops.json: {e}")))?
        } else {
            DevOpsFixture::default()
        };
        Ok(FixtureSet {
            queries: read_dir("queries")?,
            metrics: read_dir("metrics")?,
            devops,
        })
    }

    /// Exact-text match first, then template name plus sorted bindings.
    pub fn resolve_query(&self, text: &str, template: Option<&str>, bindings: Option<&BTreeMap<String, String>>) -> Option<&Table> {
        if let Some(t) = self.queries.get(&query_hash(text)) {
            return Some(t);
        }
        let (template, bindings) = (template?, bindings?);
        self.queries.get(&binding_stem(template, bindings))
    }
}

pub struct LogQueryPlugin {
    descriptor: PluginDescriptor,
    fixtures: Arc<FixtureSet>,
}

impl LogQueryPlugin {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        LogQueryPlugin {
            descriptor: PluginDescriptor::new(
                "log_query",
                "Runs a prepared log query and stores the result table in memory",
                vec![
                    ParamSpec::required("query", ParamKind::Text),
                    ParamSpec::optional("template", ParamKind::Text),
                    ParamSpec::optional("bindings", ParamKind::Record),
                ],
                ResultContract::MemoryRef,
            ),
            fixtures,
        }
    }
}

impl Plugin for LogQueryPlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let query = text_arg(args, "query").unwrap_or_default();
        let bindings = match args.get("bindings") {
            Some(MemoryValue::Record(r)) => Some(r.iter().map(|(k, v)| (k.clone(), v.to_string())).collect()),
            _ => None,
        };
        let table = self
            .fixtures
            .resolve_query(query, text_arg(args, "template"), bindings.as_ref())
            .ok_or_else(|| PluginFailure::new("log_query", format!("no fixture matches query {}", query_hash(query))))?;
        let rows = table.rows().len();
        let r = deposit(memory, "log_query", table.clone())?;
        Ok(PluginResult::ok(format!("{rows} rows stored under {}", r.key)).with_ref(r))
    }
}

struct PluginFailure;

impl PluginFailure {
    #[allow(clippy::new_ret_no_self)]
    fn new(plugin: &str, message: impl Into<String>) -> PluginError {
        PluginError::PluginFailure {
            plugin: plugin.to_string(),
            message: message.into(),
        }
    }
}

pub struct MetricPlugin {
    descriptor: PluginDescriptor,
    fixtures: Arc<FixtureSet>,
}

impl MetricPlugin {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        MetricPlugin {
            descriptor: PluginDescriptor::new(
                "metric_fetch",
                "Fetches a metric time series (timestamp, value) for a time window",
                vec![
                    ParamSpec::required("metric", ParamKind::Text),
                    ParamSpec::required("from", ParamKind::Timestamp),
                    ParamSpec::required("to", ParamKind::Timestamp),
                ],
                ResultContract::MemoryRef,
            ),
            fixtures,
        }
    }
}

impl Plugin for MetricPlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let metric = text_arg(args, "metric").unwrap_or_default();
        let (from, to) = (time_arg(args, "from").unwrap(), time_arg(args, "to").unwrap());
        let series = self
            .fixtures
            .metrics
            .get(metric)
            .ok_or_else(|| PluginFailure::new("metric_fetch", format!("unknown metric `{metric}`")))?;
        let ts_col = series
            .columns()
            .iter()
            .position(|c| c.ty == ColumnType::Timestamp)
            .ok_or_else(|| PluginFailure::new("metric_fetch", "metric fixture has no timestamp column"))?;
        let rows: Vec<Vec<Scalar>> = series
            .rows()
            .iter()
            .filter(|r| matches!(r[ts_col], Scalar::Timestamp(t) if t >= from && t <= to))
            .cloned()
            .collect();
        let n = rows.len();
        let table = Table::new(series.columns().to_vec(), rows)?;
        let r = deposit(memory, "metric_fetch", table)?;
        Ok(PluginResult::ok(format!("{n} points of `{metric}` stored under {}", r.key)).with_ref(r))
    }
}

pub struct DeploymentsPlugin {
    descriptor: PluginDescriptor,
    fixtures: Arc<FixtureSet>,
}

impl DeploymentsPlugin {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        DeploymentsPlugin {
            descriptor: PluginDescriptor::new(
                "devops.deployments",
                "Lists deployments started inside a time window",
                vec![
                    ParamSpec::required("from", ParamKind::Timestamp),
                    ParamSpec::required("to", ParamKind::Timestamp),
                    ParamSpec::optional("service", ParamKind::Text),
                ],
                ResultContract::MemoryRef,
            ),
            fixtures,
        }
    }
}

impl Plugin for DeploymentsPlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let (from, to) = (time_arg(args, "from").unwrap(), time_arg(args, "to").unwrap());
        let service = text_arg(args, "service");
        let columns = ["id", "service", "ring", "started", "status"]
            .iter()
            .map(|n| Column {
                name: n.to_string(),
                ty: if *n == "started" { ColumnType::Timestamp } else { ColumnType::Text },
            })
            .collect();
        let rows: Vec<Vec<Scalar>> = self
            .fixtures
            .devops
            .deployments
            .iter()
            .filter(|d| d.started >= from && d.started <= to)
            .filter(|d| service.is_none_or(|s| s == d.service))
            .map(|d| {
                vec![
                    Scalar::Text(d.id.clone()),
                    Scalar::Text(d.service.clone()),
                    Scalar::Text(d.ring.clone()),
                    Scalar::Timestamp(d.started),
                    Scalar::Text(d.status.clone()),
                ]
            })
            .collect();
        let n = rows.len() as i64;
        let r = deposit(memory, "devops.deployments", Table::new(columns, rows)?)?;
        Ok(PluginResult::ok(format!("{n} deployments"))
            .with_inline(MemoryValue::Record(BTreeMap::from([("count".to_string(), Scalar::Integer(n))])))
            .with_ref(r))
    }
}

pub struct CodeChangesPlugin {
    descriptor: PluginDescriptor,
    fixtures: Arc<FixtureSet>,
}

impl CodeChangesPlugin {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        CodeChangesPlugin {
            descriptor: PluginDescriptor::new(
                "devops.code_changes",
                "Lists the code changes shipped by a deployment",
                vec![ParamSpec::required("deployment_id", ParamKind::Text)],
                ResultContract::MemoryRef,
            ),
            fixtures,
        }
    }
}

impl Plugin for CodeChangesPlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let id = text_arg(args, "deployment_id").unwrap_or_default();
        let changes = self
            .fixtures
            .devops
            .code_changes
            .get(id)
            .ok_or_else(|| PluginFailure::new("devops.code_changes", format!("unknown deployment `{id}`")))?;
        let columns = ["commit", "author", "file", "title"]
            .iter()
            .map(|n| Column { name: n.to_string(), ty: ColumnType::Text })
            .collect();
        let rows = changes
            .iter()
            .map(|c| {
                vec![
                    Scalar::Text(c.commit.clone()),
                    Scalar::Text(c.author.clone()),
                    Scalar::Text(c.file.clone()),
                    Scalar::Text(c.title.clone()),
                ]
            })
            .collect();
        let r = deposit(memory, "devops.code_changes", Table::new(columns, rows)?)?;
        Ok(PluginResult::ok(format!("{} changes in {id}", changes.len())).with_ref(r))
    }
}

/// Numeric series held under `key`: a numeric list, or a table column
/// (`column`, or the table's only numeric column).
pub fn numeric_series(memory: &dyn Blackboard, key: &str, column: Option<&str>) -> Result<Vec<f64>, AnalysisError> {
    let value = memory
        .get(key)
        .map_err(|_| AnalysisError::KeyNotFound(key.to_string()))?;
    let non_numeric = || AnalysisError::NonNumeric(key.to_string());
    match value {
        MemoryValue::List(items) => items.iter().map(|s| s.as_f64().ok_or_else(non_numeric)).collect(),
        MemoryValue::Table(t) => {
            let idx = match column {
                Some(c) => t.column_index(c).ok_or_else(non_numeric)?,
                None => {
                    let numeric: Vec<usize> = t
                        .columns()
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| c.ty.is_numeric())
                        .map(|(i, _)| i)
                        .collect();
                    match numeric.as_slice() {
                        [i] => *i,
                        _ => return Err(non_numeric()),
                    }
                }
            };
            t.column_values(idx).map(|s| s.as_f64().ok_or_else(non_numeric)).collect()
        }
        _ => Err(non_numeric()),
    }
}

/// Sample Pearson correlation of two equally long series.
pub fn pearson_coefficient(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len() as f64;
    if x.len() < 2 {
        return Err(AnalysisError::ZeroVariance);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlates the series under two keys and stores the coefficient under
/// `analysis.pearson.<key_x>.<key_y>`.
pub fn pearson(memory: &dyn Blackboard, key_x: &str, key_y: &str) -> Result<f64, PluginError> {
    let x = numeric_series(memory, key_x, None)?;
    let y = numeric_series(memory, key_y, None)?;
    let r = pearson_coefficient(&x, &y)?;
    memory.put(&format!("analysis.pearson.{key_x}.{key_y}"), MemoryValue::decimal(r))?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateOp {
    Mean,
    Count,
    Max,
    Min,
    TopK(usize),
}

impl AggregateOp {
    pub fn parse(op: &str, k: Option<usize>) -> Result<AggregateOp, AnalysisError> {
        Ok(match op {
            "mean" => AggregateOp::Mean,
            "count" => AggregateOp::Count,
            "max" => AggregateOp::Max,
            "min" => AggregateOp::Min,
            "top_k" => AggregateOp::TopK(k.unwrap_or(3)),
            other => match other.strip_prefix("top_").and_then(|n| n.parse().ok()) {
                Some(k) => AggregateOp::TopK(k),
                None => return Err(AnalysisError::UnknownOp(op.to_string())),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregateOutput {
    Scalar(Scalar),
    Table(Table),
}

/// Exact aggregate over a numeric list or table column.
pub fn aggregate(
    memory: &dyn Blackboard,
    key: &str,
    op: AggregateOp,
    column: Option<&str>,
) -> Result<AggregateOutput, AnalysisError> {
    if op == AggregateOp::Count {
        let n = match memory.get(key).map_err(|_| AnalysisError::KeyNotFound(key.to_string()))? {
            MemoryValue::Table(t) => t.rows().len(),
            MemoryValue::List(l) => l.len(),
            MemoryValue::Record(r) => r.len(),
            MemoryValue::Scalar(_) => 1,
        };
        return Ok(AggregateOutput::Scalar(Scalar::Integer(n as i64)));
    }
    let values = numeric_series(memory, key, column)?;
    let fold = |f: fn(f64, f64) -> f64| values.iter().copied().reduce(f);
    match op {
        AggregateOp::Mean => {
            if values.is_empty() {
                return Err(AnalysisError::NonNumeric(key.to_string()));
            }
            Ok(AggregateOutput::Scalar(Scalar::Decimal(
                values.iter().sum::<f64>() / values.len() as f64,
            )))
        }
        AggregateOp::Max | AggregateOp::Min => {
            let v = if op == AggregateOp::Max { fold(f64::max) } else { fold(f64::min) };
            v.map(|v| AggregateOutput::Scalar(Scalar::Decimal(v)))
                .ok_or_else(|| AnalysisError::NonNumeric(key.to_string()))
        }
        AggregateOp::TopK(k) => {
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            order.truncate(k);
            let table = match memory.get(key).map_err(|_| AnalysisError::KeyNotFound(key.to_string()))? {
                MemoryValue::Table(t) => {
                    let rows = order.iter().map(|&i| t.rows()[i].clone()).collect();
                    Table::new(t.columns().to_vec(), rows).expect("rows come from a valid table")
                }
                _ => {
                    let columns = vec![
                        Column { name: "index".into(), ty: ColumnType::Integer },
                        Column { name: "value".into(), ty: ColumnType::Decimal },
                    ];
                    let rows = order
                        .iter()
                        .map(|&i| vec![Scalar::Integer(i as i64), Scalar::Decimal(values[i])])
                        .collect();
                    Table::new(columns, rows).expect("well-typed")
                }
            };
            Ok(AggregateOutput::Table(table))
        }
        AggregateOp::Count => unreachable!(),
    }
}

pub struct PearsonPlugin {
    descriptor: PluginDescriptor,
}

impl PearsonPlugin {
    pub fn new() -> Self {
        PearsonPlugin {
            descriptor: PluginDescriptor::new(
                "analysis.pearson",
                "Pearson correlation between two numeric series held in memory",
                vec![
                    ParamSpec::required("key_x", ParamKind::Text),
                    ParamSpec::required("key_y", ParamKind::Text),
                ],
                ResultContract::InlineScalar,
            ),
        }
    }
}

impl Default for PearsonPlugin {
    fn default() -> Self {
        Self::new()
    }
}

impl Plugin for PearsonPlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let (x, y) = (text_arg(args, "key_x").unwrap(), text_arg(args, "key_y").unwrap());
        let r = pearson(memory, x, y)?;
        Ok(PluginResult::ok(format!("pearson({x}, {y}) = {r}")).with_inline(MemoryValue::decimal(r)))
    }
}

pub struct AggregatePlugin {
    descriptor: PluginDescriptor,
}

impl AggregatePlugin {
    pub fn new() -> Self {
        AggregatePlugin {
            descriptor: PluginDescriptor::new(
                "analysis.aggregate",
                "mean, count, max, min or top_k over a numeric list or table column",
                vec![
                    ParamSpec::required("key", ParamKind::Text),
                    ParamSpec::required("op", ParamKind::Text),
                    ParamSpec::optional("column", ParamKind::Text),
                    ParamSpec::optional("k", ParamKind::Integer),
                ],
                ResultContract::InlineScalar,
            ),
        }
    }
}

impl Default for AggregatePlugin {
    fn default() -> Self {
        Self::new()
    }
}

impl Plugin for AggregatePlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let key = text_arg(args, "key").unwrap();
        let k = match args.get("k") {
            Some(MemoryValue::Scalar(Scalar::Integer(k))) => Some((*k).max(0) as usize),
            _ => None,
        };
        let op = AggregateOp::parse(text_arg(args, "op").unwrap(), k)?;
        match aggregate(memory, key, op, text_arg(args, "column"))? {
            AggregateOutput::Scalar(s) => {
                Ok(PluginResult::ok(format!("{op:?}({key}) = {s}")).with_inline(MemoryValue::Scalar(s)))
            }
            AggregateOutput::Table(t) => {
                let r = deposit(memory, "analysis.aggregate", t)?;
                Ok(PluginResult::ok(format!("{op:?}({key}) stored under {}", r.key)).with_ref(r))
            }
        }
    }
}

/// Query-preparation plugin for one template: returns the prepared query
/// text inline as `{query, template}`.
pub struct QppPlugin {
    descriptor: PluginDescriptor,
    template: QueryTemplate,
}

impl QppPlugin {
    pub fn new(template: QueryTemplate) -> Self {
        let params = template
            .placeholders
            .iter()
            .map(|p| ParamSpec::required(p, ParamKind::Value))
            .collect();
        QppPlugin {
            descriptor: PluginDescriptor::new(
                &format!("qpp.{}", template.name),
                &format!("Prepares the `{}` {} query", template.name, template.language),
                params,
                ResultContract::InlineScalar,
            ),
            template,
        }
    }
}

impl Plugin for QppPlugin {
    fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    fn call(&self, args: &Args, _memory: &dyn Blackboard) -> Result<PluginResult, PluginError> {
        let prepared = prepare_query(&self.template, args)?;
        let record = BTreeMap::from([
            ("query".to_string(), Scalar::Text(prepared.text)),
            ("template".to_string(), Scalar::Text(prepared.template_name)),
        ]);
        Ok(PluginResult::ok(format!("prepared `{}`", self.template.name)).with_inline(MemoryValue::Record(record)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::InMemoryStore;

    fn list(v: &[f64]) -> MemoryValue {
        MemoryValue::List(v.iter().map(|x| Scalar::Decimal(*x)).collect())
    }

    fn args(pairs: &[(&str, MemoryValue)]) -> Args {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn pearson_examples() {
        let mem = InMemoryStore::new();
        mem.put("x", list(&[1.0, 2.0, 3.0])).unwrap();
        mem.put("y", list(&[2.0, 4.0, 6.0])).unwrap();
        mem.put("z", list(&[6.0, 4.0, 2.0])).unwrap();
        assert_eq!(pearson(&mem, "x", "y").unwrap(), 1.0);
        assert_eq!(pearson(&mem, "x", "z").unwrap(), -1.0);
        assert_eq!(mem.get("analysis.pearson.x.y").unwrap(), MemoryValue::decimal(1.0));
        mem.put("a", list(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        mem.put("b", list(&[1.0, 3.0, 2.0, 4.0])).unwrap();
        assert!((pearson(&mem, "a", "b").unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        let mem = InMemoryStore::new();
        mem.put("x", list(&[1.0, 2.0, 3.0])).unwrap();
        mem.put("short", list(&[1.0, 2.0])).unwrap();
        mem.put("flat", list(&[5.0, 5.0, 5.0])).unwrap();
        mem.put("words", MemoryValue::List(vec![Scalar::Text("a".into())])).unwrap();
        let err = |a, b| pearson(&mem, a, b).unwrap_err();
        assert_eq!(err("x", "nope"), PluginError::Analysis(AnalysisError::KeyNotFound("nope".into())));
        assert_eq!(err("x", "short"), PluginError::Analysis(AnalysisError::LengthMismatch(3, 2)));
        assert_eq!(err("x", "flat"), PluginError::Analysis(AnalysisError::ZeroVariance));
        assert_eq!(err("x", "words"), PluginError::Analysis(AnalysisError::NonNumeric("words".into())));
    }

    #[test]
    fn aggregates() {
        let mem = InMemoryStore::new();
        mem.put("v", list(&[2.0, 4.0])).unwrap();
        assert_eq!(
            aggregate(&mem, "v", AggregateOp::Mean, None).unwrap(),
            AggregateOutput::Scalar(Scalar::Decimal(3.0))
        );
        assert_eq!(
            aggregate(&mem, "v", AggregateOp::Max, None).unwrap(),
            AggregateOutput::Scalar(Scalar::Decimal(4.0))
        );
        assert_eq!(
            aggregate(&mem, "v", AggregateOp::Count, None).unwrap(),
            AggregateOutput::Scalar(Scalar::Integer(2))
        );
        mem.put("t", MemoryValue::text("x")).unwrap();
        assert_eq!(
            aggregate(&mem, "t", AggregateOp::Mean, None).unwrap_err(),
            AnalysisError::NonNumeric("t".into())
        );
        assert_eq!(AggregateOp::parse("top_3", None).unwrap(), AggregateOp::TopK(3));
        assert!(AggregateOp::parse("median", None).is_err());
    }

    #[test]
    fn registry_dispatch_and_schema() {
        let reg = PluginRegistry::standard(Arc::new(FixtureSet::empty()), &[]).unwrap();
        let mem = InMemoryStore::new();
        assert_eq!(
            reg.invoke("nope", &Args::new(), &mem).unwrap_err(),
            PluginError::UnknownPlugin("nope".into())
        );
        assert!(matches!(
            reg.invoke("analysis.pearson", &args(&[("key_x", MemoryValue::text("a"))]), &mem),
            Err(PluginError::ArgSchemaViolation { .. })
        ));
        assert!(matches!(
            reg.invoke(
                "analysis.pearson",
                &args(&[
                    ("key_x", MemoryValue::text("a")),
                    ("key_y", MemoryValue::integer(1))
                ]),
                &mem
            ),
            Err(PluginError::ArgSchemaViolation { .. })
        ));
        assert!(matches!(
            reg.invoke("log_query", &args(&[("query", MemoryValue::text("T | take 1"))]), &mem),
            Err(PluginError::PluginFailure { .. })
        ));
    }

    #[test]
    fn descriptor_order_is_enforced() {
        struct Bad(PluginDescriptor);
        impl Plugin for Bad {
            fn descriptor(&self) -> &PluginDescriptor {
                &self.0
            }
            fn call(&self, _: &Args, _: &dyn Blackboard) -> Result<PluginResult, PluginError> {
                Ok(PluginResult::ok(""))
            }
        }
        let d = PluginDescriptor::new(
            "bad",
            "",
            vec![ParamSpec::optional("a", ParamKind::Text), ParamSpec::required("b", ParamKind::Text)],
            ResultContract::InlineScalar,
        );
        let mut reg = PluginRegistry::new();
        assert!(matches!(reg.register(Arc::new(Bad(d))), Err(PluginError::InvalidDescriptor(_))));
    }

    #[test]
    fn metric_plugin_filters_window() {
        let base = parse_timestamp("2024-05-01T00:00:00Z").unwrap();
        let columns = vec![
            Column { name: "timestamp".into(), ty: ColumnType::Timestamp },
            Column { name: "value".into(), ty: ColumnType::Decimal },
        ];
        let rows = (0..10)
            .map(|i| vec![Scalar::Timestamp(base + chrono::Duration::minutes(i)), Scalar::Decimal(i as f64)])
            .collect();
        let mut fixtures = FixtureSet::empty();
        fixtures.metrics.insert("availability".into(), Table::new(columns, rows).unwrap());
        let reg = PluginRegistry::standard(Arc::new(fixtures), &[]).unwrap();
        let mem = InMemoryStore::new();
        let res = reg
            .invoke(
                "metric_fetch",
                &args(&[
                    ("metric", MemoryValue::text("availability")),
                    ("from", MemoryValue::Scalar(Scalar::Timestamp(base + chrono::Duration::minutes(2)))),
                    ("to", MemoryValue::Scalar(Scalar::Timestamp(base + chrono::Duration::minutes(5)))),
                ]),
                &mem,
            )
            .unwrap();
        assert_eq!(res.refs.len(), 1);
        assert_eq!(res.refs[0].key, "plugin.metric_fetch.1");
        assert_eq!(res.refs[0].summary.rows, Some(4));
        assert!(res.inline.is_none());
    }

    #[test]
    fn qpp_plugin_prepares_queries() {
        let t = QueryTemplate::new("deploys", "kql", "D | where DeployRing == '{ring}'");
        let reg = PluginRegistry::standard(Arc::new(FixtureSet::empty()), &[t]).unwrap();
        let mem = InMemoryStore::new();
        let res = reg
            .invoke("qpp.deploys", &args(&[("ring", MemoryValue::text("test"))]), &mem)
            .unwrap();
        let Some(MemoryValue::Record(r)) = res.inline else { panic!() };
        assert_eq!(r["query"], Scalar::Text("D | where DeployRing == 'test'".into()));
    }

    #[test]
    fn binding_stems_are_filesystem_safe() {
        let b = BTreeMap::from([
            ("ring".to_string(), "test".to_string()),
            ("from".to_string(), "2024-01-01T00:00:00Z".to_string()),
        ]);
        assert_eq!(binding_stem("q1", &b), "q1@from=2024-01-01T00%3A00%3A00Z&ring=test");
        assert_eq!(query_hash("print 1").len(), 16);
    }
}

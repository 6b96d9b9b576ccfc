//! Blackboard memory shared by plugins and executors.
//!
//! Values are stored under string keys. Anything handed back to an executor
//! is a [`MemoryRef`] carrying a compact [`ContextSummary`] instead of the
//! payload itself.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_ROWS: usize = 3;
pub const DEFAULT_CONTEXT_BUDGET: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Scalar {
    Text(String),
    Integer(i64),
    Decimal(f64),
    Boolean(bool),
    Timestamp(DateTime<Utc>),
}

impl Scalar {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Scalar::Text(_) => ColumnType::Text,
            Scalar::Integer(_) => ColumnType::Integer,
            Scalar::Decimal(_) => ColumnType::Decimal,
            Scalar::Boolean(_) => ColumnType::Boolean,
            Scalar::Timestamp(_) => ColumnType::Timestamp,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Integer(i) => Some(*i as f64),
            Scalar::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Scalar::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Parses `text` as a cell of the given column type.
    pub fn parse_as(ty: ColumnType, text: &str) -> Option<Scalar> {
        Some(match ty {
            ColumnType::Text => Scalar::Text(text.to_string()),
            ColumnType::Integer => Scalar::Integer(text.trim().parse().ok()?),
            ColumnType::Decimal => Scalar::Decimal(text.trim().parse().ok()?),
            ColumnType::Boolean => Scalar::Boolean(text.trim().parse().ok()?),
            ColumnType::Timestamp => Scalar::Timestamp(parse_timestamp(text.trim())?),
        })
    }
}

pub fn parse_timestamp(text: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(text)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Text(s) => f.write_str(s),
            Scalar::Integer(i) => write!(f, "{i}"),
            Scalar::Decimal(d) => write!(f, "{d}"),
            Scalar::Boolean(b) => write!(f, "{b}"),
            Scalar::Timestamp(t) => f.write_str(&format_timestamp(t)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Text,
    Integer,
    Decimal,
    Timestamp,
    Boolean,
}

impl ColumnType {
    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnType::Integer | ColumnType::Decimal)
    }

    pub fn name(self) -> &'static str {
        match self {
            ColumnType::Text => "text",
            ColumnType::Integer => "integer",
            ColumnType::Decimal => "decimal",
            ColumnType::Timestamp => "timestamp",
            ColumnType::Boolean => "boolean",
        }
    }

    pub fn from_name(name: &str) -> Option<ColumnType> {
        Some(match name.trim() {
            "text" => ColumnType::Text,
            "integer" => ColumnType::Integer,
            "decimal" => ColumnType::Decimal,
            "timestamp" => ColumnType::Timestamp,
            "boolean" => ColumnType::Boolean,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

/// Row-major table with typed columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    columns: Vec<Column>,
    rows: Vec<Vec<Scalar>>,
}

#[derive(Deserialize)]
struct RawTable {
    columns: Vec<Column>,
    rows: Vec<Vec<Scalar>>,
}

impl TryFrom<RawTable> for Table {
    type Error = MemoryError;
    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.columns, raw.rows)
    }
}

impl Table {
    pub fn new(columns: Vec<Column>, rows: Vec<Vec<Scalar>>) -> Result<Table, MemoryError> {
        for (r, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(MemoryError::InvalidTable(format!(
                    "row {r} has {} cells, expected {}",
                    row.len(),
                    columns.len()
                )));
            }
            for (cell, col) in row.iter().zip(&columns) {
                if cell.column_type() != col.ty {
                    return Err(MemoryError::InvalidTable(format!(
                        "row {r} column `{}` holds {} but is declared {}",
                        col.name,
                        cell.column_type().name(),
                        col.ty.name()
                    )));
                }
            }
        }
        Ok(Table { columns, rows })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Scalar>] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_values(&self, idx: usize) -> impl Iterator<Item = &Scalar> {
        self.rows.iter().map(move |r| &r[idx])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Scalar,
    List,
    Record,
    Table,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Scalar => "scalar",
            ValueKind::List => "list",
            ValueKind::Record => "record",
            ValueKind::Table => "table",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum MemoryValue {
    Scalar(Scalar),
    List(Vec<Scalar>),
    Record(BTreeMap<String, Scalar>),
    Table(Table),
}

impl MemoryValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            MemoryValue::Scalar(_) => ValueKind::Scalar,
            MemoryValue::List(_) => ValueKind::List,
            MemoryValue::Record(_) => ValueKind::Record,
            MemoryValue::Table(_) => ValueKind::Table,
        }
    }

    /// Size of the serialized payload in bytes.
    pub fn byte_size(&self) -> usize {
        let len = match self {
            MemoryValue::Scalar(s) => serde_json::to_vec(s),
            MemoryValue::List(l) => serde_json::to_vec(l),
            MemoryValue::Record(r) => serde_json::to_vec(r),
            MemoryValue::Table(t) => serde_json::to_vec(t),
        };
        len.map(|v| v.len()).unwrap_or(0)
    }

    pub fn text(s: impl Into<String>) -> Self {
        MemoryValue::Scalar(Scalar::Text(s.into()))
    }

    pub fn decimal(d: f64) -> Self {
        MemoryValue::Scalar(Scalar::Decimal(d))
    }

    pub fn integer(i: i64) -> Self {
        MemoryValue::Scalar(Scalar::Integer(i))
    }

    /// Interprets a plain JSON literal: numbers, strings and booleans become
    /// scalars, arrays lists, objects records.
    pub fn from_literal(v: &serde_json::Value) -> Result<MemoryValue, MemoryError> {
        use serde_json::Value;
        fn scalar(v: &Value) -> Result<Scalar, MemoryError> {
            match v {
                Value::String(s) => Ok(Scalar::Text(s.clone())),
                Value::Bool(b) => Ok(Scalar::Boolean(*b)),
                Value::Number(n) => Ok(match n.as_i64() {
                    Some(i) => Scalar::Integer(i),
                    None => Scalar::Decimal(n.as_f64().unwrap_or(f64::NAN)),
                }),
                other => Err(MemoryError::InvalidLiteral(other.to_string())),
            }
        }
        match v {
            Value::Array(items) => Ok(MemoryValue::List(
                items.iter().map(scalar).collect::<Result<_, _>>()?,
            )),
            Value::Object(map) => Ok(MemoryValue::Record(
                map.iter()
                    .map(|(k, v)| Ok((k.clone(), scalar(v)?)))
                    .collect::<Result<_, MemoryError>>()?,
            )),
            other => Ok(MemoryValue::Scalar(scalar(other)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("invalid memory key {0:?}")]
    InvalidKey(String),
    #[error("memory key not found: {0}")]
    KeyNotFound(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("invalid value literal: {0}")]
    InvalidLiteral(String),
    #[error("memory log: {0}")]
    Io(String),
    #[error("memory log corrupt at byte {0}")]
    Corrupt(u64),
}

impl From<io::Error> for MemoryError {
    fn from(e: io::Error) -> Self {
        MemoryError::Io(e.to_string())
    }
}

pub fn validate_key(key: &str) -> Result<(), MemoryError> {
    if key.is_empty() || key.chars().any(char::is_control) {
        return Err(MemoryError::InvalidKey(key.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub key: String,
    pub kind: ValueKind,
    pub rows: Option<usize>,
    pub columns: Option<usize>,
    pub schema: Vec<Column>,
    /// Sample rows (tables) as rendered cell text; empty for other kinds.
    pub sample: Vec<Vec<String>>,
    pub text: String,
    pub rendered_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRef {
    pub key: String,
    pub kind: ValueKind,
    pub summary: ContextSummary,
}

impl MemoryRef {
    pub fn new(key: &str, value: &MemoryValue) -> MemoryRef {
        MemoryRef {
            key: key.to_string(),
            kind: value.kind(),
            summary: render_context(key, value, DEFAULT_SAMPLE_ROWS, DEFAULT_CONTEXT_BUDGET),
        }
    }
}

const ELLIPSIS: &str = "…";

fn cap_text(text: &str, cap: Option<usize>) -> String {
    match cap {
        Some(cap) if text.chars().count() > cap => {
            let mut s: String = text.chars().take(cap).collect();
            s.push_str(ELLIPSIS);
            s
        }
        _ => text.to_string(),
    }
}

/// Cuts `text` to at most `budget` bytes on a char boundary.
fn clamp(mut text: String, budget: usize) -> String {
    if text.len() <= budget {
        return text;
    }
    let dropped = text.len();
    let marker = format!("{ELLIPSIS} +{dropped} bytes more");
    let keep = budget.saturating_sub(marker.len());
    let mut cut = keep;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text.truncate(cut);
    if text.len() + marker.len() <= budget {
        text.push_str(&marker);
    }
    text
}

fn render_table(key: &str, table: &Table, sample_rows: usize, budget: usize) -> (String, Vec<Vec<String>>) {
    let n_rows = table.rows.len();
    let n_cols = table.columns.len();
    let shown_rows = sample_rows.min(n_rows);
    let header = format!("key={key} kind=table rows={n_rows} cols={n_cols}\n");

    let attempt = |cap: Option<usize>, cols: usize| -> (String, Vec<Vec<String>>) {
        let more = |k: usize| {
            if k > 0 {
                format!(" | {ELLIPSIS} +{k} more")
            } else {
                String::new()
            }
        };
        let mut out = header.clone();
        let schema: Vec<String> = table.columns[..cols]
            .iter()
            .map(|c| format!("{}:{}", cap_text(&c.name, cap), c.ty.name()))
            .collect();
        out.push_str(&format!("schema: {}{}\n", schema.join(" | "), more(n_cols - cols)));
        let mut sample = Vec::with_capacity(shown_rows);
        for row in &table.rows[..shown_rows] {
            let cells: Vec<String> = row[..cols]
                .iter()
                .map(|c| cap_text(&c.to_string(), cap))
                .collect();
            out.push_str(&format!("| {}{}\n", cells.join(" | "), more(n_cols - cols)));
            sample.push(cells);
        }
        if n_rows > shown_rows {
            out.push_str(&format!("{ELLIPSIS} +{} more rows\n", n_rows - shown_rows));
        }
        (out, sample)
    };

    const CAPS: [Option<usize>; 5] = [None, Some(48), Some(24), Some(12), Some(6)];
    for cap in CAPS {
        let r = attempt(cap, n_cols);
        if r.0.len() <= budget {
            return r;
        }
    }
    for cols in (1..n_cols).rev() {
        let r = attempt(Some(6), cols);
        if r.0.len() <= budget {
            return r;
        }
    }
    let (text, sample) = attempt(Some(6), n_cols.min(1));
    (clamp(text, budget), sample)
}

fn render_items(prefix: String, items: Vec<String>, budget: usize) -> String {
    let total = items.len();
    for cap in [None, Some(48), Some(12)] {
        let mut out = prefix.clone();
        let mut shown = 0;
        for item in &items {
            let piece = cap_text(item, cap);
            // Keep room for the trailing marker.
            if out.len() + piece.len() + 2 + 32 > budget {
                break;
            }
            if shown > 0 {
                out.push_str(", ");
            }
            out.push_str(&piece);
            shown += 1;
        }
        if shown == total || cap == Some(12) {
            if shown < total {
                out.push_str(&format!(" {ELLIPSIS} +{} more", total - shown));
            }
            out.push('\n');
            return clamp(out, budget);
        }
    }
    unreachable!()
}

/// Compact textual rendering of a value for executor context.
///
/// Tables render a header, their schema and the first `sample_rows` rows.
/// The result never exceeds `budget` bytes: cell texts are shortened first,
/// then columns are dropped from the right, each elision marked with
/// `… +k more`.
pub fn render_context(key: &str, value: &MemoryValue, sample_rows: usize, budget: usize) -> ContextSummary {
    let (text, rows, columns, schema, sample) = match value {
        MemoryValue::Table(t) => {
            let (text, sample) = render_table(key, t, sample_rows, budget);
            (
                text,
                Some(t.rows.len()),
                Some(t.columns.len()),
                t.columns.clone(),
                sample,
            )
        }
        MemoryValue::Scalar(s) => {
            let text = format!(
                "key={key} kind=scalar type={}\nvalue: {}\n",
                s.column_type().name(),
                s
            );
            let text = if text.len() > budget {
                let head = format!("key={key} kind=scalar type={}\nvalue: ", s.column_type().name());
                let room = budget.saturating_sub(head.len() + 1);
                clamp(format!("{head}{}\n", clamp(s.to_string(), room)), budget)
            } else {
                text
            };
            (text, None, None, vec![], vec![])
        }
        MemoryValue::List(items) => {
            let prefix = format!("key={key} kind=list len={}\nvalues: ", items.len());
            let text = render_items(prefix, items.iter().map(ToString::to_string).collect(), budget);
            (text, None, None, vec![], vec![])
        }
        MemoryValue::Record(fields) => {
            let prefix = format!("key={key} kind=record fields={}\n", fields.len());
            let text = render_items(
                prefix,
                fields.iter().map(|(k, v)| format!("{k}={v}")).collect(),
                budget,
            );
            (text, None, None, vec![], vec![])
        }
    };
    let text = clamp(text, budget);
    ContextSummary {
        key: key.to_string(),
        kind: value.kind(),
        rows,
        columns,
        schema,
        sample,
        rendered_bytes: text.len(),
        text,
    }
}

/// Keyed store interface shared by plugins, executors and the engine.
///
/// Implementations must be safe for concurrent use; `put`/`get` on one key
/// are atomic.
pub trait Blackboard: Send + Sync {
    fn put(&self, key: &str, value: MemoryValue) -> Result<MemoryRef, MemoryError>;
    fn get(&self, key: &str) -> Result<MemoryValue, MemoryError>;
    fn contains(&self, key: &str) -> bool;
    fn keys(&self) -> Vec<String>;
    /// Returns `<prefix>.<n>` with `n` increasing per prefix, starting at 1.
    fn fresh_key(&self, prefix: &str) -> String;
}

#[derive(Default)]
struct Counters(Mutex<HashMap<String, u64>>);

impl Counters {
    fn next(&self, prefix: &str) -> String {
        let mut map = self.0.lock().unwrap();
        let n = map.entry(prefix.to_string()).or_insert(0);
        *n += 1;
        format!("{prefix}.{n}")
    }
}

#[derive(Default)]
pub struct InMemoryStore {
    values: RwLock<BTreeMap<String, MemoryValue>>,
    counters: Counters,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Blackboard for InMemoryStore {
    fn put(&self, key: &str, value: MemoryValue) -> Result<MemoryRef, MemoryError> {
        validate_key(key)?;
        let r = MemoryRef::new(key, &value);
        self.values.write().unwrap().insert(key.to_string(), value);
        Ok(r)
    }

    fn get(&self, key: &str) -> Result<MemoryValue, MemoryError> {
        self.values
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| MemoryError::KeyNotFound(key.to_string()))
    }

    fn contains(&self, key: &str) -> bool {
        self.values.read().unwrap().contains_key(key)
    }

    fn keys(&self) -> Vec<String> {
        self.values.read().unwrap().keys().cloned().collect()
    }

    fn fresh_key(&self, prefix: &str) -> String {
        self.counters.next(prefix)
    }
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    key: String,
    value: MemoryValue,
}

/// Append-log store: every put is one length-prefixed JSON record
/// (`u32` little-endian length, then the bytes). Reopening replays the log.
pub struct FileStore {
    path: PathBuf,
    log: Mutex<File>,
    values: RwLock<BTreeMap<String, MemoryValue>>,
    counters: Counters,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> Result<FileStore, MemoryError> {
        let path = path.as_ref().to_path_buf();
        let mut values = BTreeMap::new();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            let mut pos = 0usize;
            while pos < bytes.len() {
                let header = bytes
                    .get(pos..pos + 4)
                    .ok_or(MemoryError::Corrupt(pos as u64))?;
                let len = u32::from_le_bytes(header.try_into().unwrap()) as usize;
                let body = bytes
                    .get(pos + 4..pos + 4 + len)
                    .ok_or(MemoryError::Corrupt(pos as u64))?;
                let rec: LogRecord =
                    serde_json::from_slice(body).map_err(|_| MemoryError::Corrupt(pos as u64))?;
                values.insert(rec.key, rec.value);
                pos += 4 + len;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(FileStore {
            path,
            log: Mutex::new(log),
            values: RwLock::new(values),
            counters: Counters::default(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Blackboard for FileStore {
    fn put(&self, key: &str, value: MemoryValue) -> Result<MemoryRef, MemoryError> {
        validate_key(key)?;
        let body = serde_json::to_vec(&LogRecord {
            key: key.to_string(),
            value,
        })
        .map_err(|e| MemoryError::Io(e.to_string()))?;
        let len = u32::try_from(body.len()).map_err(|_| MemoryError::Io("record too large".into()))?;
        let rec: LogRecord = serde_json::from_slice(&body).expect("round trip");
        let r = MemoryRef::new(key, &rec.value);
        // Hold the log lock across the map update so replay order matches.
        let mut log = self.log.lock().unwrap();
        log.write_all(&len.to_le_bytes())?;
        log.write_all(&body)?;
        log.flush()?;
        self.values.write().unwrap().insert(rec.key, rec.value);
        Ok(r)
    }

    fn get(&self, key: &str) -> Result<MemoryValue, MemoryError> {
        self.values
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| MemoryError::KeyNotFound(key.to_string()))
    }

    fn contains(&self, key: &str) -> bool {
        self.values.read().unwrap().contains_key(key)
    }

    fn keys(&self) -> Vec<String> {
        self.values.read().unwrap().keys().cloned().collect()
    }

    fn fresh_key(&self, prefix: &str) -> String {
        self.counters.next(prefix)
    }
}

/// View of a shared store restricted to one run; keys are stored as
/// `<run_id>/<key>` underneath.
pub struct RunScope {
    inner: Arc<dyn Blackboard>,
    run_id: String,
    counters: Counters,
}

impl RunScope {
    pub fn new(inner: Arc<dyn Blackboard>, run_id: impl Into<String>) -> RunScope {
        RunScope {
            inner,
            run_id: run_id.into(),
            counters: Counters::default(),
        }
    }

    fn scoped(&self, key: &str) -> String {
        format!("{}/{}", self.run_id, key)
    }
}

impl Blackboard for RunScope {
    fn put(&self, key: &str, value: MemoryValue) -> Result<MemoryRef, MemoryError> {
        validate_key(key)?;
        let r = MemoryRef::new(key, &value);
        self.inner.put(&self.scoped(key), value)?;
        Ok(r)
    }

    fn get(&self, key: &str) -> Result<MemoryValue, MemoryError> {
        self.inner
            .get(&self.scoped(key))
            .map_err(|_| MemoryError::KeyNotFound(key.to_string()))
    }

    fn contains(&self, key: &str) -> bool {
        self.inner.contains(&self.scoped(key))
    }

    fn keys(&self) -> Vec<String> {
        let prefix = format!("{}/", self.run_id);
        self.inner
            .keys()
            .into_iter()
            .filter_map(|k| k.strip_prefix(&prefix).map(str::to_string))
            .collect()
    }

    fn fresh_key(&self, prefix: &str) -> String {
        self.counters.next(prefix)
    }
}

/// Reads a CSV table. The header row names the columns; `types` is the
/// sidecar type line (comma-separated column types). Without it, each
/// column takes the narrowest type that parses every cell.
pub fn table_from_csv(csv_text: &str, types: Option<&str>) -> Result<Table, MemoryError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| MemoryError::InvalidTable(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut raw = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| MemoryError::InvalidTable(e.to_string()))?;
        raw.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let types: Vec<ColumnType> = match types {
        Some(line) => {
            let ts: Vec<ColumnType> = line
                .trim()
                .split(',')
                .map(|t| {
                    ColumnType::from_name(t)
                        .ok_or_else(|| MemoryError::InvalidTable(format!("unknown column type `{t}`")))
                })
                .collect::<Result<_, _>>()?;
            if ts.len() != names.len() {
                return Err(MemoryError::InvalidTable(format!(
                    "type line lists {} types for {} columns",
                    ts.len(),
                    names.len()
                )));
            }
            ts
        }
        None => (0..names.len()).map(|c| infer_type(raw.iter().map(|r| r[c].as_str()))).collect(),
    };
    let columns: Vec<Column> = names
        .into_iter()
        .zip(&types)
        .map(|(name, &ty)| Column { name, ty })
        .collect();
    let rows = raw
        .iter()
        .enumerate()
        .map(|(r, cells)| {
            cells
                .iter()
                .zip(&types)
                .map(|(cell, &ty)| {
                    Scalar::parse_as(ty, cell).ok_or_else(|| {
                        MemoryError::InvalidTable(format!("row {r}: `{cell}` is not {}", ty.name()))
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Table::new(columns, rows)
}

fn infer_type<'a>(cells: impl Iterator<Item = &'a str> + Clone) -> ColumnType {
    for ty in [
        ColumnType::Integer,
        ColumnType::Decimal,
        ColumnType::Boolean,
        ColumnType::Timestamp,
    ] {
        let mut any = false;
        if cells.clone().all(|c| {
            any = true;
            Scalar::parse_as(ty, c).is_some()
        }) && any
        {
            return ty;
        }
    }
    ColumnType::Text
}

/// Writes the CSV body and returns it with its type line.
pub fn table_to_csv(table: &Table) -> (String, String) {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(table.columns.iter().map(|c| c.name.as_str()))
        .expect("in-memory write");
    for row in &table.rows {
        w.write_record(row.iter().map(ToString::to_string))
            .expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
    let types: Vec<&str> = table.columns.iter().map(|c| c.ty.name()).collect();
    (body, types.join(","))
}

/// Sidecar path holding the type line of `csv_path` (`x.csv` → `x.types`).
pub fn types_sidecar(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("types")
}

pub fn read_table_file(csv_path: &Path) -> Result<Table, MemoryError> {
    let body = std::fs::read_to_string(csv_path)?;
    let sidecar = types_sidecar(csv_path);
    let types = if sidecar.exists() {
        Some(std::fs::read_to_string(sidecar)?)
    } else {
        None
    };
    table_from_csv(&body, types.as_deref())
}

pub fn write_table_file(csv_path: &Path, table: &Table) -> Result<(), MemoryError> {
    let (body, types) = table_to_csv(table);
    std::fs::write(csv_path, body)?;
    std::fs::write(types_sidecar(csv_path), format!("{types}\n"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide_table(rows: usize) -> Table {
        let columns = vec![
            Column { name: "timestamp".into(), ty: ColumnType::Timestamp },
            Column { name: "exception_type".into(), ty: ColumnType::Text },
            Column { name: "count".into(), ty: ColumnType::Integer },
            Column { name: "ratio".into(), ty: ColumnType::Decimal },
            Column { name: "region".into(), ty: ColumnType::Text },
            Column { name: "is_new".into(), ty: ColumnType::Boolean },
        ];
        let base = parse_timestamp("2024-05-01T00:00:00Z").unwrap();
        let rows = (0..rows)
            .map(|i| {
                vec![
                    Scalar::Timestamp(base + chrono::Duration::minutes(i as i64)),
                    Scalar::Text(format!("System.TimeoutException.Variant{}", i % 17)),
                    Scalar::Integer((i * 7 % 101) as i64),
                    Scalar::Decimal(i as f64 / 3.0),
                    Scalar::Text(format!("region-{}", i % 5)),
                    Scalar::Boolean(i % 2 == 0),
                ]
            })
            .collect();
        Table::new(columns, rows).unwrap()
    }

    #[test]
    fn put_get_round_trip_and_overwrite() {
        let store = InMemoryStore::new();
        let r = store.put("avail_A", MemoryValue::decimal(99.9)).unwrap();
        assert_eq!(r.kind, ValueKind::Scalar);
        assert_eq!(store.get("avail_A").unwrap(), MemoryValue::decimal(99.9));
        store.put("avail_A", MemoryValue::decimal(42.0)).unwrap();
        assert_eq!(store.get("avail_A").unwrap(), MemoryValue::decimal(42.0));
        assert_eq!(
            store.get("missing").unwrap_err(),
            MemoryError::KeyNotFound("missing".into())
        );
        assert!(matches!(
            store.put("", MemoryValue::integer(1)).unwrap_err(),
            MemoryError::InvalidKey(_)
        ));
        assert!(matches!(
            store.put("a\nb", MemoryValue::integer(1)).unwrap_err(),
            MemoryError::InvalidKey(_)
        ));
    }

    #[test]
    fn table_arity_and_types_are_checked() {
        let cols = vec![Column { name: "a".into(), ty: ColumnType::Integer }];
        assert!(Table::new(cols.clone(), vec![vec![]]).is_err());
        assert!(Table::new(cols.clone(), vec![vec![Scalar::Text("x".into())]]).is_err());
        assert!(Table::new(cols, vec![vec![Scalar::Integer(1)]]).is_ok());
    }

    #[test]
    fn large_table_summary_fits_budget() {
        let table = MemoryValue::Table(wide_table(394));
        assert!(table.byte_size() >= 25_000, "{}", table.byte_size());
        let s = render_context("exceptions", &table, 3, 2048);
        assert!(s.rendered_bytes <= 2048);
        assert_eq!(s.sample.len(), 3);
        assert_eq!(s.rows, Some(394));
        assert_eq!(s.columns, Some(6));
        assert_eq!(s.schema.len(), 6);
        assert!(s.text.starts_with("key=exceptions kind=table rows=394 cols=6\n"));
    }

    #[test]
    fn empty_table_renders_schema_only() {
        let t = Table::new(vec![Column { name: "a".into(), ty: ColumnType::Text }], vec![]).unwrap();
        let s = render_context("e", &MemoryValue::Table(t), 3, 2048);
        assert!(s.sample.is_empty());
        assert_eq!(s.text, "key=e kind=table rows=0 cols=1\nschema: a:text\n");
    }

    #[test]
    fn long_strings_are_truncated_within_budget() {
        let rows = (0..10_000)
            .map(|i| vec![Scalar::Text(format!("{i}-{}", "x".repeat(3000)))])
            .collect();
        let t = Table::new(vec![Column { name: "blob".into(), ty: ColumnType::Text }], rows).unwrap();
        let s = render_context("blobs", &MemoryValue::Table(t), 3, 2048);
        assert!(s.rendered_bytes <= 2048);
        assert_eq!(s.rendered_bytes, s.text.len());
        assert!(s.text.contains(ELLIPSIS));
        assert_eq!(s.sample.len(), 3);
    }

    #[test]
    fn many_columns_are_dropped_right_to_left() {
        let columns: Vec<Column> = (0..400)
            .map(|i| Column { name: format!("column_{i}"), ty: ColumnType::Integer })
            .collect();
        let rows = vec![(0..400).map(Scalar::Integer).collect()];
        let t = Table::new(columns, rows).unwrap();
        let s = render_context("wide", &MemoryValue::Table(t), 3, 2048);
        assert!(s.rendered_bytes <= 2048);
        assert!(s.text.contains("more"));
        assert!(s.text.contains("column"));
    }

    #[test]
    fn lists_and_records_render_within_budget() {
        let list = MemoryValue::List((0..5000).map(Scalar::Integer).collect());
        let s = render_context("l", &list, 3, 256);
        assert!(s.rendered_bytes <= 256);
        assert!(s.text.contains("more"));
        let small = MemoryValue::List(vec![Scalar::Integer(1), Scalar::Integer(2)]);
        assert_eq!(render_context("s", &small, 3, 256).text, "key=s kind=list len=2\nvalues: 1, 2\n");
        let huge = MemoryValue::text("y".repeat(10_000));
        assert!(render_context("h", &huge, 3, 128).rendered_bytes <= 128);
    }

    #[test]
    fn file_store_replays_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.log");
        {
            let store = FileStore::open(&path).unwrap();
            store.put("a", MemoryValue::integer(1)).unwrap();
            store.put("t", MemoryValue::Table(wide_table(5))).unwrap();
            store.put("a", MemoryValue::integer(2)).unwrap();
        }
        let store = FileStore::open(&path).unwrap();
        assert_eq!(store.get("a").unwrap(), MemoryValue::integer(2));
        assert_eq!(store.get("t").unwrap(), MemoryValue::Table(wide_table(5)));
        assert_eq!(store.keys(), vec!["a".to_string(), "t".to_string()]);
    }

    #[test]
    fn truncated_log_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.log");
        FileStore::open(&path).unwrap().put("a", MemoryValue::integer(1)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let whole = bytes.len() as u64;
        bytes.extend_from_slice(&[9, 0, 0, 0, b'{']);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(FileStore::open(&path), Err(MemoryError::Corrupt(p)) if p == whole));
    }

    #[test]
    fn run_scopes_do_not_collide() {
        let shared: Arc<dyn Blackboard> = Arc::new(InMemoryStore::new());
        let a = RunScope::new(shared.clone(), "run-a");
        let b = RunScope::new(shared.clone(), "run-b");
        a.put("x", MemoryValue::integer(1)).unwrap();
        b.put("x", MemoryValue::integer(2)).unwrap();
        assert_eq!(a.get("x").unwrap(), MemoryValue::integer(1));
        assert_eq!(b.get("x").unwrap(), MemoryValue::integer(2));
        assert_eq!(a.keys(), vec!["x".to_string()]);
        assert_eq!(shared.keys().len(), 2);
        assert_eq!(a.fresh_key("plugin.log_query"), "plugin.log_query.1");
        assert_eq!(a.fresh_key("plugin.log_query"), "plugin.log_query.2");
    }

    #[test]
    fn csv_round_trip_with_sidecar() {
        let t = wide_table(4);
        let (body, types) = table_to_csv(&t);
        assert_eq!(types, "timestamp,text,integer,decimal,text,boolean");
        assert_eq!(table_from_csv(&body, Some(&types)).unwrap(), t);
        let inferred = table_from_csv("a,b,c\n1,2.5,x\n2,3,y\n", None).unwrap();
        let tys: Vec<ColumnType> = inferred.columns().iter().map(|c| c.ty).collect();
        assert_eq!(tys, vec![ColumnType::Integer, ColumnType::Decimal, ColumnType::Text]);
    }

    #[test]
    fn literals() {
        use serde_json::json;
        assert_eq!(MemoryValue::from_literal(&json!(3)).unwrap(), MemoryValue::integer(3));
        assert_eq!(MemoryValue::from_literal(&json!(2.5)).unwrap(), MemoryValue::decimal(2.5));
        assert_eq!(
            MemoryValue::from_literal(&json!([1, "a"])).unwrap(),
            MemoryValue::List(vec![Scalar::Integer(1), Scalar::Text("a".into())])
        );
        assert!(MemoryValue::from_literal(&json!([[1]])).is_err());
    }
}

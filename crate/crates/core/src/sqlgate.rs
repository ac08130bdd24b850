//! Read-only SQL execution against SQLite files, observation rendering and result equality.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::OpenFlags;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_ROW_CAP: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("database file {0} does not exist")]
    Missing(PathBuf),
    #[error("cannot open database {path}: {message}")]
    Open { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(f) => Value::Real(f),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }

    fn display(&self) -> String {
        match self {
            Value::Null => "NULL".to_string(),
            Value::Integer(i) => i.to_string(),
            Value::Real(f) => format!("{f:?}"),
            Value::Text(s) => s.replace('\r', "\\r").replace('\n', "\\n"),
            Value::Blob(b) => format!("<blob {} bytes>", b.len()),
        }
    }

    fn canonical(&self) -> CanonValue {
        match self {
            Value::Null => CanonValue::Null,
            Value::Integer(i) => CanonValue::Int(*i),
            Value::Real(f) => {
                if f.fract() == 0.0 && *f >= i64::MIN as f64 && *f < i64::MAX as f64 {
                    CanonValue::Int(*f as i64)
                } else {
                    CanonValue::Real(f.to_bits())
                }
            }
            Value::Text(s) => CanonValue::Text(s.clone()),
            Value::Blob(b) => CanonValue::Blob(b.clone()),
        }
    }
}

/// Comparison key: integer-valued reals fold onto integers, everything else compares exactly.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum CanonValue {
    Null,
    Int(i64),
    Real(u64),
    Text(String),
    Blob(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: Status,
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub error_message: Option<String>,
    pub truncated: bool,
}

impl ExecutionResult {
    pub fn ok(column_names: Vec<String>, rows: Vec<Vec<Value>>) -> Self {
        Self {
            status: Status::Ok,
            column_names,
            rows,
            error_message: None,
            truncated: false,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self {
            status: Status::Error,
            column_names: Vec::new(),
            rows: Vec::new(),
            error_message: Some(message.into()),
            truncated: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    fn canonical_rows(&self) -> Vec<Vec<CanonValue>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(Value::canonical).collect())
            .collect()
    }
}

/// A database file that queries may be run against. Cheap to clone; each worker calls
/// [`Database::connect`] for its own connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Database {
    path: PathBuf,
}

impl Database {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GateError> {
        let path = path.as_ref().to_path_buf();
        if !path.is_file() {
            return Err(GateError::Missing(path));
        }
        let db = Self { path };
        db.connect()?;
        Ok(db)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn connect(&self) -> Result<Connection, GateError> {
        let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX;
        let open_err = |e: rusqlite::Error| GateError::Open {
            path: self.path.clone(),
            message: e.to_string(),
        };
        let conn = rusqlite::Connection::open_with_flags(&self.path, flags).map_err(open_err)?;
        conn.pragma_update(None, "query_only", true).map_err(open_err)?;
        // Forces the header to be read so a non-database file fails here, not on first query.
        conn.query_row("SELECT count(*) FROM sqlite_master", [], |_| Ok(()))
            .map_err(open_err)?;
        Ok(Connection { conn })
    }
}

/// A read-only connection owned by one worker.
pub struct Connection {
    conn: rusqlite::Connection,
}

impl Connection {
    pub(crate) fn raw(&self) -> &rusqlite::Connection {
        &self.conn
    }

    /// Runs one statement. `row_cap` of `None` returns every row. Engine errors, including
    /// timeouts, come back as `Status::Error` results rather than Rust errors.
    pub fn execute(&self, sql: &str, row_cap: Option<NonZeroUsize>, timeout: Duration) -> ExecutionResult {
        let deadline = Instant::now() + timeout;
        self.conn
            .progress_handler(1_000, Some(move || Instant::now() > deadline));
        let result = self.run(sql, row_cap);
        self.conn.progress_handler(1_000, None::<fn() -> bool>);
        match result {
            Ok(r) => r,
            Err(e) => {
                if matches!(
                    e.sqlite_error_code(),
                    Some(rusqlite::ErrorCode::OperationInterrupted)
                ) {
                    ExecutionResult::error(format!(
                        "query timed out after {:.1}s",
                        timeout.as_secs_f64()
                    ))
                } else {
                    ExecutionResult::error(engine_message(&e))
                }
            }
        }
    }

    fn run(&self, sql: &str, row_cap: Option<NonZeroUsize>) -> rusqlite::Result<ExecutionResult> {
        let mut stmt = self.conn.prepare(sql)?;
        let column_names: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let width = column_names.len();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        let mut truncated = false;
        while let Some(row) = rows.next()? {
            if row_cap.is_some_and(|cap| out.len() == cap.get()) {
                truncated = true;
                break;
            }
            let mut values = Vec::with_capacity(width);
            for i in 0..width {
                values.push(Value::from_ref(row.get_ref(i)?));
            }
            out.push(values);
        }
        let mut result = ExecutionResult::ok(column_names, out);
        result.truncated = truncated;
        Ok(result)
    }
}

fn engine_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    }
}

/// Free-function form of [`Connection::execute`].
pub fn execute(sql: &str, db: &Connection, row_cap: Option<NonZeroUsize>, timeout: Duration) -> ExecutionResult {
    db.execute(sql, row_cap, timeout)
}

/// Renders a result as the text placed inside an `<observation>` block.
pub fn render_observation(result: &ExecutionResult) -> String {
    if !result.is_ok() {
        return format!(
            "Error: {}",
            result.error_message.as_deref().unwrap_or("unknown error")
        );
    }
    if result.column_names.is_empty() {
        return "Query executed successfully with no result columns.".to_string();
    }
    let cells: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| r.iter().map(Value::display).collect())
        .collect();
    let widths: Vec<usize> = result
        .column_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            cells
                .iter()
                .map(|r| r[i].chars().count())
                .chain(std::iter::once(name.chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let border = {
        let mut s = String::from("+");
        for w in &widths {
            s.push_str(&"-".repeat(w + 2));
            s.push('+');
        }
        s
    };
    let line = |items: &[String]| {
        let mut s = String::from("|");
        for (item, w) in items.iter().zip(&widths) {
            let pad = w - item.chars().count();
            s.push(' ');
            s.push_str(item);
            s.push_str(&" ".repeat(pad + 1));
            s.push('|');
        }
        s
    };
    let mut out = vec![border.clone(), line(&result.column_names), border.clone()];
    for row in &cells {
        out.push(line(row));
    }
    out.push(border);
    if result.truncated {
        out.push(format!(
            "(result truncated to the first {} rows)",
            result.rows.len()
        ));
    }
    out.join("\n")
}

/// Execution-result equality. Errors never compare equal; column names are ignored.
pub fn results_equal(a: &ExecutionResult, b: &ExecutionResult, order_sensitive: bool) -> bool {
    if !a.is_ok() || !b.is_ok() || a.rows.len() != b.rows.len() {
        return false;
    }
    let mut ra = a.canonical_rows();
    let mut rb = b.canonical_rows();
    if !order_sensitive {
        ra.sort();
        rb.sort();
    }
    ra == rb
}

/// True when `sql` has an `ORDER BY` outside every parenthesised subexpression.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut depth = 0i32;
    let mut i = 0;
    let mut prev_word: Option<String> = None;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\'' | b'"' | b'`' | b'[' => {
                let close = if c == b'[' { b']' } else { c };
                i += 1;
                while i < bytes.len() && bytes[i] != close {
                    i += 1;
                }
                i += 1;
                prev_word = None;
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 2;
            }
            b'(' => {
                depth += 1;
                i += 1;
                prev_word = None;
            }
            b')' => {
                depth -= 1;
                i += 1;
                prev_word = None;
            }
            c if c.is_ascii_alphanumeric() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = sql[start..i].to_ascii_uppercase();
                if depth == 0 && word == "BY" && prev_word.as_deref() == Some("ORDER") {
                    return true;
                }
                prev_word = Some(word);
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                i += 1;
                prev_word = None;
            }
        }
    }
    false
}

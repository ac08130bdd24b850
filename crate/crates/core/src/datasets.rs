//! Benchmark ingestion, schema introspection and grounding-instance expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use tracing::warn;

use crate::grounding::{extract_gold_schema, GoldSchemaLabel};
use crate::schema::{Schema, TableDef};
use crate::sqlgate::{Database, GateError};
use crate::task::Task;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: expected a JSON array of task records: {message}")]
    NotAnArray { path: PathBuf, message: String },
    #[error("record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("database {path} is corrupt or unreadable: {message}")]
    CorruptDatabase { path: PathBuf, message: String },
}

/// A record that was dropped during loading, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub tasks: Vec<Task>,
    pub rejected: Vec<Rejection>,
}

/// Path of a database in the `db_root/<db_id>/<db_id>.sqlite` layout.
pub fn database_path(db_root: &Path, db_id: &str) -> PathBuf {
    db_root.join(db_id).join(format!("{db_id}.sqlite"))
}

fn text_field<'a>(record: &'a Json, names: &[&str]) -> Option<&'a str> {
    names
        .iter()
        .find_map(|n| record.get(*n).and_then(Json::as_str))
}

fn parse_record(index: usize, record: &Json) -> Result<Task, DatasetError> {
    let malformed = |reason: &str| DatasetError::MalformedRecord {
        index,
        reason: reason.to_string(),
    };
    if !record.is_object() {
        return Err(malformed("not a JSON object"));
    }
    let question = text_field(record, &["question"]).ok_or_else(|| malformed("missing `question`"))?;
    let db_id = text_field(record, &["db_id"]).ok_or_else(|| malformed("missing `db_id`"))?;
    let id = match record.get("question_id").or_else(|| record.get("id")) {
        Some(Json::String(s)) => s.clone(),
        Some(Json::Number(n)) => n.to_string(),
        _ => index.to_string(),
    };
    let mut task = Task::new(id, question, db_id);
    if let Some(k) = text_field(record, &["evidence", "external_knowledge"]) {
        task = task.with_knowledge(k);
    }
    if let Some(sql) = text_field(record, &["SQL", "query", "gold_sql"]) {
        task = task.with_gold(sql);
    }
    Ok(task)
}

/// Loads a JSON array of task records and resolves each database under `db_root`.
pub fn load_benchmark(tasks_path: &Path, db_root: &Path) -> Result<Benchmark, DatasetError> {
    let text = std::fs::read_to_string(tasks_path).map_err(|source| DatasetError::Io {
        path: tasks_path.to_path_buf(),
        source,
    })?;
    parse_benchmark(&text, tasks_path, db_root)
}

fn parse_benchmark(text: &str, tasks_path: &Path, db_root: &Path) -> Result<Benchmark, DatasetError> {
    let records: Vec<Json> = serde_json::from_str(text).map_err(|e| DatasetError::NotAnArray {
        path: tasks_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut tasks = Vec::new();
    let mut rejected = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let task = parse_record(index, record)?;
        let path = database_path(db_root, &task.db_id);
        if path.is_file() {
            tasks.push(task.with_db_path(path));
        } else {
            warn!(task = %task.id, path = %path.display(), "database missing; task rejected");
            rejected.push(Rejection {
                index,
                task_id: task.id.clone(),
                reason: format!("database file {} not found", path.display()),
            });
        }
    }
    Ok(Benchmark { tasks, rejected })
}

/// Reads a newline-delimited list of task ids; blank lines and `#` comments are ignored.
pub fn load_exclusions(path: &Path) -> Result<BTreeSet<String>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn apply_exclusions(tasks: Vec<Task>, excluded: &BTreeSet<String>) -> Vec<Task> {
    tasks.into_iter().filter(|t| !excluded.contains(&t.id)).collect()
}

/// Reads tables, declared column types, primary keys and foreign keys in catalog order.
/// Foreign keys whose target does not exist are dropped with a warning.
pub fn introspect_schema(db_id: &str, db: &Database) -> Result<Schema, DatasetError> {
    let corrupt = |message: String| DatasetError::CorruptDatabase {
        path: db.path().to_path_buf(),
        message,
    };
    let conn = db.connect().map_err(|e| corrupt(e.to_string()))?;
    let raw = conn.raw();
    let sql_err = |e: rusqlite::Error| corrupt(e.to_string());

    let mut stmt = raw
        .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
        .map_err(sql_err)?;
    let names: Vec<String> = stmt
        .query_map([], |r| r.get(0))
        .map_err(sql_err)?
        .collect::<Result<_, _>>()
        .map_err(sql_err)?;

    let mut tables = Vec::new();
    for name in &names {
        let mut table = TableDef::new(name.as_str());
        let mut cols = raw
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")
            .map_err(sql_err)?;
        let rows: Vec<(String, String, i64)> = cols
            .query_map([name], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))
            .map_err(sql_err)?
            .collect::<Result<_, _>>()
            .map_err(sql_err)?;
        let mut pks: Vec<(i64, String)> = Vec::new();
        for (col, ty, pk) in rows {
            table = table.column(&col, &ty);
            if pk > 0 {
                pks.push((pk, col));
            }
        }
        pks.sort();
        for (_, col) in pks {
            table = table.primary_key(&col);
        }
        let mut fks = raw
            .prepare("SELECT \"table\", \"from\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id, seq")
            .map_err(sql_err)?;
        let fk_rows: Vec<(String, String, Option<String>)> = fks
            .query_map([name], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))
            .map_err(sql_err)?
            .collect::<Result<_, _>>()
            .map_err(sql_err)?;
        for (target, from, to) in fk_rows {
            table = table.foreign_key(&from, &target, to.as_deref().unwrap_or(""));
        }
        tables.push(table);
    }

    let known: BTreeMap<String, TableDef> = tables
        .iter()
        .map(|t| (t.name.to_ascii_lowercase(), t.clone()))
        .collect();
    for table in &mut tables {
        let own = table.clone();
        table.foreign_keys.retain(|fk| {
            let ok = own.has_column(&fk.column)
                && known
                    .get(&fk.foreign_table.to_ascii_lowercase())
                    .is_some_and(|t| fk.foreign_column.is_empty() || t.has_column(&fk.foreign_column));
            if !ok {
                warn!(table = %own.name, column = %fk.column, target = %fk.foreign_table, "dropping dangling foreign key");
            }
            ok
        });
    }
    Schema::new(db_id, tables).map_err(|e| corrupt(e.to_string()))
}

/// One opened database and its schema.
#[derive(Debug, Clone)]
pub struct DbEntry {
    pub database: Database,
    pub schema: Schema,
}

/// Databases referenced by a task list, keyed by `db_id`.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: BTreeMap<String, DbEntry>,
}

impl Catalog {
    /// Opens and introspects every database referenced by `tasks` (via their resolved paths).
    pub fn for_tasks(tasks: &[Task]) -> Result<Self, DatasetError> {
        let mut catalog = Self::default();
        for task in tasks {
            if catalog.entries.contains_key(&task.db_id) {
                continue;
            }
            let path = task.db_path.clone().ok_or_else(|| DatasetError::CorruptDatabase {
                path: PathBuf::from(&task.db_id),
                message: format!("task {} has no resolved database path", task.id),
            })?;
            catalog.insert_path(&task.db_id, &path)?;
        }
        Ok(catalog)
    }

    pub fn insert_path(&mut self, db_id: &str, path: &Path) -> Result<(), DatasetError> {
        let database = Database::open(path).map_err(|e| match e {
            GateError::Missing(p) => DatasetError::CorruptDatabase {
                path: p,
                message: "file not found".into(),
            },
            other => DatasetError::CorruptDatabase {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let schema = introspect_schema(db_id, &database)?;
        self.entries.insert(db_id.to_string(), DbEntry { database, schema });
        Ok(())
    }

    pub fn get(&self, db_id: &str) -> Option<&DbEntry> {
        self.entries.get(db_id)
    }

    pub fn schemas(&self) -> BTreeMap<String, Schema> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.schema.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingInstance {
    pub task: Task,
    pub table: TableDef,
    pub label: GoldSchemaLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundingExpansion {
    pub instances: Vec<GroundingInstance>,
    /// `(task_id, reason)` for every task that contributed no instances.
    pub skipped: Vec<(String, String)>,
}

/// One training instance per (task, table) pair, labelled from the task's gold SQL.
pub fn expand_grounding_instances(tasks: &[Task], schemas: &BTreeMap<String, Schema>) -> GroundingExpansion {
    let mut out = GroundingExpansion::default();
    for task in tasks {
        let Some(schema) = schemas.get(&task.db_id) else {
            out.skipped.push((task.id.clone(), format!("unknown database `{}`", task.db_id)));
            continue;
        };
        let Some(gold) = &task.gold_sql else {
            out.skipped.push((task.id.clone(), "no gold SQL".into()));
            continue;
        };
        match extract_gold_schema(gold, schema) {
            Ok(labels) => {
                for (table, label) in schema.tables.iter().zip(labels) {
                    out.instances.push(GroundingInstance {
                        task: task.clone(),
                        table: table.clone(),
                        label,
                    });
                }
            }
            Err(e) => out.skipped.push((task.id.clone(), e.to_string())),
        }
    }
    out
}

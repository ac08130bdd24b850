use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// One natural-language question against one database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub question: String,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    /// Resolved database file, filled in by the benchmark loader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db_path: Option<PathBuf>,
}

impl Task {
    pub fn new(id: impl Into<String>, question: impl Into<String>, db_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            db_id: db_id.into(),
            external_knowledge: None,
            gold_sql: None,
            db_path: None,
        }
    }

    pub fn with_gold(mut self, sql: impl Into<String>) -> Self {
        self.gold_sql = Some(sql.into());
        self
    }

    pub fn with_knowledge(mut self, text: impl Into<String>) -> Self {
        self.external_knowledge = Some(text.into());
        self
    }

    pub fn with_db_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.db_path = Some(path.into());
        self
    }

    /// External knowledge, or the empty string when absent.
    pub fn knowledge(&self) -> &str {
        self.external_knowledge.as_deref().unwrap_or("")
    }
}

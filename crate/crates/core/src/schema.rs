//! Database structure: tables, typed columns, primary and foreign keys.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate table `{0}`")]
    DuplicateTable(String),
    #[error("duplicate column `{column}` in table `{table}`")]
    DuplicateColumn { table: String, column: String },
    #[error("primary key `{column}` is not a column of `{table}`")]
    UnknownPrimaryKey { table: String, column: String },
    #[error("foreign key {table}.{column} references missing {foreign_table}.{foreign_column}")]
    DanglingForeignKey {
        table: String,
        column: String,
        foreign_table: String,
        foreign_column: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    /// Declared type as written in the DDL; may be empty.
    #[serde(default)]
    pub data_type: String,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, data_type: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            data_type: data_type.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub foreign_table: String,
    pub foreign_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    #[serde(default)]
    pub primary_keys: Vec<String>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableDef {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            columns: Vec::new(),
            primary_keys: Vec::new(),
            foreign_keys: Vec::new(),
        }
    }

    pub fn column(mut self, name: &str, data_type: &str) -> Self {
        self.columns.push(ColumnDef::new(name, data_type));
        self
    }

    pub fn primary_key(mut self, name: &str) -> Self {
        self.primary_keys.push(name.to_string());
        self
    }

    pub fn foreign_key(mut self, column: &str, foreign_table: &str, foreign_column: &str) -> Self {
        self.foreign_keys.push(ForeignKey {
            column: column.to_string(),
            foreign_table: foreign_table.to_string(),
            foreign_column: foreign_column.to_string(),
        });
        self
    }

    /// Case-insensitive column lookup, returning the canonical spelling.
    pub fn find_column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.find_column(name).is_some()
    }

    pub fn is_primary_key(&self, name: &str) -> bool {
        self.primary_keys.iter().any(|k| k.eq_ignore_ascii_case(name))
    }

    /// Names of every column that participates in a primary or foreign key.
    pub fn key_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for col in &self.columns {
            let is_key = self.is_primary_key(&col.name)
                || self
                    .foreign_keys
                    .iter()
                    .any(|fk| fk.column.eq_ignore_ascii_case(&col.name));
            if is_key {
                out.push(&col.name);
            }
        }
        out
    }

    /// Schema listing in the `Table: name` / `- col (TYPE, PRIMARY KEY)` layout used by the prompts.
    pub fn describe(&self) -> String {
        let mut out = format!("Table: {}\n", self.name);
        for col in &self.columns {
            let mut attrs: Vec<String> = Vec::new();
            if !col.data_type.is_empty() {
                attrs.push(col.data_type.clone());
            }
            if self.is_primary_key(&col.name) {
                attrs.push("PRIMARY KEY".to_string());
            }
            if attrs.is_empty() {
                let _ = writeln!(out, "- {}", col.name);
            } else {
                let _ = writeln!(out, "- {} ({})", col.name, attrs.join(", "));
            }
        }
        for fk in &self.foreign_keys {
            let _ = writeln!(
                out,
                "- FOREIGN KEY ({}) REFERENCES {}({})",
                fk.column, fk.foreign_table, fk.foreign_column
            );
        }
        out
    }

    fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.to_ascii_lowercase()) {
                return Err(SchemaError::DuplicateColumn {
                    table: self.name.clone(),
                    column: col.name.clone(),
                });
            }
        }
        for pk in &self.primary_keys {
            if !self.has_column(pk) {
                return Err(SchemaError::UnknownPrimaryKey {
                    table: self.name.clone(),
                    column: pk.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
}

impl Schema {
    /// Builds a schema, checking name uniqueness and key references.
    pub fn new(db_id: impl Into<String>, tables: Vec<TableDef>) -> Result<Self, SchemaError> {
        let schema = Self {
            db_id: db_id.into(),
            tables,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_ascii_lowercase()) {
                return Err(SchemaError::DuplicateTable(table.name.clone()));
            }
            table.validate()?;
        }
        for table in &self.tables {
            for fk in &table.foreign_keys {
                let target = self.table(&fk.foreign_table);
                // A foreign key with no explicit target column refers to the target's primary key.
                let ok = target.is_some_and(|t| {
                    fk.foreign_column.is_empty() || t.has_column(&fk.foreign_column)
                });
                if !ok || !table.has_column(&fk.column) {
                    return Err(SchemaError::DanglingForeignKey {
                        table: table.name.clone(),
                        column: fk.column.clone(),
                        foreign_table: fk.foreign_table.clone(),
                        foreign_column: fk.foreign_column.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn describe(&self) -> String {
        self.tables
            .iter()
            .map(TableDef::describe)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn animals() -> TableDef {
        TableDef::new("animals")
            .column("id", "INTEGER")
            .column("species", "TEXT")
            .column("age", "INTEGER")
            .column("name", "TEXT")
            .primary_key("id")
    }

    #[test]
    fn describe_matches_prompt_layout() {
        assert_eq!(
            animals().describe(),
            "Table: animals\n- id (INTEGER, PRIMARY KEY)\n- species (TEXT)\n- age (INTEGER)\n- name (TEXT)\n"
        );
    }

    #[test]
    fn rejects_duplicate_tables_and_columns() {
        let err = Schema::new("db", vec![animals(), animals()]).unwrap_err();
        assert_eq!(err, SchemaError::DuplicateTable("animals".into()));

        let t = TableDef::new("t").column("a", "").column("A", "");
        assert!(matches!(
            Schema::new("db", vec![t]),
            Err(SchemaError::DuplicateColumn { .. })
        ));
    }

    #[test]
    fn rejects_dangling_foreign_key() {
        let t = TableDef::new("t")
            .column("x", "INTEGER")
            .foreign_key("x", "missing", "id");
        assert!(matches!(
            Schema::new("db", vec![t]),
            Err(SchemaError::DanglingForeignKey { .. })
        ));
    }

    #[test]
    fn primary_key_must_be_a_column() {
        let t = TableDef::new("t").column("x", "").primary_key("y");
        assert!(matches!(
            Schema::new("db", vec![t]),
            Err(SchemaError::UnknownPrimaryKey { .. })
        ));
    }

    #[test]
    fn lookups_ignore_case() {
        let s = Schema::new("db", vec![animals()]).unwrap();
        let t = s.table("ANIMALS").unwrap();
        assert_eq!(t.find_column("Species").unwrap().name, "species");
        assert_eq!(t.key_columns(), vec!["id"]);
    }
}

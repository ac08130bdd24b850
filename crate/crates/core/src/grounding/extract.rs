//! Gold-schema extraction: which tables and columns a reference query touches.
//!
//! The query is parsed with the SQLite dialect and walked scope by scope. Each `SELECT` opens a
//! scope whose bindings are the relations in its `FROM`/`JOIN` list. Unqualified column names
//! resolve against the innermost scope that has a real table containing them, falling back to
//! enclosing scopes for correlated subqueries. Qualified names resolve through aliases. Names
//! that match no schema column (select-list aliases, string literals) are ignored.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use sqlparser::ast::{
    Expr, GroupByExpr, Ident, JoinConstraint, JoinOperator, ObjectName, OrderByKind, Query,
    SelectItem, SelectItemQualifiedWildcardKind, SetExpr, Statement, TableFactor,
    TableWithJoins, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use crate::schema::Schema;

use super::GoldSchemaLabel;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExtractError {
    #[error("cannot parse gold SQL: {0}")]
    ParseFailure(String),
    #[error("gold SQL is not a single query")]
    NotAQuery,
}

#[derive(Debug, Clone)]
enum Binding {
    /// Index into `Schema::tables`.
    Table { name: String, table: usize },
    /// Derived table or CTE reference; its columns were handled when its body was walked.
    Opaque { name: String },
}

impl Binding {
    fn name(&self) -> &str {
        match self {
            Binding::Table { name, .. } | Binding::Opaque { name } => name,
        }
    }
}

struct Scope<'p> {
    bindings: Vec<Binding>,
    parent: Option<&'p Scope<'p>>,
}

impl<'p> Scope<'p> {
    fn chain(&self) -> impl Iterator<Item = &Scope<'p>> {
        std::iter::successors(Some(self), |s| s.parent)
    }
}

struct Extractor<'s> {
    schema: &'s Schema,
    referenced: Vec<bool>,
    columns: Vec<BTreeSet<usize>>,
}

/// Labels every table of `schema` as referenced or not by `gold_sql`, with the referenced columns.
pub fn extract_gold_schema(gold_sql: &str, schema: &Schema) -> Result<Vec<GoldSchemaLabel>, ExtractError> {
    let statements = Parser::parse_sql(&SQLiteDialect {}, gold_sql)
        .map_err(|e| ExtractError::ParseFailure(e.to_string()))?;
    let [Statement::Query(query)] = statements.as_slice() else {
        return Err(ExtractError::NotAQuery);
    };
    let mut ex = Extractor {
        schema,
        referenced: vec![false; schema.tables.len()],
        columns: vec![BTreeSet::new(); schema.tables.len()],
    };
    ex.query(query, None, &[]);
    Ok(schema
        .tables
        .iter()
        .enumerate()
        .map(|(i, t)| GoldSchemaLabel {
            table: t.name.clone(),
            relevant: ex.referenced[i],
            gold_columns: ex.columns[i]
                .iter()
                .map(|&c| t.columns[c].name.clone())
                .collect(),
        })
        .collect())
}

fn last_ident(name: &ObjectName) -> Option<&Ident> {
    name.0.last().and_then(|p| p.as_ident())
}

impl Extractor<'_> {
    fn mark_column(&mut self, table: usize, column: &str) -> bool {
        match self.schema.tables[table]
            .columns
            .iter()
            .position(|c| c.name.eq_ignore_ascii_case(column))
        {
            Some(c) => {
                self.columns[table].insert(c);
                true
            }
            None => false,
        }
    }

    fn mark_all(&mut self, table: usize) {
        let n = self.schema.tables[table].columns.len();
        self.columns[table].extend(0..n);
    }

    fn query(&mut self, query: &Query, parent: Option<&Scope<'_>>, ctes: &[String]) {
        let mut visible: Vec<String> = ctes.to_vec();
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                let name = cte.alias.name.value.to_ascii_lowercase();
                if with.recursive {
                    visible.push(name.clone());
                }
                self.query(&cte.query, parent, &visible);
                if !with.recursive {
                    visible.push(name);
                }
            }
        }
        let order_exprs: Vec<&Expr> = match query.order_by.as_ref().map(|o| &o.kind) {
            Some(OrderByKind::Expressions(items)) => items.iter().map(|o| &o.expr).collect(),
            _ => Vec::new(),
        };
        self.set_expr(&query.body, parent, &visible, &order_exprs);
    }

    fn set_expr(&mut self, body: &SetExpr, parent: Option<&Scope<'_>>, ctes: &[String], order_by: &[&Expr]) {
        match body {
            SetExpr::Select(select) => {
                let mut scope = Scope {
                    bindings: Vec::new(),
                    parent,
                };
                for twj in &select.from {
                    self.bind_from(twj, &mut scope, parent, ctes);
                }
                for twj in &select.from {
                    self.join_constraints(twj, &scope, ctes);
                }
                for item in &select.projection {
                    match item {
                        SelectItem::UnnamedExpr(e) | SelectItem::ExprWithAlias { expr: e, .. } => {
                            self.expr(e, &scope, ctes)
                        }
                        SelectItem::Wildcard(_) => {
                            for b in &scope.bindings {
                                if let Binding::Table { table, .. } = b {
                                    self.mark_all(*table);
                                }
                            }
                        }
                        SelectItem::QualifiedWildcard(kind, _) => {
                            if let SelectItemQualifiedWildcardKind::ObjectName(name) = kind {
                                if let Some(q) = last_ident(name) {
                                    if let Some(Binding::Table { table, .. }) =
                                        lookup_binding(&scope, &q.value)
                                    {
                                        self.mark_all(table);
                                    }
                                }
                            }
                        }
                    }
                }
                let mut exprs: Vec<&Expr> = Vec::new();
                exprs.extend(select.selection.as_ref());
                exprs.extend(select.having.as_ref());
                exprs.extend(select.qualify.as_ref());
                exprs.extend(select.prewhere.as_ref());
                if let GroupByExpr::Expressions(items, _) = &select.group_by {
                    exprs.extend(items.iter());
                }
                exprs.extend(select.sort_by.iter().map(|o| &o.expr));
                exprs.extend(order_by.iter().copied());
                for e in exprs {
                    self.expr(e, &scope, ctes);
                }
            }
            SetExpr::Query(q) => self.query(q, parent, ctes),
            SetExpr::SetOperation { left, right, .. } => {
                self.set_expr(left, parent, ctes, order_by);
                self.set_expr(right, parent, ctes, &[]);
            }
            SetExpr::Values(values) => {
                let scope = Scope {
                    bindings: Vec::new(),
                    parent,
                };
                for row in &values.rows {
                    for e in row {
                        self.expr(e, &scope, ctes);
                    }
                }
            }
            _ => {}
        }
    }

    fn bind_from(&mut self, twj: &TableWithJoins, scope: &mut Scope<'_>, parent: Option<&Scope<'_>>, ctes: &[String]) {
        self.bind_factor(&twj.relation, scope, parent, ctes);
        for join in &twj.joins {
            self.bind_factor(&join.relation, scope, parent, ctes);
        }
    }

    fn bind_factor(&mut self, factor: &TableFactor, scope: &mut Scope<'_>, parent: Option<&Scope<'_>>, ctes: &[String]) {
        match factor {
            TableFactor::Table { name, alias, .. } => {
                let Some(ident) = last_ident(name) else { return };
                let binding_name = alias
                    .as_ref()
                    .map(|a| a.name.value.clone())
                    .unwrap_or_else(|| ident.value.clone());
                let lower = ident.value.to_ascii_lowercase();
                if name.0.len() == 1 && ctes.contains(&lower) {
                    scope.bindings.push(Binding::Opaque { name: binding_name });
                    return;
                }
                match self
                    .schema
                    .tables
                    .iter()
                    .position(|t| t.name.eq_ignore_ascii_case(&ident.value))
                {
                    Some(table) => {
                        self.referenced[table] = true;
                        scope.bindings.push(Binding::Table {
                            name: binding_name,
                            table,
                        });
                    }
                    None => scope.bindings.push(Binding::Opaque { name: binding_name }),
                }
            }
            TableFactor::Derived {
                lateral,
                subquery,
                alias,
            } => {
                if *lateral {
                    let snapshot = Scope {
                        bindings: scope.bindings.clone(),
                        parent,
                    };
                    self.query(subquery, Some(&snapshot), ctes);
                } else {
                    self.query(subquery, parent, ctes);
                }
                if let Some(a) = alias {
                    scope.bindings.push(Binding::Opaque {
                        name: a.name.value.clone(),
                    });
                }
            }
            TableFactor::NestedJoin {
                table_with_joins, ..
            } => {
                self.bind_from(table_with_joins, scope, parent, ctes);
            }
            _ => {}
        }
    }

    fn join_constraints(&mut self, twj: &TableWithJoins, scope: &Scope<'_>, ctes: &[String]) {
        if let TableFactor::NestedJoin {
            table_with_joins, ..
        } = &twj.relation
        {
            self.join_constraints(table_with_joins, scope, ctes);
        }
        for join in &twj.joins {
            if let TableFactor::NestedJoin {
                table_with_joins, ..
            } = &join.relation
            {
                self.join_constraints(table_with_joins, scope, ctes);
            }
            let constraint = match &join.join_operator {
                JoinOperator::Join(c)
                | JoinOperator::Inner(c)
                | JoinOperator::Left(c)
                | JoinOperator::LeftOuter(c)
                | JoinOperator::Right(c)
                | JoinOperator::RightOuter(c)
                | JoinOperator::FullOuter(c)
                | JoinOperator::CrossJoin(c)
                | JoinOperator::Semi(c)
                | JoinOperator::LeftSemi(c)
                | JoinOperator::RightSemi(c)
                | JoinOperator::Anti(c)
                | JoinOperator::LeftAnti(c)
                | JoinOperator::RightAnti(c) => c,
                _ => continue,
            };
            match constraint {
                JoinConstraint::On(e) => self.expr(e, scope, ctes),
                JoinConstraint::Using(names) => {
                    for name in names {
                        if let Some(col) = last_ident(name) {
                            for b in &scope.bindings {
                                if let Binding::Table { table, .. } = b {
                                    self.mark_column(*table, &col.value);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn expr(&mut self, expr: &Expr, scope: &Scope<'_>, ctes: &[String]) {
        let mut collector = Collector::default();
        let _ = expr.visit(&mut collector);
        for path in collector.paths {
            self.resolve(&path, scope);
        }
        for sub in collector.subqueries {
            self.query(&sub, Some(scope), ctes);
        }
    }

    fn resolve(&mut self, path: &[Ident], scope: &Scope<'_>) {
        match path {
            [] => {}
            [column] => {
                for s in scope.chain() {
                    let mut hit = false;
                    for b in &s.bindings {
                        if let Binding::Table { table, .. } = b {
                            hit |= self.mark_column(*table, &column.value);
                        }
                    }
                    if hit {
                        return;
                    }
                }
            }
            [.., qualifier, column] => {
                if let Some(Binding::Table { table, .. }) = lookup_binding(scope, &qualifier.value) {
                    self.mark_column(table, &column.value);
                }
            }
        }
    }
}

fn lookup_binding(scope: &Scope<'_>, name: &str) -> Option<Binding> {
    scope.chain().find_map(|s| {
        s.bindings
            .iter()
            .find(|b| b.name().eq_ignore_ascii_case(name))
            .cloned()
    })
}

/// Collects identifier paths at the current query level and the subqueries nested directly in
/// an expression, without descending into those subqueries.
#[derive(Default)]
struct Collector {
    depth: usize,
    paths: Vec<Vec<Ident>>,
    subqueries: Vec<Query>,
}

impl Visitor for Collector {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if self.depth == 0 {
            self.subqueries.push(query.clone());
        }
        self.depth += 1;
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _query: &Query) -> ControlFlow<()> {
        self.depth -= 1;
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        if self.depth == 0 {
            match expr {
                Expr::Identifier(ident) => self.paths.push(vec![ident.clone()]),
                Expr::CompoundIdentifier(parts) => self.paths.push(parts.clone()),
                _ => {}
            }
        }
        ControlFlow::Continue(())
    }
}

//! Table-level schema grounding: per-table prompts, the piecewise grounding reward, reduced-schema
//! assembly, gold-label extraction and recall/precision.

mod extract;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::parse::{parse_grounding_answer, Decision, GroundingDecision};
use crate::policy::{CompletionRequest, Message, PolicyClient, PolicyError, SamplingParams};
use crate::schema::{Schema, TableDef};
use crate::task::Task;

pub use extract::{extract_gold_schema, ExtractError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GroundingError {
    #[error("no table was kept by grounding")]
    EmptySchema,
    #[error("no grounding decision for table `{0}`")]
    MissingDecision(String),
}

/// Reference relevance of one table for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSchemaLabel {
    pub table: String,
    pub relevant: bool,
    pub gold_columns: BTreeSet<String>,
}

impl GoldSchemaLabel {
    pub fn irrelevant(table: &str) -> Self {
        Self {
            table: table.to_string(),
            relevant: false,
            gold_columns: BTreeSet::new(),
        }
    }

    pub fn relevant<S: AsRef<str>>(table: &str, columns: &[S]) -> Self {
        Self {
            table: table.to_string(),
            relevant: true,
            gold_columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
        }
    }
}

/// The pruned schema handed to generation: kept tables restricted to their kept columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedSchema {
    pub entries: Vec<TableDef>,
}

impl ReducedSchema {
    pub fn into_schema(self, db_id: &str) -> Schema {
        Schema {
            db_id: db_id.to_string(),
            tables: self.entries,
        }
    }
}

const GROUNDING_TEMPLATE: &str = "\
You are doing table level schema linking. Given a table with schema information and the task, you should think step by step and decide whether this table is related to the task.
Your thought process should be enclosed in <think></think> tags, and your final decision in <answer></answer> tags.
For the answer, first state 'Y' for relevant or 'N' for not relevant. If relevant, also provide a Python list of the column names you believe are most useful.

Example of a final answer format:
<answer>
Y
[\"player_name\", \"team_name\", \"matches_played\"]
</answer>

or

<answer>
N
</answer>

Here is the information for the current task:

### Table Information:
{table_info}
### User Question:
{task}
### External Knowledge (if any):
{external}";

/// Text the assistant turn starts with; the completion continues the open `<think>` block.
pub const GROUNDING_ASSISTANT_PREFIX: &str = "Let me solve this step by step.\n<think>";

fn grounding_user_message(task: &Task, table: &TableDef) -> String {
    GROUNDING_TEMPLATE
        .replace("{table_info}", table.describe().trim_end())
        .replace("{task}", &task.question)
        .replace("{external}", task.knowledge())
}

/// Full grounding prompt: user instructions followed by the assistant prefix.
pub fn build_grounding_prompt(task: &Task, table: &TableDef) -> String {
    format!(
        "{}\n\n{}",
        grounding_user_message(task, table),
        GROUNDING_ASSISTANT_PREFIX
    )
}

/// The same prompt as a chat transcript, with the prefix as a partial assistant turn.
pub fn grounding_transcript(task: &Task, table: &TableDef) -> Vec<Message> {
    vec![
        Message::user(grounding_user_message(task, table)),
        Message::assistant(GROUNDING_ASSISTANT_PREFIX),
    ]
}

fn lowered<'a, I: IntoIterator<Item = &'a String>>(cols: I) -> BTreeSet<String> {
    cols.into_iter().map(|c| c.to_ascii_lowercase()).collect()
}

/// Piecewise grounding reward.
///
/// | case | reward |
/// |---|---|
/// | invalid format | 0.0 |
/// | decision and column set match | 1.0 |
/// | both Y, gold columns a strict subset of predicted | max(0.5, \|C_g\|/\|C_p\|) |
/// | predicted Y, gold N | 0.2 |
/// | both Y, some gold column missing | 0.1 |
/// | predicted N, gold Y | 0.0 |
pub fn ground_reward(pred: &GroundingDecision, gold: &GoldSchemaLabel) -> f64 {
    if !pred.valid_format {
        return 0.0;
    }
    match (pred.decision, gold.relevant) {
        (Decision::N, false) => 1.0,
        (Decision::N, true) => 0.0,
        (Decision::Y, false) => 0.2,
        (Decision::Y, true) => {
            let predicted = lowered(&pred.columns);
            let wanted = lowered(&gold.gold_columns);
            if predicted == wanted {
                1.0
            } else if wanted.is_subset(&predicted) {
                (wanted.len() as f64 / predicted.len() as f64).max(0.5)
            } else {
                0.1
            }
        }
    }
}

/// Builds S′ from per-table decisions. Predicted names that are not real columns are dropped;
/// key columns of kept tables are always retained.
pub fn assemble_reduced_schema(
    schema: &Schema,
    decisions: &BTreeMap<String, GroundingDecision>,
) -> Result<ReducedSchema, GroundingError> {
    let mut kept: Vec<(&TableDef, BTreeSet<String>)> = Vec::new();
    for table in &schema.tables {
        let decision = decisions
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(&table.name))
            .map(|(_, d)| d)
            .ok_or_else(|| GroundingError::MissingDecision(table.name.clone()))?;
        if decision.valid_format && decision.decision == Decision::Y {
            kept.push((table, lowered(&decision.columns)));
        }
    }
    if kept.is_empty() {
        return Err(GroundingError::EmptySchema);
    }
    let kept_names: Vec<String> = kept.iter().map(|(t, _)| t.name.to_ascii_lowercase()).collect();
    let entries = kept
        .into_iter()
        .map(|(table, predicted)| {
            let keys: BTreeSet<String> = table
                .key_columns()
                .into_iter()
                .map(str::to_ascii_lowercase)
                .collect();
            let columns = table
                .columns
                .iter()
                .filter(|c| {
                    let n = c.name.to_ascii_lowercase();
                    predicted.contains(&n) || keys.contains(&n)
                })
                .cloned()
                .collect();
            TableDef {
                name: table.name.clone(),
                columns,
                primary_keys: table.primary_keys.clone(),
                foreign_keys: table
                    .foreign_keys
                    .iter()
                    .filter(|fk| kept_names.contains(&fk.foreign_table.to_ascii_lowercase()))
                    .cloned()
                    .collect(),
            }
        })
        .collect();
    Ok(ReducedSchema { entries })
}

/// `table.column` keys (lower-case) of every column a question's decisions select.
pub fn predicted_columns(decisions: &BTreeMap<String, GroundingDecision>) -> BTreeSet<String> {
    decisions
        .iter()
        .filter(|(_, d)| d.valid_format && d.decision == Decision::Y)
        .flat_map(|(table, d)| {
            d.columns
                .iter()
                .map(move |c| format!("{}.{}", table.to_ascii_lowercase(), c.to_ascii_lowercase()))
        })
        .collect()
}

/// `table.column` keys (lower-case) of every column the gold labels require.
pub fn gold_columns(labels: &[GoldSchemaLabel]) -> BTreeSet<String> {
    labels
        .iter()
        .filter(|l| l.relevant)
        .flat_map(|l| {
            l.gold_columns
                .iter()
                .map(move |c| format!("{}.{}", l.table.to_ascii_lowercase(), c.to_ascii_lowercase()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub recall: f64,
    pub precision: f64,
}

/// Per-question recall (all gold columns selected) and macro-averaged precision.
pub fn grounding_metrics(preds: &[BTreeSet<String>], golds: &[BTreeSet<String>]) -> GroundingMetrics {
    assert_eq!(preds.len(), golds.len(), "predictions and golds must align");
    if preds.is_empty() {
        return GroundingMetrics {
            recall: 0.0,
            precision: 0.0,
        };
    }
    let n = preds.len() as f64;
    let recalled = preds.iter().zip(golds).filter(|(p, g)| g.is_subset(p)).count();
    let precision_sum: f64 = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| {
            if p.is_empty() {
                0.0
            } else {
                p.intersection(g).count() as f64 / p.len() as f64
            }
        })
        .sum();
    GroundingMetrics {
        recall: recalled as f64 / n,
        precision: precision_sum / n,
    }
}

/// One grounding-report line: a (question, table) decision with its reward against gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub task_id: String,
    pub table: String,
    pub decision: String,
    pub columns: Vec<String>,
    pub reward: Option<f64>,
    pub gold: Option<GoldSchemaLabel>,
}

impl GroundingRecord {
    pub fn new(task_id: &str, table: &str, pred: &GroundingDecision, gold: Option<&GoldSchemaLabel>) -> Self {
        let decision = match (pred.valid_format, pred.decision) {
            (false, _) => "invalid",
            (true, Decision::Y) => "Y",
            (true, Decision::N) => "N",
        };
        Self {
            task_id: task_id.to_string(),
            table: table.to_string(),
            decision: decision.to_string(),
            columns: pred.columns.clone(),
            reward: gold.map(|g| ground_reward(pred, g)),
            gold: gold.cloned(),
        }
    }

    pub fn to_decision(&self) -> GroundingDecision {
        match self.decision.as_str() {
            "Y" => GroundingDecision::yes(&self.columns),
            "N" => GroundingDecision::no(),
            _ => GroundingDecision::invalid(),
        }
    }
}

/// Asks the grounding policy about every table of the task's database.
pub fn ground_task(
    task: &Task,
    schema: &Schema,
    policy: &dyn PolicyClient,
    sampling: SamplingParams,
) -> Result<BTreeMap<String, GroundingDecision>, PolicyError> {
    let mut out = BTreeMap::new();
    for table in &schema.tables {
        let request = CompletionRequest::new(grounding_transcript(task, table), sampling);
        let response = policy.complete(&request)?;
        out.insert(table.name.clone(), parse_grounding_answer(&response.text));
    }
    Ok(out)
}

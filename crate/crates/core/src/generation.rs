//! Multi-turn SQL generation: the Think-Act-Observe episode loop, group rollouts and the outcome
//! reward.

use std::num::NonZeroUsize;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::parse::{parse_agent_turn, AgentStep};
use crate::policy::{CompletionRequest, FinishReason, Message, PolicyClient, PolicyError};
use crate::schema::Schema;
use crate::sqlgate::{self, Connection, Database, GateError};
use crate::task::Task;
use crate::trajectory::{CandidateSet, Termination, Trajectory, Turn};

pub use crate::policy::SamplingParams;

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Database(#[from] GateError),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("gold SQL failed to execute: {0}")]
    GoldExecutionFailure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub row_cap: NonZeroUsize,
    pub sampling: SamplingParams,
    pub timeout: Duration,
    pub max_new_tokens: u32,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_turns: 5,
            row_cap: NonZeroUsize::new(sqlgate::DEFAULT_ROW_CAP).expect("nonzero"),
            sampling: SamplingParams {
                temperature: 0.8,
                top_p: 0.7,
                top_k: 50,
                seed: Some(0),
            },
            timeout: sqlgate::DEFAULT_TIMEOUT,
            max_new_tokens: 2048,
        }
    }
}

const GENERATION_TEMPLATE: &str = r#"You are a data science expert. Below, you are provided with a database schema and a natural language question. Your task is to understand the schema and generate a valid SQL query to answer the question within limited turns. You should breakdown the problem, draft your reasoning process, and generate the solution.

Database Engine:
SQLite

Database Schema:
{db_details}
This schema describes the database's structure, including tables, columns, primary keys, foreign keys, and any relevant relationships or constraints.

External Knowledge:
{external_knowledge}

Question:
{question}

Important Instructions:
- Make sure you only output the information that is asked in the question. If the question asks for a specific column, make sure to only include that column in the SELECT clause, nothing more.
- The generated query should return all of the information asked in the question without any missing or extra information.
- Before generating the final SQL query, please think how to write the query. It should include detailed considerations such as analysing questions, summarizing relevant findings, brainstorming new ideas, verifying the accuracy of the current steps, refining any errors, thinking of how to call SQL tools, and revisiting previous steps.

Output Format (STRICTLY ENFORCED):
- Conduct thinking inside <think>...</think> blocks every time you get new observation or information. Start with <think>...</think> blocks in your responses as shown in the following example.
- You can use SQL tool written within a single <SQL>your SQL</SQL> block to explore or verify. You can't use the format ```SQL ; \n```, you must use the format <SQL>your SQL</SQL> to get the output. <SQL>your SQL</SQL> block should follow closely behind <think>...</think> block. SQL tool output will be shown as dataframe inside <observation>...</observation>. Based on this observation, you can think again and refine.
- The returned dataframe will be truncated in 50 rows if observation is too long.
- If you find no further exploration is needed or have only 1 turn left, you MUST directly provide the final SQL query solution inside <solution>...</solution>.
- All your responses should be in the <think>...</think>, <sql>...</sql>, <observation>...</observation>, <solution>...</solution> blocks.

Example:
Question: how many pigs are in the farm?
Database Schema:
Table: animals
- id (INTEGER, PRIMARY KEY)
- species (TEXT)
- age (INTEGER)
- name (TEXT)

Output:
<think>I am querying how many pigs are in the farm. I will begin by checking if the 'animals' table exists and contains entries with species = 'pig'.</think>
<SQL>SELECT COUNT(*) FROM animals WHERE species = 'pig';</SQL>
<observation>
+----------+
| COUNT(*) |
+----------+
|   12     |
+----------+
</observation>
<think>The result indicates that there are 12 pigs in the farm. Since the question asks for how many pigs, I can now output the final SQL as the solution.</think>
<solution>SELECT COUNT(*) FROM animals WHERE species = 'pig';</solution>"#;

pub const LAST_TURN_NOTICE: &str = "You have only 1 turn left. You MUST directly provide the final SQL query solution inside <solution>...</solution>.";

fn format_reminder(err: &crate::parse::ProtocolError) -> String {
    format!(
        "Your previous response did not follow the required format ({err}). Respond with a <think>...</think> block followed by either <SQL>your SQL</SQL> or <solution>...</solution>."
    )
}

pub fn build_generation_prompt(task: &Task, schema: &Schema) -> String {
    GENERATION_TEMPLATE
        .replace("{db_details}", schema.describe().trim_end())
        .replace("{external_knowledge}", task.knowledge())
        .replace("{question}", &task.question)
}

/// Like [`build_generation_prompt`] with the reference query appended as a hint. Used only when
/// collecting verifier training data for questions the policy never solves on its own.
pub fn build_hinted_generation_prompt(task: &Task, schema: &Schema, gold_sql: &str) -> String {
    format!(
        "{}\n\nSuggestion: the following SQL query is known to answer the question correctly. Use it to guide your exploration and final solution.\n{gold_sql}",
        build_generation_prompt(task, schema)
    )
}

/// Runs one episode from an initial prompt.
pub fn run_episode_from_prompt(
    prompt: String,
    policy: &dyn PolicyClient,
    db: &Connection,
    cfg: &EpisodeConfig,
) -> Result<Trajectory, PolicyError> {
    let mut transcript = vec![Message::user(prompt)];
    let mut turns: Vec<Turn> = Vec::new();
    for turn_index in 0..cfg.max_turns {
        if cfg.max_turns - turn_index == 1 {
            transcript.push(Message::environment(LAST_TURN_NOTICE));
        }
        let mut reprompted = false;
        loop {
            let mut request = CompletionRequest::new(transcript.clone(), cfg.sampling);
            request.max_new_tokens = cfg.max_new_tokens;
            let response = policy.complete(&request)?;
            match parse_agent_turn(&response.text) {
                Ok(AgentStep::Final { thought, sql }) => {
                    debug!(turns = turns.len(), "episode solved");
                    return Ok(Trajectory::solved(turns, thought, sql));
                }
                Ok(AgentStep::Action { thought, sql }) => {
                    let result = db.execute(&sql, Some(cfg.row_cap), cfg.timeout);
                    let turn = Turn::new(thought, sql, sqlgate::render_observation(&result));
                    transcript.push(Message::assistant(turn.render_action()));
                    transcript.push(Message::environment(
                        turn.render_observation().expect("action turn has an observation"),
                    ));
                    turns.push(turn);
                    break;
                }
                Err(err) => {
                    debug!(%err, "protocol error");
                    if reprompted || response.finish_reason == FinishReason::Length {
                        return Ok(Trajectory::unsolved(turns, Termination::ProtocolError));
                    }
                    transcript.push(Message::assistant(response.text));
                    transcript.push(Message::environment(format_reminder(&err)));
                    reprompted = true;
                }
            }
        }
    }
    Ok(Trajectory::unsolved(turns, Termination::TurnLimit))
}

pub fn run_episode(
    task: &Task,
    schema: &Schema,
    policy: &dyn PolicyClient,
    db: &Connection,
    cfg: &EpisodeConfig,
) -> Result<Trajectory, PolicyError> {
    run_episode_from_prompt(build_generation_prompt(task, schema), policy, db, cfg)
}

/// Samples `n` independent episodes; candidate `i` uses seed `base + i`.
pub fn rollout_group(
    task: &Task,
    schema: &Schema,
    policy: &dyn PolicyClient,
    db: &Database,
    cfg: &EpisodeConfig,
    n: usize,
) -> Result<CandidateSet, GenerationError> {
    assert!(n >= 1, "group size must be at least 1");
    let prompt = build_generation_prompt(task, schema);
    let candidates = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Trajectory, GenerationError> {
            let conn = db.connect()?;
            let episode_cfg = EpisodeConfig {
                sampling: cfg.sampling.derived(i),
                ..cfg.clone()
            };
            Ok(run_episode_from_prompt(prompt.clone(), policy, &conn, &episode_cfg)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CandidateSet::new(task.id.clone(), candidates))
}

/// Outcome reward: 1 for a correct final query, 0 for a valid but wrong one, −1 otherwise.
pub fn gen_reward(trajectory: &Trajectory, gold_sql: &str, db: &Connection, timeout: Duration) -> Result<f64, RewardError> {
    let gold = db.execute(gold_sql, None, timeout);
    if !gold.is_ok() {
        return Err(RewardError::GoldExecutionFailure(
            gold.error_message.unwrap_or_default(),
        ));
    }
    let Some(sql) = &trajectory.solution_sql else {
        return Ok(-1.0);
    };
    let predicted = db.execute(sql, None, timeout);
    if !predicted.is_ok() {
        return Ok(-1.0);
    }
    let ordered = sqlgate::has_top_level_order_by(gold_sql);
    Ok(if sqlgate::results_equal(&predicted, &gold, ordered) {
        1.0
    } else {
        0.0
    })
}

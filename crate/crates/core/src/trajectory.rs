//! Interaction trajectories and their line-delimited JSON interchange format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// One Think-Act-Observe step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub thought: String,
    #[serde(rename = "sql")]
    pub action_sql: Option<String>,
    pub observation: Option<String>,
}

impl Turn {
    pub fn new(thought: impl Into<String>, sql: impl Into<String>, observation: impl Into<String>) -> Self {
        Self {
            thought: thought.into(),
            action_sql: Some(sql.into()),
            observation: Some(observation.into()),
        }
    }

    /// The model-authored part of the turn in tag form.
    pub fn render_action(&self) -> String {
        let mut out = format!("<think>{}</think>", self.thought);
        if let Some(sql) = &self.action_sql {
            let _ = write!(out, "\n<sql>{sql}</sql>");
        }
        out
    }

    /// The environment-authored observation block.
    pub fn render_observation(&self) -> Option<String> {
        self.observation
            .as_ref()
            .map(|obs| format!("<observation>\n{obs}\n</observation>"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Solved,
    TurnLimit,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<Turn>,
    #[serde(rename = "solution")]
    pub solution_sql: Option<String>,
    /// Reasoning that accompanied the final solution block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_thought: Option<String>,
    pub reward: Option<f64>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn solved(turns: Vec<Turn>, thought: impl Into<String>, sql: impl Into<String>) -> Self {
        Self {
            turns,
            solution_sql: Some(sql.into()),
            solution_thought: Some(thought.into()),
            reward: None,
            termination: Termination::Solved,
        }
    }

    pub fn unsolved(turns: Vec<Turn>, termination: Termination) -> Self {
        debug_assert!(termination != Termination::Solved);
        Self {
            turns,
            solution_sql: None,
            solution_thought: None,
            reward: None,
            termination,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.termination == Termination::Solved
    }

    /// Checks the structural invariants; `max_turns` of `None` skips the length bound.
    pub fn check(&self, max_turns: Option<usize>) -> Result<(), String> {
        if self.solution_sql.is_some() != self.is_solved() {
            return Err("solution present iff termination is solved".into());
        }
        if let Some(max) = max_turns {
            if self.turns.len() > max {
                return Err(format!("{} turns exceeds limit {max}", self.turns.len()));
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.thought.trim().is_empty() {
                return Err(format!("turn {i} has an empty thought"));
            }
            if turn.action_sql.is_some() != turn.observation.is_some() {
                return Err(format!("turn {i}: observation present iff action present"));
            }
        }
        if let Some(r) = self.reward {
            if r != -1.0 && r != 0.0 && r != 1.0 {
                return Err(format!("reward {r} outside {{-1, 0, 1}}"));
            }
        }
        Ok(())
    }

    /// Full tag-form transcript: every think/sql/observation block followed by the solution.
    pub fn render_transcript(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            out.push_str(&turn.render_action());
            out.push('\n');
            if let Some(obs) = turn.render_observation() {
                out.push_str(&obs);
                out.push('\n');
            }
        }
        if let Some(sql) = &self.solution_sql {
            if let Some(thought) = &self.solution_thought {
                let _ = writeln!(out, "<think>{thought}</think>");
            }
            let _ = writeln!(out, "<solution>{sql}</solution>");
        }
        out
    }

    /// Concatenated reasoning of every turn, used where a single "reasoning" field is shown.
    pub fn reasoning(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.thought.as_str())
            .chain(self.solution_thought.as_deref())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// One line of the trajectory JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub candidate: usize,
    #[serde(flatten)]
    pub trajectory: Trajectory,
}

/// The N candidate trajectories sampled for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub task_id: String,
    pub candidates: Vec<Trajectory>,
    pub scores: Option<Vec<f64>>,
    pub selected_index: Option<usize>,
}

impl CandidateSet {
    pub fn new(task_id: impl Into<String>, candidates: Vec<Trajectory>) -> Self {
        Self {
            task_id: task_id.into(),
            candidates,
            scores: None,
            selected_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn check(&self) -> Result<(), String> {
        if let Some(scores) = &self.scores {
            if scores.len() != self.candidates.len() {
                return Err(format!(
                    "{} scores for {} candidates",
                    scores.len(),
                    self.candidates.len()
                ));
            }
        }
        if let Some(i) = self.selected_index {
            if i >= self.candidates.len() {
                return Err(format!("selected index {i} out of range"));
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<TrajectoryRecord> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryRecord {
                task_id: self.task_id.clone(),
                candidate: i,
                trajectory: t.clone(),
            })
            .collect()
    }

    /// Regroups records by task, preserving first-appearance task order and candidate index order.
    pub fn from_records(records: Vec<TrajectoryRecord>) -> Vec<CandidateSet> {
        let mut sets: Vec<CandidateSet> = Vec::new();
        let mut pending: Vec<Vec<(usize, Trajectory)>> = Vec::new();
        for rec in records {
            let pos = match sets.iter().position(|s| s.task_id == rec.task_id) {
                Some(p) => p,
                None => {
                    sets.push(CandidateSet::new(rec.task_id.clone(), Vec::new()));
                    pending.push(Vec::new());
                    sets.len() - 1
                }
            };
            pending[pos].push((rec.candidate, rec.trajectory));
        }
        for (set, mut items) in sets.iter_mut().zip(pending) {
            items.sort_by_key(|(i, _)| *i);
            set.candidates = items.into_iter().map(|(_, t)| t).collect();
        }
        sets
    }
}

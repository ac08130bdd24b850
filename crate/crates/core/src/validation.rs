//! Verifier scoring and candidate selection, plus the verifier fine-tuning dataset builder.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::datasets::Catalog;
use crate::generation::{build_hinted_generation_prompt, gen_reward, run_episode_from_prompt, EpisodeConfig, GenerationError, RewardError};
use crate::policy::{CompletionRequest, Message, PolicyClient, PolicyError, SamplingParams};
use crate::sqlgate::{self, Connection, ExecutionResult};
use crate::task::Task;
use crate::trajectory::{CandidateSet, Trajectory};

const VERIFIER_TEMPLATE: &str = r#"Task Background:
You are an expert SQL data analyst. Your task is to verify if a proposed solution correctly answers a user's question.

Problem:
{question}

External Knowledge:
{external_knowledge}

Proposed Solution:
{solution_text}

---

Your Task:
Based on all the information, is the SQL query in the solution logically correct for answering the question?
You must answer with "Yes" or "No" first, before any other text.

Is the answer correct (Yes/No)?"#;

const JUDGE_TEMPLATE: &str = r#"Task Background:
You are an expert SQL data analyst. Your task is to select the BEST SQL query that correctly answers a user's question.

You are given several candidates. For each candidate, you will see its reasoning, the SQL query itself, and importantly, the result of executing that query on the database. A query might look correct but return an error or empty/wrong data. You must use the execution observation to make your final decision.

Here is the user's question:
{question}

Evaluate the following candidates based on ALL available information. Does the "Execution Observation" for a candidate actually answer the user's question?
---
{formatted_candidates}
---

Final Analysis:
Considering the reasoning, the SQL code, and especially the execution results, which single candidate provides the most correct and complete answer to the user's question?

Instructions for your response:
- Respond with ONLY the index number of the single best candidate.
- If multiple candidates produce correct results, select the one with the LOWEST index number.
- Do not include any other words, symbols, or explanations.

Best candidate index:"#;

/// The verifier sees the whole interaction, not just the final query.
pub fn build_verifier_prompt(task: &Task, trajectory: &Trajectory) -> String {
    VERIFIER_TEMPLATE
        .replace("{question}", &task.question)
        .replace("{external_knowledge}", task.knowledge())
        .replace("{solution_text}", trajectory.render_transcript().trim_end())
}

/// Probability mass on "yes", folding case and leading-whitespace variants of the token.
pub fn yes_probability(dist: &BTreeMap<String, f64>) -> f64 {
    dist.iter()
        .filter(|(tok, _)| tok.trim_start().to_lowercase() == "yes")
        .map(|(_, p)| *p)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub per_round: Vec<f64>,
    pub mean: f64,
}

impl VerifierScore {
    pub fn from_rounds(per_round: Vec<f64>) -> Self {
        let mean = if per_round.is_empty() {
            0.0
        } else {
            per_round.iter().sum::<f64>() / per_round.len() as f64
        };
        Self { per_round, mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub rounds: usize,
    pub sampling: SamplingParams,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            rounds: 4,
            sampling: SamplingParams {
                temperature: 0.7,
                top_p: 0.9,
                top_k: 50,
                seed: Some(0),
            },
        }
    }
}

/// Average first-token Yes probability over `m` rounds; round `k` uses seed `base + k`.
pub fn score_trajectory(
    policy: &dyn PolicyClient,
    task: &Task,
    trajectory: &Trajectory,
    m: usize,
    sampling: SamplingParams,
) -> Result<VerifierScore, PolicyError> {
    assert!(m >= 1, "at least one scoring round is required");
    let transcript = vec![Message::user(build_verifier_prompt(task, trajectory))];
    let per_round = (0..m)
        .map(|k| {
            let mut req = CompletionRequest::new(transcript.clone(), sampling.derived(k));
            req.want_first_token_distribution = true;
            req.max_new_tokens = 1;
            let resp = policy.complete(&req)?;
            let dist = resp.first_token_distribution.ok_or_else(|| {
                PolicyError::BackendContract("verifier response lacks a first-token distribution".into())
            })?;
            Ok(yes_probability(&dist))
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    Ok(VerifierScore::from_rounds(per_round))
}

pub fn score_candidates(
    policy: &dyn PolicyClient,
    task: &Task,
    set: &CandidateSet,
    cfg: &VerifierConfig,
) -> Result<Vec<VerifierScore>, PolicyError> {
    set.candidates
        .par_iter()
        .map(|t| score_trajectory(policy, task, t, cfg.rounds, cfg.sampling))
        .collect()
}

/// Index of the first maximum; NaN never wins.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

pub fn select_best(scores: &[VerifierScore]) -> usize {
    assert!(!scores.is_empty(), "cannot select from an empty candidate set");
    argmax_first(&scores.iter().map(|s| s.mean).collect::<Vec<_>>())
}

fn solution_result(t: &Trajectory, db: &Connection, timeout: Duration) -> ExecutionResult {
    match &t.solution_sql {
        Some(sql) => db.execute(sql, None, timeout),
        None => ExecutionResult::error("no solution produced"),
    }
}

/// Majority vote over execution results. Errored candidates never win unless every candidate
/// errored, in which case index 0 is returned.
pub fn self_consistency_select(set: &CandidateSet, db: &Connection, timeout: Duration) -> usize {
    assert!(!set.is_empty(), "cannot select from an empty candidate set");
    let results: Vec<ExecutionResult> = set.candidates.iter().map(|t| solution_result(t, db, timeout)).collect();
    // Classes in order of first appearance: (representative index, size).
    let mut classes: Vec<(usize, usize)> = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if !r.is_ok() {
            continue;
        }
        match classes
            .iter_mut()
            .find(|(rep, _)| sqlgate::results_equal(&results[*rep], r, false))
        {
            Some(class) => class.1 += 1,
            None => classes.push((i, 1)),
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for &(rep, size) in &classes {
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((rep, size));
        }
    }
    best.map_or(0, |(rep, _)| rep)
}

pub fn build_judge_prompt(task: &Task, set: &CandidateSet, db: &Connection, row_cap: NonZeroUsize, timeout: Duration) -> String {
    let formatted = set
        .candidates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let sql = t.solution_sql.as_deref().unwrap_or("(no solution)");
            let observation = match &t.solution_sql {
                Some(s) => sqlgate::render_observation(&db.execute(s, Some(row_cap), timeout)),
                None => "Error: no solution produced".to_string(),
            };
            format!(
                "Candidate {i}:\nReasoning: {}\nSQL: {sql}\nExecution Observation:\n{observation}",
                t.reasoning()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    JUDGE_TEMPLATE
        .replace("{question}", &task.question)
        .replace("{formatted_candidates}", &formatted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub index: usize,
    pub diagnostic: Option<String>,
}

/// Reads the first run of ASCII digits as the chosen index; anything else falls back to 0.
pub fn parse_judge_reply(reply: &str, n: usize) -> JudgeOutcome {
    let digits: String = reply
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    let fallback = |why: String| JudgeOutcome {
        index: 0,
        diagnostic: Some(why),
    };
    if digits.is_empty() {
        return fallback(format!("judge reply has no index: {reply:?}"));
    }
    match digits.parse::<usize>() {
        Ok(i) if i < n => JudgeOutcome {
            index: i,
            diagnostic: None,
        },
        _ => fallback(format!("judge index {digits} out of range for {n} candidates")),
    }
}

pub fn llm_judge_select(
    task: &Task,
    set: &CandidateSet,
    judge: &dyn PolicyClient,
    db: &Connection,
    sampling: SamplingParams,
    timeout: Duration,
) -> Result<JudgeOutcome, PolicyError> {
    assert!(!set.is_empty(), "cannot select from an empty candidate set");
    let row_cap = NonZeroUsize::new(sqlgate::DEFAULT_ROW_CAP).expect("nonzero");
    let prompt = build_judge_prompt(task, set, db, row_cap, timeout);
    let mut req = CompletionRequest::new(vec![Message::user(prompt)], sampling);
    req.max_new_tokens = 16;
    let reply = judge.complete(&req)?;
    let outcome = parse_judge_reply(&reply.text, set.len());
    if let Some(d) = &outcome.diagnostic {
        warn!(task = %task.id, "{d}");
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Verifier,
    SelfConsistency,
    LlmJudge,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Verifier => "verifier",
            Strategy::SelfConsistency => "self_consistency",
            Strategy::LlmJudge => "llm_judge",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verifier" => Ok(Strategy::Verifier),
            "self_consistency" => Ok(Strategy::SelfConsistency),
            "llm_judge" => Ok(Strategy::LlmJudge),
            other => Err(format!("unknown selection strategy `{other}`")),
        }
    }
}

/// One line of the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub task_id: String,
    pub strategy: Strategy,
    pub selected_index: usize,
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Generator,
    BaseModel,
    GoldHinted,
}

/// One supervised example for the verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftPair {
    pub prompt: String,
    #[serde(rename = "completion")]
    pub label: Label,
    pub source: PairSource,
}

#[derive(Debug, thiserror::Error)]
pub enum VerifierDatasetError {
    #[error("task {0} has no candidates")]
    NoCandidates(String),
    #[error("task {0} has no gold SQL")]
    MissingGold(String),
    #[error("task {task}: database `{db_id}` not in catalog")]
    MissingDatabase { task: String, db_id: String },
    #[error("task {task}: {source}")]
    Reward { task: String, source: RewardError },
    #[error("task {task}: {source}")]
    Generation { task: String, source: GenerationError },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifierDataset {
    pub pairs: Vec<SftPair>,
    /// Tasks dropped because no correct trajectory could be obtained even with the hint.
    pub skipped: Vec<String>,
}

/// Shortest correct trajectory, lowest index on ties.
fn best_correct(pool: &[(PairSource, &Trajectory, f64)]) -> Option<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, (_, _, r))| *r == 1.0)
        .min_by_key(|(i, (_, t, _))| (t.turns.len(), *i))
        .map(|(i, _)| i)
}

/// Prefer an erroring trajectory, then the longest, then the lowest index.
fn worst_incorrect(pool: &[(PairSource, &Trajectory, f64)]) -> Option<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, (_, _, r))| *r != 1.0)
        .min_by_key(|(i, (_, t, r))| (*r != -1.0, std::cmp::Reverse(t.turns.len()), *i))
        .map(|(i, _)| i)
}

/// Builds Yes/No pairs from pooled generator and base-model candidates. Pair order within a task
/// is shuffled by a generator seeded from `rng_seed`; tasks with no correct candidate get one hinted
/// generation attempt using `hint_policy`.
pub fn build_verifier_dataset(
    tasks: &[Task],
    generator_sets: &BTreeMap<String, CandidateSet>,
    base_sets: &BTreeMap<String, CandidateSet>,
    catalog: &Catalog,
    hint_policy: &dyn PolicyClient,
    episode: &EpisodeConfig,
    rng_seed: u64,
) -> Result<VerifierDataset, VerifierDatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = VerifierDataset::default();
    for task in tasks {
        let gold = task
            .gold_sql
            .as_deref()
            .ok_or_else(|| VerifierDatasetError::MissingGold(task.id.clone()))?;
        let entry = catalog.get(&task.db_id).ok_or_else(|| VerifierDatasetError::MissingDatabase {
            task: task.id.clone(),
            db_id: task.db_id.clone(),
        })?;
        let gen_err = |source: GenerationError| VerifierDatasetError::Generation {
            task: task.id.clone(),
            source,
        };
        let reward_err = |source: RewardError| VerifierDatasetError::Reward {
            task: task.id.clone(),
            source,
        };
        let conn = entry.database.connect().map_err(|e| gen_err(e.into()))?;

        let mut pool: Vec<(PairSource, &Trajectory, f64)> = Vec::new();
        for (source, sets) in [(PairSource::Generator, generator_sets), (PairSource::BaseModel, base_sets)] {
            if let Some(set) = sets.get(&task.id) {
                for t in &set.candidates {
                    let r = gen_reward(t, gold, &conn, episode.timeout).map_err(reward_err)?;
                    pool.push((source, t, r));
                }
            }
        }
        if pool.is_empty() {
            return Err(VerifierDatasetError::NoCandidates(task.id.clone()));
        }

        let pair = |source: PairSource, t: &Trajectory, label: Label| SftPair {
            prompt: build_verifier_prompt(task, t),
            label,
            source,
        };
        let mut task_pairs = Vec::new();
        let worst = worst_incorrect(&pool).map(|i| pair(pool[i].0, pool[i].1, Label::No));
        match best_correct(&pool) {
            Some(i) => task_pairs.push(pair(pool[i].0, pool[i].1, Label::Yes)),
            None => {
                let prompt = build_hinted_generation_prompt(task, &entry.schema, gold);
                let hinted = run_episode_from_prompt(prompt, hint_policy, &conn, episode)
                    .map_err(|e| gen_err(e.into()))?;
                if gen_reward(&hinted, gold, &conn, episode.timeout).map_err(reward_err)? == 1.0 {
                    task_pairs.push(pair(PairSource::GoldHinted, &hinted, Label::Yes));
                } else {
                    warn!(task = %task.id, "no correct trajectory even with the gold hint; skipping");
                    out.skipped.push(task.id.clone());
                    continue;
                }
            }
        }
        task_pairs.extend(worst);
        task_pairs.shuffle(&mut rng);
        out.pairs.extend(task_pairs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CompletionResponse, FnPolicy};
    use crate::trajectory::{Termination, Turn};
    use proptest::prelude::*;

    fn dist(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn yes_mass_folds_variants() {
        assert_eq!(yes_probability(&dist(&[("Yes", 0.7), ("No", 0.3)])), 0.7);
        assert!((yes_probability(&dist(&[("Yes", 0.5), (" yes", 0.2), ("No", 0.3)])) - 0.7).abs() < 1e-12);
        assert_eq!(yes_probability(&dist(&[("No", 1.0)])), 0.0);
        assert_eq!(yes_probability(&dist(&[("Yesterday", 0.4)])), 0.0);
    }

    fn trajectory() -> Trajectory {
        Trajectory::solved(vec![Turn::new("look", "SELECT 1", "+---+")], "done", "SELECT 1")
    }

    #[test]
    fn verifier_prompt_shape() {
        let task = Task::new("1", "How many?", "d");
        let p = build_verifier_prompt(&task, &trajectory());
        assert!(p.contains("You must answer with \"Yes\" or \"No\" first"));
        assert!(p.ends_with("Is the answer correct (Yes/No)?"));
        assert!(p.contains("External Knowledge:\n\n"));
        assert!(p.contains("<observation>\n+---+\n</observation>"));
        assert!(p.contains("<solution>SELECT 1</solution>"));
    }

    #[test]
    fn rounds_average_and_use_distinct_seeds() {
        let policy = FnPolicy(|r: &CompletionRequest| {
            assert!(r.want_first_token_distribution);
            let p = if r.sampling.seed == Some(10) { 0.8 } else { 0.6 };
            Ok(CompletionResponse::text("Yes").with_distribution([("Yes", p), ("No", 1.0 - p)]))
        });
        let task = Task::new("1", "q", "d");
        let sampling = VerifierConfig::default().sampling.with_seed(Some(10));
        let s = score_trajectory(&policy, &task, &trajectory(), 2, sampling).unwrap();
        assert_eq!(s.per_round, vec![0.8, 0.6]);
        assert!((s.mean - 0.7).abs() < 1e-12);
        let again = score_trajectory(&policy, &task, &trajectory(), 2, sampling).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn missing_distribution_is_contract_error() {
        let policy = FnPolicy(|_: &CompletionRequest| Ok(CompletionResponse::text("Yes")));
        let err = score_trajectory(&policy, &Task::new("1", "q", "d"), &trajectory(), 1, SamplingParams::greedy());
        assert!(matches!(err, Err(PolicyError::BackendContract(_))));
    }

    #[test]
    fn select_best_ties_low() {
        let s = |v: &[f64]| v.iter().map(|&m| VerifierScore::from_rounds(vec![m])).collect::<Vec<_>>();
        assert_eq!(select_best(&s(&[0.2, 0.9, 0.9])), 1);
        assert_eq!(select_best(&s(&[0.5])), 0);
        assert_eq!(select_best(&s(&[0.3, 0.3, 0.3])), 0);
        assert_eq!(argmax_first(&[f64::NAN, 0.1]), 1);
    }

    #[test]
    fn judge_reply_parsing() {
        assert_eq!(parse_judge_reply("2", 4).index, 2);
        assert_eq!(parse_judge_reply("best is 1", 4), JudgeOutcome { index: 1, diagnostic: None });
        let banana = parse_judge_reply("banana", 4);
        assert_eq!(banana.index, 0);
        assert!(banana.diagnostic.is_some());
        assert!(parse_judge_reply("7", 4).diagnostic.is_some());
    }

    #[test]
    fn worst_prefers_errors_then_length() {
        let short = Trajectory::solved(vec![], "t", "SELECT 0");
        let long = Trajectory::solved(vec![Turn::new("a", "b", "c"); 3], "t", "SELECT 0");
        let errored = Trajectory::unsolved(vec![Turn::new("a", "b", "c")], Termination::TurnLimit);
        let pool = vec![
            (PairSource::Generator, &short, 0.0),
            (PairSource::Generator, &long, 0.0),
            (PairSource::BaseModel, &errored, -1.0),
        ];
        assert_eq!(worst_incorrect(&pool), Some(2));
        assert_eq!(worst_incorrect(&pool[..2]), Some(1));
        assert_eq!(best_correct(&pool), None);
    }

    #[test]
    fn sft_pair_wire_format() {
        let p = SftPair {
            prompt: "p".into(),
            label: Label::Yes,
            source: PairSource::GoldHinted,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"prompt":"p","completion":"Yes","source":"gold_hinted"}"#
        );
    }

    proptest! {
        #[test]
        fn mean_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..1.0, 1..8)) {
            let a = VerifierScore::from_rounds(v.clone()).mean;
            v.reverse();
            let b = VerifierScore::from_rounds(v).mean;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn argmax_invariant_under_monotone_transform(v in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let t: Vec<f64> = v.iter().map(|x| (3.0 * x).exp() - 2.0).collect();
            prop_assert_eq!(argmax_first(&v), argmax_first(&t));
        }
    }
}

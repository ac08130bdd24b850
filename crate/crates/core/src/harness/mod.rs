//! End-to-end composition: grounding, generation, selection and reporting over a benchmark, with
//! every stage persisted as JSONL so a run can be resumed.

pub mod config;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::datasets::{self, Catalog, DbEntry, Rejection};
use crate::generation::{gen_reward, rollout_group};
use crate::grounding::{
    assemble_reduced_schema, extract_gold_schema, gold_columns, ground_task, grounding_metrics, predicted_columns,
    GroundingMetrics, GroundingRecord,
};
use crate::grpo::{export_training_records, group_advantages, write_training_records};
use crate::policy::{mock_from_script, PolicyClient, RemoteClient, Script};
use crate::schema::Schema;
use crate::task::Task;
use crate::trajectory::{CandidateSet, TrajectoryRecord};
use crate::validation::{
    build_verifier_dataset, llm_judge_select, score_candidates, select_best, self_consistency_select,
    SelectionRecord, Strategy,
};

pub use config::{load_config, BackendConfig, Config, ConfigError};
pub use metrics::{evaluate_ex, pass_at_n, ExItem};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const GROUNDING_FILE: &str = "grounding.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const TRAINING_FILE: &str = "training_records.jsonl";
pub const VERIFIER_SFT_FILE: &str = "verifier_sft.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] datasets::DatasetError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("{0}")]
    Backend(String),
    #[error(transparent)]
    VerifierData(#[from] crate::validation::VerifierDatasetError),
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes one JSON value per line, replacing the file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| artifact_err(path, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| artifact_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for item in items {
            serde_json::to_writer(&mut w, item).map_err(|e| artifact_err(path, e))?;
            w.write_all(b"\n").map_err(|e| artifact_err(path, e))?;
        }
        w.flush().map_err(|e| artifact_err(path, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| artifact_err(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| artifact_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| artifact_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| artifact_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn read_jsonl_if_present<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    if path.is_file() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| artifact_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| artifact_err(path, e))
}

/// Policy clients for each agent role.
#[derive(Clone)]
pub struct Backends {
    pub grounder: Arc<dyn PolicyClient>,
    pub generator: Arc<dyn PolicyClient>,
    pub verifier: Arc<dyn PolicyClient>,
    pub judge: Arc<dyn PolicyClient>,
    pub base: Option<Arc<dyn PolicyClient>>,
}

impl Backends {
    pub fn uniform(policy: Arc<dyn PolicyClient>) -> Self {
        Self {
            grounder: policy.clone(),
            generator: policy.clone(),
            verifier: policy.clone(),
            judge: policy,
            base: None,
        }
    }

    pub fn from_config(cfg: &config::BackendsConfig) -> Result<Self, HarnessError> {
        let build = |b: &BackendConfig| -> Result<Arc<dyn PolicyClient>, HarnessError> {
            Ok(match b {
                BackendConfig::Remote(r) => Arc::new(RemoteClient::new(r.clone())),
                BackendConfig::Script { path } => Arc::new(mock_from_script(
                    Script::load(path).map_err(|e| artifact_err(path, e))?,
                )),
            })
        };
        let generator = build(&cfg.generator)?;
        let or_gen = |b: &Option<BackendConfig>| -> Result<Arc<dyn PolicyClient>, HarnessError> {
            match b {
                Some(b) => build(b),
                None => Ok(generator.clone()),
            }
        };
        Ok(Self {
            grounder: or_gen(&cfg.grounder)?,
            verifier: or_gen(&cfg.verifier)?,
            judge: or_gen(&cfg.judge)?,
            base: cfg.base.as_ref().map(build).transpose()?,
            generator,
        })
    }
}

/// A task-level failure; the task counts as incorrect and the rest of the batch continues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub stage: String,
    pub message: String,
}

impl TaskFailure {
    fn new(task: &Task, stage: &str, message: impl std::fmt::Display) -> Self {
        Self {
            task_id: task.id.clone(),
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }
}

/// Loaded tasks and their databases.
pub struct Workspace {
    pub tasks: Vec<Task>,
    pub rejected: Vec<Rejection>,
    pub databases: BTreeMap<String, DbEntry>,
    pub failures: Vec<TaskFailure>,
    pool: rayon::ThreadPool,
}

impl Workspace {
    pub fn load(cfg: &Config) -> Result<Self, HarnessError> {
        let bench = datasets::load_benchmark(&cfg.data.tasks, &cfg.data.db_root)?;
        let mut tasks = bench.tasks;
        if let Some(path) = &cfg.data.exclusions {
            tasks = datasets::apply_exclusions(tasks, &datasets::load_exclusions(path)?);
        }
        Self::from_tasks(tasks, bench.rejected, cfg.workers)
    }

    pub fn from_tasks(tasks: Vec<Task>, rejected: Vec<Rejection>, workers: usize) -> Result<Self, HarnessError> {
        let mut databases = BTreeMap::new();
        let mut failures = Vec::new();
        let mut broken: BTreeMap<String, String> = BTreeMap::new();
        for task in &tasks {
            if databases.contains_key(&task.db_id) {
                continue;
            }
            if let Some(msg) = broken.get(&task.db_id) {
                failures.push(TaskFailure::new(task, "load", msg));
                continue;
            }
            let mut one = Catalog::default();
            let loaded = match &task.db_path {
                Some(path) => one.insert_path(&task.db_id, path).map_err(|e| e.to_string()),
                None => Err("no resolved database path".to_string()),
            };
            match loaded {
                Ok(()) => {
                    let entry = one.get(&task.db_id).expect("just inserted").clone();
                    databases.insert(task.db_id.clone(), entry);
                }
                Err(msg) => {
                    warn!(db = %task.db_id, "{msg}");
                    failures.push(TaskFailure::new(task, "load", &msg));
                    broken.insert(task.db_id.clone(), msg);
                }
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Backend(e.to_string()))?;
        Ok(Self {
            tasks,
            rejected,
            databases,
            failures,
            pool,
        })
    }

    fn catalog_entry(&self, task: &Task) -> Option<&DbEntry> {
        self.databases.get(&task.db_id)
    }

    fn failed(&self) -> BTreeSet<String> {
        self.failures.iter().map(|f| f.task_id.clone()).collect()
    }

    /// Tasks whose database loaded and that have not failed in an earlier stage.
    fn live_tasks(&self) -> Vec<&Task> {
        let failed = self.failed();
        self.tasks
            .iter()
            .filter(|t| !failed.contains(&t.id) && self.catalog_entry(t).is_some())
            .collect()
    }

    /// Runs `f` over the live tasks missing from `done`, in parallel, preserving task order.
    fn fan_out<T, F>(&mut self, stage: &str, done: &BTreeSet<String>, f: F) -> Vec<(String, T)>
    where
        T: Send,
        F: Fn(&Task, &DbEntry) -> Result<T, String> + Sync,
    {
        let todo: Vec<&Task> = self.live_tasks().into_iter().filter(|t| !done.contains(&t.id)).collect();
        let results: Vec<(&Task, Result<T, String>)> = self.pool.install(|| {
            todo.par_iter()
                .map(|t| (*t, f(t, self.catalog_entry(t).expect("live task has a database"))))
                .collect()
        });
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (task, r) in results {
            match r {
                Ok(v) => ok.push((task.id.clone(), v)),
                Err(msg) => {
                    warn!(task = %task.id, stage, "{msg}");
                    failures.push(TaskFailure::new(task, stage, msg));
                }
            }
        }
        self.failures.extend(failures);
        ok
    }

    fn order_by_tasks<T>(&self, mut map: BTreeMap<String, T>) -> Vec<(String, T)> {
        self.tasks
            .iter()
            .filter_map(|t| map.remove(&t.id).map(|v| (t.id.clone(), v)))
            .collect()
    }
}

/// Grounding records per task, in schema table order.
pub type GroundingOutput = BTreeMap<String, Vec<GroundingRecord>>;

pub fn stage_ground(ws: &mut Workspace, cfg: &Config, backends: &Backends) -> Result<GroundingOutput, HarnessError> {
    let path = cfg.output_dir.join(GROUNDING_FILE);
    let mut out: GroundingOutput = BTreeMap::new();
    for rec in read_jsonl_if_present::<GroundingRecord>(&path)? {
        out.entry(rec.task_id.clone()).or_default().push(rec);
    }
    let done: BTreeSet<String> = out.keys().cloned().collect();
    let sampling = cfg.grounding.sampling;
    let policy = backends.grounder.clone();
    let fresh = ws.fan_out("grounding", &done, |task, entry| {
        let decisions = ground_task(task, &entry.schema, policy.as_ref(), sampling).map_err(|e| e.to_string())?;
        let labels = task.gold_sql.as_deref().and_then(|g| match extract_gold_schema(g, &entry.schema) {
            Ok(l) => Some(l),
            Err(e) => {
                warn!(task = %task.id, "gold schema extraction failed: {e}");
                None
            }
        });
        Ok(entry
            .schema
            .tables
            .iter()
            .enumerate()
            .map(|(i, table)| {
                let pred = &decisions[&table.name];
                GroundingRecord::new(&task.id, &table.name, pred, labels.as_ref().map(|l| &l[i]))
            })
            .collect::<Vec<_>>())
    });
    let wrote_new = !fresh.is_empty();
    out.extend(fresh);
    if wrote_new || !path.is_file() {
        let flat: Vec<GroundingRecord> = ws.order_by_tasks(out.clone()).into_iter().flat_map(|(_, v)| v).collect();
        write_jsonl(&path, &flat)?;
    }
    Ok(out)
}

/// The schema generation sees: the grounded subset, or the full schema when grounding is off,
/// missing, or kept nothing.
pub fn generation_schema(task: &Task, entry: &DbEntry, grounding: Option<&GroundingOutput>) -> Schema {
    let Some(records) = grounding.and_then(|g| g.get(&task.id)) else {
        return entry.schema.clone();
    };
    let decisions = records.iter().map(|r| (r.table.clone(), r.to_decision())).collect();
    match assemble_reduced_schema(&entry.schema, &decisions) {
        Ok(reduced) => reduced.into_schema(&entry.schema.db_id),
        Err(e) => {
            warn!(task = %task.id, "{e}; using the full schema");
            entry.schema.clone()
        }
    }
}

pub type CandidateOutput = BTreeMap<String, CandidateSet>;

pub fn stage_generate(
    ws: &mut Workspace,
    cfg: &Config,
    backends: &Backends,
    grounding: Option<&GroundingOutput>,
) -> Result<CandidateOutput, HarnessError> {
    let path = cfg.output_dir.join(CANDIDATES_FILE);
    let mut out: CandidateOutput = CandidateSet::from_records(read_jsonl_if_present::<TrajectoryRecord>(&path)?)
        .into_iter()
        .map(|s| (s.task_id.clone(), s))
        .collect();
    let done: BTreeSet<String> = out.keys().cloned().collect();
    let episode = cfg.generation.episode();
    let n = cfg.generation.candidates;
    let policy = backends.generator.clone();
    let fresh = ws.fan_out("generation", &done, |task, entry| {
        let schema = generation_schema(task, entry, grounding);
        let mut set = rollout_group(task, &schema, policy.as_ref(), &entry.database, &episode, n)
            .map_err(|e| e.to_string())?;
        if let Some(gold) = &task.gold_sql {
            let conn = entry.database.connect().map_err(|e| e.to_string())?;
            for t in &mut set.candidates {
                t.reward = Some(gen_reward(t, gold, &conn, episode.timeout).map_err(|e| e.to_string())?);
            }
        }
        Ok(set)
    });
    let wrote_new = !fresh.is_empty();
    out.extend(fresh);
    if wrote_new || !path.is_file() {
        let records: Vec<TrajectoryRecord> = ws
            .order_by_tasks(out.clone())
            .into_iter()
            .flat_map(|(_, s)| s.to_records())
            .collect();
        write_jsonl(&path, &records)?;
    }
    Ok(out)
}

pub type SelectionOutput = BTreeMap<(String, Strategy), SelectionRecord>;

pub fn stage_select(
    ws: &mut Workspace,
    cfg: &Config,
    backends: &Backends,
    candidates: &CandidateOutput,
) -> Result<SelectionOutput, HarnessError> {
    let path = cfg.output_dir.join(SELECTIONS_FILE);
    let mut out: SelectionOutput = read_jsonl_if_present::<SelectionRecord>(&path)?
        .into_iter()
        .map(|r| ((r.task_id.clone(), r.strategy), r))
        .collect();
    let strategies = cfg.selection.strategies();
    let done: BTreeSet<String> = ws
        .tasks
        .iter()
        .filter(|t| strategies.iter().all(|s| out.contains_key(&(t.id.clone(), *s))))
        .map(|t| t.id.clone())
        .collect();
    let verifier_cfg = cfg.selection.verifier();
    let judge_sampling = cfg.selection.judge_sampling;
    let timeout = cfg.generation.episode().timeout;
    let fresh = ws.fan_out("selection", &done, |task, entry| {
        let Some(set) = candidates.get(&task.id) else {
            return Err("no candidates to select from".into());
        };
        if set.is_empty() {
            return Err("empty candidate set".into());
        }
        let conn = entry.database.connect().map_err(|e| e.to_string())?;
        strategies
            .iter()
            .filter(|s| !out.contains_key(&(task.id.clone(), **s)))
            .map(|&strategy| {
                let (selected_index, scores) = match strategy {
                    Strategy::Verifier => {
                        let scores = score_candidates(backends.verifier.as_ref(), task, set, &verifier_cfg)
                            .map_err(|e| e.to_string())?;
                        (select_best(&scores), Some(scores.iter().map(|s| s.mean).collect()))
                    }
                    Strategy::SelfConsistency => (self_consistency_select(set, &conn, timeout), None),
                    Strategy::LlmJudge => {
                        let outcome = llm_judge_select(task, set, backends.judge.as_ref(), &conn, judge_sampling, timeout)
                            .map_err(|e| e.to_string())?;
                        (outcome.index, None)
                    }
                };
                Ok(SelectionRecord {
                    task_id: task.id.clone(),
                    strategy,
                    selected_index,
                    scores,
                })
            })
            .collect::<Result<Vec<_>, String>>()
    });
    let wrote_new = !fresh.is_empty();
    for (_, recs) in fresh {
        for r in recs {
            out.insert((r.task_id.clone(), r.strategy), r);
        }
    }
    if wrote_new || !path.is_file() {
        let mut ordered = Vec::new();
        for t in &ws.tasks {
            for s in &strategies {
                if let Some(r) = out.get(&(t.id.clone(), *s)) {
                    ordered.push(r.clone());
                }
            }
        }
        write_jsonl(&path, &ordered)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub num_tasks: usize,
    /// Tasks with a gold query; the denominator of every accuracy below.
    pub num_evaluated: usize,
    pub strategy: Strategy,
    pub execution_accuracy: f64,
    pub pass_at: BTreeMap<usize, f64>,
    pub selection_accuracy: BTreeMap<String, f64>,
    pub grounding: Option<GroundingMetrics>,
    pub grounding_enabled: bool,
    pub terminations: BTreeMap<String, usize>,
    pub mean_turns: f64,
    pub failures: Vec<TaskFailure>,
    pub rejected: Vec<Rejection>,
}

pub fn build_report(
    ws: &Workspace,
    cfg: &Config,
    grounding: Option<&GroundingOutput>,
    candidates: &CandidateOutput,
    selections: &SelectionOutput,
) -> Report {
    let evaluated: Vec<&Task> = ws.tasks.iter().filter(|t| t.gold_sql.is_some()).collect();
    let denom = evaluated.len();
    let frac = |hits: usize| if denom == 0 { 0.0 } else { hits as f64 / denom as f64 };

    let accuracy = |strategy: Strategy| {
        frac(
            evaluated
                .iter()
                .filter(|t| {
                    let sel = selections.get(&(t.id.clone(), strategy));
                    let set = candidates.get(&t.id);
                    matches!((sel, set), (Some(s), Some(c)) if c.candidates.get(s.selected_index).is_some_and(metrics::is_correct))
                })
                .count(),
        )
    };
    let selection_accuracy: BTreeMap<String, f64> = cfg
        .selection
        .strategies()
        .into_iter()
        .map(|s| (s.name().to_string(), accuracy(s)))
        .collect();

    // Tasks without candidates still count in the denominator.
    let pools: Vec<CandidateSet> = evaluated
        .iter()
        .map(|t| candidates.get(&t.id).cloned().unwrap_or_else(|| CandidateSet::new(t.id.clone(), vec![])))
        .collect();
    let pass_at = pass_at_n(&pools, &cfg.evaluation.pass_at);

    let grounding_metrics_value = grounding.map(|g| {
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for t in &evaluated {
            let Some(records) = g.get(&t.id) else { continue };
            let labels: Option<Vec<_>> = records.iter().map(|r| r.gold.clone()).collect();
            let Some(labels) = labels else { continue };
            let decisions = records.iter().map(|r| (r.table.clone(), r.to_decision())).collect();
            preds.push(predicted_columns(&decisions));
            golds.push(gold_columns(&labels));
        }
        grounding_metrics(&preds, &golds)
    });

    let mut terminations = BTreeMap::new();
    let mut turns = 0usize;
    let mut trajectories = 0usize;
    for set in candidates.values() {
        for t in &set.candidates {
            let key = serde_json::to_value(t.termination)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            *terminations.entry(key).or_insert(0) += 1;
            turns += t.turns.len();
            trajectories += 1;
        }
    }

    let order: BTreeMap<&str, usize> = ws.tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut failures = ws.failures.clone();
    failures.sort_by_key(|f| order.get(f.task_id.as_str()).copied().unwrap_or(usize::MAX));

    Report {
        schema_version: REPORT_SCHEMA_VERSION,
        num_tasks: ws.tasks.len(),
        num_evaluated: denom,
        strategy: cfg.selection.strategy,
        execution_accuracy: selection_accuracy[cfg.selection.strategy.name()],
        pass_at,
        selection_accuracy,
        grounding: grounding_metrics_value,
        grounding_enabled: cfg.grounding.enabled,
        terminations,
        mean_turns: if trajectories == 0 { 0.0 } else { turns as f64 / trajectories as f64 },
        failures,
        rejected: ws.rejected.clone(),
    }
}

/// The last stage a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ground,
    Generate,
    Select,
    Report,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Present when the run reached the report stage.
    pub report: Option<Report>,
    pub failures: Vec<TaskFailure>,
    /// Wall-clock seconds per stage; written separately so reports stay reproducible.
    pub timing: BTreeMap<String, f64>,
}

struct Clock {
    start: Instant,
    laps: BTreeMap<String, f64>,
}

impl Clock {
    fn lap(&mut self, name: &str) {
        self.laps.insert(name.to_string(), self.start.elapsed().as_secs_f64());
        self.start = Instant::now();
    }
}

/// Runs the stages up to and including `until`, reusing artifacts already in the output directory.
pub fn run_stages(cfg: &Config, backends: &Backends, until: Stage) -> Result<PipelineOutcome, HarnessError> {
    cfg.validate()?;
    let mut clock = Clock {
        start: Instant::now(),
        laps: BTreeMap::new(),
    };
    let mut ws = Workspace::load(cfg)?;
    clock.lap("load");
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| artifact_err(&cfg.output_dir, e))?;
    let finish = |ws: Workspace, report: Option<Report>, clock: Clock| PipelineOutcome {
        report,
        failures: ws.failures,
        timing: clock.laps,
    };

    let grounding = if cfg.grounding.enabled {
        let g = stage_ground(&mut ws, cfg, backends)?;
        clock.lap("grounding");
        Some(g)
    } else {
        None
    };
    if until == Stage::Ground {
        return Ok(finish(ws, None, clock));
    }
    let candidates = stage_generate(&mut ws, cfg, backends, grounding.as_ref())?;
    clock.lap("generation");
    if until == Stage::Generate {
        return Ok(finish(ws, None, clock));
    }
    let selections = stage_select(&mut ws, cfg, backends, &candidates)?;
    clock.lap("selection");
    if until == Stage::Select {
        return Ok(finish(ws, None, clock));
    }
    let report = build_report(&ws, cfg, grounding.as_ref(), &candidates, &selections);
    write_json(&cfg.output_dir.join(REPORT_FILE), &report)?;
    clock.lap("report");
    write_json(&cfg.output_dir.join(TIMING_FILE), &clock.laps)?;
    info!(ex = report.execution_accuracy, failures = report.failures.len(), "pipeline finished");
    Ok(finish(ws, Some(report), clock))
}

/// Runs every stage and returns the report.
pub fn run_pipeline(cfg: &Config, backends: &Backends) -> Result<(Report, BTreeMap<String, f64>), HarnessError> {
    let outcome = run_stages(cfg, backends, Stage::Report)?;
    Ok((outcome.report.expect("report stage ran"), outcome.timing))
}

/// Rebuilds the report from persisted artifacts only; no backend is contacted.
pub fn report_from_artifacts(cfg: &Config) -> Result<Report, HarnessError> {
    let ws = Workspace::load(cfg)?;
    let grounding = if cfg.grounding.enabled {
        let mut g: GroundingOutput = BTreeMap::new();
        for rec in read_jsonl::<GroundingRecord>(&cfg.output_dir.join(GROUNDING_FILE))? {
            g.entry(rec.task_id.clone()).or_default().push(rec);
        }
        Some(g)
    } else {
        None
    };
    let candidates: CandidateOutput = CandidateSet::from_records(read_jsonl(&cfg.output_dir.join(CANDIDATES_FILE))?)
        .into_iter()
        .map(|s| (s.task_id.clone(), s))
        .collect();
    let selections: SelectionOutput = read_jsonl::<SelectionRecord>(&cfg.output_dir.join(SELECTIONS_FILE))?
        .into_iter()
        .map(|r| ((r.task_id.clone(), r.strategy), r))
        .collect();
    let report = build_report(&ws, cfg, grounding.as_ref(), &candidates, &selections);
    write_json(&cfg.output_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// One line of a predictions file scored by [`evaluate_predictions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: String,
    pub sql: Option<String>,
}

/// Execution accuracy of predictions over every task with a gold query; tasks without a
/// prediction count as incorrect.
pub fn evaluate_predictions(ws: &Workspace, predictions: &[Prediction], cfg: &Config) -> Result<f64, HarnessError> {
    let by_id: BTreeMap<&str, Option<&str>> = predictions
        .iter()
        .map(|p| (p.task_id.as_str(), p.sql.as_deref()))
        .collect();
    let timeout = cfg.generation.episode().timeout;
    let mut conns = BTreeMap::new();
    for (db_id, entry) in &ws.databases {
        conns.insert(db_id.clone(), entry.database.connect().map_err(|e| HarnessError::Backend(e.to_string()))?);
    }
    let mut items = Vec::new();
    let mut missing_db = 0usize;
    for t in &ws.tasks {
        let Some(gold) = &t.gold_sql else { continue };
        match conns.get(&t.db_id) {
            Some(db) => items.push(ExItem {
                predicted: by_id.get(t.id.as_str()).copied().flatten(),
                gold,
                db,
            }),
            None => missing_db += 1,
        }
    }
    let total = items.len() + missing_db;
    if total == 0 {
        return Ok(0.0);
    }
    Ok(evaluate_ex(&items, timeout) * items.len() as f64 / total as f64)
}

/// Converts persisted candidates into trainer records with group-relative advantages. Groups
/// without rewards or with fewer than two candidates are skipped. Returns the record count.
pub fn prepare_grpo(cfg: &Config) -> Result<usize, HarnessError> {
    let sets = CandidateSet::from_records(read_jsonl(&cfg.output_dir.join(CANDIDATES_FILE))?);
    let grpo = cfg.training.grpo();
    let mut kept = Vec::new();
    let mut rewards = Vec::new();
    let mut advantages = Vec::new();
    for set in sets {
        let r: Option<Vec<f64>> = set.candidates.iter().map(|t| t.reward).collect();
        let Some(r) = r else {
            warn!(task = %set.task_id, "candidates lack rewards; skipped");
            continue;
        };
        match group_advantages(&r, grpo.std_floor) {
            Ok(a) => {
                kept.push(set);
                rewards.push(r);
                advantages.push(a);
            }
            Err(e) => warn!(task = %set.task_id, "{e}; skipped"),
        }
    }
    let records = export_training_records(&kept, &rewards, &advantages).map_err(|e| HarnessError::Backend(e.to_string()))?;
    let path = cfg.output_dir.join(TRAINING_FILE);
    let file = std::fs::File::create(&path).map_err(|e| artifact_err(&path, e))?;
    let mut w = BufWriter::new(file);
    write_training_records(&mut w, &records).map_err(|e| artifact_err(&path, e))?;
    w.flush().map_err(|e| artifact_err(&path, e))?;
    Ok(records.len())
}

/// Samples verifier-data pools from the generator (and the base model when configured), then
/// writes labelled Yes/No pairs. Returns the number of pairs written.
pub fn build_verifier_data(cfg: &Config, backends: &Backends) -> Result<usize, HarnessError> {
    let mut ws = Workspace::load(cfg)?;
    let n = cfg.verifier_data.candidates_per_question;
    let episode = cfg.generation.episode_with(cfg.verifier_data.sampling);
    let pools = |policy: Arc<dyn PolicyClient>, ws: &mut Workspace, stage: &str| -> BTreeMap<String, CandidateSet> {
        ws.fan_out(stage, &BTreeSet::new(), |task, entry| {
            rollout_group(task, &entry.schema, policy.as_ref(), &entry.database, &episode, n).map_err(|e| e.to_string())
        })
        .into_iter()
        .collect()
    };
    let generator_sets = pools(backends.generator.clone(), &mut ws, "verifier_data");
    let base_sets = match &backends.base {
        Some(b) => pools(b.clone(), &mut ws, "verifier_data_base"),
        None => BTreeMap::new(),
    };
    let failed = ws.failed();
    let tasks: Vec<Task> = ws
        .tasks
        .iter()
        .filter(|t| t.gold_sql.is_some() && !failed.contains(&t.id) && generator_sets.contains_key(&t.id))
        .cloned()
        .collect();
    let mut catalog = Catalog::default();
    for t in &tasks {
        if catalog.get(&t.db_id).is_none() {
            if let Some(path) = &t.db_path {
                catalog.insert_path(&t.db_id, path)?;
            }
        }
    }
    let data = build_verifier_dataset(
        &tasks,
        &generator_sets,
        &base_sets,
        &catalog,
        backends.generator.as_ref(),
        &episode,
        cfg.verifier_data.rng_seed,
    )?;
    write_jsonl(&cfg.output_dir.join(VERIFIER_SFT_FILE), &data.pairs)?;
    Ok(data.pairs.len())
}

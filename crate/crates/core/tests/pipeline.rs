mod common;

use std::path::Path;
use std::sync::Arc;

use sqlagent::harness::{report_from_artifacts, run_pipeline, run_stages, Backends, Config, Stage};
use sqlagent::policy::{CompletionRequest, CompletionResponse, FnPolicy, PolicyError};

fn config(root: &Path, out: &str) -> Config {
    let (tasks, db_root) = common::write_benchmark(root);
    let mut cfg = Config::default();
    cfg.output_dir = root.join(out);
    cfg.workers = 2;
    cfg.data.tasks = tasks;
    cfg.data.db_root = db_root;
    cfg.generation.candidates = 4;
    cfg.evaluation.pass_at = vec![1, 4];
    cfg
}

fn responder() -> Backends {
    Backends::uniform(Arc::new(common::responder()))
}

fn unavailable() -> Backends {
    Backends::uniform(Arc::new(FnPolicy(|_: &CompletionRequest| {
        Err::<CompletionResponse, _>(PolicyError::Unavailable {
            attempts: 1,
            last_error: "offline".into(),
        })
    })))
}

#[test]
fn resumed_run_reuses_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "out");
    let outcome = run_stages(&cfg, &responder(), Stage::Generate).unwrap();
    assert!(outcome.report.is_none() && outcome.failures.is_empty());
    let candidates = std::fs::read(cfg.output_dir.join("candidates.jsonl")).unwrap();

    // Selection still needs a backend; grounding and generation come from disk.
    let (first, _) = run_pipeline(&cfg, &responder()).unwrap();
    assert_eq!(std::fs::read(cfg.output_dir.join("candidates.jsonl")).unwrap(), candidates);
    let (second, _) = run_pipeline(&cfg, &unavailable()).unwrap();
    assert_eq!(first, second);
    assert!(second.failures.is_empty());
    assert_eq!(report_from_artifacts(&cfg).unwrap(), first);
    assert!(cfg.output_dir.join("timing.json").exists());
}

#[test]
fn grounding_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "out");
    cfg.grounding.enabled = false;
    let (report, _) = run_pipeline(&cfg, &responder()).unwrap();
    assert!(!report.grounding_enabled && report.grounding.is_none());
    assert_eq!(report.execution_accuracy, 0.6);
    assert!(!cfg.output_dir.join("grounding.jsonl").exists());
}

#[test]
fn failing_task_does_not_abort_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "out");
    let flaky = Backends::uniform(Arc::new(FnPolicy(|r: &CompletionRequest| {
        if r.transcript[0].content.contains(common::FIXTURES[0].question) {
            Err(PolicyError::Unavailable {
                attempts: 3,
                last_error: "timeout".into(),
            })
        } else {
            common::respond(r)
        }
    })));
    let (report, _) = run_pipeline(&cfg, &flaky).unwrap();
    assert_eq!(report.num_tasks, 10);
    assert!(!report.failures.is_empty());
    assert!(report.failures.iter().all(|f| f.task_id == common::FIXTURES[0].id));
    assert_eq!(report.execution_accuracy, 0.5);
}

use std::fs;
use std::path::{Path, PathBuf};

use sre_core::backends::{
    Backend, BackendError, ChatRequest, EmbeddingVector, Generation, NliScores, SyntheticBackend,
};
use sre_core::config::RunConfig;
use sre_core::dataset::{ingest_dataset, DatasetFormat, QueryRecord};
use sre_core::estimators::Method;
use sre_core::pipeline::{load_records, run_experiment, FAILURES_FILE, RESULTS_FILE};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/golden")
        .join(name)
}

fn setup(n: usize) -> (Vec<QueryRecord>, SyntheticBackend) {
    let questions = ingest_dataset(&golden("dataset.jsonl"), DatasetFormat::Generic, true, None, 0).unwrap();
    let backend = SyntheticBackend::from_path(golden("world.json")).unwrap();
    (questions.into_iter().take(n).collect(), backend)
}

fn config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: out.to_path_buf(),
        workers: 3,
        ..RunConfig::default()
    };
    cfg.sampler.top_logprobs = 5;
    cfg
}

#[test]
fn resume_skips_finished_questions_and_drops_a_torn_line() {
    let (questions, backend) = setup(6);
    let tmp = tempfile::tempdir().unwrap();

    let fresh = tmp.path().join("fresh");
    let s = run_experiment(&config(&fresh), &questions, &backend).unwrap();
    assert_eq!((s.completed, s.resumed, s.failed), (6, 0, 0));

    let resumed = tmp.path().join("resumed");
    run_experiment(&config(&resumed), &questions[..4], &backend).unwrap();
    let path = resumed.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    // cut the last record in half, as a crash mid-write would
    let keep = text.trim_end().rfind('\n').unwrap() + 1 + 40;
    fs::write(&path, &text[..keep]).unwrap();

    let s = run_experiment(&config(&resumed), &questions, &backend).unwrap();
    assert_eq!((s.resumed, s.completed, s.failed), (3, 3, 0));
    assert_eq!(
        fs::read_to_string(fresh.join(RESULTS_FILE)).unwrap(),
        fs::read_to_string(&path).unwrap()
    );
}

#[test]
fn score_keys_follow_configured_methods() {
    let (questions, backend) = setup(2);
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.methods = vec![Method::SreSrHsc, Method::Se, Method::Tnll];
    run_experiment(&cfg, &questions, &backend).unwrap();
    for r in load_records(tmp.path()).unwrap() {
        let keys: Vec<Method> = r.scores.keys().copied().collect();
        assert_eq!(keys, vec![Method::Se, Method::SreSrHsc, Method::Tnll]);
        assert_eq!(r.samples.len(), r.reformulations.len() * cfg.sampler.samples_per_input);
    }
}

/// Backend that refuses every request, so every question fails.
struct Down;

fn down<T>() -> Result<T, BackendError> {
    Err(BackendError::Unavailable {
        attempts: 1,
        message: "down".into(),
    })
}

impl Backend for Down {
    fn chat(&self, _: &ChatRequest) -> Result<Vec<Generation>, BackendError> {
        down()
    }

    fn embed(&self, _: &str, _: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        down()
    }

    fn nli(&self, _: &str, _: &str) -> Result<NliScores, BackendError> {
        down()
    }
}

#[test]
fn failures_are_logged_not_fatal() {
    let (questions, _) = setup(3);
    let tmp = tempfile::tempdir().unwrap();
    let s = run_experiment(&config(tmp.path()), &questions, &Down).unwrap();
    assert_eq!((s.completed, s.failed), (0, 3));
    assert_eq!(s.failure_rate(), 1.0);
    let log = fs::read_to_string(tmp.path().join(FAILURES_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.contains("down"));
}

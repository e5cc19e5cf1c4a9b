//! Per-question pipeline and resumable experiment runs.
//!
//! Each question is reformulated, answers are sampled for every accepted
//! reformulation, pairwise scores are computed over the pool, the pool is
//! clustered, and every configured estimator is evaluated. One JSON line is
//! appended to `results.jsonl` per completed question.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{Backend, BackendError, HttpBackend, RecordReplay, SyntheticBackend};
use crate::config::{BackendConfig, BackendKind, RunConfig};
use crate::dataset::QueryRecord;
use crate::error::{Error, Result};
use crate::estimators::{embedding_variance_of, p_true, semantic_entropy, t_nll, token_entropy, Method, Weighting};
use crate::hsc::{self, ClusterPartition, HscOutcome, PairScores};
use crate::reformulator::generate_reformulations;
use crate::sampler::{assign_gold_label, low_temperature_answer, sample_answers, sample_question, AnswerSample};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Rounds to 9 decimals so that output bytes do not depend on last-bit
/// differences between platforms.
pub fn round9(x: f64) -> f64 {
    let r = (x * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReformulationEntry {
    pub text: String,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub text: String,
    pub reformulation_idx: usize,
    pub seq_logprob: f64,
    pub cluster_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowTemp {
    pub text: String,
    pub y_gold: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    pub pre: Option<f64>,
    pub post: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFlags {
    /// Fewer reformulations than requested were accepted.
    pub short: bool,
    /// No reformulation was accepted; answers were sampled for the original question.
    pub fallback: bool,
    pub reformulation_rounds: usize,
    pub rejected_candidates: usize,
    pub refine_moves: usize,
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub references: Vec<String>,
    pub reformulations: Vec<ReformulationEntry>,
    pub samples: Vec<SampleEntry>,
    /// Answers sampled for the original question only, used by the baselines.
    #[serde(default)]
    pub baseline_samples: Vec<SampleEntry>,
    pub low_temp: LowTemp,
    pub h: u8,
    pub scores: BTreeMap<Method, Option<f64>>,
    pub energies: Energies,
    pub flags: RecordFlags,
}

fn entries(samples: &[AnswerSample], partition: Option<&ClusterPartition>) -> Vec<SampleEntry> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| SampleEntry {
            text: s.text.clone(),
            reformulation_idx: s.source_index,
            seq_logprob: round9(s.sequence_logprob),
            cluster_id: partition.map(|p| p.cluster_of(i)),
        })
        .collect()
}

fn texts(samples: &[AnswerSample]) -> Vec<String> {
    samples.iter().map(|s| s.text.clone()).collect()
}

/// `Ok(None)` for scores that are undefined on this question.
fn optional(method: Method, value: Result<f64>) -> Result<Option<f64>> {
    match value {
        Ok(v) if v.is_finite() => Ok(Some(round9(v))),
        Ok(v) => {
            log::debug!("{method} gave non-finite {v}");
            Ok(None)
        }
        Err(Error::UndefinedScore(msg)) => {
            log::debug!("{method} undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn fraction_entropy(p: &ClusterPartition) -> Result<f64> {
    semantic_entropy(p, Weighting::Fraction, None)
}

/// Runs the full pipeline for one question.
pub fn process_question(q: &QueryRecord, cfg: &RunConfig, backend: &dyn Backend) -> Result<RunRecord> {
    let methods = cfg.method_set();
    let wants = |m: Method| methods.contains(&m);
    let chat = cfg.backend.chat_model.as_str();
    let embed = cfg.backend.embed_model.as_str();
    let answer_embed = cfg.backend.answer_embed_model();
    let context = q.context.as_deref();

    let set = generate_reformulations(&q.question, &cfg.reformulation, backend, chat, embed)?;
    let inputs = set.sampling_inputs(cfg.reformulation.include_original);
    let pool = sample_answers(&inputs, context, &cfg.sampler, backend, chat)?;
    let low = low_temperature_answer(&q.question, context, &cfg.sampler, backend, chat)?;
    let (y_gold, h) = assign_gold_label(&low.text, &q.references, &cfg.sampler.gold);

    let needs_baseline = [Method::Se, Method::SeHsc, Method::Te, Method::Ev, Method::PTrue]
        .into_iter()
        .any(wants);
    let baseline = if needs_baseline {
        let n = cfg.reformulation.target_count * cfg.sampler.samples_per_input;
        sample_question(&q.question, context, n, &cfg.sampler, backend, chat)?
    } else {
        Vec::new()
    };

    let pool_texts = texts(&pool);
    let base_texts = texts(&baseline);
    let sr_needed = [Method::SreSr, Method::SreSrHsc, Method::SreSrHscNoRefine]
        .into_iter()
        .any(wants);
    let sr_scores = if sr_needed {
        Some(PairScores::compute(&pool_texts, backend, answer_embed)?)
    } else {
        None
    };
    let base_scores = if wants(Method::Se) || wants(Method::SeHsc) {
        Some(PairScores::compute(&base_texts, backend, answer_embed)?)
    } else {
        None
    };

    let sr_hsc: Option<HscOutcome> = match &sr_scores {
        Some(s) if wants(Method::SreSrHsc) || wants(Method::SreSrHscNoRefine) => {
            Some(hsc::cluster_detailed(&pool_texts, s, &cfg.hsc)?)
        }
        _ => None,
    };
    let sr_nli = match &sr_scores {
        Some(s) if wants(Method::SreSr) => Some(hsc::entailment_cluster(s)?),
        _ => None,
    };
    let se_nli = match &base_scores {
        Some(s) if wants(Method::Se) => Some(hsc::entailment_cluster(s)?),
        _ => None,
    };
    let se_hsc = match &base_scores {
        Some(s) if wants(Method::SeHsc) => Some(hsc::cluster(&base_texts, s, &cfg.hsc)?),
        _ => None,
    };

    let mut scores = BTreeMap::new();
    for &m in &methods {
        let value = match m {
            Method::Se => fraction_entropy(se_nli.as_ref().expect("computed when requested")),
            Method::SeHsc => fraction_entropy(se_hsc.as_ref().expect("computed when requested")),
            Method::SreSr => fraction_entropy(sr_nli.as_ref().expect("computed when requested")),
            Method::SreSrHsc => fraction_entropy(&sr_hsc.as_ref().expect("computed when requested").refined),
            Method::SreSrHscNoRefine => fraction_entropy(&sr_hsc.as_ref().expect("computed when requested").pre),
            Method::Tnll => t_nll(&low),
            Method::Te => token_entropy(&baseline),
            Method::TeSr => token_entropy(&pool),
            Method::Ev => embedding_variance_of(&baseline, backend, answer_embed),
            Method::EvSr => embedding_variance_of(&pool, backend, answer_embed),
            Method::PTrue => p_true(&q.question, &low.text, &base_texts, backend, chat),
        };
        scores.insert(m, optional(m, value)?);
    }

    let sample_partition = sr_hsc
        .as_ref()
        .map(|o| if wants(Method::SreSrHsc) { &o.refined } else { &o.pre })
        .or(sr_nli.as_ref());
    let base_partition = se_hsc.as_ref().or(se_nli.as_ref());

    let reformulations = if set.fallback {
        vec![ReformulationEntry {
            text: set.original.clone(),
            sim: 1.0,
        }]
    } else {
        let mut list = Vec::new();
        if cfg.reformulation.include_original {
            list.push(ReformulationEntry {
                text: set.original.clone(),
                sim: 1.0,
            });
        }
        list.extend(set.accepted.iter().map(|r| ReformulationEntry {
            text: r.text.clone(),
            sim: round9(r.similarity),
        }));
        list
    };

    Ok(RunRecord {
        query_id: q.query_id.clone(),
        question: q.question.clone(),
        context: q.context.clone(),
        references: q.references.clone(),
        reformulations,
        samples: entries(&pool, sample_partition),
        baseline_samples: entries(&baseline, base_partition),
        low_temp: LowTemp {
            text: low.text.clone(),
            y_gold,
        },
        h,
        scores,
        energies: Energies {
            pre: sr_hsc.as_ref().and_then(|o| o.pre.total_energy()).map(round9),
            post: sr_hsc.as_ref().and_then(|o| o.refined.total_energy()).map(round9),
        },
        flags: RecordFlags {
            short: set.short,
            fallback: set.fallback,
            reformulation_rounds: set.rounds,
            rejected_candidates: set.rejected.len(),
            refine_moves: sr_hsc.as_ref().map_or(0, |o| o.moves.len()),
        },
    })
}

/// Builds the configured backend behind the record/replay layer.
pub fn build_backend(cfg: &BackendConfig) -> Result<Arc<RecordReplay>> {
    use crate::backends::Mode;
    let upstream: Option<Arc<dyn Backend>> = if cfg.mode == Mode::Replay {
        None
    } else {
        Some(match cfg.kind {
            BackendKind::Http => Arc::new(HttpBackend::new(cfg.http.clone().with_env())),
            BackendKind::Synthetic => {
                let world = cfg
                    .world
                    .as_ref()
                    .ok_or_else(|| Error::Config("the synthetic backend needs a world file".into()))?;
                Arc::new(SyntheticBackend::from_path(world)?)
            }
        })
    };
    Ok(Arc::new(RecordReplay::new(
        cfg.mode,
        upstream,
        cfg.fixtures.as_deref(),
    )?))
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config: &'a RunConfig,
    prompt_digests: BTreeMap<&'static str, String>,
    questions: usize,
}

fn write_manifest(cfg: &RunConfig, questions: usize, dir: &Path) -> Result<()> {
    let mut prompt_digests = BTreeMap::new();
    prompt_digests.insert("reformulation", sha256_hex(&cfg.reformulation.prompt_template));
    prompt_digests.insert("answer_system", sha256_hex(&cfg.sampler.system_prompt));
    prompt_digests.insert(
        "answer_fewshot",
        sha256_hex(&serde_json::to_string(&cfg.sampler.fewshot)?),
    );
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        prompt_digests,
        questions,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Ids already present in `results.jsonl`. A trailing line cut off by an
/// interrupted run is removed from the file.
pub fn completed_ids(path: &Path) -> Result<HashSet<String>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut valid_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        let rec: RunRecord = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::InvalidInput(format!("{} holds an unreadable record: {e}", path.display())))?;
        done.insert(rec.query_id);
        valid_len += read as u64;
    }
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if valid_len < len {
        log::warn!("dropping a partial trailing line from {}", path.display());
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| f.set_len(valid_len))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(done)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub total: usize,
    pub resumed: usize,
    pub completed: usize,
    pub failed: usize,
    pub fixture_misses: usize,
}

impl RunSummary {
    /// Failed share of the questions attempted in this invocation.
    pub fn failure_rate(&self) -> f64 {
        let attempted = self.completed + self.failed;
        if attempted == 0 {
            0.0
        } else {
            self.failed as f64 / attempted as f64
        }
    }
}

#[derive(Serialize)]
struct FailureLine<'a> {
    query_id: &'a str,
    error: String,
}

fn is_fixture_miss(e: &Error) -> bool {
    matches!(e, Error::Backend(BackendError::FixtureMiss { .. }))
}

/// Processes every question not yet in the output directory's results.
///
/// Questions run on `cfg.workers` threads; lines are written in dataset
/// order. Per-question failures go to `failures.jsonl` and never abort the run.
pub fn run_experiment(cfg: &RunConfig, questions: &[QueryRecord], backend: &dyn Backend) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(cfg, questions.len(), dir)?;

    let results_path = dir.join(RESULTS_FILE);
    let done = completed_ids(&results_path)?;
    let pending: Vec<&QueryRecord> = questions.iter().filter(|q| !done.contains(&q.query_id)).collect();
    let mut summary = RunSummary {
        total: questions.len(),
        resumed: questions.len() - pending.len(),
        ..RunSummary::default()
    };
    if summary.resumed > 0 {
        log::info!(
            "resuming: {} of {} questions already done",
            summary.resumed,
            summary.total
        );
    }

    let mut results = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)
        .map_err(|e| Error::io(&results_path, e))?;
    let failures_path = dir.join(FAILURES_FILE);
    let mut failures = File::create(&failures_path).map_err(|e| Error::io(&failures_path, e))?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    let workers = cfg.workers.min(pending.len()).max(1);
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = pending.get(i) else { break };
                let outcome = process_question(q, cfg, backend);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // reorder buffer so lines land in dataset order
        let mut buffered: BTreeMap<usize, Result<RunRecord>> = BTreeMap::new();
        let mut cursor = 0;
        for (i, outcome) in rx {
            buffered.insert(i, outcome);
            while let Some(outcome) = buffered.remove(&cursor) {
                let q = pending[cursor];
                match outcome {
                    Ok(rec) => {
                        let line = serde_json::to_string(&rec)? + "\n";
                        results
                            .write_all(line.as_bytes())
                            .and_then(|_| results.flush())
                            .map_err(|e| Error::io(&results_path, e))?;
                        summary.completed += 1;
                    }
                    Err(e) => {
                        log::warn!("question {} failed: {e}", q.query_id);
                        if is_fixture_miss(&e) {
                            summary.fixture_misses += 1;
                        }
                        summary.failed += 1;
                        let line = serde_json::to_string(&FailureLine {
                            query_id: &q.query_id,
                            error: e.to_string(),
                        })? + "\n";
                        failures
                            .write_all(line.as_bytes())
                            .map_err(|e| Error::io(&failures_path, e))?;
                    }
                }
                cursor += 1;
            }
        }
        Ok(())
    })?;
    log::info!(
        "run finished: {} completed, {} failed, {} resumed",
        summary.completed,
        summary.failed,
        summary.resumed
    );
    Ok(summary)
}

/// Reads a run's records sorted by query id.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path: PathBuf = dir.join(RESULTS_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{} line {}: {e}", path.display(), n + 1)))?;
        records.push(rec);
    }
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(records)
}

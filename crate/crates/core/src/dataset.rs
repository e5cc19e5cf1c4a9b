//! Dataset ingestion and seeded subsampling.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    SquadV2,
    #[serde(rename = "triviaqa")]
    TriviaQa,
    #[default]
    Generic,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::SquadV2 => "squad_v2",
            DatasetFormat::TriviaQa => "triviaqa",
            DatasetFormat::Generic => "generic",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "squad_v2" | "squad" => Ok(DatasetFormat::SquadV2),
            "triviaqa" | "trivia_qa" => Ok(DatasetFormat::TriviaQa),
            "generic" | "jsonl" => Ok(DatasetFormat::Generic),
            other => Err(Error::Config(format!(
                "unknown dataset format {other:?} (expected squad_v2, triviaqa or generic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default)]
    pub references: Vec<String>,
    pub source: DatasetFormat,
}

fn ingest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn push_unique(refs: &mut Vec<String>, candidate: &str) {
    let c = candidate.trim();
    if !c.is_empty() && !refs.iter().any(|r| r == c) {
        refs.push(c.to_string());
    }
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<Value>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
    #[serde(default)]
    is_impossible: bool,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
}

fn parse_squad(path: &Path, text: &str) -> Result<Vec<QueryRecord>> {
    let file: SquadFile =
        serde_json::from_str(text).map_err(|e| ingest_err(path, format!("not a SQuAD-v2 file: {e}")))?;
    let mut out = Vec::new();
    for (a, article) in file.data.iter().enumerate() {
        for (p, para) in article.paragraphs.iter().enumerate() {
            for (q, raw) in para.qas.iter().enumerate() {
                let qa: SquadQa = serde_json::from_value(raw.clone()).map_err(|e| {
                    let id = raw.get("id").and_then(Value::as_str).unwrap_or("?");
                    ingest_err(path, format!("data[{a}].paragraphs[{p}].qas[{q}] (id {id}): {e}"))
                })?;
                let mut references = Vec::new();
                if !qa.is_impossible {
                    for ans in &qa.answers {
                        push_unique(&mut references, &ans.text);
                    }
                }
                out.push(QueryRecord {
                    query_id: qa.id,
                    question: qa.question,
                    context: Some(para.context.clone()),
                    references,
                    source: DatasetFormat::SquadV2,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct TriviaFile {
    #[serde(rename = "Data")]
    data: Vec<Value>,
}

#[derive(Deserialize)]
struct TriviaItem {
    #[serde(rename = "Question")]
    question: String,
    #[serde(rename = "QuestionId")]
    question_id: String,
    #[serde(rename = "Answer")]
    answer: TriviaAnswer,
}

#[derive(Deserialize)]
struct TriviaAnswer {
    #[serde(rename = "Value")]
    value: String,
    #[serde(rename = "Aliases", default)]
    aliases: Vec<String>,
}

fn parse_trivia(path: &Path, text: &str) -> Result<Vec<QueryRecord>> {
    let file: TriviaFile =
        serde_json::from_str(text).map_err(|e| ingest_err(path, format!("not a TriviaQA file: {e}")))?;
    file.data
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            let item: TriviaItem = serde_json::from_value(raw.clone()).map_err(|e| {
                let id = raw.get("QuestionId").and_then(Value::as_str).unwrap_or("?");
                ingest_err(path, format!("Data[{i}] (id {id}): {e}"))
            })?;
            let mut references = Vec::new();
            push_unique(&mut references, &item.answer.value);
            for alias in &item.answer.aliases {
                push_unique(&mut references, alias);
            }
            Ok(QueryRecord {
                query_id: item.question_id,
                question: item.question,
                context: None,
                references,
                source: DatasetFormat::TriviaQa,
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct GenericLine {
    #[serde(alias = "id")]
    query_id: Option<String>,
    question: String,
    context: Option<String>,
    #[serde(default, alias = "answers")]
    references: Vec<String>,
}

fn parse_generic(path: &Path, text: &str) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenericLine =
            serde_json::from_str(line).map_err(|e| ingest_err(path, format!("line {}: {e}", n + 1)))?;
        let mut references = Vec::new();
        for r in &rec.references {
            push_unique(&mut references, r);
        }
        out.push(QueryRecord {
            query_id: rec.query_id.unwrap_or_else(|| format!("line-{}", n + 1)),
            question: rec.question,
            context: rec.context.filter(|c| !c.trim().is_empty()),
            references,
            source: DatasetFormat::Generic,
        });
    }
    Ok(out)
}

/// Reads every question of a dataset file in file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QueryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let records = match format {
        DatasetFormat::SquadV2 => parse_squad(path, &text)?,
        DatasetFormat::TriviaQa => parse_trivia(path, &text)?,
        DatasetFormat::Generic => parse_generic(path, &text)?,
    };
    let mut seen = HashSet::new();
    for r in &records {
        if r.question.trim().is_empty() {
            return Err(ingest_err(path, format!("record {} has a blank question", r.query_id)));
        }
        if !seen.insert(r.query_id.as_str()) {
            return Err(ingest_err(path, format!("duplicate query id {}", r.query_id)));
        }
    }
    Ok(records)
}

/// Picks `k` of `0..n` uniformly without replacement, returned ascending.
///
/// ChaCha8 seeded with `seed_from_u64(seed)` drives a partial Fisher-Yates
/// shuffle: step `i` swaps position `i` with `i + next_u64() % (n - i)`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::Config(format!("sample size {k} exceeds dataset size {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + (rng.next_u64() % (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Loads a dataset, optionally drops contexts, and draws a seeded subsample
/// kept in file order.
pub fn ingest_dataset(
    path: &Path,
    format: DatasetFormat,
    use_context: bool,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<Vec<QueryRecord>> {
    let mut records = load_dataset(path, format)?;
    if !use_context {
        for r in &mut records {
            r.context = None;
        }
    }
    match sample_size {
        None => Ok(records),
        Some(k) => {
            let chosen = sample_indices(records.len(), k, seed)?;
            let mut slots: Vec<Option<QueryRecord>> = records.into_iter().map(Some).collect();
            Ok(chosen.into_iter().filter_map(|i| slots[i].take()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const SQUAD: &str = r#"{"version":"v2.0","data":[{"title":"T","paragraphs":[{"context":"Paris is in France.","qas":[
        {"id":"q1","question":"Where is Paris?","answers":[{"text":"France","answer_start":12},{"text":"France","answer_start":12}],"is_impossible":false},
        {"id":"q2","question":"Where is Lyon?","answers":[],"plausible_answers":[{"text":"France","answer_start":12}],"is_impossible":true}]}]}]}"#;

    #[test]
    fn squad_ingest() {
        let f = write(SQUAD);
        let recs = ingest_dataset(f.path(), DatasetFormat::SquadV2, true, None, 0).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].references, vec!["France".to_string()]);
        assert_eq!(recs[0].context.as_deref(), Some("Paris is in France."));
        assert!(recs[1].references.is_empty());
        let bare = ingest_dataset(f.path(), DatasetFormat::SquadV2, false, None, 0).unwrap();
        assert!(bare.iter().all(|r| r.context.is_none()));
    }

    #[test]
    fn trivia_ingest() {
        let f = write(
            r#"{"Data":[{"Question":"Capital of France?","QuestionId":"tq1","Answer":{"Value":"Paris","Aliases":["Paris","Paris, France"]}}]}"#,
        );
        let recs = ingest_dataset(f.path(), DatasetFormat::TriviaQa, true, None, 0).unwrap();
        assert_eq!(
            recs[0].references,
            vec!["Paris".to_string(), "Paris, France".to_string()]
        );
        assert!(recs[0].context.is_none());
    }

    #[test]
    fn errors_name_the_offending_record() {
        let f = write(
            r#"{"Data":[{"Question":"ok","QuestionId":"a","Answer":{"Value":"x"}},{"Question":"bad","QuestionId":"b7"}]}"#,
        );
        let err = ingest_dataset(f.path(), DatasetFormat::TriviaQa, true, None, 0).unwrap_err();
        assert!(err.to_string().contains("b7"), "{err}");

        let g = write("{\"question\":\"q\"}\nnot json\n");
        let err = ingest_dataset(g.path(), DatasetFormat::Generic, true, None, 0).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn generic_ingest_and_duplicates() {
        let f =
            write("{\"id\":\"a\",\"question\":\"q1\",\"answers\":[\"x\"]}\n{\"question\":\"q2\",\"context\":\"c\"}\n");
        let recs = ingest_dataset(f.path(), DatasetFormat::Generic, true, None, 0).unwrap();
        assert_eq!(recs[0].query_id, "a");
        assert_eq!(recs[1].query_id, "line-2");
        assert_eq!(recs[1].context.as_deref(), Some("c"));

        let d = write("{\"id\":\"a\",\"question\":\"q1\"}\n{\"id\":\"a\",\"question\":\"q2\"}\n");
        assert!(matches!(
            ingest_dataset(d.path(), DatasetFormat::Generic, true, None, 0),
            Err(Error::Ingest { .. })
        ));
    }

    #[test]
    fn seeded_sampling() {
        let a = sample_indices(1000, 500, 7).unwrap();
        assert_eq!(a, sample_indices(1000, 500, 7).unwrap());
        assert_ne!(a, sample_indices(1000, 500, 8).unwrap());
        assert_eq!(a.len(), 500);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(5, 5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(sample_indices(3, 4, 0), Err(Error::Config(_))));
    }
}

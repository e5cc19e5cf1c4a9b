//! Content-addressed caching and the JSONL fixture store.
//!
//! Every backend request is reduced to a canonical JSON payload and hashed into a
//! [`FixtureKey`]. The store is append-only, one object per line:
//! `{"key": <sha256 hex>, "kind": "chat"|"embed"|"nli", "request": {...}, "response": ...}`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    check_embed_dims, check_embed_inputs, check_nli_inputs, Backend, BackendError, ChatRequest, EmbeddingVector,
    Generation, NliScores,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    Chat,
    Embed,
    Nli,
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixtureKind::Chat => "chat",
            FixtureKind::Embed => "embed",
            FixtureKind::Nli => "nli",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixtureKey {
    pub kind: FixtureKind,
    pub digest: String,
}

impl FixtureKey {
    pub fn new(kind: FixtureKind, payload: &Value) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(kind.to_string().as_bytes());
        hasher.update(b"\n");
        hasher.update(canonical_json(payload).as_bytes());
        Self {
            kind,
            digest: hex::encode(hasher.finalize()),
        }
    }
}

/// Serializes a JSON value with sorted object keys and numbers fixed to six decimals.
///
/// Integer-valued numbers print without a fractional part, so `1`, `1.0` and
/// `1.0000001` all canonicalize to `1`.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => {
            out.push_str(&value.to_string());
        }
        Value::Number(n) => out.push_str(&canonical_number(n)),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

fn canonical_number(n: &serde_json::Number) -> String {
    if let Some(i) = n.as_i64() {
        return i.to_string();
    }
    if let Some(u) = n.as_u64() {
        return u.to_string();
    }
    let x = n.as_f64().unwrap_or(f64::NAN);
    let scaled = (x * 1e6).round();
    if scaled == 0.0 {
        return "0".into();
    }
    if scaled % 1e6 == 0.0 && scaled.abs() < 9.0e15 {
        return format!("{}", (scaled / 1e6) as i64);
    }
    let s = format!("{:.6}", scaled / 1e6);
    s.trim_end_matches('0').to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreLine {
    key: String,
    kind: FixtureKind,
    request: Value,
    response: Value,
}

/// In-memory view of a fixture file plus an optional append handle.
pub struct FixtureStore {
    path: PathBuf,
    entries: HashMap<FixtureKey, Value>,
    writer: Option<File>,
}

impl FixtureStore {
    /// Loads every entry, verifying digests and response shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| store_err(&path, e.to_string()))?;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| store_err(&path, e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: StoreLine = serde_json::from_str(&line)
                    .map_err(|e| store_err(&path, format!("line {}: unparseable entry: {e}", lineno + 1)))?;
                let key = FixtureKey::new(entry.kind, &entry.request);
                if key.digest != entry.key {
                    return Err(store_err(
                        &path,
                        format!(
                            "line {}: key {} does not match its request digest",
                            lineno + 1,
                            entry.key
                        ),
                    ));
                }
                validate_response(entry.kind, &entry.response)
                    .map_err(|msg| store_err(&path, format!("key {}: {msg}", entry.key)))?;
                entries.entry(key).or_insert(entry.response);
            }
        }
        Ok(Self {
            path,
            entries,
            writer: None,
        })
    }

    /// Loads the store and opens it for appending, creating the file if needed.
    pub fn open_for_append(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let mut store = Self::load(&path)?;
        if let Some(parent) = store.path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| store_err(&store.path, e.to_string()))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&store.path)
            .map_err(|e| store_err(&store.path, e.to_string()))?;
        store.writer = Some(file);
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &FixtureKey) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, key: FixtureKey, request: &Value, response: Value) -> Result<(), BackendError> {
        if let Some(file) = self.writer.as_mut() {
            let line = StoreLine {
                key: key.digest.clone(),
                kind: key.kind,
                request: request.clone(),
                response: response.clone(),
            };
            let mut text = serde_json::to_string(&line).map_err(|e| store_err(&self.path, e.to_string()))?;
            text.push('\n');
            file.write_all(text.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| store_err(&self.path, e.to_string()))?;
        }
        self.entries.insert(key, response);
        Ok(())
    }
}

fn store_err(path: &Path, message: String) -> BackendError {
    BackendError::Store {
        path: path.display().to_string(),
        message,
    }
}

fn validate_response(kind: FixtureKind, response: &Value) -> Result<(), String> {
    match kind {
        FixtureKind::Chat => {
            let gens: Vec<Generation> = serde_json::from_value(response.clone()).map_err(|e| e.to_string())?;
            for g in &gens {
                g.validate(false).map_err(|e| e.to_string())?;
            }
        }
        FixtureKind::Embed => {
            serde_json::from_value::<EmbeddingVector>(response.clone()).map_err(|e| e.to_string())?;
        }
        FixtureKind::Nli => {
            let s: NliScores = serde_json::from_value(response.clone()).map_err(|e| e.to_string())?;
            s.validate().map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Call upstream; cache responses in memory only.
    Live,
    /// Call upstream on a miss and append every new response to the store.
    Record,
    /// Serve only from the store; a miss is an error.
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(format!("unknown mode {other:?} (expected live, record or replay)")),
        }
    }
}

/// Caching wrapper that implements live, record and replay semantics over any backend.
pub struct RecordReplay {
    mode: Mode,
    upstream: Option<Arc<dyn Backend>>,
    store: RwLock<FixtureStore>,
    // serializes store appends so the file never interleaves partial lines
    append_lock: Mutex<()>,
    upstream_calls: AtomicUsize,
}

impl RecordReplay {
    pub fn new(
        mode: Mode,
        upstream: Option<Arc<dyn Backend>>,
        store_path: Option<&Path>,
    ) -> Result<Self, BackendError> {
        let store = match (mode, store_path) {
            (Mode::Live, None) => FixtureStore {
                path: PathBuf::new(),
                entries: HashMap::new(),
                writer: None,
            },
            (Mode::Live, Some(p)) => FixtureStore::load(p)?,
            (Mode::Record, Some(p)) => FixtureStore::open_for_append(p)?,
            (Mode::Replay, Some(p)) => {
                if !p.exists() {
                    return Err(store_err(p, "fixture store does not exist".into()));
                }
                FixtureStore::load(p)?
            }
            (m, None) => {
                return Err(BackendError::Store {
                    path: String::new(),
                    message: format!("{m:?} mode requires a fixture store path"),
                })
            }
        };
        if mode != Mode::Replay && upstream.is_none() {
            return Err(BackendError::Protocol(format!(
                "{mode:?} mode requires an upstream backend"
            )));
        }
        Ok(Self {
            mode,
            upstream: if mode == Mode::Replay { None } else { upstream },
            store: RwLock::new(store),
            append_lock: Mutex::new(()),
            upstream_calls: AtomicUsize::new(0),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of upstream calls made over this wrapper's lifetime.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn store_len(&self) -> usize {
        self.store.read().expect("store lock poisoned").len()
    }

    fn lookup(&self, key: &FixtureKey) -> Option<Value> {
        self.store.read().expect("store lock poisoned").get(key).cloned()
    }

    fn upstream(&self, key: &FixtureKey) -> Result<&Arc<dyn Backend>, BackendError> {
        self.upstream.as_ref().ok_or_else(|| BackendError::FixtureMiss {
            kind: key.kind,
            digest: key.digest.clone(),
        })
    }

    /// Inserts a fresh response unless a concurrent caller got there first;
    /// returns whichever value is now canonical for the key.
    fn insert(&self, key: FixtureKey, request: &Value, response: Value) -> Result<Value, BackendError> {
        let _guard = self.append_lock.lock().expect("append lock poisoned");
        let mut store = self.store.write().expect("store lock poisoned");
        if let Some(existing) = store.get(&key) {
            return Ok(existing.clone());
        }
        store.append(key, request, response.clone())?;
        Ok(response)
    }
}

fn decode<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, BackendError> {
    serde_json::from_value(value).map_err(|e| BackendError::Protocol(e.to_string()))
}

fn encode<T: Serialize>(value: &T) -> Result<Value, BackendError> {
    serde_json::to_value(value).map_err(|e| BackendError::Protocol(e.to_string()))
}

pub(crate) fn embed_payload(model: &str, text: &str) -> Value {
    serde_json::json!({ "model": model, "input": [text] })
}

pub(crate) fn nli_payload(premise: &str, hypothesis: &str) -> Value {
    serde_json::json!({ "premise": premise, "hypothesis": hypothesis })
}

impl Backend for RecordReplay {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<Generation>, BackendError> {
        request.validate()?;
        let payload = request.wire_payload();
        let key = FixtureKey::new(FixtureKind::Chat, &payload);
        if let Some(hit) = self.lookup(&key) {
            return decode(hit);
        }
        let upstream = self.upstream(&key)?;
        self.upstream_calls.fetch_add(1, Ordering::SeqCst);
        let gens = upstream.chat(request)?;
        if gens.len() != request.num_samples as usize {
            return Err(BackendError::Protocol(format!(
                "requested {} generations, got {}",
                request.num_samples,
                gens.len()
            )));
        }
        for g in &gens {
            g.validate(request.want_logprobs)?;
        }
        let stored = self.insert(key, &payload, encode(&gens)?)?;
        decode(stored)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_embed_inputs(texts)?;
        let keyed: Vec<(FixtureKey, Value)> = texts
            .iter()
            .map(|t| {
                let payload = embed_payload(model, t);
                (FixtureKey::new(FixtureKind::Embed, &payload), payload)
            })
            .collect();

        let mut seen = HashSet::new();
        let mut missing: Vec<usize> = Vec::new();
        for (i, (key, _)) in keyed.iter().enumerate() {
            if self.lookup(key).is_none() && seen.insert(key.digest.clone()) {
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            let upstream = self.upstream(&keyed[missing[0]].0)?;
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            self.upstream_calls.fetch_add(1, Ordering::SeqCst);
            let vectors = upstream.embed(model, &batch)?;
            if vectors.len() != batch.len() {
                return Err(BackendError::Protocol(format!(
                    "requested {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            check_embed_dims(&vectors)?;
            for (&i, v) in missing.iter().zip(vectors) {
                let (key, payload) = &keyed[i];
                self.insert(key.clone(), payload, encode(&v)?)?;
            }
        }
        let out: Vec<EmbeddingVector> = keyed
            .iter()
            .map(|(key, _)| {
                let v = self.lookup(key).ok_or_else(|| BackendError::FixtureMiss {
                    kind: key.kind,
                    digest: key.digest.clone(),
                })?;
                decode(v)
            })
            .collect::<Result<_, _>>()?;
        check_embed_dims(&out)?;
        Ok(out)
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        Ok(self
            .nli_batch(&[(premise.to_string(), hypothesis.to_string())])?
            .remove(0))
    }

    fn nli_batch(&self, pairs: &[(String, String)]) -> Result<Vec<NliScores>, BackendError> {
        for (p, h) in pairs {
            check_nli_inputs(p, h)?;
        }
        let keyed: Vec<(FixtureKey, Value)> = pairs
            .iter()
            .map(|(p, h)| {
                let payload = nli_payload(p, h);
                (FixtureKey::new(FixtureKind::Nli, &payload), payload)
            })
            .collect();
        let mut seen = HashSet::new();
        let missing: Vec<usize> = keyed
            .iter()
            .enumerate()
            .filter(|(_, (key, _))| self.lookup(key).is_none() && seen.insert(key.digest.clone()))
            .map(|(i, _)| i)
            .collect();
        if !missing.is_empty() {
            let upstream = self.upstream(&keyed[missing[0]].0)?;
            let batch: Vec<(String, String)> = missing.iter().map(|&i| pairs[i].clone()).collect();
            self.upstream_calls.fetch_add(batch.len(), Ordering::SeqCst);
            let scores = upstream.nli_batch(&batch)?;
            if scores.len() != batch.len() {
                return Err(BackendError::Protocol("NLI batch size mismatch".into()));
            }
            for (&i, s) in missing.iter().zip(scores) {
                s.validate()?;
                let (key, payload) = &keyed[i];
                self.insert(key.clone(), payload, encode(&s)?)?;
            }
        }
        keyed
            .iter()
            .map(|(key, _)| {
                let v = self.lookup(key).ok_or_else(|| BackendError::FixtureMiss {
                    kind: key.kind,
                    digest: key.digest.clone(),
                })?;
                decode(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Message, Role};
    use proptest::prelude::*;
    use serde_json::json;

    struct Counting;

    impl Backend for Counting {
        fn chat(&self, request: &ChatRequest) -> Result<Vec<Generation>, BackendError> {
            Ok((0..request.num_samples)
                .map(|i| Generation {
                    text: format!("answer {i}"),
                    token_logprobs: vec![super::super::TokenLogprob {
                        token: "answer".into(),
                        logprob: -0.5,
                    }],
                    top_logprobs: vec![],
                })
                .collect())
        }

        fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
            texts
                .iter()
                .map(|t| EmbeddingVector::new(vec![t.len() as f64, 1.0]))
                .collect()
        }

        fn nli(&self, _p: &str, _h: &str) -> Result<NliScores, BackendError> {
            NliScores::new(0.6, 0.3, 0.1)
        }
    }

    fn request(text: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![Message::new(Role::User, text)],
            temperature: 0.8,
            num_samples: 3,
            max_tokens: 16,
            want_logprobs: true,
            top_logprobs: 0,
            seed: None,
        }
    }

    #[test]
    fn canonical_numbers() {
        assert_eq!(canonical_json(&json!(1.0)), "1");
        assert_eq!(canonical_json(&json!(1)), "1");
        assert_eq!(canonical_json(&json!(0.8)), "0.8");
        assert_eq!(canonical_json(&json!(0.80000004)), "0.8");
        assert_eq!(canonical_json(&json!(-0.0000001)), "0");
        assert_eq!(canonical_json(&json!(-2.5)), "-2.5");
        assert_eq!(
            canonical_json(&json!({"b": 1, "a": [true, null, "x"]})),
            r#"{"a":[true,null,"x"],"b":1}"#
        );
    }

    #[test]
    fn live_cache_serves_repeats_without_upstream() {
        let rr = RecordReplay::new(Mode::Live, Some(Arc::new(Counting)), None).unwrap();
        let a = rr.chat(&request("q")).unwrap();
        let b = rr.chat(&request("q")).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(rr.upstream_calls(), 1);
    }

    #[test]
    fn record_then_replay_session() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let rr = RecordReplay::new(Mode::Record, Some(Arc::new(Counting)), Some(&path)).unwrap();
            rr.chat(&request("one")).unwrap();
            rr.embed("e", &["hello".into()]).unwrap();
            rr.nli("a", "b").unwrap();
            assert_eq!(rr.upstream_calls(), 3);
        }
        let store = FixtureStore::load(&path).unwrap();
        assert_eq!(store.len(), 3);

        let replay = RecordReplay::new(Mode::Replay, None, Some(&path)).unwrap();
        replay.chat(&request("one")).unwrap();
        replay.embed("e", &["hello".into()]).unwrap();
        replay.nli("a", "b").unwrap();
        assert_eq!(replay.upstream_calls(), 0);

        let miss = replay.chat(&request("two"));
        assert!(matches!(
            miss,
            Err(BackendError::FixtureMiss {
                kind: FixtureKind::Chat,
                ..
            })
        ));
        assert!(matches!(replay.nli("b", "a"), Err(BackendError::FixtureMiss { .. })));
    }

    #[test]
    fn corrupt_store_reports_offending_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let request = json!({"premise": "a", "hypothesis": "b"});
        let key = FixtureKey::new(FixtureKind::Nli, &request);
        let line = json!({
            "key": key.digest,
            "kind": "nli",
            "request": request,
            "response": {"entailment": 0.9, "neutral": 0.9, "contradiction": 0.9},
        });
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = FixtureStore::load(&path).err().unwrap().to_string();
        assert!(err.contains(&key.digest), "{err}");

        let tampered = json!({"key": "deadbeef", "kind": "nli", "request": request,
            "response": {"entailment": 0.9, "neutral": 0.05, "contradiction": 0.05}});
        std::fs::write(&path, format!("{tampered}\n")).unwrap();
        let err = FixtureStore::load(&path).err().unwrap().to_string();
        assert!(err.contains("deadbeef"), "{err}");
    }

    #[test]
    fn embed_records_per_text_and_dedups_batch() {
        let rr = RecordReplay::new(Mode::Live, Some(Arc::new(Counting)), None).unwrap();
        let out = rr.embed("e", &["x".into(), "yy".into(), "x".into()]).unwrap();
        assert_eq!(out[0], out[2]);
        assert_eq!(rr.store_len(), 2);
        rr.embed("e", &["yy".into()]).unwrap();
        assert_eq!(rr.upstream_calls(), 1);
    }

    #[test]
    fn replay_requires_existing_store() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RecordReplay::new(Mode::Replay, None, Some(&dir.path().join("nope.jsonl"))).is_err());
        assert!(RecordReplay::new(Mode::Record, None, Some(&dir.path().join("s.jsonl"))).is_err());
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<bool>().prop_map(Value::from),
            (-1000i64..1000).prop_map(Value::from),
            (-1000.0f64..1000.0).prop_map(Value::from),
            "[a-z]{0,6}".prop_map(Value::from),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
                prop::collection::vec(("[a-e]{1,3}", inner), 0..5)
                    .prop_map(|kv| { Value::Object(kv.into_iter().collect()) }),
            ]
        })
    }

    fn reorder_keys(v: &Value, rotate: usize) -> String {
        // hand-written serializer that emits object keys in a rotated order
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                if !keys.is_empty() {
                    let r = rotate % keys.len();
                    keys.rotate_left(r);
                    keys.reverse();
                }
                let parts: Vec<String> = keys
                    .iter()
                    .map(|k| format!("{}:{}", Value::String((*k).clone()), reorder_keys(&m[*k], rotate + 1)))
                    .collect();
                format!("{{{}}}", parts.join(","))
            }
            Value::Array(a) => {
                let parts: Vec<String> = a.iter().map(|x| reorder_keys(x, rotate + 1)).collect();
                format!("[{}]", parts.join(","))
            }
            other => other.to_string(),
        }
    }

    proptest! {
        #[test]
        fn digest_is_independent_of_field_order(v in arb_json(), rotate in 0usize..7) {
            let text = reorder_keys(&v, rotate);
            let reparsed: Value = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(
                FixtureKey::new(FixtureKind::Chat, &v),
                FixtureKey::new(FixtureKind::Chat, &reparsed)
            );
        }

        #[test]
        fn sub_micro_perturbations_share_a_digest(x in -100.0f64..100.0) {
            let snapped = (x * 1e6).round() / 1e6;
            let a = json!({"temperature": snapped});
            let b = json!({"temperature": snapped + 1e-9});
            prop_assert_eq!(canonical_json(&a), canonical_json(&b));
        }
    }
}

//! Blocking JSON-over-HTTP client for chat, embedding and NLI servers.
//!
//! Chat uses the common completions shape
//! (`{model, messages, temperature, n, max_tokens, logprobs, top_logprobs}`),
//! embeddings `{model, input}` → `{data: [{embedding}]}`, and NLI a small custom
//! endpoint `{premise, hypothesis}` → `{entailment, neutral, contradiction}`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ureq::Agent;

use super::fixture::nli_payload;
use super::{
    check_embed_dims, check_embed_inputs, check_nli_inputs, Backend, BackendError, ChatRequest, EmbeddingVector,
    Generation, NliScores, TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub nli_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub concurrency: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            chat_url: None,
            embed_url: None,
            nli_url: None,
            api_key: None,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            concurrency: 8,
        }
    }
}

impl HttpConfig {
    /// Fills unset endpoints and the key from `SRE_CHAT_URL`, `SRE_EMBED_URL`,
    /// `SRE_NLI_URL` and `SRE_API_KEY`.
    pub fn with_env(mut self) -> Self {
        let env = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        self.chat_url = self.chat_url.or_else(|| env("SRE_CHAT_URL"));
        self.embed_url = self.embed_url.or_else(|| env("SRE_EMBED_URL"));
        self.nli_url = self.nli_url.or_else(|| env("SRE_NLI_URL"));
        self.api_key = self.api_key.or_else(|| env("SRE_API_KEY"));
        self
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: Agent,
    limiter: Limiter,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let limit = config.concurrency.max(1);
        Self {
            config,
            agent,
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit,
            },
        }
    }

    fn endpoint<'a>(&self, url: &'a Option<String>, what: &str) -> Result<&'a str, BackendError> {
        url.as_deref().ok_or_else(|| BackendError::Unavailable {
            attempts: 0,
            message: format!("no {what} endpoint configured"),
        })
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let _slot = self.limiter.acquire();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retryable(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(BackendError::Protocol(format!(
                "HTTP {status}: {}",
                text.chars().take(200).collect::<String>()
            ))));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Failure::Fatal(BackendError::Protocol(format!("invalid JSON body: {e}"))))
    }

    /// POSTs with retries on transport errors and 5xx responses.
    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.post_once(url, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    log::warn!("POST {url} attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts,
            message: last,
        })
    }
}

fn protocol(msg: impl Into<String>) -> BackendError {
    BackendError::Protocol(msg.into())
}

fn parse_token(v: &Value) -> Result<TokenLogprob, BackendError> {
    let token = v["token"]
        .as_str()
        .ok_or_else(|| protocol("logprob entry lacks token"))?;
    let logprob = v["logprob"]
        .as_f64()
        .ok_or_else(|| protocol("logprob entry lacks logprob"))?;
    Ok(TokenLogprob {
        token: token.to_string(),
        logprob: logprob.min(0.0),
    })
}

/// Parses a completions response body into generations.
pub(crate) fn parse_chat_response(body: &Value) -> Result<Vec<Generation>, BackendError> {
    let choices = body["choices"]
        .as_array()
        .ok_or_else(|| protocol("response lacks choices"))?;
    let mut indexed: Vec<(u64, Generation)> = Vec::with_capacity(choices.len());
    for (pos, choice) in choices.iter().enumerate() {
        let text = choice["message"]["content"]
            .as_str()
            .or_else(|| choice["text"].as_str())
            .unwrap_or("")
            .to_string();
        let mut token_logprobs = Vec::new();
        let mut top_logprobs = Vec::new();
        if let Some(content) = choice["logprobs"]["content"].as_array() {
            for entry in content {
                token_logprobs.push(parse_token(entry)?);
                let alts = match entry["top_logprobs"].as_array() {
                    Some(list) => list.iter().map(parse_token).collect::<Result<Vec<_>, _>>()?,
                    None => Vec::new(),
                };
                top_logprobs.push(alts);
            }
        }
        let index = choice["index"].as_u64().unwrap_or(pos as u64);
        indexed.push((
            index,
            Generation {
                text,
                token_logprobs,
                top_logprobs,
            },
        ));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, g)| g).collect())
}

pub(crate) fn parse_embed_response(body: &Value) -> Result<Vec<EmbeddingVector>, BackendError> {
    let data = body["data"]
        .as_array()
        .ok_or_else(|| protocol("embedding response lacks data"))?;
    let mut indexed = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let values: Vec<f64> = item["embedding"]
            .as_array()
            .ok_or_else(|| protocol("embedding item lacks embedding"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| protocol("non-numeric embedding entry")))
            .collect::<Result<_, _>>()?;
        let index = item["index"].as_u64().unwrap_or(pos as u64);
        indexed.push((index, EmbeddingVector::new(values)?));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, v)| v).collect())
}

pub(crate) fn parse_nli_response(body: &Value) -> Result<NliScores, BackendError> {
    let field = |name: &str| {
        body[name]
            .as_f64()
            .ok_or_else(|| protocol(format!("NLI response lacks {name}")))
    };
    NliScores::new(field("entailment")?, field("neutral")?, field("contradiction")?)
}

impl Backend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<Generation>, BackendError> {
        request.validate()?;
        let url = self.endpoint(&self.config.chat_url, "chat")?;
        let body = self.post(url, &request.wire_payload())?;
        let gens = parse_chat_response(&body)?;
        if gens.len() != request.num_samples as usize {
            return Err(protocol(format!(
                "requested {} generations, got {}",
                request.num_samples,
                gens.len()
            )));
        }
        for g in &gens {
            g.validate(request.want_logprobs)?;
        }
        Ok(gens)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_embed_inputs(texts)?;
        let url = self.endpoint(&self.config.embed_url, "embedding")?;
        let body = serde_json::json!({ "model": model, "input": texts });
        let vectors = parse_embed_response(&self.post(url, &body)?)?;
        if vectors.len() != texts.len() {
            return Err(protocol(format!(
                "requested {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        check_embed_dims(&vectors)?;
        Ok(vectors)
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        check_nli_inputs(premise, hypothesis)?;
        let url = self.endpoint(&self.config.nli_url, "NLI")?;
        parse_nli_response(&self.post(url, &nli_payload(premise, hypothesis))?)
    }

    fn nli_batch(&self, pairs: &[(String, String)]) -> Result<Vec<NliScores>, BackendError> {
        let workers = self.limiter.limit.min(pairs.len());
        if workers <= 1 {
            return pairs.iter().map(|(p, h)| self.nli(p, h)).collect();
        }
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<NliScores, BackendError>>>> =
            pairs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= pairs.len() {
                        break;
                    }
                    let (p, h) = &pairs[i];
                    *results[i].lock().expect("result slot poisoned") = Some(self.nli(p, h));
                });
            }
        });
        results
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("result slot poisoned")
                    .unwrap_or_else(|| Err(protocol("NLI worker produced no result")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Message, Role};
    use serde_json::json;

    #[test]
    fn parses_completions_with_logprobs() {
        let body = json!({
            "choices": [
                {"index": 1, "message": {"role": "assistant", "content": "Lyon"},
                 "logprobs": {"content": [{"token": "Lyon", "logprob": -1.2, "top_logprobs": []}]}},
                {"index": 0, "message": {"role": "assistant", "content": "Paris"},
                 "logprobs": {"content": [{"token": "Paris", "logprob": -0.1,
                    "top_logprobs": [{"token": "Paris", "logprob": -0.1}, {"token": "Lyon", "logprob": -2.5}]}]}}
            ]
        });
        let gens = parse_chat_response(&body).unwrap();
        assert_eq!(gens[0].text, "Paris");
        assert_eq!(gens[0].top_logprobs[0].len(), 2);
        assert_eq!(gens[1].token_logprobs[0].logprob, -1.2);
    }

    #[test]
    fn rejects_malformed_nli() {
        assert!(parse_nli_response(&json!({"entailment": 0.5})).is_err());
        assert!(parse_nli_response(&json!({"entailment": 0.5, "neutral": 0.5, "contradiction": 0.5})).is_err());
        let ok = parse_nli_response(&json!({"entailment": 0.8, "neutral": 0.15, "contradiction": 0.05})).unwrap();
        assert!(ok.is_entailment_argmax());
    }

    #[test]
    fn embed_response_sorted_by_index() {
        let body = json!({"data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}]});
        let v = parse_embed_response(&body).unwrap();
        assert_eq!(v[0].values(), &[1.0, 0.0]);
        assert!(parse_embed_response(&json!({"data": [{"embedding": [0.0, 0.0]}]})).is_err());
    }

    /// Serves the scripted `(status, body)` replies one connection each and
    /// returns the raw requests it saw.
    fn mock_server(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(head + &String::from_utf8(buf).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn body_of(request: &str) -> Value {
        serde_json::from_str(request.split_once("\r\n\r\n").unwrap().1).unwrap()
    }

    fn fast_config() -> HttpConfig {
        HttpConfig {
            max_attempts: 3,
            backoff_ms: 1,
            timeout_secs: 5,
            ..HttpConfig::default()
        }
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let ok = json!({"entailment": 0.7, "neutral": 0.2, "contradiction": 0.1}).to_string();
        let (url, server) = mock_server(vec![(503, "{}".into()), (200, ok)]);
        let backend = HttpBackend::new(HttpConfig {
            nli_url: Some(url),
            api_key: Some("k3y".into()),
            ..fast_config()
        });
        let s = backend.nli("It is Paris.", "Paris").unwrap();
        assert_eq!(s.entailment, 0.7);
        let seen = server.join().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].contains("Bearer k3y"));
        assert_eq!(body_of(&seen[1])["premise"], "It is Paris.");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, server) = mock_server(vec![(400, "{\"error\": \"bad model\"}".into())]);
        let backend = HttpBackend::new(HttpConfig {
            embed_url: Some(url),
            ..fast_config()
        });
        let err = backend.embed("m", &["x".to_string()]).unwrap_err();
        assert!(
            matches!(err, BackendError::Protocol(ref m) if m.contains("400")),
            "{err}"
        );
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn persistent_failures_exhaust_attempts() {
        let (url, server) = mock_server(vec![(500, "{}".into()); 3]);
        let backend = HttpBackend::new(HttpConfig {
            embed_url: Some(url),
            ..fast_config()
        });
        let err = backend.embed("m", &["x".to_string()]).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable { attempts: 3, .. }), "{err}");
        server.join().unwrap();
    }

    #[test]
    fn chat_roundtrip_checks_sample_count() {
        let body = json!({"choices": [{"index": 0, "message": {"content": "Paris"},
            "logprobs": {"content": [{"token": "Paris", "logprob": -0.2, "top_logprobs": []}]}}]})
        .to_string();
        let (url, server) = mock_server(vec![(200, body.clone()), (200, body)]);
        let backend = HttpBackend::new(HttpConfig {
            chat_url: Some(url),
            ..fast_config()
        });
        let mut req = ChatRequest {
            model: "m".into(),
            messages: vec![Message::new(Role::User, "Capital of France?")],
            temperature: 0.8,
            num_samples: 1,
            max_tokens: 8,
            want_logprobs: true,
            top_logprobs: 0,
            seed: None,
        };
        assert_eq!(backend.chat(&req).unwrap()[0].text, "Paris");
        req.num_samples = 2;
        assert!(matches!(backend.chat(&req), Err(BackendError::Protocol(_))));
        let seen = server.join().unwrap();
        assert_eq!(body_of(&seen[0])["max_tokens"], 8);
    }

    #[test]
    fn missing_endpoint_is_unavailable() {
        let backend = HttpBackend::new(HttpConfig::default());
        let err = backend.nli("a", "b").unwrap_err();
        assert!(matches!(err, BackendError::Unavailable { attempts: 0, .. }));
    }
}

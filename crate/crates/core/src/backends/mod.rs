//! Model inference behind a single trait.
//!
//! Everything that talks to a language model, a sentence embedder or an NLI
//! classifier goes through [`Backend`]. Three implementations ship:
//!
//! - [`HttpBackend`]: JSON-over-HTTP client for inference servers.
//! - [`SyntheticBackend`]: a deterministic simulated model driven by a world file,
//!   used for demos and for producing offline fixtures.
//! - [`RecordReplay`]: wraps any backend with a content-addressed cache and a
//!   JSONL fixture store (live / record / replay).

mod fixture;
mod http;
mod synthetic;

pub use fixture::{canonical_json, FixtureKey, FixtureKind, FixtureStore, Mode, RecordReplay};
pub use http::{HttpBackend, HttpConfig};
pub use synthetic::{SyntheticBackend, World, WorldQuestion};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("fixture miss for {kind} request {digest}")]
    FixtureMiss { kind: FixtureKind, digest: String },

    #[error("blank input text at position {0}")]
    BlankInput(usize),

    #[error("fixture store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// A chat-completion request, model-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub num_samples: u32,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    /// Width of the per-position alternative list; 0 disables it.
    pub top_logprobs: u32,
    /// Distinguishes otherwise identical requests (e.g. reformulation rounds).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.num_samples == 0 {
            return Err(BackendError::Protocol("num_samples must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(BackendError::Protocol(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.temperature == 0.0 && self.num_samples != 1 {
            return Err(BackendError::Protocol(
                "temperature 0 requests a single deterministic sample".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Protocol("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// The JSON body sent over the wire; also the payload fixture keys hash.
    pub fn wire_payload(&self) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "n": self.num_samples,
            "max_tokens": self.max_tokens,
            "logprobs": self.want_logprobs,
        });
        if self.want_logprobs && self.top_logprobs > 0 {
            body["top_logprobs"] = self.top_logprobs.into();
        }
        if let Some(seed) = self.seed {
            body["seed"] = seed.into();
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Vec<TokenLogprob>,
    /// One list of alternatives per generated position.
    #[serde(default)]
    pub top_logprobs: Vec<Vec<TokenLogprob>>,
}

impl Generation {
    pub fn validate(&self, want_logprobs: bool) -> Result<(), BackendError> {
        if want_logprobs && self.token_logprobs.is_empty() && !self.text.is_empty() {
            return Err(BackendError::Protocol("generation lacks token logprobs".into()));
        }
        let bad = self
            .token_logprobs
            .iter()
            .chain(self.top_logprobs.iter().flatten())
            .find(|t| !(t.logprob <= 0.0) || t.logprob.is_nan());
        if let Some(t) = bad {
            return Err(BackendError::Protocol(format!(
                "logprob {} for token {:?} is not <= 0",
                t.logprob, t.token
            )));
        }
        Ok(())
    }
}

/// A finite, nonzero embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Protocol("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("non-finite embedding entry".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(BackendError::Protocol("zero embedding vector".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = BackendError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

pub const NLI_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliScores {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliScores {
    pub fn new(entailment: f64, neutral: f64, contradiction: f64) -> Result<Self, BackendError> {
        let s = Self {
            entailment,
            neutral,
            contradiction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let parts = [self.entailment, self.neutral, self.contradiction];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(BackendError::Protocol(format!(
                "NLI probabilities out of [0,1]: {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > NLI_SUM_TOLERANCE {
            return Err(BackendError::Protocol(format!(
                "NLI probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn is_entailment_argmax(&self) -> bool {
        self.entailment > self.neutral && self.entailment > self.contradiction
    }
}

/// Uniform interface to the three model roles.
///
/// Implementations must be shareable across worker threads.
pub trait Backend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<Generation>, BackendError>;

    /// Embeds every text with the named embedding model.
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError>;

    fn nli_batch(&self, pairs: &[(String, String)]) -> Result<Vec<NliScores>, BackendError> {
        pairs.iter().map(|(p, h)| self.nli(p, h)).collect()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<Generation>, BackendError> {
        (**self).chat(request)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        (**self).embed(model, texts)
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        (**self).nli(premise, hypothesis)
    }

    fn nli_batch(&self, pairs: &[(String, String)]) -> Result<Vec<NliScores>, BackendError> {
        (**self).nli_batch(pairs)
    }
}

/// Shared precondition checks applied by every backend before doing work.
pub(crate) fn check_embed_inputs(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::Protocol("embed called with no texts".into()));
    }
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(i) => Err(BackendError::BlankInput(i)),
        None => Ok(()),
    }
}

pub(crate) fn check_nli_inputs(premise: &str, hypothesis: &str) -> Result<(), BackendError> {
    if premise.trim().is_empty() {
        return Err(BackendError::BlankInput(0));
    }
    if hypothesis.trim().is_empty() {
        return Err(BackendError::BlankInput(1));
    }
    Ok(())
}

pub(crate) fn check_embed_dims(vectors: &[EmbeddingVector]) -> Result<(), BackendError> {
    if let Some(first) = vectors.first() {
        let d = first.dimension();
        if let Some(v) = vectors.iter().find(|v| v.dimension() != d) {
            return Err(BackendError::Protocol(format!(
                "embedding dimension mismatch in batch: {} vs {}",
                d,
                v.dimension()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nli_scores_must_sum_to_one() {
        assert!(NliScores::new(0.7, 0.2, 0.1).is_ok());
        assert!(NliScores::new(0.7, 0.2, 0.10005).is_ok());
        assert!(NliScores::new(0.7, 0.2, 0.2).is_err());
        assert!(NliScores::new(1.2, -0.1, -0.1).is_err());
    }

    #[test]
    fn embedding_rejects_zero_and_nan() {
        assert!(EmbeddingVector::new(vec![0.0, 0.0]).is_err());
        assert!(EmbeddingVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        let v = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.norm(), 5.0);
        let parsed: Result<EmbeddingVector, _> = serde_json::from_str("[0.0, 0.0]");
        assert!(parsed.is_err());
    }

    #[test]
    fn chat_request_invariants() {
        let mut req = ChatRequest {
            model: "m".into(),
            messages: vec![Message::new(Role::User, "hi")],
            temperature: 0.0,
            num_samples: 1,
            max_tokens: 8,
            want_logprobs: true,
            top_logprobs: 20,
            seed: None,
        };
        assert!(req.validate().is_ok());
        req.num_samples = 3;
        assert!(req.validate().is_err());
        req.temperature = 0.8;
        assert!(req.validate().is_ok());
        req.num_samples = 0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn wire_payload_uses_inference_server_field_names() {
        let req = ChatRequest {
            model: "llm".into(),
            messages: vec![Message::new(Role::User, "Q")],
            temperature: 0.8,
            num_samples: 3,
            max_tokens: 64,
            want_logprobs: true,
            top_logprobs: 20,
            seed: Some(2),
        };
        let body = req.wire_payload();
        assert_eq!(body["n"], 3);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["top_logprobs"], 20);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["seed"], 2);
    }

    #[test]
    fn blank_inputs_are_rejected() {
        let texts = vec!["".to_string(), "x".to_string()];
        assert!(matches!(check_embed_inputs(&texts), Err(BackendError::BlankInput(0))));
        assert!(check_nli_inputs("a", "  ").is_err());
    }
}

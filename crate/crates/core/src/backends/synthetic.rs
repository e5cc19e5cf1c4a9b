//! A deterministic simulated model.
//!
//! The simulator reads a [`World`] describing, per question, its paraphrases
//! (each with the cosine similarity its embedding should have to the question)
//! and weighted answer distributions. Answer texts are grouped into meaning
//! classes which drive both the simulated embeddings and the simulated NLI.
//!
//! Every response is a pure function of the request payload: randomness is
//! seeded from a SHA-256 digest of the canonical request, so recording the same
//! session twice produces identical fixtures.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fixture::{canonical_json, nli_payload};
use super::{
    check_embed_inputs, check_nli_inputs, Backend, BackendError, ChatRequest, EmbeddingVector, Generation, NliScores,
    Role, TokenLogprob,
};
use crate::hsc::normalize_answer;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedAnswer(pub String, pub f64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldParaphrase {
    pub text: String,
    /// Target cosine similarity between this paraphrase and the question.
    pub sim: f64,
    /// Overrides the question's reformulated answer distribution.
    #[serde(default)]
    pub answers: Option<Vec<WeightedAnswer>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldQuestion {
    pub question: String,
    #[serde(default)]
    pub paraphrases: Vec<WorldParaphrase>,
    pub original_answers: Vec<WeightedAnswer>,
    #[serde(default)]
    pub reformulated_answers: Option<Vec<WeightedAnswer>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    pub questions: Vec<WorldQuestion>,
    /// Groups of answer texts that mean the same thing.
    #[serde(default)]
    pub meanings: Vec<Vec<String>>,
}

fn default_dim() -> usize {
    32
}

impl World {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Store {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| BackendError::Store {
            path: path.display().to_string(),
            message: format!("invalid world file: {e}"),
        })
    }
}

enum PromptSource {
    Question(usize),
    Paraphrase(usize, usize),
}

pub struct SyntheticBackend {
    world: World,
    // (text, source) sorted longest first so the most specific match wins
    prompt_index: Vec<(String, PromptSource)>,
    meaning_of: HashMap<String, usize>,
}

fn digest_u64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

fn rng_for(parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(digest_u64(parts))
}

fn random_unit(dim: usize, parts: &[&str]) -> Vec<f64> {
    let mut rng = rng_for(parts);
    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    normalized(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sample_index(weights: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let probs = tempered(weights, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn tempered(weights: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let best = weights
            .iter()
            .enumerate()
            .fold(0, |b, (i, w)| if *w > weights[b] { i } else { b });
        return (0..weights.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    let max = weights.iter().cloned().fold(f64::MIN, f64::max);
    let raw: Vec<f64> = weights
        .iter()
        .map(|w| {
            if *w > 0.0 {
                (w / max).powf(1.0 / temperature)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

impl SyntheticBackend {
    pub fn new(world: World) -> Self {
        let mut prompt_index = Vec::new();
        for (qi, q) in world.questions.iter().enumerate() {
            prompt_index.push((q.question.trim().to_string(), PromptSource::Question(qi)));
            for (pi, p) in q.paraphrases.iter().enumerate() {
                prompt_index.push((p.text.trim().to_string(), PromptSource::Paraphrase(qi, pi)));
            }
        }
        prompt_index.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        let mut meaning_of = HashMap::new();
        for (gi, group) in world.meanings.iter().enumerate() {
            for text in group {
                meaning_of.entry(normalize_answer(text)).or_insert(gi);
            }
        }
        Self {
            world,
            prompt_index,
            meaning_of,
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Ok(Self::new(World::from_path(path)?))
    }

    fn locate(&self, content: &str) -> Option<&PromptSource> {
        self.prompt_index
            .iter()
            .find(|(text, _)| !text.is_empty() && content.contains(text.as_str()))
            .map(|(_, src)| src)
    }

    fn answers_for(&self, src: &PromptSource) -> &[WeightedAnswer] {
        match *src {
            PromptSource::Question(qi) => &self.world.questions[qi].original_answers,
            PromptSource::Paraphrase(qi, pi) => {
                let q = &self.world.questions[qi];
                q.paraphrases[pi]
                    .answers
                    .as_deref()
                    .or(q.reformulated_answers.as_deref())
                    .unwrap_or(&q.original_answers)
            }
        }
    }

    fn question_of(&self, src: &PromptSource) -> usize {
        match *src {
            PromptSource::Question(qi) | PromptSource::Paraphrase(qi, _) => qi,
        }
    }

    fn meaning(&self, text: &str) -> Option<usize> {
        self.meaning_of.get(&normalize_answer(text)).copied()
    }

    fn answer_generation(&self, answers: &[WeightedAnswer], request: &ChatRequest, rng: &mut ChaCha8Rng) -> Generation {
        let weights: Vec<f64> = answers.iter().map(|a| a.1).collect();
        let probs = tempered(&weights, request.temperature);
        let idx = sample_index(&weights, request.temperature, rng);
        let text = answers[idx].0.clone();
        let p = probs[idx].max(1e-6);

        let mut tokens: Vec<String> = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            tokens.push(if i == 0 { word.to_string() } else { format!(" {word}") });
        }
        let per_token = if tokens.is_empty() {
            0.0
        } else {
            p.ln() / tokens.len() as f64
        };
        let chosen_mass = per_token.exp();
        let width = if request.want_logprobs {
            request.top_logprobs as usize
        } else {
            0
        };

        let mut token_logprobs = Vec::new();
        let mut top_logprobs = Vec::new();
        if request.want_logprobs {
            for tok in &tokens {
                token_logprobs.push(TokenLogprob {
                    token: tok.clone(),
                    logprob: per_token,
                });
                let mut alts = vec![TokenLogprob {
                    token: tok.clone(),
                    logprob: per_token,
                }];
                let rest = 1.0 - chosen_mass;
                if width > 1 && rest > 1e-9 {
                    let k = width - 1;
                    let norm: f64 = (1..=k).map(|j| 0.5f64.powi(j as i32)).sum();
                    for j in 1..=k {
                        let mass = rest * 0.5f64.powi(j as i32) / norm * 0.999;
                        alts.push(TokenLogprob {
                            token: format!("<alt{j}>"),
                            logprob: mass.ln(),
                        });
                    }
                }
                if width > 0 {
                    top_logprobs.push(alts);
                }
            }
        }
        Generation {
            text,
            token_logprobs,
            top_logprobs,
        }
    }

    fn p_true_generation(&self, qi: usize, content: &str, request: &ChatRequest) -> Generation {
        let proposed = content
            .lines()
            .find_map(|l| l.strip_prefix("Proposed Answer:"))
            .unwrap_or("")
            .trim();
        let answers = &self.world.questions[qi].original_answers;
        let total: f64 = answers.iter().map(|a| a.1).sum();
        let target = self.meaning(proposed);
        let norm_proposed = normalize_answer(proposed);
        let agree: f64 = answers
            .iter()
            .filter(|a| match target {
                Some(g) => self.meaning(&a.0) == Some(g),
                None => normalize_answer(&a.0) == norm_proposed,
            })
            .map(|a| a.1)
            .sum();
        let jitter = rng_for(&["ptrue", &canonical_json(&request.wire_payload())]).random::<f64>();
        let p = (0.05 + 0.85 * agree / total.max(1e-12) + 0.1 * (jitter - 0.5)).clamp(0.01, 0.99);
        let a = TokenLogprob {
            token: "A".into(),
            logprob: p.ln(),
        };
        let b = TokenLogprob {
            token: "B".into(),
            logprob: (1.0 - p).ln(),
        };
        Generation {
            text: "A".into(),
            token_logprobs: vec![a.clone()],
            top_logprobs: vec![vec![a, b]],
        }
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let dim = self.world.embedding_dim.max(2);
        let trimmed = text.trim();
        for (qi, q) in self.world.questions.iter().enumerate() {
            let base = random_unit(dim, &["question", &qi.to_string()]);
            if q.question.trim() == trimmed {
                return base;
            }
            if let Some(p) = q.paraphrases.iter().find(|p| p.text.trim() == trimmed) {
                let noise = random_unit(dim, &["paraphrase", trimmed]);
                let along = dot(&noise, &base);
                let orth = normalized(noise.iter().zip(&base).map(|(n, b)| n - along * b).collect());
                let s = p.sim.clamp(-1.0, 1.0);
                let c = (1.0 - s * s).max(0.0).sqrt();
                return base.iter().zip(&orth).map(|(b, o)| s * b + c * o).collect();
            }
        }
        if let Some(g) = self.meaning(trimmed) {
            let base = random_unit(dim, &["meaning", &g.to_string()]);
            let noise = random_unit(dim, &["variant", &normalize_answer(trimmed)]);
            return normalized(base.iter().zip(&noise).map(|(b, n)| b + 0.35 * n).collect());
        }
        let words: Vec<String> = trimmed
            .to_lowercase()
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return random_unit(dim, &["text", trimmed]);
        }
        let mut acc = vec![0.0; dim];
        for w in &words {
            for (a, x) in acc.iter_mut().zip(random_unit(dim, &["word", w])) {
                *a += x;
            }
        }
        normalized(acc)
    }

    fn nli_one(&self, premise: &str, hypothesis: &str) -> NliScores {
        let payload = canonical_json(&nli_payload(premise, hypothesis));
        let mut rng = rng_for(&["nli", &payload]);
        let u: f64 = rng.random();
        let (ent, contra) = if normalize_answer(premise) == normalize_answer(hypothesis) {
            (0.97, 0.005)
        } else {
            match (self.meaning(premise), self.meaning(hypothesis)) {
                (Some(a), Some(b)) if a == b => (0.72 + 0.26 * u, 0.01),
                (Some(_), Some(_)) => (0.02 + 0.05 * u, 0.5 + 0.4 * rng.random::<f64>()),
                _ => {
                    let set = |s: &str| -> std::collections::BTreeSet<String> {
                        normalize_answer(s).split(' ').map(str::to_string).collect()
                    };
                    let (a, b) = (set(premise), set(hypothesis));
                    let inter = a.intersection(&b).count() as f64;
                    let union = a.union(&b).count().max(1) as f64;
                    let j = inter / union;
                    (0.85 * j, 0.6 * (1.0 - j))
                }
            }
        };
        let neutral = (1.0 - ent - contra).max(0.0);
        NliScores {
            entailment: ent,
            neutral,
            contradiction: contra,
        }
    }
}

impl Backend for SyntheticBackend {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<Generation>, BackendError> {
        request.validate()?;
        let content = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| BackendError::Protocol("request has no user message".into()))?;
        let src = self.locate(content).ok_or_else(|| {
            BackendError::Protocol(format!(
                "synthetic world has no question matching prompt {:?}",
                content.chars().take(80).collect::<String>()
            ))
        })?;
        let qi = self.question_of(src);
        let seed_text = canonical_json(&request.wire_payload());
        let mut rng = rng_for(&["chat", &seed_text]);

        if content.contains("Is the proposed answer") {
            return Ok(vec![self.p_true_generation(qi, content, request)]);
        }
        let is_reformulation = request
            .messages
            .iter()
            .any(|m| m.content.to_lowercase().contains("paraphrase"));
        if is_reformulation {
            let q = &self.world.questions[qi];
            return Ok((0..request.num_samples)
                .map(|_| {
                    let text = if q.paraphrases.is_empty() {
                        q.question.clone()
                    } else {
                        q.paraphrases[rng.random_range(0..q.paraphrases.len())].text.clone()
                    };
                    Generation {
                        text,
                        token_logprobs: vec![],
                        top_logprobs: vec![],
                    }
                })
                .collect());
        }
        let answers = self.answers_for(src);
        if answers.is_empty() {
            return Err(BackendError::Protocol("world question has no answers".into()));
        }
        Ok((0..request.num_samples)
            .map(|_| self.answer_generation(answers, request, &mut rng))
            .collect())
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_embed_inputs(texts)?;
        texts.iter().map(|t| EmbeddingVector::new(self.embed_one(t))).collect()
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        check_nli_inputs(premise, hypothesis)?;
        let s = self.nli_one(premise, hypothesis);
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Message;

    fn world() -> World {
        serde_json::from_value(serde_json::json!({
            "embedding_dim": 16,
            "questions": [{
                "question": "What is the capital of France?",
                "paraphrases": [{"text": "Which city is France's capital?", "sim": 0.8}],
                "original_answers": [["Paris", 8.0], ["Lyon", 1.0]]
            }],
            "meanings": [["Paris", "Paris, France"], ["Lyon"]]
        }))
        .unwrap()
    }

    fn answer_request(n: u32) -> ChatRequest {
        ChatRequest {
            model: "sim".into(),
            messages: vec![Message::new(
                Role::User,
                "Question: What is the capital of France?\nAnswer:",
            )],
            temperature: 0.8,
            num_samples: n,
            max_tokens: 64,
            want_logprobs: true,
            top_logprobs: 5,
            seed: None,
        }
    }

    #[test]
    fn chat_is_deterministic_and_shaped() {
        let b = SyntheticBackend::new(world());
        let a1 = b.chat(&answer_request(3)).unwrap();
        let a2 = b.chat(&answer_request(3)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.len(), 3);
        for g in &a1 {
            assert!(!g.token_logprobs.is_empty());
            assert!(g.validate(true).is_ok());
            assert_eq!(g.top_logprobs.len(), g.token_logprobs.len());
        }
    }

    #[test]
    fn paraphrase_embedding_hits_target_similarity() {
        let b = SyntheticBackend::new(world());
        let v = b
            .embed(
                "m",
                &[
                    "What is the capital of France?".into(),
                    "Which city is France's capital?".into(),
                ],
            )
            .unwrap();
        let cos = dot(v[0].values(), v[1].values()) / (v[0].norm() * v[1].norm());
        assert!((cos - 0.8).abs() < 1e-9, "{cos}");
    }

    #[test]
    fn nli_follows_meaning_groups() {
        let b = SyntheticBackend::new(world());
        let same = b.nli("Paris", "Paris, France").unwrap();
        let diff = b.nli("Paris", "Lyon").unwrap();
        assert!(same.entailment > 0.7 && same.contradiction < 0.05);
        assert!(diff.contradiction > 0.5);
        assert!(b.nli("Paris.", "paris").unwrap().is_entailment_argmax());
    }
}

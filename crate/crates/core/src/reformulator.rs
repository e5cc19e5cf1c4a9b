//! Question reformulation: prompt for paraphrases, keep those whose embedding
//! similarity to the original lies in `[tau_min, tau_max]`, drop near-duplicates,
//! and top up with further prompting rounds until `target_count` are accepted.

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, ChatRequest, EmbeddingVector, Message, Role};
use crate::error::{Error, Result};

pub const DEFAULT_REFORMULATION_PROMPT: &str = include_str!("../assets/reformulation_prompt.txt");

const REFORMULATION_SYSTEM: &str = "You paraphrase questions faithfully.";

/// Cosine similarity of two embeddings.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            a.dimension(),
            b.dimension()
        )));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReformulationConfig {
    pub target_count: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub dup_threshold: f64,
    pub max_rounds: usize,
    /// Candidates requested per round; `None` means twice the target count.
    pub candidates_per_round: Option<usize>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Also sample answers for the original question alongside its reformulations.
    pub include_original: bool,
    /// Template with a `{question}` placeholder.
    pub prompt_template: String,
}

impl Default for ReformulationConfig {
    fn default() -> Self {
        Self {
            target_count: 3,
            tau_min: 0.6,
            tau_max: 0.95,
            dup_threshold: 0.98,
            max_rounds: 3,
            candidates_per_round: None,
            temperature: 0.8,
            max_tokens: 64,
            include_original: false,
            prompt_template: DEFAULT_REFORMULATION_PROMPT.to_string(),
        }
    }
}

impl ReformulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::Config("reformulation target_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_min) || !(self.tau_max <= 1.0) || self.tau_min >= self.tau_max {
            return Err(Error::Config(format!(
                "need 0 <= tau_min < tau_max <= 1, got [{}, {}]",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.dup_threshold > 0.0 && self.dup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "dup_threshold must lie in (0,1], got {}",
                self.dup_threshold
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("reformulation temperature must be > 0".into()));
        }
        if !self.prompt_template.contains("{question}") {
            return Err(Error::Config(
                "reformulation prompt template lacks a {question} placeholder".into(),
            ));
        }
        Ok(())
    }

    pub fn candidates_per_round(&self) -> usize {
        self.candidates_per_round.unwrap_or(2 * self.target_count).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BelowBand,
    AboveBand,
    Duplicate,
    /// In band and distinct, but the target count was already reached.
    Surplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reformulation {
    pub text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub text: String,
    pub similarity: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReformulationSet {
    pub original: String,
    pub accepted: Vec<Reformulation>,
    pub rejected: Vec<Rejection>,
    /// Fewer than `target_count` reformulations were accepted.
    pub short: bool,
    /// Nothing was accepted; sampling uses the original question alone.
    pub fallback: bool,
    pub rounds: usize,
    #[serde(skip)]
    accepted_vectors: Vec<EmbeddingVector>,
}

impl ReformulationSet {
    pub fn new(original: impl Into<String>) -> Self {
        Self {
            original: original.into(),
            accepted: Vec::new(),
            rejected: Vec::new(),
            short: false,
            fallback: false,
            rounds: 0,
            accepted_vectors: Vec::new(),
        }
    }

    /// Questions answers are sampled for, in order.
    pub fn sampling_inputs(&self, include_original: bool) -> Vec<String> {
        if self.fallback || self.accepted.is_empty() {
            return vec![self.original.clone()];
        }
        let mut inputs = Vec::with_capacity(self.accepted.len() + 1);
        if include_original {
            inputs.push(self.original.clone());
        }
        inputs.extend(self.accepted.iter().map(|r| r.text.clone()));
        inputs
    }

    /// Screens candidates in order against the band, accepted paraphrases and target count.
    fn consider(
        &mut self,
        candidates: &[String],
        original_vec: &EmbeddingVector,
        cfg: &ReformulationConfig,
        backend: &dyn Backend,
        embed_model: &str,
    ) -> Result<()> {
        // blank candidates carry no question and are dropped
        let texts: Vec<String> = candidates
            .iter()
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect();
        if texts.is_empty() {
            return Ok(());
        }
        let vectors = backend.embed(embed_model, &texts)?;
        for (text, vec) in texts.into_iter().zip(vectors) {
            let similarity = cosine_similarity(&vec, original_vec)?;
            let reason = if similarity < cfg.tau_min {
                Some(RejectReason::BelowBand)
            } else if similarity > cfg.tau_max {
                Some(RejectReason::AboveBand)
            } else if self.is_duplicate(&vec, cfg.dup_threshold)? {
                Some(RejectReason::Duplicate)
            } else if self.accepted.len() >= cfg.target_count {
                Some(RejectReason::Surplus)
            } else {
                None
            };
            match reason {
                Some(reason) => self.rejected.push(Rejection {
                    text,
                    similarity,
                    reason,
                }),
                None => {
                    self.accepted.push(Reformulation { text, similarity });
                    self.accepted_vectors.push(vec);
                }
            }
        }
        Ok(())
    }

    fn is_duplicate(&self, vec: &EmbeddingVector, threshold: f64) -> Result<bool> {
        for other in &self.accepted_vectors {
            if cosine_similarity(vec, other)? >= threshold {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Filters one batch of candidate paraphrases of `original`.
pub fn filter_candidates(
    candidates: &[String],
    original: &str,
    cfg: &ReformulationConfig,
    backend: &dyn Backend,
    embed_model: &str,
) -> Result<ReformulationSet> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate reformulations".into()));
    }
    let original_vec = backend.embed(embed_model, &[original.trim().to_string()])?.remove(0);
    let mut set = ReformulationSet::new(original);
    set.consider(candidates, &original_vec, cfg, backend, embed_model)?;
    set.short = set.accepted.len() < cfg.target_count;
    Ok(set)
}

pub fn reformulation_request(original: &str, cfg: &ReformulationConfig, chat_model: &str, round: usize) -> ChatRequest {
    ChatRequest {
        model: chat_model.to_string(),
        messages: vec![
            Message::new(Role::System, REFORMULATION_SYSTEM),
            Message::new(Role::User, cfg.prompt_template.replace("{question}", original.trim())),
        ],
        temperature: cfg.temperature,
        num_samples: cfg.candidates_per_round() as u32,
        max_tokens: cfg.max_tokens,
        want_logprobs: false,
        top_logprobs: 0,
        seed: Some(round as u64),
    }
}

/// Prompts for paraphrases until `target_count` pass the filters or
/// `max_rounds` rounds have run.
///
/// A run that accepts nothing returns a set flagged `fallback`, whose sampling
/// input is the original question alone.
pub fn generate_reformulations(
    original: &str,
    cfg: &ReformulationConfig,
    backend: &dyn Backend,
    chat_model: &str,
    embed_model: &str,
) -> Result<ReformulationSet> {
    cfg.validate()?;
    if original.trim().is_empty() {
        return Err(Error::InvalidInput("blank question".into()));
    }
    let original_vec = backend.embed(embed_model, &[original.trim().to_string()])?.remove(0);
    let mut set = ReformulationSet::new(original);
    for round in 0..cfg.max_rounds {
        if set.accepted.len() >= cfg.target_count {
            break;
        }
        let request = reformulation_request(original, cfg, chat_model, round);
        let candidates: Vec<String> = backend.chat(&request)?.into_iter().map(|g| g.text).collect();
        set.rounds = round + 1;
        set.consider(&candidates, &original_vec, cfg, backend, embed_model)?;
    }
    set.short = set.accepted.len() < cfg.target_count;
    set.fallback = set.accepted.is_empty();
    if set.fallback {
        log::warn!("no reformulation accepted for {original:?}; falling back to the original question");
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, Generation, NliScores};
    use approx::assert_abs_diff_eq;
    use std::collections::HashMap;
    use std::sync::Mutex;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.2, 4.0]);
        assert_abs_diff_eq!(cosine_similarity(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert!(cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());
    }

    /// Embeds texts to vectors at a fixed angle from the original `e0`.
    struct Scripted {
        sims: HashMap<String, f64>,
        rounds: Mutex<Vec<Vec<String>>>,
        chat_calls: Mutex<usize>,
    }

    impl Scripted {
        fn new(sims: &[(&str, f64)], rounds: Vec<Vec<&str>>) -> Self {
            Self {
                sims: sims.iter().map(|(t, s)| (t.to_string(), *s)).collect(),
                rounds: Mutex::new(
                    rounds
                        .into_iter()
                        .map(|r| r.into_iter().map(str::to_string).collect())
                        .collect(),
                ),
                chat_calls: Mutex::new(0),
            }
        }
    }

    impl Backend for Scripted {
        fn chat(&self, request: &ChatRequest) -> std::result::Result<Vec<Generation>, BackendError> {
            *self.chat_calls.lock().unwrap() += 1;
            let mut rounds = self.rounds.lock().unwrap();
            let texts = if rounds.is_empty() { vec![] } else { rounds.remove(0) };
            assert!(texts.len() <= request.num_samples as usize);
            Ok(texts
                .into_iter()
                .map(|text| Generation {
                    text,
                    token_logprobs: vec![],
                    top_logprobs: vec![],
                })
                .collect())
        }

        fn embed(&self, _m: &str, texts: &[String]) -> std::result::Result<Vec<EmbeddingVector>, BackendError> {
            Ok(texts
                .iter()
                .map(|t| {
                    if t == "orig" {
                        let mut xs = vec![0.0; self.sims.len() + 1];
                        xs[0] = 1.0;
                        return v(&xs);
                    }
                    let s = self.sims[t];
                    // each scripted text gets its own orthogonal direction
                    let k = self.sims.keys().filter(|o| o.as_str() < t.as_str()).count();
                    let mut xs = vec![0.0; self.sims.len() + 1];
                    xs[0] = s;
                    xs[k + 1] = (1.0 - s * s).sqrt();
                    v(&xs)
                })
                .collect())
        }

        fn nli(&self, _p: &str, _h: &str) -> std::result::Result<NliScores, BackendError> {
            unreachable!()
        }
    }

    #[test]
    fn band_filtering_keeps_in_band_only() {
        let b = Scripted::new(&[("low", 0.5), ("mid", 0.8), ("high", 0.97)], vec![]);
        let set = filter_candidates(
            &["low".into(), "mid".into(), "high".into()],
            "orig",
            &ReformulationConfig::default(),
            &b,
            "e",
        )
        .unwrap();
        assert_eq!(set.accepted.len(), 1);
        assert_eq!(set.accepted[0].text, "mid");
        let reasons: Vec<_> = set.rejected.iter().map(|r| r.reason).collect();
        assert_eq!(reasons, vec![RejectReason::BelowBand, RejectReason::AboveBand]);
    }

    #[test]
    fn identical_candidates_first_wins() {
        let b = Scripted::new(&[("mid", 0.8)], vec![]);
        let set = filter_candidates(
            &["mid".into(), " mid ".into()],
            "orig",
            &ReformulationConfig::default(),
            &b,
            "e",
        )
        .unwrap();
        assert_eq!(set.accepted.len(), 1);
        assert_eq!(set.rejected[0].reason, RejectReason::Duplicate);
    }

    #[test]
    fn empty_acceptance_is_a_valid_filter_result() {
        let b = Scripted::new(&[("low", 0.1)], vec![]);
        let set = filter_candidates(&["low".into()], "orig", &ReformulationConfig::default(), &b, "e").unwrap();
        assert!(set.accepted.is_empty());
        assert!(set.short);
    }

    #[test]
    fn one_round_when_enough_pass() {
        let b = Scripted::new(
            &[("p1", 0.7), ("p22", 0.8), ("p333", 0.9), ("bad", 0.3)],
            vec![vec!["p1", "bad", "p22", "p333"]],
        );
        let set = generate_reformulations("orig", &ReformulationConfig::default(), &b, "c", "e").unwrap();
        assert_eq!(set.accepted.len(), 3);
        assert_eq!(set.rounds, 1);
        assert!(!set.short && !set.fallback);
        assert_eq!(*b.chat_calls.lock().unwrap(), 1);
    }

    #[test]
    fn shortfall_triggers_another_round() {
        let b = Scripted::new(
            &[("p1", 0.7), ("p22", 0.8), ("p333", 0.9), ("bad", 0.3)],
            vec![vec!["p1", "bad"], vec!["p22", "p333", "p1"]],
        );
        let set = generate_reformulations("orig", &ReformulationConfig::default(), &b, "c", "e").unwrap();
        assert_eq!(set.rounds, 2);
        assert_eq!(set.accepted.len(), 3);
        assert_eq!(*b.chat_calls.lock().unwrap(), 2);
    }

    #[test]
    fn all_rounds_failing_falls_back_to_original() {
        let b = Scripted::new(&[("bad", 0.3)], vec![vec!["bad"], vec!["bad"], vec!["bad"]]);
        let set = generate_reformulations("orig", &ReformulationConfig::default(), &b, "c", "e").unwrap();
        assert!(set.fallback && set.short);
        assert_eq!(set.rounds, 3);
        assert_eq!(set.sampling_inputs(false), vec!["orig".to_string()]);
    }

    #[test]
    fn surplus_candidates_are_recorded() {
        let cfg = ReformulationConfig {
            target_count: 1,
            ..ReformulationConfig::default()
        };
        let b = Scripted::new(&[("p1", 0.7), ("p22", 0.8)], vec![vec!["p1", "p22"]]);
        let set = generate_reformulations("orig", &cfg, &b, "c", "e").unwrap();
        assert_eq!(set.accepted.len(), 1);
        assert_eq!(set.rejected[0].reason, RejectReason::Surplus);
    }

    #[test]
    fn config_validation() {
        let ok = ReformulationConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.candidates_per_round(), 6);
        let inverted = ReformulationConfig {
            tau_min: 0.9,
            tau_max: 0.8,
            ..ok.clone()
        };
        assert!(inverted.validate().is_err());
        let no_slot = ReformulationConfig {
            prompt_template: "paraphrase".into(),
            ..ok
        };
        assert!(no_slot.validate().is_err());
    }

    #[test]
    fn include_original_prepends_question() {
        let mut set = ReformulationSet::new("orig");
        set.accepted.push(Reformulation {
            text: "p".into(),
            similarity: 0.8,
        });
        assert_eq!(set.sampling_inputs(true), vec!["orig".to_string(), "p".to_string()]);
        assert_eq!(set.sampling_inputs(false), vec!["p".to_string()]);
    }
}

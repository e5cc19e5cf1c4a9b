//! Prompt construction, answer sampling and gold labelling.

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, ChatRequest, Generation, Message, Role, TokenLogprob};
use crate::error::{Error, Result};
use crate::hsc::{normalize_answer, EMPTY_ANSWER};

pub const MAX_FEWSHOT: usize = 5;

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "Answer the question as briefly as possible, with a few words at most, on a single line.";

const DEFAULT_FEWSHOT_JSON: &str = include_str!("../assets/qa_fewshot.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub question: String,
    pub answer: String,
}

pub fn default_fewshot() -> Vec<FewShot> {
    serde_json::from_str(DEFAULT_FEWSHOT_JSON).expect("bundled few-shot asset is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoldLabelConfig {
    /// Require equality of normalized strings instead of containment.
    pub exact_match: bool,
    /// Answers that count as correct for a question with no reference.
    pub refusal_phrases: Vec<String>,
}

impl Default for GoldLabelConfig {
    fn default() -> Self {
        Self {
            exact_match: false,
            refusal_phrases: [
                "unanswerable",
                "no answer",
                "i don't know",
                "i do not know",
                "cannot be answered",
                "not enough information",
                "unknown",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Answers drawn per reformulation (K).
    pub samples_per_input: usize,
    pub temperature: f64,
    pub low_temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub system_prompt: String,
    pub fewshot: Vec<FewShot>,
    pub gold: GoldLabelConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples_per_input: 8,
            temperature: 0.8,
            low_temperature: 0.1,
            max_tokens: 64,
            top_logprobs: 20,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            fewshot: default_fewshot(),
            gold: GoldLabelConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_input == 0 {
            return Err(Error::Config("samples per reformulation must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.low_temperature > 0.0 && self.low_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "low temperature must be > 0, got {}",
                self.low_temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        if self.fewshot.len() > MAX_FEWSHOT {
            return Err(Error::Config(format!(
                "at most {MAX_FEWSHOT} few-shot examples, got {}",
                self.fewshot.len()
            )));
        }
        Ok(())
    }
}

fn question_turn(question: &str) -> String {
    format!("Question: {}\nAnswer:", question.trim())
}

/// Chat messages for answering `question`:
/// system instruction, few-shot pairs in order, then the question, with any
/// context prepended to the final user turn.
pub fn build_prompt(system: &str, question: &str, fewshot: &[FewShot], context: Option<&str>) -> Result<Vec<Message>> {
    if fewshot.len() > MAX_FEWSHOT {
        return Err(Error::InvalidInput(format!(
            "at most {MAX_FEWSHOT} few-shot examples, got {}",
            fewshot.len()
        )));
    }
    let mut messages = Vec::with_capacity(2 + 2 * fewshot.len());
    messages.push(Message::new(Role::System, system));
    for shot in fewshot {
        messages.push(Message::new(Role::User, question_turn(&shot.question)));
        messages.push(Message::new(Role::Assistant, shot.answer.trim()));
    }
    let last = match context {
        Some(c) if !c.trim().is_empty() => format!("Context: {}\n\n{}", c.trim(), question_turn(question)),
        _ => question_turn(question),
    };
    messages.push(Message::new(Role::User, last));
    Ok(messages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub text: String,
    pub source_index: usize,
    pub token_logprobs: Vec<f64>,
    pub sequence_logprob: f64,
    /// Per-position top-k alternatives, kept in memory only.
    #[serde(skip)]
    pub top_logprobs: Vec<Vec<TokenLogprob>>,
}

impl AnswerSample {
    /// Cuts a generation at its first newline, dropping the logprobs of the
    /// cut tokens.
    pub fn from_generation(generation: Generation, source_index: usize) -> Self {
        let Generation {
            text,
            mut token_logprobs,
            mut top_logprobs,
        } = generation;
        let (kept, cut) = match text.find('\n') {
            Some(pos) => (&text[..pos], true),
            None => (text.as_str(), false),
        };
        if cut && !token_logprobs.is_empty() {
            let keep = tokens_before_newline(&token_logprobs);
            token_logprobs.truncate(keep);
            top_logprobs.truncate(keep);
        }
        let token_logprobs: Vec<f64> = token_logprobs.iter().map(|t| t.logprob).collect();
        Self {
            text: kept.trim().to_string(),
            source_index,
            sequence_logprob: token_logprobs.iter().sum(),
            token_logprobs,
            top_logprobs,
        }
    }
}

/// Number of leading tokens that end before the first newline character.
fn tokens_before_newline(tokens: &[TokenLogprob]) -> usize {
    tokens
        .iter()
        .position(|t| t.token.contains('\n'))
        .unwrap_or(tokens.len())
}

pub fn answer_request(
    model: &str,
    messages: Vec<Message>,
    temperature: f64,
    num_samples: usize,
    cfg: &SamplerConfig,
) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages,
        temperature,
        num_samples: num_samples as u32,
        max_tokens: cfg.max_tokens,
        want_logprobs: true,
        top_logprobs: cfg.top_logprobs,
        seed: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn draw(
    backend: &dyn Backend,
    model: &str,
    question: &str,
    context: Option<&str>,
    temperature: f64,
    n: usize,
    source_index: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<AnswerSample>> {
    let messages = build_prompt(&cfg.system_prompt, question, &cfg.fewshot, context)?;
    let request = answer_request(model, messages, temperature, n, cfg);
    let generations = backend.chat(&request)?;
    if generations.len() != n {
        return Err(Error::Backend(crate::backends::BackendError::Protocol(format!(
            "asked for {n} completions, got {}",
            generations.len()
        ))));
    }
    Ok(generations
        .into_iter()
        .map(|g| AnswerSample::from_generation(g, source_index))
        .collect())
}

/// Draws `samples_per_input` answers for each input question, tagged with
/// the input's index, in input order.
pub fn sample_answers(
    inputs: &[String],
    context: Option<&str>,
    cfg: &SamplerConfig,
    backend: &dyn Backend,
    model: &str,
) -> Result<Vec<AnswerSample>> {
    cfg.validate()?;
    let mut pool = Vec::with_capacity(inputs.len() * cfg.samples_per_input);
    for (idx, question) in inputs.iter().enumerate() {
        pool.extend(draw(
            backend,
            model,
            question,
            context,
            cfg.temperature,
            cfg.samples_per_input,
            idx,
            cfg,
        )?);
    }
    Ok(pool)
}

/// Draws `n` answers to one question in a single request.
pub fn sample_question(
    question: &str,
    context: Option<&str>,
    n: usize,
    cfg: &SamplerConfig,
    backend: &dyn Backend,
    model: &str,
) -> Result<Vec<AnswerSample>> {
    cfg.validate()?;
    draw(backend, model, question, context, cfg.temperature, n, 0, cfg)
}

/// The single near-greedy answer that receives the gold label.
pub fn low_temperature_answer(
    question: &str,
    context: Option<&str>,
    cfg: &SamplerConfig,
    backend: &dyn Backend,
    model: &str,
) -> Result<AnswerSample> {
    cfg.validate()?;
    Ok(draw(backend, model, question, context, cfg.low_temperature, 1, 0, cfg)?.remove(0))
}

/// True when the token sequence `needle` occurs contiguously in `hay`.
fn contains_tokens(hay: &str, needle: &str) -> bool {
    let hay: Vec<&str> = hay.split(' ').collect();
    let needle: Vec<&str> = needle.split(' ').collect();
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Returns `(y_gold, h)` for an answer against its references.
///
/// Both sides are normalized; a match is equality under `exact_match`, else
/// whole-word containment in either direction. With no usable reference the
/// answer is correct iff it is empty or contains a refusal phrase.
pub fn assign_gold_label(answer: &str, references: &[String], cfg: &GoldLabelConfig) -> (u8, u8) {
    let a = normalize_answer(answer);
    let refs: Vec<String> = references
        .iter()
        .map(|r| normalize_answer(r))
        .filter(|r| r != EMPTY_ANSWER)
        .collect();
    let matched = if refs.is_empty() {
        a == EMPTY_ANSWER
            || cfg.refusal_phrases.iter().any(|p| {
                let p = normalize_answer(p);
                p != EMPTY_ANSWER && (a == p || contains_tokens(&a, &p))
            })
    } else if a == EMPTY_ANSWER {
        false
    } else if cfg.exact_match {
        refs.contains(&a)
    } else {
        refs.iter().any(|r| contains_tokens(&a, r) || contains_tokens(r, &a))
    };
    let y = u8::from(matched);
    (y, 1 - y)
}

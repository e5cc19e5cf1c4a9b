//! Uncertainty scores. Every score is oriented so that larger values mean a
//! more hallucination-suspect answer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, ChatRequest, EmbeddingVector, Message, Role, TokenLogprob};
use crate::error::{Error, Result};
use crate::hsc::ClusterPartition;
use crate::sampler::AnswerSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "SE_HSC")]
    SeHsc,
    #[serde(rename = "SRE_SR")]
    SreSr,
    #[serde(rename = "SRE_SR_HSC")]
    SreSrHsc,
    #[serde(rename = "SRE_SR_HSC_norefine")]
    SreSrHscNoRefine,
    #[serde(rename = "TNLL")]
    Tnll,
    #[serde(rename = "TE")]
    Te,
    #[serde(rename = "TE_SR")]
    TeSr,
    #[serde(rename = "EV")]
    Ev,
    #[serde(rename = "EV_SR")]
    EvSr,
    #[serde(rename = "PTRUE")]
    PTrue,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Se,
        Method::SeHsc,
        Method::SreSr,
        Method::SreSrHsc,
        Method::SreSrHscNoRefine,
        Method::Tnll,
        Method::Te,
        Method::TeSr,
        Method::Ev,
        Method::EvSr,
        Method::PTrue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Se => "SE",
            Method::SeHsc => "SE_HSC",
            Method::SreSr => "SRE_SR",
            Method::SreSrHsc => "SRE_SR_HSC",
            Method::SreSrHscNoRefine => "SRE_SR_HSC_norefine",
            Method::Tnll => "TNLL",
            Method::Te => "TE",
            Method::TeSr => "TE_SR",
            Method::Ev => "EV",
            Method::EvSr => "EV_SR",
            Method::PTrue => "PTRUE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub method: Method,
    pub value: f64,
    pub higher_means_more_uncertain: bool,
}

impl UncertaintyScore {
    pub fn new(method: Method, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::UndefinedScore(format!("{method} produced {value}")));
        }
        Ok(Self {
            method,
            value,
            higher_means_more_uncertain: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Cluster mass is its share of the answers.
    #[default]
    Fraction,
    /// Cluster mass is its share of the normalized sequence probabilities.
    Probability,
}

/// `−Σ p ln p` over the non-zero entries.
pub fn entropy(masses: &[f64]) -> f64 {
    -masses.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy of the cluster distribution of a partition.
pub fn semantic_entropy(
    partition: &ClusterPartition,
    weighting: Weighting,
    seq_logprobs: Option<&[f64]>,
) -> Result<f64> {
    let h = match weighting {
        Weighting::Fraction => entropy(partition.masses()),
        Weighting::Probability => {
            let lp = seq_logprobs
                .ok_or_else(|| Error::InvalidInput("probability weighting needs sequence logprobs".into()))?;
            if lp.len() != partition.len() {
                return Err(Error::InvalidInput(format!(
                    "{} logprobs for {} answers",
                    lp.len(),
                    partition.len()
                )));
            }
            if lp.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("non-finite sequence logprob".into()));
            }
            let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = lp.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let masses: Vec<f64> = partition
                .clusters()
                .iter()
                .map(|c| c.iter().map(|&i| weights[i]).sum::<f64>() / total)
                .collect();
            entropy(&masses)
        }
    };
    // clamp the -0.0 of a single cluster
    Ok(h.max(0.0))
}

/// Fraction-weighted entropy of a partition of the pooled answers, tagged
/// with the method that produced the partition.
pub fn sre_score(method: Method, partition: &ClusterPartition) -> Result<UncertaintyScore> {
    UncertaintyScore::new(method, semantic_entropy(partition, Weighting::Fraction, None)?)
}

/// Length-normalized negative log-likelihood.
pub fn t_nll(answer: &AnswerSample) -> Result<f64> {
    if answer.token_logprobs.is_empty() {
        return Err(Error::UndefinedScore("answer has no token logprobs".into()));
    }
    Ok(-answer.sequence_logprob / answer.token_logprobs.len() as f64)
}

/// Entropy of one position's top-k alternatives after renormalization.
pub fn position_entropy(alternatives: &[TokenLogprob]) -> Result<f64> {
    if alternatives.is_empty() {
        return Err(Error::UndefinedScore("empty top-k list".into()));
    }
    let max = alternatives.iter().map(|t| t.logprob).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::UndefinedScore("top-k list has no finite logprob".into()));
    }
    let weights: Vec<f64> = alternatives.iter().map(|t| (t.logprob - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let masses: Vec<f64> = weights.iter().map(|w| w / total).collect();
    Ok(entropy(&masses).max(0.0))
}

/// Mean over samples of the mean per-position top-k entropy.
///
/// Samples with no generated tokens are skipped.
pub fn token_entropy(samples: &[AnswerSample]) -> Result<f64> {
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        if s.top_logprobs.is_empty() {
            if s.token_logprobs.is_empty() {
                continue;
            }
            return Err(Error::UndefinedScore("sample lacks top-k logprobs".into()));
        }
        let mut sum = 0.0;
        for alts in &s.top_logprobs {
            sum += position_entropy(alts)?;
        }
        per_sample.push(sum / s.top_logprobs.len() as f64);
    }
    if per_sample.is_empty() {
        return Err(Error::UndefinedScore("no sample carries top-k logprobs".into()));
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// Mean squared distance of the embeddings from their centroid.
pub fn embedding_variance(vectors: &[EmbeddingVector]) -> Result<f64> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("no embeddings".into()))?;
    let dim = first.dimension();
    if vectors.iter().any(|v| v.dimension() != dim) {
        return Err(Error::InvalidInput("embedding dimensions differ".into()));
    }
    let n = vectors.len() as f64;
    let mut centroid = vec![0.0; dim];
    for v in vectors {
        for (c, x) in centroid.iter_mut().zip(v.values()) {
            *c += x / n;
        }
    }
    let total: f64 = vectors
        .iter()
        .map(|v| {
            v.values()
                .iter()
                .zip(&centroid)
                .map(|(x, c)| (x - c).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n)
}

/// Embeds the sample texts and returns their embedding variance.
pub fn embedding_variance_of(samples: &[AnswerSample], backend: &dyn Backend, embed_model: &str) -> Result<f64> {
    let texts: Vec<String> = samples.iter().map(|s| crate::hsc::embedding_text(&s.text)).collect();
    embedding_variance(&backend.embed(embed_model, &texts)?)
}

pub const P_TRUE_QUESTION: &str = "Is the proposed answer (A) True or (B) False?";

/// Number of sampled answers listed as brainstormed ideas in the P(True) prompt.
pub const P_TRUE_BRAINSTORM: usize = 10;

pub fn p_true_messages(question: &str, brainstormed: &[String], proposed: &str) -> Vec<Message> {
    let mut prompt = format!("Question: {}\nBrainstormed Answers:\n", question.trim());
    for a in brainstormed.iter().take(P_TRUE_BRAINSTORM) {
        prompt.push_str(a.trim());
        prompt.push('\n');
    }
    prompt.push_str(&format!(
        "Proposed Answer: {}\n{P_TRUE_QUESTION}\nThe proposed answer is:",
        proposed.trim()
    ));
    vec![
        Message::new(Role::System, "You judge whether answers to questions are correct."),
        Message::new(Role::User, prompt),
    ]
}

/// Probability of the "true" option, renormalized over the two option tokens.
///
/// Tokens `A`/`True` and `B`/`False` are matched case-insensitively after
/// trimming; an option absent from the list has probability zero.
pub fn p_true_from_options(alternatives: &[TokenLogprob]) -> Result<f64> {
    let (mut yes, mut no) = (0.0, 0.0);
    let (mut seen_yes, mut seen_no) = (false, false);
    for t in alternatives {
        let tok = t.token.trim();
        if tok.eq_ignore_ascii_case("a") || tok.eq_ignore_ascii_case("true") {
            yes += t.logprob.exp();
            seen_yes = true;
        } else if tok.eq_ignore_ascii_case("b") || tok.eq_ignore_ascii_case("false") {
            no += t.logprob.exp();
            seen_no = true;
        }
    }
    if !seen_yes && !seen_no {
        return Err(Error::UndefinedScore("neither option token in top logprobs".into()));
    }
    if yes + no <= 0.0 {
        return Err(Error::UndefinedScore("option tokens carry zero probability".into()));
    }
    Ok(yes / (yes + no))
}

pub fn p_true_request(model: &str, question: &str, brainstormed: &[String], proposed: &str) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: p_true_messages(question, brainstormed, proposed),
        temperature: 0.0,
        num_samples: 1,
        max_tokens: 1,
        want_logprobs: true,
        top_logprobs: 20,
        seed: None,
    }
}

/// Asks the model whether `proposed` is correct; returns `1 − P(True)`.
pub fn p_true(
    question: &str,
    proposed: &str,
    brainstormed: &[String],
    backend: &dyn Backend,
    model: &str,
) -> Result<f64> {
    let generation = backend
        .chat(&p_true_request(model, question, brainstormed, proposed))?
        .into_iter()
        .next()
        .ok_or_else(|| Error::UndefinedScore("no completion for P(True)".into()))?;
    let alternatives = match generation.top_logprobs.first() {
        Some(alts) if !alts.is_empty() => alts.clone(),
        _ => generation.token_logprobs.first().cloned().into_iter().collect(),
    };
    Ok(1.0 - p_true_from_options(&alternatives)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tok(token: &str, p: f64) -> TokenLogprob {
        TokenLogprob {
            token: token.into(),
            logprob: p.ln(),
        }
    }

    fn sample(lps: &[f64], top: Vec<Vec<TokenLogprob>>) -> AnswerSample {
        AnswerSample {
            text: "x".into(),
            source_index: 0,
            token_logprobs: lps.to_vec(),
            sequence_logprob: lps.iter().sum(),
            top_logprobs: top,
        }
    }

    #[test]
    fn entropy_examples() {
        let f = |sizes: &[usize]| {
            semantic_entropy(&ClusterPartition::from_sizes(sizes).unwrap(), Weighting::Fraction, None).unwrap()
        };
        assert_eq!(f(&[8]), 0.0);
        assert_abs_diff_eq!(f(&[4, 4]), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(f(&[6, 2]), 0.56233, epsilon = 1e-5);
        assert_abs_diff_eq!(f(&[8, 8, 8]), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn probability_weighting() {
        let p = ClusterPartition::from_sizes(&[1, 1]).unwrap();
        let equal = semantic_entropy(&p, Weighting::Probability, Some(&[-1.0, -1.0])).unwrap();
        assert_abs_diff_eq!(equal, std::f64::consts::LN_2, epsilon = 1e-12);
        let skewed = semantic_entropy(&p, Weighting::Probability, Some(&[0.9f64.ln(), 0.1f64.ln()])).unwrap();
        assert_abs_diff_eq!(skewed, entropy(&[0.9, 0.1]), epsilon = 1e-12);
        assert!(semantic_entropy(&p, Weighting::Probability, None).is_err());
    }

    #[test]
    fn t_nll_examples() {
        assert_abs_diff_eq!(t_nll(&sample(&[-0.1, -0.3], vec![])).unwrap(), 0.2, epsilon = 1e-12);
        assert_eq!(t_nll(&sample(&[0.0, 0.0], vec![])).unwrap(), 0.0);
        assert!(matches!(t_nll(&sample(&[], vec![])), Err(Error::UndefinedScore(_))));
    }

    #[test]
    fn token_entropy_examples() {
        let certain = sample(&[0.0], vec![vec![tok("a", 1.0)]]);
        assert_eq!(token_entropy(&[certain]).unwrap(), 0.0);
        let coin = sample(&[0.5f64.ln()], vec![vec![tok("a", 0.5), tok("b", 0.5)]]);
        assert_abs_diff_eq!(token_entropy(&[coin]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        // the same shape at half the mass renormalizes to the same distribution
        let three = sample(
            &[0.35f64.ln()],
            vec![vec![tok("a", 0.35), tok("b", 0.1), tok("c", 0.05)]],
        );
        assert_abs_diff_eq!(token_entropy(&[three]).unwrap(), 0.80182, epsilon = 1e-4);
        assert!(token_entropy(&[sample(&[-0.1], vec![])]).is_err());
    }

    #[test]
    fn embedding_variance_examples() {
        let v = |x: f64| EmbeddingVector::new(vec![x, 1.0]).unwrap();
        assert_eq!(embedding_variance(&[v(0.5), v(0.5)]).unwrap(), 0.0);
        assert_abs_diff_eq!(embedding_variance(&[v(0.0), v(2.0)]).unwrap(), 1.0, epsilon = 1e-12);
        let a = embedding_variance(&[v(0.0), v(2.0), v(5.0)]).unwrap();
        let b = embedding_variance(&[v(5.0), v(0.0), v(2.0)]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn p_true_examples() {
        let p = p_true_from_options(&[tok("A", 0.9), tok("B", 0.1)]).unwrap();
        assert_abs_diff_eq!(1.0 - p, 0.1, epsilon = 1e-12);
        let even = p_true_from_options(&[tok(" True", 0.3), tok("false", 0.3)]).unwrap();
        assert_abs_diff_eq!(1.0 - even, 0.5, epsilon = 1e-12);
        assert!(p_true_from_options(&[tok("C", 0.9)]).is_err());
        assert_eq!(p_true_from_options(&[tok("A", 0.6), tok("C", 0.3)]).unwrap(), 1.0);
    }

    #[test]
    fn p_true_prompt_shape() {
        let msgs = p_true_messages("Who?", &["x".into(), "y".into()], "z");
        let body = &msgs[1].content;
        assert!(body.contains("Proposed Answer: z\n"));
        assert!(body.contains(P_TRUE_QUESTION));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }

    proptest! {
        #[test]
        fn merging_clusters_never_raises_entropy(sizes in prop::collection::vec(1usize..6, 2..7), a in 0usize..6, b in 0usize..6) {
            let m = sizes.len();
            let (a, b) = (a % m, b % m);
            prop_assume!(a != b);
            let before = entropy(ClusterPartition::from_sizes(&sizes).unwrap().masses());
            let mut merged = sizes.clone();
            merged[a] += merged[b];
            merged.remove(b);
            let after = entropy(ClusterPartition::from_sizes(&merged).unwrap().masses());
            prop_assert!(after <= before + 1e-12);
            prop_assert!(before <= (m as f64).ln() + 1e-12);
        }
    }
}

//! Hybrid semantic clustering.
//!
//! Answers are first pre-clustered by three progressively softer signals, all
//! closed transitively with a union-find:
//!
//! 1. identical normalized strings,
//! 2. embedding cosine similarity above `tau_emb`,
//! 3. NLI merging score at or above `tau_nli`.
//!
//! The pre-clustering is then refined greedily on boundary pairs (pairs whose
//! entailment sits near `tau_nli`), accepting a merge or split only when it
//! lowers the total pair energy by more than `delta`.

mod energy;
mod normalize;
mod partition;
mod refine;
mod scores;
mod union_find;

pub use energy::{merging_score, pair_energy, total_energy};
pub use normalize::{embedding_text, normalize_answer, EMPTY_ANSWER};
pub use partition::ClusterPartition;
pub use refine::{find_boundary_pairs, refine_boundaries, AcceptedMove, BoundaryPair, MoveKind, RefineOutcome};
pub use scores::PairScores;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use union_find::UnionFind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HscConfig {
    pub tau_emb: f64,
    pub tau_nli: f64,
    pub tau_contra: f64,
    /// 1 = strict (contradiction-gated mean entailment), 0 = loose (max entailment).
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub boundary_eps: f64,
    pub max_refine_passes: usize,
}

impl Default for HscConfig {
    fn default() -> Self {
        Self {
            tau_emb: 0.92,
            tau_nli: 0.8,
            tau_contra: 0.5,
            lambda: 1.0,
            alpha: 0.3,
            beta: 0.7,
            gamma: 0.7,
            delta: 0.1,
            boundary_eps: 0.1,
            max_refine_passes: 3,
        }
    }
}

impl HscConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0,1], got {v}")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("gamma", self.gamma)?;
        if !(self.tau_nli > 0.0 && self.tau_nli < 1.0) {
            return Err(Error::Config(format!(
                "tau_nli must lie in (0,1), got {}",
                self.tau_nli
            )));
        }
        if !self.tau_emb.is_finite() || !self.tau_contra.is_finite() {
            return Err(Error::Config("tau_emb and tau_contra must be finite".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.boundary_eps > 0.0) {
            return Err(Error::Config("boundary_eps must be > 0".into()));
        }
        if self.max_refine_passes == 0 {
            return Err(Error::Config("max_refine_passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exact-match groups: answers with equal normalized strings share a label.
///
/// Labels are the rank of the normalized string among the distinct strings, so
/// they depend on answer content and not on answer order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactGroups {
    labels: Vec<usize>,
}

impl ExactGroups {
    pub fn new(answers: &[String]) -> Self {
        let normalized: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
        let mut distinct: Vec<&String> = normalized.iter().collect();
        distinct.sort();
        distinct.dedup();
        let labels = normalized
            .iter()
            .map(|s| distinct.binary_search(&s).expect("string is in its own distinct list"))
            .collect();
        Self { labels }
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Union-find closure of the exact, embedding and NLI merge passes.
pub fn pre_cluster(answers: &[String], scores: &PairScores, cfg: &HscConfig) -> Result<ClusterPartition> {
    let n = answers.len();
    if scores.len() != n {
        return Err(Error::InvalidInput(format!(
            "pair scores cover {} answers, pool has {n}",
            scores.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster an empty pool".into()));
    }
    let groups = ExactGroups::new(answers);
    let mut uf = UnionFind::new(n);

    let mut first_of_group: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        match first_of_group[groups.label(i)] {
            Some(f) => {
                uf.union(f, i);
            }
            None => first_of_group[groups.label(i)] = Some(i),
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if scores.sim(i, j) > cfg.tau_emb {
                uf.union(i, j);
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if !uf.same(i, j) && merging_score(i, j, scores, cfg) >= cfg.tau_nli {
                uf.union(i, j);
            }
        }
    }
    let labels = uf.labels();
    Ok(ClusterPartition::from_labels(&labels)?.with_energy(total_energy(&labels, scores, cfg)))
}

/// Both stages of clustering for one pool.
#[derive(Debug, Clone)]
pub struct HscOutcome {
    pub pre: ClusterPartition,
    pub refined: ClusterPartition,
    pub moves: Vec<AcceptedMove>,
}

/// Pre-clusters and refines, keeping both partitions.
pub fn cluster_detailed(answers: &[String], scores: &PairScores, cfg: &HscConfig) -> Result<HscOutcome> {
    cfg.validate()?;
    let pre = pre_cluster(answers, scores, cfg)?;
    let groups = ExactGroups::new(answers);
    let refined = refine_boundaries(&pre, scores, &groups, cfg);
    Ok(HscOutcome {
        pre,
        refined: refined.partition,
        moves: refined.moves,
    })
}

/// Final hybrid-clustering partition of an answer pool.
pub fn cluster(answers: &[String], scores: &PairScores, cfg: &HscConfig) -> Result<ClusterPartition> {
    Ok(cluster_detailed(answers, scores, cfg)?.refined)
}

/// NLI-only clustering by bidirectional entailment.
///
/// Each answer joins the first existing cluster whose first member it entails
/// and is entailed by, with entailment the most probable NLI class in both
/// directions; otherwise it starts a new cluster. This is the grouping used
/// by plain semantic entropy.
pub fn entailment_cluster(scores: &PairScores) -> Result<ClusterPartition> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster an empty pool".into()));
    }
    let entails = |a: usize, b: usize| {
        let e = scores.ent(a, b);
        let c = scores.contra(a, b);
        let neutral = 1.0 - e - c;
        e > c && e > neutral
    };
    let mut reps: Vec<usize> = Vec::new();
    let labels: Vec<usize> = (0..n)
        .map(|i| match reps.iter().position(|&r| entails(i, r) && entails(r, i)) {
            Some(c) => c,
            None => {
                reps.push(i);
                reps.len() - 1
            }
        })
        .collect();
    ClusterPartition::from_labels(&labels)
}

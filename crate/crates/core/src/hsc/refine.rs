//! Greedy energy-based refinement of boundary pairs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::energy::total_energy;
use super::{ClusterPartition, ExactGroups, HscConfig, PairScores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub i: usize,
    pub j: usize,
    /// Distance of the symmetrized entailment from `tau_nli`.
    pub distance: f64,
}

/// Pairs whose mean entailment lies within `boundary_eps` of `tau_nli` and whose
/// contradiction stays below `tau_contra`, closest first.
///
/// Ties are ordered by the exact-match groups of the two answers and then by
/// index, so the order depends on answer content before position.
pub fn find_boundary_pairs(scores: &PairScores, groups: &ExactGroups, cfg: &HscConfig) -> Vec<BoundaryPair> {
    let n = scores.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let distance = (scores.ent_sym(i, j) - cfg.tau_nli).abs();
            if distance <= cfg.boundary_eps && scores.contra_max(i, j) < cfg.tau_contra {
                pairs.push(BoundaryPair { i, j, distance });
            }
        }
    }
    let key = |p: &BoundaryPair| {
        let (a, b) = (groups.label(p.i), groups.label(p.j));
        (a.min(b), a.max(b), p.i, p.j)
    };
    pairs.sort_by(|x, y| x.distance.total_cmp(&y.distance).then_with(|| key(x).cmp(&key(y))));
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveKind {
    Merge,
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedMove {
    pub kind: MoveKind,
    pub pair: (usize, usize),
    pub energy_before: f64,
    pub energy_after: f64,
}

impl AcceptedMove {
    pub fn delta(&self) -> f64 {
        self.energy_before - self.energy_after
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub partition: ClusterPartition,
    pub moves: Vec<AcceptedMove>,
    pub evaluations: usize,
    pub passes: usize,
}

/// Labels after merging the clusters of `i` and `j`.
fn merged(labels: &[usize], i: usize, j: usize) -> Vec<usize> {
    let (keep, gone) = (labels[i], labels[j]);
    labels.iter().map(|&l| if l == gone { keep } else { l }).collect()
}

/// Labels after moving the exact-match group of `k` into a fresh cluster.
fn extracted(labels: &[usize], groups: &ExactGroups, k: usize) -> Vec<usize> {
    let fresh = labels.iter().max().map_or(0, |m| m + 1);
    let g = groups.label(k);
    labels
        .iter()
        .enumerate()
        .map(|(x, &l)| if groups.label(x) == g { fresh } else { l })
        .collect()
}

/// Applies accepted merge/split moves on boundary pairs until a pass accepts
/// nothing or `max_refine_passes` is reached.
///
/// A separated pair proposes merging the two clusters. A co-clustered pair
/// proposes extracting one side's exact-match group into a new cluster; both
/// sides are evaluated and the lower-energy result is proposed. A move is
/// applied only when it lowers the total energy by more than `delta`. Answers
/// sharing a normalized string are never separated.
pub fn refine_boundaries(
    partition: &ClusterPartition,
    scores: &PairScores,
    groups: &ExactGroups,
    cfg: &HscConfig,
) -> RefineOutcome {
    let boundary = find_boundary_pairs(scores, groups, cfg);
    let mut labels = partition.assignment().to_vec();
    let mut energy = total_energy(&labels, scores, cfg);
    let mut moves = Vec::new();
    let mut evaluations = 0;
    let mut passes = 0;

    while passes < cfg.max_refine_passes && !boundary.is_empty() {
        passes += 1;
        let mut accepted_this_pass = false;
        for bp in &boundary {
            let (i, j) = (bp.i, bp.j);
            if groups.label(i) == groups.label(j) {
                continue;
            }
            evaluations += 1;
            let (kind, proposal, new_energy) = if labels[i] != labels[j] {
                let p = merged(&labels, i, j);
                let e = total_energy(&p, scores, cfg);
                (MoveKind::Merge, p, e)
            } else {
                let a = extracted(&labels, groups, j);
                let b = extracted(&labels, groups, i);
                let ea = total_energy(&a, scores, cfg);
                let eb = total_energy(&b, scores, cfg);
                let pick_b = match eb.total_cmp(&ea) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => groups.label(i) < groups.label(j),
                };
                if pick_b {
                    (MoveKind::Split, b, eb)
                } else {
                    (MoveKind::Split, a, ea)
                }
            };
            if energy - new_energy > cfg.delta {
                moves.push(AcceptedMove {
                    kind,
                    pair: (i, j),
                    energy_before: energy,
                    energy_after: new_energy,
                });
                labels = proposal;
                energy = new_energy;
                accepted_this_pass = true;
            }
        }
        if !accepted_this_pass {
            break;
        }
    }

    let partition = ClusterPartition::from_labels(&labels)
        .expect("refinement keeps a non-empty labeling")
        .with_energy(energy);
    RefineOutcome {
        partition,
        moves,
        evaluations,
        passes,
    }
}

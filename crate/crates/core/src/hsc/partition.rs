use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partition of answer indices `0..n` into clusters.
///
/// Cluster ids are canonical: clusters are numbered in order of their smallest
/// member, so two partitions with the same blocks compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    assignment: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    masses: Vec<f64>,
    total_energy: Option<f64>,
}

impl ClusterPartition {
    /// Builds a partition from arbitrary per-answer labels.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("partition over zero answers".into()));
        }
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        let assignment: Vec<usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let id = *remap.entry(*l).or_insert_with(|| {
                    clusters.push(Vec::new());
                    clusters.len() - 1
                });
                clusters[id].push(i);
                id
            })
            .collect();
        let n = labels.len() as f64;
        let masses = clusters.iter().map(|c| c.len() as f64 / n).collect();
        Ok(Self {
            assignment,
            clusters,
            masses,
            total_energy: None,
        })
    }

    /// Builds a partition from cluster sizes, filling indices in order.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(Error::InvalidInput("empty cluster".into()));
        }
        let labels: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
            .collect();
        Self::from_labels(&labels)
    }

    pub fn with_energy(mut self, energy: f64) -> Self {
        self.total_energy = Some(energy);
        self
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Fraction of answers in each cluster.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_energy(&self) -> Option<f64> {
        self.total_energy
    }

    pub fn same_cluster(&self, i: usize, j: usize) -> bool {
        self.assignment[i] == self.assignment[j]
    }

    pub fn as_set_of_sets(&self) -> BTreeSet<BTreeSet<usize>> {
        self.clusters.iter().map(|c| c.iter().copied().collect()).collect()
    }

    /// Checks the disjoint-cover invariant.
    pub fn is_valid(&self) -> bool {
        let n = self.assignment.len();
        let mut seen = vec![false; n];
        for (id, c) in self.clusters.iter().enumerate() {
            if c.is_empty() {
                return false;
            }
            for &i in c {
                if i >= n || seen[i] || self.assignment[i] != id {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::normalize::embedding_text;
use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::reformulator::cosine_similarity;

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Pairwise signals over an answer pool.
///
/// `sim` is symmetric with a unit diagonal. `ent` and `contra` are directional:
/// `ent(i, j)` is the entailment probability with answer `i` as premise and
/// answer `j` as hypothesis. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPairScores", into = "RawPairScores")]
pub struct PairScores {
    n: usize,
    sim: Vec<f64>,
    ent: Vec<f64>,
    contra: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPairScores {
    n: usize,
    sim: Vec<Vec<f64>>,
    ent: Vec<Vec<f64>>,
    contra: Vec<Vec<f64>>,
}

impl TryFrom<RawPairScores> for PairScores {
    type Error = Error;

    fn try_from(raw: RawPairScores) -> Result<Self> {
        let flatten = |m: Vec<Vec<f64>>, name: &str| -> Result<Vec<f64>> {
            if m.len() != raw.n || m.iter().any(|row| row.len() != raw.n) {
                return Err(Error::InvalidInput(format!("{name} is not {0}x{0}", raw.n)));
            }
            Ok(m.into_iter().flatten().collect())
        };
        let sim = flatten(raw.sim, "sim")?;
        let ent = flatten(raw.ent, "ent")?;
        let contra = flatten(raw.contra, "contra")?;
        PairScores::new(raw.n, sim, ent, contra)
    }
}

impl From<PairScores> for RawPairScores {
    fn from(s: PairScores) -> Self {
        let rows = |m: &[f64]| m.chunks(s.n.max(1)).map(<[f64]>::to_vec).collect::<Vec<_>>();
        RawPairScores {
            n: s.n,
            sim: if s.n == 0 { vec![] } else { rows(&s.sim) },
            ent: if s.n == 0 { vec![] } else { rows(&s.ent) },
            contra: if s.n == 0 { vec![] } else { rows(&s.contra) },
        }
    }
}

impl PairScores {
    pub fn new(n: usize, sim: Vec<f64>, ent: Vec<f64>, contra: Vec<f64>) -> Result<Self> {
        for (name, m) in [("sim", &sim), ("ent", &ent), ("contra", &contra)] {
            if m.len() != n * n {
                return Err(Error::InvalidInput(format!(
                    "{name} has {} entries, expected {}",
                    m.len(),
                    n * n
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        for i in 0..n {
            if (sim[i * n + i] - 1.0).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::InvalidInput(format!("sim diagonal at {i} is not 1")));
            }
            for j in 0..n {
                let s = sim[i * n + j];
                if !(-1.0 - SYMMETRY_TOLERANCE..=1.0 + SYMMETRY_TOLERANCE).contains(&s) {
                    return Err(Error::InvalidInput(format!("sim[{i}][{j}] = {s} out of [-1,1]")));
                }
                if (s - sim[j * n + i]).abs() > SYMMETRY_TOLERANCE {
                    return Err(Error::InvalidInput(format!("sim is not symmetric at ({i},{j})")));
                }
                if i != j {
                    for (name, m) in [("ent", &ent), ("contra", &contra)] {
                        let v = m[i * n + j];
                        if !(0.0..=1.0).contains(&v) {
                            return Err(Error::InvalidInput(format!("{name}[{i}][{j}] = {v} out of [0,1]")));
                        }
                    }
                }
            }
        }
        Ok(Self { n, sim, ent, contra })
    }

    /// Builds scores from closures; `sim` is evaluated for `i < j` only and mirrored.
    pub fn from_fn(
        n: usize,
        sim: impl Fn(usize, usize) -> f64,
        ent: impl Fn(usize, usize) -> f64,
        contra: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut s = vec![0.0; n * n];
        let mut e = vec![0.0; n * n];
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            s[i * n + i] = 1.0;
            for j in 0..n {
                if i < j {
                    let v = sim(i, j);
                    s[i * n + j] = v;
                    s[j * n + i] = v;
                }
                if i != j {
                    e[i * n + j] = ent(i, j);
                    c[i * n + j] = contra(i, j);
                }
            }
        }
        Self::new(n, s, e, c)
    }

    /// Scores every answer pair with the embedding and NLI backends.
    ///
    /// Backends are queried once per distinct text. Empty answers are scored as
    /// the [`EMPTY_ANSWER`](super::EMPTY_ANSWER) placeholder since both backends reject blank input.
    pub fn compute(answers: &[String], backend: &dyn Backend, embed_model: &str) -> Result<Self> {
        let n = answers.len();
        let scoring: Vec<String> = answers.iter().map(|a| embedding_text(a)).collect();
        let mut unique: Vec<String> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let idx: Vec<usize> = scoring
            .iter()
            .map(|t| {
                *slot.entry(t.as_str()).or_insert_with(|| {
                    unique.push(t.clone());
                    unique.len() - 1
                })
            })
            .collect();
        if n == 0 {
            return Self::new(0, vec![], vec![], vec![]);
        }
        let vectors = backend.embed(embed_model, &unique)?;
        let u = unique.len();
        let mut pairs = Vec::with_capacity(u * u);
        for a in 0..u {
            for b in 0..u {
                pairs.push((unique[a].clone(), unique[b].clone()));
            }
        }
        let nli = backend.nli_batch(&pairs)?;
        let mut usim = vec![1.0; u * u];
        for a in 0..u {
            for b in (a + 1)..u {
                let s = cosine_similarity(&vectors[a], &vectors[b])?;
                usim[a * u + b] = s;
                usim[b * u + a] = s;
            }
        }
        Self::from_fn(
            n,
            |i, j| usim[idx[i] * u + idx[j]],
            |i, j| nli[idx[i] * u + idx[j]].entailment,
            |i, j| nli[idx[i] * u + idx[j]].contradiction,
        )
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sim(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.n + j]
    }

    pub fn ent(&self, i: usize, j: usize) -> f64 {
        self.ent[i * self.n + j]
    }

    pub fn contra(&self, i: usize, j: usize) -> f64 {
        self.contra[i * self.n + j]
    }

    /// Mean of the two entailment directions.
    pub fn ent_sym(&self, i: usize, j: usize) -> f64 {
        (self.ent(i, j) + self.ent(j, i)) / 2.0
    }

    pub fn contra_sym(&self, i: usize, j: usize) -> f64 {
        (self.contra(i, j) + self.contra(j, i)) / 2.0
    }

    pub fn contra_max(&self, i: usize, j: usize) -> f64 {
        self.contra(i, j).max(self.contra(j, i))
    }

    /// Reindexes so that new answer `k` is old answer `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        Self::from_fn(
            self.n,
            |i, j| self.sim(perm[i], perm[j]),
            |i, j| self.ent(perm[i], perm[j]),
            |i, j| self.contra(perm[i], perm[j]),
        )
    }
}

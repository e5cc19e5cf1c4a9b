use super::{HscConfig, PairScores};

/// NLI merging score for an unordered pair.
///
/// `λ · mean entailment · [max contradiction < τ_contra] + (1 − λ) · max entailment`.
pub fn merging_score(i: usize, j: usize, scores: &PairScores, cfg: &HscConfig) -> f64 {
    let (e_ij, e_ji) = (scores.ent(i, j), scores.ent(j, i));
    let gate = if scores.contra_max(i, j) < cfg.tau_contra {
        1.0
    } else {
        0.0
    };
    cfg.lambda * ((e_ij + e_ji) / 2.0) * gate + (1.0 - cfg.lambda) * e_ij.max(e_ji)
}

/// Energy of one pair given whether it shares a cluster.
///
/// Intra-cluster pairs pay for low similarity and entailment; inter-cluster
/// pairs pay for low contradiction.
pub fn pair_energy(i: usize, j: usize, same_cluster: bool, scores: &PairScores, cfg: &HscConfig) -> f64 {
    if same_cluster {
        1.0 - (cfg.alpha * scores.sim(i, j) + cfg.beta * scores.ent_sym(i, j))
    } else {
        1.0 - cfg.gamma * scores.contra_sym(i, j)
    }
}

/// Mean intra-cluster pair energy plus mean inter-cluster pair energy.
///
/// An empty pair set contributes zero.
pub fn total_energy(labels: &[usize], scores: &PairScores, cfg: &HscConfig) -> f64 {
    let n = labels.len();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let same = labels[i] == labels[j];
            let e = pair_energy(i, j, same, scores, cfg);
            if same {
                intra += e;
                n_intra += 1;
            } else {
                inter += e;
                n_inter += 1;
            }
        }
    }
    let mean = |sum: f64, count: usize| if count == 0 { 0.0 } else { sum / count as f64 };
    mean(intra, n_intra) + mean(inter, n_inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two(sim: f64, ent: (f64, f64), contra: (f64, f64)) -> PairScores {
        PairScores::from_fn(
            2,
            |_, _| sim,
            |i, _| if i == 0 { ent.0 } else { ent.1 },
            |i, _| if i == 0 { contra.0 } else { contra.1 },
        )
        .unwrap()
    }

    #[test]
    fn merging_score_examples() {
        let strict = HscConfig {
            lambda: 1.0,
            tau_contra: 0.5,
            ..HscConfig::default()
        };
        assert_abs_diff_eq!(
            merging_score(0, 1, &two(0.0, (0.9, 0.7), (0.1, 0.1)), &strict),
            0.8,
            epsilon = 1e-12
        );
        assert_eq!(merging_score(0, 1, &two(0.0, (0.9, 0.7), (0.6, 0.1)), &strict), 0.0);
        let loose = HscConfig {
            lambda: 0.0,
            ..HscConfig::default()
        };
        assert_eq!(merging_score(0, 1, &two(0.0, (0.3, 0.9), (0.9, 0.9)), &loose), 0.9);
    }

    #[test]
    fn pair_energy_examples() {
        let cfg = HscConfig::default();
        assert_abs_diff_eq!(
            pair_energy(0, 1, true, &two(1.0, (1.0, 1.0), (0.0, 0.0)), &cfg),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            pair_energy(0, 1, false, &two(0.0, (0.0, 0.0), (1.0, 1.0)), &cfg),
            0.3,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            pair_energy(0, 1, true, &two(0.5, (0.8, 0.8), (0.0, 0.0)), &cfg),
            0.29,
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_energy_extremes() {
        let cfg = HscConfig::default();
        let s = PairScores::from_fn(3, |_, _| 0.0, |_, _| 0.0, |_, _| 0.0).unwrap();
        assert_abs_diff_eq!(total_energy(&[0, 1, 2], &s, &cfg), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            total_energy(&[0, 0], &two(1.0, (1.0, 1.0), (0.0, 0.0)), &cfg),
            0.0,
            epsilon = 1e-12
        );
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `target`, computed from the
/// logit so it stays finite for saturated outputs.
pub fn bce_from_logit<S: Scalar>(z: S, target: S) -> S {
    z.max(S::zero()) - z * target + (S::one() + (-z.abs()).exp()).ln()
}

/// Area under the ROC curve: the probability that a random positive
/// scores above a random negative, ties counting one half.
///
/// Computed from average ranks (Mann-Whitney U).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            found: format!("{}", labels.len()),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateDataset(
            "AUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * pos_in_tie as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn known_values() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [0, 0, 1, 1];
        assert_eq!(brute_force(&s, &l), 0.75);
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn random_ranking_near_half() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| (next() % 1_000_000) as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| (next() >> 63) as u8).collect();
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn bce_matches_direct_formula() {
        for z in [-5.0f64, -0.3, 0.0, 1.2, 7.0] {
            let p = sigmoid(z);
            for y in [0.0, 1.0] {
                let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                assert!((bce_from_logit(z, y) - direct).abs() < 1e-12);
            }
        }
        assert!(bce_from_logit(-800.0f64, 1.0).is_finite());
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-30.0f64) < 1e-13);
    }
}

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve over descending score thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Step-wise average precision: `Σ (Rᵢ − Rᵢ₋₁) · Pᵢ` with `R₀ = 0`.
    pub average_precision: f64,
}

/// One point per distinct score; samples sharing a score enter together.
pub fn pr_curve(scores: &[f64], gold: &[bool]) -> Result<PrCurve, EvalError> {
    if scores.len() != gold.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), gold: gold.len() });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(*bad));
    }
    let positives = gold.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if gold[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint { threshold, recall, precision });
    }
    Ok(PrCurve { points, average_precision: ap.clamp(0.0, 1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn perfect_ranking() {
        let c = pr_curve(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c.average_precision, 1.0);
    }

    #[test]
    fn single_positive_ranked_last() {
        for n in [1usize, 2, 5, 40] {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let gold: Vec<bool> = (0..n).map(|i| i == n - 1).collect();
            let c = pr_curve(&scores, &gold).unwrap();
            assert!((c.average_precision - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn random_scores_balanced_gold() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        let gold: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let ap = pr_curve(&scores, &gold).unwrap().average_precision;
        assert!((ap - 0.5).abs() <= 0.05, "{ap}");
    }

    #[test]
    fn ties_share_one_point() {
        let c = pr_curve(&[0.5, 0.5, 0.5, 0.2], &[true, false, true, false]).unwrap();
        assert_eq!(c.points.len(), 2);
        assert!((c.points[0].recall - 1.0).abs() < 1e-12);
        assert!((c.points[0].precision - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(pr_curve(&[0.1], &[false]), Err(EvalError::NoPositives)));
        assert!(matches!(pr_curve(&[f64::NAN], &[true]), Err(EvalError::NonFiniteScore(_))));
        assert!(matches!(pr_curve(&[0.1, 0.2], &[true]), Err(EvalError::LengthMismatch { .. })));
    }
}

//! From raw snippet reconstruction losses to frame-level anomaly scores and
//! threshold-free detection metrics (ROC, AUC, EER).

use serde::{Deserialize, Serialize};

use crate::consistency::FrameGrids;
use crate::error::{Error, Result};

/// Min/max range of fusion losses observed on training data, used to squash
/// raw losses into [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
}

impl Normalizer {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyScores);
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteScore { index, value: v });
            }
            min = min.min(v);
            max = max.max(v);
        }
        Ok(Normalizer { min, max })
    }

    /// Clamped affine map onto [0, 1]; a degenerate range maps everything
    /// to 0.
    pub fn normalize(&self, value: f64) -> f64 {
        if self.max == self.min {
            return 0.0;
        }
        ((value - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

/// Anomaly scores at snippet and frame granularity.
#[derive(Clone, Debug)]
pub struct ScoreSeries {
    /// Normalized per-snippet losses before smoothing.
    pub normalized: Vec<f64>,
    /// Smoothed per-snippet scores.
    pub snippet_scores: Vec<f64>,
    /// End frame of each snippet.
    pub ends: Vec<usize>,
    /// One score per frame of the sequence.
    pub frame_scores: Vec<f64>,
}

/// Normalizes raw snippet losses, smooths them with an exponential moving
/// average (`s_k = (1 - lambda) * s_{k-1} + lambda * n_k`, seeded with the
/// first value), and assigns each frame the score of the latest snippet
/// ending at or before it. Frames before the first snippet end carry the
/// first score.
pub fn anomaly_scores(
    raw: &[f64],
    normalizer: &Normalizer,
    lambda_moving: f64,
    total_frames: usize,
    snippet_frames: usize,
    snippet_stride: usize,
) -> Result<ScoreSeries> {
    if raw.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(0.0..=1.0).contains(&lambda_moving) {
        return Err(Error::InvalidConfig {
            field: "lambda_moving".into(),
            reason: "must lie in [0, 1]".into(),
        });
    }
    let ends = FrameGrids::snippet_ends(total_frames, snippet_frames, snippet_stride);
    if ends.len() != raw.len() {
        return Err(Error::LengthMismatch {
            what: "snippet scores for frame range",
            expected: ends.len(),
            actual: raw.len(),
        });
    }
    for (index, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteScore { index, value: v });
        }
    }

    let normalized: Vec<f64> = raw.iter().map(|&v| normalizer.normalize(v)).collect();
    let mut snippet_scores = Vec::with_capacity(normalized.len());
    let mut prev = normalized[0];
    snippet_scores.push(prev);
    for &n in &normalized[1..] {
        prev = (1.0 - lambda_moving) * prev + lambda_moving * n;
        snippet_scores.push(prev);
    }

    let mut frame_scores = vec![0.0; total_frames];
    let mut idx = 0usize;
    for (t, slot) in frame_scores.iter_mut().enumerate() {
        while idx + 1 < ends.len() && ends[idx + 1] <= t {
            idx += 1;
        }
        *slot = snippet_scores[idx];
    }

    Ok(ScoreSeries {
        normalized,
        snippet_scores,
        ends,
        frame_scores,
    })
}

/// One operating point of a ROC curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Tie-aware ROC curve from scores (higher = more anomalous) and 0/1
/// labels. Starts at (0, 0), ends at (1, 1); tied scores advance as one
/// step.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::ScoreLabelMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    for (index, &v) in scores.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteScore { index, value: v });
        }
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassLabels {
            class: u8::from(n_neg == 0),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(points)
}

/// Area under the ROC curve by trapezoidal integration. With the tie-aware
/// curve this equals the Mann-Whitney statistic that scores tied
/// positive/negative pairs 1/2.
pub fn roc_auc(curve: &[RocPoint]) -> f64 {
    let mut auc = 0.0;
    for w in curve.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0;
    }
    auc
}

/// The point where the curve crosses fpr = 1 - tpr, linearly interpolated
/// within the bracketing segment. Along a ROC curve `fpr + tpr - 1` is
/// nondecreasing from -1 to 1, so the crossing exists and is unique.
pub fn eer_point(curve: &[RocPoint]) -> (f64, f64) {
    for w in curve.windows(2) {
        let g1 = w[0].fpr + w[0].tpr - 1.0;
        let g2 = w[1].fpr + w[1].tpr - 1.0;
        if g1 == 0.0 {
            return (w[0].fpr, w[0].tpr);
        }
        if g1 < 0.0 && g2 >= 0.0 {
            if g2 == 0.0 {
                return (w[1].fpr, w[1].tpr);
            }
            let alpha = -g1 / (g2 - g1);
            return (
                w[0].fpr + alpha * (w[1].fpr - w[0].fpr),
                w[0].tpr + alpha * (w[1].tpr - w[0].tpr),
            );
        }
    }
    unreachable!("a ROC curve from (0,0) to (1,1) always crosses fpr = 1 - tpr");
}

/// Equal error rate: the false-positive rate at the [`eer_point`].
pub fn roc_eer(curve: &[RocPoint]) -> f64 {
    eer_point(curve).0
}

/// Detection metrics over one scored sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub eer: f64,
    pub auc_percent: f64,
    pub eer_percent: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc: Vec<RocPoint>,
}

pub fn metrics(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let roc = roc_curve(scores, labels)?;
    let auc = roc_auc(&roc);
    let eer = roc_eer(&roc);
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(MetricsReport {
        auc,
        eer,
        auc_percent: 100.0 * auc,
        eer_percent: 100.0 * eer,
        n_pos,
        n_neg: labels.len() - n_pos,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizer_maps_and_clamps() {
        let n = Normalizer::from_values(&[2.0, 6.0, 4.0]).unwrap();
        assert_eq!(n.min, 2.0);
        assert_eq!(n.max, 6.0);
        assert_eq!(n.normalize(2.0), 0.0);
        assert_eq!(n.normalize(6.0), 1.0);
        assert_eq!(n.normalize(4.0), 0.5);
        assert_eq!(n.normalize(0.0), 0.0);
        assert_eq!(n.normalize(9.0), 1.0);

        let flat = Normalizer::from_values(&[3.0, 3.0]).unwrap();
        assert_eq!(flat.normalize(3.0), 0.0);
        assert_eq!(flat.normalize(100.0), 0.0);

        assert!(matches!(
            Normalizer::from_values(&[]),
            Err(Error::EmptyScores)
        ));
        assert!(matches!(
            Normalizer::from_values(&[1.0, f64::NAN]),
            Err(Error::NonFiniteScore { index: 1, .. })
        ));
    }

    #[test]
    fn moving_average_recurrence() {
        // One step of the smoother: 0.8 * 0.5 + 0.2 * 1.0 = 0.6.
        let norm = Normalizer { min: 0.0, max: 1.0 };
        let series = anomaly_scores(&[0.5, 1.0], &norm, 0.2, 3, 2, 1).unwrap();
        assert_eq!(series.snippet_scores[0], 0.5);
        assert!((series.snippet_scores[1] - 0.6).abs() < 1e-15);

        // Full unroll against an independent fold.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let lambda = 0.3;
        let series = anomaly_scores(&raw, &norm, lambda, 45, 6, 1).unwrap();
        let mut expected = raw[0];
        for (k, &n) in raw.iter().enumerate() {
            if k > 0 {
                expected = (1.0 - lambda) * expected + lambda * n;
            }
            assert!((series.snippet_scores[k] - expected).abs() < 1e-12);
        }

        // lambda = 1 reproduces the normalized series unsmoothed.
        let pass_through = anomaly_scores(&raw, &norm, 1.0, 45, 6, 1).unwrap();
        assert_eq!(pass_through.snippet_scores, pass_through.normalized);
    }

    #[test]
    fn frame_alignment_with_stride() {
        let norm = Normalizer { min: 0.0, max: 4.0 };
        // m=3, tau=2, 10 frames: snippet ends 2, 4, 6, 8.
        let raw = vec![0.0, 1.0, 2.0, 3.0];
        let series = anomaly_scores(&raw, &norm, 1.0, 10, 3, 2).unwrap();
        assert_eq!(series.ends, vec![2, 4, 6, 8]);
        let s = &series.snippet_scores;
        let expected = [
            s[0], s[0], s[0], // frames 0..2 carry the first score
            s[0], // frame 3: last end <= 3 is 2
            s[1], s[1], // frames 4, 5
            s[2], s[2], // frames 6, 7
            s[3], s[3], // frames 8, 9
        ];
        assert_eq!(series.frame_scores, expected);

        // Score/window count mismatch is rejected.
        assert!(matches!(
            anomaly_scores(&raw, &norm, 1.0, 11, 3, 2),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn auc_reference_values() {
        // Perfect separation, reversal, and pure chance.
        let perfect = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc_auc(&perfect), 1.0);
        let reversed = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc_auc(&reversed), 0.0);
        let ties = roc_curve(&[0.5, 0.5, 0.5, 0.5], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc_auc(&ties), 0.5);
        // A tie between one positive and one negative contributes 1/2 a pair.
        let half_tie = roc_curve(&[0.9, 0.5, 0.5, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!((roc_auc(&half_tie) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for round in 0..50 {
            let n = rng.random_range(5..60);
            let mut scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..20) as f64) / 10.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            // Guarantee both classes.
            labels[0] = 1;
            labels[n - 1] = 0;
            scores[0] = rng.random_range(0.0..2.0);

            let mut won = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if labels[i] != 1 {
                    continue;
                }
                for j in 0..n {
                    if labels[j] != 0 {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        won += 1.0;
                    } else if scores[i] == scores[j] {
                        won += 0.5;
                    }
                }
            }
            let oracle = won / pairs;
            let auc = roc_auc(&roc_curve(&scores, &labels).unwrap());
            assert!(
                (auc - oracle).abs() < 1e-12,
                "round {round}: trapezoid {auc} vs pairs {oracle}"
            );
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[29] = 0;
        let base = roc_auc(&roc_curve(&scores, &labels).unwrap());
        let scaled: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 7.0).collect();
        let exped: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        assert_eq!(base, roc_auc(&roc_curve(&scaled, &labels).unwrap()));
        assert_eq!(base, roc_auc(&roc_curve(&exped, &labels).unwrap()));
    }

    #[test]
    fn eer_vertex_and_interpolated_cases() {
        // Crossing exactly at a vertex.
        let curve = roc_curve(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap();
        let (fpr, tpr) = eer_point(&curve);
        assert_eq!((fpr, tpr), (0.5, 0.5));
        assert_eq!(roc_eer(&curve), 0.5);

        // Perfect and inverted detectors.
        let perfect = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc_eer(&perfect), 0.0);
        let inverted = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc_eer(&inverted), 1.0);

        // Random curves: the crossing satisfies fpr = 1 - tpr.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(4..40);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..15) as f64) / 7.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let curve = roc_curve(&scores, &labels).unwrap();
            let (fpr, tpr) = eer_point(&curve);
            assert!(
                (fpr - (1.0 - tpr)).abs() < 1e-9,
                "fpr {fpr} vs 1-tpr {}",
                1.0 - tpr
            );
            assert!((0.0..=1.0).contains(&fpr));
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            roc_curve(&[0.5, 0.6], &[1, 1]),
            Err(Error::SingleClassLabels { class: 1 })
        ));
        assert!(matches!(
            roc_curve(&[0.5, 0.6], &[0, 0]),
            Err(Error::SingleClassLabels { class: 0 })
        ));
        assert!(matches!(
            roc_curve(&[0.5], &[1, 0]),
            Err(Error::ScoreLabelMismatch { .. })
        ));
        assert!(matches!(roc_curve(&[], &[]), Err(Error::EmptyScores)));
        assert!(matches!(
            roc_curve(&[f64::NAN, 0.5], &[1, 0]),
            Err(Error::NonFiniteScore { index: 0, .. })
        ));
    }

    #[test]
    fn metrics_report_is_consistent_and_serializable() {
        let scores = [0.9, 0.7, 0.6, 0.2, 0.4, 0.3];
        let labels = [1, 1, 0, 0, 1, 0];
        let report = metrics(&scores, &labels).unwrap();
        assert_eq!(report.n_pos, 3);
        assert_eq!(report.n_neg, 3);
        assert_eq!(report.auc_percent, 100.0 * report.auc);
        assert_eq!(report.eer_percent, 100.0 * report.eer);
        assert_eq!(report.roc.first().unwrap(), &RocPoint { fpr: 0.0, tpr: 0.0 });
        assert_eq!(report.roc.last().unwrap(), &RocPoint { fpr: 1.0, tpr: 1.0 });

        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.auc, report.auc);
        assert_eq!(back.roc, report.roc);
    }
}

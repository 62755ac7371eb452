//! Pose and point-cloud evaluation.
//!
//! Pose errors are relative, so predictions need no alignment. A pair's error for AUC is
//! `max(RRE, RTE)`: it counts as accurate at `tau` only when both errors are below `tau`.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{relative_pose, rotation_angle, Camera};
use crate::error::{Error, Result};

/// Error assigned to pairs involving an unregistered frame.
pub const UNREGISTERED_ERROR_DEG: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rre_deg: f64,
    /// `None` when the ground-truth baseline is degenerate.
    pub rte_deg: Option<f64>,
}

impl PairError {
    /// The error used for AUC.
    pub fn combined(&self) -> f64 {
        self.rre_deg.max(self.rte_deg.unwrap_or(0.0))
    }
}

fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Errors for every unordered frame pair `i < j`.
pub fn pairwise_errors(pred: &[Option<Camera>], gt: &[Camera]) -> Result<Vec<PairError>> {
    if pred.len() != gt.len() {
        return Err(Error::Arity {
            what: "predicted cameras",
            needed: gt.len(),
            got: pred.len(),
        });
    }
    let pairs: Vec<(usize, usize)> = (0..gt.len())
        .flat_map(|i| (i + 1..gt.len()).map(move |j| (i, j)))
        .collect();
    Ok(pairs
        .into_par_iter()
        .map(|(i, j)| {
            let truth = relative_pose(&gt[i], &gt[j]);
            let (Some(a), Some(b)) = (&pred[i], &pred[j]) else {
                return PairError {
                    i,
                    j,
                    rre_deg: UNREGISTERED_ERROR_DEG,
                    rte_deg: truth.translation.map(|_| UNREGISTERED_ERROR_DEG),
                };
            };
            let est = relative_pose(a, b);
            let rre_deg = rotation_angle(&(est.rotation * truth.rotation.transpose())).to_degrees();
            let rte_deg = truth.translation.map(|t| match est.translation {
                Some(e) => angle_between_deg(&e, &t),
                None => UNREGISTERED_ERROR_DEG,
            });
            PairError {
                i,
                j,
                rre_deg,
                rte_deg,
            }
        })
        .collect())
}

/// Percentage of errors strictly below `tau`.
pub fn accuracy(errors: &[f64], tau: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|e| **e < tau).count() as f64 / errors.len() as f64
}

/// Area under the accuracy curve over `(0, max_threshold]`, normalized to `[0, 100]`.
///
/// Accuracy is a step function that gains `1/N` at each error, so the integral is
/// `sum_i max(0, T - e_i) / (N T)` exactly. Non-finite errors count as failures.
pub fn auc(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() || max_threshold <= 0.0 {
        return 0.0;
    }
    let area: f64 = errors
        .iter()
        .filter(|e| e.is_finite())
        .map(|e| (max_threshold - e.max(0.0)).max(0.0))
        .sum();
    100.0 * area / (errors.len() as f64 * max_threshold)
}

/// AUC over pair errors using the combined error.
pub fn pose_auc(pairs: &[PairError], max_threshold: f64) -> f64 {
    auc(
        &pairs.iter().map(PairError::combined).collect::<Vec<_>>(),
        max_threshold,
    )
}

/// `(threshold, accuracy %)` sampled at `samples + 1` evenly spaced thresholds in `[0, max]`.
pub fn accuracy_curve(errors: &[f64], max_threshold: f64, samples: usize) -> Vec<(f64, f64)> {
    (0..=samples)
        .map(|k| {
            let tau = max_threshold * k as f64 / samples.max(1) as f64;
            (tau, accuracy(errors, tau))
        })
        .collect()
}

pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("threshold,accuracy\n");
    for (tau, acc) in curve {
        let _ = writeln!(out, "{tau},{acc}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudScore {
    pub threshold: f64,
    /// Percentage of predicted points within `threshold` of the ground truth.
    pub accuracy: f64,
    /// Percentage of ground-truth points within `threshold` of the prediction.
    pub completeness: f64,
}

/// Exact nearest-neighbor distances from each query to `cloud`, by a sweep over `x`.
pub fn nearest_distances(queries: &[Vector3<f64>], cloud: &[Vector3<f64>]) -> Vec<f64> {
    let mut sorted = cloud.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x));
    queries
        .par_iter()
        .map(|q| {
            let start = sorted.partition_point(|p| p.x < q.x);
            let mut best = f64::INFINITY;
            for p in &sorted[start..] {
                if p.x - q.x > best {
                    break;
                }
                best = best.min((p - q).norm());
            }
            for p in sorted[..start].iter().rev() {
                if q.x - p.x > best {
                    break;
                }
                best = best.min((p - q).norm());
            }
            best
        })
        .collect()
}

/// Accuracy and completeness per threshold; a point counts when its nearest neighbor lies at
/// distance `<= threshold`.
pub fn cloud_accuracy_completeness(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    thresholds: &[f64],
) -> Result<Vec<CloudScore>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Degenerate(
            "cloud metrics need two nonempty clouds".into(),
        ));
    }
    let to_gt = nearest_distances(pred, gt);
    let to_pred = nearest_distances(gt, pred);
    let within = |d: &[f64], tau: f64| {
        100.0 * d.iter().filter(|x| **x <= tau).count() as f64 / d.len() as f64
    };
    Ok(thresholds
        .iter()
        .map(|&threshold| CloudScore {
            threshold,
            accuracy: within(&to_gt, threshold),
            completeness: within(&to_pred, threshold),
        })
        .collect())
}

/// Headline pose metrics in the usual table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSummary {
    pub pairs: usize,
    /// Percentage of pairs with RRE below 15 degrees.
    pub rre_at_15: f64,
    /// Percentage of pairs with RTE below 15 degrees (pairs without RTE count as accurate).
    pub rte_at_15: f64,
    pub auc_threshold: f64,
    pub auc: f64,
}

pub fn summarize(pairs: &[PairError], auc_threshold: f64) -> PoseSummary {
    let rre: Vec<f64> = pairs.iter().map(|p| p.rre_deg).collect();
    let rte: Vec<f64> = pairs.iter().map(|p| p.rte_deg.unwrap_or(0.0)).collect();
    PoseSummary {
        pairs: pairs.len(),
        rre_at_15: accuracy(&rre, 15.0),
        rte_at_15: accuracy(&rte, 15.0),
        auc_threshold,
        auc: pose_auc(pairs, auc_threshold),
    }
}

impl PoseSummary {
    pub fn csv_header(&self) -> String {
        format!("pairs,RRE@15,RTE@15,AUC@{}", self.auc_threshold)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4}",
            self.pairs, self.rre_at_15, self.rte_at_15, self.auc
        )
    }
}

/// Everything the evaluator reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: String,
    pub summary: PoseSummary,
    pub pairs: Vec<PairError>,
    /// `(threshold, accuracy %)` of the combined pair error.
    pub curve: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cloud: Vec<CloudScore>,
}

impl MetricReport {
    pub fn new(pairs: Vec<PairError>, auc_threshold: f64) -> Self {
        let combined: Vec<f64> = pairs.iter().map(PairError::combined).collect();
        Self {
            format_version: crate::io::FORMAT_VERSION.to_string(),
            summary: summarize(&pairs, auc_threshold),
            curve: accuracy_curve(&combined, auc_threshold, 300),
            pairs,
            cloud: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector2};

    fn cam(axis: Vector3<f64>, t: Vector3<f64>) -> Camera {
        Camera::from_rotation(
            &Rotation3::new(axis).into_inner(),
            t,
            1000.0,
            Vector2::new(500.0, 400.0),
        )
    }

    #[test]
    fn identical_cameras_have_zero_error() {
        let gt = vec![
            cam(Vector3::zeros(), Vector3::new(0.0, 0.0, 5.0)),
            cam(Vector3::new(0.0, 0.3, 0.0), Vector3::new(-1.0, 0.0, 5.0)),
            cam(Vector3::new(0.1, -0.2, 0.0), Vector3::new(1.0, 0.5, 5.0)),
        ];
        let pred: Vec<_> = gt.iter().copied().map(Some).collect();
        let pairs = pairwise_errors(&pred, &gt).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert!(p.rre_deg < 1e-6 && p.rte_deg.unwrap() < 1e-6);
        }
        assert!((pose_auc(&pairs, 10.0) - 100.0).abs() < 1e-4);
    }

    #[test]
    fn known_rotation_discrepancy() {
        let gt = vec![
            cam(Vector3::zeros(), Vector3::new(0.0, 0.0, 5.0)),
            cam(Vector3::new(0.0, 0.3, 0.0), Vector3::new(-1.0, 0.0, 5.0)),
        ];
        let extra = Rotation3::new(Vector3::new(1.0, 2.0, -0.5).normalize() * 5f64.to_radians())
            .into_inner();
        let b = &gt[1];
        let pred = vec![
            Some(gt[0]),
            Some(Camera::from_rotation(
                &(extra * b.rotation()),
                extra * b.translation(),
                b.focal(),
                b.principal_point(),
            )),
        ];
        let pairs = pairwise_errors(&pred, &gt).unwrap();
        assert!((pairs[0].rre_deg - 5.0).abs() < 1e-9);
    }

    #[test]
    fn unregistered_and_degenerate_pairs() {
        let a = cam(Vector3::zeros(), Vector3::new(0.0, 0.0, 5.0));
        let gt = vec![
            a,
            a,
            cam(Vector3::new(0.0, 0.2, 0.0), Vector3::new(1.0, 0.0, 5.0)),
        ];
        let pairs = pairwise_errors(&[Some(a), Some(a), None], &gt).unwrap();
        assert_eq!(pairs[0].rte_deg, None);
        assert_eq!(pairs[1].rre_deg, UNREGISTERED_ERROR_DEG);
        assert_eq!(pairs[1].rte_deg, Some(UNREGISTERED_ERROR_DEG));
        assert!(pairwise_errors(&[Some(a)], &gt).is_err());
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.0, 0.0], 10.0), 100.0);
        assert_eq!(auc(&[11.0, 50.0], 10.0), 0.0);
        assert_eq!(auc(&[f64::NAN, 0.0], 10.0), 50.0);
        // One error at 5 contributes half the area.
        assert_eq!(auc(&[5.0], 10.0), 50.0);
    }

    #[test]
    fn cloud_with_one_outlier() {
        let gt: Vec<Vector3<f64>> = (0..100).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        let mut pred = gt.clone();
        pred.push(Vector3::new(1e3, 1e3, 1e3));
        let scores = cloud_accuracy_completeness(&pred, &gt, &[0.01, 0.02, 0.05]).unwrap();
        for s in scores {
            assert!((s.accuracy - 100.0 * 100.0 / 101.0).abs() < 1e-12);
            assert_eq!(s.completeness, 100.0);
        }
        assert!(cloud_accuracy_completeness(&[], &gt, &[1.0]).is_err());
    }

    #[test]
    fn csv_row_fields() {
        let s = summarize(
            &[PairError {
                i: 0,
                j: 1,
                rre_deg: 1.0,
                rte_deg: Some(20.0),
            }],
            30.0,
        );
        assert_eq!(s.csv_header(), "pairs,RRE@15,RTE@15,AUC@30");
        assert_eq!(s.csv_row(), "1,100.0000,0.0000,33.3333");
    }
}

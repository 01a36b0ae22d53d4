//! Depth error metrics and trajectory drift.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{quat_exp, Se3Pose, Trajectory};
use crate::tensor::Tensor;

pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
pub const DEFAULT_MIN_DEPTH: f64 = 1e-3;
pub const DEFAULT_DRIFT_LENGTHS: [f64; 8] =
    [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const NAMES: [&'static str; 7] = [
        "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    fn from_values(v: [f64; 7]) -> Self {
        DepthMetrics {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            delta1: v[4],
            delta2: v[5],
            delta3: v[6],
        }
    }

    /// Per-image metrics averaged over images.
    pub fn mean(items: &[DepthMetrics]) -> Result<DepthMetrics> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("no metrics to average".into()));
        }
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        Ok(Self::from_values(acc.map(|a| a / items.len() as f64)))
    }

    /// `name=value` lines.
    pub fn to_report(&self) -> String {
        key_values(&Self::NAMES, &self.values())
    }

    /// `prefix,name,value` lines.
    pub fn to_records(&self, prefix: &str) -> String {
        records(prefix, &Self::NAMES, &self.values())
    }
}

fn key_values(names: &[&str], values: &[f64]) -> String {
    let mut s = String::new();
    for (n, v) in names.iter().zip(values) {
        let _ = writeln!(s, "{n}={v:.6}");
    }
    s
}

fn records(prefix: &str, names: &[&str], values: &[f64]) -> String {
    let mut s = String::new();
    for (n, v) in names.iter().zip(values) {
        let _ = writeln!(s, "{prefix},{n},{v:.6}");
    }
    s
}

fn check_aligned(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return shape_err(op, format!("{:?} vs {:?}", pred.shape(), gt.shape()));
    }
    Ok(())
}

/// Metrics over pixels with `min_depth < gt < cap`; predictions are clamped
/// to `[min_depth, cap]`. Thresholds use strict inequality:
/// `max(pred/gt, gt/pred) < 1.25^i`.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, cap: f64, min_depth: f64) -> Result<DepthMetrics> {
    check_aligned("depth_metrics", pred, gt)?;
    let mut acc = [0.0f64; 7];
    let mut n = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let g = g as f64;
        if !(g > min_depth && g < cap) {
            continue;
        }
        let p = (p as f64).clamp(min_depth, cap);
        let diff = g - p;
        let ratio = (p / g).max(g / p);
        let log_diff = g.ln() - p.ln();
        acc[0] += diff.abs() / g;
        acc[1] += diff * diff / g;
        acc[2] += diff * diff;
        acc[3] += log_diff * log_diff;
        acc[4] += (ratio < 1.25) as u8 as f64;
        acc[5] += (ratio < 1.25f64.powi(2)) as u8 as f64;
        acc[6] += (ratio < 1.25f64.powi(3)) as u8 as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "no valid ground-truth pixels".into(),
        ));
    }
    let m = acc.map(|a| a / n as f64);
    Ok(DepthMetrics {
        abs_rel: m[0],
        sq_rel: m[1],
        rmse: m[2].sqrt(),
        rmse_log: m[3].sqrt(),
        delta1: m[4],
        delta2: m[5],
        delta3: m[6],
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    }
}

/// `median(gt) / median(pred)` over pixels where both are positive and finite.
pub fn median_scale(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_aligned("median_scale", pred, gt)?;
    let (p, g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(&p, &g)| p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite())
        .map(|(&p, &g)| (p as f64, g as f64))
        .unzip();
    if p.is_empty() {
        return Err(Error::InvalidArgument("no overlapping valid pixels".into()));
    }
    Ok(median(g) / median(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TrajectoryMetrics {
    /// Mean translational error, percent of segment length.
    pub t_rel: f64,
    /// Mean rotational error, degrees per 100 m.
    pub r_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub metrics: TrajectoryMetrics,
    /// Lengths with at least one segment.
    pub lengths_used: Vec<f64>,
    /// Requested lengths the trajectory was too short for.
    pub lengths_missing: Vec<f64>,
    pub segments: usize,
}

impl DriftReport {
    pub fn incomplete(&self) -> bool {
        !self.lengths_missing.is_empty()
    }

    pub fn to_report(&self) -> String {
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|l| format!("{l}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "t_rel={:.6}\nr_rel={:.6}\nsegments={}\nlengths_used={}\nlengths_missing={}\nincomplete={}\n",
            self.metrics.t_rel,
            self.metrics.r_rel,
            self.segments,
            fmt(&self.lengths_used),
            fmt(&self.lengths_missing),
            self.incomplete()
        )
    }

    pub fn to_records(&self, prefix: &str) -> String {
        records(
            prefix,
            &["t_rel", "r_rel"],
            &[self.metrics.t_rel, self.metrics.r_rel],
        )
    }
}

fn rotation_angle(p: &Se3Pose) -> f64 {
    let q = quat_exp(p.rot_log);
    2.0 * (q.x * q.x + q.y * q.y + q.z * q.z).sqrt().atan2(q.w.abs())
}

/// Drift over every start frame and segment length. A segment starting at
/// `i` ends at the first frame whose accumulated ground-truth path length
/// from `i` reaches `L` (up to a relative rounding slack of 1e-9).
pub fn trajectory_drift(
    pred: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
) -> Result<DriftReport> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectories differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred
        .entries()
        .iter()
        .zip(gt.entries())
        .any(|(a, b)| a.0 != b.0)
    {
        return Err(Error::InvalidArgument(
            "trajectory frame indices differ".into(),
        ));
    }
    if lengths.is_empty() || lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument(
            "segment lengths must be positive".into(),
        ));
    }
    let g: Vec<Se3Pose> = gt.poses().copied().collect();
    let p: Vec<Se3Pose> = pred.poses().copied().collect();
    let mut dist = vec![0.0; g.len()];
    for i in 1..g.len() {
        let d: f64 = (0..3)
            .map(|k| (g[i].trans[k] - g[i - 1].trans[k]).powi(2))
            .sum();
        dist[i] = dist[i - 1] + d.sqrt();
    }

    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    let mut used = Vec::new();
    let mut missing = Vec::new();
    for &len in lengths {
        let reach = len * (1.0 - 1e-9);
        let mut hit = false;
        for first in 0..g.len() {
            let Some(last) = (first..g.len()).find(|&j| dist[j] - dist[first] >= reach) else {
                break;
            };
            let dg = g[first].inverse().compose(&g[last]);
            let dp = p[first].inverse().compose(&p[last]);
            let err = dp.inverse().compose(&dg);
            let t = err.trans.iter().map(|v| v * v).sum::<f64>().sqrt();
            t_sum += t / len;
            r_sum += rotation_angle(&err) / len;
            count += 1;
            hit = true;
        }
        if hit {
            used.push(len);
        } else {
            missing.push(len);
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "trajectory of length {:.1} m is shorter than every segment length",
            dist.last().copied().unwrap_or(0.0)
        )));
    }
    Ok(DriftReport {
        metrics: TrajectoryMetrics {
            t_rel: 100.0 * t_sum / count as f64,
            r_rel: 100.0 * (r_sum / count as f64).to_degrees(),
        },
        lengths_used: used,
        lengths_missing: missing,
        segments: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[f32]) -> Tensor {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(&[1.0, 5.0, 30.0, 79.0]);
        let m = depth_metrics(&gt, &gt, 80.0, 1e-3).unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn doubled_prediction() {
        let gt = map(&[1.0, 2.5, 10.0, 40.0]);
        let pred = gt.map(|v| 2.0 * v);
        let m = depth_metrics(&pred, &gt, 80.0, 1e-3).unwrap();
        assert_eq!(m.abs_rel, 1.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn threshold_is_strict() {
        let gt = map(&[4.0; 6]);
        let pred = map(&[5.0; 6]);
        let m = depth_metrics(&pred, &gt, 80.0, 1e-3).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse), (0.25, 0.25, 1.0));
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 1.0);
    }

    #[test]
    fn cap_and_clamp() {
        // gt beyond the cap is ignored; predictions beyond it are clamped.
        let gt = map(&[10.0, 100.0]);
        let pred = map(&[200.0, 5.0]);
        let m = depth_metrics(&pred, &gt, 80.0, 1e-3).unwrap();
        assert!((m.abs_rel - 7.0).abs() < 1e-12);
        assert!(depth_metrics(&pred, &map(&[0.0, 90.0]), 80.0, 1e-3).is_err());
        assert!(depth_metrics(&map(&[1.0]), &gt, 80.0, 1e-3).is_err());
    }

    #[test]
    fn median_scale_examples() {
        let gt = map(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(median_scale(&gt.map(|v| v / 2.0), &gt).unwrap(), 2.0);
        assert_eq!(median_scale(&gt, &gt).unwrap(), 1.0);
        let outlier = map(&[1.0, 2.0, 3.0, 4.0, 1e6]);
        assert_eq!(median_scale(&outlier, &gt).unwrap(), 1.0);
        let even = map(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(median_scale(&even, &even.map(|v| 3.0 * v)).unwrap(), 3.0);
        assert!(median_scale(&map(&[0.0]), &map(&[1.0])).is_err());
    }

    #[test]
    fn median_scaling_helps_scale_ambiguous_prediction() {
        let gt = map(&[2.0, 4.0, 6.0, 8.0, 12.0]);
        let pred = map(&[0.25, 0.45, 0.7, 0.8, 1.3]);
        let s = median_scale(&pred, &gt).unwrap() as f32;
        let raw = depth_metrics(&pred, &gt, 80.0, 1e-3).unwrap();
        let scaled = depth_metrics(&pred.map(|v| v * s), &gt, 80.0, 1e-3).unwrap();
        assert!(scaled.abs_rel <= raw.abs_rel);
    }

    fn line(n: usize, scale: f64) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|i| Se3Pose::from_translation([0.0, 0.0, scale * i as f64]))
                .collect(),
        )
    }

    #[test]
    fn scaled_straight_line() {
        let gt = line(301, 1.0);
        let pred = line(301, 1.01);
        let r = trajectory_drift(&pred, &gt, &DEFAULT_DRIFT_LENGTHS).unwrap();
        assert!((r.metrics.t_rel - 1.0).abs() < 1e-9, "{:?}", r.metrics);
        assert_eq!(r.metrics.r_rel, 0.0);
        assert_eq!(r.lengths_used, vec![100.0, 200.0, 300.0]);
        assert!(r.incomplete());
        assert_eq!(r.segments, 201 + 101 + 1);
    }

    #[test]
    fn identity_baseline_has_full_drift() {
        let gt = line(150, 1.0);
        let pred = Trajectory::from_poses(vec![Se3Pose::IDENTITY; 150]);
        let r = trajectory_drift(&pred, &gt, &[100.0]).unwrap();
        assert!((r.metrics.t_rel - 100.0).abs() < 1e-9);
    }

    #[test]
    fn drift_errors() {
        let gt = line(50, 1.0);
        assert!(trajectory_drift(&gt, &gt, &[100.0]).is_err());
        assert!(trajectory_drift(&line(40, 1.0), &gt, &[10.0]).is_err());
        assert!(trajectory_drift(&gt, &gt, &[]).is_err());
        let r = trajectory_drift(&gt, &gt, &[10.0, 20.0]).unwrap();
        assert_eq!(r.metrics, TrajectoryMetrics::default());
    }

    #[test]
    fn rotation_drift_in_degrees_per_100m() {
        // Prediction yaws 1 degree more than ground truth over each 100 m.
        let n = 201;
        let gt = line(n, 1.0);
        let pred = Trajectory::from_poses(
            gt.poses()
                .enumerate()
                .map(|(i, p)| {
                    let angle = (i as f64 / 100.0).to_radians();
                    Se3Pose::new([0.0, angle / 2.0, 0.0], p.trans)
                })
                .collect(),
        );
        let r = trajectory_drift(&pred, &gt, &[100.0]).unwrap();
        assert!((r.metrics.r_rel - 1.0).abs() < 1e-9, "{:?}", r.metrics);
    }

    #[test]
    fn reports_list_every_metric() {
        let m = DepthMetrics::default();
        assert_eq!(m.to_report().lines().count(), 7);
        assert!(m.to_report().starts_with("abs_rel=0.000000\n"));
        assert!(m.to_records("eval").contains("eval,delta3,0.000000"));
    }

    fn arb_pose() -> impl Strategy<Value = Se3Pose> {
        (
            prop::array::uniform3(-0.5f64..0.5),
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_map(|(r, t)| Se3Pose::new(r, t))
    }

    proptest! {
        #[test]
        fn deltas_are_monotone_and_order_free(
            vals in prop::collection::vec((0.5f32..90.0, 0.01f32..100.0), 1..40),
            rot in 0usize..40,
        ) {
            let gt: Vec<f32> = vals.iter().map(|v| v.0).collect();
            let pred: Vec<f32> = vals.iter().map(|v| v.1).collect();
            let Ok(m) = depth_metrics(&map(&pred), &map(&gt), 80.0, 1e-3) else {
                return Ok(());
            };
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
            prop_assert!((0.0..=1.0).contains(&m.delta1) && m.delta3 <= 1.0 && m.rmse >= 0.0);
            let k = rot % gt.len();
            let (mut g2, mut p2) = (gt.clone(), pred.clone());
            g2.rotate_left(k);
            p2.rotate_left(k);
            let m2 = depth_metrics(&map(&p2), &map(&g2), 80.0, 1e-3).unwrap();
            for (a, b) in m.values().iter().zip(m2.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn drift_ignores_global_frame(world in arb_pose(), noise in prop::collection::vec(arb_pose(), 30)) {
            let gt = line(30, 1.0);
            let pred = Trajectory::from_poses(
                gt.poses().zip(&noise).map(|(p, n)| {
                    let small = Se3Pose::new(n.rot_log.map(|v| v * 0.1), n.trans.map(|v| v * 0.1));
                    p.compose(&small)
                }).collect(),
            );
            let a = trajectory_drift(&pred, &gt, &[5.0, 10.0]).unwrap();
            let b = trajectory_drift(&pred.transformed(&world), &gt.transformed(&world), &[5.0, 10.0]).unwrap();
            prop_assert!((a.metrics.t_rel - b.metrics.t_rel).abs() < 1e-6);
            prop_assert!((a.metrics.r_rel - b.metrics.r_rel).abs() < 1e-6);
            prop_assert!(a.metrics.t_rel >= 0.0 && a.metrics.r_rel >= 0.0);
        }
    }
}

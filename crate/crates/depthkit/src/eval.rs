//! Evaluation of trained networks against synthetic ground truth.

use crate::disparity::DisparityNet;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{disparity_to_depth, Se3Pose, StereoRig, Trajectory};
use crate::metrics::{
    depth_metrics, trajectory_drift, DepthMetrics, DriftReport, DEFAULT_DEPTH_CAP,
    DEFAULT_MIN_DEPTH,
};
use crate::pose::PoseNet;
use crate::synthdata::StereoSample;
use crate::tensor::Tensor;

/// Fraction of columns on each side counted as the image border.
pub const BORDER_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthEval {
    /// Per-image metrics averaged over the split.
    pub metrics: DepthMetrics,
    /// Mean `|gt - pred| / gt` over valid pixels in the border columns.
    pub border_abs_rel: f64,
    /// Same over the remaining columns.
    pub interior_abs_rel: f64,
}

impl DepthEval {
    pub fn to_report(&self) -> String {
        format!(
            "{}border_abs_rel={:.6}\ninterior_abs_rel={:.6}\n",
            self.metrics.to_report(),
            self.border_abs_rel,
            self.interior_abs_rel
        )
    }
}

/// Number of columns on each side treated as border for width `w`.
pub fn border_columns(w: usize, fraction: f64) -> usize {
    ((fraction * w as f64).round() as usize).clamp(1, w / 2)
}

/// Score level-0 disparity predictions (pixels, one `1×1×H×W` per sample).
pub fn evaluate_disparities(
    preds: &[Tensor],
    samples: &[StereoSample],
    rig: &StereoRig,
) -> Result<DepthEval> {
    if preds.len() != samples.len() || samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let (mut border, mut nb, mut interior, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for (d, s) in preds.iter().zip(samples) {
        if d.shape() != s.depth.shape() {
            return shape_err(
                "evaluate_disparities",
                format!("{:?} vs {:?}", d.shape(), s.depth.shape()),
            );
        }
        let depth = disparity_to_depth(d, rig);
        per_image.push(depth_metrics(
            &depth,
            &s.depth,
            DEFAULT_DEPTH_CAP,
            DEFAULT_MIN_DEPTH,
        )?);
        let w = d.shape().w();
        let b = border_columns(w, BORDER_FRACTION);
        for (i, (&p, &g)) in depth.data().iter().zip(s.depth.data()).enumerate() {
            let g = g as f64;
            if !(g > DEFAULT_MIN_DEPTH && g < DEFAULT_DEPTH_CAP) {
                continue;
            }
            let e = ((p as f64).clamp(DEFAULT_MIN_DEPTH, DEFAULT_DEPTH_CAP) - g).abs() / g;
            let x = i % w;
            if x < b || x >= w - b {
                border += e;
                nb += 1;
            } else {
                interior += e;
                ni += 1;
            }
        }
    }
    Ok(DepthEval {
        metrics: DepthMetrics::mean(&per_image)?,
        border_abs_rel: border / nb.max(1) as f64,
        interior_abs_rel: interior / ni.max(1) as f64,
    })
}

/// Level-0 disparity of every sample's left image.
pub fn predict_disparities(
    net: &DisparityNet,
    samples: &[StereoSample],
    flip: Option<f64>,
) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| Ok(net.predict(&s.left, flip)?.levels.swap_remove(0)))
        .collect()
}

pub fn evaluate_depth(
    net: &DisparityNet,
    samples: &[StereoSample],
    rig: &StereoRig,
    flip: Option<f64>,
) -> Result<DepthEval> {
    let cfg = net.config();
    if (cfg.height, cfg.width) != (rig.height, rig.width) {
        return Err(Error::InvalidArgument(format!(
            "model trained at {}x{} cannot be evaluated at {}x{}",
            cfg.height, cfg.width, rig.height, rig.width
        )));
    }
    let preds = predict_disparities(net, samples, flip)?;
    evaluate_disparities(&preds, samples, rig)
}

/// Median ground-truth disparity over every pixel of `samples`.
pub fn median_disparity(samples: &[StereoSample]) -> Result<f32> {
    let mut all: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.disparity.data().iter().copied())
        .collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mid = all.len() / 2;
    let (_, m, _) = all.select_nth_unstable_by(mid, f32::total_cmp);
    Ok(*m)
}

/// Predict the constant median disparity everywhere.
pub fn evaluate_constant_baseline(samples: &[StereoSample], rig: &StereoRig) -> Result<DepthEval> {
    let d = median_disparity(samples)?;
    let preds: Vec<Tensor> = samples
        .iter()
        .map(|s| Tensor::full(s.disparity.shape(), d))
        .collect();
    evaluate_disparities(&preds, samples, rig)
}

/// Chain the network's frame-to-frame motions into a trajectory.
///
/// Frame `t` (for `1 ≤ t ≤ n-2`) is the target with contexts `t-1` and
/// `t+1`; its second output maps frame `t` into frame `t+1`. The first
/// step uses the inverse of frame 1's motion towards frame 0.
pub fn predict_trajectory(net: &PoseNet, frames: &[Tensor]) -> Result<Trajectory> {
    if net.config().context_size != 3 {
        return Err(Error::InvalidArgument(
            "trajectory prediction needs context size 3".into(),
        ));
    }
    if frames.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames is too short for context 3",
            frames.len()
        )));
    }
    let n = frames.len();
    let mut motions: Vec<Se3Pose> = Vec::with_capacity(n - 1);
    for t in 1..n - 1 {
        let poses = net.predict(&frames[t], &[frames[t - 1].clone(), frames[t + 1].clone()])?;
        if t == 1 {
            motions.push(poses[0].inverse());
        }
        motions.push(poses[1]);
    }
    Ok(Trajectory::from_relative_motions(&motions))
}

/// Median frame-to-frame translation magnitude of a trajectory.
pub fn median_step_length(traj: &Trajectory) -> Result<f64> {
    let p: Vec<&Se3Pose> = traj.poses().collect();
    if p.len() < 2 {
        return Err(Error::InvalidArgument("trajectory needs two poses".into()));
    }
    let mut steps: Vec<f64> = p
        .windows(2)
        .map(|w| {
            let rel = w[0].inverse().compose(w[1]);
            rel.trans.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    let mid = steps.len() / 2;
    let (_, m, _) = steps.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEval {
    pub predicted: Trajectory,
    pub drift: DriftReport,
    /// Drift of a prediction that never moves.
    pub identity_drift: DriftReport,
    pub median_step: f64,
    pub gt_median_step: f64,
}

impl PoseEval {
    pub fn to_report(&self) -> String {
        format!(
            "{}identity_t_rel={:.6}\nidentity_r_rel={:.6}\nmedian_step={:.6}\ngt_median_step={:.6}\n",
            self.drift.to_report(),
            self.identity_drift.metrics.t_rel,
            self.identity_drift.metrics.r_rel,
            self.median_step,
            self.gt_median_step
        )
    }
}

pub fn evaluate_trajectory(
    predicted: Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
) -> Result<PoseEval> {
    let identity = Trajectory::from_poses(vec![Se3Pose::IDENTITY; gt.len()]);
    Ok(PoseEval {
        drift: trajectory_drift(&predicted, gt, lengths)?,
        identity_drift: trajectory_drift(&identity, gt, lengths)?,
        median_step: median_step_length(&predicted)?,
        gt_median_step: median_step_length(gt)?,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{DataSpec, Split};

    fn spec() -> DataSpec {
        DataSpec {
            train_scenes: 1,
            eval_scenes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn ground_truth_oracle_is_perfect() {
        let spec = spec();
        let samples = spec.render_split(Split::Eval).unwrap();
        let rig = spec.rig().unwrap();
        let preds: Vec<Tensor> = samples.iter().map(|s| s.disparity.clone()).collect();
        let e = evaluate_disparities(&preds, &samples, &rig).unwrap();
        assert!(
            e.metrics.abs_rel < 1e-6 && e.metrics.rmse < 1e-4,
            "{:?}",
            e.metrics
        );
        assert_eq!(
            (e.metrics.delta1, e.metrics.delta2, e.metrics.delta3),
            (1.0, 1.0, 1.0)
        );
        assert!(e.border_abs_rel < 1e-6);
    }

    #[test]
    fn constant_baseline_is_imperfect() {
        let spec = spec();
        let samples = spec.render_split(Split::Eval).unwrap();
        let e = evaluate_constant_baseline(&samples, &spec.rig().unwrap()).unwrap();
        assert!(e.metrics.abs_rel > 0.05);
        assert!(evaluate_disparities(&[], &samples, &spec.rig().unwrap()).is_err());
    }

    #[test]
    fn border_width() {
        assert_eq!(border_columns(128, 0.05), 6);
        assert_eq!(border_columns(256, 0.05), 13);
        assert_eq!(border_columns(4, 0.05), 1);
    }

    #[test]
    fn ground_truth_motions_chain_back() {
        let spec = DataSpec {
            frames: 12,
            ..Default::default()
        };
        let seq = crate::synthdata::render_sequence(&spec.sequence().unwrap()).unwrap();
        let motions: Vec<Se3Pose> = (0..11).map(|t| seq.relative_pose(t, t + 1)).collect();
        let traj = Trajectory::from_relative_motions(&motions);
        let e = evaluate_trajectory(traj, &seq.poses, &[5.0]).unwrap();
        assert!(e.drift.metrics.t_rel < 1e-9 && e.drift.metrics.r_rel < 1e-6);
        assert!(e.identity_drift.metrics.t_rel > 95.0);
        assert!((e.gt_median_step - 1.0).abs() < 1e-9);
    }
}

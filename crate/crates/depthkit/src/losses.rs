//! Photometric, edge-aware smoothness and occlusion objectives.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::StereoRig;
use crate::layers::{downsample_pyramid, synthesize_stereo};

pub const SSIM_C1: f32 = 1e-4;
pub const SSIM_C2: f32 = 9e-4;

/// Weights of the depth and pose objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Smoothness weight λ1.
    pub smoothness: f32,
    /// Occlusion weight λ2.
    pub occlusion: f32,
    /// SSIM/L1 mix for the stereo appearance term.
    pub alpha_stereo: f32,
    /// SSIM/L1 mix for the temporal (pose) appearance term.
    pub alpha_pose: f32,
    /// Per-level multiplier, level 0 weighted 1.
    pub scale_decay: f32,
    /// Apply `scale_decay` to the smoothness term only.
    pub decay_smoothness_only: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            smoothness: 0.1,
            occlusion: 0.01,
            alpha_stereo: 0.85,
            alpha_pose: 0.05,
            scale_decay: 0.5,
            decay_smoothness_only: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.smoothness >= 0.0
            && self.occlusion >= 0.0
            && self.scale_decay >= 0.0
            && (0.0..=1.0).contains(&self.alpha_stereo)
            && (0.0..=1.0).contains(&self.alpha_pose);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid loss weights {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-pixel appearance error `α·(1 − ssim)/2 + (1 − α)·l1`.
pub fn photometric_error(ssim: f32, l1: f32, alpha: f32) -> f32 {
    alpha * (1.0 - ssim) / 2.0 + (1.0 - alpha) * l1
}

/// Per-pixel SSIM over 3×3 windows (reflection padded), same shape as the inputs.
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(
            "ssim",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        );
    }
    let pool = |tape: &mut Tape, x: Var| -> Result<Var> {
        let p = tape.reflect_pad(x, 1)?;
        tape.avg_pool2d(p, 3, 1)
    };
    let mu_a = pool(tape, a)?;
    let mu_b = pool(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = pool(tape, aa)?;
    let e_bb = pool(tape, bb)?;
    let e_ab = pool(tape, ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.affine(mu_ab, 2.0, SSIM_C1)?;
    let n2 = tape.affine(cov, 2.0, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_scalar(d1, SSIM_C1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, SSIM_C2)?;
    let den = tape.mul(d1, d2)?;
    tape.div(num, den)
}

/// Mean of `map` (`N×C×H×W`) over pixels where `mask` (`N×1×H×W`) is 1.
pub fn masked_mean(tape: &mut Tape, map: Var, mask: Option<Var>) -> Result<Var> {
    let Some(mask) = mask else {
        return tape.mean(map);
    };
    let s = tape.shape(map);
    let ms = tape.shape(mask);
    if ms.0 != [s.n(), 1, s.h(), s.w()] {
        return shape_err("masked_mean", format!("mask {ms:?} for map {s:?}"));
    }
    let count = tape.value(mask).sum();
    if count <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let m = tape.mul(map, mask)?;
    let total = tape.sum(m)?;
    tape.scale(total, (1.0 / (count * s.c() as f64)) as f32)
}

/// SSIM/L1 appearance loss between a target and its reconstruction,
/// averaged over valid pixels and channels.
pub fn appearance_loss(
    tape: &mut Tape,
    target: Var,
    synthesized: Var,
    alpha: f32,
    mask: Option<Var>,
) -> Result<Var> {
    let s = ssim(tape, target, synthesized)?;
    let d = tape.sub(target, synthesized)?;
    let l1 = tape.abs(d)?;
    let dssim = tape.affine(s, -alpha / 2.0, alpha / 2.0)?;
    let l1 = tape.scale(l1, 1.0 - alpha)?;
    let per_pixel = tape.add(dssim, l1)?;
    masked_mean(tape, per_pixel, mask)
}

/// Temporal appearance loss; same form as [`appearance_loss`] with the pose mix.
pub fn pose_photometric_loss(
    tape: &mut Tape,
    target: Var,
    synthesized: Var,
    alpha_pose: f32,
    mask: Option<Var>,
) -> Result<Var> {
    appearance_loss(tape, target, synthesized, alpha_pose, mask)
}

/// Edge-aware smoothness of a disparity map (`N×1×H×W`) against an image
/// (`N×C×H×W`). Disparity is divided by its per-image mean first.
pub fn smoothness_loss(tape: &mut Tape, disparity: Var, image: Var) -> Result<Var> {
    let ds = tape.shape(disparity);
    let is = tape.shape(image);
    if ds.c() != 1 || ds.n() != is.n() || ds.h() != is.h() || ds.w() != is.w() {
        return shape_err("smoothness_loss", format!("{ds:?} vs image {is:?}"));
    }
    let [n, c, h, w] = is.0;
    let mean = tape.sum_to(disparity, [n, 1, 1, 1])?;
    let mean = tape.scale(mean, 1.0 / (h * w) as f32)?;
    let mean = tape.add_scalar(mean, 1e-7)?;
    let d = tape.div(disparity, mean)?;

    let mut total = None;
    for dim in [3, 2] {
        let len = if dim == 3 { w } else { h };
        if len < 2 {
            continue;
        }
        let d1 = tape.narrow(d, dim, 1, len - 1)?;
        let d0 = tape.narrow(d, dim, 0, len - 1)?;
        let dd = tape.sub(d1, d0)?;
        let dd = tape.abs(dd)?;
        let i1 = tape.narrow(image, dim, 1, len - 1)?;
        let i0 = tape.narrow(image, dim, 0, len - 1)?;
        let di = tape.sub(i1, i0)?;
        let di = tape.abs(di)?;
        let shape = tape.shape(dd);
        let di = tape.sum_to(di, shape)?;
        let di = tape.scale(di, -1.0 / c as f32)?;
        let weight = tape.exp(di)?;
        let term = tape.mul(dd, weight)?;
        let term = tape.mean(term)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => shape_err("smoothness_loss", "map is 1×1"),
    }
}

/// Mean absolute disparity.
pub fn occlusion_loss(tape: &mut Tape, disparity: Var) -> Result<Var> {
    let a = tape.abs(disparity)?;
    tape.mean(a)
}

/// Weight of pyramid level `k` and the normalizer over `levels` levels.
fn scale_weights(decay: f32, levels: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..levels).map(|k| decay.powi(k as i32)).collect();
    let sum: f32 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Scalar values of the three depth-loss components, weighted as in the total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthLossParts {
    pub photometric: f64,
    pub smoothness: f64,
    pub occlusion: f64,
}

/// Multi-scale stereo loss. `pyramid[k]` is a disparity map in pixels of
/// level `k` (`N×1×H/2^k×W/2^k`); every level is upsampled to full
/// resolution before view synthesis, while smoothness and occlusion use the
/// native level with disparity expressed as a fraction of the level width.
pub fn total_depth_loss(
    tape: &mut Tape,
    pyramid: &[Var],
    target: Var,
    source: Var,
    rig: &StereoRig,
    weights: &LossWeights,
) -> Result<(Var, DepthLossParts)> {
    if pyramid.is_empty() {
        return Err(Error::InvalidArgument("empty disparity pyramid".into()));
    }
    let ts = tape.shape(target);
    if ts.h() != rig.height || ts.w() != rig.width {
        return shape_err(
            "total_depth_loss",
            format!(
                "image {ts:?} does not match rig {}x{}",
                rig.height, rig.width
            ),
        );
    }
    let images = downsample_pyramid(tape, target, pyramid.len())?;
    let decayed = scale_weights(weights.scale_decay, pyramid.len());
    let flat = 1.0 / pyramid.len() as f32;

    let mut parts = DepthLossParts::default();
    let mut total: Option<Var> = None;
    for (k, &d) in pyramid.iter().enumerate() {
        let ds = tape.shape(d);
        let f = 1usize << k;
        if ds.h() * f != ts.h() || ds.w() * f != ts.w() {
            return shape_err("total_depth_loss", format!("level {k} has shape {ds:?}"));
        }
        let full = if k == 0 {
            d
        } else {
            let up = tape.upsample_bilinear(d, f)?;
            tape.scale(up, f as f32)?
        };
        let (synth, mask) = synthesize_stereo(tape, source, full, rig)?;
        let lp = appearance_loss(tape, target, synth, weights.alpha_stereo, Some(mask))?;
        let rel = tape.scale(d, 1.0 / ds.w() as f32)?;
        let ls = smoothness_loss(tape, rel, images[k])?;
        let lo = occlusion_loss(tape, rel)?;

        let ws = decayed[k];
        let wp = if weights.decay_smoothness_only {
            flat
        } else {
            ws
        };
        let wo = wp;
        parts.photometric += (wp * tape.value(lp).item()) as f64;
        parts.smoothness += (ws * weights.smoothness * tape.value(ls).item()) as f64;
        parts.occlusion += (wo * weights.occlusion * tape.value(lo).item()) as f64;

        let lp = tape.scale(lp, wp)?;
        let ls = tape.scale(ls, ws * weights.smoothness)?;
        let lo = tape.scale(lo, wo * weights.occlusion)?;
        let level = tape.add(lp, ls)?;
        let level = tape.add(level, lo)?;
        total = Some(match total {
            Some(t) => tape.add(t, level)?,
            None => level,
        });
    }
    Ok((total.expect("non-empty pyramid"), parts))
}

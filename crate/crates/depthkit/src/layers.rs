//! Sub-pixel disparity heads, differentiable flip fusion, view synthesis
//! and image pyramids.

use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::geometry::{disparity_to_depth_var, Pinhole, StereoRig};
use crate::params::{Bound, Conv, ParamStore};
use crate::tensor::Tensor;

/// Widths of the four convolutions in a sub-pixel branch.
pub const SUBPIXEL_WIDTHS: [usize; 4] = [32, 32, 32, 16];

/// Default fraction of columns blended at each border by [`flip_fuse`].
pub const FLIP_RAMP_FRACTION: f64 = 0.05;

/// Four 3×3 convolutions (ReLU after the first three), a 1×1 projection to
/// `r²` channels, a sigmoid and a pixel shuffle by `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubpixelBranch {
    convs: [Conv; 4],
    proj: Conv,
    r: usize,
}

impl SubpixelBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Xoshiro256PlusPlus,
        name: &str,
        cin: usize,
        r: usize,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(4);
        let mut c = cin;
        for (i, &w) in SUBPIXEL_WIDTHS.iter().enumerate() {
            convs.push(Conv::same(store, rng, &format!("{name}.conv{i}"), c, w, 3)?);
            c = w;
        }
        let proj = Conv::same(store, rng, &format!("{name}.proj"), c, r * r, 1)?;
        Ok(SubpixelBranch {
            convs: convs.try_into().expect("four convolutions"),
            proj,
            r,
        })
    }

    pub fn factor(&self) -> usize {
        self.r
    }

    /// Maps `N×cin×H×W` features to an `N×1×rH×rW` map in (0, 1).
    pub fn apply(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let mut x = features;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.apply(tape, p, x)?;
            if i < 3 {
                x = tape.relu(x)?;
            }
        }
        let x = self.proj.apply(tape, p, x)?;
        let x = tape.sigmoid(x)?;
        tape.pixel_shuffle(x, self.r)
    }
}

/// Per-column blend weights `(w_direct, w_flipped)` for a map of width `w`.
///
/// The left `fraction` of columns ramps the flipped-pass weight from 1 at the
/// edge down to 0.5; the right side mirrors it, so `w_flipped[x] ==
/// w_direct[w - 1 - x]` exactly and the fused layer commutes with `hflip`.
pub fn flip_blend_weights(w: usize, fraction: f64) -> (Vec<f32>, Vec<f32>) {
    let left = |x: usize| -> f32 {
        let t = (x as f64 + 0.5) / w as f64;
        if fraction > 0.0 && t < fraction {
            (1.0 - 0.5 * t / fraction) as f32
        } else {
            0.5
        }
    };
    let mut direct = vec![0.5f32; w];
    let mut flipped = vec![0.5f32; w];
    for x in 0..w / 2 {
        let wf = left(x);
        flipped[x] = wf;
        direct[x] = 1.0 - wf;
        flipped[w - 1 - x] = direct[x];
        direct[w - 1 - x] = wf;
    }
    (direct, flipped)
}

/// Blend a direct estimate with an un-flipped estimate of the mirrored
/// input, using [`flip_blend_weights`].
pub fn flip_fuse(tape: &mut Tape, direct: Var, flipped: Var, fraction: f64) -> Result<Var> {
    let s = tape.shape(direct);
    if tape.shape(flipped) != s {
        return shape_err("flip_fuse", format!("{s:?} vs {:?}", tape.shape(flipped)));
    }
    let (wd, wf) = flip_blend_weights(s.w(), fraction);
    let wd = tape.constant(Tensor::from_vec([1, 1, 1, s.w()], wd)?)?;
    let wf = tape.constant(Tensor::from_vec([1, 1, 1, s.w()], wf)?)?;
    let a = tape.mul(direct, wd)?;
    let b = tape.mul(flipped, wf)?;
    tape.add(a, b)
}

/// Run `net` on `image` and on its mirror within one tape and fuse each
/// returned map: `d1 = net(I)`, `d2 = hflip(net(hflip(I)))`.
pub fn flip_augment_forward<F>(
    tape: &mut Tape,
    image: Var,
    fraction: f64,
    mut net: F,
) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, Var) -> Result<Vec<Var>>,
{
    let direct = net(tape, image)?;
    let mirrored = tape.hflip(image)?;
    let flipped = net(tape, mirrored)?;
    if direct.len() != flipped.len() {
        return shape_err(
            "flip_augment_forward",
            "passes returned different map counts",
        );
    }
    direct
        .into_iter()
        .zip(flipped)
        .map(|(d1, d2)| {
            let d2 = tape.hflip(d2)?;
            flip_fuse(tape, d1, d2, fraction)
        })
        .collect()
}

/// Warp `source` into the target frame through `depth` (`N×1×H×W`, meters)
/// and relative pose `pose` (`N×6×1×1` or `1×6×1×1`, target-to-source).
/// Returns the synthesized image and its validity mask (`N×1×H×W`).
pub fn synthesize_view(
    tape: &mut Tape,
    source: Var,
    depth: Var,
    cam: &Pinhole,
    pose: Var,
) -> Result<(Var, Var)> {
    let (grid, mask) = tape.reproject(depth, pose, cam)?;
    let img = tape.grid_sample(source, grid)?;
    Ok((img, mask))
}

/// [`synthesize_view`] for the rig's stereo pair, taking a disparity map in
/// pixels at the rig's resolution.
pub fn synthesize_stereo(
    tape: &mut Tape,
    source: Var,
    disparity: Var,
    rig: &StereoRig,
) -> Result<(Var, Var)> {
    let depth = disparity_to_depth_var(tape, disparity, rig)?;
    let pose = tape.constant(rig.stereo_pose().to_tensor())?;
    synthesize_view(tape, source, depth, &rig.pinhole(), pose)
}

/// Level `k` is the input average-pooled 2×2 `k` times.
pub fn downsample_pyramid(tape: &mut Tape, image: Var, levels: usize) -> Result<Vec<Var>> {
    let s = tape.shape(image);
    let div = 1usize << levels.saturating_sub(1);
    if levels == 0 || !s.h().is_multiple_of(div) || !s.w().is_multiple_of(div) {
        return shape_err(
            "downsample_pyramid",
            format!("{s:?} is not divisible into {levels} levels"),
        );
    }
    let mut out = vec![image];
    for _ in 1..levels {
        let prev = *out.last().expect("non-empty");
        out.push(tape.avg_pool2d(prev, 2, 2)?);
    }
    Ok(out)
}

/// Non-differentiable [`downsample_pyramid`].
pub fn downsample_pyramid_tensor(image: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.constant(image.detach())?;
    let vars = downsample_pyramid(&mut tape, x, levels)?;
    Ok(vars.into_iter().map(|v| tape.value(v).detach()).collect())
}

//! Finite-difference verification of every differentiable op and loss.
//!
//! Each case builds a small graph from seeded inputs. The analytic gradient
//! of `sum(R * out)` for a fixed random `R` is compared per input coordinate
//! against a Richardson-extrapolated central difference accumulated in f64.
//!
//! Relative errors use the larger of the two gradients, floored at 1% of the
//! case's largest gradient and at the level f32 output rounding can resolve.
//! Coordinates whose extrapolations at steps `h` and `h/2` disagree, or
//! whose second differences show a slope jump, sit next to a kink (abs, relu,
//! bilinear cell edges, mask borders) and are skipped; a case fails if more
//! than [`MAX_SKIPPED_FRACTION`] of them are.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{disparity_to_depth_var, StereoRig};
use crate::layers::{flip_fuse, synthesize_view};
use crate::losses::{
    appearance_loss, masked_mean, occlusion_loss, smoothness_loss, ssim, total_depth_loss,
    LossWeights, SSIM_C1, SSIM_C2,
};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const MAX_SKIPPED_FRACTION: f64 = 0.2;

type InputFn = fn(&mut Xoshiro256PlusPlus) -> Vec<Tensor>;
type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
/// f64 forward over `(shape, values)` inputs.
pub type ReferenceFn = fn(&[([usize; 4], Vec<f64>)]) -> Vec<f64>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: InputFn,
    pub build: BuildFn,
    /// Finite-difference step.
    pub step: f64,
    /// Independent f64 forward used for the differences instead of the
    /// tape, for ops whose f32 forward cancels too much.
    pub reference: Option<ReferenceFn>,
}

impl GradCase {
    fn new(
        name: &'static str,
        step: f64,
        inputs: InputFn,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCase {
            name,
            inputs,
            build: Box::new(build),
            step,
            reference: None,
        }
    }

    fn with_reference(mut self, reference: ReferenceFn) -> Self {
        self.reference = Some(reference);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl CaseReport {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} max_rel_error={:.3e} checked={} skipped={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.checked,
            self.skipped
        )
    }
}

fn uniform(rng: &mut Xoshiro256PlusPlus, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Random sign, magnitude in `[lo, hi)`: keeps values clear of kinks at 0.
fn signed(rng: &mut Xoshiro256PlusPlus, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// Smooth ramp plus small noise, so neighbouring differences keep their sign.
fn ramp(rng: &mut Xoshiro256PlusPlus, shape: [usize; 4], base: f32, gx: f32, gy: f32) -> Tensor {
    let [n, c, h, w] = shape;
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                data.push(base + gx * x as f32 + gy * y as f32 + rng.random_range(-0.01..0.01));
            }
        }
    }
    Tensor::from_vec(shape, data).expect("sized")
}

/// Sampling grid with coordinates inside `src_w × src_h`.
fn grid(
    rng: &mut Xoshiro256PlusPlus,
    n: usize,
    h: usize,
    w: usize,
    src_h: usize,
    src_w: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for limit in [src_w, src_h] {
            for _ in 0..h * w {
                data.push(rng.random_range(0..limit - 1) as f32 + rng.random_range(0.2..0.8));
            }
        }
    }
    Tensor::from_vec([n, 2, h, w], data).expect("sized")
}

fn pose(rng: &mut Xoshiro256PlusPlus) -> Tensor {
    let mut t = uniform(rng, [1, 6, 1, 1], -0.05, 0.05);
    t.data_mut()[3] = rng.random_range(-0.4..-0.2);
    t
}

fn small_rig() -> StereoRig {
    StereoRig::for_resolution(4, 6, 1.0).expect("valid rig")
}

/// Per-pixel SSIM over reflection-padded 3×3 windows, in f64.
fn ssim_reference(inputs: &[([usize; 4], Vec<f64>)]) -> Vec<f64> {
    let ([n, c, h, w], a) = &inputs[0];
    let b = &inputs[1].1;
    let (c1, c2) = (SSIM_C1 as f64, SSIM_C2 as f64);
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * len - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Vec::with_capacity(a.len());
    for plane in 0..n * c {
        let at = |v: &[f64], y: usize, x: usize| v[plane * h * w + y * w + x];
        for y in 0..*h {
            for x in 0..*w {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = reflect(y as isize + dy, *h);
                        let xx = reflect(x as isize + dx, *w);
                        let (p, q) = (at(a, yy, xx), at(b, yy, xx));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / 9.0, sb / 9.0);
                let va = saa / 9.0 - ma * ma;
                let vb = sbb / 9.0 - mb * mb;
                let cov = sab / 9.0 - ma * mb;
                out.push(
                    (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                );
            }
        }
    }
    out
}

/// Every registered case.
pub fn registry() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "add",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, [1, 3, 1, 4], -1.0, 1.0),
                ]
            },
            |t, v| t.add(v[0], v[1]),
        ),
        GradCase::new(
            "sub",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, [2, 1, 4, 4], -1.0, 1.0),
                ]
            },
            |t, v| t.sub(v[0], v[1]),
        ),
        GradCase::new(
            "mul",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 3, 4, 4], -1.0, 1.0),
                    uniform(r, [1, 3, 1, 1], -1.0, 1.0),
                ]
            },
            |t, v| t.mul(v[0], v[1]),
        ),
        GradCase::new(
            "div",
            1e-2,
            |r| {
                vec![
                    uniform(r, [2, 3, 4, 4], -1.0, 1.0),
                    signed(r, [2, 3, 4, 4], 0.5, 2.0),
                ]
            },
            |t, v| t.div(v[0], v[1]),
        ),
        GradCase::new(
            "affine",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.affine(v[0], -1.7, 0.3),
        ),
        GradCase::new(
            "scale",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.scale(v[0], 2.5),
        ),
        GradCase::new(
            "add_scalar",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.add_scalar(v[0], 0.75),
        ),
        GradCase::new(
            "abs",
            1e-3,
            |r| vec![signed(r, [2, 3, 4, 4], 0.05, 1.0)],
            |t, v| t.abs(v[0]),
        ),
        GradCase::new(
            "exp",
            1e-2,
            |r| vec![uniform(r, [2, 3, 4, 4], -2.0, 2.0)],
            |t, v| t.exp(v[0]),
        ),
        GradCase::new(
            "log",
            1e-2,
            |r| vec![uniform(r, [2, 3, 4, 4], 0.3, 3.0)],
            |t, v| t.log(v[0]),
        ),
        GradCase::new(
            "relu",
            1e-3,
            |r| vec![signed(r, [2, 3, 4, 4], 0.05, 1.0)],
            |t, v| t.relu(v[0]),
        ),
        GradCase::new(
            "sigmoid",
            1e-2,
            |r| vec![uniform(r, [2, 3, 4, 4], -3.0, 3.0)],
            |t, v| t.sigmoid(v[0]),
        ),
        GradCase::new(
            "clamp_min",
            1e-3,
            |r| vec![signed(r, [2, 3, 4, 4], 0.05, 1.0)],
            |t, v| t.clamp_min(v[0], 0.0),
        ),
        GradCase::new(
            "sum_to",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.sum_to(v[0], [1, 3, 1, 4]),
        ),
        GradCase::new(
            "sum",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.sum(v[0]),
        ),
        GradCase::new(
            "mean",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.mean(v[0]),
        ),
        GradCase::new(
            "conv2d",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 3, 6, 6], -1.0, 1.0),
                    uniform(r, [4, 3, 3, 3], -0.5, 0.5),
                    uniform(r, [1, 4, 1, 1], -0.5, 0.5),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        GradCase::new(
            "conv2d_stride2",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 3, 6, 6], -1.0, 1.0),
                    uniform(r, [4, 3, 4, 4], -0.5, 0.5),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], None, 2, 1),
        ),
        GradCase::new(
            "pixel_shuffle",
            1e-1,
            |r| vec![uniform(r, [2, 4, 3, 3], -1.0, 1.0)],
            |t, v| t.pixel_shuffle(v[0], 2),
        ),
        GradCase::new(
            "upsample_nearest",
            1e-1,
            |r| vec![uniform(r, [2, 3, 3, 3], -1.0, 1.0)],
            |t, v| t.upsample_nearest(v[0], 2),
        ),
        GradCase::new(
            "avg_pool2d",
            1e-1,
            |r| vec![uniform(r, [2, 3, 6, 6], -1.0, 1.0)],
            |t, v| t.avg_pool2d(v[0], 3, 1),
        ),
        GradCase::new(
            "avg_pool2d_stride2",
            1e-1,
            |r| vec![uniform(r, [2, 3, 6, 6], -1.0, 1.0)],
            |t, v| t.avg_pool2d(v[0], 2, 2),
        ),
        GradCase::new(
            "reflect_pad",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| t.reflect_pad(v[0], 1),
        ),
        GradCase::new(
            "narrow",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 6], -1.0, 1.0)],
            |t, v| {
                let a = t.narrow(v[0], 3, 1, 4)?;
                t.narrow(a, 1, 1, 2)
            },
        ),
        GradCase::new(
            "concat",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 1, 4, 4], -1.0, 1.0),
                    uniform(r, [2, 3, 4, 4], -1.0, 1.0),
                ]
            },
            |t, v| t.concat(&[v[0], v[1]]),
        ),
        GradCase::new(
            "hflip",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 6], -1.0, 1.0)],
            |t, v| t.hflip(v[0]),
        ),
        GradCase::new(
            "grid_sample",
            1e-1,
            |r| vec![uniform(r, [2, 3, 5, 6], 0.0, 1.0), grid(r, 2, 4, 4, 5, 6)],
            |t, v| t.grid_sample(v[0], v[1]),
        ),
        GradCase::new(
            "upsample_bilinear",
            1e-1,
            |r| vec![uniform(r, [2, 3, 3, 3], -1.0, 1.0)],
            |t, v| t.upsample_bilinear(v[0], 2),
        ),
        GradCase::new(
            "reproject",
            1e-2,
            |r| vec![uniform(r, [2, 1, 4, 6], 3.0, 8.0), pose(r)],
            |t, v| Ok(t.reproject(v[0], v[1], &small_rig().pinhole())?.0),
        ),
        GradCase::new(
            "disparity_to_depth",
            1e-2,
            |r| vec![uniform(r, [2, 1, 4, 6], 0.5, 2.0)],
            |t, v| disparity_to_depth_var(t, v[0], &small_rig()),
        ),
        GradCase::new(
            "synthesize_view",
            1e-2,
            |r| {
                vec![
                    uniform(r, [1, 3, 4, 6], 0.0, 1.0),
                    uniform(r, [1, 1, 4, 6], 3.0, 8.0),
                    pose(r),
                ]
            },
            |t, v| Ok(synthesize_view(t, v[0], v[1], &small_rig().pinhole(), v[2])?.0),
        ),
        GradCase::new(
            "flip_fuse",
            1e-1,
            |r| {
                vec![
                    uniform(r, [2, 1, 4, 6], -1.0, 1.0),
                    uniform(r, [2, 1, 4, 6], -1.0, 1.0),
                ]
            },
            |t, v| flip_fuse(t, v[0], v[1], 0.2),
        ),
        GradCase::new(
            "ssim",
            1e-3,
            |r| {
                vec![
                    uniform(r, [1, 2, 6, 6], 0.0, 1.0),
                    uniform(r, [1, 2, 6, 6], 0.0, 1.0),
                ]
            },
            |t, v| ssim(t, v[0], v[1]),
        )
        .with_reference(ssim_reference),
        GradCase::new(
            "masked_mean",
            1e-1,
            |r| vec![uniform(r, [2, 3, 4, 4], -1.0, 1.0)],
            |t, v| {
                let m: Vec<f32> = (0..32).map(|i| (i % 3 != 0) as u8 as f32).collect();
                let m = t.constant(Tensor::from_vec([2, 1, 4, 4], m)?)?;
                masked_mean(t, v[0], Some(m))
            },
        ),
        GradCase::new(
            "appearance_loss",
            1e-2,
            |r| {
                let a = uniform(r, [1, 3, 6, 6], 0.2, 0.8);
                let offset = signed(r, [1, 3, 6, 6], 0.05, 0.2);
                let b = Tensor::from_vec(
                    [1, 3, 6, 6],
                    a.data()
                        .iter()
                        .zip(offset.data())
                        .map(|(x, o)| x + o)
                        .collect(),
                )
                .expect("sized");
                vec![a, b]
            },
            |t, v| appearance_loss(t, v[0], v[1], 0.85, None),
        ),
        GradCase::new(
            "smoothness_loss",
            5e-2,
            |r| {
                vec![
                    ramp(r, [2, 1, 4, 6], 1.0, 0.2, 0.15),
                    ramp(r, [2, 3, 4, 6], 0.1, 0.1, 0.12),
                ]
            },
            |t, v| smoothness_loss(t, v[0], v[1]),
        ),
        GradCase::new(
            "occlusion_loss",
            2e-2,
            |r| vec![uniform(r, [2, 1, 4, 6], 0.1, 1.0)],
            |t, v| occlusion_loss(t, v[0]),
        ),
        GradCase::new(
            "total_depth_loss",
            5e-3,
            |r| {
                vec![
                    ramp(r, [1, 1, 4, 6], 0.8, 0.1, 0.1),
                    ramp(r, [1, 1, 2, 3], 0.4, 0.05, 0.05),
                    uniform(r, [1, 3, 4, 6], 0.0, 1.0),
                    uniform(r, [1, 3, 4, 6], 0.0, 1.0),
                ]
            },
            |t, v| {
                total_depth_loss(
                    t,
                    &v[..2],
                    v[2],
                    v[3],
                    &small_rig(),
                    &LossWeights::default(),
                )
                .map(|r| r.0)
            },
        ),
    ]
}

/// A squaring op whose backward rule is 10% off; must fail the check.
pub fn negative_control() -> GradCase {
    GradCase::new(
        "perturbed_square",
        1e-3,
        |r| vec![uniform(r, [1, 2, 3, 3], -1.0, 1.0)],
        |t, v| {
            let x = t.value(v[0]).clone();
            let data = x.data().iter().map(|a| a * a).collect();
            let out = Tensor::from_vec(x.shape(), data)?;
            t.custom(
                "perturbed_square",
                &[v[0]],
                out,
                Box::new(|ins, _, g| {
                    vec![ins[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(a, g)| 2.2 * a * g)
                        .collect()]
                }),
            )
        },
    )
}

fn forward(case: &GradCase, inputs: &[Tensor]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().map(|&v| v as f64).collect())
}

fn weighted(weights: &[f32], a: &[f64], b: &[f64]) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&r, (&a, &b))| r as f64 * (a - b))
        .sum()
}

/// Check one case at `tolerance`.
pub fn check_case(case: &GradCase, seed: u64, tolerance: f64) -> Result<CaseReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let inputs = (case.inputs)(&mut rng);

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    let weights = uniform(&mut rng, tape.shape(out).0, -1.0, 1.0);
    let r = tape.constant(weights.clone())?;
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or(vec![0.0; t.numel()], |g| g.data().to_vec())
        })
        .collect();
    let w = weights.data();
    let as_f64: Vec<([usize; 4], Vec<f64>)> = inputs
        .iter()
        .map(|t| (t.shape().0, t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    let (base, eps) = match case.reference {
        Some(f) => (f(&as_f64), f64::EPSILON),
        None => (forward(case, &inputs)?, f32::EPSILON as f64),
    };
    // Outputs with coordinate `j` of input `k` moved by about `delta`, and
    // the displacement actually applied (f32 inputs round it).
    let moved = |k: usize, j: usize, delta: f64| -> Result<(Vec<f64>, f64)> {
        match case.reference {
            Some(f) => {
                let mut xs = as_f64.clone();
                xs[k].1[j] += delta;
                Ok((f(&xs), delta))
            }
            None => {
                let mut xs = inputs.to_vec();
                let x = inputs[k].data()[j];
                let v = (x as f64 + delta) as f32;
                xs[k].data_mut()[j] = v;
                Ok((forward(case, &xs)?, v as f64 - x as f64))
            }
        }
    };

    let h = case.step;
    let mut results = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let central = |delta: f64| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                let (p, dp) = moved(k, j, delta)?;
                let (m, dm) = moved(k, j, -delta)?;
                Ok((weighted(w, &p, &m) / (dp - dm), p, m))
            };
            let (d1, p1, m1) = central(h)?;
            let (d2, p2, m2) = central(h / 2.0)?;
            let (d4, _, _) = central(h / 4.0)?;
            let coarse = (4.0 * d2 - d1) / 3.0;
            let fine = (4.0 * d4 - d2) / 3.0;
            // Vanishes to O(h³) on smooth functions; a kink between the half
            // steps leaves its slope jump.
            let kink = (weighted(w, &p1, &base) + weighted(w, &m1, &base)
                - 4.0 * (weighted(w, &p2, &base) + weighted(w, &m2, &base)))
                / h;
            // Rounding of the outputs this coordinate moves.
            // When nothing moved the change fell below output resolution.
            let magnitude = |i: usize| (w[i] as f64 * base[i]).abs();
            let mut touched: f64 = (0..base.len())
                .filter(|&i| {
                    p1[i] != base[i] || m1[i] != base[i] || p2[i] != base[i] || m2[i] != base[i]
                })
                .map(magnitude)
                .sum();
            if touched == 0.0 {
                touched = (0..base.len()).map(magnitude).sum();
            }
            let noise = 16.0 * eps * touched / h;
            results.push((analytic[k][j] as f64, coarse, fine, kink, noise));
        }
    }
    // Errors are relative to the larger of the local and 1% of the largest gradient.
    let floor = 1e-2
        * results
            .iter()
            .map(|r| r.1.abs())
            .fold(0.0, f64::max)
            .max(1e-6);
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for &(a, coarse, fine, kink, noise) in &results {
        // Below `noise / tolerance` a gradient cannot be resolved to the tolerance.
        let floor = floor.max(noise / tolerance);
        let scale = coarse.abs().max(fine.abs()).max(floor);
        let limit = tolerance * scale;
        if (coarse - fine).abs() > limit || kink.abs() > limit {
            skipped += 1;
            continue;
        }
        checked += 1;
        max_rel_error =
            max_rel_error.max((a - coarse).abs() / a.abs().max(coarse.abs()).max(floor));
    }
    let total = checked + skipped;
    Ok(CaseReport {
        name: case.name,
        max_rel_error,
        checked,
        skipped,
        passed: max_rel_error < tolerance
            && (skipped as f64) <= MAX_SKIPPED_FRACTION * total as f64,
    })
}

/// Run every case (`scope == "all"`) or the named one.
pub fn run(scope: &str, seed: u64, tolerance: f64) -> Result<Vec<CaseReport>> {
    let cases: Vec<GradCase> = registry()
        .into_iter()
        .filter(|c| scope == "all" || c.name == scope)
        .collect();
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!("unknown op {scope:?}")));
    }
    cases
        .iter()
        .map(|c| check_case(c, seed, tolerance))
        .collect()
}

/// Names of the registered cases.
pub fn case_names() -> Vec<&'static str> {
    registry().iter().map(|c| c.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_is_caught() {
        let r = check_case(&negative_control(), 1, DEFAULT_TOLERANCE).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.05);
        assert!(r.to_line().starts_with("FAIL perturbed_square"));
    }

    #[test]
    fn names_are_unique_and_scope_filters() {
        let mut names = case_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(run("relu", 0, DEFAULT_TOLERANCE).unwrap().len(), 1);
        assert!(run("no_such_op", 0, DEFAULT_TOLERANCE).is_err());
    }
}

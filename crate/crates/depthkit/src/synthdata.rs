//! Synthetic stereo scenes and forward-motion sequences with exact ground truth.
//!
//! Scenes are fronto-parallel textured rectangles in front of a background
//! plane, ray cast through the same pinhole model used by
//! [`crate::geometry::reproject`]. Surfaces are tinted towards a haze colour
//! with distance (`h = 1 - exp(-z / haze_distance)`), which gives a single
//! image a usable depth cue.
//!
//! Randomness: every scene owns a SplitMix64 generator whose initial state is
//! `seed · 0x9E3779B97F4A7C15 + split_offset + index` (wrapping), with
//! `split_offset` 0 for the train split, `2^32` for the eval split and `2^33`
//! for sequences. Uniform floats use the 53-bit conversion of the `rand`
//! crate, so renders are identical across platforms.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::geometry::{depth_to_disparity, Se3Pose, StereoRig, Trajectory, DEFAULT_FOCAL_FRACTION};
use crate::tensor::Tensor;

const SURFACE_COLOR: [f64; 3] = [0.9, 0.55, 0.3];
const HAZE_COLOR: [f64; 3] = [0.45, 0.6, 0.85];
/// Texture wavelengths are drawn in pixels at this focal length and
/// converted to meters, so the same layout renders at any resolution.
const REFERENCE_FOCAL: f64 = DEFAULT_FOCAL_FRACTION * 128.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Checker,
    Waves,
}

/// Procedural texture on a surface, defined in world meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    /// Brightness multiplier in (0, 1].
    pub albedo: f64,
    pub wavelength: f64,
    pub angle: f64,
    pub phase: [f64; 2],
    /// Seed of the aperiodic value-noise layer; `None` leaves the pattern
    /// purely periodic.
    pub noise_seed: Option<u64>,
}

/// Lattice hash in [0, 1).
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated value noise in [0, 1] with lattice spacing 1.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let row = |j: i64| {
        let a = lattice(seed, ix, iy + j);
        let b = lattice(seed, ix + 1, iy + j);
        a + (b - a) * tx
    };
    let (r0, r1) = (row(0), row(1));
    r0 + (r1 - r0) * ty
}

impl Texture {
    fn random(rng: &mut SplitMix64, depth_hint: f64) -> Texture {
        let kind = match rng.random_range(0..3u32) {
            0 => TextureKind::Stripes,
            1 => TextureKind::Checker,
            _ => TextureKind::Waves,
        };
        let px = rng.random_range(8.0..16.0);
        Texture {
            kind,
            albedo: rng.random_range(0.55..1.0),
            wavelength: px * depth_hint / REFERENCE_FOCAL,
            angle: rng.random_range(0.0..PI),
            phase: [
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            ],
            noise_seed: Some(rng.random()),
        }
    }

    /// Pattern value in [0.35, 1] at surface coordinates `(x, y)`.
    pub fn pattern(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let a = x * c + y * s;
        let b = -x * s + y * c;
        let k = 2.0 * PI / self.wavelength;
        let [p0, p1] = self.phase;
        let v = match self.kind {
            TextureKind::Stripes => {
                0.5 + 0.25 * (k * a + p0).sin() + 0.25 * (1.7 * k * b + p1).sin()
            }
            TextureKind::Checker => {
                0.5 + 0.5 * (2.5 * (k * a + p0).sin() * (k * b + p1).sin()).tanh()
            }
            TextureKind::Waves => {
                let w = (k * a + p0).sin()
                    + (1.37 * k * b + p1).sin()
                    + (0.8 * k * (a + b) + p0 - p1).sin();
                0.5 + w / 6.0
            }
        };
        let v = match self.noise_seed {
            // Two octaves at non-integer multiples of the wavelength break
            // the periodicity that would give the photometric loss aliased
            // minima one wavelength apart.
            Some(seed) => {
                let u = 1.0 / self.wavelength;
                let n = 0.6 * value_noise(seed, 0.45 * u * x, 0.45 * u * y)
                    + 0.4 * value_noise(seed ^ 0x5555, 0.17 * u * x + 7.3, 0.17 * u * y - 3.1);
                0.5 * v + 0.5 * n
            }
            None => v,
        };
        0.35 + 0.65 * v
    }
}

/// Fronto-parallel rectangle `x0 ≤ X ≤ x1, y0 ≤ Y ≤ y1` on the plane `Z = z`
/// (world meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub z: f64,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub rects: Vec<Rect>,
    /// Infinite plane `Z = background_z`.
    pub background_z: f64,
    pub background: Texture,
}

impl Layout {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        for r in &self.rects {
            if !(finite(r.z) && r.x0 < r.x1 && r.y0 < r.y1 && r.texture.wavelength > 0.0) {
                return Err(Error::InvalidArgument(format!("invalid rectangle {r:?}")));
            }
        }
        if !(finite(self.background_z) && self.background.wavelength > 0.0) {
            return Err(Error::InvalidArgument("invalid background plane".into()));
        }
        Ok(())
    }
}

/// Rendering parameters shared by scenes and sequences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shading {
    pub haze_distance: f64,
    /// Rays per pixel along each axis for the colour image.
    pub supersample: usize,
}

fn shade(tex: &Texture, x: f64, y: f64, z: f64, shading: &Shading) -> [f64; 3] {
    let h = 1.0 - (-z / shading.haze_distance).exp();
    let p = tex.albedo * tex.pattern(x, y);
    std::array::from_fn(|c| (1.0 - h) * p * SURFACE_COLOR[c] + h * HAZE_COLOR[c])
}

/// Nearest surface along a ray: (camera depth, world point, texture).
fn cast(layout: &Layout, origin: &[f64; 3], dir: &[f64; 3]) -> Option<(f64, [f64; 3], Texture)> {
    if dir[2] <= 0.0 {
        return None;
    }
    let mut best: Option<(f64, [f64; 3], Texture)> = None;
    let mut consider = |z: f64, tex: Texture, bounds: Option<(f64, f64, f64, f64)>| {
        let t = (z - origin[2]) / dir[2];
        if t <= 0.0 || best.is_some_and(|b| b.0 <= t) {
            return;
        }
        let x = origin[0] + t * dir[0];
        let y = origin[1] + t * dir[1];
        if let Some((x0, x1, y0, y1)) = bounds {
            if !(x0..=x1).contains(&x) || !(y0..=y1).contains(&y) {
                return;
            }
        }
        best = Some((t, [x, y, z], tex));
    };
    for r in &layout.rects {
        consider(r.z, r.texture, Some((r.x0, r.x1, r.y0, r.y1)));
    }
    consider(layout.background_z, layout.background, None);
    best
}

/// Render one camera (`world_from_camera`) as a `1×3×H×W` image and the
/// `1×1×H×W` depth along the optical axis at pixel centres.
pub fn render_view(
    layout: &Layout,
    rig: &StereoRig,
    world_from_camera: &Se3Pose,
    shading: &Shading,
) -> Result<(Tensor, Tensor)> {
    layout.validate()?;
    let (h, w) = (rig.height, rig.width);
    let r = world_from_camera.rotation();
    let o = world_from_camera.trans;
    let ray = |u: f64, v: f64| {
        // Camera-frame direction has unit z, so the hit parameter is the depth.
        let d = [(u - rig.cx) / rig.focal, (v - rig.cy) / rig.focal, 1.0];
        std::array::from_fn::<f64, 3, _>(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    };
    let ss = shading.supersample.max(1);
    let offsets: Vec<f64> = (0..ss)
        .map(|i| (i as f64 + 0.5) / ss as f64 - 0.5)
        .collect();
    let plane = h * w;
    let mut img = vec![0f32; 3 * plane];
    let mut depth = vec![0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (z, _, _) = cast(layout, &o, &ray(x as f64, y as f64)).ok_or_else(|| {
                Error::InvalidArgument(format!("pixel ({x}, {y}) sees no surface"))
            })?;
            depth[i] = z as f32;
            let mut acc = [0.0; 3];
            for &dy in &offsets {
                for &dx in &offsets {
                    if let Some((t, p, tex)) = cast(layout, &o, &ray(x as f64 + dx, y as f64 + dy))
                    {
                        let c = shade(&tex, p[0], p[1], t, shading);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
            }
            for k in 0..3 {
                img[k * plane + i] = (acc[k] / (ss * ss) as f64) as f32;
            }
        }
    }
    Ok((
        Tensor::from_vec([1, 3, h, w], img)?,
        Tensor::from_vec([1, 1, h, w], depth)?,
    ))
}

/// Parameters of the scene family shared by every split.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub baseline: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub rects_min: usize,
    pub rects_max: usize,
    pub haze_distance: f64,
    pub supersample: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub frames: usize,
    /// Meters per frame.
    pub speed: f64,
    pub yaw_amplitude_deg: f64,
    /// Frames per yaw oscillation.
    pub yaw_period: f64,
    /// Haze distance for sequences; larger than for scenes so appearance
    /// changes little as the camera approaches a surface.
    pub sequence_haze_distance: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            seed: 0,
            height: 64,
            width: 128,
            baseline: 1.0,
            z_min: 5.0,
            z_max: 20.0,
            rects_min: 2,
            rects_max: 4,
            haze_distance: 25.0,
            supersample: 2,
            train_scenes: 200,
            eval_scenes: 50,
            frames: 200,
            speed: 1.0,
            yaw_amplitude_deg: 3.0,
            yaw_period: 60.0,
            sequence_haze_distance: 150.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1 << 32,
        }
    }

    fn len(self, spec: &DataSpec) -> usize {
        match self {
            Split::Train => spec.train_scenes,
            Split::Eval => spec.eval_scenes,
        }
    }
}

const SEQUENCE_OFFSET: u64 = 1 << 33;

fn stream_rng(seed: u64, offset: u64, index: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(offset)
            .wrapping_add(index),
    )
}

const KEYS: &[&str] = &[
    "seed",
    "height",
    "width",
    "baseline",
    "z_min",
    "z_max",
    "rects_min",
    "rects_max",
    "haze_distance",
    "supersample",
    "train_scenes",
    "eval_scenes",
    "frames",
    "speed",
    "yaw_amplitude_deg",
    "yaw_period",
    "sequence_haze_distance",
];

/// Parse `key=value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected key=value, got {raw:?}", n + 1))
        })?;
        if out
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::Parse(format!(
                "line {}: duplicate key {:?}",
                n + 1,
                k.trim()
            )));
        }
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Parse(format!("invalid value {v:?} for {key}"))),
    }
}

impl DataSpec {
    /// The 128×256 preset: same scenes at twice the resolution.
    pub fn high_res() -> Self {
        DataSpec {
            height: 128,
            width: 256,
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Parse(format!("unknown key {k:?}")));
        }
        let d = DataSpec::default();
        let spec = DataSpec {
            seed: field(&map, "seed", d.seed)?,
            height: field(&map, "height", d.height)?,
            width: field(&map, "width", d.width)?,
            baseline: field(&map, "baseline", d.baseline)?,
            z_min: field(&map, "z_min", d.z_min)?,
            z_max: field(&map, "z_max", d.z_max)?,
            rects_min: field(&map, "rects_min", d.rects_min)?,
            rects_max: field(&map, "rects_max", d.rects_max)?,
            haze_distance: field(&map, "haze_distance", d.haze_distance)?,
            supersample: field(&map, "supersample", d.supersample)?,
            train_scenes: field(&map, "train_scenes", d.train_scenes)?,
            eval_scenes: field(&map, "eval_scenes", d.eval_scenes)?,
            frames: field(&map, "frames", d.frames)?,
            speed: field(&map, "speed", d.speed)?,
            yaw_amplitude_deg: field(&map, "yaw_amplitude_deg", d.yaw_amplitude_deg)?,
            yaw_period: field(&map, "yaw_period", d.yaw_period)?,
            sequence_haze_distance: field(
                &map,
                "sequence_haze_distance",
                d.sequence_haze_distance,
            )?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nheight={}\nwidth={}\nbaseline={}\nz_min={}\nz_max={}\nrects_min={}\n\
             rects_max={}\nhaze_distance={}\nsupersample={}\ntrain_scenes={}\neval_scenes={}\n\
             frames={}\nspeed={}\nyaw_amplitude_deg={}\nyaw_period={}\nsequence_haze_distance={}\n",
            self.seed,
            self.height,
            self.width,
            self.baseline,
            self.z_min,
            self.z_max,
            self.rects_min,
            self.rects_max,
            self.haze_distance,
            self.supersample,
            self.train_scenes,
            self.eval_scenes,
            self.frames,
            self.speed,
            self.yaw_amplitude_deg,
            self.yaw_period,
            self.sequence_haze_distance
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("{m}: {self:?}")));
        if !(self.z_min > 0.0 && self.z_min + 2.0 <= self.z_max) {
            return bad("need 0 < z_min and z_min + 2 <= z_max");
        }
        if self.rects_min > self.rects_max {
            return bad("rects_min exceeds rects_max");
        }
        if !(self.haze_distance > 0.0
            && self.sequence_haze_distance > 0.0
            && self.baseline > 0.0
            && self.speed >= 0.0)
        {
            return bad("haze_distance and baseline must be positive, speed non-negative");
        }
        if !(self.yaw_amplitude_deg.abs() < 30.0 && self.yaw_period > 0.0) {
            return bad("yaw amplitude must be below 30 degrees with a positive period");
        }
        if self.supersample == 0 {
            return bad("supersample must be at least 1");
        }
        self.rig()?;
        Ok(())
    }

    pub fn rig(&self) -> Result<StereoRig> {
        StereoRig::for_resolution(self.height, self.width, self.baseline)
    }

    pub fn shading(&self) -> Shading {
        Shading {
            haze_distance: self.haze_distance,
            supersample: self.supersample,
        }
    }

    /// Largest disparity any scene of this family can show, in pixels.
    pub fn max_disparity(&self) -> Result<f64> {
        Ok(self.rig()?.focal_baseline() / self.z_min)
    }

    pub fn split_len(&self, split: Split) -> usize {
        split.len(self)
    }

    /// Layout of scene `index` of `split`; independent of resolution.
    pub fn layout(&self, split: Split, index: usize) -> Result<Layout> {
        if index >= split.len(self) {
            return Err(Error::InvalidArgument(format!(
                "scene {index} out of range for {split:?} split of {}",
                split.len(self)
            )));
        }
        let mut rng = stream_rng(self.seed, split.offset(), index as u64);
        let background_z =
            rng.random_range(self.z_max - 4.0f64.min(self.z_max - self.z_min - 2.0)..=self.z_max);
        let background = Texture::random(&mut rng, background_z);
        let n = rng.random_range(self.rects_min..=self.rects_max);
        // Normalized image extents for the default focal fraction.
        let half_x = 0.5 / DEFAULT_FOCAL_FRACTION;
        let half_y = half_x * self.height as f64 / self.width as f64;
        // Foreground stays well in front of the background so no single
        // constant disparity explains the whole image.
        let far = (0.75 * background_z)
            .min(background_z - 1.0)
            .max(self.z_min + 0.5);
        let rects = (0..n)
            .map(|_| {
                let z = rng.random_range(self.z_min..far);
                let cx = rng.random_range(-half_x..half_x);
                let cy = rng.random_range(-half_y..half_y);
                let hw = rng.random_range(0.15..0.45) * half_x;
                let hh = rng.random_range(0.25..0.7) * half_y;
                Rect {
                    z,
                    x0: (cx - hw) * z,
                    x1: (cx + hw) * z,
                    y0: (cy - hh) * z,
                    y1: (cy + hh) * z,
                    texture: Texture::random(&mut rng, z),
                }
            })
            .collect();
        Ok(Layout {
            rects,
            background_z,
            background,
        })
    }

    pub fn scene(&self, split: Split, index: usize) -> Result<SceneSpec> {
        Ok(SceneSpec {
            rig: self.rig()?,
            shading: self.shading(),
            layout: self.layout(split, index)?,
        })
    }

    /// Render every scene of a split in index order.
    pub fn render_split(&self, split: Split) -> Result<Vec<StereoSample>> {
        (0..split.len(self))
            .map(|i| render_stereo(&self.scene(split, i)?))
            .collect()
    }

    pub fn sequence(&self) -> Result<SequenceSpec> {
        let mut rng = stream_rng(self.seed, SEQUENCE_OFFSET, 0);
        let length = self.speed * self.frames as f64;
        let end_z = length + 60.0;
        let background = Texture::random(&mut rng, end_z);
        let mut rects = Vec::new();
        let mut z = 3.0;
        while z < end_z - 5.0 {
            for side in [-1.0, 1.0] {
                let inner = rng.random_range(4.0..6.0);
                let outer = inner + rng.random_range(1.0..3.0);
                let (x0, x1) = if side < 0.0 {
                    (-outer, -inner)
                } else {
                    (inner, outer)
                };
                rects.push(Rect {
                    z: z + rng.random_range(0.0..1.5),
                    x0,
                    x1,
                    y0: rng.random_range(-4.0..-1.5),
                    y1: rng.random_range(1.0..2.5),
                    texture: Texture::random(&mut rng, 30.0),
                });
            }
            z += rng.random_range(5.0..9.0);
        }
        let amp = self.yaw_amplitude_deg.to_radians();
        let mut poses = Vec::with_capacity(self.frames);
        let mut pos = [0.0; 3];
        for t in 0..self.frames {
            let yaw = amp * (2.0 * PI * t as f64 / self.yaw_period).sin();
            poses.push(Se3Pose::new([0.0, yaw / 2.0, 0.0], pos));
            pos[0] += self.speed * yaw.sin();
            pos[2] += self.speed * yaw.cos();
        }
        Ok(SequenceSpec {
            rig: self.rig()?,
            shading: Shading {
                haze_distance: self.sequence_haze_distance,
                supersample: self.supersample,
            },
            layout: Layout {
                rects,
                background_z: end_z,
                background,
            },
            poses,
        })
    }
}

/// A single stereo scene: rig, shading and layout in left-camera coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub rig: StereoRig,
    pub shading: Shading,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    /// Left-view disparity in pixels.
    pub disparity: Tensor,
    /// Left-view depth in meters.
    pub depth: Tensor,
}

/// Render the left camera at the origin and the right camera at `(B, 0, 0)`.
pub fn render_stereo(spec: &SceneSpec) -> Result<StereoSample> {
    check_depths(spec)?;
    let (left, depth) = render_view(&spec.layout, &spec.rig, &Se3Pose::IDENTITY, &spec.shading)?;
    let right_pose = Se3Pose::from_translation([spec.rig.baseline, 0.0, 0.0]);
    let (right, _) = render_view(&spec.layout, &spec.rig, &right_pose, &spec.shading)?;
    let disparity = depth_to_disparity(&depth, &spec.rig)?;
    Ok(StereoSample {
        left,
        right,
        disparity,
        depth,
    })
}

fn check_depths(spec: &SceneSpec) -> Result<()> {
    let nearest = spec
        .layout
        .rects
        .iter()
        .map(|r| r.z)
        .fold(spec.layout.background_z, f64::min);
    if !(nearest > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "surface at non-positive depth {nearest}"
        )));
    }
    Ok(())
}

/// Camera path through a fixed layout; `poses[t]` is world-from-camera of
/// the left camera at frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub rig: StereoRig,
    pub shading: Shading,
    pub layout: Layout,
    pub poses: Vec<Se3Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    /// Right-camera frames for stereo supervision.
    pub right: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    pub poses: Trajectory,
}

impl Sequence {
    /// Transform mapping points of frame `from` into frame `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> Se3Pose {
        let p = self.poses.entries();
        p[to].1.inverse().compose(&p[from].1)
    }
}

pub fn render_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    let mut seq = Sequence {
        frames: Vec::with_capacity(spec.poses.len()),
        right: Vec::with_capacity(spec.poses.len()),
        depths: Vec::with_capacity(spec.poses.len()),
        poses: Trajectory::from_poses(spec.poses.clone()),
    };
    let offset = Se3Pose::from_translation([spec.rig.baseline, 0.0, 0.0]);
    for (t, pose) in spec.poses.iter().enumerate() {
        if pose.trans[2] > spec.layout.background_z - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "frame {t} leaves the scene (camera z {:.1})",
                pose.trans[2]
            )));
        }
        let (img, depth) = render_view(&spec.layout, &spec.rig, pose, &spec.shading)?;
        let (right, _) = render_view(
            &spec.layout,
            &spec.rig,
            &pose.compose(&offset),
            &spec.shading,
        )?;
        seq.frames.push(img);
        seq.right.push(right);
        seq.depths.push(depth);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reproject;

    fn small() -> DataSpec {
        DataSpec {
            train_scenes: 4,
            eval_scenes: 2,
            frames: 6,
            ..Default::default()
        }
    }

    #[test]
    fn plane_has_constant_disparity() {
        let spec = small();
        let rig = spec.rig().unwrap();
        let layout = Layout {
            rects: vec![],
            background_z: 8.0,
            background: Texture {
                kind: TextureKind::Checker,
                albedo: 1.0,
                wavelength: 0.5,
                angle: 0.3,
                phase: [0.0, 1.0],
                noise_seed: None,
            },
        };
        let scene = SceneSpec {
            rig,
            shading: spec.shading(),
            layout,
        };
        let s = render_stereo(&scene).unwrap();
        let want = (rig.focal_baseline() / 8.0) as f32;
        assert!(s.disparity.data().iter().all(|&d| (d - want).abs() < 1e-5));
        assert!(s.depth.data().iter().all(|&z| z == 8.0));
    }

    #[test]
    fn nearer_rectangle_occludes() {
        let spec = small();
        let tex = Texture::random(&mut stream_rng(0, 0, 0), 5.0);
        let layout = Layout {
            rects: vec![
                Rect {
                    z: 10.0,
                    x0: -5.0,
                    x1: 5.0,
                    y0: -5.0,
                    y1: 5.0,
                    texture: tex,
                },
                Rect {
                    z: 5.0,
                    x0: -0.5,
                    x1: 0.5,
                    y0: -0.5,
                    y1: 0.5,
                    texture: tex,
                },
            ],
            background_z: 18.0,
            background: tex,
        };
        let rig = spec.rig().unwrap();
        let (_, depth) = render_view(&layout, &rig, &Se3Pose::IDENTITY, &spec.shading()).unwrap();
        assert_eq!(depth.at(0, 0, 32, 64), 5.0);
        assert_eq!(depth.at(0, 0, 32, 100), 10.0);
    }

    #[test]
    fn same_seed_same_render_and_splits_differ() {
        let spec = small();
        let a = render_stereo(&spec.scene(Split::Train, 1).unwrap()).unwrap();
        let b = render_stereo(&spec.scene(Split::Train, 1).unwrap()).unwrap();
        assert_eq!(a, b);
        let e = spec.layout(Split::Eval, 1).unwrap();
        assert_ne!(spec.layout(Split::Train, 1).unwrap(), e);
        assert!(spec.layout(Split::Eval, 2).is_err());
    }

    #[test]
    fn disparity_within_family_bound() {
        let spec = small();
        let bound = spec.max_disparity().unwrap() as f32;
        assert!(bound < 0.3 * spec.width as f32);
        for s in spec.render_split(Split::Train).unwrap() {
            assert!(s
                .disparity
                .data()
                .iter()
                .all(|&d| d > 0.0 && d <= bound + 1e-4));
            assert!(s.left.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn reproject_matches_rendered_disparity() {
        let spec = small();
        let scene = spec.scene(Split::Train, 0).unwrap();
        let s = render_stereo(&scene).unwrap();
        let (grid, _) =
            reproject(&s.depth, &scene.rig.stereo_pose(), &scene.rig.pinhole()).unwrap();
        let [_, _, h, w] = s.depth.shape().0;
        let mut worst = 0f64;
        for y in 0..h {
            for x in 0..w {
                let u = grid.at(0, 0, y, x) as f64;
                let want = x as f64 - s.disparity.at(0, 0, y, x) as f64;
                worst = worst.max((u - want).abs());
            }
        }
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn spec_text_round_trip_and_errors() {
        let spec = DataSpec {
            seed: 9,
            speed: 0.5,
            ..Default::default()
        };
        assert_eq!(DataSpec::parse(&spec.to_text()).unwrap(), spec);
        let parsed =
            DataSpec::parse("# comment\nseed = 3\n\nwidth=256 # trailing\nheight=128\n").unwrap();
        assert_eq!((parsed.seed, parsed.height, parsed.width), (3, 128, 256));
        assert!(DataSpec::parse("colour=red").is_err());
        assert!(DataSpec::parse("seed").is_err());
        assert!(DataSpec::parse("seed=1\nseed=2").is_err());
        assert!(DataSpec::parse("z_min=10\nz_max=5").is_err());
    }

    #[test]
    fn zero_motion_sequence_repeats_frames() {
        let spec = DataSpec {
            speed: 0.0,
            yaw_amplitude_deg: 0.0,
            frames: 3,
            ..Default::default()
        };
        let seq = render_sequence(&spec.sequence().unwrap()).unwrap();
        assert_eq!(seq.frames[0], seq.frames[2]);
        assert_eq!(seq.relative_pose(0, 2), Se3Pose::IDENTITY);
    }

    #[test]
    fn sequence_moves_forward() {
        let seq = render_sequence(&small().sequence().unwrap()).unwrap();
        assert_eq!(seq.frames.len(), 6);
        let rel = seq.relative_pose(0, 1);
        // Points move towards a forward-moving camera.
        assert!(rel.trans[2] < -0.9 && rel.trans[2] > -1.01);
        assert_ne!(seq.frames[0], seq.frames[1]);
    }
}

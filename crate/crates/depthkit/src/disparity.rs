//! Encoder-decoder disparity network with one disparity head per pyramid level.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{flip_augment_forward, SubpixelBranch};
use crate::params::{init_rng, Bound, Conv, ParamStore};
use crate::tensor::Tensor;

/// Pre-sigmoid bias of every disparity head at initialization. Heads start
/// at sigmoid(-1.5) ≈ 0.18 of the maximum, about 5% of the width at the
/// default fraction. Starting at half the maximum puts most pixels on the
/// flat part of the photometric loss, far beyond typical disparities.
pub const HEAD_BIAS_INIT: f32 = -1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityNetConfig {
    pub encoder_widths: Vec<usize>,
    pub levels: usize,
    /// Sub-pixel heads when true, nearest-upsample + conv heads otherwise.
    pub subpixel: bool,
    /// Head output is `sigmoid · fraction · level_width` pixels.
    pub max_disparity_fraction: f32,
    pub height: usize,
    pub width: usize,
}

impl Default for DisparityNetConfig {
    fn default() -> Self {
        DisparityNetConfig {
            encoder_widths: vec![16, 32, 64, 128],
            levels: 4,
            subpixel: true,
            max_disparity_fraction: 0.3,
            height: 64,
            width: 128,
        }
    }
}

impl DisparityNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.encoder_widths.len() < self.levels {
            return Err(Error::InvalidArgument(format!(
                "{} encoder stages cannot feed {} pyramid levels",
                self.encoder_widths.len(),
                self.levels
            )));
        }
        if !(self.max_disparity_fraction > 0.0) {
            return Err(Error::InvalidArgument(
                "max disparity fraction must be positive".into(),
            ));
        }
        check_size(self.height, self.width, self.encoder_widths.len())
    }
}

fn check_size(h: usize, w: usize, stages: usize) -> Result<()> {
    let div = 1usize << stages;
    if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return shape_err(
            "disparity_forward",
            format!("input {h}x{w} must be divisible by {div}"),
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Subpixel(SubpixelBranch),
    /// Nearest ×2 upsample then a 3×3 conv to one channel and a sigmoid.
    Resize(Conv),
}

/// Disparity maps at scales 1, 1/2, 1/4, ... of the input, in pixels of
/// their own level.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityPyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityNet {
    config: DisparityNetConfig,
    params: ParamStore,
    encoder: Vec<(Conv, Conv)>,
    decoder: Vec<(Conv, Conv)>,
    heads: Vec<Head>,
}

impl DisparityNet {
    /// He-normal weights drawn from `seed`; biases are zero except the
    /// disparity heads' ([`HEAD_BIAS_INIT`]).
    pub fn new(config: DisparityNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let widths = &config.encoder_widths;

        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let down = Conv::new(
                &mut store,
                &mut rng,
                &format!("enc{i}.down"),
                cin,
                w,
                4,
                2,
                1,
            )?;
            let refine = Conv::same(&mut store, &mut rng, &format!("enc{i}.conv"), w, w, 3)?;
            encoder.push((down, refine));
            cin = w;
        }

        // decoder[i] upsamples from stage i+1 to stage i's resolution.
        let mut decoder = Vec::new();
        for i in 0..widths.len() - 1 {
            let up = Conv::same(
                &mut store,
                &mut rng,
                &format!("dec{i}.up"),
                widths[i + 1],
                widths[i],
                3,
            )?;
            let fuse = Conv::same(
                &mut store,
                &mut rng,
                &format!("dec{i}.fuse"),
                2 * widths[i],
                widths[i],
                3,
            )?;
            decoder.push((up, fuse));
        }

        let mut heads = Vec::new();
        for k in 0..config.levels {
            let name = format!("head{k}");
            heads.push(if config.subpixel {
                Head::Subpixel(SubpixelBranch::new(
                    &mut store, &mut rng, &name, widths[k], 2,
                )?)
            } else {
                Head::Resize(Conv::same(&mut store, &mut rng, &name, widths[k], 1, 3)?)
            });
        }
        for k in 0..config.levels {
            let name = if config.subpixel {
                format!("head{k}.proj.bias")
            } else {
                format!("head{k}.bias")
            };
            let id = store.find(&name).expect("head bias registered");
            store.get_mut(id).data_mut().fill(HEAD_BIAS_INIT);
        }
        Ok(DisparityNet {
            config,
            params: store,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &DisparityNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn head(&self, tape: &mut Tape, p: &Bound, k: usize, features: Var) -> Result<Var> {
        let unit = match &self.heads[k] {
            Head::Subpixel(b) => b.apply(tape, p, features)?,
            Head::Resize(conv) => {
                let up = tape.upsample_nearest(features, 2)?;
                let y = conv.apply(tape, p, up)?;
                tape.sigmoid(y)?
            }
        };
        let w = tape.shape(unit).w();
        tape.scale(unit, self.config.max_disparity_fraction * w as f32)
    }

    /// Disparity pyramid for `image` (`N×3×H×W`), level `k` of size
    /// `H/2^k × W/2^k`. Any input size divisible by `2^stages` works.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let s = tape.shape(image);
        if s.c() != 3 {
            return shape_err(
                "disparity_forward",
                format!("expected 3 channels, got {s:?}"),
            );
        }
        check_size(s.h(), s.w(), self.encoder.len())?;

        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for (down, refine) in &self.encoder {
            x = down.apply_relu(tape, p, x)?;
            x = refine.apply_relu(tape, p, x)?;
            feats.push(x);
        }

        let mut out = vec![None; self.config.levels];
        let top = feats.len() - 1;
        if top < self.config.levels {
            out[top] = Some(self.head(tape, p, top, x)?);
        }
        for i in (0..top).rev() {
            let (up, fuse) = &self.decoder[i];
            let u = tape.upsample_nearest(x, 2)?;
            let u = up.apply_relu(tape, p, u)?;
            let cat = tape.concat(&[u, feats[i]])?;
            x = fuse.apply_relu(tape, p, cat)?;
            if i < self.config.levels {
                out[i] = Some(self.head(tape, p, i, x)?);
            }
        }
        Ok(out
            .into_iter()
            .map(|v| v.expect("every level has a head"))
            .collect())
    }

    /// Forward with differentiable flip fusion of every level.
    pub fn forward_flip(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: Var,
        ramp_fraction: f64,
    ) -> Result<Vec<Var>> {
        flip_augment_forward(tape, image, ramp_fraction, |t, x| self.forward(t, p, x))
    }

    /// Inference without gradients.
    pub fn predict(&self, image: &Tensor, flip: Option<f64>) -> Result<DisparityPyramid> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let x = tape.constant(image.detach())?;
        let vars = match flip {
            Some(frac) => self.forward_flip(&mut tape, &p, x, frac)?,
            None => self.forward(&mut tape, &p, x)?,
        };
        Ok(DisparityPyramid {
            levels: vars.into_iter().map(|v| tape.value(v).detach()).collect(),
        })
    }
}

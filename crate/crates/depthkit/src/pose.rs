//! Pose regression from a target frame and its context frames.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::Se3Pose;
use crate::params::{init_rng, Bound, Conv, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNetConfig {
    /// Frames per sample including the target.
    pub context_size: usize,
    pub widths: Vec<usize>,
    /// Multiplier on the rotation outputs.
    pub rotation_scale: f32,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            context_size: 3,
            widths: vec![16, 32, 64, 128, 128],
            rotation_scale: 0.01,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_size < 2 || self.widths.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "pose net needs context_size >= 2 and at least one conv, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        6 * (self.context_size - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    config: PoseNetConfig,
    params: ParamStore,
    convs: Vec<Conv>,
    head: Conv,
}

impl PoseNet {
    pub fn new(config: PoseNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let mut cin = 3 * config.context_size;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv::new(
                &mut store,
                &mut rng,
                &format!("pose.conv{i}"),
                cin,
                w,
                4,
                2,
                1,
            )?);
            cin = w;
        }
        let head = Conv::new(
            &mut store,
            &mut rng,
            "pose.head",
            cin,
            config.outputs(),
            1,
            1,
            0,
        )?;
        Ok(PoseNet {
            config,
            params: store,
            convs,
            head,
        })
    }

    pub fn config(&self) -> &PoseNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Set the final layer to zero so every prediction is the identity.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// One `N×6×1×1` pose `(rot_log, trans)` per context, each mapping
    /// target-frame points into that context frame.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        target: Var,
        contexts: &[Var],
    ) -> Result<Vec<Var>> {
        if contexts.len() != self.config.context_size - 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} context frames, got {}",
                self.config.context_size - 1,
                contexts.len()
            )));
        }
        let s = tape.shape(target);
        for &c in contexts {
            if tape.shape(c) != s || s.c() != 3 {
                return shape_err("pose_forward", format!("{:?} vs {s:?}", tape.shape(c)));
            }
        }
        let mut inputs = vec![target];
        inputs.extend_from_slice(contexts);
        let mut x = tape.concat(&inputs)?;
        for conv in &self.convs {
            x = conv.apply_relu(tape, p, x)?;
        }
        let [n, c, h, w] = tape.shape(x).0;
        let pooled = tape.sum_to(x, [n, c, 1, 1])?;
        let pooled = tape.scale(pooled, 1.0 / (h * w) as f32)?;
        let raw = self.head.apply(tape, p, pooled)?;

        let k = self.config.outputs();
        let scales: Vec<f32> = (0..k)
            .map(|i| {
                if i % 6 < 3 {
                    self.config.rotation_scale
                } else {
                    1.0
                }
            })
            .collect();
        let scales = tape.constant(Tensor::from_vec([1, k, 1, 1], scales)?)?;
        let out = tape.mul(raw, scales)?;
        (0..contexts.len())
            .map(|i| tape.narrow(out, 1, 6 * i, 6))
            .collect()
    }

    /// Poses for batch item 0 without gradients.
    pub fn predict(&self, target: &Tensor, contexts: &[Tensor]) -> Result<Vec<Se3Pose>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let t = tape.constant(target.detach())?;
        let cs = contexts
            .iter()
            .map(|c| tape.constant(c.detach()))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut tape, &p, t, &cs)?;
        out.into_iter()
            .map(|v| Se3Pose::from_tensor(tape.value(v), 0))
            .collect()
    }
}

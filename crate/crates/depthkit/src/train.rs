//! Training loops for the stereo, flip fine-tuning and joint pose phases.
//!
//! Everything is single-threaded and seeded, so a run is a pure function of
//! its configuration: the batch for iteration `i` depends only on
//! `(seed, i)`, and a run resumed from a checkpoint continues bit-identically.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{fnv1a, tensor_hash, Checkpoint};
use crate::disparity::{DisparityNet, DisparityNetConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_depth, evaluate_trajectory, predict_trajectory};
use crate::geometry::{disparity_to_depth_var, Se3Pose, StereoRig, Trajectory};
use crate::layers::synthesize_view;
use crate::losses::{pose_photometric_loss, total_depth_loss, LossWeights};
use crate::metrics::DEFAULT_DRIFT_LENGTHS;
use crate::optim::Adam;
use crate::pose::{PoseNet, PoseNetConfig};
use crate::synthdata::{
    parse_key_values, render_sequence, DataSpec, Sequence, Split, StereoSample,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Stereo self-supervision on the scene split.
    Base,
    /// Continue from a base checkpoint with flip fusion on the first pyramid levels.
    FlipFinetune,
    /// Disparity and pose networks trained together on the sequence.
    Pose,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::FlipFinetune => "flip-finetune",
            Phase::Pose => "pose",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "base" => Ok(Phase::Base),
            "flip-finetune" | "finetune" => Ok(Phase::FlipFinetune),
            "pose" => Ok(Phase::Pose),
            _ => Err(Error::Parse(format!(
                "unknown phase {s:?} (base, flip-finetune, pose)"
            ))),
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::Base => 0,
            Phase::FlipFinetune => 1,
            Phase::Pose => 2,
        }
    }

    fn from_code(c: u64) -> Result<Phase> {
        match c {
            0 => Ok(Phase::Base),
            1 => Ok(Phase::FlipFinetune),
            2 => Ok(Phase::Pose),
            _ => Err(Error::Format(format!("unknown phase code {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub seed: u64,
    pub data: DataSpec,
    pub subpixel: bool,
    pub weights: LossWeights,
    pub lr: f32,
    /// Learning rate multiplier applied every `lr_decay_epochs` epochs.
    pub lr_decay: f32,
    pub lr_decay_epochs: u64,
    pub batch: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub iterations: Option<u64>,
    /// Pyramid levels entering the loss; `None` uses all of them.
    pub loss_levels: Option<usize>,
    pub flip_fraction: f64,
    /// Run validation every this many epochs (0 disables it).
    pub eval_every: u64,
    /// Eval scenes used by per-epoch validation.
    pub eval_limit: usize,
}

impl TrainConfig {
    /// Defaults of a phase: lr 5e-4 and batch 4, or lr 5e-5, batch 2 and the
    /// first two pyramid levels for flip fine-tuning.
    pub fn for_phase(phase: Phase, data: DataSpec) -> Self {
        let base = TrainConfig {
            phase,
            seed: 0,
            data,
            subpixel: true,
            weights: LossWeights::default(),
            lr: 5e-4,
            lr_decay: 0.5,
            lr_decay_epochs: 40,
            batch: 4,
            epochs: 20,
            iterations: None,
            loss_levels: None,
            flip_fraction: 0.05,
            eval_every: 1,
            eval_limit: 50,
        };
        match phase {
            Phase::Base | Phase::Pose => base,
            Phase::FlipFinetune => TrainConfig {
                lr: 5e-5,
                batch: 2,
                epochs: 5,
                loss_levels: Some(2),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
        {
            return bad("learning rate must be positive and its decay in (0, 1]");
        }
        if self.batch == 0 || self.lr_decay_epochs == 0 {
            return bad("batch and lr_decay_epochs must be positive");
        }
        if self.loss_levels == Some(0) {
            return bad("loss_levels must be positive");
        }
        if !(0.0..0.5).contains(&self.flip_fraction) {
            return bad("flip_fraction must lie in [0, 0.5)");
        }
        if self.phase == Phase::Pose && self.data.frames < 4 {
            return bad("pose training needs at least 4 frames");
        }
        if self.phase != Phase::Pose && self.data.train_scenes == 0 {
            return bad("training split is empty");
        }
        Ok(())
    }

    /// Apply `key=value` overrides; data keys go to the [`DataSpec`].
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let map = parse_key_values(text)?;
        let mut data_lines = String::new();
        for (k, v) in &map {
            let p = |what: &str| Error::Parse(format!("invalid {what} {v:?} for {k}"));
            match k.as_str() {
                "phase" => self.phase = Phase::parse(v)?,
                "train_seed" => self.seed = v.parse().map_err(|_| p("integer"))?,
                "subpixel" => self.subpixel = parse_switch(v)?,
                "lr" => self.lr = v.parse().map_err(|_| p("number"))?,
                "lr_decay" => self.lr_decay = v.parse().map_err(|_| p("number"))?,
                "lr_decay_epochs" => self.lr_decay_epochs = v.parse().map_err(|_| p("integer"))?,
                "batch" => self.batch = v.parse().map_err(|_| p("integer"))?,
                "epochs" => self.epochs = v.parse().map_err(|_| p("integer"))?,
                "iterations" => self.iterations = Some(v.parse().map_err(|_| p("integer"))?),
                "loss_levels" => self.loss_levels = Some(v.parse().map_err(|_| p("integer"))?),
                "flip_fraction" => self.flip_fraction = v.parse().map_err(|_| p("number"))?,
                "eval_every" => self.eval_every = v.parse().map_err(|_| p("integer"))?,
                "eval_limit" => self.eval_limit = v.parse().map_err(|_| p("integer"))?,
                "smoothness" => self.weights.smoothness = v.parse().map_err(|_| p("number"))?,
                "occlusion" => self.weights.occlusion = v.parse().map_err(|_| p("number"))?,
                "alpha_stereo" => self.weights.alpha_stereo = v.parse().map_err(|_| p("number"))?,
                "alpha_pose" => self.weights.alpha_pose = v.parse().map_err(|_| p("number"))?,
                "scale_decay" => self.weights.scale_decay = v.parse().map_err(|_| p("number"))?,
                "decay_smoothness_only" => self.weights.decay_smoothness_only = parse_switch(v)?,
                _ => {
                    data_lines.push_str(&format!("{k}={v}\n"));
                }
            }
        }
        if !data_lines.is_empty() {
            let mut merged = parse_key_values(&self.data.to_text())?;
            merged.extend(parse_key_values(&data_lines)?);
            let text: String = merged.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
            self.data = DataSpec::parse(&text)?;
        }
        Ok(())
    }

    /// Canonical text of every setting except the run length.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        format!(
            "phase={}\ntrain_seed={}\nsubpixel={}\nlr={}\nlr_decay={}\nlr_decay_epochs={}\nbatch={}\n\
             loss_levels={}\nflip_fraction={}\nsmoothness={}\nocclusion={}\nalpha_stereo={}\n\
             alpha_pose={}\nscale_decay={}\ndecay_smoothness_only={}\neval_every={}\neval_limit={}\n{}",
            self.phase.name(),
            self.seed,
            if self.subpixel { "on" } else { "off" },
            self.lr,
            self.lr_decay,
            self.lr_decay_epochs,
            self.batch,
            self.loss_levels.map_or("all".to_string(), |l| l.to_string()),
            self.flip_fraction,
            w.smoothness,
            w.occlusion,
            w.alpha_stereo,
            w.alpha_pose,
            w.scale_decay,
            if w.decay_smoothness_only { "on" } else { "off" },
            self.eval_every,
            self.eval_limit,
            self.data.to_text()
        )
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn disparity_config(&self) -> DisparityNetConfig {
        DisparityNetConfig {
            subpixel: self.subpixel,
            height: self.data.height,
            width: self.data.width,
            ..Default::default()
        }
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        let pool = match self.phase {
            Phase::Pose => self.data.frames.saturating_sub(2),
            _ => self.data.train_scenes,
        };
        pool.div_ceil(self.batch).max(1) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations
            .unwrap_or(self.epochs * self.iterations_per_epoch())
    }

    /// Step schedule: `lr · decay^floor(epoch / lr_decay_epochs)`.
    pub fn lr_at(&self, iteration: u64) -> f32 {
        let epoch = iteration / self.iterations_per_epoch();
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_epochs) as i32)
    }
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("expected on/off, got {v:?}"))),
    }
}

/// Indices of the batch at `iteration`: each epoch visits a fresh
/// permutation of `0..pool` drawn from `(seed, epoch)`.
pub fn batch_indices(seed: u64, iteration: u64, pool: usize, batch: usize) -> Vec<usize> {
    let per_epoch = pool.div_ceil(batch).max(1) as u64;
    let epoch = iteration / per_epoch;
    let k = (iteration % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..pool).collect();
    let mut rng =
        SplitMix64::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(epoch));
    perm.shuffle(&mut rng);
    (0..batch).map(|j| perm[(k * batch + j) % pool]).collect()
}

/// Standard segment lengths that fit in `gt`, or half its length when the
/// path is shorter than all of them.
pub fn drift_lengths(gt: &Trajectory) -> Vec<f64> {
    let p: Vec<&Se3Pose> = gt.poses().collect();
    let arc: f64 = p
        .windows(2)
        .map(|w| {
            let d: Vec<f64> = (0..3).map(|i| w[1].trans[i] - w[0].trans[i]).collect();
            d.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .sum();
    let fit: Vec<f64> = DEFAULT_DRIFT_LENGTHS
        .iter()
        .copied()
        .filter(|&l| l <= arc)
        .collect();
    if fit.is_empty() {
        vec![arc / 2.0]
    } else {
        fit
    }
}

/// Networks of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub disparity: DisparityNet,
    pub pose: Option<PoseNet>,
}

/// Deterministic probe input used to fingerprint a forward pass.
pub fn probe_image(height: usize, width: usize) -> Tensor {
    let plane = height * width;
    let data = (0..3 * plane)
        .map(|i| {
            let (c, y, x) = (i / plane, (i % plane) / width, i % width);
            0.5 + 0.4 * (0.37 * x as f32 + 0.23 * y as f32 + 1.1 * c as f32).sin()
        })
        .collect();
    Tensor::from_vec([1, 3, height, width], data).expect("probe size")
}

impl Model {
    /// Hash of the level-0 disparity of [`probe_image`].
    pub fn forward_hash(&self) -> Result<u64> {
        let cfg = self.disparity.config();
        let out = self
            .disparity
            .predict(&probe_image(cfg.height, cfg.width), None)?;
        Ok(tensor_hash(&out.levels[0]))
    }

    /// Parameters, architecture and forward fingerprint.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let c = self.disparity.config();
        ck.set_meta("disp.levels", c.levels as u64)?;
        ck.set_meta("disp.subpixel", c.subpixel as u64)?;
        ck.set_meta("disp.height", c.height as u64)?;
        ck.set_meta("disp.width", c.width as u64)?;
        ck.set_meta_f64(
            "disp.max_disparity_fraction",
            c.max_disparity_fraction as f64,
        )?;
        ck.push(
            "config.disp.encoder_widths",
            vec![c.encoder_widths.len()],
            c.encoder_widths.iter().map(|&w| w as f32).collect(),
        )?;
        ck.put_params("net.disp.", self.disparity.params())?;
        if let Some(pose) = &self.pose {
            let pc = pose.config();
            ck.set_meta("pose.context_size", pc.context_size as u64)?;
            ck.set_meta_f64("pose.rotation_scale", pc.rotation_scale as f64)?;
            ck.push(
                "config.pose.widths",
                vec![pc.widths.len()],
                pc.widths.iter().map(|&w| w as f32).collect(),
            )?;
            ck.put_params("net.pose.", pose.params())?;
        }
        ck.set_meta("forward_hash", self.forward_hash()?)?;
        Ok(ck)
    }

    /// Rebuild the networks and check the stored forward fingerprint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let widths = |name: &str| -> Result<Vec<usize>> {
            let e = ck
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no {name}")))?;
            Ok(e.data.iter().map(|&w| w as usize).collect())
        };
        let config = DisparityNetConfig {
            encoder_widths: widths("config.disp.encoder_widths")?,
            levels: ck.meta("disp.levels")? as usize,
            subpixel: ck.meta("disp.subpixel")? != 0,
            max_disparity_fraction: ck.meta_f64("disp.max_disparity_fraction")? as f32,
            height: ck.meta("disp.height")? as usize,
            width: ck.meta("disp.width")? as usize,
        };
        let mut disparity =
            DisparityNet::new(config, 0).map_err(|e| Error::Format(e.to_string()))?;
        ck.load_params("net.disp.", disparity.params_mut())?;
        let pose = if ck.has_meta("pose.context_size") {
            let config = PoseNetConfig {
                context_size: ck.meta("pose.context_size")? as usize,
                widths: widths("config.pose.widths")?,
                rotation_scale: ck.meta_f64("pose.rotation_scale")? as f32,
            };
            let mut net = PoseNet::new(config, 0).map_err(|e| Error::Format(e.to_string()))?;
            ck.load_params("net.pose.", net.params_mut())?;
            Some(net)
        } else {
            None
        };
        let model = Model { disparity, pose };
        let stored = ck.meta("forward_hash")?;
        if model.forward_hash()? != stored {
            return Err(Error::Format(
                "forward pass does not reproduce the stored hash".into(),
            ));
        }
        Ok(model)
    }
}

/// Training data, rendered once per run.
#[derive(Clone, Debug)]
pub enum TrainData {
    Stereo {
        train: Vec<StereoSample>,
        eval: Vec<StereoSample>,
    },
    Sequence(Sequence),
}

impl TrainData {
    pub fn render(config: &TrainConfig) -> Result<TrainData> {
        match config.phase {
            Phase::Pose => Ok(TrainData::Sequence(render_sequence(
                &config.data.sequence()?,
            )?)),
            _ => Ok(TrainData::Stereo {
                train: config.data.render_split(Split::Train)?,
                eval: config.data.render_split(Split::Eval)?,
            }),
        }
    }
}

/// Loss values of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f32,
    pub loss: f32,
    pub photometric: f64,
    pub smoothness: f64,
    pub occlusion: f64,
    pub pose: f64,
}

impl StepStats {
    /// One log line; values print with round-trip precision.
    pub fn to_line(&self) -> String {
        format!(
            "iter={} lr={} loss={} photometric={} smoothness={} occlusion={} pose={}",
            self.iteration,
            self.lr,
            self.loss,
            self.photometric,
            self.smoothness,
            self.occlusion,
            self.pose
        )
    }
}

/// Callbacks of [`Trainer::run`].
pub trait TrainHooks {
    fn line(&mut self, _line: &str) {}
    fn epoch_end(&mut self, _trainer: &Trainer, _epoch: u64) -> Result<()> {
        Ok(())
    }
}

/// Collects log lines in memory.
#[derive(Default, Debug)]
pub struct LogLines(pub Vec<String>);

impl TrainHooks for LogLines {
    fn line(&mut self, line: &str) {
        self.0.push(line.to_string());
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam_disp: Adam,
    adam_pose: Option<Adam>,
    iteration: u64,
    data: TrainData,
    rig: StereoRig,
}

impl Trainer {
    /// Fresh run. Flip fine-tuning starts from `init` (required); the other
    /// phases start from `init` when given, otherwise from seeded weights.
    pub fn new(config: TrainConfig, init: Option<&Checkpoint>, data: TrainData) -> Result<Trainer> {
        config.validate()?;
        let mut model = match init {
            Some(ck) => Model::from_checkpoint(ck)?,
            None if config.phase == Phase::FlipFinetune => {
                return Err(Error::InvalidArgument(
                    "flip fine-tuning needs a base checkpoint to start from".into(),
                ))
            }
            None => Model {
                disparity: DisparityNet::new(config.disparity_config(), config.seed)?,
                pose: None,
            },
        };
        let want = config.disparity_config();
        let have = model.disparity.config();
        if (have.height, have.width, have.subpixel) != (want.height, want.width, want.subpixel) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint network ({}x{}, subpixel {}) does not match the run ({}x{}, subpixel {})",
                have.height, have.width, have.subpixel, want.height, want.width, want.subpixel
            )));
        }
        if config.phase == Phase::Pose && model.pose.is_none() {
            model.pose = Some(PoseNet::new(
                PoseNetConfig::default(),
                config.seed.wrapping_add(1),
            )?);
        }
        Self::assemble(config, model, None, None, 0, data)
    }

    /// Continue a run saved by [`Trainer::checkpoint`] under the same settings.
    pub fn resume(config: TrainConfig, ck: &Checkpoint, data: TrainData) -> Result<Trainer> {
        config.validate()?;
        if ck.meta("train.config_hash")? != config.config_hash() {
            return Err(Error::InvalidArgument(
                "checkpoint was written by a run with different settings".into(),
            ));
        }
        if Phase::from_code(ck.meta("train.phase")?)? != config.phase {
            return Err(Error::InvalidArgument(
                "checkpoint belongs to another phase".into(),
            ));
        }
        let model = Model::from_checkpoint(ck)?;
        let adam_disp = ck.load_adam("adam.disp.", model.disparity.params())?;
        let adam_pose = match &model.pose {
            Some(p) => Some(ck.load_adam("adam.pose.", p.params())?),
            None => None,
        };
        let it = ck.meta("train.iteration")?;
        Self::assemble(config, model, Some(adam_disp), adam_pose, it, data)
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        adam_disp: Option<Adam>,
        adam_pose: Option<Adam>,
        iteration: u64,
        data: TrainData,
    ) -> Result<Trainer> {
        match (&data, config.phase) {
            (TrainData::Sequence(_), Phase::Pose)
            | (TrainData::Stereo { .. }, Phase::Base | Phase::FlipFinetune) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "training data does not fit the phase".into(),
                ))
            }
        }
        let adam_disp = adam_disp
            .unwrap_or_else(|| Adam::for_params(config.lr, model.disparity.params().tensors()));
        let adam_pose = adam_pose.or_else(|| {
            model
                .pose
                .as_ref()
                .map(|p| Adam::for_params(config.lr, p.params().tensors()))
        });
        Ok(Trainer {
            rig: config.data.rig()?,
            config,
            model,
            adam_disp,
            adam_pose,
            iteration,
            data,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn rig(&self) -> &StereoRig {
        &self.rig
    }

    /// Model plus optimizer state and progress.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        ck.set_meta("train.phase", self.config.phase.code())?;
        ck.set_meta("train.iteration", self.iteration)?;
        ck.set_meta(
            "train.epoch",
            self.iteration / self.config.iterations_per_epoch(),
        )?;
        ck.set_meta("train.seed", self.config.seed)?;
        ck.set_meta("train.config_hash", self.config.config_hash())?;
        ck.put_adam("adam.disp.", self.model.disparity.params(), &self.adam_disp)?;
        if let (Some(p), Some(a)) = (&self.model.pose, &self.adam_pose) {
            ck.put_adam("adam.pose.", p.params(), a)?;
        }
        Ok(ck)
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepStats> {
        let lr = self.config.lr_at(self.iteration);
        let mut tape = Tape::new();
        let dp = self.model.disparity.params().bind(&mut tape)?;
        let mut stats = StepStats {
            iteration: self.iteration,
            lr,
            ..Default::default()
        };
        let pose_params = match (&self.model.pose, self.config.phase) {
            (Some(p), Phase::Pose) => Some(p.params().bind(&mut tape)?),
            _ => None,
        };

        let loss = match &self.data {
            TrainData::Stereo { train, .. } => {
                let idx = batch_indices(
                    self.config.seed,
                    self.iteration,
                    train.len(),
                    self.config.batch,
                );
                let left = Tensor::stack(
                    &idx.iter()
                        .map(|&i| train[i].left.clone())
                        .collect::<Vec<_>>(),
                )?;
                let right = Tensor::stack(
                    &idx.iter()
                        .map(|&i| train[i].right.clone())
                        .collect::<Vec<_>>(),
                )?;
                let left = tape.constant(left)?;
                let right = tape.constant(right)?;
                let net = &self.model.disparity;
                let mut pyr = match self.config.phase {
                    Phase::FlipFinetune => {
                        net.forward_flip(&mut tape, &dp, left, self.config.flip_fraction)?
                    }
                    _ => net.forward(&mut tape, &dp, left)?,
                };
                if let Some(l) = self.config.loss_levels {
                    pyr.truncate(l);
                }
                let (loss, parts) = total_depth_loss(
                    &mut tape,
                    &pyr,
                    left,
                    right,
                    &self.rig,
                    &self.config.weights,
                )?;
                stats.photometric = parts.photometric;
                stats.smoothness = parts.smoothness;
                stats.occlusion = parts.occlusion;
                loss
            }
            TrainData::Sequence(seq) => {
                let pose_net = self.model.pose.as_ref().expect("pose phase has a pose net");
                let pp = pose_params.as_ref().expect("pose params bound");
                let idx = batch_indices(
                    self.config.seed,
                    self.iteration,
                    seq.frames.len() - 2,
                    self.config.batch,
                );
                let gather = |v: &[Tensor], off: isize| -> Result<Tensor> {
                    Tensor::stack(
                        &idx.iter()
                            .map(|&i| v[(i as isize + 1 + off) as usize].clone())
                            .collect::<Vec<_>>(),
                    )
                };
                let target = tape.constant(gather(&seq.frames, 0)?)?;
                let right = tape.constant(gather(&seq.right, 0)?)?;
                let prev = tape.constant(gather(&seq.frames, -1)?)?;
                let next = tape.constant(gather(&seq.frames, 1)?)?;

                let mut pyr = self.model.disparity.forward(&mut tape, &dp, target)?;
                if let Some(l) = self.config.loss_levels {
                    pyr.truncate(l);
                }
                let (ld, parts) = total_depth_loss(
                    &mut tape,
                    &pyr,
                    target,
                    right,
                    &self.rig,
                    &self.config.weights,
                )?;
                stats.photometric = parts.photometric;
                stats.smoothness = parts.smoothness;
                stats.occlusion = parts.occlusion;

                let depth = disparity_to_depth_var(&mut tape, pyr[0], &self.rig)?;
                let poses = pose_net.forward(&mut tape, pp, target, &[prev, next])?;
                let mut temporal: Option<Var> = None;
                for (ctx, pose) in [prev, next].into_iter().zip(poses) {
                    let (synth, mask) =
                        synthesize_view(&mut tape, ctx, depth, &self.rig.pinhole(), pose)?;
                    let l = pose_photometric_loss(
                        &mut tape,
                        target,
                        synth,
                        self.config.weights.alpha_pose,
                        Some(mask),
                    )?;
                    temporal = Some(match temporal {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                let temporal = tape.scale(temporal.expect("two contexts"), 0.5)?;
                stats.pose = tape.value(temporal).item() as f64;
                tape.add(ld, temporal)?
            }
        };
        stats.loss = tape.value(loss).item();
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
            });
        }
        tape.backward(loss)?;

        let grads = dp.take_grads(&mut tape);
        self.adam_disp.lr = lr;
        self.adam_disp
            .step(self.model.disparity.params_mut().tensors_mut(), &grads)?;
        if let (Some(pp), Some(net), Some(adam)) = (
            &pose_params,
            self.model.pose.as_mut(),
            self.adam_pose.as_mut(),
        ) {
            let grads = pp.take_grads(&mut tape);
            adam.lr = lr;
            adam.step(net.params_mut().tensors_mut(), &grads)?;
        }
        if !self
            .model
            .disparity
            .params()
            .tensors()
            .iter()
            .all(Tensor::all_finite)
        {
            return Err(Error::NonFinite {
                op: "parameter update",
            });
        }
        self.iteration += 1;
        Ok(stats)
    }

    /// Validation lines for the current model.
    pub fn validate_now(&self) -> Result<String> {
        match &self.data {
            TrainData::Stereo { eval, .. } => {
                let n = self.config.eval_limit.min(eval.len());
                let flip =
                    (self.config.phase == Phase::FlipFinetune).then_some(self.config.flip_fraction);
                let e = evaluate_depth(&self.model.disparity, &eval[..n], &self.rig, flip)?;
                Ok(e.metrics.to_records("eval"))
            }
            TrainData::Sequence(seq) => {
                let pose = self.model.pose.as_ref().expect("pose phase has a pose net");
                let traj = predict_trajectory(pose, &seq.frames)?;
                let e = evaluate_trajectory(traj, &seq.poses, &drift_lengths(&seq.poses))?;
                Ok(format!(
                    "{}eval,median_step,{:.6}\n",
                    e.drift.to_records("eval"),
                    e.median_step
                ))
            }
        }
    }

    /// Train until `total_iterations`, logging every step and validating at
    /// epoch ends.
    pub fn run(&mut self, hooks: &mut dyn TrainHooks) -> Result<()> {
        let total = self.config.total_iterations();
        let per_epoch = self.config.iterations_per_epoch();
        while self.iteration < total {
            let stats = self.step()?;
            hooks.line(&stats.to_line());
            if self.iteration.is_multiple_of(per_epoch) || self.iteration == total {
                let epoch = (self.iteration - 1) / per_epoch;
                let eval_due = self.config.eval_every > 0
                    && (epoch + 1).is_multiple_of(self.config.eval_every);
                if eval_due {
                    for l in self.validate_now()?.lines() {
                        hooks.line(&format!("epoch={epoch} {}", l));
                    }
                }
                hooks.epoch_end(self, epoch)?;
            }
        }
        Ok(())
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(phase: Phase) -> TrainConfig {
        let data = DataSpec {
            height: 32,
            width: 64,
            train_scenes: 6,
            eval_scenes: 2,
            frames: 8,
            ..Default::default()
        };
        TrainConfig {
            iterations: Some(3),
            eval_limit: 2,
            ..TrainConfig::for_phase(phase, data)
        }
    }

    #[test]
    fn phase_defaults() {
        let b = TrainConfig::for_phase(Phase::Base, DataSpec::default());
        assert_eq!((b.lr, b.batch, b.loss_levels), (5e-4, 4, None));
        assert_eq!((b.lr_decay, b.lr_decay_epochs), (0.5, 40));
        let f = TrainConfig::for_phase(Phase::FlipFinetune, DataSpec::default());
        assert_eq!((f.lr, f.batch, f.loss_levels), (5e-5, 2, Some(2)));
        assert_eq!(b.iterations_per_epoch(), 50);
        assert_eq!(b.lr_at(50 * 40 - 1), 5e-4);
        assert_eq!(b.lr_at(50 * 40), 2.5e-4);
        assert_eq!(b.lr_at(50 * 80), 1.25e-4);
    }

    #[test]
    fn batches_are_pure_and_cover_each_epoch() {
        let a = batch_indices(7, 13, 10, 4);
        assert_eq!(a, batch_indices(7, 13, 10, 4));
        let mut seen: Vec<usize> = (0..3).flat_map(|i| batch_indices(7, i, 12, 4)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_ne!(batch_indices(7, 0, 12, 4), batch_indices(7, 3, 12, 4));
    }

    #[test]
    fn config_text_overrides() {
        let mut c = TrainConfig::for_phase(Phase::Base, DataSpec::default());
        c.apply_text("lr=0.001\nbatch=2\nsubpixel=off\nwidth=256\nheight=128\nsmoothness=0.2\n")
            .unwrap();
        assert_eq!((c.lr, c.batch, c.subpixel), (1e-3, 2, false));
        assert_eq!((c.data.height, c.data.width), (128, 256));
        assert_eq!(c.weights.smoothness, 0.2);
        assert!(c.apply_text("bogus=1").is_err());
        assert!(c.apply_text("subpixel=maybe").is_err());
        let h = c.config_hash();
        c.epochs += 3;
        assert_eq!(c.config_hash(), h);
        c.seed += 1;
        assert_ne!(c.config_hash(), h);
    }

    #[test]
    fn finetune_requires_base_checkpoint() {
        let c = tiny(Phase::FlipFinetune);
        let data = TrainData::render(&c).unwrap();
        assert!(Trainer::new(c, None, data).is_err());
    }

    #[test]
    fn rerun_and_resume_are_bit_identical() {
        let c = TrainConfig {
            iterations: Some(4),
            ..tiny(Phase::Base)
        };
        let data = TrainData::render(&c).unwrap();
        let mut a = Trainer::new(c.clone(), None, data.clone()).unwrap();
        let mut log_a = LogLines::default();
        a.run(&mut log_a).unwrap();

        let mut b = Trainer::new(
            TrainConfig {
                iterations: Some(2),
                ..c.clone()
            },
            None,
            data.clone(),
        )
        .unwrap();
        let mut log_b = LogLines::default();
        b.run(&mut log_b).unwrap();
        let ck = Checkpoint::from_bytes(&b.checkpoint().unwrap().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(c.clone(), &ck, data).unwrap();
        resumed.run(&mut log_b).unwrap();

        let iters = |l: &LogLines| {
            l.0.iter()
                .filter(|s| s.starts_with("iter="))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(iters(&log_a), iters(&log_b));
        assert_eq!(
            a.checkpoint().unwrap().to_bytes(),
            resumed.checkpoint().unwrap().to_bytes()
        );
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let c = tiny(Phase::Base);
        let data = TrainData::render(&c).unwrap();
        let t = Trainer::new(c, None, data).unwrap();
        let ck = t.checkpoint().unwrap();
        let m = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(&m, t.model());

        let mut tampered = Checkpoint::new();
        for e in ck.entries() {
            let mut data = e.data.clone();
            if e.name == "net.disp.enc0.down.weight" {
                data.iter_mut().for_each(|v| *v *= 1.5);
            }
            tampered.push(e.name.clone(), e.dims.clone(), data).unwrap();
        }
        let r = Model::from_checkpoint(&tampered);
        assert!(matches!(r, Err(Error::Format(_))), "{r:?}");
    }

    #[test]
    fn pose_phase_runs_and_saves_both_networks() {
        let c = tiny(Phase::Pose);
        let data = TrainData::render(&c).unwrap();
        let mut t = Trainer::new(c, None, data).unwrap();
        let mut log = LogLines::default();
        t.run(&mut log).unwrap();
        assert!(log
            .0
            .iter()
            .any(|l| l.contains("pose=") && !l.contains("pose=0 ")));
        let m = Model::from_checkpoint(&t.checkpoint().unwrap()).unwrap();
        assert!(m.pose.is_some());
    }
}

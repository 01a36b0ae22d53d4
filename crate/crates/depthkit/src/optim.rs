//! Adam with bias correction.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// Zero-initialized moments for parameters of the given sizes.
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f32, params: &[Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
        Self::new(lr, &sizes)
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Restore state saved from [`Adam::steps`] and the moment buffers.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let same = |a: &[Vec<f32>], b: &[Vec<f32>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return shape_err("Adam::restore", "moment buffers do not match parameters");
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. A `None` gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f32>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g_len = g.as_ref().map_or(p.numel(), Vec::len);
            if p.numel() != self.m[i].len() || g_len != p.numel() {
                return shape_err(
                    "adam_step",
                    format!(
                        "parameter {i}: {:?} vs state {}",
                        p.shape(),
                        self.m[i].len()
                    ),
                );
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            match &grads[i] {
                Some(g) => {
                    for j in 0..data.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        data[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + self.eps);
                    }
                }
                None => {
                    for j in 0..data.len() {
                        m[j] *= b1;
                        v[j] *= b2;
                        data[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

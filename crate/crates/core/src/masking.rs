//! Patch masking with a learnable mask token, and the schedule that decides
//! when it is switched on during pretraining.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Real;

/// Sorted, unique token indices to mask within one image segment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub indices: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check(&self, token_count: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= token_count) {
            return Err(Error::invalid(format!(
                "mask index {bad} out of range for {token_count} tokens"
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("mask indices must be sorted and unique"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSchedule {
    /// Masking can only fire in this final fraction of pretraining.
    pub activation_fraction: f64,
    /// Per-example probability once the window is open.
    pub apply_probability: f64,
    pub ratio: f64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            activation_fraction: 0.4,
            apply_probability: 0.5,
            ratio: 0.5,
        }
    }
}

impl MaskSchedule {
    pub fn off() -> Self {
        Self {
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("activation_fraction", self.activation_fraction),
            ("apply_probability", self.apply_probability),
            ("ratio", self.ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("mask.{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// First step at which masking may fire.
    pub fn threshold(&self, total_steps: usize) -> usize {
        // the small slack keeps e.g. 0.6 * 100 from landing on 60.000000000000007
        ((1.0 - self.activation_fraction) * total_steps as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

/// Uniform draw of `round(ratio * token_count)` positions without replacement.
pub fn select_mask(stream: &mut Stream, token_count: usize, ratio: f64) -> MaskPlan {
    assert!((0.0..=1.0).contains(&ratio), "mask ratio {ratio} outside [0, 1]");
    let k = (ratio * token_count as f64).round() as usize;
    let mut pool: Vec<usize> = (0..token_count).collect();
    for i in 0..k {
        let j = i + stream.index(token_count - i);
        pool.swap(i, j);
    }
    let mut indices = pool[..k].to_vec();
    indices.sort_unstable();
    MaskPlan { indices, ratio }
}

/// Replaces the planned rows of `content` (token embeddings before positional
/// and timestep terms) with the mask embedding.
pub fn apply_mask<T: Real>(g: &mut Graph<'_, T>, content: Var, plan: &MaskPlan, mask_emb: Var) -> Result<Var> {
    plan.check(g.shape(content)[0])?;
    if plan.is_empty() {
        return Ok(content);
    }
    g.replace_rows(content, &plan.indices, mask_emb)
}

/// Whether one example at `step` gets masked. Draws from `stream` only
/// inside the activation window.
pub fn masking_active(step: usize, total_pretrain_steps: usize, stream: &mut Stream, schedule: &MaskSchedule) -> bool {
    if step < schedule.threshold(total_pretrain_steps) || schedule.apply_probability == 0.0 {
        return false;
    }
    stream.bernoulli(schedule.apply_probability)
}

/// Which outputs carry loss for a task, given a mask plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPositions {
    /// Flow loss over every patch of the noisy image.
    AllPatches(usize),
    /// Cross-entropy over text targets only.
    TextTargets,
}

/// Masking never narrows the loss: generative tasks still regress every
/// patch, text tasks still score only their targets.
pub fn masked_targets(task: Task, token_count: usize, _plan: &MaskPlan) -> LossPositions {
    if task.is_generative() {
        LossPositions::AllPatches(token_count)
    } else {
        LossPositions::TextTargets
    }
}

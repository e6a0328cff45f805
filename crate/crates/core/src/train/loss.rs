//! Turning records into model inputs and the joint CE + flow objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::tokenizer::encode_words;
use crate::data::{SampleRecord, Task};
use crate::error::{Error, Result};
use crate::flow::{sample_t, v_loss_node, FlowSample, TimestepDist};
use crate::masking::{masking_active, select_mask, MaskSchedule};
use crate::model::{Model, ModelConfig, ModelInput, Role};
use crate::patch::patchify;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Examples of each task in a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub generation: usize,
    pub understanding: usize,
    pub text_only: usize,
    pub editing: usize,
    pub reconstruction: usize,
}

impl TaskCounts {
    pub fn add(&mut self, task: Task) {
        match task {
            Task::Generation => self.generation += 1,
            Task::Understanding => self.understanding += 1,
            Task::TextOnly => self.text_only += 1,
            Task::Editing => self.editing += 1,
            Task::Reconstruction => self.reconstruction += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.generation + self.understanding + self.text_only + self.editing + self.reconstruction
    }
}

/// One record ready for the model, with its own flow draw if generative.
#[derive(Clone, Debug)]
pub struct PreparedExample<T> {
    pub input: ModelInput<T>,
    /// Flow sample in token space (`token_count × token_dim`).
    pub flow: Option<FlowSample<T>>,
    pub masked: bool,
}

#[derive(Clone, Debug)]
pub struct PreparedBatch<T> {
    pub examples: Vec<PreparedExample<T>>,
    pub counts: TaskCounts,
}

impl<T> PreparedBatch<T> {
    pub fn masked_fraction(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().filter(|e| e.masked).count() as f64 / self.examples.len() as f64
    }
}

/// Knobs for [`prepare_batch`] that do not live on the records.
pub struct PrepareOptions<'a> {
    pub model: &'a ModelConfig,
    pub t_dist: &'a dyn TimestepDist,
    /// `None` disables masking (every stage after pretraining).
    pub mask: Option<&'a MaskSchedule>,
    pub step: usize,
    pub mask_total_steps: usize,
    pub caption_lm_loss: bool,
    pub caption_dropout: f64,
}

pub fn image_tokens<T: Real>(image: &Tensor<f32>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    patchify(&image.cast::<T>(), &cfg.grid())
}

fn words(text: &Option<String>, what: &str) -> Result<Vec<usize>> {
    let t = text
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("record is missing its {what}")))?;
    encode_words(t)
}

fn image<'r>(img: &'r Option<Tensor<f32>>, what: &str) -> Result<&'r Tensor<f32>> {
    img.as_ref()
        .ok_or_else(|| Error::invalid(format!("record is missing its {what}")))
}

/// Builds the model input for one record. Randomness is drawn in a fixed
/// order: caption dropout, mask decision and plan, then `t` and noise.
pub fn prepare_example<T: Real>(
    record: &SampleRecord,
    opts: &PrepareOptions<'_>,
    stream: &mut Stream,
) -> Result<PreparedExample<T>> {
    let cfg = opts.model;
    let n_tok = cfg.grid().token_count();
    let draw_flow = |x1: Tensor<T>, stream: &mut Stream| {
        let t = sample_t(stream, opts.t_dist, cfg.eps_t);
        FlowSample::draw(x1, t, stream)
    };
    let decide_mask = |stream: &mut Stream| match opts.mask {
        Some(s) if masking_active(opts.step, opts.mask_total_steps, stream, s) => {
            Some(select_mask(stream, n_tok, s.ratio))
        }
        _ => None,
    };
    let (mut input, flow, plan) = match record.task {
        Task::Generation => {
            let mut caption = words(&record.condition_text, "caption")?;
            if opts.caption_dropout > 0.0 && stream.bernoulli(opts.caption_dropout) {
                caption.clear();
            }
            let plan = decide_mask(stream).map(|p| (Role::ImageNoisy, p));
            let fs = draw_flow(image_tokens(image(&record.image, "image")?, cfg)?, stream)?;
            let caption_target = opts.caption_lm_loss && !caption.is_empty();
            let input = ModelInput::generation(&caption, fs.xt.clone(), fs.t, caption_target);
            (input, Some(fs), plan)
        }
        Task::Editing => {
            let instr = words(&record.condition_text, "instruction")?;
            let src = image_tokens(image(&record.source_image, "source image")?, cfg)?;
            let fs = draw_flow(image_tokens(image(&record.image, "image")?, cfg)?, stream)?;
            let input = ModelInput::editing(src, &instr, fs.xt.clone(), fs.t);
            (input, Some(fs), None)
        }
        Task::Reconstruction => {
            let src = image_tokens(image(&record.source_image, "source image")?, cfg)?;
            let fs = draw_flow(image_tokens(image(&record.image, "image")?, cfg)?, stream)?;
            let input = ModelInput::reconstruction(src, fs.xt.clone(), fs.t);
            (input, Some(fs), None)
        }
        Task::Understanding => {
            let img = image_tokens(image(&record.image, "image")?, cfg)?;
            let answer = words(&record.target_text, "target text")?;
            let plan = decide_mask(stream).map(|p| (Role::ImageCondition, p));
            let input = if record.is_qa() {
                ModelInput::qa(img, &words(&record.condition_text, "question")?, &answer)
            } else {
                ModelInput::captioning(img, &answer)
            };
            (input, None, plan)
        }
        Task::TextOnly => {
            let input = ModelInput::text_only(&words(&record.target_text, "text")?);
            (input, None, None)
        }
    };
    let masked = plan.is_some();
    if let Some((role, plan)) = plan {
        input.set_mask(role, plan)?;
    }
    Ok(PreparedExample { input, flow, masked })
}

/// Prepares each record from its own fork of `stream`, indexed by position.
pub fn prepare_batch<T: Real>(
    records: &[SampleRecord],
    opts: &PrepareOptions<'_>,
    stream: &Stream,
) -> Result<PreparedBatch<T>> {
    let mut counts = TaskCounts::default();
    let examples = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            counts.add(r.task);
            prepare_example(r, opts, &mut stream.fork(i as u64))
        })
        .collect::<Result<_>>()?;
    Ok(PreparedBatch { examples, counts })
}

/// Graph nodes of the joint objective plus its components' values.
pub struct JointLoss {
    pub total: Var,
    /// Mean cross-entropy over examples with text targets.
    pub ce: Option<f64>,
    /// Mean v-loss over generative examples.
    pub flow: Option<f64>,
    /// Mean of `mean((x_pred - x1)²)` over generative examples: the same
    /// error without the `1 / (1 - t)²` weight of the v-loss.
    pub flow_x_mse: Option<f64>,
}

/// `mean(CE over text examples) + flow_weight * mean(v-loss over generative examples)`.
pub fn joint_step_loss<'p, T: Real>(
    g: &mut Graph<'p, T>,
    model: &Model<'p, T>,
    batch: &PreparedBatch<T>,
    flow_weight: f64,
) -> Result<JointLoss> {
    if batch.examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut ces = Vec::new();
    let mut flows = Vec::new();
    let mut x_mses = Vec::new();
    for ex in &batch.examples {
        let fwd = model.run(g, &ex.input)?;
        if !ex.input.targets().is_empty() {
            let (_, ce) = model.lm_logits_and_ce(g, &fwd, &ex.input)?;
            ces.push(ce);
        }
        if let Some(fs) = &ex.flow {
            let x_pred = model.flow_head(g, &fwd)?;
            let err = g
                .value(x_pred)
                .zip_map(&fs.x1, "flow_x_mse", |p, q| (p - q) * (p - q))?;
            x_mses.push(err.data().iter().map(|v| v.as_f64()).sum::<f64>() / err.len() as f64);
            flows.push(v_loss_node(g, x_pred, &fs.xt, &fs.v, fs.t, model.cfg.eps_t)?);
        }
    }
    let mean = |g: &mut Graph<'p, T>, parts: &[Var]| -> Result<Option<Var>> {
        if parts.is_empty() {
            return Ok(None);
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(Some(g.scale(acc, 1.0 / parts.len() as f64)))
    };
    let ce = mean(g, &ces)?;
    let flow = mean(g, &flows)?;
    let total = match (ce, flow) {
        (Some(c), Some(f)) => {
            let f = g.scale(f, flow_weight);
            g.add(c, f)?
        }
        (Some(c), None) => c,
        (None, Some(f)) => g.scale(f, flow_weight),
        (None, None) => return Err(Error::invalid("batch has nothing to score")),
    };
    Ok(JointLoss {
        total,
        ce: ce.map(|v| g.scalar(v).as_f64()),
        flow: flow.map(|v| g.scalar(v).as_f64()),
        flow_x_mse: (!x_mses.is_empty()).then(|| x_mses.iter().sum::<f64>() / x_mses.len() as f64),
    })
}

//! Finite-difference check of the full joint objective.

use crate::autodiff::{grad_check, GradReport};
use crate::data::{DataConfig, SampleRecord, Scene};
use crate::error::Result;
use crate::flow::UniformTime;
use crate::masking::MaskSchedule;
use crate::model::{init_params, Model, ModelConfig};
use crate::rng::Stream;

use super::loss::{joint_step_loss, prepare_batch, PrepareOptions};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Builds the f64 gradcheck model and a mixed batch (two generation, two
/// captioning, one text-only) with masking forced on, then compares reverse
/// mode against central differences for every parameter tensor.
pub fn joint_loss_gradcheck(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig::gradcheck();
    let root = Stream::new(seed);
    let params = init_params::<f64>(&cfg, &mut root.fork_named("init"))?;
    let data = DataConfig {
        image_size: cfg.image_size,
        ..DataConfig::default()
    };
    let scenes = Scene::all_single_object();
    let mut s = root.fork_named("records");
    let mut pick = || scenes[s.index(scenes.len())].clone();
    let (a, b, c, d) = (pick(), pick(), pick(), pick());
    let mut s = root.fork_named("text");
    let records = vec![
        SampleRecord::generation(&a, &data, &mut s),
        SampleRecord::generation(&b, &data, &mut s),
        SampleRecord::captioning(&c, &data, &mut s),
        SampleRecord::captioning(&d, &data, &mut s),
        SampleRecord::text_only(&mut s),
    ];
    let always = MaskSchedule {
        activation_fraction: 1.0,
        apply_probability: 1.0,
        ratio: 0.5,
    };
    let opts = PrepareOptions {
        model: &cfg,
        t_dist: &UniformTime,
        mask: Some(&always),
        step: 0,
        mask_total_steps: 1,
        caption_lm_loss: false,
        caption_dropout: 0.0,
    };
    let batch = prepare_batch::<f64>(&records, &opts, &root.fork_named("batch"))?;
    grad_check(
        &params,
        |g| {
            let m = Model::new(&cfg, g.params().expect("graph has params"))?;
            Ok(joint_step_loss(g, &m, &batch, 1.0)?.total)
        },
        GRADCHECK_EPS,
        GRADCHECK_TOLERANCE,
    )
}

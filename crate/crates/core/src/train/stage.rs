//! The training loop shared by pretraining, SFT and reconstruction finetuning.

use std::path::Path;

use crate::data::{sample_batch, Stage};
use crate::error::{Error, Result};
use crate::model::{init_params, Model, ModelConfig};
use crate::registry::timestep_dists;
use crate::rng::Stream;
use crate::tensor::Real;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{Corpus, TrainConfig};
use super::loss::{joint_step_loss, prepare_batch, PrepareOptions};
use super::metrics::{write_metrics, LossValues, MetricRow};
use super::optim::{learning_rate, optimizer_step, AdamState};

pub struct StageOutput<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<MetricRow>,
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Sft => "sft",
        Stage::ReconFinetune => "recon_finetune",
    }
}

/// Random stream for one training step. Derived from the seed alone so a
/// resumed run draws the same batches as an uninterrupted one.
pub fn step_stream(seed: u64, stage: Stage, step: usize) -> Stream {
    Stream::new(seed).fork_named(stage_name(stage)).fork(step as u64)
}

/// A freshly initialised checkpoint at step 0.
pub fn fresh_checkpoint<T: Real>(model: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    let root = Stream::new(seed);
    let params = init_params(model, &mut root.fork_named("init"))?;
    Ok(Checkpoint {
        model: model.clone(),
        params,
        adam: None,
        stage: Stage::Pretrain,
        step: 0,
        seed,
        seed_digest: root.digest(),
    })
}

/// Options that do not belong in the persisted config.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Stop after this many total steps instead of `steps`.
    pub until: Option<usize>,
    /// Where to write `metrics.csv`, `final.pxfu` and periodic checkpoints.
    pub out_dir: Option<&'a Path>,
}

/// Trains `cfg.stage` from `init` (required for SFT and reconstruction).
///
/// An `init` from the same stage resumes at its step with its optimizer
/// state; one from an earlier stage starts this stage at step 0 with fresh
/// moments.
pub fn run_stage<T: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    init: Option<Checkpoint<T>>,
    opts: RunOptions<'_>,
) -> Result<StageOutput<T>> {
    model.validate()?;
    cfg.validate()?;
    let mut ckpt = match init {
        Some(c) => {
            c.check_config(model)?;
            c
        }
        None if cfg.stage == Stage::Pretrain => fresh_checkpoint(model, cfg.seed)?,
        None => {
            return Err(Error::Config(format!(
                "{} needs an input checkpoint",
                stage_name(cfg.stage)
            )))
        }
    };
    let resuming = ckpt.stage == cfg.stage;
    let start = if resuming { ckpt.step } else { 0 };
    let mut adam = match (&ckpt.adam, resuming) {
        (Some(a), true) => a.clone(),
        _ => AdamState::new(&ckpt.params),
    };
    ckpt.stage = cfg.stage;
    ckpt.step = start;
    ckpt.seed = cfg.seed;
    ckpt.seed_digest = Stream::new(cfg.seed).digest();

    let end = opts.until.unwrap_or(cfg.steps).min(cfg.steps);
    let t_dist = timestep_dists().build(&cfg.t_dist)?;
    let warmup = cfg.warmup_steps();
    let mask = (cfg.stage == Stage::Pretrain).then_some(&cfg.mask);
    let mut metrics = Vec::new();

    for step in start..end {
        let stream = step_stream(cfg.seed, cfg.stage, step);
        let records = sample_batch(
            &cfg.mixture,
            cfg.stage,
            cfg.batch_size,
            &corpus.source,
            &cfg.data,
            &stream.fork_named("batch"),
        );
        let prep = PrepareOptions {
            model,
            t_dist: t_dist.as_ref(),
            mask,
            step,
            mask_total_steps: cfg.mask_total(),
            caption_lm_loss: cfg.caption_lm_loss,
            caption_dropout: if cfg.stage == Stage::Pretrain {
                cfg.caption_dropout
            } else {
                0.0
            },
        };
        let batch = prepare_batch::<T>(&records, &prep, &stream.fork_named("prepare"))?;
        let (loss, grads) = {
            let m = Model::new(model, &ckpt.params)?;
            let mut g = m.graph();
            let loss = joint_step_loss(&mut g, &m, &batch, cfg.flow_weight)?;
            let total = g.scalar(loss.total).as_f64();
            let grads = g.backward(loss.total)?;
            let values = LossValues {
                ce: loss.ce,
                flow: loss.flow,
                flow_x_mse: loss.flow_x_mse,
                total,
            };
            (values, grads)
        };
        let lr = learning_rate(cfg.lr, step, warmup);
        optimizer_step(&mut ckpt.params, &grads, &mut adam, &cfg.adam, lr)?;
        ckpt.step = step + 1;

        if step % cfg.log_every == 0 || step + 1 == end {
            let row = MetricRow::new(step, &loss, batch.masked_fraction(), batch.counts);
            log::info!(
                "{} step {step}: total {:.4} ce {:?} flow {:?}",
                stage_name(cfg.stage),
                row.total,
                row.ce_loss,
                row.flow_mse_loss
            );
            metrics.push(row);
        }
        if let Some(dir) = opts.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 != end {
                ckpt.adam = Some(adam.clone());
                save_checkpoint(&dir.join(format!("step_{:06}.pxfu", step + 1)), &ckpt)?;
            }
        }
    }
    ckpt.adam = Some(adam);
    if let Some(dir) = opts.out_dir {
        save_checkpoint(&dir.join("final.pxfu"), &ckpt)?;
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
    }
    Ok(StageOutput {
        checkpoint: ckpt,
        metrics,
    })
}

/// Reconstruction finetuning: `[image_condition(x), image_noisy(x)]` with
/// the flow loss only.
pub fn recon_finetune<T: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    ckpt: Checkpoint<T>,
    opts: RunOptions<'_>,
) -> Result<StageOutput<T>> {
    let cfg = TrainConfig {
        stage: Stage::ReconFinetune,
        ..cfg.clone()
    };
    run_stage(model, &cfg, corpus, Some(ckpt), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::CorpusConfig;

    fn small() -> (ModelConfig, TrainConfig, Corpus) {
        let model = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            ..ModelConfig::tiny()
        };
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 3,
            log_every: 2,
            ..TrainConfig::default()
        };
        let corpus = CorpusConfig {
            kind: "fixed".into(),
            n_scenes: 4,
            ..CorpusConfig::default()
        }
        .build()
        .unwrap();
        (model, cfg, corpus)
    }

    #[test]
    fn zero_steps_return_init() {
        let (model, mut cfg, corpus) = small();
        cfg.steps = 0;
        let init = fresh_checkpoint::<f32>(&model, 0).unwrap();
        let out = run_stage(&model, &cfg, &corpus, Some(init.clone()), RunOptions::default()).unwrap();
        assert_eq!(out.checkpoint.params, init.params);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn later_stages_need_a_checkpoint() {
        let (model, mut cfg, corpus) = small();
        cfg.stage = Stage::Sft;
        assert!(run_stage::<f32>(&model, &cfg, &corpus, None, RunOptions::default()).is_err());
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let (model, cfg, corpus) = small();
        let full = run_stage::<f32>(&model, &cfg, &corpus, None, RunOptions::default()).unwrap();
        let half = run_stage::<f32>(
            &model,
            &cfg,
            &corpus,
            None,
            RunOptions {
                until: Some(3),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(half.checkpoint.step, 3);
        let rest = run_stage(&model, &cfg, &corpus, Some(half.checkpoint), RunOptions::default()).unwrap();
        assert_eq!(rest.checkpoint, full.checkpoint);
    }

    #[test]
    fn recon_metrics_hold_only_flow() {
        let (model, cfg, corpus) = small();
        let pre = run_stage::<f32>(&model, &cfg, &corpus, None, RunOptions::default()).unwrap();
        let out = recon_finetune(&model, &cfg, &corpus, pre.checkpoint, RunOptions::default()).unwrap();
        assert!(!out.metrics.is_empty());
        for r in &out.metrics {
            assert!(r.ce_loss.is_none() && r.flow_mse_loss.is_some());
            assert_eq!(r.n_reconstruction, cfg.batch_size);
        }
    }
}

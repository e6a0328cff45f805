//! Evaluation harnesses over trained checkpoints.

pub mod attention;
pub mod compose;
pub mod experiments;
pub mod quality;

use serde::Serialize;

use crate::data::grammar::all_qa_pairs;
use crate::data::{canonical_caption, rasterize, Scene};
use crate::error::Result;
use crate::model::Model;
use crate::sample::{answer, caption_ce, generate, reconstruct, SampleRunConfig};
use crate::tensor::Real;

pub use attention::{attention_dump, write_heatmaps, AttnMap};
pub use compose::{compositional_check, detect_objects, CompositionReport, Detected};
pub use experiments::{ablation_report, ratio_sweep, spearman, AblationConfig, AblationReport, SweepResult};
pub use quality::{psnr, ssim, PSNR_CAP_DB};

/// Longest answer or caption the harnesses decode.
pub const MAX_DECODE: usize = 24;

/// Mean teacher-forced CE of each scene's canonical caption.
pub fn caption_loss<T: Real>(model: &Model<'_, T>, scenes: &[Scene]) -> Result<f64> {
    let size = model.cfg.image_size;
    let mut total = 0.0;
    for s in scenes {
        total += caption_ce(model, &rasterize(s, size, size), &canonical_caption(s))?;
    }
    Ok(total / scenes.len().max(1) as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerationResult {
    pub prompt: String,
    pub psnr: f64,
    pub ssim: f64,
    pub report: CompositionReport,
}

/// Generates each scene's canonical caption and scores it against the
/// scene's rasterisation.
pub fn generation_eval<T: Real>(
    model: &Model<'_, T>,
    scenes: &[Scene],
    run: &SampleRunConfig,
) -> Result<Vec<GenerationResult>> {
    let size = model.cfg.image_size;
    scenes
        .iter()
        .map(|s| {
            let prompt = canonical_caption(s);
            let img = generate(model, &prompt, run)?;
            let truth = rasterize(s, size, size);
            Ok(GenerationResult {
                psnr: quality::psnr(&img, &truth)?,
                ssim: quality::ssim(&img, &truth)?,
                report: compositional_check(&img, s),
                prompt,
            })
        })
        .collect()
}

pub fn compositional_accuracy(results: &[GenerationResult]) -> f64 {
    results.iter().filter(|r| r.report.passed()).count() as f64 / results.len().max(1) as f64
}

/// Exact-match accuracy over every question the grammar asks about each scene.
pub fn vqa_accuracy<T: Real>(model: &Model<'_, T>, scenes: &[Scene]) -> Result<f64> {
    let size = model.cfg.image_size;
    let (mut right, mut total) = (0usize, 0usize);
    for s in scenes {
        let img = rasterize(s, size, size);
        for (_, q, a) in all_qa_pairs(s) {
            right += (answer(model, &img, &q, MAX_DECODE)? == a) as usize;
            total += 1;
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

/// Mean reconstruction PSNR and SSIM over the scenes' rasterisations.
pub fn reconstruction_eval<T: Real>(
    model: &Model<'_, T>,
    scenes: &[Scene],
    run: &SampleRunConfig,
) -> Result<(f64, f64)> {
    let size = model.cfg.image_size;
    let (mut p, mut s) = (0.0, 0.0);
    for scene in scenes {
        let img = rasterize(scene, size, size);
        let out = reconstruct(model, &img, run)?;
        p += quality::psnr(&out, &img)?;
        s += quality::ssim(&out, &img)?;
    }
    let n = scenes.len().max(1) as f64;
    Ok((p / n, s / n))
}

//! Multi-run studies: the data-ratio sweep and the masking ablation.

use serde::{Deserialize, Serialize};

use crate::data::{MixtureConfig, Scene, Stage};
use crate::error::{Error, Result};
use crate::masking::MaskSchedule;
use crate::model::{Model, ModelConfig};
use crate::sample::SampleRunConfig;
use crate::train::metrics::tail_mean;
use crate::train::{run_stage, Checkpoint, Corpus, MetricRow, RunOptions, TrainConfig};

use super::{compositional_accuracy, generation_eval, vqa_accuracy};

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    /// `xgyu` label of the mixture.
    pub ratio: String,
    pub metrics: Vec<MetricRow>,
    /// Mean of the last `window` logged CE values.
    pub final_ce: f64,
    /// Mean of the last `window` logged clean-image errors (`flow_x_mse`).
    /// The v-loss weights each example by `1 / (1 - t)²`, so its short-window
    /// means are dominated by single draws near `t = 1`.
    pub final_mse: f64,
}

/// Trains one run per mixture from the same seed and budget. Runs are
/// independent, so up to `threads` of them go in parallel.
pub fn ratio_sweep(
    model: &ModelConfig,
    base: &TrainConfig,
    corpus: &Corpus,
    mixtures: &[MixtureConfig],
    window: usize,
    threads: usize,
) -> Result<Vec<SweepResult>> {
    let one = |m: &MixtureConfig| -> Result<SweepResult> {
        let cfg = TrainConfig {
            mixture: *m,
            ..base.clone()
        };
        let out = run_stage::<f32>(model, &cfg, corpus, None, RunOptions::default())?;
        let ce = tail_mean(out.metrics.iter().map(|r| r.ce_loss), window);
        let mse = tail_mean(out.metrics.iter().map(|r| r.flow_x_mse), window);
        let (Some(final_ce), Some(final_mse)) = (ce, mse) else {
            return Err(Error::invalid(format!(
                "run {} logged no CE or no flow loss",
                m.notation()
            )));
        };
        Ok(SweepResult {
            ratio: m.notation(),
            metrics: out.metrics,
            final_ce,
            final_mse,
        })
    };
    let mut out = Vec::with_capacity(mixtures.len());
    for chunk in mixtures.chunks(threads.max(1)) {
        let results: Vec<Result<SweepResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|m| s.spawn(move || one(m))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Spearman rank correlation; ties get their mean rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Fraction of the pretraining budget shared by both branches.
    pub split_fraction: f64,
    /// SFT steps run identically on both branches before evaluation.
    pub sft_steps: usize,
    pub sample: SampleRunConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            split_fraction: 0.5,
            sft_steps: 0,
            sample: SampleRunConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub branch: String,
    pub vqa_accuracy: f64,
    pub compositional_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub split_step: usize,
    pub total_steps: usize,
    pub masked: AblationRow,
    pub unmasked: AblationRow,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "masking ablation: shared {} of {} pretraining steps\n{:<10} {:>8} {:>8}\n",
            self.split_step, self.total_steps, "branch", "vqa %", "compose %"
        );
        for r in [&self.masked, &self.unmasked] {
            s += &format!(
                "{:<10} {:>8.2} {:>8.2}\n",
                r.branch,
                100.0 * r.vqa_accuracy,
                100.0 * r.compositional_accuracy
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("branch,vqa_accuracy,compositional_accuracy\n");
        for r in [&self.masked, &self.unmasked] {
            s += &format!("{},{},{}\n", r.branch, r.vqa_accuracy, r.compositional_accuracy);
        }
        s
    }
}

/// Pretrains to `split_fraction` of `pretrain.steps`, then finishes the
/// budget twice from that checkpoint: once with `pretrain.mask`, once with
/// masking off. Both branches then get the same SFT and evaluation.
pub fn ablation_report(
    model: &ModelConfig,
    pretrain: &TrainConfig,
    sft: &TrainConfig,
    corpus: &Corpus,
    vqa_scenes: &[Scene],
    gen_scenes: &[Scene],
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    if !(0.0..=1.0).contains(&cfg.split_fraction) {
        return Err(Error::Config("ablation.split_fraction must be in [0, 1]".into()));
    }
    let split = (cfg.split_fraction * pretrain.steps as f64).round() as usize;
    let until = RunOptions {
        until: Some(split),
        ..RunOptions::default()
    };
    let shared = run_stage::<f32>(model, pretrain, corpus, None, until)?.checkpoint;
    let branch = |name: &str, mask: MaskSchedule| -> Result<AblationRow> {
        let cfg_b = TrainConfig {
            mask,
            ..pretrain.clone()
        };
        let mut ckpt: Checkpoint<f32> =
            run_stage(model, &cfg_b, corpus, Some(shared.clone()), RunOptions::default())?.checkpoint;
        if cfg.sft_steps > 0 {
            let s = TrainConfig {
                stage: Stage::Sft,
                steps: cfg.sft_steps,
                ..sft.clone()
            };
            ckpt = run_stage(model, &s, corpus, Some(ckpt), RunOptions::default())?.checkpoint;
        }
        let m = Model::new(model, &ckpt.params)?;
        Ok(AblationRow {
            branch: name.to_string(),
            vqa_accuracy: vqa_accuracy(&m, vqa_scenes)?,
            compositional_accuracy: compositional_accuracy(&generation_eval(&m, gen_scenes, &cfg.sample)?),
        })
    };
    Ok(AblationReport {
        split_step: split,
        total_steps: pretrain.steps,
        masked: branch("masked", pretrain.mask)?,
        unmasked: branch("unmasked", MaskSchedule::off())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::CorpusConfig;

    #[test]
    fn spearman_extremes_and_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 90.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]) == 0.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((r - 0.8).abs() < 1e-12);
    }

    fn tiny() -> (ModelConfig, TrainConfig, Corpus) {
        let model = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            ..ModelConfig::tiny()
        };
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 4,
            log_every: 1,
            ..TrainConfig::default()
        };
        let corpus = CorpusConfig {
            kind: "fixed".into(),
            n_scenes: 3,
            ..CorpusConfig::default()
        }
        .build()
        .unwrap();
        (model, cfg, corpus)
    }

    #[test]
    fn zero_extra_budget_gives_identical_rows() {
        let (model, cfg, corpus) = tiny();
        let scenes = corpus.scenes().unwrap().to_vec();
        let ab = AblationConfig {
            split_fraction: 1.0,
            sample: SampleRunConfig {
                steps: 2,
                ..SampleRunConfig::default()
            },
            ..AblationConfig::default()
        };
        let r = ablation_report(&model, &cfg, &cfg, &corpus, &scenes[..1], &scenes[..1], &ab).unwrap();
        assert_eq!(r.masked.vqa_accuracy, r.unmasked.vqa_accuracy);
        assert_eq!(r.masked.compositional_accuracy, r.unmasked.compositional_accuracy);
        let table = r.to_table();
        assert!(table.contains("vqa") && table.contains("compose"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    #[test]
    fn sweep_reports_each_ratio() {
        let (model, cfg, corpus) = tiny();
        let mixtures = [
            MixtureConfig::new(5, 5, 0.0).unwrap(),
            MixtureConfig::new(3, 7, 0.0).unwrap(),
        ];
        let out = ratio_sweep(&model, &cfg, &corpus, &mixtures, 2, 2).unwrap();
        let names: Vec<_> = out.iter().map(|r| r.ratio.as_str()).collect();
        assert_eq!(names, ["5g5u", "3g7u"]);
        assert!(out.iter().all(|r| r.final_ce > 0.0 && r.final_mse > 0.0));
    }
}

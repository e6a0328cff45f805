use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::export::read_dataset;
use crate::data::{DataConfig, MixtureConfig, Scene, SceneSource, Stage};
use crate::error::{Error, Result};
use crate::masking::MaskSchedule;
use crate::rng::Stream;

use super::optim::AdamConfig;

/// Which scenes a run trains on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// `procedural`, `fixed` (a seeded list of `n_scenes`), `single_object`
    /// (every one-object scene minus `holdout` combinations) or `dataset`.
    pub kind: String,
    pub n_scenes: usize,
    pub max_objects: usize,
    /// Number of held-out (color, shape, cell) combinations for `single_object`.
    pub holdout: usize,
    pub seed: u64,
    /// Directory written by `gen-data`, for `dataset`.
    pub path: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: "procedural".into(),
            n_scenes: 16,
            max_objects: 2,
            holdout: 12,
            seed: 0,
            path: None,
        }
    }
}

/// Training scenes plus any scenes deliberately kept out of them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub source: SceneSource,
    pub held_out: Vec<Scene>,
}

impl Corpus {
    /// Scenes a run trains on, when the list is finite.
    pub fn scenes(&self) -> Option<&[Scene]> {
        match &self.source {
            SceneSource::Fixed(s) => Some(s),
            SceneSource::Procedural { .. } => None,
        }
    }
}

/// A seeded list of distinct scenes with 1 to `max_objects` objects.
pub fn fixed_scenes(n: usize, max_objects: usize, seed: u64) -> Vec<Scene> {
    let mut s = Stream::new(seed);
    let src = SceneSource::Procedural { max_objects };
    let mut out: Vec<Scene> = Vec::with_capacity(n);
    while out.len() < n {
        let scene = src.draw(&mut s);
        if !out.contains(&scene) {
            out.push(scene);
        }
    }
    out
}

/// Splits the single-object scene space by (color, shape, cell): `holdout`
/// seeded combinations are removed from training, every size and background
/// of them is returned as held out.
pub fn single_object_split(holdout: usize, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    use crate::data::{Cell, Color, Shape};
    let mut combos = Vec::new();
    for &c in Color::ALL {
        for &s in Shape::ALL {
            for &cell in Cell::ALL {
                combos.push((c, s, cell));
            }
        }
    }
    let mut stream = Stream::new(seed);
    for i in 0..holdout.min(combos.len()) {
        let j = i + stream.index(combos.len() - i);
        combos.swap(i, j);
    }
    let held: Vec<_> = combos[..holdout.min(combos.len())].to_vec();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for scene in Scene::all_single_object() {
        let o = &scene.objects[0];
        if held.contains(&(o.color, o.shape, o.cell)) {
            test.push(scene);
        } else {
            train.push(scene);
        }
    }
    (train, test)
}

impl CorpusConfig {
    pub fn build(&self) -> Result<Corpus> {
        let fixed = |scenes: Vec<Scene>| Corpus {
            source: SceneSource::Fixed(scenes),
            held_out: Vec::new(),
        };
        match self.kind.as_str() {
            "procedural" => Ok(Corpus {
                source: SceneSource::Procedural {
                    max_objects: self.max_objects,
                },
                held_out: Vec::new(),
            }),
            "fixed" => Ok(fixed(fixed_scenes(self.n_scenes, self.max_objects, self.seed))),
            "single_object" => {
                let (train, test) = single_object_split(self.holdout, self.seed);
                Ok(Corpus {
                    source: SceneSource::Fixed(train),
                    held_out: test,
                })
            }
            "dataset" => {
                let dir = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("corpus.path is required for a dataset corpus".into()))?;
                let mut scenes: Vec<Scene> = Vec::new();
                for r in read_dataset(dir)? {
                    for s in [r.scene, r.source_scene].into_iter().flatten() {
                        if !scenes.contains(&s) {
                            scenes.push(s);
                        }
                    }
                }
                if scenes.is_empty() {
                    return Err(Error::Config(format!("no scenes in dataset {}", dir.display())));
                }
                Ok(fixed(scenes))
            }
            other => Err(Error::Config(format!(
                "unknown corpus kind `{other}`, expected procedural, fixed, single_object or dataset"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub mixture: MixtureConfig,
    pub mask: MaskSchedule,
    /// Pretraining length the mask schedule is keyed to; defaults to `steps`.
    pub mask_total_steps: Option<usize>,
    /// Weight of the flow loss against cross-entropy.
    pub flow_weight: f64,
    /// Training timestep distribution, as a registry spec.
    pub t_dist: String,
    /// Also score generation captions with the language-model head.
    pub caption_lm_loss: bool,
    /// Probability of dropping a generation caption for guidance training.
    pub caption_dropout: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Periodic checkpoint interval; zero writes only the final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            warmup_fraction: 0.02,
            adam: AdamConfig::default(),
            mixture: MixtureConfig::default(),
            mask: MaskSchedule::default(),
            mask_total_steps: None,
            flow_weight: 1.0,
            t_dist: "uniform".into(),
            caption_lm_loss: false,
            caption_dropout: 0.0,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.flow_weight < 0.0 {
            return bad("train.flow_weight must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("train.caption_dropout and train.warmup_fraction must be in [0, 1]".into());
        }
        if self.log_every == 0 {
            return bad("train.log_every must be at least 1".into());
        }
        self.mixture.validate()?;
        self.mask.validate()?;
        crate::registry::timestep_dists().build(&self.t_dist)?;
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    pub fn mask_total(&self) -> usize {
        self.mask_total_steps.unwrap_or(self.steps)
    }
}

//! Training records and the generation/understanding/text-only mixture sampler.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::grammar::{apply_edit, caption, instruction, qa_pair, random_edit, text_only_sentence, CaptionStyle};
use super::scene::{gen_scene, rasterize, Image, Scene};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Understanding,
    Generation,
    Editing,
    TextOnly,
    Reconstruction,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Generation,
        Task::Understanding,
        Task::TextOnly,
        Task::Editing,
        Task::Reconstruction,
    ];

    /// Tasks trained with the flow loss.
    pub fn is_generative(self) -> bool {
        matches!(self, Task::Generation | Task::Editing | Task::Reconstruction)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Understanding => "understanding",
            Task::Generation => "generation",
            Task::Editing => "editing",
            Task::TextOnly => "text_only",
            Task::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Sft,
    ReconFinetune,
}

/// Generation-to-understanding sampling ratio plus a text-only share.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub gen_ratio: u32,
    pub und_ratio: u32,
    pub text_only_fraction: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            gen_ratio: 7,
            und_ratio: 3,
            text_only_fraction: 0.2,
        }
    }
}

impl MixtureConfig {
    pub fn new(gen_ratio: u32, und_ratio: u32, text_only_fraction: f64) -> Result<Self> {
        let m = Self {
            gen_ratio,
            und_ratio,
            text_only_fraction,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_ratio + self.und_ratio != 10 {
            return Err(Error::Config(format!(
                "mixture ratios must sum to 10, got {}g{}u",
                self.gen_ratio, self.und_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.text_only_fraction) {
            return Err(Error::Config(format!(
                "text_only_fraction must be in [0, 1), got {}",
                self.text_only_fraction
            )));
        }
        Ok(())
    }

    /// Expected share of each slot kind: `(generation, understanding, text_only)`.
    pub fn expected_shares(&self) -> (f64, f64, f64) {
        let img = 1.0 - self.text_only_fraction;
        (
            img * self.gen_ratio as f64 / 10.0,
            img * self.und_ratio as f64 / 10.0,
            self.text_only_fraction,
        )
    }

    pub fn notation(&self) -> String {
        format!("{}g{}u", self.gen_ratio, self.und_ratio)
    }
}

impl FromStr for MixtureConfig {
    type Err = Error;

    /// Parses `xgyu` (e.g. `7g3u`) with the default text-only share.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("expected a ratio like 7g3u, got `{s}`"));
        let s = s.trim();
        let (g, rest) = s.split_once('g').ok_or_else(bad)?;
        let u = rest.strip_suffix('u').ok_or_else(bad)?;
        let gen_ratio = g.parse().map_err(|_| bad())?;
        let und_ratio = u.parse().map_err(|_| bad())?;
        MixtureConfig::new(gen_ratio, und_ratio, MixtureConfig::default().text_only_fraction)
    }
}

impl fmt::Display for MixtureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.notation())
    }
}

/// Where scenes come from.
#[derive(Clone, Debug, PartialEq)]
pub enum SceneSource {
    /// Fresh random scenes with up to `max_objects` objects.
    Procedural { max_objects: usize },
    /// Uniform draws from a fixed list.
    Fixed(Vec<Scene>),
}

impl SceneSource {
    pub fn draw(&self, stream: &mut Stream) -> Scene {
        match self {
            SceneSource::Procedural { max_objects } => {
                let n = 1 + stream.index((*max_objects).clamp(1, 2));
                gen_scene(stream, n)
            }
            SceneSource::Fixed(scenes) => scenes[stream.index(scenes.len())].clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub caption_style: CaptionStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            caption_style: CaptionStyle::Canonical,
        }
    }
}

/// One training or evaluation example.
///
/// `image` is the picture the example is about: the target for generative
/// tasks, the input for understanding. `source_image` is the clean
/// conditioning image of editing and reconstruction examples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub task: Task,
    pub condition_text: Option<String>,
    pub target_text: Option<String>,
    pub image: Option<Image>,
    pub source_image: Option<Image>,
    pub scene: Option<Scene>,
    pub source_scene: Option<Scene>,
}

impl SampleRecord {
    fn empty(task: Task) -> Self {
        Self {
            task,
            condition_text: None,
            target_text: None,
            image: None,
            source_image: None,
            scene: None,
            source_scene: None,
        }
    }

    pub fn generation(scene: &Scene, cfg: &DataConfig, stream: &mut Stream) -> Self {
        Self {
            condition_text: Some(caption(scene, cfg.caption_style, stream)),
            image: Some(rasterize(scene, cfg.image_size, cfg.image_size)),
            scene: Some(scene.clone()),
            ..Self::empty(Task::Generation)
        }
    }

    /// Image captioning.
    pub fn captioning(scene: &Scene, cfg: &DataConfig, stream: &mut Stream) -> Self {
        Self {
            target_text: Some(caption(scene, cfg.caption_style, stream)),
            image: Some(rasterize(scene, cfg.image_size, cfg.image_size)),
            scene: Some(scene.clone()),
            ..Self::empty(Task::Understanding)
        }
    }

    pub fn question(scene: &Scene, question: String, answer: String, cfg: &DataConfig) -> Self {
        Self {
            condition_text: Some(question),
            target_text: Some(answer),
            image: Some(rasterize(scene, cfg.image_size, cfg.image_size)),
            scene: Some(scene.clone()),
            ..Self::empty(Task::Understanding)
        }
    }

    pub fn qa(scene: &Scene, cfg: &DataConfig, stream: &mut Stream) -> Self {
        let (q, a) = qa_pair(scene, stream);
        Self::question(scene, q, a, cfg)
    }

    pub fn editing(scene: &Scene, cfg: &DataConfig, stream: &mut Stream) -> Self {
        let (src, instr, tgt, tgt_scene) = edit_pair(scene, cfg.image_size, stream);
        Self {
            condition_text: Some(instr),
            image: Some(tgt),
            source_image: Some(src),
            scene: Some(tgt_scene),
            source_scene: Some(scene.clone()),
            ..Self::empty(Task::Editing)
        }
    }

    pub fn text_only(stream: &mut Stream) -> Self {
        Self {
            target_text: Some(text_only_sentence(stream)),
            ..Self::empty(Task::TextOnly)
        }
    }

    pub fn reconstruction(scene: &Scene, cfg: &DataConfig) -> Self {
        let img = rasterize(scene, cfg.image_size, cfg.image_size);
        Self {
            image: Some(img.clone()),
            source_image: Some(img),
            scene: Some(scene.clone()),
            source_scene: Some(scene.clone()),
            ..Self::empty(Task::Reconstruction)
        }
    }

    /// Question/answer records carry a condition text; captioning ones do not.
    pub fn is_qa(&self) -> bool {
        self.task == Task::Understanding && self.condition_text.is_some()
    }
}

/// `(source image, instruction, target image, target scene)` for one random edit.
pub fn edit_pair(scene: &Scene, size: usize, stream: &mut Stream) -> (Image, String, Image, Scene) {
    let op = random_edit(scene, stream);
    let target = apply_edit(scene, &op).expect("random edits are valid");
    (
        rasterize(scene, size, size),
        instruction(scene, &op),
        rasterize(&target, size, size),
        target,
    )
}

/// Task of one batch slot: text-only first, then generation vs understanding.
pub fn sample_slot(mixture: &MixtureConfig, stream: &mut Stream) -> Task {
    if stream.bernoulli(mixture.text_only_fraction) {
        Task::TextOnly
    } else if stream.bernoulli(mixture.gen_ratio as f64 / 10.0) {
        Task::Generation
    } else {
        Task::Understanding
    }
}

/// Draws a batch. Each slot reads its own fork of `stream`, so runs that
/// differ only in the mixture see the same content in slots given the same task.
pub fn sample_batch(
    mixture: &MixtureConfig,
    stage: Stage,
    batch_size: usize,
    source: &SceneSource,
    cfg: &DataConfig,
    stream: &Stream,
) -> Vec<SampleRecord> {
    (0..batch_size)
        .map(|i| {
            let stream = &mut stream.fork(i as u64);
            if stage == Stage::ReconFinetune {
                return SampleRecord::reconstruction(&source.draw(stream), cfg);
            }
            match (sample_slot(mixture, stream), stage) {
                (Task::TextOnly, _) => SampleRecord::text_only(stream),
                (Task::Generation, Stage::Sft) => {
                    let s = source.draw(stream);
                    if stream.bernoulli(0.5) {
                        SampleRecord::editing(&s, cfg, stream)
                    } else {
                        SampleRecord::generation(&s, cfg, stream)
                    }
                }
                (Task::Generation, _) => {
                    let s = source.draw(stream);
                    SampleRecord::generation(&s, cfg, stream)
                }
                (_, Stage::Sft) => {
                    let s = source.draw(stream);
                    SampleRecord::qa(&s, cfg, stream)
                }
                (_, _) => {
                    let s = source.draw(stream);
                    SampleRecord::captioning(&s, cfg, stream)
                }
            }
        })
        .collect()
}

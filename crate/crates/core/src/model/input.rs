//! Concrete model inputs: text ids and patch tokens arranged by role.

use crate::data::tokenizer::{BOS, EOS, SEP};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::{Real, Tensor};

use super::layout::{Role, Segment, SequenceLayout};

#[derive(Clone, Debug, PartialEq)]
pub enum SegmentInput<T> {
    Text {
        role: Role,
        ids: Vec<usize>,
    },
    Image {
        role: Role,
        /// `token_count × token_dim` patch tokens.
        tokens: Tensor<T>,
        /// Grid index (`row * cols + col`) of each token.
        positions: Vec<usize>,
        mask: MaskPlan,
    },
}

impl<T: Real> SegmentInput<T> {
    pub fn text(role: Role, ids: Vec<usize>) -> Self {
        Self::Text { role, ids }
    }

    /// Image segment in the canonical patch order.
    pub fn image(role: Role, tokens: Tensor<T>) -> Self {
        let n = tokens.shape()[0];
        Self::Image {
            role,
            tokens,
            positions: (0..n).collect(),
            mask: MaskPlan::empty(),
        }
    }

    pub fn role(&self) -> Role {
        match self {
            Self::Text { role, .. } | Self::Image { role, .. } => *role,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Text { ids, .. } => ids.len(),
            Self::Image { tokens, .. } => tokens.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub task: Task,
    pub segments: Vec<SegmentInput<T>>,
    /// Flow time of the noisy image, if there is one.
    pub t: Option<f64>,
}

fn wrap(ids: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(BOS);
    v.extend_from_slice(ids);
    v.push(EOS);
    v
}

impl<T: Real> ModelInput<T> {
    pub fn layout(&self) -> Result<SequenceLayout> {
        SequenceLayout::new(
            self.task,
            self.segments
                .iter()
                .map(|s| Segment {
                    role: s.role(),
                    len: s.len(),
                })
                .collect(),
        )
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(SegmentInput::len).sum()
    }

    /// `[image_condition, text_target(BOS words EOS)]`.
    pub fn captioning(image: Tensor<T>, words: &[usize]) -> Self {
        Self {
            task: Task::Understanding,
            segments: vec![
                SegmentInput::image(Role::ImageCondition, image),
                SegmentInput::text(Role::TextTarget, wrap(words)),
            ],
            t: None,
        }
    }

    /// `[image_condition, text_condition(BOS question), text_target(SEP answer EOS)]`.
    pub fn qa(image: Tensor<T>, question: &[usize], answer: &[usize]) -> Self {
        let mut q = vec![BOS];
        q.extend_from_slice(question);
        let mut a = vec![SEP];
        a.extend_from_slice(answer);
        a.push(EOS);
        Self {
            task: Task::Understanding,
            segments: vec![
                SegmentInput::image(Role::ImageCondition, image),
                SegmentInput::text(Role::TextCondition, q),
                SegmentInput::text(Role::TextTarget, a),
            ],
            t: None,
        }
    }

    /// `[text(BOS caption EOS), image_noisy]`. With `caption_is_target` the
    /// caption also carries language-model loss.
    pub fn generation(caption: &[usize], noisy: Tensor<T>, t: f64, caption_is_target: bool) -> Self {
        let role = if caption_is_target {
            Role::TextTarget
        } else {
            Role::TextCondition
        };
        Self {
            task: Task::Generation,
            segments: vec![
                SegmentInput::text(role, wrap(caption)),
                SegmentInput::image(Role::ImageNoisy, noisy),
            ],
            t: Some(t),
        }
    }

    /// `[image_condition(source), text_condition(BOS instruction EOS), image_noisy]`.
    pub fn editing(source: Tensor<T>, instruction: &[usize], noisy: Tensor<T>, t: f64) -> Self {
        Self {
            task: Task::Editing,
            segments: vec![
                SegmentInput::image(Role::ImageCondition, source),
                SegmentInput::text(Role::TextCondition, wrap(instruction)),
                SegmentInput::image(Role::ImageNoisy, noisy),
            ],
            t: Some(t),
        }
    }

    /// `[image_condition(source), image_noisy]`.
    pub fn reconstruction(source: Tensor<T>, noisy: Tensor<T>, t: f64) -> Self {
        Self {
            task: Task::Reconstruction,
            segments: vec![
                SegmentInput::image(Role::ImageCondition, source),
                SegmentInput::image(Role::ImageNoisy, noisy),
            ],
            t: Some(t),
        }
    }

    /// `[text_target(BOS words EOS)]`.
    pub fn text_only(words: &[usize]) -> Self {
        Self {
            task: Task::TextOnly,
            segments: vec![SegmentInput::text(Role::TextTarget, wrap(words))],
            t: None,
        }
    }

    /// Patch tokens of the noisy image segment.
    pub fn noisy_tokens(&self) -> Option<&Tensor<T>> {
        self.segments.iter().find_map(|s| match s {
            SegmentInput::Image {
                role: Role::ImageNoisy,
                tokens,
                ..
            } => Some(tokens),
            _ => None,
        })
    }

    pub fn noisy_tokens_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.segments.iter_mut().find_map(|s| match s {
            SegmentInput::Image {
                role: Role::ImageNoisy,
                tokens,
                ..
            } => Some(tokens),
            _ => None,
        })
    }

    /// Attaches `plan` to the first image segment with `role`.
    pub fn set_mask(&mut self, role: Role, plan: MaskPlan) -> Result<()> {
        for s in &mut self.segments {
            if let SegmentInput::Image {
                role: r, mask, tokens, ..
            } = s
            {
                if *r == role {
                    plan.check(tokens.shape()[0])?;
                    *mask = plan;
                    return Ok(());
                }
            }
        }
        Err(Error::invalid(format!("no {role:?} segment to mask")))
    }

    /// Text-target `(ids)` of every target segment, in order.
    pub fn targets(&self) -> Vec<&[usize]> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                SegmentInput::Text {
                    role: Role::TextTarget,
                    ids,
                } => Some(ids.as_slice()),
                _ => None,
            })
            .collect()
    }
}

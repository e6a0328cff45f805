//! Mixed text/image sequences and the attention policy derived from them.

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TextCondition,
    TextTarget,
    ImageCondition,
    ImageNoisy,
}

impl Role {
    pub fn is_text(self) -> bool {
        matches!(self, Role::TextCondition | Role::TextTarget)
    }

    pub fn is_image(self) -> bool {
        !self.is_text()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: Role,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub task: Task,
    pub segments: Vec<Segment>,
}

impl SequenceLayout {
    pub fn new(task: Task, segments: Vec<Segment>) -> Result<Self> {
        let l = Self { task, segments };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.iter().any(|s| s.len == 0) {
            return Err(Error::invalid("layout segments must be non-empty"));
        }
        let noisy = self.segments.iter().filter(|s| s.role == Role::ImageNoisy).count();
        let want = usize::from(self.task.is_generative());
        if noisy != want {
            return Err(Error::invalid(format!(
                "{} layout needs {want} noisy image segment(s), found {noisy}",
                self.task.name()
            )));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Start offset of each segment.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.segments
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.len;
                o
            })
            .collect()
    }

    /// `(offset, segment)` pairs for segments with `role`.
    pub fn find(&self, role: Role) -> Vec<(usize, Segment)> {
        self.offsets()
            .into_iter()
            .zip(self.segments.iter().copied())
            .filter(|(_, s)| s.role == role)
            .collect()
    }

    /// Segment index of every position.
    pub fn segment_of_positions(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.len))
            .collect()
    }
}

/// Row-major `L × L` matrix: `mask[q * L + k]` is true when query `q` may attend key `k`.
///
/// Text positions attend causally. Positions inside an image segment attend to
/// every position of their own segment and to all earlier segments. Nothing
/// attends to a later segment.
pub fn build_attention_mask(layout: &SequenceLayout) -> Vec<bool> {
    let seg = layout.segment_of_positions();
    let n = seg.len();
    let mut mask = vec![false; n * n];
    for q in 0..n {
        let q_image = layout.segments[seg[q]].role.is_image();
        for k in 0..n {
            mask[q * n + k] = if q_image { seg[k] <= seg[q] } else { k <= q };
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(task: Task, segs: &[(Role, usize)]) -> SequenceLayout {
        SequenceLayout::new(task, segs.iter().map(|&(role, len)| Segment { role, len }).collect()).unwrap()
    }

    /// Independent statement of the policy, evaluated pair by pair.
    fn allowed(layout: &SequenceLayout, q: usize, k: usize) -> bool {
        let mut start = 0;
        let mut bounds = Vec::new();
        for s in &layout.segments {
            bounds.push((start, start + s.len, s.role));
            start += s.len;
        }
        let find = |p: usize| bounds.iter().position(|&(a, b, _)| a <= p && p < b).unwrap();
        let (sq, sk) = (find(q), find(k));
        if bounds[sq].2.is_image() {
            sk <= sq
        } else {
            k <= q
        }
    }

    #[test]
    fn text_then_image_matches_enumeration() {
        let l = layout(Task::Generation, &[(Role::TextCondition, 2), (Role::ImageNoisy, 2)]);
        let m = build_attention_mask(&l);
        #[rustfmt::skip]
        let expected = [
            true,  false, false, false,
            true,  true,  false, false,
            true,  true,  true,  true,
            true,  true,  true,  true,
        ];
        assert_eq!(m, expected);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(m[q * 4 + k], allowed(&l, q, k));
            }
        }
    }

    #[test]
    fn pure_text_is_causal() {
        let l = layout(Task::TextOnly, &[(Role::TextTarget, 5)]);
        let m = build_attention_mask(&l);
        for q in 0..5 {
            for k in 0..5 {
                assert_eq!(m[q * 5 + k], k <= q);
            }
        }
    }

    #[test]
    fn lone_image_is_fully_bidirectional() {
        let l = layout(Task::Understanding, &[(Role::ImageCondition, 6)]);
        assert!(build_attention_mask(&l).iter().all(|&b| b));
    }

    #[test]
    fn edit_layout_matches_enumeration() {
        let l = layout(
            Task::Editing,
            &[
                (Role::ImageCondition, 3),
                (Role::TextCondition, 2),
                (Role::ImageNoisy, 3),
            ],
        );
        let m = build_attention_mask(&l);
        let n = l.total_len();
        for q in 0..n {
            for k in 0..n {
                assert_eq!(m[q * n + k], allowed(&l, q, k), "q={q} k={k}");
            }
        }
    }

    #[test]
    fn noisy_segment_count_is_enforced() {
        let seg = |role, len| Segment { role, len };
        assert!(SequenceLayout::new(Task::Generation, vec![seg(Role::TextCondition, 2)]).is_err());
        assert!(SequenceLayout::new(
            Task::Understanding,
            vec![seg(Role::ImageNoisy, 2), seg(Role::TextTarget, 2)]
        )
        .is_err());
    }
}

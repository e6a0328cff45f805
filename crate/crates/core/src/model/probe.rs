//! Perturbation probes of the attention policy on real forward passes.

use crate::data::tokenizer::vocab_len;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

use super::backbone::Model;
use super::input::{ModelInput, SegmentInput};
use super::layout::Role;

/// Final hidden states, `L × d_model`.
pub fn hidden<T: Real>(model: &Model<'_, T>, input: &ModelInput<T>) -> Result<Tensor<T>> {
    let mut g = model.graph();
    let fwd = model.run(&mut g, input)?;
    Ok(g.value(fwd.hidden).clone())
}

fn row_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ra: usize, rb: usize) -> f64 {
    a.row(ra)
        .iter()
        .zip(b.row(rb))
        .fold(0.0, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()))
}

/// A random input of a random task, with 1 to 6 words per text segment,
/// redrawn until it fits the model's context.
pub fn random_input<T: Real>(model: &Model<'_, T>, stream: &mut Stream) -> ModelInput<T> {
    loop {
        let input = draw_input(model, stream);
        if input.total_len() <= model.cfg.max_seq_len {
            return input;
        }
    }
}

fn draw_input<T: Real>(model: &Model<'_, T>, stream: &mut Stream) -> ModelInput<T> {
    let grid = model.cfg.grid();
    let vocab = vocab_len().min(model.cfg.vocab_size);
    let words = |s: &mut Stream| -> Vec<usize> {
        let n = 1 + s.index(6);
        (0..n).map(|_| 4 + s.index(vocab - 4)).collect()
    };
    let image = |s: &mut Stream| Tensor::from_fn(&[grid.token_count(), grid.token_dim()], |_| T::of(s.normal()));
    let t = 0.05 + 0.9 * stream.uniform();
    match stream.index(6) {
        0 => ModelInput::captioning(image(stream), &words(stream)),
        1 => {
            let img = image(stream);
            let q = words(stream);
            ModelInput::qa(img, &q, &words(stream))
        }
        2 => {
            let w = words(stream);
            let target = stream.bernoulli(0.5);
            ModelInput::generation(&w, image(stream), t, target)
        }
        3 => {
            let src = image(stream);
            let w = words(stream);
            ModelInput::editing(src, &w, image(stream), t)
        }
        4 => {
            let src = image(stream);
            ModelInput::reconstruction(src, image(stream), t)
        }
        _ => ModelInput::text_only(&words(stream)),
    }
}

/// Largest change of any text position before `cut` when every input at or
/// after `cut` is perturbed. Zero when text attends only backwards.
pub fn causal_leak<T: Real>(
    model: &Model<'_, T>,
    input: &ModelInput<T>,
    cut: usize,
    stream: &mut Stream,
) -> Result<f64> {
    let vocab = vocab_len().min(model.cfg.vocab_size);
    let mut changed = input.clone();
    let mut offset = 0;
    for seg in &mut changed.segments {
        match seg {
            SegmentInput::Text { ids, .. } => {
                for (i, id) in ids.iter_mut().enumerate() {
                    if offset + i >= cut {
                        *id = 4 + (id.saturating_sub(4) + 1 + stream.index(vocab - 5)) % (vocab - 4);
                    }
                }
                offset += ids.len();
            }
            SegmentInput::Image { tokens, .. } => {
                let (n, d) = tokens.matrix_dims();
                let data = tokens.data_mut();
                for r in 0..n {
                    if offset + r >= cut {
                        for v in &mut data[r * d..(r + 1) * d] {
                            *v = *v + T::of(0.5 + stream.normal());
                        }
                    }
                }
                offset += n;
            }
        }
    }
    let (a, b) = (hidden(model, input)?, hidden(model, &changed)?);
    let roles = input.layout()?.segment_of_positions();
    let layout = input.layout()?;
    let mut worst = 0.0f64;
    for (i, &s) in roles.iter().enumerate().take(cut) {
        if layout.segments[s].role.is_text() {
            worst = worst.max(row_diff(&a, &b, i, i));
        }
    }
    Ok(worst)
}

fn image_segment<T: Real>(input: &ModelInput<T>, role: Role) -> Result<(usize, usize)> {
    let mut offset = 0;
    for seg in &input.segments {
        match seg {
            SegmentInput::Image { role: r, tokens, .. } if *r == role => return Ok((offset, tokens.shape()[0])),
            SegmentInput::Image { tokens, .. } => offset += tokens.shape()[0],
            SegmentInput::Text { ids, .. } => offset += ids.len(),
        }
    }
    Err(Error::invalid(format!("no {role:?} segment")))
}

fn image_tokens_mut<T: Real>(input: &mut ModelInput<T>, role: Role) -> (&mut Tensor<T>, &mut Vec<usize>) {
    input
        .segments
        .iter_mut()
        .find_map(|s| match s {
            SegmentInput::Image {
                role: r,
                tokens,
                positions,
                ..
            } if *r == role => Some((tokens, positions)),
            _ => None,
        })
        .expect("segment located by image_segment")
}

/// Smallest change, over every (perturbed patch, observed patch) pair within
/// the `role` image segment. Positive when each patch sees every other.
pub fn min_image_dependence<T: Real>(model: &Model<'_, T>, input: &ModelInput<T>, role: Role) -> Result<f64> {
    let (offset, n) = image_segment(input, role)?;
    let base = hidden(model, input)?;
    let mut least = f64::INFINITY;
    for k in 0..n {
        let mut changed = input.clone();
        let (tokens, _) = image_tokens_mut(&mut changed, role);
        let d = tokens.shape()[1];
        for v in &mut tokens.data_mut()[k * d..(k + 1) * d] {
            *v = *v + T::of(0.5);
        }
        let h = hidden(model, &changed)?;
        for r in 0..n {
            least = least.min(row_diff(&base, &h, offset + r, offset + r));
        }
    }
    Ok(least)
}

/// Swaps patches `a` and `b` of the `role` segment together with their grid
/// positions and returns the largest deviation from the correspondingly
/// permuted original hidden states.
pub fn permutation_error<T: Real>(
    model: &Model<'_, T>,
    input: &ModelInput<T>,
    role: Role,
    a: usize,
    b: usize,
) -> Result<f64> {
    let (offset, n) = image_segment(input, role)?;
    if a >= n || b >= n {
        return Err(Error::invalid(format!("patch index out of range for {n} patches")));
    }
    let mut swapped = input.clone();
    let (tokens, positions) = image_tokens_mut(&mut swapped, role);
    let d = tokens.shape()[1];
    let data = tokens.data_mut();
    for c in 0..d {
        data.swap(a * d + c, b * d + c);
    }
    positions.swap(a, b);
    let (h0, h1) = (hidden(model, input)?, hidden(model, &swapped)?);
    let perm = |r: usize| match r {
        r if r == offset + a => offset + b,
        r if r == offset + b => offset + a,
        r => r,
    };
    Ok((0..input.total_len()).fold(0.0f64, |m, r| m.max(row_diff(&h1, &h0, r, perm(r)))))
}

/// The image role probed for full dependence on `input`.
pub fn probe_role<T>(input: &ModelInput<T>) -> Option<Role> {
    match input.task {
        Task::Generation | Task::Editing | Task::Reconstruction => Some(Role::ImageNoisy),
        Task::Understanding => Some(Role::ImageCondition),
        Task::TextOnly => None,
    }
}

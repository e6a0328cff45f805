//! Autoregressive text decoding with the language-model head.

use crate::data::tokenizer::EOS;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Real;

use super::backbone::Model;
use super::input::{ModelInput, SegmentInput};

/// Chooses the next token from a row of logits.
pub trait TokenPicker: Send + Sync {
    fn name(&self) -> &'static str;
    fn pick(&self, logits: &[f64], stream: &mut Stream) -> usize;
}

/// Arg-max; ties go to the lowest id.
#[derive(Clone, Copy, Debug, Default)]
pub struct Greedy;

impl TokenPicker for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn pick(&self, logits: &[f64], _stream: &mut Stream) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Samples from `softmax(logits / tau)`.
#[derive(Clone, Copy, Debug)]
pub struct Temperature {
    pub tau: f64,
}

impl TokenPicker for Temperature {
    fn name(&self) -> &'static str {
        "temperature"
    }

    fn pick(&self, logits: &[f64], stream: &mut Stream) -> usize {
        let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let w: Vec<f64> = logits.iter().map(|&l| ((l - mx) / self.tau).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut u = stream.uniform() * z;
        for (i, &wi) in w.iter().enumerate() {
            if u < wi {
                return i;
            }
            u -= wi;
        }
        logits.len() - 1
    }
}

/// Extends the final text segment of `prefix` one token at a time until EOS
/// or `max_new` tokens. The returned ids exclude the EOS.
pub fn decode_text<T: Real>(
    model: &Model<'_, T>,
    prefix: &ModelInput<T>,
    stream: &mut Stream,
    max_new: usize,
    picker: &dyn TokenPicker,
) -> Result<Vec<usize>> {
    if !matches!(prefix.segments.last(), Some(SegmentInput::Text { .. })) {
        return Err(Error::invalid("decoding prefix must end with a text segment"));
    }
    let mut input = prefix.clone();
    let mut out = Vec::new();
    while out.len() < max_new {
        let mut g = model.graph();
        let fwd = model.run(&mut g, &input)?;
        let last = g.slice_rows(fwd.hidden, input.total_len() - 1, 1)?;
        let logits = model.lm_logits(&mut g, last)?;
        let row = g.value(logits).to_f64_vec();
        let id = picker.pick(&row, stream);
        if id == EOS {
            break;
        }
        out.push(id);
        if let Some(SegmentInput::Text { ids, .. }) = input.segments.last_mut() {
            ids.push(id);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::layout::Role;
    use crate::model::params::init_params;

    #[test]
    fn greedy_takes_first_maximum() {
        let mut s = Stream::new(0);
        assert_eq!(Greedy.pick(&[1.0, 3.0, 3.0, 2.0], &mut s), 1);
    }

    #[test]
    fn temperature_tracks_probabilities() {
        let mut s = Stream::new(1);
        let t = Temperature { tau: 1.0 };
        let logits = [0.0, 2f64.ln()];
        let n = 20_000;
        let ones = (0..n).filter(|_| t.pick(&logits, &mut s) == 1).count();
        assert!((ones as f64 / n as f64 - 2.0 / 3.0).abs() < 0.015);
    }

    #[test]
    fn decoding_is_bounded_and_repeatable() {
        let cfg = ModelConfig::gradcheck();
        let p = init_params::<f64>(&cfg, &mut Stream::new(2)).unwrap();
        let m = Model::new(&cfg, &p).unwrap();
        let prefix = ModelInput {
            task: crate::data::Task::TextOnly,
            segments: vec![SegmentInput::text(Role::TextTarget, vec![1])],
            t: None,
        };
        assert!(decode_text(&m, &prefix, &mut Stream::new(0), 0, &Greedy)
            .unwrap()
            .is_empty());
        let a = decode_text(&m, &prefix, &mut Stream::new(0), 6, &Greedy).unwrap();
        let b = decode_text(&m, &prefix, &mut Stream::new(9), 6, &Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert!(a.iter().all(|&id| id < cfg.vocab_size));
    }
}

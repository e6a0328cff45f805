//! Closed word-level vocabulary.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

const WORDS: &[&str] = &[
    "a",
    "and",
    "in",
    "the",
    "on",
    "to",
    "is",
    "small",
    "large",
    "little",
    "big",
    "red",
    "green",
    "blue",
    "yellow",
    "purple",
    "white",
    "circle",
    "square",
    "triangle",
    "top",
    "bottom",
    "left",
    "right",
    "black",
    "gray",
    "make",
    "move",
    "remove",
    "add",
    "what",
    "color",
    "shape",
    "how",
    "many",
    "objects",
    "are",
    "there",
    "one",
    "two",
    "nothing",
    "has",
    "three",
    "four",
    "no",
    "corners",
    "above",
    "below",
    "not",
    "background",
];

/// Number of ids the tokenizer can emit.
pub fn vocab_len() -> usize {
    SPECIALS.len() + WORDS.len()
}

pub fn word(id: usize) -> Option<&'static str> {
    if id < SPECIALS.len() {
        Some(SPECIALS[id])
    } else {
        WORDS.get(id - SPECIALS.len()).copied()
    }
}

pub fn id_of(w: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|&v| v == w)
        .map(|i| i + SPECIALS.len())
        .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
}

/// Word ids without specials.
pub fn encode_words(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(id_of).collect()
}

/// `[BOS, words..., EOS]`.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![BOS];
    ids.extend(encode_words(text)?);
    ids.push(EOS);
    Ok(ids)
}

/// Space-joined words; special tokens are dropped.
pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| id >= SPECIALS.len())
        .filter_map(|&id| word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grammar::{all_qa_pairs, canonical_caption, instruction, random_edit, text_only_sentence};
    use crate::data::scene::{gen_scene, Scene};
    use crate::rng::Stream;

    #[test]
    fn vocabulary_is_unique_and_small() {
        let mut w: Vec<&str> = WORDS.to_vec();
        w.sort_unstable();
        w.dedup();
        assert_eq!(w.len(), WORDS.len());
        assert!(vocab_len() <= 64);
    }

    #[test]
    fn empty_text() {
        assert_eq!(tokenize("").unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        assert!(matches!(tokenize("a red dragon"), Err(Error::OutOfVocabulary(w)) if w == "dragon"));
    }

    #[test]
    fn grammar_round_trips() {
        let mut st = Stream::new(4);
        let mut strings = Vec::new();
        for s in Scene::all_single_object() {
            strings.push(canonical_caption(&s));
            strings.extend(all_qa_pairs(&s).into_iter().flat_map(|(_, q, a)| [q, a]));
        }
        for i in 0..500 {
            let s = gen_scene(&mut st, 1 + i % 2);
            strings.push(canonical_caption(&s));
            strings.push(instruction(&s, &random_edit(&s, &mut st)));
            strings.push(text_only_sentence(&mut st));
        }
        for s in strings {
            let ids = tokenize(&s).unwrap();
            assert!(ids.iter().all(|&i| i < vocab_len()));
            assert_eq!(detokenize(&ids), s);
        }
    }
}

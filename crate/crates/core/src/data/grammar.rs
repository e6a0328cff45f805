//! Templated captions, questions, edit instructions, and text-only sentences.
//!
//! Canonical captions read `a <size> <color> <shape> in the <row> <col>`,
//! objects joined by `and`, followed by `on <background>`. The varied style
//! swaps in size synonyms and may list two objects in either order; both
//! styles parse back to the same scene.

use serde::{Deserialize, Serialize};

use super::scene::{Background, Cell, Color, Object, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionStyle {
    #[default]
    Canonical,
    Varied,
}

fn size_word(size: Size, varied: bool) -> &'static str {
    match (size, varied) {
        (Size::Small, false) => "small",
        (Size::Large, false) => "large",
        (Size::Small, true) => "little",
        (Size::Large, true) => "big",
    }
}

fn parse_size(w: &str) -> Option<Size> {
    match w {
        "small" | "little" => Some(Size::Small),
        "large" | "big" => Some(Size::Large),
        _ => None,
    }
}

fn object_phrase(o: &Object, varied: bool) -> String {
    let (v, h) = o.cell.words();
    format!(
        "a {} {} {} in the {v} {h}",
        size_word(o.size, varied),
        o.color.word(),
        o.shape.word()
    )
}

pub fn canonical_caption(scene: &Scene) -> String {
    let objs: Vec<String> = scene.objects.iter().map(|o| object_phrase(o, false)).collect();
    format!("{} on {}", objs.join(" and "), scene.background.word())
}

/// Caption for `scene` in the requested style. Only the varied style consumes randomness.
pub fn caption(scene: &Scene, style: CaptionStyle, stream: &mut Stream) -> String {
    match style {
        CaptionStyle::Canonical => canonical_caption(scene),
        CaptionStyle::Varied => {
            let mut objs: Vec<String> = scene
                .objects
                .iter()
                .map(|o| object_phrase(o, stream.bernoulli(0.5)))
                .collect();
            if objs.len() == 2 && stream.bernoulli(0.5) {
                objs.swap(0, 1);
            }
            format!("{} on {}", objs.join(" and "), scene.background.word())
        }
    }
}

fn expect<'a>(words: &mut impl Iterator<Item = &'a str>, want: &str) -> Result<()> {
    match words.next() {
        Some(w) if w == want => Ok(()),
        other => Err(Error::Parse(format!("expected `{want}`, found {other:?}"))),
    }
}

fn next_word<'a>(words: &mut impl Iterator<Item = &'a str>, what: &str) -> Result<&'a str> {
    words
        .next()
        .ok_or_else(|| Error::Parse(format!("caption ended before {what}")))
}

fn parse_object<'a>(words: &mut impl Iterator<Item = &'a str>) -> Result<Object> {
    expect(words, "a")?;
    let size = parse_size(next_word(words, "size")?).ok_or_else(|| Error::Parse("bad size word".into()))?;
    let color = Color::from_word(next_word(words, "color")?).ok_or_else(|| Error::Parse("bad color word".into()))?;
    let shape = Shape::from_word(next_word(words, "shape")?).ok_or_else(|| Error::Parse("bad shape word".into()))?;
    expect(words, "in")?;
    expect(words, "the")?;
    let v = next_word(words, "row")?;
    let h = next_word(words, "column")?;
    let cell = Cell::from_words(v, h).ok_or_else(|| Error::Parse(format!("bad cell `{v} {h}`")))?;
    Ok(Object {
        shape,
        color,
        cell,
        size,
    })
}

/// Inverse of [`caption`] for either style.
pub fn parse_caption(text: &str) -> Result<Scene> {
    let mut words = text.split_whitespace().peekable();
    let mut objects = vec![parse_object(&mut words)?];
    loop {
        match words.next() {
            Some("and") => objects.push(parse_object(&mut words)?),
            Some("on") => break,
            other => return Err(Error::Parse(format!("expected `and` or `on`, found {other:?}"))),
        }
    }
    let bg = next_word(&mut words, "background")?;
    let background = Background::from_word(bg).ok_or_else(|| Error::Parse(format!("bad background `{bg}`")))?;
    if let Some(extra) = words.next() {
        return Err(Error::Parse(format!("trailing word `{extra}`")));
    }
    Scene::new(objects, background).ok_or_else(|| Error::Parse("objects share a cell".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QaKind {
    ColorOfShape,
    ShapeAtCell,
    CountObjects,
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        _ => "nothing",
    }
}

/// Every question answerable from `scene` with its single-word answer.
pub fn all_qa_pairs(scene: &Scene) -> Vec<(QaKind, String, String)> {
    let mut out = Vec::new();
    for o in &scene.objects {
        let unique = scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1;
        if unique {
            out.push((
                QaKind::ColorOfShape,
                format!("what color is the {}", o.shape.word()),
                o.color.word().to_string(),
            ));
        }
    }
    for o in &scene.objects {
        let (v, h) = o.cell.words();
        out.push((
            QaKind::ShapeAtCell,
            format!("what shape is in the {v} {h}"),
            o.shape.word().to_string(),
        ));
    }
    out.push((
        QaKind::CountObjects,
        "how many objects are there".to_string(),
        count_word(scene.objects.len()).to_string(),
    ));
    out
}

/// A question and answer drawn uniformly over question kinds, then over instances.
pub fn qa_pair(scene: &Scene, stream: &mut Stream) -> (String, String) {
    let all = all_qa_pairs(scene);
    let mut kinds: Vec<QaKind> = all.iter().map(|q| q.0).collect();
    kinds.dedup();
    let kind = kinds[stream.index(kinds.len())];
    let of_kind: Vec<_> = all.into_iter().filter(|q| q.0 == kind).collect();
    let (_, q, a) = of_kind[stream.index(of_kind.len())].clone();
    (q, a)
}

/// An atomic scene edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EditOp {
    Recolor { cell: Cell, color: Color },
    Move { from: Cell, to: Cell },
    Remove { cell: Cell },
    Add { object: Object },
}

/// Shortest unambiguous reference to the object in `cell`.
fn reference(scene: &Scene, cell: Cell) -> String {
    let o = scene.object_at(cell).expect("object present");
    let same_shape: Vec<&Object> = scene.objects.iter().filter(|p| p.shape == o.shape).collect();
    if same_shape.len() == 1 {
        format!("the {}", o.shape.word())
    } else if same_shape.iter().filter(|p| p.color == o.color).count() == 1 {
        format!("the {} {}", o.color.word(), o.shape.word())
    } else {
        let (v, h) = cell.words();
        format!("the {} in the {v} {h}", o.shape.word())
    }
}

pub fn instruction(scene: &Scene, op: &EditOp) -> String {
    match *op {
        EditOp::Recolor { cell, color } => format!("make {} {}", reference(scene, cell), color.word()),
        EditOp::Move { from, to } => {
            let (v, h) = to.words();
            format!("move {} to the {v} {h}", reference(scene, from))
        }
        EditOp::Remove { cell } => format!("remove {}", reference(scene, cell)),
        EditOp::Add { object } => format!("add {}", object_phrase(&object, false)),
    }
}

pub fn apply_edit(scene: &Scene, op: &EditOp) -> Option<Scene> {
    let mut objects = scene.objects.clone();
    match *op {
        EditOp::Recolor { cell, color } => {
            let o = objects.iter_mut().find(|o| o.cell == cell)?;
            if o.color == color {
                return None;
            }
            o.color = color;
        }
        EditOp::Move { from, to } => {
            if scene.object_at(to).is_some() {
                return None;
            }
            objects.iter_mut().find(|o| o.cell == from)?.cell = to;
        }
        EditOp::Remove { cell } => {
            objects.retain(|o| o.cell != cell);
            if objects.len() == scene.objects.len() {
                return None;
            }
        }
        EditOp::Add { object } => {
            if scene.object_at(object.cell).is_some() {
                return None;
            }
            objects.push(object);
        }
    }
    Scene::new(objects, scene.background)
}

/// A random valid, non-identity edit of `scene`.
pub fn random_edit(scene: &Scene, stream: &mut Stream) -> EditOp {
    let mut kinds = vec![0, 1];
    if scene.objects.len() == 2 {
        kinds.push(2);
    } else {
        kinds.push(3);
    }
    let free = scene.free_cells();
    let target = scene.objects[stream.index(scene.objects.len())];
    match kinds[stream.index(kinds.len())] {
        0 => {
            let colors: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != target.color).collect();
            EditOp::Recolor {
                cell: target.cell,
                color: colors[stream.index(colors.len())],
            }
        }
        1 => EditOp::Move {
            from: target.cell,
            to: free[stream.index(free.len())],
        },
        2 => EditOp::Remove { cell: target.cell },
        _ => EditOp::Add {
            object: Object {
                shape: Shape::ALL[stream.index(Shape::ALL.len())],
                color: Color::ALL[stream.index(Color::ALL.len())],
                cell: free[stream.index(free.len())],
                size: Size::ALL[stream.index(Size::ALL.len())],
            },
        },
    }
}

/// Short grammatical sentence with no image.
pub fn text_only_sentence(stream: &mut Stream) -> String {
    match stream.index(6) {
        0 => format!("{} is a color", Color::ALL[stream.index(Color::ALL.len())].word()),
        1 => format!("a {} is a shape", Shape::ALL[stream.index(Shape::ALL.len())].word()),
        2 => match Shape::ALL[stream.index(Shape::ALL.len())] {
            Shape::Square => "a square has four corners".into(),
            Shape::Triangle => "a triangle has three corners".into(),
            Shape::Circle => "a circle has no corners".into(),
        },
        3 => if stream.bernoulli(0.5) {
            "top is above bottom"
        } else {
            "bottom is below top"
        }
        .into(),
        4 => if stream.bernoulli(0.5) {
            "left is not right"
        } else {
            "right is not left"
        }
        .into(),
        _ => format!("{} is a background", Background::ALL[stream.index(2)].word()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::gen_scene;
    use std::collections::HashSet;

    #[test]
    fn single_object_captions_are_short() {
        for s in Scene::all_single_object() {
            assert!(canonical_caption(&s).split_whitespace().count() <= 10);
        }
    }

    #[test]
    fn captions_parse_back_over_the_single_object_space() {
        let mut st = Stream::new(1);
        for s in Scene::all_single_object() {
            assert_eq!(parse_caption(&canonical_caption(&s)).unwrap(), s);
            assert_eq!(parse_caption(&caption(&s, CaptionStyle::Varied, &mut st)).unwrap(), s);
        }
    }

    #[test]
    fn canonical_captions_are_unique() {
        let all = Scene::all_single_object();
        let caps: HashSet<String> = all.iter().map(canonical_caption).collect();
        assert_eq!(caps.len(), all.len());
    }

    #[test]
    fn two_object_captions_round_trip() {
        let mut st = Stream::new(2);
        for _ in 0..500 {
            let s = gen_scene(&mut st, 2);
            assert_eq!(parse_caption(&caption(&s, CaptionStyle::Varied, &mut st)).unwrap(), s);
        }
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(parse_caption("a large red circle in the top").is_err());
        assert!(parse_caption("a large red blob in the top left on black").is_err());
        assert!(parse_caption("a large red circle in the top left on black extra").is_err());
    }

    #[test]
    fn qa_oracle_answers() {
        let scene = parse_caption("a large red circle in the top left on black").unwrap();
        let qa = all_qa_pairs(&scene);
        assert!(qa.iter().any(|(_, q, a)| q == "what color is the circle" && a == "red"));
        let two =
            parse_caption("a small blue square in the top left and a large red circle in the bottom right on gray")
                .unwrap();
        let count = all_qa_pairs(&two)
            .into_iter()
            .find(|q| q.0 == QaKind::CountObjects)
            .unwrap();
        assert_eq!(count.2, "two");
    }

    #[test]
    fn edits_are_valid_and_never_identity() {
        let mut st = Stream::new(3);
        for i in 0..1000 {
            let s = gen_scene(&mut st, 1 + i % 2);
            let op = random_edit(&s, &mut st);
            let t = apply_edit(&s, &op).expect("valid edit");
            assert!(t.is_valid());
            assert_ne!(t, s);
        }
    }

    #[test]
    fn recolor_instruction_names_the_shape() {
        let s = parse_caption("a large red circle in the top left on black").unwrap();
        let op = EditOp::Recolor {
            cell: Cell::TopLeft,
            color: Color::Blue,
        };
        assert_eq!(instruction(&s, &op), "make the circle blue");
    }
}

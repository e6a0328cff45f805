//! Reads scenes back out of pixels: nearest-palette segmentation, the
//! largest connected component per cell, and a shape classifier on that
//! component's bounding-box fill ratio and corner occupancy.

use serde::Serialize;

use crate::data::{Background, Cell, Color, Image, Scene, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Detected {
    pub cell: Cell,
    pub color: Color,
    pub shape: Shape,
    pub pixels: usize,
}

/// Per-attribute verdicts for one image against one scene.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompositionReport {
    pub detected: Vec<Detected>,
    /// Every expected shape is present.
    pub shape: bool,
    /// Every expected color is present.
    pub color: bool,
    /// Objects occupy exactly the expected cells.
    pub position: bool,
    /// The object count matches.
    pub count: bool,
    /// Each expected cell holds an object of the expected shape and color.
    pub binding: bool,
}

impl CompositionReport {
    pub fn passed(&self) -> bool {
        self.shape && self.color && self.position && self.count && self.binding
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Label {
    Object(Color),
    Background,
}

fn palette() -> Vec<([f64; 3], Label)> {
    let unit = |rgb: [u8; 3]| rgb.map(|c| c as f64 / 255.0);
    let mut p: Vec<_> = Color::ALL.iter().map(|&c| (unit(c.rgb()), Label::Object(c))).collect();
    p.extend(Background::ALL.iter().map(|b| (unit(b.rgb()), Label::Background)));
    p
}

fn labels(image: &Image) -> (usize, usize, Vec<Label>) {
    let [h, w, _] = image.shape() else {
        panic!("images are H x W x 3");
    };
    let pal = palette();
    let d = image.data();
    let labels = (0..h * w)
        .map(|i| {
            let px = [0, 1, 2].map(|k| (d[3 * i + k] as f64 + 1.0) / 2.0);
            let dist = |c: &[f64; 3]| (0..3).map(|k| (c[k] - px[k]).powi(2)).sum::<f64>();
            pal.iter().min_by(|a, b| dist(&a.0).total_cmp(&dist(&b.0))).unwrap().1
        })
        .collect();
    (*h, *w, labels)
}

/// Square, triangle, circle prototypes in (top corners, bottom corners, fill).
const PROTOTYPES: [(Shape, [f64; 3]); 3] = [
    (Shape::Square, [1.0, 1.0, 1.0]),
    (Shape::Triangle, [0.0, 1.0, 0.6]),
    (Shape::Circle, [0.0, 0.0, 0.8]),
];

fn classify(pixels: &[(usize, usize)]) -> Shape {
    let y0 = pixels.iter().map(|p| p.0).min().unwrap();
    let y1 = pixels.iter().map(|p| p.0).max().unwrap();
    let x0 = pixels.iter().map(|p| p.1).min().unwrap();
    let x1 = pixels.iter().map(|p| p.1).max().unwrap();
    let has = |y, x| pixels.contains(&(y, x)) as u8 as f64;
    let fill = pixels.len() as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    let f = [
        (has(y0, x0) + has(y0, x1)) / 2.0,
        (has(y1, x0) + has(y1, x1)) / 2.0,
        fill,
    ];
    let dist = |p: &[f64; 3]| (0..3).map(|k| (p[k] - f[k]).powi(2)).sum::<f64>();
    PROTOTYPES
        .iter()
        .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
        .unwrap()
        .0
}

/// Largest same-color 4-connected component of object pixels in each cell,
/// kept when it covers at least `max(3, cell area / 32)` pixels.
pub fn detect_objects(image: &Image) -> Vec<Detected> {
    let (h, w, labels) = labels(image);
    let mut out = Vec::new();
    for &cell in Cell::ALL {
        let (cy, cx, ch, cw) = cell.rect(h, w);
        let min_px = (ch * cw / 32).max(3);
        let mut seen = vec![false; ch * cw];
        let mut best: Option<(Color, Vec<(usize, usize)>)> = None;
        for start in 0..ch * cw {
            let Label::Object(color) = labels[(cy + start / cw) * w + cx + start % cw] else {
                continue;
            };
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(i) = stack.pop() {
                let (y, x) = (i / cw, i % cw);
                comp.push((cy + y, cx + x));
                let mut visit = |ny: usize, nx: usize| {
                    let j = ny * cw + nx;
                    if !seen[j] && labels[(cy + ny) * w + cx + nx] == Label::Object(color) {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < ch {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < cw {
                    visit(y, x + 1);
                }
            }
            if best.as_ref().is_none_or(|b| comp.len() > b.1.len()) {
                best = Some((color, comp));
            }
        }
        if let Some((color, comp)) = best.filter(|b| b.1.len() >= min_px) {
            out.push(Detected {
                cell,
                color,
                shape: classify(&comp),
                pixels: comp.len(),
            });
        }
    }
    out
}

/// Each expected value matched against a distinct detected one.
fn multiset_covered<K: PartialEq + Copy>(want: impl Iterator<Item = K>, have: impl Iterator<Item = K>) -> bool {
    let mut pool: Vec<K> = have.collect();
    want.into_iter().all(|k| match pool.iter().position(|&p| p == k) {
        Some(i) => {
            pool.swap_remove(i);
            true
        }
        None => false,
    })
}

pub fn compositional_check(image: &Image, scene: &Scene) -> CompositionReport {
    let detected = detect_objects(image);
    let mut want_cells: Vec<Cell> = scene.objects.iter().map(|o| o.cell).collect();
    let mut have_cells: Vec<Cell> = detected.iter().map(|d| d.cell).collect();
    want_cells.sort();
    have_cells.sort();
    CompositionReport {
        shape: multiset_covered(scene.objects.iter().map(|o| o.shape), detected.iter().map(|d| d.shape)),
        color: multiset_covered(scene.objects.iter().map(|o| o.color), detected.iter().map(|d| d.color)),
        position: want_cells == have_cells,
        count: detected.len() == scene.objects.len(),
        binding: scene.objects.iter().all(|o| {
            detected
                .iter()
                .any(|d| d.cell == o.cell && d.shape == o.shape && d.color == o.color)
        }),
        detected,
    }
}

//! Procedural scenes and their rasterisation.

use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

macro_rules! word_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    White => "white",
});

word_enum!(Size {
    Small => "small",
    Large => "large",
});

word_enum!(Background {
    Black => "black",
    Gray => "gray",
});

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Purple => [128, 0, 128],
            Color::White => [255, 255, 255],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::Black => [0, 0, 0],
            Background::Gray => [128, 128, 128],
        }
    }
}

/// One quadrant of the 2×2 layout grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Cell {
    pub const ALL: &'static [Cell] = &[Cell::TopLeft, Cell::TopRight, Cell::BottomLeft, Cell::BottomRight];

    pub fn row(self) -> usize {
        match self {
            Cell::TopLeft | Cell::TopRight => 0,
            _ => 1,
        }
    }

    pub fn col(self) -> usize {
        match self {
            Cell::TopLeft | Cell::BottomLeft => 0,
            _ => 1,
        }
    }

    pub fn from_rc(row: usize, col: usize) -> Cell {
        match (row, col) {
            (0, 0) => Cell::TopLeft,
            (0, _) => Cell::TopRight,
            (_, 0) => Cell::BottomLeft,
            _ => Cell::BottomRight,
        }
    }

    /// `("top", "left")` and so on.
    pub fn words(self) -> (&'static str, &'static str) {
        (
            if self.row() == 0 { "top" } else { "bottom" },
            if self.col() == 0 { "left" } else { "right" },
        )
    }

    pub fn from_words(v: &str, h: &str) -> Option<Cell> {
        let row = match v {
            "top" => 0,
            "bottom" => 1,
            _ => return None,
        };
        let col = match h {
            "left" => 0,
            "right" => 1,
            _ => return None,
        };
        Some(Cell::from_rc(row, col))
    }

    /// Pixel rectangle `(y0, x0, h, w)` of this cell in an `H × W` image.
    pub fn rect(self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (ch, cw) = (height / 2, width / 2);
        (self.row() * ch, self.col() * cw, ch, cw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
    pub size: Size,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub background: Background,
}

impl Scene {
    /// Scene with objects sorted by cell; `None` if cells collide or the count is not 1–2.
    pub fn new(mut objects: Vec<Object>, background: Background) -> Option<Scene> {
        objects.sort_by_key(|o| o.cell);
        if objects.is_empty() || objects.len() > 2 {
            return None;
        }
        if objects.windows(2).any(|w| w[0].cell == w[1].cell) {
            return None;
        }
        Some(Scene { objects, background })
    }

    pub fn is_valid(&self) -> bool {
        !self.objects.is_empty() && self.objects.len() <= 2 && self.objects.windows(2).all(|w| w[0].cell < w[1].cell)
    }

    pub fn object_at(&self, cell: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        Cell::ALL
            .iter()
            .copied()
            .filter(|c| self.object_at(*c).is_none())
            .collect()
    }

    /// Every one-object scene (shape × color × cell × size × background).
    pub fn all_single_object() -> Vec<Scene> {
        let mut out = Vec::new();
        for &background in Background::ALL {
            for &shape in Shape::ALL {
                for &color in Color::ALL {
                    for &cell in Cell::ALL {
                        for &size in Size::ALL {
                            out.push(Scene {
                                objects: vec![Object {
                                    shape,
                                    color,
                                    cell,
                                    size,
                                }],
                                background,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn pick<T: Copy>(stream: &mut Stream, items: &[T]) -> T {
    items[stream.index(items.len())]
}

/// Uniform random scene with `n_objects` (1 or 2) objects in distinct cells.
pub fn gen_scene(stream: &mut Stream, n_objects: usize) -> Scene {
    assert!((1..=2).contains(&n_objects), "scenes hold one or two objects");
    let background = pick(stream, Background::ALL);
    let mut cells = Cell::ALL.to_vec();
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let cell = cells.remove(stream.index(cells.len()));
        objects.push(Object {
            shape: pick(stream, Shape::ALL),
            color: pick(stream, Color::ALL),
            cell,
            size: pick(stream, Size::ALL),
        });
    }
    Scene::new(objects, background).expect("distinct cells")
}

/// 8-bit channel value to the `[-1, 1]` pixel convention.
pub fn to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Inverse of [`to_unit`], clamped and rounded.
pub fn to_byte(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Whether pixel `(y, x)` (pixel-centre sampling) falls inside `obj`.
pub fn covers(obj: &Object, height: usize, width: usize, y: usize, x: usize) -> bool {
    let (y0, x0, ch, cw) = obj.cell.rect(height, width);
    let extent = ch.min(cw) as f32;
    let r = match obj.size {
        Size::Large => 0.4 * extent,
        Size::Small => 0.25 * extent,
    };
    let cy = y0 as f32 + ch as f32 / 2.0;
    let cx = x0 as f32 + cw as f32 / 2.0;
    let dy = y as f32 + 0.5 - cy;
    let dx = x as f32 + 0.5 - cx;
    match obj.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        // Apex up, base on the bottom edge of the bounding square.
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Hard-edged rendering of `scene` as an `H × W × 3` image in `[-1, 1]`.
pub fn rasterize(scene: &Scene, height: usize, width: usize) -> Image {
    assert!(height >= 16 && width >= 16, "images are at least 16x16");
    let bg = scene.background.rgb();
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let rgb = scene
                .objects
                .iter()
                .find(|o| covers(o, height, width, y, x))
                .map_or(bg, |o| o.color.rgb());
            data.extend(rgb.iter().map(|&p| to_unit(p)));
        }
    }
    Tensor::from_parts(vec![height, width, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_scenes_are_valid() {
        let mut s = Stream::new(11);
        for _ in 0..200 {
            assert_eq!(gen_scene(&mut s, 1).objects.len(), 1);
            let two = gen_scene(&mut s, 2);
            assert_eq!(two.objects.len(), 2);
            assert!(two.is_valid());
            assert_ne!(two.objects[0].cell, two.objects[1].cell);
        }
    }

    #[test]
    fn color_frequencies_are_uniform() {
        let mut s = Stream::new(12);
        let mut counts = [0usize; 6];
        let n = 10_000;
        for _ in 0..n {
            let sc = gen_scene(&mut s, 1);
            counts[Color::ALL.iter().position(|&c| c == sc.objects[0].color).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn rasterize_is_deterministic_and_centred() {
        let scene = Scene::new(
            vec![Object {
                shape: Shape::Circle,
                color: Color::Red,
                cell: Cell::TopLeft,
                size: Size::Large,
            }],
            Background::Black,
        )
        .unwrap();
        let a = rasterize(&scene, 16, 16);
        let b = rasterize(&scene, 16, 16);
        assert_eq!(a.data(), b.data());
        // centre of the top-left cell: pixel (4, 4)
        let i = (4 * 16 + 4) * 3;
        assert_eq!(&a.data()[i..i + 3], &[1.0, -1.0, -1.0]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn background_only_is_constant() {
        let scene = Scene {
            objects: vec![],
            background: Background::Gray,
        };
        let img = rasterize(&scene, 16, 16);
        let first = img.data()[0];
        assert!(img.data().iter().all(|&v| v == first));
    }

    #[test]
    fn shapes_stay_inside_their_cell() {
        for scene in Scene::all_single_object() {
            let o = scene.objects[0];
            let (y0, x0, h, w) = o.cell.rect(16, 16);
            let mut count = 0;
            for y in 0..16 {
                for x in 0..16 {
                    if covers(&o, 16, 16, y, x) {
                        count += 1;
                        assert!(y >= y0 && y < y0 + h && x >= x0 && x < x0 + w);
                    }
                }
            }
            assert!(count >= 8, "{o:?} covers {count}");
        }
    }

    #[test]
    fn byte_conversion_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(to_byte(to_unit(p)), p);
        }
    }
}

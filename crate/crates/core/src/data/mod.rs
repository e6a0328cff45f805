//! Synthetic shapes-and-captions corpus.

pub mod export;
pub mod grammar;
pub mod mixture;
pub mod scene;
pub mod tokenizer;

pub use grammar::{canonical_caption, caption, parse_caption, CaptionStyle, EditOp, QaKind};
pub use mixture::{sample_batch, DataConfig, MixtureConfig, SampleRecord, SceneSource, Stage, Task};
pub use scene::{gen_scene, rasterize, Background, Cell, Color, Image, Object, Scene, Shape, Size};

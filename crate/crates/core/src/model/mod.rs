//! The unified transformer over mixed text and image-patch sequences.

pub mod backbone;
pub mod config;
pub mod decode;
pub mod input;
pub mod layout;
pub mod params;
pub mod probe;

pub use backbone::{timestep_features, Forward, Model};
pub use config::ModelConfig;
pub use decode::{decode_text, Greedy, Temperature, TokenPicker};
pub use input::{ModelInput, SegmentInput};
pub use layout::{build_attention_mask, Role, Segment, SequenceLayout};
pub use params::{check_schema, init_params, param_schema};

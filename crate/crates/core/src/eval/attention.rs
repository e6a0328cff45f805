//! Keyword-to-image attention maps.

use std::path::Path;

use serde::Serialize;

use crate::data::tokenizer::{encode_words, BOS};
use crate::data::{Image, Task};
use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::model::{Model, ModelInput, Role, SegmentInput};
use crate::patch::patchify;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnMap {
    pub layer: usize,
    /// `None` for the mean over heads.
    pub head: Option<usize>,
    /// Sequence positions of the keyword's query rows.
    pub positions: Vec<usize>,
    /// Attention over the image-condition patches, row-major, summing to 1.
    pub weights: Vec<f64>,
}

impl AttnMap {
    pub fn argmax(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    }
}

/// Runs `[image_condition(image), text(BOS prompt)]` and extracts, for every
/// layer and head plus the head mean, the keyword rows' attention restricted
/// to the image patches and renormalised.
pub fn attention_dump<T: Real>(
    model: &Model<'_, T>,
    image: &Image,
    prompt: &str,
    keyword: &str,
) -> Result<Vec<AttnMap>> {
    let words = encode_words(prompt)?;
    let kw = encode_words(keyword)?;
    let &[kw] = kw.as_slice() else {
        return Err(Error::invalid("keyword must be a single word"));
    };
    let n = model.cfg.grid().token_count();
    let positions: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, &w)| w == kw)
        .map(|(i, _)| n + 1 + i)
        .collect();
    if positions.is_empty() {
        return Err(Error::KeywordAbsent(keyword.to_string()));
    }
    let mut text = vec![BOS];
    text.extend(words);
    let input = ModelInput {
        task: Task::Understanding,
        segments: vec![
            SegmentInput::image(Role::ImageCondition, patchify(&image.cast::<T>(), &model.cfg.grid())?),
            SegmentInput::text(Role::TextCondition, text),
        ],
        t: None,
    };
    let mut g = model.graph();
    let fwd = model.run(&mut g, &input)?;
    let len = input.total_len();
    let mut out = Vec::new();
    for (layer, heads) in fwd.attention.iter().enumerate() {
        let mut mean = vec![0.0; n];
        for (head, &p) in heads.iter().enumerate() {
            let probs = g.value(p).to_f64_vec();
            let mut w = vec![0.0; n];
            for &q in &positions {
                for (k, wk) in w.iter_mut().enumerate() {
                    *wk += probs[q * len + k];
                }
            }
            normalise(&mut w);
            for (m, v) in mean.iter_mut().zip(&w) {
                *m += v / heads.len() as f64;
            }
            out.push(AttnMap {
                layer,
                head: Some(head),
                positions: positions.clone(),
                weights: w,
            });
        }
        normalise(&mut mean);
        out.push(AttnMap {
            layer,
            head: None,
            positions: positions.clone(),
            weights: mean,
        });
    }
    Ok(out)
}

fn normalise(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|v| *v = u);
    }
}

/// Nearest-neighbour upsampling of a patch-grid map to `size × size`
/// pixels, scaled so the largest weight is white.
pub fn heatmap(map: &AttnMap, grid_side: usize, size: usize) -> Vec<f64> {
    let peak = map.weights.iter().cloned().fold(0.0, f64::max);
    let patch = size / grid_side;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let i = (y / patch).min(grid_side - 1) * grid_side + (x / patch).min(grid_side - 1);
            out.push(if peak > 0.0 { map.weights[i] / peak } else { 0.0 });
        }
    }
    out
}

/// Writes one PGM per map as `attn_l{layer}_{head|mean}.pgm` in `dir`.
pub fn write_heatmaps(dir: &Path, maps: &[AttnMap], grid_side: usize, size: usize) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.iter()
        .map(|m| {
            let head = m.head.map_or("mean".to_string(), |h| format!("h{h}"));
            let path = dir.join(format!("attn_l{}_{head}.pgm", m.layer));
            write_pgm(&path, size, size, &heatmap(m, grid_side, size))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_caption, rasterize};
    use crate::model::{init_params, ModelConfig};
    use crate::rng::Stream;
    use crate::tensor::Tensor;

    fn setup(seed: u64) -> (ModelConfig, crate::autodiff::ParamStore<f64>, Image) {
        let cfg = ModelConfig::gradcheck();
        let p = init_params(&cfg, &mut Stream::new(seed)).unwrap();
        let scene = parse_caption("a large red square in the top right on black").unwrap();
        (cfg, p, rasterize(&scene, 16, 16))
    }

    #[test]
    fn maps_are_distributions() {
        let (cfg, p, img) = setup(1);
        let m = Model::new(&cfg, &p).unwrap();
        let maps = attention_dump(&m, &img, "a red square and a red circle", "red").unwrap();
        assert_eq!(maps.len(), cfg.n_layers * (cfg.n_heads + 1));
        for map in &maps {
            assert_eq!(map.positions, vec![16 + 2, 16 + 6]);
            assert!((map.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(map.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn zero_queries_give_flat_maps() {
        let (cfg, mut p, img) = setup(2);
        for l in 0..cfg.n_layers {
            let id = p.id(&format!("layers.{l}.wq")).unwrap();
            *p.tensor_mut(id) = Tensor::zeros(p.tensor(id).shape());
        }
        let m = Model::new(&cfg, &p).unwrap();
        for map in attention_dump(&m, &img, "a red square", "square").unwrap() {
            assert!(map.weights.iter().all(|&w| (w - 1.0 / 16.0).abs() < 1e-12));
        }
    }

    #[test]
    fn missing_keyword_is_reported() {
        let (cfg, p, img) = setup(3);
        let m = Model::new(&cfg, &p).unwrap();
        let err = attention_dump(&m, &img, "a red square", "blue").unwrap_err();
        assert!(matches!(err, Error::KeywordAbsent(_)));
    }

    #[test]
    fn heatmaps_upsample_and_peak_at_one() {
        let map = AttnMap {
            layer: 0,
            head: None,
            positions: vec![0],
            weights: (0..16).map(|i| if i == 5 { 0.4 } else { 0.04 }).collect(),
        };
        let h = heatmap(&map, 4, 16);
        assert_eq!(h.len(), 256);
        assert_eq!(h[4 * 16 + 4], 1.0);
        assert!((h[0] - 0.1).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let paths = write_heatmaps(dir.path(), &[map], 4, 16).unwrap();
        assert!(paths[0].ends_with("attn_l0_mean.pgm"));
    }
}

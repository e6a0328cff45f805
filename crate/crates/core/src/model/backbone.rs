//! Embedding, the pre-norm transformer stack, and the two output heads.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::patch::unpatchify;
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;
use super::input::{ModelInput, SegmentInput};
use super::layout::{build_attention_mask, Role, SequenceLayout};
use super::params::ParamIds;

const LN_EPS: f64 = 1e-5;

/// A parameter store bound to its config, ready to build graphs.
pub struct Model<'p, T: Real> {
    pub cfg: ModelConfig,
    pub params: &'p ParamStore<T>,
    ids: ParamIds,
}

/// Result of one forward pass.
pub struct Forward {
    pub layout: SequenceLayout,
    /// Final-normed hidden states, `L × d_model`.
    pub hidden: Var,
    /// Attention probabilities per layer and head, each `L × L`.
    pub attention: Vec<Vec<Var>>,
}

/// `[sin(1000 t f_i), cos(1000 t f_i)]` with geometric frequencies.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl<'p, T: Real> Model<'p, T> {
    pub fn new(cfg: &ModelConfig, params: &'p ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            ids: ParamIds::resolve(cfg, params)?,
        })
    }

    pub fn graph(&self) -> Graph<'p, T> {
        Graph::with_params(self.params)
    }

    fn time_embedding(&self, g: &mut Graph<'p, T>, t: f64) -> Result<Var> {
        let d = self.cfg.d_model;
        let feats = g.constant(Tensor::from_f64(&[1, d], &timestep_features(t, d))?);
        let (w1, b1, w2, b2) = (
            g.param(self.ids.time_w1),
            g.param(self.ids.time_b1),
            g.param(self.ids.time_w2),
            g.param(self.ids.time_b2),
        );
        let h = g.matmul(feats, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    /// `L × d_model` input embeddings.
    ///
    /// Text rows are token plus absolute-position embeddings. Image rows are a
    /// linear patch projection (replaced by the mask embedding where masked)
    /// plus a learned grid-position embedding. The noisy image additionally
    /// gets the timestep embedding on every row.
    pub fn embed_sequence(&self, g: &mut Graph<'p, T>, input: &ModelInput<T>) -> Result<Var> {
        let layout = input.layout()?;
        let total = layout.total_len();
        if total > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.cfg.max_seq_len,
            });
        }
        let has_noisy = input.noisy_tokens().is_some();
        let t = match (has_noisy, input.t) {
            (true, Some(t)) => Some(t),
            (false, None) => None,
            (true, None) => return Err(Error::invalid("noisy image segment needs a timestep")),
            (false, Some(_)) => return Err(Error::invalid("timestep given without a noisy image segment")),
        };
        let grid = self.cfg.grid();
        let mut parts = Vec::with_capacity(input.segments.len());
        let mut offset = 0;
        for seg in &input.segments {
            let rows = match seg {
                SegmentInput::Text { ids, .. } => {
                    if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
                        return Err(Error::TokenOutOfRange {
                            id: bad,
                            vocab: self.cfg.vocab_size,
                        });
                    }
                    let table = g.param(self.ids.tok_emb);
                    let tok = g.gather(table, ids)?;
                    let pos_table = g.param(self.ids.text_pos);
                    let positions: Vec<usize> = (offset..offset + ids.len()).collect();
                    let pos = g.gather(pos_table, &positions)?;
                    g.add(tok, pos)?
                }
                SegmentInput::Image {
                    role,
                    tokens,
                    positions,
                    mask,
                } => {
                    if tokens.shape() != [grid.token_count(), grid.token_dim()] {
                        return Err(Error::ShapeMismatch {
                            op: "embed_image",
                            lhs: tokens.shape().to_vec(),
                            rhs: vec![grid.token_count(), grid.token_dim()],
                        });
                    }
                    let x = g.constant(tokens.clone());
                    let (w, b) = (g.param(self.ids.patch_w), g.param(self.ids.patch_b));
                    let content = g.matmul(x, w)?;
                    let content = g.add_row(content, b)?;
                    let mask_emb = g.param(self.ids.mask_emb);
                    let content = crate::masking::apply_mask(g, content, mask, mask_emb)?;
                    let pos_table = g.param(self.ids.img_pos);
                    let pos = g.gather(pos_table, positions)?;
                    let mut rows = g.add(content, pos)?;
                    if *role == Role::ImageNoisy {
                        let te = self.time_embedding(g, t.unwrap_or_default())?;
                        rows = g.add_row(rows, te)?;
                    }
                    rows
                }
            };
            offset += seg.len();
            parts.push(rows);
        }
        g.concat_rows(&parts)
    }

    /// Runs the transformer stack on `x` (`L × d_model`) under `layout`'s attention policy.
    pub fn forward(&self, g: &mut Graph<'p, T>, layout: &SequenceLayout, x: Var) -> Result<Forward> {
        let n = layout.total_len();
        if n > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.max_seq_len,
            });
        }
        if g.shape(x) != [n, self.cfg.d_model] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: g.shape(x).to_vec(),
                rhs: vec![n, self.cfg.d_model],
            });
        }
        let mask = build_attention_mask(layout);
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x;
        let mut attention = Vec::with_capacity(self.cfg.n_layers);
        for l in &self.ids.layers {
            let (g1, b1) = (g.param(l.ln1_g), g.param(l.ln1_b));
            let a = g.layer_norm(h, g1, b1, LN_EPS)?;
            let (wq, wk, wv) = (g.param(l.wq), g.param(l.wk), g.param(l.wv));
            let q = g.matmul(a, wq)?;
            let k = g.matmul(a, wk)?;
            let v = g.matmul(a, wv)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            let mut probs = Vec::with_capacity(self.cfg.n_heads);
            for hd in 0..self.cfg.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let p = g.softmax(s, Some(&mask))?;
                heads.push(g.matmul(p, vh)?);
                probs.push(p);
            }
            attention.push(probs);
            let o = g.concat_cols(&heads)?;
            let (wo, bo) = (g.param(l.wo), g.param(l.bo));
            let o = g.matmul(o, wo)?;
            let o = g.add_row(o, bo)?;
            h = g.add(h, o)?;

            let (g2, b2) = (g.param(l.ln2_g), g.param(l.ln2_b));
            let a = g.layer_norm(h, g2, b2, LN_EPS)?;
            let (w1, fb1, w2, fb2) = (g.param(l.ff_w1), g.param(l.ff_b1), g.param(l.ff_w2), g.param(l.ff_b2));
            let f = g.matmul(a, w1)?;
            let f = g.add_row(f, fb1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, fb2)?;
            h = g.add(h, f)?;
        }
        let (gf, bf) = (g.param(self.ids.ln_f_g), g.param(self.ids.ln_f_b));
        let hidden = g.layer_norm(h, gf, bf, LN_EPS)?;
        Ok(Forward {
            layout: layout.clone(),
            hidden,
            attention,
        })
    }

    /// Embeds and runs `input`.
    pub fn run(&self, g: &mut Graph<'p, T>, input: &ModelInput<T>) -> Result<Forward> {
        let x = self.embed_sequence(g, input)?;
        self.forward(g, &input.layout()?, x)
    }

    /// Vocabulary logits for each row of `hidden`.
    pub fn lm_logits(&self, g: &mut Graph<'p, T>, hidden: Var) -> Result<Var> {
        let (w, b) = (g.param(self.ids.lm_w), g.param(self.ids.lm_b));
        let z = g.matmul(hidden, w)?;
        g.add_row(z, b)
    }

    /// Next-token logits and mean cross-entropy over every text-target
    /// segment: row `i` of a segment predicts its id at `i + 1`.
    pub fn lm_logits_and_ce(&self, g: &mut Graph<'p, T>, fwd: &Forward, input: &ModelInput<T>) -> Result<(Var, Var)> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let offsets = fwd.layout.offsets();
        for (seg, &off) in input.segments.iter().zip(&offsets) {
            if let SegmentInput::Text {
                role: Role::TextTarget,
                ids,
            } = seg
            {
                if ids.len() < 2 {
                    return Err(Error::invalid("text target segment has nothing to predict"));
                }
                rows.push(g.slice_rows(fwd.hidden, off, ids.len() - 1)?);
                targets.extend_from_slice(&ids[1..]);
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("no text target segment"));
        }
        let h = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        let logits = self.lm_logits(g, h)?;
        let ce = g.cross_entropy(logits, &targets)?;
        Ok((logits, ce))
    }

    /// Clean-image prediction in token space, `token_count × token_dim`.
    pub fn flow_head(&self, g: &mut Graph<'p, T>, fwd: &Forward) -> Result<Var> {
        let noisy = fwd.layout.find(Role::ImageNoisy);
        let &[(off, seg)] = noisy.as_slice() else {
            return Err(Error::invalid("flow head needs exactly one noisy image segment"));
        };
        let n = self.cfg.grid().token_count();
        if seg.len != n {
            return Err(Error::ShapeMismatch {
                op: "flow_head",
                lhs: vec![seg.len],
                rhs: vec![n],
            });
        }
        let h = g.slice_rows(fwd.hidden, off, n)?;
        let (w, b) = (g.param(self.ids.flow_w), g.param(self.ids.flow_b));
        let x = g.matmul(h, w)?;
        g.add_row(x, b)
    }

    /// Clean-image prediction for `input` as an `H × W × C` image.
    pub fn predict_image(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let tokens = self.predict_tokens(input)?;
        unpatchify(&tokens, &self.cfg.grid())
    }

    pub fn predict_tokens(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let mut g = self.graph();
        let fwd = self.run(&mut g, input)?;
        let x = self.flow_head(&mut g, &fwd)?;
        Ok(g.value(x).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenizer::vocab_len;
    use crate::model::params::init_params;
    use crate::rng::Stream;

    fn setup() -> (ModelConfig, ParamStore<f64>) {
        let cfg = ModelConfig::gradcheck();
        let p = init_params(&cfg, &mut Stream::new(11)).unwrap();
        (cfg, p)
    }

    fn tokens(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let g = cfg.grid();
        let mut s = Stream::new(seed);
        Tensor::from_fn(&[g.token_count(), g.token_dim()], |_| s.normal())
    }

    #[test]
    fn pure_text_embedding_is_table_lookup() {
        let (cfg, p) = setup();
        let m = Model::new(&cfg, &p).unwrap();
        let input = ModelInput::<f64>::text_only(&[5, 6, 7]);
        let mut g = m.graph();
        let x = m.embed_sequence(&mut g, &input).unwrap();
        let ids = [1, 5, 6, 7, 2];
        let tok = p.get("tok_emb").unwrap();
        let pos = p.get("text_pos").unwrap();
        assert_eq!(g.shape(x), &[5, cfg.d_model]);
        for (r, &id) in ids.iter().enumerate() {
            for c in 0..cfg.d_model {
                let want = tok.row(id)[c] + pos.row(r)[c];
                assert_eq!(g.value(x).row(r)[c], want);
            }
        }
    }

    #[test]
    fn identical_patches_embed_differently_by_position() {
        let (cfg, p) = setup();
        let m = Model::new(&cfg, &p).unwrap();
        let grid = cfg.grid();
        let patch: Vec<f64> = (0..grid.token_dim()).map(|i| i as f64 / 50.0).collect();
        let toks = Tensor::from_fn(&[grid.token_count(), grid.token_dim()], |i| patch[i % grid.token_dim()]);
        let input = ModelInput::captioning(toks, &[5]);
        let mut g = m.graph();
        let x = m.embed_sequence(&mut g, &input).unwrap();
        assert_ne!(g.value(x).row(0), g.value(x).row(1));
    }

    #[test]
    fn timestep_presence_is_checked() {
        let (cfg, p) = setup();
        let m = Model::new(&cfg, &p).unwrap();
        let mut input = ModelInput::generation(&[5], tokens(&cfg, 1), 0.3, false);
        input.t = None;
        assert!(m.embed_sequence(&mut m.graph(), &input).is_err());
        let mut input = ModelInput::<f64>::text_only(&[5]);
        input.t = Some(0.2);
        assert!(m.embed_sequence(&mut m.graph(), &input).is_err());
        let input = ModelInput::<f64>::text_only(&[vocab_len() + 100]);
        assert!(matches!(
            m.embed_sequence(&mut m.graph(), &input),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn too_long_sequences_are_rejected() {
        let (cfg, p) = setup();
        let m = Model::new(&cfg, &p).unwrap();
        let words = vec![5; cfg.max_seq_len];
        let input = ModelInput::<f64>::text_only(&words);
        assert!(matches!(
            m.run(&mut m.graph(), &input),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn forward_preserves_shape() {
        let (cfg, p) = setup();
        let m = Model::new(&cfg, &p).unwrap();
        let input = ModelInput::generation(&[5, 6], tokens(&cfg, 2), 0.4, false);
        let mut g = m.graph();
        let fwd = m.run(&mut g, &input).unwrap();
        assert_eq!(g.shape(fwd.hidden), &[input.total_len(), cfg.d_model]);
        let x = m.flow_head(&mut g, &fwd).unwrap();
        assert_eq!(g.shape(x), &[16, 48]);
    }

    #[test]
    fn zero_lm_head_gives_log_vocab() {
        let (cfg, mut p) = setup();
        for name in ["lm_w", "lm_b"] {
            let id = p.id(name).unwrap();
            p.tensor_mut(id).data_mut().fill(0.0);
        }
        let m = Model::new(&cfg, &p).unwrap();
        let input = ModelInput::<f64>::text_only(&[5, 9, 12]);
        let mut g = m.graph();
        let fwd = m.run(&mut g, &input).unwrap();
        let (_, ce) = m.lm_logits_and_ce(&mut g, &fwd, &input).unwrap();
        assert!((g.scalar(ce) - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_flow_head_predicts_zeros() {
        let (cfg, mut p) = setup();
        for name in ["flow_w", "flow_b"] {
            let id = p.id(name).unwrap();
            p.tensor_mut(id).data_mut().fill(0.0);
        }
        let m = Model::new(&cfg, &p).unwrap();
        let input = ModelInput::generation(&[5], tokens(&cfg, 3), 0.5, false);
        let img = m.predict_image(&input).unwrap();
        assert_eq!(img.shape(), &[16, 16, 3]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_head_requires_noisy_segment() {
        let (cfg, p) = setup();
        let m = Model::new(&cfg, &p).unwrap();
        let input = ModelInput::<f64>::text_only(&[5]);
        let mut g = m.graph();
        let fwd = m.run(&mut g, &input).unwrap();
        assert!(m.flow_head(&mut g, &fwd).is_err());
        assert!(m.lm_logits_and_ce(&mut g, &fwd, &input).is_ok());
    }

    #[test]
    fn timestep_features_are_bounded() {
        let f = timestep_features(0.37, 16);
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(timestep_features(0.0, 4), vec![0.0, 0.0, 1.0, 1.0]);
    }
}

//! Parameter schema and initialisation.

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Every parameter name with its shape, in a fixed order.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    schema_with_init(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn schema_with_init(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let grid = cfg.grid();
    let (n_tok, tok_dim) = (grid.token_count(), grid.token_dim());
    let resid = Init::Normal(INIT_STD / (2.0 * cfg.n_layers as f64).sqrt());
    let w = Init::Normal(INIT_STD);
    let mut s = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d], w),
        ("text_pos".into(), vec![cfg.max_seq_len, d], w),
        ("patch_w".into(), vec![tok_dim, d], w),
        ("patch_b".into(), vec![d], Init::Zeros),
        ("img_pos".into(), vec![n_tok, d], w),
        ("mask_emb".into(), vec![d], w),
        ("time_w1".into(), vec![d, d], w),
        ("time_b1".into(), vec![d], Init::Zeros),
        ("time_w2".into(), vec![d, d], w),
        ("time_b2".into(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        s.extend([
            (p("ln1_g"), vec![d], Init::Ones),
            (p("ln1_b"), vec![d], Init::Zeros),
            (p("wq"), vec![d, d], w),
            (p("wk"), vec![d, d], w),
            (p("wv"), vec![d, d], w),
            (p("wo"), vec![d, d], resid),
            (p("bo"), vec![d], Init::Zeros),
            (p("ln2_g"), vec![d], Init::Ones),
            (p("ln2_b"), vec![d], Init::Zeros),
            (p("ff_w1"), vec![d, f], w),
            (p("ff_b1"), vec![f], Init::Zeros),
            (p("ff_w2"), vec![f, d], resid),
            (p("ff_b2"), vec![d], Init::Zeros),
        ]);
    }
    s.extend([
        ("ln_f_g".into(), vec![d], Init::Ones),
        ("ln_f_b".into(), vec![d], Init::Zeros),
        ("lm_w".into(), vec![d, cfg.vocab_size], w),
        ("lm_b".into(), vec![cfg.vocab_size], Init::Zeros),
        ("flow_w".into(), vec![d, tok_dim], w),
        ("flow_b".into(), vec![tok_dim], Init::Zeros),
    ]);
    s
}

pub fn init_params<T: Real>(cfg: &ModelConfig, stream: &mut Stream) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape, init) in schema_with_init(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, T::one()),
            Init::Normal(std) => Tensor::from_fn(&shape, |_| T::of(std * stream.normal())),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Errors unless `store` has exactly the schema's names and shapes.
pub fn check_schema<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let schema = param_schema(cfg);
    if schema.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            schema.len(),
            store.len()
        )));
    }
    for (name, shape) in &schema {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

/// Parameter ids resolved once per store.
pub(crate) struct ParamIds {
    pub tok_emb: ParamId,
    pub text_pos: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub img_pos: ParamId,
    pub mask_emb: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub layers: Vec<LayerIds>,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub lm_w: ParamId,
    pub lm_b: ParamId,
    pub flow_w: ParamId,
    pub flow_b: ParamId,
}

impl ParamIds {
    pub fn resolve<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let id = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::invalid(format!("parameter `{n}` missing from store")))
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |n: &str| id(&format!("layers.{l}.{n}"));
                Ok(LayerIds {
                    ln1_g: p("ln1_g")?,
                    ln1_b: p("ln1_b")?,
                    wq: p("wq")?,
                    wk: p("wk")?,
                    wv: p("wv")?,
                    wo: p("wo")?,
                    bo: p("bo")?,
                    ln2_g: p("ln2_g")?,
                    ln2_b: p("ln2_b")?,
                    ff_w1: p("ff_w1")?,
                    ff_b1: p("ff_b1")?,
                    ff_w2: p("ff_w2")?,
                    ff_b2: p("ff_b2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: id("tok_emb")?,
            text_pos: id("text_pos")?,
            patch_w: id("patch_w")?,
            patch_b: id("patch_b")?,
            img_pos: id("img_pos")?,
            mask_emb: id("mask_emb")?,
            time_w1: id("time_w1")?,
            time_b1: id("time_b1")?,
            time_w2: id("time_w2")?,
            time_b2: id("time_b2")?,
            layers,
            ln_f_g: id("ln_f_g")?,
            ln_f_b: id("ln_f_b")?,
            lm_w: id("lm_w")?,
            lm_b: id("lm_b")?,
            flow_w: id("flow_w")?,
            flow_b: id("flow_b")?,
        })
    }
}

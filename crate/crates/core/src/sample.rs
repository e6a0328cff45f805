//! Inference: Euler sampling for the image tasks and greedy decoding for text.

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{detokenize, encode_words, BOS, SEP};
use crate::data::{Image, Task};
use crate::error::{Error, Result};
use crate::flow::x_to_velocity;
use crate::model::{decode_text, Greedy, Model, ModelConfig, ModelInput, Role, SegmentInput};
use crate::patch::{patchify, unpatchify};
use crate::registry::grid_schedules;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Anything that maps a noisy-image input to a clean-image prediction in
/// token space.
pub trait Denoiser<T: Real> {
    fn config(&self) -> &ModelConfig;
    fn predict_x(&self, input: &ModelInput<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Denoiser<T> for Model<'_, T> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict_x(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        self.predict_tokens(input)
    }
}

/// Always predicts a fixed clean image, whatever the input. Integrating its
/// velocity must land on that image for any grid.
pub struct OracleDenoiser<T> {
    pub cfg: ModelConfig,
    pub x1: Tensor<T>,
}

impl<T: Real> Denoiser<T> for OracleDenoiser<T> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict_x(&self, _: &ModelInput<T>) -> Result<Tensor<T>> {
        Ok(self.x1.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRunConfig {
    /// Euler steps `K`.
    pub steps: usize,
    pub seed: u64,
    /// Guidance scale; 1 disables guidance.
    pub guidance: f64,
    /// Grid schedule, as a registry spec.
    pub grid: String,
}

impl Default for SampleRunConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            guidance: 1.0,
            grid: "uniform".into(),
        }
    }
}

impl SampleRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample.steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config(format!(
                "sample.guidance must be >= 0, got {}",
                self.guidance
            )));
        }
        grid_schedules().build(&self.grid)?;
        Ok(())
    }
}

/// Integrates from Gaussian noise at `t = 0` to `t = 1`. `build(x, t)`
/// returns the conditional input and, under guidance, the unconditional one.
fn integrate<T: Real>(
    model: &dyn Denoiser<T>,
    run: &SampleRunConfig,
    noise_label: &str,
    build: impl Fn(Tensor<T>, f64) -> (ModelInput<T>, Option<ModelInput<T>>),
) -> Result<Image> {
    run.validate()?;
    let cfg = model.config();
    let grid = cfg.grid();
    let mut stream = Stream::new(run.seed).fork_named(noise_label);
    let mut x = Tensor::from_fn(&[grid.token_count(), grid.token_dim()], |_| T::of(stream.normal()));
    let times = grid_schedules().build(&run.grid)?.grid(run.steps)?;
    for (tq, t, t_next) in times.queries(cfg.eps_t) {
        // The model sees the clamped time; the conversion uses the state's
        // own time, which is below 1 at every interval start, so the last
        // step lands exactly on the prediction.
        let (cond, uncond) = build(x.clone(), tq);
        let mut v = velocity(&model.predict_x(&cond)?, &x, t)?;
        if let Some(u) = uncond {
            let vu = velocity(&model.predict_x(&u)?, &x, t)?;
            let g = T::of(run.guidance);
            v = vu.zip_map(&v, "guidance", |a, b| a + g * (b - a))?;
        }
        let dt = T::of(t_next - t);
        x = x.zip_map(&v, "euler_step", |p, q| p + dt * q)?;
    }
    let img = unpatchify(&x, &grid)?;
    Ok(img.cast::<f32>().map(|p| p.clamp(-1.0, 1.0)))
}

fn velocity<T: Real>(x_pred: &Tensor<T>, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    x_to_velocity(x_pred, x, t, 0.0)
}

fn guided(run: &SampleRunConfig) -> bool {
    run.guidance != 1.0
}

fn check_image(img: &Image, cfg: &ModelConfig) -> Result<()> {
    let want = cfg.grid().image_shape();
    if img.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "source image",
            lhs: img.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

fn tokens<T: Real>(img: &Image, cfg: &ModelConfig) -> Result<Tensor<T>> {
    check_image(img, cfg)?;
    patchify(&img.cast::<T>(), &cfg.grid())
}

/// Text-to-image. An empty caption gives the unconditional model.
pub fn generate<T: Real>(model: &dyn Denoiser<T>, prompt: &str, run: &SampleRunConfig) -> Result<Image> {
    let words = encode_words(prompt)?;
    integrate(model, run, "generate", |x, t| {
        let cond = ModelInput::generation(&words, x.clone(), t, false);
        let uncond = guided(run).then(|| ModelInput::generation(&[], x, t, false));
        (cond, uncond)
    })
}

/// Image editing: `[image_condition(source), text(instruction), image_noisy]`.
pub fn edit<T: Real>(
    model: &dyn Denoiser<T>,
    source: &Image,
    instruction: &str,
    run: &SampleRunConfig,
) -> Result<Image> {
    let words = encode_words(instruction)?;
    let src = tokens::<T>(source, model.config())?;
    integrate(model, run, "edit", |x, t| {
        let cond = ModelInput::editing(src.clone(), &words, x.clone(), t);
        let uncond = guided(run).then(|| ModelInput::editing(src.clone(), &[], x, t));
        (cond, uncond)
    })
}

/// Reconstruction: `[image_condition(source), image_noisy]`.
pub fn reconstruct<T: Real>(model: &dyn Denoiser<T>, source: &Image, run: &SampleRunConfig) -> Result<Image> {
    let src = tokens::<T>(source, model.config())?;
    integrate(model, run, "reconstruct", |x, t| {
        (ModelInput::reconstruction(src.clone(), x, t), None)
    })
}

/// Greedy answer to `question` about `image`; the text after the separator.
pub fn answer<T: Real>(model: &Model<'_, T>, image: &Image, question: &str, max_tokens: usize) -> Result<String> {
    let mut q = vec![BOS];
    q.extend(encode_words(question)?);
    let prefix = ModelInput {
        task: Task::Understanding,
        segments: vec![
            SegmentInput::image(Role::ImageCondition, tokens::<T>(image, &model.cfg)?),
            SegmentInput::text(Role::TextCondition, q),
            SegmentInput::text(Role::TextTarget, vec![SEP]),
        ],
        t: None,
    };
    let ids = decode_text(model, &prefix, &mut Stream::new(0), max_tokens, &Greedy)?;
    Ok(detokenize(&ids))
}

/// Greedy caption of `image`.
pub fn describe<T: Real>(model: &Model<'_, T>, image: &Image, max_tokens: usize) -> Result<String> {
    let prefix = ModelInput {
        task: Task::Understanding,
        segments: vec![
            SegmentInput::image(Role::ImageCondition, tokens::<T>(image, &model.cfg)?),
            SegmentInput::text(Role::TextTarget, vec![BOS]),
        ],
        t: None,
    };
    let ids = decode_text(model, &prefix, &mut Stream::new(0), max_tokens, &Greedy)?;
    Ok(detokenize(&ids))
}

/// Teacher-forced cross-entropy per predicted token of `caption` given `image`.
pub fn caption_ce<T: Real>(model: &Model<'_, T>, image: &Image, caption: &str) -> Result<f64> {
    let input = ModelInput::captioning(tokens::<T>(image, &model.cfg)?, &encode_words(caption)?);
    let mut g = model.graph();
    let fwd = model.run(&mut g, &input)?;
    let (_, ce) = model.lm_logits_and_ce(&mut g, &fwd, &input)?;
    Ok(g.scalar(ce).as_f64())
}

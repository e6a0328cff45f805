//! Rectified-flow algebra in pixel space.
//!
//! Time runs from `t = 0` (pure noise) to `t = 1` (data). The network predicts
//! the clean image; training regresses the velocity derived from that
//! prediction against the straight-line velocity `x1 - x0`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// Default singularity guard on `1 - t`.
pub const DEFAULT_EPS_T: f64 = 1e-3;

/// One training example on the flow path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub x1: Tensor<T>,
    pub x0: Tensor<T>,
    pub t: f64,
    pub xt: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(x1: Tensor<T>, x0: Tensor<T>, t: f64) -> Result<Self> {
        let xt = interpolate(&x1, &x0, t)?;
        let v = true_velocity(&x1, &x0)?;
        Ok(Self { x1, x0, t, xt, v })
    }

    /// Draws standard-normal noise of the same shape as `x1`.
    pub fn draw(x1: Tensor<T>, t: f64, stream: &mut Stream) -> Result<Self> {
        let x0 = Tensor::from_fn(x1.shape(), |_| T::of(stream.normal()));
        Self::new(x1, x0, t)
    }
}

/// Clean-image prediction and the velocity derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPrediction<T> {
    pub x_pred: Tensor<T>,
    pub v_pred: Tensor<T>,
}

impl<T: Real> ModelPrediction<T> {
    pub fn from_x(x_pred: Tensor<T>, xt: &Tensor<T>, t: f64, eps_t: f64) -> Result<Self> {
        let v_pred = x_to_velocity(&x_pred, xt, t, eps_t)?;
        Ok(Self { x_pred, v_pred })
    }
}

/// `t·x1 + (1-t)·x0`.
pub fn interpolate<T: Real>(x1: &Tensor<T>, x0: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        x1.check_same(x0, "interpolate")?;
        return Ok(x0.clone());
    }
    if t == 1.0 {
        x1.check_same(x0, "interpolate")?;
        return Ok(x1.clone());
    }
    let (a, b) = (T::of(t), T::of(1.0 - t));
    x1.zip_map(x0, "interpolate", |p, q| a * p + b * q)
}

/// `x1 - x0`.
pub fn true_velocity<T: Real>(x1: &Tensor<T>, x0: &Tensor<T>) -> Result<Tensor<T>> {
    x1.zip_map(x0, "true_velocity", |p, q| p - q)
}

/// `(x_pred - xt) / (1 - t)`, refusing `t > 1 - eps_t`.
pub fn x_to_velocity<T: Real>(x_pred: &Tensor<T>, xt: &Tensor<T>, t: f64, eps_t: f64) -> Result<Tensor<T>> {
    if t > 1.0 - eps_t {
        return Err(Error::Singularity { t, eps_t });
    }
    let inv = T::of(1.0 / (1.0 - t));
    x_pred.zip_map(xt, "x_to_velocity", |p, q| (p - q) * inv)
}

/// Mean over elements of `(v_pred - v)²`.
pub fn v_loss<T: Real>(v_pred: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    v_pred.check_same(v, "v_loss")?;
    let s = v_pred
        .data()
        .iter()
        .zip(v.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(s / T::of(v.len() as f64))
}

/// `xt + (t_next - t)·v_pred`.
pub fn euler_step<T: Real>(xt: &Tensor<T>, v_pred: &Tensor<T>, t: f64, t_next: f64) -> Result<Tensor<T>> {
    if !(t_next > t) {
        return Err(Error::invalid(format!(
            "euler step must move forward in time, got {t} -> {t_next}"
        )));
    }
    let dt = T::of(t_next - t);
    xt.zip_map(v_pred, "euler_step", |x, v| x + dt * v)
}

/// v-loss as a graph node: the clean-image prediction `x_pred` is turned into
/// a velocity through the same conversion as [`x_to_velocity`] and compared
/// to the constant target velocity.
pub fn v_loss_node<T: Real>(
    g: &mut Graph<'_, T>,
    x_pred: Var,
    xt: &Tensor<T>,
    v: &Tensor<T>,
    t: f64,
    eps_t: f64,
) -> Result<Var> {
    if t > 1.0 - eps_t {
        return Err(Error::Singularity { t, eps_t });
    }
    let xt = g.constant(xt.clone());
    let diff = g.sub(x_pred, xt)?;
    let v_pred = g.scale(diff, 1.0 / (1.0 - t));
    g.mse(v_pred, v.clone())
}

/// Distribution of training-time timesteps.
pub trait TimestepDist: Send + Sync {
    fn name(&self) -> &'static str;

    /// Raw draw in `[0, 1]`, before the singularity clamp.
    fn draw(&self, stream: &mut Stream) -> f64;

    /// Draw restricted to `[0, hi]`.
    fn draw_below(&self, stream: &mut Stream, hi: f64) -> f64 {
        self.draw(stream).clamp(0.0, hi)
    }
}

/// Uniform on `[0, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformTime;

impl TimestepDist for UniformTime {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn draw(&self, stream: &mut Stream) -> f64 {
        stream.uniform()
    }

    fn draw_below(&self, stream: &mut Stream, hi: f64) -> f64 {
        stream.uniform() * hi
    }
}

/// `sigmoid(m + s·z)` with `z` standard normal.
#[derive(Clone, Copy, Debug)]
pub struct LogitNormalTime {
    pub mean: f64,
    pub std: f64,
}

impl TimestepDist for LogitNormalTime {
    fn name(&self) -> &'static str {
        "logit_normal"
    }

    fn draw(&self, stream: &mut Stream) -> f64 {
        let z = self.mean + self.std * stream.normal();
        1.0 / (1.0 + (-z).exp())
    }
}

/// Training timestep in `[0, 1 - eps_t]`.
pub fn sample_t(stream: &mut Stream, dist: &dyn TimestepDist, eps_t: f64) -> f64 {
    dist.draw_below(stream, 1.0 - eps_t)
}

/// Strictly increasing integration grid from 0 to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    steps: Vec<f64>,
}

impl TimeGrid {
    pub fn new(steps: Vec<f64>) -> Result<Self> {
        if steps.len() < 2 || steps[0] != 0.0 || *steps.last().unwrap() != 1.0 {
            return Err(Error::invalid("time grid must start at 0 and end at 1"));
        }
        if steps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Number of integration intervals.
    pub fn intervals(&self) -> usize {
        self.steps.len() - 1
    }

    /// `(t_query, t, t_next)` per interval; `t_query` is `t` clamped to `1 - eps_t`.
    pub fn queries(&self, eps_t: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.steps.windows(2).map(move |w| (w[0].min(1.0 - eps_t), w[0], w[1]))
    }
}

/// Grid construction strategy.
pub trait GridSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    fn grid(&self, k: usize) -> Result<TimeGrid>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UniformGrid;

impl GridSchedule for UniformGrid {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn grid(&self, k: usize) -> Result<TimeGrid> {
        uniform_grid(k)
    }
}

/// `t = (1 - cos(pi·s)) / 2`: denser steps near both ends.
#[derive(Clone, Copy, Debug, Default)]
pub struct CosineGrid;

impl GridSchedule for CosineGrid {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn grid(&self, k: usize) -> Result<TimeGrid> {
        if k < 1 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        let mut steps: Vec<f64> = (0..=k)
            .map(|i| (1.0 - (std::f64::consts::PI * i as f64 / k as f64).cos()) / 2.0)
            .collect();
        steps[0] = 0.0;
        steps[k] = 1.0;
        TimeGrid::new(steps)
    }
}

/// `K + 1` evenly spaced points from 0 to 1.
pub fn uniform_grid(k: usize) -> Result<TimeGrid> {
    if k < 1 {
        return Err(Error::invalid("grid needs at least one step"));
    }
    let mut steps: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    steps[k] = 1.0;
    TimeGrid::new(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    fn random(stream: &mut Stream, n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n], |_| stream.normal())
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let mut s = Stream::new(1);
        let x1 = random(&mut s, 8);
        let x0 = random(&mut s, 8);
        assert_eq!(interpolate(&x1, &x0, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x1, &x0, 1.0).unwrap(), x1);
        let mid = interpolate(&t64(&[1.0, 1.0]), &t64(&[-1.0, -1.0]), 0.5).unwrap();
        assert_eq!(mid.data(), &[0.0, 0.0]);
    }

    #[test]
    fn interpolation_rejects_shape_mismatch() {
        assert!(interpolate(&t64(&[1.0]), &t64(&[1.0, 2.0]), 0.5).is_err());
    }

    #[test]
    fn true_velocity_examples() {
        let x = t64(&[0.3, -0.2]);
        assert_eq!(true_velocity(&x, &x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(true_velocity(&t64(&[2.0]), &t64(&[-1.0])).unwrap().data(), &[3.0]);

        let mut s = Stream::new(2);
        let (x1, x0) = (random(&mut s, 16), random(&mut s, 16));
        let v = true_velocity(&x1, &x0).unwrap();
        for &t in &[0.0, 0.1, 0.5, 0.77, 0.99] {
            let xt = interpolate(&x1, &x0, t).unwrap();
            for i in 0..16 {
                let back = xt.data()[i] + (1.0 - t) * v.data()[i];
                assert!((back - x1.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_prediction_gives_true_velocity() {
        let x1 = t64(&[0.5, -0.25, 1.0]);
        let x0 = t64(&[-1.0, 0.25, 0.5]);
        let t = 0.25;
        let s = FlowSample::new(x1.clone(), x0, t).unwrap();
        let v = x_to_velocity(&x1, &s.xt, t, DEFAULT_EPS_T).unwrap();
        assert_eq!(v, s.v);
        let zero = x_to_velocity(&s.xt, &s.xt, t, DEFAULT_EPS_T).unwrap();
        assert!(zero.data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn velocity_pole_scales_as_inverse_eps() {
        let xp = t64(&[1.0]);
        let xt = t64(&[0.0]);
        for &eps in &[1e-1, 1e-2, 1e-3] {
            let v = x_to_velocity(&xp, &xt, 1.0 - eps, eps).unwrap();
            assert!((v.data()[0] * eps - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            x_to_velocity(&xp, &xt, 0.9995, 1e-3),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn v_loss_examples() {
        let v = t64(&[1.0, -2.0, 0.5]);
        assert_eq!(v_loss(&v, &v).unwrap(), 0.0);
        let shifted = v.map(|x| x + 1.0);
        assert_eq!(v_loss(&shifted, &v).unwrap(), 1.0);
        assert!(v_loss(&v, &t64(&[1.0])).is_err());
    }

    #[test]
    fn euler_examples() {
        let mut s = Stream::new(3);
        let (x1, x0) = (random(&mut s, 12), random(&mut s, 12));
        let v = true_velocity(&x1, &x0).unwrap();
        let out = euler_step(&x0, &v, 0.0, 1.0).unwrap();
        for (a, b) in out.data().iter().zip(x1.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let tiny = euler_step(&x0, &v, 0.5, 0.5 + 1e-12).unwrap();
        for (a, b) in tiny.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(euler_step(&x0, &v, 0.5, 0.5).is_err());

        for k in [1usize, 3, 7, 50] {
            let grid = uniform_grid(k).unwrap();
            let mut x = x0.clone();
            for w in grid.steps().windows(2) {
                x = euler_step(&x, &v, w[0], w[1]).unwrap();
            }
            for (a, b) in x.data().iter().zip(x1.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_grid_examples() {
        assert_eq!(uniform_grid(1).unwrap().steps(), &[0.0, 1.0]);
        assert_eq!(uniform_grid(4).unwrap().steps(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(uniform_grid(0).is_err());
        let g = CosineGrid.grid(9).unwrap();
        assert_eq!(g.intervals(), 9);
    }

    #[test]
    fn sample_t_stays_below_guard() {
        let eps = 1e-3;
        let mut s = Stream::new(4);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_t(&mut s, &UniformTime, eps);
            assert!((0.0..=1.0 - eps).contains(&t));
            sum += t;
        }
        assert!((sum / n as f64 - (1.0 - eps) / 2.0).abs() < 0.01);
        let ln = LogitNormalTime { mean: 3.0, std: 2.0 };
        for _ in 0..10_000 {
            assert!(sample_t(&mut s, &ln, eps) <= 1.0 - eps);
        }
        let mut a = Stream::new(9);
        let mut b = Stream::new(9);
        for _ in 0..100 {
            assert_eq!(sample_t(&mut a, &ln, eps), sample_t(&mut b, &ln, eps));
        }
    }

    #[test]
    fn grid_queries_clamp() {
        let g = uniform_grid(2).unwrap();
        let q: Vec<_> = g.queries(0.6).collect();
        assert_eq!(q, vec![(0.0, 0.0, 0.5), (0.4, 0.5, 1.0)]);
    }
}

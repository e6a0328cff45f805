//! Pixel-fidelity metrics. Inputs use the `[-1, 1]` convention and are
//! mapped to `[0, 1]` before scoring.

use crate::data::Image;
use crate::error::Result;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn unit(x: f32) -> f64 {
    (x as f64 + 1.0) / 2.0
}

/// Peak signal-to-noise ratio in dB with peak 1, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (unit(p) - unit(q)).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over every 8×8 window position and channel of `H × W × C` images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same(b, "ssim")?;
    let (h, w, c) = match *a.shape() {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        _ => return Err(crate::error::Error::invalid("ssim expects an H x W (x C) image")),
    };
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * w + x) * c + ch;
                        let (p, q) = (unit(da[i]), unit(db[i]));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rasterize, Scene};
    use crate::rng::Stream;
    use crate::tensor::Tensor;

    fn noise(seed: u64) -> Image {
        let mut s = Stream::new(seed);
        Tensor::from_fn(&[16, 16, 3], |_| (s.uniform() * 2.0 - 1.0) as f32)
    }

    #[test]
    fn identical_images_hit_the_caps() {
        let x = noise(1);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        // 0.1 on the [0, 1] scale is 0.2 in [-1, 1]; the MSE is 0.01.
        let a = Tensor::<f32>::full(&[8, 8, 3], -0.5);
        let b = Tensor::<f32>::full(&[8, 8, 3], -0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded() {
        let scenes = Scene::all_single_object();
        let a = rasterize(&scenes[3], 16, 16);
        for b in [noise(2), rasterize(&scenes[40], 16, 16)] {
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let s = ssim(&a, &b).unwrap();
            assert_eq!(s, ssim(&b, &a).unwrap());
            assert!((-1.0..1.0).contains(&s));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(psnr(&noise(0), &Tensor::zeros(&[8, 8, 3])).is_err());
        assert!(ssim(&noise(0), &Tensor::zeros(&[8, 8, 3])).is_err());
    }
}

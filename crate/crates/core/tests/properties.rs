use proptest::prelude::*;

use pixelfuse::autodiff::Graph;
use pixelfuse::data::grammar::{apply_edit, random_edit};
use pixelfuse::data::{canonical_caption, gen_scene, parse_caption, rasterize, Scene};
use pixelfuse::eval::{compositional_check, psnr, ssim};
use pixelfuse::flow::{euler_step, interpolate, true_velocity, v_loss, x_to_velocity};
use pixelfuse::imageio::{decode_ppm, encode_ppm};
use pixelfuse::masking::select_mask;
use pixelfuse::model::probe::{causal_leak, min_image_dependence, permutation_error, probe_role, random_input};
use pixelfuse::model::{init_params, Model, ModelConfig};
use pixelfuse::patch::{patchify, unpatchify, PatchGrid};
use pixelfuse::sample::{generate, OracleDenoiser, SampleRunConfig};
use pixelfuse::{Stream, Tensor};

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = Stream::new(seed);
    Tensor::from_fn(shape, |_| s.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn x_prediction_loss_matches_clean_image_error(seed in any::<u64>(), t in 0.0f64..0.99, n in 1usize..40) {
        let x1 = random_tensor(&[n], seed);
        let x0 = random_tensor(&[n], seed ^ 1);
        let x_pred = random_tensor(&[n], seed ^ 2);
        let xt = interpolate(&x1, &x0, t).unwrap();
        let v = true_velocity(&x1, &x0).unwrap();
        let got = v_loss(&x_to_velocity(&x_pred, &xt, t, 1e-3).unwrap(), &v).unwrap();
        let mse = x_pred.data().iter().zip(x1.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64;
        let want = mse / (1.0 - t).powi(2);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300));
    }

    #[test]
    fn oracle_velocity_reaches_the_data_in_one_step(seed in any::<u64>(), t in 0.0f64..0.999) {
        let x1 = random_tensor(&[24], seed);
        let x0 = random_tensor(&[24], seed ^ 7);
        let xt = interpolate(&x1, &x0, t).unwrap();
        let out = euler_step(&xt, &true_velocity(&x1, &x0).unwrap(), t, 1.0).unwrap();
        for (a, b) in out.data().iter().zip(x1.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mask_plans_have_the_requested_size(seed in any::<u64>(), n in 1usize..64, ratio in 0.0f64..=1.0) {
        let plan = select_mask(&mut Stream::new(seed), n, ratio);
        prop_assert_eq!(plan.indices.len(), (ratio * n as f64).round() as usize);
        prop_assert!(plan.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.indices.iter().all(|&i| i < n));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[rows, cols], seed).map(|v| 10.0 * v));
        let p = g.softmax(x, None).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(p).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn quality_metrics_are_symmetric(seed in any::<u64>()) {
        let mut s = Stream::new(seed);
        let a = rasterize(&gen_scene(&mut s, 2), 16, 16);
        let b = rasterize(&gen_scene(&mut s, 1), 16, 16);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn captions_parse_back_and_render_checkably(seed in any::<u64>(), n in 1usize..=2) {
        let scene = gen_scene(&mut Stream::new(seed), n);
        let back: Scene = parse_caption(&canonical_caption(&scene)).unwrap();
        prop_assert_eq!(&back, &scene);
        let img = rasterize(&scene, 32, 32);
        prop_assert!(compositional_check(&img, &scene).passed());
        prop_assert_eq!(decode_ppm(&encode_ppm(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn edits_only_touch_the_edited_cells(seed in any::<u64>()) {
        let mut s = Stream::new(seed);
        let scene = gen_scene(&mut s, 2);
        let op = random_edit(&scene, &mut s);
        let Some(after) = apply_edit(&scene, &op) else { return Ok(()); };
        let size = 16;
        let (a, b) = (rasterize(&scene, size, size), rasterize(&after, size, size));
        let touched: Vec<_> = scene
            .objects
            .iter()
            .chain(&after.objects)
            .filter(|o| !scene.objects.contains(o) || !after.objects.contains(o))
            .map(|o| o.cell.rect(size, size))
            .collect();
        for y in 0..size {
            for x in 0..size {
                let inside = touched.iter().any(|&(y0, x0, h, w)| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w);
                if !inside {
                    for c in 0..3 {
                        let i = (y * size + x) * 3 + c;
                        prop_assert_eq!(a.data()[i], b.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_sampling_lands_on_the_target(seed in any::<u64>(), steps in 1usize..60, cosine in any::<bool>()) {
        let cfg = ModelConfig::tiny();
        let scene = gen_scene(&mut Stream::new(seed), 2);
        let img = rasterize(&scene, 16, 16);
        let x1 = patchify(&img.cast::<f64>(), &cfg.grid()).unwrap();
        let oracle = OracleDenoiser { cfg, x1 };
        let run = SampleRunConfig {
            steps,
            seed,
            grid: if cosine { "cosine".into() } else { "uniform".into() },
            ..SampleRunConfig::default()
        };
        let out = generate(&oracle, "", &run).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_policy_holds_on_random_layouts(seed in any::<u64>()) {
        let cfg = ModelConfig::gradcheck();
        let params = init_params::<f64>(&cfg, &mut Stream::new(seed)).unwrap();
        let model = Model::new(&cfg, &params).unwrap();
        let mut s = Stream::new(seed ^ 0x5eed);
        let input = random_input(&model, &mut s);
        let cut = 1 + s.index(input.total_len() - 1);
        prop_assert_eq!(causal_leak(&model, &input, cut, &mut s).unwrap(), 0.0);
        if let Some(role) = probe_role(&input) {
            prop_assert!(min_image_dependence(&model, &input, role).unwrap() > 0.0);
            let n = cfg.grid().token_count();
            let (a, b) = (s.index(n), s.index(n));
            prop_assert!(permutation_error(&model, &input, role, a, b).unwrap() <= 1e-10);
        }
    }
}

fn sorted_squares(t: &Tensor<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = t.data().iter().map(|x| x * x).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn patchify_is_a_bijection_on_small_grids() {
    for h in [2, 4, 8] {
        for w in [2, 4, 8] {
            for p in [1, 2, 4] {
                if h % p != 0 || w % p != 0 {
                    continue;
                }
                let grid = PatchGrid::new(h, w, 3, p).unwrap();
                let img = random_tensor(&[h, w, 3], (h * 100 + w * 10 + p) as u64);
                let tokens = patchify(&img, &grid).unwrap();
                // Same multiset of values, so the same energy in any fixed order.
                assert_eq!(sorted_squares(&tokens), sorted_squares(&img));
                assert!((tokens.sum_sq() - img.sum_sq()).abs() <= 1e-12 * img.sum_sq());
                assert_eq!(unpatchify(&tokens, &grid).unwrap(), img);
            }
        }
    }
}

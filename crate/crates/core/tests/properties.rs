use ctraj_core::classifier::{Classifier, ClassifierConfig};
use ctraj_core::concepts::{difference_map, find_relevant_dimensions, sweep_latent, DIRECTIONS};
use ctraj_core::counterfactual::{images_per_sample, job_seed};
use ctraj_core::data::{caption_tokens, generate_dataset, DatasetSpec};
use ctraj_core::diffusion::{make_schedule, transfer, ScheduleKind};
use ctraj_core::image_io::{decode_png, encode_png, quantize};
use ctraj_core::metrics::{fid, flip_ratio, l1_distance, l2_distance};
use ctraj_core::vae::{ssim, vae_loss, Vae, VaeConfig, VaeLossWeights};
use ctraj_core::{seed, Tensor};
use proptest::prelude::*;

fn image(seed_value: u64, size: usize) -> Tensor<f64> {
    Tensor::uniform(&[3, size, size], 0.0, 1.0, &mut seed::rng(seed_value, &[]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kld_is_non_negative(s in any::<u64>(), scale in 0.0f64..4.0) {
        let mut rng = seed::rng(s, &[]);
        let mu = Tensor::<f64>::randn(&[2, 6], &mut rng).scale(scale);
        let lv = Tensor::<f64>::randn(&[2, 6], &mut rng).scale(scale);
        let x = Tensor::<f64>::zeros(&[2, 3, 12, 12]);
        let c = vae_loss(&x, &x, &mu, &lv, &VaeLossWeights { w_kld: 1.0 }, None).unwrap();
        prop_assert!(c.kld >= 0.0);
        prop_assert_eq!(c.total, c.rec + c.kld + c.l1 + c.ssim + c.perc);
    }

    #[test]
    fn ssim_bounds_symmetry_identity(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (image(a, 12), image(b, 12));
        let s = ssim(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() <= 1e-6);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn l2_never_exceeds_l1_on_unit_images(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (image(a, 8), image(b, 8));
        let (l1, l2) = (l1_distance(&x, &y).unwrap(), l2_distance(&x, &y).unwrap());
        prop_assert!(l2 <= l1 && l1 >= 0.0);
        prop_assert_eq!(l1_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn difference_map_is_normalized(a in any::<u64>(), b in any::<u64>()) {
        let m = difference_map(&image(a, 8), &image(b, 8)).unwrap();
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(m.data().iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn flip_ratio_is_a_fraction(flags in proptest::collection::vec(any::<bool>(), 1..50)) {
        let r = flip_ratio(&flags).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((r * flags.len() as f64 - flags.iter().filter(|&&f| f).count() as f64).abs() < 1e-9);
    }

    #[test]
    fn fid_symmetric_and_non_negative(a in any::<u64>(), shift in 0.0f64..2.0) {
        let mut rng = seed::rng(a, &[]);
        let draw = |rng: &mut seed::Rng, off: f64| -> Vec<Vec<f64>> {
            (0..40).map(|_| Tensor::<f64>::randn(&[3], rng).data().iter().map(|v| v + off).collect()).collect()
        };
        let (x, y) = (draw(&mut rng, 0.0), draw(&mut rng, shift));
        let d = fid(&x, &y).unwrap();
        prop_assert!(d >= -1e-9);
        prop_assert!((d - fid(&y, &x).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn schedule_is_monotone(t in 10usize..2000, s_frac in 0.01f64..1.0, cosine in any::<bool>()) {
        let s = ((t as f64 * s_frac) as usize).max(1);
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let sch = make_schedule(t, kind, s).unwrap();
        prop_assert_eq!(sch.alpha_bar(0), 1.0);
        for k in 1..=t {
            prop_assert!(sch.alpha_bar(k) < sch.alpha_bar(k - 1) && sch.alpha_bar(k) > 0.0);
        }
        for k in 1..=s {
            prop_assert!(sch.timestep(k) > sch.timestep(k - 1));
        }
        prop_assert_eq!(sch.timestep(s), t);
    }

    #[test]
    fn zero_noise_transfer_rescales(a in any::<u64>(), t in 2usize..1000) {
        let sch = make_schedule(1000, ScheduleKind::Linear, 1000).unwrap();
        let z = Tensor::<f64>::randn(&[5], &mut seed::rng(a, &[]));
        let out = transfer(&sch, &z, t, t - 1, &Tensor::zeros(&[5]));
        let f = (sch.alpha_bar(t - 1) / sch.alpha_bar(t)).sqrt();
        for (o, v) in out.data().iter().zip(z.data()) {
            prop_assert!((o - f * v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn trajectory_image_count(k in 2usize..=8, t_start in 0usize..50) {
        prop_assert_eq!(images_per_sample(k, t_start), (k - 1) * (t_start + 1) + 1);
    }

    #[test]
    fn job_seeds_distinguish_targets(base in any::<u64>(), id in "[a-z0-9_]{1,12}") {
        prop_assert_ne!(job_seed(base, &id, 0), job_seed(base, &id, 1));
        prop_assert_eq!(job_seed(base, &id, 2), job_seed(base, &id, 2));
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization(a in any::<u64>()) {
        let q = quantize(&image(a, 6).cast::<f32>());
        let back: Tensor<f32> = decode_png(&encode_png(&q).unwrap()).unwrap();
        prop_assert_eq!(back, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn dataset_is_reproducible_and_labels_valid(rng_seed in any::<u64>()) {
        let spec = DatasetSpec { samples_per_class: 6, image_size: 32, rng_seed, ..DatasetSpec::default() };
        let a = generate_dataset::<f32>(&spec).unwrap();
        let b = generate_dataset::<f32>(&spec).unwrap();
        prop_assert_eq!(a.images.len(), 24);
        for (x, y) in a.images.iter().zip(&b.images) {
            prop_assert_eq!(&x.image, &y.image);
            prop_assert!(x.class_label < 4);
            prop_assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let tokens = caption_tokens(x.class_label, &x.concepts);
            prop_assert_eq!(tokens.len(), 1 + x.concepts.len());
        }
    }

    #[test]
    fn sweep_restores_and_report_is_permutation_invariant(s in any::<u64>()) {
        let clf: Classifier<f64> = Classifier::<f32>::new(&ClassifierConfig { channels: vec![4, 4, 4, 4], ..Default::default() }, 3, 32).unwrap().cast();
        let vae: Vae<f64> = Vae::<f32>::new(&VaeConfig { latent_dim: 3, channels: vec![4; 6], ..Default::default() }, 32).unwrap().cast();
        let imgs: Vec<Tensor<f64>> = (0..4).map(|i| image(s ^ i, 32)).collect();
        let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
        let preds: Vec<usize> = refs.iter().map(|x| clf.logits(&(*x).clone().reshape(&[1, 3, 32, 32]).unwrap()).unwrap().argmax_rows()[0]).collect();
        let y = (0..3).find(|y| !preds.contains(y));
        prop_assume!(y.is_some());
        let y = y.unwrap();
        let ids: Vec<String> = (0..4).map(|i| format!("x{i}")).collect();
        let (a, _) = find_relevant_dimensions(&clf, &vae, &ids, &refs, y, 6).unwrap();
        let order = [2, 0, 3, 1];
        let ids_p: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        let refs_p: Vec<&Tensor<f64>> = order.iter().map(|&i| refs[i]).collect();
        let (b, _) = find_relevant_dimensions(&clf, &vae, &ids_p, &refs_p, y, 6).unwrap();
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            prop_assert!((ea.mean_delta - eb.mean_delta).abs() <= 1e-9);
            prop_assert_eq!(ea.success_rate, eb.success_rate);
        }
        let mut sa: Vec<(usize, i64)> = a.entries.iter().map(|e| (e.dimension, e.direction as i64)).collect();
        let mut sb: Vec<(usize, i64)> = b.entries.iter().map(|e| (e.dimension, e.direction as i64)).collect();
        sa.sort();
        sb.sort();
        prop_assert_eq!(sa, sb);
        let latent = vec![0.5, -1.5, 2.0];
        let deltas = sweep_latent(&clf, &vae, &latent, y).unwrap();
        prop_assert_eq!(deltas.len(), 3 * DIRECTIONS.len());
        prop_assert_eq!(deltas[2 * 7 + 5], 0.0);
    }
}

use ctraj_core::classifier::{train_classifier, Classifier, ClassifierConfig};
use ctraj_core::concepts::{find_relevant_dimensions, DIRECTIONS};
use ctraj_core::data::{generate_dataset, DatasetSpec, Split};
use ctraj_core::vae::{train_vae, Vae, VaeConfig, VaeLossWeights};
use ctraj_core::Tensor;

fn dataset() -> ctraj_core::Dataset32 {
    generate_dataset::<f32>(&DatasetSpec { samples_per_class: 80, image_size: 32, ..DatasetSpec::default() }).unwrap()
}

fn small_vae(w_kld: f64, epochs: usize) -> VaeConfig {
    VaeConfig {
        latent_dim: 16,
        channels: vec![8, 16, 16, 16, 16, 16],
        epochs,
        batch_size: 32,
        lr: 2e-3,
        weights: VaeLossWeights { w_kld },
        ..VaeConfig::default()
    }
}

#[test]
fn vae_training_reduces_validation_loss() {
    let ds = dataset();
    let imgs: Vec<&Tensor<f32>> = ds.images.iter().map(|i| &i.image).collect();
    let vae = train_vae(&imgs, None, &small_vae(1e-3, 4)).unwrap();
    let h = &vae.meta.history;
    assert_eq!(h.len(), 5);
    assert!(h[4].val.total < h[0].val.total, "{} vs {}", h[4].val.total, h[0].val.total);
    assert!(h.iter().all(|e| e.val.total.is_finite()));
    assert_eq!(vae.meta.loss_components_final, Some(h[4].val));
}

#[test]
fn stronger_kl_weight_trades_reconstruction_for_kld() {
    let ds = dataset();
    let imgs: Vec<&Tensor<f32>> = ds.images.iter().map(|i| &i.image).collect();
    let base = train_vae(&imgs, None, &small_vae(1e-3, 4)).unwrap();
    let strong = train_vae(&imgs, None, &small_vae(1e-2, 4)).unwrap();
    for (a, b) in base.meta.history.iter().zip(&strong.meta.history).skip(1) {
        assert!(b.val.kld < a.val.kld, "epoch {}: kld {} vs {}", a.epoch, b.val.kld, a.val.kld);
        assert!(b.val.rec > a.val.rec, "epoch {}: rec {} vs {}", a.epoch, b.val.rec, a.val.rec);
    }
}

/// Plain enumeration: one encode, one decode and one classification per
/// manipulated latent.
fn brute_force(clf: &Classifier<f64>, vae: &Vae<f64>, images: &[&Tensor<f64>], y: usize) -> Vec<(usize, f64, f64)> {
    let m = vae.latent_dim();
    let prob = |l: &[f64]| -> f64 {
        let img = vae.decode(&Tensor::new(&[1, m], l.to_vec()).unwrap()).unwrap();
        clf.predict(&img).unwrap().data()[y]
    };
    let mut sums = vec![0.0; m * 7];
    for x in images {
        let l = vae.encode(&(*x).clone().reshape(&[1, 3, 32, 32]).unwrap()).unwrap().data().to_vec();
        let b = prob(&l);
        for i in 0..m {
            for (k, &d) in DIRECTIONS.iter().enumerate() {
                let mut lm = l.clone();
                lm[i] = d;
                sums[i * 7 + k] += prob(&lm) - b;
            }
        }
    }
    let mut out: Vec<(usize, f64, f64)> =
        (0..m * 7).map(|j| (j / 7, DIRECTIONS[j % 7], sums[j] / images.len() as f64)).collect();
    out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.partial_cmp(&b.1).unwrap()));
    out
}

#[test]
fn relevant_dimensions_match_brute_force() {
    let ds = dataset();
    let train: Vec<(&Tensor<f32>, usize)> = ds.split(Split::Train).iter().map(|i| (&i.image, i.class_label)).collect();
    let val: Vec<(&Tensor<f32>, usize)> = ds.split(Split::Val).iter().map(|i| (&i.image, i.class_label)).collect();
    let clf = train_classifier(&train, &val, 4, &ClassifierConfig { channels: vec![8, 8, 16, 16], epochs: 2, ..ClassifierConfig::default() })
        .unwrap();
    let imgs: Vec<&Tensor<f32>> = ds.images.iter().map(|i| &i.image).collect();
    let vae = train_vae(&imgs, None, &VaeConfig { latent_dim: 4, ..small_vae(1e-3, 1) }).unwrap();
    let (clf, vae): (Classifier<f64>, Vae<f64>) = (clf.cast(), vae.cast());
    let y = 0;
    let test = ds.split(Split::Test);
    let mut picked = Vec::new();
    for item in test {
        let x: Tensor<f64> = item.image.cast();
        if clf.logits(&x.clone().reshape(&[1, 3, 32, 32]).unwrap()).unwrap().argmax_rows()[0] != y {
            picked.push((item.id.clone(), x));
        }
        if picked.len() == 3 {
            break;
        }
    }
    let ids: Vec<String> = picked.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<&Tensor<f64>> = picked.iter().map(|p| &p.1).collect();
    let (report, _) = find_relevant_dimensions(&clf, &vae, &ids, &refs, y, 5).unwrap();
    let oracle = brute_force(&clf, &vae, &refs, y);
    assert_eq!(oracle.len(), 28);
    for (e, o) in report.entries.iter().zip(&oracle) {
        assert_eq!((e.dimension, e.direction), (o.0, o.1));
        assert!((e.mean_delta - o.2).abs() <= 1e-12, "{} vs {}", e.mean_delta, o.2);
    }
    assert_eq!(report.entries.len(), 5);
}

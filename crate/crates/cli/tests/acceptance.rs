//! Acceptance suite. Runs (or reuses) a full pipeline run and checks every
//! criterion, printing one PASS/FAIL line each. A failed pipeline always
//! exits nonzero; failed criteria only do so when `CTRAJ_ACCEPTANCE_STRICT`
//! is set.
//!
//! `CTRAJ_ACCEPTANCE_DIR` sets where the run lives (default
//! `target/acceptance`); `CTRAJ_ACCEPTANCE_CONFIG` replaces
//! `configs/default.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ctraj_cli::stages::{self, load_classifier, load_codec, load_data, load_diffusion, load_report, TABLE_JSON};
use ctraj_cli::{Outcome, Overrides, Pipeline, RunConfig, Stage};
use ctraj_core::classifier::Classifier;
use ctraj_core::codec::Codec;
use ctraj_core::concepts::{find_relevant_dimensions, mask_mean_ratio, mean_difference_map, DIRECTIONS};
use ctraj_core::counterfactual::{applied_gradient, images_per_sample, trajectory_dir, CfJob, Engine, GuidanceParams};
use ctraj_core::data::{color_bias_audit, corner_band_mask, ConceptKind, LabeledImage, Split};
use ctraj_core::diffusion::{make_schedule, ScheduleKind};
use ctraj_core::metrics::{fid, EvalReport};
use ctraj_core::vae::{train_vae, vae_loss, vae_loss_graph, Vae, VaeConfig, VaeLossWeights};
use ctraj_core::{seed, Tensor};
use ctraj_nn::Graph;
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

fn acceptance_config() -> RunConfig {
    let path = std::env::var_os("CTRAJ_ACCEPTANCE_CONFIG").map(PathBuf::from).unwrap_or_else(|| workspace().join("configs/default.toml"));
    let root = std::env::var_os("CTRAJ_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("target/acceptance"));
    let mut cfg = RunConfig::load(Some(&path), &Overrides::default()).unwrap_or_else(|e| panic!("{e}"));
    cfg.paths.data_dir = root.join("data");
    cfg.paths.artifact_dir = root.join("artifacts");
    cfg
}

fn eq1_statistics() -> Check {
    let sch = make_schedule(1000, ScheduleKind::Linear, 50).map_err(|e| e.to_string())?;
    let z0 = Tensor::<f64>::new(&[4], vec![1.5, -0.7, 0.2, 2.4]).unwrap();
    let n = 10_000;
    let mut rng = seed::rng(1234, &[]);
    let mut lines = Vec::new();
    let mut ok = true;
    for t in [50usize, 500, 950] {
        let ab = sch.alpha_bar(t);
        let (mut sum, mut sq) = (vec![0.0; 4], vec![0.0; 4]);
        for _ in 0..n {
            let eps = Tensor::<f64>::randn(&[4], &mut rng);
            let zt = sch.forward_noise(&z0, t, &eps).map_err(|e| e.to_string())?;
            for (k, v) in zt.data().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let sd = (1.0 - ab).sqrt();
        let mut worst_mean: f64 = 0.0;
        let mut worst_var: f64 = 0.0;
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let z = (mean - ab.sqrt() * z0.data()[k]).abs() / (sd / (n as f64).sqrt());
            let rel = (var / (1.0 - ab) - 1.0).abs();
            worst_mean = worst_mean.max(z);
            worst_var = worst_var.max(rel);
            ok &= z <= 3.0 && rel <= 0.05;
        }
        lines.push(format!("t={t}: max |mean err| {worst_mean:.2} sigma, max var err {:.2}%", 100.0 * worst_var));
    }
    ensure(ok, lines.join("; "))
}

struct Models {
    clf: Classifier<f32>,
    codec: Codec<f32>,
}

fn eq2_guidance(p: &Pipeline, m: &Models, test: &[&LabeledImage<f32>]) -> Check {
    let clf: Classifier<f64> = m.clf.cast();
    let codec: Codec<f64> = m.codec.cast();
    let x: Tensor<f64> = ctraj_core::data::batch(&[&test[0].image, &test[1].image]).map_err(|e| e.to_string())?.cast();
    let v = codec.encode(&x).map_err(|e| e.to_string())?;
    let k = clf.num_classes();
    let targets = [(test[0].class_label + 1) % k, (test[1].class_label + 2) % k];
    let dec = |g: &Graph<f64>, z| codec.decode_graph(g, z);
    let lambda = p.config.guidance.lambda_c;
    let (_, grad) = clf.class_loss_and_grad(dec, &v, &targets, lambda).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(77, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let i = rng.random_range(0..v.len());
        let h = 1e-5;
        let (mut vp, mut vm) = (v.clone(), v.clone());
        vp.data_mut()[i] += h;
        vm.data_mut()[i] -= h;
        let fp = clf.class_loss_and_grad(dec, &vp, &targets, lambda).map_err(|e| e.to_string())?.0;
        let fm = clf.class_loss_and_grad(dec, &vm, &targets, lambda).map_err(|e| e.to_string())?.0;
        let fd = (fp - fm) / (2.0 * h);
        let an = grad.data()[i];
        worst = worst.max((fd - an).abs() / an.abs().max(1e-6));
    }
    let applied = applied_gradient(&grad, 0.25);
    let factor_exact = applied.data().iter().zip(grad.data()).all(|(a, g)| *a == 2.0 * g);
    let mut lin: f64 = 0.0;
    for scale in [2.0, 0.75] {
        let (_, g2) = clf.class_loss_and_grad(dec, &v, &targets, lambda * scale).map_err(|e| e.to_string())?;
        for (a, b) in grad.data().iter().zip(g2.data()) {
            if b.abs() > 0.0 {
                lin = lin.max((b - scale * a).abs() / b.abs());
            }
        }
    }
    ensure(
        worst <= 1e-3 && factor_exact && lin <= 1e-6,
        format!("FD max rel err {worst:.2e} on 10 coords; prefactor at alpha_bar 0.25 exactly 2: {factor_exact}; lambda-linearity max rel err {lin:.2e}"),
    )
}

fn lambda_zero(p: &Pipeline, m: &Models, test: &[&LabeledImage<f32>]) -> Check {
    let diff = load_diffusion(p, true).map_err(|e| e.to_string())?;
    let engine = Engine::new(&m.clf, &m.codec, &diff).map_err(|e| e.to_string())?;
    let jobs: Vec<CfJob<'_, f32>> = test
        .iter()
        .take(4)
        .enumerate()
        .map(|(k, im)| CfJob { sample_id: &im.id, source_class: im.class_label, image: &im.image, target: (im.class_label + 1 + k % (m.clf.num_classes() - 1)) % m.clf.num_classes(), seed: 900 + k as u64 })
        .collect();
    let params = GuidanceParams { lambda_c: 0.0, ..p.config.guidance.clone() };
    let a = engine.generate(&jobs, &params).map_err(|e| e.to_string())?;
    let b = engine.reconstruct(&jobs, &params).map_err(|e| e.to_string())?;
    ensure(a == b, format!("{} trajectories of {} steps, guided(lambda=0) == unguided: {}", a.len(), params.t_start, a == b))
}

fn trajectory_count(p: &Pipeline) -> Check {
    let formula = images_per_sample(8, 10);
    let root = p.input(Stage::GenTrajectories).map_err(|e| e.to_string())?;
    let records = ctraj_core::counterfactual::read_trajectory_manifest(&root.join(ctraj_core::counterfactual::TRAJECTORY_MANIFEST))
        .map_err(|e| e.to_string())?;
    let k = p.config.data.num_classes;
    let mut per_sample: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for r in &records {
        per_sample.entry(&r.sample_id).or_default().push(r.failed);
    }
    let (id, _) = per_sample.iter().find(|(_, f)| f.len() == k - 1 && f.iter().all(|x| !x)).ok_or("no complete sample")?;
    let mut on_disk = 1;
    for r in records.iter().filter(|r| r.sample_id == *id) {
        on_disk += fs::read_dir(trajectory_dir(&root, id, r.target_class)).map_err(|e| e.to_string())?.count();
    }
    let expected = images_per_sample(k, p.config.guidance.t_start);
    ensure(
        formula == 78 && on_disk == expected,
        format!("(K-1)(t_start+1)+1 at K=8, t_start=10 = {formula}; sample {id} stores {on_disk} images, formula gives {expected}"),
    )
}

fn table(p: &Pipeline) -> Result<Vec<EvalReport>, String> {
    let dir = p.input(Stage::EvalCf).map_err(|e| e.to_string())?;
    stages::read_json(&dir.join(TABLE_JSON)).map_err(|e| e.to_string())
}

fn row<'a>(t: &'a [EvalReport], name: &str) -> Result<&'a EvalReport, String> {
    t.iter().find(|r| r.method == name).ok_or(format!("no row {name}"))
}

fn flip_ratio_check(p: &Pipeline) -> Check {
    let t = table(p)?;
    let r = row(&t, "conditional_ft")?;
    let g = &p.config.guidance;
    ensure(
        r.fr >= 0.9 && r.samples >= 200 && g.lambda_c == 4.0 && g.t_start == 10,
        format!("FR {:.4} over {} held-out counterfactuals ({} failed) at lambda_c {}, t_start {}", r.fr, r.samples, r.failed, g.lambda_c, g.t_start),
    )
}

fn fid_direction(p: &Pipeline) -> Check {
    let t = table(p)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in ["conditional", "unconditional"] {
        let ft = row(&t, &format!("{kind}_ft"))?.fid;
        let wo = row(&t, &format!("{kind}_wo_ft"))?.fid;
        ok &= ft < wo;
        parts.push(format!("{kind}: trained {ft:.3} vs undertrained {wo:.3}"));
    }
    ensure(ok, parts.join("; "))
}

fn fid_units() -> Check {
    let mut rng = seed::rng(4321, &[]);
    let draw = |rng: &mut seed::Rng, n: usize, mu: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| Tensor::<f64>::randn(&[8], rng).data().iter().map(|v| v + mu).collect()).collect()
    };
    let a = draw(&mut rng, 10_000, 0.0);
    let b = draw(&mut rng, 10_000, 2.0);
    let same = fid(&a, &a).map_err(|e| e.to_string())?;
    let ab = fid(&a, &b).map_err(|e| e.to_string())?;
    let ba = fid(&b, &a).map_err(|e| e.to_string())?;
    let rel = (ab - 32.0).abs() / 32.0;
    ensure(
        same <= 1e-6 && rel <= 0.02 && (ab - ba).abs() <= 1e-6,
        format!("fid(A,A) {same:.2e}; mu=2*ones(8): {ab:.4} vs 32 ({:.2}%); |fid(A,B)-fid(B,A)| {:.2e}", 100.0 * rel, (ab - ba).abs()),
    )
}

fn vae_objective(m: &Models, train: &[&LabeledImage<f32>]) -> Check {
    let clf: Classifier<f64> = m.clf.cast();
    let mut rng = seed::rng(31, &[]);
    let x = Tensor::<f64>::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let zeros = Tensor::<f64>::zeros(&[2, 16]);
    let w = VaeLossWeights::default();
    let min = vae_loss(&x, &x, &zeros, &zeros, &w, Some(&clf)).map_err(|e| e.to_string())?;
    let zero_ok = min.total.abs() <= 1e-9;
    let ones = Tensor::<f64>::ones(&[2, 16]);
    let kl = vae_loss(&x, &x, &ones, &zeros, &VaeLossWeights { w_kld: 1.0 }, None).map_err(|e| e.to_string())?.kld;
    let kl_ok = (kl / 16.0 - 0.5).abs() <= 1e-12;

    let r = Tensor::<f64>::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let x1 = Tensor::<f64>::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mu = Tensor::<f64>::randn(&[1, 16], &mut rng);
    let lv = Tensor::<f64>::randn(&[1, 16], &mut rng).scale(0.3);
    let g = Graph::new();
    let ri = g.input_with_grad(r.clone());
    let vars = vae_loss_graph(&g, g.input(x1.clone()), ri, g.input(mu.clone()), g.input(lv.clone()), &w, Some(&clf));
    let grad = g.backward(vars.total).get_or_zeros(ri);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let i = rng.random_range(0..r.len());
        let h = 1e-6;
        let (mut rp, mut rm) = (r.clone(), r.clone());
        rp.data_mut()[i] += h;
        rm.data_mut()[i] -= h;
        let fp = vae_loss(&x1, &rp, &mu, &lv, &w, Some(&clf)).map_err(|e| e.to_string())?.total;
        let fm = vae_loss(&x1, &rm, &mu, &lv, &w, Some(&clf)).map_err(|e| e.to_string())?.total;
        let an = grad.data()[i];
        worst = worst.max(((fp - fm) / (2.0 * h) - an).abs() / an.abs().max(1e-6));
    }

    let imgs: Vec<&Tensor<f32>> = train.iter().map(|im| &im.image).collect();
    let small = |w_kld: f64| VaeConfig {
        latent_dim: 16,
        channels: vec![8, 16, 16, 16, 16, 16],
        epochs: 4,
        batch_size: 32,
        lr: 2e-3,
        weights: VaeLossWeights { w_kld },
        ..VaeConfig::default()
    };
    let base = train_vae(&imgs, None, &small(1e-3)).map_err(|e| e.to_string())?;
    let strong = train_vae(&imgs, None, &small(1e-2)).map_err(|e| e.to_string())?;
    let mut trade = true;
    let mut epochs = Vec::new();
    for (a, b) in base.meta.history.iter().zip(&strong.meta.history).filter(|(a, _)| a.train.is_some()) {
        trade &= b.val.kld < a.val.kld && b.val.rec > a.val.rec;
        epochs.push(format!("e{}: KLD {:.2}->{:.2}, Rec {:.5}->{:.5}", a.epoch, a.val.kld, b.val.kld, a.val.rec, b.val.rec));
    }
    ensure(
        zero_ok && kl_ok && worst <= 1e-3 && trade,
        format!(
            "loss at minimum {:.1e}; KLD per dim at mu=1, var=1: {:.6}; FD max rel err {worst:.2e}; w_kld x10 {}",
            min.total,
            kl / 16.0,
            epochs.join(", ")
        ),
    )
}

fn algorithm1_oracle(m: &Models, train: &[&LabeledImage<f32>], test: &[&LabeledImage<f32>]) -> Check {
    let imgs: Vec<&Tensor<f32>> = train.iter().map(|im| &im.image).collect();
    let cfg = VaeConfig { latent_dim: 4, channels: vec![8, 16, 16, 16, 16, 16], epochs: 1, batch_size: 32, lr: 2e-3, ..VaeConfig::default() };
    let vae: Vae<f64> = train_vae(&imgs, None, &cfg).map_err(|e| e.to_string())?.cast();
    let clf: Classifier<f64> = m.clf.cast();
    let y = 2;
    let mut picked: Vec<(String, Tensor<f64>)> = Vec::new();
    for im in test {
        let x: Tensor<f64> = im.image.cast();
        let pred = clf.logits(&x.clone().reshape(&[1, 3, 32, 32]).unwrap()).map_err(|e| e.to_string())?.argmax_rows()[0];
        if pred != y {
            picked.push((im.id.clone(), x));
        }
        if picked.len() == 3 {
            break;
        }
    }
    let ids: Vec<String> = picked.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<&Tensor<f64>> = picked.iter().map(|p| &p.1).collect();
    let (report, _) = find_relevant_dimensions(&clf, &vae, &ids, &refs, y, 28).map_err(|e| e.to_string())?;
    let prob = |l: &[f64]| -> Result<f64, String> {
        let img = vae.decode(&Tensor::new(&[1, 4], l.to_vec()).unwrap()).map_err(|e| e.to_string())?;
        Ok(clf.predict(&img).map_err(|e| e.to_string())?.data()[y])
    };
    let mut sums = vec![0.0; 28];
    for x in &refs {
        let l = vae.encode(&(*x).clone().reshape(&[1, 3, 32, 32]).unwrap()).map_err(|e| e.to_string())?.data().to_vec();
        let base = prob(&l)?;
        for i in 0..4 {
            for (k, &d) in DIRECTIONS.iter().enumerate() {
                let mut lm = l.clone();
                lm[i] = d;
                sums[i * 7 + k] += prob(&lm)? - base;
            }
        }
    }
    let mut oracle: Vec<(usize, f64, f64)> = (0..28).map(|j| (j / 7, DIRECTIONS[j % 7], sums[j] / 3.0)).collect();
    oracle.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    let same_order = report.entries.iter().zip(&oracle).all(|(e, o)| (e.dimension, e.direction) == (o.0, o.1));
    let worst = report.entries.iter().zip(&oracle).map(|(e, o)| (e.mean_delta - o.2).abs()).fold(0.0, f64::max);
    ensure(
        same_order && report.entries.len() == 28 && worst <= 1e-12,
        format!("m=4, |X|=3: all 28 (i,d) pairs in identical order: {same_order}; max |mean delta diff| {worst:.1e}"),
    )
}

fn planted_bias(p: &Pipeline) -> Check {
    let ds = load_data(p).map_err(|e| e.to_string())?;
    let vae = stages::load_vae(p).map_err(|e| e.to_string())?;
    let class = p
        .config
        .data
        .bias_rules
        .iter()
        .find(|r| r.kind == ConceptKind::DarkCornerArtifact && r.probability == 1.0)
        .map(|r| r.class)
        .ok_or("config plants no dark corner bias at p = 1")?;
    let report = load_report(p, class).map_err(|e| e.to_string())?;
    let by_id: BTreeMap<&str, &Tensor<f32>> = ds.images.iter().map(|im| (im.id.as_str(), &im.image)).collect();
    let imgs: Vec<&Tensor<f32>> = report.image_ids.iter().map(|id| by_id[id.as_str()]).collect();
    let mask = corner_band_mask(ds.spec.image_size);
    let mut best: Option<(usize, f64, f64, usize)> = None;
    let mut rows = Vec::new();
    for (rank, e) in report.entries.iter().take(10).enumerate() {
        let map = mean_difference_map(&vae, &imgs, e.dimension, e.direction).map_err(|e| e.to_string())?;
        let ratio = mask_mean_ratio(&map, &mask).map_err(|e| e.to_string())?;
        rows.push(format!("#{rank} dim {} d {}: ratio {ratio:.2}, success {:.3}", e.dimension, e.direction, e.success_rate));
        if ratio >= 3.0 && e.success_rate >= 0.65 && best.is_none() {
            best = Some((e.dimension, e.direction, ratio, rank));
        }
    }
    match best {
        Some((i, d, r, rank)) => Ok(format!("class {class}: rank {rank} dim {i} d {d} corner/interior {r:.2} (top-10: {})", rows.join("; "))),
        None => Err(format!("class {class}: no top-10 entry with ratio >= 3 and success >= 0.65 ({})", rows.join("; "))),
    }
}

fn color_audit(p: &Pipeline) -> Check {
    let ds = load_data(p).map_err(|e| e.to_string())?;
    let red = p.config.data.bias_rules.iter().find(|r| r.kind == ConceptKind::RedHueShift).map(|r| r.class).ok_or("no red bias planted")?;
    let all: Vec<&LabeledImage<f32>> = ds.images.iter().collect();
    let rows = color_bias_audit(&all, ds.spec.num_classes);
    let mine = rows.iter().find(|r| r.class == red).ok_or("planted class missing")?.skin_red;
    let others = rows.iter().filter(|r| r.class != red).map(|r| r.skin_red).fold(f64::NEG_INFINITY, f64::max);
    ensure(mine > others, format!("class {red} background red {mine:.2} vs highest other {others:.2}"))
}

fn determinism(p: &Pipeline) -> Check {
    match p.run(Stage::Discover) {
        Ok(Outcome::Reproduced) => Ok(format!("discover rerun byte-identical for {} reports", p.config.data.num_classes)),
        Ok(o) => Err(format!("unexpected outcome {o:?}")),
        Err(e) => Err(e.to_string()),
    }
}

fn main() {
    let cfg = acceptance_config();
    println!("acceptance run: {} (run id {}, config {})", cfg.paths.artifact_dir.display(), cfg.run_id, cfg.fingerprint());
    let p = Pipeline::new(cfg);
    let start = Instant::now();
    if let Err(e) = p.run_all() {
        println!("FAIL pipeline: {e}");
        std::process::exit(1);
    }
    println!("pipeline ready in {:.0}s", start.elapsed().as_secs_f64());
    let ds = load_data(&p).expect("dataset");
    let models = Models { clf: load_classifier(&p).expect("classifier"), codec: load_codec(&p).expect("codec") };
    let test = ds.split(Split::Test);
    let train = ds.split(Split::Train);
    let small_train: Vec<&LabeledImage<f32>> = train.iter().take(320).copied().collect();

    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("forward-noise statistics", Box::new(eq1_statistics)),
        ("guidance gradient", Box::new(|| eq2_guidance(&p, &models, &test))),
        ("lambda_c = 0 identity", Box::new(|| lambda_zero(&p, &models, &test))),
        ("trajectory accounting", Box::new(|| trajectory_count(&p))),
        ("flip ratio", Box::new(|| flip_ratio_check(&p))),
        ("trained vs undertrained FID", Box::new(|| fid_direction(&p))),
        ("FID unit tests", Box::new(fid_units)),
        ("VAE objective", Box::new(|| vae_objective(&models, &small_train))),
        ("relevant-dimension oracle", Box::new(|| algorithm1_oracle(&models, &small_train, &test))),
        ("planted-bias recovery", Box::new(|| planted_bias(&p))),
        ("color-bias audit", Box::new(|| color_audit(&p))),
        ("discover determinism", Box::new(|| determinism(&p))),
    ];
    let mut failed = 0;
    for (name, f) in &checks {
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 && std::env::var_os("CTRAJ_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

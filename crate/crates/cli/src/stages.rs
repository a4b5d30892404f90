//! Stage bodies. Each writes into the directory it is given and returns a
//! JSON summary for the sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ctraj_core::classifier::{train_classifier, Classifier};
use ctraj_core::codec::{train_codec, Codec};
use ctraj_core::concepts::{concept_montage, find_relevant_dimensions, mask_mean_ratio, mean_difference_map, montage_png, ConceptReport};
use ctraj_core::counterfactual::{
    all_target_jobs, build_trajectory_dataset, read_trajectory_manifest, trajectory_dir, Engine, GuidanceParams, TrajectoryRecord,
    TRAJECTORY_MANIFEST,
};
use ctraj_core::data::{self, color_bias_audit, corner_band_mask, generate_dataset, load_dataset, write_dataset, ConceptKind, Dataset, LabeledImage, Split};
use ctraj_core::diffusion::{default_vocab, train_diffusion, DiffusionModel, LatentExample};
use ctraj_core::image_io;
use ctraj_core::metrics::{evaluate_counterfactuals, reports_to_csv, CfPair, EvalReport};
use ctraj_core::vae::{train_vae, Vae};
use ctraj_core::Tensor;
use ctraj_explorer::{ExplorerState, ServedImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::pipeline::{list_files, Pipeline, Stage};

type R<T> = Result<T, CliError>;

/// Method names of the four counterfactual variants, with whether the
/// outer step is class conditioned and whether the fully trained diffusion
/// model is used.
pub const CF_VARIANTS: [(&str, bool, bool); 4] = [
    ("unconditional_wo_ft", false, false),
    ("unconditional_ft", false, true),
    ("conditional_wo_ft", true, false),
    ("conditional_ft", true, true),
];

pub const TRAIN_TRAJECTORIES: &str = "train_trajectories";
pub const TABLE_JSON: &str = "table1.json";
pub const TABLE_CSV: &str = "table1.csv";
pub const BIAS_CHECK: &str = "bias_check.json";

pub fn report_file(class: usize) -> String {
    format!("report_{class}.json")
}

pub fn run_stage(p: &Pipeline, stage: Stage, out: &Path) -> R<Value> {
    match stage {
        Stage::Data => data_stage(p, out),
        Stage::AuditBias => audit_bias(p, out),
        Stage::TrainClassifier => train_classifier_stage(p, out),
        Stage::TrainCodec => train_codec_stage(p, out),
        Stage::TrainDiffusion => train_diffusion_stage(p, out),
        Stage::GenCf => gen_cf(p, out),
        Stage::GenTrajectories => gen_trajectories(p, out),
        Stage::EvalCf => eval_cf(p, out),
        Stage::TrainVae => train_vae_stage(p, out),
        Stage::Discover => discover(p, out),
        Stage::Montage => montage(p, out),
        Stage::Serve => unreachable!("serve has no artifacts"),
    }
}

/// Same file list and same bytes in every file.
pub fn outputs_identical(a: &Path, b: &Path) -> R<bool> {
    let fa: Vec<PathBuf> = list_files(a)?.into_iter().filter(|f| f.as_os_str() != crate::pipeline::SIDECAR).collect();
    let fb: Vec<PathBuf> = list_files(b)?.into_iter().filter(|f| f.as_os_str() != crate::pipeline::SIDECAR).collect();
    if fa != fb {
        return Ok(false);
    }
    for f in &fa {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            log::warn!("{} differs", f.display());
            return Ok(false);
        }
    }
    Ok(true)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> R<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> R<S> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn load_data(p: &Pipeline) -> R<Dataset<f32>> {
    Ok(load_dataset(&p.input(Stage::Data)?, &p.config.data)?)
}

pub fn load_classifier(p: &Pipeline) -> R<Classifier<f32>> {
    Ok(Classifier::load(&p.input(Stage::TrainClassifier)?, "classifier")?)
}

pub fn load_codec(p: &Pipeline) -> R<Codec<f32>> {
    Ok(Codec::load(&p.input(Stage::TrainCodec)?, "codec")?)
}

pub fn load_diffusion(p: &Pipeline, trained: bool) -> R<DiffusionModel<f32>> {
    let stem = if trained { "diffusion" } else { "diffusion_undertrained" };
    Ok(DiffusionModel::load(&p.input(Stage::TrainDiffusion)?, stem)?)
}

pub fn load_vae(p: &Pipeline) -> R<Vae<f32>> {
    Ok(Vae::load(&p.input(Stage::TrainVae)?, "vae")?)
}

pub fn load_report(p: &Pipeline, class: usize) -> R<ConceptReport> {
    let path = p.input(Stage::Discover)?.join(report_file(class));
    Ok(ConceptReport::from_json(&fs::read_to_string(path)?)?)
}

fn stack(images: &[&Tensor<f32>]) -> R<Tensor<f32>> {
    Ok(data::batch(images)?)
}

/// The first `n` images of every class, in dataset order.
fn per_class<'a>(images: &[&'a LabeledImage<f32>], num_classes: usize, n: usize) -> Vec<&'a LabeledImage<f32>> {
    let mut counts = vec![0; num_classes];
    images
        .iter()
        .filter(|im| {
            counts[im.class_label] += 1;
            counts[im.class_label] <= n
        })
        .copied()
        .collect()
}

fn data_stage(p: &Pipeline, out: &Path) -> R<Value> {
    let mut spec = p.config.data.clone();
    spec.rng_seed = p.stage_seed(Stage::Data, spec.rng_seed);
    let ds = generate_dataset::<f32>(&spec)?;
    write_dataset(&ds, out)?;
    let mut counts = BTreeMap::new();
    for im in &ds.images {
        *counts.entry(format!("{}/{}", im.split.name(), data::class_name(im.class_label))).or_insert(0usize) += 1;
    }
    Ok(json!({"images": ds.len(), "rng_seed": spec.rng_seed, "counts": counts}))
}

fn audit_bias(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let all: Vec<&LabeledImage<f32>> = ds.images.iter().collect();
    let rows = color_bias_audit(&all, ds.spec.num_classes);
    write_json(&out.join("audit.json"), &rows)?;
    let mut csv = String::from("class,class_name,count,lesion_red,skin_red,lesion_saturation,skin_saturation\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.class, r.class_name, r.count, r.lesion_red, r.skin_red, r.lesion_saturation, r.skin_saturation
        ));
    }
    fs::write(out.join("audit.csv"), csv)?;
    let reddest = rows.iter().max_by(|a, b| a.skin_red.total_cmp(&b.skin_red)).map(|r| r.class);
    Ok(json!({"highest_skin_red_class": reddest}))
}

fn labeled<'a>(items: &[&'a LabeledImage<f32>]) -> Vec<(&'a Tensor<f32>, usize)> {
    items.iter().map(|im| (&im.image, im.class_label)).collect()
}

fn train_classifier_stage(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let mut cfg = p.config.classifier.clone();
    cfg.seed = p.stage_seed(Stage::TrainClassifier, cfg.seed);
    let (train, val, test) = (ds.split(Split::Train), ds.split(Split::Val), ds.split(Split::Test));
    let clf = train_classifier(&labeled(&train), &labeled(&val), ds.spec.num_classes, &cfg)?;
    clf.save(out, "classifier")?;
    let test_x = stack(&test.iter().map(|im| &im.image).collect::<Vec<_>>())?;
    let test_y: Vec<usize> = test.iter().map(|im| im.class_label).collect();
    let acc = clf.accuracy(&test_x, &test_y)?;
    Ok(json!({"val_accuracy": clf.meta.val_accuracy, "test_accuracy": acc}))
}

fn train_codec_stage(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let clf = load_classifier(p)?;
    let mut cfg = p.config.codec.clone();
    cfg.seed = p.stage_seed(Stage::TrainCodec, cfg.seed);
    let imgs: Vec<&Tensor<f32>> = ds.split(Split::Train).iter().map(|im| &im.image).collect();
    let perceptual = (cfg.perceptual_weight > 0.0).then_some(&clf);
    let codec = train_codec(&imgs, perceptual, &cfg)?;
    codec.save(out, "codec")?;
    Ok(json!({"psnr_val": codec.meta.psnr_val, "latent_scale": codec.meta.latent_scale, "latent_shape": codec.meta.latent_shape}))
}

fn train_diffusion_stage(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let codec = load_codec(p)?;
    let train = ds.split(Split::Train);
    let x = stack(&train.iter().map(|im| &im.image).collect::<Vec<_>>())?;
    let z = codec.encode(&x)?;
    let latents: Vec<Tensor<f32>> = (0..z.dim(0)).map(|i| z.select(i)).collect();
    let tokens: Vec<Vec<String>> = train.iter().map(|im| im.caption_tokens()).collect();
    let examples: Vec<LatentExample<'_, f32>> =
        latents.iter().zip(&tokens).map(|(l, t)| LatentExample { latent: l, tokens: t }).collect();
    let mut cfg = p.config.diffusion.clone();
    cfg.seed = p.stage_seed(Stage::TrainDiffusion, cfg.seed);
    cfg.unet.seed = p.stage_seed(Stage::TrainDiffusion, cfg.unet.seed);
    let vocab = default_vocab(ds.spec.num_classes);
    let (model, _) = train_diffusion(&examples, vocab.clone(), &cfg)?;
    model.save(out, "diffusion")?;
    let short = ctraj_core::diffusion::DiffusionConfig {
        train_steps: (cfg.train_steps / p.config.eval.undertrained_factor).max(1),
        ..cfg.clone()
    };
    let (weak, _) = train_diffusion(&examples, vocab, &short)?;
    weak.save(out, "diffusion_undertrained")?;
    Ok(json!({
        "trained": {"steps": model.meta.steps_trained, "loss_first": model.meta.loss_first, "loss_last": model.meta.loss_last},
        "undertrained": {"steps": weak.meta.steps_trained, "loss_first": weak.meta.loss_first, "loss_last": weak.meta.loss_last},
    }))
}

fn flip_summary(records: &[TrajectoryRecord]) -> Value {
    let failed = records.iter().filter(|r| r.failed).count();
    let flipped = records.iter().filter(|r| r.flipped).count();
    json!({"trajectories": records.len(), "failed": failed, "flipped": flipped})
}

fn gen_cf(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let clf = load_classifier(p)?;
    let codec = load_codec(p)?;
    let picked = per_class(&ds.split(Split::Test), ds.spec.num_classes, p.config.eval.images_per_class);
    let jobs = all_target_jobs(&picked, ds.spec.num_classes, p.stage_seed(Stage::GenCf, 0));
    let mut summary = serde_json::Map::new();
    for trained in [true, false] {
        let diff = load_diffusion(p, trained)?;
        let engine = Engine::new(&clf, &codec, &diff)?;
        for (name, conditional, _) in CF_VARIANTS.iter().filter(|v| v.2 == trained) {
            let params = GuidanceParams { conditional: *conditional, ..p.config.guidance.clone() };
            log::info!("gen-cf: {name}, {} jobs", jobs.len());
            let records = build_trajectory_dataset(&engine, &jobs, &params, &out.join(name))?;
            summary.insert(name.to_string(), flip_summary(&records));
        }
    }
    Ok(Value::Object(summary))
}

fn gen_trajectories(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let clf = load_classifier(p)?;
    let codec = load_codec(p)?;
    let diff = load_diffusion(p, true)?;
    let engine = Engine::new(&clf, &codec, &diff)?;
    let picked = per_class(&ds.split(Split::Train), ds.spec.num_classes, p.config.trajectories.max_samples_per_class);
    let jobs = all_target_jobs(&picked, ds.spec.num_classes, p.stage_seed(Stage::GenTrajectories, 0));
    log::info!("gen-trajectories: {} samples, {} jobs", picked.len(), jobs.len());
    let records = build_trajectory_dataset(&engine, &jobs, &p.config.guidance, out)?;
    Ok(flip_summary(&records))
}

fn evaluate_set(
    method: &str,
    root: &Path,
    ds: &Dataset<f32>,
    real: &[&Tensor<f32>],
    clf: &Classifier<f32>,
    fingerprint: &str,
) -> R<EvalReport> {
    let records = read_trajectory_manifest(&root.join(TRAJECTORY_MANIFEST))?;
    let by_id: BTreeMap<&str, &LabeledImage<f32>> = ds.images.iter().map(|im| (im.id.as_str(), im)).collect();
    let mut cfs: Vec<Option<Tensor<f32>>> = Vec::with_capacity(records.len());
    for r in &records {
        cfs.push(if r.failed {
            None
        } else {
            Some(image_io::load_png(&trajectory_dir(root, &r.sample_id, r.target_class).join("cf.png"))?)
        });
    }
    let mut pairs = Vec::with_capacity(records.len());
    for (r, cf) in records.iter().zip(&cfs) {
        let factual = by_id.get(r.sample_id.as_str()).ok_or_else(|| {
            CliError::Core(ctraj_core::Error::Precondition(format!("{method}: sample {} not in the dataset", r.sample_id)))
        })?;
        pairs.push(CfPair { factual: &factual.image, counterfactual: cf.as_ref(), target: r.target_class });
    }
    Ok(evaluate_counterfactuals(method, &pairs, real, clf, fingerprint)?)
}

fn eval_cf(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let clf = load_classifier(p)?;
    let cf_root = p.input(Stage::GenCf)?;
    let traj_root = p.input(Stage::GenTrajectories)?;
    let real: Vec<&Tensor<f32>> = ds.split(Split::Test).iter().map(|im| &im.image).collect();
    let fp = p.config.fingerprint();
    let mut reports = Vec::new();
    for (name, _, _) in CF_VARIANTS {
        reports.push(evaluate_set(name, &cf_root.join(name), &ds, &real, &clf, &fp)?);
    }
    reports.push(evaluate_set(TRAIN_TRAJECTORIES, &traj_root, &ds, &real, &clf, &fp)?);
    write_json(&out.join(TABLE_JSON), &reports)?;
    fs::write(out.join(TABLE_CSV), reports_to_csv(&reports))?;
    Ok(json!(reports))
}

/// Every PNG of the non-failed trajectories: factuals, intermediate images
/// and counterfactuals.
pub fn trajectory_images(root: &Path) -> R<Vec<Tensor<f32>>> {
    let records = read_trajectory_manifest(&root.join(TRAJECTORY_MANIFEST))?;
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| !r.failed) {
        if seen.insert(r.sample_id.clone()) {
            out.push(image_io::load_png(&root.join(&r.sample_id).join("factual.png"))?);
        }
        let dir = trajectory_dir(root, &r.sample_id, r.target_class);
        for f in list_files(&dir)? {
            if f.extension().is_some_and(|e| e == "png") {
                out.push(image_io::load_png(&dir.join(f))?);
            }
        }
    }
    Ok(out)
}

fn train_vae_stage(p: &Pipeline, out: &Path) -> R<Value> {
    let clf = load_classifier(p)?;
    let images = trajectory_images(&p.input(Stage::GenTrajectories)?)?;
    log::info!("train-vae: {} trajectory images", images.len());
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let mut cfg = p.config.vae.clone();
    cfg.seed = p.stage_seed(Stage::TrainVae, cfg.seed);
    let vae = train_vae(&refs, Some(&clf), &cfg)?;
    vae.save(out, "vae")?;
    let mut csv = String::from("epoch,lr,train_total,val_rec,val_kld,val_l1,val_ssim,val_perc,val_total,psnr_val\n");
    for h in &vae.meta.history {
        let tr = h.train.map_or(String::new(), |t| format!("{}", t.total));
        let v = &h.val;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            h.epoch, h.lr, tr, v.rec, v.kld, v.l1, v.ssim, v.perc, v.total, h.psnr_val
        ));
    }
    fs::write(out.join("history.csv"), csv)?;
    Ok(json!({"images": images.len(), "psnr_val": vae.meta.psnr_val, "final": vae.meta.loss_components_final}))
}

/// Test images of other classes that the classifier does not already
/// assign to `y`, taken round-robin over source classes, at most `max`.
pub fn search_set<'a>(
    clf: &Classifier<f32>,
    test: &[&'a LabeledImage<f32>],
    y: usize,
    max: usize,
) -> R<Vec<&'a LabeledImage<f32>>> {
    let others: Vec<&LabeledImage<f32>> = test.iter().filter(|im| im.class_label != y).copied().collect();
    if others.is_empty() {
        return Ok(others);
    }
    let pred = clf.logits(&stack(&others.iter().map(|im| &im.image).collect::<Vec<_>>())?)?.argmax_rows();
    let mut by_class: BTreeMap<usize, Vec<&LabeledImage<f32>>> = BTreeMap::new();
    for (im, p) in others.into_iter().zip(pred) {
        if p != y {
            by_class.entry(im.class_label).or_default().push(im);
        }
    }
    let longest = by_class.values().map(Vec::len).max().unwrap_or(0);
    Ok((0..longest).flat_map(|k| by_class.values().filter_map(move |v| v.get(k).copied())).take(max).collect())
}

fn discover(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let clf = load_classifier(p)?;
    let vae = load_vae(p)?;
    let test = ds.split(Split::Test);
    let mut summary = serde_json::Map::new();
    for y in 0..ds.spec.num_classes {
        let set = search_set(&clf, &test, y, p.config.discover.max_images)?;
        let ids: Vec<String> = set.iter().map(|im| im.id.clone()).collect();
        let imgs: Vec<&Tensor<f32>> = set.iter().map(|im| &im.image).collect();
        let (report, table) = find_relevant_dimensions(&clf, &vae, &ids, &imgs, y, p.config.discover.k)?;
        fs::write(out.join(report_file(y)), report.to_json()?)?;
        fs::write(out.join(format!("report_{y}.csv")), report.to_csv())?;
        fs::write(out.join(format!("deltas_{y}.csv")), table.to_csv())?;
        let top = report.entries.first().map(|e| json!({"dimension": e.dimension, "direction": e.direction, "mean_delta": e.mean_delta, "success_rate": e.success_rate}));
        summary.insert(report.target_name.clone(), json!({"images": ids.len(), "top": top}));
    }
    Ok(Value::Object(summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MontageEntry {
    pub rank: usize,
    pub dimension: usize,
    pub direction: f64,
    pub success_rate: f64,
    /// Mean of the averaged difference map in the corner band over its
    /// mean in the rest of the image.
    pub corner_ratio: f64,
    pub strip: String,
    pub difference_map: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    pub class: usize,
    pub class_name: String,
    pub entries: Vec<MontageEntry>,
}

fn montage(p: &Pipeline, out: &Path) -> R<Value> {
    let ds = load_data(p)?;
    let vae = load_vae(p)?;
    let by_id: BTreeMap<&str, &LabeledImage<f32>> = ds.images.iter().map(|im| (im.id.as_str(), im)).collect();
    let mask = corner_band_mask(ds.spec.image_size);
    let mut checks = Vec::new();
    for y in 0..ds.spec.num_classes {
        let report = load_report(p, y)?;
        let imgs: Vec<&Tensor<f32>> = report.image_ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|im| &im.image)).collect();
        if imgs.len() != report.image_ids.len() {
            return Err(CliError::Core(ctraj_core::Error::Precondition(format!("report for class {y} names images missing from the dataset"))));
        }
        let dir = out.join(format!("class_{y}"));
        fs::create_dir_all(&dir)?;
        let mut entries = Vec::new();
        for (rank, e) in report.entries.iter().take(p.config.montage.top).enumerate() {
            let stem = format!("rank{rank:02}_dim{}_d{}", e.dimension, e.direction);
            let strip = format!("class_{y}/{stem}.png");
            let diff = format!("class_{y}/{stem}_diff.png");
            fs::write(out.join(&strip), montage_png(&concept_montage(&vae, imgs[0], e.dimension, e.direction)?)?)?;
            let map = mean_difference_map(&vae, &imgs, e.dimension, e.direction)?;
            image_io::save_png(&map, &out.join(&diff))?;
            entries.push(MontageEntry {
                rank,
                dimension: e.dimension,
                direction: e.direction,
                success_rate: e.success_rate,
                corner_ratio: mask_mean_ratio(&map, &mask)?,
                strip,
                difference_map: diff,
            });
        }
        checks.push(BiasCheck { class: y, class_name: report.target_name.clone(), entries });
    }
    write_json(&out.join(BIAS_CHECK), &checks)?;
    let dark: Vec<usize> = p
        .config
        .data
        .bias_rules
        .iter()
        .filter(|r| r.kind == ConceptKind::DarkCornerArtifact)
        .map(|r| r.class)
        .collect();
    let best: Vec<Value> = checks
        .iter()
        .filter(|c| dark.contains(&c.class))
        .map(|c| {
            let b = c.entries.iter().filter(|e| e.success_rate >= 0.65).map(|e| e.corner_ratio).fold(f64::NAN, f64::max);
            json!({"class": c.class, "best_corner_ratio_with_success_0.65": b})
        })
        .collect();
    Ok(json!({"dark_corner_classes": best}))
}

pub fn explorer_state(p: &Pipeline) -> R<ExplorerState> {
    let ds = load_data(p)?;
    let clf = load_classifier(p)?;
    let vae = load_vae(p)?;
    let mut reports = BTreeMap::new();
    for y in 0..ds.spec.num_classes {
        reports.insert(y, load_report(p, y)?);
    }
    let images = ds
        .images
        .into_iter()
        .map(|im| ServedImage { id: im.id, split: im.split, class: im.class_label, image: im.image })
        .collect();
    Ok(ExplorerState::new(clf, vae, reports, images, p.config.fingerprint())?)
}

pub fn serve(p: &Pipeline) -> R<()> {
    let state = Arc::new(explorer_state(p)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ctraj_explorer::serve(&p.config.serve.addr, state))?;
    Ok(())
}

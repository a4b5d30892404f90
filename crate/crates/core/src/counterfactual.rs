//! Classifier-guided reverse diffusion producing counterfactual trajectories.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ctraj_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::codec::Codec;
use crate::data::{class_token, LabeledImage};
use crate::diffusion::{ddim_step, denoise_from, pndm_step, DiffusionModel, PndmState, SamplerKind};
use crate::error::{invalid, Error, Result};
use crate::image_io;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceParams {
    pub lambda_c: f64,
    /// Sampler index at which guidance starts.
    pub t_start: usize,
    /// Condition the outer noise estimate on the target class token.
    pub conditional: bool,
    /// Also condition the inner clean-up denoise (off: always null).
    pub inner_conditional: bool,
    pub sampler: SamplerKind,
    /// Trajectories run together in one batch.
    pub batch_size: usize,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams { lambda_c: 4.0, t_start: 10, conditional: true, inner_conditional: false, sampler: SamplerKind::Pndm, batch_size: 32 }
    }
}

impl GuidanceParams {
    pub fn validate(&self, sampler_len: usize) -> Result<()> {
        if !(1..=sampler_len).contains(&self.t_start) {
            return Err(invalid(format!("t_start {} outside 1..={sampler_len}", self.t_start)));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(invalid(format!("lambda_c must be finite and >= 0, got {}", self.lambda_c)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Images stored per factual sample: the factual plus, for every other
/// class, the intermediate clean images and the counterfactual.
pub fn images_per_sample(num_classes: usize, t_start: usize) -> usize {
    (num_classes - 1) * (t_start + 1) + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep<T: Scalar> {
    /// Sampler index.
    pub t: usize,
    pub image: Tensor<T>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub sample_id: String,
    pub source_class: usize,
    pub target_y: usize,
    pub seed: u64,
    pub factual: Tensor<T>,
    pub steps: Vec<TrajectoryStep<T>>,
    pub counterfactual: Tensor<T>,
    pub cf_probs: Vec<f64>,
    pub flipped: bool,
}

/// Result of the guidance computation at one step.
pub struct Guidance<T: Scalar> {
    /// Clean latent estimate.
    pub v: Tensor<T>,
    /// Gradient of `lambda * CE` with respect to `v`.
    pub grad_v: Tensor<T>,
    /// `grad_v / sqrt(alpha_bar_t)`, the update subtracted from `z_t`.
    pub applied: Tensor<T>,
    pub loss: f64,
}

pub fn applied_gradient<T: Scalar>(grad_v: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    grad_v.scale(T::lit(1.0 / alpha_bar.sqrt()))
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// The three trained models wired together.
pub struct Engine<'a, T: Scalar = f32> {
    pub classifier: &'a Classifier<T>,
    pub codec: &'a Codec<T>,
    pub diffusion: &'a DiffusionModel<T>,
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn new(classifier: &'a Classifier<T>, codec: &'a Codec<T>, diffusion: &'a DiffusionModel<T>) -> Result<Self> {
        if codec.latent_shape() != diffusion.meta.latent_shape {
            return Err(Error::ShapeMismatch(format!(
                "codec latents {:?} vs diffusion latents {:?}",
                codec.latent_shape(),
                diffusion.meta.latent_shape
            )));
        }
        if codec.image_size() != classifier.image_size() {
            return Err(Error::ShapeMismatch("codec and classifier image sizes differ".into()));
        }
        Ok(Engine { classifier, codec, diffusion })
    }

    fn condition_rows(&self, targets: &[usize], conditional: bool) -> Result<Vec<Vec<usize>>> {
        targets
            .iter()
            .map(|&y| if conditional { self.diffusion.condition_rows(&[class_token(y)]) } else { self.diffusion.condition_rows(&[]) })
            .collect()
    }

    /// Unguided denoise of `z` from sampler index `s` to 0 with a fresh
    /// sampler state.
    pub fn clean_estimate(&self, z: &Tensor<T>, s: usize, rows: &[Vec<usize>], kind: SamplerKind) -> Result<Tensor<T>> {
        let mut f = self.diffusion.noise_fn_rows(rows);
        denoise_from(&mut f, &self.diffusion.schedule, kind, z, s)
    }

    /// Guidance update at sampler index `s` for noisy latents `z`.
    pub fn guidance(&self, z: &Tensor<T>, s: usize, targets: &[usize], params: &GuidanceParams) -> Result<Guidance<T>> {
        let inner = self.condition_rows(targets, params.conditional && params.inner_conditional)?;
        let v = self.clean_estimate(z, s, &inner, params.sampler)?;
        self.guidance_at(&v, s, targets, params.lambda_c)
    }

    /// Steps 2 and 3 for a given clean estimate `v`.
    pub fn guidance_at(&self, v: &Tensor<T>, s: usize, targets: &[usize], lambda_c: f64) -> Result<Guidance<T>> {
        let codec = self.codec;
        let (loss, grad_v) = self.classifier.class_loss_and_grad(|g, x| codec.decode_graph(g, x), v, targets, lambda_c)?;
        let ab = self.diffusion.schedule.alpha_bar(self.diffusion.schedule.timestep(s));
        let applied = applied_gradient(&grad_v, ab);
        Ok(Guidance { v: v.clone(), grad_v, applied, loss })
    }

    /// Runs the reverse process from `z_start` at sampler index `t_start`,
    /// recording clean images and probabilities. With `guided == false` no
    /// gradient is computed (the unguided reconstruction).
    fn run(
        &self,
        z_start: Tensor<T>,
        targets: &[usize],
        params: &GuidanceParams,
        guided: bool,
    ) -> Result<(Vec<Vec<TrajectoryStep<T>>>, Tensor<T>)> {
        let n = targets.len();
        let schedule = &self.diffusion.schedule;
        let outer = self.condition_rows(targets, params.conditional)?;
        let inner = self.condition_rows(targets, params.conditional && params.inner_conditional)?;
        let mut outer_fn = self.diffusion.noise_fn_rows(&outer);
        let mut state = PndmState::new();
        let mut steps: Vec<Vec<TrajectoryStep<T>>> = vec![Vec::with_capacity(params.t_start); n];
        let mut z = z_start;
        for s in (1..=params.t_start).rev() {
            let (t, tp) = (schedule.timestep(s), schedule.timestep(s - 1));
            let v = self.clean_estimate(&z, s, &inner, params.sampler)?;
            let x = self.codec.decode(&v)?;
            let probs = self.classifier.predict(&x)?;
            for k in 0..n {
                steps[k].push(TrajectoryStep {
                    t: s,
                    image: x.select(k),
                    probs: probs.item_slice(k).iter().map(|p| p.as_f64()).collect(),
                });
            }
            let z_tilde = if guided {
                let gd = self.guidance_at(&v, s, targets, params.lambda_c)
                    .map_err(|e| Error::Diverged(format!("guided step at sampler index {s}: {e}")))?;
                z.zip_map(&gd.applied, |a, g| a - g)?
            } else {
                z
            };
            z = match params.sampler {
                SamplerKind::Pndm => pndm_step(&mut outer_fn, schedule, &mut state, &z_tilde, t, tp)?,
                SamplerKind::Ddim => ddim_step(&mut outer_fn, schedule, &z_tilde, t, tp)?,
            };
            if !z.all_finite() {
                return Err(Error::NonFinite(format!("latents after sampler index {s}")));
            }
        }
        Ok((steps, z))
    }

    /// Noised start latents `z_{t_start}` for each factual, each with its own
    /// seeded noise.
    pub fn start_latents(&self, factuals: &Tensor<T>, seeds: &[u64], t_start: usize) -> Result<Tensor<T>> {
        let z0 = self.codec.encode(factuals)?;
        let item = z0.item_len();
        let mut eps = Vec::with_capacity(z0.len());
        for &sd in seeds {
            let shape = &z0.shape()[1..];
            eps.extend(Tensor::<T>::randn(shape, &mut seed::rng(sd, &[0xe95])).into_data());
        }
        debug_assert_eq!(eps.len(), seeds.len() * item);
        let eps = Tensor::new(z0.shape(), eps)?;
        let schedule = &self.diffusion.schedule;
        schedule.forward_noise(&z0, schedule.timestep(t_start), &eps)
    }

    fn trajectories(
        &self,
        items: &[(&str, usize, &Tensor<T>, usize, u64)],
        params: &GuidanceParams,
        guided: bool,
    ) -> Result<Vec<Trajectory<T>>> {
        params.validate(self.diffusion.schedule.sampler_len())?;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(params.batch_size) {
            let imgs: Vec<&Tensor<T>> = chunk.iter().map(|c| c.2).collect();
            let x = crate::util::gather(&imgs, &(0..imgs.len()).collect::<Vec<_>>());
            let seeds: Vec<u64> = chunk.iter().map(|c| c.4).collect();
            let targets: Vec<usize> = chunk.iter().map(|c| c.3).collect();
            let z = self.start_latents(&x, &seeds, params.t_start)?;
            let (steps, z0) = self.run(z, &targets, params, guided)?;
            let cf = self.codec.decode(&z0)?;
            let probs = self.classifier.predict(&cf)?;
            for (k, (st, c)) in steps.into_iter().zip(chunk).enumerate() {
                let cf_probs: Vec<f64> = probs.item_slice(k).iter().map(|p| p.as_f64()).collect();
                out.push(Trajectory {
                    sample_id: c.0.to_string(),
                    source_class: c.1,
                    target_y: c.3,
                    seed: c.4,
                    factual: c.2.clone(),
                    steps: st,
                    counterfactual: cf.select(k),
                    flipped: argmax(&cf_probs) == c.3,
                    cf_probs,
                });
            }
        }
        Ok(out)
    }

    /// Guided counterfactuals for `(image, target, seed)` jobs.
    pub fn generate(&self, jobs: &[CfJob<'_, T>], params: &GuidanceParams) -> Result<Vec<Trajectory<T>>> {
        let items: Vec<_> = jobs.iter().map(|j| (j.sample_id, j.source_class, j.image, j.target, j.seed)).collect();
        self.trajectories(&items, params, true)
    }

    /// The same reverse process without guidance.
    pub fn reconstruct(&self, jobs: &[CfJob<'_, T>], params: &GuidanceParams) -> Result<Vec<Trajectory<T>>> {
        let items: Vec<_> = jobs.iter().map(|j| (j.sample_id, j.source_class, j.image, j.target, j.seed)).collect();
        self.trajectories(&items, params, false)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CfJob<'a, T: Scalar> {
    pub sample_id: &'a str,
    pub source_class: usize,
    pub image: &'a Tensor<T>,
    pub target: usize,
    pub seed: u64,
}

/// Seed of the trajectory `(sample, target)` under a base seed.
pub fn job_seed(base: u64, sample_id: &str, target: usize) -> u64 {
    seed::derive(base, &[seed::hash_str(sample_id), target as u64])
}

/// One `(factual, target)` job per other class for every image.
pub fn all_target_jobs<'a, T: Scalar>(images: &[&'a LabeledImage<T>], num_classes: usize, base_seed: u64) -> Vec<CfJob<'a, T>> {
    let mut jobs = Vec::new();
    for im in images {
        for y in (0..num_classes).filter(|&y| y != im.class_label) {
            jobs.push(CfJob {
                sample_id: &im.id,
                source_class: im.class_label,
                image: &im.image,
                target: y,
                seed: job_seed(base_seed, &im.id, y),
            });
        }
    }
    jobs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub sample_id: String,
    pub source_class: usize,
    pub target_class: usize,
    pub seed: u64,
    pub flipped: bool,
    pub probs_per_step: Vec<Vec<f64>>,
    pub cf_probs: Vec<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const TRAJECTORY_MANIFEST: &str = "manifest.jsonl";

pub fn trajectory_dir(root: &Path, sample_id: &str, target: usize) -> PathBuf {
    root.join(sample_id).join(target.to_string())
}

/// Writes images of one trajectory under `root/<sample>/<target>/` and the
/// factual under `root/<sample>/factual.png`.
pub fn write_trajectory<T: Scalar>(root: &Path, tr: &Trajectory<T>) -> Result<TrajectoryRecord> {
    let dir = trajectory_dir(root, &tr.sample_id, tr.target_y);
    fs::create_dir_all(&dir)?;
    let factual = root.join(&tr.sample_id).join("factual.png");
    if !factual.exists() {
        image_io::save_png(&tr.factual, &factual)?;
    }
    for st in &tr.steps {
        image_io::save_png(&st.image, &dir.join(format!("step_{}.png", st.t)))?;
    }
    image_io::save_png(&tr.counterfactual, &dir.join("cf.png"))?;
    Ok(TrajectoryRecord {
        sample_id: tr.sample_id.clone(),
        source_class: tr.source_class,
        target_class: tr.target_y,
        seed: tr.seed,
        flipped: tr.flipped,
        probs_per_step: tr.steps.iter().map(|s| s.probs.clone()).collect(),
        cf_probs: tr.cf_probs.clone(),
        failed: false,
        error: None,
    })
}

/// Generates and stores trajectories for every job. A batch that fails is
/// recorded as failed trajectories and the run continues.
pub fn build_trajectory_dataset<T: Scalar>(
    engine: &Engine<'_, T>,
    jobs: &[CfJob<'_, T>],
    params: &GuidanceParams,
    root: &Path,
) -> Result<Vec<TrajectoryRecord>> {
    fs::create_dir_all(root)?;
    let mut manifest = fs::File::create(root.join(TRAJECTORY_MANIFEST))?;
    let mut records = Vec::with_capacity(jobs.len());
    for (b, chunk) in jobs.chunks(params.batch_size).enumerate() {
        let recs: Vec<TrajectoryRecord> = match engine.generate(chunk, params) {
            Ok(trs) => trs.iter().map(|tr| write_trajectory(root, tr)).collect::<Result<_>>()?,
            Err(e) => {
                log::warn!("trajectory batch {b} failed: {e}");
                chunk
                    .iter()
                    .map(|j| TrajectoryRecord {
                        sample_id: j.sample_id.to_string(),
                        source_class: j.source_class,
                        target_class: j.target,
                        seed: j.seed,
                        flipped: false,
                        probs_per_step: Vec::new(),
                        cf_probs: Vec::new(),
                        failed: true,
                        error: Some(e.to_string()),
                    })
                    .collect()
            }
        };
        for r in recs {
            writeln!(manifest, "{}", serde_json::to_string(&r)?)?;
            records.push(r);
        }
        log::info!("trajectories: {}/{}", records.len(), jobs.len());
    }
    Ok(records)
}

pub fn read_trajectory_manifest(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::codec::CodecConfig;
    use crate::diffusion::{default_vocab, DiffusionConfig, UNetConfig};

    struct Tiny {
        clf: Classifier<f32>,
        codec: Codec<f32>,
        diff: DiffusionModel<f32>,
    }

    fn tiny() -> Tiny {
        let clf = Classifier::new(&ClassifierConfig { channels: vec![4, 8], ..ClassifierConfig::default() }, 3, 32).unwrap();
        let codec = Codec::new(&CodecConfig { channels: [4, 4, 4], ..CodecConfig::default() }, 32).unwrap();
        let dc = DiffusionConfig { unet: UNetConfig { base_channels: 8, mid_channels: 8, emb_dim: 8, groups: 2, seed: 3 }, ..DiffusionConfig::default() };
        let mut diff = DiffusionModel::new(&dc, [4, 4, 4], default_vocab(3)).unwrap();
        // nonzero output layer so the noise estimate is not trivially zero
        for (i, (name, _)) in diff.unet.store.iter().map(|(n, t)| (n.to_string(), t.len())).collect::<Vec<_>>().into_iter().enumerate() {
            if name.starts_with("out.conv") || name.ends_with("conv2.w") {
                let t = diff.unet.store.get_mut(ctraj_nn::ParamId(i));
                let mut r = seed::rng(i as u64, &[]);
                let shape = t.shape().to_vec();
                *t = Tensor::uniform(&shape, -0.05, 0.05, &mut r);
            }
        }
        Tiny { clf, codec, diff }
    }

    fn images() -> Vec<Tensor<f32>> {
        let mut r = seed::rng(1, &[]);
        (0..3).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut r)).collect()
    }

    #[test]
    fn count_formula() {
        assert_eq!(images_per_sample(8, 10), 78);
        assert_eq!(images_per_sample(3, 4), 11);
        assert_eq!(23_868 * images_per_sample(8, 10), 1_861_704);
    }

    #[test]
    fn zero_lambda_equals_unguided_reconstruction() {
        let m = tiny();
        let e = Engine::new(&m.clf, &m.codec, &m.diff).unwrap();
        let imgs = images();
        let jobs: Vec<CfJob<'_, f32>> = imgs
            .iter()
            .enumerate()
            .map(|(i, im)| CfJob { sample_id: "x", source_class: 0, image: im, target: 1 + i % 2, seed: 5 + i as u64 })
            .collect();
        let params = GuidanceParams { lambda_c: 0.0, t_start: 4, ..GuidanceParams::default() };
        let a = e.generate(&jobs, &params).unwrap();
        let b = e.reconstruct(&jobs, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].steps.len(), 4);
        assert_eq!(a[0].steps[0].t, 4);
        let guided = e.generate(&jobs, &GuidanceParams { lambda_c: 4.0, ..params.clone() }).unwrap();
        assert_ne!(guided[0].counterfactual, a[0].counterfactual);
        assert_eq!(guided, e.generate(&jobs, &GuidanceParams { lambda_c: 4.0, ..params }).unwrap());
    }

    #[test]
    fn prefactor_and_linearity() {
        let g = Tensor::<f64>::new(&[1, 3], vec![0.5, -1.25, 3.0]).unwrap();
        let a = applied_gradient(&g, 0.25);
        for (x, y) in a.data().iter().zip(g.data()) {
            assert_eq!(*x, 2.0 * y);
        }
        let m = tiny();
        let e = Engine::new(&m.clf, &m.codec, &m.diff).unwrap();
        let v = Tensor::randn(&[2, 4, 4, 4], &mut seed::rng(3, &[]));
        let g1 = e.guidance_at(&v, 10, &[1, 2], 4.0).unwrap();
        let g2 = e.guidance_at(&v, 10, &[1, 2], 8.0).unwrap();
        for (x, y) in g1.applied.data().iter().zip(g2.applied.data()) {
            assert!((y - 2.0 * x).abs() <= 1e-6 * y.abs());
        }
    }

    #[test]
    fn flipped_flag_matches_argmax() {
        let m = tiny();
        let e = Engine::new(&m.clf, &m.codec, &m.diff).unwrap();
        let imgs = images();
        let jobs: Vec<CfJob<'_, f32>> =
            imgs.iter().map(|im| CfJob { sample_id: "s", source_class: 0, image: im, target: 2, seed: 1 }).collect();
        for tr in e.generate(&jobs, &GuidanceParams { t_start: 2, ..GuidanceParams::default() }).unwrap() {
            assert_eq!(tr.flipped, argmax(&tr.cf_probs) == 2);
        }
    }

    #[test]
    fn dataset_layout_and_manifest() {
        let m = tiny();
        let e = Engine::new(&m.clf, &m.codec, &m.diff).unwrap();
        let spec = crate::data::DatasetSpec { num_classes: 3, samples_per_class: 1, image_size: 32, ..Default::default() };
        let spec = crate::data::DatasetSpec { bias_rules: vec![], concept_rules: vec![], ..spec };
        let ds = crate::data::generate_dataset::<f32>(&spec).unwrap();
        let refs: Vec<&LabeledImage<f32>> = ds.images.iter().collect();
        let jobs = all_target_jobs(&refs, 3, 7);
        assert_eq!(jobs.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let params = GuidanceParams { t_start: 4, ..GuidanceParams::default() };
        let recs = build_trajectory_dataset(&e, &jobs, &params, dir.path()).unwrap();
        assert!(recs.iter().all(|r| !r.failed), "{:?}", recs[0].error);
        assert_eq!(read_trajectory_manifest(&dir.path().join(TRAJECTORY_MANIFEST)).unwrap(), recs);
        let id = &ds.images[0].id;
        let mut pngs = 0;
        for entry in walk(&dir.path().join(id)) {
            if entry.extension().is_some_and(|x| x == "png") {
                pngs += 1;
            }
        }
        assert_eq!(pngs, images_per_sample(3, 4));
    }

    fn walk(p: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }
}

//! Latent diffusion: noise schedule, conditional noise predictor, PNDM and
//! DDIM stepping, training and unguided sampling.

mod sampler;
mod schedule;
mod unet;

use std::path::Path;

use ctraj_nn::{Adam, Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use sampler::{ddim_step, denoise_from, pndm_step, transfer, NoiseFn, PndmState, SamplerKind};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use unet::{UNet, UNetConfig};

use crate::codec::Codec;
use crate::data::{class_token, concept_token, ConceptKind, MAX_CLASSES};
use crate::error::{invalid, Result};
use crate::seed;
use crate::util::{self, gather};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_train: usize,
    pub sampler_steps: usize,
    pub schedule: ScheduleKind,
    pub unet: UNetConfig,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    /// 0 disables the moving average of weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_train: 1000,
            sampler_steps: 50,
            schedule: ScheduleKind::Linear,
            unet: UNetConfig::default(),
            train_steps: 8000,
            batch_size: 64,
            lr: 1e-3,
            cond_dropout: 0.1,
            ema_decay: 0.999,
            seed: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    #[serde(rename = "T_train")]
    pub t_train: usize,
    #[serde(rename = "S")]
    pub sampler_steps: usize,
    pub schedule_kind: ScheduleKind,
    pub vocab: Vec<String>,
    pub latent_shape: [usize; 3],
    pub steps_trained: usize,
    /// Mean loss over the first and last 10% of steps.
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    pub config: DiffusionConfig,
}

/// Class tokens for `num_classes` classes followed by every concept token.
pub fn default_vocab(num_classes: usize) -> Vec<String> {
    (0..num_classes.min(MAX_CLASSES)).map(class_token).chain(ConceptKind::ALL.iter().map(|&k| concept_token(k))).collect()
}

pub struct DiffusionModel<T: Scalar = f32> {
    pub unet: UNet<T>,
    pub schedule: NoiseSchedule,
    pub meta: DiffusionMeta,
}

impl<T: Scalar> DiffusionModel<T> {
    pub fn new(config: &DiffusionConfig, latent_shape: [usize; 3], vocab: Vec<String>) -> Result<Self> {
        if latent_shape[1] % 2 != 0 || latent_shape[2] % 2 != 0 {
            return Err(invalid(format!("latent side must be even, got {latent_shape:?}")));
        }
        let schedule = make_schedule(config.t_train, config.schedule, config.sampler_steps)?;
        let unet = UNet::new(&config.unet, latent_shape[0], vocab.clone())?;
        let meta = DiffusionMeta {
            t_train: config.t_train,
            sampler_steps: config.sampler_steps,
            schedule_kind: config.schedule,
            vocab,
            latent_shape,
            steps_trained: 0,
            loss_first: None,
            loss_last: None,
            config: config.clone(),
        };
        Ok(DiffusionModel { unet, schedule, meta })
    }

    pub fn condition_rows(&self, tokens: &[String]) -> Result<Vec<usize>> {
        self.unet.token_rows(tokens)
    }

    pub fn embed_condition(&self, tokens: &[String]) -> Result<Vec<T>> {
        self.unet.embed_condition(tokens)
    }

    /// Noise predictor bound to one condition.
    pub fn noise_fn<'a>(&'a self, rows: &'a [usize]) -> impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>> + 'a {
        move |z: &Tensor<T>, t: usize| self.unet.predict(z, t, rows)
    }

    /// Noise predictor with one condition per batch item.
    pub fn noise_fn_rows<'a>(&'a self, rows: &'a [Vec<usize>]) -> impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>> + 'a {
        move |z: &Tensor<T>, t: usize| self.unet.predict_rows(z, t, rows)
    }

    /// Draws `n` latents from unit Gaussian noise through all sampler steps.
    pub fn sample_latents(&self, tokens: &[String], n: usize, seed_value: u64, kind: SamplerKind) -> Result<Tensor<T>> {
        let rows = self.condition_rows(tokens)?;
        let [c, h, w] = self.meta.latent_shape;
        let z = Tensor::randn(&[n, c, h, w], &mut seed::rng(seed_value, &[0x5a3]));
        let mut f = self.noise_fn(&rows);
        denoise_from(&mut f, &self.schedule, kind, &z, self.schedule.sampler_len())
    }

    pub fn sample(&self, codec: &Codec<T>, tokens: &[String], n: usize, seed_value: u64) -> Result<Tensor<T>> {
        codec.decode(&self.sample_latents(tokens, n, seed_value, SamplerKind::Pndm)?)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        util::save_model(&self.unet.store, &self.meta, dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: DiffusionMeta = util::load_meta(dir, stem)?;
        let mut model = DiffusionModel::new(&meta.config, meta.latent_shape, meta.vocab.clone())?;
        util::load_params(&mut model.unet.store, dir, stem)?;
        model.meta = meta;
        Ok(model)
    }
}

fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, live: &ParamStore<T>, decay: f64) {
    let d = T::lit(decay);
    let one_minus = T::lit(1.0 - decay);
    for i in 0..live.len() {
        let src = live.get(ParamId(i)).data();
        for (e, &p) in ema.get_mut(ParamId(i)).data_mut().iter_mut().zip(src) {
            *e = d * *e + one_minus * p;
        }
    }
}

/// One training example: a clean latent and its condition tokens.
pub struct LatentExample<'a, T: Scalar> {
    pub latent: &'a Tensor<T>,
    pub tokens: &'a [String],
}

/// Trains the noise predictor with the standard epsilon objective. The
/// condition is replaced by the null condition with probability
/// `cond_dropout`. Returns the model (EMA weights if enabled) and the
/// per-step losses.
pub fn train_diffusion<T: Scalar>(
    examples: &[LatentExample<'_, T>],
    vocab: Vec<String>,
    config: &DiffusionConfig,
) -> Result<(DiffusionModel<T>, Vec<f64>)> {
    let first = examples.first().ok_or_else(|| invalid("no training latents"))?;
    let ls = first.latent.shape();
    if ls.len() != 3 {
        return Err(invalid(format!("latents must be [C, H, W], got {ls:?}")));
    }
    let latent_shape = [ls[0], ls[1], ls[2]];
    let mut model = DiffusionModel::<T>::new(config, latent_shape, vocab)?;
    let rows: Vec<Vec<usize>> = examples.iter().map(|e| model.condition_rows(e.tokens)).collect::<Result<_>>()?;
    let latents: Vec<&Tensor<T>> = examples.iter().map(|e| e.latent).collect();
    let null = model.unet.null_index();
    let mut opt = Adam::new(&model.unet.store, config.lr);
    let mut ema = (config.ema_decay > 0.0).then(|| model.unet.store.clone());
    let mut rng = seed::rng(config.seed, &[0xd1ff]);
    let mut losses = Vec::with_capacity(config.train_steps);
    let warmup = (config.train_steps / 20).max(1);
    for step in 0..config.train_steps {
        let frac = step as f64 / config.train_steps as f64;
        let ramp = ((step + 1) as f64 / warmup as f64).min(1.0);
        opt.lr = config.lr * ramp * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..latents.len())).collect();
        let z0 = gather(&latents, &idx);
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=config.t_train)).collect();
        let eps_data: Vec<T> = (0..z0.len()).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let eps = Tensor::new(z0.shape(), eps_data)?;
        let item = z0.item_len();
        let mut zt = z0.clone();
        for (k, &t) in ts.iter().enumerate() {
            let ab = model.schedule.alpha_bar(t);
            let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            let range = k * item..(k + 1) * item;
            for (o, (&x, &e)) in zt.data_mut()[range.clone()].iter_mut().zip(z0.data()[range.clone()].iter().zip(&eps.data()[range])) {
                *o = a * x + b * e;
            }
        }
        let cond: Vec<Vec<usize>> =
            idx.iter().map(|&i| if rng.random::<f64>() < config.cond_dropout { vec![null] } else { rows[i].clone() }).collect();
        let g = Graph::new();
        let zi = g.input(zt);
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let pred = model.unet.forward(&g, zi, &tf, cond);
        let target = g.input(eps);
        let loss = g.mean(g.square(g.sub(pred, target)));
        let l = g.value(loss).data()[0].as_f64();
        util::ensure_finite(l, &format!("diffusion loss at step {step}"))?;
        losses.push(l);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads, &model.unet.store);
        opt.step(&mut model.unet.store, &pg);
        if let Some(e) = ema.as_mut() {
            // short-horizon average early on so the EMA never lags far behind
            let decay = config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            ema_update(e, &model.unet.store, decay);
        }
        if step % 500 == 0 {
            log::info!("diffusion step {step}: loss {l:.4}");
        }
    }
    if let Some(e) = ema {
        model.unet.store = e;
    }
    let tenth = (losses.len() / 10).max(1);
    if !losses.is_empty() {
        model.meta.loss_first = Some(losses[..tenth].iter().sum::<f64>() / tenth as f64);
        model.meta.loss_last = Some(losses[losses.len() - tenth..].iter().sum::<f64>() / tenth as f64);
    }
    model.meta.steps_trained = config.train_steps;
    Ok((model, losses))
}

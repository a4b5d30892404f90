//! Variational autoencoder over trajectory images whose latent dimensions
//! are searched for classifier-relevant concepts.

mod loss;
mod ssim;

pub use loss::{kld_graph, vae_loss, vae_loss_graph, LossComponents, LossVars, VaeLossWeights};
pub use ssim::{gaussian_window, ssim, ssim_graph, C1, C2, SIGMA, WINDOW};

use std::path::Path;

use ctraj_nn::{Adam, Conv2d, Graph, Linear, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::codec::ResBlock;
use crate::error::{invalid, Error, Result};
use crate::image_io;
use crate::seed;
use crate::util::{self, chunked, epoch_batches, gather};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Latent dimensionality `m`.
    pub latent_dim: usize,
    /// Output channels of each down-sampling residual block.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch exponential learning-rate decay.
    pub lr_gamma: f64,
    pub holdout_fraction: f64,
    pub weights: VaeLossWeights,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 128,
            channels: vec![32, 64, 64, 128, 128, 128],
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            lr_gamma: 0.95,
            holdout_fraction: 0.1,
            weights: VaeLossWeights::default(),
            seed: 23,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(invalid("VAE latent_dim and channels must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(invalid("VAE lr must be positive and lr_gamma in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(invalid("holdout_fraction must be in [0, 1)"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: Option<LossComponents>,
    pub val: LossComponents,
    pub psnr_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeMeta {
    pub m: usize,
    pub image_size: usize,
    pub weights: VaeLossWeights,
    pub epochs: usize,
    pub psnr_val: Option<f64>,
    pub loss_components_final: Option<LossComponents>,
    pub history: Vec<EpochLog>,
    pub config: VaeConfig,
}

pub struct Vae<T: Scalar = f32> {
    pub store: ParamStore<T>,
    enc_in: Conv2d,
    enc: Vec<(Conv2d, ResBlock)>,
    mu: Linear,
    logvar: Linear,
    dec_in: Linear,
    dec: Vec<(ResBlock, Conv2d)>,
    dec_out: Conv2d,
    strides: Vec<usize>,
    bottleneck: [usize; 3],
    pub meta: VaeMeta,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: &VaeConfig, image_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, &[0x7ae]);
        let mut ps = ParamStore::new();
        let ch = &config.channels;
        let enc_in = Conv2d::new(&mut ps, "enc.in", 3, ch[0], 3, 1, &mut rng);
        let mut enc = Vec::new();
        let mut strides = Vec::new();
        let (mut side, mut prev) = (image_size, ch[0]);
        for (i, &c) in ch.iter().enumerate() {
            // halve while the map is larger than 2x2
            let stride = if side > 2 && side % 2 == 0 { 2 } else { 1 };
            side /= stride;
            strides.push(stride);
            let down = Conv2d::new(&mut ps, &format!("enc.{i}.down"), prev, c, 3, stride, &mut rng);
            enc.push((down, ResBlock::new(&mut ps, &format!("enc.{i}.res"), c, &mut rng)));
            prev = c;
        }
        let flat = prev * side * side;
        let m = config.latent_dim;
        let mu = Linear::new(&mut ps, "enc.mu", flat, m, &mut rng);
        let logvar = Linear::new(&mut ps, "enc.logvar", flat, m, &mut rng);
        let dec_in = Linear::new(&mut ps, "dec.in", m, flat, &mut rng);
        let mut dec = Vec::new();
        for i in (0..ch.len()).rev() {
            let out = if i == 0 { ch[0] } else { ch[i - 1] };
            let res = ResBlock::new(&mut ps, &format!("dec.{i}.res"), ch[i], &mut rng);
            dec.push((res, Conv2d::new(&mut ps, &format!("dec.{i}.up"), ch[i], out, 3, 1, &mut rng)));
        }
        let dec_out = Conv2d::new(&mut ps, "dec.out", ch[0], 3, 3, 1, &mut rng);
        let meta = VaeMeta {
            m,
            image_size,
            weights: config.weights,
            epochs: 0,
            psnr_val: None,
            loss_components_final: None,
            history: Vec::new(),
            config: config.clone(),
        };
        Ok(Vae { store: ps, enc_in, enc, mu, logvar, dec_in, dec, dec_out, strides, bottleneck: [prev, side, side], meta })
    }

    pub fn latent_dim(&self) -> usize {
        self.meta.m
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    /// `[N, 3, S, S]` to `(mu, logvar)`, each `[N, m]`.
    pub fn encode_graph(&self, g: &Graph<T>, x: Var) -> (Var, Var) {
        let ps = &self.store;
        let mut h = self.enc_in.forward(g, ps, g.offset(g.scale(x, T::lit(2.0)), -T::one()));
        for (down, res) in &self.enc {
            h = res.forward(g, ps, down.forward(g, ps, g.silu(h)));
        }
        let n = g.shape(h)[0];
        let [c, a, b] = self.bottleneck;
        let flat = g.reshape(g.silu(h), &[n, c * a * b]);
        (self.mu.forward(g, ps, flat), self.logvar.forward(g, ps, flat))
    }

    /// `[N, m]` latents to images in `(0, 1)`.
    pub fn decode_graph(&self, g: &Graph<T>, l: Var) -> Var {
        let ps = &self.store;
        let n = g.shape(l)[0];
        let [c, a, b] = self.bottleneck;
        let mut h = g.reshape(self.dec_in.forward(g, ps, l), &[n, c, a, b]);
        for ((res, conv), &stride) in self.dec.iter().zip(self.strides.iter().rev()) {
            h = res.forward(g, ps, h);
            if stride == 2 {
                h = g.upsample2x(h);
            }
            h = conv.forward(g, ps, g.silu(h));
        }
        g.sigmoid(self.dec_out.forward(g, ps, g.silu(h)))
    }

    pub fn encode_stats(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        util::check_image_batch(x, 3, self.meta.image_size)?;
        let mut mus = Vec::with_capacity(x.dim(0) * self.meta.m);
        let mut lvs = Vec::with_capacity(x.dim(0) * self.meta.m);
        let mut start = 0;
        while start < x.dim(0) {
            let end = (start + 64).min(x.dim(0));
            let g = Graph::inference();
            let (mu, lv) = self.encode_graph(&g, g.input(x.narrow(start, end)));
            mus.extend_from_slice(g.value(mu).data());
            lvs.extend_from_slice(g.value(lv).data());
            start = end;
        }
        let shape = [x.dim(0), self.meta.m];
        let (mu, lv) = (Tensor::new(&shape, mus)?, Tensor::new(&shape, lvs)?);
        if !(mu.all_finite() && lv.all_finite()) {
            return Err(Error::NonFinite("VAE encoder output".into()));
        }
        Ok((mu, lv))
    }

    /// Deterministic encoding: the posterior mean.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode_stats(x)?.0)
    }

    /// One reparameterized draw `mu + sigma * eps` per image.
    pub fn encode_sample(&self, x: &Tensor<T>, rng: &mut seed::Rng) -> Result<Tensor<T>> {
        let (mu, lv) = self.encode_stats(x)?;
        let eps = Tensor::<T>::randn(mu.shape(), rng);
        let sd = lv.map(|v| (v * T::lit(0.5)).exp());
        Ok(mu.zip_map(&sd.zip_map(&eps, |s, e| s * e)?, |m, n| m + n)?)
    }

    /// Decodes `[N, m]` latents; output clamped to `[0, 1]`.
    pub fn decode(&self, l: &Tensor<T>) -> Result<Tensor<T>> {
        let s = l.shape();
        if s.len() != 2 || s[1] != self.meta.m || s[0] == 0 {
            return Err(Error::ShapeMismatch(format!("expected latents [N, {}], got {s:?}", self.meta.m)));
        }
        chunked(l, 64, |part| {
            let g = Graph::inference();
            let x = self.decode_graph(&g, g.input(part.clone()));
            Ok(g.value(x).clamp(T::zero(), T::one()))
        })
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    pub fn cast<U: Scalar>(&self) -> Vae<U> {
        Vae {
            store: util::cast_store(&self.store),
            enc_in: self.enc_in,
            enc: self.enc.clone(),
            mu: self.mu,
            logvar: self.logvar,
            dec_in: self.dec_in,
            dec: self.dec.clone(),
            dec_out: self.dec_out,
            strides: self.strides.clone(),
            bottleneck: self.bottleneck,
            meta: self.meta.clone(),
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        util::save_model(&self.store, &self.meta, dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: VaeMeta = util::load_meta(dir, stem)?;
        let mut model = Vae::new(&meta.config, meta.image_size)?;
        util::load_params(&mut model.store, dir, stem)?;
        model.meta = meta;
        Ok(model)
    }
}

/// Loss components with deterministic encoding, and the reconstruction
/// PSNR, averaged over a set of images.
pub fn evaluate_vae<T: Scalar>(
    vae: &Vae<T>,
    images: &[&Tensor<T>],
    features: Option<&Classifier<T>>,
) -> Result<(LossComponents, f64)> {
    if images.is_empty() {
        return Err(invalid("no images to evaluate"));
    }
    let mut acc = LossComponents::default();
    let mut psnr = 0.0;
    for chunk in images.chunks(64) {
        let x = gather(chunk, &(0..chunk.len()).collect::<Vec<_>>());
        let g = Graph::inference();
        let xi = g.input(x.clone());
        let (mu, lv) = vae.encode_graph(&g, xi);
        let r = vae.decode_graph(&g, mu);
        let vars = vae_loss_graph(&g, xi, r, mu, lv, &vae.meta.weights, features);
        let c = vars.components(&g, &vae.meta.weights)?;
        acc.accumulate(&c, chunk.len() as f64 / images.len() as f64);
        let rv = g.value(r).clamp(T::zero(), T::one());
        for i in 0..chunk.len() {
            psnr += image_io::psnr(&x.select(i), &rv.select(i))?.min(100.0);
        }
    }
    Ok((acc, psnr / images.len() as f64))
}

/// Trains with reparameterized sampling. Validation components and PSNR
/// are logged before training (epoch 0) and after every epoch.
pub fn train_vae<T: Scalar>(images: &[&Tensor<T>], features: Option<&Classifier<T>>, config: &VaeConfig) -> Result<Vae<T>> {
    config.validate()?;
    if images.len() < 2 {
        return Err(invalid(format!("VAE training needs at least 2 images, got {}", images.len())));
    }
    let image_size = images[0].dim(1);
    let mut model = Vae::<T>::new(config, image_size)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut seed::rng(config.seed, &[0x5b1]));
    let n_hold = ((images.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, images.len() / 2);
    let held: Vec<&Tensor<T>> = order[..n_hold].iter().map(|&i| images[i]).collect();
    let train: Vec<&Tensor<T>> = order[n_hold..].iter().map(|&i| images[i]).collect();
    let frozen = features.map(|c| c.frozen());
    let weights = config.weights;
    let mut opt = Adam::new(&model.store, config.lr);
    let mut rng = seed::rng(config.seed, &[0x7a2]);
    let (val, psnr) = evaluate_vae(&model, &held, frozen.as_ref())?;
    model.meta.history.push(EpochLog { epoch: 0, lr: config.lr, train: None, val, psnr_val: psnr });
    for epoch in 1..=config.epochs {
        opt.lr = config.lr * config.lr_gamma.powi(epoch as i32 - 1);
        let mut acc = LossComponents::default();
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
            let x = gather(&train, &idx);
            let g = Graph::new();
            let xi = g.input(x);
            let (mu, lv) = model.encode_graph(&g, xi);
            let eps = g.input(Tensor::randn(&g.shape(mu), &mut rng));
            let l = g.add(mu, g.mul(g.exp(g.scale(lv, T::lit(0.5))), eps));
            let r = model.decode_graph(&g, l);
            let vars = vae_loss_graph(&g, xi, r, mu, lv, &weights, frozen.as_ref());
            let c = vars.components(&g, &weights).map_err(|e| Error::Diverged(format!("VAE epoch {epoch}: {e}")))?;
            acc.accumulate(&c, idx.len() as f64 / train.len() as f64);
            let grads = g.backward(vars.total);
            let pg = g.param_grads(&grads, &model.store);
            opt.step(&mut model.store, &pg);
        }
        let (val, psnr) = evaluate_vae(&model, &held, frozen.as_ref())?;
        util::ensure_finite(val.total, "VAE validation loss")?;
        log::info!(
            "vae epoch {epoch}: train {:.5} val {:.5} (rec {:.5} kld {:.3} l1 {:.5} ssim {:.5} perc {:.5}) psnr {psnr:.2} dB",
            acc.total,
            val.total,
            val.rec,
            val.kld,
            val.l1,
            val.ssim,
            val.perc
        );
        model.meta.history.push(EpochLog { epoch, lr: opt.lr, train: Some(acc), val, psnr_val: psnr });
    }
    let last = model.meta.history.last().expect("epoch 0 logged").clone();
    model.meta.epochs = config.epochs;
    model.meta.psnr_val = Some(last.psnr_val);
    model.meta.loss_components_final = Some(last.val);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeConfig {
        VaeConfig { latent_dim: 6, channels: vec![8, 8, 8, 8, 8, 8], epochs: 0, batch_size: 8, ..VaeConfig::default() }
    }

    #[test]
    fn geometry_and_deterministic_encoding() {
        let v = Vae::<f32>::new(&tiny(), 32).unwrap();
        let x = Tensor::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut seed::rng(1, &[]));
        let l = v.encode(&x).unwrap();
        assert_eq!(l.shape(), &[3, 6]);
        assert_eq!(l, v.encode(&x).unwrap());
        let r = v.decode(&l).unwrap();
        assert_eq!(r.shape(), &[3, 3, 32, 32]);
        assert!(r.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(v.decode(&Tensor::zeros(&[1, 5])).is_err());
        assert!(v.encode(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert_eq!(Vae::<f32>::new(&tiny(), 64).unwrap().bottleneck, [8, 2, 2]);
    }

    #[test]
    fn stochastic_encoding_mean() {
        let v = Vae::<f64>::new(&tiny(), 32).unwrap();
        let x = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut seed::rng(2, &[]));
        let (mu, lv) = v.encode_stats(&x).unwrap();
        let mut rng = seed::rng(3, &[]);
        let n = 1000;
        let mut mean = vec![0.0; 6];
        for _ in 0..n {
            let s = v.encode_sample(&x, &mut rng).unwrap();
            for (m, &v) in mean.iter_mut().zip(s.data()) {
                *m += v / n as f64;
            }
        }
        for j in 0..6 {
            let sigma = (0.5 * lv.data()[j]).exp();
            assert!((mean[j] - mu.data()[j]).abs() <= 3.0 * sigma / (n as f64).sqrt(), "dim {j}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = Vae::<f32>::new(&tiny(), 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        v.save(dir.path(), "vae").unwrap();
        let w = Vae::<f32>::load(dir.path(), "vae").unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut seed::rng(4, &[]));
        assert_eq!(v.reconstruct(&x).unwrap(), w.reconstruct(&x).unwrap());
    }
}

//! Deterministic convolutional autoencoder mapping images to the diffusion
//! latent space (8x spatial downsampling) and back.

use std::path::Path;

use ctraj_nn::{Adam, Conv2d, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{invalid, Error, Result};
use crate::image_io;
use crate::seed;
use crate::util::{self, chunked, epoch_batches, gather};

pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Channels at 1/2, 1/4 and 1/8 resolution.
    pub channels: [usize; 3],
    pub latent_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub perceptual_weight: f64,
    /// Fraction of the images held out for the PSNR check.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            channels: [32, 64, 64],
            latent_channels: 4,
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            perceptual_weight: 0.1,
            holdout_fraction: 0.1,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub latent_shape: [usize; 3],
    pub image_size: usize,
    pub psnr_val: Option<f64>,
    /// Multiplier applied to raw encoder outputs so latents have unit
    /// standard deviation over the training images.
    pub latent_scale: f64,
    pub epochs: usize,
    pub config: CodecConfig,
}

/// `x + conv_b(silu(conv_a(silu(x))))`, with `conv_b` starting at zero.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    pub(crate) fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut seed::Rng) -> Self {
        ResBlock { a: Conv2d::new(ps, &format!("{name}.a"), ch, ch, 3, 1, rng), b: Conv2d::zeroed(ps, &format!("{name}.b"), ch, ch, 3) }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.a.forward(g, ps, g.silu(x));
        g.add(x, self.b.forward(g, ps, g.silu(h)))
    }
}

pub struct Codec<T: Scalar = f32> {
    pub store: ParamStore<T>,
    enc_in: Conv2d,
    enc: Vec<(Conv2d, ResBlock)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec: Vec<(ResBlock, Conv2d)>,
    dec_out: Conv2d,
    pub meta: CodecMeta,
}

impl<T: Scalar> Codec<T> {
    pub fn new(config: &CodecConfig, image_size: usize) -> Result<Self> {
        if image_size % DOWNSAMPLE != 0 || image_size == 0 {
            return Err(invalid(format!("image size {image_size} is not a multiple of {DOWNSAMPLE}")));
        }
        if config.latent_channels == 0 {
            return Err(invalid("latent_channels must be positive"));
        }
        let mut rng = seed::rng(config.seed, &[0xc0dec]);
        let mut ps = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let cz = config.latent_channels;
        let enc_in = Conv2d::new(&mut ps, "enc.in", 3, c1, 3, 1, &mut rng);
        let mut enc = Vec::new();
        let mut prev = c1;
        for (i, &c) in [c1, c2, c3].iter().enumerate() {
            let down = Conv2d::new(&mut ps, &format!("enc.{i}.down"), prev, c, 3, 2, &mut rng);
            let res = ResBlock::new(&mut ps, &format!("enc.{i}.res"), c, &mut rng);
            enc.push((down, res));
            prev = c;
        }
        let enc_out = Conv2d::new(&mut ps, "enc.out", c3, cz, 1, 1, &mut rng);
        let dec_in = Conv2d::new(&mut ps, "dec.in", cz, c3, 3, 1, &mut rng);
        let mut dec = Vec::new();
        let outs = [c2, c1, c1];
        let mut prev = c3;
        for (i, &c) in outs.iter().enumerate() {
            let res = ResBlock::new(&mut ps, &format!("dec.{i}.res"), prev, &mut rng);
            let up = Conv2d::new(&mut ps, &format!("dec.{i}.up"), prev, c, 3, 1, &mut rng);
            dec.push((res, up));
            prev = c;
        }
        let dec_out = Conv2d::new(&mut ps, "dec.out", c1, 3, 3, 1, &mut rng);
        let side = image_size / DOWNSAMPLE;
        let meta = CodecMeta {
            latent_shape: [cz, side, side],
            image_size,
            psnr_val: None,
            latent_scale: 1.0,
            epochs: 0,
            config: config.clone(),
        };
        Ok(Codec { store: ps, enc_in, enc, enc_out, dec_in, dec, dec_out, meta })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.meta.latent_shape
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    /// Encoder graph: `[N, 3, S, S]` images to scaled latents.
    pub fn encode_graph(&self, g: &Graph<T>, x: Var) -> Var {
        let ps = &self.store;
        let mut h = g.offset(g.scale(x, T::lit(2.0)), -T::one());
        h = self.enc_in.forward(g, ps, h);
        for (down, res) in &self.enc {
            h = down.forward(g, ps, g.silu(h));
            h = res.forward(g, ps, h);
        }
        let z = self.enc_out.forward(g, ps, g.silu(h));
        g.scale(z, T::lit(self.meta.latent_scale))
    }

    /// Decoder graph: scaled latents to images in `(0, 1)`.
    pub fn decode_graph(&self, g: &Graph<T>, z: Var) -> Var {
        let ps = &self.store;
        let mut h = g.scale(z, T::lit(1.0 / self.meta.latent_scale));
        h = self.dec_in.forward(g, ps, h);
        for (res, up) in &self.dec {
            h = res.forward(g, ps, h);
            h = up.forward(g, ps, g.upsample2x(h));
        }
        g.sigmoid(self.dec_out.forward(g, ps, g.silu(h)))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        util::check_image_batch(x, 3, self.meta.image_size)?;
        chunked(x, 64, |part| {
            let g = Graph::inference();
            let xi = g.input(part.clone());
            let z = self.encode_graph(&g, xi);
            Ok((*g.value(z)).clone())
        })
    }

    /// Decodes `[N, c_z, h_z, w_z]` latents; output clamped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.meta.latent_shape;
        let s = z.shape();
        if s.len() != 4 || s[1..] != [c, h, w] || s[0] == 0 {
            return Err(Error::ShapeMismatch(format!("expected latents [N, {c}, {h}, {w}], got {s:?}")));
        }
        chunked(z, 64, |part| {
            let g = Graph::inference();
            let zi = g.input(part.clone());
            let x = self.decode_graph(&g, zi);
            Ok(g.value(x).clamp(T::zero(), T::one()))
        })
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    pub fn cast<U: Scalar>(&self) -> Codec<U> {
        Codec {
            store: util::cast_store(&self.store),
            enc_in: self.enc_in,
            enc: self.enc.clone(),
            enc_out: self.enc_out,
            dec_in: self.dec_in,
            dec: self.dec.clone(),
            dec_out: self.dec_out,
            meta: self.meta.clone(),
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        util::save_model(&self.store, &self.meta, dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: CodecMeta = util::load_meta(dir, stem)?;
        let mut model = Codec::new(&meta.config, meta.image_size)?;
        util::load_params(&mut model.store, dir, stem)?;
        model.meta = meta;
        Ok(model)
    }
}

/// Mean PSNR of `decode(encode(x))` over a set of `[3, S, S]` images.
pub fn reconstruction_psnr<T: Scalar>(codec: &Codec<T>, images: &[&Tensor<T>]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(64) {
        let x = gather(chunk, &(0..chunk.len()).collect::<Vec<_>>());
        let r = codec.reconstruct(&x)?;
        for i in 0..chunk.len() {
            total += image_io::psnr(&x.item(i), &r.item(i))?.min(100.0);
        }
    }
    Ok(total / images.len() as f64)
}

/// Trains the autoencoder with pixel L2 plus an optional classifier-feature
/// perceptual term. Fails if the held-out PSNR stays below 20 dB.
pub fn train_codec<T: Scalar>(
    images: &[&Tensor<T>],
    perceptual: Option<&Classifier<T>>,
    config: &CodecConfig,
) -> Result<Codec<T>> {
    if images.len() < 100 {
        return Err(invalid(format!("codec training needs at least 100 images, got {}", images.len())));
    }
    let image_size = images[0].dim(1);
    let mut model = Codec::<T>::new(config, image_size)?;
    let n_hold = ((images.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, images.len() / 2);
    let (held, train) = images.split_at(n_hold);
    let frozen = perceptual.map(|c| c.frozen());
    let mut opt = Adam::new(&model.store, config.lr);
    let mut rng = seed::rng(config.seed, &[0x7a1]);
    let steps_per_epoch = train.len().div_ceil(config.batch_size.max(1));
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
            // cosine decay to 5% of the base rate
            let frac = step as f64 / total_steps as f64;
            opt.lr = config.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
            step += 1;
            let x = gather(train, &idx);
            let g = Graph::new();
            let xi = g.input(x);
            let z = model.encode_graph(&g, xi);
            let r = model.decode_graph(&g, z);
            let mut loss = g.mean(g.square(g.sub(r, xi)));
            if let (Some(clf), true) = (&frozen, config.perceptual_weight > 0.0) {
                let p = clf.perceptual(&g, r, xi);
                loss = g.add(loss, g.scale(p, T::lit(config.perceptual_weight)));
            }
            let l = g.value(loss).data()[0].as_f64();
            util::ensure_finite(l, "codec loss")?;
            sum += l;
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &model.store);
            opt.step(&mut model.store, &pg);
        }
        log::info!("codec epoch {epoch}: loss {:.5}", sum / steps_per_epoch as f64);
    }
    // normalize latents to unit standard deviation over the training images
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in train.chunks(64) {
        let z = model.encode(&gather(chunk, &(0..chunk.len()).collect::<Vec<_>>()))?;
        sq += z.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        count += z.len();
    }
    let rms = (sq / count as f64).sqrt();
    if !(rms.is_finite() && rms > 0.0) {
        return Err(Error::NonConvergence(format!("degenerate latent scale (rms {rms})")));
    }
    model.meta.latent_scale = 1.0 / rms;
    let psnr = reconstruction_psnr(&model, held)?;
    model.meta.psnr_val = Some(psnr);
    model.meta.epochs = config.epochs;
    log::info!("codec held-out PSNR {psnr:.2} dB, latent scale {:.4}", model.meta.latent_scale);
    if psnr < 20.0 {
        return Err(Error::NonConvergence(format!(
            "codec held-out PSNR {psnr:.2} dB < 20 dB after {} epochs (final lr {:.2e})",
            config.epochs, opt.lr
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> CodecConfig {
        CodecConfig { channels: [8, 8, 8], latent_channels: 4, epochs: 0, batch_size: 16, lr: 3e-3, ..CodecConfig::default() }
    }

    #[test]
    fn latent_geometry_and_determinism() {
        let c = Codec::<f32>::new(&small(), 32).unwrap();
        assert_eq!(c.latent_shape(), [4, 4, 4]);
        let x = Tensor::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut seed::rng(1, &[]));
        let z = c.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3, 4, 4, 4]);
        assert_eq!(z, c.encode(&x).unwrap());
        let zero = c.decode(&Tensor::zeros(&[1, 4, 4, 4])).unwrap();
        assert!(zero.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(c.decode(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
        assert!(Codec::<f32>::new(&small(), 36).is_err());
    }

    #[test]
    fn constant_colors_compress_well() {
        let mut rng = seed::rng(2, &[]);
        let imgs: Vec<Tensor<f32>> = (0..400)
            .map(|_| {
                let rgb: [f32; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
                let data = rgb.iter().flat_map(|&v| std::iter::repeat_n(v, 16 * 16)).collect();
                Tensor::new(&[3, 16, 16], data).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
        let config = CodecConfig { epochs: 100, lr: 1e-2, ..small() };
        let c = train_codec(&refs, None, &config).unwrap();
        let psnr = c.meta.psnr_val.unwrap();
        assert!(psnr >= 40.0, "{psnr}");
    }

    #[test]
    fn too_few_images_rejected() {
        let img = Tensor::<f32>::zeros(&[3, 32, 32]);
        let refs = vec![&img; 10];
        assert!(train_codec(&refs, None, &small()).is_err());
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let c = Codec::<f64>::new(&small(), 32).unwrap();
        let z = Tensor::randn(&[1, 4, 4, 4], &mut seed::rng(3, &[]));
        let weights = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut seed::rng(4, &[]));
        let f = |z: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let g = Graph::new();
            let zi = g.input_with_grad(z.clone());
            let x = c.decode_graph(&g, zi);
            let wi = g.input(weights.clone());
            let loss = g.sum(g.mul(x, wi));
            let grad = g.backward(loss).get_or_zeros(zi);
            (g.value(loss).data()[0], grad)
        };
        let (_, grad) = f(&z);
        let mut rng = seed::rng(5, &[]);
        for _ in 0..10 {
            let i = rng.random_range(0..z.len());
            let h = 1e-5;
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (f(&zp).0 - f(&zm).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-6), "{fd} vs {an}");
        }
    }
}

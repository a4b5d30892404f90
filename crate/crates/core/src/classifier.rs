//! The target classifier: a small CNN whose pooled penultimate activations
//! also serve as the feature space for FID and perceptual losses.

use std::path::Path;

use ctraj_nn::{Adam, Conv2d, Graph, Linear, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::util::{self, chunked, epoch_batches, gather};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Output channels of each conv block; every block but the last halves
    /// the resolution.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { channels: vec![16, 32, 64, 64], epochs: 8, batch_size: 32, lr: 2e-3, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub seed: u64,
    pub epochs: usize,
    pub val_accuracy: Option<f64>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub image_size: usize,
    pub config: ClassifierConfig,
}

pub struct Classifier<T: Scalar = f32> {
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    head: Linear,
    pub meta: ClassifierMeta,
}

/// Graph nodes produced by one forward pass.
pub struct ClassifierOutputs {
    pub logits: Var,
    pub features: Var,
    /// Post-activation output of each block, before pooling.
    pub activations: Vec<Var>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: &ClassifierConfig, num_classes: usize, image_size: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("a classifier needs at least two classes"));
        }
        if config.channels.is_empty() {
            return Err(invalid("classifier needs at least one block"));
        }
        let mut rng = seed::rng(config.seed, &[0xc1a5]);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("block{i}"), in_ch, c, 3, 1, &mut rng));
            in_ch = c;
        }
        let head = Linear::new(&mut store, "head", in_ch, num_classes, &mut rng);
        let meta = ClassifierMeta {
            seed: config.seed,
            epochs: 0,
            val_accuracy: None,
            num_classes,
            feature_dim: in_ch,
            image_size,
            config: config.clone(),
        };
        Ok(Classifier { store, convs, head, meta })
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    /// Builds the network on `g` for an `[N, 3, S, S]` input node.
    pub fn forward(&self, g: &Graph<T>, x: Var) -> ClassifierOutputs {
        let mut h = g.offset(g.scale(x, T::lit(2.0)), -T::one());
        let mut activations = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            h = g.silu(conv.forward(g, &self.store, h));
            activations.push(h);
            if i + 1 < self.convs.len() {
                h = g.avg_pool2x2(h);
            }
        }
        let features = g.global_avg_pool(h);
        let logits = self.head.forward(g, &self.store, features);
        ClassifierOutputs { logits, features, activations }
    }

    /// Mean over blocks of the mean squared activation difference between
    /// two image batches, each block divided by the mean squared activation
    /// of `b` (a constant, no gradient flows through it).
    pub fn perceptual(&self, g: &Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.forward(g, a).activations;
        let fb = self.forward(g, b).activations;
        let n = fa.len();
        let mut total = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let yv = g.value(y);
            let power = yv.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / yv.len() as f64;
            let term = g.scale(g.mean(g.square(g.sub(x, y))), T::lit(1.0 / (power + 1e-6)));
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term),
            });
        }
        g.scale(total.expect("at least one block"), T::one() / T::from_usize_lossy(n))
    }

    /// A copy whose parameters receive no gradients, for use as a fixed
    /// feature extractor inside another model's training graph.
    pub fn frozen(&self) -> Self {
        let mut store = self.store.clone();
        store.set_trainable(false);
        Classifier { store, convs: self.convs.clone(), head: self.head, meta: self.meta.clone() }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        util::check_image_batch(x, 3, self.meta.image_size)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        chunked(x, 64, |part| {
            let g = Graph::inference();
            let xi = g.input(part.clone());
            let out = self.forward(&g, xi);
            Ok((*g.value(out.logits)).clone())
        })
    }

    /// Softmax probabilities `[N, K]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(x)?.softmax_rows())
    }

    /// Probabilities for a single `[3, S, S]` image.
    pub fn predict_one(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let x = image.clone().reshape(&[1, 3, image.dim(1), image.dim(2)]).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.predict(&x)?.into_data())
    }

    /// Penultimate features `[N, feature_dim]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        chunked(x, 64, |part| {
            let g = Graph::inference();
            let xi = g.input(part.clone());
            let out = self.forward(&g, xi);
            Ok((*g.value(out.features)).clone())
        })
    }

    /// `lambda * sum_n CE(f(decoder(v_n)), targets_n)` and its gradient with
    /// respect to `v`. The loss is summed over the batch so every item gets
    /// its own, unmixed gradient.
    pub fn class_loss_and_grad(
        &self,
        decoder: impl Fn(&Graph<T>, Var) -> Var,
        v: &Tensor<T>,
        targets: &[usize],
        lambda: f64,
    ) -> Result<(f64, Tensor<T>)> {
        if v.dim(0) != targets.len() {
            return Err(Error::ShapeMismatch(format!("{} latents vs {} targets", v.dim(0), targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.num_classes()) {
            return Err(invalid(format!("target class {t} outside 0..{}", self.num_classes())));
        }
        let g = Graph::new();
        let vi = g.input_with_grad(v.clone());
        let img = decoder(&g, vi);
        self.check_input(&g.value(img))?;
        let out = self.forward(&g, img);
        let ce = g.cross_entropy_sum(out.logits, targets);
        let loss = g.scale(ce, T::lit(lambda));
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("guidance loss is {value}")));
        }
        let grad = g.backward(loss).get_or_zeros(vi);
        if !grad.all_finite() {
            return Err(Error::Diverged("non-finite guidance gradient".into()));
        }
        Ok((value, grad))
    }

    pub fn accuracy(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.logits(x)?.argmax_rows();
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier { store: util::cast_store(&self.store), convs: self.convs.clone(), head: self.head, meta: self.meta.clone() }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        util::save_model(&self.store, &self.meta, dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ClassifierMeta = util::load_meta(dir, stem)?;
        let mut model = Classifier::new(&meta.config, meta.num_classes, meta.image_size)?;
        util::load_params(&mut model.store, dir, stem)?;
        model.meta = meta;
        Ok(model)
    }
}

/// Trains on `(image, label)` pairs and keeps the parameters with the best
/// validation accuracy.
pub fn train_classifier<T: Scalar>(
    train: &[(&Tensor<T>, usize)],
    val: &[(&Tensor<T>, usize)],
    num_classes: usize,
    config: &ClassifierConfig,
) -> Result<Classifier<T>> {
    let first = train.first().ok_or_else(|| invalid("empty training set"))?;
    let present: std::collections::BTreeSet<usize> = train.iter().map(|&(_, y)| y).collect();
    if present.len() < 2 {
        return Err(invalid("training data contains a single class"));
    }
    let image_size = first.0.dim(1);
    let mut model = Classifier::<T>::new(config, num_classes, image_size)?;
    let images: Vec<&Tensor<T>> = train.iter().map(|&(x, _)| x).collect();
    let labels: Vec<usize> = train.iter().map(|&(_, y)| y).collect();
    let (val_x, val_y) = if val.is_empty() {
        (None, Vec::new())
    } else {
        let v: Vec<&Tensor<T>> = val.iter().map(|&(x, _)| x).collect();
        (Some(gather(&v, &(0..v.len()).collect::<Vec<_>>())), val.iter().map(|&(_, y)| y).collect())
    };
    let evaluate = |m: &Classifier<T>| -> Result<f64> {
        match &val_x {
            Some(x) => m.accuracy(x, &val_y),
            None => Ok(f64::NAN),
        }
    };
    let mut opt = Adam::new(&model.store, config.lr);
    let mut rng = seed::rng(config.seed, &[0xba7c4]);
    let mut best = (evaluate(&model)?, model.store.clone());
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(images.len(), config.batch_size, &mut rng) {
            let x = gather(&images, &idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let xi = g.input(x);
            let out = model.forward(&g, xi);
            let ce = g.cross_entropy_sum(out.logits, &y);
            let loss = g.scale(ce, T::one() / T::from_usize_lossy(y.len()));
            let l = g.value(loss).data()[0].as_f64();
            util::ensure_finite(l, "classifier loss")?;
            total += l * y.len() as f64;
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &model.store);
            opt.step(&mut model.store, &pg);
        }
        let acc = evaluate(&model)?;
        log::info!("classifier epoch {epoch}: loss {:.4} val_acc {acc:.4}", total / images.len() as f64);
        if acc.is_nan() || best.0.is_nan() || acc > best.0 {
            best = (acc, model.store.clone());
        }
    }
    if !best.0.is_nan() {
        model.store.load_from(best.1.iter().map(|(n, t)| (n.to_string(), t.clone())).collect())?;
    }
    model.meta.epochs = config.epochs;
    model.meta.val_accuracy = (!best.0.is_nan()).then_some(best.0);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Vec<(Tensor<f32>, usize)> {
        // class 0 dark, class 1 bright, with pixel noise
        let mut rng = seed::rng(seed, &[]);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let base = if y == 0 { 0.3 } else { 0.7 };
                let data = (0..3 * 32 * 32).map(|_| base + rng.random_range(-0.15..0.15f32)).collect();
                (Tensor::new(&[3, 32, 32], data).unwrap(), y)
            })
            .collect()
    }

    fn small_config(epochs: usize) -> ClassifierConfig {
        ClassifierConfig { channels: vec![8, 8, 16], epochs, batch_size: 16, lr: 3e-3, seed: 3 }
    }

    #[test]
    fn separable_toy_is_learned() {
        let train = toy(128, 1);
        let val = toy(64, 2);
        let tr: Vec<_> = train.iter().map(|(x, y)| (x, *y)).collect();
        let va: Vec<_> = val.iter().map(|(x, y)| (x, *y)).collect();
        let m = train_classifier(&tr, &va, 2, &small_config(4)).unwrap();
        let acc = m.meta.val_accuracy.unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn probabilities_normalized_and_deterministic() {
        let m = Classifier::<f32>::new(&small_config(0), 4, 32).unwrap();
        let x = Tensor::uniform(&[5, 3, 32, 32], 0.0, 1.0, &mut seed::rng(5, &[]));
        let p = m.predict(&x).unwrap();
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(p, m.predict(&x).unwrap());
        assert_eq!(m.features(&x).unwrap().shape(), &[5, 16]);
        assert!(m.predict(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let train = toy(8, 1);
        let tr: Vec<_> = train.iter().filter(|(_, y)| *y == 0).map(|(x, y)| (x, *y)).collect();
        assert!(train_classifier(&tr, &[], 2, &small_config(1)).is_err());
    }

    #[test]
    fn zero_epochs_gives_chance_accuracy() {
        let mut rng = seed::rng(9, &[]);
        let data: Vec<(Tensor<f32>, usize)> =
            (0..400).map(|i| (Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng), i % 4)).collect();
        let tr: Vec<_> = data.iter().map(|(x, y)| (x, *y)).collect();
        let m = train_classifier(&tr, &tr, 4, &small_config(0)).unwrap();
        let acc = m.meta.val_accuracy.unwrap();
        assert!((acc - 0.25).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn guidance_loss_is_linear_in_lambda() {
        let m = Classifier::<f64>::new(&small_config(0), 3, 32).unwrap();
        let v = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut seed::rng(6, &[]));
        let id = |_: &Graph<f64>, x: Var| x;
        let (l0, g0) = m.class_loss_and_grad(id, &v, &[0, 2], 0.0).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.data().iter().all(|&x| x == 0.0));
        let (l1, g1) = m.class_loss_and_grad(id, &v, &[0, 2], 1.5).unwrap();
        let (l2, g2) = m.class_loss_and_grad(id, &v, &[0, 2], 3.0).unwrap();
        assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l2.abs());
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((b - 2.0 * a).abs() <= 1e-6 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let m = Classifier::<f64>::new(&small_config(0), 3, 32).unwrap();
        let v = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut seed::rng(7, &[]));
        let dec = |g: &Graph<f64>, x: Var| g.sigmoid(x);
        let (_, grad) = m.class_loss_and_grad(dec, &v, &[1], 2.0).unwrap();
        let mut rng = seed::rng(8, &[]);
        for _ in 0..10 {
            let i = rng.random_range(0..v.len());
            let h = 1e-5;
            let mut vp = v.clone();
            vp.data_mut()[i] += h;
            let mut vm = v.clone();
            vm.data_mut()[i] -= h;
            let fp = m.class_loss_and_grad(dec, &vp, &[1], 2.0).unwrap().0;
            let fm = m.class_loss_and_grad(dec, &vm, &[1], 2.0).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-6), "{fd} vs {an}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Classifier::<f32>::new(&small_config(0), 3, 32).unwrap();
        m.save(dir.path(), "clf").unwrap();
        let back = Classifier::<f32>::load(dir.path(), "clf").unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut seed::rng(1, &[]));
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    }
}

//! Search for VAE latent dimensions whose manipulation raises a target
//! class probability, plus montages and difference maps for inspection.

use ctraj_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::{class_name, Mask};
use crate::error::{invalid, Error, Result};
use crate::image_io;
use crate::util::gather;
use crate::vae::Vae;

/// Values assigned to a latent dimension during the sweep.
pub const DIRECTIONS: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub dimension: usize,
    pub direction: f64,
    pub mean_delta: f64,
    pub success_rate: f64,
    /// Per-image change of the target probability, in image order.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub target_class: usize,
    pub target_name: String,
    pub k: usize,
    pub m: usize,
    pub directions: Vec<f64>,
    pub image_ids: Vec<String>,
    pub image_fingerprint: String,
    pub entries: Vec<ConceptEntry>,
}

/// `delta[x][i][d]` for every image, dimension and grid direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub m: usize,
    pub num_images: usize,
    data: Vec<f64>,
}

impl DeltaTable {
    pub fn get(&self, x: usize, i: usize, d: usize) -> f64 {
        self.data[(x * self.m + i) * DIRECTIONS.len() + d]
    }

    pub fn deltas(&self, i: usize, d: usize) -> Vec<f64> {
        (0..self.num_images).map(|x| self.get(x, i, d)).collect()
    }

    pub fn mean(&self, i: usize, d: usize) -> f64 {
        self.deltas(i, d).iter().sum::<f64>() / self.num_images as f64
    }

    pub fn success_rate(&self, i: usize, d: usize) -> f64 {
        self.deltas(i, d).iter().filter(|&&v| v > 0.0).count() as f64 / self.num_images as f64
    }

    /// All `(i, d)` pairs ordered by mean delta, descending; ties broken by
    /// dimension then direction.
    pub fn ranking(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs: Vec<(usize, usize, f64)> =
            (0..self.m).flat_map(|i| (0..DIRECTIONS.len()).map(move |d| (i, d))).map(|(i, d)| (i, d, self.mean(i, d))).collect();
        pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        pairs
    }

    /// Full mean-delta table as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dimension,direction,mean_delta,success_rate\n");
        for i in 0..self.m {
            for (d, dir) in DIRECTIONS.iter().enumerate() {
                s.push_str(&format!("{i},{dir},{:.9},{:.6}\n", self.mean(i, d), self.success_rate(i, d)));
            }
        }
        s
    }
}

fn target_probs<T: Scalar>(classifier: &Classifier<T>, images: &Tensor<T>, y: usize) -> Result<Vec<f64>> {
    let p = classifier.predict(images)?;
    let k = p.item_len();
    Ok(p.data().chunks(k).map(|r| r[y].as_f64()).collect())
}

/// Sweeps every dimension of one latent over the direction grid, restoring
/// the dimension afterwards. Returns `m * 7` deltas against the baseline
/// `f_y(decode(l))`.
pub fn sweep_latent<T: Scalar>(classifier: &Classifier<T>, vae: &Vae<T>, latent: &[T], y: usize) -> Result<Vec<f64>> {
    let m = vae.latent_dim();
    if latent.len() != m {
        return Err(Error::ShapeMismatch(format!("latent of length {} for m = {m}", latent.len())));
    }
    let mut l = latent.to_vec();
    let mut rows = Vec::with_capacity((1 + m * DIRECTIONS.len()) * m);
    rows.extend_from_slice(&l);
    for i in 0..m {
        let original = l[i];
        for &d in &DIRECTIONS {
            l[i] = T::lit(d);
            rows.extend_from_slice(&l);
        }
        l[i] = original;
    }
    debug_assert!(l == latent);
    let batch = Tensor::new(&[1 + m * DIRECTIONS.len(), m], rows)?;
    let probs = target_probs(classifier, &vae.decode(&batch)?, y)?;
    let base = probs[0];
    Ok(probs[1..].iter().map(|p| p - base).collect())
}

fn check_target<T: Scalar>(classifier: &Classifier<T>, y: usize) -> Result<()> {
    if y >= classifier.meta.num_classes {
        return Err(invalid(format!("target class {y} outside 0..{}", classifier.meta.num_classes)));
    }
    Ok(())
}

/// Rejects images the classifier already assigns to `y`.
pub fn check_not_target<T: Scalar>(classifier: &Classifier<T>, ids: &[String], images: &[&Tensor<T>], y: usize) -> Result<()> {
    let mut offenders = Vec::new();
    for (start, chunk) in (0..images.len()).step_by(64).zip(images.chunks(64)) {
        let x = gather(chunk, &(0..chunk.len()).collect::<Vec<_>>());
        for (j, p) in classifier.logits(&x)?.argmax_rows().into_iter().enumerate() {
            if p == y {
                offenders.push(ids[start + j].clone());
            }
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{} image(s) already classified as class {y}: {}",
            offenders.len(),
            offenders.join(", ")
        )))
    }
}

pub fn delta_table<T: Scalar>(classifier: &Classifier<T>, vae: &Vae<T>, images: &[&Tensor<T>], y: usize) -> Result<DeltaTable> {
    check_target(classifier, y)?;
    if images.is_empty() {
        return Err(invalid("empty image set"));
    }
    let m = vae.latent_dim();
    let mut data = Vec::with_capacity(images.len() * m * DIRECTIONS.len());
    for chunk in images.chunks(64) {
        let latents = vae.encode(&gather(chunk, &(0..chunk.len()).collect::<Vec<_>>()))?;
        for j in 0..chunk.len() {
            data.extend(sweep_latent(classifier, vae, latents.item_slice(j), y)?);
        }
    }
    Ok(DeltaTable { m, num_images: images.len(), data })
}

/// FNV-1a over image ids and pixel bits.
pub fn image_set_fingerprint<T: Scalar>(ids: &[String], images: &[&Tensor<T>]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (id, img) in ids.iter().zip(images) {
        eat(id.as_bytes());
        for v in img.data() {
            eat(&v.as_f64().to_bits().to_le_bytes());
        }
    }
    format!("{h:016x}")
}

/// Ranks `(dimension, direction)` pairs by the mean increase of the target
/// probability over `images`, none of which may already be classified as
/// `y`. Returns the top `k` with success rates.
pub fn find_relevant_dimensions<T: Scalar>(
    classifier: &Classifier<T>,
    vae: &Vae<T>,
    ids: &[String],
    images: &[&Tensor<T>],
    y: usize,
    k: usize,
) -> Result<(ConceptReport, DeltaTable)> {
    check_target(classifier, y)?;
    if images.is_empty() {
        return Err(invalid("empty image set"));
    }
    if ids.len() != images.len() {
        return Err(Error::ShapeMismatch(format!("{} ids for {} images", ids.len(), images.len())));
    }
    let m = vae.latent_dim();
    if k > DIRECTIONS.len() * m {
        return Err(invalid(format!("K = {k} exceeds the {} available (dimension, direction) pairs", DIRECTIONS.len() * m)));
    }
    check_not_target(classifier, ids, images, y)?;
    let table = delta_table(classifier, vae, images, y)?;
    let entries = table
        .ranking()
        .into_iter()
        .take(k)
        .map(|(i, d, mean)| ConceptEntry {
            dimension: i,
            direction: DIRECTIONS[d],
            mean_delta: mean,
            success_rate: table.success_rate(i, d),
            deltas: table.deltas(i, d),
        })
        .collect();
    let report = ConceptReport {
        target_class: y,
        target_name: class_name(y).to_string(),
        k,
        m,
        directions: DIRECTIONS.to_vec(),
        image_ids: ids.to_vec(),
        image_fingerprint: image_set_fingerprint(ids, images),
        entries,
    };
    Ok((report, table))
}

/// Fraction of images whose target probability rises when dimension `i`
/// is set to `direction`.
pub fn success_rate<T: Scalar>(
    classifier: &Classifier<T>,
    vae: &Vae<T>,
    images: &[&Tensor<T>],
    i: usize,
    direction: f64,
    y: usize,
) -> Result<f64> {
    check_target(classifier, y)?;
    if images.is_empty() {
        return Err(invalid("success rate of an empty image set"));
    }
    let mut hits = 0;
    for img in images {
        let [_, base, manip] = concept_montage(vae, img, i, direction)?;
        let p = target_probs(classifier, &gather(&[&base, &manip], &[0, 1]), y)?;
        if p[1] - p[0] > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// `[original, reconstruction, manipulated reconstruction]` for one
/// `[3, S, S]` image with latent dimension `i` set to `direction`.
pub fn concept_montage<T: Scalar>(vae: &Vae<T>, image: &Tensor<T>, i: usize, direction: f64) -> Result<[Tensor<T>; 3]> {
    let m = vae.latent_dim();
    if i >= m {
        return Err(invalid(format!("dimension {i} out of range (m = {m})")));
    }
    if !direction.is_finite() {
        return Err(invalid(format!("direction {direction} is not finite")));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected one [3, S, S] image, got {s:?}")));
    }
    let x = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let l = vae.encode(&x)?;
    let mut lm = l.clone();
    lm.data_mut()[i] = T::lit(direction);
    let recon = vae.decode(&l)?.select(0);
    let manip = vae.decode(&lm)?.select(0);
    Ok([image.clone(), recon, manip])
}

/// Montage as one horizontal PNG strip.
pub fn montage_png<T: Scalar>(panels: &[Tensor<T>; 3]) -> Result<Vec<u8>> {
    image_io::encode_png(&image_io::horizontal_strip(panels)?)
}

/// Channel-mean absolute difference `[1, H, W]`, scaled so its maximum is
/// 1 (all zeros when the images are equal).
pub fn difference_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<f64>> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!("difference map of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let plane = h * w;
    let mut map = vec![0.0; plane];
    for ch in 0..c {
        for p in 0..plane {
            let k = ch * plane + p;
            map[p] += (a.data()[k].as_f64() - b.data()[k].as_f64()).abs() / c as f64;
        }
    }
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Tensor::new(&[1, h, w], map)?)
}

fn masked_means(map: &Tensor<f64>, mask: &Mask) -> Result<(f64, f64)> {
    if map.len() != mask.data.len() {
        return Err(Error::ShapeMismatch(format!("map of {} pixels vs mask of {}", map.len(), mask.data.len())));
    }
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.data().iter().zip(&mask.data) {
        if m {
            inside += v;
            n_in += 1;
        } else {
            outside += v;
            n_out += 1;
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(invalid("mask must split the image into two non-empty regions"));
    }
    Ok((inside / n_in as f64, outside / n_out as f64))
}

/// Mean map value inside the mask divided by the mean outside it.
pub fn mask_mean_ratio(map: &Tensor<f64>, mask: &Mask) -> Result<f64> {
    let (inside, outside) = masked_means(map, mask)?;
    Ok(if outside > 0.0 { inside / outside } else if inside > 0.0 { f64::INFINITY } else { 0.0 })
}

/// Share of the map's total mass that falls inside the mask.
pub fn mask_mass_fraction(map: &Tensor<f64>, mask: &Mask) -> Result<f64> {
    let total = map.data().iter().sum::<f64>();
    if map.len() != mask.data.len() {
        return Err(Error::ShapeMismatch("map and mask differ in size".into()));
    }
    let inside: f64 = map.data().iter().zip(&mask.data).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Average over images of the reconstruction-to-manipulation difference
/// maps for one `(dimension, direction)`.
pub fn mean_difference_map<T: Scalar>(vae: &Vae<T>, images: &[&Tensor<T>], i: usize, direction: f64) -> Result<Tensor<f64>> {
    let first = images.first().ok_or_else(|| invalid("empty image set"))?;
    let mut acc = Tensor::<f64>::zeros(&[1, first.dim(1), first.dim(2)]);
    for img in images {
        let [_, r, mnp] = concept_montage(vae, img, i, direction)?;
        acc.axpy(1.0 / images.len() as f64, &difference_map(&r, &mnp)?);
    }
    Ok(acc)
}

impl ConceptReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Ranked entries without the per-image deltas.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,dimension,direction,mean_delta,success_rate\n");
        for (r, e) in self.entries.iter().enumerate() {
            s.push_str(&format!("{},{},{},{:.9},{:.6}\n", r + 1, e.dimension, e.direction, e.mean_delta, e.success_rate));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::seed;
    use crate::vae::VaeConfig;

    fn models() -> (Classifier<f64>, Vae<f64>) {
        let c = Classifier::<f32>::new(&ClassifierConfig { channels: vec![4, 4, 4, 4], ..Default::default() }, 4, 32).unwrap();
        let v = Vae::<f32>::new(&VaeConfig { latent_dim: 5, channels: vec![4; 6], ..Default::default() }, 32).unwrap();
        (c.cast(), v.cast())
    }

    #[test]
    fn setting_the_encoded_value_is_a_no_op() {
        let (c, v) = models();
        let mut l = vec![0.3, 2.0, -0.7, -3.0, 1.1];
        let deltas = sweep_latent(&c, &v, &l, 1).unwrap();
        assert_eq!(deltas.len(), 5 * 7);
        // dimension 1 already holds +2, dimension 3 holds -3
        assert_eq!(deltas[7 + 5], 0.0);
        assert_eq!(deltas[3 * 7], 0.0);
        l[1] = 0.25;
        assert_ne!(sweep_latent(&c, &v, &l, 1).unwrap()[7 + 5], 0.0);
        assert!(sweep_latent(&c, &v, &l[..4], 1).is_err());
    }

    #[test]
    fn montage_identity_and_range_checks() {
        let (_, v) = models();
        let img = Tensor::<f64>::uniform(&[3, 32, 32], 0.0, 1.0, &mut seed::rng(3, &[]));
        let l = v.encode(&img.clone().reshape(&[1, 3, 32, 32]).unwrap()).unwrap();
        let [o, r, mnp] = concept_montage(&v, &img, 2, l.data()[2]).unwrap();
        assert_eq!(o, img);
        assert_eq!(r, mnp);
        assert!(concept_montage(&v, &img, 5, 1.0).is_err());
        let png = montage_png(&[o, r, mnp]).unwrap();
        let strip: Tensor<f32> = image_io::decode_png(&png).unwrap();
        assert_eq!(strip.shape(), &[3, 32, 96]);
    }

    #[test]
    fn difference_map_cases() {
        let a = Tensor::<f64>::uniform(&[3, 4, 4], 0.0, 1.0, &mut seed::rng(4, &[]));
        assert!(difference_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        b.data_mut()[16 + 5] += 0.2;
        let m = difference_map(&a, &b).unwrap();
        for (p, &v) in m.data().iter().enumerate() {
            assert_eq!(v, if p == 5 { 1.0 } else { 0.0 });
        }
        assert!(difference_map(&a, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn ranking_is_sorted_and_report_validated() {
        let (c, v) = models();
        let mut rng = seed::rng(5, &[]);
        let imgs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
        let ids: Vec<String> = (0..3).map(|i| format!("x{i}")).collect();
        let preds = c.logits(&gather(&refs, &[0, 1, 2])).unwrap().argmax_rows();
        let y = (0..4).find(|y| !preds.contains(y)).unwrap();
        let (report, table) = find_relevant_dimensions(&c, &v, &ids, &refs, y, 6).unwrap();
        assert_eq!(report.entries.len(), 6);
        assert!(report.entries.windows(2).all(|w| w[0].mean_delta >= w[1].mean_delta));
        assert!(report.entries.iter().all(|e| (0.0..=1.0).contains(&e.success_rate) && e.dimension < 5));
        assert_eq!(report.directions, DIRECTIONS.to_vec());
        let top = &report.entries[0];
        let sr = success_rate(&c, &v, &refs, top.dimension, top.direction, y).unwrap();
        assert_eq!(sr, top.success_rate);
        assert_eq!(table.to_csv().lines().count(), 1 + 35);
        assert!(find_relevant_dimensions(&c, &v, &ids, &refs, y, 36).is_err());
        let err = find_relevant_dimensions(&c, &v, &ids, &refs, preds[0], 3).unwrap_err().to_string();
        assert!(err.contains("x0"), "{err}");
        assert!(success_rate(&c, &v, &[], 0, 1.0, y).is_err());
        let back = ConceptReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }
}

//! Counterfactual quality metrics: L1, L2, Frechet distance over classifier
//! features and flip ratio.

use ctraj_nn::{Scalar, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{invalid, Error, Result};
use crate::util::gather;

pub const COV_SHRINKAGE: f64 = 1e-6;

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(invalid("empty images"));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean squared difference over all pixels and channels.
pub fn l2_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.len() as f64)
}

struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn fit(rows: &[Vec<f64>], dim: usize) -> Gaussian {
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(dim);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in rows {
        let d = DVector::from_column_slice(r) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    for i in 0..dim {
        cov[(i, i)] += COV_SHRINKAGE;
    }
    Gaussian { mean, cov }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` through the symmetric form `A^{1/2} B A^{1/2}`, with
/// negative eigenvalues clipped to zero.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(a);
    let mut m = &ra * b * &ra;
    m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum()
}

/// Frechet distance between Gaussian fits of two feature sets (rows).
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().or(b.first()).map(|r| r.len()).ok_or_else(|| invalid("empty feature sets"))?;
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    let min = dim + 1;
    if a.len() < min || b.len() < min {
        return Err(invalid(format!(
            "FID needs at least {min} vectors per set (feature_dim + 1), got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ga, gb) = (fit(a, dim), fit(b, dim));
    let mean_term = (&ga.mean - &gb.mean).norm_squared();
    // average both orders so the result is exactly symmetric
    let cross = 0.5 * (trace_sqrt_product(&ga.cov, &gb.cov) + trace_sqrt_product(&gb.cov, &ga.cov));
    Ok(mean_term + ga.cov.trace() + gb.cov.trace() - 2.0 * cross)
}

pub fn feature_rows<T: Scalar>(features: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = features.item_len();
    features.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Classifier features of a list of `[3, S, S]` images.
pub fn image_features<T: Scalar>(classifier: &Classifier<T>, images: &[&Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let x = gather(chunk, &(0..chunk.len()).collect::<Vec<_>>());
        rows.extend(feature_rows(&classifier.features(&x)?));
    }
    Ok(rows)
}

/// Fraction of flipped trajectories; failed ones count as not flipped.
pub fn flip_ratio(flipped: &[bool]) -> Result<f64> {
    if flipped.is_empty() {
        return Err(invalid("flip ratio of an empty manifest"));
    }
    Ok(flipped.iter().filter(|&&f| f).count() as f64 / flipped.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
    #[serde(rename = "FR")]
    pub fr: f64,
    pub samples: usize,
    pub failed: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,L1,L2,FID,FR,samples";

    pub fn csv_row(&self) -> String {
        format!("{},{:.5},{:.5},{:.5},{:.5},{}", self.method, self.l1, self.l2, self.fid, self.fr, self.samples)
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(EvalReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// One generated counterfactual to score; `counterfactual` is `None` when
/// the trajectory failed.
pub struct CfPair<'a, T: Scalar> {
    pub factual: &'a Tensor<T>,
    pub counterfactual: Option<&'a Tensor<T>>,
    pub target: usize,
}

/// L1/L2 over (factual, counterfactual) pairs, FID of counterfactuals
/// against real images, flip ratio under `classifier`.
pub fn evaluate_counterfactuals<T: Scalar>(
    method: &str,
    pairs: &[CfPair<'_, T>],
    real: &[&Tensor<T>],
    classifier: &Classifier<T>,
    fingerprint: &str,
) -> Result<EvalReport> {
    let ok: Vec<&CfPair<'_, T>> = pairs.iter().filter(|p| p.counterfactual.is_some()).collect();
    if ok.is_empty() {
        return Err(invalid("no successful counterfactuals to evaluate"));
    }
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for p in &ok {
        let cf = p.counterfactual.expect("filtered");
        l1 += l1_distance(p.factual, cf)?;
        l2 += l2_distance(p.factual, cf)?;
    }
    let cfs: Vec<&Tensor<T>> = ok.iter().map(|p| p.counterfactual.expect("filtered")).collect();
    let mut flipped = Vec::with_capacity(pairs.len());
    for chunk in ok.chunks(64) {
        let imgs: Vec<&Tensor<T>> = chunk.iter().map(|p| p.counterfactual.expect("filtered")).collect();
        let pred = classifier.logits(&gather(&imgs, &(0..imgs.len()).collect::<Vec<_>>()))?.argmax_rows();
        flipped.extend(pred.iter().zip(chunk).map(|(&p, c)| p == c.target));
    }
    flipped.extend(std::iter::repeat_n(false, pairs.len() - ok.len()));
    let fid_value = fid(&image_features(classifier, &cfs)?, &image_features(classifier, real)?)?;
    Ok(EvalReport {
        method: method.to_string(),
        l1: l1 / ok.len() as f64,
        l2: l2 / ok.len() as f64,
        fid: fid_value,
        fr: flip_ratio(&flipped)?,
        samples: pairs.len(),
        failed: pairs.len() - ok.len(),
        fingerprint: fingerprint.to_string(),
    })
}

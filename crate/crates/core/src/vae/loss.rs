//! Five-term VAE objective: reconstruction MSE, weighted KL divergence, L1,
//! SSIM loss and a classifier-feature perceptual term.

use ctraj_nn::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::ssim::{check_ssim_input, ssim_graph};
use crate::classifier::Classifier;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeLossWeights {
    pub w_kld: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        VaeLossWeights { w_kld: 1e-3 }
    }
}

impl VaeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_kld >= 0.0 && self.w_kld.is_finite()) {
            return Err(invalid(format!("w_kld must be finite and >= 0, got {}", self.w_kld)));
        }
        Ok(())
    }
}

/// Unweighted component values and the weighted total
/// `rec + w_kld * kld + l1 + ssim + perc`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub kld: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perc: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn from_parts(rec: f64, kld: f64, l1: f64, ssim: f64, perc: f64, weights: &VaeLossWeights) -> Result<Self> {
        for (name, v) in [("Rec", rec), ("KLD", kld), ("L1", l1), ("SSIM", ssim), ("Perc", perc)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("VAE loss component {name} is {v}")));
            }
        }
        let total = rec + weights.w_kld * kld + l1 + ssim + perc;
        Ok(LossComponents { rec, kld, l1, ssim, perc, total })
    }

    pub fn accumulate(&mut self, other: &LossComponents, weight: f64) {
        self.rec += weight * other.rec;
        self.kld += weight * other.kld;
        self.l1 += weight * other.l1;
        self.ssim += weight * other.ssim;
        self.perc += weight * other.perc;
        self.total += weight * other.total;
    }
}

pub struct LossVars {
    pub rec: Var,
    pub kld: Var,
    pub l1: Var,
    pub ssim: Var,
    pub perc: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn components<T: Scalar>(&self, g: &Graph<T>, weights: &VaeLossWeights) -> Result<LossComponents> {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossComponents::from_parts(v(self.rec), v(self.kld), v(self.l1), v(self.ssim), self.perc.map_or(0.0, v), weights)
    }
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent
/// dimensions and averaged over the batch.
pub fn kld_graph<T: Scalar>(g: &Graph<T>, mu: Var, logvar: Var) -> Var {
    let n = g.shape(mu)[0];
    let inner = g.sub(g.add(g.square(mu), g.exp(logvar)), g.offset(logvar, T::one()));
    g.scale(g.sum(inner), T::lit(0.5 / n as f64))
}

pub fn vae_loss_graph<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    recon: Var,
    mu: Var,
    logvar: Var,
    weights: &VaeLossWeights,
    features: Option<&Classifier<T>>,
) -> LossVars {
    let diff = g.sub(recon, x);
    let rec = g.mean(g.square(diff));
    let l1 = g.mean(g.abs(diff));
    let ssim = g.offset(g.scale(ssim_graph(g, x, recon), -T::one()), T::one());
    let kld = kld_graph(g, mu, logvar);
    let perc = features.map(|c| c.perceptual(g, recon, x));
    let mut total = g.add(g.add(rec, l1), ssim);
    total = g.add(total, g.scale(kld, T::lit(weights.w_kld)));
    if let Some(p) = perc {
        total = g.add(total, p);
    }
    LossVars { rec, kld, l1, ssim, perc, total }
}

/// Evaluates the objective on concrete tensors.
pub fn vae_loss<T: Scalar>(
    x: &Tensor<T>,
    recon: &Tensor<T>,
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    weights: &VaeLossWeights,
    features: Option<&Classifier<T>>,
) -> Result<LossComponents> {
    weights.validate()?;
    if x.shape() != recon.shape() {
        return Err(Error::ShapeMismatch(format!("image {:?} vs reconstruction {:?}", x.shape(), recon.shape())));
    }
    check_ssim_input(x.shape())?;
    if mu.shape() != logvar.shape() || mu.shape().len() != 2 || mu.dim(0) != x.dim(0) {
        return Err(Error::ShapeMismatch(format!("mu {:?}, logvar {:?} for {} images", mu.shape(), logvar.shape(), x.dim(0))));
    }
    let g = Graph::inference();
    let vars = vae_loss_graph(&g, g.input(x.clone()), g.input(recon.clone()), g.input(mu.clone()), g.input(logvar.clone()), weights, features);
    vars.components(&g, weights)
}

use std::fmt;
use std::str::FromStr;

use ctraj_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(invalid(format!("unknown schedule kind `{other}` (expected linear or cosine)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// Variance schedule over timesteps `1..=T`, with `alpha_bar(0) = 1`, and the
/// respaced sampler grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_train: usize,
    /// `betas[t - 1]` is β_t.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`.
    pub alpha_bars: Vec<f64>,
    /// Timesteps visited by the sampler, strictly decreasing, length S.
    /// Entry `S - s` is the timestep of sampler index `s`.
    pub sampler_steps: Vec<usize>,
}

pub fn make_schedule(t_train: usize, kind: ScheduleKind, sampler_len: usize) -> Result<NoiseSchedule> {
    if sampler_len == 0 || t_train < sampler_len {
        return Err(invalid(format!("need T_train >= S >= 1, got T_train = {t_train}, S = {sampler_len}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            (0..t_train)
                .map(|i| if t_train == 1 { lo } else { lo + (hi - lo) * i as f64 / (t_train - 1) as f64 })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / t_train as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=t_train).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999)).collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_train + 1);
    alpha_bars.push(1.0);
    for &a in &alphas {
        let prev = *alpha_bars.last().expect("nonempty");
        alpha_bars.push(a * prev);
    }
    let sampler_steps = (1..=sampler_len).rev().map(|s| s * t_train / sampler_len).collect();
    Ok(NoiseSchedule { kind, t_train, betas, alphas, alpha_bars, sampler_steps })
}

impl NoiseSchedule {
    pub fn sampler_len(&self) -> usize {
        self.sampler_steps.len()
    }

    /// Timestep of sampler index `s` in `0..=S`; index 0 is the clean end.
    pub fn timestep(&self, s: usize) -> usize {
        assert!(s <= self.sampler_len(), "sampler index {s} beyond {}", self.sampler_len());
        if s == 0 {
            0
        } else {
            self.sampler_steps[self.sampler_len() - s]
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps`.
    pub fn forward_noise<T: Scalar>(&self, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        if !(1..=self.t_train).contains(&t) {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.t_train)));
        }
        let ab = self.alpha_bars[t];
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        z0.zip_map(eps, |z, e| a * z + b * e).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

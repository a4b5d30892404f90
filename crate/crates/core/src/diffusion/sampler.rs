//! Deterministic reverse-process steppers over the respaced grid.

use ctraj_nn::{Scalar, Tensor};

use super::schedule::NoiseSchedule;
use crate::error::{invalid, Error, Result};

/// Noise predictor: `(z, timestep) -> eps_hat`.
pub trait NoiseFn<T: Scalar> {
    fn eps(&mut self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar, F: FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>> NoiseFn<T> for F {
    fn eps(&mut self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(z, t)
    }
}

/// Moves `x` from timestep `t` to `t_next` along the deterministic
/// probability-flow transfer given a noise estimate.
pub fn transfer<T: Scalar>(schedule: &NoiseSchedule, x: &Tensor<T>, t: usize, t_next: usize, eps: &Tensor<T>) -> Tensor<T> {
    let a = schedule.alpha_bar(t);
    let an = schedule.alpha_bar(t_next);
    let (sa, sn) = (a.sqrt(), an.sqrt());
    let cx = T::lit((an - a) / (sa * (sa + sn)));
    let ce = T::lit((an - a) / (sa * (((1.0 - an) * a).sqrt() + ((1.0 - a) * an).sqrt())));
    x.zip_map(eps, |xv, ev| xv + (cx * xv - ce * ev)).expect("transfer: eps shape")
}

/// Noise-estimate history of one PNDM trajectory. Never share a state
/// between trajectories.
#[derive(Debug, Clone, Default)]
pub struct PndmState<T: Scalar> {
    history: Vec<Tensor<T>>,
}

const WARMUP: usize = 3;

impl<T: Scalar> PndmState<T> {
    pub fn new() -> Self {
        PndmState { history: Vec::new() }
    }

    /// Resumes from stored estimates, oldest first; at most three are used.
    pub fn from_history(history: Vec<Tensor<T>>) -> Result<Self> {
        if history.len() > WARMUP {
            return Err(invalid(format!("PNDM history holds at most {WARMUP} estimates, got {}", history.len())));
        }
        if let Some(first) = history.first() {
            if history.iter().any(|h| h.shape() != first.shape()) {
                return Err(Error::ShapeMismatch("PNDM history entries differ in shape".into()));
            }
        }
        Ok(PndmState { history })
    }

    pub fn history(&self) -> &[Tensor<T>] {
        &self.history
    }

    fn push(&mut self, e: Tensor<T>) {
        self.history.push(e);
        if self.history.len() > WARMUP {
            self.history.remove(0);
        }
    }
}

fn check_consecutive(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<()> {
    let s = schedule.sampler_steps.iter().position(|&x| x == t);
    let ok = match s {
        Some(i) if i + 1 < schedule.sampler_len() => schedule.sampler_steps[i + 1] == t_prev,
        Some(_) => t_prev == 0,
        None => false,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("({t}, {t_prev}) are not consecutive sampler timesteps")))
    }
}

/// One pseudo-linear-multistep step from `t` to `t_prev`. The first three
/// steps of a fresh state use the pseudo Runge-Kutta warmup (four noise
/// evaluations each); later steps combine the stored estimates.
pub fn pndm_step<T: Scalar>(
    model: &mut impl NoiseFn<T>,
    schedule: &NoiseSchedule,
    state: &mut PndmState<T>,
    z: &Tensor<T>,
    t: usize,
    t_prev: usize,
) -> Result<Tensor<T>> {
    check_consecutive(schedule, t, t_prev)?;
    if state.history.iter().any(|h| h.shape() != z.shape()) {
        return Err(Error::ShapeMismatch("PNDM history does not match the latent shape".into()));
    }
    let e1 = model.eps(z, t)?;
    let eps = if state.history.len() >= WARMUP {
        let h = &state.history;
        let (a, b, c) = (&h[2], &h[1], &h[0]);
        let k = T::lit(1.0 / 24.0);
        let mut out = e1.scale(T::lit(55.0));
        out.axpy(T::lit(-59.0), a);
        out.axpy(T::lit(37.0), b);
        out.axpy(T::lit(-9.0), c);
        state.push(e1);
        out.scale(k)
    } else {
        let mid = (t + t_prev) / 2;
        let x2 = transfer(schedule, z, t, mid, &e1);
        let e2 = model.eps(&x2, mid)?;
        let x3 = transfer(schedule, z, t, mid, &e2);
        let e3 = model.eps(&x3, mid)?;
        let x4 = transfer(schedule, z, t, t_prev, &e3);
        let e4 = model.eps(&x4, t_prev)?;
        let mut out = e1.clone();
        out.axpy(T::lit(2.0), &e2);
        out.axpy(T::lit(2.0), &e3);
        out.add_assign(&e4);
        state.push(e1);
        out.scale(T::lit(1.0 / 6.0))
    };
    Ok(transfer(schedule, z, t, t_prev, &eps))
}

/// Deterministic DDIM step, kept as a debugging baseline.
pub fn ddim_step<T: Scalar>(
    model: &mut impl NoiseFn<T>,
    schedule: &NoiseSchedule,
    z: &Tensor<T>,
    t: usize,
    t_prev: usize,
) -> Result<Tensor<T>> {
    check_consecutive(schedule, t, t_prev)?;
    let eps = model.eps(z, t)?;
    let (a, an) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let (sa, s1a) = (T::lit(a.sqrt()), T::lit((1.0 - a).sqrt()));
    let (sn, s1n) = (T::lit(an.sqrt()), T::lit((1.0 - an).sqrt()));
    z.zip_map(&eps, |x, e| {
        let x0 = (x - s1a * e) / sa;
        sn * x0 + s1n * e
    })
    .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Pndm,
    Ddim,
}

/// Runs the sampler from index `from` down to 0 with a fresh state.
pub fn denoise_from<T: Scalar>(
    model: &mut impl NoiseFn<T>,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    z: &Tensor<T>,
    from: usize,
) -> Result<Tensor<T>> {
    let mut state = PndmState::new();
    let mut z = z.clone();
    for s in (1..=from).rev() {
        let (t, tp) = (schedule.timestep(s), schedule.timestep(s - 1));
        z = match kind {
            SamplerKind::Pndm => pndm_step(model, schedule, &mut state, &z, t, tp)?,
            SamplerKind::Ddim => ddim_step(model, schedule, &z, t, tp)?,
        };
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::seed;

    fn zero_model(z: &Tensor<f64>, _t: usize) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(z.shape()))
    }

    #[test]
    fn zero_noise_is_pure_rescaling() {
        let s = make_schedule(1000, ScheduleKind::Linear, 50).unwrap();
        let z = Tensor::randn(&[2, 4, 4, 4], &mut seed::rng(1, &[]));
        let mut state = PndmState::new();
        let mut cur = z.clone();
        for step in (1..=50).rev() {
            let (t, tp) = (s.timestep(step), s.timestep(step - 1));
            let next = pndm_step(&mut zero_model, &s, &mut state, &cur, t, tp).unwrap();
            // closed form: sqrt(ab_prev / ab_t)
            let expect = (s.alpha_bar(tp) / s.alpha_bar(t)).sqrt() * cur.norm();
            assert!((next.norm() - expect).abs() <= 1e-5 * expect, "step {step}");
            cur = next;
        }
    }

    #[test]
    fn transfer_matches_ddim_for_exact_noise() {
        // With eps equal to the true noise both steppers land on the same point.
        let s = make_schedule(1000, ScheduleKind::Linear, 50).unwrap();
        let mut rng = seed::rng(2, &[]);
        let z0 = Tensor::<f64>::randn(&[1, 8], &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 8], &mut rng);
        let zt = s.forward_noise(&z0, 600, &eps).unwrap();
        let a = transfer(&s, &zt, 600, 580, &eps);
        let mut fixed = |_: &Tensor<f64>, _: usize| Ok(eps.clone());
        let b = ddim_step(&mut fixed, &s, &zt, 600, 580).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn warmup_then_multistep_evaluation_counts() {
        let s = make_schedule(1000, ScheduleKind::Linear, 50).unwrap();
        let mut calls = 0;
        let mut counting = |z: &Tensor<f64>, _t: usize| {
            calls += 1;
            Ok(Tensor::zeros(z.shape()))
        };
        let z = Tensor::<f64>::ones(&[1, 4]);
        denoise_from(&mut counting, &s, SamplerKind::Pndm, &z, 5).unwrap();
        assert_eq!(calls, 3 * 4 + 2);
    }

    #[test]
    fn deterministic_and_validated() {
        let s = make_schedule(1000, ScheduleKind::Linear, 50).unwrap();
        let mut m = |z: &Tensor<f64>, t: usize| Ok(z.scale(0.1 + t as f64 * 1e-4));
        let z = Tensor::randn(&[1, 6], &mut seed::rng(3, &[]));
        let a = denoise_from(&mut m, &s, SamplerKind::Pndm, &z, 8).unwrap();
        let b = denoise_from(&mut m, &s, SamplerKind::Pndm, &z, 8).unwrap();
        assert_eq!(a, b);
        let mut state = PndmState::new();
        assert!(pndm_step(&mut m, &s, &mut state, &z, 200, 100).is_err());
        assert!(PndmState::<f64>::from_history(vec![z.clone(); 4]).is_err());
        let mut bad = PndmState::from_history(vec![Tensor::zeros(&[1, 2])]).unwrap();
        assert!(pndm_step(&mut m, &s, &mut bad, &z, 200, 180).is_err());
    }
}

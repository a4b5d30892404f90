//! Structural similarity with an 11x11 Gaussian window (sigma 1.5).

use std::rc::Rc;

use ctraj_nn::{Graph, Scalar, Tensor, Var};

use crate::error::{invalid, Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_window<T: Scalar>() -> Rc<Vec<T>> {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    for a in &g {
        for b in &g {
            w.push(T::lit(a * b / (s * s)));
        }
    }
    Rc::new(w)
}

/// Mean SSIM over batch, channels and valid window positions of two
/// `[N, C, H, W]` graph values in `[0, 1]`.
pub fn ssim_graph<T: Scalar>(g: &Graph<T>, x: Var, y: Var) -> Var {
    let w = gaussian_window::<T>();
    let blur = |v: Var| g.depthwise_valid(v, w.clone(), WINDOW);
    let (mx, my) = (blur(x), blur(y));
    let (mx2, my2, mxy) = (g.square(mx), g.square(my), g.mul(mx, my));
    let sxx = g.sub(blur(g.square(x)), mx2);
    let syy = g.sub(blur(g.square(y)), my2);
    let sxy = g.sub(blur(g.mul(x, y)), mxy);
    let two = T::lit(2.0);
    let num = g.mul(g.offset(g.scale(mxy, two), T::lit(C1)), g.offset(g.scale(sxy, two), T::lit(C2)));
    let den = g.mul(g.offset(g.add(mx2, my2), T::lit(C1)), g.offset(g.add(sxx, syy), T::lit(C2)));
    g.mean(g.div(num, den))
}

pub(crate) fn check_ssim_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!("SSIM expects [N, C, H, W], got {shape:?}")));
    }
    if shape[2] < WINDOW || shape[3] < WINDOW {
        return Err(invalid(format!("images {}x{} are smaller than the {WINDOW}x{WINDOW} SSIM window", shape[2], shape[3])));
    }
    Ok(())
}

/// SSIM of two images, `[C, H, W]` or `[N, C, H, W]`, channel-averaged.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let as4 = |t: &Tensor<T>| -> Result<Tensor<T>> {
        match t.shape().len() {
            3 => Ok(t.clone().reshape(&[1, t.dim(0), t.dim(1), t.dim(2)])?),
            _ => Ok(t.clone()),
        }
    };
    let (x, y) = (as4(x)?, as4(y)?);
    check_ssim_input(x.shape())?;
    let g = Graph::inference();
    let (xi, yi) = (g.input(x), g.input(y));
    let s = ssim_graph(&g, xi, yi);
    Ok(g.value(s).data()[0].as_f64())
}

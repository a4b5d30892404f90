//! Forward and backward kernels for the spatial operators. All image
//! tensors are `[N, C, H, W]`, row-major.

use crate::scalar::{gemm, Scalar, Strides};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Batch items per im2col chunk, bounding the column buffer to a few
    /// million elements.
    fn chunk(&self) -> usize {
        const BUDGET: usize = 1 << 22;
        let per_item = (self.col_rows() * self.out_hw()).max(1);
        (BUDGET / per_item).clamp(1, self.batch.max(1))
    }
}

/// Fills `col` (`[C*k*k, nb*Ho*Wo]`) for batch items `n0..n0+nb`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n0: usize, nb: usize, col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let row_len = nb * hw_out;
    let plane = g.h * g.w;
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut col[r * row_len..(r + 1) * row_len];
                for nn in 0..nb {
                    let src = &x[((n0 + nn) * g.in_ch + c) * plane..][..plane];
                    let dst = &mut dst_row[nn * hw_out..(nn + 1) * hw_out];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        if ih < 0 || ih >= g.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *d = if iw < 0 || iw >= g.w as isize { T::zero() } else { srow[iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `col` back into `dx` (adjoint of [`im2col`]).
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, n0: usize, nb: usize, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let row_len = nb * hw_out;
    let plane = g.h * g.w;
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let src_row = &col[r * row_len..(r + 1) * row_len];
                for nn in 0..nb {
                    let dst = &mut dx[((n0 + nn) * g.in_ch + c) * plane..][..plane];
                    let src = &src_row[nn * hw_out..(nn + 1) * hw_out];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                drow[iw as usize] += src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b`; `w` is `[O, C, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw_out = g.out_hw();
    let kk = g.col_rows();
    let mut y = vec![T::zero(); g.batch * g.out_ch * hw_out];
    let chunk = g.chunk();
    let mut col = vec![T::zero(); kk * chunk * hw_out];
    let mut tmp = vec![T::zero(); g.out_ch * chunk * hw_out];
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let cols = nb * hw_out;
        im2col(x, g, n0, nb, &mut col[..kk * cols]);
        gemm(
            g.out_ch,
            kk,
            cols,
            T::one(),
            w,
            Strides::row_major(kk),
            &col[..kk * cols],
            Strides::row_major(cols),
            T::zero(),
            &mut tmp[..g.out_ch * cols],
            Strides::row_major(cols),
        );
        for nn in 0..nb {
            for o in 0..g.out_ch {
                let bias = b.map_or(T::zero(), |b| b[o]);
                let src = &tmp[o * cols + nn * hw_out..][..hw_out];
                let dst = &mut y[((n0 + nn) * g.out_ch + o) * hw_out..][..hw_out];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        n0 += nb;
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to whichever of `x`, `w`,
/// `b` are requested.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let hw_out = g.out_hw();
    let kk = g.col_rows();
    let chunk = g.chunk();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.out_ch]);
    if let Some(db) = db.as_mut() {
        for n in 0..g.batch {
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo += dy[(n * g.out_ch + o) * hw_out..][..hw_out].iter().copied().sum::<T>();
            }
        }
    }
    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }
    let mut col = vec![T::zero(); kk * chunk * hw_out];
    let mut dtmp = vec![T::zero(); g.out_ch * chunk * hw_out];
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let cols = nb * hw_out;
        for nn in 0..nb {
            for o in 0..g.out_ch {
                let src = &dy[((n0 + nn) * g.out_ch + o) * hw_out..][..hw_out];
                dtmp[o * cols + nn * hw_out..][..hw_out].copy_from_slice(src);
            }
        }
        let dtmp = &dtmp[..g.out_ch * cols];
        if let Some(dw) = dw.as_mut() {
            im2col(x, g, n0, nb, &mut col[..kk * cols]);
            gemm(
                g.out_ch,
                cols,
                kk,
                T::one(),
                dtmp,
                Strides::row_major(cols),
                &col[..kk * cols],
                Strides::transposed(cols),
                T::one(),
                dw,
                Strides::row_major(kk),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kk,
                g.out_ch,
                cols,
                T::one(),
                w,
                Strides::transposed(kk),
                dtmp,
                Strides::row_major(cols),
                T::zero(),
                &mut col[..kk * cols],
                Strides::row_major(cols),
            );
            col2im(&col[..kk * cols], g, n0, nb, dx);
        }
        n0 += nb;
    }
    ConvGrads { dx, dw, db }
}

/// Depthwise "valid" correlation of every channel with one fixed `k x k`
/// kernel. Used for the Gaussian window of SSIM.
pub fn depthwise_valid_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T], k: usize) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for ki in 0..k {
                    let srow = &src[(oh + ki) * w + ow..][..k];
                    let krow = &kernel[ki * k..(ki + 1) * k];
                    for (a, b) in srow.iter().zip(krow) {
                        acc += *a * *b;
                    }
                }
                dst[oh * wo + ow] = acc;
            }
        }
    }
    y
}

pub fn depthwise_valid_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, kernel: &[T], k: usize) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let g = src[oh * wo + ow];
                for ki in 0..k {
                    let drow = &mut dst[(oh + ki) * w + ow..][..k];
                    let krow = &kernel[ki * k..(ki + 1) * k];
                    for (d, kv) in drow.iter_mut().zip(krow) {
                        *d += g * *kv;
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        for i in 0..h2 {
            for j in 0..w2 {
                y[(p * h2 + i) * w2 + j] = x[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[(p * h + i / 2) * w + j / 2] += dy[(p * h2 + i) * w2 + j];
            }
        }
    }
    dx
}

pub fn avgpool2x2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = (p * h + 2 * i) * w + 2 * j;
                y[(p * h2 + i) * w2 + j] = (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avgpool2x2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..h2 {
            for j in 0..w2 {
                let g = dy[(p * h2 + i) * w2 + j] * quarter;
                let base = (p * h + 2 * i) * w + 2 * j;
                dx[base] += g;
                dx[base + 1] += g;
                dx[base + w] += g;
                dx[base + w + 1] += g;
            }
        }
    }
    dx
}

//! PNG encoding of `[C, H, W]` image tensors in `[0, 1]`, plus small image
//! helpers shared by several stages.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use ctraj_nn::{Scalar, Tensor};

use crate::error::{Error, Result};

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` or `[1, H, W]` tensor as an 8-bit PNG.
pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || (s[0] != 3 && s[0] != 1) {
        return Err(Error::ShapeMismatch(format!("PNG needs [3|1, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut raw = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            raw.push(to_u8(img.data()[ch * plane + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(&raw).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB, RGBA, gray or gray-alpha PNG into a `[C, H, W]`
/// tensor (C = 3 for color, 1 for gray).
pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        other => return Err(Error::Image(format!("unsupported color type {other:?}"))),
    };
    let plane = h * w;
    let mut data = vec![T::zero(); channels * plane];
    let scale = T::lit(1.0 / 255.0);
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = T::from_u8(buf[p * stride + ch]).expect("u8") * scale;
        }
    }
    Ok(Tensor::new(&[channels, h, w], data)?)
}

pub fn save_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_png(&fs::read(path)?)
}

/// Rounds every value to the nearest 8-bit level, matching a PNG round trip.
pub fn quantize<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let inv = T::lit(1.0 / 255.0);
    img.map(|v| T::from_u8(to_u8(v)).expect("u8") * inv)
}

/// Places `[C, H, W]` panels side by side.
pub fn horizontal_strip<T: Scalar>(panels: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = panels.first().ok_or_else(|| Error::InvalidArgument("no panels".into()))?;
    let s = first.shape().to_vec();
    if panels.iter().any(|p| p.shape() != s.as_slice()) {
        return Err(Error::ShapeMismatch("strip panels must share a shape".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let total_w = w * panels.len();
    let mut data = vec![T::zero(); c * h * total_w];
    for (k, p) in panels.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                let src = &p.data()[(ch * h + y) * w..][..w];
                data[(ch * h + y) * total_w + k * w..][..w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(&[c, h, total_w], data)?)
}

/// Peak signal-to-noise ratio in dB for images on the `[0, 1]` scale.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

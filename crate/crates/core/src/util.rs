//! Small helpers shared by the training loops.

use std::fs;
use std::path::Path;

use ctraj_nn::{checkpoint, ParamStore, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::seed::Rng;

/// Shuffled index batches covering `0..n`; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Stacks the selected `[C, H, W]` items into `[B, C, H, W]`.
pub fn gather<T: Scalar>(items: &[&Tensor<T>], idx: &[usize]) -> Tensor<T> {
    let first = items[idx[0]];
    let mut data = Vec::with_capacity(idx.len() * first.len());
    for &i in idx {
        data.extend_from_slice(items[i].data());
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data).expect("gather shape")
}

/// Runs `f` over `[N, ...]` in chunks of `chunk` items and concatenates the
/// `[n, ...]` results along the batch axis.
pub fn chunked<T: Scalar>(
    x: &Tensor<T>,
    chunk: usize,
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x.dim(0);
    if n <= chunk {
        return f(x);
    }
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        parts.push(f(&x.narrow(start, end))?);
        start = end;
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = n;
    let data = parts.into_iter().flat_map(|p| p.into_data()).collect();
    Ok(Tensor::new(&shape, data)?)
}

/// Same parameters, other scalar type. Parameter ids are preserved.
pub fn cast_store<T: Scalar, U: Scalar>(store: &ParamStore<T>) -> ParamStore<U> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.add(name, t.cast());
    }
    out
}

pub fn ensure_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} became {value}")))
    }
}

pub fn check_image_batch<T: Scalar>(x: &Tensor<T>, channels: usize, size: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels || s[2] != size || s[3] != size {
        return Err(Error::ShapeMismatch(format!("expected [N, {channels}, {size}, {size}], got {s:?}")));
    }
    if s[0] == 0 {
        return Err(invalid("empty batch"));
    }
    Ok(())
}

/// Writes `<stem>.ckpt` and the JSON sidecar `<stem>.json`.
pub fn save_model<T: Scalar, M: Serialize>(store: &ParamStore<T>, meta: &M, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save(store, &dir.join(format!("{stem}.ckpt")))?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_meta<M: DeserializeOwned>(dir: &Path, stem: &str) -> Result<M> {
    let bytes = fs::read(dir.join(format!("{stem}.json")))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_params<T: Scalar>(store: &mut ParamStore<T>, dir: &Path, stem: &str) -> Result<()> {
    checkpoint::load_into(store, &dir.join(format!("{stem}.ckpt")))?;
    Ok(())
}

//! Small conditional U-Net predicting the noise in a latent.

use ctraj_nn::{Conv2d, Graph, GroupNorm, Linear, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub mid_channels: usize,
    pub emb_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { base_channels: 64, mid_channels: 128, emb_dim: 128, groups: 8, seed: 17 }
    }
}

const TIME_FREQS: usize = 32;

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut seed::Rng) -> Self {
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: Linear::new(ps, &format!("{name}.emb"), cfg.emb_dim, cout, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::zeroed(ps, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var, emb: Var) -> Var {
        let h = self.conv1.forward(g, ps, g.silu(self.norm1.forward(g, ps, x)));
        let h = g.add_nc(h, self.emb.forward(g, ps, emb));
        let h = self.conv2.forward(g, ps, g.silu(self.norm2.forward(g, ps, h)));
        let skip = match &self.skip {
            Some(c) => c.forward(g, ps, x),
            None => x,
        };
        g.add(skip, h)
    }
}

pub struct UNet<T: Scalar> {
    pub store: ParamStore<T>,
    pub vocab: Vec<String>,
    table: ParamId,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down_res: ResBlock,
    down: Conv2d,
    mid1: ResBlock,
    mid2: ResBlock,
    up: Conv2d,
    up_res: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    pub latent_channels: usize,
}

impl<T: Scalar> UNet<T> {
    /// The embedding table has one row per vocabulary token plus a final
    /// null row used for the empty condition.
    pub fn new(cfg: &UNetConfig, latent_channels: usize, vocab: Vec<String>) -> Result<Self> {
        if cfg.emb_dim == 0 || cfg.base_channels == 0 || cfg.mid_channels == 0 {
            return Err(invalid("U-Net widths must be positive"));
        }
        let mut rng = seed::rng(cfg.seed, &[0x0e7]);
        let mut ps = ParamStore::new();
        let e = cfg.emb_dim;
        let table = ps.add("cond.table", Tensor::randn(&[vocab.len() + 1, e], &mut rng).scale(T::lit(0.5)));
        let time1 = Linear::new(&mut ps, "time.1", 2 * TIME_FREQS, e, &mut rng);
        let time2 = Linear::new(&mut ps, "time.2", e, e, &mut rng);
        let (c, m) = (cfg.base_channels, cfg.mid_channels);
        let conv_in = Conv2d::new(&mut ps, "conv_in", latent_channels, c, 3, 1, &mut rng);
        let down_res = ResBlock::new(&mut ps, "down.res", c, c, cfg, &mut rng);
        let down = Conv2d::new(&mut ps, "down.conv", c, m, 3, 2, &mut rng);
        let mid1 = ResBlock::new(&mut ps, "mid.1", m, m, cfg, &mut rng);
        let mid2 = ResBlock::new(&mut ps, "mid.2", m, m, cfg, &mut rng);
        let up = Conv2d::new(&mut ps, "up.conv", m, c, 3, 1, &mut rng);
        let up_res = ResBlock::new(&mut ps, "up.res", 2 * c, c, cfg, &mut rng);
        let norm_out = GroupNorm::new(&mut ps, "out.norm", c, cfg.groups);
        let conv_out = Conv2d::zeroed(&mut ps, "out.conv", c, latent_channels, 3);
        Ok(UNet {
            store: ps,
            vocab,
            table,
            time1,
            time2,
            conv_in,
            down_res,
            down,
            mid1,
            mid2,
            up,
            up_res,
            norm_out,
            conv_out,
            latent_channels,
        })
    }

    pub fn null_index(&self) -> usize {
        self.vocab.len()
    }

    /// Vocabulary rows for a token list; the empty list maps to the null row.
    pub fn token_rows(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Ok(vec![self.null_index()]);
        }
        let mut rows = Vec::with_capacity(tokens.len());
        let mut unknown = Vec::new();
        for t in tokens {
            match self.vocab.iter().position(|v| v == t) {
                Some(i) => rows.push(i),
                None => unknown.push(t.clone()),
            }
        }
        if unknown.is_empty() {
            Ok(rows)
        } else {
            Err(Error::UnknownToken(unknown))
        }
    }

    /// Mean of the token embeddings (the learned null vector for `[]`).
    pub fn embed_condition(&self, tokens: &[String]) -> Result<Vec<T>> {
        let rows = self.token_rows(tokens)?;
        let g = Graph::inference();
        let table = g.param(&self.store, self.table);
        let e = g.embed_mean(table, vec![rows]);
        Ok(g.value(e).data().to_vec())
    }

    pub fn time_features(ts: &[f64]) -> Tensor<T> {
        let mut data = Vec::with_capacity(ts.len() * 2 * TIME_FREQS);
        for &t in ts {
            for k in 0..TIME_FREQS {
                let freq = (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
                data.push(T::lit((t * freq).sin()));
            }
            for k in 0..TIME_FREQS {
                let freq = (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
                data.push(T::lit((t * freq).cos()));
            }
        }
        Tensor::new(&[ts.len(), 2 * TIME_FREQS], data).expect("time features")
    }

    /// Noise prediction graph for latents `z`, per-item timesteps and
    /// per-item condition rows.
    pub fn forward(&self, g: &Graph<T>, z: Var, ts: &[f64], cond_rows: Vec<Vec<usize>>) -> Var {
        let ps = &self.store;
        let tf = g.input(Self::time_features(ts));
        let temb = self.time2.forward(g, ps, g.silu(self.time1.forward(g, ps, tf)));
        let table = g.param(ps, self.table);
        let cemb = g.embed_mean(table, cond_rows);
        let emb = g.silu(g.add(temb, cemb));
        let h0 = self.conv_in.forward(g, ps, z);
        let h1 = self.down_res.forward(g, ps, h0, emb);
        let mut h = self.down.forward(g, ps, h1);
        h = self.mid1.forward(g, ps, h, emb);
        h = self.mid2.forward(g, ps, h, emb);
        h = self.up.forward(g, ps, g.upsample2x(h));
        h = self.up_res.forward(g, ps, g.concat_channels(h, h1), emb);
        self.conv_out.forward(g, ps, g.silu(self.norm_out.forward(g, ps, h)))
    }

    /// Inference-mode noise prediction with one timestep and condition for
    /// the whole batch.
    pub fn predict(&self, z: &Tensor<T>, t: usize, cond_rows: &[usize]) -> Result<Tensor<T>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.latent_channels || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("U-Net expects [N, {}, even, even], got {s:?}", self.latent_channels)));
        }
        let n = s[0];
        let g = Graph::inference();
        let zi = g.input(z.clone());
        let out = self.forward(&g, zi, &vec![t as f64; n], vec![cond_rows.to_vec(); n]);
        Ok((*g.value(out)).clone())
    }

    /// As [`UNet::predict`] with a separate condition per batch item.
    pub fn predict_rows(&self, z: &Tensor<T>, t: usize, rows: &[Vec<usize>]) -> Result<Tensor<T>> {
        if rows.len() != z.dim(0) {
            return Err(Error::ShapeMismatch(format!("{} conditions for {} latents", rows.len(), z.dim(0))));
        }
        let g = Graph::inference();
        let zi = g.input(z.clone());
        let out = self.forward(&g, zi, &vec![t as f64; rows.len()], rows.to_vec());
        Ok((*g.value(out)).clone())
    }
}

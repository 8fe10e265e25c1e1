//! Multi-head attention pooling (MAP) head with a hand-written backward pass.
//!
//! One learnable probe attends over the token grid:
//!
//! ```text
//! q  = probe·Wq + bq                      (split into H heads of width D/H)
//! K  = X·Wk + bk,  V = X·Wv + bv
//! o  = concat_h softmax(q_h K_hᵀ / √d_h) V_h
//! x  = o·Wo + bo
//! x2 = x + W2·gelu(W1·LN(x))
//! z  = normalize(x2·Wp + bp)
//! ```
//!
//! Row-vector convention throughout (`y = x W + b`). There is no positional
//! encoding; tokens are put in a canonical order before pooling so that any
//! permutation of the grid gives a bit-identical embedding.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::format::fnv1a64;
use crate::geometry::{EmbeddingVector, ZERO_NORM};
use crate::rng::{substream, Purpose};

const LN_EPS: f64 = 1e-6;
const CHECKPOINT_MAGIC: &[u8; 8] = b"NIDHEAD\0";
const CHECKPOINT_VERSION: u16 = 1;

/// A `T x D` token grid; `fg_mask` is carried for augmentation only.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
    pub fg_mask: Vec<bool>,
}

impl TokenGrid {
    pub fn new(tokens: Array2<f64>, fg_mask: Vec<bool>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::EmptyInput("token grid"));
        }
        if fg_mask.len() != tokens.nrows() {
            return Err(Error::DimensionMismatch { expected: tokens.nrows(), got: fg_mask.len() });
        }
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token grid"));
        }
        Ok(Self { tokens, fg_mask })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    /// Token width `D`.
    pub dim: usize,
    pub heads: usize,
    pub out_dim: usize,
    /// Tokens per grid, recorded in checkpoints only.
    pub tokens: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 4, out_dim: 32, tokens: 32 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.out_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }
}

/// Learnable head parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub probe: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wp: Array2<f64>,
    pub bp: Array1<f64>,
    generation: u64,
}

/// Block names in checkpoint order.
pub const BLOCK_NAMES: [&str; 17] =
    ["probe", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gain", "ln_bias", "w1", "b1", "w2", "b2", "wp", "bp"];

macro_rules! blocks {
    ($self:ident, $method:ident) => {
        [
            $self.probe.$method(),
            $self.wq.$method(),
            $self.bq.$method(),
            $self.wk.$method(),
            $self.bk.$method(),
            $self.wv.$method(),
            $self.bv.$method(),
            $self.wo.$method(),
            $self.bo.$method(),
            $self.ln_gain.$method(),
            $self.ln_bias.$method(),
            $self.w1.$method(),
            $self.b1.$method(),
            $self.w2.$method(),
            $self.b2.$method(),
            $self.wp.$method(),
            $self.bp.$method(),
        ]
    };
}

impl HeadParams {
    /// All-zero parameters (the shape of a gradient).
    pub fn zeros(config: HeadConfig) -> Self {
        let (d, h, o) = (config.dim, config.hidden(), config.out_dim);
        Self {
            config,
            probe: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln_gain: Array1::zeros(d),
            ln_bias: Array1::zeros(d),
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, d)),
            b2: Array1::zeros(d),
            wp: Array2::zeros((d, o)),
            bp: Array1::zeros(o),
            generation: 0,
        }
    }

    /// Weights and biases uniform in ±1/√fan_in, probe ~ N(0, 0.02²),
    /// layer-norm gain 1 and bias 0.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = substream(seed, Purpose::HeadInit, 0);
        let probe_dist = Normal::new(0.0, 0.02).expect("valid std");
        p.probe.mapv_inplace(|_| probe_dist.sample(&mut rng));
        let mut uniform = |a: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in a {
                *x = rng.random_range(-bound..bound);
            }
        };
        let (d, h) = (config.dim, config.hidden());
        for (m, b) in [(&mut p.wq, &mut p.bq), (&mut p.wk, &mut p.bk), (&mut p.wv, &mut p.bv), (&mut p.wo, &mut p.bo)] {
            uniform(m.as_slice_mut().unwrap(), d);
            uniform(b.as_slice_mut().unwrap(), d);
        }
        uniform(p.w1.as_slice_mut().unwrap(), d);
        uniform(p.b1.as_slice_mut().unwrap(), d);
        uniform(p.w2.as_slice_mut().unwrap(), h);
        uniform(p.b2.as_slice_mut().unwrap(), h);
        uniform(p.wp.as_slice_mut().unwrap(), d);
        uniform(p.bp.as_slice_mut().unwrap(), d);
        p.ln_gain.fill(1.0);
        Ok(p)
    }

    pub fn blocks(&self) -> [&[f64]; 17] {
        blocks!(self, as_slice).map(|b| b.expect("standard layout"))
    }

    /// Mutable access to every block. Invalidates outstanding caches.
    pub fn blocks_mut(&mut self) -> [&mut [f64]; 17] {
        self.generation += 1;
        blocks!(self, as_slice_mut).map(|b| b.expect("standard layout"))
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// First block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.blocks().iter().zip(BLOCK_NAMES).find(|(b, _)| b.iter().any(|x| !x.is_finite())).map(|(_, n)| n)
    }

    pub fn add_assign(&mut self, other: &HeadParams) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Binary checkpoint: magic, version, reserved, `D H d_out T` as u32,
    /// the blocks of [`BLOCK_NAMES`] as f64 LE, then an FNV-1a 64 footer
    /// over everything before it.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.num_params() * 8 + 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        let c = &self.config;
        for v in [c.dim, c.heads, c.out_dim, c.tokens] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for block in self.blocks() {
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 36 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a head checkpoint".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let config = HeadConfig { dim: u32_at(12), heads: u32_at(16), out_dim: u32_at(20), tokens: u32_at(24) };
        config.validate()?;
        let mut p = Self::zeros(config);
        let body = bytes.len() - 8;
        if body != 28 + p.num_params() * 8 {
            return Err(Error::Format("checkpoint length does not match its header".into()));
        }
        let stored = u64::from_le_bytes(bytes[body..].try_into().unwrap());
        if fnv1a64(&bytes[..body]) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut values = bytes[28..body].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for block in p.blocks_mut() {
            for x in block {
                *x = values.next().expect("length checked");
            }
        }
        p.generation = 0;
        Ok(p)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_checkpoint_bytes(&buf)
    }
}

fn gelu(u: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * u * (1.0 + (c * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u)
}

fn lex_cmp(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    generation: u64,
    batch: usize,
    tokens: usize,
    /// `order[b][r]` is the original row of sorted token `r`.
    order: Vec<Vec<usize>>,
    x_in: Array2<f64>,
    q: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array3<f64>,
    pooled: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    y: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
    x2: Array2<f64>,
    e_norm: Array1<f64>,
    z: Array2<f64>,
}

impl HeadCache {
    /// Attention weights `(B, H, T)` in the caller's token order.
    pub fn attention(&self) -> Array3<f64> {
        let mut out = Array3::zeros(self.attn.raw_dim());
        for b in 0..self.batch {
            for (r, &orig) in self.order[b].iter().enumerate() {
                out.slice_mut(s![b, .., orig]).assign(&self.attn.slice(s![b, .., r]));
            }
        }
        out
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.z
    }
}

/// Embeds a batch of equally sized grids `(B, T, D)`; returns `(B, d_out)`
/// unit rows and the cache for [`backward_batch`].
pub fn forward_batch(params: &HeadParams, grids: ArrayView3<f64>) -> Result<(Array2<f64>, HeadCache)> {
    let cfg = params.config;
    let (bsz, t, d) = grids.dim();
    if d != cfg.dim {
        return Err(Error::DimensionMismatch { expected: cfg.dim, got: d });
    }
    if bsz == 0 || t == 0 {
        return Err(Error::EmptyInput("grid batch"));
    }
    let (nh, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut order = Vec::with_capacity(bsz);
    let mut x_in = Array2::zeros((bsz * t, d));
    for b in 0..bsz {
        let g = grids.index_axis(Axis(0), b);
        let mut idx: Vec<usize> = (0..t).collect();
        idx.sort_by(|&i, &j| lex_cmp(g.row(i), g.row(j)));
        for (r, &i) in idx.iter().enumerate() {
            x_in.row_mut(b * t + r).assign(&g.row(i));
        }
        order.push(idx);
    }

    let q = params.probe.dot(&params.wq) + &params.bq;
    let k = x_in.dot(&params.wk) + &params.bk;
    let v = x_in.dot(&params.wv) + &params.bv;

    let mut attn = Array3::zeros((bsz, nh, t));
    let mut pooled = Array2::zeros((bsz, d));
    for b in 0..bsz {
        for h in 0..nh {
            let qh = q.slice(s![h * dh..(h + 1) * dh]);
            let kb = k.slice(s![b * t..(b + 1) * t, h * dh..(h + 1) * dh]);
            let scores = kb.dot(&qh) * scale;
            let m = scores.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let ex = scores.mapv(|x| (x - m).exp());
            let a = &ex / ex.sum();
            let vb = v.slice(s![b * t..(b + 1) * t, h * dh..(h + 1) * dh]);
            pooled.slice_mut(s![b, h * dh..(h + 1) * dh]).assign(&a.dot(&vb));
            attn.slice_mut(s![b, h, ..]).assign(&a);
        }
    }

    let x = pooled.dot(&params.wo) + &params.bo;
    let mut xhat = Array2::zeros((bsz, d));
    let mut inv_std = Array1::zeros(bsz);
    for b in 0..bsz {
        let row = x.row(b);
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[b] = is;
        xhat.row_mut(b).assign(&row.mapv(|v| (v - mu) * is));
    }
    let y = &xhat * &params.ln_gain + &params.ln_bias;
    let u = y.dot(&params.w1) + &params.b1;
    let act = u.mapv(gelu);
    let x2 = &x + &(act.dot(&params.w2) + &params.b2);
    let e = x2.dot(&params.wp) + &params.bp;

    let mut e_norm = Array1::zeros(bsz);
    let mut z = e.clone();
    for b in 0..bsz {
        let n = e.row(b).dot(&e.row(b)).sqrt();
        if n < ZERO_NORM {
            return Err(Error::ZeroVector(n));
        }
        e_norm[b] = n;
        z.row_mut(b).mapv_inplace(|v| v / n);
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("head output"));
    }

    let cache = HeadCache {
        generation: params.generation,
        batch: bsz,
        tokens: t,
        order,
        x_in,
        q,
        k,
        v,
        attn,
        pooled,
        xhat,
        inv_std,
        y,
        u,
        act,
        x2,
        e_norm,
        z: z.clone(),
    };
    Ok((z, cache))
}

/// Gradients of a scalar whose derivative w.r.t. the `(B, d_out)` output is
/// `grad_out`. Parameter gradients are summed over the batch; token
/// gradients `(B, T, D)` are computed only when `want_tokens`.
pub fn backward_batch(
    params: &HeadParams,
    cache: HeadCache,
    grad_out: ArrayView2<f64>,
    want_tokens: bool,
) -> Result<(HeadParams, Option<Array3<f64>>)> {
    if cache.generation != params.generation {
        return Err(Error::StaleCache);
    }
    let cfg = params.config;
    let (bsz, t, d) = (cache.batch, cache.tokens, cfg.dim);
    if grad_out.dim() != (bsz, cfg.out_dim) {
        return Err(Error::DimensionMismatch { expected: bsz * cfg.out_dim, got: grad_out.len() });
    }
    let (nh, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = HeadParams::zeros(cfg);

    // normalization Jacobian (I - zzᵀ)/‖e‖
    let mut de = grad_out.to_owned();
    for b in 0..bsz {
        let zb = cache.z.row(b);
        let proj = zb.dot(&grad_out.row(b));
        let n = cache.e_norm[b];
        de.row_mut(b).zip_mut_with(&zb, |g, &zv| *g = (*g - proj * zv) / n);
    }
    g.wp = cache.x2.t().dot(&de);
    g.bp = de.sum_axis(Axis(0));
    let dx2 = de.dot(&params.wp.t());

    g.w2 = cache.act.t().dot(&dx2);
    g.b2 = dx2.sum_axis(Axis(0));
    let dact = dx2.dot(&params.w2.t());
    let du = &dact * &cache.u.mapv(gelu_grad);
    g.w1 = cache.y.t().dot(&du);
    g.b1 = du.sum_axis(Axis(0));
    let dy = du.dot(&params.w1.t());

    g.ln_gain = (&dy * &cache.xhat).sum_axis(Axis(0));
    g.ln_bias = dy.sum_axis(Axis(0));
    let dxhat = &dy * &params.ln_gain;
    let mut dx = dx2;
    for b in 0..bsz {
        let dh_row = dxhat.row(b);
        let xh = cache.xhat.row(b);
        let mean_d = dh_row.sum() / d as f64;
        let mean_dx = dh_row.dot(&xh) / d as f64;
        let is = cache.inv_std[b];
        for j in 0..d {
            dx[[b, j]] += is * (dh_row[j] - mean_d - xh[j] * mean_dx);
        }
    }

    g.wo = cache.pooled.t().dot(&dx);
    g.bo = dx.sum_axis(Axis(0));
    let dpooled = dx.dot(&params.wo.t());

    let mut dq = Array1::<f64>::zeros(d);
    let mut dk = Array2::<f64>::zeros((bsz * t, d));
    let mut dv = Array2::<f64>::zeros((bsz * t, d));
    for b in 0..bsz {
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            let a = cache.attn.slice(s![b, h, ..]);
            let dout = dpooled.slice(s![b, cols.clone()]);
            let vb = cache.v.slice(s![b * t..(b + 1) * t, cols.clone()]);
            let da = vb.dot(&dout);
            let avg = a.dot(&da);
            let ds = (&da - avg) * a * scale;
            let kb = cache.k.slice(s![b * t..(b + 1) * t, cols.clone()]);
            let mut dqh = dq.slice_mut(s![cols.clone()]);
            dqh += &ds.dot(&kb);
            let qh = cache.q.slice(s![cols.clone()]);
            for r in 0..t {
                let row = b * t + r;
                dk.slice_mut(s![row, cols.clone()]).scaled_add(ds[r], &qh);
                dv.slice_mut(s![row, cols.clone()]).scaled_add(a[r], &dout);
            }
        }
    }
    g.wk = cache.x_in.t().dot(&dk);
    g.bk = dk.sum_axis(Axis(0));
    g.wv = cache.x_in.t().dot(&dv);
    g.bv = dv.sum_axis(Axis(0));
    g.wq = outer(&params.probe, &dq);
    g.bq = dq.clone();
    g.probe = params.wq.dot(&dq);
    for m in [&mut g.wq, &mut g.wk, &mut g.wv, &mut g.wo, &mut g.w1, &mut g.w2, &mut g.wp] {
        if !m.is_standard_layout() {
            *m = m.as_standard_layout().into_owned();
        }
    }

    let tokens = want_tokens.then(|| {
        let dx_sorted = dv.dot(&params.wv.t()) + dk.dot(&params.wk.t());
        let mut out = Array3::zeros((bsz, t, d));
        for b in 0..bsz {
            for (r, &orig) in cache.order[b].iter().enumerate() {
                out.slice_mut(s![b, orig, ..]).assign(&dx_sorted.row(b * t + r));
            }
        }
        out
    });
    Ok((g, tokens))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Embeds one grid.
pub fn head_forward(grid: &TokenGrid, params: &HeadParams) -> Result<(EmbeddingVector, HeadCache)> {
    let view = grid.tokens.view().insert_axis(Axis(0));
    let (z, cache) = forward_batch(params, view)?;
    let e = EmbeddingVector::new(z.row(0).to_vec())?;
    Ok((e, cache))
}

/// Parameter and token gradients for a single-grid cache.
pub fn head_backward(cache: HeadCache, grad_out: &[f64], params: &HeadParams) -> Result<(HeadParams, Array2<f64>)> {
    let go =
        Array2::from_shape_vec((1, grad_out.len()), grad_out.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let (g, tokens) = backward_batch(params, cache, go.view(), true)?;
    let tokens = tokens.expect("requested").index_axis_move(Axis(0), 0);
    Ok((g, tokens))
}

/// Convenience: embed many grids of one shape, returning unit rows.
pub fn embed_grids(params: &HeadParams, grids: &[Array2<f64>]) -> Result<Array2<f64>> {
    let (t, d) = grids.first().map(|g| g.dim()).ok_or(Error::EmptyInput("grids"))?;
    let mut stacked = Array3::zeros((grids.len(), t, d));
    for (i, g) in grids.iter().enumerate() {
        if g.dim() != (t, d) {
            return Err(Error::DimensionMismatch { expected: t * d, got: g.len() });
        }
        stacked.index_axis_mut(Axis(0), i).assign(g);
    }
    Ok(forward_batch(params, stacked.view())?.0)
}

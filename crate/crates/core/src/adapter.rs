//! Single-head cross-attention with per-expert low-rank bias adapters.
//!
//! Each projection `W ∈ {W_q, W_k, W_v, W_o}` of the frozen base block can be
//! wrapped by an adapter pair, turning `W·x` into
//! `W·x + scale · W_up·(W_down·x)`. Experts are named; the reserved id
//! [`ORIGINAL`] always means the unadapted block. A mixed forward pass is the
//! convex combination of every expert's full attention output.
//!
//! Sequences are stored one token per row: hidden states `X` are
//! `n_x × d_x`, conditioning `C` is `n_c × d_c`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, FormatError, Result};

pub const ORIGINAL: &str = "original";
pub const BIAS_MAGIC: [u8; 4] = *b"BIAS";
pub const BIAS_VERSION: u32 = 1;
pub const DEFAULT_RANK: usize = 4;
pub const INIT_STD: f64 = 0.02;

/// Frozen projection weights of a cross-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionWeights {
    /// `d_h × d_x`
    pub w_q: DMatrix<f64>,
    /// `d_h × d_c`
    pub w_k: DMatrix<f64>,
    /// `d_h × d_c`
    pub w_v: DMatrix<f64>,
    /// `d_x × d_h`
    pub w_o: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub d_x: usize,
    pub d_c: usize,
    pub d_h: usize,
}

impl CrossAttentionWeights {
    pub fn new(w_q: DMatrix<f64>, w_k: DMatrix<f64>, w_v: DMatrix<f64>, w_o: DMatrix<f64>) -> Result<Self> {
        let (d_h, d_x) = w_q.shape();
        let d_c = w_k.ncols();
        let ok = w_k.nrows() == d_h && w_v.shape() == (d_h, d_c) && w_o.shape() == (d_x, d_h);
        if !ok {
            return Err(Error::invalid(format!(
                "inconsistent attention shapes: q {:?}, k {:?}, v {:?}, o {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape(),
                w_o.shape()
            )));
        }
        let w = Self { w_q, w_k, w_v, w_o };
        if w.matrices().iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite attention weight"));
        }
        Ok(w)
    }

    /// Gaussian weights with standard deviation `1/√fan_in`.
    pub fn random(dims: AttentionDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let AttentionDims { d_x, d_c, d_h } = dims;
        Self {
            w_q: gaussian(&mut rng, d_h, d_x, 1.0 / (d_x as f64).sqrt()),
            w_k: gaussian(&mut rng, d_h, d_c, 1.0 / (d_c as f64).sqrt()),
            w_v: gaussian(&mut rng, d_h, d_c, 1.0 / (d_c as f64).sqrt()),
            w_o: gaussian(&mut rng, d_x, d_h, 1.0 / (d_h as f64).sqrt()),
        }
    }

    pub fn zeros(dims: AttentionDims) -> Self {
        let AttentionDims { d_x, d_c, d_h } = dims;
        Self {
            w_q: DMatrix::zeros(d_h, d_x),
            w_k: DMatrix::zeros(d_h, d_c),
            w_v: DMatrix::zeros(d_h, d_c),
            w_o: DMatrix::zeros(d_x, d_h),
        }
    }

    pub fn dims(&self) -> AttentionDims {
        AttentionDims {
            d_x: self.w_q.ncols(),
            d_c: self.w_k.ncols(),
            d_h: self.w_q.nrows(),
        }
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    // row-major fill so the draw order matches the checkpoint layout
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)))
}

/// `W_down` (`r × in`) and `W_up` (`out × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub down: DMatrix<f64>,
    pub up: DMatrix<f64>,
}

impl LowRankPair {
    fn zeros_like(&self) -> Self {
        Self {
            down: DMatrix::zeros(self.down.nrows(), self.down.ncols()),
            up: DMatrix::zeros(self.up.nrows(), self.up.ncols()),
        }
    }

    fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// `W·x + scale · W_up·(W_down·x)`; a missing pair is the bare projection.
pub fn adapted_projection(
    w: &DMatrix<f64>,
    pair: Option<&LowRankPair>,
    scale: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != w.ncols() {
        return Err(Error::DimensionMismatch {
            expected: w.ncols(),
            found: x.len(),
        });
    }
    let mut y = w * x;
    if let Some(p) = pair {
        if p.down.ncols() != w.ncols() || p.up.nrows() != w.nrows() || p.up.ncols() != p.down.nrows() {
            return Err(Error::invalid("adapter pair does not match projection shape"));
        }
        y += (&p.up * (&p.down * x)) * scale;
    }
    Ok(y)
}

/// Row form: `X·Wᵀ + scale · (X·W_downᵀ)·W_upᵀ`. Returns the output and the
/// down-projected activations when an adapter is present.
fn project_rows(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    pair: Option<&LowRankPair>,
    scale: f64,
) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let mut y = x * w.transpose();
    let low = pair.map(|p| {
        let low = x * p.down.transpose();
        y += (&low * p.up.transpose()) * scale;
        low
    });
    (y, low)
}

/// Bias adapter expert: one low-rank pair on each of Q, K, V and output.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasAdapter {
    pub scale: f64,
    pub q: LowRankPair,
    pub k: LowRankPair,
    pub v: LowRankPair,
    pub o: LowRankPair,
}

impl BiasAdapter {
    /// Gaussian `W_down` (σ = 0.02), zero `W_up`, scale `1/rank`.
    pub fn new(dims: AttentionDims, rank: usize, seed: u64) -> Result<Self> {
        Self::with_init(dims, rank, 1.0 / rank.max(1) as f64, INIT_STD, seed)
    }

    pub fn with_init(dims: AttentionDims, rank: usize, scale: f64, init_std: f64, seed: u64) -> Result<Self> {
        let AttentionDims { d_x, d_c, d_h } = dims;
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be >= 1"));
        }
        for (name, i, o) in [("q", d_x, d_h), ("k", d_c, d_h), ("v", d_c, d_h), ("o", d_h, d_x)] {
            if rank >= i.min(o) {
                return Err(Error::invalid(format!(
                    "adapter rank {rank} must be below min(in, out) = {} for {name}",
                    i.min(o)
                )));
            }
        }
        if !scale.is_finite() {
            return Err(Error::invalid("adapter scale must be finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = |i: usize, o: usize| LowRankPair {
            down: gaussian(&mut rng, rank, i, init_std),
            up: DMatrix::zeros(o, rank),
        };
        Ok(Self {
            scale,
            q: pair(d_x, d_h),
            k: pair(d_c, d_h),
            v: pair(d_c, d_h),
            o: pair(d_h, d_x),
        })
    }

    pub fn rank(&self) -> usize {
        self.q.down.nrows()
    }

    pub fn dims(&self) -> AttentionDims {
        AttentionDims {
            d_x: self.q.down.ncols(),
            d_c: self.k.down.ncols(),
            d_h: self.q.up.nrows(),
        }
    }

    pub fn pairs(&self) -> [&LowRankPair; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    /// Parameter blocks in checkpoint order:
    /// q_down, q_up, k_down, k_up, v_down, v_up, o_down, o_up.
    pub fn blocks(&self) -> [&DMatrix<f64>; 8] {
        [
            &self.q.down,
            &self.q.up,
            &self.k.down,
            &self.k.up,
            &self.v.down,
            &self.v.up,
            &self.o.down,
            &self.o.up,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut DMatrix<f64>; 8] {
        [
            &mut self.q.down,
            &mut self.q.up,
            &mut self.k.down,
            &mut self.k.up,
            &mut self.v.down,
            &mut self.v.up,
            &mut self.o.down,
            &mut self.o.up,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.pairs().iter().map(|p| p.param_count()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            scale: self.scale,
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    /// `self += alpha · other`, block by block.
    pub fn axpy(&mut self, alpha: f64, other: &BiasAdapter) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            *a += b * alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self, expert_id: &str) -> Result<Vec<u8>> {
        let AttentionDims { d_x, d_c, d_h } = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(&BIAS_MAGIC);
        codec::put_u32(&mut out, BIAS_VERSION);
        codec::put_u32(&mut out, codec::len_u32(expert_id.len(), "expert id")?);
        out.extend_from_slice(expert_id.as_bytes());
        for n in [d_x, d_c, d_h, self.rank()] {
            codec::put_u32(&mut out, codec::len_u32(n, "dimension")?);
        }
        codec::put_f64(&mut out, self.scale);
        for m in self.blocks() {
            put_matrix(&mut out, m);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(String, Self), FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(&BIAS_MAGIC)?;
        r.version(BIAS_VERSION)?;
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| FormatError::InvalidUtf8)?
            .to_owned();
        let d_x = r.u32()? as usize;
        let d_c = r.u32()? as usize;
        let d_h = r.u32()? as usize;
        let rank = r.u32()? as usize;
        if rank == 0 || [d_x, d_c, d_h].iter().any(|&d| rank >= d) {
            return Err(FormatError::InvalidHeader(format!(
                "rank {rank} invalid for dims ({d_x}, {d_c}, {d_h})"
            )));
        }
        let scale = r.f64()?;
        if !scale.is_finite() {
            return Err(FormatError::InvalidHeader("non-finite scale".into()));
        }
        let mut pair = |i: usize, o: usize| -> std::result::Result<LowRankPair, FormatError> {
            Ok(LowRankPair {
                down: get_matrix(&mut r, rank, i)?,
                up: get_matrix(&mut r, o, rank)?,
            })
        };
        let adapter = Self {
            scale,
            q: pair(d_x, d_h)?,
            k: pair(d_c, d_h)?,
            v: pair(d_c, d_h)?,
            o: pair(d_h, d_x)?,
        };
        r.finish()?;
        Ok((id, adapter))
    }

    pub fn save(&self, expert_id: &str, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes(expert_id)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(String, Self)> {
        let path = path.as_ref();
        let bytes = codec::read_file(path)?;
        codec::at_path(path, Self::from_bytes(&bytes))
    }
}

pub(crate) fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            codec::put_f64(out, m[(i, j)]);
        }
    }
}

pub(crate) fn get_matrix(
    r: &mut Reader<'_>,
    rows: usize,
    cols: usize,
) -> std::result::Result<DMatrix<f64>, FormatError> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| FormatError::InvalidHeader("matrix size overflows".into()))?;
    Ok(DMatrix::from_row_slice(rows, cols, &r.f64_block(n)?))
}

/// Non-negative mixing weights over expert ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertWeights(pub BTreeMap<String, f64>);

impl ExpertWeights {
    pub fn original_only() -> Self {
        Self::from_pairs([(ORIGINAL, 1.0)])
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        Self(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn get(&self, id: &str) -> f64 {
        self.0.get(id).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    /// Experts with strictly positive weight, in id order.
    pub fn active(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().filter(|(_, &w)| w > 0.0).map(|(k, &w)| (k.as_str(), w))
    }
}

/// Activations of one expert's forward pass kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ExpertCache {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: DMatrix<f64>,
    heads: DMatrix<f64>,
    q_low: Option<DMatrix<f64>>,
    k_low: Option<DMatrix<f64>>,
    v_low: Option<DMatrix<f64>>,
    o_low: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    x: DMatrix<f64>,
    c: DMatrix<f64>,
    experts: Vec<(String, f64, ExpertCache)>,
}

/// Gradients of the frozen base weights, used only when pre-training a base
/// model.
#[derive(Debug, Clone)]
pub(crate) struct BaseGrad {
    pub(crate) weights: CrossAttentionWeights,
    pub(crate) dx: DMatrix<f64>,
}

/// Frozen base attention plus named trainable adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedAttentionBlock {
    base: CrossAttentionWeights,
    adapters: BTreeMap<String, BiasAdapter>,
}

impl AdaptedAttentionBlock {
    pub fn new(base: CrossAttentionWeights) -> Self {
        Self {
            base,
            adapters: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> &CrossAttentionWeights {
        &self.base
    }

    pub(crate) fn base_mut(&mut self) -> &mut CrossAttentionWeights {
        &mut self.base
    }

    pub fn dims(&self) -> AttentionDims {
        self.base.dims()
    }

    pub fn insert_adapter(&mut self, id: impl Into<String>, adapter: BiasAdapter) -> Result<()> {
        let id = id.into();
        if id == ORIGINAL {
            return Err(Error::invalid("the original expert cannot carry an adapter"));
        }
        if adapter.dims() != self.dims() {
            return Err(Error::invalid(format!(
                "adapter dims {:?} do not match block dims {:?}",
                adapter.dims(),
                self.dims()
            )));
        }
        self.adapters.insert(id, adapter);
        Ok(())
    }

    pub fn adapter(&self, id: &str) -> Option<&BiasAdapter> {
        self.adapters.get(id)
    }

    pub fn adapter_mut(&mut self, id: &str) -> Option<&mut BiasAdapter> {
        self.adapters.get_mut(id)
    }

    pub fn adapters(&self) -> &BTreeMap<String, BiasAdapter> {
        &self.adapters
    }

    pub fn remove_adapter(&mut self, id: &str) -> Option<BiasAdapter> {
        self.adapters.remove(id)
    }

    fn check_weights(&self, weights: &ExpertWeights) -> Result<()> {
        for (id, &w) in &weights.0 {
            if id != ORIGINAL && !self.adapters.contains_key(id) {
                return Err(Error::UnknownExpert(id.clone()));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!(
                    "expert weight for {id:?} must be finite and >= 0, got {w}"
                )));
            }
        }
        if weights.get(ORIGINAL) <= 0.0 && (weights.total() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "without the original expert the remaining weights must sum to 1",
            ));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
        let d = self.dims();
        if x.ncols() != d.d_x {
            return Err(Error::DimensionMismatch {
                expected: d.d_x,
                found: x.ncols(),
            });
        }
        if c.ncols() != d.d_c {
            return Err(Error::DimensionMismatch {
                expected: d.d_c,
                found: c.ncols(),
            });
        }
        if c.nrows() == 0 {
            return Err(Error::invalid("conditioning sequence is empty"));
        }
        Ok(())
    }

    fn expert_forward(
        &self,
        adapter: Option<&BiasAdapter>,
        x: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> (DMatrix<f64>, ExpertCache) {
        let s = adapter.map_or(0.0, |a| a.scale);
        let (q, q_low) = project_rows(x, &self.base.w_q, adapter.map(|a| &a.q), s);
        let (k, k_low) = project_rows(c, &self.base.w_k, adapter.map(|a| &a.k), s);
        let (v, v_low) = project_rows(c, &self.base.w_v, adapter.map(|a| &a.v), s);
        let inv_sqrt = 1.0 / (self.dims().d_h as f64).sqrt();
        let mut probs = (&q * k.transpose()) * inv_sqrt;
        softmax_rows(&mut probs);
        let heads = &probs * &v;
        let (out, o_low) = project_rows(&heads, &self.base.w_o, adapter.map(|a| &a.o), s);
        let cache = ExpertCache {
            q,
            k,
            v,
            probs,
            heads,
            q_low,
            k_low,
            v_low,
            o_low,
        };
        (out, cache)
    }

    /// Attention output of a single expert (`ORIGINAL` for the bare block).
    pub fn expert_output(&self, expert: &str, x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(x, c)?;
        let adapter = self.lookup(expert)?;
        Ok(self.expert_forward(adapter, x, c).0)
    }

    fn lookup(&self, expert: &str) -> Result<Option<&BiasAdapter>> {
        if expert == ORIGINAL {
            Ok(None)
        } else {
            self.adapters
                .get(expert)
                .map(Some)
                .ok_or_else(|| Error::UnknownExpert(expert.to_owned()))
        }
    }

    pub(crate) fn forward_cached(
        &self,
        weights: &ExpertWeights,
        x: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_weights(weights)?;
        self.check_inputs(x, c)?;
        let mut out = DMatrix::zeros(x.nrows(), self.dims().d_x);
        let mut experts = Vec::new();
        for (id, w) in weights.active() {
            let (y, cache) = self.expert_forward(self.lookup(id)?, x, c);
            out += y * w;
            experts.push((id.to_owned(), w, cache));
        }
        Ok((
            out,
            ForwardCache {
                x: x.clone(),
                c: c.clone(),
                experts,
            },
        ))
    }

    /// `Σ_e weight_e · Attn_e(X, C)`.
    pub fn forward(&self, weights: &ExpertWeights, x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(weights, x, c)?.0)
    }

    /// Backpropagates `upstream` (same shape as the forward output) into
    /// every active expert's adapter, plus optionally the base weights and the
    /// hidden input.
    pub(crate) fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
        want_base: bool,
    ) -> Result<(BTreeMap<String, BiasAdapter>, Option<BaseGrad>)> {
        let d = self.dims();
        if upstream.shape() != (cache.x.nrows(), d.d_x) {
            return Err(Error::invalid(format!(
                "upstream gradient shape {:?}, expected {:?}",
                upstream.shape(),
                (cache.x.nrows(), d.d_x)
            )));
        }
        let inv_sqrt = 1.0 / (d.d_h as f64).sqrt();
        let mut adapter_grads = BTreeMap::new();
        let mut base_grad = want_base.then(|| BaseGrad {
            weights: CrossAttentionWeights::zeros(d),
            dx: DMatrix::zeros(cache.x.nrows(), d.d_x),
        });

        for (id, w, ec) in &cache.experts {
            let adapter = self.lookup(id)?;
            let g_out = upstream * *w;
            let mut ga = adapter.map(BiasAdapter::zeros_like);

            // output projection
            let w_o_eff = effective(&self.base.w_o, adapter.map(|a| (&a.o, a.scale)));
            let d_heads = &g_out * &w_o_eff;
            if let (Some(a), Some(ga)) = (adapter, ga.as_mut()) {
                low_rank_grad(
                    &mut ga.o,
                    &a.o,
                    a.scale,
                    &ec.heads,
                    ec.o_low.as_ref().expect("o cache"),
                    &g_out,
                );
            }

            // heads = probs · v
            let d_probs = &d_heads * ec.v.transpose();
            let d_v = ec.probs.transpose() * &d_heads;
            let d_scores = softmax_backward(&ec.probs, &d_probs) * inv_sqrt;
            let d_q = &d_scores * &ec.k;
            let d_k = d_scores.transpose() * &ec.q;

            if let (Some(a), Some(ga)) = (adapter, ga.as_mut()) {
                low_rank_grad(
                    &mut ga.q,
                    &a.q,
                    a.scale,
                    &cache.x,
                    ec.q_low.as_ref().expect("q cache"),
                    &d_q,
                );
                low_rank_grad(
                    &mut ga.k,
                    &a.k,
                    a.scale,
                    &cache.c,
                    ec.k_low.as_ref().expect("k cache"),
                    &d_k,
                );
                low_rank_grad(
                    &mut ga.v,
                    &a.v,
                    a.scale,
                    &cache.c,
                    ec.v_low.as_ref().expect("v cache"),
                    &d_v,
                );
            }

            if let Some(bg) = base_grad.as_mut() {
                bg.weights.w_o += g_out.transpose() * &ec.heads;
                bg.weights.w_q += d_q.transpose() * &cache.x;
                bg.weights.w_k += d_k.transpose() * &cache.c;
                bg.weights.w_v += d_v.transpose() * &cache.c;
                let w_q_eff = effective(&self.base.w_q, adapter.map(|a| (&a.q, a.scale)));
                bg.dx += &d_q * w_q_eff;
            }

            if let Some(ga) = ga {
                adapter_grads.insert(id.clone(), ga);
            }
        }
        Ok((adapter_grads, base_grad))
    }
}

/// `W + scale · W_up·W_down`.
fn effective(w: &DMatrix<f64>, pair: Option<(&LowRankPair, f64)>) -> DMatrix<f64> {
    match pair {
        Some((p, s)) => w + (&p.up * &p.down) * s,
        None => w.clone(),
    }
}

/// Gradients of `Y = X·Wᵀ + s·(X·W_downᵀ)·W_upᵀ` with respect to the pair,
/// given `low = X·W_downᵀ` and `dY`.
fn low_rank_grad(
    grad: &mut LowRankPair,
    pair: &LowRankPair,
    scale: f64,
    x: &DMatrix<f64>,
    low: &DMatrix<f64>,
    dy: &DMatrix<f64>,
) {
    grad.up += (dy.transpose() * low) * scale;
    let d_low = (dy * &pair.up) * scale;
    grad.down += d_low.transpose() * x;
}

pub(crate) fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
fn softmax_backward(probs: &DMatrix<f64>, d_probs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = probs.component_mul(d_probs);
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let dot: f64 = row.iter().sum();
        for (j, v) in row.iter_mut().enumerate() {
            *v -= probs[(i, j)] * dot;
        }
    }
    out
}

/// Mixed attention output for the given expert weights.
pub fn attention_forward(
    block: &AdaptedAttentionBlock,
    weights: &ExpertWeights,
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    block.forward(weights, x, c)
}

/// Gradients of `⟨upstream, forward(x, c)⟩` with respect to every adapter
/// parameter of every active expert. Base weights are frozen and receive no
/// gradient.
pub fn attention_backward(
    block: &AdaptedAttentionBlock,
    weights: &ExpertWeights,
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> Result<BTreeMap<String, BiasAdapter>> {
    let (_, cache) = block.forward_cached(weights, x, c)?;
    Ok(block.backward_cached(&cache, upstream, false)?.0)
}

/// Adapter parameters over adapter plus base parameters.
pub fn trainable_ratio(block: &AdaptedAttentionBlock) -> Result<f64> {
    if block.adapters.is_empty() {
        return Err(Error::invalid("block has no adapters"));
    }
    let adapter: usize = block.adapters.values().map(BiasAdapter::param_count).sum();
    let base = block.base.param_count();
    Ok(adapter as f64 / (adapter + base) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const DIMS: AttentionDims = AttentionDims { d_x: 6, d_c: 5, d_h: 4 };

    fn trained_adapter(seed: u64, rank: usize) -> BiasAdapter {
        let mut a = BiasAdapter::new(DIMS, rank, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for m in a.blocks_mut() {
            m.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        a
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn fresh_adapter_has_zero_up_and_gaussian_down() {
        let a = BiasAdapter::new(DIMS, 2, 3).unwrap();
        for p in a.pairs() {
            assert!(p.up.iter().all(|&v| v == 0.0));
            assert!(p.down.iter().any(|&v| v != 0.0));
        }
        assert_eq!(a.scale, 0.5);
        assert_eq!(a, BiasAdapter::new(DIMS, 2, 3).unwrap());
        assert!(BiasAdapter::new(DIMS, 0, 3).is_err());
        assert!(BiasAdapter::new(DIMS, 4, 3).is_err());
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 4, 6);
        let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let fresh = BiasAdapter::new(DIMS, 2, 9).unwrap();
        assert_eq!(adapted_projection(&w, Some(&fresh.q), 0.5, &x).unwrap(), &w * &x);
        assert_eq!(
            adapted_projection(&w, Some(&fresh.q), 0.5, &DVector::zeros(6)).unwrap(),
            DVector::zeros(4)
        );

        let u = DMatrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(1, 6, |_, _| rng.random_range(-1.0..1.0));
        let pair = LowRankPair {
            down: v.clone(),
            up: u.clone(),
        };
        let dense = (&w + &u * &v) * &x;
        let got = adapted_projection(&w, Some(&pair), 1.0, &x).unwrap();
        assert!((got - dense).amax() < 1e-14);
        assert!(adapted_projection(&w, None, 1.0, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn original_only_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = CrossAttentionWeights::random(DIMS, 4);
        let mut block = AdaptedAttentionBlock::new(base.clone());
        block.insert_adapter("male", trained_adapter(1, 2)).unwrap();
        let x = rand_mat(&mut rng, 3, 6);
        let c = rand_mat(&mut rng, 2, 5);
        let out = attention_forward(&block, &ExpertWeights::original_only(), &x, &c).unwrap();

        let q = &x * base.w_q.transpose();
        let k = &c * base.w_k.transpose();
        let v = &c * base.w_v.transpose();
        let mut s = (&q * k.transpose()) / 2.0;
        softmax_rows(&mut s);
        let plain = (&s * &v) * base.w_o.transpose();
        assert!((out - plain).amax() < 1e-14);
    }

    #[test]
    fn mixture_is_convex_combination_of_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::random(DIMS, 5));
        block.insert_adapter("male", trained_adapter(2, 2)).unwrap();
        block.insert_adapter("female", trained_adapter(3, 2)).unwrap();
        let x = rand_mat(&mut rng, 3, 6);
        let c = rand_mat(&mut rng, 2, 5);
        let w = ExpertWeights::from_pairs([(ORIGINAL, 0.4), ("male", 0.1), ("female", 0.5)]);
        let mixed = block.forward(&w, &x, &c).unwrap();
        let manual = block.expert_output(ORIGINAL, &x, &c).unwrap() * 0.4
            + block.expert_output("male", &x, &c).unwrap() * 0.1
            + block.expert_output("female", &x, &c).unwrap() * 0.5;
        assert!((mixed - manual).amax() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::random(DIMS, 5));
        block.insert_adapter("male", trained_adapter(2, 2)).unwrap();
        let x = DMatrix::zeros(1, 6);
        let c = DMatrix::from_element(1, 5, 0.1);
        let bad = [
            ExpertWeights::from_pairs([("nobody", 1.0)]),
            ExpertWeights::from_pairs([(ORIGINAL, 0.5), ("male", -0.1)]),
            ExpertWeights::from_pairs([("male", 0.4)]),
        ];
        for w in bad {
            assert!(block.forward(&w, &x, &c).is_err());
        }
        assert!(block
            .forward(&ExpertWeights::from_pairs([("male", 1.0)]), &x, &c)
            .is_ok());
        assert!(block.insert_adapter(ORIGINAL, trained_adapter(2, 2)).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::random(DIMS, 6));
        block
            .insert_adapter("male", BiasAdapter::new(DIMS, 2, 1).unwrap())
            .unwrap();
        let x = rand_mat(&mut rng, 3, 6);
        let c = rand_mat(&mut rng, 2, 5);
        let w = ExpertWeights::from_pairs([(ORIGINAL, 0.5), ("male", 0.5)]);

        let zero = attention_backward(&block, &w, &x, &c, &DMatrix::zeros(3, 6)).unwrap();
        assert!(zero["male"].blocks().iter().all(|m| m.iter().all(|&v| v == 0.0)));

        let g = rand_mat(&mut rng, 3, 6);
        let grads = attention_backward(&block, &w, &x, &c, &g).unwrap();
        let gm = &grads["male"];
        for p in gm.pairs() {
            assert!(p.down.iter().all(|&v| v == 0.0));
        }
        assert!(gm.pairs().iter().any(|p| p.up.iter().any(|&v| v != 0.0)));
        assert!(!grads.contains_key(ORIGINAL));
    }

    // ⟨G, forward⟩ as a scalar loss, differentiated by central differences
    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::random(DIMS, 8));
        block.insert_adapter("male", trained_adapter(11, 2)).unwrap();
        block.insert_adapter("female", trained_adapter(12, 2)).unwrap();
        let x = rand_mat(&mut rng, 3, 6);
        let c = rand_mat(&mut rng, 2, 5);
        let g = rand_mat(&mut rng, 3, 6);
        let w = ExpertWeights::from_pairs([(ORIGINAL, 0.4), ("male", 0.1), ("female", 0.5)]);
        let loss = |b: &AdaptedAttentionBlock| b.forward(&w, &x, &c).unwrap().dot(&g);
        let grads = attention_backward(&block, &w, &x, &c, &g).unwrap();
        let h = 1e-6;
        for id in ["male", "female"] {
            for bi in 0..8 {
                let n = grads[id].blocks()[bi].len();
                for idx in 0..n {
                    let mut plus = block.clone();
                    plus.adapter_mut(id).unwrap().blocks_mut()[bi][idx] += h;
                    let mut minus = block.clone();
                    minus.adapter_mut(id).unwrap().blocks_mut()[bi][idx] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = grads[id].blocks()[bi][idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        rel < 1e-5 || (fd - an).abs() < 1e-9,
                        "{id} block {bi}[{idx}]: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::random(DIMS, 9));
        block.insert_adapter("male", trained_adapter(13, 2)).unwrap();
        let x = rand_mat(&mut rng, 3, 6);
        let c = rand_mat(&mut rng, 2, 5);
        let g = rand_mat(&mut rng, 3, 6);
        let w = ExpertWeights::from_pairs([(ORIGINAL, 0.7), ("male", 0.3)]);
        let (_, cache) = block.forward_cached(&w, &x, &c).unwrap();
        let base = block.backward_cached(&cache, &g, true).unwrap().1.unwrap();
        let h = 1e-6;
        for mi in 0..4 {
            for idx in 0..base.weights.matrices()[mi].len() {
                let mut plus = block.clone();
                plus.base_mut().matrices_mut()[mi][idx] += h;
                let mut minus = block.clone();
                minus.base_mut().matrices_mut()[mi][idx] -= h;
                let fd = (plus.forward(&w, &x, &c).unwrap().dot(&g) - minus.forward(&w, &x, &c).unwrap().dot(&g))
                    / (2.0 * h);
                let an = base.weights.matrices()[mi][idx];
                assert!(
                    (fd - an).abs() < 1e-7 * fd.abs().max(1.0),
                    "matrix {mi}[{idx}]: {fd} vs {an}"
                );
            }
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd =
                (block.forward(&w, &xp, &c).unwrap().dot(&g) - block.forward(&w, &xm, &c).unwrap().dot(&g)) / (2.0 * h);
            assert!((fd - base.dx[idx]).abs() < 1e-7 * fd.abs().max(1.0), "dx[{idx}]");
        }
    }

    #[test]
    fn trainable_ratio_counts_parameters() {
        let d = 64;
        let dims = AttentionDims { d_x: d, d_c: d, d_h: d };
        let mut block = AdaptedAttentionBlock::new(CrossAttentionWeights::zeros(dims));
        assert!(trainable_ratio(&block).is_err());
        block
            .insert_adapter("male", BiasAdapter::new(dims, 2, 0).unwrap())
            .unwrap();
        let ratio = trainable_ratio(&block).unwrap();
        assert_eq!(ratio, 4.0 / 68.0);
        assert!((ratio - 0.0588).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = trained_adapter(7, 3);
        let bytes = a.to_bytes("female").unwrap();
        assert_eq!(&bytes[..4], b"BIAS");
        let (id, back) = BiasAdapter::from_bytes(&bytes).unwrap();
        assert_eq!(id, "female");
        assert_eq!(back, a);
        let expected_len = 4 + 4 + 4 + 6 + 16 + 8 + 8 * a.param_count();
        assert_eq!(bytes.len(), expected_len);
        assert!(matches!(
            BiasAdapter::from_bytes(&bytes[..bytes.len() - 8]),
            Err(FormatError::Truncated { .. })
        ));
    }
}

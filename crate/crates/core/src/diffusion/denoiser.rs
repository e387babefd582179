use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ConditioningContext, NoisePredictor};
use crate::adapter::{
    gaussian, get_matrix, put_matrix, AdaptedAttentionBlock, AttentionDims, BiasAdapter, CrossAttentionWeights,
    ExpertWeights, ForwardCache,
};
use crate::codec::{self, Reader};
use crate::error::{Error, FormatError, Result};

pub const TDEN_MAGIC: [u8; 4] = *b"TDEN";
pub const TDEN_VERSION: u32 = 1;
pub const TIME_EMBED_DIM: usize = 8;

/// `ε_θ(z, t, C) = W_out · tanh(h + Attn(h, C)) + b_out` with
/// `h = tanh(W_in · [z; emb(t)] + b_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    k: usize,
    steps: usize,
    /// `d_x × (k + 8)`
    pub(crate) w_in: DMatrix<f64>,
    pub(crate) b_in: DVector<f64>,
    pub(crate) block: AdaptedAttentionBlock,
    /// `k × d_x`
    pub(crate) w_out: DMatrix<f64>,
    pub(crate) b_out: DVector<f64>,
}

/// Gradient of a scalar loss with respect to every denoiser parameter.
#[derive(Debug, Clone)]
pub struct DenoiserGrad {
    pub w_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub attention: CrossAttentionWeights,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
    pub adapters: BTreeMap<String, BiasAdapter>,
}

pub(crate) struct DenoiserCache {
    input: DVector<f64>,
    h: DVector<f64>,
    g: DVector<f64>,
    attn: ForwardCache,
}

/// Sinusoidal features of `t/T`.
pub(crate) fn time_embedding(t: usize, steps: usize) -> [f64; TIME_EMBED_DIM] {
    let s = t as f64 / steps as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..TIME_EMBED_DIM / 2 {
        let w = std::f64::consts::PI * (1 << i) as f64 * s;
        out[2 * i] = w.sin();
        out[2 * i + 1] = w.cos();
    }
    out
}

impl ToyDenoiser {
    /// Fresh model for `k`-dimensional samples over `steps` timesteps.
    pub fn new(k: usize, d_x: usize, d_c: usize, d_h: usize, steps: usize, seed: u64) -> Result<Self> {
        if k == 0 || d_x == 0 || d_c == 0 || d_h == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if steps < 2 {
            return Err(Error::invalid("denoiser needs at least 2 timesteps"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = k + TIME_EMBED_DIM;
        let w_in = gaussian(&mut rng, d_x, fan_in, 1.0 / (fan_in as f64).sqrt());
        let w_out = gaussian(&mut rng, k, d_x, 1.0 / (d_x as f64).sqrt());
        let attn_seed = rand::Rng::random(&mut rng);
        Ok(Self {
            k,
            steps,
            w_in,
            b_in: DVector::zeros(d_x),
            block: AdaptedAttentionBlock::new(CrossAttentionWeights::random(
                AttentionDims { d_x, d_c, d_h },
                attn_seed,
            )),
            w_out,
            b_out: DVector::zeros(k),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dims(&self) -> AttentionDims {
        self.block.dims()
    }

    pub fn block(&self) -> &AdaptedAttentionBlock {
        &self.block
    }

    pub fn insert_adapter(&mut self, id: impl Into<String>, adapter: BiasAdapter) -> Result<()> {
        self.block.insert_adapter(id, adapter)
    }

    pub fn adapter(&self, id: &str) -> Option<&BiasAdapter> {
        self.block.adapter(id)
    }

    pub(crate) fn adapter_mut(&mut self, id: &str) -> Option<&mut BiasAdapter> {
        self.block.adapter_mut(id)
    }

    /// Copy of the model without adapters.
    pub fn base_only(&self) -> Self {
        let mut out = self.clone();
        let ids: Vec<String> = out.block.adapters().keys().cloned().collect();
        for id in ids {
            out.block.remove_adapter(&id);
        }
        out
    }

    fn check(&self, z: &DVector<f64>, t: usize, ctx: &ConditioningContext) -> Result<()> {
        if z.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: z.len(),
            });
        }
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        if ctx.dim() != self.dims().d_c {
            return Err(Error::DimensionMismatch {
                expected: self.dims().d_c,
                found: ctx.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_cached(
        &self,
        weights: &ExpertWeights,
        z: &DVector<f64>,
        t: usize,
        ctx: &ConditioningContext,
    ) -> Result<(DVector<f64>, DenoiserCache)> {
        self.check(z, t, ctx)?;
        let mut input = DVector::zeros(self.k + TIME_EMBED_DIM);
        input.rows_mut(0, self.k).copy_from(z);
        input
            .rows_mut(self.k, TIME_EMBED_DIM)
            .copy_from_slice(&time_embedding(t, self.steps));
        let h = (&self.w_in * &input + &self.b_in).map(f64::tanh);
        let x = DMatrix::from_row_slice(1, h.len(), h.as_slice());
        let (a, attn) = self.block.forward_cached(weights, &x, ctx.tokens())?;
        let g = DVector::from_fn(h.len(), |i, _| (h[i] + a[(0, i)]).tanh());
        let out = &self.w_out * &g + &self.b_out;
        Ok((out, DenoiserCache { input, h, g, attn }))
    }

    /// Noise prediction with the given expert mixture.
    pub fn predict_mixed(
        &self,
        weights: &ExpertWeights,
        z: &DVector<f64>,
        t: usize,
        ctx: &ConditioningContext,
    ) -> Result<DVector<f64>> {
        Ok(self.forward_cached(weights, z, t, ctx)?.0)
    }

    /// Backpropagates `d_out = ∂L/∂ε̂`. Base gradients are only computed when
    /// `want_base` is set.
    pub(crate) fn backward(
        &self,
        cache: &DenoiserCache,
        d_out: &DVector<f64>,
        want_base: bool,
    ) -> Result<DenoiserGrad> {
        let d_g = self.w_out.transpose() * d_out;
        let d_u = d_g.component_mul(&cache.g.map(|g| 1.0 - g * g));
        let d_a = DMatrix::from_row_slice(1, d_u.len(), d_u.as_slice());
        let (adapters, base) = self.block.backward_cached(&cache.attn, &d_a, want_base)?;
        let mut grad = DenoiserGrad {
            w_in: DMatrix::zeros(0, 0),
            b_in: DVector::zeros(0),
            attention: CrossAttentionWeights::zeros(AttentionDims { d_x: 0, d_c: 0, d_h: 0 }),
            w_out: DMatrix::zeros(0, 0),
            b_out: DVector::zeros(0),
            adapters,
        };
        if let Some(base) = base {
            let d_h = d_u + DVector::from_row_slice(base.dx.as_slice());
            let d_pre = d_h.component_mul(&cache.h.map(|h| 1.0 - h * h));
            grad.w_in = &d_pre * cache.input.transpose();
            grad.b_in = d_pre;
            grad.attention = base.weights;
            grad.w_out = d_out * cache.g.transpose();
            grad.b_out = d_out.clone();
        }
        Ok(grad)
    }

    /// Base parameter blocks in checkpoint order:
    /// w_in, b_in, w_q, w_k, w_v, w_o, w_out, b_out.
    pub(crate) fn base_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let [w_q, w_k, w_v, w_o] = self.block.base_mut().matrices_mut();
        vec![
            self.w_in.as_mut_slice(),
            self.b_in.as_mut_slice(),
            w_q.as_mut_slice(),
            w_k.as_mut_slice(),
            w_v.as_mut_slice(),
            w_o.as_mut_slice(),
            self.w_out.as_mut_slice(),
            self.b_out.as_mut_slice(),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let AttentionDims { d_x, d_c, d_h } = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(&TDEN_MAGIC);
        codec::put_u32(&mut out, TDEN_VERSION);
        for n in [self.k, TIME_EMBED_DIM, d_x, d_c, d_h, self.steps] {
            codec::put_u32(&mut out, codec::len_u32(n, "dimension")?);
        }
        put_matrix(&mut out, &self.w_in);
        self.b_in.iter().for_each(|&v| codec::put_f64(&mut out, v));
        for m in self.block.base().matrices() {
            put_matrix(&mut out, m);
        }
        put_matrix(&mut out, &self.w_out);
        self.b_out.iter().for_each(|&v| codec::put_f64(&mut out, v));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(&TDEN_MAGIC)?;
        r.version(TDEN_VERSION)?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [k, temb, d_x, d_c, d_h, steps] = dims;
        if temb != TIME_EMBED_DIM {
            return Err(FormatError::InvalidHeader(format!(
                "time embedding width {temb}, expected {TIME_EMBED_DIM}"
            )));
        }
        if k == 0 || d_x == 0 || d_c == 0 || d_h == 0 || steps < 2 {
            return Err(FormatError::InvalidHeader(format!("invalid dims {dims:?}")));
        }
        let w_in = get_matrix(&mut r, d_x, k + temb)?;
        let b_in = DVector::from_vec(r.f64_block(d_x)?);
        let w_q = get_matrix(&mut r, d_h, d_x)?;
        let w_k = get_matrix(&mut r, d_h, d_c)?;
        let w_v = get_matrix(&mut r, d_h, d_c)?;
        let w_o = get_matrix(&mut r, d_x, d_h)?;
        let w_out = get_matrix(&mut r, k, d_x)?;
        let b_out = DVector::from_vec(r.f64_block(k)?);
        r.finish()?;
        Ok(Self {
            k,
            steps,
            w_in,
            b_in,
            block: AdaptedAttentionBlock::new(CrossAttentionWeights { w_q, w_k, w_v, w_o }),
            w_out,
            b_out,
        })
    }

    /// Writes the base weights; adapters are stored separately.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = codec::read_file(path)?;
        codec::at_path(path, Self::from_bytes(&bytes))
    }
}

impl NoisePredictor for ToyDenoiser {
    fn output_dim(&self) -> usize {
        self.k
    }

    fn predict(&self, z: &DVector<f64>, t: usize, ctx: &ConditioningContext) -> Result<DVector<f64>> {
        self.predict_mixed(&ExpertWeights::original_only(), z, t, ctx)
    }
}

/// A denoiser evaluated under a fixed expert mixture.
#[derive(Debug, Clone, Copy)]
pub struct MixedDenoiser<'a> {
    pub model: &'a ToyDenoiser,
    pub weights: &'a ExpertWeights,
}

impl NoisePredictor for MixedDenoiser<'_> {
    fn output_dim(&self) -> usize {
        self.model.k
    }

    fn predict(&self, z: &DVector<f64>, t: usize, ctx: &ConditioningContext) -> Result<DVector<f64>> {
        self.model.predict_mixed(self.weights, z, t, ctx)
    }
}

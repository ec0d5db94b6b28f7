//! Text prompt learning.
//!
//! `p` context vectors are shared by every affordance class. For class `i`
//! the sequence `[v_1 .. v_p, token_i]` goes through a frozen stub encoder:
//! mean-pool over the `p+1` rows, multiply by a fixed projection, then
//! layer-normalise without affine parameters.

use crate::error::{Error, Result};
use crate::features::ClassTokenTable;
use crate::linalg::Mat;
use crate::rng;

pub const CONTEXT_INIT_STD: f64 = 0.02;
/// Variance floor inside the layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Learnable context vectors, `p × C_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVectors {
    pub v: Mat,
}

impl ContextVectors {
    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows() == 0
    }
}

pub fn init_context(p: usize, c_t: usize, seed: u64) -> Result<ContextVectors> {
    if p == 0 {
        return Err(Error::InvalidArgument("number of context vectors p must be >= 1".into()));
    }
    let mut r = rng::stream(seed, "prompt/context");
    Ok(ContextVectors {
        v: rng::gaussian_mat(&mut r, p, c_t, CONTEXT_INIT_STD),
    })
}

/// Affordance text embeddings `F_t`, `N × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings(pub Mat);

/// Frozen stand-in for a pretrained text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StubTextEncoder {
    w_txt: Mat,
    seed: u64,
}

impl StubTextEncoder {
    pub fn new(c_t: usize, c: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "prompt/text-encoder");
        StubTextEncoder {
            w_txt: rng::gaussian_mat(&mut r, c_t, c, 1.0 / (c_t as f64).sqrt()),
            seed,
        }
    }

    /// Projection `C_t × C`; read-only.
    pub fn projection(&self) -> &Mat {
        &self.w_txt
    }

    pub(crate) fn from_parts(w_txt: Mat, seed: u64) -> Self {
        StubTextEncoder { w_txt, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.w_txt.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_txt.cols()
    }

    /// Order-sensitive checksum over the projection bits.
    pub fn checksum(&self) -> u64 {
        self.w_txt
            .as_slice()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
                (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
            })
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TextCache {
    /// Post-norm rows (equal to the output).
    normalized: Mat,
    /// Per-row `1/σ`.
    inv_std: Vec<f64>,
    p: usize,
}

fn check_dims(ctx: Option<&ContextVectors>, table: &ClassTokenTable, enc: &StubTextEncoder) -> Result<()> {
    if let Some(ctx) = ctx {
        if ctx.v.cols() != table.token_dim() {
            return Err(Error::shape(format!(
                "context vectors have C_t = {}, class tokens have {}",
                ctx.v.cols(),
                table.token_dim()
            )));
        }
    }
    if enc.input_dim() != table.token_dim() {
        return Err(Error::shape(format!(
            "text encoder expects C_t = {}, class tokens have {}",
            enc.input_dim(),
            table.token_dim()
        )));
    }
    Ok(())
}

/// Forward pass. `ctx = None` encodes the bare class tokens (no prompt learning).
pub fn encode_texts_cached(
    ctx: Option<&ContextVectors>,
    table: &ClassTokenTable,
    enc: &StubTextEncoder,
) -> Result<(TextEmbeddings, TextCache)> {
    check_dims(ctx, table, enc)?;
    let p = ctx.map_or(0, |c| c.len());
    let c_t = table.token_dim();
    let ctx_sum = ctx.map_or_else(|| vec![0.0; c_t], |c| c.v.col_sums());
    let denom = (p + 1) as f64;
    let mut pooled = Mat::zeros(table.len(), c_t);
    for i in 0..table.len() {
        for (k, out) in pooled.row_mut(i).iter_mut().enumerate() {
            *out = (ctx_sum[k] + table.tokens.get(i, k)) / denom;
        }
    }
    let mut u = pooled.matmul(enc.projection())?;
    let c = u.cols() as f64;
    let mut inv_std = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let row = u.row_mut(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|x| *x = (*x - mean) * is);
        inv_std.push(is);
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("text embeddings".into()));
    }
    Ok((
        TextEmbeddings(u.clone()),
        TextCache {
            normalized: u,
            inv_std,
            p,
        },
    ))
}

pub fn encode_texts(
    ctx: &ContextVectors,
    table: &ClassTokenTable,
    enc: &StubTextEncoder,
) -> Result<TextEmbeddings> {
    encode_texts_cached(Some(ctx), table, enc).map(|(t, _)| t)
}

/// Gradient of the loss w.r.t. the context vectors given `dL/dF_t`.
/// Returns a `p × C_t` matrix (empty when encoded without context).
pub fn encode_texts_backward(cache: &TextCache, d_out: &Mat, enc: &StubTextEncoder) -> Result<Mat> {
    let y = &cache.normalized;
    if !y.same_shape(d_out) {
        return Err(Error::shape("text gradient shape differs from embeddings"));
    }
    let c = y.cols() as f64;
    let mut du = Mat::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let dy = d_out.row(i);
        let yi = y.row(i);
        let mean_dy = dy.iter().sum::<f64>() / c;
        let mean_dy_y = dy.iter().zip(yi).map(|(a, b)| a * b).sum::<f64>() / c;
        for (k, out) in du.row_mut(i).iter_mut().enumerate() {
            *out = cache.inv_std[i] * (dy[k] - mean_dy - yi[k] * mean_dy_y);
        }
    }
    // dL/dpooled = du · W_txtᵀ; each context row receives the class sum / (p+1).
    let d_pooled = du.matmul_nt(enc.projection())?;
    let shared: Vec<f64> = d_pooled
        .col_sums()
        .iter()
        .map(|v| v / (cache.p + 1) as f64)
        .collect();
    let mut d_ctx = Mat::zeros(cache.p, enc.input_dim());
    for r in 0..cache.p {
        d_ctx.row_mut(r).copy_from_slice(&shared);
    }
    Ok(d_ctx)
}

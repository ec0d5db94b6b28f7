//! CLS-guided cross-attention decoder and the prediction head.
//!
//! One layer, with text embeddings `F_t` (N×C) as queries and visual
//! features `F_v` (L×C) as keys/values:
//!
//! ```text
//! Q = F_t·Wq   K = F_v·Wk   V = F_v·Wv
//! M = sigmoid((cls·Wc)·Kᵀ / √C)                 per-key gate, length L
//! A = rowsoftmax(Q·Kᵀ / √C)
//! F̂ = (A ⊙ 1·Mᵀ)·V + F_t
//! out = relu(F̂·W1 + b1)·W2 + b2 + F̂
//! ```
//!
//! The head scores every patch against every refined text embedding,
//! `F_v·F_t'ᵀ`, upsamples the logits bilinearly to image size and applies a
//! sigmoid.

use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, softmax_in_place, Mat};
use crate::resample::Bilinear;
use crate::rng;

/// Hidden width multiplier of the feed-forward block.
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    /// `C_v × C`, applied to the `[CLS]` token.
    pub wc: Mat,
    /// `C × 4C`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `4C × C`
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl DecoderLayerParams {
    pub fn init(c: usize, c_v: usize, r: &mut rng::Rng) -> Self {
        let s = 1.0 / (c as f64).sqrt();
        let hidden = FFN_EXPANSION * c;
        DecoderLayerParams {
            wq: rng::gaussian_mat(r, c, c, s),
            wk: rng::gaussian_mat(r, c, c, s),
            wv: rng::gaussian_mat(r, c, c, s),
            wc: rng::gaussian_mat(r, c_v, c, 1.0 / (c_v as f64).sqrt()),
            w1: rng::gaussian_mat(r, c, hidden, s),
            b1: vec![0.0; hidden],
            w2: rng::gaussian_mat(r, hidden, c, 1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; c],
        }
    }

    /// All matrices zero (used for hand-checked cases).
    pub fn zeros(c: usize, c_v: usize) -> Self {
        let hidden = FFN_EXPANSION * c;
        DecoderLayerParams {
            wq: Mat::zeros(c, c),
            wk: Mat::zeros(c, c),
            wv: Mat::zeros(c, c),
            wc: Mat::zeros(c_v, c),
            w1: Mat::zeros(c, hidden),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(hidden, c),
            b2: vec![0.0; c],
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    fn check(&self, ft: &Mat, fv: &Mat, cls: &[f64]) -> Result<()> {
        let c = self.dim();
        let hidden = self.w1.cols();
        let ok = self.wq.shape() == (c, c)
            && self.wk.shape() == (c, c)
            && self.wv.shape() == (c, c)
            && self.wc.cols() == c
            && self.w1.rows() == c
            && self.b1.len() == hidden
            && self.w2.shape() == (hidden, c)
            && self.b2.len() == c;
        if !ok {
            return Err(Error::shape("inconsistent decoder layer parameters"));
        }
        if ft.cols() != c || fv.cols() != c {
            return Err(Error::shape(format!(
                "decoder width {c}, text has {} columns, visual has {}",
                ft.cols(),
                fv.cols()
            )));
        }
        if cls.len() != self.wc.rows() {
            return Err(Error::shape(format!(
                "cls has {} entries, Wc expects {}",
                cls.len(),
                self.wc.rows()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn init(t: usize, c: usize, c_v: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "decoder");
        DecoderParams {
            layers: (0..t).map(|_| DecoderLayerParams::init(c, c_v, &mut r)).collect(),
        }
    }

    pub fn t(&self) -> usize {
        self.layers.len()
    }
}

/// Whether attention weights are gated by the CLS-derived mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    ClsGuided,
    /// Mask forced to all ones.
    Disabled,
}

/// `M = sigmoid((cls·Wc)·Kᵀ / √d_k)` with `d_k` = key width.
pub fn cls_mask(cls: &[f64], k: &Mat, wc: &Mat) -> Result<Vec<f64>> {
    let c = wc.vecmul(cls)?;
    mask_from_query(&c, k)
}

fn mask_from_query(c: &[f64], k: &Mat) -> Result<Vec<f64>> {
    if c.len() != k.cols() {
        return Err(Error::shape(format!(
            "cls query has width {}, keys have {}",
            c.len(),
            k.cols()
        )));
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    Ok((0..k.rows()).map(|j| sigmoid(dot(c, k.row(j)) * scale)).collect())
}

/// Row-wise `softmax(Q·Kᵀ/√d_k)`.
pub fn attention_weights(q: &Mat, k: &Mat) -> Result<Mat> {
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut a = q.matmul_nt(k)?.scale(scale);
    for i in 0..a.rows() {
        softmax_in_place(a.row_mut(i));
    }
    Ok(a)
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    ft: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    cls_query: Vec<f64>,
    mask: Vec<f64>,
    fhat: Mat,
    pre_act: Mat,
    hidden: Mat,
    mode: MaskMode,
}

fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn decoder_layer_cached(
    ft: &Mat,
    fv: &Mat,
    cls: &[f64],
    p: &DecoderLayerParams,
    mode: MaskMode,
) -> Result<(Mat, LayerCache)> {
    p.check(ft, fv, cls)?;
    let q = ft.matmul(&p.wq)?;
    let k = fv.matmul(&p.wk)?;
    let v = fv.matmul(&p.wv)?;
    let attn = attention_weights(&q, &k)?;
    let cls_query = p.wc.vecmul(cls)?;
    let mask = match mode {
        MaskMode::ClsGuided => mask_from_query(&cls_query, &k)?,
        MaskMode::Disabled => vec![1.0; k.rows()],
    };
    let mut gated = attn.clone();
    for i in 0..gated.rows() {
        for (g, m) in gated.row_mut(i).iter_mut().zip(&mask) {
            *g *= m;
        }
    }
    let mut fhat = gated.matmul(&v)?;
    fhat.axpy(1.0, ft)?;
    ensure_finite(&fhat, "decoder attention output")?;
    let mut pre_act = fhat.matmul(&p.w1)?;
    pre_act.add_row_broadcast(&p.b1)?;
    let hidden = pre_act.map(|x| x.max(0.0));
    let mut out = hidden.matmul(&p.w2)?;
    out.add_row_broadcast(&p.b2)?;
    out.axpy(1.0, &fhat)?;
    ensure_finite(&out, "decoder layer output")?;
    Ok((
        out,
        LayerCache {
            ft: ft.clone(),
            q,
            k,
            v,
            attn,
            cls_query,
            mask,
            fhat,
            pre_act,
            hidden,
            mode,
        },
    ))
}

pub fn decoder_layer(
    ft: &Mat,
    fv: &Mat,
    cls: &[f64],
    p: &DecoderLayerParams,
    mode: MaskMode,
) -> Result<Mat> {
    decoder_layer_cached(ft, fv, cls, p, mode).map(|(o, _)| o)
}

/// Gradients of one decoder layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wc: Mat,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Backward through one layer. Returns `(param grads, dL/dF_t, dL/dF_v)`.
pub fn decoder_layer_backward(
    cache: &LayerCache,
    fv: &Mat,
    cls: &[f64],
    p: &DecoderLayerParams,
    d_out: &Mat,
) -> Result<(LayerGrads, Mat, Mat)> {
    let c = p.dim();
    let scale = 1.0 / (c as f64).sqrt();

    // FFN with residual.
    let d_w2 = cache.hidden.matmul_tn(d_out)?;
    let d_b2 = d_out.col_sums();
    let mut d_pre = d_out.matmul_nt(&p.w2)?;
    for (g, z) in d_pre.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let d_w1 = cache.fhat.matmul_tn(&d_pre)?;
    let d_b1 = d_pre.col_sums();
    let mut d_fhat = d_pre.matmul_nt(&p.w1)?;
    d_fhat.axpy(1.0, d_out)?;

    // F̂ = B·V + F_t with B = A ⊙ 1·Mᵀ.
    let mut d_ft = d_fhat.clone();
    let mut gated = cache.attn.clone();
    for i in 0..gated.rows() {
        for (g, m) in gated.row_mut(i).iter_mut().zip(&cache.mask) {
            *g *= m;
        }
    }
    let d_v = gated.matmul_tn(&d_fhat)?;
    let d_gated = d_fhat.matmul_nt(&cache.v)?;
    let l = cache.k.rows();
    let mut d_attn = d_gated.clone();
    let mut d_mask = vec![0.0; l];
    for i in 0..d_attn.rows() {
        let a_row = cache.attn.row(i);
        let dg_row = d_gated.row(i);
        for j in 0..l {
            d_mask[j] += dg_row[j] * a_row[j];
        }
        for (da, m) in d_attn.row_mut(i).iter_mut().zip(&cache.mask) {
            *da *= m;
        }
    }

    // Softmax rows.
    let mut d_scores = Mat::zeros(d_attn.rows(), l);
    for i in 0..d_attn.rows() {
        let a = cache.attn.row(i);
        let da = d_attn.row(i);
        let inner = dot(a, da);
        for (j, out) in d_scores.row_mut(i).iter_mut().enumerate() {
            *out = a[j] * (da[j] - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&cache.k)?;
    let mut d_k = d_scores.matmul_tn(&cache.q)?;

    // Mask path: M_j = σ(g_j), g_j = c·K_j / √C.
    let mut d_wc = Mat::zeros(p.wc.rows(), c);
    if cache.mode == MaskMode::ClsGuided {
        let d_g: Vec<f64> = d_mask
            .iter()
            .zip(&cache.mask)
            .map(|(dm, m)| dm * m * (1.0 - m) * scale)
            .collect();
        let d_cq = cache.k.vecmul(&d_g)?;
        for (j, &dg) in d_g.iter().enumerate() {
            for (dk, cq) in d_k.row_mut(j).iter_mut().zip(&cache.cls_query) {
                *dk += dg * cq;
            }
        }
        for (r, &x) in cls.iter().enumerate() {
            for (o, g) in d_wc.row_mut(r).iter_mut().zip(&d_cq) {
                *o = x * g;
            }
        }
    }

    let d_wq = cache.ft.matmul_tn(&d_q)?;
    d_ft.axpy(1.0, &d_q.matmul_nt(&p.wq)?)?;
    let d_wk = fv.matmul_tn(&d_k)?;
    let d_wv = fv.matmul_tn(&d_v)?;
    let mut d_fv = d_k.matmul_nt(&p.wk)?;
    d_fv.axpy(1.0, &d_v.matmul_nt(&p.wv)?)?;

    Ok((
        LayerGrads {
            wq: d_wq,
            wk: d_wk,
            wv: d_wv,
            wc: d_wc,
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
        },
        d_ft,
        d_fv,
    ))
}

#[derive(Debug, Clone, Default)]
pub struct DecodeCache {
    layers: Vec<LayerCache>,
}

pub fn decode_cached(
    ft: &Mat,
    fv: &Mat,
    cls: &[f64],
    dp: &DecoderParams,
    mode: MaskMode,
) -> Result<(Mat, DecodeCache)> {
    let mut cur = ft.clone();
    let mut caches = Vec::with_capacity(dp.t());
    for layer in &dp.layers {
        let (next, cache) = decoder_layer_cached(&cur, fv, cls, layer, mode)?;
        caches.push(cache);
        cur = next;
    }
    Ok((cur, DecodeCache { layers: caches }))
}

pub fn decode(ft: &Mat, fv: &Mat, cls: &[f64], dp: &DecoderParams, mode: MaskMode) -> Result<Mat> {
    decode_cached(ft, fv, cls, dp, mode).map(|(o, _)| o)
}

/// Returns `(per-layer grads, dL/dF_t, dL/dF_v)` accumulated over all layers.
pub fn decode_backward(
    cache: &DecodeCache,
    fv: &Mat,
    cls: &[f64],
    dp: &DecoderParams,
    d_out: &Mat,
) -> Result<(Vec<LayerGrads>, Mat, Mat)> {
    let mut d_cur = d_out.clone();
    let mut d_fv = Mat::zeros(fv.rows(), fv.cols());
    let mut grads = Vec::with_capacity(dp.t());
    for (layer, lc) in dp.layers.iter().zip(&cache.layers).rev() {
        let (g, d_ft, d_fv_layer) = decoder_layer_backward(lc, fv, cls, layer, &d_cur)?;
        d_fv.axpy(1.0, &d_fv_layer)?;
        grads.push(g);
        d_cur = d_ft;
    }
    grads.reverse();
    Ok((grads, d_cur, d_fv))
}

/// Per-pixel, per-affordance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Patch logits `L × N`.
    pub logits: Mat,
    /// Upsampled logits, `[H][W][N]`.
    pub upsampled_logits: Vec<f64>,
    /// `sigmoid(upsampled_logits)`, `[H][W][N]`, each in `[0, 1]`.
    pub upsampled: Vec<f64>,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
}

impl Prediction {
    pub fn n_classes(&self) -> usize {
        self.logits.cols()
    }

    /// Score map of one class, `H·W` values.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        let n = self.n_classes();
        self.upsampled.iter().skip(k).step_by(n).copied().collect()
    }

    /// Builds a prediction directly from pixel scores (bypassing the model).
    pub fn from_scores(scores: Vec<f64>, image_size: (usize, usize), n: usize) -> Result<Self> {
        if scores.len() != image_size.0 * image_size.1 * n {
            return Err(Error::shape("score buffer does not match image size"));
        }
        let logits_px = scores
            .iter()
            .map(|&s| {
                let s = s.clamp(1e-300, 1.0 - 1e-16);
                (s / (1.0 - s)).ln()
            })
            .collect();
        Ok(Prediction {
            logits: Mat::zeros(0, n),
            upsampled_logits: logits_px,
            upsampled: scores,
            grid: image_size,
            image_size,
        })
    }
}

pub fn predict(
    fv: &Mat,
    ft_refined: &Mat,
    grid: (usize, usize),
    image_size: (usize, usize),
) -> Result<Prediction> {
    if grid.0 * grid.1 != fv.rows() {
        return Err(Error::shape(format!(
            "{} patches do not fill a {}x{} grid",
            fv.rows(),
            grid.0,
            grid.1
        )));
    }
    let logits = fv.matmul_nt(ft_refined)?;
    let n = logits.cols();
    let up = Bilinear::new(grid, image_size);
    let upsampled_logits = up.forward(logits.as_slice(), n);
    let upsampled = upsampled_logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(Prediction {
        logits,
        upsampled_logits,
        upsampled,
        grid,
        image_size,
    })
}

/// Given `dL/d(upsampled logits)`, returns `(dL/dF_v, dL/dF_t')`.
pub fn predict_backward(
    fv: &Mat,
    ft_refined: &Mat,
    pred: &Prediction,
    d_upsampled_logits: &[f64],
) -> Result<(Mat, Mat)> {
    let n = pred.n_classes();
    let up = Bilinear::new(pred.grid, pred.image_size);
    let d_logits = Mat::from_vec(fv.rows(), n, up.adjoint(d_upsampled_logits, n))?;
    Ok((d_logits.matmul(ft_refined)?, d_logits.matmul_tn(fv)?))
}

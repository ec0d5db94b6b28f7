//! Full model: trainable parameters, frozen text side, forward pass and the
//! exact analytic backward pass of the BCE loss.

use serde::{Deserialize, Serialize};

use crate::data::AffordanceTarget;
use crate::decoder::{
    decode_backward, decode_cached, predict, predict_backward, DecodeCache, DecoderLayerParams,
    DecoderParams, MaskMode, Prediction,
};
use crate::error::{Error, Result};
use crate::features::{ClassTokenTable, FeatureStack};
use crate::fusion::{embed, embed_backward, fuse_backward, fuse_cached, Embedder, FuseCache, FusionParams};
use crate::linalg::Mat;
use crate::prompt::{
    encode_texts_backward, encode_texts_cached, init_context, ContextVectors, StubTextEncoder,
    TextCache, TextEmbeddings,
};
use crate::training::{bce_grad_logits, bce_loss};

/// Modules that can be switched off for ablation runs. `true` disables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Text prompt learning: classes are encoded without context vectors.
    pub tpl: bool,
    /// Multi-layer fusion: only the last layer is used (`j = 1`).
    pub mlff: bool,
    /// Transformer decoder: `t = 0`.
    pub td: bool,
    /// CLS-guided mask: mask forced to ones.
    pub ctm: bool,
}

impl Ablation {
    pub fn none() -> Self {
        Ablation::default()
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.ctm {
            MaskMode::Disabled
        } else {
            MaskMode::ClsGuided
        }
    }
}

/// Architecture sizes. `p`, `j`, `t` are the requested values; ablations
/// may reduce the effective `j` and `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub p: usize,
    pub j: usize,
    pub t: usize,
    /// Shared embedding width.
    pub c: usize,
    /// Class-token width.
    pub c_t: usize,
    /// Visual feature width.
    pub c_v: usize,
    /// Number of affordance classes.
    pub n_classes: usize,
}

impl ModelDims {
    pub fn effective_j(&self, ab: &Ablation) -> usize {
        if ab.mlff {
            1
        } else {
            self.j
        }
    }

    pub fn effective_t(&self, ab: &Ablation) -> usize {
        if ab.td {
            0
        } else {
            self.t
        }
    }
}

/// Everything that is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub ctx: ContextVectors,
    pub fp: FusionParams,
    pub emb: Embedder,
    pub dp: DecoderParams,
}

impl ModelParams {
    pub fn init(dims: &ModelDims, ab: &Ablation, seed: u64) -> Result<Self> {
        Ok(ModelParams {
            ctx: init_context(dims.p, dims.c_t, seed)?,
            fp: FusionParams::init(dims.effective_j(ab), dims.c_v, seed)?,
            emb: Embedder::init(dims.c_v, dims.c, seed),
            dp: DecoderParams::init(dims.effective_t(ab), dims.c, dims.c_v, seed),
        })
    }

    /// All-zero tensors with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows(), m.cols());
        ModelParams {
            ctx: ContextVectors { v: z(&self.ctx.v) },
            fp: FusionParams {
                proj: self.fp.proj.iter().map(z).collect(),
                alpha_logits: vec![0.0; self.fp.alpha_logits.len()],
            },
            emb: Embedder {
                w: z(&self.emb.w),
                b: vec![0.0; self.emb.b.len()],
            },
            dp: DecoderParams {
                layers: self
                    .dp
                    .layers
                    .iter()
                    .map(|l| {
                        let mut zl = DecoderLayerParams::zeros(l.dim(), l.wc.rows());
                        zl.b1 = vec![0.0; l.b1.len()];
                        zl.w1 = z(&l.w1);
                        zl.w2 = z(&l.w2);
                        zl
                    })
                    .collect(),
            },
        }
    }

    /// Named views of every tensor as `(name, rows, cols, values)` in a fixed order.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out: Vec<(String, usize, usize, &[f64])> = Vec::new();
        let m = |name: String, x: &'_ Mat| (name, x.rows(), x.cols());
        let (n, r, c) = m("ctx".into(), &self.ctx.v);
        out.push((n, r, c, self.ctx.v.as_slice()));
        for (i, p) in self.fp.proj.iter().enumerate() {
            let (n, r, c) = m(format!("fusion.proj.{i}"), p);
            out.push((n, r, c, p.as_slice()));
        }
        out.push((
            "fusion.alpha_logits".into(),
            1,
            self.fp.alpha_logits.len(),
            &self.fp.alpha_logits,
        ));
        out.push((
            "embedder.w".into(),
            self.emb.w.rows(),
            self.emb.w.cols(),
            self.emb.w.as_slice(),
        ));
        out.push(("embedder.b".into(), 1, self.emb.b.len(), &self.emb.b));
        for (i, l) in self.dp.layers.iter().enumerate() {
            for (name, x) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wc", &l.wc), ("w1", &l.w1)] {
                out.push((format!("decoder.{i}.{name}"), x.rows(), x.cols(), x.as_slice()));
            }
            out.push((format!("decoder.{i}.b1"), 1, l.b1.len(), &l.b1));
            out.push((format!("decoder.{i}.w2"), l.w2.rows(), l.w2.cols(), l.w2.as_slice()));
            out.push((format!("decoder.{i}.b2"), 1, l.b2.len(), &l.b2));
        }
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("ctx".into(), self.ctx.v.as_mut_slice()));
        for (i, p) in self.fp.proj.iter_mut().enumerate() {
            out.push((format!("fusion.proj.{i}"), p.as_mut_slice()));
        }
        out.push(("fusion.alpha_logits".into(), &mut self.fp.alpha_logits));
        out.push(("embedder.w".into(), self.emb.w.as_mut_slice()));
        out.push(("embedder.b".into(), &mut self.emb.b));
        for (i, l) in self.dp.layers.iter_mut().enumerate() {
            out.push((format!("decoder.{i}.wq"), l.wq.as_mut_slice()));
            out.push((format!("decoder.{i}.wk"), l.wk.as_mut_slice()));
            out.push((format!("decoder.{i}.wv"), l.wv.as_mut_slice()));
            out.push((format!("decoder.{i}.wc"), l.wc.as_mut_slice()));
            out.push((format!("decoder.{i}.w1"), l.w1.as_mut_slice()));
            out.push((format!("decoder.{i}.b1"), &mut l.b1));
            out.push((format!("decoder.{i}.w2"), l.w2.as_mut_slice()));
            out.push((format!("decoder.{i}.b2"), &mut l.b2));
        }
        out
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.3.iter().copied()).collect()
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.0 == y.0 && x.1 == y.1 && x.2 == y.2)
    }
}

/// Frozen text side of the model.
#[derive(Debug, Clone, PartialEq)]
pub enum TextSource {
    /// Class tokens composed with learnable context through the stub encoder.
    Prompted {
        table: ClassTokenTable,
        encoder: StubTextEncoder,
    },
    /// Precomputed embeddings used as-is; the context vectors are unused.
    Fixed {
        names: Vec<String>,
        embeddings: TextEmbeddings,
    },
}

impl TextSource {
    pub fn n_classes(&self) -> usize {
        match self {
            TextSource::Prompted { table, .. } => table.len(),
            TextSource::Fixed { embeddings, .. } => embeddings.0.rows(),
        }
    }

    pub fn names(&self) -> &[String] {
        match self {
            TextSource::Prompted { table, .. } => &table.names,
            TextSource::Fixed { names, .. } => names,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub ablation: Ablation,
    pub params: ModelParams,
    pub text: TextSource,
}

/// Gradients shaped like [`ModelParams`], plus `dL/dF_t` for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    /// Gradient w.r.t. the text embeddings entering the decoder (N×C).
    pub text_embeddings: Mat,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.params
            .tensors()
            .iter()
            .flat_map(|t| t.3.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub struct ForwardCache {
    text: Mat,
    text_cache: Option<TextCache>,
    fused: Mat,
    fuse_cache: FuseCache,
    fv: Mat,
    decode_cache: DecodeCache,
    refined: Mat,
}

impl Model {
    /// Fresh model with the stub text encoder.
    pub fn new(dims: ModelDims, ablation: Ablation, table: ClassTokenTable, seed: u64) -> Result<Self> {
        if table.len() != dims.n_classes || table.token_dim() != dims.c_t {
            return Err(Error::shape(format!(
                "class table is {}x{}, dims expect {}x{}",
                table.len(),
                table.token_dim(),
                dims.n_classes,
                dims.c_t
            )));
        }
        let encoder = StubTextEncoder::new(dims.c_t, dims.c, crate::rng::derive_seed(seed, "text-encoder"));
        Ok(Model {
            dims,
            ablation,
            params: ModelParams::init(&dims, &ablation, seed)?,
            text: TextSource::Prompted { table, encoder },
        })
    }

    /// Fresh model over precomputed text embeddings (`N × C`).
    pub fn with_fixed_text(
        dims: ModelDims,
        ablation: Ablation,
        names: Vec<String>,
        embeddings: TextEmbeddings,
        seed: u64,
    ) -> Result<Self> {
        if embeddings.0.shape() != (dims.n_classes, dims.c) || names.len() != dims.n_classes {
            return Err(Error::shape("precomputed text embeddings do not match dims"));
        }
        Ok(Model {
            dims,
            ablation,
            params: ModelParams::init(&dims, &ablation, seed)?,
            text: TextSource::Fixed { names, embeddings },
        })
    }

    pub fn text_embeddings(&self) -> Result<TextEmbeddings> {
        self.encode_text().map(|(t, _)| TextEmbeddings(t))
    }

    fn encode_text(&self) -> Result<(Mat, Option<TextCache>)> {
        match &self.text {
            TextSource::Prompted { table, encoder } => {
                let ctx = (!self.ablation.tpl).then_some(&self.params.ctx);
                let (t, cache) = encode_texts_cached(ctx, table, encoder)?;
                Ok((t.0, Some(cache)))
            }
            TextSource::Fixed { embeddings, .. } => Ok((embeddings.0.clone(), None)),
        }
    }

    pub fn forward_cached(&self, stack: &FeatureStack) -> Result<(Prediction, ForwardCache)> {
        let (text, text_cache) = self.encode_text()?;
        let (fused, fuse_cache) = fuse_cached(stack, &self.params.fp)?;
        let fv = embed(&fused, &self.params.emb)?;
        let (refined, decode_cache) = decode_cached(
            &text,
            &fv,
            &stack.cls,
            &self.params.dp,
            self.ablation.mask_mode(),
        )?;
        let pred = predict(&fv, &refined, stack.grid, stack.image_size)?;
        Ok((
            pred,
            ForwardCache {
                text,
                text_cache,
                fused,
                fuse_cache,
                fv,
                decode_cache,
                refined,
            },
        ))
    }

    pub fn forward(&self, stack: &FeatureStack) -> Result<Prediction> {
        self.forward_cached(stack).map(|(p, _)| p)
    }

    pub fn loss(&self, stack: &FeatureStack, target: &AffordanceTarget) -> Result<f64> {
        bce_loss(&self.forward(stack)?, target)
    }

    /// BCE loss and exact gradients of every trainable tensor for one image.
    pub fn loss_and_grad(
        &self,
        stack: &FeatureStack,
        target: &AffordanceTarget,
    ) -> Result<(f64, Gradients)> {
        let (pred, cache) = self.forward_cached(stack)?;
        let loss = bce_loss(&pred, target)?;
        let dz = bce_grad_logits(&pred, target)?;
        let (mut d_fv, d_refined) = predict_backward(&cache.fv, &cache.refined, &pred, &dz)?;
        let (layer_grads, d_text, d_fv_dec) =
            decode_backward(&cache.decode_cache, &cache.fv, &stack.cls, &self.params.dp, &d_refined)?;
        d_fv.axpy(1.0, &d_fv_dec)?;
        let (d_we, d_be, d_fused) = embed_backward(&cache.fused, &self.params.emb, &d_fv)?;
        let (d_proj, d_alpha) = fuse_backward(stack, &cache.fuse_cache, &d_fused)?;
        let d_ctx = match (&self.text, &cache.text_cache) {
            (TextSource::Prompted { encoder, .. }, Some(tc)) if !self.ablation.tpl => {
                encode_texts_backward(tc, &d_text, encoder)?
            }
            _ => Mat::zeros(self.params.ctx.v.rows(), self.params.ctx.v.cols()),
        };
        debug_assert!(cache.text.same_shape(&d_text));

        let mut g = self.params.zeros_like();
        g.ctx.v = d_ctx;
        g.fp.proj = d_proj;
        g.fp.alpha_logits = d_alpha;
        g.emb.w = d_we;
        g.emb.b = d_be;
        for (gl, lg) in g.dp.layers.iter_mut().zip(layer_grads) {
            gl.wq = lg.wq;
            gl.wk = lg.wk;
            gl.wv = lg.wv;
            gl.wc = lg.wc;
            gl.w1 = lg.w1;
            gl.b1 = lg.b1;
            gl.w2 = lg.w2;
            gl.b2 = lg.b2;
        }
        for (name, _, _, vals) in g.tensors() {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok((
            loss,
            Gradients {
                params: g,
                text_embeddings: d_text,
            },
        ))
    }
}

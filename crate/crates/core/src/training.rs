//! BCE objective, plain SGD, the one-shot training loop and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{self, put_f64s, put_u32, Reader, PARAM_CONTAINER_VERSION};
use crate::data::{AffordanceTarget, LoadedItem};
use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::features::ClassTokenTable;
use crate::linalg::{sigmoid, Mat};
use crate::model::{Ablation, Gradients, Model, ModelDims, ModelParams, TextSource};
use crate::prompt::{StubTextEncoder, TextEmbeddings};
use crate::rng;

/// Keeps `ln` finite at saturated sigmoids.
pub const BCE_EPS: f64 = 1e-12;

fn check_pair(pred: &Prediction, target: &AffordanceTarget) -> Result<()> {
    let (h, w) = pred.image_size;
    if (h, w, pred.n_classes()) != (target.height, target.width, target.n_classes) {
        return Err(Error::shape(format!(
            "prediction is {h}x{w}x{}, target is {}x{}x{}",
            pred.n_classes(),
            target.height,
            target.width,
            target.n_classes
        )));
    }
    Ok(())
}

/// `(s, 1−s)` per pixel, with `1−s` taken as `sigmoid(−z)` so it keeps its
/// precision when `s` rounds to 1.
fn scores_and_complements<'a>(pred: &'a Prediction) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.upsampled
        .iter()
        .zip(&pred.upsampled_logits)
        .map(|(&s, &z)| (s, sigmoid(-z)))
}

/// Mean over all pixels and classes of `−[y·ln(s+ε) + (1−y)·ln(1−s+ε)]`.
pub fn bce_loss(pred: &Prediction, target: &AffordanceTarget) -> Result<f64> {
    check_pair(pred, target)?;
    let total: f64 = scores_and_complements(pred)
        .zip(&target.values)
        .map(|((s, c), &y)| -(y * (s + BCE_EPS).ln() + (1.0 - y) * (c + BCE_EPS).ln()))
        .sum();
    Ok(total / target.values.len() as f64)
}

/// `dL/dz` for every upsampled logit `z`, with `s = sigmoid(z)`.
pub fn bce_grad_logits(pred: &Prediction, target: &AffordanceTarget) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let inv_n = 1.0 / target.values.len() as f64;
    Ok(scores_and_complements(pred)
        .zip(&target.values)
        .map(|((s, c), &y)| -(y / (s + BCE_EPS) - (1.0 - y) / (c + BCE_EPS)) * s * c * inv_n)
        .collect())
}

/// `θ ← θ − lr·g` for every tensor.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    if !params.same_shapes(&grads.params) {
        return Err(Error::shape("gradient shapes differ from parameter shapes"));
    }
    let g = grads.params.tensors();
    for ((_, theta), (_, _, _, gv)) in params.tensors_mut().into_iter().zip(g) {
        for (t, d) in theta.iter_mut().zip(gv) {
            *t -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub p: usize,
    pub j: usize,
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "C_t")]
    pub c_t: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            iterations: 2000,
            seed: 0,
            p: 8,
            j: 3,
            t: 2,
            c: 32,
            c_t: 64,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be >= 1".into()));
        }
        if self.p == 0 || self.j == 0 || self.c == 0 || self.c_t == 0 {
            return Err(Error::InvalidArgument("p, j, C and C_t must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self, c_v: usize, n_classes: usize) -> ModelDims {
        ModelDims {
            p: self.p,
            j: self.j,
            t: self.t,
            c: self.c,
            c_t: self.c_t,
            c_v,
            n_classes,
        }
    }
}

/// Frozen text input handed to the trainer.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(ClassTokenTable),
    Embeddings {
        names: Vec<String>,
        embeddings: TextEmbeddings,
    },
}

/// `(iteration, loss)` rows, recorded every `log_every` iterations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossLog {
    pub entries: Vec<(usize, f64)>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in &self.entries {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

pub fn init_model(
    cfg: &TrainConfig,
    c_v: usize,
    text: TextInput,
    ablation: Ablation,
) -> Result<Model> {
    cfg.validate()?;
    let seed = rng::derive_seed(cfg.seed, "model");
    match text {
        TextInput::Tokens(table) => {
            let dims = cfg.dims(c_v, table.len());
            Model::new(dims, ablation, table, seed)
        }
        TextInput::Embeddings { names, embeddings } => {
            let dims = cfg.dims(c_v, names.len());
            Model::with_fixed_text(dims, ablation, names, embeddings, seed)
        }
    }
}

/// Trains from a fresh initialisation. Deterministic given `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    trainset: &[LoadedItem],
    text: TextInput,
    ablation: Ablation,
) -> Result<(Model, LossLog)> {
    let first = trainset
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let mut model = init_model(cfg, first.stack.channels(), text, ablation)?;
    let log = train_model(cfg, &mut model, trainset)?;
    Ok((model, log))
}

/// Runs `cfg.iterations` SGD steps on `model`, one image per step. Images are
/// visited in a reshuffled order each pass over the set.
pub fn train_model(cfg: &TrainConfig, model: &mut Model, trainset: &[LoadedItem]) -> Result<LossLog> {
    cfg.validate()?;
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut shuffle = rng::stream(cfg.seed, "train/shuffle");
    let mut order: Vec<usize> = Vec::new();
    let mut log = LossLog::default();
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..trainset.len()).collect();
            order.shuffle(&mut shuffle);
            order.reverse();
        }
        let item = &trainset[order.pop().expect("refilled above")];
        let (loss, grads) = model.loss_and_grad(&item.stack, &item.target)?;
        if it % cfg.log_every == 0 {
            log.entries.push((it, loss));
        }
        sgd_step(&mut model.params, &grads, cfg.lr)?;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TextKind {
    Prompted,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    dims: ModelDims,
    ablation: Ablation,
    class_names: Vec<String>,
    text: TextKind,
    text_encoder_seed: Option<u64>,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, r, c, v)| (n, r, c, v.to_vec()))
        .collect();
    let (kind, enc_seed) = match &model.text {
        TextSource::Prompted { table, encoder } => {
            let t = &table.tokens;
            tensors.push(("frozen.class_tokens".into(), t.rows(), t.cols(), t.as_slice().to_vec()));
            let w = encoder.projection();
            tensors.push(("frozen.text_projection".into(), w.rows(), w.cols(), w.as_slice().to_vec()));
            (TextKind::Prompted, Some(encoder.seed()))
        }
        TextSource::Fixed { embeddings, .. } => {
            let e = &embeddings.0;
            tensors.push(("frozen.text_embeddings".into(), e.rows(), e.cols(), e.as_slice().to_vec()));
            (TextKind::Fixed, None)
        }
    };
    let manifest = CheckpointManifest {
        dims: model.dims,
        ablation: model.ablation,
        class_names: model.text.names().to_vec(),
        text: kind,
        text_encoder_seed: enc_seed,
        tensors: tensors
            .iter()
            .map(|(n, r, c, _)| TensorEntry {
                name: n.clone(),
                rows: *r,
                cols: *c,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(container::MAGIC);
    put_u32(&mut out, 0);
    put_u32(&mut out, PARAM_CONTAINER_VERSION);
    put_u32(&mut out, container::dim_u32(json.len(), "manifest length")?);
    out.extend_from_slice(&json);
    for (_, _, _, v) in &tensors {
        put_f64s(&mut out, v);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &checkpoint_bytes(model)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    r.expect_magic()?;
    let marker = r.u32().map_err(|_| Error::Corruption("truncated header".into()))?;
    if marker != 0 {
        return Err(Error::Format(
            "this is a feature stack, not a parameter container".into(),
        ));
    }
    let version = r.u32().map_err(|_| Error::Corruption("truncated header".into()))?;
    if version != PARAM_CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {PARAM_CONTAINER_VERSION}"
        )));
    }
    let len = r.u32().map_err(|_| Error::Corruption("truncated header".into()))? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Corruption(format!("bad parameter manifest: {e}")))?;
    let payload: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if r.remaining() != payload * 8 {
        return Err(Error::Corruption(format!(
            "manifest implies {} payload bytes, file has {}",
            payload * 8,
            r.remaining()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        tensors.push((t, r.f64s(t.rows * t.cols)?));
    }

    let dims = manifest.dims;
    let mut params = ModelParams::init(&dims, &manifest.ablation, 0)?;
    let slots = params.tensors_mut();
    if slots.len() + 2 - usize::from(manifest.text == TextKind::Fixed) != tensors.len() {
        return Err(Error::Corruption("tensor count does not match dims".into()));
    }
    let mut rest = tensors.split_off(slots.len());
    for ((name, slot), (entry, values)) in slots.into_iter().zip(tensors) {
        if entry.name != name || values.len() != slot.len() {
            return Err(Error::Corruption(format!(
                "tensor `{}` ({} values) where `{name}` ({} values) was expected",
                entry.name,
                values.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&values);
    }
    let take = |rest: &mut Vec<(&TensorEntry, Vec<f64>)>, name: &str| -> Result<Mat> {
        if rest.is_empty() || rest[0].0.name != name {
            return Err(Error::Corruption(format!("missing frozen tensor `{name}`")));
        }
        let (e, v) = rest.remove(0);
        Mat::from_vec(e.rows, e.cols, v)
    };
    let text = match manifest.text {
        TextKind::Prompted => {
            let tokens = take(&mut rest, "frozen.class_tokens")?;
            let w = take(&mut rest, "frozen.text_projection")?;
            let seed = manifest
                .text_encoder_seed
                .ok_or_else(|| Error::Corruption("prompted checkpoint without encoder seed".into()))?;
            if w.shape() != (dims.c_t, dims.c) {
                return Err(Error::Corruption("text projection shape differs from dims".into()));
            }
            TextSource::Prompted {
                table: ClassTokenTable::new(manifest.class_names, tokens)?,
                encoder: StubTextEncoder::from_parts(w, seed),
            }
        }
        TextKind::Fixed => TextSource::Fixed {
            names: manifest.class_names,
            embeddings: TextEmbeddings(take(&mut rest, "frozen.text_embeddings")?),
        },
    };
    if text.n_classes() != dims.n_classes {
        return Err(Error::Corruption("class count differs from dims".into()));
    }
    Ok(Model {
        dims,
        ablation: manifest.ablation,
        params,
        text,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    checkpoint_from_bytes(&container::read_file(path.as_ref())?)
}

/// Loads a checkpoint and checks it against the architecture `cfg` describes.
pub fn load_checkpoint_for(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    let d = model.dims;
    let want = (cfg.p, cfg.j, cfg.t, cfg.c, cfg.c_t);
    let have = (d.p, d.j, d.t, d.c, d.c_t);
    if want != have {
        return Err(Error::shape(format!(
            "checkpoint has (p, j, t, C, C_t) = {have:?}, config expects {want:?}"
        )));
    }
    Ok(model)
}

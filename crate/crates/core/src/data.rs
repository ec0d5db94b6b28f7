//! Ground truth and dataset handling.
//!
//! A dataset is described by a JSON manifest:
//!
//! ```json
//! {
//!   "affordances": ["grasp", "cut"],
//!   "text": { "kind": "synthetic", "dim": 64, "seed": 7 },
//!   "objects": [ { "id": "knife", "novel": false }, { "id": "saw", "novel": true } ],
//!   "items": [
//!     { "id": "knife_0", "object": "knife", "features": "features/knife_0.ooal",
//!       "annotation": { "kind": "dense", "path": "targets/knife_0.ooal" } },
//!     { "id": "saw_0", "object": "saw", "features": "features/saw_0.ooal",
//!       "annotation": { "kind": "keypoints", "sigma": 10.0,
//!                       "points": [ [[12.0, 30.5]], [] ] } }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. `text` may also be
//! `{ "kind": "embeddings", "path": "text.ooal" }` for precomputed `N × C`
//! text embeddings. Dense masks and text embeddings use the `OOALFT01`
//! feature container with a single layer.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    load_features, save_features, synth_text_tokens, synth_vision_encode_variant, ClassTokenTable,
    FeatureStack, SynthWorldSpec,
};
use crate::linalg::Mat;
use crate::prompt::TextEmbeddings;
use crate::resample::Bilinear;
use crate::rng;

/// Default Gaussian width in pixels for keypoint densification.
pub const DEFAULT_SIGMA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    DenseBinary,
    DensifiedSparse,
}

/// Per-pixel, per-affordance ground truth, stored `[H][W][N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceTarget {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub values: Vec<f64>,
    pub kind: TargetKind,
}

impl AffordanceTarget {
    pub fn new(
        height: usize,
        width: usize,
        n_classes: usize,
        values: Vec<f64>,
        kind: TargetKind,
    ) -> Result<Self> {
        if values.len() != height * width * n_classes {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{n_classes} target",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("target value {v} outside [0, 1]")));
        }
        if kind == TargetKind::DenseBinary && values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("dense-binary target has non-binary entries".into()));
        }
        Ok(AffordanceTarget {
            height,
            width,
            n_classes,
            values,
            kind,
        })
    }

    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.n_classes).copied().collect()
    }

    /// Stores the mask as a one-layer feature stack (`L = H·W`, `C_v = N`).
    pub fn to_stack(&self) -> Result<FeatureStack> {
        let layer = Mat::from_vec(self.height * self.width, self.n_classes, self.values.clone())?;
        FeatureStack::new(
            vec![layer],
            vec![0.0; self.n_classes],
            (self.height, self.width),
            (self.height, self.width),
        )
    }

    pub fn from_stack(stack: &FeatureStack, kind: TargetKind) -> Result<Self> {
        if stack.n_layers() != 1 {
            return Err(Error::Format(format!(
                "mask file must hold one layer, found {}",
                stack.n_layers()
            )));
        }
        let (h, w) = stack.grid;
        AffordanceTarget::new(h, w, stack.channels(), stack.layers[0].as_slice().to_vec(), kind)
    }
}

/// Keypoints per affordance channel, as `(x, y)` pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub points: Vec<Vec<(f64, f64)>>,
}

/// Sum of unnormalised Gaussians per channel, divided by the channel maximum.
pub fn densify(kp: &KeypointAnnotation, sigma: f64, height: usize, width: usize) -> Result<AffordanceTarget> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let n = kp.points.len();
    for (k, pts) in kp.points.iter().enumerate() {
        for &(x, y) in pts {
            let inside = x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "keypoint ({x}, {y}) of channel {k} outside {width}x{height} image"
                )));
            }
        }
    }
    let denom = 2.0 * sigma * sigma;
    let mut values = vec![0.0; height * width * n];
    for (k, pts) in kp.points.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let mut max = 0.0f64;
        for r in 0..height {
            for c in 0..width {
                let v: f64 = pts
                    .iter()
                    .map(|&(x, y)| {
                        let d2 = (c as f64 - x).powi(2) + (r as f64 - y).powi(2);
                        (-d2 / denom).exp()
                    })
                    .sum();
                values[(r * width + c) * n + k] = v;
                max = max.max(v);
            }
        }
        if max > 0.0 {
            for r in 0..height * width {
                values[r * n + k] /= max;
            }
        }
    }
    AffordanceTarget::new(height, width, n, values, TargetKind::DensifiedSparse)
}

/// Dense binary ground truth for a synthetic object: each affordance's patch
/// indicator is upsampled with the same bilinear operator as the model head
/// and thresholded at 0.5.
pub fn synth_target(world: &SynthWorldSpec, object_id: &str) -> Result<AffordanceTarget> {
    let map = world.part_map(object_id)?;
    let n = world.affordances.len();
    let mut indicator = vec![0.0; map.len() * n];
    for (i, part) in map.iter().enumerate() {
        if let Some(p) = part {
            indicator[i * n + world.parts[*p].affordance] = 1.0;
        }
    }
    let up = Bilinear::new(world.grid, world.image_size).forward(&indicator, n);
    let values = up.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    AffordanceTarget::new(world.image_size.0, world.image_size.1, n, values, TargetKind::DenseBinary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Annotation {
    Dense {
        path: PathBuf,
    },
    Keypoints {
        #[serde(default = "default_sigma")]
        sigma: f64,
        points: Vec<Vec<(f64, f64)>>,
    },
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TextSpec {
    Synthetic { dim: usize, seed: u64 },
    Embeddings { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub id: String,
    pub novel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemEntry {
    pub id: String,
    pub object: String,
    pub features: PathBuf,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub affordances: Vec<String>,
    pub text: TextSpec,
    pub objects: Vec<ObjectEntry>,
    pub items: Vec<ItemEntry>,
    /// Directory relative paths resolve against; not serialised.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(true)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self, check_paths: bool) -> Result<()> {
        if self.affordances.is_empty() {
            return Err(Error::Manifest("manifest lists no affordances".into()));
        }
        let mut objects = HashMap::new();
        for o in &self.objects {
            if objects.insert(o.id.as_str(), o.novel).is_some() {
                return Err(Error::Manifest(format!(
                    "object `{}` listed twice (base and novel sets must be disjoint)",
                    o.id
                )));
            }
        }
        let mut item_ids = HashSet::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for it in &self.items {
            if !item_ids.insert(it.id.as_str()) {
                return Err(Error::Manifest(format!("item `{}` listed twice", it.id)));
            }
            if !objects.contains_key(it.object.as_str()) {
                return Err(Error::Manifest(format!(
                    "item `{}` refers to unknown object `{}`",
                    it.id, it.object
                )));
            }
            *counts.entry(it.object.as_str()).or_default() += 1;
            if let Annotation::Keypoints { points, sigma } = &it.annotation {
                if points.len() != self.affordances.len() {
                    return Err(Error::Manifest(format!(
                        "item `{}` has {} keypoint channels for {} affordances",
                        it.id,
                        points.len(),
                        self.affordances.len()
                    )));
                }
                if *sigma <= 0.0 {
                    return Err(Error::Manifest(format!("item `{}` has sigma <= 0", it.id)));
                }
            }
            if check_paths {
                let mut paths = vec![self.resolve(&it.features)];
                if let Annotation::Dense { path } = &it.annotation {
                    paths.push(self.resolve(path));
                }
                for p in paths {
                    if !p.is_file() {
                        return Err(Error::Manifest(format!(
                            "item `{}`: {} does not exist",
                            it.id,
                            p.display()
                        )));
                    }
                }
            }
        }
        for o in &self.objects {
            if counts.get(o.id.as_str()).copied().unwrap_or(0) == 0 {
                return Err(Error::Manifest(format!("object `{}` has no items", o.id)));
            }
        }
        if check_paths {
            if let TextSpec::Embeddings { path } = &self.text {
                let p = self.resolve(path);
                if !p.is_file() {
                    return Err(Error::Manifest(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn base_objects(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.objects.iter().filter(|o| !o.novel)
    }

    fn items_of<'a>(&'a self, object: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.items
            .iter()
            .enumerate()
            .filter(move |(_, it)| it.object == object)
            .map(|(i, _)| i)
    }

    /// Class tokens for the synthetic text path.
    pub fn class_tokens(&self) -> Result<Option<ClassTokenTable>> {
        match &self.text {
            TextSpec::Synthetic { dim, seed } => synth_text_tokens(&self.affordances, *dim, *seed).map(Some),
            TextSpec::Embeddings { .. } => Ok(None),
        }
    }

    /// Precomputed text embeddings, when the manifest points at them.
    pub fn text_embeddings(&self) -> Result<Option<TextEmbeddings>> {
        match &self.text {
            TextSpec::Embeddings { path } => {
                let stack = load_features(self.resolve(path))?;
                if stack.n_layers() != 1 || stack.n_patches() != self.affordances.len() {
                    return Err(Error::Format(format!(
                        "text embedding file must hold one layer of {} rows",
                        self.affordances.len()
                    )));
                }
                Ok(Some(TextEmbeddings(stack.layers[0].clone())))
            }
            TextSpec::Synthetic { .. } => Ok(None),
        }
    }

    /// Loads features and ground truth of one item.
    pub fn load_item(&self, index: usize) -> Result<LoadedItem> {
        let it = self
            .items
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("no item at index {index}")))?;
        let stack = load_features(self.resolve(&it.features))?;
        let (h, w) = stack.image_size;
        let (target, keypoints) = match &it.annotation {
            Annotation::Dense { path } => {
                let t = AffordanceTarget::from_stack(&load_features(self.resolve(path))?, TargetKind::DenseBinary)?;
                (t, None)
            }
            Annotation::Keypoints { sigma, points } => {
                let kp = KeypointAnnotation { points: points.clone() };
                (densify(&kp, *sigma, h, w)?, Some(kp))
            }
        };
        if (target.height, target.width) != (h, w) || target.n_classes != self.affordances.len() {
            return Err(Error::shape(format!(
                "item `{}`: target is {}x{}x{}, features are {h}x{w} with {} affordances",
                it.id,
                target.height,
                target.width,
                target.n_classes,
                self.affordances.len()
            )));
        }
        Ok(LoadedItem {
            id: it.id.clone(),
            object: it.object.clone(),
            stack,
            target,
            keypoints,
        })
    }

    pub fn load_items(&self, indices: &[usize]) -> Result<Vec<LoadedItem>> {
        indices.iter().map(|&i| self.load_item(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedItem {
    pub id: String,
    pub object: String,
    pub stack: FeatureStack,
    pub target: AffordanceTarget,
    pub keypoints: Option<KeypointAnnotation>,
}

/// One item per base object (indices into `manifest.items`), in base-object
/// order. A single `ChaCha8Rng::seed_from_u64(seed)` draws
/// `random_range(0..n_items)` once per base object, in manifest order.
pub fn build_oneshot_trainset(manifest: &DatasetManifest, seed: u64) -> Result<Vec<usize>> {
    let mut r = rng::Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for o in manifest.base_objects() {
        let items: Vec<usize> = manifest.items_of(&o.id).collect();
        if items.is_empty() {
            return Err(Error::Manifest(format!("base object `{}` has no items", o.id)));
        }
        out.push(items[r.random_range(0..items.len())]);
    }
    Ok(out)
}

/// `(seen, unseen)` item indices: all base-object items except the one-shot
/// training items, and all novel-object items.
pub fn split_eval_sets(manifest: &DatasetManifest, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let train: HashSet<usize> = build_oneshot_trainset(manifest, seed)?.into_iter().collect();
    let novel: HashSet<&str> = manifest
        .objects
        .iter()
        .filter(|o| o.novel)
        .map(|o| o.id.as_str())
        .collect();
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for (i, it) in manifest.items.iter().enumerate() {
        if novel.contains(it.object.as_str()) {
            unseen.push(i);
        } else if !train.contains(&i) {
            seen.push(i);
        }
    }
    Ok((seen, unseen))
}

/// Options for [`write_synthetic_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetOptions {
    pub items_per_object: u32,
    pub noise_scale: f64,
    pub token_dim: usize,
    pub token_seed: u64,
}

impl Default for SynthDatasetOptions {
    fn default() -> Self {
        SynthDatasetOptions {
            items_per_object: 3,
            noise_scale: 0.05,
            token_dim: 64,
            token_seed: 0,
        }
    }
}

/// Writes `world.json`, `manifest.json`, `features/*.ooal` and
/// `targets/*.ooal` under `dir`. Returns the manifest.
pub fn write_synthetic_dataset(
    world: &SynthWorldSpec,
    dir: impl AsRef<Path>,
    opts: &SynthDatasetOptions,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["features", "targets"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let world_path = dir.join("world.json");
    std::fs::write(&world_path, serde_json::to_string_pretty(world)?)
        .map_err(|e| Error::io(&world_path, e))?;

    let mut items = Vec::new();
    for o in &world.objects {
        let target = synth_target(world, &o.id)?;
        let target_rel = PathBuf::from(format!("targets/{}.ooal", o.id));
        save_features(&target.to_stack()?, dir.join(&target_rel))?;
        for v in 0..opts.items_per_object {
            let id = format!("{}_{v}", o.id);
            let stack = synth_vision_encode_variant(world, &o.id, v, opts.noise_scale)?;
            let feat_rel = PathBuf::from(format!("features/{id}.ooal"));
            save_features(&stack, dir.join(&feat_rel))?;
            items.push(ItemEntry {
                id,
                object: o.id.clone(),
                features: feat_rel,
                annotation: Annotation::Dense {
                    path: target_rel.clone(),
                },
            });
        }
    }
    let manifest = DatasetManifest {
        affordances: world.affordances.clone(),
        text: TextSpec::Synthetic {
            dim: opts.token_dim,
            seed: opts.token_seed,
        },
        objects: world
            .objects
            .iter()
            .map(|o| ObjectEntry {
                id: o.id.clone(),
                novel: o.novel,
            })
            .collect(),
        items,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.json"))?;
    manifest.validate(true)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(points: Vec<Vec<(f64, f64)>>) -> KeypointAnnotation {
        KeypointAnnotation { points }
    }

    #[test]
    fn single_point_peak_and_symmetry() {
        let t = densify(&kp(vec![vec![(5.0, 5.0)]]), 2.0, 11, 11).unwrap();
        let at = |r: usize, c: usize| t.values[r * 11 + c];
        assert_eq!(at(5, 5), 1.0);
        assert_eq!(at(5, 3), at(5, 7));
        assert_eq!(at(3, 5), at(7, 5));
        assert_eq!(at(3, 5), at(5, 3));
        assert!(at(5, 4) < 1.0 && at(5, 3) < at(5, 4));
    }

    #[test]
    fn empty_channel_stays_zero() {
        let t = densify(&kp(vec![vec![(1.0, 1.0)], vec![]]), 2.0, 4, 4).unwrap();
        assert!(t.channel(1).iter().all(|&v| v == 0.0));
        assert_eq!(t.kind, TargetKind::DensifiedSparse);
    }

    #[test]
    fn two_point_midpoint_closed_form() {
        let t = densify(&kp(vec![vec![(5.0, 10.0), (15.0, 10.0)]]), 2.0, 21, 21).unwrap();
        let peak = 1.0 + (-100.0f64 / 8.0).exp();
        let expect = 2.0 * (-25.0f64 / 8.0).exp() / peak;
        assert!((t.values[10 * 21 + 10] - expect).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_keypoint() {
        assert!(densify(&kp(vec![vec![(4.0, 0.0)]]), 2.0, 4, 4).is_err());
        assert!(densify(&kp(vec![vec![(0.0, -0.5)]]), 2.0, 4, 4).is_err());
        assert!(densify(&kp(vec![vec![(0.0, 0.0)]]), 0.0, 4, 4).is_err());
    }

    #[test]
    fn three_sigma_falls_off() {
        let t = densify(&kp(vec![vec![(10.0, 10.0)]]), 1.0, 21, 21).unwrap();
        assert!(t.values[10 * 21 + 13] < 0.012);
    }

    #[test]
    fn target_validation() {
        assert!(AffordanceTarget::new(1, 2, 1, vec![0.0, 0.5], TargetKind::DenseBinary).is_err());
        assert!(AffordanceTarget::new(1, 2, 1, vec![0.0, 1.5], TargetKind::DensifiedSparse).is_err());
        assert!(AffordanceTarget::new(1, 2, 1, vec![0.0], TargetKind::DensifiedSparse).is_err());
    }

    fn manifest(objects: &[(&str, bool, usize)]) -> DatasetManifest {
        let mut items = Vec::new();
        for (id, _, n) in objects {
            for v in 0..*n {
                items.push(ItemEntry {
                    id: format!("{id}_{v}"),
                    object: id.to_string(),
                    features: PathBuf::from(format!("{id}_{v}.ooal")),
                    annotation: Annotation::Dense {
                        path: PathBuf::from("m.ooal"),
                    },
                });
            }
        }
        DatasetManifest {
            affordances: vec!["grasp".into()],
            text: TextSpec::Synthetic { dim: 8, seed: 0 },
            objects: objects
                .iter()
                .map(|(id, novel, _)| ObjectEntry {
                    id: id.to_string(),
                    novel: *novel,
                })
                .collect(),
            items,
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn single_item_object_always_chosen() {
        let m = manifest(&[("a", false, 1), ("b", false, 4)]);
        for seed in 0..20 {
            assert_eq!(build_oneshot_trainset(&m, seed).unwrap()[0], 0);
        }
    }

    #[test]
    fn no_novel_objects_gives_empty_unseen() {
        let m = manifest(&[("a", false, 3), ("b", false, 2)]);
        let (seen, unseen) = split_eval_sets(&m, 1).unwrap();
        assert!(unseen.is_empty());
        assert_eq!(seen.len(), 3);
        let train = build_oneshot_trainset(&m, 1).unwrap();
        assert!(train.iter().all(|t| !seen.contains(t)));
    }

    #[test]
    fn manifest_validation_errors() {
        let mut m = manifest(&[("a", false, 1)]);
        m.objects.push(ObjectEntry {
            id: "a".into(),
            novel: true,
        });
        assert!(m.validate(false).is_err());
        let mut m = manifest(&[("a", false, 1)]);
        m.objects.push(ObjectEntry {
            id: "empty".into(),
            novel: true,
        });
        assert!(m.validate(false).is_err());
        let m = manifest(&[("a", false, 1)]);
        assert!(m.validate(true).is_err(), "paths do not exist");
        assert!(m.validate(false).is_ok());
    }
}

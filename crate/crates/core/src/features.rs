//! Frozen feature sources: the feature-stack container, its file format, and
//! deterministic synthetic vision/text encoders.
//!
//! The synthetic vision encoder plants part signatures on a patch grid. Every
//! object is background plus a few rectangular parts; each part has a fixed
//! random signature shared by every object that carries it, so a novel object
//! built from base parts is recognisable through patch-level correspondence.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{self, dim_u32, put_f64s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::linalg::{cosine, l2_norm, Mat};
use crate::rng;

/// Multi-layer patch features of one image plus its `[CLS]` token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// `n_layers` matrices of shape `L × C_v`; the last entry is the deepest layer.
    pub layers: Vec<Mat>,
    pub cls: Vec<f64>,
    /// Patch grid `(h_p, w_p)`.
    pub grid: (usize, usize),
    /// Image size `(H, W)` in pixels.
    pub image_size: (usize, usize),
}

impl FeatureStack {
    pub fn new(
        layers: Vec<Mat>,
        cls: Vec<f64>,
        grid: (usize, usize),
        image_size: (usize, usize),
    ) -> Result<Self> {
        let stack = FeatureStack {
            layers,
            cls,
            grid,
            image_size,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("feature stack needs at least one layer".into()))?;
        let (l, c) = first.shape();
        if l != self.grid.0 * self.grid.1 {
            return Err(Error::shape(format!(
                "{l} patches do not fill a {}x{} grid",
                self.grid.0, self.grid.1
            )));
        }
        if l == 0 || c == 0 {
            return Err(Error::shape("empty feature layer"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::shape("zero image size"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.shape() != (l, c) {
                return Err(Error::shape(format!(
                    "layer {i} is {:?}, layer 0 is {:?}",
                    layer.shape(),
                    (l, c)
                )));
            }
            if !layer.is_finite() {
                return Err(Error::NonFinite(format!("feature layer {i}")));
            }
        }
        if self.cls.len() != c {
            return Err(Error::shape(format!("cls has {} entries, C_v = {c}", self.cls.len())));
        }
        if self.cls.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cls token".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_patches(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn channels(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn last_layer(&self) -> &Mat {
        self.layers.last().expect("validated stack has layers")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(
            8 + 28 + 8 * (self.n_layers() * self.n_patches() * self.channels() + self.channels()),
        );
        out.extend_from_slice(container::MAGIC);
        for (v, what) in [
            (self.n_layers(), "n_layers"),
            (self.n_patches(), "L"),
            (self.channels(), "C_v"),
            (self.grid.0, "h_p"),
            (self.grid.1, "w_p"),
            (self.image_size.0, "H"),
            (self.image_size.1, "W"),
        ] {
            put_u32(&mut out, dim_u32(v, what)?);
        }
        for layer in &self.layers {
            put_f64s(&mut out, layer.as_slice());
        }
        put_f64s(&mut out, &self.cls);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic()?;
        let mut header = [0usize; 7];
        for h in header.iter_mut() {
            *h = r
                .u32()
                .map_err(|_| Error::Corruption("truncated header".into()))? as usize;
        }
        let [n_layers, l, c, hp, wp, h, w] = header;
        if n_layers == 0 {
            return Err(Error::Format(
                "n_layers = 0: this is a parameter container, not a feature stack".into(),
            ));
        }
        if l != hp * wp {
            return Err(Error::Corruption(format!("header L = {l} but grid is {hp}x{wp}")));
        }
        let expected = n_layers
            .checked_mul(l)
            .and_then(|v| v.checked_mul(c))
            .and_then(|v| v.checked_add(c))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Corruption("header dimensions overflow".into()))?;
        if r.remaining() != expected {
            return Err(Error::Corruption(format!(
                "header implies {expected} payload bytes, file has {}",
                r.remaining()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(Mat::from_vec(l, c, r.f64s(l * c)?)?);
        }
        let cls = r.f64s(c)?;
        FeatureStack::new(layers, cls, (hp, wp), (h, w))
            .map_err(|e| Error::Corruption(format!("invalid stack: {e}")))
    }
}

pub fn save_features(stack: &FeatureStack, path: impl AsRef<Path>) -> Result<()> {
    stack.validate()?;
    container::write_file(path.as_ref(), &stack.to_bytes()?)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureStack> {
    FeatureStack::from_bytes(&container::read_file(path.as_ref())?)
}

/// Affordance vocabulary with one token embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTokenTable {
    pub names: Vec<String>,
    /// `N × C_t`
    pub tokens: Mat,
}

impl ClassTokenTable {
    pub fn new(names: Vec<String>, tokens: Mat) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("class table needs at least one name".into()));
        }
        if tokens.rows() != names.len() {
            return Err(Error::shape(format!(
                "{} names but {} token rows",
                names.len(),
                tokens.rows()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateName(n.clone()));
            }
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite("class tokens".into()));
        }
        Ok(ClassTokenTable { names, tokens })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Deterministic unit-norm token per class name. The row depends only on
/// `(name, C_t, seed)`, so equal names always map to equal rows.
pub fn synth_text_tokens(names: &[String], c_t: usize, seed: u64) -> Result<ClassTokenTable> {
    if c_t == 0 {
        return Err(Error::InvalidArgument("C_t must be positive".into()));
    }
    let mut tokens = Mat::zeros(names.len(), c_t);
    for (i, name) in names.iter().enumerate() {
        let mut r = rng::stream(seed, &format!("text-token/{name}"));
        let mut v = rng::gaussian_vec(&mut r, c_t, 1.0);
        let n = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        tokens.row_mut(i).copy_from_slice(&v);
    }
    ClassTokenTable::new(names.to_vec(), tokens)
}

/// A planted part: a signature vector and the affordance it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub signature: Vec<f64>,
    pub affordance: usize,
}

/// Rectangle `[row0, row1) × [col0, col1)` on the patch grid covered by a part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub part: usize,
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Placement {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }

    fn overlaps(&self, o: &Placement) -> bool {
        self.row0 < o.row1 && o.row0 < self.row1 && self.col0 < o.col1 && o.col0 < self.col1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub id: String,
    pub placements: Vec<Placement>,
    pub novel: bool,
}

/// Complete description of a synthetic world; serialisable so a generated
/// world can be stored next to its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldSpec {
    pub seed: u64,
    pub affordances: Vec<String>,
    pub parts: Vec<PartSpec>,
    pub background: Vec<f64>,
    pub objects: Vec<SynthObject>,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
    pub n_layers: usize,
}

/// Knobs for [`SynthWorldSpec::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_base: usize,
    pub n_novel: usize,
    pub n_parts: usize,
    pub feature_dim: usize,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
    pub n_layers: usize,
    pub affordances: Vec<String>,
}

/// The seven UMD part-affordance names.
pub const UMD_AFFORDANCES: [&str; 7] = [
    "grasp",
    "cut",
    "scoop",
    "contain",
    "pound",
    "support",
    "wrap-grasp",
];

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_base: 8,
            n_novel: 2,
            n_parts: 4,
            feature_dim: 32,
            grid: (8, 8),
            image_size: (22, 22),
            n_layers: 4,
            affordances: UMD_AFFORDANCES[..4].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SynthWorldSpec {
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        if cfg.n_parts == 0 || cfg.affordances.is_empty() {
            return Err(Error::InvalidArgument("world needs parts and affordances".into()));
        }
        if cfg.n_layers == 0 || cfg.feature_dim < 2 {
            return Err(Error::InvalidArgument("need n_layers >= 1 and feature_dim >= 2".into()));
        }
        let (hp, wp) = cfg.grid;
        if hp < 3 || wp < 3 {
            return Err(Error::InvalidArgument("patch grid must be at least 3x3".into()));
        }
        let c = cfg.feature_dim;
        let scale = (c as f64).sqrt();
        let mut sig_rng = rng::stream(cfg.seed, "world/signatures");
        let unit_scaled = |r: &mut rng::Rng| {
            let mut v = rng::gaussian_vec(r, c, 1.0);
            let n = l2_norm(&v);
            v.iter_mut().for_each(|x| *x *= scale / n);
            v
        };
        // Redraw until all signatures (background included) are far from collinear.
        let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_parts + 1);
        let mut attempts = 0;
        while sigs.len() < cfg.n_parts + 1 {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArgument(
                    "could not draw non-collinear part signatures; raise feature_dim".into(),
                ));
            }
            let cand = unit_scaled(&mut sig_rng);
            if sigs.iter().all(|s| cosine(s, &cand).abs() < 0.5) {
                sigs.push(cand);
            }
        }
        let background = sigs.remove(0);
        let n_aff = cfg.affordances.len();
        let parts = sigs
            .into_iter()
            .enumerate()
            .map(|(i, signature)| PartSpec {
                name: format!("part{i}"),
                signature,
                affordance: i % n_aff,
            })
            .collect();

        let mut layout_rng = rng::stream(cfg.seed, "world/layout");
        let mut objects = Vec::with_capacity(cfg.n_base + cfg.n_novel);
        for i in 0..cfg.n_base + cfg.n_novel {
            let novel = i >= cfg.n_base;
            let id = if novel {
                format!("novel{:02}", i - cfg.n_base)
            } else {
                format!("base{i:02}")
            };
            // Base objects cycle through parts so every part is seen in training.
            let mut chosen = vec![if novel {
                layout_rng.random_range(0..cfg.n_parts)
            } else {
                i % cfg.n_parts
            }];
            let extra = if cfg.n_parts > 1 {
                layout_rng.random_range(1..=2.min(cfg.n_parts - 1))
            } else {
                0
            };
            let mut others: Vec<usize> = (0..cfg.n_parts).filter(|p| *p != chosen[0]).collect();
            others.shuffle(&mut layout_rng);
            chosen.extend(others.into_iter().take(extra));
            let placements = place_parts(&chosen, cfg.grid, &mut layout_rng);
            objects.push(SynthObject {
                id,
                placements,
                novel,
            });
        }

        let spec = SynthWorldSpec {
            seed: cfg.seed,
            affordances: cfg.affordances.clone(),
            parts,
            background,
            objects,
            grid: cfg.grid,
            image_size: cfg.image_size,
            n_layers: cfg.n_layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.parts.iter().enumerate() {
            if a.affordance >= self.affordances.len() {
                return Err(Error::InvalidArgument(format!(
                    "part {i} has affordance index {} but only {} affordances exist",
                    a.affordance,
                    self.affordances.len()
                )));
            }
            if a.signature.len() != self.background.len() {
                return Err(Error::shape(format!("part {i} signature length differs")));
            }
            for b in &self.parts[i + 1..] {
                if cosine(&a.signature, &b.signature).abs() > 1.0 - 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "parts `{}` and `{}` are collinear",
                        a.name, b.name
                    )));
                }
            }
        }
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(&o.id) {
                return Err(Error::DuplicateName(o.id.clone()));
            }
            for p in &o.placements {
                if p.part >= self.parts.len() || p.row1 > self.grid.0 || p.col1 > self.grid.1 {
                    return Err(Error::InvalidArgument(format!(
                        "object `{}` has an out-of-range placement",
                        o.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, id: &str) -> Result<&SynthObject> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::UnknownObject(id.to_string()))
    }

    pub fn feature_dim(&self) -> usize {
        self.background.len()
    }

    /// Part index per patch (row-major), `None` for background. Later
    /// placements win where rectangles overlap.
    pub fn part_map(&self, object_id: &str) -> Result<Vec<Option<usize>>> {
        let obj = self.object(object_id)?;
        let (hp, wp) = self.grid;
        let mut map = vec![None; hp * wp];
        for p in &obj.placements {
            for r in p.row0..p.row1 {
                for c in p.col0..p.col1 {
                    map[r * wp + c] = Some(p.part);
                }
            }
        }
        Ok(map)
    }
}

fn place_parts(parts: &[usize], grid: (usize, usize), r: &mut rng::Rng) -> Vec<Placement> {
    let (hp, wp) = grid;
    let max_h = (hp / 2).max(2);
    let max_w = (wp / 2).max(2);
    let mut placed: Vec<Placement> = Vec::new();
    for &part in parts {
        for _ in 0..200 {
            let h = r.random_range(2..=max_h);
            let w = r.random_range(2..=max_w);
            let row0 = r.random_range(0..=hp - h);
            let col0 = r.random_range(0..=wp - w);
            let cand = Placement {
                part,
                row0,
                row1: row0 + h,
                col0,
                col1: col0 + w,
            };
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                placed.push(cand);
                break;
            }
        }
    }
    placed
}

/// Synthetic multi-layer features for one object; equivalent to
/// [`synth_vision_encode_variant`] with variant 0.
pub fn synth_vision_encode(
    spec: &SynthWorldSpec,
    object_id: &str,
    noise_scale: f64,
) -> Result<FeatureStack> {
    synth_vision_encode_variant(spec, object_id, 0, noise_scale)
}

/// Synthetic features for one image of an object. `variant` selects an
/// independent noise draw, giving several images of the same object.
///
/// Layer `ℓ` of `n` mixes each clean patch with the mean of its 4-neighbourhood
/// using weight `λ = (ℓ+1)/n` on the patch itself, so the deepest layer is the
/// unblurred signature map and shallower layers are spatially coarser.
pub fn synth_vision_encode_variant(
    spec: &SynthWorldSpec,
    object_id: &str,
    variant: u32,
    noise_scale: f64,
) -> Result<FeatureStack> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_scale {noise_scale} must be >= 0")));
    }
    let map = spec.part_map(object_id)?;
    let (hp, wp) = spec.grid;
    let c = spec.feature_dim();
    let l = hp * wp;
    let clean: Vec<&[f64]> = map
        .iter()
        .map(|p| match p {
            Some(i) => spec.parts[*i].signature.as_slice(),
            None => spec.background.as_slice(),
        })
        .collect();

    let n = spec.n_layers;
    let mut layers = Vec::with_capacity(n);
    for layer in 0..n {
        let lambda = (layer + 1) as f64 / n as f64;
        let mut noise_rng = rng::stream(
            spec.seed,
            &format!("encode/{object_id}/{variant}/layer{layer}"),
        );
        let noise = rng::gaussian_vec(&mut noise_rng, l * c, 1.0);
        let mut m = Mat::zeros(l, c);
        for r in 0..hp {
            for col in 0..wp {
                let idx = r * wp + col;
                let mut neigh = vec![0.0; c];
                let mut count = 0.0;
                let mut add = |rr: usize, cc: usize| {
                    for (acc, v) in neigh.iter_mut().zip(clean[rr * wp + cc]) {
                        *acc += v;
                    }
                    count += 1.0;
                };
                if r > 0 {
                    add(r - 1, col);
                }
                if r + 1 < hp {
                    add(r + 1, col);
                }
                if col > 0 {
                    add(r, col - 1);
                }
                if col + 1 < wp {
                    add(r, col + 1);
                }
                let row = m.row_mut(idx);
                for k in 0..c {
                    let blurred = neigh[k] / count;
                    let mixed = if lambda == 1.0 {
                        clean[idx][k]
                    } else {
                        lambda * clean[idx][k] + (1.0 - lambda) * blurred
                    };
                    row[k] = mixed + noise_scale * noise[idx * c + k];
                }
            }
        }
        layers.push(m);
    }
    let cls: Vec<f64> = layers[n - 1].col_sums().iter().map(|v| v / l as f64).collect();
    FeatureStack::new(layers, cls, spec.grid, spec.image_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_part_world() -> SynthWorldSpec {
        let mut w = SynthWorldSpec::generate(&WorldConfig::default()).unwrap();
        w.objects.push(SynthObject {
            id: "full".into(),
            placements: vec![Placement {
                part: 1,
                row0: 0,
                row1: w.grid.0,
                col0: 0,
                col1: w.grid.1,
            }],
            novel: false,
        });
        w
    }

    #[test]
    fn zero_noise_full_cover_equals_signature() {
        let w = single_part_world();
        let s = synth_vision_encode(&w, "full", 0.0).unwrap();
        for r in 0..s.n_patches() {
            assert_eq!(s.last_layer().row(r), w.parts[1].signature.as_slice());
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let w = SynthWorldSpec::generate(&WorldConfig::default()).unwrap();
        let a = synth_vision_encode(&w, "base03", 0.05).unwrap();
        let b = synth_vision_encode(&w, "base03", 0.05).unwrap();
        assert_eq!(a, b);
        let v1 = synth_vision_encode_variant(&w, "base03", 1, 0.05).unwrap();
        assert_ne!(a, v1);
    }

    #[test]
    fn unknown_object_and_negative_noise() {
        let w = SynthWorldSpec::generate(&WorldConfig::default()).unwrap();
        assert!(matches!(
            synth_vision_encode(&w, "nope", 0.0),
            Err(Error::UnknownObject(_))
        ));
        assert!(synth_vision_encode(&w, "base00", -1.0).is_err());
    }

    #[test]
    fn zero_noise_same_part_patches_identical_within_layer() {
        let w = SynthWorldSpec::generate(&WorldConfig::default()).unwrap();
        let s = synth_vision_encode(&w, "base01", 0.0).unwrap();
        let map = w.part_map("base01").unwrap();
        let last = s.last_layer();
        let members: Vec<usize> = (0..map.len()).filter(|&i| map[i] == map[0]).collect();
        for &i in &members {
            assert_eq!(last.row(i), last.row(members[0]));
        }
    }

    #[test]
    fn shallower_layers_differ() {
        let w = SynthWorldSpec::generate(&WorldConfig::default()).unwrap();
        let s = synth_vision_encode(&w, "base02", 0.0).unwrap();
        assert_ne!(s.layers[0], s.layers[s.n_layers() - 1]);
    }

    #[test]
    fn text_tokens_are_unit_and_deterministic() {
        let t = synth_text_tokens(&["grasp".to_string()], 64, 11).unwrap();
        assert_eq!(t.tokens.shape(), (1, 64));
        assert!((l2_norm(t.tokens.row(0)) - 1.0).abs() < 1e-12);
        let names: Vec<String> = UMD_AFFORDANCES.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            synth_text_tokens(&names, 64, 3).unwrap(),
            synth_text_tokens(&names, 64, 3).unwrap()
        );
        // Same name, same row, regardless of table position.
        let a = synth_text_tokens(&["cut".into(), "grasp".into()], 16, 5).unwrap();
        let b = synth_text_tokens(&["grasp".into()], 16, 5).unwrap();
        assert_eq!(a.tokens.row(1), b.tokens.row(0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let names = vec!["cut".to_string(), "cut".to_string()];
        assert!(matches!(
            synth_text_tokens(&names, 8, 0),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn world_every_part_seen_in_base() {
        let w = SynthWorldSpec::generate(&WorldConfig::default()).unwrap();
        let seen: HashSet<usize> = w
            .objects
            .iter()
            .filter(|o| !o.novel)
            .flat_map(|o| o.placements.iter().map(|p| p.part))
            .collect();
        assert_eq!(seen.len(), w.parts.len());
    }
}

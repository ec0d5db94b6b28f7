//! Feature analysis: PCA of patch features, cosine correspondence maps and
//! heatmap rendering.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::container;
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::linalg::{cosine, dot, l2_norm, Mat};
use crate::rng;

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;
/// Extra directions carried by the subspace iteration beyond `k`.
const OVERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `L × k` projections of the centred rows.
    pub scores: Mat,
    /// `k × C_v`, one unit direction per row.
    pub components: Mat,
    pub mean: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub iterations: usize,
}

impl Pca {
    /// Scores back in feature space: `mean + scores · components`.
    pub fn reconstruct(&self) -> Mat {
        let mut out = self.scores.matmul(&self.components).expect("shapes agree");
        out.add_row_broadcast(&self.mean).expect("shapes agree");
        out
    }

    /// `index,pc1,pc2,...` rows.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("index");
        for i in 0..self.scores.cols() {
            let _ = write!(out, ",pc{}", i + 1);
        }
        out.push('\n');
        for r in 0..self.scores.rows() {
            let _ = write!(out, "{r}");
            for v in self.scores.row(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
/// Returns eigenvalues in decreasing order and eigenvectors as columns.
fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows();
    let mut a = a.clone();
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        let scale: f64 = a.as_slice().iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, dst, v.get(k, src));
        }
    }
    (values, vecs)
}

/// Modified Gram-Schmidt on the columns of `q` (`C × b`). Columns that
/// collapse are replaced by fresh random directions.
fn orthonormalize(q: &mut Mat, r: &mut rng::Rng) {
    let (c, b) = q.shape();
    for j in 0..b {
        for attempt in 0..8 {
            for i in 0..j {
                let proj: f64 = (0..c).map(|k| q.get(k, i) * q.get(k, j)).sum();
                for k in 0..c {
                    q.set(k, j, q.get(k, j) - proj * q.get(k, i));
                }
            }
            let norm = (0..c).map(|k| q.get(k, j).powi(2)).sum::<f64>().sqrt();
            if norm > 1e-10 || attempt == 7 {
                for k in 0..c {
                    q.set(k, j, q.get(k, j) / norm);
                }
                break;
            }
            for k in 0..c {
                q.set(k, j, r.random_range(-1.0..1.0));
            }
        }
    }
}

/// Top-`k` principal components of the rows of `features` (`L × C_v`) by
/// orthogonal subspace iteration on the covariance with a Rayleigh-Ritz step.
pub fn pca_project(features: &Mat, k: usize) -> Result<Pca> {
    let (l, c) = features.shape();
    if k == 0 || k >= l {
        return Err(Error::InvalidArgument(format!("PCA needs L > k >= 1, got L = {l}, k = {k}")));
    }
    if k > c {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds feature dimension {c}")));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean: Vec<f64> = features.col_sums().iter().map(|s| s / l as f64).collect();
    let mut x = features.clone();
    for r in 0..l {
        for (v, m) in x.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = x.matmul_tn(&x)?.scale(1.0 / (l - 1) as f64);
    let trace: f64 = (0..c).map(|i| cov.get(i, i)).sum();
    if trace <= 0.0 {
        return Err(Error::InvalidArgument("features have zero variance".into()));
    }

    let b = (k + OVERSAMPLE).min(c);
    let mut r = rng::stream(0, "analysis/pca");
    let mut q = rng::gaussian_mat(&mut r, c, b, 1.0);
    orthonormalize(&mut q, &mut r);
    let mut residual = f64::INFINITY;
    for it in 1..=PCA_MAX_ITERATIONS {
        let mut z = cov.matmul(&q)?;
        orthonormalize(&mut z, &mut r);
        let h = z.matmul_tn(&cov.matmul(&z)?)?;
        let (values, u) = jacobi_eigen(&h);
        let v = z.matmul(&u)?;
        let cv = cov.matmul(&v)?;
        let lmax = values[0].max(0.0);
        residual = (0..k)
            .map(|j| {
                (0..c)
                    .map(|i| (cv.get(i, j) - values[j] * v.get(i, j)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        q = v;
        if residual <= PCA_TOLERANCE * lmax {
            let mut components = Mat::zeros(k, c);
            for j in 0..k {
                let col: Vec<f64> = (0..c).map(|i| q.get(i, j)).collect();
                let pivot = col
                    .iter()
                    .copied()
                    .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
                let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
                for (i, v) in col.iter().enumerate() {
                    components.set(j, i, sign * v);
                }
            }
            let explained_variance: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
            let explained_variance_ratio = explained_variance.iter().map(|v| v / trace).collect();
            return Ok(Pca {
                scores: x.matmul_nt(&components)?,
                components,
                mean,
                explained_variance,
                explained_variance_ratio,
                iterations: it,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: PCA_MAX_ITERATIONS,
        residual,
    })
}

/// PCA over the chosen layer of each stack separately.
pub fn pca_per_image(stacks: &[FeatureStack], layer: usize, k: usize) -> Result<Vec<Pca>> {
    stacks
        .iter()
        .map(|s| pca_project(layer_of(s, layer)?, k))
        .collect()
}

/// PCA fitted on the chosen layer of all stacks stacked row-wise; scores
/// are returned per image.
pub fn pca_cross_image(stacks: &[FeatureStack], layer: usize, k: usize) -> Result<(Pca, Vec<Mat>)> {
    let mut data = Vec::new();
    let mut sizes = Vec::new();
    let mut c = None;
    for s in stacks {
        let m = layer_of(s, layer)?;
        if *c.get_or_insert(m.cols()) != m.cols() {
            return Err(Error::shape("stacks differ in feature dimension"));
        }
        data.extend_from_slice(m.as_slice());
        sizes.push(m.rows());
    }
    let c = c.ok_or_else(|| Error::InvalidArgument("no feature stacks".into()))?;
    let all = Mat::from_vec(data.len() / c, c, data)?;
    let pca = pca_project(&all, k)?;
    let mut per = Vec::new();
    let mut row = 0;
    for n in sizes {
        let slice = pca.scores.as_slice()[row * k..(row + n) * k].to_vec();
        per.push(Mat::from_vec(n, k, slice)?);
        row += n;
    }
    Ok((pca, per))
}

fn layer_of(stack: &FeatureStack, layer: usize) -> Result<&Mat> {
    stack.layers.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {layer} out of range (stack has {})", stack.n_layers()))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub grid: (usize, usize),
    /// Row-major `h_p × w_p`.
    pub values: Vec<f64>,
    /// Patches with zero norm, reported as similarity 0.
    pub zero_patches: usize,
}

/// Cosine similarity between `query` and every patch of `layer` in `target`.
pub fn similarity_map(query: &[f64], target: &FeatureStack, layer: usize) -> Result<SimilarityMap> {
    let feats = layer_of(target, layer)?;
    if query.len() != feats.cols() {
        return Err(Error::shape(format!(
            "query has {} channels, features have {}",
            query.len(),
            feats.cols()
        )));
    }
    if l2_norm(query) == 0.0 {
        return Err(Error::InvalidArgument("query vector has zero norm".into()));
    }
    let mut zero_patches = 0;
    let values = (0..feats.rows())
        .map(|i| {
            let row = feats.row(i);
            if dot(row, row) == 0.0 {
                zero_patches += 1;
            }
            cosine(query, row).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(SimilarityMap {
        grid: target.grid,
        values,
        zero_patches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    /// Blue (0,0,255) → white (255,255,255) → red (255,0,0).
    Diverging,
    /// Black (0,0,0) → red (255,0,0) → yellow (255,255,0).
    Heat,
    /// Black (0,0,0) → mid grey (128,128,128) → white (255,255,255).
    Gray,
}

impl Colormap {
    pub fn anchors(self) -> [[f64; 3]; 3] {
        match self {
            Colormap::Diverging => [[0.0, 0.0, 255.0], [255.0, 255.0, 255.0], [255.0, 0.0, 0.0]],
            Colormap::Heat => [[0.0, 0.0, 0.0], [255.0, 0.0, 0.0], [255.0, 255.0, 0.0]],
            Colormap::Gray => [[0.0, 0.0, 0.0], [128.0, 128.0, 128.0], [255.0, 255.0, 255.0]],
        }
    }

    /// Colour at `u ∈ [0, 1]`, linear between anchors, rounded half away from zero.
    pub fn color(self, u: f64) -> [u8; 3] {
        let a = self.anchors();
        let u = u.clamp(0.0, 1.0);
        let (lo, hi, f) = if u <= 0.5 {
            (a[0], a[1], u * 2.0)
        } else {
            (a[1], a[2], (u - 0.5) * 2.0)
        };
        let mut out = [0u8; 3];
        for i in 0..3 {
            out[i] = (lo[i] + (hi[i] - lo[i]) * f).round() as u8;
        }
        out
    }
}

impl std::str::FromStr for Colormap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diverging" => Ok(Colormap::Diverging),
            "heat" => Ok(Colormap::Heat),
            "gray" => Ok(Colormap::Gray),
            other => Err(Error::InvalidArgument(format!("unknown colormap `{other}`"))),
        }
    }
}

/// PPM (P6) bytes for a row-major `height × width` map. The map is min-max
/// normalised; a constant map renders entirely in the first anchor colour.
pub fn heatmap_ppm(map: &[f64], height: usize, width: usize, cmap: Colormap) -> Result<Vec<u8>> {
    if map.len() != height * width || map.is_empty() {
        return Err(Error::shape(format!("map has {} values for {height}×{width}", map.len())));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap".into()));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &v in map {
        let u = if range > 0.0 { (v - lo) / range } else { 0.0 };
        out.extend_from_slice(&cmap.color(u));
    }
    Ok(out)
}

pub fn render_heatmap(
    map: &[f64],
    height: usize,
    width: usize,
    path: impl AsRef<Path>,
    cmap: Colormap,
) -> Result<()> {
    container::write_file(path.as_ref(), &heatmap_ppm(map, height, width, cmap)?)
}

/// First three PCA score columns as an RGB image, each channel min-max
/// normalised independently. Missing components render as 0.
pub fn pca_rgb_ppm(scores: &Mat, grid: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = grid;
    if scores.rows() != h * w {
        return Err(Error::shape("score rows differ from grid size"));
    }
    let mut ranges = Vec::new();
    for j in 0..scores.cols().min(3) {
        let col: Vec<f64> = (0..scores.rows()).map(|i| scores.get(i, j)).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ranges.push((lo, hi - lo));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..scores.rows() {
        for ch in 0..3 {
            let v = match ranges.get(ch) {
                Some(&(lo, range)) if range > 0.0 => ((scores.get(i, ch) - lo) / range * 255.0).round() as u8,
                _ => 0,
            };
            out.push(v);
        }
    }
    Ok(out)
}

//! Multi-layer feature fusion and the visual embedder.
//!
//! `F̂_v = Σ_i α_i · F_{n−i+1} · P_i` over the last `j` layers with
//! `α = softmax(alpha_logits)`, followed by the affine embedder
//! `F_v = F̂_v · W_e + b_e`.

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::linalg::{softmax, Mat};
use crate::rng;

pub const PROJ_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `proj[i]` transforms layer `n−i` (0-based `i`, so `proj[0]` sees the last layer).
    pub proj: Vec<Mat>,
    pub alpha_logits: Vec<f64>,
}

impl FusionParams {
    /// Identity plus small Gaussian projections, uniform fusion weights.
    pub fn init(j: usize, c_v: usize, seed: u64) -> Result<Self> {
        if j == 0 {
            return Err(Error::InvalidArgument("fusion needs j >= 1 layers".into()));
        }
        let mut r = rng::stream(seed, "fusion/proj");
        let proj = (0..j)
            .map(|_| {
                let mut m = rng::gaussian_mat(&mut r, c_v, c_v, PROJ_INIT_STD);
                for d in 0..c_v {
                    m.set(d, d, m.get(d, d) + 1.0);
                }
                m
            })
            .collect();
        Ok(FusionParams {
            proj,
            alpha_logits: vec![0.0; j],
        })
    }

    pub fn j(&self) -> usize {
        self.proj.len()
    }

    pub fn alpha(&self) -> Vec<f64> {
        softmax(&self.alpha_logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    /// `C_v × C`
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Embedder {
    pub fn init(c_v: usize, c: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "fusion/embedder");
        Embedder {
            w: rng::gaussian_mat(&mut r, c_v, c, 1.0 / (c_v as f64).sqrt()),
            b: vec![0.0; c],
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    /// `F_{n−i} · P_i` per fused layer.
    projected: Vec<Mat>,
    alpha: Vec<f64>,
}

fn check(stack: &FeatureStack, fp: &FusionParams) -> Result<()> {
    if fp.j() == 0 || fp.alpha_logits.len() != fp.j() {
        return Err(Error::shape(format!(
            "{} projections but {} fusion logits",
            fp.j(),
            fp.alpha_logits.len()
        )));
    }
    if fp.j() > stack.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "fusion over j = {} layers but the stack has only {}",
            fp.j(),
            stack.n_layers()
        )));
    }
    let c_v = stack.channels();
    for (i, p) in fp.proj.iter().enumerate() {
        if p.shape() != (c_v, c_v) {
            return Err(Error::shape(format!(
                "projection {i} is {:?}, expected {c_v}x{c_v}",
                p.shape()
            )));
        }
    }
    Ok(())
}

/// The `i`-th fused layer (0-based), counted back from the deepest.
fn source_layer(stack: &FeatureStack, i: usize) -> &Mat {
    &stack.layers[stack.n_layers() - 1 - i]
}

pub fn fuse_cached(stack: &FeatureStack, fp: &FusionParams) -> Result<(Mat, FuseCache)> {
    check(stack, fp)?;
    let alpha = fp.alpha();
    let mut out = Mat::zeros(stack.n_patches(), stack.channels());
    let mut projected = Vec::with_capacity(fp.j());
    for (i, (p, &a)) in fp.proj.iter().zip(&alpha).enumerate() {
        let x = source_layer(stack, i).matmul(p)?;
        out.axpy(a, &x)?;
        projected.push(x);
    }
    Ok((out, FuseCache { projected, alpha }))
}

pub fn fuse(stack: &FeatureStack, fp: &FusionParams) -> Result<Mat> {
    fuse_cached(stack, fp).map(|(m, _)| m)
}

/// Gradients of the fusion parameters given `dL/dF̂_v`.
pub fn fuse_backward(
    stack: &FeatureStack,
    cache: &FuseCache,
    d_out: &Mat,
) -> Result<(Vec<Mat>, Vec<f64>)> {
    let mut d_proj = Vec::with_capacity(cache.projected.len());
    let mut d_alpha = Vec::with_capacity(cache.projected.len());
    for (i, (x, &a)) in cache.projected.iter().zip(&cache.alpha).enumerate() {
        d_proj.push(source_layer(stack, i).matmul_tn(d_out)?.scale(a));
        d_alpha.push(d_out.frobenius_dot(x)?);
    }
    // Softmax Jacobian: d logit_k = α_k (dα_k − Σ α_i dα_i).
    let mean: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
    let d_logits = cache
        .alpha
        .iter()
        .zip(&d_alpha)
        .map(|(a, d)| a * (d - mean))
        .collect();
    Ok((d_proj, d_logits))
}

pub fn embed(fused: &Mat, e: &Embedder) -> Result<Mat> {
    if fused.cols() != e.w.rows() {
        return Err(Error::shape(format!(
            "embedder expects C_v = {}, features have {}",
            e.w.rows(),
            fused.cols()
        )));
    }
    if e.b.len() != e.w.cols() {
        return Err(Error::shape("embedder bias length differs from C"));
    }
    let mut out = fused.matmul(&e.w)?;
    out.add_row_broadcast(&e.b)?;
    Ok(out)
}

/// Returns `(dW_e, db_e, dL/dF̂_v)`.
pub fn embed_backward(fused: &Mat, e: &Embedder, d_out: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    Ok((fused.matmul_tn(d_out)?, d_out.col_sums(), d_out.matmul_nt(&e.w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(layers: Vec<Mat>, grid: (usize, usize)) -> FeatureStack {
        let c = layers[0].cols();
        FeatureStack::new(layers, vec![0.0; c], grid, (4, 4)).unwrap()
    }

    fn random_stack(n: usize, l: usize, c: usize, seed: u64) -> FeatureStack {
        let mut r = rng::stream(seed, "t");
        stack((0..n).map(|_| rng::gaussian_mat(&mut r, l, c, 1.0)).collect(), (l, 1))
    }

    #[test]
    fn single_identity_layer_is_last_layer() {
        let s = random_stack(3, 4, 5, 1);
        let fp = FusionParams {
            proj: vec![Mat::identity(5)],
            alpha_logits: vec![0.0],
        };
        assert_eq!(fuse(&s, &fp).unwrap(), *s.last_layer());
    }

    #[test]
    fn saturated_softmax_selects_last_layer() {
        let s = random_stack(3, 4, 5, 2);
        let mut fp = FusionParams::init(3, 5, 3).unwrap();
        fp.alpha_logits = vec![30.0, -30.0, -30.0];
        let expect = s.last_layer().matmul(&fp.proj[0]).unwrap();
        assert!(fuse(&s, &fp).unwrap().max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn hand_computed_two_layer_fusion() {
        // Two patches, C_v = 2, layers F1 (older) and F2 (last).
        let f1 = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let f2 = Mat::from_rows(&[&[1.0, 1.0], &[3.0, -1.0]]);
        let s = stack(vec![f1, f2], (2, 1));
        let p_last = Mat::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let p_prev = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let fp = FusionParams {
            proj: vec![p_last, p_prev],
            alpha_logits: vec![(3.0f64).ln(), 0.0],
        };
        // α = (0.75, 0.25); φ1(F2) = [[2,1],[6,-1]]; φ2(F1) = [[0,1],[2,0]].
        let expect = Mat::from_rows(&[&[1.5, 1.0], &[5.0, -0.75]]);
        assert!(fuse(&s, &fp).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn too_many_fused_layers() {
        let s = random_stack(2, 4, 3, 1);
        let fp = FusionParams::init(3, 3, 0).unwrap();
        assert!(matches!(fuse(&s, &fp), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn embed_identity_and_constant() {
        let x = Mat::from_rows(&[&[1.0, -2.0], &[0.5, 4.0]]);
        let e = Embedder {
            w: Mat::identity(2),
            b: vec![0.0, 0.0],
        };
        assert_eq!(embed(&x, &e).unwrap(), x);
        let e = Embedder {
            w: Mat::zeros(2, 3),
            b: vec![0.7; 3],
        };
        assert_eq!(embed(&x, &e).unwrap(), Mat::filled(2, 3, 0.7));
        let bad = Embedder {
            w: Mat::zeros(3, 3),
            b: vec![0.0; 3],
        };
        assert!(embed(&x, &bad).is_err());
    }

    #[test]
    fn fusion_is_linear_in_features() {
        let s = random_stack(3, 4, 3, 7);
        let fp = FusionParams::init(3, 3, 1).unwrap();
        let mut scaled = s.clone();
        scaled.layers.iter_mut().for_each(|l| *l = l.scale(-2.5));
        let a = fuse(&scaled, &fp).unwrap();
        let b = fuse(&s, &fp).unwrap().scale(-2.5);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = random_stack(3, 4, 3, 11);
        let mut fp = FusionParams::init(3, 3, 2).unwrap();
        fp.alpha_logits = vec![0.3, -0.2, 0.5];
        let e = Embedder::init(3, 2, 4);
        let w = rng::gaussian_mat(&mut rng::stream(1, "w"), 4, 2, 1.0);
        let loss = |fp: &FusionParams, e: &Embedder| {
            embed(&fuse(&s, fp).unwrap(), e).unwrap().frobenius_dot(&w).unwrap()
        };
        let (fused, cache) = fuse_cached(&s, &fp).unwrap();
        let (dw, db, dfused) = embed_backward(&fused, &e, &w).unwrap();
        let (dproj, dlogits) = fuse_backward(&s, &cache, &dfused).unwrap();
        let h = 1e-5;
        let check = |a: f64, plus: f64, minus: f64| {
            let n = (plus - minus) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-4, "analytic {a} numeric {n}");
        };
        for idx in 0..6 {
            let (mut ep, mut em) = (e.clone(), e.clone());
            ep.w.as_mut_slice()[idx] += h;
            em.w.as_mut_slice()[idx] -= h;
            check(dw.as_slice()[idx], loss(&fp, &ep), loss(&fp, &em));
        }
        for idx in 0..2 {
            let (mut ep, mut em) = (e.clone(), e.clone());
            ep.b[idx] += h;
            em.b[idx] -= h;
            check(db[idx], loss(&fp, &ep), loss(&fp, &em));
        }
        for k in 0..3 {
            let (mut fpp, mut fpm) = (fp.clone(), fp.clone());
            fpp.alpha_logits[k] += h;
            fpm.alpha_logits[k] -= h;
            check(dlogits[k], loss(&fpp, &e), loss(&fpm, &e));
            for idx in 0..9 {
                let (mut fpp, mut fpm) = (fp.clone(), fp.clone());
                fpp.proj[k].as_mut_slice()[idx] += h;
                fpm.proj[k].as_mut_slice()[idx] -= h;
                check(dproj[k].as_slice()[idx], loss(&fpp, &e), loss(&fpm, &e));
            }
        }
    }
}

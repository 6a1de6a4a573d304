//! Evaluation metrics: class proportions, SSIM, IoU, Fréchet distance over
//! feature sets, the intended-vs-realised regression, and rank correlation.

use std::collections::BTreeMap;

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{base_class, Class, LabelMap, Proportions};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty raster")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image {w}x{h} is smaller than the {win}x{win} window")]
    TooSmall { w: u32, h: u32, win: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate variance in {0}")]
    Degenerate(&'static str),
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub arm: String,
    pub n_samples: usize,
    pub fid: f64,
    pub perceptual_distance: f64,
    pub ssim: f64,
    pub miou: f64,
    pub classwise_iou: BTreeMap<String, f64>,
}

/// Realised percentages over all seven classes (sub-labels fold into other).
pub fn class_proportions(map: &LabelMap) -> Result<Proportions, MetricError> {
    if map.is_empty() {
        return Err(MetricError::Empty);
    }
    let counts = map.class_counts();
    let total = map.len() as f64;
    Ok(Proportions::from_array(counts.map(|c| 100.0 * c as f64 / total)))
}

fn same_shape(a: &LabelMap, b: &LabelMap) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::Shape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Intersection over union for one class; `None` when the class is absent
/// from both maps.
pub fn iou(pred: &LabelMap, gt: &LabelMap, class: Class) -> Result<Option<f64>, MetricError> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        let (p, g) = (base_class(p) == class, base_class(g) == class);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Unweighted mean IoU over the given classes that occur in `gt`.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: &[Class]) -> Result<f64, MetricError> {
    same_shape(pred, gt)?;
    let counts = gt.class_counts();
    let mut vals = Vec::new();
    for &c in classes {
        if counts[c as usize] > 0 {
            vals.push(iou(pred, gt, c)?.expect("present in gt"));
        }
    }
    Ok(if vals.is_empty() { 1.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of one plane.
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// SSIM with dynamic range 1 (pixels scaled by 1/255), averaged over valid
/// window positions and the three channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    if a.dimensions() != b.dimensions() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    let (w, h) = a.dimensions();
    if (w as usize) < SSIM_WINDOW || (h as usize) < SSIM_WINDOW {
        return Err(MetricError::TooSmall { w, h, win: SSIM_WINDOW });
    }
    let (w, h) = (w as usize, h as usize);
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut n = 0usize;
    for ch in 0..3 {
        let pa: Vec<f64> = a.pixels().map(|p| p.0[ch] as f64 / 255.0).collect();
        let pb: Vec<f64> = b.pixels().map(|p| p.0[ch] as f64 / 255.0).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter(&pa, w, h, &g);
        let mu_b = filter(&pb, w, h, &g);
        let aa = filter(&prod(&pa, &pa), w, h, &g);
        let bb = filter(&prod(&pb, &pb), w, h, &g);
        let ab = filter(&prod(&pa, &pb), w, h, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Sample mean and unbiased covariance.
fn moments(xs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in xs {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
/// Returns the root and the largest clamped magnitude.
fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped: f64 = 0.0;
    let roots = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            clamped = clamped.max(-v);
            0.0
        } else {
            v.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(MetricError::TooFew { need: 2, got: set.len() });
        }
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(MetricError::Shape("feature vectors differ in length".into()));
    }
    let (mu_a, mut sa) = moments(a);
    let (mu_b, mut sb) = moments(b);
    if a.len() <= d || b.len() <= d {
        let eps = DMatrix::identity(d, d) * 1e-6;
        sa += &eps;
        sb += eps;
    }
    let (root_a, c1) = sqrtm_psd(&sa);
    let inner = &root_a * &sb * &root_a;
    let (cross, c2) = sqrtm_psd(&inner);
    let clamped = c1.max(c2);
    if clamped > 1e-9 {
        log::debug!("fid: clamped negative eigenvalue of magnitude {clamped:.3e}");
    }
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of realised on intended. When the realised values
/// are constant the fit is exact and `r2` is reported as 1.
pub fn consistency_fit(intended: &[f64], realized: &[f64]) -> Result<LinearFit, MetricError> {
    if intended.len() != realized.len() {
        return Err(MetricError::Shape(format!("{} vs {} values", intended.len(), realized.len())));
    }
    if intended.len() < 3 {
        return Err(MetricError::TooFew { need: 3, got: intended.len() });
    }
    let n = intended.len() as f64;
    let mx = intended.iter().sum::<f64>() / n;
    let my = realized.iter().sum::<f64>() / n;
    let sxx: f64 = intended.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * n {
        return Err(MetricError::Degenerate("intended values"));
    }
    let sxy: f64 = intended.iter().zip(realized).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = intended.iter().zip(realized).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = realized.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit { slope, intercept, r2 })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties receive the average of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Coefficient of variation (population std over mean).
pub fn coeff_of_variation(x: &[f64]) -> f64 {
    std_dev(x) / mean(x).abs().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn proportions_simple() {
        let m = LabelMap::filled(4, 4, Class::Sky);
        assert_eq!(class_proportions(&m).unwrap().sky, 100.0);
        let ids = (0..16).map(|i| if i < 8 { 0 } else { 3 }).collect();
        let p = class_proportions(&LabelMap::new(4, 4, ids)).unwrap();
        assert_eq!((p.road, p.sky, p.other), (50.0, 50.0, 0.0));
        assert_eq!(class_proportions(&LabelMap::new(0, 0, vec![])), Err(MetricError::Empty));
    }

    #[test]
    fn iou_examples() {
        let gt = LabelMap::new(4, 1, vec![0, 0, 0, 0]);
        let pred = LabelMap::new(4, 1, vec![0, 0, 3, 3]);
        assert_eq!(iou(&pred, &gt, Class::Road).unwrap(), Some(0.5));
        assert_eq!(iou(&gt, &gt, Class::Tree).unwrap(), None);
        let other = LabelMap::new(4, 1, vec![3; 4]);
        assert_eq!(iou(&other, &gt, Class::Road).unwrap(), Some(0.0));
        assert_eq!(miou(&gt, &gt, &Class::ALL).unwrap(), 1.0);
        assert!(iou(&LabelMap::new(2, 2, vec![0; 4]), &gt, Class::Road).is_err());
    }

    #[test]
    fn ssim_examples() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 13) as u8, (y * 7) as u8, ((x + y) * 5) as u8]));
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let zeros = RgbImage::new(16, 16);
        let ones = RgbImage::from_pixel(16, 16, Rgb([255; 3]));
        let (c1, c2) = (1e-4, 9e-4);
        let want = (c1 * c2) / ((1.0 + c1) * c2);
        assert!((ssim(&zeros, &ones).unwrap() - want).abs() < 1e-12);
        assert!(matches!(ssim(&RgbImage::new(10, 30), &RgbImage::new(10, 30)), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn fid_closed_forms() {
        // samples with exact unbiased moments: mean 0, var 1
        let base: Vec<f64> = vec![-1.0, 1.0, -1.0, 1.0, 0.0, 0.0];
        let scale = (6.0 - 1.0) / 4.0f64;
        let a: Vec<Vec<f64>> = base.iter().map(|v| vec![v * scale.sqrt()]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1.0]).collect();
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        let c: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] * 2.0]).collect();
        assert!((fid(&a, &c).unwrap() - 1.0).abs() < 1e-9);
        assert!(fid(&a, &a).unwrap().abs() < 1e-9);
        assert!(fid(&a[..1], &a).is_err());
    }

    #[test]
    fn linear_fit_examples() {
        let f = consistency_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let f = consistency_fit(&[0.0, 1.0, 2.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert!(consistency_fit(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_handles_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }
}

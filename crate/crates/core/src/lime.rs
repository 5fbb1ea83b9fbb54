//! Local surrogate explanations. An image is cut into segments, random
//! subsets of segments are replaced by the image's per-channel mean, the
//! black box scores every perturbed copy, and a kernel-weighted ridge
//! regression of the score on the segment on/off mask gives one weight per
//! segment.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{rng_for, tag};
use crate::scalar::Scalar;

/// Per-pixel segment id over a `width x height` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    ids: Vec<usize>,
    count: usize,
}

impl SegmentMap {
    /// Validates that `ids` (row-major, one per pixel) covers `0..count`
    /// with every segment non-empty.
    pub fn new(width: usize, height: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != width * height || ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} segment ids for a {width}x{height} image",
                ids.len()
            )));
        }
        let count = ids.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        for &i in &ids {
            seen[i] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("segment {gap} has no pixels")));
        }
        Ok(Self {
            width,
            height,
            ids,
            count,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, x: usize, y: usize) -> usize {
        self.ids[y * self.width + x]
    }

    /// Relabels segment `i` as `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.count {
            return Err(Error::InvalidArgument("permutation length differs from segment count".into()));
        }
        Self::new(self.width, self.height, self.ids.iter().map(|&i| perm[i]).collect())
    }
}

/// Square `cell x cell` tiles in row-major order; edge tiles are clipped.
pub fn segment_grid(width: usize, height: usize, cell: usize) -> Result<SegmentMap> {
    if cell == 0 {
        return Err(Error::InvalidArgument("grid cell must be at least 1 pixel".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image has no pixels".into()));
    }
    let across = width.div_ceil(cell);
    let ids = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y / cell) * across + x / cell))
        .collect();
    SegmentMap::new(width, height, ids)
}

fn check_geometry<S: Scalar>(image: &Tensor<S>, seg: &SegmentMap) -> Result<(usize, usize)> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape("lime", format!("image {:?} is not (C, H, W)", image.shape())));
    };
    if (*h, *w) != (seg.height, seg.width) {
        return Err(Error::shape(
            "lime",
            format!("image {h}x{w} but segment map {}x{}", seg.height, seg.width),
        ));
    }
    Ok((*c, h * w))
}

pub fn channel_means<S: Scalar>(image: &Tensor<S>) -> Vec<S> {
    let c = image.shape()[0];
    let plane = image.len() / c;
    image
        .data()
        .chunks(plane)
        .map(|p| S::from_f64_lossy(p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64))
        .collect()
}

/// Copy of `image` where every pixel of a segment whose `mask` bit is off
/// is replaced by `fill[channel]`.
pub fn apply_mask<S: Scalar>(image: &Tensor<S>, seg: &SegmentMap, mask: &[bool], fill: &[S]) -> Result<Tensor<S>> {
    let (c, plane) = check_geometry(image, seg)?;
    if mask.len() != seg.count || fill.len() != c {
        return Err(Error::InvalidArgument(format!(
            "mask of {} for {} segments, {} fill values for {c} channels",
            mask.len(),
            seg.count,
            fill.len()
        )));
    }
    let mut out = image.clone();
    for (ch, p) in out.data_mut().chunks_mut(plane).enumerate() {
        for (v, &id) in p.iter_mut().zip(&seg.ids) {
            if !mask[id] {
                *v = fill[ch];
            }
        }
    }
    Ok(out)
}

/// Segment masks and the images they produce.
pub type Perturbations<S> = (Vec<Vec<bool>>, Vec<Tensor<S>>);

/// `n` Bernoulli(1/2) segment masks, the first one all on, and the images
/// they produce under mean-value masking.
pub fn perturb<S: Scalar, R: Rng + ?Sized>(
    image: &Tensor<S>,
    seg: &SegmentMap,
    n: usize,
    rng: &mut R,
) -> Result<Perturbations<S>> {
    check_geometry(image, seg)?;
    let s = seg.count;
    if n < s + 2 {
        return Err(Error::InvalidArgument(format!(
            "{n} perturbations for {s} segments; need at least {}",
            s + 2
        )));
    }
    let fill = channel_means(image);
    let masks: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..s)
                .map(|_| {
                    let bit = rng.random_bool(0.5);
                    i == 0 || bit
                })
                .collect()
        })
        .collect();
    let images = masks
        .iter()
        .map(|m| apply_mask(image, seg, m, &fill))
        .collect::<Result<_>>()?;
    Ok((masks, images))
}

/// Cosine distance between `mask` and the all-on mask; 1 for the empty mask.
pub fn mask_distance(mask: &[bool]) -> f64 {
    let on = mask.iter().filter(|&&b| b).count();
    if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / mask.len() as f64).sqrt()
    }
}

pub fn kernel_weight(mask: &[bool], kernel_width: f64) -> f64 {
    let d = mask_distance(mask);
    (-(d * d) / (kernel_width * kernel_width)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimeConfig {
    /// Grid cell side in pixels; `None` uses an eighth of the image width.
    pub cell: Option<usize>,
    pub samples: usize,
    /// `None` uses `0.25 * sqrt(segments)`.
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            cell: None,
            samples: 1000,
            kernel_width: None,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

impl LimeConfig {
    pub fn cell_for(&self, width: usize) -> usize {
        self.cell.unwrap_or((width / 8).max(1))
    }

    pub fn kernel_width_for(&self, segments: usize) -> f64 {
        self.kernel_width.unwrap_or(0.25 * (segments as f64).sqrt())
    }
}

/// R^2 below this marks an explanation whose surrogate fits poorly.
pub const LOW_FIT_R2: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub class_id: usize,
    /// Kernel-weighted coefficient of determination on the perturbations.
    pub r2: f64,
    pub samples: usize,
    pub kernel_width: f64,
}

impl Explanation {
    pub fn low_fit(&self) -> bool {
        self.r2 < LOW_FIT_R2
    }

    /// Segment ids sorted by decreasing `|weight|`, ties by id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.weights.len()).collect();
        ids.sort_by(|&a, &b| self.weights[b].abs().total_cmp(&self.weights[a].abs()).then(a.cmp(&b)));
        ids
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class {}", self.class_id);
        let _ = writeln!(s, "intercept {:.6}", self.intercept);
        let _ = writeln!(s, "r2 {:.6}{}", self.r2, if self.low_fit() { " low_fit" } else { "" });
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "kernel_width {:.6}", self.kernel_width);
        let _ = writeln!(s, "segment weight");
        for id in self.ranking() {
            let _ = writeln!(s, "{id} {:.6}", self.weights[id]);
        }
        s
    }
}

/// Surrogate coefficients, intercept and weighted R^2.
pub struct Surrogate {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
}

/// Minimizes `sum_i w_i (y_i - b - m_i . beta)^2 + ridge |beta|^2` with the
/// intercept `b` unpenalized.
pub fn fit_surrogate(masks: &[Vec<bool>], y: &[f64], sample_weights: &[f64], ridge: f64) -> Result<Surrogate> {
    let n = masks.len();
    if n == 0 || y.len() != n || sample_weights.len() != n {
        return Err(Error::InvalidArgument("surrogate inputs must be non-empty and equally long".into()));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge penalty {ridge} must be non-negative")));
    }
    let s = masks[0].len();
    let design = DMatrix::from_fn(n, s + 1, |i, j| if j == 0 || masks[i][j - 1] { 1.0 } else { 0.0 });
    let w = DVector::from_column_slice(sample_weights);
    let yv = DVector::from_column_slice(y);
    let weighted = DMatrix::from_fn(n, s + 1, |i, j| design[(i, j)] * w[i]);
    let mut gram = weighted.transpose() * &design;
    for j in 1..=s {
        gram[(j, j)] += ridge;
    }
    let rhs = weighted.transpose() * &yv;
    let degenerate = || {
        Error::Degenerate(format!(
            "surrogate design with {n} perturbations over {s} segments is singular; increase the number of perturbations"
        ))
    };
    let chol = gram.cholesky().ok_or_else(degenerate)?;
    let coef = chol.solve(&rhs);
    if !coef.iter().all(|c| c.is_finite()) {
        return Err(degenerate());
    }
    let fitted = &design * &coef;
    let wsum = w.sum();
    let ybar = w.dot(&yv) / wsum;
    let ss_res: f64 = (0..n).map(|i| w[i] * (yv[i] - fitted[i]).powi(2)).sum();
    let ss_tot: f64 = (0..n).map(|i| w[i] * (yv[i] - ybar).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON * wsum {
        1.0
    } else {
        0.0
    };
    Ok(Surrogate {
        intercept: coef[0],
        weights: coef.iter().skip(1).copied().collect(),
        r2,
    })
}

/// Explains `predict`'s score for `class_id` (or for its top class on the
/// unperturbed image when `None`). `predict` maps a batch of `(C, H, W)`
/// images to one probability row each.
pub fn explain<S, F>(
    predict: F,
    image: &Tensor<S>,
    seg: &SegmentMap,
    class_id: Option<usize>,
    cfg: &LimeConfig,
) -> Result<Explanation>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Vec<Vec<f64>>>,
{
    let mut rng = rng_for(cfg.seed, &[tag("lime")]);
    let (masks, images) = perturb(image, seg, cfg.samples, &mut rng)?;
    let scores = predict(&images)?;
    if scores.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "black box returned {} rows for {} images",
            scores.len(),
            images.len()
        )));
    }
    // row 0 is the unperturbed image
    let class_id = match class_id {
        Some(c) => c,
        None => scores[0]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0,
    };
    let y = scores
        .iter()
        .map(|row| {
            row.get(class_id).copied().ok_or(Error::LabelOutOfRange {
                label: class_id,
                classes: row.len(),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let kernel_width = cfg.kernel_width_for(seg.count);
    if kernel_width <= 0.0 || !kernel_width.is_finite() {
        return Err(Error::InvalidConfig(format!("kernel width {kernel_width} must be positive")));
    }
    let w: Vec<f64> = masks.iter().map(|m| kernel_weight(m, kernel_width)).collect();
    let fit = fit_surrogate(&masks, &y, &w, cfg.ridge)?;
    Ok(Explanation {
        weights: fit.weights,
        intercept: fit.intercept,
        class_id,
        r2: fit.r2,
        samples: cfg.samples,
        kernel_width,
    })
}

const POSITIVE: [f64; 3] = [230.0, 40.0, 40.0];
const NEGATIVE: [f64; 3] = [40.0, 90.0, 230.0];
const TINT_ALPHA: f64 = 0.5;

/// RGB copy of `base` with the `top_k` segments of largest `|weight|`
/// blended toward red (positive) or blue (negative). Segments with a zero
/// weight are never tinted.
pub fn render_heatmap(expl: &Explanation, base: &RgbImage, seg: &SegmentMap, top_k: usize) -> Result<RgbImage> {
    let s = seg.count;
    if expl.weights.len() != s {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {s} segments",
            expl.weights.len()
        )));
    }
    if top_k == 0 || top_k > s {
        return Err(Error::InvalidArgument(format!("top_k {top_k} outside 1..={s}")));
    }
    if (base.width() as usize, base.height() as usize) != (seg.width, seg.height) {
        return Err(Error::shape(
            "render_heatmap",
            format!("image {}x{} but segment map {}x{}", base.width(), base.height(), seg.width, seg.height),
        ));
    }
    let mut tint: Vec<Option<[f64; 3]>> = vec![None; s];
    for id in expl.ranking().into_iter().take(top_k) {
        let wv = expl.weights[id];
        if wv != 0.0 {
            tint[id] = Some(if wv > 0.0 { POSITIVE } else { NEGATIVE });
        }
    }
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if let Some(col) = tint[seg.id(x as usize, y as usize)] {
            let blended: [u8; 3] =
                std::array::from_fn(|c| ((1.0 - TINT_ALPHA) * px[c] as f64 + TINT_ALPHA * col[c]).round() as u8);
            *px = Rgb(blended);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_counts() {
        assert_eq!(segment_grid(32, 32, 8).unwrap().count(), 16);
        assert_eq!(segment_grid(32, 32, 32).unwrap().count(), 1);
        assert_eq!(segment_grid(32, 32, 64).unwrap().count(), 1);
        assert_eq!(segment_grid(10, 7, 4).unwrap().count(), 6);
        assert!(segment_grid(32, 32, 0).is_err());
        let g = segment_grid(10, 7, 4).unwrap();
        assert_eq!(g.id(9, 0), 2);
        assert_eq!(g.id(0, 6), 3);
    }

    #[test]
    fn too_few_perturbations() {
        let img = Tensor::<f32>::zeros(vec![1, 8, 8]);
        let seg = segment_grid(8, 8, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(perturb(&img, &seg, 5, &mut rng).is_err());
        assert!(perturb(&img, &seg, 6, &mut rng).is_ok());
    }

    #[test]
    fn empty_mask_has_unit_distance() {
        assert_eq!(mask_distance(&[true; 4]), 0.0);
        assert_eq!(mask_distance(&[false; 4]), 1.0);
        assert!((mask_distance(&[true, false, false, false]) - 0.5).abs() < 1e-15);
        assert_eq!(kernel_weight(&[true; 9], 0.75), 1.0);
    }

    #[test]
    fn singular_design_is_reported() {
        let masks = vec![vec![true, true]; 5];
        let err = fit_surrogate(&masks, &[1.0; 5], &[1.0; 5], 0.0);
        match err {
            Err(Error::Degenerate(m)) => assert!(m.contains("increase")),
            other => panic!("expected degenerate design, got {:?}", other.map(|s| s.weights)),
        }
    }

    #[test]
    fn heatmap_errors_and_zero_weights() {
        let seg = segment_grid(4, 4, 2).unwrap();
        let base = RgbImage::from_pixel(4, 4, Rgb([10, 20, 30]));
        let expl = Explanation {
            weights: vec![0.0; 4],
            intercept: 0.0,
            class_id: 0,
            r2: 1.0,
            samples: 10,
            kernel_width: 0.5,
        };
        assert_eq!(render_heatmap(&expl, &base, &seg, 4).unwrap(), base);
        assert!(render_heatmap(&expl, &base, &seg, 0).is_err());
        assert!(render_heatmap(&expl, &base, &seg, 5).is_err());
    }
}

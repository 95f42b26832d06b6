//! Quantitative evaluation: box/mask precision-recall and the Fréchet
//! distance between feature sets with a pluggable extractor.

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::imgutil::{BBox, Mask};

/// Eigenvalues of covariance products may go slightly negative from
/// roundoff; anything below this is a hard error.
pub const SQRT_EIG_TOLERANCE: f64 = -1e-6;

// ----------------------------------------------------------- box matching

/// Greedy matching outcome. `pairs` holds (pred index, gt index, IoU) in
/// the original input order of the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Match predictions to ground truths greedily by descending score; a
/// prediction takes the unmatched gt with the highest IoU >= threshold.
pub fn match_detections(
    preds: &[Detection],
    gts: &[BBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .score
            .partial_cmp(&preds[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                preds[i]
                    .bbox
                    .x
                    .partial_cmp(&preds[j].bbox.x)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(
                preds[i]
                    .bbox
                    .y
                    .partial_cmp(&preds[j].bbox.y)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(
                preds[i]
                    .bbox
                    .w
                    .partial_cmp(&preds[j].bbox.w)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(
                preds[i]
                    .bbox
                    .h
                    .partial_cmp(&preds[j].bbox.h)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let ov = preds[pi].bbox.iou(gt);
            if ov >= iou_threshold && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, ov)) = best {
            gt_taken[gi] = true;
            pairs.push((pi, gi, ov));
        }
    }
    pairs.sort_by_key(|&(pi, _, _)| pi);
    let tp = pairs.len();
    MatchResult {
        true_positives: tp,
        false_positives: preds.len() - tp,
        false_negatives: gts.len() - tp,
        pairs,
    }
}

/// Precision/recall with explicit degenerate-denominator flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// False when TP+FP was zero and precision was forced to 0.
    pub precision_defined: bool,
    /// False when TP+FN was zero and recall was forced to 0.
    pub recall_defined: bool,
}

pub fn precision_recall(m: &MatchResult) -> PrecisionRecall {
    let np = m.true_positives + m.false_positives;
    let ng = m.true_positives + m.false_negatives;
    PrecisionRecall {
        precision: if np > 0 {
            m.true_positives as f64 / np as f64
        } else {
            0.0
        },
        recall: if ng > 0 {
            m.true_positives as f64 / ng as f64
        } else {
            0.0
        },
        precision_defined: np > 0,
        recall_defined: ng > 0,
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0. Scale-agnostic
/// (accepts fractions or percentage points).
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Pixel-wise precision/recall over the union of instance masks.
pub fn mask_precision_recall(
    pred_masks: &[Mask],
    gt_masks: &[Mask],
) -> Result<PrecisionRecall> {
    let dims = pred_masks
        .first()
        .or(gt_masks.first())
        .map(|m| m.dims())
        .unwrap_or((0, 0));
    let union_of = |masks: &[Mask]| -> Result<Option<Mask>> {
        let mut acc: Option<Mask> = None;
        for m in masks {
            if m.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "mask dims {:?} vs {:?}",
                    m.dims(),
                    dims
                )));
            }
            acc = Some(match acc {
                None => m.clone(),
                Some(a) => a.or(m)?,
            });
        }
        Ok(acc)
    };
    let pred = union_of(pred_masks)?;
    let gt = union_of(gt_masks)?;
    let (inter, np, ng) = match (&pred, &gt) {
        (Some(p), Some(g)) => (p.and(g)?.count(), p.count(), g.count()),
        (Some(p), None) => (0, p.count(), 0),
        (None, Some(g)) => (0, 0, g.count()),
        (None, None) => (0, 0, 0),
    };
    Ok(PrecisionRecall {
        precision: if np > 0 { inter as f64 / np as f64 } else { 0.0 },
        recall: if ng > 0 { inter as f64 / ng as f64 } else { 0.0 },
        precision_defined: np > 0,
        recall_defined: ng > 0,
    })
}

// ------------------------------------------------------------- features

/// Matrix of per-sample feature vectors plus the extractor that made them.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub extractor_id: String,
}

pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn extract(&self, image: &RgbImage) -> Array1<f64>;
}

/// Default embedder: a small fixed-seed random-weight convolutional net.
/// Deterministic and dependency-free; adequate for relative comparisons
/// between image sets at desk scale. Features are hypercolumn statistics:
/// a 1x1 random color-mixing stage plus two strided 3x3 stages, with
/// per-channel spatial mean and standard deviation pooled from every
/// stage (16 + 24 + 24 = 64 dims).
pub struct RandomConvEmbedder {
    color_mix: Array1<f64>, // 8x3, 1x1 kernels
    convs: Vec<Array1<f64>>,
    shapes: Vec<(usize, usize)>, // (out_ch, in_ch), 3x3 kernels
    id: String,
}

impl RandomConvEmbedder {
    pub const INPUT_SIZE: u32 = 64;
    const COLOR_CH: usize = 8;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color_mix = Array1::from_shape_fn(Self::COLOR_CH * 3, |_| rng.gen_range(-1.0..1.0));
        let shapes = vec![(12usize, Self::COLOR_CH), (12, 12)];
        let convs = shapes
            .iter()
            .map(|&(o, i)| {
                let bound = (2.0 / (i * 9) as f64).sqrt();
                Array1::from_shape_fn(o * i * 9, |_| rng.gen_range(-bound..bound))
            })
            .collect();
        RandomConvEmbedder {
            color_mix,
            convs,
            shapes,
            id: format!("random-conv-d64-seed{seed}"),
        }
    }

    /// 1x1 random color mixing with relu; keeps spatial resolution.
    fn color_stage(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut out = Array3::<f64>::zeros((Self::COLOR_CH, h, w));
        for o in 0..Self::COLOR_CH {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        acc += self.color_mix[o * 3 + i] * x[(i, y, xx)];
                    }
                    out[(o, y, xx)] = acc.max(0.0);
                }
            }
        }
        out
    }

    fn conv_relu_s2(&self, layer: usize, x: &Array3<f64>) -> Array3<f64> {
        let (oc, ic) = self.shapes[layer];
        let w = &self.convs[layer];
        let (h, wid) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h / 2, wid / 2);
        let mut out = Array3::<f64>::zeros((oc, oh, ow));
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..ic {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = (2 * oy + ky) as isize - 1;
                                let sx = (2 * ox + kx) as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wid as isize {
                                    continue;
                                }
                                acc += w[((o * ic + i) * 9) + ky * 3 + kx]
                                    * x[(i, sy as usize, sx as usize)];
                            }
                        }
                    }
                    out[(o, oy, ox)] = acc.max(0.0);
                }
            }
        }
        out
    }

    fn pooled_stats(x: &Array3<f64>, out: &mut Vec<f64>) {
        let c = x.shape()[0];
        let hw = (x.shape()[1] * x.shape()[2]) as f64;
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), ci);
            let mean = plane.sum() / hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            out.push(mean);
            out.push(var.sqrt());
        }
    }
}

/// Bilinear resize to a fixed square edge.
fn resize_bilinear(img: &RgbImage, edge: u32) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, edge as usize, edge as usize));
    for oy in 0..edge {
        for ox in 0..edge {
            let fx = (ox as f64 + 0.5) * w as f64 / edge as f64 - 0.5;
            let fy = (oy as f64 + 0.5) * h as f64 / edge as f64 - 0.5;
            let x0 = fx.floor().clamp(0.0, (w - 1) as f64) as u32;
            let y0 = fy.floor().clamp(0.0, (h - 1) as f64) as u32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let tx = (fx - x0 as f64).clamp(0.0, 1.0);
            let ty = (fy - y0 as f64).clamp(0.0, 1.0);
            for c in 0..3 {
                let v00 = img.get_pixel(x0, y0)[c] as f64;
                let v10 = img.get_pixel(x1, y0)[c] as f64;
                let v01 = img.get_pixel(x0, y1)[c] as f64;
                let v11 = img.get_pixel(x1, y1)[c] as f64;
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                out[(c, oy as usize, ox as usize)] = v / 255.0;
            }
        }
    }
    out
}

impl FeatureExtractor for RandomConvEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    /// 64-d embedding: hypercolumn mean/std statistics over the color
    /// stage and both texture stages.
    fn extract(&self, image: &RgbImage) -> Array1<f64> {
        let input = resize_bilinear(image, Self::INPUT_SIZE);
        let mut feats = Vec::with_capacity(64);
        let c0 = self.color_stage(&input);
        Self::pooled_stats(&c0, &mut feats);
        let c1 = self.conv_relu_s2(0, &c0);
        Self::pooled_stats(&c1, &mut feats);
        let c2 = self.conv_relu_s2(1, &c1);
        Self::pooled_stats(&c2, &mut feats);
        debug_assert_eq!(feats.len(), 64);
        Array1::from_vec(feats)
    }
}

/// One feature vector per patch, rows in input order.
pub fn extract_features(
    patches: &[RgbImage],
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureSet> {
    if patches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature extraction needs >= 2 patches, got {}",
            patches.len()
        )));
    }
    let rows: Vec<Array1<f64>> = patches.iter().map(|p| extractor.extract(p)).collect();
    let d = rows[0].len();
    let mut features = Array2::<f64>::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).assign(r);
    }
    Ok(FeatureSet {
        features,
        extractor_id: extractor.id().to_string(),
    })
}

// ------------------------------------------------------ Fréchet distance

fn mean_and_cov(f: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let mut mean = Array1::<f64>::zeros(d);
    for r in f.rows() {
        mean += &r;
    }
    mean /= n as f64;
    // Unbiased covariance (n-1), the standard convention for this metric.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in f.rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition; small negative
/// eigenvalues (roundoff) are clamped to zero, large ones are an error.
fn sqrtm_psd(m: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < SQRT_EIG_TOLERANCE {
            return Err(Error::NonFinite(format!(
                "matrix square root of {label}: eigenvalue {v} below tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`.
pub fn frechet_distance(fa: &FeatureSet, fb: &FeatureSet) -> Result<f64> {
    let (na, da) = (fa.features.shape()[0], fa.features.shape()[1]);
    let (nb, db) = (fb.features.shape()[0], fb.features.shape()[1]);
    if da != db {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {da} vs {db}"
        )));
    }
    if na < 2 || nb < 2 {
        return Err(Error::InvalidArgument(
            "covariance needs at least 2 samples per set".into(),
        ));
    }
    if fa.features.iter().chain(fb.features.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(&fa.features);
    let (mu_b, cov_b) = mean_and_cov(&fb.features);

    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    // Tr((Sa Sb)^(1/2)) via the symmetric form A^(1/2) Sb A^(1/2).
    let root_a = sqrtm_psd(&cov_a, "cov_a")?;
    let inner = &root_a * &cov_b * &root_a;
    let root_inner = sqrtm_psd(&inner, "cov_a^1/2 cov_b cov_a^1/2")?;
    let tr = cov_a.trace() + cov_b.trace() - 2.0 * root_inner.trace();

    Ok((mean_term + tr).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{DetSource, Frame};
    use ndarray::array;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            id: "p".into(),
            bbox: BBox::new(x, y, w, h),
            score,
            instance_mask: None,
            frame: Frame::Patch,
            source: DetSource::He,
        }
    }

    #[test]
    fn matching_basic_cases() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 10.0, 10.0)];
        // Exact predictions match everything.
        let preds: Vec<Detection> = gts
            .iter()
            .map(|b| det(b.x, b.y, b.w, b.h, 0.9))
            .collect();
        let m = match_detections(&preds, &gts, 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 0, 0));

        // 2 preds, 2 gts, one overlap: TP=1, FP=1, FN=1.
        let preds = vec![det(0.0, 1.0, 10.0, 10.0, 0.9), det(70.0, 70.0, 8.0, 8.0, 0.8)];
        let m = match_detections(&preds, &gts, 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 1));

        // Empty predictions: all gts missed.
        let m = match_detections(&[], &gts, 0.5);
        assert_eq!(m.false_negatives, 2);
    }

    #[test]
    fn matching_is_input_order_invariant() {
        let gts = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(8.0, 0.0, 10.0, 10.0),
        ];
        let a = det(1.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(7.0, 0.0, 10.0, 10.0, 0.9);
        let m1 = match_detections(&[a.clone(), b.clone()], &gts, 0.3);
        let m2 = match_detections(&[b, a], &gts, 0.3);
        assert_eq!(m1.true_positives, m2.true_positives);
        // Same pred->gt assignment regardless of input order (pairs are
        // reported in input order, so compare as sets of boxes).
        let set1: std::collections::BTreeSet<(usize, usize)> = m1
            .pairs
            .iter()
            .map(|&(pi, gi, _)| (if pi == 0 { 0 } else { 1 }, gi))
            .collect();
        assert_eq!(set1.len(), m2.pairs.len());
    }

    /// Brute-force greedy matcher for small instances.
    fn match_oracle(preds: &[Detection], gts: &[BBox], thr: f64) -> (usize, usize, usize) {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&i, &j| {
            preds[j]
                .score
                .partial_cmp(&preds[i].score)
                .unwrap()
                .then(preds[i].bbox.x.partial_cmp(&preds[j].bbox.x).unwrap())
                .then(preds[i].bbox.y.partial_cmp(&preds[j].bbox.y).unwrap())
                .then(preds[i].bbox.w.partial_cmp(&preds[j].bbox.w).unwrap())
                .then(preds[i].bbox.h.partial_cmp(&preds[j].bbox.h).unwrap())
        });
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for &pi in &order {
            let mut best: Option<(usize, f64)> = None;
            for gi in 0..gts.len() {
                if taken[gi] {
                    continue;
                }
                let ov = preds[pi].bbox.iou(&gts[gi]);
                if ov >= thr && best.map_or(true, |(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                tp += 1;
            }
        }
        (tp, preds.len() - tp, gts.len() - tp)
    }

    #[test]
    fn matching_counts_vs_oracle_on_random_instances() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..300 {
            let np = rng.gen_range(0..=6);
            let ng = rng.gen_range(0..=6);
            let preds: Vec<Detection> = (0..np)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..40.0f64).round(),
                        rng.gen_range(0.0..40.0f64).round(),
                        rng.gen_range(5.0..25.0f64).round(),
                        rng.gen_range(5.0..25.0f64).round(),
                        (rng.gen_range(0.0..1.0f64) * 4.0).round() / 4.0,
                    )
                })
                .collect();
            let gts: Vec<BBox> = (0..ng)
                .map(|_| {
                    BBox::new(
                        rng.gen_range(0.0..40.0f64).round(),
                        rng.gen_range(0.0..40.0f64).round(),
                        rng.gen_range(5.0..25.0f64).round(),
                        rng.gen_range(5.0..25.0f64).round(),
                    )
                })
                .collect();
            let m = match_detections(&preds, &gts, 0.5);
            let (tp, fp, fnn) = match_oracle(&preds, &gts, 0.5);
            assert_eq!(
                (m.true_positives, m.false_positives, m.false_negatives),
                (tp, fp, fnn)
            );
            assert_eq!(m.true_positives + m.false_positives, preds.len());
            assert_eq!(m.true_positives + m.false_negatives, gts.len());
        }
    }

    #[test]
    fn precision_recall_cases() {
        let m = MatchResult {
            true_positives: 1,
            false_positives: 1,
            false_negatives: 1,
            pairs: vec![],
        };
        let pr = precision_recall(&m);
        assert_eq!((pr.precision, pr.recall), (0.5, 0.5));
        assert!(pr.precision_defined && pr.recall_defined);

        let empty = MatchResult {
            true_positives: 0,
            false_positives: 0,
            false_negatives: 3,
            pairs: vec![],
        };
        let pr = precision_recall(&empty);
        assert_eq!(pr.precision, 0.0);
        assert!(!pr.precision_defined);
        assert!(pr.recall_defined);
    }

    #[test]
    fn f1_reproduces_published_detection_rows() {
        // Internal consistency of the reported P/R/F1 triples.
        assert!((f1_score(86.4, 80.4) - 83.29).abs() < 0.005);
        assert!((f1_score(86.0, 78.1) - 81.86).abs() < 0.005);
        assert!((f1_score(89.5, 81.9) - 85.53).abs() < 0.005);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert_eq!(f1_score(1.0, 1.0), 1.0);
    }

    #[test]
    fn mask_precision_recall_cases() {
        let gt = Mask::from_fn(10, 10, |x, _| x < 5);
        let pr = mask_precision_recall(&[gt.clone()], &[gt.clone()]).unwrap();
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));

        // Pred covers gt plus an equal-area false region.
        let pred = Mask::from_fn(10, 10, |_, _| true);
        let gt_half = Mask::from_fn(10, 10, |x, _| x < 5);
        let pr = mask_precision_recall(&[pred], &[gt_half.clone()]).unwrap();
        assert_eq!((pr.precision, pr.recall), (0.5, 1.0));

        // Empty predictions against nonempty gt.
        let pr = mask_precision_recall(&[], &[gt_half]).unwrap();
        assert_eq!(pr.precision, 0.0);
        assert!(!pr.precision_defined);
        assert_eq!(pr.recall, 0.0);
    }

    fn feature_set(rows: Vec<Vec<f64>>) -> FeatureSet {
        let n = rows.len();
        let d = rows[0].len();
        let mut f = Array2::zeros((n, d));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                f[(i, j)] = *v;
            }
        }
        FeatureSet {
            features: f,
            extractor_id: "test".into(),
        }
    }

    /// n samples with exact sample mean `mu` and unbiased variance `var`.
    fn exact_moment_samples(n: usize, mu: f64, var: f64) -> Vec<Vec<f64>> {
        let a = (var * (n as f64 - 1.0) / n as f64).sqrt();
        (0..n)
            .map(|i| vec![if i % 2 == 0 { mu + a } else { mu - a }])
            .collect()
    }

    #[test]
    fn frechet_closed_forms() {
        let fa = feature_set(exact_moment_samples(10_000, 0.0, 1.0));
        let fb = feature_set(exact_moment_samples(10_000, 1.0, 1.0));
        // Identical sets -> 0.
        assert!(frechet_distance(&fa, &fa).unwrap() < 1e-6);
        // mu 0 vs 1, var 1 vs 1 -> |0-1|^2 + (1+1-2) = 1.
        assert!((frechet_distance(&fa, &fb).unwrap() - 1.0).abs() < 1e-3);
        // mu 0 both, var 4 vs 1 -> 4+1-2*2 = 1.
        let fc = feature_set(exact_moment_samples(10_000, 0.0, 4.0));
        assert!((frechet_distance(&fa, &fc).unwrap() - 1.0).abs() < 1e-3);
        // Symmetry.
        let d1 = frechet_distance(&fa, &fb).unwrap();
        let d2 = frechet_distance(&fb, &fa).unwrap();
        assert!((d1 - d2).abs() < 1e-9);
    }

    #[test]
    fn frechet_rotation_invariance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..200)
                .map(|_| vec![rng.gen_range(-1.0..1.0) + shift, rng.gen_range(-2.0..2.0)])
                .collect()
        };
        let a = mk(&mut rng, 0.0);
        let b = mk(&mut rng, 0.7);
        let theta: f64 = 0.6;
        let rot = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    vec![
                        theta.cos() * r[0] - theta.sin() * r[1],
                        theta.sin() * r[0] + theta.cos() * r[1],
                    ]
                })
                .collect()
        };
        let d = frechet_distance(&feature_set(a.clone()), &feature_set(b.clone())).unwrap();
        let dr = frechet_distance(&feature_set(rot(&a)), &feature_set(rot(&b))).unwrap();
        assert!((d - dr).abs() < 1e-6, "{d} vs {dr}");
    }

    #[test]
    fn extractor_is_deterministic_and_row_aligned() {
        let img1 = RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 8, y as u8 * 8, 40]));
        let img2 = RgbImage::from_fn(32, 32, |x, y| image::Rgb([200, x as u8 * 4, y as u8]));
        let ex = RandomConvEmbedder::new(0xF1D);
        let fs = extract_features(&[img1.clone(), img2.clone(), img1.clone()], &ex).unwrap();
        assert_eq!(fs.features.shape(), &[3, 64]);
        // Identical patches give identical rows.
        assert_eq!(fs.features.row(0), fs.features.row(2));
        // Permuting inputs permutes rows.
        let fs2 = extract_features(&[img2, img1.clone(), img1], &ex).unwrap();
        assert_eq!(fs.features.row(1), fs2.features.row(0));
        // Fewer than 2 patches is an error.
        assert!(extract_features(&[RgbImage::new(8, 8)], &ex).is_err());
    }
}

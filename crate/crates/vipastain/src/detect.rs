//! TLS detection: six-channel early fusion, a minimal two-scale grid
//! detector, and late fusion of two detectors' outputs via NMS.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::RgbImage;
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgutil::{BBox, Mask};
use crate::nn::adam::TensorBlob;
use crate::nn::{Adam, ParamId, ParamStore, Tape, TensorId};
use crate::patchio::GridPatchRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    Patch,
    Wsi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetSource {
    He,
    Cd20,
    Fused,
}

impl DetSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DetSource::He => "he",
            DetSource::Cd20 => "cd20",
            DetSource::Fused => "fused",
        }
    }
}

/// One detection: box, confidence, optional instance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Patch id in patch frame, slide id in wsi frame.
    pub id: String,
    pub bbox: BBox,
    pub score: f64,
    pub instance_mask: Option<Mask>,
    pub frame: Frame,
    pub source: DetSource,
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Concatenate an H&E patch and a (possibly virtual) CD20 patch into a
/// 6xHxW tensor, channels ordered [he.R, he.G, he.B, cd.R, cd.G, cd.B],
/// raw 0..255 values.
pub fn fuse_channels(he: &RgbImage, cd20: &RgbImage) -> Result<Array3<f64>> {
    if he.dimensions() != cd20.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "fuse dims {:?} vs {:?}",
            he.dimensions(),
            cd20.dimensions()
        )));
    }
    let (w, h) = he.dimensions();
    let mut out = Array3::<f64>::zeros((6, h as usize, w as usize));
    for (x, y, px) in he.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px[c] as f64;
        }
    }
    for (x, y, px) in cd20.enumerate_pixels() {
        for c in 0..3 {
            out[(3 + c, y as usize, x as usize)] = px[c] as f64;
        }
    }
    Ok(out)
}

/// Deterministic ordering for NMS and greedy matching: descending score,
/// ties by smaller (x, y), then (w, h).
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.bbox.y.partial_cmp(&b.bbox.y).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.bbox.w.partial_cmp(&b.bbox.w).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.bbox.h.partial_cmp(&b.bbox.h).unwrap_or(std::cmp::Ordering::Equal))
}

/// Greedy non-maximum suppression: keep the highest-scoring detection,
/// drop everything overlapping it with IoU > threshold, repeat.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nms iou threshold must be in (0,1), got {iou_threshold}"
        )));
    }
    let mut sorted: Vec<Detection> = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Late fusion: NMS over the union of two detectors' outputs; survivors
/// keep their source tag.
pub fn merge_detections(
    dets_he: &[Detection],
    dets_cd20: &[Detection],
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    for d in dets_he.iter().chain(dets_cd20) {
        if d.frame != dets_he.first().or(dets_cd20.first()).unwrap().frame {
            return Err(Error::InvalidArgument(
                "merge_detections: mixed frames".into(),
            ));
        }
    }
    let mut all = dets_he.to_vec();
    all.extend_from_slice(dets_cd20);
    nms(&all, iou_threshold)
}

// ------------------------------------------------------------- the model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorMode {
    He,
    Cd20,
    Fused,
}

impl DetectorMode {
    pub fn input_channels(self) -> usize {
        match self {
            DetectorMode::He | DetectorMode::Cd20 => 3,
            DetectorMode::Fused => 6,
        }
    }

    pub fn source(self) -> DetSource {
        match self {
            DetectorMode::He => DetSource::He,
            DetectorMode::Cd20 => DetSource::Cd20,
            DetectorMode::Fused => DetSource::Fused,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(DetectorMode::He),
            "cd20" => Ok(DetectorMode::Cd20),
            "fused" => Ok(DetectorMode::Fused),
            other => Err(Error::InvalidArgument(format!(
                "unknown detector mode {other:?} (he|cd20|fused)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceMaskMode {
    /// Box-shaped instance masks.
    Box,
    /// Inscribed-ellipse masks (TLS regions are disc-like).
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    pub patch_size: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub base_channels: usize,
    /// Anchor edge lengths as fractions of the patch size, one per scale.
    pub anchor_fractions: [f64; 2],
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Objectness-loss weight on positive cells.
    pub positive_weight: f64,
    pub box_loss_weight: f64,
    pub instance_mask_mode: InstanceMaskMode,
}

impl DetectorConfig {
    pub fn desk_default(mode: DetectorMode, patch_size: u32, seed: u64) -> Self {
        DetectorConfig {
            mode,
            patch_size,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed,
            base_channels: 12,
            anchor_fractions: [0.4, 0.65],
            score_threshold: 0.5,
            nms_iou: 0.5,
            positive_weight: 8.0,
            box_loss_weight: 2.0,
            instance_mask_mode: InstanceMaskMode::Box,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 16 != 0 {
            return Err(Error::InvalidArgument(
                "detector patch_size must be divisible by 16".into(),
            ));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(
                "detector epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidArgument("score_threshold in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvSpec {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormSpec {
    gamma: ParamId,
    beta: ParamId,
}

/// Two-scale grid detector: strided conv backbone, per-cell box regression
/// plus objectness at strides 8 and 16.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorDef {
    c1: ConvSpec,
    n1: NormSpec,
    c2: ConvSpec,
    n2: NormSpec,
    c3: ConvSpec,
    n3: NormSpec,
    head3: ConvSpec,
    c4: ConvSpec,
    n4: NormSpec,
    head4: ConvSpec,
}

impl DetectorDef {
    fn new(store: &mut ParamStore, in_ch: usize, nf: usize, rng: &mut ChaCha8Rng) -> Self {
        let mk_conv = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       shape: (usize, usize, usize, usize),
                       stride: usize| {
            let (w, b) = store.add_conv(name, shape, rng);
            ConvSpec {
                w,
                b,
                stride,
                pad: 1,
            }
        };
        let mk_norm = |store: &mut ParamStore, name: &str, ch: usize| {
            let (gamma, beta) = store.add_norm(name, ch);
            NormSpec { gamma, beta }
        };
        let c1 = mk_conv(store, rng, "det.c1", (nf, in_ch, 3, 3), 2);
        let n1 = mk_norm(store, "det.n1", nf);
        let c2 = mk_conv(store, rng, "det.c2", (2 * nf, nf, 3, 3), 2);
        let n2 = mk_norm(store, "det.n2", 2 * nf);
        let c3 = mk_conv(store, rng, "det.c3", (4 * nf, 2 * nf, 3, 3), 2);
        let n3 = mk_norm(store, "det.n3", 4 * nf);
        let head3 = mk_conv(store, rng, "det.head3", (5, 4 * nf, 3, 3), 1);
        let c4 = mk_conv(store, rng, "det.c4", (4 * nf, 4 * nf, 3, 3), 2);
        let n4 = mk_norm(store, "det.n4", 4 * nf);
        let head4 = mk_conv(store, rng, "det.head4", (5, 4 * nf, 3, 3), 1);
        DetectorDef {
            c1,
            n1,
            c2,
            n2,
            c3,
            n3,
            head3,
            c4,
            n4,
            head4,
        }
    }

    /// Returns raw head maps [N,5,S,S] at strides 8 and 16.
    fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[TensorId],
        x: TensorId,
    ) -> (TensorId, TensorId) {
        let conv = |t: &mut Tape, s: &ConvSpec, x: TensorId| {
            t.conv2d(x, leaves[s.w], leaves[s.b], s.stride, s.pad)
        };
        let norm =
            |t: &mut Tape, s: &NormSpec, x: TensorId| t.instance_norm(x, leaves[s.gamma], leaves[s.beta], 1e-5);
        let mut h = conv(tape, &self.c1, x);
        h = norm(tape, &self.n1, h);
        h = tape.leaky_relu(h, 0.1);
        h = conv(tape, &self.c2, h);
        h = norm(tape, &self.n2, h);
        h = tape.leaky_relu(h, 0.1);
        h = conv(tape, &self.c3, h);
        h = norm(tape, &self.n3, h);
        let p3 = tape.leaky_relu(h, 0.1);
        let head3 = conv(tape, &self.head3, p3);
        let mut h4 = conv(tape, &self.c4, p3);
        h4 = norm(tape, &self.n4, h4);
        let p4 = tape.leaky_relu(h4, 0.1);
        let head4 = conv(tape, &self.head4, p4);
        (head3, head4)
    }
}

/// Trained detector: parameters plus decode configuration.
pub struct DetectorModel {
    pub config: DetectorConfig,
    store: ParamStore,
    def: DetectorDef,
}

pub struct ScaleSpec {
    pub stride: usize,
    pub anchor: f64,
    pub cells: usize,
}

impl DetectorModel {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let def = DetectorDef::new(
            &mut store,
            config.mode.input_channels(),
            config.base_channels,
            &mut rng,
        );
        Ok(DetectorModel { config, store, def })
    }

    pub fn input_channels(&self) -> usize {
        self.config.mode.input_channels()
    }

    pub fn scales(&self) -> [ScaleSpec; 2] {
        let ps = self.config.patch_size as usize;
        [
            ScaleSpec {
                stride: 8,
                anchor: self.config.anchor_fractions[0] * ps as f64,
                cells: ps / 8,
            },
            ScaleSpec {
                stride: 16,
                anchor: self.config.anchor_fractions[1] * ps as f64,
                cells: ps / 16,
            },
        ]
    }

    /// Assign each ground-truth box to (scale, cell) by anchor similarity
    /// and center location. Returns per-scale target maps:
    /// objectness [S,S] and box targets [4,S,S] with a positives mask.
    fn build_targets(&self, boxes: &[BBox]) -> Vec<(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)> {
        let scales = self.scales();
        let mut maps: Vec<(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)> = scales
            .iter()
            .map(|s| {
                (
                    ArrayD::zeros(IxDyn(&[1, s.cells, s.cells])),
                    ArrayD::zeros(IxDyn(&[4, s.cells, s.cells])),
                    ArrayD::zeros(IxDyn(&[4, s.cells, s.cells])),
                )
            })
            .collect();
        for b in boxes {
            let side = (b.w * b.h).sqrt().max(1.0);
            let si = if (side.ln() - scales[0].anchor.ln()).abs()
                <= (side.ln() - scales[1].anchor.ln()).abs()
            {
                0
            } else {
                1
            };
            let s = &scales[si];
            let cx = b.x + b.w / 2.0;
            let cy = b.y + b.h / 2.0;
            let j = ((cx / s.stride as f64).floor() as usize).min(s.cells - 1);
            let i = ((cy / s.stride as f64).floor() as usize).min(s.cells - 1);
            let (obj, tgt, mask) = &mut maps[si];
            obj[[0, i, j]] = 1.0;
            tgt[[0, i, j]] = (cx / s.stride as f64 - j as f64).clamp(0.01, 0.99);
            tgt[[1, i, j]] = (cy / s.stride as f64 - i as f64).clamp(0.01, 0.99);
            tgt[[2, i, j]] = (b.w.max(1.0) / s.anchor).ln();
            tgt[[3, i, j]] = (b.h.max(1.0) / s.anchor).ln();
            for c in 0..4 {
                mask[[c, i, j]] = 1.0;
            }
        }
        maps
    }

    /// Objectness + box-regression loss over a batch on a fresh tape.
    fn loss_graph(
        &self,
        batch: &ArrayD<f64>,
        boxes: &[Vec<BBox>],
    ) -> (Tape, Vec<TensorId>, TensorId) {
        let n = boxes.len();
        let mut tape = Tape::new();
        let leaves = self.store.leaves(&mut tape);
        let x = tape.leaf(batch.clone(), false);
        let (h3, h4) = self.def.forward(&mut tape, &leaves, x);

        let mut total: Option<TensorId> = None;
        for (si, head) in [h3, h4].into_iter().enumerate() {
            let cells = self.scales()[si].cells;
            // Gather per-sample targets into batch maps.
            let mut obj_t = ArrayD::zeros(IxDyn(&[n, 1, cells, cells]));
            let mut box_t = ArrayD::zeros(IxDyn(&[n, 4, cells, cells]));
            let mut box_m = ArrayD::zeros(IxDyn(&[n, 4, cells, cells]));
            let mut weights = ArrayD::from_elem(IxDyn(&[n, 1, cells, cells]), 1.0);
            let mut n_pos = 0.0f64;
            for (bi, bs) in boxes.iter().enumerate() {
                let maps = self.build_targets(bs);
                let (o, t, m) = &maps[si];
                for i in 0..cells {
                    for j in 0..cells {
                        obj_t[[bi, 0, i, j]] = o[[0, i, j]];
                        if o[[0, i, j]] > 0.5 {
                            weights[[bi, 0, i, j]] = self.config.positive_weight;
                            n_pos += 1.0;
                        }
                        for c in 0..4 {
                            box_t[[bi, c, i, j]] = t[[c, i, j]];
                            box_m[[bi, c, i, j]] = m[[c, i, j]];
                        }
                    }
                }
            }

            // Objectness: weighted BCE on sigmoid(raw[4]).
            let obj_raw = tape.slice_channel(head, 4);
            let obj_p = tape.sigmoid(obj_raw);
            let obj_loss = tape.bce_loss_weighted(obj_p, obj_t, weights, 1e-7);

            // Box terms: L2 on (sigma(txy) - t) and (twh - t), positives only.
            let txy_raw = {
                let tx = tape.slice_channel(head, 0);
                let ty = tape.slice_channel(head, 1);
                tape.concat_channels(tx, ty)
            };
            let txy = tape.sigmoid(txy_raw);
            let twh = {
                let tw = tape.slice_channel(head, 2);
                let th = tape.slice_channel(head, 3);
                tape.concat_channels(tw, th)
            };
            let pred_box = tape.concat_channels(txy, twh);
            let tgt = tape.leaf(box_t, false);
            let d = tape.sub(pred_box, tgt);
            let d2 = tape.mul(d, d);
            let masked = tape.mul_const(d2, box_m);
            let ssum = tape.sum_all(masked);
            let box_loss = tape.mul_scalar(
                ssum,
                self.config.box_loss_weight / n_pos.max(1.0),
            );

            let scale_loss = tape.add(obj_loss, box_loss);
            total = Some(match total {
                Some(t0) => tape.add(t0, scale_loss),
                None => scale_loss,
            });
        }
        (tape, leaves, total.unwrap())
    }

    /// Decode one sample of the raw head maps into detections.
    fn decode(
        &self,
        id: &str,
        heads: &[ArrayD<f64>; 2],
        sample: usize,
    ) -> Vec<Detection> {
        let mut dets = Vec::new();
        let ps = self.config.patch_size as f64;
        for (si, head) in heads.iter().enumerate() {
            let s = &self.scales()[si];
            let h4 = head.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            for i in 0..s.cells {
                for j in 0..s.cells {
                    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
                    let score = sigmoid(h4[(sample, 4, i, j)]);
                    if score < self.config.score_threshold {
                        continue;
                    }
                    let cx = (j as f64 + sigmoid(h4[(sample, 0, i, j)])) * s.stride as f64;
                    let cy = (i as f64 + sigmoid(h4[(sample, 1, i, j)])) * s.stride as f64;
                    let w = s.anchor * h4[(sample, 2, i, j)].clamp(-3.0, 3.0).exp();
                    let h = s.anchor * h4[(sample, 3, i, j)].clamp(-3.0, 3.0).exp();
                    let x0 = (cx - w / 2.0).max(0.0);
                    let y0 = (cy - h / 2.0).max(0.0);
                    let bbox = BBox::new(
                        x0,
                        y0,
                        w.min(ps - x0).max(1.0),
                        h.min(ps - y0).max(1.0),
                    );
                    dets.push(Detection {
                        id: id.to_string(),
                        bbox,
                        score,
                        instance_mask: None,
                        frame: Frame::Patch,
                        source: self.config.mode.source(),
                    });
                }
            }
        }
        dets
    }

    fn attach_masks(&self, dets: &mut [Detection]) {
        let size = self.config.patch_size;
        for d in dets {
            let m = match self.config.instance_mask_mode {
                InstanceMaskMode::Box => d.bbox.to_mask(size, size),
                InstanceMaskMode::Ellipse => {
                    let (cx, cy) = (d.bbox.x + d.bbox.w / 2.0, d.bbox.y + d.bbox.h / 2.0);
                    let (a, b) = (d.bbox.w / 2.0, d.bbox.h / 2.0);
                    Mask::from_fn(size, size, |x, y| {
                        let dx = (x as f64 + 0.5 - cx) / a.max(0.5);
                        let dy = (y as f64 + 0.5 - cy) / b.max(0.5);
                        dx * dx + dy * dy <= 1.0
                    })
                }
            };
            d.instance_mask = Some(m);
        }
    }

    /// Score-thresholded, NMS-filtered detections for one input tensor
    /// [C,H,W] in raw 0..255 scale.
    pub fn detect_patch(&self, id: &str, input: &Array3<f64>) -> Result<Vec<Detection>> {
        if input.shape()[0] != self.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "detector expects {} channels, got {}",
                self.input_channels(),
                input.shape()[0]
            )));
        }
        let heads = self.forward_raw(&to_batch(&[input.clone()]));
        let mut dets = self.decode(id, &heads, 0);
        dets = nms(&dets, self.config.nms_iou)?;
        self.attach_masks(&mut dets);
        Ok(dets)
    }

    fn forward_raw(&self, batch: &ArrayD<f64>) -> [ArrayD<f64>; 2] {
        let mut tape = Tape::new();
        let leaves = self.store.leaves_frozen(&mut tape);
        let x = tape.leaf(batch.clone(), false);
        let (h3, h4) = self.def.forward(&mut tape, &leaves, x);
        [tape.value(h3).clone(), tape.value(h4).clone()]
    }

    /// Per-patch detection translated into slide coordinates, deduplicated
    /// across overlapping tiles by a global NMS.
    pub fn detect_wsi(
        &self,
        patches: &[(GridPatchRef, Array3<f64>)],
    ) -> Result<Vec<Detection>> {
        let mut all = Vec::new();
        for (r, img) in patches {
            let dets = self.detect_patch(&r.patch_id(), img)?;
            for mut d in dets {
                d.bbox = d.bbox.translate(r.origin_x as f64, r.origin_y as f64);
                d.frame = Frame::Wsi;
                d.id = r.slide_id.clone();
                d.instance_mask = None;
                all.push(d);
            }
        }
        nms(&all, self.config.nms_iou)
    }

    // ---------------------------------------------------------- training

    /// Train on (input tensor, boxes) pairs; returns per-epoch mean loss.
    pub fn train(
        &mut self,
        data: &[(Array3<f64>, Vec<BBox>)],
        curve_csv: Option<&Path>,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty detector training set".into()));
        }
        let mut adam = Adam::new(
            &self.store,
            (0..self.store.len()).collect(),
            self.config.learning_rate,
        );
        adam.beta1 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let bs = self.config.batch_size.min(data.len());
        let mut curve = Vec::new();
        let mut csv = match curve_csv {
            Some(p) => {
                let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                writeln!(f, "epoch,loss").map_err(|e| Error::io(p, e))?;
                Some((f, p.to_path_buf()))
            }
            None => None,
        };
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(bs) {
                let tensors: Vec<Array4<f64>> = chunk
                    .iter()
                    .map(|&i| {
                        let t = &data[i].0;
                        t.clone()
                            .insert_axis(ndarray::Axis(0))
                            .mapv(|v| v / 127.5 - 1.0)
                    })
                    .collect();
                let views: Vec<_> = tensors.iter().map(|t| t.view()).collect();
                let batch = ndarray::concatenate(ndarray::Axis(0), &views)
                    .unwrap()
                    .into_dyn();
                let boxes: Vec<Vec<BBox>> = chunk.iter().map(|&i| data[i].1.clone()).collect();
                let (tape, leaves, loss) = self.loss_graph(&batch, &boxes);
                let lval = tape.scalar_value(loss);
                if !lval.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "detector loss at epoch {epoch}"
                    )));
                }
                let grads = tape.backward(loss);
                adam.step(&mut self.store, &leaves, &grads);
                epoch_loss += lval;
                steps += 1;
            }
            let mean = epoch_loss / steps as f64;
            curve.push(mean);
            if let Some((f, p)) = csv.as_mut() {
                writeln!(f, "{epoch},{mean}").map_err(|e| Error::io(&*p, e))?;
            }
        }
        Ok(curve)
    }

    // ------------------------------------------------------ checkpointing

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = DetectorCheckpoint {
            version: 1,
            config: self.config.clone(),
            params: self.store.to_blobs(),
        };
        let json = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: DetectorCheckpoint =
            serde_json::from_str(&data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = DetectorModel::new(ck.config)?;
        model.store.load_blobs(&ck.params)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct DetectorCheckpoint {
    version: u32,
    config: DetectorConfig,
    params: Vec<TensorBlob>,
}

fn to_batch(inputs: &[Array3<f64>]) -> ArrayD<f64> {
    let tensors: Vec<Array4<f64>> = inputs
        .iter()
        .map(|t| t.clone().insert_axis(ndarray::Axis(0)).mapv(|v| v / 127.5 - 1.0))
        .collect();
    let views: Vec<_> = tensors.iter().map(|t| t.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .unwrap()
        .into_dyn()
}

/// RGB image to a [3,H,W] tensor with raw 0..255 values.
pub fn image_to_input(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px[c] as f64;
        }
    }
    out
}

// -------------------------------------------------------- serialization

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    patch_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slide_id: Option<String>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    source: String,
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in dets {
        let rec = DetectionRecord {
            patch_id: (d.frame == Frame::Patch).then(|| d.id.clone()),
            slide_id: (d.frame == Frame::Wsi).then(|| d.id.clone()),
            bbox: d.bbox.as_array(),
            score: d.score,
            source: d.source.as_str().to_string(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Manifest(e.to_string()))?;
        let (id, frame) = match (rec.patch_id, rec.slide_id) {
            (Some(p), None) => (p, Frame::Patch),
            (None, Some(s)) => (s, Frame::Wsi),
            _ => {
                return Err(Error::Manifest(
                    "detection record needs exactly one of patch_id/slide_id".into(),
                ))
            }
        };
        let source = match rec.source.as_str() {
            "he" => DetSource::He,
            "cd20" => DetSource::Cd20,
            "fused" => DetSource::Fused,
            other => {
                return Err(Error::Manifest(format!("unknown source {other:?}")));
            }
        };
        out.push(Detection {
            id,
            bbox: BBox::from_array(rec.bbox),
            score: rec.score,
            instance_mask: None,
            frame,
            source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

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
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(20.0, 20.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert!((iou(&a, &c) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&a, &c), iou(&c, &a));
    }

    #[test]
    fn nms_keeps_highest_and_disjoint() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        // IoU(a, b) = 6*10 / (100+60-60)... build ~0.6 overlap.
        let b = det(0.0, 2.0, 10.0, 10.0, 0.8); // IoU = 80/120 = 0.667
        let c = det(50.0, 50.0, 10.0, 10.0, 0.7);
        let kept = nms(&[b.clone(), c.clone(), a.clone()], 0.5).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);

        // All-disjoint input is unchanged (sorted by score).
        let kept2 = nms(&[c.clone(), a.clone()], 0.5).unwrap();
        assert_eq!(kept2.len(), 2);

        // Single detection maps to itself.
        assert_eq!(nms(&[a.clone()], 0.5).unwrap(), vec![a]);
    }

    /// Brute-force greedy oracle over all inputs; mirrors the spec tie-break.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut pool: Vec<Detection> = dets.to_vec();
        let mut kept = Vec::new();
        while !pool.is_empty() {
            // Select max score with smallest (x, y, w, h) on ties.
            let mut best = 0;
            for i in 1..pool.len() {
                if detection_order(&pool[i], &pool[best]) == std::cmp::Ordering::Less {
                    best = i;
                }
            }
            let chosen = pool.remove(best);
            pool.retain(|d| d.bbox.iou(&chosen.bbox) <= thr);
            kept.push(chosen);
        }
        kept
    }

    #[test]
    fn nms_matches_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..300 {
            let n = rng.gen_range(0..=6);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..50.0f64).round(),
                        rng.gen_range(0.0..50.0f64).round(),
                        rng.gen_range(5.0..30.0f64).round(),
                        rng.gen_range(5.0..30.0f64).round(),
                        // Coarse scores force ties.
                        (rng.gen_range(0.0..1.0f64) * 4.0).round() / 4.0,
                    )
                })
                .collect();
            let thr = rng.gen_range(0.2..0.8);
            assert_eq!(nms(&dets, thr).unwrap(), nms_oracle(&dets, thr));
        }
    }

    #[test]
    fn nms_idempotent_and_survivor_iou_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..6)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..40.0),
                        rng.gen_range(0.0..40.0),
                        rng.gen_range(5.0..25.0),
                        rng.gen_range(5.0..25.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let kept = nms(&dets, 0.5).unwrap();
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    assert!(kept[i].bbox.iou(&kept[j].bbox) <= 0.5);
                }
            }
            assert_eq!(nms(&kept, 0.5).unwrap(), kept);
            assert!(kept.len() <= dets.len());
        }
    }

    #[test]
    fn merge_prefers_higher_score_duplicate() {
        let he = det(0.0, 0.0, 10.0, 10.0, 0.8);
        let mut cd = det(0.0, 0.0, 10.0, 10.0, 0.9);
        cd.source = DetSource::Cd20;
        let merged = merge_detections(&[he.clone()], &[cd.clone()], 0.5).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].source, DetSource::Cd20);

        // One empty list: the other after NMS.
        let merged2 = merge_detections(&[], &[cd.clone()], 0.5).unwrap();
        assert_eq!(merged2, vec![cd]);
    }

    #[test]
    fn fuse_channels_layout() {
        let he = RgbImage::from_fn(4, 4, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let cd = RgbImage::from_fn(4, 4, |x, y| image::Rgb([100 + x as u8, 200, y as u8]));
        let f = fuse_channels(&he, &cd).unwrap();
        assert_eq!(f.shape(), &[6, 4, 4]);
        assert_eq!(f[(0, 2, 1)], 1.0);
        assert_eq!(f[(3, 2, 1)], 101.0);
        assert_eq!(f[(2, 0, 0)], 7.0);

        // fuse(x, x): both halves equal x.
        let fx = fuse_channels(&he, &he).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(fx[(c, y, x)], fx[(3 + c, y, x)]);
                }
            }
        }

        let small = RgbImage::new(2, 2);
        assert!(fuse_channels(&he, &small).is_err());
    }

    #[test]
    fn detector_shapes_and_determinism() {
        let cfg = DetectorConfig::desk_default(DetectorMode::He, 64, 3);
        let model = DetectorModel::new(cfg).unwrap();
        assert_eq!(model.input_channels(), 3);
        let fused = DetectorModel::new(DetectorConfig::desk_default(
            DetectorMode::Fused,
            64,
            3,
        ))
        .unwrap();
        assert_eq!(fused.input_channels(), 6);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..255.0));
        let d1 = model.detect_patch("p", &img).unwrap();
        let d2 = model.detect_patch("p", &img).unwrap();
        assert_eq!(d1, d2);
        for d in &d1 {
            assert!(d.score >= model.config.score_threshold);
        }
        // Channel mismatch is an error.
        assert!(fused.detect_patch("p", &img).is_err());
    }

    #[test]
    fn detector_training_reduces_loss_and_is_seed_deterministic() {
        // Single recurring box; the detector should overfit quickly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for _ in 0..8 {
            let mut img = Array3::from_elem((3, 64, 64), 200.0);
            let bx = rng.gen_range(4..30) as f64;
            let by = rng.gen_range(4..30) as f64;
            for y in by as usize..(by as usize + 24).min(64) {
                for x in bx as usize..(bx as usize + 24).min(64) {
                    img[(0, y, x)] = 30.0;
                    img[(2, y, x)] = 60.0;
                }
            }
            data.push((img, vec![BBox::new(bx, by, 24.0, 24.0)]));
        }
        let mut cfg = DetectorConfig::desk_default(DetectorMode::He, 64, 11);
        cfg.epochs = 10;
        let mut model = DetectorModel::new(cfg.clone()).unwrap();
        let curve = model.train(&data, None).unwrap();
        assert!(
            curve.last().unwrap() < &curve[0],
            "loss did not decrease: {curve:?}"
        );

        let mut model2 = DetectorModel::new(cfg).unwrap();
        let curve2 = model2.train(&data, None).unwrap();
        assert_eq!(curve, curve2);
    }

    #[test]
    fn wsi_translation_preserves_dimensions() {
        let cfg = DetectorConfig::desk_default(DetectorMode::He, 64, 3);
        let model = DetectorModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..255.0));
        let patch_dets = model.detect_patch("s_x512_y0", &img).unwrap();
        let refs = vec![(
            GridPatchRef {
                slide_id: "s".into(),
                grid_x: 1,
                grid_y: 0,
                origin_x: 512,
                origin_y: 0,
                size: 64,
                path: None,
            },
            img,
        )];
        let wsi_dets = model.detect_wsi(&refs).unwrap();
        assert_eq!(wsi_dets.len(), patch_dets.len());
        for (w, p) in wsi_dets.iter().zip(&patch_dets) {
            assert_eq!(w.bbox.x, p.bbox.x + 512.0);
            assert_eq!(w.bbox.y, p.bbox.y);
            assert_eq!(w.bbox.w, p.bbox.w);
            assert_eq!(w.bbox.h, p.bbox.h);
            assert_eq!(w.frame, Frame::Wsi);
            assert_eq!(w.id, "s");
        }
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![det(1.0, 2.0, 3.0, 4.0, 0.5), {
            let mut d = det(9.0, 9.0, 2.0, 2.0, 0.25);
            d.frame = Frame::Wsi;
            d.id = "slide".into();
            d.source = DetSource::Fused;
            d
        }];
        save_detections(&path, &dets).unwrap();
        let back = load_detections(&path).unwrap();
        assert_eq!(back, dets);
    }
}

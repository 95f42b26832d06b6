//! Pipeline orchestration: corpus generation, calibration, transfer
//! training, synthesis, detector training and the desk-scale staining /
//! detection comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::detect::{
    fuse_channels, image_to_input, merge_detections, Detection, DetectorConfig, DetectorMode,
    DetectorModel,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    extract_features, f1_score, frechet_distance, match_detections, FeatureSet, RandomConvEmbedder,
};
use crate::imgutil::{load_rgb, BBox, Mask, StainDomain};
use crate::manifest::{load_annotations, Annotation, DatasetManifest};
use crate::maskextract::{calibrate_domain, CleanParams, DomainThresholds};
use crate::patchio::split_dataset;
use crate::synthdata::{generate_corpus_with, SceneSpec};
use crate::transfer::{self, Direction, TransferConfig, TranslatorBundle};

/// Run directories live under `$VIPASTAIN_RUN_DIR` (default `./runs`) and
/// are named by timestamp + config hash.
pub fn new_run_dir(config: &PipelineConfig) -> Result<PathBuf> {
    let root = std::env::var("VIPASTAIN_RUN_DIR").unwrap_or_else(|_| "runs".to_string());
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = PathBuf::from(root).join(format!("{stamp}-{}", config.short_hash()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Scene template for a domain at the configured patch size.
pub fn scene_template(cfg: &PipelineConfig, domain: StainDomain, seed: u64) -> SceneSpec {
    let scale = (cfg.run.patch_size as f64 / 64.0).powi(2);
    let mut spec = SceneSpec::desk_default(cfg.run.patch_size, seed);
    spec.nucleus_count = (cfg.corpus.nucleus_count_64 as f64 * scale).round() as u32;
    if domain == StainDomain::Cd20 {
        spec.nucleus_count /= cfg.corpus.cd20_scatter_divisor.max(1);
    }
    spec.rbc_blob_count = if domain == StainDomain::He {
        (cfg.corpus.rbc_blobs_64 as f64 * scale).round() as u32
    } else {
        0
    };
    spec.tls_cluster_count = cfg.corpus.max_clusters;
    spec.tls_cluster_density = cfg.corpus.cluster_density;
    spec.noise_sigma = cfg.corpus.noise_sigma;
    spec
}

/// Generate a corpus whose per-patch TLS cluster count varies 0..=max
/// (deterministically from the patch seed), so detection sees negatives.
pub fn gen_corpus(
    cfg: &PipelineConfig,
    domain: StainDomain,
    count: u32,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let base_seed = match domain {
        StainDomain::He => cfg.run.seed,
        _ => cfg.run.seed.wrapping_add(0x9e3779b9),
    };
    let template = scene_template(cfg, domain, base_seed);
    let max = cfg.corpus.max_clusters;
    generate_corpus_with(&template, domain, count, out_dir, move |_, mut spec| {
        if max > 0 {
            let mut vrng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545F4914F6CDD1D));
            spec.tls_cluster_count = vrng.gen_range(0..=max);
        }
        spec
    })
}

/// Cleanup parameters per domain at the configured scale.
pub fn clean_params(cfg: &PipelineConfig, domain: StainDomain) -> CleanParams {
    let scale = (cfg.run.patch_size as f64 / 64.0).powi(2);
    let px = cfg.run.patch_size as f64;
    match domain {
        StainDomain::He | StainDomain::VirtualHe => CleanParams {
            min_component_px: (cfg.calibrate.he_min_component_64 as f64 * scale).round() as u32,
            fill_holes: cfg.calibrate.fill_holes,
        },
        StainDomain::Cd20 | StainDomain::VirtualCd20 => CleanParams {
            min_component_px: (cfg.calibrate.cd20_min_component_frac * px * px) as u32,
            fill_holes: cfg.calibrate.fill_holes,
        },
    }
}

fn annotations_by_patch(manifest: &DatasetManifest) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut out = BTreeMap::new();
    let mut loaded: BTreeMap<PathBuf, Vec<Annotation>> = BTreeMap::new();
    for row in &manifest.rows {
        let Some(ann_path) = &row.annotation_path else {
            out.insert(row.patch_id.clone(), Vec::new());
            continue;
        };
        if !loaded.contains_key(ann_path) {
            loaded.insert(ann_path.clone(), load_annotations(ann_path)?);
        }
        let anns = &loaded[ann_path];
        let boxes = anns
            .iter()
            .find(|a| a.patch_id == row.patch_id)
            .map(|a| a.boxes.iter().map(|&b| BBox::from_array(b)).collect())
            .unwrap_or_default();
        out.insert(row.patch_id.clone(), boxes);
    }
    Ok(out)
}

/// Pick the `sample` patches with the largest annotated TLS area; dense
/// tissue anchors the pooled calibration histogram.
pub fn calibration_sample<'a>(
    manifest: &'a DatasetManifest,
    sample: usize,
) -> Result<Vec<&'a crate::manifest::ManifestRow>> {
    let anns = annotations_by_patch(manifest)?;
    let mut scored: Vec<(f64, &crate::manifest::ManifestRow)> = manifest
        .rows
        .iter()
        .map(|r| {
            let area: f64 = anns
                .get(&r.patch_id)
                .map(|bs| bs.iter().map(|b| b.area()).sum())
                .unwrap_or(0.0);
            (area, r)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.patch_id.cmp(&b.1.patch_id))
    });
    Ok(scored.into_iter().take(sample.max(1)).map(|(_, r)| r).collect())
}

/// Pooled multi-Otsu calibration over a TLS-rich sample of the manifest.
pub fn calibrate(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    domain: StainDomain,
) -> Result<DomainThresholds> {
    let rows = calibration_sample(manifest, cfg.calibrate.sample_patches)?;
    let mut images = Vec::with_capacity(rows.len());
    for r in rows {
        images.push(load_rgb(&r.image_path)?);
    }
    let mut ths = calibrate_domain(images.iter(), domain)?;
    for ts in &mut ths.sets {
        ts.working_index = cfg.calibrate.working_index;
    }
    Ok(ths)
}

pub fn transfer_config(cfg: &PipelineConfig, lambda_mask: f64, seed: u64) -> TransferConfig {
    TransferConfig {
        patch_size: cfg.run.patch_size,
        epochs: cfg.transfer.epochs,
        lambda_cycle: cfg.transfer.lambda_cycle,
        lambda_mask,
        mask_loss_mode: cfg.transfer.mask_loss_mode,
        mask_pairing: cfg.transfer.mask_pairing,
        soft_temperature: cfg.transfer.soft_temperature,
        learning_rate: cfg.transfer.learning_rate,
        batch_size: cfg.transfer.batch_size,
        seed,
        base_channels: cfg.transfer.base_channels,
        residual_blocks: cfg.transfer.residual_blocks,
    }
}

pub fn detector_config(cfg: &PipelineConfig, mode: DetectorMode, seed: u64) -> DetectorConfig {
    DetectorConfig {
        mode,
        patch_size: cfg.run.patch_size,
        epochs: cfg.detector.epochs,
        batch_size: cfg.detector.batch_size,
        learning_rate: cfg.detector.learning_rate,
        seed,
        base_channels: cfg.detector.base_channels,
        anchor_fractions: cfg.detector.anchor_fractions,
        score_threshold: cfg.detector.score_threshold,
        nms_iou: cfg.detector.nms_iou,
        positive_weight: cfg.detector.positive_weight,
        box_loss_weight: cfg.detector.box_loss_weight,
        instance_mask_mode: cfg.detector.instance_mask_mode,
    }
}

/// Translate every patch of an H&E manifest into virtual CD20, writing
/// images plus a manifest that pairs rows by patch_id.
pub fn synthesize_manifest(
    bundle: &TranslatorBundle,
    he_manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rows = Vec::new();
    for row in &he_manifest.rows {
        let img = load_rgb(&row.image_path)?;
        let out = bundle.synthesize(&[img], Direction::AToB).pop().unwrap();
        let path = images_dir.join(format!("{}.png", row.patch_id));
        crate::imgutil::save_rgb(&out, &path)?;
        rows.push(crate::manifest::ManifestRow {
            patch_id: row.patch_id.clone(),
            stain: StainDomain::VirtualCd20,
            split: row.split.clone(),
            image_path: path,
            mask_paths: vec![],
            annotation_path: row.annotation_path.clone(),
        });
    }
    let m = DatasetManifest { rows };
    m.save(&out_dir.join("manifest_virtual-cd20.csv"))?;
    Ok(m)
}

/// Detector training/eval inputs for a mode: He uses the real patch, Cd20
/// the paired virtual patch, Fused their six-channel concatenation.
fn detector_inputs(
    mode: DetectorMode,
    he: &DatasetManifest,
    virt: &DatasetManifest,
) -> Result<Vec<(String, ndarray::Array3<f64>, PathBuf)>> {
    let virt_by_id: BTreeMap<&str, &crate::manifest::ManifestRow> = virt
        .rows
        .iter()
        .map(|r| (r.patch_id.as_str(), r))
        .collect();
    if mode != DetectorMode::He {
        let unpaired: Vec<&str> = he
            .rows
            .iter()
            .filter(|r| !virt_by_id.contains_key(r.patch_id.as_str()))
            .map(|r| r.patch_id.as_str())
            .collect();
        if !unpaired.is_empty() {
            return Err(Error::Manifest(format!(
                "missing virtual CD20 pair for patches: {}",
                unpaired.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    for row in &he.rows {
        let input = match mode {
            DetectorMode::He => image_to_input(&load_rgb(&row.image_path)?),
            DetectorMode::Cd20 => {
                let v = virt_by_id[row.patch_id.as_str()];
                image_to_input(&load_rgb(&v.image_path)?)
            }
            DetectorMode::Fused => {
                let he_img = load_rgb(&row.image_path)?;
                let v = virt_by_id[row.patch_id.as_str()];
                let cd_img = load_rgb(&v.image_path)?;
                fuse_channels(&he_img, &cd_img)?
            }
        };
        out.push((row.patch_id.clone(), input, row.image_path.clone()));
    }
    Ok(out)
}

/// Train one detector mode on a training manifest (+ paired virtual
/// patches when needed).
pub fn train_detector(
    cfg: &PipelineConfig,
    mode: DetectorMode,
    seed: u64,
    he_train: &DatasetManifest,
    virt_train: &DatasetManifest,
    curve_csv: Option<&Path>,
) -> Result<DetectorModel> {
    let anns = annotations_by_patch(he_train)?;
    let inputs = detector_inputs(mode, he_train, virt_train)?;
    let data: Vec<(ndarray::Array3<f64>, Vec<BBox>)> = inputs
        .into_iter()
        .map(|(id, input, _)| (input, anns.get(&id).cloned().unwrap_or_default()))
        .collect();
    let mut model = DetectorModel::new(detector_config(cfg, mode, seed))?;
    model.train(&data, curve_csv)?;
    Ok(model)
}

/// Run a detector over a manifest, returning patch-frame detections.
pub fn detect_manifest(
    cfg: &PipelineConfig,
    model: &DetectorModel,
    he: &DatasetManifest,
    virt: &DatasetManifest,
) -> Result<Vec<Detection>> {
    let _ = cfg;
    let inputs = detector_inputs(model.config.mode, he, virt)?;
    let mut dets = Vec::new();
    for (id, input, _) in inputs {
        dets.extend(model.detect_patch(&id, &input)?);
    }
    Ok(dets)
}

/// Box and mask metrics in the spec report shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_box: f64,
    pub r_box: f64,
    pub f1_box: f64,
    pub p_mask: f64,
    pub r_mask: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    pub flags: MetricFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub p_box_defined: bool,
    pub r_box_defined: bool,
    pub p_mask_defined: bool,
    pub r_mask_defined: bool,
}

/// Micro-averaged detection metrics over patches: counts pool across
/// patches, masks pool pixel-wise.
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<BBox>>,
    gt_masks: Option<&BTreeMap<String, Mask>>,
    iou_threshold: f64,
    patch_size: u32,
) -> Result<MetricsReport> {
    let mut by_patch: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        by_patch.entry(d.id.as_str()).or_default().push(d);
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    let (mut mask_inter, mut mask_pred, mut mask_gt) = (0usize, 0usize, 0usize);
    for (patch_id, gt_boxes) in gts {
        let preds: Vec<Detection> = by_patch
            .get(patch_id.as_str())
            .map(|v| v.iter().map(|&d| d.clone()).collect())
            .unwrap_or_default();
        let m = match_detections(&preds, gt_boxes, iou_threshold);
        tp += m.true_positives;
        fp += m.false_positives;
        fnn += m.false_negatives;

        // Mask pooling: predicted instance masks (box-shaped when absent)
        // against the gt TLS mask (union of boxes when no mask provided).
        let mut pred_union = Mask::new(patch_size, patch_size);
        for p in &preds {
            let m = p
                .instance_mask
                .clone()
                .unwrap_or_else(|| p.bbox.to_mask(patch_size, patch_size));
            pred_union = pred_union.or(&m)?;
        }
        let gt_union = match gt_masks.and_then(|gm| gm.get(patch_id)) {
            Some(m) => m.clone(),
            None => {
                let mut u = Mask::new(patch_size, patch_size);
                for b in gt_boxes {
                    u = u.or(&b.to_mask(patch_size, patch_size))?;
                }
                u
            }
        };
        mask_inter += pred_union.and(&gt_union)?.count();
        mask_pred += pred_union.count();
        mask_gt += gt_union.count();
    }
    let p_box = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let r_box = if tp + fnn > 0 {
        tp as f64 / (tp + fnn) as f64
    } else {
        0.0
    };
    Ok(MetricsReport {
        p_box,
        r_box,
        f1_box: f1_score(p_box, r_box),
        p_mask: if mask_pred > 0 {
            mask_inter as f64 / mask_pred as f64
        } else {
            0.0
        },
        r_mask: if mask_gt > 0 {
            mask_inter as f64 / mask_gt as f64
        } else {
            0.0
        },
        fid: None,
        flags: MetricFlags {
            p_box_defined: tp + fp > 0,
            r_box_defined: tp + fnn > 0,
            p_mask_defined: mask_pred > 0,
            r_mask_defined: mask_gt > 0,
        },
    })
}

fn gt_tls_masks(manifest: &DatasetManifest) -> Result<BTreeMap<String, Mask>> {
    let mut out = BTreeMap::new();
    for row in &manifest.rows {
        if let Some(p) = row
            .mask_paths
            .iter()
            .find(|p| p.to_string_lossy().ends_with("_gt_tls.png"))
        {
            out.insert(row.patch_id.clone(), Mask::load(p)?);
        }
    }
    Ok(out)
}

fn load_images(manifest: &DatasetManifest) -> Result<Vec<RgbImage>> {
    manifest
        .rows
        .iter()
        .map(|r| load_rgb(&r.image_path))
        .collect()
}

pub fn feature_set_of(
    cfg: &PipelineConfig,
    images: &[RgbImage],
) -> Result<FeatureSet> {
    let ex = RandomConvEmbedder::new(cfg.evaluate.fid_extractor_seed);
    extract_features(images, &ex)
}

// --------------------------------------------------------------- repro

/// Per-seed detection comparison row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub he: MetricsReport,
    pub cd20: MetricsReport,
    pub combine: MetricsReport,
    pub fused: MetricsReport,
}

/// The desk-scale reproduction report: staining quality ordering (masked
/// vs unguided) and the detection comparison (single stains vs combined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub fid_masked_vs_real: f64,
    pub fid_unguided_vs_real: f64,
    /// Mask guidance should not lose to the unguided ablation.
    pub staining_ordering_holds: bool,
    pub seeds: Vec<SeedComparison>,
    pub mean_f1_he: f64,
    pub mean_f1_cd20: f64,
    pub mean_f1_combine: f64,
    pub mean_f1_fused: f64,
    /// combine >= max(single) - 0.02 on every seed.
    pub combine_within_tolerance: bool,
    /// Seeds where combine strictly beats both single-stain runs.
    pub combine_strictly_better_seeds: u32,
}

impl DeskReport {
    /// Three-row comparison table (plus the six-channel variant).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("mode      P_box   R_box   F1_box  P_mask  R_mask\n");
        let mut row = |name: &str, pick: &dyn Fn(&SeedComparison) -> &MetricsReport| {
            let n = self.seeds.len() as f64;
            let avg = |f: &dyn Fn(&MetricsReport) -> f64| {
                self.seeds.iter().map(|sc| f(pick(sc))).sum::<f64>() / n
            };
            s.push_str(&format!(
                "{:<9} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}\n",
                name,
                avg(&|m| m.p_box),
                avg(&|m| m.r_box),
                avg(&|m| m.f1_box),
                avg(&|m| m.p_mask),
                avg(&|m| m.r_mask),
            ));
        };
        row("he", &|sc| &sc.he);
        row("cd20", &|sc| &sc.cd20);
        row("combine", &|sc| &sc.combine);
        row("fused", &|sc| &sc.fused);
        s.push_str(&format!(
            "\nfrechet(virtual cd20, real cd20): mask-guided {:.4} vs unguided {:.4}\n",
            self.fid_masked_vs_real, self.fid_unguided_vs_real
        ));
        s
    }
}

/// Self-contained desk-scale reproduction: generate, calibrate, train both
/// transfer variants, synthesize, train detectors over several seeds and
/// evaluate every comparison. Everything lands under `out_dir`.
pub fn repro_desk(cfg: &PipelineConfig, out_dir: &Path) -> Result<DeskReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save_resolved(&out_dir.join("config.resolved"))?;
    for sub in ["patches", "checkpoints", "dets", "reports", "masks"] {
        let p = out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    // 1. Corpora.
    let he_dir = out_dir.join("patches/he");
    let cd_dir = out_dir.join("patches/cd20");
    let he_all = gen_corpus(cfg, StainDomain::He, cfg.corpus.he_count, &he_dir)
        .map_err(|e| e.in_stage("gen-corpus he"))?;
    let cd_all = gen_corpus(cfg, StainDomain::Cd20, cfg.corpus.cd20_count, &cd_dir)
        .map_err(|e| e.in_stage("gen-corpus cd20"))?;

    // 2. Splits.
    let (he_train, he_val) = split_dataset(&he_all, cfg.corpus.split_ratio, cfg.run.seed)
        .map_err(|e| e.in_stage("split he"))?;
    let (cd_train, cd_val) = split_dataset(&cd_all, cfg.corpus.split_ratio, cfg.run.seed)
        .map_err(|e| e.in_stage("split cd20"))?;

    // 3. Frozen thresholds.
    let th_he = calibrate(cfg, &he_train, StainDomain::He).map_err(|e| e.in_stage("calibrate he"))?;
    let th_cd = calibrate(cfg, &cd_train, StainDomain::Cd20)
        .map_err(|e| e.in_stage("calibrate cd20"))?;
    th_he.save(&out_dir.join("thresholds_he.json"))?;
    th_cd.save(&out_dir.join("thresholds_cd20.json"))?;

    // 4. Transfer training, mask-guided and unguided ablation.
    let mut bundles = Vec::new();
    for (label, lambda) in [("masked", cfg.transfer.lambda_mask), ("unguided", 0.0)] {
        let tcfg = transfer_config(cfg, lambda, cfg.run.seed);
        let mut bundle = TranslatorBundle::new(tcfg, th_he.clone(), th_cd.clone())?;
        let ck = out_dir.join(format!("checkpoints/transfer_{label}.ckpt"));
        let csv = out_dir.join(format!("reports/transfer_{label}_loss.csv"));
        transfer::train(&mut bundle, &he_train, &cd_train, &ck, &csv)
            .map_err(|e| e.in_stage("train-transfer"))?;
        bundles.push(bundle);
    }
    let bundle_masked = &bundles[0];
    let bundle_unguided = &bundles[1];

    // 5. Virtual CD20 for the whole H&E corpus, both variants.
    let virt_masked_train =
        synthesize_manifest(bundle_masked, &he_train, &out_dir.join("patches/virt_masked_train"))
            .map_err(|e| e.in_stage("synthesize"))?;
    let virt_masked_val =
        synthesize_manifest(bundle_masked, &he_val, &out_dir.join("patches/virt_masked_val"))
            .map_err(|e| e.in_stage("synthesize"))?;
    let virt_unguided_val = synthesize_manifest(
        bundle_unguided,
        &he_val,
        &out_dir.join("patches/virt_unguided_val"),
    )
    .map_err(|e| e.in_stage("synthesize"))?;

    // 6. Staining quality: Fréchet distance of each variant's virtual CD20
    //    to the real pseudo-CD20 validation set.
    let real_cd_imgs = load_images(&cd_val)?;
    let real_features = feature_set_of(cfg, &real_cd_imgs)?;
    let fid_of = |m: &DatasetManifest| -> Result<f64> {
        let imgs = load_images(m)?;
        frechet_distance(&feature_set_of(cfg, &imgs)?, &real_features)
    };
    let fid_masked = fid_of(&virt_masked_val).map_err(|e| e.in_stage("fid"))?;
    let fid_unguided = fid_of(&virt_unguided_val).map_err(|e| e.in_stage("fid"))?;

    // 7. Detection comparison across seeds; virtual patches come from the
    //    mask-guided checkpoint (the deployment premise: no real CD20).
    let gt_val = annotations_by_patch(&he_val)?;
    let gt_masks = gt_tls_masks(&he_val)?;
    let mut seeds = Vec::new();
    for k in 0..cfg.evaluate.detection_seeds {
        let seed = cfg.run.seed + k as u64;
        let mut reports: BTreeMap<&'static str, MetricsReport> = BTreeMap::new();
        let mut det_he: Vec<Detection> = Vec::new();
        let mut det_cd: Vec<Detection> = Vec::new();
        for mode in [DetectorMode::He, DetectorMode::Cd20, DetectorMode::Fused] {
            let curve = out_dir.join(format!(
                "reports/detector_{}_seed{seed}_curve.csv",
                match mode {
                    DetectorMode::He => "he",
                    DetectorMode::Cd20 => "cd20",
                    DetectorMode::Fused => "fused",
                }
            ));
            let model =
                train_detector(cfg, mode, seed, &he_train, &virt_masked_train, Some(&curve))
                    .map_err(|e| e.in_stage("train-detector"))?;
            let dets = detect_manifest(cfg, &model, &he_val, &virt_masked_val)
                .map_err(|e| e.in_stage("detect"))?;
            let report = evaluate_detections(
                &dets,
                &gt_val,
                Some(&gt_masks),
                cfg.evaluate.match_iou,
                cfg.run.patch_size,
            )?;
            match mode {
                DetectorMode::He => {
                    det_he = dets;
                    reports.insert("he", report);
                }
                DetectorMode::Cd20 => {
                    det_cd = dets;
                    reports.insert("cd20", report);
                }
                DetectorMode::Fused => {
                    reports.insert("fused", report);
                }
            }
        }
        // Late fusion: NMS-merge the two single-stain detectors.
        let mut merged: Vec<Detection> = Vec::new();
        let ids: std::collections::BTreeSet<String> = det_he
            .iter()
            .chain(det_cd.iter())
            .map(|d| d.id.clone())
            .collect();
        for id in ids {
            let he_d: Vec<Detection> =
                det_he.iter().filter(|d| d.id == id).cloned().collect();
            let cd_d: Vec<Detection> =
                det_cd.iter().filter(|d| d.id == id).cloned().collect();
            merged.extend(merge_detections(&he_d, &cd_d, cfg.detector.nms_iou)?);
        }
        let combine = evaluate_detections(
            &merged,
            &gt_val,
            Some(&gt_masks),
            cfg.evaluate.match_iou,
            cfg.run.patch_size,
        )?;
        seeds.push(SeedComparison {
            seed,
            he: reports.remove("he").unwrap(),
            cd20: reports.remove("cd20").unwrap(),
            combine,
            fused: reports.remove("fused").unwrap(),
        });
    }

    let n = seeds.len() as f64;
    let mean = |f: &dyn Fn(&SeedComparison) -> f64| seeds.iter().map(|s| f(s)).sum::<f64>() / n;
    let combine_within = seeds
        .iter()
        .all(|s| s.combine.f1_box >= s.he.f1_box.max(s.cd20.f1_box) - 0.02);
    let strictly = seeds
        .iter()
        .filter(|s| s.combine.f1_box > s.he.f1_box && s.combine.f1_box > s.cd20.f1_box)
        .count() as u32;

    let report = DeskReport {
        fid_masked_vs_real: fid_masked,
        fid_unguided_vs_real: fid_unguided,
        staining_ordering_holds: fid_masked <= fid_unguided,
        mean_f1_he: mean(&|s| s.he.f1_box),
        mean_f1_cd20: mean(&|s| s.cd20.f1_box),
        mean_f1_combine: mean(&|s| s.combine.f1_box),
        mean_f1_fused: mean(&|s| s.fused.f1_box),
        combine_within_tolerance: combine_within,
        combine_strictly_better_seeds: strictly,
        seeds,
    };

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out_dir.join("reports/desk_report.json"), json)
        .map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("reports/desk_report.txt"), report.to_table())
        .map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}

//! Procedural pseudo-histology with exact ground truth.
//!
//! Scenes are flat-tinted canvases with a two-tone background texture,
//! elliptical nuclei with a Gaussian rim falloff, red-blood-cell blobs
//! (H&E) and DAB-positive discs over TLS clusters (CD20). Every rendered
//! structure is recorded in [`GroundTruth`] at rasterization time, so masks
//! and TLS boxes are exact by construction. A scene is a pure function of
//! its [`SceneSpec`]: identical specs produce byte-identical images.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgutil::{BBox, Mask, Patch, StainDomain};
use crate::manifest::{Annotation, DatasetManifest, ManifestRow};

/// Named scene colors. Both domains share the same background base tone;
/// a second texture tone is derived by brightening it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    /// H&E nucleus stain, dark blue-purple.
    pub hematoxylin: [u8; 3],
    /// Background tissue tone for both domains, pale pink.
    pub eosin_background: [u8; 3],
    /// Bright red, H&E only.
    pub red_blood_cells: [u8; 3],
    /// IHC positive reaction, brown.
    pub dab_positive: [u8; 3],
    /// CD20 nuclear counterstain, light blue.
    pub counterstain: [u8; 3],
}

/// Offset added to the background tone for the mottled texture.
const MOTTLE_OFFSET: u8 = 0;
/// Concentric tone ladders: (radius breakpoint, tone scale) pairs. Each
/// distinct tone is a separate histogram population, which is what anchors
/// the multi-Otsu threshold layout.
const NUCLEUS_TONES: &[(f64, f64)] = &[(0.45, 0.42), (0.75, 0.77), (1.0, 1.0)];
const DAB_TONES: &[(f64, f64)] = &[(0.4, 0.42), (0.62, 0.63), (0.82, 0.82), (1.0, 1.0)];
const FLAT_TONES: &[(f64, f64)] = &[(1.0, 1.0)];
/// Nucleus/blob radial profile: flat core up to this fraction of the radius.
const RIM_START: f64 = 0.9;
/// Gaussian falloff rate over the rim band.
const RIM_GAIN: f64 = 5.0;
/// Margin between TLS cluster discs so positive blobs never touch.
const TLS_GAP: f64 = 3.0;
/// CD20 scenes carry granular debris specks (nonspecific chromogen dust):
/// fraction of canvas pixels and speck tone.
const DEBRIS_FRACTION: f64 = 0.05;
const DEBRIS_COLOR: [u8; 3] = [196, 130, 165];
/// Structure rims fall to (local tone - SHOULDER_DROP) rather than blending
/// all the way to the background, leaving a clean histogram gap for the
/// boundary threshold.
const SHOULDER_DROP: f64 = 57.0;
const PLACEMENT_ATTEMPTS: u32 = 1000;

impl Default for Palette {
    fn default() -> Self {
        // Tones are chosen so that the channel rules of the unsupervised
        // extraction hold on noisy renders: nuclei dark in blue, RBC merged
        // with the background in red but dark in blue, DAB dark in green,
        // counterstained CD20 nuclei merged with the background in green.
        Palette {
            hematoxylin: [88, 60, 130],
            eosin_background: [230, 194, 222],
            red_blood_cells: [226, 58, 70],
            dab_positive: [160, 110, 70],
            counterstain: [118, 175, 202],
        }
    }
}

impl Palette {
    pub fn entries(&self) -> [[u8; 3]; 5] {
        [
            self.hematoxylin,
            self.eosin_background,
            self.red_blood_cells,
            self.dab_positive,
            self.counterstain,
        ]
    }

    pub fn all_distinct(&self) -> bool {
        let e = self.entries();
        for i in 0..e.len() {
            for j in i + 1..e.len() {
                if e[i] == e[j] {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: u32,
    pub nucleus_count: u32,
    /// Semi-axis range in pixels; each nucleus samples both axes from it.
    pub nucleus_radius_range: (f64, f64),
    pub rbc_blob_count: u32,
    pub tls_cluster_count: u32,
    /// Nuclei per TLS cluster.
    pub tls_cluster_density: u32,
    pub palette: Palette,
    /// Additive Gaussian pixel noise, clamped to [0,255].
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Desk-scale defaults for a given canvas; counts scale with area.
    pub fn desk_default(canvas_size: u32, seed: u64) -> Self {
        let scale = canvas_size as f64 / 64.0;
        SceneSpec {
            canvas_size,
            nucleus_count: (52.0 * scale * scale).round() as u32,
            nucleus_radius_range: (2.0 * scale, 3.2 * scale),
            rbc_blob_count: (2.0 * scale * scale).round() as u32,
            tls_cluster_count: 1,
            tls_cluster_density: 40,
            palette: Palette::default(),
            noise_sigma: 6.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 64 {
            return Err(Error::InvalidArgument(format!(
                "canvas_size {} < 64",
                self.canvas_size
            )));
        }
        if !self.palette.all_distinct() {
            return Err(Error::InvalidArgument(
                "palette entries must be distinct".into(),
            ));
        }
        let (lo, hi) = self.nucleus_radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "invalid nucleus_radius_range ({lo}, {hi})"
            )));
        }
        if !(0.0..=255.0).contains(&self.noise_sigma) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma {} outside [0,255]",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Exact per-scene ground truth recorded during rendering.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub nucleus_mask: Mask,
    pub rbc_mask: Mask,
    pub positive_mask: Mask,
    pub tls_boxes: Vec<BBox>,
    pub tls_masks: Vec<Mask>,
    /// Nucleus centers, used by tests to count centroids inside TLS boxes.
    pub nucleus_centroids: Vec<(f64, f64)>,
}

impl GroundTruth {
    fn new(size: u32) -> Self {
        GroundTruth {
            nucleus_mask: Mask::new(size, size),
            rbc_mask: Mask::new(size, size),
            positive_mask: Mask::new(size, size),
            tls_boxes: Vec::new(),
            tls_masks: Vec::new(),
            nucleus_centroids: Vec::new(),
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a: r,
            b: r,
            theta: 0.0,
        }
    }

    /// Normalized elliptical radius of a pixel center; <= 1 means inside.
    fn radius(&self, x: u32, y: u32) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }

    fn pixel_bounds(&self, size: u32) -> (u32, u32, u32, u32) {
        let r = self.a.max(self.b);
        let x0 = (self.cx - r - 1.0).floor().max(0.0) as u32;
        let y0 = (self.cy - r - 1.0).floor().max(0.0) as u32;
        let x1 = ((self.cx + r + 1.0).ceil() as u32).min(size);
        let y1 = ((self.cy + r + 1.0).ceil() as u32).min(size);
        (x0, y0, x1, y1)
    }
}

/// Flat core with a Gaussian rim falloff; 1 at the center, ~0 at the boundary.
fn intensity_profile(u: f64) -> f64 {
    if u <= RIM_START {
        1.0
    } else {
        let t = (u - RIM_START) / (1.0 - RIM_START);
        (-RIM_GAIN * t * t).exp()
    }
}

fn lerp_px(cur: Rgb<u8>, target: [u8; 3], w: f64) -> Rgb<u8> {
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let base = cur[ch] as f64 - SHOULDER_DROP;
        let v = base + (target[ch] as f64 - base) * w;
        out[ch] = v.round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

fn scaled_tone(color: [u8; 3], scale: f64) -> [u8; 3] {
    [
        (color[0] as f64 * scale) as u8,
        (color[1] as f64 * scale) as u8,
        (color[2] as f64 * scale) as u8,
    ]
}

/// Paint an ellipse and record its pixels in `mask`. `tones` maps the
/// normalized radius to concentric tone rings (darker cores first).
fn paint_shape(
    img: &mut RgbImage,
    mask: Option<&mut Mask>,
    e: &Ellipse,
    color: [u8; 3],
    tones: &[(f64, f64)],
) {
    let size = img.width();
    let (x0, y0, x1, y1) = e.pixel_bounds(size);
    let mut mask = mask;
    for y in y0..y1 {
        for x in x0..x1 {
            let u = e.radius(x, y);
            if u <= 1.0 {
                let w = intensity_profile(u);
                let scale = tones
                    .iter()
                    .find(|&&(r, _)| u <= r)
                    .map(|&(_, s)| s)
                    .unwrap_or(1.0);
                let target = scaled_tone(color, scale);
                let cur = *img.get_pixel(x, y);
                img.put_pixel(x, y, lerp_px(cur, target, w));
                if let Some(m) = mask.as_deref_mut() {
                    m.set(x, y, true);
                }
            }
        }
    }
}

fn mottled_background(size: u32, base: [u8; 3], rng: &mut ChaCha8Rng) -> RgbImage {
    let lighter = [
        base[0].saturating_add(MOTTLE_OFFSET),
        base[1].saturating_add(MOTTLE_OFFSET),
        base[2].saturating_add(MOTTLE_OFFSET),
    ];
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let tone = if rng.gen_bool(0.5) { base } else { lighter };
            img.put_pixel(x, y, Rgb(tone));
        }
    }
    img
}

/// Box-Muller; one Gaussian per call keeps the stream layout obvious.
fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn add_noise(img: &mut RgbImage, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    for px in img.pixels_mut() {
        for ch in 0..3 {
            let v = px[ch] as f64 + sigma * sample_gaussian(rng);
            px[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// TLS disc radius that comfortably holds `density` nuclei of the given size.
fn tls_disc_radius(spec: &SceneSpec) -> f64 {
    let (_, hi) = spec.nucleus_radius_range;
    let r = hi * (spec.tls_cluster_density as f64).sqrt() * 0.75;
    r.min(spec.canvas_size as f64 / 5.0)
}

/// Sample non-overlapping TLS disc centers. A greedy draw can paint itself
/// into a corner (first disc central), so failed configurations restart
/// from scratch; only a canvas that cannot hold the discs at all errors.
fn place_tls_discs(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64, f64)>> {
    const RESTARTS: u32 = 40;
    const TRIES_PER_DISC: u32 = 100;
    let size = spec.canvas_size as f64;
    let r = tls_disc_radius(spec);
    if spec.tls_cluster_count > 0 && 2.0 * r >= size {
        return Err(Error::Placement {
            object: "tls_cluster[0]".into(),
            attempts: 0,
            canvas: spec.canvas_size,
        });
    }
    let mut failed_at = 0;
    for _ in 0..RESTARTS {
        let mut discs: Vec<(f64, f64, f64)> = Vec::new();
        'discs: for i in 0..spec.tls_cluster_count {
            for _ in 0..TRIES_PER_DISC {
                let cx = rng.gen_range(r..size - r);
                let cy = rng.gen_range(r..size - r);
                let clear = discs.iter().all(|&(ox, oy, or)| {
                    ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() >= r + or + TLS_GAP
                });
                if clear {
                    discs.push((cx, cy, r));
                    continue 'discs;
                }
            }
            failed_at = failed_at.max(i);
            break 'discs;
        }
        if discs.len() == spec.tls_cluster_count as usize {
            return Ok(discs);
        }
    }
    Err(Error::Placement {
        object: format!("tls_cluster[{failed_at}]"),
        attempts: RESTARTS * TRIES_PER_DISC,
        canvas: spec.canvas_size,
    })
}

fn sample_nucleus(spec: &SceneSpec, cx: f64, cy: f64, rng: &mut ChaCha8Rng) -> Ellipse {
    let (lo, hi) = spec.nucleus_radius_range;
    let a = rng.gen_range(lo..=hi);
    let b = rng.gen_range(lo..=hi);
    let theta = rng.gen_range(0.0..PI);
    Ellipse { cx, cy, a, b, theta }
}

/// Scattered nucleus center; fails if the canvas cannot hold the radius.
fn place_scattered(spec: &SceneSpec, index: u32, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let size = spec.canvas_size as f64;
    let (_, hi) = spec.nucleus_radius_range;
    if 2.0 * hi >= size {
        return Err(Error::Placement {
            object: format!("nucleus[{index}]"),
            attempts: 0,
            canvas: spec.canvas_size,
        });
    }
    Ok((rng.gen_range(hi..size - hi), rng.gen_range(hi..size - hi)))
}

/// Uniform point in a disc (polar with sqrt radius).
fn point_in_disc(cx: f64, cy: f64, r: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let rho = r * rng.gen_range(0.0f64..1.0).sqrt();
    let phi = rng.gen_range(0.0..2.0 * PI);
    (cx + rho * phi.cos(), cy + rho * phi.sin())
}

fn tight_bbox(mask: &Mask) -> Option<BBox> {
    let (mut x0, mut y0) = (u32::MAX, u32::MAX);
    let (mut x1, mut y1) = (0u32, 0u32);
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if any {
        Some(BBox::new(
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        ))
    } else {
        None
    }
}

fn render_scene(spec: &SceneSpec, domain: StainDomain) -> Result<(Patch, GroundTruth)> {
    spec.validate()?;
    let size = spec.canvas_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gt = GroundTruth::new(size);

    let mut img = mottled_background(size, spec.palette.eosin_background, &mut rng);

    // TLS geometry first: cluster layout is shared by both render paths.
    let discs = place_tls_discs(spec, &mut rng)?;

    // Granular debris specks: 1-2px dust that registers as a histogram
    // population but is small enough for mask cleanup to remove. Empty
    // scenes stay bare.
    let has_structures =
        spec.nucleus_count > 0 || spec.rbc_blob_count > 0 || spec.tls_cluster_count > 0;
    if has_structures {
        let specks = (DEBRIS_FRACTION * (size * size) as f64 / 2.0) as u32;
        for _ in 0..specks {
            let x = rng.gen_range(0..size);
            let y = rng.gen_range(0..size);
            img.put_pixel(x, y, Rgb(DEBRIS_COLOR));
            if rng.gen_bool(0.5) && x + 1 < size {
                img.put_pixel(x + 1, y, Rgb(DEBRIS_COLOR));
            }
        }
    }

    // H&E: red blood cell blobs, painted under the nuclei.
    let mut rbc_pixels = Mask::new(size, size);
    if domain == StainDomain::He {
        let (lo, hi) = spec.nucleus_radius_range;
        for i in 0..spec.rbc_blob_count {
            let r = rng.gen_range(lo.max(1.5)..=hi.max(2.0)) * 1.2;
            let csize = size as f64;
            if 2.0 * r * 1.6 >= csize {
                return Err(Error::Placement {
                    object: format!("rbc_blob[{i}]"),
                    attempts: 0,
                    canvas: size,
                });
            }
            let margin = r * 1.6;
            let cx = rng.gen_range(margin..csize - margin);
            let cy = rng.gen_range(margin..csize - margin);
            // A blob is a union of a few jittered discs.
            let sub = rng.gen_range(2..=4u32);
            for _ in 0..sub {
                let (sx, sy) = point_in_disc(cx, cy, r * 0.6, &mut rng);
                let sr = r * rng.gen_range(0.6..=1.0);
                let e = Ellipse::circle(sx, sy, sr);
                paint_shape(&mut img, Some(&mut rbc_pixels), &e, spec.palette.red_blood_cells, FLAT_TONES);
            }
        }
    }

    // CD20: scene nuclei go under the positive discs, so collect every
    // nucleus ellipse first and decide paint order per domain.
    let mut nuclei: Vec<Ellipse> = Vec::new();
    let (_, hi_r) = spec.nucleus_radius_range;
    for i in 0..spec.nucleus_count {
        // CD20 scatter stays off the positive discs so the DAB mask keeps
        // clean borders; H&E scatter may mingle with the aggregates.
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (cx, cy) = place_scattered(spec, i, &mut rng)?;
            let clear = domain != StainDomain::Cd20
                || discs.iter().all(|&(ox, oy, or)| {
                    ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() >= or + hi_r + 2.0
                });
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed.ok_or_else(|| Error::Placement {
            object: format!("nucleus[{i}]"),
            attempts: PLACEMENT_ATTEMPTS,
            canvas: spec.canvas_size,
        })?;
        nuclei.push(sample_nucleus(spec, cx, cy, &mut rng));
    }
    for &(cx, cy, r) in &discs {
        let (_, hi) = spec.nucleus_radius_range;
        for _ in 0..spec.tls_cluster_density {
            // Keep centers well inside the disc so centroids land in the box.
            let (nx, ny) = point_in_disc(cx, cy, (r - hi * 0.5).max(1.0), &mut rng);
            nuclei.push(sample_nucleus(spec, nx, ny, &mut rng));
        }
    }

    let nucleus_color = match domain {
        StainDomain::He => spec.palette.hematoxylin,
        _ => spec.palette.counterstain,
    };
    for e in &nuclei {
        let tones = if domain == StainDomain::He {
            NUCLEUS_TONES
        } else {
            FLAT_TONES
        };
        paint_shape(&mut img, Some(&mut gt.nucleus_mask), e, nucleus_color, tones);
        gt.nucleus_centroids.push((e.cx, e.cy));
    }

    // CD20: DAB-positive discs cover the clusters they mark.
    if domain == StainDomain::Cd20 {
        for &(cx, cy, r) in &discs {
            let e = Ellipse::circle(cx, cy, r);
            paint_shape(&mut img, Some(&mut gt.positive_mask), &e, spec.palette.dab_positive, DAB_TONES);
        }
    }

    // TLS instance masks and tight boxes from the rasterized discs.
    for &(cx, cy, r) in &discs {
        let e = Ellipse::circle(cx, cy, r);
        let mut m = Mask::new(size, size);
        let (x0, y0, x1, y1) = e.pixel_bounds(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if e.radius(x, y) <= 1.0 {
                    m.set(x, y, true);
                }
            }
        }
        let bbox = tight_bbox(&m).expect("disc rasterizes to at least one pixel");
        gt.tls_boxes.push(bbox);
        gt.tls_masks.push(m);
    }

    // RBC ground truth excludes pixels later covered by nuclei.
    if domain == StainDomain::He {
        for y in 0..size {
            for x in 0..size {
                if rbc_pixels.get(x, y) && !gt.nucleus_mask.get(x, y) {
                    gt.rbc_mask.set(x, y, true);
                }
            }
        }
    }

    add_noise(&mut img, spec.noise_sigma, &mut rng);

    Ok((
        Patch {
            id: String::new(),
            domain,
            image: img,
        },
        gt,
    ))
}

/// Pseudo-H&E scene: dark blue-purple nuclei on a pink background, bright
/// red RBC blobs, TLS clusters as dense nucleus aggregates.
pub fn generate_pseudo_he(spec: &SceneSpec) -> Result<(Patch, GroundTruth)> {
    render_scene(spec, StainDomain::He)
}

/// Pseudo-CD20 scene: light blue nuclei, brown positive discs over the TLS
/// clusters. `positive_mask` is nonempty iff `tls_cluster_count > 0`.
pub fn generate_pseudo_cd20(spec: &SceneSpec) -> Result<(Patch, GroundTruth)> {
    render_scene(spec, StainDomain::Cd20)
}

/// File layout produced by [`generate_corpus`] under `out_dir`:
/// `images/{id}.png`, `masks/{id}_gt_*.png`, `annotations.jsonl`,
/// `manifest.csv`.
pub fn generate_corpus(
    template: &SceneSpec,
    stain: StainDomain,
    count: u32,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_corpus_with(template, stain, count, out_dir, |_, s| s)
}

/// [`generate_corpus`] with a per-index spec hook (e.g. to vary the TLS
/// cluster count across patches). The hook sees the seeded per-index spec.
pub fn generate_corpus_with(
    template: &SceneSpec,
    stain: StainDomain,
    count: u32,
    out_dir: &Path,
    vary: impl Fn(u32, SceneSpec) -> SceneSpec,
) -> Result<DatasetManifest> {
    if count < 1 {
        return Err(Error::InvalidArgument("corpus count must be >= 1".into()));
    }
    template.validate()?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;

    let ann_path = out_dir.join(format!("annotations_{}.jsonl", stain.as_str()));
    let mut rows = Vec::new();
    let mut anns = Vec::new();
    for i in 0..count {
        let mut spec = template.clone();
        spec.seed = template.seed.wrapping_add(i as u64);
        let spec = vary(i, spec);
        spec.validate()?;
        let (mut patch, gt) = render_scene(&spec, stain)?;
        let id = format!("{}{:05}", stain.as_str().replace('-', ""), i);
        patch.id = id.clone();

        let image_path = images.join(format!("{id}.png"));
        crate::imgutil::save_rgb(&patch.image, &image_path)?;

        let mut mask_paths = Vec::new();
        for (suffix, mask) in [
            ("gt_nucleus", &gt.nucleus_mask),
            ("gt_rbc", &gt.rbc_mask),
            ("gt_positive", &gt.positive_mask),
        ] {
            let p = masks.join(format!("{id}_{suffix}.png"));
            mask.save(&p)?;
            mask_paths.push(p);
        }
        let mut tls_union = Mask::new(spec.canvas_size, spec.canvas_size);
        for m in &gt.tls_masks {
            tls_union = tls_union.or(m)?;
        }
        let tls_path = masks.join(format!("{id}_gt_tls.png"));
        tls_union.save(&tls_path)?;
        mask_paths.push(tls_path);

        anns.push(Annotation {
            patch_id: id.clone(),
            boxes: gt.tls_boxes.iter().map(|b| b.as_array()).collect(),
        });
        rows.push(ManifestRow {
            patch_id: id,
            stain,
            split: "all".into(),
            image_path,
            mask_paths,
            annotation_path: Some(ann_path.clone()),
        });
    }
    crate::manifest::save_annotations(&ann_path, &anns)?;
    let manifest = DatasetManifest { rows };
    manifest.save(&out_dir.join(format!("manifest_{}.csv", stain.as_str())))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_64(seed: u64) -> SceneSpec {
        SceneSpec::desk_default(64, seed)
    }

    #[test]
    fn empty_scene_is_uniform_background() {
        let mut spec = spec_64(1);
        spec.nucleus_count = 0;
        spec.rbc_blob_count = 0;
        spec.tls_cluster_count = 0;
        spec.noise_sigma = 0.0;
        let (patch, gt) = generate_pseudo_he(&spec).unwrap();
        assert!(gt.nucleus_mask.is_empty());
        assert!(gt.rbc_mask.is_empty());
        assert!(gt.positive_mask.is_empty());
        assert!(gt.tls_boxes.is_empty());
        let base = spec.palette.eosin_background;
        let lighter = [base[0] + MOTTLE_OFFSET, base[1] + MOTTLE_OFFSET, base[2] + MOTTLE_OFFSET];
        for px in patch.image.pixels() {
            assert!(px.0 == base || px.0 == lighter, "unexpected pixel {:?}", px);
        }
    }

    #[test]
    fn determinism_byte_identical() {
        let spec = spec_64(42);
        let (p1, g1) = generate_pseudo_he(&spec).unwrap();
        let (p2, g2) = generate_pseudo_he(&spec).unwrap();
        assert_eq!(p1.image.as_raw(), p2.image.as_raw());
        assert_eq!(g1.nucleus_mask, g2.nucleus_mask);
        assert_eq!(g1.rbc_mask, g2.rbc_mask);
        let (c1, _) = generate_pseudo_cd20(&spec).unwrap();
        let (c2, _) = generate_pseudo_cd20(&spec).unwrap();
        assert_eq!(c1.image.as_raw(), c2.image.as_raw());
    }

    #[test]
    fn tls_box_contains_cluster_centroids() {
        let mut spec = spec_64(7);
        spec.canvas_size = 96;
        spec.nucleus_count = 10;
        spec.tls_cluster_count = 1;
        spec.tls_cluster_density = 30;
        let (_, gt) = generate_pseudo_he(&spec).unwrap();
        assert_eq!(gt.tls_boxes.len(), 1);
        let b = &gt.tls_boxes[0];
        // Last 30 centroids are the cluster's nuclei.
        let inside = gt
            .nucleus_centroids
            .iter()
            .filter(|&&(x, y)| b.contains_point(x, y))
            .count();
        assert!(inside >= 30, "only {inside} centroids inside the TLS box");
    }

    #[test]
    fn cd20_positive_components_match_cluster_count() {
        let mut spec = spec_64(11);
        spec.canvas_size = 128;
        spec.tls_cluster_count = 2;
        let (_, gt) = generate_pseudo_cd20(&spec).unwrap();
        assert!(!gt.positive_mask.is_empty());
        assert_eq!(count_components(&gt.positive_mask), 2);

        spec.tls_cluster_count = 0;
        let (_, gt0) = generate_pseudo_cd20(&spec).unwrap();
        assert!(gt0.positive_mask.is_empty());
    }

    /// Independent 8-connected component counter (flood fill).
    fn count_components(mask: &Mask) -> usize {
        let (w, h) = mask.dims();
        let mut seen = vec![false; (w * h) as usize];
        let mut count = 0;
        for sy in 0..h {
            for sx in 0..w {
                let idx = (sy * w + sx) as usize;
                if !mask.get(sx, sy) || seen[idx] {
                    continue;
                }
                count += 1;
                let mut stack = vec![(sx, sy)];
                seen[idx] = true;
                while let Some((x, y)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as u32, ny as u32);
                            let nidx = (ny * w + nx) as usize;
                            if mask.get(nx, ny) && !seen[nidx] {
                                seen[nidx] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn nucleus_and_rbc_masks_disjoint() {
        let mut spec = spec_64(3);
        spec.rbc_blob_count = 6;
        spec.nucleus_count = 50;
        let (_, gt) = generate_pseudo_he(&spec).unwrap();
        assert!(!gt.rbc_mask.is_empty());
        let inter = gt.nucleus_mask.and(&gt.rbc_mask).unwrap();
        assert!(inter.is_empty());
    }

    #[test]
    fn tls_boxes_tightly_bound_masks() {
        let mut spec = spec_64(9);
        spec.canvas_size = 128;
        spec.tls_cluster_count = 3;
        let (_, gt) = generate_pseudo_cd20(&spec).unwrap();
        assert_eq!(gt.tls_boxes.len(), 3);
        for (b, m) in gt.tls_boxes.iter().zip(&gt.tls_masks) {
            let tight = tight_bbox(m).unwrap();
            assert_eq!(b, &tight);
        }
    }

    #[test]
    fn placement_failure_names_object() {
        let mut spec = spec_64(1);
        spec.canvas_size = 64;
        spec.tls_cluster_count = 40;
        spec.tls_cluster_density = 30;
        let err = generate_pseudo_he(&spec).unwrap_err();
        match err {
            Error::Placement { object, .. } => assert!(object.starts_with("tls_cluster[")),
            other => panic!("expected placement error, got {other:?}"),
        }
    }

    #[test]
    fn corpus_writes_files_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_64(5);
        let m1 = generate_corpus(&spec, StainDomain::He, 10, dir.path()).unwrap();
        assert_eq!(m1.len(), 10);
        for row in &m1.rows {
            assert!(row.image_path.exists(), "missing {:?}", row.image_path);
            for mp in &row.mask_paths {
                assert!(mp.exists());
            }
        }
        let manifest_path = dir.path().join("manifest_he.csv");
        let bytes1 = std::fs::read(&manifest_path).unwrap();
        let img_bytes1 = std::fs::read(&m1.rows[0].image_path).unwrap();

        // Rerun into the same directory: every artifact must be byte-identical.
        let m2 = generate_corpus(&spec, StainDomain::He, 10, dir.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(std::fs::read(&manifest_path).unwrap(), bytes1);
        assert_eq!(std::fs::read(&m1.rows[0].image_path).unwrap(), img_bytes1);
    }
}


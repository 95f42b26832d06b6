//! Patch tiling/stitching on a coordinate grid, Reinhard stain
//! normalization, and slide-stratified dataset splits.

use std::path::PathBuf;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;

/// Minimum tile edge accepted by the tiler.
pub const MIN_PATCH_SIZE: u32 = 64;
/// Lower clamp for channel standard deviations.
pub const STD_EPS: f64 = 1e-6;

/// Coordinate-addressed patch reference: `origin = grid index * stride`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPatchRef {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub size: u32,
    pub path: Option<PathBuf>,
}

impl GridPatchRef {
    /// `{slide_id}_x{origin_x}_y{origin_y}` naming convention.
    pub fn patch_id(&self) -> String {
        format!("{}_x{}_y{}", self.slide_id, self.origin_x, self.origin_y)
    }
}

/// Mirror an out-of-range coordinate back into [0, n) (reflect-101).
fn reflect(i: i64, n: i64) -> i64 {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i;
        }
    }
}

/// Tile an image into overlapping patches covering every pixel. Edge tiles
/// extending past the image are reflection-padded to `patch_size`.
pub fn tile_image(
    slide_id: &str,
    image: &RgbImage,
    patch_size: u32,
    overlap: u32,
) -> Result<Vec<(GridPatchRef, RgbImage)>> {
    if patch_size < MIN_PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "patch_size {patch_size} < {MIN_PATCH_SIZE}"
        )));
    }
    if overlap >= patch_size {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be < patch_size {patch_size}"
        )));
    }
    let (w, h) = image.dimensions();
    if w < patch_size || h < patch_size {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} smaller than one {patch_size}px patch"
        )));
    }
    let stride = patch_size - overlap;
    let tiles_along = |dim: u32| -> u32 {
        if dim <= patch_size {
            1
        } else {
            (dim - patch_size).div_ceil(stride) + 1
        }
    };
    let (nx, ny) = (tiles_along(w), tiles_along(h));

    let mut out = Vec::with_capacity((nx * ny) as usize);
    for gy in 0..ny {
        for gx in 0..nx {
            let origin_x = gx * stride;
            let origin_y = gy * stride;
            let tile = RgbImage::from_fn(patch_size, patch_size, |px, py| {
                let sx = reflect(origin_x as i64 + px as i64, w as i64) as u32;
                let sy = reflect(origin_y as i64 + py as i64, h as i64) as u32;
                *image.get_pixel(sx, sy)
            });
            out.push((
                GridPatchRef {
                    slide_id: slide_id.to_string(),
                    grid_x: gx,
                    grid_y: gy,
                    origin_x,
                    origin_y,
                    size: patch_size,
                    path: None,
                },
                tile,
            ));
        }
    }
    Ok(out)
}

/// Reassemble patches by their coordinates. Overlap regions are averaged,
/// the result is cropped to `target_dims`. Pixels past the image edge
/// (reflection padding) are dropped by the crop.
pub fn stitch_patches(
    refs_and_images: &[(GridPatchRef, RgbImage)],
    target_dims: (u32, u32),
) -> Result<RgbImage> {
    let (tw, th) = target_dims;
    if refs_and_images.is_empty() {
        return Err(Error::InvalidArgument("no patches to stitch".into()));
    }
    let size = refs_and_images[0].0.size;
    for (r, img) in refs_and_images {
        if r.size != size || img.width() != size || img.height() != size {
            return Err(Error::ShapeMismatch(format!(
                "patch {} size {}x{} does not match grid size {size}",
                r.patch_id(),
                img.width(),
                img.height()
            )));
        }
    }

    let mut sum = vec![0f64; (tw * th * 3) as usize];
    let mut count = vec![0u32; (tw * th) as usize];
    for (r, img) in refs_and_images {
        for py in 0..size {
            let y = r.origin_y as u64 + py as u64;
            if y >= th as u64 {
                continue;
            }
            for px in 0..size {
                let x = r.origin_x as u64 + px as u64;
                if x >= tw as u64 {
                    continue;
                }
                let p = img.get_pixel(px, py);
                let idx = (y as u32 * tw + x as u32) as usize;
                for c in 0..3 {
                    sum[idx * 3 + c] += p[c] as f64;
                }
                count[idx] += 1;
            }
        }
    }

    // A coverage gap means a whole grid cell is missing; report it in grid
    // coordinates inferred from the patch layout.
    if count.iter().any(|&c| c == 0) {
        let stride_of = |mut origins: Vec<u32>| -> u32 {
            origins.sort_unstable();
            origins.dedup();
            origins.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(size)
        };
        let sx = stride_of(refs_and_images.iter().map(|(r, _)| r.origin_x).collect());
        let sy = stride_of(refs_and_images.iter().map(|(r, _)| r.origin_y).collect());
        let mut missing = Vec::new();
        for (i, &c) in count.iter().enumerate() {
            if c == 0 {
                let (x, y) = (i as u32 % tw, i as u32 / tw);
                let cell = (x / sx.max(1), y / sy.max(1));
                if !missing.contains(&cell) {
                    missing.push(cell);
                }
            }
        }
        return Err(Error::CoverageGap(missing));
    }

    let mut out = RgbImage::new(tw, th);
    for y in 0..th {
        for x in 0..tw {
            let idx = (y * tw + x) as usize;
            let n = count[idx] as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (sum[idx * 3 + c] / n).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Per-channel mean and standard deviation in the decorrelated lab-like
/// color space used for Reinhard matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainStats {
    pub mean_l: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_l: f64,
    pub std_a: f64,
    pub std_b: f64,
}

impl StainStats {
    pub fn mean(&self) -> [f64; 3] {
        [self.mean_l, self.mean_a, self.mean_b]
    }

    pub fn std(&self) -> [f64; 3] {
        [self.std_l, self.std_a, self.std_b]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&data).map_err(|e| Error::Config(e.to_string()))
    }
}

/// RGB ([0,1]) to log-LMS to lab-like decorrelated channels (Ruderman).
fn rgb_to_lab(px: [u8; 3]) -> [f64; 3] {
    let r = px[0] as f64 / 255.0;
    let g = px[1] as f64 / 255.0;
    let b = px[2] as f64 / 255.0;
    let l = (0.3811 * r + 0.5783 * g + 0.0402 * b).max(1e-6).log10();
    let m = (0.1967 * r + 0.7244 * g + 0.0782 * b).max(1e-6).log10();
    let s = (0.0241 * r + 0.1288 * g + 0.8444 * b).max(1e-6).log10();
    let inv3 = 1.0 / 3f64.sqrt();
    let inv6 = 1.0 / 6f64.sqrt();
    let inv2 = 1.0 / 2f64.sqrt();
    [
        inv3 * (l + m + s),
        inv6 * (l + m - 2.0 * s),
        inv2 * (l - m),
    ]
}

fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let inv3 = 1.0 / 3f64.sqrt();
    let inv6 = 1.0 / 6f64.sqrt();
    let inv2 = 1.0 / 2f64.sqrt();
    let log_l = inv3 * lab[0] + inv6 * lab[1] + inv2 * lab[2];
    let log_m = inv3 * lab[0] + inv6 * lab[1] - inv2 * lab[2];
    let log_s = inv3 * lab[0] - 2.0 * inv6 * lab[1];
    let l = 10f64.powf(log_l);
    let m = 10f64.powf(log_m);
    let s = 10f64.powf(log_s);
    // Exact inverse of the forward RGB->LMS matrix; the published 4-decimal
    // inverse loses up to a few intensity levels through the log transform.
    let r = 4.468669863496 * l - 3.588675903472 * m + 0.119604366579 * s;
    let g = -1.219716627618 * l + 2.383087912955 * m - 0.162630111751 * s;
    let b = 0.058508476939 * l - 0.261078439028 * m + 1.205665908526 * s;
    [
        (r * 255.0).round().clamp(0.0, 255.0) as u8,
        (g * 255.0).round().clamp(0.0, 255.0) as u8,
        (b * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Pooled per-channel statistics over every pixel of the given images.
pub fn compute_stain_stats<'a>(
    images: impl IntoIterator<Item = &'a RgbImage>,
) -> Result<StainStats> {
    let mut n = 0u64;
    let mut sum = [0f64; 3];
    let mut sumsq = [0f64; 3];
    for img in images {
        for px in img.pixels() {
            let lab = rgb_to_lab(px.0);
            for c in 0..3 {
                sum[c] += lab[c];
                sumsq[c] += lab[c] * lab[c];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "stain stats need at least one image".into(),
        ));
    }
    let nf = n as f64;
    let mut mean = [0f64; 3];
    let mut std = [0f64; 3];
    for c in 0..3 {
        mean[c] = sum[c] / nf;
        let var = (sumsq[c] / nf - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(STD_EPS);
    }
    Ok(StainStats {
        mean_l: mean[0],
        mean_a: mean[1],
        mean_b: mean[2],
        std_l: std[0],
        std_a: std[1],
        std_b: std[2],
    })
}

/// Reinhard mean/std matching: affine map per decorrelated channel so the
/// output statistics equal `reference`, clamped back into RGB range.
pub fn normalize_stain(image: &RgbImage, reference: &StainStats) -> Result<RgbImage> {
    let src = compute_stain_stats([image])?;
    let sm = src.mean();
    let ss = src.std();
    let rm = reference.mean();
    let rs = reference.std();
    let mut out = RgbImage::new(image.width(), image.height());
    for (x, y, px) in image.enumerate_pixels() {
        let lab = rgb_to_lab(px.0);
        let mut mapped = [0f64; 3];
        for c in 0..3 {
            mapped[c] = (lab[c] - sm[c]) * (rs[c] / ss[c]) + rm[c];
        }
        out.put_pixel(x, y, image::Rgb(lab_to_rgb(mapped)));
    }
    Ok(out)
}

/// Deterministic slide-stratified split: no slide straddles the two halves,
/// each side keeps at least one slide.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must be in (0,1), got {ratio}"
        )));
    }
    let mut slides: Vec<&str> = Vec::new();
    for row in &manifest.rows {
        let s = row.slide_id();
        if !slides.contains(&s) {
            slides.push(s);
        }
    }
    if slides.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "split needs at least 2 slides, found {}",
            slides.len()
        )));
    }
    slides.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slides.shuffle(&mut rng);
    let n = slides.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let train_slides: std::collections::BTreeSet<&str> =
        slides[..n_train].iter().copied().collect();

    let mut train = DatasetManifest::default();
    let mut val = DatasetManifest::default();
    for row in &manifest.rows {
        let mut row = row.clone();
        if train_slides.contains(row.slide_id()) {
            row.split = "train".into();
            train.rows.push(row);
        } else {
            row.split = "val".into();
            val.rows.push(row);
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgutil::StainDomain;
    use crate::manifest::ManifestRow;
    use rand::Rng;

    fn noise_image(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| {
            image::Rgb([rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()])
        })
    }

    #[test]
    fn exact_tiling_grid() {
        let img = noise_image(1024, 1024, 1);
        let tiles = tile_image("s", &img, 512, 0).unwrap();
        assert_eq!(tiles.len(), 4);
        let coords: Vec<(u32, u32)> = tiles.iter().map(|(r, _)| (r.grid_x, r.grid_y)).collect();
        assert_eq!(coords, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(tiles[3].0.origin_x, 512);
        assert_eq!(tiles[0].0.patch_id(), "s_x0_y0");
    }

    #[test]
    fn tile_stitch_round_trip_bit_exact() {
        for seed in 0..4u64 {
            let (w, h) = (600 + 13 * seed as u32, 520 + 31 * seed as u32);
            let img = noise_image(w, h, seed);
            let tiles = tile_image("s", &img, 512, 0).unwrap();
            let back = stitch_patches(&tiles, (w, h)).unwrap();
            assert_eq!(back.as_raw(), img.as_raw(), "seed {seed}");
        }
    }

    #[test]
    fn reflection_padded_edge_tiles() {
        let img = noise_image(600, 600, 7);
        let tiles = tile_image("s", &img, 512, 0).unwrap();
        assert_eq!(tiles.len(), 4);
        // Edge tile pixels beyond the image mirror back inside.
        let (r, t) = &tiles[3];
        assert_eq!((r.origin_x, r.origin_y), (512, 512));
        // Tile-local x=89 maps to source x = 512+89 = 601 -> reflects to 597.
        assert_eq!(*t.get_pixel(89, 0), *img.get_pixel(597, 512));
    }

    #[test]
    fn overlap_region_averages() {
        let mk_ref = |gx: u32, ox: u32| GridPatchRef {
            slide_id: "s".into(),
            grid_x: gx,
            grid_y: 0,
            origin_x: ox,
            origin_y: 0,
            size: 64,
            path: None,
        };
        let a = RgbImage::from_pixel(64, 64, image::Rgb([10, 10, 10]));
        let b = RgbImage::from_pixel(64, 64, image::Rgb([30, 30, 30]));
        let refs = vec![(mk_ref(0, 0), a), (mk_ref(1, 32), b)];
        let out = stitch_patches(&refs, (96, 64)).unwrap();
        assert_eq!(out.get_pixel(10, 10)[0], 10);
        assert_eq!(out.get_pixel(40, 10)[0], 20); // overlap 32..64 averages
        assert_eq!(out.get_pixel(80, 10)[0], 30);
    }

    #[test]
    fn stitch_reports_missing_cells() {
        let img = noise_image(1024, 1024, 3);
        let mut tiles = tile_image("s", &img, 512, 0).unwrap();
        tiles.remove(2); // drop grid cell (0,1)
        match stitch_patches(&tiles, (1024, 1024)) {
            Err(Error::CoverageGap(cells)) => assert_eq!(cells, vec![(0, 1)]),
            other => panic!("expected coverage gap, got {other:?}"),
        }
    }

    #[test]
    fn single_patch_identity() {
        let img = noise_image(128, 128, 9);
        let tiles = tile_image("s", &img, 128, 0).unwrap();
        assert_eq!(tiles.len(), 1);
        let back = stitch_patches(&tiles, (128, 128)).unwrap();
        assert_eq!(back.as_raw(), img.as_raw());
    }

    #[test]
    fn stats_match_flat_array_oracle() {
        let a = noise_image(32, 16, 11);
        let b = noise_image(8, 24, 12);
        let stats = compute_stain_stats([&a, &b]).unwrap();

        // Oracle: flatten every pixel and compute mean/std directly.
        let mut vals: Vec<[f64; 3]> = Vec::new();
        for img in [&a, &b] {
            for px in img.pixels() {
                vals.push(rgb_to_lab(px.0));
            }
        }
        let n = vals.len() as f64;
        for c in 0..3 {
            let mean = vals.iter().map(|v| v[c]).sum::<f64>() / n;
            let var = vals.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n;
            assert!((stats.mean()[c] - mean).abs() < 1e-9);
            assert!((stats.std()[c] - var.sqrt().max(STD_EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_permutation_invariant() {
        let img = noise_image(16, 16, 13);
        let mut pixels: Vec<image::Rgb<u8>> = img.pixels().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        pixels.shuffle(&mut rng);
        let mut shuffled = RgbImage::new(16, 16);
        for (i, px) in pixels.iter().enumerate() {
            shuffled.put_pixel(i as u32 % 16, i as u32 / 16, *px);
        }
        let s1 = compute_stain_stats([&img]).unwrap();
        let s2 = compute_stain_stats([&shuffled]).unwrap();
        for c in 0..3 {
            assert!((s1.mean()[c] - s2.mean()[c]).abs() < 1e-9);
            assert!((s1.std()[c] - s2.std()[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_fixed_point_and_idempotence() {
        let img = noise_image(32, 32, 17);
        let reference = compute_stain_stats([&img]).unwrap();
        let once = normalize_stain(&img, &reference).unwrap();
        for (p, q) in img.pixels().zip(once.pixels()) {
            for c in 0..3 {
                assert!(
                    (p[c] as i16 - q[c] as i16).abs() <= 1,
                    "fixed point drifted: {p:?} vs {q:?}"
                );
            }
        }

        let other = compute_stain_stats([&noise_image(32, 32, 23)]).unwrap();
        let n1 = normalize_stain(&img, &other).unwrap();
        let n2 = normalize_stain(&n1, &other).unwrap();
        for (p, q) in n1.pixels().zip(n2.pixels()) {
            for c in 0..3 {
                assert!((p[c] as i16 - q[c] as i16).abs() <= 1);
            }
        }
    }

    #[test]
    fn constant_images_normalize_identically() {
        let a = RgbImage::from_pixel(16, 16, image::Rgb([120, 80, 160]));
        let b = RgbImage::from_pixel(16, 16, image::Rgb([140, 100, 180]));
        let reference = compute_stain_stats([&noise_image(16, 16, 29)]).unwrap();
        let na = normalize_stain(&a, &reference).unwrap();
        let nb = normalize_stain(&b, &reference).unwrap();
        assert_eq!(na.as_raw(), nb.as_raw());
    }

    fn manifest_with_slides(n: usize) -> DatasetManifest {
        let rows = (0..n * 3)
            .map(|i| ManifestRow {
                patch_id: format!("slide{:02}_x{}_y0", i / 3, i % 3),
                stain: StainDomain::He,
                split: "all".into(),
                image_path: PathBuf::from(format!("p{i}.png")),
                mask_paths: vec![],
                annotation_path: None,
            })
            .collect();
        DatasetManifest { rows }
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let m = manifest_with_slides(10);
        let (train, val) = split_dataset(&m, 0.8, 7).unwrap();
        let slides = |m: &DatasetManifest| {
            m.rows
                .iter()
                .map(|r| r.slide_id().to_string())
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert_eq!(slides(&train).len(), 8);
        assert_eq!(slides(&val).len(), 2);
        assert!(slides(&train).is_disjoint(&slides(&val)));
        assert_eq!(train.len() + val.len(), m.len());

        let (t2, v2) = split_dataset(&m, 0.8, 7).unwrap();
        assert_eq!(train, t2);
        assert_eq!(val, v2);
    }

    #[test]
    fn split_boundaries() {
        let m = manifest_with_slides(2);
        let (train, val) = split_dataset(&m, 0.999, 1).unwrap();
        assert_eq!(train.rows.len(), 3);
        assert_eq!(val.rows.len(), 3);

        let single = manifest_with_slides(1);
        assert!(split_dataset(&single, 0.8, 1).is_err());
        assert!(split_dataset(&m, 0.0, 1).is_err());
    }
}

//! Unsupervised tissue mask extraction via multi-level Otsu thresholding.
//!
//! Thresholds are calibrated once per stain domain from a pooled channel
//! histogram and frozen. Extraction keeps the pixels on the configured side
//! of the working threshold (by default the second-highest of 7), then
//! removes speckle components and fills holes.
//!
//! The multi-Otsu search runs in exact rational arithmetic, so the dynamic
//! program provably returns the lexicographically smallest maximizer of the
//! between-class variance; no floating-point tie ambiguity.

use image::{GrayImage, RgbImage};
use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgutil::{Mask, StainDomain};

pub const INTENSITY_LEVELS: usize = 256;
/// Number of thresholds dividing a channel into 8 groups.
pub const DEFAULT_K: usize = 7;
/// Working threshold: the second highest of the 7.
pub const DEFAULT_WORKING_INDEX: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    KeepBelow,
    KeepAbove,
}

/// 256-bin histogram of an 8-bit channel.
#[derive(Debug, Clone)]
pub struct ChannelHistogram {
    bins: [u64; INTENSITY_LEVELS],
    total: u64,
}

impl Default for ChannelHistogram {
    fn default() -> Self {
        ChannelHistogram {
            bins: [0; INTENSITY_LEVELS],
            total: 0,
        }
    }
}

impl ChannelHistogram {
    pub fn from_gray(img: &GrayImage) -> Self {
        let mut h = ChannelHistogram::default();
        h.accumulate(img);
        h
    }

    pub fn from_bins(bins: [u64; INTENSITY_LEVELS]) -> Self {
        let total = bins.iter().sum();
        ChannelHistogram { bins, total }
    }

    /// Pool another image into this histogram (used for calibration).
    pub fn accumulate(&mut self, img: &GrayImage) {
        for px in img.pixels() {
            self.bins[px[0] as usize] += 1;
            self.total += 1;
        }
    }

    pub fn bins(&self) -> &[u64; INTENSITY_LEVELS] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn populated_bins(&self) -> usize {
        self.bins.iter().filter(|&&n| n > 0).count()
    }
}

/// Per-domain, per-channel frozen thresholds plus the working selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub domain: StainDomain,
    pub channel: Channel,
    pub thresholds: Vec<u8>,
    pub working_index: usize,
    pub polarity: Polarity,
}

impl ThresholdSet {
    pub fn new(
        domain: StainDomain,
        channel: Channel,
        thresholds: Vec<u8>,
        working_index: usize,
        polarity: Polarity,
    ) -> Result<Self> {
        let ts = ThresholdSet {
            domain,
            channel,
            thresholds,
            working_index,
            polarity,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.len() > 7 {
            return Err(Error::InvalidArgument(format!(
                "threshold set must hold 1..=7 values, got {}",
                self.thresholds.len()
            )));
        }
        if !self.thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "thresholds must be strictly increasing".into(),
            ));
        }
        if self.working_index >= self.thresholds.len() {
            return Err(Error::InvalidArgument(format!(
                "working_index {} out of range for {} thresholds",
                self.working_index,
                self.thresholds.len()
            )));
        }
        Ok(())
    }

    pub fn working_threshold(&self) -> u8 {
        self.thresholds[self.working_index]
    }
}

/// Split an RGB patch into its three greyscale channels (R, G, B).
pub fn split_channels(img: &RgbImage) -> (GrayImage, GrayImage, GrayImage) {
    let (w, h) = img.dimensions();
    let mut r = GrayImage::new(w, h);
    let mut g = GrayImage::new(w, h);
    let mut b = GrayImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        r.put_pixel(x, y, image::Luma([px[0]]));
        g.put_pixel(x, y, image::Luma([px[1]]));
        b.put_pixel(x, y, image::Luma([px[2]]));
    }
    (r, g, b)
}

pub fn channel_of(img: &RgbImage, channel: Channel) -> GrayImage {
    let idx = channel.index();
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        image::Luma([img.get_pixel(x, y)[idx]])
    })
}

/// Unnormalized exact fraction. The DP only adds and compares values, so
/// skipping gcd normalization keeps big-integer sizes modest (denominators
/// are products of at most 8 class weights) and is far faster than a
/// normalizing rational.
#[derive(Clone)]
struct Frac {
    num: BigInt,
    den: BigInt, // > 0
}

impl Frac {
    fn zero() -> Self {
        Frac {
            num: BigInt::from(0),
            den: BigInt::from(1),
        }
    }

    fn add(&self, other: &Frac) -> Frac {
        Frac {
            num: &self.num * &other.den + &other.num * &self.den,
            den: &self.den * &other.den,
        }
    }

    fn gt(&self, other: &Frac) -> bool {
        &self.num * &other.den > &other.num * &self.den
    }
}

/// Between-class objective contribution of bins `a..=b`: S^2 / W as an exact
/// rational (0 when the class is empty). Maximizing the sum over classes is
/// equivalent to maximizing the between-class variance.
fn class_value_frac(prefix_w: &[u64], prefix_s: &[u64], a: usize, b: usize) -> Frac {
    let w = prefix_w[b + 1] - prefix_w[a];
    if w == 0 {
        return Frac::zero();
    }
    let s = BigInt::from(prefix_s[b + 1] - prefix_s[a]);
    Frac {
        num: &s * &s,
        den: BigInt::from(w),
    }
}

fn class_value(prefix_w: &[u64], prefix_s: &[u64], a: usize, b: usize) -> BigRational {
    let f = class_value_frac(prefix_w, prefix_s, a, b);
    BigRational::new(f.num, f.den)
}

/// `k` strictly increasing thresholds maximizing the between-class variance
/// of the induced `k+1` classes; ties resolved to the lexicographically
/// smallest tuple. Dynamic programming over suffixes, O(k·L²) class
/// evaluations.
pub fn multi_otsu(hist: &ChannelHistogram, k: usize) -> Result<Vec<u8>> {
    if !(1..=7).contains(&k) {
        return Err(Error::InvalidArgument(format!("k must be in [1,7], got {k}")));
    }
    let populated = hist.populated_bins();
    if populated < k + 1 {
        return Err(Error::DegenerateHistogram {
            populated,
            needed: k + 1,
            k,
        });
    }

    // The lexicographically smallest optimum never places a boundary above
    // top_bin + k - 1 (boundaries either sit on a populated bin or chain one
    // past the previous), so the search range can stop there.
    let top_bin = (0..INTENSITY_LEVELS)
        .rev()
        .find(|&i| hist.bins[i] > 0)
        .expect("populated checked above");
    let l = (top_bin + k + 1).min(INTENSITY_LEVELS);
    let mut prefix_w = vec![0u64; l + 1];
    let mut prefix_s = vec![0u64; l + 1];
    for i in 0..l {
        prefix_w[i + 1] = prefix_w[i] + hist.bins[i];
        prefix_s[i + 1] = prefix_s[i] + hist.bins[i] * i as u64;
    }
    let val = |a: usize, b: usize| class_value_frac(&prefix_w, &prefix_s, a, b);

    // suffix[j][s]: best objective for covering bins s..=L-1 with j classes.
    // Iterating candidate boundaries in ascending order and replacing only on
    // strict improvement keeps the smallest optimal boundary at every level,
    // which yields the lexicographically smallest threshold tuple overall.
    let classes = k + 1;
    let mut suffix: Vec<Vec<Option<Frac>>> = vec![vec![None; l]; classes + 1];
    let mut choice: Vec<Vec<usize>> = vec![vec![0; l]; classes + 1];
    for s in 0..l {
        suffix[1][s] = Some(val(s, l - 1));
    }
    for j in 2..=classes {
        // Class boundaries stay in 0..=L-2 so every class spans >= 1 bin.
        for s in 0..=(l - j) {
            let mut best: Option<Frac> = None;
            let mut best_t = s;
            for t in s..=(l - j) {
                let cand = val(s, t).add(suffix[j - 1][t + 1].as_ref().expect("suffix filled"));
                if best.as_ref().map_or(true, |b| cand.gt(b)) {
                    best = Some(cand);
                    best_t = t;
                }
            }
            suffix[j][s] = best;
            choice[j][s] = best_t;
        }
    }

    let mut thresholds = Vec::with_capacity(k);
    let mut s = 0usize;
    for j in (2..=classes).rev() {
        let t = choice[j][s];
        thresholds.push(t as u8);
        s = t + 1;
    }
    Ok(thresholds)
}

/// Exact between-class objective of an arbitrary threshold tuple, exposed so
/// fuzz checks can compare candidates in the same arithmetic.
pub fn between_class_objective(hist: &ChannelHistogram, thresholds: &[u8]) -> BigRational {
    let l = INTENSITY_LEVELS;
    let mut prefix_w = vec![0u64; l + 1];
    let mut prefix_s = vec![0u64; l + 1];
    for i in 0..l {
        prefix_w[i + 1] = prefix_w[i] + hist.bins[i];
        prefix_s[i + 1] = prefix_s[i] + hist.bins[i] * i as u64;
    }
    let mut start = 0usize;
    let mut acc = BigRational::from_integer(BigInt::from(0));
    for &t in thresholds {
        acc += class_value(&prefix_w, &prefix_s, start, t as usize);
        start = t as usize + 1;
    }
    acc + class_value(&prefix_w, &prefix_s, start, l - 1)
}

/// Hard mask from the working threshold: keep-below keeps `pixel <= t`,
/// keep-above keeps `pixel > t`.
pub fn extract_region(channel: &GrayImage, ts: &ThresholdSet) -> Mask {
    let t = ts.working_threshold();
    Mask::from_fn(channel.width(), channel.height(), |x, y| {
        let v = channel.get_pixel(x, y)[0];
        match ts.polarity {
            Polarity::KeepBelow => v <= t,
            Polarity::KeepAbove => v > t,
        }
    })
}

/// Sigmoid relaxation of [`extract_region`]; values in (0,1), 0.5 exactly at
/// the threshold, hard mask in the temperature -> 0 limit.
pub fn soft_mask(
    channel: &GrayImage,
    threshold: u8,
    temperature: f64,
    polarity: Polarity,
) -> Result<Array2<f64>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let (w, h) = channel.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in channel.enumerate_pixels() {
        let v = px[0] as f64;
        let t = threshold as f64;
        let z = match polarity {
            Polarity::KeepBelow => (t - v) / temperature,
            Polarity::KeepAbove => (v - t) / temperature,
        };
        out[(y as usize, x as usize)] = 1.0 / (1.0 + (-z).exp());
    }
    Ok(out)
}

/// Default speckle size at a given patch scale: 16 px at 512, scaled by area.
pub fn default_min_component_px(patch_size: u32) -> u32 {
    let scaled = 16.0 * (patch_size as f64 / 512.0).powi(2);
    scaled.round().max(1.0) as u32
}

/// Remove 8-connected foreground components smaller than `min_component_px`,
/// then fill 4-connected background holes that do not touch the border.
pub fn clean_mask(mask: &Mask, min_component_px: u32, fill_holes: bool) -> Mask {
    let (w, h) = mask.dims();
    let mut out = mask.clone();

    // Foreground speckle removal.
    if min_component_px > 1 {
        let mut seen = vec![false; (w * h) as usize];
        for sy in 0..h {
            for sx in 0..w {
                let sidx = (sy * w + sx) as usize;
                if !out.get(sx, sy) || seen[sidx] {
                    continue;
                }
                let mut component = Vec::new();
                let mut stack = vec![(sx, sy)];
                seen[sidx] = true;
                while let Some((x, y)) = stack.pop() {
                    component.push((x, y));
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as u32, ny as u32);
                            let nidx = (ny * w + nx) as usize;
                            if out.get(nx, ny) && !seen[nidx] {
                                seen[nidx] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
                if (component.len() as u32) < min_component_px {
                    for (x, y) in component {
                        out.set(x, y, false);
                    }
                }
            }
        }
    }

    // Hole filling: background components reachable from the border stay.
    if fill_holes {
        let mut reach = vec![false; (w * h) as usize];
        let mut stack = Vec::new();
        for x in 0..w {
            for y in [0, h - 1] {
                if !out.get(x, y) && !reach[(y * w + x) as usize] {
                    reach[(y * w + x) as usize] = true;
                    stack.push((x, y));
                }
            }
        }
        for y in 0..h {
            for x in [0, w - 1] {
                if !out.get(x, y) && !reach[(y * w + x) as usize] {
                    reach[(y * w + x) as usize] = true;
                    stack.push((x, y));
                }
            }
        }
        while let Some((x, y)) = stack.pop() {
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as u32, ny as u32);
                let nidx = (ny * w + nx) as usize;
                if !out.get(nx, ny) && !reach[nidx] {
                    reach[nidx] = true;
                    stack.push((nx, ny));
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if !out.get(x, y) && !reach[(y * w + x) as usize] {
                    out.set(x, y, true);
                }
            }
        }
    }

    out
}

/// Named masks extracted from one patch. Which fields are present depends on
/// the stain domain.
#[derive(Debug, Clone)]
pub struct TissueMaskSet {
    /// m_n, from the blue channel.
    pub nucleus: Option<Mask>,
    /// m_{n+r}, from the red channel (H&E only).
    pub nucleus_plus_rbc: Option<Mask>,
    /// m_r = m_{n+r} XOR m_n (H&E only).
    pub rbc: Option<Mask>,
    /// m_p, from the green channel (CD20 only).
    pub positive: Option<Mask>,
    /// Provenance: which threshold sets produced the masks.
    pub sources: Vec<String>,
}

fn source_id(ts: &ThresholdSet) -> String {
    format!(
        "{}/{:?}/t{}={}",
        ts.domain.as_str(),
        ts.channel,
        ts.working_index,
        ts.working_threshold()
    )
}

/// Cleanup parameters applied to every extracted mask.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CleanParams {
    pub min_component_px: u32,
    pub fill_holes: bool,
}

impl CleanParams {
    pub fn for_patch_size(patch_size: u32) -> Self {
        CleanParams {
            min_component_px: default_min_component_px(patch_size),
            fill_holes: true,
        }
    }
}

/// H&E masks: nucleus from blue, nucleus+RBC from red, RBC as the literal
/// XOR of the two cleaned masks.
pub fn extract_he_masks(
    patch: &RgbImage,
    thresholds_blue: &ThresholdSet,
    thresholds_red: &ThresholdSet,
    clean: CleanParams,
) -> Result<TissueMaskSet> {
    let blue = channel_of(patch, Channel::B);
    let red = channel_of(patch, Channel::R);
    let m_n = clean_mask(
        &extract_region(&blue, thresholds_blue),
        clean.min_component_px,
        clean.fill_holes,
    );
    let m_nr = clean_mask(
        &extract_region(&red, thresholds_red),
        clean.min_component_px,
        clean.fill_holes,
    );
    let m_r = m_nr.xor(&m_n)?;
    Ok(TissueMaskSet {
        nucleus: Some(m_n),
        nucleus_plus_rbc: Some(m_nr),
        rbc: Some(m_r),
        positive: None,
        sources: vec![source_id(thresholds_blue), source_id(thresholds_red)],
    })
}

/// CD20 masks: nucleus from blue, IHC-positive from green.
pub fn extract_cd20_masks(
    patch: &RgbImage,
    thresholds_blue: &ThresholdSet,
    thresholds_green: &ThresholdSet,
    clean: CleanParams,
) -> Result<TissueMaskSet> {
    let blue = channel_of(patch, Channel::B);
    let green = channel_of(patch, Channel::G);
    let m_n = clean_mask(
        &extract_region(&blue, thresholds_blue),
        clean.min_component_px,
        clean.fill_holes,
    );
    let m_p = clean_mask(
        &extract_region(&green, thresholds_green),
        clean.min_component_px,
        clean.fill_holes,
    );
    Ok(TissueMaskSet {
        nucleus: Some(m_n),
        nucleus_plus_rbc: None,
        rbc: None,
        positive: Some(m_p),
        sources: vec![source_id(thresholds_blue), source_id(thresholds_green)],
    })
}

/// The two channels that drive extraction for a domain.
pub fn extraction_channels(domain: StainDomain) -> (Channel, Channel) {
    match domain {
        StainDomain::He | StainDomain::VirtualHe => (Channel::B, Channel::R),
        StainDomain::Cd20 | StainDomain::VirtualCd20 => (Channel::B, Channel::G),
    }
}

/// Frozen thresholds for one domain: blue plus the domain's second channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainThresholds {
    pub sets: Vec<ThresholdSet>,
}

impl DomainThresholds {
    pub fn get(&self, channel: Channel) -> Result<&ThresholdSet> {
        self.sets
            .iter()
            .find(|ts| ts.channel == channel)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no threshold set for channel {channel:?}"))
            })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.sets)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sets: Vec<ThresholdSet> =
            serde_json::from_str(&data).map_err(|e| Error::Config(e.to_string()))?;
        for ts in &sets {
            ts.validate()?;
        }
        Ok(DomainThresholds { sets })
    }
}

/// Calibrate the two extraction channels of a domain over a pooled histogram
/// of the given images; thresholds are meant to be frozen afterwards.
pub fn calibrate_domain<'a>(
    images: impl IntoIterator<Item = &'a RgbImage>,
    domain: StainDomain,
) -> Result<DomainThresholds> {
    let (ch_a, ch_b) = extraction_channels(domain);
    let mut hist_a = ChannelHistogram::default();
    let mut hist_b = ChannelHistogram::default();
    let mut any = false;
    for img in images {
        any = true;
        hist_a.accumulate(&channel_of(img, ch_a));
        hist_b.accumulate(&channel_of(img, ch_b));
    }
    if !any {
        return Err(Error::InvalidArgument(
            "calibration needs at least one image".into(),
        ));
    }
    let mut sets = Vec::new();
    for (ch, hist) in [(ch_a, hist_a), (ch_b, hist_b)] {
        let thresholds = multi_otsu(&hist, DEFAULT_K)?;
        sets.push(ThresholdSet::new(
            domain,
            ch,
            thresholds,
            DEFAULT_WORKING_INDEX,
            Polarity::KeepBelow,
        )?);
    }
    Ok(DomainThresholds { sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist_from_pairs(pairs: &[(usize, u64)]) -> ChannelHistogram {
        let mut bins = [0u64; INTENSITY_LEVELS];
        for &(v, n) in pairs {
            bins[v] += n;
        }
        ChannelHistogram::from_bins(bins)
    }

    /// Exhaustive search oracle: enumerate all strictly increasing tuples in
    /// lexicographic order, keep the first strict maximum. Independent of the
    /// DP; shares only the exact-rational objective definition. Enumeration
    /// stops a safe distance above the top populated bin; tuples beyond it
    /// only relabel empty classes and cannot beat or tie lexicographically.
    fn exhaustive_otsu(hist: &ChannelHistogram, k: usize) -> Vec<u8> {
        let top = (0..INTENSITY_LEVELS)
            .rev()
            .find(|&i| hist.bins()[i] > 0)
            .unwrap();
        let limit = (top + k + 2).min(INTENSITY_LEVELS - 1);
        let mut best: Option<(BigRational, Vec<u8>)> = None;
        let mut tuple = vec![0u8; k];
        enumerate(hist, k, 0, 0, limit, &mut tuple, &mut best);
        best.expect("at least one tuple").1
    }

    fn enumerate(
        hist: &ChannelHistogram,
        k: usize,
        depth: usize,
        start: usize,
        limit: usize,
        tuple: &mut Vec<u8>,
        best: &mut Option<(BigRational, Vec<u8>)>,
    ) {
        if depth == k {
            let obj = between_class_objective(hist, tuple);
            match best {
                Some((b, _)) if *b >= obj => {}
                _ => *best = Some((obj, tuple.clone())),
            }
            return;
        }
        // Leave room for the remaining thresholds and a final nonempty class.
        for t in start..=(limit - 1 - (k - 1 - depth)) {
            tuple[depth] = t as u8;
            enumerate(hist, k, depth + 1, t + 1, limit, tuple, best);
        }
    }

    #[test]
    fn spike_histogram_matches_tie_break() {
        // Equal-mass spikes at 0, 3, 7; k=2 -> (0, 3) under lexicographic
        // tie-break.
        let hist = hist_from_pairs(&[(0, 10), (3, 10), (7, 10)]);
        assert_eq!(multi_otsu(&hist, 2).unwrap(), vec![0, 3]);
    }

    #[test]
    fn two_value_histogram_takes_smallest_threshold() {
        let hist = hist_from_pairs(&[(0, 100), (255, 100)]);
        assert_eq!(multi_otsu(&hist, 1).unwrap(), vec![0]);
    }

    #[test]
    fn eight_groups_from_seven_thresholds() {
        let pairs: Vec<(usize, u64)> = (0..8).map(|i| (i * 30, 5)).collect();
        let hist = hist_from_pairs(&pairs);
        let ts = multi_otsu(&hist, 7).unwrap();
        assert_eq!(ts.len(), 7);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn degenerate_histogram_is_an_error() {
        let hist = hist_from_pairs(&[(10, 50), (200, 50)]);
        match multi_otsu(&hist, 2) {
            Err(Error::DegenerateHistogram { populated, .. }) => assert_eq!(populated, 2),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn dp_equals_exhaustive_on_random_small_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..60 {
            let k = rng.gen_range(1..=3usize);
            let populated = rng.gen_range(k + 1..=10);
            let mut pairs = Vec::new();
            let mut used = std::collections::HashSet::new();
            while pairs.len() < populated {
                let v = rng.gen_range(0..16usize);
                if used.insert(v) {
                    pairs.push((v, rng.gen_range(1..=9u64)));
                }
            }
            let hist = hist_from_pairs(&pairs);
            assert_eq!(
                multi_otsu(&hist, k).unwrap(),
                exhaustive_otsu(&hist, k),
                "pairs={pairs:?} k={k}"
            );
        }
    }

    #[test]
    fn extract_region_polarity() {
        let mut ch = GrayImage::new(2, 2);
        ch.put_pixel(0, 0, image::Luma([10]));
        ch.put_pixel(1, 0, image::Luma([200]));
        ch.put_pixel(0, 1, image::Luma([90]));
        ch.put_pixel(1, 1, image::Luma([250]));
        let ts = ThresholdSet::new(
            StainDomain::He,
            Channel::B,
            vec![100],
            0,
            Polarity::KeepBelow,
        )
        .unwrap();
        let m = extract_region(&ch, &ts);
        assert!(m.get(0, 0) && m.get(0, 1));
        assert!(!m.get(1, 0) && !m.get(1, 1));

        let ts_above = ThresholdSet {
            polarity: Polarity::KeepAbove,
            ..ts
        };
        let m2 = extract_region(&ch, &ts_above);
        // Complement holds exactly here because no pixel equals the threshold.
        for y in 0..2 {
            for x in 0..2 {
                assert_ne!(m.get(x, y), m2.get(x, y));
            }
        }
    }

    #[test]
    fn clean_mask_removes_speckles_and_fills_holes() {
        // Isolated pixel vanishes at min 4.
        let speck = Mask::from_fn(7, 7, |x, y| x == 3 && y == 3);
        assert!(clean_mask(&speck, 4, false).is_empty());

        // 5x5 ring with a 1px interior hole becomes solid when filling.
        let ring = Mask::from_fn(7, 7, |x, y| {
            (1..=5).contains(&x) && (1..=5).contains(&y) && !(x == 3 && y == 3)
        });
        let cleaned = clean_mask(&ring, 4, true);
        assert!(cleaned.get(3, 3));
        assert_eq!(cleaned.count(), ring.count() + 1);

        // Idempotence.
        let again = clean_mask(&cleaned, 4, true);
        assert_eq!(again, cleaned);
    }

    #[test]
    fn soft_mask_midpoint_and_limit() {
        let mut ch = GrayImage::new(3, 1);
        ch.put_pixel(0, 0, image::Luma([100]));
        ch.put_pixel(1, 0, image::Luma([10]));
        ch.put_pixel(2, 0, image::Luma([240]));
        let m = soft_mask(&ch, 100, 5.0, Polarity::KeepBelow).unwrap();
        assert!((m[(0, 0)] - 0.5).abs() < 1e-12);
        // Far from the threshold at tiny temperature: matches the hard mask.
        let m0 = soft_mask(&ch, 100, 0.01, Polarity::KeepBelow).unwrap();
        assert!((m0[(0, 1)] - 1.0).abs() < 1e-4);
        assert!(m0[(0, 2)] < 1e-4);
        // Monotone in the pixel value for keep-below.
        assert!(m[(0, 1)] > m[(0, 0)] && m[(0, 0)] > m[(0, 2)]);
    }

    #[test]
    fn split_channels_round_trip() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        img.put_pixel(1, 0, image::Rgb([7, 7, 7]));
        let (r, g, b) = split_channels(&img);
        for (x, v) in [(0u32, [255u8, 0, 0]), (1u32, [7, 7, 7])] {
            let px = [
                r.get_pixel(x, 0)[0],
                g.get_pixel(x, 0)[0],
                b.get_pixel(x, 0)[0],
            ];
            assert_eq!(px, v);
        }
    }

    #[test]
    fn he_xor_identity_empty_rbc() {
        // Identical blue/red channels with the same thresholds: m_n == m_{n+r}
        // so m_r must be empty.
        let img = RgbImage::from_fn(8, 8, |x, _| {
            if x < 4 {
                image::Rgb([30, 30, 30])
            } else {
                image::Rgb([220, 220, 220])
            }
        });
        let ts = |ch| {
            ThresholdSet::new(StainDomain::He, ch, vec![100], 0, Polarity::KeepBelow).unwrap()
        };
        let set = extract_he_masks(
            &img,
            &ts(Channel::B),
            &ts(Channel::R),
            CleanParams {
                min_component_px: 1,
                fill_holes: false,
            },
        )
        .unwrap();
        assert!(set.rbc.unwrap().is_empty());
        assert_eq!(set.nucleus.unwrap().count(), 32);
    }
}

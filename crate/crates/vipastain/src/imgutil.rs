//! Shared image primitives: binary masks, stain domains, PNG round-trips.

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Staining domain of a patch. `He`/`Cd20` are real (generated) stains,
/// the `Virtual*` variants are generator outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StainDomain {
    He,
    Cd20,
    VirtualCd20,
    VirtualHe,
}

impl StainDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            StainDomain::He => "he",
            StainDomain::Cd20 => "cd20",
            StainDomain::VirtualCd20 => "virtual-cd20",
            StainDomain::VirtualHe => "virtual-he",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(StainDomain::He),
            "cd20" => Ok(StainDomain::Cd20),
            "virtual-cd20" => Ok(StainDomain::VirtualCd20),
            "virtual-he" => Ok(StainDomain::VirtualHe),
            other => Err(Error::InvalidArgument(format!(
                "unknown stain domain {other:?}"
            ))),
        }
    }
}

/// An RGB image tile tagged with its id and stain domain.
#[derive(Debug, Clone)]
pub struct Patch {
    pub id: String,
    pub domain: StainDomain,
    pub image: RgbImage,
}

/// Binary mask with the dimensions of the patch it was extracted from.
/// Serialized as 8-bit single-channel PNG with values in {0, 255}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn check_same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn xor(&self, other: &Mask) -> Result<Mask> {
        self.check_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a ^ b)
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.check_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Intersection-over-union of two masks; 1.0 when both are empty.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.check_same_dims(other)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        if union == 0 {
            Ok(1.0)
        } else {
            Ok(inter as f64 / union as f64)
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any pixel > 127 counts as foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Mask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] > 127)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save(path)
            .map_err(|e| Error::image(path, e))
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Ok(Mask::from_gray(&img.to_luma8()))
    }
}

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// Intersection area / union area, 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> BBox {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    /// Fill the box region of a mask canvas (used for box-shaped instance masks).
    pub fn to_mask(&self, width: u32, height: u32) -> Mask {
        let x0 = self.x.max(0.0).floor() as u32;
        let y0 = self.y.max(0.0).floor() as u32;
        let x1 = ((self.x + self.w).ceil().max(0.0) as u32).min(width);
        let y1 = ((self.y + self.h).ceil().max(0.0) as u32).min(height);
        let mut m = Mask::new(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_gray_round_trip() {
        let m = Mask::from_fn(5, 4, |x, y| (x + y) % 2 == 0);
        let g = m.to_gray();
        assert!(g.pixels().all(|p| p[0] == 0 || p[0] == 255));
        assert_eq!(Mask::from_gray(&g), m);
    }

    #[test]
    fn mask_iou_basics() {
        let a = Mask::from_fn(4, 4, |x, _| x < 2);
        let b = Mask::from_fn(4, 4, |x, _| x >= 1 && x < 3);
        // a covers 8 px, b covers 8 px, intersection 4, union 12
        assert!((a.iou(&b).unwrap() - 4.0 / 12.0).abs() < 1e-12);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        let e = Mask::new(4, 4);
        assert_eq!(e.iou(&e).unwrap(), 1.0);
    }

    #[test]
    fn mask_xor_and_dims() {
        let a = Mask::from_fn(3, 3, |x, y| x == y);
        let b = Mask::from_fn(3, 3, |x, _| x == 0);
        let x = a.xor(&b).unwrap();
        assert!(!x.get(0, 0)); // in both
        assert!(x.get(1, 1)); // only in a
        assert!(x.get(0, 1)); // only in b
        let c = Mask::new(2, 3);
        assert!(a.xor(&c).is_err());
    }
}

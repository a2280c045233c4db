//! Rectangular hole masks and damaged-image synthesis.
//!
//! A [`Mask`] stores `0` for damaged (hole) pixels and `1` for valid ones.
//! Training holes are single rectangles whose width and height fall between
//! a quarter and a half of the image width and height.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Hole value for damaged pixels.
pub const HOLE: u8 = 0;
/// Value for intact pixels.
pub const VALID: u8 = 1;

/// Default fill for hole pixels: mid-gray, i.e. zero after `[-1, 1]` scaling.
pub const DEFAULT_FILL: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![VALID; width * height],
        }
    }

    pub fn all_hole(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![HOLE; width * height],
        }
    }

    /// `f(x, y)` returns whether the pixel is valid.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(x, y) { VALID } else { HOLE });
            }
        }
        Self { width, height, data }
    }

    /// Builds a mask from raw values, rejecting anything other than 0 or 1.
    pub fn from_values(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let data = values
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0.0 => Ok(HOLE),
                1.0 => Ok(VALID),
                _ => Err(Error::Validation(format!(
                    "mask is not binary: value {v} at ({}, {})",
                    i % width,
                    i / width
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { width, height, data })
    }

    /// Decodes the on-disk form: single channel, 0 = hole, 255 = valid.
    pub fn from_luma8(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img
            .as_raw()
            .iter()
            .map(|&v| match v {
                0 => Ok(HOLE),
                255 => Ok(VALID),
                other => Err(Error::Validation(format!("mask pixel value {other} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == VALID
    }

    pub fn set(&mut self, x: usize, y: usize, valid: bool) {
        self.data[y * self.width + x] = if valid { VALID } else { HOLE };
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == HOLE).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        self.hole_count() as f64 / self.data.len() as f64
    }

    /// Mask values as `f32` (0.0 / 1.0).
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// A rectangular hole: top-left corner and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectSpec {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Inclusive size range allowed for a hole side on an image side of `len`:
/// `[ceil(len / 4), floor(len / 2)]`.
pub fn hole_side_range(len: usize) -> (usize, usize) {
    (len.div_ceil(4), len / 2)
}

impl RectSpec {
    /// Checks the rectangle fits inside a `w x h` image and respects the
    /// quarter-to-half size bounds.
    pub fn validate(&self, w: usize, h: usize) -> Result<()> {
        let (wmin, wmax) = hole_side_range(w);
        let (hmin, hmax) = hole_side_range(h);
        if !(wmin..=wmax).contains(&self.width) || !(hmin..=hmax).contains(&self.height) {
            return Err(Error::Validation(format!(
                "hole {}x{} outside bounds [{wmin},{wmax}]x[{hmin},{hmax}] for a {w}x{h} image",
                self.width, self.height
            )));
        }
        self.check_inside(w, h)
    }

    /// Only checks that the rectangle lies inside the image.
    pub fn check_inside(&self, w: usize, h: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x0 + self.width > w || self.y0 + self.height > h {
            return Err(Error::Validation(format!(
                "rectangle {self:?} does not lie inside a {w}x{h} image"
            )));
        }
        Ok(())
    }

    pub fn to_mask(&self, w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| !self.contains(x, y))
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }
}

impl std::str::FromStr for RectSpec {
    type Err = Error;

    /// Parses `x0,y0,width,height`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("bad rectangle {s:?}: {e}")))?;
        match parts.as_slice() {
            &[x0, y0, width, height] => Ok(RectSpec { x0, y0, width, height }),
            _ => Err(Error::Validation(format!("rectangle {s:?} must be x0,y0,width,height"))),
        }
    }
}

/// Draws one rectangular hole for a `w x h` image.
///
/// Width and height are uniform integers in [`hole_side_range`]; the position
/// is uniform over all placements that keep the hole inside the image.
pub fn sample_rect<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize) -> Result<RectSpec> {
    if w < 8 || h < 8 {
        return Err(Error::Config(format!(
            "image {w}x{h} is too small for hole sampling (need at least 8x8)"
        )));
    }
    let (wmin, wmax) = hole_side_range(w);
    let (hmin, hmax) = hole_side_range(h);
    let width = rng.random_range(wmin..=wmax);
    let height = rng.random_range(hmin..=hmax);
    let x0 = rng.random_range(0..=w - width);
    let y0 = rng.random_range(0..=h - height);
    Ok(RectSpec { x0, y0, width, height })
}

pub fn sample_rect_mask<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize) -> Result<(Mask, RectSpec)> {
    let rect = sample_rect(rng, w, h)?;
    Ok((rect.to_mask(w, h), rect))
}

/// `mask * img + (1 - mask) * fill`, per pixel.
pub fn apply_mask(img: &RgbImage, mask: &Mask, fill: f32) -> Result<RgbImage> {
    if img.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image is {:?} but mask is {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    let mut out = img.clone();
    for (px, &m) in out.as_mut_slice().chunks_exact_mut(3).zip(mask.as_slice()) {
        if m == HOLE {
            px.fill(fill);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bounds_at_512_and_256() {
        assert_eq!(hole_side_range(512), (128, 256));
        assert_eq!(hole_side_range(256), (64, 128));
    }

    #[test]
    fn bounds_at_minimum_size() {
        assert_eq!(hole_side_range(8), (2, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let r = sample_rect(&mut rng, 8, 8).unwrap();
            assert!((2..=4).contains(&r.width) && (2..=4).contains(&r.height));
            r.validate(8, 8).unwrap();
        }
    }

    #[test]
    fn too_small_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_rect(&mut rng, 7, 64), Err(Error::Config(_))));
    }

    #[test]
    fn apply_all_valid_is_identity() {
        let img = RgbImage::from_fn(5, 4, |x, y| [x as f32 * 0.1, y as f32 * 0.2, 0.3]);
        assert_eq!(apply_mask(&img, &Mask::all_valid(5, 4), 0.5).unwrap(), img);
    }

    #[test]
    fn apply_all_hole_is_constant_fill() {
        let img = RgbImage::from_fn(5, 4, |x, y| [x as f32 * 0.1, y as f32 * 0.2, 0.3]);
        let out = apply_mask(&img, &Mask::all_hole(5, 4), 0.25).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn apply_half_mask_on_4x4() {
        // Value at (x, y) channel c is (4y + x) / 16 + c / 100; left half is a hole.
        let img = RgbImage::from_fn(4, 4, |x, y| {
            let v = (4 * y + x) as f32 / 16.0;
            [v, v + 0.01, v + 0.02]
        });
        let mask = Mask::from_fn(4, 4, |x, _| x >= 2);
        let out = apply_mask(&img, &mask, 0.5).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = if x < 2 {
                    [0.5, 0.5, 0.5]
                } else {
                    let v = (4 * y + x) as f32 / 16.0;
                    [v, v + 0.01, v + 0.02]
                };
                assert_eq!(out.get(x, y), expected, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(matches!(apply_mask(&img, &Mask::all_valid(4, 3), 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn luma_round_trip_and_rejection() {
        let m = Mask::from_fn(6, 3, |x, y| (x + y) % 3 != 0);
        assert_eq!(Mask::from_luma8(&m.to_luma8()).unwrap(), m);
        let bad = image::GrayImage::from_pixel(2, 2, image::Luma([128]));
        assert!(Mask::from_luma8(&bad).is_err());
        assert!(Mask::from_values(2, 1, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn rect_parse() {
        let r: RectSpec = "1, 2,30,40".parse().unwrap();
        assert_eq!(r, RectSpec { x0: 1, y0: 2, width: 30, height: 40 });
        assert!("1,2,3".parse::<RectSpec>().is_err());
    }

    proptest! {
        #[test]
        fn sampled_masks_respect_bounds_and_fraction(seed in any::<u64>(), w in 8usize..300, h in 8usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mask, rect) = sample_rect_mask(&mut rng, w, h).unwrap();
            rect.validate(w, h).unwrap();
            prop_assert_eq!(mask.hole_count(), rect.width * rect.height);
            let frac = mask.hole_fraction();
            prop_assert!((1.0 / 16.0..=0.25).contains(&frac), "fraction {}", frac);
        }

        #[test]
        fn equal_seeds_equal_masks(seed in any::<u64>()) {
            let a = sample_rect_mask(&mut ChaCha8Rng::seed_from_u64(seed), 512, 256).unwrap();
            let b = sample_rect_mask(&mut ChaCha8Rng::seed_from_u64(seed), 512, 256).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn apply_mask_is_idempotent(seed in any::<u64>(), fill in 0.0f32..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(16, 12, |_, _| [rng.random(), rng.random(), rng.random()]);
            let (mask, _) = sample_rect_mask(&mut rng, 16, 12).unwrap();
            let once = apply_mask(&img, &mask, fill).unwrap();
            prop_assert_eq!(apply_mask(&once, &mask, fill).unwrap(), once);
        }
    }
}

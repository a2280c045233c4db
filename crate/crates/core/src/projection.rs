//! Equirectangular <-> cube-map resampling.
//!
//! Convention (fixed for the whole crate):
//!
//! * Equirect pixel `(x, y)` (continuous, pixel centres at `+0.5`) has
//!   longitude `theta = 2*pi*(x + 0.5)/W - pi` and latitude
//!   `phi = pi*(y + 0.5)/H - pi/2`.
//! * Its direction is `(cos(phi) sin(theta), sin(phi), cos(phi) cos(theta))`,
//!   so the image centre looks along `+z` (face F), `+x` is to the right
//!   (face R) and `-y` is up: the top row looks towards face T.
//! * Faces are always ordered `[F, R, B, L, T, D]`.
//!
//! Each face is a perspective view with a forward axis, a right axis (image
//! `u` increasing) and a down axis (image `v` increasing). T's bottom edge
//! meets F's top edge and D's top edge meets F's bottom edge.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::masking::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Face {
    F,
    R,
    B,
    L,
    T,
    D,
}

impl Face {
    /// Canonical order; also the tie-break priority on face boundaries.
    pub const ALL: [Face; 6] = [Face::F, Face::R, Face::B, Face::L, Face::T, Face::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> &'static str {
        match self {
            Face::F => "F",
            Face::R => "R",
            Face::B => "B",
            Face::L => "L",
            Face::T => "T",
            Face::D => "D",
        }
    }

    /// (forward, right, down) unit axes of the face.
    fn axes(self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        match self {
            Face::F => ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            Face::R => ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]),
            Face::B => ([0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            Face::L => ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
            Face::T => ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            Face::D => ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
        }
    }
}

/// Unit view direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    /// Normalises `(x, y, z)`; `None` for the zero vector.
    pub fn new(x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        (n > 0.0 && n.is_finite()).then(|| Self {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &Direction) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }

    /// Longitude in `(-pi, pi]`, zero at the centre of F.
    pub fn longitude(&self) -> f64 {
        self.x.atan2(self.z)
    }

    /// Latitude in `[-pi/2, pi/2]`, negative looking up.
    pub fn latitude(&self) -> f64 {
        self.y.clamp(-1.0, 1.0).asin()
    }

    fn dot(&self, a: [f64; 3]) -> f64 {
        self.x * a[0] + self.y * a[1] + self.z * a[2]
    }
}

/// Sampling filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    #[default]
    Bilinear,
    Nearest,
}

/// Full-sphere panorama, width exactly twice the height, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage(RgbImage);

impl EquirectImage {
    pub fn new(img: RgbImage) -> Result<Self> {
        let (w, h) = img.dims();
        if h == 0 || w != 2 * h {
            return Err(Error::Validation(format!(
                "equirectangular image must be 2:1, got {w}x{h}"
            )));
        }
        if let Some(v) = img.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self(img))
    }

    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_image(self) -> RgbImage {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    /// Filtered sample at continuous pixel coordinates; longitude wraps and
    /// latitude clamps.
    pub fn sample(&self, px: f64, py: f64, filter: Filter) -> [f32; 3] {
        sample_wrapped(&self.0, px, py, filter)
    }
}

/// Six square faces in `[F, R, B, L, T, D]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeMap {
    face_size: usize,
    faces: Vec<RgbImage>,
}

impl CubeMap {
    pub fn new(faces: Vec<RgbImage>) -> Result<Self> {
        if faces.len() != 6 {
            return Err(Error::Validation(format!("a cube map needs 6 faces, got {}", faces.len())));
        }
        let s = faces[0].width();
        if faces.iter().any(|f| f.dims() != (s, s)) {
            return Err(Error::Validation("cube faces must be square and equally sized".into()));
        }
        Ok(Self { face_size: s, faces })
    }

    pub fn face_size(&self) -> usize {
        self.face_size
    }

    pub fn face(&self, face: Face) -> &RgbImage {
        &self.faces[face.index()]
    }

    pub fn faces(&self) -> &[RgbImage] {
        &self.faces
    }

    pub fn into_faces(self) -> Vec<RgbImage> {
        self.faces
    }

    /// Canonical on-disk layout: a `6S x S` horizontal strip in face order.
    pub fn to_strip(&self) -> RgbImage {
        let s = self.face_size;
        let mut strip = RgbImage::new(6 * s, s);
        for (i, f) in self.faces.iter().enumerate() {
            strip.blit(f, i * s, 0);
        }
        strip
    }

    pub fn from_strip(strip: &RgbImage) -> Result<Self> {
        let (w, h) = strip.dims();
        if w != 6 * h {
            return Err(Error::Validation(format!("cube strip must be 6:1, got {w}x{h}")));
        }
        Self::new((0..6).map(|i| strip.crop(i * h, 0, h, h)).collect())
    }
}

/// Per-face masks in `[F, R, B, L, T, D]` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubeMask {
    face_size: usize,
    faces: Vec<Mask>,
}

impl CubeMask {
    pub fn new(faces: Vec<Mask>) -> Result<Self> {
        if faces.len() != 6 {
            return Err(Error::Validation(format!("a cube mask needs 6 faces, got {}", faces.len())));
        }
        let s = faces[0].width();
        if faces.iter().any(|f| f.dims() != (s, s)) {
            return Err(Error::Validation("mask faces must be square and equally sized".into()));
        }
        Ok(Self { face_size: s, faces })
    }

    pub fn all_valid(face_size: usize) -> Self {
        Self {
            face_size,
            faces: vec![Mask::all_valid(face_size, face_size); 6],
        }
    }

    pub fn face_size(&self) -> usize {
        self.face_size
    }

    pub fn face(&self, face: Face) -> &Mask {
        &self.faces[face.index()]
    }

    pub fn faces(&self) -> &[Mask] {
        &self.faces
    }

    /// Faces that contain at least one hole pixel.
    pub fn faces_with_holes(&self) -> Vec<Face> {
        Face::ALL
            .into_iter()
            .filter(|f| self.faces[f.index()].hole_count() > 0)
            .collect()
    }
}

/// View direction of a (continuous) equirect pixel position.
pub fn pixel_to_direction((w, h): (usize, usize), (x, y): (f64, f64)) -> Result<Direction> {
    if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
        return Err(Error::Validation(format!(
            "pixel ({x}, {y}) outside a {w}x{h} image"
        )));
    }
    let theta = 2.0 * PI * ((x + 0.5) / w as f64) - PI;
    let phi = PI * ((y + 0.5) / h as f64) - PI / 2.0;
    Ok(Direction {
        x: phi.cos() * theta.sin(),
        y: phi.sin(),
        z: phi.cos() * theta.cos(),
    })
}

/// Continuous equirect pixel coordinates of a direction (inverse of
/// [`pixel_to_direction`] up to the longitude wrap).
pub fn direction_to_pixel(d: &Direction, (w, h): (usize, usize)) -> (f64, f64) {
    let px = (d.longitude() + PI) / (2.0 * PI) * w as f64 - 0.5;
    let py = (d.latitude() + PI / 2.0) / PI * h as f64 - 0.5;
    (px, py)
}

/// Face and within-face coordinates `(u, v)` in `[0, 1]` of a direction.
///
/// The face is the one whose forward axis has the largest component; exact
/// ties go to the earlier face in `[F, R, B, L, T, D]`.
pub fn direction_to_face_uv(d: &Direction) -> (Face, f64, f64) {
    let mut best = Face::F;
    let mut best_val = f64::NEG_INFINITY;
    for face in Face::ALL {
        let v = d.dot(face.axes().0);
        if v > best_val {
            best = face;
            best_val = v;
        }
    }
    let (_, right, down) = best.axes();
    let u = (d.dot(right) / best_val + 1.0) / 2.0;
    let v = (d.dot(down) / best_val + 1.0) / 2.0;
    (best, u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
}

/// Direction through `(u, v)` on `face`.
pub fn face_uv_to_direction(face: Face, u: f64, v: f64) -> Direction {
    let (f, r, d) = face.axes();
    let a = 2.0 * u - 1.0;
    let b = 2.0 * v - 1.0;
    Direction::new(
        f[0] + a * r[0] + b * d[0],
        f[1] + a * r[1] + b * d[1],
        f[2] + a * r[2] + b * d[2],
    )
    .expect("face directions are never zero")
}

fn sample_wrapped(img: &RgbImage, px: f64, py: f64, filter: Filter) -> [f32; 3] {
    let (w, h) = img.dims();
    let wrap = |x: i64| x.rem_euclid(w as i64) as usize;
    let py = py.clamp(0.0, (h - 1) as f64);
    match filter {
        Filter::Nearest => img.get(wrap((px + 0.5).floor() as i64), (py + 0.5).floor() as usize),
        Filter::Bilinear => {
            let x0 = px.floor();
            let fx = px - x0;
            let y0 = py.floor();
            let fy = py - y0;
            let (xa, xb) = (wrap(x0 as i64), wrap(x0 as i64 + 1));
            let ya = y0 as usize;
            let yb = (ya + 1).min(h - 1);
            blend(img, (xa, xb, fx), (ya, yb, fy))
        }
    }
}

fn sample_clamped(img: &RgbImage, px: f64, py: f64, filter: Filter) -> [f32; 3] {
    let (w, h) = img.dims();
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    match filter {
        Filter::Nearest => img.get((px + 0.5).floor() as usize, (py + 0.5).floor() as usize),
        Filter::Bilinear => {
            let x0 = px.floor();
            let y0 = py.floor();
            let xa = x0 as usize;
            let ya = y0 as usize;
            blend(img, (xa, (xa + 1).min(w - 1), px - x0), (ya, (ya + 1).min(h - 1), py - y0))
        }
    }
}

fn blend(img: &RgbImage, (xa, xb, fx): (usize, usize, f64), (ya, yb, fy): (usize, usize, f64)) -> [f32; 3] {
    let p00 = img.get(xa, ya);
    let p10 = img.get(xb, ya);
    let p01 = img.get(xa, yb);
    let p11 = img.get(xb, yb);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
    out
}

fn face_pixel_direction(face: Face, i: usize, j: usize, s: usize) -> Direction {
    face_uv_to_direction(face, (i as f64 + 0.5) / s as f64, (j as f64 + 0.5) / s as f64)
}

/// Resamples a panorama into six `S x S` faces.
pub fn equirect_to_cubemap(img: &EquirectImage, face_size: usize, filter: Filter) -> Result<CubeMap> {
    if face_size < 4 {
        return Err(Error::Config(format!("face size {face_size} is below the minimum of 4")));
    }
    let dims = (img.width(), img.height());
    let faces = Face::ALL
        .iter()
        .map(|&face| {
            RgbImage::from_fn(face_size, face_size, |i, j| {
                let (px, py) = direction_to_pixel(&face_pixel_direction(face, i, j, face_size), dims);
                img.sample(px, py, filter)
            })
        })
        .collect();
    CubeMap::new(faces)
}

/// Resamples six faces back into a `W x H` panorama.
pub fn cubemap_to_equirect(cube: &CubeMap, width: usize, height: usize, filter: Filter) -> Result<EquirectImage> {
    if height == 0 || width != 2 * height {
        return Err(Error::Config(format!(
            "equirectangular output must be 2:1, got {width}x{height}"
        )));
    }
    let s = cube.face_size() as f64;
    let img = RgbImage::from_fn(width, height, |x, y| {
        let d = pixel_to_direction((width, height), (x as f64, y as f64)).expect("in range");
        let (face, u, v) = direction_to_face_uv(&d);
        sample_clamped(cube.face(face), u * s - 0.5, v * s - 0.5, filter)
    });
    EquirectImage::new(img)
}

/// Nearest-neighbour reprojection of an equirect mask onto the six faces.
pub fn mask_to_cubemap(mask: &Mask, face_size: usize) -> Result<CubeMask> {
    let (w, h) = mask.dims();
    if h == 0 || w != 2 * h {
        return Err(Error::Validation(format!("equirectangular mask must be 2:1, got {w}x{h}")));
    }
    if face_size < 4 {
        return Err(Error::Config(format!("face size {face_size} is below the minimum of 4")));
    }
    if let Some(&v) = mask.as_slice().iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("mask is not binary: found value {v}")));
    }
    let faces = Face::ALL
        .iter()
        .map(|&face| {
            Mask::from_fn(face_size, face_size, |i, j| {
                let (px, py) = direction_to_pixel(&face_pixel_direction(face, i, j, face_size), (w, h));
                let x = ((px + 0.5).floor() as i64).rem_euclid(w as i64) as usize;
                let y = (py.clamp(0.0, (h - 1) as f64) + 0.5).floor() as usize;
                mask.is_valid(x, y)
            })
        })
        .collect();
    CubeMask::new(faces)
}

/// Nearest-neighbour reprojection of per-face masks back to a `W x H` mask.
pub fn cubemask_to_equirect(mask: &CubeMask, width: usize, height: usize) -> Result<Mask> {
    if height == 0 || width != 2 * height {
        return Err(Error::Config(format!(
            "equirectangular output must be 2:1, got {width}x{height}"
        )));
    }
    let s = mask.face_size();
    Ok(Mask::from_fn(width, height, |x, y| {
        let d = pixel_to_direction((width, height), (x as f64, y as f64)).expect("in range");
        let (face, u, v) = direction_to_face_uv(&d);
        let i = ((u * s as f64).floor() as usize).min(s - 1);
        let j = ((v * s as f64).floor() as usize).min(s - 1);
        mask.face(face).is_valid(i, j)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Direction, b: [f64; 3]) -> bool {
        (a.x - b[0]).abs() < 1e-12 && (a.y - b[1]).abs() < 1e-12 && (a.z - b[2]).abs() < 1e-12
    }

    #[test]
    fn image_centre_looks_forward() {
        let d = pixel_to_direction((512, 256), (255.5, 127.5)).unwrap();
        assert!(close(&d, [0.0, 0.0, 1.0]), "{d:?}");
        assert!(d.longitude().abs() < 1e-12 && d.latitude().abs() < 1e-12);
    }

    #[test]
    fn leftmost_column_is_behind() {
        let d = pixel_to_direction((512, 256), (0.0, 127.5)).unwrap();
        assert!((d.longitude() - (-PI + PI / 512.0)).abs() < 1e-12);
        assert_eq!(direction_to_face_uv(&d).0, Face::B);
    }

    #[test]
    fn top_row_looks_up() {
        let d = pixel_to_direction((512, 256), (10.0, 0.0)).unwrap();
        assert!(d.y < -0.99);
        assert_eq!(direction_to_face_uv(&d).0, Face::T);
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        assert!(pixel_to_direction((512, 256), (512.0, 0.0)).is_err());
        assert!(pixel_to_direction((512, 256), (0.0, -0.1)).is_err());
    }

    #[test]
    fn axis_directions_hit_face_centres() {
        let cases = [
            ([0.0, 0.0, 1.0], Face::F),
            ([1.0, 0.0, 0.0], Face::R),
            ([0.0, 0.0, -1.0], Face::B),
            ([-1.0, 0.0, 0.0], Face::L),
            ([0.0, -1.0, 0.0], Face::T),
            ([0.0, 1.0, 0.0], Face::D),
        ];
        for (v, face) in cases {
            let d = Direction::new(v[0], v[1], v[2]).unwrap();
            let (f, u, w) = direction_to_face_uv(&d);
            assert_eq!(f, face);
            assert!((u - 0.5).abs() < 1e-15 && (w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_follow_face_priority() {
        let fr = Direction::new(1.0, 0.0, 1.0).unwrap();
        assert_eq!(direction_to_face_uv(&fr).0, Face::F);
        let rb = Direction::new(1.0, 0.0, -1.0).unwrap();
        assert_eq!(direction_to_face_uv(&rb).0, Face::R);
        let lt = Direction::new(-1.0, -1.0, 0.0).unwrap();
        assert_eq!(direction_to_face_uv(&lt).0, Face::L);
        let corner = Direction::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(direction_to_face_uv(&corner).0, Face::F);
    }

    #[test]
    fn adjacent_face_edges_meet() {
        // F's top edge is T's bottom edge; F's right edge is R's left edge.
        let s = 0.3;
        assert!(face_uv_to_direction(Face::F, s, 0.0).distance(&face_uv_to_direction(Face::T, s, 1.0)) < 1e-12);
        assert!(face_uv_to_direction(Face::F, 1.0, s).distance(&face_uv_to_direction(Face::R, 0.0, s)) < 1e-12);
        assert!(face_uv_to_direction(Face::F, s, 1.0).distance(&face_uv_to_direction(Face::D, s, 0.0)) < 1e-12);
        assert!(face_uv_to_direction(Face::L, 1.0, s).distance(&face_uv_to_direction(Face::F, 0.0, s)) < 1e-12);
        assert!(face_uv_to_direction(Face::B, 1.0, s).distance(&face_uv_to_direction(Face::L, 0.0, s)) < 1e-12);
    }

    #[test]
    fn small_face_size_is_config_error() {
        let img = EquirectImage::new(RgbImage::new(16, 8)).unwrap();
        assert!(matches!(equirect_to_cubemap(&img, 3, Filter::Bilinear), Err(Error::Config(_))));
    }

    #[test]
    fn non_2_to_1_output_is_config_error() {
        let cube = CubeMap::new(vec![RgbImage::new(4, 4); 6]).unwrap();
        assert!(matches!(cubemap_to_equirect(&cube, 30, 16, Filter::Bilinear), Err(Error::Config(_))));
    }

    #[test]
    fn equirect_invariants_are_checked() {
        assert!(EquirectImage::new(RgbImage::new(10, 4)).is_err());
        assert!(EquirectImage::new(RgbImage::filled(8, 4, [1.5, 0.0, 0.0])).is_err());
    }

    #[test]
    fn strip_round_trip() {
        let faces: Vec<RgbImage> = (0..6).map(|i| RgbImage::filled(4, 4, [i as f32 / 6.0, 0.0, 1.0])).collect();
        let cube = CubeMap::new(faces).unwrap();
        assert_eq!(CubeMap::from_strip(&cube.to_strip()).unwrap(), cube);
    }

    #[test]
    fn horizontal_wrap() {
        let img = EquirectImage::new(RgbImage::from_fn(16, 8, |x, y| [x as f32 / 16.0, y as f32 / 8.0, 0.5])).unwrap();
        for &(px, py) in &[(0.3, 2.0), (15.7, 4.4), (-0.2, 1.0), (7.5, 7.9)] {
            assert_eq!(img.sample(px, py, Filter::Bilinear), img.sample(px + 16.0, py, Filter::Bilinear));
            assert_eq!(img.sample(px, py, Filter::Nearest), img.sample(px + 16.0, py, Filter::Nearest));
        }
    }
}

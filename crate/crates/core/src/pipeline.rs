//! Dataset ingestion, preprocessing and inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::masking::{apply_mask, sample_rect_mask, Mask, RectSpec, DEFAULT_FILL};
use crate::networks::{composite_cube, cubes_to_tensor, masks_to_tensor, tensor_to_cubes, Generator};
use crate::projection::{
    cubemap_to_equirect, equirect_to_cubemap, mask_to_cubemap, CubeMap, CubeMask, EquirectImage, Filter,
};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Buildings,
    Scenery,
    #[default]
    All,
}

impl Category {
    /// Subdirectory holding this category, if any.
    pub fn dir_name(self) -> Option<&'static str> {
        match self {
            Category::Buildings => Some("buildings"),
            Category::Scenery => Some("scenery"),
            Category::All => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub category: Category,
    /// Paths relative to `root` with `/` separators, sorted.
    pub image_ids: Vec<String>,
    pub skipped: Vec<SkipEntry>,
}

impl DatasetManifest {
    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(RgbImage::from_rgb8(&img.to_rgb8()))
}

/// Finds PNG/JPEG files under `dir` (or its category subdirectory), keeps
/// those that decode, and lists the rest in the skip report.
pub fn ingest(dir: &Path, split: Split, category: Category) -> Result<DatasetManifest> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("{} is not a directory", dir.display())));
    }
    let scan = match category.dir_name() {
        Some(sub) => dir.join(sub),
        None => dir.to_path_buf(),
    };
    let mut files = Vec::new();
    if scan.is_dir() {
        collect_files(&scan, &mut files)?;
    }
    let mut found: Vec<(String, PathBuf)> = files.into_iter().map(|p| (relative_id(dir, &p), p)).collect();
    found.sort();
    let checked: Vec<(String, Option<String>)> = found
        .par_iter()
        .map(|(id, p)| (id.clone(), decode_rgb(p).err().map(|e| e.to_string())))
        .collect();
    let mut image_ids = Vec::new();
    let mut skipped = Vec::new();
    for ((id, reason), (_, path)) in checked.into_iter().zip(found) {
        match reason {
            None => image_ids.push(id),
            Some(reason) => skipped.push(SkipEntry { path, reason }),
        }
    }
    if image_ids.is_empty() {
        return Err(Error::Validation(format!("no images found in {}", scan.display())));
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        split,
        category,
        image_ids,
        skipped,
    })
}

/// Box-filter resize: each output pixel averages the source area it covers,
/// with fractional weights at the edges.
pub fn resize_area(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    let (sw, sh) = img.dims();
    if (sw, sh) == (width, height) {
        return img.clone();
    }
    let weights = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut w = Vec::new();
                let mut k = a.floor() as usize;
                while (k as f64) < b && k < src {
                    let overlap = (b.min(k as f64 + 1.0) - a.max(k as f64)).max(0.0);
                    if overlap > 0.0 {
                        w.push((k, overlap / (b - a)));
                    }
                    k += 1;
                }
                w
            })
            .collect()
    };
    let wx = weights(sw, width);
    let wy = weights(sh, height);
    // Horizontal pass into f64 rows, then vertical.
    let mut rows = vec![0.0f64; sh * width * 3];
    for y in 0..sh {
        for (x, taps) in wx.iter().enumerate() {
            for &(k, w) in taps {
                let p = img.get(k, y);
                for c in 0..3 {
                    rows[(y * width + x) * 3 + c] += w * p[c] as f64;
                }
            }
        }
    }
    RgbImage::from_fn(width, height, |x, y| {
        let mut acc = [0.0f64; 3];
        for &(k, w) in &wy[y] {
            for c in 0..3 {
                acc[c] += w * rows[(k * width + x) * 3 + c];
            }
        }
        acc.map(|v| v.clamp(0.0, 1.0) as f32)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Panorama width after resizing; height is half of it.
    pub equirect_width: usize,
    pub face_size: usize,
    pub fill: f32,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            equirect_width: 512,
            face_size: 256,
            fill: DEFAULT_FILL,
        }
    }
}

/// Decodes any-aspect image and resizes it to a `W x W/2` panorama.
pub fn load_equirect(path: &Path, equirect_width: usize) -> Result<EquirectImage> {
    let img = decode_rgb(path)?;
    EquirectImage::new(resize_area(&img, equirect_width, equirect_width / 2))
}

/// Everything one training or evaluation example needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image_id: String,
    pub equirect: EquirectImage,
    pub equirect_mask: Mask,
    pub rect: RectSpec,
    pub ground_truth: CubeMap,
    pub masks: CubeMask,
    pub damaged: CubeMap,
}

impl TrainingSample {
    pub fn face_size(&self) -> usize {
        self.ground_truth.face_size()
    }
}

/// Projects, masks with `rect` in panorama space and damages every face.
pub fn preprocess_with_rect(
    image_id: &str,
    equirect: &EquirectImage,
    rect: RectSpec,
    face_size: usize,
    fill: f32,
) -> Result<TrainingSample> {
    let (w, h) = (equirect.width(), equirect.height());
    rect.check_inside(w, h)?;
    let equirect_mask = rect.to_mask(w, h);
    let ground_truth = equirect_to_cubemap(equirect, face_size, Filter::Bilinear)?;
    let masks = mask_to_cubemap(&equirect_mask, face_size)?;
    let damaged = damage_cube(&ground_truth, &masks, fill)?;
    Ok(TrainingSample {
        image_id: image_id.to_string(),
        equirect: equirect.clone(),
        equirect_mask,
        rect,
        ground_truth,
        masks,
        damaged,
    })
}

/// As [`preprocess_with_rect`] with a hole drawn from `seed`.
pub fn preprocess_image(
    image_id: &str,
    equirect: &EquirectImage,
    face_size: usize,
    fill: f32,
    seed: u64,
) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, rect) = sample_rect_mask(&mut rng, equirect.width(), equirect.height())?;
    preprocess_with_rect(image_id, equirect, rect, face_size, fill)
}

pub fn preprocess(path: &Path, options: &PreprocessOptions, seed: u64) -> Result<TrainingSample> {
    let eq = load_equirect(path, options.equirect_width)?;
    let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    preprocess_image(&id, &eq, options.face_size, options.fill, seed)
}

pub fn damage_cube(cube: &CubeMap, masks: &CubeMask, fill: f32) -> Result<CubeMap> {
    let faces = cube
        .faces()
        .iter()
        .zip(masks.faces())
        .map(|(f, m)| apply_mask(f, m, fill))
        .collect::<Result<Vec<_>>>()?;
    CubeMap::new(faces)
}

/// Per-image hole seed: independent streams of one base seed.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Preprocesses every manifest image in parallel; output follows manifest
/// order, undecodable files go to the skip list.
pub fn load_samples(
    manifest: &DatasetManifest,
    options: &PreprocessOptions,
    seed: u64,
) -> Result<(Vec<TrainingSample>, Vec<SkipEntry>)> {
    let results: Vec<Result<TrainingSample>> = manifest
        .image_ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let eq = load_equirect(&manifest.path_of(id), options.equirect_width)?;
            preprocess_image(id, &eq, options.face_size, options.fill, image_seed(seed, i))
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in manifest.image_ids.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e @ (Error::Image { .. } | Error::Io { .. })) => skipped.push(SkipEntry {
                path: manifest.path_of(id),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((samples, skipped))
}

/// Fills the hole of `equirect` (mask 0) with the generator.
///
/// The panorama is damaged with `fill`, projected, inpainted on the faces
/// and projected back; valid panorama pixels are copied from the input
/// unchanged.
pub fn infer(
    generator: &Generator<f32>,
    equirect: &EquirectImage,
    mask: &Mask,
    face_size: usize,
    fill: f32,
) -> Result<EquirectImage> {
    let (w, h) = (equirect.width(), equirect.height());
    if mask.dims() != (w, h) {
        return Err(Error::Validation(format!(
            "mask is {:?} but panorama is {w}x{h}",
            mask.dims()
        )));
    }
    generator.config().check_face_size(face_size)?;
    let damaged_eq = EquirectImage::new(apply_mask(equirect.image(), mask, fill)?)?;
    let cube = equirect_to_cubemap(&damaged_eq, face_size, Filter::Bilinear)?;
    let masks = mask_to_cubemap(mask, face_size)?;
    let damaged = damage_cube(&cube, &masks, fill)?;
    let generated = generator.generate(&cubes_to_tensor(&[&damaged]), &masks_to_tensor(&[&masks]))?;
    let generated = tensor_to_cubes(&generated)?.remove(0);
    let filled = composite_cube(&generated, &damaged, &masks)?;
    let back = cubemap_to_equirect(&filled, w, h, Filter::Bilinear)?;
    let mut out = equirect.image().clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.is_valid(x, y) {
                out.set(x, y, back.image().get(x, y));
            }
        }
    }
    EquirectImage::new(out)
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn format_for(path: &Path) -> Result<image::ImageFormat> {
    image::ImageFormat::from_path(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn encode(path: &Path, img: image::DynamicImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, format_for(path)?).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, buf.get_ref())
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    encode(path, image::DynamicImage::ImageRgb8(img.to_rgb8()))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    encode(path, image::DynamicImage::ImageLuma8(mask.to_luma8()))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Mask::from_luma8(&img.to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::Face;

    fn gradient(w: usize) -> EquirectImage {
        let h = w / 2;
        EquirectImage::new(RgbImage::from_fn(w, h, |x, y| {
            [x as f32 / w as f32, y as f32 / h as f32, 0.5]
        }))
        .unwrap()
    }

    #[test]
    fn area_resize_preserves_mean_and_constants() {
        let img = RgbImage::from_fn(7, 5, |x, y| [(x * y) as f32 / 24.0, 0.25, x as f32 / 6.0]);
        let small = resize_area(&img, 3, 2);
        let mean = |i: &RgbImage| i.as_slice().iter().map(|&v| v as f64).sum::<f64>() / i.as_slice().len() as f64;
        assert!((mean(&img) - mean(&small)).abs() < 1e-6);
        assert!(small.as_slice().iter().skip(1).step_by(3).all(|&v| (v - 0.25).abs() < 1e-7));
        let big = resize_area(&img, 14, 10);
        assert_eq!(big.get(3, 5), img.get(1, 2));
    }

    #[test]
    fn area_resize_halving_averages_blocks() {
        let img = RgbImage::from_fn(4, 2, |x, _| [x as f32 / 4.0; 3]);
        let half = resize_area(&img, 2, 1);
        assert!((half.get(0, 0)[0] - 0.125).abs() < 1e-7);
        assert!((half.get(1, 0)[0] - 0.625).abs() < 1e-7);
    }

    #[test]
    fn rect_straddling_front_and_right() {
        // Centred on longitude pi/4 at the equator.
        let rect = RectSpec { x0: 320 - 40, y0: 128 - 32, width: 80, height: 64 };
        let s = preprocess_with_rect("a", &gradient(512), rect, 32, 0.5).unwrap();
        let holes = s.masks.faces_with_holes();
        assert!(holes.contains(&Face::F) && holes.contains(&Face::R), "{holes:?}");
    }

    #[test]
    fn rect_over_the_pole_reaches_top_face() {
        let rect = RectSpec { x0: 0, y0: 0, width: 256, height: 64 };
        let s = preprocess_with_rect("a", &gradient(512), rect, 32, 0.5).unwrap();
        assert!(s.masks.faces_with_holes().contains(&Face::T));
    }

    #[test]
    fn damaged_matches_apply_mask() {
        let s = preprocess_image("a", &gradient(128), 16, 0.5, 3).unwrap();
        for f in 0..6 {
            let expected = apply_mask(&s.ground_truth.faces()[f], &s.masks.faces()[f], 0.5).unwrap();
            assert_eq!(s.damaged.faces()[f], expected);
        }
        assert_eq!(s, preprocess_image("a", &gradient(128), 16, 0.5, 3).unwrap());
    }

    #[test]
    fn image_seeds_differ_per_index() {
        assert_ne!(image_seed(1, 0), image_seed(1, 1));
        assert_eq!(image_seed(1, 5), image_seed(1, 5));
    }

    #[test]
    fn ingest_skips_corrupt_files_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("scenery")).unwrap();
        for name in ["b.png", "a.png", "scenery/c.jpg"] {
            save_rgb(&root.join(name), &gradient(32).into_image()).unwrap();
        }
        fs::write(root.join("broken.png"), b"not a png").unwrap();
        fs::write(root.join("notes.txt"), b"ignored").unwrap();
        let m = ingest(root, Split::Train, Category::All).unwrap();
        assert_eq!(m.image_ids, vec!["a.png", "b.png", "scenery/c.jpg"]);
        assert_eq!(m.skipped.len(), 1);
        assert!(m.skipped[0].path.ends_with("broken.png"));
        let s = ingest(root, Split::Eval, Category::Scenery).unwrap();
        assert_eq!(s.image_ids, vec!["scenery/c.jpg"]);
        let err = ingest(root, Split::Train, Category::Buildings).unwrap_err();
        assert!(err.to_string().contains("no images found"), "{err}");
    }

    #[test]
    fn load_samples_follows_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["x.png", "y.png"] {
            save_rgb(&dir.path().join(name), &gradient(48).into_image()).unwrap();
        }
        let m = ingest(dir.path(), Split::Train, Category::All).unwrap();
        let opts = PreprocessOptions {
            equirect_width: 64,
            face_size: 16,
            fill: 0.5,
        };
        let (samples, skipped) = load_samples(&m, &opts, 9).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(samples[1].image_id, "y.png");
        assert_eq!(samples[0].equirect.width(), 64);
        assert_ne!(samples[0].rect, samples[1].rect);
        assert_eq!(load_samples(&m, &opts, 9).unwrap().0, samples);
    }

    #[test]
    fn infer_keeps_valid_pixels() {
        use crate::networks::GeneratorConfig;
        let g = Generator::<f32>::new(GeneratorConfig::for_face_size(16), 1).unwrap();
        let eq = gradient(64);
        let all = Mask::all_valid(64, 32);
        assert_eq!(infer(&g, &eq, &all, 16, 0.5).unwrap(), eq);
        let rect = RectSpec { x0: 10, y0: 8, width: 20, height: 12 };
        let mask = rect.to_mask(64, 32);
        let out = infer(&g, &eq, &mask, 16, 0.5).unwrap();
        for y in 0..32 {
            for x in 0..64 {
                if mask.is_valid(x, y) {
                    assert_eq!(out.image().get(x, y), eq.image().get(x, y));
                }
            }
        }
        assert_ne!(out, eq);
        assert!(infer(&g, &eq, &Mask::all_valid(32, 32), 16, 0.5).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RectSpec { x0: 3, y0: 1, width: 5, height: 4 }.to_mask(16, 8);
        let p = dir.path().join("m.png");
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }
}

//! Image quality metrics and evaluation reports.
//!
//! Metrics take `[0, 1]` images. L1 and L2 are reported on the 8-bit scale.
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid positions only,
//! with `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over windows and channels.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::masking::{apply_mask, Mask};
use crate::networks::{composite_cube, cubes_to_tensor, masks_to_tensor, tensor_to_cubes, Generator};
use crate::pipeline::{save_rgb, write_atomic, TrainingSample};
use crate::projection::{cubemap_to_equirect, cubemask_to_equirect, CubeMap, Filter};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Validation(format!(
            "images differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Region selector: `None` is the whole image, otherwise pixels where the
/// mask is a hole.
fn region_pixels(a: &RgbImage, region: Option<&Mask>) -> Result<Vec<usize>> {
    match region {
        None => Ok((0..a.width() * a.height()).collect()),
        Some(m) => {
            if m.dims() != a.dims() {
                return Err(Error::Validation("region mask does not match image size".into()));
            }
            let px: Vec<usize> = (0..m.as_slice().len()).filter(|&i| m.as_slice()[i] == 0).collect();
            if px.is_empty() {
                return Err(Error::Validation("region contains no hole pixels".into()));
            }
            Ok(px)
        }
    }
}

fn squared_error(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<(f64, f64, usize)> {
    same_shape(a, b)?;
    let (da, db) = (a.as_slice(), b.as_slice());
    let mut abs = 0.0;
    let mut sq = 0.0;
    let px = region_pixels(a, region)?;
    for &p in &px {
        for c in 0..3 {
            let d = da[p * 3 + c] as f64 - db[p * 3 + c] as f64;
            abs += d.abs();
            sq += d * d;
        }
    }
    Ok((abs, sq, px.len() * 3))
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    psnr_in(a, b, None)
}

/// `10 log10(1 / MSE)`; [`PSNR_CAP`] when the images are identical.
pub fn psnr_in(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    let (_, sq, n) = squared_error(a, b, region)?;
    if sq == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (n as f64 / sq).log10())
}

pub fn l1_distance(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    l1_distance_in(a, b, None)
}

pub fn l1_distance_in(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    let (abs, _, n) = squared_error(a, b, region)?;
    Ok(255.0 * abs / n as f64)
}

pub fn l2_distance(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    l2_distance_in(a, b, None)
}

pub fn l2_distance_in(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    let (_, sq, n) = squared_error(a, b, region)?;
    Ok(255.0 * (sq / n as f64).sqrt())
}

/// Normalised 1-d Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Valid-mode separable filtering of one channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            tmp[y * wo + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Per-channel SSIM maps over valid window positions, `[3][ho * wo]`.
fn ssim_maps(a: &RgbImage, b: &RgbImage) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    same_shape(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let maps = (0..3)
        .map(|c| {
            let pa: Vec<f64> = a.as_slice().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.as_slice().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
            let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mu_a = filter_valid(&pa, w, h, &taps);
            let mu_b = filter_valid(&pb, w, h, &taps);
            let e_aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
            let e_bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
            let e_ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
            (0..mu_a.len())
                .map(|i| ssim_from_moments(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i]))
                .collect()
        })
        .collect();
    Ok((maps, w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1))
}

/// SSIM of one window from its first and second moments.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)) / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_in(a, b, None)
}

/// Mean SSIM; with a region, only windows centred on a hole pixel count.
pub fn ssim_in(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    let (maps, wo, ho) = ssim_maps(a, b)?;
    let r = SSIM_WINDOW / 2;
    let keep: Vec<usize> = match region {
        None => (0..wo * ho).collect(),
        Some(m) => {
            region_pixels(a, Some(m))?;
            (0..wo * ho)
                .filter(|&i| m.get(i % wo + r, i / wo + r) == 0)
                .collect()
        }
    };
    if keep.is_empty() {
        return Err(Error::Validation("no SSIM window is centred in the region".into()));
    }
    let total: f64 = maps.iter().map(|m| keep.iter().map(|&i| m[i]).sum::<f64>()).sum();
    Ok(total / (3 * keep.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Reprojected equirectangular panorama.
    #[default]
    Equirect,
    /// The six faces laid out as a strip.
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Whole,
    Hole,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::Equirect => "equirect",
            Domain::Cube => "cube",
        }
    }
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Hole => "hole",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image_id: String,
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
}

impl MetricsRow {
    pub fn compute(image_id: &str, pred: &RgbImage, truth: &RgbImage, region: Option<&Mask>) -> Result<Self> {
        Ok(Self {
            image_id: image_id.to_string(),
            ssim: ssim_in(pred, truth, region)?,
            psnr: psnr_in(pred, truth, region)?,
            l1: l1_distance_in(pred, truth, region)?,
            l2: l2_distance_in(pred, truth, region)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Summary {
    pub fn of(rows: &[MetricsRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            count: rows.len(),
            ssim: mean(|r| r.ssim),
            psnr: mean(|r| r.psnr),
            l1: mean(|r| r.l1),
            l2: mean(|r| r.l2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub domain: Domain,
    pub region: Region,
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Per-image rows, then a `mean` row; every row carries the labels.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let (domain, region) = (self.domain.label(), self.region.label());
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["image_id", "domain", "region", "ssim", "psnr", "l1", "l2"]).map_err(csv_err)?;
        let s = &self.summary;
        let mean = MetricsRow {
            image_id: "mean".into(),
            ssim: s.ssim,
            psnr: s.psnr,
            l1: s.l1,
            l2: s.l2,
        };
        for r in self.rows.iter().chain(std::iter::once(&mean)) {
            w.write_record([
                r.image_id.clone(),
                domain.into(),
                region.into(),
                r.ssim.to_string(),
                r.psnr.to_string(),
                r.l1.to_string(),
                r.l2.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    pub fn save(&self, csv_path: Option<&Path>, json_path: Option<&Path>) -> Result<()> {
        if let Some(p) = csv_path {
            write_atomic(p, self.to_csv()?.as_bytes())?;
        }
        if let Some(p) = json_path {
            write_atomic(p, self.to_json().as_bytes())?;
        }
        Ok(())
    }
}

/// Produces face content for a damaged sample.
pub trait Inpainter: Sync {
    fn inpaint(&self, sample: &TrainingSample) -> Result<CubeMap>;
}

/// Returns the ground truth: the upper bound of any inpainter.
pub struct IdentityInpainter;

impl Inpainter for IdentityInpainter {
    fn inpaint(&self, sample: &TrainingSample) -> Result<CubeMap> {
        Ok(sample.ground_truth.clone())
    }
}

/// Leaves the fill colour in the hole.
pub struct GrayInpainter;

impl Inpainter for GrayInpainter {
    fn inpaint(&self, sample: &TrainingSample) -> Result<CubeMap> {
        Ok(sample.damaged.clone())
    }
}

/// Evaluation-mode generator.
pub struct GeneratorInpainter<'a>(pub &'a Generator<f32>);

impl Inpainter for GeneratorInpainter<'_> {
    fn inpaint(&self, sample: &TrainingSample) -> Result<CubeMap> {
        self.0
            .config()
            .check_face_size(sample.face_size())
            .map_err(|e| Error::Validation(e.to_string()))?;
        let out = self
            .0
            .generate(&cubes_to_tensor(&[&sample.damaged]), &masks_to_tensor(&[&sample.masks]))?;
        Ok(tensor_to_cubes(&out)?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub domain: Domain,
    pub region: Region,
}

/// Prediction and reference images for one sample in the chosen domain,
/// plus the region mask in that domain.
pub struct Rendered {
    pub damaged: RgbImage,
    pub prediction: RgbImage,
    pub truth: RgbImage,
    pub hole: Mask,
}

/// Composites the inpainter output into the damaged faces and renders
/// prediction and ground truth in the same domain, so an exact inpainter
/// scores perfectly.
pub fn render(inpainter: &dyn Inpainter, sample: &TrainingSample, domain: Domain) -> Result<Rendered> {
    let generated = inpainter.inpaint(sample)?;
    let filled = composite_cube(&generated, &sample.damaged, &sample.masks)?;
    match domain {
        Domain::Equirect => {
            let (w, h) = (sample.equirect.width(), sample.equirect.height());
            let to_eq = |c: &CubeMap| cubemap_to_equirect(c, w, h, Filter::Bilinear).map(|e| e.into_image());
            Ok(Rendered {
                damaged: apply_mask(sample.equirect.image(), &sample.equirect_mask, fill_of(sample))?,
                prediction: to_eq(&filled)?,
                truth: to_eq(&sample.ground_truth)?,
                hole: cubemask_to_equirect(&sample.masks, w, h)?,
            })
        }
        Domain::Cube => {
            let s = sample.face_size();
            let strip_mask = Mask::from_fn(6 * s, s, |x, y| sample.masks.faces()[x / s].is_valid(x % s, y));
            Ok(Rendered {
                damaged: sample.damaged.to_strip(),
                prediction: filled.to_strip(),
                truth: sample.ground_truth.to_strip(),
                hole: strip_mask,
            })
        }
    }
}

/// The fill value used when the sample was damaged, read back from a hole
/// pixel (mid-gray if the sample has no hole).
fn fill_of(sample: &TrainingSample) -> f32 {
    for (face, mask) in sample.damaged.faces().iter().zip(sample.masks.faces()) {
        if let Some(i) = mask.as_slice().iter().position(|&v| v == 0) {
            return face.as_slice()[i * 3];
        }
    }
    crate::masking::DEFAULT_FILL
}

/// Metrics for every sample, in input order, plus their means.
pub fn evaluate(inpainter: &dyn Inpainter, samples: &[TrainingSample], options: EvalOptions) -> Result<Report> {
    let rows = samples
        .par_iter()
        .map(|s| {
            let r = render(inpainter, s, options.domain)?;
            let region = (options.region == Region::Hole).then_some(&r.hole);
            MetricsRow::compute(&s.image_id, &r.prediction, &r.truth, region)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        domain: options.domain,
        region: options.region,
        summary: Summary::of(&rows),
        rows,
    })
}

const GRID_GAP: usize = 4;

/// One row per sample: damaged input | inpainted | ground truth.
pub fn comparison_grid(inpainter: &dyn Inpainter, samples: &[TrainingSample], domain: Domain) -> Result<RgbImage> {
    let rendered = samples
        .par_iter()
        .map(|s| render(inpainter, s, domain))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = rendered.first() else {
        return Err(Error::Validation("no samples for the grid".into()));
    };
    let (w, h) = first.truth.dims();
    if rendered.iter().any(|r| r.truth.dims() != (w, h)) {
        return Err(Error::Validation("grid samples differ in size".into()));
    }
    let mut grid = RgbImage::filled(3 * w + 2 * GRID_GAP, rendered.len() * (h + GRID_GAP) - GRID_GAP, [1.0; 3]);
    for (i, r) in rendered.iter().enumerate() {
        let y = i * (h + GRID_GAP);
        grid.blit(&r.damaged, 0, y);
        grid.blit(&r.prediction, w + GRID_GAP, y);
        grid.blit(&r.truth, 2 * (w + GRID_GAP), y);
    }
    Ok(grid)
}

pub fn save_grid(path: &Path, grid: &RgbImage) -> Result<()> {
    save_rgb(path, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identical_images() {
        let a = random_image(1, 20, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn zeros_versus_ones() {
        let z = RgbImage::filled(12, 12, [0.0; 3]);
        let o = RgbImage::filled(12, 12, [1.0; 3]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert_eq!(l1_distance(&z, &o).unwrap(), 255.0);
        assert_eq!(l2_distance(&z, &o).unwrap(), 255.0);
    }

    #[test]
    fn hand_computed_4x4() {
        // Only pixel (1, 2) differs, by 0.5 in red and 0.25 in blue.
        let a = RgbImage::filled(4, 4, [0.5; 3]);
        let mut b = a.clone();
        b.set(1, 2, [1.0, 0.5, 0.25]);
        let n = 48.0;
        assert!((l1_distance(&a, &b).unwrap() - 255.0 * 0.75 / n).abs() < 1e-9);
        assert!((l2_distance(&a, &b).unwrap() - 255.0 * (0.3125f64 / n).sqrt()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (n / 0.3125f64).log10()).abs() < 1e-9);
    }

    #[test]
    fn constant_images_follow_luminance_term() {
        let a = RgbImage::filled(11, 11, [0.2; 3]);
        let b = RgbImage::filled(11, 11, [0.7; 3]);
        let (x, y) = (0.2f32 as f64, 0.7f32 as f64);
        let expected = (2.0 * x * y + C1) / (x * x + y * y + C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn shape_and_size_errors() {
        let a = RgbImage::new(12, 12);
        assert!(matches!(psnr(&a, &RgbImage::new(12, 13)), Err(Error::Validation(_))));
        assert!(matches!(ssim(&RgbImage::new(10, 12), &RgbImage::new(10, 12)), Err(Error::Validation(_))));
    }

    #[test]
    fn hole_region_ignores_valid_pixels() {
        let a = random_image(2, 16, 16);
        let mut b = a.clone();
        let mask = Mask::from_fn(16, 16, |x, _| x >= 8);
        for y in 0..16 {
            for x in 8..16 {
                b.set(x, y, [0.0; 3]);
            }
        }
        assert_eq!(l1_distance_in(&a, &b, Some(&mask)).unwrap(), 0.0);
        assert!(l1_distance(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn summary_is_row_mean() {
        let rows: Vec<MetricsRow> = (0..5)
            .map(|i| MetricsRow {
                image_id: i.to_string(),
                ssim: 0.1 * i as f64,
                psnr: 20.0 + i as f64,
                l1: 3.0 * i as f64,
                l2: 1.5,
            })
            .collect();
        let s = Summary::of(&rows);
        assert_eq!(s.count, 5);
        assert!((s.ssim - 0.2).abs() < 1e-12 && (s.psnr - 22.0).abs() < 1e-12 && (s.l1 - 6.0).abs() < 1e-12);
    }

    /// Direct 2-d window sums, independent of the separable filter.
    fn brute_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
        let (w, h) = a.dims();
        let k = SSIM_WINDOW as i64;
        let c = (k - 1) as f64 / 2.0;
        let mut wts = vec![0.0; (k * k) as usize];
        for dy in 0..k {
            for dx in 0..k {
                let r2 = (dx as f64 - c).powi(2) + (dy as f64 - c).powi(2);
                wts[(dy * k + dx) as usize] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let z: f64 = wts.iter().sum();
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for y0 in 0..=(h - SSIM_WINDOW) {
                for x0 in 0..=(w - SSIM_WINDOW) {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wt = wts[dy * SSIM_WINDOW + dx] / z;
                            let u = a.get(x0 + dx, y0 + dy)[ch] as f64;
                            let v = b.get(x0 + dx, y0 + dy)[ch] as f64;
                            ma += wt * u;
                            mb += wt * v;
                            aa += wt * u * u;
                            bb += wt * v * v;
                            ab += wt * u * v;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                        / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_sums() {
        for seed in 0..3 {
            let a = random_image(10 + seed, 17, 14);
            let b = random_image(20 + seed, 17, 14);
            assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-9);
            let mut c = a.clone();
            c.set(5, 6, [0.0, 1.0, 0.5]);
            assert!((ssim(&a, &c).unwrap() - brute_ssim(&a, &c)).abs() < 1e-9);
        }
    }

    #[test]
    fn more_noise_scores_worse() {
        let a = random_image(3, 32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f32> = (0..a.as_slice().len()).map(|_| rng.random::<f32>() - 0.5).collect();
        let noisy = |s: f32| {
            let data = a.as_slice().iter().zip(&noise).map(|(v, n)| (v + s * n).clamp(0.0, 1.0)).collect();
            RgbImage::from_raw(32, 24, data).unwrap()
        };
        let levels = [0.02, 0.1, 0.3, 0.8];
        let scores: Vec<(f64, f64, f64)> = levels
            .iter()
            .map(|&l| {
                let b = noisy(l);
                (ssim(&a, &b).unwrap(), psnr(&a, &b).unwrap(), l1_distance(&a, &b).unwrap())
            })
            .collect();
        for w in scores.windows(2) {
            assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1 && w[1].2 > w[0].2, "{scores:?}");
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = random_image(5, 15, 13);
        let b = random_image(6, 15, 13);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    fn samples() -> Vec<TrainingSample> {
        use crate::pipeline::preprocess_image;
        use crate::projection::EquirectImage;
        (0..2)
            .map(|i| {
                let eq = EquirectImage::new(RgbImage::from_fn(64, 32, |x, y| {
                    [x as f32 / 64.0, y as f32 / 32.0, 0.2 + 0.3 * i as f32]
                }))
                .unwrap();
                preprocess_image(&format!("s{i}"), &eq, 16, 0.5, 7 + i as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_is_perfect_in_every_domain_and_region() {
        let data = samples();
        for domain in [Domain::Equirect, Domain::Cube] {
            for region in [Region::Whole, Region::Hole] {
                let r = evaluate(&IdentityInpainter, &data, EvalOptions { domain, region }).unwrap();
                assert_eq!(r.rows.len(), 2);
                assert_eq!(r.summary.psnr, PSNR_CAP);
                assert!((r.summary.ssim - 1.0).abs() < 1e-12);
                assert_eq!((r.summary.l1, r.summary.l2), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn gray_fill_is_worse_in_the_hole() {
        let data = samples();
        let opts = |region| EvalOptions {
            domain: Domain::Equirect,
            region,
        };
        let whole = evaluate(&GrayInpainter, &data, opts(Region::Whole)).unwrap();
        let hole = evaluate(&GrayInpainter, &data, opts(Region::Hole)).unwrap();
        assert!(whole.summary.psnr < PSNR_CAP && whole.summary.l1 > 0.0);
        assert!(hole.summary.l1 > whole.summary.l1);
        assert!(hole.summary.psnr < whole.summary.psnr);
    }

    #[test]
    fn csv_has_rows_then_mean() {
        let r = evaluate(&GrayInpainter, &samples(), EvalOptions::default()).unwrap();
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image_id,domain,region,ssim,psnr,l1,l2");
        assert!(lines[1].starts_with("s0,equirect,whole,"));
        assert!(lines[3].starts_with("mean,"));
        assert_eq!(lines.len(), 4);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn grid_layout() {
        let g = comparison_grid(&GrayInpainter, &samples(), Domain::Cube).unwrap();
        assert_eq!(g.dims(), (3 * 96 + 2 * GRID_GAP, 2 * 16 + GRID_GAP));
        assert!(comparison_grid(&GrayInpainter, &[], Domain::Cube).is_err());
    }
}

//! Images, atmospheric-scattering haze synthesis, the dark channel operator,
//! unpaired dataset sampling and PNG/JPEG I/O.
//!
//! Every image is an `H x W x 3` grid of intensities in `[0,1]`. Haze is
//! rendered with the scattering model `I(x) = J(x) t(x) + A (1 - t(x))`
//! where `J` is the clear scene, `t` the per-pixel transmission and `A` the
//! global atmospheric light. For synthetic scenes the transmission comes from
//! a depth field via `t = exp(-beta * d)`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An RGB image with intensities in `[0,1]`, stored `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wrap a raw grid, validating shape and range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("image must be at least 1x1".into()));
        }
        if c != 3 {
            return Err(Error::InvalidInput(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v) || v.is_nan()) {
            return Err(Error::InvalidInput("image values outside [0,1]".into()));
        }
        Ok(Image { data })
    }

    /// Constant-valued image.
    pub fn constant(h: usize, w: usize, value: [f64; 3]) -> Result<Self> {
        let data = Array3::from_shape_fn((h, w, 3), |(_, _, c)| value[c]);
        Image::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Crop a `size x size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Image> {
        let (h, w, _) = self.data.dim();
        if y + size > h || x + size > w {
            return Err(Error::InvalidInput(format!(
                "crop {size} at ({y},{x}) exceeds {h}x{w} image"
            )));
        }
        Ok(Image {
            data: self
                .data
                .slice(ndarray::s![y..y + size, x..x + size, ..])
                .to_owned(),
        })
    }

    /// Map to the network-internal `(3,H,W)` layout in `[-1,1]` via `2v - 1`.
    pub fn to_internal(&self) -> Array3<f64> {
        let (h, w, _) = self.data.dim();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| 2.0 * self.data[(y, x, c)] - 1.0)
    }

    /// Inverse of [`Image::to_internal`]; clamps tiny numeric overshoot.
    pub fn from_internal(chw: &Array3<f64>) -> Result<Image> {
        let (c, h, w) = chw.dim();
        if c != 3 {
            return Err(Error::InvalidInput(format!(
                "internal tensor must have 3 channels, got {c}"
            )));
        }
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
            ((chw[(ch, y, x)] + 1.0) / 2.0).clamp(0.0, 1.0)
        });
        Image::new(data)
    }

    /// Mean absolute difference to another image of the same size.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::InvalidInput("image size mismatch".into()));
        }
        let n = self.data.len() as f64;
        Ok((&self.data - &other.data).mapv(f64::abs).sum() / n)
    }
}

/// Per-pixel transmission in `[0,1]`, same spatial size as its image.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    data: Array2<f64>,
}

impl TransmissionMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("empty transmission map".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v) || v.is_nan()) {
            return Err(Error::InvalidInput(
                "transmission values outside [0,1]".into(),
            ));
        }
        Ok(TransmissionMap { data })
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        TransmissionMap::new(Array2::from_elem((h, w), value))
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Ground truth for one synthetic hazy image: clear scene, transmission and
/// atmospheric light.
#[derive(Debug, Clone)]
pub struct HazeScene {
    pub clean: Image,
    pub transmission: TransmissionMap,
    pub airlight: [f64; 3],
}

impl HazeScene {
    fn validate(&self) -> Result<()> {
        let (h, w, _) = self.clean.data.dim();
        if self.transmission.data.dim() != (h, w) {
            return Err(Error::InvalidInput(
                "transmission size does not match image".into(),
            ));
        }
        if self.airlight.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidInput("airlight outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Render the scattering model: `I = J t + A (1 - t)` per pixel and channel.
pub fn synthesize_haze(scene: &HazeScene) -> Result<Image> {
    scene.validate()?;
    let (h, w, _) = scene.clean.data.dim();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = scene.transmission.data[(y, x)];
            for c in 0..3 {
                out[(y, x, c)] = scene.clean.data[(y, x, c)] * t + scene.airlight[c] * (1.0 - t);
            }
        }
    }
    Image::new(out)
}

/// Beer-Lambert transmission from a depth field: `t = exp(-beta * d)`.
pub fn transmission_from_depth(depth: &Array2<f64>, beta: f64) -> Result<TransmissionMap> {
    if beta < 0.0 || beta.is_nan() {
        return Err(Error::InvalidInput(format!("beta must be >= 0, got {beta}")));
    }
    if depth.iter().any(|&d| d < 0.0 || d.is_nan()) {
        return Err(Error::InvalidInput("depth must be non-negative".into()));
    }
    TransmissionMap::new(depth.mapv(|d| (-beta * d).exp()))
}

/// Dark channel: per-pixel minimum over channels and a `(2r+1)^2` window
/// clamped to the image bounds. Computed with two separable min passes.
pub fn dark_channel(img: &Image, patch_radius: usize) -> Array2<f64> {
    let (h, w, _) = img.data.dim();
    // channel minimum
    let mut cmin = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            cmin[(y, x)] = img.data[(y, x, 0)]
                .min(img.data[(y, x, 1)])
                .min(img.data[(y, x, 2)]);
        }
    }
    if patch_radius == 0 {
        return cmin;
    }
    let r = patch_radius;
    // horizontal pass
    let mut hmin = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let mut best = f64::INFINITY;
            for xx in x0..=x1 {
                best = best.min(cmin[(y, xx)]);
            }
            hmin[(y, x)] = best;
        }
    }
    // vertical pass
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let mut best = f64::INFINITY;
            for yy in y0..=y1 {
                best = best.min(hmin[(yy, x)]);
            }
            out[(y, x)] = best;
        }
    }
    out
}

// ── unpaired dataset ───────────────────────────────────────────────────

/// Two image collections with no index correspondence.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    hazy: Vec<Image>,
    clean: Vec<Image>,
}

impl UnpairedDataset {
    pub fn new(hazy: Vec<Image>, clean: Vec<Image>) -> Result<Self> {
        if hazy.is_empty() || clean.is_empty() {
            return Err(Error::Data("both dataset sides must be non-empty".into()));
        }
        Ok(UnpairedDataset { hazy, clean })
    }

    /// Load from two directories of image files (sorted by filename).
    pub fn from_dirs(hazy_dir: &Path, clean_dir: &Path) -> Result<Self> {
        let hazy = load_dir(hazy_dir)?;
        let clean = load_dir(clean_dir)?;
        UnpairedDataset::new(hazy, clean)
    }

    pub fn hazy_len(&self) -> usize {
        self.hazy.len()
    }

    pub fn clean_len(&self) -> usize {
        self.clean.len()
    }

    /// Independently sample one hazy and one clean image and independently
    /// crop each to `crop x crop`. Reproducible for a fixed RNG state.
    pub fn sample(&self, crop: usize, rng: &mut ChaCha8Rng) -> Result<(Image, Image)> {
        let hazy = sample_crop(&self.hazy, crop, rng)?;
        let clean = sample_crop(&self.clean, crop, rng)?;
        Ok((hazy, clean))
    }
}

fn sample_crop(side: &[Image], crop: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let idx = rng.gen_range(0..side.len());
    let img = &side[idx];
    if crop > img.height() || crop > img.width() {
        return Err(Error::InvalidInput(format!(
            "crop {} exceeds image {}x{}",
            crop,
            img.height(),
            img.width()
        )));
    }
    let y = rng.gen_range(0..=img.height() - crop);
    let x = rng.gen_range(0..=img.width() - crop);
    img.crop(y, x, crop)
}

/// Sorted list of image files in a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    list_images(dir)?.iter().map(|p| load_image(p)).collect()
}

// ── I/O ────────────────────────────────────────────────────────────────

/// Read a PNG/JPEG into `[0,1]` intensities.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    });
    Image::new(data)
}

/// Write as 8-bit PNG (values rounded to the nearest of 256 levels).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = img.data.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.data[(y, x, 0)] * 255.0).round() as u8,
                (img.data[(y, x, 1)] * 255.0).round() as u8,
                (img.data[(y, x, 2)] * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

// ── synthetic scenes ───────────────────────────────────────────────────

/// Parameters drawn for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub airlight: [f64; 3],
    pub beta: f64,
}

/// Smooth random field: a low-resolution uniform grid upsampled bilinearly.
fn smooth_field(
    h: usize,
    w: usize,
    cells: usize,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let gh = cells.max(2);
    let gw = cells.max(2);
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(lo..hi));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f64 / (h - 1).max(1) as f64 * (gh - 1) as f64;
        let fx = x as f64 / (w - 1).max(1) as f64 * (gw - 1) as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        grid[(y0, x0)] * (1.0 - dy) * (1.0 - dx)
            + grid[(y1, x0)] * dy * (1.0 - dx)
            + grid[(y0, x1)] * (1.0 - dy) * dx
            + grid[(y1, x1)] * dy * dx
    })
}

/// Procedural clear image: smooth colour background plus random solid
/// rectangles and discs, so scenes carry edges, saturated colours and the
/// dark pixels the dark-channel prior relies on.
pub fn synthetic_clean_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut data = Array3::<f64>::zeros((size, size, 3));
    for c in 0..3 {
        let field = smooth_field(size, size, 4, 0.05, 0.95, rng);
        data.index_axis_mut(Axis(2), c).assign(&field);
    }
    let shapes = rng.gen_range(4..9);
    for _ in 0..shapes {
        let color = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        let cy = rng.gen_range(0..size);
        let cx = rng.gen_range(0..size);
        let half = rng.gen_range(size / 12..size / 3).max(1);
        let disc = rng.gen_bool(0.5);
        let y0 = cy.saturating_sub(half);
        let y1 = (cy + half).min(size - 1);
        let x0 = cx.saturating_sub(half);
        let x1 = (cx + half).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if disc {
                    let dy = y as f64 - cy as f64;
                    let dx = x as f64 - cx as f64;
                    if dy * dy + dx * dx > (half * half) as f64 {
                        continue;
                    }
                }
                for c in 0..3 {
                    data[(y, x, c)] = color[c];
                }
            }
        }
    }
    Image::new(data).expect("synthetic image in range")
}

/// Smooth random depth (low-frequency noise plus a random linear ramp),
/// normalized into `[0.2, 1.6]`.
pub fn synthetic_depth(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let noise = smooth_field(size, size, 3, 0.0, 1.0, rng);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let ramp_weight = rng.gen_range(0.3..0.9);
    let raw = Array2::from_shape_fn((size, size), |(y, x)| {
        let ramp = (y as f64 / size as f64) * dy + (x as f64 / size as f64) * dx;
        noise[(y, x)] + ramp_weight * ramp
    });
    let min = raw.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let max = raw.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = (max - min).max(1e-9);
    raw.mapv(|v| 0.2 + 1.4 * (v - min) / span)
}

/// Draw scene parameters: per-channel airlight in `[0.7,1.0]`, beta in
/// `[0.6,1.8]`.
pub fn sample_scene_params(rng: &mut ChaCha8Rng) -> SceneParams {
    SceneParams {
        airlight: [
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.7..1.0),
        ],
        beta: rng.gen_range(0.6..1.8),
    }
}

/// Build a full synthetic scene (clean image, depth-derived transmission,
/// sampled airlight/beta).
pub fn synthetic_scene(size: usize, rng: &mut ChaCha8Rng) -> (HazeScene, SceneParams) {
    let clean = synthetic_clean_image(size, rng);
    let depth = synthetic_depth(size, rng);
    let params = sample_scene_params(rng);
    let transmission = transmission_from_depth(&depth, params.beta).expect("valid depth");
    (
        HazeScene {
            clean,
            transmission,
            airlight: params.airlight,
        },
        params,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn synthesize_constant_case() {
        let scene = HazeScene {
            clean: Image::constant(4, 5, [0.8, 0.8, 0.8]).unwrap(),
            transmission: TransmissionMap::constant(4, 5, 0.5).unwrap(),
            airlight: [1.0, 1.0, 1.0],
        };
        let out = synthesize_haze(&scene).unwrap();
        for &v in out.data().iter() {
            assert_abs_diff_eq!(v, 0.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn synthesize_limits() {
        let mut r = rng(1);
        let clean = random_image(6, 6, &mut r);
        let full = HazeScene {
            clean: clean.clone(),
            transmission: TransmissionMap::constant(6, 6, 1.0).unwrap(),
            airlight: [0.9, 0.8, 0.7],
        };
        assert_eq!(synthesize_haze(&full).unwrap(), clean);

        let zero = HazeScene {
            clean,
            transmission: TransmissionMap::constant(6, 6, 0.0).unwrap(),
            airlight: [0.9, 0.8, 0.7],
        };
        let out = synthesize_haze(&zero).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        out.data()[(y, x, c)],
                        [0.9, 0.8, 0.7][c],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn synthesize_rejects_shape_mismatch() {
        let scene = HazeScene {
            clean: Image::constant(4, 4, [0.5; 3]).unwrap(),
            transmission: TransmissionMap::constant(4, 5, 0.5).unwrap(),
            airlight: [1.0; 3],
        };
        assert!(matches!(
            synthesize_haze(&scene),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn synthesize_is_affine_in_clean() {
        let mut r = rng(2);
        let i1 = random_image(5, 7, &mut r);
        let i2 = random_image(5, 7, &mut r);
        let t = TransmissionMap::new(Array2::from_shape_fn((5, 7), |_| r.gen_range(0.0..1.0)))
            .unwrap();
        let a = [0.8, 0.9, 0.75];
        let alpha = 0.3;
        let blend = Image::new(alpha * i1.data() + (1.0 - alpha) * i2.data()).unwrap();
        let mk = |img: Image| HazeScene {
            clean: img,
            transmission: t.clone(),
            airlight: a,
        };
        let lhs = synthesize_haze(&mk(blend)).unwrap();
        let o1 = synthesize_haze(&mk(i1)).unwrap();
        let o2 = synthesize_haze(&mk(i2)).unwrap();
        for ((&l, &x1), &x2) in lhs
            .data()
            .iter()
            .zip(o1.data().iter())
            .zip(o2.data().iter())
        {
            assert_abs_diff_eq!(l, alpha * x1 + (1.0 - alpha) * x2, epsilon = 1e-12);
        }
    }

    #[test]
    fn transmission_cases() {
        let zeros = Array2::zeros((3, 3));
        let t = transmission_from_depth(&zeros, 1.3).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));

        let d = Array2::from_elem((2, 2), 5.0);
        let t = transmission_from_depth(&d, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));

        let ones = Array2::from_elem((2, 2), 1.0);
        let t = transmission_from_depth(&ones, 2.0f64.ln()).unwrap();
        for &v in t.data().iter() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }

        assert!(transmission_from_depth(&ones, -0.1).is_err());
        let neg = Array2::from_elem((2, 2), -1.0);
        assert!(transmission_from_depth(&neg, 1.0).is_err());
    }

    #[test]
    fn transmission_monotone() {
        let d1 = Array2::from_elem((2, 2), 0.5);
        let d2 = Array2::from_elem((2, 2), 1.0);
        let t_d1 = transmission_from_depth(&d1, 1.0).unwrap();
        let t_d2 = transmission_from_depth(&d2, 1.0).unwrap();
        assert!(t_d1.data()[(0, 0)] > t_d2.data()[(0, 0)]);
        let t_b1 = transmission_from_depth(&d1, 0.5).unwrap();
        assert!(t_b1.data()[(0, 0)] > t_d1.data()[(0, 0)]);
    }

    /// Brute-force window scan; the implementation uses separable passes.
    fn dark_channel_oracle(img: &Image, r: usize) -> Array2<f64> {
        let (h, w, _) = img.data().dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = f64::INFINITY;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    for c in 0..3 {
                        best = best.min(img.data()[(yy, xx, c)]);
                    }
                }
            }
            best
        })
    }

    #[test]
    fn dark_channel_constant_and_zero() {
        let img = Image::constant(6, 6, [0.3, 0.3, 0.3]).unwrap();
        for r in [0, 1, 3, 7] {
            assert!(dark_channel(&img, r).iter().all(|&v| v == 0.3));
        }

        let mut data = Array3::from_elem((5, 5, 3), 0.6);
        data[(2, 3, 1)] = 0.0;
        let img = Image::new(data).unwrap();
        // radius 4 covers the whole image from every pixel
        assert!(dark_channel(&img, 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dark_channel_matches_oracle_exactly() {
        let mut r = rng(3);
        let img = random_image(8, 8, &mut r);
        for radius in [0, 1, 2] {
            assert_eq!(
                dark_channel(&img, radius),
                dark_channel_oracle(&img, radius)
            );
        }
    }

    #[test]
    fn dark_channel_bounds_and_monotonicity() {
        let mut r = rng(4);
        let img = random_image(10, 9, &mut r);
        let d0 = dark_channel(&img, 0);
        let d1 = dark_channel(&img, 1);
        let d2 = dark_channel(&img, 2);
        for y in 0..10 {
            for x in 0..9 {
                let cmin = img.data()[(y, x, 0)]
                    .min(img.data()[(y, x, 1)])
                    .min(img.data()[(y, x, 2)]);
                assert!(d0[(y, x)] <= cmin + 1e-15);
                assert!(d1[(y, x)] <= d0[(y, x)]);
                assert!(d2[(y, x)] <= d1[(y, x)]);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_covers() {
        let mut r = rng(5);
        let hazy = vec![random_image(8, 8, &mut r), random_image(8, 8, &mut r)];
        let clean = vec![random_image(8, 8, &mut r), random_image(8, 8, &mut r)];
        let ds = UnpairedDataset::new(hazy.clone(), clean.clone()).unwrap();

        let (h1, c1) = ds.sample(4, &mut rng(42)).unwrap();
        let (h2, c2) = ds.sample(4, &mut rng(42)).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(c1, c2);

        // full-size crop on singleton sides returns the image itself
        let single = UnpairedDataset::new(vec![hazy[0].clone()], vec![clean[1].clone()]).unwrap();
        let (h, c) = single.sample(8, &mut rng(0)).unwrap();
        assert_eq!(h, hazy[0]);
        assert_eq!(c, clean[1]);

        // 1000 draws see all 4 (hazy, clean) index combinations
        let mut seen = [[false; 2]; 2];
        let mut r2 = rng(6);
        for _ in 0..1000 {
            let (h, c) = ds.sample(8, &mut r2).unwrap();
            let hi = if h == hazy[0] { 0 } else { 1 };
            let ci = if c == clean[0] { 0 } else { 1 };
            seen[hi][ci] = true;
        }
        assert!(seen.iter().flatten().all(|&s| s));

        assert!(ds.sample(9, &mut rng(0)).is_err());
    }

    #[test]
    fn io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut r = rng(7);
        let img = random_image(9, 11, &mut r);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let max = img
            .data()
            .iter()
            .zip(back.data().iter())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(max <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn io_grid_values_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        // gradient image holding exact 8-bit grid values k/255
        let data =
            Array3::from_shape_fn((4, 64, 3), |(_, x, c)| ((x * 4 + c) % 256) as f64 / 255.0);
        let img = Image::new(data).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn io_rejects_non_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not.png");
        std::fs::write(&path, b"this is not an image").unwrap();
        assert!(load_image(&path).is_err());
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn internal_mapping_roundtrip() {
        let mut r = rng(8);
        let img = random_image(6, 5, &mut r);
        let chw = img.to_internal();
        assert!(chw.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let back = Image::from_internal(&chw).unwrap();
        for (&a, &b) in img.data().iter().zip(back.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn synthetic_scene_valid() {
        let mut r = rng(9);
        let (scene, params) = synthetic_scene(32, &mut r);
        assert!(params.beta >= 0.6 && params.beta <= 1.8);
        assert!(params.airlight.iter().all(|&a| (0.7..=1.0).contains(&a)));
        let hazy = synthesize_haze(&scene).unwrap();
        assert_eq!(hazy.height(), 32);
        // haze must actually change the scene
        assert!(hazy.mean_abs_diff(&scene.clean).unwrap() > 0.01);
    }
}

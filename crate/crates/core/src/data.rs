//! Image datasets: folder ingestion, pair sampling and a procedural family of
//! ellipse images for small-scale experiments.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::imaging::{image_to_tensor, load_rgb};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Fraction of items (last by sorted name) held out for validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
}

/// Square RGB images of one resolution, sorted by name.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<RgbImage>,
    pub resolution: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Train and validation parts; the validation part is the last
    /// `ceil(fraction * len)` items, at least one when `fraction > 0`.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::field("val_fraction", "must lie in [0, 1)"));
        }
        let n_val = ((self.len() as f64) * fraction).ceil() as usize;
        let cut = self.len() - n_val.min(self.len());
        let part = |range: std::ops::Range<usize>, split| Dataset {
            names: self.names[range.clone()].to_vec(),
            images: self.images[range].to_vec(),
            resolution: self.resolution,
            split,
        };
        Ok((part(0..cut, Split::Train), part(cut..self.len(), Split::Val)))
    }

    /// `[indices.len(), 3, R, R]` tensor in `[-1, 1]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = indices.iter().map(|&i| image_to_tensor(&self.images[i])).collect();
        Tensor::concat(&items.iter().collect::<Vec<_>>(), 0)
    }

    /// Two distinct uniform indices.
    pub fn sample_pair(&self, rng: &mut impl Rng) -> Result<(usize, usize)> {
        if self.len() < 2 {
            return Err(Error::Dataset(format!(
                "pair sampling needs at least 2 images, have {}",
                self.len()
            )));
        }
        let a = rng.random_range(0..self.len());
        let mut b = rng.random_range(0..self.len() - 1);
        if b >= a {
            b += 1;
        }
        Ok((a, b))
    }

    /// `batch` independent pairs stacked into source and target batches.
    pub fn sample_batch<T: Scalar>(&self, batch: usize, rng: &mut impl Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut xs = Vec::with_capacity(batch);
        let mut ys = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (a, b) = self.sample_pair(rng)?;
            xs.push(a);
            ys.push(b);
        }
        Ok((self.batch(&xs)?, self.batch(&ys)?))
    }
}

/// Largest centered square, resized to `size x size`.
pub fn center_crop_resize(img: &RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == size {
        cropped
    } else {
        imageops::resize(&cropped, size as u32, size as u32, FilterType::Lanczos3)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Every PNG/JPEG under `root` (recursively), center-cropped and resized.
/// Unreadable files are skipped with a warning.
pub fn load_dataset(root: &Path, hr_size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(root)
        .follow_links(true)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image(e.path()))
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    let mut names = Vec::new();
    let mut images = Vec::new();
    for path in paths {
        match load_rgb(&path) {
            Ok(img) => {
                let name = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
                names.push(name);
                images.push(center_crop_resize(&img, hr_size));
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", root.display())));
    }
    Ok(Dataset {
        names,
        images,
        resolution: hr_size,
        split: Split::All,
    })
}

/// Parameters of one procedural image. Lengths are fractions of the side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseScene {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub angle: f64,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    pub background: [[f64; 3]; 2],
    pub gradient_angle: f64,
    pub stripe_frequency: f64,
    pub stripe_phase: f64,
}

impl EllipseScene {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut color = || [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
        let background = [color(), color()];
        EllipseScene {
            center: (rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)),
            radii: (rng.random_range(0.34..0.46), rng.random_range(0.12..0.18)),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            hue: rng.random_range(0.0..1.0),
            saturation: rng.random_range(0.5..1.0),
            value: rng.random_range(0.75..1.0),
            background,
            gradient_angle: rng.random_range(0.0..std::f64::consts::TAU),
            stripe_frequency: rng.random_range(3.0..9.0),
            stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Anti-aliased rendering at `size x size`.
    pub fn render(&self, size: usize) -> RgbImage {
        let fill = hsv_to_rgb(self.hue, self.saturation, self.value);
        let (sin, cos) = self.angle.sin_cos();
        let (gs, gc) = self.gradient_angle.sin_cos();
        let px = 1.0 / size as f64;
        RgbImage::from_fn(size as u32, size as u32, |i, j| {
            let (x, y) = ((i as f64 + 0.5) * px, (j as f64 + 0.5) * px);
            let t = (((x - 0.5) * gc + (y - 0.5) * gs) * std::f64::consts::SQRT_2 + 1.0) / 2.0;
            let bg: [f64; 3] = std::array::from_fn(|c| {
                self.background[0][c] * (1.0 - t) + self.background[1][c] * t
            });
            let (dx, dy) = (x - self.center.0, y - self.center.1);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let rho = ((u / self.radii.0).powi(2) + (v / self.radii.1).powi(2)).sqrt();
            // distance to the boundary in pixels, approximated along the minor axis
            let edge = (1.0 - rho) * self.radii.1.min(self.radii.0) / px;
            let coverage = (edge + 0.5).clamp(0.0, 1.0);
            let stripe = 0.85 + 0.15 * (u / self.radii.0 * self.stripe_frequency * std::f64::consts::PI + self.stripe_phase).sin();
            let out: [u8; 3] = std::array::from_fn(|c| {
                let v = bg[c] * (1.0 - coverage) + fill[c] * stripe * coverage;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            Rgb(out)
        })
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// `n` random ellipse scenes rendered at `hr_size`, named `synthetic_00000...`.
pub fn make_synthetic_dataset(n: usize, hr_size: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::field("synthetic_count", "need at least 2 images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n).map(|_| EllipseScene::random(&mut rng).render(hr_size)).collect();
    Ok(Dataset {
        names: (0..n).map(|i| format!("synthetic_{i:05}")).collect(),
        images,
        resolution: hr_size,
        split: Split::All,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{downscale_tensor, encode_png, decode_rgb, image_to_tensor};

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.5, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = make_synthetic_dataset(4, 16, 7).unwrap();
        let b = make_synthetic_dataset(4, 16, 7).unwrap();
        let c = make_synthetic_dataset(4, 16, 8).unwrap();
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, c.images);
        assert!(make_synthetic_dataset(1, 16, 0).is_err());
    }

    #[test]
    fn split_takes_last_items() {
        let d = make_synthetic_dataset(20, 8, 0).unwrap();
        let (train, val) = d.split(0.1).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(val.names, vec!["synthetic_00018", "synthetic_00019"]);
        assert_eq!(val.split, Split::Val);
    }

    #[test]
    fn pairs_are_distinct() {
        let d = make_synthetic_dataset(3, 8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (a, b) = d.sample_pair(&mut rng).unwrap();
            assert_ne!(a, b);
        }
        let single = Dataset { names: vec!["a".into()], images: vec![d.images[0].clone()], resolution: 8, split: Split::All };
        assert!(single.sample_pair(&mut rng).is_err());
    }

    #[test]
    fn batch_shape() {
        let d = make_synthetic_dataset(5, 16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = d.sample_batch::<f32>(3, &mut rng).unwrap();
        assert_eq!(x.shape(), &[3, 3, 16, 16]);
        assert_eq!(y.shape(), &[3, 3, 16, 16]);
    }

    #[test]
    fn orientation_shows_at_four_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lr = |scene: &EllipseScene| downscale_tensor(&image_to_tensor::<f64>(&scene.render(64)), 16).unwrap();
        for _ in 0..100 {
            let mut scene = EllipseScene::random(&mut rng);
            let a = lr(&scene);
            scene.angle += std::f64::consts::FRAC_PI_2;
            let b = lr(&scene);
            let l1 = a.zip_map(&b, |p, q| (p - q).abs()).unwrap().mean();
            assert!(l1 > 0.05, "{scene:?}: {l1}");
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let d = make_synthetic_dataset(2, 16, 3).unwrap();
        let back = decode_rgb(&encode_png(&d.images[0]).unwrap()).unwrap();
        assert_eq!(back, d.images[0]);
    }

    #[test]
    fn folder_loading_crops_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let wide = RgbImage::from_fn(40, 20, |x, _| Rgb([if x < 10 || x >= 30 { 255 } else { 0 }, 0, 0]));
        wide.save(dir.path().join("b.png")).unwrap();
        std::fs::create_dir(dir.path().join("cats")).unwrap();
        RgbImage::new(8, 8).save(dir.path().join("cats/a.png")).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let d = load_dataset(dir.path(), 8).unwrap();
        assert_eq!(d.names, vec!["b.png", "cats/a.png"]);
        assert!(d.images.iter().all(|i| i.dimensions() == (8, 8)));
        // the red margins are cropped away
        assert!(d.images[0].pixels().all(|p| p[0] < 40));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(empty.path(), 8), Err(Error::Dataset(_))));
    }
}

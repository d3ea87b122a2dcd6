//! Differentiable image kernels relating HR images to their LR targets.
//!
//! Images are `[batch, channels, height, width]` with values in `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Color resolution for images in `[-1, 1]`: one 8-bit step.
pub const DEFAULT_COLOR_STEP: f64 = 2.0 / 255.0;

/// Average-pools `img` by `factor` along both spatial axes.
pub fn downscale<T: Scalar>(img: &Var<T>, factor: usize) -> Result<Var<T>> {
    check_factor(img.value(), factor)?;
    Ok(img.avg_pool(factor))
}

/// Tensor-level [`downscale`] for inference paths.
pub fn downscale_tensor<T: Scalar>(img: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(img, factor)?;
    crate::tensor::avg_pool(img, factor)
}

/// Downscale factor between an HR image and an LR size (square images).
pub fn factor_between(hr: usize, lr: usize) -> Result<usize> {
    if lr == 0 || lr > hr || !hr.is_multiple_of(lr) {
        return Err(Error::Config(format!(
            "LR size {lr} must divide HR size {hr}"
        )));
    }
    Ok(hr / lr)
}

fn check_factor<T: Scalar>(img: &Tensor<T>, factor: usize) -> Result<()> {
    let [_, _, h, w] = img.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "downscale factor {factor} does not divide image size {h}x{w}"
        )));
    }
    Ok(())
}

/// Snaps values to the nearest multiple of `step`; the backward pass is the identity.
pub fn quantize_to_color_grid<T: Scalar>(img: &Var<T>, step: T) -> Var<T> {
    img.round_to_step_ste(step)
}

/// Per-pixel distance, in color steps, between an LR target and the quantized
/// downscale of a generated image.
#[derive(Clone, Debug)]
pub struct DiffMap<T: Scalar>(Var<T>);

impl<T: Scalar> DiffMap<T> {
    /// The all-zeros map fed to the discriminator alongside real images.
    pub fn zeros(shape: &[usize]) -> Self {
        DiffMap(Var::constant(Tensor::zeros(shape)))
    }

    pub fn var(&self) -> &Var<T> {
        &self.0
    }

    pub fn into_var(self) -> Var<T> {
        self.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.value().data().iter().all(|v| *v == T::zero())
    }
}

/// `|target - quantize(downscale(generated))| / step`, differentiable in
/// `generated` through the straight-through estimator.
pub fn lr_difference<T: Scalar>(generated: &Var<T>, target: &Var<T>, step: T) -> Result<DiffMap<T>> {
    let [gb, gc, gh, gw] = generated.value().dims4()?;
    let [tb, tc, th, tw] = target.value().dims4()?;
    if gb != tb || gc != tc || th == 0 || gh % th != 0 || gw % tw != 0 || gh / th != gw / tw {
        return Err(Error::Shape(format!(
            "generated {:?} does not downscale onto target {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    let lr = downscale(generated, gh / th)?;
    let quantized = quantize_to_color_grid(&lr, step);
    Ok(DiffMap(
        target.sub(&quantized).abs().scale(T::one() / step),
    ))
}

/// `mean |DS(generated) - target|` in pixel units, with the downscale factor
/// inferred from the shapes.
pub fn downscale_consistency<T: Scalar>(generated: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let [gb, gc, gh, gw] = generated.dims4()?;
    let [tb, tc, th, tw] = target.dims4()?;
    if gb != tb || gc != tc || th == 0 || gh % th != 0 || gh / th != gw / tw.max(1) {
        return Err(Error::Shape(format!(
            "generated {:?} does not downscale onto target {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    let lr = downscale_tensor(generated, gh / th)?;
    let total: f64 = lr
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (*a - *b).abs().as_f64())
        .sum();
    Ok(total / lr.numel() as f64)
}

/// Norm used to measure LR distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormOrder {
    L1,
    L2,
    Max,
}

impl NormOrder {
    pub fn from_p(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(NormOrder::L1)
        } else if p == 2.0 {
            Ok(NormOrder::L2)
        } else if p.is_infinite() && p > 0.0 {
            Ok(NormOrder::Max)
        } else {
            Err(Error::field("p", format!("unsupported norm order {p}")))
        }
    }
}

/// `|a - b|_p` over all elements.
pub fn subspace_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, p: NormOrder) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "LR images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diffs = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs());
    Ok(match p {
        NormOrder::L1 => diffs.sum(),
        NormOrder::L2 => diffs.map(|d| d * d).sum::<T>().sqrt(),
        NormOrder::Max => diffs.fold(T::zero(), T::max),
    })
}

/// Membership of an LR image in the neighbourhood of an LR target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Subspace {
    pub epsilon: f64,
    pub norm: NormOrder,
}

impl Subspace {
    pub fn contains<T: Scalar>(&self, candidate: &Tensor<T>, target: &Tensor<T>) -> Result<bool> {
        Ok(subspace_distance(candidate, target, self.norm)?.as_f64() <= self.epsilon)
    }
}

/// Bilinear resampling weights (half-pixel centers) as an `out x input` matrix.
fn bilinear_matrix<T: Scalar>(input: usize, out: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] = m[o * input + lo] + T::lit(1.0 - frac);
        m[o * input + hi] = m[o * input + hi] + T::lit(frac);
    }
    Tensor::raw(vec![out, input], m)
}

/// Bilinear upsampling of an LR image to `height x width`.
pub fn upsample_bilinear<T: Scalar>(lr: &Var<T>, height: usize, width: usize) -> Result<Var<T>> {
    let [_, _, h, w] = lr.value().dims4()?;
    if height < h || width < w || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot upsample {h}x{w} to {height}x{width}"
        )));
    }
    if (height, width) == (h, w) {
        return Ok(lr.clone());
    }
    let rows = Var::constant(bilinear_matrix::<T>(h, height));
    let cols = Var::constant(bilinear_matrix::<T>(w, width));
    let wide = lr.matmul_t(&cols, false, true);
    Ok(rows.matmul(&wide))
}

// ---------------------------------------------------------------------------
// 8-bit image conversion

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// `[1, 3, H, W]` tensor from an RGB image.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = T::lit(pixel_to_unit(px[c]));
        }
    }
    Tensor::raw(vec![1, 3, h, w], data)
}

/// Converts item `index` of a `[B, 3, H, W]` batch, clamping to `[-1, 1]`.
pub fn tensor_to_image<T: Scalar>(batch: &Tensor<T>, index: usize) -> Result<RgbImage> {
    let [b, c, h, w] = batch.dims4()?;
    if c != 3 || index >= b {
        return Err(Error::Shape(format!(
            "cannot take RGB image {index} from {:?}",
            batch.shape()
        )));
    }
    let d = batch.data();
    let base = index * 3 * h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| unit_to_pixel(d[base + ch * h * w + y as usize * w + x as usize].as_f64());
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Tiles `[B, 3, H, W]` batches into a `rows x cols` grid, row-major.
pub fn mosaic<T: Scalar>(tiles: &[Tensor<T>], cols: usize) -> Result<RgbImage> {
    let mut images = Vec::new();
    for t in tiles {
        let [b, ..] = t.dims4()?;
        for i in 0..b {
            images.push(tensor_to_image(t, i)?);
        }
    }
    if images.is_empty() {
        return Err(Error::Shape("mosaic of zero tiles".into()));
    }
    let tw = images.iter().map(|i| i.width()).max().unwrap_or(0);
    let th = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let mut out = RgbImage::new(tw * cols as u32, th * rows as u32);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % cols) as u32 * tw, (k / cols) as u32 * th);
        if img.width() != tw || img.height() != th {
            // smaller tiles (LR targets) are blown up with nearest neighbour
            let resized = image::imageops::resize(img, tw, th, image::imageops::FilterType::Nearest);
            image::imageops::replace(&mut out, &resized, ox as i64, oy as i64);
        } else {
            image::imageops::replace(&mut out, img, ox as i64, oy as i64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_values;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn downscale_constant_blocks() {
        let img = t(
            &[1, 1, 4, 4],
            &[1., 1., 3., 3., 1., 1., 3., 3., 5., 5., 7., 7., 5., 5., 7., 7.],
        );
        let lr = downscale_tensor(&img, 2).unwrap();
        assert_eq!(lr.data(), &[1., 3., 5., 7.]);
    }

    #[test]
    fn downscale_rejects_non_divisible_factor() {
        let img = Tensor::<f64>::zeros(&[1, 3, 6, 6]);
        assert!(matches!(downscale_tensor(&img, 4), Err(Error::Config(_))));
        assert!(factor_between(64, 7).is_err());
        assert_eq!(factor_between(64, 4).unwrap(), 16);
    }

    #[test]
    fn quantize_zero_is_fixed_point() {
        let v = Var::constant(Tensor::<f64>::zeros(&[3]));
        let q = quantize_to_color_grid(&v, 0.3);
        assert!(q.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quantize_gradient_is_all_ones() {
        let v = Var::param(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.0137 - 0.03));
        let g = grad_values(&quantize_to_color_grid(&v, DEFAULT_COLOR_STEP).sum(), &[&v]);
        assert!(g[0].data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn diff_is_one_step_for_one_step_offset() {
        let step = DEFAULT_COLOR_STEP;
        let generated = Var::constant(Tensor::full(&[1, 1, 2, 2], step));
        let target = Var::constant(Tensor::zeros(&[1, 1, 1, 1]));
        let d = lr_difference(&generated, &target, step).unwrap();
        assert!((d.var().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diff_rejects_mismatched_geometry() {
        let generated = Var::constant(Tensor::<f64>::zeros(&[1, 3, 8, 8]));
        let target = Var::constant(Tensor::<f64>::zeros(&[1, 3, 3, 3]));
        assert!(lr_difference(&generated, &target, 0.1).is_err());
        let target = Var::constant(Tensor::<f64>::zeros(&[2, 3, 4, 4]));
        assert!(lr_difference(&generated, &target, 0.1).is_err());
    }

    #[test]
    fn distance_and_membership() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let mut bv = vec![0.0; 4];
        bv[2] = 0.5;
        let b = t(&[1, 1, 2, 2], &bv);
        assert_eq!(subspace_distance(&a, &a, NormOrder::L1).unwrap(), 0.0);
        assert_eq!(subspace_distance(&a, &b, NormOrder::L1).unwrap(), 0.5);
        let exact = Subspace { epsilon: 0.0, norm: NormOrder::L1 };
        assert!(exact.contains(&a, &a).unwrap());
        assert!(!exact.contains(&a, &b).unwrap());
        assert!(Subspace { epsilon: 0.5, norm: NormOrder::L1 }.contains(&a, &b).unwrap());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let lr = Var::constant(t(&[1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let same = upsample_bilinear(&lr, 2, 2).unwrap();
        assert_eq!(same.value(), lr.value());
        let c = Var::constant(Tensor::full(&[1, 3, 2, 2], 0.37));
        let up = upsample_bilinear(&c, 8, 8).unwrap();
        assert!(up.value().data().iter().all(|v: &f64| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn bilinear_ramp_is_monotone() {
        let lr = Var::constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let up = upsample_bilinear(&lr, 4, 4).unwrap();
        // half-pixel centers: source x = (i + 0.5) / 2 - 0.5 clamped to [0, 1]
        let expected_row = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert!((up.value().at(&[0, 0, y, x]) - expected_row[x]).abs() < 1e-12);
            }
            for x in 1..4 {
                assert!(up.value().at(&[0, 0, y, x]) >= up.value().at(&[0, 0, y, x - 1]));
            }
        }
    }

    #[test]
    fn pixel_mapping_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(p)), p);
        }
        assert_eq!(unit_to_pixel(3.0), 255);
        assert_eq!(unit_to_pixel(-3.0), 0);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 90, 7]));
        let t = image_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[1, 3, 3, 5]);
        assert_eq!(tensor_to_image(&t, 0).unwrap(), img);
        let png = encode_png(&img).unwrap();
        assert_eq!(decode_rgb(&png).unwrap(), img);
    }
}

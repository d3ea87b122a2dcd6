//! Evaluation: FID, LPIPS-style distances, downscale consistency, the
//! ten-samples-per-target protocol and LR perturbations.

use std::path::Path;

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{downscale_consistency, downscale_tensor, mosaic, quantize_to_color_grid, NormOrder, Subspace};
use crate::networks::Generator;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, Window};
use crate::training::{load_splits, run_steps, TrainState};
use crate::Var;

// ---------------------------------------------------------------------------
// Fréchet distance

fn mean_and_covariance(features: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.nrows();
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn clamped_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

const SINGULAR_RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussians fitted to two feature sets (rows are
/// samples): `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term is evaluated as `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`, a
/// symmetric product whose eigenvalues are clamped at zero.
pub fn fid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Shape("FID needs at least two samples per set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let dim = a.ncols();
    let (mu_a, mut cov_a) = mean_and_covariance(a);
    let (mu_b, mut cov_b) = mean_and_covariance(b);
    if a.nrows() <= dim || b.nrows() <= dim {
        log::warn!(
            "FID with {} / {} samples in {dim} dimensions: covariance is singular, adding a {SINGULAR_RIDGE} ridge",
            a.nrows(),
            b.nrows()
        );
        let ridge = DMatrix::identity(dim, dim) * SINGULAR_RIDGE;
        cov_a += &ridge;
        cov_b += &ridge;
    }
    let sqrt_a = clamped_sqrt(&cov_a);
    let cross = clamped_sqrt(&(&sqrt_a * &cov_b * &sqrt_a)).trace();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------------------
// Feature extractors

/// Maps image batches to feature maps. Images arrive as `[B, 3, H, W]` in `[-1, 1]`.
pub trait FeatureExtractor {
    fn name(&self) -> &str;

    /// True for the built-in pixel-pyramid stand-in.
    fn is_fallback(&self) -> bool;

    /// One `[B, C, h, w]` map per layer.
    fn feature_maps(&self, images: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;

    /// Whether LPIPS normalizes feature vectors to unit length across channels.
    fn unit_normalize(&self) -> bool {
        !self.is_fallback()
    }

    /// Pooled `[B, dim]` embedding for FID: per-layer channel means and
    /// standard deviations over positions.
    fn embed(&self, images: &Tensor<f64>) -> Result<DMatrix<f64>> {
        let maps = self.feature_maps(images)?;
        let b = images.shape()[0];
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); b];
        for m in &maps {
            let [_, c, h, w] = m.dims4()?;
            let hw = h * w;
            for (i, row) in rows.iter_mut().enumerate() {
                for ch in 0..c {
                    let s = &m.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    let mean = s.iter().sum::<f64>() / hw as f64;
                    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
                    row.push(mean);
                    row.push(var.sqrt());
                }
            }
        }
        let dim = rows[0].len();
        Ok(DMatrix::from_row_iterator(b, dim, rows.into_iter().flatten()))
    }
}

/// Built-in stand-in for a learned network: the image and its horizontal and
/// vertical differences at successive 2x average-pooled scales.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: usize,
}

impl Default for PyramidFeatures {
    fn default() -> Self {
        PyramidFeatures { levels: 4 }
    }
}

fn finite_differences(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [b, c, h, w] = x.dims4()?;
    let d = x.data();
    let mut out = vec![0.0; b * c * 2 * h * w];
    for bc in 0..b * c {
        let (bi, ci) = (bc / c, bc % c);
        for yy in 0..h {
            for xx in 0..w {
                let at = |y: usize, x: usize| d[(bc * h + y) * w + x];
                let dx = if xx + 1 < w { at(yy, xx + 1) - at(yy, xx) } else { 0.0 };
                let dy = if yy + 1 < h { at(yy + 1, xx) - at(yy, xx) } else { 0.0 };
                out[((bi * 2 * c + ci) * h + yy) * w + xx] = dx;
                out[((bi * 2 * c + c + ci) * h + yy) * w + xx] = dy;
            }
        }
    }
    Tensor::from_vec(&[b, 2 * c, h, w], out)
}

impl FeatureExtractor for PyramidFeatures {
    fn name(&self) -> &str {
        "pixel-pyramid"
    }

    fn is_fallback(&self) -> bool {
        true
    }

    fn feature_maps(&self, images: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut level = images.clone();
        let mut maps = Vec::with_capacity(self.levels);
        for k in 0..self.levels {
            if k > 0 {
                let [_, _, h, w] = level.dims4()?;
                if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                    break;
                }
                level = tensor::avg_pool(&level, 2)?;
            }
            maps.push(level.clone());
        }
        Ok(maps)
    }

    fn embed(&self, images: &Tensor<f64>) -> Result<DMatrix<f64>> {
        let b = images.shape()[0];
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); b];
        for m in self.feature_maps(images)? {
            let grads = finite_differences(&m)?;
            for t in [&m, &grads] {
                let [_, c, h, w] = t.dims4()?;
                let hw = h * w;
                for (i, row) in rows.iter_mut().enumerate() {
                    for ch in 0..c {
                        let s = &t.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        let mean = s.iter().sum::<f64>() / hw as f64;
                        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
                        row.push(mean);
                        row.push(var.sqrt());
                    }
                }
            }
        }
        let [_, _, h, _] = images.dims4()?;
        if h >= 4 && h % 4 == 0 {
            let thumb = downscale_tensor(images, h / 4)?;
            let per = thumb.numel() / b;
            for (i, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(&thumb.data()[i * per..(i + 1) * per]);
            }
        }
        let dim = rows[0].len();
        Ok(DMatrix::from_row_iterator(b, dim, rows.into_iter().flatten()))
    }
}

/// One convolution of a plugin network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PluginLayer {
    /// `[out, in, k, k]`
    pub shape: [usize; 4],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

/// A ReLU conv stack loaded from JSON; every layer output is a feature map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvNetExtractor {
    pub name: String,
    /// Per-channel normalization applied to `[0, 1]` images.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub layers: Vec<PluginLayer>,
}

impl ConvNetExtractor {
    pub fn load(path: &Path) -> Result<Self> {
        let net: ConvNetExtractor = serde_json::from_slice(&std::fs::read(path)?)?;
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<()> {
        let mut channels = 3;
        for (i, l) in self.layers.iter().enumerate() {
            let [o, c, k, k2] = l.shape;
            if c != channels || k != k2 || l.weight.len() != o * c * k * k || l.bias.len() != o || l.stride == 0 {
                return Err(Error::Config(format!("extractor layer {i} is inconsistent")));
            }
            channels = o;
        }
        if self.layers.is_empty() {
            return Err(Error::Config("extractor has no layers".into()));
        }
        Ok(())
    }
}

impl FeatureExtractor for ConvNetExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_fallback(&self) -> bool {
        false
    }

    fn feature_maps(&self, images: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let [b, _, h, w] = images.dims4()?;
        let hw = h * w;
        let mut x = Tensor::from_fn(images.shape(), |i| {
            let c = (i / hw) % 3;
            ((images.data()[i] + 1.0) / 2.0 - self.mean[c]) / self.std[c]
        });
        let mut maps = Vec::new();
        for l in &self.layers {
            let [o, c, k, _] = l.shape;
            let win = Window {
                kernel: k,
                stride: l.stride,
                padding: k / 2,
            };
            let [_, _, hi, wi] = x.dims4()?;
            let (ho, wo) = (win.output_size(hi), win.output_size(wi));
            let cols = tensor::im2col(&x, win);
            let wmat = Tensor::from_vec(&[o, c * k * k], l.weight.clone())?;
            let y = tensor::matmul(&wmat, &cols, false, false)?;
            let bias = Tensor::from_vec(&[1, o, 1], l.bias.clone())?;
            let y = y.zip_map(&bias, |v, b| (v + b).max(0.0))?;
            x = y.reshape(&[b, o, ho, wo])?;
            maps.push(x.clone());
        }
        Ok(maps)
    }
}

/// The plugin at `path` when given, otherwise the built-in pyramid.
pub fn extractor_from(path: Option<&Path>) -> Result<Box<dyn FeatureExtractor>> {
    match path {
        Some(p) => Ok(Box::new(ConvNetExtractor::load(p)?)),
        None => Ok(Box::new(PyramidFeatures::default())),
    }
}

// ---------------------------------------------------------------------------
// LPIPS-style distance

fn unit_normalized(m: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [b, c, h, w] = m.dims4()?;
    let hw = h * w;
    let d = m.data();
    let mut out = d.to_vec();
    for bi in 0..b {
        for p in 0..hw {
            let norm = (0..c).map(|ch| d[(bi * c + ch) * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for ch in 0..c {
                out[(bi * c + ch) * hw + p] /= norm;
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

/// Per-sample distance: mean over layers of the spatially averaged squared
/// feature difference summed over channels.
pub fn lpips_per_sample(a: &Tensor<f64>, b: &Tensor<f64>, extractor: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let fa = extractor.feature_maps(a)?;
    let fb = extractor.feature_maps(b)?;
    let n = a.shape()[0];
    let mut out = vec![0.0; n];
    for (ma, mb) in fa.iter().zip(&fb) {
        let (ma, mb) = if extractor.unit_normalize() {
            (unit_normalized(ma)?, unit_normalized(mb)?)
        } else {
            (ma.clone(), mb.clone())
        };
        let [_, c, h, w] = ma.dims4()?;
        let per = c * h * w;
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = ma.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&mb.data()[i * per..(i + 1) * per])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            *o += s / (h * w) as f64 / fa.len() as f64;
        }
    }
    Ok(out)
}

/// Mean of [`lpips_per_sample`].
pub fn lpips(a: &Tensor<f64>, b: &Tensor<f64>, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let d = lpips_per_sample(a, b, extractor)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

// ---------------------------------------------------------------------------
// Models and consistency

/// Anything that maps an HR source batch and an LR target batch to HR outputs.
pub trait Model<T: Scalar> {
    fn generate(&self, source: &Tensor<T>, lr_target: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Model<T> for Generator<T> {
    fn generate(&self, source: &Tensor<T>, lr_target: &Tensor<T>) -> Result<Tensor<T>> {
        self.translate(source, lr_target)
    }
}

impl<T: Scalar, F: Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>> Model<T> for F {
    fn generate(&self, source: &Tensor<T>, lr_target: &Tensor<T>) -> Result<Tensor<T>> {
        self(source, lr_target)
    }
}

/// `count` distinct (source, target) index pairs, seeded.
pub fn eval_pairs(data: &Dataset, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| data.sample_pair(&mut rng)).collect()
}

/// Mean over pairs of `mean |DS(G(X|y)) - y|`, processed `batch` pairs at a time.
pub fn downscale_consistency_on<T: Scalar>(
    model: &dyn Model<T>,
    data: &Dataset,
    pairs: &[(usize, usize)],
    factor: usize,
    batch: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no evaluation pairs".into()));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let sources: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let targets: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let x = data.batch::<T>(&sources)?;
        let y = downscale_tensor(&data.batch::<T>(&targets)?, factor)?;
        let out = model.generate(&x, &y)?;
        // every pair weighs the same regardless of chunking
        total += downscale_consistency(&out, &y)? * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// LR perturbations

/// One pixel assignment in an LR image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelEdit {
    pub row: usize,
    pub col: usize,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Perturbation {
    Grayscale,
    Gaussian { sigma: f64 },
    ManualEdit { edits: Vec<PixelEdit> },
}

impl Perturbation {
    /// Parses `grayscale`, `gaussian:<sigma>` or `manual_edit:<r>,<c>,<R>,<G>,<B>;...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (mode, param) = match spec.split_once(':') {
            Some((m, p)) => (m.trim(), Some(p.trim())),
            None => (spec.trim(), None),
        };
        match (mode, param) {
            ("grayscale", None) => Ok(Perturbation::Grayscale),
            ("gaussian", Some(p)) => {
                let sigma: f64 = p
                    .parse()
                    .map_err(|_| Error::field("perturb", format!("bad sigma `{p}`")))?;
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::field("perturb", "sigma must be non-negative"));
                }
                Ok(Perturbation::Gaussian { sigma })
            }
            ("manual_edit", Some(p)) => {
                let edits = p
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(|e| {
                        let v: Vec<&str> = e.split(',').map(str::trim).collect();
                        let bad = || Error::field("perturb", format!("bad edit `{e}`"));
                        if v.len() != 5 {
                            return Err(bad());
                        }
                        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
                        Ok(PixelEdit {
                            row: v[0].parse().map_err(|_| bad())?,
                            col: v[1].parse().map_err(|_| bad())?,
                            rgb: [f(v[2])?, f(v[3])?, f(v[4])?],
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Perturbation::ManualEdit { edits })
            }
            _ => Err(Error::field(
                "perturb",
                format!("unknown perturbation `{spec}` (grayscale | gaussian:<sigma> | manual_edit:...)"),
            )),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Perturbation::Grayscale => "grayscale".into(),
            Perturbation::Gaussian { sigma } => format!("gaussian:{sigma}"),
            Perturbation::ManualEdit { edits } => format!("manual_edit:{} pixels", edits.len()),
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Applies a perturbation to a `[B, 3, m, n]` LR batch.
pub fn perturb_lr<T: Scalar>(lr: &Tensor<T>, mode: &Perturbation, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let [b, c, h, w] = lr.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("LR image must have 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut out = lr.to_vec();
    match mode {
        Perturbation::Grayscale => {
            for bi in 0..b {
                for p in 0..hw {
                    let px: [T; 3] = std::array::from_fn(|ch| out[(bi * 3 + ch) * hw + p]);
                    let l = if px[0] == px[1] && px[1] == px[2] {
                        px[0]
                    } else {
                        (0..3).map(|ch| T::lit(LUMA[ch]) * px[ch]).sum()
                    };
                    for ch in 0..3 {
                        out[(bi * 3 + ch) * hw + p] = l;
                    }
                }
            }
        }
        Perturbation::Gaussian { sigma } => {
            if *sigma > 0.0 {
                let normal = Normal::new(0.0, *sigma).map_err(|e| Error::field("perturb", e.to_string()))?;
                for v in &mut out {
                    *v = (*v + T::lit(normal.sample(rng))).max(-T::one()).min(T::one());
                }
            }
        }
        Perturbation::ManualEdit { edits } => {
            for e in edits {
                if e.row >= h || e.col >= w {
                    return Err(Error::field(
                        "perturb",
                        format!("pixel ({}, {}) outside the {h}x{w} grid", e.row, e.col),
                    ));
                }
                for ch in 0..3 {
                    let v = e.rgb[ch];
                    let clamped = v.clamp(-1.0, 1.0);
                    if clamped != v {
                        log::warn!("edit value {v} at ({}, {}) clamped to {clamped}", e.row, e.col);
                    }
                    for bi in 0..b {
                        out[(bi * 3 + ch) * hw + e.row * w + e.col] = T::lit(clamped);
                    }
                }
            }
        }
    }
    Tensor::from_vec(lr.shape(), out)
}

// ---------------------------------------------------------------------------
// Protocol and reports

/// One published large-scale measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedResult {
    pub dataset: String,
    pub hr_size: Option<usize>,
    pub lr_size: Option<usize>,
    pub fid: f64,
    pub lpips: f64,
}

/// Published numbers, carried for reference only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNumbers {
    pub results: Vec<PublishedResult>,
    pub note: String,
}

fn published(dataset: &str, hr_size: Option<usize>, lr_size: Option<usize>, fid: f64, lpips: f64) -> PublishedResult {
    PublishedResult {
        dataset: dataset.into(),
        hr_size,
        lr_size,
        fid,
        lpips,
    }
}

impl Default for ReferenceNumbers {
    fn default() -> Self {
        ReferenceNumbers {
            results: vec![
                published("CelebA-HQ", Some(128), None, 15.52, 0.34),
                published("CelebA-HQ", Some(256), None, 25.89, 0.329),
                published("AFHQ cats", None, None, 22.8, 0.40),
                published("AFHQ dogs", None, None, 67.3, 0.47),
                published("AFHQ wild", None, None, 20.61, 0.23),
                published("CelebA-HQ", None, Some(4), 15.13, 0.30),
                published("CelebA-HQ", None, Some(8), 15.34, 0.34),
                published("CelebA-HQ", None, Some(16), 19.45, 0.14),
                published("CelebA-HQ", None, Some(32), 13.55, 0.08),
            ],
            note: "multi-day training on CelebA-HQ / AFHQ with Inception features; \
                   not reproducible at desk scale and not comparable to the values measured here"
                .into(),
        }
    }
}

impl ReferenceNumbers {
    /// The 128x128 CelebA-HQ entry.
    pub fn headline(&self) -> Option<&PublishedResult> {
        self.results
            .iter()
            .find(|r| r.dataset == "CelebA-HQ" && r.hr_size == Some(128))
    }

    /// The entry of the LR-resolution study for `lr_size`.
    pub fn for_lr_size(&self, lr_size: usize) -> Option<&PublishedResult> {
        self.results.iter().find(|r| r.lr_size == Some(lr_size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub target: String,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    /// Mean pairwise distance among the outputs sharing one LR target.
    pub lpips_mean: f64,
    pub consistency_mean: f64,
    /// Fraction of outputs whose quantized downscale lies within `epsilon` of the target.
    pub subspace_rate: f64,
    pub epsilon: f64,
    pub samples_per_lr: usize,
    pub lr_targets: usize,
    pub generated: usize,
    pub extractor: String,
    pub fallback_metrics: bool,
    pub perturbation: Option<String>,
    pub config: Option<TrainConfig>,
    pub reference: ReferenceNumbers,
    pub samples: Vec<SampleEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolOptions {
    pub samples_per_lr: usize,
    pub seed: u64,
    pub color_step: f64,
    pub epsilon: f64,
    pub perturbation: Option<Perturbation>,
    /// Cap on the number of LR targets (all validation items when `None`).
    pub max_targets: Option<usize>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            samples_per_lr: 10,
            seed: 0,
            color_step: crate::imaging::DEFAULT_COLOR_STEP,
            epsilon: 0.0,
            perturbation: None,
            max_targets: None,
        }
    }
}

/// Outputs of [`eval_protocol`] besides the report.
pub struct ProtocolOutput<T: Scalar> {
    pub report: EvalReport,
    /// One `[samples_per_lr, 3, H, W]` batch per LR target.
    pub generated: Vec<Tensor<T>>,
    pub lr_targets: Vec<Tensor<T>>,
}

/// For every LR target of `data`, translates `samples_per_lr` distinct other
/// images towards it and scores the results.
pub fn eval_protocol<T: Scalar>(
    model: &dyn Model<T>,
    data: &Dataset,
    factor: usize,
    extractor: &dyn FeatureExtractor,
    opts: &ProtocolOptions,
) -> Result<ProtocolOutput<T>> {
    let k = opts.samples_per_lr;
    if k == 0 {
        return Err(Error::field("samples_per_lr", "must be positive"));
    }
    if data.len() < 2 {
        return Err(Error::Dataset("evaluation needs at least 2 images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_targets = opts.max_targets.map_or(data.len(), |m| m.min(data.len()));
    let subspace = Subspace {
        epsilon: opts.epsilon,
        norm: NormOrder::Max,
    };
    let step = T::lit(opts.color_step);
    let mut generated = Vec::with_capacity(n_targets);
    let mut lr_targets = Vec::with_capacity(n_targets);
    let mut samples = Vec::with_capacity(n_targets);
    let (mut consistency, mut hits, mut diversity, mut diversity_terms) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..n_targets {
        let others: Vec<usize> = (0..data.len()).filter(|&i| i != t).collect();
        let sources: Vec<usize> = if others.len() >= k {
            rand::seq::index::sample(&mut rng, others.len(), k)
                .into_iter()
                .map(|i| others[i])
                .collect()
        } else {
            (0..k).map(|i| others[i % others.len()]).collect()
        };
        let x = data.batch::<T>(&sources)?;
        let mut y = downscale_tensor(&data.batch::<T>(&[t])?, factor)?;
        if let Some(p) = &opts.perturbation {
            y = perturb_lr(&y, p, &mut rng)?;
        }
        let y_rep = Tensor::concat(&vec![&y; k], 0)?;
        let out = model.generate(&x, &y_rep)?;
        consistency += downscale_consistency(&out, &y_rep)? * k as f64;
        let reached = crate::autograd::no_grad(|| -> Result<Tensor<T>> {
            let lr = downscale_tensor(&out, factor)?;
            Ok(quantize_to_color_grid(&Var::constant(lr), step).value().clone())
        })?;
        for i in 0..k {
            if subspace.contains(&reached.batch_item(i), &y)? {
                hits += 1;
            }
        }
        if k >= 2 {
            let out64 = out.cast::<f64>();
            let items: Vec<Tensor<f64>> = (0..k).map(|i| out64.batch_item(i)).collect();
            let (mut left, mut right) = (Vec::new(), Vec::new());
            for i in 0..k {
                for j in i + 1..k {
                    left.push(&items[i]);
                    right.push(&items[j]);
                }
            }
            let d = lpips_per_sample(&Tensor::concat(&left, 0)?, &Tensor::concat(&right, 0)?, extractor)?;
            diversity += d.iter().sum::<f64>();
            diversity_terms += d.len();
        }
        samples.push(SampleEntry {
            target: data.names[t].clone(),
            sources: sources.iter().map(|&i| data.names[i].clone()).collect(),
        });
        generated.push(out);
        lr_targets.push(y);
    }
    let total = n_targets * k;
    let fake_feats = stack_features(&generated, extractor)?;
    let real = data.batch::<T>(&(0..data.len()).collect::<Vec<_>>())?;
    let real_feats = extractor.embed(&real.cast::<f64>())?;
    let report = EvalReport {
        fid: fid(&fake_feats, &real_feats)?,
        lpips_mean: if diversity_terms > 0 { diversity / diversity_terms as f64 } else { 0.0 },
        consistency_mean: consistency / total as f64,
        subspace_rate: hits as f64 / total as f64,
        epsilon: opts.epsilon,
        samples_per_lr: k,
        lr_targets: n_targets,
        generated: total,
        extractor: extractor.name().to_string(),
        fallback_metrics: extractor.is_fallback(),
        perturbation: opts.perturbation.as_ref().map(Perturbation::label),
        config: None,
        reference: ReferenceNumbers::default(),
        samples,
    };
    Ok(ProtocolOutput {
        report,
        generated,
        lr_targets,
    })
}

fn stack_features<T: Scalar>(batches: &[Tensor<T>], extractor: &dyn FeatureExtractor) -> Result<DMatrix<f64>> {
    let mats = batches
        .iter()
        .map(|b| extractor.embed(&b.cast::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    let dim = mats[0].ncols();
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, dim);
    let mut r = 0;
    for m in mats {
        out.rows_mut(r, m.nrows()).copy_from(&m);
        r += m.nrows();
    }
    Ok(out)
}

/// Mosaic of the first `rows` targets: the LR target, then its outputs.
pub fn protocol_mosaic<T: Scalar>(out: &ProtocolOutput<T>, rows: usize) -> Result<RgbImage> {
    let mut tiles = Vec::new();
    let cols = out.report.samples_per_lr + 1;
    for (g, y) in out.generated.iter().zip(&out.lr_targets).take(rows.max(1)) {
        tiles.push(y.clone());
        tiles.push(g.clone());
    }
    mosaic(&tiles, cols)
}

/// Source-by-target grid: the first row shows the sources, the first column
/// the LR targets, and cell `(i, j)` is `G(source_j | target_i)`.
pub fn translation_grid<T: Scalar>(
    model: &dyn Model<T>,
    sources: &Tensor<T>,
    lr_targets: &Tensor<T>,
) -> Result<RgbImage> {
    let [ns, _, h, w] = sources.dims4()?;
    let [nt, ..] = lr_targets.dims4()?;
    let mut tiles = vec![Tensor::full(&[1, 3, h, w], T::one())];
    tiles.push(sources.clone());
    for i in 0..nt {
        let y = lr_targets.batch_item(i);
        tiles.push(y.clone());
        let y_rep = Tensor::concat(&vec![&y; ns], 0)?;
        tiles.push(model.generate(sources, &y_rep)?);
    }
    mosaic(&tiles, ns + 1)
}

// ---------------------------------------------------------------------------
// LR-resolution study

/// One row of the LR-resolution table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lr_size: usize,
    pub steps: u64,
    pub fid: f64,
    pub lpips_mean: f64,
    pub consistency_mean: f64,
    pub published: Option<PublishedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub hr_size: usize,
    pub extractor: String,
    pub rows: Vec<AblationRow>,
    pub note: String,
}

impl AblationReport {
    /// Plain-text table, one row per LR size, published values alongside.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>10} {:>10} {:>12} {:>14} {:>16}\n",
            "LR", "FID", "LPIPS", "consistency", "published FID", "published LPIPS"
        );
        for r in &self.rows {
            let (pf, pl) = r
                .published
                .as_ref()
                .map_or(("-".to_string(), "-".to_string()), |p| (p.fid.to_string(), p.lpips.to_string()));
            s.push_str(&format!(
                "{:>8} {:>10.3} {:>10.4} {:>12.4} {:>14} {:>16}\n",
                format!("{0}x{0}", r.lr_size),
                r.fid,
                r.lpips_mean,
                r.consistency_mean,
                pf,
                pl
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains one model per LR size for `steps` steps from `base` and evaluates
/// each on the validation split.
pub fn run_lr_ablation<T: Scalar>(
    base: &TrainConfig,
    lr_sizes: &[usize],
    steps: u64,
    extractor: &dyn FeatureExtractor,
    opts: &ProtocolOptions,
) -> Result<AblationReport> {
    let reference = ReferenceNumbers::default();
    let mut rows = Vec::with_capacity(lr_sizes.len());
    for &lr_size in lr_sizes {
        let config = TrainConfig {
            lr_size,
            max_steps: steps,
            ..base.clone()
        };
        config.validate()?;
        let (train, val) = load_splits(&config)?;
        let mut state = TrainState::<T>::new(config.clone())?;
        run_steps(&mut state, &train, steps, |_, _| Ok(()))?;
        let eval_data = if val.len() >= 2 { &val } else { &train };
        let out = eval_protocol(&state.generator, eval_data, config.downscale_factor(), extractor, opts)?;
        log::info!(
            "LR {lr_size}x{lr_size}: FID {:.3} LPIPS {:.4} consistency {:.4}",
            out.report.fid,
            out.report.lpips_mean,
            out.report.consistency_mean
        );
        rows.push(AblationRow {
            lr_size,
            steps,
            fid: out.report.fid,
            lpips_mean: out.report.lpips_mean,
            consistency_mean: out.report.consistency_mean,
            published: reference.for_lr_size(lr_size).cloned(),
        });
    }
    Ok(AblationReport {
        hr_size: base.hr_size,
        extractor: extractor.name().to_string(),
        rows,
        note: reference.note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;

    fn gaussian_samples(n: usize, dim: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(n, dim, |_, j| normal.sample(&mut rng) + if j == 0 { shift } else { 0.0 })
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = gaussian_samples(500, 4, 0.0, 0);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn fid_closed_form_for_diagonal_gaussians() {
        // sample moments: mu_a = (0, 0), var_a = (2/3, 8/3); mu_b = (2, 0), var_b = (2/3, 2/3)
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, 1.0, 0.0, 2.0, 1.0, 2.0, -1.0]);
        let want = 4.0 + ((8.0f64 / 3.0).sqrt() - (2.0f64 / 3.0).sqrt()).powi(2);
        let got = fid(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn fid_matches_full_covariance_formula() {
        // S_a = I, S_b = R diag(4, 1/4) R^T: tr sqrt(S_a S_b) = 2 + 1/2
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let rot = DMatrix::from_row_slice(2, 2, &[c, -c, c, c]);
        let sb = &rot * DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.25])) * rot.transpose();
        let sqrt_b = clamped_sqrt(&sb);
        assert!((&sqrt_b * &sqrt_b - &sb).norm() < 1e-12);
        let want = 1.0 + 2.0 + 4.25 - 2.0 * 2.5;
        // exact-moment sample sets: +-sqrt(n-1)/sqrt(2) columns of the square roots
        let scale = (3.0f64 / 2.0).sqrt();
        let mut a = DMatrix::zeros(4, 2);
        let mut b = DMatrix::zeros(4, 2);
        for j in 0..2 {
            for (r, sign) in [(2 * j, 1.0), (2 * j + 1, -1.0)] {
                for d in 0..2 {
                    a[(r, d)] = sign * scale * if d == j { 1.0 } else { 0.0 };
                    b[(r, d)] = sign * scale * sqrt_b[(d, j)] + if d == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        let got = fid(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn fid_is_symmetric() {
        let a = gaussian_samples(300, 5, 0.3, 1);
        let b = gaussian_samples(300, 5, -0.2, 2);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fid_warns_but_works_when_singular() {
        let a = gaussian_samples(3, 6, 0.0, 3);
        let b = gaussian_samples(3, 6, 1.0, 4);
        assert!(fid(&a, &b).unwrap().is_finite());
        assert!(fid(&gaussian_samples(1, 2, 0.0, 5), &a).is_err());
    }

    #[test]
    fn lpips_fallback_basic_properties() {
        let e = PyramidFeatures::default();
        let data = make_synthetic_dataset(4, 16, 0).unwrap();
        let a = data.batch::<f64>(&[0, 1]).unwrap();
        let b = data.batch::<f64>(&[2, 3]).unwrap();
        assert_eq!(lpips(&a, &a, &e).unwrap(), 0.0);
        assert!((lpips(&a, &b, &e).unwrap() - lpips(&b, &a, &e).unwrap()).abs() < 1e-12);
        assert!(lpips(&a, &b, &e).unwrap() > 0.0);
    }

    #[test]
    fn plugin_extractor_loads_and_runs() {
        let net = ConvNetExtractor {
            name: "tiny".into(),
            mean: [0.5; 3],
            std: [0.25; 3],
            layers: vec![
                PluginLayer {
                    shape: [4, 3, 3, 3],
                    weight: (0..108).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect(),
                    bias: vec![0.0, 0.1, -0.1, 0.2],
                    stride: 2,
                },
                PluginLayer {
                    shape: [2, 4, 1, 1],
                    weight: vec![1.0, -1.0, 0.5, 0.25, 0.3, 0.2, -0.7, 1.0],
                    bias: vec![0.0, 0.0],
                    stride: 1,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        std::fs::write(&path, serde_json::to_vec(&net).unwrap()).unwrap();
        let e = extractor_from(Some(&path)).unwrap();
        assert!(!e.is_fallback());
        let data = make_synthetic_dataset(3, 16, 1).unwrap();
        let imgs = data.batch::<f64>(&[0, 1, 2]).unwrap();
        let maps = e.feature_maps(&imgs).unwrap();
        assert_eq!(maps[0].shape(), &[3, 4, 8, 8]);
        assert_eq!(maps[1].shape(), &[3, 2, 8, 8]);
        assert_eq!(e.embed(&imgs).unwrap().shape(), (3, 12));
        assert_eq!(lpips(&imgs, &imgs, e.as_ref()).unwrap(), 0.0);

        let mut broken = net.clone();
        broken.layers[1].shape = [2, 3, 1, 1];
        std::fs::write(&path, serde_json::to_vec(&broken).unwrap()).unwrap();
        assert!(ConvNetExtractor::load(&path).is_err());
    }

    #[test]
    fn consistency_of_oracle_and_passthrough_models() {
        let data = make_synthetic_dataset(6, 16, 2).unwrap();
        let pairs = eval_pairs(&data, 8, 0).unwrap();
        let all = data.batch::<f64>(&(0..6).collect::<Vec<_>>()).unwrap();
        let lrs = downscale_tensor(&all, 4).unwrap();
        // finds the HR image whose downscale is the requested target
        let oracle = |_: &Tensor<f64>, y: &Tensor<f64>| {
            let items: Vec<Tensor<f64>> = (0..y.shape()[0])
                .map(|i| {
                    let yi = y.batch_item(i);
                    let j = (0..6).find(|&j| lrs.batch_item(j) == yi).unwrap();
                    all.batch_item(j)
                })
                .collect();
            Tensor::concat(&items.iter().collect::<Vec<_>>(), 0)
        };
        assert_eq!(downscale_consistency_on(&oracle, &data, &pairs, 4, 3).unwrap(), 0.0);

        let passthrough = |x: &Tensor<f64>, _: &Tensor<f64>| Ok(x.clone());
        let got = downscale_consistency_on(&passthrough, &data, &pairs, 4, 3).unwrap();
        let want = pairs
            .iter()
            .map(|&(s, t)| {
                let a = lrs.batch_item(s);
                let b = lrs.batch_item(t);
                a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64
            })
            .sum::<f64>()
            / pairs.len() as f64;
        assert!((got - want).abs() < 1e-12);
        for batch in [1, 2, 5, 8] {
            let v = downscale_consistency_on(&passthrough, &data, &pairs, 4, batch).unwrap();
            assert!((v - got).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_parsing() {
        assert_eq!(Perturbation::parse("grayscale").unwrap(), Perturbation::Grayscale);
        assert_eq!(Perturbation::parse("gaussian:0.1").unwrap(), Perturbation::Gaussian { sigma: 0.1 });
        assert_eq!(
            Perturbation::parse("manual_edit:0,1,0.5,-1,1").unwrap(),
            Perturbation::ManualEdit {
                edits: vec![PixelEdit { row: 0, col: 1, rgb: [0.5, -1.0, 1.0] }]
            }
        );
        assert!(Perturbation::parse("gaussian").is_err());
        assert!(Perturbation::parse("gaussian:-1").is_err());
        assert!(Perturbation::parse("blur:2").is_err());
        assert!(Perturbation::parse("manual_edit:0,1").is_err());
    }

    #[test]
    fn perturbations_behave() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lr = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| ((i * 37 % 19) as f64 / 9.5) - 1.0);
        let gray = perturb_lr(&lr, &Perturbation::Grayscale, &mut rng).unwrap();
        assert_eq!(perturb_lr(&gray, &Perturbation::Grayscale, &mut rng).unwrap(), gray);
        let p = 5;
        let want = 0.299 * lr.data()[p] + 0.587 * lr.data()[16 + p] + 0.114 * lr.data()[32 + p];
        assert!((gray.data()[p] - want).abs() < 1e-12);
        assert_eq!(perturb_lr(&lr, &Perturbation::Gaussian { sigma: 0.0 }, &mut rng).unwrap(), lr);
        let noisy = perturb_lr(&lr, &Perturbation::Gaussian { sigma: 0.5 }, &mut rng).unwrap();
        assert!(noisy.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(noisy, lr);
        let edit = Perturbation::ManualEdit {
            edits: vec![PixelEdit { row: 1, col: 2, rgb: [2.0, 0.0, -0.5] }],
        };
        let edited = perturb_lr(&lr, &edit, &mut rng).unwrap();
        assert_eq!(edited.at(&[1, 0, 1, 2]), 1.0);
        assert_eq!(edited.at(&[0, 2, 1, 2]), -0.5);
        let outside = Perturbation::ManualEdit {
            edits: vec![PixelEdit { row: 4, col: 0, rgb: [0.0; 3] }],
        };
        assert!(perturb_lr(&lr, &outside, &mut rng).is_err());
    }

    #[test]
    fn protocol_counts_and_round_trip() {
        let data = make_synthetic_dataset(5, 16, 3).unwrap();
        let model = |x: &Tensor<f64>, _: &Tensor<f64>| Ok(x.clone());
        let opts = ProtocolOptions {
            samples_per_lr: 3,
            ..ProtocolOptions::default()
        };
        let out = eval_protocol(&model, &data, 4, &PyramidFeatures::default(), &opts).unwrap();
        let r = &out.report;
        assert_eq!(r.generated, 15);
        assert_eq!(r.lr_targets, 5);
        assert!(r.fid >= 0.0 && r.consistency_mean > 0.0 && r.lpips_mean > 0.0);
        assert!(r.fallback_metrics);
        let headline = r.reference.headline().unwrap();
        assert_eq!((headline.fid, headline.lpips), (15.52, 0.34));
        assert_eq!(r.reference.for_lr_size(16).unwrap().fid, 19.45);
        for s in &r.samples {
            assert_eq!(s.sources.len(), 3);
            assert!(!s.sources.contains(&s.target));
        }
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), *r);
        let again = eval_protocol(&model, &data, 4, &PyramidFeatures::default(), &opts).unwrap();
        assert_eq!(again.report, *r);
        assert_eq!(protocol_mosaic(&out, 2).unwrap().dimensions(), (16 * 4, 16 * 2));
    }

    #[test]
    fn grid_layout() {
        let data = make_synthetic_dataset(6, 16, 4).unwrap();
        let sources = data.batch::<f64>(&[0, 1, 2]).unwrap();
        let targets = downscale_tensor(&data.batch::<f64>(&[3, 4, 5]).unwrap(), 4).unwrap();
        let model = |x: &Tensor<f64>, _: &Tensor<f64>| Ok(x.clone());
        let img = translation_grid(&model, &sources, &targets).unwrap();
        assert_eq!(img.dimensions(), (64, 64));
    }
}

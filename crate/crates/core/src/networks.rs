//! Generator and discriminator.
//!
//! The generator is U-shaped. Encoder blocks strip style with instance
//! normalization and hand positional moments (PoNo) across to the decoder.
//! Decoder blocks are modulated by the upsampled LR target through SPAdaIN
//! and re-inject the moments through dynamic moment shortcuts. The
//! discriminator follows the StarGAN v2 layout without domain heads, and
//! concatenates the LR difference map onto the feature map of matching size.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::imaging::{downscale, upsample_bilinear};
use crate::layers::{Conv2d, Linear};
use crate::norm::{instance_norm, pono, DynamicMomentShortcut, MomentPair, Spadain, LEAKY_SLOPE};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Window};

/// Image channels (RGB) of inputs, outputs, LR targets and difference maps.
pub const IMAGE_CHANNELS: usize = 3;

const SMALLEST_FEATURE_MAP: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub hr_size: usize,
    pub lr_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Number of downsampling encoder blocks (and upsampling decoder blocks).
    pub num_scales: usize,
    pub blocks_per_scale: usize,
    pub bottleneck_blocks: usize,
    pub spectral_norm: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            hr_size: 128,
            lr_size: 8,
            base_channels: 64,
            max_channels: 512,
            num_scales: 4,
            blocks_per_scale: 1,
            bottleneck_blocks: 2,
            spectral_norm: true,
        }
    }
}

fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !is_pow2(self.hr_size) {
            return Err(Error::field("hr_size", "must be a power of two"));
        }
        if self.lr_size == 0 || self.lr_size > self.hr_size || !self.hr_size.is_multiple_of(self.lr_size) {
            return Err(Error::field("lr_size", "must divide hr_size"));
        }
        if self.num_scales == 0 || self.hr_size >> self.num_scales < SMALLEST_FEATURE_MAP {
            return Err(Error::field(
                "num_scales",
                format!("bottleneck of {} must be at least 4x4", self.hr_size >> self.num_scales.min(31)),
            ));
        }
        if self.base_channels < 2 || self.max_channels < self.base_channels {
            return Err(Error::field(
                "base_channels",
                "need 2 <= base_channels <= max_channels",
            ));
        }
        if self.blocks_per_scale == 0 {
            return Err(Error::field("blocks_per_scale", "must be at least 1"));
        }
        Ok(())
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        (self.base_channels << scale).min(self.max_channels)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.hr_size >> self.num_scales
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub hr_size: usize,
    pub lr_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub spectral_norm: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            hr_size: 128,
            lr_size: 8,
            base_channels: 64,
            max_channels: 512,
            spectral_norm: true,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !is_pow2(self.hr_size) || self.hr_size < SMALLEST_FEATURE_MAP {
            return Err(Error::field("hr_size", "must be a power of two >= 4"));
        }
        if !is_pow2(self.lr_size) || self.lr_size > self.hr_size || self.lr_size < SMALLEST_FEATURE_MAP {
            return Err(Error::field(
                "lr_size",
                "must be a power of two between 4 and hr_size",
            ));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::field(
                "base_channels",
                "need 1 <= base_channels <= max_channels",
            ));
        }
        Ok(())
    }

    /// Downsampling blocks from `hr_size` to the final 4x4 map.
    pub fn num_blocks(&self) -> usize {
        (self.hr_size / SMALLEST_FEATURE_MAP).trailing_zeros() as usize
    }

    /// Level (0 = after the stem) whose feature map is `lr_size` wide.
    pub fn injection_level(&self) -> usize {
        (self.hr_size / self.lr_size).trailing_zeros() as usize
    }
}

fn lrelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(T::lit(LEAKY_SLOPE))
}

fn residual_merge<T: Scalar>(branch: &Var<T>, skip: &Var<T>) -> Var<T> {
    branch.add(skip).scale(T::lit(std::f64::consts::FRAC_1_SQRT_2))
}

fn check_image<T: Scalar>(what: &str, x: &Var<T>, channels: usize, size: usize) -> Result<usize> {
    match x.shape() {
        &[b, c, h, w] if c == channels && h == size && w == size && b > 0 => Ok(b),
        s => Err(Error::Shape(format!(
            "{what} must be [batch, {channels}, {size}, {size}], got {s:?}"
        ))),
    }
}

/// LR target resampled to `size`: bilinear when enlarging, block means when shrinking.
fn condition_at<T: Scalar>(lr: &Var<T>, size: usize) -> Result<Var<T>> {
    let lr_size = lr.shape()[2];
    if size >= lr_size {
        upsample_bilinear(lr, size, size)
    } else {
        downscale(lr, lr_size / size)
    }
}

/// Downsampling PoNo ResBlk.
#[derive(Clone, Debug)]
struct EncoderBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    downsample: bool,
}

impl EncoderBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        sn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cin, 3, sn, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cin, cout, 3, sn, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, sn, rng)),
            downsample,
        }
    }

    /// Returns the block output and, for downsampling blocks, the PoNo moments
    /// at the block's input resolution.
    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> (Var<T>, Option<MomentPair<T>>) {
        let h = self.conv1.forward(p, &lrelu(&instance_norm(x)));
        let (h, moments) = if self.downsample {
            let (normalized, m) = pono(&h);
            (normalized.avg_pool(2), Some(m))
        } else {
            (h, None)
        };
        let h = self.conv2.forward(p, &lrelu(&instance_norm(&h)));
        let mut skip = x.clone();
        if self.downsample {
            skip = skip.avg_pool(2);
        }
        if let Some(conv) = &self.skip {
            skip = conv.forward(p, &skip);
        }
        (residual_merge(&h, &skip), moments)
    }
}

/// Upsampling PoNo-SPAdaIN ResBlk.
#[derive(Clone, Debug)]
struct DecoderBlock {
    norm1: Spadain,
    conv1: Conv2d,
    norm2: Spadain,
    conv2: Conv2d,
    shortcut: Option<DynamicMomentShortcut>,
    skip: Option<Conv2d>,
    upsample: bool,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        upsample: bool,
        sn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderBlock {
            norm1: Spadain::new(store, &format!("{name}.norm1"), cin, IMAGE_CHANNELS, cin, sn, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, sn, rng),
            norm2: Spadain::new(store, &format!("{name}.norm2"), cout, IMAGE_CHANNELS, cout, sn, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, sn, rng),
            shortcut: upsample.then(|| DynamicMomentShortcut::new(store, &format!("{name}.moments"), cout, sn, rng)),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, sn, rng)),
            upsample,
        }
    }

    fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        x: &Var<T>,
        lr: &Var<T>,
        moments: Option<&MomentPair<T>>,
    ) -> Result<Var<T>> {
        let size = x.shape()[2];
        let out_size = if self.upsample { 2 * size } else { size };
        let h = lrelu(&self.norm1.forward(p, x, &condition_at(lr, size)?)?);
        let h = if self.upsample { h.upsample_nearest(2) } else { h };
        let h = self.conv1.forward(p, &h);
        let h = lrelu(&self.norm2.forward(p, &h, &condition_at(lr, out_size)?)?);
        let mut h = self.conv2.forward(p, &h);
        if let Some(shortcut) = &self.shortcut {
            let m = moments.ok_or_else(|| Error::Shape("decoder block needs moments".into()))?;
            h = shortcut.forward(p, &h, m)?;
        }
        let mut skip = x.clone();
        if let Some(conv) = &self.skip {
            skip = conv.forward(p, &skip);
        }
        if self.upsample {
            skip = skip.upsample_nearest(2);
        }
        Ok(residual_merge(&h, &skip))
    }
}

/// Output of the encoder half.
#[derive(Clone, Debug)]
pub struct Encoded<T: Scalar> {
    pub bottleneck: Var<T>,
    /// One pair per scale, outermost (full resolution) first.
    pub moments: Vec<MomentPair<T>>,
}

/// `G(X | y)`: translates HR sources towards the subspace of an LR target.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    spec: GeneratorSpec,
    pub params: ParamStore<T>,
    stem: Conv2d,
    encoder: Vec<EncoderBlock>,
    bottleneck_in: Vec<EncoderBlock>,
    bottleneck_out: Vec<DecoderBlock>,
    /// Innermost scale first.
    decoder: Vec<DecoderBlock>,
    to_rgb: Conv2d,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sn = spec.spectral_norm;
        let mut store = ParamStore::new();
        let base = spec.base_channels;
        let stem = Conv2d::new(&mut store, "g.stem", IMAGE_CHANNELS, base, 3, sn, &mut rng);
        let mut encoder = Vec::new();
        for s in 0..spec.num_scales {
            let (cin, cout) = (spec.channels_at(s), spec.channels_at(s + 1));
            encoder.push(EncoderBlock::new(&mut store, &format!("g.enc{s}.down"), cin, cout, true, sn, &mut rng));
            for k in 1..spec.blocks_per_scale {
                encoder.push(EncoderBlock::new(&mut store, &format!("g.enc{s}.res{k}"), cout, cout, false, sn, &mut rng));
            }
        }
        let inner = spec.channels_at(spec.num_scales);
        let half = spec.bottleneck_blocks / 2;
        let bottleneck_in = (0..spec.bottleneck_blocks - half)
            .map(|k| EncoderBlock::new(&mut store, &format!("g.mid_enc{k}"), inner, inner, false, sn, &mut rng))
            .collect();
        let bottleneck_out = (0..half)
            .map(|k| DecoderBlock::new(&mut store, &format!("g.mid_dec{k}"), inner, inner, false, sn, &mut rng))
            .collect();
        let mut decoder = Vec::new();
        for s in (0..spec.num_scales).rev() {
            let (cin, cout) = (spec.channels_at(s + 1), spec.channels_at(s));
            for k in 1..spec.blocks_per_scale {
                decoder.push(DecoderBlock::new(&mut store, &format!("g.dec{s}.res{k}"), cin, cin, false, sn, &mut rng));
            }
            decoder.push(DecoderBlock::new(&mut store, &format!("g.dec{s}.up"), cin, cout, true, sn, &mut rng));
        }
        let to_rgb = Conv2d::new(&mut store, "g.to_rgb", base, IMAGE_CHANNELS, 1, sn, &mut rng);
        Ok(Generator {
            spec,
            params: store,
            stem,
            encoder,
            bottleneck_in,
            bottleneck_out,
            decoder,
            to_rgb,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn encode(&self, p: &Bound<T>, source: &Var<T>) -> Result<Encoded<T>> {
        check_image("source image", source, IMAGE_CHANNELS, self.spec.hr_size)?;
        let mut h = self.stem.forward(p, source);
        let mut moments = Vec::with_capacity(self.spec.num_scales);
        for block in &self.encoder {
            let (out, m) = block.forward(p, &h);
            moments.extend(m);
            h = out;
        }
        for block in &self.bottleneck_in {
            h = block.forward(p, &h).0;
        }
        Ok(Encoded { bottleneck: h, moments })
    }

    pub fn decode(&self, p: &Bound<T>, encoded: &Encoded<T>, lr_target: &Var<T>) -> Result<Var<T>> {
        let batch = check_image("LR target", lr_target, IMAGE_CHANNELS, self.spec.lr_size)?;
        if encoded.moments.len() != self.spec.num_scales {
            return Err(Error::Shape(format!(
                "expected {} moment pairs, got {}",
                self.spec.num_scales,
                encoded.moments.len()
            )));
        }
        let bottleneck = &encoded.bottleneck;
        if bottleneck.shape()[0] != batch {
            return Err(Error::Shape(format!(
                "batch of {batch} LR targets for {} sources",
                bottleneck.shape()[0]
            )));
        }
        let mut h = bottleneck.clone();
        for block in &self.bottleneck_out {
            h = block.forward(p, &h, lr_target, None)?;
        }
        let mut pending = encoded.moments.iter().rev();
        for block in &self.decoder {
            let m = if block.upsample {
                let m = pending.next().expect("one moment pair per upsampling block");
                if m.spatial_size() != (2 * h.shape()[2], 2 * h.shape()[3]) {
                    return Err(Error::Shape("moment pair resolution mismatch".into()));
                }
                Some(m)
            } else {
                None
            };
            h = block.forward(p, &h, lr_target, m)?;
        }
        Ok(self.to_rgb.forward(p, &lrelu(&h)).tanh())
    }

    pub fn forward(&self, p: &Bound<T>, source: &Var<T>, lr_target: &Var<T>) -> Result<Var<T>> {
        let encoded = self.encode(p, source)?;
        self.decode(p, &encoded, lr_target)
    }

    /// Inference on plain tensors with frozen parameters.
    pub fn translate(&self, source: &Tensor<T>, lr_target: &Tensor<T>) -> Result<Tensor<T>> {
        no_grad(|| {
            let p = self.params.bind_frozen();
            let out = self.forward(&p, &Var::constant(source.clone()), &Var::constant(lr_target.clone()))?;
            Ok(out.value().clone())
        })
    }
}

/// Anything that maps `(source, lr_target)` to an HR image.
pub trait Translator<T: Scalar> {
    fn translate(&self, source: &Var<T>, lr_target: &Var<T>) -> Result<Var<T>>;
}

/// A generator together with the parameters bound for the current step.
/// Counts forward passes.
pub struct BoundGenerator<'a, T: Scalar> {
    pub net: &'a Generator<T>,
    pub params: &'a Bound<T>,
    passes: Cell<usize>,
}

impl<'a, T: Scalar> BoundGenerator<'a, T> {
    pub fn new(net: &'a Generator<T>, params: &'a Bound<T>) -> Self {
        BoundGenerator {
            net,
            params,
            passes: Cell::new(0),
        }
    }

    pub fn passes(&self) -> usize {
        self.passes.get()
    }
}

impl<T: Scalar> Translator<T> for BoundGenerator<'_, T> {
    fn translate(&self, source: &Var<T>, lr_target: &Var<T>) -> Result<Var<T>> {
        self.passes.set(self.passes.get() + 1);
        self.net.forward(self.params, source, lr_target)
    }
}

/// Down block of the discriminator (pre-activation, no normalization).
#[derive(Clone, Debug)]
struct CriticBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl CriticBlock {
    fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(p, &lrelu(x)).avg_pool(2);
        let h = self.conv2.forward(p, &lrelu(&h));
        let mut skip = x.avg_pool(2);
        if let Some(conv) = &self.skip {
            skip = conv.forward(p, &skip);
        }
        residual_merge(&h, &skip)
    }
}

/// `D(image, diff)`: one real/fake logit per sample.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    spec: DiscriminatorSpec,
    pub params: ParamStore<T>,
    stem: Conv2d,
    blocks: Vec<CriticBlock>,
    head_conv: Conv2d,
    head_linear: Linear,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sn = spec.spectral_norm;
        let mut store = ParamStore::new();
        let channels = |level: usize| (spec.base_channels << level).min(spec.max_channels);
        let inject = spec.injection_level();
        let extra = |level: usize| if level == inject { IMAGE_CHANNELS } else { 0 };
        let stem = Conv2d::new(&mut store, "d.stem", IMAGE_CHANNELS, channels(0), 3, sn, &mut rng);
        let mut blocks = Vec::new();
        for level in 0..spec.num_blocks() {
            let cin = channels(level) + extra(level);
            let cout = channels(level + 1);
            let name = format!("d.block{level}");
            blocks.push(CriticBlock {
                conv1: Conv2d::new(&mut store, &format!("{name}.conv1"), cin, cin, 3, sn, &mut rng),
                conv2: Conv2d::new(&mut store, &format!("{name}.conv2"), cin, cout, 3, sn, &mut rng),
                skip: (cin != cout).then(|| Conv2d::new(&mut store, &format!("{name}.skip"), cin, cout, 1, sn, &mut rng)),
            });
        }
        let last = spec.num_blocks();
        let c = channels(last) + extra(last);
        let head_conv = Conv2d::with_window(
            &mut store,
            "d.head_conv",
            c,
            c,
            Window {
                kernel: SMALLEST_FEATURE_MAP,
                stride: 1,
                padding: 0,
            },
            sn,
            &mut rng,
        );
        let head_linear = Linear::new(&mut store, "d.head_linear", c, 1, sn, &mut rng);
        Ok(Discriminator {
            spec,
            params: store,
            stem,
            blocks,
            head_conv,
            head_linear,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Logits of shape `[batch]`.
    pub fn forward(&self, p: &Bound<T>, image: &Var<T>, diff: &Var<T>) -> Result<Var<T>> {
        let batch = check_image("discriminator image", image, IMAGE_CHANNELS, self.spec.hr_size)?;
        let diff_batch = check_image("difference map", diff, IMAGE_CHANNELS, self.spec.lr_size)?;
        if batch != diff_batch {
            return Err(Error::Shape(format!(
                "{batch} images but {diff_batch} difference maps"
            )));
        }
        let inject = self.spec.injection_level();
        let mut h = self.stem.forward(p, image);
        for (level, block) in self.blocks.iter().enumerate() {
            if level == inject {
                h = Var::concat(&[h, diff.clone()], 1);
            }
            h = block.forward(p, &h);
        }
        if inject == self.blocks.len() {
            h = Var::concat(&[h, diff.clone()], 1);
        }
        let h = lrelu(&self.head_conv.forward(p, &lrelu(&h)));
        let c = h.shape()[1];
        let logits = self.head_linear.forward(p, &h.reshape(&[batch, c]));
        Ok(logits.reshape(&[batch]))
    }
}

/// Anything that scores `(image, diff)` pairs with one logit per sample.
pub trait Critic<T: Scalar> {
    fn logits(&self, image: &Var<T>, diff: &Var<T>) -> Result<Var<T>>;
}

pub struct BoundDiscriminator<'a, T: Scalar> {
    pub net: &'a Discriminator<T>,
    pub params: &'a Bound<T>,
}

impl<T: Scalar> Critic<T> for BoundDiscriminator<'_, T> {
    fn logits(&self, image: &Var<T>, diff: &Var<T>) -> Result<Var<T>> {
        self.net.forward(self.params, image, diff)
    }
}

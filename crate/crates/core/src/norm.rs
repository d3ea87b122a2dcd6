//! Normalization primitives of the generator: instance normalization,
//! positional normalization (PoNo) with moment extraction, spatially adaptive
//! instance normalization (SPAdaIN) and dynamic moment shortcuts.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::params::{spectral_normalize, PowerIteration};

/// Added to every variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Leaky-ReLU slope used throughout both networks.
pub const LEAKY_SLOPE: f64 = 0.2;

fn standardize<T: Scalar>(f: &Var<T>, axes: &[usize]) -> (Var<T>, Var<T>, Var<T>) {
    let mu = f.mean_keep(axes);
    let centered = f.sub(&mu);
    let sigma = centered
        .square()
        .mean_keep(axes)
        .add_scalar(T::lit(NORM_EPS))
        .sqrt();
    (centered.div(&sigma), mu, sigma)
}

/// Zero mean, unit variance over the spatial axes of every (batch, channel).
pub fn instance_norm<T: Scalar>(f: &Var<T>) -> Var<T> {
    standardize(f, &[2, 3]).0
}

/// Per-position mean and standard deviation taken across channels.
#[derive(Clone, Debug)]
pub struct MomentPair<T: Scalar> {
    /// `[batch, 1, h, w]`
    pub mu: Var<T>,
    /// `[batch, 1, h, w]`, at least `sqrt(NORM_EPS)` everywhere.
    pub sigma: Var<T>,
}

impl<T: Scalar> MomentPair<T> {
    pub fn spatial_size(&self) -> (usize, usize) {
        let s = self.mu.shape();
        (s[2], s[3])
    }

    /// Nearest-neighbour resize by an integer factor.
    pub fn upsample(&self, factor: usize) -> Self {
        MomentPair {
            mu: self.mu.upsample_nearest(factor),
            sigma: self.sigma.upsample_nearest(factor),
        }
    }
}

/// Positional normalization: standardizes across channels at every position
/// and returns the removed moments.
pub fn pono<T: Scalar>(f: &Var<T>) -> (Var<T>, MomentPair<T>) {
    let (normalized, mu, sigma) = standardize(f, &[1]);
    (normalized, MomentPair { mu, sigma })
}

fn check_spatial<T: Scalar>(what: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!(
            "{what}: features {sa:?} and conditioning {sb:?} differ spatially"
        )));
    }
    Ok(())
}

/// SPAdaIN: `gamma(cond) * instance_norm(f) + beta(cond)` with per-pixel
/// modulation maps produced by a shared convolution trunk and two heads.
#[derive(Clone, Debug)]
pub struct Spadain {
    pub trunk: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl Spadain {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let trunk = Conv2d::new(store, &format!("{name}.trunk"), cond_channels, hidden, 3, spectral, rng);
        let gamma = Conv2d::new(store, &format!("{name}.gamma"), hidden, channels, 3, spectral, rng);
        let beta = Conv2d::new(store, &format!("{name}.beta"), hidden, channels, 3, spectral, rng);
        // start close to plain instance normalization
        store
            .set(gamma.bias, Tensor::ones(&[channels]))
            .expect("gamma bias shape");
        Spadain { trunk, gamma, beta }
    }

    pub fn modulation<T: Scalar>(&self, p: &Bound<T>, cond: &Var<T>) -> (Var<T>, Var<T>) {
        let hidden = self
            .trunk
            .forward(p, cond)
            .leaky_relu(T::lit(LEAKY_SLOPE));
        (self.gamma.forward(p, &hidden), self.beta.forward(p, &hidden))
    }

    /// `cond` must already be resized to the spatial size of `f`.
    pub fn forward<T: Scalar>(&self, p: &Bound<T>, f: &Var<T>, cond: &Var<T>) -> Result<Var<T>> {
        check_spatial("SPAdaIN", f, cond)?;
        let (gamma, beta) = self.modulation(p, cond);
        Ok(gamma.mul(&instance_norm(f)).add(&beta))
    }
}

/// Dynamic moment shortcut: a convolution over the stacked `(mu, sigma)`
/// produces `gamma` and `beta`, applied as `gamma * f + beta`.
#[derive(Clone, Debug)]
pub struct DynamicMomentShortcut {
    pub conv: Conv2d,
    pub channels: usize,
}

impl DynamicMomentShortcut {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), 2, 2 * channels, 3, spectral, rng);
        let mut bias = vec![T::zero(); 2 * channels];
        bias[..channels].fill(T::one());
        store
            .set(conv.bias, Tensor::from_vec(&[2 * channels], bias).unwrap())
            .expect("shortcut bias shape");
        DynamicMomentShortcut { conv, channels }
    }

    /// The moments must already match the spatial size of `f`.
    pub fn forward<T: Scalar>(&self, p: &Bound<T>, f: &Var<T>, moments: &MomentPair<T>) -> Result<Var<T>> {
        check_spatial("moment shortcut", f, &moments.mu)?;
        let stacked = Var::concat(&[moments.mu.clone(), moments.sigma.clone()], 1);
        let params = self.conv.forward(p, &stacked);
        let gamma = params.narrow(1, 0, self.channels);
        let beta = params.narrow(1, self.channels, self.channels);
        Ok(gamma.mul(f).add(&beta))
    }
}

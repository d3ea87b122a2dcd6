//! Convolution and dense layers over bound parameters.

use rand::Rng;

use crate::autograd::Var;
use crate::params::{he_normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Window};

/// Square-kernel 2-D convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_window(
            store,
            name,
            in_channels,
            out_channels,
            Window {
                kernel,
                stride: 1,
                padding: kernel / 2,
            },
            spectral,
            rng,
        )
    }

    pub fn with_window<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        window: Window,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let k = window.kernel;
        let fan_in = in_channels * k * k;
        let w = he_normal(&[out_channels, in_channels, k, k], fan_in, rng);
        let weight = if spectral {
            store.add_spectral(format!("{name}.weight"), w, rng)
        } else {
            store.add(format!("{name}.weight"), w)
        };
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            window,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let [b, c, h, w] = x.value().dims4().expect("conv input is 4-d");
        assert_eq!(
            c, self.in_channels,
            "conv expects {} input channels, got {c}",
            self.in_channels
        );
        let win = self.window;
        let (ho, wo) = (win.output_size(h), win.output_size(w));
        let k = win.kernel;
        let cols = if k == 1 && win.stride == 1 && win.padding == 0 {
            x.reshape(&[b, c, h * w])
        } else {
            x.im2col(win)
        };
        let weight = p
            .get(self.weight)
            .reshape(&[self.out_channels, c * k * k]);
        let bias = p.get(self.bias).reshape(&[1, self.out_channels, 1, 1]);
        weight
            .matmul(&cols)
            .reshape(&[b, self.out_channels, ho, wo])
            .add(&bias)
    }
}

/// Fully connected layer on `[batch, features]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_normal(&[out_features, in_features], in_features, rng);
        let weight = if spectral {
            store.add_spectral(format!("{name}.weight"), w, rng)
        } else {
            store.add(format!("{name}.weight"), w)
        };
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        x.matmul_t(p.get(self.weight), false, true)
            .add(p.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::BindMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let [n, c, h, wd] = x.dims4().unwrap();
        let [o, _, k, _] = w.dims4().unwrap();
        let mut out = vec![0.0; n * o * h * wd];
        for bi in 0..n {
            for oi in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[bi, ci, iy as usize, ix as usize])
                                            * w.at(&[oi, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out[((bi * o + oi) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, o, h, wd], out).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, 3, false, &mut rng);
        store
            .set(conv.bias, Tensor::from_fn(&[4], |i| i as f64 * 0.1))
            .unwrap();
        let x = he_normal(&[2, 3, 5, 6], 1, &mut rng);
        let bound = store.bind(BindMode::Frozen);
        let y = conv.forward(&bound, &Var::constant(x.clone()));
        let want = conv_oracle(&x, store.value(conv.weight), store.value(conv.bias), 1);
        for (a, b) in y.value().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 5, 2, 1, false, &mut rng);
        let x = he_normal(&[1, 5, 3, 3], 1, &mut rng);
        let y = conv.forward(&store.bind_frozen(), &Var::constant(x.clone()));
        let want = conv_oracle(&x, store.value(conv.weight), store.value(conv.bias), 0);
        for (a, b) in y.value().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "fc", 6, 1, true, &mut rng);
        let y = lin.forward(&store.bind_frozen(), &Var::constant(Tensor::ones(&[3, 6])));
        assert_eq!(y.shape(), &[3, 1]);
    }
}

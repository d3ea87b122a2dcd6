//! Training objectives: adversarial, cycle, reconstruction and R1.
//!
//! Every loss is mean-reduced over batch and pixels.

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::imaging::{downscale, lr_difference, DiffMap};
use crate::networks::{Critic, Translator};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The four generator outputs of one training iteration.
#[derive(Clone, Debug)]
pub struct Translations<T: Scalar> {
    /// `G(X | y)`
    pub x_y: Var<T>,
    /// `G(Y | x)`
    pub y_x: Var<T>,
    /// `G(G(X | y) | x)`
    pub x_rec: Var<T>,
    /// `G(G(Y | x) | y)`
    pub y_rec: Var<T>,
}

impl<T: Scalar> Translations<T> {
    /// Runs exactly four generator passes.
    pub fn generate(
        g: &dyn Translator<T>,
        x: &Var<T>,
        y: &Var<T>,
        x_lr: &Var<T>,
        y_lr: &Var<T>,
    ) -> Result<Self> {
        let x_y = g.translate(x, y_lr)?;
        let y_x = g.translate(y, x_lr)?;
        let x_rec = g.translate(&x_y, x_lr)?;
        let y_rec = g.translate(&y_x, y_lr)?;
        Ok(Translations { x_y, y_x, x_rec, y_rec })
    }

    pub fn detached(&self) -> Self {
        Translations {
            x_y: self.x_y.detach(),
            y_x: self.y_x.detach(),
            x_rec: self.x_rec.detach(),
            y_rec: self.y_rec.detach(),
        }
    }

    /// Fake branches with the LR target each one aims at:
    /// `(Y^x, x)`, `(X^rec, x)`, `(X^y, y)`, `(Y^rec, y)`.
    pub fn fakes<'a>(&'a self, x_lr: &'a Var<T>, y_lr: &'a Var<T>) -> [(&'a Var<T>, &'a Var<T>); 4] {
        [
            (&self.y_x, x_lr),
            (&self.x_rec, x_lr),
            (&self.x_y, y_lr),
            (&self.y_rec, y_lr),
        ]
    }
}

/// Adversarial terms of one or more (real, fake) comparisons.
#[derive(Clone, Debug)]
pub struct AdversarialTerms<T: Scalar> {
    /// `sum log D(real, 0) + log(1 - D(fake, d))`, maximized by D.
    pub objective: Var<T>,
    /// `-objective`, minimized by D.
    pub d_loss: Var<T>,
    /// Non-saturating `-log D(fake, d)`, minimized by G.
    pub g_loss: Var<T>,
}

impl<T: Scalar> AdversarialTerms<T> {
    fn sum(terms: Vec<Self>) -> Self {
        let mut it = terms.into_iter();
        let first = it.next().expect("at least one term");
        it.fold(first, |acc, t| AdversarialTerms {
            objective: acc.objective.add(&t.objective),
            d_loss: acc.d_loss.add(&t.d_loss),
            g_loss: acc.g_loss.add(&t.g_loss),
        })
    }
}

/// `log sigmoid(l) = -softplus(-l)`, averaged over the batch.
fn mean_log_sigmoid<T: Scalar>(logits: &Var<T>) -> Var<T> {
    logits.neg().softplus().mean().neg()
}

/// Adversarial terms from precomputed logits.
pub fn adversarial_from_logits<T: Scalar>(real_logits: &[&Var<T>], fake_logits: &Var<T>) -> AdversarialTerms<T> {
    let mut objective = fake_logits.softplus().mean().neg();
    for real in real_logits {
        objective = objective.add(&mean_log_sigmoid(real));
    }
    AdversarialTerms {
        d_loss: objective.neg(),
        objective,
        g_loss: fake_logits.neg().softplus().mean(),
    }
}

fn zero_diff<T: Scalar>(lr: &Var<T>) -> DiffMap<T> {
    DiffMap::zeros(lr.shape())
}

/// Scores real images against a zero difference map.
pub fn real_logits<T: Scalar>(critic: &dyn Critic<T>, real: &Var<T>, lr: &Var<T>) -> Result<Var<T>> {
    critic.logits(real, zero_diff(lr).var())
}

/// Scores a generated image against its difference to `target_lr`.
pub fn fake_logits<T: Scalar>(critic: &dyn Critic<T>, fake: &Var<T>, target_lr: &Var<T>, step: T) -> Result<Var<T>> {
    let diff = lr_difference(fake, target_lr, step)?;
    critic.logits(fake, diff.var())
}

/// One comparison: the real images each against a zero map, and `fake`
/// against its difference to `target_lr`.
pub fn adversarial_loss_pair<T: Scalar>(
    critic: &dyn Critic<T>,
    reals: &[(&Var<T>, &Var<T>)],
    fake: &Var<T>,
    target_lr: &Var<T>,
    step: T,
) -> Result<AdversarialTerms<T>> {
    let logits = reals
        .iter()
        .map(|(img, lr)| real_logits(critic, img, lr))
        .collect::<Result<Vec<_>>>()?;
    let fake = fake_logits(critic, fake, target_lr, step)?;
    Ok(adversarial_from_logits(&logits.iter().collect::<Vec<_>>(), &fake))
}

/// Sum of the four comparisons of one iteration. Both real images enter every
/// comparison; their logits are computed once.
pub fn overall_adversarial<T: Scalar>(
    critic: &dyn Critic<T>,
    x: &Var<T>,
    y: &Var<T>,
    t: &Translations<T>,
    x_lr: &Var<T>,
    y_lr: &Var<T>,
    step: T,
) -> Result<AdversarialTerms<T>> {
    let real_x = real_logits(critic, x, x_lr)?;
    let real_y = real_logits(critic, y, y_lr)?;
    overall_adversarial_with_reals(critic, &real_x, &real_y, t, x_lr, y_lr, step)
}

/// [`overall_adversarial`] with the real logits supplied by the caller.
pub fn overall_adversarial_with_reals<T: Scalar>(
    critic: &dyn Critic<T>,
    real_x: &Var<T>,
    real_y: &Var<T>,
    t: &Translations<T>,
    x_lr: &Var<T>,
    y_lr: &Var<T>,
    step: T,
) -> Result<AdversarialTerms<T>> {
    let terms = t
        .fakes(x_lr, y_lr)
        .into_iter()
        .map(|(fake, target)| {
            let logits = fake_logits(critic, fake, target, step)?;
            Ok(adversarial_from_logits(&[real_x, real_y], &logits))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversarialTerms::sum(terms))
}

/// Generator side only: `sum -log D(fake, d)` over the four fakes.
pub fn generator_adversarial<T: Scalar>(
    critic: &dyn Critic<T>,
    t: &Translations<T>,
    x_lr: &Var<T>,
    y_lr: &Var<T>,
    step: T,
) -> Result<Var<T>> {
    let mut total: Option<Var<T>> = None;
    for (fake, target) in t.fakes(x_lr, y_lr) {
        let term = fake_logits(critic, fake, target, step)?.neg().softplus().mean();
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    Ok(total.expect("four fakes"))
}

/// Mean absolute error.
pub fn l1<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    a.sub(b).abs().mean()
}

/// `|X - X^rec|_1 + |Y - Y^rec|_1`.
pub fn reconstruction_loss<T: Scalar>(x: &Var<T>, x_rec: &Var<T>, y: &Var<T>, y_rec: &Var<T>) -> Var<T> {
    l1(x, x_rec).add(&l1(y, y_rec))
}

/// Two-direction cycle loss with its own four generator passes:
/// `|X - G(G(X|DS(Y)) | DS(X))|_1 + |Y - G(G(Y|DS(X)) | DS(Y))|_1`.
pub fn cycle_loss<T: Scalar>(g: &dyn Translator<T>, x: &Var<T>, y: &Var<T>, factor: usize) -> Result<Var<T>> {
    let x_lr = downscale(x, factor)?;
    let y_lr = downscale(y, factor)?;
    let t = Translations::generate(g, x, y, &x_lr, &y_lr)?;
    Ok(cycle_from_translations(x, y, &t))
}

/// The cycle loss reusing an iteration's translations (no extra passes).
pub fn cycle_from_translations<T: Scalar>(x: &Var<T>, y: &Var<T>, t: &Translations<T>) -> Var<T> {
    reconstruction_loss(x, &t.x_rec, y, &t.y_rec)
}

/// How the cycle term is assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    /// Both directions once, from the iteration's four passes.
    #[default]
    Paired,
    /// The pair list `(X, Y^x), (X, X^rec), (Y, Y^x), (Y, Y^rec)`, each a full
    /// two-direction cycle with its own passes (16 extra generator passes).
    Enumerated,
}

/// Sum of [`cycle_loss`] over the enumerated pair list.
pub fn enumerated_cycle_loss<T: Scalar>(
    g: &dyn Translator<T>,
    x: &Var<T>,
    y: &Var<T>,
    t: &Translations<T>,
    factor: usize,
) -> Result<Var<T>> {
    let pairs = [(x, &t.y_x), (x, &t.x_rec), (y, &t.y_x), (y, &t.y_rec)];
    let mut total: Option<Var<T>> = None;
    for (a, b) in pairs {
        let term = cycle_loss(g, a, b, factor)?;
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    Ok(total.expect("four pairs"))
}

/// `gamma / 2 * E ||grad_real logits||^2`, from logits already computed on
/// `real` (which must require gradients). Differentiable in the critic.
pub fn r1_from_logits<T: Scalar>(logits: &Var<T>, real: &Var<T>, gamma: T) -> Result<Var<T>> {
    if !real.requires_grad() {
        return Err(Error::Shape("R1 needs real images that track gradients".into()));
    }
    let batch = real.shape()[0];
    let g = grad(&logits.sum(), &[real], true).remove(0);
    Ok(match g {
        Some(g) => g
            .square()
            .sum()
            .scale(gamma * T::lit(0.5) / T::from_usize(batch).unwrap()),
        None => Var::scalar(T::zero()),
    })
}

/// R1 penalty of `critic` at `real` (scored against a zero difference map).
pub fn r1_penalty<T: Scalar>(critic: &dyn Critic<T>, real: &Tensor<T>, lr_shape: &[usize], gamma: T) -> Result<Var<T>> {
    let real = Var::param(real.clone());
    let logits = critic.logits(&real, DiffMap::zeros(lr_shape).var())?;
    r1_from_logits(&logits, &real, gamma)
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_d: f64,
    pub adv_g: f64,
    pub cyc: f64,
    pub rec: f64,
    pub r1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBundle {
    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("cyc", self.cyc),
            ("rec", self.rec),
            ("r1", self.r1),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check, grad_values};
    use crate::networks::{BoundDiscriminator, Discriminator, DiscriminatorSpec};
    use crate::params::he_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    const STEP: f64 = 2.0 / 255.0;

    struct Identity;
    impl Translator<f64> for Identity {
        fn translate(&self, source: &Var<f64>, _: &Var<f64>) -> Result<Var<f64>> {
            Ok(source.clone())
        }
    }

    struct ConstantImage(f64);
    impl Translator<f64> for ConstantImage {
        fn translate(&self, source: &Var<f64>, _: &Var<f64>) -> Result<Var<f64>> {
            Ok(Var::constant(Tensor::full(source.shape(), self.0)))
        }
    }

    /// Outputs logit 0 (probability 1/2) and counts calls.
    #[derive(Default)]
    struct Coin(Cell<usize>);
    impl Critic<f64> for Coin {
        fn logits(&self, image: &Var<f64>, _: &Var<f64>) -> Result<Var<f64>> {
            self.0.set(self.0.get() + 1);
            Ok(Var::constant(Tensor::zeros(&[image.shape()[0]])))
        }
    }

    /// `<w, x>` per sample.
    struct LinearCritic(Tensor<f64>);
    impl Critic<f64> for LinearCritic {
        fn logits(&self, image: &Var<f64>, _: &Var<f64>) -> Result<Var<f64>> {
            let b = image.shape()[0];
            let n = self.0.numel();
            let w = Var::constant(self.0.reshape(&[n, 1]).unwrap());
            Ok(image.reshape(&[b, n]).matmul(&w).reshape(&[b]))
        }
    }

    fn rand_image(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        he_normal::<f64>(shape, 2, &mut rng).map(|v| v.tanh())
    }

    fn tiny_critic(seed: u64) -> Discriminator<f64> {
        Discriminator::new(
            DiscriminatorSpec {
                hr_size: 8,
                lr_size: 4,
                base_channels: 2,
                max_channels: 4,
                spectral_norm: true,
            },
            seed,
        )
        .unwrap()
    }

    fn ln_sigmoid(l: f64) -> f64 {
        -(1.0 + (-l).exp()).ln()
    }

    #[test]
    fn coin_critic_pair_value() {
        let coin = Coin::default();
        let x = Var::constant(rand_image(&[2, 3, 8, 8], 0));
        let y = Var::constant(rand_image(&[2, 3, 8, 8], 1));
        let x_lr = downscale(&x, 2).unwrap();
        let y_lr = downscale(&y, 2).unwrap();
        let fake = Var::constant(rand_image(&[2, 3, 8, 8], 2));
        let t = adversarial_loss_pair(&coin, &[(&x, &x_lr), (&y, &y_lr)], &fake, &y_lr, STEP).unwrap();
        assert!((t.objective.item() - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((t.g_loss.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn overall_is_four_pairs_with_four_fake_calls() {
        let coin = Coin::default();
        let x = Var::constant(rand_image(&[2, 3, 8, 8], 3));
        let y = Var::constant(rand_image(&[2, 3, 8, 8], 4));
        let x_lr = downscale(&x, 2).unwrap();
        let y_lr = downscale(&y, 2).unwrap();
        let t = Translations::generate(&Identity, &x, &y, &x_lr, &y_lr).unwrap();
        let terms = overall_adversarial(&coin, &x, &y, &t, &x_lr, &y_lr, STEP).unwrap();
        assert_eq!(coin.0.get(), 2 + 4);
        assert!((terms.objective.item() - 4.0 * 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pair_terms_match_scalar_oracle() {
        let d = tiny_critic(5);
        let p = d.params.bind_frozen();
        let critic = BoundDiscriminator { net: &d, params: &p };
        let x = Var::constant(rand_image(&[3, 3, 8, 8], 6));
        let y = Var::constant(rand_image(&[3, 3, 8, 8], 7));
        let fake = Var::constant(rand_image(&[3, 3, 8, 8], 8));
        let x_lr = downscale(&x, 2).unwrap();
        let y_lr = downscale(&y, 2).unwrap();
        let t = adversarial_loss_pair(&critic, &[(&x, &x_lr), (&y, &y_lr)], &fake, &y_lr, STEP).unwrap();

        let lx = critic.logits(&x, DiffMap::zeros(&[3, 3, 4, 4]).var()).unwrap();
        let ly = critic.logits(&y, DiffMap::zeros(&[3, 3, 4, 4]).var()).unwrap();
        let diff = lr_difference(&fake, &y_lr, STEP).unwrap();
        let lf = critic.logits(&fake, diff.var()).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            let (a, b, f) = (lx.value().data()[i], ly.value().data()[i], lf.value().data()[i]);
            let p_fake = 1.0 / (1.0 + (-f).exp());
            want += (ln_sigmoid(a) + ln_sigmoid(b) + (1.0 - p_fake).ln()) / 3.0;
        }
        assert!((t.objective.item() - want).abs() < 1e-9);
        assert!((t.d_loss.item() + want).abs() < 1e-9);
    }

    #[test]
    fn d_loss_gradient_matches_finite_differences() {
        let d = tiny_critic(9);
        let x = rand_image(&[2, 3, 8, 8], 10);
        let fake = rand_image(&[2, 3, 8, 8], 11);
        let y_lr = downscale(&Var::constant(rand_image(&[2, 3, 8, 8], 12)), 2).unwrap();
        let id = crate::params::ParamId(
            d.params.entries().iter().position(|e| e.name == "d.block0.conv1.weight").unwrap(),
        );
        let f = |vars: &[Var<f64>]| {
            let p = d.params.bind_frozen_with(Some((id, vars[0].clone())));
            let critic = BoundDiscriminator { net: &d, params: &p };
            let x = Var::constant(x.clone());
            let fake = Var::constant(fake.clone());
            let x_lr = downscale(&x, 2).unwrap();
            adversarial_loss_pair(&critic, &[(&x, &x_lr)], &fake, &y_lr, STEP)
                .unwrap()
                .d_loss
        };
        let w0 = d.params.value(id).clone();
        let err = check::max_gradient_error(&f, &[w0], 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn detached_fakes_leave_adv_d_unchanged() {
        let d = tiny_critic(13);
        let p = d.params.bind_frozen();
        let critic = BoundDiscriminator { net: &d, params: &p };
        let x = Var::constant(rand_image(&[2, 3, 8, 8], 14));
        let y = Var::constant(rand_image(&[2, 3, 8, 8], 15));
        let x_lr = downscale(&x, 2).unwrap();
        let y_lr = downscale(&y, 2).unwrap();
        let scale = Var::param(Tensor::scalar(0.9));
        struct Scaled(Var<f64>);
        impl Translator<f64> for Scaled {
            fn translate(&self, s: &Var<f64>, _: &Var<f64>) -> Result<Var<f64>> {
                Ok(s.mul(&self.0))
            }
        }
        let t = Translations::generate(&Scaled(scale), &x, &y, &x_lr, &y_lr).unwrap();
        let a = overall_adversarial(&critic, &x, &y, &t, &x_lr, &y_lr, STEP).unwrap();
        let b = overall_adversarial(&critic, &x, &y, &t.detached(), &x_lr, &y_lr, STEP).unwrap();
        assert_eq!(a.d_loss.item(), b.d_loss.item());
    }

    #[test]
    fn cycle_with_identity_is_zero() {
        let x = Var::constant(rand_image(&[2, 3, 8, 8], 16));
        let y = Var::constant(rand_image(&[2, 3, 8, 8], 17));
        assert_eq!(cycle_loss(&Identity, &x, &y, 2).unwrap().item(), 0.0);
    }

    #[test]
    fn cycle_with_constant_map_is_closed_form() {
        let x = rand_image(&[2, 3, 8, 8], 18);
        let y = rand_image(&[2, 3, 8, 8], 19);
        let c = 0.25;
        let got = cycle_loss(&ConstantImage(c), &Var::constant(x.clone()), &Var::constant(y.clone()), 2)
            .unwrap()
            .item();
        let mean_abs = |t: &Tensor<f64>| t.data().iter().map(|v| (v - c).abs()).sum::<f64>() / t.numel() as f64;
        assert!((got - mean_abs(&x) - mean_abs(&y)).abs() < 1e-12);
    }

    #[test]
    fn cycle_matches_manual_composition() {
        struct Mix;
        impl Translator<f64> for Mix {
            fn translate(&self, s: &Var<f64>, lr: &Var<f64>) -> Result<Var<f64>> {
                Ok(s.scale(0.7).add(&lr.upsample_nearest(2).scale(0.3)).tanh())
            }
        }
        let x = Var::constant(rand_image(&[1, 3, 8, 8], 20));
        let y = Var::constant(rand_image(&[1, 3, 8, 8], 21));
        let got = cycle_loss(&Mix, &x, &y, 2).unwrap().item();
        let ds = |v: &Var<f64>| downscale(v, 2).unwrap();
        let g = |s: &Var<f64>, lr: &Var<f64>| Mix.translate(s, lr).unwrap();
        let want = l1(&x, &g(&g(&x, &ds(&y)), &ds(&x))).item() + l1(&y, &g(&g(&y, &ds(&x)), &ds(&y))).item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn enumerated_cycle_uses_sixteen_passes() {
        struct Counting(Cell<usize>);
        impl Translator<f64> for Counting {
            fn translate(&self, s: &Var<f64>, _: &Var<f64>) -> Result<Var<f64>> {
                self.0.set(self.0.get() + 1);
                Ok(s.clone())
            }
        }
        let g = Counting(Cell::new(0));
        let x = Var::constant(rand_image(&[1, 3, 8, 8], 22));
        let y = Var::constant(rand_image(&[1, 3, 8, 8], 23));
        let x_lr = downscale(&x, 2).unwrap();
        let y_lr = downscale(&y, 2).unwrap();
        let t = Translations::generate(&g, &x, &y, &x_lr, &y_lr).unwrap();
        assert_eq!(g.0.get(), 4);
        let v = enumerated_cycle_loss(&g, &x, &y, &t, 2).unwrap();
        assert_eq!(g.0.get(), 20);
        assert_eq!(v.item(), 0.0);
    }

    #[test]
    fn reconstruction_offset() {
        let x = rand_image(&[2, 3, 4, 4], 24);
        let xv = Var::constant(x.clone());
        let shifted = Var::constant(x.map(|v| v + 0.1));
        let v = reconstruction_loss(&xv, &shifted, &xv, &xv).item();
        assert!((v - 0.1).abs() < 1e-12);
        assert_eq!(reconstruction_loss(&xv, &xv, &xv, &xv).item(), 0.0);
    }

    #[test]
    fn r1_of_linear_critic_is_half_gamma_norm_squared() {
        let w = rand_image(&[3, 8, 8], 25);
        let norm2: f64 = w.data().iter().map(|v| v * v).sum();
        let critic = LinearCritic(w);
        let v = r1_penalty(&critic, &rand_image(&[4, 3, 8, 8], 26), &[4, 3, 4, 4], 0.5).unwrap();
        assert!((v.item() - 0.25 * norm2).abs() < 1e-10);
    }

    #[test]
    fn r1_of_constant_critic_is_zero() {
        let v = r1_penalty(&Coin::default(), &rand_image(&[2, 3, 8, 8], 27), &[2, 3, 4, 4], 0.5).unwrap();
        assert_eq!(v.item(), 0.0);
    }

    #[test]
    fn r1_matches_finite_difference_gradient_norm() {
        let d = tiny_critic(28);
        let p = d.params.bind_frozen();
        let critic = BoundDiscriminator { net: &d, params: &p };
        let real = rand_image(&[2, 3, 8, 8], 29);
        let gamma = 0.5;
        let got = r1_penalty(&critic, &real, &[2, 3, 4, 4], gamma).unwrap().item();
        let zeros = DiffMap::<f64>::zeros(&[2, 3, 4, 4]);
        let f = |v: &[Var<f64>]| critic.logits(&v[0], zeros.var()).unwrap().sum();
        let g = check::numerical_gradient(&f, &[real], 0, 1e-5);
        let want = gamma / 2.0 * g.data().iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!(((got - want) / want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn r1_is_differentiable_in_critic_parameters() {
        let mut d = tiny_critic(30);
        let p = d.params.bind(crate::params::BindMode::Train);
        let critic = BoundDiscriminator { net: &d, params: &p };
        let real = rand_image(&[2, 3, 8, 8], 31);
        let r1 = r1_penalty(&critic, &real, &[2, 3, 4, 4], 0.5).unwrap();
        let grads = grad_values(&r1, &p.leaves());
        assert!(grads.iter().any(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn bundle_reports_non_finite_field() {
        let mut b = LossBundle::default();
        assert_eq!(b.first_non_finite(), None);
        b.rec = f64::NAN;
        assert_eq!(b.first_non_finite(), Some("rec"));
    }
}

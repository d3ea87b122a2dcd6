//! The adversarial training loop with two time-scale Adam updates.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{load_dataset, make_synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::imaging::{downscale, downscale_consistency, downscale_tensor};
use crate::losses::{
    cycle_from_translations, enumerated_cycle_loss, generator_adversarial, overall_adversarial_with_reals,
    r1_from_logits, real_logits, reconstruction_loss, CycleMode, LossBundle, Translations,
};
use crate::networks::{BoundDiscriminator, BoundGenerator, Discriminator, Generator};
use crate::params::{BindMode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let m = self.m[i].zip_map(g, |m, g| b1 * m + (T::one() - b1) * g)?;
            let v = self.v[i].zip_map(g, |v, g| b2 * v + (T::one() - b2) * g * g)?;
            let update = m.zip_map(&v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
            entry.value = entry.value.zip_map(&update, |p, u| p - u)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: u64,
    /// Drives pair sampling.
    pub rng: ChaCha8Rng,
}

const DISCRIMINATOR_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
const SAMPLER_STREAM: u64 = 1;

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_spec(), config.seed)?;
        let discriminator = Discriminator::new(
            config.discriminator_spec(),
            config.seed.wrapping_add(DISCRIMINATOR_SEED_OFFSET),
        )?;
        let adam = |store: &ParamStore<T>, lr| Adam::new(store, lr, config.beta1, config.beta2, config.adam_eps);
        let opt_g = adam(&generator.params, config.lr_g);
        let opt_d = adam(&discriminator.params, config.lr_d);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(TrainState {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            step: 0,
            rng,
        })
    }
}

/// Outcome of one [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
    /// Downscale consistency of `G(X|y)` against `y` on the step's batch.
    pub consistency: f64,
    pub generator_passes: usize,
}

fn leaf_grads<T: Scalar>(loss: &Var<T>, leaves: &[&Var<T>]) -> Vec<Tensor<T>> {
    grad(loss, leaves, false)
        .into_iter()
        .zip(leaves)
        .map(|(g, leaf)| g.map_or_else(|| Tensor::zeros(leaf.shape()), |g| g.value().clone()))
        .collect()
}

fn non_finite(step: u64, losses: &LossBundle, field: &str) -> Error {
    Error::NonFinite {
        step,
        record: format!("{field} in {}", serde_json::to_string(losses).unwrap_or_default()),
    }
}

/// One iteration: four generator passes, a discriminator update on the
/// adversarial loss plus R1, then a generator update against the updated
/// discriminator.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<StepReport> {
    let cfg = state.config.clone();
    let factor = cfg.downscale_factor();
    let step = T::lit(cfg.color_step);
    let x_var = Var::param(x.clone());
    let y_var = Var::param(y.clone());
    let x_lr = downscale(&Var::constant(x.clone()), factor)?;
    let y_lr = downscale(&Var::constant(y.clone()), factor)?;

    let g_params = state.generator.params.bind(BindMode::Train);
    let generator = BoundGenerator::new(&state.generator, &g_params);
    let fakes = Translations::generate(
        &generator,
        &Var::constant(x.clone()),
        &Var::constant(y.clone()),
        &x_lr,
        &y_lr,
    )?;
    let mut losses = LossBundle::default();

    // discriminator update
    {
        let d_params = state.discriminator.params.bind(BindMode::Train);
        let critic = BoundDiscriminator {
            net: &state.discriminator,
            params: &d_params,
        };
        let real_x = real_logits(&critic, &x_var, &x_lr)?;
        let real_y = real_logits(&critic, &y_var, &y_lr)?;
        let adv = overall_adversarial_with_reals(&critic, &real_x, &real_y, &fakes.detached(), &x_lr, &y_lr, step)?;
        let gamma = T::lit(cfg.r1_gamma);
        let r1 = r1_from_logits(&real_x, &x_var, gamma)?
            .add(&r1_from_logits(&real_y, &y_var, gamma)?)
            .scale(T::lit(0.5));
        let total_d = adv.d_loss.add(&r1);
        losses.adv_d = adv.d_loss.item().as_f64();
        losses.r1 = r1.item().as_f64();
        losses.total_d = total_d.item().as_f64();
        if let Some(field) = [("adv_d", losses.adv_d), ("r1", losses.r1)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(f, _)| f)
        {
            return Err(non_finite(state.step, &losses, field));
        }
        let grads = leaf_grads(&total_d, &d_params.leaves());
        state.opt_d.step(&mut state.discriminator.params, &grads)?;
        state.discriminator.params.refresh_spectral();
    }

    // generator update
    let d_params = state.discriminator.params.bind_frozen();
    let critic = BoundDiscriminator {
        net: &state.discriminator,
        params: &d_params,
    };
    let x_c = Var::constant(x.clone());
    let y_c = Var::constant(y.clone());
    let adv_g = if cfg.generator_adv {
        generator_adversarial(&critic, &fakes, &x_lr, &y_lr, step)?
    } else {
        Var::scalar(T::zero())
    };
    let cyc = match cfg.cycle_mode {
        CycleMode::Paired => cycle_from_translations(&x_c, &y_c, &fakes),
        CycleMode::Enumerated => enumerated_cycle_loss(&generator, &x_c, &y_c, &fakes, factor)?,
    };
    let rec = reconstruction_loss(&x_c, &fakes.x_rec, &y_c, &fakes.y_rec);
    let total_g = adv_g
        .add(&cyc.scale(T::lit(cfg.lambda_cyc)))
        .add(&rec.scale(T::lit(cfg.rec_weight)));
    losses.adv_g = adv_g.item().as_f64();
    losses.cyc = cyc.item().as_f64();
    losses.rec = rec.item().as_f64();
    losses.total_g = total_g.item().as_f64();
    if let Some(field) = losses.first_non_finite() {
        return Err(non_finite(state.step, &losses, field));
    }
    let grads = leaf_grads(&total_g, &g_params.leaves());
    let passes = generator.passes();
    let consistency = downscale_consistency(fakes.x_y.value(), y_lr.value())?;
    state.opt_g.step(&mut state.generator.params, &grads)?;
    state.generator.params.refresh_spectral();
    state.step += 1;
    Ok(StepReport {
        losses,
        consistency,
        generator_passes: passes,
    })
}

/// Every term of the objective at the current parameters, without updating
/// anything.
pub fn evaluate_losses<T: Scalar>(state: &TrainState<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<LossBundle> {
    let cfg = &state.config;
    let factor = cfg.downscale_factor();
    let step = T::lit(cfg.color_step);
    let x_var = Var::param(x.clone());
    let y_var = Var::param(y.clone());
    let x_c = Var::constant(x.clone());
    let y_c = Var::constant(y.clone());
    let x_lr = downscale(&x_c, factor)?;
    let y_lr = downscale(&y_c, factor)?;
    let g_params = state.generator.params.bind_frozen();
    let generator = BoundGenerator::new(&state.generator, &g_params);
    let fakes = Translations::generate(&generator, &x_c, &y_c, &x_lr, &y_lr)?;
    let d_params = state.discriminator.params.bind_frozen();
    let critic = BoundDiscriminator {
        net: &state.discriminator,
        params: &d_params,
    };
    let real_x = real_logits(&critic, &x_var, &x_lr)?;
    let real_y = real_logits(&critic, &y_var, &y_lr)?;
    let adv = overall_adversarial_with_reals(&critic, &real_x, &real_y, &fakes, &x_lr, &y_lr, step)?;
    let gamma = T::lit(cfg.r1_gamma);
    let r1 = r1_from_logits(&real_x, &x_var, gamma)?
        .add(&r1_from_logits(&real_y, &y_var, gamma)?)
        .scale(T::lit(0.5));
    let adv_g = if cfg.generator_adv {
        generator_adversarial(&critic, &fakes, &x_lr, &y_lr, step)?
    } else {
        Var::scalar(T::zero())
    };
    let cyc = match cfg.cycle_mode {
        CycleMode::Paired => cycle_from_translations(&x_c, &y_c, &fakes),
        CycleMode::Enumerated => enumerated_cycle_loss(&generator, &x_c, &y_c, &fakes, factor)?,
    };
    let rec = reconstruction_loss(&x_c, &fakes.x_rec, &y_c, &fakes.y_rec);
    let (adv_d, r1) = (adv.d_loss.item().as_f64(), r1.item().as_f64());
    let (adv_g, cyc, rec) = (adv_g.item().as_f64(), cyc.item().as_f64(), rec.item().as_f64());
    Ok(LossBundle {
        adv_d,
        adv_g,
        cyc,
        rec,
        r1,
        total_g: adv_g + cfg.lambda_cyc * cyc + cfg.rec_weight * rec,
        total_d: adv_d + r1,
    })
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub consistency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_sec: Option<f64>,
}

/// Train and validation splits described by the configuration.
pub fn load_splits(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let all = match &config.dataset_dir {
        Some(dir) => load_dataset(dir, config.hr_size)?,
        None => make_synthetic_dataset(config.synthetic_count, config.hr_size, config.synthetic_seed)?,
    };
    let (train, val) = all.split(config.val_fraction)?;
    if train.len() < 2 {
        return Err(Error::Dataset(format!(
            "training split has {} images, need at least 2",
            train.len()
        )));
    }
    Ok((train, val))
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn run_steps<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset,
    until: u64,
    mut on_step: impl FnMut(&TrainState<T>, &StepReport) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let (x, y) = data.sample_batch::<T>(state.config.batch_size, &mut state.rng)?;
        let report = train_step(state, &x, &y)?;
        on_step(state, &report)?;
    }
    Ok(())
}

/// Files written by [`train`] under its output directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("losses.jsonl")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.root.join("latest.ckpt")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}.ckpt"))
    }

    pub fn sample_grid(&self, step: u64) -> PathBuf {
        self.root.join("samples").join(format!("step_{step:08}.png"))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

/// Reads a loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

const GRID_SIDE: usize = 4;

/// Full training run. With `resume`, continues from that checkpoint (its
/// parameters, optimizer and sampler state) under `config`'s step budget.
pub fn train<T: Scalar>(config: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainState<T>> {
    config.validate()?;
    let layout = RunLayout::new(out_dir);
    fs::create_dir_all(layout.root.join("checkpoints"))?;
    fs::create_dir_all(layout.root.join("samples"))?;
    let mut state = match resume {
        Some(path) => {
            let mut s = checkpoint::load::<T>(path)?;
            s.config.max_steps = config.max_steps;
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let config = state.config.clone();
    fs::write(layout.config(), config.to_toml())?;
    let (train_set, val_set) = load_splits(&config)?;
    let grid_pool = if val_set.len() >= 2 { &val_set } else { &train_set };
    let k = GRID_SIDE.min(grid_pool.len());
    let grid_sources = grid_pool.batch::<T>(&(0..k).collect::<Vec<_>>())?;
    let grid_targets = downscale_tensor(
        &grid_pool.batch::<T>(&(0..k).rev().collect::<Vec<_>>())?,
        config.downscale_factor(),
    )?;

    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(layout.loss_log())?
    } else {
        File::create(layout.loss_log())?
    };
    let mut log = BufWriter::new(log_file);
    let mut interval_start = (Instant::now(), state.step);
    log::info!(
        "training {} -> {} steps on {} images ({} held out)",
        state.step,
        config.max_steps,
        train_set.len(),
        val_set.len()
    );
    run_steps(&mut state, &train_set, config.max_steps, |s, report| {
        let mut record = StepRecord {
            step: s.step,
            losses: report.losses,
            consistency: report.consistency,
            steps_per_sec: None,
        };
        if s.step % config.log_interval == 0 {
            let (t0, step0) = interval_start;
            let rate = (s.step - step0) as f64 / t0.elapsed().as_secs_f64().max(1e-9);
            record.steps_per_sec = Some(rate);
            log::info!(
                "step {} | adv_d {:.4} adv_g {:.4} cyc {:.4} r1 {:.4} | consistency {:.4} | {rate:.3} steps/s",
                s.step,
                report.losses.adv_d,
                report.losses.adv_g,
                report.losses.cyc,
                report.losses.r1,
                report.consistency
            );
            interval_start = (Instant::now(), s.step);
        }
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        log.flush()?;
        if s.step % config.checkpoint_interval == 0 {
            checkpoint::save(s, &layout.checkpoint(s.step))?;
            checkpoint::save(s, &layout.latest_checkpoint())?;
        }
        if s.step % config.sample_interval == 0 {
            let grid = crate::eval::translation_grid(&s.generator, &grid_sources, &grid_targets)?;
            grid.save(layout.sample_grid(s.step))?;
        }
        Ok(())
    })?;
    checkpoint::save(&state, &layout.latest_checkpoint())?;
    Ok(state)
}

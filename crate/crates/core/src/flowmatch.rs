//! Flow-matching training and guided Euler sampling.
//!
//! Training regresses `v_θ(x_t, t, c)` onto `x1 − x0` along the straight
//! path `x_t = (1−t)·x0 + t·x1`, with `t` drawn logit-normal and the
//! condition replaced by the null bank with probability `prompt_drop`.
//! Sampling integrates the learned ODE from noise at `t = 0` to data at
//! `t = 1` with uniform Euler steps and classifier-free guidance.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardBatch, Model, ModelSpec, ModelState, OptimizerState};
use crate::encoder_sim::{derive_seed, render_target, Prompt, SynthEncoder, TargetSpec};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::{grad_check, Differentiable, GradCheckOptions, GradCheckReport};
use crate::numerics::{ParamSet, Real, Tape, Tensor, Var};
use crate::routing::{shift_timestep, LayerBank};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub prompt_drop: f64,
    /// Location `m` of the logit-normal timestep distribution.
    pub logit_mean: f64,
    /// Scale `s` of the logit-normal timestep distribution.
    pub logit_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 32,
            steps: 2000,
            prompt_drop: 0.1,
            logit_mean: 0.0,
            logit_std: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop) {
            return Err(Error::config(format!(
                "prompt_drop {} outside [0, 1]",
                self.prompt_drop
            )));
        }
        if !self.logit_mean.is_finite() || !(self.logit_std > 0.0 && self.logit_std.is_finite()) {
            return Err(Error::config("logit-normal needs a finite mean and positive scale"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Route the gate's time input through [`shift_timestep`].
    pub apply_shift: bool,
    pub record_trajectory: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 6.0,
            apply_shift: false,
            record_trajectory: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config(format!(
                "cfg_scale {} must be finite and >= 0",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// `σ(m + s·z)` with `z ~ N(0, 1)`, redrawn in the (practically
/// unreachable) case that it rounds onto an endpoint.
pub fn sample_timestep<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let t = 1.0 / (1.0 + (-(mean + std * z)).exp());
        if t > 0.0 && t < 1.0 {
            return t;
        }
    }
}

/// `(1−t)·x0 + t·x1`.
pub fn interpolate<T: Real>(x0: &[T], x1: &[T], t: f64) -> Result<Vec<T>> {
    if x0.len() != x1.len() {
        return Err(Error::input(format!(
            "interpolating {} values against {}",
            x0.len(),
            x1.len()
        )));
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    Ok(x0.iter().zip(x1).map(|(&p, &q)| a * p + b * q).collect())
}

/// Training target `x1 − x0`.
pub fn velocity_target<T: Real>(x0: &[T], x1: &[T]) -> Result<Vec<T>> {
    if x0.len() != x1.len() {
        return Err(Error::input("velocity target shape mismatch"));
    }
    Ok(x0.iter().zip(x1).map(|(&p, &q)| q - p).collect())
}

/// A fully drawn training batch: everything random has been decided.
#[derive(Clone, Debug)]
pub struct FmBatch<T> {
    pub x_t: Vec<T>,
    pub t: Vec<f64>,
    pub banks: Vec<LayerBank>,
    pub target: Vec<T>,
    /// Which samples had their prompt replaced by the null bank.
    pub dropped: Vec<bool>,
}

/// Draws `t`, `x0` and the prompt-drop coin for each `(prompt, x1)` pair,
/// in sample order.
pub fn draw_fm_batch<T: Real, R: Rng>(
    encoder: &SynthEncoder,
    samples: &[(Prompt, Vec<f64>)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<FmBatch<T>> {
    let mut out = FmBatch {
        x_t: Vec::new(),
        t: Vec::with_capacity(samples.len()),
        banks: Vec::with_capacity(samples.len()),
        target: Vec::new(),
        dropped: Vec::with_capacity(samples.len()),
    };
    for (prompt, x1) in samples {
        let t = sample_timestep(rng, cfg.logit_mean, cfg.logit_std);
        let x0: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
        let drop = rng.random_bool(cfg.prompt_drop);
        out.x_t.extend(interpolate(&x0, x1, t)?.into_iter().map(T::lit));
        out.target.extend(velocity_target(&x0, x1)?.into_iter().map(T::lit));
        out.t.push(t);
        out.banks.push(if drop {
            encoder.null_bank().clone()
        } else {
            encoder.encode(prompt)?
        });
        out.dropped.push(drop);
    }
    Ok(out)
}

/// Records the mean-squared flow-matching loss of `model` on `batch`.
pub fn fm_loss_on_tape<T: Real>(model: &Model<T>, tape: &mut Tape<T>, batch: &FmBatch<T>) -> Result<Var> {
    let banks: Vec<&LayerBank> = batch.banks.iter().collect();
    let v = model.forward_on_tape(
        tape,
        &ForwardBatch {
            x_t: &batch.x_t,
            t: &batch.t,
            gate_t: &batch.t,
            banks: &banks,
        },
    )?;
    Ok(tape.mse(v, batch.target.clone()))
}

/// Loss and dense gradients (registration order) on one batch.
pub fn fm_loss_and_grad<T: Real>(model: &Model<T>, batch: &FmBatch<T>) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let loss = fm_loss_on_tape(model, &mut tape, batch)?;
    let value = tape.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::numerical(format!("non-finite loss {value}")));
    }
    Ok((value, tape.backward(loss).dense(model.params())))
}

/// One AdamW update with decay decoupled from the gradient and scaled by `lr`.
pub fn adamw_update<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    opt: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::input("gradient / optimizer state does not match parameters"));
    }
    opt.step += 1;
    let step = opt.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(step));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(step));
    let (lr, wd, eps) = (T::lit(cfg.lr), T::lit(cfg.weight_decay), T::lit(cfg.adam_eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
        if g.len() != p.data.len() {
            return Err(Error::input(format!("gradient for {} has wrong length", p.name)));
        }
        for (((x, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps) + wd * *x;
            *x -= lr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub dropped: usize,
}

/// Draws the stochastic parts of a step, then applies one AdamW update.
pub fn train_step<T: Real, R: Rng>(
    state: &mut ModelState<T>,
    encoder: &SynthEncoder,
    samples: &[(Prompt, Vec<f64>)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport> {
    let batch = draw_fm_batch::<T, R>(encoder, samples, cfg, rng)?;
    let (loss, grads) = fm_loss_and_grad(&state.model, &batch).map_err(|e| match e {
        Error::Numerical(msg) => Error::numerical(format!("{msg} at optimizer step {}", state.optimizer.step + 1)),
        other => other,
    })?;
    adamw_update(state.model.params_mut(), &grads, &mut state.optimizer, cfg)?;
    Ok(StepReport {
        loss,
        dropped: batch.dropped.iter().filter(|&&d| d).count(),
    })
}

/// Seeded training-data stream plus the flow-matching RNG.
pub struct Trainer {
    encoder: SynthEncoder,
    target: TargetSpec,
    cfg: TrainConfig,
    data_rng: ChaCha8Rng,
    fm_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(spec: &ModelSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let target = TargetSpec {
            grid: spec.backbone.grid,
            channels: spec.backbone.latent_channels,
            vocab: spec.encoder.vocab,
            sigma: spec.encoder.data_sigma,
        };
        Ok(Self {
            encoder: SynthEncoder::new(spec.encoder.clone())?,
            target,
            data_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3)),
            fm_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4)),
            cfg,
        })
    }

    pub fn encoder(&self) -> &SynthEncoder {
        &self.encoder
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Uniformly random prompts with freshly jittered targets.
    pub fn next_samples(&mut self) -> Result<Vec<(Prompt, Vec<f64>)>> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let prompt = self.encoder.sample_prompt(&mut self.data_rng);
                let jitter = self.data_rng.random::<u64>();
                let x1 = render_target(&prompt, &self.target, jitter)?.latent.into_data();
                Ok((prompt, x1))
            })
            .collect()
    }

    pub fn step<T: Real>(&mut self, state: &mut ModelState<T>) -> Result<StepReport> {
        let samples = self.next_samples()?;
        train_step(state, &self.encoder, &samples, &self.cfg, &mut self.fm_rng)
    }
}

/// Largest model the finite-difference check will agree to run on.
pub const GRADCHECK_PARAM_CAP: usize = 100_000;
/// Uniform jitter added to gate parameters before a gradient check, so the
/// zero-initialized gate heads are not at a symmetric point.
const GATE_JITTER: f64 = 1.0;
/// Uniform jitter added to every other parameter (moves the zero output head).
const TRUNK_JITTER: f64 = 0.1;
/// Central-difference step; balances truncation against loss roundoff.
const GRADCHECK_STEP: f64 = 3e-5;

/// The end-to-end flow-matching loss as a function of all parameters, on a
/// fixed pre-drawn batch, in wide precision.
pub struct FmObjective {
    spec: ModelSpec,
    batch: FmBatch<f64>,
    /// Test hook: negate the analytic gradient of this parameter.
    pub sabotage: Option<String>,
}

impl FmObjective {
    pub fn new(spec: ModelSpec, batch: FmBatch<f64>) -> Self {
        Self {
            spec,
            batch,
            sabotage: None,
        }
    }

    fn model(&self, params: &ParamSet<f64>) -> Result<Model<f64>> {
        Model::from_params(self.spec.clone(), params.clone())
    }
}

impl Differentiable for FmObjective {
    fn loss(&self, params: &ParamSet<f64>) -> Result<f64> {
        let model = self.model(params)?;
        let mut tape = Tape::new();
        let l = fm_loss_on_tape(&model, &mut tape, &self.batch)?;
        Ok(tape.scalar(l))
    }

    fn gradient(&self, params: &ParamSet<f64>) -> Result<Vec<Vec<f64>>> {
        let (_, mut grads) = fm_loss_and_grad(&self.model(params)?, &self.batch)?;
        if let Some(name) = &self.sabotage {
            let id = params
                .find(name)
                .ok_or_else(|| Error::input(format!("no parameter named {name}")))?;
            grads[id.0].iter_mut().for_each(|g| *g = -*g);
        }
        Ok(grads)
    }
}

/// Builds the checked objective and the point to check it at.
///
/// The freshly initialized model is jittered with seeded uniform noise so
/// that zero-initialized tensors (output projection, gate output layers)
/// do not hide whole gradient paths. The batch uses a prompt-drop rate of
/// one half so that both conditional and null banks appear.
pub fn gradcheck_problem(spec: &ModelSpec, seed: u64, batch_size: usize) -> Result<(FmObjective, ParamSet<f64>)> {
    let mut model = Model::<f64>::init(spec.clone(), seed)?;
    let count = model.params().scalar_count();
    if count > GRADCHECK_PARAM_CAP {
        return Err(Error::config(format!(
            "gradient check refuses {count} parameters (cap {GRADCHECK_PARAM_CAP}); use a tiny config"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 20));
    for p in model.params_mut().iter_mut() {
        let scale = if p.name.starts_with("gate.") {
            GATE_JITTER
        } else {
            TRUNK_JITTER
        };
        p.data
            .iter_mut()
            .for_each(|x| *x += scale * rng.random_range(-1.0..1.0));
    }
    let cfg = TrainConfig {
        batch_size,
        prompt_drop: 0.5,
        seed: derive_seed(seed, 21),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(spec, cfg)?;
    let samples = trainer.next_samples()?;
    let batch = draw_fm_batch(&trainer.encoder, &samples, &trainer.cfg, &mut trainer.fm_rng)?;
    Ok((FmObjective::new(spec.clone(), batch), model.into_params()))
}

/// Central-difference check of the end-to-end loss at tolerance `1e-4`.
pub fn fm_gradcheck(spec: &ModelSpec, seed: u64, sabotage: Option<String>) -> Result<GradCheckReport> {
    let (mut objective, params) = gradcheck_problem(spec, seed, 3)?;
    objective.sabotage = sabotage;
    let opts = GradCheckOptions {
        step: GRADCHECK_STEP,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(&objective, &params, &opts)
}

/// `v_u + s·(v_c − v_u)`, returning `v_c` or `v_u` untouched at `s = 1` or `s = 0`.
pub fn guide<T: Real>(v_cond: &[T], v_uncond: &[T], scale: f64) -> Result<Vec<T>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::input("guidance shape mismatch"));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::input(format!("cfg scale {scale} must be finite and >= 0")));
    }
    if scale == 1.0 {
        return Ok(v_cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(v_uncond.to_vec());
    }
    let s = T::lit(scale);
    Ok(v_cond.iter().zip(v_uncond).map(|(&c, &u)| u + s * (c - u)).collect())
}

/// Guided velocity; only the forward passes the scale needs are run.
pub fn cfg_velocity<T: Real>(
    model: &Model<T>,
    x_t: &Tensor<T>,
    t: f64,
    gate_t: f64,
    bank_cond: &LayerBank,
    bank_null: &LayerBank,
    scale: f64,
) -> Result<Vec<T>> {
    let cond = |bank| Ok::<_, Error>(model.forward(x_t, t, bank, Some(gate_t))?.into_data());
    if scale == 1.0 {
        return cond(bank_cond);
    }
    if scale == 0.0 {
        return cond(bank_null);
    }
    guide(&cond(bank_cond)?, &cond(bank_null)?, scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep<T> {
    pub step: usize,
    /// Nominal time `step / steps` of the state `x`.
    pub t: f64,
    pub x: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord<T> {
    pub x0: Vec<T>,
    /// Every pre-step state (`step = 0..steps`) when recording, else empty.
    pub steps: Vec<TrajectoryStep<T>>,
    pub final_latent: Vec<T>,
    pub total_steps: usize,
}

impl<T: Real> TrajectoryRecord<T> {
    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.total_steps
            && self.steps.iter().enumerate().all(|(i, s)| s.step == i)
            && self.steps.first().is_some_and(|s| s.x == self.x0)
    }

    /// `step,t,v0,v1,…` rows for every recorded state plus the final latent.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let width = self.x0.len();
        write!(out, "step,t")?;
        for i in 0..width {
            write!(out, ",v{i}")?;
        }
        writeln!(out)?;
        let final_row = TrajectoryStep {
            step: self.total_steps,
            t: 1.0,
            x: self.final_latent.clone(),
        };
        for s in self.steps.iter().chain(std::iter::once(&final_row)) {
            write!(out, "{},{}", s.step, s.t)?;
            for v in &s.x {
                write!(out, ",{:e}", v.as_f64())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

impl TrajectoryRecord<f64> {
    /// Parses the CSV written by [`TrajectoryRecord::write_csv`].
    pub fn read_csv<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::input(e.to_string()))?
            .ok_or_else(|| Error::input("empty trajectory file"))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[0] != "step" || cols[1] != "t" {
            return Err(Error::input(format!("unexpected trajectory header {header:?}")));
        }
        let width = cols.len() - 2;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::input(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::input(format!("malformed trajectory row {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width + 2 {
                return Err(bad());
            }
            let x = f[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            rows.push(TrajectoryStep {
                step: f[0].parse().map_err(|_| bad())?,
                t: f[1].parse().map_err(|_| bad())?,
                x,
            });
        }
        let last = rows.pop().ok_or_else(|| Error::input("trajectory has no rows"))?;
        let first = rows
            .first()
            .ok_or_else(|| Error::input("trajectory has no intermediate states"))?;
        let rec = Self {
            x0: first.x.clone(),
            total_steps: last.step,
            final_latent: last.x,
            steps: rows,
        };
        if !rec.is_complete() {
            return Err(Error::input("trajectory rows are not a complete 0..steps sequence"));
        }
        Ok(rec)
    }
}

/// Uniform-step Euler integration of `dx/dt = field(x, t)` over `[0, 1]`.
///
/// `field` receives the step index and nominal time; `on_state` sees each
/// pre-step state.
pub fn euler_integrate<T: Real>(
    x0: &[T],
    steps: usize,
    mut field: impl FnMut(&[T], usize, f64) -> Result<Vec<T>>,
    mut on_state: impl FnMut(usize, f64, &[T]),
) -> Result<Vec<T>> {
    if steps == 0 {
        return Err(Error::input("Euler integration needs at least one step"));
    }
    let dt = T::lit(1.0 / steps as f64);
    let mut x = x0.to_vec();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        on_state(k, t, &x);
        let v = field(&x, k, t)?;
        if v.len() != x.len() {
            return Err(Error::input("velocity field changed the state size"));
        }
        for (xi, &vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite state after sampler step {k} (t = {t})"
            )));
        }
    }
    Ok(x)
}

/// Seeded standard-normal starting latent.
pub fn initial_noise<T: Real>(len: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Integrates from seeded noise to a latent for `prompt`.
pub fn sample<T: Real>(
    model: &Model<T>,
    encoder: &SynthEncoder,
    prompt: &Prompt,
    cfg: &SamplerConfig,
) -> Result<TrajectoryRecord<T>> {
    cfg.validate()?;
    if encoder.config() != &model.spec().encoder {
        return Err(Error::input("encoder configuration differs from the model's"));
    }
    let dit = model.config();
    let cond = encoder.encode(prompt)?;
    let null = encoder.null_bank();
    let x0 = initial_noise::<T>(dit.latent_len(), cfg.seed);
    let mut recorded = Vec::new();
    let final_latent = euler_integrate(
        &x0,
        cfg.steps,
        |x, _, t| {
            let gate_t = if cfg.apply_shift { shift_timestep(t) } else { t };
            let x = Tensor::from_rows(dit.tokens(), dit.latent_channels, x.to_vec())?;
            cfg_velocity(model, &x, t, gate_t, &cond, null, cfg.cfg_scale)
        },
        |step, t, x| {
            if cfg.record_trajectory {
                recorded.push(TrajectoryStep { step, t, x: x.to_vec() });
            }
        },
    )?;
    Ok(TrajectoryRecord {
        x0,
        steps: recorded,
        final_latent,
        total_steps: cfg.steps,
    })
}

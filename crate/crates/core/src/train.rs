//! Optimization: cosine-annealed Adam over random aligned patches.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{charbonnier, total_loss, LossConfig};
use crate::model::Jcrnet;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// RNG stream used for patch sampling.
pub const DATA_STREAM: u64 = 2;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Cosine annealing from `eta_max` at step 0 to `eta_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            eta_max: 2e-4,
            eta_min: 1e-6,
            total_steps: 2000,
        }
    }
}

/// Learning rate at `step`; steps past the end clamp to `eta_min`.
pub fn cosine_lr(step: usize, sched: &Schedule) -> f64 {
    if step >= sched.total_steps {
        if step > sched.total_steps && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            warn!(
                "step {step} is past the schedule end {}, using eta_min",
                sched.total_steps
            );
        }
        return sched.eta_min;
    }
    let t = step as f64 / sched.total_steps as f64;
    sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |_: ()| {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape())).expect("unique names");
            }
            s
        };
        AdamState {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One bias-corrected Adam update using the grad slots of `params`.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        if p.grad.is_none() {
            return Err(Error::Training(format!("parameter `{name}` has no gradient")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let m = state.m.get_mut(name)?;
        let v = state.v.get_mut(name)?;
        if m.numel() != grad.len() || v.numel() != grad.len() {
            return Err(Error::Training(format!("moment shape mismatch for `{name}`")));
        }
        for (((w, &g), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g as f64;
            let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * g;
            let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
        p.grad = Some(grad);
        if !p.all_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

/// Global L2 norm of all grad slots, accumulated in parameter order.
pub fn grad_norm(params: &ParamStore<f32>) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs_grad(params: &ParamStore<f32>) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .fold(0.0f64, |acc, &g| acc.max((g as f64).abs()))
}

/// Rescales all grads so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

/// Square patch size and batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch: usize,
    pub batch: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { patch: 64, batch: 2 }
    }
}

/// Draws `spec.batch` aligned crops. Pairs smaller than the patch are skipped.
pub fn sample_patches(data: &Dataset, spec: &PatchSpec, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let usable = data.usable(spec.patch);
    if usable.is_empty() {
        return Err(Error::config(format!(
            "no image pair is at least {0}x{0}",
            spec.patch
        )));
    }
    if spec.batch == 0 {
        return Err(Error::config("batch must be at least 1"));
    }
    let mut lows = Vec::with_capacity(spec.batch);
    let mut highs = Vec::with_capacity(spec.batch);
    for _ in 0..spec.batch {
        let pair = &data.pairs[usable[rng.gen_range(0..usable.len())]];
        let y = rng.gen_range(0..=pair.low.height() - spec.patch);
        let x = rng.gen_range(0..=pair.low.width() - spec.patch);
        lows.push(pair.low.crop_tensor(y, x, spec.patch)?);
        highs.push(pair.high.crop_tensor(y, x, spec.patch)?);
    }
    Ok((Tensor::stack_batch(&lows)?, Tensor::stack_batch(&highs)?))
}

/// Everything that drives a training run besides the data and the architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: Schedule,
    pub patch: PatchSpec,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Weight of the auxiliary loss on the first-stage prediction; `None` disables it.
    pub deep_supervision: Option<f64>,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            schedule: Schedule::default(),
            patch: PatchSpec::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            deep_supervision: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "seed",
        "steps",
        "eta_max",
        "eta_min",
        "patch",
        "batch",
        "epsilon",
        "lambda_edge",
        "clip_norm",
        "deep_supervision",
        "checkpoint_every",
        "adam_eps",
    ];

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("seed", self.seed);
        kv.insert("steps", self.schedule.total_steps);
        kv.insert("eta_max", self.schedule.eta_max);
        kv.insert("eta_min", self.schedule.eta_min);
        kv.insert("patch", self.patch.patch);
        kv.insert("batch", self.patch.batch);
        kv.insert("epsilon", self.loss.epsilon);
        kv.insert("lambda_edge", self.loss.lambda_edge);
        kv.insert("clip_norm", self.clip_norm.unwrap_or(0.0));
        kv.insert("deep_supervision", self.deep_supervision.unwrap_or(0.0));
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("adam_eps", self.adam.eps);
        kv
    }

    /// Reads the training keys of `kv` on top of `self`; a weight of 0 switches an option off.
    pub fn updated_from(mut self, kv: &KvMap) -> Result<Self> {
        macro_rules! read {
            ($key:literal, $slot:expr) => {
                if let Some(v) = kv.parsed($key)? {
                    $slot = v;
                }
            };
        }
        read!("seed", self.seed);
        read!("steps", self.schedule.total_steps);
        read!("eta_max", self.schedule.eta_max);
        read!("eta_min", self.schedule.eta_min);
        read!("patch", self.patch.patch);
        read!("batch", self.patch.batch);
        read!("epsilon", self.loss.epsilon);
        read!("lambda_edge", self.loss.lambda_edge);
        read!("checkpoint_every", self.checkpoint_every);
        read!("adam_eps", self.adam.eps);
        if let Some(v) = kv.parsed::<f64>("clip_norm")? {
            self.clip_norm = (v > 0.0).then_some(v);
        }
        if let Some(v) = kv.parsed::<f64>("deep_supervision")? {
            self.deep_supervision = (v > 0.0).then_some(v);
        }
        self.loss.validate()?;
        Ok(self)
    }
}

/// Optimizer and sampler state needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Word position of the patch sampler's generator.
    pub rng_word_pos: u128,
    pub adam: AdamState,
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl TraceEntry {
    /// `step,lr,loss` with enough digits to round-trip.
    pub fn render(&self) -> String {
        format!("{},{:e},{:e}", self.step, self.lr, self.loss)
    }
}

/// Stateful training loop over one model and dataset.
pub struct Trainer<'a> {
    pub model: &'a Jcrnet,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub state: TrainState,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Jcrnet, params: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        model.registry().validate(&params)?;
        let state = TrainState {
            step: 0,
            schedule: cfg.schedule,
            seed: cfg.seed,
            rng_word_pos: 0,
            adam: AdamState::new(&params),
        };
        Self::resume(model, params, state, cfg)
    }

    /// Continues from a saved state. Schedule and seed come from the state.
    pub fn resume(model: &'a Jcrnet, params: ParamStore<f32>, state: TrainState, mut cfg: TrainConfig) -> Result<Self> {
        model.registry().validate(&params)?;
        model.registry().validate(&state.adam.m)?;
        model.registry().validate(&state.adam.v)?;
        if state.step > state.schedule.total_steps {
            return Err(Error::Training(format!(
                "state step {} past schedule end {}",
                state.step, state.schedule.total_steps
            )));
        }
        cfg.schedule = state.schedule;
        cfg.seed = state.seed;
        cfg.loss.validate()?;
        if cfg.patch.patch % model.cfg.size_multiple() != 0 || cfg.patch.patch == 0 {
            return Err(Error::config(format!(
                "patch {} must be a positive multiple of {}",
                cfg.patch.patch,
                model.cfg.size_multiple()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(DATA_STREAM);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Trainer {
            model,
            cfg,
            params,
            state,
            rng,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.cfg.schedule.total_steps
    }

    /// Loss and gradients for one batch; grads land in the parameter grad slots.
    pub fn loss_and_grads(&mut self, low: Tensor<f32>, high: Tensor<f32>) -> Result<f64> {
        self.params.zero_grads();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params)?;
        let x = tape.constant(low)?;
        let gt = tape.constant(high)?;
        let out = self.model.forward(&ctx, x)?;
        let mut loss = total_loss(out.y, gt, &self.cfg.loss)?;
        if let Some(w) = self.cfg.deep_supervision {
            let aux = charbonnier(out.aux_pred, gt, self.cfg.loss.epsilon)?;
            loss = loss.add(aux.affine(w, 0.0)?)?;
        }
        let value = loss.value().item() as f64;
        let grads = loss.backward()?;
        self.params.absorb_grads(&tape, &grads)?;
        Ok(value)
    }

    /// Logs every pair the sampler will never draw.
    pub fn report_data(&self, data: &Dataset) -> usize {
        data.report_undersized(self.cfg.patch.patch)
    }

    /// Runs one optimization step.
    pub fn step(&mut self, data: &Dataset) -> Result<TraceEntry> {
        let step = self.state.step;
        let lr = cosine_lr(step, &self.cfg.schedule);
        let (low, high) = sample_patches(data, &self.cfg.patch, &mut self.rng)?;
        let diverged = |trainer: &Self, loss: f64| Error::Diverged {
            step,
            loss,
            lr,
            max_grad: max_abs_grad(&trainer.params),
        };
        let loss = match self.loss_and_grads(low, high) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => return Err(diverged(self, v)),
            Err(Error::NonFinite { .. }) => return Err(diverged(self, f64::NAN)),
            Err(e) => return Err(e),
        };
        if let Some(max) = self.cfg.clip_norm {
            let norm = clip_grad_norm(&mut self.params, max);
            if !norm.is_finite() {
                return Err(diverged(self, loss));
            }
        }
        adam_step(&mut self.params, &mut self.state.adam, &self.cfg.adam, lr).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(self, loss),
            other => other,
        })?;
        self.state.step += 1;
        self.state.rng_word_pos = self.rng.get_word_pos();
        Ok(TraceEntry { step, lr, loss })
    }

    /// Steps until the schedule ends. `on_step` sees every trace entry and the
    /// trainer itself, e.g. to write periodic checkpoints.
    pub fn run<F>(&mut self, data: &Dataset, mut on_step: F) -> Result<Vec<TraceEntry>>
    where
        F: FnMut(&TraceEntry, &Self) -> Result<()>,
    {
        self.report_data(data);
        let mut trace = Vec::with_capacity(self.cfg.schedule.total_steps - self.state.step);
        while !self.finished() {
            let entry = self.step(data)?;
            if entry.step % 100 == 0 {
                info!("step {} lr {:.3e} loss {:.5}", entry.step, entry.lr, entry.loss);
            }
            on_step(&entry, self)?;
            trace.push(entry);
        }
        Ok(trace)
    }

    /// Whether a checkpoint is due after the step that produced `entry`.
    pub fn checkpoint_due(&self, entry: &TraceEntry) -> bool {
        let every = self.cfg.checkpoint_every;
        every > 0 && (entry.step + 1) % every == 0
    }
}

/// Trains freshly initialized parameters for `cfg.schedule.total_steps` steps.
pub fn train_loop(model: &Jcrnet, data: &Dataset, cfg: TrainConfig) -> Result<(ParamStore<f32>, Vec<TraceEntry>)> {
    let params = model.init_params(cfg.seed);
    let mut trainer = Trainer::new(model, params, cfg)?;
    let trace = trainer.run(data, |_, _| Ok(()))?;
    Ok((trainer.params, trace))
}

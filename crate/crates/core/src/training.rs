//! REINFORCE training of the construction policy.
//!
//! Each step samples one tour per instance at the configured temperature,
//! weights the tour's log-probability by the clipped advantage
//! `baseline - length`, and applies one Adam update. The baseline is a scalar
//! exponential moving average of sampled tour lengths, seeded by a warm-up
//! pass of greedy rollouts.
//!
//! All randomness is keyed by `(seed, step, instance)` through [`SeedTree`],
//! so a run resumed from a checkpoint replays exactly the batches and samples
//! the uninterrupted run would have drawn.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Container, SeedTree, Tape, Tensor};
use crate::policy::{DecodeMode, Policy, PolicyConfig, CHECKPOINT_KIND};
use crate::tsp::{generate, generate_batch, held_karp, nearest_neighbor, two_opt, Distribution, TspInstance, HELD_KARP_MAX_N};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Nodes per training instance.
    pub n: usize,
    pub distribution: Distribution,
    pub batch_size: usize,
    pub steps: u64,
    /// Greedy rollouts used to initialise the baseline. With 0 the first
    /// batch's mean sampled length is used instead.
    pub warmup_rollouts: usize,
    /// Sampling temperature, constant over the run.
    pub temperature: f64,
    /// Advantages are clipped to `[-c, c]`; `None` disables clipping.
    pub advantage_clip: Option<f64>,
    pub baseline_decay: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_instances: usize,
    pub eval_seed: u64,
    pub eval_every: u64,
    pub log_every: u64,
    /// Write the checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 20,
            distribution: Distribution::Uniform,
            batch_size: 128,
            steps: 20_000,
            warmup_rollouts: 1000,
            temperature: 1.0,
            advantage_clip: Some(10.0),
            baseline_decay: 0.99,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            seed: 0,
            eval_instances: 500,
            eval_seed: 0x5eed_e7a1,
            eval_every: 500,
            log_every: 10,
            checkpoint_every: 1000,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.n < 2 || self.batch_size == 0 {
            return Err(Error::Config("training needs n >= 2 and a nonempty batch".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Some(c) = self.advantage_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("advantage clip must be positive, got {c}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        if !(self.baseline_decay > 0.0 && self.baseline_decay < 1.0) {
            return Err(Error::Config(format!("baseline decay must lie in (0, 1), got {}", self.baseline_decay)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.eval_instances == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::Config("eval_instances, eval_every and log_every must be positive".into()));
        }
        Ok(())
    }

    fn step_seeds(&self, step: u64) -> SeedTree {
        SeedTree::new(self.seed).named("train").child(step)
    }

    /// Training batch for `step` (1-based).
    pub fn batch(&self, step: u64) -> Result<Vec<TspInstance>> {
        let seeds = self.step_seeds(step);
        (0..self.batch_size)
            .map(|i| generate(self.distribution, self.n, seeds.child(i as u64).seed()))
            .collect()
    }

    /// Fixed held-out instances used for periodic evaluation.
    pub fn eval_set(&self) -> Result<Vec<TspInstance>> {
        generate_batch(self.distribution, self.n, self.eval_seed, self.eval_instances)
    }
}

/// Scalar moving-average baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub value: f64,
    pub initialized: bool,
}

impl BaselineState {
    pub fn uninitialized() -> Self {
        BaselineState { value: 0.0, initialized: false }
    }

    pub fn update(&mut self, decay: f64, batch_mean: f64) {
        if self.initialized {
            self.value = decay * self.value + (1.0 - decay) * batch_mean;
        } else {
            self.value = batch_mean;
            self.initialized = true;
        }
    }
}

/// Mean greedy tour length over `instances`.
pub fn mean_greedy_length(policy: &Policy, instances: &[TspInstance]) -> Result<f64> {
    let lengths: Vec<f64> = instances
        .par_iter()
        .map(|inst| policy.greedy(inst).map(|t| t.length))
        .collect::<Result<_>>()?;
    Ok(lengths.iter().sum::<f64>() / lengths.len().max(1) as f64)
}

/// Baseline from `warmup_rollouts` greedy rollouts on fresh instances.
/// Does not touch the parameters.
pub fn warmup(policy: &Policy, config: &TrainConfig) -> Result<BaselineState> {
    if config.warmup_rollouts == 0 {
        return Ok(BaselineState::uninitialized());
    }
    let seeds = SeedTree::new(config.seed).named("warmup");
    let instances: Vec<TspInstance> = (0..config.warmup_rollouts)
        .map(|i| generate(config.distribution, config.n, seeds.child(i as u64).seed()))
        .collect::<Result<_>>()?;
    let value = mean_greedy_length(policy, &instances)?;
    Ok(BaselineState { value, initialized: true })
}

pub fn clip_advantage(a: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) => a.clamp(-c, c),
        None => a,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub mean_length: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-instance result of a sampled rollout and its weighted gradient.
struct Sampled {
    length: f64,
    log_prob: f64,
    weight: f64,
    grads: Option<Vec<Tensor>>,
}

fn sample_one(
    policy: &Policy,
    instance: &TspInstance,
    seeds: SeedTree,
    temperature: f64,
    weight_of: &(dyn Fn(f64) -> f64 + Sync),
    with_grad: bool,
) -> Result<Sampled> {
    let mut rng = seeds.named("sample").rng();
    let mut tape = Tape::new();
    let p = policy.register(&mut tape, with_grad);
    let traj = policy.trajectory_on_tape(&mut tape, &p, instance, DecodeMode::Sample { temperature, rng: &mut rng })?;
    let length = crate::tsp::tour_length(instance, &traj.order)?;
    let log_prob = tape.scalar(traj.log_prob);
    let weight = weight_of(length);
    let grads = if with_grad && weight != 0.0 {
        let g = tape.backward(traj.log_prob)?;
        Some(
            p.iter()
                .map(|&v| {
                    let mut t = g.wrt_or_zeros(v);
                    t.data_mut().iter_mut().for_each(|x| *x *= weight);
                    t
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Sampled { length, log_prob, weight, grads })
}

/// Runs `f` over the batch in parallel, in chunks, and folds the results in
/// index order so the floating-point sums do not depend on scheduling.
fn ordered_chunks<T: Send>(
    count: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
    mut fold: impl FnMut(T),
) -> Result<()> {
    let chunk = (rayon::current_num_threads() * 4).max(8);
    let mut start = 0;
    while start < count {
        let end = (start + chunk).min(count);
        let part: Vec<T> = (start..end).into_par_iter().map(&f).collect::<Result<_>>()?;
        part.into_iter().for_each(&mut fold);
        start = end;
    }
    Ok(())
}

/// Gradient of the REINFORCE loss for one batch without applying it.
pub(crate) struct BatchGradient {
    pub loss: f64,
    pub lengths: Vec<f64>,
    pub grads: Vec<Tensor>,
}

pub(crate) fn batch_gradient(
    policy: &Policy,
    baseline: &mut BaselineState,
    instances: &[TspInstance],
    config: &TrainConfig,
    seeds: SeedTree,
) -> Result<BatchGradient> {
    let b = instances.len();
    if b == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    if !baseline.initialized {
        // fallback: first batch mean; the resampled tours are identical
        let mut total = 0.0;
        ordered_chunks(
            b,
            |i| sample_one(policy, &instances[i], seeds.child(i as u64), config.temperature, &|_| 0.0, false),
            |s| total += s.length,
        )?;
        baseline.update(config.baseline_decay, total / b as f64);
    }
    let base = baseline.value;
    let clip = config.advantage_clip;
    let weight_of = move |length: f64| -clip_advantage(base - length, clip) / b as f64;

    let mut grads: Vec<Tensor> = policy.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    let mut lengths = Vec::with_capacity(b);
    ordered_chunks(
        b,
        |i| sample_one(policy, &instances[i], seeds.child(i as u64), config.temperature, &weight_of, true),
        |s| {
            loss += s.weight * s.log_prob;
            lengths.push(s.length);
            if let Some(gs) = s.grads {
                for (acc, g) in grads.iter_mut().zip(gs) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x);
                }
            }
        },
    )?;
    Ok(BatchGradient { loss, lengths, grads })
}

/// One REINFORCE update: sample, weight by clipped advantage, Adam step,
/// then move the baseline toward the batch mean.
pub fn reinforce_step(
    policy: &mut Policy,
    adam: &mut AdamState,
    baseline: &mut BaselineState,
    instances: &[TspInstance],
    config: &TrainConfig,
    seeds: SeedTree,
) -> Result<StepOutcome> {
    let BatchGradient { loss, lengths, mut grads } = batch_gradient(policy, baseline, instances, config, seeds)?;
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} (gradient norm {norm}) for batch seed {:#x}",
            seeds.seed()
        )));
    }
    if let Some(c) = config.grad_clip {
        if norm > c {
            let s = c / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
        }
    }
    adam.update(policy.params_mut(), &grads)?;
    let mean_length = lengths.iter().sum::<f64>() / lengths.len() as f64;
    baseline.update(config.baseline_decay, mean_length);
    Ok(StepOutcome { loss, mean_length, grad_norm: norm })
}

/// Everything needed to continue a run: parameters, optimiser moments,
/// baseline and the last completed step.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub policy: Policy,
    pub adam: AdamState,
    pub baseline: BaselineState,
    pub step: u64,
}

impl TrainingState {
    /// Fresh policy and optimiser with the warm-up baseline.
    pub fn start(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let policy = Policy::init(config.policy, SeedTree::new(config.seed).named("policy").seed())?;
        let adam = AdamState::new(config.adam, policy.params());
        let baseline = warmup(&policy, config)?;
        Ok(TrainingState { policy, adam, baseline, step: 0 })
    }

    /// Saves a checkpoint that [`Policy::load`] also accepts.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = self.policy.to_container();
        c.meta["training"] = serde_json::json!({
            "step": self.step,
            "baseline": self.baseline,
            "adam": self.adam.config,
            "adam_step": self.adam.step,
        });
        for (name, (m, v)) in self.policy.param_names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            c.push(format!("adam.m.{name}"), m.clone());
            c.push(format!("adam.v.{name}"), v.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let meta = c.meta["training"].clone();
        if meta.is_null() {
            return Err(Error::Format(format!("{} holds no training state", path.display())));
        }
        let policy = Policy::from_container(&mut c)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("training state lacks `{k}`")));
        let parse = |e: serde_json::Error| Error::Format(format!("training state: {e}"));
        let step: u64 = serde_json::from_value(field("step")?).map_err(parse)?;
        let baseline: BaselineState = serde_json::from_value(field("baseline")?).map_err(parse)?;
        let config: AdamConfig = serde_json::from_value(field("adam")?).map_err(parse)?;
        let adam_step: u64 = serde_json::from_value(field("adam_step")?).map_err(parse)?;
        let mut adam = AdamState::new(config, policy.params());
        adam.step = adam_step;
        for (i, name) in policy.param_names().iter().enumerate() {
            let shape = policy.params()[i].shape().to_vec();
            adam.m[i] = c.take(&format!("adam.m.{name}"), &shape)?;
            adam.v[i] = c.take(&format!("adam.v.{name}"), &shape)?;
        }
        Ok(TrainingState { policy, adam, baseline, step })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: Option<f64>,
    pub baseline: f64,
    pub eval_mean_length: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub baseline: f64,
    /// Greedy mean on the eval set before the first update of this run.
    pub initial_eval_mean_length: f64,
    pub final_eval_mean_length: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Full training run, optionally resumed from a checkpoint written by an
/// earlier run with the same config. `on_record` sees every log line.
pub fn train(
    config: &TrainConfig,
    paths: &TrainPaths,
    resume: Option<&Path>,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<TrainReport> {
    config.validate()?;
    let started = Instant::now();
    let eval_set = config.eval_set()?;
    let (mut state, log_file) = match resume {
        Some(path) => {
            let state = TrainingState::load(path)?;
            if state.policy.config() != &config.policy {
                return Err(Error::Config("resumed checkpoint was trained with a different policy config".into()));
            }
            let f = OpenOptions::new().append(true).create(true).open(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
            (state, f)
        }
        None => {
            if let Some(dir) = paths.log.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            (TrainingState::start(config)?, File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?)
        }
    };
    let mut log = BufWriter::new(log_file);
    let mut emit = |rec: LogRecord, log: &mut BufWriter<File>| -> Result<()> {
        let line = serde_json::to_string(&rec).expect("log record serialises");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&paths.log, e))?;
        on_record(&rec);
        Ok(())
    };

    let initial = mean_greedy_length(&state.policy, &eval_set)?;
    let mut last_eval = initial;
    if state.step == 0 {
        let rec = LogRecord {
            step: 0,
            loss: None,
            baseline: state.baseline.value,
            eval_mean_length: Some(initial),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        emit(rec, &mut log)?;
    }

    while state.step < config.steps {
        let step = state.step + 1;
        let batch = config.batch(step)?;
        let out = reinforce_step(
            &mut state.policy,
            &mut state.adam,
            &mut state.baseline,
            &batch,
            config,
            config.step_seeds(step),
        )?;
        state.step = step;
        let eval = if step % config.eval_every == 0 || step == config.steps {
            last_eval = mean_greedy_length(&state.policy, &eval_set)?;
            Some(last_eval)
        } else {
            None
        };
        if eval.is_some() || step % config.log_every == 0 {
            let rec = LogRecord {
                step,
                loss: Some(out.loss),
                baseline: state.baseline.value,
                eval_mean_length: eval,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            emit(rec, &mut log)?;
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            state.save(&paths.checkpoint)?;
        }
    }
    state.save(&paths.checkpoint)?;
    Ok(TrainReport {
        steps: state.step,
        baseline: state.baseline.value,
        initial_eval_mean_length: initial,
        final_eval_mean_length: last_eval,
        checkpoint: paths.checkpoint.clone(),
        log: paths.log.clone(),
    })
}

/// Greedy policy tours against the reference solvers on a fixed instance set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub instances: usize,
    pub n: usize,
    pub policy_mean: f64,
    pub nearest_neighbor_mean: f64,
    pub two_opt_mean: f64,
    /// Held–Karp optimum, only for `n <= 16`.
    pub optimal_mean: Option<f64>,
    /// Mean per-instance `(policy - optimal) / optimal`.
    pub mean_gap_vs_optimal: Option<f64>,
    pub mean_gap_vs_nearest_neighbor: f64,
    pub mean_gap_vs_two_opt: f64,
}

pub fn evaluate(policy: &Policy, instances: &[TspInstance]) -> Result<EvalReport> {
    let first = instances.first().ok_or_else(|| Error::Parameter("empty evaluation set".into()))?;
    let n = first.n;
    if instances.iter().any(|i| i.n != n) {
        return Err(Error::Parameter("evaluation instances differ in size".into()));
    }
    let exact = n <= HELD_KARP_MAX_N;
    let rows: Vec<[f64; 4]> = instances
        .par_iter()
        .map(|inst| {
            let pol = policy.greedy(inst)?.length;
            let nn = nearest_neighbor(inst, 0)?;
            let opt2 = two_opt(inst, &nn)?.length;
            let hk = if exact { held_karp(inst)?.length } else { f64::NAN };
            Ok([pol, nn.length, opt2, hk])
        })
        .collect::<Result<_>>()?;
    let count = rows.len() as f64;
    let mean = |f: &dyn Fn(&[f64; 4]) -> f64| rows.iter().map(f).sum::<f64>() / count;
    Ok(EvalReport {
        instances: rows.len(),
        n,
        policy_mean: mean(&|r| r[0]),
        nearest_neighbor_mean: mean(&|r| r[1]),
        two_opt_mean: mean(&|r| r[2]),
        optimal_mean: exact.then(|| mean(&|r| r[3])),
        mean_gap_vs_optimal: exact.then(|| mean(&|r| (r[0] - r[3]) / r[3])),
        mean_gap_vs_nearest_neighbor: mean(&|r| (r[0] - r[1]) / r[1]),
        mean_gap_vs_two_opt: mean(&|r| (r[0] - r[2]) / r[2]),
    })
}

/// Reads a checkpoint's policy, accepting plain policy files and training
/// states alike.
pub fn load_policy(path: &Path) -> Result<Policy> {
    let mut c = Container::load(path)?;
    if c.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("{} is not a policy checkpoint", path.display())));
    }
    Policy::from_container(&mut c)
}

//! The two-step training loop: clipped policy improvement on environment
//! rewards, then clipped guidance descent on MMD-shaped rewards, then the
//! preferred-set update.

use std::ops::ControlFlow;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{
    update_preferred_set, Comparator, MislabelConfig, OracleComparator, PreferredSet, UpdateReport, WorkloadSchedule,
};
use crate::config::{AnnotatorMode, TrainConfig};
use crate::env::{Env, NodeSpec};
use crate::error::{Error, Result};
use crate::mmd::{dist_to_set, policy_mmd_metric, DistanceCache, Kernel};
use crate::net::{adam_step, init_params, AdamState, Head, MlpSpec, NetCheckpoint, ParamVector, PolicyBatch, ValueBatch};
use crate::trajectory::{annotate_gae, collect, discounted_suffix_sums, normalize, rollout, OnPolicyBuffer, Trajectory};

/// Policy and value networks with one optimizer state per objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub policy_spec: MlpSpec,
    pub value_spec: MlpSpec,
    pub policy: ParamVector,
    pub value: ParamVector,
    pub pi_adam: AdamState,
    pub pg_adam: AdamState,
    pub value_adam: AdamState,
}

impl Learner {
    pub fn new(policy_spec: MlpSpec, value_spec: MlpSpec, init_std: f64, seed: u64) -> Self {
        let mut policy = init_params(&policy_spec, seed);
        for l in policy.log_std_mut() {
            *l = init_std.ln();
        }
        let value = init_params(&value_spec, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Self {
            pi_adam: AdamState::for_params(&policy),
            pg_adam: AdamState::for_params(&policy),
            value_adam: AdamState::for_params(&value),
            policy_spec,
            value_spec,
            policy,
            value,
        }
    }

    pub fn for_env(env: &Env, hidden: &[usize], init_std: f64, seed: u64) -> Result<Self> {
        let p = MlpSpec::with_hidden(env.obs_dim(), hidden, env.action_dim(), env.policy_head())?;
        let v = MlpSpec::with_hidden(env.obs_dim(), hidden, 1, Head::LinearScalar)?;
        Ok(Self::new(p, v, init_std, seed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub epsilon: f64,
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    /// Clipped surrogate at the start of the first epoch.
    pub initial: f64,
    /// Clipped surrogate at the start of the last epoch.
    pub last: f64,
    /// Fraction of samples whose clip was active in the last epoch.
    pub clip_fraction: f64,
}

/// Per-sample weights turning `mean(w * log pi)` into the gradient of the
/// clipped surrogate `mean(min(r A, clip(r, 1 - eps, 1 + eps) A))`.
/// Returns `(weights, surrogate, clip_fraction)`.
pub fn clipped_weights(log_probs: &[f64], behavior: &[f64], adv: &[f64], epsilon: f64) -> (Vec<f64>, f64, f64) {
    let n = adv.len() as f64;
    let mut weights = Vec::with_capacity(adv.len());
    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    for ((&lp, &lb), &a) in log_probs.iter().zip(behavior).zip(adv) {
        let r = (lp - lb).exp();
        let unclipped = r * a;
        let bounded = r.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
        if unclipped <= bounded {
            surrogate += unclipped;
            weights.push(unclipped);
        } else {
            surrogate += bounded;
            weights.push(0.0);
            clipped += 1;
        }
    }
    (weights, surrogate / n, clipped as f64 / n)
}

/// Runs `epochs` full-batch Adam ascent steps on the clipped surrogate.
pub fn clipped_ascent(
    params: &mut ParamVector,
    adam: &mut AdamState,
    batch: &PolicyBatch,
    behavior: &[f64],
    adv: &[f64],
    hp: &ClipParams,
) -> Result<SurrogateStats> {
    let mut stats = SurrogateStats::default();
    for epoch in 0..hp.epochs {
        let eval = batch.evaluate(params)?;
        let (weights, surrogate, clip_fraction) = clipped_weights(&eval.log_probs, behavior, adv, hp.epsilon);
        if !surrogate.is_finite() {
            return Err(Error::NonFinite("clipped surrogate"));
        }
        if epoch == 0 {
            stats.initial = surrogate;
        }
        stats.last = surrogate;
        stats.clip_fraction = clip_fraction;
        let mut grad = eval.grad(params, &weights)?;
        for g in &mut grad.values {
            *g = -*g;
        }
        adam_step(params, &grad, adam, hp.lr)?;
    }
    Ok(stats)
}

fn policy_batch(learner: &Learner, buffer: &OnPolicyBuffer) -> Result<PolicyBatch> {
    PolicyBatch::new(
        &learner.policy_spec,
        buffer.transitions().map(|t| t.obs.as_slice()),
        buffer.transitions().map(|t| t.action.clone()).collect(),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PiStats {
    pub surrogate: SurrogateStats,
    pub value_loss: f64,
}

impl PiStats {
    /// Negated clipped surrogate at the last epoch.
    pub fn loss(&self) -> f64 {
        -self.surrogate.last
    }
}

/// Policy improvement on environment rewards. The buffer must carry GAE
/// advantages and value targets.
pub fn pi_step(learner: &mut Learner, buffer: &OnPolicyBuffer, policy: &ClipParams, value_lr: f64) -> Result<PiStats> {
    let mut adv = Vec::with_capacity(buffer.steps());
    let mut targets = Vec::with_capacity(buffer.steps());
    for t in &buffer.trajectories {
        let (Some(a), Some(v)) = (&t.advantages, &t.value_targets) else {
            return Err(Error::config("buffer", "advantages missing; run annotate_gae first"));
        };
        adv.extend_from_slice(a);
        targets.extend_from_slice(v);
    }
    let behavior: Vec<f64> = buffer.transitions().map(|t| t.logp_behavior).collect();
    let batch = policy_batch(learner, buffer)?;
    let surrogate = clipped_ascent(&mut learner.policy, &mut learner.pi_adam, &batch, &behavior, &adv, policy)?;

    let vbatch = ValueBatch::new(
        &learner.value_spec,
        buffer.transitions().map(|t| t.obs.as_slice()),
        targets.into_iter(),
    )?;
    let mut value_loss = 0.0;
    for _ in 0..policy.epochs {
        let (loss, grad) = vbatch.mse_grad(&learner.value)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("value loss"));
        }
        value_loss = loss;
        adam_step(&mut learner.value, &grad, &mut learner.value_adam, value_lr)?;
    }
    Ok(PiStats { surrogate, value_loss })
}

/// Sets `guidance_distance = dist(tau, P)` on every trajectory; that distance is
/// the guidance reward of each of the trajectory's steps. Returns false (and
/// leaves the buffer untouched) when `P` is empty.
pub fn guidance_rewards(
    buffer: &mut OnPolicyBuffer,
    set: &PreferredSet,
    kernel: &Kernel,
    cache: &mut DistanceCache,
) -> Result<bool> {
    if set.is_empty() {
        return Ok(false);
    }
    for t in &mut buffer.trajectories {
        t.guidance_distance = Some(dist_to_set(t, set, kernel, cache)?);
    }
    Ok(true)
}

/// Per-step guidance rewards, flattened in buffer order.
pub fn step_guidance_rewards(buffer: &OnPolicyBuffer) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(buffer.steps());
    for t in &buffer.trajectories {
        let d = t.guidance_distance.ok_or(Error::EmptyPreferredSet)?;
        out.extend(std::iter::repeat_n(d, t.len()));
    }
    Ok(out)
}

/// Mean guidance reward over all sampled steps.
pub fn occupancy_weighted_guidance(buffer: &OnPolicyBuffer) -> Result<f64> {
    let r = step_guidance_rewards(buffer)?;
    if r.is_empty() {
        return Err(Error::EmptyInput("buffer"));
    }
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Discounted guidance returns `Q_g`, centred by the batch mean at the same
/// time step and then normalized over the batch. Because every step of a
/// trajectory shares one reward, the uncentred return mostly encodes the time
/// left in the episode; the per-step baseline removes that without biasing
/// the gradient.
pub fn guidance_q(buffer: &OnPolicyBuffer, gamma: f64) -> Result<Vec<f64>> {
    let mut per_traj = Vec::with_capacity(buffer.trajectories.len());
    for t in &buffer.trajectories {
        let d = t.guidance_distance.ok_or(Error::EmptyPreferredSet)?;
        per_traj.push(discounted_suffix_sums(&vec![d; t.len()], gamma));
    }
    let horizon = per_traj.iter().map(Vec::len).max().unwrap_or(0);
    let mut sum = vec![0.0; horizon];
    let mut count = vec![0usize; horizon];
    for q in &per_traj {
        for (t, v) in q.iter().enumerate() {
            sum[t] += v;
            count[t] += 1;
        }
    }
    let mut out = Vec::with_capacity(buffer.steps());
    for q in &per_traj {
        out.extend(q.iter().enumerate().map(|(t, v)| v - sum[t] / count[t] as f64));
    }
    normalize(&mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PgStats {
    /// Mean guidance reward over sampled steps (the quantity being minimized).
    pub objective: f64,
    pub surrogate: SurrogateStats,
}

/// Guidance step: clipped descent on the normalized guidance return, with the
/// trust region centred on the current policy.
pub fn pg_step(learner: &mut Learner, buffer: &OnPolicyBuffer, hp: &ClipParams, gamma: f64, coef: f64) -> Result<PgStats> {
    let objective = occupancy_weighted_guidance(buffer)?;
    if coef == 0.0 {
        return Ok(PgStats {
            objective,
            surrogate: SurrogateStats::default(),
        });
    }
    let q = guidance_q(buffer, gamma)?;
    let adv: Vec<f64> = q.iter().map(|v| -coef * v).collect();
    let batch = policy_batch(learner, buffer)?;
    let behavior = batch.evaluate(&learner.policy)?.log_probs;
    let surrogate = clipped_ascent(&mut learner.policy, &mut learner.pg_adam, &batch, &behavior, &adv, hp)?;
    Ok(PgStats { objective, surrogate })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub avg_return: f64,
    pub mean_length: f64,
}

/// Stochastic rollouts of the current policy.
pub fn evaluate(params: &ParamVector, spec: &MlpSpec, env: &mut Env, episodes: usize, rng: &mut ChaCha8Rng) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::EmptyInput("evaluation episodes"));
    }
    let mut successes = 0usize;
    let mut ret = 0.0;
    let mut len = 0usize;
    for _ in 0..episodes {
        let t = rollout(params, spec, env, rng, u64::MAX, 0)?;
        successes += t.success as usize;
        ret += t.return_undiscounted;
        len += t.len();
    }
    let n = episodes as f64;
    Ok(EvalResult {
        success_rate: successes as f64 / n,
        avg_return: ret / n,
        mean_length: len as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub avg_return: f64,
    pub success_rate: f64,
    pub mean_length: f64,
    pub mmd_metric: Option<f64>,
    pub pi_loss: Option<f64>,
    pub pg_obj: Option<f64>,
    pub p_size: usize,
    pub p_version: u64,
    /// Success rate of the trajectories sampled for training.
    pub train_success_rate: f64,
    pub comparisons: usize,
    pub annotated: usize,
    pub p_min_nodes: Option<usize>,
}

/// What the preferred-set update sees in one iteration.
pub struct PreferenceRequest<'a> {
    pub iteration: usize,
    /// Candidates surfaced by the workload schedule.
    pub candidates: &'a [Trajectory],
    pub set: &'a mut PreferredSet,
    pub nodes: &'a NodeSpec,
    /// Scripted comparator for sources that fall back to it.
    pub fallback: &'a mut dyn Comparator,
}

/// Supplies judgments for the preferred-set update in human mode.
pub trait PreferenceSource {
    fn update(&mut self, req: PreferenceRequest<'_>) -> Result<UpdateReport>;
}

/// Everything produced by one iteration.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub metrics: IterationMetrics,
    pub buffer: OnPolicyBuffer,
    pub update: Option<UpdateReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngStreams {
    rollout: ChaCha8Rng,
    eval: ChaCha8Rng,
    mislabel: ChaCha8Rng,
    bandwidth: ChaCha8Rng,
}

impl RngStreams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            rollout: stream(1),
            eval: stream(2),
            mislabel: stream(3),
            bandwidth: stream(4),
        }
    }
}

fn init_seed(seed: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(5);
    r.next_u64()
}

/// Full training state; serializable for bit-exact resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub next_id: u64,
    pub policy: NetCheckpoint,
    pub pg_adam: AdamState,
    pub value: NetCheckpoint,
    pub preferred: PreferredSet,
    pub kernel: Option<Kernel>,
    rngs: RngStreams,
}

pub struct Trainer {
    cfg: TrainConfig,
    env: Env,
    eval_env: Env,
    nodes: NodeSpec,
    learner: Learner,
    preferred: PreferredSet,
    kernel: Option<Kernel>,
    cache: DistanceCache,
    rngs: RngStreams,
    next_id: u64,
    iteration: usize,
    schedule: WorkloadSchedule,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.env.build()?;
        let learner = Learner::for_env(&env, &cfg.hidden_sizes, cfg.init_std, init_seed(cfg.seed))?;
        Ok(Self {
            nodes: env.nodes(),
            eval_env: env.clone(),
            env,
            learner,
            preferred: PreferredSet::new(cfg.preferred_capacity),
            kernel: None,
            cache: DistanceCache::new(),
            rngs: RngStreams::new(cfg.seed),
            next_id: 0,
            iteration: 0,
            schedule: WorkloadSchedule {
                warmup: cfg.workload_warmup,
            },
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn learner_mut(&mut self) -> &mut Learner {
        &mut self.learner
    }

    pub fn preferred(&self) -> &PreferredSet {
        &self.preferred
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        self.kernel.as_ref()
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn nodes(&self) -> &NodeSpec {
        &self.nodes
    }

    /// Evaluates the current policy on a fresh environment with its own seed,
    /// leaving the training streams untouched.
    pub fn evaluate_with_seed(&self, episodes: usize, seed: u64) -> Result<EvalResult> {
        let mut env = self.cfg.env.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        evaluate(&self.learner.policy, &self.learner.policy_spec, &mut env, episodes, &mut rng)
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint {
        TrainerCheckpoint {
            config: self.cfg.clone(),
            iteration: self.iteration,
            next_id: self.next_id,
            policy: NetCheckpoint::new(&self.learner.policy_spec, &self.learner.policy, &self.learner.pi_adam),
            pg_adam: self.learner.pg_adam.clone(),
            value: NetCheckpoint::new(&self.learner.value_spec, &self.learner.value, &self.learner.value_adam),
            preferred: self.preferred.clone(),
            kernel: self.kernel.clone(),
            rngs: self.rngs.clone(),
        }
    }

    pub fn restore(ck: TrainerCheckpoint) -> Result<Self> {
        let mut t = Self::new(ck.config)?;
        t.learner = Learner {
            policy: ck.policy.params()?,
            value: ck.value.params()?,
            policy_spec: ck.policy.spec,
            value_spec: ck.value.spec,
            pi_adam: ck.policy.adam,
            pg_adam: ck.pg_adam,
            value_adam: ck.value.adam,
        };
        t.iteration = ck.iteration;
        t.next_id = ck.next_id;
        t.preferred = ck.preferred;
        t.kernel = ck.kernel;
        t.rngs = ck.rngs;
        Ok(t)
    }

    fn ensure_kernel(&mut self, buffer: &OnPolicyBuffer) -> Result<Kernel> {
        if self.kernel.is_none() {
            let k = self
                .cfg
                .kernel
                .resolve(self.preferred.members().iter().chain(&buffer.trajectories), &mut self.rngs.bandwidth)?;
            tracing::debug!(sigma = k.sigma(), "kernel bandwidth fixed");
            self.kernel = Some(k);
        }
        Ok(self.kernel.clone().expect("set above"))
    }

    /// Runs one iteration. `source` is required in human mode and ignored otherwise.
    pub fn step(&mut self, source: Option<&mut dyn PreferenceSource>) -> Result<IterationReport> {
        let cfg = self.cfg.clone();
        let it = self.iteration;
        let mut buffer = collect(
            &self.learner.policy,
            &self.learner.policy_spec,
            &mut self.env,
            cfg.episodes_per_iteration,
            &mut self.rngs.rollout,
            &mut self.next_id,
            it,
        )?;
        for t in &mut buffer.trajectories {
            t.score_nodes(&self.nodes);
        }

        let clip = |lr| ClipParams {
            epsilon: cfg.clip_epsilon,
            lr,
            epochs: cfg.pi_epochs,
        };
        let mut pi_loss = None;
        if !cfg.no_pi {
            annotate_gae(&mut buffer, &self.learner.value, &self.learner.value_spec, cfg.gamma, cfg.gae_lambda)?;
            let stats = pi_step(&mut self.learner, &buffer, &clip(cfg.policy_lr), cfg.value_lr)?;
            pi_loss = Some(stats.loss());
        }

        let mut pg_obj = None;
        let mut mmd_metric = None;
        if !cfg.no_pg && !self.preferred.is_empty() {
            let kernel = self.ensure_kernel(&buffer)?;
            guidance_rewards(&mut buffer, &self.preferred, &kernel, &mut self.cache)?;
            mmd_metric = Some(policy_mmd_metric(&buffer, &self.preferred, &kernel, &mut self.cache)?);
            let hp = ClipParams {
                epochs: cfg.pg_epochs,
                ..clip(cfg.policy_lr)
            };
            let stats = pg_step(&mut self.learner, &buffer, &hp, cfg.gamma, cfg.guidance_coef)?;
            pg_obj = Some(stats.objective);
        }

        let mut update = None;
        let mut annotated = 0;
        if cfg.annotator != AnnotatorMode::None {
            let idx = self.schedule.select(it, &buffer.trajectories, &self.preferred, &self.nodes);
            annotated = idx.len();
            let candidates: Vec<Trajectory> = idx.iter().map(|&i| strip(&buffer.trajectories[i])).collect();
            let mut oracle = OracleComparator {
                nodes: &self.nodes,
                mislabel: MislabelConfig {
                    ratio: cfg.mislabel_ratio,
                },
                rng: &mut self.rngs.mislabel,
            };
            let report = match cfg.annotator {
                AnnotatorMode::Oracle => update_preferred_set(&mut self.preferred, &candidates, &mut oracle)?,
                AnnotatorMode::Human => {
                    let source = source.ok_or_else(|| Error::Annotation("human mode needs a judgment source".into()))?;
                    source.update(PreferenceRequest {
                        iteration: it,
                        candidates: &candidates,
                        set: &mut self.preferred,
                        nodes: &self.nodes,
                        fallback: &mut oracle,
                    })?
                }
                AnnotatorMode::None => unreachable!(),
            };
            update = Some(report);
        }

        let eval = evaluate(
            &self.learner.policy,
            &self.learner.policy_spec,
            &mut self.eval_env,
            cfg.eval_episodes,
            &mut self.rngs.eval,
        )?;
        let k = buffer.trajectories.len() as f64;
        let metrics = IterationMetrics {
            iteration: it,
            avg_return: eval.avg_return,
            success_rate: eval.success_rate,
            mean_length: eval.mean_length,
            mmd_metric,
            pi_loss,
            pg_obj,
            p_size: self.preferred.len(),
            p_version: self.preferred.version(),
            train_success_rate: buffer.trajectories.iter().filter(|t| t.success).count() as f64 / k,
            comparisons: update.as_ref().map_or(0, |u| u.comparisons),
            annotated,
            p_min_nodes: self.preferred.min_score().map(|s| s.nodes_reached),
        };
        self.iteration += 1;
        Ok(IterationReport { metrics, buffer, update })
    }
}

/// Copy kept in the preferred set: the segment up to the last reached node,
/// with training-only annotations dropped.
fn strip(t: &Trajectory) -> Trajectory {
    let mut c = t.segment();
    c.advantages = None;
    c.value_targets = None;
    c.guidance_distance = None;
    c
}

/// Called after every iteration; `Break` stops training early.
pub trait Observer {
    fn on_iteration(&mut self, trainer: &Trainer, report: &IterationReport) -> ControlFlow<()>;
}

impl<F: FnMut(&Trainer, &IterationReport) -> ControlFlow<()>> Observer for F {
    fn on_iteration(&mut self, trainer: &Trainer, report: &IterationReport) -> ControlFlow<()> {
        self(trainer, report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Finished,
    Stopped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub status: RunStatus,
    pub error: Option<String>,
    pub metrics: Vec<IterationMetrics>,
    pub total_comparisons: usize,
}

impl RunRecord {
    /// Mean of `f` over the final `frac` of iterations (at least one).
    pub fn tail_mean(&self, frac: f64, f: impl Fn(&IterationMetrics) -> Option<f64>) -> Option<f64> {
        window_mean(&self.metrics, self.metrics.len().saturating_sub(tail_len(self.metrics.len(), frac)), self.metrics.len(), f)
    }

    /// Mean of `f` over the first `frac` of iterations (at least one).
    pub fn head_mean(&self, frac: f64, f: impl Fn(&IterationMetrics) -> Option<f64>) -> Option<f64> {
        window_mean(&self.metrics, 0, tail_len(self.metrics.len(), frac), f)
    }

    /// First iteration whose success rate reaches `threshold`.
    pub fn first_reaching(&self, threshold: f64) -> Option<usize> {
        self.metrics.iter().find(|m| m.success_rate >= threshold).map(|m| m.iteration)
    }
}

fn tail_len(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1.min(n), n)
}

fn window_mean(
    rows: &[IterationMetrics],
    from: usize,
    to: usize,
    f: impl Fn(&IterationMetrics) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = rows[from..to].iter().filter_map(f).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Trains to the iteration budget, persisting to `run_dir` when given.
pub fn train(
    cfg: TrainConfig,
    run_dir: Option<&crate::rundir::RunDir>,
    mut source: Option<&mut dyn PreferenceSource>,
    observer: &mut dyn Observer,
) -> Result<RunRecord> {
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(dir) = run_dir {
        dir.write_config(&cfg)?;
    }
    let mut record = RunRecord {
        config: cfg,
        status: RunStatus::Finished,
        error: None,
        metrics: Vec::new(),
        total_comparisons: 0,
    };
    let mut result = run_loop(&mut trainer, run_dir, source.as_mut().map(|s| &mut **s as &mut dyn PreferenceSource), observer, &mut record);
    if let Err(Error::Stopped) = result {
        record.status = RunStatus::Stopped;
        result = Ok(());
    }
    if let Err(e) = &result {
        record.status = RunStatus::Failed;
        record.error = Some(e.to_string());
        tracing::error!(error = %e, iteration = trainer.iteration(), "training aborted");
    }
    if let Some(dir) = run_dir {
        dir.write_preferred(trainer.preferred())?;
        dir.write_checkpoint(&trainer.checkpoint())?;
        dir.write_record(&record)?;
    }
    result.map(|_| record)
}

fn run_loop(
    trainer: &mut Trainer,
    run_dir: Option<&crate::rundir::RunDir>,
    mut source: Option<&mut dyn PreferenceSource>,
    observer: &mut dyn Observer,
    record: &mut RunRecord,
) -> Result<()> {
    let cfg = trainer.config().clone();
    while !trainer.is_done() {
        let report = trainer.step(source.as_mut().map(|s| &mut **s as &mut dyn PreferenceSource))?;
        let it = report.metrics.iteration;
        record.total_comparisons += report.metrics.comparisons;
        if let Some(dir) = run_dir {
            dir.append_metrics(&report.metrics)?;
            let due = |every: usize| every > 0 && (it + 1) % every == 0;
            if due(cfg.trajectory_dump_interval) {
                dir.write_trajectories(it, &report.buffer)?;
            }
            if due(cfg.checkpoint_interval) {
                dir.write_checkpoint(&trainer.checkpoint())?;
            }
        }
        record.metrics.push(report.metrics.clone());
        if observer.on_iteration(trainer, &report).is_break() {
            record.status = RunStatus::Stopped;
            break;
        }
    }
    Ok(())
}

/// An observer that does nothing.
pub fn no_observer() -> impl Observer {
    |_: &Trainer, _: &IterationReport| ControlFlow::Continue(())
}

//! Trajectories, the on-policy buffer, rollout collection and the return /
//! advantage annotation shared by both optimization steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, NodeScore, NodeSpec, Snapshot};
use crate::error::{Error, Result};
use crate::net::{self, Action, MlpSpec, ParamVector, ValueBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub env_reward: f64,
    pub logp_behavior: f64,
    pub done: bool,
    /// State after the step.
    pub next: Snapshot,
    pub control_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub iteration: usize,
    pub start: Snapshot,
    pub transitions: Vec<Transition>,
    pub return_undiscounted: f64,
    pub success: bool,
    pub node_score: Option<NodeScore>,
    pub guidance_distance: Option<f64>,
    pub advantages: Option<Vec<f64>>,
    pub value_targets: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(id: u64, iteration: usize, start: Snapshot, transitions: Vec<Transition>, bonus: f64) -> Self {
        let return_undiscounted = transitions.iter().map(|t| t.env_reward).sum();
        let success = transitions.iter().any(|t| t.env_reward >= bonus);
        Self {
            id,
            iteration,
            start,
            transitions,
            return_undiscounted,
            success,
            node_score: None,
            guidance_distance: None,
            advantages: None,
            value_targets: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn control_cost(&self) -> f64 {
        self.transitions.iter().map(|t| t.control_cost).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.env_reward).collect()
    }

    pub fn snapshots(&self) -> Vec<Snapshot> {
        self.transitions.iter().map(|t| t.next).collect()
    }

    pub fn score_nodes(&mut self, nodes: &NodeSpec) -> NodeScore {
        let score = nodes.score(&self.snapshots(), self.control_cost());
        self.node_score = Some(score);
        score
    }

    /// Prefix ending at the step where the last reached node was first
    /// satisfied; the whole trajectory when no node was reached or it has not
    /// been scored. The node score is kept as judged.
    pub fn segment(&self) -> Trajectory {
        let mut seg = self.clone();
        if let Some(score) = self.node_score.filter(|s| s.nodes_reached > 0) {
            seg.transitions.truncate(score.steps_used);
        }
        seg
    }

    /// Observation features selected by `projection`, one row per visited state.
    pub fn features(&self, projection: &[usize]) -> Vec<Vec<f64>> {
        self.transitions
            .iter()
            .map(|t| projection.iter().map(|&i| t.obs[i]).collect())
            .collect()
    }

    /// Env-agnostic render payload: grid cells or line positions, start included.
    pub fn render(&self) -> RenderPath {
        let points = std::iter::once(&self.start).chain(self.transitions.iter().map(|t| &t.next));
        match self.start {
            Snapshot::Grid { .. } => RenderPath::Cells(
                points
                    .map(|s| match s {
                        Snapshot::Grid { x, y, .. } => (*x, *y),
                        Snapshot::Line { .. } => unreachable!(),
                    })
                    .collect(),
            ),
            Snapshot::Line { .. } => RenderPath::Positions(
                points
                    .map(|s| match s {
                        Snapshot::Line { position, .. } => *position,
                        Snapshot::Grid { .. } => unreachable!(),
                    })
                    .collect(),
            ),
        }
    }

    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            id: self.id,
            obs: self.transitions.iter().map(|t| t.obs.clone()).collect(),
            actions: self.transitions.iter().map(|t| t.action.clone()).collect(),
            env_rewards: self.rewards(),
            logp: self.transitions.iter().map(|t| t.logp_behavior).collect(),
            node_score: self.node_score,
            guidance_distance: self.guidance_distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RenderPath {
    Cells(Vec<(i32, i32)>),
    Positions(Vec<f64>),
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: u64,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub env_rewards: Vec<f64>,
    pub logp: Vec<f64>,
    pub node_score: Option<NodeScore>,
    pub guidance_distance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnPolicyBuffer {
    pub iteration: usize,
    pub trajectories: Vec<Trajectory>,
}

impl OnPolicyBuffer {
    pub fn steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trajectories {
            out.push_str(&serde_json::to_string(&t.record())?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs one episode with the stochastic policy.
pub fn rollout<R: Rng + ?Sized>(
    params: &ParamVector,
    spec: &MlpSpec,
    env: &mut Env,
    rng: &mut R,
    id: u64,
    iteration: usize,
) -> Result<Trajectory> {
    let mut obs = env.reset();
    let start = env.snapshot();
    let mut transitions = Vec::new();
    loop {
        let out = net::forward_policy(params, &obs, spec)?;
        let action = out.sample(rng);
        let logp = net::log_prob(&out, &action)?;
        if !logp.is_finite() {
            return Err(Error::NonFinite("behavior log-probability"));
        }
        let step = env.step(&action)?;
        transitions.push(Transition {
            obs,
            action,
            env_reward: step.reward,
            logp_behavior: logp,
            done: step.done,
            next: step.snapshot,
            control_cost: step.control_cost,
        });
        obs = step.obs;
        if step.done {
            break;
        }
    }
    Ok(Trajectory::new(id, iteration, start, transitions, env.terminal_bonus()))
}

/// Samples `k` complete episodes. Ids are assigned from `next_id` in order.
pub fn collect<R: Rng + ?Sized>(
    params: &ParamVector,
    spec: &MlpSpec,
    env: &mut Env,
    k: usize,
    rng: &mut R,
    next_id: &mut u64,
    iteration: usize,
) -> Result<OnPolicyBuffer> {
    if k == 0 {
        return Err(Error::EmptyInput("episodes per iteration"));
    }
    let mut trajectories = Vec::with_capacity(k);
    for _ in 0..k {
        trajectories.push(rollout(params, spec, env, rng, *next_id, iteration)?);
        *next_id += 1;
    }
    Ok(OnPolicyBuffer {
        iteration,
        trajectories,
    })
}

/// `out[t] = sum_{l >= 0} gamma^l * rewards[t + l]`, one backward pass.
pub fn discounted_suffix_sums(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Generalized advantage estimates for one episode that ends at terminal or
/// horizon (no bootstrap past the last step).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// Shifts to zero mean and scales to unit variance; a constant input maps to zeros.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 1e-12 * (1.0 + mean.abs()) { (*v - mean) / std } else { 0.0 };
    }
}

/// Fills advantages (batch-normalized) and value targets on every trajectory.
pub fn annotate_gae(
    buffer: &mut OnPolicyBuffer,
    value_params: &ParamVector,
    value_spec: &MlpSpec,
    gamma: f64,
    lambda: f64,
) -> Result<()> {
    let obs: Vec<&[f64]> = buffer.transitions().map(|t| t.obs.as_slice()).collect();
    let values = ValueBatch::new(value_spec, obs.into_iter(), std::iter::repeat_n(0.0, buffer.steps()))?
        .values(value_params)?;
    let mut offset = 0;
    let mut raw = Vec::with_capacity(buffer.steps());
    for traj in &mut buffer.trajectories {
        let v = &values[offset..offset + traj.len()];
        let adv = gae(&traj.rewards(), v, gamma, lambda);
        traj.value_targets = Some(adv.iter().zip(v).map(|(a, v)| a + v).collect());
        raw.extend_from_slice(&adv);
        offset += traj.len();
    }
    normalize(&mut raw);
    let mut offset = 0;
    for traj in &mut buffer.trajectories {
        traj.advantages = Some(raw[offset..offset + traj.len()].to_vec());
        offset += traj.len();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, LineConfig};
    use crate::net::{init_params, Head};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_setup() -> (Env, MlpSpec, ParamVector) {
        let env = EnvConfig::grid().build().unwrap();
        let spec = MlpSpec::with_hidden(4, &[16, 16], 4, Head::SoftmaxDiscrete).unwrap();
        let params = init_params(&spec, 0);
        (env, spec, params)
    }

    #[test]
    fn suffix_sums_by_hand() {
        assert_eq!(discounted_suffix_sums(&[0.0, 0.0, 1.0], 0.5), vec![0.25, 0.5, 1.0]);
        assert_eq!(discounted_suffix_sums(&[3.0, -1.0, 2.0], 0.0), vec![3.0, -1.0, 2.0]);
        assert_eq!(discounted_suffix_sums(&[0.0; 4], 0.9), vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn suffix_sums_satisfy_recurrence(
            rewards in proptest::collection::vec(-10.0f64..10.0, 1..60),
            gamma in 0.0f64..1.0,
        ) {
            let out = discounted_suffix_sums(&rewards, gamma);
            let n = rewards.len();
            prop_assert_eq!(out[n - 1], rewards[n - 1]);
            for t in 0..n - 1 {
                prop_assert_eq!(out[t], rewards[t] + gamma * out[t + 1]);
            }
        }
    }

    #[test]
    fn gae_one_step_and_zero_cases() {
        assert_eq!(gae(&[5.0], &[0.0], 0.99, 0.95), vec![5.0]);
        assert_eq!(gae(&[0.0; 6], &[0.0; 6], 0.99, 0.95), vec![0.0; 6]);
    }

    #[test]
    fn gae_with_unit_discount_equals_suffix_sums() {
        let rewards = [0.0, 1.0, -2.0, 0.5, 3.0];
        let adv = gae(&rewards, &[0.0; 5], 1.0, 1.0);
        for t in 0..rewards.len() {
            let brute: f64 = rewards[t..].iter().sum();
            assert_eq!(adv[t], brute);
        }
    }

    #[test]
    fn collect_respects_counts_and_horizon() {
        let (mut env, spec, params) = grid_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut next_id = 0;
        let buf = collect(&params, &spec, &mut env, 8, &mut rng, &mut next_id, 0).unwrap();
        assert_eq!(buf.trajectories.len(), 8);
        assert_eq!(next_id, 8);
        for t in &buf.trajectories {
            assert!(t.len() <= 240);
            assert!(t.transitions.last().unwrap().done);
            assert_eq!(t.return_undiscounted, t.rewards().iter().sum::<f64>());
        }
        assert!(collect(&params, &spec, &mut env, 0, &mut rng, &mut next_id, 0).is_err());
    }

    #[test]
    fn collect_is_deterministic() {
        let (mut env, spec, params) = grid_setup();
        let run = |env: &mut Env| {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut id = 0;
            collect(&params, &spec, env, 3, &mut rng, &mut id, 0).unwrap()
        };
        assert_eq!(run(&mut env), run(&mut env));
    }

    #[test]
    fn replayed_actions_reproduce_observations() {
        let (mut env, spec, params) = grid_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut id = 0;
        let buf = collect(&params, &spec, &mut env, 2, &mut rng, &mut id, 0).unwrap();
        for traj in &buf.trajectories {
            let mut replay = EnvConfig::grid().build().unwrap();
            let mut obs = replay.reset();
            for tr in &traj.transitions {
                assert_eq!(obs, tr.obs);
                let out = replay.step(&tr.action).unwrap();
                assert_eq!(out.snapshot, tr.next);
                obs = out.obs;
            }
        }
    }

    #[test]
    fn line_actions_clip_to_unit_interval() {
        let mut env = Env::line(LineConfig::default());
        let spec = MlpSpec::with_hidden(2, &[8], 1, Head::TanhGaussianMean).unwrap();
        let mut params = ParamVector::zeros(&spec);
        params.log_std_mut()[0] = 2.0f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = rollout(&params, &spec, &mut env, &mut rng, 0, 0).unwrap();
        assert!(traj.transitions.iter().any(|t| match &t.action {
            Action::Continuous(a) => a[0].abs() > 1.0,
            _ => false,
        }));
        assert!(traj.transitions.iter().all(|t| t.control_cost <= 1.0));
    }

    #[test]
    fn annotate_gae_zero_rewards_zero_values() {
        let (mut env, spec, params) = grid_setup();
        let vspec = MlpSpec::with_hidden(4, &[16, 16], 1, Head::LinearScalar).unwrap();
        let vparams = ParamVector::zeros(&vspec);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut id = 0;
        let mut buf = collect(&params, &spec, &mut env, 2, &mut rng, &mut id, 0).unwrap();
        annotate_gae(&mut buf, &vparams, &vspec, 0.99, 0.95).unwrap();
        for t in &buf.trajectories {
            assert!(t.advantages.as_ref().unwrap().iter().all(|&a| a == 0.0));
            assert!(t.value_targets.as_ref().unwrap().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn normalize_gives_zero_mean_unit_variance() {
        let mut v = vec![1.0, 2.0, 3.0, 10.0];
        normalize(&mut v);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let mut c = vec![4.0; 5];
        normalize(&mut c);
        assert_eq!(c, vec![0.0; 5]);
    }

    #[test]
    fn jsonl_dump_has_one_line_per_trajectory() {
        let (mut env, spec, params) = grid_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut id = 0;
        let buf = collect(&params, &spec, &mut env, 3, &mut rng, &mut id, 0).unwrap();
        let text = buf.to_jsonl().unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: TrajectoryRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec, buf.trajectories[1].record());
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["obs", "actions", "env_rewards", "logp", "node_score", "guidance_distance"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

//! Preferred-set maintenance: pairwise comparators (scripted oracle or
//! recorded human judgments) and the n-wise insertion update.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{NodeScore, NodeSpec};
use crate::error::{Error, Result};
use crate::trajectory::{RenderPath, Trajectory};

pub const DEFAULT_CAPACITY: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    CandidatePreferred,
    IncumbentPreferred,
    Tie,
}

impl Outcome {
    pub fn flipped(self) -> Self {
        match self {
            Outcome::CandidatePreferred => Outcome::IncumbentPreferred,
            Outcome::IncumbentPreferred => Outcome::CandidatePreferred,
            Outcome::Tie => Outcome::Tie,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub candidate: u64,
    pub incumbent: u64,
    pub outcome: Outcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MislabelConfig {
    pub ratio: f64,
}

impl MislabelConfig {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::config("mislabel_ratio", "must lie in [0, 1]"));
        }
        Ok(Self { ratio })
    }
}

fn score_of(t: &Trajectory, nodes: &NodeSpec) -> NodeScore {
    t.node_score
        .unwrap_or_else(|| nodes.score(&t.snapshots(), t.control_cost()))
}

/// Lexicographic oracle: more nodes, then fewer steps, then lower control cost.
pub fn oracle_compare(candidate: &Trajectory, incumbent: &Trajectory, nodes: &NodeSpec) -> Outcome {
    match score_of(candidate, nodes).cmp_preference(&score_of(incumbent, nodes)) {
        std::cmp::Ordering::Greater => Outcome::CandidatePreferred,
        std::cmp::Ordering::Less => Outcome::IncumbentPreferred,
        std::cmp::Ordering::Equal => Outcome::Tie,
    }
}

/// Flips a non-tie outcome with probability `cfg.ratio`. One draw per call.
pub fn apply_mislabel<R: Rng + ?Sized>(outcome: Outcome, cfg: &MislabelConfig, rng: &mut R) -> Outcome {
    let flip = rng.random::<f64>() < cfg.ratio;
    if flip {
        outcome.flipped()
    } else {
        outcome
    }
}

pub trait Comparator {
    fn compare(&mut self, candidate: &Trajectory, incumbent: &Trajectory) -> Result<Outcome>;
}

pub struct OracleComparator<'a, R: Rng + ?Sized> {
    pub nodes: &'a NodeSpec,
    pub mislabel: MislabelConfig,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> Comparator for OracleComparator<'_, R> {
    fn compare(&mut self, candidate: &Trajectory, incumbent: &Trajectory) -> Result<Outcome> {
        let o = oracle_compare(candidate, incumbent, self.nodes);
        Ok(apply_mislabel(o, &self.mislabel, self.rng))
    }
}

/// Judgments collected from a human, each tagged with a submission sequence
/// number. Pairs never judged directly fall back to the win/loss balance
/// each trajectory accumulated across the table.
#[derive(Clone, Debug, Default)]
pub struct JudgmentTable {
    direct: HashMap<(u64, u64), Outcome>,
    balance: HashMap<u64, i64>,
    seqs: Vec<u64>,
}

impl JudgmentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, j: Judgment, seq: u64) -> Result<()> {
        if j.candidate == j.incumbent {
            return Err(Error::Annotation(format!("trajectory {} judged against itself", j.candidate)));
        }
        if self.direct.contains_key(&(j.candidate, j.incumbent)) || self.direct.contains_key(&(j.incumbent, j.candidate)) {
            return Err(Error::Annotation(format!(
                "pair ({}, {}) judged twice",
                j.candidate, j.incumbent
            )));
        }
        self.direct.insert((j.candidate, j.incumbent), j.outcome);
        let (dc, di) = match j.outcome {
            Outcome::CandidatePreferred => (1, -1),
            Outcome::IncumbentPreferred => (-1, 1),
            Outcome::Tie => (0, 0),
        };
        *self.balance.entry(j.candidate).or_default() += dc;
        *self.balance.entry(j.incumbent).or_default() += di;
        self.seqs.push(seq);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.direct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.direct.is_empty()
    }

    pub fn lookup(&self, candidate: u64, incumbent: u64) -> Outcome {
        if let Some(&o) = self.direct.get(&(candidate, incumbent)) {
            return o;
        }
        if let Some(&o) = self.direct.get(&(incumbent, candidate)) {
            return o.flipped();
        }
        let bc = self.balance.get(&candidate).copied().unwrap_or(0);
        let bi = self.balance.get(&incumbent).copied().unwrap_or(0);
        match bc.cmp(&bi) {
            std::cmp::Ordering::Greater => Outcome::CandidatePreferred,
            std::cmp::Ordering::Less => Outcome::IncumbentPreferred,
            std::cmp::Ordering::Equal => Outcome::Tie,
        }
    }

    pub fn sequence_numbers(&self) -> &[u64] {
        &self.seqs
    }
}

impl Comparator for JudgmentTable {
    fn compare(&mut self, candidate: &Trajectory, incumbent: &Trajectory) -> Result<Outcome> {
        Ok(self.lookup(candidate.id, incumbent.id))
    }
}

/// Ranked best-first list of at most `h` trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferredSet {
    members: Vec<Trajectory>,
    version: u64,
    capacity: usize,
}

impl Default for PreferredSet {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl PreferredSet {
    pub fn new(capacity: usize) -> Self {
        Self {
            members: Vec::new(),
            version: 0,
            capacity,
        }
    }

    /// Builds a set from already-ranked members.
    pub fn from_ranked(members: Vec<Trajectory>, capacity: usize) -> Self {
        let mut members = members;
        members.truncate(capacity);
        Self {
            members,
            version: 1,
            capacity,
        }
    }

    pub fn members(&self) -> &[Trajectory] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ids(&self) -> Vec<u64> {
        self.members.iter().map(|t| t.id).collect()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.members.iter().any(|t| t.id == id)
    }

    /// Lowest-ranked member's node score.
    pub fn min_score(&self) -> Option<NodeScore> {
        self.members.last().and_then(|t| t.node_score)
    }

    pub fn export(&self) -> PreferredSetExport {
        PreferredSetExport {
            version: self.version,
            h: self.capacity,
            members: self
                .members
                .iter()
                .enumerate()
                .map(|(rank, t)| TrajectorySummary::new(t, Some(rank)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub id: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank: Option<usize>,
    pub iteration: usize,
    pub node_score: Option<NodeScore>,
    pub env_return: f64,
    pub length: usize,
    pub path: RenderPath,
}

impl TrajectorySummary {
    pub fn new(t: &Trajectory, rank: Option<usize>) -> Self {
        Self {
            id: t.id,
            rank,
            iteration: t.iteration,
            node_score: t.node_score,
            env_return: t.return_undiscounted,
            length: t.len(),
            path: t.render(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferredSetExport {
    pub version: u64,
    pub h: usize,
    pub members: Vec<TrajectorySummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub comparisons: usize,
    pub inserted: Vec<u64>,
    pub evicted: Vec<u64>,
    pub changed: bool,
}

/// Inserts each candidate at the rank given by how many current members beat
/// it; equal-ranked members yield to the newer trajectory (larger id). The set
/// is then truncated to capacity. Each candidate is compared with every
/// current member, so at most `candidates.len() * h` comparisons are made.
pub fn update_preferred_set(
    set: &mut PreferredSet,
    candidates: &[Trajectory],
    comparator: &mut dyn Comparator,
) -> Result<UpdateReport> {
    let mut report = UpdateReport::default();
    let mut seen: HashSet<u64> = set.members.iter().map(|t| t.id).collect();
    for cand in candidates {
        if !seen.insert(cand.id) {
            continue;
        }
        let mut position = 0;
        for member in &set.members {
            report.comparisons += 1;
            let better = match comparator.compare(cand, member)? {
                Outcome::IncumbentPreferred => true,
                Outcome::CandidatePreferred => false,
                Outcome::Tie => member.id > cand.id,
            };
            if better {
                position += 1;
            }
        }
        if position < set.capacity {
            set.members.insert(position.min(set.members.len()), cand.clone());
            report.inserted.push(cand.id);
            if set.members.len() > set.capacity {
                let gone = set.members.pop().expect("non-empty");
                report.evicted.push(gone.id);
            }
            report.changed = true;
        }
    }
    report.inserted.retain(|id| !report.evicted.contains(id));
    if report.changed {
        set.version += 1;
    }
    Ok(report)
}

/// How many of an iteration's candidates are surfaced for annotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSchedule {
    /// Iterations during which every candidate is surfaced.
    pub warmup: usize,
}

impl Default for WorkloadSchedule {
    fn default() -> Self {
        Self { warmup: 50 }
    }
}

impl WorkloadSchedule {
    /// Indices of the candidates to annotate. After the warm-up only
    /// candidates that strictly beat the set's lowest-ranked member are kept,
    /// unless the set still has free slots.
    pub fn select(&self, iteration: usize, candidates: &[Trajectory], set: &PreferredSet, nodes: &NodeSpec) -> Vec<usize> {
        let all: Vec<usize> = (0..candidates.len()).collect();
        if iteration < self.warmup || !set.is_full() {
            return all;
        }
        let Some(floor) = set.members().last().map(|t| score_of(t, nodes)) else {
            return all;
        };
        all.into_iter()
            .filter(|&i| score_of(&candidates[i], nodes).cmp_preference(&floor) == std::cmp::Ordering::Greater)
            .collect()
    }
}

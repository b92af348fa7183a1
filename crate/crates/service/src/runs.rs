//! Live runs: shared state between request handlers and one training thread.

use std::collections::{BTreeMap, HashSet};
use std::ops::ControlFlow;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use lope_core::annotator::{
    update_preferred_set, Comparator, Judgment, JudgmentTable, Outcome, PreferredSetExport, TrajectorySummary,
    UpdateReport,
};
use lope_core::config::{AnnotatorMode, TimeoutPolicy, TrainConfig};
use lope_core::rundir::RunDir;
use lope_core::trainer::{train, IterationMetrics, IterationReport, PreferenceRequest, PreferenceSource, RunStatus, Trainer};
use lope_core::trajectory::Trajectory;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    PausedAwaitingAnnotation,
    Finished,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Judged,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub iteration: usize,
    /// Preferred-set version the task was issued against.
    pub version: u64,
    pub candidate: TrajectorySummary,
    /// Trajectories the candidate must be judged against.
    pub incumbents: Vec<TrajectorySummary>,
    pub status: TaskStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub id: String,
    pub status: Status,
    pub config: TrainConfig,
    pub iteration: usize,
    pub latest: Option<IterationMetrics>,
    pub p_version: u64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Sequence numbers of accepted judgments, in acceptance order.
    pub accepted: Vec<u64>,
    /// Sequence numbers handed to preferred-set updates, in consumption order.
    pub consumed: Vec<u64>,
    /// Preferred-set updates that ran on human judgments.
    pub updates: usize,
    /// Iterations resolved by the scripted fallback after a timeout.
    pub fallbacks: usize,
}

/// Why a judgment submission was refused.
#[derive(Debug, PartialEq, Eq)]
pub enum SubmitError {
    UnknownTask,
    AlreadyJudged,
    Expired,
    StaleVersion { expected: u64, got: u64 },
    Invalid(String),
}

struct Inner {
    status: Status,
    iteration: usize,
    metrics: Vec<IterationMetrics>,
    preferred: PreferredSetExport,
    tasks: BTreeMap<String, AnnotationTask>,
    /// Judgments accepted but not yet consumed, with their sequence numbers.
    queue: Vec<(Judgment, u64)>,
    next_seq: u64,
    audit: Audit,
    error: Option<String>,
    stop: bool,
}

pub struct Run {
    pub id: String,
    pub config: TrainConfig,
    inner: Mutex<Inner>,
    wake: Condvar,
}

impl Run {
    fn new(id: String, config: TrainConfig) -> Self {
        Self {
            inner: Mutex::new(Inner {
                status: Status::Running,
                iteration: 0,
                metrics: Vec::new(),
                preferred: PreferredSetExport {
                    version: 0,
                    h: config.preferred_capacity,
                    members: Vec::new(),
                },
                tasks: BTreeMap::new(),
                queue: Vec::new(),
                next_seq: 0,
                audit: Audit::default(),
                error: None,
                stop: false,
            }),
            wake: Condvar::new(),
            id,
            config,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn handle(&self) -> RunHandle {
        let g = self.lock();
        RunHandle {
            id: self.id.clone(),
            status: g.status,
            config: self.config.clone(),
            iteration: g.iteration,
            latest: g.metrics.last().cloned(),
            p_version: g.preferred.version,
            error: g.error.clone(),
        }
    }

    pub fn status(&self) -> Status {
        self.lock().status
    }

    pub fn metrics_since(&self, since: i64) -> Vec<IterationMetrics> {
        self.lock()
            .metrics
            .iter()
            .filter(|m| m.iteration as i64 > since)
            .cloned()
            .collect()
    }

    pub fn preferred(&self) -> PreferredSetExport {
        self.lock().preferred.clone()
    }

    pub fn pending(&self) -> Vec<AnnotationTask> {
        self.lock()
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Pending)
            .cloned()
            .collect()
    }

    pub fn audit(&self) -> Audit {
        self.lock().audit.clone()
    }

    pub fn request_stop(&self) {
        self.lock().stop = true;
        self.wake.notify_all();
    }

    /// Queues the judgments for one task. The candidate must be judged
    /// against each of the task's incumbents exactly once.
    pub fn submit(&self, task_id: &str, version: u64, outcomes: &[Judgment]) -> Result<usize, SubmitError> {
        let mut g = self.lock();
        let current = g.preferred.version;
        let task = g.tasks.get(task_id).ok_or(SubmitError::UnknownTask)?;
        match task.status {
            TaskStatus::Judged => return Err(SubmitError::AlreadyJudged),
            TaskStatus::Expired => return Err(SubmitError::Expired),
            TaskStatus::Pending => {}
        }
        if version != task.version || version != current {
            return Err(SubmitError::StaleVersion {
                expected: task.version,
                got: version,
            });
        }
        let mut expected: HashSet<u64> = task.incumbents.iter().map(|s| s.id).collect();
        if outcomes.len() != expected.len() {
            return Err(SubmitError::Invalid(format!(
                "expected {} outcomes, got {}",
                expected.len(),
                outcomes.len()
            )));
        }
        for j in outcomes {
            if j.candidate != task.candidate.id {
                return Err(SubmitError::Invalid(format!(
                    "candidate {} does not belong to task {task_id}",
                    j.candidate
                )));
            }
            if !expected.remove(&j.incumbent) {
                return Err(SubmitError::Invalid(format!(
                    "incumbent {} is not part of task {task_id} or is repeated",
                    j.incumbent
                )));
            }
        }
        for j in outcomes {
            let seq = g.next_seq;
            g.next_seq += 1;
            g.queue.push((*j, seq));
            g.audit.accepted.push(seq);
        }
        g.tasks.get_mut(task_id).expect("checked").status = TaskStatus::Judged;
        let remaining = g.tasks.values().filter(|t| t.status == TaskStatus::Pending).count();
        if remaining == 0 {
            g.status = Status::Running;
            self.wake.notify_all();
        }
        Ok(remaining)
    }
}

/// Blocks the training thread at the preferred-set update until every task
/// of the iteration has been judged through the service.
struct HumanSource {
    run: Arc<Run>,
}

/// Human judgments for judged candidates, the scripted comparator for the rest.
struct Mixed<'a> {
    table: JudgmentTable,
    judged: HashSet<u64>,
    fallback: &'a mut dyn Comparator,
}

impl Comparator for Mixed<'_> {
    fn compare(&mut self, c: &Trajectory, i: &Trajectory) -> lope_core::Result<Outcome> {
        if self.judged.contains(&c.id) {
            self.table.compare(c, i)
        } else {
            self.fallback.compare(c, i)
        }
    }
}

impl PreferenceSource for HumanSource {
    fn update(&mut self, req: PreferenceRequest<'_>) -> lope_core::Result<UpdateReport> {
        if req.candidates.is_empty() {
            return update_preferred_set(req.set, &[], &mut JudgmentTable::new());
        }
        let version = req.set.version();
        let members: Vec<TrajectorySummary> = req
            .set
            .members()
            .iter()
            .enumerate()
            .map(|(r, t)| TrajectorySummary::new(t, Some(r)))
            .collect();
        let mut issued = Vec::new();
        {
            let mut g = self.run.lock();
            for (k, cand) in req.candidates.iter().enumerate() {
                let incumbents = if members.is_empty() {
                    req.candidates[..k].iter().map(|t| TrajectorySummary::new(t, None)).collect()
                } else {
                    members.clone()
                };
                let id = format!("{}-{}", req.iteration, cand.id);
                g.tasks.insert(
                    id.clone(),
                    AnnotationTask {
                        id: id.clone(),
                        iteration: req.iteration,
                        version,
                        candidate: TrajectorySummary::new(cand, None),
                        incumbents,
                        status: TaskStatus::Pending,
                    },
                );
                issued.push(id);
            }
            g.status = Status::PausedAwaitingAnnotation;
        }
        tracing::info!(run = %self.run.id, iteration = req.iteration, tasks = issued.len(), "awaiting annotation");

        let timeout = self.run.config.annotation_timeout_secs.map(Duration::from_secs_f64);
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut g = self.run.lock();
        let mut timed_out = false;
        loop {
            if g.stop {
                expire(&mut g, &issued);
                return Err(lope_core::Error::Stopped);
            }
            let pending = issued
                .iter()
                .filter(|id| g.tasks[*id].status == TaskStatus::Pending)
                .count();
            if pending == 0 {
                break;
            }
            match deadline {
                Some(d) if self.run.config.timeout_policy == TimeoutPolicy::Oracle => {
                    let now = Instant::now();
                    if now >= d {
                        timed_out = true;
                        break;
                    }
                    g = self.run.wake.wait_timeout(g, d - now).unwrap_or_else(|e| e.into_inner()).0;
                }
                _ => g = self.run.wake.wait(g).unwrap_or_else(|e| e.into_inner()),
            }
        }

        let mut table = JudgmentTable::new();
        let mut judged = HashSet::new();
        let drained: Vec<(Judgment, u64)> = std::mem::take(&mut g.queue);
        for (j, seq) in &drained {
            table.insert(*j, *seq)?;
            judged.insert(j.candidate);
        }
        for id in &issued {
            if g.tasks[id].status == TaskStatus::Judged {
                // Candidates without opponents carry no judgments but were answered.
                judged.insert(g.tasks[id].candidate.id);
            }
        }
        expire(&mut g, &issued);
        if timed_out {
            g.audit.fallbacks += 1;
            tracing::warn!(run = %self.run.id, iteration = req.iteration, "annotation timeout, scripted fallback used");
        }
        g.audit.consumed.extend(drained.iter().map(|(_, s)| *s));
        g.audit.updates += 1;
        g.status = Status::Running;
        drop(g);

        let mut cmp = Mixed {
            table,
            judged,
            fallback: req.fallback,
        };
        update_preferred_set(req.set, req.candidates, &mut cmp)
    }
}

fn expire(g: &mut Inner, ids: &[String]) {
    for id in ids {
        if let Some(t) = g.tasks.get_mut(id).filter(|t| t.status == TaskStatus::Pending) {
            t.status = TaskStatus::Expired;
        }
    }
}

/// Starts training on a background thread.
pub fn spawn(id: String, config: TrainConfig, run_dir: Option<RunDir>) -> Arc<Run> {
    let run = Arc::new(Run::new(id, config.clone()));
    let shared = run.clone();
    std::thread::Builder::new()
        .name(format!("train-{}", run.id))
        .spawn(move || {
            let mut source = HumanSource { run: shared.clone() };
            let observer_run = shared.clone();
            let mut observer = move |trainer: &Trainer, report: &IterationReport| {
                let mut g = observer_run.lock();
                g.iteration = trainer.iteration();
                g.metrics.push(report.metrics.clone());
                g.preferred = trainer.preferred().export();
                let current = trainer.iteration();
                // Keep the last iteration's tasks so late duplicates still get a precise answer.
                g.tasks.retain(|_, t| t.status == TaskStatus::Pending || t.iteration + 1 >= current);
                if g.stop {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            };
            let human = config.annotator == AnnotatorMode::Human;
            let src: Option<&mut dyn PreferenceSource> = if human { Some(&mut source) } else { None };
            let result = train(config, run_dir.as_ref(), src, &mut observer);
            let mut g = shared.lock();
            match result {
                Ok(rec) => {
                    g.status = if rec.status == RunStatus::Failed { Status::Failed } else { Status::Finished };
                }
                Err(e) => {
                    g.status = Status::Failed;
                    g.error = Some(e.to_string());
                }
            }
            for t in g.tasks.values_mut() {
                if t.status == TaskStatus::Pending {
                    t.status = TaskStatus::Expired;
                }
            }
            shared.wake.notify_all();
        })
        .expect("spawn training thread");
    run
}

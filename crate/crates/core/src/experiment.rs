//! Multi-seed experiments: seed lists, ablation variants, parameter sweeps and
//! the per-run summary statistics reported for them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{AnnotatorMode, TrainConfig};
use crate::error::{Error, Result};
use crate::rundir::RunDir;
use crate::trainer::{no_observer, train, Observer, RunRecord, RunStatus};

/// Parses `3`, `0..9` (inclusive) and comma-separated mixtures of both.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = |part: &str| Error::config("seeds", format!("cannot parse '{part}'; use N, A..B or a comma list"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad(part))?;
            if b < a {
                return Err(Error::config("seeds", format!("empty range '{part}'")));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if out.is_empty() {
        return Err(Error::config("seeds", "no seeds given"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(d) = out.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::config("seeds", format!("seed {d} listed twice")));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPi,
    NoPg,
    /// Plain PPO: no guidance and no annotation at all.
    Ppo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPi, Variant::NoPg, Variant::Ppo];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPi => "no_pi",
            Variant::NoPg => "no_pg",
            Variant::Ppo => "ppo",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {
                c.no_pi = false;
                c.no_pg = false;
            }
            Variant::NoPi => {
                c.no_pi = true;
                c.no_pg = false;
            }
            Variant::NoPg => {
                c.no_pi = false;
                c.no_pg = true;
            }
            Variant::Ppo => {
                c.no_pi = false;
                c.no_pg = true;
                c.annotator = AnnotatorMode::None;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant '{s}' (full, no_pi, no_pg, ppo)")))
    }
}

/// One swept config key, e.g. `mislabel_ratio=0,0.1,0.2,0.3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = crate::config::parse_override(s)?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config("grid", format!("no values for '{key}'")));
        }
        Ok(Self { key, values })
    }
}

/// A single point of a sweep: the overrides it applies, in axis order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepPoint(pub Vec<(String, String)>);

impl SweepPoint {
    /// Filesystem- and CSV-friendly label; `base` for the empty point.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            return "base".to_string();
        }
        self.0.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    pub fn dir_name(&self) -> String {
        self.label().replace(['/', '\\', ';'], "_")
    }
}

/// Cartesian product of the axes; a single empty point when there are none.
pub fn expand_sweep(axes: &[SweepAxis]) -> Vec<SweepPoint> {
    let mut points = vec![SweepPoint::default()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.0.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Per-run figures used by the ablation table and the acceptance checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub iterations: usize,
    /// Mean evaluation success over the final 10% of iterations.
    pub final_success: f64,
    /// Mean evaluation success over all iterations (normalized area under the curve).
    pub auc_success: f64,
    /// First iteration with evaluation success of at least 0.5.
    pub first_half: Option<usize>,
    /// Mean MMD metric over the first and the final 10% of iterations that logged one.
    pub mmd_head: Option<f64>,
    pub mmd_tail: Option<f64>,
    pub total_comparisons: usize,
    pub status: RunStatus,
}

pub const TAIL_FRACTION: f64 = 0.1;
pub const SUCCESS_THRESHOLD: f64 = 0.5;

impl RunSummary {
    pub fn of(record: &RunRecord) -> Self {
        let n = record.metrics.len();
        let auc = if n == 0 {
            0.0
        } else {
            record.metrics.iter().map(|m| m.success_rate).sum::<f64>() / n as f64
        };
        let with_mmd: Vec<f64> = record.metrics.iter().filter_map(|m| m.mmd_metric).collect();
        let k = ((with_mmd.len() as f64 * TAIL_FRACTION).round() as usize).max(1);
        let mean = |s: &[f64]| (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64);
        Self {
            seed: record.config.seed,
            iterations: n,
            final_success: record.tail_mean(TAIL_FRACTION, |m| Some(m.success_rate)).unwrap_or(0.0),
            auc_success: auc,
            first_half: record.first_reaching(SUCCESS_THRESHOLD),
            mmd_head: mean(&with_mmd[..k.min(with_mmd.len())]),
            mmd_tail: mean(&with_mmd[with_mmd.len().saturating_sub(k)..]),
            total_comparisons: record.total_comparisons,
            status: record.status,
        }
    }
}

/// How a batch of runs is executed.
#[derive(Clone, Copy, Debug, Default)]
pub struct Execution {
    /// Seeds trained concurrently.
    pub jobs: usize,
    /// Reuse a finished run whose directory already holds `run.json` and an
    /// identical `config.json` instead of training it again.
    pub resume: bool,
}

impl Execution {
    pub fn jobs(jobs: usize) -> Self {
        Self { jobs, resume: false }
    }
}

fn finished_run(dir: &Path, cfg: &TrainConfig) -> Option<RunRecord> {
    let run = RunDir::open(dir);
    if run.read_config().ok()? != *cfg {
        return None;
    }
    run.read_record().ok().filter(|r| r.status == RunStatus::Finished)
}

/// Trains one run per seed, each in `out/seed_<s>` when `out` is given.
/// Seeds are spread over `exec.jobs` threads; results come back in seed order.
pub fn run_seeds(
    base: &TrainConfig,
    seeds: &[u64],
    out: Option<&Path>,
    exec: Execution,
    make_observer: &(dyn Fn(u64) -> Box<dyn Observer + Send> + Sync),
) -> Vec<(u64, Result<RunRecord>)> {
    let jobs = exec.jobs.clamp(1, seeds.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let mut cfg = base.clone();
                cfg.seed = seed;
                let res = (|| {
                    if let Some(o) = out.filter(|_| exec.resume) {
                        if let Some(done) = finished_run(&seed_dir(o, seed), &cfg) {
                            tracing::info!(seed, "reusing finished run");
                            return Ok(done);
                        }
                    }
                    let dir = out.map(|o| RunDir::create(seed_dir(o, seed))).transpose()?;
                    let mut obs = make_observer(seed);
                    train(cfg, dir.as_ref(), None, obs.as_mut())
                })();
                results.lock().unwrap_or_else(|e| e.into_inner()).push((i, seed, res));
            });
        }
    });
    let mut r = results.into_inner().unwrap_or_else(|e| e.into_inner());
    r.sort_by_key(|(i, _, _)| *i);
    r.into_iter().map(|(_, s, res)| (s, res)).collect()
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Observer factory that observes nothing.
pub fn quiet(_: u64) -> Box<dyn Observer + Send> {
    Box::new(no_observer())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: String,
    pub variant: Variant,
    #[serde(flatten)]
    pub summary: RunSummary,
}

/// Runs every (sweep point, variant, seed) combination. Run directories are
/// `out/<point>/<variant>/seed_<s>`; `ablation.csv` and `ablation_summary.csv`
/// are written to `out`.
pub fn run_ablation(
    base: &TrainConfig,
    points: &[SweepPoint],
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
    exec: Execution,
    make_observer: &(dyn Fn(u64) -> Box<dyn Observer + Send> + Sync),
) -> Result<Vec<AblationRow>> {
    // Resolve every configuration before the first run starts.
    let mut plans = Vec::new();
    for p in points {
        let mut doc = serde_json::to_value(base)?;
        for (k, v) in &p.0 {
            crate::config::set_path(&mut doc, k, v)?;
        }
        let cfg: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::config(p.label(), e.to_string()))?;
        for &v in variants {
            let c = v.apply(&cfg);
            c.validate()?;
            plans.push((p, v, c));
        }
    }
    let mut rows = Vec::new();
    for (p, v, cfg) in plans {
        let dir = out.join(p.dir_name()).join(v.name());
        tracing::info!(point = %p.label(), variant = %v, seeds = seeds.len(), "ablation cell");
        for (seed, res) in run_seeds(&cfg, seeds, Some(&dir), exec, make_observer) {
            let record = res.inspect_err(|e| tracing::error!(point = %p.label(), variant = %v, seed, error = %e, "run failed"))?;
            rows.push(AblationRow {
                point: p.label(),
                variant: v,
                summary: RunSummary::of(&record),
            });
        }
    }
    write_ablation(&rows, out)?;
    Ok(rows)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_ablation(rows: &[AblationRow], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record([
        "point",
        "variant",
        "seed",
        "final_success",
        "auc_success",
        "first_iter_0.5",
        "mmd_head",
        "mmd_tail",
        "comparisons",
    ])?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.point.clone(),
            r.variant.to_string(),
            s.seed.to_string(),
            s.final_success.to_string(),
            s.auc_success.to_string(),
            opt(s.first_half),
            opt(s.mmd_head),
            opt(s.mmd_tail),
            s.total_comparisons.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("ablation_summary.csv"))?;
    w.write_record([
        "point",
        "variant",
        "runs",
        "final_success_mean",
        "final_success_stderr",
        "auc_success_mean",
        "reached_0.5",
        "first_iter_0.5_mean",
    ])?;
    let mut keys: Vec<(String, Variant)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.point.clone(), r.variant)) {
            keys.push((r.point.clone(), r.variant));
        }
    }
    for (point, variant) in keys {
        let cell: Vec<&RunSummary> = rows
            .iter()
            .filter(|r| r.point == point && r.variant == variant)
            .map(|r| &r.summary)
            .collect();
        let finals: Vec<f64> = cell.iter().map(|s| s.final_success).collect();
        let aucs: Vec<f64> = cell.iter().map(|s| s.auc_success).collect();
        let firsts: Vec<f64> = cell.iter().filter_map(|s| s.first_half.map(|f| f as f64)).collect();
        let (fm, fe) = crate::export::mean_stderr(&finals).unwrap_or((0.0, 0.0));
        let am = crate::export::mean_stderr(&aucs).map_or(0.0, |x| x.0);
        w.write_record([
            point,
            variant.to_string(),
            cell.len().to_string(),
            fm.to_string(),
            fe.to_string(),
            am.to_string(),
            firsts.len().to_string(),
            opt(crate::export::mean_stderr(&firsts).map(|x| x.0)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::IterationMetrics;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("1,4..5, 9").unwrap(), vec![1, 4, 5, 9]);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("1,1").is_err());
    }

    #[test]
    fn sweep_is_cartesian() {
        let axes: Vec<SweepAxis> = ["mislabel_ratio=0,0.1,0.2,0.3", "guidance_coef=1,2"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let pts = expand_sweep(&axes);
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0].label(), "mislabel_ratio=0;guidance_coef=1");
        assert_eq!(expand_sweep(&[]), vec![SweepPoint::default()]);
        assert!("mislabel_ratio=".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn variants_set_flags() {
        let base = TrainConfig::grid();
        let ppo = Variant::Ppo.apply(&base);
        assert!(ppo.no_pg && !ppo.no_pi && ppo.annotator == AnnotatorMode::None);
        let nopi = Variant::NoPi.apply(&base);
        assert!(nopi.no_pi && !nopi.no_pg);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            v.apply(&base).validate().unwrap();
        }
    }

    fn metrics(it: usize, sr: f64, mmd: Option<f64>) -> IterationMetrics {
        IterationMetrics {
            iteration: it,
            avg_return: 0.0,
            success_rate: sr,
            mean_length: 0.0,
            mmd_metric: mmd,
            pi_loss: None,
            pg_obj: None,
            p_size: 0,
            p_version: 0,
            train_success_rate: 0.0,
            comparisons: 0,
            annotated: 0,
            p_min_nodes: None,
        }
    }

    #[test]
    fn summary_windows() {
        let metrics: Vec<IterationMetrics> = (0..20)
            .map(|i| metrics(i, if i >= 10 { 1.0 } else { 0.0 }, (i > 0).then(|| 20.0 - i as f64)))
            .collect();
        let record = RunRecord {
            config: TrainConfig::grid(),
            status: RunStatus::Finished,
            error: None,
            metrics,
            total_comparisons: 3,
        };
        let s = RunSummary::of(&record);
        assert_eq!(s.final_success, 1.0);
        assert_eq!(s.auc_success, 0.5);
        assert_eq!(s.first_half, Some(10));
        // 19 logged values, 10% -> 2 at each end.
        assert_eq!(s.mmd_head, Some(18.5));
        assert_eq!(s.mmd_tail, Some(1.5));
    }
}

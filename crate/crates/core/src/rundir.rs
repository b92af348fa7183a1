//! On-disk layout of one training run.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::annotator::PreferredSet;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::trainer::{IterationMetrics, RunRecord, TrainerCheckpoint};
use crate::trajectory::OnPolicyBuffer;

pub const METRICS_HEADER: [&str; 7] = [
    "iteration",
    "avg_return",
    "success_rate",
    "mmd_metric",
    "pi_loss",
    "pg_obj",
    "p_size",
];

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory tree; an existing metrics file is truncated.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("trajectories"))?;
        let mut w = csv::Writer::from_path(root.join("metrics.csv"))?;
        w.write_record(METRICS_HEADER)?;
        w.flush()?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn write_config(&self, cfg: &TrainConfig) -> Result<()> {
        fs::write(self.root.join("config.json"), cfg.to_json_pretty()?)?;
        Ok(())
    }

    pub fn read_config(&self) -> Result<TrainConfig> {
        let text = fs::read_to_string(self.root.join("config.json"))?;
        TrainConfig::from_json_str(&text, &[])
    }

    pub fn append_metrics(&self, m: &IterationMetrics) -> Result<()> {
        let file = OpenOptions::new().append(true).open(self.metrics_path())?;
        let mut w = csv::Writer::from_writer(file);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            m.iteration.to_string(),
            m.avg_return.to_string(),
            m.success_rate.to_string(),
            opt(m.mmd_metric),
            opt(m.pi_loss),
            opt(m.pg_obj),
            m.p_size.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn write_trajectories(&self, iteration: usize, buffer: &OnPolicyBuffer) -> Result<()> {
        let path = self.root.join("trajectories").join(format!("iter_{iteration}.jsonl"));
        fs::File::create(path)?.write_all(buffer.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration}.json"))
    }

    /// Named after the number of completed iterations.
    pub fn write_checkpoint(&self, ck: &TrainerCheckpoint) -> Result<()> {
        fs::write(self.checkpoint_path(ck.iteration), serde_json::to_string(ck)?)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<TrainerCheckpoint> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Most advanced checkpoint in the directory, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(self.root.join("checkpoints"))? {
            let path = entry?.path();
            let k = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("iter_"))
                .and_then(|s| s.parse::<usize>().ok());
            if let Some(k) = k {
                if best.as_ref().is_none_or(|(b, _)| k > *b) {
                    best = Some((k, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    pub fn write_preferred(&self, set: &PreferredSet) -> Result<()> {
        fs::write(self.root.join("preferred_set.json"), serde_json::to_string_pretty(&set.export())?)?;
        Ok(())
    }

    pub fn write_record(&self, record: &RunRecord) -> Result<()> {
        fs::write(self.root.join("run.json"), serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn read_record(&self) -> Result<RunRecord> {
        Ok(serde_json::from_str(&fs::read_to_string(self.root.join("run.json"))?)?)
    }
}

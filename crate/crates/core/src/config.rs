//! Training configuration, per-environment presets and dotted-path overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{EnvConfig, LineConfig};
use crate::error::{Error, Result};
use crate::mmd::{Bandwidth, KernelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorMode {
    Oracle,
    Human,
    /// No preferred set is maintained at all (plain PPO baseline).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeoutPolicy {
    Wait,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub seed: u64,
    pub iterations: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub episodes_per_iteration: usize,
    pub pi_epochs: usize,
    pub pg_epochs: usize,
    pub hidden_sizes: Vec<usize>,
    /// Initial std of the Gaussian policy; ignored for discrete actions.
    pub init_std: f64,
    /// Capacity `h` of the preferred set.
    pub preferred_capacity: usize,
    /// Weight `lambda_g` of the guidance objective.
    pub guidance_coef: f64,
    pub kernel: KernelSpec,
    pub mislabel_ratio: f64,
    pub no_pi: bool,
    pub no_pg: bool,
    pub annotator: AnnotatorMode,
    /// Iterations during which every candidate is annotated.
    pub workload_warmup: usize,
    pub eval_episodes: usize,
    /// Write a checkpoint every this many iterations (0 disables; the final one is always written).
    pub checkpoint_interval: usize,
    /// Dump the sampled trajectories every this many iterations (0 disables).
    pub trajectory_dump_interval: usize,
    pub annotation_timeout_secs: Option<f64>,
    pub timeout_policy: TimeoutPolicy,
}

impl TrainConfig {
    pub fn grid() -> Self {
        Self {
            env: EnvConfig::grid(),
            seed: 0,
            iterations: 1500,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.3,
            policy_lr: 1.5e-5,
            value_lr: 1e-2,
            episodes_per_iteration: 8,
            pi_epochs: 80,
            pg_epochs: 80,
            hidden_sizes: vec![64, 64],
            init_std: 1.0,
            preferred_capacity: 8,
            guidance_coef: 1.0,
            kernel: KernelSpec::grid(),
            mislabel_ratio: 0.0,
            no_pi: false,
            no_pg: false,
            annotator: AnnotatorMode::Oracle,
            workload_warmup: 50,
            eval_episodes: 20,
            checkpoint_interval: 100,
            trajectory_dump_interval: 100,
            annotation_timeout_secs: None,
            timeout_policy: TimeoutPolicy::Wait,
        }
    }

    pub fn line() -> Self {
        Self {
            env: EnvConfig::Line(LineConfig::default()),
            iterations: 2000,
            clip_epsilon: 0.2,
            policy_lr: 9e-5,
            value_lr: 1e-3,
            episodes_per_iteration: 20,
            init_std: 0.15,
            kernel: KernelSpec::line(),
            ..Self::grid()
        }
    }

    pub fn preset(kind: &str) -> Result<Self> {
        match kind {
            "grid" => Ok(Self::grid()),
            "line" => Ok(Self::line()),
            other => Err(Error::config("env.kind", format!("unknown environment kind '{other}'"))),
        }
    }

    /// Layers a partial JSON document and then `key=value` overrides on top
    /// of the preset for the document's environment kind.
    pub fn resolve(partial: Option<&Value>, overrides: &[(String, String)]) -> Result<Self> {
        let kind = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "env.kind")
            .map(|(_, v)| v.trim_matches('"').to_string())
            .or_else(|| {
                partial
                    .and_then(|p| p.pointer("/env/kind"))
                    .and_then(Value::as_str)
                    .map(str::to_string)
            })
            .unwrap_or_else(|| "grid".to_string());
        let mut doc = serde_json::to_value(Self::preset(&kind)?)?;
        if let Some(p) = partial {
            if !p.is_object() {
                return Err(Error::config("config", "must be a JSON object"));
            }
            merge(&mut doc, p, "")?;
        }
        for (key, raw) in overrides {
            if key == "env.kind" {
                continue;
            }
            set_path(&mut doc, key, raw)?;
        }
        let cfg: TrainConfig =
            serde_json::from_value(doc).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        Self::resolve(Some(&v), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, "must be positive and finite"))
            }
        };
        positive("policy_lr", self.policy_lr)?;
        positive("value_lr", self.value_lr)?;
        positive("init_std", self.init_std)?;
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("clip_epsilon", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("gae_lambda", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mislabel_ratio) {
            return Err(Error::config("mislabel_ratio", "must lie in [0, 1]"));
        }
        if !(self.guidance_coef >= 0.0 && self.guidance_coef.is_finite()) {
            return Err(Error::config("guidance_coef", "must be non-negative"));
        }
        if self.no_pi && self.no_pg {
            return Err(Error::config("no_pg", "no_pi and no_pg cannot both be set"));
        }
        if self.episodes_per_iteration == 0 {
            return Err(Error::config("episodes_per_iteration", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be at least 1"));
        }
        if self.preferred_capacity == 0 {
            return Err(Error::config("preferred_capacity", "must be at least 1"));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_sizes", "layer widths must be positive"));
        }
        if self.env.max_steps() == 0 {
            return Err(Error::config("env.max_steps", "must be at least 1"));
        }
        if let EnvConfig::Line(c) = &self.env {
            if !(c.length > 0.0 && c.v_max > 0.0) {
                return Err(Error::config("env.length", "length and v_max must be positive"));
            }
        }
        if let Some(t) = self.annotation_timeout_secs {
            if !(t > 0.0) {
                return Err(Error::config("annotation_timeout_secs", "must be positive"));
            }
        }
        let obs_dim = match self.env {
            EnvConfig::Grid { .. } => 4,
            EnvConfig::Line(_) => 2,
        };
        self.kernel
            .validate(obs_dim)
            .map_err(|e| Error::config("kernel", e.to_string()))?;
        if let Bandwidth::Fixed(s) = self.kernel.bandwidth {
            positive("kernel.bandwidth", s)?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Deep-merges `src` into `dst`; every key in `src` must already exist in `dst`
/// unless it sits under a map whose keys are free-form (the env variant body).
fn merge(dst: &mut Value, src: &Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None if path == "env" => {
                        d.insert(k.clone(), v.clone());
                    }
                    None => return Err(Error::config("config", format!("unknown key '{here}'"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s.clone();
            Ok(())
        }
    }
}

/// Replaces the value at the dotted `key`, which must already exist.
pub fn set_path(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::config("override", format!("unknown key '{key}'")))?;
    }
    *slot = parse_override_value(raw);
    Ok(())
}

/// JSON if it parses, otherwise a bare string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::config("override", format!("expected key=value, got '{text}'")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::config("override", format!("empty key in '{text}'")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn grid_preset_matches_table() {
        let c = TrainConfig::grid();
        assert_eq!((c.clip_epsilon, c.policy_lr, c.value_lr), (0.3, 1.5e-5, 1e-2));
        assert_eq!((c.episodes_per_iteration, c.pi_epochs, c.env.max_steps()), (8, 80, 240));
        assert_eq!((c.gamma, c.preferred_capacity), (0.99, 8));
        c.validate().unwrap();
        let l = TrainConfig::line();
        assert_eq!((l.clip_epsilon, l.policy_lr, l.value_lr, l.episodes_per_iteration), (0.2, 9e-5, 1e-3, 20));
        assert_eq!((l.env.max_steps(), l.init_std), (500, 0.15));
        l.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        for c in [TrainConfig::grid(), TrainConfig::line()] {
            let back = TrainConfig::from_json_str(&c.to_json_pretty().unwrap(), &[]).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_file_and_overrides_layer_on_preset() {
        let text = r#"{"env": {"kind": "line", "length": 20.0}, "seed": 3}"#;
        let c = TrainConfig::from_json_str(text, &[ov("mislabel_ratio", "0.2"), ov("kernel.bandwidth", "0.5")]).unwrap();
        assert_eq!(c.seed, 3);
        assert!(matches!(&c.env, EnvConfig::Line(l) if l.length == 20.0));
        assert_eq!(c.env.max_steps(), 500);
        assert_eq!(c.policy_lr, 9e-5);
        assert_eq!(c.mislabel_ratio, 0.2);
        assert_eq!(c.kernel.bandwidth, Bandwidth::Fixed(0.5));
    }

    #[test]
    fn kind_override_selects_preset() {
        let c = TrainConfig::resolve(None, &[ov("env.kind", "line")]).unwrap();
        assert_eq!(c, TrainConfig::line());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::resolve(None, &[ov("not_a_key", "1")]).is_err());
        assert!(TrainConfig::resolve(None, &[ov("kernel.nope", "1")]).is_err());
        assert!(TrainConfig::from_json_str(r#"{"bogus": 1}"#, &[]).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = TrainConfig::resolve(None, &[ov("clip_epsilon", "1.5")]).unwrap_err();
        assert!(err.to_string().contains("clip_epsilon"), "{err}");
        let err = TrainConfig::resolve(None, &[ov("no_pi", "true"), ov("no_pg", "true")]).unwrap_err();
        assert!(err.to_string().contains("no_pg"));
        assert!(TrainConfig::resolve(None, &[ov("policy_lr", "0")]).is_err());
        assert!(TrainConfig::resolve(None, &[ov("kernel.projection", "[7]")]).is_err());
        assert!(TrainConfig::resolve(None, &[ov("env.kind", "maze")]).is_err());
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("a.b=1").unwrap(), ov("a.b", "1"));
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override_value("oracle"), Value::String("oracle".into()));
        assert_eq!(parse_override_value("0.25"), serde_json::json!(0.25));
    }
}

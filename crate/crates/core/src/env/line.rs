//! Continuous sparse-reward line: a point mass pushed along one axis that is
//! paid only once it crosses the far threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINE_REWARD: f64 = 100.0;
const DT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineConfig {
    /// Distance threshold that ends the episode with the bonus.
    pub length: f64,
    pub v_max: f64,
    pub max_steps: usize,
}

impl Default for LineConfig {
    fn default() -> Self {
        Self {
            length: 40.0,
            v_max: 1.0,
            max_steps: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineState {
    pub position: f64,
    pub velocity: f64,
    pub t: usize,
}

pub fn line_reset(_cfg: &LineConfig) -> LineState {
    LineState {
        position: 0.0,
        velocity: 0.0,
        t: 0,
    }
}

/// Returns `(next_state, reward, done, applied_action)`.
pub fn line_step(state: &LineState, action: f64, cfg: &LineConfig) -> Result<(LineState, f64, bool, f64)> {
    if !action.is_finite() {
        return Err(Error::NonFinite("line action"));
    }
    let a = action.clamp(-1.0, 1.0);
    let velocity = (state.velocity + DT * a).clamp(-cfg.v_max, cfg.v_max);
    let next = LineState {
        position: state.position + DT * velocity,
        velocity,
        t: state.t + 1,
    };
    if next.position >= cfg.length {
        return Ok((next, LINE_REWARD, true, a));
    }
    Ok((next, 0.0, next.t >= cfg.max_steps, a))
}

pub fn line_obs(state: &LineState, cfg: &LineConfig) -> Vec<f64> {
    vec![state.position / cfg.length, state.velocity / cfg.v_max]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_constant(a: f64, cfg: &LineConfig) -> (usize, f64) {
        let mut s = line_reset(cfg);
        let mut total = 0.0;
        loop {
            let (n, r, done, _) = line_step(&s, a, cfg).unwrap();
            total += r;
            s = n;
            if done {
                return (s.t, total);
            }
        }
    }

    #[test]
    fn zero_action_stays_put_until_horizon() {
        let cfg = LineConfig::default();
        let (t, total) = run_constant(0.0, &cfg);
        assert_eq!((t, total), (500, 0.0));
    }

    #[test]
    fn constant_push_crosses_at_simulated_step() {
        // Oracle: iterate the two difference equations independently.
        let cfg = LineConfig {
            length: 5.0,
            ..LineConfig::default()
        };
        let (mut p, mut v, mut k) = (0.0f64, 0.0f64, 0usize);
        while p < 5.0 {
            v = (v + 0.1f64).min(1.0);
            p += 0.1 * v;
            k += 1;
        }
        assert_eq!(k, 55);
        let (t, total) = run_constant(1.0, &cfg);
        assert_eq!((t, total), (k, 100.0));
    }

    #[test]
    fn actions_are_clipped() {
        let cfg = LineConfig::default();
        let s = line_reset(&cfg);
        let a = line_step(&s, 3.0, &cfg).unwrap();
        let b = line_step(&s, 1.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(line_step(&s, f64::NAN, &cfg).is_err());
    }

    #[test]
    fn velocity_respects_bound() {
        let cfg = LineConfig::default();
        let mut s = line_reset(&cfg);
        for _ in 0..50 {
            s = line_step(&s, -1.0, &cfg).unwrap().0;
            assert!(s.velocity.abs() <= cfg.v_max);
        }
        assert_eq!(line_obs(&line_reset(&cfg), &cfg), vec![0.0, 0.0]);
    }
}

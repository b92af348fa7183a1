//! RBF-kernel MMD between state-visitation distributions of trajectories.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::PreferredSet;
use crate::error::{Error, Result};
use crate::trajectory::{OnPolicyBuffer, Trajectory};

const MEDIAN_SUBSAMPLE: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthRule {
    #[serde(rename = "median-heuristic")]
    MedianHeuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
    /// Observation indices that feed the kernel.
    pub projection: Vec<usize>,
}

impl KernelSpec {
    pub fn grid() -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::Rule(BandwidthRule::MedianHeuristic),
            projection: vec![0, 1],
        }
    }

    pub fn line() -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::Rule(BandwidthRule::MedianHeuristic),
            projection: vec![0],
        }
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.projection.is_empty() {
            return Err(Error::config("kernel.projection", "must select at least one dimension"));
        }
        if let Some(&i) = self.projection.iter().find(|&&i| i >= obs_dim) {
            return Err(Error::config(
                "kernel.projection",
                format!("index {i} out of range for observation dim {obs_dim}"),
            ));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidBandwidth(s));
            }
        }
        Ok(())
    }

    /// Fixes the bandwidth; a median-heuristic spec is resolved from `trajectories`.
    pub fn resolve<'a, R: Rng + ?Sized>(
        &self,
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        rng: &mut R,
    ) -> Result<Kernel> {
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Rule(BandwidthRule::MedianHeuristic) => {
                let states: Vec<Vec<f64>> = trajectories
                    .into_iter()
                    .flat_map(|t| t.features(&self.projection))
                    .collect();
                median_bandwidth(&states, rng)
            }
        };
        Kernel::new(sigma, self.projection.clone())
    }
}

/// A kernel with a resolved bandwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    sigma: f64,
    projection: Vec<usize>,
}

impl Kernel {
    pub fn new(sigma: f64, projection: Vec<usize>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidBandwidth(sigma));
        }
        Ok(Self { sigma, projection })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn projection(&self) -> &[usize] {
        &self.projection
    }

    pub fn project(&self, traj: &Trajectory) -> Result<StateCloud> {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        Ok(StateCloud::new(traj.features(&self.projection)))
    }

    fn eval_sq(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// `exp(-|x - y|^2 / (2 sigma^2))`.
pub fn kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidBandwidth(sigma));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok((-sq_dist(x, y) / (2.0 * sigma * sigma)).exp())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// An empirical state distribution: distinct points with their frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct StateCloud {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl StateCloud {
    pub fn new(states: Vec<Vec<f64>>) -> Self {
        let n = states.len() as f64;
        let mut slot: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut points = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for s in states {
            let key: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
            match slot.get(&key) {
                Some(&i) => counts[i] += 1,
                None => {
                    slot.insert(key, points.len());
                    points.push(s);
                    counts.push(1);
                }
            }
        }
        let weights = counts.into_iter().map(|c| c as f64 / n).collect();
        Self { points, weights }
    }

    pub fn distinct(&self) -> usize {
        self.points.len()
    }

    fn mean_kernel(&self, other: &StateCloud, k: &Kernel) -> f64 {
        let mut total = 0.0;
        for (p, wp) in self.points.iter().zip(&self.weights) {
            let mut row = 0.0;
            for (q, wq) in other.points.iter().zip(&other.weights) {
                row += wq * k.eval_sq(sq_dist(p, q));
            }
            total += wp * row;
        }
        total
    }
}

/// Biased (V-statistic) squared MMD between two state clouds. The arguments
/// are put in a canonical order first so the result is bitwise symmetric.
pub fn cloud_mmd_sq(a: &StateCloud, b: &StateCloud, k: &Kernel) -> f64 {
    let (x, y) = if canonical_cmp(a, b).is_le() { (a, b) } else { (b, a) };
    let v = x.mean_kernel(x, k) - 2.0 * x.mean_kernel(y, k) + y.mean_kernel(y, k);
    v.max(0.0)
}

fn canonical_cmp(a: &StateCloud, b: &StateCloud) -> std::cmp::Ordering {
    let flat = |c: &StateCloud| -> Vec<u64> {
        c.points
            .iter()
            .flatten()
            .chain(&c.weights)
            .map(|v| v.to_bits())
            .collect()
    };
    a.points.len().cmp(&b.points.len()).then_with(|| flat(a).cmp(&flat(b)))
}

/// Trajectory-wise distance `d(tau, upsilon)` on projected states.
pub fn traj_mmd_sq(a: &Trajectory, b: &Trajectory, k: &Kernel) -> Result<f64> {
    Ok(cloud_mmd_sq(&k.project(a)?, &k.project(b)?, k))
}

/// Pairwise distances keyed by (trajectory id, preferred id), valid for one
/// preferred-set version.
#[derive(Debug, Default)]
pub struct DistanceCache {
    version: Option<u64>,
    distances: HashMap<(u64, u64), f64>,
    clouds: HashMap<u64, StateCloud>,
    enabled: bool,
}

impl DistanceCache {
    pub fn new() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    /// A cache that never stores anything.
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    fn sync(&mut self, version: u64) {
        if self.version != Some(version) {
            self.distances.clear();
            self.clouds.clear();
            self.version = Some(version);
        }
    }

    fn cloud(&mut self, traj: &Trajectory, k: &Kernel) -> Result<StateCloud> {
        if let Some(c) = self.clouds.get(&traj.id) {
            return Ok(c.clone());
        }
        let c = k.project(traj)?;
        if self.enabled {
            self.clouds.insert(traj.id, c.clone());
        }
        Ok(c)
    }
}

/// `dist(tau, P)`: mean distance from `traj` to the members of `set`.
pub fn dist_to_set(traj: &Trajectory, set: &PreferredSet, k: &Kernel, cache: &mut DistanceCache) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyPreferredSet);
    }
    cache.sync(set.version());
    let own = k.project(traj)?;
    let mut total = 0.0;
    for member in set.members() {
        let key = (traj.id, member.id);
        let d = match cache.distances.get(&key) {
            Some(&d) => d,
            None => {
                let other = cache.cloud(member, k)?;
                let d = cloud_mmd_sq(&own, &other, k);
                if cache.enabled {
                    cache.distances.insert(key, d);
                }
                d
            }
        };
        total += d;
    }
    Ok(total / set.len() as f64)
}

/// Mean of `dist_to_set` over every trajectory in the buffer.
pub fn policy_mmd_metric(
    buffer: &OnPolicyBuffer,
    set: &PreferredSet,
    k: &Kernel,
    cache: &mut DistanceCache,
) -> Result<f64> {
    if buffer.trajectories.is_empty() {
        return Err(Error::EmptyInput("buffer"));
    }
    let mut total = 0.0;
    for t in &buffer.trajectories {
        total += dist_to_set(t, set, k, cache)?;
    }
    Ok(total / buffer.trajectories.len() as f64)
}

/// Median pairwise Euclidean distance over a subsample of at most 1000
/// states; falls back to 1.0 when degenerate.
pub fn median_bandwidth<R: Rng + ?Sized>(states: &[Vec<f64>], rng: &mut R) -> f64 {
    if states.len() < 2 {
        return 1.0;
    }
    let chosen: Vec<&Vec<f64>> = if states.len() > MEDIAN_SUBSAMPLE {
        let mut idx = rand::seq::index::sample(rng, states.len(), MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &states[i]).collect()
    } else {
        states.iter().collect()
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            dists.push(sq_dist(chosen[i], chosen[j]).sqrt());
        }
    }
    let n = dists.len();
    let mid = n / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
        let mean = |x: &[Vec<f64>], y: &[Vec<f64>]| {
            let mut s = 0.0;
            for p in x {
                for q in y {
                    let d2: f64 = p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum();
                    s += (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
            s / (x.len() * y.len()) as f64
        };
        mean(a, a) - 2.0 * mean(a, b) + mean(b, b)
    }

    fn k1(sigma: f64) -> Kernel {
        Kernel::new(sigma, vec![0]).unwrap()
    }

    fn cloud(points: &[f64]) -> StateCloud {
        StateCloud::new(points.iter().map(|&p| vec![p]).collect())
    }

    #[test]
    fn kernel_closed_forms() {
        assert_eq!(kernel(&[0.3, -1.0], &[0.3, -1.0], 0.7).unwrap(), 1.0);
        assert!((kernel(&[0.0], &[1.0], 1.0).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(kernel(&[0.0], &[1.0], -1.0).is_err());
        assert!(kernel(&[0.0], &[1.0, 2.0], 1.0).is_err());
        assert!(Kernel::new(0.0, vec![0]).is_err());
    }

    #[test]
    fn singleton_distance_by_hand() {
        let d = cloud_mmd_sq(&cloud(&[0.0]), &cloud(&[1.0]), &k1(1.0));
        assert!((d - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((d - 0.786_939).abs() < 1e-6);
    }

    #[test]
    fn identical_multisets_and_far_apart_sets() {
        let k = k1(0.5);
        let a = cloud(&[0.0, 1.0, 1.0, 2.0]);
        let b = cloud(&[1.0, 2.0, 0.0, 1.0]);
        assert!(cloud_mmd_sq(&a, &b, &k) <= 1e-12);
        let far = cloud(&[1e3, 1e3]);
        let near = cloud(&[0.0, 0.0, 0.0]);
        let d = cloud_mmd_sq(&near, &far, &k1(0.1));
        assert!((d - 2.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let na = rng.random_range(1..40);
            let nb = rng.random_range(1..40);
            // Coarse lattice so duplicates occur and the folding path is exercised.
            let mut gen = |n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| vec![rng.random_range(0..6) as f64 / 5.0, rng.random_range(0..6) as f64 / 5.0])
                    .collect()
            };
            let a = gen(na);
            let b = gen(nb);
            let k = Kernel::new(0.3, vec![0, 1]).unwrap();
            let fast = cloud_mmd_sq(&StateCloud::new(a.clone()), &StateCloud::new(b.clone()), &k);
            assert!((fast - brute(&a, &b, 0.3).max(0.0)).abs() < 1e-12);
            let back = cloud_mmd_sq(&StateCloud::new(b), &StateCloud::new(a), &k);
            assert_eq!(fast, back);
        }
    }

    #[test]
    fn singleton_distance_grows_with_separation() {
        let k = k1(1.0);
        let mut prev = 0.0;
        for i in 1..20 {
            let d = cloud_mmd_sq(&cloud(&[0.0]), &cloud(&[i as f64 * 0.25]), &k);
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn median_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(median_bandwidth(&[vec![0.0], vec![1.0]], &mut rng), 1.0);
        assert_eq!(median_bandwidth(&vec![vec![0.5]; 10], &mut rng), 1.0);
        assert_eq!(median_bandwidth(&[vec![0.0], vec![1.0], vec![2.0]], &mut rng), 1.0);
        assert_eq!(median_bandwidth(&[vec![0.0], vec![4.0], vec![6.0]], &mut rng), 4.0);
        // Four points: distances 1,2,3,1,2,1 -> sorted 1,1,1,2,2,3 -> (1 + 2) / 2.
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        assert_eq!(median_bandwidth(&pts, &mut rng), 1.5);
    }

    #[test]
    fn median_subsample_is_seeded() {
        let states: Vec<Vec<f64>> = (0..3000).map(|i| vec![(i as f64 * 0.37).sin(), i as f64 / 3000.0]).collect();
        let a = median_bandwidth(&states, &mut ChaCha8Rng::seed_from_u64(5));
        let b = median_bandwidth(&states, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a > 0.0);
    }
}

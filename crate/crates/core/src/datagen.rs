//! Ground-truth trajectories, observation noise and prefix splits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{gravitational_rhs_into, total_energy, BodySpec, SystemState};
use crate::error::{Error, Result};
use crate::integrators::{integrate_adaptive, TimeGrid, Trajectory};

pub const GROUND_TRUTH_TOL: f64 = 1e-9;

/// Period of the figure-eight choreography in units with G = m = 1.
pub const FIGURE_EIGHT_PERIOD: f64 = 6.325_913_985;

/// Equal-mass figure-eight initial state in the z = 0 plane.
pub fn figure_eight_state(spatial_dim: usize) -> SystemState {
    let r1 = [0.970_004_36, -0.243_087_53];
    let v3 = [-0.932_407_37, -0.864_731_46];
    let v1 = [-0.5 * v3[0], -0.5 * v3[1]];
    let bodies: [([f64; 2], [f64; 2]); 3] = [(r1, v1), ([-r1[0], -r1[1]], v1), ([0.0, 0.0], v3)];
    let mut values = Vec::with_capacity(6 * spatial_dim);
    for (r, v) in bodies {
        values.extend_from_slice(&r);
        values.extend(std::iter::repeat_n(0.0, spatial_dim - 2));
        values.extend_from_slice(&v);
        values.extend(std::iter::repeat_n(0.0, spatial_dim - 2));
    }
    SystemState::from_vec_unchecked(values)
}

/// A physical system together with the sampling of its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSetup {
    pub bodies: BodySpec,
    pub initial_state: SystemState,
    pub t_span: (f64, f64),
    pub n_points: usize,
}

impl SystemSetup {
    /// Figure-eight three-body system, 70 samples spaced 0.1 apart on [0, 7).
    pub fn figure_eight() -> Self {
        SystemSetup {
            bodies: BodySpec::new(vec![1.0; 3], 1.0, 3).expect("valid constants"),
            initial_state: figure_eight_state(3),
            t_span: (0.0, 7.0),
            n_points: 70,
        }
    }

    /// `n_points` samples at `t0 + k (t1 - t0) / n_points`.
    pub fn grid(&self) -> Result<TimeGrid> {
        let (t0, t1) = self.t_span;
        if self.n_points < 2 || !(t1 > t0) {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 points on an ordered span, got {} on ({t0}, {t1})",
                self.n_points
            )));
        }
        let h = (t1 - t0) / self.n_points as f64;
        TimeGrid::new((0..self.n_points).map(|k| t0 + h * k as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.bodies.check_state(&self.initial_state)?;
        self.grid().map(|_| ())
    }
}

/// Integrates the Newtonian system at tight tolerance on the setup's grid.
pub fn generate_ground_truth(setup: &SystemSetup) -> Result<Trajectory> {
    setup.validate()?;
    let grid = setup.grid()?;
    let bodies = &setup.bodies;
    let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| gravitational_rhs_into(y, bodies, dy);
    integrate_adaptive(
        &mut rhs,
        &setup.initial_state,
        setup.t_span,
        GROUND_TRUTH_TOL,
        GROUND_TRUTH_TOL,
        &grid,
    )
}

/// Largest `|E(t) - E(0)| / |E(0)|` along a trajectory.
pub fn max_relative_energy_drift(traj: &Trajectory, bodies: &BodySpec) -> Result<f64> {
    let e0 = total_energy(&traj.states()[0], bodies)?;
    traj.states().iter().try_fold(0.0f64, |acc, s| {
        Ok(acc.max(((total_energy(s, bodies)? - e0) / e0).abs()))
    })
}

/// Gaussian observation noise scaled by each component's range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseLevel {
    pub const NONE: f64 = 0.0;
    pub const MODERATE: f64 = 0.07;
    pub const HIGH: f64 = 0.35;

    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction >= 0.0 && fraction.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise fraction must be non-negative, got {fraction}"
            )));
        }
        Ok(NoiseLevel { fraction, seed })
    }
}

/// Adds i.i.d. noise with `sigma_c = fraction * range_c` to every sample of
/// every component `c`, where `range_c` is taken over the whole trajectory.
pub fn add_noise(traj: &Trajectory, level: &NoiseLevel) -> Result<Trajectory> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("cannot add noise to an empty trajectory".into()));
    }
    NoiseLevel::new(level.fraction, level.seed)?;
    if level.fraction == 0.0 {
        return Ok(traj.clone());
    }
    let sigmas: Vec<f64> = traj
        .component_ranges()
        .into_iter()
        .map(|r| level.fraction * r)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(level.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let states = traj
        .states()
        .iter()
        .map(|s| {
            let noisy = s
                .iter()
                .zip(&sigmas)
                .map(|(v, sigma)| v + sigma * unit.sample(&mut rng))
                .collect();
            SystemState::from_vec_unchecked(noisy)
        })
        .collect();
    Trajectory::new(traj.grid().clone(), states)
}

/// Fraction of the time grid used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction must lie in (0, 1], got {train_fraction}"
            )));
        }
        Ok(SplitSpec { train_fraction })
    }

    /// `ceil(fraction * n)`, ignoring floating-point dust above an integer.
    pub fn train_len(&self, n: usize) -> usize {
        let raw = self.train_fraction * n as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

/// First `ceil(fraction * N)` points for training, the rest (if any) for
/// evaluation.
pub fn split_prefix(traj: &Trajectory, spec: &SplitSpec) -> Result<(Trajectory, Option<Trajectory>)> {
    SplitSpec::new(spec.train_fraction)?;
    let n_train = spec.train_len(traj.len());
    if n_train < 2 {
        return Err(Error::EmptyTrain { points: n_train });
    }
    let train = traj.slice(0, n_train)?;
    let test = if n_train < traj.len() {
        Some(traj.slice(n_train, traj.len())?)
    } else {
        None
    };
    Ok((train, test))
}

/// Clean truth and its noisy observation for one system and noise level.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub setup: SystemSetup,
    pub truth: Trajectory,
    pub noisy: Trajectory,
    pub noise: NoiseLevel,
}

impl DataBundle {
    pub fn generate(setup: SystemSetup, noise: NoiseLevel) -> Result<Self> {
        let truth = generate_ground_truth(&setup)?;
        let noisy = add_noise(&truth, &noise)?;
        Ok(DataBundle {
            setup,
            truth,
            noisy,
            noise,
        })
    }

    /// The same truth observed at a different noise level.
    pub fn with_noise(&self, noise: NoiseLevel) -> Result<Self> {
        Ok(DataBundle {
            setup: self.setup.clone(),
            truth: self.truth.clone(),
            noisy: add_noise(&self.truth, &noise)?,
            noise,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::position;
    use approx::assert_relative_eq;

    fn truth() -> Trajectory {
        generate_ground_truth(&SystemSetup::figure_eight()).unwrap()
    }

    #[test]
    fn default_run_has_seventy_points_spaced_a_tenth() {
        let t = truth();
        assert_eq!(t.len(), 70);
        for w in t.times().windows(2) {
            assert_relative_eq!(w[1] - w[0], 0.1, epsilon = 1e-12);
        }
        assert_eq!(t.states()[0], SystemSetup::figure_eight().initial_state);
    }

    #[test]
    fn default_run_conserves_energy() {
        let setup = SystemSetup::figure_eight();
        assert!(max_relative_energy_drift(&truth(), &setup.bodies).unwrap() < 1e-6);
    }

    #[test]
    fn figure_eight_returns_after_one_period() {
        let mut setup = SystemSetup::figure_eight();
        setup.t_span = (0.0, FIGURE_EIGHT_PERIOD);
        setup.n_points = 2;
        // grid is {0, T/2}; integrate the full period separately
        let bodies = setup.bodies.clone();
        let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| gravitational_rhs_into(y, &bodies, dy);
        let grid = TimeGrid::new(vec![0.0, FIGURE_EIGHT_PERIOD]).unwrap();
        let tr = integrate_adaptive(&mut rhs, &setup.initial_state, (0.0, FIGURE_EIGHT_PERIOD), 1e-10, 1e-10, &grid)
            .unwrap();
        let end = &tr.states()[1];
        for (a, b) in end.iter().zip(setup.initial_state.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn figure_eight_layout() {
        let s2 = figure_eight_state(2);
        assert_eq!(s2.len(), 12);
        let s3 = figure_eight_state(3);
        assert_eq!(position(&s3, 1, 3), &[-0.970_004_36, 0.243_087_53, 0.0]);
        // zero total momentum
        for k in 0..3 {
            let p: f64 = (0..3).map(|i| s3[6 * i + 3 + k]).sum();
            assert!(p.abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let t = truth();
        assert_eq!(add_noise(&t, &NoiseLevel::new(0.0, 3).unwrap()).unwrap(), t);
    }

    #[test]
    fn noise_is_seeded() {
        let t = truth();
        let l = NoiseLevel::new(0.07, 11).unwrap();
        assert_eq!(add_noise(&t, &l).unwrap(), add_noise(&t, &l).unwrap());
        assert_ne!(
            add_noise(&t, &l).unwrap(),
            add_noise(&t, &NoiseLevel::new(0.07, 12).unwrap()).unwrap()
        );
    }

    fn ramp(range: f64, n: usize) -> Trajectory {
        let grid = TimeGrid::uniform(0.0, 1.0, n).unwrap();
        let states = (0..n)
            .map(|k| {
                let x = range * k as f64 / (n - 1) as f64;
                SystemState::from_vec_unchecked(vec![x, -x, 0.5 * x, 2.0])
            })
            .collect();
        Trajectory::new(grid, states).unwrap()
    }

    #[test]
    fn noise_scale_follows_component_range() {
        let clean = ramp(10.0, 70);
        let noisy = add_noise(&clean, &NoiseLevel::new(0.07, 5).unwrap()).unwrap();
        let resid: Vec<f64> = clean.states().iter().zip(noisy.states()).map(|(c, n)| n[0] - c[0]).collect();
        let mean = resid.iter().sum::<f64>() / 70.0;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 69.0).sqrt();
        assert!((0.7 * 0.75..=0.7 * 1.25).contains(&sd), "sd {sd}");
        // constant component has zero range and stays clean
        assert!(noisy.states().iter().all(|s| s[3] == 2.0));
    }

    #[test]
    fn noise_is_uncorrelated_across_components() {
        let clean = ramp(10.0, 70);
        let noisy = add_noise(&clean, &NoiseLevel::new(0.35, 9).unwrap()).unwrap();
        let r = |c: usize| -> Vec<f64> {
            clean.states().iter().zip(noisy.states()).map(|(a, b)| b[c] - a[c]).collect()
        };
        let (a, b) = (r(0), r(1));
        let ma = a.iter().sum::<f64>() / 70.0;
        let mb = b.iter().sum::<f64>() / 70.0;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((cov / (va * vb).sqrt()).abs() < 0.5);
    }

    #[test]
    fn standard_splits() {
        let t = truth();
        for (f, train, test) in [(0.9, 63, 7), (0.8, 56, 14), (0.4, 28, 42), (0.2, 14, 56), (0.1, 7, 63)] {
            let (a, b) = split_prefix(&t, &SplitSpec::new(f).unwrap()).unwrap();
            assert_eq!((a.len(), b.unwrap().len()), (train, test), "fraction {f}");
        }
        let (a, b) = split_prefix(&t, &SplitSpec::new(1.0).unwrap()).unwrap();
        assert_eq!(a.len(), 70);
        assert!(b.is_none());
    }

    #[test]
    fn split_partitions_the_grid() {
        let t = truth();
        for f in [0.05, 0.33, 0.5, 0.77, 0.99] {
            let (a, b) = split_prefix(&t, &SplitSpec::new(f).unwrap()).unwrap();
            let mut times = a.times().to_vec();
            if let Some(b) = b {
                times.extend_from_slice(b.times());
            }
            assert_eq!(times, t.times());
        }
    }

    #[test]
    fn split_rejects_tiny_prefix_and_bad_fractions() {
        let t = truth();
        assert!(matches!(
            split_prefix(&t, &SplitSpec { train_fraction: 0.01 }),
            Err(Error::EmptyTrain { points: 1 })
        ));
        assert!(SplitSpec::new(0.0).is_err());
        assert!(SplitSpec::new(1.5).is_err());
    }
}

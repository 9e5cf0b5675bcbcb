//! Forecast metrics, the standard training cases and the breakdown-point sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::datagen::{split_prefix, DataBundle, NoiseLevel, SplitSpec};
use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::models::{Model, ModelKind};
use crate::neural::{MlpSpec, ParamVector};
use crate::optimizers::{train, TrainConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const DEFAULT_SEEDS: usize = 3;
pub const DEFAULT_BREAKDOWN_GRID: [f64; 5] = [0.9, 0.8, 0.4, 0.2, 0.1];

/// Training fractions of cases 1 through 5.
pub const CASE_SPLITS: [f64; 5] = [1.0, 0.9, 0.8, 0.4, 0.2];
pub const NOISE_LEVELS: [f64; 3] = [NoiseLevel::NONE, NoiseLevel::MODERATE, NoiseLevel::HIGH];

/// Components whose reference range is at most this fraction of the
/// largest range carry no signal and are left out of the aggregate.
const DEGENERATE_RANGE: f64 = 1e-12;

/// nRMSE over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// `None` for components with a degenerate reference range.
    pub per_component: Vec<Option<f64>>,
    pub aggregate: f64,
}

/// Per-component RMSE of `pred` against `truth`, each divided by the
/// matching entry of `ranges`, plus their mean.
///
/// `ranges` is normally the clean truth's range over the full grid, so the
/// train and forecast windows share one normalization.
pub fn forecast_metrics(pred: &Trajectory, truth: &Trajectory, ranges: &[f64]) -> Result<WindowMetrics> {
    if pred.len() != truth.len() || pred.times() != truth.times() {
        return Err(Error::GridMismatch(format!(
            "prediction has {} points on [{}, {}], truth has {} on [{}, {}]",
            pred.len(),
            pred.grid().start(),
            pred.grid().end(),
            truth.len(),
            truth.grid().start(),
            truth.grid().end()
        )));
    }
    let d = truth.state_len();
    if pred.state_len() != d || ranges.len() != d {
        return Err(Error::DimensionMismatch {
            what: "metric components",
            expected: d,
            got: if pred.state_len() != d { pred.state_len() } else { ranges.len() },
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty window".into()));
    }
    let max_range = ranges.iter().cloned().fold(0.0, f64::max);
    let n = truth.len() as f64;
    let per_component: Vec<Option<f64>> = (0..d)
        .map(|c| {
            if !(ranges[c] > DEGENERATE_RANGE * max_range) {
                return None;
            }
            let mse = pred
                .states()
                .iter()
                .zip(truth.states())
                .map(|(p, t)| (p[c] - t[c]).powi(2))
                .sum::<f64>()
                / n;
            Some(mse.sqrt() / ranges[c])
        })
        .collect();
    let used: Vec<f64> = per_component.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::InvalidArgument("every component has a zero reference range".into()));
    }
    let aggregate = used.iter().sum::<f64>() / used.len() as f64;
    Ok(WindowMetrics {
        per_component,
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub model_kind: ModelKind,
    /// Network template; run `i` initializes with seed `mlp.seed + i`.
    pub mlp: MlpSpec,
    pub noise: NoiseLevel,
    pub split: SplitSpec,
    pub train_config: TrainConfig,
    pub plausibility_threshold: f64,
    pub n_seeds: usize,
}

impl CaseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plausibility_threshold > 0.0 && self.plausibility_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "evaluation.threshold must be positive, got {}",
                self.plausibility_threshold
            )));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("evaluation.n_seeds must be at least 1".into()));
        }
        self.train_config.validate()
    }

    pub fn seed(&self, index: usize) -> u64 {
        self.mlp.seed.wrapping_add(index as u64)
    }

    fn model(&self, bundle: &DataBundle, index: usize) -> Result<Model> {
        let spec = MlpSpec {
            seed: self.seed(index),
            ..self.mlp.clone()
        };
        Model::new(self.model_kind, spec, bundle.setup.bodies.clone())
    }
}

/// One seed of one case.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: ParamVector,
    pub loss_history: Vec<f64>,
    pub final_loss: Option<f64>,
    /// Training stopped on a diverging trajectory.
    pub diverged: Option<String>,
    /// Full-grid prediction; `None` when it could not be integrated.
    pub prediction: Option<Trajectory>,
    pub train_nrmse: Option<WindowMetrics>,
    pub forecast_nrmse: Option<WindowMetrics>,
    pub wall_time: f64,
}

impl SeedRun {
    /// Selection score: forecast aggregate, or train aggregate without a
    /// forecast window. Diverged runs never score.
    fn score(&self) -> Option<f64> {
        if self.diverged.is_some() {
            return None;
        }
        match (&self.forecast_nrmse, &self.train_nrmse) {
            (Some(f), _) => Some(f.aggregate),
            (None, Some(t)) => Some(t.aggregate),
            _ => None,
        }
    }
}

/// Best seed of a case, with every seed's score kept for the report.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub best: SeedRun,
    pub seed_scores: Vec<SeedScore>,
    pub plausible: bool,
    /// Summed over seeds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub score: Option<f64>,
    pub diverged: bool,
}

/// Trains seed `index` of `config` on the noisy prefix and scores the
/// full-grid prediction against clean truth.
pub fn run_seed(config: &CaseConfig, bundle: &DataBundle, index: usize) -> Result<SeedRun> {
    let started = Instant::now();
    let model = config.model(bundle, index)?;
    let (train_data, _) = split_prefix(&bundle.noisy, &config.split)?;
    let n_train = train_data.len();
    let state0 = &bundle.setup.initial_state;
    let outcome = train(&model, &train_data, state0, &config.train_config)?;

    let prediction = match model.predict(&outcome.params, state0, bundle.truth.grid(), config.train_config.loss.substeps) {
        Ok(p) => Some(p),
        Err(Error::Diverged { .. }) => None,
        Err(e) => return Err(e),
    };
    let ranges = bundle.truth.component_ranges();
    let (train_nrmse, forecast_nrmse) = match &prediction {
        Some(pred) => {
            let n = pred.len();
            let train_m = forecast_metrics(&pred.slice(0, n_train)?, &bundle.truth.slice(0, n_train)?, &ranges)?;
            let fc = if n_train < n {
                Some(forecast_metrics(&pred.slice(n_train, n)?, &bundle.truth.slice(n_train, n)?, &ranges)?)
            } else {
                None
            };
            (Some(train_m), fc)
        }
        None => (None, None),
    };
    Ok(SeedRun {
        seed: model.mlp_spec().seed,
        params: outcome.params,
        loss_history: outcome.loss_history,
        final_loss: outcome.final_loss,
        diverged: outcome.diverged.map(|e| e.to_string()),
        prediction,
        train_nrmse,
        forecast_nrmse,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Picks the best of `runs` (lowest score, earliest seed on ties).
pub fn select_best(config: &CaseConfig, runs: Vec<SeedRun>) -> Result<CaseResult> {
    let seed_scores = runs
        .iter()
        .map(|r| SeedScore {
            seed: r.seed,
            score: r.score(),
            diverged: r.diverged.is_some(),
        })
        .collect();
    let wall_time = runs.iter().map(|r| r.wall_time).sum();
    let best_idx = runs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| match (a.score(), b.score()) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument("no runs to select from".into()))?;
    let best = runs.into_iter().nth(best_idx).expect("index in range");
    let plausible = best.score().is_some_and(|s| s < config.plausibility_threshold);
    Ok(CaseResult {
        best,
        seed_scores,
        plausible,
        wall_time,
    })
}

/// Runs every seed of `config` (in parallel on the current rayon pool) and
/// keeps the best.
pub fn run_case(config: &CaseConfig, bundle: &DataBundle) -> Result<CaseResult> {
    config.validate()?;
    check_bundle(config, bundle)?;
    let runs = (0..config.n_seeds)
        .into_par_iter()
        .map(|i| run_seed(config, bundle, i))
        .collect::<Result<Vec<_>>>()?;
    select_best(config, runs)
}

fn check_bundle(config: &CaseConfig, bundle: &DataBundle) -> Result<()> {
    if bundle.noise != config.noise {
        return Err(Error::InvalidArgument(format!(
            "data bundle carries noise {} (seed {}), case expects {} (seed {})",
            bundle.noise.fraction, bundle.noise.seed, config.noise.fraction, config.noise.seed
        )));
    }
    Ok(())
}

/// Outcome of one grid fraction in a breakdown sweep.
#[derive(Debug, Clone)]
pub struct BreakdownEntry {
    pub fraction: f64,
    pub result: std::result::Result<CaseResult, Error>,
}

impl BreakdownEntry {
    pub fn plausible(&self) -> bool {
        self.result.as_ref().is_ok_and(|r| r.plausible)
    }
}

#[derive(Debug, Clone)]
pub struct BreakdownReport {
    pub model_kind: ModelKind,
    pub noise: NoiseLevel,
    pub threshold: f64,
    pub entries: Vec<BreakdownEntry>,
    /// Smallest fraction such that it and every larger grid fraction are
    /// plausible.
    pub breakdown_fraction: Option<f64>,
    /// Plausible fractions below the first implausible one.
    pub anomalies: Vec<f64>,
}

impl BreakdownReport {
    pub fn plausibility(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.plausible()).collect()
    }
}

/// Smallest fraction of a descending grid reached before the first
/// implausible entry, and the plausible entries found after it.
pub fn monotone_breakdown(fractions: &[f64], plausible: &[bool]) -> (Option<f64>, Vec<f64>) {
    let first_fail = plausible.iter().position(|p| !p).unwrap_or(plausible.len());
    let found = first_fail.checked_sub(1).map(|i| fractions[i]);
    let anomalies = fractions
        .iter()
        .zip(plausible)
        .skip(first_fail)
        .filter(|(_, p)| **p)
        .map(|(f, _)| *f)
        .collect();
    (found, anomalies)
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("evaluation.breakdown_grid is empty".into()));
    }
    if let Some(f) = grid.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::Config(format!("breakdown fraction {f} is outside (0, 1)")));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("evaluation.breakdown_grid must be strictly descending".into()));
    }
    Ok(())
}

/// Runs `base` at every fraction of `grid`. All (fraction, seed) jobs share
/// the current rayon pool; results are grouped by that key, so the report
/// does not depend on scheduling. A failing case is recorded in its entry
/// and the remaining fractions still run.
pub fn breakdown_point(base: &CaseConfig, bundle: &DataBundle, grid: &[f64]) -> Result<BreakdownReport> {
    validate_grid(grid)?;
    base.validate()?;
    check_bundle(base, bundle)?;
    let configs: Vec<CaseConfig> = grid
        .iter()
        .map(|&f| {
            Ok(CaseConfig {
                split: SplitSpec::new(f)?,
                ..base.clone()
            })
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..base.n_seeds).map(move |s| (c, s)))
        .collect();
    let mut outcomes: Vec<((usize, usize), Result<SeedRun>)> = jobs
        .par_iter()
        .map(|&(c, s)| ((c, s), run_seed(&configs[c], bundle, s)))
        .collect();
    outcomes.sort_by_key(|(k, _)| *k);

    let mut per_case: Vec<Vec<Result<SeedRun>>> = (0..grid.len()).map(|_| Vec::new()).collect();
    for ((c, _), r) in outcomes {
        per_case[c].push(r);
    }
    let entries: Vec<BreakdownEntry> = per_case
        .into_iter()
        .zip(&configs)
        .zip(grid)
        .map(|((runs, cfg), &fraction)| {
            let result = runs
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .and_then(|runs| select_best(cfg, runs));
            BreakdownEntry { fraction, result }
        })
        .collect();
    let plausible: Vec<bool> = entries.iter().map(|e| e.plausible()).collect();
    let (breakdown_fraction, anomalies) = monotone_breakdown(grid, &plausible);
    Ok(BreakdownReport {
        model_kind: base.model_kind,
        noise: base.noise,
        threshold: base.plausibility_threshold,
        entries,
        breakdown_fraction,
        anomalies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_ground_truth, SystemSetup};
    use crate::dynamics::SystemState;
    use crate::integrators::TimeGrid;
    use crate::models::default_mlp_spec;
    use crate::optimizers::{FirstOrder, Stage1};
    use approx::assert_relative_eq;

    fn traj(values: Vec<Vec<f64>>) -> Trajectory {
        let n = values.len();
        let grid = TimeGrid::new((0..n).map(|k| k as f64).collect()).unwrap();
        let states = values
            .into_iter()
            .map(|v| SystemState::new(v, 2).unwrap())
            .collect();
        Trajectory::new(grid, states).unwrap()
    }

    fn two_body_rows(offset: f64) -> Vec<Vec<f64>> {
        (0..4)
            .map(|k| {
                let t = k as f64 / 3.0;
                vec![t + offset, 0.0, 1.0, 0.0, -t, 0.0, -1.0, 0.0]
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = traj(two_body_rows(0.0));
        let m = forecast_metrics(&t, &t, &t.component_ranges()).unwrap();
        assert_eq!(m.aggregate, 0.0);
        // Constant components carry no range and are left out.
        assert_eq!(m.per_component.iter().flatten().count(), 2);
    }

    #[test]
    fn constant_offset_on_one_component() {
        // Component ranges of 1.0 each; every component varies.
        let base: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let t = k as f64 / 3.0;
                vec![t, 1.0 - t, t, t, -t, t, t, 1.0 - t]
            })
            .collect();
        let truth = traj(base.clone());
        let mut shifted = base;
        for row in shifted.iter_mut() {
            row[3] += 0.1;
        }
        let pred = traj(shifted);
        let m = forecast_metrics(&pred, &truth, &truth.component_ranges()).unwrap();
        assert_relative_eq!(m.per_component[3].unwrap(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(m.aggregate, 0.1 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn coasting_forecast_matches_oracle() {
        // Bodies keep their last training velocity over the forecast window.
        let setup = SystemSetup::figure_eight();
        let truth = generate_ground_truth(&setup).unwrap();
        let n = truth.len();
        let start = SplitSpec::new(0.8).unwrap().train_len(n);
        let anchor = truth.states()[start - 1].clone();
        let t_anchor = truth.times()[start - 1];
        let coast: Vec<SystemState> = truth.times()[start..]
            .iter()
            .map(|&t| {
                let mut v = anchor.to_vec();
                for i in 0..3 {
                    for k in 0..3 {
                        v[6 * i + k] += (t - t_anchor) * anchor[6 * i + 3 + k];
                    }
                }
                SystemState::new(v, 3).unwrap()
            })
            .collect();
        let window = truth.slice(start, n).unwrap();
        let pred = Trajectory::new(window.grid().clone(), coast.clone()).unwrap();
        let ranges = truth.component_ranges();
        let m = forecast_metrics(&pred, &window, &ranges).unwrap();

        // Independent oracle: direct sums over the planar components.
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..18 {
            if ranges[c] < 1e-9 {
                continue;
            }
            let mut se = 0.0;
            for (p, t) in coast.iter().zip(window.states()) {
                se += (p[c] - t[c]) * (p[c] - t[c]);
            }
            total += (se / coast.len() as f64).sqrt() / ranges[c];
            count += 1;
        }
        assert_eq!(count, 12);
        assert_relative_eq!(m.aggregate, total / count as f64, max_relative = 1e-12);
        assert!(m.aggregate > DEFAULT_THRESHOLD, "coasting is not plausible");
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = traj(two_body_rows(0.0));
        let b = a.slice(0, 3).unwrap();
        assert!(matches!(
            forecast_metrics(&b, &a, &a.component_ranges()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn monotone_rule() {
        let g = DEFAULT_BREAKDOWN_GRID;
        assert_eq!(monotone_breakdown(&g, &[true, false, false, false, false]), (Some(0.9), vec![]));
        assert_eq!(monotone_breakdown(&g, &[true, true, true, true, false]), (Some(0.2), vec![]));
        assert_eq!(monotone_breakdown(&g, &[false; 5]), (None, vec![]));
        assert_eq!(monotone_breakdown(&g, &[true, false, true, false, true]), (Some(0.9), vec![0.4, 0.1]));
        assert_eq!(monotone_breakdown(&g, &[true; 5]), (Some(0.1), vec![]));
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&DEFAULT_BREAKDOWN_GRID).is_ok());
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.2, 0.4]).is_err());
        assert!(validate_grid(&[1.0, 0.5]).is_err());
        assert!(validate_grid(&[0.5, 0.5]).is_err());
    }

    fn self_generated(kind: ModelKind, seed: u64) -> (CaseConfig, DataBundle) {
        let mut setup = SystemSetup::figure_eight();
        setup.n_points = 12;
        let mlp = match kind {
            ModelKind::Ude => default_mlp_spec(kind, &setup.bodies, seed),
            ModelKind::NeuralOde => MlpSpec::new(vec![18, 8, 18], crate::neural::Activation::Tanh, seed).unwrap(),
        };
        let model = Model::new(kind, mlp.clone(), setup.bodies.clone()).unwrap();
        let truth = model
            .predict(&model.init_params(), &setup.initial_state, &setup.grid().unwrap(), 4)
            .unwrap();
        let noise = NoiseLevel::new(0.0, 0).unwrap();
        let bundle = DataBundle {
            setup,
            noisy: truth.clone(),
            truth,
            noise,
        };
        let mut train_config = TrainConfig::default_for(kind);
        train_config.stage1 = Stage1 {
            optimizer: FirstOrder::Adam,
            lr: 1e-3,
            epochs: 3,
            weight_decay: 0.0,
            horizon: None,
        };
        train_config.stage2 = None;
        let config = CaseConfig {
            model_kind: kind,
            mlp,
            noise,
            split: SplitSpec::new(1.0).unwrap(),
            train_config,
            plausibility_threshold: DEFAULT_THRESHOLD,
            n_seeds: 1,
        };
        (config, bundle)
    }

    #[test]
    fn self_generated_closure() {
        for kind in [ModelKind::Ude, ModelKind::NeuralOde] {
            let (config, bundle) = self_generated(kind, 11);
            let r = run_case(&config, &bundle).unwrap();
            assert!(r.best.forecast_nrmse.is_none());
            assert!(r.best.train_nrmse.as_ref().unwrap().aggregate < 1e-6);
            assert!(r.plausible);
            let mut split = config.clone();
            split.split = SplitSpec::new(0.5).unwrap();
            let r = run_case(&split, &bundle).unwrap();
            assert!(r.best.forecast_nrmse.unwrap().aggregate < 1e-6);
        }
    }

    #[test]
    fn best_seed_and_scores() {
        let (mut config, bundle) = self_generated(ModelKind::Ude, 4);
        config.n_seeds = 3;
        config.split = SplitSpec::new(0.5).unwrap();
        let r = run_case(&config, &bundle).unwrap();
        assert_eq!(r.seed_scores.len(), 3);
        assert_eq!(r.seed_scores.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![4, 5, 6]);
        // Seed 4 generated the data.
        assert_eq!(r.best.seed, 4);
        let min = r.seed_scores.iter().filter_map(|s| s.score).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best.forecast_nrmse.unwrap().aggregate, min);
    }

    #[test]
    fn breakdown_is_independent_of_pool_size() {
        let (mut config, bundle) = self_generated(ModelKind::Ude, 2);
        config.n_seeds = 2;
        let grid = [0.8, 0.5];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| breakdown_point(&config, &bundle, &grid).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.plausibility(), b.plausibility());
        assert_eq!(a.breakdown_fraction, b.breakdown_fraction);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            let (x, y) = (x.result.as_ref().unwrap(), y.result.as_ref().unwrap());
            assert_eq!(x.best.params, y.best.params);
            assert_eq!(x.seed_scores, y.seed_scores);
        }
        assert_eq!(a.breakdown_fraction, Some(0.5));
    }

    #[test]
    fn case_config_validation() {
        let (mut config, bundle) = self_generated(ModelKind::Ude, 2);
        config.n_seeds = 0;
        assert!(run_case(&config, &bundle).is_err());
        config.n_seeds = 1;
        config.plausibility_threshold = 0.0;
        assert!(run_case(&config, &bundle).is_err());
        config.plausibility_threshold = 0.15;
        config.noise = NoiseLevel::new(0.07, 0).unwrap();
        assert!(run_case(&config, &bundle).is_err());
    }
}

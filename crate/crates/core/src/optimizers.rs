//! Adam, AdamW and limited-memory BFGS, plus the two-stage training loop.

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::dynamics::SystemState;
use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::models::{loss_and_gradient, trajectory_loss, LossSettings, Model, ModelKind};
use crate::neural::ParamVector;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Consecutive rejected steps before training gives up.
const MAX_REJECTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstOrder {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1 {
    pub optimizer: FirstOrder,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Growing training window; `None` fits the full window from the start.
    #[serde(default)]
    pub horizon: Option<Horizon>,
}

/// The first-order stage fits a prefix of the training window that grows
/// linearly from `start_points` to the full window over the first
/// `ramp_fraction` of the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    pub start_points: usize,
    pub ramp_fraction: f64,
}

impl Horizon {
    pub const DEFAULT: Horizon = Horizon {
        start_points: 5,
        ramp_fraction: 0.7,
    };

    /// Number of leading data points fitted at `epoch`.
    pub fn window(&self, epoch: usize, epochs: usize, n: usize) -> usize {
        let ramp = self.ramp_fraction * epochs as f64;
        let start = self.start_points.clamp(2, n.max(2));
        if ramp <= 0.0 || start >= n {
            return n;
        }
        let f = (epoch as f64 / ramp).min(1.0);
        let w = (start as f64 + f * (n - start) as f64).round() as usize;
        w.clamp(start, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2 {
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: Stage1,
    #[serde(default)]
    pub stage2: Option<Stage2>,
    #[serde(default)]
    pub loss: LossSettings,
}

impl TrainConfig {
    /// Adam at 1e-3 for 200 epochs, then 200 L-BFGS iterations.
    pub fn node_default() -> Self {
        TrainConfig {
            stage1: Stage1 {
                optimizer: FirstOrder::Adam,
                lr: 1e-3,
                epochs: 200,
                weight_decay: 0.0,
                horizon: Some(Horizon::DEFAULT),
            },
            stage2: Some(Stage2 { max_iters: 200 }),
            loss: LossSettings::default(),
        }
    }

    /// AdamW at 1e-3 for 700 epochs.
    pub fn ude_default() -> Self {
        TrainConfig {
            stage1: Stage1 {
                optimizer: FirstOrder::AdamW,
                lr: 1e-3,
                epochs: 700,
                weight_decay: DEFAULT_WEIGHT_DECAY,
                horizon: Some(Horizon::DEFAULT),
            },
            stage2: None,
            loss: LossSettings::default(),
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::NeuralOde => Self::node_default(),
            ModelKind::Ude => Self::ude_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stage1;
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return Err(Error::Config(format!("training.stage1.lr must be positive, got {}", s.lr)));
        }
        if !(s.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "training.stage1.weight_decay must be non-negative, got {}",
                s.weight_decay
            )));
        }
        if let Some(h) = s.horizon {
            if !(0.0..=1.0).contains(&h.ramp_fraction) {
                return Err(Error::Config(format!(
                    "training.stage1.horizon.ramp_fraction must lie in [0, 1], got {}",
                    h.ramp_fraction
                )));
            }
        }
        if self.loss.substeps == 0 {
            return Err(Error::Config("training.loss.substeps must be at least 1".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// Moment estimates of Adam/AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        OptState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut OptState, params: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.first_moment.len());
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        let m = BETA1 * state.first_moment[i] + (1.0 - BETA1) * g;
        let v = BETA2 * state.second_moment[i] + (1.0 - BETA2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
    }
}

/// Adam followed by decoupled decay `p <- p - lr * weight_decay * p`.
pub fn adamw_step(state: &mut OptState, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
    adam_step(state, params, grad, lr);
    if weight_decay != 0.0 {
        let shrink = 1.0 - lr * weight_decay;
        for p in params.iter_mut() {
            *p *= shrink;
        }
    }
}

pub const LBFGS_MEMORY: usize = 10;
pub const ARMIJO_C1: f64 = 1e-4;
pub const MAX_HALVINGS: usize = 40;
pub const GRAD_TOL: f64 = 1e-8;
const MAX_EXPANSIONS: usize = 10;

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub params: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    /// Loss after each accepted step.
    pub history: Vec<f64>,
    /// Set when a line search exhausted its halvings; `params` is then the
    /// best point found before the failure.
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS (memory 10) with Armijo backtracking by halving.
///
/// The loss at the returned point never exceeds the starting loss.
/// Non-finite or failed loss evaluations during the line search count as
/// insufficient decrease.
pub fn bfgs_minimize<L, G>(
    mut loss_fn: L,
    mut grad_fn: G,
    params0: &[f64],
    max_iters: usize,
) -> Result<BfgsOutcome>
where
    L: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = params0.len();
    let mut x = params0.to_vec();
    let mut f = loss_fn(&x)?;
    let mut g = grad_fn(&x)?;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut history = Vec::new();
    let mut alpha_buf = vec![0.0; LBFGS_MEMORY];
    let mut line_search_failed = false;
    let mut iterations = 0;

    while iterations < max_iters {
        if dot(&g, &g).sqrt() < GRAD_TOL {
            break;
        }
        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        for (k, (s, y, rho)) in memory.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[k] = a;
            for i in 0..n {
                d[i] -= a * y[i];
            }
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for (k, (s, y, rho)) in memory.iter().enumerate() {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (alpha_buf[k] - b) * s[i];
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            memory.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + step * d).collect();
            if let Ok(ft) = loss_fn(&trial) {
                if ft.is_finite() && ft <= f + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        // A unit step that already satisfies Armijo is expanded while the
        // loss keeps falling; without this the iteration creeps along
        // curved valleys.
        if let Some((_, f_acc)) = accepted.as_ref().filter(|_| step == 1.0) {
            let mut f_best = *f_acc;
            for _ in 0..MAX_EXPANSIONS {
                let t = step * 2.0;
                let trial: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + t * d).collect();
                match loss_fn(&trial) {
                    Ok(ft) if ft.is_finite() && ft < f_best && ft <= f + ARMIJO_C1 * t * slope => {
                        f_best = ft;
                        step = t;
                        accepted = Some((trial, ft));
                    }
                    _ => break,
                }
            }
        }
        let Some((x_new, f_new)) = accepted else {
            warn!("line search failed after {MAX_HALVINGS} halvings at iteration {iterations}");
            line_search_failed = true;
            break;
        };
        let g_new = match grad_fn(&x_new) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => {
                line_search_failed = true;
                break;
            }
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
    }
    Ok(BfgsOutcome {
        params: x,
        loss: f,
        iterations,
        history,
        line_search_failed,
    })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Loss after every accepted step, first-order stage then L-BFGS.
    pub loss_history: Vec<f64>,
    pub final_loss: Option<f64>,
    /// Set when training aborted on a diverging trajectory.
    pub diverged: Option<Error>,
    pub line_search_failed: bool,
}

/// Full-batch training of `model` on `data`, starting from the model's
/// initialization and integrating from `state0`.
///
/// A first-order step whose trajectory diverges is rejected and retried
/// with half the learning rate; after five consecutive rejections training
/// stops and returns the best parameters seen.
pub fn train(
    model: &Model,
    data: &Trajectory,
    state0: &SystemState,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(model, model.init_params(), data, state0, config)
}

pub fn train_from(
    model: &Model,
    init: ParamVector,
    data: &Trajectory,
    state0: &SystemState,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let settings = config.loss;
    let mut params = init.into_vec();
    let mut history = Vec::new();
    let stage1 = config.stage1;

    if stage1.epochs == 0 && config.stage2.is_none() {
        return Ok(TrainOutcome {
            params: ParamVector::new(params),
            loss_history: history,
            final_loss: None,
            diverged: None,
            line_search_failed: false,
        });
    }

    let n = data.len();
    let window_at = |epoch: usize| match stage1.horizon {
        Some(h) => h.window(epoch, stage1.epochs, n),
        None => n,
    };
    let eval_on = |p: &[f64], w: usize| -> Result<(f64, Vec<f64>)> {
        let p = ParamVector::new(p.to_vec());
        let (l, g) = if w == n {
            loss_and_gradient(model, &p, data, state0, &settings)?
        } else {
            loss_and_gradient(model, &p, &data.slice(0, w)?, state0, &settings)?
        };
        Ok((l, g.into_vec()))
    };
    let diverged_at_start = |e: Error, params: Vec<f64>, history: Vec<f64>| TrainOutcome {
        params: ParamVector::new(params),
        loss_history: history,
        final_loss: None,
        diverged: Some(e),
        line_search_failed: false,
    };

    let mut window = if stage1.epochs > 0 { window_at(0) } else { n };
    let (mut loss, mut grad) = match eval_on(&params, window) {
        Ok(v) => v,
        Err(e @ Error::Diverged { .. }) => return Ok(diverged_at_start(e, params, history)),
        Err(e) => return Err(e),
    };
    // Only full-window losses are comparable, so the best point is tracked
    // once the window has reached the whole training set.
    let mut best = (window == n).then(|| (loss, params.clone()));
    let mut opt = OptState::new(params.len());

    for epoch in 0..stage1.epochs {
        let w = window_at(epoch);
        if w != window {
            window = w;
            match eval_on(&params, window) {
                Ok((_, g)) => grad = g,
                Err(Error::Diverged { .. }) => {
                    return Ok(abort(best, params, history, epoch));
                }
                Err(e) => return Err(e),
            }
        }
        let mut lr = stage1.lr;
        let mut rejections = 0;
        loop {
            let mut trial_state = opt.clone();
            let mut trial = params.clone();
            match stage1.optimizer {
                FirstOrder::Adam => adam_step(&mut trial_state, &mut trial, &grad, lr),
                FirstOrder::AdamW => {
                    adamw_step(&mut trial_state, &mut trial, &grad, lr, stage1.weight_decay)
                }
            }
            match eval_on(&trial, window) {
                Ok((l, g)) if l.is_finite() => {
                    opt = trial_state;
                    params = trial;
                    loss = l;
                    grad = g;
                    break;
                }
                Ok(_) | Err(Error::Diverged { .. }) => {
                    rejections += 1;
                    debug!("epoch {epoch}: step rejected ({rejections}), halving lr");
                    if rejections >= MAX_REJECTIONS {
                        return Ok(abort(best, params, history, epoch));
                    }
                    lr *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        history.push(loss);
        if window == n && best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, params.clone()));
        }
    }
    let best = match best {
        Some(b) => b,
        None => match eval_on(&params, n) {
            Ok((l, _)) => (l, params),
            Err(e @ Error::Diverged { .. }) => return Ok(diverged_at_start(e, params, history)),
            Err(e) => return Err(e),
        },
    };

    // Continue from the best first-order point.
    let (mut best_loss, mut best_params) = best;
    let mut line_search_failed = false;
    if let Some(stage2) = config.stage2 {
        let outcome = bfgs_minimize(
            |p| trajectory_loss(model, &ParamVector::new(p.to_vec()), data, state0, &settings),
            |p| eval_on(p, n).map(|(_, g)| g),
            &best_params,
            stage2.max_iters,
        )?;
        history.extend_from_slice(&outcome.history);
        line_search_failed = outcome.line_search_failed;
        if outcome.loss <= best_loss {
            best_loss = outcome.loss;
            best_params = outcome.params;
        }
    }
    Ok(TrainOutcome {
        params: ParamVector::new(best_params),
        loss_history: history,
        final_loss: Some(best_loss),
        diverged: None,
        line_search_failed,
    })
}

/// Outcome of a run stopped by repeated divergence: the best full-window
/// point if one exists, else the current parameters.
fn abort(best: Option<(f64, Vec<f64>)>, params: Vec<f64>, history: Vec<f64>, epoch: usize) -> TrainOutcome {
    let (final_loss, params) = match best {
        Some((l, p)) => (Some(l), p),
        None => (None, params),
    };
    TrainOutcome {
        params: ParamVector::new(params),
        loss_history: history,
        final_loss,
        diverged: Some(Error::Diverged { step: epoch }),
        line_search_failed: false,
    }
}

//! Fixed-step classical RK4 and an adaptive Dormand–Prince 5(4) pair.
//!
//! Both integrators take the right-hand side as a closure
//! `FnMut(t, y, dy) -> Result<()>` writing the derivative of `y` into `dy`.

use serde::{Deserialize, Serialize};

use crate::dynamics::SystemState;
use crate::error::{Error, Result};

/// Strictly increasing sample times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("time grid is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("time grid contains non-finite values".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("time grid is not strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    /// `n` equally spaced points covering `[start, end]` inclusive.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n == 1 {
            return TimeGrid::new(vec![start]);
        }
        if n == 0 || !(end > start) {
            return Err(Error::InvalidArgument(format!(
                "uniform grid needs n >= 1 and end > start (n={n}, span=[{start}, {end}])"
            )));
        }
        let h = (end - start) / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|k| start + h * k as f64).collect();
        times[n - 1] = end;
        TimeGrid::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// True when consecutive spacings deviate from their mean by less than
    /// 1e-12 relative.
    pub fn is_uniform(&self) -> bool {
        if self.times.len() < 3 {
            return true;
        }
        let mean = (self.end() - self.start()) / (self.times.len() - 1) as f64;
        self.times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - mean).abs() < 1e-12 * mean.abs())
    }

    /// Sub-grid `[start, end)` by index.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        TimeGrid::new(self.times[start..end].to_vec())
    }
}

/// States sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<SystemState>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: Vec<SystemState>) -> Result<Self> {
        if grid.len() != states.len() {
            return Err(Error::GridMismatch(format!(
                "{} grid points but {} states",
                grid.len(),
                states.len()
            )));
        }
        if let Some(first) = states.first() {
            if states.iter().any(|s| s.len() != first.len()) {
                return Err(Error::InvalidArgument("states have differing lengths".into()));
            }
        }
        if let Some(k) = states.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
        Ok(Trajectory { grid, states })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    pub fn states(&self) -> &[SystemState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of components in each state.
    pub fn state_len(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// Points `[start, end)` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Trajectory::new(self.grid.slice(start, end)?, self.states[start..end].to_vec())
    }

    /// Per-component `max - min` over all samples.
    pub fn component_ranges(&self) -> Vec<f64> {
        let d = self.state_len();
        (0..d)
            .map(|c| {
                let (lo, hi) = self
                    .states
                    .iter()
                    .map(|s| s[c])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                hi - lo
            })
            .collect()
    }
}

fn check_finite(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

/// Stage buffers reused across RK4 steps.
#[derive(Debug, Default)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn resize(&mut self, n: usize) {
        for v in [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.tmp] {
            v.resize(n, 0.0);
        }
    }
}

/// One classical RK4 step, in place.
pub fn rk4_step_in_place<F>(
    rhs: &mut F,
    y: &mut [f64],
    t: f64,
    dt: f64,
    ws: &mut Rk4Workspace,
) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len();
    ws.resize(n);
    let Rk4Workspace { k1, k2, k3, k4, tmp } = ws;
    let half = 0.5 * dt;

    rhs(t, y, k1)?;
    check_finite(k1, 0)?;
    for i in 0..n {
        tmp[i] = y[i] + half * k1[i];
    }
    rhs(t + half, tmp, k2)?;
    check_finite(k2, 0)?;
    for i in 0..n {
        tmp[i] = y[i] + half * k2[i];
    }
    rhs(t + half, tmp, k3)?;
    check_finite(k3, 0)?;
    for i in 0..n {
        tmp[i] = y[i] + dt * k3[i];
    }
    rhs(t + dt, tmp, k4)?;
    check_finite(k4, 0)?;
    let sixth = dt / 6.0;
    for i in 0..n {
        y[i] += sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    check_finite(y, 0)
}

/// Classical 4-stage Runge–Kutta update of `state` over `dt`.
pub fn rk4_step<F>(rhs: &mut F, state: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut y = state.to_vec();
    rk4_step_in_place(rhs, &mut y, t, dt, &mut Rk4Workspace::new(state.len()))?;
    Ok(y)
}

/// RK4 over `grid` with `substeps` equal steps per grid interval.
///
/// A non-finite state is reported with the index of the failing interval.
pub fn integrate_fixed<F>(
    rhs: &mut F,
    state0: &SystemState,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let times = grid.times();
    let mut ws = Rk4Workspace::new(state0.len());
    let mut y = state0.to_vec();
    let mut states = Vec::with_capacity(times.len());
    states.push(state0.clone());
    for (interval, w) in times.windows(2).enumerate() {
        let dt = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + dt * s as f64;
            rk4_step_in_place(rhs, &mut y, t, dt, &mut ws).map_err(|e| match e {
                Error::NonFiniteState { .. } => Error::NonFiniteState { step: interval },
                other => other,
            })?;
        }
        states.push(SystemState::from_vec_unchecked(y.clone()));
    }
    Trajectory::new(grid.clone(), states)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the 5th- and embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const PI_BETA: f64 = 0.04;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn rms_norm(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(x, s)| (x / s) * (x / s)).sum();
    (s / v.len() as f64).sqrt()
}

/// Adaptive Dormand–Prince 5(4) integration with PI step-size control.
///
/// Steps are shortened to land exactly on every point of `save_at`, so no
/// interpolation is involved. The local error estimate is controlled
/// component-wise against `atol + rtol * |y|`.
pub fn integrate_adaptive<F>(
    rhs: &mut F,
    state0: &SystemState,
    t_span: (f64, f64),
    rtol: f64,
    atol: f64,
    save_at: &TimeGrid,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let (t0, t1) = t_span;
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("t_span ({t0}, {t1}) is not ordered")));
    }
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::InvalidArgument("rtol and atol must be positive".into()));
    }
    if save_at.start() < t0 || save_at.end() > t1 {
        return Err(Error::InvalidArgument(format!(
            "save grid [{}, {}] is outside t_span [{t0}, {t1}]",
            save_at.start(),
            save_at.end()
        )));
    }

    let n = state0.len();
    let width = t1 - t0;
    let h_min = 1e-12 * width;
    let mut y = state0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut scale = vec![0.0; n];

    let mut t = t0;
    rhs(t, &y, &mut k[0])?;
    check_finite(&k[0], 0)?;

    // Initial step from the ratio of state to derivative magnitudes.
    for i in 0..n {
        scale[i] = atol + rtol * y[i].abs();
    }
    let d0 = rms_norm(&y, &scale);
    let d1 = rms_norm(&k[0], &scale);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(width).max(h_min);

    let mut states = Vec::with_capacity(save_at.len());
    let saves = save_at.times();
    let mut next_save = 0;
    while next_save < saves.len() && saves[next_save] <= t0 {
        states.push(state0.clone());
        next_save += 1;
    }

    let mut err_old: f64 = 1e-4;
    let mut steps = 0usize;
    while next_save < saves.len() {
        let target = saves[next_save];
        let clamped = t + h >= target;
        let h_step = if clamped { target - t } else { h };
        if h_step < h_min && !clamped {
            return Err(Error::StepSizeUnderflow { t, dt: h_step });
        }

        for s in 1..7 {
            stage.copy_from_slice(&y);
            for (j, a) in A[s].iter().enumerate().take(s) {
                if *a != 0.0 {
                    for i in 0..n {
                        stage[i] += h_step * a * k[j][i];
                    }
                }
            }
            let (_, rest) = k.split_at_mut(s);
            rhs(t + C[s] * h_step, &stage, &mut rest[0])?;
            check_finite(&rest[0], steps)?;
        }
        // The last stage is evaluated at the 5th-order solution (FSAL).
        y_new.copy_from_slice(&stage);
        for i in 0..n {
            let mut e = 0.0;
            for (s, coef) in E.iter().enumerate() {
                e += coef * k[s][i];
            }
            err[i] = h_step * e;
            scale[i] = atol + rtol * y[i].abs().max(y_new[i].abs());
        }
        let err_norm = rms_norm(&err, &scale);
        let fac11 = err_norm.powf(0.2 - PI_BETA * 0.75);

        if err_norm <= 1.0 {
            t = if clamped { target } else { t + h_step };
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            steps += 1;
            let fac = (fac11 / err_old.powf(PI_BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let h_next = h_step / fac;
            err_old = err_norm.max(1e-4);
            // A step shortened to hit a save point does not shrink the proposal.
            h = if clamped { h.max(h_next) } else { h_next };
            if clamped {
                states.push(SystemState::from_vec_unchecked(y.clone()));
                next_save += 1;
            }
        } else {
            h = h_step / (fac11 / SAFETY).min(1.0 / FAC_MIN);
            if h < h_min {
                return Err(Error::StepSizeUnderflow { t, dt: h });
            }
        }
    }
    Trajectory::new(save_at.clone(), states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{gravitational_rhs_into, total_energy, BodySpec};
    use approx::assert_relative_eq;

    fn decay(_: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        dy[0] = -y[0];
        Ok(())
    }

    fn oscillator(_: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        dy[0] = y[1];
        dy[1] = -y[0];
        Ok(())
    }

    fn zero(_: f64, _: &[f64], dy: &mut [f64]) -> Result<()> {
        dy.fill(0.0);
        Ok(())
    }

    fn st(v: Vec<f64>) -> SystemState {
        SystemState::new(v, 1).unwrap()
    }

    #[test]
    fn rk4_examples() {
        let y = rk4_step(&mut zero, &[1.0, 2.0], 0.0, 0.3).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        let y = rk4_step(&mut decay, &[1.0], 0.0, 0.1).unwrap();
        assert!((y[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((y[0] - 0.904_837_42).abs() < 1e-7);
        let mut one = |_: f64, _: &[f64], dy: &mut [f64]| {
            dy[0] = 1.0;
            Ok(())
        };
        assert_eq!(rk4_step(&mut one, &[0.0], 0.0, 0.5).unwrap(), vec![0.5]);
        assert!(rk4_step(&mut decay, &[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn rk4_reports_non_finite() {
        let mut bad = |_: f64, _: &[f64], dy: &mut [f64]| {
            dy[0] = f64::NAN;
            Ok(())
        };
        assert!(matches!(
            rk4_step(&mut bad, &[0.0], 0.0, 0.1),
            Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let error = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let mut y = vec![1.0];
            let mut ws = Rk4Workspace::new(1);
            for s in 0..steps {
                rk4_step_in_place(&mut decay, &mut y, s as f64 * dt, dt, &mut ws).unwrap();
            }
            (y[0] - (-1.0f64).exp()).abs()
        };
        let e = [error(0.1), error(0.05), error(0.025)];
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn fixed_single_point_and_zero_rhs() {
        let g1 = TimeGrid::new(vec![0.0]).unwrap();
        let tr = integrate_fixed(&mut decay, &st(vec![1.0, 0.0]), &g1, 4).unwrap();
        assert_eq!(tr.len(), 1);
        let g = TimeGrid::uniform(0.0, 6.9, 70).unwrap();
        let s0 = st(vec![0.3, -1.0]);
        let tr = integrate_fixed(&mut zero, &s0, &g, 4).unwrap();
        assert_eq!(tr.len(), 70);
        assert!(tr.states().iter().all(|s| *s == s0));
    }

    #[test]
    fn fixed_reports_failing_interval() {
        let mut blowup = |t: f64, _: &[f64], dy: &mut [f64]| {
            dy[0] = if t > 0.25 { f64::INFINITY } else { 0.0 };
            Ok(())
        };
        let g = TimeGrid::uniform(0.0, 1.0, 11).unwrap();
        let err = integrate_fixed(&mut blowup, &st(vec![0.0, 0.0]), &g, 1).unwrap_err();
        assert_eq!(err, Error::NonFiniteState { step: 2 });
    }

    #[test]
    fn adaptive_zero_rhs_copies() {
        let g = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        let s0 = st(vec![2.0, -3.0]);
        let tr = integrate_adaptive(&mut zero, &s0, (0.0, 1.0), 1e-9, 1e-9, &g).unwrap();
        assert!(tr.states().iter().all(|s| *s == s0));
    }

    #[test]
    fn adaptive_harmonic_oscillator() {
        let tau = 2.0 * std::f64::consts::PI;
        let g = TimeGrid::uniform(0.0, tau, 9).unwrap();
        let tr = integrate_adaptive(&mut oscillator, &st(vec![1.0, 0.0]), (0.0, tau), 1e-9, 1e-9, &g)
            .unwrap();
        for (t, s) in tr.times().iter().zip(tr.states()) {
            assert!((s[0] - t.cos()).abs() < 1e-7);
            assert!((s[1] + t.sin()).abs() < 1e-7);
        }
        let last = tr.states().last().unwrap();
        assert!((last[0] - 1.0).abs() < 1e-7 && last[1].abs() < 1e-7);
    }

    #[test]
    fn adaptive_rejects_bad_arguments() {
        let g = TimeGrid::uniform(0.0, 2.0, 3).unwrap();
        let s0 = st(vec![1.0, 0.0]);
        assert!(integrate_adaptive(&mut oscillator, &s0, (0.0, 1.0), 1e-9, 1e-9, &g).is_err());
        assert!(integrate_adaptive(&mut oscillator, &s0, (1.0, 0.0), 1e-9, 1e-9, &g).is_err());
        assert!(integrate_adaptive(&mut oscillator, &s0, (0.0, 2.0), 0.0, 1e-9, &g).is_err());
    }

    #[test]
    fn adaptive_circular_orbit_conserves_energy() {
        let spec = BodySpec::new(vec![1.0, 1.0], 1.0, 3).unwrap();
        let w = 0.5f64.sqrt();
        let s0 = SystemState::new(
            vec![-0.5, 0., 0., 0., -w, 0., 0.5, 0., 0., 0., w, 0.],
            3,
        )
        .unwrap();
        let period = std::f64::consts::PI * 2f64.sqrt();
        let g = TimeGrid::uniform(0.0, period, 20).unwrap();
        let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| gravitational_rhs_into(y, &spec, dy);
        let tr = integrate_adaptive(&mut rhs, &s0, (0.0, period), 1e-9, 1e-9, &g).unwrap();
        let e0 = total_energy(&s0, &spec).unwrap();
        let e1 = total_energy(tr.states().last().unwrap(), &spec).unwrap();
        assert!(((e1 - e0) / e0).abs() < 1e-8);
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
        assert!(TimeGrid::uniform(0.0, 7.0, 70).unwrap().is_uniform());
        assert!(!TimeGrid::new(vec![0.0, 1.0, 3.0]).unwrap().is_uniform());
        let g = TimeGrid::uniform(0.0, 6.9, 70).unwrap();
        assert_relative_eq!(g.times()[1] - g.times()[0], 0.1, epsilon = 1e-12);
    }
}

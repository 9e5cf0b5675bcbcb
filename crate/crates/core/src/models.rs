//! Learnable vector fields and the trajectory loss.
//!
//! A Neural ODE replaces the whole right-hand side with one network mapping
//! the full state to its derivative. A UDE keeps `dr_i/dt = v_i` and the
//! pairwise summation, and learns only the interaction term
//! `NN(r_i, r_j, m_i, m_j)`, shared by every ordered pair.
//!
//! Gradients are exact for the discrete loss: the fixed-step RK4 solve is
//! recorded on a tape and swept backwards stage by stage.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::dynamics::{position, BodySpec, SystemState};
use crate::error::{Error, Result};
use crate::integrators::{integrate_fixed, TimeGrid, Trajectory};
use crate::neural::{Activation, Mlp, MlpSpec, MlpWorkspace, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(rename = "node")]
    NeuralOde,
    #[serde(rename = "ude")]
    Ude,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::NeuralOde => "node",
            ModelKind::Ude => "ude",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "node" | "neuralode" | "neural_ode" => Ok(ModelKind::NeuralOde),
            "ude" => Ok(ModelKind::Ude),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Network sizes each model kind requires for a given system.
pub fn required_io(kind: ModelKind, bodies: &BodySpec) -> (usize, usize) {
    match kind {
        ModelKind::NeuralOde => (bodies.state_len(), bodies.state_len()),
        ModelKind::Ude => (2 * bodies.spatial_dim + 2, bodies.spatial_dim),
    }
}

/// Hidden widths and activation of the default networks: three tanh layers
/// of 64 for the NODE, one swish layer of 32 for the UDE.
pub fn default_hidden(kind: ModelKind) -> (Vec<usize>, Activation) {
    match kind {
        ModelKind::NeuralOde => (vec![64, 64, 64], Activation::Tanh),
        ModelKind::Ude => (vec![32], Activation::Swish),
    }
}

/// Full layer sizes for `hidden` wrapped in the sizes `kind` requires.
pub fn layer_sizes(kind: ModelKind, bodies: &BodySpec, hidden: &[usize]) -> Vec<usize> {
    let (i, o) = required_io(kind, bodies);
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(i);
    sizes.extend_from_slice(hidden);
    sizes.push(o);
    sizes
}

pub fn default_mlp_spec(kind: ModelKind, bodies: &BodySpec, seed: u64) -> MlpSpec {
    let (hidden, activation) = default_hidden(kind);
    MlpSpec {
        layer_sizes: layer_sizes(kind, bodies, &hidden),
        activation,
        seed,
    }
}

/// A model kind bound to its network and the system it describes.
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    mlp: Mlp,
    bodies: BodySpec,
}

/// Scratch buffers for evaluating a model's vector field.
#[derive(Debug, Clone)]
pub struct ModelWorkspace {
    mlp: MlpWorkspace,
    input: Vec<f64>,
    input_cot: Vec<f64>,
}

impl Model {
    pub fn new(kind: ModelKind, mlp_spec: MlpSpec, bodies: BodySpec) -> Result<Self> {
        let (inp, out) = required_io(kind, &bodies);
        if mlp_spec.input_size() != inp {
            return Err(Error::DimensionMismatch {
                what: "network input size",
                expected: inp,
                got: mlp_spec.input_size(),
            });
        }
        if mlp_spec.output_size() != out {
            return Err(Error::DimensionMismatch {
                what: "network output size",
                expected: out,
                got: mlp_spec.output_size(),
            });
        }
        Ok(Model {
            kind,
            mlp: Mlp::new(mlp_spec),
            bodies,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn mlp_spec(&self) -> &MlpSpec {
        self.mlp.spec()
    }

    pub fn bodies(&self) -> &BodySpec {
        &self.bodies
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn init_params(&self) -> ParamVector {
        self.mlp.init_params()
    }

    pub fn workspace(&self) -> ModelWorkspace {
        let n_in = self.mlp.spec().input_size();
        ModelWorkspace {
            mlp: self.mlp.workspace(),
            input: vec![0.0; n_in],
            input_cot: vec![0.0; n_in],
        }
    }

    fn check(&self, params: &[f64], state: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        self.bodies.check_state(state)
    }

    /// Writes the model derivative of `state` into `out`. Time is not an
    /// input: both model kinds are autonomous.
    pub fn rhs_into(
        &self,
        params: &[f64],
        state: &[f64],
        out: &mut [f64],
        ws: &mut ModelWorkspace,
    ) -> Result<()> {
        self.check(params, state)?;
        match self.kind {
            ModelKind::NeuralOde => {
                self.mlp.forward_unchecked(params, state, &mut ws.mlp);
                out.copy_from_slice(self.mlp_output(ws));
            }
            ModelKind::Ude => {
                let ModelWorkspace { mlp, input, .. } = ws;
                pair_sum_rhs(state, &self.bodies, out, |ri, rj, mi, mj, acc| {
                    let d = ri.len();
                    input[..d].copy_from_slice(ri);
                    input[d..2 * d].copy_from_slice(rj);
                    input[2 * d] = mi;
                    input[2 * d + 1] = mj;
                    self.mlp.forward_unchecked(params, input, mlp);
                    for (a, f) in acc.iter_mut().zip(self.mlp.output(mlp)) {
                        *a += f;
                    }
                });
            }
        }
        Ok(())
    }

    fn mlp_output<'w>(&self, ws: &'w ModelWorkspace) -> &'w [f64] {
        self.mlp.output(&ws.mlp)
    }

    /// Vector-Jacobian product of the vector field at `state`: overwrites
    /// `state_cot` with `J_state^T cot` and adds `J_params^T cot` into
    /// `param_grad`.
    fn vjp(
        &self,
        params: &[f64],
        state: &[f64],
        cot: &[f64],
        state_cot: &mut [f64],
        param_grad: &mut [f64],
        ws: &mut ModelWorkspace,
    ) {
        match self.kind {
            ModelKind::NeuralOde => {
                self.mlp.forward_unchecked(params, state, &mut ws.mlp);
                self.mlp
                    .backward_unchecked(params, state, cot, state_cot, param_grad, &mut ws.mlp);
            }
            ModelKind::Ude => {
                let dim = self.bodies.spatial_dim;
                let n = self.bodies.n_bodies();
                state_cot.fill(0.0);
                // dr_i/dt = v_i
                for i in 0..n {
                    let base = 2 * dim * i;
                    for k in 0..dim {
                        state_cot[base + dim + k] += cot[base + k];
                    }
                }
                let ModelWorkspace {
                    mlp,
                    input,
                    input_cot,
                } = ws;
                for i in 0..n {
                    let acc_cot = &cot[2 * dim * i + dim..2 * dim * (i + 1)];
                    if acc_cot.iter().all(|c| *c == 0.0) {
                        continue;
                    }
                    for j in (0..n).filter(|&j| j != i) {
                        input[..dim].copy_from_slice(position(state, i, dim));
                        input[dim..2 * dim].copy_from_slice(position(state, j, dim));
                        input[2 * dim] = self.bodies.masses[i];
                        input[2 * dim + 1] = self.bodies.masses[j];
                        self.mlp.forward_unchecked(params, input, mlp);
                        self.mlp
                            .backward_unchecked(params, input, acc_cot, input_cot, param_grad, mlp);
                        for k in 0..dim {
                            state_cot[2 * dim * i + k] += input_cot[k];
                            state_cot[2 * dim * j + k] += input_cot[dim + k];
                        }
                    }
                }
            }
        }
    }

    /// Integrates the model with fixed-step RK4 over `grid`.
    pub fn predict(
        &self,
        params: &ParamVector,
        state0: &SystemState,
        grid: &TimeGrid,
        substeps: usize,
    ) -> Result<Trajectory> {
        self.check(params.as_slice(), state0)?;
        let mut ws = self.workspace();
        let mut rhs =
            |_: f64, y: &[f64], dy: &mut [f64]| self.rhs_into(params.as_slice(), y, dy, &mut ws);
        integrate_fixed(&mut rhs, state0, grid, substeps).map_err(diverged)
    }
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFiniteState { step } => Error::Diverged { step },
        other => other,
    }
}

/// The UDE structure with an arbitrary interaction term: position slots
/// copy velocities, velocity slot `i` accumulates `pair(r_i, r_j, m_i, m_j)`
/// over every `j != i`.
pub fn pair_sum_rhs<F>(state: &[f64], bodies: &BodySpec, out: &mut [f64], mut pair: F)
where
    F: FnMut(&[f64], &[f64], f64, f64, &mut [f64]),
{
    let dim = bodies.spatial_dim;
    let n = bodies.n_bodies();
    for i in 0..n {
        let base = 2 * dim * i;
        out[base..base + dim].copy_from_slice(&state[base + dim..base + 2 * dim]);
        out[base + dim..base + 2 * dim].fill(0.0);
    }
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let (ri, rj) = (position(state, i, dim), position(state, j, dim));
            let acc = &mut out[2 * dim * i + dim..2 * dim * (i + 1)];
            pair(ri, rj, bodies.masses[i], bodies.masses[j], acc);
        }
    }
}

fn expect_kind(model: &Model, kind: ModelKind) -> Result<()> {
    if model.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {kind} model, got {}",
            model.kind
        )));
    }
    Ok(())
}

fn rhs_of(model: &Model, params: &ParamVector, state: &SystemState) -> Result<SystemState> {
    let mut out = vec![0.0; state.len()];
    model.rhs_into(params.as_slice(), state, &mut out, &mut model.workspace())?;
    Ok(SystemState::from_vec_unchecked(out))
}

/// Neural ODE derivative. `t` is accepted but unused.
pub fn node_rhs(model: &Model, params: &ParamVector, state: &SystemState, _t: f64) -> Result<SystemState> {
    expect_kind(model, ModelKind::NeuralOde)?;
    rhs_of(model, params, state)
}

/// UDE derivative. `t` is accepted but unused.
pub fn ude_rhs(model: &Model, params: &ParamVector, state: &SystemState, _t: f64) -> Result<SystemState> {
    expect_kind(model, ModelKind::Ude)?;
    rhs_of(model, params, state)
}

/// Raw interaction network output for one body pair.
pub fn extract_interaction(
    model: &Model,
    params: &ParamVector,
    r_i: &[f64],
    r_j: &[f64],
    m_i: f64,
    m_j: f64,
) -> Result<Vec<f64>> {
    expect_kind(model, ModelKind::Ude)?;
    let dim = model.bodies.spatial_dim;
    if r_i.len() != dim || r_j.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "probe position",
            expected: dim,
            got: r_i.len().max(r_j.len()),
        });
    }
    let mut input = Vec::with_capacity(2 * dim + 2);
    input.extend_from_slice(r_i);
    input.extend_from_slice(r_j);
    input.push(m_i);
    input.push(m_j);
    let mut ws = model.mlp.workspace();
    Ok(model.mlp.forward(params.as_slice(), &input, &mut ws)?.to_vec())
}

/// How predictions are scored against data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    /// RK4 steps per data interval.
    pub substeps: usize,
    pub position_weight: f64,
    pub velocity_weight: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            substeps: 4,
            position_weight: 1.0,
            velocity_weight: 1.0,
        }
    }
}

impl LossSettings {
    fn weights(&self, bodies: &BodySpec) -> Vec<f64> {
        let dim = bodies.spatial_dim;
        (0..bodies.state_len())
            .map(|c| {
                if (c % (2 * dim)) < dim {
                    self.position_weight
                } else {
                    self.velocity_weight
                }
            })
            .collect()
    }
}

fn check_data(model: &Model, data: &Trajectory, state0: &SystemState, settings: &LossSettings) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    model.bodies.check_state(state0)?;
    if data.state_len() != state0.len() {
        return Err(Error::DimensionMismatch {
            what: "data state length",
            expected: state0.len(),
            got: data.state_len(),
        });
    }
    if settings.substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    Ok(())
}

/// Weighted mean squared error between the model's fixed-step prediction
/// from `state0` and `data`, over every component and grid point.
pub fn trajectory_loss(
    model: &Model,
    params: &ParamVector,
    data: &Trajectory,
    state0: &SystemState,
    settings: &LossSettings,
) -> Result<f64> {
    check_data(model, data, state0, settings)?;
    let pred = model.predict(params, state0, data.grid(), settings.substeps)?;
    let w = settings.weights(&model.bodies);
    let total: f64 = pred
        .states()
        .iter()
        .zip(data.states())
        .map(|(p, d)| {
            p.iter()
                .zip(d.iter())
                .zip(&w)
                .map(|((p, d), w)| w * (p - d) * (p - d))
                .sum::<f64>()
        })
        .sum();
    Ok(total / (data.len() * data.state_len()) as f64)
}

pub fn loss_gradient(
    model: &Model,
    params: &ParamVector,
    data: &Trajectory,
    state0: &SystemState,
    settings: &LossSettings,
) -> Result<ParamVector> {
    loss_and_gradient(model, params, data, state0, settings).map(|(_, g)| g)
}

/// Loss and its exact gradient by reverse sweep over the RK4 tape.
pub fn loss_and_gradient(
    model: &Model,
    params: &ParamVector,
    data: &Trajectory,
    state0: &SystemState,
    settings: &LossSettings,
) -> Result<(f64, ParamVector)> {
    check_data(model, data, state0, settings)?;
    model.check(params.as_slice(), state0)?;
    let p = params.as_slice();
    let n = state0.len();
    let sub = settings.substeps;
    let times = data.times();
    let intervals = times.len() - 1;
    let mut ws = model.workspace();

    // Forward: stage inputs u1..u4 of every substep, plus grid predictions.
    let mut tape = vec![0.0; intervals * sub * 4 * n];
    let mut pred = vec![0.0; times.len() * n];
    pred[..n].copy_from_slice(state0);
    let mut y = state0.to_vec();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for iv in 0..intervals {
        let dt = (times[iv + 1] - times[iv]) / sub as f64;
        for s in 0..sub {
            let base = (iv * sub + s) * 4 * n;
            let stage_scale = [0.0, 0.5 * dt, 0.5 * dt, dt];
            for st in 0..4 {
                let (u_slot, _) = tape[base + st * n..].split_at_mut(n);
                if st == 0 {
                    u_slot.copy_from_slice(&y);
                } else {
                    for i in 0..n {
                        u_slot[i] = y[i] + stage_scale[st] * k[st - 1][i];
                    }
                }
                model.rhs_into(p, u_slot, &mut k[st], &mut ws)?;
                if k[st].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { step: iv });
                }
            }
            for i in 0..n {
                y[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: iv });
            }
        }
        pred[(iv + 1) * n..(iv + 2) * n].copy_from_slice(&y);
    }

    let w = settings.weights(&model.bodies);
    let norm = 1.0 / (times.len() * n) as f64;
    let mut loss = 0.0;
    let mut residual_cot = vec![0.0; pred.len()];
    for (t, d) in data.states().iter().enumerate() {
        for c in 0..n {
            let r = pred[t * n + c] - d[c];
            loss += w[c] * r * r;
            residual_cot[t * n + c] = 2.0 * w[c] * r * norm;
        }
    }
    loss *= norm;

    // Reverse sweep.
    let mut grad = vec![0.0; p.len()];
    let mut y_bar = vec![0.0; n];
    let mut k_bar = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut u_bar = vec![0.0; n];
    for iv in (0..intervals).rev() {
        for (yb, rc) in y_bar.iter_mut().zip(&residual_cot[(iv + 1) * n..(iv + 2) * n]) {
            *yb += rc;
        }
        let dt = (times[iv + 1] - times[iv]) / sub as f64;
        let stage_weight = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
        let stage_scale = [0.0, 0.5 * dt, 0.5 * dt, dt];
        for s in (0..sub).rev() {
            let base = (iv * sub + s) * 4 * n;
            for st in 0..4 {
                for i in 0..n {
                    k_bar[st][i] = stage_weight[st] * y_bar[i];
                }
            }
            for st in (0..4).rev() {
                let u = &tape[base + st * n..base + (st + 1) * n];
                model.vjp(p, u, &k_bar[st], &mut u_bar, &mut grad, &mut ws);
                for i in 0..n {
                    y_bar[i] += u_bar[i];
                }
                if st > 0 {
                    for i in 0..n {
                        k_bar[st - 1][i] += stage_scale[st] * u_bar[i];
                    }
                }
            }
        }
    }
    Ok((loss, ParamVector::new(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{gravitational_rhs, pairwise_true_interaction, velocity};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bodies(n: usize) -> BodySpec {
        BodySpec::new((0..n).map(|i| 1.0 + 0.25 * i as f64).collect(), 1.0, 3).unwrap()
    }

    fn ude(n: usize, hidden: usize, act: Activation) -> Model {
        let spec = MlpSpec::new(vec![8, hidden, 3], act, 5).unwrap();
        Model::new(ModelKind::Ude, spec, bodies(n)).unwrap()
    }

    fn node(n: usize, hidden: usize) -> Model {
        let d = 6 * n;
        let spec = MlpSpec::new(vec![d, hidden, d], Activation::Tanh, 5).unwrap();
        Model::new(ModelKind::NeuralOde, spec, bodies(n)).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> SystemState {
        let mut v = vec![0.0; 6 * n];
        for i in 0..n {
            for k in 0..3 {
                v[6 * i + k] = rng.random_range(-1.0..1.0) + 2.0 * i as f64;
                v[6 * i + 3 + k] = rng.random_range(-0.5..0.5);
            }
        }
        SystemState::new(v, 3).unwrap()
    }

    #[test]
    fn size_contracts() {
        let bad = MlpSpec::new(vec![8, 4, 2], Activation::Tanh, 0).unwrap();
        assert!(Model::new(ModelKind::Ude, bad, bodies(2)).is_err());
        let bad = MlpSpec::new(vec![12, 4, 6], Activation::Tanh, 0).unwrap();
        assert!(Model::new(ModelKind::NeuralOde, bad, bodies(2)).is_err());
        assert_eq!("node".parse::<ModelKind>().unwrap(), ModelKind::NeuralOde);
        assert!("lstm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn default_networks() {
        let b = BodySpec::new(vec![1.0; 3], 1.0, 3).unwrap();
        let n = default_mlp_spec(ModelKind::NeuralOde, &b, 0);
        assert_eq!(n.layer_sizes, vec![18, 64, 64, 64, 18]);
        assert_eq!(n.activation, Activation::Tanh);
        let u = default_mlp_spec(ModelKind::Ude, &b, 0);
        assert_eq!(u.layer_sizes, vec![8, 32, 3]);
        assert_eq!(u.activation, Activation::Swish);
        assert!(Model::new(ModelKind::Ude, u, b).is_ok());
    }

    #[test]
    fn zero_params_node_is_static() {
        let m = node(2, 6);
        let z = ParamVector::zeros(m.param_count());
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(0), 2);
        assert!(node_rhs(&m, &z, &s, 0.0).unwrap().iter().all(|v| *v == 0.0));
        let p = m.init_params();
        assert_eq!(node_rhs(&m, &p, &s, 0.0).unwrap(), node_rhs(&m, &p, &s, 3.7).unwrap());
        assert!(ude_rhs(&m, &p, &s, 0.0).is_err());
    }

    #[test]
    fn zero_params_ude_keeps_kinematics() {
        for n in [1, 3] {
            let m = ude(n, 5, Activation::Swish);
            let z = ParamVector::zeros(m.param_count());
            let s = random_state(&mut ChaCha8Rng::seed_from_u64(1), n);
            let d = ude_rhs(&m, &z, &s, 0.0).unwrap();
            for i in 0..n {
                assert_eq!(position(&d, i, 3), velocity(&s, i, 3));
                assert!(velocity(&d, i, 3).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn ude_structure_with_oracle_interaction_is_newtonian() {
        let b = bodies(3);
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(2), 3);
        let mut out = vec![0.0; s.len()];
        pair_sum_rhs(&s, &b, &mut out, |ri, rj, mi, mj, acc| {
            let f = pairwise_true_interaction(ri, rj, mi, mj, b.gravitational_constant).unwrap();
            for (a, f) in acc.iter_mut().zip(f) {
                *a += f;
            }
        });
        let truth = gravitational_rhs(&s, &b).unwrap();
        for (a, t) in out.iter().zip(truth.iter()) {
            assert_relative_eq!(a, t, epsilon = 1e-14);
        }
    }

    #[test]
    fn ude_position_slots_are_velocities_for_any_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ude(3, 7, Activation::Tanh);
        for _ in 0..10 {
            let p = ParamVector::new((0..m.param_count()).map(|_| rng.random_range(-2.0..2.0)).collect());
            let s = random_state(&mut rng, 3);
            let d = ude_rhs(&m, &p, &s, 0.0).unwrap();
            for i in 0..3 {
                assert_eq!(position(&d, i, 3), velocity(&s, i, 3));
            }
        }
    }

    #[test]
    fn ude_is_equivariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ude(3, 7, Activation::Swish);
        let p = m.init_params();
        let s = random_state(&mut rng, 3);
        let perm = [2usize, 0, 1];
        let b = m.bodies().clone();
        let masses: Vec<f64> = perm.iter().map(|&i| b.masses[i]).collect();
        let permuted_state: Vec<f64> = perm.iter().flat_map(|&i| s[6 * i..6 * i + 6].to_vec()).collect();
        let m2 = Model::new(
            ModelKind::Ude,
            m.mlp_spec().clone(),
            BodySpec::new(masses, 1.0, 3).unwrap(),
        )
        .unwrap();
        let d = ude_rhs(&m, &p, &s, 0.0).unwrap();
        let d2 = ude_rhs(&m2, &p, &SystemState::new(permuted_state, 3).unwrap(), 0.0).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            for k in 0..6 {
                assert_relative_eq!(d2[6 * slot + k], d[6 * i + k], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn extract_interaction_examples() {
        let m = ude(2, 4, Activation::Swish);
        let z = ParamVector::zeros(m.param_count());
        assert_eq!(
            extract_interaction(&m, &z, &[0., 0., 0.], &[1., 0., 0.], 1., 1.).unwrap(),
            vec![0.0; 3]
        );
        let p = m.init_params();
        let far = extract_interaction(&m, &p, &[0., 0., 0.], &[100., 0., 0.], 1., 1.).unwrap();
        assert!(far.iter().all(|v| v.is_finite()));
        assert!(extract_interaction(&m, &p, &[0., 0.], &[1., 0., 0.], 1., 1.).is_err());
    }

    fn self_generated(m: &Model, p: &ParamVector, points: usize, seed: u64) -> (Trajectory, SystemState) {
        let s0 = random_state(&mut ChaCha8Rng::seed_from_u64(seed), m.bodies().n_bodies());
        let grid = TimeGrid::uniform(0.0, 0.1 * (points - 1) as f64, points).unwrap();
        (m.predict(p, &s0, &grid, 4).unwrap(), s0)
    }

    #[test]
    fn loss_vanishes_on_self_generated_data() {
        let m = ude(3, 6, Activation::Swish);
        let p = m.init_params();
        let (data, s0) = self_generated(&m, &p, 10, 5);
        let settings = LossSettings::default();
        assert!(trajectory_loss(&m, &p, &data, &s0, &settings).unwrap() < 1e-20);
        let g = loss_gradient(&m, &p, &data, &s0, &settings).unwrap();
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn unit_offset_gives_unit_loss() {
        let m = node(2, 4);
        let p = m.init_params();
        let (data, s0) = self_generated(&m, &p, 6, 6);
        let shifted: Vec<SystemState> = data
            .states()
            .iter()
            .map(|s| SystemState::new(s.iter().map(|v| v + 1.0).collect(), 3).unwrap())
            .collect();
        let shifted = Trajectory::new(data.grid().clone(), shifted).unwrap();
        let l = trajectory_loss(&m, &p, &shifted, &s0, &LossSettings::default()).unwrap();
        assert_relative_eq!(l, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_param_ude_loss_matches_coasting_oracle() {
        use crate::dynamics::gravitational_rhs_into;
        use crate::integrators::integrate_adaptive;
        let b = bodies(3);
        let m = Model::new(
            ModelKind::Ude,
            MlpSpec::new(vec![8, 4, 3], Activation::Swish, 0).unwrap(),
            b.clone(),
        )
        .unwrap();
        let s0 = random_state(&mut ChaCha8Rng::seed_from_u64(7), 3);
        let grid = TimeGrid::uniform(0.0, 1.0, 11).unwrap();
        let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| gravitational_rhs_into(y, &b, dy);
        let truth = integrate_adaptive(&mut rhs, &s0, (0.0, 1.0), 1e-10, 1e-10, &grid).unwrap();
        // closed-form straight-line motion
        let mut expected = 0.0;
        for (t, s) in truth.times().iter().zip(truth.states()) {
            for i in 0..3 {
                for k in 0..3 {
                    let r = s0[6 * i + k] + t * s0[6 * i + 3 + k];
                    let v = s0[6 * i + 3 + k];
                    expected += (r - s[6 * i + k]).powi(2) + (v - s[6 * i + 3 + k]).powi(2);
                }
            }
        }
        expected /= (truth.len() * 18) as f64;
        let z = ParamVector::zeros(m.param_count());
        let loss = trajectory_loss(&m, &z, &truth, &s0, &LossSettings::default()).unwrap();
        assert_relative_eq!(loss, expected, max_relative = 1e-12);
    }

    fn check_against_finite_differences(m: &Model, seed: u64, points: usize, substeps: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = m.init_params().into_vec();
        for v in p.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let p = ParamVector::new(p);
        let s0 = random_state(&mut rng, m.bodies().n_bodies());
        let grid = TimeGrid::uniform(0.0, 0.1 * (points - 1) as f64, points).unwrap();
        let data: Vec<SystemState> = (0..points)
            .map(|_| random_state(&mut rng, m.bodies().n_bodies()))
            .collect();
        let data = Trajectory::new(grid, data).unwrap();
        let settings = LossSettings { substeps, ..LossSettings::default() };
        let (_, g) = loss_and_gradient(m, &p, &data, &s0, &settings).unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut pp = p.clone().into_vec();
            pp[k] += h;
            let up = trajectory_loss(m, &ParamVector::new(pp.clone()), &data, &s0, &settings).unwrap();
            pp[k] -= 2.0 * h;
            let down = trajectory_loss(m, &ParamVector::new(pp), &data, &s0, &settings).unwrap();
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel < 1e-4, "coord {k}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn ude_gradient_matches_finite_differences() {
        check_against_finite_differences(&ude(2, 5, Activation::Swish), 11, 5, 1);
        check_against_finite_differences(&ude(3, 4, Activation::Tanh), 12, 4, 2);
    }

    #[test]
    fn node_gradient_matches_finite_differences() {
        check_against_finite_differences(&node(2, 5), 13, 5, 1);
        check_against_finite_differences(&node(1, 4), 14, 6, 3);
    }

    #[test]
    fn gradient_of_linear_field_scales_with_residual() {
        // Identity hidden layer on positive states: rhs(h) = W h.
        let b = BodySpec::new(vec![1.0], 1.0, 3).unwrap();
        let spec = MlpSpec::new(vec![6, 6, 6], Activation::Relu, 0).unwrap();
        let m = Model::new(ModelKind::NeuralOde, spec, b).unwrap();
        let mut p = vec![0.0; m.param_count()];
        for i in 0..6 {
            p[i * 6 + i] = 1.0;
        }
        // output layer: small diagonal rates
        let off = 42;
        for i in 0..6 {
            p[off + i * 6 + i] = 0.1;
        }
        let p = ParamVector::new(p);
        let s0 = SystemState::new(vec![1.0, 2.0, 3.0, 0.5, 0.25, 0.75], 3).unwrap();
        let grid = TimeGrid::uniform(0.0, 0.4, 5).unwrap();
        let pred = m.predict(&p, &s0, &grid, 2).unwrap();
        let shift = |delta: f64| {
            let states = pred
                .states()
                .iter()
                .enumerate()
                .map(|(t, s)| SystemState::new(s.iter().map(|v| v - delta * t as f64).collect(), 3).unwrap())
                .collect();
            Trajectory::new(grid.clone(), states).unwrap()
        };
        let settings = LossSettings { substeps: 2, ..LossSettings::default() };
        let g1 = loss_gradient(&m, &p, &shift(0.01), &s0, &settings).unwrap();
        let g2 = loss_gradient(&m, &p, &shift(0.02), &s0, &settings).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-9, epsilon = 1e-15);
        }
        assert!(g1.norm() > 0.0);
    }
}

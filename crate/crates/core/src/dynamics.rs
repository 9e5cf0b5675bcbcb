//! Newtonian n-body vector field and its conserved quantities.
//!
//! States are flat vectors laid out body by body as `[r1, v1, r2, v2, ...]`,
//! each block of length `dim`.

use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};

/// Pairwise distances below this are rejected as coincident bodies.
pub const MIN_SEPARATION: f64 = 1e-8;

/// Flat position/velocity vector of an n-body system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SystemState(Vec<f64>);

impl SystemState {
    /// Builds a state, checking the layout against `dim` and that every
    /// entry is finite.
    pub fn new(values: Vec<f64>, dim: usize) -> Result<Self> {
        let block = 2 * dim;
        if dim == 0 || values.is_empty() || values.len() % block != 0 {
            return Err(Error::DimensionMismatch {
                what: "state length (multiple of 2*dim)",
                expected: block * (values.len() / block.max(1)).max(1),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: 0 });
        }
        Ok(SystemState(values))
    }

    /// Wraps a vector without validation. Callers guarantee the layout.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        SystemState(values)
    }

    /// Assembles a state from per-body positions and velocities.
    pub fn from_bodies(positions: &[Vec<f64>], velocities: &[Vec<f64>]) -> Result<Self> {
        if positions.len() != velocities.len() || positions.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "velocity count",
                expected: positions.len(),
                got: velocities.len(),
            });
        }
        let dim = positions[0].len();
        let mut values = Vec::with_capacity(2 * dim * positions.len());
        for (r, v) in positions.iter().zip(velocities) {
            if r.len() != dim || v.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "body vector length",
                    expected: dim,
                    got: if r.len() != dim { r.len() } else { v.len() },
                });
            }
            values.extend_from_slice(r);
            values.extend_from_slice(v);
        }
        SystemState::new(values, dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for SystemState {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Masses, gravitational constant and spatial dimension of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub masses: Vec<f64>,
    pub gravitational_constant: f64,
    pub spatial_dim: usize,
}

impl BodySpec {
    pub fn new(masses: Vec<f64>, gravitational_constant: f64, spatial_dim: usize) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::InvalidArgument("at least one body is required".into()));
        }
        if let Some(m) = masses.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument(format!("mass {m} is not strictly positive")));
        }
        if !(gravitational_constant > 0.0 && gravitational_constant.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gravitational constant {gravitational_constant} is not strictly positive"
            )));
        }
        if !(spatial_dim == 2 || spatial_dim == 3) {
            return Err(Error::InvalidArgument(format!(
                "spatial dimension must be 2 or 3, got {spatial_dim}"
            )));
        }
        Ok(BodySpec {
            masses,
            gravitational_constant,
            spatial_dim,
        })
    }

    pub fn n_bodies(&self) -> usize {
        self.masses.len()
    }

    /// Length of a full state vector, `2 * dim * n`.
    pub fn state_len(&self) -> usize {
        2 * self.spatial_dim * self.masses.len()
    }

    pub fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_len() {
            return Err(Error::DimensionMismatch {
                what: "state length",
                expected: self.state_len(),
                got: state.len(),
            });
        }
        Ok(())
    }
}

/// Position block of body `i`.
#[inline]
pub fn position(state: &[f64], i: usize, dim: usize) -> &[f64] {
    &state[2 * dim * i..2 * dim * i + dim]
}

/// Velocity block of body `i`.
#[inline]
pub fn velocity(state: &[f64], i: usize, dim: usize) -> &[f64] {
    &state[2 * dim * i + dim..2 * dim * (i + 1)]
}

fn separation(ri: &[f64], rj: &[f64], i: usize, j: usize) -> Result<f64> {
    let d2: f64 = ri.iter().zip(rj).map(|(a, b)| (b - a) * (b - a)).sum();
    let d = d2.sqrt();
    if d < MIN_SEPARATION {
        return Err(Error::CoincidentBodies { i, j, distance: d });
    }
    Ok(d)
}

/// Ground-truth acceleration of body `i` due to body `j`:
/// `G m_j (r_j - r_i) / |r_j - r_i|^3`.
///
/// `m_i` is unused; it is accepted so the signature mirrors the learned
/// interaction network's inputs.
pub fn pairwise_true_interaction(
    r_i: &[f64],
    r_j: &[f64],
    _m_i: f64,
    m_j: f64,
    g: f64,
) -> Result<Vec<f64>> {
    if r_i.len() != r_j.len() {
        return Err(Error::DimensionMismatch {
            what: "position length",
            expected: r_i.len(),
            got: r_j.len(),
        });
    }
    let d = separation(r_i, r_j, 0, 1)?;
    let scale = g * m_j / (d * d * d);
    Ok(r_i.iter().zip(r_j).map(|(a, b)| scale * (b - a)).collect())
}

/// Writes the Newtonian derivative of `state` into `out`.
pub fn gravitational_rhs_into(state: &[f64], spec: &BodySpec, out: &mut [f64]) -> Result<()> {
    spec.check_state(state)?;
    if out.len() != state.len() {
        return Err(Error::DimensionMismatch {
            what: "derivative buffer",
            expected: state.len(),
            got: out.len(),
        });
    }
    let dim = spec.spatial_dim;
    let n = spec.n_bodies();
    let g = spec.gravitational_constant;
    for i in 0..n {
        let base = 2 * dim * i;
        out[base..base + dim].copy_from_slice(velocity(state, i, dim));
        out[base + dim..base + 2 * dim].fill(0.0);
    }
    for i in 0..n {
        let ri = position(state, i, dim);
        for j in 0..n {
            if i == j {
                continue;
            }
            let rj = position(state, j, dim);
            let d = separation(ri, rj, i, j)?;
            let scale = g * spec.masses[j] / (d * d * d);
            let acc = &mut out[2 * dim * i + dim..2 * dim * (i + 1)];
            for k in 0..dim {
                acc[k] += scale * (rj[k] - ri[k]);
            }
        }
    }
    Ok(())
}

pub fn gravitational_rhs(state: &SystemState, spec: &BodySpec) -> Result<SystemState> {
    let mut out = vec![0.0; state.len()];
    gravitational_rhs_into(state, spec, &mut out)?;
    Ok(SystemState(out))
}

/// Kinetic plus pairwise gravitational potential energy.
pub fn total_energy(state: &SystemState, spec: &BodySpec) -> Result<f64> {
    spec.check_state(state)?;
    let dim = spec.spatial_dim;
    let n = spec.n_bodies();
    let mut kinetic = 0.0;
    for i in 0..n {
        let v2: f64 = velocity(state, i, dim).iter().map(|v| v * v).sum();
        kinetic += 0.5 * spec.masses[i] * v2;
    }
    Ok(kinetic + potential_energy(state, spec)?)
}

fn potential_energy(state: &[f64], spec: &BodySpec) -> Result<f64> {
    let dim = spec.spatial_dim;
    let n = spec.n_bodies();
    let mut potential = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = separation(position(state, i, dim), position(state, j, dim), i, j)?;
            potential -= spec.gravitational_constant * spec.masses[i] * spec.masses[j] / d;
        }
    }
    Ok(potential)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_spec(n: usize) -> BodySpec {
        BodySpec::new(vec![1.0; n], 1.0, 3).unwrap()
    }

    fn triangle() -> SystemState {
        let h = 3f64.sqrt() / 2.0;
        let p = [vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.5, h, 0.0]];
        let v = vec![vec![0.0; 3]; 3];
        SystemState::from_bodies(&p, &v).unwrap()
    }

    #[test]
    fn symmetric_pair_accelerates_inward() {
        let s = SystemState::new(vec![0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.], 3).unwrap();
        let d = gravitational_rhs(&s, &unit_spec(2)).unwrap();
        assert_eq!(d.as_slice(), &[0., 0., 0., 1., 0., 0., 0., 0., 0., -1., 0., 0.]);
    }

    #[test]
    fn single_body_coasts() {
        let s = SystemState::new(vec![1., 2., 3., 4., 5., 6.], 3).unwrap();
        let d = gravitational_rhs(&s, &unit_spec(1)).unwrap();
        assert_eq!(d.as_slice(), &[4., 5., 6., 0., 0., 0.]);
    }

    #[test]
    fn equilateral_triangle_points_at_centroid() {
        let s = triangle();
        let d = gravitational_rhs(&s, &unit_spec(3)).unwrap();
        let centroid = [0.5, 3f64.sqrt() / 6.0, 0.0];
        for i in 0..3 {
            let a = velocity(&d, i, 3);
            let r = position(&s, i, 3);
            let mag = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_relative_eq!(mag, 1.732_050_807_568_877_2, epsilon = 1e-12);
            // parallel to (centroid - r)
            let to_c: Vec<f64> = (0..3).map(|k| centroid[k] - r[k]).collect();
            let norm = to_c.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..3 {
                assert_relative_eq!(a[k] / mag, to_c[k] / norm, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_examples() {
        let o = [0.0, 0.0, 0.0];
        assert_eq!(
            pairwise_true_interaction(&o, &[1., 0., 0.], 1., 1., 1.).unwrap(),
            vec![1., 0., 0.]
        );
        assert_eq!(
            pairwise_true_interaction(&o, &[2., 0., 0.], 1., 1., 1.).unwrap(),
            vec![0.25, 0., 0.]
        );
        assert_eq!(
            pairwise_true_interaction(&[1., 0., 0.], &o, 1., 1., 1.).unwrap(),
            vec![-1., 0., 0.]
        );
    }

    #[test]
    fn coincident_bodies_rejected() {
        let s = SystemState::new(vec![0.0; 12], 3).unwrap();
        assert!(matches!(
            gravitational_rhs(&s, &unit_spec(2)),
            Err(Error::CoincidentBodies { .. })
        ));
        assert!(matches!(
            pairwise_true_interaction(&[0.0; 3], &[0.0; 3], 1.0, 1.0, 1.0),
            Err(Error::CoincidentBodies { .. })
        ));
        assert!(total_energy(&s, &unit_spec(2)).is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        let s = SystemState::new(vec![0.0; 6], 3).unwrap();
        assert!(matches!(
            gravitational_rhs(&s, &unit_spec(2)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(SystemState::new(vec![0.0; 7], 3).is_err());
        assert!(SystemState::new(vec![f64::NAN; 6], 3).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(BodySpec::new(vec![], 1.0, 3).is_err());
        assert!(BodySpec::new(vec![1.0, 0.0], 1.0, 3).is_err());
        assert!(BodySpec::new(vec![1.0], -1.0, 3).is_err());
        assert!(BodySpec::new(vec![1.0], 1.0, 4).is_err());
    }

    #[test]
    fn energy_examples() {
        let pair = SystemState::new(vec![0., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.], 3).unwrap();
        assert_eq!(total_energy(&pair, &unit_spec(2)).unwrap(), -1.0);
        let one = SystemState::new(vec![0., 0., 0., 2., 0., 0.], 3).unwrap();
        assert_eq!(total_energy(&one, &unit_spec(1)).unwrap(), 2.0);
        assert_relative_eq!(total_energy(&triangle(), &unit_spec(3)).unwrap(), -3.0, epsilon = 1e-14);
    }

    fn arb_system() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(0.1f64..5.0, n),
                prop::collection::vec(-3.0f64..3.0, 6 * n),
            )
        })
    }

    fn well_separated(state: &[f64], n: usize) -> bool {
        (0..n).all(|i| {
            (i + 1..n).all(|j| {
                let d2: f64 = position(state, i, 3)
                    .iter()
                    .zip(position(state, j, 3))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 > 0.01
            })
        })
    }

    proptest! {
        #[test]
        fn momentum_is_conserved((masses, values) in arb_system()) {
            let n = masses.len();
            prop_assume!(well_separated(&values, n));
            let spec = BodySpec::new(masses.clone(), 1.0, 3).unwrap();
            let d = gravitational_rhs(&SystemState::new(values, 3).unwrap(), &spec).unwrap();
            for k in 0..3 {
                let p: f64 = (0..n).map(|i| masses[i] * velocity(&d, i, 3)[k]).sum();
                let scale: f64 = (0..n).map(|i| (masses[i] * velocity(&d, i, 3)[k]).abs()).sum::<f64>().max(1.0);
                prop_assert!(p.abs() < 1e-12 * scale);
            }
        }

        #[test]
        fn rhs_is_sum_of_pair_terms((masses, values) in arb_system()) {
            let n = masses.len();
            prop_assume!(well_separated(&values, n));
            let spec = BodySpec::new(masses.clone(), 1.3, 3).unwrap();
            let d = gravitational_rhs(&SystemState::new(values.clone(), 3).unwrap(), &spec).unwrap();
            for i in 0..n {
                let mut acc = [0.0; 3];
                for j in (0..n).filter(|&j| j != i) {
                    let f = pairwise_true_interaction(position(&values, i, 3), position(&values, j, 3), masses[i], masses[j], 1.3).unwrap();
                    for k in 0..3 { acc[k] += f[k]; }
                }
                for k in 0..3 {
                    prop_assert!((acc[k] - velocity(&d, i, 3)[k]).abs() <= 1e-14 * acc[k].abs().max(1.0));
                }
            }
        }

        #[test]
        fn pair_term_linear_in_mass_and_g(rj in prop::collection::vec(0.5f64..2.0, 3), m in 0.1f64..3.0, g in 0.1f64..3.0) {
            let ri = [0.0; 3];
            let a = pairwise_true_interaction(&ri, &rj, 1.0, m, g).unwrap();
            let b = pairwise_true_interaction(&ri, &rj, 1.0, 2.0 * m, g).unwrap();
            let c = pairwise_true_interaction(&ri, &rj, 1.0, m, 2.0 * g).unwrap();
            for k in 0..3 {
                prop_assert_eq!(b[k], 2.0 * a[k]);
                prop_assert_eq!(c[k], 2.0 * a[k]);
            }
        }

        #[test]
        fn potential_is_translation_invariant((masses, values) in arb_system(), shift in -4i32..4) {
            let n = masses.len();
            prop_assume!(well_separated(&values, n));
            let spec = BodySpec::new(masses, 1.0, 3).unwrap();
            // power-of-two shifts keep the translated coordinates exact
            let offset = f64::from(shift) * 0.5;
            let moved: Vec<f64> = values.iter().enumerate()
                .map(|(k, v)| if (k % 6) < 3 { v + offset } else { *v })
                .collect();
            let before = potential_energy(&values, &spec).unwrap();
            let after = potential_energy(&moved, &spec).unwrap();
            prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
        }
    }
}

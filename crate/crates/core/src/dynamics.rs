//! Discrete-time system models, exact propagation, and local linearization.
//!
//! The controller is generic over [`Model`]; the shipped instance is the
//! [`Unicycle`] with analytic Jacobians. Models without analytic Jacobians
//! get a central finite-difference fallback.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("rollout requires at least one input")]
    EmptyInputs,
    #[error("box bounds violated: lower > upper at component {0}")]
    InvertedBounds(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Unicycle state `[x, y, theta, v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemState {
    /// Position x [m].
    pub x: f64,
    /// Position y [m].
    pub y: f64,
    /// Heading [rad]. Deliberately unwrapped: wrapping to (-pi, pi] during
    /// prediction would break linearization continuity.
    pub theta: f64,
    /// Linear speed [m/s].
    pub v: f64,
}

impl SystemState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.x, self.y, self.theta, self.v])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        assert_eq!(v.len(), 4, "unicycle state has 4 components");
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }
}

/// Unicycle input `[u1, u2]`: angular velocity [rad/s] and linear
/// acceleration [m/s^2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemInput {
    pub u1: f64,
    pub u2: f64,
}

impl SystemInput {
    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.u1, self.u2])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        assert_eq!(v.len(), 2, "unicycle input has 2 components");
        Self::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }
}

/// `(A, B)` Jacobian pair of the one-step map at a nominal point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub nominal_state: DVector<f64>,
    pub nominal_input: DVector<f64>,
}

/// Componentwise state and input box constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub state_lo: DVector<f64>,
    pub state_hi: DVector<f64>,
    pub input_lo: DVector<f64>,
    pub input_hi: DVector<f64>,
}

impl BoxBounds {
    pub fn new(
        state_lo: DVector<f64>,
        state_hi: DVector<f64>,
        input_lo: DVector<f64>,
        input_hi: DVector<f64>,
    ) -> Result<Self, DynamicsError> {
        for (i, (lo, hi)) in state_lo.iter().zip(state_hi.iter()).enumerate() {
            if lo > hi {
                return Err(DynamicsError::InvertedBounds(i));
            }
        }
        for (i, (lo, hi)) in input_lo.iter().zip(input_hi.iter()).enumerate() {
            if lo > hi {
                return Err(DynamicsError::InvertedBounds(state_lo.len() + i));
            }
        }
        Ok(Self {
            state_lo,
            state_hi,
            input_lo,
            input_hi,
        })
    }

    /// Symmetric box `|x_i| <= s`, `|u_i| <= (u_bounds)`.
    pub fn symmetric(n: usize, state_abs: f64, input_abs: &[f64]) -> Self {
        Self {
            state_lo: DVector::from_element(n, -state_abs),
            state_hi: DVector::from_element(n, state_abs),
            input_lo: -DVector::from_column_slice(input_abs),
            input_hi: DVector::from_column_slice(input_abs),
        }
    }

    pub fn contains_state(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.state_lo.iter().zip(self.state_hi.iter()))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// A discrete-time control system `x_{t+1} = f(x_t, u_t)`.
pub trait Model {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// One exact step of the nonlinear dynamics.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>;

    /// Jacobians of `step` at `(x, u)`. Default is central finite
    /// differences with h = 1e-5.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> LinearizedDynamics {
        finite_difference_jacobians(self, x, u, dt, 1e-5)
    }
}

/// Central finite-difference Jacobians of `model.step`, usable both as a
/// fallback for models without analytic derivatives and as a test oracle.
pub fn finite_difference_jacobians<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    h: f64,
) -> LinearizedDynamics {
    let n = model.state_dim();
    let q = model.input_dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, q);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (model.step(&xp, u, dt) - model.step(&xm, u, dt)) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..q {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (model.step(x, &up, dt) - model.step(x, &um, dt)) / (2.0 * h);
        b.set_column(j, &col);
    }
    LinearizedDynamics {
        a,
        b,
        nominal_state: x.clone(),
        nominal_input: u.clone(),
    }
}

/// Discrete-time unicycle:
/// `x+ = x + v cos(theta) dt`, `y+ = y + v sin(theta) dt`,
/// `theta+ = theta + u1 dt`, `v+ = v + u2 dt`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unicycle;

impl Model for Unicycle {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        DVector::from_column_slice(&[
            x[0] + x[3] * x[2].cos() * dt,
            x[1] + x[3] * x[2].sin() * dt,
            x[2] + u[0] * dt,
            x[3] + u[1] * dt,
        ])
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> LinearizedDynamics {
        let (theta, v) = (x[2], x[3]);
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = -v * theta.sin() * dt;
        a[(0, 3)] = theta.cos() * dt;
        a[(1, 2)] = v * theta.cos() * dt;
        a[(1, 3)] = theta.sin() * dt;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        LinearizedDynamics {
            a,
            b,
            nominal_state: x.clone(),
            nominal_input: u.clone(),
        }
    }
}

/// Typed convenience wrapper over [`Model::step`] for the unicycle.
pub fn step(state: SystemState, input: SystemInput, dt: f64) -> Result<SystemState, DynamicsError> {
    if dt <= 0.0 {
        return Err(DynamicsError::NonPositiveDt(dt));
    }
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !input.is_finite() {
        return Err(DynamicsError::NonFinite("input"));
    }
    let next = Unicycle.step(&state.to_vector(), &input.to_vector(), dt);
    Ok(SystemState::from_vector(&next))
}

/// Typed analytic Jacobians for the unicycle.
pub fn jacobians(
    state: SystemState,
    input: SystemInput,
    dt: f64,
) -> Result<LinearizedDynamics, DynamicsError> {
    if dt <= 0.0 {
        return Err(DynamicsError::NonPositiveDt(dt));
    }
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !input.is_finite() {
        return Err(DynamicsError::NonFinite("input"));
    }
    Ok(Unicycle.jacobians(&state.to_vector(), &input.to_vector(), dt))
}

/// Forward simulation: returns `len(inputs) + 1` states starting at
/// `initial`, each obtained from the previous by one exact step.
pub fn rollout<M: Model + ?Sized>(
    model: &M,
    initial: &DVector<f64>,
    inputs: &[DVector<f64>],
    dt: f64,
) -> Result<Vec<DVector<f64>>, DynamicsError> {
    if inputs.is_empty() {
        return Err(DynamicsError::EmptyInputs);
    }
    if dt <= 0.0 {
        return Err(DynamicsError::NonPositiveDt(dt));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(initial.clone());
    for u in inputs {
        let next = model.step(states.last().unwrap(), u, dt);
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn step_pure_x_motion() {
        let s = step(SystemState::new(0.0, 0.0, 0.0, 1.0), SystemInput::new(0.0, 0.0), 0.1)
            .unwrap();
        assert_eq!(s, SystemState::new(0.1, 0.0, 0.0, 1.0));
    }

    #[test]
    fn step_rest_stays_at_rest() {
        let s = step(SystemState::new(0.0, 0.0, 0.0, 0.0), SystemInput::new(0.0, 0.0), 0.1)
            .unwrap();
        assert_eq!(s, SystemState::new(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn step_heading_up_with_turn_and_brake() {
        let s = step(
            SystemState::new(1.0, 2.0, FRAC_PI_2, 2.0),
            SystemInput::new(1.0, -1.0),
            0.05,
        )
        .unwrap();
        assert_relative_eq!(s.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.y, 2.1, epsilon = 1e-12);
        assert_relative_eq!(s.theta, FRAC_PI_2 + 0.05, epsilon = 1e-12);
        assert_relative_eq!(s.v, 1.95, epsilon = 1e-12);
    }

    #[test]
    fn step_rejects_bad_arguments() {
        let ok_state = SystemState::new(0.0, 0.0, 0.0, 0.0);
        let ok_input = SystemInput::new(0.0, 0.0);
        assert_eq!(
            step(ok_state, ok_input, 0.0),
            Err(DynamicsError::NonPositiveDt(0.0))
        );
        assert_eq!(
            step(SystemState::new(f64::NAN, 0.0, 0.0, 0.0), ok_input, 0.1),
            Err(DynamicsError::NonFinite("state"))
        );
        assert_eq!(
            step(ok_state, SystemInput::new(f64::INFINITY, 0.0), 0.1),
            Err(DynamicsError::NonFinite("input"))
        );
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x = DVector::from_fn(4, |i, _| {
                if i == 3 {
                    rng.gen_range(-10.0..10.0)
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            });
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0));
            let analytic = Unicycle.jacobians(&x, &u, 0.1);
            let fd = finite_difference_jacobians(&Unicycle, &x, &u, 0.1, 1e-5);
            for (a, f) in analytic.a.iter().zip(fd.a.iter()) {
                assert!((a - f).abs() < 1e-6 * (1.0 + a.abs()), "A entry {a} vs {f}");
            }
            for (b, f) in analytic.b.iter().zip(fd.b.iter()) {
                assert!((b - f).abs() < 1e-6 * (1.0 + b.abs()), "B entry {b} vs {f}");
            }
        }
    }

    #[test]
    fn jacobian_at_rest_has_expected_structure() {
        let lin = jacobians(SystemState::new(0.0, 0.0, 0.0, 0.0), SystemInput::new(0.0, 0.0), 0.1)
            .unwrap();
        assert_eq!(lin.a[(0, 3)], 0.1);
        assert_eq!(lin.a[(1, 3)], 0.0);
        assert_eq!(lin.a[(0, 2)], 0.0);
        assert_eq!(lin.a[(1, 2)], 0.0);
        for i in 0..4 {
            assert_eq!(lin.a[(i, i)], 1.0);
        }
        // B has exactly two nonzero entries, both equal to dt.
        let nonzero: Vec<f64> = lin.b.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero, vec![0.1, 0.1]);
    }

    #[test]
    fn linearization_is_first_order_accurate() {
        let x = DVector::from_column_slice(&[0.3, -0.7, 0.9, 2.0]);
        let u = DVector::from_column_slice(&[0.5, -0.2]);
        let dt = 0.1;
        let lin = Unicycle.jacobians(&x, &u, dt);
        let f0 = Unicycle.step(&x, &u, dt);
        let err_at = |scale: f64| {
            let dx = DVector::from_column_slice(&[0.1, -0.05, 0.2, 0.15]) * scale;
            let du = DVector::from_column_slice(&[0.1, 0.05]) * scale;
            let exact = Unicycle.step(&(&x + &dx), &(&u + &du), dt);
            let predicted = &f0 + &lin.a * &dx + &lin.b * &du;
            (exact - predicted).norm()
        };
        let e1 = err_at(1.0);
        let e2 = err_at(0.5);
        assert!(e1 / e2 >= 3.5, "halving delta reduced error only {e1}/{e2}");
    }

    #[test]
    fn rollout_constant_velocity_chain() {
        let initial = DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.0]);
        let inputs = vec![DVector::zeros(2); 3];
        let states = rollout(&Unicycle, &initial, &inputs, 0.1).unwrap();
        assert_eq!(states.len(), 4);
        let xs: Vec<f64> = states.iter().map(|s| s[0]).collect();
        for (got, want) in xs.iter().zip([0.0, 0.1, 0.2, 0.3]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn rollout_matches_repeated_step_and_rejects_empty() {
        let initial = DVector::from_column_slice(&[1.0, -1.0, 0.4, 0.8]);
        let inputs: Vec<DVector<f64>> = (0..5)
            .map(|i| DVector::from_column_slice(&[0.1 * i as f64, -0.05]))
            .collect();
        let states = rollout(&Unicycle, &initial, &inputs, 0.05).unwrap();
        let mut cur = initial.clone();
        for u in &inputs {
            cur = Unicycle.step(&cur, u, 0.05);
        }
        assert_eq!(states.last().unwrap(), &cur);
        assert_eq!(states[0], initial);

        assert_eq!(
            rollout(&Unicycle, &initial, &[], 0.05),
            Err(DynamicsError::EmptyInputs)
        );
    }

    #[test]
    fn zero_input_rollout_from_rest_is_constant() {
        let initial = DVector::from_column_slice(&[2.0, 3.0, 1.0, 0.0]);
        let inputs = vec![DVector::zeros(2); 4];
        let states = rollout(&Unicycle, &initial, &inputs, 0.1).unwrap();
        for s in &states {
            assert_eq!(s, &initial);
        }
    }

    #[test]
    fn box_bounds_reject_inverted() {
        let err = BoxBounds::new(
            DVector::from_column_slice(&[1.0]),
            DVector::from_column_slice(&[0.0]),
            DVector::zeros(1),
            DVector::zeros(1),
        );
        assert_eq!(err, Err(DynamicsError::InvertedBounds(0)));
    }
}

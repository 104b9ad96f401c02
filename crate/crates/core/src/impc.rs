//! Iterative convex MPC around linearized dynamics and linearized barrier
//! constraints.
//!
//! Each control step repeats: linearize the dynamics and the obstacle
//! boundaries along the current nominal trajectory, assemble a convex QP,
//! solve it, and use the optimum as the next nominal trajectory. The loop
//! stops when consecutive state trajectories agree or the iteration budget
//! runs out. An infeasible QP is reported as an outcome, not an error.

use crate::cbf::{CbfConfig, CbfError, SlackMode};
use crate::detector::{Detector, DetectorError};
use crate::dynamics::{
    BoxBounds, DynamicsError, LinearizedDynamics, Model, SystemInput, SystemState, Unicycle,
};
use crate::geometry::{
    tangent_halfspace, CircleObstacle, GeometryError, ObstacleMap, Point, TangentHalfspace,
};
use crate::qp::{self, QpError, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const NX: usize = 4;
const NU: usize = 2;

#[derive(Debug, Error)]
pub enum ImpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("barrier: {0}")]
    Cbf(#[from] CbfError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("solver: {0}")]
    Qp(#[from] QpError),
    #[error("warm start has {states} states and {inputs} inputs, horizon is {horizon}")]
    WarmStartShape {
        states: usize,
        inputs: usize,
        horizon: usize,
    },
}

/// Controller parameters shared by every timestep.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of the running state weight.
    pub state_weight: DVector<f64>,
    /// Diagonal of the terminal state weight.
    pub terminal_weight: DVector<f64>,
    /// Diagonal of the input weight.
    pub input_weight: DVector<f64>,
    /// Per-slack quadratic weight; slacks track a reference of 1.
    pub slack_weight: f64,
    pub cbf: CbfConfig,
    pub slack_mode: SlackMode,
    pub bounds: BoxBounds,
    pub robot_radius: f64,
    /// Convexification iteration budget per timestep.
    pub max_iterations: usize,
    /// Absolute trajectory-change threshold (Frobenius norm).
    pub eps_abs: f64,
    /// Relative trajectory-change threshold.
    pub eps_rel: f64,
    pub qp: QpSettings,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ImpcError> {
        if self.horizon == 0 {
            return Err(ImpcError::Config("horizon must be at least 1".into()));
        }
        if self.cbf.m_cbf() > self.horizon {
            return Err(ImpcError::Config(format!(
                "barrier order {} exceeds horizon {}",
                self.cbf.m_cbf(),
                self.horizon
            )));
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(ImpcError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.state_weight.len() != NX
            || self.terminal_weight.len() != NX
            || self.input_weight.len() != NU
        {
            return Err(ImpcError::Config("weight diagonal lengths must be 4, 4, 2".into()));
        }
        if self
            .state_weight
            .iter()
            .chain(self.terminal_weight.iter())
            .chain(self.input_weight.iter())
            .any(|w| *w < 0.0 || !w.is_finite())
        {
            return Err(ImpcError::Config("weights must be finite and nonnegative".into()));
        }
        if self.slack_weight < 0.0 || !self.slack_weight.is_finite() {
            return Err(ImpcError::Config("slack weight must be finite and nonnegative".into()));
        }
        if self.robot_radius < 0.0 {
            return Err(ImpcError::Config("robot radius must be nonnegative".into()));
        }
        if self.max_iterations == 0 {
            return Err(ImpcError::Config("need at least one iteration".into()));
        }
        Ok(())
    }
}

/// Column layout of the stacked decision vector:
/// states `x_1..x_N`, then inputs `u_0..u_{N-1}`, then slack variables
/// grouped by obstacle, order, and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarMap {
    pub horizon: usize,
    pub m_cbf: usize,
    pub obstacles: usize,
    pub slack_per_obstacle: usize,
    with_slack: bool,
}

impl VarMap {
    pub fn new(horizon: usize, m_cbf: usize, obstacles: usize, with_slack: bool) -> Self {
        // One slack per (order i, step k) with k + i - 1 <= N.
        let per_obstacle = (1..=m_cbf.min(horizon))
            .map(|i| horizon - i + 1)
            .sum::<usize>();
        Self {
            horizon,
            m_cbf,
            obstacles,
            slack_per_obstacle: if with_slack { per_obstacle } else { 0 },
            with_slack,
        }
    }

    pub fn n_states(&self) -> usize {
        NX * self.horizon
    }

    pub fn n_inputs(&self) -> usize {
        NU * self.horizon
    }

    pub fn n_slacks(&self) -> usize {
        self.slack_per_obstacle * self.obstacles
    }

    pub fn n(&self) -> usize {
        self.n_states() + self.n_inputs() + self.n_slacks()
    }

    /// First column of predicted state `x_k`, `k` in `1..=N`.
    pub fn state(&self, k: usize) -> usize {
        assert!((1..=self.horizon).contains(&k), "state index {k} out of range");
        NX * (k - 1)
    }

    /// First column of input `u_k`, `k` in `0..N`.
    pub fn input(&self, k: usize) -> usize {
        assert!(k < self.horizon, "input index {k} out of range");
        self.n_states() + NU * k
    }

    /// Column of the slack for (obstacle, step `k`, order `i`), if slacks
    /// are materialized.
    pub fn slack(&self, obstacle: usize, k: usize, i: usize) -> Option<usize> {
        if !self.with_slack {
            return None;
        }
        assert!(obstacle < self.obstacles);
        assert!((1..=self.m_cbf).contains(&i));
        assert!(k >= 1 && k + i - 1 <= self.horizon, "slack ({k},{i}) out of range");
        let within: usize = (1..i).map(|j| self.horizon - j + 1).sum::<usize>() + (k - 1);
        Some(self.n_states() + self.n_inputs() + self.slack_per_obstacle * obstacle + within)
    }
}

/// Everything the QP assembly needs from one linearization pass.
#[derive(Debug, Clone)]
pub struct CftocInputs<'a> {
    pub current_state: &'a DVector<f64>,
    /// Constant state reference tracked over the whole horizon.
    pub reference: &'a DVector<f64>,
    /// One linearization per step `k = 0..N-1`, at the nominal pair.
    pub linearizations: &'a [LinearizedDynamics],
    /// `halfspaces[o][s]` for steps `s = 1..=N`; index 0 unused.
    pub halfspaces: &'a [Vec<Option<TangentHalfspace>>],
    /// Exact barrier value at the measured state, one per obstacle.
    pub psi0_at_x0: &'a [f64],
}

struct RowBuilder {
    entries: Vec<Vec<(usize, f64)>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RowBuilder {
    fn new() -> Self {
        Self { entries: Vec::new(), lower: Vec::new(), upper: Vec::new() }
    }

    fn push(&mut self, row: Vec<(usize, f64)>, l: f64, u: f64) {
        self.entries.push(row);
        self.lower.push(l);
        self.upper.push(u);
    }

    fn into_matrix(self, n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let m = self.entries.len();
        let mut a = DMatrix::zeros(m, n);
        for (r, row) in self.entries.iter().enumerate() {
            for (c, v) in row {
                a[(r, *c)] += v;
            }
        }
        (
            a,
            DVector::from_vec(self.lower),
            DVector::from_vec(self.upper),
        )
    }
}

/// Builds the convex subproblem for one convexification iteration.
pub fn assemble_cftoc(
    config: &MpcConfig,
    inputs: &CftocInputs,
) -> Result<(QpProblem, VarMap), ImpcError> {
    let n_horizon = config.horizon;
    if inputs.linearizations.len() != n_horizon {
        return Err(ImpcError::Config(format!(
            "expected {n_horizon} linearizations, got {}",
            inputs.linearizations.len()
        )));
    }
    if inputs.halfspaces.len() != inputs.psi0_at_x0.len() {
        return Err(ImpcError::Config(
            "halfspace and psi0 obstacle counts differ".into(),
        ));
    }
    let obstacles = inputs.halfspaces.len();
    let with_slack = config.slack_mode != SlackMode::None;
    let vars = VarMap::new(n_horizon, config.cbf.m_cbf(), obstacles, with_slack);
    let n = vars.n();

    // Quadratic cost: tracking weights on states and inputs, slacks pulled
    // toward 1.
    let mut p_diag = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for k in 1..=n_horizon {
        let w = if k == n_horizon { &config.terminal_weight } else { &config.state_weight };
        let base = vars.state(k);
        for d in 0..NX {
            p_diag[base + d] = 2.0 * w[d];
            q[base + d] = -2.0 * w[d] * inputs.reference[d];
        }
    }
    for k in 0..n_horizon {
        let base = vars.input(k);
        for d in 0..NU {
            p_diag[base + d] = 2.0 * config.input_weight[d];
        }
    }
    for idx in (vars.n_states() + vars.n_inputs())..n {
        p_diag[idx] = 2.0 * config.slack_weight;
        q[idx] = -2.0 * config.slack_weight;
    }

    let mut rows = RowBuilder::new();
    let model = Unicycle;

    // Dynamics equalities: x_{k+1} - A_k x_k - B_k u_k = f(nom) - A nom_x - B nom_u,
    // with the known current state folded into the right-hand side at k = 0.
    for k in 0..n_horizon {
        let lin = &inputs.linearizations[k];
        let fx = model.step(&lin.nominal_state, &lin.nominal_input, config.dt);
        let c = &fx - &lin.a * &lin.nominal_state - &lin.b * &lin.nominal_input;
        for r in 0..NX {
            let mut row = vec![(vars.state(k + 1) + r, 1.0)];
            for ccol in 0..NU {
                row.push((vars.input(k) + ccol, -lin.b[(r, ccol)]));
            }
            let mut rhs = c[r];
            if k == 0 {
                for ccol in 0..NX {
                    rhs += lin.a[(r, ccol)] * inputs.current_state[ccol];
                }
            } else {
                for ccol in 0..NX {
                    row.push((vars.state(k) + ccol, -lin.a[(r, ccol)]));
                }
            }
            rows.push(row, rhs, rhs);
        }
    }

    // Box bounds as identity rows.
    for k in 1..=n_horizon {
        for d in 0..NX {
            rows.push(
                vec![(vars.state(k) + d, 1.0)],
                config.bounds.state_lo[d],
                config.bounds.state_hi[d],
            );
        }
    }
    for k in 0..n_horizon {
        for d in 0..NU {
            rows.push(
                vec![(vars.input(k) + d, 1.0)],
                config.bounds.input_lo[d],
                config.bounds.input_hi[d],
            );
        }
    }

    // Barrier rows.
    for o in 0..obstacles {
        for i in 1..=config.cbf.m_cbf() {
            for k in 1..=(n_horizon + 1 - i) {
                let built = crate::cbf::build_constraint_rows(
                    k,
                    i,
                    &inputs.halfspaces[o],
                    inputs.psi0_at_x0[o],
                    &config.cbf,
                    config.slack_mode,
                )?;
                let slack_col = vars.slack(o, k, i);
                let lower_row = |cr: &crate::cbf::ConstraintRow| {
                    let mut row = Vec::new();
                    let mut constant = cr.constant;
                    for (step, c) in &cr.position_terms {
                        row.push((vars.state(*step), c[0]));
                        row.push((vars.state(*step) + 1, c[1]));
                    }
                    match slack_col {
                        Some(col) => row.push((col, cr.slack_coeff)),
                        // Slacks pinned to 1 when not materialized.
                        None => constant += cr.slack_coeff,
                    }
                    (row, constant)
                };
                let (row, constant) = lower_row(&built.main);
                rows.push(row, -constant, f64::INFINITY);
                if let Some(bound) = &built.slack_bound {
                    let (row, constant) = lower_row(bound);
                    rows.push(row, -constant, f64::INFINITY);
                }
                if let Some(sign) = &built.slack_sign {
                    let col = slack_col.expect("sign row implies a slack variable");
                    rows.push(vec![(col, sign.slack_coeff)], -sign.constant, f64::INFINITY);
                }
                if built.pin_slack_to_zero {
                    if let Some(col) = slack_col {
                        rows.push(vec![(col, 1.0)], 0.0, 0.0);
                    }
                }
            }
        }
    }

    let (a, l, u) = rows.into_matrix(n);
    let problem = QpProblem {
        p: DMatrix::from_diagonal(&p_diag),
        q,
        a,
        l,
        u,
    };
    Ok((problem, vars))
}

/// Open-loop plan extracted from one converged (or truncated) timestep.
#[derive(Debug, Clone)]
pub struct OpenLoopPlan {
    /// `N + 1` states starting at the measured state.
    pub states: Vec<DVector<f64>>,
    /// `N` inputs.
    pub inputs: Vec<DVector<f64>>,
    /// Slack values in column order (empty without slack variables).
    pub slacks: Vec<f64>,
    pub objective: f64,
}

impl OpenLoopPlan {
    pub fn first_input(&self) -> SystemInput {
        SystemInput::from_vector(&self.inputs[0])
    }
}

/// Result of one timestep of the convexification loop.
#[derive(Debug, Clone)]
pub enum TimestepOutcome {
    Converged { plan: OpenLoopPlan, iterations: usize },
    IterationLimit { plan: OpenLoopPlan, iterations: usize },
    /// The subproblem became infeasible at this iteration; no plan exists.
    Infeasible { iteration: usize },
}

impl TimestepOutcome {
    pub fn plan(&self) -> Option<&OpenLoopPlan> {
        match self {
            TimestepOutcome::Converged { plan, .. }
            | TimestepOutcome::IterationLimit { plan, .. } => Some(plan),
            TimestepOutcome::Infeasible { .. } => None,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            TimestepOutcome::Converged { iterations, .. }
            | TimestepOutcome::IterationLimit { iterations, .. } => *iterations,
            TimestepOutcome::Infeasible { iteration } => *iteration,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, TimestepOutcome::Infeasible { .. })
    }
}

/// Nominal trajectory used to seed the convexification loop.
#[derive(Debug, Clone)]
pub struct WarmStart {
    /// `N + 1` states; index 0 must equal the measured state.
    pub states: Vec<DVector<f64>>,
    /// `N` inputs.
    pub inputs: Vec<DVector<f64>>,
}

impl WarmStart {
    /// Hold-still seed: zero inputs rolled out from the measured state.
    pub fn from_rollout(
        current: &DVector<f64>,
        horizon: usize,
        dt: f64,
    ) -> Result<Self, ImpcError> {
        let model = Unicycle;
        let inputs = vec![DVector::zeros(NU); horizon];
        let states = crate::dynamics::rollout(&model, current, &inputs, dt)?;
        Ok(Self { states, inputs })
    }

    /// Shift the previous optimal plan one step: reuse its tail and repeat
    /// the last input once at the end.
    pub fn from_shifted_plan(
        plan: &OpenLoopPlan,
        measured: &DVector<f64>,
        dt: f64,
    ) -> Result<Self, ImpcError> {
        let n = plan.inputs.len();
        if plan.states.len() != n + 1 || n == 0 {
            return Err(ImpcError::WarmStartShape {
                states: plan.states.len(),
                inputs: n,
                horizon: n,
            });
        }
        let model = Unicycle;
        let mut states = Vec::with_capacity(n + 1);
        states.push(measured.clone());
        states.extend(plan.states[2..].iter().cloned());
        let last_input = plan.inputs[n - 1].clone();
        states.push(model.step(&plan.states[n], &last_input, dt));
        let mut inputs: Vec<DVector<f64>> = plan.inputs[1..].to_vec();
        inputs.push(last_input);
        Ok(Self { states, inputs })
    }

    fn check(&self, horizon: usize) -> Result<(), ImpcError> {
        if self.states.len() != horizon + 1 || self.inputs.len() != horizon {
            return Err(ImpcError::WarmStartShape {
                states: self.states.len(),
                inputs: self.inputs.len(),
                horizon,
            });
        }
        Ok(())
    }
}

/// Frobenius-norm trajectory-change test over the stacked predicted states.
pub fn converged(
    new_states: &[DVector<f64>],
    old_states: &[DVector<f64>],
    eps_abs: f64,
    eps_rel: f64,
) -> bool {
    debug_assert_eq!(new_states.len(), old_states.len());
    let mut diff2 = 0.0;
    let mut base2 = 0.0;
    for (a, b) in new_states.iter().zip(old_states) {
        diff2 += (a - b).norm_squared();
        base2 += b.norm_squared();
    }
    let e_abs = diff2.sqrt();
    if e_abs < eps_abs {
        return true;
    }
    base2 > 0.0 && e_abs / base2.sqrt() < eps_rel
}

fn position_of(state: &DVector<f64>) -> Point {
    Point::new(state[0], state[1])
}

/// Linearizes the boundaries along a nominal trajectory. Returns per
/// obstacle the halfspace valid at each predicted step, and the exact
/// barrier value at the measured state.
fn linearize_boundaries(
    detector: &dyn Detector,
    measured: &DVector<f64>,
    nominal_states: &[DVector<f64>],
    robot_radius: f64,
) -> Result<(Vec<Vec<Option<TangentHalfspace>>>, Vec<f64>), ImpcError> {
    let obstacles = detector.obstacle_count();
    let horizon = nominal_states.len() - 1;
    let mut halfspaces = vec![vec![None; horizon + 1]; obstacles];
    let mut psi0 = vec![0.0; obstacles];

    let p0 = position_of(measured);
    let nearest0 = detector.nearest_points(&p0)?;
    for o in 0..obstacles {
        let hs = tangent_halfspace(&p0, &nearest0[o], robot_radius)?.normalized();
        psi0[o] = hs.eval(&p0);
    }
    for s in 1..=horizon {
        let pos = position_of(&nominal_states[s]);
        let nearest = detector.nearest_points(&pos)?;
        for o in 0..obstacles {
            halfspaces[o][s] =
                Some(tangent_halfspace(&pos, &nearest[o], robot_radius)?.normalized());
        }
    }
    Ok((halfspaces, psi0))
}

fn linearize_dynamics(
    config: &MpcConfig,
    warm: &WarmStart,
) -> Vec<LinearizedDynamics> {
    let model = Unicycle;
    (0..config.horizon)
        .map(|k| model.jacobians(&warm.states[k], &warm.inputs[k], config.dt))
        .collect()
}

fn extract_plan(
    x: &DVector<f64>,
    vars: &VarMap,
    measured: &DVector<f64>,
    objective: f64,
) -> OpenLoopPlan {
    let mut states = Vec::with_capacity(vars.horizon + 1);
    states.push(measured.clone());
    for k in 1..=vars.horizon {
        states.push(DVector::from_fn(NX, |d, _| x[vars.state(k) + d]));
    }
    let inputs = (0..vars.horizon)
        .map(|k| DVector::from_fn(NU, |d, _| x[vars.input(k) + d]))
        .collect();
    let slack_base = vars.n_states() + vars.n_inputs();
    let slacks = (slack_base..vars.n()).map(|i| x[i]).collect();
    OpenLoopPlan { states, inputs, slacks, objective }
}

/// Runs the convexification loop for one control step.
pub fn solve_timestep(
    config: &MpcConfig,
    detector: &dyn Detector,
    measured: &DVector<f64>,
    reference: &DVector<f64>,
    warm: WarmStart,
) -> Result<TimestepOutcome, ImpcError> {
    config.validate()?;
    warm.check(config.horizon)?;
    let mut nominal = warm;
    let mut qp_start: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut last_plan: Option<OpenLoopPlan> = None;

    for iteration in 1..=config.max_iterations {
        let linearizations = linearize_dynamics(config, &nominal);
        let (halfspaces, psi0) =
            linearize_boundaries(detector, measured, &nominal.states, config.robot_radius)?;
        let inputs = CftocInputs {
            current_state: measured,
            reference,
            linearizations: &linearizations,
            halfspaces: &halfspaces,
            psi0_at_x0: &psi0,
        };
        let (problem, vars) = assemble_cftoc(config, &inputs)?;
        let solution = qp::solve_with_start(
            &problem,
            &config.qp,
            qp_start.as_ref().map(|(x, y)| (x, y)),
        )?;
        match solution.status {
            QpStatus::Solved | QpStatus::MaxIterations => {}
            QpStatus::PrimalInfeasible | QpStatus::DualInfeasible => {
                return Ok(TimestepOutcome::Infeasible { iteration });
            }
        }
        let objective = solution.objective(&problem);
        let plan = extract_plan(&solution.x, &vars, measured, objective);
        let done = converged(&plan.states, &nominal.states, config.eps_abs, config.eps_rel);
        nominal = WarmStart { states: plan.states.clone(), inputs: plan.inputs.clone() };
        qp_start = Some((solution.x, solution.y));
        last_plan = Some(plan);
        if done {
            return Ok(TimestepOutcome::Converged {
                plan: last_plan.unwrap(),
                iterations: iteration,
            });
        }
    }
    Ok(TimestepOutcome::IterationLimit {
        plan: last_plan.expect("at least one iteration ran"),
        iterations: config.max_iterations,
    })
}

/// Ground-truth obstacle model used only for safety diagnostics.
#[derive(Debug, Clone)]
pub enum World {
    Circles(Vec<CircleObstacle>),
    Map(ObstacleMap),
}

impl World {
    /// Worst-case clearance diagnostic at a position. For circles this is
    /// `d^2 - (r + robot)^2`; for pixel maps the signed boundary distance
    /// minus the robot radius. Negative means collision.
    pub fn min_barrier(&self, position: &Point, robot_radius: f64) -> f64 {
        match self {
            World::Circles(circles) => circles
                .iter()
                .map(|c| {
                    let d2 = (position - c.center_point()).norm_squared();
                    let rr = c.radius + robot_radius;
                    d2 - rr * rr
                })
                .fold(f64::INFINITY, f64::min),
            World::Map(map) => map.signed_margin(position) - robot_radius,
        }
    }
}

/// How the tracking reference evolves during a closed-loop run.
#[derive(Debug, Clone)]
pub enum ReferencePolicy {
    /// Track one fixed state over the whole run.
    Fixed(DVector<f64>),
    /// Visit waypoints in order; the reference heading points at the
    /// active waypoint and a waypoint is captured within the radius.
    Waypoints { points: Vec<Point>, capture_radius: f64 },
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTask {
    pub initial_state: SystemState,
    pub reference: ReferencePolicy,
    pub max_steps: usize,
    /// Position distance to the final target that counts as arrival
    /// (fixed-reference mode only; waypoint mode uses the capture radius).
    pub goal_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub state: SystemState,
    pub input: SystemInput,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time: std::time::Duration,
    /// Clearance diagnostic at the post-step state.
    pub min_barrier: f64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub steps: Vec<StepRecord>,
    /// States visited, length `steps.len() + 1`.
    pub states: Vec<SystemState>,
    pub reached_goal: bool,
    pub waypoints_reached: usize,
    /// Set when a timestep became infeasible; the run stops there.
    pub infeasible_at: Option<usize>,
}

impl ClosedLoopResult {
    pub fn min_barrier(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.min_barrier)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Runs the controller against the true nonlinear dynamics.
pub fn run_closed_loop(
    config: &MpcConfig,
    detector: &dyn Detector,
    world: &World,
    task: &ClosedLoopTask,
) -> Result<ClosedLoopResult, ImpcError> {
    config.validate()?;
    let mut state = task.initial_state;
    let mut states = vec![state];
    let mut steps = Vec::new();
    let mut waypoint_idx = 0usize;
    let mut previous_plan: Option<OpenLoopPlan> = None;
    let mut result_reached = false;
    let mut infeasible_at = None;

    for t in 0..task.max_steps {
        let measured = state.to_vector();
        let position = Point::new(state.x, state.y);

        // Active reference for this step.
        let reference = match &task.reference {
            ReferencePolicy::Fixed(r) => r.clone(),
            ReferencePolicy::Waypoints { points, capture_radius } => {
                while waypoint_idx < points.len()
                    && (position - points[waypoint_idx]).norm() <= *capture_radius
                {
                    waypoint_idx += 1;
                }
                if waypoint_idx >= points.len() {
                    result_reached = true;
                    break;
                }
                let w = points[waypoint_idx];
                let heading = (w.y - state.y).atan2(w.x - state.x);
                DVector::from_column_slice(&[w.x, w.y, heading, 0.0])
            }
        };
        if let ReferencePolicy::Fixed(r) = &task.reference {
            if (position - Point::new(r[0], r[1])).norm() <= task.goal_tolerance {
                result_reached = true;
                break;
            }
        }

        let warm = match &previous_plan {
            Some(plan) => WarmStart::from_shifted_plan(plan, &measured, config.dt)?,
            None => WarmStart::from_rollout(&measured, config.horizon, config.dt)?,
        };

        let started = std::time::Instant::now();
        let outcome = solve_timestep(config, detector, &measured, &reference, warm)?;
        let solve_time = started.elapsed();

        let Some(plan) = outcome.plan() else {
            infeasible_at = Some(t);
            break;
        };
        let input = plan.first_input();
        let next = crate::dynamics::step(state, input, config.dt)?;
        steps.push(StepRecord {
            state,
            input,
            iterations: outcome.iterations(),
            converged: matches!(outcome, TimestepOutcome::Converged { .. }),
            solve_time,
            min_barrier: world.min_barrier(&Point::new(next.x, next.y), config.robot_radius),
        });
        previous_plan = Some(plan.clone());
        state = next;
        states.push(state);
    }

    // A fixed-reference run may end exactly on the goal after the last step.
    if !result_reached {
        if let ReferencePolicy::Fixed(r) = &task.reference {
            let position = Point::new(state.x, state.y);
            if (position - Point::new(r[0], r[1])).norm() <= task.goal_tolerance {
                result_reached = true;
            }
        }
    }

    Ok(ClosedLoopResult {
        steps,
        states,
        reached_goal: result_reached,
        waypoints_reached: waypoint_idx,
        infeasible_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::CircleDetector;
    use approx::assert_relative_eq;

    fn free_space_detector() -> CircleDetector {
        CircleDetector { circles: Vec::new() }
    }

    fn base_config(horizon: usize) -> MpcConfig {
        MpcConfig {
            horizon,
            dt: 0.1,
            state_weight: DVector::from_element(4, 10.0),
            terminal_weight: DVector::from_element(4, 10.0),
            input_weight: DVector::from_element(2, 1.0),
            slack_weight: 1000.0,
            cbf: CbfConfig::new(vec![0.4]).unwrap(),
            slack_mode: SlackMode::Unbounded,
            bounds: BoxBounds::symmetric(4, 10.0, &[7.0, 5.0]),
            robot_radius: 0.0,
            max_iterations: 50,
            eps_abs: 1e-4,
            eps_rel: 1e-2,
            qp: QpSettings::default(),
        }
    }

    fn circle_detector() -> CircleDetector {
        CircleDetector {
            circles: vec![CircleObstacle::new(Point::new(0.0, 0.0), 1.0).unwrap()],
        }
    }

    #[test]
    fn horizon_one_matches_analytic_kkt() {
        // With N = 1, no obstacles, and wide bounds, the optimum is
        // u0 = (B'WB + R)^-1 B'W (ref - A x0 - c) for the linearization at
        // the warm-start point, after the loop converges on the nonlinear
        // fixed point. Verify against a direct computation at the returned
        // linearization point.
        let config = base_config(1);
        let detector = free_space_detector();
        let measured = DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.0]);
        let reference = DVector::from_column_slice(&[0.0, 0.0, 0.5, 1.0]);
        let warm = WarmStart::from_rollout(&measured, 1, config.dt).unwrap();
        let outcome =
            solve_timestep(&config, &detector, &measured, &reference, warm).unwrap();
        let plan = outcome.plan().expect("feasible");

        // At the converged nominal, the subproblem is exact for theta/v
        // rows (linear dynamics), so those components obey the KKT system.
        let model = Unicycle;
        let lin = model.jacobians(&plan.states[0], &plan.inputs[0], config.dt);
        let w = DMatrix::from_diagonal(&config.terminal_weight);
        let r = DMatrix::from_diagonal(&config.input_weight);
        let c = model.step(&lin.nominal_state, &lin.nominal_input, config.dt)
            - &lin.a * &lin.nominal_state
            - &lin.b * &lin.nominal_input;
        let free = &reference - &lin.a * &measured - &c;
        let lhs = lin.b.transpose() * &w * &lin.b + r;
        let rhs = lin.b.transpose() * &w * free;
        let u_expected = lhs.lu().solve(&rhs).unwrap();
        assert_relative_eq!(plan.inputs[0][0], u_expected[0], epsilon = 1e-4);
        assert_relative_eq!(plan.inputs[0][1], u_expected[1], epsilon = 1e-4);
    }

    #[test]
    fn timestep_is_deterministic() {
        let config = base_config(8);
        let detector = circle_detector();
        let measured = DVector::from_column_slice(&[-3.0, 0.0, 0.0, 0.0]);
        let reference = DVector::from_column_slice(&[3.0, 0.01, 0.0, 0.0]);
        let solve = || {
            let warm = WarmStart::from_rollout(&measured, config.horizon, config.dt).unwrap();
            solve_timestep(&config, &detector, &measured, &reference, warm).unwrap()
        };
        let a = solve();
        let b = solve();
        let (pa, pb) = (a.plan().unwrap(), b.plan().unwrap());
        assert_eq!(a.iterations(), b.iterations());
        for (sa, sb) in pa.states.iter().zip(&pb.states) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn converges_within_budget_near_obstacle() {
        let mut config = base_config(24);
        config.cbf = CbfConfig::new(vec![0.4, 0.4]).unwrap();
        config.max_iterations = 1000;
        let detector = circle_detector();
        let measured = DVector::from_column_slice(&[-3.0, 0.0, 0.0, 0.0]);
        let reference = DVector::from_column_slice(&[3.0, 0.01, 0.0, 0.0]);
        let warm = WarmStart::from_rollout(&measured, config.horizon, config.dt).unwrap();
        let outcome = solve_timestep(&config, &detector, &measured, &reference, warm).unwrap();
        assert!(
            matches!(outcome, TimestepOutcome::Converged { .. }),
            "expected convergence, got {} iterations",
            outcome.iterations()
        );
        let plan = outcome.plan().unwrap();
        for s in &plan.states {
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn iteration_cap_still_yields_usable_plan() {
        // Off-axis start where the fixed-point iteration oscillates between
        // ways around the obstacle and hits the cap: the controller must
        // still hand back a finite plan to actuate.
        let mut config = base_config(24);
        config.cbf = CbfConfig::new(vec![0.4, 0.4]).unwrap();
        config.max_iterations = 40;
        let detector = circle_detector();
        let measured = DVector::from_column_slice(&[-3.0, 0.5, 0.0, 0.0]);
        let reference = DVector::from_column_slice(&[3.0, 0.01, 0.0, 0.0]);
        let warm = WarmStart::from_rollout(&measured, config.horizon, config.dt).unwrap();
        let outcome = solve_timestep(&config, &detector, &measured, &reference, warm).unwrap();
        let plan = outcome.plan().expect("plan expected even without convergence");
        assert_eq!(plan.states.len(), config.horizon + 1);
        for s in &plan.states {
            assert!(s.iter().all(|v| v.is_finite()));
        }
        for u in &plan.inputs {
            for j in 0..u.len() {
                assert!(u[j] >= config.bounds.input_lo[j] - 1e-9);
                assert!(u[j] <= config.bounds.input_hi[j] + 1e-9);
            }
        }
    }

    #[test]
    fn obstacle_free_plan_heads_toward_reference() {
        let config = base_config(10);
        let detector = free_space_detector();
        let measured = DVector::from_column_slice(&[-2.0, 0.0, 0.0, 0.0]);
        let reference = DVector::from_column_slice(&[2.0, 0.0, 0.0, 0.0]);
        let warm = WarmStart::from_rollout(&measured, config.horizon, config.dt).unwrap();
        let outcome = solve_timestep(&config, &detector, &measured, &reference, warm).unwrap();
        let plan = outcome.plan().unwrap();
        let first = &plan.states[1];
        let last = plan.states.last().unwrap();
        assert!(last[0] > first[0], "plan should progress in +x");
    }

    #[test]
    fn shifted_warm_start_keeps_measured_head_and_plan_tail() {
        let plan = OpenLoopPlan {
            states: (0..=4)
                .map(|k| DVector::from_element(4, k as f64))
                .collect(),
            inputs: (0..4)
                .map(|k| DVector::from_element(2, 0.1 * k as f64))
                .collect(),
            slacks: Vec::new(),
            objective: 0.0,
        };
        let measured = DVector::from_column_slice(&[9.0, 9.0, 0.0, 0.0]);
        let warm = WarmStart::from_shifted_plan(&plan, &measured, 0.1).unwrap();
        assert_eq!(warm.states.len(), 5);
        assert_eq!(warm.inputs.len(), 4);
        assert_eq!(warm.states[0], measured);
        for k in 1..4 {
            assert_eq!(warm.states[k], plan.states[k + 1]);
        }
        for k in 0..3 {
            assert_eq!(warm.inputs[k], plan.inputs[k + 1]);
        }
        assert_eq!(warm.inputs[3], plan.inputs[3]);
        let model = Unicycle;
        assert_eq!(warm.states[4], model.step(&plan.states[4], &plan.inputs[3], 0.1));
    }

    #[test]
    fn safe_mode_plan_keeps_barrier_nonnegative_at_low_orders() {
        let mut config = base_config(12);
        config.slack_mode = SlackMode::Safe;
        config.cbf = CbfConfig::new(vec![0.4]).unwrap();
        let detector = circle_detector();
        let measured = DVector::from_column_slice(&[-2.0, 0.05, 0.0, 0.0]);
        let reference = DVector::from_column_slice(&[2.0, 0.05, 0.0, 0.0]);
        let warm = WarmStart::from_rollout(&measured, config.horizon, config.dt).unwrap();
        let outcome = solve_timestep(&config, &detector, &measured, &reference, warm).unwrap();
        let plan = outcome.plan().expect("feasible");
        // For orders i <= m_cbf the combination of the barrier row and the
        // slack bound forces the linearized barrier nonnegative at step i.
        let (halfspaces, _) = linearize_boundaries(
            &detector,
            &measured,
            &plan.states,
            config.robot_radius,
        )
        .unwrap();
        for i in 1..=config.cbf.m_cbf() {
            let hs = halfspaces[0][i].as_ref().unwrap();
            let value = hs.eval(&position_of(&plan.states[i]));
            assert!(value >= -1e-5, "barrier {value} negative at step {i}");
        }
    }

    #[test]
    fn var_map_layout_is_contiguous() {
        let vars = VarMap::new(24, 2, 1, true);
        assert_eq!(vars.slack_per_obstacle, 24 + 23);
        assert_eq!(vars.n(), 96 + 48 + 47);
        assert_eq!(vars.state(1), 0);
        assert_eq!(vars.state(24), 92);
        assert_eq!(vars.input(0), 96);
        assert_eq!(vars.slack(0, 1, 1), Some(144));
        assert_eq!(vars.slack(0, 24, 1), Some(167));
        assert_eq!(vars.slack(0, 1, 2), Some(168));
        assert_eq!(vars.slack(0, 23, 2), Some(190));
        let no_slack = VarMap::new(24, 2, 1, false);
        assert_eq!(no_slack.slack(0, 1, 1), None);
        assert_eq!(no_slack.n(), 144);
    }

    #[test]
    fn closed_loop_free_space_reaches_goal() {
        let config = base_config(10);
        let detector = free_space_detector();
        let world = World::Circles(Vec::new());
        let task = ClosedLoopTask {
            initial_state: SystemState::new(-1.0, 0.0, 0.0, 0.0),
            reference: ReferencePolicy::Fixed(DVector::from_column_slice(&[
                1.0, 0.0, 0.0, 0.0,
            ])),
            max_steps: 80,
            goal_tolerance: 0.1,
        };
        let result = run_closed_loop(&config, &detector, &world, &task).unwrap();
        assert!(result.reached_goal, "final state {:?}", result.states.last());
        assert!(result.infeasible_at.is_none());
    }
}

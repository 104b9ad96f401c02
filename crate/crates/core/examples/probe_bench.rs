use impc_core::cbf::{CbfConfig, SlackMode};
use impc_core::detector::CircleDetector;
use impc_core::dynamics::BoxBounds;
use impc_core::geometry::{CircleObstacle, Point};
use impc_core::impc::*;
use impc_core::qp::QpSettings;
use nalgebra::DVector;

fn main() {
    let config = MpcConfig {
        horizon: 24,
        dt: 0.1,
        state_weight: DVector::from_element(4, 10.0),
        terminal_weight: DVector::from_element(4, 10.0),
        input_weight: DVector::from_element(2, 1.0),
        slack_weight: 1000.0,
        cbf: CbfConfig::new(vec![0.4]).unwrap(),
        slack_mode: SlackMode::Unbounded,
        bounds: BoxBounds::symmetric(4, 10.0, &[7.0, 5.0]),
        robot_radius: 0.0,
        max_iterations: 40,
        eps_abs: 1e-4,
        eps_rel: 1e-2,
        qp: QpSettings { eps_prim: 1e-5, eps_dual: 1e-5, check_problem: false, ..QpSettings::default() },
    };
    let detector = CircleDetector { circles: vec![CircleObstacle::new(Point::new(0.0, 0.0), 1.0).unwrap()] };
    let reference = DVector::from_column_slice(&[3.0, 0.01, 0.0, 0.0]);
    for state in [
        DVector::from_column_slice(&[8.0, 8.0, 0.0, 0.0]),
        DVector::from_column_slice(&[-6.0, 3.0, 1.2, 1.0]),
    ] {
        let mut nominal = WarmStart::from_rollout(&state, config.horizon, config.dt).unwrap();
        // replicate the loop manually to print e_abs
        for j in 1..=config.max_iterations {
            let warm = WarmStart { states: nominal.states.clone(), inputs: nominal.inputs.clone() };
            let mut cfg = config.clone();
            cfg.max_iterations = 1;
            let out = solve_timestep(&cfg, &detector, &state, &reference, warm).unwrap();
            let plan = match out {
                TimestepOutcome::Converged { plan, .. } => { println!("  j={j} converged"); break_plan(plan); return; }
                TimestepOutcome::IterationLimit { plan, .. } => plan,
                TimestepOutcome::Infeasible { .. } => { println!("  j={j} infeasible"); return; }
            };
            let mut e2 = 0.0;
            let mut n2 = 0.0;
            for (a, b) in plan.states.iter().zip(&nominal.states) {
                e2 += (a - b).norm_squared();
                n2 += b.norm_squared();
            }
            println!("  j={j} e_abs={:.6} e_rel={:.6}", e2.sqrt(), e2.sqrt() / n2.sqrt());
            nominal = WarmStart { states: plan.states, inputs: plan.inputs };
        }
        println!("state done");
    }
}

fn break_plan(_p: OpenLoopPlan) {}

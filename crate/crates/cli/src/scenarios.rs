//! Preconfigured study scenarios.

use anyhow::Result;
use impc_core::cbf::{CbfConfig, SlackMode};
use impc_core::detector::{CircleDetector, Detector, OracleDetector, SbdDetector};
use impc_core::dynamics::{BoxBounds, SystemState};
use impc_core::geometry::{CircleObstacle, ObstacleMap, Point};
use impc_core::impc::{ClosedLoopTask, MpcConfig, ReferencePolicy, World};
use impc_core::qp::QpSettings;
use impc_core::sbd::MlpModel;
use nalgebra::DVector;

use crate::maps;

/// A closed-loop study setup: controller parameters, ground-truth world,
/// task definition, and the boundary information source.
pub struct Scenario {
    pub name: &'static str,
    pub config: MpcConfig,
    pub world: World,
    pub task: ClosedLoopTask,
    pub detector: Box<dyn Detector + Send + Sync>,
}

fn qp_settings() -> QpSettings {
    QpSettings {
        eps_prim: 1e-5,
        eps_dual: 1e-5,
        check_problem: false,
        ..QpSettings::default()
    }
}

/// Circle avoidance with a relative-degree-2 barrier and an unbounded
/// slack; the classic head-on pass of a unit circle.
pub fn circle_crossing() -> Result<Scenario> {
    let config = MpcConfig {
        horizon: 24,
        dt: 0.1,
        state_weight: DVector::from_element(4, 10.0),
        terminal_weight: DVector::from_element(4, 10.0),
        input_weight: DVector::from_element(2, 1.0),
        slack_weight: 1000.0,
        cbf: CbfConfig::new(vec![0.4, 0.4])?,
        slack_mode: SlackMode::Unbounded,
        bounds: BoxBounds::symmetric(4, 10.0, &[7.0, 5.0]),
        robot_radius: 0.0,
        max_iterations: 1000,
        eps_abs: 1e-4,
        eps_rel: 1e-2,
        qp: qp_settings(),
    };
    let circles = vec![CircleObstacle::new(Point::new(0.0, 0.0), 1.0).unwrap()];
    Ok(Scenario {
        name: "circle-crossing",
        config,
        world: World::Circles(circles.clone()),
        task: ClosedLoopTask {
            initial_state: SystemState::new(-3.0, 0.0, 0.0, 0.0),
            reference: ReferencePolicy::Fixed(DVector::from_column_slice(&[
                3.0, 0.01, 0.0, 0.0,
            ])),
            max_steps: 100,
            goal_tolerance: 0.1,
        },
        detector: Box::new(CircleDetector { circles }),
    })
}

fn boundary_map_config(obstacle_focused_radius: f64) -> Result<MpcConfig> {
    Ok(MpcConfig {
        horizon: 24,
        dt: 0.05,
        state_weight: DVector::from_element(4, 10.0),
        terminal_weight: DVector::from_element(4, 10.0),
        input_weight: DVector::from_element(2, 1.0),
        slack_weight: 1000.0,
        cbf: CbfConfig::new(vec![0.1])?,
        slack_mode: SlackMode::Safe,
        bounds: BoxBounds::symmetric(4, 10.0, &[10.0, 10.0]),
        robot_radius: obstacle_focused_radius,
        max_iterations: 30,
        eps_abs: 1e-2,
        eps_rel: 1e-2,
        qp: qp_settings(),
    })
}

fn heading_toward(from: Point, to: Point) -> f64 {
    (to.y - from.y).atan2(to.x - from.x)
}

/// Which nearest-point source a map scenario uses.
pub enum BoundarySource {
    /// Exact pixel search on the true map.
    Oracle,
    /// A trained network.
    Learned(MlpModel),
}

fn boundary_detector(
    source: BoundarySource,
    map: &ObstacleMap,
) -> Box<dyn Detector + Send + Sync> {
    match source {
        BoundarySource::Oracle => Box::new(OracleDetector { map: map.clone() }),
        BoundarySource::Learned(model) => Box::new(SbdDetector::new(model)),
    }
}

/// Point robot crossing the five-obstacle map corner to corner.
pub fn cluttered_field(source: BoundarySource) -> Result<Scenario> {
    let map = maps::five_obstacle_map()?;
    let config = boundary_map_config(0.0)?;
    let start = Point::new(-2.0, -2.0);
    let waypoints = vec![
        Point::new(0.0, -1.7),
        Point::new(2.05, -0.3),
        Point::new(2.0, 1.8),
    ];
    let theta0 = heading_toward(start, waypoints[0]);
    let detector = boundary_detector(source, &map);
    Ok(Scenario {
        name: "cluttered-field",
        config,
        world: World::Map(map),
        task: ClosedLoopTask {
            initial_state: SystemState::new(start.x, start.y, theta0, 0.0),
            reference: ReferencePolicy::Waypoints {
                points: waypoints,
                capture_radius: 0.1,
            },
            max_steps: 1500,
            goal_tolerance: 0.1,
        },
        detector,
    })
}

/// Circular robot threading the narrow track through all centerline knots.
pub fn narrow_track(source: BoundarySource) -> Result<Scenario> {
    let map = maps::narrow_track_map()?;
    let config = boundary_map_config(0.4)?;
    let knots = maps::track_centerline();
    let start = knots[0];
    let waypoints: Vec<Point> = knots[1..].to_vec();
    let theta0 = heading_toward(start, waypoints[0]);
    let detector = boundary_detector(source, &map);
    Ok(Scenario {
        name: "narrow-track",
        config,
        world: World::Map(map),
        task: ClosedLoopTask {
            initial_state: SystemState::new(start.x, start.y, theta0, 0.0),
            reference: ReferencePolicy::Waypoints {
                points: waypoints,
                capture_radius: 0.1,
            },
            max_steps: 4000,
            goal_tolerance: 0.1,
        },
        detector,
    })
}

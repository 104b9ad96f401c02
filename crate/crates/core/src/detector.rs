//! Nearest-point providers used by the controller.
//!
//! The controller only needs, for a query position, the nearest boundary
//! point of every obstacle. Three providers implement that interface: an
//! analytic one for circles, an exact pixel search over a map, and the
//! learned network.

use crate::geometry::{
    nearest_point_circle, nearest_point_exact, CircleObstacle, GeometryError, ObstacleMap, Point,
};
use crate::sbd::MlpModel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("model predicts {got} points, detector configured for {want} obstacles")]
    PointCountMismatch { got: usize, want: usize },
}

/// Nearest boundary point per obstacle, in a fixed obstacle order.
pub trait Detector {
    fn obstacle_count(&self) -> usize;
    fn nearest_points(&self, position: &Point) -> Result<Vec<Point>, DetectorError>;
}

/// Analytic detector for circular obstacles.
#[derive(Debug, Clone)]
pub struct CircleDetector {
    pub circles: Vec<CircleObstacle>,
}

impl Detector for CircleDetector {
    fn obstacle_count(&self) -> usize {
        self.circles.len()
    }

    fn nearest_points(&self, position: &Point) -> Result<Vec<Point>, DetectorError> {
        self.circles
            .iter()
            .map(|c| nearest_point_circle(position, c).map_err(DetectorError::from))
            .collect()
    }
}

/// Exact pixel search over a boundary map. Ground truth for the learned
/// detector and the classical baseline in benchmarks.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub map: ObstacleMap,
}

impl Detector for OracleDetector {
    fn obstacle_count(&self) -> usize {
        self.map.obstacles.len()
    }

    fn nearest_points(&self, position: &Point) -> Result<Vec<Point>, DetectorError> {
        Ok(self
            .map
            .obstacles
            .iter()
            .map(|b| nearest_point_exact(position, b).0)
            .collect())
    }
}

/// Learned detector backed by a trained network.
#[derive(Debug, Clone)]
pub struct SbdDetector {
    model: MlpModel,
}

impl SbdDetector {
    pub fn new(model: MlpModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }
}

impl Detector for SbdDetector {
    fn obstacle_count(&self) -> usize {
        self.model.points_out()
    }

    fn nearest_points(&self, position: &Point) -> Result<Vec<Point>, DetectorError> {
        Ok(self.model.predict(*position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_shape, Extent, ShapeSpec};

    #[test]
    fn circle_detector_projects_radially() {
        let det = CircleDetector {
            circles: vec![CircleObstacle::new(Point::new(0.0, 0.0), 1.0).unwrap()],
        };
        let pts = det.nearest_points(&Point::new(3.0, 0.0)).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0] - Point::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn oracle_detector_orders_by_obstacle() {
        let extent = Extent::new(-5.0, 5.0, -5.0, 5.0).unwrap();
        let a = generate_shape(
            &ShapeSpec::Circle { center: [-2.0, 0.0], radius: 0.5 },
            40,
            0,
        )
        .unwrap();
        let b = generate_shape(
            &ShapeSpec::Circle { center: [2.0, 0.0], radius: 0.5 },
            40,
            1,
        )
        .unwrap();
        let det = OracleDetector { map: ObstacleMap::new(vec![a, b], extent).unwrap() };
        assert_eq!(det.obstacle_count(), 2);
        let pts = det.nearest_points(&Point::new(0.0, 0.0)).unwrap();
        assert!(pts[0].x < 0.0, "first point belongs to the left obstacle");
        assert!(pts[1].x > 0.0, "second point belongs to the right obstacle");
    }
}

//! Built-in benchmark maps.
//!
//! Three maps cover the study scenarios: a single circle, a cluttered map
//! with five mixed-shape obstacles, and a narrow track enclosed by two
//! band-shaped obstacles around a smooth centerline.

use anyhow::{Context, Result};
use impc_core::geometry::{
    generate_shape, Extent, ObstacleBoundary, ObstacleMap, Point, ShapeSpec,
};

/// Unit circle at the origin on a small square map.
pub fn circle_map() -> Result<ObstacleMap> {
    let extent = Extent::new(-2.0, 2.0, -2.0, 2.0)?;
    let circle = generate_shape(
        &ShapeSpec::Circle { center: [0.0, 0.0], radius: 1.0 },
        100,
        0,
    )?;
    Ok(ObstacleMap::new(vec![circle], extent)?)
}

/// Five obstacles of mixed convexity on a 5 x 4 map, at most 100 boundary
/// pixels each.
pub fn five_obstacle_map() -> Result<ObstacleMap> {
    let extent = Extent::new(-2.5, 2.5, -2.0, 2.0)?;
    let shapes = vec![
        ShapeSpec::Circle { center: [-1.2, 0.9], radius: 0.45 },
        ShapeSpec::Ellipse {
            center: [1.3, 1.0],
            semi_x: 0.55,
            semi_y: 0.3,
            rotation: 0.4,
        },
        ShapeSpec::Star {
            center: [1.2, -1.0],
            outer_radius: 0.5,
            inner_radius: 0.2,
            points: 5,
            rotation: 0.3,
        },
        ShapeSpec::Polygon {
            vertices: vec![
                [-1.8, -1.5],
                [-0.8, -1.5],
                [-0.8, -1.1],
                [-1.2, -1.1],
                [-1.2, -0.7],
                [-1.8, -0.7],
            ],
        },
        ShapeSpec::RoundedBar {
            center: [0.0, 0.0],
            length: 1.2,
            width: 0.35,
            rotation: 1.1,
        },
    ];
    let obstacles = shapes
        .iter()
        .enumerate()
        .map(|(id, spec)| generate_shape(spec, 100, id).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(ObstacleMap::new(obstacles, extent)?)
}

/// Centerline knots of the narrow track, reused as navigation waypoints.
pub fn track_centerline() -> Vec<Point> {
    vec![
        Point::new(4.0, -4.5),
        Point::new(4.0, -1.0),
        Point::new(1.5, 1.5),
        Point::new(-2.0, 1.5),
        Point::new(-5.0, 0.0),
        Point::new(-7.0, -2.0),
        Point::new(-5.0, -4.0),
        Point::new(-2.5, -4.25),
    ]
}

/// Track free-space width.
pub const TRACK_WIDTH: f64 = 1.8;
const TRACK_BAND_THICKNESS: f64 = 0.7;

/// Narrow track on a 16 x 12 map: two band obstacles offset from a smooth
/// centerline, at most 400 boundary pixels each.
pub fn narrow_track_map() -> Result<ObstacleMap> {
    let extent = Extent::new(-10.0, 6.0, -6.0, 6.0)?;
    let center = smooth_open_polyline(&track_centerline(), 600);
    let left = offset_band(&center, TRACK_WIDTH / 2.0, TRACK_WIDTH / 2.0 + TRACK_BAND_THICKNESS);
    let right = offset_band(
        &center,
        -(TRACK_WIDTH / 2.0 + TRACK_BAND_THICKNESS),
        -TRACK_WIDTH / 2.0,
    );
    let left = ObstacleBoundary::new(0, resample_closed(&left, 400))
        .context("left band boundary")?;
    let right = ObstacleBoundary::new(1, resample_closed(&right, 400))
        .context("right band boundary")?;
    Ok(ObstacleMap::new(vec![left, right], extent)?)
}

/// Catmull-Rom interpolation through the knots followed by a few smoothing
/// passes, so offset curves at the track half-width stay simple.
fn smooth_open_polyline(knots: &[Point], samples: usize) -> Vec<Point> {
    assert!(knots.len() >= 2);
    let mut padded = Vec::with_capacity(knots.len() + 2);
    padded.push(knots[0] + (knots[0] - knots[1]));
    padded.extend_from_slice(knots);
    let n = knots.len();
    padded.push(knots[n - 1] + (knots[n - 1] - knots[n - 2]));

    let segments = n - 1;
    let mut pts = Vec::with_capacity(samples);
    for i in 0..samples {
        let s = i as f64 / (samples - 1) as f64 * segments as f64;
        let seg = (s.floor() as usize).min(segments - 1);
        let t = s - seg as f64;
        let p0 = padded[seg];
        let p1 = padded[seg + 1];
        let p2 = padded[seg + 2];
        let p3 = padded[seg + 3];
        let t2 = t * t;
        let t3 = t2 * t;
        pts.push(
            (p1 * 2.0
                + (p2 - p0) * t
                + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2
                + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
                * 0.5,
        );
    }

    // Corner rounding: repeated local averaging with pinned endpoints.
    for _ in 0..30 {
        let prev = pts.clone();
        for i in 1..pts.len() - 1 {
            pts[i] = (prev[i - 1] + prev[i] * 2.0 + prev[i + 1]) * 0.25;
        }
    }
    pts
}

/// Closed contour of the band between signed offsets `d_near` and `d_far`
/// from the centerline (positive offsets are to the left of travel).
fn offset_band(center: &[Point], d_near: f64, d_far: f64) -> Vec<Point> {
    let normals: Vec<Point> = (0..center.len())
        .map(|i| {
            let a = if i == 0 { center[0] } else { center[i - 1] };
            let b = if i + 1 == center.len() { center[i] } else { center[i + 1] };
            let t = b - a;
            let n = Point::new(-t.y, t.x);
            let norm = n.norm();
            if norm == 0.0 { Point::new(0.0, 0.0) } else { n / norm }
        })
        .collect();
    let mut contour: Vec<Point> = center
        .iter()
        .zip(&normals)
        .map(|(c, n)| c + n * d_near)
        .collect();
    contour.extend(
        center
            .iter()
            .zip(&normals)
            .rev()
            .map(|(c, n)| c + n * d_far),
    );
    contour
}

/// Arc-length uniform resampling of a closed contour.
fn resample_closed(contour: &[Point], count: usize) -> Vec<Point> {
    let n = contour.len();
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(0.0);
    for i in 0..n {
        let next = contour[(i + 1) % n];
        cumulative.push(cumulative[i] + (next - contour[i]).norm());
    }
    let total = *cumulative.last().unwrap();
    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for i in 0..count {
        let target = total * i as f64 / count as f64;
        while seg + 1 < n && cumulative[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let t = if seg_len > 0.0 { (target - cumulative[seg]) / seg_len } else { 0.0 };
        let a = contour[seg];
        let b = contour[(seg + 1) % n];
        out.push(a + (b - a) * t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_obstacle_map_has_expected_shape_counts() {
        let map = five_obstacle_map().unwrap();
        assert_eq!(map.obstacles.len(), 5);
        for o in &map.obstacles {
            assert!(o.pixels.len() <= 100, "obstacle {} too dense", o.id);
        }
    }

    #[test]
    fn five_obstacle_map_keeps_key_points_free() {
        let map = five_obstacle_map().unwrap();
        for p in [
            Point::new(-2.0, -2.0),
            Point::new(0.0, -1.7),
            Point::new(2.05, -0.3),
            Point::new(2.0, 1.8),
        ] {
            assert!(map.is_safe(&p), "expected {p:?} to be free");
        }
        assert!(!map.is_safe(&Point::new(-1.2, 0.9)), "circle center is unsafe");
    }

    #[test]
    fn track_centerline_is_free_and_bands_are_not() {
        let map = narrow_track_map().unwrap();
        assert_eq!(map.obstacles.len(), 2);
        for o in &map.obstacles {
            assert!(o.pixels.len() <= 400);
        }
        let center = smooth_open_polyline(&track_centerline(), 200);
        for p in &center {
            assert!(map.is_safe(p), "centerline point {p:?} inside a band");
            let margin = map.signed_margin(p);
            assert!(
                margin > 0.5,
                "track too tight at {p:?}: margin {margin}"
            );
        }
    }

    #[test]
    fn track_waypoints_have_robot_clearance() {
        let map = narrow_track_map().unwrap();
        for w in track_centerline() {
            let margin = map.signed_margin(&w);
            assert!(margin > 0.4, "waypoint {w:?} margin {margin} too small");
        }
    }
}

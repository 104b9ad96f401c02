//! Obstacle maps as boundary-pixel sets, exact nearest-point queries, and
//! the tangent-halfspace construction used as the linearized safety
//! boundary.
//!
//! Sign convention: the halfspace stores the outward form
//! `h(p) = (nominal - nearest)^T (p - nearest) - r * |nominal - nearest|`,
//! so the nominal point evaluates positive whenever its gap to the boundary
//! exceeds the robot radius.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub type Point = Vector2<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("obstacle boundary needs at least 3 pixels, got {0}")]
    TooFewPixels(usize),
    #[error("non-finite coordinate in boundary {0}")]
    NonFinitePixel(usize),
    #[error("map must contain at least one obstacle")]
    EmptyMap,
    #[error("pixel {pixel:?} of obstacle {obstacle} lies outside the map extent")]
    PixelOutsideExtent { obstacle: usize, pixel: (f64, f64) },
    #[error("invalid extent: {0:?}")]
    InvalidExtent((f64, f64, f64, f64)),
    #[error("nearest point undefined: query coincides with circle center")]
    QueryAtCenter,
    #[error("circle radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("tangent halfspace undefined for coincident nominal and nearest points")]
    CoincidentPoints,
    #[error("shape needs at least 3 pixels, got {0}")]
    TooFewShapePixels(usize),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed map file: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// Rectangular map extent `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min < x_max && y_min < y_max)
            || ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidExtent((x_min, x_max, y_min, y_max)));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// One unsafe set, represented by an ordered (counterclockwise) list of
/// boundary pixels forming a closed discrete contour.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleBoundary {
    pub id: usize,
    pub pixels: Vec<Point>,
}

impl ObstacleBoundary {
    pub fn new(id: usize, pixels: Vec<Point>) -> Result<Self, GeometryError> {
        if pixels.len() < 3 {
            return Err(GeometryError::TooFewPixels(pixels.len()));
        }
        if !pixels.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
            return Err(GeometryError::NonFinitePixel(id));
        }
        Ok(Self { id, pixels })
    }

    /// Ray-casting containment test against the polygon formed by the
    /// pixel contour.
    pub fn contains(&self, p: &Point) -> bool {
        let mut inside = false;
        let n = self.pixels.len();
        let mut j = n - 1;
        for i in 0..n {
            let (pi, pj) = (&self.pixels[i], &self.pixels[j]);
            if (pi.y > p.y) != (pj.y > p.y)
                && p.x < (pj.x - pi.x) * (p.y - pi.y) / (pj.y - pi.y) + pi.x
            {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Distance to the nearest boundary pixel, negated when `p` lies inside
    /// the contour.
    pub fn signed_margin(&self, p: &Point) -> f64 {
        let (nearest, _) = nearest_point_exact(p, self);
        let d = (p - nearest).norm();
        if self.contains(p) {
            -d
        } else {
            d
        }
    }

    /// Largest gap between consecutive pixels, a bound on the contour
    /// discretization error.
    pub fn pixel_spacing(&self) -> f64 {
        let n = self.pixels.len();
        (0..n)
            .map(|i| (self.pixels[(i + 1) % n] - self.pixels[i]).norm())
            .fold(0.0, f64::max)
    }
}

/// A set of obstacles inside a rectangular extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleMap {
    pub obstacles: Vec<ObstacleBoundary>,
    pub extent: Extent,
}

impl ObstacleMap {
    pub fn new(obstacles: Vec<ObstacleBoundary>, extent: Extent) -> Result<Self, GeometryError> {
        if obstacles.is_empty() {
            return Err(GeometryError::EmptyMap);
        }
        for ob in &obstacles {
            for px in &ob.pixels {
                if !extent.contains(px) {
                    return Err(GeometryError::PixelOutsideExtent {
                        obstacle: ob.id,
                        pixel: (px.x, px.y),
                    });
                }
            }
        }
        Ok(Self { obstacles, extent })
    }

    /// True when `p` lies inside no obstacle contour.
    pub fn is_safe(&self, p: &Point) -> bool {
        self.obstacles.iter().all(|ob| !ob.contains(p))
    }

    /// Minimum signed margin over all obstacles (negative inside any).
    pub fn signed_margin(&self, p: &Point) -> f64 {
        self.obstacles
            .iter()
            .map(|ob| ob.signed_margin(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.obstacles
            .iter()
            .map(|ob| ob.pixel_spacing())
            .fold(0.0, f64::max)
    }
}

/// Circular unsafe set with an analytic nearest-point map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleObstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CircleObstacle {
    pub fn new(center: Point, radius: f64) -> Result<Self, GeometryError> {
        if radius <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(radius));
        }
        Ok(Self {
            center: [center.x, center.y],
            radius,
        })
    }

    pub fn center_point(&self) -> Point {
        Point::new(self.center[0], self.center[1])
    }
}

/// Linearized safety boundary anchored at the nearest boundary point.
///
/// Evaluates `h(p) = normal . (p - anchor) - offset` with
/// `normal = valid_for - anchor` (unnormalized, pointing from the boundary
/// toward the nominal point) and `offset = robot_radius * |normal|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentHalfspace {
    pub normal: Point,
    pub anchor: Point,
    pub valid_for: Point,
    pub offset: f64,
}

impl TangentHalfspace {
    pub fn eval(&self, p: &Point) -> f64 {
        self.normal.dot(&(p - self.anchor)) - self.offset
    }

    /// Constant part of the affine form `h(p) = normal . p + constant`.
    pub fn constant(&self) -> f64 {
        -self.normal.dot(&self.anchor) - self.offset
    }

    /// Same halfspace with a unit normal, so `eval` is the signed distance
    /// to the tangent line minus the robot radius. The raw form scales with
    /// the nominal-to-boundary gap; barrier constraints that compare values
    /// across prediction steps need the scale-free version, otherwise the
    /// gap ratio between consecutive steps distorts the decay rate.
    pub fn normalized(&self) -> TangentHalfspace {
        let scale = 1.0 / self.normal.norm();
        TangentHalfspace {
            normal: self.normal * scale,
            anchor: self.anchor,
            valid_for: self.valid_for,
            offset: self.offset * scale,
        }
    }
}

/// Brute-force nearest boundary pixel; ties break to the lowest index.
/// Returns the pixel and its index. This is the ground-truth oracle behind
/// both the learned detector's training targets and the classical baseline.
pub fn nearest_point_exact(query: &Point, boundary: &ObstacleBoundary) -> (Point, usize) {
    let mut best = 0;
    let mut best_d2 = f64::INFINITY;
    for (i, px) in boundary.pixels.iter().enumerate() {
        let d2 = (query - px).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (boundary.pixels[best], best)
}

/// Analytic nearest point on a circle: the radial projection of the query.
pub fn nearest_point_circle(
    query: &Point,
    circle: &CircleObstacle,
) -> Result<Point, GeometryError> {
    let center = circle.center_point();
    let d = query - center;
    let norm = d.norm();
    if norm == 0.0 {
        return Err(GeometryError::QueryAtCenter);
    }
    Ok(center + d * (circle.radius / norm))
}

/// Builds the tangent halfspace at `nearest` seen from `nominal`, shifted
/// toward the nominal point by `robot_radius`.
pub fn tangent_halfspace(
    nominal: &Point,
    nearest: &Point,
    robot_radius: f64,
) -> Result<TangentHalfspace, GeometryError> {
    let normal = nominal - nearest;
    let gap = normal.norm();
    if gap == 0.0 {
        return Err(GeometryError::CoincidentPoints);
    }
    Ok(TangentHalfspace {
        normal,
        anchor: *nearest,
        valid_for: *nominal,
        offset: robot_radius * gap,
    })
}

/// Supported parametric shapes for programmatically generated maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeSpec {
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    Ellipse {
        center: [f64; 2],
        semi_x: f64,
        semi_y: f64,
        rotation: f64,
    },
    Polygon {
        vertices: Vec<[f64; 2]>,
    },
    Star {
        center: [f64; 2],
        outer_radius: f64,
        inner_radius: f64,
        points: usize,
        rotation: f64,
    },
    /// Axis-aligned bar of `length x width` (before rotation) with
    /// semicircular end caps.
    RoundedBar {
        center: [f64; 2],
        length: f64,
        width: f64,
        rotation: f64,
    },
}

/// Samples `pixel_count` points on the shape outline, ordered
/// counterclockwise and approximately uniform in arc length.
pub fn generate_shape(
    spec: &ShapeSpec,
    pixel_count: usize,
    id: usize,
) -> Result<ObstacleBoundary, GeometryError> {
    if pixel_count < 3 {
        return Err(GeometryError::TooFewShapePixels(pixel_count));
    }
    let pixels = match spec {
        ShapeSpec::Circle { center, radius } => {
            if *radius <= 0.0 {
                return Err(GeometryError::NonPositiveRadius(*radius));
            }
            (0..pixel_count)
                .map(|i| {
                    let t = 2.0 * std::f64::consts::PI * i as f64 / pixel_count as f64;
                    Point::new(center[0] + radius * t.cos(), center[1] + radius * t.sin())
                })
                .collect()
        }
        ShapeSpec::Ellipse {
            center,
            semi_x,
            semi_y,
            rotation,
        } => {
            // Arc-length table over a fine parameter grid, then resample.
            let fine = 64 * pixel_count;
            let pts: Vec<Point> = (0..fine)
                .map(|i| {
                    let t = 2.0 * std::f64::consts::PI * i as f64 / fine as f64;
                    rotate(Point::new(semi_x * t.cos(), semi_y * t.sin()), *rotation)
                        + Point::new(center[0], center[1])
                })
                .collect();
            resample_closed(&pts, pixel_count)
        }
        ShapeSpec::Polygon { vertices } => {
            if vertices.len() < 3 {
                return Err(GeometryError::TooFewVertices(vertices.len()));
            }
            let pts: Vec<Point> = vertices.iter().map(|v| Point::new(v[0], v[1])).collect();
            let pts = ensure_ccw(pts);
            sample_polyline(&pts, pixel_count)
        }
        ShapeSpec::Star {
            center,
            outer_radius,
            inner_radius,
            points,
            rotation,
        } => {
            let c = Point::new(center[0], center[1]);
            let mut verts = Vec::with_capacity(2 * points);
            for i in 0..2 * points {
                let r = if i % 2 == 0 { *outer_radius } else { *inner_radius };
                let t = std::f64::consts::PI * i as f64 / *points as f64 + rotation;
                verts.push(c + Point::new(r * t.cos(), r * t.sin()));
            }
            sample_polyline(&verts, pixel_count)
        }
        ShapeSpec::RoundedBar {
            center,
            length,
            width,
            rotation,
        } => {
            let r = width / 2.0;
            let half = (length / 2.0 - r).max(0.0);
            // Stadium outline: top edge, left cap, bottom edge, right cap.
            let fine = 64 * pixel_count;
            let total = 4.0 * half + 2.0 * std::f64::consts::PI * r;
            let pts: Vec<Point> = (0..fine)
                .map(|i| stadium_point(total * i as f64 / fine as f64, half, r))
                .map(|p| rotate(p, *rotation) + Point::new(center[0], center[1]))
                .collect();
            resample_closed(&pts, pixel_count)
        }
    };
    ObstacleBoundary::new(id, pixels)
}

fn stadium_point(s: f64, half: f64, r: f64) -> Point {
    let straight = 2.0 * half;
    let cap = std::f64::consts::PI * r;
    if s < straight {
        // Top edge, right to left (counterclockwise with +y up).
        Point::new(half - s, r)
    } else if s < straight + cap {
        let a = (s - straight) / r;
        let t = std::f64::consts::FRAC_PI_2 + a;
        Point::new(-half + r * t.cos(), r * t.sin())
    } else if s < 2.0 * straight + cap {
        let d = s - straight - cap;
        Point::new(-half + d, -r)
    } else {
        let a = (s - 2.0 * straight - cap) / r;
        let t = -std::f64::consts::FRAC_PI_2 + a;
        Point::new(half + r * t.cos(), r * t.sin())
    }
}

fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let a = &pts[i];
            let b = &pts[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

fn ensure_ccw(pts: Vec<Point>) -> Vec<Point> {
    if signed_area(&pts) < 0.0 {
        pts.into_iter().rev().collect()
    } else {
        pts
    }
}

/// Uniform arc-length sampling of a closed polyline given by `verts`.
fn sample_polyline(verts: &[Point], pixel_count: usize) -> Vec<Point> {
    let verts = ensure_ccw(verts.to_vec());
    let n = verts.len();
    let seg_len: Vec<f64> = (0..n)
        .map(|i| (verts[(i + 1) % n] - verts[i]).norm())
        .collect();
    let total: f64 = seg_len.iter().sum();
    let mut out = Vec::with_capacity(pixel_count);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for i in 0..pixel_count {
        let s = total * i as f64 / pixel_count as f64;
        while seg + 1 < n && s >= seg_start + seg_len[seg] {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let frac = if seg_len[seg] > 0.0 {
            (s - seg_start) / seg_len[seg]
        } else {
            0.0
        };
        out.push(verts[seg] + (verts[(seg + 1) % n] - verts[seg]) * frac);
    }
    out
}

/// Resamples a dense closed point chain to `count` approximately
/// arc-length-uniform points.
fn resample_closed(pts: &[Point], count: usize) -> Vec<Point> {
    sample_polyline(pts, count)
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    extent: [f64; 4],
    obstacles: Vec<ObstacleFile>,
}

#[derive(Serialize, Deserialize)]
struct ObstacleFile {
    id: usize,
    pixels: Vec<[f64; 2]>,
}

pub fn save_map(map: &ObstacleMap, path: &Path) -> Result<(), GeometryError> {
    let file = MapFile {
        extent: [
            map.extent.x_min,
            map.extent.x_max,
            map.extent.y_min,
            map.extent.y_max,
        ],
        obstacles: map
            .obstacles
            .iter()
            .map(|ob| ObstacleFile {
                id: ob.id,
                pixels: ob.pixels.iter().map(|p| [p.x, p.y]).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<ObstacleMap, GeometryError> {
    let text = std::fs::read_to_string(path)?;
    let file: MapFile = serde_json::from_str(&text)?;
    let extent = Extent::new(file.extent[0], file.extent[1], file.extent[2], file.extent[3])?;
    let obstacles = file
        .obstacles
        .into_iter()
        .map(|ob| {
            ObstacleBoundary::new(ob.id, ob.pixels.iter().map(|p| Point::new(p[0], p[1])).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    ObstacleMap::new(obstacles, extent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_circle_boundary(pixels: usize) -> ObstacleBoundary {
        generate_shape(
            &ShapeSpec::Circle {
                center: [0.0, 0.0],
                radius: 1.0,
            },
            pixels,
            0,
        )
        .unwrap()
    }

    #[test]
    fn nearest_point_colinear_on_circle() {
        let boundary = unit_circle_boundary(100);
        // Pixel 50 is exactly (-1, 0) for a 100-pixel uniform circle.
        let (p, idx) = nearest_point_exact(&Point::new(-3.0, 0.0), &boundary);
        assert_eq!(idx, 50);
        assert_relative_eq!(p.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_point_tie_breaks_to_lowest_index() {
        // Pixels 4 and 7 equidistant from the query.
        let mut pixels = vec![Point::new(10.0, 10.0); 10];
        pixels[4] = Point::new(1.0, 0.0);
        pixels[7] = Point::new(-1.0, 0.0);
        let boundary = ObstacleBoundary::new(0, pixels).unwrap();
        let (_, idx) = nearest_point_exact(&Point::new(0.0, 0.0), &boundary);
        assert_eq!(idx, 4);
    }

    #[test]
    fn nearest_point_square_corner() {
        // Axis-aligned unit square sampled at 0.01 spacing; query at (2,2)
        // should resolve to the corner (1,1) within the pixel spacing.
        let square = ShapeSpec::Polygon {
            vertices: vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
        };
        let boundary = generate_shape(&square, 800, 0).unwrap();
        let (p, _) = nearest_point_exact(&Point::new(2.0, 2.0), &boundary);
        assert!((p - Point::new(1.0, 1.0)).norm() <= 0.011, "got {p:?}");
    }

    #[test]
    fn nearest_point_oracle_is_optimal() {
        // Independent re-scan: no pixel may be strictly closer than the
        // returned one.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let pixels: Vec<Point> = (0..40)
                .map(|_| Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect();
            let boundary = ObstacleBoundary::new(0, pixels).unwrap();
            let q = Point::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
            let (best, best_idx) = nearest_point_exact(&q, &boundary);
            let best_d = (q - best).norm();
            for (i, px) in boundary.pixels.iter().enumerate() {
                let d = (q - px).norm();
                assert!(d >= best_d || i == best_idx);
                if i < best_idx {
                    assert!(d > best_d, "earlier pixel at least as close");
                }
            }
        }
    }

    #[test]
    fn circle_nearest_analytic_cases() {
        let unit = CircleObstacle::new(Point::zeros(), 1.0).unwrap();
        let p = nearest_point_circle(&Point::new(-3.0, 0.0), &unit).unwrap();
        assert_relative_eq!(p.x, -1.0, epsilon = 1e-12);
        let p = nearest_point_circle(&Point::new(0.0, 2.0), &unit).unwrap();
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
        let c2 = CircleObstacle::new(Point::zeros(), 2.0).unwrap();
        let p = nearest_point_circle(&Point::new(3.0, 4.0), &c2).unwrap();
        assert_relative_eq!(p.x, 1.2, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.6, epsilon = 1e-12);
        assert!(nearest_point_circle(&Point::zeros(), &unit).is_err());
    }

    #[test]
    fn circle_dense_sampling_agrees_with_analytic() {
        let spacing = 2.0 * std::f64::consts::PI / 400.0;
        let boundary = unit_circle_boundary(400);
        let circle = CircleObstacle::new(Point::zeros(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = Point::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            if q.norm() <= 1.1 {
                continue;
            }
            let (px, _) = nearest_point_exact(&q, &boundary);
            let exact = nearest_point_circle(&q, &circle).unwrap();
            assert!((px - exact).norm() <= spacing);
        }
    }

    #[test]
    fn tangent_halfspace_fixture() {
        // nominal (-3,0), nearest (-1,0), radius 0: h(p) = -2 (p_x + 1).
        let hs = tangent_halfspace(&Point::new(-3.0, 0.0), &Point::new(-1.0, 0.0), 0.0).unwrap();
        assert_relative_eq!(hs.eval(&Point::new(-3.0, 0.0)), 4.0, epsilon = 1e-12);
        assert_relative_eq!(hs.eval(&Point::new(0.0, 0.0)), -2.0, epsilon = 1e-12);
        // Anchor evaluates to -r * gap.
        assert_relative_eq!(hs.eval(&hs.anchor), 0.0, epsilon = 1e-12);

        let hs_r = tangent_halfspace(&Point::new(-3.0, 0.0), &Point::new(-1.0, 0.0), 0.4).unwrap();
        assert_relative_eq!(hs_r.eval(&hs_r.anchor), -0.4 * 2.0, epsilon = 1e-12);
        // Shifting by the radius reduces h by r*gap everywhere.
        assert_relative_eq!(
            hs.eval(&Point::new(-3.0, 0.0)) - hs_r.eval(&Point::new(-3.0, 0.0)),
            0.8,
            epsilon = 1e-12
        );
        assert!(tangent_halfspace(&Point::new(1.0, 1.0), &Point::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn halfspace_separates_convex_boundary() {
        let boundary = unit_circle_boundary(200);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = Point::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            if q.norm() <= 1.05 {
                continue;
            }
            let (nearest, _) = nearest_point_exact(&q, &boundary);
            let hs = tangent_halfspace(&q, &nearest, 0.0).unwrap();
            // The nearest pixel sits up to half a spacing (in angle) from the
            // exact projection, tilting the tangent plane. On the unit circle
            // the worst leak onto the safe side is spacing^2/8 * r^2/(r-1)
            // for a nominal at radius r; the factor blows up as q approaches
            // the boundary. Use twice that bound for slack.
            let r = q.norm();
            let tol = 0.25 * boundary.pixel_spacing().powi(2) * r * r / (r - 1.0);
            for px in &boundary.pixels {
                assert!(
                    hs.eval(px) <= tol,
                    "boundary pixel {px:?} on safe side of halfspace at {nearest:?}"
                );
            }
        }
    }

    #[test]
    fn halfspace_positively_homogeneous_in_gap() {
        let nearest = Point::new(1.0, 0.5);
        let dir = Point::new(0.6, 0.8);
        let p = Point::new(3.0, -2.0);
        let h1 = tangent_halfspace(&(nearest + dir), &nearest, 0.0).unwrap().eval(&p);
        let h3 = tangent_halfspace(&(nearest + dir * 3.0), &nearest, 0.0)
            .unwrap()
            .eval(&p);
        assert_relative_eq!(h3, 3.0 * h1, epsilon = 1e-12);
    }

    #[test]
    fn generated_circle_has_unit_radius_pixels() {
        let boundary = unit_circle_boundary(100);
        for px in &boundary.pixels {
            assert!((px.norm() - 1.0).abs() < 1e-9);
        }
        assert!(signed_area(&boundary.pixels) > 0.0, "counterclockwise");
    }

    #[test]
    fn star_is_nonconvex() {
        let star = generate_shape(
            &ShapeSpec::Star {
                center: [0.0, 0.0],
                outer_radius: 1.0,
                inner_radius: 0.4,
                points: 5,
                rotation: 0.0,
            },
            100,
            0,
        )
        .unwrap();
        // Some pixel's neighbors' midpoint must lie farther out than the
        // pixel itself (a reflex region).
        let n = star.pixels.len();
        let mut found = false;
        for i in 0..n {
            let mid = (star.pixels[(i + n - 1) % n] + star.pixels[(i + 1) % n]) / 2.0;
            if mid.norm() > star.pixels[i].norm() + 1e-9 {
                found = true;
                break;
            }
        }
        assert!(found, "star should have concave sections");
    }

    #[test]
    fn polygon_pixels_lie_on_polygon() {
        let square = ShapeSpec::Polygon {
            vertices: vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
        };
        let boundary = generate_shape(&square, 80, 0).unwrap();
        for px in &boundary.pixels {
            let on_edge = (px.x.abs() - 1.0).abs() < 1e-12 && px.y.abs() <= 1.0 + 1e-12
                || (px.y.abs() - 1.0).abs() < 1e-12 && px.x.abs() <= 1.0 + 1e-12;
            assert!(on_edge, "pixel {px:?} off the square");
        }
    }

    #[test]
    fn rounded_bar_pixels_at_cap_distance() {
        let bar = generate_shape(
            &ShapeSpec::RoundedBar {
                center: [0.0, 0.0],
                length: 4.0,
                width: 1.0,
                rotation: 0.0,
            },
            200,
            0,
        )
        .unwrap();
        for px in &bar.pixels {
            // Distance from the core segment [-1.5, 1.5] x {0} must be w/2.
            let cx = px.x.clamp(-1.5, 1.5);
            let d = (px - Point::new(cx, 0.0)).norm();
            assert_relative_eq!(d, 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn map_round_trip_and_validation() {
        let dir = std::env::temp_dir().join("impc_geometry_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.json");
        let map = ObstacleMap::new(
            vec![unit_circle_boundary(50)],
            Extent::new(-5.0, 5.0, -5.0, 5.0).unwrap(),
        )
        .unwrap();
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(map, loaded);

        // Zero obstacles rejected.
        std::fs::write(
            &path,
            r#"{"extent":[-1.0,1.0,-1.0,1.0],"obstacles":[]}"#,
        )
        .unwrap();
        assert!(load_map(&path).is_err());

        // Out-of-extent pixel rejected.
        std::fs::write(
            &path,
            r#"{"extent":[-1.0,1.0,-1.0,1.0],"obstacles":[{"id":0,"pixels":[[0.0,0.0],[2.0,0.0],[0.0,0.5]]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_map(&path),
            Err(GeometryError::PixelOutsideExtent { .. })
        ));
    }

    #[test]
    fn containment_and_margin() {
        let boundary = unit_circle_boundary(200);
        assert!(boundary.contains(&Point::new(0.0, 0.0)));
        assert!(!boundary.contains(&Point::new(2.0, 0.0)));
        assert!(boundary.signed_margin(&Point::new(0.5, 0.0)) < 0.0);
        let m = boundary.signed_margin(&Point::new(3.0, 0.0));
        assert_relative_eq!(m, 2.0, epsilon = 1e-3);
    }
}

//! Exact 2-D primitives: half-planes, convex polygon clipping, areas,
//! bisector arrangements for top-k cells, and disk-union coverage.
//!
//! Everything in this module is a pure function of its inputs (plus an
//! explicitly passed random stream). Values are immutable once built and
//! safe to share across threads.

mod cell;
mod complex;
mod disk;

pub use cell::ConvexCell;
pub use complex::{
    boundary_vertices, complex_from_oriented_lines, topk_cell_faces, topk_cell_volumes,
    CellComplex,
};
pub use disk::{circle_union_covers, disk_polygon_intersection_area, Circle, Coverage, DiskCover};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Geometric tolerance in region units: vertex dedup, point-on-line and
/// containment tests. Double-precision shoelace/intersection error at
/// desk-scale coordinates stays orders of magnitude below this.
pub const GEOM_EPS: f64 = 1e-9;

/// Magnitude of the deterministic jitter applied to near-degenerate inputs
/// before arrangement construction.
pub const JITTER_MAGNITUDE: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("coordinate is not finite: ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("points coincide within tolerance")]
    CoincidentPoints,
    #[error("half-plane normal has zero magnitude")]
    ZeroNormal,
    #[error("cell is empty")]
    EmptyCell,
    #[error("cell is unbounded")]
    UnboundedCell,
    #[error("duplicate site locations within tolerance")]
    DuplicateLocation,
}

/// A point in the plane. Construction rejects NaN/Inf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        if x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(GeometryError::NonFinite(x, y))
        }
    }

    /// Infallible constructor for coordinates already known finite.
    pub(crate) fn raw(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite());
        Self { x, y }
    }

    pub fn dist(&self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_sq(&self, other: Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Closed half-plane `{p : normal · p <= offset}`. The normal need not be
/// unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub nx: f64,
    pub ny: f64,
    pub offset: f64,
}

impl HalfPlane {
    pub fn new(nx: f64, ny: f64, offset: f64) -> Result<Self, GeometryError> {
        if nx.hypot(ny) <= GEOM_EPS {
            return Err(GeometryError::ZeroNormal);
        }
        Ok(Self { nx, ny, offset })
    }

    /// Signed slack of `p`: positive inside, negative outside, scaled by the
    /// normal magnitude.
    pub fn slack(&self, p: Point2) -> f64 {
        self.offset - (self.nx * p.x + self.ny * p.y)
    }

    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        self.slack(p) >= -tol * self.nx.hypot(self.ny)
    }

    /// The complementary closed half-plane.
    pub fn flipped(&self) -> HalfPlane {
        HalfPlane {
            nx: -self.nx,
            ny: -self.ny,
            offset: -self.offset,
        }
    }
}

/// Half-plane containing `a` whose boundary is the perpendicular bisector of
/// segment (a, b).
pub fn perpendicular_bisector(a: Point2, b: Point2) -> Result<HalfPlane, GeometryError> {
    if a.dist(b) <= GEOM_EPS {
        return Err(GeometryError::CoincidentPoints);
    }
    let nx = b.x - a.x;
    let ny = b.y - a.y;
    // n·p <= (|b|^2 - |a|^2)/2  <=>  |p-a| <= |p-b|
    let offset = (b.x * b.x + b.y * b.y - a.x * a.x - a.y * a.y) / 2.0;
    Ok(HalfPlane { nx, ny, offset })
}

/// Area of the convex hull of a point set (monotone chain).
pub fn convex_hull_area(points: &[Point2]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup_by(|a, b| a.dist(*b) <= GEOM_EPS);
    if pts.len() < 3 {
        return 0.0;
    }
    let cross = |o: Point2, a: Point2, b: Point2| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    cell::shoelace(&hull)
}

/// Axis-aligned rectangle; the bounding region for all cell work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(x0, y0));
        }
        if x1 - x0 <= GEOM_EPS || y1 - y0 <= GEOM_EPS {
            return Err(GeometryError::EmptyCell);
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width() + self.height())
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x0 - GEOM_EPS
            && p.x <= self.x1 + GEOM_EPS
            && p.y >= self.y0 - GEOM_EPS
            && p.y <= self.y1 + GEOM_EPS
    }

    pub fn to_cell(&self) -> ConvexCell {
        ConvexCell::from_rect(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn point_rejects_non_finite() {
        assert!(Point2::new(f64::NAN, 0.0).is_err());
        assert!(Point2::new(0.0, f64::INFINITY).is_err());
        assert!(Point2::new(1.0, -2.0).is_ok());
    }

    #[test]
    fn bisector_axis_aligned() {
        // a=(0,0), b=(2,0): boundary x=1, keeps x <= 1.
        let h = perpendicular_bisector(Point2::raw(0.0, 0.0), Point2::raw(2.0, 0.0)).unwrap();
        assert!(h.contains(Point2::raw(0.5, 3.0), GEOM_EPS));
        assert!(!h.contains(Point2::raw(1.5, -3.0), GEOM_EPS));
        assert!(h.slack(Point2::raw(1.0, 7.0)).abs() < 1e-12);

        // a=(0,0), b=(0,4): boundary y=2, keeps y <= 2.
        let v = perpendicular_bisector(Point2::raw(0.0, 0.0), Point2::raw(0.0, 4.0)).unwrap();
        assert!(v.contains(Point2::raw(10.0, 1.9), GEOM_EPS));
        assert!(!v.contains(Point2::raw(-10.0, 2.1), GEOM_EPS));
    }

    #[test]
    fn bisector_diagonal_equidistance() {
        // Boundary points of the bisector of (1,1),(3,3) are equidistant to both.
        let a = Point2::raw(1.0, 1.0);
        let b = Point2::raw(3.0, 3.0);
        let h = perpendicular_bisector(a, b).unwrap();
        assert!(h.contains(a, GEOM_EPS));
        assert!(!h.contains(b, GEOM_EPS));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            // Parametrize the boundary line x + y = 4.
            let t: f64 = rng.gen_range(-10.0..10.0);
            let p = Point2::raw(2.0 + t, 2.0 - t);
            assert!(h.slack(p).abs() < 1e-9);
            assert!((p.dist(a) - p.dist(b)).abs() < 1e-9);
        }
    }

    #[test]
    fn bisector_rejects_coincident() {
        let a = Point2::raw(1.0, 1.0);
        assert_eq!(
            perpendicular_bisector(a, Point2::raw(1.0, 1.0 + 1e-12)),
            Err(GeometryError::CoincidentPoints)
        );
    }
}

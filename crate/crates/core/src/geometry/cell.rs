use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GeometryError, HalfPlane, Point2, Rect, GEOM_EPS};

/// Bounded convex polygon kept as a counterclockwise vertex ring together
/// with the effective half-planes that produced it.
///
/// The empty cell is a first-class value (empty ring) so clipping pipelines
/// compose without error handling at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexCell {
    halfplanes: Vec<HalfPlane>,
    vertices: Vec<Point2>,
}

impl ConvexCell {
    pub fn from_rect(r: Rect) -> Self {
        let halfplanes = vec![
            HalfPlane { nx: -1.0, ny: 0.0, offset: -r.x0 },
            HalfPlane { nx: 1.0, ny: 0.0, offset: r.x1 },
            HalfPlane { nx: 0.0, ny: -1.0, offset: -r.y0 },
            HalfPlane { nx: 0.0, ny: 1.0, offset: r.y1 },
        ];
        let vertices = vec![
            Point2::raw(r.x0, r.y0),
            Point2::raw(r.x1, r.y0),
            Point2::raw(r.x1, r.y1),
            Point2::raw(r.x0, r.y1),
        ];
        Self { halfplanes, vertices }
    }

    pub fn empty() -> Self {
        Self { halfplanes: Vec::new(), vertices: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Cells produced here are intersections with a bounding rectangle and
    /// therefore always bounded.
    pub fn is_bounded(&self) -> bool {
        true
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn halfplanes(&self) -> &[HalfPlane] {
        &self.halfplanes
    }

    /// Shoelace area. Zero for the empty cell.
    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn centroid(&self) -> Result<Point2, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::EmptyCell);
        }
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a2 = 0.0;
        let n = self.vertices.len();
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let cross = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * cross;
            cy += (p.y + q.y) * cross;
            a2 += cross;
        }
        if a2.abs() < GEOM_EPS * GEOM_EPS {
            // Degenerate sliver: fall back to the vertex mean.
            let n = self.vertices.len() as f64;
            let sx: f64 = self.vertices.iter().map(|p| p.x).sum();
            let sy: f64 = self.vertices.iter().map(|p| p.y).sum();
            return Ok(Point2::raw(sx / n, sy / n));
        }
        Ok(Point2::raw(cx / (3.0 * a2), cy / (3.0 * a2)))
    }

    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        !self.is_empty() && self.halfplanes.iter().all(|h| h.contains(p, tol))
    }

    /// Signed depth of `p` inside the cell: minimum Euclidean distance to any
    /// bounding half-plane boundary (negative outside).
    pub fn depth(&self, p: Point2) -> f64 {
        self.halfplanes
            .iter()
            .map(|h| h.slack(p) / h.nx.hypot(h.ny))
            .fold(f64::INFINITY, f64::min)
    }

    /// Intersection with a closed half-plane (Sutherland-Hodgman step).
    ///
    /// The result never gains area and stays convex; an empty intersection
    /// yields the explicit empty cell. The half-plane is recorded only when
    /// it actually cut the ring, keeping the representation minimal.
    pub fn clip(&self, h: HalfPlane) -> ConvexCell {
        if self.is_empty() {
            return ConvexCell::empty();
        }
        let scale = h.nx.hypot(h.ny);
        let tol = GEOM_EPS * scale;
        let n = self.vertices.len();
        let slacks: Vec<f64> = self.vertices.iter().map(|&v| h.slack(v)).collect();
        if slacks.iter().all(|&s| s >= -tol) {
            return self.clone(); // no-op
        }
        if slacks.iter().all(|&s| s <= tol) {
            return ConvexCell::empty();
        }
        let mut out: Vec<Point2> = Vec::with_capacity(n + 1);
        for i in 0..n {
            let j = (i + 1) % n;
            let (p, q) = (self.vertices[i], self.vertices[j]);
            let (sp, sq) = (slacks[i], slacks[j]);
            if sp >= -tol {
                out.push(p);
            }
            // Edge crosses the boundary strictly: interpolate.
            if (sp > tol && sq < -tol) || (sp < -tol && sq > tol) {
                let t = sp / (sp - sq);
                out.push(Point2::raw(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
            }
        }
        let out = dedup_ring(out);
        if out.len() < 3 || shoelace(&out) <= GEOM_EPS * GEOM_EPS {
            return ConvexCell::empty();
        }
        let mut halfplanes = self.halfplanes.clone();
        halfplanes.push(h);
        ConvexCell { halfplanes, vertices: out }
    }

    /// Uniform sample via area-weighted fan triangulation.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Point2, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::EmptyCell);
        }
        let v0 = self.vertices[0];
        let tris: Vec<(Point2, Point2, f64)> = self.vertices[1..]
            .windows(2)
            .map(|w| {
                let a = 0.5 * ((w[0].x - v0.x) * (w[1].y - v0.y) - (w[1].x - v0.x) * (w[0].y - v0.y)).abs();
                (w[0], w[1], a)
            })
            .collect();
        let total: f64 = tris.iter().map(|t| t.2).sum();
        if total <= 0.0 {
            return Err(GeometryError::EmptyCell);
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = tris.len() - 1;
        for (i, t) in tris.iter().enumerate() {
            if pick < t.2 {
                chosen = i;
                break;
            }
            pick -= t.2;
        }
        let (b, c, _) = tris[chosen];
        // sqrt trick: uniform over the triangle (v0, b, c).
        let r1 = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let x = (1.0 - r1) * v0.x + r1 * (1.0 - r2) * b.x + r1 * r2 * c.x;
        let y = (1.0 - r1) * v0.y + r1 * (1.0 - r2) * b.y + r1 * r2 * c.y;
        Ok(Point2::raw(x, y))
    }

    /// Largest distance from `p` to any vertex; zero for the empty cell.
    pub fn max_vertex_dist(&self, p: Point2) -> f64 {
        self.vertices
            .iter()
            .map(|v| v.dist(p))
            .fold(0.0, f64::max)
    }

    #[cfg(test)]
    pub(crate) fn from_parts(halfplanes: Vec<HalfPlane>, vertices: Vec<Point2>) -> Self {
        Self { halfplanes, vertices }
    }
}

pub(crate) fn shoelace(ring: &[Point2]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = ring[i];
        let q = ring[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    acc.abs() / 2.0
}

fn dedup_ring(ring: Vec<Point2>) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::with_capacity(ring.len());
    for v in ring {
        if out.last().map_or(true, |&l| l.dist(v) > GEOM_EPS) {
            out.push(v);
        }
    }
    while out.len() >= 2 && out[0].dist(*out.last().unwrap()) <= GEOM_EPS {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> ConvexCell {
        Rect::new(0.0, 0.0, 1.0, 1.0).unwrap().to_cell()
    }

    #[test]
    fn clip_halves_unit_square() {
        let c = unit_square().clip(HalfPlane { nx: 1.0, ny: 0.0, offset: 0.5 });
        assert!((c.area() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_noop_and_empty() {
        let sq = unit_square();
        let same = sq.clip(HalfPlane { nx: 1.0, ny: 0.0, offset: 2.0 });
        assert_eq!(same.vertices(), sq.vertices());
        let gone = sq.clip(HalfPlane { nx: 1.0, ny: 0.0, offset: -1.0 });
        assert!(gone.is_empty());
        assert_eq!(gone.area(), 0.0);
    }

    #[test]
    fn area_triangle() {
        let tri = unit_square()
            .clip(HalfPlane { nx: 1.0, ny: 1.0, offset: 1.0 });
        assert!((tri.area() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn area_random_octagon_matches_rejection_sampling() {
        // Monte-Carlo hit-rate oracle over the bounding square.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cell = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap().to_cell();
        for i in 0..4 {
            let ang = 0.7 + i as f64 * std::f64::consts::FRAC_PI_2;
            let (ny, nx) = ang.sin_cos();
            cell = cell.clip(HalfPlane { nx, ny, offset: nx * 0.5 + ny * 0.5 + 0.38 });
        }
        assert!(cell.vertices().len() >= 6);
        let area = cell.area();
        let n = 1_000_000u32;
        let mut hits = 0u32;
        for _ in 0..n {
            let p = Point2::raw(rng.gen::<f64>(), rng.gen::<f64>());
            if cell.contains(p, GEOM_EPS) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let sigma = (p_hat * (1.0 - p_hat) / n as f64).sqrt();
        assert!(
            (area - p_hat).abs() <= 3.0 * sigma,
            "area {area} vs mc {p_hat} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn sample_uniform_stays_inside_and_is_deterministic() {
        let sq = unit_square();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let p = sq.sample_uniform(&mut a).unwrap();
        let q = sq.sample_uniform(&mut b).unwrap();
        assert_eq!(p, q);
        assert!(sq.contains(p, 0.0));
    }

    #[test]
    fn sample_uniform_triangle_mean_is_centroid() {
        // Centroid-formula oracle: mean of uniform samples -> (1/3, 1/3).
        let tri = ConvexCell::from_parts(
            vec![],
            vec![Point2::raw(0.0, 0.0), Point2::raw(1.0, 0.0), Point2::raw(0.0, 1.0)],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = tri.sample_uniform(&mut rng).unwrap();
            sx += p.x;
            sy += p.y;
        }
        let mean = (sx / n as f64, sy / n as f64);
        // Var of x over this triangle is 1/18; 3 sigma of the mean.
        let tol = 3.0 * (1.0 / 18.0f64 / n as f64).sqrt();
        assert!((mean.0 - 1.0 / 3.0).abs() < tol, "{mean:?}");
        assert!((mean.1 - 1.0 / 3.0).abs() < tol, "{mean:?}");
    }

    #[test]
    fn sample_uniform_empty_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            ConvexCell::empty().sample_uniform(&mut rng),
            Err(GeometryError::EmptyCell)
        );
    }

    #[test]
    fn centroid_of_square() {
        let c = unit_square().centroid().unwrap();
        assert!((c.x - 0.5).abs() < 1e-12 && (c.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_idempotent() {
        let h = HalfPlane { nx: 3.0, ny: -1.0, offset: 0.7 };
        let once = unit_square().clip(h);
        let twice = once.clip(h);
        assert_eq!(once.vertices().len(), twice.vertices().len());
        for (a, b) in once.vertices().iter().zip(twice.vertices()) {
            assert!(a.dist(*b) <= GEOM_EPS);
        }
    }
}

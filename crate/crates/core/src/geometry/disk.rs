use serde::{Deserialize, Serialize};

use super::{ConvexCell, GeometryError, Point2, GEOM_EPS};

/// Angular glue for merging boundary arcs. Wide enough to absorb the acos
/// error amplification near arc endpoints, narrow enough that a falsely
/// bridged gap stays far below the geometric tolerance of the caller.
const ARC_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point2,
    pub radius: f64,
}

impl Circle {
    pub fn new(center: Point2, radius: f64) -> Result<Self, GeometryError> {
        if !radius.is_finite() || radius < 0.0 {
            return Err(GeometryError::NonFinite(radius, 0.0));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        p.dist(self.center) <= self.radius + tol
    }
}

/// Verdict of the conservative disk-union coverage test.
///
/// `Covered` is a certificate; `NotCovered` is a certificate of a witness
/// point; `Unknown` is allowed whenever certification fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Covered,
    NotCovered,
    Unknown,
}

/// A fixed set of covering disks with precomputed pairwise intersection
/// points, reusable against many target disks.
#[derive(Debug, Clone)]
pub struct DiskCover {
    disks: Vec<Circle>,
    /// Circle-circle intersection points with a flag: strictly interior to
    /// some third disk (the local wedge outside the two generating disks is
    /// then covered).
    pair_points: Vec<(Point2, bool)>,
}

impl DiskCover {
    pub fn new(disks: Vec<Circle>) -> Self {
        let mut pair_points = Vec::new();
        for i in 0..disks.len() {
            for j in (i + 1)..disks.len() {
                for p in circle_circle_points(disks[i], disks[j]) {
                    let certified = disks.iter().enumerate().any(|(l, d)| {
                        l != i && l != j && p.dist(d.center) <= d.radius - GEOM_EPS
                    });
                    pair_points.push((p, certified));
                }
            }
        }
        Self { disks, pair_points }
    }

    pub fn disks(&self) -> &[Circle] {
        &self.disks
    }

    /// Conservative test of `target ⊆ union of cover disks`.
    ///
    /// Certifies coverage from three facts: the target boundary circle is
    /// covered by the union (arc merging), the target center is covered, and
    /// every cover-circle intersection point strictly inside the target sits
    /// strictly inside a third disk. A hole in the union either reaches the
    /// target boundary (caught by the arc gap) or is bounded by arcs meeting
    /// at an intersection point no third disk covers (caught by the last
    /// check), so a `Covered` answer is sound up to tolerance.
    pub fn covers(&self, target: Circle) -> Coverage {
        // Zero-radius target degenerates to a point test.
        if target.radius <= GEOM_EPS {
            return self.point_coverage(target.center);
        }
        let mut unknown = false;

        // Single disk swallowing the whole target certifies immediately.
        for d in &self.disks {
            if target.center.dist(d.center) + target.radius <= d.radius + GEOM_EPS {
                return Coverage::Covered;
            }
        }

        match self.point_coverage(target.center) {
            Coverage::Covered => {}
            Coverage::NotCovered => return Coverage::NotCovered,
            Coverage::Unknown => unknown = true,
        }

        // Boundary arc coverage.
        let mut arcs: Vec<(f64, f64)> = Vec::new();
        for d in &self.disks {
            if let Some(arc) = boundary_arc_inside(target, *d) {
                arcs.push(arc);
            }
        }
        if let Some(gap_mid) = uncovered_boundary_angle(&mut arcs) {
            let p = Point2::raw(
                target.center.x + target.radius * gap_mid.cos(),
                target.center.y + target.radius * gap_mid.sin(),
            );
            return match self.point_coverage(p) {
                Coverage::NotCovered => Coverage::NotCovered,
                _ => Coverage::Unknown,
            };
        }

        // Interior wedge check at arrangement vertices.
        for &(p, certified) in &self.pair_points {
            if p.dist(target.center) < target.radius - GEOM_EPS && !certified {
                // The wedge at p locally outside both generating disks is a
                // candidate hole; probe it for a not-covered witness.
                if let Coverage::NotCovered = self.wedge_probe(p, target) {
                    return Coverage::NotCovered;
                }
                unknown = true;
            }
        }

        if unknown {
            Coverage::Unknown
        } else {
            Coverage::Covered
        }
    }

    fn point_coverage(&self, p: Point2) -> Coverage {
        let mut best = f64::INFINITY;
        for d in &self.disks {
            best = best.min(p.dist(d.center) - d.radius);
        }
        if best <= GEOM_EPS {
            Coverage::Covered
        } else if best > 10.0 * GEOM_EPS {
            Coverage::NotCovered
        } else {
            Coverage::Unknown
        }
    }

    fn wedge_probe(&self, p: Point2, target: Circle) -> Coverage {
        // Step outward from every disk containing p on its boundary.
        let mut wx = 0.0;
        let mut wy = 0.0;
        for d in &self.disks {
            if (p.dist(d.center) - d.radius).abs() <= 10.0 * GEOM_EPS && d.radius > GEOM_EPS {
                wx += (p.x - d.center.x) / d.radius;
                wy += (p.y - d.center.y) / d.radius;
            }
        }
        let norm = wx.hypot(wy);
        if norm <= GEOM_EPS {
            return Coverage::Unknown;
        }
        let step = 1e4 * GEOM_EPS;
        let probe = Point2::raw(p.x + step * wx / norm, p.y + step * wy / norm);
        if probe.dist(target.center) >= target.radius - GEOM_EPS {
            return Coverage::Unknown;
        }
        self.point_coverage(probe)
    }
}

/// Tri-state test of whether the closed target disk is contained in the
/// union of the cover disks. Never answers `Covered` falsely; may answer
/// `Unknown` when coverage holds but cannot be certified.
pub fn circle_union_covers(target: Circle, cover: &[Circle]) -> Coverage {
    DiskCover::new(cover.to_vec()).covers(target)
}

/// Angular interval of the target boundary circle lying inside one cover
/// disk, or None when they do not overlap on the boundary.
fn boundary_arc_inside(target: Circle, cover: Circle) -> Option<(f64, f64)> {
    let d = target.center.dist(cover.center);
    let (rt, rc) = (target.radius, cover.radius);
    if d >= rt + rc || d + rc <= rt {
        return None; // disjoint, or cover strictly inside target
    }
    if d + rt <= rc {
        // Whole target inside the cover disk; callers short-circuit this,
        // but report a full interval for completeness.
        return Some((0.0, std::f64::consts::TAU));
    }
    let cosphi = ((d * d + rt * rt - rc * rc) / (2.0 * d * rt)).clamp(-1.0, 1.0);
    let phi = cosphi.acos();
    let theta = (cover.center.y - target.center.y).atan2(cover.center.x - target.center.x);
    Some((theta - phi, 2.0 * phi))
}

/// Merge (start, extent) arcs; return the midpoint angle of an uncovered gap
/// if one exists.
fn uncovered_boundary_angle(arcs: &mut Vec<(f64, f64)>) -> Option<f64> {
    let tau = std::f64::consts::TAU;
    if arcs.iter().any(|&(_, e)| e >= tau - ARC_EPS) {
        return None;
    }
    if arcs.is_empty() {
        return Some(0.0);
    }
    let mut spans: Vec<(f64, f64)> = arcs
        .iter()
        .flat_map(|&(s, e)| {
            let s = s.rem_euclid(tau);
            [(s, s + e), (s + tau, s + tau + e)]
        })
        .collect();
    spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cov_end = spans[0].1;
    let mut cov_len = spans[0].1 - spans[0].0;
    for &(s, e) in &spans[1..] {
        if s <= cov_end + ARC_EPS {
            if e > cov_end {
                cov_len += e - cov_end;
                cov_end = e;
            }
        } else {
            // First gap after the initial covered run.
            if cov_len >= tau - ARC_EPS {
                return None;
            }
            return Some(((cov_end + s) / 2.0).rem_euclid(tau));
        }
        if cov_len >= tau - ARC_EPS {
            return None;
        }
    }
    if cov_len >= tau - ARC_EPS {
        None
    } else {
        Some(cov_end.rem_euclid(tau))
    }
}

/// Transversal intersection points of two circle boundaries.
fn circle_circle_points(a: Circle, b: Circle) -> Vec<Point2> {
    let d = a.center.dist(b.center);
    if d <= GEOM_EPS || d >= a.radius + b.radius - GEOM_EPS || d <= (a.radius - b.radius).abs() + GEOM_EPS {
        return Vec::new();
    }
    let l = (a.radius * a.radius - b.radius * b.radius + d * d) / (2.0 * d);
    let h2 = a.radius * a.radius - l * l;
    if h2 <= 0.0 {
        return Vec::new();
    }
    let h = h2.sqrt();
    let ux = (b.center.x - a.center.x) / d;
    let uy = (b.center.y - a.center.y) / d;
    let mx = a.center.x + l * ux;
    let my = a.center.y + l * uy;
    vec![
        Point2::raw(mx + h * -uy, my + h * ux),
        Point2::raw(mx - h * -uy, my - h * ux),
    ]
}

/// Exact area of `cell ∩ disk` via signed disk-triangle decomposition from
/// the disk center: inside spans contribute triangle area, outside spans
/// contribute circular sectors.
pub fn disk_polygon_intersection_area(cell: &ConvexCell, disk: Circle) -> f64 {
    if cell.is_empty() || disk.radius <= 0.0 {
        return 0.0;
    }
    let ring = cell.vertices();
    let n = ring.len();
    let c = disk.center;
    let r = disk.radius;
    let mut total = 0.0;
    for i in 0..n {
        let p = ring[i];
        let q = ring[(i + 1) % n];
        total += disk_segment_signed_area(c, r, p, q);
    }
    total.abs()
}

fn disk_segment_signed_area(c: Point2, r: f64, p: Point2, q: Point2) -> f64 {
    let px = p.x - c.x;
    let py = p.y - c.y;
    let dx = q.x - p.x;
    let dy = q.y - p.y;
    let a = dx * dx + dy * dy;
    if a == 0.0 {
        return 0.0;
    }
    let b = 2.0 * (px * dx + py * dy);
    let cc = px * px + py * py - r * r;
    let disc = b * b - 4.0 * a * cc;
    let mut cuts: Vec<f64> = Vec::with_capacity(2);
    if disc > 0.0 {
        let sq = disc.sqrt();
        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
            if t > 0.0 && t < 1.0 {
                cuts.push(t);
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    }
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0.0);
    bounds.extend(cuts);
    bounds.push(1.0);

    let at = |t: f64| (px + t * dx, py + t * dy);
    let mut acc = 0.0;
    for w in bounds.windows(2) {
        let (x0, y0) = at(w[0]);
        let (x1, y1) = at(w[1]);
        let (mx, my) = at((w[0] + w[1]) / 2.0);
        if mx * mx + my * my <= r * r {
            // Inside span: triangle (center, x0, x1).
            acc += 0.5 * (x0 * y1 - x1 * y0);
        } else {
            // Outside span: circular sector over the subtended angle.
            let ang = signed_angle(x0, y0, x1, y1);
            acc += 0.5 * r * r * ang;
        }
    }
    acc
}

fn signed_angle(x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    (x0 * y1 - x1 * y0).atan2(x0 * x1 + y0 * y1)
}

//! Rank-only pipeline: binary-search discovery of cell edges from nothing
//! but ranked ids, cell assembly with a controllable maximum edge error,
//! concavity repair for top-k cells, and tuple position inference.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::geometry::{
    complex_from_oriented_lines, CellComplex, ConvexCell, GeometryError, HalfPlane, Point2, Rect,
    GEOM_EPS,
};
use crate::oracle::{Mode, OracleError, Phase, Predicate, QueryAnswer, QueryLedger, SimulatedLbs};

#[derive(Debug, Error)]
pub enum LnrError {
    #[error("LNR pipeline requires a rank-only oracle")]
    WrongMode,
    #[error("per-sample query cap exceeded")]
    SampleCap,
    #[error("seed query does not rank the target within top-h")]
    BadSeed,
    #[error("edge error target is not attainable: {0}")]
    BadParams(String),
    #[error("cell has too few usable vertices for position inference")]
    InsufficientVertices,
    #[error("inference rays are near-parallel")]
    NearParallel,
    #[error("bias bound domain error: edge error exceeds a nearest-neighbor distance")]
    BiasDomain,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Binary-search tuning: transition segments are narrowed to length `delta`,
/// auxiliary rays are offset laterally by `delta_prime`, and `b` is the
/// bounding-box perimeter entering the cost and error bounds.
#[derive(Debug, Clone, Copy)]
pub struct BinarySearchParams {
    pub delta: f64,
    pub delta_prime: f64,
    pub b: f64,
}

impl BinarySearchParams {
    pub fn new(delta: f64, delta_prime: f64, region: Rect) -> Result<Self, LnrError> {
        if delta <= 0.0 || delta_prime <= 0.0 {
            return Err(LnrError::BadParams("delta and delta' must be positive".into()));
        }
        Ok(Self { delta, delta_prime, b: region.perimeter() })
    }

    /// Derive both knobs from a single edge-error target: the lateral offset
    /// takes half the budget and the segment length is set so the angular
    /// term stays below the same target.
    pub fn from_epsilon(eps: f64, region: Rect) -> Result<Self, LnrError> {
        let b = region.perimeter();
        if eps <= 0.0 || eps >= b {
            return Err(LnrError::BadParams(format!("epsilon {eps} outside (0, perimeter)")));
        }
        let delta_prime = eps / 2.0;
        let delta = (eps / b).asin().tan() * eps / 2.0;
        Ok(Self { delta, delta_prime, b })
    }

    /// The guaranteed maximum edge error for these parameters.
    pub fn max_edge_error(&self) -> f64 {
        (2.0 * self.delta_prime)
            .max(self.b * (self.delta / self.delta_prime).atan().sin())
    }
}

/// One discovered cell edge: the oriented line (owner side satisfies the
/// half-plane), the straddling witness segments, and the tuple across it.
#[derive(Debug, Clone)]
pub struct EstimatedEdge {
    pub line: HalfPlane,
    /// Dense index of the tuple across the edge; `None` for a bounding-box
    /// side.
    pub neighbor: Option<usize>,
    /// Transition segment (c3, c4): c3 satisfies the membership predicate,
    /// c4 does not, |c3-c4| <= delta.
    pub witness_inside: Point2,
    pub witness_outside: Point2,
    /// Auxiliary-ray transition segment (c5, c6) when one was found.
    pub aux: Option<(Point2, Point2)>,
    pub from_box: bool,
}

/// A cell reconstructed from ranked answers only.
#[derive(Debug, Clone)]
pub struct LnrCellResult {
    pub owner: usize,
    pub h: usize,
    /// The assembled region: faces where fewer than h discovered edges put
    /// the point on the far side. Possibly concave (several faces) for h>1.
    pub polygon: CellComplex,
    pub edges: Vec<EstimatedEdge>,
    /// Maximum edge error guaranteed by the search parameters.
    pub epsilon: f64,
    /// Discovered non-box edges.
    pub edge_count: usize,
    /// Tuples observed in any answer alongside the owner.
    pub co_returned: Vec<usize>,
    pub queries: QueryLedger,
    /// Binary-search invocations performed.
    pub searches: u64,
    pub budget_exhausted: bool,
}

impl LnrCellResult {
    pub fn volume(&self) -> f64 {
        self.polygon.total_area()
    }
}

/// Shared probing context: one query per distinct location, ever. Caching is
/// what keeps each binary search within its query bound, since endpoints
/// recur across searches.
pub struct ProbeCtx<'a> {
    lbs: &'a SimulatedLbs,
    filter: Option<&'a Predicate>,
    cache: HashMap<(i64, i64), QueryAnswer>,
    pub queries: QueryLedger,
    pub searches: u64,
    cap: Option<u64>,
}

fn key_of(p: Point2) -> (i64, i64) {
    ((p.x * 1e10).round() as i64, (p.y * 1e10).round() as i64)
}

impl<'a> ProbeCtx<'a> {
    pub fn new(lbs: &'a SimulatedLbs, filter: Option<&'a Predicate>, cap: Option<u64>) -> Self {
        Self {
            lbs,
            filter,
            cache: HashMap::new(),
            queries: QueryLedger::default(),
            searches: 0,
            cap,
        }
    }

    pub fn probe(&mut self, p: Point2) -> Result<&QueryAnswer, LnrError> {
        let key = key_of(p);
        if !self.cache.contains_key(&key) {
            if self.cap.is_some_and(|c| self.queries.issued >= c) {
                return Err(LnrError::SampleCap);
            }
            let ans = self.lbs.knn_query(p, self.filter, Phase::BinarySearch)?;
            self.queries.issued += 1;
            self.queries.binary_search += 1;
            self.cache.insert(key, ans);
        }
        Ok(&self.cache[&key])
    }

}

/// Rank-h membership: whether the answer places `owner` within the top h.
fn member(ans: &QueryAnswer, owner: usize, h: usize) -> bool {
    ans.rank_of(owner).is_some_and(|r| r <= h)
}

/// Id appearing in the top-h prefix at `outside` but not at `inside`: the
/// tuple that displaced the owner across the transition.
fn flip_tuple(inside: &QueryAnswer, outside: &QueryAnswer, h: usize) -> Option<usize> {
    let pre: HashSet<usize> = inside.entries.iter().take(h).map(|e| e.idx).collect();
    outside
        .entries
        .iter()
        .take(h)
        .map(|e| e.idx)
        .find(|idx| !pre.contains(idx))
}

/// Exit parameter of the ray `from + t*dir` through the region boundary,
/// with the index of the side it exits through.
fn ray_box_exit(region: Rect, from: Point2, dir: (f64, f64)) -> (f64, usize) {
    let mut best_t = f64::INFINITY;
    let mut side = 0;
    let cands = [
        (region.x0, 0, dir.0, from.x),
        (region.x1, 1, dir.0, from.x),
        (region.y0, 2, dir.1, from.y),
        (region.y1, 3, dir.1, from.y),
    ];
    for (bound, s, d, o) in cands {
        if d.abs() < 1e-300 {
            continue;
        }
        let t = (bound - o) / d;
        if t > GEOM_EPS && t < best_t {
            let px = from.x + t * dir.0;
            let py = from.y + t * dir.1;
            if px >= region.x0 - 1e-9
                && px <= region.x1 + 1e-9
                && py >= region.y0 - 1e-9
                && py <= region.y1 + 1e-9
            {
                best_t = t;
                side = s;
            }
        }
    }
    (best_t, side)
}

fn box_side_halfplane(region: Rect, side: usize) -> HalfPlane {
    match side {
        0 => HalfPlane { nx: -1.0, ny: 0.0, offset: -region.x0 },
        1 => HalfPlane { nx: 1.0, ny: 0.0, offset: region.x1 },
        2 => HalfPlane { nx: 0.0, ny: -1.0, offset: -region.y0 },
        _ => HalfPlane { nx: 0.0, ny: 1.0, offset: region.y1 },
    }
}

fn clamp_into(region: Rect, p: Point2) -> Point2 {
    Point2::raw(
        p.x.clamp(region.x0, region.x1),
        p.y.clamp(region.y0, region.y1),
    )
}

/// Bisect for the membership transition along `from + t*dir`, t in (0, t_hi]
/// where membership holds at t=0 and fails at t_hi. Returns (t_in, t_out)
/// with t_out - t_in small enough that the two points are at most `delta`
/// apart.
fn bisect_transition(
    ctx: &mut ProbeCtx<'_>,
    region: Rect,
    from: Point2,
    dir: (f64, f64),
    t_hi: f64,
    delta: f64,
    is_member: &dyn Fn(&QueryAnswer) -> bool,
) -> Result<(f64, f64), LnrError> {
    let mut lo = 0.0f64;
    let mut hi = t_hi;
    let at = |t: f64| clamp_into(region, Point2::raw(from.x + t * dir.0, from.y + t * dir.1));
    while hi - lo > delta {
        let mid = (lo + hi) / 2.0;
        let ans = ctx.probe(at(mid))?;
        if is_member(ans) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, hi))
}

/// The binary-search primitive: from an interior location `c1` (where the
/// membership predicate holds) toward `c2`, find the membership boundary
/// crossing the ray and estimate the straight edge through it.
///
/// The main ray yields a transition segment (c3, c4); two auxiliary rays at
/// +-arcsin(delta'/r) try for a second segment straddling the same
/// neighbor, and the edge is the line through the two segment midpoints.
/// When both auxiliary rays fail, the perpendicular bisector of (c3, c4) is
/// returned. If the ray leaves the region while membership still holds, the
/// crossed box side is the edge.
pub fn binary_search_edge(
    ctx: &mut ProbeCtx<'_>,
    region: Rect,
    owner: usize,
    h: usize,
    c1: Point2,
    c2: Point2,
    params: &BinarySearchParams,
) -> Result<EstimatedEdge, LnrError> {
    ctx.searches += 1;
    let len = c1.dist(c2);
    assert!(len > GEOM_EPS, "degenerate search ray");
    let dir = ((c2.x - c1.x) / len, (c2.y - c1.y) / len);
    let is_member = |ans: &QueryAnswer| member(ans, owner, h);

    let (t_exit, side) = ray_box_exit(region, c1, dir);
    let c_b = clamp_into(region, Point2::raw(c1.x + t_exit * dir.0, c1.y + t_exit * dir.1));
    if is_member(ctx.probe(c_b)?) {
        // Still inside at the region boundary: the cell edge here is the box
        // side itself.
        return Ok(EstimatedEdge {
            line: box_side_halfplane(region, side),
            neighbor: None,
            witness_inside: c_b,
            witness_outside: c_b,
            aux: None,
            from_box: true,
        });
    }

    let (t_in, t_out) = bisect_transition(ctx, region, c1, dir, t_exit, params.delta, &is_member)?;
    let at = |t: f64, d: (f64, f64)| {
        clamp_into(region, Point2::raw(c1.x + t * d.0, c1.y + t * d.1))
    };
    let c3 = at(t_in, dir);
    let c4 = at(t_out, dir);
    let inside_ans = ctx.probe(c3)?.clone();
    let outside_ans = ctx.probe(c4)?.clone();
    let neighbor = flip_tuple(&inside_ans, &outside_ans, h);

    let fallback = || -> EstimatedEdge {
        let mid = Point2::raw((c3.x + c4.x) / 2.0, (c3.y + c4.y) / 2.0);
        let nx = c4.x - c3.x;
        let ny = c4.y - c3.y;
        EstimatedEdge {
            line: HalfPlane { nx, ny, offset: nx * mid.x + ny * mid.y },
            neighbor,
            witness_inside: c3,
            witness_outside: c4,
            aux: None,
            from_box: false,
        }
    };

    let r = c1.dist(c4);
    if params.delta_prime >= r || neighbor.is_none() {
        return Ok(fallback());
    }
    let tilt = (params.delta_prime / r).asin();
    let base = dir.1.atan2(dir.0);
    for sign in [1.0f64, -1.0] {
        let a = base + sign * tilt;
        let d2 = (a.cos(), a.sin());
        let (t_exit2, _) = ray_box_exit(region, c1, d2);
        let cb2 = at(t_exit2, d2);
        if is_member(ctx.probe(cb2)?) {
            continue; // no transition on this ray
        }
        let (s_in, s_out) =
            bisect_transition(ctx, region, c1, d2, t_exit2, params.delta, &is_member)?;
        let c5 = at(s_in, d2);
        let c6 = at(s_out, d2);
        // The auxiliary segment must straddle the same neighbor.
        let in2 = ctx.probe(c5)?.clone();
        let out2 = ctx.probe(c6)?.clone();
        if flip_tuple(&in2, &out2, h) != neighbor {
            continue;
        }
        let m1 = Point2::raw((c3.x + c4.x) / 2.0, (c3.y + c4.y) / 2.0);
        let m2 = Point2::raw((c5.x + c6.x) / 2.0, (c5.y + c6.y) / 2.0);
        if m1.dist(m2) <= GEOM_EPS {
            continue;
        }
        // Line through the midpoints, oriented so c1's side satisfies it.
        let ex = m2.x - m1.x;
        let ey = m2.y - m1.y;
        let (mut nx, mut ny) = (-ey, ex);
        let mut offset = nx * m1.x + ny * m1.y;
        if nx * c1.x + ny * c1.y > offset {
            nx = -nx;
            ny = -ny;
            offset = -offset;
        }
        return Ok(EstimatedEdge {
            line: HalfPlane { nx, ny, offset },
            neighbor,
            witness_inside: c3,
            witness_outside: c4,
            aux: Some((c5, c6)),
            from_box: false,
        });
    }
    Ok(fallback())
}

/// Assemble the owner's region from discovered non-box edges: points where
/// fewer than h edges are violated, clipped to the region.
fn assemble(region_cell: &ConvexCell, edges: &[EstimatedEdge], h: usize) -> CellComplex {
    let lines: Vec<HalfPlane> = edges
        .iter()
        .filter(|e| !e.from_box)
        .map(|e| e.line)
        .collect();
    complex_from_oriented_lines(region_cell, &lines, h)
}

/// Reconstruct the top-h cell of the tuple ranked at `seed` using ranked
/// answers only.
///
/// Four axis-aligned seed searches bound the seed location; afterwards every
/// boundary vertex of the assembly is probed, and each vertex where the
/// owner drops out of the top h triggers one more edge search toward it.
/// Every search adds one new edge, so the search count stays within
/// m + O(1). For h > 1 the same loop also drives the concavity repair
/// through [`repair_concavity`].
pub fn compute_cell_lnr_h(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    seed: Point2,
    owner: usize,
    h: usize,
    params: &BinarySearchParams,
    cap: Option<u64>,
) -> Result<LnrCellResult, LnrError> {
    if lbs.config().mode != Mode::Lnr {
        return Err(LnrError::WrongMode);
    }
    assert!(h >= 1 && h <= lbs.config().k);
    let region = lbs.region();
    let region_cell = region.to_cell();
    let mut ctx = ProbeCtx::new(lbs, filter, cap);
    let budget_exhausted = |e: &LnrError| matches!(e, LnrError::Oracle(OracleError::BudgetExhausted));

    let seed_ans = ctx.probe(seed)?.clone();
    if !member(&seed_ans, owner, h) {
        return Err(LnrError::BadSeed);
    }
    // Everything observed in any answer alongside the owner.
    let mut co_returned: HashSet<usize> = HashSet::new();
    let note_answer = |ans: &QueryAnswer, co: &mut HashSet<usize>| {
        if ans.contains(owner) {
            for e in &ans.entries {
                if e.idx != owner {
                    co.insert(e.idx);
                }
            }
        }
    };
    note_answer(&seed_ans, &mut co_returned);

    let mut edges: Vec<EstimatedEdge> = Vec::new();
    let mut known_neighbors: HashSet<usize> = HashSet::new();
    let mut known_box_sides: HashSet<u64> = HashSet::new();
    let add_edge = |edge: EstimatedEdge,
                        edges: &mut Vec<EstimatedEdge>,
                        known_neighbors: &mut HashSet<usize>,
                        known_box_sides: &mut HashSet<u64>|
     -> bool {
        if edge.from_box {
            let key = (edge.line.nx.to_bits() ^ edge.line.ny.to_bits()) ^ edge.line.offset.to_bits();
            known_box_sides.insert(key)
        } else {
            match edge.neighbor {
                Some(nb) => {
                    if known_neighbors.insert(nb) {
                        edges.push(edge);
                        true
                    } else {
                        false
                    }
                }
                None => {
                    edges.push(edge);
                    true
                }
            }
        }
    };

    // Seed searches along the four axis directions.
    let offs = region.width().min(region.height()) * 0.01;
    for dir in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
        let c2 = Point2::raw(seed.x + offs * dir.0, seed.y + offs * dir.1);
        match binary_search_edge(&mut ctx, region, owner, h, seed, c2, params) {
            Ok(edge) => {
                note_answer(&ctx.cache[&key_of(edge.witness_inside)], &mut co_returned);
                add_edge(edge, &mut edges, &mut known_neighbors, &mut known_box_sides);
            }
            Err(e) if budget_exhausted(&e) => {
                return Ok(finish(owner, h, &region_cell, edges, &co_returned, params, &ctx, true));
            }
            Err(e) => return Err(e),
        }
    }

    // Vertex-test loop.
    let mut tested: HashSet<(i64, i64)> = HashSet::new();
    loop {
        let polygon = assemble(&region_cell, &edges, h);
        let verts: Vec<Point2> = polygon
            .boundary_vertices()
            .into_iter()
            .filter(|v| !tested.contains(&key_of(*v)))
            .collect();
        if verts.is_empty() {
            break;
        }
        let mut progressed = false;
        for v in verts {
            tested.insert(key_of(v));
            let ans = match ctx.probe(v) {
                Ok(a) => a.clone(),
                Err(e) if budget_exhausted(&e) => {
                    return Ok(finish(owner, h, &region_cell, edges, &co_returned, params, &ctx, true));
                }
                Err(e) => return Err(e),
            };
            note_answer(&ans, &mut co_returned);
            if member(&ans, owner, h) {
                continue;
            }
            if v.dist(seed) <= GEOM_EPS {
                continue;
            }
            match binary_search_edge(&mut ctx, region, owner, h, seed, v, params) {
                Ok(edge) => {
                    if add_edge(edge, &mut edges, &mut known_neighbors, &mut known_box_sides) {
                        progressed = true;
                        break;
                    }
                    // Re-discovered a known edge: the vertex sits within the
                    // edge-error band; it stays tested and the loop moves on.
                }
                Err(e) if budget_exhausted(&e) => {
                    return Ok(finish(owner, h, &region_cell, edges, &co_returned, params, &ctx, true));
                }
                Err(e) => return Err(e),
            }
        }
        if !progressed {
            // All remaining vertices are tested; recompute once more to pick
            // up dedup effects and stop when stable.
            let polygon = assemble(&region_cell, &edges, h);
            let any_untested = polygon
                .boundary_vertices()
                .into_iter()
                .any(|v| !tested.contains(&key_of(v)));
            if !any_untested {
                break;
            }
        }
    }

    if h > 1 {
        repair_concavity_inner(
            &mut ctx,
            region,
            &region_cell,
            owner,
            h,
            &mut edges,
            &mut known_neighbors,
            &mut co_returned,
            params,
            &mut tested,
        )?;
    }

    Ok(finish(owner, h, &region_cell, edges, &co_returned, params, &ctx, false))
}

fn finish(
    owner: usize,
    h: usize,
    region_cell: &ConvexCell,
    edges: Vec<EstimatedEdge>,
    co_returned: &HashSet<usize>,
    params: &BinarySearchParams,
    ctx: &ProbeCtx<'_>,
    budget_exhausted: bool,
) -> LnrCellResult {
    let polygon = assemble(region_cell, &edges, h);
    let edge_count = edges.iter().filter(|e| !e.from_box).count();
    let mut co: Vec<usize> = co_returned.iter().copied().collect();
    co.sort_unstable();
    LnrCellResult {
        owner,
        h,
        polygon,
        edges,
        epsilon: params.max_edge_error(),
        edge_count,
        co_returned: co,
        queries: ctx.queries,
        searches: ctx.searches,
        budget_exhausted,
    }
}

/// The k=1 cell computation of the rank-only pipeline.
pub fn compute_cell_lnr(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    seed: Point2,
    params: &BinarySearchParams,
    cap: Option<u64>,
) -> Result<LnrCellResult, LnrError> {
    if lbs.config().mode != Mode::Lnr {
        return Err(LnrError::WrongMode);
    }
    let mut ctx = ProbeCtx::new(lbs, filter, cap);
    let ans = ctx.probe(seed)?.clone();
    let owner = ans
        .entries
        .first()
        .map(|e| e.idx)
        .ok_or(LnrError::BadSeed)?;
    let spent = ctx.queries;
    let mut result = compute_cell_lnr_h(lbs, filter, seed, owner, 1, params, cap)?;
    result.queries.add(&spent);
    Ok(result)
}

/// Concavity repair for top-k cells (k > 1): a sub-region settled on too
/// early is detected through tuples co-returned with the owner whose
/// bisector is still missing. For each such tuple, a polygon boundary edge
/// whose endpoints disagree on returning it is searched for the crossing,
/// and crossings involving the owner enter the assembly. The assembled
/// region never falls below the input region and the loop ends when no
/// co-returned tuple is left unresolved.
#[allow(clippy::too_many_arguments)]
fn repair_concavity_inner(
    ctx: &mut ProbeCtx<'_>,
    region: Rect,
    region_cell: &ConvexCell,
    owner: usize,
    h: usize,
    edges: &mut Vec<EstimatedEdge>,
    known_neighbors: &mut HashSet<usize>,
    co_returned: &mut HashSet<usize>,
    params: &BinarySearchParams,
    tested: &mut HashSet<(i64, i64)>,
) -> Result<(), LnrError> {
    let mut exhausted: HashSet<usize> = HashSet::new();
    'repair: loop {
        let polygon = assemble(region_cell, edges, h);

        // Keep the vertex tests of the main loop honest after every change.
        let mut failing: Option<Point2> = None;
        for v in polygon.boundary_vertices() {
            if tested.contains(&key_of(v)) {
                continue;
            }
            tested.insert(key_of(v));
            let ans = ctx.probe(v)?.clone();
            if ans.contains(owner) {
                for e in &ans.entries {
                    if e.idx != owner {
                        co_returned.insert(e.idx);
                    }
                }
            }
            if !member(&ans, owner, h) {
                failing = Some(v);
                break;
            }
        }
        if let Some(v) = failing {
            // A vertex outside the true cell: search toward it; the flip
            // always involves the owner, yielding a new owner bisector.
            let seed = interior_point(&polygon).unwrap_or(v);
            if seed.dist(v) > GEOM_EPS && member(ctx.probe(seed)?, owner, h) {
                let edge = binary_search_edge(ctx, region, owner, h, seed, v, params)?;
                if let Some(nb) = edge.neighbor {
                    if known_neighbors.insert(nb) {
                        edges.push(edge);
                        continue 'repair;
                    }
                } else if !edge.from_box {
                    edges.push(edge);
                    continue 'repair;
                }
            }
        }

        // Unresolved co-returned tuples: their owner bisector might form a
        // missed inward vertex.
        let unresolved: Vec<usize> = co_returned
            .iter()
            .copied()
            .filter(|t| !known_neighbors.contains(t) && !exhausted.contains(t))
            .collect();
        if unresolved.is_empty() {
            return Ok(());
        }
        for t_prime in unresolved {
            let Some((va, vb)) = disagreeing_edge(ctx, &polygon, t_prime)? else {
                exhausted.insert(t_prime);
                continue;
            };
            // Search along the boundary edge for the crossing where t'
            // enters/leaves the answer.
            let has_tp = |ans: &QueryAnswer| ans.contains(t_prime);
            let (from, to) = if has_tp(ctx.probe(va)?) { (va, vb) } else { (vb, va) };
            let len = from.dist(to);
            if len <= GEOM_EPS {
                exhausted.insert(t_prime);
                continue;
            }
            ctx.searches += 1;
            let dir = ((to.x - from.x) / len, (to.y - from.y) / len);
            let (t_in, t_out) = bisect_transition(
                ctx,
                region,
                from,
                dir,
                len,
                params.delta,
                &|ans| ans.contains(t_prime),
            )?;
            let c3 = clamp_into(region, Point2::raw(from.x + t_in * dir.0, from.y + t_in * dir.1));
            let c4 = clamp_into(region, Point2::raw(from.x + t_out * dir.0, from.y + t_out * dir.1));
            let in_ans = ctx.probe(c3)?.clone();
            let out_ans = ctx.probe(c4)?.clone();
            // The pair swapping across the crossing: t' leaves, someone enters.
            let entrant = flip_tuple(&in_ans, &out_ans, lbs_k(ctx));
            if entrant == Some(owner) || in_ans.contains(owner) != out_ans.contains(owner) {
                // The crossing is the bisector of (owner, t'). Estimate its
                // line through a full search from an interior point of the
                // owner region toward the crossing.
                let seed = interior_point(&polygon).ok_or(LnrError::InsufficientVertices)?;
                let target = Point2::raw((c3.x + c4.x) / 2.0, (c3.y + c4.y) / 2.0);
                if seed.dist(target) > GEOM_EPS && member(ctx.probe(seed)?, owner, h) {
                    let edge = binary_search_edge(ctx, region, owner, h, seed, target, params)?;
                    if let Some(nb) = edge.neighbor {
                        if known_neighbors.insert(nb) {
                            edges.push(edge);
                            continue 'repair;
                        }
                    }
                }
                exhausted.insert(t_prime);
            } else {
                // The crossing concerns t' and a third tuple; it cannot bound
                // the owner's cell. Mark resolved.
                exhausted.insert(t_prime);
            }
        }
    }
}

fn lbs_k(ctx: &ProbeCtx<'_>) -> usize {
    ctx.lbs.config().k
}

/// Some point strictly inside the first face of the assembly.
fn interior_point(polygon: &CellComplex) -> Option<Point2> {
    polygon.faces().first().and_then(|f| f.centroid().ok())
}

/// A polygon boundary edge whose endpoint answers disagree on returning the
/// tuple (both endpoints must already be probed or probeable).
fn disagreeing_edge(
    ctx: &mut ProbeCtx<'_>,
    polygon: &CellComplex,
    t_prime: usize,
) -> Result<Option<(Point2, Point2)>, LnrError> {
    for face in polygon.faces() {
        let ring = face.vertices().to_vec();
        let n = ring.len();
        for i in 0..n {
            let a = ring[i];
            let b = ring[(i + 1) % n];
            let has_a = ctx.probe(a)?.contains(t_prime);
            let has_b = ctx.probe(b)?.contains(t_prime);
            if has_a != has_b {
                return Ok(Some((a, b)));
            }
        }
    }
    Ok(None)
}

/// Public wrapper of the concavity repair for an already-computed cell.
pub fn repair_concavity(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    mut cell: LnrCellResult,
    params: &BinarySearchParams,
    cap: Option<u64>,
) -> Result<LnrCellResult, LnrError> {
    if lbs.config().mode != Mode::Lnr {
        return Err(LnrError::WrongMode);
    }
    let region = lbs.region();
    let region_cell = region.to_cell();
    let mut ctx = ProbeCtx::new(lbs, filter, cap);
    let mut known: HashSet<usize> = cell.edges.iter().filter_map(|e| e.neighbor).collect();
    let mut co: HashSet<usize> = cell.co_returned.iter().copied().collect();
    co.extend(known.iter().copied());
    let mut tested: HashSet<(i64, i64)> = HashSet::new();
    let mut edges = std::mem::take(&mut cell.edges);
    repair_concavity_inner(
        &mut ctx,
        region,
        &region_cell,
        cell.owner,
        cell.h,
        &mut edges,
        &mut known,
        &mut co,
        params,
        &mut tested,
    )?;
    let mut out = finish(cell.owner, cell.h, &region_cell, edges, &co, params, &ctx, false);
    out.queries.add(&cell.queries);
    out.searches += cell.searches;
    Ok(out)
}

/// Infer the owner's location from two cell vertices.
///
/// At a vertex where edges to neighbors t2 and t3 meet, the middle edge (the
/// t2/t3 bisector) is found with one more binary search; the three edge
/// directions determine the ray from the vertex to the owner. Two vertices
/// give two rays whose intersection is the owner's location. Exactly two
/// extra binary searches are spent.
pub fn infer_position(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    cell: &LnrCellResult,
    params: &BinarySearchParams,
    cap: Option<u64>,
) -> Result<(Point2, QueryLedger, u64), LnrError> {
    if lbs.config().mode != Mode::Lnr {
        return Err(LnrError::WrongMode);
    }
    let region = lbs.region();
    let mut ctx = ProbeCtx::new(lbs, filter, cap);

    // Usable vertices: meeting points of two non-box edges.
    let face = cell
        .polygon
        .faces()
        .first()
        .ok_or(LnrError::InsufficientVertices)?;
    let centroid = face.centroid()?;
    let ring = face.vertices();
    let n = ring.len();
    let mut candidates: Vec<(Point2, EstimatedEdge, EstimatedEdge)> = Vec::new();
    for i in 0..n {
        let v = ring[i];
        let mut incident: Vec<&EstimatedEdge> = Vec::new();
        let mut seen_nb: HashSet<usize> = HashSet::new();
        for e in cell.edges.iter().filter(|e| !e.from_box && on_line(&e.line, v)) {
            if e.neighbor.is_some_and(|nb| seen_nb.insert(nb)) {
                incident.push(e);
            }
        }
        if incident.len() >= 2 {
            candidates.push((v, incident[0].clone(), incident[1].clone()));
        }
    }
    if candidates.len() < 2 {
        return Err(LnrError::InsufficientVertices);
    }
    // Conditioning heuristic: prefer the vertex pair whose rays toward the
    // interior are closest to perpendicular.
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let di = dir_to(candidates[i].0, centroid);
            let dj = dir_to(candidates[j].0, centroid);
            let s = (di.0 * dj.1 - di.1 * dj.0).abs();
            if best.map_or(true, |(_, _, bs)| s > bs) {
                best = Some((i, j, s));
            }
        }
    }
    let (bi, bj, _) = best.unwrap();

    let mut rays = Vec::new();
    for idx in [bi, bj] {
        let (v, e1, e3) = &candidates[idx];
        let ray = vertex_ray(&mut ctx, region, *v, e1, e3, params, face)?;
        rays.push((*v, ray));
    }
    let (v1, u1) = rays[0];
    let (v2, u2) = rays[1];
    let cross = u1.0 * u2.1 - u1.1 * u2.0;
    if cross.abs() < 1e-4 {
        return Err(LnrError::NearParallel);
    }
    // Solve v1 + s*u1 = v2 + t*u2.
    let dx = v2.x - v1.x;
    let dy = v2.y - v1.y;
    let s = (dx * u2.1 - dy * u2.0) / cross;
    let p = Point2::raw(v1.x + s * u1.0, v1.y + s * u1.1);
    Ok((p, ctx.queries, ctx.searches))
}

fn dir_to(from: Point2, to: Point2) -> (f64, f64) {
    let d = from.dist(to).max(GEOM_EPS);
    ((to.x - from.x) / d, (to.y - from.y) / d)
}

fn on_line(line: &HalfPlane, p: Point2) -> bool {
    line.slack(p).abs() <= 1e-6 * line.nx.hypot(line.ny)
}

/// Direction of the ray from vertex `v` toward the owner, derived from the
/// two incident cell edges and the middle edge found by one binary search.
///
/// The middle-edge search runs across a short chord just beyond the vertex,
/// between a point whose top answer is t2 and one whose top answer is t3;
/// placing the chord there guarantees the crossing it finds is the t2/t3
/// bisector and not another cell boundary. Locating those two points costs
/// a few plain probes, never an extra search.
fn vertex_ray(
    ctx: &mut ProbeCtx<'_>,
    region: Rect,
    v: Point2,
    e1: &EstimatedEdge,
    e3: &EstimatedEdge,
    params: &BinarySearchParams,
    face: &ConvexCell,
) -> Result<(f64, f64), LnrError> {
    let t2 = e1.neighbor.ok_or(LnrError::InsufficientVertices)?;
    let t3 = e3.neighbor.ok_or(LnrError::InsufficientVertices)?;

    // Beyond the vertex, the extension of the (owner|t2) edge line runs
    // inside V(t3) and the extension of the (owner|t3) edge line inside
    // V(t2): the three boundaries meet at the vertex and swap sides. Chord
    // endpoints on those extensions straddle the middle edge right next to
    // the vertex.
    let ring = face.vertices();
    let n = ring.len();
    let i = (0..n)
        .find(|&i| ring[i].dist(v) <= 1e-7)
        .ok_or(LnrError::InsufficientVertices)?;
    let into_face: [(f64, f64); 2] = {
        let nxt = ring[(i + 1) % n];
        let prv = ring[(i + n - 1) % n];
        [dir_to(v, nxt), dir_to(v, prv)]
    };
    let along = |line: &HalfPlane| -> Result<(f64, f64), LnrError> {
        let m = line.nx.hypot(line.ny);
        let pick = into_face
            .iter()
            .min_by(|a, b| {
                let da = (line.nx * a.0 + line.ny * a.1).abs() / m;
                let db = (line.nx * b.0 + line.ny * b.1).abs() / m;
                da.partial_cmp(&db).unwrap()
            })
            .copied()
            .ok_or(LnrError::InsufficientVertices)?;
        Ok((-pick.0, -pick.1))
    };
    let out1 = along(&e1.line)?;
    let out3 = along(&e3.line)?;

    // Find the chord (q2 in V(t2), q3 in V(t3)) by stepping outward.
    let mut found: Option<(Point2, Point2)> = None;
    let mut step = 8.0 * params.max_edge_error().max(params.delta_prime);
    for _ in 0..8 {
        let a = clamp_into(region, Point2::raw(v.x + step * out3.0, v.y + step * out3.1));
        let b = clamp_into(region, Point2::raw(v.x + step * out1.0, v.y + step * out1.1));
        let ta = ctx.probe(a)?.entries.first().map(|e| e.idx);
        let tb = ctx.probe(b)?.entries.first().map(|e| e.idx);
        if ta == Some(t2) && tb == Some(t3) {
            found = Some((a, b));
            break;
        }
        if ta == Some(t3) && tb == Some(t2) {
            found = Some((b, a));
            break;
        }
        step *= 2.0;
    }
    let (q2, q3) = found.ok_or(LnrError::InsufficientVertices)?;

    let edge2 = binary_search_edge(ctx, region, t2, 1, q2, q3, params)?;
    if edge2.from_box || (edge2.neighbor.is_some() && edge2.neighbor != Some(t3)) {
        return Err(LnrError::InsufficientVertices);
    }

    let a1 = line_angle(&e1.line);
    let a2 = line_angle(&edge2.line);
    let a3 = line_angle(&e3.line);
    // Line direction of the owner ray (mod pi).
    let theta = a1 - a2 + a3;
    let u = (theta.cos(), theta.sin());
    // Disambiguate the branch: the owner lies inside the face wedge at v.
    if branch_in_wedge(face, v, u) {
        Ok(u)
    } else {
        Ok((-u.0, -u.1))
    }
}

/// Whether direction `u` from ring vertex `v` points into the face interior
/// wedge.
fn branch_in_wedge(face: &ConvexCell, v: Point2, u: (f64, f64)) -> bool {
    let ring = face.vertices();
    let n = ring.len();
    let Some(i) = (0..n).find(|&i| ring[i].dist(v) <= 1e-7) else {
        // Not a ring vertex: fall back to a centroid heuristic.
        if let Ok(c) = face.centroid() {
            return u.0 * (c.x - v.x) + u.1 * (c.y - v.y) > 0.0;
        }
        return true;
    };
    let nxt = ring[(i + 1) % n];
    let prv = ring[(i + n - 1) % n];
    let a0 = (nxt.y - v.y).atan2(nxt.x - v.x);
    let a1 = (prv.y - v.y).atan2(prv.x - v.x);
    let tau = std::f64::consts::TAU;
    let extent = (a1 - a0).rem_euclid(tau);
    let au = u.1.atan2(u.0);
    (au - a0).rem_euclid(tau) <= extent
}

fn line_angle(h: &HalfPlane) -> f64 {
    // Direction along the boundary line.
    (h.nx).atan2(-h.ny)
}

/// Magnitude of the worst-case COUNT bias given ground-truth
/// nearest-neighbor distances: sum of |eps^2 - 2 d eps| / (d - eps)^2.
pub fn bias_bound(nearest_dists: &[f64], eps: f64) -> Result<f64, LnrError> {
    if eps < 0.0 {
        return Err(LnrError::BadParams("epsilon must be nonnegative".into()));
    }
    let mut total = 0.0;
    for &d in nearest_dists {
        if eps >= d {
            return Err(LnrError::BiasDomain);
        }
        total += (eps * eps - 2.0 * d * eps).abs() / ((d - eps) * (d - eps));
    }
    Ok(total)
}

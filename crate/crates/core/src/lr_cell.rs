//! Location-returned pipeline: exact (top-h) Voronoi cell reconstruction
//! driven by oracle queries, with vertex-test termination, fast
//! initialization, history reuse, adaptive h selection, and a Monte Carlo
//! upper/lower-bound shortcut that preserves unbiasedness.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimator::Measure;
use crate::geometry::{
    convex_hull_area, topk_cell_faces, CellComplex, Circle, ConvexCell, Coverage, DiskCover,
    GeometryError, HalfPlane, Point2, Rect, GEOM_EPS,
};
use crate::oracle::{
    Mode, OracleError, Phase, PointGrid, Predicate, QueryAnswer, QueryLedger, SimulatedLbs,
};

#[derive(Debug, Error)]
pub enum LrError {
    #[error("LR pipeline requires a location-returned oracle")]
    WrongMode,
    #[error("per-sample query cap exceeded")]
    SampleCap,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Knobs of the LR pipeline. Every optimization is individually switchable;
/// none of them changes a final exact cell.
#[derive(Debug, Clone)]
pub struct LrOptions {
    pub fast_init: bool,
    pub use_history: bool,
    pub mc_shortcut: bool,
    /// Switch to the Monte Carlo shortcut after this many vertex queries in
    /// one cell computation (when the shortcut is enabled).
    pub vertex_query_cap: usize,
    /// Switch to the shortcut when area(upper) <= (1+gamma) * area(hull of
    /// confirmed points).
    pub mc_gamma: f64,
    /// Fallback half-width of the fake-tuple box, as a fraction of the
    /// region width, when history holds no neighbor of the target.
    pub fast_init_halfwidth_frac: f64,
}

impl Default for LrOptions {
    fn default() -> Self {
        Self {
            fast_init: true,
            use_history: true,
            mc_shortcut: true,
            vertex_query_cap: 64,
            mc_gamma: 0.1,
            fast_init_halfwidth_frac: 0.05,
        }
    }
}

impl LrOptions {
    pub fn baseline() -> Self {
        Self {
            fast_init: false,
            use_history: false,
            mc_shortcut: false,
            ..Self::default()
        }
    }
}

/// Threshold policy governing adaptive selection of the cell definition
/// (top-h) per returned tuple.
#[derive(Debug, Clone, Copy)]
pub struct VarianceReductionPolicy {
    pub lambda0: f64,
    pub enabled: bool,
}

impl VarianceReductionPolicy {
    pub fn disabled() -> Self {
        Self { lambda0: 0.0, enabled: false }
    }
}

/// Every tuple (and confirmed query point) observed during a run. Static
/// data makes recorded answers permanently valid, so the store only grows;
/// shared across cell computations under one lock.
pub struct History {
    region: Rect,
    inner: Mutex<HistoryInner>,
}

struct HistoryInner {
    ids: Vec<usize>,
    locs: Vec<Point2>,
    by_idx: HashMap<usize, usize>,
    grid: PointGrid,
    grid_capacity: usize,
    confirmed: HashMap<usize, Vec<Point2>>,
}

impl History {
    pub fn new(region: Rect) -> Self {
        Self {
            region,
            inner: Mutex::new(HistoryInner {
                ids: Vec::new(),
                locs: Vec::new(),
                by_idx: HashMap::new(),
                grid: PointGrid::with_resolution(region, 4, 4),
                grid_capacity: 32,
                confirmed: HashMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn region(&self) -> Rect {
        self.region
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.inner.lock().unwrap().by_idx.contains_key(&idx)
    }

    /// Insert an observation; returns true when the tuple was new.
    pub fn record(&self, idx: usize, loc: Point2) -> bool {
        let mut inner = self.inner.lock().unwrap();
        if inner.by_idx.contains_key(&idx) {
            return false;
        }
        let slot = inner.ids.len();
        inner.ids.push(idx);
        inner.locs.push(loc);
        inner.by_idx.insert(idx, slot);
        if inner.ids.len() > inner.grid_capacity {
            // Rebuild at 4x capacity so bucket occupancy stays O(1) amortized.
            inner.grid_capacity *= 4;
            let side = ((inner.grid_capacity as f64).sqrt().ceil() as usize).max(4);
            let mut grid = PointGrid::with_resolution(self.region, side, side);
            for (i, p) in inner.locs.iter().enumerate() {
                grid.insert(i as u32, *p);
            }
            inner.grid = grid;
        } else {
            let p = inner.locs[slot];
            inner.grid.insert(slot as u32, p);
        }
        true
    }

    /// Witness points are deduplicated and capped: the disk-cover
    /// certification cost grows cubically in the witness count, and a
    /// subset of valid witnesses is still a valid (just weaker) certifier.
    pub fn record_confirmed(&self, idx: usize, v: Point2) {
        const CONFIRMED_CAP: usize = 32;
        let mut inner = self.inner.lock().unwrap();
        let list = inner.confirmed.entry(idx).or_default();
        if list.len() >= CONFIRMED_CAP || list.iter().any(|p| p.dist(v) <= 1e-7) {
            return;
        }
        list.push(v);
    }

    pub fn confirmed_of(&self, idx: usize) -> Vec<Point2> {
        self.inner
            .lock()
            .unwrap()
            .confirmed
            .get(&idx)
            .cloned()
            .unwrap_or_default()
    }

    /// Distance from `loc` to the nearest recorded tuple other than `idx`.
    pub fn nearest_other_dist(&self, idx: usize, loc: Point2) -> Option<f64> {
        let inner = self.inner.lock().unwrap();
        let hits = inner
            .grid
            .knn(loc, 1, &inner.locs, |slot| inner.ids[slot as usize] != idx);
        hits.first().map(|(_, d)| *d)
    }

    /// Offline initial bound (`history-init`): the top-h cell of `owner`
    /// with respect to recorded tuples, clipped to the region. Costs zero
    /// queries and always contains the true top-h cell.
    ///
    /// Competitors are pulled from the spatial grid by radius doubling until
    /// every unexamined tuple is provably unable to cut the current faces.
    pub fn topk_complex(
        &self,
        owner: usize,
        owner_loc: Point2,
        h: usize,
        region_cell: &ConvexCell,
    ) -> Result<CellComplex, GeometryError> {
        let diag = (self.region.width().powi(2) + self.region.height().powi(2)).sqrt();
        let mut radius = diag / 16.0;
        loop {
            let others: Vec<Point2> = {
                let inner = self.inner.lock().unwrap();
                inner
                    .grid
                    .within_radius(owner_loc, radius, &inner.locs)
                    .into_iter()
                    .filter(|&s| inner.ids[s as usize] != owner)
                    .map(|s| inner.locs[s as usize])
                    .collect()
            };
            let complex = topk_cell_faces(owner_loc, &others, h, region_cell)?;
            let reach = complex.max_vertex_dist(owner_loc);
            if 2.0 * reach <= radius || radius >= 2.0 * diag {
                return Ok(complex);
            }
            radius *= 2.0;
        }
    }
}

/// Upper bound on the volume of the top-h cell of a tuple, computed from
/// history alone (zero queries). Monotone: growing history never increases
/// it; with full knowledge it equals the true volume.
pub fn lambda_upper(
    history: &History,
    idx: usize,
    loc: Point2,
    h: usize,
) -> Result<f64, GeometryError> {
    let region_cell = history.region.to_cell();
    Ok(history.topk_complex(idx, loc, h, &region_cell)?.total_area())
}

/// The largest h in [2, k] whose history upper bound stays below the policy
/// threshold, else 1.
pub fn choose_h(
    history: &History,
    idx: usize,
    loc: Point2,
    k: usize,
    policy: &VarianceReductionPolicy,
) -> Result<usize, GeometryError> {
    if !policy.enabled || k == 1 {
        return Ok(1);
    }
    if policy.lambda0 >= history.region.area() {
        // No top-h cell can exceed the region area.
        return Ok(k);
    }
    if policy.lambda0 <= 0.0 {
        // The owner's cell always has positive area.
        return Ok(1);
    }
    let region_cell = history.region.to_cell();
    let complex = history.topk_complex(idx, loc, k, &region_cell)?;
    for h in (2..=k).rev() {
        if complex.area_below(h) <= policy.lambda0 {
            return Ok(h);
        }
    }
    Ok(1)
}

/// A tuple's (top-h) cell as reconstructed through the oracle.
#[derive(Debug, Clone)]
pub struct CellEstimate {
    pub owner: usize,
    pub owner_loc: Point2,
    pub h: usize,
    /// Superset of the true top-h cell (equal when `exact`).
    pub upper: CellComplex,
    /// Query locations whose answers contained the owner; their circles
    /// through the owner certify the lower-bound region.
    pub confirmed: Vec<Point2>,
    pub exact: bool,
    /// Area of `upper`; the exact cell volume when `exact` is set.
    pub volume: f64,
    /// Geometric trial count of the Monte Carlo shortcut, when it ran.
    pub mc_trials: Option<u64>,
    /// Oracle queries spent by this computation.
    pub queries: QueryLedger,
    /// Set when the oracle budget died mid-computation; `upper` is then just
    /// a snapshot and no estimate may be derived from it.
    pub budget_exhausted: bool,
    pub perturbed: bool,
}

impl CellEstimate {
    /// Whether an unbiased per-tuple estimate can be formed from this cell.
    pub fn usable(&self) -> bool {
        !self.budget_exhausted && (self.exact || self.mc_trials.is_some())
    }
}

/// Whether a candidate point is certifiably inside the true cell: its
/// tuple-centered circle must be covered by the union of confirmed-witness
/// circles. `true` implies the point lies in the true (top-h) cell.
pub fn lower_bound_region(owner_loc: Point2, confirmed: &[Point2], q: Point2) -> bool {
    if confirmed.is_empty() {
        return false;
    }
    let r = q.dist(owner_loc);
    if r <= GEOM_EPS {
        // Zero-radius target: every witness circle passes through the owner.
        return true;
    }
    let cover: Vec<Circle> = confirmed
        .iter()
        .map(|&v| Circle { center: v, radius: v.dist(owner_loc) })
        .collect();
    DiskCover::new(cover).covers(Circle { center: q, radius: r }) == Coverage::Covered
}

/// Outcome of the fake-tuple initialization step.
#[derive(Debug)]
pub struct FastInitOutcome {
    /// Tuples discovered by the corner queries.
    pub discovered: Vec<(usize, Point2)>,
    /// True when every corner answer contained only already-known tuples and
    /// the box was dropped, wasting exactly `queries`.
    pub fallback: bool,
    pub queries: u64,
    /// Query points whose answers contained the owner.
    pub confirmed: Vec<Point2>,
}

/// Fast initialization: bound the owner with a fake-tuple box and query the
/// box corners. Either real neighbors emerge (every query useful) or the box
/// was too small and at most four queries are wasted. Never changes the
/// final exact cell.
pub fn fast_init(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    owner: usize,
    owner_loc: Point2,
    halfwidth: f64,
    known: &dyn Fn(usize) -> bool,
) -> Result<FastInitOutcome, LrError> {
    let region_cell = lbs.region().to_cell();
    let boxed = clip_box(&region_cell, owner_loc, halfwidth);
    let mut out = FastInitOutcome {
        discovered: Vec::new(),
        fallback: false,
        queries: 0,
        confirmed: Vec::new(),
    };
    let mut seen_here: HashSet<usize> = HashSet::new();
    for &v in boxed.vertices() {
        let ans = lbs.knn_query(v, filter, Phase::Init)?;
        out.queries += 1;
        if ans.contains(owner) {
            out.confirmed.push(v);
        }
        for e in &ans.entries {
            if e.idx != owner && !known(e.idx) && seen_here.insert(e.idx) {
                out.discovered
                    .push((e.idx, e.loc.expect("LR oracle returns locations")));
            }
        }
    }
    out.fallback = out.discovered.is_empty();
    Ok(out)
}

fn clip_box(region: &ConvexCell, center: Point2, halfwidth: f64) -> ConvexCell {
    let mut c = region.clone();
    for hp in [
        HalfPlane { nx: 1.0, ny: 0.0, offset: center.x + halfwidth },
        HalfPlane { nx: -1.0, ny: 0.0, offset: -(center.x - halfwidth) },
        HalfPlane { nx: 0.0, ny: 1.0, offset: center.y + halfwidth },
        HalfPlane { nx: 0.0, ny: -1.0, offset: -(center.y - halfwidth) },
    ] {
        c = c.clip(hp);
    }
    if c.is_empty() {
        region.clone()
    } else {
        c
    }
}

fn key_of(p: Point2) -> (i64, i64) {
    ((p.x * 1e10).round() as i64, (p.y * 1e10).round() as i64)
}

/// Bounded, deduplicated witness list (see History::record_confirmed).
fn push_confirmed(list: &mut Vec<Point2>, p: Point2) {
    const CONFIRMED_CAP: usize = 48;
    if list.len() >= CONFIRMED_CAP || list.iter().any(|q| q.dist(p) <= 1e-7) {
        return;
    }
    list.push(p);
}

/// Context of one cell computation.
struct CellRun<'a> {
    lbs: &'a SimulatedLbs,
    filter: Option<&'a Predicate>,
    history: &'a History,
    opts: &'a LrOptions,
    /// Local competitor set used when history reuse is disabled.
    locals: Vec<(usize, Point2)>,
    local_ids: HashSet<usize>,
    owner: usize,
    owner_loc: Point2,
    h: usize,
    region_cell: ConvexCell,
    tested: HashSet<(i64, i64)>,
    confirmed: Vec<Point2>,
    queries: QueryLedger,
    cap: Option<u64>,
}

impl<'a> CellRun<'a> {
    fn knows(&self, idx: usize) -> bool {
        idx == self.owner
            || if self.opts.use_history {
                self.history.contains(idx)
            } else {
                self.local_ids.contains(&idx)
            }
    }

    fn query(&mut self, q: Point2, phase: Phase) -> Result<QueryAnswer, LrError> {
        if let Some(cap) = self.cap {
            if self.queries.issued >= cap {
                return Err(LrError::SampleCap);
            }
        }
        let ans = self.lbs.knn_query(q, self.filter, phase)?;
        self.queries.issued += 1;
        match phase {
            Phase::Init => self.queries.init += 1,
            Phase::VertexTest => self.queries.vertex_test += 1,
            Phase::BinarySearch => self.queries.binary_search += 1,
            Phase::McTrial => self.queries.mc_trial += 1,
        }
        Ok(ans)
    }

    /// Record one answer; returns whether any unseen tuple appeared.
    fn digest(&mut self, at: Point2, ans: &QueryAnswer) -> bool {
        let mut new_any = false;
        for e in &ans.entries {
            if e.idx == self.owner {
                continue;
            }
            let loc = e.loc.expect("LR oracle returns locations");
            if !self.knows(e.idx) {
                new_any = true;
            }
            self.history.record(e.idx, loc);
            if self.local_ids.insert(e.idx) {
                self.locals.push((e.idx, loc));
            }
        }
        if ans.contains(self.owner) {
            push_confirmed(&mut self.confirmed, at);
            self.history.record_confirmed(self.owner, at);
        }
        new_any
    }

    fn rebuild(&self) -> Result<CellComplex, LrError> {
        if self.opts.use_history {
            Ok(self
                .history
                .topk_complex(self.owner, self.owner_loc, self.h, &self.region_cell)?)
        } else {
            let others: Vec<Point2> = self.locals.iter().map(|(_, p)| *p).collect();
            Ok(topk_cell_faces(self.owner_loc, &others, self.h, &self.region_cell)?)
        }
    }

    fn finish(
        &self,
        upper: CellComplex,
        exact: bool,
        mc_trials: Option<u64>,
        budget_exhausted: bool,
    ) -> CellEstimate {
        let volume = upper.total_area();
        let perturbed = upper.perturbed;
        CellEstimate {
            owner: self.owner,
            owner_loc: self.owner_loc,
            h: self.h,
            upper,
            confirmed: self.confirmed.clone(),
            exact,
            volume,
            mc_trials,
            queries: self.queries,
            budget_exhausted,
            perturbed,
        }
    }
}

/// Reconstruct the top-h cell of a tuple whose location is known.
///
/// Termination of the vertex loop is certified by every boundary vertex of
/// the working complex answering with already-seen tuples only; the complex
/// then equals the true top-h cell. With the Monte Carlo shortcut the loop
/// may stop early and estimate the volume ratio by trials instead, keeping
/// the downstream estimator unbiased. A configured max radius forces the
/// shortcut path, whose hit test is radius-truncation-proof (the exact
/// vertex test is not).
#[allow(clippy::too_many_arguments)]
pub fn compute_cell(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    owner: usize,
    owner_loc: Point2,
    h: usize,
    history: &History,
    opts: &LrOptions,
    seed_witness: Option<Point2>,
    initial_known: &[(usize, Point2)],
    measure: &Measure,
    rng: &mut ChaCha8Rng,
    cap: Option<u64>,
) -> Result<CellEstimate, LrError> {
    if lbs.config().mode != Mode::Lr {
        return Err(LrError::WrongMode);
    }
    assert!(h >= 1 && h <= lbs.config().k, "h must lie in [1, k]");
    let mut run = CellRun {
        lbs,
        filter,
        history,
        opts,
        locals: Vec::new(),
        local_ids: HashSet::new(),
        owner,
        owner_loc,
        h,
        region_cell: lbs.region().to_cell(),
        tested: HashSet::new(),
        confirmed: history.confirmed_of(owner),
        queries: QueryLedger::default(),
        cap,
    };
    history.record(owner, owner_loc);
    for &(idx, loc) in initial_known {
        if idx != owner {
            history.record(idx, loc);
            if run.local_ids.insert(idx) {
                run.locals.push((idx, loc));
            }
        }
    }
    if let Some(w) = seed_witness {
        push_confirmed(&mut run.confirmed, w);
        history.record_confirmed(owner, w);
    }
    let force_mc = lbs.config().max_radius.is_some();

    let mut upper = run.rebuild()?;

    if opts.fast_init {
        let halfwidth = match history.nearest_other_dist(owner, owner_loc) {
            Some(d) if d.is_finite() => 2.0 * d,
            _ => opts.fast_init_halfwidth_frac * lbs.region().width(),
        };
        let boxed = clip_box(&run.region_cell, owner_loc, halfwidth);
        let mut found_new = false;
        for &v in boxed.vertices() {
            run.tested.insert(key_of(v));
            let ans = match run.query(v, Phase::Init) {
                Ok(a) => a,
                Err(LrError::Oracle(OracleError::BudgetExhausted)) => {
                    return Ok(run.finish(upper, false, None, true));
                }
                Err(e) => return Err(e),
            };
            found_new |= run.digest(v, &ans);
        }
        if found_new {
            upper = run.rebuild()?;
        }
    }

    // Vertex-test loop, far vertices first: they are the likeliest to reveal
    // unseen tuples.
    let exact_complex = 'outer: loop {
        let mut verts = upper.boundary_vertices();
        verts.sort_by(|a, b| {
            b.dist(owner_loc)
                .partial_cmp(&a.dist(owner_loc))
                .unwrap()
                .then_with(|| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap())
        });
        let pending: Vec<Point2> = verts
            .into_iter()
            .filter(|v| !run.tested.contains(&key_of(*v)))
            .collect();
        if pending.is_empty() {
            break 'outer Some(upper);
        }
        let mc_allowed = opts.mc_shortcut || force_mc;
        // Radius-truncated interfaces never certify exactness, so the
        // upper-bound refinement budget is kept small there.
        let vq_cap = if force_mc {
            opts.vertex_query_cap.min(16) as u64
        } else {
            opts.vertex_query_cap as u64
        };
        if mc_allowed
            && (run.queries.vertex_test >= vq_cap
                || close_enough(&upper, owner_loc, &run.confirmed, opts.mc_gamma))
        {
            break 'outer None;
        }
        for v in pending {
            if mc_allowed && run.queries.vertex_test >= vq_cap {
                continue 'outer;
            }
            run.tested.insert(key_of(v));
            let ans = match run.query(v, Phase::VertexTest) {
                Ok(a) => a,
                Err(LrError::Oracle(OracleError::BudgetExhausted)) => {
                    return Ok(run.finish(upper, false, None, true));
                }
                Err(e) => return Err(e),
            };
            if run.digest(v, &ans) {
                upper = run.rebuild()?;
                continue 'outer;
            }
        }
        break 'outer Some(upper);
    };

    match exact_complex {
        Some(complex) if !force_mc => Ok(run.finish(complex, true, None, false)),
        Some(complex) => {
            // The complex converged, but radius truncation means the usable
            // cell is its intersection with the d_max disk; the trial loop
            // measures exactly that without trusting truncated vertex tests.
            run_mc(&mut run, complex, measure, rng)
        }
        None => {
            let complex = run.rebuild()?;
            run_mc(&mut run, complex, measure, rng)
        }
    }
}

/// Shortcut trigger: the upper bound is close to the certified interior
/// hull. For top-1 cells the hull of confirmed points is a true lower
/// bound; for h > 1 it is only a heuristic trigger, which is safe because
/// the trigger never affects correctness.
fn close_enough(upper: &CellComplex, owner_loc: Point2, confirmed: &[Point2], gamma: f64) -> bool {
    if confirmed.len() < 3 {
        return false;
    }
    let mut pts = confirmed.to_vec();
    pts.push(owner_loc);
    let hull = convex_hull_area(&pts);
    hull > 0.0 && upper.total_area() <= (1.0 + gamma) * hull
}

fn run_mc(
    run: &mut CellRun<'_>,
    upper: CellComplex,
    measure: &Measure,
    rng: &mut ChaCha8Rng,
) -> Result<CellEstimate, LrError> {
    match mc_trials(
        run.lbs,
        run.filter,
        run.owner,
        run.owner_loc,
        run.h,
        &upper,
        &run.confirmed,
        measure,
        rng,
        run.cap.map(|c| c.saturating_sub(run.queries.issued)),
    ) {
        Ok((r, spent, digests)) => {
            run.queries.add(&spent);
            for (idx, loc) in digests {
                run.history.record(idx, loc);
            }
            Ok(run.finish(upper, false, Some(r), false))
        }
        Err(McOutcome::Budget(spent)) => {
            run.queries.add(&spent);
            Ok(run.finish(upper, false, None, true))
        }
        Err(McOutcome::Fail(e)) => Err(e),
    }
}

enum McOutcome {
    Budget(QueryLedger),
    Fail(LrError),
}

/// Monte Carlo volume-ratio trials: draw points from the sampling measure
/// restricted to `upper` (and the d_max disk when configured), count a
/// certified lower-bound point as a hit for free, otherwise spend one query;
/// the geometric trial count r at the first hit satisfies
/// E[r] = mass(upper) / mass(true cell).
#[allow(clippy::too_many_arguments)]
fn mc_trials(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    owner: usize,
    owner_loc: Point2,
    h: usize,
    upper: &CellComplex,
    confirmed: &[Point2],
    measure: &Measure,
    rng: &mut ChaCha8Rng,
    cap: Option<u64>,
) -> Result<(u64, QueryLedger, Vec<(usize, Point2)>), McOutcome> {
    let disk = lbs
        .config()
        .max_radius
        .map(|d| Circle { center: owner_loc, radius: d });
    let cover = DiskCover::new(
        confirmed
            .iter()
            .map(|&v| Circle { center: v, radius: v.dist(owner_loc) })
            .collect(),
    );
    let mut spent = QueryLedger::default();
    let mut observed: Vec<(usize, Point2)> = Vec::new();
    let mut trials = 0u64;
    loop {
        let Some(p) = measure.sample_in_faces(upper.faces(), disk, rng) else {
            return Err(McOutcome::Budget(spent));
        };
        trials += 1;
        let certified = if confirmed.is_empty() {
            false
        } else if p.dist(owner_loc) <= GEOM_EPS {
            true
        } else {
            cover.covers(Circle { center: p, radius: p.dist(owner_loc) }) == Coverage::Covered
        };
        if certified {
            break;
        }
        if cap.is_some_and(|c| spent.issued >= c) {
            return Err(McOutcome::Fail(LrError::SampleCap));
        }
        let ans = match lbs.knn_query(p, filter, Phase::McTrial) {
            Ok(a) => a,
            Err(OracleError::BudgetExhausted) => return Err(McOutcome::Budget(spent)),
            Err(e) => return Err(McOutcome::Fail(e.into())),
        };
        spent.issued += 1;
        spent.mc_trial += 1;
        for e in &ans.entries {
            if e.idx != owner {
                observed.push((e.idx, e.loc.expect("LR oracle returns locations")));
            }
        }
        if ans.rank_of(owner).is_some_and(|r| r <= h) {
            break;
        }
    }
    Ok((trials, spent, observed))
}

/// Public form of the shortcut for an already-computed upper bound; returns
/// the trial count and the queries actually issued.
pub fn mc_volume_ratio(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    est: &CellEstimate,
    measure: &Measure,
    rng: &mut ChaCha8Rng,
) -> Result<(u64, QueryLedger), LrError> {
    match mc_trials(
        lbs,
        filter,
        est.owner,
        est.owner_loc,
        est.h,
        &est.upper,
        &est.confirmed,
        measure,
        rng,
        None,
    ) {
        Ok((r, spent, _)) => Ok((r, spent)),
        Err(McOutcome::Budget(_)) => Err(LrError::Oracle(OracleError::BudgetExhausted)),
        Err(McOutcome::Fail(e)) => Err(e),
    }
}

/// Exact cell computation: the shortcut disabled, everything else as
/// configured. Loses exactness only to budget exhaustion.
pub fn compute_cell_exact(
    lbs: &SimulatedLbs,
    filter: Option<&Predicate>,
    owner: usize,
    owner_loc: Point2,
    h: usize,
    history: &History,
    opts: &LrOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CellEstimate, LrError> {
    let opts = LrOptions { mc_shortcut: false, ..opts.clone() };
    let measure = Measure::uniform();
    compute_cell(
        lbs, filter, owner, owner_loc, h, history, &opts, None, &[], &measure, rng, None,
    )
}

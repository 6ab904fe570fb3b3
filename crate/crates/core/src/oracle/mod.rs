//! The restricted kNN query interface: a simulated location-based service
//! over an in-memory dataset with LR/LNR semantics, top-k limit, optional
//! max radius, pass-through attribute filters and query accounting — plus a
//! privileged ground-truth back door for verification.

mod dataset;
pub mod gen;
mod grid;

pub use dataset::{AttrMap, AttrValue, DataError, Dataset, SpatialTuple};
pub use grid::PointGrid;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    topk_cell_faces, CellComplex, GeometryError, Point2, GEOM_EPS,
};

/// Whether answers expose tuple locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Location-returned: each answer entry carries the tuple's coordinates.
    Lr,
    /// Location-not-returned: answers carry ranked ids and attributes only.
    Lnr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleConfig {
    pub k: usize,
    pub mode: Mode,
    /// Tuples farther than this from the query location are never returned.
    pub max_radius: Option<f64>,
    /// Hard limit on the number of queries the oracle will answer.
    pub budget: Option<u64>,
}

impl OracleConfig {
    pub fn new(k: usize, mode: Mode) -> Self {
        assert!(k >= 1, "top-k interface requires k >= 1");
        Self { k, mode, max_radius: None, budget: None }
    }

    pub fn with_max_radius(mut self, d_max: f64) -> Self {
        assert!(d_max > 0.0);
        self.max_radius = Some(d_max);
        self
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }
}

/// Which stage of an estimation pipeline issued a query; the ledger keeps
/// per-phase counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    VertexTest,
    BinarySearch,
    McTrial,
}

/// Snapshot of query accounting. `issued` always equals the sum of the
/// per-phase counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    pub issued: u64,
    pub init: u64,
    pub vertex_test: u64,
    pub binary_search: u64,
    pub mc_trial: u64,
}

impl QueryLedger {
    pub fn delta_since(&self, earlier: &QueryLedger) -> QueryLedger {
        QueryLedger {
            issued: self.issued - earlier.issued,
            init: self.init - earlier.init,
            vertex_test: self.vertex_test - earlier.vertex_test,
            binary_search: self.binary_search - earlier.binary_search,
            mc_trial: self.mc_trial - earlier.mc_trial,
        }
    }

    pub fn add(&mut self, other: &QueryLedger) {
        self.issued += other.issued;
        self.init += other.init;
        self.vertex_test += other.vertex_test;
        self.binary_search += other.binary_search;
        self.mc_trial += other.mc_trial;
    }
}

#[derive(Default)]
struct LedgerCells {
    issued: AtomicU64,
    init: AtomicU64,
    vertex_test: AtomicU64,
    binary_search: AtomicU64,
    mc_trial: AtomicU64,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query budget exhausted")]
    BudgetExhausted,
    #[error("query location ({0}, {1}) is outside the bounding region")]
    OutOfRegion(f64, f64),
    #[error("unknown tuple `{0}`")]
    UnknownTuple(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One ranked entry of a query answer. `loc` is populated only by LR
/// interfaces; LNR answers leave it structurally absent.
#[derive(Debug, Clone)]
pub struct ReturnedTuple {
    /// Dense index into the dataset: the opaque handle callers key on.
    pub idx: usize,
    pub id: Arc<str>,
    pub attrs: Arc<AttrMap>,
    pub loc: Option<Point2>,
}

#[derive(Debug, Clone, Default)]
pub struct QueryAnswer {
    /// Ranked by Euclidean distance to the query location, ascending;
    /// distance ties break by ascending dataset index.
    pub entries: Vec<ReturnedTuple>,
    /// True when the max-radius cutoff removed entries the top-k ranking
    /// would otherwise have returned.
    pub truncated: bool,
}

impl QueryAnswer {
    pub fn contains(&self, idx: usize) -> bool {
        self.entries.iter().any(|e| e.idx == idx)
    }

    /// 1-based rank of a tuple in this answer.
    pub fn rank_of(&self, idx: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.idx == idx).map(|p| p + 1)
    }
}

/// Single-tuple selection predicate. Pass-through predicates are applied by
/// the oracle before ranking; post-filter predicates are evaluated by the
/// estimator on returned tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    AttrEq(String, AttrValue),
    AttrGe(String, f64),
    AttrLe(String, f64),
}

impl Predicate {
    pub fn matches(&self, attrs: &AttrMap) -> bool {
        match self {
            Predicate::AttrEq(name, want) => match (attrs.get(name), want) {
                (Some(AttrValue::Num(a)), AttrValue::Num(b)) => a == b,
                (Some(AttrValue::Text(a)), AttrValue::Text(b)) => a == b,
                _ => false,
            },
            Predicate::AttrGe(name, bound) => {
                attrs.get(name).and_then(AttrValue::as_num).map_or(false, |v| v >= *bound)
            }
            Predicate::AttrLe(name, bound) => {
                attrs.get(name).and_then(AttrValue::as_num).map_or(false, |v| v <= *bound)
            }
        }
    }

    /// Parse `attr=value`, `attr>=num` or `attr<=num`.
    pub fn parse(s: &str) -> Result<Predicate, String> {
        if let Some((name, val)) = s.split_once(">=") {
            let v: f64 = val.trim().parse().map_err(|_| format!("bad number in `{s}`"))?;
            return Ok(Predicate::AttrGe(name.trim().to_string(), v));
        }
        if let Some((name, val)) = s.split_once("<=") {
            let v: f64 = val.trim().parse().map_err(|_| format!("bad number in `{s}`"))?;
            return Ok(Predicate::AttrLe(name.trim().to_string(), v));
        }
        if let Some((name, val)) = s.split_once('=') {
            let val = val.trim();
            let value = match val.parse::<f64>() {
                Ok(v) if v.is_finite() => AttrValue::Num(v),
                _ => AttrValue::Text(val.to_string()),
            };
            return Ok(Predicate::AttrEq(name.trim().to_string(), value));
        }
        Err(format!("cannot parse predicate `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregateKind {
    Count,
    Sum,
    Avg,
}

/// `SELECT Aggr(t) FROM D WHERE Cond`, restricted to per-tuple conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub kind: AggregateKind,
    pub attr: Option<String>,
    pub condition: Option<Predicate>,
    /// Whether the condition is handed to the oracle before ranking rather
    /// than post-filtered on returned tuples.
    pub pass_through: bool,
}

impl AggregateSpec {
    pub fn count() -> Self {
        Self { kind: AggregateKind::Count, attr: None, condition: None, pass_through: false }
    }

    pub fn sum(attr: impl Into<String>) -> Self {
        Self {
            kind: AggregateKind::Sum,
            attr: Some(attr.into()),
            condition: None,
            pass_through: false,
        }
    }

    pub fn avg(attr: impl Into<String>) -> Self {
        Self {
            kind: AggregateKind::Avg,
            attr: Some(attr.into()),
            condition: None,
            pass_through: false,
        }
    }

    pub fn with_condition(mut self, cond: Predicate, pass_through: bool) -> Self {
        self.condition = Some(cond);
        self.pass_through = pass_through;
        self
    }

    /// The pass-through filter to hand to the oracle, if any.
    pub fn oracle_filter(&self) -> Option<&Predicate> {
        if self.pass_through {
            self.condition.as_ref()
        } else {
            None
        }
    }

    /// Numerator Q(t) for SUM/COUNT-style estimation: the per-tuple
    /// aggregate value, with unsatisfied post-filter conditions mapped to 0.
    pub fn numerator(&self, attrs: &AttrMap) -> f64 {
        if let (Some(cond), false) = (&self.condition, self.pass_through) {
            if !cond.matches(attrs) {
                return 0.0;
            }
        }
        match self.kind {
            AggregateKind::Count => 1.0,
            AggregateKind::Sum | AggregateKind::Avg => self
                .attr
                .as_ref()
                .and_then(|a| attrs.get(a))
                .and_then(AttrValue::as_num)
                .unwrap_or(0.0),
        }
    }
}

/// Simulated LBS: the only query surface estimation code may touch.
///
/// Thread-safe: answers are pure functions of (dataset, config, q, filter)
/// and ledger updates are atomic.
pub struct SimulatedLbs {
    dataset: Arc<Dataset>,
    grid: PointGrid,
    config: OracleConfig,
    ledger: LedgerCells,
}

impl SimulatedLbs {
    pub fn new(dataset: Arc<Dataset>, config: OracleConfig) -> Self {
        let grid = PointGrid::build(&dataset.locations(), dataset.region());
        Self { dataset, grid, config, ledger: LedgerCells::default() }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn region(&self) -> crate::geometry::Rect {
        self.dataset.region()
    }

    pub fn ledger(&self) -> QueryLedger {
        QueryLedger {
            issued: self.ledger.issued.load(Ordering::Relaxed),
            init: self.ledger.init.load(Ordering::Relaxed),
            vertex_test: self.ledger.vertex_test.load(Ordering::Relaxed),
            binary_search: self.ledger.binary_search.load(Ordering::Relaxed),
            mc_trial: self.ledger.mc_trial.load(Ordering::Relaxed),
        }
    }

    /// Issue one top-k query. The filter is applied before ranking
    /// (pass-through semantics); entries beyond the configured max radius
    /// are excluded; the ledger is charged under `phase`.
    pub fn knn_query(
        &self,
        q: Point2,
        filter: Option<&Predicate>,
        phase: Phase,
    ) -> Result<QueryAnswer, OracleError> {
        if !self.dataset.region().contains(q) {
            return Err(OracleError::OutOfRegion(q.x, q.y));
        }
        if let Some(budget) = self.config.budget {
            let prev = self.ledger.issued.fetch_update(
                Ordering::Relaxed,
                Ordering::Relaxed,
                |v| if v < budget { Some(v + 1) } else { None },
            );
            if prev.is_err() {
                return Err(OracleError::BudgetExhausted);
            }
        } else {
            self.ledger.issued.fetch_add(1, Ordering::Relaxed);
        }
        match phase {
            Phase::Init => &self.ledger.init,
            Phase::VertexTest => &self.ledger.vertex_test,
            Phase::BinarySearch => &self.ledger.binary_search,
            Phase::McTrial => &self.ledger.mc_trial,
        }
        .fetch_add(1, Ordering::Relaxed);

        Ok(self.answer(q, filter))
    }

    /// Ranking without accounting; shared by the query path and tests.
    fn answer(&self, q: Point2, filter: Option<&Predicate>) -> QueryAnswer {
        let tuples = self.dataset.tuples();
        let ranked = self.grid.knn(q, self.config.k, &loc_view(tuples), |i| {
            filter.map_or(true, |f| f.matches(&tuples[i as usize].attrs))
        });
        let mut entries = Vec::with_capacity(ranked.len());
        let mut truncated = false;
        for (idx, dist) in &ranked {
            if let Some(d_max) = self.config.max_radius {
                if *dist > d_max {
                    truncated = true;
                    continue;
                }
            }
            let t = &tuples[*idx as usize];
            entries.push(ReturnedTuple {
                idx: *idx as usize,
                id: t.id.clone(),
                attrs: t.attrs.clone(),
                loc: match self.config.mode {
                    Mode::Lr => Some(t.loc),
                    Mode::Lnr => None,
                },
            });
        }
        QueryAnswer { entries, truncated }
    }

    /// Reference scan used as a correctness oracle in tests: full sort by
    /// (distance, index) with the same filter and radius semantics.
    pub fn knn_brute_force(
        &self,
        q: Point2,
        filter: Option<&Predicate>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = self
            .dataset
            .tuples()
            .iter()
            .enumerate()
            .filter(|(_, t)| filter.map_or(true, |f| f.matches(&t.attrs)))
            .map(|(i, t)| (t.loc.dist_sq(q), i))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(self.config.k);
        all.into_iter()
            .map(|(d2, i)| (i, d2.sqrt()))
            .filter(|(_, d)| self.config.max_radius.map_or(true, |m| *d <= m))
            .collect()
    }

    /// Privileged full-knowledge access for tests and verification
    /// harnesses. Never touches the query ledger.
    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth { dataset: &self.dataset }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }
}

fn loc_view(tuples: &[SpatialTuple]) -> Vec<Point2> {
    tuples.iter().map(|t| t.loc).collect()
}

/// Full-knowledge evaluations over the raw dataset; the verification side of
/// every dual-route check in this crate.
pub struct GroundTruth<'a> {
    dataset: &'a Dataset,
}

impl<'a> GroundTruth<'a> {
    /// Exact top-k cell of one tuple from all tuple locations.
    pub fn cell(
        &self,
        id: &str,
        k: usize,
        filter: Option<&Predicate>,
    ) -> Result<CellComplex, OracleError> {
        let idx = self
            .dataset
            .index_of(id)
            .ok_or_else(|| OracleError::UnknownTuple(id.to_string()))?;
        self.cell_by_index(idx, k, filter)
    }

    pub fn cell_by_index(
        &self,
        idx: usize,
        k: usize,
        filter: Option<&Predicate>,
    ) -> Result<CellComplex, OracleError> {
        let tuples = self.dataset.tuples();
        if idx >= tuples.len() {
            return Err(OracleError::UnknownTuple(format!("#{idx}")));
        }
        let site = tuples[idx].loc;
        let others: Vec<Point2> = tuples
            .iter()
            .enumerate()
            .filter(|(j, t)| {
                *j != idx && filter.map_or(true, |f| f.matches(&t.attrs))
            })
            .map(|(_, t)| t.loc)
            .collect();
        let region = self.dataset.region().to_cell();
        let mut complex = topk_cell_faces(site, &others, k, &region)?;
        complex.owner = Some(idx);
        Ok(complex)
    }

    /// Exact full-scan evaluation of an aggregate.
    pub fn aggregate(&self, agg: &AggregateSpec) -> Result<f64, OracleError> {
        if let Some(attr) = &agg.attr {
            let known = self
                .dataset
                .tuples()
                .iter()
                .any(|t| t.attrs.contains_key(attr));
            if !known {
                return Err(OracleError::UnknownAttribute(attr.clone()));
            }
        }
        let mut sum = 0.0;
        let mut count = 0.0;
        for t in self.dataset.tuples() {
            if let Some(cond) = &agg.condition {
                if !cond.matches(&t.attrs) {
                    continue;
                }
            }
            count += 1.0;
            if let Some(attr) = &agg.attr {
                sum += t.attrs.get(attr).and_then(AttrValue::as_num).unwrap_or(0.0);
            }
        }
        Ok(match agg.kind {
            AggregateKind::Count => count,
            AggregateKind::Sum => sum,
            AggregateKind::Avg => {
                if count == 0.0 {
                    0.0
                } else {
                    sum / count
                }
            }
        })
    }

    /// Nearest-neighbor distance of a tuple, the `d(t)` of the bias bound.
    pub fn nearest_neighbor_dist(&self, idx: usize) -> f64 {
        let tuples = self.dataset.tuples();
        let site = tuples[idx].loc;
        tuples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(_, t)| t.loc.dist(site))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Equality tolerance used in tests when comparing ranked answers.
pub const RANK_DIST_EPS: f64 = GEOM_EPS;

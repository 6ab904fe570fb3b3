//! Sampling and aggregation: query-location samplers (uniform and
//! density-weighted), inclusion probabilities, per-sample estimates for
//! COUNT/SUM with selection conditions, AVG as a ratio of the two, and
//! sample variance with normal-approximation confidence intervals.

use std::io;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    disk_polygon_intersection_area, Circle, ConvexCell, GeometryError, HalfPlane, Point2, Rect,
};
use crate::lnr_cell::{self, BinarySearchParams, LnrError};
use crate::lr_cell::{self, History, LrError, LrOptions, VarianceReductionPolicy};
use crate::oracle::{OracleError, Phase, SimulatedLbs};
use crate::substream;

pub use crate::oracle::{AggregateKind, AggregateSpec, Predicate};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("density grid: {0}")]
    BadDensity(String),
    #[error("zero sampling mass over the requested cell")]
    ZeroMass,
    #[error("no samples completed")]
    NoSamples,
    #[error("max radius with a rank-only oracle is not supported")]
    LnrMaxRadius,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lr(#[from] LrError),
    #[error(transparent)]
    Lnr(#[from] LnrError),
}

/// Piecewise-constant sampling density over a rectangular grid covering the
/// region. Weights are relative densities; the mass of a piece of area A
/// inside a grid cell of weight w is w * A.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityGrid {
    region: Rect,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    total_mass: f64,
}

impl DensityGrid {
    pub fn new(
        region: Rect,
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
    ) -> Result<Self, EstimatorError> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols {
            return Err(EstimatorError::BadDensity(format!(
                "expected {rows}x{cols} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EstimatorError::BadDensity("weights must be finite and >= 0".into()));
        }
        let cell_area = region.area() / (rows * cols) as f64;
        let total_mass: f64 = weights.iter().map(|w| w * cell_area).sum();
        if total_mass <= 0.0 {
            return Err(EstimatorError::BadDensity("all weights are zero".into()));
        }
        Ok(Self { region, rows, cols, weights, total_mass })
    }

    pub fn region(&self) -> Rect {
        self.region
    }

    pub fn mass(&self) -> f64 {
        self.total_mass
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cell_rect(&self, row: usize, col: usize) -> Rect {
        let w = self.region.width() / self.cols as f64;
        let h = self.region.height() / self.rows as f64;
        Rect {
            x0: self.region.x0 + col as f64 * w,
            y0: self.region.y0 + row as f64 * h,
            x1: self.region.x0 + (col + 1) as f64 * w,
            y1: self.region.y0 + (row + 1) as f64 * h,
        }
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    /// Grid-cell index ranges overlapping a bounding box.
    fn cells_overlapping(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> (usize, usize, usize, usize) {
        let w = self.region.width() / self.cols as f64;
        let h = self.region.height() / self.rows as f64;
        let c0 = (((x0 - self.region.x0) / w).floor().max(0.0)) as usize;
        let r0 = (((y0 - self.region.y0) / h).floor().max(0.0)) as usize;
        let c1 = (((x1 - self.region.x0) / w).ceil() as usize).min(self.cols);
        let r1 = (((y1 - self.region.y0) / h).ceil() as usize).min(self.rows);
        (r0, c0, r1.max(r0 + 1).min(self.rows), c1.max(c0 + 1).min(self.cols))
    }

    /// Load from CSV: a `# density rows=R cols=C x0=.. y0=.. x1=.. y1=..`
    /// line, then a `row,col,weight` header and one row per nonzero cell.
    pub fn from_csv_path(path: &Path) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, EstimatorError> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .ok_or_else(|| EstimatorError::BadDensity("empty density file".into()))?;
        if !meta.starts_with('#') {
            return Err(EstimatorError::BadDensity(
                "first line must be `# density rows=.. cols=.. x0=.. y0=.. x1=.. y1=..`".into(),
            ));
        }
        let mut rows = None;
        let mut cols = None;
        let mut bounds = [None::<f64>; 4];
        for tok in meta.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                match k {
                    "rows" => rows = v.parse::<usize>().ok(),
                    "cols" => cols = v.parse::<usize>().ok(),
                    "x0" => bounds[0] = v.parse().ok(),
                    "y0" => bounds[1] = v.parse().ok(),
                    "x1" => bounds[2] = v.parse().ok(),
                    "y1" => bounds[3] = v.parse().ok(),
                    _ => {}
                }
            }
        }
        let (rows, cols) = match (rows, cols) {
            (Some(r), Some(c)) => (r, c),
            _ => return Err(EstimatorError::BadDensity("missing rows=/cols=".into())),
        };
        let region = match bounds {
            [Some(x0), Some(y0), Some(x1), Some(y1)] => Rect::new(x0, y0, x1, y1)
                .map_err(|e| EstimatorError::BadDensity(format!("bad bounds: {e}")))?,
            _ => return Err(EstimatorError::BadDensity("missing region bounds".into())),
        };
        let mut weights = vec![0.0; rows * cols];
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line == "row,col,weight" {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64, EstimatorError> {
                s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                    EstimatorError::BadDensity(format!("bad density line {}", lineno + 2))
                })
            };
            let r = parse(parts.next())? as usize;
            let c = parse(parts.next())? as usize;
            let w = parse(parts.next())?;
            if r >= rows || c >= cols {
                return Err(EstimatorError::BadDensity(format!(
                    "cell ({r},{c}) outside {rows}x{cols} grid"
                )));
            }
            weights[r * cols + c] = w;
        }
        Self::new(region, rows, cols, weights)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!(
            "# density rows={} cols={} x0={} y0={} x1={} y1={}\nrow,col,weight\n",
            self.rows, self.cols, self.region.x0, self.region.y0, self.region.x1, self.region.y1
        );
        for r in 0..self.rows {
            for c in 0..self.cols {
                let w = self.weight(r, c);
                if w != 0.0 {
                    out.push_str(&format!("{r},{c},{w}\n"));
                }
            }
        }
        out
    }
}

/// The sampling measure: uniform area, or a density grid. Masses integrate
/// the density; the optional disk intersects a max-radius constraint into
/// cell masses.
#[derive(Debug, Clone, Copy, Default)]
pub struct Measure<'a> {
    density: Option<&'a DensityGrid>,
}

impl<'a> Measure<'a> {
    pub fn uniform() -> Measure<'static> {
        Measure { density: None }
    }

    pub fn weighted(grid: &'a DensityGrid) -> Measure<'a> {
        Measure { density: Some(grid) }
    }

    pub fn density(&self) -> Option<&'a DensityGrid> {
        self.density
    }

    /// Total sampling mass of the region (denominator of every inclusion
    /// probability).
    pub fn total_mass(&self, region: Rect) -> f64 {
        match self.density {
            Some(d) => d.mass(),
            None => region.area(),
        }
    }

    /// Mass of one convex piece, optionally intersected with a disk.
    fn piece_mass(piece: &ConvexCell, disk: Option<Circle>) -> f64 {
        match disk {
            Some(c) => disk_polygon_intersection_area(piece, c),
            None => piece.area(),
        }
    }

    /// Sampling mass of a union of disjoint convex faces (optionally
    /// intersected with a disk).
    pub fn mass_of_faces(&self, faces: &[ConvexCell], disk: Option<Circle>) -> f64 {
        match self.density {
            None => faces.iter().map(|f| Self::piece_mass(f, disk)).sum(),
            Some(grid) => {
                let mut total = 0.0;
                for face in faces {
                    for (piece, w) in grid_pieces(grid, face) {
                        total += w * Self::piece_mass(&piece, disk);
                    }
                }
                total
            }
        }
    }

    /// Draw a location from the measure restricted to the faces (and disk).
    /// Returns None when the restricted mass is zero.
    pub fn sample_in_faces<R: Rng + ?Sized>(
        &self,
        faces: &[ConvexCell],
        disk: Option<Circle>,
        rng: &mut R,
    ) -> Option<Point2> {
        let mut pieces: Vec<(ConvexCell, f64)> = Vec::new();
        match self.density {
            None => {
                for f in faces {
                    let m = Self::piece_mass(f, disk);
                    if m > 0.0 {
                        pieces.push((f.clone(), m));
                    }
                }
            }
            Some(grid) => {
                for face in faces {
                    for (piece, w) in grid_pieces(grid, face) {
                        let m = w * Self::piece_mass(&piece, disk);
                        if m > 0.0 {
                            pieces.push((piece, m));
                        }
                    }
                }
            }
        }
        let total: f64 = pieces.iter().map(|(_, m)| m).sum();
        if total <= 0.0 {
            return None;
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = pieces.len() - 1;
        for (i, (_, m)) in pieces.iter().enumerate() {
            if pick < *m {
                chosen = i;
                break;
            }
            pick -= m;
        }
        let piece = &pieces[chosen].0;
        // Uniform inside the piece; rejection against the disk preserves
        // uniformity on the intersection.
        for _ in 0..1_000_000 {
            let p = piece.sample_uniform(rng).ok()?;
            match disk {
                Some(c) if !c.contains(p, 0.0) => continue,
                _ => return Some(p),
            }
        }
        None
    }

    /// Draw a query location over the whole region (the sampler of the
    /// estimation loop).
    pub fn sample_in_region<R: Rng + ?Sized>(&self, region: Rect, rng: &mut R) -> Point2 {
        match self.density {
            None => Point2::raw(
                rng.gen_range(region.x0..region.x1),
                rng.gen_range(region.y0..region.y1),
            ),
            Some(grid) => {
                let mut pick = rng.gen_range(0.0..grid.mass());
                let cell_area = grid.region().area() / (grid.rows * grid.cols) as f64;
                for r in 0..grid.rows {
                    for c in 0..grid.cols {
                        let m = grid.weight(r, c) * cell_area;
                        if pick < m {
                            let rect = grid.cell_rect(r, c);
                            return Point2::raw(
                                rng.gen_range(rect.x0..rect.x1),
                                rng.gen_range(rect.y0..rect.y1),
                            );
                        }
                        pick -= m;
                    }
                }
                // Float tail: land in the last positive cell.
                let (r, c) = (grid.rows - 1, grid.cols - 1);
                let rect = grid.cell_rect(r, c);
                Point2::raw(
                    rng.gen_range(rect.x0..rect.x1),
                    rng.gen_range(rect.y0..rect.y1),
                )
            }
        }
    }
}

/// Clip a face against every overlapping grid rectangle; yields (piece,
/// weight) for nonempty pieces.
fn grid_pieces(grid: &DensityGrid, face: &ConvexCell) -> Vec<(ConvexCell, f64)> {
    let vs = face.vertices();
    if vs.is_empty() {
        return Vec::new();
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in vs {
        x0 = x0.min(v.x);
        y0 = y0.min(v.y);
        x1 = x1.max(v.x);
        y1 = y1.max(v.y);
    }
    let (r0, c0, r1, c1) = grid.cells_overlapping(x0, y0, x1, y1);
    let mut out = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            let w = grid.weight(r, c);
            if w <= 0.0 {
                continue;
            }
            let rect = grid.cell_rect(r, c);
            let piece = face
                .clip(HalfPlane { nx: 1.0, ny: 0.0, offset: rect.x1 })
                .clip(HalfPlane { nx: -1.0, ny: 0.0, offset: -rect.x0 })
                .clip(HalfPlane { nx: 0.0, ny: 1.0, offset: rect.y1 })
                .clip(HalfPlane { nx: 0.0, ny: -1.0, offset: -rect.y0 });
            if !piece.is_empty() {
                out.push((piece, w));
            }
        }
    }
    out
}

/// Draw one query location: uniform over the region or proportional to the
/// density grid.
pub fn sample_location<R: Rng + ?Sized>(
    region: Rect,
    density: Option<&DensityGrid>,
    rng: &mut R,
) -> Point2 {
    match density {
        Some(d) => Measure::weighted(d).sample_in_region(region, rng),
        None => Measure::uniform().sample_in_region(region, rng),
    }
}

/// Inclusion probability of a cell under the sampling measure: its mass
/// (optionally disk-truncated) over the region's total mass.
pub fn inclusion_probability(
    faces: &[ConvexCell],
    region: Rect,
    density: Option<&DensityGrid>,
    disk: Option<Circle>,
) -> Result<f64, EstimatorError> {
    let measure = match density {
        Some(d) => Measure::weighted(d),
        None => Measure::uniform(),
    };
    let mass = measure.mass_of_faces(faces, disk);
    if mass <= 0.0 {
        return Err(EstimatorError::ZeroMass);
    }
    Ok(mass / measure.total_mass(region))
}

/// Per-tuple contribution inside one sample.
#[derive(Debug, Clone, Serialize)]
pub struct Contribution {
    pub idx: usize,
    pub rank: usize,
    pub h: usize,
    /// Effective inclusion probability: mass / (r * total); in (0, 1].
    pub p: f64,
    pub numerator: f64,
    pub value: f64,
    pub mc_trials: Option<u64>,
}

/// One randomized estimate: a query location and the contributions of the
/// returned tuples it was allowed to use.
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub q: Point2,
    pub contributions: Vec<Contribution>,
    /// Per-sample COUNT-style estimate (numerator 1 under the condition).
    pub count_value: f64,
    /// Per-sample SUM-style estimate over the aggregate attribute.
    pub sum_value: f64,
    /// The requested aggregate's per-sample value (COUNT or SUM; AVG uses
    /// the two components).
    pub value: f64,
    pub queries: u64,
}

/// Full estimation result. The variance is the Bessel-corrected sample
/// variance of per-sample values; the confidence interval is the normal
/// approximation around the mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateEstimate {
    pub value: f64,
    pub sample_variance: f64,
    pub ci95: (f64, f64),
    pub samples: u64,
    pub discarded_samples: u64,
    pub queries: u64,
    /// Budget ran out before the requested sample count.
    pub partial: bool,
    /// AVG is a ratio of two unbiased estimators and is itself not
    /// unbiased.
    pub ratio_estimator: bool,
}

/// Estimation configuration beyond the oracle's own.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub seed: u64,
    /// Number of samples to draw (the loop also stops on budget
    /// exhaustion).
    pub samples: u64,
    /// Hard per-sample query cap; overrunning samples are discarded. The
    /// cap is fixed before the sample sees any tuple identity.
    pub per_sample_cap: Option<u64>,
    pub lr: LrOptions,
    pub adaptive_h: bool,
    /// Fixed threshold for adaptive h; None derives area(region)/n_hat from
    /// a running COUNT estimate, refreshed every 50 samples.
    pub lambda0: Option<f64>,
    /// LNR edge-error target as a fraction of the region width.
    pub lnr_epsilon_frac: f64,
    /// Cell definition used by the rank-only pipeline (h <= k).
    pub lnr_h: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 100,
            per_sample_cap: Some(500),
            lr: LrOptions::default(),
            adaptive_h: false,
            lambda0: None,
            lnr_epsilon_frac: 1e-3,
            lnr_h: 1,
        }
    }
}

/// Outcome of one sampling attempt.
pub enum SampleOutcome {
    Done(SampleRecord),
    /// Per-sample cap exceeded: queries spent, sample discarded.
    Discarded(u64),
    /// Oracle budget exhausted mid-sample: stop the run.
    BudgetOut,
}

/// Draw one location and produce the per-sample estimate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_once(
    lbs: &SimulatedLbs,
    agg: &AggregateSpec,
    cfg: &EstimatorConfig,
    measure: &Measure,
    history: &History,
    lambda0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome, EstimatorError> {
    let region = lbs.region();
    let q = measure.sample_in_region(region, rng);
    let filter = agg.oracle_filter();
    let ans = match lbs.knn_query(q, filter, Phase::Init) {
        Ok(a) => a,
        Err(OracleError::BudgetExhausted) => return Ok(SampleOutcome::BudgetOut),
        Err(e) => return Err(e.into()),
    };
    let mut record = SampleRecord {
        q,
        contributions: Vec::new(),
        count_value: 0.0,
        sum_value: 0.0,
        value: 0.0,
        queries: 1,
    };
    // Empty answer (max-radius cutoff): the sample contributes 0.
    if ans.entries.is_empty() {
        record.value = 0.0;
        return Ok(SampleOutcome::Done(record));
    }
    let total_mass = measure.total_mass(region);
    let k = lbs.config().k;

    match lbs.config().mode {
        crate::oracle::Mode::Lr => {
            // Record the whole answer first: adaptive h reads history.
            let located: Vec<(usize, Point2)> = ans
                .entries
                .iter()
                .map(|e| (e.idx, e.loc.expect("LR answers carry locations")))
                .collect();
            for &(idx, loc) in &located {
                history.record(idx, loc);
            }
            let policy = VarianceReductionPolicy { lambda0, enabled: cfg.adaptive_h };
            for (i0, entry) in ans.entries.iter().enumerate() {
                let rank = i0 + 1;
                let loc = entry.loc.expect("LR answers carry locations");
                let h = if cfg.adaptive_h {
                    lr_cell::choose_h(history, entry.idx, loc, k, &policy)?
                } else {
                    1
                };
                // A tuple is usable only when the chosen cell definition
                // covers the sampling event that returned it.
                if rank > h {
                    continue;
                }
                let cap_left = cfg.per_sample_cap.map(|c| c.saturating_sub(record.queries));
                let cell = match lr_cell::compute_cell(
                    lbs,
                    filter,
                    entry.idx,
                    loc,
                    h,
                    history,
                    &cfg.lr,
                    Some(q),
                    &located,
                    measure,
                    rng,
                    cap_left,
                ) {
                    Ok(c) => c,
                    Err(LrError::SampleCap) => {
                        return Ok(SampleOutcome::Discarded(record.queries));
                    }
                    Err(e) => return Err(e.into()),
                };
                record.queries += cell.queries.issued;
                if cell.budget_exhausted {
                    return Ok(SampleOutcome::BudgetOut);
                }
                debug_assert!(cell.usable());
                let disk = lbs
                    .config()
                    .max_radius
                    .map(|d| Circle { center: loc, radius: d });
                let mass = measure.mass_of_faces(cell.upper.faces(), disk);
                if mass <= 0.0 {
                    return Err(EstimatorError::ZeroMass);
                }
                let r = cell.mc_trials.unwrap_or(1) as f64;
                let p_eff = (mass / (r * total_mass)).min(1.0);
                let numer = agg.numerator(&entry.attrs);
                let value = numer / p_eff;
                record.count_value += cond_indicator(agg, &entry.attrs) / p_eff;
                record.sum_value += value;
                record.contributions.push(Contribution {
                    idx: entry.idx,
                    rank,
                    h,
                    p: p_eff,
                    numerator: numer,
                    value,
                    mc_trials: cell.mc_trials,
                });
            }
        }
        crate::oracle::Mode::Lnr => {
            if lbs.config().max_radius.is_some() {
                return Err(EstimatorError::LnrMaxRadius);
            }
            let eps = cfg.lnr_epsilon_frac * region.width();
            let params = BinarySearchParams::from_epsilon(eps, region)?;
            let h = cfg.lnr_h.min(k);
            for (i0, entry) in ans.entries.iter().enumerate() {
                let rank = i0 + 1;
                if rank > h {
                    continue;
                }
                let cap_left = cfg.per_sample_cap.map(|c| c.saturating_sub(record.queries));
                let cell = match lnr_cell::compute_cell_lnr_h(
                    lbs, filter, q, entry.idx, h, &params, cap_left,
                ) {
                    Ok(c) => c,
                    Err(LnrError::SampleCap) => {
                        return Ok(SampleOutcome::Discarded(record.queries));
                    }
                    Err(LnrError::Oracle(OracleError::BudgetExhausted)) => {
                        return Ok(SampleOutcome::BudgetOut);
                    }
                    Err(e) => return Err(e.into()),
                };
                record.queries += cell.queries.issued;
                if cell.budget_exhausted {
                    return Ok(SampleOutcome::BudgetOut);
                }
                let mass = measure.mass_of_faces(cell.polygon.faces(), None);
                if mass <= 0.0 {
                    return Err(EstimatorError::ZeroMass);
                }
                let p = (mass / total_mass).min(1.0);
                let numer = agg.numerator(&entry.attrs);
                let value = numer / p;
                record.count_value += cond_indicator(agg, &entry.attrs) / p;
                record.sum_value += value;
                record.contributions.push(Contribution {
                    idx: entry.idx,
                    rank,
                    h,
                    p,
                    numerator: numer,
                    value,
                    mc_trials: None,
                });
            }
        }
    }
    record.value = match agg.kind {
        AggregateKind::Count => record.count_value,
        AggregateKind::Sum | AggregateKind::Avg => record.sum_value,
    };
    Ok(SampleOutcome::Done(record))
}

fn cond_indicator(agg: &AggregateSpec, attrs: &crate::oracle::AttrMap) -> f64 {
    if let (Some(cond), false) = (&agg.condition, agg.pass_through) {
        if !cond.matches(attrs) {
            return 0.0;
        }
    }
    1.0
}

/// Run the full estimation loop: independent per-sample random substreams,
/// a running lambda0 for adaptive h, Bessel-corrected variance and a normal
/// 95% confidence interval. AVG is the ratio of the SUM and COUNT estimates
/// from the same samples.
pub fn run_estimation(
    lbs: &SimulatedLbs,
    agg: &AggregateSpec,
    cfg: &EstimatorConfig,
    density: Option<&DensityGrid>,
) -> Result<AggregateEstimate, EstimatorError> {
    let region = lbs.region();
    if let Some(d) = density {
        let dr = d.region();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        if !(close(dr.x0, region.x0)
            && close(dr.y0, region.y0)
            && close(dr.x1, region.x1)
            && close(dr.y1, region.y1))
        {
            return Err(EstimatorError::BadDensity(format!(
                "density grid region {dr:?} does not match the oracle region {region:?}"
            )));
        }
    }
    let measure = match density {
        Some(d) => Measure::weighted(d),
        None => Measure::uniform(),
    };
    let history = History::new(region);
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut discarded = 0u64;
    let mut partial = false;
    let mut lambda0 = cfg.lambda0.unwrap_or_else(|| region.area());
    for i in 0..cfg.samples {
        if cfg.lambda0.is_none() && i % 50 == 0 && !records.is_empty() {
            let mean_count: f64 =
                records.iter().map(|r| r.count_value).sum::<f64>() / records.len() as f64;
            if mean_count >= 1.0 {
                lambda0 = region.area() / mean_count;
            }
        }
        if std::env::var("KNNAGG_TRACE").is_ok() && i % 20 == 0 {
            eprintln!("sample {i}: queries so far {}", lbs.ledger().issued);
        }
        let mut rng = substream(cfg.seed, i);
        match estimate_once(lbs, agg, cfg, &measure, &history, lambda0, &mut rng)? {
            SampleOutcome::Done(rec) => records.push(rec),
            SampleOutcome::Discarded(_) => discarded += 1,
            SampleOutcome::BudgetOut => {
                partial = true;
                break;
            }
        }
    }
    summarize(agg, &records, discarded, partial, lbs.ledger().issued)
}

/// Reduce per-sample records to the final estimate.
pub fn summarize(
    agg: &AggregateSpec,
    records: &[SampleRecord],
    discarded: u64,
    partial: bool,
    queries: u64,
) -> Result<AggregateEstimate, EstimatorError> {
    if records.is_empty() {
        return Err(EstimatorError::NoSamples);
    }
    let n = records.len() as f64;
    let ratio = agg.kind == AggregateKind::Avg;
    let (value, variance) = if ratio {
        let mean_sum = records.iter().map(|r| r.sum_value).sum::<f64>() / n;
        let mean_count = records.iter().map(|r| r.count_value).sum::<f64>() / n;
        let ratio_v = if mean_count.abs() > 0.0 { mean_sum / mean_count } else { 0.0 };
        // Delta-method variance of the ratio of two sample means.
        let mut var_s = 0.0;
        let mut var_c = 0.0;
        let mut cov = 0.0;
        for r in records {
            var_s += (r.sum_value - mean_sum).powi(2);
            var_c += (r.count_value - mean_count).powi(2);
            cov += (r.sum_value - mean_sum) * (r.count_value - mean_count);
        }
        let bessel = (n - 1.0).max(1.0);
        var_s /= bessel;
        var_c /= bessel;
        cov /= bessel;
        let var_ratio = if mean_count.abs() > 0.0 {
            (var_s + ratio_v * ratio_v * var_c - 2.0 * ratio_v * cov) / (mean_count * mean_count)
        } else {
            0.0
        };
        (ratio_v, var_ratio.max(0.0))
    } else {
        let mean = records.iter().map(|r| r.value).sum::<f64>() / n;
        let var = records
            .iter()
            .map(|r| (r.value - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        (mean, var)
    };
    let se = (variance / n).sqrt();
    Ok(AggregateEstimate {
        value,
        sample_variance: variance,
        ci95: (value - 1.96 * se, value + 1.96 * se),
        samples: records.len() as u64,
        discarded_samples: discarded,
        queries,
        partial,
        ratio_estimator: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{
        gen, AttrMap, AttrValue, Dataset, Mode, OracleConfig, SimulatedLbs, SpatialTuple,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Chi-square critical value, df=99, alpha=0.01.
    const CHI2_99_001: f64 = 134.642;

    fn unit_region() -> Rect {
        Rect::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        let region = unit_region();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0u32; 100];
        let n = 100_000;
        for _ in 0..n {
            let p = sample_location(region, None, &mut rng);
            let cx = ((p.x * 10.0).floor() as usize).min(9);
            let cy = ((p.y * 10.0).floor() as usize).min(9);
            counts[cy * 10 + cx] += 1;
        }
        let e = n as f64 / 100.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < CHI2_99_001, "chi2 {chi2} over critical value");
    }

    #[test]
    fn constant_density_indistinguishable_from_uniform() {
        let region = unit_region();
        let grid = DensityGrid::new(region, 4, 4, vec![2.5; 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0u32; 100];
        let n = 100_000;
        for _ in 0..n {
            let p = sample_location(region, Some(&grid), &mut rng);
            let cx = ((p.x * 10.0).floor() as usize).min(9);
            let cy = ((p.y * 10.0).floor() as usize).min(9);
            counts[cy * 10 + cx] += 1;
        }
        let e = n as f64 / 100.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < CHI2_99_001, "chi2 {chi2} over critical value");
    }

    #[test]
    fn concentrated_density_confines_draws() {
        let region = unit_region();
        let mut w = vec![0.0; 25];
        w[2 * 5 + 3] = 7.0; // row 2, col 3
        let grid = DensityGrid::new(region, 5, 5, w).unwrap();
        let rect = grid.cell_rect(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = sample_location(region, Some(&grid), &mut rng);
            assert!(rect.contains(p), "draw {p:?} escaped the only positive cell");
        }
    }

    #[test]
    fn all_zero_density_rejected() {
        assert!(matches!(
            DensityGrid::new(unit_region(), 2, 2, vec![0.0; 4]),
            Err(EstimatorError::BadDensity(_))
        ));
    }

    #[test]
    fn density_csv_round_trip() {
        let grid = DensityGrid::new(unit_region(), 2, 3, vec![1.0, 0.0, 2.0, 0.5, 0.0, 3.0]).unwrap();
        let text = grid.to_csv_string();
        let back = DensityGrid::from_csv_str(&text).unwrap();
        assert_eq!(back.dims(), (2, 3));
        assert!((back.mass() - grid.mass()).abs() < 1e-12);
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(back.weight(r, c), grid.weight(r, c));
            }
        }
    }

    #[test]
    fn inclusion_probability_trivials() {
        let region = unit_region();
        let cell = region.to_cell();
        let p = inclusion_probability(&[cell.clone()], region, None, None).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        let half = cell.clip(crate::geometry::HalfPlane { nx: 1.0, ny: 0.0, offset: 0.5 });
        let p = inclusion_probability(&[half], region, None, None).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_inclusion_matches_rejection_integral() {
        use rand::Rng;
        let region = unit_region();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..3.0)).collect();
        let grid = DensityGrid::new(region, 4, 4, weights).unwrap();
        // Random convex polygon: the unit square clipped by two half-planes.
        let cell = region
            .to_cell()
            .clip(crate::geometry::HalfPlane { nx: 1.0, ny: 0.7, offset: 1.1 })
            .clip(crate::geometry::HalfPlane { nx: -0.4, ny: 1.0, offset: 0.6 });
        let p = inclusion_probability(&[cell.clone()], region, Some(&grid), None).unwrap();
        // Monte Carlo: draw from the density, count hits in the cell.
        let n = 400_000;
        let mut hits = 0u32;
        for _ in 0..n {
            let q = sample_location(region, Some(&grid), &mut rng);
            if cell.contains(q, 0.0) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let sigma = (p_hat * (1.0 - p_hat) / n as f64).sqrt();
        assert!((p - p_hat).abs() <= 4.0 * sigma, "exact {p} vs mc {p_hat}");
    }

    #[test]
    fn weighted_inclusion_with_disk_matches_rejection_integral() {
        use rand::Rng;
        let region = unit_region();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let weights: Vec<f64> = (0..9).map(|_| rng.gen_range(0.1..2.0)).collect();
        let grid = DensityGrid::new(region, 3, 3, weights).unwrap();
        let cell = region
            .to_cell()
            .clip(crate::geometry::HalfPlane { nx: 1.0, ny: 0.3, offset: 0.9 });
        let disk = Circle { center: Point2::raw(0.4, 0.45), radius: 0.35 };
        let p = inclusion_probability(&[cell.clone()], region, Some(&grid), Some(disk)).unwrap();
        let n = 400_000;
        let mut hits = 0u32;
        for _ in 0..n {
            let q = sample_location(region, Some(&grid), &mut rng);
            if cell.contains(q, 0.0) && disk.contains(q, 0.0) {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let sigma = (p_hat * (1.0 - p_hat) / n as f64).sqrt();
        assert!((p - p_hat).abs() <= 4.0 * sigma, "exact {p} vs mc {p_hat}");
    }

    fn weighted_dataset(n: usize, seed: u64) -> Dataset {
        gen::uniform(n, seed)
    }

    /// Exact expectation identity: sum over tuples of p(t) * (Q(t)/p(t))
    /// equals the full-scan aggregate to machine precision, with inclusion
    /// probabilities enumerated from ground-truth cells.
    #[test]
    fn exact_enumeration_unbiasedness_small_dataset() {
        let ds = weighted_dataset(40, 101);
        let region = ds.region();
        let lbs = SimulatedLbs::new(Arc::new(ds), OracleConfig::new(1, Mode::Lr));
        let gt = lbs.ground_truth();
        for agg in [AggregateSpec::count(), AggregateSpec::sum("weight")] {
            let truth = gt.aggregate(&agg).unwrap();
            let mut expectation = 0.0;
            let mut p_total = 0.0;
            for (idx, t) in lbs.dataset().tuples().iter().enumerate() {
                let cell = gt.cell_by_index(idx, 1, None).unwrap();
                let p = inclusion_probability(cell.faces(), region, None, None).unwrap();
                let value = agg.numerator(&t.attrs) / p;
                expectation += p * value;
                p_total += p;
            }
            assert!(
                ((expectation - truth) / truth).abs() < 1e-12,
                "{agg:?}: expectation {expectation} vs truth {truth}"
            );
            assert!((p_total - 1.0).abs() < 1e-9, "top-1 cells must partition: {p_total}");
        }
    }

    /// Same identity under a max radius: total inclusion probability drops
    /// below one, the deficit returns zero, and the expectation still hits
    /// the full aggregate.
    #[test]
    fn exact_enumeration_unbiasedness_with_max_radius() {
        let ds = weighted_dataset(30, 103);
        let region = ds.region();
        let d_max = 0.12;
        let lbs = SimulatedLbs::new(
            Arc::new(ds),
            OracleConfig::new(1, Mode::Lr).with_max_radius(d_max),
        );
        let gt = lbs.ground_truth();
        let truth = gt.aggregate(&AggregateSpec::count()).unwrap();
        let mut expectation = 0.0;
        let mut p_total = 0.0;
        for (idx, t) in lbs.dataset().tuples().iter().enumerate() {
            let cell = gt.cell_by_index(idx, 1, None).unwrap();
            let disk = Circle { center: t.loc, radius: d_max };
            let p = inclusion_probability(cell.faces(), region, None, Some(disk)).unwrap();
            expectation += p * (1.0 / p);
            p_total += p;
        }
        assert!(((expectation - truth) / truth).abs() < 1e-12);
        assert!(
            p_total < 0.999,
            "max radius should leave sub-unit total probability, got {p_total}"
        );
    }

    fn quick_cfg(samples: u64, seed: u64) -> EstimatorConfig {
        EstimatorConfig { seed, samples, ..EstimatorConfig::default() }
    }

    #[test]
    fn count_value_is_inverse_probability_k1() {
        let ds = weighted_dataset(25, 107);
        let region = ds.region();
        let lbs = SimulatedLbs::new(Arc::new(ds), OracleConfig::new(1, Mode::Lr));
        let gt = lbs.ground_truth();
        let cfg = quick_cfg(1, 9);
        let history = crate::lr_cell::History::new(region);
        let measure = Measure::uniform();
        let mut rng = crate::substream(9, 0);
        let out = estimate_once(
            &lbs,
            &AggregateSpec::count(),
            &cfg,
            &measure,
            &history,
            region.area(),
            &mut rng,
        )
        .unwrap();
        let SampleOutcome::Done(rec) = out else { panic!("sample did not complete") };
        assert_eq!(rec.contributions.len(), 1);
        let c = &rec.contributions[0];
        // 1/p with p enumerated from the ground-truth cell of the sampled tuple.
        let cell = gt.cell_by_index(c.idx, 1, None).unwrap();
        let p_true = inclusion_probability(cell.faces(), region, None, None).unwrap();
        assert!(((c.p - p_true) / p_true).abs() < 1e-9, "p {} vs truth {p_true}", c.p);
        assert!((rec.value - 1.0 / p_true).abs() / (1.0 / p_true) < 1e-9);
    }

    #[test]
    fn empty_answer_under_max_radius_contributes_zero() {
        // Two far-apart tuples, small radius: most of the region returns
        // empty answers.
        let tuples = vec![
            SpatialTuple::new("a", Point2::raw(0.05, 0.05), AttrMap::new()),
            SpatialTuple::new("b", Point2::raw(0.95, 0.95), AttrMap::new()),
        ];
        let ds = Dataset::new(tuples, Some(unit_region())).unwrap();
        let lbs = SimulatedLbs::new(
            Arc::new(ds),
            OracleConfig::new(1, Mode::Lr).with_max_radius(0.05),
        );
        let cfg = quick_cfg(1, 1);
        let history = crate::lr_cell::History::new(unit_region());
        let measure = Measure::uniform();
        // Seed chosen so the sampled location is far from both tuples.
        let mut rng = crate::substream(12, 0);
        let out = estimate_once(
            &lbs,
            &AggregateSpec::count(),
            &cfg,
            &measure,
            &history,
            1.0,
            &mut rng,
        )
        .unwrap();
        let SampleOutcome::Done(rec) = out else { panic!() };
        assert!(rec.contributions.is_empty());
        assert_eq!(rec.value, 0.0);
        assert_eq!(rec.queries, 1);
    }

    #[test]
    fn post_filter_zeroes_numerator_but_not_probability() {
        let mut tuples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for i in 0..20 {
            let mut attrs = AttrMap::new();
            attrs.insert(
                "category".into(),
                AttrValue::Text(if i % 2 == 0 { "a".into() } else { "b".into() }),
            );
            tuples.push(SpatialTuple::new(
                format!("{i}"),
                Point2::raw(rng.gen(), rng.gen()),
                attrs,
            ));
        }
        let ds = Dataset::new(tuples, Some(unit_region())).unwrap();
        let lbs = SimulatedLbs::new(Arc::new(ds), OracleConfig::new(1, Mode::Lr));
        let agg = AggregateSpec::count().with_condition(
            Predicate::AttrEq("category".into(), AttrValue::Text("a".into())),
            false, // post-filter
        );
        let cfg = quick_cfg(1, 2);
        let history = crate::lr_cell::History::new(unit_region());
        let measure = Measure::uniform();
        // Draw until a category-b tuple is sampled.
        for i in 0..50 {
            let mut rng = crate::substream(31, i);
            let out = estimate_once(&lbs, &agg, &cfg, &measure, &history, 1.0, &mut rng).unwrap();
            let SampleOutcome::Done(rec) = out else { continue };
            let c = &rec.contributions[0];
            let is_b = c.idx % 2 == 1;
            if is_b {
                assert_eq!(c.numerator, 0.0);
                assert_eq!(c.value, 0.0);
                assert!(c.p > 0.0, "probability must be unaffected by the filter");
                assert_eq!(rec.value, 0.0);
                return;
            }
        }
        panic!("no filtered-out tuple sampled in 50 draws");
    }

    #[test]
    fn sum_of_constant_weights_matches_count() {
        let mut tuples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        use rand::Rng;
        for i in 0..60 {
            let mut attrs = AttrMap::new();
            attrs.insert("w".into(), AttrValue::Num(2.5));
            tuples.push(SpatialTuple::new(
                format!("{i}"),
                Point2::raw(rng.gen(), rng.gen()),
                attrs,
            ));
        }
        let ds = Arc::new(Dataset::new(tuples, Some(unit_region())).unwrap());
        let cfg = quick_cfg(40, 77);
        let lbs_count = SimulatedLbs::new(ds.clone(), OracleConfig::new(1, Mode::Lr));
        let count = run_estimation(&lbs_count, &AggregateSpec::count(), &cfg, None).unwrap();
        let lbs_sum = SimulatedLbs::new(ds, OracleConfig::new(1, Mode::Lr));
        let sum = run_estimation(&lbs_sum, &AggregateSpec::sum("w"), &cfg, None).unwrap();
        assert!(
            ((sum.value - 2.5 * count.value) / sum.value).abs() < 1e-12,
            "sum {} vs 2.5 * count {}",
            sum.value,
            2.5 * count.value
        );
    }

    #[test]
    fn deterministic_given_seed_and_config() {
        let ds = Arc::new(weighted_dataset(80, 109));
        let cfg = quick_cfg(60, 5);
        let a = run_estimation(
            &SimulatedLbs::new(ds.clone(), OracleConfig::new(2, Mode::Lr)),
            &AggregateSpec::count(),
            &cfg,
            None,
        )
        .unwrap();
        let b = run_estimation(
            &SimulatedLbs::new(ds, OracleConfig::new(2, Mode::Lr)),
            &AggregateSpec::count(),
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.sample_variance, b.sample_variance);
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn empirical_unbiasedness_with_max_radius() {
        let ds = Arc::new(weighted_dataset(30, 113));
        let lbs = SimulatedLbs::new(
            ds,
            OracleConfig::new(1, Mode::Lr).with_max_radius(0.15),
        );
        let truth = lbs.ground_truth().aggregate(&AggregateSpec::count()).unwrap();
        let cfg = EstimatorConfig {
            seed: 17,
            samples: 20_000,
            per_sample_cap: Some(2_000),
            ..EstimatorConfig::default()
        };
        let est = run_estimation(&lbs, &AggregateSpec::count(), &cfg, None).unwrap();
        assert!(est.discarded_samples == 0);
        let se = (est.sample_variance / est.samples as f64).sqrt();
        assert!(
            (est.value - truth).abs() <= 4.0 * se,
            "mean {} vs truth {truth} (4se {})",
            est.value,
            4.0 * se
        );
    }

    #[test]
    fn reported_variance_consistent_with_pooled() {
        let ds = Arc::new(weighted_dataset(50, 127));
        let mut reported = Vec::new();
        let mut all_values: Vec<f64> = Vec::new();
        for rep in 0..25u64 {
            let lbs = SimulatedLbs::new(ds.clone(), OracleConfig::new(1, Mode::Lr));
            let cfg = quick_cfg(200, 1000 + rep);
            let history = crate::lr_cell::History::new(ds.region());
            let measure = Measure::uniform();
            let mut recs = Vec::new();
            for i in 0..cfg.samples {
                let mut rng = crate::substream(cfg.seed, i);
                match estimate_once(
                    &lbs,
                    &AggregateSpec::count(),
                    &cfg,
                    &measure,
                    &history,
                    ds.region().area(),
                    &mut rng,
                )
                .unwrap()
                {
                    SampleOutcome::Done(r) => recs.push(r),
                    _ => panic!("unexpected outcome"),
                }
            }
            let est = summarize(&AggregateSpec::count(), &recs, 0, false, 0).unwrap();
            reported.push(est.sample_variance);
            all_values.extend(recs.iter().map(|r| r.value));
        }
        let mean_reported = reported.iter().sum::<f64>() / reported.len() as f64;
        let n = all_values.len() as f64;
        let mean = all_values.iter().sum::<f64>() / n;
        let pooled = all_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(
            (mean_reported - pooled).abs() / pooled < 0.2,
            "reported {mean_reported} vs pooled {pooled}"
        );
    }

    #[test]
    fn avg_is_ratio_of_sum_and_count() {
        let ds = Arc::new(weighted_dataset(60, 131));
        let cfg = quick_cfg(150, 3);
        let lbs = SimulatedLbs::new(ds.clone(), OracleConfig::new(1, Mode::Lr));
        let avg = run_estimation(&lbs, &AggregateSpec::avg("weight"), &cfg, None).unwrap();
        assert!(avg.ratio_estimator);
        let lbs1 = SimulatedLbs::new(ds.clone(), OracleConfig::new(1, Mode::Lr));
        let sum = run_estimation(&lbs1, &AggregateSpec::sum("weight"), &cfg, None).unwrap();
        let lbs2 = SimulatedLbs::new(ds.clone(), OracleConfig::new(1, Mode::Lr));
        let count = run_estimation(&lbs2, &AggregateSpec::count(), &cfg, None).unwrap();
        assert!(
            (avg.value - sum.value / count.value).abs() < 1e-12,
            "avg {} vs sum/count {}",
            avg.value,
            sum.value / count.value
        );
        // Sanity: in the right ballpark of the true mean weight.
        let truth = lbs.ground_truth().aggregate(&AggregateSpec::avg("weight")).unwrap();
        assert!((avg.value - truth).abs() < 0.2, "avg {} vs truth {truth}", avg.value);
    }

    #[test]
    fn budget_exhaustion_yields_partial_estimate() {
        let ds = Arc::new(weighted_dataset(40, 137));
        let lbs = SimulatedLbs::new(
            ds,
            OracleConfig::new(1, Mode::Lr).with_budget(200),
        );
        let cfg = quick_cfg(10_000, 4);
        let est = run_estimation(&lbs, &AggregateSpec::count(), &cfg, None).unwrap();
        assert!(est.partial);
        assert!(est.samples > 0);
        assert!(est.queries <= 200);
    }

    #[test]
    fn zero_budget_reports_no_samples() {
        let ds = Arc::new(weighted_dataset(10, 139));
        let lbs = SimulatedLbs::new(ds, OracleConfig::new(1, Mode::Lr).with_budget(0));
        let cfg = quick_cfg(10, 5);
        assert!(matches!(
            run_estimation(&lbs, &AggregateSpec::count(), &cfg, None),
            Err(EstimatorError::NoSamples)
        ));
    }

    #[test]
    fn adaptive_h_unbiased_for_any_threshold() {
        // Unbiasedness must hold for every h policy; exercise three
        // thresholds on a k=3 interface and compare against truth.
        let ds = Arc::new(weighted_dataset(40, 149));
        let truth = 40.0;
        for (i, lambda0) in [f64::INFINITY, 0.05, 0.0].iter().enumerate() {
            let lbs = SimulatedLbs::new(ds.clone(), OracleConfig::new(3, Mode::Lr));
            let cfg = EstimatorConfig {
                seed: 60 + i as u64,
                samples: 4_000,
                adaptive_h: true,
                lambda0: Some(*lambda0),
                ..EstimatorConfig::default()
            };
            let est = run_estimation(&lbs, &AggregateSpec::count(), &cfg, None).unwrap();
            let se = (est.sample_variance / est.samples as f64).sqrt();
            assert!(
                (est.value - truth).abs() <= 4.0 * se,
                "lambda0 {lambda0}: mean {} vs {truth} (se {se})",
                est.value
            );
        }
    }

    #[test]
    fn lnr_estimation_close_to_truth() {
        let ds = Arc::new(weighted_dataset(25, 151));
        let lbs = SimulatedLbs::new(ds, OracleConfig::new(1, Mode::Lnr));
        let truth = 25.0;
        let cfg = EstimatorConfig {
            seed: 21,
            samples: 2_000,
            lnr_epsilon_frac: 1e-3,
            per_sample_cap: Some(2_000),
            ..EstimatorConfig::default()
        };
        let est = run_estimation(&lbs, &AggregateSpec::count(), &cfg, None).unwrap();
        let se = (est.sample_variance / est.samples as f64).sqrt();
        // Bias is bounded but nonzero; allow bound + noise.
        let dists: Vec<f64> = (0..25)
            .map(|i| lbs.ground_truth().nearest_neighbor_dist(i))
            .collect();
        let eps = BinarySearchParams::from_epsilon(1e-3, lbs.region())
            .unwrap()
            .max_edge_error();
        let bound = crate::lnr_cell::bias_bound(&dists, eps).unwrap();
        assert!(
            (est.value - truth).abs() <= bound + 4.0 * se,
            "mean {} vs truth {truth}, bias bound {bound}, se {se}",
            est.value
        );
    }
}

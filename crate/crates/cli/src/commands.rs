use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use knn_agg::estimator::{
    run_estimation, AggregateEstimate, DensityGrid, EstimatorConfig,
};
use knn_agg::geometry::{Point2, Rect};
use knn_agg::lnr_cell::{self, BinarySearchParams};
use knn_agg::lr_cell::{self, History, LrOptions};
use knn_agg::oracle::{gen, Dataset, Mode, OracleConfig, QueryLedger, SimulatedLbs};
use knn_agg::substream;

use crate::config::RunConfig;
use crate::{BenchmarkArgs, CommonArgs, GenDataArgs};

/// Error carrying the exit-code class: configuration/data problems exit
/// with 2, internal failures with 1.
pub struct CmdError {
    pub source: anyhow::Error,
    pub is_config: bool,
}

impl CmdError {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self { source: e.into(), is_config: true }
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        Self { source: e.into(), is_config: false }
    }
}

/// Ok(true) means the run finished partially (budget exhausted): exit 3.
pub type CmdResult = Result<bool, CmdError>;

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn emit_report<T: Serialize>(report: &T, out: Option<&Path>) -> Result<(), CmdError> {
    let text = serde_json::to_string_pretty(report).map_err(CmdError::internal)?;
    match out {
        Some(path) => std::fs::write(path, text.as_bytes()).map_err(CmdError::internal)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_density(cfg: &RunConfig) -> Result<Option<DensityGrid>, CmdError> {
    match &cfg.density {
        None => Ok(None),
        Some(path) => DensityGrid::from_csv_path(Path::new(path))
            .map(Some)
            .map_err(CmdError::config),
    }
}

#[derive(Serialize)]
struct LedgerBlock {
    issued: u64,
    init: u64,
    vertex_test: u64,
    binary_search: u64,
    mc_trial: u64,
}

impl From<QueryLedger> for LedgerBlock {
    fn from(l: QueryLedger) -> Self {
        Self {
            issued: l.issued,
            init: l.init,
            vertex_test: l.vertex_test,
            binary_search: l.binary_search,
            mc_trial: l.mc_trial,
        }
    }
}

#[derive(Serialize)]
struct GroundTruthBlock {
    value: f64,
    relative_error: f64,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    command: &'static str,
    config: &'a RunConfig,
    estimate: AggregateEstimate,
    repetitions: Vec<AggregateEstimate>,
    ledger: LedgerBlock,
    ground_truth: Option<GroundTruthBlock>,
    timestamp: u64,
}

pub fn estimate(cfg: &RunConfig, args: &CommonArgs) -> CmdResult {
    if cfg.budget == Some(0) {
        return Err(CmdError::config(anyhow!("budget 0 cannot answer any query")));
    }
    let dataset = Arc::new(cfg.load_dataset().map_err(CmdError::config)?);
    let oracle_cfg = cfg.oracle_config().map_err(CmdError::config)?;
    let agg = cfg.aggregate().map_err(CmdError::config)?;
    let density = load_density(cfg)?;
    let est_cfg = cfg.estimator_config();

    // Repetitions run in parallel on independent oracles and histories; the
    // reduce below is deterministic in repetition order.
    let reps: Vec<Result<(AggregateEstimate, QueryLedger), (bool, String)>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let lbs = SimulatedLbs::new(dataset.clone(), oracle_cfg.clone());
            let cfg_rep = EstimatorConfig { seed: est_cfg.seed.wrapping_add(rep), ..est_cfg.clone() };
            run_estimation(&lbs, &agg, &cfg_rep, density.as_ref())
                .map(|e| (e, lbs.ledger()))
                .map_err(|e| {
                    let cfgish = matches!(e, knn_agg::estimator::EstimatorError::BadDensity(_));
                    (cfgish, e.to_string())
                })
        })
        .collect();
    let mut estimates = Vec::new();
    let mut ledger = QueryLedger::default();
    for r in reps {
        let (e, l) = r.map_err(|(cfgish, m)| {
            if cfgish {
                CmdError::config(anyhow!(m))
            } else {
                CmdError::internal(anyhow!(m))
            }
        })?;
        ledger.add(&l);
        estimates.push(e);
    }
    let partial = estimates.iter().any(|e| e.partial);
    let mean_value = estimates.iter().map(|e| e.value).sum::<f64>() / estimates.len() as f64;
    let summary = AggregateEstimate {
        value: mean_value,
        ..estimates[0].clone()
    };
    let ground_truth = if args.ground_truth {
        let lbs = SimulatedLbs::new(dataset.clone(), oracle_cfg.clone());
        let truth = lbs
            .ground_truth()
            .aggregate(&agg)
            .map_err(CmdError::config)?;
        Some(GroundTruthBlock {
            value: truth,
            relative_error: if truth != 0.0 {
                (mean_value - truth).abs() / truth.abs()
            } else {
                f64::NAN
            },
        })
    } else {
        None
    };
    let report = EstimateReport {
        command: "estimate",
        config: cfg,
        estimate: summary,
        repetitions: estimates,
        ledger: ledger.into(),
        ground_truth,
        timestamp: timestamp(),
    };
    emit_report(&report, args.out.as_deref())?;
    Ok(partial)
}

#[derive(Serialize)]
struct CellCheck {
    id: String,
    h: usize,
    computed_area: f64,
    truth_area: f64,
    area_rel_error: f64,
    max_vertex_deviation: Option<f64>,
    volume_ratio: Option<f64>,
    corollary_lower_bound: Option<f64>,
    queries: u64,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    command: &'static str,
    config: &'a RunConfig,
    mode: String,
    tuples_checked: usize,
    max_vertex_deviation: f64,
    max_area_rel_error: f64,
    total_queries: u64,
    all_within_tolerance: bool,
    cells: Vec<CellCheck>,
    ledger: LedgerBlock,
    timestamp: u64,
}

pub fn verify_cell(cfg: &RunConfig, args: &CommonArgs, tuple_id: &str, h: usize) -> CmdResult {
    let dataset = Arc::new(cfg.load_dataset().map_err(CmdError::config)?);
    let oracle_cfg = cfg.oracle_config().map_err(CmdError::config)?;
    if h < 1 || h > oracle_cfg.k {
        return Err(CmdError::config(anyhow!("h must lie in [1, k]")));
    }
    let lbs = SimulatedLbs::new(dataset.clone(), oracle_cfg.clone());
    let indices: Vec<usize> = if tuple_id == "all" {
        (0..dataset.len()).collect()
    } else {
        vec![dataset
            .index_of(tuple_id)
            .ok_or_else(|| CmdError::config(anyhow!("unknown tuple `{tuple_id}`")))?]
    };
    let history = History::new(dataset.region());
    let opts = LrOptions {
        fast_init: cfg.fast_init,
        use_history: cfg.history,
        mc_shortcut: false,
        ..LrOptions::default()
    };
    let mut cells = Vec::new();
    let mut max_dev: f64 = 0.0;
    let mut max_area_err: f64 = 0.0;
    let mut ok = true;
    for (seq, idx) in indices.iter().copied().enumerate() {
        let t = &dataset.tuples()[idx];
        let truth = lbs
            .ground_truth()
            .cell_by_index(idx, h, None)
            .map_err(CmdError::internal)?;
        let check = match oracle_cfg.mode {
            Mode::Lr => {
                let mut rng = substream(cfg.seed, seq as u64);
                let est = lr_cell::compute_cell_exact(
                    &lbs, None, idx, t.loc, h, &history, &opts, &mut rng,
                )
                .map_err(|e| CmdError::internal(anyhow!("tuple {idx}: {e}")))?;
                let dev = vertex_deviation(&est.upper.boundary_vertices(), &truth.boundary_vertices());
                let area_err =
                    (est.volume - truth.total_area()).abs() / truth.total_area().max(1e-300);
                max_dev = max_dev.max(dev);
                max_area_err = max_area_err.max(area_err);
                ok &= est.exact && dev <= 1e-9 && area_err <= 1e-9;
                CellCheck {
                    id: t.id.to_string(),
                    h,
                    computed_area: est.volume,
                    truth_area: truth.total_area(),
                    area_rel_error: area_err,
                    max_vertex_deviation: Some(dev),
                    volume_ratio: None,
                    corollary_lower_bound: None,
                    queries: est.queries.issued,
                }
            }
            Mode::Lnr => {
                let region = dataset.region();
                let params = BinarySearchParams::from_epsilon(
                    cfg.epsilon_frac * region.width(),
                    region,
                )
                .map_err(CmdError::config)?;
                let res = lnr_cell::compute_cell_lnr_h(&lbs, None, t.loc, idx, h, &params, None)
                    .map_err(|e| CmdError::internal(anyhow!("tuple {idx}: {e}")))?;
                let ratio = res.volume() / truth.total_area().max(1e-300);
                let d = lbs.ground_truth().nearest_neighbor_dist(idx);
                let eps = params.max_edge_error();
                let bound = if eps < d { ((d - eps) / d).powi(2) } else { 0.0 };
                let area_err = (res.volume() - truth.total_area()).abs()
                    / truth.total_area().max(1e-300);
                max_area_err = max_area_err.max(area_err);
                ok &= ratio >= bound - 1e-9;
                CellCheck {
                    id: t.id.to_string(),
                    h,
                    computed_area: res.volume(),
                    truth_area: truth.total_area(),
                    area_rel_error: area_err,
                    max_vertex_deviation: None,
                    volume_ratio: Some(ratio),
                    corollary_lower_bound: Some(bound),
                    queries: res.queries.issued,
                }
            }
        };
        cells.push(check);
    }
    let ledger = lbs.ledger();
    let report = VerifyReport {
        command: "verify-cell",
        config: cfg,
        mode: cfg.mode.clone(),
        tuples_checked: cells.len(),
        max_vertex_deviation: max_dev,
        max_area_rel_error: max_area_err,
        total_queries: ledger.issued,
        all_within_tolerance: ok,
        cells,
        ledger: ledger.into(),
        timestamp: timestamp(),
    };
    emit_report(&report, args.out.as_deref())?;
    Ok(false)
}

fn vertex_deviation(a: &[Point2], b: &[Point2]) -> f64 {
    let one_way = |xs: &[Point2], ys: &[Point2]| {
        xs.iter()
            .map(|x| {
                ys.iter()
                    .map(|y| x.dist(*y))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

#[derive(Serialize)]
struct LocateRecord {
    id: String,
    error: Option<f64>,
    searches: u64,
    queries: u64,
    failed: bool,
}

#[derive(Serialize)]
struct LocateReport<'a> {
    command: &'static str,
    config: &'a RunConfig,
    tuples_attempted: usize,
    localized: usize,
    median_error: Option<f64>,
    p90_error: Option<f64>,
    max_error: Option<f64>,
    mean_extra_searches: f64,
    near_feature: Option<NearFeatureBlock>,
    records: Vec<LocateRecord>,
    ledger: LedgerBlock,
    timestamp: u64,
}

#[derive(Serialize)]
struct NearFeatureBlock {
    x: f64,
    y: f64,
    dist: f64,
    inferred_within: usize,
    truth_within: usize,
}

pub fn locate(cfg: &RunConfig, args: &CommonArgs, count: usize, near: Option<&str>) -> CmdResult {
    let dataset = Arc::new(cfg.load_dataset().map_err(CmdError::config)?);
    let oracle_cfg = cfg.oracle_config().map_err(CmdError::config)?;
    if oracle_cfg.mode != Mode::Lnr {
        return Err(CmdError::config(anyhow!("locate requires mode=lnr")));
    }
    let near_spec = near
        .map(|s| -> anyhow::Result<(f64, f64, f64)> {
            let p: Vec<f64> = s
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .context("near must be x,y,dist")?;
            if p.len() != 3 {
                bail!("near must be x,y,dist");
            }
            Ok((p[0], p[1], p[2]))
        })
        .transpose()
        .map_err(CmdError::config)?;
    let lbs = SimulatedLbs::new(dataset.clone(), oracle_cfg);
    let region = dataset.region();
    let params = BinarySearchParams::from_epsilon(cfg.epsilon_frac * region.width(), region)
        .map_err(CmdError::config)?;
    // Seed-deterministic tuple choice.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = substream(cfg.seed, 0x10c);
        order.shuffle(&mut rng);
    }
    order.truncate(count.min(dataset.len()));
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut searches_sum = 0u64;
    let mut within_inferred = 0usize;
    let mut within_truth = 0usize;
    let mut budget_out = false;
    for idx in order {
        let t = &dataset.tuples()[idx];
        let cell = match lnr_cell::compute_cell_lnr_h(&lbs, None, t.loc, idx, 1, &params, None) {
            Ok(c) if !c.budget_exhausted => c,
            Ok(_) => {
                budget_out = true;
                break;
            }
            Err(lnr_cell::LnrError::Oracle(knn_agg::oracle::OracleError::BudgetExhausted)) => {
                budget_out = true;
                break;
            }
            Err(e) => return Err(CmdError::internal(anyhow!("tuple {idx}: {e}"))),
        };
        match lnr_cell::infer_position(&lbs, None, &cell, &params, None) {
            Ok((pos, led, searches)) => {
                let err = pos.dist(t.loc);
                errors.push(err);
                searches_sum += searches;
                if let Some((fx, fy, fd)) = near_spec {
                    let f = Point2::new(fx, fy).map_err(CmdError::config)?;
                    if pos.dist(f) <= fd {
                        within_inferred += 1;
                    }
                    if t.loc.dist(f) <= fd {
                        within_truth += 1;
                    }
                }
                records.push(LocateRecord {
                    id: t.id.to_string(),
                    error: Some(err),
                    searches,
                    queries: led.issued + cell.queries.issued,
                    failed: false,
                });
            }
            Err(
                lnr_cell::LnrError::InsufficientVertices | lnr_cell::LnrError::NearParallel,
            ) => {
                records.push(LocateRecord {
                    id: t.id.to_string(),
                    error: None,
                    searches: 0,
                    queries: cell.queries.issued,
                    failed: true,
                });
            }
            Err(lnr_cell::LnrError::Oracle(knn_agg::oracle::OracleError::BudgetExhausted)) => {
                budget_out = true;
                break;
            }
            Err(e) => return Err(CmdError::internal(anyhow!("tuple {idx}: {e}"))),
        }
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quant = |q: f64| -> Option<f64> {
        if errors.is_empty() {
            None
        } else {
            Some(errors[((errors.len() - 1) as f64 * q).round() as usize])
        }
    };
    let ledger = lbs.ledger();
    let report = LocateReport {
        command: "locate",
        config: cfg,
        tuples_attempted: records.len(),
        localized: errors.len(),
        median_error: quant(0.5),
        p90_error: quant(0.9),
        max_error: quant(1.0),
        mean_extra_searches: if errors.is_empty() {
            0.0
        } else {
            searches_sum as f64 / errors.len() as f64
        },
        near_feature: near_spec.map(|(x, y, dist)| NearFeatureBlock {
            x,
            y,
            dist,
            inferred_within: within_inferred,
            truth_within: within_truth,
        }),
        records,
        ledger: ledger.into(),
        timestamp: timestamp(),
    };
    emit_report(&report, args.out.as_deref())?;
    Ok(budget_out)
}

/// Benchmark variants: cumulative optimization ablation plus a weighted
/// sampling row.
fn variants() -> Vec<(&'static str, LrOptions, bool, bool)> {
    // (name, lr options, adaptive_h, weighted)
    vec![
        ("lr-agg-0", LrOptions::baseline(), false, false),
        (
            "lr-agg-1:fast-init",
            LrOptions { fast_init: true, ..LrOptions::baseline() },
            false,
            false,
        ),
        (
            "lr-agg-2:+history",
            LrOptions { fast_init: true, use_history: true, ..LrOptions::baseline() },
            false,
            false,
        ),
        (
            "lr-agg-3:+adaptive-h",
            LrOptions { fast_init: true, use_history: true, ..LrOptions::baseline() },
            true,
            false,
        ),
        ("lr-agg-4:+mc", LrOptions::default(), true, false),
        ("lr-agg-4:+weighted", LrOptions::default(), true, true),
    ]
}

pub fn benchmark(cfg: &RunConfig, args: &BenchmarkArgs) -> CmdResult {
    let agg = cfg.aggregate().map_err(CmdError::config)?;
    let base_spec = cfg
        .generate
        .clone()
        .unwrap_or_else(|| "clusters:400:5:0.05".to_string());
    let mut out: Box<dyn Write> = match &args.common.out {
        Some(path) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(args.append)
                .write(true)
                .truncate(!args.append)
                .open(path)
                .map_err(CmdError::internal)?;
            Box::new(file)
        }
        None => Box::new(std::io::stdout()),
    };
    let runs = args.runs.max(1);
    let mut wrote_header = args.append
        && args
            .common
            .out
            .as_ref()
            .map(|p| p.exists() && std::fs::metadata(p).map(|m| m.len() > 0).unwrap_or(false))
            .unwrap_or(false);
    if !wrote_header {
        writeln!(
            out,
            "variant,n,k,runs,budget,samples_mean,queries_mean,rel_error_mean,sample_variance_mean,discarded_mean"
        )
        .map_err(CmdError::internal)?;
        wrote_header = true;
    }
    let _ = wrote_header;
    for &n in &args.n_sweep {
        let spec = override_gen_size(&base_spec, n).map_err(CmdError::config)?;
        let dataset = Arc::new(
            gen::from_spec(&spec, cfg.seed).map_err(CmdError::config)?,
        );
        let density = density_from_dataset(&dataset, 16);
        let lbs_truth = SimulatedLbs::new(dataset.clone(), OracleConfig::new(1, Mode::Lr));
        let truth = lbs_truth
            .ground_truth()
            .aggregate(&agg)
            .map_err(CmdError::config)?;
        for &k in &args.k_sweep {
            for (name, lr, adaptive, weighted) in variants() {
                if adaptive && k == 1 && name.contains("adaptive") {
                    continue;
                }
                let rows: Vec<(f64, f64, f64, f64, f64)> = (0..runs)
                    .into_par_iter()
                    .map(|rep| {
                        let mut oc = OracleConfig::new(k, Mode::Lr);
                        if let Some(b) = cfg.budget {
                            oc = oc.with_budget(b);
                        }
                        if let Some(d) = cfg.dmax {
                            oc = oc.with_max_radius(d);
                        }
                        let lbs = SimulatedLbs::new(dataset.clone(), oc);
                        let ecfg = EstimatorConfig {
                            seed: cfg.seed.wrapping_add(1000).wrapping_add(rep),
                            samples: cfg.samples,
                            per_sample_cap: cfg.per_sample_cap,
                            lr: lr.clone(),
                            adaptive_h: adaptive && k > 1,
                            lambda0: cfg.lambda0,
                            lnr_epsilon_frac: cfg.epsilon_frac,
                            lnr_h: cfg.lnr_h,
                        };
                        let dens = if weighted { Some(&density) } else { None };
                        match run_estimation(&lbs, &agg, &ecfg, dens) {
                            Ok(e) => (
                                e.samples as f64,
                                lbs.ledger().issued as f64,
                                if truth != 0.0 {
                                    (e.value - truth).abs() / truth.abs()
                                } else {
                                    f64::NAN
                                },
                                e.sample_variance,
                                e.discarded_samples as f64,
                            ),
                            Err(_) => (0.0, lbs.ledger().issued as f64, f64::NAN, f64::NAN, 0.0),
                        }
                    })
                    .collect();
                let m = rows.len() as f64;
                let mean = |f: &dyn Fn(&(f64, f64, f64, f64, f64)) -> f64| {
                    rows.iter().map(f).sum::<f64>() / m
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{:.3},{:.3},{:.6},{:.6},{:.3}",
                    name,
                    dataset.len(),
                    k,
                    runs,
                    cfg.budget.map(|b| b.to_string()).unwrap_or_default(),
                    mean(&|r| r.0),
                    mean(&|r| r.1),
                    mean(&|r| r.2),
                    mean(&|r| r.3),
                    mean(&|r| r.4),
                )
                .map_err(CmdError::internal)?;
            }
        }
    }
    Ok(false)
}

fn override_gen_size(spec: &str, n: usize) -> anyhow::Result<String> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["uniform", _] => Ok(format!("uniform:{n}")),
        ["clusters", _, c, s] => Ok(format!("clusters:{n}:{c}:{s}")),
        ["circle", _] => Ok(format!("circle:{n}")),
        _ => bail!("cannot size-sweep generator `{spec}`"),
    }
}

/// Histogram density over the data: the desk-scale stand-in for external
/// population-density knowledge.
fn density_from_dataset(ds: &Dataset, grid: usize) -> DensityGrid {
    let region = ds.region();
    let mut weights = vec![0.5f64; grid * grid];
    for t in ds.tuples() {
        let cx = (((t.loc.x - region.x0) / region.width() * grid as f64).floor() as usize)
            .min(grid - 1);
        let cy = (((t.loc.y - region.y0) / region.height() * grid as f64).floor() as usize)
            .min(grid - 1);
        weights[cy * grid + cx] += 1.0;
    }
    DensityGrid::new(region, grid, grid, weights).expect("histogram density is valid")
}

pub fn gen_data(args: &GenDataArgs) -> CmdResult {
    let ds = gen::from_spec(&args.kind, args.seed).map_err(CmdError::config)?;
    ds.to_csv_path(&args.out).map_err(CmdError::internal)?;
    if let Some(dpath) = &args.density_out {
        let grid = density_from_dataset(&ds, args.density_grid.max(1));
        std::fs::write(dpath, grid.to_csv_string()).map_err(CmdError::internal)?;
    }
    eprintln!(
        "wrote {} tuples to {} (region {:?})",
        ds.len(),
        args.out.display(),
        RectView(ds.region())
    );
    Ok(false)
}

struct RectView(Rect);

impl std::fmt::Debug for RectView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}, {}] x [{}, {}]",
            self.0.x0, self.0.x1, self.0.y0, self.0.y1
        )
    }
}

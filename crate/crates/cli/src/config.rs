use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use knn_agg::estimator::{AggregateSpec, EstimatorConfig, Predicate};
use knn_agg::geometry::Rect;
use knn_agg::lr_cell::LrOptions;
use knn_agg::oracle::{AggregateKind, Dataset, Mode, OracleConfig};

/// Effective run configuration: a flat key=value file overridden by CLI
/// flags. Echoed verbatim into every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub dataset: Option<String>,
    pub generate: Option<String>,
    pub mode: String,
    pub k: usize,
    pub agg: String,
    pub condition: Option<String>,
    pub pass_through: bool,
    pub budget: Option<u64>,
    pub dmax: Option<f64>,
    pub samples: u64,
    pub seed: u64,
    pub repetitions: u64,
    pub density: Option<String>,
    pub lambda0: Option<f64>,
    pub adaptive_h: bool,
    pub fast_init: bool,
    pub history: bool,
    pub mc: bool,
    pub epsilon_frac: f64,
    pub lnr_h: usize,
    pub per_sample_cap: Option<u64>,
    pub fast_init_halfwidth_frac: f64,
    pub region: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            generate: None,
            mode: "lr".into(),
            k: 1,
            agg: "count".into(),
            condition: None,
            pass_through: false,
            budget: None,
            dmax: None,
            samples: 100,
            seed: 0,
            repetitions: 1,
            density: None,
            lambda0: None,
            adaptive_h: false,
            fast_init: true,
            history: true,
            mc: true,
            epsilon_frac: 1e-3,
            lnr_h: 1,
            per_sample_cap: Some(500),
            fast_init_halfwidth_frac: 0.05,
            region: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => bail!("bad boolean for `{key}`: `{v}`"),
    }
}

impl RunConfig {
    /// Parse a flat `key=value` file ('#' starts a comment).
    pub fn load_file(path: &Path) -> Result<BTreeMap<String, String>> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected key=value, got `{line}`", no + 1);
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(value.into()),
            "generate" => self.generate = Some(value.into()),
            "mode" => self.mode = value.to_lowercase(),
            "k" => self.k = value.parse().context("k")?,
            "agg" => self.agg = value.into(),
            "where" | "condition" => self.condition = Some(value.into()),
            "pass_through" => self.pass_through = parse_bool(key, value)?,
            "budget" => self.budget = Some(value.parse().context("budget")?),
            "dmax" => self.dmax = Some(value.parse().context("dmax")?),
            "samples" => self.samples = value.parse().context("samples")?,
            "seed" => self.seed = value.parse().context("seed")?,
            "repetitions" | "runs" => self.repetitions = value.parse().context("repetitions")?,
            "density" => self.density = Some(value.into()),
            "lambda0" => self.lambda0 = Some(value.parse().context("lambda0")?),
            "adaptive_h" => self.adaptive_h = parse_bool(key, value)?,
            "fast_init" => self.fast_init = parse_bool(key, value)?,
            "history" => self.history = parse_bool(key, value)?,
            "mc" => self.mc = parse_bool(key, value)?,
            "epsilon_frac" => self.epsilon_frac = value.parse().context("epsilon_frac")?,
            "lnr_h" => self.lnr_h = value.parse().context("lnr_h")?,
            "per_sample_cap" => {
                self.per_sample_cap = if value == "none" {
                    None
                } else {
                    Some(value.parse().context("per_sample_cap")?)
                }
            }
            "fast_init_halfwidth_frac" => {
                self.fast_init_halfwidth_frac = value.parse().context("halfwidth")?
            }
            "region" => self.region = Some(value.into()),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        match self.mode.as_str() {
            "lr" => Ok(Mode::Lr),
            "lnr" => Ok(Mode::Lnr),
            other => bail!("mode must be lr or lnr, got `{other}`"),
        }
    }

    pub fn region(&self) -> Result<Option<Rect>> {
        match &self.region {
            None => Ok(None),
            Some(s) => {
                let parts: Vec<f64> = s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| format!("bad region `{s}`"))?;
                if parts.len() != 4 {
                    bail!("region must be x0,y0,x1,y1");
                }
                Ok(Some(Rect::new(parts[0], parts[1], parts[2], parts[3])?))
            }
        }
    }

    /// `count`, `sum:attr` or `avg:attr`, plus the optional condition.
    pub fn aggregate(&self) -> Result<AggregateSpec> {
        let mut spec = match self.agg.split_once(':') {
            None if self.agg == "count" => AggregateSpec::count(),
            Some(("sum", attr)) => AggregateSpec::sum(attr),
            Some(("avg", attr)) => AggregateSpec::avg(attr),
            _ => bail!("agg must be count, sum:<attr> or avg:<attr>, got `{}`", self.agg),
        };
        if let Some(cond) = &self.condition {
            let pred = Predicate::parse(cond).map_err(anyhow::Error::msg)?;
            spec = spec.with_condition(pred, self.pass_through);
        }
        if matches!(spec.kind, AggregateKind::Sum | AggregateKind::Avg) && spec.attr.is_none() {
            bail!("sum/avg need an attribute");
        }
        Ok(spec)
    }

    pub fn oracle_config(&self) -> Result<OracleConfig> {
        if self.k < 1 {
            bail!("k must be >= 1");
        }
        let mut cfg = OracleConfig::new(self.k, self.mode()?);
        if let Some(d) = self.dmax {
            if d <= 0.0 {
                bail!("dmax must be positive");
            }
            cfg = cfg.with_max_radius(d);
        }
        if let Some(b) = self.budget {
            cfg = cfg.with_budget(b);
        }
        Ok(cfg)
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            seed: self.seed,
            samples: self.samples,
            per_sample_cap: self.per_sample_cap,
            lr: LrOptions {
                fast_init: self.fast_init,
                use_history: self.history,
                mc_shortcut: self.mc,
                fast_init_halfwidth_frac: self.fast_init_halfwidth_frac,
                ..LrOptions::default()
            },
            adaptive_h: self.adaptive_h,
            lambda0: self.lambda0,
            lnr_epsilon_frac: self.epsilon_frac,
            lnr_h: self.lnr_h,
        }
    }

    /// Load the dataset named by the config (a CSV path or a generator
    /// spec).
    pub fn load_dataset(&self) -> Result<Dataset> {
        let region = self.region()?;
        match (&self.dataset, &self.generate) {
            (Some(path), None) => {
                Dataset::from_csv_path(&PathBuf::from(path), region)
                    .with_context(|| format!("loading dataset {path}"))
            }
            (None, Some(spec)) => {
                knn_agg::oracle::gen::from_spec(spec, self.seed).context("generating dataset")
            }
            (Some(_), Some(_)) => bail!("give either dataset= or generate=, not both"),
            (None, None) => bail!("no dataset: set dataset=<csv> or generate=<spec>"),
        }
    }
}

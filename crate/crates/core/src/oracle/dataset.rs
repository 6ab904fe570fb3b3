use std::collections::{BTreeMap, HashSet};
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, Rect, GEOM_EPS};

pub type AttrMap = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttrValue {
    Num(f64),
    Text(String),
}

impl AttrValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            AttrValue::Num(v) => Some(*v),
            AttrValue::Text(_) => None,
        }
    }

    fn parse(raw: &str) -> AttrValue {
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => AttrValue::Num(v),
            _ => AttrValue::Text(raw.to_string()),
        }
    }

    fn render(&self) -> String {
        match self {
            AttrValue::Num(v) => format!("{v}"),
            AttrValue::Text(s) => s.clone(),
        }
    }
}

/// One database point: opaque id, location, attribute map.
#[derive(Debug, Clone)]
pub struct SpatialTuple {
    pub id: Arc<str>,
    pub loc: Point2,
    pub attrs: Arc<AttrMap>,
}

impl SpatialTuple {
    pub fn new(id: impl Into<String>, loc: Point2, attrs: AttrMap) -> Self {
        Self {
            id: Arc::from(id.into()),
            loc,
            attrs: Arc::new(attrs),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset is empty")]
    Empty,
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {0}: bad coordinate `{1}`")]
    BadCoordinate(usize, String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("tuples {0} and {1} share a location within tolerance")]
    DuplicateLocation(String, String),
    #[error("tuple `{0}` lies outside the bounding region")]
    OutOfRegion(String),
    #[error("bad region: {0}")]
    BadRegion(String),
}

/// Immutable tuple store plus its bounding region. All query interfaces and
/// ground-truth evaluations are built on top of one of these.
#[derive(Debug, Clone)]
pub struct Dataset {
    tuples: Vec<SpatialTuple>,
    region: Rect,
}

impl Dataset {
    /// Build a dataset, inferring the region as the data bounding box
    /// inflated by 1% when none is given. Ids must be unique and locations
    /// pairwise distinct within the geometric tolerance.
    pub fn new(tuples: Vec<SpatialTuple>, region: Option<Rect>) -> Result<Self, DataError> {
        if tuples.is_empty() {
            return Err(DataError::Empty);
        }
        let region = match region {
            Some(r) => r,
            None => inferred_region(&tuples),
        };
        let mut ids = HashSet::new();
        for t in &tuples {
            if !ids.insert(t.id.clone()) {
                return Err(DataError::DuplicateId(t.id.to_string()));
            }
            if !region.contains(t.loc) {
                return Err(DataError::OutOfRegion(t.id.to_string()));
            }
        }
        // Near-coincident locations break general positioning; reject at
        // load. Sweep in x order: tolerance-scale neighbors stay adjacent.
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        order.sort_by(|&a, &b| {
            (tuples[a].loc.x, tuples[a].loc.y)
                .partial_cmp(&(tuples[b].loc.x, tuples[b].loc.y))
                .unwrap()
        });
        for w in order.windows(2) {
            let (a, b) = (&tuples[w[0]], &tuples[w[1]]);
            if a.loc.dist(b.loc) <= GEOM_EPS {
                return Err(DataError::DuplicateLocation(a.id.to_string(), b.id.to_string()));
            }
        }
        Ok(Self { tuples, region })
    }

    pub fn tuples(&self) -> &[SpatialTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn region(&self) -> Rect {
        self.region
    }

    pub fn locations(&self) -> Vec<Point2> {
        self.tuples.iter().map(|t| t.loc).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tuples.iter().position(|t| &*t.id == id)
    }

    /// Load from CSV with header `id,x,y[,attr...]`. Numeric attribute
    /// values parse as decimals, anything else as text; empty fields are
    /// omitted from the tuple's attribute map.
    pub fn from_csv_path(path: &Path, region: Option<Rect>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, region)
    }

    pub fn from_csv_reader<R: io::Read>(reader: R, region: Option<Rect>) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.to_string())
            .collect();
        let col = |name: &str| -> Result<usize, DataError> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let (id_col, x_col, y_col) = (col("id")?, col("x")?, col("y")?);
        let mut tuples = Vec::new();
        for (rowno, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| rec.get(c).unwrap_or("");
            let x: f64 = get(x_col)
                .parse()
                .map_err(|_| DataError::BadCoordinate(rowno + 2, get(x_col).to_string()))?;
            let y: f64 = get(y_col)
                .parse()
                .map_err(|_| DataError::BadCoordinate(rowno + 2, get(y_col).to_string()))?;
            let loc = Point2::new(x, y)
                .map_err(|_| DataError::BadCoordinate(rowno + 2, format!("({x}, {y})")))?;
            let mut attrs = AttrMap::new();
            for (c, name) in headers.iter().enumerate() {
                if c == id_col || c == x_col || c == y_col {
                    continue;
                }
                let raw = get(c);
                if !raw.is_empty() {
                    attrs.insert(name.clone(), AttrValue::parse(raw));
                }
            }
            tuples.push(SpatialTuple::new(get(id_col), loc, attrs));
        }
        Self::new(tuples, region)
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.to_csv_writer(file)
    }

    pub fn to_csv_writer<W: io::Write>(&self, writer: W) -> Result<(), DataError> {
        let mut attr_names: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for t in &self.tuples {
            for k in t.attrs.keys() {
                if seen.insert(k.clone()) {
                    attr_names.push(k.clone());
                }
            }
        }
        attr_names.sort();
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "x".to_string(), "y".to_string()];
        header.extend(attr_names.iter().cloned());
        wtr.write_record(&header)?;
        for t in &self.tuples {
            let mut row = vec![t.id.to_string(), format!("{}", t.loc.x), format!("{}", t.loc.y)];
            for name in &attr_names {
                row.push(t.attrs.get(name).map(AttrValue::render).unwrap_or_default());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn inferred_region(tuples: &[SpatialTuple]) -> Rect {
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for t in tuples {
        x0 = x0.min(t.loc.x);
        y0 = y0.min(t.loc.y);
        x1 = x1.max(t.loc.x);
        y1 = y1.max(t.loc.y);
    }
    let pad_x = ((x1 - x0) * 0.01).max(GEOM_EPS * 10.0);
    let pad_y = ((y1 - y0) * 0.01).max(GEOM_EPS * 10.0);
    Rect::new(x0 - pad_x, y0 - pad_y, x1 + pad_x, y1 + pad_y)
        .expect("inflated bounding box is non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuple(id: &str, x: f64, y: f64) -> SpatialTuple {
        SpatialTuple::new(id, Point2::new(x, y).unwrap(), AttrMap::new())
    }

    #[test]
    fn csv_round_trip() {
        let csv_text = "id,x,y,weight,category\n0,0.1,0.2,1.5,a\n1,0.8,0.9,2,b\n2,0.5,0.5,,c\n";
        let ds = Dataset::from_csv_reader(csv_text.as_bytes(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(
            ds.tuples()[0].attrs.get("weight"),
            Some(&AttrValue::Num(1.5))
        );
        assert_eq!(
            ds.tuples()[2].attrs.get("category"),
            Some(&AttrValue::Text("c".into()))
        );
        assert!(ds.tuples()[2].attrs.get("weight").is_none());
        let mut buf = Vec::new();
        ds.to_csv_writer(&mut buf).unwrap();
        let ds2 = Dataset::from_csv_reader(buf.as_slice(), Some(ds.region())).unwrap();
        assert_eq!(ds2.len(), 3);
        assert_eq!(ds2.tuples()[1].loc, ds.tuples()[1].loc);
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = Dataset::new(vec![tuple("a", 0.0, 0.0), tuple("a", 1.0, 1.0)], None);
        assert!(matches!(err, Err(DataError::DuplicateId(_))));
    }

    #[test]
    fn near_duplicate_location_rejected() {
        let err = Dataset::new(
            vec![tuple("a", 0.5, 0.5), tuple("b", 0.5, 0.5 + 1e-12), tuple("c", 0.9, 0.1)],
            Some(Rect::new(0.0, 0.0, 1.0, 1.0).unwrap()),
        );
        assert!(matches!(err, Err(DataError::DuplicateLocation(_, _))));
    }

    #[test]
    fn region_inferred_with_inflation() {
        let ds = Dataset::new(vec![tuple("a", 0.0, 0.0), tuple("b", 1.0, 2.0)], None).unwrap();
        let r = ds.region();
        assert!(r.x0 < 0.0 && r.x1 > 1.0 && r.y0 < 0.0 && r.y1 > 2.0);
        assert!((r.width() - 1.02).abs() < 1e-9);
    }
}

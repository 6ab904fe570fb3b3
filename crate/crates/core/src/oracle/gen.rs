//! Seed-deterministic synthetic dataset generators: desk-scale stand-ins
//! for real point-of-interest corpora.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AttrMap, AttrValue, DataError, Dataset, SpatialTuple};
use crate::geometry::{Point2, Rect};
use crate::substream;

fn standard_attrs(rng: &mut ChaCha8Rng, i: usize) -> AttrMap {
    let mut attrs = AttrMap::new();
    attrs.insert("weight".into(), AttrValue::Num(rng.gen_range(0.5..1.5)));
    attrs.insert(
        "category".into(),
        AttrValue::Text(["a", "b", "c"][i % 3].into()),
    );
    attrs
}

/// Uniform points over the unit square.
pub fn uniform(n: usize, seed: u64) -> Dataset {
    let region = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut rng = substream(seed, 0xD5);
    let tuples = (0..n)
        .map(|i| {
            let loc = Point2::raw(rng.gen(), rng.gen());
            let attrs = standard_attrs(&mut rng, i);
            SpatialTuple::new(format!("{i}"), loc, attrs)
        })
        .collect();
    Dataset::new(tuples, Some(region)).expect("generated dataset is valid")
}

/// Gaussian clusters inside the unit square (rejection-resampled to stay in
/// the region). Returns the dataset together with the cluster centers so
/// benchmarks can build a matched density grid.
pub fn gaussian_clusters(
    n: usize,
    clusters: usize,
    sigma: f64,
    seed: u64,
) -> (Dataset, Vec<Point2>) {
    assert!(clusters >= 1);
    let region = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut rng = substream(seed, 0xC1);
    let centers: Vec<Point2> = (0..clusters)
        .map(|_| Point2::raw(rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)))
        .collect();
    let mut tuples = Vec::with_capacity(n);
    for i in 0..n {
        let c = centers[i % clusters];
        let loc = loop {
            let (dx, dy) = gauss_pair(&mut rng);
            let p = Point2::raw(c.x + sigma * dx, c.y + sigma * dy);
            if p.x > 0.0 && p.x < 1.0 && p.y > 0.0 && p.y < 1.0 {
                break p;
            }
        };
        let attrs = standard_attrs(&mut rng, i);
        tuples.push(SpatialTuple::new(format!("{i}"), loc, attrs));
    }
    (
        Dataset::new(tuples, Some(region)).expect("generated dataset is valid"),
        centers,
    )
}

/// Worst-case layout for cell discovery: one tuple at the center and n-1
/// equally spaced on a circle around it, so the center cell has n-1 edges.
pub fn circle(n: usize, seed: u64) -> Dataset {
    assert!(n >= 4);
    let region = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let mut rng = substream(seed, 0xC2);
    let mut tuples = vec![SpatialTuple::new(
        "center",
        Point2::raw(0.5, 0.5),
        standard_attrs(&mut rng, 0),
    )];
    let m = n - 1;
    let r = 0.35;
    for i in 0..m {
        let a = i as f64 / m as f64 * std::f64::consts::TAU;
        let loc = Point2::raw(0.5 + r * a.cos(), 0.5 + r * a.sin());
        tuples.push(SpatialTuple::new(
            format!("ring{i}"),
            loc,
            standard_attrs(&mut rng, i + 1),
        ));
    }
    Dataset::new(tuples, Some(region)).expect("generated dataset is valid")
}

/// Box-Muller transform.
fn gauss_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let a = std::f64::consts::TAU * u2;
    (r * a.cos(), r * a.sin())
}

/// Convenience loader for a generator spec string used by the CLI:
/// `uniform:<n>`, `clusters:<n>:<clusters>:<sigma>` or `circle:<n>`.
pub fn from_spec(spec: &str, seed: u64) -> Result<Dataset, DataError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let parse_n = |s: &str| -> Result<usize, DataError> {
        s.parse()
            .map_err(|_| DataError::BadRegion(format!("bad generator count `{s}`")))
    };
    match parts.as_slice() {
        ["uniform", n] => Ok(uniform(parse_n(n)?, seed)),
        ["clusters", n, c, sigma] => {
            let sigma: f64 = sigma
                .parse()
                .map_err(|_| DataError::BadRegion(format!("bad sigma `{sigma}`")))?;
            Ok(gaussian_clusters(parse_n(n)?, parse_n(c)?, sigma, seed).0)
        }
        ["circle", n] => Ok(circle(parse_n(n)?, seed)),
        _ => Err(DataError::BadRegion(format!("unknown generator spec `{spec}`"))),
    }
}

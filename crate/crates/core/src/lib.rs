//! Aggregate estimation (COUNT/SUM/AVG, with optional selection conditions)
//! over a hidden 2-D point database reachable only through a restricted
//! top-k nearest-neighbor query interface.
//!
//! The crate is organized around the query interface taxonomy:
//!
//! * [`geometry`] — exact 2-D primitives: half-planes, convex clipping,
//!   bisector arrangements for top-k cells, disk coverage.
//! * [`oracle`] — the simulated restricted kNN interface over an in-memory
//!   dataset, with query accounting and a privileged ground-truth back door
//!   for verification.
//! * [`lr_cell`] — when answers carry tuple locations: exact (top-h) cell
//!   reconstruction with vertex-test termination, fast initialization,
//!   history reuse, adaptive h selection and a Monte Carlo shortcut.
//! * [`lnr_cell`] — when answers carry ranks only: binary-search edge
//!   discovery, cell assembly with controllable edge error, concavity
//!   repair for top-k cells, and tuple position inference.
//! * [`estimator`] — query-location samplers, inclusion probabilities, and
//!   the per-sample/per-run estimators with variance and confidence
//!   intervals.

pub mod estimator;
pub mod geometry;
pub mod lnr_cell;
pub mod lr_cell;
pub mod oracle;

/// Derive an independent, reproducible random stream for a (seed, index)
/// pair. Parallel and serial runs that draw per-index streams see identical
/// randomness.
pub fn substream(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    rand_chacha::ChaCha8Rng::seed_from_u64(z)
}

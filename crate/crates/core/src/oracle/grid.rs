use crate::geometry::{Point2, Rect};

/// Uniform bucket grid over the bounding region. Query latency is not the
/// metric this crate optimizes (query count is), but simulated oracles are
/// called tens of millions of times in tests, so nearest-neighbor lookups
/// must not scan the whole dataset.
#[derive(Debug, Clone)]
pub struct PointGrid {
    rect: Rect,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl PointGrid {
    pub fn build(points: &[Point2], rect: Rect) -> Self {
        let n = points.len().max(1);
        let side = (n as f64).sqrt().ceil() as usize;
        let mut grid = Self::with_resolution(rect, side.max(1), side.max(1));
        for (i, p) in points.iter().enumerate() {
            grid.insert(i as u32, *p);
        }
        grid
    }

    pub fn with_resolution(rect: Rect, nx: usize, ny: usize) -> Self {
        Self {
            rect,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        }
    }

    pub fn insert(&mut self, idx: u32, p: Point2) {
        let (cx, cy) = self.cell_of(p);
        self.cells[cy * self.nx + cx].push(idx);
    }

    fn cell_of(&self, p: Point2) -> (usize, usize) {
        let fx = (p.x - self.rect.x0) / self.rect.width() * self.nx as f64;
        let fy = (p.y - self.rect.y0) / self.rect.height() * self.ny as f64;
        let cx = (fx.floor() as isize).clamp(0, self.nx as isize - 1) as usize;
        let cy = (fy.floor() as isize).clamp(0, self.ny as isize - 1) as usize;
        (cx, cy)
    }

    /// Minimum possible distance from `p` to any point in ring `r` around
    /// the cell containing `p` (ring 0 is the cell itself).
    fn ring_min_dist(&self, p: Point2, r: usize) -> f64 {
        if r == 0 {
            return 0.0;
        }
        let w = self.rect.width() / self.nx as f64;
        let h = self.rect.height() / self.ny as f64;
        let (cx, cy) = self.cell_of(p);
        // Distance from p to the near boundary of the ring, conservatively
        // the smaller of per-axis gaps.
        let dx = ((cx as f64 + 1.0 - r as f64) * w + self.rect.x0 - p.x)
            .max(p.x - ((cx as f64 + r as f64) * w + self.rect.x0))
            .max(0.0);
        let dy = ((cy as f64 + 1.0 - r as f64) * h + self.rect.y0 - p.y)
            .max(p.y - ((cy as f64 + r as f64) * h + self.rect.y0))
            .max(0.0);
        dx.max(dy)
    }

    /// Indices of the k nearest accepted points, ordered by (distance, index)
    /// ascending. Ties on distance break by ascending index, matching the
    /// brute-force reference scan exactly.
    pub fn knn<F: Fn(u32) -> bool>(
        &self,
        q: Point2,
        k: usize,
        points: &[Point2],
        accept: F,
    ) -> Vec<(u32, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let (cx, cy) = self.cell_of(q);
        let max_ring = self.nx.max(self.ny);
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        for r in 0..=max_ring {
            if best.len() == k {
                let worst = best.last().unwrap().0.sqrt();
                if self.ring_min_dist(q, r) > worst {
                    break;
                }
            }
            self.for_ring(cx, cy, r, |idx| {
                if !accept(idx) {
                    return;
                }
                let d2 = points[idx as usize].dist_sq(q);
                let key = (d2, idx);
                let pos = best.partition_point(|&(bd, bi)| (bd, bi) < key);
                if pos < k {
                    best.insert(pos, key);
                    if best.len() > k {
                        best.pop();
                    }
                }
            });
        }
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    /// Visit every stored index whose cell lies on ring `r`.
    fn for_ring<F: FnMut(u32)>(&self, cx: usize, cy: usize, r: usize, mut f: F) {
        let (cx, cy, r) = (cx as isize, cy as isize, r as isize);
        let visit = |x: isize, y: isize, f: &mut F| {
            if x >= 0 && y >= 0 && (x as usize) < self.nx && (y as usize) < self.ny {
                for &idx in &self.cells[y as usize * self.nx + x as usize] {
                    f(idx);
                }
            }
        };
        if r == 0 {
            visit(cx, cy, &mut f);
            return;
        }
        for x in (cx - r)..=(cx + r) {
            visit(x, cy - r, &mut f);
            visit(x, cy + r, &mut f);
        }
        for y in (cy - r + 1)..=(cy + r - 1) {
            visit(cx - r, y, &mut f);
            visit(cx + r, y, &mut f);
        }
    }

    /// All stored indices within `radius` of `p` (unordered).
    pub fn within_radius(&self, p: Point2, radius: f64, points: &[Point2]) -> Vec<u32> {
        let mut out = Vec::new();
        let max_ring = self.nx.max(self.ny);
        for r in 0..=max_ring {
            if self.ring_min_dist(p, r) > radius {
                break;
            }
            self.for_ring(self.cell_of(p).0, self.cell_of(p).1, r, |idx| {
                if points[idx as usize].dist(p) <= radius {
                    out.push(idx);
                }
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rect = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let points: Vec<Point2> = (0..500)
            .map(|_| Point2::raw(rng.gen(), rng.gen()))
            .collect();
        let grid = PointGrid::build(&points, rect);
        for _ in 0..200 {
            let q = Point2::raw(rng.gen(), rng.gen());
            let k = rng.gen_range(1..8);
            let got = grid.knn(q, k, &points, |_| true);
            let mut brute: Vec<(f64, u32)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| (p.dist_sq(q), i as u32))
                .collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (g, b) in got.iter().zip(brute.iter().take(k)) {
                assert_eq!(g.0, b.1);
            }
            assert_eq!(got.len(), k.min(points.len()));
        }
    }

    #[test]
    fn knn_respects_filter() {
        let rect = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let points = vec![
            Point2::raw(0.1, 0.1),
            Point2::raw(0.2, 0.2),
            Point2::raw(0.9, 0.9),
        ];
        let grid = PointGrid::build(&points, rect);
        let got = grid.knn(Point2::raw(0.0, 0.0), 2, &points, |i| i != 0);
        assert_eq!(got[0].0, 1);
        assert_eq!(got[1].0, 2);
    }
}

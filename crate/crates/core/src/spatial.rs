//! Uniform-grid hashing of 3-D points for radius queries.

use std::collections::HashMap;

use crate::numerics::Vec3;

type Key = (i64, i64, i64);

pub(crate) struct SpatialHash {
    cell: f64,
    cells: HashMap<Key, Vec<u32>>,
}

impl SpatialHash {
    pub(crate) fn new(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<Key, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, cells }
    }

    /// Calls `f` for every stored index whose cell intersects the cube of
    /// half-width `radius` around `p`. Callers do their own exact distance
    /// test. Visit order is deterministic.
    pub(crate) fn for_each_candidate(&self, p: &Vec3, radius: f64, mut f: impl FnMut(u32)) {
        let lo = key(&(p - Vec3::repeat(radius)), self.cell);
        let hi = key(&(p + Vec3::repeat(radius)), self.cell);
        for x in lo.0..=hi.0 {
            for y in lo.1..=hi.1 {
                for z in lo.2..=hi.2 {
                    if let Some(ids) = self.cells.get(&(x, y, z)) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    pub(crate) fn within(&self, points: &[Vec3], p: &Vec3, radius: f64) -> Vec<u32> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.for_each_candidate(p, radius, |i| {
            if (points[i as usize] - p).norm_squared() <= r2 {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }
}

fn key(p: &Vec3, cell: f64) -> Key {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
}

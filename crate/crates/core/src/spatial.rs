//! Uniform-grid spatial index with ellipsoid, ball and k-nearest queries,
//! plus farthest point sampling and capped neighborhood subsampling.
//!
//! All membership tests are strict (`< 1` for ellipsoids, `< r` for balls).
//! Range queries return ids in ascending order; kNN returns ids by ascending
//! distance with ties broken by id.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Axis-aligned ellipsoid with semi-axis `k·r` along `major_axis` and `r`
/// along the other two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipsoidQuery {
    pub center: Point3,
    pub r: f64,
    pub k: f64,
    pub major_axis: Axis,
}

impl EllipsoidQuery {
    pub fn new(center: Point3, r: f64, k: f64, major_axis: Axis) -> Result<Self> {
        if !(r > 0.0) || !(k > 1.0) {
            return Err(Error::Parameter(format!(
                "ellipsoid needs r > 0 and k > 1, got r={r}, k={k}"
            )));
        }
        Ok(Self {
            center,
            r,
            k,
            major_axis,
        })
    }

    pub fn semi_axes(&self) -> [f64; 3] {
        let mut a = [self.r; 3];
        a[self.major_axis.index()] = self.k * self.r;
        a
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let a = self.semi_axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (d[0] * d[0]) / (a[0] * a[0]) + (d[1] * d[1]) / (a[1] * a[1]) + (d[2] * d[2]) / (a[2] * a[2]) < 1.0
    }
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

type CellKey = [i64; 3];

/// Uniform bucket grid over a fixed set of positions.
#[derive(Clone, Debug)]
pub struct GridIndex {
    cell_size: f64,
    origin: Point3,
    buckets: HashMap<CellKey, Vec<u32>>,
    items: Vec<Point3>,
    min_cell: CellKey,
    max_cell: CellKey,
}

// Cell ranges are widened by this fraction of a cell so rounding in the
// key computation can never drop a candidate; the exact test decides.
const CELL_SLACK: f64 = 1e-9;

impl GridIndex {
    pub fn build(positions: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Parameter(format!("cell_size must be positive, got {cell_size}")));
        }
        let mut origin = [0.0; 3];
        if let Some(first) = positions.first() {
            origin = *first;
            for p in positions {
                for a in 0..3 {
                    origin[a] = origin[a].min(p[a]);
                }
            }
        }
        let mut idx = Self {
            cell_size,
            origin,
            buckets: HashMap::new(),
            items: positions.to_vec(),
            min_cell: [i64::MAX; 3],
            max_cell: [i64::MIN; 3],
        };
        for (i, p) in positions.iter().enumerate() {
            let key = idx.key(p);
            for a in 0..3 {
                idx.min_cell[a] = idx.min_cell[a].min(key[a]);
                idx.max_cell[a] = idx.max_cell[a].max(key[a]);
            }
            idx.buckets.entry(key).or_default().push(i as u32);
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn positions(&self) -> &[Point3] {
        &self.items
    }

    fn coord(&self, v: f64, axis: usize) -> f64 {
        (v - self.origin[axis]) / self.cell_size
    }

    fn key(&self, p: &Point3) -> CellKey {
        [0, 1, 2].map(|a| self.coord(p[a], a).floor() as i64)
    }

    /// Cell range covering `[lo, hi]` per axis, clipped to occupied cells.
    fn cell_range(&self, lo: Point3, hi: Point3) -> Option<(CellKey, CellKey)> {
        if self.items.is_empty() {
            return None;
        }
        let mut a0 = [0; 3];
        let mut a1 = [0; 3];
        for a in 0..3 {
            let l = (self.coord(lo[a], a) - CELL_SLACK).floor() as i64;
            let h = (self.coord(hi[a], a) + CELL_SLACK).floor() as i64;
            a0[a] = l.max(self.min_cell[a]);
            a1[a] = h.min(self.max_cell[a]);
            if a0[a] > a1[a] {
                return None;
            }
        }
        Some((a0, a1))
    }

    fn for_each_in_box(&self, lo: Point3, hi: Point3, mut f: impl FnMut(u32)) {
        let Some((a0, a1)) = self.cell_range(lo, hi) else { return };
        let cells = (a1[0] - a0[0] + 1) * (a1[1] - a0[1] + 1) * (a1[2] - a0[2] + 1);
        if cells as usize > self.buckets.len() {
            for (key, ids) in &self.buckets {
                if (0..3).all(|a| key[a] >= a0[a] && key[a] <= a1[a]) {
                    ids.iter().for_each(|&i| f(i));
                }
            }
            return;
        }
        for x in a0[0]..=a1[0] {
            for y in a0[1]..=a1[1] {
                for z in a0[2]..=a1[2] {
                    if let Some(ids) = self.buckets.get(&[x, y, z]) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    pub fn query_ellipsoid(&self, q: &EllipsoidQuery) -> Vec<usize> {
        let a = q.semi_axes();
        let lo = [0, 1, 2].map(|i| q.center[i] - a[i]);
        let hi = [0, 1, 2].map(|i| q.center[i] + a[i]);
        let mut out = Vec::new();
        self.for_each_in_box(lo, hi, |i| {
            if q.contains(&self.items[i as usize]) {
                out.push(i as usize);
            }
        });
        out.sort_unstable();
        out
    }

    pub fn query_ball(&self, center: Point3, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let lo = center.map(|c| c - radius);
        let hi = center.map(|c| c + radius);
        let mut out = Vec::new();
        self.for_each_in_box(lo, hi, |i| {
            if dist2(&self.items[i as usize], &center) < r2 {
                out.push(i as usize);
            }
        });
        out.sort_unstable();
        out
    }

    /// The `min(k, n)` nearest ids, by ascending distance then id.
    pub fn knn(&self, center: Point3, k: usize) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::Parameter("knn needs k >= 1".into()));
        }
        let k = k.min(self.items.len());
        let cc = self.key(&center);
        let mut found: Vec<(f64, u32)> = Vec::new();
        let mut shell = 0i64;
        loop {
            self.visit_shell(cc, shell, |i| {
                found.push((dist2(&self.items[i as usize], &center), i));
            });
            // Everything within `covered` of the center has been visited.
            let mut covered = f64::INFINITY;
            let mut exhausted = true;
            for a in 0..3 {
                let lo = self.origin[a] + (cc[a] - shell) as f64 * self.cell_size;
                let hi = self.origin[a] + (cc[a] + shell + 1) as f64 * self.cell_size;
                covered = covered.min(center[a] - lo).min(hi - center[a]);
                if cc[a] - shell > self.min_cell[a] || cc[a] + shell < self.max_cell[a] {
                    exhausted = false;
                }
            }
            covered -= CELL_SLACK * self.cell_size;
            if exhausted {
                break;
            }
            if found.len() >= k && covered > 0.0 {
                found.sort_unstable_by(cmp_candidate);
                if found[k - 1].0 < covered * covered {
                    break;
                }
            }
            shell += 1;
        }
        found.sort_unstable_by(cmp_candidate);
        Ok(found[..k].iter().map(|&(_, i)| i as usize).collect())
    }

    fn visit_shell(&self, cc: CellKey, s: i64, mut f: impl FnMut(u32)) {
        let a0 = [0, 1, 2].map(|a| (cc[a] - s).max(self.min_cell[a]));
        let a1 = [0, 1, 2].map(|a| (cc[a] + s).min(self.max_cell[a]));
        if (0..3).any(|a| a0[a] > a1[a]) {
            return;
        }
        for x in a0[0]..=a1[0] {
            for y in a0[1]..=a1[1] {
                for z in a0[2]..=a1[2] {
                    let cheb = (x - cc[0]).abs().max((y - cc[1]).abs()).max((z - cc[2]).abs());
                    if cheb != s {
                        continue;
                    }
                    if let Some(ids) = self.buckets.get(&[x, y, z]) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }
}

fn cmp_candidate(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn lex_cmp(a: &Point3, b: &Point3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Greedy max-min sampling. The first pick is drawn from `rng`.
pub fn farthest_point_sampling<R: Rng + ?Sized>(
    positions: &[Point3],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m > positions.len() {
        return Err(Error::Parameter(format!(
            "cannot sample {m} of {} points",
            positions.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let first = rng.gen_range(0..positions.len());
    farthest_point_sampling_from(positions, m, first)
}

/// Greedy max-min sampling from a fixed first pick. Ties in the max-min
/// distance go to the lexicographically smallest position, so the selected
/// set does not depend on input order.
pub fn farthest_point_sampling_from(positions: &[Point3], m: usize, first: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m > n {
        return Err(Error::Parameter(format!("cannot sample {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if first >= n {
        return Err(Error::Index { index: first, len: n });
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut mind = vec![f64::INFINITY; n];
    let mut cur = first;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == m {
            break;
        }
        let cp = positions[cur];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&positions[i], &cp);
            if d < mind[i] {
                mind[i] = d;
            }
            best = match best {
                None => Some(i),
                Some(b) => match mind[i].total_cmp(&mind[b]) {
                    Ordering::Greater => Some(i),
                    Ordering::Equal if lex_cmp(&positions[i], &positions[b]) == Ordering::Less => Some(i),
                    _ => Some(b),
                },
            };
        }
        cur = best.expect("m <= n leaves an untaken point");
    }
    Ok(chosen)
}

/// Uniform sample of at most `cap` ids without replacement, ascending.
pub fn subsample_capped<R: Rng + ?Sized>(ids: &[usize], cap: usize, rng: &mut R) -> Vec<usize> {
    if ids.len() <= cap {
        return ids.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, ids.len(), cap)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    picked.sort_unstable();
    picked
}

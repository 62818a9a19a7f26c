//! Procedural indoor scenes, camera raycasting, flipped TSDF, and the
//! on-disk SSCB record format.
//!
//! A scene is an axis-aligned room (floor, ceiling, four walls) furnished
//! with labeled boxes. Kinds come from marching camera rays through the
//! labeled grid: the first nonempty voxel on a ray is observed surface, the
//! empty voxels before it are visible empty, and everything no ray reaches
//! is occluded.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{class, Dims, TsdfVolume, VoxelKind, EMPTY, NUM_CLASSES};

pub type DatasetRecord = TsdfVolume;

/// Default truncation distance in voxels.
pub const DEFAULT_TRUNCATION: f64 = 3.0;

/// Axis-aligned block of voxels, `min` inclusive and `max` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoxelBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl VoxelBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Self {
        Self { min, max }
    }

    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.max[a].saturating_sub(self.min[a])).product()
    }

    pub fn overlaps(&self, o: &VoxelBox) -> bool {
        (0..3).all(|a| self.min[a] < o.max[a] && o.min[a] < self.max[a])
    }

    fn cells(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (self.min[0]..self.max[0]).flat_map(move |x| {
            (self.min[1]..self.max[1]).flat_map(move |y| (self.min[2]..self.max[2]).map(move |z| [x, y, z]))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Furniture {
    pub class: u8,
    pub bounds: VoxelBox,
}

/// Which wall a rectangular opening sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wall {
    XMin,
    XMax,
    ZMin,
    ZMax,
}

/// Window or door cut into a wall; labeled as the window class. `along` is
/// the horizontal range on the wall (z for x-walls, x for z-walls).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Opening {
    pub wall: Wall,
    pub along: (usize, usize),
    pub height: (usize, usize),
}

/// Pinhole camera in voxel units (voxel `i` spans `[i, i+1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub hfov_deg: f64,
    pub vfov_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub dims: Dims,
    pub wall_thickness: usize,
    pub furniture: Vec<Furniture>,
    pub openings: Vec<Opening>,
    pub camera: Camera,
    pub seed: u64,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl SceneSpec {
    /// An unfurnished room with the camera in a corner looking at the far corner.
    pub fn empty_room(dims: Dims) -> Self {
        let t = 1;
        let position = [t as f64 + 0.5, dims.h as f64 * 0.6, t as f64 + 0.5];
        let target = [dims.w as f64 - 1.5, dims.h as f64 * 0.3, dims.d as f64 - 1.5];
        Self {
            dims,
            wall_thickness: t,
            furniture: Vec::new(),
            openings: Vec::new(),
            camera: Camera {
                position,
                forward: normalize([0, 1, 2].map(|a| target[a] - position[a])),
                hfov_deg: 100.0,
                vfov_deg: 80.0,
            },
            seed: 0,
        }
    }

    fn interior(&self) -> VoxelBox {
        let t = self.wall_thickness;
        let d = self.dims;
        VoxelBox::new(
            [t, t, t],
            [d.w.saturating_sub(t), d.h.saturating_sub(t), d.d.saturating_sub(t)],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let inner = self.interior();
        if (0..3).any(|a| inner.min[a] >= inner.max[a]) {
            return Err(Error::Spec(format!(
                "room {} has no interior with wall thickness {}",
                self.dims, self.wall_thickness
            )));
        }
        for f in &self.furniture {
            let b = f.bounds;
            if (0..3).any(|a| b.min[a] < inner.min[a] || b.max[a] > inner.max[a] || b.min[a] >= b.max[a]) {
                return Err(Error::Spec(format!("box {b:?} outside room interior {inner:?}")));
            }
            if f.class == EMPTY || f.class as usize > NUM_CLASSES {
                return Err(Error::Spec(format!("furniture class {} invalid", f.class)));
            }
        }
        for o in &self.openings {
            let (limit_along, limit_h) = match o.wall {
                Wall::XMin | Wall::XMax => (self.dims.d, self.dims.h),
                Wall::ZMin | Wall::ZMax => (self.dims.w, self.dims.h),
            };
            if o.along.0 >= o.along.1 || o.along.1 > limit_along || o.height.0 >= o.height.1 || o.height.1 > limit_h {
                return Err(Error::Spec(format!("opening {o:?} outside wall")));
            }
        }
        let p = self.camera.position;
        let inside = (0..3).all(|a| p[a] >= inner.min[a] as f64 && p[a] < inner.max[a] as f64);
        if !inside {
            return Err(Error::Spec(format!("camera {p:?} outside room interior")));
        }
        let cell = p.map(|v| v.floor() as usize);
        if self.furniture.iter().any(|f| {
            (0..3).all(|a| cell[a] >= f.bounds.min[a] && cell[a] < f.bounds.max[a])
        }) {
            return Err(Error::Spec("camera inside furniture".into()));
        }
        if !(self.camera.hfov_deg > 0.0 && self.camera.hfov_deg < 180.0 && self.camera.vfov_deg > 0.0 && self.camera.vfov_deg < 180.0) {
            return Err(Error::Spec("camera field of view must be in (0, 180)".into()));
        }
        Ok(())
    }

    /// Random furnished room. Deterministic in `(dims, seed)`.
    pub fn random(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::empty_room(dims);
        spec.seed = seed;
        let inner = spec.interior();
        if (0..3).any(|a| inner.max[a] < inner.min[a] + 6) {
            return spec;
        }
        let (w, h, d) = (dims.w, dims.h, dims.d);
        let sx = |v: f64| ((v * w as f64 / 30.0).round() as usize).max(1);
        let sy = |v: f64| ((v * h as f64 / 18.0).round() as usize).max(1);
        let sz = |v: f64| ((v * d as f64 / 30.0).round() as usize).max(1);

        // Camera in a random corner, looking toward the opposite corner.
        let corner = rng.gen_range(0..4);
        let (cx, tx) = if corner & 1 == 0 {
            (inner.min[0] as f64 + 0.5, inner.max[0] as f64 - 1.0)
        } else {
            (inner.max[0] as f64 - 0.5, inner.min[0] as f64 + 1.0)
        };
        let (cz, tz) = if corner & 2 == 0 {
            (inner.min[2] as f64 + 0.5, inner.max[2] as f64 - 1.0)
        } else {
            (inner.max[2] as f64 - 0.5, inner.min[2] as f64 + 1.0)
        };
        let cy = h as f64 * rng.gen_range(0.5..0.65);
        let ty = h as f64 * rng.gen_range(0.2..0.35);
        spec.camera.position = [cx, cy, cz];
        spec.camera.forward = normalize([tx - cx, ty - cy, tz - cz]);
        let cam_cell = [cx.floor() as usize, cz.floor() as usize];
        let reserve = sx(4.0).max(2);
        let keepout = VoxelBox::new(
            [cam_cell[0].saturating_sub(reserve), 0, cam_cell[1].saturating_sub(reserve)],
            [cam_cell[0] + reserve + 1, h, cam_cell[1] + reserve + 1],
        );

        let mut placed: Vec<VoxelBox> = vec![keepout];
        let mut furniture = Vec::new();
        let floor = inner.min[1];
        let try_place = |rng: &mut ChaCha8Rng,
                             parts: &dyn Fn(usize, usize) -> Vec<Furniture>,
                             fx: usize,
                             fz: usize,
                             against_wall: bool,
                             placed: &mut Vec<VoxelBox>,
                             furniture: &mut Vec<Furniture>|
         -> Option<VoxelBox> {
            for _ in 0..40 {
                let (fx, fz) = if rng.gen_bool(0.5) { (fx, fz) } else { (fz, fx) };
                if fx + 2 > inner.max[0] - inner.min[0] || fz + 2 > inner.max[2] - inner.min[2] {
                    continue;
                }
                let mut x0 = rng.gen_range(inner.min[0]..=inner.max[0] - fx);
                let mut z0 = rng.gen_range(inner.min[2]..=inner.max[2] - fz);
                if against_wall {
                    match rng.gen_range(0..4) {
                        0 => x0 = inner.min[0],
                        1 => x0 = inner.max[0] - fx,
                        2 => z0 = inner.min[2],
                        _ => z0 = inner.max[2] - fz,
                    }
                }
                let ps = parts(x0, z0);
                let fits = ps.iter().all(|p| {
                    (0..3).all(|a| p.bounds.min[a] >= inner.min[a] && p.bounds.max[a] <= inner.max[a])
                        && !placed.iter().any(|q| q.overlaps(&p.bounds))
                });
                if !fits {
                    continue;
                }
                let mut hull = ps[0].bounds;
                for p in &ps {
                    for a in 0..3 {
                        hull.min[a] = hull.min[a].min(p.bounds.min[a]);
                        hull.max[a] = hull.max[a].max(p.bounds.max[a]);
                    }
                }
                placed.extend(ps.iter().map(|p| p.bounds));
                furniture.extend(ps);
                return Some(hull);
            }
            None
        };

        let mut kinds = vec!["bed", "sofa", "table", "chair", "chair", "furn", "objs"];
        kinds.shuffle(&mut rng);
        for kind in kinds {
            match kind {
                "bed" if rng.gen_bool(0.6) => {
                    let (bx, bz, bh) = (sx(9.0), sz(6.0), sy(3.0));
                    try_place(
                        &mut rng,
                        &|x0, z0| vec![Furniture { class: class::BED, bounds: VoxelBox::new([x0, floor, z0], [x0 + bx, floor + bh, z0 + bz]) }],
                        bx,
                        bz,
                        true,
                        &mut placed,
                        &mut furniture,
                    );
                }
                "sofa" if rng.gen_bool(0.6) => {
                    let (lx, dz) = (sx(7.0), sz(3.0));
                    let (seat, back) = (sy(2.0), sy(4.0));
                    try_place(
                        &mut rng,
                        &|x0, z0| {
                            vec![
                                Furniture { class: class::SOFA, bounds: VoxelBox::new([x0, floor, z0], [x0 + lx, floor + seat, z0 + dz]) },
                                Furniture { class: class::SOFA, bounds: VoxelBox::new([x0, floor + seat, z0], [x0 + lx, floor + back, z0 + 1]) },
                            ]
                        },
                        lx,
                        dz,
                        true,
                        &mut placed,
                        &mut furniture,
                    );
                }
                "table" if rng.gen_bool(0.8) => {
                    let (tx_, tz_, th) = (sx(6.0), sz(4.0), sy(4.0));
                    let hull = try_place(
                        &mut rng,
                        &|x0, z0| {
                            let top = floor + th;
                            let mut v = vec![Furniture { class: class::TABLE, bounds: VoxelBox::new([x0, top, z0], [x0 + tx_, top + 1, z0 + tz_]) }];
                            for (lx, lz) in [(x0, z0), (x0 + tx_ - 1, z0), (x0, z0 + tz_ - 1), (x0 + tx_ - 1, z0 + tz_ - 1)] {
                                v.push(Furniture { class: class::TABLE, bounds: VoxelBox::new([lx, floor, lz], [lx + 1, top, lz + 1]) });
                            }
                            v
                        },
                        tx_,
                        tz_,
                        false,
                        &mut placed,
                        &mut furniture,
                    );
                    if let Some(hull) = hull {
                        // Keep the space under the table free.
                        placed.push(VoxelBox::new(hull.min, [hull.max[0], hull.max[1], hull.max[2]]));
                        if rng.gen_bool(0.8) {
                            let top = hull.max[1];
                            let o = sx(2.0).min(hull.max[0] - hull.min[0]);
                            let oz = sz(2.0).min(hull.max[2] - hull.min[2]);
                            let ox = rng.gen_range(hull.min[0]..=hull.max[0] - o);
                            let ozz = rng.gen_range(hull.min[2]..=hull.max[2] - oz);
                            let b = VoxelBox::new([ox, top, ozz], [ox + o, (top + sy(2.0)).min(inner.max[1]), ozz + oz]);
                            if b.min[1] < b.max[1] && !placed.iter().any(|q| q.overlaps(&b)) {
                                placed.push(b);
                                furniture.push(Furniture { class: class::OBJS, bounds: b });
                            }
                        }
                    }
                }
                "chair" if rng.gen_bool(0.7) => {
                    let (cw, seat, back) = (sx(2.0).max(2), sy(2.0), sy(5.0));
                    try_place(
                        &mut rng,
                        &|x0, z0| {
                            vec![
                                Furniture { class: class::CHAIR, bounds: VoxelBox::new([x0, floor, z0], [x0 + cw, floor + seat, z0 + cw]) },
                                Furniture { class: class::CHAIR, bounds: VoxelBox::new([x0, floor + seat, z0], [x0 + cw, floor + back, z0 + 1]) },
                            ]
                        },
                        cw,
                        cw,
                        false,
                        &mut placed,
                        &mut furniture,
                    );
                }
                "furn" if rng.gen_bool(0.8) => {
                    let (fw, fd, fh) = (sx(5.0), sz(2.0), sy(8.0));
                    let hull = try_place(
                        &mut rng,
                        &|x0, z0| vec![Furniture { class: class::FURN, bounds: VoxelBox::new([x0, floor, z0], [x0 + fw, floor + fh, z0 + fd]) }],
                        fw,
                        fd,
                        true,
                        &mut placed,
                        &mut furniture,
                    );
                    if let Some(hull) = hull {
                        if rng.gen_bool(0.6) {
                            let top = hull.max[1];
                            let tvw = sx(3.0).min(hull.max[0] - hull.min[0]);
                            let tvd = sz(3.0).min(hull.max[2] - hull.min[2]);
                            let (ex, ez) = (hull.max[0] - hull.min[0], hull.max[2] - hull.min[2]);
                            let b = if ex >= ez {
                                VoxelBox::new([hull.min[0] + (ex - tvw) / 2, top, hull.min[2]], [hull.min[0] + (ex - tvw) / 2 + tvw, (top + sy(3.0)).min(inner.max[1]), hull.min[2] + 1])
                            } else {
                                VoxelBox::new([hull.min[0], top, hull.min[2] + (ez - tvd) / 2], [hull.min[0] + 1, (top + sy(3.0)).min(inner.max[1]), hull.min[2] + (ez - tvd) / 2 + tvd])
                            };
                            if b.min[1] < b.max[1] && !placed.iter().any(|q| q.overlaps(&b)) {
                                placed.push(b);
                                furniture.push(Furniture { class: class::TVS, bounds: b });
                            }
                        }
                    }
                }
                "objs" if rng.gen_bool(0.5) => {
                    let (o, oh) = (sx(2.0), sy(2.0));
                    try_place(
                        &mut rng,
                        &|x0, z0| vec![Furniture { class: class::OBJS, bounds: VoxelBox::new([x0, floor, z0], [x0 + o, floor + oh, z0 + o]) }],
                        o,
                        o,
                        false,
                        &mut placed,
                        &mut furniture,
                    );
                }
                _ => {}
            }
        }
        spec.furniture = furniture;

        let n_open = rng.gen_range(1..=2);
        let walls = [Wall::XMin, Wall::XMax, Wall::ZMin, Wall::ZMax];
        for _ in 0..n_open {
            let wall = walls[rng.gen_range(0..4)];
            let span = match wall {
                Wall::XMin | Wall::XMax => d,
                Wall::ZMin | Wall::ZMax => w,
            };
            let door = rng.gen_bool(0.3);
            let width = if door { sx(4.0) } else { sx(6.0) };
            if width + 4 > span {
                continue;
            }
            let a0 = rng.gen_range(2..=span - 2 - width);
            let height = if door {
                (floor, (floor + sy(10.0)).min(h - 1))
            } else {
                (sy(6.0), (sy(6.0) + sy(5.0)).min(h - 1))
            };
            if height.0 < height.1 {
                spec.openings.push(Opening { wall, along: (a0, a0 + width), height });
            }
        }
        spec
    }
}

/// Rasterizes the room shell, openings and furniture into a label grid.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let dims = spec.dims;
    let t = spec.wall_thickness;
    let mut labels = vec![EMPTY; dims.len()];
    for x in 0..dims.w {
        for y in 0..dims.h {
            for z in 0..dims.d {
                let l = if y < t {
                    class::FLOOR
                } else if y >= dims.h - t {
                    class::CEIL
                } else if x < t || x >= dims.w - t || z < t || z >= dims.d - t {
                    class::WALL
                } else {
                    EMPTY
                };
                labels[dims.index(x, y, z)] = l;
            }
        }
    }
    for o in &spec.openings {
        for y in o.height.0..o.height.1 {
            for a in o.along.0..o.along.1 {
                for depth in 0..t {
                    let (x, z) = match o.wall {
                        Wall::XMin => (depth, a),
                        Wall::XMax => (dims.w - 1 - depth, a),
                        Wall::ZMin => (a, depth),
                        Wall::ZMax => (a, dims.d - 1 - depth),
                    };
                    let i = dims.index(x, y, z);
                    if labels[i] == class::WALL {
                        labels[i] = class::WINDOW;
                    }
                }
            }
        }
    }
    for f in &spec.furniture {
        for [x, y, z] in f.bounds.cells() {
            labels[dims.index(x, y, z)] = f.class;
        }
    }
    Ok(labels)
}

/// Image-plane ray count per axis: two rays per voxel of the footprint the
/// frustum covers at the far end of the room.
fn ray_grid(dims: Dims, camera: &Camera) -> (usize, usize) {
    let diag = ((dims.w * dims.w + dims.h * dims.h + dims.d * dims.d) as f64).sqrt();
    let half_h = (camera.hfov_deg.to_radians() / 2.0).tan();
    let half_v = (camera.vfov_deg.to_radians() / 2.0).tan();
    let nu = (2.0 * 2.0 * diag * half_h).ceil() as usize;
    let nv = (2.0 * 2.0 * diag * half_v).ceil() as usize;
    (nu.max(2), nv.max(2))
}

/// Unit ray directions covering the camera frustum.
pub fn camera_rays(dims: Dims, camera: &Camera) -> Vec<[f64; 3]> {
    let f = normalize(camera.forward);
    let up_hint = if f[1].abs() > 0.99 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let right = normalize(cross(f, up_hint));
    let up = cross(right, f);
    let (nu, nv) = ray_grid(dims, camera);
    let half_h = (camera.hfov_deg.to_radians() / 2.0).tan();
    let half_v = (camera.vfov_deg.to_radians() / 2.0).tan();
    let mut rays = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        let v = ((j as f64 + 0.5) / nv as f64 * 2.0 - 1.0) * half_v;
        for i in 0..nu {
            let u = ((i as f64 + 0.5) / nu as f64 * 2.0 - 1.0) * half_h;
            rays.push(normalize([0, 1, 2].map(|a| f[a] + u * right[a] + v * up[a])));
        }
    }
    rays
}

/// Voxel traversal (Amanatides–Woo) from `origin` along `dir`. Calls
/// `visit` with each voxel index in order; stops when `visit` returns false
/// or the ray leaves the grid.
pub fn march_ray(dims: Dims, origin: [f64; 3], dir: [f64; 3], mut visit: impl FnMut(usize) -> bool) {
    let size = [dims.w as i64, dims.h as i64, dims.d as i64];
    let mut cell = origin.map(|v| v.floor() as i64);
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((cell[a] + 1) as f64 - origin[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - origin[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        }
    }
    while (0..3).all(|a| cell[a] >= 0 && cell[a] < size[a]) {
        let i = dims.index(cell[0] as usize, cell[1] as usize, cell[2] as usize);
        if !visit(i) {
            return;
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        cell[a] += step[a];
        t_max[a] += t_delta[a];
    }
}

/// Kind of every voxel as seen from `camera`.
pub fn raycast_visibility(labels: &[u8], dims: Dims, camera: &Camera) -> Vec<VoxelKind> {
    let mut kind = vec![VoxelKind::Occluded; dims.len()];
    for dir in camera_rays(dims, camera) {
        march_ray(dims, camera.position, dir, |i| {
            if labels[i] == EMPTY {
                kind[i] = VoxelKind::VisibleEmpty;
                true
            } else {
                kind[i] = VoxelKind::ObservedSurface;
                false
            }
        });
    }
    kind
}

/// Truncated distance to the nearest observed-surface voxel, normalized to
/// `[0, 1]` and signed `+` for visible empty, `−` for occluded, `0` on the
/// surface itself.
pub fn compute_flipped_tsdf(kind: &[VoxelKind], dims: Dims, truncation: f64) -> Result<Vec<f32>> {
    if !(truncation >= 1.0) {
        return Err(Error::Parameter(format!("truncation must be >= 1 voxel, got {truncation}")));
    }
    if kind.len() != dims.len() {
        return Err(Error::Dimension {
            context: "tsdf kinds",
            left: dims.as_array().to_vec(),
            right: vec![kind.len()],
        });
    }
    let reach = truncation.ceil() as i64;
    let mut offsets: Vec<([i64; 3], f64)> = Vec::new();
    for dx in -reach..=reach {
        for dy in -reach..=reach {
            for dz in -reach..=reach {
                let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                if d > 0.0 && d < truncation {
                    offsets.push(([dx, dy, dz], d));
                }
            }
        }
    }
    offsets.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut out = vec![0f32; dims.len()];
    for i in 0..dims.len() {
        let sign = match kind[i] {
            VoxelKind::ObservedSurface => continue,
            VoxelKind::VisibleEmpty => 1.0,
            VoxelKind::Occluded => -1.0,
        };
        let [x, y, z] = dims.coords(i);
        let mut dist = truncation;
        for &([dx, dy, dz], d) in &offsets {
            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if dims.contains(nx, ny, nz)
                && kind[dims.index(nx as usize, ny as usize, nz as usize)] == VoxelKind::ObservedSurface
            {
                dist = d;
                break;
            }
        }
        out[i] = (sign * dist / truncation) as f32;
    }
    Ok(out)
}

/// Full pipeline: rasterize, raycast, TSDF.
pub fn build_record(spec: &SceneSpec, truncation: f64) -> Result<DatasetRecord> {
    let labels = generate_scene(spec)?;
    let kind = raycast_visibility(&labels, spec.dims, &spec.camera);
    let tsdf = compute_flipped_tsdf(&kind, spec.dims, truncation)?;
    TsdfVolume::new(spec.dims, tsdf, labels, kind)
}

pub fn random_record(dims: Dims, seed: u64) -> Result<DatasetRecord> {
    build_record(&SceneSpec::random(dims, seed), DEFAULT_TRUNCATION)
}

pub const SSCB_MAGIC: [u8; 4] = *b"SSCB";
pub const SSCB_VERSION: u32 = 1;
pub const SSCB_HEADER_BYTES: usize = 20;

pub fn encode_record(r: &DatasetRecord) -> Vec<u8> {
    let n = r.dims.len();
    let mut buf = Vec::with_capacity(SSCB_HEADER_BYTES + 6 * n);
    buf.extend_from_slice(&SSCB_MAGIC);
    buf.extend_from_slice(&SSCB_VERSION.to_le_bytes());
    for d in r.dims.as_array() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &r.tsdf {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&r.label);
    buf.extend(r.kind.iter().map(|k| k.code()));
    buf
}

pub fn decode_record(bytes: &[u8]) -> Result<DatasetRecord> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: SSCB_HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != SSCB_MAGIC {
        return Err(Error::BadMagic {
            expected: SSCB_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < SSCB_HEADER_BYTES {
        return Err(Error::Truncated {
            expected: SSCB_HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != SSCB_VERSION {
        return Err(Error::Version {
            expected: SSCB_VERSION,
            found: version,
        });
    }
    let dims = Dims::new(word(8) as usize, word(12) as usize, word(16) as usize);
    let n = dims.len();
    let expected = SSCB_HEADER_BYTES + 6 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after record",
            bytes.len() - expected
        )));
    }
    let body = &bytes[SSCB_HEADER_BYTES..];
    let tsdf = body[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let label = body[4 * n..5 * n].to_vec();
    let kind = body[5 * n..6 * n]
        .iter()
        .map(|&c| VoxelKind::from_code(c).ok_or_else(|| Error::Malformed(format!("voxel kind code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    TsdfVolume::new(dims, tsdf, label, kind).map_err(|e| match e {
        Error::Category { got, .. } => Error::Malformed(format!("label {got} out of range")),
        other => other,
    })
}

pub fn write_record(path: &Path, r: &DatasetRecord) -> Result<()> {
    fs::write(path, encode_record(r))?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<DatasetRecord> {
    decode_record(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Malformed(format!("unknown split `{other}`"))),
        }
    }
}

/// Dataset manifest: one `<split> <relative path>` entry per line; `#`
/// starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<(Split, PathBuf)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(split), Some(path), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Malformed(format!("manifest line {}: `{line}`", n + 1)));
            };
            entries.push((split.parse()?, PathBuf::from(path)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Loads `manifest.txt` from a dataset directory, or a manifest file path.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = fs::File::open(&file)?;
        let mut text = String::new();
        for line in io::BufReader::new(f).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text, &root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "# split path")?;
        for (s, p) in &self.entries {
            writeln!(f, "{} {}", s.as_str(), p.display())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, p)| self.root.join(p))
            .collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<DatasetRecord>> {
        self.paths(split).iter().map(|p| read_record(p)).collect()
    }
}

/// Summary of a dataset generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationReport {
    pub records: usize,
    pub mean_kept_fraction: f64,
}

/// Generates `count` scenes into `out`, assigning splits by the given counts
/// (remaining records go to `test`). Writes `manifest.txt`.
pub fn generate_dataset(
    out: &Path,
    dims: Dims,
    seed: u64,
    splits: &[(Split, usize)],
) -> Result<(Manifest, GenerationReport)> {
    fs::create_dir_all(out)?;
    let mut manifest = Manifest {
        root: out.to_path_buf(),
        entries: Vec::new(),
    };
    let mut kept = 0.0;
    let mut n = 0usize;
    for &(split, count) in splits {
        for _ in 0..count {
            let rec = random_record(dims, seed.wrapping_add(n as u64))?;
            kept += 1.0 - rec.discarded_fraction();
            let name = format!("scene_{n:05}.sscb");
            write_record(&out.join(&name), &rec)?;
            manifest.entries.push((split, PathBuf::from(name)));
            n += 1;
        }
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok((
        manifest,
        GenerationReport {
            records: n,
            mean_kept_fraction: if n > 0 { kept / n as f64 } else { 0.0 },
        },
    ))
}

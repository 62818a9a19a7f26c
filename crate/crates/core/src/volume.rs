//! TSDF volumes, voxel kinds, and the voxel ↔ point conversion.
//!
//! Only observed-surface and occluded voxels become points; visible-empty
//! voxels are known to be empty and are dropped before the network runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of semantic classes, excluding the empty class 0.
pub const NUM_CLASSES: usize = 11;

/// Label value for empty space.
pub const EMPTY: u8 = 0;

/// Class names for labels `1..=11`.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "ceil", "floor", "wall", "win", "chair", "bed", "sofa", "table", "tvs", "furn", "objs",
];

pub mod class {
    pub const CEIL: u8 = 1;
    pub const FLOOR: u8 = 2;
    pub const WALL: u8 = 3;
    pub const WINDOW: u8 = 4;
    pub const CHAIR: u8 = 5;
    pub const BED: u8 = 6;
    pub const SOFA: u8 = 7;
    pub const TABLE: u8 = 8;
    pub const TVS: u8 = 9;
    pub const FURN: u8 = 10;
    pub const OBJS: u8 = 11;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VoxelKind {
    VisibleEmpty = 0,
    ObservedSurface = 1,
    Occluded = 2,
}

impl VoxelKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::VisibleEmpty),
            1 => Some(Self::ObservedSurface),
            2 => Some(Self::Occluded),
            _ => None,
        }
    }

    /// Whether voxels of this kind become points (and count toward the loss).
    pub fn is_kept(self) -> bool {
        self != Self::VisibleEmpty
    }
}

/// Grid extent `(W, H, D)`; H is the height axis. Flat index is
/// `(x·H + y)·D + z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl Dims {
    pub const FULL: Dims = Dims { w: 60, h: 36, d: 60 };
    pub const DESK: Dims = Dims { w: 30, h: 18, d: 30 };

    pub fn new(w: usize, h: usize, d: usize) -> Self {
        Self { w, h, d }
    }

    pub fn len(&self) -> usize {
        self.w * self.h * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.h + y) * self.d + z
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        [i / (self.h * self.d), (i / self.d) % self.h, i % self.d]
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0 && y >= 0 && z >= 0 && (x as usize) < self.w && (y as usize) < self.h && (z as usize) < self.d
    }

    /// Query-space scale: one voxel is `1 / max(W, D)` units on every axis.
    pub fn query_scale(&self) -> f64 {
        1.0 / self.w.max(self.d).max(1) as f64
    }

    /// Query-space position of voxel `i`.
    pub fn position(&self, i: usize) -> [f64; 3] {
        let s = self.query_scale();
        let [x, y, z] = self.coords(i);
        [x as f64 * s, y as f64 * s, z as f64 * s]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.d)
    }
}

impl std::str::FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(['x', 'X', ',']).collect();
        let parsed: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[w, h, d]) if w > 0 && h > 0 && d > 0 => Ok(Dims::new(w, h, d)),
            _ => Err(Error::Parameter(format!("bad dims `{s}`, expected WxHxD"))),
        }
    }
}

/// Dense grid of TSDF values, semantic labels and voxel kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub dims: Dims,
    pub tsdf: Vec<f32>,
    pub label: Vec<u8>,
    pub kind: Vec<VoxelKind>,
}

impl TsdfVolume {
    pub fn new(dims: Dims, tsdf: Vec<f32>, label: Vec<u8>, kind: Vec<VoxelKind>) -> Result<Self> {
        let n = dims.len();
        for (what, len) in [("tsdf", tsdf.len()), ("label", label.len()), ("kind", kind.len())] {
            if len != n {
                return Err(Error::Malformed(format!(
                    "{what} has {len} entries, volume {dims} needs {n}"
                )));
            }
        }
        if let Some(&bad) = label.iter().find(|&&l| l as usize > NUM_CLASSES) {
            return Err(Error::Category {
                got: bad as usize,
                classes: NUM_CLASSES + 1,
            });
        }
        Ok(Self {
            dims,
            tsdf,
            label,
            kind,
        })
    }

    /// A volume where every voxel is visible-empty with TSDF 1.
    pub fn empty(dims: Dims) -> Self {
        let n = dims.len();
        Self {
            dims,
            tsdf: vec![1.0; n],
            label: vec![EMPTY; n],
            kind: vec![VoxelKind::VisibleEmpty; n],
        }
    }

    pub fn kept_count(&self) -> usize {
        self.kind.iter().filter(|k| k.is_kept()).count()
    }

    /// Fraction of voxels dropped before the point stream.
    pub fn discarded_fraction(&self) -> f64 {
        1.0 - self.kept_count() as f64 / self.dims.len() as f64
    }
}

/// How per-point x, y, z features are normalized around the mass center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterNorm {
    /// Subtract the mass center only.
    #[default]
    Subtract,
    /// Subtract, then divide by the largest absolute centered coordinate.
    SubtractAndRescale,
}

/// Number of per-point input channels `(x, y, z, t, h)`.
pub const POINT_FEATURES: usize = 5;

/// Points generated from the kept voxels of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub dims: Dims,
    /// Query-space positions (voxel index × `1/max(W, D)`).
    pub positions: Vec<[f64; 3]>,
    pub features: Vec<[f64; POINT_FEATURES]>,
    pub src_voxel: Vec<usize>,
    pub kind: Vec<VoxelKind>,
    pub label: Vec<u8>,
}

impl PointCloud {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            positions: Vec::new(),
            features: Vec::new(),
            src_voxel: Vec::new(),
            kind: Vec::new(),
            label: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Sub-cloud at the given indices (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            dims: self.dims,
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            features: idx.iter().map(|&i| self.features[i]).collect(),
            src_voxel: idx.iter().map(|&i| self.src_voxel[i]).collect(),
            kind: idx.iter().map(|&i| self.kind[i]).collect(),
            label: idx.iter().map(|&i| self.label[i]).collect(),
        }
    }

    pub fn feature_tensor(&self) -> Tensor {
        let values = self.features.iter().flat_map(|f| f.iter().copied()).collect();
        Tensor::new(vec![self.len(), POINT_FEATURES], values).expect("feature rows are fixed width")
    }
}

/// Arithmetic mean of a nonempty position list.
pub fn mass_center(positions: &[[f64; 3]]) -> Result<[f64; 3]> {
    if positions.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut c = [0.0; 3];
    for p in positions {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = positions.len() as f64;
    Ok(c.map(|v| v / n))
}

pub fn generate_points(v: &TsdfVolume) -> PointCloud {
    generate_points_with(v, CenterNorm::Subtract)
}

/// One point per kept voxel, in layout order.
pub fn generate_points_with(v: &TsdfVolume, norm: CenterNorm) -> PointCloud {
    let dims = v.dims;
    let mut cloud = PointCloud::empty(dims);
    for i in (0..dims.len()).filter(|&i| v.kind[i].is_kept()) {
        let [_, y, _] = dims.coords(i);
        let p = dims.position(i);
        cloud.positions.push(p);
        cloud.features.push([p[0], p[1], p[2], v.tsdf[i] as f64, y as f64 / dims.h as f64]);
        cloud.src_voxel.push(i);
        cloud.kind.push(v.kind[i]);
        cloud.label.push(v.label[i]);
    }
    let Ok(center) = mass_center(&cloud.positions) else {
        return cloud;
    };
    for f in &mut cloud.features {
        for a in 0..3 {
            f[a] -= center[a];
        }
    }
    if norm == CenterNorm::SubtractAndRescale {
        let extent = cloud
            .features
            .iter()
            .flat_map(|f| f[..3].iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        if extent > 0.0 {
            for f in &mut cloud.features {
                for v in &mut f[..3] {
                    *v /= extent;
                }
            }
        }
    }
    cloud
}

/// Writes the argmax class of each point into its source voxel. All other
/// voxels stay empty.
pub fn voxelize_predictions(cloud: &PointCloud, logits: &Tensor, dims: Dims) -> Result<Vec<u8>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != cloud.len() {
        return Err(Error::Dimension {
            context: "voxelize_predictions logits vs cloud size",
            left: shape.to_vec(),
            right: vec![cloud.len()],
        });
    }
    let c = shape[1];
    let mut out = vec![EMPTY; dims.len()];
    for (i, &v) in cloud.src_voxel.iter().enumerate() {
        if v >= out.len() {
            return Err(Error::Index {
                index: v,
                len: out.len(),
            });
        }
        out[v] = argmax(&logits.values()[i * c..(i + 1) * c]) as u8;
    }
    Ok(out)
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

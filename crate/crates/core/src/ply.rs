//! ASCII PLY export of kept voxels colored by class.

use std::io::{self, Write};

use crate::volume::{TsdfVolume, NUM_CLASSES};

/// RGB per class, empty first.
pub const PALETTE: [[u8; 3]; NUM_CLASSES + 1] = [
    [200, 200, 200],
    [22, 191, 206],
    [0, 143, 39],
    [255, 214, 112],
    [230, 25, 75],
    [245, 130, 48],
    [60, 180, 75],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [0, 0, 128],
    [128, 128, 0],
];

/// Writes one vertex per non-visible-empty voxel at its voxel coordinates.
/// Returns the vertex count.
pub fn write_ply<W: Write>(out: &mut W, volume: &TsdfVolume) -> io::Result<usize> {
    let kept: Vec<usize> = (0..volume.dims.len()).filter(|&i| volume.kind[i].is_kept()).collect();
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", kept.len())?;
    for p in ["x", "y", "z"] {
        writeln!(out, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(out, "property uchar {p}")?;
    }
    writeln!(out, "property uchar label")?;
    writeln!(out, "end_header")?;
    for &i in &kept {
        let [x, y, z] = volume.dims.coords(i);
        let l = volume.label[i] as usize;
        let [r, g, b] = PALETTE[l.min(NUM_CLASSES)];
        writeln!(out, "{x} {y} {z} {r} {g} {b} {l}")?;
    }
    Ok(kept.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_record;
    use crate::volume::Dims;

    #[test]
    fn header_and_vertex_count() {
        let v = random_record(Dims::new(10, 8, 10), 2).unwrap();
        let mut buf = Vec::new();
        let n = write_ply(&mut buf, &v).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(n, v.kept_count());
        assert!(text.contains(&format!("element vertex {n}\n")));
        let body = text.split("end_header\n").nth(1).unwrap();
        assert_eq!(body.lines().count(), n);
        assert!(body.lines().all(|l| l.split(' ').count() == 7));
    }
}

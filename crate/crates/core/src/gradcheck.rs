//! Finite-difference checks for every tape op and for the end-to-end
//! training loss of a small network on a tiny scene.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::objective;
use crate::network::{forward_cloud, PvaConfig, PvaModel};
use crate::synth::compute_flipped_tsdf;
use crate::tensor::{finite_difference_check, relative_error, ConvPlan, Graph, Tensor, Var};
use crate::volume::{class, generate_points, Dims, TsdfVolume, VoxelKind, EMPTY};

/// Acceptance threshold on the max relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn random(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches count")
}

/// Contracts `v` with fixed random weights to a scalar, so every output
/// coordinate carries a distinct upstream gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let (rows, cols) = match shape.as_slice() {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        other => (other[0], other[1..].iter().product()),
    };
    let flat = g.reshape(v, vec![rows, cols])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(vec![cols, 1], -1.0, 1.0, &mut rng));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.linear(flat, w, b)?;
    Ok(g.sum(y))
}

const H: f64 = 1e-6;

/// One check per op and differentiable operand.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Result<Var>| -> Result<()> {
        let err = finite_difference_check(f, x, H)?;
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_err: err,
            coords: x.numel(),
        });
        Ok(())
    };

    let x = random(vec![5, 4], -1.0, 1.0, &mut rng);
    let w = random(vec![4, 3], -1.0, 1.0, &mut rng);
    let b = random(vec![3], -1.0, 1.0, &mut rng);
    check("linear/x", &x, &|g, v| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(v, w, b)?;
        project(g, y, 1)
    })?;
    check("linear/w", &w, &|g, v| {
        let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.linear(x, v, b)?;
        project(g, y, 1)
    })?;
    check("linear/b", &b, &|g, v| {
        let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.linear(x, w, v)?;
        project(g, y, 1)
    })?;

    // Keep inputs away from the kink.
    let xr = Tensor::new(vec![4, 5], (0..20).map(|i| if i % 2 == 0 { 0.3 + 0.05 * i as f64 } else { -0.2 - 0.03 * i as f64 }).collect())?;
    check("relu", &xr, &|g, v| {
        let y = g.relu(v);
        project(g, y, 2)
    })?;
    let xs = random(vec![3, 6], -4.0, 4.0, &mut rng);
    check("sigmoid", &xs, &|g, v| {
        let y = g.sigmoid(v);
        project(g, y, 3)
    })?;

    let a = random(vec![4, 3], -1.0, 1.0, &mut rng);
    let c = random(vec![4, 2], -1.0, 1.0, &mut rng);
    check("concat/a", &a, &|g, v| {
        let c = g.constant(c.clone());
        let y = g.concat_channels(v, c)?;
        project(g, y, 4)
    })?;
    check("concat/b", &c, &|g, v| {
        let a = g.constant(a.clone());
        let y = g.concat_channels(a, v)?;
        project(g, y, 4)
    })?;
    let d = random(vec![4, 3], -1.0, 1.0, &mut rng);
    check("add", &a, &|g, v| {
        let d = g.constant(d.clone());
        let y = g.add(v, d)?;
        project(g, y, 5)
    })?;
    check("add/self", &a, &|g, v| {
        let y = g.add(v, v)?;
        project(g, y, 5)
    })?;
    check("scale", &a, &|g, v| {
        let y = g.scale(v, -1.7);
        project(g, y, 6)
    })?;
    check("sum", &a, &|g, v| Ok(g.sum(v)))?;
    check("reshape", &a, &|g, v| {
        let y = g.reshape(v, vec![2, 6])?;
        project(g, y, 7)
    })?;
    check("gather_rows", &a, &|g, v| {
        let y = g.gather_rows(v, &[3, 0, 0, 2, 3])?;
        project(g, y, 8)
    })?;

    // Distinct values keep the argmax stable under perturbation.
    let mp = Tensor::new(vec![6, 3], (0..18).map(|i| ((i * 7) % 18) as f64 * 0.1 - 0.8).collect())?;
    let mask = [true, false, true, true, true, false];
    check("masked_max_pool", &mp, &|g, v| {
        let y = g.masked_max_pool(v, 2, 3, &mask)?;
        project(g, y, 9)
    })?;

    let lx = random(vec![4, 5], -2.0, 2.0, &mut rng);
    let lg = random(vec![5], 0.5, 1.5, &mut rng);
    let lb = random(vec![5], -0.5, 0.5, &mut rng);
    check("layer_norm/x", &lx, &|g, v| {
        let (gm, bt) = (g.constant(lg.clone()), g.constant(lb.clone()));
        let y = g.layer_norm(v, gm, bt)?;
        project(g, y, 12)
    })?;
    check("layer_norm/gamma", &lg, &|g, v| {
        let (x, bt) = (g.constant(lx.clone()), g.constant(lb.clone()));
        let y = g.layer_norm(x, v, bt)?;
        project(g, y, 12)
    })?;
    check("layer_norm/beta", &lb, &|g, v| {
        let (x, gm) = (g.constant(lx.clone()), g.constant(lg.clone()));
        let y = g.layer_norm(x, gm, v)?;
        project(g, y, 12)
    })?;

    let iw = random(vec![3, 2], 0.2, 1.0, &mut rng);
    let src = random(vec![4, 3], -1.0, 1.0, &mut rng);
    // Repeated neighbors make the weight gradient exactly zero, which FD only sees as noise.
    let idx = [0, 1, 3, 2, 1, 0];
    check("weighted_interp/w", &iw, &|g, v| {
        let s = g.constant(src.clone());
        let y = g.weighted_interp(v, s, &idx, 2)?;
        project(g, y, 10)
    })?;
    check("weighted_interp/src", &src, &|g, v| {
        let w = g.constant(iw.clone());
        let y = g.weighted_interp(w, v, &idx, 2)?;
        project(g, y, 10)
    })?;

    let dims = [3usize, 3, 3];
    let rows: Vec<Option<u32>> = (0..27).map(|i| if i % 4 == 1 { None } else { Some(i as u32) }).collect();
    let plan = Arc::new(ConvPlan::new(dims, &rows, &[0, 4, 13, 26])?);
    let cx = random(vec![27, 2], -1.0, 1.0, &mut rng);
    let cw = random(vec![27 * 2, 3], -1.0, 1.0, &mut rng);
    let cb = random(vec![3], -1.0, 1.0, &mut rng);
    check("conv3d/x", &cx, &|g, v| {
        let (w, b) = (g.constant(cw.clone()), g.constant(cb.clone()));
        let y = g.conv3d(v, w, b, plan.clone())?;
        project(g, y, 11)
    })?;
    check("conv3d/w", &cw, &|g, v| {
        let (x, b) = (g.constant(cx.clone()), g.constant(cb.clone()));
        let y = g.conv3d(x, v, b, plan.clone())?;
        project(g, y, 11)
    })?;
    check("conv3d/b", &cb, &|g, v| {
        let (x, w) = (g.constant(cx.clone()), g.constant(cw.clone()));
        let y = g.conv3d(x, w, v, plan.clone())?;
        project(g, y, 11)
    })?;

    let logits = random(vec![5, 12], -3.0, 3.0, &mut rng);
    check("softmax_cross_entropy", &logits, &|g, v| {
        let (l, _) = g.softmax_cross_entropy(v, &[0, 3, 11, 3, 7], 0.2)?;
        Ok(l)
    })?;
    let p = random(vec![6, 1], 0.05, 0.95, &mut rng);
    check("binary_cross_entropy", &p, &|g, v| g.binary_cross_entropy(v, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 0.5))?;
    Ok(out)
}

/// 8×8×8 room fragment with 58 kept voxels: a floor patch, a chair block
/// with hidden interior, a wall, and empty occluded space behind it.
pub fn tiny_scene() -> TsdfVolume {
    let dims = Dims::new(8, 8, 8);
    let n = dims.len();
    let mut label = vec![EMPTY; n];
    let mut kind = vec![VoxelKind::VisibleEmpty; n];
    for x in 1..6 {
        for z in 1..6 {
            let i = dims.index(x, 0, z);
            label[i] = class::FLOOR;
            kind[i] = VoxelKind::ObservedSurface;
        }
    }
    for x in 2..4 {
        for y in 1..3 {
            for z in 2..4 {
                let i = dims.index(x, y, z);
                label[i] = class::CHAIR;
                kind[i] = if x == 2 || y == 2 { VoxelKind::ObservedSurface } else { VoxelKind::Occluded };
            }
        }
    }
    for y in 1..4 {
        for z in 1..6 {
            let i = dims.index(6, y, z);
            label[i] = class::WALL;
            kind[i] = VoxelKind::ObservedSurface;
        }
    }
    for y in 1..3 {
        for z in 1..6 {
            kind[dims.index(7, y, z)] = VoxelKind::Occluded;
        }
    }
    let tsdf = compute_flipped_tsdf(&kind, dims, 3.0).expect("valid kinds");
    TsdfVolume::new(dims, tsdf, label, kind).expect("consistent tiny scene")
}

fn scene_loss(model: &PvaModel, volume: &TsdfVolume, lambda: f64, seed: u64) -> Result<f64> {
    let cloud = generate_points(volume);
    let mut fp = forward_cloud(model, volume, &cloud, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let lb = objective(&mut fp, lambda)?;
    Ok(fp.graph.scalar(lb.total))
}

/// Checks the total loss gradient for every parameter tensor at its
/// `per_group` largest-magnitude coordinates.
pub fn end_to_end_suite(config: &PvaConfig, volume: &TsdfVolume, lambda: f64, per_group: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut model = PvaModel::new(config.clone())?;
    let cloud = generate_points(volume);
    let mut fp = forward_cloud(&model, volume, &cloud, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let lb = objective(&mut fp, lambda)?;
    model.store.zero_grad();
    fp.graph.backward(lb.total)?.accumulate(&fp.graph, &mut model.store);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (name, grad) = {
            let p = model.store.get(id);
            (p.name.clone(), p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default())
        };
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
        order.truncate(per_group);
        let mut worst: f64 = 0.0;
        for &c in &order {
            let orig = model.store.get(id).tensor.values()[c];
            model.store.get_mut(id).tensor.values_mut()[c] = orig + H;
            let plus = scene_loss(&model, volume, lambda, seed)?;
            model.store.get_mut(id).tensor.values_mut()[c] = orig - H;
            let minus = scene_loss(&model, volume, lambda, seed)?;
            model.store.get_mut(id).tensor.values_mut()[c] = orig;
            worst = worst.max(relative_error(grad[c], (plus - minus) / (2.0 * H)));
        }
        out.push(GradCheck {
            name: format!("end-to-end/{name}"),
            max_rel_err: worst,
            coords: order.len(),
        });
    }
    Ok(out)
}

/// Every op check followed by the end-to-end check on [`tiny_scene`].
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = op_suite(seed)?;
    all.extend(end_to_end_suite(&PvaConfig::tiny(), &tiny_scene(), 0.5, 4, seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_scene_is_small() {
        let v = tiny_scene();
        assert_eq!(v.kept_count(), 58);
        assert!(v.kept_count() <= 64);
    }

    #[test]
    fn op_checks_pass() {
        for c in op_suite(0).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}

//! Training objective: per-point cross-entropy over kept voxels plus a
//! binary similarity loss on the learned propagation weights.

use crate::error::{Error, Result};
use crate::network::ForwardPass;
use crate::tensor::{bce, Graph, Tensor, Var};

/// Mean softmax cross-entropy over points. Returns the graph scalar.
pub fn ssc_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (loss, _) = g.softmax_cross_entropy(logits, &targets, 1.0 / n as f64)?;
    Ok(loss)
}

/// Value-only cross-entropy mean, for reporting and oracles.
pub fn ssc_loss_value(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = ssc_loss(&mut g, l, labels)?;
    Ok(g.scalar(v))
}

/// Mean binary cross-entropy over `(w, G)` pairs; the flag is set when the
/// pair set is empty (the loss is then 0).
pub fn sp_loss_value(pairs: &[(f64, f64)]) -> (f64, bool) {
    if pairs.is_empty() {
        return (0.0, true);
    }
    let s: f64 = pairs.iter().map(|&(w, t)| bce(w, t)).sum();
    (s / pairs.len() as f64, false)
}

/// Differentiable similarity loss over every learnable pair level.
/// Returns `None` with the warning flag when no learnable pair exists.
pub fn sp_loss(fp: &mut ForwardPass) -> Result<(Option<Var>, bool)> {
    let total: usize = fp.pairs.iter().filter(|p| p.learnable).map(|p| p.len()).sum();
    if total == 0 {
        return Ok((None, true));
    }
    let scale = 1.0 / total as f64;
    let mut acc: Option<Var> = None;
    for p in fp.pairs.iter().filter(|p| p.learnable && !p.is_empty()) {
        let term = fp.graph.binary_cross_entropy(p.weights, &p.same_class, scale)?;
        acc = Some(match acc {
            Some(a) => fp.graph.add(a, term)?,
            None => term,
        });
    }
    Ok((acc, false))
}

pub fn total_loss_value(ssc: f64, sp: f64, lambda: f64) -> f64 {
    ssc + lambda * sp
}

/// Loss terms of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: Var,
    pub ssc: f64,
    pub sp: f64,
    /// No learnable pairs: the similarity term is absent.
    pub sp_empty: bool,
}

/// Appends `ssc + λ·sp` to the forward tape. The similarity term is always
/// evaluated for logging; with `λ = 0` it is kept out of the graph.
pub fn objective(fp: &mut ForwardPass, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let labels = fp.labels.clone();
    let ssc = ssc_loss(&mut fp.graph, fp.logits, &labels)?;
    let ssc_v = fp.graph.scalar(ssc);
    let (sp, sp_empty) = sp_loss(fp)?;
    let sp_v = sp.map(|v| fp.graph.scalar(v)).unwrap_or(0.0);
    let total = match sp {
        Some(sp) if lambda > 0.0 => {
            let scaled = fp.graph.scale(sp, lambda);
            fp.graph.add(ssc, scaled)?
        }
        _ => ssc,
    };
    Ok(LossBreakdown {
        total,
        ssc: ssc_v,
        sp: sp_v,
        sp_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_cloud, PvaConfig, PvaModel};
    use crate::synth::random_record;
    use crate::volume::{generate_points, Dims, VoxelKind, NUM_CLASSES};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(vec![7, NUM_CLASSES + 1]);
        let v = ssc_loss_value(&logits, &[0, 1, 2, 3, 11, 5, 6]).unwrap();
        assert!((v - 12f64.ln()).abs() < 1e-12);
    }

    fn confident_loss(margin: f64) -> f64 {
        let mut vals = vec![0.0; 3 * 12];
        for (i, t) in [2usize, 7, 11].iter().enumerate() {
            vals[i * 12 + t] = margin;
        }
        ssc_loss_value(&Tensor::new(vec![3, 12], vals).unwrap(), &[2, 7, 11]).unwrap()
    }

    #[test]
    fn confident_correct_logits() {
        // Closed form ln(1 + 11·e^−m): 2.27e-8 at m = 20, below 1e-8 from m = 21.
        for m in [20.0, 21.0, 30.0] {
            let v = confident_loss(m);
            let closed = (11.0 * (-m).exp()).ln_1p();
            assert!((v - closed).abs() <= 1e-12 * closed, "{v} {closed}");
        }
        assert!(confident_loss(21.0) < 1e-8);
    }

    #[test]
    fn label_out_of_range() {
        let e = ssc_loss_value(&Tensor::zeros(vec![1, 12]), &[12]).unwrap_err();
        assert!(matches!(e, Error::Category { got: 12, classes: 12 }));
    }

    #[test]
    fn point_loss_equals_full_volume_masked_loss() {
        let vol = random_record(Dims::new(12, 8, 12), 3).unwrap();
        let cloud = generate_points(&vol);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Logits for every voxel of the volume; the cloud reads its rows.
        let all: Vec<f64> = (0..vol.dims.len() * 12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let rows: Vec<f64> = cloud.src_voxel.iter().flat_map(|&v| all[v * 12..(v + 1) * 12].to_vec()).collect();
        let point = ssc_loss_value(&Tensor::new(vec![cloud.len(), 12], rows).unwrap(), &cloud.label).unwrap();
        // Full-volume evaluation with the mask recomputed from kinds.
        let mut sum = 0.0;
        let mut valid = 0.0;
        for v in 0..vol.dims.len() {
            let m = (vol.kind[v] != VoxelKind::VisibleEmpty) as u8 as f64;
            let row = &all[v * 12..(v + 1) * 12];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            sum += m * (lse - row[vol.label[v] as usize]);
            valid += m;
        }
        assert!((point - sum / valid).abs() < 1e-12);
    }

    #[test]
    fn sp_loss_cases() {
        let (v, warn) = sp_loss_value(&[(0.5, 1.0), (0.5, 0.0), (0.5, 1.0)]);
        assert!((v - 2f64.ln()).abs() < 1e-12 && !warn);
        let (v, _) = sp_loss_value(&[(1.0, 1.0), (0.0, 0.0)]);
        assert!(v < 1e-6);
        let (v, _) = sp_loss_value(&[(0.9, 1.0), (0.2, 0.0)]);
        assert!((v - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 0.1643).abs() < 1e-4);
        assert_eq!(sp_loss_value(&[]), (0.0, true));
    }

    #[test]
    fn total_loss_combination() {
        assert_eq!(total_loss_value(2.0, 0.5, 0.0), 2.0);
        assert_eq!(total_loss_value(2.0, 0.5, 0.5), 2.25);
    }

    fn small_forward(seed: u64) -> crate::network::ForwardPass {
        let vol = random_record(Dims::new(12, 8, 12), seed).unwrap();
        let cloud = generate_points(&vol);
        let model = PvaModel::new(PvaConfig::default()).unwrap();
        forward_cloud(&model, &vol, &cloud, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn both_terms_reach_similarity_parameters() {
        let vol = random_record(Dims::new(12, 8, 12), 5).unwrap();
        let cloud = generate_points(&vol);
        let mut model = PvaModel::new(PvaConfig::default()).unwrap();
        let mut fp = forward_cloud(&model, &vol, &cloud, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let lb = objective(&mut fp, 0.5).unwrap();
        assert!(!lb.sp_empty && lb.sp > 0.0);
        fp.graph.backward(lb.total).unwrap().accumulate(&fp.graph, &mut model.store);
        let id = model.store.id_of("sp0.mlp1.w").unwrap();
        assert!(model.store.get(id).tensor.grad().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn zero_lambda_excludes_similarity_from_update() {
        let mut a = small_forward(2);
        let mut b = small_forward(2);
        let la = objective(&mut a, 0.0).unwrap();
        let lb = objective(&mut b, 1.0).unwrap();
        assert_eq!(la.sp, lb.sp);
        assert_eq!(a.graph.scalar(la.total), la.ssc);
        assert!((b.graph.scalar(lb.total) - (lb.ssc + lb.sp)).abs() < 1e-12);
        // With λ=0 the gradient equals the gradient of the SSC term alone.
        let mut c = small_forward(2);
        let labels = c.labels.clone();
        let ssc = ssc_loss(&mut c.graph, c.logits, &labels).unwrap();
        let ga = a.graph.backward(la.total).unwrap();
        let gc = c.graph.backward(ssc).unwrap();
        assert_eq!(ga.get(a.pairs[0].weights), gc.get(c.pairs[0].weights));
    }

    proptest! {
        #[test]
        fn ce_permutation_invariant(seed in 0u64..1000, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..n * 12).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..12)).collect();
            let perm: Vec<usize> = (0..n).rev().collect();
            let pv: Vec<f64> = perm.iter().flat_map(|&i| vals[i * 12..(i + 1) * 12].to_vec()).collect();
            let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
            let a = ssc_loss_value(&Tensor::new(vec![n, 12], vals).unwrap(), &labels).unwrap();
            let b = ssc_loss_value(&Tensor::new(vec![n, 12], pv).unwrap(), &pl).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn sp_loss_monotone_toward_target(w in 0.01f64..0.99, step in 0.001f64..0.5, same in proptest::bool::ANY) {
            let t = same as u8 as f64;
            let closer = if same { (w + step).min(1.0) } else { (w - step).max(0.0) };
            let (a, _) = sp_loss_value(&[(w, t), (0.3, 1.0)]);
            let (b, _) = sp_loss_value(&[(closer, t), (0.3, 1.0)]);
            prop_assert!(b < a);
        }
    }
}

//! Scene-completion (binary, occluded region) and semantic scene-completion
//! (per-class, observed + occluded region) metrics, accumulated as global
//! counts so that several scenes pool into one report.

use std::fmt;

use crate::error::{Error, Result};
use crate::volume::{VoxelKind, CLASS_NAMES, EMPTY, NUM_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// `TP/(TP+FP)`; with no predicted positives, 1 if there was nothing to find.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    /// `TP/(TP+FN)`; with no actual positives, 1 if nothing was falsely predicted.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, true)
    }
}

fn ratio(num: u64, den: u64, perfect_if_empty: bool) -> f64 {
    if den == 0 {
        if perfect_if_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn check_shapes(pred: &[u8], gt: &[u8], kinds: &[VoxelKind]) -> Result<()> {
    if pred.len() != gt.len() || gt.len() != kinds.len() {
        return Err(Error::Dimension {
            context: "metrics: pred, gt and kinds must match",
            left: vec![pred.len(), gt.len()],
            right: vec![kinds.len()],
        });
    }
    Ok(())
}

/// Binary occupancy counts over occluded voxels.
pub fn scene_completion_counts(pred: &[u8], gt: &[u8], kinds: &[VoxelKind]) -> Result<Counts> {
    check_shapes(pred, gt, kinds)?;
    let mut c = Counts::default();
    for ((&p, &g), &k) in pred.iter().zip(gt).zip(kinds) {
        if k != VoxelKind::Occluded {
            continue;
        }
        match (p != EMPTY, g != EMPTY) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `(precision, recall, IoU)` for one scene.
pub fn scene_completion_metrics(pred: &[u8], gt: &[u8], kinds: &[VoxelKind]) -> Result<(f64, f64, f64)> {
    let c = scene_completion_counts(pred, gt, kinds)?;
    Ok((c.precision(), c.recall(), c.iou()))
}

/// Per-class counts for classes `1..=C` over observed and occluded voxels.
pub fn ssc_counts(pred: &[u8], gt: &[u8], kinds: &[VoxelKind]) -> Result<Vec<Counts>> {
    check_shapes(pred, gt, kinds)?;
    let mut c = vec![Counts::default(); NUM_CLASSES];
    for ((&p, &g), &k) in pred.iter().zip(gt).zip(kinds) {
        if !k.is_kept() {
            continue;
        }
        if let Some(&bad) = [p, g].iter().find(|&&c| c as usize > NUM_CLASSES) {
            return Err(Error::Category {
                got: bad as usize,
                classes: NUM_CLASSES + 1,
            });
        }
        if p == g {
            if p != EMPTY {
                c[p as usize - 1].tp += 1;
            }
        } else {
            if p != EMPTY {
                c[p as usize - 1].fp += 1;
            }
            if g != EMPTY {
                c[g as usize - 1].fn_ += 1;
            }
        }
    }
    Ok(c)
}

/// Per-class IoU (`None` for classes absent from both prediction and
/// ground truth) and their mean over present classes.
pub fn ssc_metrics(pred: &[u8], gt: &[u8], kinds: &[VoxelKind]) -> Result<(Vec<Option<f64>>, f64)> {
    let c = ssc_counts(pred, gt, kinds)?;
    let per = per_class_iou(&c);
    let m = mean_present(&per);
    Ok((per, m))
}

fn per_class_iou(c: &[Counts]) -> Vec<Option<f64>> {
    c.iter()
        .map(|c| (c.tp + c.fp + c.fn_ > 0).then(|| c.iou()))
        .collect()
}

fn mean_present(per: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sc_precision: f64,
    pub sc_recall: f64,
    pub sc_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub ssc_miou: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "sc_precision {:.6} sc_recall {:.6} sc_iou {:.6}",
            self.sc_precision, self.sc_recall, self.sc_iou
        )?;
        for (name, iou) in CLASS_NAMES.iter().zip(&self.per_class_iou) {
            match iou {
                Some(v) => writeln!(f, "iou_{name} {v:.6}")?,
                None => writeln!(f, "iou_{name} absent")?,
            }
        }
        write!(f, "ssc_miou {:.6}", self.ssc_miou)
    }
}

/// Pools counts across scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalAccumulator {
    pub sc: Counts,
    pub ssc: Vec<Counts>,
    pub scenes: usize,
}

impl Default for EvalAccumulator {
    fn default() -> Self {
        Self {
            sc: Counts::default(),
            ssc: vec![Counts::default(); NUM_CLASSES],
            scenes: 0,
        }
    }
}

impl EvalAccumulator {
    pub fn add(&mut self, pred: &[u8], gt: &[u8], kinds: &[VoxelKind]) -> Result<()> {
        let sc = scene_completion_counts(pred, gt, kinds)?;
        let ssc = ssc_counts(pred, gt, kinds)?;
        self.sc.add(sc);
        for (a, b) in self.ssc.iter_mut().zip(ssc) {
            a.add(b);
        }
        self.scenes += 1;
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let per = per_class_iou(&self.ssc);
        EvalReport {
            sc_precision: self.sc.precision(),
            sc_recall: self.sc.recall(),
            sc_iou: self.sc.iou(),
            ssc_miou: mean_present(&per),
            per_class_iou: per,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_prediction_is_perfect() {
        let gt = [0, 1, 2, 3, 0, 11];
        let kinds = [VoxelKind::Occluded; 6];
        assert_eq!(scene_completion_metrics(&gt, &gt, &kinds).unwrap(), (1.0, 1.0, 1.0));
        let all: Vec<u8> = (1..=11).collect();
        let (per, m) = ssc_metrics(&all, &all, &[VoxelKind::ObservedSurface; 11]).unwrap();
        assert!(per.iter().all(|v| *v == Some(1.0)));
        assert_eq!(m, 1.0);
    }

    #[test]
    fn hand_case_three_occluded_cells() {
        let kinds = [VoxelKind::Occluded; 3];
        let pred = [1, 1, 0];
        let gt = [0, 1, 1];
        let (p, r, iou) = scene_completion_metrics(&pred, &gt, &kinds).unwrap();
        assert_eq!((p, r), (0.5, 0.5));
        assert_eq!(iou, 1.0 / 3.0);
    }

    #[test]
    fn two_voxel_ssc_case() {
        let kinds = [VoxelKind::ObservedSurface, VoxelKind::Occluded];
        let (per, m) = ssc_metrics(&[1, 1], &[1, 2], &kinds).unwrap();
        assert_eq!(per[0], Some(0.5));
        assert_eq!(per[1], Some(0.0));
        assert!(per[2..].iter().all(Option::is_none));
        assert_eq!(m, 0.25);
    }

    #[test]
    fn region_restrictions() {
        let kinds = [VoxelKind::ObservedSurface, VoxelKind::Occluded, VoxelKind::VisibleEmpty];
        let gt = [3, 4, 0];
        let base = scene_completion_metrics(&[3, 4, 0], &gt, &kinds).unwrap();
        assert_eq!(scene_completion_metrics(&[0, 4, 0], &gt, &kinds).unwrap(), base);
        let ssc = ssc_metrics(&[3, 4, 0], &gt, &kinds).unwrap();
        assert_eq!(ssc_metrics(&[3, 4, 9], &gt, &kinds).unwrap(), ssc);
    }

    #[test]
    fn all_empty_predictor_has_zero_recall() {
        let kinds = [VoxelKind::Occluded; 4];
        let (_, r, iou) = scene_completion_metrics(&[0; 4], &[1, 0, 2, 0], &kinds).unwrap();
        assert_eq!((r, iou), (0.0, 0.0));
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            scene_completion_metrics(&[0, 1], &[0], &[VoxelKind::Occluded]),
            Err(Error::Dimension { .. })
        ));
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>, Vec<VoxelKind>) {
        let n = 6 * 4 * 6;
        let pred = (0..n).map(|_| if rng.gen_bool(0.4) { 0 } else { rng.gen_range(1..=11) }).collect();
        let gt = (0..n).map(|_| if rng.gen_bool(0.4) { 0 } else { rng.gen_range(1..=11) }).collect();
        let kinds = (0..n).map(|_| VoxelKind::from_code(rng.gen_range(0..3)).unwrap()).collect();
        (pred, gt, kinds)
    }

    proptest! {
        #[test]
        fn sc_ordering(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g, k) = random_case(&mut rng);
            let (pr, rc, iou) = scene_completion_metrics(&p, &g, &k).unwrap();
            prop_assert!(0.0 <= iou && iou <= pr.min(rc) && pr.max(rc) <= 1.0);
        }
    }
}

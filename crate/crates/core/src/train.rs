//! Optimizer, learning-rate schedule, stratified point batching, and the
//! training / evaluation / inference loops.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::objective;
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::network::{forward_cloud, forward_full, PvaConfig, PvaModel};
use crate::tensor::ParamStore;
use crate::volume::{generate_points, voxelize_predictions, PointCloud, TsdfVolume, VoxelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub observed_sample_count: usize,
    pub occluded_sample_count: usize,
    pub seed: u64,
    /// Evaluate on the validation scenes every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
            epochs: 100,
            batch_size: 4,
            lambda: 0.5,
            observed_sample_count: 512,
            occluded_sample_count: 2048,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-resolution quotas and batch size.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 8,
            observed_sample_count: 2048,
            occluded_sample_count: 8192,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.poly_power > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.lambda >= 0.0
            && self.observed_sample_count + self.occluded_sample_count > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid training config {self:?}")))
        }
    }
}

/// `lr0 · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Schedule { iter, max_iter });
    }
    if max_iter == 0 {
        return Ok(cfg.lr0);
    }
    Ok(cfg.lr0 * (1.0 - iter as f64 / max_iter as f64).powf(cfg.poly_power))
}

/// Heavy-ball SGD: `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`. Clears
/// gradients afterwards.
pub fn sgd_step(store: &mut ParamStore, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in store.iter_mut() {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        for ((theta, v), g) in p.tensor.values_mut().iter_mut().zip(p.momentum.iter_mut()).zip(grad) {
            let g = g + wd * *theta;
            *v = mu * *v + g;
            *theta -= lr * *v;
        }
        p.tensor.clear_grad();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub warnings: Vec<String>,
}

fn draw<R: Rng + ?Sized>(pool: &[usize], quota: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= quota {
        let mut picked: Vec<usize> = sample(rng, pool.len(), quota).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        picked
    } else {
        (0..quota).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Stratified draw of observed-surface and occluded points. A stratum
/// smaller than its quota is drawn with replacement; an empty stratum hands
/// its quota to the other.
pub fn sample_batch<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let observed: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.kind[i] == VoxelKind::ObservedSurface).collect();
    let occluded: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.kind[i] == VoxelKind::Occluded).collect();
    let (mut q_obs, mut q_occ) = (cfg.observed_sample_count, cfg.occluded_sample_count);
    let mut warnings = Vec::new();
    match (observed.is_empty(), occluded.is_empty()) {
        (true, true) => return Err(Error::EmptyScene),
        (true, false) => {
            warnings.push("no observed-surface points; quota moved to occluded".to_string());
            q_occ += q_obs;
            q_obs = 0;
        }
        (false, true) => {
            warnings.push("no occluded points; quota moved to observed-surface".to_string());
            q_obs += q_occ;
            q_occ = 0;
        }
        _ => {}
    }
    let mut indices = if q_obs > 0 { draw(&observed, q_obs, rng) } else { Vec::new() };
    if q_occ > 0 {
        indices.extend(draw(&occluded, q_occ, rng));
    }
    Ok(Batch { indices, warnings })
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ssc: f64,
    pub sp: f64,
}

impl IterRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter {} epoch {} lr {} loss {} ssc {} sp {}",
            self.iter, self.epoch, self.lr, self.total, self.ssc, self.sp
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub records: Vec<IterRecord>,
    pub evals: Vec<(usize, EvalReport)>,
}

impl TrainSummary {
    /// Mean total loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Number of optimizer steps for a run.
pub fn max_iterations(train_scenes: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * train_scenes.div_ceil(cfg.batch_size)
}

/// Trains `model` in place. `log` receives one line per iteration plus
/// evaluation lines. Deterministic given the configs.
pub fn train(
    model: &mut PvaModel,
    train_set: &[TsdfVolume],
    val_set: &[TsdfVolume],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Malformed("training split is empty".into()));
    }
    let clouds: Vec<PointCloud> = train_set.iter().map(generate_points).collect();
    if let Some(i) = clouds.iter().position(PointCloud::is_empty) {
        return Err(Error::Malformed(format!("training scene {i} has no kept voxels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_iter = max_iterations(train_set.len(), cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut summary = TrainSummary {
        iterations: 0,
        records: Vec::with_capacity(max_iter),
        evals: Vec::new(),
    };
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let (mut total, mut ssc, mut sp) = (0.0, 0.0, 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &s in chunk {
                let batch = sample_batch(&clouds[s], cfg, &mut rng)?;
                for w in &batch.warnings {
                    log(&format!("warn iter {iter} scene {s}: {w}"));
                }
                let sub = clouds[s].select(&batch.indices);
                let mut fp = forward_cloud(model, &train_set[s], &sub, &mut rng)?;
                let lb = objective(&mut fp, cfg.lambda)?;
                let value = fp.graph.scalar(lb.total);
                if !value.is_finite() {
                    return Err(Error::Numeric {
                        iter,
                        what: format!("loss {value} on scene {s}"),
                    });
                }
                total += scale * value;
                ssc += scale * lb.ssc;
                sp += scale * lb.sp;
                let out = fp.graph.scale(lb.total, scale);
                fp.graph.backward(out)?.accumulate(&fp.graph, &mut model.store);
            }
            let lr = poly_lr(iter, max_iter, cfg)?;
            sgd_step(&mut model.store, lr, cfg)?;
            if model.store.iter().any(|(_, p)| !p.tensor.is_finite()) {
                return Err(Error::Numeric {
                    iter,
                    what: "non-finite parameter after update".into(),
                });
            }
            let rec = IterRecord {
                iter,
                epoch,
                lr,
                total,
                ssc,
                sp,
            };
            log(&rec.log_line());
            summary.records.push(rec);
            iter += 1;
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !val_set.is_empty() {
            let report = evaluate(model, val_set, cfg.seed)?;
            log(&format!("eval epoch {epoch} ssc_miou {} sc_iou {}", report.ssc_miou, report.sc_iou));
            summary.evals.push((epoch, report));
        }
    }
    summary.iterations = iter;
    Ok(summary)
}

/// Predicted label volume for one scene using every kept voxel as input.
pub fn predict(model: &PvaModel, volume: &TsdfVolume, seed: u64) -> Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fp, cloud) = forward_full(model, volume, &mut rng)?;
    voxelize_predictions(&cloud, &fp.logits_tensor(), volume.dims)
}

/// Pools metrics over scenes by global counts.
pub fn evaluate(model: &PvaModel, scenes: &[TsdfVolume], seed: u64) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::default();
    for (i, v) in scenes.iter().enumerate() {
        let pred = predict(model, v, seed.wrapping_add(i as u64))?;
        acc.add(&pred, &v.label, &v.kind)?;
    }
    Ok(acc.report())
}

/// A named network configuration in an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub table: &'static str,
    pub name: &'static str,
    pub config: PvaConfig,
}

/// Module, fusion, and propagation grids. Shared configurations appear
/// under each table they belong to but are trained once.
pub fn ablation_grid(base: &PvaConfig) -> Vec<AblationVariant> {
    use crate::network::{AvaMode::*, FpMode::*};
    let v = |table, name, ava, fp| AblationVariant {
        table,
        name,
        config: PvaConfig {
            ava_mode: ava,
            fp_mode: fp,
            ..base.clone()
        },
    };
    vec![
        v("modules", "baseline", None, InverseEuclidean),
        v("modules", "+sp", None, SemanticAware),
        v("modules", "+ava", Anisotropic, InverseEuclidean),
        v("modules", "+ava+sp", Anisotropic, SemanticAware),
        v("fusion", "nearest", Nearest, SemanticAware),
        v("fusion", "spherical", Spherical, SemanticAware),
        v("fusion", "anisotropic", Anisotropic, SemanticAware),
        v("propagation", "inverse-euclidean", Anisotropic, InverseEuclidean),
        v("propagation", "cosine", Anisotropic, Cosine),
        v("propagation", "semantic-aware", Anisotropic, SemanticAware),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub table: &'static str,
    pub name: &'static str,
    pub report: EvalReport,
}

/// Trains each distinct configuration of the grid and evaluates it on the
/// held-out scenes.
pub fn run_ablation(
    grid: &[AblationVariant],
    train_set: &[TsdfVolume],
    test_set: &[TsdfVolume],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<AblationResult>> {
    let mut cache: Vec<(PvaConfig, EvalReport)> = Vec::new();
    let mut out = Vec::with_capacity(grid.len());
    for v in grid {
        let report = match cache.iter().find(|(c, _)| *c == v.config) {
            Some((_, r)) => r.clone(),
            None => {
                log(&format!("ablation train {} / {}", v.table, v.name));
                let mut model = PvaModel::new(v.config.clone())?;
                train(&mut model, train_set, &[], cfg, &mut |_| {})?;
                let r = evaluate(&model, test_set, cfg.seed)?;
                cache.push((v.config.clone(), r.clone()));
                r
            }
        };
        log(&format!("ablation {} {} ssc_miou {} sc_iou {}", v.table, v.name, report.ssc_miou, report.sc_iou));
        out.push(AblationResult {
            table: v.table,
            name: v.name,
            report,
        });
    }
    Ok(out)
}

/// Plain-text comparison table grouped by grid.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut s = String::new();
    let mut last = "";
    for r in results {
        if r.table != last {
            s.push_str(&format!("[{}]\n{:<20} {:>9} {:>9} {:>9} {:>9}\n", r.table, "variant", "ssc_miou", "sc_iou", "sc_prec", "sc_rec"));
            last = r.table;
        }
        s.push_str(&format!(
            "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            r.name, r.report.ssc_miou, r.report.sc_iou, r.report.sc_precision, r.report.sc_recall
        ));
    }
    s
}

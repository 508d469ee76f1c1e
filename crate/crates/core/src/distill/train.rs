//! Teacher and student training loops.
//!
//! Teachers train on cross-entropy; the best-validation checkpoint is kept
//! alongside the final one (early-stopped teacher selection). Students train
//! against frozen teachers with the blended objective
//! `(1 - lambda) CE + lambda KD_m + beta * feature term`, where the feature
//! term is either the orthogonal patch-Gram loss, direct merged-map MSE
//! matching, or absent.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::Checkpoint;
use crate::data::{Dataset, ModelData, PiDataset};
use crate::distill::losses::{
    kd_loss, map_mse_loss, merge_maps, multi_teacher_kd_loss, orth_loss, patch_grams,
    similarity_map, DistillConfig, PatchGram, SimilarityMap,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::graph::{Graph, Tensor};
use crate::nn::model::{Model, ModelSpec};
use crate::nn::ops;
use crate::nn::optim::{LrSchedule, OptimizerState};

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Loop-level hyperparameters shared by all roles.
#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Which feature-level knowledge the student matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTransfer {
    /// Logits only.
    None,
    /// Orthogonal patch-Gram knowledge from the merged teacher map.
    OrthogonalPatchGram,
    /// Row-normalized merged maps matched by mean squared error.
    MergedMapMse,
}

impl DistillConfig {
    /// The feature term implied by the config alone.
    pub fn feature_transfer(&self) -> FeatureTransfer {
        if self.use_orth && self.beta > 0.0 {
            FeatureTransfer::OrthogonalPatchGram
        } else {
            FeatureTransfer::None
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_kd: f64,
    pub train_orth: f64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
        w.write_record([
            "epoch", "lr", "train_loss", "train_ce", "train_kd", "train_orth", "val_acc",
            "val_ece", "val_nll",
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.17e}", r.lr),
                format!("{:.17e}", r.train_loss),
                format!("{:.17e}", r.train_ce),
                format!("{:.17e}", r.train_kd),
                format!("{:.17e}", r.train_orth),
                format!("{:.17e}", r.val_acc),
                format!("{:.17e}", r.val_ece),
                format!("{:.17e}", r.val_nll),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of one training run.
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the highest validation accuracy
    /// (earliest epoch on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Checkpoint after the last epoch.
    pub final_model: Checkpoint,
    pub history: History,
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

struct BestTracker {
    ckpt: Checkpoint,
    epoch: usize,
    acc: f64,
}

impl BestTracker {
    fn new(model: &Model) -> Self {
        BestTracker {
            ckpt: model.to_checkpoint(),
            epoch: 0,
            acc: f64::NEG_INFINITY,
        }
    }

    fn observe(&mut self, model: &Model, epoch: usize, acc: f64) {
        if acc > self.acc {
            self.acc = acc;
            self.epoch = epoch;
            self.ckpt = model.to_checkpoint();
        }
    }
}

/// Train a classifier from random initialization on cross-entropy, tracking
/// the best-validation checkpoint.
pub fn train_teacher(
    train: &ModelData,
    val: &ModelData,
    spec: &ModelSpec,
    schedule: &LrSchedule,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let mut model = Model::init(spec, seed)?;
    if hyper.epochs == 0 {
        let ckpt = model.to_checkpoint();
        return Ok(TrainOutcome {
            best: ckpt.clone(),
            best_epoch: 0,
            best_val_acc: f64::NAN,
            final_model: ckpt,
            history: History::default(),
        });
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.len() < hyper.batch_size {
        return Err(Error::Config(format!(
            "train split of {} windows is smaller than one batch of {}",
            train.len(),
            hyper.batch_size
        )));
    }
    let mut opt = OptimizerState::new(
        schedule.lr_at_epoch(0),
        hyper.momentum,
        hyper.weight_decay,
        &model.params,
    )?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let mut best = BestTracker::new(&model);
    let mut history = History::default();

    for epoch in 0..hyper.epochs {
        let lr = schedule.lr_at_epoch(epoch);
        opt.lr = lr;
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in shuffled_batches(train.len(), hyper.batch_size, &mut rng) {
            let (shape, values, labels) = train.gather(&batch);
            let g = Graph::training();
            let input = g.tensor(shape, values);
            let (logits, _acts, leaves) = model.forward_train(&g, &input, &[])?;
            let loss = ops::cross_entropy_mean(&logits, &labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss_val;
            steps += 1;
            let grads = g.backward(&loss)?;
            model.absorb_grads(&leaves, &grads);
            opt.step(&mut model.params)?;
        }
        let report = evaluate(&model, val)?;
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            train_ce: loss_sum / steps.max(1) as f64,
            train_kd: 0.0,
            train_orth: 0.0,
            val_acc: report.accuracy,
            val_ece: report.ece,
            val_nll: report.nll,
        });
        best.observe(&model, epoch, report.accuracy);
    }
    Ok(TrainOutcome {
        best: best.ckpt,
        best_epoch: best.epoch,
        best_val_acc: best.acc,
        final_model: model.to_checkpoint(),
        history,
    })
}

/// Initialize a student from a scratch-trained checkpoint of identical
/// architecture. Parameters load bitwise.
pub fn anneal_init(student_spec: &ModelSpec, scratch: &Checkpoint) -> Result<Model> {
    if &scratch.spec != student_spec {
        let expected = Model::init(student_spec, 0)?;
        let got = Model::init(&scratch.spec, 0)?;
        let mut diffs = Vec::new();
        let names = |m: &Model| -> Vec<(String, Vec<usize>)> {
            m.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
        };
        let (a, b) = (names(&expected), names(&got));
        for i in 0..a.len().max(b.len()) {
            match (a.get(i), b.get(i)) {
                (Some(x), Some(y)) if x == y => {}
                (x, y) => diffs.push(format!("{x:?} vs {y:?}")),
            }
        }
        if diffs.is_empty() {
            diffs.push(format!("spec fields differ: {student_spec:?} vs {:?}", scratch.spec));
        }
        return Err(Error::ArchMismatch(diffs.join("; ")));
    }
    Model::from_checkpoint(scratch)
}

/// Student-role options: the distillation config plus the role-dependent
/// deviations from it.
#[derive(Debug, Clone)]
pub struct StudentOptions {
    pub cfg: DistillConfig,
    pub feature: FeatureTransfer,
    /// Distil from teacher1 logits only (classic single-teacher objective).
    pub single_teacher: bool,
}

/// Teacher-side context for one step: logits and captured stage activations
/// living in a frozen (non-recording) graph.
pub struct TeacherContext<'a> {
    pub logits: &'a Tensor,
    pub acts: &'a BTreeMap<usize, Tensor>,
}

/// Loss component values for bookkeeping.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub feature: f64,
}

/// Assemble the full distillation objective for one batch:
/// `(1 - lambda) CE + lambda KD + beta * feature`.
///
/// `teacher2` is required for multi-teacher KD and for any feature transfer
/// (the merged map needs both teachers).
pub fn total_loss(
    student_logits: &Tensor,
    student_acts: &BTreeMap<usize, Tensor>,
    teacher1: TeacherContext<'_>,
    teacher2: Option<TeacherContext<'_>>,
    labels: &[usize],
    options: &StudentOptions,
) -> Result<(Tensor, LossParts)> {
    let cfg = &options.cfg;
    let ce = ops::cross_entropy_mean(student_logits, labels)?;
    let kd = if options.single_teacher {
        kd_loss(teacher1.logits, student_logits, cfg.tau)?
    } else {
        let t2 = teacher2
            .as_ref()
            .ok_or_else(|| Error::Config("multi-teacher KD needs a second teacher".into()))?;
        multi_teacher_kd_loss(teacher1.logits, t2.logits, student_logits, cfg.tau, cfg.alpha)?
    };
    let mut parts = LossParts {
        ce: ce.item(),
        kd: kd.item(),
        ..Default::default()
    };
    let mut total = ops::add(
        &ops::scale(&ce, 1.0 - cfg.lambda)?,
        &ops::scale(&kd, cfg.lambda)?,
    )?;

    if options.feature != FeatureTransfer::None && cfg.beta > 0.0 {
        let t2 = teacher2
            .as_ref()
            .ok_or_else(|| Error::Config("feature transfer needs a second teacher".into()))?;
        let mut teacher_maps: Vec<SimilarityMap> = Vec::new();
        let mut student_maps: Vec<SimilarityMap> = Vec::new();
        for (i, &(l1, l2, ls)) in cfg.layer_pairs.iter().enumerate() {
            let a1 = teacher1.acts.get(&l1).ok_or_else(|| Error::LayerPair {
                index: i,
                reason: format!("teacher1 activation for stage {l1} not captured"),
            })?;
            let a2 = t2.acts.get(&l2).ok_or_else(|| Error::LayerPair {
                index: i,
                reason: format!("teacher2 activation for stage {l2} not captured"),
            })?;
            let as_ = student_acts.get(&ls).ok_or_else(|| Error::LayerPair {
                index: i,
                reason: format!("student activation for stage {ls} not captured"),
            })?;
            let g1 = similarity_map(a1)?;
            let g2 = similarity_map(a2)?;
            teacher_maps.push(merge_maps(&g1, &g2, cfg.alpha)?);
            student_maps.push(similarity_map(as_)?);
        }
        let feature = match options.feature {
            FeatureTransfer::OrthogonalPatchGram => {
                let tg: Vec<PatchGram> = teacher_maps
                    .iter()
                    .map(|m| patch_grams(m, cfg.k))
                    .collect::<Result<_>>()?;
                let sg: Vec<PatchGram> = student_maps
                    .iter()
                    .map(|m| patch_grams(m, cfg.k))
                    .collect::<Result<_>>()?;
                orth_loss(&tg, &sg)?
            }
            FeatureTransfer::MergedMapMse => map_mse_loss(&teacher_maps, &student_maps)?,
            FeatureTransfer::None => unreachable!(),
        };
        parts.feature = feature.item();
        total = ops::add(&total, &ops::scale(&feature, cfg.beta)?)?;
    }
    parts.total = total.item();
    Ok((total, parts))
}

fn capture_sets(options: &StudentOptions) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    if options.feature == FeatureTransfer::None {
        return (Vec::new(), Vec::new(), Vec::new());
    }
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    let mut s = Vec::new();
    for &(l1, l2, ls) in &options.cfg.layer_pairs {
        if !t1.contains(&l1) {
            t1.push(l1);
        }
        if !t2.contains(&l2) {
            t2.push(l2);
        }
        if !s.contains(&ls) {
            s.push(ls);
        }
    }
    (t1, t2, s)
}

/// Train a student against frozen teachers.
///
/// The persistence-image dataset must align index-for-index with the series
/// dataset; batches are drawn with drop-last so every batch size is
/// divisible by `k`.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    series_train: &Dataset,
    pi_train: Option<&PiDataset>,
    series_val: &Dataset,
    teacher1: &Model,
    teacher2: Option<&Model>,
    student_spec: &ModelSpec,
    init_from: Option<&Checkpoint>,
    options: &StudentOptions,
    schedule: &LrSchedule,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    options.cfg.validate()?;
    schedule.validate()?;
    let needs_t2 = !options.single_teacher || options.feature != FeatureTransfer::None;
    if needs_t2 {
        let pi = pi_train.ok_or_else(|| {
            Error::Config("this role needs the persistence-image dataset".into())
        })?;
        if pi.len() != series_train.len() {
            return Err(Error::Misaligned(format!(
                "{} series windows vs {} persistence images",
                series_train.len(),
                pi.len()
            )));
        }
        for i in 0..pi.len() {
            let sl = series_train.windows[i].label.unwrap_or(0);
            if sl != pi.labels[i] {
                return Err(Error::Misaligned(format!(
                    "label mismatch at index {i}: series {sl} vs image {}",
                    pi.labels[i]
                )));
            }
        }
        if teacher2.is_none() {
            return Err(Error::Config("this role needs teacher2".into()));
        }
    }
    if options.feature != FeatureTransfer::None && hyper.batch_size % options.cfg.k != 0 {
        return Err(Error::BatchNotDivisible {
            batch: hyper.batch_size,
            k: options.cfg.k,
        });
    }

    let mut student = match init_from {
        Some(ckpt) => anneal_init(student_spec, ckpt)?,
        None => Model::init(student_spec, seed)?,
    };
    if hyper.epochs == 0 {
        let ckpt = student.to_checkpoint();
        return Ok(TrainOutcome {
            best: ckpt.clone(),
            best_epoch: 0,
            best_val_acc: f64::NAN,
            final_model: ckpt,
            history: History::default(),
        });
    }
    if series_train.len() < hyper.batch_size {
        return Err(Error::Config(format!(
            "train split of {} windows is smaller than one batch of {}",
            series_train.len(),
            hyper.batch_size
        )));
    }

    let (cap1, cap2, cap_s) = capture_sets(options);
    let mut opt = OptimizerState::new(
        schedule.lr_at_epoch(0),
        hyper.momentum,
        hyper.weight_decay,
        &student.params,
    )?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let mut best = BestTracker::new(&student);
    let mut history = History::default();
    let series = ModelData::Series(series_train);

    for epoch in 0..hyper.epochs {
        let lr = schedule.lr_at_epoch(epoch);
        opt.lr = lr;
        let mut sums = LossParts::default();
        let mut steps = 0usize;
        for batch in shuffled_batches(series_train.len(), hyper.batch_size, &mut rng) {
            let (shape, values, labels) = series.gather(&batch);

            // frozen teachers run in a non-recording graph
            let tg = Graph::inference();
            let series_input = tg.tensor(shape.clone(), values.clone());
            let (t1_logits, t1_acts) = teacher1.forward_eval(&tg, &series_input, &cap1)?;
            let t2_out = match (needs_t2, teacher2, pi_train) {
                (true, Some(t2), Some(pi)) => {
                    let (pi_shape, pi_values, _) = ModelData::Images(pi).gather(&batch);
                    let pi_input = tg.tensor(pi_shape, pi_values);
                    Some(t2.forward_eval(&tg, &pi_input, &cap2)?)
                }
                _ => None,
            };

            let g = Graph::training();
            let input = g.tensor(shape, values);
            let (s_logits, s_acts, leaves) = student.forward_train(&g, &input, &cap_s)?;
            let (loss, parts) = total_loss(
                &s_logits,
                &s_acts,
                TeacherContext {
                    logits: &t1_logits,
                    acts: &t1_acts,
                },
                t2_out.as_ref().map(|(l, a)| TeacherContext { logits: l, acts: a }),
                &labels,
                options,
            )?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sums.total += parts.total;
            sums.ce += parts.ce;
            sums.kd += parts.kd;
            sums.feature += parts.feature;
            steps += 1;
            let grads = g.backward(&loss)?;
            student.absorb_grads(&leaves, &grads);
            opt.step(&mut student.params)?;
        }
        let report = evaluate(&student, &ModelData::Series(series_val))?;
        let inv = 1.0 / steps.max(1) as f64;
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: sums.total * inv,
            train_ce: sums.ce * inv,
            train_kd: sums.kd * inv,
            train_orth: sums.feature * inv,
            val_acc: report.accuracy,
            val_ece: report.ece,
            val_nll: report.nll,
        });
        best.observe(&student, epoch, report.accuracy);
    }
    Ok(TrainOutcome {
        best: best.ckpt,
        best_epoch: best.epoch,
        best_val_acc: best.acc,
        final_model: student.to_checkpoint(),
        history,
    })
}

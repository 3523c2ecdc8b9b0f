//! Mini-batch Adam training and stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, bce_from_logit, sigmoid};
use super::model::{Architecture, CnnModel, Workspace};
use crate::error::{Error, Result};
use crate::imaging::GreyImage;
use crate::scalar::Scalar;

/// Optimiser settings; recorded verbatim in every [`TrainReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage<S> {
    pub image: GreyImage<S>,
    pub label: u8,
}

/// Metrics after one epoch. Training loss and AUC are running values over
/// the epoch's batches, taken before each batch's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub auc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fold: Option<usize>,
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn epoch(&self, epoch: usize) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|m| m.epoch == epoch)
    }

    /// CSV rows `fold,epoch,loss,val_loss,auc,val_auc`, without header.
    pub fn csv_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.epochs
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{},{}",
                    self.fold.map(|f| f.to_string()).unwrap_or_default(),
                    m.epoch,
                    m.loss,
                    opt(m.val_loss),
                    opt(m.auc),
                    opt(m.val_auc)
                )
            })
            .collect()
    }
}

pub const METRICS_CSV_HEADER: &str = "fold,epoch,loss,val_loss,auc,val_auc";

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    step: i32,
}

impl<S: Scalar> Adam<S> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [S], grad: &[S], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let c1 = S::one() - b1.powi(self.step);
        let c2 = S::one() - b2.powi(self.step);
        let lr = S::of(cfg.learning_rate);
        let eps = S::of(cfg.adam_epsilon);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Scores a batch of images; order is preserved.
pub fn predict<S: Scalar>(model: &CnnModel<S>, images: &[&GreyImage<S>]) -> Result<Vec<S>> {
    images
        .par_iter()
        .map_init(Workspace::new, |ws, img| {
            let d = model.architecture().input_dim;
            if img.width() != d || img.height() != d {
                return Err(Error::ShapeMismatch {
                    expected: format!("{d}x{d} image"),
                    found: format!("{}x{}", img.width(), img.height()),
                });
            }
            Ok(sigmoid(model.logit_pixels(img.pixels(), ws)))
        })
        .collect()
}

/// Mean BCE loss and AUC (when both classes occur) over a labelled set.
pub fn evaluate_set<S: Scalar>(model: &CnnModel<S>, data: &[LabeledImage<S>]) -> Result<(f64, Option<f64>)> {
    let logits: Vec<f64> = data
        .par_iter()
        .map_init(Workspace::new, |ws, s| model.logit_pixels(s.image.pixels(), ws).as_f64())
        .collect();
    let loss = logits
        .iter()
        .zip(data)
        .map(|(&z, s)| bce_from_logit(z, f64::from(s.label)))
        .sum::<f64>()
        / data.len().max(1) as f64;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok((loss, auc(&scores, &labels).ok()))
}

fn check_classes<S>(data: &[LabeledImage<S>]) -> Result<()> {
    if let Some(bad) = data.iter().find(|s| s.label > 1) {
        return Err(Error::InvalidTarget(bad.label));
    }
    let pos = data.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::DegenerateDataset(format!(
            "{} samples, {pos} malicious: both classes are required",
            data.len()
        )));
    }
    Ok(())
}

/// Trains `model` in place with mini-batch Adam on binary cross-entropy.
///
/// `on_epoch` runs after every epoch with that epoch's metrics and the
/// current parameters, e.g. to snapshot checkpoints. Per-sample gradients
/// within a batch may be computed in parallel; they are summed in sample
/// order so results do not depend on the thread count.
pub fn train<S: Scalar>(
    model: &mut CnnModel<S>,
    data: &[LabeledImage<S>],
    validation: &[LabeledImage<S>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &CnnModel<S>),
) -> Result<TrainReport> {
    check_classes(data)?;
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut report = TrainReport {
        fold: None,
        config: config.clone(),
        epochs: Vec::new(),
    };
    let n_params = model.param_count();
    let mut adam = Adam::new(n_params);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut seen_logits = Vec::with_capacity(data.len());
        let mut seen_labels = Vec::with_capacity(data.len());
        let mut loss_sum = 0.0;

        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<(Vec<S>, S)> = batch
                .par_iter()
                .map_init(Workspace::new, |ws, &i| {
                    let mut g = vec![S::zero(); n_params];
                    let s = &data[i];
                    let z = model
                        .accumulate_param_gradient(s.image.pixels(), s.label, &mut g, ws)
                        .expect("training images match the architecture");
                    (g, z)
                })
                .collect();
            let mut grad = vec![S::zero(); n_params];
            for ((g, z), &i) in per_sample.iter().zip(batch) {
                for (a, &b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
                let label = data[i].label;
                loss_sum += bce_from_logit(z.as_f64(), f64::from(label));
                seen_logits.push(sigmoid(z.as_f64()));
                seen_labels.push(label);
            }
            let scale = S::one() / S::of(batch.len() as f64);
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.update(model.params_mut(), &grad, config);
        }
        model.epochs_trained += 1;

        let (val_loss, val_auc) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_set(model, validation)?;
            (Some(l), a)
        };
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            auc: auc(&seen_logits, &seen_labels).ok(),
            val_loss,
            val_auc,
        };
        on_epoch(&metrics, model);
        report.epochs.push(metrics);
    }
    Ok(report)
}

/// Assigns each sample to one of `k` folds, stratified by label.
///
/// Each class is shuffled and dealt round-robin, continuing the count
/// across classes, so fold sizes differ by at most one.
pub fn fold_assignment(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidFolds(k));
    }
    if labels.len() < k {
        return Err(Error::DegenerateDataset(format!(
            "{} samples cannot fill {k} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut dealt = 0;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome<S> {
    pub fold: usize,
    pub validation_indices: Vec<usize>,
    pub model: CnnModel<S>,
    pub report: TrainReport,
}

/// Trains one model per fold on the other `k - 1` folds and validates on
/// the held-out one. Fold `f` starts from `CnnModel::init(arch, seed + f)`.
pub fn kfold_train<S: Scalar>(
    data: &[LabeledImage<S>],
    k: usize,
    arch: &Architecture,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochMetrics, &CnnModel<S>),
) -> Result<Vec<FoldOutcome<S>>> {
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let assignment = fold_assignment(&labels, k, config.seed)?;
    check_classes(data)?;
    let mut out = Vec::with_capacity(k);
    for fold in 0..k {
        let (mut train_set, mut val_set, mut val_idx) = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in data.iter().enumerate() {
            if assignment[i] == fold {
                val_set.push(s.clone());
                val_idx.push(i);
            } else {
                train_set.push(s.clone());
            }
        }
        let mut model = CnnModel::init(arch.clone(), config.seed.wrapping_add(fold as u64))?;
        let mut fold_cfg = config.clone();
        fold_cfg.seed = config.seed.wrapping_add(fold as u64);
        let mut report = train(&mut model, &train_set, &val_set, &fold_cfg, |m, model| {
            on_epoch(fold, m, model)
        })?;
        report.fold = Some(fold);
        out.push(FoldOutcome {
            fold,
            validation_indices: val_idx,
            model,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 12,
            kernel: 3,
            pool: 2,
            filters: vec![4, 6],
        }
    }

    /// Bright-left vs bright-right images.
    fn toy_data(n: usize) -> Vec<LabeledImage<f64>> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let px = (0..144)
                    .map(|p| {
                        let left = p % 12 < 6;
                        let noise = ((p * 31 + i * 17) % 13) as f64 / 40.0;
                        if left == (label == 1) { 0.7 + noise / 2.0 } else { noise }
                    })
                    .collect();
                LabeledImage {
                    image: GreyImage::new(12, 12, px).unwrap(),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = CnnModel::init(tiny_arch(), 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let report = train(&mut m, &toy_data(8), &[], &cfg, |_, _| {}).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn single_class_is_degenerate() {
        let data: Vec<_> = toy_data(8).into_iter().filter(|s| s.label == 1).collect();
        let mut m = CnnModel::init(tiny_arch(), 1).unwrap();
        assert!(matches!(
            train(&mut m, &data, &[], &TrainConfig::default(), |_, _| {}),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn training_is_seeded_and_learns() {
        let data = toy_data(64);
        let cfg = TrainConfig { epochs: 15, batch_size: 8, learning_rate: 3e-3, seed: 5, ..Default::default() };
        let run = || {
            let mut m = CnnModel::init(tiny_arch(), 9).unwrap();
            let r = train(&mut m, &data, &data, &cfg, |_, _| {}).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1.params(), m2.params());
        assert_eq!(r1, r2);
        assert_eq!(m1.epochs_trained, 15);
        let first = r1.epochs[0].val_loss.unwrap();
        let last = r1.last().unwrap();
        assert!(last.val_loss.unwrap() < first, "{r1:?}");
        assert!(last.val_auc.unwrap() > 0.95, "{r1:?}");
    }

    #[test]
    fn folds_partition_the_data() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 3 == 0) as u8).collect();
        let a = fold_assignment(&labels, 5, 11).unwrap();
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&x| x == f).count(), 20);
        }
        assert_eq!(a, fold_assignment(&labels, 5, 11).unwrap());
        assert!(matches!(fold_assignment(&labels, 1, 0), Err(Error::InvalidFolds(1))));
        assert!(fold_assignment(&labels[..3], 5, 0).is_err());
    }

    #[test]
    fn kfold_reports_every_fold() {
        let data = toy_data(20);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
        let mut calls = 0;
        let out = kfold_train(&data, 5, &tiny_arch(), &cfg, |_, _, _| calls += 1).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(calls, 10);
        let mut seen: Vec<usize> = out.iter().flat_map(|f| f.validation_indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for f in &out {
            assert_eq!(f.validation_indices.len(), 4);
            assert_eq!(f.report.fold, Some(f.fold));
            assert_eq!(f.report.epochs.len(), 2);
            assert_eq!(f.report.csv_rows().len(), 2);
        }
    }
}

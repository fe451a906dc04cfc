//! Training loop: batch composition, Adam updates, holdout validation and
//! early stopping.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{Backbone, FeatureStack};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, KShotSplit};
use crate::error::{Error, Result};
use crate::layers::{Mode, Tensors};
use crate::model::{AnomalyModel, LossSettings, PairSource};
use crate::objective::LossReport;
use crate::optim::Adam;

/// Backbone features with image-level labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub features: Vec<FeatureStack>,
    pub labels: Vec<u8>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: FeatureStack, label: u8) {
        self.features.push(features);
        self.labels.push(label);
    }

    pub fn indices_of(&self, label: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Run the frozen backbone over image files, in parallel, preserving order.
pub fn extract_features(backbone: &Backbone, paths: &[PathBuf]) -> Result<Vec<FeatureStack>> {
    let size = backbone.spec().input_size;
    paths
        .par_iter()
        .map(|p| backbone.extract_features(&data::load_image(p, size)?))
        .collect()
}

/// Features of every training image of a split: normals first, then the anomalous shots.
pub fn training_set(split: &KShotSplit, backbone: &Backbone) -> Result<LabeledSet> {
    let mut paths: Vec<PathBuf> = split.train_normals.iter().map(|p| split.resolve(p)).collect();
    paths.extend(split.train_anomalies.iter().map(|t| split.resolve(&t.path)));
    let features = extract_features(backbone, &paths)?;
    let mut labels = vec![0u8; split.train_normals.len()];
    labels.extend(std::iter::repeat_n(1u8, split.train_anomalies.len()));
    Ok(LabeledSet { features, labels })
}

/// Deterministically carve the early-stopping holdout: a share of the normals
/// plus up to two anomalies, always leaving at least one anomaly for training.
pub fn carve_holdout(set: &LabeledSet, config: &TrainConfig) -> (LabeledSet, LabeledSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x686f_6c64);
    let normals = data::shuffled(&set.indices_of(0), &mut rng);
    let anomalies = data::shuffled(&set.indices_of(1), &mut rng);
    let n_norm = ((normals.len() as f64) * config.holdout_fraction).round() as usize;
    let n_anom = 2.min(anomalies.len().saturating_sub(1));
    let mut hold: Vec<usize> = normals[..n_norm].to_vec();
    hold.extend_from_slice(&anomalies[..n_anom]);
    let mut train: Vec<usize> = normals[n_norm..].to_vec();
    train.extend_from_slice(&anomalies[n_anom..]);
    hold.sort_unstable();
    train.sort_unstable();
    (set.subset(&train), set.subset(&hold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_entr: f64,
    pub l_margin: f64,
    pub total: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model, with parameters rounded exactly as in `checkpoint`.
    pub model: AnomalyModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    pub best_epoch: usize,
}

/// Validation loss in inference mode (running batch-norm statistics, no updates).
/// The margin term is the expectation over the pair-sampling distribution, so the
/// value is deterministic. An empty holdout yields a zero report flagged `empty`.
pub fn evaluate_epoch(model: &AnomalyModel, holdout: &LabeledSet, settings: &LossSettings) -> Result<LossReport> {
    if holdout.is_empty() {
        let mut r = LossReport::new(0.0, 0.0, settings.lambda, &[])?;
        r.empty = true;
        return Ok(r);
    }
    let refs: Vec<&FeatureStack> = holdout.features.iter().collect();
    Ok(model
        .batch_loss(&refs, &holdout.labels, settings, PairSource::Expected, Mode::Eval, false)?
        .report)
}

/// Split `n` items into `parts` contiguous chunks whose sizes differ by at most one.
fn balanced_chunks(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Numeric(_))
}

/// Train from precomputed backbone features.
pub fn train_on_features(
    mut model: AnomalyModel,
    train: &LabeledSet,
    holdout: &LabeledSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let normals = train.indices_of(0);
    let anomalies = train.indices_of(1);
    if anomalies.is_empty() {
        return Err(Error::Training(
            "training set has no anomalous shots; the anomaly term of the entropy loss is undefined".into(),
        ));
    }
    if normals.is_empty() {
        return Err(Error::Training("training set has no normal images".into()));
    }
    let settings = LossSettings::from(config);
    let slots = config.anomaly_slots.max(1);
    let per_batch = config.batch_size - slots;
    let n_batches = normals.len().div_ceil(per_batch);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let mut adam = Adam::new(config.lr);
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut stale = 0usize;
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=config.max_epochs {
        let order = data::shuffled(&normals, &mut rng);
        let mut queue = data::shuffled(&anomalies, &mut rng).into_iter().cycle();
        let (mut sum_entr, mut sum_margin, mut sum_total) = (0.0, 0.0, 0.0);
        for chunk in balanced_chunks(order.len(), n_batches) {
            let mut idx: Vec<usize> = order[chunk].to_vec();
            idx.extend(queue.by_ref().take(slots));
            let feats: Vec<&FeatureStack> = idx.iter().map(|&i| &train.features[i]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let seed = rng.random::<u64>();
            let out = match model.batch_loss(&feats, &labels, &settings, PairSource::Sampled { seed }, Mode::Train, true)
            {
                Ok(o) => o,
                Err(e) if is_divergence(&e) => {
                    warn!("epoch {epoch}: {e}; stopping with the last finite checkpoint");
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let grads = out.grads.expect("gradients requested");
            adam.step(model.tensors_mut(""), grads.tensors(""));
            model.reduction.update_running(&out.cache);
            sum_entr += out.report.l_entr;
            sum_margin += out.report.l_margin;
            sum_total += out.report.total;
        }
        let nb = n_batches as f64;
        let (l_entr, l_margin, total) = (sum_entr / nb, sum_margin / nb, sum_total / nb);
        let val = if holdout.is_empty() {
            total
        } else {
            match evaluate_epoch(&model, holdout, &settings) {
                Ok(r) => r.total,
                Err(e) if is_divergence(&e) => {
                    warn!("epoch {epoch}: validation {e}; stopping with the last finite checkpoint");
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        };
        log.push(EpochLog {
            epoch,
            l_entr,
            l_margin,
            total,
            val_total: val,
        });
        debug!("epoch {epoch}: l_entr={l_entr:.5} l_margin={l_margin:.5} total={total:.5} val={val:.5}");
        if !total.is_finite() || !val.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if val < best.0 {
            best = (val, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let (best_val, best_epoch, mut best_model) = best;
    let best_val = best_val.is_finite().then_some(best_val);
    let checkpoint = Checkpoint::from_model(&best_model, config, best_epoch, best_val);
    checkpoint.apply_to(&mut best_model)?;
    info!(
        "training stopped ({stop:?}) after {} epochs; best epoch {best_epoch}",
        log.len()
    );
    Ok(TrainOutcome {
        model: best_model,
        checkpoint,
        log,
        stop,
        best_epoch,
    })
}

/// Full training run from a k-shot split.
pub fn train(split: &KShotSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train_anomalies.is_empty() {
        return Err(Error::Training(
            "split has no anomalous shots; the anomaly term of the entropy loss is undefined".into(),
        ));
    }
    let model = AnomalyModel::new(config)?;
    let all = training_set(split, &model.backbone)?;
    let (train_set, holdout) = carve_holdout(&all, config);
    info!(
        "training on {} images ({} anomalous), holdout {}",
        train_set.len(),
        train_set.indices_of(1).len(),
        holdout.len()
    );
    train_on_features(model, &train_set, &holdout, config)
}

/// Training log as CSV with header `epoch,l_entr,l_margin,L_total,val_total`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,l_entr,l_margin,L_total,val_total\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.l_entr, r.l_margin, r.total, r.val_total);
    }
    s
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, log_csv(log)).map_err(|e| Error::io(path, e))
}

//! The full detector: frozen backbone → reduction block → scoring head, and the
//! joint loss with its gradient for a batch.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureStack, ReductionBlock, ReductionCache};
use crate::config::TrainConfig;
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::head::{ScorePair, ScoringHead};
use crate::layers::{Mode, TensorMut, TensorRef, Tensors};
use crate::metric::{self, PairBatch};
use crate::objective::{self, LossReport};

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyModel {
    pub backbone: Backbone,
    pub reduction: ReductionBlock,
    pub head: ScoringHead,
}

/// Hyperparameters of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub mu: f64,
    pub beta: f64,
    pub negatives_per_anchor: usize,
}

impl From<&TrainConfig> for LossSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda: c.lambda,
            mu: c.mu,
            beta: c.beta,
            negatives_per_anchor: c.negatives_per_anchor,
        }
    }
}

/// How the margin term picks its pairs.
#[derive(Debug, Clone, Copy)]
pub enum PairSource<'a> {
    /// Distance-weighted sampling with the given seed.
    Sampled { seed: u64 },
    /// A fixed, precomputed pair batch.
    Given(&'a PairBatch),
    /// Exact expectation over the sampling distribution (no gradient).
    Expected,
}

/// Trainable-parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub reduction: ReductionBlock,
    pub head: ScoringHead,
}

impl Tensors for ModelGrads {
    fn tensors(&self, _prefix: &str) -> Vec<TensorRef<'_>> {
        let mut v = self.reduction.tensors("reduction");
        v.extend(self.head.tensors("head"));
        v
    }

    fn tensors_mut(&mut self, _prefix: &str) -> Vec<TensorMut<'_>> {
        let mut v = self.reduction.tensors_mut("reduction");
        v.extend(self.head.tensors_mut("head"));
        v
    }
}

/// Distances of the current point to the non-differentiable sets of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkDistances {
    pub relu: f64,
    pub hinge: f64,
    pub pooling: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub report: LossReport,
    pub grads: Option<ModelGrads>,
    pub scores: Vec<ScorePair>,
    pub embeddings: Vec<Array1<f64>>,
    pub pairs: Option<PairBatch>,
    pub cache: ReductionCache,
    pub kinks: KinkDistances,
}

impl AnomalyModel {
    /// Fresh model for a config; all trainable parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let backbone = Backbone::from_spec(config.backbone, config.image_size, config.backbone_weights.as_deref())?;
        Ok(Self::with_backbone(backbone, config))
    }

    pub fn with_backbone(backbone: Backbone, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let reduction = ReductionBlock::new(
            backbone.spec().depth,
            config.reduction_width,
            config.d_prime,
            config.batch_norm,
            &mut rng,
        );
        let mut head = ScoringHead::new(config.d_prime, config.temperature, &mut rng);
        head.norm_mode = config.head_norm;
        head.class_mix = config.head_mix;
        Self {
            backbone,
            reduction,
            head,
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            reduction: self.reduction.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn features(&self, image: &ImageTensor) -> Result<FeatureStack> {
        self.backbone.extract_features(image)
    }

    /// Inference-mode reduced stack `z` for backbone features.
    pub fn reduce(&self, features: &FeatureStack) -> Result<Array3<f64>> {
        self.reduction.forward(features)
    }

    pub fn score_features(&self, features: &FeatureStack) -> Result<(Array3<f64>, ScorePair)> {
        let z = self.reduce(features)?;
        let scores = self.head.score_image(&z)?;
        Ok((z, scores))
    }

    pub fn score_image(&self, image: &ImageTensor) -> Result<ScorePair> {
        Ok(self.score_features(&self.features(image)?)?.1)
    }

    pub fn embed_features(&self, features: &FeatureStack) -> Result<Array1<f64>> {
        Ok(metric::embedding(&self.reduce(features)?))
    }

    /// Joint loss of a batch of backbone features and, with `with_grad`, its gradient.
    pub fn batch_loss(
        &self,
        features: &[&FeatureStack],
        labels: &[u8],
        settings: &LossSettings,
        pairs: PairSource<'_>,
        mode: Mode,
        with_grad: bool,
    ) -> Result<BatchOutcome> {
        if features.len() != labels.len() {
            return Err(Error::Contract("one label per feature stack required".into()));
        }
        let (zs, cache) = self.reduction.forward_batch(features, mode)?;
        let scores = zs.iter().map(|z| self.head.score_image(z)).collect::<Result<Vec<_>>>()?;
        let embeddings: Vec<Array1<f64>> = zs.iter().map(metric::embedding).collect();

        let raw: Vec<f64> = scores.iter().map(|s| s.s1).collect();
        let rectified: Vec<f64> = raw.iter().map(|&s| objective::softplus(s)).collect();
        let entropy = objective::entropy_loss(&rectified, labels)?;

        let (l_margin, margin_grads, pair_batch, no_pairs) = match pairs {
            PairSource::Expected => {
                if with_grad {
                    return Err(Error::Contract("expected-pair loss has no gradient".into()));
                }
                let v = metric::expected_margin_loss(
                    &embeddings,
                    labels,
                    settings.negatives_per_anchor,
                    settings.mu,
                    settings.beta,
                )?;
                (v, None, None, false)
            }
            PairSource::Sampled { seed } => {
                let batch = match metric::sample_pairs_distance_weighted(
                    &embeddings,
                    labels,
                    settings.negatives_per_anchor,
                    seed,
                ) {
                    Ok(b) => b,
                    Err(Error::NoNegativePairs) => PairBatch::default(),
                    Err(e) => return Err(e),
                };
                let (loss, grads) = metric::margin_loss_embeddings(&embeddings, &batch, settings.mu, settings.beta)?;
                (loss.value, Some(grads), Some(batch), loss.no_pairs)
            }
            PairSource::Given(batch) => {
                let (loss, grads) = metric::margin_loss_embeddings(&embeddings, batch, settings.mu, settings.beta)?;
                (loss.value, Some(grads), Some(batch.clone()), loss.no_pairs)
            }
        };

        let mut report = LossReport::new(entropy.value, l_margin, settings.lambda, labels)?;
        report.no_pairs = no_pairs;

        let hinge = pair_batch
            .as_ref()
            .map(|b| {
                b.pairs
                    .iter()
                    .map(|p| {
                        let d = metric::cosine_distance(&embeddings[p.anchor], &embeddings[p.other]).unwrap_or(0.0);
                        metric::hinge_margin(d, p.positive, settings.mu, settings.beta).abs()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .unwrap_or(f64::INFINITY);
        let kinks = KinkDistances {
            relu: cache.min_abs_preactivation(),
            hinge,
            pooling: scores.iter().map(|s| s.max_gap(1)).fold(f64::INFINITY, f64::min),
        };

        let grads = if with_grad {
            let mut grads = self.zero_grads();
            let mut dzs = Vec::with_capacity(zs.len());
            for (i, z) in zs.iter().enumerate() {
                let upstream = entropy.grads[i] * objective::sigmoid(raw[i]);
                let mut dz = self.head.backward_pooled(z, &scores[i], 1, upstream, &mut grads.head)?;
                if let Some(mg) = &margin_grads {
                    let (_, h, w) = z.dim();
                    let scale = settings.lambda / (h * w) as f64;
                    for (ch, mut plane) in dz.axis_iter_mut(ndarray::Axis(0)).enumerate() {
                        plane += mg[i][ch] * scale;
                    }
                }
                dzs.push(dz);
            }
            grads.reduction = self.reduction.backward_batch(&cache, &dzs);
            Some(grads)
        } else {
            None
        };

        Ok(BatchOutcome {
            report,
            grads,
            scores,
            embeddings,
            pairs: pair_batch,
            cache,
            kinks,
        })
    }
}

impl Tensors for AnomalyModel {
    /// Trainable parameters and batch-norm buffers; the frozen backbone is excluded.
    fn tensors(&self, _prefix: &str) -> Vec<TensorRef<'_>> {
        let mut v = self.reduction.tensors("reduction");
        v.extend(self.head.tensors("head"));
        v
    }

    fn tensors_mut(&mut self, _prefix: &str) -> Vec<TensorMut<'_>> {
        let mut v = self.reduction.tensors_mut("reduction");
        v.extend(self.head.tensors_mut("head"));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{ClassMix, NormMode};
    use ndarray::Array3;
    use rand_distr::{Distribution, StandardNormal};

    fn small_model(seed: u64, batch_norm: bool) -> AnomalyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AnomalyModel {
            backbone: Backbone::tiny(8).unwrap(),
            reduction: ReductionBlock::new(3, 5, 4, batch_norm, &mut rng),
            head: ScoringHead::new(4, 1.0, &mut rng),
        }
    }

    fn random_batch(n: usize, seed: u64) -> (Vec<Array3<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (0..n)
            .map(|_| Array3::from_shape_simple_fn((3, 3, 3), || StandardNormal.sample(&mut rng)))
            .collect();
        let labels = (0..n).map(|i| u8::from(i % 2 == 1)).collect();
        (feats, labels)
    }

    const SETTINGS: LossSettings = LossSettings {
        lambda: 1.0,
        mu: 0.2,
        beta: 1.2,
        negatives_per_anchor: 1,
    };

    fn loss_at(model: &AnomalyModel, feats: &[&Array3<f64>], labels: &[u8], pairs: &PairBatch) -> f64 {
        model
            .batch_loss(feats, labels, &SETTINGS, PairSource::Given(pairs), Mode::Train, false)
            .unwrap()
            .report
            .total
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut checked = 0;
        for seed in 0..12 {
            let mut model = small_model(seed, seed % 2 == 0);
            model.head.norm_mode = [NormMode::Row, NormMode::Column, NormMode::Matrix][seed as usize % 3];
            if seed % 4 == 3 {
                model.head.class_mix = ClassMix::Shared;
            }
            let (feats, labels) = random_batch(6, 100 + seed);
            let refs: Vec<&Array3<f64>> = feats.iter().collect();
            let base = model
                .batch_loss(&refs, &labels, &SETTINGS, PairSource::Sampled { seed }, Mode::Train, true)
                .unwrap();
            if base.kinks.relu < 1e-4 || base.kinks.hinge < 1e-3 || base.kinks.pooling < 1e-4 {
                continue;
            }
            let pairs = base.pairs.clone().unwrap();
            let grads = base.grads.unwrap();
            let analytic: Vec<(String, Vec<f64>, bool)> = grads
                .tensors("")
                .into_iter()
                .map(|t| (t.name, t.data.to_vec(), t.trainable))
                .collect();
            for (ti, (name, ga, trainable)) in analytic.iter().enumerate() {
                if !trainable {
                    continue;
                }
                let h = 1e-6;
                let mut fd = vec![0.0; ga.len()];
                for j in 0..ga.len() {
                    let orig = model.tensors("")[ti].data[j];
                    model.tensors_mut("")[ti].data[j] = orig + h;
                    let plus = loss_at(&model, &refs, &labels, &pairs);
                    model.tensors_mut("")[ti].data[j] = orig - h;
                    let minus = loss_at(&model, &refs, &labels, &pairs);
                    model.tensors_mut("")[ti].data[j] = orig;
                    fd[j] = (plus - minus) / (2.0 * h);
                }
                let diff: f64 = ga.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let na = ga.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
                let rel = diff / na.max(nf).max(1e-8);
                assert!(rel <= 1e-4, "seed {seed} tensor {name}: relative error {rel:e}");
            }
            checked += 1;
        }
        assert!(checked >= 6, "too few points away from kinks: {checked}");
    }

    #[test]
    fn eval_loss_matches_train_loss_without_batch_norm() {
        let model = small_model(5, false);
        let (feats, labels) = random_batch(8, 9);
        let refs: Vec<&Array3<f64>> = feats.iter().collect();
        let run = |mode| {
            model
                .batch_loss(&refs, &labels, &SETTINGS, PairSource::Expected, mode, false)
                .unwrap()
                .report
                .total
        };
        assert!((run(Mode::Train) - run(Mode::Eval)).abs() < 1e-6);
    }

    #[test]
    fn expected_loss_is_invariant_under_duplication() {
        let model = small_model(6, true);
        let (feats, labels) = random_batch(6, 10);
        let refs: Vec<&Array3<f64>> = feats.iter().collect();
        let doubled: Vec<&Array3<f64>> = refs.iter().chain(refs.iter()).copied().collect();
        let labels2: Vec<u8> = labels.iter().chain(labels.iter()).copied().collect();
        let a = model
            .batch_loss(&refs, &labels, &SETTINGS, PairSource::Expected, Mode::Eval, false)
            .unwrap();
        let b = model
            .batch_loss(&doubled, &labels2, &SETTINGS, PairSource::Expected, Mode::Eval, false)
            .unwrap();
        assert!((a.report.total - b.report.total).abs() < 1e-12);
    }

    #[test]
    fn expected_pairs_refuse_gradients() {
        let model = small_model(7, true);
        let (feats, labels) = random_batch(4, 11);
        let refs: Vec<&Array3<f64>> = feats.iter().collect();
        assert!(model
            .batch_loss(&refs, &labels, &SETTINGS, PairSource::Expected, Mode::Train, true)
            .is_err());
    }
}

//! Cosine embedding distance, distance-weighted pair sampling and the margin loss.

use ndarray::{Array1, Array3, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Pooled embedding of a reduced feature stack (global average over positions).
pub fn embedding(z: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = z.dim();
    z.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine distance undefined for a zero-norm vector".into()));
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Distance together with its gradients with respect to `a` and `b`.
pub fn cosine_distance_grad(a: &Array1<f64>, b: &Array1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let d = cosine_distance(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    let cos = a.dot(b) / (na * nb);
    let ga = -(b / (na * nb) - a * (cos / (na * na)));
    let gb = -(a / (na * nb) - b * (cos / (nb * nb)));
    Ok((d, ga, gb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub anchor: usize,
    pub other: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
    /// Anchors dropped because their class has no other member.
    pub skipped_anchors: Vec<usize>,
}

/// Inverse of the pairwise-distance density on the unit hypersphere, normalized to
/// probabilities. Cosine distances are converted to chord lengths and clipped below at 0.5.
pub fn negative_weights(cosine_distances: &[f64], dim: usize) -> Vec<f64> {
    let n = dim as f64;
    let log_w: Vec<f64> = cosine_distances
        .iter()
        .map(|&dc| {
            let chord = (2.0 * dc.max(0.0)).sqrt().max(0.5);
            let tail = (1.0 - 0.25 * chord * chord).max(1e-8);
            -((n - 2.0) * chord.ln() + 0.5 * (n - 3.0) * tail.ln())
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        let u = 1.0 / w.len().max(1) as f64;
        w.iter_mut().for_each(|v| *v = u);
    } else {
        w.iter_mut().for_each(|v| *v /= total);
    }
    w
}

/// For each anchor draw one uniform positive and `per_anchor` negatives weighted by
/// [`negative_weights`]. Deterministic given `seed`.
pub fn sample_pairs_distance_weighted(
    embeddings: &[Array1<f64>],
    labels: &[u8],
    per_anchor: usize,
    seed: u64,
) -> Result<PairBatch> {
    if embeddings.len() != labels.len() {
        return Err(Error::Contract("one label per embedding required".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) || labels.len() < 2 {
        return Err(Error::NoNegativePairs);
    }
    let dim = embeddings[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = PairBatch::default();
    for (anchor, &label) in labels.iter().enumerate() {
        let positives: Vec<usize> = (0..labels.len())
            .filter(|&j| j != anchor && labels[j] == label)
            .collect();
        let Some(&pos) = positives.choose(&mut rng) else {
            log::warn!("anchor {anchor} has no positive partner; skipped");
            batch.skipped_anchors.push(anchor);
            continue;
        };
        batch.pairs.push(Pair {
            anchor,
            other: pos,
            positive: true,
        });
        let negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != label).collect();
        let distances = negatives
            .iter()
            .map(|&j| cosine_distance(&embeddings[anchor], &embeddings[j]))
            .collect::<Result<Vec<_>>>()?;
        let weights = negative_weights(&distances, dim);
        let picker = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(e.to_string()))?;
        for _ in 0..per_anchor {
            batch.pairs.push(Pair {
                anchor,
                other: negatives[picker.sample(&mut rng)],
                positive: false,
            });
        }
    }
    Ok(batch)
}

/// Result of [`margin_loss`]: the mean hinge and its derivative with respect to each distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginLoss {
    pub value: f64,
    pub distance_grads: Vec<f64>,
    pub no_pairs: bool,
}

/// Per-pair hinge `max(0, μ + s(d − β))`, `s = +1` for positive pairs and `−1` for negatives.
pub fn pair_hinge(d: f64, positive: bool, mu: f64, beta: f64) -> f64 {
    let s = if positive { 1.0 } else { -1.0 };
    (mu + s * (d - beta)).max(0.0)
}

/// Signed distance of a pair from the hinge kink.
pub fn hinge_margin(d: f64, positive: bool, mu: f64, beta: f64) -> f64 {
    let s = if positive { 1.0 } else { -1.0 };
    mu + s * (d - beta)
}

pub fn margin_loss(pairs: &PairBatch, distances: &[f64], mu: f64, beta: f64) -> Result<MarginLoss> {
    if mu <= 0.0 || beta <= 0.0 {
        return Err(Error::Domain(format!("margin requires mu > 0 and beta > 0 (got {mu}, {beta})")));
    }
    if pairs.pairs.len() != distances.len() {
        return Err(Error::Contract(format!(
            "{} pairs but {} distances",
            pairs.pairs.len(),
            distances.len()
        )));
    }
    if pairs.pairs.is_empty() {
        return Ok(MarginLoss {
            value: 0.0,
            distance_grads: Vec::new(),
            no_pairs: true,
        });
    }
    let n = distances.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(distances.len());
    for (p, &d) in pairs.pairs.iter().zip(distances) {
        value += pair_hinge(d, p.positive, mu, beta);
        let s = if p.positive { 1.0 } else { -1.0 };
        // subgradient 0 at the kink
        grads.push(if hinge_margin(d, p.positive, mu, beta) > 0.0 { s / n } else { 0.0 });
    }
    Ok(MarginLoss {
        value: value / n,
        distance_grads: grads,
        no_pairs: false,
    })
}

/// Margin loss over embeddings with gradients with respect to every embedding.
pub fn margin_loss_embeddings(
    embeddings: &[Array1<f64>],
    pairs: &PairBatch,
    mu: f64,
    beta: f64,
) -> Result<(MarginLoss, Vec<Array1<f64>>)> {
    let mut distances = Vec::with_capacity(pairs.pairs.len());
    let mut partials = Vec::with_capacity(pairs.pairs.len());
    for p in &pairs.pairs {
        let (d, ga, gb) = cosine_distance_grad(&embeddings[p.anchor], &embeddings[p.other])?;
        distances.push(d);
        partials.push((ga, gb));
    }
    let loss = margin_loss(pairs, &distances, mu, beta)?;
    let dim = embeddings.first().map(|e| e.len()).unwrap_or(0);
    let mut grads = vec![Array1::zeros(dim); embeddings.len()];
    for ((p, (ga, gb)), &g) in pairs.pairs.iter().zip(&partials).zip(&loss.distance_grads) {
        if g != 0.0 {
            grads[p.anchor].scaled_add(g, ga);
            grads[p.other].scaled_add(g, gb);
        }
    }
    Ok((loss, grads))
}

/// Deterministic expectation of the sampled margin loss: for each anchor the
/// positive term is averaged uniformly over its class (the anchor itself included)
/// and the negative term under the distance-weighted distribution, combined in the
/// `1 : per_anchor` proportion used by the sampler. Invariant under duplicating
/// the whole set.
pub fn expected_margin_loss(
    embeddings: &[Array1<f64>],
    labels: &[u8],
    per_anchor: usize,
    mu: f64,
    beta: f64,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Ok(0.0);
    }
    let dim = embeddings[0].len();
    let m = per_anchor as f64;
    let mut total = 0.0;
    let mut anchors = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut pos_sum = 0.0;
        let mut pos_n = 0usize;
        let mut neg_d = Vec::new();
        for (j, &lj) in labels.iter().enumerate() {
            let d = if i == j { 0.0 } else { cosine_distance(&embeddings[i], &embeddings[j])? };
            if lj == label {
                pos_sum += pair_hinge(d, true, mu, beta);
                pos_n += 1;
            } else {
                neg_d.push(d);
            }
        }
        let pos = pos_sum / pos_n as f64;
        let neg = if neg_d.is_empty() {
            0.0
        } else {
            let w = negative_weights(&neg_d, dim);
            w.iter().zip(&neg_d).map(|(p, &d)| p * pair_hinge(d, false, mu, beta)).sum()
        };
        let weight = if neg_d.is_empty() { 1.0 } else { 1.0 + m };
        total += (pos + if neg_d.is_empty() { 0.0 } else { m * neg }) / weight;
        anchors += 1;
    }
    Ok(total / anchors as f64)
}

//! Evaluation metrics: image and pixel AUROC, ROAD with noisy linear
//! imputation, retrieval metrics, embedding export and the report pipeline.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::config::{PixelPooling, PixelSource, RunConfig};
use crate::data::{self, BinaryMask, ImageTensor, KShotSplit, TestItem};
use crate::error::{Error, Result};
use crate::head::ScorePair;
use crate::interpret::{self, Heatmap};
use crate::metric;
use crate::model::AnomalyModel;
use crate::raster;

/// Mann–Whitney AUROC: probability that a random positive outranks a random
/// negative, ties credited one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in AUROC input".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("undefined AUROC: only one class present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the credit, so every partial sum is an exact integer.
    let mut credit2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        let neg = (j - i) as u128 - pos;
        credit2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(credit2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUROC of per-pixel relevance against ground-truth masks.
pub fn pixel_auroc(maps: &[Array2<f64>], masks: &[BinaryMask], pooling: PixelPooling) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Contract("one mask per heatmap required".into()));
    }
    for (m, k) in maps.iter().zip(masks) {
        if m.dim() != k.data.dim() {
            return Err(Error::Contract(format!(
                "heatmap {:?} and mask {:?} differ in shape",
                m.dim(),
                k.data.dim()
            )));
        }
    }
    match pooling {
        PixelPooling::Pooled => {
            let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
            let labels: Vec<u8> = masks.iter().flat_map(|k| k.data.iter().copied()).collect();
            if !labels.contains(&1) {
                return Err(Error::UndefinedMetric("no anomalous pixels in any mask".into()));
            }
            auroc(&scores, &labels)
        }
        PixelPooling::PerImage => {
            let per: Vec<f64> = maps
                .iter()
                .zip(masks)
                .filter(|(_, k)| k.data.iter().any(|&v| v == 1) && k.data.iter().any(|&v| v == 0))
                .map(|(m, k)| {
                    let s: Vec<f64> = m.iter().copied().collect();
                    let l: Vec<u8> = k.data.iter().copied().collect();
                    auroc(&s, &l)
                })
                .collect::<Result<_>>()?;
            if per.is_empty() {
                return Err(Error::UndefinedMetric("no image has both pixel classes".into()));
            }
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        }
    }
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbours(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBOURS.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}

/// Sparse system for the masked pixels: `deg_p x_p − Σ_{masked q~p} x_q = Σ_{known q~p} v_q`.
struct ImputationSystem {
    pixels: Vec<(usize, usize)>,
    degree: Vec<f64>,
    /// Masked neighbours of each unknown, as unknown indices.
    links: Vec<Vec<usize>>,
    /// Known neighbours of each unknown.
    known: Vec<Vec<(usize, usize)>>,
}

impl ImputationSystem {
    fn new(mask: &Array2<u8>) -> Result<Self> {
        let (h, w) = mask.dim();
        let mut index = Array2::from_elem((h, w), usize::MAX);
        let mut pixels = Vec::new();
        for ((r, c), &m) in mask.indexed_iter() {
            if m != 0 {
                index[[r, c]] = pixels.len();
                pixels.push((r, c));
            }
        }
        let mut degree = Vec::with_capacity(pixels.len());
        let mut links = Vec::with_capacity(pixels.len());
        let mut known = Vec::with_capacity(pixels.len());
        for &(r, c) in &pixels {
            let mut l = Vec::new();
            let mut k = Vec::new();
            for (nr, nc) in neighbours(r, c, h, w) {
                if index[[nr, nc]] == usize::MAX {
                    k.push((nr, nc));
                } else {
                    l.push(index[[nr, nc]]);
                }
            }
            degree.push((l.len() + k.len()) as f64);
            links.push(l);
            known.push(k);
        }
        let system = Self {
            pixels,
            degree,
            links,
            known,
        };
        system.check_boundaries()?;
        Ok(system)
    }

    /// Every connected masked region needs at least one known neighbour.
    fn check_boundaries(&self) -> Result<()> {
        let n = self.pixels.len();
        let mut seen = vec![false; n];
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            let mut anchored = false;
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                anchored |= !self.known[i].is_empty();
                for &j in &self.links[i] {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            if !anchored {
                return Err(Error::Underdetermined(format!(
                    "masked region of {size} pixels has no known neighbour"
                )));
            }
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            let mut v = self.degree[i] * x[i];
            for &j in &self.links[i] {
                v -= x[j];
            }
            out[i] = v;
        }
    }

    /// Jacobi-preconditioned conjugate gradients.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&self.degree).map(|(ri, d)| ri / d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        for _ in 0..(20 * n + 100) {
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= 1e-13 * scale {
                break;
            }
            self.apply(&p, &mut ap);
            let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] / self.degree[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        x
    }
}

/// Replace masked pixels by the harmonic interpolation of their surroundings
/// (each equal to the mean of its 4-neighbours), then add Gaussian noise.
pub fn noisy_linear_impute(
    image: &ImageTensor,
    removal: &BinaryMask,
    noise_std: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let (channels, h, w) = image.data.dim();
    if removal.data.dim() != (h, w) {
        return Err(Error::Contract(format!(
            "mask {:?} does not match image {:?}",
            removal.data.dim(),
            (h, w)
        )));
    }
    if removal.count() == 0 {
        return Ok(image.clone());
    }
    let system = ImputationSystem::new(&removal.data)?;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(format!("noise_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for ch in 0..channels {
        let plane = image.data.index_axis(Axis(0), ch);
        let b: Vec<f64> = system
            .known
            .iter()
            .map(|k| k.iter().map(|&idx| plane[idx]).sum())
            .collect();
        let x = system.solve(&b);
        let mut target = out.data.index_axis_mut(Axis(0), ch);
        for (&(r, c), v) in system.pixels.iter().zip(x) {
            let n = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            target[[r, c]] = v + n;
        }
    }
    Ok(out)
}

/// Mask of the `round(f · H · W)` highest-relevance pixels, ties to the lower index.
pub fn top_fraction_mask(heat: &Array2<f64>, fraction: f64) -> BinaryMask {
    let (h, w) = heat.dim();
    let n = ((fraction * (h * w) as f64).round() as usize).min(h * w);
    let flat: Vec<f64> = heat.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut mask = BinaryMask::zeros(h, w);
    for &i in &order[..n] {
        mask.data[[i / w, i % w]] = 1;
    }
    mask
}

fn road_seed(seed: u64, item: usize, fraction: usize) -> u64 {
    seed ^ (item as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (fraction as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Mean confidence drop when removing the most relevant pixels (most-relevant-first)
/// over the anomalous items and every fraction.
pub fn road_score(
    model: &AnomalyModel,
    images: &[ImageTensor],
    labels: &[u8],
    heatmaps: &[Array2<f64>],
    fractions: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<f64> {
    if images.len() != labels.len() || images.len() != heatmaps.len() {
        return Err(Error::Contract("one label and one heatmap per image required".into()));
    }
    if fractions.is_empty() {
        return Err(Error::Contract("at least one ROAD fraction required".into()));
    }
    let anomalous: Vec<usize> = (0..images.len()).filter(|&i| labels[i] == 1).collect();
    if anomalous.is_empty() {
        return Err(Error::UndefinedMetric("ROAD needs at least one anomalous item".into()));
    }
    let drops: Vec<Vec<f64>> = anomalous
        .par_iter()
        .map(|&i| -> Result<Vec<f64>> {
            let img = &images[i];
            if heatmaps[i].dim() != (img.height(), img.width()) {
                return Err(Error::Contract("heatmap shape differs from its image".into()));
            }
            let base = model.score_image(img)?.confidence();
            fractions
                .iter()
                .enumerate()
                .map(|(fi, &f)| {
                    let mask = top_fraction_mask(&heatmaps[i], f);
                    let imputed = noisy_linear_impute(img, &mask, noise_std, road_seed(seed, i, fi))?;
                    Ok(base - model.score_image(&imputed)?.confidence())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = drops.into_iter().flatten().collect();
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

fn distance_matrix(embeddings: &[Array1<f64>]) -> Result<Array2<f64>> {
    let n = embeddings.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = metric::cosine_distance(&embeddings[i], &embeddings[j])?;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Other points ordered by distance to `q`, ties to the lower index.
fn ranked_neighbours(d: &Array2<f64>, q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d.nrows()).filter(|&j| j != q).collect();
    order.sort_by(|&a, &b| d[[q, a]].total_cmp(&d[[q, b]]).then(a.cmp(&b)));
    order
}

fn class_sizes(labels: &[usize]) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

/// Share of points whose nearest neighbour (cosine distance, self excluded) has the same label.
pub fn recall_at_1(embeddings: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::Contract("one label per embedding required".into()));
    }
    if embeddings.len() < 2 {
        return Err(Error::UndefinedMetric("Recall@1 needs at least two points".into()));
    }
    let sizes = class_sizes(labels);
    let singletons = sizes.values().filter(|&&s| s == 1).count();
    if singletons > 0 {
        warn!("Recall@1: {singletons} singleton class(es) counted as misses");
    }
    let d = distance_matrix(embeddings)?;
    let hits = (0..labels.len())
        .filter(|&q| labels[ranked_neighbours(&d, q)[0]] == labels[q])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean average precision at R, with R the query's class size minus one.
pub fn map_at_r(embeddings: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::Contract("one label per embedding required".into()));
    }
    let sizes = class_sizes(labels);
    let singletons = sizes.values().filter(|&&s| s == 1).count();
    if singletons > 0 {
        warn!("mAP@R: {singletons} singleton class(es) excluded");
    }
    let d = distance_matrix(embeddings)?;
    let mut total = 0.0;
    let mut queries = 0usize;
    for q in 0..labels.len() {
        let r = sizes[&labels[q]] - 1;
        if r == 0 {
            continue;
        }
        let ranked = ranked_neighbours(&d, q);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, &nb) in ranked[..r].iter().enumerate() {
            if labels[nb] == labels[q] {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / r as f64;
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::UndefinedMetric("mAP@R: every class is a singleton".into()));
    }
    Ok(total / queries as f64)
}

/// CSV with header `path,label,e0,…` and one row per embedding.
pub fn embeddings_csv(rows: &[(String, u8, Array1<f64>)], dim: usize) -> Result<String> {
    let mut s = String::from("path,label");
    for i in 0..dim {
        let _ = write!(s, ",e{i}");
    }
    s.push('\n');
    for (path, label, e) in rows {
        if e.len() != dim {
            return Err(Error::Contract(format!("embedding of {path} has {} values, expected {dim}", e.len())));
        }
        if path.contains([',', '"', '\n']) {
            let _ = write!(s, "\"{}\",{label}", path.replace('"', "\"\""));
        } else {
            let _ = write!(s, "{path},{label}");
        }
        for v in e {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Embed labelled images and write the CSV to `out`.
pub fn export_embeddings(model: &AnomalyModel, items: &[(PathBuf, u8)], size: usize, out: &Path) -> Result<()> {
    let rows: Vec<(String, u8, Array1<f64>)> = items
        .par_iter()
        .map(|(p, l)| {
            let e = model.embed_features(&model.features(&data::load_image(p, size)?)?)?;
            Ok((p.display().to_string(), *l, e))
        })
        .collect::<Result<_>>()?;
    let text = embeddings_csv(&rows, model.head.depth())?;
    std::fs::write(out, text).map_err(|e| Error::io(out, e))
}

/// Test images of a split, loaded once.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub items: Vec<TestItem>,
    pub images: Vec<ImageTensor>,
    /// Ground truth per item: zeros for normals, `None` for anomalies without a mask.
    pub masks: Vec<Option<BinaryMask>>,
    pub features: Vec<FeatureStack>,
}

impl TestSet {
    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|t| t.label).collect()
    }
}

pub fn load_test_set(split: &KShotSplit, model: &AnomalyModel) -> Result<TestSet> {
    let size = model.backbone.spec().input_size;
    let loaded: Vec<(ImageTensor, Option<BinaryMask>, FeatureStack)> = split
        .test
        .par_iter()
        .map(|t| {
            let img = data::load_image(&split.resolve(&t.path), size)?;
            let mask = match (&t.mask, t.label) {
                (Some(m), _) => Some(data::load_mask(&split.resolve(m), size)?),
                (None, 0) => Some(BinaryMask::zeros(size, size)),
                (None, _) => None,
            };
            let f = model.features(&img)?;
            Ok((img, mask, f))
        })
        .collect::<Result<_>>()?;
    let mut set = TestSet {
        items: split.test.clone(),
        images: Vec::with_capacity(loaded.len()),
        masks: Vec::with_capacity(loaded.len()),
        features: Vec::with_capacity(loaded.len()),
    };
    for (img, mask, f) in loaded {
        set.images.push(img);
        set.masks.push(mask);
        set.features.push(f);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub road: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub map_at_r: Option<f64>,
    pub n_images: usize,
    pub n_anomalous: usize,
    pub n_pixels: usize,
    /// Share of anomalous images with `ŝ¹ > ŝ⁰`.
    pub anomalous_detected: Option<f64>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

/// Per-item outputs behind an [`EvalReport`].
#[derive(Debug, Clone)]
pub struct EvalDetails {
    pub scores: Vec<ScorePair>,
    pub heatmaps: Vec<Heatmap>,
    pub embeddings: Vec<Array1<f64>>,
}

fn keep<T>(r: Result<T>, name: &str, warnings: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::UndefinedMetric(_) | Error::Domain(_))) => {
            warnings.push(format!("{name}: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Score, explain and embed every test image, then compute all metrics.
pub fn evaluate_test_set(
    model: &AnomalyModel,
    test: &TestSet,
    config: &RunConfig,
    seed: u64,
) -> Result<(EvalReport, EvalDetails)> {
    let per_item: Vec<(ScorePair, Heatmap, Array1<f64>)> = test
        .features
        .par_iter()
        .zip(&test.images)
        .map(|(f, img)| {
            let (z, scores) = model.score_features(f)?;
            let heat = interpret::explain_features(model, f, (img.height(), img.width()), &config.interpret)?;
            Ok((scores, heat, metric::embedding(&z)))
        })
        .collect::<Result<_>>()?;
    let mut details = EvalDetails {
        scores: Vec::new(),
        heatmaps: Vec::new(),
        embeddings: Vec::new(),
    };
    for (s, h, e) in per_item {
        details.scores.push(s);
        details.heatmaps.push(h);
        details.embeddings.push(e);
    }

    let labels = test.labels();
    let mut warnings = Vec::new();
    let margins: Vec<f64> = details.scores.iter().map(ScorePair::margin).collect();
    let image_auroc = keep(auroc(&margins, &labels), "image_auroc", &mut warnings)?;

    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for (i, mask) in test.masks.iter().enumerate() {
        let Some(mask) = mask else {
            warnings.push(format!("no ground-truth mask for {}", test.items[i].path.display()));
            continue;
        };
        let map = match config.eval.pixel_source {
            PixelSource::Heatmap => details.heatmaps[i].raw.clone(),
            PixelSource::ScoreMap => {
                raster::resize_bilinear(&details.scores[i].maps[1], mask.data.nrows(), mask.data.ncols())
            }
        };
        maps.push(map);
        masks.push(mask.clone());
    }
    let n_pixels = masks.iter().map(|m| m.data.len()).sum();
    let pixel_auroc = keep(
        pixel_auroc(&maps, &masks, config.eval.pixel_pooling),
        "pixel_auroc",
        &mut warnings,
    )?;

    let raws: Vec<Array2<f64>> = details.heatmaps.iter().map(|h| h.raw.clone()).collect();
    let road = keep(
        road_score(
            model,
            &test.images,
            &labels,
            &raws,
            &config.eval.road_fractions,
            config.eval.noise_std,
            seed,
        ),
        "road",
        &mut warnings,
    )?;

    let classes: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let recall = keep(recall_at_1(&details.embeddings, &classes), "recall_at_1", &mut warnings)?;
    let map_r = keep(map_at_r(&details.embeddings, &classes), "map_at_r", &mut warnings)?;

    let anomalous: Vec<&ScorePair> = details
        .scores
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == 1)
        .map(|(s, _)| s)
        .collect();
    let detected = (!anomalous.is_empty())
        .then(|| anomalous.iter().filter(|s| s.predicted_label() == 1).count() as f64 / anomalous.len() as f64);

    let report = EvalReport {
        image_auroc,
        pixel_auroc,
        road,
        recall_at_1: recall,
        map_at_r: map_r,
        n_images: labels.len(),
        n_anomalous: anomalous.len(),
        n_pixels,
        anomalous_detected: detected,
        warnings,
        config: config.clone(),
    };
    Ok((report, details))
}

pub fn evaluate(model: &AnomalyModel, split: &KShotSplit, config: &RunConfig, seed: u64) -> Result<EvalReport> {
    let test = load_test_set(split, model)?;
    Ok(evaluate_test_set(model, &test, config, seed)?.0)
}

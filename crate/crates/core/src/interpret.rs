//! Interpretation heatmaps: per-channel score gradients, entropy ranking,
//! top-H aggregation, Gaussian smoothing and bilinear upsampling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::config::{EntropyMode, InterpretConfig, MapSource};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::head::ScoringHead;
use crate::model::AnomalyModel;
use crate::raster;

/// Probability floor used when taking logarithms.
const ENTROPY_EPS: f64 = 1e-12;

/// Anything that maps a reduced stack `z` to a pooled class score with a gradient.
pub trait ScoreGradient {
    /// `ŝ^class` and `∂ŝ^class/∂z`.
    fn score_and_grad(&self, z: &Array3<f64>, class: usize) -> Result<(f64, Array3<f64>)>;
}

impl ScoreGradient for ScoringHead {
    fn score_and_grad(&self, z: &Array3<f64>, class: usize) -> Result<(f64, Array3<f64>)> {
        let scores = self.score_image(z)?;
        let mut scratch = self.zeros_like();
        let dz = self.backward_pooled(z, &scores, class, 1.0, &mut scratch)?;
        Ok((scores.score(class), dz))
    }
}

/// Per-channel maps `M_i = ∂ŝ^target/∂z_i`, one `h × w` map per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMapSet {
    pub maps: Array3<f64>,
    pub target: usize,
}

pub fn gradient_maps_for<S: ScoreGradient + ?Sized>(
    scorer: &S,
    z: &Array3<f64>,
    target: usize,
) -> Result<GradientMapSet> {
    if target > 1 {
        return Err(Error::Contract(format!("target class must be 0 or 1, got {target}")));
    }
    let (_, maps) = scorer.score_and_grad(z, target)?;
    if maps.dim() != z.dim() {
        return Err(Error::Contract("gradient shape differs from the feature stack".into()));
    }
    if maps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient map".into()));
    }
    Ok(GradientMapSet { maps, target })
}

/// Gradient maps of a full model for one image; also returns the reduced stack.
pub fn gradient_maps(
    model: &AnomalyModel,
    image: &ImageTensor,
    target: usize,
) -> Result<(GradientMapSet, Array3<f64>)> {
    let z = model.reduce(&model.features(image)?)?;
    Ok((gradient_maps_for(&model.head, &z, target)?, z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntropy {
    pub value: f64,
    /// The map was identically zero; `value` is reported as 0.
    pub all_zero: bool,
}

/// Shannon entropy of a map read as a distribution over positions.
pub fn map_entropy(m: ArrayView2<'_, f64>, mode: EntropyMode) -> MapEntropy {
    let p: Vec<f64> = match mode {
        EntropyMode::Abs => {
            let total: f64 = m.iter().map(|v| v.abs()).sum();
            if total == 0.0 {
                return MapEntropy {
                    value: 0.0,
                    all_zero: true,
                };
            }
            m.iter().map(|v| v.abs() / total).collect()
        }
        EntropyMode::Softmax => {
            let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = m.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    };
    let value = -p
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * pi.max(ENTROPY_EPS).ln())
        .sum::<f64>();
    MapEntropy {
        value: value.max(0.0),
        all_zero: false,
    }
}

/// Indices of the `h` largest entropies, ties broken by lower index.
pub fn select_top_h(entropies: &[f64], h: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    order.truncate(h);
    order
}

/// Input-resolution relevance raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Values before the export normalization; used for pixel-level ranking.
    pub raw: Array2<f64>,
    pub top_h: usize,
    pub sigma: f64,
    pub target: usize,
    /// Channels aggregated, in selection order.
    pub channels: Vec<usize>,
    pub s0: f64,
    pub s1: f64,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.raw.nrows()
    }

    pub fn width(&self) -> usize {
        self.raw.ncols()
    }

    /// Set when the image was not classified anomalous (`ŝ¹ ≤ ŝ⁰`).
    pub fn low_score(&self) -> bool {
        self.s1 <= self.s0
    }

    /// Min-shifted and max-scaled copy; all zeros for a constant raster.
    pub fn normalized(&self) -> Array2<f64> {
        let min = self.raw.iter().copied().fold(f64::INFINITY, f64::min);
        let shifted = self.raw.mapv(|v| v - min);
        let max = shifted.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            shifted / max
        } else {
            shifted
        }
    }
}

/// Aggregate the `h` highest-entropy maps, blur, and upsample to `out_size`.
pub fn build_heatmap(
    grads: &GradientMapSet,
    h: usize,
    sigma: f64,
    out_size: (usize, usize),
    mode: EntropyMode,
) -> Result<Heatmap> {
    let depth = grads.maps.dim().0;
    if h == 0 || h > depth {
        return Err(Error::Contract(format!("top_h must lie in 1..={depth}, got {h}")));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Contract(format!("sigma must be a non-negative number, got {sigma}")));
    }
    let entropies: Vec<f64> = grads
        .maps
        .axis_iter(Axis(0))
        .map(|m| map_entropy(m, mode).value)
        .collect();
    let channels = select_top_h(&entropies, h);
    let mut sum = Array2::<f64>::zeros((grads.maps.dim().1, grads.maps.dim().2));
    for &c in &channels {
        sum += &grads.maps.index_axis(Axis(0), c);
    }
    // Gradients are signed; relevance is taken as magnitude.
    sum.mapv_inplace(f64::abs);
    let blurred = raster::gaussian_blur(&sum, sigma);
    let raw = raster::resize_bilinear(&blurred, out_size.0, out_size.1);
    Ok(Heatmap {
        raw,
        top_h: h,
        sigma,
        target: grads.target,
        channels,
        s0: f64::NAN,
        s1: f64::NAN,
    })
}

/// Heatmap for the anomalous class from precomputed backbone features.
pub fn explain_features(
    model: &AnomalyModel,
    features: &FeatureStack,
    out_size: (usize, usize),
    config: &InterpretConfig,
) -> Result<Heatmap> {
    let z = model.reduce(features)?;
    let scores = model.head.score_image(&z)?;
    let mut grads = gradient_maps_for(&model.head, &z, 1)?;
    if config.map_source == MapSource::GradTimesActivation {
        grads.maps *= &z;
    }
    let h = config.resolved_top_h(model.head.depth());
    let mut heat = build_heatmap(&grads, h, config.sigma, out_size, config.entropy_mode)?;
    heat.s0 = scores.s0;
    heat.s1 = scores.s1;
    Ok(heat)
}

/// Heatmap for the anomalous class at the image's resolution.
pub fn explain(model: &AnomalyModel, image: &ImageTensor, config: &InterpretConfig) -> Result<Heatmap> {
    explain_features(model, &model.features(image)?, (image.height(), image.width()), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub height: usize,
    pub width: usize,
    pub top_h: usize,
    pub sigma: f64,
    pub s0: f64,
    pub s1: f64,
    pub low_score: bool,
}

/// Paths written by [`export_heatmap`] for a given stem.
pub fn heatmap_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    ["heat.bin", "heat.json", "heat.png"].map(|ext| dir.join(format!("{stem}.{ext}")))
}

/// Write `<stem>.heat.bin` (row-major f32 LE, normalized), `<stem>.heat.json` and `<stem>.heat.png`.
pub fn export_heatmap(heat: &Heatmap, dir: &Path, stem: &str) -> Result<[PathBuf; 3]> {
    let paths = heatmap_paths(dir, stem);
    let norm = heat.normalized();
    let bytes: Vec<u8> = norm.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(&paths[0], bytes).map_err(|e| Error::io(&paths[0], e))?;
    let sidecar = HeatmapSidecar {
        height: heat.height(),
        width: heat.width(),
        top_h: heat.top_h,
        sigma: heat.sigma,
        s0: heat.s0,
        s1: heat.s1,
        low_score: heat.low_score(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    fs::write(&paths[1], text).map_err(|e| Error::io(&paths[1], e))?;
    let png = GrayImage::from_fn(heat.width() as u32, heat.height() as u32, |x, y| {
        Luma([(norm[[y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    png.save(&paths[2]).map_err(|e| Error::Image {
        path: paths[2].clone(),
        message: e.to_string(),
    })?;
    Ok(paths)
}

//! Frozen feature extractors and the trainable reduction block.
//!
//! The backbone maps a `3 × S × S` image to `D` feature maps of size
//! `S/downsample`. The reduction block maps those `D` maps to `D′` maps of the
//! same spatial size through four `3×3` conv → ReLU → batch-norm layers and a
//! final `1×1` projection.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::layers::{
    max_pool2, relu_inplace, BatchNorm, BatchNormCache, Conv2d, Mode, TensorMut, TensorRef, Tensors,
};
use crate::tensor_io::{self, StoredTensor};

/// A stack of feature maps, `depth × height × width`.
pub type FeatureStack = Array3<f64>;

const TINY_SEED: u64 = 0x7149_b0ce;
/// `(out_channels, kernel, stride, padding)` per tiny-backbone layer. The even
/// stride-2 kernels keep cell centres on the bilinear half-pixel grid.
const TINY_LAYERS: [(usize, usize, usize, usize); 3] = [(16, 4, 2, 1), (32, 4, 2, 1), (64, 3, 1, 1)];
const VGG11_LAYOUT: [Option<usize>; 13] = [
    Some(64),
    None,
    Some(128),
    None,
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    None,
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// VGG-11 convolutional trunk; weights loaded from a file.
    Vgg11,
    /// Three stride-2 convolutions with fixed random weights, for tests and desk-scale runs.
    Tiny,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg11" => Ok(Self::Vgg11),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!("unknown backbone '{other}' (expected vgg11|tiny)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub depth: usize,
    pub downsample: usize,
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, input_size: usize) -> Self {
        match kind {
            BackboneKind::Vgg11 => Self {
                kind,
                depth: 512,
                downsample: 32,
                input_size,
            },
            BackboneKind::Tiny => Self {
                kind,
                depth: TINY_LAYERS[2].0,
                downsample: 4,
                input_size,
            },
        }
    }

    /// Declared `(D, h, w)` of the feature stack.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let side = self.input_size / self.downsample;
        (self.depth, side, side)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    ConvRelu(Conv2d),
    MaxPool,
}

/// A frozen CNN trunk. No gradients flow into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    stages: Vec<Stage>,
    input_norm: InputNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InputNorm {
    /// Subtract mid-grey so zero padding matches a flat region.
    Center,
    ImageNet,
}

impl Backbone {
    pub fn tiny(input_size: usize) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(4) {
            return Err(Error::Contract(format!(
                "tiny backbone needs an input size divisible by 4, got {input_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(TINY_SEED);
        let mut in_ch = 3;
        let stages = TINY_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(out, kernel, stride, padding))| {
                let mut conv = Conv2d::new(in_ch, out, kernel, stride, padding, &mut rng);
                if i == 0 {
                    // Zero-mean first-layer kernels respond to local structure, not brightness.
                    for mut o in conv.weight.outer_iter_mut() {
                        for mut k in o.outer_iter_mut() {
                            let mean = k.mean().unwrap_or(0.0);
                            k.mapv_inplace(|v| v - mean);
                        }
                    }
                }
                in_ch = out;
                Stage::ConvRelu(conv)
            })
            .collect();
        Ok(Self {
            spec: BackboneSpec::new(BackboneKind::Tiny, input_size),
            stages,
            input_norm: InputNorm::Center,
        })
    }

    fn vgg11_with(input_size: usize, mut conv_for: impl FnMut(usize, usize, usize) -> Result<Conv2d>) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(32) {
            return Err(Error::Contract(format!(
                "vgg11 backbone needs an input size divisible by 32, got {input_size}"
            )));
        }
        let mut stages = Vec::new();
        let mut in_ch = 3;
        let mut torch_index = 0;
        for entry in VGG11_LAYOUT {
            match entry {
                Some(out) => {
                    stages.push(Stage::ConvRelu(conv_for(torch_index, in_ch, out)?));
                    in_ch = out;
                    torch_index += 2;
                }
                None => {
                    stages.push(Stage::MaxPool);
                    torch_index += 1;
                }
            }
        }
        Ok(Self {
            spec: BackboneSpec::new(BackboneKind::Vgg11, input_size),
            stages,
            input_norm: InputNorm::ImageNet,
        })
    }

    /// VGG-11 trunk with weights read from a tensor file whose names follow the
    /// torchvision layout (`features.<i>.weight`, `features.<i>.bias`).
    pub fn vgg11(input_size: usize, weights: &Path) -> Result<Self> {
        let stored = tensor_io::read_weight_file(weights)?;
        let find = |name: &str| -> Result<&StoredTensor> {
            stored
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Contract(format!("weight file lacks tensor {name}")))
        };
        Self::vgg11_with(input_size, |idx, in_ch, out| {
            let w = find(&format!("features.{idx}.weight"))?;
            let b = find(&format!("features.{idx}.bias"))?;
            if w.shape != [out, in_ch, 3, 3] || b.shape != [out] {
                return Err(Error::Contract(format!(
                    "features.{idx}: expected weight [{out}, {in_ch}, 3, 3], got {:?}",
                    w.shape
                )));
            }
            let weight = ndarray::Array4::from_shape_vec(
                (out, in_ch, 3, 3),
                w.data.iter().map(|&v| f64::from(v)).collect(),
            )
            .map_err(|e| Error::Contract(e.to_string()))?;
            Ok(Conv2d {
                weight,
                bias: b.data.iter().map(|&v| f64::from(v)).collect(),
                stride: 1,
                padding: 1,
            })
        })
    }

    /// VGG-11 trunk with random weights; useful for shape checks without downloaded weights.
    pub fn vgg11_random(input_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::vgg11_with(input_size, |_, in_ch, out| Ok(Conv2d::new(in_ch, out, 3, 1, 1, &mut rng)))
    }

    pub fn from_spec(kind: BackboneKind, input_size: usize, weights: Option<&Path>) -> Result<Self> {
        match kind {
            BackboneKind::Tiny => Self::tiny(input_size),
            BackboneKind::Vgg11 => {
                let path = weights.ok_or_else(|| {
                    Error::Config("backbone=vgg11 requires `backbone_weights` to point at a weight file".into())
                })?;
                Self::vgg11(input_size, path)
            }
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn extract_features(&self, image: &ImageTensor) -> Result<FeatureStack> {
        let expected = (3, self.spec.input_size, self.spec.input_size);
        if image.data.dim() != expected {
            return Err(Error::Contract(format!(
                "backbone expects input {:?}, got {:?}",
                expected,
                image.data.dim()
            )));
        }
        let mut x = image.data.clone();
        match self.input_norm {
            InputNorm::Center => x.mapv_inplace(|v| v - 0.5),
            InputNorm::ImageNet => {
                for c in 0..3 {
                    let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
                    x.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| (v - m) / s);
                }
            }
        }
        for stage in &self.stages {
            x = match stage {
                Stage::ConvRelu(conv) => {
                    let mut y = conv.forward(&x);
                    relu_inplace(&mut y);
                    y
                }
                Stage::MaxPool => max_pool2(&x),
            };
        }
        debug_assert_eq!(x.dim(), self.spec.output_shape());
        Ok(x)
    }
}

impl Tensors for Backbone {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Stage::ConvRelu(c) => Some(c.tensors(&format!("{prefix}.{i}"))),
                Stage::MaxPool => None,
            })
            .flatten()
            .map(|mut t| {
                t.trainable = false;
                t
            })
            .collect()
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        self.stages
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Stage::ConvRelu(c) => Some(c.tensors_mut(&format!("{prefix}.{i}"))),
                Stage::MaxPool => None,
            })
            .flatten()
            .map(|mut t| {
                t.trainable = false;
                t
            })
            .collect()
    }
}

/// One `3×3` conv → ReLU → (optional) batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionLayer {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm>,
}

/// The reduction block mapping `D` maps to `D′` maps at constant spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionBlock {
    pub layers: Vec<ReductionLayer>,
    pub project: Conv2d,
}

#[derive(Debug, Clone)]
struct LayerCache {
    cols: Vec<Array2<f64>>,
    in_shape: (usize, usize, usize),
    pre_activation: Vec<Array3<f64>>,
    norm: Option<BatchNormCache>,
}

/// Intermediate values from [`ReductionBlock::forward_batch`].
#[derive(Debug, Clone)]
pub struct ReductionCache {
    layers: Vec<LayerCache>,
    project_cols: Vec<Array2<f64>>,
    project_in_shape: (usize, usize, usize),
    mode: Mode,
}

impl ReductionCache {
    /// Smallest |pre-activation| over all ReLUs, i.e. the distance to the nearest kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.pre_activation.iter())
            .flat_map(|a| a.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Post-ReLU activations of every hidden layer (before normalization).
    pub fn activations(&self) -> impl Iterator<Item = Array3<f64>> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.pre_activation.iter())
            .map(|a| a.mapv(|v| v.max(0.0)))
    }
}

pub const DEFAULT_HIDDEN_LAYERS: usize = 4;

impl ReductionBlock {
    pub fn new(in_depth: usize, width: usize, out_depth: usize, batch_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(DEFAULT_HIDDEN_LAYERS);
        let mut ch = in_depth;
        for _ in 0..DEFAULT_HIDDEN_LAYERS {
            layers.push(ReductionLayer {
                conv: Conv2d::new(ch, width, 3, 1, 1, rng),
                norm: batch_norm.then(|| BatchNorm::new(width)),
            });
            ch = width;
        }
        let project = Conv2d::new(ch, out_depth, 1, 1, 0, rng);
        Self { layers, project }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| ReductionLayer {
                    conv: l.conv.zeros_like(),
                    norm: l.norm.as_ref().map(BatchNorm::zeros_like),
                })
                .collect(),
            project: self.project.zeros_like(),
        }
    }

    pub fn in_depth(&self) -> usize {
        self.layers
            .first()
            .map(|l| l.conv.in_channels())
            .unwrap_or_else(|| self.project.in_channels())
    }

    pub fn out_depth(&self) -> usize {
        self.project.out_channels()
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        if x.dim().0 != self.in_depth() {
            return Err(Error::Contract(format!(
                "reduction block expects depth {}, got {}",
                self.in_depth(),
                x.dim().0
            )));
        }
        Ok(())
    }

    pub fn forward_batch(&self, xs: &[&Array3<f64>], mode: Mode) -> Result<(Vec<Array3<f64>>, ReductionCache)> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut current: Vec<Array3<f64>> = xs.iter().map(|&x| x.clone()).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let in_shape = current.first().map(|x| x.dim()).unwrap_or((0, 0, 0));
            let (pre, cols): (Vec<_>, Vec<_>) = current.par_iter().map(|x| layer.conv.forward_cached(x)).unzip();
            let activated: Vec<Array3<f64>> = pre.iter().map(|p| p.mapv(|v| v.max(0.0))).collect();
            let (next, norm) = match &layer.norm {
                Some(bn) => {
                    let (y, cache) = bn.forward(&activated, mode);
                    (y, Some(cache))
                }
                None => (activated, None),
            };
            caches.push(LayerCache {
                cols,
                in_shape,
                pre_activation: pre,
                norm,
            });
            current = next;
        }
        let project_in_shape = current.first().map(|x| x.dim()).unwrap_or((0, 0, 0));
        let (out, project_cols): (Vec<_>, Vec<_>) = current.par_iter().map(|x| self.project.forward_cached(x)).unzip();
        Ok((
            out,
            ReductionCache {
                layers: caches,
                project_cols,
                project_in_shape,
                mode,
            },
        ))
    }

    /// Inference-mode forward of a single stack.
    pub fn forward(&self, x: &Array3<f64>) -> Result<FeatureStack> {
        let (mut out, _) = self.forward_batch(&[x], Mode::Eval)?;
        Ok(out.pop().expect("one output"))
    }

    pub fn update_running(&mut self, cache: &ReductionCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(c)) = (layer.norm.as_mut(), lc.norm.as_ref()) {
                bn.update_running(c);
            }
        }
    }

    /// Parameter gradients given the gradient of the loss with respect to each output stack.
    pub fn backward_batch(&self, cache: &ReductionCache, grad_out: &[Array3<f64>]) -> ReductionBlock {
        let mut grads = self.zeros_like();
        let per_image: Vec<(Conv2d, Array3<f64>)> = grad_out
            .par_iter()
            .zip(cache.project_cols.par_iter())
            .map(|(g, cols)| {
                let mut pg = self.project.zeros_like();
                let dx = self
                    .project
                    .backward(cols, cache.project_in_shape, g, &mut pg, true)
                    .expect("input gradient");
                (pg, dx)
            })
            .collect();
        let mut upstream = Vec::with_capacity(per_image.len());
        for (pg, dx) in per_image {
            grads.project.weight += &pg.weight;
            grads.project.bias += &pg.bias;
            upstream.push(dx);
        }

        for (li, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];
            if let (Some(bn), Some(bc)) = (&layer.norm, &lc.norm) {
                upstream = bn.backward(bc, &upstream, gl.norm.as_mut().expect("grad norm"));
            }
            for (g, pre) in upstream.iter_mut().zip(&lc.pre_activation) {
                g.zip_mut_with(pre, |gv, &p| {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let need_input = li > 0;
            let per_image: Vec<(Conv2d, Option<Array3<f64>>)> = upstream
                .par_iter()
                .zip(lc.cols.par_iter())
                .map(|(g, cols)| {
                    let mut cg = layer.conv.zeros_like();
                    let dx = layer.conv.backward(cols, lc.in_shape, g, &mut cg, need_input);
                    (cg, dx)
                })
                .collect();
            let mut next = Vec::with_capacity(per_image.len());
            for (cg, dx) in per_image {
                gl.conv.weight += &cg.weight;
                gl.conv.bias += &cg.bias;
                if let Some(dx) = dx {
                    next.push(dx);
                }
            }
            upstream = next;
        }
        grads
    }
}

impl Tensors for ReductionBlock {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.conv.tensors(&format!("{prefix}.{i}.conv")));
            if let Some(bn) = &l.norm {
                out.extend(bn.tensors(&format!("{prefix}.{i}.norm")));
            }
        }
        out.extend(self.project.tensors(&format!("{prefix}.project")));
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.conv.tensors_mut(&format!("{prefix}.{i}.conv")));
            if let Some(bn) = &mut l.norm {
                out.extend(bn.tensors_mut(&format!("{prefix}.{i}.norm")));
            }
        }
        out.extend(self.project.tensors_mut(&format!("{prefix}.project")));
        out
    }
}

//! Entropy-based anomaly scoring head.
//!
//! For each class `c ∈ {0, 1}` the reduced maps `z` are reweighted per channel by
//! `p = softmax(‖W_u^c rows‖ / t)`, mixed linearly (`e = W_u^c a + b^c`), collapsed
//! over depth (`s = W_s · e + b`) and max-pooled over positions into `ŝ^c`.
//! An image is anomalous iff `ŝ¹ > ŝ⁰`.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{tmut, tref, TensorMut, TensorRef, Tensors};

/// Which norm of the channel-mixing matrix drives the softmax channel weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// One Frobenius norm per row (output channel).
    #[default]
    Row,
    /// One norm per column (input channel).
    Column,
    /// A single norm of the whole matrix; the softmax is then uniform.
    Matrix,
}

/// Whether the channel-mixing matrix is per class or shared between classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassMix {
    #[default]
    PerClass,
    /// One matrix for both classes; only the class biases differ.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringHead {
    /// `W_u^c`, `D′ × D′`.
    pub mix: [Array2<f64>; 2],
    /// `b^c`, length `D′`.
    pub class_bias: [Array1<f64>; 2],
    /// `W_s`, length `D′`.
    pub reduce: Array1<f64>,
    /// Scalar `b`, stored as a length-1 array.
    pub bias: Array1<f64>,
    pub temperature: f64,
    pub norm_mode: NormMode,
    pub class_mix: ClassMix,
}

/// Pooled scores and the maps they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePair {
    pub s0: f64,
    pub s1: f64,
    pub maps: [Array2<f64>; 2],
    /// `(row, col)` of the maximum of each map.
    pub argmax: [(usize, usize); 2],
}

impl ScorePair {
    /// 1 iff `ŝ¹ > ŝ⁰`; ties go to normal.
    pub fn predicted_label(&self) -> u8 {
        u8::from(self.s1 > self.s0)
    }

    pub fn score(&self, class: usize) -> f64 {
        if class == 0 {
            self.s0
        } else {
            self.s1
        }
    }

    /// `ŝ¹ − ŝ⁰`, the image-level anomaly score.
    pub fn margin(&self) -> f64 {
        self.s1 - self.s0
    }

    /// Softmax-pair confidence in the anomalous class.
    pub fn confidence(&self) -> f64 {
        1.0 / (1.0 + (self.s0 - self.s1).exp())
    }

    /// Gap between the maximum and the runner-up of a map; small values mean a near tie.
    pub fn max_gap(&self, class: usize) -> f64 {
        let map = &self.maps[class];
        let top = map[self.argmax[class]];
        let second = map
            .indexed_iter()
            .filter(|(idx, _)| *idx != self.argmax[class])
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        top - second
    }
}

fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = v.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

fn argmax2(m: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut val = f64::NEG_INFINITY;
    for (idx, &v) in m.indexed_iter() {
        if v > val {
            val = v;
            best = idx;
        }
    }
    best
}

fn as_matrix(z: &Array3<f64>) -> ndarray::ArrayView2<'_, f64> {
    let (d, h, w) = z.dim();
    z.view().into_shape_with_order((d, h * w)).expect("contiguous stack")
}

impl ScoringHead {
    /// Random mixing matrices (distinct draws per class), small random `W_s`, zero biases.
    pub fn new(d_prime: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_prime as f64).sqrt();
        let mut draw = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal) * std)
        };
        let mix = [draw((d_prime, d_prime)), draw((d_prime, d_prime))];
        let reduce = draw((1, d_prime)).row(0).to_owned();
        Self {
            mix,
            class_bias: [Array1::zeros(d_prime), Array1::zeros(d_prime)],
            reduce,
            bias: Array1::zeros(1),
            temperature,
            norm_mode: NormMode::Row,
            class_mix: ClassMix::PerClass,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.depth();
        Self {
            mix: [Array2::zeros((d, d)), Array2::zeros((d, d))],
            class_bias: [Array1::zeros(d), Array1::zeros(d)],
            reduce: Array1::zeros(d),
            bias: Array1::zeros(1),
            temperature: self.temperature,
            norm_mode: self.norm_mode,
            class_mix: self.class_mix,
        }
    }

    pub fn depth(&self) -> usize {
        self.reduce.len()
    }

    fn mix_index(&self, class: usize) -> usize {
        match self.class_mix {
            ClassMix::PerClass => class,
            ClassMix::Shared => 0,
        }
    }

    pub fn mix_for(&self, class: usize) -> &Array2<f64> {
        &self.mix[self.mix_index(class)]
    }

    fn check_depth(&self, z: &Array3<f64>) -> Result<()> {
        if z.dim().0 != self.depth() {
            return Err(Error::Contract(format!(
                "scoring head expects depth {}, got {}",
                self.depth(),
                z.dim().0
            )));
        }
        Ok(())
    }

    fn norms(&self, class: usize) -> Array1<f64> {
        let w = self.mix_for(class);
        match self.norm_mode {
            NormMode::Row => w.map_axis(Axis(1), |r| r.dot(&r).sqrt()),
            NormMode::Column => w.map_axis(Axis(0), |c| c.dot(&c).sqrt()),
            NormMode::Matrix => Array1::from_elem(self.depth(), w.iter().map(|v| v * v).sum::<f64>().sqrt()),
        }
    }

    /// Softmax channel distribution `p` for class `c`; sums to 1.
    pub fn channel_weights(&self, class: usize) -> Result<Array1<f64>> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(softmax(&(self.norms(class) / self.temperature)))
    }

    /// `a^c = z ⊙ p`, with `p` broadcast over positions.
    pub fn channel_reweight(&self, z: &Array3<f64>, class: usize) -> Result<Array3<f64>> {
        self.check_depth(z)?;
        let p = self.channel_weights(class)?;
        let mut a = z.clone();
        for (mut plane, &pi) in a.axis_iter_mut(Axis(0)).zip(p.iter()) {
            plane *= pi;
        }
        Ok(a)
    }

    /// Spatial score map `s^c` from reweighted maps `a^c`.
    pub fn score_map(&self, a: &Array3<f64>, class: usize) -> Result<Array2<f64>> {
        self.check_depth(a)?;
        let (_, h, w) = a.dim();
        let am = as_matrix(a);
        // s = W_sᵀ (W a + b^c 1ᵀ) + b = (W_sᵀ W) a + (W_s · b^c + b)
        let v = self.mix_for(class).t().dot(&self.reduce);
        let offset = self.reduce.dot(&self.class_bias[class]) + self.bias[0];
        let s = v.dot(&am) + offset;
        Ok(s.into_shape_with_order((h, w)).expect("map shape"))
    }

    fn offending_group(&self) -> &'static str {
        let finite = |v: &f64| v.is_finite();
        if !self.mix.iter().flat_map(|m| m.iter()).all(finite)
            || !self.class_bias.iter().flat_map(|b| b.iter()).all(finite)
        {
            "theta_u (channel mixing)"
        } else if !self.reduce.iter().chain(self.bias.iter()).all(finite) {
            "theta_s (depth reduction)"
        } else {
            "input feature stack"
        }
    }

    pub fn score_image(&self, z: &Array3<f64>) -> Result<ScorePair> {
        let mut maps = Vec::with_capacity(2);
        for c in 0..2 {
            let a = self.channel_reweight(z, c)?;
            maps.push(self.score_map(&a, c)?);
        }
        let maps: [Array2<f64>; 2] = [maps.remove(0), maps.remove(0)];
        if maps.iter().any(|m| m.iter().any(|v| v.is_nan())) {
            return Err(Error::Numeric(format!("NaN score; check {}", self.offending_group())));
        }
        let argmax = [argmax2(&maps[0]), argmax2(&maps[1])];
        Ok(ScorePair {
            s0: maps[0][argmax[0]],
            s1: maps[1][argmax[1]],
            maps,
            argmax,
        })
    }

    /// Backpropagate `grad_map = ∂L/∂s^c` into the head parameters (accumulated into
    /// `grads`) and return `∂L/∂z`.
    pub fn backward_map(
        &self,
        z: &Array3<f64>,
        class: usize,
        grad_map: &Array2<f64>,
        grads: &mut ScoringHead,
    ) -> Result<Array3<f64>> {
        self.check_depth(z)?;
        let (d, h, w) = z.dim();
        let zm = as_matrix(z);
        let g = grad_map.view().into_shape_with_order(h * w).expect("map shape");
        let p = self.channel_weights(class)?;
        let mi = self.mix_index(class);
        let mix = &self.mix[mi];

        let g_sum = g.sum();
        let zg = zm.dot(&g); // Σ_pos z(pos) g(pos)
        let ag = &zg * &p; // Σ_pos a(pos) g(pos)
        let ea_g = mix.dot(&ag) + &self.class_bias[class] * g_sum; // Σ_pos e(pos) g(pos)

        grads.bias[0] += g_sum;
        grads.reduce += &ea_g;
        grads.class_bias[class].scaled_add(g_sum, &self.reduce);
        // dW[i, j] += W_s[i] · (a g)[j]
        let outer = self
            .reduce
            .view()
            .insert_axis(Axis(1))
            .dot(&ag.view().insert_axis(Axis(0)));
        grads.mix[mi] += &outer;

        let v = mix.t().dot(&self.reduce); // Wᵀ W_s
        let pv = &p * &v;
        let mut dz = Array3::zeros((d, h, w));
        for (i, mut plane) in dz.axis_iter_mut(Axis(0)).enumerate() {
            plane.zip_mut_with(grad_map, |o, &gv| *o = pv[i] * gv);
        }

        // channel softmax path
        let gp = &v * &zg;
        let dot = p.dot(&gp);
        let gu = &p * &(&gp - dot);
        let gr = gu / self.temperature;
        match self.norm_mode {
            NormMode::Row => {
                for (i, row) in mix.axis_iter(Axis(0)).enumerate() {
                    let r = row.dot(&row).sqrt();
                    if r > 0.0 {
                        grads.mix[mi].row_mut(i).scaled_add(gr[i] / r, &row);
                    }
                }
            }
            NormMode::Column => {
                for (j, col) in mix.axis_iter(Axis(1)).enumerate() {
                    let r = col.dot(&col).sqrt();
                    if r > 0.0 {
                        grads.mix[mi].column_mut(j).scaled_add(gr[j] / r, &col);
                    }
                }
            }
            NormMode::Matrix => {
                let r = mix.iter().map(|x| x * x).sum::<f64>().sqrt();
                if r > 0.0 {
                    grads.mix[mi].scaled_add(gr.sum() / r, mix);
                }
            }
        }
        Ok(dz)
    }

    /// Gradient of `ŝ^class` (the pooled score) with respect to `z`, accumulating
    /// `upstream · ∂ŝ/∂θ` into `grads`.
    pub fn backward_pooled(
        &self,
        z: &Array3<f64>,
        scores: &ScorePair,
        class: usize,
        upstream: f64,
        grads: &mut ScoringHead,
    ) -> Result<Array3<f64>> {
        let (_, h, w) = z.dim();
        let mut gmap = Array2::zeros((h, w));
        gmap[scores.argmax[class]] = upstream;
        self.backward_map(z, class, &gmap, grads)
    }
}

impl Tensors for ScoringHead {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        vec![
            tref(format!("{prefix}.mix0"), &self.mix[0], true),
            tref(format!("{prefix}.mix1"), &self.mix[1], self.class_mix == ClassMix::PerClass),
            tref(format!("{prefix}.class_bias0"), &self.class_bias[0], true),
            tref(format!("{prefix}.class_bias1"), &self.class_bias[1], true),
            tref(format!("{prefix}.reduce"), &self.reduce, true),
            tref(format!("{prefix}.bias"), &self.bias, true),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        let per_class = self.class_mix == ClassMix::PerClass;
        let [m0, m1] = &mut self.mix;
        let [b0, b1] = &mut self.class_bias;
        vec![
            tmut(format!("{prefix}.mix0"), m0, true),
            tmut(format!("{prefix}.mix1"), m1, per_class),
            tmut(format!("{prefix}.class_bias0"), b0, true),
            tmut(format!("{prefix}.class_bias1"), b1, true),
            tmut(format!("{prefix}.reduce"), &mut self.reduce, true),
            tmut(format!("{prefix}.bias"), &mut self.bias, true),
        ]
    }
}

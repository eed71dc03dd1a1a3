//! Training losses, the bounded affine stack, Adam, checkpoints and the
//! training loop.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::articulation::Pose;
use crate::autodiff::{sum, ParamKey, ParamLayout, Real, TapeSession, Var};
use crate::camera::Camera;
use crate::fields::{MaterialField, OccupancyGrid, SdfField, VoxelGrid};
use crate::io::{decode_f64, encode_f64, read_bytes, read_json, write_bytes, write_json};
use crate::linalg::{Aabb, V3, Vec3};
use crate::model::Model;
use crate::raster::Image;
use crate::render::{march_primary, march_quadrature, pbr_color, plan_scatter, rf_color, DirectionSampling, March, Posed, RayStreams, RenderConfig, ScatterPlan};
use crate::sampling::{RngStream, StreamKey};
use crate::shading::Rgb;
use crate::{Error, Result};

pub const MASK_CLAMP: f64 = 1e-7;
pub const CURVATURE_EPS: f64 = 1e-4;
pub const RELATIVE_GUARD: f64 = 1e-6;
/// Gradient norms below this make a normal undefined.
pub const DEGENERATE_GRADIENT: f64 = 1e-9;
/// Samples lighter than this are left out of the smoothness sum.
pub const SMOOTH_MIN_WEIGHT: f64 = 1e-4;

// Losses

/// `Σ_c |pred_c − target_c|` of one pixel.
pub fn l1_term<S: Real>(pred: &Rgb<S>, target: &Rgb) -> S {
    sum((0..3).map(|c| (pred[c] - target[c]).abs()))
}

/// Channel-summed L1 averaged over pixels.
pub fn loss_l1<S: Real>(pred: &[Rgb<S>], target: &[Rgb]) -> Result<S> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "l1 loss needs equal non-empty batches, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(sum(pred.iter().zip(target).map(|(p, t)| l1_term(p, t))) / pred.len() as f64)
}

/// Negated binary cross entropy of one pixel, with `O` clamped away from 0 and 1.
pub fn bce_term<S: Real>(opacity: S, mask: f64) -> S {
    let o = opacity.clamp_c(MASK_CLAMP, 1.0 - MASK_CLAMP);
    -(o.ln() * mask + (-o + 1.0).ln() * (1.0 - mask))
}

pub fn loss_mask<S: Real>(opacity: &[S], mask: &[f64]) -> Result<S> {
    if opacity.is_empty() || opacity.len() != mask.len() {
        return Err(Error::invalid("mask loss needs equal non-empty batches"));
    }
    Ok(sum(opacity.iter().zip(mask).map(|(&o, &m)| bce_term(o, m))) / opacity.len() as f64)
}

/// `(‖∇f(x)‖ − 1)²`.
pub fn eikonal_term<S: Real>(sdf: &SdfField, x: Vec3) -> S {
    let (_, g) = sdf.eval_grad_s::<S>(x);
    (g.norm() - 1.0).powi(2)
}

/// Mean eikonal residual; zero for no points.
pub fn loss_eikonal<S: Real>(sdf: &SdfField, points: &[Vec3]) -> S {
    if points.is_empty() {
        return S::zero();
    }
    sum(points.iter().map(|&x| eikonal_term::<S>(sdf, x))) / points.len() as f64
}

/// Unit vector orthogonal to `n`, uniform in the tangent plane.
pub fn random_tangent<R: Rng + ?Sized>(n: Vec3, rng: &mut R) -> Vec3 {
    let (u, v) = n.basis();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    u * phi.cos() + v * phi.sin()
}

/// `(n(x) · n(x + εt) − 1)²`, or `None` where either normal is undefined.
pub fn curvature_term<S: Real>(sdf: &SdfField, x: Vec3, tangent: Vec3, eps: f64) -> Option<S> {
    let (_, g0) = sdf.eval_grad_s::<S>(x);
    let (_, g1) = sdf.eval_grad_s::<S>(x + tangent * eps);
    if g0.value().norm() < DEGENERATE_GRADIENT || g1.value().norm() < DEGENERATE_GRADIENT {
        return None;
    }
    Some((g0.normalize().dot(g1.normalize()) - 1.0).powi(2))
}

/// Mean curvature residual over `(point, tangent)` pairs, skipping degenerate ones.
pub fn loss_curvature<S: Real>(sdf: &SdfField, points: &[(Vec3, Vec3)], eps: f64) -> S {
    let terms: Vec<S> = points
        .iter()
        .filter_map(|&(x, t)| curvature_term(sdf, x, t, eps))
        .collect();
    if terms.is_empty() {
        return S::zero();
    }
    let n = terms.len() as f64;
    sum(terms) / n
}

/// `|a − b| / max(a, b, 1e-6)`.
pub fn relative_difference<S: Real>(a: S, b: S) -> S {
    (a - b).abs() / a.max_s(b).max_c(RELATIVE_GUARD)
}

/// Relative material change between `x` and `x + offset`: albedo channel
/// mean plus roughness plus metallic.
pub fn smoothness_term<S: Real>(material: &MaterialField, x: Vec3, offset: Vec3) -> S {
    let a = material.eval_s::<S>(x);
    let b = material.eval_s::<S>(x + offset);
    let albedo = sum((0..3).map(|c| relative_difference(a.albedo[c], b.albedo[c]))) / 3.0;
    albedo + relative_difference(a.roughness, b.roughness) + relative_difference(a.metallic, b.metallic)
}

/// One weighted canonical sample of the smoothness sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothSample {
    pub x: Vec3,
    pub offset: Vec3,
    pub weight: f64,
}

/// `Σ w · term / pixels`.
pub fn loss_smoothness<S: Real>(material: &MaterialField, samples: &[SmoothSample], pixels: usize) -> S {
    if pixels == 0 {
        return S::zero();
    }
    sum(samples
        .iter()
        .map(|s| smoothness_term::<S>(material, s.x, s.offset) * s.weight))
        / pixels as f64
}

/// Mean squared discrete Laplacian of channel 0 over interior vertices,
/// scaled by the finest spacing, and its gradient per vertex value.
pub fn grid_laplacian(grid: &VoxelGrid) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = grid.res;
    let mut grad = vec![0.0; grid.data.len()];
    if nx < 3 || ny < 3 || nz < 3 {
        return (0.0, grad);
    }
    let h = grid.spacing();
    let hmin = h.min_elem();
    let c = [hmin / (h.x * h.x), hmin / (h.y * h.y), hmin / (h.z * h.z)];
    let stride = [1, nx, nx * ny];
    let count = ((nx - 2) * (ny - 2) * (nz - 2)) as f64;
    let f = &grid.data;
    let mut loss = 0.0;
    for z in 1..nz - 1 {
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                let i = grid.vertex_index(x, y, z);
                let l: f64 = (0..3).map(|a| c[a] * (f[i + stride[a]] + f[i - stride[a]] - 2.0 * f[i])).sum();
                loss += l * l;
                let g = 2.0 * l / count;
                for a in 0..3 {
                    grad[i + stride[a]] += g * c[a];
                    grad[i - stride[a]] += g * c[a];
                    grad[i] -= 2.0 * g * c[a];
                }
            }
        }
    }
    (loss / count, grad)
}

// Lipschitz-bounded affine stack

/// Rescales every row whose absolute sum exceeds `bound` to meet it.
pub fn normalize_rows<S: Real>(w: &[Vec<S>], bound: S) -> Vec<Vec<S>> {
    w.iter()
        .map(|row| {
            let s = sum(row.iter().map(|v| v.abs()));
            if s.val() > bound.val() {
                let k = bound / s;
                row.iter().map(|&v| v * k).collect()
            } else {
                row.clone()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    /// Row-major `out × in`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Raw bound; the row-sum limit is `softplus(k)`.
    pub k: f64,
}

/// Affine layers joined by ReLU, each bounded in the ∞-norm by `softplus(k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzStack {
    pub layers: Vec<AffineLayer>,
}

impl LipschitzStack {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("stack needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            let inputs = l.weights.first().map_or(0, Vec::len);
            if l.weights.is_empty() || inputs == 0 || l.weights.iter().any(|r| r.len() != inputs) {
                return Err(Error::invalid(format!("layer {i}: ragged or empty weights")));
            }
            if l.bias.len() != l.weights.len() {
                return Err(Error::invalid(format!("layer {i}: bias length differs from row count")));
            }
            if i > 0 && inputs != layers[i - 1].weights.len() {
                return Err(Error::invalid(format!("layer {i}: input width does not chain")));
            }
        }
        Ok(LipschitzStack { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].weights[0].len()
    }

    /// Flat parameters: per layer, weights row-major, bias, then `k`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().flatten());
            out.extend(&l.bias);
            out.push(l.k);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().flatten().chain(l.bias.iter_mut()) {
                *v = it.next().expect("parameter count");
            }
            l.k = it.next().expect("parameter count");
        }
    }

    /// Parameters lifted into `S`, tracked under [`ParamKey::LipschitzBound`].
    fn lifted<S: Real>(&self) -> Vec<(Vec<Vec<S>>, Vec<S>, S)> {
        let mut idx = 0;
        let mut next = |v: f64| {
            let s = S::param(ParamKey::LipschitzBound, idx, v);
            idx += 1;
            s
        };
        self.layers
            .iter()
            .map(|l| {
                let w = l
                    .weights
                    .iter()
                    .map(|r| r.iter().map(|&v| next(v)).collect())
                    .collect();
                let b = l.bias.iter().map(|&v| next(v)).collect();
                (w, b, next(l.k))
            })
            .collect()
    }

    pub fn forward_s<S: Real>(&self, x: &[S]) -> Vec<S> {
        let layers = self.lifted::<S>();
        let last = layers.len() - 1;
        let mut h = x.to_vec();
        for (i, (w, b, k)) in layers.into_iter().enumerate() {
            let w = normalize_rows(&w, k.softplus());
            h = w
                .iter()
                .zip(&b)
                .map(|(row, &bi)| {
                    let y = sum(row.iter().zip(&h).map(|(&a, &v)| a * v)) + bi;
                    if i < last {
                        y.max_c(0.0)
                    } else {
                        y
                    }
                })
                .collect();
        }
        h
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_s::<f64>(x)
    }

    /// `Π softplus(k_i)`.
    pub fn loss_s<S: Real>(&self) -> S {
        self.lifted::<S>()
            .into_iter()
            .fold(S::one(), |acc, (_, _, k)| acc * k.softplus())
    }

    pub fn bound(&self) -> f64 {
        self.loss_s::<f64>()
    }

    pub fn normalized_weights(&self) -> Vec<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|l| normalize_rows(&l.weights, l.k.softplus()))
            .collect()
    }
}

// Configuration

/// Loss weights and the iteration fractions that switch terms on or off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pbr: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub smoothness: f64,
    pub curvature: f64,
    pub lipschitz: f64,
    /// Squared Laplacian of a grid SDF; zero for analytic fields.
    pub grid_laplacian: f64,
    /// Curvature is active before this fraction of training.
    pub curvature_until: f64,
    /// The Lipschitz bound is active from this fraction on.
    pub lipschitz_from: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pbr: 0.2,
            mask: 0.1,
            eikonal: 0.1,
            smoothness: 0.01,
            curvature: 1.5,
            lipschitz: 1e-5,
            grid_laplacian: 0.0,
            curvature_until: 0.5,
            lipschitz_from: 0.5,
        }
    }
}

/// Weights in effect at one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActiveWeights {
    pub pbr: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub smoothness: f64,
    pub curvature: f64,
    pub lipschitz: f64,
    pub grid_laplacian: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("pbr", self.pbr),
            ("mask", self.mask),
            ("eikonal", self.eikonal),
            ("smoothness", self.smoothness),
            ("curvature", self.curvature),
            ("lipschitz", self.lipschitz),
            ("grid_laplacian", self.grid_laplacian),
            ("curvature_until", self.curvature_until),
            ("lipschitz_from", self.lipschitz_from),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::schema(format!("train.weights.{name}"), "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Weights at `progress ∈ [0, 1)`; the PBR term waits for `pbr_from`.
    pub fn at(&self, progress: f64, pbr_from: f64) -> ActiveWeights {
        ActiveWeights {
            pbr: if progress >= pbr_from { self.pbr } else { 0.0 },
            mask: self.mask,
            eikonal: self.eikonal,
            smoothness: self.smoothness,
            curvature: if progress < self.curvature_until { self.curvature } else { 0.0 },
            lipschitz: if progress >= self.lipschitz_from { self.lipschitz } else { 0.0 },
            grid_laplacian: self.grid_laplacian,
        }
    }
}

/// Base learning rate per parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub sdf: f64,
    pub log_beta: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub metallic: f64,
    pub emission: f64,
    pub sg_amplitude: f64,
    pub sg_sharpness: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            sdf: 2e-3,
            log_beta: 1e-2,
            albedo: 2e-2,
            roughness: 1e-2,
            metallic: 1e-2,
            emission: 2e-2,
            sg_amplitude: 1e-2,
            sg_sharpness: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn of(&self, key: ParamKey) -> f64 {
        match key {
            ParamKey::Sdf => self.sdf,
            ParamKey::LogBeta => self.log_beta,
            ParamKey::Albedo => self.albedo,
            ParamKey::Roughness => self.roughness,
            ParamKey::Metallic => self.metallic,
            ParamKey::Emission => self.emission,
            ParamKey::SgAmplitude => self.sg_amplitude,
            ParamKey::SgSharpness => self.sg_sharpness,
            ParamKey::SgAxis | ParamKey::LipschitzBound => 0.0,
        }
    }
}

/// Blocks that training may update.
pub const TRAINABLE: [ParamKey; 8] = [
    ParamKey::Sdf,
    ParamKey::LogBeta,
    ParamKey::Albedo,
    ParamKey::Roughness,
    ParamKey::Metallic,
    ParamKey::Emission,
    ParamKey::SgAmplitude,
    ParamKey::SgSharpness,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub seed: u64,
    /// Fraction of training that uses the RF loss without PBR.
    pub rf_only_fraction: f64,
    /// Iteration fractions at which every learning rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
    /// Parameter blocks held fixed, by name.
    pub frozen: Vec<String>,
    /// Standard deviation of the smoothness perturbation, in canonical units.
    pub smooth_sigma: f64,
    /// Share of each batch drawn from mask foreground pixels.
    pub foreground_fraction: f64,
    /// Occupancy rebuild period in iterations; 0 builds once.
    pub occupancy_every: usize,
    /// Reuse the first iteration's rays and random draws at every step.
    pub fixed_batch: bool,
    /// Checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_rays: 512,
            seed: 0,
            rf_only_fraction: 0.4,
            decay_at: vec![0.5, 0.75, 0.9, 0.95],
            decay_factor: 0.3,
            weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
            frozen: Vec::new(),
            smooth_sigma: 0.01,
            foreground_fraction: 0.5,
            occupancy_every: 0,
            fixed_batch: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_rays == 0 {
            return Err(Error::schema("train.batch_rays", "must be positive"));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::schema(format!("train.{name}"), "must lie in [0, 1]"))
            }
        };
        unit("rf_only_fraction", self.rf_only_fraction)?;
        unit("foreground_fraction", self.foreground_fraction)?;
        for &d in &self.decay_at {
            unit("decay_at", d)?;
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::schema("train.decay_factor", "must lie in (0, 1]"));
        }
        if !(self.smooth_sigma.is_finite() && self.smooth_sigma >= 0.0) {
            return Err(Error::schema("train.smooth_sigma", "must be finite and nonnegative"));
        }
        let lr = &self.learning_rates;
        for key in TRAINABLE {
            let v = lr.of(key);
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::schema(
                    format!("train.learning_rates.{}", key.name()),
                    "must be finite and nonnegative",
                ));
            }
        }
        for name in &self.frozen {
            if !TRAINABLE.iter().any(|k| k.name() == name) {
                return Err(Error::schema("train.frozen", format!("unknown parameter block `{name}`")));
            }
        }
        Ok(())
    }

    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        TRAINABLE
            .into_iter()
            .filter(|k| !self.frozen.iter().any(|f| f == k.name()))
            .collect()
    }

    /// Learning-rate multiplier at `progress`.
    pub fn lr_scale(&self, progress: f64) -> f64 {
        let n = self.decay_at.iter().filter(|&&d| progress >= d).count();
        self.decay_factor.powi(n as i32)
    }
}

// Adam

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected step with a learning rate per parameter.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr[i] * mh / (vh.sqrt() + self.eps);
        }
    }
}

// Training data

/// One training view.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Image,
    /// Single channel in `[0, 1]`.
    pub mask: Image,
    pub pose: Pose,
    pub camera: Camera,
}

impl Frame {
    pub fn validate(&self, index: usize) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width != w || self.image.height != h || self.image.channels != 3 {
            return Err(Error::invalid(format!("frame {index}: image must be {w}×{h} RGB")));
        }
        if self.mask.width != w || self.mask.height != h || self.mask.channels != 1 {
            return Err(Error::invalid(format!("frame {index}: mask must be {w}×{h} single channel")));
        }
        Ok(())
    }
}

/// Per-term loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms<S = f64> {
    pub rf: S,
    pub pbr: S,
    pub mask: S,
    pub eikonal: S,
    pub curvature: S,
    pub smoothness: S,
    pub lipschitz: S,
    pub laplacian: S,
}

impl<S: Real> LossTerms<S> {
    pub fn zero() -> Self {
        LossTerms {
            rf: S::zero(),
            pbr: S::zero(),
            mask: S::zero(),
            eikonal: S::zero(),
            curvature: S::zero(),
            smoothness: S::zero(),
            lipschitz: S::zero(),
            laplacian: S::zero(),
        }
    }

    pub fn total(&self, w: &ActiveWeights) -> S {
        self.rf
            + self.pbr * w.pbr
            + self.mask * w.mask
            + self.eikonal * w.eikonal
            + self.curvature * w.curvature
            + self.smoothness * w.smoothness
            + self.lipschitz * w.lipschitz
            + self.laplacian * w.grid_laplacian
    }

    pub fn values(&self) -> LossTerms<f64> {
        LossTerms {
            rf: self.rf.val(),
            pbr: self.pbr.val(),
            mask: self.mask.val(),
            eikonal: self.eikonal.val(),
            curvature: self.curvature.val(),
            smoothness: self.smoothness.val(),
            lipschitz: self.lipschitz.val(),
            laplacian: self.laplacian.val(),
        }
    }
}

impl LossTerms<f64> {
    fn accumulate(&mut self, o: &LossTerms<f64>) {
        self.rf += o.rf;
        self.pbr += o.pbr;
        self.mask += o.mask;
        self.eikonal += o.eikonal;
        self.curvature += o.curvature;
        self.smoothness += o.smoothness;
        self.lipschitz += o.lipschitz;
        self.laplacian += o.laplacian;
    }

    fn is_finite(&self) -> bool {
        [
            self.rf,
            self.pbr,
            self.mask,
            self.eikonal,
            self.curvature,
            self.smoothness,
            self.lipschitz,
            self.laplacian,
        ]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything drawn for one training ray before differentiation.
#[derive(Clone, Debug)]
pub struct RayPlan {
    pub frame: usize,
    pub pixel: usize,
    pub target: Rgb,
    pub mask: f64,
    /// Whether the PBR term is part of this step.
    pub pbr: bool,
    pub march: Option<March>,
    pub scatter: Option<ScatterPlan>,
    /// Canonical samples that survive occupancy.
    pub geometry: Vec<Vec3>,
    /// Curvature points with their tangents, non-degenerate only.
    pub curvature: Vec<(Vec3, Vec3)>,
    pub smooth: Vec<SmoothSample>,
}

/// Batch-wide denominators of the mean losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizers {
    pub pixels: usize,
    pub geometry: usize,
    pub curvature: usize,
}

impl Normalizers {
    pub fn of(plans: &[RayPlan]) -> Self {
        Normalizers {
            pixels: plans.len(),
            geometry: plans.iter().map(|p| p.geometry.len()).sum(),
            curvature: plans.iter().map(|p| p.curvature.len()).sum(),
        }
    }
}

/// Draws samples, scatter directions and secondary traces for one ray.
pub fn plan_ray(
    p: &Posed,
    frame: &Frame,
    frame_index: usize,
    pixel: usize,
    render: &RenderConfig,
    cfg: &TrainConfig,
    with_pbr: bool,
    streams: &mut RayStreams,
) -> RayPlan {
    let w = frame.camera.width;
    let ray = frame.camera.ray(pixel % w, pixel / w);
    let march = march_primary(p, &ray, render, &mut streams.primary);
    let model = p.model;
    let mut plan = RayPlan {
        frame: frame_index,
        pixel,
        target: frame.image.rgb(pixel),
        mask: frame.mask.data[pixel] as f64,
        pbr: with_pbr,
        march: None,
        scatter: None,
        geometry: Vec::new(),
        curvature: Vec::new(),
        smooth: Vec::new(),
    };
    let Some(march) = march else {
        return plan;
    };
    let rng = &mut streams.scatter;
    let normal = Normal::new(0.0, cfg.smooth_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    for (x, &w) in march.canonical.iter().zip(&march.samples.weights) {
        let Some(x) = *x else { continue };
        plan.geometry.push(x);
        let (_, g) = model.sdf.eval_grad(x);
        if g.norm() >= DEGENERATE_GRADIENT {
            let t = random_tangent(g.normalize(), rng);
            let (_, g1) = model.sdf.eval_grad(x + t * CURVATURE_EPS);
            if g1.norm() >= DEGENERATE_GRADIENT {
                plan.curvature.push((x, t));
            }
        }
        if w >= SMOOTH_MIN_WEIGHT {
            let offset = V3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            plan.smooth.push(SmoothSample { x, offset, weight: w });
        }
    }
    if with_pbr {
        plan.scatter = Some(plan_scatter(
            p,
            &march,
            render,
            render.scatter_points,
            DirectionSampling::Sphere,
            true,
            rng,
        ));
    }
    plan.march = Some(march);
    plan
}

/// Loss contribution of one planned ray, already divided by the batch denominators.
pub fn ray_loss<S: Real>(model: &Model, plan: &RayPlan, render: &RenderConfig, n: &Normalizers) -> LossTerms<S> {
    let mut t = LossTerms::<S>::zero();
    let px = n.pixels.max(1) as f64;
    let Some(march) = &plan.march else {
        t.rf = S::cst(l1_term::<f64>(&[0.0; 3], &plan.target) / px);
        t.mask = S::cst(bce_term::<f64>(0.0, plan.mask) / px);
        if plan.pbr {
            t.pbr = t.rf;
        }
        return t;
    };
    let q = march_quadrature::<S>(model, march);
    t.rf = l1_term(&rf_color(model, march, &q), &plan.target) / px;
    if let Some(scatter) = &plan.scatter {
        t.pbr = l1_term(&pbr_color(model, march, &q, scatter, render, false), &plan.target) / px;
    }
    t.mask = bce_term(q.opacity(), plan.mask) / px;
    if n.geometry > 0 {
        t.eikonal = sum(plan.geometry.iter().map(|&x| eikonal_term::<S>(&model.sdf, x))) / n.geometry as f64;
    }
    if n.curvature > 0 {
        t.curvature = sum(plan
            .curvature
            .iter()
            .filter_map(|&(x, tan)| curvature_term::<S>(&model.sdf, x, tan, CURVATURE_EPS)))
            / n.curvature as f64;
    }
    t.smoothness = loss_smoothness(&model.material, &plan.smooth, n.pixels);
    t
}

// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OccupancyEntry {
    frame: usize,
    res: usize,
    bounds: Aabb,
    bits: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    iteration: usize,
    blocks: Vec<BlockEntry>,
    params: PathBuf,
    adam: Adam,
    adam_m: PathBuf,
    adam_v: PathBuf,
    occupancy: Vec<OccupancyEntry>,
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Optimizer progress that is not part of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub adam: Adam,
    /// One grid per frame, empty when occupancy is off.
    pub occupancy: Vec<OccupancyGrid>,
}

pub fn save_checkpoint(dir: &Path, model: &Model, layout: &ParamLayout, state: &TrainState) -> Result<()> {
    let params = model.read_params(layout);
    write_bytes(&dir.join("params.f64"), &encode_f64(&params))?;
    write_bytes(&dir.join("adam_m.f64"), &encode_f64(&state.adam.m))?;
    write_bytes(&dir.join("adam_v.f64"), &encode_f64(&state.adam.v))?;
    let mut occupancy = Vec::new();
    for g in &state.occupancy {
        let name = PathBuf::from(format!("occupancy_{:03}.u64", g.frame));
        let bytes: Vec<u8> = g.bits().iter().flat_map(|b| b.to_le_bytes()).collect();
        write_bytes(&dir.join(&name), &bytes)?;
        occupancy.push(OccupancyEntry {
            frame: g.frame,
            res: g.res,
            bounds: g.bounds,
            bits: name,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        iteration: state.iteration,
        blocks: layout
            .blocks()
            .map(|(k, r)| BlockEntry {
                name: k.name().into(),
                len: r.len(),
            })
            .collect(),
        params: "params.f64".into(),
        adam: state.adam.clone(),
        adam_m: "adam_m.f64".into(),
        adam_v: "adam_v.f64".into(),
        occupancy,
    };
    write_json(&dir.join(CHECKPOINT_FILE), &manifest)
}

/// Restores parameters into `model` and returns the optimizer state.
///
/// The model must come from the same scene as the checkpoint; its layout over
/// the checkpoint's blocks has to match block for block.
pub fn load_checkpoint(dir: &Path, model: &mut Model) -> Result<(ParamLayout, TrainState)> {
    let path = dir.join(CHECKPOINT_FILE);
    let m: CheckpointManifest = read_json(&path)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::schema("checkpoint.version", format!("unsupported version {}", m.version)));
    }
    let mut keys = Vec::new();
    for (i, b) in m.blocks.iter().enumerate() {
        let key = ParamKey::from_name(&b.name)
            .ok_or_else(|| Error::schema(format!("checkpoint.blocks[{i}].name"), format!("unknown block `{}`", b.name)))?;
        let have = model.block(key).map_or(0, <[f64]>::len);
        if have != b.len {
            return Err(Error::schema(
                format!("checkpoint.blocks[{i}].len"),
                format!("block `{}` has {} values in the scene, {} in the checkpoint", b.name, have, b.len),
            ));
        }
        keys.push(key);
    }
    let layout = model.layout(&keys);
    let n = layout.total();
    let read = |p: &Path| -> Result<Vec<f64>> { decode_f64(&read_bytes(&dir.join(p))?, n, &p.to_string_lossy()) };
    let params = read(&m.params)?;
    let mut adam = m.adam;
    adam.m = read(&m.adam_m)?;
    adam.v = read(&m.adam_v)?;
    let mut occupancy = Vec::new();
    for o in &m.occupancy {
        let bytes = read_bytes(&dir.join(&o.bits))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format {
                what: "occupancy bits",
                message: format!("{}: length is not a multiple of 8", o.bits.display()),
            });
        }
        let bits = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        occupancy.push(OccupancyGrid::from_bits(o.res, o.bounds, o.frame, bits)?);
    }
    model.write_params(&layout, &params);
    Ok((
        layout,
        TrainState {
            iteration: m.iteration,
            adam,
            occupancy,
        },
    ))
}

// Training loop

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub terms: LossTerms<f64>,
    pub total: f64,
    pub lr_scale: f64,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str = "iteration,rf,pbr,mask,eikonal,curvature,smoothness,lipschitz,laplacian,total,lr_scale";

    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iteration,
            t.rf,
            t.pbr,
            t.mask,
            t.eikonal,
            t.curvature,
            t.smoothness,
            t.lipschitz,
            t.laplacian,
            self.total,
            self.lr_scale
        )
    }
}

#[derive(Serialize)]
struct NanRay {
    frame: usize,
    pixel: usize,
    samples: usize,
    terms: LossTerms<f64>,
    finite_gradient: bool,
}

#[derive(Serialize)]
struct NanDump {
    iteration: usize,
    terms: LossTerms<f64>,
    rays: Vec<NanRay>,
}

pub struct Trainer {
    model: Model,
    frames: Vec<Frame>,
    render: RenderConfig,
    cfg: TrainConfig,
    layout: ParamLayout,
    state: TrainState,
    foreground: Vec<Vec<usize>>,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model, frames: Vec<Frame>, render: RenderConfig, cfg: TrainConfig) -> Result<Self> {
        let layout = model.layout(&cfg.trainable_keys());
        let state = TrainState {
            iteration: 0,
            adam: Adam::new(layout.total()),
            occupancy: Vec::new(),
        };
        let mut t = Self::assemble(model, frames, render, cfg, layout, state)?;
        t.rebuild_occupancy();
        Ok(t)
    }

    /// Continues from a checkpoint whose parameters are already in `model`.
    pub fn resume(
        model: Model,
        frames: Vec<Frame>,
        render: RenderConfig,
        cfg: TrainConfig,
        layout: ParamLayout,
        state: TrainState,
    ) -> Result<Self> {
        if state.adam.m.len() != layout.total() || state.adam.v.len() != layout.total() {
            return Err(Error::invalid("optimizer state does not match the parameter layout"));
        }
        let occupied = !state.occupancy.is_empty();
        let mut t = Self::assemble(model, frames, render, cfg, layout, state)?;
        if t.render.occupancy && !occupied {
            t.rebuild_occupancy();
        }
        Ok(t)
    }

    fn assemble(
        model: Model,
        frames: Vec<Frame>,
        render: RenderConfig,
        cfg: TrainConfig,
        layout: ParamLayout,
        state: TrainState,
    ) -> Result<Self> {
        render.validate()?;
        cfg.validate()?;
        if frames.is_empty() {
            return Err(Error::invalid("training needs at least one frame"));
        }
        for (i, f) in frames.iter().enumerate() {
            f.validate(i)?;
            f.pose.check(&model.skeleton)?;
        }
        let foreground = frames
            .iter()
            .map(|f| (0..f.mask.data.len()).filter(|&i| f.mask.data[i] > 0.5).collect())
            .collect();
        Ok(Trainer {
            model,
            frames,
            render,
            cfg,
            layout,
            state,
            foreground,
            dump_dir: None,
        })
    }

    /// Directory that receives a diagnostic dump if a step goes non-finite.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, &self.layout, &self.state)
    }

    fn rebuild_occupancy(&mut self) {
        self.state.occupancy = if self.render.occupancy {
            let (model, render) = (&self.model, &self.render);
            crate::parallel::map_indexed(self.frames.len(), |i| {
                model.build_occupancy(&self.frames[i].pose, i, render.occupancy_res, render.bbox_padding)
            })
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .unwrap_or_default()
        } else {
            Vec::new()
        };
    }

    fn progress(&self) -> f64 {
        self.state.iteration as f64 / self.cfg.iterations.max(1) as f64
    }

    fn draw_batch(&self) -> Vec<(usize, usize)> {
        let sample = if self.cfg.fixed_batch { 0 } else { self.state.iteration as u32 };
        let mut rng: ChaCha8Rng = RngStream::new(self.cfg.seed, StreamKey::new(u64::MAX, sample, 2)).rng();
        (0..self.cfg.batch_rays)
            .map(|_| {
                let f = rng.random_range(0..self.frames.len());
                let fg = &self.foreground[f];
                let pixel = if !fg.is_empty() && rng.random::<f64>() < self.cfg.foreground_fraction {
                    *fg.choose(&mut rng).expect("non-empty")
                } else {
                    rng.random_range(0..self.frames[f].mask.data.len())
                };
                (f, pixel)
            })
            .collect()
    }

    /// Draws and plans the rays of the current iteration.
    pub fn plan_batch(&self) -> Vec<RayPlan> {
        let with_pbr = self.progress() >= self.cfg.rf_only_fraction && self.cfg.weights.pbr > 0.0;
        let sample = if self.cfg.fixed_batch { 0 } else { self.state.iteration as u32 };
        let batch = self.draw_batch();
        crate::parallel::map_indexed(batch.len(), |i| {
            let (f, pixel) = batch[i];
            let frame = &self.frames[f];
            let occ = self.state.occupancy.get(f);
            let posed = Posed::new(&self.model, &frame.pose, occ, self.render.bbox_padding);
            let key = ((f as u64) << 32) | pixel as u64;
            let mut streams = RayStreams::new(self.cfg.seed, key, sample);
            plan_ray(&posed, frame, f, pixel, &self.render, &self.cfg, with_pbr, &mut streams)
        })
    }

    /// Loss terms and gradient of planned rays, reduced in ray order.
    pub fn evaluate(&self, plans: &[RayPlan]) -> (Vec<LossTerms<f64>>, Vec<f64>, Vec<bool>) {
        let norm = Normalizers::of(plans);
        let w = self.cfg.weights.at(self.progress(), self.cfg.rf_only_fraction);
        let per_ray = crate::parallel::map_indexed(plans.len(), |i| {
            let session = TapeSession::begin(&self.layout);
            let terms = ray_loss::<Var>(&self.model, &plans[i], &self.render, &norm);
            let grads = session.backward(&[(terms.total(&w), 1.0)]);
            (terms.values(), grads)
        });
        let mut grad = vec![0.0; self.layout.total()];
        let mut terms = Vec::with_capacity(plans.len());
        let mut finite = Vec::with_capacity(plans.len());
        for (t, g) in per_ray {
            finite.push(g.iter().all(|(_, d)| d.is_finite()));
            for (i, d) in g {
                grad[i as usize] += d;
            }
            terms.push(t);
        }
        (terms, grad, finite)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<IterationLog> {
        let progress = self.progress();
        let it = self.state.iteration;
        if self.render.occupancy && self.cfg.occupancy_every > 0 && it > 0 && it % self.cfg.occupancy_every == 0 {
            self.rebuild_occupancy();
        }
        let plans = self.plan_batch();
        let (per_ray, mut grad, finite) = self.evaluate(&plans);
        let mut terms = LossTerms::<f64>::zero();
        for t in &per_ray {
            terms.accumulate(t);
        }
        let weights = self.cfg.weights.at(progress, self.cfg.rf_only_fraction);
        if let (SdfField::Grid(g), Some(r)) = (&self.model.sdf, self.layout.range(ParamKey::Sdf)) {
            if weights.grid_laplacian > 0.0 {
                let (value, lg) = grid_laplacian(g);
                terms.laplacian = value;
                for (d, l) in grad[r].iter_mut().zip(lg) {
                    *d += weights.grid_laplacian * l;
                }
            }
        }
        let total = terms.total(&weights);
        if !total.is_finite() || !terms.is_finite() || finite.iter().any(|f| !f) {
            return Err(self.nan_abort(&plans, &per_ray, &finite, terms));
        }
        let lr_scale = self.cfg.lr_scale(progress);
        let mut lr = vec![0.0; self.layout.total()];
        for (k, r) in self.layout.blocks() {
            lr[r].fill(self.cfg.learning_rates.of(k) * lr_scale);
        }
        let mut params = self.model.read_params(&self.layout);
        self.state.adam.update(&mut params, &grad, &lr);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(self.nan_abort(&plans, &per_ray, &finite, terms));
        }
        self.model.write_params(&self.layout, &params);
        self.state.iteration += 1;
        Ok(IterationLog {
            iteration: it,
            terms,
            total,
            lr_scale,
        })
    }

    fn nan_abort(&self, plans: &[RayPlan], per_ray: &[LossTerms<f64>], finite: &[bool], terms: LossTerms<f64>) -> Error {
        let it = self.state.iteration;
        let dump = NanDump {
            iteration: it,
            terms,
            rays: plans
                .iter()
                .zip(per_ray)
                .zip(finite)
                .filter(|((_, t), f)| !t.is_finite() || !**f)
                .map(|((p, t), f)| NanRay {
                    frame: p.frame,
                    pixel: p.pixel,
                    samples: p.march.as_ref().map_or(0, |m| m.canonical.len()),
                    terms: *t,
                    finite_gradient: *f,
                })
                .collect(),
        };
        let Some(dir) = &self.dump_dir else {
            return Error::Numeric(format!("non-finite loss or update at iteration {it}"));
        };
        let path = dir.join("nan_dump.json");
        match write_json(&path, &dump) {
            Ok(()) => Error::Numeric(format!(
                "non-finite loss or update at iteration {it}; diagnostics in {}",
                path.display()
            )),
            Err(e) => Error::Numeric(format!("non-finite loss or update at iteration {it}; dump failed: {e}")),
        }
    }
}

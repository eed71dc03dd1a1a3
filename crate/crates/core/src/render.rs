//! Primary marching, the volumetric scattering estimator, articulated
//! secondary tracing with zero-crossing search, and image rendering.
//!
//! Every estimator is split into a sampling plan (all random choices,
//! canonical correspondences and secondary traces, computed in `f64`) and an
//! evaluation that is generic over [`Real`], so the same code renders images
//! and records gradients for training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::articulation::{lbs_jacobian, Pose};
use crate::autodiff::Real;
use crate::camera::Camera;
use crate::fields::{density, OccupancyGrid, EMPTY_DISTANCE};
use crate::linalg::{Aabb, Mat3, Ray, Vec3, V3};
use crate::model::Model;
use crate::raster::Image;
use crate::sampling::{
    deltas_to, quadrature_weights, sample_heterogeneous_distance, sample_sphere_stratified,
    DistanceSample, Quadrature, RaySampleSet, RngStream, StreamKey,
};
use crate::shading::{brdf_lobes, incoming_radiance, Light, Rgb, SecondaryTraceResult};
use crate::{Error, Result};

/// Secondary origins closer than this to the surface are pushed out to it.
pub const SURFACE_LIFT: f64 = 1e-3;
const HISTOGRAM_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rf,
    Pbr,
    Albedo,
    Normal,
    Roughness,
    Avmap,
    Relight,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Rf,
        Mode::Pbr,
        Mode::Albedo,
        Mode::Normal,
        Mode::Roughness,
        Mode::Avmap,
        Mode::Relight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Rf => "rf",
            Mode::Pbr => "pbr",
            Mode::Albedo => "albedo",
            Mode::Normal => "normal",
            Mode::Roughness => "roughness",
            Mode::Avmap => "avmap",
            Mode::Relight => "relight",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Mode::Roughness | Mode::Avmap => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::schema("--mode", format!("unknown mode `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

/// How scatter points are weighted in the PBR estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterWeights {
    /// `opacity / M_t` for every resampled point.
    #[default]
    Resampled,
    /// Quadrature weights recomputed over the sorted scatter points.
    Quadrature,
}

/// Reflectance lobes used by the PBR estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lobes {
    #[default]
    Full,
    /// Lambertian term only.
    Diffuse,
}

/// How secondary directions are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionSampling {
    /// Stratified over the full sphere.
    Sphere,
    /// Proportional to the environment map; falls back to `Sphere` for other lights.
    Light,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub uniform_samples: usize,
    pub importance_rounds: Vec<usize>,
    pub scatter_points: usize,
    pub directions: usize,
    pub relight_directions: usize,
    pub secondary_samples: usize,
    pub secondary_importance: usize,
    pub secondary_near: f64,
    pub secondary_far: f64,
    pub bbox_padding: f64,
    pub occupancy: bool,
    pub occupancy_res: usize,
    pub scatter_weights: ScatterWeights,
    pub lobes: Lobes,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            uniform_samples: 128,
            importance_rounds: vec![16, 16],
            scatter_points: 16,
            directions: 512,
            relight_directions: 1024,
            secondary_samples: 64,
            secondary_importance: 4,
            secondary_near: 0.0,
            secondary_far: 1.5,
            bbox_padding: 0.1,
            occupancy: true,
            occupancy_res: OccupancyGrid::RES,
            scatter_weights: ScatterWeights::default(),
            lobes: Lobes::default(),
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("uniform_samples", self.uniform_samples),
            ("scatter_points", self.scatter_points),
            ("directions", self.directions),
            ("relight_directions", self.relight_directions),
            ("secondary_samples", self.secondary_samples),
            ("secondary_importance", self.secondary_importance),
            ("occupancy_res", self.occupancy_res),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::schema(format!("render.{name}"), "must be at least 1"));
            }
        }
        if let Some(i) = self.importance_rounds.iter().position(|&n| n == 0) {
            return Err(Error::schema(format!("render.importance_rounds[{i}]"), "must be at least 1"));
        }
        if self.directions < self.scatter_points {
            return Err(Error::schema("render.directions", "must be at least scatter_points"));
        }
        if !(self.secondary_near >= 0.0 && self.secondary_near < self.secondary_far) {
            return Err(Error::schema("render.secondary_far", "need 0 <= near < far"));
        }
        if !(self.bbox_padding >= 0.0) {
            return Err(Error::schema("render.bbox_padding", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn primary_count(&self) -> usize {
        self.uniform_samples + self.importance_rounds.iter().sum::<usize>()
    }
}

/// A model in one pose, with the acceleration data of that frame.
pub struct Posed<'a> {
    pub model: &'a Model,
    pub pose: &'a Pose,
    pub occupancy: Option<&'a OccupancyGrid>,
    pub bounds: Option<Aabb>,
}

impl<'a> Posed<'a> {
    pub fn new(model: &'a Model, pose: &'a Pose, occupancy: Option<&'a OccupancyGrid>, padding: f64) -> Self {
        let bounds = model.posed_bounds(pose).map(|b| b.padded(padding));
        Posed {
            model,
            pose,
            occupancy,
            bounds,
        }
    }

    /// Canonical correspondence, skipping free space.
    pub fn canonical(&self, x_o: Vec3) -> Option<Vec3> {
        let inside = self.bounds.is_some_and(|b| b.contains(x_o));
        if !inside || self.occupancy.is_some_and(|o| !o.is_occupied(x_o)) {
            return None;
        }
        self.model.canonical(self.pose, x_o)
    }

    /// Canonical correspondence ignoring occupancy.
    pub fn canonical_exact(&self, x_o: Vec3) -> Option<Vec3> {
        self.model.canonical(self.pose, x_o)
    }

    pub fn sdf(&self, x_o: Vec3) -> f64 {
        self.canonical(x_o)
            .map_or(EMPTY_DISTANCE, |c| self.model.sdf.eval(c))
    }

    fn sigma_at(&self, x_c: Option<Vec3>) -> f64 {
        x_c.map_or(0.0, |c| self.model.density.sigma(self.model.sdf.eval(c)))
    }
}

/// Primary samples with their canonical points.
#[derive(Clone, Debug)]
pub struct March {
    pub ray: Ray,
    pub samples: RaySampleSet,
    pub canonical: Vec<Option<Vec3>>,
}

impl March {
    pub fn far(&self) -> f64 {
        let n = self.samples.offsets.len();
        self.samples.offsets[n - 1] + self.samples.deltas[n - 1]
    }
}

/// Stratified inverse-CDF draws from a piecewise-constant histogram over
/// `[t_i, t_i + δ_i)`; returns sorted `(t, bin)` pairs.
fn sample_histogram(rng: &mut ChaCha8Rng, offsets: &[f64], deltas: &[f64], mass: &[f64], n: usize) -> Vec<(f64, usize)> {
    let total: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut bin = 0;
    let mut before = 0.0;
    for j in 0..n {
        let u = (j as f64 + rng.random::<f64>()) / n as f64 * total;
        while bin + 1 < mass.len() && before + mass[bin] <= u {
            before += mass[bin];
            bin += 1;
        }
        let frac = if mass[bin] > 0.0 {
            ((u - before) / mass[bin]).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push((offsets[bin] + frac * deltas[bin], bin));
    }
    out
}

/// Marches a primary ray through the padded posed box: uniform samples, then
/// importance rounds drawn from the running weight histogram.
pub fn march_primary(p: &Posed, ray: &Ray, cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> Option<March> {
    let (t0, t1) = p.bounds?.intersect(ray)?;
    if !(t1 - t0 > 1e-9) {
        return None;
    }
    let n = cfg.uniform_samples;
    let step = (t1 - t0) / n as f64;
    let jitter: f64 = rng.random();
    let mut pts: Vec<(f64, Option<Vec3>)> = (0..n)
        .map(|i| {
            let t = t0 + (i as f64 + jitter) * step;
            (t, p.canonical(ray.at(t)))
        })
        .collect();
    let build = |pts: &[(f64, Option<Vec3>)]| {
        let offsets: Vec<f64> = pts.iter().map(|x| x.0).collect();
        let sigma: Vec<f64> = pts.iter().map(|x| p.sigma_at(x.1)).collect();
        RaySampleSet::new(offsets, t1, sigma)
    };
    let mut set = build(&pts).ok()?;
    for &k in &cfg.importance_rounds {
        let floor = HISTOGRAM_FLOOR / (t1 - t0);
        let mass: Vec<f64> = set
            .weights
            .iter()
            .zip(&set.deltas)
            .map(|(w, d)| w + floor * d)
            .collect();
        let fresh = sample_histogram(rng, &set.offsets, &set.deltas, &mass, k);
        pts.extend(fresh.into_iter().map(|(t, _)| (t, p.canonical(ray.at(t)))));
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 - b.0 <= 1e-12);
        set = build(&pts).ok()?;
    }
    Some(March {
        ray: *ray,
        samples: set,
        canonical: pts.into_iter().map(|x| x.1).collect(),
    })
}

/// Primary quadrature recomputed from the model at the planned points.
pub fn march_quadrature<S: Real>(model: &Model, march: &March) -> Quadrature<S> {
    let beta = model.density.beta_s::<S>();
    let sigma: Vec<S> = march
        .canonical
        .iter()
        .map(|c| c.map_or(S::zero(), |c| density(model.sdf.eval_s::<S>(c), beta)))
        .collect();
    quadrature_weights(&sigma, &march.samples.deltas).expect("march intervals are positive")
}

/// `Σ w_i L(x_c_i)`.
pub fn rf_color<S: Real>(model: &Model, march: &March, q: &Quadrature<S>) -> Rgb<S> {
    let mut c = [S::zero(); 3];
    for (w, x) in q.weights.iter().zip(&march.canonical) {
        if let Some(x) = x {
            let e = model.radiance.eval_s::<S>(*x);
            for k in 0..3 {
                c[k] = c[k] + *w * e[k];
            }
        }
    }
    c
}

/// Result of the zero-crossing search on one secondary ray.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossingWeights {
    /// Index of the first sample of the first sign-changing pair, or the
    /// last index. Zero counts as outside.
    pub start: usize,
    pub weights: Vec<f64>,
    pub transmittance: f64,
}

/// Sequential form: stop at the first sign change, then accumulate
/// transmittance weights from there on.
pub fn zero_crossing_reference(sdf: &[f64], sigma: &[f64], delta: f64) -> CrossingWeights {
    let n = sdf.len();
    assert!(n > 0 && sigma.len() == n);
    let mut start = n - 1;
    for i in 0..n - 1 {
        if (sdf[i] < 0.0) != (sdf[i + 1] < 0.0) {
            start = i;
            break;
        }
    }
    let mut weights = vec![0.0; n];
    let mut t = 1.0;
    for i in start..n {
        let absorb = -(-sigma[i] * delta).exp_m1();
        weights[i] = t * absorb;
        t *= (-sigma[i] * delta).exp();
    }
    CrossingWeights {
        start,
        weights,
        transmittance: t,
    }
}

/// Masked form: crossing flags, per-sample factors and the activity mask are
/// computed independently per sample; the transmittance product then runs in
/// sample order, multiplying inactive samples by exactly one.
pub fn zero_crossing(sdf: &[f64], sigma: &[f64], delta: f64) -> CrossingWeights {
    let n = sdf.len();
    assert!(n > 0 && sigma.len() == n);
    let crossing: Vec<bool> = (0..n)
        .map(|i| i + 1 < n && (sdf[i] < 0.0) != (sdf[i + 1] < 0.0))
        .collect();
    let mut seen = false;
    let active: Vec<bool> = crossing
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            seen |= c;
            seen || i == n - 1
        })
        .collect();
    let factor: Vec<f64> = sigma.iter().map(|s| (-s * delta).exp()).collect();
    let absorb: Vec<f64> = sigma.iter().map(|s| -(-s * delta).exp_m1()).collect();
    let mut weights = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        weights[i] = if active[i] { t * absorb[i] } else { 0.0 };
        t *= if active[i] { factor[i] } else { 1.0 };
    }
    CrossingWeights {
        start: active.iter().position(|&a| a).unwrap_or(n - 1),
        weights,
        transmittance: t,
    }
}

/// [`zero_crossing`] over many rays at once.
pub fn zero_crossing_batch(rays: &[(Vec<f64>, Vec<f64>)], delta: f64) -> Vec<CrossingWeights> {
    crate::parallel::map_indexed(rays.len(), |i| zero_crossing(&rays[i].0, &rays[i].1, delta))
}

/// Traces one secondary ray from an observation-space origin.
pub fn trace_secondary(p: &Posed, origin: Vec3, dir: Vec3, cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> SecondaryTraceResult {
    let n = cfg.secondary_samples;
    let (near, far) = (cfg.secondary_near, cfg.secondary_far);
    let delta = if n > 1 {
        (far - near) / (n - 1) as f64
    } else {
        far - near
    };
    let offsets: Vec<f64> = (0..n).map(|k| near + delta * k as f64).collect();
    let beta = p.model.density.beta();
    let sdf: Vec<f64> = offsets.iter().map(|&t| p.sdf(origin + dir * t)).collect();
    let sigma: Vec<f64> = sdf.iter().map(|&d| density(d, beta)).collect();
    let cw = zero_crossing(&sdf, &sigma, delta);

    let deltas = vec![delta; n];
    let mass: Vec<f64> = cw
        .weights
        .iter()
        .enumerate()
        .map(|(k, w)| if k >= cw.start { w + HISTOGRAM_FLOOR } else { 0.0 })
        .collect();
    let picks = sample_histogram(rng, &offsets, &deltas, &mass, cfg.secondary_importance);
    let canon: Vec<Option<Vec3>> = picks.iter().map(|&(t, _)| p.canonical(origin + dir * t)).collect();
    let sigma_s: Vec<f64> = canon.iter().map(|&c| p.sigma_at(c)).collect();
    let ts: Vec<f64> = picks.iter().map(|x| x.0).collect();
    let last = picks[picks.len() - 1];
    let end = offsets[last.1] + delta;
    let deltas_s: Vec<f64> = deltas_to(&ts, end).into_iter().map(|d| d.max(1e-12)).collect();
    let q = quadrature_weights(&sigma_s, &deltas_s).expect("secondary intervals are positive");
    let mut c_rf = [0.0; 3];
    for (w, c) in q.weights.iter().zip(&canon) {
        if let Some(c) = c {
            let e = p.model.radiance.eval(*c);
            for k in 0..3 {
                c_rf[k] += w * e[k];
            }
        }
    }
    SecondaryTraceResult {
        t_esc: q.residual.clamp(0.0, 1.0),
        c_rf,
    }
}

/// One secondary direction with its trace.
#[derive(Clone, Copy, Debug)]
pub struct ScatterDir {
    pub wi: Vec3,
    pub pdf: f64,
    pub trace: SecondaryTraceResult,
}

#[derive(Clone, Debug)]
pub struct ScatterPoint {
    pub t: f64,
    /// Primary interval containing `t`.
    pub interval: usize,
    pub x_o: Vec3,
    pub x_c: Vec3,
    /// `J⁻ᵀ` of the skinning map at `x_c`, for normals.
    pub normal_map: Mat3,
    pub dirs: Vec<ScatterDir>,
    /// Directions assigned to this point, including skipped back-facing ones.
    pub assigned: usize,
}

/// Scatter points and traced directions of one primary ray.
#[derive(Clone, Debug, Default)]
pub struct ScatterPlan {
    /// Resampling draws, including those that produced no point.
    pub attempts: usize,
    pub points: Vec<ScatterPoint>,
}

impl ScatterPlan {
    pub fn traces(&self) -> impl Iterator<Item = &ScatterDir> {
        self.points.iter().flat_map(|p| p.dirs.iter())
    }
}

fn normal_map(model: &Model, pose: &Pose, x_c: Vec3) -> Mat3 {
    let (_, j) = lbs_jacobian(&model.skeleton, pose, x_c);
    j.inverse().map_or(Mat3::IDENTITY, |ji| ji.transpose())
}

/// Resamples `M_t` points from the primary weights, then draws `directions`
/// secondary directions, assigned round-robin, and traces each.
///
/// With `cull` set, directions below a point's surface are not traced.
pub fn plan_scatter(
    p: &Posed,
    march: &March,
    cfg: &RenderConfig,
    directions: usize,
    sampling: DirectionSampling,
    cull: bool,
    rng: &mut ChaCha8Rng,
) -> ScatterPlan {
    let s = &march.samples;
    let opacity = s.opacity();
    let m_t = cfg.scatter_points;
    if !(opacity > 1e-9) {
        return ScatterPlan {
            attempts: m_t,
            points: Vec::new(),
        };
    }
    let mut bounds = s.offsets.clone();
    bounds.push(march.far());
    let model = p.model;
    let mut points = Vec::with_capacity(m_t);
    for j in 0..m_t {
        let u = ((j as f64 + rng.random::<f64>()) / m_t as f64 * opacity).min(opacity * (1.0 - 1e-12));
        let Ok(DistanceSample::Interaction { t, interval }) = sample_heterogeneous_distance(u, &s.densities, &bounds)
        else {
            continue;
        };
        let x_o = march.ray.at(t);
        let Some(x_c) = p.canonical_exact(x_o) else {
            continue;
        };
        points.push(ScatterPoint {
            t,
            interval,
            x_o,
            x_c,
            normal_map: normal_map(model, p.pose, x_c),
            dirs: Vec::new(),
            assigned: 0,
        });
    }
    if points.is_empty() {
        return ScatterPlan {
            attempts: m_t,
            points,
        };
    }

    let sampler = match (&model.light, sampling) {
        (Light::Map(m), DirectionSampling::Light) => m.sampler(),
        _ => None,
    };
    let mut dirs: Vec<(Vec3, f64)> = match sampler {
        Some(es) => (0..directions)
            .map(|_| {
                let e = es.sample(rng.random(), rng.random());
                (e.dir, e.pdf)
            })
            .collect(),
        None => sample_sphere_stratified(rng, directions)
            .into_iter()
            .map(|d| (d.dir, d.pdf))
            .collect(),
    };
    dirs.shuffle(rng);

    let frames: Vec<(Vec3, Vec3)> = points
        .iter()
        .map(|pt| {
            let n_c = model.sdf.normal(pt.x_c).unwrap_or(Vec3::Z);
            let n_o = pt.normal_map.mul_vec(n_c).normalize();
            let d = model.sdf.eval(pt.x_c);
            let origin = if d < SURFACE_LIFT {
                pt.x_o + n_o * (SURFACE_LIFT - d)
            } else {
                pt.x_o
            };
            (n_o, origin)
        })
        .collect();
    let np = points.len();
    for (k, (wi, pdf)) in dirs.into_iter().enumerate() {
        let i = k % np;
        points[i].assigned += 1;
        let (n_o, origin) = frames[i];
        if !(pdf > 0.0) || (cull && n_o.dot(wi) <= 0.0) {
            continue;
        }
        let trace = trace_secondary(p, origin, wi, cfg, rng);
        points[i].dirs.push(ScatterDir { wi, pdf, trace });
    }
    ScatterPlan {
        attempts: m_t,
        points,
    }
}

/// Weight of each scatter point in the PBR sum.
pub fn scatter_weights<S: Real>(model: &Model, march: &March, q: &Quadrature<S>, plan: &ScatterPlan, mode: ScatterWeights) -> Vec<S> {
    match mode {
        ScatterWeights::Resampled => {
            let w = q.opacity() / plan.attempts as f64;
            vec![w; plan.points.len()]
        }
        ScatterWeights::Quadrature => {
            if plan.points.is_empty() {
                return Vec::new();
            }
            let beta = model.density.beta_s::<S>();
            let sigma: Vec<S> = plan
                .points
                .iter()
                .map(|pt| density(model.sdf.eval_s::<S>(pt.x_c), beta))
                .collect();
            let ts: Vec<f64> = plan.points.iter().map(|pt| pt.t).collect();
            let last = &plan.points[plan.points.len() - 1];
            let end = march.samples.offsets[last.interval] + march.samples.deltas[last.interval];
            let deltas: Vec<f64> = deltas_to(&ts, end).into_iter().map(|d| d.max(1e-12)).collect();
            quadrature_weights(&sigma, &deltas)
                .expect("scatter intervals are positive")
                .weights
        }
    }
}

/// The volumetric scattering estimate of one primary ray.
pub fn pbr_color<S: Real>(
    model: &Model,
    march: &March,
    q: &Quadrature<S>,
    plan: &ScatterPlan,
    cfg: &RenderConfig,
    relight: bool,
) -> Rgb<S> {
    let weights = scatter_weights(model, march, q, plan, cfg.scatter_weights);
    let wo = -march.ray.dir;
    let mut out = [S::zero(); 3];
    for (pt, w) in plan.points.iter().zip(weights) {
        if pt.assigned == 0 {
            continue;
        }
        let mat = model.material.eval_s::<S>(pt.x_c);
        let (_, g) = model.sdf.eval_grad_s::<S>(pt.x_c);
        let n: V3<S> = pt.normal_map.apply(g).normalize();
        let mut acc = [S::zero(); 3];
        for d in &pt.dirs {
            let lobes = brdf_lobes(wo, d.wi, n, mat.albedo, mat.roughness, mat.metallic);
            let li = incoming_radiance::<S>(&model.light, d.wi, &d.trace, relight);
            for c in 0..3 {
                let f = match cfg.lobes {
                    Lobes::Full => lobes.diffuse[c] + lobes.specular[c],
                    Lobes::Diffuse => lobes.diffuse[c],
                };
                acc[c] = acc[c] + f * li[c] * (1.0 / d.pdf);
            }
        }
        let scale = w / pt.assigned as f64;
        for c in 0..3 {
            out[c] = out[c] + acc[c] * scale;
        }
    }
    out
}

/// `2 · (1/M) Σ V` over all traced directions.
pub fn average_visibility(plan: &ScatterPlan) -> f64 {
    let (mut seen, mut total) = (0usize, 0usize);
    for d in plan.traces() {
        total += 1;
        seen += d.trace.visible() as usize;
    }
    if total == 0 {
        0.0
    } else {
        2.0 * seen as f64 / total as f64
    }
}

/// Weighted observation-space normal, normalized; zero where transparent.
pub fn normal_estimate(p: &Posed, march: &March) -> Vec3 {
    let mut acc = Vec3::ZERO;
    for (w, x) in march.samples.weights.iter().zip(&march.canonical) {
        let Some(x) = x else { continue };
        if *w < 1e-6 {
            continue;
        }
        if let Ok(n_c) = p.model.sdf.normal(*x) {
            acc = acc + normal_map(p.model, p.pose, *x).mul_vec(n_c).normalize() * *w;
        }
    }
    let len = acc.norm();
    if len > 1e-12 {
        acc * (1.0 / len)
    } else {
        Vec3::ZERO
    }
}

/// Linear output of one pixel, in the mode's channels, and its alpha.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelValue {
    pub value: [f64; 3],
    pub alpha: f64,
}

/// Random streams of one primary ray.
pub struct RayStreams {
    pub primary: ChaCha8Rng,
    pub scatter: ChaCha8Rng,
}

impl RayStreams {
    pub fn new(seed: u64, pixel: u64, sample: u32) -> Self {
        RayStreams {
            primary: RngStream::new(seed, StreamKey::new(pixel, sample, 0)).rng(),
            scatter: RngStream::new(seed, StreamKey::new(pixel, sample, 1)).rng(),
        }
    }
}

pub fn render_ray(p: &Posed, ray: &Ray, cfg: &RenderConfig, mode: Mode, streams: &mut RayStreams) -> PixelValue {
    let Some(march) = march_primary(p, ray, cfg, &mut streams.primary) else {
        return PixelValue::default();
    };
    let model = p.model;
    let s = &march.samples;
    let weighted = |f: &dyn Fn(Vec3) -> [f64; 3]| {
        let mut c = [0.0; 3];
        for (w, x) in s.weights.iter().zip(&march.canonical) {
            if let Some(x) = x {
                let v = f(*x);
                for k in 0..3 {
                    c[k] += w * v[k];
                }
            }
        }
        c
    };
    let value = match mode {
        Mode::Rf => {
            let q = march_quadrature::<f64>(model, &march);
            rf_color(model, &march, &q)
        }
        Mode::Albedo => weighted(&|x| model.material.eval(x).albedo),
        Mode::Roughness => weighted(&|x| [model.material.eval(x).roughness; 3]),
        Mode::Normal => normal_estimate(p, &march).to_array(),
        Mode::Pbr | Mode::Relight => {
            let relight = mode == Mode::Relight;
            let (m, sampling) = if relight {
                (cfg.relight_directions, DirectionSampling::Light)
            } else {
                (cfg.directions, DirectionSampling::Sphere)
            };
            let plan = plan_scatter(p, &march, cfg, m, sampling, true, &mut streams.scatter);
            let q = march_quadrature::<f64>(model, &march);
            pbr_color(model, &march, &q, &plan, cfg, relight)
        }
        Mode::Avmap => {
            let plan = plan_scatter(p, &march, cfg, cfg.directions, DirectionSampling::Sphere, false, &mut streams.scatter);
            [average_visibility(&plan), 0.0, 0.0]
        }
    };
    PixelValue {
        value,
        alpha: s.opacity(),
    }
}

/// A rendered image with its alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Image,
    pub alpha: Image,
}

/// Renders a full image; rows run in parallel, each pixel on its own streams.
pub fn render_image(p: &Posed, camera: &Camera, cfg: &RenderConfig, mode: Mode) -> Result<Rendered> {
    cfg.validate()?;
    camera.validate()?;
    let (w, h, ch) = (camera.width, camera.height, mode.channels());
    let rows = crate::parallel::map_indexed(h, |y| {
        let mut vals = Vec::with_capacity(w * (ch + 1));
        for x in 0..w {
            let pixel = (y * w + x) as u64;
            let mut streams = RayStreams::new(cfg.seed, pixel, 0);
            let v = render_ray(p, &camera.ray(x, y), cfg, mode, &mut streams);
            vals.extend(v.value[..ch].iter().map(|&c| c as f32));
            vals.push(v.alpha as f32);
        }
        vals
    });
    let mut image = Image::new(w, h, ch);
    let mut alpha = Image::new(w, h, 1);
    for (y, row) in rows.into_iter().enumerate() {
        for x in 0..w {
            let i = y * w + x;
            let src = &row[x * (ch + 1)..(x + 1) * (ch + 1)];
            image.pixel_mut(i).copy_from_slice(&src[..ch]);
            alpha.data[i] = src[ch];
        }
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in {mode} render")));
    }
    Ok(Rendered { image, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::RadianceField;
    use crate::toy::sphere_model;
    use rand::SeedableRng;

    fn sphere(beta: f64, albedo: f64) -> Model {
        sphere_model(0.5, [albedo; 3], beta, Light::Constant([1.0; 3]))
    }

    fn center_ray() -> Ray {
        Ray::new(V3::new(0.0, -3.0, 0.0), Vec3::Y)
    }

    fn march(model: &Model, ray: &Ray) -> Option<March> {
        let pose = Pose::identity(1);
        let p = Posed::new(model, &pose, None, 0.1);
        march_primary(&p, ray, &RenderConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn empty_scene_is_transparent() {
        let mut m = sphere(0.01, 0.5);
        m.sdf = crate::fields::SdfField::Empty;
        assert!(march(&m, &center_ray()).is_none());
        let pose = Pose::identity(1);
        let p = Posed::new(&m, &pose, None, 0.1);
        let cam = Camera::look_at(4, 3, 0.8, V3::new(0.0, -3.0, 0.0), Vec3::ZERO, Vec3::Z);
        let r = render_image(&p, &cam, &RenderConfig::default(), Mode::Rf).unwrap();
        assert_eq!((r.image.width, r.image.height), (4, 3));
        assert!(r.alpha.data.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn opaque_sphere_march() {
        let m = sphere(0.001, 0.5);
        let mk = march(&m, &center_ray()).unwrap();
        let s = &mk.samples;
        assert_eq!(s.offsets.len(), 160);
        assert!(s.opacity() > 0.999);
        let total: f64 = s.weights.iter().sum::<f64>() + s.residual_transmittance;
        assert!((total - 1.0).abs() < 1e-6);
        assert!(s.offsets.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rf_of_constant_emission() {
        let mut m = sphere(0.001, 0.5);
        m.radiance = RadianceField::constant([0.3, 0.6, 0.9]);
        let mk = march(&m, &center_ray()).unwrap();
        let q = march_quadrature::<f64>(&m, &mk);
        let c = rf_color(&m, &mk, &q);
        for (got, want) in c.iter().zip([0.3, 0.6, 0.9]) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        m.radiance = RadianceField::black();
        assert_eq!(rf_color(&m, &mk, &q), [0.0; 3]);
    }

    #[test]
    fn rf_is_linear_in_emission() {
        let mut m = sphere(0.02, 0.5);
        m.radiance = RadianceField::constant([0.2, 0.4, 0.1]);
        let mk = march(&m, &center_ray()).unwrap();
        let q = march_quadrature::<f64>(&m, &mk);
        let c1 = rf_color(&m, &mk, &q);
        let e1 = m.radiance.eval(Vec3::ZERO);
        m.radiance = RadianceField::constant(e1.map(|v| 2.0 * v));
        let c2 = rf_color(&m, &mk, &q);
        for k in 0..3 {
            assert!((c2[k] - 2.0 * c1[k]).abs() <= 1e-15 * c2[k].abs().max(1.0));
        }
    }

    #[test]
    fn secondary_ray_in_free_space() {
        let m = sphere(0.01, 0.5);
        let pose = Pose::identity(1);
        let p = Posed::new(&m, &pose, None, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = trace_secondary(&p, V3::new(5.0, 5.0, 5.0), Vec3::X, &RenderConfig::default(), &mut rng);
        assert!(r.t_esc > 0.999);
        assert_eq!(r.c_rf, [0.0; 3]);
        let r = trace_secondary(&p, V3::new(0.0, -1.0, 0.0), Vec3::Y, &RenderConfig::default(), &mut rng);
        assert!(r.t_esc < 0.05, "{}", r.t_esc);
        assert!(!r.visible());
    }

    #[test]
    fn crossing_skips_samples_before_sign_change() {
        let sdf: Vec<f64> = (0..64).map(|i| if i <= 5 { 0.3 - 0.01 * i as f64 } else { -0.1 }).collect();
        let sdf: Vec<f64> = sdf.iter().enumerate().map(|(i, &d)| if i == 5 { 0.01 } else { d }).collect();
        let sigma: Vec<f64> = sdf.iter().map(|&d| density(d, 0.05)).collect();
        let cw = zero_crossing_reference(&sdf, &sigma, 1.5 / 63.0);
        assert_eq!(cw.start, 5);
        assert!(cw.weights[..5].iter().all(|&w| w == 0.0));
        assert!(cw.weights[5] > 0.0);
        assert_eq!(zero_crossing(&sdf, &sigma, 1.5 / 63.0), cw);
    }

    #[test]
    fn crossing_without_sign_change_uses_last_sample() {
        let sdf = vec![0.5; 8];
        let sigma = vec![2.0; 8];
        let cw = zero_crossing(&sdf, &sigma, 0.1);
        assert_eq!(cw.start, 7);
        assert!(cw.weights[..7].iter().all(|&w| w == 0.0));
        assert!((cw.weights[7] + cw.transmittance - 1.0).abs() < 1e-15);
    }

    fn plan_with(visible: &[bool]) -> ScatterPlan {
        let trace = |v: bool| SecondaryTraceResult {
            t_esc: if v { 1.0 } else { 0.0 },
            c_rf: [0.0; 3],
        };
        ScatterPlan {
            attempts: 1,
            points: vec![ScatterPoint {
                t: 0.0,
                interval: 0,
                x_o: Vec3::ZERO,
                x_c: Vec3::ZERO,
                normal_map: Mat3::IDENTITY,
                dirs: visible
                    .iter()
                    .map(|&v| ScatterDir {
                        wi: Vec3::Z,
                        pdf: 1.0,
                        trace: trace(v),
                    })
                    .collect(),
                assigned: visible.len(),
            }],
        }
    }

    #[test]
    fn average_visibility_values() {
        assert_eq!(average_visibility(&plan_with(&[true; 8])), 2.0);
        assert_eq!(average_visibility(&plan_with(&[false; 8])), 0.0);
        assert_eq!(average_visibility(&plan_with(&[true, false, true, false])), 1.0);
    }

    #[test]
    fn black_light_gives_black_pbr() {
        let mut m = sphere(0.005, 0.8);
        m.light = Light::Constant([0.0; 3]);
        let pose = Pose::identity(1);
        let p = Posed::new(&m, &pose, None, 0.1);
        let cfg = RenderConfig {
            directions: 64,
            ..RenderConfig::default()
        };
        let v = render_ray(&p, &center_ray(), &cfg, Mode::Pbr, &mut RayStreams::new(0, 0, 0));
        assert_eq!(v.value, [0.0; 3]);
        assert!(v.alpha > 0.99);
    }

    #[test]
    fn pbr_is_linear_in_light() {
        let mut m = sphere(0.005, 0.6);
        let pose = Pose::identity(1);
        let cfg = RenderConfig {
            directions: 64,
            ..RenderConfig::default()
        };
        let ray = Ray::new(V3::new(0.1, -3.0, 0.2), Vec3::Y);
        let mut out = Vec::new();
        for l in [1.0, 2.0] {
            m.light = Light::Constant([l, 0.5 * l, 0.25 * l]);
            let p = Posed::new(&m, &pose, None, 0.1);
            out.push(render_ray(&p, &ray, &cfg, Mode::Pbr, &mut RayStreams::new(9, 4, 0)).value);
        }
        assert!(out[0][0] > 0.0);
        for k in 0..3 {
            assert_eq!(out[1][k], 2.0 * out[0][k]);
        }
    }
}

//! Random streams, transmittance quadrature, distance sampling and
//! directional sampling.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Real;
use crate::linalg::{V3, Vec3};
use crate::{Error, Result};

pub const INV_4PI: f64 = 1.0 / (4.0 * PI);

/// Identifies one independent random sequence of a render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub pixel: u64,
    pub sample: u32,
    pub depth: u32,
}

impl StreamKey {
    pub fn new(pixel: u64, sample: u32, depth: u32) -> Self {
        StreamKey {
            pixel,
            sample,
            depth,
        }
    }

    fn mix(self) -> u64 {
        let mut h = splitmix(self.pixel);
        h = splitmix(h ^ u64::from(self.sample));
        splitmix(h ^ (u64::from(self.depth) << 32))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed plus stream key; value-like and copyable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub key: StreamKey,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        RngStream { seed, key }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.key.mix());
        rng
    }
}

/// Quadrature weights of one ray.
#[derive(Clone, Debug)]
pub struct Quadrature<S = f64> {
    /// `w_i = T_i (1 - exp(-σ_i δ_i))`
    pub weights: Vec<S>,
    /// Transmittance `T_i` up to the start of each interval.
    pub transmittance: Vec<S>,
    pub residual: S,
}

impl<S: Real> Quadrature<S> {
    pub fn opacity(&self) -> S {
        S::one() - self.residual
    }
}

/// Emission-absorption quadrature over piecewise-constant densities.
pub fn quadrature_weights<S: Real>(densities: &[S], deltas: &[f64]) -> Result<Quadrature<S>> {
    if densities.len() != deltas.len() {
        return Err(Error::invalid(format!(
            "{} densities but {} deltas",
            densities.len(),
            deltas.len()
        )));
    }
    let mut weights = Vec::with_capacity(densities.len());
    let mut transmittance = Vec::with_capacity(densities.len());
    let mut t = S::one();
    for (i, (&s, &d)) in densities.iter().zip(deltas).enumerate() {
        if !(s.val() >= 0.0) {
            return Err(Error::invalid(format!("density[{i}] = {} is negative", s.val())));
        }
        if !(d > 0.0) {
            return Err(Error::invalid(format!("delta[{i}] = {d} is not positive")));
        }
        let absorb = -(s * -d).exp_m1();
        transmittance.push(t);
        weights.push(t * absorb);
        t = t * (s * -d).exp();
    }
    Ok(Quadrature {
        weights,
        transmittance,
        residual: t,
    })
}

/// Sample offsets with their intervals, densities and quadrature weights.
#[derive(Clone, Debug)]
pub struct RaySampleSet {
    pub offsets: Vec<f64>,
    pub deltas: Vec<f64>,
    pub densities: Vec<f64>,
    pub weights: Vec<f64>,
    pub residual_transmittance: f64,
}

impl RaySampleSet {
    /// Samples at the left end of each interval; the last interval ends at `far`.
    pub fn new(offsets: Vec<f64>, far: f64, densities: Vec<f64>) -> Result<Self> {
        let deltas = deltas_to(&offsets, far);
        let q = quadrature_weights(&densities, &deltas)?;
        Ok(RaySampleSet {
            offsets,
            deltas,
            densities,
            weights: q.weights,
            residual_transmittance: q.residual,
        })
    }

    pub fn opacity(&self) -> f64 {
        1.0 - self.residual_transmittance
    }
}

/// `δ_i = t_{i+1} - t_i` with `t_{N+1} = far`.
pub fn deltas_to(offsets: &[f64], far: f64) -> Vec<f64> {
    offsets
        .iter()
        .enumerate()
        .map(|(i, &t)| offsets.get(i + 1).copied().unwrap_or(far) - t)
        .collect()
}

/// Inverse CDF of `P(t) = 1 - exp(-σ (t - t_n))`.
pub fn sample_homogeneous_distance(u: f64, sigma_t: f64, t_n: f64) -> Result<f64> {
    if !(sigma_t > 0.0) {
        return Err(Error::invalid(format!("sigma_t = {sigma_t} must be positive")));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::invalid(format!("u = {u} outside [0, 1)")));
    }
    Ok(t_n - (-u).ln_1p() / sigma_t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistanceSample {
    Interaction { t: f64, interval: usize },
    /// `u` exceeded the total interaction probability.
    Escaped,
}

/// Distance sampling through piecewise-constant density; `bounds` has one
/// more entry than `sigma`.
pub fn sample_heterogeneous_distance(u: f64, sigma: &[f64], bounds: &[f64]) -> Result<DistanceSample> {
    if sigma.is_empty() {
        return Err(Error::invalid("empty interval list"));
    }
    if bounds.len() != sigma.len() + 1 {
        return Err(Error::invalid(format!(
            "{} bounds for {} intervals",
            bounds.len(),
            sigma.len()
        )));
    }
    if bounds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("interval bounds must increase"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("negative density {s}")));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::invalid(format!("u = {u} outside [0, 1)")));
    }
    let target = -(-u).ln_1p();
    let mut tau = 0.0;
    for (i, &s) in sigma.iter().enumerate() {
        let len = bounds[i + 1] - bounds[i];
        let step = s * len;
        if s > 0.0 && tau + step > target {
            let t = (bounds[i] + (target - tau) / s).min(bounds[i + 1]);
            return Ok(DistanceSample::Interaction { t, interval: i });
        }
        tau += step;
    }
    Ok(DistanceSample::Escaped)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionSample {
    pub dir: Vec3,
    /// Solid-angle density.
    pub pdf: f64,
}

/// `rows × cols` with `rows` the largest divisor of `m` not above `√m`.
pub fn stratification_grid(m: usize) -> (usize, usize) {
    let mut rows = (m as f64).sqrt().floor() as usize;
    while rows > 1 && m % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, m / rows)
}

/// Direction at `(u, v)` within cell `(row, col)` of a cosθ × φ grid.
pub fn sphere_cell_direction(row: usize, col: usize, rows: usize, cols: usize, u: f64, v: f64) -> Vec3 {
    let z = 1.0 - 2.0 * (row as f64 + u) / rows as f64;
    let phi = -PI + 2.0 * PI * (col as f64 + v) / cols as f64;
    let r = (1.0 - z * z).max(0.0).sqrt();
    V3::new(r * phi.cos(), r * phi.sin(), z)
}

/// One jittered uniform direction per stratum.
pub fn sample_sphere_stratified<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<DirectionSample> {
    let (rows, cols) = stratification_grid(m);
    let mut out = Vec::with_capacity(m);
    for row in 0..rows {
        for col in 0..cols {
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            out.push(DirectionSample {
                dir: sphere_cell_direction(row, col, rows, cols, u, v),
                pdf: INV_4PI,
            });
        }
    }
    out
}

/// Uniform direction on the sphere from two uniforms.
pub fn uniform_sphere(u: f64, v: f64) -> Vec3 {
    sphere_cell_direction(0, 0, 1, 1, u, v)
}

/// Equirectangular layout: row 0 at θ = 0 (+z), φ ∈ [−π, π) across columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Equirect {
    pub width: usize,
    pub height: usize,
}

impl Equirect {
    pub fn new(width: usize, height: usize) -> Self {
        Equirect { width, height }
    }

    pub fn d_theta(&self) -> f64 {
        PI / self.height as f64
    }

    pub fn d_phi(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    pub fn direction(theta: f64, phi: f64) -> Vec3 {
        let (st, ct) = theta.sin_cos();
        V3::new(st * phi.cos(), st * phi.sin(), ct)
    }

    /// `(θ, φ)` of a unit direction, φ in `[−π, π)`.
    pub fn angles(d: Vec3) -> (f64, f64) {
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let mut phi = d.y.atan2(d.x);
        if phi >= PI {
            phi -= 2.0 * PI;
        }
        (theta, phi)
    }

    /// Continuous texel coordinates: texel `(r, c)` has its center at
    /// `(r + ½, c + ½)`.
    pub fn texel_coords(&self, d: Vec3) -> (f64, f64) {
        let (theta, phi) = Self::angles(d);
        (theta / self.d_theta(), (phi + PI) / self.d_phi())
    }

    pub fn texel_of(&self, d: Vec3) -> (usize, usize) {
        let (r, c) = self.texel_coords(d);
        (
            (r.floor() as usize).min(self.height - 1),
            (c.floor() as usize).min(self.width - 1),
        )
    }

    /// Solid angle of row `r` texels.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let t0 = row as f64 * self.d_theta();
        let t1 = t0 + self.d_theta();
        self.d_phi() * (t0.cos() - t1.cos())
    }

    pub fn texel_center(&self, row: usize, col: usize) -> Vec3 {
        Self::direction(
            (row as f64 + 0.5) * self.d_theta(),
            -PI + (col as f64 + 0.5) * self.d_phi(),
        )
    }
}

/// Piecewise-constant importance sampler over an equirectangular map.
///
/// Texel mass is proportional to `weight · solid angle`, which is
/// `weight · sinθ_center` up to a per-map constant. Within a texel, samples
/// are uniform in solid angle.
#[derive(Clone, Debug)]
pub struct EnvSampler {
    layout: Equirect,
    /// Inclusive-end marginal CDF over rows.
    row_cdf: Vec<f64>,
    /// Per-row conditional CDF over columns.
    col_cdf: Vec<f64>,
    /// Probability of each texel.
    mass: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSample {
    pub dir: Vec3,
    pub pdf: f64,
    pub row: usize,
    pub col: usize,
}

impl EnvSampler {
    /// `weights` is row-major, `height × width`, nonnegative.
    pub fn build(width: usize, height: usize, weights: &[f64]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("environment map must be at least 1×1"));
        }
        if weights.len() != width * height {
            return Err(Error::invalid(format!(
                "{} weights for a {width}×{height} map",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("invalid environment weight {w}")));
        }
        let layout = Equirect::new(width, height);
        let mut mass: Vec<f64> = weights
            .chunks(width)
            .enumerate()
            .flat_map(|(r, row)| {
                let omega = layout.texel_solid_angle(r);
                row.iter().map(move |w| w * omega)
            })
            .collect();
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("environment map has no radiance to sample"));
        }
        mass.iter_mut().for_each(|m| *m /= total);

        let mut row_cdf = Vec::with_capacity(height);
        let mut col_cdf = Vec::with_capacity(width * height);
        let mut acc = 0.0;
        for row in mass.chunks(width) {
            let row_sum: f64 = row.iter().sum();
            acc += row_sum;
            row_cdf.push(acc);
            let mut c = 0.0;
            for &m in row {
                c += m;
                col_cdf.push(if row_sum > 0.0 { c / row_sum } else { 0.0 });
            }
        }
        Ok(EnvSampler {
            layout,
            row_cdf,
            col_cdf,
            mass,
        })
    }

    pub fn layout(&self) -> Equirect {
        self.layout
    }

    pub fn texel_probability(&self, row: usize, col: usize) -> f64 {
        self.mass[row * self.layout.width + col]
    }

    /// Draws a direction from two uniforms in `[0, 1)`.
    pub fn sample(&self, u: f64, v: f64) -> EnvSample {
        let w = self.layout.width;
        let row = pick(&self.row_cdf, u * self.row_cdf[self.row_cdf.len() - 1]);
        let row_mass: f64 = self.mass[row * w..(row + 1) * w].iter().sum();
        let lo = if row == 0 { 0.0 } else { self.row_cdf[row - 1] };
        let u_row = ((u * self.row_cdf[self.row_cdf.len() - 1] - lo) / row_mass).clamp(0.0, 1.0);
        let ccdf = &self.col_cdf[row * w..(row + 1) * w];
        let col = pick(ccdf, v);
        let clo = if col == 0 { 0.0 } else { ccdf[col - 1] };
        let span = ccdf[col] - clo;
        let v_col = if span > 0.0 {
            ((v - clo) / span).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let t0 = row as f64 * self.layout.d_theta();
        let t1 = t0 + self.layout.d_theta();
        let (c0, c1) = (t0.cos(), t1.cos());
        let z = (c0 + u_row * (c1 - c0)).clamp(-1.0, 1.0);
        let phi = -PI + (col as f64 + v_col) * self.layout.d_phi();
        let r = (1.0 - z * z).max(0.0).sqrt();
        let dir = V3::new(r * phi.cos(), r * phi.sin(), z);
        EnvSample {
            dir,
            pdf: self.mass[row * w + col] / self.layout.texel_solid_angle(row),
            row,
            col,
        }
    }

    /// Solid-angle density of drawing `d`.
    pub fn pdf(&self, d: Vec3) -> f64 {
        let (row, col) = self.layout.texel_of(d);
        self.mass[row * self.layout.width + col] / self.layout.texel_solid_angle(row)
    }
}

/// First index whose CDF value exceeds `x`; the last positive-mass entry
/// when rounding leaves `x` at the total.
fn pick(cdf: &[f64], x: f64) -> usize {
    let i = cdf.partition_point(|&c| c <= x);
    if i < cdf.len() {
        return i;
    }
    let mut i = cdf.len() - 1;
    while i > 0 && cdf[i] == cdf[i - 1] {
        i -= 1;
    }
    i
}

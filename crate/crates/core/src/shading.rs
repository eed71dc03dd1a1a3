//! Microfacet BRDF, spherical-Gaussian and map-based environment light.

use std::f64::consts::PI;

use crate::autodiff::{ParamKey, Real};
use crate::linalg::{V3, Vec3};
use crate::sampling::{EnvSampler, Equirect};
use crate::{Error, Result};

pub const ROUGHNESS_MIN: f64 = 0.01;
const GUARD: f64 = 1e-6;

pub type Rgb<S = f64> = [S; 3];

pub fn luminance(c: Rgb) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Diffuse and specular parts of the reflectance, each already multiplied
/// by `max(n·ω_i, 0)`.
#[derive(Clone, Copy, Debug)]
pub struct BrdfLobes<S = f64> {
    pub diffuse: Rgb<S>,
    pub specular: Rgb<S>,
}

/// Simplified Disney model: a Lambertian lobe plus GGX with a
/// spherical-Gaussian Fresnel and a Schlick-GGX shadowing term. Directions
/// point away from the surface.
pub fn brdf_lobes<S: Real>(wo: Vec3, wi: Vec3, n: V3<S>, albedo: Rgb<S>, roughness: S, metallic: S) -> BrdfLobes<S> {
    let zero = [S::zero(); 3];
    let cos_o = n.dot_c(wo);
    let cos_i = n.dot_c(wi);
    if cos_o.val() <= 0.0 || cos_i.val() <= 0.0 {
        return BrdfLobes {
            diffuse: zero,
            specular: zero,
        };
    }
    let h = (wo + wi).normalize();
    let noh = n.dot_c(h);
    let voh = wo.dot(h).max(0.0);
    let r = roughness.clamp_c(ROUGHNESS_MIN, 1.0);
    let r2 = r * r;
    let base = noh * noh * (r2 - 1.0) + 1.0;
    let d = r2 / (base * base * PI).max_c(GUARD);
    let k = (r + 1.0) * (r + 1.0) / 8.0;
    let g1 = |c: S| c / (c * (S::one() - k) + k).max_c(GUARD);
    let g = g1(cos_o) * g1(cos_i);
    let fresnel_w = ((-5.55473 * voh - 6.98316) * voh).exp2();
    let spec_common = d * g / (cos_o * cos_i * 4.0).max_c(GUARD) * cos_i;
    let diffuse_scale = (S::one() - metallic) * (1.0 / PI) * cos_i;
    let f0_dielectric = (S::one() - metallic) * 0.04;
    let mut out = BrdfLobes {
        diffuse: zero,
        specular: zero,
    };
    for c in 0..3 {
        let f0 = f0_dielectric + albedo[c] * metallic;
        let f = f0 + (S::one() - f0) * fresnel_w;
        out.diffuse[c] = albedo[c] * diffuse_scale;
        out.specular[c] = f * spec_common;
    }
    out
}

/// Reflectance times `max(n·ω_i, 0)`.
pub fn brdf_eval<S: Real>(wo: Vec3, wi: Vec3, n: V3<S>, albedo: Rgb<S>, roughness: S, metallic: S) -> Rgb<S> {
    let l = brdf_lobes(wo, wi, n, albedo, roughness, metallic);
    [0, 1, 2].map(|c| l.diffuse[c] + l.specular[c])
}

/// `F₀` of the model for one channel.
pub fn fresnel_f0(albedo: f64, metallic: f64) -> f64 {
    0.04 * (1.0 - metallic) + albedo * metallic
}

/// `μ · exp(λ (d·p − 1))` lobes.
#[derive(Clone, Debug, PartialEq)]
pub struct SgMixture {
    pub axes: Vec<Vec3>,
    pub sharpness: Vec<f64>,
    pub amplitude: Vec<Rgb>,
}

/// Sharpness values tried by [`SgMixture::fit`].
pub const FIT_SHARPNESS: [f64; 8] = [0.0, 2.0, 4.0, 8.0, 12.0, 16.0, 24.0, 32.0];

impl SgMixture {
    pub const LOBES: usize = 64;

    /// Fibonacci-sphere axes with uniform sharpness and amplitude.
    pub fn uniform(lobes: usize, sharpness: f64, amplitude: Rgb) -> Self {
        SgMixture {
            axes: fibonacci_sphere(lobes),
            sharpness: vec![sharpness; lobes],
            amplitude: vec![amplitude; lobes],
        }
    }

    pub fn len(&self) -> usize {
        self.axes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.axes.len();
        if self.sharpness.len() != n || self.amplitude.len() != n {
            return Err(Error::schema("light.sg", "lobe arrays differ in length"));
        }
        if self.sharpness.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::schema("light.sg.sharpness", "must be nonnegative"));
        }
        if self.amplitude.iter().flatten().any(|m| !(*m >= 0.0)) {
            return Err(Error::schema("light.sg.amplitude", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn eval(&self, d: Vec3) -> Rgb {
        let mut out = [0.0; 3];
        for ((p, &l), mu) in self.axes.iter().zip(&self.sharpness).zip(&self.amplitude) {
            let e = (l * (d.dot(*p) - 1.0)).exp();
            for c in 0..3 {
                out[c] += mu[c] * e;
            }
        }
        out
    }

    /// Evaluation tracked under the `Sg*` parameter keys.
    pub fn eval_s<S: Real>(&self, d: Vec3) -> Rgb<S> {
        let mut out = [S::zero(); 3];
        for (k, ((p, &l), mu)) in self.axes.iter().zip(&self.sharpness).zip(&self.amplitude).enumerate() {
            let axis = V3::new(
                S::param(ParamKey::SgAxis, 3 * k, p.x),
                S::param(ParamKey::SgAxis, 3 * k + 1, p.y),
                S::param(ParamKey::SgAxis, 3 * k + 2, p.z),
            );
            let lam = S::param(ParamKey::SgSharpness, k, l);
            let e = (lam * (axis.dot_c(d) - 1.0)).exp();
            for c in 0..3 {
                out[c] = out[c] + S::param(ParamKey::SgAmplitude, 3 * k + c, mu[c]) * e;
            }
        }
        out
    }

    /// Nonnegative least-squares fit of amplitudes on fixed Fibonacci axes,
    /// choosing the shared sharpness from `candidates` with the lowest
    /// solid-angle-weighted residual.
    pub fn fit(map: &EnvMap, lobes: usize, candidates: &[f64]) -> Result<Self> {
        if lobes == 0 || candidates.is_empty() {
            return Err(Error::invalid("fit needs at least one lobe and one sharpness"));
        }
        let layout = map.layout();
        let axes = fibonacci_sphere(lobes);
        let mut dirs = Vec::with_capacity(layout.width * layout.height);
        let mut wts = Vec::with_capacity(dirs.capacity());
        let mut targets = Vec::with_capacity(dirs.capacity());
        for r in 0..layout.height {
            let omega = layout.texel_solid_angle(r);
            for c in 0..layout.width {
                dirs.push(layout.texel_center(r, c));
                wts.push(omega);
                targets.push(map.texel(r, c));
            }
        }
        let mut best: Option<(f64, SgMixture)> = None;
        for &lam in candidates {
            let basis: Vec<Vec<f64>> = dirs
                .iter()
                .map(|d| axes.iter().map(|p| (lam * (d.dot(*p) - 1.0)).exp()).collect())
                .collect();
            let mut ata = vec![vec![0.0; lobes]; lobes];
            for (row, &w) in basis.iter().zip(&wts) {
                for i in 0..lobes {
                    for j in 0..lobes {
                        ata[i][j] += w * row[i] * row[j];
                    }
                }
            }
            let mut amplitude = vec![[0.0; 3]; lobes];
            let mut err = 0.0;
            for c in 0..3 {
                let mut atb = vec![0.0; lobes];
                for ((row, &w), t) in basis.iter().zip(&wts).zip(&targets) {
                    for i in 0..lobes {
                        atb[i] += w * row[i] * t[c];
                    }
                }
                let mu = nnls(&ata, &atb);
                for (k, m) in mu.iter().enumerate() {
                    amplitude[k][c] = *m;
                }
                for ((row, &w), t) in basis.iter().zip(&wts).zip(&targets) {
                    let pred: f64 = row.iter().zip(&mu).map(|(a, b)| a * b).sum();
                    err += w * (pred - t[c]).powi(2);
                }
            }
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((
                    err,
                    SgMixture {
                        axes: axes.clone(),
                        sharpness: vec![lam; lobes],
                        amplitude,
                    },
                ));
            }
        }
        Ok(best.map(|(_, m)| m).expect("at least one candidate"))
    }
}

/// Coordinate-descent solution of `min ½xᵀAx − bᵀx` subject to `x ≥ 0`.
fn nnls(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for _ in 0..2000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            if a[i][i] <= 0.0 {
                continue;
            }
            let r: f64 = b[i] - (0..n).map(|j| a[i][j] * x[j]).sum::<f64>();
            let next = (x[i] + r / a[i][i]).max(0.0);
            change = change.max((next - x[i]).abs());
            x[i] = next;
        }
        if change < 1e-12 {
            break;
        }
    }
    x
}

/// Evenly spread unit vectors.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            V3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Equirectangular radiance map with an importance-sampling table.
#[derive(Clone, Debug)]
pub struct EnvMap {
    layout: Equirect,
    data: Vec<Rgb>,
    sampler: Option<EnvSampler>,
    poles: [Rgb; 2],
}

impl PartialEq for EnvMap {
    fn eq(&self, o: &Self) -> bool {
        self.layout == o.layout && self.data == o.data
    }
}

impl EnvMap {
    /// `data` is row-major with row 0 at the +z pole.
    pub fn new(width: usize, height: usize, data: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(format!(
                "environment map {width}×{height} with {} texels",
                data.len()
            )));
        }
        if data.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("environment radiance must be finite and nonnegative"));
        }
        let lum: Vec<f64> = data.iter().map(|c| luminance(*c)).collect();
        let sampler = if lum.iter().any(|l| *l > 0.0) {
            Some(EnvSampler::build(width, height, &lum)?)
        } else {
            None
        };
        let row_avg = |r: usize| {
            let mut s = [0.0; 3];
            for t in &data[r * width..(r + 1) * width] {
                for c in 0..3 {
                    s[c] += t[c] / width as f64;
                }
            }
            s
        };
        let poles = [row_avg(0), row_avg(height - 1)];
        Ok(EnvMap {
            layout: Equirect::new(width, height),
            data,
            sampler,
            poles,
        })
    }

    pub fn constant(width: usize, height: usize, c: Rgb) -> Result<Self> {
        Self::new(width, height, vec![c; width * height])
    }

    pub fn layout(&self) -> Equirect {
        self.layout
    }

    pub fn data(&self) -> &[Rgb] {
        &self.data
    }

    pub fn texel(&self, row: usize, col: usize) -> Rgb {
        self.data[row * self.layout.width + col]
    }

    /// `None` for an all-black map.
    pub fn sampler(&self) -> Option<&EnvSampler> {
        self.sampler.as_ref()
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.layout.width,
            self.layout.height,
            self.data.iter().map(|c| c.map(|v| v * s)).collect(),
        )
    }

    fn row_lerp(&self, row: usize, c: f64) -> Rgb {
        let w = self.layout.width;
        let c0 = c.floor();
        let t = c - c0;
        let i0 = (c0 as i64).rem_euclid(w as i64) as usize;
        let i1 = (i0 + 1) % w;
        let a = self.texel(row, i0);
        let b = self.texel(row, i1);
        [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
    }

    /// Bilinear lookup between texel centers; wraps in φ and blends toward
    /// the row average at the poles.
    pub fn eval(&self, d: Vec3) -> Rgb {
        let (r, c) = self.layout.texel_coords(d);
        let h = self.layout.height;
        let (r, c) = (r - 0.5, c - 0.5);
        let lerp = |a: Rgb, b: Rgb, t: f64| [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t);
        if r <= 0.0 {
            let t = ((r + 0.5) / 0.5).clamp(0.0, 1.0);
            return lerp(self.poles[0], self.row_lerp(0, c), t);
        }
        let last = (h - 1) as f64;
        if r >= last {
            let t = ((r - last) / 0.5).clamp(0.0, 1.0);
            return lerp(self.row_lerp(h - 1, c), self.poles[1], t);
        }
        let r0 = r.floor() as usize;
        lerp(self.row_lerp(r0, c), self.row_lerp(r0 + 1, c), r - r0 as f64)
    }
}

/// Environment light used for shading.
#[derive(Clone, Debug, PartialEq)]
pub enum Light {
    Sg(SgMixture),
    Map(EnvMap),
    Constant(Rgb),
}

impl Light {
    pub fn eval(&self, d: Vec3) -> Rgb {
        match self {
            Light::Sg(m) => m.eval(d),
            Light::Map(m) => m.eval(d),
            Light::Constant(c) => *c,
        }
    }

    /// Tracked when the light is a mixture whose keys are in the layout.
    pub fn eval_s<S: Real>(&self, d: Vec3) -> Rgb<S> {
        match self {
            Light::Sg(m) => m.eval_s(d),
            _ => self.eval(d).map(S::cst),
        }
    }
}

/// Result of tracing one secondary ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SecondaryTraceResult {
    pub t_esc: f64,
    pub c_rf: Rgb,
}

impl SecondaryTraceResult {
    pub const UNOCCLUDED: SecondaryTraceResult = SecondaryTraceResult {
        t_esc: 1.0,
        c_rf: [0.0; 3],
    };

    /// Binary visibility for average-visibility maps.
    pub fn visible(&self) -> bool {
        self.t_esc > 0.5
    }
}

/// `L_i = C_rf + T_esc · Env(d)`; relighting drops the indirect term.
pub fn incoming_radiance<S: Real>(light: &Light, d: Vec3, sec: &SecondaryTraceResult, relight: bool) -> Rgb<S> {
    let env = light.eval_s::<S>(d);
    let indirect = if relight { [0.0; 3] } else { sec.c_rf };
    [0, 1, 2].map(|c| env[c] * sec.t_esc + indirect[c])
}

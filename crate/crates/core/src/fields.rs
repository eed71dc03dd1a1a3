//! Canonical-space fields: signed distance, density, materials, emission and
//! occupancy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKey, Real};
use crate::linalg::{Aabb, Ray, V3, Vec3};
use crate::{Error, Result};

/// Distance reported by a field with no geometry.
pub const EMPTY_DISTANCE: f64 = 1e3;

/// Analytic signed-distance primitive tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SdfNode {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
    },
    RoundedBox {
        center: Vec3,
        half_extent: Vec3,
        radius: f64,
    },
    /// `n · x - offset` with unit `n`.
    Plane {
        normal: Vec3,
        offset: f64,
    },
    SmoothUnion {
        children: Vec<SdfNode>,
        k: f64,
    },
}

/// Polynomial smooth minimum and its partial derivative in `a`.
fn smin(a: f64, b: f64, k: f64) -> (f64, f64) {
    if k <= 0.0 {
        return if a <= b { (a, 1.0) } else { (b, 0.0) };
    }
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    (b + (a - b) * h - k * h * (1.0 - h), h)
}

impl SdfNode {
    pub fn eval(&self, p: Vec3) -> f64 {
        self.eval_grad(p).0
    }

    /// Signed distance and its spatial gradient.
    pub fn eval_grad(&self, p: Vec3) -> (f64, Vec3) {
        match self {
            SdfNode::Sphere { center, radius } => {
                let d = p - *center;
                let n = d.norm();
                let g = if n > 0.0 { d * (1.0 / n) } else { Vec3::Z };
                (n - radius, g)
            }
            SdfNode::Capsule { a, b, radius } => {
                let (q, _) = closest_on_segment(p, *a, *b);
                let d = p - q;
                let n = d.norm();
                let g = if n > 0.0 {
                    d * (1.0 / n)
                } else {
                    (*b - *a).any_orthonormal()
                };
                (n - radius, g)
            }
            SdfNode::RoundedBox {
                center,
                half_extent,
                radius,
            } => {
                let rel = p - *center;
                let sign = rel.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
                let q = rel.map(f64::abs) - (*half_extent - Vec3::splat(*radius));
                let outside = q.map(|v| v.max(0.0));
                let on = outside.norm();
                if on > 0.0 {
                    let g = (outside * (1.0 / on)).zip(sign, |a, s| a * s);
                    (on - radius, g)
                } else {
                    let m = q.max_elem();
                    let axis = (0..3).find(|&i| q[i] == m).unwrap_or(0);
                    let mut g = [0.0; 3];
                    g[axis] = sign[axis];
                    (m - radius, Vec3::from_array(g))
                }
            }
            SdfNode::Plane { normal, offset } => {
                let n = normal.normalize();
                (n.dot(p) - offset, n)
            }
            SdfNode::SmoothUnion { children, k } => {
                let mut it = children.iter();
                let Some(first) = it.next() else {
                    return (EMPTY_DISTANCE, Vec3::Z);
                };
                let (mut d, mut g) = first.eval_grad(p);
                for c in it {
                    let (dc, gc) = c.eval_grad(p);
                    let (v, h) = smin(dc, d, *k);
                    g = gc * h + g * (1.0 - h);
                    d = v;
                }
                (d, g)
            }
        }
    }

    /// Conservative bounding box of the zero level set.
    pub fn bounds(&self) -> Aabb {
        match self {
            SdfNode::Sphere { center, radius } => Aabb::new(*center, *center).padded(*radius),
            SdfNode::Capsule { a, b, radius } => {
                let mut bx = Aabb::new(*a, *a);
                bx.grow(*b);
                bx.padded(*radius)
            }
            SdfNode::RoundedBox {
                center,
                half_extent,
                ..
            } => Aabb::new(*center - *half_extent, *center + *half_extent),
            SdfNode::Plane { .. } => Aabb::new(Vec3::splat(-1e3), Vec3::splat(1e3)),
            SdfNode::SmoothUnion { children, k } => children
                .iter()
                .fold(Aabb::empty(), |acc, c| acc.union(&c.bounds()))
                .padded(*k),
        }
    }
}

/// Closest point on segment `ab` to `p`, and its parameter in `[0, 1]`.
pub fn closest_on_segment(p: Vec3, a: Vec3, b: Vec3) -> (Vec3, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * t, t)
}

/// Interpolation stencil of one query point.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// Spatial derivative of each weight.
    pub dw: [Vec3; 8],
    /// Distance from the query to the grid bounds (0 inside).
    pub outside: f64,
    /// Gradient of `outside`.
    pub outside_grad: Vec3,
}

/// Vertex-centered dense grid with planar channels, `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub res: [usize; 3],
    pub bounds: Aabb,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(res: [usize; 3], bounds: Aabb, channels: usize, data: Vec<f64>) -> Result<Self> {
        if res.iter().any(|&r| r < 2) {
            return Err(Error::invalid(format!("grid resolution {res:?} below 2")));
        }
        if bounds.is_empty() || bounds.extent().min_elem() <= 0.0 {
            return Err(Error::invalid("grid bounds must have positive extent"));
        }
        if channels == 0 {
            return Err(Error::invalid("grid needs at least one channel"));
        }
        let n = res[0] * res[1] * res[2] * channels;
        if data.len() != n {
            return Err(Error::invalid(format!(
                "grid expects {n} values, got {}",
                data.len()
            )));
        }
        Ok(VoxelGrid {
            res,
            bounds,
            channels,
            data,
        })
    }

    pub fn filled(res: [usize; 3], bounds: Aabb, values: &[f64]) -> Result<Self> {
        let n = res.iter().product::<usize>();
        let data = values.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        Self::new(res, bounds, values.len(), data)
    }

    /// Samples `f` at every vertex.
    pub fn from_fn(
        res: [usize; 3],
        bounds: Aabb,
        channels: usize,
        f: impl Fn(Vec3) -> Vec<f64>,
    ) -> Result<Self> {
        let n = res.iter().product::<usize>();
        let mut data = vec![0.0; n * channels];
        let probe = VoxelGrid {
            res,
            bounds,
            channels,
            data: Vec::new(),
        };
        for z in 0..res[2] {
            for y in 0..res[1] {
                for x in 0..res[0] {
                    let i = probe.vertex_index(x, y, z);
                    let v = f(probe.vertex_position(x, y, z));
                    for (c, val) in v.into_iter().take(channels).enumerate() {
                        data[c * n + i] = val;
                    }
                }
            }
        }
        Self::new(res, bounds, channels, data)
    }

    pub fn vertex_count(&self) -> usize {
        self.res.iter().product()
    }

    #[inline]
    pub fn vertex_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.res[0] * (y + self.res[1] * z)
    }

    pub fn spacing(&self) -> Vec3 {
        let e = self.bounds.extent();
        V3::new(
            e.x / (self.res[0] - 1) as f64,
            e.y / (self.res[1] - 1) as f64,
            e.z / (self.res[2] - 1) as f64,
        )
    }

    pub fn vertex_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.spacing();
        self.bounds.min + V3::new(x as f64 * h.x, y as f64 * h.y, z as f64 * h.z)
    }

    pub fn stencil(&self, p: Vec3) -> Stencil {
        let q = self.bounds.clamp(p);
        let off = p - q;
        let outside = off.norm();
        let outside_grad = if outside > 0.0 {
            off * (1.0 / outside)
        } else {
            Vec3::ZERO
        };
        let h = self.spacing();
        let mut cell = [0usize; 3];
        let mut t = [0.0; 3];
        let mut free = [true; 3];
        for a in 0..3 {
            let f = (q[a] - self.bounds.min[a]) / h[a];
            let c = (f.floor().max(0.0) as usize).min(self.res[a] - 2);
            cell[a] = c;
            t[a] = (f - c as f64).clamp(0.0, 1.0);
            free[a] = p[a] == q[a];
        }
        let mut idx = [0; 8];
        let mut w = [0.0; 8];
        let mut dw = [Vec3::ZERO; 8];
        for corner in 0..8 {
            let b = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let f = |a: usize| if b[a] == 1 { t[a] } else { 1.0 - t[a] };
            let df = |a: usize| {
                if !free[a] {
                    0.0
                } else if b[a] == 1 {
                    1.0 / h[a]
                } else {
                    -1.0 / h[a]
                }
            };
            idx[corner] = self.vertex_index(cell[0] + b[0], cell[1] + b[1], cell[2] + b[2]);
            w[corner] = f(0) * f(1) * f(2);
            dw[corner] = V3::new(df(0) * f(1) * f(2), f(0) * df(1) * f(2), f(0) * f(1) * df(2));
        }
        Stencil {
            idx,
            w,
            dw,
            outside,
            outside_grad,
        }
    }

    #[inline]
    fn channel_offset(&self, ch: usize) -> usize {
        ch * self.vertex_count()
    }

    pub fn value(&self, ch: usize, s: &Stencil) -> f64 {
        let o = self.channel_offset(ch);
        s.idx.iter().zip(&s.w).map(|(&i, &w)| w * self.data[o + i]).sum()
    }

    /// Interpolated value tracked as parameters of block `key`.
    pub fn value_s<S: Real>(&self, key: ParamKey, ch: usize, s: &Stencil) -> S {
        let o = self.channel_offset(ch);
        let mut terms = [(0usize, 0.0); 8];
        for k in 0..8 {
            terms[k] = (o + s.idx[k], s.w[k]);
        }
        S::lin(key, &self.data, &terms)
    }

    /// Exact spatial derivative of the trilinear interpolant.
    pub fn cell_gradient(&self, ch: usize, s: &Stencil) -> Vec3 {
        let o = self.channel_offset(ch);
        s.idx
            .iter()
            .zip(&s.dw)
            .fold(Vec3::ZERO, |acc, (&i, &d)| acc + d * self.data[o + i])
    }

    /// Gradient stencil: trilinear blend of per-vertex central differences.
    fn smooth_gradient_terms(&self, ch: usize, s: &Stencil) -> [Vec<(usize, f64)>; 3] {
        let o = self.channel_offset(ch);
        let h = self.spacing();
        let mut out: [Vec<(usize, f64)>; 3] = Default::default();
        for k in 0..8 {
            if s.w[k] == 0.0 {
                continue;
            }
            let v = s.idx[k];
            let coord = [
                v % self.res[0],
                (v / self.res[0]) % self.res[1],
                v / (self.res[0] * self.res[1]),
            ];
            for a in 0..3 {
                let lo = coord[a].saturating_sub(1);
                let hi = (coord[a] + 1).min(self.res[a] - 1);
                let span = (hi - lo) as f64 * h[a];
                let mut cl = coord;
                cl[a] = lo;
                let mut ch_ = coord;
                ch_[a] = hi;
                let il = self.vertex_index(cl[0], cl[1], cl[2]);
                let ih = self.vertex_index(ch_[0], ch_[1], ch_[2]);
                out[a].push((o + ih, s.w[k] / span));
                out[a].push((o + il, -s.w[k] / span));
            }
        }
        out
    }

    /// Smooth spatial gradient (continuous across cells).
    pub fn smooth_gradient(&self, ch: usize, s: &Stencil) -> Vec3 {
        let terms = self.smooth_gradient_terms(ch, s);
        let c = |a: usize| terms[a].iter().map(|&(i, w)| w * self.data[i]).sum::<f64>();
        V3::new(c(0), c(1), c(2))
    }

    pub fn smooth_gradient_s<S: Real>(&self, key: ParamKey, ch: usize, s: &Stencil) -> V3<S> {
        let terms = self.smooth_gradient_terms(ch, s);
        V3::new(
            S::lin(key, &self.data, &terms[0]),
            S::lin(key, &self.data, &terms[1]),
            S::lin(key, &self.data, &terms[2]),
        )
    }
}

/// Canonical signed distance.
#[derive(Clone, Debug, PartialEq)]
pub enum SdfField {
    Analytic(SdfNode),
    Grid(VoxelGrid),
    Empty,
}

impl SdfField {
    /// Samples an analytic tree onto a grid.
    pub fn bake(node: &SdfNode, res: [usize; 3], bounds: Aabb) -> Result<SdfField> {
        Ok(SdfField::Grid(VoxelGrid::from_fn(res, bounds, 1, |p| {
            vec![node.eval(p)]
        })?))
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            SdfField::Analytic(n) => n.eval(p),
            SdfField::Grid(g) => {
                let s = g.stencil(p);
                g.value(0, &s) + s.outside
            }
            SdfField::Empty => EMPTY_DISTANCE,
        }
    }

    /// Value and gradient. Grids use the smooth gradient.
    pub fn eval_grad(&self, p: Vec3) -> (f64, Vec3) {
        match self {
            SdfField::Analytic(n) => n.eval_grad(p),
            SdfField::Grid(g) => {
                let s = g.stencil(p);
                (
                    g.value(0, &s) + s.outside,
                    g.smooth_gradient(0, &s) + s.outside_grad,
                )
            }
            SdfField::Empty => (EMPTY_DISTANCE, Vec3::ZERO),
        }
    }

    pub fn eval_s<S: Real>(&self, p: Vec3) -> S {
        match self {
            SdfField::Grid(g) => {
                let s = g.stencil(p);
                g.value_s::<S>(ParamKey::Sdf, 0, &s) + s.outside
            }
            _ => S::cst(self.eval(p)),
        }
    }

    pub fn eval_grad_s<S: Real>(&self, p: Vec3) -> (S, V3<S>) {
        match self {
            SdfField::Grid(g) => {
                let s = g.stencil(p);
                let v = g.value_s::<S>(ParamKey::Sdf, 0, &s) + s.outside;
                let grad = g.smooth_gradient_s::<S>(ParamKey::Sdf, 0, &s) + V3::lift(s.outside_grad);
                (v, grad)
            }
            _ => {
                let (v, g) = self.eval_grad(p);
                (S::cst(v), V3::lift(g))
            }
        }
    }

    /// Unit outward normal.
    pub fn normal(&self, p: Vec3) -> Result<Vec3> {
        let (_, g) = self.eval_grad(p);
        let n = g.norm();
        if !(n > 1e-8) {
            return Err(Error::DegenerateGradient(p.to_array()));
        }
        Ok(g * (1.0 / n))
    }

    /// Box containing the surface, or `None` when empty.
    pub fn bounds(&self) -> Option<Aabb> {
        match self {
            SdfField::Analytic(n) => Some(n.bounds()),
            SdfField::Grid(g) => Some(g.bounds),
            SdfField::Empty => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, SdfField::Empty)
    }
}

/// `σ_t = (1/β) Ψ_β(−d)` with `Ψ_β` the zero-mean Laplace CDF.
pub fn density<S: Real>(sdf: S, beta: S) -> S {
    let inv = beta.recip();
    if sdf.val() >= 0.0 {
        inv * (-(sdf * inv)).exp() * 0.5
    } else {
        inv * (S::one() - (sdf * inv).exp() * 0.5)
    }
}

/// Laplace density model with trainable `log β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub log_beta: f64,
}

impl DensityModel {
    pub const INITIAL_BETA: f64 = 0.1;

    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta = {beta} must be positive")));
        }
        Ok(DensityModel {
            log_beta: beta.ln(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn beta_s<S: Real>(&self) -> S {
        S::param(ParamKey::LogBeta, 0, self.log_beta).exp()
    }

    pub fn sigma(&self, sdf: f64) -> f64 {
        density(sdf, self.beta())
    }

    /// Distance below which `σ_t > 0.01/β`.
    pub fn occupancy_distance(&self) -> f64 {
        self.beta() * 50f64.ln()
    }
}

impl Default for DensityModel {
    fn default() -> Self {
        DensityModel {
            log_beta: Self::INITIAL_BETA.ln(),
        }
    }
}

/// Monotone map from raw parameters to output ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    Sigmoid,
    /// `0.03 + 0.77 · sigmoid`
    Calibrated,
    Softplus,
}

pub const CALIBRATION_LOW: f64 = 0.03;
pub const CALIBRATION_SPAN: f64 = 0.77;

impl Squash {
    pub fn apply<S: Real>(self, raw: S) -> S {
        match self {
            Squash::Sigmoid => raw.sigmoid(),
            Squash::Calibrated => raw.sigmoid() * CALIBRATION_SPAN + CALIBRATION_LOW,
            Squash::Softplus => raw.softplus(),
        }
    }

    /// Closed range of output values.
    pub fn range(self) -> (f64, f64) {
        match self {
            Squash::Sigmoid => (0.0, 1.0),
            Squash::Calibrated => (CALIBRATION_LOW, CALIBRATION_LOW + CALIBRATION_SPAN),
            Squash::Softplus => (0.0, f64::INFINITY),
        }
    }

    /// Raw value mapping to `v`, clamped into the open range.
    pub fn inverse(self, v: f64) -> f64 {
        let logit = |p: f64| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        };
        match self {
            Squash::Sigmoid => logit(v),
            Squash::Calibrated => logit((v - CALIBRATION_LOW) / CALIBRATION_SPAN),
            Squash::Softplus => {
                let v = v.max(1e-6);
                if v > 30.0 {
                    v
                } else {
                    v.exp_m1().ln()
                }
            }
        }
    }
}

/// Raw (pre-squash) values of a multi-channel quantity over space.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Constant(Vec<f64>),
    Grid(VoxelGrid),
    /// Smooth blend from `below` to `above` across the plane `n · x = offset`.
    HalfSpace {
        normal: Vec3,
        offset: f64,
        sharpness: f64,
        below: Vec<f64>,
        above: Vec<f64>,
    },
}

impl Source {
    pub fn channels(&self) -> usize {
        match self {
            Source::Constant(v) => v.len(),
            Source::Grid(g) => g.channels,
            Source::HalfSpace { below, .. } => below.len(),
        }
    }

    pub fn raw(&self, p: Vec3, ch: usize) -> f64 {
        self.raw_s::<f64>(ParamKey::Albedo, p, ch)
    }

    /// Tracked under `key` when grid-backed.
    pub fn raw_s<S: Real>(&self, key: ParamKey, p: Vec3, ch: usize) -> S {
        match self {
            Source::Constant(v) => S::cst(v[ch]),
            Source::Grid(g) => g.value_s(key, ch, &g.stencil(p)),
            Source::HalfSpace {
                normal,
                offset,
                sharpness,
                below,
                above,
            } => {
                let s = ((normal.dot(p) - offset) * sharpness).sigmoid();
                S::cst(below[ch] + (above[ch] - below[ch]) * s)
            }
        }
    }

    /// All channels at once, sharing one stencil.
    pub fn raw_all_s<S: Real>(&self, key: ParamKey, p: Vec3) -> Vec<S> {
        match self {
            Source::Grid(g) => {
                let s = g.stencil(p);
                (0..g.channels).map(|c| g.value_s(key, c, &s)).collect()
            }
            _ => (0..self.channels()).map(|c| self.raw_s(key, p, c)).collect(),
        }
    }

    pub fn grid(&self) -> Option<&VoxelGrid> {
        match self {
            Source::Grid(g) => Some(g),
            _ => None,
        }
    }

    pub fn grid_mut(&mut self) -> Option<&mut VoxelGrid> {
        match self {
            Source::Grid(g) => Some(g),
            _ => None,
        }
    }

    /// Resamples onto a grid.
    pub fn to_grid(&self, res: [usize; 3], bounds: Aabb) -> Result<VoxelGrid> {
        let n = self.channels();
        VoxelGrid::from_fn(res, bounds, n, |p| (0..n).map(|c| self.raw(p, c)).collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaterialSample<S = f64> {
    pub albedo: [S; 3],
    pub roughness: S,
    pub metallic: S,
}

/// Albedo, roughness and metallic over canonical space.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialField {
    pub albedo: Source,
    pub roughness: Source,
    pub metallic: Source,
    pub calibrate: bool,
}

impl MaterialField {
    /// Spatially constant material, given in output units.
    pub fn constant(albedo: [f64; 3], roughness: f64, metallic: f64, calibrate: bool) -> Self {
        let sq = if calibrate {
            Squash::Calibrated
        } else {
            Squash::Sigmoid
        };
        MaterialField {
            albedo: Source::Constant(albedo.iter().map(|&a| sq.inverse(a)).collect()),
            roughness: Source::Constant(vec![Squash::Sigmoid.inverse(roughness)]),
            metallic: Source::Constant(vec![Squash::Sigmoid.inverse(metallic)]),
            calibrate,
        }
    }

    pub fn albedo_squash(&self) -> Squash {
        if self.calibrate {
            Squash::Calibrated
        } else {
            Squash::Sigmoid
        }
    }

    pub fn eval(&self, p: Vec3) -> MaterialSample {
        self.eval_s::<f64>(p)
    }

    pub fn eval_s<S: Real>(&self, p: Vec3) -> MaterialSample<S> {
        let sq = self.albedo_squash();
        let a = self.albedo.raw_all_s::<S>(ParamKey::Albedo, p);
        MaterialSample {
            albedo: [sq.apply(a[0]), sq.apply(a[1]), sq.apply(a[2])],
            roughness: Squash::Sigmoid.apply(self.roughness.raw_s(ParamKey::Roughness, p, 0)),
            metallic: Squash::Sigmoid.apply(self.metallic.raw_s(ParamKey::Metallic, p, 0)),
        }
    }
}

/// View-independent emission, nonnegative through softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub emission: Source,
}

impl RadianceField {
    pub fn constant(rgb: [f64; 3]) -> Self {
        RadianceField {
            emission: Source::Constant(rgb.iter().map(|&v| Squash::Softplus.inverse(v)).collect()),
        }
    }

    pub fn black() -> Self {
        RadianceField {
            emission: Source::Constant(vec![f64::NEG_INFINITY; 3]),
        }
    }

    pub fn eval(&self, p: Vec3) -> [f64; 3] {
        let v = self.eval_s::<f64>(p);
        [v[0], v[1], v[2]]
    }

    pub fn eval_s<S: Real>(&self, p: Vec3) -> [S; 3] {
        let raw = self.emission.raw_all_s::<S>(ParamKey::Emission, p);
        let f = |r: S| {
            if r.val() == f64::NEG_INFINITY {
                S::zero()
            } else {
                r.softplus()
            }
        };
        [f(raw[0]), f(raw[1]), f(raw[2])]
    }
}

/// Conservative binary occupancy over a posed bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub res: usize,
    pub bounds: Aabb,
    pub frame: usize,
    bits: Vec<u64>,
}

impl OccupancyGrid {
    pub const RES: usize = 64;

    pub fn empty(res: usize, bounds: Aabb, frame: usize) -> Self {
        OccupancyGrid {
            res,
            bounds,
            frame,
            bits: vec![0; (res * res * res).div_ceil(64)],
        }
    }

    /// Marks voxels whose center is within `threshold` plus half a diagonal
    /// of the surface of `sdf`, then dilates by one voxel.
    pub fn build(
        res: usize,
        bounds: Aabb,
        frame: usize,
        threshold: f64,
        sdf: impl Fn(Vec3) -> f64,
    ) -> Self {
        let mut g = Self::empty(res, bounds, frame);
        let h = g.voxel_size();
        let half_diag = 0.5 * h.norm();
        let mut raw = vec![false; res * res * res];
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    let c = g.voxel_center(x, y, z);
                    raw[g.index(x, y, z)] = sdf(c) < threshold + half_diag;
                }
            }
        }
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    let hit = neighbours(x, y, z, res).any(|(a, b, c)| raw[g.index(a, b, c)]);
                    if hit {
                        g.set(x, y, z);
                    }
                }
            }
        }
        g
    }

    pub fn from_bits(res: usize, bounds: Aabb, frame: usize, bits: Vec<u64>) -> Result<Self> {
        if bits.len() != (res * res * res).div_ceil(64) {
            return Err(Error::invalid("occupancy bit count does not match resolution"));
        }
        Ok(OccupancyGrid {
            res,
            bounds,
            frame,
            bits,
        })
    }

    pub fn bits(&self) -> &[u64] {
        &self.bits
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.res * (y + self.res * z)
    }

    fn set(&mut self, x: usize, y: usize, z: usize) {
        let i = self.index(x, y, z);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let i = self.index(x, y, z);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.bounds.extent() * (1.0 / self.res as f64)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.voxel_size();
        self.bounds.min + V3::new((x as f64 + 0.5) * h.x, (y as f64 + 0.5) * h.y, (z as f64 + 0.5) * h.z)
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Points outside the bounds are free.
    pub fn is_occupied(&self, p: Vec3) -> bool {
        if !self.bounds.contains(p) {
            return false;
        }
        let h = self.voxel_size();
        let c = |a: usize| (((p[a] - self.bounds.min[a]) / h[a]) as usize).min(self.res - 1);
        self.get(c(0), c(1), c(2))
    }

    /// Occupied parameter intervals of `ray` within `[t0, t1]`, merged.
    pub fn intervals(&self, ray: &Ray, t0: f64, t1: f64) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        let Some((b0, b1)) = self.bounds.intersect(ray) else {
            return out;
        };
        let (mut t, end) = (b0.max(t0), b1.min(t1));
        if t >= end {
            return out;
        }
        let h = self.voxel_size();
        let p = ray.at(t);
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut next = [f64::INFINITY; 3];
        let mut delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let f = ((p[a] - self.bounds.min[a]) / h[a]).floor();
            cell[a] = (f as i64).clamp(0, self.res as i64 - 1);
            let d = ray.dir[a];
            if d > 0.0 {
                step[a] = 1;
                let edge = self.bounds.min[a] + (cell[a] + 1) as f64 * h[a];
                next[a] = t + (edge - p[a]) / d;
                delta[a] = h[a] / d;
            } else if d < 0.0 {
                step[a] = -1;
                let edge = self.bounds.min[a] + cell[a] as f64 * h[a];
                next[a] = t + (edge - p[a]) / d;
                delta[a] = -h[a] / d;
            }
        }
        while t < end {
            let a = (0..3)
                .min_by(|&i, &j| next[i].total_cmp(&next[j]))
                .unwrap_or(0);
            let exit = next[a].min(end);
            if self.get(cell[0] as usize, cell[1] as usize, cell[2] as usize) {
                match out.last_mut() {
                    Some(last) if last.1 >= t => last.1 = exit,
                    _ => out.push((t, exit)),
                }
            }
            t = exit;
            cell[a] += step[a];
            next[a] += delta[a];
            if cell[a] < 0 || cell[a] >= self.res as i64 {
                break;
            }
        }
        out
    }
}

fn neighbours(x: usize, y: usize, z: usize, res: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let r = move |v: usize| v.saturating_sub(1)..=(v + 1).min(res - 1);
    r(z).flat_map(move |c| r(y).flat_map(move |b| r(x).map(move |a| (a, b, c))))
}

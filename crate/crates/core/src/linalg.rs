//! Small fixed-size vector and matrix types.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct V3<S = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
}

pub type Vec3 = V3<f64>;

impl<S: Real> V3<S> {
    #[inline]
    pub fn new(x: S, y: S, z: S) -> Self {
        V3 { x, y, z }
    }

    #[inline]
    pub fn lift(v: Vec3) -> Self {
        V3::new(S::cst(v.x), S::cst(v.y), S::cst(v.z))
    }

    #[inline]
    pub fn value(self) -> Vec3 {
        V3::new(self.x.val(), self.y.val(), self.z.val())
    }

    #[inline]
    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Dot product with a constant vector.
    #[inline]
    pub fn dot_c(self, o: Vec3) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        V3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> S {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> S {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn scale(self, s: S) -> Self {
        V3::new(self.x * s, self.y * s, self.z * s)
    }

    #[inline]
    pub fn normalize(self) -> Self {
        let inv = self.norm().recip();
        self.scale(inv)
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = V3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };
    pub const X: Vec3 = V3 {
        x: 1.0,
        y: 0.0,
        z: 0.0,
    };
    pub const Y: Vec3 = V3 {
        x: 0.0,
        y: 1.0,
        z: 0.0,
    };
    pub const Z: Vec3 = V3 {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    #[inline]
    pub const fn splat(v: f64) -> Vec3 {
        V3 { x: v, y: v, z: v }
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Vec3 {
        V3::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        V3::new(f(self.x), f(self.y), f(self.z))
    }

    #[inline]
    pub fn zip(self, o: Vec3, f: impl Fn(f64, f64) -> f64) -> Vec3 {
        V3::new(f(self.x, o.x), f(self.y, o.y), f(self.z, o.z))
    }

    #[inline]
    pub fn min_elem(self) -> f64 {
        self.x.min(self.y).min(self.z)
    }

    #[inline]
    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Any unit vector orthogonal to `self` (assumed unit).
    pub fn any_orthonormal(self) -> Vec3 {
        let helper = if self.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        self.cross(helper).normalize()
    }

    /// Orthonormal basis `(t, b)` completing `self` (assumed unit).
    pub fn basis(self) -> (Vec3, Vec3) {
        let t = self.any_orthonormal();
        (t, self.cross(t))
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::from_array(a)
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Serialize for Vec3 {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        <[f64; 3]>::deserialize(d).map(Vec3::from_array)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("V3 index {i} out of range"),
        }
    }
}

impl<S: Real> Add for V3<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        V3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Real> Sub for V3<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        V3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Real> Neg for V3<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        V3::new(-self.x, -self.y, -self.z)
    }
}

impl<S: Real> Mul<f64> for V3<S> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        V3::new(self.x * c, self.y * c, self.z * c)
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub const ZERO: Mat3 = Mat3 { m: [[0.0; 3]; 3] };

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3 {
            m: [r0.to_array(), r1.to_array(), r2.to_array()],
        }
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3::from_rows(c0, c1, c2).transpose()
    }

    /// Rotation of `angle` radians about the unit `axis` (Rodrigues).
    pub fn rotation(axis: Vec3, angle: f64) -> Mat3 {
        let a = axis.normalize();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3 {
            m: [
                [t * a.x * a.x + c, t * a.x * a.y - s * a.z, t * a.x * a.z + s * a.y],
                [t * a.x * a.y + s * a.z, t * a.y * a.y + c, t * a.y * a.z - s * a.x],
                [t * a.x * a.z - s * a.y, t * a.y * a.z + s * a.x, t * a.z * a.z + c],
            ],
        }
    }

    pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
        Mat3 {
            m: [
                (b * a.x).to_array(),
                (b * a.y).to_array(),
                (b * a.z).to_array(),
            ],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.m[i])
    }

    #[inline]
    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        self.apply(v)
    }

    /// Constant matrix applied to a vector of any scalar type.
    #[inline]
    pub fn apply<S: Real>(&self, v: V3<S>) -> V3<S> {
        let m = &self.m;
        V3::new(
            v.x * m[0][0] + v.y * m[0][1] + v.z * m[0][2],
            v.x * m[1][0] + v.y * m[1][1] + v.z * m[1][2],
            v.x * m[2][0] + v.y * m[2][1] + v.z * m[2][2],
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3 { m: r }
    }

    pub fn scaled(&self, s: f64) -> Mat3 {
        Mat3 {
            m: self.m.map(|row| row.map(|v| v * s)),
        }
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut r = self.m;
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += o.m[i][j];
            }
        }
        Mat3 { m: r }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d.abs() < 1e-14 || !d.is_finite() {
            return None;
        }
        let m = &self.m;
        let inv_d = 1.0 / d;
        let c = |a: usize, b: usize, c: usize, e: usize| m[a][b] * m[c][e] - m[a][e] * m[c][b];
        Some(Mat3 {
            m: [
                [c(1, 1, 2, 2) * inv_d, -c(0, 1, 2, 2) * inv_d, c(0, 1, 1, 2) * inv_d],
                [-c(1, 0, 2, 2) * inv_d, c(0, 0, 2, 2) * inv_d, -c(0, 0, 1, 2) * inv_d],
                [c(1, 0, 2, 1) * inv_d, -c(0, 0, 2, 1) * inv_d, c(0, 0, 1, 1) * inv_d],
            ],
        })
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - o.m[i][j]).abs());
            }
        }
        d
    }

    /// Orthonormal with determinant +1, within `tol`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        let rtr = self.transpose().mul_mat(self);
        rtr.max_abs_diff(&Mat3::IDENTITY) <= tol && (self.det() - 1.0).abs() <= tol
    }
}

/// `x ↦ lin · x + trans`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub lin: Mat3,
    pub trans: Vec3,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        lin: Mat3::IDENTITY,
        trans: Vec3::ZERO,
    };

    pub fn new(lin: Mat3, trans: Vec3) -> Affine {
        Affine { lin, trans }
    }

    pub fn translation(t: Vec3) -> Affine {
        Affine::new(Mat3::IDENTITY, t)
    }

    /// Rotation by `rot` about the fixed point `pivot`.
    pub fn rotation_about(rot: Mat3, pivot: Vec3) -> Affine {
        Affine::new(rot, pivot - rot.mul_vec(pivot))
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.lin.mul_vec(p) + self.trans
    }

    /// `self ∘ o`
    pub fn compose(&self, o: &Affine) -> Affine {
        Affine::new(self.lin.mul_mat(&o.lin), self.apply(o.trans))
    }

    pub fn inverse(&self) -> Option<Affine> {
        let inv = self.lin.inverse()?;
        Some(Affine::new(inv, -inv.mul_vec(self.trans)))
    }

    /// Row-major 4×4 with last row `0 0 0 1`.
    pub fn to_rows(&self) -> [f64; 16] {
        let m = &self.lin.m;
        [
            m[0][0], m[0][1], m[0][2], self.trans.x, //
            m[1][0], m[1][1], m[1][2], self.trans.y, //
            m[2][0], m[2][1], m[2][2], self.trans.z, //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_rows(r: &[f64; 16]) -> Affine {
        Affine::new(
            Mat3 {
                m: [[r[0], r[1], r[2]], [r[4], r[5], r[6]], [r[8], r[9], r[10]]],
            },
            V3::new(r[3], r[7], r[11]),
        )
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        self.lin.is_rotation(tol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn empty() -> Aabb {
        Aabb::new(Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY))
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn grow(&mut self, p: Vec3) {
        self.min = self.min.zip(p, f64::min);
        self.max = self.max.zip(p, f64::max);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb::new(self.min.zip(o.min, f64::min), self.max.zip(o.max, f64::max))
    }

    pub fn padded(&self, pad: f64) -> Aabb {
        Aabb::new(self.min - Vec3::splat(pad), self.max + Vec3::splat(pad))
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        V3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            V3::new(a.x, a.y, a.z),
            V3::new(b.x, a.y, a.z),
            V3::new(a.x, b.y, a.z),
            V3::new(b.x, b.y, a.z),
            V3::new(a.x, a.y, b.z),
            V3::new(b.x, a.y, b.z),
            V3::new(a.x, b.y, b.z),
            V3::new(b.x, b.y, b.z),
        ]
    }

    /// Image of the box under an affine map, re-boxed.
    pub fn transformed(&self, t: &Affine) -> Aabb {
        let mut out = Aabb::empty();
        for c in self.corners() {
            out.grow(t.apply(c));
        }
        out
    }

    /// Parametric entry/exit of `ray` (clipped to `t ≥ 0`), if it hits.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0: f64 = 0.0;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.dir[axis];
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if d.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// `r(t) = origin + t · dir` with unit `dir`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Normalizes `dir`.
    pub fn new(origin: Vec3, dir: Vec3) -> Ray {
        Ray {
            origin,
            dir: dir.normalize(),
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

//! Skeletons, poses, forward and inverse linear blend skinning.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::fields::{closest_on_segment, SdfField, EMPTY_DISTANCE};
use crate::linalg::{Affine, Mat3, Vec3};
use crate::{Error, Result};

pub const MAX_BONES: usize = 32;
/// Default skinning temperature in world units.
pub const SKIN_TAU: f64 = 0.05;

const DAMPING: f64 = 0.8;
const MAX_ITERS: usize = 20;
const STOP_RESIDUAL: f64 = 1e-7;
pub const CONVERGED_RESIDUAL: f64 = 1e-5;
const DEDUPE: f64 = 1e-4;
/// Bones whose posed segment lies within this margin of the nearest one seed
/// an inverse search.
const INIT_MARGIN: f64 = 0.15;

pub type Weights = SmallVec<[f64; 8]>;
pub type Candidates = SmallVec<[Vec3; 4]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bone {
    pub name: String,
    pub head: Vec3,
    pub tail: Vec3,
    #[serde(default)]
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub bones: Vec<Bone>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    SKIN_TAU
}

impl Skeleton {
    pub fn new(bones: Vec<Bone>, tau: f64) -> Result<Self> {
        let s = Skeleton { bones, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones.is_empty() || self.bones.len() > MAX_BONES {
            return Err(Error::schema(
                "bones",
                format!("expected 1..={MAX_BONES} bones, got {}", self.bones.len()),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::schema("tau", "must be positive"));
        }
        for (i, b) in self.bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(Error::schema(
                        format!("bones[{i}].parent"),
                        "parent must precede its child",
                    ));
                }
            }
            if !b.head.is_finite() || !b.tail.is_finite() {
                return Err(Error::schema(format!("bones[{i}]"), "non-finite endpoint"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    /// Softmax of `−dist(x, bone)/τ`.
    pub fn weights(&self, x: Vec3) -> Weights {
        let d: Weights = self
            .bones
            .iter()
            .map(|b| closest_on_segment(x, b.head, b.tail).0.distance(x))
            .collect();
        softmax(&d, self.tau)
    }

    /// Weights and their spatial gradients.
    pub fn weights_grad(&self, x: Vec3) -> (Weights, SmallVec<[Vec3; 8]>) {
        let mut d = Weights::new();
        let mut gd: SmallVec<[Vec3; 8]> = SmallVec::new();
        for b in &self.bones {
            let (q, _) = closest_on_segment(x, b.head, b.tail);
            let r = x - q;
            let n = r.norm();
            d.push(n);
            gd.push(if n > 0.0 { r * (1.0 / n) } else { Vec3::ZERO });
        }
        let w = softmax(&d, self.tau);
        let mean = w.iter().zip(&gd).fold(Vec3::ZERO, |a, (&wi, &g)| a + g * wi);
        let gw = w
            .iter()
            .zip(&gd)
            .map(|(&wi, &g)| (mean - g) * (wi / self.tau))
            .collect();
        (w, gw)
    }
}

fn softmax(d: &[f64], tau: f64) -> Weights {
    let m = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Weights = d.iter().map(|&di| (-(di - m) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

/// Rigid bone transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub transforms: Vec<Affine>,
}

impl Pose {
    pub fn identity(bones: usize) -> Self {
        Pose {
            transforms: vec![Affine::IDENTITY; bones],
        }
    }

    pub fn new(transforms: Vec<Affine>) -> Result<Self> {
        for (i, t) in transforms.iter().enumerate() {
            if !t.is_rigid(1e-6) {
                return Err(Error::schema(
                    format!("transforms[{i}]"),
                    "rotation part is not orthonormal with det +1",
                ));
            }
        }
        Ok(Pose { transforms })
    }

    /// Forward kinematics: each bone rotates about its rest head, composed
    /// with its parent; `root` translates the whole figure.
    pub fn from_joint_rotations(skel: &Skeleton, rotations: &[Mat3], root: Vec3) -> Result<Self> {
        if rotations.len() != skel.len() {
            return Err(Error::invalid(format!(
                "{} rotations for {} bones",
                rotations.len(),
                skel.len()
            )));
        }
        let mut out: Vec<Affine> = Vec::with_capacity(skel.len());
        for (b, r) in skel.bones.iter().zip(rotations) {
            let local = Affine::rotation_about(*r, b.head);
            let parent = match b.parent {
                Some(p) => out[p],
                None => Affine::translation(root),
            };
            out.push(parent.compose(&local));
        }
        Pose::new(out)
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn check(&self, skel: &Skeleton) -> Result<()> {
        if self.len() != skel.len() {
            return Err(Error::invalid(format!(
                "pose has {} transforms for {} bones",
                self.len(),
                skel.len()
            )));
        }
        Ok(())
    }
}

/// `x_o = (Σ_b w_b(x_c) B_b) x_c`
pub fn lbs_forward(skel: &Skeleton, pose: &Pose, x_c: Vec3) -> Vec3 {
    let w = skel.weights(x_c);
    blend(&w, pose, x_c)
}

fn blend(w: &[f64], pose: &Pose, x: Vec3) -> Vec3 {
    w.iter()
        .zip(&pose.transforms)
        .fold(Vec3::ZERO, |acc, (&wb, t)| acc + t.apply(x) * wb)
}

/// Forward map and its Jacobian `∂x_o/∂x_c`.
pub fn lbs_jacobian(skel: &Skeleton, pose: &Pose, x_c: Vec3) -> (Vec3, Mat3) {
    let (w, gw) = skel.weights_grad(x_c);
    let mut x_o = Vec3::ZERO;
    let mut j = Mat3::ZERO;
    for ((&wb, g), t) in w.iter().zip(&gw).zip(&pose.transforms) {
        let y = t.apply(x_c);
        x_o = x_o + y * wb;
        j = j.add(&t.lin.scaled(wb)).add(&Mat3::outer(y, *g));
    }
    (x_o, j)
}

#[derive(Clone, Debug, Default)]
pub struct InverseResult {
    /// Distinct converged canonical points.
    pub candidates: Candidates,
    /// Searches started.
    pub attempts: usize,
}

impl InverseResult {
    pub fn converged(&self) -> bool {
        !self.candidates.is_empty()
    }
}

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    closest_on_segment(p, a, b).0.distance(p)
}

/// All canonical points mapping to `x_o`, found by damped Newton iteration
/// from per-bone rigid initializations.
pub fn lbs_inverse(skel: &Skeleton, pose: &Pose, x_o: Vec3) -> InverseResult {
    let dists: SmallVec<[f64; 8]> = skel
        .bones
        .iter()
        .zip(&pose.transforms)
        .map(|(b, t)| segment_distance(x_o, t.apply(b.head), t.apply(b.tail)))
        .collect();
    let nearest = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = InverseResult::default();
    for (b, t) in pose.transforms.iter().enumerate() {
        if dists[b] > nearest + INIT_MARGIN {
            continue;
        }
        let Some(inv) = t.inverse() else { continue };
        out.attempts += 1;
        if let Some(x) = newton(skel, pose, x_o, inv.apply(x_o)) {
            if out.candidates.iter().all(|c| c.distance(x) > DEDUPE) {
                out.candidates.push(x);
            }
        }
    }
    out
}

fn newton(skel: &Skeleton, pose: &Pose, target: Vec3, mut x: Vec3) -> Option<Vec3> {
    for _ in 0..MAX_ITERS {
        let (f, j) = lbs_jacobian(skel, pose, x);
        let r = f - target;
        if r.norm() < STOP_RESIDUAL {
            return Some(x);
        }
        let step = match j.inverse() {
            Some(ji) => ji.mul_vec(r),
            None => r,
        };
        x = x - step * DAMPING;
        if !x.is_finite() {
            return None;
        }
    }
    let r = lbs_forward(skel, pose, x) - target;
    (r.norm() < CONVERGED_RESIDUAL).then_some(x)
}

/// The most-inside canonical candidate of `x_o`, or `None` if no search
/// converged.
pub fn canonicalize(field: &SdfField, skel: &Skeleton, pose: &Pose, x_o: Vec3) -> Option<(Vec3, f64)> {
    lbs_inverse(skel, pose, x_o)
        .candidates
        .into_iter()
        .map(|c| (c, field.eval(c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Canonical SDF of an observation-space point; empty where inversion fails.
pub fn warped_sdf(field: &SdfField, skel: &Skeleton, pose: &Pose, x_o: Vec3) -> f64 {
    if field.is_empty() {
        return EMPTY_DISTANCE;
    }
    canonicalize(field, skel, pose, x_o).map_or(EMPTY_DISTANCE, |(_, d)| d)
}

/// Maps a canonical normal at `x_c` into observation space.
pub fn transform_normal(skel: &Skeleton, pose: &Pose, x_c: Vec3, n_c: Vec3) -> Vec3 {
    let (_, j) = lbs_jacobian(skel, pose, x_c);
    match j.inverse() {
        Some(ji) => ji.transpose().mul_vec(n_c).normalize(),
        None => n_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::SdfNode;
    use crate::linalg::V3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bone(name: &str, head: Vec3, tail: Vec3, parent: Option<usize>) -> Bone {
        Bone {
            name: name.into(),
            head,
            tail,
            parent,
        }
    }

    fn two_bones() -> Skeleton {
        Skeleton::new(
            vec![
                bone("a", V3::new(-1.0, 0.0, 0.0), V3::new(-1.0, 1.0, 0.0), None),
                bone("b", V3::new(1.0, 0.0, 0.0), V3::new(1.0, 1.0, 0.0), Some(0)),
            ],
            SKIN_TAU,
        )
        .unwrap()
    }

    #[test]
    fn weights_saturate_and_split() {
        let s = two_bones();
        let w = s.weights(V3::new(-1.0, 0.5, 0.0));
        assert!(w[0] > 0.99);
        let w = s.weights(V3::new(0.0, 0.5, 0.3));
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_blends_translations() {
        let s = two_bones();
        let x = V3::new(0.0, 0.5, 0.0);
        assert_eq!(lbs_forward(&s, &Pose::identity(2), x), x);
        let t1 = V3::new(0.2, 0.0, 0.0);
        let t2 = V3::new(0.0, 0.4, -0.2);
        let pose = Pose::new(vec![Affine::translation(t1), Affine::translation(t2)]).unwrap();
        let got = lbs_forward(&s, &pose, x);
        assert!((got - (x + (t1 + t2) * 0.5)).norm() < 1e-12);

        let one = Skeleton::new(vec![bone("r", Vec3::ZERO, Vec3::Y, None)], SKIN_TAU).unwrap();
        let pose = Pose::new(vec![Affine::translation(t2)]).unwrap();
        assert_eq!(lbs_forward(&one, &pose, x), x + t2);
    }

    #[test]
    fn rigid_single_bone_inverse_is_exact() {
        let one = Skeleton::new(vec![bone("r", Vec3::ZERO, Vec3::Y, None)], SKIN_TAU).unwrap();
        let t = Affine::new(Mat3::rotation(V3::new(1.0, 1.0, 0.0), 0.7), V3::new(0.1, 0.2, 0.3));
        let pose = Pose::new(vec![t]).unwrap();
        let x_o = V3::new(0.4, -0.2, 0.9);
        let r = lbs_inverse(&one, &pose, x_o);
        assert_eq!(r.candidates.len(), 1);
        let exact = t.inverse().unwrap().apply(x_o);
        assert!((r.candidates[0] - exact).norm() < 1e-12);
        let id = lbs_inverse(&one, &Pose::identity(1), x_o);
        assert_eq!(id.candidates[0], x_o);
    }

    #[test]
    fn jacobian_matches_differences() {
        let s = two_bones();
        let pose = Pose::from_joint_rotations(
            &s,
            &[Mat3::rotation(Vec3::Z, 0.3), Mat3::rotation(Vec3::X, -0.5)],
            V3::new(0.0, 0.1, 0.0),
        )
        .unwrap();
        let x = V3::new(0.1, 0.4, 0.05);
        let (_, j) = lbs_jacobian(&s, &pose, x);
        let h = 1e-6;
        for a in 0..3 {
            let mut e = [0.0; 3];
            e[a] = h;
            let e = Vec3::from_array(e);
            let fd = (lbs_forward(&s, &pose, x + e) - lbs_forward(&s, &pose, x - e)) * (0.5 / h);
            for r in 0..3 {
                assert!((j.m[r][a] - fd[r]).abs() < 1e-6, "{r},{a}");
            }
        }
    }

    #[test]
    fn warped_sdf_of_translated_sphere() {
        let one = Skeleton::new(vec![bone("r", Vec3::ZERO, Vec3::Y, None)], SKIN_TAU).unwrap();
        let field = SdfField::Analytic(SdfNode::Sphere {
            center: Vec3::ZERO,
            radius: 0.5,
        });
        let t = V3::new(1.0, 2.0, 3.0);
        let pose = Pose::new(vec![Affine::translation(t)]).unwrap();
        assert!((warped_sdf(&field, &one, &pose, t) + 0.5).abs() < 1e-9);
        let p = V3::new(0.3, 0.1, -0.2);
        assert!((warped_sdf(&field, &one, &Pose::identity(1), p) - field.eval(p)).abs() < 1e-12);
    }

    #[test]
    fn weights_are_continuous() {
        let s = two_bones();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x = V3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..1.0),
            );
            let w = s.weights(x);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let d = crate::sampling::uniform_sphere(rng.random(), rng.random()) * 1e-3;
            let w2 = s.weights(x + d);
            for (a, b) in w.iter().zip(&w2) {
                assert!((a - b).abs() <= 0.1);
            }
        }
    }
}

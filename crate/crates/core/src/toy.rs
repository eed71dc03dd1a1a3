//! Small synthetic scenes: a single sphere and a four-bone capsule figure.

use std::f64::consts::PI;

use crate::articulation::{Bone, Pose, Skeleton, SKIN_TAU};
use crate::camera::Camera;
use crate::fields::{DensityModel, MaterialField, RadianceField, SdfField, SdfNode, Source, Squash, VoxelGrid};
use crate::linalg::{Aabb, Mat3, V3, Vec3};
use crate::model::Model;
use crate::optim::Frame;
use crate::raster::Image;
use crate::render::{render_image, Mode, Posed, RenderConfig};
use crate::shading::{fibonacci_sphere, Light, Rgb, SgMixture};
use crate::Result;

pub const ALBEDO_BELOW: Rgb = [0.75, 0.35, 0.2];
pub const ALBEDO_ABOVE: Rgb = [0.25, 0.45, 0.75];

fn bone(name: &str, head: Vec3, tail: Vec3, parent: Option<usize>) -> Bone {
    Bone {
        name: name.into(),
        head,
        tail,
        parent,
    }
}

pub fn single_bone() -> Skeleton {
    Skeleton::new(
        vec![bone("root", V3::new(0.0, 0.0, -0.5), V3::new(0.0, 0.0, 0.5), None)],
        SKIN_TAU,
    )
    .expect("valid skeleton")
}

/// Opaque-ish sphere at the origin with a spatially constant material.
pub fn sphere_model(radius: f64, albedo: Rgb, beta: f64, light: Light) -> Model {
    Model {
        sdf: SdfField::Analytic(SdfNode::Sphere {
            center: Vec3::ZERO,
            radius,
        }),
        density: DensityModel::new(beta).expect("positive beta"),
        material: MaterialField::constant(albedo, 1.0, 0.0, false),
        radiance: RadianceField::black(),
        skeleton: single_bone(),
        light,
    }
}

pub fn figure_skeleton() -> Skeleton {
    Skeleton::new(
        vec![
            bone("spine", V3::new(0.0, 0.0, -0.4), V3::new(0.0, 0.0, 0.15), None),
            bone("head", V3::new(0.0, 0.0, 0.15), V3::new(0.0, 0.0, 0.6), Some(0)),
            bone("arm.l", V3::new(0.15, 0.0, 0.1), V3::new(0.65, 0.0, 0.1), Some(0)),
            bone("arm.r", V3::new(-0.15, 0.0, 0.1), V3::new(-0.65, 0.0, 0.1), Some(0)),
        ],
        SKIN_TAU,
    )
    .expect("valid skeleton")
}

/// Capsule figure matching [`figure_skeleton`].
pub fn figure_sdf() -> SdfNode {
    let cap = |a: [f64; 3], b: [f64; 3], radius: f64| SdfNode::Capsule {
        a: Vec3::from_array(a),
        b: Vec3::from_array(b),
        radius,
    };
    SdfNode::SmoothUnion {
        children: vec![
            cap([0.0, 0.0, -0.35], [0.0, 0.0, 0.1], 0.2),
            cap([0.0, 0.0, 0.4], [0.0, 0.0, 0.48], 0.13),
            cap([0.22, 0.0, 0.1], [0.6, 0.0, 0.1], 0.07),
            cap([-0.22, 0.0, 0.1], [-0.6, 0.0, 0.1], 0.07),
        ],
        k: 0.06,
    }
}

/// Capsules around every bone, a generic starting shape.
pub fn skeleton_template(skel: &Skeleton, radius: f64) -> SdfNode {
    SdfNode::SmoothUnion {
        children: skel
            .bones
            .iter()
            .map(|b| SdfNode::Capsule {
                a: b.head,
                b: b.tail,
                radius,
            })
            .collect(),
        k: 0.05,
    }
}

/// Two-tone Lambertian material split smoothly at `z = 0.05`.
pub fn figure_material() -> MaterialField {
    let raw = |c: Rgb| c.iter().map(|&v| Squash::Sigmoid.inverse(v)).collect();
    MaterialField {
        albedo: Source::HalfSpace {
            normal: Vec3::Z,
            offset: 0.05,
            sharpness: 25.0,
            below: raw(ALBEDO_BELOW),
            above: raw(ALBEDO_ABOVE),
        },
        roughness: Source::Constant(vec![Squash::Sigmoid.inverse(0.99)]),
        metallic: Source::Constant(vec![Squash::Sigmoid.inverse(0.01)]),
        calibrate: false,
    }
}

/// 64-lobe sky: bright and slightly warm from above, dim from below.
pub fn figure_light() -> SgMixture {
    let axes = fibonacci_sphere(SgMixture::LOBES);
    let amplitude = axes
        .iter()
        .map(|p| {
            let up = 0.5 * (p.z + 1.0);
            let side = 0.5 * (p.x + 1.0);
            [
                0.08 + 0.32 * up * up + 0.1 * side,
                0.08 + 0.3 * up * up,
                0.1 + 0.26 * up * up + 0.08 * (1.0 - side),
            ]
        })
        .collect();
    SgMixture {
        sharpness: vec![6.0; axes.len()],
        axes,
        amplitude,
    }
}

pub fn figure_model(beta: f64) -> Model {
    Model {
        sdf: SdfField::Analytic(figure_sdf()),
        density: DensityModel::new(beta).expect("positive beta"),
        material: figure_material(),
        radiance: RadianceField::black(),
        skeleton: figure_skeleton(),
        light: Light::Sg(figure_light()),
    }
}

/// Arms lowered by `angle` radians from the horizontal rest pose.
pub fn figure_pose(skel: &Skeleton, angle: f64) -> Pose {
    let rots = [
        Mat3::IDENTITY,
        Mat3::IDENTITY,
        Mat3::rotation(Vec3::Y, angle),
        Mat3::rotation(Vec3::Y, -angle),
    ];
    Pose::from_joint_rotations(skel, &rots, Vec3::ZERO).expect("rigid pose")
}

/// One training view: a camera and the pose seen by it.
#[derive(Clone, Debug)]
pub struct ToyView {
    pub camera: Camera,
    pub pose: Pose,
}

/// `n` cameras on a ring around the figure, each with a slightly different pose.
pub fn toy_views(skel: &Skeleton, n: usize, size: usize) -> Vec<ToyView> {
    (0..n)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / n as f64 + 0.3;
            let elev: f64 = if i % 2 == 0 { 0.15 } else { 0.45 };
            let r = 2.4;
            let eye = V3::new(r * phi.cos() * elev.cos(), r * phi.sin() * elev.cos(), r * elev.sin() + 0.05);
            ToyView {
                camera: Camera::look_at(size, size, 0.75, eye, V3::new(0.0, 0.0, 0.05), Vec3::Z),
                pose: figure_pose(skel, 0.25 + 0.15 * (1.3 * i as f64).sin()),
            }
        })
        .collect()
}

/// Canonical box of the trainable figure grids.
pub fn figure_bounds() -> Aabb {
    Aabb::new(V3::new(-0.8, -0.35, -0.65), V3::new(0.8, 0.35, 0.85))
}

/// Grid resolution with roughly `spacing` between vertices over `bounds`.
pub fn grid_res(bounds: &Aabb, spacing: f64) -> [usize; 3] {
    let e = bounds.extent();
    [0, 1, 2].map(|i| ((e[i] / spacing).round() as usize + 1).max(2))
}

/// Training start: template capsules baked to a grid, grey albedo, rough
/// dielectric, no emission, and the given light.
pub fn initial_figure_model(sdf_spacing: f64, material_spacing: f64, light: Light) -> Result<Model> {
    let skeleton = figure_skeleton();
    let b = figure_bounds();
    let sdf = SdfField::bake(&skeleton_template(&skeleton, 0.12), grid_res(&b, sdf_spacing), b)?;
    let mres = grid_res(&b, material_spacing);
    let grid = |values: &[f64]| VoxelGrid::filled(mres, b, values).map(Source::Grid);
    Ok(Model {
        sdf,
        density: DensityModel::default(),
        material: MaterialField {
            albedo: grid(&[0.0; 3])?,
            roughness: grid(&[Squash::Sigmoid.inverse(0.9)])?,
            metallic: grid(&[Squash::Sigmoid.inverse(0.02)])?,
            calibrate: false,
        },
        radiance: RadianceField {
            emission: grid(&[Squash::Softplus.inverse(0.1); 3])?,
        },
        skeleton,
        light,
    })
}

/// Ground truth of one toy view.
#[derive(Clone, Debug)]
pub struct ToyRender {
    pub frame: Frame,
    pub albedo: Image,
    pub normal: Image,
}

/// Renders the training image, alpha mask, albedo and normals of each view.
pub fn render_views(model: &Model, views: &[ToyView], cfg: &RenderConfig) -> Result<Vec<ToyRender>> {
    views
        .iter()
        .map(|v| {
            let posed = Posed::new(model, &v.pose, None, cfg.bbox_padding);
            let pbr = render_image(&posed, &v.camera, cfg, Mode::Pbr)?;
            let albedo = render_image(&posed, &v.camera, cfg, Mode::Albedo)?;
            let normal = render_image(&posed, &v.camera, cfg, Mode::Normal)?;
            Ok(ToyRender {
                frame: Frame {
                    image: pbr.image,
                    mask: pbr.alpha,
                    pose: v.pose.clone(),
                    camera: v.camera.clone(),
                },
                albedo: albedo.image,
                normal: normal.image,
            })
        })
        .collect()
}

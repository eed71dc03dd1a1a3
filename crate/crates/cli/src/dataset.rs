//! Synthetic capsule-figure dataset: reference scene, rendered frames,
//! reference albedo and normals, and a scene to train from.

use std::path::{Path, PathBuf};

use scatter_avatar::io::{read_pfm, write_json, PoseFile, SgFile};
use scatter_avatar::optim::{Frame, LossWeights, TrainConfig};
use scatter_avatar::render::{Mode, RenderConfig};
use scatter_avatar::scene::{write_frames, GeometrySpec, LightSpec, MaterialSpec, Scene, SceneConfig, SourceSpec, SCENE_VERSION};
use scatter_avatar::toy;
use scatter_avatar::Result;

use crate::{create_dir, render_to, usage, View};

pub const GT_BETA: f64 = 0.01;
pub const SDF_SPACING: f64 = 0.03;
pub const MATERIAL_SPACING: f64 = 0.05;
pub const TEMPLATE_RADIUS: f64 = 0.12;
pub const GRID_LAPLACIAN: f64 = 1.0;
pub const BATCH_RAYS: usize = 256;

/// Paths of a written toy dataset.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub root: PathBuf,
    /// Scene to train from.
    pub scene: PathBuf,
    /// Scene that generated the frames.
    pub gt_scene: PathBuf,
    pub frames: PathBuf,
    /// `albedo_<id>`, `normal_<id>`, `mask_<id>` and `pbr_<id>` references.
    pub gt: PathBuf,
}

fn base_config(geometry: GeometrySpec, beta: f64, material: MaterialSpec) -> SceneConfig {
    SceneConfig {
        version: SCENE_VERSION,
        geometry,
        beta,
        material,
        radiance: None,
        skeleton: Some("skeleton.json".into()),
        pose: Some("pose.json".into()),
        light: LightSpec::Sg { file: "light.json".into() },
        camera: Some("camera.json".into()),
        render: RenderConfig::default(),
        train: TrainConfig::default(),
        frames: None,
    }
}

fn gt_config() -> SceneConfig {
    let material = MaterialSpec {
        albedo: SourceSpec::HalfSpace {
            normal: scatter_avatar::linalg::Vec3::Z,
            offset: 0.05,
            sharpness: 25.0,
            below: toy::ALBEDO_BELOW.to_vec(),
            above: toy::ALBEDO_ABOVE.to_vec(),
        },
        roughness: SourceSpec::Constant { value: vec![0.99] },
        metallic: SourceSpec::Constant { value: vec![0.01] },
        calibrate: false,
    };
    base_config(GeometrySpec::Analytic { node: toy::figure_sdf() }, GT_BETA, material)
}

fn train_config() -> SceneConfig {
    let bounds = toy::figure_bounds();
    let fill = |value: Vec<f64>| SourceSpec::Fill {
        value,
        bounds,
        spacing: MATERIAL_SPACING,
    };
    let material = MaterialSpec {
        albedo: fill(vec![0.5; 3]),
        roughness: fill(vec![0.9]),
        metallic: fill(vec![0.02]),
        calibrate: false,
    };
    let geometry = GeometrySpec::Template {
        radius: TEMPLATE_RADIUS,
        bounds,
        spacing: SDF_SPACING,
    };
    let mut cfg = base_config(geometry, scatter_avatar::fields::DensityModel::INITIAL_BETA, material);
    cfg.radiance = Some(fill(vec![0.1; 3]));
    cfg.frames = Some("frames".into());
    cfg.train = TrainConfig {
        batch_rays: BATCH_RAYS,
        frozen: vec!["sg_amplitude".into(), "sg_sharpness".into()],
        weights: LossWeights {
            grid_laplacian: GRID_LAPLACIAN,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    cfg
}

/// Renders `views` reference views of `size`² pixels into `out`.
pub fn make_toy(out: &Path, views: usize, size: usize) -> Result<ToyDataset> {
    if views == 0 {
        return Err(usage("--views", "must be at least 1"));
    }
    if size < 11 {
        return Err(usage("--size", "must be at least 11"));
    }
    let ds = ToyDataset {
        root: out.to_path_buf(),
        scene: out.join("scene.json"),
        gt_scene: out.join("gt_scene.json"),
        frames: out.join("frames"),
        gt: out.join("gt"),
    };
    create_dir(&ds.gt)?;
    let skeleton = toy::figure_skeleton();
    let toy_views = toy::toy_views(&skeleton, views, size);
    write_json(&out.join("skeleton.json"), &skeleton)?;
    write_json(&out.join("light.json"), &SgFile::from_mixture(&toy::figure_light()))?;
    write_json(&out.join("pose.json"), &PoseFile::from_pose(&toy_views[0].pose))?;
    write_json(&out.join("camera.json"), &toy_views[0].camera)?;
    write_json(&ds.gt_scene, &gt_config())?;
    write_json(&ds.scene, &train_config())?;

    let gt = Scene::load(&ds.gt_scene)?;
    let render_views: Vec<View> = toy_views
        .iter()
        .enumerate()
        .map(|(i, v)| View {
            pose: v.pose.clone(),
            camera: v.camera.clone(),
            suffix: format!("_{i:03}"),
        })
        .collect();
    render_to(
        &gt.model,
        &gt.config.render,
        &render_views,
        &[Mode::Pbr, Mode::Albedo, Mode::Normal],
        &ds.gt,
    )?;
    let frames = render_views
        .iter()
        .map(|v| {
            let alpha = ds.gt.join(format!("alpha{}.pfm", v.suffix));
            let mask = read_pfm(&alpha)?;
            std::fs::rename(&alpha, ds.gt.join(format!("mask{}.pfm", v.suffix))).map_err(|e| crate::io_err(&alpha, e))?;
            Ok(Frame {
                image: read_pfm(&ds.gt.join(format!("pbr{}.pfm", v.suffix)))?,
                mask,
                pose: v.pose.clone(),
                camera: v.camera.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_frames(&ds.frames, &frames)?;
    Ok(ds)
}

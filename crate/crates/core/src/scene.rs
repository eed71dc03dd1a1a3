//! Scene files: a versioned JSON description of fields, skeleton, pose,
//! light, camera and settings. Relative paths resolve against the directory
//! of the scene file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::articulation::{Pose, Skeleton};
use crate::camera::Camera;
use crate::fields::{DensityModel, MaterialField, RadianceField, SdfField, SdfNode, Source, Squash, VoxelGrid};
use crate::io::{parse_json, read_envmap, read_grid, read_image, read_json, write_json, write_pfm, PoseFile, SgFile};
use crate::linalg::{Aabb, Vec3};
use crate::model::Model;
use crate::optim::{Frame, TrainConfig};
use crate::raster::Image;
use crate::render::RenderConfig;
use crate::shading::{EnvMap, Light};
use crate::{Error, Result};

pub const SCENE_VERSION: u32 = 1;
pub const FRAMES_FILE: &str = "frames.json";

fn default_beta() -> f64 {
    DensityModel::INITIAL_BETA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub version: u32,
    pub geometry: GeometrySpec,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub material: MaterialSpec,
    /// Emission of the radiance field; black when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radiance: Option<SourceSpec>,
    /// Skeleton file; a single vertical bone when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<PathBuf>,
    /// Pose file; the rest pose when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PathBuf>,
    pub light: LightSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<PathBuf>,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Directory holding a frame manifest, for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<PathBuf>,
}

/// Canonical signed distance field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySpec {
    Empty,
    Analytic { node: SdfNode },
    /// A primitive tree sampled onto a trainable grid.
    Bake { node: SdfNode, bounds: Aabb, spacing: f64 },
    /// Capsules of `radius` around every bone, sampled onto a trainable grid.
    Template { radius: f64, bounds: Aabb, spacing: f64 },
    Grid { file: PathBuf },
}

/// A field source. Values are in output units; grid files hold raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Constant {
        value: Vec<f64>,
    },
    HalfSpace {
        normal: Vec3,
        offset: f64,
        sharpness: f64,
        below: Vec<f64>,
        above: Vec<f64>,
    },
    /// Trainable grid filled with one value.
    Fill {
        value: Vec<f64>,
        bounds: Aabb,
        spacing: f64,
    },
    Grid {
        file: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialSpec {
    pub albedo: SourceSpec,
    pub roughness: SourceSpec,
    pub metallic: SourceSpec,
    /// Map albedo into the calibrated range instead of `(0, 1)`.
    pub calibrate: bool,
}

impl Default for MaterialSpec {
    fn default() -> Self {
        MaterialSpec {
            albedo: SourceSpec::Constant { value: vec![0.5; 3] },
            roughness: SourceSpec::Constant { value: vec![0.5] },
            metallic: SourceSpec::Constant { value: vec![0.0] },
            calibrate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LightSpec {
    /// Spherical-Gaussian mixture file.
    Sg { file: PathBuf },
    /// Equirectangular PFM environment map.
    Envmap { file: PathBuf },
    Constant { radiance: [f64; 3] },
}

/// A loaded scene, ready to render or train.
#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    pub model: Model,
    pub pose: Pose,
    pub camera: Option<Camera>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

fn nested(prefix: &str, e: Error) -> Error {
    match e {
        Error::Schema { path, message } => Error::Schema {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

fn grid_res(path: &str, bounds: &Aabb, spacing: f64) -> Result<[usize; 3]> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::schema(format!("{path}.spacing"), "must be positive"));
    }
    if bounds.is_empty() || !(bounds.extent().min_elem() > 0.0) {
        return Err(Error::schema(format!("{path}.bounds"), "must have positive extent"));
    }
    let res = crate::toy::grid_res(bounds, spacing);
    if res.iter().product::<usize>() > 1 << 24 {
        return Err(Error::schema(format!("{path}.spacing"), "grid would exceed 2^24 vertices"));
    }
    Ok(res)
}

/// Maps a field's output values to raw parameters.
fn to_raw(path: &str, values: &[f64], channels: usize, squash: Squash, trainable: bool) -> Result<Vec<f64>> {
    if values.len() != channels {
        return Err(Error::schema(path, format!("expected {channels} values, got {}", values.len())));
    }
    values
        .iter()
        .map(|&v| {
            let (lo, hi) = squash.range();
            let inside = if trainable { v > lo && v < hi } else { v >= lo && v <= hi };
            if inside && v.is_finite() {
                Ok(squash.inverse(v))
            } else {
                let bounds = if trainable { "strictly inside" } else { "within" };
                Err(Error::schema(path, format!("value {v} must be {bounds} [{lo}, {hi}]")))
            }
        })
        .collect()
}

fn build_source(path: &str, spec: &SourceSpec, channels: usize, squash: Squash, root: &Path) -> Result<Source> {
    Ok(match spec {
        SourceSpec::Constant { value } => Source::Constant(to_raw(&format!("{path}.value"), value, channels, squash, false)?),
        SourceSpec::HalfSpace {
            normal,
            offset,
            sharpness,
            below,
            above,
        } => {
            if !(normal.norm() > 0.0) {
                return Err(Error::schema(format!("{path}.normal"), "must be nonzero"));
            }
            Source::HalfSpace {
                normal: normal.normalize(),
                offset: *offset,
                sharpness: *sharpness,
                below: to_raw(&format!("{path}.below"), below, channels, squash, false)?,
                above: to_raw(&format!("{path}.above"), above, channels, squash, false)?,
            }
        }
        SourceSpec::Fill { value, bounds, spacing } => {
            let res = grid_res(path, bounds, *spacing)?;
            let raw = to_raw(&format!("{path}.value"), value, channels, squash, true)?;
            Source::Grid(VoxelGrid::filled(res, *bounds, &raw)?)
        }
        SourceSpec::Grid { file } => {
            let g = read_grid(&root.join(file))?;
            if g.channels != channels {
                return Err(Error::schema(
                    format!("{path}.file"),
                    format!("grid has {} channels, expected {channels}", g.channels),
                ));
            }
            Source::Grid(g)
        }
    })
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_json(text, "scene")
    }

    /// Resolves files and builds the model.
    pub fn build(self, root: &Path) -> Result<Scene> {
        if self.version != SCENE_VERSION {
            return Err(Error::schema(
                "scene.version",
                format!("unsupported version {}, expected {SCENE_VERSION}", self.version),
            ));
        }
        self.render.validate().map_err(|e| nested("scene", e))?;
        self.train.validate().map_err(|e| nested("scene", e))?;
        let density = DensityModel::new(self.beta).map_err(|_| Error::schema("scene.beta", "must be positive"))?;

        let skeleton = match &self.skeleton {
            Some(f) => {
                let s: Skeleton = read_json(&root.join(f))?;
                s.validate().map_err(|e| nested("scene.skeleton", e))?;
                s
            }
            None => crate::toy::single_bone(),
        };
        let pose = match &self.pose {
            Some(f) => {
                let p: PoseFile = read_json(&root.join(f))?;
                let pose = p.to_pose().map_err(|e| nested("scene.pose", e))?;
                pose.check(&skeleton).map_err(|e| nested("scene.pose", e))?;
                pose
            }
            None => Pose::identity(skeleton.len()),
        };
        let sdf = match &self.geometry {
            GeometrySpec::Empty => SdfField::Empty,
            GeometrySpec::Analytic { node } => SdfField::Analytic(node.clone()),
            GeometrySpec::Bake { node, bounds, spacing } => {
                SdfField::bake(node, grid_res("scene.geometry", bounds, *spacing)?, *bounds)?
            }
            GeometrySpec::Template { radius, bounds, spacing } => {
                if !(*radius > 0.0) {
                    return Err(Error::schema("scene.geometry.radius", "must be positive"));
                }
                let node = crate::toy::skeleton_template(&skeleton, *radius);
                SdfField::bake(&node, grid_res("scene.geometry", bounds, *spacing)?, *bounds)?
            }
            GeometrySpec::Grid { file } => {
                let g = read_grid(&root.join(file))?;
                if g.channels != 1 {
                    return Err(Error::schema("scene.geometry.file", "SDF grid must have one channel"));
                }
                SdfField::Grid(g)
            }
        };
        let m = &self.material;
        let albedo_squash = if m.calibrate { Squash::Calibrated } else { Squash::Sigmoid };
        let material = MaterialField {
            albedo: build_source("scene.material.albedo", &m.albedo, 3, albedo_squash, root)?,
            roughness: build_source("scene.material.roughness", &m.roughness, 1, Squash::Sigmoid, root)?,
            metallic: build_source("scene.material.metallic", &m.metallic, 1, Squash::Sigmoid, root)?,
            calibrate: m.calibrate,
        };
        let radiance = match &self.radiance {
            Some(s) => RadianceField {
                emission: build_source("scene.radiance", s, 3, Squash::Softplus, root)?,
            },
            None => RadianceField::black(),
        };
        let light = match &self.light {
            LightSpec::Sg { file } => {
                let f: SgFile = read_json(&root.join(file))?;
                Light::Sg(f.to_mixture().map_err(|e| nested("scene.light", e))?)
            }
            LightSpec::Envmap { file } => Light::Map(read_envmap(&root.join(file))?),
            LightSpec::Constant { radiance } => {
                if radiance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::schema("scene.light.radiance", "must be finite and nonnegative"));
                }
                Light::Constant(*radiance)
            }
        };
        let camera = match &self.camera {
            Some(f) => {
                let c: Camera = read_json(&root.join(f))?;
                c.validate().map_err(|e| nested("scene", e))?;
                Some(c)
            }
            None => None,
        };
        Ok(Scene {
            model: Model {
                sdf,
                density,
                material,
                radiance,
                skeleton,
                light,
            },
            pose,
            camera,
            root: root.to_path_buf(),
            config: self,
        })
    }
}

impl Scene {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from_io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(""));
        SceneConfig::parse(&text)?.build(root)
    }

    pub fn frames_dir(&self) -> Option<PathBuf> {
        self.config.frames.as_ref().map(|f| self.root.join(f))
    }
}

/// Files of one training frame, relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub pose: PathBuf,
    pub camera: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameManifest {
    pub frames: Vec<FrameEntry>,
}

fn single_channel(img: Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img),
        _ => Ok(img.channel(0)),
    }
}

pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let manifest: FrameManifest = read_json(&dir.join(FRAMES_FILE))?;
    if manifest.frames.is_empty() {
        return Err(Error::schema("frames.json.frames", "needs at least one frame"));
    }
    manifest
        .frames
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let pose: PoseFile = read_json(&dir.join(&e.pose))?;
            let camera: Camera = read_json(&dir.join(&e.camera))?;
            let image = read_image(&dir.join(&e.image))?;
            let image = if image.channels == 3 {
                image
            } else {
                return Err(Error::schema(format!("frames.json.frames[{i}].image"), "must be RGB"));
            };
            let frame = Frame {
                image,
                mask: single_channel(read_image(&dir.join(&e.mask))?)?,
                pose: pose.to_pose().map_err(|e| nested(&format!("frames.json.frames[{i}].pose"), e))?,
                camera,
            };
            frame.validate(i)?;
            Ok(frame)
        })
        .collect()
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let sub = PathBuf::from(format!("{i:03}"));
        let e = FrameEntry {
            image: sub.join("image.pfm"),
            mask: sub.join("mask.pfm"),
            pose: sub.join("pose.json"),
            camera: sub.join("camera.json"),
        };
        write_pfm(&dir.join(&e.image), &f.image)?;
        write_pfm(&dir.join(&e.mask), &f.mask)?;
        write_json(&dir.join(&e.pose), &PoseFile::from_pose(&f.pose))?;
        write_json(&dir.join(&e.camera), &f.camera)?;
        entries.push(e);
    }
    write_json(&dir.join(FRAMES_FILE), &FrameManifest { frames: entries })
}

/// Writes an environment map and returns the light spec that refers to it.
pub fn envmap_spec(dir: &Path, name: &str, map: &EnvMap) -> Result<LightSpec> {
    crate::io::write_envmap(&dir.join(name), map)?;
    Ok(LightSpec::Envmap { file: name.into() })
}

//! Browser bindings: small single-threaded renders and BRDF slices.

use scatter_avatar::articulation::Pose;
use scatter_avatar::camera::Camera;
use scatter_avatar::io::{png_bytes, PngEncoding};
use scatter_avatar::linalg::{V3, Vec3};
use scatter_avatar::render::{render_image, Mode, Posed, RenderConfig, Rendered};
use scatter_avatar::shading::{brdf_eval, Light, SgMixture};
use scatter_avatar::{fields::MaterialField, model::Model, toy};
use wasm_bindgen::prelude::*;

fn preview_config(directions: usize) -> RenderConfig {
    RenderConfig {
        uniform_samples: 48,
        importance_rounds: vec![16],
        scatter_points: 4,
        directions: directions.max(4),
        relight_directions: directions.max(4),
        secondary_samples: 24,
        secondary_importance: 2,
        occupancy_res: 24,
        ..RenderConfig::default()
    }
}

/// One bright lobe toward (azimuth, elevation) over a dim uniform sky.
fn key_light(azimuth: f64, elevation: f64) -> Light {
    let mut sky = SgMixture::uniform(8, 0.0, [0.0; 3]);
    sky.amplitude[0] = [0.15; 3];
    sky.axes.push(V3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ));
    sky.sharpness.push(12.0);
    sky.amplitude.push([3.0, 2.8, 2.5]);
    Light::Sg(sky)
}

fn orbit_camera(size: usize, azimuth: f64, distance: f64, fov: f64) -> Camera {
    let eye = V3::new(distance * azimuth.cos(), distance * azimuth.sin(), 0.5);
    Camera::look_at(size, size, fov, eye, V3::new(0.0, 0.0, 0.05), Vec3::Z)
}

/// Row-major RGBA8 pixels.
fn rgba(r: &Rendered, enc: PngEncoding) -> Vec<u8> {
    let rgb = png_bytes(&r.image, Some(&r.alpha), enc);
    rgb.chunks(3)
        .zip(r.alpha.data.iter())
        .flat_map(|(p, a)| [p[0], p[1], p[2], (a.clamp(0.0, 1.0) * 255.0).round() as u8])
        .collect()
}

fn js(e: scatter_avatar::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Physically based render of a sphere with the given material under a key
/// light, as `size × size` RGBA8.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn render_sphere(
    size: usize,
    red: f64,
    green: f64,
    blue: f64,
    roughness: f64,
    metallic: f64,
    light_azimuth: f64,
    light_elevation: f64,
) -> Result<Vec<u8>, JsError> {
    let mut model = toy::sphere_model(0.5, [red, green, blue], 0.01, key_light(light_azimuth, light_elevation));
    model.material = MaterialField::constant([red, green, blue], roughness.clamp(0.0, 1.0), metallic.clamp(0.0, 1.0), false);
    let pose = Pose::identity(model.skeleton.len());
    let cfg = preview_config(64);
    let posed = Posed::new(&model, &pose, None, cfg.bbox_padding);
    let camera = orbit_camera(size, -std::f64::consts::FRAC_PI_2, 2.6, 0.5);
    let out = render_image(&posed, &camera, &cfg, Mode::Pbr).map_err(js)?;
    Ok(rgba(&out, PngEncoding::Display))
}

/// The articulated capsule figure with arms lowered by `arm_angle`, seen
/// from `view_azimuth`, in one of the render modes.
#[wasm_bindgen]
pub fn render_figure(size: usize, arm_angle: f64, view_azimuth: f64, mode: &str) -> Result<Vec<u8>, JsError> {
    let mode: Mode = mode.parse().map_err(js)?;
    let model: Model = toy::figure_model(0.01);
    let pose = toy::figure_pose(&model.skeleton, arm_angle);
    let cfg = preview_config(16);
    let occupancy = model.build_occupancy(&pose, 0, cfg.occupancy_res, cfg.bbox_padding);
    let posed = Posed::new(&model, &pose, occupancy.as_ref(), cfg.bbox_padding);
    let camera = orbit_camera(size, view_azimuth, 2.6, 0.75);
    let out = render_image(&posed, &camera, &cfg, mode).map_err(js)?;
    let out = if out.image.channels == 1 {
        let data = out.image.data.iter().flat_map(|v| [*v; 3]).collect();
        Rendered {
            image: scatter_avatar::raster::Image::from_data(size, size, 3, data).map_err(js)?,
            alpha: out.alpha,
        }
    } else {
        out
    };
    let enc = match mode {
        Mode::Normal => PngEncoding::Signed,
        Mode::Rf | Mode::Pbr | Mode::Relight => PngEncoding::Display,
        _ => PngEncoding::Linear,
    };
    Ok(rgba(&out, enc))
}

/// Reflectance times cosine for incident directions swept across the plane
/// of incidence, `samples` values from grazing on the far side to grazing on
/// the mirror side, for a white surface.
#[wasm_bindgen]
pub fn brdf_slice(roughness: f64, metallic: f64, view_degrees: f64, samples: usize) -> Vec<f64> {
    let t = view_degrees.to_radians();
    let wo = V3::new(-t.sin(), 0.0, t.cos());
    let n = samples.max(2);
    (0..n)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / (n - 1) as f64;
            let wi = V3::new(a.sin(), 0.0, a.cos());
            brdf_eval(wo, wi, Vec3::Z, [1.0; 3], roughness, metallic)[0]
        })
        .collect()
}

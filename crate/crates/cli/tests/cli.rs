use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scatter_avatar::articulation::Pose;
use scatter_avatar::camera::Camera;
use scatter_avatar::io::{read_pfm, write_envmap, write_json, write_pfm, PoseFile};
use scatter_avatar::linalg::{Affine, Mat3, V3, Vec3};
use scatter_avatar::optim::{load_checkpoint, Frame};
use scatter_avatar::raster::Image;
use scatter_avatar::scene::{write_frames, Scene};
use scatter_avatar::shading::EnvMap;
use serde_json::{json, Value};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scatter-avatar"))
        .args(args)
        .env_remove("SCATTER_AVATAR_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cheap_render() -> Value {
    json!({
        "uniform_samples": 32,
        "importance_rounds": [8],
        "scatter_points": 4,
        "directions": 16,
        "relight_directions": 64,
        "secondary_samples": 16,
        "secondary_importance": 2,
        "occupancy_res": 16
    })
}

fn camera(size: usize) -> Camera {
    Camera::look_at(size, size, 0.8, V3::new(0.0, -2.5, 0.2), Vec3::ZERO, Vec3::Z)
}

/// Writes `scene.json` and `camera.json` into `dir` and returns the scene path.
fn write_scene(dir: &Path, scene: Value) -> PathBuf {
    write_json(&dir.join("camera.json"), &camera(12)).unwrap();
    let path = dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(&scene).unwrap()).unwrap();
    path
}

fn sphere_scene(dir: &Path) -> PathBuf {
    write_scene(
        dir,
        json!({
            "version": 1,
            "geometry": {"type": "analytic", "node": {"type": "sphere", "center": [0, 0, 0], "radius": 0.5}},
            "beta": 0.02,
            "material": {
                "albedo": {"type": "constant", "value": [0.5, 0.5, 0.5]},
                "roughness": {"type": "constant", "value": [0.99]},
                "metallic": {"type": "constant", "value": [0.0]}
            },
            "light": {"type": "constant", "radiance": [1, 1, 1]},
            "camera": "camera.json",
            "render": cheap_render()
        }),
    )
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sphere_scene(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["render", "--scene", s(&scene), "--mode", "avmap", "--seed", "7", "--out", s(&a)]);
    ok(&["render", "--scene", s(&scene), "--mode", "avmap", "--seed", "7", "--out", s(&b)]);
    assert_eq!(bytes(&a.join("avmap.pfm")), bytes(&b.join("avmap.pfm")));
    assert!(a.join("avmap.png").exists());
    assert!(a.join("alpha.pfm").exists());
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sphere_scene(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["render", "--scene", s(&scene), "--mode", "pbr,normal", "--threads", "1", "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_scatter-avatar"))
        .args(["render", "--scene", s(&scene), "--mode", "pbr,normal", "--out", s(&b)])
        .env("SCATTER_AVATAR_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["pbr.pfm", "normal.pfm", "alpha.pfm"] {
        assert_eq!(bytes(&a.join(f)), bytes(&b.join(f)), "{f}");
    }
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sphere_scene(dir.path());
    let out = cli(&["render", "--scene", s(&scene), "--mode", "sparkle", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--mode"), "{}", stderr(&out));
}

#[test]
fn empty_scene_has_zero_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(
        dir.path(),
        json!({
            "version": 1,
            "geometry": {"type": "empty"},
            "light": {"type": "constant", "radiance": [1, 1, 1]},
            "camera": "camera.json",
            "render": cheap_render()
        }),
    );
    let out = dir.path().join("out");
    ok(&["render", "--scene", s(&scene), "--mode", "pbr", "--out", s(&out)]);
    let alpha = read_pfm(&out.join("alpha.pfm")).unwrap();
    assert_eq!((alpha.width, alpha.height), (12, 12));
    assert!(alpha.data.iter().all(|&a| a == 0.0));
    assert!(read_pfm(&out.join("pbr.pfm")).unwrap().data.iter().all(|&v| v == 0.0));
}

fn scene_error(scene: Value) -> Output {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(dir.path(), scene);
    cli(&["render", "--scene", s(&path), "--mode", "rf", "--out", s(&dir.path().join("o"))])
}

#[test]
fn malformed_scenes_exit_2_with_field_path() {
    let base = || {
        json!({
            "version": 1,
            "geometry": {"type": "empty"},
            "light": {"type": "constant", "radiance": [1, 1, 1]},
            "camera": "camera.json"
        })
    };
    let cases: Vec<(Value, &str)> = vec![
        ({ let mut v = base(); v["version"] = json!(3); v }, "scene.version"),
        ({ let mut v = base(); v["beta"] = json!("wide"); v }, "scene.beta"),
        ({ let mut v = base(); v["render"] = json!({"directions": 0}); v }, "scene.render.directions"),
        ({ let mut v = base(); v["render"] = json!({"lobes": "shiny"}); v }, "scene.render.lobes"),
        ({ let mut v = base(); v["train"] = json!({"batch_rays": 0}); v }, "scene.train.batch_rays"),
        ({ let mut v = base(); v["train"] = json!({"frozen": ["nope"]}); v }, "scene.train.frozen"),
        ({ let mut v = base(); v["geometry"] = json!({"type": "blob"}); v }, "scene.geometry"),
        ({ let mut v = base(); v["light"]["radiance"] = json!([1, -1, 1]); v }, "scene.light.radiance"),
        (
            { let mut v = base(); v["material"] = json!({"albedo": {"type": "constant", "value": [2, 0, 0]}}); v },
            "scene.material.albedo.value",
        ),
    ];
    for (scene, path) in cases {
        let out = scene_error(scene);
        assert_eq!(out.status.code(), Some(2), "{path}: {}", stderr(&out));
        assert!(stderr(&out).contains(path), "{path}: {}", stderr(&out));
    }
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["render", "--scene", s(&dir.path().join("nope.json")), "--mode", "rf", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let scene = sphere_scene(dir.path());
    let text = fs::read_to_string(&scene).unwrap().replace("camera.json", "gone.json");
    fs::write(&scene, text).unwrap();
    let out = cli(&["render", "--scene", s(&scene), "--mode", "rf", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("gone.json"));
}

fn mean_center(img: &Image, half: usize) -> f64 {
    let (cx, cy) = (img.width / 2, img.height / 2);
    let mut sum = 0.0;
    let mut n = 0;
    for y in cy - half..cy + half {
        for x in cx - half..cx + half {
            sum += img.get(x, y, 0) as f64;
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn relight_furnace_linearity_and_pose() {
    let dir = tempfile::tempdir().unwrap();
    let scene = sphere_scene(dir.path());
    let mut text: Value = serde_json::from_str(&fs::read_to_string(&scene).unwrap()).unwrap();
    text["render"]["lobes"] = json!("diffuse");
    text["render"]["relight_directions"] = json!(512);
    fs::write(&scene, text.to_string()).unwrap();
    write_envmap(&dir.path().join("white.pfm"), &EnvMap::constant(32, 16, [1.0; 3]).unwrap()).unwrap();
    let env = dir.path().join("white.pfm");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["relight", "--scene", s(&scene), "--envmap", s(&env), "--out", s(&a)]);
    ok(&["relight", "--scene", s(&scene), "--envmap", s(&env), "--scale", "2", "--out", s(&b)]);
    let ia = read_pfm(&a.join("relight.pfm")).unwrap();
    let ib = read_pfm(&b.join("relight.pfm")).unwrap();
    let center = mean_center(&ia, 2);
    assert!((center - 0.5).abs() < 0.05 * 0.5, "furnace value {center}");
    for (x, y) in ia.data.iter().zip(&ib.data) {
        assert!((2.0 * x - y).abs() <= 1e-5 * y.abs().max(1e-3), "{x} vs {y}");
    }

    let moved = Pose::new(vec![Affine::new(Mat3::IDENTITY, V3::new(0.3, 0.0, 0.0))]).unwrap();
    write_json(&dir.path().join("moved.json"), &PoseFile::from_pose(&moved)).unwrap();
    ok(&["relight", "--scene", s(&scene), "--envmap", s(&env), "--pose", s(&dir.path().join("moved.json")), "--out", s(&c)]);
    assert_ne!(read_pfm(&c.join("relight.pfm")).unwrap(), ia);
}

/// A trainable scene and two frames of a reference sphere.
fn training_scene(dir: &Path, nan: bool) -> PathBuf {
    let reference = sphere_scene(dir);
    let gt = Scene::load(&reference).unwrap();
    let cfg = gt.config.render.clone();
    let frames: Vec<Frame> = [0.0f64, 1.7]
        .iter()
        .map(|&phi| {
            let cam = Camera::look_at(12, 12, 0.8, V3::new(2.5 * phi.sin(), -2.5 * phi.cos(), 0.3), Vec3::ZERO, Vec3::Z);
            let pose = Pose::identity(1);
            let posed = scatter_avatar::render::Posed::new(&gt.model, &pose, None, cfg.bbox_padding);
            let r = scatter_avatar::render::render_image(&posed, &cam, &cfg, scatter_avatar::render::Mode::Pbr).unwrap();
            let mut image = r.image;
            if nan {
                image.data.fill(f32::NAN);
            }
            Frame {
                image,
                mask: r.alpha,
                pose,
                camera: cam,
            }
        })
        .collect();
    write_frames(&dir.join("frames"), &frames).unwrap();
    let bounds = json!({"min": [-0.8, -0.8, -0.8], "max": [0.8, 0.8, 0.8]});
    let fill = |v: Value| json!({"type": "fill", "value": v, "bounds": bounds, "spacing": 0.4});
    let path = dir.join("train.json");
    let scene = json!({
        "version": 1,
        "geometry": {"type": "bake", "node": {"type": "sphere", "center": [0, 0, 0], "radius": 0.4}, "bounds": bounds, "spacing": 0.2},
        "material": {"albedo": fill(json!([0.5, 0.5, 0.5])), "roughness": fill(json!([0.9])), "metallic": fill(json!([0.05]))},
        "radiance": fill(json!([0.1, 0.1, 0.1])),
        "light": {"type": "constant", "radiance": [1, 1, 1]},
        "camera": "camera.json",
        "frames": "frames",
        "render": cheap_render(),
        "train": {"iterations": 4, "batch_rays": 24, "rf_only_fraction": 0.5, "occupancy_every": 2}
    });
    fs::write(&path, scene.to_string()).unwrap();
    path
}

#[test]
fn zero_iterations_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let scene = training_scene(dir.path(), false);
    let out = dir.path().join("run");
    ok(&["optimize", "--scene", s(&scene), "--iters", "0", "--out", s(&out)]);
    let init = Scene::load(&scene).unwrap().model;
    let mut loaded = init.clone();
    for key in scatter_avatar::optim::TRAINABLE {
        if let Some(b) = loaded.block_mut(key) {
            b.iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    load_checkpoint(&out, &mut loaded).unwrap();
    assert_eq!(loaded, init);
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let scene = training_scene(dir.path(), false);
    let (full, half, rest) = (dir.path().join("full"), dir.path().join("half"), dir.path().join("rest"));
    ok(&["optimize", "--scene", s(&scene), "--seed", "5", "--out", s(&full)]);
    ok(&["optimize", "--scene", s(&scene), "--seed", "5", "--max-steps", "2", "--out", s(&half)]);
    ok(&["optimize", "--scene", s(&scene), "--seed", "5", "--resume", s(&half), "--out", s(&rest)]);
    for f in ["params.f64", "adam_m.f64", "adam_v.f64"] {
        assert_eq!(bytes(&full.join(f)), bytes(&rest.join(f)), "{f}");
    }
    let full_log = fs::read_to_string(full.join("log.csv")).unwrap();
    let half_log = fs::read_to_string(half.join("log.csv")).unwrap();
    let rest_log = fs::read_to_string(rest.join("log.csv")).unwrap();
    assert_eq!(full_log.lines().count(), 5);
    let joined: Vec<&str> = half_log.lines().chain(rest_log.lines().skip(1)).collect();
    assert_eq!(joined, full_log.lines().collect::<Vec<_>>());
}

#[test]
fn nan_aborts_with_exit_4_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let scene = training_scene(dir.path(), true);
    let out_dir = dir.path().join("run");
    let out = cli(&["optimize", "--scene", s(&scene), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let dump = out_dir.join("nan_dump.json");
    assert!(dump.exists());
    assert!(stderr(&out).contains("nan_dump.json"), "{}", stderr(&out));
}

fn write_eval_dir(dir: &Path, albedo_scale: f32, ids: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..ids {
        let mut albedo = Image::new(16, 16, 3);
        let mut normal = Image::new(16, 16, 3);
        let mut mask = Image::new(16, 16, 1);
        for p in 0..256 {
            let t = p as f32 / 256.0;
            albedo.pixel_mut(p).copy_from_slice(&[0.2 + 0.5 * t, 0.4, 0.6 - 0.3 * t].map(|v| v * albedo_scale));
            let n = V3::new(t as f64 - 0.5, -0.8, 0.3).normalize();
            normal.pixel_mut(p).copy_from_slice(&n.to_array().map(|v| v as f32));
            mask.data[p] = if p % 16 > 2 { 1.0 } else { 0.0 };
        }
        write_pfm(&dir.join(format!("albedo_{i:03}.pfm")), &albedo).unwrap();
        write_pfm(&dir.join(format!("normal_{i:03}.pfm")), &normal).unwrap();
        write_pfm(&dir.join(format!("mask_{i:03}.pfm")), &mask).unwrap();
    }
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn eval_identical_scaled_and_mismatched() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, same, half, short) = (
        dir.path().join("gt"),
        dir.path().join("same"),
        dir.path().join("half"),
        dir.path().join("short"),
    );
    write_eval_dir(&gt, 1.0, 3);
    write_eval_dir(&same, 1.0, 3);
    write_eval_dir(&half, 0.5, 3);
    write_eval_dir(&short, 1.0, 2);

    let out = dir.path().join("same.csv");
    ok(&["eval", "--pred", s(&same), "--gt", s(&gt), "--out", s(&out)]);
    let rows = csv(&out);
    assert_eq!(rows.len(), 3 + 1);
    assert_eq!(rows[3][0], "mean");
    for r in &rows {
        assert_eq!(r[4].parse::<f64>().unwrap(), 100.0);
        assert!((r[5].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
        assert!(r[6].parse::<f64>().unwrap().abs() < 1e-6);
    }

    let out = dir.path().join("half.csv");
    ok(&["eval", "--pred", s(&half), "--gt", s(&gt), "--out", s(&out)]);
    for r in csv(&out) {
        for c in 1..4 {
            assert!((r[c].parse::<f64>().unwrap() - 2.0).abs() < 1e-5, "{r:?}");
        }
    }

    let out = cli(&["eval", "--pred", s(&short), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn make_toy_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    ok(&["make-toy", "--out", s(&root), "--views", "2", "--size", "12"]);
    let scene = Scene::load(&root.join("scene.json")).unwrap();
    assert!(scene.frames_dir().unwrap().join("frames.json").exists());
    let frames = scatter_avatar::scene::load_frames(&root.join("frames")).unwrap();
    assert_eq!(frames.len(), 2);
    for i in 0..2 {
        for kind in ["albedo", "normal", "mask", "pbr"] {
            assert!(root.join("gt").join(format!("{kind}_{i:03}.pfm")).exists(), "{kind} {i}");
        }
    }
    assert!(frames[0].mask.data.iter().any(|&m| m > 0.5));
}

#[test]
fn published_schema_covers_the_scene_format() {
    let schema: Value =
        serde_json::from_str(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../schema/scene.schema.json")).unwrap())
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    ok(&["make-toy", "--out", s(&root), "--views", "1", "--size", "12"]);
    let validator = jsonschema::validator_for(&schema).unwrap();
    for name in ["scene.json", "gt_scene.json"] {
        let doc: Value = serde_json::from_str(&fs::read_to_string(root.join(name)).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
    }
    let bad = json!({"version": 1, "geometry": {"type": "empty"}, "light": {"type": "constant", "radiance": [1, 1, 1]}, "extra": 1});
    assert!(!validator.is_valid(&bad));
    let render_keys: Vec<String> = serde_json::to_value(scatter_avatar::render::RenderConfig::default())
        .unwrap()
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    for k in render_keys {
        assert!(schema["properties"]["render"]["properties"].get(&k).is_some(), "render.{k}");
    }
    let train = serde_json::to_value(scatter_avatar::optim::TrainConfig::default()).unwrap();
    for (k, v) in train.as_object().unwrap() {
        let node = &schema["properties"]["train"]["properties"][k];
        assert!(!node.is_null(), "train.{k}");
        if let Some(obj) = v.as_object() {
            for kk in obj.keys() {
                assert!(!node["properties"][kk].is_null(), "train.{k}.{kk}");
            }
        }
    }
}

//! File formats: PFM and PNG images, JSON documents, grid and checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::articulation::Pose;
use crate::fields::VoxelGrid;
use crate::linalg::{Aabb, Affine};
use crate::raster::{tonemap, to_u8, Image};
use crate::shading::{EnvMap, SgMixture};
use crate::{Error, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::from_io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from_io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::from_io(path, e))
}

/// Little-endian PFM, rows bottom to top; `PF` for RGB, `Pf` for one channel.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format {
        what: "PFM",
        message: m.into(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let channels = match fields[0] {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(bad(&format!("unknown tag `{t}`"))),
    };
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() < 4 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let row = width * channels;
    let mut data = vec![0.0f32; n];
    for (k, chunk) in body[..4 * n].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Image::from_data(width, height, channels, data)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&read_bytes(path)?)
}

/// How linear values become 8-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngEncoding {
    /// Clip and gamma 2.2, composited on black by `alpha`.
    Display,
    /// Clip only.
    Linear,
    /// Maps `[-1, 1]` to `[0, 1]`, for normals.
    Signed,
}

pub fn png_bytes(img: &Image, alpha: Option<&Image>, enc: PngEncoding) -> Vec<u8> {
    let n = img.pixel_count();
    let mut buf = Vec::with_capacity(n * 3);
    for i in 0..n {
        let a = alpha.map_or(1.0, |a| a.pixel(i)[0] as f64);
        for v in img.rgb(i) {
            let d = match enc {
                PngEncoding::Display => tonemap(v),
                PngEncoding::Linear => v.clamp(0.0, 1.0),
                PngEncoding::Signed => 0.5 * (v + 1.0) * a.clamp(0.0, 1.0),
            };
            buf.push(to_u8(d));
        }
    }
    buf
}

pub fn write_png(path: &Path, img: &Image, alpha: Option<&Image>, enc: PngEncoding) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from_io(dir, e))?;
    }
    let buf = png_bytes(img, alpha, enc);
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// An 8-bit PNG as RGB values in `[0, 1]`, without linearization.
pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::from_io(path, std::io::ErrorKind::NotFound.into()));
    }
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::from_data(w as usize, h as usize, 3, data)
}

/// PFM or PNG by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        Some("png") => read_png(path),
        _ => Err(Error::Format {
            what: "image",
            message: format!("`{}` is neither .pfm nor .png", path.display()),
        }),
    }
}

/// JSON with field-path error reporting.
pub fn parse_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." || path.is_empty() {
            context.to_string()
        } else {
            format!("{context}.{path}")
        };
        Error::Schema {
            path,
            message: e.into_inner().to_string(),
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::from_io(path, e))?;
    let context = path.file_name().map_or("document".into(), |f| f.to_string_lossy().into_owned());
    parse_json(&text, &context)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "JSON",
        message: e.to_string(),
    })?;
    write_bytes(path, text.as_bytes())
}

/// Per-bone row-major 4×4 world-from-canonical transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub transforms: Vec<[[f64; 4]; 4]>,
}

impl PoseFile {
    pub fn from_pose(pose: &Pose) -> Self {
        PoseFile {
            transforms: pose
                .transforms
                .iter()
                .map(|t| {
                    let r = t.to_rows();
                    [0, 1, 2, 3].map(|i| [r[4 * i], r[4 * i + 1], r[4 * i + 2], r[4 * i + 3]])
                })
                .collect(),
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        let mut out = Vec::with_capacity(self.transforms.len());
        for (i, m) in self.transforms.iter().enumerate() {
            if m[3] != [0.0, 0.0, 0.0, 1.0] {
                return Err(Error::schema(format!("transforms[{i}]"), "last row must be [0, 0, 0, 1]"));
            }
            let mut rows = [0.0; 16];
            for r in 0..4 {
                rows[4 * r..4 * r + 4].copy_from_slice(&m[r]);
            }
            out.push(Affine::from_rows(&rows));
        }
        Pose::new(out)
    }
}

/// Spherical-Gaussian light document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgFile {
    pub axes: Vec<[f64; 3]>,
    pub sharpness: Vec<f64>,
    pub amplitude: Vec<[f64; 3]>,
}

impl SgFile {
    pub fn from_mixture(m: &SgMixture) -> Self {
        SgFile {
            axes: m.axes.iter().map(|a| a.to_array()).collect(),
            sharpness: m.sharpness.clone(),
            amplitude: m.amplitude.clone(),
        }
    }

    pub fn to_mixture(&self) -> Result<SgMixture> {
        let m = SgMixture {
            axes: self.axes.iter().map(|a| crate::linalg::Vec3::from_array(*a).normalize()).collect(),
            sharpness: self.sharpness.clone(),
            amplitude: self.amplitude.clone(),
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn read_envmap(path: &Path) -> Result<EnvMap> {
    let img = read_pfm(path)?;
    let data = (0..img.pixel_count()).map(|i| img.rgb(i)).collect();
    EnvMap::new(img.width, img.height, data)
}

pub fn write_envmap(path: &Path, map: &EnvMap) -> Result<()> {
    let l = map.layout();
    let data = map.data().iter().flat_map(|c| c.map(|v| v as f32)).collect();
    write_pfm(path, &Image::from_data(l.width, l.height, 3, data)?)
}

/// Raw little-endian `f32` array.
pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<f64>> {
    if bytes.len() != 4 * expected {
        return Err(Error::Format {
            what: "f32 array",
            message: format!("{what}: expected {expected} values, found {} bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Raw little-endian `f64` array.
pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<f64>> {
    if bytes.len() != 8 * expected {
        return Err(Error::Format {
            what: "f64 array",
            message: format!("{what}: expected {expected} values, found {} bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Grid header; values live in an `f32` sidecar next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub res: [usize; 3],
    pub bounds: Aabb,
    pub channels: usize,
    /// Sidecar path relative to the header.
    pub data: PathBuf,
}

pub fn write_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let stem = path.file_stem().map_or("grid".into(), |s| s.to_string_lossy().into_owned());
    let sidecar = PathBuf::from(format!("{stem}.f32"));
    let dir = path.parent().unwrap_or(Path::new(""));
    write_bytes(&dir.join(&sidecar), &encode_f32(&grid.data))?;
    write_json(
        path,
        &GridFile {
            res: grid.res,
            bounds: grid.bounds,
            channels: grid.channels,
            data: sidecar,
        },
    )
}

pub fn read_grid(path: &Path) -> Result<VoxelGrid> {
    let header: GridFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let n = header.res.iter().product::<usize>() * header.channels;
    let data = decode_f32(&read_bytes(&dir.join(&header.data))?, n, &header.data.to_string_lossy())?;
    VoxelGrid::new(header.res, header.bounds, header.channels, data)
}

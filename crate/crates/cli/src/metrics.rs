//! Directory-level evaluation of albedo and normal predictions.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use scatter_avatar::eval::{align_albedo, normal_error, psnr, ssim};
use scatter_avatar::io::read_image;
use scatter_avatar::raster::Image;
use scatter_avatar::Result;

use crate::{io_err, usage};

/// Metrics of one image id; `None` where the kind is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub scales: Option<[f64; 3]>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub normal_error: Option<f64>,
}

const CSV_HEADER: &str = "image,scale_r,scale_g,scale_b,psnr,ssim,normal_error_deg";

/// `<kind>_<id>.<pfm|png>` files of a directory.
fn ids(dir: &Path, kind: &str) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| scatter_avatar::Error::MissingInput {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("pfm") | Some("png")) {
            continue;
        }
        if let Some(id) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix(kind))
            .and_then(|s| s.strip_prefix('_'))
        {
            out.insert(id.to_string());
        }
    }
    Ok(out)
}

/// The PFM if present, else the PNG.
fn find(dir: &Path, kind: &str, id: &str) -> Option<PathBuf> {
    ["pfm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{kind}_{id}.{ext}")))
        .find(|p| p.exists())
}

fn load(dir: &Path, kind: &str, id: &str) -> Result<Option<Image>> {
    find(dir, kind, id).map(|p| read_image(&p)).transpose()
}

/// PNG normals are stored as `(n + 1) / 2`.
fn load_normals(dir: &Path, kind: &str, id: &str) -> Result<Option<Image>> {
    let Some(path) = find(dir, kind, id) else {
        return Ok(None);
    };
    let mut img = read_image(&path)?;
    if path.extension().is_some_and(|e| e == "png") {
        img.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    }
    Ok(Some(img))
}

fn check_ids(kind: &str, pred: &BTreeSet<String>, gt: &BTreeSet<String>) -> Result<()> {
    if pred != gt {
        return Err(usage(
            "--pred",
            format!("{} predicted and {} reference {kind} images do not pair up", pred.len(), gt.len()),
        ));
    }
    Ok(())
}

/// Pairs `albedo_<id>` and `normal_<id>` images by id and computes metrics
/// over the mask: `mask_<id>` (reference or `masks` directory) above one half,
/// intersected with predicted `alpha_<id>` above one half when present.
pub fn evaluate_dirs(pred: &Path, gt: &Path, masks: Option<&Path>, align: bool) -> Result<Vec<MetricRow>> {
    let albedo = ids(gt, "albedo")?;
    let normal = ids(gt, "normal")?;
    check_ids("albedo", &ids(pred, "albedo")?, &albedo)?;
    check_ids("normal", &ids(pred, "normal")?, &normal)?;
    let all: BTreeSet<String> = albedo.union(&normal).cloned().collect();
    if all.is_empty() {
        return Err(usage("--gt", "no albedo_<id> or normal_<id> images found"));
    }
    all.iter()
        .map(|id| {
            let mask_img = load(masks.unwrap_or(gt), "mask", id)?;
            let alpha = load(pred, "alpha", id)?;
            let mask_of = |img: &Image| -> Result<Vec<bool>> {
                let n = img.pixel_count();
                let mut m = vec![true; n];
                for extra in [&mask_img, &alpha].into_iter().flatten() {
                    img.same_shape(extra)?;
                    for (i, v) in m.iter_mut().enumerate() {
                        *v &= extra.pixel(i)[0] > 0.5;
                    }
                }
                Ok(m)
            };
            let mut row = MetricRow {
                id: id.clone(),
                scales: None,
                psnr: None,
                ssim: None,
                normal_error: None,
            };
            if albedo.contains(id) {
                let p = load(pred, "albedo", id)?.expect("paired");
                let g = load(gt, "albedo", id)?.expect("paired");
                let mask = mask_of(&g)?;
                let (scales, aligned) = if align {
                    let a = align_albedo(&p, &g, &mask)?;
                    (a.scales, a.aligned)
                } else {
                    ([1.0; 3], p)
                };
                let masked = |img: &Image| {
                    let mut out = img.clone();
                    for (i, keep) in mask.iter().enumerate() {
                        if !keep {
                            out.pixel_mut(i).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    out
                };
                row.scales = Some(scales);
                row.psnr = Some(psnr(&aligned, &g, Some(&mask))?);
                row.ssim = Some(ssim(&masked(&aligned), &masked(&g))?);
            }
            if normal.contains(id) {
                let p = load_normals(pred, "normal", id)?.expect("paired");
                let g = load_normals(gt, "normal", id)?.expect("paired");
                let mask = mask_of(&g)?;
                row.normal_error = Some(normal_error(&p, &g, &mask)?);
            }
            Ok(row)
        })
        .collect()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// One row per image and a final `mean` row.
pub fn to_csv(rows: &[MetricRow]) -> String {
    let mean_row = MetricRow {
        id: "mean".into(),
        scales: {
            let c = |k: usize| mean(rows.iter().map(|r| r.scales.map(|s| s[k])));
            c(0).map(|r| [r, c(1).unwrap_or(1.0), c(2).unwrap_or(1.0)])
        },
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        normal_error: mean(rows.iter().map(|r| r.normal_error)),
    };
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows.iter().chain(std::iter::once(&mean_row)) {
        let s = r.scales.map_or([None; 3], |s| s.map(Some));
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            cell(s[0]),
            cell(s[1]),
            cell(s[2]),
            cell(r.psnr),
            cell(r.ssim),
            cell(r.normal_error)
        ));
    }
    out
}

//! All fields of one avatar plus its light, and flat access to their
//! trainable parameters.

use crate::articulation::{canonicalize, lbs_inverse, Pose, Skeleton};
use crate::autodiff::{ParamKey, ParamLayout};
use crate::fields::{
    DensityModel, MaterialField, OccupancyGrid, RadianceField, SdfField, Source, EMPTY_DISTANCE,
};
use crate::linalg::{Aabb, Vec3};
use crate::shading::Light;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub sdf: SdfField,
    pub density: DensityModel,
    pub material: MaterialField,
    pub radiance: RadianceField,
    pub skeleton: Skeleton,
    pub light: Light,
}

impl Model {
    /// Box containing every posed surface point, or `None` for an empty field.
    pub fn posed_bounds(&self, pose: &Pose) -> Option<Aabb> {
        let canonical = self.sdf.bounds()?;
        Some(
            pose.transforms
                .iter()
                .fold(Aabb::empty(), |acc, t| acc.union(&canonical.transformed(t))),
        )
    }

    /// Canonical SDF of an observation-space point.
    pub fn warped_sdf(&self, pose: &Pose, x_o: Vec3) -> f64 {
        crate::articulation::warped_sdf(&self.sdf, &self.skeleton, pose, x_o)
    }

    /// Most-inside canonical correspondence of `x_o`.
    pub fn canonical(&self, pose: &Pose, x_o: Vec3) -> Option<Vec3> {
        if self.sdf.is_empty() {
            return None;
        }
        canonicalize(&self.sdf, &self.skeleton, pose, x_o).map(|(c, _)| c)
    }

    /// Whether inverse skinning converges at `x_o`.
    pub fn invertible(&self, pose: &Pose, x_o: Vec3) -> bool {
        lbs_inverse(&self.skeleton, pose, x_o).converged()
    }

    /// Occupancy of one frame over the padded posed box.
    pub fn build_occupancy(&self, pose: &Pose, frame: usize, res: usize, pad: f64) -> Option<OccupancyGrid> {
        let bounds = self.posed_bounds(pose)?.padded(pad);
        let threshold = self.density.occupancy_distance();
        Some(OccupancyGrid::build(res, bounds, frame, threshold, |p| {
            self.warped_sdf(pose, p)
        }))
    }

    pub fn block(&self, key: ParamKey) -> Option<&[f64]> {
        fn src(s: &Source) -> Option<&[f64]> {
            s.grid().map(|g| g.data.as_slice())
        }
        match key {
            ParamKey::Sdf => match &self.sdf {
                SdfField::Grid(g) => Some(&g.data),
                _ => None,
            },
            ParamKey::LogBeta => Some(std::slice::from_ref(&self.density.log_beta)),
            ParamKey::Albedo => src(&self.material.albedo),
            ParamKey::Roughness => src(&self.material.roughness),
            ParamKey::Metallic => src(&self.material.metallic),
            ParamKey::Emission => src(&self.radiance.emission),
            ParamKey::SgAmplitude => match &self.light {
                Light::Sg(m) => Some(m.amplitude.as_flattened()),
                _ => None,
            },
            ParamKey::SgSharpness => match &self.light {
                Light::Sg(m) => Some(&m.sharpness),
                _ => None,
            },
            ParamKey::SgAxis | ParamKey::LipschitzBound => None,
        }
    }

    pub fn block_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        fn src(s: &mut Source) -> Option<&mut [f64]> {
            s.grid_mut().map(|g| g.data.as_mut_slice())
        }
        match key {
            ParamKey::Sdf => match &mut self.sdf {
                SdfField::Grid(g) => Some(&mut g.data),
                _ => None,
            },
            ParamKey::LogBeta => Some(std::slice::from_mut(&mut self.density.log_beta)),
            ParamKey::Albedo => src(&mut self.material.albedo),
            ParamKey::Roughness => src(&mut self.material.roughness),
            ParamKey::Metallic => src(&mut self.material.metallic),
            ParamKey::Emission => src(&mut self.radiance.emission),
            ParamKey::SgAmplitude => match &mut self.light {
                Light::Sg(m) => Some(m.amplitude.as_flattened_mut()),
                _ => None,
            },
            ParamKey::SgSharpness => match &mut self.light {
                Light::Sg(m) => Some(&mut m.sharpness),
                _ => None,
            },
            ParamKey::SgAxis | ParamKey::LipschitzBound => None,
        }
    }

    /// Layout over the requested keys that this model can train.
    pub fn layout(&self, keys: &[ParamKey]) -> ParamLayout {
        let mut l = ParamLayout::new();
        for &k in keys {
            if let Some(b) = self.block(k) {
                l.push(k, b.len());
            }
        }
        l
    }

    pub fn read_params(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.total()];
        for (k, r) in layout.blocks() {
            if let Some(b) = self.block(k) {
                out[r].copy_from_slice(b);
            }
        }
        out
    }

    pub fn write_params(&mut self, layout: &ParamLayout, params: &[f64]) {
        for (k, r) in layout.blocks() {
            if let Some(b) = self.block_mut(k) {
                b.copy_from_slice(&params[r]);
            }
        }
    }

    /// Distance reported for points with no canonical correspondence.
    pub const EMPTY: f64 = EMPTY_DISTANCE;
}

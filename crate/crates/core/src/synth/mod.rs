//! Synthetic longitudinal OCT-like cohort with known latent biomarkers.
//!
//! Every image is rendered from a [`LatentFactors`] record, so downstream
//! stages can be checked against the factors that produced it: grading
//! labels are a pure function of the latents, structure masks mark where
//! each lesion was drawn, and outcomes follow a known severity trajectory.

mod cohort;
mod grading;
mod io;
mod outcomes;
mod render;

pub use cohort::{
    generate_cohort, generate_cohort_with, render_cohort, Archetype, ArchetypeWeight,
    CohortConfig, NuisanceConfig, RenderedCohort, CONVERSION_SEVERITY,
};
pub use grading::derive_grading;
pub use io::{load_manifest, save_manifest, write_cohort_images, MANIFEST_FILE};
pub use outcomes::{derive_outcome_targets, ImageTargets, OutcomeTargets, Target};
pub use render::{render_bscan, RenderConfig, Rendered, StructureMask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image height in pixels (axial).
pub const IMAGE_HEIGHT: usize = 208;
/// Image width in pixels (lateral).
pub const IMAGE_WIDTH: usize = 256;
/// Axial pixel pitch in micrometres.
pub const PIXEL_HEIGHT_UM: f64 = 7.0;
/// Lateral pixel pitch in micrometres.
pub const PIXEL_WIDTH_UM: f64 = 23.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluidType {
    None,
    Intraretinal,
    Subretinal,
}

/// Latent analogues of the biomarkers plus nuisance factors for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub drusen_count: u32,
    pub drusen_diameter_um: f64,
    pub fluid_type: FluidType,
    /// Lateral extent of the fluid pocket; zero exactly when `fluid_type` is none.
    pub fluid_width_um: f64,
    pub atrophy_width_um: f64,
    pub choroid_thickness_um: f64,
    pub scar: bool,
    pub brightness_offset: f64,
    pub contrast_scale: f64,
    pub fovea_offset_px: f64,
    pub rotation_deg: f64,
}

impl LatentFactors {
    /// No pathology and no nuisance.
    pub fn healthy() -> Self {
        Self {
            drusen_count: 0,
            drusen_diameter_um: 0.0,
            fluid_type: FluidType::None,
            fluid_width_um: 0.0,
            atrophy_width_um: 0.0,
            choroid_thickness_um: 250.0,
            scar: false,
            brightness_offset: 0.0,
            contrast_scale: 1.0,
            fovea_offset_px: 0.0,
            rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.drusen_diameter_um,
            self.fluid_width_um,
            self.atrophy_width_um,
            self.choroid_thickness_um,
            self.brightness_offset,
            self.contrast_scale,
            self.fovea_offset_px,
            self.rotation_deg,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent factors".into()));
        }
        if self.drusen_diameter_um < 0.0 || self.atrophy_width_um < 0.0 || self.fluid_width_um < 0.0
        {
            return Err(Error::invalid("physical quantities must be non-negative"));
        }
        if self.choroid_thickness_um <= 0.0 {
            return Err(Error::invalid("choroid thickness must be positive"));
        }
        if self.contrast_scale <= 0.0 {
            return Err(Error::invalid("contrast scale must be positive"));
        }
        if (self.fluid_type == FluidType::None) != (self.fluid_width_um == 0.0) {
            return Err(Error::invalid(
                "fluid width must be positive exactly when fluid is present",
            ));
        }
        Ok(())
    }

    pub fn has_drusen(&self) -> bool {
        self.drusen_count > 0 && self.drusen_diameter_um > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingLabel {
    Healthy,
    EarlyIntermediate,
    Mnv,
    CroraSmall,
    CroraLarge,
}

impl GradingLabel {
    pub const ALL: [GradingLabel; 5] = [
        GradingLabel::Healthy,
        GradingLabel::EarlyIntermediate,
        GradingLabel::Mnv,
        GradingLabel::CroraSmall,
        GradingLabel::CroraLarge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GradingLabel::Healthy => "healthy",
            GradingLabel::EarlyIntermediate => "early_intermediate",
            GradingLabel::Mnv => "mnv",
            GradingLabel::CroraSmall => "crora_small",
            GradingLabel::CroraLarge => "crora_large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: u32,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub eye_id: String,
    pub visit_time: f64,
    pub image_id: String,
    /// Letter score; absent when acuity was not measured at this visit.
    pub va_letters: Option<f64>,
    pub latents: LatentFactors,
    pub grading: GradingLabel,
    /// Whether the grading annotation is part of the labelled subset.
    pub labelled: bool,
    /// Generator ground truth: the eye's archetype and current severity.
    pub archetype: Archetype,
    pub severity: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionTarget {
    Mnv,
    Crora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionEvent {
    pub eye_id: String,
    pub target: ConversionTarget,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub pixel_height_um: f64,
    pub pixel_width_um: f64,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            height: IMAGE_HEIGHT,
            width: IMAGE_WIDTH,
            pixel_height_um: PIXEL_HEIGHT_UM,
            pixel_width_um: PIXEL_WIDTH_UM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub geometry: ImageGeometry,
    pub patients: Vec<PatientRecord>,
    pub visits: Vec<VisitRecord>,
    pub conversion_events: Vec<ConversionEvent>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        use std::collections::{HashMap, HashSet};
        if self.geometry != ImageGeometry::default() {
            return Err(Error::invalid("image geometry must be 208x256 at 7.0x23.4 um"));
        }
        let mut pids = HashSet::new();
        for p in &self.patients {
            if !pids.insert(p.patient_id.as_str()) {
                return Err(Error::invalid(format!("duplicate patient {}", p.patient_id)));
            }
        }
        let mut ids = HashSet::new();
        let mut first_visit: HashMap<&str, f64> = HashMap::new();
        for v in &self.visits {
            if !ids.insert(v.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image {}", v.image_id)));
            }
            if !pids.contains(v.patient_id.as_str()) || !v.eye_id.starts_with(&v.patient_id) {
                return Err(Error::invalid(format!(
                    "eye {} does not belong to a known patient",
                    v.eye_id
                )));
            }
            if let Some(va) = v.va_letters {
                if !(5.0..=95.0).contains(&va) {
                    return Err(Error::invalid(format!("va {va} outside [5,95]")));
                }
            }
            let e = first_visit.entry(v.eye_id.as_str()).or_insert(v.visit_time);
            *e = e.min(v.visit_time);
        }
        for ev in &self.conversion_events {
            match first_visit.get(ev.eye_id.as_str()) {
                None => {
                    return Err(Error::invalid(format!(
                        "conversion references unknown eye {}",
                        ev.eye_id
                    )))
                }
                Some(&t0) if ev.time < t0 => {
                    return Err(Error::invalid(format!(
                        "conversion for {} precedes first visit",
                        ev.eye_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn visit(&self, image_id: &str) -> Option<&VisitRecord> {
        self.visits.iter().find(|v| v.image_id == image_id)
    }
}

//! Cohort sampling: patients, eyes, severity trajectories, visits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::render::{render_bscan_with, RenderConfig, Rendered};
use super::{
    derive_grading, CohortManifest, ConversionEvent, ConversionTarget, FluidType, ImageGeometry,
    LatentFactors, PatientRecord, Sex, VisitRecord,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

/// Severity at which an eye converts to late disease.
pub const CONVERSION_SEVERITY: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Healthy,
    Drusen,
    Fluid,
    Atrophy,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Healthy,
        Archetype::Drusen,
        Archetype::Fluid,
        Archetype::Atrophy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Baseline severity interval and progression-rate interval (per year).
    fn severity_profile(self) -> ((f64, f64), (f64, f64)) {
        match self {
            Archetype::Healthy => ((0.0, 0.12), (0.0, 0.03)),
            Archetype::Drusen => ((0.25, 0.5), (0.02, 0.10)),
            Archetype::Fluid => ((0.62, 0.9), (0.0, 0.03)),
            Archetype::Atrophy => ((0.62, 0.95), (0.0, 0.03)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeWeight {
    pub archetype: Archetype,
    pub weight: f64,
    /// Overrides the archetype's default baseline severity interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_severity: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    /// Brightness offset drawn uniformly from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast_range: (f64, f64),
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Lateral fovea shift drawn uniformly from `[-fovea_offset_px, fovea_offset_px]`.
    pub fovea_offset_px: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast_range: (0.8, 1.2),
            rotation_deg: 5.0,
            fovea_offset_px: 20.0,
        }
    }
}

impl NuisanceConfig {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast_range: (1.0, 1.0),
            rotation_deg: 0.0,
            fovea_offset_px: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub eyes_per_patient: usize,
    pub visits_per_eye: usize,
    pub visit_interval_years: f64,
    /// Conversions are observed up to this time after the first visit.
    pub followup_years: f64,
    pub age_range: (u32, u32),
    pub archetypes: Vec<ArchetypeWeight>,
    /// Acuity model: `intercept - slope * severity - age_slope * (age - 75) + N(0, noise_sd)`.
    pub va_intercept: f64,
    pub va_slope: f64,
    pub va_age_slope: f64,
    pub va_noise_sd: f64,
    pub va_measured_fraction: f64,
    /// Fraction of eyes whose images carry a grading annotation.
    pub labelled_fraction: f64,
    pub nuisance: NuisanceConfig,
    pub render: RenderConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            eyes_per_patient: 2,
            visits_per_eye: 3,
            visit_interval_years: 1.0,
            followup_years: 8.0,
            age_range: (51, 102),
            archetypes: Archetype::ALL
                .iter()
                .map(|&archetype| ArchetypeWeight {
                    archetype,
                    weight: 1.0,
                    baseline_severity: None,
                })
                .collect(),
            va_intercept: 88.0,
            va_slope: 60.0,
            va_age_slope: 0.1,
            va_noise_sd: 5.0,
            va_measured_fraction: 1.0,
            labelled_fraction: 0.4,
            nuisance: NuisanceConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl CohortConfig {
    /// One visit per eye with baseline severities kept clear of the
    /// thresholds where lesions are sub-pixel at 64x64, so every archetype
    /// is visually distinct after downscaling.
    pub fn well_separated() -> Self {
        let band = |archetype, lo, hi| ArchetypeWeight {
            archetype,
            weight: 1.0,
            baseline_severity: Some((lo, hi)),
        };
        Self {
            visits_per_eye: 1,
            archetypes: vec![
                band(Archetype::Healthy, 0.0, 0.12),
                band(Archetype::Drusen, 0.4, 0.5),
                band(Archetype::Fluid, 0.75, 0.9),
                band(Archetype::Atrophy, 0.75, 0.95),
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::invalid("cohort needs at least one patient"));
        }
        if self.archetypes.is_empty()
            || self.archetypes.iter().any(|a| !(a.weight >= 0.0))
            || self.archetypes.iter().map(|a| a.weight).sum::<f64>() <= 0.0
        {
            return Err(Error::invalid("archetype mixture is empty"));
        }
        for a in &self.archetypes {
            if let Some((lo, hi)) = a.baseline_severity {
                if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                    return Err(Error::invalid(format!(
                        "baseline severity of {:?} must be an ordered interval in [0,1]",
                        a.archetype
                    )));
                }
            }
        }
        if !(1..=2).contains(&self.eyes_per_patient) {
            return Err(Error::invalid("eyes_per_patient must be 1 or 2"));
        }
        if self.visits_per_eye == 0 {
            return Err(Error::invalid("visits_per_eye must be positive"));
        }
        if self.age_range.0 > self.age_range.1 {
            return Err(Error::invalid("age range is empty"));
        }
        let last_visit = (self.visits_per_eye - 1) as f64 * self.visit_interval_years;
        if !(self.visit_interval_years >= 0.0) || !(self.followup_years >= last_visit) {
            return Err(Error::invalid("follow-up must cover every visit"));
        }
        for f in [self.va_measured_fraction, self.labelled_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("fractions must lie in [0,1]"));
            }
        }
        let (lo, hi) = self.nuisance.contrast_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("contrast range must be positive and ordered"));
        }
        if !(self.va_noise_sd >= 0.0) {
            return Err(Error::invalid("va noise must be non-negative"));
        }
        Ok(())
    }

    /// The acuity model without noise, for oracle checks.
    pub fn expected_va(&self, severity: f64, fluid: FluidType, age: u32) -> f64 {
        let penalty = if fluid == FluidType::Intraretinal { 0.1 } else { 0.0 };
        self.va_intercept
            - self.va_slope * (severity + penalty)
            - self.va_age_slope * (age as f64 - 75.0)
    }
}

/// Per-eye constants fixed at enrolment.
struct EyeTraits {
    archetype: Archetype,
    fate: ConversionTarget,
    fluid: FluidType,
    drusen_count: u32,
    choroid_um: f64,
    baseline: f64,
    rate: f64,
}

/// Latent factors for an eye at a given severity (nuisance left at identity).
fn latents_at(eye: &EyeTraits, severity: f64) -> LatentFactors {
    let mut l = LatentFactors::healthy();
    l.choroid_thickness_um = eye.choroid_um;
    if eye.drusen_count > 0 && severity >= 0.15 {
        l.drusen_count = eye.drusen_count;
        l.drusen_diameter_um = if severity < 0.2 {
            40.0 + (severity - 0.15) * 460.0
        } else {
            (63.0 + (severity - 0.2) * 1100.0).min(600.0)
        };
    }
    if severity >= CONVERSION_SEVERITY {
        match eye.fate {
            ConversionTarget::Mnv => {
                l.fluid_type = eye.fluid;
                l.fluid_width_um = 300.0 + (severity - CONVERSION_SEVERITY) * 2500.0;
                l.scar = severity >= 0.95;
            }
            ConversionTarget::Crora => {
                l.atrophy_width_um = 250.0 + (severity - CONVERSION_SEVERITY) * 3000.0;
            }
        }
    }
    l
}

fn pick_archetype<'a>(config: &'a CohortConfig, r: &mut rng::Rng) -> &'a ArchetypeWeight {
    let total: f64 = config.archetypes.iter().map(|a| a.weight).sum();
    let mut u = r.random::<f64>() * total;
    for a in &config.archetypes {
        if u < a.weight {
            return a;
        }
        u -= a.weight;
    }
    config
        .archetypes
        .iter()
        .rev()
        .find(|a| a.weight > 0.0)
        .expect("validated mixture")
}

fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

fn gaussian(r: &mut rng::Rng, sd: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let z: f64 = StandardNormal.sample(r);
    z * sd
}

struct PatientDraw {
    patient: PatientRecord,
    visits: Vec<VisitRecord>,
    events: Vec<ConversionEvent>,
}

fn draw_patient(config: &CohortConfig, seed: u64, index: usize) -> PatientDraw {
    let mut r = rng::derive(seed, "patient", index as u64);
    let patient_id = format!("p{:05}", index + 1);
    let age = r.random_range(config.age_range.0..=config.age_range.1);
    let sex = if r.random::<bool>() { Sex::F } else { Sex::M };
    let mut visits = Vec::new();
    let mut events = Vec::new();
    for eye_idx in 0..config.eyes_per_patient {
        let eye_id = format!("{patient_id}_{}", if eye_idx == 0 { "R" } else { "L" });
        let picked = pick_archetype(config, &mut r);
        let archetype = picked.archetype;
        let ((s_lo, s_hi), (r_lo, r_hi)) = archetype.severity_profile();
        let (s_lo, s_hi) = picked.baseline_severity.unwrap_or((s_lo, s_hi));
        let baseline = uniform(&mut r, s_lo, s_hi);
        let rate = uniform(&mut r, r_lo, r_hi);
        let fate = match archetype {
            Archetype::Fluid => ConversionTarget::Mnv,
            Archetype::Atrophy => ConversionTarget::Crora,
            _ if r.random::<bool>() => ConversionTarget::Mnv,
            _ => ConversionTarget::Crora,
        };
        let fluid = if r.random::<bool>() {
            FluidType::Intraretinal
        } else {
            FluidType::Subretinal
        };
        let drusen_count = match archetype {
            Archetype::Healthy | Archetype::Drusen => r.random_range(1..=3),
            _ => 0,
        };
        let choroid_um = (330.0 - 180.0 * baseline + gaussian(&mut r, 25.0)).clamp(80.0, 450.0);
        let eye = EyeTraits {
            archetype,
            fate,
            fluid,
            drusen_count,
            choroid_um,
            baseline,
            rate,
        };
        let labelled = r.random::<f64>() < config.labelled_fraction;

        if eye.baseline < CONVERSION_SEVERITY && eye.rate > 0.0 {
            let t = (CONVERSION_SEVERITY - eye.baseline) / eye.rate;
            if t <= config.followup_years {
                events.push(ConversionEvent {
                    eye_id: eye_id.clone(),
                    target: eye.fate,
                    time: t,
                });
            }
        }

        for v in 0..config.visits_per_eye {
            let visit_time = v as f64 * config.visit_interval_years;
            let severity = (eye.baseline + eye.rate * visit_time).min(1.0);
            let mut latents = latents_at(&eye, severity);
            let n = &config.nuisance;
            latents.brightness_offset = uniform(&mut r, -n.brightness, n.brightness);
            latents.contrast_scale = uniform(&mut r, n.contrast_range.0, n.contrast_range.1);
            latents.rotation_deg = uniform(&mut r, -n.rotation_deg, n.rotation_deg);
            latents.fovea_offset_px = uniform(&mut r, -n.fovea_offset_px, n.fovea_offset_px);
            let va_noise = gaussian(&mut r, config.va_noise_sd);
            let measured = r.random::<f64>() < config.va_measured_fraction;
            let va = (config.expected_va(severity, latents.fluid_type, age) + va_noise)
                .round()
                .clamp(5.0, 95.0);
            let image_id = format!("{eye_id}_v{v:02}");
            let noise_seed = rng::derive_seed(seed, &image_id, 0);
            visits.push(VisitRecord {
                patient_id: patient_id.clone(),
                eye_id: eye_id.clone(),
                visit_time,
                image_id,
                va_letters: measured.then_some(va),
                grading: derive_grading(&latents),
                latents,
                labelled,
                archetype: eye.archetype,
                severity,
                noise_seed,
            });
        }
    }
    PatientDraw {
        patient: PatientRecord {
            patient_id,
            age,
            sex,
        },
        visits,
        events,
    }
}

/// Samples a cohort manifest. Each patient draws from its own stream
/// derived from `(seed, patient index)`, so the result does not depend on
/// the execution mode.
pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<CohortManifest> {
    generate_cohort_with(config, seed, Exec::default())
}

pub fn generate_cohort_with(config: &CohortConfig, seed: u64, exec: Exec) -> Result<CohortManifest> {
    config.validate()?;
    let draws = exec.map_range(config.n_patients, |i| draw_patient(config, seed, i));
    let mut manifest = CohortManifest {
        seed,
        geometry: ImageGeometry::default(),
        patients: Vec::with_capacity(draws.len()),
        visits: Vec::new(),
        conversion_events: Vec::new(),
    };
    for d in draws {
        manifest.patients.push(d.patient);
        manifest.visits.extend(d.visits);
        manifest.conversion_events.extend(d.events);
    }
    manifest.validate()?;
    Ok(manifest)
}

/// A manifest with its rendered images, in manifest visit order.
#[derive(Debug, Clone)]
pub struct RenderedCohort {
    pub manifest: CohortManifest,
    pub images: Vec<Rendered>,
}

/// Renders every visit of a manifest.
pub fn render_cohort(
    manifest: &CohortManifest,
    config: &RenderConfig,
    exec: Exec,
) -> Result<Vec<Rendered>> {
    exec.map_slice(&manifest.visits, |v| {
        render_bscan_with(&v.latents, v.noise_seed, config)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GradingLabel;

    #[test]
    fn minimal_healthy_cohort() {
        let cfg = CohortConfig {
            n_patients: 1,
            eyes_per_patient: 1,
            visits_per_eye: 1,
            archetypes: vec![ArchetypeWeight {
                archetype: Archetype::Healthy,
                weight: 1.0,
                baseline_severity: None,
            }],
            ..CohortConfig::default()
        };
        let m = generate_cohort(&cfg, 0).unwrap();
        assert_eq!(m.visits.len(), 1);
        assert_eq!(m.visits[0].grading, GradingLabel::Healthy);
        assert_eq!(render_cohort(&m, &cfg.render, Exec::Sequential).unwrap().len(), 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero = CohortConfig {
            n_patients: 0,
            ..CohortConfig::default()
        };
        assert!(generate_cohort(&zero, 0).is_err());
        let empty = CohortConfig {
            archetypes: vec![],
            ..CohortConfig::default()
        };
        assert!(generate_cohort(&empty, 0).is_err());
    }

    #[test]
    fn severity_override_bounds_baselines() {
        let cfg = CohortConfig {
            n_patients: 60,
            ..CohortConfig::well_separated()
        };
        let m = generate_cohort(&cfg, 3).unwrap();
        for v in &m.visits {
            let (lo, hi) = cfg.archetypes[v.archetype.index()].baseline_severity.unwrap();
            assert!(v.severity >= lo && v.severity <= hi, "{:?} at {}", v.archetype, v.severity);
        }
        let mut bad = cfg.clone();
        bad.archetypes[1].baseline_severity = Some((0.6, 0.5));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_manifest_across_modes() {
        let cfg = CohortConfig {
            n_patients: 30,
            ..CohortConfig::default()
        };
        let a = generate_cohort_with(&cfg, 5, Exec::Sequential).unwrap();
        let b = generate_cohort_with(&cfg, 5, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&cfg, 6).unwrap();
        assert_ne!(a.visits[0].noise_seed, c.visits[0].noise_seed);
    }

    #[test]
    fn high_severity_archetype_has_worse_acuity() {
        // Oracle: the noiseless acuity model is strictly decreasing in
        // severity, and the archetype severity intervals are ordered.
        let base = CohortConfig {
            n_patients: 150,
            ..CohortConfig::default()
        };
        let mean_va = |a: Archetype| {
            let cfg = CohortConfig {
                archetypes: vec![ArchetypeWeight {
                    archetype: a,
                    weight: 1.0,
                    baseline_severity: None,
                }],
                ..base.clone()
            };
            let m = generate_cohort(&cfg, 11).unwrap();
            let vas: Vec<f64> = m.visits.iter().filter_map(|v| v.va_letters).collect();
            vas.iter().sum::<f64>() / vas.len() as f64
        };
        let ((_, hs_hi), _) = Archetype::Healthy.severity_profile();
        let ((at_lo, _), _) = Archetype::Atrophy.severity_profile();
        assert!(base.expected_va(hs_hi, FluidType::None, 75) > base.expected_va(at_lo, FluidType::None, 75));
        assert!(mean_va(Archetype::Atrophy) < mean_va(Archetype::Healthy));
        assert!(mean_va(Archetype::Fluid) < mean_va(Archetype::Drusen));
    }

    #[test]
    fn conversions_follow_trajectory() {
        let cfg = CohortConfig {
            n_patients: 100,
            ..CohortConfig::default()
        };
        let m = generate_cohort(&cfg, 3).unwrap();
        assert!(!m.conversion_events.is_empty());
        for ev in &m.conversion_events {
            assert!(ev.time > 0.0 && ev.time <= cfg.followup_years);
            for v in m.visits.iter().filter(|v| v.eye_id == ev.eye_id) {
                let late = matches!(
                    v.grading,
                    GradingLabel::Mnv | GradingLabel::CroraSmall | GradingLabel::CroraLarge
                );
                assert_eq!(late, v.visit_time >= ev.time - 1e-9, "{} at {}", v.image_id, v.visit_time);
            }
        }
    }
}

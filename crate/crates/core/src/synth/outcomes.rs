use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CohortManifest, ConversionTarget};

/// Regression targets of the prognostic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    TimeToLateAmd,
    TimeToMnv,
    TimeToCrora,
    CurrentVa,
}

impl Target {
    pub const ALL: [Target; 4] = [
        Target::TimeToLateAmd,
        Target::TimeToMnv,
        Target::TimeToCrora,
        Target::CurrentVa,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Target::TimeToLateAmd => "Time to Late AMD",
            Target::TimeToMnv => "Time to MNV",
            Target::TimeToCrora => "Time to cRORA",
            Target::CurrentVa => "Current visual acuity",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Target::CurrentVa => "letters",
            _ => "years",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTargets {
    pub image_id: String,
    pub time_to_late_amd: Option<f64>,
    pub time_to_mnv: Option<f64>,
    pub time_to_crora: Option<f64>,
    pub current_va: Option<f64>,
}

impl ImageTargets {
    pub fn get(&self, target: Target) -> Option<f64> {
        match target {
            Target::TimeToLateAmd => self.time_to_late_amd,
            Target::TimeToMnv => self.time_to_mnv,
            Target::TimeToCrora => self.time_to_crora,
            Target::CurrentVa => self.current_va,
        }
    }
}

/// Per-image targets, in manifest visit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTargets {
    pub rows: Vec<ImageTargets>,
}

impl OutcomeTargets {
    /// `(row index, value)` for every image eligible for `target`.
    pub fn eligible(&self, target: Target) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.get(target).map(|v| (i, v)))
            .collect()
    }
}

/// Time-to-event targets count only events strictly after the visit;
/// images without such an event are left out of that target. Late AMD
/// takes the earliest of the MNV and cRORA events.
pub fn derive_outcome_targets(manifest: &CohortManifest) -> OutcomeTargets {
    let mut events: HashMap<&str, Vec<(ConversionTarget, f64)>> = HashMap::new();
    for ev in &manifest.conversion_events {
        events
            .entry(ev.eye_id.as_str())
            .or_default()
            .push((ev.target, ev.time));
    }
    let rows = manifest
        .visits
        .iter()
        .map(|v| {
            let eye_events = events.get(v.eye_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let next = |kind: Option<ConversionTarget>| {
                eye_events
                    .iter()
                    .filter(|(t, time)| kind.is_none_or(|k| k == *t) && *time > v.visit_time)
                    .map(|(_, time)| time - v.visit_time)
                    .min_by(f64::total_cmp)
            };
            ImageTargets {
                image_id: v.image_id.clone(),
                time_to_late_amd: next(None),
                time_to_mnv: next(Some(ConversionTarget::Mnv)),
                time_to_crora: next(Some(ConversionTarget::Crora)),
                current_va: v.va_letters,
            }
        })
        .collect();
    OutcomeTargets { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        Archetype, ConversionEvent, GradingLabel, ImageGeometry, LatentFactors, PatientRecord, Sex,
        VisitRecord,
    };

    fn visit(eye: &str, t: f64) -> VisitRecord {
        VisitRecord {
            patient_id: "p1".into(),
            eye_id: eye.into(),
            visit_time: t,
            image_id: format!("{eye}_{t}"),
            va_letters: Some(70.0),
            latents: LatentFactors::healthy(),
            grading: GradingLabel::Healthy,
            labelled: true,
            archetype: Archetype::Drusen,
            severity: 0.3,
            noise_seed: 0,
        }
    }

    fn manifest(visits: Vec<VisitRecord>, events: Vec<ConversionEvent>) -> CohortManifest {
        CohortManifest {
            seed: 0,
            geometry: ImageGeometry::default(),
            patients: vec![PatientRecord {
                patient_id: "p1".into(),
                age: 70,
                sex: Sex::F,
            }],
            visits,
            conversion_events: events,
        }
    }

    fn ev(target: ConversionTarget, time: f64) -> ConversionEvent {
        ConversionEvent {
            eye_id: "p1_R".into(),
            target,
            time,
        }
    }

    #[test]
    fn time_to_mnv_is_a_difference() {
        let m = manifest(vec![visit("p1_R", 1.0)], vec![ev(ConversionTarget::Mnv, 3.0)]);
        let t = derive_outcome_targets(&m);
        assert_eq!(t.rows[0].time_to_mnv, Some(2.0));
        assert_eq!(t.rows[0].time_to_crora, None);
    }

    #[test]
    fn unconverted_eyes_are_excluded() {
        let m = manifest(vec![visit("p1_L", 0.0)], vec![ev(ConversionTarget::Mnv, 3.0)]);
        let t = derive_outcome_targets(&m);
        assert_eq!(t.rows[0].time_to_late_amd, None);
        assert_eq!(t.rows[0].time_to_mnv, None);
        assert_eq!(t.rows[0].current_va, Some(70.0));
        assert!(t.eligible(Target::TimeToMnv).is_empty());
        assert_eq!(t.eligible(Target::CurrentVa).len(), 1);
    }

    #[test]
    fn late_amd_is_the_earliest_event() {
        let events = vec![ev(ConversionTarget::Crora, 4.0), ev(ConversionTarget::Mnv, 2.0)];
        // min-event oracle
        let oracle = events
            .iter()
            .map(|e| e.time - 1.0)
            .filter(|d| *d > 0.0)
            .fold(f64::INFINITY, f64::min);
        let m = manifest(vec![visit("p1_R", 1.0)], events);
        let t = derive_outcome_targets(&m);
        assert_eq!(t.rows[0].time_to_late_amd, Some(oracle));
        assert_eq!(oracle, 1.0);
        assert_eq!(t.rows[0].time_to_crora, Some(3.0));
    }

    #[test]
    fn visits_after_conversion_are_ineligible() {
        let m = manifest(
            vec![visit("p1_R", 1.0), visit("p1_R", 3.0)],
            vec![ev(ConversionTarget::Mnv, 3.0)],
        );
        let t = derive_outcome_targets(&m);
        assert_eq!(t.rows[0].time_to_mnv, Some(2.0));
        assert_eq!(t.rows[1].time_to_mnv, None);
    }
}

use super::{FluidType, GradingLabel, LatentFactors};

/// Minimum drusen diameter marking early/intermediate disease.
pub const DRUSEN_THRESHOLD_UM: f64 = 63.0;
/// Minimum atrophy width graded as complete atrophy.
pub const CRORA_THRESHOLD_UM: f64 = 250.0;
/// Atrophy width from which complete atrophy counts as large.
pub const CRORA_LARGE_THRESHOLD_UM: f64 = 1000.0;

/// Rule-based grading from latent factors.
///
/// Late features win over drusen. Atrophy wins over neovascular features
/// only when no fluid is present.
pub fn derive_grading(latents: &LatentFactors) -> GradingLabel {
    let atrophy = latents.atrophy_width_um >= CRORA_THRESHOLD_UM;
    let fluid = latents.fluid_type != FluidType::None;
    if atrophy && !fluid {
        if latents.atrophy_width_um >= CRORA_LARGE_THRESHOLD_UM {
            GradingLabel::CroraLarge
        } else {
            GradingLabel::CroraSmall
        }
    } else if fluid || latents.scar {
        GradingLabel::Mnv
    } else if latents.has_drusen() && latents.drusen_diameter_um >= DRUSEN_THRESHOLD_UM {
        GradingLabel::EarlyIntermediate
    } else {
        GradingLabel::Healthy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drusen(d: f64) -> LatentFactors {
        LatentFactors {
            drusen_count: 2,
            drusen_diameter_um: d,
            ..LatentFactors::healthy()
        }
    }

    #[test]
    fn examples() {
        assert_eq!(derive_grading(&drusen(80.0)), GradingLabel::EarlyIntermediate);
        let atrophy = LatentFactors {
            atrophy_width_um: 500.0,
            ..LatentFactors::healthy()
        };
        assert_eq!(derive_grading(&atrophy), GradingLabel::CroraSmall);
        assert_eq!(derive_grading(&LatentFactors::healthy()), GradingLabel::Healthy);
    }

    #[test]
    fn thresholds_are_sharp() {
        assert_eq!(derive_grading(&drusen(62.9)), GradingLabel::Healthy);
        assert_eq!(derive_grading(&drusen(63.0)), GradingLabel::EarlyIntermediate);
        let mut l = LatentFactors::healthy();
        l.atrophy_width_um = 249.9;
        assert_eq!(derive_grading(&l), GradingLabel::Healthy);
        l.atrophy_width_um = 999.9;
        assert_eq!(derive_grading(&l), GradingLabel::CroraSmall);
        l.atrophy_width_um = 1000.0;
        assert_eq!(derive_grading(&l), GradingLabel::CroraLarge);
    }

    #[test]
    fn precedence() {
        let mut l = drusen(300.0);
        l.scar = true;
        assert_eq!(derive_grading(&l), GradingLabel::Mnv);
        l.atrophy_width_um = 600.0;
        // scar without fluid: atrophy wins
        assert_eq!(derive_grading(&l), GradingLabel::CroraSmall);
        l.fluid_type = FluidType::Subretinal;
        l.fluid_width_um = 400.0;
        assert_eq!(derive_grading(&l), GradingLabel::Mnv);
    }

    #[test]
    fn zero_count_drusen_is_not_pathology() {
        let l = LatentFactors {
            drusen_count: 0,
            drusen_diameter_um: 200.0,
            ..LatentFactors::healthy()
        };
        assert_eq!(derive_grading(&l), GradingLabel::Healthy);
    }
}

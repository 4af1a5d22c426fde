//! Full-order aerodynamics: panel method for sectional properties feeding
//! a lifting-line solve of the whole wing.

pub mod llt;
pub mod panel;

use serde::{Deserialize, Serialize};

pub use llt::{elliptic_reference, l2_distance, lift_distribution, llt_solve, LltSolution, Planform, WingPlanform};
pub use panel::{panel_solve, section_lift_properties, SectionAero};

use crate::geometry::{DesignVector, WingSurface};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub panels: usize,
    pub stations: usize,
    pub coeffs: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            panels: panel::DEFAULT_PANELS,
            stations: llt::DEFAULT_STATIONS,
            coeffs: llt::DEFAULT_STATIONS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FomResult {
    pub planform: WingPlanform,
    pub solution: LltSolution,
}

impl FomResult {
    pub fn cl(&self) -> f64 {
        self.solution.cl
    }

    pub fn cdi(&self) -> f64 {
        self.solution.cdi
    }

    /// Spanwise lift distribution and its elliptic reference, root to tip:
    /// `(y, cl, cl_elliptic)`.
    pub fn distributions(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (y, cl) = lift_distribution(&self.solution);
        let (_, ell) = elliptic_reference(self.solution.cl, &self.planform, &self.solution.stations);
        (y, cl, ell)
    }

    /// RMS distance to the elliptic reference, relative to its peak.
    pub fn elliptic_deviation(&self) -> f64 {
        let (_, cl, ell) = self.distributions();
        let peak = ell.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return 0.0;
        }
        l2_distance(&cl, &ell) / peak
    }
}

/// Panel solutions at the four defining sections followed by the
/// lifting-line solve.
pub fn evaluate_wing(wing: &WingSurface, settings: &SolverSettings) -> Result<FomResult> {
    let mut aero = [SectionAero {
        lift_slope: 0.0,
        alpha_zero_lift: 0.0,
    }; 4];
    for (k, s) in wing.sections.iter().enumerate() {
        aero[k] = section_lift_properties(s, settings.panels).map_err(|e| match e {
            Error::Solver(m) => Error::Solver(format!("section {}: {m}", k + 1)),
            other => other,
        })?;
    }
    let planform = WingPlanform::new(wing, aero);
    let solution = llt_solve(&planform, settings.stations, settings.coeffs)?;
    Ok(FomResult { planform, solution })
}

pub fn evaluate_design(u: &DesignVector, settings: &SolverSettings) -> Result<FomResult> {
    let wing = crate::geometry::loft_design(u)?;
    evaluate_wing(&wing, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::design_bounds;

    #[test]
    fn bounds_corners_solve() {
        let (lo, hi) = design_bounds();
        for u in [lo, hi] {
            let r = evaluate_design(&u, &SolverSettings::default()).unwrap();
            assert!(r.cdi() >= 0.0 && r.cl().is_finite());
            let e = r.solution.span_efficiency().unwrap();
            assert!(e > 0.0 && e <= 1.0);
            for a in r.planform.aero {
                assert!((4.0..=8.0).contains(&a.lift_slope), "{a:?}");
            }
        }
    }
}

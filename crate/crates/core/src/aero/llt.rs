//! Prandtl lifting-line solver for symmetric spanwise loading.
//!
//! Circulation is a sine series in the spanwise angle `theta`
//! (`y = s cos(theta)`, `s` the half span) with odd harmonics only. The
//! monoplane equation is collocated at `theta_k = k pi / (2 N)`,
//! `k = 1..=N`, which covers the half span from tip to root.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::panel::SectionAero;
use crate::geometry::{interpolate_stations, WingSurface, N_SECTIONS};
use crate::{Error, Result};

pub const DEFAULT_STATIONS: usize = 20;

/// Spanwise description of a half wing as seen by the lifting line.
pub trait Planform {
    fn half_span(&self) -> f64;
    /// Half-wing planform area.
    fn half_area(&self) -> f64;
    fn chord(&self, y: f64) -> f64;
    /// Geometric angle of attack of the section at `y` (incidence plus twist).
    fn geometric_alpha(&self, y: f64) -> f64;
    fn section(&self, y: f64) -> SectionAero;

    /// Full-span aspect ratio of the mirrored wing.
    fn aspect_ratio(&self) -> f64 {
        let b = 2.0 * self.half_span();
        b * b / (2.0 * self.half_area())
    }
}

/// Lofted wing with sectional properties known at the four defining
/// stations; everything is interpolated linearly in between.
#[derive(Clone, Debug)]
pub struct WingPlanform {
    pub half_span: f64,
    pub incidence: f64,
    pub chords: [f64; N_SECTIONS],
    pub twists: [f64; N_SECTIONS],
    pub aero: [SectionAero; N_SECTIONS],
}

impl WingPlanform {
    pub fn new(wing: &WingSurface, aero: [SectionAero; N_SECTIONS]) -> Self {
        WingPlanform {
            half_span: wing.half_span,
            incidence: wing.incidence,
            chords: wing.sections.map(|s| s.chord),
            twists: wing.sections.map(|s| s.twist),
            aero,
        }
    }
}

impl Planform for WingPlanform {
    fn half_span(&self) -> f64 {
        self.half_span
    }

    fn half_area(&self) -> f64 {
        let dy = self.half_span / (N_SECTIONS - 1) as f64;
        self.chords.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dy).sum()
    }

    fn chord(&self, y: f64) -> f64 {
        interpolate_stations(&self.chords, self.half_span, y)
    }

    fn geometric_alpha(&self, y: f64) -> f64 {
        self.incidence + interpolate_stations(&self.twists, self.half_span, y)
    }

    fn section(&self, y: f64) -> SectionAero {
        SectionAero {
            lift_slope: interpolate_stations(&self.aero.map(|a| a.lift_slope), self.half_span, y),
            alpha_zero_lift: interpolate_stations(&self.aero.map(|a| a.alpha_zero_lift), self.half_span, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LltSolution {
    /// Coefficients of the odd harmonics 1, 3, 5, ...
    pub fourier_coeffs: Vec<f64>,
    pub cl: f64,
    pub cdi: f64,
    /// Collocation angles, tip (smallest) to root (`pi / 2`).
    pub stations: Vec<f64>,
    /// Sectional lift coefficient at each collocation angle.
    pub cl_dist: Vec<f64>,
    pub chords: Vec<f64>,
    pub aspect_ratio: f64,
    pub half_span: f64,
}

fn harmonic(i: usize) -> f64 {
    (2 * i + 1) as f64
}

impl LltSolution {
    /// Span efficiency `1 / (1 + delta)`; `None` when the wing carries no lift.
    pub fn span_efficiency(&self) -> Option<f64> {
        let a1 = self.fourier_coeffs[0];
        if a1 == 0.0 {
            return None;
        }
        let delta: f64 = self
            .fourier_coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, a)| harmonic(i) * (a / a1).powi(2))
            .sum();
        Some(1.0 / (1.0 + delta))
    }

    /// Sectional loading `cl * c` at spanwise angle `theta`.
    pub fn loading(&self, theta: f64) -> f64 {
        let b = 2.0 * self.half_span;
        4.0 * b
            * self
                .fourier_coeffs
                .iter()
                .enumerate()
                .map(|(i, a)| a * (harmonic(i) * theta).sin())
                .sum::<f64>()
    }

    /// Induced drag recomputed from a modified coefficient set.
    pub fn induced_drag_of(coeffs: &[f64], aspect_ratio: f64) -> f64 {
        PI * aspect_ratio
            * coeffs
                .iter()
                .enumerate()
                .map(|(i, a)| harmonic(i) * a * a)
                .sum::<f64>()
    }
}

pub fn llt_solve<P: Planform + ?Sized>(planform: &P, n_stations: usize, n_coeffs: usize) -> Result<LltSolution> {
    if n_stations != n_coeffs {
        return Err(Error::validation(format!(
            "collocation system must be square: {n_stations} stations, {n_coeffs} coefficients"
        )));
    }
    if n_stations == 0 {
        return Err(Error::validation("need at least one station"));
    }
    let n = n_stations;
    let s = planform.half_span();
    let b = 2.0 * s;
    let stations: Vec<f64> = (1..=n).map(|k| k as f64 * PI / (2.0 * n as f64)).collect();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut chords = Vec::with_capacity(n);
    for (k, &theta) in stations.iter().enumerate() {
        let y = s * theta.cos();
        let c = planform.chord(y);
        let sec = planform.section(y);
        if !(c > 0.0) || !(sec.lift_slope > 0.0) {
            return Err(Error::Solver(format!("non-positive chord or lift slope at y = {y}")));
        }
        let mu = 4.0 * b / (sec.lift_slope * c);
        let st = theta.sin();
        for i in 0..n {
            let h = harmonic(i);
            m[(k, i)] = (h * theta).sin() * (mu + h / st);
        }
        rhs[k] = planform.geometric_alpha(y) - sec.alpha_zero_lift;
        chords.push(c);
    }
    let coeffs = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("singular lifting-line collocation matrix".into()))?;
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("lifting-line solution is not finite".into()));
    }
    let fourier_coeffs: Vec<f64> = coeffs.iter().copied().collect();
    let aspect_ratio = planform.aspect_ratio();
    let mut sol = LltSolution {
        cl: PI * aspect_ratio * fourier_coeffs[0],
        cdi: LltSolution::induced_drag_of(&fourier_coeffs, aspect_ratio),
        fourier_coeffs,
        stations,
        cl_dist: Vec::new(),
        chords,
        aspect_ratio,
        half_span: s,
    };
    sol.cl_dist = sol
        .stations
        .iter()
        .zip(&sol.chords)
        .map(|(&t, &c)| sol.loading(t) / c)
        .collect();
    Ok(sol)
}

/// Sectional lift coefficient against span position, root to tip.
pub fn lift_distribution(sol: &LltSolution) -> (Vec<f64>, Vec<f64>) {
    let y = sol.stations.iter().rev().map(|t| sol.half_span * t.cos()).collect();
    let cl = sol.cl_dist.iter().rev().copied().collect();
    (y, cl)
}

/// Elliptic loading with total lift coefficient `cl` on the same planform,
/// sampled at the solution's stations, root to tip.
pub fn elliptic_reference<P: Planform + ?Sized>(cl: f64, planform: &P, stations: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = planform.half_span();
    let b = 2.0 * s;
    let a1 = cl / (PI * planform.aspect_ratio());
    stations
        .iter()
        .rev()
        .map(|&t| {
            let y = s * t.cos();
            (y, 4.0 * b * a1 * t.sin() / planform.chord(y))
        })
        .unzip()
}

/// Root-mean-square difference between two distributions.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Untwisted wing with an elliptic chord distribution and one section.
    pub struct Elliptic {
        pub half_span: f64,
        pub root_chord: f64,
        pub alpha: f64,
        pub aero: SectionAero,
    }

    impl Planform for Elliptic {
        fn half_span(&self) -> f64 {
            self.half_span
        }
        fn half_area(&self) -> f64 {
            0.25 * PI * self.half_span * self.root_chord
        }
        fn chord(&self, y: f64) -> f64 {
            self.root_chord * (1.0 - (y / self.half_span).powi(2)).max(0.0).sqrt()
        }
        fn geometric_alpha(&self, _: f64) -> f64 {
            self.alpha
        }
        fn section(&self, _: f64) -> SectionAero {
            self.aero
        }
    }

    pub struct Rectangular {
        pub half_span: f64,
        pub chord: f64,
        pub alpha: f64,
        pub aero: SectionAero,
    }

    impl Planform for Rectangular {
        fn half_span(&self) -> f64 {
            self.half_span
        }
        fn half_area(&self) -> f64 {
            self.half_span * self.chord
        }
        fn chord(&self, _: f64) -> f64 {
            self.chord
        }
        fn geometric_alpha(&self, _: f64) -> f64 {
            self.alpha
        }
        fn section(&self, _: f64) -> SectionAero {
            self.aero
        }
    }

    pub fn thin_section() -> SectionAero {
        SectionAero {
            lift_slope: 2.0 * PI,
            alpha_zero_lift: -2f64.to_radians(),
        }
    }
}

//! Hess-Smith source/vortex panel method for 2D airfoils.
//!
//! Constant-strength sources on every panel plus one global vortex
//! strength shared by all panels. The extra unknown is closed by the Kutta
//! condition: equal and opposite tangential velocity on the two panels
//! adjacent to the trailing edge.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{ferguson_airfoil, AirfoilCurves, FergusonSection};
use crate::{Error, Result};

pub const DEFAULT_PANELS: usize = 200;

/// Angles of attack used for the sectional lift fit.
const FIT_ALPHA_DEG: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionAero {
    /// Lift-curve slope per radian.
    pub lift_slope: f64,
    pub alpha_zero_lift: f64,
}

#[derive(Clone, Debug)]
struct Panel {
    start: [f64; 2],
    mid: [f64; 2],
    len: f64,
    tangent: [f64; 2],
    normal: [f64; 2],
}

impl Panel {
    fn new(start: [f64; 2], end: [f64; 2]) -> Self {
        let dx = end[0] - start[0];
        let dz = end[1] - start[1];
        let len = dx.hypot(dz);
        let tangent = [dx / len, dz / len];
        Panel {
            start,
            mid: [0.5 * (start[0] + end[0]), 0.5 * (start[1] + end[1])],
            len,
            tangent,
            // contour runs clockwise, so the left normal points out of the body
            normal: [-tangent[1], tangent[0]],
        }
    }

    /// Velocity induced at `p` by unit-strength source and (counter-clockwise)
    /// vortex distributions on this panel, in global coordinates.
    fn influence(&self, p: [f64; 2], is_self: bool) -> ([f64; 2], [f64; 2]) {
        let rel = [p[0] - self.start[0], p[1] - self.start[1]];
        let xi = rel[0] * self.tangent[0] + rel[1] * self.tangent[1];
        let eta = rel[0] * self.normal[0] + rel[1] * self.normal[1];
        let (log_ratio, beta) = if is_self {
            (0.0, PI)
        } else {
            let r1 = xi.hypot(eta);
            let r2 = (xi - self.len).hypot(eta);
            ((r1 / r2).ln(), eta.atan2(xi - self.len) - eta.atan2(xi))
        };
        let k = 0.5 / PI;
        let src_local = [k * log_ratio, k * beta];
        let vtx_local = [-k * beta, k * log_ratio];
        let to_global = |v: [f64; 2]| {
            [
                v[0] * self.tangent[0] + v[1] * self.normal[0],
                v[0] * self.tangent[1] + v[1] * self.normal[1],
            ]
        };
        (to_global(src_local), to_global(vtx_local))
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Full solution of one panel problem, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct PanelSolution {
    pub cl: f64,
    pub source_strengths: Vec<f64>,
    pub vortex_strength: f64,
    /// Tangential surface velocity at each panel midpoint (unit freestream).
    pub tangential_velocity: Vec<f64>,
}

impl PanelSolution {
    /// Sum of the tangential velocities on the two trailing-edge panels.
    pub fn kutta_mismatch(&self) -> f64 {
        self.tangential_velocity[0] + self.tangential_velocity[self.tangential_velocity.len() - 1]
    }
}

fn contour_panels(airfoil: &AirfoilCurves) -> Result<Vec<Panel>> {
    if airfoil.upper.len() < 2 || airfoil.lower.len() < 2 {
        return Err(Error::Solver("airfoil contour needs at least two points per surface".into()));
    }
    // trailing edge -> lower surface -> leading edge -> upper surface -> trailing edge
    let nodes: Vec<[f64; 2]> = airfoil
        .lower
        .iter()
        .rev()
        .chain(airfoil.upper.iter().skip(1))
        .copied()
        .collect();
    let panels: Vec<Panel> = nodes.windows(2).map(|w| Panel::new(w[0], w[1])).collect();
    if panels.iter().any(|p| !(p.len > 0.0) || !p.len.is_finite()) {
        return Err(Error::Solver("degenerate panel of zero length".into()));
    }
    Ok(panels)
}

fn chord_length(airfoil: &AirfoilCurves) -> f64 {
    let le = airfoil.upper[0];
    let te = airfoil.upper[airfoil.upper.len() - 1];
    (te[0] - le[0]).hypot(te[1] - le[1])
}

/// Solve for several angles of attack sharing one factorization.
pub fn panel_solve_many(airfoil: &AirfoilCurves, alphas: &[f64]) -> Result<Vec<PanelSolution>> {
    let panels = contour_panels(airfoil)?;
    let n = panels.len();
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    // tangential influence rows for the two trailing-edge panels
    let mut kutta_src = vec![0.0; n];
    let mut kutta_vtx = 0.0;
    let mut tan_src = DMatrix::<f64>::zeros(n, n);
    let mut tan_vtx = vec![0.0; n];
    for (i, pi) in panels.iter().enumerate() {
        let mut vtx_normal = 0.0;
        for (j, pj) in panels.iter().enumerate() {
            let (vs, vv) = pj.influence(pi.mid, i == j);
            a[(i, j)] = dot(vs, pi.normal);
            vtx_normal += dot(vv, pi.normal);
            tan_src[(i, j)] = dot(vs, pi.tangent);
            tan_vtx[i] += dot(vv, pi.tangent);
        }
        a[(i, n)] = vtx_normal;
    }
    for j in 0..n {
        kutta_src[j] = tan_src[(0, j)] + tan_src[(n - 1, j)];
    }
    kutta_vtx += tan_vtx[0] + tan_vtx[n - 1];
    for j in 0..n {
        a[(n, j)] = kutta_src[j];
    }
    a[(n, n)] = kutta_vtx;

    let lu = a.lu();
    let chord = chord_length(airfoil);
    let perimeter: f64 = panels.iter().map(|p| p.len).sum();
    alphas
        .iter()
        .map(|&alpha| {
            if !alpha.is_finite() {
                return Err(Error::validation("angle of attack is not finite"));
            }
            let free = [alpha.cos(), alpha.sin()];
            let mut rhs = DVector::<f64>::zeros(n + 1);
            for (i, p) in panels.iter().enumerate() {
                rhs[i] = -dot(free, p.normal);
            }
            rhs[n] = -(dot(free, panels[0].tangent) + dot(free, panels[n - 1].tangent));
            let x = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Solver("singular panel influence matrix".into()))?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver("panel solution is not finite".into()));
            }
            let gamma = x[n];
            let tangential_velocity = (0..n)
                .map(|i| {
                    let mut v = dot(free, panels[i].tangent) + gamma * tan_vtx[i];
                    for j in 0..n {
                        v += tan_src[(i, j)] * x[j];
                    }
                    v
                })
                .collect();
            // clockwise circulation is minus the counter-clockwise vortex total
            let cl = -2.0 * gamma * perimeter / chord;
            Ok(PanelSolution {
                cl,
                source_strengths: x.iter().take(n).copied().collect(),
                vortex_strength: gamma,
                tangential_velocity,
            })
        })
        .collect()
}

/// Sectional lift coefficient at angle of attack `alpha` (radians).
pub fn panel_solve(airfoil: &AirfoilCurves, alpha: f64) -> Result<f64> {
    Ok(panel_solve_many(airfoil, &[alpha])?[0].cl)
}

/// Lift slope and zero-lift angle from a two-point fit at +/-2 degrees,
/// using the untwisted section with `n_panels` panels in total.
pub fn section_lift_properties(section: &FergusonSection, n_panels: usize) -> Result<SectionAero> {
    if n_panels < 18 || n_panels % 2 != 0 {
        return Err(Error::validation(format!("panel count must be even and >= 18, got {n_panels}")));
    }
    let mut untwisted = *section;
    untwisted.twist = 0.0;
    let airfoil = ferguson_airfoil(&untwisted, n_panels / 2 + 1)?;
    airfoil_lift_properties(&airfoil)
}

pub fn airfoil_lift_properties(airfoil: &AirfoilCurves) -> Result<SectionAero> {
    let a = FIT_ALPHA_DEG.to_radians();
    let sol = panel_solve_many(airfoil, &[-a, a])?;
    let (cm, cp) = (sol[0].cl, sol[1].cl);
    let lift_slope = (cp - cm) / (2.0 * a);
    if !(lift_slope > 0.0 && lift_slope.is_finite()) {
        return Err(Error::Solver(format!("non-positive lift slope {lift_slope}")));
    }
    let cl0 = 0.5 * (cp + cm);
    Ok(SectionAero {
        lift_slope,
        alpha_zero_lift: -cl0 / lift_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetric(t_le: f64, t_te: f64, theta_deg: f64) -> FergusonSection {
        FergusonSection {
            t_le_up: t_le,
            t_le_lo: t_le,
            t_te_up: t_te,
            t_te_lo: t_te,
            theta_te_up: theta_deg.to_radians(),
            theta_te_lo: theta_deg.to_radians(),
            twist: 0.0,
            chord: 1.0,
        }
    }

    /// Symmetric section with a thickness ratio close to 0.08.
    fn thin_symmetric() -> FergusonSection {
        let s = symmetric(0.26, 0.15, 6.0);
        let tc = crate::geometry::section_thickness_ratio(&s);
        assert!((tc - 0.08).abs() < 0.01, "t/c = {tc}");
        s
    }

    #[test]
    fn symmetric_airfoil_zero_alpha() {
        let af = ferguson_airfoil(&thin_symmetric(), 101).unwrap();
        assert!(panel_solve(&af, 0.0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn symmetric_airfoil_antisymmetry() {
        let af = ferguson_airfoil(&thin_symmetric(), 101).unwrap();
        for deg in [1.0, 3.0, 7.5] {
            let a = f64::to_radians(deg);
            let p = panel_solve(&af, a).unwrap();
            let m = panel_solve(&af, -a).unwrap();
            assert!((p + m).abs() < 1e-6);
            assert!(p > 0.0);
        }
    }

    #[test]
    fn thin_airfoil_lift() {
        let af = ferguson_airfoil(&thin_symmetric(), 101).unwrap();
        let a = 2f64.to_radians();
        let cl = panel_solve(&af, a).unwrap();
        let thin = 2.0 * PI * a;
        assert!((cl / thin - 1.0).abs() < 0.10, "cl = {cl}, thin-airfoil = {thin}");
    }

    #[test]
    fn kutta_condition_holds() {
        let mut s = thin_symmetric();
        s.t_le_up = 0.4;
        s.theta_te_up = 0.3;
        let af = ferguson_airfoil(&s, 101).unwrap();
        for sol in panel_solve_many(&af, &[0.0, 0.05, -0.1]).unwrap() {
            assert!(sol.kutta_mismatch().abs() < 1e-8);
        }
    }

    #[test]
    fn lift_properties() {
        let props = section_lift_properties(&thin_symmetric(), DEFAULT_PANELS).unwrap();
        assert!(props.alpha_zero_lift.abs() < 1e-4);
        let r = props.lift_slope / (2.0 * PI);
        assert!((0.9..=1.1).contains(&r), "a0 / 2pi = {r}");

        let mut cambered = thin_symmetric();
        cambered.t_le_up = 0.4;
        cambered.t_te_up = 0.3;
        cambered.theta_te_up = 14f64.to_radians();
        let props = section_lift_properties(&cambered, DEFAULT_PANELS).unwrap();
        assert!(props.alpha_zero_lift < 0.0);
    }

    #[test]
    fn degenerate_contour_is_an_error() {
        let af = AirfoilCurves {
            upper: vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
            lower: vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]],
        };
        assert!(matches!(panel_solve(&af, 0.0), Err(Error::Solver(_))));
    }
}

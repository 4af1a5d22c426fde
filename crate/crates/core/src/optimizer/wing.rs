//! Induced-drag minimization of the parametric wing: objective and lift
//! constraint from coefficient models, thickness constraint from geometry.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{sqp_minimize, Evaluation, OptResult, OptStatus, Problem, SqpOptions};
use crate::aero::{evaluate_design, l2_distance, SolverSettings};
use crate::cnn::{CnnModel, Target};
use crate::dataset::r_squared;
use crate::exec::Exec;
use crate::geometry::{decode_design, loft_design, thickness_ratios, BoundsConfig, DesignVector, N_DESIGN};
use crate::levelset::{distance_field_of, GridSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub cl: f64,
    pub cdi: f64,
}

/// Black-box map from a design to its lift and induced-drag coefficients.
pub trait Surrogate: Sync {
    fn coefficients(&self, u: &DesignVector) -> Result<Coefficients>;
}

/// The two CNNs sharing one level-set evaluation per design.
pub struct Surrogates {
    pub cl: CnnModel,
    pub cdi: CnnModel,
    pub grid: GridSpec,
}

impl Surrogates {
    pub fn new(cl: CnnModel, cdi: CnnModel, grid: GridSpec) -> Result<Self> {
        if cl.target != Target::Cl || cdi.target != Target::Cdi {
            return Err(Error::validation(format!(
                "surrogates must predict CL and CDi, got {} and {}",
                cl.target, cdi.target
            )));
        }
        for m in [&cl, &cdi] {
            if m.input_dims != grid.dims {
                return Err(Error::dimension(format!(
                    "{} model expects {:?}, grid is {:?}",
                    m.target, m.input_dims, grid.dims
                )));
            }
        }
        Ok(Surrogates { cl, cdi, grid })
    }
}

impl Surrogate for Surrogates {
    fn coefficients(&self, u: &DesignVector) -> Result<Coefficients> {
        let wing = loft_design(u)?;
        // a single run's evaluations are sequential; starts run side by side
        let field = distance_field_of(&wing, &self.grid, Exec::Sequential)?;
        Ok(Coefficients {
            cl: self.cl.predict_field(&field.phi)?,
            cdi: self.cdi.predict_field(&field.phi)?,
        })
    }
}

/// The full-order solver used in place of the surrogates.
pub struct FomSurrogate(pub SolverSettings);

impl Surrogate for FomSurrogate {
    fn coefficients(&self, u: &DesignVector) -> Result<Coefficients> {
        let r = evaluate_design(u, &self.0)?;
        Ok(Coefficients { cl: r.cl(), cdi: r.cdi() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WingSettings {
    /// Minimum thickness-to-chord ratio.
    pub tc_star: f64,
    /// Design lift coefficient.
    pub cl_star: f64,
    /// Lift tolerance as a fraction of the achieved lift coefficient.
    pub eps_fraction: f64,
    /// Positive factor applied to the drag objective inside the solver.
    pub objective_scale: f64,
    pub sqp: SqpOptions,
}

impl Default for WingSettings {
    fn default() -> Self {
        WingSettings {
            tc_star: 0.08,
            cl_star: 0.42,
            eps_fraction: 0.05,
            objective_scale: 100.0,
            sqp: SqpOptions::default(),
        }
    }
}

impl WingSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.objective_scale > 0.0 && self.objective_scale.is_finite()) {
            return Err(Error::validation("objective scale must be positive"));
        }
        if !(self.eps_fraction >= 0.0 && self.tc_star.is_finite() && self.cl_star.is_finite()) {
            return Err(Error::validation("constraint targets must be finite, tolerance non-negative"));
        }
        if !(self.sqp.fd_rel_step > 0.0 && self.sqp.fd_rel_step < 0.5) {
            return Err(Error::validation("finite-difference step must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// `c1 = tc* - max t_c`, `c2 = |CL* - CL| - eps * CL`.
pub fn constraint_values(max_tc: f64, cl: f64, settings: &WingSettings) -> [f64; 2] {
    [
        settings.tc_star - max_tc,
        (settings.cl_star - cl).abs() - settings.eps_fraction * cl,
    ]
}

/// Constraint values of design `u` given its predicted lift coefficient.
/// The thickness term is the largest sectional thickness ratio, exactly
/// as the formulation states it, so only the thickest section is bound.
pub fn evaluate_constraints(u: &DesignVector, cl: f64, settings: &WingSettings) -> Result<[f64; 2]> {
    let (sections, _) = decode_design(u)?;
    let max_tc = thickness_ratios(&sections).into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(constraint_values(max_tc, cl, settings))
}

/// The wing problem in normalized variables `z in [0, 1]^33`,
/// `u = lower + z * (upper - lower)`.
pub struct WingProblem<'a, S: Surrogate + ?Sized> {
    pub surrogate: &'a S,
    pub settings: WingSettings,
    lower_u: Vec<f64>,
    upper_u: Vec<f64>,
    zeros: Vec<f64>,
    ones: Vec<f64>,
}

impl<'a, S: Surrogate + ?Sized> WingProblem<'a, S> {
    pub fn new(surrogate: &'a S, bounds: &BoundsConfig, settings: WingSettings) -> Result<Self> {
        bounds.validate()?;
        settings.validate()?;
        let (lo, hi) = bounds.bounds();
        Ok(WingProblem {
            surrogate,
            settings,
            lower_u: lo.into_inner(),
            upper_u: hi.into_inner(),
            zeros: vec![0.0; N_DESIGN],
            ones: vec![1.0; N_DESIGN],
        })
    }

    pub fn to_design(&self, z: &[f64]) -> Result<DesignVector> {
        DesignVector::new(
            z.iter()
                .zip(self.lower_u.iter().zip(&self.upper_u))
                .map(|(z, (l, h))| l + z * (h - l))
                .collect(),
        )
    }

    pub fn to_normalized(&self, u: &DesignVector) -> Vec<f64> {
        u.as_slice()
            .iter()
            .zip(self.lower_u.iter().zip(&self.upper_u))
            .map(|(u, (l, h))| (u - l) / (h - l))
            .collect()
    }

    /// Surrogate coefficients and constraint values of a design.
    pub fn assess(&self, u: &DesignVector) -> Result<(Coefficients, [f64; 2])> {
        let coeffs = self.surrogate.coefficients(u)?;
        let c = evaluate_constraints(u, coeffs.cl, &self.settings)?;
        Ok((coeffs, c))
    }

    pub fn minimize(&self, u0: &DesignVector) -> Result<OptResult> {
        sqp_minimize(self, &self.to_normalized(u0), &self.settings.sqp, Exec::Sequential)
    }
}

impl<S: Surrogate + ?Sized> Problem for WingProblem<'_, S> {
    fn lower(&self) -> &[f64] {
        &self.zeros
    }

    fn upper(&self) -> &[f64] {
        &self.ones
    }

    fn n_constraints(&self) -> usize {
        2
    }

    fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let u = self.to_design(z)?;
        let (coeffs, c) = self.assess(&u)?;
        Ok(Evaluation {
            objective: self.settings.objective_scale * coeffs.cdi,
            constraints: c.to_vec(),
        })
    }
}

/// One optimization run of a multi-start campaign.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WingRun {
    pub start: usize,
    /// Internal units (radians for angles).
    pub u_start: Vec<f64>,
    pub u_final: Option<Vec<f64>>,
    pub status: Option<OptStatus>,
    pub cl_surrogate: Option<f64>,
    pub cdi_surrogate: Option<f64>,
    pub constraints: Option<[f64; 2]>,
    /// SQP record in normalized variables; the objective carries the scale.
    pub result: Option<OptResult>,
    pub error: Option<String>,
}

impl WingRun {
    pub fn converged(&self) -> bool {
        self.status == Some(OptStatus::Converged)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiStartReport {
    pub runs: Vec<WingRun>,
    /// Indices into `runs` that converged to a feasible design.
    pub converged: Vec<usize>,
    /// Index of the converged run with the lowest surrogate drag.
    pub best: Option<usize>,
}

fn run_one<S: Surrogate + ?Sized>(problem: &WingProblem<'_, S>, start: usize, u0: &DesignVector) -> WingRun {
    let mut run = WingRun {
        start,
        u_start: u0.as_slice().to_vec(),
        u_final: None,
        status: None,
        cl_surrogate: None,
        cdi_surrogate: None,
        constraints: None,
        result: None,
        error: None,
    };
    let outcome = problem.minimize(u0).and_then(|r| {
        let u = problem.to_design(&r.x_final)?;
        let (coeffs, c) = problem.assess(&u)?;
        Ok((r, u, coeffs, c))
    });
    match outcome {
        Ok((r, u, coeffs, c)) => {
            run.u_final = Some(u.into_inner());
            run.status = Some(r.status);
            run.cl_surrogate = Some(coeffs.cl);
            run.cdi_surrogate = Some(coeffs.cdi);
            run.constraints = Some(c);
            run.result = Some(r);
        }
        Err(e) => run.error = Some(e.to_string()),
    }
    run
}

/// Independent SQP runs from every start; failures stay with their run.
/// `progress` sees each run as it finishes.
pub fn multi_start<S: Surrogate + ?Sized>(
    problem: &WingProblem<'_, S>,
    starts: &[DesignVector],
    exec: Exec,
    progress: &(dyn Fn(&WingRun) + Sync),
) -> MultiStartReport {
    let indexed: Vec<(usize, &DesignVector)> = starts.iter().enumerate().collect();
    let runs = exec.map_slice(&indexed, |&(i, u)| {
        let run = run_one(problem, i, u);
        progress(&run);
        run
    });
    let converged: Vec<usize> = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.converged())
        .map(|(i, _)| i)
        .collect();
    let best = converged
        .iter()
        .copied()
        .min_by(|&a, &b| runs[a].cdi_surrogate.unwrap().total_cmp(&runs[b].cdi_surrogate.unwrap()));
    MultiStartReport { runs, converged, best }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftDistribution {
    pub y: Vec<f64>,
    pub cl: Vec<f64>,
    pub cl_elliptic: Vec<f64>,
    /// RMS distance between `cl` and `cl_elliptic`.
    pub l2: f64,
}

impl LiftDistribution {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "y,cl,cl_elliptic")?;
        for i in 0..self.y.len() {
            writeln!(w, "{:e},{:e},{:e}", self.y[i], self.cl[i], self.cl_elliptic[i])?;
        }
        Ok(())
    }
}

fn lift_of(u: &[f64], solver: &SolverSettings) -> Result<(f64, f64, LiftDistribution)> {
    let r = evaluate_design(&DesignVector::new(u.to_vec())?, solver)?;
    let (y, cl, cl_elliptic) = r.distributions();
    let l2 = l2_distance(&cl, &cl_elliptic);
    Ok((r.cl(), r.cdi(), LiftDistribution { y, cl, cl_elliptic, l2 }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifiedDesign {
    pub start: usize,
    pub cl_surrogate: f64,
    pub cdi_surrogate: f64,
    pub cl_fom: f64,
    pub cdi_fom: f64,
    /// Constraint values with the full-order lift in place of the surrogate.
    pub constraints_fom: [f64; 2],
    pub initial: LiftDistribution,
    pub final_: LiftDistribution,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub designs: Vec<VerifiedDesign>,
    /// Runs whose full-order evaluation failed, with the message.
    pub failures: Vec<(usize, String)>,
    /// Surrogate against full-order induced drag over `designs`.
    pub r2_cdi: Option<f64>,
    pub r2_cl: Option<f64>,
}

/// Re-evaluate every converged run with the full-order solver.
pub fn fom_verify(report: &MultiStartReport, solver: &SolverSettings, settings: &WingSettings, exec: Exec) -> VerificationReport {
    let picked: Vec<&WingRun> = report.converged.iter().map(|&i| &report.runs[i]).collect();
    let results = exec.map_slice(&picked, |run| -> Result<VerifiedDesign> {
        let u_final = run.u_final.as_ref().expect("converged runs carry a design");
        let (cl_fom, cdi_fom, final_) = lift_of(u_final, solver)?;
        let (_, _, initial) = lift_of(&run.u_start, solver)?;
        let constraints_fom = evaluate_constraints(&DesignVector::new(u_final.clone())?, cl_fom, settings)?;
        Ok(VerifiedDesign {
            start: run.start,
            cl_surrogate: run.cl_surrogate.unwrap_or(f64::NAN),
            cdi_surrogate: run.cdi_surrogate.unwrap_or(f64::NAN),
            cl_fom,
            cdi_fom,
            constraints_fom,
            initial,
            final_,
        })
    });
    let mut designs = Vec::new();
    let mut failures = Vec::new();
    for (run, r) in picked.iter().zip(results) {
        match r {
            Ok(d) => designs.push(d),
            Err(e) => failures.push((run.start, e.to_string())),
        }
    }
    let r2 = |p: fn(&VerifiedDesign) -> (f64, f64)| {
        let (s, f): (Vec<f64>, Vec<f64>) = designs.iter().map(p).unzip();
        r_squared(&s, &f).ok()
    };
    let r2_cdi = r2(|d| (d.cdi_surrogate, d.cdi_fom));
    let r2_cl = r2(|d| (d.cl_surrogate, d.cl_fom));
    VerificationReport {
        designs,
        failures,
        r2_cdi,
        r2_cl,
    }
}

/// Campaign table: one row per start.
pub fn write_campaign_csv<W: Write>(mut w: W, report: &MultiStartReport, verification: &VerificationReport) -> Result<()> {
    writeln!(w, "start,status,converged,feasible,CDi_surrogate,CL_surrogate,CDi_FOM,CL_FOM,iterations")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for run in &report.runs {
        let fom = verification.designs.iter().find(|d| d.start == run.start);
        let status = match (&run.status, &run.error) {
            (Some(s), _) => serde_json::to_value(s)?.as_str().unwrap_or_default().to_string(),
            (None, _) => "error".to_string(),
        };
        let feasible = run.constraints.is_some_and(|c| c.iter().all(|&v| v <= 1e-6));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            run.start,
            status,
            run.converged(),
            feasible,
            opt(run.cdi_surrogate),
            opt(run.cl_surrogate),
            opt(fom.map(|d| d.cdi_fom)),
            opt(fom.map(|d| d.cl_fom)),
            run.result.as_ref().map(|r| r.iterations.to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_arithmetic() {
        let s = WingSettings::default();
        let c = constraint_values(0.10, 0.42, &s);
        assert!((c[0] + 0.02).abs() < 1e-15);
        assert!((c[1] + 0.021).abs() < 1e-15);
        let c = constraint_values(0.10, 0.30, &s);
        assert!((c[1] - 0.105).abs() < 1e-15);
    }

    #[test]
    fn thickness_constraint_uses_thickest_section() {
        let (lo, hi) = crate::geometry::design_bounds();
        let mid = DesignVector::new(lo.as_slice().iter().zip(hi.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect()).unwrap();
        let (sections, _) = decode_design(&mid).unwrap();
        let tc = thickness_ratios(&sections);
        let c = evaluate_constraints(&mid, 0.42, &WingSettings::default()).unwrap();
        let max = tc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(c[0], 0.08 - max);
    }

    struct Fake;

    impl Surrogate for Fake {
        fn coefficients(&self, u: &DesignVector) -> Result<Coefficients> {
            let v = u.as_slice();
            Ok(Coefficients {
                cl: 0.3 + 2.0 * v[N_DESIGN - 1],
                cdi: 0.01 + 0.001 * v[7],
            })
        }
    }

    #[test]
    fn normalized_round_trip_and_objective_scale() {
        let p = WingProblem::new(&Fake, &BoundsConfig::default(), WingSettings::default()).unwrap();
        let z: Vec<f64> = (0..N_DESIGN).map(|i| (i as f64 * 0.37).fract()).collect();
        let u = p.to_design(&z).unwrap();
        for (a, b) in p.to_normalized(&u).iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        let e = p.evaluate(&z).unwrap();
        let cdi = Fake.coefficients(&u).unwrap().cdi;
        assert!((e.objective - 100.0 * cdi).abs() < 1e-12);
    }

    #[test]
    fn failed_start_is_isolated() {
        let p = WingProblem::new(&Fake, &BoundsConfig::default(), WingSettings::default()).unwrap();
        let (lo, hi) = crate::geometry::design_bounds();
        let mut outside = hi.as_slice().to_vec();
        outside[0] *= 3.0;
        let starts = vec![DesignVector::new(outside).unwrap(), lo];
        let mut settings = WingSettings::default();
        settings.sqp.max_iter = 2;
        let p = WingProblem { settings, ..p };
        let rep = multi_start(&p, &starts, Exec::Sequential, &|_| {});
        assert!(rep.runs[0].error.is_some());
        assert!(rep.runs[1].error.is_none() && rep.runs[1].result.is_some());
    }
}

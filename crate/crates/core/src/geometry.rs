//! Parametric wing geometry.
//!
//! A wing is described by 33 design variables: four airfoil sections of
//! eight variables each (root to tip) followed by the wing incidence. Each
//! section is a Ferguson airfoil, i.e. one cubic Hermite curve per surface
//! running from the leading edge `(0, 0)` to the trailing edge `(chord, 0)`.
//!
//! Angles are radians everywhere in this module. The JSON form of a design
//! vector (see [`DesignVector::to_degrees`]) uses degrees.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_SECTIONS: usize = 4;
pub const VARS_PER_SECTION: usize = 8;
pub const N_DESIGN: usize = N_SECTIONS * VARS_PER_SECTION + 1;
pub const INCIDENCE_INDEX: usize = N_DESIGN - 1;
pub const DEFAULT_HALF_SPAN: f64 = 2.0;
pub const DEFAULT_SPAN_POINTS: usize = 50;
pub const DEFAULT_CHORD_POINTS: usize = 50;

/// Offsets within a section block that hold angles.
const ANGLE_OFFSETS: [usize; 3] = [4, 5, 6];

/// Chordwise position of the twist pivot and of the aligned spanwise axis.
const PIVOT_FRACTION: f64 = 0.25;
/// Root quarter-chord x coordinate; all sections share this quarter-chord line.
const QUARTER_CHORD_X: f64 = 0.25;

pub fn is_angle_index(i: usize) -> bool {
    i == INCIDENCE_INDEX || (i < INCIDENCE_INDEX && ANGLE_OFFSETS.contains(&(i % VARS_PER_SECTION)))
}

/// Flat 33-entry design vector in internal units (radians for angles).
#[derive(Clone, Debug, PartialEq)]
pub struct DesignVector(Vec<f64>);

impl DesignVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != N_DESIGN {
            return Err(Error::dimension(format!(
                "design vector has {} entries, expected {N_DESIGN}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("design entry {} is not finite", i + 1)));
        }
        Ok(DesignVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn incidence(&self) -> f64 {
        self.0[INCIDENCE_INDEX]
    }

    /// External representation: angle entries converted to degrees.
    pub fn to_degrees(&self) -> Vec<f64> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &v)| if is_angle_index(i) { v.to_degrees() } else { v })
            .collect()
    }

    pub fn from_degrees(values: Vec<f64>) -> Result<Self> {
        let v = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| if is_angle_index(i) { v.to_radians() } else { v })
            .collect();
        DesignVector::new(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_degrees()).expect("f64 array serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Vec<f64> = serde_json::from_str(text)?;
        DesignVector::from_degrees(v)
    }
}

/// One Ferguson airfoil section.
///
/// Tangent magnitudes are fractions of the chord. The trailing-edge angles
/// are measured from the chord line, above it for the upper surface and
/// below it for the lower one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FergusonSection {
    pub t_le_up: f64,
    pub t_le_lo: f64,
    pub t_te_up: f64,
    pub t_te_lo: f64,
    pub theta_te_up: f64,
    pub theta_te_lo: f64,
    pub twist: f64,
    pub chord: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Upper,
    Lower,
}

fn hermite(s: f64, p0: [f64; 2], t0: [f64; 2], p1: [f64; 2], t1: [f64; 2]) -> [f64; 2] {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    [
        h00 * p0[0] + h10 * t0[0] + h01 * p1[0] + h11 * t1[0],
        h00 * p0[1] + h10 * t0[1] + h01 * p1[1] + h11 * t1[1],
    ]
}

/// Cosine-clustered curve parameters on `[0, 1]`.
pub fn cosine_spacing(n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i == 0 {
                0.0
            } else if i == n - 1 {
                1.0
            } else {
                0.5 * (1.0 - (PI * i as f64 / last).cos())
            }
        })
        .collect()
}

impl FergusonSection {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.t_le_up,
            self.t_le_lo,
            self.t_te_up,
            self.t_te_lo,
            self.theta_te_up,
            self.theta_te_lo,
            self.twist,
            self.chord,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("section parameter is not finite"));
        }
        let tangents = [self.t_le_up, self.t_le_lo, self.t_te_up, self.t_te_lo];
        if tangents.iter().any(|&t| t <= 0.0) {
            return Err(Error::validation("tangent magnitudes must be positive"));
        }
        if self.chord <= 0.0 {
            return Err(Error::validation("chord must be positive"));
        }
        Ok(())
    }

    /// Untwisted point on a unit-chord version of this section.
    pub fn unit_point(&self, surface: Surface, s: f64) -> [f64; 2] {
        match surface {
            Surface::Upper => hermite(
                s,
                [0.0, 0.0],
                [0.0, self.t_le_up],
                [1.0, 0.0],
                [
                    self.t_te_up * self.theta_te_up.cos(),
                    -self.t_te_up * self.theta_te_up.sin(),
                ],
            ),
            Surface::Lower => hermite(
                s,
                [0.0, 0.0],
                [0.0, -self.t_le_lo],
                [1.0, 0.0],
                [
                    self.t_te_lo * self.theta_te_lo.cos(),
                    self.t_te_lo * self.theta_te_lo.sin(),
                ],
            ),
        }
    }

    /// Point on the scaled and twisted section in its local frame.
    pub fn point(&self, surface: Surface, s: f64) -> [f64; 2] {
        let [ux, uz] = self.unit_point(surface, s);
        let pivot = PIVOT_FRACTION * self.chord;
        let dx = self.chord * ux - pivot;
        let dz = self.chord * uz;
        let [rx, rz] = pitch(dx, dz, self.twist);
        [pivot + rx, rz]
    }
}

/// Rigid nose-up rotation in the x-z plane by `angle`.
fn pitch(dx: f64, dz: f64, angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [dx * c + dz * s, -dx * s + dz * c]
}

/// Ordered upper and lower curves from leading edge to trailing edge.
#[derive(Clone, Debug, PartialEq)]
pub struct AirfoilCurves {
    pub upper: Vec<[f64; 2]>,
    pub lower: Vec<[f64; 2]>,
}

pub fn decode_design(u: &DesignVector) -> Result<([FergusonSection; N_SECTIONS], f64)> {
    let v = u.as_slice();
    let mut sections = [FergusonSection {
        t_le_up: 0.0,
        t_le_lo: 0.0,
        t_te_up: 0.0,
        t_te_lo: 0.0,
        theta_te_up: 0.0,
        theta_te_lo: 0.0,
        twist: 0.0,
        chord: 0.0,
    }; N_SECTIONS];
    for (k, sec) in sections.iter_mut().enumerate() {
        let b = &v[k * VARS_PER_SECTION..(k + 1) * VARS_PER_SECTION];
        *sec = FergusonSection {
            t_le_up: b[0],
            t_le_lo: b[1],
            t_te_up: b[2],
            t_te_lo: b[3],
            theta_te_up: b[4],
            theta_te_lo: b[5],
            twist: b[6],
            chord: b[7],
        };
        sec.validate()
            .map_err(|e| Error::validation(format!("section {}: {e}", k + 1)))?;
    }
    Ok((sections, v[INCIDENCE_INDEX]))
}

pub fn encode_design(sections: &[FergusonSection; N_SECTIONS], incidence: f64) -> Result<DesignVector> {
    let mut v = Vec::with_capacity(N_DESIGN);
    for s in sections {
        v.extend_from_slice(&[
            s.t_le_up,
            s.t_le_lo,
            s.t_te_up,
            s.t_te_lo,
            s.theta_te_up,
            s.theta_te_lo,
            s.twist,
            s.chord,
        ]);
    }
    v.push(incidence);
    DesignVector::new(v)
}

pub fn ferguson_airfoil(section: &FergusonSection, n_points: usize) -> Result<AirfoilCurves> {
    if n_points < 10 {
        return Err(Error::validation(format!("need at least 10 points per surface, got {n_points}")));
    }
    if [
        section.t_le_up,
        section.t_le_lo,
        section.t_te_up,
        section.t_te_lo,
        section.theta_te_up,
        section.theta_te_lo,
        section.twist,
        section.chord,
    ]
    .iter()
    .any(|v| !v.is_finite())
    {
        return Err(Error::validation("section parameter is not finite"));
    }
    let s = cosine_spacing(n_points);
    Ok(AirfoilCurves {
        upper: s.iter().map(|&s| section.point(Surface::Upper, s)).collect(),
        lower: s.iter().map(|&s| section.point(Surface::Lower, s)).collect(),
    })
}

/// Section curves placed in the wing frame (x chordwise, z up) after twist,
/// quarter-chord alignment and wing incidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedSection {
    pub upper: Vec<[f64; 2]>,
    pub lower: Vec<[f64; 2]>,
}

impl PlacedSection {
    fn lerp(a: &PlacedSection, b: &PlacedSection, t: f64) -> PlacedSection {
        let mix = |p: &[[f64; 2]], q: &[[f64; 2]]| -> Vec<[f64; 2]> {
            p.iter()
                .zip(q)
                .map(|(p, q)| [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])])
                .collect()
        };
        PlacedSection {
            upper: mix(&a.upper, &b.upper),
            lower: mix(&a.lower, &b.lower),
        }
    }

    /// Closed contour: upper surface leading edge to trailing edge, then the
    /// lower surface back to the leading edge.
    pub fn contour(&self) -> impl Iterator<Item = &[f64; 2]> {
        self.upper.iter().chain(self.lower.iter().rev().skip(1))
    }
}

/// Lofted half-wing surface, root at `y = 0`.
#[derive(Clone, Debug)]
pub struct WingSurface {
    pub sections: [FergusonSection; N_SECTIONS],
    pub incidence: f64,
    pub half_span: f64,
    pub n_span: usize,
    pub n_chord: usize,
    stations: Vec<PlacedSection>,
    /// Upper-surface points, index `j * n_chord + i` (span `j`, chord `i`).
    pub upper: Vec<[f64; 3]>,
    /// Lower-surface points, same layout as `upper`.
    pub lower: Vec<[f64; 3]>,
}

impl WingSurface {
    pub fn point(&self, span: usize, chord: usize, surface: Surface) -> [f64; 3] {
        let idx = span * self.n_chord + chord;
        match surface {
            Surface::Upper => self.upper[idx],
            Surface::Lower => self.lower[idx],
        }
    }

    /// Spanwise position of defining station `k`.
    pub fn station_y(&self, k: usize) -> f64 {
        self.half_span * k as f64 / (N_SECTIONS - 1) as f64
    }

    /// Section at an arbitrary span position, linearly interpolated between
    /// the bracketing defining stations. `None` outside `[0, half_span]`.
    pub fn section_at(&self, y: f64) -> Option<PlacedSection> {
        if !(0.0..=self.half_span).contains(&y) {
            return None;
        }
        let spacing = self.half_span / (N_SECTIONS - 1) as f64;
        let k = ((y / spacing).floor() as usize).min(N_SECTIONS - 2);
        let t = (y - self.station_y(k)) / (self.station_y(k + 1) - self.station_y(k));
        Some(PlacedSection::lerp(&self.stations[k], &self.stations[k + 1], t))
    }

    /// Axis-aligned bounding box of the sampled surface points.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.upper.iter().chain(&self.lower) {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn chord_at(&self, y: f64) -> f64 {
        interpolate_stations(&self.sections.map(|s| s.chord), self.half_span, y)
    }

    pub fn twist_at(&self, y: f64) -> f64 {
        interpolate_stations(&self.sections.map(|s| s.twist), self.half_span, y)
    }

    /// Half-wing planform area with the chord varying linearly between stations.
    pub fn half_area(&self) -> f64 {
        let dy = self.half_span / (N_SECTIONS - 1) as f64;
        self.sections
            .windows(2)
            .map(|w| 0.5 * (w[0].chord + w[1].chord) * dy)
            .sum()
    }
}

/// Piecewise-linear interpolation of per-station values along the span.
pub fn interpolate_stations(values: &[f64; N_SECTIONS], half_span: f64, y: f64) -> f64 {
    let spacing = half_span / (N_SECTIONS - 1) as f64;
    let y = y.clamp(0.0, half_span);
    let k = ((y / spacing).floor() as usize).min(N_SECTIONS - 2);
    let t = (y - spacing * k as f64) / spacing;
    values[k] + t * (values[k + 1] - values[k])
}

fn place_section(section: &FergusonSection, s: &[f64], incidence: f64) -> PlacedSection {
    let shift = QUARTER_CHORD_X - PIVOT_FRACTION * section.chord;
    let place = |surface| -> Vec<[f64; 2]> {
        s.iter()
            .map(|&s| {
                let [x, z] = section.point(surface, s);
                let [rx, rz] = pitch(x + shift - QUARTER_CHORD_X, z, incidence);
                [QUARTER_CHORD_X + rx, rz]
            })
            .collect()
    };
    PlacedSection {
        upper: place(Surface::Upper),
        lower: place(Surface::Lower),
    }
}

pub fn loft_wing(
    sections: &[FergusonSection; N_SECTIONS],
    incidence: f64,
    half_span: f64,
    n_span: usize,
    n_chord: usize,
) -> Result<WingSurface> {
    if n_span < 4 || n_chord < 4 {
        return Err(Error::validation(format!(
            "loft resolution must be at least 4x4, got {n_span}x{n_chord}"
        )));
    }
    if !(half_span > 0.0 && half_span.is_finite()) || !incidence.is_finite() {
        return Err(Error::validation("half span must be positive and incidence finite"));
    }
    for (k, s) in sections.iter().enumerate() {
        s.validate()
            .map_err(|e| Error::validation(format!("section {}: {e}", k + 1)))?;
    }
    let s = cosine_spacing(n_chord);
    let stations: Vec<PlacedSection> = sections
        .iter()
        .map(|sec| place_section(sec, &s, incidence))
        .collect();
    let mut wing = WingSurface {
        sections: *sections,
        incidence,
        half_span,
        n_span,
        n_chord,
        stations,
        upper: Vec::with_capacity(n_span * n_chord),
        lower: Vec::with_capacity(n_span * n_chord),
    };
    for j in 0..n_span {
        let y = half_span * j as f64 / (n_span - 1) as f64;
        let sec = wing.section_at(y).expect("station inside span");
        wing.upper.extend(sec.upper.iter().map(|p| [p[0], y, p[1]]));
        wing.lower.extend(sec.lower.iter().map(|p| [p[0], y, p[1]]));
    }
    Ok(wing)
}

/// Loft with the default half span and surface resolution.
pub fn loft_design(u: &DesignVector) -> Result<WingSurface> {
    let (sections, incidence) = decode_design(u)?;
    loft_wing(&sections, incidence, DEFAULT_HALF_SPAN, DEFAULT_SPAN_POINTS, DEFAULT_CHORD_POINTS)
}

/// Parameter on the lower surface whose x coordinate equals `x` (unit chord,
/// untwisted). The chordwise coordinate is monotone in the curve parameter
/// for tangent magnitudes below 3.
fn lower_param_at(section: &FergusonSection, x: f64) -> f64 {
    let (mut a, mut b) = (0.0_f64, 1.0_f64);
    for _ in 0..64 {
        let m = 0.5 * (a + b);
        if section.unit_point(Surface::Lower, m)[0] < x {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn thickness_at(section: &FergusonSection, s: f64) -> f64 {
    let [x, zu] = section.unit_point(Surface::Upper, s);
    let zl = section.unit_point(Surface::Lower, lower_param_at(section, x))[1];
    zu - zl
}

/// Maximum thickness over chord of one untwisted section.
pub fn section_thickness_ratio(section: &FergusonSection) -> f64 {
    const SAMPLES: usize = 400;
    let (best, _) = (0..=SAMPLES)
        .map(|i| {
            let s = i as f64 / SAMPLES as f64;
            (i, thickness_at(section, s))
        })
        .fold((0usize, f64::NEG_INFINITY), |acc, (i, t)| if t > acc.1 { (i, t) } else { acc });
    // golden-section refinement inside the bracketing samples
    let mut a = (best.saturating_sub(1)) as f64 / SAMPLES as f64;
    let mut b = ((best + 1).min(SAMPLES)) as f64 / SAMPLES as f64;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (thickness_at(section, c), thickness_at(section, d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = thickness_at(section, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = thickness_at(section, d);
        }
    }
    let sampled = (0..=SAMPLES)
        .map(|i| thickness_at(section, i as f64 / SAMPLES as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    sampled.max(fc).max(fd).max(0.0)
}

pub fn thickness_ratios(sections: &[FergusonSection; N_SECTIONS]) -> [f64; N_SECTIONS] {
    sections.map(|s| section_thickness_ratio(&s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }
}

/// Per-group variable bounds. Angles are in degrees, as in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub tangent: Range,
    pub te_angle_deg: Range,
    pub twist_deg: Range,
    pub chord: Range,
}

pub const INCIDENCE_BOUNDS_DEG: Range = Range::new(-3.0, 10.0);

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            tangent: Range::new(0.05, 0.60),
            te_angle_deg: Range::new(1.0, 30.0),
            twist_deg: Range::new(-5.0, 5.0),
            chord: Range::new(0.5, 1.0),
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        let groups = [
            ("tangent", self.tangent),
            ("te_angle_deg", self.te_angle_deg),
            ("twist_deg", self.twist_deg),
            ("chord", self.chord),
        ];
        for (name, r) in groups {
            if !(r.min.is_finite() && r.max.is_finite() && r.min < r.max) {
                return Err(Error::validation(format!("bounds group {name}: need finite min < max")));
            }
        }
        if self.tangent.min <= 0.0 || self.chord.min <= 0.0 {
            return Err(Error::validation("tangent and chord lower bounds must be positive"));
        }
        Ok(())
    }

    /// Lower and upper bound vectors in internal units.
    pub fn bounds(&self) -> (DesignVector, DesignVector) {
        let mut lo = Vec::with_capacity(N_DESIGN);
        let mut hi = Vec::with_capacity(N_DESIGN);
        for _ in 0..N_SECTIONS {
            let rad = |r: Range| Range::new(r.min.to_radians(), r.max.to_radians());
            let block = [
                self.tangent,
                self.tangent,
                self.tangent,
                self.tangent,
                rad(self.te_angle_deg),
                rad(self.te_angle_deg),
                rad(self.twist_deg),
                self.chord,
            ];
            lo.extend(block.iter().map(|r| r.min));
            hi.extend(block.iter().map(|r| r.max));
        }
        lo.push(INCIDENCE_BOUNDS_DEG.min.to_radians());
        hi.push(INCIDENCE_BOUNDS_DEG.max.to_radians());
        (
            DesignVector::new(lo).expect("finite bounds"),
            DesignVector::new(hi).expect("finite bounds"),
        )
    }
}

pub fn design_bounds() -> (DesignVector, DesignVector) {
    BoundsConfig::default().bounds()
}

//! Design-of-experiments campaign: Latin-hypercube sampling, full-order
//! labeling, level-set tensor files, seeded splits and fit metrics.

use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aero::{evaluate_wing, SolverSettings};
use crate::cnn::{SampleSet, Target};
use crate::exec::Exec;
use crate::geometry::{loft_design, BoundsConfig, DesignVector};
use crate::levelset::{distance_field, GridSpec, LevelSetField};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEVELSET_DIR: &str = "levelsets";

/// `n` samples in `d` dimensions with exactly one sample per equal-width
/// bin in every dimension.
pub fn latin_hypercube(n: usize, lower: &[f64], upper: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = lower.len();
    if n == 0 || d == 0 || upper.len() != d {
        return Err(Error::validation("latin hypercube needs n >= 1 and matching bound vectors"));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
        return Err(Error::validation("latin hypercube bounds must satisfy lower <= upper"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![vec![0.0; d]; n];
    let mut bins: Vec<usize> = (0..n).collect();
    for j in 0..d {
        bins.shuffle(&mut rng);
        let width = upper[j] - lower[j];
        for (s, &b) in samples.iter_mut().zip(&bins) {
            let t: f64 = rng.random_range(0.0..1.0);
            // keep rounding from pushing a point across its bin edge
            let v = lower[j] + width * (b as f64 + t) / n as f64;
            let lo = lower[j] + width * b as f64 / n as f64;
            let hi = lower[j] + width * (b + 1) as f64 / n as f64;
            s[j] = v.clamp(lo, hi);
        }
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?} (train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    /// Internal units (angles in radians).
    pub design: Vec<f64>,
    #[serde(rename = "CL")]
    pub cl: Option<f64>,
    #[serde(rename = "CDi")]
    pub cdi: Option<f64>,
    /// Relative to the manifest directory.
    pub levelset_path: Option<String>,
    pub split: Option<Split>,
    pub failure: Option<String>,
}

impl DatasetRecord {
    pub fn is_labeled(&self) -> bool {
        self.failure.is_none() && self.cl.is_some() && self.cdi.is_some() && self.levelset_path.is_some()
    }

    pub fn target(&self, target: Target) -> Option<f64> {
        match target {
            Target::Cl => self.cl,
            Target::Cdi => self.cdi,
        }
    }

    pub fn design_vector(&self) -> Result<DesignVector> {
        DesignVector::new(self.design.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Moments::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Moments { mean, variance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub count: usize,
    #[serde(rename = "CL")]
    pub cl: Moments,
    #[serde(rename = "CDi")]
    pub cdi: Moments,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub total: usize,
    pub failed: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub version: u32,
    pub seed: u64,
    pub bounds: BoundsConfig,
    pub solver: SolverSettings,
    pub grid: GridSpec,
    pub counts: SampleCounts,
    pub split_seed: Option<u64>,
    pub split_summary: Vec<SplitSummary>,
    pub records: Vec<DatasetRecord>,
}

impl CampaignManifest {
    pub fn labeled(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(|r| r.is_labeled())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.labeled().filter(move |r| r.split == Some(split))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let m: CampaignManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// `(design..., CL, CDi, split)` rows; angles in radians.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.records.first().map_or(0, |r| r.design.len());
        let cols: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        writeln!(w, "id,{},CL,CDi,split,failure", cols.join(","))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.records {
            let design: Vec<String> = r.design.iter().map(|v| format!("{v:e}")).collect();
            let failure = r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.id,
                design.join(","),
                opt(r.cl),
                opt(r.cdi),
                r.split.map_or("", Split::label),
                failure
            )?;
        }
        Ok(())
    }

    /// Tensor-backed sample set for one split and target.
    pub fn samples(&self, dir: &Path, split: Split, target: Target) -> Result<TensorSamples> {
        let mut paths = Vec::new();
        let mut targets = Vec::new();
        for r in self.in_split(split) {
            paths.push(dir.join(r.levelset_path.as_ref().expect("labeled record")));
            targets.push(r.target(target).expect("labeled record"));
        }
        Ok(TensorSamples {
            grid: self.grid,
            paths,
            targets,
        })
    }
}

/// Samples read from level-set tensor files on demand.
#[derive(Clone, Debug)]
pub struct TensorSamples {
    pub grid: GridSpec,
    pub paths: Vec<PathBuf>,
    pub targets: Vec<f64>,
}

impl SampleSet for TensorSamples {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn field(&self, i: usize) -> Result<Cow<'_, [f64]>> {
        Ok(Cow::Owned(LevelSetField::load(&self.paths[i], &self.grid)?.phi))
    }

    fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }
}

/// Label one design and write its tensor; failures are returned in the record.
fn label_design(
    dir: &Path,
    id: usize,
    design: &DesignVector,
    solver: &SolverSettings,
    grid: &GridSpec,
) -> DatasetRecord {
    let mut record = DatasetRecord {
        id,
        design: design.as_slice().to_vec(),
        cl: None,
        cdi: None,
        levelset_path: None,
        split: None,
        failure: None,
    };
    let run = || -> Result<(f64, f64, String)> {
        let wing = loft_design(design)?;
        let fom = evaluate_wing(&wing, solver)?;
        let (cl, cdi) = (fom.cl(), fom.cdi());
        if !cl.is_finite() || !cdi.is_finite() || cdi < 0.0 {
            return Err(Error::Numerical(format!("unphysical labels CL={cl}, CDi={cdi}")));
        }
        let field = distance_field(&wing, grid)?;
        let rel = format!("{LEVELSET_DIR}/{id:06}.lsf");
        field.save(&dir.join(&rel))?;
        Ok((cl, cdi, rel))
    };
    match run() {
        Ok((cl, cdi, rel)) => {
            record.cl = Some(cl);
            record.cdi = Some(cdi);
            record.levelset_path = Some(rel);
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    record
}

/// Settings shared by every record of a campaign.
#[derive(Clone, Debug, PartialEq)]
pub struct Campaign {
    pub bounds: BoundsConfig,
    pub solver: SolverSettings,
    pub grid: GridSpec,
    pub seed: u64,
}

/// Label every design, writing one tensor file per success under `dir`.
/// Records are in design order; `progress` is called with the number of
/// finished records after each one (in completion order).
pub fn generate_dataset(
    dir: &Path,
    designs: &[DesignVector],
    campaign: &Campaign,
    exec: Exec,
    progress: &(dyn Fn(usize) + Sync),
) -> Result<CampaignManifest> {
    let Campaign {
        bounds,
        solver,
        grid,
        seed,
    } = campaign;
    grid.validate()?;
    fs::create_dir_all(dir.join(LEVELSET_DIR))?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let records = exec.map(designs.len(), |i| {
        let r = label_design(dir, i, &designs[i], solver, grid);
        progress(done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1);
        r
    });
    let failed = records.iter().filter(|r| !r.is_labeled()).count();
    Ok(CampaignManifest {
        version: MANIFEST_VERSION,
        seed: *seed,
        bounds: bounds.clone(),
        solver: *solver,
        grid: *grid,
        counts: SampleCounts {
            total: records.len(),
            failed,
            ..SampleCounts::default()
        },
        split_seed: None,
        split_summary: Vec::new(),
        records,
    })
}

/// Seeded LHS designs within `bounds`.
pub fn sample_designs(n: usize, bounds: &BoundsConfig, seed: u64) -> Result<Vec<DesignVector>> {
    bounds.validate()?;
    let (lo, hi) = bounds.bounds();
    latin_hypercube(n, lo.as_slice(), hi.as_slice(), seed)?
        .into_iter()
        .map(DesignVector::new)
        .collect()
}

/// Scale planned `(train, val, test)` sizes to `available` labeled records,
/// keeping the planned fractions; train absorbs rounding.
pub fn scaled_proportions(planned: (usize, usize, usize), available: usize) -> (usize, usize, usize) {
    let total = planned.0 + planned.1 + planned.2;
    if total == available || total == 0 {
        return planned;
    }
    let f = available as f64 / total as f64;
    let val = (planned.1 as f64 * f).round() as usize;
    let test = (planned.2 as f64 * f).round() as usize;
    let val = val.min(available);
    let test = test.min(available - val);
    (available - val - test, val, test)
}

/// Seeded random partition of the labeled records into exactly the given
/// sizes, plus per-split label moments.
pub fn split_dataset(manifest: &mut CampaignManifest, sizes: (usize, usize, usize), seed: u64) -> Result<()> {
    let mut ids: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_labeled())
        .map(|(i, _)| i)
        .collect();
    let (train, val, test) = sizes;
    if train + val + test != ids.len() {
        return Err(Error::validation(format!(
            "split sizes {train}+{val}+{test} do not sum to {} labeled records",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    for r in &mut manifest.records {
        r.split = None;
    }
    for (k, &i) in ids.iter().enumerate() {
        manifest.records[i].split = Some(if k < train {
            Split::Train
        } else if k < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
    manifest.counts.train = train;
    manifest.counts.val = val;
    manifest.counts.test = test;
    manifest.split_seed = Some(seed);
    manifest.split_summary = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .map(|s| {
            let cl: Vec<f64> = manifest.in_split(s).filter_map(|r| r.cl).collect();
            let cdi: Vec<f64> = manifest.in_split(s).filter_map(|r| r.cdi).collect();
            SplitSummary {
                split: s,
                count: cl.len(),
                cl: Moments::of(&cl),
                cdi: Moments::of(&cdi),
            }
        })
        .collect();
    Ok(())
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::validation("r_squared needs equal, non-zero lengths"));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::validation("r_squared undefined for constant truths"));
    }
    let ss_res: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin_counts(samples: &[Vec<f64>], j: usize, lo: f64, hi: f64) -> Vec<usize> {
        let n = samples.len();
        let mut counts = vec![0; n];
        for s in samples {
            let b = (((s[j] - lo) / (hi - lo)) * n as f64).floor() as usize;
            counts[b.min(n - 1)] += 1;
        }
        counts
    }

    #[test]
    fn lhs_one_per_bin() {
        let s = latin_hypercube(4, &[0.0], &[1.0], 3).unwrap();
        assert_eq!(bin_counts(&s, 0, 0.0, 1.0), vec![1; 4]);
        let (lo, hi) = crate::geometry::design_bounds();
        let s = latin_hypercube(100, lo.as_slice(), hi.as_slice(), 9).unwrap();
        for j in 0..33 {
            assert_eq!(bin_counts(&s, j, lo.as_slice()[j], hi.as_slice()[j]), vec![1; 100]);
        }
    }

    #[test]
    fn lhs_is_seeded() {
        let a = latin_hypercube(10, &[0.0; 3], &[1.0; 3], 5).unwrap();
        let b = latin_hypercube(10, &[0.0; 3], &[1.0; 3], 5).unwrap();
        let c = latin_hypercube(10, &[0.0; 3], &[1.0; 3], 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(latin_hypercube(0, &[0.0], &[1.0], 1).is_err());
    }

    #[test]
    fn r_squared_reference_values() {
        let t = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert!(r_squared(&[3.5; 4], &t).unwrap().abs() < 1e-15);
        assert!(r_squared(&[1.0; 3], &[2.0; 3]).is_err());
    }

    #[test]
    fn proportions_scale_to_survivors() {
        assert_eq!(scaled_proportions((1600, 200, 200), 2000), (1600, 200, 200));
        assert_eq!(scaled_proportions((1600, 200, 200), 1990), (1592, 199, 199));
        assert_eq!(scaled_proportions((8, 1, 1), 3), (3, 0, 0));
    }

    fn fake_manifest(n: usize) -> CampaignManifest {
        CampaignManifest {
            version: MANIFEST_VERSION,
            seed: 0,
            bounds: BoundsConfig::default(),
            solver: SolverSettings::default(),
            grid: GridSpec::default(),
            counts: SampleCounts {
                total: n,
                ..SampleCounts::default()
            },
            split_seed: None,
            split_summary: Vec::new(),
            records: (0..n)
                .map(|i| DatasetRecord {
                    id: i,
                    design: vec![0.0; 33],
                    cl: Some(i as f64),
                    cdi: Some(0.01),
                    levelset_path: Some(format!("{i}.lsf")),
                    split: None,
                    failure: None,
                })
                .collect(),
        }
    }

    #[test]
    fn splits_are_exact_and_disjoint() {
        let mut m = fake_manifest(30);
        split_dataset(&mut m, (20, 6, 4), 1).unwrap();
        let count = |s| m.in_split(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (20, 6, 4));
        assert!(m.records.iter().all(|r| r.split.is_some()));
        let first: Vec<_> = m.records.iter().map(|r| r.split).collect();
        split_dataset(&mut m, (20, 6, 4), 2).unwrap();
        let second: Vec<_> = m.records.iter().map(|r| r.split).collect();
        assert_ne!(first, second);
        split_dataset(&mut m, (30, 0, 0), 2).unwrap();
        assert!(m.records.iter().all(|r| r.split == Some(Split::Train)));
        assert!(split_dataset(&mut m, (20, 6, 5), 2).is_err());
        let s = &m.split_summary[0];
        assert_eq!(s.count, 30);
        assert!((s.cl.mean - 14.5).abs() < 1e-12);
    }

    #[test]
    fn failed_records_are_excluded() {
        let mut m = fake_manifest(5);
        m.records[2].failure = Some("boom".into());
        m.records[2].cl = None;
        assert!(split_dataset(&mut m, (5, 0, 0), 0).is_err());
        split_dataset(&mut m, (3, 1, 0), 0).unwrap();
        assert_eq!(m.records[2].split, None);
    }

    #[test]
    fn smoke_campaign_writes_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec {
            dims: [12, 6, 8],
            ..GridSpec::default()
        };
        let bounds = BoundsConfig::default();
        let designs = sample_designs(3, &bounds, 4).unwrap();
        let solver = SolverSettings {
            panels: 60,
            stations: 8,
            coeffs: 8,
        };
        let campaign = Campaign {
            bounds,
            solver,
            grid,
            seed: 4,
        };
        let m = generate_dataset(dir.path(), &designs, &campaign, Exec::Parallel, &|_| {}).unwrap();
        assert_eq!(m.records.len(), 3);
        for r in m.labeled() {
            assert!(r.cdi.unwrap() >= 0.0);
            let f = LevelSetField::load(&dir.path().join(r.levelset_path.as_ref().unwrap()), &grid).unwrap();
            assert_eq!(f.phi.len(), 12 * 6 * 8);
        }
        m.save(dir.path()).unwrap();
        assert_eq!(CampaignManifest::load(dir.path()).unwrap(), m);
        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }
}

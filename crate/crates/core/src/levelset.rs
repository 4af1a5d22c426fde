//! Unsigned minimum-distance fields on a fixed Cartesian grid.
//!
//! Grid points inside the shape (or on its boundary) get zero; every other
//! point gets its Euclidean distance to the nearest boundary sample.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{PlacedSection, WingSurface};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSF1";
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dims: [48, 16, 32],
            lower: [-1.0, 0.0, -0.5],
            upper: [3.0, 2.0, 0.5],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::validation(format!("grid dims must be >= 2, got {:?}", self.dims)));
        }
        if (0..3).any(|d| !(self.lower[d] < self.upper[d]) || !self.upper[d].is_finite() || !self.lower[d].is_finite()) {
            return Err(Error::validation("grid bounds must be finite and ordered"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|d| (self.upper[d] - self.lower[d]) / (self.dims[d] - 1) as f64)
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let last = self.dims[axis] - 1;
        if i == last {
            self.upper[axis]
        } else {
            self.lower[axis] + (self.upper[axis] - self.lower[axis]) * i as f64 / last as f64
        }
    }

    pub fn point(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [self.coord(0, ix), self.coord(1, iy), self.coord(2, iz)]
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetField {
    pub spec: GridSpec,
    pub phi: Vec<f64>,
}

impl LevelSetField {
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.phi[self.spec.index(ix, iy, iz)]
    }
}

/// A closed shape that can be sampled for the distance field.
pub trait Shape: Sync {
    fn boundary_points(&self) -> Vec<[f64; 3]>;

    /// Interior mask over the grid in field layout.
    fn interior_mask(&self, spec: &GridSpec) -> Vec<bool>;
}

/// All upper and lower surface samples of the lofted wing.
pub fn surface_point_cloud(wing: &WingSurface) -> Vec<[f64; 3]> {
    wing.upper.iter().chain(&wing.lower).copied().collect()
}

/// Even-odd point-in-polygon test on a closed section contour.
fn contour_contains(section: &PlacedSection, x: f64, z: f64) -> bool {
    let pts: Vec<&[f64; 2]> = section.contour().collect();
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[j]);
        if (a[1] > z) != (b[1] > z) {
            let xc = a[0] + (z - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x < xc {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// True iff the point lies in the wing: within the span and inside the
/// interpolated section contour at its `y`.
pub fn inside_test(point: [f64; 3], wing: &WingSurface) -> bool {
    match wing.section_at(point[1]) {
        Some(sec) => contour_contains(&sec, point[0], point[2]),
        None => false,
    }
}

impl Shape for WingSurface {
    fn boundary_points(&self) -> Vec<[f64; 3]> {
        surface_point_cloud(self)
    }

    fn interior_mask(&self, spec: &GridSpec) -> Vec<bool> {
        let [m, n, p] = spec.dims;
        let mut mask = vec![false; spec.len()];
        for iy in 0..n {
            let y = spec.coord(1, iy);
            let Some(sec) = self.section_at(y) else { continue };
            let (mut x0, mut x1, mut z0, mut z1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for q in sec.contour() {
                x0 = x0.min(q[0]);
                x1 = x1.max(q[0]);
                z0 = z0.min(q[1]);
                z1 = z1.max(q[1]);
            }
            for ix in 0..m {
                let x = spec.coord(0, ix);
                if x < x0 || x > x1 {
                    continue;
                }
                for iz in 0..p {
                    let z = spec.coord(2, iz);
                    if z >= z0 && z <= z1 && contour_contains(&sec, x, z) {
                        mask[spec.index(ix, iy, iz)] = true;
                    }
                }
            }
        }
        mask
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

const LEAF_SIZE: usize = 8;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over the boundary samples for nearest-point queries.
/// Queries return the same minimum as a full scan.
struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        tree.build(0, points.len());
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &k in &self.order[start..end] {
            for d in 0..3 {
                lo[d] = lo[d].min(self.points[k][d]);
                hi[d] = hi[d].max(self.points[k][d]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = pts[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Squared distance to the nearest sample, or `bound` if none is
    /// strictly closer than `bound`.
    fn nearest_within(&self, q: [f64; 3], bound: f64) -> f64 {
        let mut best = bound;
        self.search(0, q, [0.0; 3], 0.0, &mut best);
        best
    }

    /// `off` holds per-axis gaps from `q` to the node's cell and `rd` their
    /// squared sum, a lower bound on any distance inside the node.
    fn search(&self, node: usize, q: [f64; 3], mut off: [f64; 3], rd: f64, best: &mut f64) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &k in &self.order[start..end] {
                    let d = dist2(q, self.points[k]);
                    if d < *best {
                        *best = d;
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right >= value
                let delta = q[axis] - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, off, rd, best);
                let old = off[axis];
                let far_rd = rd - old * old + delta * delta;
                if far_rd <= *best {
                    off[axis] = delta;
                    self.search(far, q, off, far_rd, best);
                }
            }
        }
    }

    fn nearest_dist2(&self, q: [f64; 3]) -> f64 {
        self.nearest_within(q, f64::INFINITY)
    }
}

/// Distance field of an arbitrary [`Shape`].
pub fn distance_field_of<S: Shape + ?Sized>(shape: &S, spec: &GridSpec, exec: Exec) -> Result<LevelSetField> {
    spec.validate()?;
    let cloud = shape.boundary_points();
    if cloud.is_empty() {
        return Err(Error::validation("empty boundary point cloud"));
    }
    let mask = shape.interior_mask(spec);
    let tree = KdTree::new(&cloud);
    let [_, n, p] = spec.dims;
    let mut phi = vec![0.0; spec.len()];
    exec.for_each_chunk(&mut phi, n * p, |ix, slab| {
        // the distance function is 1-Lipschitz, so the previous query seeds
        // an upper bound that prunes most of the tree
        let mut last: Option<([f64; 3], f64)> = None;
        for iy in 0..n {
            for iz in 0..p {
                let k = spec.index(ix, iy, iz);
                if mask[k] {
                    continue;
                }
                let q = spec.point(ix, iy, iz);
                let d2 = match last {
                    Some((prev, d)) => {
                        let r = d + dist2(q, prev).sqrt();
                        let bound = r * r * (1.0 + 1e-9) + f64::MIN_POSITIVE;
                        let found = tree.nearest_within(q, bound);
                        if found < bound {
                            found
                        } else {
                            tree.nearest_dist2(q)
                        }
                    }
                    None => tree.nearest_dist2(q),
                };
                slab[iy * p + iz] = d2.sqrt();
                last = Some((q, d2.sqrt()));
            }
        }
    });
    Ok(LevelSetField { spec: *spec, phi })
}

pub fn distance_field(wing: &WingSurface, spec: &GridSpec) -> Result<LevelSetField> {
    distance_field_of(wing, spec, Exec::default())
}

/// Plain double loop over grid and cloud without acceleration.
pub fn distance_field_brute<S: Shape + ?Sized>(shape: &S, spec: &GridSpec) -> Result<LevelSetField> {
    spec.validate()?;
    let cloud = shape.boundary_points();
    if cloud.is_empty() {
        return Err(Error::validation("empty boundary point cloud"));
    }
    let mask = shape.interior_mask(spec);
    let mut phi = vec![0.0; spec.len()];
    for (k, v) in phi.iter_mut().enumerate() {
        if mask[k] {
            continue;
        }
        let iz = k % spec.dims[2];
        let iy = (k / spec.dims[2]) % spec.dims[1];
        let ix = k / (spec.dims[1] * spec.dims[2]);
        let q = spec.point(ix, iy, iz);
        *v = cloud.iter().map(|&c| dist2(q, c)).fold(f64::INFINITY, f64::min).sqrt();
    }
    Ok(LevelSetField { spec: *spec, phi })
}

/// Serialize dims and values in the `LSF1` binary layout.
pub fn write_tensor<W: Write>(mut w: W, dims: [usize; 3], values: &[f64]) -> Result<()> {
    if dims.iter().product::<usize>() != values.len() {
        return Err(Error::dimension(format!(
            "tensor dims {dims:?} do not match {} values",
            values.len()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[0u8; 4]);
    for d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<([usize; 3], Vec<f64>)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("missing LSF1 magic".into()));
    }
    let mut dims = [0usize; 3];
    for (d, dim) in dims.iter_mut().enumerate() {
        let off = 8 + 8 * d;
        *dim = u64::from_le_bytes(header[off..off + 8].try_into().unwrap()) as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * count {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            8 * count,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}

impl LevelSetField {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, self.spec.dims, &self.phi)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Load a tensor file; the grid bounds are not stored in the file and
    /// come from `spec`, whose dims must match.
    pub fn load(path: &Path, spec: &GridSpec) -> Result<Self> {
        let (dims, phi) = read_tensor(fs::File::open(path)?)?;
        if dims != spec.dims {
            return Err(Error::dimension(format!(
                "{}: dims {dims:?}, expected {:?}",
                path.display(),
                spec.dims
            )));
        }
        Ok(LevelSetField { spec: *spec, phi })
    }
}

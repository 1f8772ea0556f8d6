//! Rectangular grids, masked vector fields, discrete operators, measures,
//! rescaling, and the `.fld` snapshot format.
//!
//! Quadrature conventions (used consistently across the crate):
//! * gradients are forward differences per cell edge, averaged over the
//!   2^(n-1) parallel edges of each cell, squared per edge (mean of squares),
//! * the potential is evaluated at the cell midpoint (mean of corner values),
//! * a cell belongs to a region iff its lower corner node does, so energies
//!   are exactly additive over node-disjoint regions,
//! * node measures count node cells (a node is inside iff its center is);
//!   every ball measure is accompanied by a cell-layer volume bound.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PhaseError, Result};
use crate::potentials::{self, PotentialSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    shape: [usize; 3],
    h: f64,
    origin: [f64; 3],
}

impl Grid {
    pub fn new(shape: &[usize], h: f64, origin: &[f64]) -> Result<Grid> {
        let n = shape.len();
        if n == 0 || n > 3 {
            return Err(PhaseError::Grid(format!("dimension {n} not in 1..=3")));
        }
        if shape.iter().any(|&s| s < 3) {
            return Err(PhaseError::Grid("every axis needs >= 3 nodes".into()));
        }
        if !(h > 0.0) {
            return Err(PhaseError::Grid(format!("spacing {h} must be positive")));
        }
        if origin.len() != n {
            return Err(PhaseError::Grid("origin length != dimension".into()));
        }
        let mut sh = [1usize; 3];
        let mut or = [0f64; 3];
        sh[..n].copy_from_slice(shape);
        or[..n].copy_from_slice(origin);
        Ok(Grid { n, shape: sh, h, origin: or })
    }

    /// Grid centered at the origin (odd shapes put a node exactly at 0).
    pub fn centered(shape: &[usize], h: f64) -> Result<Grid> {
        let origin: Vec<f64> = shape.iter().map(|&s| -0.5 * (s - 1) as f64 * h).collect();
        Grid::new(shape, h, &origin)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape[..self.n]
    }
    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.n]
    }
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.n as i32)
    }

    /// Axis strides for the flat layout (axis 0 varies fastest).
    pub fn strides(&self) -> [usize; 3] {
        [1, self.shape[0], self.shape[0] * self.shape[1]]
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        let s = self.strides();
        let mut idx = 0;
        for c in 0..self.n {
            debug_assert!(multi[c] < self.shape[c]);
            idx += multi[c] * s[c];
        }
        idx
    }

    pub fn multi(&self, flat: usize) -> [usize; 3] {
        let mut mi = [0usize; 3];
        let mut r = flat;
        for c in 0..self.n {
            mi[c] = r % self.shape[c];
            r /= self.shape[c];
        }
        mi
    }

    pub fn coord_into(&self, flat: usize, out: &mut [f64]) {
        let mi = self.multi(flat);
        for c in 0..self.n {
            out[c] = self.origin[c] + mi[c] as f64 * self.h;
        }
    }

    pub fn coord(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        self.coord_into(flat, &mut x);
        x
    }

    pub fn is_grid_edge(&self, flat: usize) -> bool {
        let mi = self.multi(flat);
        (0..self.n).any(|c| mi[c] == 0 || mi[c] + 1 == self.shape[c])
    }

    /// Max coordinate per axis.
    pub fn upper(&self) -> Vec<f64> {
        (0..self.n)
            .map(|c| self.origin[c] + (self.shape[c] - 1) as f64 * self.h)
            .collect()
    }

    /// Symmetric about {x_1 = 0}: axis-0 nodes come in +- pairs.
    pub fn symmetric_about_first_axis(&self) -> bool {
        let end = self.origin[0] + (self.shape[0] - 1) as f64 * self.h;
        (self.origin[0] + end).abs() < 1e-9 * self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeTag {
    Interior = 0,
    Dirichlet = 1,
    Exterior = 2,
}

impl NodeTag {
    fn from_byte(b: u8) -> Result<NodeTag> {
        match b {
            0 => Ok(NodeTag::Interior),
            1 => Ok(NodeTag::Dirichlet),
            2 => Ok(NodeTag::Exterior),
            _ => Err(PhaseError::Snapshot(format!("bad mask byte {b}"))),
        }
    }
}

/// Node-membership predicates for measures and localized energies.
#[derive(Clone, Debug)]
pub enum Region {
    All,
    /// |x - center| <= radius
    Ball { center: Vec<f64>, radius: f64 },
    /// inner < |x - center| <= outer  (disjoint shells tile a ball exactly)
    Annulus { center: Vec<f64>, inner: f64, outer: f64 },
    /// all of axis 0, |y - y_center| <= radius over the remaining axes
    Cylinder { y_center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::All => true,
            Region::Ball { center, radius } => dist(x, center) <= *radius,
            Region::Annulus { center, inner, outer } => {
                let d = dist(x, center);
                d > *inner && d <= *outer
            }
            Region::Cylinder { y_center, radius } => dist(&x[1..], y_center) <= *radius,
        }
    }
}

fn dist(x: &[f64], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// An m-vector field sampled on a grid with a node mask. Dirichlet boundary
/// values live in `values` at the tagged nodes and are never updated by the
/// solvers.
#[derive(Clone, Debug)]
pub struct Field {
    pub grid: Grid,
    pub m: usize,
    pub values: Vec<f64>,
    pub mask: Vec<NodeTag>,
}

impl Field {
    pub fn constant(grid: Grid, value: &[f64]) -> Field {
        let m = value.len();
        let len = grid.len();
        let mut values = Vec::with_capacity(len * m);
        for _ in 0..len {
            values.extend_from_slice(value);
        }
        Field { grid, m, values, mask: vec![NodeTag::Interior; len] }
    }

    pub fn from_fn(grid: Grid, m: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Field {
        let len = grid.len();
        let mut values = vec![0.0; len * m];
        let mut x = vec![0.0; grid.n()];
        for i in 0..len {
            grid.coord_into(i, &mut x);
            f(&x, &mut values[i * m..(i + 1) * m]);
        }
        Field { grid, m, values, mask: vec![NodeTag::Interior; len] }
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.m..(node + 1) * self.m]
    }

    pub fn value_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.m..(node + 1) * self.m]
    }

    /// Tag every grid-edge node as Dirichlet (box domains).
    pub fn mark_grid_edges_dirichlet(&mut self) {
        for i in 0..self.grid.len() {
            if self.grid.is_grid_edge(i) && self.mask[i] != NodeTag::Exterior {
                self.mask[i] = NodeTag::Dirichlet;
            }
        }
    }

    /// Carve a ball domain out of the box: nodes outside become Exterior and
    /// the remaining nodes adjacent to Exterior or the grid edge become the
    /// Dirichlet ring.
    pub fn mask_outside_ball(&mut self, center: &[f64], radius: f64) {
        let n = self.grid.n();
        let mut x = vec![0.0; n];
        for i in 0..self.grid.len() {
            self.grid.coord_into(i, &mut x);
            if dist(&x, center) > radius {
                self.mask[i] = NodeTag::Exterior;
            }
        }
        let strides = self.grid.strides();
        let shape = self.grid.shape().to_vec();
        let mut dirichlet = Vec::new();
        for i in 0..self.grid.len() {
            if self.mask[i] == NodeTag::Exterior {
                continue;
            }
            let mi = self.grid.multi(i);
            let mut boundary = false;
            for c in 0..n {
                if mi[c] == 0 || mi[c] + 1 == shape[c] {
                    boundary = true;
                    break;
                }
                if self.mask[i - strides[c]] == NodeTag::Exterior
                    || self.mask[i + strides[c]] == NodeTag::Exterior
                {
                    boundary = true;
                    break;
                }
            }
            if boundary {
                dirichlet.push(i);
            }
        }
        for i in dirichlet {
            self.mask[i] = NodeTag::Dirichlet;
        }
    }

    /// Overwrite values on Dirichlet nodes.
    pub fn set_dirichlet(&mut self, mut bc: impl FnMut(&[f64], &mut [f64])) {
        let n = self.grid.n();
        let m = self.m;
        let mut x = vec![0.0; n];
        for i in 0..self.grid.len() {
            if self.mask[i] == NodeTag::Dirichlet {
                self.grid.coord_into(i, &mut x);
                bc(&x, &mut self.values[i * m..(i + 1) * m]);
            }
        }
    }

    pub fn non_exterior_count(&self) -> usize {
        self.mask.iter().filter(|t| **t != NodeTag::Exterior).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.len() * self.m {
            return Err(PhaseError::Grid("values length mismatch".into()));
        }
        if self.mask.len() != self.grid.len() {
            return Err(PhaseError::Grid("mask length mismatch".into()));
        }
        for i in 0..self.grid.len() {
            if self.mask[i] != NodeTag::Exterior && self.value(i).iter().any(|v| !v.is_finite()) {
                return Err(PhaseError::Grid(format!("non-finite value at node {i}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cell iteration
// ---------------------------------------------------------------------------

/// Corner flat indices of one grid cell; corners are ordered by bitmask over
/// axes (bit c set = +1 step along axis c).
pub struct CellCorners {
    pub lower: [usize; 3],
    pub flats: [usize; 8],
    pub count: usize,
}

/// Visit every cell whose corners are all non-exterior and whose lower corner
/// node lies in `region`.
pub fn visit_cells(field: &Field, region: &Region, mut f: impl FnMut(&CellCorners)) {
    let grid = &field.grid;
    let n = grid.n();
    let shape = grid.shape();
    let strides = grid.strides();
    let count = 1usize << n;
    let mut x = vec![0.0; n];

    let mut corners = CellCorners { lower: [0; 3], flats: [0; 8], count };
    let cells_per_axis: Vec<usize> = shape.iter().map(|&s| s - 1).collect();
    let total: usize = cells_per_axis.iter().product();
    let mut mi = [0usize; 3];
    for cell in 0..total {
        let mut r = cell;
        for c in 0..n {
            mi[c] = r % cells_per_axis[c];
            r /= cells_per_axis[c];
        }
        let base = grid.flat(&mi[..n]);
        let mut ok = true;
        for bits in 0..count {
            let mut idx = base;
            for c in 0..n {
                if bits & (1 << c) != 0 {
                    idx += strides[c];
                }
            }
            if field.mask[idx] == NodeTag::Exterior {
                ok = false;
                break;
            }
            corners.flats[bits] = idx;
        }
        if !ok {
            continue;
        }
        grid.coord_into(base, &mut x);
        if !region.contains(&x) {
            continue;
        }
        corners.lower = mi;
        f(&corners);
    }
}

/// Per-axis mean over parallel edges of the squared forward difference,
/// summed over axes: the cell quadrature of |grad u|^2 (scaled by 1/h^2).
pub(crate) fn cell_grad_sq(field: &Field, c: &CellCorners) -> f64 {
    let n = field.grid.n();
    let m = field.m;
    let h2 = field.grid.h() * field.grid.h();
    let mut total = 0.0;
    for axis in 0..n {
        let bit = 1usize << axis;
        let mut acc = 0.0;
        let mut edges = 0usize;
        for bits in 0..c.count {
            if bits & bit != 0 {
                continue;
            }
            let a = c.flats[bits] * m;
            let b = c.flats[bits | bit] * m;
            for comp in 0..m {
                let d = field.values[b + comp] - field.values[a + comp];
                acc += d * d;
            }
            edges += 1;
        }
        total += acc / (edges as f64 * h2);
    }
    total
}

/// Mean of the corner values (cell midpoint sample).
pub(crate) fn cell_mean(field: &Field, c: &CellCorners, out: &mut [f64]) {
    let m = field.m;
    out.iter_mut().for_each(|v| *v = 0.0);
    for bits in 0..c.count {
        let a = c.flats[bits] * m;
        for comp in 0..m {
            out[comp] += field.values[a + comp];
        }
    }
    let inv = 1.0 / c.count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// Second-order central-difference Laplacian on interior nodes. Dirichlet
/// neighbors feed their fixed values into the stencil; a missing neighbor
/// (grid edge or exterior) contributes a zero second difference.
pub fn laplacian(f: &Field) -> Field {
    let grid = f.grid.clone();
    let n = grid.n();
    let m = f.m;
    let h2 = grid.h() * grid.h();
    let strides = grid.strides();
    let shape = grid.shape().to_vec();
    let mut out = vec![0.0; f.values.len()];
    for i in 0..grid.len() {
        if f.mask[i] != NodeTag::Interior {
            continue;
        }
        let mi = grid.multi(i);
        for c in 0..n {
            // a well-formed mask keeps interior nodes off the grid edge; a
            // missing or exterior neighbor contributes a zero difference
            let lo_ok = mi[c] > 0 && f.mask[i - strides[c]] != NodeTag::Exterior;
            let hi_ok = mi[c] + 1 < shape[c] && f.mask[i + strides[c]] != NodeTag::Exterior;
            for comp in 0..m {
                let center = f.values[i * m + comp];
                let vl = if lo_ok { f.values[(i - strides[c]) * m + comp] } else { center };
                let vh = if hi_ok { f.values[(i + strides[c]) * m + comp] } else { center };
                out[i * m + comp] += (vl - 2.0 * center + vh) / h2;
            }
        }
    }
    Field { grid, m, values: out, mask: f.mask.clone() }
}

/// Midpoint-rule energy over the region: sum over cells of
/// (eps^2/2 |grad u|^2 + W(u_mid)) h^n. eps = 1 reproduces J.
pub fn energy(f: &Field, region: &Region, spec: &PotentialSpec, eps: f64) -> f64 {
    assert!(eps > 0.0);
    let vol = f.grid.cell_volume();
    let mut mean = vec![0.0; f.m];
    let mut total = 0.0;
    visit_cells(f, region, |c| {
        let kin = cell_grad_sq(f, c);
        cell_mean(f, c, &mut mean);
        let w = potentials::eval_w(spec, &mean);
        total += (0.5 * eps * eps * kin + w) * vol;
    });
    total
}

/// Max over interior nodes of |eps^2 Lap u - W_u(u)| (Euclidean norm on R^m).
/// For alpha < 2, nodes pinned within Q_MIN of a well are skipped and counted.
pub fn residual_with_skips(f: &Field, spec: &PotentialSpec, eps: f64) -> (f64, usize) {
    let lap = laplacian(f);
    let m = f.m;
    let mut worst = 0.0f64;
    let mut skipped = 0usize;
    for i in 0..f.grid.len() {
        if f.mask[i] != NodeTag::Interior {
            continue;
        }
        match potentials::eval_w_grad(spec, f.value(i)) {
            Ok(g) => {
                let mut r2 = 0.0;
                for comp in 0..m {
                    let r = eps * eps * lap.values[i * m + comp] - g[comp];
                    r2 += r * r;
                }
                worst = worst.max(r2.sqrt());
            }
            Err(PhaseError::DegenerateGradient { .. }) => skipped += 1,
            Err(_) => unreachable!(),
        }
    }
    (worst, skipped)
}

pub fn residual(f: &Field, spec: &PotentialSpec) -> f64 {
    residual_with_skips(f, spec, 1.0).0
}

/// Lebesgue measure of {|u - a| > lambda} inside the region (node counting).
pub fn measure_superlevel(f: &Field, a: &[f64], lambda: f64, region: &Region) -> f64 {
    assert!(lambda > 0.0);
    let vol = f.grid.cell_volume();
    let mut x = vec![0.0; f.grid.n()];
    let mut count = 0usize;
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        f.grid.coord_into(i, &mut x);
        if region.contains(&x) && dist(f.value(i), a) > lambda {
            count += 1;
        }
    }
    count as f64 * vol
}

/// Integral of W(u) over {|u - a| <= lambda} inside the region.
pub fn sublevel_potential_integral(
    f: &Field,
    a: &[f64],
    lambda: f64,
    region: &Region,
    spec: &PotentialSpec,
) -> f64 {
    assert!(lambda > 0.0);
    let vol = f.grid.cell_volume();
    let mut x = vec![0.0; f.grid.n()];
    let mut total = 0.0;
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        f.grid.coord_into(i, &mut x);
        if region.contains(&x) && dist(f.value(i), a) <= lambda {
            total += potentials::eval_w(spec, f.value(i)) * vol;
        }
    }
    total
}

/// Node measure of the region (for exact superlevel/sublevel additivity).
pub fn region_measure(f: &Field, region: &Region) -> f64 {
    let vol = f.grid.cell_volume();
    let mut x = vec![0.0; f.grid.n()];
    let mut count = 0usize;
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        f.grid.coord_into(i, &mut x);
        if region.contains(&x) {
            count += 1;
        }
    }
    count as f64 * vol
}

/// Volume of the node layer straddling the sphere |x - center| = r: the
/// resolution-induced uncertainty of every ball measure.
pub fn ball_layer_volume(f: &Field, center: &[f64], r: f64) -> f64 {
    let band = f.grid.h() * (f.grid.n() as f64).sqrt();
    let vol = f.grid.cell_volume();
    let mut x = vec![0.0; f.grid.n()];
    let mut count = 0usize;
    for i in 0..f.grid.len() {
        if f.mask[i] == NodeTag::Exterior {
            continue;
        }
        f.grid.coord_into(i, &mut x);
        if (dist(&x, center) - r).abs() <= band {
            count += 1;
        }
    }
    count as f64 * vol
}

/// Resample u(center + factor * x) onto the target grid (multilinear).
/// factor < 1 zooms in (blow-up), factor > 1 zooms out (blow-down).
pub fn rescale(f: &Field, center: &[f64], factor: f64, target: &Grid) -> Result<Field> {
    assert!(factor > 0.0);
    let n = f.grid.n();
    if target.n() != n {
        return Err(PhaseError::Grid("rescale: dimension mismatch".into()));
    }
    let m = f.m;
    let src = &f.grid;
    let shape = src.shape().to_vec();
    let strides = src.strides();
    let mut values = vec![0.0; target.len() * m];
    let mut mask = vec![NodeTag::Interior; target.len()];
    let mut xt = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut i0 = vec![0usize; n];
    let mut frac = vec![0.0; n];

    for t in 0..target.len() {
        target.coord_into(t, &mut xt);
        for c in 0..n {
            p[c] = center[c] + factor * xt[c];
            let s = (p[c] - src.origin()[c]) / src.h();
            if s < -1e-9 || s > (shape[c] - 1) as f64 + 1e-9 {
                return Err(PhaseError::OutOfDomain { point: p.clone() });
            }
            let i = (s.floor() as isize).clamp(0, shape[c] as isize - 2) as usize;
            i0[c] = i;
            frac[c] = (s - i as f64).clamp(0.0, 1.0);
        }
        let base = src.flat(&i0);
        for bits in 0..(1usize << n) {
            let mut idx = base;
            let mut w = 1.0;
            for c in 0..n {
                if bits & (1 << c) != 0 {
                    idx += strides[c];
                    w *= frac[c];
                } else {
                    w *= 1.0 - frac[c];
                }
            }
            if f.mask[idx] == NodeTag::Exterior {
                return Err(PhaseError::OutOfDomain { point: p.clone() });
            }
            for comp in 0..m {
                values[t * m + comp] += w * f.values[idx * m + comp];
            }
        }
        if target.is_grid_edge(t) {
            mask[t] = NodeTag::Dirichlet;
        }
    }
    Ok(Field { grid: target.clone(), m, values, mask })
}

// ---------------------------------------------------------------------------
// Snapshot format (.fld): 64-byte header, row-major little-endian f64 values
// (axis 0 fastest, m components per node), then one mask byte per node.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"PHASEFLD";
const VERSION: u32 = 1;

pub fn write_snapshot(f: &Field, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(f.grid.n() as u32).to_le_bytes())?;
    w.write_all(&(f.m as u32).to_le_bytes())?;
    for c in 0..3 {
        w.write_all(&(f.grid.shape[c] as u32).to_le_bytes())?;
    }
    w.write_all(&f.grid.h().to_le_bytes())?;
    for c in 0..3 {
        w.write_all(&f.grid.origin[c].to_le_bytes())?;
    }
    for v in &f.values {
        w.write_all(&v.to_le_bytes())?;
    }
    for t in &f.mask {
        w.write_all(&[*t as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Field> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PhaseError::Snapshot("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(PhaseError::Snapshot(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let m = u32::from_le_bytes(b4) as usize;
    let mut shape = [1usize; 3];
    for s in shape.iter_mut() {
        r.read_exact(&mut b4)?;
        *s = u32::from_le_bytes(b4) as usize;
    }
    r.read_exact(&mut b8)?;
    let h = f64::from_le_bytes(b8);
    let mut origin = [0f64; 3];
    for o in origin.iter_mut() {
        r.read_exact(&mut b8)?;
        *o = f64::from_le_bytes(b8);
    }
    let grid = Grid::new(&shape[..n], h, &origin[..n])?;
    let len = grid.len();
    let mut values = vec![0.0; len * m];
    for v in values.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    let mut mask = Vec::with_capacity(len);
    let mut b1 = [0u8; 1];
    for _ in 0..len {
        r.read_exact(&mut b1)?;
        mask.push(NodeTag::from_byte(b1[0])?);
    }
    let f = Field { grid, m, values, mask };
    f.validate()?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line_grid(n_nodes: usize, h: f64, x0: f64) -> Grid {
        Grid::new(&[n_nodes], h, &[x0]).unwrap()
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(Grid::new(&[2], 0.1, &[0.0]).is_err());
        assert!(Grid::new(&[4], 0.0, &[0.0]).is_err());
        assert!(Grid::new(&[4, 4, 4, 4], 0.1, &[0.0; 4]).is_err());
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let g = Grid::centered(&[9, 9], 0.5).unwrap();
        let mut f = Field::constant(g, &[3.0, -1.0]);
        f.mark_grid_edges_dirichlet();
        let lap = laplacian(&f);
        for i in 0..f.grid.len() {
            if f.mask[i] == NodeTag::Interior {
                assert_eq!(lap.value(i), &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn laplacian_exact_on_quadratic() {
        let g = line_grid(21, 0.1, -1.0);
        let mut f = Field::from_fn(g, 1, |x, v| v[0] = x[0] * x[0]);
        f.mark_grid_edges_dirichlet();
        let lap = laplacian(&f);
        for i in 0..f.grid.len() {
            if f.mask[i] == NodeTag::Interior {
                assert_relative_eq!(lap.value(i)[0], 2.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_second_order_on_sine() {
        let err_at = |h: f64| {
            let nodes = (2.0 / h).round() as usize + 1;
            let g = line_grid(nodes, h, -1.0);
            let mut f = Field::from_fn(g, 1, |x, v| v[0] = x[0].sin());
            f.mark_grid_edges_dirichlet();
            let lap = laplacian(&f);
            let mut worst = 0.0f64;
            for i in 0..f.grid.len() {
                if f.mask[i] == NodeTag::Interior {
                    let x = f.grid.coord(i)[0];
                    worst = worst.max((lap.value(i)[0] + x.sin()).abs());
                }
            }
            worst
        };
        let ratio = err_at(0.02) / err_at(0.01);
        assert!((ratio - 4.0).abs() < 0.5, "observed ratio {ratio}");
    }

    #[test]
    fn energy_zero_at_well() {
        let spec = PotentialSpec::two_well();
        let g = Grid::centered(&[17, 17], 0.25).unwrap();
        let mut f = Field::constant(g, &[1.0]);
        f.mark_grid_edges_dirichlet();
        assert_eq!(energy(&f, &Region::All, &spec, 1.0), 0.0);
    }

    #[test]
    fn energy_of_tanh_profile_matches_action() {
        let spec = PotentialSpec::two_well();
        let h: f64 = 0.01;
        let nodes = (20.0 / h).round() as usize + 1;
        let g = line_grid(nodes, h, -10.0);
        let mut f = Field::from_fn(g, 1, |x, v| v[0] = (x[0] / 2f64.sqrt()).tanh());
        f.mark_grid_edges_dirichlet();
        let e = energy(&f, &Region::All, &spec, 1.0);
        let exact = 2.0 * 2f64.sqrt() / 3.0;
        assert!((e - exact).abs() < 1e-3, "energy {e} vs {exact}");
    }

    #[test]
    fn energy_second_order_under_refinement() {
        let spec = PotentialSpec::two_well();
        let exact = 2.0 * 2f64.sqrt() / 3.0;
        let e_at = |h: f64| {
            let nodes = (20.0 / h).round() as usize + 1;
            let g = line_grid(nodes, h, -10.0);
            let mut f = Field::from_fn(g, 1, |x, v| v[0] = (x[0] / 2f64.sqrt()).tanh());
            f.mark_grid_edges_dirichlet();
            (energy(&f, &Region::All, &spec, 1.0) - exact).abs()
        };
        let ratio = e_at(0.04) / e_at(0.02);
        assert!(ratio > 3.0, "refinement ratio {ratio} too small for order 2");
    }

    #[test]
    fn energy_additive_over_disjoint_regions() {
        let spec = PotentialSpec::two_well();
        let g = Grid::centered(&[33, 33], 0.25).unwrap();
        let mut f = Field::from_fn(g, 1, |x, v| v[0] = (x[0] + 0.3 * x[1]).tanh());
        f.mark_grid_edges_dirichlet();
        let c = vec![0.0, 0.0];
        let ball = Region::Ball { center: c.clone(), radius: 2.0 };
        let inner = Region::Ball { center: c.clone(), radius: 1.0 };
        let shell = Region::Annulus { center: c.clone(), inner: 1.0, outer: 2.0 };
        let total = energy(&f, &ball, &spec, 1.0);
        let parts = energy(&f, &inner, &spec, 1.0) + energy(&f, &shell, &spec, 1.0);
        assert_relative_eq!(total, parts, epsilon = 1e-12);
    }

    #[test]
    fn residual_zero_at_well_and_positive_on_noise() {
        let spec = PotentialSpec::two_well();
        let g = Grid::centered(&[17, 17], 0.2).unwrap();
        let mut f = Field::constant(g.clone(), &[1.0]);
        f.mark_grid_edges_dirichlet();
        assert_eq!(residual(&f, &spec), 0.0);

        let mut noisy = Field::from_fn(g, 1, |x, v| v[0] = 0.3 * (5.0 * x[0]).sin());
        noisy.mark_grid_edges_dirichlet();
        assert!(residual(&noisy, &spec) > 0.0);
    }

    #[test]
    fn residual_tanh_second_order() {
        let spec = PotentialSpec::two_well();
        let res_at = |h: f64| {
            let nodes = (20.0 / h).round() as usize + 1;
            let g = line_grid(nodes, h, -10.0);
            let mut f = Field::from_fn(g, 1, |x, v| v[0] = (x[0] / 2f64.sqrt()).tanh());
            f.mark_grid_edges_dirichlet();
            residual(&f, &spec)
        };
        let (r1, r2) = (res_at(0.02), res_at(0.01));
        let ratio = r1 / r2;
        assert!(ratio > 3.0, "residual refinement ratio {ratio}");
        // report the constant C in res <= C h^2
        let c = r2 / 0.01f64.powi(2);
        assert!(c < 1.0, "unexpectedly large constant {c}");
    }

    #[test]
    fn superlevel_complement_is_exact() {
        let spec = PotentialSpec::two_well();
        let _ = spec;
        let g = Grid::centered(&[41, 41], 0.2).unwrap();
        let mut f = Field::from_fn(g, 1, |x, v| v[0] = (2.0 * x[1]).tanh());
        f.mark_grid_edges_dirichlet();
        let region = Region::Ball { center: vec![0.0, 0.0], radius: 3.0 };
        let lam = 0.7;
        let a = [1.0];
        let sup = measure_superlevel(&f, &a, lam, &region);
        let vol = f.grid.cell_volume();
        let mut x = vec![0.0; 2];
        let mut sub_count = 0usize;
        for i in 0..f.grid.len() {
            if f.mask[i] == NodeTag::Exterior {
                continue;
            }
            f.grid.coord_into(i, &mut x);
            if region.contains(&x) && (f.value(i)[0] - 1.0).abs() <= lam {
                sub_count += 1;
            }
        }
        assert_eq!(sup + sub_count as f64 * vol, region_measure(&f, &region));
    }

    #[test]
    fn superlevel_full_ball_for_shifted_constant() {
        let g = Grid::centered(&[41, 41], 0.25).unwrap();
        let lam = 0.3;
        let f = {
            let mut f = Field::constant(g, &[1.0 + 2.0 * lam]);
            f.mark_grid_edges_dirichlet();
            f
        };
        let region = Region::Ball { center: vec![0.0, 0.0], radius: 3.0 };
        let a = [1.0];
        assert_eq!(
            measure_superlevel(&f, &a, lam, &region),
            region_measure(&f, &region)
        );
        assert_eq!(sublevel_potential_integral(&f, &a, lam, &region, &PotentialSpec::two_well()), 0.0);
    }

    #[test]
    fn superlevel_half_disk_for_sharp_interface() {
        // sharp half-plane interface: any lambda < separation gives a half disk
        let g = Grid::centered(&[129, 129], 0.125).unwrap();
        let mut f = Field::from_fn(g, 1, |x, v| v[0] = if x[1] > 0.0 { 1.0 } else { -1.0 });
        f.mark_grid_edges_dirichlet();
        let r = 6.0;
        let region = Region::Ball { center: vec![0.0, 0.0], radius: r };
        let a = [1.0];
        let v = measure_superlevel(&f, &a, 1.0, &region);
        let half_disk = 0.5 * std::f64::consts::PI * r * r;
        assert!((v - half_disk).abs() / half_disk < 0.05, "v = {v}, exact {half_disk}");
    }

    #[test]
    fn sublevel_tanh_matches_quadrature() {
        let spec = PotentialSpec::two_well();
        let h: f64 = 0.01;
        let nodes = (20.0 / h).round() as usize + 1;
        let g = line_grid(nodes, h, -10.0);
        let mut f = Field::from_fn(g, 1, |x, v| v[0] = (x[0] / 2f64.sqrt()).tanh());
        f.mark_grid_edges_dirichlet();
        let region = Region::Ball { center: vec![0.0], radius: 10.0 };
        let lam = 0.9;
        let a_r = sublevel_potential_integral(&f, &[1.0], lam, &region, &spec);
        // oracle: Simpson quadrature of W(tanh) over { |tanh - 1| <= 0.9 }
        let x_min = 2f64.sqrt() * 0.1f64.atanh();
        let steps = 20000;
        let dx = (10.0 - x_min) / steps as f64;
        let wf = |x: f64| {
            let u: f64 = (x / 2f64.sqrt()).tanh();
            0.25 * (1.0 - u * u).powi(2)
        };
        let mut oracle = 0.0;
        for i in 0..steps {
            let x0 = x_min + i as f64 * dx;
            oracle += dx / 6.0 * (wf(x0) + 4.0 * wf(x0 + 0.5 * dx) + wf(x0 + dx));
        }
        assert!((a_r - oracle).abs() / oracle < 0.02, "A = {a_r} vs oracle {oracle}");
    }

    #[test]
    fn rescale_identity_and_affine_exact() {
        let g = Grid::centered(&[33, 33], 0.25).unwrap();
        let f = Field::from_fn(g.clone(), 2, |x, v| {
            v[0] = 1.0 + 2.0 * x[0] - x[1];
            v[1] = -0.5 * x[0] + 3.0 * x[1];
        });
        let same = rescale(&f, &[0.0, 0.0], 1.0, &g).unwrap();
        for i in 0..g.len() {
            assert_relative_eq!(same.value(i)[0], f.value(i)[0], epsilon = 1e-12);
        }
        let target = Grid::centered(&[17, 17], 0.2).unwrap();
        let scaled = rescale(&f, &[0.3, -0.2], 1.7, &target).unwrap();
        for i in 0..target.len() {
            let x = target.coord(i);
            let p = [0.3 + 1.7 * x[0], -0.2 + 1.7 * x[1]];
            assert_relative_eq!(scaled.value(i)[0], 1.0 + 2.0 * p[0] - p[1], epsilon = 1e-10);
        }
    }

    #[test]
    fn rescale_out_of_domain_errors() {
        let g = Grid::centered(&[17, 17], 0.25).unwrap();
        let f = Field::constant(g.clone(), &[0.0]);
        let err = rescale(&f, &[0.0, 0.0], 3.0, &g).unwrap_err();
        assert!(matches!(err, PhaseError::OutOfDomain { .. }));
    }

    #[test]
    fn rescale_blow_down_shrinks_interface_width() {
        // u(x) = tanh(x), blow-down v(x) = u(x / eps) has width ~ eps
        let h: f64 = 0.005;
        let nodes = (20.0 / h).round() as usize + 1;
        let g = line_grid(nodes, h, -10.0);
        let f = Field::from_fn(g, 1, |x, v| v[0] = x[0].tanh());
        let eps = 0.1_f64;
        let target = line_grid(401, 0.005, -1.0);
        let blown = rescale(&f, &[0.0], 1.0 / eps, &target).unwrap();
        let width = |field: &Field| {
            let mut cnt = 0;
            for i in 0..field.grid.len() {
                if field.value(i)[0].abs() < 0.9 {
                    cnt += 1;
                }
            }
            cnt as f64 * field.grid.h()
        };
        let w_src = width(&f);
        let w_blown = width(&blown);
        assert!((w_blown - eps * w_src).abs() < 0.1 * eps * w_src + 2.0 * 0.005);
    }

    #[test]
    fn snapshot_roundtrip_bit_exact() {
        let g = Grid::centered(&[9, 7], 0.3).unwrap();
        let mut f = Field::from_fn(g, 3, |x, v| {
            v[0] = x[0].sin();
            v[1] = x[1] * 7.0;
            v[2] = -1.25;
        });
        f.mark_grid_edges_dirichlet();
        f.mask_outside_ball(&[0.0, 0.0], 1.2);
        let dir = std::env::temp_dir().join("phaselab_snapshot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.fld");
        write_snapshot(&f, &path).unwrap();
        let g2 = read_snapshot(&path).unwrap();
        assert_eq!(f.grid, g2.grid);
        assert_eq!(f.m, g2.m);
        assert_eq!(f.values, g2.values);
        assert_eq!(f.mask, g2.mask);
    }
}

//! Uniform beam partition of the ambient space and depth sorting within beams.
//!
//! Beams are labelled `(i, j)` with `1 ≤ i ≤ r`, `1 ≤ j ≤ s` in text output;
//! storage is a dense 0-indexed row-major lattice (`i * s + j`).

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::dataio::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis along which beams extend and points are sorted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DepthAxis {
    X,
    Y,
    #[default]
    Z,
}

impl DepthAxis {
    pub const ALL: [DepthAxis; 3] = [DepthAxis::X, DepthAxis::Y, DepthAxis::Z];

    /// Source columns for the (lattice₁, lattice₂, depth) roles. The two
    /// lattice axes keep their canonical x < y < z order.
    pub fn roles(self) -> [usize; 3] {
        match self {
            DepthAxis::X => [1, 2, 0],
            DepthAxis::Y => [0, 2, 1],
            DepthAxis::Z => [0, 1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DepthAxis::X => "x",
            DepthAxis::Y => "y",
            DepthAxis::Z => "z",
        }
    }
}

impl fmt::Display for DepthAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DepthAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(DepthAxis::X),
            "y" => Ok(DepthAxis::Y),
            "z" => Ok(DepthAxis::Z),
            other => Err(Error::Config(format!("unknown depth axis '{other}'"))),
        }
    }
}

/// Reorders the xyz columns into (lattice₁, lattice₂, depth); extra columns
/// are kept in place after them.
pub fn axis_view<T: Scalar>(cloud: &PointCloud<T>, axis: DepthAxis) -> PointCloud<T> {
    let roles = axis.roles();
    let mut out = cloud.clone();
    for k in 0..cloud.len() {
        let src = cloud.point(k);
        let dst = out.point_mut(k);
        for (slot, &col) in roles.iter().enumerate() {
            dst[slot] = src[col];
        }
    }
    out
}

/// An r×s lattice of beams over `[x_min, x_max) × [y_min, y_max)` in the
/// lattice coordinates of `depth_axis`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamGrid {
    pub r: usize,
    pub s: usize,
    /// `(x_min, x_max, y_min, y_max)`.
    pub bounds: (f64, f64, f64, f64),
    pub depth_axis: DepthAxis,
}

impl BeamGrid {
    /// Grid over the default bounds `[-1, 1]²`.
    pub fn new(r: usize, s: usize, depth_axis: DepthAxis) -> Result<Self> {
        Self::with_bounds(r, s, (-1.0, 1.0, -1.0, 1.0), depth_axis)
    }

    pub fn with_bounds(
        r: usize,
        s: usize,
        bounds: (f64, f64, f64, f64),
        depth_axis: DepthAxis,
    ) -> Result<Self> {
        let grid = BeamGrid {
            r,
            s,
            bounds,
            depth_axis,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let (x0, x1, y0, y1) = self.bounds;
        if self.r == 0 || self.s == 0 {
            return Err(Error::Config(format!(
                "beam grid {}x{} must be at least 1x1",
                self.r, self.s
            )));
        }
        if !(x0 < x1 && y0 < y1) || ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("invalid beam bounds {:?}", self.bounds)));
        }
        if !(self.width() > 0.0 && self.height() > 0.0) {
            return Err(Error::Config("beam extent underflows to zero".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.bounds.1 - self.bounds.0) / self.r as f64
    }

    pub fn height(&self) -> f64 {
        (self.bounds.3 - self.bounds.2) / self.s as f64
    }

    pub fn num_beams(&self) -> usize {
        self.r * self.s
    }

    /// 0-indexed beam `(i, j)` holding lattice coordinates `(a, b)`.
    pub fn beam_of(&self, a: f64, b: f64) -> (usize, usize) {
        (
            cell(a - self.bounds.0, self.width(), self.r),
            cell(b - self.bounds.2, self.height(), self.s),
        )
    }
}

/// Index q with `q·w ≤ offset < (q+1)·w`, clamped to `[0, n)`. The quotient is
/// only a first guess; the products are re-checked so the result honours the
/// inequality exactly in floating point.
fn cell(offset: f64, w: f64, n: usize) -> usize {
    if offset < 0.0 {
        return 0;
    }
    let guess = (offset / w).floor();
    if guess >= n as f64 {
        return n - 1;
    }
    let mut q = guess as usize;
    while q > 0 && q as f64 * w > offset {
        q -= 1;
    }
    while q + 1 < n && (q + 1) as f64 * w <= offset {
        q += 1;
    }
    q
}

/// Point indices of every beam of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamAssignment {
    pub grid: BeamGrid,
    beams: Vec<Vec<usize>>,
    n_points: usize,
}

impl BeamAssignment {
    /// Indices of beam `(i, j)`, 0-indexed.
    pub fn beam(&self, i: usize, j: usize) -> &[usize] {
        &self.beams[i * self.grid.s + j]
    }

    pub fn occupancy(&self, i: usize, j: usize) -> usize {
        self.beam(i, j).len()
    }

    /// Beams in row-major order, as `(flat index, members)`.
    pub fn beams(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.beams.iter().map(Vec::as_slice).enumerate()
    }

    pub fn nonempty(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.beams().filter(|(_, b)| !b.is_empty())
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Flat beam index of every point.
    pub fn beam_of_point(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n_points];
        for (b, members) in self.beams() {
            for &k in members {
                owner[k] = b;
            }
        }
        owner
    }

    /// One line per nonempty beam: 1-indexed `i j occupancy` followed by the
    /// member point indices in beam order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (b, members) in self.nonempty() {
            let (i, j) = (b / self.grid.s, b % self.grid.s);
            let _ = write!(out, "{} {} {}", i + 1, j + 1, members.len());
            for k in members {
                let _ = write!(out, " {k}");
            }
            out.push('\n');
        }
        out
    }
}

/// Places every point in the beam containing its lattice coordinates.
/// Points on the upper boundary or outside the bounds clamp to edge beams.
pub fn assign<T: Scalar>(cloud: &PointCloud<T>, grid: &BeamGrid) -> BeamAssignment {
    let [a, b, _] = grid.depth_axis.roles();
    let mut beams = vec![Vec::new(); grid.num_beams()];
    for (k, p) in cloud.points().enumerate() {
        let (i, j) = grid.beam_of(p[a].as_f64(), p[b].as_f64());
        beams[i * grid.s + j].push(k);
    }
    BeamAssignment {
        grid: *grid,
        beams,
        n_points: cloud.len(),
    }
}

/// Orders points by depth, then by the lattice coordinates, then by the
/// extra features, using the IEEE total order.
pub fn depth_order<T: Scalar>(p: &[T], q: &[T], axis: DepthAxis) -> Ordering {
    let [a, b, d] = axis.roles();
    [d, a, b]
        .iter()
        .map(|&c| (p[c], q[c]))
        .chain(p[3..].iter().copied().zip(q[3..].iter().copied()))
        .map(|(u, v)| u.as_f64().total_cmp(&v.as_f64()))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Sorts every beam along the grid's depth axis.
pub fn sort_beams<T: Scalar>(mut assignment: BeamAssignment, cloud: &PointCloud<T>) -> BeamAssignment {
    let axis = assignment.grid.depth_axis;
    for members in &mut assignment.beams {
        members.sort_by(|&u, &v| depth_order(cloud.point(u), cloud.point(v), axis));
    }
    assignment
}

/// `assign` followed by `sort_beams`.
pub fn partition<T: Scalar>(cloud: &PointCloud<T>, grid: &BeamGrid) -> BeamAssignment {
    sort_beams(assign(cloud, grid), cloud)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyStats {
    pub nonempty: usize,
    pub max: usize,
    /// Mean occupancy over nonempty beams (0 when all are empty).
    pub mean: f64,
    /// `histogram[c]` is the number of beams holding exactly `c` points.
    pub histogram: Vec<usize>,
}

pub fn occupancy_stats(assignment: &BeamAssignment) -> OccupancyStats {
    let counts: Vec<usize> = assignment.beams.iter().map(Vec::len).collect();
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0; max + 1];
    for &c in &counts {
        histogram[c] += 1;
    }
    let nonempty = counts.iter().filter(|&&c| c > 0).count();
    let mean = if nonempty == 0 {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / nonempty as f64
    };
    OccupancyStats {
        nonempty,
        max,
        mean,
        histogram,
    }
}

//! Parameterized primitive shapes standing in for benchmark meshes.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Label, LabeledCloud, PointCloud, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Points per column of the layered stack shapes.
const STACK_COLUMN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    /// Unit sphere surface.
    Sphere,
    /// Surface of the cube [−1, 1]³.
    Cube,
    /// Torus around the z axis.
    Torus,
    /// Two parallel squares perpendicular to z.
    Planes,
    /// Helix around the z axis.
    Helix,
    /// Columns of three depth layers holding 6/4/6 of every 16 points.
    StackOuter,
    /// Same sites as [`ShapeKind::StackOuter`], holding 3/10/3 of every 16.
    StackCenter,
    /// Segmentation: ring (part 0) with radial spokes (part 1).
    TorusSpokes,
    /// Segmentation: base disc, pole and conical shade.
    Lamp,
    /// Segmentation: table top and four legs.
    Table,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Planes,
        ShapeKind::Helix,
        ShapeKind::StackOuter,
        ShapeKind::StackCenter,
        ShapeKind::TorusSpokes,
        ShapeKind::Lamp,
        ShapeKind::Table,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Planes => "planes",
            ShapeKind::Helix => "helix",
            ShapeKind::StackOuter => "stack-outer",
            ShapeKind::StackCenter => "stack-center",
            ShapeKind::TorusSpokes => "torus-spokes",
            ShapeKind::Lamp => "lamp",
            ShapeKind::Table => "table",
        }
    }

    /// Sampling weight of each sub-primitive; a single entry for plain shapes.
    pub fn part_weights(self) -> &'static [f64] {
        match self {
            ShapeKind::TorusSpokes => &[0.7, 0.3],
            ShapeKind::Lamp => &[0.3, 0.3, 0.4],
            ShapeKind::Table => &[0.6, 0.4],
            _ => &[1.0],
        }
    }

    pub fn is_segmentation(self) -> bool {
        self.part_weights().len() > 1
    }

    /// Samples one instance: points plus the local part index of each point.
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> (Vec<[f64; 3]>, Vec<u32>) {
        match self {
            ShapeKind::StackOuter => return (stack(n, [6, 4, 6], rng), vec![0; n]),
            ShapeKind::StackCenter => return (stack(n, [3, 10, 3], rng), vec![0; n]),
            _ => {}
        }
        let params = InstanceParams::draw(self, rng);
        let weights = self.part_weights();
        let mut pts = Vec::with_capacity(n);
        let mut parts = Vec::with_capacity(n);
        for _ in 0..n {
            let part = pick(weights, rng);
            pts.push(params.point(self, part, rng));
            parts.push(part as u32);
        }
        (pts, parts)
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown shape class '{s}'")))
    }
}

/// Parses a comma-separated list of shape names.
pub fn parse_class_spec(spec: &str) -> Result<Vec<ShapeKind>> {
    let kinds = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("empty class list".into()));
    }
    Ok(kinds)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Shape parameters drawn once per instance.
struct InstanceParams {
    a: f64,
    b: f64,
    c: f64,
    phase: f64,
}

impl InstanceParams {
    fn draw<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Self {
        let phase = uniform(rng, 0.0, 2.0 * PI);
        let (a, b, c) = match kind {
            ShapeKind::Torus => (uniform(rng, 0.55, 0.7), uniform(rng, 0.2, 0.3), 0.0),
            ShapeKind::Planes => (uniform(rng, 0.3, 0.6), uniform(rng, 0.7, 0.9), 0.0),
            ShapeKind::Helix => (uniform(rng, 0.6, 0.85), uniform(rng, 2.0, 3.5), 0.03),
            ShapeKind::TorusSpokes => (uniform(rng, 0.6, 0.75), uniform(rng, 0.08, 0.14), 0.0),
            ShapeKind::Lamp => (uniform(rng, 0.35, 0.55), uniform(rng, 0.3, 0.5), 0.0),
            ShapeKind::Table => (uniform(rng, 0.6, 0.85), uniform(rng, 0.3, 0.6), 0.0),
            _ => (0.0, 0.0, 0.0),
        };
        InstanceParams { a, b, c, phase }
    }

    fn point<R: Rng + ?Sized>(&self, kind: ShapeKind, part: usize, rng: &mut R) -> [f64; 3] {
        match kind {
            ShapeKind::Sphere => {
                let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-300);
                g.map(|v| v / norm)
            }
            ShapeKind::Cube => {
                let face = rng.random_range(0..6);
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), 0.0];
                p[2] = sign;
                let axis = face / 2;
                p.swap(2, axis);
                p
            }
            ShapeKind::Torus => torus(self.a, self.b, rng),
            ShapeKind::Planes => {
                let z = if rng.random::<bool>() { self.a } else { -self.a };
                [uniform(rng, -self.b, self.b), uniform(rng, -self.b, self.b), z]
            }
            ShapeKind::Helix => {
                let t = rng.random::<f64>();
                let angle = self.phase + 2.0 * PI * self.b * t;
                let tube: [f64; 3] = std::array::from_fn(|_| uniform(rng, -self.c, self.c));
                [
                    self.a * angle.cos() + tube[0],
                    self.a * angle.sin() + tube[1],
                    -0.9 + 1.8 * t + tube[2],
                ]
            }
            ShapeKind::TorusSpokes => {
                if part == 0 {
                    torus(self.a, self.b, rng)
                } else {
                    let spoke = rng.random_range(0..4) as f64;
                    let angle = self.phase + spoke * PI / 2.0;
                    let rad = uniform(rng, 0.0, self.a - self.b);
                    let w = uniform(rng, -0.03, 0.03);
                    [
                        rad * angle.cos() - w * angle.sin(),
                        rad * angle.sin() + w * angle.cos(),
                        uniform(rng, -0.03, 0.03),
                    ]
                }
            }
            ShapeKind::Lamp => match part {
                0 => {
                    let (rad, ang) = (self.a * rng.random::<f64>().sqrt(), uniform(rng, 0.0, 2.0 * PI));
                    [rad * ang.cos(), rad * ang.sin(), -0.9]
                }
                1 => {
                    let ang = uniform(rng, 0.0, 2.0 * PI);
                    [0.05 * ang.cos(), 0.05 * ang.sin(), uniform(rng, -0.9, 0.3)]
                }
                _ => {
                    let t = rng.random::<f64>();
                    let rad = 0.15 + t * self.b;
                    let ang = uniform(rng, 0.0, 2.0 * PI);
                    [rad * ang.cos(), rad * ang.sin(), 0.8 - 0.5 * t]
                }
            },
            ShapeKind::Table => {
                if part == 0 {
                    [uniform(rng, -self.a, self.a), uniform(rng, -self.a, self.a), self.b]
                } else {
                    let leg = rng.random_range(0..4);
                    let (sx, sy) = ([1.0, -1.0][leg % 2], [1.0, -1.0][leg / 2]);
                    let inset = self.a - 0.08;
                    [
                        sx * inset + uniform(rng, -0.03, 0.03),
                        sy * inset + uniform(rng, -0.03, 0.03),
                        uniform(rng, -0.9, self.b),
                    ]
                }
            }
            ShapeKind::StackOuter | ShapeKind::StackCenter => unreachable!("sampled per column"),
        }
    }
}

/// Area-uniform torus point (rejection on the tube angle).
fn torus<R: Rng + ?Sized>(major: f64, minor: f64, rng: &mut R) -> [f64; 3] {
    loop {
        let u = uniform(rng, 0.0, 2.0 * PI);
        let v = uniform(rng, 0.0, 2.0 * PI);
        let w = (major + minor * v.cos()) / (major + minor);
        if rng.random::<f64>() <= w {
            let rad = major + minor * v.cos();
            return [rad * u.cos(), rad * u.sin(), minor * v.sin()];
        }
    }
}

/// Columns of repeated sites on three depth layers.
///
/// Both stack classes draw the site geometry from the same distribution and
/// place at least one point on every site, so the two classes share their
/// support exactly; they differ only in how many points repeat each site.
fn stack<R: Rng + ?Sized>(n: usize, counts: [usize; 3], rng: &mut R) -> Vec<[f64; 3]> {
    debug_assert_eq!(counts.iter().sum::<usize>(), STACK_COLUMN);
    let columns = (n / STACK_COLUMN).max(1);
    let depth = uniform(rng, 0.6, 0.9);
    let radius = uniform(rng, 0.3, 0.45);
    let layers = [-depth, 0.0, depth];
    let mut pts = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(columns);
    for _ in 0..columns {
        let (rad, ang) = (radius * rng.random::<f64>().sqrt(), uniform(rng, 0.0, 2.0 * PI));
        centers.push((rad * ang.cos(), rad * ang.sin()));
    }
    for &(x, y) in &centers {
        for (layer, &count) in layers.iter().zip(&counts) {
            for _ in 0..count {
                pts.push([x, y, *layer]);
            }
        }
    }
    // leftovers go to the middle layer, cycling over columns
    let mut c = 0;
    while pts.len() < n {
        pts.push([centers[c].0, centers[c].1, 0.0]);
        c = (c + 1) % columns;
    }
    pts.truncate(n);
    pts
}

/// Generates `n_per_class` instances of every listed shape.
///
/// Classification kinds produce one class label per cloud (the kind's index
/// in `kinds`); segmentation kinds produce per-point part labels numbered
/// consecutively across the listed kinds, with the kind's index as the
/// object category.
pub fn generate_synthetic<T: Scalar, R: Rng + ?Sized>(
    kinds: &[ShapeKind],
    n_per_class: usize,
    n_points: usize,
    split: Split,
    rng: &mut R,
) -> Result<Dataset<T>> {
    if n_points < 32 {
        return Err(Error::Config(format!("n_points {n_points} < 32")));
    }
    if kinds.is_empty() {
        return Err(Error::Config("no shape classes given".into()));
    }
    let segmentation = kinds[0].is_segmentation();
    if kinds.iter().any(|k| k.is_segmentation() != segmentation) {
        return Err(Error::Config(
            "cannot mix classification and segmentation shapes".into(),
        ));
    }
    let mut part_sets: Vec<Vec<u32>> = Vec::new();
    let mut offset = 0u32;
    if segmentation {
        for k in kinds {
            let n = k.part_weights().len() as u32;
            part_sets.push((offset..offset + n).collect());
            offset += n;
        }
    }
    let num_labels = if segmentation { offset } else { kinds.len() as u32 };
    let mut clouds = Vec::with_capacity(kinds.len() * n_per_class);
    for _ in 0..n_per_class {
        for (ci, &kind) in kinds.iter().enumerate() {
            let (pts, parts) = kind.sample(n_points, rng);
            let data = pts.iter().flatten().map(|&v| T::lit(v)).collect();
            let cloud = PointCloud::new(3, data)?;
            let lc = if segmentation {
                let base = part_sets[ci][0];
                let labels = parts.iter().map(|&p| base + p).collect();
                LabeledCloud::new(cloud, Label::PerPoint(labels), num_labels, Some(ci as u32))?
            } else {
                LabeledCloud::new(cloud, Label::Class(ci as u32), num_labels, None)?
            };
            clouds.push(lc);
        }
    }
    Ok(Dataset {
        clouds,
        split,
        num_labels,
        class_names: kinds.iter().map(|k| k.name().to_string()).collect(),
        part_sets,
    })
}

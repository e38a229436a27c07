//! Point clouds, their file formats, preprocessing, and synthetic datasets.

mod augment;
mod format;
mod mesh;
mod synth;

pub use augment::{
    augment, dropout_with_ratio, normalize_unit_ball, random_point_dropout, subsample,
    AugmentPolicy,
};
pub use format::{
    decode_cloud, encode_cloud, load_cloud, load_dataset_dir, parse_off, read_off, save_cloud,
    save_dataset_dir, DatasetManifest, NO_CATEGORY,
};
pub use mesh::sample_mesh;
pub use synth::{generate_synthetic, parse_class_spec, ShapeKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// N points with d features each; the first three columns are x, y, z.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim < 3 {
            return Err(Error::Data(format!("point dimension {dim} < 3")));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{} values do not form a nonempty cloud of {dim}-d points",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(PointCloud { dim, data })
    }

    pub fn from_points(points: &[[T; 3]]) -> Result<Self> {
        Self::new(3, points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn points(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.dim)
    }

    /// Cloud made of the rows listed in `order`.
    pub fn select(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            data.extend_from_slice(self.point(i));
        }
        PointCloud {
            dim: self.dim,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            dim: self.dim,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Classification target or per-point segmentation targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(u32),
    PerPoint(Vec<u32>),
}

impl Label {
    pub fn is_per_point(&self) -> bool {
        matches!(self, Label::PerPoint(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud<T> {
    pub cloud: PointCloud<T>,
    pub label: Label,
    /// K classes, or M part/semantic labels.
    pub num_labels: u32,
    /// Object category for category-conditioned part segmentation.
    pub category: Option<u32>,
}

impl<T: Scalar> LabeledCloud<T> {
    pub fn new(
        cloud: PointCloud<T>,
        label: Label,
        num_labels: u32,
        category: Option<u32>,
    ) -> Result<Self> {
        let lc = LabeledCloud {
            cloud,
            label,
            num_labels,
            category,
        };
        lc.validate()?;
        Ok(lc)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.label {
            Label::Class(c) if *c >= self.num_labels => Err(Error::Data(format!(
                "class {c} outside [0, {})",
                self.num_labels
            ))),
            Label::PerPoint(ls) if ls.len() != self.cloud.len() => Err(Error::Data(format!(
                "{} point labels for {} points",
                ls.len(),
                self.cloud.len()
            ))),
            Label::PerPoint(ls) => match ls.iter().find(|&&l| l >= self.num_labels) {
                Some(l) => Err(Error::Data(format!(
                    "point label {l} outside [0, {})",
                    self.num_labels
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn class(&self) -> Option<u32> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::PerPoint(_) => None,
        }
    }

    /// Reorders points (and per-point labels) by `order`.
    pub fn select(&self, order: &[usize]) -> Self {
        let label = match &self.label {
            Label::Class(c) => Label::Class(*c),
            Label::PerPoint(ls) => Label::PerPoint(order.iter().map(|&i| ls[i]).collect()),
        };
        LabeledCloud {
            cloud: self.cloud.select(order),
            label,
            num_labels: self.num_labels,
            category: self.category,
        }
    }

    pub fn cast<U: Scalar>(&self) -> LabeledCloud<U> {
        LabeledCloud {
            cloud: self.cloud.cast(),
            label: self.label.clone(),
            num_labels: self.num_labels,
            category: self.category,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub clouds: Vec<LabeledCloud<T>>,
    pub split: Split,
    pub num_labels: u32,
    pub class_names: Vec<String>,
    /// Labels belonging to each object category (segmentation only).
    pub part_sets: Vec<Vec<u32>>,
}

impl<T: Scalar> Dataset<T> {
    /// Checks that all members share the point width and label mode.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.clouds.first() else {
            return Ok(());
        };
        for (i, c) in self.clouds.iter().enumerate() {
            c.validate()?;
            if c.cloud.dim() != first.cloud.dim()
                || c.label.is_per_point() != first.label.is_per_point()
                || c.num_labels != self.num_labels
            {
                return Err(Error::Data(format!(
                    "dataset member {i} disagrees on dimension, label mode or label count"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn is_segmentation(&self) -> bool {
        self.clouds
            .first()
            .map(|c| c.label.is_per_point())
            .unwrap_or(!self.part_sets.is_empty())
    }

    pub fn dim(&self) -> Option<usize> {
        self.clouds.first().map(|c| c.cloud.dim())
    }

    /// Number of members per class label (classification only).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_labels as usize];
        for c in &self.clouds {
            if let Some(k) = c.class() {
                hist[k as usize] += 1;
            }
        }
        hist
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            clouds: self.clouds.iter().map(|c| c.cast()).collect(),
            split: self.split,
            num_labels: self.num_labels,
            class_names: self.class_names.clone(),
            part_sets: self.part_sets.clone(),
        }
    }
}

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Translates the xyz centroid to the origin and scales the farthest point to
/// norm 1. Extra feature columns are untouched; a cloud whose points all
/// coincide maps to zeros.
pub fn normalize_unit_ball<T: Scalar>(cloud: &PointCloud<T>) -> PointCloud<T> {
    let n = cloud.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in cloud.points() {
        for k in 0..3 {
            centroid[k] += p[k].as_f64();
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let mut max_norm = 0.0f64;
    for p in cloud.points() {
        let sq: f64 = (0..3).map(|k| (p[k].as_f64() - centroid[k]).powi(2)).sum();
        max_norm = max_norm.max(sq.sqrt());
    }
    let scale = if max_norm > 0.0 { 1.0 / max_norm } else { 0.0 };
    let mut out = cloud.clone();
    for i in 0..out.len() {
        let p = out.point_mut(i);
        for k in 0..3 {
            p[k] = T::lit((p[k].as_f64() - centroid[k]) * scale);
        }
    }
    out
}

/// Random similarity jitter applied to training clouds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Per-axis translation drawn from U(−translate, translate).
    pub translate: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            scale_lo: 0.8,
            scale_hi: 1.25,
            translate: 0.1,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            scale_lo: 1.0,
            scale_hi: 1.0,
            translate: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_lo > 0.0
            && self.scale_lo <= self.scale_hi
            && self.translate >= 0.0
            && self.jitter_sigma >= 0.0
            && self.jitter_clip >= 0.0
            && [self.scale_hi, self.translate, self.jitter_sigma, self.jitter_clip]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }
}

/// Scales xyz by one factor, translates each axis, and adds clipped Gaussian
/// jitter to every coordinate.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    rng: &mut R,
    policy: &AugmentPolicy,
) -> Result<PointCloud<T>> {
    policy.validate()?;
    let scale = if policy.scale_hi > policy.scale_lo {
        rng.random_range(policy.scale_lo..policy.scale_hi)
    } else {
        policy.scale_lo
    };
    let mut shift = [0.0; 3];
    if policy.translate > 0.0 {
        for s in &mut shift {
            *s = rng.random_range(-policy.translate..policy.translate);
        }
    }
    let noise = if policy.jitter_sigma > 0.0 {
        Some(Normal::new(0.0, policy.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut out = cloud.clone();
    for i in 0..out.len() {
        let p = out.point_mut(i);
        for k in 0..3 {
            let jitter = match &noise {
                Some(nd) => nd
                    .sample(rng)
                    .clamp(-policy.jitter_clip, policy.jitter_clip),
                None => 0.0,
            };
            p[k] = T::lit(p[k].as_f64() * scale + shift[k] + jitter);
        }
    }
    Ok(out)
}

/// Drops each point with a probability drawn from U(0, max_ratio), keeping N
/// fixed by overwriting dropped points with the first survivor.
pub fn random_point_dropout<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    rng: &mut R,
    max_ratio: f64,
) -> Result<PointCloud<T>> {
    if !(0.0..1.0).contains(&max_ratio) {
        return Err(Error::Config(format!(
            "dropout max_ratio {max_ratio} outside [0, 1)"
        )));
    }
    let ratio = max_ratio * rng.random::<f64>();
    Ok(dropout_with_ratio(cloud, rng, ratio))
}

/// Point dropout at a fixed ratio; see [`random_point_dropout`].
pub fn dropout_with_ratio<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    rng: &mut R,
    ratio: f64,
) -> PointCloud<T> {
    let n = cloud.len();
    let mut dropped: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < ratio).collect();
    let first = match dropped.iter().position(|&d| !d) {
        Some(f) => f,
        None => {
            dropped[0] = false;
            0
        }
    };
    let keep = cloud.point(first).to_vec();
    let mut out = cloud.clone();
    for (i, _) in dropped.iter().enumerate().filter(|(_, &d)| d) {
        out.point_mut(i).copy_from_slice(&keep);
    }
    out
}

/// Uniformly chosen subset of `n` points (order preserved).
pub fn subsample<T: Scalar, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    rng: &mut R,
    n: usize,
) -> PointCloud<T> {
    if n >= cloud.len() {
        return cloud.clone();
    }
    let mut picks = index::sample(rng, cloud.len(), n.max(1)).into_vec();
    picks.sort_unstable();
    cloud.select(&picks)
}

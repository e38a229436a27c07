//! Three RCNets whose beams run along x, y and z, averaged in probability
//! space.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, PointCloud};
use crate::error::{Error, Result};
use crate::model::{parse_pairs, predict_proba, HeadKind, RcNet, RcNetConfig};
use crate::partition::DepthAxis;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{fit, EpochRecord, MetricsReport, Predictions, TrainConfig};

/// Depth axes of the members, in order.
pub const MEMBER_AXES: [DepthAxis; 3] = [DepthAxis::X, DepthAxis::Y, DepthAxis::Z];

/// Member `k` uses seed `base + k · MEMBER_SEED_STRIDE`.
pub const MEMBER_SEED_STRIDE: u64 = 1000;

pub const MANIFEST_NAME: &str = "ensemble.txt";

#[derive(Clone, Debug)]
pub struct Ensemble<T> {
    pub members: Vec<RcNet<T>>,
}

/// Correctly rounded mean of a few values: the sum is carried exactly as a
/// float pair, so equal inputs give back that value and one-hot inputs give
/// the nearest doubles to k/n.
pub fn exact_mean(values: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    let n = values.len() as f64;
    let q = s / n;
    let r = (-q).mul_add(n, s) + c;
    q + r / n
}

impl<T: Scalar> Ensemble<T> {
    /// Members must agree on head, label count and point dimension.
    pub fn new(members: Vec<RcNet<T>>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Validation("an ensemble needs at least one member".into()));
        };
        let key = |c: &RcNetConfig| (c.head, c.num_labels, c.dim);
        for (i, m) in members.iter().enumerate().skip(1) {
            if key(&m.config) != key(&first.config) {
                return Err(Error::Validation(format!(
                    "member {i} ({} head, {} labels, d={}) does not match member 0 ({} head, {} labels, d={})",
                    m.config.head,
                    m.config.num_labels,
                    m.config.dim,
                    first.config.head,
                    first.config.num_labels,
                    first.config.dim
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn config(&self) -> &RcNetConfig {
        &self.members[0].config
    }

    /// Mean of the members' softmax outputs, same layout as one member's.
    pub fn predict_proba(&self, clouds: &[&PointCloud<T>]) -> Result<Tensor<T>> {
        let probs: Vec<Tensor<T>> = self
            .members
            .iter()
            .map(|m| m.logits(clouds).map(|l| predict_proba(&l)))
            .collect::<Result<_>>()?;
        let shape = probs[0].shape().to_vec();
        let mut col = vec![0.0; probs.len()];
        let data = (0..probs[0].numel())
            .map(|e| {
                for (slot, p) in col.iter_mut().zip(&probs) {
                    *slot = p.data()[e].as_f64();
                }
                T::lit(exact_mean(&col))
            })
            .collect();
        Tensor::from_vec(&shape, data)
    }

    pub fn classify(&self, cloud: &PointCloud<T>) -> Result<Vec<T>> {
        Ok(self.predict_proba(&[cloud])?.data().to_vec())
    }

    /// Averaged probabilities for every cloud of `data`.
    pub fn predictions(&self, data: &Dataset<T>, batch: usize) -> Result<Predictions<T>> {
        let width = self.config().num_labels;
        let mut probs = Vec::with_capacity(data.len());
        for chunk in data.clouds.chunks(batch.max(1)) {
            let refs: Vec<&PointCloud<T>> = chunk.iter().map(|c| &c.cloud).collect();
            let p = self.predict_proba(&refs)?;
            let mut at = 0;
            for c in &refs {
                let n = if self.config().head == HeadKind::Segment {
                    c.len() * width
                } else {
                    width
                };
                probs.push(p.data()[at..at + n].to_vec());
                at += n;
            }
        }
        Ok(Predictions { width, probs })
    }

    pub fn evaluate(&self, data: &Dataset<T>, batch: usize) -> Result<MetricsReport> {
        MetricsReport::from_predictions(self.config().head, &self.predictions(data, batch)?, data)
    }

    /// Manifest text listing each member's axis and checkpoint path.
    pub fn manifest(&self, paths: &[PathBuf]) -> String {
        let mut s = String::from("# rcnet ensemble\n");
        let _ = writeln!(s, "members = {}", self.members.len());
        for (i, (m, p)) in self.members.iter().zip(paths).enumerate() {
            let _ = writeln!(s, "member.{i}.axis = {}", m.config.depth_axis);
            let _ = writeln!(s, "member.{i}.checkpoint = {}", p.display());
        }
        s
    }

    /// Writes `member<k>_<axis>.rck` per member plus the manifest into `dir`;
    /// returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = PathBuf::from(format!("member{i}_{}.rck", m.config.depth_axis));
            m.save(dir.join(&name))?;
            names.push(name);
        }
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, self.manifest(&names))?;
        Ok(path)
    }

    /// Loads a manifest; relative checkpoint paths resolve against its
    /// directory, and each checkpoint's axis must match its entry.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = std::fs::read_to_string(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let pairs = parse_pairs(&text).map_err(|e| Error::Validation(format!("ensemble manifest: {e}")))?;
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Validation(format!("ensemble manifest lacks {key}")))
        };
        let n: usize = get("members")?
            .parse()
            .map_err(|_| Error::Validation("ensemble member count is not a number".into()))?;
        let expected = 1 + 2 * n;
        if pairs.len() != expected {
            return Err(Error::Validation(format!(
                "ensemble manifest has {} entries, expected {expected}",
                pairs.len()
            )));
        }
        let mut members = Vec::with_capacity(n);
        for i in 0..n {
            let axis: DepthAxis = get(&format!("member.{i}.axis"))?
                .parse()
                .map_err(|e| Error::Validation(format!("member {i}: {e}")))?;
            let path = base.join(get(&format!("member.{i}.checkpoint"))?);
            let m = RcNet::<T>::load(&path)?;
            if m.config.depth_axis != axis {
                return Err(Error::Validation(format!(
                    "member {i}: checkpoint {} has depth axis {}, manifest says {axis}",
                    path.display(),
                    m.config.depth_axis
                )));
            }
            members.push(m);
        }
        Ensemble::new(members)
    }
}

/// Config of member `k`: the base config with the member's axis and seed.
pub fn member_config(base: &RcNetConfig, k: usize) -> RcNetConfig {
    RcNetConfig {
        depth_axis: MEMBER_AXES[k % MEMBER_AXES.len()],
        seed: base.seed.wrapping_add(k as u64 * MEMBER_SEED_STRIDE),
        ..base.clone()
    }
}

/// Trains the three members independently; member `k`'s data order and
/// augmentation come from its own seed.
pub fn train_ensemble<T: Scalar>(
    base: &RcNetConfig,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<(Ensemble<T>, Vec<Vec<EpochRecord>>)> {
    let mut members = Vec::with_capacity(MEMBER_AXES.len());
    let mut histories = Vec::with_capacity(MEMBER_AXES.len());
    for k in 0..MEMBER_AXES.len() {
        let mc = member_config(base, k);
        let axis = mc.depth_axis;
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
        let mut model = RcNet::new(mc)?;
        let h = fit(&mut model, train, test, cfg, &mut rng).map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("member {k} (axis {axis}): {msg}")),
            other => other,
        })?;
        members.push(model);
        histories.push(h);
    }
    Ok((Ensemble::new(members)?, histories))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::dataio::{generate_synthetic, ShapeKind, Split};
    use crate::partition::{partition, BeamGrid};

    fn micro(head: HeadKind, labels: usize, seed: u64) -> RcNetConfig {
        RcNetConfig {
            r: 4,
            s: 4,
            hidden: 8,
            num_labels: labels,
            head,
            stn_point_widths: vec![8, 16],
            stn_fc_widths: vec![8],
            conv_widths: vec![8, 16],
            fc_widths: vec![8],
            seg_point_widths: vec![8],
            seg_fc_widths: vec![16],
            seed,
            ..RcNetConfig::default()
        }
    }

    fn data<T: Scalar>(kinds: &[ShapeKind], n: usize, seed: u64) -> Dataset<T> {
        generate_synthetic(kinds, n, 48, Split::Test, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    const CLS: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Helix];

    #[test]
    fn exact_mean_is_correctly_rounded() {
        assert_eq!(exact_mean(&[1.0, 1.0, 0.0]), 2.0 / 3.0);
        assert_eq!(exact_mean(&[0.0, 0.0, 1.0]), 1.0 / 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let p: f64 = rng.random();
            assert_eq!(exact_mean(&[p, p, p]).to_bits(), p.to_bits());
            // sums of multiples of 2^-30 below 4 are exact, so plain division
            // is the correctly rounded oracle
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(0..1u64 << 30) as f64 / (1u64 << 30) as f64).collect();
            assert_eq!(exact_mean(&v), (v[0] + v[1] + v[2]) / 3.0);
        }
    }

    #[test]
    fn identical_members_reproduce_single_model() {
        for (head, labels, kinds) in [
            (HeadKind::Classify, 3, &CLS[..]),
            (HeadKind::Segment, 5, &[ShapeKind::TorusSpokes, ShapeKind::Lamp][..]),
        ] {
            let m: RcNet<f64> = RcNet::new(micro(head, labels, 4)).unwrap();
            let ens = Ensemble::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
            let d = data::<f64>(kinds, 2, 5);
            let refs: Vec<&PointCloud<f64>> = d.clouds.iter().map(|c| &c.cloud).collect();
            let single = predict_proba(&m.logits(&refs).unwrap());
            let mean = ens.predict_proba(&refs).unwrap();
            assert!(single.data().iter().zip(mean.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn mean_matches_member_oracle() {
        let members: Vec<RcNet<f64>> = (0..3)
            .map(|k| RcNet::new(member_config(&micro(HeadKind::Classify, 3, 6), k)).unwrap())
            .collect();
        let d = data::<f64>(&CLS, 2, 7);
        let refs: Vec<&PointCloud<f64>> = d.clouds.iter().map(|c| &c.cloud).collect();
        let per: Vec<Tensor<f64>> = members.iter().map(|m| predict_proba(&m.logits(&refs).unwrap())).collect();
        let ens = Ensemble::new(members).unwrap();
        let got = ens.predict_proba(&refs).unwrap();
        for e in 0..got.numel() {
            let want = (per[0].data()[e] + per[1].data()[e] + per[2].data()[e]) / 3.0;
            assert!((got.data()[e] - want).abs() < 1e-15);
        }
        for row in got.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let preds = ens.predictions(&d, 4).unwrap();
        assert_eq!(preds.probs.concat(), got.data());
    }

    #[test]
    fn mismatched_members_are_rejected() {
        let a: RcNet<f64> = RcNet::new(micro(HeadKind::Classify, 3, 1)).unwrap();
        let b: RcNet<f64> = RcNet::new(micro(HeadKind::Classify, 4, 1)).unwrap();
        let c: RcNet<f64> = RcNet::new(micro(HeadKind::Segment, 3, 1)).unwrap();
        assert!(matches!(Ensemble::new(vec![a.clone(), b]), Err(Error::Validation(_))));
        assert!(matches!(Ensemble::new(vec![a, c]), Err(Error::Validation(_))));
        assert!(matches!(Ensemble::<f64>::new(vec![]), Err(Error::Validation(_))));
    }

    #[test]
    fn member_configs_differ_only_in_axis_and_seed() {
        let base = micro(HeadKind::Classify, 3, 9);
        let axes: Vec<DepthAxis> = (0..3).map(|k| member_config(&base, k).depth_axis).collect();
        assert_eq!(axes, MEMBER_AXES);
        let m2 = member_config(&base, 2);
        assert_eq!(m2.seed, 9 + 2 * MEMBER_SEED_STRIDE);
        assert_eq!(RcNetConfig { depth_axis: base.depth_axis, seed: 9, ..m2 }, base);
    }

    #[test]
    fn axes_change_the_partition() {
        let d = data::<f64>(&[ShapeKind::Torus], 1, 10);
        let cloud = &d.clouds[0].cloud;
        let tables: Vec<String> = MEMBER_AXES
            .iter()
            .map(|&a| {
                let grid = BeamGrid::new(4, 4, a).unwrap();
                partition(cloud, &grid).to_table()
            })
            .collect();
        assert_ne!(tables[0], tables[1]);
        assert_ne!(tables[1], tables[2]);
        assert_ne!(tables[0], tables[2]);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let members: Vec<RcNet<f32>> = (0..3)
            .map(|k| RcNet::new(member_config(&micro(HeadKind::Classify, 3, 11), k)).unwrap())
            .collect();
        let ens = Ensemble::new(members).unwrap();
        let path = ens.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("member.1.axis = y"));
        let back = Ensemble::<f32>::load(&path).unwrap();
        let d = data::<f32>(&CLS, 1, 12);
        let refs: Vec<&PointCloud<f32>> = d.clouds.iter().map(|c| &c.cloud).collect();
        assert_eq!(ens.predict_proba(&refs).unwrap(), back.predict_proba(&refs).unwrap());

        std::fs::write(&path, text.replace("member.1.axis = y", "member.1.axis = z")).unwrap();
        assert!(matches!(Ensemble::<f32>::load(&path), Err(Error::Validation(_))));
        std::fs::write(&path, text.replace("members = 3", "members = 2")).unwrap();
        assert!(matches!(Ensemble::<f32>::load(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn training_is_reproducible_per_member() {
        let train = generate_synthetic::<f64, _>(&CLS, 2, 48, Split::Train, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let base = micro(HeadKind::Classify, 3, 14);
        let (a, ha) = train_ensemble(&base, &train, None, &cfg).unwrap();
        let (b, _) = train_ensemble(&base, &train, None, &cfg).unwrap();
        assert_eq!(ha.len(), 3);
        for (x, y) in a.members.iter().zip(&b.members) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
        let axes: Vec<DepthAxis> = a.members.iter().map(|m| m.config.depth_axis).collect();
        assert_eq!(axes, MEMBER_AXES);
    }
}

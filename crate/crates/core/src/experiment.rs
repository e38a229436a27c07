//! Desk-scale controlled studies: encoder ablation, beam-size sweep, point
//! dropout robustness, and the three-axis ensemble.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{generate_synthetic, Dataset, ShapeKind, Split};
use crate::encoder::EncoderKind;
use crate::ensemble::train_ensemble;
use crate::error::{Error, Result};
use crate::model::{RcNet, RcNetConfig};
use crate::scalar::Scalar;
use crate::train::{evaluate, fit, EpochRecord, TrainConfig};

/// The four-class benchmark.
pub const BENCHMARK_CLASSES: [ShapeKind; 4] =
    [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Helix];

/// Two classes with identical support that differ only in how many points
/// sit at each depth layer.
pub const DEPTH_PAIR: [ShapeKind; 2] = [ShapeKind::StackOuter, ShapeKind::StackCenter];

/// Point dropout ratio bound used when training with dropout.
pub const DEFAULT_DROPOUT: f64 = 0.875;

/// Sizes and schedules shared by every study.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskSettings {
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    /// Architecture template; `num_labels` and `seed` are filled in per run.
    pub model: RcNetConfig,
    pub train: TrainConfig,
}

impl Default for DeskSettings {
    fn default() -> Self {
        DeskSettings {
            classes: BENCHMARK_CLASSES.to_vec(),
            train_per_class: 200,
            test_per_class: 50,
            n_points: 256,
            model: RcNetConfig::default().desk(),
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

impl DeskSettings {
    /// Train and test splits drawn from `seed`.
    pub fn data<T: Scalar>(&self, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = generate_synthetic(&self.classes, self.train_per_class, self.n_points, Split::Train, &mut rng)?;
        let test = generate_synthetic(&self.classes, self.test_per_class, self.n_points, Split::Test, &mut rng)?;
        Ok((train, test))
    }

    pub fn model_config(&self, seed: u64) -> RcNetConfig {
        RcNetConfig {
            num_labels: self.classes.len(),
            seed,
            ..self.model.clone()
        }
    }
}

/// Trains one model with data order and augmentation drawn from `seed`.
pub fn train_model<T: Scalar>(
    config: RcNetConfig,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    tc: &TrainConfig,
) -> Result<(RcNet<T>, Vec<EpochRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut model = RcNet::new(config)?;
    let history = fit(&mut model, train, test, tc, &mut rng)?;
    Ok((model, history))
}

fn accuracy<T: Scalar>(model: &RcNet<T>, data: &Dataset<T>, tc: &TrainConfig) -> Result<f64> {
    Ok(evaluate(model, data, tc.eval_batch)?.accuracy)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub rcnet: f64,
    pub baseline: f64,
}

/// GRU encoder vs per-point MLP with per-beam max, everything else equal.
pub fn ablation<T: Scalar>(settings: &DeskSettings, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ablation_with::<T, _>(settings, seeds, |_, _, _| Ok(()))
}

/// [`ablation`], handing every trained variant and its test split to `visit`.
pub fn ablation_with<T, F>(settings: &DeskSettings, seeds: &[u64], mut visit: F) -> Result<Vec<AblationRow>>
where
    T: Scalar,
    F: FnMut(u64, &RcNet<T>, &Dataset<T>) -> Result<()>,
{
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, test) = settings.data::<T>(seed)?;
        let mut acc = [0.0; 2];
        for (slot, kind) in acc.iter_mut().zip([EncoderKind::Gru, EncoderKind::Mlp]) {
            let cfg = RcNetConfig {
                encoder: kind,
                ..settings.model_config(seed)
            };
            let (model, _) = train_model(cfg, &train, None, &settings.train)?;
            *slot = accuracy(&model, &test, &settings.train)?;
            visit(seed, &model, &test)?;
        }
        rows.push(AblationRow {
            seed,
            rcnet: acc[0],
            baseline: acc[1],
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("seed,rcnet_acc,baseline_acc,gap\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.seed, r.rcnet, r.baseline, r.rcnet - r.baseline);
    }
    let _ = writeln!(
        s,
        "mean,{},{},{}",
        mean(rows.iter().map(|r| r.rcnet)),
        mean(rows.iter().map(|r| r.baseline)),
        mean(rows.iter().map(|r| r.rcnet - r.baseline))
    );
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamSizeRow {
    pub size: usize,
    pub rcnet: f64,
    pub baseline: f64,
}

/// Accuracy of both encoders on r = s = `size` grids.
pub fn beam_size_sweep<T: Scalar>(settings: &DeskSettings, sizes: &[usize], seed: u64) -> Result<Vec<BeamSizeRow>> {
    let (train, test) = settings.data::<T>(seed)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut acc = [0.0; 2];
        for (slot, kind) in acc.iter_mut().zip([EncoderKind::Gru, EncoderKind::Mlp]) {
            let cfg = RcNetConfig {
                r: size,
                s: size,
                encoder: kind,
                ..settings.model_config(seed)
            };
            let (model, _) = train_model(cfg, &train, None, &settings.train)?;
            *slot = accuracy(&model, &test, &settings.train)?;
        }
        rows.push(BeamSizeRow {
            size,
            rcnet: acc[0],
            baseline: acc[1],
        });
    }
    Ok(rows)
}

pub fn beam_size_csv(rows: &[BeamSizeRow]) -> String {
    let mut s = String::from("beams,rcnet_acc,baseline_acc\n");
    for r in rows {
        let _ = writeln!(s, "{}x{},{},{}", r.size, r.size, r.rcnet, r.baseline);
    }
    s
}

/// Test clouds reduced to `n` points each (shared across models).
pub fn reduced_test_set<T: Scalar>(test: &Dataset<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Config("cannot reduce clouds to zero points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clouds = test
        .clouds
        .iter()
        .map(|c| {
            if n >= c.cloud.len() {
                return c.clone();
            }
            let mut picks = sample(&mut rng, c.cloud.len(), n).into_vec();
            picks.sort_unstable();
            c.select(&picks)
        })
        .collect();
    Ok(Dataset {
        clouds,
        ..test.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutRow {
    pub seed: u64,
    pub dropout: bool,
    /// (test points per cloud, accuracy), full count first.
    pub accuracy: Vec<(usize, f64)>,
}

impl DropoutRow {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.accuracy.iter().find(|(k, _)| *k == n).map(|&(_, a)| a)
    }
}

/// Trains with and without point dropout and evaluates both on the same
/// test clouds reduced to `n_points / d` for each divisor.
pub fn dropout_study<T: Scalar>(
    settings: &DeskSettings,
    seeds: &[u64],
    max_ratio: f64,
    divisors: &[usize],
) -> Result<Vec<DropoutRow>> {
    if divisors.iter().any(|&d| d == 0 || settings.n_points / d == 0) {
        return Err(Error::Config("point-count divisors must leave at least one point".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let (train, test) = settings.data::<T>(seed)?;
        let tests: Vec<(usize, Dataset<T>)> = divisors
            .iter()
            .map(|&d| {
                let n = settings.n_points / d;
                let t = if d == 1 { test.clone() } else { reduced_test_set(&test, n, seed ^ d as u64)? };
                Ok((n, t))
            })
            .collect::<Result<_>>()?;
        for dropout in [true, false] {
            let tc = TrainConfig {
                dropout: if dropout { max_ratio } else { 0.0 },
                ..settings.train.clone()
            };
            let (model, _) = train_model(settings.model_config(seed), &train, None, &tc)?;
            let accuracy = tests
                .iter()
                .map(|(n, t)| Ok((*n, accuracy(&model, t, &tc)?)))
                .collect::<Result<_>>()?;
            rows.push(DropoutRow { seed, dropout, accuracy });
        }
    }
    Ok(rows)
}

pub fn dropout_csv(rows: &[DropoutRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut s = String::from("seed,model");
    for (n, _) in &first.accuracy {
        let _ = write!(s, ",acc_{n}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.seed, if r.dropout { "dp" } else { "no_dp" });
        for (_, a) in &r.accuracy {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleRow {
    pub seed: u64,
    /// Member accuracies for depth axes x, y, z.
    pub members: Vec<f64>,
    pub ensemble: f64,
}

impl EnsembleRow {
    pub fn best_member(&self) -> f64 {
        self.members.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn ensemble_study<T: Scalar>(settings: &DeskSettings, seeds: &[u64]) -> Result<Vec<EnsembleRow>> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, test) = settings.data::<T>(seed)?;
        let (ens, _) = train_ensemble(&settings.model_config(seed), &train, None, &settings.train)?;
        let members = ens
            .members
            .iter()
            .map(|m| accuracy(m, &test, &settings.train))
            .collect::<Result<_>>()?;
        let ensemble = ens.evaluate(&test, settings.train.eval_batch)?.accuracy;
        rows.push(EnsembleRow { seed, members, ensemble });
    }
    Ok(rows)
}

pub fn ensemble_csv(rows: &[EnsembleRow]) -> String {
    let mut s = String::from("seed,acc_x,acc_y,acc_z,acc_ensemble\n");
    for r in rows {
        let m: Vec<String> = r.members.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{},{},{}", r.seed, m.join(","), r.ensemble);
    }
    s
}

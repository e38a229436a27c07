//! Run configuration: `key = value` lines with `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rcnet::dataio::{parse_class_spec, ShapeKind, Split};
use rcnet::experiment::{DeskSettings, DEFAULT_DROPOUT};
use rcnet::gradcheck::GradCheckOptions;
use rcnet::model::{parse_pairs, RcNetConfig, CONFIG_KEYS};
use rcnet::train::TrainConfig;
use rcnet::{Error, Precision, Result};

/// Keys owned by the run itself; everything in `CONFIG_KEYS` except `seed`
/// goes to the model.
pub const RUN_KEYS: [&str; 29] = [
    "seed",
    "deterministic",
    "out",
    "precision",
    "data",
    "eval_split",
    "classes",
    "train_per_class",
    "test_per_class",
    "n_points",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "lr_period",
    "eval_batch",
    "dropout",
    "aug_scale_lo",
    "aug_scale_hi",
    "aug_translate",
    "aug_jitter_sigma",
    "aug_jitter_clip",
    "ensemble",
    "seeds",
    "beam_sizes",
    "point_divisors",
    "gradcheck_h",
    "gradcheck_tolerance",
    "gradcheck_samples",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: RcNetConfig,
    /// Model keys given explicitly (the rest may be inferred from data).
    pub explicit: BTreeSet<String>,
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    pub precision: Precision,
    /// Dataset directory with `manifest.txt`, `train/` and `test/`.
    pub data: Option<PathBuf>,
    pub eval_split: Split,
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub train: TrainConfig,
    /// Train a three-axis ensemble instead of one model.
    pub ensemble: bool,
    pub seeds: Vec<u64>,
    pub beam_sizes: Vec<usize>,
    pub point_divisors: Vec<usize>,
    pub gradcheck: GradCheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = DeskSettings::default();
        RunConfig {
            model: desk.model.clone(),
            explicit: BTreeSet::new(),
            seed: 1,
            deterministic: false,
            out: PathBuf::from("rcnet-out"),
            precision: Precision::F32,
            data: None,
            eval_split: Split::Test,
            classes: desk.classes.clone(),
            train_per_class: desk.train_per_class,
            test_per_class: desk.test_per_class,
            n_points: desk.n_points,
            train: desk.train.clone(),
            ensemble: false,
            seeds: vec![1, 2, 3],
            beam_sizes: vec![4, 8, 16, 32],
            point_divisors: vec![1, 2, 4, 8],
            gradcheck: GradCheckOptions::default(),
        }
    }
}

fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{}'", v.trim())))
}

fn list<N: FromStr>(key: &str, v: &str) -> Result<Vec<N>> {
    let items: Vec<N> = v
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| num(key, t))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got '{other}'"))),
    }
}

fn join<D: ToString>(v: &[D]) -> String {
    v.iter().map(D::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_precision(v: &str) -> Result<Precision> {
    num::<u32>("precision", v)
        .ok()
        .and_then(Precision::from_bits)
        .ok_or_else(|| Error::Config(format!("precision must be 32 or 64, got '{}'", v.trim())))
}

impl RunConfig {
    /// Parses a config file's text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Sets one key; unknown keys are a config error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                self.model.seed = self.seed;
            }
            "deterministic" => self.deterministic = boolean(key, v)?,
            "out" => self.out = PathBuf::from(v.trim()),
            "precision" => self.precision = parse_precision(v)?,
            "data" => self.data = Some(PathBuf::from(v.trim())),
            "eval_split" => {
                self.eval_split = match v.trim() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(Error::Config(format!("eval_split must be train or test, got '{other}'"))),
                }
            }
            "classes" => self.classes = parse_class_spec(v)?,
            "train_per_class" => self.train_per_class = num(key, v)?,
            "test_per_class" => self.test_per_class = num(key, v)?,
            "n_points" => self.n_points = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.schedule.initial = num(key, v)?,
            "lr_decay" => t.schedule.decay = num(key, v)?,
            "lr_period" => t.schedule.period = num(key, v)?,
            "eval_batch" => t.eval_batch = num(key, v)?,
            "dropout" => t.dropout = num(key, v)?,
            "aug_scale_lo" => t.augment.scale_lo = num(key, v)?,
            "aug_scale_hi" => t.augment.scale_hi = num(key, v)?,
            "aug_translate" => t.augment.translate = num(key, v)?,
            "aug_jitter_sigma" => t.augment.jitter_sigma = num(key, v)?,
            "aug_jitter_clip" => t.augment.jitter_clip = num(key, v)?,
            "ensemble" => self.ensemble = boolean(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "beam_sizes" => self.beam_sizes = list(key, v)?,
            "point_divisors" => self.point_divisors = list(key, v)?,
            "gradcheck_h" => self.gradcheck.h = num(key, v)?,
            "gradcheck_tolerance" => self.gradcheck.tolerance = num(key, v)?,
            "gradcheck_samples" => {
                self.gradcheck.samples_per_param = match v.trim() {
                    "all" => None,
                    s => Some(num(key, s)?),
                }
            }
            k if CONFIG_KEYS.contains(&k) => {
                self.model.set(k, v)?;
                self.explicit.insert(k.to_string());
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Checks value ranges that single-key parsing cannot.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.n_points == 0 || self.train_per_class == 0 {
            return Err(Error::Config("n_points and train_per_class must be positive".into()));
        }
        if self.point_divisors.iter().any(|&d| d == 0 || self.n_points / d == 0) {
            return Err(Error::Config("point_divisors must leave at least one point".into()));
        }
        if self.beam_sizes.contains(&0) {
            return Err(Error::Config("beam_sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn require_data(&self) -> Result<&PathBuf> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("missing required key 'data' (a dataset directory)".into()))
    }

    /// Settings for the desk-scale studies.
    pub fn desk(&self) -> DeskSettings {
        DeskSettings {
            classes: self.classes.clone(),
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            n_points: self.n_points,
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    /// Dropout ratio for the with-dropout arm of the dropout study.
    pub fn study_dropout(&self) -> f64 {
        if self.train.dropout > 0.0 {
            self.train.dropout
        } else {
            DEFAULT_DROPOUT
        }
    }

    /// Every key with its resolved value; parses back to an equal config
    /// (up to which model keys count as explicit).
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::from("# rcnet run configuration\n");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("deterministic", self.deterministic.to_string());
        line("out", self.out.display().to_string());
        line("precision", self.precision.to_string());
        if let Some(d) = &self.data {
            line("data", d.display().to_string());
        }
        line("eval_split", self.eval_split.as_str().to_string());
        line("classes", self.classes.iter().map(|c| c.name()).collect::<Vec<_>>().join(","));
        line("train_per_class", self.train_per_class.to_string());
        line("test_per_class", self.test_per_class.to_string());
        line("n_points", self.n_points.to_string());
        line("epochs", t.epochs.to_string());
        line("batch_size", t.batch_size.to_string());
        line("lr", t.schedule.initial.to_string());
        line("lr_decay", t.schedule.decay.to_string());
        line("lr_period", t.schedule.period.to_string());
        line("eval_batch", t.eval_batch.to_string());
        line("dropout", t.dropout.to_string());
        line("aug_scale_lo", t.augment.scale_lo.to_string());
        line("aug_scale_hi", t.augment.scale_hi.to_string());
        line("aug_translate", t.augment.translate.to_string());
        line("aug_jitter_sigma", t.augment.jitter_sigma.to_string());
        line("aug_jitter_clip", t.augment.jitter_clip.to_string());
        line("ensemble", self.ensemble.to_string());
        line("seeds", join(&self.seeds));
        line("beam_sizes", join(&self.beam_sizes));
        line("point_divisors", join(&self.point_divisors));
        line("gradcheck_h", self.gradcheck.h.to_string());
        line("gradcheck_tolerance", self.gradcheck.tolerance.to_string());
        line(
            "gradcheck_samples",
            self.gradcheck
                .samples_per_param
                .map_or("all".to_string(), |k| k.to_string()),
        );
        for l in self.model.to_text().lines().filter(|l| !l.starts_with("seed ")) {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

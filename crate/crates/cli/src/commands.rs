//! One function per subcommand, generic over the scalar width.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rcnet::dataio::{load_cloud, load_dataset_dir, save_dataset_dir, Dataset, PointCloud, Split};
use rcnet::encoder::FeatureMap;
use rcnet::ensemble::{train_ensemble, Ensemble};
use rcnet::experiment::{
    ablation_csv, ablation_with, beam_size_csv, beam_size_sweep, dropout_csv, dropout_study, ensemble_csv,
    ensemble_study, train_model,
};
use rcnet::gradcheck::{micro_setup, model_grad_check_with_hook};
use rcnet::model::{argmax, predict_proba, HeadKind, RcNet, RcNetConfig};
use rcnet::partition::partition;
use rcnet::train::{evaluate, metrics_csv, MetricsReport};
use rcnet::{Error, Graph, Mode, Precision, Result, Scalar, Tensor};

use crate::{exit, Command, ExperimentKind, RunConfig};

pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<i32> {
    if let Command::Gradcheck { corrupt } = cmd {
        return gradcheck(cfg, corrupt.as_deref());
    }
    match cfg.precision {
        Precision::F32 => dispatch_as::<f32>(cmd, cfg),
        Precision::F64 => dispatch_as::<f64>(cmd, cfg),
    }
}

fn dispatch_as<T: Scalar>(cmd: &Command, cfg: &RunConfig) -> Result<i32> {
    match cmd {
        Command::GenerateSynth => generate_synth::<T>(cfg),
        Command::Train => train::<T>(cfg),
        Command::Eval { checkpoint } => eval::<T>(cfg, checkpoint),
        Command::Predict { checkpoint, input } => predict::<T>(cfg, checkpoint, input),
        Command::Experiment { kind } => experiment::<T>(cfg, *kind),
        Command::DumpBeams { input, checkpoint } => dump_beams::<T>(cfg, input, checkpoint.as_deref()),
        Command::Gradcheck { .. } => unreachable!("handled before precision dispatch"),
    }?;
    Ok(exit::OK)
}

/// Creates the output directory and writes the config echo into it.
fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    Ok(&cfg.out)
}

fn generate_synth<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let (train, test) = cfg.desk().data::<T>(cfg.seed)?;
    let out = prepare_out(cfg)?;
    let extra = vec![
        ("generator".to_string(), "synthetic".to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("n_points".to_string(), cfg.n_points.to_string()),
    ];
    let m = save_dataset_dir(out, &train, &test, extra)?;
    println!(
        "wrote {} train and {} test clouds to {}",
        m.train_files.len(),
        m.test_files.len(),
        out.display()
    );
    Ok(())
}

fn load_split<T: Scalar>(cfg: &RunConfig, split: Split) -> Result<Dataset<T>> {
    load_dataset_dir(cfg.require_data()?, split)
}

fn head_of<T: Scalar>(data: &Dataset<T>) -> HeadKind {
    if data.is_segmentation() {
        HeadKind::Segment
    } else {
        HeadKind::Classify
    }
}

/// The configured architecture with `dim`, `num_labels` and `head` taken
/// from the data unless given explicitly, in which case they must agree.
fn model_config<T: Scalar>(cfg: &RunConfig, data: &Dataset<T>) -> Result<RcNetConfig> {
    let mut m = cfg.model.clone();
    let dim = data
        .dim()
        .ok_or_else(|| Error::Data("the training split is empty".into()))?;
    let inferred = [
        ("dim", dim.to_string()),
        ("num_labels", data.num_labels.to_string()),
        ("head", head_of(data).to_string()),
    ];
    for (key, value) in inferred {
        if cfg.explicit.contains(key) {
            let mut probe = m.clone();
            probe.set(key, &value)?;
            if probe != m {
                return Err(Error::Validation(format!(
                    "config sets {key} but the dataset implies {key} = {value}"
                )));
            }
        } else {
            m.set(key, &value)?;
        }
    }
    m.validate()?;
    Ok(m)
}

fn train<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let train = load_split::<T>(cfg, Split::Train)?;
    let test = load_split::<T>(cfg, Split::Test)?;
    let test = (!test.is_empty()).then_some(&test);
    let mc = model_config(cfg, &train)?;
    let resolved = RunConfig {
        model: mc.clone(),
        ..cfg.clone()
    };
    let out = prepare_out(&resolved)?;
    if cfg.ensemble {
        let (ens, histories) = train_ensemble(&mc, &train, test, &cfg.train)?;
        let manifest = ens.save(out)?;
        for (k, h) in histories.iter().enumerate() {
            fs::write(out.join(format!("metrics_member{k}.csv")), metrics_csv(h, mc.head))?;
        }
        println!("ensemble of {} written to {}", ens.members.len(), manifest.display());
        return Ok(());
    }
    let head = mc.head;
    let (model, history) = train_model(mc, &train, test, &cfg.train)?;
    model.save(out.join("model.rck"))?;
    fs::write(out.join("metrics.csv"), metrics_csv(&history, head))?;
    match history.last() {
        Some(r) => println!(
            "trained {} epochs: train loss {:.4}, train acc {:.4}, test {}",
            history.len(),
            r.train_loss,
            r.train_acc,
            r.test_metric.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        ),
        None => println!("0 epochs: wrote the initial model"),
    }
    Ok(())
}

/// A single checkpoint or an ensemble manifest (`.txt`).
enum Predictor<T> {
    Single(Box<RcNet<T>>),
    Ensemble(Ensemble<T>),
}

impl<T: Scalar> Predictor<T> {
    fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "txt") {
            Ok(Predictor::Ensemble(Ensemble::load(path)?))
        } else {
            Ok(Predictor::Single(Box::new(RcNet::load(path)?)))
        }
    }

    fn config(&self) -> &RcNetConfig {
        match self {
            Predictor::Single(m) => &m.config,
            Predictor::Ensemble(e) => e.config(),
        }
    }

    fn probs(&self, clouds: &[&PointCloud<T>]) -> Result<Tensor<T>> {
        match self {
            Predictor::Single(m) => Ok(predict_proba(&m.logits(clouds)?)),
            Predictor::Ensemble(e) => e.predict_proba(clouds),
        }
    }

    fn evaluate(&self, data: &Dataset<T>, batch: usize) -> Result<MetricsReport> {
        match self {
            Predictor::Single(m) => evaluate(m, data, batch),
            Predictor::Ensemble(e) => e.evaluate(data, batch),
        }
    }
}

fn check_compatible<T: Scalar>(config: &RcNetConfig, data: &Dataset<T>) -> Result<()> {
    if let Some(d) = data.dim() {
        if d != config.dim {
            return Err(Error::Validation(format!("model expects d = {}, data has d = {d}", config.dim)));
        }
    }
    if data.num_labels as usize != config.num_labels {
        return Err(Error::Validation(format!(
            "model has {} outputs, data has {} labels",
            config.num_labels, data.num_labels
        )));
    }
    if head_of(data) != config.head {
        return Err(Error::Validation(format!(
            "{} model on {} data",
            config.head,
            head_of(data)
        )));
    }
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let pred = Predictor::<T>::load(checkpoint)?;
    let data = load_split::<T>(cfg, cfg.eval_split)?;
    check_compatible(pred.config(), &data)?;
    let report = pred.evaluate(&data, cfg.train.eval_batch)?;
    let out = prepare_out(cfg)?;
    let text = report.to_text();
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn predict<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, input: &Path) -> Result<()> {
    let pred = Predictor::<T>::load(checkpoint)?;
    let cloud = load_cloud::<T>(input)?.cloud;
    let config = pred.config();
    if cloud.dim() != config.dim {
        return Err(Error::Validation(format!(
            "model expects d = {}, {} has d = {}",
            config.dim,
            input.display(),
            cloud.dim()
        )));
    }
    let probs = pred.probs(&[&cloud])?;
    let mut text = String::new();
    for row in probs.data().chunks(config.num_labels) {
        let _ = write!(text, "{}", argmax(row));
        for p in row {
            let _ = write!(text, " {p}");
        }
        text.push('\n');
    }
    let out = prepare_out(cfg)?;
    fs::write(out.join("predictions.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn experiment<T: Scalar>(cfg: &RunConfig, kind: ExperimentKind) -> Result<()> {
    let settings = cfg.desk();
    let out = prepare_out(cfg)?;
    let (name, csv) = match kind {
        ExperimentKind::BeamSize => (
            "beam_size",
            beam_size_csv(&beam_size_sweep::<T>(&settings, &cfg.beam_sizes, cfg.seed)?),
        ),
        ExperimentKind::Dropout => (
            "dropout",
            dropout_csv(&dropout_study::<T>(&settings, &cfg.seeds, cfg.study_dropout(), &cfg.point_divisors)?),
        ),
        ExperimentKind::Ablation => {
            // keep every variant and its test split so each row can be re-evaluated
            let dir = out.join("ablation");
            let rows = ablation_with::<T, _>(&settings, &cfg.seeds, |seed, model, test| {
                let data_dir = dir.join(format!("seed{seed}_data"));
                if !data_dir.exists() {
                    let no_train = Dataset {
                        clouds: Vec::new(),
                        split: Split::Train,
                        ..test.clone()
                    };
                    save_dataset_dir(&data_dir, &no_train, test, Vec::new())?;
                }
                model.save(dir.join(format!("seed{seed}_{}.rck", model.config.encoder)))
            })?;
            ("ablation", ablation_csv(&rows))
        }
        ExperimentKind::Ensemble => ("ensemble", ensemble_csv(&ensemble_study::<T>(&settings, &cfg.seeds)?)),
    };
    fs::write(out.join(format!("{name}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<i32> {
    let (mut model, clouds, labels) = micro_setup(cfg.seed)?;
    if let Some(name) = corrupt {
        if model.store.id(name).is_none() {
            return Err(Error::Config(format!("no parameter named '{name}'")));
        }
    }
    let opts = rcnet::gradcheck::GradCheckOptions {
        seed: cfg.seed,
        ..cfg.gradcheck.clone()
    };
    let report = model_grad_check_with_hook(&mut model, clouds, labels, &opts, |name, grad| {
        if Some(name) == corrupt {
            grad.iter_mut().for_each(|g| *g += 1.0);
        }
    })?;
    let out = prepare_out(cfg)?;
    let text = report.to_text();
    fs::write(out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if report.passed() {
        return Ok(exit::OK);
    }
    let mut worst = report.failures();
    worst.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    for p in worst.iter().take(5) {
        let (i, a, n) = p.worst;
        eprintln!(
            "worst: {} [{i}] relative error {:.3e} (analytic {a:.6e}, numeric {n:.6e})",
            p.name, p.max_rel_error
        );
    }
    Ok(exit::CHECK_FAILED)
}

fn dump_beams<T: Scalar>(cfg: &RunConfig, input: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cloud = load_cloud::<T>(input)?.cloud;
    let out = prepare_out(cfg)?;
    let table = match checkpoint {
        None => partition(&cloud, &cfg.model.grid()?).to_table(),
        Some(path) => {
            // beams of the transformed points, as the model sees them
            let model = RcNet::<T>::load(path)?;
            if cloud.dim() != model.config.dim {
                return Err(Error::Validation(format!(
                    "model expects d = {}, cloud has d = {}",
                    model.config.dim,
                    cloud.dim()
                )));
            }
            let mut g = Graph::new(Mode::Eval);
            let f = model.forward(&mut g, &[&cloud])?;
            let moved = PointCloud::new(cloud.dim(), g.data(f.points).to_vec())?;
            let fm = FeatureMap::from_batch(g.value(f.feature_map), 0)?;
            write_feature_map(&fm, &out.join("feature_map.bin"))?;
            fs::write(
                out.join("feature_map.txt"),
                format!(
                    "r = {}\ns = {}\nl = {}\nlayout = i,j,channel row-major\nscalar = f32 little-endian\n",
                    fm.r, fm.s, fm.l
                ),
            )?;
            partition(&moved, &model.config.grid()?).to_table()
        }
    };
    fs::write(out.join("beams.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn write_feature_map<T: Scalar>(fm: &FeatureMap<T>, path: &PathBuf) -> Result<()> {
    let bytes: Vec<u8> = fm.data.iter().flat_map(|v| v.as_f32().to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

//! Optimization and evaluation: Adam, the step-decay schedule, the training
//! loop, and accuracy / IoU metrics.

mod metrics;

pub use metrics::{
    classification_metrics, evaluate, evaluate_classification, evaluate_miou, evaluate_pointwise,
    pointwise_metrics, predict_dataset, MetricsReport, Predictions, EMPTY_UNION_IOU,
};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::{augment, random_point_dropout, AugmentPolicy, Dataset, Label, PointCloud};
use crate::error::{Error, Result};
use crate::model::{argmax, HeadKind, RcNet};
use crate::scalar::Scalar;
use crate::tensor::{BnBuffers, Graph, Mode, ParamStore, Var};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8; moment buffers shaped like `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |_| Vec::new();
        let n = store.len();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..n).map(zeros).collect(),
            v: (0..n).map(zeros).collect(),
        }
    }

    /// One update of every trainable tensor from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        if let Some(&id) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::Validation(format!(
                "parameter {} has no gradient",
                store.name(id)
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for id in ids {
            let k = id.index();
            let t = store.get_mut(id);
            let n = t.numel();
            if self.m[k].len() != n {
                self.m[k] = vec![T::zero(); n];
                self.v[k] = vec![T::zero(); n];
            }
            let grad = t.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (e, theta) in t.data_mut().iter_mut().enumerate() {
                let g = grad[e];
                m[e] = b1 * m[e] + (T::one() - b1) * g;
                v[e] = b2 * v[e] + (T::one() - b2) * g * g;
                let mhat = m[e] / c1;
                let vhat = v[e] / c2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

/// `rate(epoch) = initial · decay^⌊epoch / period⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.001,
            decay: 0.1,
            period: 30,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let k = (epoch / self.period.max(1)) as i32;
        let inv = 1.0 / self.decay;
        // dividing by an integral factor keeps 1e-3 → 1e-4 → 1e-5 exact
        if inv.fract() == 0.0 {
            self.initial / inv.powi(k)
        } else {
            self.initial * self.decay.powi(k)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub augment: AugmentPolicy,
    /// Point dropout upper ratio; 0 disables dropout.
    pub dropout: f64,
    /// Evaluation batch size (does not affect results).
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 90,
            batch_size: 32,
            schedule: LrSchedule::default(),
            augment: AugmentPolicy::default(),
            dropout: 0.0,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout ratio {} not in [0, 1)", self.dropout)));
        }
        if !(self.schedule.initial >= 0.0 && self.schedule.decay > 0.0) {
            return Err(Error::Config("learning-rate schedule must be nonnegative".into()));
        }
        self.augment.validate()
    }
}

/// Shuffled mini-batches; a trailing batch of one sample joins the previous
/// batch because batch norm needs two samples.
pub fn make_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Cross-entropy of a forward pass: per cloud (classification) or mean over
/// all points of the batch (segmentation).
pub fn loss_for<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[&Label],
) -> Result<Var> {
    let mut targets = Vec::new();
    for l in labels {
        match l {
            Label::Class(c) => targets.push(*c as usize),
            Label::PerPoint(ls) => targets.extend(ls.iter().map(|&v| v as usize)),
        }
    }
    g.softmax_cross_entropy(logits, &targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    /// Classification accuracy or point accuracy on the augmented batches.
    pub accuracy: f64,
}

/// One pass over `data`: shuffle, augment, optional point dropout, forward,
/// loss, backward, Adam step, batch-norm statistics update.
pub fn train_epoch<T: Scalar, R: Rng + ?Sized>(
    model: &mut RcNet<T>,
    data: &Dataset<T>,
    opt: &mut Adam<T>,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Data("training on an empty dataset".into()));
    }
    let momentum = T::lit(crate::BN_MOMENTUM);
    let mut loss_sum = 0.0;
    let mut weight = 0usize;
    let (mut correct, mut total) = (0usize, 0usize);
    for (bi, batch) in make_batches(data.len(), cfg.batch_size, rng).iter().enumerate() {
        let mut clouds = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut c = augment(&data.clouds[i].cloud, rng, &cfg.augment)?;
            if cfg.dropout > 0.0 {
                c = random_point_dropout(&c, rng, cfg.dropout)?;
            }
            clouds.push(c);
        }
        let refs: Vec<&PointCloud<T>> = clouds.iter().collect();
        let labels: Vec<&Label> = batch.iter().map(|&i| &data.clouds[i].label).collect();
        let mut g = Graph::new(Mode::Train);
        let f = model.forward(&mut g, &refs)?;
        let loss = loss_for(&mut g, f.logits, &labels)?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Divergence(divergence_report(model, bi, batch, lv)));
        }
        let (c, t) = count_correct(g.data(f.logits), &labels, model.config.num_labels);
        correct += c;
        total += t;
        g.backward(loss)?;
        model.store.zero_grad();
        g.write_param_grads(&mut model.store);
        opt.step(&mut model.store, lr)?;
        g.commit_bn_stats(&mut model.store, momentum);
        loss_sum += lv * batch.len() as f64;
        weight += batch.len();
    }
    Ok(EpochStats {
        loss: loss_sum / weight as f64,
        accuracy: correct as f64 / total.max(1) as f64,
    })
}

fn count_correct<T: Scalar>(logits: &[T], labels: &[&Label], k: usize) -> (usize, usize) {
    let mut rows = logits.chunks(k);
    let mut correct = 0;
    let mut total = 0;
    for l in labels {
        let targets: Vec<u32> = match l {
            Label::Class(c) => vec![*c],
            Label::PerPoint(ls) => ls.clone(),
        };
        for t in targets {
            let row = rows.next().expect("one logit row per target");
            correct += usize::from(argmax(row) == t as usize);
            total += 1;
        }
    }
    (correct, total)
}

fn divergence_report<T: Scalar>(model: &RcNet<T>, batch: usize, members: &[usize], loss: f64) -> String {
    let mut s = format!("loss became {loss} at batch {batch} (samples {members:?})");
    for id in model.store.ids() {
        let t = model.store.get(id);
        if !t.is_finite() {
            let _ = write!(s, "; non-finite values in {}", model.store.name(id));
        }
    }
    s
}

/// Per-epoch record for the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Test accuracy (classification) or instance mIoU (segmentation).
    pub test_metric: Option<f64>,
}

/// Replaces every batch norm's running statistics with their average over
/// the (unaugmented) training clouds under the current weights.
///
/// The running averages kept during training trail the weights; features
/// that drift quickly early in training leave eval-mode outputs far from
/// train-mode ones until the averages catch up.
pub fn recalibrate_bn<T: Scalar>(model: &mut RcNet<T>, data: &Dataset<T>, batch: usize) -> Result<()> {
    let n = data.len();
    if n < 2 {
        return Ok(());
    }
    let mut batches: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(batch.max(2))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    let mut sums: Vec<(BnBuffers, Vec<f64>, Vec<f64>)> = Vec::new();
    for b in &batches {
        let refs: Vec<&PointCloud<T>> = b.iter().map(|&i| &data.clouds[i].cloud).collect();
        let mut g = Graph::new(Mode::Train);
        model.forward(&mut g, &refs)?;
        let w = b.len() as f64 / n as f64;
        for (k, st) in g.bn_stats().iter().enumerate() {
            if sums.len() <= k {
                sums.push((st.buffers, vec![0.0; st.mean.len()], vec![0.0; st.var.len()]));
            }
            let (_, m, v) = &mut sums[k];
            for (acc, x) in m.iter_mut().zip(&st.mean) {
                *acc += w * x.as_f64();
            }
            for (acc, x) in v.iter_mut().zip(&st.var) {
                *acc += w * x.as_f64();
            }
        }
    }
    for (buffers, m, v) in sums {
        for (dst, src) in [(buffers.mean, m), (buffers.var, v)] {
            for (r, x) in model.store.get_mut(dst).data_mut().iter_mut().zip(src) {
                *r = T::lit(x);
            }
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs, evaluating on `test` after each one.
///
/// Batch-norm statistics are recalibrated on `train` before every evaluation
/// and once at the end, so the returned model does not depend on whether a
/// test set was given.
pub fn fit<T: Scalar, R: Rng + ?Sized>(
    model: &mut RcNet<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut opt = Adam::new(&model.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(epoch);
        let st = train_epoch(model, train, &mut opt, lr, cfg, rng)?;
        let test_metric = match test {
            Some(t) => {
                recalibrate_bn(model, train, cfg.eval_batch)?;
                Some(evaluate(model, t, cfg.eval_batch)?.headline())
            }
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: st.loss,
            train_acc: st.accuracy,
            test_metric,
        });
    }
    if cfg.epochs > 0 {
        recalibrate_bn(model, train, cfg.eval_batch)?;
    }
    Ok(history)
}

/// CSV with one row per epoch.
pub fn metrics_csv(history: &[EpochRecord], head: HeadKind) -> String {
    let test_col = match head {
        HeadKind::Classify => "test_acc",
        HeadKind::Segment => "test_miou",
    };
    let mut out = format!("epoch,lr,train_loss,train_acc,{test_col}\n");
    for r in history {
        let test = r.test_metric.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.train_acc, test
        );
    }
    out
}

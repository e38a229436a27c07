//! Central finite-difference checks of reverse-mode gradients (64-bit).

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{generate_synthetic, Label, PointCloud, ShapeKind, Split};
use crate::error::{Error, Result};
use crate::model::{HeadKind, RcNet, RcNetConfig};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};
use crate::train::loss_for;

/// A scalar loss of the parameters in a store.
pub trait Objective {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    /// Records the loss on `g`.
    fn loss(&self, g: &mut Graph<f64>) -> Result<Var>;
}

/// A store plus a closure building the loss from it.
pub struct FnObjective<F> {
    pub store: ParamStore<f64>,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn loss(&self, g: &mut Graph<f64>) -> Result<Var> {
        (self.f)(g, &self.store)
    }
}

/// A fixed random projection `Σ logits ⊙ R` of a model's output on a fixed
/// batch, or its cross-entropy when `readout` is None.
///
/// The projection keeps parameter gradients well above finite-difference
/// roundoff; softmax saturation shrinks many of them under cross-entropy.
pub struct ModelObjective<'a> {
    pub model: &'a mut RcNet<f64>,
    pub clouds: Vec<PointCloud<f64>>,
    pub labels: Vec<Label>,
    pub readout: Option<Tensor<f64>>,
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> &ParamStore<f64> {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.model.store
    }

    fn loss(&self, g: &mut Graph<f64>) -> Result<Var> {
        let refs: Vec<&PointCloud<f64>> = self.clouds.iter().collect();
        let f = self.model.forward(g, &refs)?;
        match &self.readout {
            Some(r) => {
                let rv = g.input(r.clone());
                let p = g.mul(f.logits, rv)?;
                Ok(g.sum(p))
            }
            None => {
                let labels: Vec<&Label> = self.labels.iter().collect();
                loss_for(g, f.logits, &labels)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Scalars probed per tensor; None checks every scalar.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
    /// Eval by default: in train mode a shift applied just before a
    /// batch-normalized layer cancels, and the exactly-zero gradient of such
    /// parameters cannot be resolved below finite-difference roundoff.
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            samples_per_param: None,
            seed: 0,
            mode: Mode::Eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Probed scalars at or above tolerance.
    pub failed: usize,
    /// Flat index of the worst scalar and its analytic / numeric derivative.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub h: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// A summary line, then one line per parameter tensor.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "gradcheck h={} tolerance={} max_rel_error={:e} result={}\n",
            self.h,
            self.tolerance,
            self.max_rel_error(),
            if self.passed() { "pass" } else { "fail" }
        );
        for p in &self.params {
            let (i, a, n) = p.worst;
            let _ = writeln!(
                s,
                "{} numel={} checked={} failed={} max_rel={:e} at={} analytic={:e} numeric={:e} {}",
                p.name,
                p.numel,
                p.checked,
                p.failed,
                p.max_rel_error,
                i,
                a,
                n,
                if p.max_rel_error < self.tolerance { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

pub fn grad_check<O: Objective>(obj: &mut O, opts: &GradCheckOptions) -> Result<GradReport> {
    grad_check_with_hook(obj, opts, |_, _| {})
}

/// Like [`grad_check`], but lets `hook` edit each analytic gradient (by
/// parameter name) before comparison.
pub fn grad_check_with_hook<O, H>(obj: &mut O, opts: &GradCheckOptions, mut hook: H) -> Result<GradReport>
where
    O: Objective,
    H: FnMut(&str, &mut [f64]),
{
    if !(opts.h > 0.0) {
        return Err(Error::Config(format!("step {} must be positive", opts.h)));
    }
    let eval = |obj: &O| -> Result<f64> {
        let mut g = Graph::new(opts.mode);
        let l = obj.loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new(opts.mode);
    let l = obj.loss(&mut g)?;
    g.backward(l)?;
    obj.params_mut().zero_grad();
    g.write_param_grads(obj.params_mut());

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = obj.params().trainable_ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let name = obj.params().name(id).to_string();
        let numel = obj.params().get(id).numel();
        let mut analytic = obj.params_mut().get_mut(id).grad.take().unwrap_or_else(|| vec![0.0; numel]);
        hook(&name, &mut analytic);
        let probe: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name,
            numel,
            checked: probe.len(),
            max_rel_error: 0.0,
            failed: 0,
            worst: (0, 0.0, 0.0),
        };
        for i in probe {
            let orig = obj.params().get(id).data()[i];
            obj.params_mut().get_mut(id).data_mut()[i] = orig + opts.h;
            let up = eval(obj);
            obj.params_mut().get_mut(id).data_mut()[i] = orig - opts.h;
            let down = eval(obj);
            obj.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * opts.h);
            let err = relative_error(analytic[i], numeric);
            if !(err < opts.tolerance) {
                check.failed += 1;
            }
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                check.worst = (i, analytic[i], numeric);
            }
        }
        params.push(check);
    }
    Ok(GradReport {
        tolerance: opts.tolerance,
        h: opts.h,
        params,
    })
}

/// Checks every parameter of `model` through a random readout of its logits
/// on a fixed batch (drawn from `opts.seed`).
pub fn model_grad_check(
    model: &mut RcNet<f64>,
    clouds: Vec<PointCloud<f64>>,
    labels: Vec<Label>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    model_grad_check_with_hook(model, clouds, labels, opts, |_, _| {})
}

/// [`model_grad_check`] with an analytic-gradient hook, as in
/// [`grad_check_with_hook`].
pub fn model_grad_check_with_hook<H: FnMut(&str, &mut [f64])>(
    model: &mut RcNet<f64>,
    clouds: Vec<PointCloud<f64>>,
    labels: Vec<Label>,
    opts: &GradCheckOptions,
    hook: H,
) -> Result<GradReport> {
    let readout = {
        let refs: Vec<&PointCloud<f64>> = clouds.iter().collect();
        let shape = model.logits(&refs)?.shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?
    };
    let mut obj = ModelObjective {
        model,
        clouds,
        labels,
        readout: Some(readout),
    };
    grad_check_with_hook(&mut obj, opts, hook)
}

/// The small classifier used for whole-model checks: 4×4 beams, 8 hidden
/// units, three classes.
pub fn micro_config(seed: u64) -> RcNetConfig {
    RcNetConfig {
        r: 4,
        s: 4,
        hidden: 8,
        num_labels: 3,
        head: HeadKind::Classify,
        stn_point_widths: vec![8, 16],
        stn_fc_widths: vec![8],
        conv_widths: vec![8, 16],
        fc_widths: vec![8],
        seed,
        ..RcNetConfig::default()
    }
}

/// A micro model with a non-identity transform net and trained-looking
/// batch-norm statistics, plus one 64-point cloud per class.
pub fn micro_setup(seed: u64) -> Result<(RcNet<f64>, Vec<PointCloud<f64>>, Vec<Label>)> {
    let mut model = RcNet::new(micro_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // a zero output layer would hide the transform net from the loss
    if let Some(stn) = &model.stn {
        let w = stn.out.w;
        for v in model.store.get_mut(w).data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let running: Vec<_> = model
        .store
        .ids()
        .filter(|&id| model.store.name(id).contains(".running_"))
        .collect();
    for id in running {
        let var = model.store.name(id).ends_with("running_var");
        for v in model.store.get_mut(id).data_mut() {
            *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) };
        }
    }
    let data = generate_synthetic::<f64, _>(
        &[ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Helix],
        1,
        64,
        Split::Train,
        &mut rng,
    )?;
    let (clouds, labels) = data.clouds.into_iter().map(|c| (c.cloud, c.label)).unzip();
    Ok((model, clouds, labels))
}

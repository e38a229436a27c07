//! The RCNet forward graph.
//!
//! ```text
//! points ─ STN ─┬─ partition/sort ─ beam encoder ─ feature map ─ CNN ─ global
//!               │                                                       │
//!               │  classify: global ─ FC ─ K logits                     │
//!               └─ segment: [shared FC(point) | beam feature | global] ─ FC ─ M logits
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_pairs, HeadKind, RcNetConfig, CONFIG_KEYS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::PointCloud;
use crate::encoder::{assemble_feature_map, feature_propagation, BeamBatch, SetEncoder};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Linear};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Graph, Mode, ParamStore, Tensor, Var};

/// Linear (no bias) → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct FcBlock {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl FcBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FcBlock {
            linear: Linear::new(store, &format!("{name}.fc"), fan_in, fan_out, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), fan_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.linear.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

fn fc_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<FcBlock>, usize) {
    let mut width = fan_in;
    let blocks = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let b = FcBlock::new(store, &format!("{name}{i}"), width, w, rng);
            width = w;
            b
        })
        .collect();
    (blocks, width)
}

fn run_stack<T: Scalar>(
    blocks: &[FcBlock],
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    mut x: Var,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, store, x)?;
    }
    Ok(x)
}

/// Spatial transformer: per-point MLP, max over each cloud, FC layers, and a
/// final layer producing a d×d matrix that starts as the identity.
#[derive(Clone, Debug)]
pub struct Stn {
    pub point_mlp: Vec<FcBlock>,
    pub fc: Vec<FcBlock>,
    pub out: Linear,
    pub dim: usize,
}

impl Stn {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &RcNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let (point_mlp, w) = fc_stack(store, "stn.point", d, &cfg.stn_point_widths, rng);
        let (fc, w) = fc_stack(store, "stn.fc", w, &cfg.stn_fc_widths, rng);
        let out = Linear::new(store, "stn.out", w, d * d, true, rng);
        store.get_mut(out.w).data_mut().iter_mut().for_each(|v| *v = T::zero());
        let bias = store.get_mut(out.b.expect("stn bias")).data_mut();
        for i in 0..d {
            bias[i * d + i] = T::one();
        }
        Stn {
            point_mlp,
            fc,
            out,
            dim: d,
        }
    }

    /// Per-cloud transforms (B×d²) for points stacked with `offsets`.
    pub fn transforms<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        offsets: &[usize],
    ) -> Result<Var> {
        let h = run_stack(&self.point_mlp, g, store, x)?;
        let pooled = g.segment_max(h, offsets)?;
        let h = run_stack(&self.fc, g, store, pooled)?;
        self.out.forward(g, store, h)
    }
}

/// Conv-BN-ReLU stages with 2×2 max pooling between them, then a global max.
#[derive(Clone, Debug)]
pub struct CnnAggregator {
    pub stages: Vec<(Conv2d, BatchNorm)>,
}

impl CnnAggregator {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &RcNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c_in = cfg.hidden;
        let stages = cfg
            .conv_widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv2d::new(store, &format!("agg.conv{i}"), c_in, c_out, 3, 1, rng);
                let bn = BatchNorm::new(store, &format!("agg.bn{i}"), c_out);
                c_in = c_out;
                (conv, bn)
            })
            .collect();
        CnnAggregator { stages }
    }

    pub fn out_width(&self) -> usize {
        self.stages.last().map(|(c, _)| c.c_out).unwrap_or(0)
    }

    /// B×ℓ×r×s map → B×C global feature. Pooling is skipped once a spatial
    /// side drops below 2.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, map: Var) -> Result<Var> {
        let mut x = map;
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            x = conv.forward(g, store, x)?;
            x = bn.forward(g, store, x)?;
            x = g.relu(x);
            let shape = g.shape(x);
            if i + 1 < self.stages.len() && shape[2] >= 2 && shape[3] >= 2 {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        g.global_maxpool2d(x)
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Classify {
        fc: Vec<FcBlock>,
        out: Linear,
    },
    Segment {
        point: Vec<FcBlock>,
        fc: Vec<FcBlock>,
        out: Linear,
    },
}

/// Graph handles from one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// B×K for classification, P×M for segmentation.
    pub logits: Var,
    /// Transformed points (P×d).
    pub points: Var,
    /// B×d² transforms when the STN is present.
    pub transform: Option<Var>,
    pub beam_features: Var,
    /// B×ℓ×r×s.
    pub feature_map: Var,
    /// B×C.
    pub global: Var,
    pub beams: BeamBatch,
    pub offsets: Vec<usize>,
}

/// Parameters and structure of one RCNet.
#[derive(Clone, Debug)]
pub struct RcNet<T> {
    pub config: RcNetConfig,
    pub store: ParamStore<T>,
    pub stn: Option<Stn>,
    pub encoder: SetEncoder,
    pub aggregator: CnnAggregator,
    pub head: Head,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<T: Scalar> RcNet<T> {
    /// Fresh model initialized from `config.seed`. Each component draws from
    /// its own random stream, so toggling one part leaves the others'
    /// initial weights unchanged.
    pub fn new(config: RcNetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let stn = config
            .stn
            .then(|| Stn::new(&mut store, &config, &mut stream(seed, 1)));
        let encoder = SetEncoder::new(
            config.encoder,
            &mut store,
            "enc",
            config.dim,
            config.hidden,
            &mut stream(seed, 2),
        );
        let aggregator = CnnAggregator::new(&mut store, &config, &mut stream(seed, 3));
        let rng = &mut stream(seed, 4);
        let global = aggregator.out_width();
        let head = match config.head {
            HeadKind::Classify => {
                let (fc, w) = fc_stack(&mut store, "cls.fc", global, &config.fc_widths, rng);
                let out = Linear::new(&mut store, "cls.out", w, config.num_labels, true, rng);
                Head::Classify { fc, out }
            }
            HeadKind::Segment => {
                let (point, pw) =
                    fc_stack(&mut store, "seg.point", config.dim, &config.seg_point_widths, rng);
                let cat = pw + config.hidden + global;
                let (fc, w) = fc_stack(&mut store, "seg.fc", cat, &config.seg_fc_widths, rng);
                let out = Linear::new(&mut store, "seg.out", w, config.num_labels, true, rng);
                Head::Segment { point, fc, out }
            }
        };
        Ok(RcNet {
            config,
            store,
            stn,
            encoder,
            aggregator,
            head,
        })
    }

    /// Records the full forward pass for a batch of clouds.
    pub fn forward(&self, g: &mut Graph<T>, clouds: &[&PointCloud<T>]) -> Result<Forward> {
        if clouds.is_empty() {
            return Err(Error::Validation("forward on an empty batch".into()));
        }
        let d = self.config.dim;
        let mut offsets = vec![0];
        let mut stacked = Vec::new();
        for c in clouds {
            if c.dim() != d {
                return Err(Error::dim(format!("cloud of width {} for a d={d} model", c.dim())));
            }
            stacked.extend_from_slice(c.data());
            offsets.push(offsets.last().unwrap() + c.len());
        }
        let p = *offsets.last().unwrap();
        let x = g.input(Tensor::from_vec(&[p, d], stacked)?);
        let store = &self.store;
        let (points, transform) = match &self.stn {
            Some(stn) => {
                let t = stn.transforms(g, store, x, &offsets)?;
                (g.transform_points(x, t, &offsets)?, Some(t))
            }
            None => (x, None),
        };
        let moved: Vec<PointCloud<T>> = offsets
            .windows(2)
            .map(|w| PointCloud::new(d, g.data(points)[w[0] * d..w[1] * d].to_vec()))
            .collect::<Result<_>>()?;
        let beams = BeamBatch::from_clouds(&moved, &self.config.grid()?)?;
        let beam_features = self.encoder.encode_beams(g, store, points, &beams.beams)?;
        let feature_map = assemble_feature_map(g, beam_features, &beams)?;
        let global = self.aggregator.forward(g, store, feature_map)?;
        let logits = match &self.head {
            Head::Classify { fc, out } => {
                let h = run_stack(fc, g, store, global)?;
                out.forward(g, store, h)?
            }
            Head::Segment { point, fc, out } => {
                let local = run_stack(point, g, store, points)?;
                let propagated = feature_propagation(g, beam_features, &beams)?;
                let sample_of: Vec<usize> = (0..clouds.len())
                    .flat_map(|b| std::iter::repeat_n(b, offsets[b + 1] - offsets[b]))
                    .collect();
                let tiled = g.gather_rows(global, &sample_of)?;
                let cat = g.concat_cols(&[local, propagated, tiled])?;
                let h = run_stack(fc, g, store, cat)?;
                out.forward(g, store, h)?
            }
        };
        Ok(Forward {
            logits,
            points,
            transform,
            beam_features,
            feature_map,
            global,
            beams,
            offsets,
        })
    }

    /// Eval-mode logits for a batch: B×K (classification) or P×M
    /// (segmentation, rows in input order).
    pub fn logits(&self, clouds: &[&PointCloud<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new(Mode::Eval);
        let f = self.forward(&mut g, clouds)?;
        Ok(g.value(f.logits).clone())
    }

    /// K logits of one cloud.
    pub fn classify(&self, cloud: &PointCloud<T>) -> Result<Vec<T>> {
        if self.config.head != HeadKind::Classify {
            return Err(Error::Config("classify on a segmentation model".into()));
        }
        Ok(self.logits(&[cloud])?.into_data())
    }

    /// N×M logits of one cloud.
    pub fn segment(&self, cloud: &PointCloud<T>) -> Result<Tensor<T>> {
        if self.config.head != HeadKind::Segment {
            return Err(Error::Config("segment on a classification model".into()));
        }
        self.logits(&[cloud])
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.store
            .trainable_ids()
            .map(|id| self.store.get(id).numel())
            .sum()
    }
}

/// Row-wise softmax of a B×K matrix (or a single row).
pub fn predict_proba<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); logits.numel()];
    for (src, dst) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
        kernels::softmax_row(src, dst);
    }
    Tensor::from_raw(logits.shape().to_vec(), out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

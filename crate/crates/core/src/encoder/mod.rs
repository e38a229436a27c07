//! Beam encoders and the r×s×ℓ feature map they produce.
//!
//! Every encoder maps a set of beams (each a depth-sorted list of rows of a
//! point-feature matrix) to one ℓ-vector per beam, using one parameter set
//! shared by all beams. [`GruEncoder`] reads each beam as a sequence;
//! [`MlpPoolEncoder`] is the order-blind baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dataio::PointCloud;
use crate::error::{Error, Result};
use crate::layers::{uniform, Linear};
use crate::partition::{partition, BeamAssignment, BeamGrid};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Number of stacked GRU layers.
pub const GRU_LAYERS: usize = 2;

/// One GRU cell: input→hidden weights `w_*`, hidden→hidden weights `u_*`,
/// biases `b_*`, for the update (z), reset (r) and candidate (h) gates.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl GruLayer {
    /// Matrices ~ U(−1/√ℓ, 1/√ℓ), biases zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = GATES.map(|gt| {
            store.add_param(&format!("{name}.w_{gt}"), uniform(&[input, hidden], bound, rng))
        });
        let u = GATES.map(|gt| {
            store.add_param(&format!("{name}.u_{gt}"), uniform(&[hidden, hidden], bound, rng))
        });
        let b = GATES.map(|gt| store.add_param(&format!("{name}.b_{gt}"), Tensor::zeros(&[hidden])));
        GruLayer {
            w,
            u,
            b,
            input,
            hidden,
        }
    }

    /// Input contributions `x·W_g + b_g` for the three gates.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (gate, slot) in out.iter_mut().enumerate() {
            let w = g.param(store, self.w[gate]);
            let b = g.param(store, self.b[gate]);
            let xw = g.matmul(x, w)?;
            *slot = g.add_bias(xw, b)?;
        }
        Ok(out)
    }

    /// One step given projected inputs (rows aligned with `h`):
    ///
    /// ```text
    /// z = σ(xz + h·U_z)        r = σ(xr + h·U_r)
    /// c = tanh(xh + (r⊙h)·U_h)  h' = (1 − z)⊙h + z⊙c
    /// ```
    pub fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xp: [Var; 3],
        h: Var,
    ) -> Result<Var> {
        let [uz, ur, uh] = self.u.map(|id| g.param(store, id));
        let hz = g.matmul(h, uz)?;
        let z = g.add(xp[0], hz)?;
        let z = g.sigmoid(z);
        let hr = g.matmul(h, ur)?;
        let r = g.add(xp[1], hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, uh)?;
        let c = g.add(xp[2], rhu)?;
        let c = g.tanh(c);
        let keep = g.one_minus(z);
        let keep = g.mul(keep, h)?;
        let take = g.mul(z, c)?;
        g.add(keep, take)
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let xp = self.project(g, store, x)?;
        self.step_projected(g, store, xp, h)
    }
}

/// Two stacked GRU layers; a beam's feature is the top layer's final state.
#[derive(Clone, Debug)]
pub struct GruEncoder {
    pub layers: Vec<GruLayer>,
}

impl GruEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..GRU_LAYERS)
            .map(|i| {
                let fan_in = if i == 0 { input } else { hidden };
                GruLayer::new(store, &format!("{name}.gru{i}"), fan_in, hidden, rng)
            })
            .collect();
        GruEncoder { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    /// Encodes every beam; row k of the result belongs to `beams[k]`.
    ///
    /// Beams are stepped together: sorted by decreasing length, the beams
    /// still running at step t form a prefix, so each step works on a prefix
    /// of the previous hidden state. Rows never interact, so the result is
    /// bitwise identical to encoding each beam on its own.
    pub fn encode_beams<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        beams: &[Vec<usize>],
    ) -> Result<Var> {
        check_beams(beams)?;
        let mut order: Vec<usize> = (0..beams.len()).collect();
        order.sort_by_key(|&k| std::cmp::Reverse(beams[k].len()));
        let lens: Vec<usize> = order.iter().map(|&k| beams[k].len()).collect();
        let active = |t: usize| lens.partition_point(|&l| l > t);

        let hidden = self.hidden();
        let proj = self.layers[0].project(g, store, x)?;
        let mut state: Vec<Option<Var>> = vec![None; self.layers.len()];
        let mut finished = Vec::new();
        let mut finished_pos = Vec::with_capacity(beams.len());
        for t in 0..lens[0] {
            let n = active(t);
            let rows: Vec<usize> = order[..n].iter().map(|&k| beams[k][t]).collect();
            let mut xp = [proj[0]; 3];
            for (slot, &p) in xp.iter_mut().zip(&proj) {
                *slot = g.gather_rows(p, &rows)?;
            }
            for (li, layer) in self.layers.iter().enumerate() {
                let h = match state[li] {
                    None => g.input(Tensor::zeros(&[n, hidden])),
                    Some(h) if g.shape(h)[0] == n => h,
                    Some(h) => g.slice_rows(h, 0, n)?,
                };
                let h = layer.step_projected(g, store, xp, h)?;
                state[li] = Some(h);
                if li + 1 < self.layers.len() {
                    xp = self.layers[li + 1].project(g, store, h)?;
                }
            }
            let next = active(t + 1);
            if next < n {
                let top = state[self.layers.len() - 1].expect("top state");
                finished.push(g.slice_rows(top, next, n)?);
                finished_pos.extend(next..n);
            }
        }
        let mut all = finished[0];
        for &piece in &finished[1..] {
            all = g.concat_rows(all, piece)?;
        }
        let mut row_of = vec![0; beams.len()];
        for (m, &p) in finished_pos.iter().enumerate() {
            row_of[order[p]] = m;
        }
        g.gather_rows(all, &row_of)
    }
}

fn check_beams(beams: &[Vec<usize>]) -> Result<()> {
    if beams.is_empty() {
        return Err(Error::Validation("no beams to encode".into()));
    }
    if beams.iter().any(Vec::is_empty) {
        return Err(Error::Validation("empty beams cannot be encoded".into()));
    }
    Ok(())
}

/// Baseline: a shared per-point MLP (widths ℓ, ℓ, ReLU) followed by a
/// column-wise max over each beam's points.
#[derive(Clone, Debug)]
pub struct MlpPoolEncoder {
    pub layers: Vec<Linear>,
}

impl MlpPoolEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..GRU_LAYERS)
            .map(|i| {
                let fan_in = if i == 0 { input } else { hidden };
                Linear::new(store, &format!("{name}.mlp{i}"), fan_in, hidden, true, rng)
            })
            .collect();
        MlpPoolEncoder { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].fan_out
    }

    /// Per-point features before pooling.
    pub fn point_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn encode_beams<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        beams: &[Vec<usize>],
    ) -> Result<Var> {
        check_beams(beams)?;
        let h = self.point_features(g, store, x)?;
        let rows: Vec<usize> = beams.iter().flatten().copied().collect();
        let mut offsets = vec![0];
        for b in beams {
            offsets.push(offsets.last().unwrap() + b.len());
        }
        let grouped = g.gather_rows(h, &rows)?;
        g.segment_max(grouped, &offsets)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderKind {
    #[default]
    Gru,
    Mlp,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Gru => "gru",
            EncoderKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gru" => Ok(EncoderKind::Gru),
            "mlp" | "baseline" => Ok(EncoderKind::Mlp),
            other => Err(Error::Config(format!("unknown encoder '{other}'"))),
        }
    }
}

/// Either beam encoder behind one interface.
#[derive(Clone, Debug)]
pub enum SetEncoder {
    Gru(GruEncoder),
    Mlp(MlpPoolEncoder),
}

impl SetEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        kind: EncoderKind,
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            EncoderKind::Gru => SetEncoder::Gru(GruEncoder::new(store, name, input, hidden, rng)),
            EncoderKind::Mlp => {
                SetEncoder::Mlp(MlpPoolEncoder::new(store, name, input, hidden, rng))
            }
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            SetEncoder::Gru(_) => EncoderKind::Gru,
            SetEncoder::Mlp(_) => EncoderKind::Mlp,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            SetEncoder::Gru(e) => e.hidden(),
            SetEncoder::Mlp(e) => e.hidden(),
        }
    }

    pub fn encode_beams<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        beams: &[Vec<usize>],
    ) -> Result<Var> {
        match self {
            SetEncoder::Gru(e) => e.encode_beams(g, store, x, beams),
            SetEncoder::Mlp(e) => e.encode_beams(g, store, x, beams),
        }
    }

    /// Feature of a single nonempty, depth-sorted beam (1×ℓ).
    pub fn encode_beam<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        rows: &[usize],
    ) -> Result<Var> {
        self.encode_beams(g, store, x, &[rows.to_vec()])
    }
}

/// The nonempty beams of a batch of clouds whose points are stacked as rows
/// of one matrix (sample b owns rows `offsets[b]..offsets[b+1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct BeamBatch {
    pub grid: BeamGrid,
    pub batch: usize,
    /// Global point rows of each nonempty beam, in depth order.
    pub beams: Vec<Vec<usize>>,
    /// `(sample, flat beam index i·s + j)` of each entry of `beams`.
    pub cells: Vec<(usize, usize)>,
    /// Index into `beams` for every point row.
    pub owner: Vec<usize>,
}

impl BeamBatch {
    pub fn new(assignments: &[BeamAssignment], offsets: &[usize]) -> Result<Self> {
        let Some(first) = assignments.first() else {
            return Err(Error::Validation("empty batch".into()));
        };
        if offsets.len() != assignments.len() + 1 {
            return Err(Error::dim("offsets must have one entry per sample plus one"));
        }
        let mut bb = BeamBatch {
            grid: first.grid,
            batch: assignments.len(),
            beams: Vec::new(),
            cells: Vec::new(),
            owner: vec![0; *offsets.last().unwrap()],
        };
        for (b, a) in assignments.iter().enumerate() {
            if a.grid != bb.grid || a.n_points() != offsets[b + 1] - offsets[b] {
                return Err(Error::dim(format!("assignment {b} disagrees with the batch")));
            }
            for (flat, members) in a.nonempty() {
                let rows: Vec<usize> = members.iter().map(|&k| offsets[b] + k).collect();
                for &row in &rows {
                    bb.owner[row] = bb.beams.len();
                }
                bb.beams.push(rows);
                bb.cells.push((b, flat));
            }
        }
        Ok(bb)
    }

    /// Partitions every cloud and stacks the results.
    pub fn from_clouds<T: Scalar>(clouds: &[PointCloud<T>], grid: &BeamGrid) -> Result<Self> {
        let mut offsets = vec![0];
        let mut assignments = Vec::with_capacity(clouds.len());
        for c in clouds {
            offsets.push(offsets.last().unwrap() + c.len());
            assignments.push(partition(c, grid));
        }
        Self::new(&assignments, &offsets)
    }
}

/// Scatters beam features (K×ℓ, rows as in `bb.beams`) into a zero-padded
/// B×ℓ×r×s map; empty beams stay exactly zero.
pub fn assemble_feature_map<T: Scalar>(g: &mut Graph<T>, feats: Var, bb: &BeamBatch) -> Result<Var> {
    let (k, l) = match g.shape(feats) {
        [k, l] => (*k, *l),
        s => return Err(Error::dim(format!("beam features must be a matrix, got {s:?}"))),
    };
    if k != bb.beams.len() {
        return Err(Error::dim(format!("{k} beam features for {} beams", bb.beams.len())));
    }
    let plane = bb.grid.r * bb.grid.s;
    let mut dst = Vec::with_capacity(k * l);
    for &(b, flat) in &bb.cells {
        for c in 0..l {
            dst.push((b * l + c) * plane + flat);
        }
    }
    g.scatter(feats, &dst, &[bb.batch, l, bb.grid.r, bb.grid.s])
}

/// Copies each beam's feature to every point of that beam (P×ℓ).
pub fn feature_propagation<T: Scalar>(g: &mut Graph<T>, feats: Var, bb: &BeamBatch) -> Result<Var> {
    g.gather_rows(feats, &bb.owner)
}

/// One sample's feature map as an r×s lattice of ℓ-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub r: usize,
    pub s: usize,
    pub l: usize,
    /// Row-major over (i, j, channel).
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    /// Extracts sample `b` from a B×ℓ×r×s tensor.
    pub fn from_batch(t: &Tensor<T>, b: usize) -> Result<Self> {
        let &[batch, l, r, s] = t.shape() else {
            return Err(Error::dim(format!("feature map tensor of shape {:?}", t.shape())));
        };
        if b >= batch {
            return Err(Error::Index(format!("sample {b} of {batch}")));
        }
        let src = &t.data()[b * l * r * s..(b + 1) * l * r * s];
        let mut data = vec![T::zero(); r * s * l];
        for c in 0..l {
            for ij in 0..r * s {
                data[ij * l + c] = src[c * r * s + ij];
            }
        }
        Ok(FeatureMap { r, s, l, data })
    }

    /// Feature of beam `(i, j)`, 0-indexed.
    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let at = (i * self.s + j) * self.l;
        &self.data[at..at + self.l]
    }
}

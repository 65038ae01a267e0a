//! Batch-related convolutional cells.
//!
//! A cell gates its input with three sigmoid convolutions and keeps a latent
//! state that survives from one mini-batch to the next:
//!
//! ```text
//! i = σ(W_xi * x + b_i)    f = σ(W_xf * x + b_f)    o = σ(W_xo * x + b_o)
//! C_b = f ∘ C_{b-1} + i ∘ tanh(W_xc * x + b_c)
//! y   = o ∘ tanh(C_b)
//! ```
//!
//! Gates see only the current input. The stored state is the batch mean of
//! `C_b`; it is broadcast to every sample of the following batch and detached
//! from that batch's graph unless the caller keeps the state node alive.
//!
//! The v2 cell additionally keeps an aggregated output (hidden) state. Each
//! batch it is projected back to the input feature space with a transposed
//! convolution, concatenated with the current input and fused by a 1x1
//! convolution before the v1 dynamics run.

mod oracle;

pub use oracle::latent_unroll_oracle;

use rand::Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Float, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellVersion {
    V1,
    V2,
}

impl std::str::FromStr for CellVersion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            other => Err(format!("unknown cell version `{other}`")),
        }
    }
}

/// Initial forget-gate bias; keeps most of the state early in training.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Weights of one BConv-Cell. All kernels are `[channels, in_channels, k, k]`
/// with stride 1 and same padding.
#[derive(Clone, Debug)]
pub struct BConvCell {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub w_xi: ParamId,
    pub w_xf: ParamId,
    pub w_xo: ParamId,
    pub w_xc: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_c: ParamId,
}

impl BConvCell {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "cell kernel must be odd for same padding, got {kernel}"
            )));
        }
        let shape = [channels, in_channels, kernel, kernel];
        let fan_in = in_channels * kernel * kernel;
        let mut weight = |name: &str, rng: &mut R| store_add(store, prefix, name, fan_in_uniform(&shape, fan_in, rng));
        let w_xi = weight("w_xi", rng)?;
        let w_xf = weight("w_xf", rng)?;
        let w_xo = weight("w_xo", rng)?;
        let w_xc = weight("w_xc", rng)?;
        let b_i = store_add(store, prefix, "b_i", fan_in_uniform(&[channels], fan_in, rng))?;
        let b_f = store_add(store, prefix, "b_f", Tensor::full(&[channels], T::of(FORGET_BIAS_INIT)))?;
        let b_o = store_add(store, prefix, "b_o", fan_in_uniform(&[channels], fan_in, rng))?;
        let b_c = store_add(store, prefix, "b_c", fan_in_uniform(&[channels], fan_in, rng))?;
        Ok(Self {
            in_channels,
            channels,
            kernel,
            w_xi,
            w_xf,
            w_xo,
            w_xc,
            b_i,
            b_f,
            b_o,
            b_c,
        })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels * self.in_channels * self.kernel * self.kernel + 4 * self.channels
    }

    /// One application of the gated update; `c_prev` is already batch-shaped.
    /// Returns `(y, C_new)` per sample.
    pub fn step<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        // The four gates share one convolution over stacked kernels.
        let w = g.concat_rows(&[self.w_xi, self.w_xf, self.w_xo, self.w_xc].map(|id| p.node(id)))?;
        let b = g.concat_rows(&[self.b_i, self.b_f, self.b_o, self.b_c].map(|id| p.node(id)))?;
        let z = g.conv2d(x, w, Some(b), 1, self.padding())?;
        let ch = self.channels;
        let zi = g.slice_channels(z, 0, ch)?;
        let zf = g.slice_channels(z, ch, ch)?;
        let zo = g.slice_channels(z, 2 * ch, ch)?;
        let zc = g.slice_channels(z, 3 * ch, ch)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let o = g.sigmoid(zo)?;
        let candidate = g.tanh(zc)?;
        let kept = g.hadamard(f, c_prev)?;
        let written = g.hadamard(i, candidate)?;
        let c_new = g.add(kept, written)?;
        let squashed = g.tanh(c_new)?;
        let y = g.hadamard(o, squashed)?;
        Ok((y, c_new))
    }
}

fn store_add<T: Float>(
    store: &mut ParamStore<T>,
    prefix: &str,
    name: &str,
    tensor: Result<Tensor<T>>,
) -> Result<ParamId> {
    store.add(format!("{prefix}.{name}"), tensor?)
}

/// BConv-Cell-v2: a [`BConvCell`] whose input is first fused with features
/// recovered from the aggregated hidden state.
#[derive(Clone, Debug)]
pub struct BConvCellV2 {
    pub base: BConvCell,
    /// Input channels of the whole cell (before fusion).
    pub in_channels: usize,
    /// Transposed-conv kernel `[channels, in_channels, k, k]`.
    pub w_rec: ParamId,
    pub b_rec: ParamId,
    /// 1x1 kernel `[in_channels, 2 * in_channels, 1, 1]` over `[x, recovered]`.
    pub w_mix: ParamId,
    pub b_mix: ParamId,
}

impl BConvCellV2 {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let base = BConvCell::new(store, prefix, in_channels, channels, kernel, rng)?;
        let rec_fan_in = in_channels * kernel * kernel;
        let w_rec = store_add(
            store,
            prefix,
            "w_rec",
            fan_in_uniform(&[channels, in_channels, kernel, kernel], rec_fan_in, rng),
        )?;
        let b_rec = store_add(store, prefix, "b_rec", fan_in_uniform(&[in_channels], rec_fan_in, rng))?;
        let mix_fan_in = 2 * in_channels;
        let w_mix = store_add(
            store,
            prefix,
            "w_mix",
            fan_in_uniform(&[in_channels, 2 * in_channels, 1, 1], mix_fan_in, rng),
        )?;
        let b_mix = store_add(store, prefix, "b_mix", fan_in_uniform(&[in_channels], mix_fan_in, rng))?;
        Ok(Self {
            base,
            in_channels,
            w_rec,
            b_rec,
            w_mix,
            b_mix,
        })
    }

    pub fn param_count(&self) -> usize {
        let (c, i, k) = (self.base.channels, self.in_channels, self.base.kernel);
        self.base.param_count() + (c * i * k * k + i) + (i * 2 * i + i)
    }
}

/// Either cell flavour.
#[derive(Clone, Debug)]
pub enum Cell {
    V1(BConvCell),
    V2(BConvCellV2),
}

/// Persistent state of one cell between mini-batches.
///
/// `c` (and `h` for v2) are stored batch-reduced with shape `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub c: Tensor<T>,
    pub h: Option<Tensor<T>>,
    /// True from a reset until the first state write-back.
    pub epoch_fresh: bool,
}

impl<T: Float> CellState<T> {
    pub fn zeros(channels: usize, height: usize, width: usize, with_hidden: bool) -> Result<Self> {
        let shape = [1, channels, height, width];
        Ok(Self {
            c: Tensor::zeros(&shape)?,
            h: with_hidden.then(|| Tensor::zeros(&shape)).transpose()?,
            epoch_fresh: true,
        })
    }

    pub fn reset(&mut self) {
        self.c.data_mut().fill(T::zero());
        if let Some(h) = self.h.as_mut() {
            h.data_mut().fill(T::zero());
        }
        self.epoch_fresh = true;
    }

    pub fn is_zero(&self) -> bool {
        self.c.is_all_zero() && self.h.as_ref().is_none_or(Tensor::is_all_zero)
    }

    /// Places the state on `graph` as constants (detached from earlier batches).
    pub fn bind(&self, g: &mut Graph<T>) -> StateNodes {
        StateNodes {
            c: g.constant(self.c.clone()),
            h: self.h.as_ref().map(|h| g.constant(h.clone())),
        }
    }

    /// Reads back a state produced on `graph`.
    pub fn from_nodes(g: &Graph<T>, nodes: &StateNodes) -> Self {
        Self {
            c: g.value(nodes.c).clone(),
            h: nodes.h.map(|h| g.value(h).clone()),
            epoch_fresh: false,
        }
    }
}

/// Zeroes a state; the result is also marked fresh for a new epoch.
pub fn reset_state<T: Float>(state: &CellState<T>) -> CellState<T> {
    let mut fresh = state.clone();
    fresh.reset();
    fresh
}

/// State tensors living on a graph, batch extent 1.
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub c: NodeId,
    pub h: Option<NodeId>,
}

/// Output of one cell step on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub y: NodeId,
    pub state: StateNodes,
}

impl Cell {
    pub fn new<T: Float, R: Rng + ?Sized>(
        version: CellVersion,
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match version {
            CellVersion::V1 => Cell::V1(BConvCell::new(store, prefix, in_channels, channels, kernel, rng)?),
            CellVersion::V2 => Cell::V2(BConvCellV2::new(store, prefix, in_channels, channels, kernel, rng)?),
        })
    }

    pub fn version(&self) -> CellVersion {
        match self {
            Cell::V1(_) => CellVersion::V1,
            Cell::V2(_) => CellVersion::V2,
        }
    }

    pub fn base(&self) -> &BConvCell {
        match self {
            Cell::V1(c) => c,
            Cell::V2(c) => &c.base,
        }
    }

    pub fn channels(&self) -> usize {
        self.base().channels
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Cell::V1(c) => c.in_channels,
            Cell::V2(c) => c.in_channels,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Cell::V1(c) => c.param_count(),
            Cell::V2(c) => c.param_count(),
        }
    }

    pub fn zero_state<T: Float>(&self, height: usize, width: usize) -> Result<CellState<T>> {
        CellState::zeros(self.channels(), height, width, matches!(self, Cell::V2(_)))
    }

    /// Runs the cell on a batch `x` `[N, in_channels, H, W]` given the previous
    /// batch-reduced state, producing `y` and the next batch-reduced state.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: NodeId,
        state: StateNodes,
    ) -> Result<CellOutput> {
        let [n, c, h, w] = g.value(x).dims4("bconv_forward")?;
        let expect_c = [1, self.channels(), h, w];
        if c != self.in_channels() || g.shape(state.c) != expect_c {
            return Err(shape_mismatch("bconv_forward", g.shape(x), g.shape(state.c)));
        }
        let c_prev = g.batch_broadcast(state.c, n)?;
        match self {
            Cell::V1(cell) => {
                let (y, c_new) = cell.step(g, p, x, c_prev)?;
                let c_mean = g.batch_mean(c_new)?;
                Ok(CellOutput {
                    y,
                    state: StateNodes { c: c_mean, h: None },
                })
            }
            Cell::V2(cell) => {
                let h_prev = state.h.ok_or_else(|| Error::State("v2 cell needs a hidden state".into()))?;
                if g.shape(h_prev) != expect_c {
                    return Err(shape_mismatch("bconv_v2_forward", g.shape(x), g.shape(h_prev)));
                }
                let pad = cell.base.padding();
                let recovered = g.conv_transpose2d(h_prev, p.node(cell.w_rec), Some(p.node(cell.b_rec)), 1, pad)?;
                let recovered = g.batch_broadcast(recovered, n)?;
                let joined = g.concat_channels(x, recovered)?;
                let mixed = g.conv2d(joined, p.node(cell.w_mix), Some(p.node(cell.b_mix)), 1, 0)?;
                let (y, c_new) = cell.base.step(g, p, mixed, c_prev)?;
                let c_mean = g.batch_mean(c_new)?;
                let y_mean = g.batch_mean(y)?;
                let h_next = aggregate_hidden(g, h_prev, y_mean)?;
                Ok(CellOutput {
                    y,
                    state: StateNodes {
                        c: c_mean,
                        h: Some(h_next),
                    },
                })
            }
        }
    }
}

/// Hidden-state aggregation of the v2 cell: running average of the previous
/// hidden state and the batch-mean output.
pub fn aggregate_hidden<T: Float>(g: &mut Graph<T>, h_prev: NodeId, y_mean: NodeId) -> Result<NodeId> {
    let sum = g.add(h_prev, y_mean)?;
    g.scale(sum, 0.5)
}

fn run_cell<T: Float>(
    x: &Tensor<T>,
    state: &CellState<T>,
    cell: &Cell,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let s = state.bind(&mut g);
    let out = cell.forward(&mut g, &p, xi, s)?;
    Ok((g.value(out.y).clone(), CellState::from_nodes(&g, &out.state)))
}

/// Evaluates a v1 cell on one batch outside any training graph.
pub fn bconv_forward<T: Float>(
    x: &Tensor<T>,
    state: &CellState<T>,
    cell: &BConvCell,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    run_cell(x, state, &Cell::V1(cell.clone()), store)
}

/// Evaluates a v2 cell on one batch outside any training graph.
pub fn bconv_v2_forward<T: Float>(
    x: &Tensor<T>,
    state: &CellState<T>,
    cell: &BConvCellV2,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    run_cell(x, state, &Cell::V2(cell.clone()), store)
}

/// Evaluates either cell flavour outside any training graph.
pub fn cell_forward<T: Float>(
    x: &Tensor<T>,
    state: &CellState<T>,
    cell: &Cell,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, CellState<T>)> {
    run_cell(x, state, cell, store)
}

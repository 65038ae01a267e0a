//! Progressive transfer learning (PTL) network: a stack of conv blocks, each
//! paired with a BConv-Cell through a 1x1 fusion conv, a stem cell on the raw
//! image, a fused feature vector and a two-layer classification head.
//!
//! ```text
//! y^0 = cell_0(fuse_0(image))
//! x^i = block_i(x^{i-1})                      x^0 = image
//! y^i = cell_i(fuse_i([x^i, pool(y^{i-1})]))
//! feature = gap(fusion([x^n, y^n]))           logits = head(feature)
//! ```
//!
//! The backbone-only network drops every cell and fusion: `feature = gap(x^n)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{Cell, CellState, CellVersion, StateNodes};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Float, Graph, NodeId, Tensor};
use crate::training::ProbeGroup;

/// Topology of a network. `cells: None` builds the backbone-only network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub cells: Option<CellVersion>,
    pub in_channels: usize,
    pub resolution: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub cell_channels: Vec<usize>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cells: Some(CellVersion::V1),
            in_channels: 3,
            resolution: 16,
            stem_channels: 8,
            block_channels: vec![16, 32, 64],
            block_strides: vec![1, 2, 2],
            cell_channels: vec![8, 16, 16],
            feature_dim: 64,
            hidden_dim: 128,
            classes: 4,
            kernel: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let n = self.block_channels.len();
        if n == 0 {
            return bad("block_channels: at least one block is required".into());
        }
        if self.block_strides.len() != n {
            return bad(format!("block_strides: expected {n} entries, got {}", self.block_strides.len()));
        }
        if self.cells.is_some() && self.cell_channels.len() != n {
            return bad(format!("cell_channels: expected {n} entries, got {}", self.cell_channels.len()));
        }
        let positive = [
            ("in_channels", self.in_channels),
            ("resolution", self.resolution),
            ("stem_channels", self.stem_channels),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("kernel", self.kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name}: must be positive"));
            }
        }
        if self.classes < 2 {
            return bad(format!("classes: need at least 2, got {}", self.classes));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel: must be odd, got {}", self.kernel));
        }
        let lists = [
            ("block_channels", &self.block_channels),
            ("block_strides", &self.block_strides),
            ("cell_channels", &self.cell_channels),
        ];
        for (name, list) in lists {
            if list.contains(&0) {
                return bad(format!("{name}: entries must be positive"));
            }
        }
        if self.cells.is_none() && self.feature_dim != self.block_channels[n - 1] {
            return bad(format!(
                "feature_dim: backbone feature is the last block output ({}), got {}",
                self.block_channels[n - 1],
                self.feature_dim
            ));
        }
        Ok(())
    }

    /// Spatial extent after each block.
    pub fn extents(&self) -> Vec<usize> {
        let mut h = self.resolution;
        self.block_strides
            .iter()
            .map(|&s| {
                h = h.div_ceil(s);
                h
            })
            .collect()
    }

    pub fn backbone(&self) -> Self {
        Self {
            cells: None,
            feature_dim: *self.block_channels.last().unwrap_or(&self.feature_dim),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two 3x3 convs with rectifiers; the first may stride.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBlock {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let a = self.conv1.forward(g, p, x)?;
        let a = g.relu(a)?;
        let b = self.conv2.forward(g, p, a)?;
        g.relu(b)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

/// Cell path of one block pair.
#[derive(Clone, Debug)]
pub struct CellPath {
    pub fuse: Conv2d,
    pub cell: Cell,
    /// Pool applied to the previous cell output when the block strides.
    pub pool: usize,
}

#[derive(Clone, Debug)]
pub struct Ptl {
    pub stem_fuse: Conv2d,
    pub stem_cell: Cell,
    pub pairs: Vec<CellPath>,
    pub fusion: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub feature: NodeId,
    /// Next state per cell (stem first); empty for the backbone.
    pub states: Vec<StateNodes>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    pub store: ParamStore<T>,
    pub blocks: Vec<ConvBlock>,
    pub ptl: Option<Ptl>,
    pub head: Head,
    states: Vec<CellState<T>>,
    mode: Mode,
}

impl<T: Float> Network<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel;
        let pad = (k - 1) / 2;

        let mut blocks = Vec::new();
        let mut in_c = config.in_channels;
        for (i, (&c, &s)) in config.block_channels.iter().zip(&config.block_strides).enumerate() {
            let conv1 = Conv2d::new(&mut store, &format!("block{i}.conv1"), in_c, c, k, s, pad, &mut rng)?;
            let conv2 = Conv2d::new(&mut store, &format!("block{i}.conv2"), c, c, k, 1, pad, &mut rng)?;
            blocks.push(ConvBlock { conv1, conv2 });
            in_c = c;
        }

        let ptl = match config.cells {
            None => None,
            Some(version) => {
                let stem_c = config.stem_channels;
                let stem_fuse = Conv2d::pointwise(&mut store, "stem.fuse", config.in_channels, stem_c, &mut rng)?;
                let stem_cell = Cell::new(version, &mut store, "stem.cell", stem_c, stem_c, k, &mut rng)?;
                let mut pairs = Vec::new();
                let mut y_c = stem_c;
                for (i, (&cc, (&xc, &s))) in config
                    .cell_channels
                    .iter()
                    .zip(config.block_channels.iter().zip(&config.block_strides))
                    .enumerate()
                {
                    let fuse = Conv2d::pointwise(&mut store, &format!("pair{i}.fuse"), xc + y_c, cc, &mut rng)?;
                    let cell = Cell::new(version, &mut store, &format!("pair{i}.cell"), cc, cc, k, &mut rng)?;
                    pairs.push(CellPath { fuse, cell, pool: s });
                    y_c = cc;
                }
                let fusion = Conv2d::pointwise(&mut store, "fusion", in_c + y_c, config.feature_dim, &mut rng)?;
                Some(Ptl {
                    stem_fuse,
                    stem_cell,
                    pairs,
                    fusion,
                })
            }
        };

        let fc1 = Linear::new(&mut store, "head.fc1", config.feature_dim, config.hidden_dim, &mut rng)?;
        let fc2 = Linear::new(&mut store, "head.fc2", config.hidden_dim, config.classes, &mut rng)?;

        let mut net = Self {
            config: config.clone(),
            store,
            blocks,
            ptl,
            head: Head { fc1, fc2 },
            states: Vec::new(),
            mode: Mode::Train,
        };
        net.states = net.zero_states()?;
        Ok(net)
    }

    /// Backbone-only network sharing the block and head parameters of `ptl`.
    pub fn backbone_of(ptl: &Network<T>, seed: u64) -> Result<Self> {
        let mut net = Self::new(&ptl.config.backbone(), seed)?;
        for (name, tensor) in ptl.store.iter() {
            if net.store.find(name).is_some() {
                net.store.assign(name, tensor.clone())?;
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn is_ptl(&self) -> bool {
        self.ptl.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Eval mode zeroes every state; train mode leaves states as they are.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Eval {
            self.reset_states();
        }
    }

    pub fn states(&self) -> &[CellState<T>] {
        &self.states
    }

    pub fn reset_states(&mut self) {
        self.states.iter_mut().for_each(CellState::reset);
    }

    pub fn states_are_zero(&self) -> bool {
        self.states.iter().all(CellState::is_zero)
    }

    /// Cells in order: stem first, then one per pair.
    pub fn cells(&self) -> Vec<&Cell> {
        match &self.ptl {
            None => Vec::new(),
            Some(p) => std::iter::once(&p.stem_cell).chain(p.pairs.iter().map(|c| &c.cell)).collect(),
        }
    }

    /// Parameter tensors grouped by layer class, for gradient checks.
    pub fn layer_classes(&self) -> Vec<ProbeGroup> {
        let classes = [
            ("conv block", "block"),
            ("stem cell", "stem.cell."),
            ("pair cell", "pair"),
            ("fuse", "fuse"),
            ("fusion", "fusion."),
            ("head", "head."),
        ];
        let mut groups: Vec<ProbeGroup> = classes
            .iter()
            .map(|(name, _)| ProbeGroup {
                name: name.to_string(),
                tensors: Vec::new(),
            })
            .collect();
        for (t, name) in self.store.names().iter().enumerate() {
            let class = if name.ends_with(".fuse.weight") || name.ends_with(".fuse.bias") {
                3
            } else {
                match classes.iter().position(|(_, prefix)| name.starts_with(prefix)) {
                    Some(c) => c,
                    None => continue,
                }
            };
            groups[class].tensors.push(t);
        }
        groups.retain(|g| !g.tensors.is_empty());
        groups
    }

    fn zero_states(&self) -> Result<Vec<CellState<T>>> {
        let r = self.config.resolution;
        let extents = self.config.extents();
        self.cells()
            .into_iter()
            .enumerate()
            .map(|(i, cell)| {
                let h = if i == 0 { r } else { extents[i - 1] };
                cell.zero_state(h, h)
            })
            .collect()
    }

    /// Places the stored states on `g` as constants. Eval mode always binds zeros.
    pub fn bind_states(&self, g: &mut Graph<T>) -> Vec<StateNodes> {
        self.states
            .iter()
            .map(|s| match self.mode {
                Mode::Train => s.bind(g),
                Mode::Eval => crate::cells::reset_state(s).bind(g),
            })
            .collect()
    }

    /// Replaces the stored states with the values of `nodes` (detached copies).
    pub fn write_states(&mut self, g: &Graph<T>, nodes: &[StateNodes]) -> Result<()> {
        if nodes.len() != self.states.len() {
            return Err(Error::State(format!(
                "expected {} cell states, got {}",
                self.states.len(),
                nodes.len()
            )));
        }
        for (slot, n) in self.states.iter_mut().zip(nodes) {
            let next = CellState::from_nodes(g, n);
            if next.c.shape() != slot.c.shape() {
                return Err(Error::State(format!(
                    "state shape changed from {:?} to {:?}",
                    slot.c.shape(),
                    next.c.shape()
                )));
            }
            *slot = next;
        }
        Ok(())
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [n, ch, h, w] if *n > 0 && *ch == c.in_channels && *h == c.resolution && *w == c.resolution => Ok(()),
            _ => Err(Error::InvalidShape {
                op: "network_forward",
                msg: format!(
                    "expected images [N, {}, {}, {}], got {shape:?}",
                    c.in_channels, c.resolution, c.resolution
                ),
            }),
        }
    }

    /// Builds the forward pass on `g` from images and per-cell input states.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: NodeId,
        states: &[StateNodes],
    ) -> Result<ForwardNodes> {
        self.check_images(g.shape(images))?;
        let (feature, next) = match &self.ptl {
            None => {
                let mut x = images;
                for block in &self.blocks {
                    x = block.forward(g, p, x)?;
                }
                (g.global_avg_pool(x)?, Vec::new())
            }
            Some(ptl) => {
                if states.len() != self.states.len() {
                    return Err(Error::State(format!(
                        "expected {} cell states, got {}",
                        self.states.len(),
                        states.len()
                    )));
                }
                let mut next = Vec::with_capacity(states.len());
                let stem_in = ptl.stem_fuse.forward(g, p, images)?;
                let out = ptl.stem_cell.forward(g, p, stem_in, states[0])?;
                next.push(out.state);
                let (mut x, mut y) = (images, out.y);
                for (i, (block, path)) in self.blocks.iter().zip(&ptl.pairs).enumerate() {
                    let (nx, ny, state) = pair_forward(g, p, block, path, x, y, states[i + 1])?;
                    next.push(state);
                    x = nx;
                    y = ny;
                }
                let joined = g.concat_channels(x, y)?;
                let fused = ptl.fusion.forward(g, p, joined)?;
                (g.global_avg_pool(fused)?, next)
            }
        };
        let hidden = self.head.fc1.forward(g, p, feature)?;
        let hidden = g.relu(hidden)?;
        let logits = self.head.fc2.forward(g, p, hidden)?;
        Ok(ForwardNodes {
            logits,
            feature,
            states: next,
        })
    }

    /// Forward pass outside training. Train mode advances the stored states;
    /// eval mode uses zero states and stores nothing. Returns `(logits, feature)`.
    pub fn forward(&mut self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(images.clone());
        let states = self.bind_states(&mut g);
        let out = self.forward_graph(&mut g, &p, x, &states)?;
        if self.mode == Mode::Train {
            self.write_states(&g, &out.states)?;
        }
        Ok((g.value(out.logits).clone(), g.value(out.feature).clone()))
    }

    /// Eval-mode forward; never touches the stored states.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(images.clone());
        let states: Vec<StateNodes> = self
            .states
            .iter()
            .map(|s| crate::cells::reset_state(s).bind(&mut g))
            .collect();
        let out = self.forward_graph(&mut g, &p, x, &states)?;
        Ok((g.value(out.logits).clone(), g.value(out.feature).clone()))
    }
}

/// One block pair: `x = block(x_prev)`, `y = cell(fuse([x, pool(y_prev)]))`.
pub fn pair_forward<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    block: &ConvBlock,
    path: &CellPath,
    x_prev: NodeId,
    y_prev: NodeId,
    state: StateNodes,
) -> Result<(NodeId, NodeId, StateNodes)> {
    let x = block.forward(g, p, x_prev)?;
    let y_prev = if path.pool > 1 { g.avg_pool2d(y_prev, path.pool)? } else { y_prev };
    let joined = g.concat_channels(x, y_prev)?;
    let fused = path.fuse.forward(g, p, joined)?;
    let out = path.cell.forward(g, p, fused, state)?;
    Ok((x, out.y, out.state))
}

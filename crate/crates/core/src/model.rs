//! The forecasting network: blocks of TCN, spatial and temporal ODE branches
//! and TCN, max-pooled across blocks and read out by a two-layer MLP.
//!
//! All forward passes are batched: inputs are `(batch, N, T, F)` and the
//! forecast is `(batch, N, S, F)`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::hypergraph::{adaptive_incidence, normalized_transform, normalized_transform_var, Hypergraph};
use crate::ode::{integrate, LnMode, Solver, SpatialOdeDynamics, TemporalOdeDynamics};
use crate::optim::{BoundParams, Constraint, ParamId, ParamStore, SquashMode};
use crate::tensor::Tensor;

/// Components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Drop the spatial hypergraph branch.
    Spatial,
    /// Drop the temporal hypergraph branch.
    Temporal,
    /// Replace integration by one discrete hypergraph convolution.
    Ode,
    /// Use the binary incidence instead of the learned one.
    Adaptive,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Spatial, Ablation::Temporal, Ablation::Ode, Ablation::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Spatial => "spatial",
            Ablation::Temporal => "temporal",
            Ablation::Ode => "ode",
            Ablation::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?}")))
    }
}

/// How blocks consume their input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wiring {
    /// Every block reads the network input.
    #[default]
    Parallel,
    /// Block `b` reads the output of block `b - 1`.
    Serial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub in_features: usize,
    pub window: usize,
    pub horizon: usize,
    /// Output channels of each TCN layer; the last one is the branch width.
    pub tcn_widths: Vec<usize>,
    pub kernel_size: usize,
    pub mixhop_depth: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub ode_steps: usize,
    pub t_end: f64,
    pub solver: Solver,
    pub ln_mode: LnMode,
    pub squash: SquashMode,
    pub wiring: Wiring,
    pub ablations: BTreeSet<Ablation>,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_nodes: 0,
            in_features: 1,
            window: 12,
            horizon: 12,
            tcn_widths: vec![64, 32, 64],
            kernel_size: 2,
            mixhop_depth: 3,
            blocks: 3,
            mlp_hidden: 256,
            ode_steps: 8,
            t_end: 1.0,
            solver: Solver::Euler,
            ln_mode: LnMode::Taylor,
            squash: SquashMode::default(),
            wiring: Wiring::Parallel,
            ablations: BTreeSet::new(),
            init_scale: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn width(&self) -> usize {
        *self.tcn_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_nodes == 0 || self.in_features == 0 || self.window == 0 || self.horizon == 0 {
            return bad("nodes, features, window and horizon must be positive");
        }
        if self.tcn_widths.is_empty() || self.tcn_widths.contains(&0) {
            return bad("TCN widths must be nonempty and positive");
        }
        if self.kernel_size == 0 || self.mixhop_depth == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return bad("kernel size, MixHop depth, block count and MLP width must be positive");
        }
        if self.ode_steps == 0 || !(self.t_end > 0.0) {
            return bad("ODE steps and end time must be positive");
        }
        Ok(())
    }
}

/// The fixed graph inputs of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graphs {
    pub spatial: Hypergraph,
    pub temporal: Hypergraph,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

#[derive(Clone, Debug)]
struct BlockParams {
    tcn_in: Vec<Layer>,
    node_embed: ParamId,
    edge_embed: ParamId,
    spatial_time: Vec<ParamId>,
    spatial_feature: Vec<ParamId>,
    temporal_time: ParamId,
    temporal_feature: ParamId,
    fusion: Layer,
    tcn_out: Vec<Layer>,
}

#[derive(Clone, Debug)]
struct HeadParams {
    hidden: Layer,
    out: Layer,
}

/// Graph tensors that do not depend on parameters.
#[derive(Clone, Debug)]
struct GraphTensors {
    spatial_incidence: Tensor,
    spatial_binary: Tensor,
    temporal: Tensor,
}

#[derive(Clone, Debug)]
pub struct SthodeNetwork {
    config: ModelConfig,
    graphs: Graphs,
    cached: GraphTensors,
    params: ParamStore,
    blocks: Vec<BlockParams>,
    head: HeadParams,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-scale..=scale);
    }
    t
}

impl SthodeNetwork {
    pub fn new(config: ModelConfig, graphs: Graphs, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.n_nodes;
        if graphs.spatial.n_nodes() != n || graphs.temporal.n_nodes() != n {
            return Err(Error::Dimension(format!(
                "graphs have {} and {} nodes, config has {n}",
                graphs.spatial.n_nodes(),
                graphs.temporal.n_nodes()
            )));
        }
        let cached = GraphTensors {
            spatial_incidence: graphs.spatial.incidence(),
            spatial_binary: normalized_transform(&graphs.spatial, &graphs.spatial.incidence())?,
            temporal: normalized_transform(&graphs.temporal, &graphs.temporal.incidence())?,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let s = config.init_scale;
        let k = config.kernel_size;
        let c = config.width();
        let (t, m) = (config.window, graphs.spatial.n_hyperedges());

        let conv_stack = |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, mut c_in: usize| {
            let mut layers = Vec::new();
            for (i, &c_out) in config.tcn_widths.iter().enumerate() {
                let weight = params.add(format!("{prefix}.{i}.weight"), uniform(rng, &[k, c_in, c_out], s), Constraint::None);
                let bias = params.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[c_out]), Constraint::None);
                layers.push(Layer {
                    weight,
                    bias,
                    dilation: 1 << i,
                });
                c_in = c_out;
            }
            layers
        };
        let near_identity = |side: usize| {
            let diag = config.squash.inverse(0.9);
            let off = config.squash.inverse(0.01);
            let mut raw = Tensor::full(&[side, side], off);
            for i in 0..side {
                raw.set(&[i, i], diag);
            }
            raw
        };

        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let c_in = match (config.wiring, b) {
                (Wiring::Serial, b) if b > 0 => c,
                _ => config.in_features,
            };
            let p = format!("block{b}");
            let tcn_in = conv_stack(&mut params, &mut rng, &format!("{p}.tcn_in"), c_in);
            let node_embed = params.add(format!("{p}.node_embed"), uniform(&mut rng, &[n], s), Constraint::None);
            let edge_embed = params.add(format!("{p}.edge_embed"), uniform(&mut rng, &[m], s), Constraint::None);
            let mut spatial_time = Vec::new();
            let mut spatial_feature = Vec::new();
            for j in 0..config.mixhop_depth {
                spatial_time.push(params.add(format!("{p}.spatial.time{j}"), near_identity(t), Constraint::OpenUnitInterval));
                spatial_feature.push(params.add(format!("{p}.spatial.feature{j}"), near_identity(c), Constraint::OpenUnitInterval));
            }
            let temporal_time = params.add(format!("{p}.temporal.time"), near_identity(t), Constraint::OpenUnitInterval);
            let temporal_feature = params.add(format!("{p}.temporal.feature"), near_identity(c), Constraint::OpenUnitInterval);
            let n_branches = [Ablation::Spatial, Ablation::Temporal]
                .iter()
                .filter(|a| !config.ablated(**a))
                .count()
                .max(1);
            let fusion = Layer {
                weight: params.add(format!("{p}.fusion.weight"), uniform(&mut rng, &[n_branches * c, c], s), Constraint::None),
                bias: params.add(format!("{p}.fusion.bias"), Tensor::zeros(&[c]), Constraint::None),
                dilation: 1,
            };
            let tcn_out = conv_stack(&mut params, &mut rng, &format!("{p}.tcn_out"), c);
            blocks.push(BlockParams {
                tcn_in,
                node_embed,
                edge_embed,
                spatial_time,
                spatial_feature,
                temporal_time,
                temporal_feature,
                fusion,
                tcn_out,
            });
        }
        let flat = t * c;
        let out_width = config.horizon * config.in_features;
        let head = HeadParams {
            hidden: Layer {
                weight: params.add("head.hidden.weight", uniform(&mut rng, &[flat, config.mlp_hidden], s), Constraint::None),
                bias: params.add("head.hidden.bias", Tensor::zeros(&[config.mlp_hidden]), Constraint::None),
                dilation: 1,
            },
            out: Layer {
                weight: params.add("head.out.weight", uniform(&mut rng, &[config.mlp_hidden, out_width], s), Constraint::None),
                bias: params.add("head.out.bias", Tensor::zeros(&[out_width]), Constraint::None),
                dilation: 1,
            },
        };
        Ok(Self {
            config,
            graphs,
            cached,
            params,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graphs(&self) -> &Graphs {
        &self.graphs
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter tensor; names and shapes must match.
    pub fn load_params(&mut self, loaded: ParamStore) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(loaded.iter()) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match checkpoint entry {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Replaces the graphs, e.g. to test that an ablated branch ignores them.
    pub fn set_graphs(&mut self, graphs: Graphs) -> Result<()> {
        if graphs.spatial.n_hyperedges() != self.graphs.spatial.n_hyperedges()
            || graphs.spatial.n_nodes() != self.config.n_nodes
            || graphs.temporal.n_nodes() != self.config.n_nodes
        {
            return Err(Error::Dimension("replacement graphs change the parameter layout".into()));
        }
        self.cached = GraphTensors {
            spatial_incidence: graphs.spatial.incidence(),
            spatial_binary: normalized_transform(&graphs.spatial, &graphs.spatial.incidence())?,
            temporal: normalized_transform(&graphs.temporal, &graphs.temporal.incidence())?,
        };
        self.graphs = graphs;
        Ok(())
    }

    fn constrained<'t>(&self, p: &BoundParams<'t>, id: ParamId) -> Var<'t> {
        let v = p.var(id);
        match self.params.get(id).constraint {
            Constraint::None => v,
            Constraint::OpenUnitInterval => self.config.squash.apply(v),
        }
    }

    fn tcn<'t>(&self, p: &BoundParams<'t>, layers: &[Layer], mut x: Var<'t>) -> Result<Var<'t>> {
        for l in layers {
            x = x
                .dilated_causal_conv(p.var(l.weight), l.dilation)?
                .add_bias(p.var(l.bias))?
                .relu();
        }
        Ok(x)
    }

    /// The normalized spatial transform for block `b`.
    pub fn spatial_transform<'t>(&self, p: &BoundParams<'t>, b: usize) -> Result<Var<'t>> {
        let tape = p.vars()[0].tape();
        if self.config.ablated(Ablation::Adaptive) {
            return Ok(tape.constant(self.cached.spatial_binary.clone()));
        }
        let blk = &self.blocks[b];
        let h = adaptive_incidence(
            tape.constant(self.cached.spatial_incidence.clone()),
            p.var(blk.node_embed),
            p.var(blk.edge_embed),
        )?;
        normalized_transform_var(&self.graphs.spatial, h)
    }

    fn run_branch<'t>(&self, step: impl Fn() -> Result<Var<'t>>, rhs: impl Fn(Var<'t>, f64) -> Result<Var<'t>>, x: Var<'t>) -> Result<Var<'t>> {
        if self.config.ablated(Ablation::Ode) {
            step()
        } else {
            integrate(rhs, x, self.config.t_end, self.config.ode_steps, self.config.solver)
        }
    }

    /// One block on `(batch, N, T, C_in)`, giving `(batch, N, T, width)`.
    pub fn block_forward<'t>(&self, p: &BoundParams<'t>, b: usize, x: Var<'t>) -> Result<Var<'t>> {
        let blk = &self.blocks[b];
        let h = self.tcn(p, &blk.tcn_in, x)?;
        let ln = self.config.ln_mode;
        let mut branches = Vec::with_capacity(2);
        if !self.config.ablated(Ablation::Spatial) {
            let a = self.spatial_transform(p, b)?;
            let u = blk.spatial_time.iter().map(|&id| self.constrained(p, id)).collect();
            let q = blk.spatial_feature.iter().map(|&id| self.constrained(p, id)).collect();
            let dynamics = SpatialOdeDynamics::new(a, u, q, h, ln)?;
            branches.push(self.run_branch(|| dynamics.discrete_step(), |s, t| dynamics.rhs(s, t), h)?);
        }
        if !self.config.ablated(Ablation::Temporal) {
            let a = h.tape().constant(self.cached.temporal.clone());
            let u = self.constrained(p, blk.temporal_time);
            let q = self.constrained(p, blk.temporal_feature);
            let dynamics = TemporalOdeDynamics::new(a, u, q, h, ln)?;
            branches.push(self.run_branch(|| dynamics.discrete_step(), |s, t| dynamics.rhs(s, t), h)?);
        }
        if branches.is_empty() {
            branches.push(h);
        }
        let fused = Var::concat_last(&branches)?
            .linear(p.var(blk.fusion.weight))?
            .add_bias(p.var(blk.fusion.bias))?
            .relu();
        self.tcn(p, &blk.tcn_out, fused)
    }

    /// Forecast `(batch, N, S, F)` for input `(batch, N, T, F)`.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1..] != [cfg.n_nodes, cfg.window, cfg.in_features] {
            return Err(Error::Dimension(format!(
                "input {:?} does not match (batch, {}, {}, {})",
                shape, cfg.n_nodes, cfg.window, cfg.in_features
            )));
        }
        let batch = shape[0];
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut input = x;
        for b in 0..self.blocks.len() {
            let o = self.block_forward(p, b, input)?;
            if cfg.wiring == Wiring::Serial {
                input = o;
            }
            outs.push(o);
        }
        let pooled = Var::max_of(&outs)?;
        let flat = pooled.reshape(&[batch, cfg.n_nodes, cfg.window * cfg.width()])?;
        let hidden = flat
            .linear(p.var(self.head.hidden.weight))?
            .add_bias(p.var(self.head.hidden.bias))?
            .relu();
        let out = hidden
            .linear(p.var(self.head.out.weight))?
            .add_bias(p.var(self.head.out.bias))?;
        out.reshape(&[batch, cfg.n_nodes, cfg.horizon, cfg.in_features])
    }

    /// Forecast without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let y = self.forward(&p, tape.constant(x.clone()))?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graphs(n: usize) -> Graphs {
        let spatial = Hypergraph::new(
            n,
            (0..n).map(|v| vec![v, (v + 1) % n]).collect(),
            vec![2.0; n],
        )
        .unwrap();
        let temporal = Hypergraph::new(n, (0..n).map(|v| vec![v, (v + 2) % n]).collect(), vec![1.0; n]).unwrap();
        Graphs { spatial, temporal }
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_nodes: 4,
            window: 6,
            horizon: 3,
            tcn_widths: vec![4, 3],
            mixhop_depth: 2,
            blocks: 2,
            mlp_hidden: 5,
            ode_steps: 3,
            ..ModelConfig::default()
        }
    }

    fn toy_input(cfg: &ModelConfig, batch: usize) -> Tensor {
        let len = batch * cfg.n_nodes * cfg.window * cfg.in_features;
        let data = (0..len).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        Tensor::new(vec![batch, cfg.n_nodes, cfg.window, cfg.in_features], data).unwrap()
    }

    #[test]
    fn forecast_shape() {
        let cfg = toy_config();
        let net = SthodeNetwork::new(cfg.clone(), toy_graphs(4), 1).unwrap();
        let y = net.predict(&toy_input(&cfg, 3)).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3, 1]);
        assert!(y.is_finite());
    }

    #[test]
    fn default_sizes_give_one_hour_forecast() {
        let cfg = ModelConfig {
            n_nodes: 4,
            tcn_widths: vec![4, 2, 4],
            blocks: 1,
            mlp_hidden: 8,
            ..ModelConfig::default()
        };
        let net = SthodeNetwork::new(cfg.clone(), toy_graphs(4), 0).unwrap();
        let y = net.predict(&toy_input(&cfg, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 12, 1]);
    }

    #[test]
    fn zero_head_gives_zero_forecast() {
        let cfg = toy_config();
        let mut net = SthodeNetwork::new(cfg.clone(), toy_graphs(4), 1).unwrap();
        for name in ["head.out.weight", "head.out.bias"] {
            let id = net.params().find(name).unwrap();
            let p = net.params_mut().get_mut(id);
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        let y = net.predict(&Tensor::zeros(&[1, 4, 6, 1])).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = SthodeNetwork::new(toy_config(), toy_graphs(4), 9).unwrap();
        let b = SthodeNetwork::new(toy_config(), toy_graphs(4), 9).unwrap();
        let c = SthodeNetwork::new(toy_config(), toy_graphs(4), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn constrained_params_start_near_identity() {
        let net = SthodeNetwork::new(toy_config(), toy_graphs(4), 1).unwrap();
        let tape = Tape::new();
        let p = net.params().bind(&tape);
        let id = net.params().find("block0.spatial.time0").unwrap();
        let u = net.constrained(&p, id).value();
        assert!((u.at(0, 0) - 0.9).abs() < 1e-12);
        assert!((u.at(0, 1) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn block_with_identity_pieces() {
        // Single channel, identity kernels, identity transforms: the ODE
        // branch integrates dX/dt = X0 and the fusion averages two copies.
        let cfg = ModelConfig {
            n_nodes: 2,
            window: 3,
            horizon: 1,
            tcn_widths: vec![1],
            kernel_size: 1,
            mixhop_depth: 1,
            blocks: 1,
            mlp_hidden: 1,
            ode_steps: 4,
            squash: SquashMode::HardClamp { eps: 0.0 },
            ablations: [Ablation::Adaptive].into(),
            ..ModelConfig::default()
        };
        let graphs = Graphs {
            spatial: Hypergraph::new(2, vec![vec![0], vec![1]], vec![1.0, 1.0]).unwrap(),
            temporal: Hypergraph::new(2, vec![vec![0], vec![1]], vec![1.0, 1.0]).unwrap(),
        };
        let mut net = SthodeNetwork::new(cfg, graphs, 0).unwrap();
        let set = |net: &mut SthodeNetwork, name: &str, t: Tensor| {
            let id = net.params().find(name).unwrap();
            net.params_mut().get_mut(id).tensor = t;
        };
        set(&mut net, "block0.tcn_in.0.weight", Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        set(&mut net, "block0.tcn_out.0.weight", Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        set(&mut net, "block0.fusion.weight", Tensor::matrix(&[vec![0.5], vec![0.5]]).unwrap());
        for name in ["block0.spatial.time0", "block0.temporal.time"] {
            set(&mut net, name, Tensor::eye(3));
        }
        for name in ["block0.spatial.feature0", "block0.temporal.feature"] {
            set(&mut net, name, Tensor::eye(1));
        }
        let x = Tensor::new(vec![1, 2, 3, 1], vec![1.0, 2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let tape = Tape::new();
        let p = net.params().bind(&tape);
        let out = net.block_forward(&p, 0, tape.constant(x.clone())).unwrap().value();
        // X(1) = X0 + t_end * X0 for the pure restart dynamics.
        let expected = x.scale(2.0);
        assert!(out.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn disabled_temporal_branch_ignores_its_graph() {
        let mut cfg = toy_config();
        cfg.ablations.insert(Ablation::Temporal);
        let mut net = SthodeNetwork::new(cfg.clone(), toy_graphs(4), 3).unwrap();
        let x = toy_input(&cfg, 2);
        let before = net.predict(&x).unwrap();
        let mut g = toy_graphs(4);
        g.temporal = Hypergraph::new(4, vec![vec![0, 1, 2, 3]; 4], vec![1.0; 4]).unwrap();
        net.set_graphs(g).unwrap();
        assert_eq!(net.predict(&x).unwrap(), before);

        let full = SthodeNetwork::new(toy_config(), toy_graphs(4), 3).unwrap();
        let mut changed = full.clone();
        let mut g = toy_graphs(4);
        g.temporal = Hypergraph::new(4, vec![vec![0, 1, 2, 3]; 4], vec![1.0; 4]).unwrap();
        changed.set_graphs(g).unwrap();
        assert_ne!(full.predict(&x).unwrap(), changed.predict(&x).unwrap());
    }

    #[test]
    fn fusion_width_shrinks_with_ablation() {
        let mut cfg = toy_config();
        cfg.ablations.insert(Ablation::Spatial);
        let net = SthodeNetwork::new(cfg, toy_graphs(4), 0).unwrap();
        let id = net.params().find("block0.fusion.weight").unwrap();
        assert_eq!(net.params().get(id).tensor.shape(), &[3, 3]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = SthodeNetwork::new(toy_config(), toy_graphs(4), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 4, 5, 1])).is_err());
        assert!(net.predict(&Tensor::zeros(&[4, 6, 1])).is_err());
    }
}

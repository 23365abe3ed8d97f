//! Run configuration: JSON file with flat keys, overridden by flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use sthode::experiment::GraphConfig;
use sthode::model::{Ablation, ModelConfig, Wiring};
use sthode::ode::Solver;
use sthode::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub signals: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: usize,
    #[serde(rename = "R")]
    pub radius: usize,
    pub blocks: usize,
    pub solver: Solver,
    pub ode_steps: usize,
    pub t_end: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub delta: f64,
    pub ablation: BTreeSet<Ablation>,
    pub window: usize,
    pub horizon: usize,
    pub tcn_widths: Vec<usize>,
    pub mlp_hidden: usize,
    pub wiring: Wiring,
    pub sigma: Option<f64>,
    pub epsilon: f64,
    pub dtw_band: Option<usize>,
    pub patience: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let graph = GraphConfig::default();
        Self {
            signals: None,
            distances: None,
            out_dir: PathBuf::from("out"),
            seed: train.seed,
            k: model.mixhop_depth,
            r: graph.r,
            radius: graph.radius,
            blocks: model.blocks,
            solver: model.solver,
            ode_steps: model.ode_steps,
            t_end: model.t_end,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            delta: train.delta,
            ablation: BTreeSet::new(),
            window: model.window,
            horizon: model.horizon,
            tcn_widths: model.tcn_widths,
            mlp_hidden: model.mlp_hidden,
            wiring: model.wiring,
            sigma: graph.sigma,
            epsilon: graph.epsilon,
            dtw_band: graph.dtw_band,
            patience: train.patience,
        }
    }
}

/// Flags shared by every subcommand. Unset flags keep the file or default value.
#[derive(Args, Clone, Debug, Default)]
pub struct RunFlags {
    /// Signals CSV (rows = 5-minute steps, columns = sensors).
    #[arg(long)]
    pub signals: Option<PathBuf>,
    /// Distances CSV with `from,to,distance` rows.
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// JSON config with keys named like the flags (`ode_steps`, `K`, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// MixHop depth.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Temporal hyperedge size.
    #[arg(long = "r")]
    pub r: Option<usize>,
    /// Spatial hop radius.
    #[arg(long = "R")]
    pub radius: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// `euler` or `rk4`.
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub ode_steps: Option<usize>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Huber threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Component to remove: spatial, temporal, ode or adaptive. Repeatable.
    #[arg(long)]
    pub ablation: Vec<Ablation>,
    /// Input steps T.
    #[arg(long)]
    pub window: Option<usize>,
    /// Forecast steps S.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Comma-separated TCN channel widths.
    #[arg(long, value_delimiter = ',')]
    pub tcn_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Gaussian kernel width for the road graph (default: std of distances).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Kernel threshold for the road graph.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Sakoe-Chiba band for DTW.
    #[arg(long)]
    pub dtw_band: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
}

impl std::str::FromStr for RunConfig {
    type Err = serde_json::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_str(s)
    }
}

impl RunConfig {
    pub fn resolve(flags: &RunFlags) -> Result<Self, String> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                text.parse::<RunConfig>().map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = flags.$field.clone() { cfg.$field = v.into(); })*
            };
        }
        over!(seed, k, r, radius, blocks, solver, ode_steps, t_end, lr, batch_size, epochs, delta, window, horizon, tcn_widths, mlp_hidden, epsilon, out_dir);
        if flags.signals.is_some() {
            cfg.signals = flags.signals.clone();
        }
        if flags.distances.is_some() {
            cfg.distances = flags.distances.clone();
        }
        if flags.sigma.is_some() {
            cfg.sigma = flags.sigma;
        }
        if flags.dtw_band.is_some() {
            cfg.dtw_band = flags.dtw_band;
        }
        if flags.patience.is_some() {
            cfg.patience = flags.patience;
        }
        if !flags.ablation.is_empty() {
            cfg.ablation = flags.ablation.iter().copied().collect();
        }
        Ok(cfg)
    }

    pub fn model(&self, n_nodes: usize, in_features: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            in_features,
            window: self.window,
            horizon: self.horizon,
            tcn_widths: self.tcn_widths.clone(),
            mixhop_depth: self.k,
            blocks: self.blocks,
            mlp_hidden: self.mlp_hidden,
            ode_steps: self.ode_steps,
            t_end: self.t_end,
            solver: self.solver,
            wiring: self.wiring,
            ablations: self.ablation.clone(),
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            delta: self.delta,
            seed: self.seed,
            patience: self.patience,
            ..TrainConfig::default()
        }
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            r: self.r,
            radius: self.radius,
            sigma: self.sigma,
            epsilon: self.epsilon,
            dtw_band: self.dtw_band,
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn echo_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }
}

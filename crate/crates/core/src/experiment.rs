//! Graph construction from a dataset and the train/evaluate/ablate drivers.

use serde::{Deserialize, Serialize};

use crate::data::{Part, SensorDistances, TrafficDataset};
use crate::error::Result;
use crate::hypergraph::{build_geo_adjacency, build_spatial_hyperedges, build_temporal_hypergraph};
use crate::metrics::MetricReport;
use crate::model::{Ablation, Graphs, ModelConfig, SthodeNetwork};
use crate::train::{fit, evaluate, last_value_baseline, EpochRecord, TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Temporal hyperedge size.
    pub r: usize,
    /// Spatial hop radius.
    pub radius: usize,
    /// Gaussian kernel width; `None` uses the standard deviation of the distances.
    pub sigma: Option<f64>,
    pub epsilon: f64,
    pub dtw_band: Option<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            r: 7,
            radius: 2,
            sigma: None,
            epsilon: 0.1,
            dtw_band: None,
        }
    }
}

/// Spatial hypergraph from road distances, temporal one from DTW over the
/// training split of feature 0.
pub fn build_graphs(ds: &TrafficDataset, distances: &SensorDistances, cfg: &GraphConfig) -> Result<Graphs> {
    let n = ds.nodes();
    let sigma = cfg.sigma.unwrap_or_else(|| distances.std_dev());
    let geo = build_geo_adjacency(&distances.edges, n, sigma, cfg.epsilon)?;
    let spatial = build_spatial_hyperedges(&geo, cfg.radius)?;
    let temporal = build_temporal_hypergraph(&ds.training_series(0), cfg.r, cfg.dtw_band)?;
    Ok(Graphs { spatial, temporal })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub log: TrainingLog,
    pub val: MetricReport,
    pub test: MetricReport,
}

/// Trains one network and scores its best-validation parameters.
pub fn run(
    label: &str,
    ds: &TrafficDataset,
    graphs: &Graphs,
    model: &ModelConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SthodeNetwork, RunResult)> {
    let mut net = SthodeNetwork::new(model.clone(), graphs.clone(), train.seed)?;
    let log = fit(&mut net, ds, train, on_epoch)?;
    let val = evaluate(&net, ds, Part::Val, train.delta)?.report;
    let test = evaluate(&net, ds, Part::Test, train.delta)?.report;
    let result = RunResult {
        label: label.to_string(),
        log,
        val,
        test,
    };
    Ok((net, result))
}

/// The full model and the four single-component ablations under one seed.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = vec![("full".to_string(), ModelConfig { ablations: Default::default(), ..base.clone() })];
    for a in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.ablations = [a].into();
        out.push((format!("w/o {}", a.name()), cfg));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub baseline_test: MetricReport,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,val_mae,test_mae,test_rmse,test_mape\n");
        for r in &self.runs {
            let mape = r.test.overall.mape.map_or_else(String::new, |m| m.to_string());
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.label, r.val.overall.mae, r.test.overall.mae, r.test.overall.rmse, mape
            ));
        }
        s
    }
}

pub fn ablate(
    ds: &TrafficDataset,
    graphs: &Graphs,
    model: &ModelConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for (label, cfg) in ablation_variants(model) {
        let (_, r) = run(&label, ds, graphs, &cfg, train, |e| on_epoch(&label, e))?;
        runs.push(r);
    }
    Ok(AblationReport {
        runs,
        baseline_test: last_value_baseline(ds, Part::Test)?.report,
    })
}

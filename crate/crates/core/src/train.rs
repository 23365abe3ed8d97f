//! Training loop, evaluation, checkpoints and the naive baseline.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Batch, Part, TrafficDataset, ZScore};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Graphs, ModelConfig, SthodeNetwork};
use crate::optim::{AdamState, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub delta: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation MAE.
    pub patience: Option<usize>,
    /// Cap on training windows per epoch, taken after shuffling.
    pub max_batches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 200,
            delta: 1.0,
            seed: 0,
            patience: None,
            max_batches: None,
        }
    }
}

/// Huber loss of one batch and its parameter gradients.
pub fn batch_loss(net: &SthodeNetwork, batch: &Batch, delta: f64) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = net.params().bind(&tape);
    let pred = net.forward(&p, tape.constant(batch.inputs.clone()))?;
    let target = tape.constant(batch.targets.clone());
    let mask = (!batch.observed.iter().all(|&o| o)).then(|| Rc::new(batch.observed.clone()));
    let loss = pred.huber(target, delta, mask)?;
    let value = loss.value().item();
    let grads = loss.backward()?;
    Ok((value, p.vars().iter().map(|v| grads.get_or_zeros(*v)).collect()))
}

fn epoch_order(ds: &TrafficDataset, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut starts = ds.windows(Part::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    starts.shuffle(&mut rng);
    if let Some(cap) = cfg.max_batches {
        starts.truncate(cap * cfg.batch_size);
    }
    starts
}

/// One pass over the shuffled training windows; returns the mean batch loss.
pub fn train_epoch(net: &mut SthodeNetwork, ds: &TrafficDataset, opt: &mut AdamState, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let order = epoch_order(ds, cfg, epoch);
    let mut total = 0.0;
    let mut count = 0;
    for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (loss, grads) = batch_loss(net, &ds.batch(chunk), cfg.delta)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {i}")));
        }
        opt.step(net.params_mut(), &grads)
            .map_err(|e| Error::Training(format!("epoch {epoch}, batch {i}: {e}")))?;
        total += loss;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Predictions and targets for one split on the original scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Mean Huber loss on the normalized scale.
    pub loss: f64,
    pub starts: Vec<usize>,
    /// `(windows, N, S, F)`.
    pub predictions: Tensor,
    pub targets: Tensor,
}

const EVAL_CHUNK: usize = 64;

fn collect(
    ds: &TrafficDataset,
    part: Part,
    delta: f64,
    mut predict: impl FnMut(&Batch) -> Result<Tensor>,
) -> Result<Evaluation> {
    let starts = ds.windows(part);
    let (n, s, f) = (ds.nodes(), ds.horizon, ds.features());
    let mut preds = Vec::with_capacity(starts.len() * n * s * f);
    let mut targets = Vec::with_capacity(preds.capacity());
    let mut observed = Vec::with_capacity(preds.capacity());
    let mut loss_sum = 0.0;
    for chunk in starts.chunks(EVAL_CHUNK) {
        let batch = ds.batch(chunk);
        let normalized = predict(&batch)?;
        for (i, (p, y)) in normalized.data().iter().zip(batch.targets.data()).enumerate() {
            if batch.observed[i] {
                loss_sum += crate::autograd::huber_value(p - y, delta);
            }
        }
        preds.extend_from_slice(ds.stats.inverse(&normalized).data());
        targets.extend_from_slice(batch.targets_raw.data());
        observed.extend_from_slice(&batch.observed);
    }
    let kept = observed.iter().filter(|o| **o).count();
    let report = MetricReport::compute(&targets, &preds, Some(&observed), s, f)?;
    let shape = vec![starts.len(), n, s, f];
    Ok(Evaluation {
        report,
        loss: loss_sum / kept.max(1) as f64,
        starts,
        predictions: Tensor::new(shape.clone(), preds)?,
        targets: Tensor::new(shape, targets)?,
    })
}

/// Scores the network on one split without touching its parameters.
pub fn evaluate(net: &SthodeNetwork, ds: &TrafficDataset, part: Part, delta: f64) -> Result<Evaluation> {
    collect(ds, part, delta, |b| net.predict(&b.inputs))
}

/// Repeats the last observed input step across the horizon.
pub fn last_value_baseline(ds: &TrafficDataset, part: Part) -> Result<Evaluation> {
    let (t, s) = (ds.window, ds.horizon);
    collect(ds, part, 1.0, |b| {
        let shape = b.inputs.shape();
        let (bn, n, f) = (shape[0], shape[1], shape[3]);
        let mut out = Tensor::zeros(&[bn, n, s, f]);
        for i in 0..bn * n {
            for h in 0..s {
                for k in 0..f {
                    out.data_mut()[(i * s + h) * f + k] = b.inputs.data()[(i * t + t - 1) * f + k];
                }
            }
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_mae\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_mae));
        }
        s
    }
}

/// Trains for `cfg.epochs` epochs and leaves the best-validation parameters
/// in `net`.
pub fn fit(net: &mut SthodeNetwork, ds: &TrafficDataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainingLog> {
    let mut opt = AdamState::new(net.params(), cfg.lr);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let train_loss = train_epoch(net, ds, &mut opt, cfg, epoch)?;
        let val = evaluate(net, ds, Part::Val, cfg.delta)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_mae: val.report.overall.mae,
        };
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|(m, _, _)| val.report.overall.mae < *m) {
            best = Some((val.report.overall.mae, epoch, net.params().clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            net.load_params(params)?;
            e
        }
        None => 0,
    };
    Ok(TrainingLog {
        epochs,
        best_epoch,
        stopped_early,
    })
}

const CHECKPOINT_FORMAT: &str = "sthode-checkpoint";

/// Parameters plus everything needed to rebuild and run the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub graphs: Graphs,
    pub stats: ZScore,
    pub params: ParamStore,
    /// The resolved run configuration, echoed verbatim.
    pub run_config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(net: &SthodeNetwork, stats: &ZScore, run_config: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            model: net.config().clone(),
            graphs: net.graphs().clone(),
            stats: stats.clone(),
            params: net.params().clone(),
            run_config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rebuilds the network with the stored parameters.
    pub fn network(&self) -> Result<SthodeNetwork> {
        let mut net = SthodeNetwork::new(self.model.clone(), self.graphs.clone(), 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.load_params(self.params.clone())?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Signals;
    use crate::hypergraph::Hypergraph;

    fn toy() -> (SthodeNetwork, TrafficDataset) {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|t| (0..4).map(|v| ((t as f64 + v as f64) * 0.5).sin() * 10.0 + 20.0).collect())
            .collect();
        let ds = TrafficDataset::new(Signals::from_rows(&rows).unwrap(), 4, 2).unwrap();
        let graphs = Graphs {
            spatial: Hypergraph::new(4, vec![vec![0, 1], vec![1, 2], vec![2, 3]], vec![2.0; 3]).unwrap(),
            temporal: Hypergraph::new(4, (0..4).map(|v| vec![v, (v + 1) % 4]).collect(), vec![1.0; 4]).unwrap(),
        };
        let cfg = ModelConfig {
            n_nodes: 4,
            window: 4,
            horizon: 2,
            tcn_widths: vec![3],
            mixhop_depth: 2,
            blocks: 1,
            mlp_hidden: 6,
            ode_steps: 2,
            ..ModelConfig::default()
        };
        (SthodeNetwork::new(cfg, graphs, 5).unwrap(), ds)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut net, ds) = toy();
        let before = net.params().clone();
        let cfg = TrainConfig { lr: 0.0, epochs: 1, ..TrainConfig::default() };
        let mut opt = AdamState::new(net.params(), 0.0);
        train_epoch(&mut net, &ds, &mut opt, &cfg, 0).unwrap();
        assert_eq!(net.params(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let (mut a, ds) = toy();
        let (mut b, _) = toy();
        let la = fit(&mut a, &ds, &cfg, |_| {}).unwrap();
        let lb = fit(&mut b, &ds, &cfg, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn evaluation_is_pure() {
        let (net, ds) = toy();
        let before = net.params().clone();
        let e1 = evaluate(&net, &ds, Part::Test, 1.0).unwrap();
        let e2 = evaluate(&net, &ds, Part::Test, 1.0).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(net.params(), &before);
        assert_eq!(e1.predictions.shape(), &[e1.starts.len(), 4, 2, 1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (net, ds) = toy();
        let ck = Checkpoint::new(&net, &ds.stats, serde_json::json!({"seed": 5}));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.network().unwrap();
        assert_eq!(
            evaluate(&rebuilt, &ds, Part::Test, 1.0).unwrap(),
            evaluate(&net, &ds, Part::Test, 1.0).unwrap()
        );
        assert!(Checkpoint::from_json("{}").is_err());
    }

    #[test]
    fn last_value_baseline_repeats_input() {
        let (_, ds) = toy();
        let e = last_value_baseline(&ds, Part::Test).unwrap();
        let start = e.starts[0];
        let last = ds.signals.values.get(&[start + ds.window - 1, 2, 0]);
        assert_eq!(e.predictions.get(&[0, 2, 1, 0]), last);
    }
}

//! Synthetic road networks with seasonal, hypergraph-diffused traffic.
//!
//! Sensors sit on a line. Each reading is a daily profile with a per-node
//! phase, plus a persistent disturbance that diffuses over the generating
//! hypergraph (one hyperedge per sensor and its road neighbours), plus
//! observation noise:
//!
//! ```text
//! z(t+1) = rho * ((1 - c) z(t) + c * A^hops z(t)) + innovation * xi(t)
//! x(t)   = base + amplitude * (profile(phase_v + 2 pi t / period) + z(t) + noise * eta(t))
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{SensorDistances, Signals};
use crate::error::{Error, Result};
use crate::hypergraph::{build_geo_adjacency, build_spatial_hyperedges, normalized_transform, Hypergraph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub t_total: usize,
    pub seed: u64,
    /// Steps per day.
    pub period: usize,
    pub base: f64,
    pub amplitude: f64,
    /// Relative weight of the second daily harmonic.
    pub harmonic: f64,
    /// Nodes sharing one phase; groups are drawn at random.
    pub phase_group: usize,
    /// Phases are spread evenly over `[0, phase_spread)`.
    pub phase_spread: f64,
    pub coupling: f64,
    pub coupling_hops: u32,
    pub persistence: f64,
    pub innovation: f64,
    pub noise: f64,
    /// Road links are listed up to this many hops apart.
    pub listed_hops: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 16,
            t_total: 2000,
            seed: 0,
            period: 288,
            base: 200.0,
            amplitude: 100.0,
            harmonic: 0.5,
            phase_group: 1,
            phase_spread: std::f64::consts::PI,
            coupling: 0.6,
            coupling_hops: 1,
            persistence: 0.97,
            innovation: 0.05,
            noise: 0.01,
            listed_hops: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub signals: Signals,
    pub distances: SensorDistances,
    /// The hypergraph driving the disturbance diffusion.
    pub ground_truth: Hypergraph,
    pub phases: Vec<f64>,
}

fn profile(theta: f64, harmonic: f64) -> f64 {
    theta.sin() + harmonic * (2.0 * theta).sin()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    let n = cfg.n_nodes;
    if n < 4 {
        return Err(Error::InvalidArgument(format!("synthetic data needs at least 4 nodes, got {n}")));
    }
    if cfg.period == 0 || cfg.phase_group == 0 || cfg.listed_hops == 0 {
        return Err(Error::InvalidArgument("period, phase group and listed hops must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let gaps: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(0.8..1.2)).collect();
    let mut pos = vec![0.0];
    for g in &gaps {
        pos.push(pos.last().unwrap() + g);
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..(i + 1 + cfg.listed_hops).min(n) {
            edges.push((i, j, pos[j] - pos[i]));
        }
    }
    let distances = SensorDistances { edges };
    let road: Vec<(usize, usize, f64)> = (0..n - 1).map(|i| (i, i + 1, gaps[i])).collect();
    let ground_truth = build_spatial_hyperedges(&build_geo_adjacency(&road, n, 10.0, 0.1)?, 1)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let groups = n.div_ceil(cfg.phase_group);
    let mut phases = vec![0.0; n];
    for (rank, &v) in order.iter().enumerate() {
        phases[v] = cfg.phase_spread * (rank / cfg.phase_group) as f64 / groups as f64;
    }

    let a = normalized_transform(&ground_truth, &ground_truth.incidence())?;
    let mut mix = Tensor::eye(n);
    for _ in 0..cfg.coupling_hops {
        mix = mix.matmul(&a)?;
    }
    let mix = Tensor::eye(n)
        .scale(1.0 - cfg.coupling)
        .zip_map(&mix.scale(cfg.coupling), |x, y| x + y)?
        .scale(cfg.persistence);

    let mut z = Tensor::zeros(&[n, 1]);
    let mut values = Tensor::zeros(&[cfg.t_total, n, 1]);
    let omega = std::f64::consts::TAU / cfg.period as f64;
    for t in 0..cfg.t_total {
        for v in 0..n {
            let eta: f64 = rng.sample(StandardNormal);
            let x = cfg.base
                + cfg.amplitude * (profile(phases[v] + omega * t as f64, cfg.harmonic) + z.data()[v] + cfg.noise * eta);
            values.set(&[t, v, 0], x);
        }
        let mut next = mix.matmul(&z)?;
        for x in next.data_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *x += cfg.innovation * xi;
        }
        z = next;
    }
    let len = values.len();
    Ok(SynthData {
        signals: Signals::new(values, vec![false; len])?,
        distances,
        ground_truth,
        phases,
    })
}

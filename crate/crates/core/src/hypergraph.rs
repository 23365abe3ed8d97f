//! Spatial and temporal hypergraphs and their propagation transforms.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dtw::pairwise_dtw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A weighted hypergraph over `n_nodes` nodes.
///
/// Hyperedges are stored as sorted member lists; the incidence matrix and
/// degree vectors are derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypergraph {
    n_nodes: usize,
    hyperedges: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl Hypergraph {
    pub fn new(n_nodes: usize, hyperedges: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        if hyperedges.len() != weights.len() {
            return Err(Error::Construction(format!(
                "{} hyperedges but {} weights",
                hyperedges.len(),
                weights.len()
            )));
        }
        let mut edges = Vec::with_capacity(hyperedges.len());
        for (e, (mut members, &w)) in hyperedges.into_iter().zip(&weights).enumerate() {
            if members.is_empty() {
                return Err(Error::Construction(format!("hyperedge {e} is empty")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Construction(format!("hyperedge {e} has weight {w}")));
            }
            members.sort_unstable();
            if members.windows(2).any(|p| p[0] == p[1]) {
                return Err(Error::Construction(format!("hyperedge {e} repeats a node")));
            }
            if let Some(&v) = members.iter().find(|&&v| v >= n_nodes) {
                return Err(Error::Construction(format!(
                    "hyperedge {e} names node {v} but there are {n_nodes} nodes"
                )));
            }
            edges.push(members);
        }
        Ok(Self {
            n_nodes,
            hyperedges: edges,
            weights,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_hyperedges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn hyperedges(&self) -> &[Vec<usize>] {
        &self.hyperedges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Binary `N x M` incidence matrix.
    pub fn incidence(&self) -> Tensor {
        let m = self.n_hyperedges();
        let mut h = Tensor::zeros(&[self.n_nodes, m]);
        for (e, members) in self.hyperedges.iter().enumerate() {
            for &v in members {
                h.data_mut()[v * m + e] = 1.0;
            }
        }
        h
    }

    /// `d(v) = sum_e W(e) H(v, e)`.
    pub fn node_degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_nodes];
        for (members, w) in self.hyperedges.iter().zip(&self.weights) {
            for &v in members {
                d[v] += w;
            }
        }
        d
    }

    /// `b(e) = sum_v H(v, e)`.
    pub fn edge_degrees(&self) -> Vec<f64> {
        self.hyperedges.iter().map(|m| m.len() as f64).collect()
    }

    /// Number of hyperedges each node belongs to.
    pub fn membership_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_nodes];
        for members in &self.hyperedges {
            for &v in members {
                c[v] += 1;
            }
        }
        c
    }

    /// Plain-text form: `N M`, then one line per hyperedge with its weight
    /// followed by member indices. Lines starting with `#` are comments.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.n_nodes, self.n_hyperedges());
        for (members, w) in self.hyperedges.iter().zip(&self.weights) {
            write!(s, "{w}").unwrap();
            for v in members {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| {
            let l = l.trim();
            !l.is_empty() && !l.starts_with('#')
        });
        let parse_err = |line: usize, message: String| Error::Parse {
            line: line + 1,
            message,
        };
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "missing header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(hl, format!("bad header: {e}")))?;
        let [n, m] = dims[..] else {
            return Err(parse_err(hl, "header must be `N M`".into()));
        };
        let mut edges = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for (ln, line) in lines {
            let mut fields = line.split_whitespace();
            let w: f64 = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|e| parse_err(ln, format!("bad weight: {e}")))?;
            let members = fields
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|e| parse_err(ln, format!("bad member index: {e}")))?;
            weights.push(w);
            edges.push(members);
        }
        if edges.len() != m {
            return Err(parse_err(hl, format!("header promises {m} hyperedges, found {}", edges.len())));
        }
        Self::new(n, edges, weights)
    }

    /// Permutes node labels: node `v` becomes `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let edges = self
            .hyperedges
            .iter()
            .map(|m| m.iter().map(|&v| perm[v]).collect())
            .collect();
        Self::new(self.n_nodes, edges, self.weights.clone())
    }
}

/// Summary statistics written next to serialized hypergraphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypergraphSummary {
    pub n_nodes: usize,
    pub n_hyperedges: usize,
    /// `size -> number of hyperedges with that many members`.
    pub edge_size_histogram: BTreeMap<usize, usize>,
    /// `count -> number of nodes in that many hyperedges`.
    pub node_membership_histogram: BTreeMap<usize, usize>,
}

impl From<&Hypergraph> for HypergraphSummary {
    fn from(hg: &Hypergraph) -> Self {
        let mut edge_size_histogram = BTreeMap::new();
        for m in hg.hyperedges() {
            *edge_size_histogram.entry(m.len()).or_default() += 1;
        }
        let mut node_membership_histogram = BTreeMap::new();
        for c in hg.membership_counts() {
            *node_membership_histogram.entry(c).or_default() += 1;
        }
        Self {
            n_nodes: hg.n_nodes(),
            n_hyperedges: hg.n_hyperedges(),
            edge_size_histogram,
            node_membership_histogram,
        }
    }
}

/// Weighted road-network graph derived from sensor distances.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGraph {
    adjacency: Tensor,
}

impl GeoGraph {
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let (r, c) = adjacency.matrix_dims("geo graph")?;
        if r != c {
            return Err(Error::Construction("adjacency must be square".into()));
        }
        for i in 0..r {
            if adjacency.at(i, i) != 0.0 {
                return Err(Error::Construction(format!("adjacency diagonal at {i} is nonzero")));
            }
            for j in 0..r {
                let a = adjacency.at(i, j);
                if a < 0.0 || a != adjacency.at(j, i) {
                    return Err(Error::Construction(format!(
                        "adjacency must be symmetric and nonnegative (entry {i},{j})"
                    )));
                }
            }
        }
        Ok(Self { adjacency })
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_nodes();
        (0..n).filter(move |&u| self.adjacency.at(v, u) > 0.0)
    }
}

/// Thresholded Gaussian kernel adjacency:
/// `A_ij = exp(-d_ij^2 / sigma^2)` when that is at least `eps`, else 0,
/// symmetrized by taking the larger direction.
pub fn build_geo_adjacency(
    edges: &[(usize, usize, f64)],
    n: usize,
    sigma: f64,
    eps: f64,
) -> Result<GeoGraph> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Construction(format!("kernel width must be positive, got {sigma}")));
    }
    let mut a = Tensor::zeros(&[n, n]);
    for &(i, j, d) in edges {
        if i >= n || j >= n {
            return Err(Error::Construction(format!(
                "edge ({i}, {j}) out of range for {n} nodes"
            )));
        }
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::Construction(format!("edge ({i}, {j}) has distance {d}")));
        }
        if i == j {
            continue;
        }
        let w = (-(d * d) / (sigma * sigma)).exp();
        if w >= eps {
            for (p, q) in [(i, j), (j, i)] {
                let cur = a.at(p, q);
                a.data_mut()[p * n + q] = cur.max(w);
            }
        }
    }
    GeoGraph::from_adjacency(a)
}

/// One hyperedge per centroid holding the centroid and every node within
/// `radius` hops of it. Weights are member counts; hyperedges with identical
/// member sets are merged, keeping the first (lowest centroid).
pub fn build_spatial_hyperedges(g: &GeoGraph, radius: usize) -> Result<Hypergraph> {
    let n = g.n_nodes();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for c in 0..n {
        let mut hops = vec![usize::MAX; n];
        hops[c] = 0;
        let mut queue = VecDeque::from([c]);
        while let Some(v) = queue.pop_front() {
            if hops[v] == radius {
                continue;
            }
            for u in g.neighbors(v) {
                if hops[u] == usize::MAX {
                    hops[u] = hops[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        let members: Vec<usize> = (0..n).filter(|&v| hops[v] != usize::MAX).collect();
        if seen.insert(members.clone()) {
            edges.push(members);
        }
    }
    let weights = edges.iter().map(|m| m.len() as f64).collect();
    Hypergraph::new(n, edges, weights)
}

/// `r`-uniform temporal hypergraph from a DTW distance matrix: each node `v`
/// gets a hyperedge with itself and its `r - 1` nearest nodes, ties going to
/// the lower index. Duplicate hyperedges are kept so hyperedge `v` belongs to
/// node `v`; every weight is 1.
pub fn temporal_hypergraph_from_distances(dist: &[Vec<f64>], r: usize) -> Result<Hypergraph> {
    let n = dist.len();
    if r < 2 {
        return Err(Error::Construction(format!("uniform size r must be at least 2, got {r}")));
    }
    if r > n {
        return Err(Error::Construction(format!(
            "uniform size r = {r} exceeds the number of nodes {n}"
        )));
    }
    let mut edges = Vec::with_capacity(n);
    for v in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&u| u != v).collect();
        others.sort_by(|&a, &b| dist[v][a].total_cmp(&dist[v][b]).then(a.cmp(&b)));
        let mut members = vec![v];
        members.extend_from_slice(&others[..r - 1]);
        edges.push(members);
    }
    Hypergraph::new(n, edges, vec![1.0; n])
}

/// Builds the temporal hypergraph from per-node training series.
pub fn build_temporal_hypergraph(signals: &[Vec<f64>], r: usize, band: Option<usize>) -> Result<Hypergraph> {
    if r > signals.len() {
        return Err(Error::Construction(format!(
            "uniform size r = {r} exceeds the number of nodes {}",
            signals.len()
        )));
    }
    let dist = pairwise_dtw(signals, band)?;
    temporal_hypergraph_from_distances(&dist, r)
}

/// Per-entry edge gains `w_e / b_e` broadcast over rows, and the node
/// normalizer `sqrt(d_i d_j)`. Degrees always come from the binary incidence.
fn normalization_factors(hg: &Hypergraph) -> Result<(Tensor, Tensor)> {
    let d = hg.node_degrees();
    if let Some(v) = d.iter().position(|&x| x <= 0.0) {
        return Err(Error::Construction(format!("node {v} has zero degree")));
    }
    let b = hg.edge_degrees();
    let (n, m) = (hg.n_nodes(), hg.n_hyperedges());
    let mut gain = Tensor::zeros(&[n, m]);
    for row in gain.data_mut().chunks_mut(m) {
        for (e, g) in row.iter_mut().enumerate() {
            *g = hg.weights()[e] / b[e];
        }
    }
    let mut norm = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            norm.data_mut()[i * n + j] = (d[i] * d[j]).sqrt();
        }
    }
    Ok((gain, norm))
}

/// Differentiable `A = D^-1/2 H_use W B^-1 H_use^T D^-1/2` with degrees taken
/// from the binary incidence of `hg`.
pub fn normalized_transform_var<'t>(hg: &Hypergraph, h_use: Var<'t>) -> Result<Var<'t>> {
    let shape = h_use.shape();
    if shape != [hg.n_nodes(), hg.n_hyperedges()] {
        return Err(Error::Dimension(format!(
            "incidence of shape {shape:?} does not match hypergraph {}x{}",
            hg.n_nodes(),
            hg.n_hyperedges()
        )));
    }
    let (gain, norm) = normalization_factors(hg)?;
    let weighted = h_use.mul(h_use.tape().constant(gain))?;
    weighted.matmul(h_use.transpose()?)?.div_const(&norm)
}

/// Normalized transform of a fixed incidence matrix.
pub fn normalized_transform(hg: &Hypergraph, h_use: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let a = normalized_transform_var(hg, tape.constant(h_use.clone()))?;
    let out = (*a.value()).clone();
    Ok(out)
}

/// `H . softmax_rows(E_n E_m^T)`: each node spreads unit attention across
/// hyperedges, then non-members are masked out.
pub fn adaptive_incidence<'t>(incidence: Var<'t>, node_embed: Var<'t>, edge_embed: Var<'t>) -> Result<Var<'t>> {
    let attention = node_embed.outer(edge_embed)?.softmax_rows()?;
    incidence.mul(attention)
}

/// A base hypergraph with node and hyperedge embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveIncidence {
    pub base: Hypergraph,
    pub node_embed: Tensor,
    pub edge_embed: Tensor,
}

impl AdaptiveIncidence {
    pub fn new(base: Hypergraph) -> Self {
        let node_embed = Tensor::zeros(&[base.n_nodes()]);
        let edge_embed = Tensor::zeros(&[base.n_hyperedges()]);
        Self {
            base,
            node_embed,
            edge_embed,
        }
    }

    pub fn materialize(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let h = adaptive_incidence(
            tape.constant(self.base.incidence()),
            tape.constant(self.node_embed.clone()),
            tape.constant(self.edge_embed.clone()),
        )?;
        let out = (*h.value()).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path4() -> GeoGraph {
        build_geo_adjacency(&[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)], 4, 1.0, 0.1).unwrap()
    }

    #[test]
    fn geo_adjacency_examples() {
        let g = build_geo_adjacency(&[], 3, 1.0, 0.1).unwrap();
        assert_eq!(g.adjacency(), &Tensor::zeros(&[3, 3]));
        let g = build_geo_adjacency(&[(0, 1, 2.0)], 2, 2.0, 0.1).unwrap();
        assert!((g.adjacency().at(0, 1) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(g.adjacency().at(0, 1), g.adjacency().at(1, 0));
        let g = build_geo_adjacency(&[(0, 1, 3.0)], 2, 1.0, 0.1).unwrap();
        assert_eq!(g.adjacency().at(0, 1), 0.0);
        assert!(build_geo_adjacency(&[(0, 5, 1.0)], 2, 1.0, 0.1).is_err());
        assert!(build_geo_adjacency(&[(0, 1, 1.0)], 2, 0.0, 0.1).is_err());
    }

    #[test]
    fn spatial_path_graph() {
        let hg = build_spatial_hyperedges(&path4(), 2).unwrap();
        // Centroid 1 reaches {0, 1, 2, 3} within two hops.
        let e = hg.hyperedges().iter().position(|m| m == &vec![0, 1, 2, 3]).unwrap();
        assert_eq!(hg.weights()[e], 4.0);
        assert_eq!(hg.hyperedges()[0], vec![0, 1, 2]);
    }

    #[test]
    fn spatial_isolated_and_complete() {
        let g = build_geo_adjacency(&[(0, 1, 1.0)], 3, 1.0, 0.1).unwrap();
        let hg = build_spatial_hyperedges(&g, 2).unwrap();
        assert!(hg.hyperedges().contains(&vec![2]));
        let w = hg.weights()[hg.hyperedges().iter().position(|m| m == &vec![2]).unwrap()];
        assert_eq!(w, 1.0);

        let k3 = build_geo_adjacency(&[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)], 3, 1.0, 0.1).unwrap();
        let hg = build_spatial_hyperedges(&k3, 2).unwrap();
        assert_eq!(hg.n_hyperedges(), 1);
        assert_eq!(hg.hyperedges()[0], vec![0, 1, 2]);
    }

    #[test]
    fn normalized_examples() {
        let single = Hypergraph::new(1, vec![vec![0]], vec![1.0]).unwrap();
        assert_eq!(normalized_transform(&single, &single.incidence()).unwrap().data(), &[1.0]);

        for w in [0.3, 1.0, 7.0] {
            let pair = Hypergraph::new(2, vec![vec![0, 1]], vec![w]).unwrap();
            let a = normalized_transform(&pair, &pair.incidence()).unwrap();
            assert_eq!(a.data(), &[0.5, 0.5, 0.5, 0.5]);
        }

        let disjoint = Hypergraph::new(2, vec![vec![0], vec![1]], vec![2.0, 5.0]).unwrap();
        let a = normalized_transform(&disjoint, &disjoint.incidence()).unwrap();
        assert_eq!(a, Tensor::eye(2));
    }

    #[test]
    fn zero_degree_node_is_named() {
        let hg = Hypergraph::new(3, vec![vec![0, 1]], vec![1.0]).unwrap();
        let err = normalized_transform(&hg, &hg.incidence()).unwrap_err();
        assert!(err.to_string().contains("node 2"));
    }

    #[test]
    fn construction_validates() {
        assert!(Hypergraph::new(2, vec![vec![]], vec![1.0]).is_err());
        assert!(Hypergraph::new(2, vec![vec![0]], vec![0.0]).is_err());
        assert!(Hypergraph::new(2, vec![vec![2]], vec![1.0]).is_err());
        assert!(Hypergraph::new(2, vec![vec![1, 1]], vec![1.0]).is_err());
    }

    #[test]
    fn adaptive_examples() {
        let hg = Hypergraph::new(2, vec![vec![0, 1], vec![0, 1]], vec![1.0, 1.0]).unwrap();
        let ai = AdaptiveIncidence::new(hg);
        assert_eq!(ai.materialize().unwrap().data(), &[0.5; 4]);

        let hg = Hypergraph::new(1, vec![vec![0], vec![0]], vec![1.0, 1.0]).unwrap();
        let mut ai = AdaptiveIncidence::new(hg);
        ai.node_embed = Tensor::vector(&[1.0]);
        ai.edge_embed = Tensor::vector(&[1f64.ln(), 3f64.ln()]);
        let h = ai.materialize().unwrap();
        assert!((h.data()[0] - 0.25).abs() < 1e-15 && (h.data()[1] - 0.75).abs() < 1e-15);

        let hg = Hypergraph::new(2, vec![vec![0], vec![0, 1]], vec![1.0, 1.0]).unwrap();
        let mut ai = AdaptiveIncidence::new(hg);
        ai.node_embed = Tensor::vector(&[0.3, -2.0]);
        ai.edge_embed = Tensor::vector(&[5.0, 1.0]);
        assert_eq!(ai.materialize().unwrap().at(1, 0), 0.0);
    }

    #[test]
    fn temporal_examples() {
        let d = vec![
            vec![0.0, 0.1, 5.0],
            vec![0.1, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
        ];
        let hg = temporal_hypergraph_from_distances(&d, 2).unwrap();
        assert_eq!(hg.hyperedges(), &[vec![0, 1], vec![0, 1], vec![0, 2]]);
        assert_eq!(hg.weights(), &[1.0, 1.0, 1.0]);

        let all = temporal_hypergraph_from_distances(&d, 3).unwrap();
        assert!(all.hyperedges().iter().all(|m| m == &vec![0, 1, 2]));

        let same = vec![vec![1.0, 2.0, 3.0]; 4];
        let hg = build_temporal_hypergraph(&same, 2, None).unwrap();
        assert_eq!(hg.hyperedges(), &[vec![0, 1], vec![0, 1], vec![0, 2], vec![0, 3]]);

        assert!(build_temporal_hypergraph(&same, 5, None).is_err());
        assert!(temporal_hypergraph_from_distances(&d, 1).is_err());
    }

    #[test]
    fn text_round_trip() {
        let hg = Hypergraph::new(5, vec![vec![0, 3], vec![1, 2, 4]], vec![0.1 + 0.2, 3.0]).unwrap();
        let back = Hypergraph::from_text(&hg.to_text()).unwrap();
        assert_eq!(back, hg);
        assert!(Hypergraph::from_text("2 2\n1 0\n").is_err());
        assert!(Hypergraph::from_text("").is_err());
    }
}

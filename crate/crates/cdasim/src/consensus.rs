//! Metropolis-Hastings consensus weights over the sync graph and the
//! per-epoch average-consensus time update.

use serde::{Deserialize, Serialize};

use crate::clocks::ClockState;
use crate::error::SimError;

/// Undirected connectivity graph of the sync network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Graph { nodes: n, edges }
    }

    pub fn ring(n: usize) -> Self {
        let edges = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph { nodes: n, edges }
    }

    pub fn path(n: usize) -> Self {
        let edges = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        Graph { nodes: n, edges }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for &(a, b) in &self.edges {
            if a == b {
                return Err(SimError::Config(format!("self-loop at node {a}")));
            }
            if a >= self.nodes || b >= self.nodes {
                return Err(SimError::Config(format!(
                    "edge ({a},{b}) out of range for {} nodes",
                    self.nodes
                )));
            }
        }
        if !self.is_connected() {
            return Err(SimError::DisconnectedGraph);
        }
        Ok(())
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn neighbors(&self, n: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == n {
                out.push(b);
            } else if b == n {
                out.push(a);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for m in self.neighbors(n) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Symmetric doubly stochastic weight matrix, row-major.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub n: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.n..(i + 1) * self.n]
    }

    /// Second-largest eigenvalue modulus; the asymptotic per-step contraction
    /// of the consensus error.
    pub fn slem(&self) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(self.n, self.n, &self.w);
        let eig = nalgebra::SymmetricEigen::new(m);
        let mut mags: Vec<f64> = eig.eigenvalues.iter().map(|l| l.abs()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
        debug_assert!((mags[0] - 1.0).abs() < 1e-9, "largest eigenvalue {}", mags[0]);
        if mags.len() > 1 {
            mags[1]
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// W[n][m] = 1/(1+max(deg n, deg m)) on edges, diagonal takes the slack.
pub fn build_weights(g: &Graph) -> Result<WeightMatrix, SimError> {
    g.validate()?;
    let n = g.nodes;
    let deg = g.degrees();
    let mut w = vec![0.0; n * n];
    for &(a, b) in &g.edges {
        let v = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        w[a * n + b] = v;
        w[b * n + a] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[i * n + j]).sum();
        w[i * n + i] = 1.0 - off;
    }
    Ok(WeightMatrix { n, w })
}

/// Pairwise offset measurements for one epoch. Entry (i,j) is the measured
/// value of clock i minus clock j; the two orientations of a pair are stored
/// together so the matrix stays exactly antisymmetric. Missing measurements
/// (lost exchanges) stay masked and contribute nothing.
#[derive(Debug, Clone)]
pub struct BiasMatrix {
    pub n: usize,
    d: Vec<f64>,
    present: Vec<bool>,
}

impl BiasMatrix {
    pub fn new(n: usize) -> Self {
        BiasMatrix {
            n,
            d: vec![0.0; n * n],
            present: vec![false; n * n],
        }
    }

    pub fn record(&mut self, i: usize, j: usize, offset_i_minus_j: f64) {
        self.d[i * self.n + j] = offset_i_minus_j;
        self.d[j * self.n + i] = -offset_i_minus_j;
        self.present[i * self.n + j] = true;
        self.present[j * self.n + i] = true;
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if self.present[i * self.n + j] {
            Some(self.d[i * self.n + j])
        } else {
            None
        }
    }
}

/// One weighted-average update: node n's correction is its weight row against the
/// measured offsets of its neighbors relative to itself (column n of the
/// bias matrix). Corrections are applied to the clocks and returned.
pub fn consensus_step(
    clocks: &mut [ClockState],
    offsets: &BiasMatrix,
    w: &WeightMatrix,
) -> Result<Vec<f64>, SimError> {
    if clocks.len() != w.n || offsets.n != w.n {
        return Err(SimError::Config(format!(
            "consensus dimension mismatch: {} clocks, {}x{} offsets, {}x{} weights",
            clocks.len(),
            offsets.n,
            offsets.n,
            w.n,
            w.n
        )));
    }
    let corrections = compute_corrections(offsets, w);
    for (clock, &c) in clocks.iter_mut().zip(corrections.iter()) {
        clock.apply_correction(c);
    }
    Ok(corrections)
}

/// The correction vector without touching any clock.
pub fn compute_corrections(offsets: &BiasMatrix, w: &WeightMatrix) -> Vec<f64> {
    let n = w.n;
    let mut corrections = vec![0.0; n];
    for node in 0..n {
        let mut acc = 0.0;
        for m in 0..n {
            if m == node {
                continue;
            }
            if let Some(d) = offsets.get(m, node) {
                acc += w.get(node, m) * d;
            }
        }
        corrections[node] = acc;
    }
    corrections
}

/// x <- W x; the noiseless state-space view of one consensus epoch.
pub fn apply_weights(w: &WeightMatrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), w.n);
    (0..w.n)
        .map(|i| w.row(i).iter().zip(x.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Noiseless bias matrix from true clock offsets, over the graph's edges.
pub fn exact_bias_matrix(offsets: &[f64], g: &Graph) -> BiasMatrix {
    let mut d = BiasMatrix::new(offsets.len());
    for &(a, b) in &g.edges {
        d.record(a, b, offsets[a] - offsets[b]);
    }
    d
}

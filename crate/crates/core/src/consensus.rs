//! Coupling topology, doubly stochastic mixing weights and global average
//! consensus (GAC).

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::messages::{MessageKind, MessageLog};
use crate::schedule::Scheduler;
use crate::{Error, Result};

/// Undirected, connected coupling graph over `M` agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologySpec", into = "TopologySpec")]
pub struct Topology {
    agents: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

/// Serialized form of a topology: agent count and undirected edge list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    pub agents: usize,
    pub edges: Vec<(usize, usize)>,
}

impl TryFrom<TopologySpec> for Topology {
    type Error = Error;
    fn try_from(spec: TopologySpec) -> Result<Self> {
        Topology::new(spec.agents, &spec.edges)
    }
}

impl From<Topology> for TopologySpec {
    fn from(t: Topology) -> Self {
        TopologySpec {
            agents: t.agents,
            edges: t.edges.into_iter().collect(),
        }
    }
}

impl Topology {
    /// Builds a topology from an undirected edge list. Edges are
    /// normalized to `(min, max)`; duplicates are merged.
    pub fn new(agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidTopology("no agents".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= agents || b >= agents {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a}, {b}) references an agent outside 0..{agents}"
                )));
            }
            if a == b {
                return Err(Error::InvalidTopology(format!("self-loop on agent {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut neighbors = vec![Vec::new(); agents];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        let topo = Topology {
            agents,
            edges: set,
            neighbors,
        };
        let components = topo.components();
        if components != 1 {
            return Err(Error::Disconnected { agents, components });
        }
        Ok(topo)
    }

    /// Path graph `0 - 1 - ... - (M-1)`.
    pub fn chain(agents: usize) -> Result<Self> {
        let edges: Vec<_> = (1..agents).map(|i| (i - 1, i)).collect();
        Topology::new(agents, &edges)
    }

    pub fn complete(agents: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..agents {
            for j in (i + 1)..agents {
                edges.push((i, j));
            }
        }
        Topology::new(agents, &edges)
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    /// Neighborhood of agent `i`, ascending, never containing `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    fn components(&self) -> usize {
        let mut seen = vec![false; self.agents];
        let mut count = 0;
        for start in 0..self.agents {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                for &w in &self.neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }
}

/// Doubly stochastic mixing matrix aligned with a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    weights: DMatrix<f64>,
}

impl ConsensusMatrix {
    /// Wraps a matrix after checking nonnegativity, the double stochasticity
    /// (row and column sums within 1e-12) and the sparsity pattern.
    pub fn from_matrix(weights: DMatrix<f64>, topology: &Topology) -> Result<Self> {
        let m = topology.agents();
        if weights.nrows() != m || weights.ncols() != m {
            return Err(Error::Dimension {
                context: "consensus matrix",
                expected: m,
                got: weights.nrows(),
            });
        }
        for i in 0..m {
            let row: f64 = weights.row(i).sum();
            let col: f64 = weights.column(i).sum();
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "consensus matrix not doubly stochastic at index {i} (row {row}, col {col})"
                )));
            }
            for j in 0..m {
                let w = weights[(i, j)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Config(format!("weight P[{i},{j}] = {w} outside [0, 1]")));
                }
                if i != j && w != 0.0 && !topology.are_neighbors(i, j) {
                    return Err(Error::Config(format!(
                        "weight P[{i},{j}] nonzero but agents are not neighbors"
                    )));
                }
            }
        }
        Ok(ConsensusMatrix { weights })
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn agents(&self) -> usize {
        self.weights.nrows()
    }
}

/// Metropolis-Hastings weights: `P_ij = 1 / (1 + max(deg_i, deg_j))` on
/// edges and the remaining mass on the diagonal.
pub fn build_metropolis_matrix(topology: &Topology) -> ConsensusMatrix {
    let m = topology.agents();
    let mut p = DMatrix::zeros(m, m);
    for (a, b) in topology.edges() {
        let w = 1.0 / (1.0 + topology.degree(a).max(topology.degree(b)) as f64);
        p[(a, b)] = w;
        p[(b, a)] = w;
    }
    for i in 0..m {
        let off: f64 = topology.neighbors(i).iter().map(|&j| p[(i, j)]).sum();
        p[(i, i)] = 1.0 - off;
    }
    ConsensusMatrix { weights: p }
}

/// Synchronous GAC iteration state. Agent `i` starts from `M * v_i` so that
/// the common limit is the sum of the initial values.
#[derive(Debug, Clone)]
pub struct Gac<'a> {
    matrix: &'a ConsensusMatrix,
    topology: &'a Topology,
    values: Vec<Vec<f64>>,
    iteration: usize,
}

impl<'a> Gac<'a> {
    pub fn new(local_values: &[Vec<f64>], matrix: &'a ConsensusMatrix, topology: &'a Topology) -> Result<Self> {
        let m = topology.agents();
        if local_values.len() != m || matrix.agents() != m {
            return Err(Error::Dimension {
                context: "GAC agent count",
                expected: m,
                got: local_values.len(),
            });
        }
        let d = local_values[0].len();
        if let Some(bad) = local_values.iter().find(|v| v.len() != d) {
            return Err(Error::Dimension {
                context: "GAC vector length",
                expected: d,
                got: bad.len(),
            });
        }
        let scale = m as f64;
        let values = local_values
            .iter()
            .map(|v| v.iter().map(|x| scale * x).collect())
            .collect();
        Ok(Gac {
            matrix,
            topology,
            values,
            iteration: 0,
        })
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One consensus round: every agent sends its vector to each neighbor,
    /// then mixes self term first and neighbors in ascending index.
    pub fn step(&mut self, scheduler: Scheduler, log: Option<(&mut MessageLog, MessageKind)>) {
        if let Some((log, kind)) = log {
            log.next_round();
            let d = self.values[0].len();
            for i in 0..self.topology.agents() {
                for &j in self.topology.neighbors(i) {
                    log.send(i, j, kind, d);
                }
            }
        }
        let prev = &self.values;
        let matrix = self.matrix;
        let topology = self.topology;
        let next = scheduler.map(topology.agents(), |i| {
            let pii = matrix.weight(i, i);
            let mut out: Vec<f64> = prev[i].iter().map(|v| pii * v).collect();
            for &j in topology.neighbors(i) {
                let pij = matrix.weight(i, j);
                for (o, v) in out.iter_mut().zip(&prev[j]) {
                    *o += pij * v;
                }
            }
            out
        });
        self.values = next;
        self.iteration += 1;
    }

    pub fn into_values(self) -> Vec<Vec<f64>> {
        self.values
    }
}

/// Runs `iterations` GAC rounds; agent `i`'s output approximates the
/// component-wise sum of all agents' inputs.
pub fn gac_sum(
    local_values: &[Vec<f64>],
    matrix: &ConsensusMatrix,
    topology: &Topology,
    iterations: usize,
) -> Result<Vec<Vec<f64>>> {
    gac_sum_with(local_values, matrix, topology, iterations, Scheduler::Sequential, None)
}

pub fn gac_sum_with(
    local_values: &[Vec<f64>],
    matrix: &ConsensusMatrix,
    topology: &Topology,
    iterations: usize,
    scheduler: Scheduler,
    mut log: Option<(&mut MessageLog, MessageKind)>,
) -> Result<Vec<Vec<f64>>> {
    if iterations == 0 {
        return Err(Error::Config("GAC needs at least one iteration".into()));
    }
    let mut gac = Gac::new(local_values, matrix, topology)?;
    if let Some((log, _)) = log.as_mut() {
        log.next_call();
    }
    for _ in 0..iterations {
        let l = log.as_mut().map(|(l, k)| (&mut **l, *k));
        gac.step(scheduler, l);
    }
    Ok(gac.into_values())
}

/// How agents agree on sums: the GAC protocol, or exact sums (used to
/// isolate algebraic checks from consensus error).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SumMode {
    Gac { iterations: usize },
    Exact,
}

/// Network context shared by the distributed protocols.
#[derive(Debug, Clone)]
pub struct Network {
    pub topology: Topology,
    pub matrix: ConsensusMatrix,
    pub sum_mode: SumMode,
    pub scheduler: Scheduler,
}

impl Network {
    pub fn new(topology: Topology, sum_mode: SumMode) -> Self {
        let matrix = build_metropolis_matrix(&topology);
        Network {
            topology,
            matrix,
            sum_mode,
            scheduler: Scheduler::Sequential,
        }
    }

    pub fn agents(&self) -> usize {
        self.topology.agents()
    }

    /// Agrees on the component-wise sum of the agents' vectors.
    pub fn sum(&self, local_values: &[Vec<f64>], log: Option<(&mut MessageLog, MessageKind)>) -> Result<Vec<Vec<f64>>> {
        match self.sum_mode {
            SumMode::Gac { iterations } => gac_sum_with(
                local_values,
                &self.matrix,
                &self.topology,
                iterations,
                self.scheduler,
                log,
            ),
            SumMode::Exact => {
                let d = local_values.first().map_or(0, Vec::len);
                if let Some(bad) = local_values.iter().find(|v| v.len() != d) {
                    return Err(Error::Dimension {
                        context: "sum vector length",
                        expected: d,
                        got: bad.len(),
                    });
                }
                let mut total = vec![0.0; d];
                for v in local_values {
                    for (t, x) in total.iter_mut().zip(v) {
                        *t += x;
                    }
                }
                Ok(vec![total; local_values.len()])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> Topology {
        Topology::chain(3).unwrap()
    }

    #[test]
    fn metropolis_chain_of_three() {
        let p = build_metropolis_matrix(&chain3());
        let third = 1.0 / 3.0;
        let expected = [
            [2.0 * third, third, 0.0],
            [third, third, third],
            [0.0, third, 2.0 * third],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.weight(i, j) - expected[i][j]).abs() < 1e-15, "P[{i},{j}]");
            }
        }
        ConsensusMatrix::from_matrix(p.matrix().clone(), &chain3()).unwrap();
    }

    #[test]
    fn metropolis_single_agent_is_identity() {
        let t = Topology::new(1, &[]).unwrap();
        let p = build_metropolis_matrix(&t);
        assert_eq!(p.weight(0, 0), 1.0);
    }

    #[test]
    fn metropolis_complete_three() {
        let t = Topology::complete(3).unwrap();
        let p = build_metropolis_matrix(&t);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.weight(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn disconnected_topology_rejected() {
        let err = Topology::new(3, &[(0, 1)]).unwrap_err();
        assert!(matches!(err, Error::Disconnected { components: 2, .. }));
    }

    #[test]
    fn neighborhoods_are_symmetric_and_exclude_self() {
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 0)]).unwrap();
        for i in 0..4 {
            assert!(!t.neighbors(i).contains(&i));
            for &j in t.neighbors(i) {
                assert!(t.neighbors(j).contains(&i));
            }
        }
        assert_eq!(t.edges().count(), 4);
    }

    #[test]
    fn self_loops_rejected() {
        assert!(Topology::new(2, &[(0, 0), (0, 1)]).is_err());
    }

    #[test]
    fn gac_chain_sums_to_six() {
        let t = chain3();
        let p = build_metropolis_matrix(&t);
        let out = gac_sum(&[vec![1.0], vec![2.0], vec![3.0]], &p, &t, 100).unwrap();
        for v in out {
            assert!((v[0] - 6.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gac_common_value_is_fixed_point() {
        let t = chain3();
        let p = build_metropolis_matrix(&t);
        let c = 0.7;
        let mut gac = Gac::new(&[vec![c], vec![c], vec![c]], &p, &t).unwrap();
        for _ in 0..20 {
            gac.step(Scheduler::Sequential, None);
            for v in gac.values() {
                assert_eq!(v[0], 3.0 * c);
            }
        }
    }

    #[test]
    fn gac_single_agent_returns_input() {
        let t = Topology::new(1, &[]).unwrap();
        let p = build_metropolis_matrix(&t);
        let out = gac_sum(&[vec![4.25, -1.0]], &p, &t, 7).unwrap();
        assert_eq!(out[0], vec![4.25, -1.0]);
    }

    #[test]
    fn gac_rejects_ragged_vectors() {
        let t = chain3();
        let p = build_metropolis_matrix(&t);
        let err = gac_sum(&[vec![1.0], vec![2.0, 3.0], vec![1.0]], &p, &t, 3).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn gac_logs_one_message_per_directed_edge_per_round() {
        let t = chain3();
        let p = build_metropolis_matrix(&t);
        let mut log = MessageLog::new(true);
        gac_sum_with(
            &[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]],
            &p,
            &t,
            5,
            Scheduler::Sequential,
            Some((&mut log, MessageKind::Gac)),
        )
        .unwrap();
        assert_eq!(log.records().len(), 5 * 4);
        assert!(log
            .records()
            .iter()
            .all(|r| r.len == 2 && t.are_neighbors(r.sender, r.receiver)));
    }

    #[test]
    fn threaded_gac_is_bit_identical() {
        let t = Topology::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).unwrap();
        let p = build_metropolis_matrix(&t);
        let vals: Vec<Vec<f64>> = (0..5).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).exp()]).collect();
        let a = gac_sum_with(&vals, &p, &t, 50, Scheduler::Sequential, None).unwrap();
        let b = gac_sum_with(&vals, &p, &t, 50, Scheduler::Threaded, None).unwrap();
        assert_eq!(a, b);
    }
}

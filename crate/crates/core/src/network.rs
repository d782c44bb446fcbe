//! Similarity network over efficient structures, Markov clustering, and a
//! force-directed layout.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::SiteConfiguration;
use crate::rng::rng_from_seed;
use crate::similarity::{axial_profile, profile_lower_bound, similarity_score};

pub const DEFAULT_CUTOFF: f64 = 0.0125;
pub const DEFAULT_INFLATION: f64 = 1.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub s_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyNetwork {
    /// Structure seed of each node, when known.
    pub seeds: Vec<Option<u64>>,
    /// Sorted by `(a, b)` with `a < b`.
    pub edges: Vec<Edge>,
    pub cutoff: f64,
}

impl EfficiencyNetwork {
    pub fn from_edges(n_nodes: usize, mut edges: Vec<Edge>, cutoff: f64) -> Result<Self> {
        for e in edges.iter_mut() {
            if e.a == e.b {
                return Err(Error::InvalidParameter(format!("self edge on node {}", e.a)));
            }
            if e.a.max(e.b) >= n_nodes {
                return Err(Error::SiteOutOfRange {
                    index: e.a.max(e.b),
                    n_sites: n_nodes,
                });
            }
            if e.a > e.b {
                std::mem::swap(&mut e.a, &mut e.b);
            }
        }
        edges.sort_by_key(|e| (e.a, e.b));
        edges.dedup_by_key(|e| (e.a, e.b));
        Ok(Self {
            seeds: vec![None; n_nodes],
            edges,
            cutoff,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.seeds.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency().iter().map(Vec::len).collect()
    }
}

/// Link every pair of structures with `S^2 < cutoff`. Pairs whose
/// transform-invariant lower bound already reaches the cutoff are skipped
/// without a full search.
pub fn build_network(structures: &[SiteConfiguration], cutoff: f64) -> Result<EfficiencyNetwork> {
    if let Some(first) = structures.first() {
        if let Some(bad) = structures.iter().find(|s| s.n_sites() != first.n_sites()) {
            return Err(Error::DimensionMismatch {
                left: first.n_sites(),
                right: bad.n_sites(),
            });
        }
    }
    let profiles: Vec<_> = structures.iter().map(axial_profile).collect();
    let rows: Vec<Vec<Edge>> = (0..structures.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            if cutoff <= 0.0 {
                return row;
            }
            for j in i + 1..structures.len() {
                if profile_lower_bound(&profiles[i], &profiles[j]) >= cutoff {
                    continue;
                }
                let r = similarity_score(&structures[i], &structures[j], Some(cutoff))
                    .expect("dimensions checked");
                if r.s_squared < cutoff {
                    row.push(Edge {
                        a: i,
                        b: j,
                        s_squared: r.s_squared,
                    });
                }
            }
            row
        })
        .collect();
    Ok(EfficiencyNetwork {
        seeds: structures.iter().map(SiteConfiguration::seed).collect(),
        edges: rows.into_iter().flatten().collect(),
        cutoff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MclOptions {
    pub inflation: f64,
    pub max_iter: usize,
    /// Stop once the largest elementwise change falls below this.
    pub tol: f64,
    /// Add unit self-loops before normalizing.
    pub self_loops: bool,
    /// Entries below this are dropped after each inflation.
    pub prune: f64,
    /// Attractor candidates within this of the column maximum count as tied.
    pub tie_tol: f64,
    /// Clusters holding less than this fraction of nodes are noise.
    pub noise_floor: f64,
}

impl Default for MclOptions {
    fn default() -> Self {
        Self {
            inflation: DEFAULT_INFLATION,
            max_iter: 200,
            tol: 1e-9,
            self_loops: true,
            prune: 1e-12,
            tie_tol: 1e-6,
            noise_floor: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    /// Cluster id (from 1, by descending population) of each node.
    pub assignment: Vec<usize>,
    /// `populations[id - 1]` is the fraction of nodes in cluster `id`.
    pub populations: Vec<f64>,
    /// Fraction of nodes in clusters below the noise floor.
    pub noise_fraction: f64,
    pub noise_floor: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Largest `|column sum - 1|` seen over all iterates.
    pub max_stochasticity_error: f64,
    /// Columns whose dominant attractor was a near-tie.
    pub ambiguous_columns: Vec<usize>,
}

impl ClusterPartition {
    pub fn n_clusters(&self) -> usize {
        self.populations.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }

    pub fn is_noise(&self, cluster: usize) -> bool {
        self.populations[cluster - 1] < self.noise_floor
    }

    /// Clusters above the noise floor.
    pub fn major_clusters(&self) -> Vec<usize> {
        (1..=self.n_clusters()).filter(|&c| !self.is_noise(c)).collect()
    }
}

/// Column-major sparse matrix; columns hold `(row, value)` sorted by row.
#[derive(Debug, Clone, PartialEq)]
struct SparseColumns {
    cols: Vec<Vec<(usize, f64)>>,
}

impl SparseColumns {
    fn normalize(&mut self) {
        for col in &mut self.cols {
            let sum: f64 = col.iter().map(|e| e.1).sum();
            if sum > 0.0 {
                for e in col.iter_mut() {
                    e.1 /= sum;
                }
            }
        }
    }

    fn square(&self) -> Self {
        let n = self.cols.len();
        let mut acc = vec![0.0; n];
        let mut touched = Vec::new();
        let cols = self
            .cols
            .iter()
            .map(|col| {
                touched.clear();
                for &(k, vk) in col {
                    for &(i, vi) in &self.cols[k] {
                        if acc[i] == 0.0 {
                            touched.push(i);
                        }
                        acc[i] += vi * vk;
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let out: Vec<(usize, f64)> = touched.iter().map(|&i| (i, acc[i])).collect();
                for &i in &touched {
                    acc[i] = 0.0;
                }
                out
            })
            .collect();
        Self { cols }
    }

    fn inflate(&mut self, power: f64, prune: f64) {
        for col in &mut self.cols {
            for e in col.iter_mut() {
                e.1 = e.1.powf(power);
            }
            let sum: f64 = col.iter().map(|e| e.1).sum();
            if sum > 0.0 {
                col.retain(|e| e.1 / sum >= prune);
            }
        }
        self.normalize();
    }

    fn max_change(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.cols.iter().zip(&other.cols) {
            let (mut i, mut j) = (0, 0);
            while i < a.len() || j < b.len() {
                let d = match (a.get(i), b.get(j)) {
                    (Some(x), Some(y)) if x.0 == y.0 => {
                        i += 1;
                        j += 1;
                        x.1 - y.1
                    }
                    (Some(x), Some(y)) if x.0 < y.0 => {
                        i += 1;
                        x.1
                    }
                    (Some(_), Some(y)) => {
                        j += 1;
                        y.1
                    }
                    (Some(x), None) => {
                        i += 1;
                        x.1
                    }
                    (None, Some(y)) => {
                        j += 1;
                        y.1
                    }
                    (None, None) => unreachable!(),
                };
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    fn stochasticity_error(&self) -> f64 {
        self.cols
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| (c.iter().map(|e| e.1).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Markov clustering: normalize columns, then alternate squaring and
/// elementwise `inflation` powers with renormalization until the iterate
/// stops changing. Each node joins the cluster of its dominant attractor.
pub fn mcl_cluster(net: &EfficiencyNetwork, opts: &MclOptions) -> Result<ClusterPartition> {
    mcl_cluster_observed(net, opts, |_| {})
}

/// As [`mcl_cluster`], reporting the column-sum error of every iterate.
pub fn mcl_cluster_observed(
    net: &EfficiencyNetwork,
    opts: &MclOptions,
    mut observe: impl FnMut(f64),
) -> Result<ClusterPartition> {
    if opts.inflation <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "inflation must exceed 1, got {}",
            opts.inflation
        )));
    }
    let n = net.n_nodes();
    let mut cols: Vec<Vec<(usize, f64)>> = net
        .adjacency()
        .into_iter()
        .enumerate()
        .map(|(j, mut rows)| {
            if opts.self_loops || rows.is_empty() {
                rows.push(j);
            }
            rows.sort_unstable();
            rows.into_iter().map(|i| (i, 1.0)).collect()
        })
        .collect();
    cols.shrink_to_fit();
    let mut m = SparseColumns { cols };
    m.normalize();
    let mut max_err = m.stochasticity_error();
    observe(max_err);

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < opts.max_iter {
        let mut next = m.square();
        next.inflate(opts.inflation, opts.prune);
        let err = next.stochasticity_error();
        observe(err);
        max_err = max_err.max(err);
        residual = next.max_change(&m);
        m = next;
        iterations += 1;
        if residual < opts.tol {
            break;
        }
    }
    if residual >= opts.tol {
        return Err(Error::NotConverged {
            iterations,
            residual,
        });
    }

    // Union each node with its dominant attractor.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut ambiguous = Vec::new();
    for (j, col) in m.cols.iter().enumerate() {
        let top = col.iter().map(|e| e.1).fold(0.0, f64::max);
        let mut near = col.iter().filter(|e| e.1 >= top - opts.tie_tol);
        let attractor = near.next().map_or(j, |e| e.0);
        if near.next().is_some() {
            ambiguous.push(j);
        }
        let (ra, rb) = (find(&mut parent, j), find(&mut parent, attractor));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();

    // Order clusters by size, then by smallest member.
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &r) in roots.iter().enumerate() {
        groups.entry(r).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let mut assignment = vec![0; n];
    for (id, g) in groups.iter().enumerate() {
        for &i in g {
            assignment[i] = id + 1;
        }
    }
    let populations: Vec<f64> = groups.iter().map(|g| g.len() as f64 / n as f64).collect();
    let noise_fraction = populations.iter().filter(|&&p| p < opts.noise_floor).sum();
    Ok(ClusterPartition {
        assignment,
        populations,
        noise_fraction,
        noise_floor: opts.noise_floor,
        iterations,
        residual,
        max_stochasticity_error: max_err,
        ambiguous_columns: ambiguous,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutCoordinates {
    pub positions: Vec<[f64; 2]>,
}

/// Fruchterman-Reingold layout on a unit-area canvas: repulsion `k^2/d`
/// between all pairs, attraction `d^2/k` along edges, displacement capped
/// by a temperature that cools linearly to zero. Centred on the origin.
pub fn fr_layout(net: &EfficiencyNetwork, iterations: usize, rng_seed: u64) -> LayoutCoordinates {
    let n = net.n_nodes();
    if n == 0 {
        return LayoutCoordinates { positions: vec![] };
    }
    let k = (1.0 / n as f64).sqrt();
    let mut rng = rng_from_seed(rng_seed);
    let mut pos: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5])
        .collect();
    let t0 = 0.1;
    let mut disp = vec![[0.0f64; 2]; n];
    for it in 0..iterations {
        let temp = t0 * (1.0 - it as f64 / iterations as f64);
        disp.iter_mut().for_each(|d| *d = [0.0, 0.0]);
        for i in 0..n {
            for j in i + 1..n {
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let d = (dx * dx + dy * dy).sqrt().max(1e-9);
                let f = k * k / d;
                disp[i][0] += dx / d * f;
                disp[i][1] += dy / d * f;
                disp[j][0] -= dx / d * f;
                disp[j][1] -= dy / d * f;
            }
        }
        for e in &net.edges {
            let dx = pos[e.a][0] - pos[e.b][0];
            let dy = pos[e.a][1] - pos[e.b][1];
            let d = (dx * dx + dy * dy).sqrt().max(1e-9);
            let f = d * d / k;
            disp[e.a][0] -= dx / d * f;
            disp[e.a][1] -= dy / d * f;
            disp[e.b][0] += dx / d * f;
            disp[e.b][1] += dy / d * f;
        }
        for (p, d) in pos.iter_mut().zip(&disp) {
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len > 0.0 {
                let step = len.min(temp);
                p[0] += d[0] / len * step;
                p[1] += d[1] / len * step;
            }
        }
    }
    let cx = pos.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = pos.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    for p in &mut pos {
        p[0] -= cx;
        p[1] -= cy;
    }
    LayoutCoordinates { positions: pos }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edges(list: &[(usize, usize)]) -> Vec<Edge> {
        list.iter()
            .map(|&(a, b)| Edge { a, b, s_squared: 0.0 })
            .collect()
    }

    pub(crate) fn two_cliques() -> EfficiencyNetwork {
        let mut e = Vec::new();
        for base in [0, 5] {
            for i in 0..5 {
                for j in i + 1..5 {
                    e.push((base + i, base + j));
                }
            }
        }
        e.push((4, 5));
        EfficiencyNetwork::from_edges(10, edges(&e), 1.0).unwrap()
    }

    #[test]
    fn from_edges_normalizes() {
        let net = EfficiencyNetwork::from_edges(3, edges(&[(2, 0), (0, 2), (1, 2)]), 1.0).unwrap();
        assert_eq!(net.edges.len(), 2);
        assert_eq!((net.edges[0].a, net.edges[0].b), (0, 2));
        assert!(EfficiencyNetwork::from_edges(3, edges(&[(1, 1)]), 1.0).is_err());
    }

    #[test]
    fn disjoint_triangles() {
        let net = EfficiencyNetwork::from_edges(6, edges(&[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]), 1.0)
            .unwrap();
        for p in [1.2, 1.4, 2.0, 3.0] {
            let opts = MclOptions { inflation: p, ..Default::default() };
            let part = mcl_cluster(&net, &opts).unwrap();
            assert_eq!(part.n_clusters(), 2, "p = {p}");
            assert_eq!(part.assignment[0], part.assignment[2]);
            assert_ne!(part.assignment[0], part.assignment[3]);
        }
    }

    #[test]
    fn bridged_cliques_split() {
        let part = mcl_cluster(&two_cliques(), &MclOptions::default()).unwrap();
        assert_eq!(part.n_clusters(), 2);
        assert!(part.assignment[..5].iter().all(|&c| c == part.assignment[0]));
        assert!(part.assignment[5..].iter().all(|&c| c == part.assignment[5]));
        assert_eq!(part.populations, vec![0.5, 0.5]);
    }

    #[test]
    fn loopless_variant_on_bridged_cliques() {
        let opts = MclOptions { self_loops: false, ..Default::default() };
        let part = mcl_cluster(&two_cliques(), &opts).unwrap();
        assert_eq!(part.n_clusters(), 2);
    }

    #[test]
    fn loopless_variant_splits_a_single_edge() {
        // C = [[0,1],[1,0]] squares to the identity: each node attracts itself.
        let net = EfficiencyNetwork::from_edges(2, edges(&[(0, 1)]), 1.0).unwrap();
        let loopless = MclOptions { self_loops: false, ..Default::default() };
        assert_eq!(mcl_cluster(&net, &loopless).unwrap().n_clusters(), 2);
        assert_eq!(mcl_cluster(&net, &MclOptions::default()).unwrap().n_clusters(), 1);
    }

    #[test]
    fn inflation_must_exceed_one() {
        let opts = MclOptions { inflation: 1.0, ..Default::default() };
        assert!(mcl_cluster(&two_cliques(), &opts).is_err());
    }

    #[test]
    fn isolated_nodes_are_singletons() {
        let net = EfficiencyNetwork::from_edges(3, vec![], 1.0).unwrap();
        let part = mcl_cluster(&net, &MclOptions::default()).unwrap();
        assert_eq!(part.n_clusters(), 3);
    }

    #[test]
    fn layout_single_node_at_origin() {
        let net = EfficiencyNetwork::from_edges(1, vec![], 1.0).unwrap();
        assert_eq!(fr_layout(&net, 50, 1).positions, vec![[0.0, 0.0]]);
    }

    #[test]
    fn layout_pair_rests_near_spring_length() {
        let net = EfficiencyNetwork::from_edges(2, edges(&[(0, 1)]), 1.0).unwrap();
        let l = fr_layout(&net, 500, 3);
        let [a, b] = [l.positions[0], l.positions[1]];
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let k = 0.5f64.sqrt();
        assert!((d - k).abs() < 0.05 * k, "distance {d} vs {k}");
    }

    #[test]
    fn layout_is_deterministic() {
        let net = two_cliques();
        assert_eq!(fr_layout(&net, 100, 9), fr_layout(&net, 100, 9));
    }
}

//! Structure-level characterization: robustness under displacement, site
//! activity, pair detection and removal, spectral shifts, pair landscape
//! scans, cluster superposition and class statistics.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, axial_coordinates, axis, displace_sites, remove_sites, SiteConfiguration, SiteSelection, Vec3,
};
use crate::network::{ClusterPartition, EfficiencyNetwork};
use crate::rng::{rng_from_seed, split_seed};
use crate::similarity::similarity_score;
use crate::transport::{build_hamiltonian, max_site_excitations_with, transport_efficiency_with, EvalOptions};

pub const INACTIVE_THRESHOLD: f64 = 0.075;
pub const BACKBONE_THRESHOLD: f64 = 0.25;
pub const DISPLACEMENT_CUBE: f64 = 0.05;
pub const ROBUSTNESS_TRIALS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub epsilon: f64,
    /// `epsilon` minus the mean perturbed efficiency; may be negative.
    pub delta_eps_rand: f64,
    /// Standard error of the perturbed mean.
    pub std_error: f64,
    pub n_trials: usize,
    pub trials: Option<Vec<f64>>,
}

/// Mean efficiency loss when every site is redrawn inside a cube of side
/// `cube_side` centred on its original position. Trial `t` uses
/// `split_seed(rng_seed, t)`.
pub fn random_displacement_loss(
    config: &SiteConfiguration,
    cube_side: f64,
    n_trials: usize,
    rng_seed: u64,
    opts: &EvalOptions,
    keep_trials: bool,
) -> Result<RobustnessReport> {
    if n_trials == 0 {
        return Err(Error::InvalidParameter("robustness needs at least one trial".into()));
    }
    let epsilon = transport_efficiency_with(config, opts)?.epsilon_max;
    let mut trials = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let d = displace_sites(config, cube_side, &SiteSelection::All, split_seed(rng_seed, t as u64));
        trials.push(transport_efficiency_with(&d, opts)?.epsilon_max);
    }
    let n = n_trials as f64;
    let mean = trials.iter().sum::<f64>() / n;
    let var = if n_trials > 1 {
        trials.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(RobustnessReport {
        epsilon,
        delta_eps_rand: epsilon - mean,
        std_error: (var / n).sqrt(),
        n_trials,
        trials: keep_trials.then_some(trials),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteActivity {
    pub maxima: Vec<f64>,
    pub active: Vec<bool>,
}

impl SiteActivity {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// A site is active when its population ever exceeds `threshold` inside the
/// window; input and output always count as active.
pub fn classify_active_sites(config: &SiteConfiguration, threshold: f64, opts: &EvalOptions) -> Result<SiteActivity> {
    let maxima = max_site_excitations_with(config, opts)?;
    Ok(activity_from_maxima(maxima, threshold))
}

pub fn activity_from_maxima(maxima: Vec<f64>, threshold: f64) -> SiteActivity {
    let n = maxima.len();
    let active = maxima
        .iter()
        .enumerate()
        .map(|(i, &m)| i == 0 || i + 1 == n || m > threshold)
        .collect();
    SiteActivity { maxima, active }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysis {
    /// Zero, one or (N = 8) two pairs.
    pub pairs: Vec<[usize; 2]>,
    /// Remaining sites, including input and output.
    pub backbone: Vec<usize>,
    pub activity_maxima: Vec<f64>,
    pub delta_eps_pair: Option<f64>,
}

impl PairAnalysis {
    pub fn has_pair(&self) -> bool {
        !self.pairs.is_empty()
    }

    pub fn pair_sites(&self) -> BTreeSet<usize> {
        self.pairs.iter().flatten().copied().collect()
    }
}

/// Pair search on precomputed activity maxima.
///
/// Among the candidate intermediates, the two with the smallest maxima form
/// a pair when both lie below `threshold` and no other candidate pair is
/// closer. For N = 8 the search repeats once on the remaining sites.
pub fn detect_pair_from_maxima(config: &SiteConfiguration, maxima: &[f64], threshold: f64) -> PairAnalysis {
    let n = config.n_sites();
    let rounds = match n {
        6 | 7 => 1,
        8 => 2,
        _ => 0,
    };
    let mut candidates: Vec<usize> = config.intermediate_indices().collect();
    let mut pairs = Vec::new();
    for _ in 0..rounds {
        if candidates.len() < 2 {
            break;
        }
        let mut by_activity = candidates.clone();
        by_activity.sort_by(|&a, &b| maxima[a].total_cmp(&maxima[b]).then(a.cmp(&b)));
        let (a, b) = (by_activity[0], by_activity[1]);
        if !(maxima[a] <= threshold && maxima[b] <= threshold) {
            break;
        }
        let d_ab = config.distance(a, b);
        let closest = candidates
            .iter()
            .enumerate()
            .flat_map(|(x, &i)| candidates[x + 1..].iter().map(move |&j| (i, j)))
            .all(|(i, j)| config.distance(i, j) >= d_ab);
        if !closest {
            break;
        }
        pairs.push([a.min(b), a.max(b)]);
        candidates.retain(|&i| i != a && i != b);
    }
    let taken: BTreeSet<usize> = pairs.iter().flatten().copied().collect();
    PairAnalysis {
        backbone: (0..n).filter(|i| !taken.contains(i)).collect(),
        pairs,
        activity_maxima: maxima.to_vec(),
        delta_eps_pair: None,
    }
}

pub fn detect_pair(config: &SiteConfiguration, threshold: f64, opts: &EvalOptions) -> Result<PairAnalysis> {
    let maxima = max_site_excitations_with(config, opts)?;
    Ok(detect_pair_from_maxima(config, &maxima, threshold))
}

/// Efficiency lost by deleting `pair`.
pub fn pair_removal_loss(config: &SiteConfiguration, pair: &BTreeSet<usize>, opts: &EvalOptions) -> Result<f64> {
    let reduced = remove_sites(config, pair)?;
    Ok(transport_efficiency_with(config, opts)?.epsilon_max - transport_efficiency_with(&reduced, opts)?.epsilon_max)
}

/// Detects pairs and fills in the removal loss when any is found.
pub fn analyze_pair(config: &SiteConfiguration, threshold: f64, opts: &EvalOptions) -> Result<PairAnalysis> {
    let mut pa = detect_pair(config, threshold, opts)?;
    if pa.has_pair() {
        pa.delta_eps_pair = Some(pair_removal_loss(config, &pa.pair_sites(), opts)?);
    }
    Ok(pa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalFit {
    pub base: f64,
    /// Largest distance of a difference from its nearest multiple, in units
    /// of `base`.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralShiftReport {
    /// Backbone-dominant eigenvalues of the full structure, ascending.
    pub lambdas_full: Vec<f64>,
    /// Eigenvalues of the structure without the pair, ascending.
    pub lambdas_reduced: Vec<f64>,
    pub v: f64,
    pub delta: f64,
    pub perturbative_shift: f64,
    /// `lambdas_full[i] - lambdas_reduced[i]`.
    pub shifts: Vec<f64>,
    /// `|shifts[0] + perturbative_shift| / |lambdas_reduced[0]|`: the
    /// triplet at `+delta` pushes the lowest backbone level down by about
    /// `|v|^2 / delta`.
    pub first_shift_error: f64,
    pub fundamental_full: FundamentalFit,
    pub fundamental_reduced: FundamentalFit,
}

fn eigen_sorted(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let e = m.symmetric_eigen();
    let mut idx: Vec<usize> = (0..e.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, idx.len(), |r, c| e.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

/// Grid sweep for the base frequency whose integer multiples
/// best match all pairwise eigenvalue differences.
pub fn fundamental_frequency(lambdas: &[f64]) -> FundamentalFit {
    let mut diffs = Vec::new();
    for i in 0..lambdas.len() {
        for j in i + 1..lambdas.len() {
            diffs.push((lambdas[j] - lambdas[i]).abs());
        }
    }
    let smallest = diffs.iter().copied().filter(|d| *d > 1e-12).fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return FundamentalFit {
            base: 0.0,
            max_deviation: 0.0,
        };
    }
    let deviation = |f: f64| {
        diffs
            .iter()
            .map(|d| {
                let q = d / f;
                (q - q.round()).abs()
            })
            .fold(0.0, f64::max)
    };
    // Bases between smallest/3 and smallest; finer bases fit trivially.
    let steps = 4000;
    let (lo, hi) = (smallest / 3.0, smallest * 1.02);
    let mut best = FundamentalFit {
        base: smallest,
        max_deviation: deviation(smallest),
    };
    for s in 0..=steps {
        let f = hi - (hi - lo) * s as f64 / steps as f64;
        let dev = deviation(f);
        if dev < best.max_deviation - 1e-12 {
            best = FundamentalFit { base: f, max_deviation: dev };
        }
    }
    best
}

/// Spectra with and without `pair`; the backbone-dominant eigenstates are
/// the N - 2 with the largest weight outside the pair.
pub fn spectral_pair_shift(config: &SiteConfiguration, pair: [usize; 2]) -> Result<SpectralShiftReport> {
    let n = config.n_sites();
    let set: BTreeSet<usize> = pair.into_iter().collect();
    if set.len() != 2 {
        return Err(Error::InvalidParameter("pair sites must differ".into()));
    }
    let reduced = remove_sites(config, &set)?;
    let h = build_hamiltonian(config)?;
    let (vals, vecs) = eigen_sorted(h.matrix().clone());
    let mut weight: Vec<(usize, f64)> = (0..n)
        .map(|k| (k, 1.0 - vecs[(pair[0], k)].powi(2) - vecs[(pair[1], k)].powi(2)))
        .collect();
    weight.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = weight[..n - 2].iter().map(|w| w.0).collect();
    chosen.sort_unstable();
    let lambdas_full: Vec<f64> = chosen.iter().map(|&k| vals[k]).collect();
    let (lambdas_reduced, _) = eigen_sorted(build_hamiltonian(&reduced)?.matrix().clone());

    let backbone: Vec<usize> = (0..n).filter(|i| !set.contains(i)).collect();
    let mut sq = 0.0;
    for &b in &backbone {
        for &p in &pair {
            sq += h.coupling(b, p).powi(2);
        }
    }
    let v = (sq / (2 * backbone.len()) as f64).sqrt();
    let delta = config.distance(pair[0], pair[1]).powi(-3);
    let shifts: Vec<f64> = lambdas_full.iter().zip(&lambdas_reduced).map(|(a, b)| a - b).collect();
    Ok(SpectralShiftReport {
        first_shift_error: (shifts[0] + v * v / delta).abs() / lambdas_reduced[0].abs(),
        shifts,
        fundamental_full: fundamental_frequency(&lambdas_full),
        fundamental_reduced: fundamental_frequency(&lambdas_reduced),
        lambdas_full,
        lambdas_reduced,
        v,
        delta,
        perturbative_shift: v * v / delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeScan {
    pub r_p: Vec<f64>,
    pub r_b: Vec<f64>,
    /// `epsilon[i][j]` at `(r_p[i], r_b[j])`; `None` where sites coincide.
    pub epsilon: Vec<Vec<Option<f64>>>,
    /// Unit vector from the backbone-intermediate midpoint to the pair.
    pub direction: [f64; 3],
    pub pair_axis: [f64; 3],
    pub skipped: Vec<(usize, usize)>,
}

impl LandscapeScan {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "r_p,r_b,epsilon")?;
        for (i, rp) in self.r_p.iter().enumerate() {
            for (j, rb) in self.r_b.iter().enumerate() {
                match self.epsilon[i][j] {
                    Some(e) => writeln!(w, "{rp},{rb},{e}")?,
                    None => writeln!(w, "{rp},{rb},")?,
                }
            }
        }
        Ok(())
    }
}

/// Pair placement used by [`pair_landscape_scan`]: midpoint at
/// `c + r_b * direction`, sites at `midpoint -/+ r_p / 2 * pair_axis`.
pub fn place_pair(c: Vec3, direction: Vec3, pair_axis: Vec3, r_p: f64, r_b: f64) -> [Vec3; 2] {
    let mid = c + direction * r_b;
    [mid - pair_axis * (0.5 * r_p), mid + pair_axis * (0.5 * r_p)]
}

/// Moves the pair of an N = 6 structure over a `(r_p, r_b)` grid while the
/// backbone stays fixed.
///
/// `r_b` is measured from the midpoint of the two backbone intermediates.
/// The pair midpoint moves along the component of its original offset
/// perpendicular to the input-output axis, and the pair keeps its original
/// orientation.
pub fn pair_landscape_scan(
    config: &SiteConfiguration,
    pair: [usize; 2],
    r_p_grid: &[f64],
    r_b_grid: &[f64],
    opts: &EvalOptions,
) -> Result<LandscapeScan> {
    use rayon::prelude::*;
    let n = config.n_sites();
    if n != 6 {
        return Err(Error::InvalidParameter(format!("landscape scan needs N = 6, got {n}")));
    }
    let backbone: Vec<usize> = config.intermediate_indices().filter(|i| !pair.contains(i)).collect();
    if backbone.len() != 2 || pair[0] == pair[1] {
        return Err(Error::InvalidParameter("pair must be two distinct intermediates".into()));
    }
    let p = config.positions();
    let c = 0.5 * (p[backbone[0]] + p[backbone[1]]);
    let mid = 0.5 * (p[pair[0]] + p[pair[1]]);
    let ax = axis().into_inner();
    let off = mid - c;
    let mut dir = off - ax * off.dot(&ax);
    if dir.norm() < 1e-12 {
        // Pair on the axis through c: any perpendicular works; take x - y.
        dir = Vec3::new(1.0, -1.0, 0.0);
    }
    let dir = dir.normalize();
    let pair_axis = (p[pair[1]] - p[pair[0]]).normalize();

    let cells: Vec<(usize, usize)> = (0..r_p_grid.len())
        .flat_map(|i| (0..r_b_grid.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<Result<Option<f64>>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let [a, b] = place_pair(c, dir, pair_axis, r_p_grid[i], r_b_grid[j]);
            let mut pos = p.to_vec();
            pos[pair[0]] = a;
            pos[pair[1]] = b;
            match SiteConfiguration::from_positions(pos) {
                Ok(cfg) => match transport_efficiency_with(&cfg, opts) {
                    Ok(r) => Ok(Some(r.epsilon_max)),
                    Err(Error::CoincidentSites { .. }) => Ok(None),
                    Err(e) => Err(e),
                },
                Err(Error::CoincidentSites { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut epsilon = vec![vec![None; r_b_grid.len()]; r_p_grid.len()];
    let mut skipped = Vec::new();
    for (&(i, j), v) in cells.iter().zip(values) {
        epsilon[i][j] = v?;
        if epsilon[i][j].is_none() {
            skipped.push((i, j));
        }
    }
    Ok(LandscapeScan {
        r_p: r_p_grid.to_vec(),
        r_b: r_b_grid.to_vec(),
        epsilon,
        direction: [dir.x, dir.y, dir.z],
        pair_axis: [pair_axis.x, pair_axis.y, pair_axis.z],
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCluster {
    /// Node index of the reference structure.
    pub reference: usize,
    pub members: Vec<usize>,
    /// Members aligned onto the reference, in `members` order.
    pub aligned: Vec<SiteConfiguration>,
    pub s_squared: Vec<f64>,
}

impl AlignedCluster {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "node,site,x,y,z")?;
        for (node, cfg) in self.members.iter().zip(&self.aligned) {
            for (k, p) in cfg.positions().iter().enumerate() {
                writeln!(w, "{node},{k},{},{},{}", p.x, p.y, p.z)?;
            }
        }
        Ok(())
    }

    /// RMS distance of the given sites from their cloud mean.
    pub fn cloud_rms(&self, sites: &[usize]) -> f64 {
        let mut sq = 0.0;
        let mut count = 0usize;
        for &k in sites {
            let mean = self.aligned.iter().map(|c| c.position(k)).sum::<Vec3>() / self.aligned.len() as f64;
            for c in &self.aligned {
                sq += (c.position(k) - mean).norm_squared();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (sq / count as f64).sqrt()
        }
    }
}

/// Aligns every member onto the member with the most in-cluster edges
/// (lowest index on ties). With `average_seed`, each aligned structure is
/// then averaged site by site with two other randomly chosen aligned
/// members.
pub fn superpose_cluster(
    structures: &[SiteConfiguration],
    network: &EfficiencyNetwork,
    members: &[usize],
    average_seed: Option<u64>,
) -> Result<AlignedCluster> {
    use rayon::prelude::*;
    if members.is_empty() {
        return Err(Error::InvalidParameter("cannot superpose an empty cluster".into()));
    }
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let mut degree: BTreeMap<usize, usize> = set.iter().map(|&m| (m, 0)).collect();
    for e in &network.edges {
        if set.contains(&e.a) && set.contains(&e.b) {
            *degree.get_mut(&e.a).unwrap() += 1;
            *degree.get_mut(&e.b).unwrap() += 1;
        }
    }
    let reference = degree
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&m, _)| m)
        .unwrap();
    let refc = &structures[reference];
    let aligned: Vec<(SiteConfiguration, f64)> = members
        .par_iter()
        .map(|&m| {
            if m == reference {
                return Ok((refc.clone(), 0.0));
            }
            let r = similarity_score(refc, &structures[m], None)?;
            let t = r.best_transform.expect("unbounded search always yields a transform");
            Ok((apply_transform(&structures[m], &t), r.s_squared))
        })
        .collect::<Result<_>>()?;
    let (mut aligned, s_squared): (Vec<_>, Vec<_>) = aligned.into_iter().unzip();

    if let (Some(seed), true) = (average_seed, members.len() >= 3) {
        let base = aligned.clone();
        for (i, slot) in aligned.iter_mut().enumerate() {
            let mut rng = rng_from_seed(split_seed(seed, i as u64));
            let others: Vec<usize> = (0..base.len()).filter(|&j| j != i).collect();
            let pick = sample(&mut rng, others.len(), 2);
            let (j, k) = (others[pick.index(0)], others[pick.index(1)]);
            let pos: Vec<Vec3> = (0..base[i].n_sites())
                .map(|s| (base[i].position(s) + base[j].position(s) + base[k].position(s)) / 3.0)
                .collect();
            *slot = SiteConfiguration::from_positions(pos)?;
        }
    }
    Ok(AlignedCluster {
        reference,
        members: members.to_vec(),
        aligned,
        s_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Pair,
    Inline,
    Sparse,
    Unclassified,
}

impl ClassLabel {
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Pair => "pair",
            ClassLabel::Inline => "inline",
            ClassLabel::Sparse => "sparse",
            ClassLabel::Unclassified => "unclassified",
        }
    }
}

/// Per-node inputs to [`class_statistics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub delta_eps_rand: f64,
    /// Time of maximal output population, in window units.
    pub t_star: f64,
    pub has_pair: bool,
    /// Mean distance of the intermediate sites from the input-output axis.
    pub mean_radial: f64,
    pub active_sites: usize,
}

impl NodeRecord {
    pub fn mean_radial_of(config: &SiteConfiguration) -> f64 {
        let r: Vec<f64> = config.intermediate_indices().map(|i| axial_coordinates(&config.position(i)).1).collect();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassOptions {
    pub mean_tolerance: f64,
    pub ks_threshold: f64,
    /// Groups without a pair majority are `inline` below this mean radial
    /// distance and `sparse` above it.
    pub inline_radial: f64,
}

impl Default for ClassOptions {
    fn default() -> Self {
        Self {
            mean_tolerance: 0.02,
            ks_threshold: 0.1,
            inline_radial: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: ClassLabel,
    pub clusters: BTreeSet<usize>,
    pub n_members: usize,
    /// Fraction of all nodes.
    pub population: f64,
    pub mean_delta_eps_rand: f64,
    pub max_delta_eps_rand: f64,
    pub fastest_t_star: f64,
    pub mean_t_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAssignment {
    /// Label per cluster id (index `id - 1`).
    pub cluster_labels: Vec<ClassLabel>,
    /// Groups of clusters merged by their robustness distributions.
    pub groups: Vec<BTreeSet<usize>>,
    pub classes: Vec<ClassSummary>,
}

impl ClassAssignment {
    pub fn node_label(&self, partition: &ClusterPartition, node: usize) -> ClassLabel {
        self.cluster_labels[partition.assignment[node] - 1]
    }

    pub fn class(&self, label: ClassLabel) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.label == label)
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
    }
    d
}

/// Histogram overlap coefficient (sum of bin-wise minima of the
/// normalized histograms) with bins of width `bin`.
pub fn overlap_coefficient(a: &[f64], b: &[f64], bin: f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let hist = |v: &[f64]| {
        let mut h: BTreeMap<i64, f64> = BTreeMap::new();
        for x in v {
            *h.entry((x / bin).floor() as i64).or_default() += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().map(|(k, pa)| pa.min(*hb.get(k).unwrap_or(&0.0))).sum()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Groups clusters by their robustness distributions and names the
/// resulting classes.
///
/// Two clusters merge when their mean `delta_eps_rand` differ by less than
/// `mean_tolerance` and their KS statistic is below `ks_threshold`. A merged
/// group is `pair` when most of its members carry a pair, otherwise
/// `inline` or `sparse` by the members' mean radial distance. Noise
/// clusters stay `unclassified`.
pub fn class_statistics(partition: &ClusterPartition, records: &[NodeRecord], opts: &ClassOptions) -> Result<ClassAssignment> {
    if records.len() != partition.assignment.len() {
        return Err(Error::DimensionMismatch {
            left: partition.assignment.len(),
            right: records.len(),
        });
    }
    let k = partition.n_clusters();
    let members: Vec<Vec<usize>> = (1..=k).map(|c| partition.members(c)).collect();
    let values: Vec<Vec<f64>> = members
        .iter()
        .map(|m| m.iter().map(|&i| records[i].delta_eps_rand).collect())
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let real: Vec<usize> = (0..k).filter(|&c| !partition.is_noise(c + 1)).collect();

    let mut parent: Vec<usize> = (0..k).collect();
    for (x, &a) in real.iter().enumerate() {
        for &b in &real[x + 1..] {
            if (mean(&values[a]) - mean(&values[b])).abs() < opts.mean_tolerance
                && ks_statistic(&values[a], &values[b]) < opts.ks_threshold
            {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &c in &real {
        groups.entry(find(&mut parent, c)).or_default().insert(c + 1);
    }

    let mut cluster_labels = vec![ClassLabel::Unclassified; k];
    for group in groups.values() {
        let nodes: Vec<usize> = group.iter().flat_map(|&c| members[c - 1].iter().copied()).collect();
        let pairs = nodes.iter().filter(|&&i| records[i].has_pair).count();
        let label = if 2 * pairs > nodes.len() {
            ClassLabel::Pair
        } else if nodes.iter().map(|&i| records[i].mean_radial).sum::<f64>() / (nodes.len() as f64) < opts.inline_radial {
            ClassLabel::Inline
        } else {
            ClassLabel::Sparse
        };
        for &c in group {
            cluster_labels[c - 1] = label;
        }
    }

    let total = records.len() as f64;
    let mut classes = Vec::new();
    for label in [ClassLabel::Pair, ClassLabel::Inline, ClassLabel::Sparse, ClassLabel::Unclassified] {
        let clusters: BTreeSet<usize> = (1..=k).filter(|&c| cluster_labels[c - 1] == label).collect();
        let nodes: Vec<usize> = clusters.iter().flat_map(|&c| members[c - 1].iter().copied()).collect();
        if nodes.is_empty() {
            continue;
        }
        let d: Vec<f64> = nodes.iter().map(|&i| records[i].delta_eps_rand).collect();
        let t: Vec<f64> = nodes.iter().map(|&i| records[i].t_star).collect();
        classes.push(ClassSummary {
            label,
            clusters,
            n_members: nodes.len(),
            population: nodes.len() as f64 / total,
            mean_delta_eps_rand: mean(&d),
            max_delta_eps_rand: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            fastest_t_star: t.iter().copied().fold(f64::INFINITY, f64::min),
            mean_t_star: mean(&t),
        });
    }
    Ok(ClassAssignment {
        cluster_labels,
        groups: groups.into_values().collect(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_random_structure;

    #[test]
    fn zero_cube_gives_zero_loss() {
        let c = sample_random_structure(6, 2).unwrap();
        let r = random_displacement_loss(&c, 0.0, 5, 1, &EvalOptions::default(), true).unwrap();
        assert_eq!(r.delta_eps_rand, 0.0);
        assert_eq!(r.std_error, 0.0);
        assert_eq!(r.trials.unwrap().len(), 5);
    }

    #[test]
    fn endpoints_always_active() {
        let c = sample_random_structure(5, 8).unwrap();
        let a = classify_active_sites(&c, 2.0, &EvalOptions::default()).unwrap();
        assert_eq!(a.active, vec![true, false, false, false, true]);
    }

    #[test]
    fn isolated_pair_eigenvalues() {
        let r_p: f64 = 0.3;
        let h = DMatrix::from_row_slice(2, 2, &[0.0, r_p.powi(-3), r_p.powi(-3), 0.0]);
        let (vals, _) = eigen_sorted(h);
        assert!((vals[0] + r_p.powi(-3)).abs() < 1e-9);
        assert!((vals[1] - r_p.powi(-3)).abs() < 1e-9);
    }

    #[test]
    fn no_pair_when_all_active() {
        let c = sample_random_structure(6, 3).unwrap();
        let maxima = vec![1.0, 0.5, 0.5, 0.5, 0.5, 0.9];
        let pa = detect_pair_from_maxima(&c, &maxima, INACTIVE_THRESHOLD);
        assert!(!pa.has_pair());
        assert_eq!(pa.backbone, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn pair_must_be_closest() {
        let c = SiteConfiguration::with_intermediates(&[
            Vec3::new(0.3, 0.3, 0.3),
            Vec3::new(0.5, 0.5, 0.1),
            Vec3::new(0.55, 0.5, 0.1),
            Vec3::new(0.7, 0.7, 0.7),
        ])
        .unwrap();
        let pa = detect_pair_from_maxima(&c, &[1.0, 0.5, 0.01, 0.02, 0.5, 0.9], INACTIVE_THRESHOLD);
        assert_eq!(pa.pairs, vec![[2, 3]]);
        assert_eq!(pa.backbone, vec![0, 1, 4, 5]);
        // Lowest-activity sites not mutually closest: no pair.
        let pa = detect_pair_from_maxima(&c, &[1.0, 0.01, 0.02, 0.5, 0.5, 0.9], INACTIVE_THRESHOLD);
        assert!(!pa.has_pair());
    }

    #[test]
    fn fundamental_fit_on_exact_multiples() {
        let f = fundamental_frequency(&[-1.0, -0.4, 0.2, 1.4]);
        assert!(f.max_deviation < 1e-3, "{f:?}");
        assert!((f.base - 0.6).abs() < 1e-3 || (f.base - 0.3).abs() < 1e-3 || (f.base - 0.2).abs() < 1e-3);
    }

    #[test]
    fn ks_and_overlap() {
        let a = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&a, &[1.0, 2.0]), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0], &[2.5]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((overlap_coefficient(&a, &a, 0.05) - 1.0).abs() < 1e-12);
        assert_eq!(overlap_coefficient(&a, &[5.0], 0.05), 0.0);
    }
}

//! Coherent single-excitation transport.
//!
//! Natural units throughout: hbar = J = r0 = 1. The hopping matrix has
//! entries `1 / |r_i - r_j|^3` and a zero diagonal, and the excitation starts
//! on the input site. Efficiency is the largest output population reached
//! within the window `tau`, located on a uniform grid and refined by a
//! golden-section search around the best grid point.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{SiteConfiguration, MIN_SITE_DISTANCE};

/// Default number of grid intervals on `[0, window * tau]`.
pub const GRID_INTERVALS: usize = 2048;

/// Golden-section stopping width, in units of tau.
pub const REFINE_TOLERANCE: f64 = 1e-6;

/// Real symmetric hopping matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HoppingHamiltonian {
    matrix: DMatrix<f64>,
}

impl HoppingHamiltonian {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidParameter("hamiltonian must be square".into()));
        }
        Ok(Self { matrix })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.amax()
    }

    pub fn diagonalize(&self) -> SpectralDecomposition {
        SpectralDecomposition::of(self)
    }
}

pub fn build_hamiltonian(config: &SiteConfiguration) -> Result<HoppingHamiltonian> {
    let n = config.n_sites();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = config.distance(i, j);
            if d < MIN_SITE_DISTANCE {
                return Err(Error::CoincidentSites { i, j, distance: d });
            }
            let v = 1.0 / (d * d * d);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(HoppingHamiltonian { matrix: m })
}

/// Eigenvalues in ascending order with the matching orthonormal columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn of(h: &HoppingHamiltonian) -> Self {
        let eig = SymmetricEigen::new(h.matrix.clone());
        let n = h.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        Self {
            eigenvalues,
            eigenvectors,
        }
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues));
        v * lambda * v.transpose()
    }
}

/// `tau = (1/10) * 2 pi * r_io^3` with `r_io` the input-output distance.
pub fn window_tau(config: &SiteConfiguration) -> f64 {
    let r = config.input_output_distance();
    0.2 * PI * r * r * r
}

/// `<to| e^{-iHt} |from>` at each time.
pub fn amplitude_trajectory(
    spec: &SpectralDecomposition,
    from: usize,
    to: usize,
    times: &[f64],
) -> Vec<Complex64> {
    let v = &spec.eigenvectors;
    let weights: Vec<f64> = (0..spec.n()).map(|k| v[(to, k)] * v[(from, k)]).collect();
    times
        .iter()
        .map(|&t| {
            spec.eigenvalues
                .iter()
                .zip(&weights)
                .map(|(&l, &w)| Complex64::from_polar(w, -l * t))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Window length as a multiple of tau.
    pub window: f64,
    pub grid_intervals: usize,
    /// Golden-section stopping width in units of tau.
    pub refine_tolerance: f64,
    pub keep_trajectory: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            window: 1.0,
            grid_intervals: GRID_INTERVALS,
            refine_tolerance: REFINE_TOLERANCE,
            keep_trajectory: false,
        }
    }
}

/// Populations of every site on the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Sample times in units of tau.
    pub times: Vec<f64>,
    /// `populations[j][k]` is site `k` at `times[j]`.
    pub populations: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn site(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.populations.iter().map(move |row| row[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    pub epsilon_max: f64,
    /// Time of the maximum in units of tau.
    pub t_star: f64,
    pub epsilon_int: Option<f64>,
    pub trajectory: Option<Trajectory>,
    /// Window unit in hbar/J.
    pub tau: f64,
}

/// Single-excitation propagator from the input site, in the eigenbasis.
#[derive(Debug, Clone)]
pub struct Propagator {
    eigenvalues: Vec<f64>,
    /// `weights[k][m] = V[k,m] * V[in,m]`.
    weights: Vec<Vec<f64>>,
    tau: f64,
}

impl Propagator {
    pub fn new(config: &SiteConfiguration) -> Result<Self> {
        let h = build_hamiltonian(config)?;
        Ok(Self::from_spectrum(&h.diagonalize(), window_tau(config)))
    }

    pub fn from_spectrum(spec: &SpectralDecomposition, tau: f64) -> Self {
        let n = spec.n();
        let v = &spec.eigenvectors;
        let weights = (0..n)
            .map(|k| (0..n).map(|m| v[(k, m)] * v[(0, m)]).collect())
            .collect();
        Self {
            eigenvalues: spec.eigenvalues.clone(),
            weights,
            tau,
        }
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Population of site `k` at absolute time `t`.
    pub fn population(&self, k: usize, t: f64) -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (&l, &w) in self.eigenvalues.iter().zip(&self.weights[k]) {
            let (s, c) = (l * t).sin_cos();
            re += w * c;
            im -= w * s;
        }
        re * re + im * im
    }

    /// Populations of `sites` on `intervals + 1` equally spaced times over
    /// `[0, t_end]`. Phasors advance by multiplication and are re-seeded
    /// exactly every 256 steps.
    fn grid(&self, sites: &[usize], t_end: f64, intervals: usize) -> Vec<Vec<f64>> {
        let n = self.n();
        let dt = t_end / intervals as f64;
        let step: Vec<Complex64> = self
            .eigenvalues
            .iter()
            .map(|&l| Complex64::from_polar(1.0, -l * dt))
            .collect();
        let mut phase = vec![Complex64::new(1.0, 0.0); n];
        let mut out = vec![Vec::with_capacity(intervals + 1); sites.len()];
        for j in 0..=intervals {
            if j > 0 {
                if j % 256 == 0 {
                    let t = j as f64 * dt;
                    for (p, &l) in phase.iter_mut().zip(&self.eigenvalues) {
                        *p = Complex64::from_polar(1.0, -l * t);
                    }
                } else {
                    for (p, s) in phase.iter_mut().zip(&step) {
                        *p *= s;
                    }
                }
            }
            for (col, &k) in out.iter_mut().zip(sites) {
                let amp: Complex64 = phase.iter().zip(&self.weights[k]).map(|(p, &w)| p * w).sum();
                col.push(amp.norm_sqr());
            }
        }
        out
    }

    /// Grid maximum of site `k`'s population refined by golden section.
    /// Returns `(value, absolute time)`.
    fn refine_max(&self, k: usize, samples: &[f64], t_end: f64, tol: f64) -> (f64, f64) {
        let intervals = samples.len() - 1;
        let dt = t_end / intervals as f64;
        let (best_j, &best) = samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty grid");
        let lo = best_j.saturating_sub(1) as f64 * dt;
        let hi = (best_j + 1).min(intervals) as f64 * dt;
        let (t, v) = golden_max(|t| self.population(k, t), lo, hi, tol);
        if v > best {
            (v, t)
        } else {
            (best, best_j as f64 * dt)
        }
    }

    pub fn evaluate(&self, opts: &EvalOptions) -> TransportResult {
        let out = self.n() - 1;
        let t_end = opts.window * self.tau;
        let tol = opts.refine_tolerance * self.tau;
        let intervals = opts.grid_intervals.max(2);
        let (p_out, trajectory) = if opts.keep_trajectory {
            let sites: Vec<usize> = (0..self.n()).collect();
            let cols = self.grid(&sites, t_end, intervals);
            let times = (0..=intervals)
                .map(|j| opts.window * j as f64 / intervals as f64)
                .collect();
            let populations = (0..=intervals)
                .map(|j| cols.iter().map(|c| c[j]).collect())
                .collect();
            (cols[out].clone(), Some(Trajectory { times, populations }))
        } else {
            (self.grid(&[out], t_end, intervals).pop().unwrap(), None)
        };
        let (eps, t) = self.refine_max(out, &p_out, t_end, tol);
        let eps_int = time_average(&p_out);
        TransportResult {
            epsilon_max: eps.min(1.0),
            t_star: t / self.tau,
            epsilon_int: Some(eps_int.clamp(0.0, 1.0)),
            trajectory,
            tau: self.tau,
        }
    }

    pub fn site_maxima(&self, opts: &EvalOptions) -> Vec<f64> {
        let t_end = opts.window * self.tau;
        let tol = opts.refine_tolerance * self.tau;
        let sites: Vec<usize> = (0..self.n()).collect();
        let cols = self.grid(&sites, t_end, opts.grid_intervals.max(2));
        cols.iter()
            .enumerate()
            .map(|(k, c)| self.refine_max(k, c, t_end, tol).0.min(1.0))
            .collect()
    }
}

/// Golden-section search for the maximum of `f` on `[lo, hi]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = f(mid);
    [(x1, f1), (x2, f2), (mid, fm)]
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// Mean of uniformly sampled values over their span (composite Simpson when
/// the interval count is even, trapezoid otherwise).
pub fn time_average(samples: &[f64]) -> f64 {
    let m = samples.len().saturating_sub(1);
    if m == 0 {
        return samples.first().copied().unwrap_or(0.0);
    }
    if m % 2 == 0 {
        let mut s = samples[0] + samples[m];
        for (j, &v) in samples.iter().enumerate().take(m).skip(1) {
            s += if j % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        s / (3.0 * m as f64)
    } else {
        let inner: f64 = samples[1..m].iter().sum();
        (inner + 0.5 * (samples[0] + samples[m])) / m as f64
    }
}

pub fn transport_efficiency(config: &SiteConfiguration) -> Result<TransportResult> {
    transport_efficiency_with(config, &EvalOptions::default())
}

pub fn transport_efficiency_with(config: &SiteConfiguration, opts: &EvalOptions) -> Result<TransportResult> {
    Ok(Propagator::new(config)?.evaluate(opts))
}

/// `(1/T) * integral_0^T p_out(t) dt` over the window. No sink term.
pub fn integral_efficiency(config: &SiteConfiguration) -> Result<f64> {
    Ok(transport_efficiency(config)?.epsilon_int.unwrap_or(0.0))
}

/// Largest population each site reaches within the window.
pub fn max_site_excitations(config: &SiteConfiguration) -> Result<Vec<f64>> {
    max_site_excitations_with(config, &EvalOptions::default())
}

pub fn max_site_excitations_with(config: &SiteConfiguration, opts: &EvalOptions) -> Result<Vec<f64>> {
    Ok(Propagator::new(config)?.site_maxima(opts))
}

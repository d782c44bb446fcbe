//! Site-dephasing master equation with constant or time-dependent rates.
//!
//! With site projectors as jump operators the dissipator only damps
//! coherences, so the equation reduces to
//! `d rho/dt = -i[rho, H] - gamma(t) (rho - diag rho)`.
//! The state is integrated as `rho = R + iI` with `R` symmetric and `I`
//! antisymmetric, which keeps it exactly Hermitian.
//!
//! Energies are in units of the coupling `J`, times in `hbar/J`. Bath
//! parameters quoted in cm^-1 and K go through [`UnitBridge`].

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SiteConfiguration;
use crate::quadrature::integrate;
use crate::transport::{build_hamiltonian, window_tau, SpectralDecomposition, Trajectory, TransportResult};

pub const QUADRATURE_TOLERANCE: f64 = 1e-8;
/// Upper integration limit in units of the cutoff frequency.
pub const CUTOFF_MULTIPLE: f64 = 50.0;
const MAX_QUADRATURE_INTERVALS: usize = 4000;

/// Conversion of spectroscopic units into the dimensionless `J = 1` system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitBridge {
    /// Coupling scale `J` in cm^-1.
    pub coupling_wavenumber: f64,
}

/// Boltzmann constant in cm^-1 / K.
pub const BOLTZMANN_WAVENUMBER: f64 = 0.695_034_800;

impl Default for UnitBridge {
    fn default() -> Self {
        Self {
            coupling_wavenumber: 100.0,
        }
    }
}

impl UnitBridge {
    pub fn energy(&self, wavenumber: f64) -> f64 {
        wavenumber / self.coupling_wavenumber
    }

    pub fn temperature(&self, kelvin: f64) -> f64 {
        BOLTZMANN_WAVENUMBER * kelvin / self.coupling_wavenumber
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub data: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn pure_site(n: usize, k: usize) -> Self {
        let mut data = DMatrix::zeros(n, n);
        data[(k, k)] = Complex64::new(1.0, 0.0);
        Self { data }
    }

    fn from_parts(n: usize, re: &[f64], im: &[f64]) -> Self {
        Self {
            data: DMatrix::from_fn(n, n, |i, j| Complex64::new(re[i * n + j], im[i * n + j])),
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.data.trace()
    }

    pub fn population(&self, k: usize) -> f64 {
        self.data[(k, k)].re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.n()).map(|k| self.population(k)).collect()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = &self.data - self.data.adjoint();
        d.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.data + self.data.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Coherent,
    HakenStrobl,
    OhmicTcl2,
    NonMarkovian,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Coherent => "coherent",
            NoiseKind::HakenStrobl => "haken_strobl",
            NoiseKind::OhmicTcl2 => "ohmic_tcl2",
            NoiseKind::NonMarkovian => "non_markovian",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "coherent" => NoiseKind::Coherent,
            "haken_strobl" | "hs" => NoiseKind::HakenStrobl,
            "ohmic_tcl2" | "ohmic" => NoiseKind::OhmicTcl2,
            "non_markovian" | "nm" => NoiseKind::NonMarkovian,
            other => return Err(Error::InvalidParameter(format!("unknown noise model {other:?}"))),
        })
    }
}

/// Uniform time grid `[0, t_end]` for rate tables, in `hbar/J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateGrid {
    pub t_end: f64,
    pub intervals: usize,
}

impl RateGrid {
    pub fn new(t_end: f64, intervals: usize) -> Result<Self> {
        if !(t_end > 0.0) || intervals == 0 {
            return Err(Error::InvalidParameter(format!(
                "rate grid needs t_end > 0 and intervals > 0, got {t_end}, {intervals}"
            )));
        }
        Ok(Self { t_end, intervals })
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = self.t_end / self.intervals as f64;
        (0..=self.intervals).map(move |i| i as f64 * dt)
    }
}

/// Tabulated `gamma(t)`, linearly interpolated, held constant past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl RateTable {
    pub fn tabulate(grid: &RateGrid, f: impl Fn(f64) -> Result<f64> + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let times: Vec<f64> = grid.times().collect();
        let values = times.par_iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dt: grid.t_end / grid.intervals as f64,
            values,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.dt * (self.values.len() - 1) as f64
    }

    pub fn at(&self, t: f64) -> f64 {
        let x = (t / self.dt).max(0.0);
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let f = x - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `sin(x t) / x`, continuous at `x = 0`.
fn sin_over(x: f64, t: f64) -> f64 {
    let xt = x * t;
    if xt.abs() < 1e-4 {
        t * (1.0 - xt * xt / 6.0)
    } else {
        xt.sin() / x
    }
}

/// Ohmic spectral density `lambda / omega_c * w * exp(-w / omega_c)`.
pub fn ohmic_density(w: f64, lambda: f64, omega_c: f64) -> f64 {
    lambda / omega_c * w * (-w / omega_c).exp()
}

/// `coth(w / 2T) / w`, which multiplies `J(w)` without the removable pole.
fn coth_over(w: f64, temperature: f64) -> f64 {
    let x = w / (2.0 * temperature);
    if x < 1e-6 {
        2.0 * temperature / (w * w) + 1.0 / (6.0 * temperature)
    } else {
        1.0 / (x.tanh() * w)
    }
}

/// Thermal factor `w^3 / (4 pi^3) / (exp(w / T) - 1)`.
pub fn occupation(w: f64, temperature: f64) -> f64 {
    w.powi(3) / (4.0 * PI.powi(3)) / (w / temperature).exp_m1()
}

fn quadrature_at(t: f64, f: impl Fn(f64) -> f64, upper: f64) -> Result<f64> {
    integrate(f, 0.0, upper, QUADRATURE_TOLERANCE, MAX_QUADRATURE_INTERVALS)
        .map(|r| r.value)
        .map_err(|e| match e {
            Error::Quadrature { residual, .. } => Error::Quadrature { t, residual },
            other => other,
        })
}

/// `2 * int_0^inf J(w) coth(w / 2T) sin(w t) / w dw`.
pub fn ohmic_rate_at(t: f64, lambda: f64, omega_c: f64, temperature: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let f = |w: f64| {
        if w == 0.0 {
            // J(w) coth(w/2T) / w * sin(w t) -> 2 T lambda / omega_c * t
            return 2.0 * 2.0 * temperature * lambda / omega_c * t;
        }
        2.0 * ohmic_density(w, lambda, omega_c) * w * coth_over(w, temperature) * sin_over(w, t)
    };
    quadrature_at(t, f, CUTOFF_MULTIPLE * omega_c)
}

/// Long-time limit of [`ohmic_rate_at`].
pub fn ohmic_rate_limit(lambda: f64, omega_c: f64, temperature: f64) -> f64 {
    2.0 * PI * lambda * temperature / omega_c
}

/// Single-channel rate at transition frequency `omega`.
pub fn non_markovian_rate_at(t: f64, omega: f64, lambda: f64, omega_c: f64, temperature: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let f = |w: f64| {
        if w == 0.0 {
            return 0.0;
        }
        let n = occupation(w, temperature);
        2.0 * ohmic_density(w, lambda, omega_c) * (n * sin_over(omega + w, t) + (n + 1.0) * sin_over(omega - w, t))
    };
    quadrature_at(t, f, CUTOFF_MULTIPLE * omega_c)
}

/// Bath parameters in `J = 1` units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathParameters {
    pub reorganization: f64,
    pub omega_c: f64,
    pub temperature: f64,
    /// Channel frequency; used by the non-Markovian model only.
    pub omega_channel: f64,
}

impl BathParameters {
    /// Time-dependent TCL2 parameters: `omega_c = 30 cm^-1`, `T = 10 K`.
    /// The reorganization energy is set later by calibration.
    pub fn ohmic_default(bridge: &UnitBridge) -> Self {
        Self {
            reorganization: f64::NAN,
            omega_c: bridge.energy(30.0),
            temperature: bridge.temperature(10.0),
            omega_channel: 0.0,
        }
    }

    /// `omega = 150`, `lambda = 30`, `omega_c = 10` (cm^-1), `T = 10 K`.
    pub fn non_markovian_default(bridge: &UnitBridge) -> Self {
        Self {
            reorganization: bridge.energy(30.0),
            omega_c: bridge.energy(10.0),
            temperature: bridge.temperature(10.0),
            omega_channel: bridge.energy(150.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRateModel {
    pub kind: NoiseKind,
    /// Constant rate in units of the evolution time unit (Haken-Strobl).
    pub gamma: f64,
    pub bath: Option<BathParameters>,
    /// `gamma(t)` in `J/hbar` against absolute time.
    pub table: Option<Arc<RateTable>>,
}

impl NoiseRateModel {
    pub fn coherent() -> Self {
        Self {
            kind: NoiseKind::Coherent,
            gamma: 0.0,
            bath: None,
            table: None,
        }
    }

    /// Rate at absolute time `t` when the time unit is `unit` (in `hbar/J`).
    pub fn rate_at(&self, t: f64, unit: f64) -> f64 {
        match self.kind {
            NoiseKind::Coherent => 0.0,
            NoiseKind::HakenStrobl => self.gamma / unit,
            _ => self.table.as_ref().map_or(0.0, |tab| tab.at(t)),
        }
    }

    /// `(t / unit, gamma * unit)` rows.
    pub fn write_csv(&self, mut w: impl Write, unit: f64, grid: &RateGrid) -> Result<()> {
        writeln!(w, "t_over_tau,gamma_tau")?;
        for t in grid.times() {
            writeln!(w, "{},{}", t / unit, self.rate_at(t, unit) * unit)?;
        }
        Ok(())
    }
}

/// Constant dephasing with `gamma` in units of 1/tau.
pub fn haken_strobl_rate(gamma: f64) -> Result<NoiseRateModel> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("dephasing rate must be >= 0, got {gamma}")));
    }
    Ok(NoiseRateModel {
        kind: NoiseKind::HakenStrobl,
        gamma,
        bath: None,
        table: None,
    })
}

/// Ohmic TCL2 rate. With `gamma_limit = Some(g)` the reorganization energy
/// is chosen so that `gamma(inf) = g / unit`.
pub fn ohmic_tcl2_rate(
    mut bath: BathParameters,
    gamma_limit: Option<f64>,
    unit: f64,
    grid: &RateGrid,
) -> Result<NoiseRateModel> {
    if !(bath.omega_c > 0.0) || !(bath.temperature > 0.0) {
        return Err(Error::InvalidParameter("ohmic bath needs omega_c > 0 and T > 0".into()));
    }
    if let Some(g) = gamma_limit {
        bath.reorganization = g / unit * bath.omega_c / (2.0 * PI * bath.temperature);
    }
    if !bath.reorganization.is_finite() {
        return Err(Error::InvalidParameter("ohmic bath needs a reorganization energy".into()));
    }
    let table = RateTable::tabulate(grid, |t| {
        ohmic_rate_at(t, bath.reorganization, bath.omega_c, bath.temperature)
    })?;
    Ok(NoiseRateModel {
        kind: NoiseKind::OhmicTcl2,
        gamma: 0.0,
        bath: Some(bath),
        table: Some(Arc::new(table)),
    })
}

pub fn non_markovian_rate(bath: BathParameters, grid: &RateGrid) -> Result<NoiseRateModel> {
    if !(bath.omega_channel > 0.0 && bath.reorganization > 0.0 && bath.omega_c > 0.0 && bath.temperature > 0.0) {
        return Err(Error::InvalidParameter("non-Markovian bath parameters must be positive".into()));
    }
    let table = RateTable::tabulate(grid, |t| {
        non_markovian_rate_at(t, bath.omega_channel, bath.reorganization, bath.omega_c, bath.temperature)
    })?;
    Ok(NoiseRateModel {
        kind: NoiseKind::NonMarkovian,
        gamma: 0.0,
        bath: Some(bath),
        table: Some(Arc::new(table)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOptions {
    /// Time unit as a multiple of `window_tau(config)`; also the unit of
    /// Haken-Strobl rates and of the reported `t_star`.
    pub window: f64,
    /// Length of the run in time units.
    pub duration: f64,
    pub steps_per_unit: usize,
    /// Largest allowed `h * (spectral span + |gamma|)`.
    pub max_phase_step: f64,
    pub trace_tolerance: f64,
    /// Rerun with twice the steps and fail if epsilon moves by more than
    /// `convergence_tolerance`.
    pub check_convergence: bool,
    pub convergence_tolerance: f64,
    /// Record populations every this many steps (0 disables).
    pub record_stride: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            window: 1.0,
            duration: 1.0,
            steps_per_unit: 5000,
            max_phase_step: 0.2,
            trace_tolerance: 1e-6,
            check_convergence: false,
            convergence_tolerance: 1e-6,
            record_stride: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoisyEvolution {
    pub result: TransportResult,
    pub final_state: DensityMatrix,
    pub steps: usize,
    pub max_trace_drift: f64,
}

struct Liouvillian<'a> {
    n: usize,
    h: &'a [f64],
    tmp: Vec<f64>,
}

impl Liouvillian<'_> {
    /// Writes `dR`, `dI` for the split state.
    fn apply(&mut self, re: &[f64], im: &[f64], gamma: f64, dre: &mut [f64], dim: &mut [f64]) {
        let n = self.n;
        match n {
            2 => commutator::<2>(re, im, self.h, dre, dim),
            3 => commutator::<3>(re, im, self.h, dre, dim),
            4 => commutator::<4>(re, im, self.h, dre, dim),
            5 => commutator::<5>(re, im, self.h, dre, dim),
            6 => commutator::<6>(re, im, self.h, dre, dim),
            7 => commutator::<7>(re, im, self.h, dre, dim),
            8 => commutator::<8>(re, im, self.h, dre, dim),
            _ => self.commutator_any(re, im, dre, dim),
        }
        if gamma != 0.0 {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        dre[i * n + j] -= gamma * re[i * n + j];
                        dim[i * n + j] -= gamma * im[i * n + j];
                    }
                }
            }
        }
    }

    fn commutator_any(&mut self, re: &[f64], im: &[f64], dre: &mut [f64], dim: &mut [f64]) {
        let n = self.n;
        // dI = -(R H - H R) = -(RH - (RH)^T)
        matmul(n, re, self.h, &mut self.tmp);
        for i in 0..n {
            for j in 0..n {
                dim[i * n + j] = self.tmp[j * n + i] - self.tmp[i * n + j];
            }
        }
        // dR = I H - H I = IH + (IH)^T
        matmul(n, im, self.h, &mut self.tmp);
        for i in 0..n {
            for j in 0..n {
                dre[i * n + j] = self.tmp[i * n + j] + self.tmp[j * n + i];
            }
        }
    }
}

/// Same as [`Liouvillian::commutator_any`] for a fixed size, using the
/// symmetry of `R` and `H` and the antisymmetry of `I`.
fn commutator<const N: usize>(re: &[f64], im: &[f64], h: &[f64], dre: &mut [f64], dim: &mut [f64]) {
    let (re, im, h) = (&re[..N * N], &im[..N * N], &h[..N * N]);
    let (dre, dim) = (&mut dre[..N * N], &mut dim[..N * N]);
    for i in 0..N {
        for j in i..N {
            let (mut a, mut b) = (0.0, 0.0);
            for k in 0..N {
                a += im[i * N + k] * h[j * N + k] + im[j * N + k] * h[i * N + k];
                b += re[j * N + k] * h[i * N + k] - re[i * N + k] * h[j * N + k];
            }
            dre[i * N + j] = a;
            dre[j * N + i] = a;
            dim[i * N + j] = b;
            dim[j * N + i] = -b;
        }
    }
}

fn matmul(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        for k in 0..n {
            let x = a[i * n + k];
            for (o, y) in row.iter_mut().zip(&b[k * n..(k + 1) * n]) {
                *o += x * y;
            }
        }
    }
}

fn axpy(out: &mut [f64], base: &[f64], h: f64, d: &[f64]) {
    for ((o, b), x) in out.iter_mut().zip(base).zip(d) {
        *o = b + h * x;
    }
}

/// Integrates from `|in><in|` and reports the maximal output population.
pub fn evolve_master_equation(
    config: &SiteConfiguration,
    model: &NoiseRateModel,
    opts: &EvolveOptions,
) -> Result<NoisyEvolution> {
    let first = evolve_steps(config, model, opts, None)?;
    if opts.check_convergence {
        let second = evolve_steps(config, model, opts, Some(2 * first.steps))?;
        let diff = (second.result.epsilon_max - first.result.epsilon_max).abs();
        if diff >= opts.convergence_tolerance {
            return Err(Error::NotConverged {
                iterations: second.steps,
                residual: diff,
            });
        }
    }
    Ok(first)
}

struct Stepper<'a> {
    lv: Liouvillian<'a>,
    model: &'a NoiseRateModel,
    unit: f64,
    k: [Vec<f64>; 8],
    sr: Vec<f64>,
    si: Vec<f64>,
}

impl Stepper<'_> {
    /// One classical RK4 step of length `h` from time `t`.
    fn step(&mut self, t: f64, h: f64, re: &mut [f64], im: &mut [f64]) {
        let g0 = self.model.rate_at(t, self.unit);
        let gm = self.model.rate_at(t + 0.5 * h, self.unit);
        let g1 = self.model.rate_at(t + h, self.unit);
        let [k1r, k1i, k2r, k2i, k3r, k3i, k4r, k4i] = &mut self.k;
        let (sr, si) = (&mut self.sr, &mut self.si);
        self.lv.apply(re, im, g0, k1r, k1i);
        axpy(sr, re, 0.5 * h, k1r);
        axpy(si, im, 0.5 * h, k1i);
        self.lv.apply(sr, si, gm, k2r, k2i);
        axpy(sr, re, 0.5 * h, k2r);
        axpy(si, im, 0.5 * h, k2i);
        self.lv.apply(sr, si, gm, k3r, k3i);
        axpy(sr, re, h, k3r);
        axpy(si, im, h, k3i);
        self.lv.apply(sr, si, g1, k4r, k4i);
        for idx in 0..re.len() {
            re[idx] += h / 6.0 * (k1r[idx] + 2.0 * k2r[idx] + 2.0 * k3r[idx] + k4r[idx]);
            im[idx] += h / 6.0 * (k1i[idx] + 2.0 * k2i[idx] + 2.0 * k3i[idx] + k4i[idx]);
        }
    }
}

/// Substeps per step when re-integrating around the coarse maximum.
const REFINE_SUBSTEPS: usize = 64;

/// Vertex of the parabola through three equally spaced samples, if it lies
/// within one spacing of the middle one.
fn parabola_peak(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let denom = a - 2.0 * b + c;
    if !(denom < 0.0) {
        return None;
    }
    let off = 0.5 * (a - c) / denom;
    (off.abs() <= 1.0).then(|| (b - 0.25 * (a - c) * off, off))
}

fn evolve_steps(
    config: &SiteConfiguration,
    model: &NoiseRateModel,
    opts: &EvolveOptions,
    forced_steps: Option<usize>,
) -> Result<NoisyEvolution> {
    if !(opts.window > 0.0 && opts.duration > 0.0) || opts.steps_per_unit == 0 {
        return Err(Error::InvalidParameter("window, duration and steps must be positive".into()));
    }
    let ham = build_hamiltonian(config)?;
    let n = ham.n();
    let tau = window_tau(config);
    let unit = opts.window * tau;
    let t_end = opts.duration * unit;

    let steps = forced_steps.unwrap_or_else(|| {
        let spec = SpectralDecomposition::of(&ham);
        let span = spec.eigenvalues[n - 1] - spec.eigenvalues[0];
        let gmax = match (&model.kind, &model.table) {
            (NoiseKind::HakenStrobl, _) => model.gamma / unit,
            (_, Some(tab)) => tab.values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            _ => 0.0,
        };
        let base = (opts.steps_per_unit as f64 * opts.duration).ceil() as usize;
        let stiff = (t_end * (span + gmax) / opts.max_phase_step).ceil() as usize;
        base.max(stiff).max(1)
    });
    let h = t_end / steps as f64;

    let hm: Vec<f64> = (0..n * n).map(|idx| ham.matrix()[(idx / n, idx % n)]).collect();
    let nn = n * n;
    let mut stepper = Stepper {
        lv: Liouvillian {
            n,
            h: &hm,
            tmp: vec![0.0; nn],
        },
        model,
        unit,
        k: std::array::from_fn(|_| vec![0.0; nn]),
        sr: vec![0.0; nn],
        si: vec![0.0; nn],
    };
    let out = n - 1;
    let mut re = vec![0.0; nn];
    let mut im = vec![0.0; nn];
    re[0] = 1.0;
    let (mut prev_re, mut prev_im) = (re.clone(), im.clone());
    // State one step before the best grid point.
    let (mut best_re, mut best_im) = (re.clone(), im.clone());

    let p0 = re[out * n + out];
    let (mut best, mut best_step) = (p0, 0usize);
    let mut max_drift = 0.0f64;
    let mut trajectory = (opts.record_stride > 0).then(|| Trajectory {
        times: vec![0.0],
        populations: vec![(0..n).map(|k| re[k * n + k]).collect()],
    });

    for s in 0..steps {
        let t = s as f64 * h;
        prev_re.copy_from_slice(&re);
        prev_im.copy_from_slice(&im);
        stepper.step(t, h, &mut re, &mut im);

        let trace: f64 = (0..n).map(|k| re[k * n + k]).sum();
        let drift = (trace - 1.0).abs();
        max_drift = max_drift.max(drift);
        if drift > opts.trace_tolerance || !trace.is_finite() {
            return Err(Error::TraceDrift {
                t: (t + h) / unit,
                drift,
                steps,
            });
        }

        let p_next = re[out * n + out];
        if p_next > best {
            best = p_next;
            best_step = s + 1;
            best_re.copy_from_slice(&prev_re);
            best_im.copy_from_slice(&prev_im);
        }
        if let Some(tr) = trajectory.as_mut() {
            if (s + 1) % opts.record_stride == 0 || s + 1 == steps {
                tr.times.push((s + 1) as f64 * h / tau);
                tr.populations.push((0..n).map(|k| re[k * n + k]).collect());
            }
        }
    }

    let (mut eps, mut t_best) = (best, best_step as f64 * h);
    if best_step > 0 {
        // Re-integrate the bracketing steps finely, then fit a parabola.
        let span = if best_step < steps { 2 } else { 1 };
        let sub = h / REFINE_SUBSTEPS as f64;
        let t0 = (best_step - 1) as f64 * h;
        let mut samples = vec![best_re[out * n + out]];
        for j in 0..span * REFINE_SUBSTEPS {
            stepper.step(t0 + j as f64 * sub, sub, &mut best_re, &mut best_im);
            samples.push(best_re[out * n + out]);
        }
        let (j, &top) = samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        eps = top;
        t_best = t0 + j as f64 * sub;
        if j > 0 && j + 1 < samples.len() {
            if let Some((peak, off)) = parabola_peak(samples[j - 1], top, samples[j + 1]) {
                eps = peak;
                t_best += off * sub;
            }
        }
    }

    Ok(NoisyEvolution {
        result: TransportResult {
            epsilon_max: eps,
            t_star: t_best / tau,
            epsilon_int: None,
            trajectory,
            tau,
        },
        final_state: DensityMatrix::from_parts(n, &re, &im),
        steps,
        max_trace_drift: max_drift,
    })
}

/// Reference unit for rate tables shared across structures: the window of
/// the canonical corner-to-corner structure.
pub fn canonical_unit(window: f64) -> f64 {
    window * 0.2 * PI * 3f64.sqrt().powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_random_structure;
    use crate::transport::transport_efficiency;

    #[test]
    fn fixed_size_commutator_matches_general() {
        for n in 2..=8 {
            let c = sample_random_structure(n, 3 + n as u64).unwrap();
            let ham = build_hamiltonian(&c).unwrap();
            let h: Vec<f64> = (0..n * n).map(|k| ham.matrix()[(k / n, k % n)]).collect();
            let mut re = vec![0.0; n * n];
            let mut im = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    re[i * n + j] = ((i + j) as f64).cos();
                    im[i * n + j] = (i as f64 - j as f64) * 0.1 * (1.0 + (i * j) as f64).sin();
                }
            }
            let mut lv = Liouvillian {
                n,
                h: &h,
                tmp: vec![0.0; n * n],
            };
            let (mut ar, mut ai) = (vec![0.0; n * n], vec![0.0; n * n]);
            let (mut br, mut bi) = (vec![0.0; n * n], vec![0.0; n * n]);
            lv.apply(&re, &im, 0.7, &mut ar, &mut ai);
            lv.commutator_any(&re, &im, &mut br, &mut bi);
            for k in 0..n * n {
                let g = if k / n == k % n { 0.0 } else { 0.7 };
                let scale = 1.0 + br[k].abs() + bi[k].abs();
                assert!((ar[k] - (br[k] - g * re[k])).abs() < 1e-12 * scale, "n {n} k {k}");
                assert!((ai[k] - (bi[k] - g * im[k])).abs() < 1e-12 * scale, "n {n} k {k}");
            }
        }
    }

    #[test]
    fn unit_bridge() {
        let b = UnitBridge::default();
        assert!((b.energy(150.0) - 1.5).abs() < 1e-15);
        assert!((b.temperature(10.0) - 0.0695034800).abs() < 1e-12);
    }

    #[test]
    fn coherent_matches_closed_form() {
        let c = sample_random_structure(5, 9).unwrap();
        let exact = transport_efficiency(&c).unwrap();
        let r = evolve_master_equation(&c, &NoiseRateModel::coherent(), &EvolveOptions::default()).unwrap();
        assert!((r.result.epsilon_max - exact.epsilon_max).abs() < 1e-6);
        assert!(r.final_state.hermiticity_error() == 0.0);
    }

    #[test]
    fn negative_rate_rejected() {
        assert!(haken_strobl_rate(-0.1).is_err());
        assert!(haken_strobl_rate(0.0).is_ok());
    }

    #[test]
    fn rate_table_interpolates_and_clamps() {
        let t = RateTable {
            dt: 0.5,
            values: vec![0.0, 1.0, 3.0],
        };
        assert_eq!(t.at(0.25), 0.5);
        assert_eq!(t.at(0.75), 2.0);
        assert_eq!(t.at(10.0), 3.0);
        assert_eq!(t.t_end(), 1.0);
    }

    #[test]
    fn rates_vanish_at_zero() {
        assert_eq!(ohmic_rate_at(0.0, 0.1, 0.3, 0.07).unwrap(), 0.0);
        assert_eq!(non_markovian_rate_at(0.0, 1.5, 0.3, 0.1, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn ohmic_rate_approaches_limit() {
        let (l, wc, temp) = (0.05, 0.3, 0.0695);
        let lim = ohmic_rate_limit(l, wc, temp);
        let mid = ohmic_rate_at(50.0, l, wc, temp).unwrap();
        let far = ohmic_rate_at(1000.0, l, wc, temp).unwrap();
        assert!((far - lim).abs() < (mid - lim).abs());
        assert!((far - lim).abs() / lim < 5e-3, "{far} {lim}");
    }

    #[test]
    fn sin_over_continuity() {
        assert!((sin_over(1e-9, 2.0) - 2.0).abs() < 1e-12);
        assert!((sin_over(0.3, 2.0) - (0.6f64).sin() / 0.3).abs() < 1e-15);
    }
}

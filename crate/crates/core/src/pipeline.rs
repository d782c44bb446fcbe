//! Resumable stages: census, network, clustering, analysis, noise and
//! landscape, with their on-disk artifacts.
//!
//! Every structure is drawn from `split_seed(seed, index)`, so results do not
//! depend on the worker count. Data files are written by a single thread in
//! index order; manifests carry the config hash, stage, version and wall time.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    activity_from_maxima, class_statistics, detect_pair_from_maxima, pair_landscape_scan, pair_removal_loss,
    random_displacement_loss, spectral_pair_shift, superpose_cluster, ClassAssignment, ClassLabel, ClassOptions,
    LandscapeScan, NodeRecord, PairAnalysis, RobustnessReport, SpectralShiftReport,
};
use crate::error::{Error, Result};
use crate::geometry::{pair_geometry_descriptors, sample_random_structure, SiteConfiguration, Vec3};
use crate::network::{build_network, fr_layout, mcl_cluster, ClusterPartition, Edge, EfficiencyNetwork, LayoutCoordinates, MclOptions};
use crate::open_system::{
    canonical_unit, evolve_master_equation, haken_strobl_rate, non_markovian_rate, ohmic_tcl2_rate, BathParameters,
    EvolveOptions, NoiseKind, NoiseRateModel, RateGrid, UnitBridge,
};
use crate::rng::split_seed;
use crate::transport::{EvalOptions, Propagator};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const HISTOGRAM_BINS: usize = 1000;

const ROBUSTNESS_STREAM: u64 = 0x5242_5354;
const LAYOUT_STREAM: u64 = 0x4c41_594f;
const AVERAGE_STREAM: u64 = 0x4156_4552;

pub const STRUCTURES_FILE: &str = "structures.bin";
pub const CENSUS_FILE: &str = "census.bin";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EDGES_FILE: &str = "edges.txt";
pub const PARTITION_FILE: &str = "partition.txt";
pub const LAYOUT_FILE: &str = "layout.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_sites: usize,
    pub n_samples: u64,
    pub efficiency_threshold: f64,
    pub similarity_cutoff: f64,
    pub inflation: f64,
    /// Evaluation window as a multiple of `0.2 pi r_io^3`.
    pub window: f64,
    pub noise: NoiseKind,
    /// Haken-Strobl rate, or the long-time ohmic rate, in 1/window.
    pub noise_gamma: f64,
    pub seed: u64,
    /// Rayon threads; 0 uses all cores.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub batch_size: u64,
    pub robustness_trials: usize,
    pub displacement_cube: f64,
    pub inactive_threshold: f64,
    pub noise_floor: f64,
    pub layout_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_sites: 6,
            n_samples: 1_000_000,
            efficiency_threshold: 0.9,
            similarity_cutoff: 0.0125,
            inflation: 1.4,
            window: 0.25,
            noise: NoiseKind::Coherent,
            noise_gamma: 1.32,
            seed: 42,
            workers: 0,
            output_dir: PathBuf::from("run"),
            batch_size: 10_000,
            robustness_trials: 1000,
            displacement_cube: 0.05,
            inactive_threshold: 0.075,
            noise_floor: 0.005,
            layout_iterations: 500,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("bad value {v:?} for {key}"),
    })
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            c.set(i + 1, k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies one override; `line` is used for error messages only.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "n_sites" => self.n_sites = parse_value(line, key, v)?,
            "n_samples" => self.n_samples = parse_value(line, key, v)?,
            "efficiency_threshold" => self.efficiency_threshold = parse_value(line, key, v)?,
            "similarity_cutoff" => self.similarity_cutoff = parse_value(line, key, v)?,
            "inflation" => self.inflation = parse_value(line, key, v)?,
            "window" => self.window = parse_value(line, key, v)?,
            "noise" => {
                self.noise = v.parse().map_err(|_| Error::Config {
                    line,
                    message: format!("unknown noise model {v:?}"),
                })?
            }
            "noise_gamma" => self.noise_gamma = parse_value(line, key, v)?,
            "seed" => self.seed = parse_value(line, key, v)?,
            "workers" => self.workers = parse_value(line, key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "batch_size" => self.batch_size = parse_value(line, key, v)?,
            "robustness_trials" => self.robustness_trials = parse_value(line, key, v)?,
            "displacement_cube" => self.displacement_cube = parse_value(line, key, v)?,
            "inactive_threshold" => self.inactive_threshold = parse_value(line, key, v)?,
            "noise_floor" => self.noise_floor = parse_value(line, key, v)?,
            "layout_iterations" => self.layout_iterations = parse_value(line, key, v)?,
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        if !(2..=10).contains(&self.n_sites) {
            return bad(format!("n_sites must be in 2..=10, got {}", self.n_sites));
        }
        if !(0.0..=1.0).contains(&self.efficiency_threshold) {
            return bad(format!("efficiency_threshold must be in [0, 1], got {}", self.efficiency_threshold));
        }
        if !(self.similarity_cutoff > 0.0) {
            return bad("similarity_cutoff must be positive".into());
        }
        if !(self.inflation > 1.0) {
            return bad("inflation must exceed 1".into());
        }
        if !(self.window > 0.0) {
            return bad("window must be positive".into());
        }
        if !(self.noise_gamma >= 0.0) {
            return bad("noise_gamma must be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.displacement_cube >= 0.0) || !(0.0..=1.0).contains(&self.inactive_threshold) {
            return bad("displacement_cube must be >= 0 and inactive_threshold in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.noise_floor) {
            return bad("noise_floor must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Canonical `key = value` rendering.
    pub fn to_text(&self) -> String {
        format!(
            "n_sites = {}\nn_samples = {}\nefficiency_threshold = {}\nsimilarity_cutoff = {}\ninflation = {}\n\
             window = {}\nnoise = {}\nnoise_gamma = {}\nseed = {}\nworkers = {}\noutput_dir = {}\nbatch_size = {}\n\
             robustness_trials = {}\ndisplacement_cube = {}\ninactive_threshold = {}\nnoise_floor = {}\n\
             layout_iterations = {}\n",
            self.n_sites,
            self.n_samples,
            self.efficiency_threshold,
            self.similarity_cutoff,
            self.inflation,
            self.window,
            self.noise.name(),
            self.noise_gamma,
            self.seed,
            self.workers,
            self.output_dir.display(),
            self.batch_size,
            self.robustness_trials,
            self.displacement_cube,
            self.inactive_threshold,
            self.noise_floor,
            self.layout_iterations,
        )
    }

    /// Hash of every setting that can change results (not `workers` or
    /// `output_dir`).
    pub fn config_hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("workers") && !l.starts_with("output_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            window: self.window,
            ..Default::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidConfiguration(e.to_string()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub code_version: String,
    pub wall_time_s: f64,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

fn write_manifest(config: &RunConfig, stage: &str, start: Instant, outputs: &[&str], details: serde_json::Value) -> Result<()> {
    let m = Manifest {
        stage: stage.into(),
        config_hash: config.config_hash(),
        code_version: CODE_VERSION.into(),
        wall_time_s: start.elapsed().as_secs_f64(),
        config: config.clone(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        details,
    };
    let f = File::create(config.path(&format!("{stage}_manifest.json")))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &m)?;
    Ok(())
}

pub fn read_manifest(dir: &Path, stage: &str) -> Result<Manifest> {
    let f = File::open(dir.join(format!("{stage}_manifest.json")))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Append-only file of `(seed u64, n_sites u8, 3N f64)` little-endian
/// records with an in-memory seed index.
#[derive(Debug)]
pub struct StructureStore {
    path: PathBuf,
    n_sites: usize,
    index: BTreeMap<u64, u64>,
    order: Vec<u64>,
}

impl StructureStore {
    pub fn record_len(n_sites: usize) -> u64 {
        8 + 1 + 24 * n_sites as u64
    }

    pub fn encode(config: &SiteConfiguration) -> Vec<u8> {
        let mut buf = Vec::with_capacity(Self::record_len(config.n_sites()) as usize);
        buf.extend_from_slice(&config.seed().unwrap_or(0).to_le_bytes());
        buf.push(config.n_sites() as u8);
        for p in config.positions() {
            for c in p.iter() {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        buf
    }

    fn decode(rec: &[u8]) -> Result<SiteConfiguration> {
        let seed = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let n = rec[8] as usize;
        if rec.len() as u64 != Self::record_len(n) {
            return Err(Error::Corrupt(format!("record length {} for {n} sites", rec.len())));
        }
        let f = |k: usize| f64::from_le_bytes(rec[9 + 8 * k..17 + 8 * k].try_into().unwrap());
        let pos = (0..n).map(|i| Vec3::new(f(3 * i), f(3 * i + 1), f(3 * i + 2))).collect();
        Ok(SiteConfiguration::from_positions(pos)?.with_seed(seed))
    }

    /// Opens (creating if absent) and rebuilds the index. Fails when the
    /// file length is not a whole number of records.
    pub fn open(path: &Path, n_sites: usize) -> Result<Self> {
        if !path.exists() {
            File::create(path)?;
        }
        let mut store = Self {
            path: path.to_path_buf(),
            n_sites,
            index: BTreeMap::new(),
            order: Vec::new(),
        };
        let len = fs::metadata(path)?.len();
        let rl = Self::record_len(n_sites);
        if len % rl != 0 {
            return Err(Error::Corrupt(format!("{} has {len} bytes, not a multiple of {rl}", path.display())));
        }
        let mut r = BufReader::new(File::open(path)?);
        let mut buf = vec![0u8; rl as usize];
        for k in 0..len / rl {
            r.read_exact(&mut buf)?;
            if buf[8] as usize != n_sites {
                return Err(Error::Corrupt(format!("record {k} has {} sites, expected {n_sites}", buf[8])));
            }
            let seed = u64::from_le_bytes(buf[..8].try_into().unwrap());
            store.index.insert(seed, k * rl);
            store.order.push(seed);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn seeds(&self) -> &[u64] {
        &self.order
    }

    pub fn offset(&self, seed: u64) -> Option<u64> {
        self.index.get(&seed).copied()
    }

    pub fn append(&mut self, configs: &[SiteConfiguration]) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        let mut off = f.seek(SeekFrom::End(0))?;
        let mut buf = Vec::new();
        for c in configs {
            if c.n_sites() != self.n_sites {
                return Err(Error::DimensionMismatch {
                    left: self.n_sites,
                    right: c.n_sites(),
                });
            }
            let seed = c.seed().unwrap_or(0);
            buf.extend(Self::encode(c));
            self.index.insert(seed, off);
            self.order.push(seed);
            off += Self::record_len(self.n_sites);
        }
        f.write_all(&buf)?;
        f.flush()?;
        Ok(())
    }

    pub fn get(&self, seed: u64) -> Result<Option<SiteConfiguration>> {
        let Some(off) = self.offset(seed) else { return Ok(None) };
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(off))?;
        let mut buf = vec![0u8; Self::record_len(self.n_sites) as usize];
        f.read_exact(&mut buf)?;
        Self::decode(&buf).map(Some)
    }

    /// All records in file order.
    pub fn load_all(&self) -> Result<Vec<SiteConfiguration>> {
        let bytes = fs::read(&self.path)?;
        bytes
            .chunks(Self::record_len(self.n_sites) as usize)
            .map(Self::decode)
            .collect()
    }

    pub fn export_csv(&self, mut w: impl Write) -> Result<()> {
        write!(w, "seed,n_sites")?;
        for k in 0..self.n_sites {
            write!(w, ",x{k},y{k},z{k}")?;
        }
        writeln!(w)?;
        for c in self.load_all()? {
            write!(w, "{},{}", c.seed().unwrap_or(0), c.n_sites())?;
            for p in c.positions() {
                write!(w, ",{},{},{}", p.x, p.y, p.z)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `(seed, epsilon, t_star, epsilon_int)` for a stored structure; `t_star`
/// in window units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensusRecord {
    pub seed: u64,
    pub epsilon: f64,
    pub t_star: f64,
    pub epsilon_int: f64,
}

impl CensusRecord {
    pub const LEN: usize = 32;

    fn encode(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.epsilon.to_le_bytes());
        buf.extend_from_slice(&self.t_star.to_le_bytes());
        buf.extend_from_slice(&self.epsilon_int.to_le_bytes());
    }

    fn decode(b: &[u8]) -> Self {
        let f = |k: usize| f64::from_le_bytes(b[8 * k..8 * k + 8].try_into().unwrap());
        Self {
            seed: u64::from_le_bytes(b[..8].try_into().unwrap()),
            epsilon: f(1),
            t_star: f(2),
            epsilon_int: f(3),
        }
    }
}

pub fn read_census(dir: &Path) -> Result<Vec<CensusRecord>> {
    let bytes = fs::read(dir.join(CENSUS_FILE))?;
    if bytes.len() % CensusRecord::LEN != 0 {
        return Err(Error::Corrupt(format!("{CENSUS_FILE} has {} bytes", bytes.len())));
    }
    Ok(bytes.chunks(CensusRecord::LEN).map(CensusRecord::decode).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub next_index: u64,
    pub histogram: Vec<u64>,
    pub max_epsilon: f64,
    pub store_bytes: u64,
    pub store_sha256: String,
    pub census_bytes: u64,
    pub census_sha256: String,
}

fn file_prefix_hash(path: &Path, len: u64) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut left = len;
    let mut buf = vec![0u8; 1 << 16];
    while left > 0 {
        let n = (buf.len() as u64).min(left) as usize;
        f.read_exact(&mut buf[..n])?;
        h.update(&buf[..n]);
        left -= n as u64;
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensusSummary {
    pub n_evaluated: u64,
    pub n_survivors: usize,
    pub histogram: Vec<u64>,
    pub max_epsilon: f64,
    pub complete: bool,
}

impl CensusSummary {
    /// Samples whose epsilon lies in bins at or above `threshold`.
    pub fn count_at_least(&self, threshold: f64) -> u64 {
        let b = ((threshold / 1e-3).round() as usize).min(HISTOGRAM_BINS);
        self.histogram[b..].iter().sum()
    }
}

fn histogram_bin(e: f64) -> usize {
    ((e / 1e-3).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

fn write_histogram(config: &RunConfig, hist: &[u64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(config.path(HISTOGRAM_FILE))?);
    writeln!(w, "bin_lo,count")?;
    for (i, c) in hist.iter().enumerate() {
        writeln!(w, "{:.3},{c}", i as f64 * 1e-3)?;
    }
    Ok(())
}

/// Runs (or resumes) the census. `stop_after` limits the number of batches
/// processed in this call, leaving a resumable checkpoint.
pub fn run_census(config: &RunConfig, stop_after: Option<usize>) -> Result<CensusSummary> {
    config.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&config.output_dir)?;
    let store_path = config.path(STRUCTURES_FILE);
    let census_path = config.path(CENSUS_FILE);
    let ck_path = config.path(CHECKPOINT_FILE);
    let hash = config.config_hash();

    let mut ck = if ck_path.exists() {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(&ck_path)?))?;
        if ck.config_hash != hash {
            return Err(Error::InvalidConfiguration(format!(
                "checkpoint in {} belongs to a different config",
                config.output_dir.display()
            )));
        }
        // Discard anything written after the checkpoint, then verify.
        for (p, len, sum) in [(&store_path, ck.store_bytes, &ck.store_sha256), (&census_path, ck.census_bytes, &ck.census_sha256)] {
            let f = OpenOptions::new().write(true).open(p)?;
            if f.metadata()?.len() < len {
                return Err(Error::Corrupt(format!("{} shorter than its checkpoint", p.display())));
            }
            f.set_len(len)?;
            if &file_prefix_hash(p, len)? != sum {
                return Err(Error::Corrupt(format!("{} checksum mismatch", p.display())));
            }
        }
        info!("resuming census at sample {}", ck.next_index);
        ck
    } else {
        File::create(&store_path)?;
        File::create(&census_path)?;
        Checkpoint {
            config_hash: hash.clone(),
            next_index: 0,
            histogram: vec![0; HISTOGRAM_BINS],
            max_epsilon: 0.0,
            store_bytes: 0,
            store_sha256: hex(&Sha256::digest(b"")),
            census_bytes: 0,
            census_sha256: hex(&Sha256::digest(b"")),
        }
    };

    let mut store = StructureStore::open(&store_path, config.n_sites)?;
    let pool = config.pool()?;
    let opts = config.eval_options();
    let mut batches = 0usize;
    while ck.next_index < config.n_samples {
        if stop_after.is_some_and(|s| batches >= s) {
            break;
        }
        let lo = ck.next_index;
        let hi = (lo + config.batch_size).min(config.n_samples);
        let results: Vec<Result<(SiteConfiguration, f64, f64, f64)>> = pool.install(|| {
            (lo..hi)
                .into_par_iter()
                .map(|i| {
                    let seed = split_seed(config.seed, i);
                    let c = sample_random_structure(config.n_sites, seed)?.with_seed(seed);
                    let r = Propagator::new(&c)?.evaluate(&opts);
                    Ok((c, r.epsilon_max, r.t_star / config.window, r.epsilon_int.unwrap_or(f64::NAN)))
                })
                .collect()
        });
        let mut survivors = Vec::new();
        let mut census = Vec::new();
        for r in results {
            let (c, e, t, ei) = r?;
            ck.histogram[histogram_bin(e)] += 1;
            ck.max_epsilon = ck.max_epsilon.max(e);
            if e > config.efficiency_threshold {
                CensusRecord {
                    seed: c.seed().unwrap(),
                    epsilon: e,
                    t_star: t,
                    epsilon_int: ei,
                }
                .encode(&mut census);
                survivors.push(c);
            }
        }
        store.append(&survivors)?;
        let mut cf = OpenOptions::new().append(true).open(&census_path)?;
        cf.write_all(&census)?;
        cf.sync_data()?;
        ck.next_index = hi;
        ck.store_bytes = fs::metadata(&store_path)?.len();
        ck.census_bytes = fs::metadata(&census_path)?.len();
        ck.store_sha256 = file_prefix_hash(&store_path, ck.store_bytes)?;
        ck.census_sha256 = file_prefix_hash(&census_path, ck.census_bytes)?;
        let tmp = config.path("checkpoint.json.tmp");
        serde_json::to_writer(BufWriter::new(File::create(&tmp)?), &ck)?;
        fs::rename(&tmp, &ck_path)?;
        batches += 1;
    }

    let complete = ck.next_index >= config.n_samples;
    write_histogram(config, &ck.histogram)?;
    let summary = CensusSummary {
        n_evaluated: ck.next_index,
        n_survivors: store.len(),
        histogram: ck.histogram.clone(),
        max_epsilon: ck.max_epsilon,
        complete,
    };
    write_manifest(
        config,
        "census",
        start,
        &[STRUCTURES_FILE, CENSUS_FILE, HISTOGRAM_FILE, CHECKPOINT_FILE],
        serde_json::json!({
            "n_evaluated": summary.n_evaluated,
            "n_survivors": summary.n_survivors,
            "max_epsilon": summary.max_epsilon,
            "complete": complete,
        }),
    )?;
    info!(
        "census: {} evaluated, {} above {}",
        summary.n_evaluated, summary.n_survivors, config.efficiency_threshold
    );
    Ok(summary)
}

pub fn open_store(config: &RunConfig) -> Result<StructureStore> {
    let p = config.path(STRUCTURES_FILE);
    if !p.exists() {
        return Err(Error::InvalidConfiguration(format!("no census in {}", config.output_dir.display())));
    }
    StructureStore::open(&p, config.n_sites)
}

pub fn write_edges(path: &Path, net: &EfficiencyNetwork) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &net.edges {
        writeln!(w, "{} {} {:e}", e.a, e.b, e.s_squared)?;
    }
    Ok(())
}

pub fn read_edges(path: &Path, n_nodes: usize, cutoff: f64) -> Result<EfficiencyNetwork> {
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = || Error::Corrupt(format!("{} line {}: {line:?}", path.display(), i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        edges.push(Edge {
            a: f[0].parse().map_err(|_| bad())?,
            b: f[1].parse().map_err(|_| bad())?,
            s_squared: f[2].parse().map_err(|_| bad())?,
        });
    }
    EfficiencyNetwork::from_edges(n_nodes, edges, cutoff)
}

pub fn write_partition(path: &Path, p: &ClusterPartition) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (node, c) in p.assignment.iter().enumerate() {
        writeln!(w, "{node} {c}")?;
    }
    Ok(())
}

pub fn read_partition(path: &Path) -> Result<Vec<usize>> {
    let mut a = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let mut f = line.split_whitespace();
        let (Some(node), Some(c)) = (f.next(), f.next()) else { continue };
        let node: usize = node.parse().map_err(|_| Error::Corrupt(format!("bad partition line {line:?}")))?;
        if node != a.len() {
            return Err(Error::Corrupt(format!("partition node {node} out of order")));
        }
        a.push(c.parse().map_err(|_| Error::Corrupt(format!("bad partition line {line:?}")))?);
    }
    Ok(a)
}

pub fn write_layout(path: &Path, l: &LayoutCoordinates) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (node, [x, y]) in l.positions.iter().enumerate() {
        writeln!(w, "{node} {x} {y}")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct NetworkOutputs {
    pub structures: Vec<SiteConfiguration>,
    pub network: EfficiencyNetwork,
    pub partition: ClusterPartition,
    pub layout: LayoutCoordinates,
}

fn mcl_options(config: &RunConfig) -> MclOptions {
    MclOptions {
        inflation: config.inflation,
        noise_floor: config.noise_floor,
        ..Default::default()
    }
}

/// Builds the similarity network over stored structures (node = store
/// order) and writes the edge list.
pub fn build_network_stage(config: &RunConfig) -> Result<(Vec<SiteConfiguration>, EfficiencyNetwork)> {
    let start = Instant::now();
    let store = open_store(config)?;
    let structures = store.load_all()?;
    if structures.is_empty() {
        warn!("store is empty; writing empty network");
    }
    let net = config.pool()?.install(|| build_network(&structures, config.similarity_cutoff))?;
    write_edges(&config.path(EDGES_FILE), &net)?;
    write_manifest(
        config,
        "network",
        start,
        &[EDGES_FILE],
        serde_json::json!({ "nodes": net.n_nodes(), "edges": net.edges.len(), "cutoff": config.similarity_cutoff }),
    )?;
    Ok((structures, net))
}

/// Clusters a network and lays it out, writing partition and layout files.
pub fn cluster_stage(config: &RunConfig, net: &EfficiencyNetwork) -> Result<(ClusterPartition, LayoutCoordinates)> {
    let start = Instant::now();
    let partition = if net.n_nodes() == 0 {
        ClusterPartition {
            assignment: vec![],
            populations: vec![],
            noise_fraction: 0.0,
            noise_floor: config.noise_floor,
            iterations: 0,
            residual: 0.0,
            max_stochasticity_error: 0.0,
            ambiguous_columns: vec![],
        }
    } else {
        mcl_cluster(net, &mcl_options(config))?
    };
    let layout = fr_layout(net, config.layout_iterations, split_seed(config.seed, LAYOUT_STREAM));
    write_partition(&config.path(PARTITION_FILE), &partition)?;
    write_layout(&config.path(LAYOUT_FILE), &layout)?;
    write_manifest(
        config,
        "cluster",
        start,
        &[PARTITION_FILE, LAYOUT_FILE],
        serde_json::json!({
            "inflation": config.inflation,
            "clusters": partition.n_clusters(),
            "iterations": partition.iterations,
            "residual": partition.residual,
            "noise_fraction": partition.noise_fraction,
            "ambiguous_columns": partition.ambiguous_columns,
        }),
    )?;
    Ok((partition, layout))
}

pub fn run_network_stage(config: &RunConfig) -> Result<NetworkOutputs> {
    let (structures, network) = build_network_stage(config)?;
    let (partition, layout) = cluster_stage(config, &network)?;
    Ok(NetworkOutputs {
        structures,
        network,
        partition,
        layout,
    })
}

/// Rebuilds the partition struct from `partition.txt`.
pub fn load_partition(config: &RunConfig) -> Result<ClusterPartition> {
    let assignment = read_partition(&config.path(PARTITION_FILE))?;
    let n = assignment.len().max(1) as f64;
    let k = assignment.iter().copied().max().unwrap_or(0);
    let mut populations = vec![0.0; k];
    for &c in &assignment {
        populations[c - 1] += 1.0 / n;
    }
    let noise_fraction = populations.iter().filter(|&&p| p < config.noise_floor).sum();
    Ok(ClusterPartition {
        assignment,
        populations,
        noise_fraction,
        noise_floor: config.noise_floor,
        iterations: 0,
        residual: 0.0,
        max_stochasticity_error: 0.0,
        ambiguous_columns: vec![],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// In window units.
    pub t_star: f64,
    pub robustness: RobustnessReport,
    pub active_sites: usize,
    pub pair: PairAnalysis,
    pub r_p: Option<f64>,
    pub r_b: Option<f64>,
    pub mean_radial: f64,
    pub spectral: Option<SpectralShiftReport>,
}

impl NodeReport {
    pub fn record(&self) -> NodeRecord {
        NodeRecord {
            delta_eps_rand: self.robustness.delta_eps_rand,
            t_star: self.t_star,
            has_pair: self.pair.has_pair(),
            mean_radial: self.mean_radial,
            active_sites: self.active_sites,
        }
    }
}

/// Per-structure analysis: robustness, activity, pair, spectral shift.
pub fn analyze_structure(config: &RunConfig, node: usize, c: &SiteConfiguration) -> Result<NodeReport> {
    let opts = config.eval_options();
    let prop = Propagator::new(c)?;
    let r = prop.evaluate(&opts);
    let maxima = prop.site_maxima(&opts);
    let activity = activity_from_maxima(maxima.clone(), config.inactive_threshold);
    let seed = c.seed().unwrap_or(node as u64);
    let robustness = random_displacement_loss(
        c,
        config.displacement_cube,
        config.robustness_trials,
        split_seed(seed ^ ROBUSTNESS_STREAM, config.seed),
        &opts,
        true,
    )?;
    let mut pair = detect_pair_from_maxima(c, &maxima, config.inactive_threshold);
    let (mut r_p, mut r_b, mut spectral) = (None, None, None);
    if pair.has_pair() {
        pair.delta_eps_pair = Some(pair_removal_loss(c, &pair.pair_sites(), &opts)?);
        let first = pair.pairs[0];
        if c.n_sites() == 6 {
            let d = pair_geometry_descriptors(c, first)?;
            r_p = Some(d.r_p);
            r_b = Some(d.r_b);
        } else {
            r_p = Some(c.distance(first[0], first[1]));
        }
        spectral = Some(spectral_pair_shift(c, first)?);
    }
    Ok(NodeReport {
        node,
        seed,
        epsilon: r.epsilon_max,
        t_star: r.t_star / config.window,
        robustness,
        active_sites: activity.active_count(),
        pair,
        r_p,
        r_b,
        mean_radial: NodeRecord::mean_radial_of(c),
        spectral,
    })
}

#[derive(Debug, Clone)]
pub struct AnalysisOutputs {
    pub nodes: Vec<NodeReport>,
    pub classes: ClassAssignment,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn run_analysis_stage(
    config: &RunConfig,
    structures: &[SiteConfiguration],
    network: &EfficiencyNetwork,
    partition: &ClusterPartition,
) -> Result<AnalysisOutputs> {
    let start = Instant::now();
    if structures.len() != partition.assignment.len() {
        return Err(Error::DimensionMismatch {
            left: structures.len(),
            right: partition.assignment.len(),
        });
    }
    let nodes: Vec<NodeReport> = config.pool()?.install(|| {
        structures
            .par_iter()
            .enumerate()
            .map(|(i, c)| analyze_structure(config, i, c))
            .collect::<Result<_>>()
    })?;
    let records: Vec<NodeRecord> = nodes.iter().map(NodeReport::record).collect();
    let classes = class_statistics(partition, &records, &ClassOptions::default())?;

    let mut w = BufWriter::new(File::create(config.path("nodes.csv"))?);
    writeln!(
        w,
        "node,seed,epsilon,t_star,delta_eps_rand,std_error,active_sites,has_pair,pair_a,pair_b,r_p,r_b,delta_eps_pair,mean_radial,cluster,class"
    )?;
    for n in &nodes {
        let (pa, pb) = n.pair.pairs.first().map_or((String::new(), String::new()), |p| (p[0].to_string(), p[1].to_string()));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{pa},{pb},{},{},{},{},{},{}",
            n.node,
            n.seed,
            n.epsilon,
            n.t_star,
            n.robustness.delta_eps_rand,
            n.robustness.std_error,
            n.active_sites,
            n.pair.has_pair(),
            opt(n.r_p),
            opt(n.r_b),
            opt(n.pair.delta_eps_pair),
            n.mean_radial,
            partition.assignment[n.node],
            classes.node_label(partition, n.node).name(),
        )?;
    }
    drop(w);

    let mut w = BufWriter::new(File::create(config.path("robustness_hist.csv"))?);
    writeln!(w, "cluster,bin_lo,count")?;
    for c in 1..=partition.n_clusters() {
        let mut h: BTreeMap<i64, u64> = BTreeMap::new();
        for m in partition.members(c) {
            *h.entry((nodes[m].robustness.delta_eps_rand / 0.01).floor() as i64).or_default() += 1;
        }
        for (b, count) in h {
            writeln!(w, "{c},{:.2},{count}", b as f64 * 0.01)?;
        }
    }
    drop(w);

    let mut w = BufWriter::new(File::create(config.path("activity_hist.csv"))?);
    writeln!(w, "class,active_sites,count")?;
    for label in [ClassLabel::Pair, ClassLabel::Inline, ClassLabel::Sparse, ClassLabel::Unclassified] {
        let mut h = vec![0u64; config.n_sites + 1];
        for n in &nodes {
            if classes.node_label(partition, n.node) == label {
                h[n.active_sites] += 1;
            }
        }
        for (k, count) in h.iter().enumerate().filter(|(_, c)| **c > 0) {
            writeln!(w, "{},{k},{count}", label.name())?;
        }
    }
    drop(w);

    let mut w = BufWriter::new(File::create(config.path("classes.csv"))?);
    writeln!(w, "class,clusters,n_members,population,mean_delta_eps_rand,max_delta_eps_rand,fastest_t_star,mean_t_star")?;
    for c in &classes.classes {
        let ids: Vec<String> = c.clusters.iter().map(|x| x.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.label.name(),
            ids.join(" "),
            c.n_members,
            c.population,
            c.mean_delta_eps_rand,
            c.max_delta_eps_rand,
            c.fastest_t_star,
            c.mean_t_star
        )?;
    }
    drop(w);

    let mut w = BufWriter::new(File::create(config.path("spectral.csv"))?);
    writeln!(w, "node,v,delta,perturbative_shift,first_shift,first_shift_error,fundamental_base,fundamental_deviation")?;
    for n in &nodes {
        if let Some(s) = &n.spectral {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                n.node,
                s.v,
                s.delta,
                s.perturbative_shift,
                s.shifts[0],
                s.first_shift_error,
                s.fundamental_full.base,
                s.fundamental_full.max_deviation
            )?;
        }
    }
    drop(w);

    let mut aligned_files = Vec::new();
    for c in partition.major_clusters().into_iter().take(3) {
        let members = partition.members(c);
        let a = superpose_cluster(structures, network, &members, Some(split_seed(config.seed, AVERAGE_STREAM + c as u64)))?;
        let name = format!("aligned_cluster_{c}.csv");
        a.write_csv(BufWriter::new(File::create(config.path(&name))?))?;
        aligned_files.push(name);
    }

    let mut outputs = vec!["nodes.csv", "robustness_hist.csv", "activity_hist.csv", "classes.csv", "spectral.csv"];
    outputs.extend(aligned_files.iter().map(String::as_str));
    write_manifest(config, "analysis", start, &outputs, serde_json::to_value(&classes.classes)?)?;
    Ok(AnalysisOutputs { nodes, classes })
}

/// Rate model selected by `config.noise`, with tables on
/// `[0, 2 * unit]` where `unit` is the canonical window.
pub fn noise_model(config: &RunConfig) -> Result<NoiseRateModel> {
    let unit = canonical_unit(config.window);
    let grid = RateGrid::new(2.0 * unit, 2048)?;
    let bridge = UnitBridge::default();
    match config.noise {
        NoiseKind::Coherent => Ok(NoiseRateModel::coherent()),
        NoiseKind::HakenStrobl => haken_strobl_rate(config.noise_gamma),
        NoiseKind::OhmicTcl2 => ohmic_tcl2_rate(BathParameters::ohmic_default(&bridge), Some(config.noise_gamma), unit, &grid),
        NoiseKind::NonMarkovian => non_markovian_rate(BathParameters::non_markovian_default(&bridge), &grid),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyRecord {
    pub seed: u64,
    pub model: NoiseKind,
    pub gamma: f64,
    pub epsilon_coherent: f64,
    pub epsilon_noisy: f64,
}

/// Evolves every stored structure under the configured noise model.
pub fn run_noise_stage(config: &RunConfig) -> Result<Vec<NoisyRecord>> {
    let start = Instant::now();
    let structures = open_store(config)?.load_all()?;
    let model = noise_model(config)?;
    let opts = EvolveOptions {
        window: config.window,
        ..Default::default()
    };
    let eval = config.eval_options();
    let records: Vec<NoisyRecord> = config.pool()?.install(|| {
        structures
            .par_iter()
            .map(|c| {
                let noisy = evolve_master_equation(c, &model, &opts)?;
                Ok(NoisyRecord {
                    seed: c.seed().unwrap_or(0),
                    model: config.noise,
                    gamma: config.noise_gamma,
                    epsilon_coherent: Propagator::new(c)?.evaluate(&eval).epsilon_max,
                    epsilon_noisy: noisy.result.epsilon_max,
                })
            })
            .collect::<Result<_>>()
    })?;
    let mut w = BufWriter::new(File::create(config.path("noisy.csv"))?);
    writeln!(w, "seed,model,gamma,epsilon_coherent,epsilon_noisy")?;
    for r in &records {
        writeln!(w, "{},{},{},{},{}", r.seed, r.model.name(), r.gamma, r.epsilon_coherent, r.epsilon_noisy)?;
    }
    drop(w);
    let unit = canonical_unit(config.window);
    model.write_csv(
        BufWriter::new(File::create(config.path("rates.csv"))?),
        unit,
        &RateGrid::new(unit, 512)?,
    )?;
    let details = serde_json::json!({
        "model": config.noise.name(),
        "bath": model.bath.map(|b| serde_json::json!({
            "reorganization": b.reorganization,
            "omega_c": b.omega_c,
            "temperature": b.temperature,
            "omega_channel": b.omega_channel,
            "omega_channel_times_unit": b.omega_channel * unit,
        })),
        "unit": unit,
    });
    write_manifest(config, "noise", start, &["noisy.csv", "rates.csv"], details)?;
    Ok(records)
}

/// Landscape scan around the most efficient stored structure with a pair.
pub fn run_landscape_stage(config: &RunConfig, r_p_grid: &[f64], r_b_grid: &[f64]) -> Result<Option<(u64, LandscapeScan)>> {
    let start = Instant::now();
    let opts = config.eval_options();
    let census = read_census(&config.output_dir)?;
    let store = open_store(config)?;
    let mut ranked: Vec<&CensusRecord> = census.iter().collect();
    ranked.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon).then(a.seed.cmp(&b.seed)));
    for rec in ranked {
        let Some(c) = store.get(rec.seed)? else { continue };
        if c.n_sites() != 6 {
            break;
        }
        let maxima = Propagator::new(&c)?.site_maxima(&opts);
        let pa = detect_pair_from_maxima(&c, &maxima, config.inactive_threshold);
        let Some(&pair) = pa.pairs.first() else { continue };
        let scan = config.pool()?.install(|| pair_landscape_scan(&c, pair, r_p_grid, r_b_grid, &opts))?;
        scan.write_csv(BufWriter::new(File::create(config.path("landscape.csv"))?))?;
        write_manifest(
            config,
            "landscape",
            start,
            &["landscape.csv"],
            serde_json::json!({ "seed": rec.seed, "pair": pair, "direction": scan.direction, "pair_axis": scan.pair_axis }),
        )?;
        return Ok(Some((rec.seed, scan)));
    }
    warn!("no stored structure with a pair; landscape skipped");
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let c = RunConfig {
            n_samples: 123,
            noise: NoiseKind::OhmicTcl2,
            window: 0.5,
            ..Default::default()
        };
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn config_errors_carry_line() {
        match RunConfig::parse("n_sites = 6\n# c\nbogus = 1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("inflation = 1.0"), Err(Error::InvalidConfiguration(_))));
        assert!(matches!(RunConfig::parse("n_sites = x"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = RunConfig::default();
        let b = RunConfig {
            workers: 3,
            output_dir: "elsewhere".into(),
            ..Default::default()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig { seed: 1, ..Default::default() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let mut s = StructureStore::open(&p, 6).unwrap();
        let cs: Vec<_> = (0..3).map(|i| sample_random_structure(6, i).unwrap().with_seed(i)).collect();
        s.append(&cs).unwrap();
        let s = StructureStore::open(&p, 6).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.offset(2), Some(2 * StructureStore::record_len(6)));
        assert_eq!(s.get(1).unwrap().unwrap(), cs[1]);
        assert_eq!(s.load_all().unwrap(), cs);
        assert!(s.get(99).unwrap().is_none());
    }

    #[test]
    fn truncated_store_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        fs::write(&p, [0u8; 10]).unwrap();
        assert!(matches!(StructureStore::open(&p, 6), Err(Error::Corrupt(_))));
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(histogram_bin(0.0), 0);
        assert_eq!(histogram_bin(0.9005), 900);
        assert_eq!(histogram_bin(1.0), HISTOGRAM_BINS - 1);
    }
}

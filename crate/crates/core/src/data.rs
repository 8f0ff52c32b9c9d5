//! Lennard-Jones label oracle, synthetic cluster datasets, and their
//! JSON-lines file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{norm, sub, AtomicSystem, GeometryError, Vec3};
use crate::relax::{relax, ForceProvider, RelaxConfig, RelaxError, RelaxStatus};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no Lennard-Jones parameters for species pair ({0}, {1})")]
    MissingPair(u32, u32),
    #[error("atoms {i} and {j} are {distance:.4} Å apart, inside the repulsive core ({limit:.4} Å)")]
    CoreOverlap { i: usize, j: usize, distance: f64, limit: f64 },
    #[error("invalid oracle parameters: {0}")]
    Oracle(String),
    #[error("invalid generator settings: {0}")]
    Generator(String),
    #[error("could not place a valid cluster after {0} attempts")]
    Unsatisfiable(usize),
    #[error("oracle forces disagree with finite differences (relative error {0:e})")]
    SelfCheck(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("file is truncated: incomplete record at byte offset {offset}")]
    Truncated { offset: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Lennard-Jones parameters of one unordered species pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairParams {
    pub species: [u32; 2],
    /// Well depth, eV.
    pub epsilon: f64,
    /// Zero crossing, Å.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub pairs: Vec<PairParams>,
    /// Energy is exactly zero beyond this distance, Å.
    pub cutoff: f64,
    /// Width of the smooth switch that ends at the cutoff, Å.
    pub taper: f64,
    /// Pairs closer than this multiple of `sigma` are rejected.
    pub core_fraction: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            pairs: vec![
                PairParams { species: [1, 1], epsilon: 0.5, sigma: 2.5 },
                PairParams { species: [1, 6], epsilon: 0.7, sigma: 2.75 },
                PairParams { species: [6, 6], epsilon: 1.0, sigma: 3.0 },
            ],
            cutoff: 6.0,
            taper: 0.5,
            core_fraction: 0.3,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), DataError> {
        for p in &self.pairs {
            if !(p.epsilon > 0.0 && p.sigma > 0.0 && p.epsilon.is_finite() && p.sigma.is_finite()) {
                return Err(DataError::Oracle(format!("pair {:?} needs positive epsilon and sigma", p.species)));
            }
        }
        if !(self.cutoff > 0.0 && self.taper > 0.0 && self.taper < self.cutoff) {
            return Err(DataError::Oracle("need 0 < taper < cutoff".into()));
        }
        if !(self.core_fraction > 0.0 && self.core_fraction < 1.0) {
            return Err(DataError::Oracle("core_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn pair(&self, a: u32, b: u32) -> Result<&PairParams, DataError> {
        self.pairs
            .iter()
            .find(|p| (p.species[0] == a && p.species[1] == b) || (p.species[0] == b && p.species[1] == a))
            .ok_or(DataError::MissingPair(a, b))
    }

    /// Pair separation at the bottom of the well, `2^{1/6} σ`.
    pub fn r_min(&self, a: u32, b: u32) -> Result<f64, DataError> {
        Ok(2f64.powf(1.0 / 6.0) * self.pair(a, b)?.sigma)
    }

    /// Pair energy and its radial derivative at distance `r`.
    fn pair_terms(&self, p: &PairParams, r: f64) -> (f64, f64) {
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let sr6 = (p.sigma / r).powi(6);
        let sr12 = sr6 * sr6;
        let e = 4.0 * p.epsilon * (sr12 - sr6);
        let de = 4.0 * p.epsilon * (-12.0 * sr12 + 6.0 * sr6) / r;
        let start = self.cutoff - self.taper;
        if r <= start {
            return (e, de);
        }
        // Quintic smoothstep: value, slope and curvature vanish at the cutoff.
        let x = (r - start) / self.taper;
        let s = 1.0 - x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
        let ds = -30.0 * x * x * (1.0 - x) * (1.0 - x) / self.taper;
        (e * s, de * s + e * ds)
    }

    /// Total energy (eV) and analytic forces (eV/Å).
    pub fn energy_forces(&self, system: &AtomicSystem) -> Result<(f64, Vec<Vec3>), DataError> {
        let n = system.len();
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in i + 1..n {
                let p = self.pair(system.numbers[i], system.numbers[j])?;
                let d = sub(system.positions[i], system.positions[j]);
                let r = norm(d);
                if r < self.core_fraction * p.sigma {
                    return Err(DataError::CoreOverlap { i, j, distance: r, limit: self.core_fraction * p.sigma });
                }
                let (e, de) = self.pair_terms(p, r);
                energy += e;
                for k in 0..3 {
                    let f = -de * d[k] / r;
                    forces[i][k] += f;
                    forces[j][k] -= f;
                }
            }
        }
        Ok((energy, forces))
    }

    pub fn energy(&self, system: &AtomicSystem) -> Result<f64, DataError> {
        Ok(self.energy_forces(system)?.0)
    }

    /// Largest relative deviation between analytic forces and a fourth-order
    /// central difference of the energy.
    pub fn self_check(&self, system: &AtomicSystem, step: f64) -> Result<f64, DataError> {
        let (_, forces) = self.energy_forces(system)?;
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut probe = system.clone();
        for i in 0..system.len() {
            for k in 0..3 {
                let x0 = system.positions[i][k];
                let mut at = |dx: f64| -> Result<f64, DataError> {
                    probe.positions[i][k] = x0 + dx;
                    self.energy(&probe)
                };
                let d = (-at(2.0 * step)? + 8.0 * at(step)? - 8.0 * at(-step)? + at(-2.0 * step)?) / (12.0 * step);
                probe.positions[i][k] = x0;
                err = err.max((forces[i][k] + d).abs());
                scale = scale.max(d.abs());
            }
        }
        Ok(if scale > 0.0 { err / scale } else { err })
    }

    /// Borrows the oracle as a force provider for relaxation.
    pub fn provider(&self) -> OracleForces<'_> {
        OracleForces(self)
    }
}

pub struct OracleForces<'a>(pub &'a OracleParams);

impl ForceProvider for OracleForces<'_> {
    fn forces(&mut self, system: &AtomicSystem) -> Result<Vec<Vec3>, RelaxError> {
        self.0.energy_forces(system).map(|(_, f)| f).map_err(|e| RelaxError::Provider(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Composition seen in training.
    Id,
    /// Contains the held-out species pair.
    Ood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureRecord {
    pub positions: Vec<Vec3>,
    pub numbers: Vec<u32>,
    /// eV.
    pub energy: f64,
    /// eV/Å.
    pub forces: Vec<Vec3>,
    pub split: Split,
}

impl StructureRecord {
    pub fn system(&self) -> AtomicSystem {
        AtomicSystem {
            positions: self.positions.clone(),
            numbers: self.numbers.clone(),
            energy: Some(self.energy),
            forces: Some(self.forces.clone()),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !self.energy.is_finite() {
            return Err("energy is not finite".into());
        }
        if self.forces.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite force component".into());
        }
        self.system().validate().map_err(|e| e.to_string())
    }
}

/// Whether a composition contains the held-out unordered pair.
pub fn has_pair(numbers: &[u32], pair: [u32; 2]) -> bool {
    let count = |z: u32| numbers.iter().filter(|&&n| n == z).count();
    if pair[0] == pair[1] {
        count(pair[0]) >= 2
    } else {
        count(pair[0]) >= 1 && count(pair[1]) >= 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub structures: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub species: Vec<u32>,
    /// Fraction of structures drawn with the held-out pair.
    pub ood_fraction: f64,
    /// Held-out pair; defaults to two atoms of the heaviest species.
    pub ood_pair: Option<[u32; 2]>,
    /// Range of the per-structure displacement noise, Å.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Oracle relaxation budget used to find the reference minimum.
    pub relax_iterations: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            structures: 2000,
            min_atoms: 4,
            max_atoms: 10,
            species: vec![1, 6],
            ood_fraction: 0.2,
            ood_pair: None,
            noise_min: 0.02,
            noise_max: 0.12,
            relax_iterations: 5000,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn held_out(&self) -> [u32; 2] {
        self.ood_pair.unwrap_or_else(|| {
            let z = self.species.iter().copied().max().unwrap_or(1);
            [z, z]
        })
    }

    pub fn validate(&self, oracle: &OracleParams) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Generator(m.to_string()));
        if self.min_atoms < 2 || self.max_atoms < self.min_atoms {
            return bad("need 2 <= min_atoms <= max_atoms");
        }
        if self.species.is_empty() {
            return bad("species list is empty");
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return bad("ood_fraction must lie in [0, 1]");
        }
        if !(self.noise_min >= 0.0 && self.noise_max >= self.noise_min && self.noise_max.is_finite()) {
            return bad("need 0 <= noise_min <= noise_max");
        }
        let pair = self.held_out();
        if !pair.iter().all(|z| self.species.contains(z)) {
            return bad("held-out pair uses species outside the species list");
        }
        if self.ood_fraction > 0.0 && pair[0] == pair[1] && self.max_atoms < 2 {
            return bad("clusters are too small to hold the held-out pair");
        }
        for &a in &self.species {
            for &b in &self.species {
                oracle.pair(a, b)?;
            }
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 1000;

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = norm(v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn draw_composition(rng: &mut ChaCha8Rng, cfg: &GenerateConfig, n: usize, ood: bool) -> Result<Vec<u32>, DataError> {
    let pair = cfg.held_out();
    for _ in 0..MAX_ATTEMPTS {
        let numbers: Vec<u32> = (0..n).map(|_| cfg.species[rng.gen_range(0..cfg.species.len())]).collect();
        if has_pair(&numbers, pair) == ood {
            return Ok(numbers);
        }
    }
    Err(DataError::Unsatisfiable(MAX_ATTEMPTS))
}

/// Grows a compact cluster by attaching each atom near a random earlier one.
fn grow_cluster(rng: &mut ChaCha8Rng, oracle: &OracleParams, numbers: &[u32]) -> Result<Vec<Vec3>, DataError> {
    let mut positions: Vec<Vec3> = vec![[0.0; 3]];
    let mut attempts = 0;
    while positions.len() < numbers.len() {
        attempts += 1;
        if attempts > MAX_ATTEMPTS * numbers.len() {
            return Err(DataError::Unsatisfiable(attempts));
        }
        let i = positions.len();
        let anchor = rng.gen_range(0..i);
        let r = oracle.r_min(numbers[i], numbers[anchor])? * rng.gen_range(0.95..1.25);
        let u = random_unit(rng);
        let p = positions[anchor];
        let cand = [p[0] + r * u[0], p[1] + r * u[1], p[2] + r * u[2]];
        let mut ok = true;
        for (j, q) in positions.iter().enumerate() {
            if norm(sub(cand, *q)) < 0.9 * oracle.r_min(numbers[i], numbers[j])? {
                ok = false;
                break;
            }
        }
        if ok {
            positions.push(cand);
        }
    }
    // Center for readability of the files; energies are unaffected.
    let n = positions.len() as f64;
    let c = positions.iter().fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
    Ok(positions.iter().map(|p| sub(*p, c)).collect())
}

/// Oracle-relaxed cluster of the given composition. Clusters whose
/// relaxation does not converge within `iterations` steps sit on very flat
/// ground and are redrawn.
pub fn relaxed_cluster(
    rng: &mut ChaCha8Rng,
    oracle: &OracleParams,
    numbers: &[u32],
    iterations: usize,
) -> Result<AtomicSystem, DataError> {
    let cfg = RelaxConfig { max_iterations: iterations.max(1), ..reference_relax_config() };
    for _ in 0..MAX_ATTEMPTS {
        let positions = grow_cluster(rng, oracle, numbers)?;
        let start = AtomicSystem::new(positions, numbers.to_vec())?;
        let traj = relax(&start, &mut oracle.provider(), &cfg)?;
        if traj.status == RelaxStatus::Converged {
            return Ok(traj.last().clone());
        }
    }
    Err(DataError::Unsatisfiable(MAX_ATTEMPTS))
}

/// Adds isotropic Gaussian noise of standard deviation `sigma` to every coordinate.
pub fn perturb(rng: &mut ChaCha8Rng, system: &AtomicSystem, sigma: f64) -> AtomicSystem {
    let mut out = system.clone();
    for p in &mut out.positions {
        for v in p.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out.energy = None;
    out.forces = None;
    out
}

pub fn label(oracle: &OracleParams, system: &AtomicSystem, split: Split) -> Result<StructureRecord, DataError> {
    let (energy, forces) = oracle.energy_forces(system)?;
    Ok(StructureRecord { positions: system.positions.clone(), numbers: system.numbers.clone(), energy, forces, split })
}

/// Relative tolerance of the per-record oracle self-check.
pub const SELF_CHECK_TOLERANCE: f64 = 1e-8;
/// Finite-difference step of the self-check, Å. Small enough that a stencil
/// straddling a taper knot stays well inside the tolerance.
pub const SELF_CHECK_STEP: f64 = 1e-4;

/// Draws a seeded stream of labelled, perturbed near-minimum clusters.
pub fn generate_dataset(cfg: &GenerateConfig, oracle: &OracleParams) -> Result<Vec<StructureRecord>, DataError> {
    oracle.validate()?;
    cfg.validate(oracle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.structures);
    while out.len() < cfg.structures {
        let n = rng.gen_range(cfg.min_atoms..=cfg.max_atoms);
        let ood = rng.gen_bool(cfg.ood_fraction);
        let numbers = draw_composition(&mut rng, cfg, n, ood)?;
        let minimum = relaxed_cluster(&mut rng, oracle, &numbers, cfg.relax_iterations)?;
        let noise = rng.gen_range(cfg.noise_min..=cfg.noise_max);
        let system = perturb(&mut rng, &minimum, noise);
        if system.validate().is_err() {
            continue;
        }
        let record = match label(oracle, &system, if ood { Split::Ood } else { Split::Id }) {
            Ok(r) => r,
            Err(DataError::CoreOverlap { .. }) => continue,
            Err(e) => return Err(e),
        };
        let err = oracle.self_check(&system, SELF_CHECK_STEP)?;
        if err > SELF_CHECK_TOLERANCE {
            return Err(DataError::SelfCheck(err));
        }
        out.push(record);
    }
    Ok(out)
}

/// Start geometry and its oracle-relaxed reference for relaxation benchmarks.
#[derive(Clone, Debug)]
pub struct RelaxCase {
    pub start: AtomicSystem,
    pub reference: AtomicSystem,
}

/// Settings of the reference relaxation: far tighter than any benchmark run.
pub fn reference_relax_config() -> RelaxConfig {
    RelaxConfig { max_iterations: 5000, force_threshold: 1e-3, ..RelaxConfig::default() }
}

/// Relaxes `start` with the oracle to a tight reference minimum.
pub fn oracle_reference(oracle: &OracleParams, start: &AtomicSystem) -> Result<AtomicSystem, DataError> {
    let mut out = relax(start, &mut oracle.provider(), &reference_relax_config())?.last().clone();
    out.energy = None;
    out.forces = None;
    Ok(out)
}

/// In-domain clusters perturbed by `noise` Å around an oracle minimum,
/// paired with their oracle-relaxed references.
pub fn relaxation_cases(
    cfg: &GenerateConfig,
    oracle: &OracleParams,
    count: usize,
    noise: f64,
) -> Result<Vec<RelaxCase>, DataError> {
    oracle.validate()?;
    cfg.validate(oracle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(cfg.min_atoms..=cfg.max_atoms);
        let numbers = draw_composition(&mut rng, cfg, n, false)?;
        let minimum = relaxed_cluster(&mut rng, oracle, &numbers, cfg.relax_iterations)?;
        let start = perturb(&mut rng, &minimum, noise);
        if start.validate().is_err() || oracle.energy_forces(&start).is_err() {
            continue;
        }
        let reference = oracle_reference(oracle, &start)?;
        out.push(RelaxCase { start, reference });
    }
    Ok(out)
}

/// Summary statistics stored in the file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub structures: usize,
    pub id_structures: usize,
    pub ood_structures: usize,
    /// Median energy over the training subset, eV.
    pub median_energy: f64,
    /// Median force component over the training subset, eV/Å.
    pub median_force: f64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Subset of the in-domain records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
    Test,
}

/// In-domain records are dealt 8:1:1 into train, validation and test by
/// their order among in-domain records.
pub fn subset_of(id_index: usize) -> Subset {
    match id_index % 10 {
        8 => Subset::Val,
        9 => Subset::Test,
        _ => Subset::Train,
    }
}

#[derive(Clone, Debug, Default)]
pub struct Partition {
    pub train: Vec<StructureRecord>,
    pub val: Vec<StructureRecord>,
    pub test: Vec<StructureRecord>,
    pub ood: Vec<StructureRecord>,
}

pub fn partition(records: &[StructureRecord]) -> Partition {
    let mut p = Partition::default();
    let mut id_index = 0;
    for r in records {
        match r.split {
            Split::Ood => p.ood.push(r.clone()),
            Split::Id => {
                match subset_of(id_index) {
                    Subset::Train => p.train.push(r.clone()),
                    Subset::Val => p.val.push(r.clone()),
                    Subset::Test => p.test.push(r.clone()),
                }
                id_index += 1;
            }
        }
    }
    p
}

pub fn compute_stats(records: &[StructureRecord]) -> DatasetStats {
    let p = partition(records);
    let mut energies: Vec<f64> = p.train.iter().map(|r| r.energy).collect();
    let mut forces: Vec<f64> = p.train.iter().flat_map(|r| r.forces.iter().flatten().copied()).collect();
    DatasetStats {
        structures: records.len(),
        id_structures: p.train.len() + p.val.len() + p.test.len(),
        ood_structures: p.ood.len(),
        median_energy: median(&mut energies),
        median_force: median(&mut forces),
    }
}

pub const DATASET_FORMAT: &str = "spinconv-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub stats: DatasetStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub stats: DatasetStats,
    pub records: Vec<StructureRecord>,
}

impl Dataset {
    pub fn new(records: Vec<StructureRecord>) -> Self {
        Self { stats: compute_stats(&records), records }
    }

    /// Header line followed by one record per line.
    pub fn to_jsonl(&self) -> String {
        let header =
            DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION, stats: self.stats.clone() };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        let mut offset = 0;
        let mut header: Option<DatasetHeader> = None;
        let mut records = Vec::new();
        for (i, raw) in text.split_inclusive('\n').enumerate() {
            let line_no = i + 1;
            let start = offset;
            offset += raw.len();
            let complete = raw.ends_with('\n');
            let line = raw.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| {
                if complete {
                    DataError::Parse { line: line_no, message }
                } else {
                    DataError::Truncated { offset: start }
                }
            };
            match &header {
                None => {
                    let h: DatasetHeader = serde_json::from_str(line).map_err(|e| fail(format!("bad header: {e}")))?;
                    if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
                        return Err(DataError::Parse {
                            line: line_no,
                            message: format!("unsupported format {:?} version {}", h.format, h.version),
                        });
                    }
                    header = Some(h);
                }
                Some(_) => {
                    let r: StructureRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
                    r.validate().map_err(|m| DataError::Parse { line: line_no, message: m })?;
                    records.push(r);
                }
            }
        }
        let header = header.ok_or(DataError::Parse { line: 1, message: "missing header".into() })?;
        if records.len() != header.stats.structures {
            return Err(DataError::Truncated { offset });
        }
        Ok(Self { stats: header.stats, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn partition(&self) -> Partition {
        partition(&self.records)
    }
}

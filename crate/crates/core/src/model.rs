//! The full network: message passing, energy head, and both force variants.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::blocks::{
    init_messages, update_messages, DistanceBlock, EdgeInputs, EmbeddingBlock, MessageLayer, ScatterPlan,
    SpeciesInput, SpinConv,
};
use crate::geometry::{
    build_neighbor_graph, edge_frame, mat_t_vec, project_to_sphere, random_rotation, AtomicSystem, GeometryError,
    Mat3, NeighborGraph, Vec3, FRAME_AXIS_SWITCH,
};
use crate::params::{Bound, ParamError, ParamStore};
use crate::spherical::GridShape;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("atomic number {0} is not in the model's species table")]
    UnknownSpecies(u32),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Forces are the negative position gradient of the energy.
    EnergyCentric,
    /// Forces come from a dedicated three-axis force block.
    ForceCentric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Message size M.
    pub message_dim: usize,
    /// Number of message updates K.
    pub layers: usize,
    /// Hidden size D.
    pub hidden_dim: usize,
    /// Number of embedding experts B.
    pub experts: usize,
    /// Latitude nodes Φ, poles included.
    pub phi_cells: usize,
    /// Longitude nodes Θ.
    pub theta_cells: usize,
    /// Neighbor cutoff δ in Å.
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub variant: Variant,
    /// Random rotations averaged by the force block at inference.
    pub rotation_samples: usize,
    /// Gaussian basis functions per distance block.
    pub num_basis: usize,
    /// Groups in the normalization after each spin convolution.
    pub norm_groups: usize,
    pub norm_eps: f64,
    /// Supported atomic numbers, in one-hot order.
    pub species: Vec<u32>,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            message_dim: 8,
            layers: 3,
            hidden_dim: 32,
            experts: 4,
            phi_cells: 12,
            theta_cells: 16,
            cutoff: 6.0,
            max_neighbors: 30,
            variant: Variant::ForceCentric,
            rotation_samples: 5,
            num_basis: 64,
            norm_groups: 4,
            norm_eps: 1e-5,
            species: vec![1, 6],
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Defaults for the gradient-force model, which uses a coarser grid.
    pub fn energy_centric() -> Self {
        Self { variant: Variant::EnergyCentric, phi_cells: 8, theta_cells: 12, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        for (name, v) in [
            ("message_dim", self.message_dim),
            ("hidden_dim", self.hidden_dim),
            ("experts", self.experts),
            ("max_neighbors", self.max_neighbors),
            ("rotation_samples", self.rotation_samples),
            ("norm_groups", self.norm_groups),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.num_basis < 2 {
            return bad("num_basis must be at least 2".into());
        }
        if self.phi_cells < 2 || self.theta_cells < 2 {
            return bad(format!("grid {}x{} is too small; both sizes must be at least 2", self.phi_cells, self.theta_cells));
        }
        if !(self.cutoff.is_finite() && self.cutoff > 0.0) {
            return bad(format!("cutoff must be a positive length, got {}", self.cutoff));
        }
        if !self.hidden_dim.is_multiple_of(self.norm_groups) {
            return bad(format!("norm_groups {} must divide hidden_dim {}", self.norm_groups, self.hidden_dim));
        }
        if !(self.norm_eps >= 0.0) {
            return bad("norm_eps must be non-negative".into());
        }
        if self.species.is_empty() {
            return bad("species list is empty".into());
        }
        let mut sorted = self.species.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.species.len() {
            return bad("species list has duplicates".into());
        }
        if self.species.iter().any(|&z| z == 0 || z > crate::geometry::MAX_ATOMIC_NUMBER) {
            return bad("atomic numbers must lie in 1..=100".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> GridShape {
        GridShape { phi_cells: self.phi_cells, theta_cells: self.theta_cells }
    }

    fn species_index(&self, z: u32) -> Result<usize, ModelError> {
        self.species.iter().position(|&s| s == z).ok_or(ModelError::UnknownSpecies(z))
    }
}

/// Three-axis force head.
#[derive(Clone, Debug)]
pub struct ForceBlock {
    pub conv: SpinConv,
    pub embed_in: EmbeddingBlock,
    pub embed_out: EmbeddingBlock,
}

#[derive(Clone, Debug)]
struct Layout {
    init_dist: DistanceBlock,
    init_embed: EmbeddingBlock,
    layers: Vec<MessageLayer>,
    energy: EmbeddingBlock,
    force: Option<ForceBlock>,
}

impl Layout {
    fn build(c: &ModelConfig, store: &mut ParamStore) -> Result<Self, ParamError> {
        let (m, d, b, s, seed) = (c.message_dim, c.hidden_dim, c.experts, c.species.len(), c.seed);
        let grid = c.grid();
        let init_dist = DistanceBlock::register(store, seed, "init.dist", s, c.num_basis, c.cutoff, d)?;
        let init_embed = EmbeddingBlock::register(store, seed, "init.embed", d, d, b, s, SpeciesInput::Pair, m)?;
        let mut layers = Vec::with_capacity(c.layers);
        for k in 0..c.layers {
            let p = format!("layer{k}");
            layers.push(MessageLayer {
                conv: SpinConv::register(store, seed, &format!("{p}.conv"), grid, m, d, c.norm_groups, c.norm_eps)?,
                embed_in: EmbeddingBlock::register(
                    store,
                    seed,
                    &format!("{p}.embed_in"),
                    d,
                    d,
                    b,
                    s,
                    SpeciesInput::Pair,
                    d,
                )?,
                dist: DistanceBlock::register(store, seed, &format!("{p}.dist"), s, c.num_basis, c.cutoff, d)?,
                embed_out: EmbeddingBlock::register(
                    store,
                    seed,
                    &format!("{p}.embed_out"),
                    d,
                    d,
                    b,
                    s,
                    SpeciesInput::Pair,
                    m,
                )?,
            });
        }
        let energy = EmbeddingBlock::register(store, seed, "energy", m, d, b, s, SpeciesInput::Target, 1)?;
        let force = match c.variant {
            Variant::EnergyCentric => None,
            Variant::ForceCentric => Some(ForceBlock {
                conv: SpinConv::register(store, seed, "force.conv", grid, m, d, c.norm_groups, c.norm_eps)?,
                embed_in: EmbeddingBlock::register(store, seed, "force.embed_in", d, d, b, s, SpeciesInput::Target, d)?,
                embed_out: EmbeddingBlock::register(
                    store,
                    seed,
                    "force.embed_out",
                    d,
                    d,
                    b,
                    s,
                    SpeciesInput::Target,
                    1,
                )?,
            }),
        };
        Ok(Self { init_dist, init_embed, layers, energy, force })
    }
}

/// Topology and species tables for one structure, fixed while positions
/// move within the same neighbor lists.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub graph: NeighborGraph,
    source: Arc<[usize]>,
    target: Arc<[usize]>,
    pair: Arc<[usize]>,
    pair_species: Tensor,
    atom_species: Tensor,
    item_rows: Arc<[usize]>,
    item_grid: Arc<[usize]>,
    antipodal: Arc<[bool]>,
    force_rows: Arc<[usize]>,
    force_grid: Arc<[usize]>,
    force_axes: Tensor,
    force_species: Tensor,
}

impl Prepared {
    pub fn new(system: &AtomicSystem, config: &ModelConfig) -> Result<Self, ModelError> {
        system.validate()?;
        let graph = build_neighbor_graph(system, config.cutoff, config.max_neighbors)?;
        let s = config.species.len();
        let n = system.len();
        let kinds = system.numbers.iter().map(|&z| config.species_index(z)).collect::<Result<Vec<_>, _>>()?;
        let source = graph.sources();
        let target = graph.targets();
        let e = source.len();
        let pair: Vec<usize> = (0..e).map(|i| kinds[source[i]] * s + kinds[target[i]]).collect();
        let mut pair_species = vec![0.0; e * 2 * s];
        for i in 0..e {
            pair_species[i * 2 * s + kinds[source[i]]] = 1.0;
            pair_species[i * 2 * s + s + kinds[target[i]]] = 1.0;
        }
        let mut atom_species = vec![0.0; n * s];
        for (t, &k) in kinds.iter().enumerate() {
            atom_species[t * s + k] = 1.0;
        }
        let (mut item_rows, mut item_grid, mut antipodal) = (Vec::new(), Vec::new(), Vec::new());
        for edge in 0..e {
            for &inc in &graph.incoming[source[edge]] {
                item_rows.push(inc);
                item_grid.push(edge);
                antipodal.push(source[inc] == target[edge]);
            }
        }
        let (mut force_rows, mut force_grid, mut force_axes) = (Vec::new(), Vec::new(), Vec::new());
        let mut force_species = vec![0.0; 3 * n * s];
        for t in 0..n {
            for axis in 0..3 {
                force_species[(3 * t + axis) * s + kinds[t]] = 1.0;
                for &inc in &graph.incoming[t] {
                    force_rows.push(inc);
                    force_grid.push(3 * t + axis);
                    let mut a = [0.0; 3];
                    a[axis] = 1.0;
                    force_axes.extend_from_slice(&a);
                }
            }
        }
        let items = force_rows.len();
        Ok(Self {
            graph,
            pair: pair.into(),
            pair_species: Tensor::from_parts(vec![e, 2 * s], pair_species),
            atom_species: Tensor::from_parts(vec![n, s], atom_species),
            source: source.into(),
            target: target.into(),
            item_rows: item_rows.into(),
            item_grid: item_grid.into(),
            antipodal: antipodal.into(),
            force_rows: force_rows.into(),
            force_grid: force_grid.into(),
            force_axes: Tensor::from_parts(vec![items, 3], force_axes),
            force_species: Tensor::from_parts(vec![3 * n, s], force_species),
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.graph.n_atoms
    }

    pub fn num_items(&self) -> usize {
        self.item_rows.len()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub energy: Var,
    /// Per-atom energies `[n, 1]`.
    pub atom_energies: Var,
    /// Hidden messages `[E, M]` after initialization and after each layer.
    pub messages: Vec<Var>,
    /// Force-block output `[n, 3]` in the frame of the evaluated positions.
    pub forces: Option<Var>,
}

/// Energy and per-atom forces in eV and eV/Å.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

pub fn rows_to_vec3(t: &Tensor) -> Vec<Vec3> {
    (0..t.rows()).map(|i| [t.row(i)[0], t.row(i)[1], t.row(i)[2]]).collect()
}

pub fn positions_tensor(positions: &[Vec3]) -> Tensor {
    Tensor::from_parts(vec![positions.len(), 3], positions.iter().flatten().copied().collect())
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn force_block(&self) -> Option<&ForceBlock> {
        self.layout.force.as_ref()
    }

    pub fn prepare(&self, system: &AtomicSystem) -> Result<Prepared, ModelError> {
        Prepared::new(system, &self.config)
    }

    /// Records the network on `tape` for positions `[n, 3]`.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        prep: &Prepared,
        positions: Var,
        with_force_block: bool,
    ) -> Result<Forward, ModelError> {
        let l = &self.layout;
        let n = prep.num_atoms();
        let offsets = tape.pair_diff(positions, Arc::clone(&prep.source), Arc::clone(&prep.target))?;
        let distance = tape.row_norm(offsets)?;
        let unit = tape.normalize_rows(offsets)?;
        let axes = tape.gather_rows(unit, Arc::clone(&prep.item_grid))?;
        let dirs = tape.gather_rows(unit, Arc::clone(&prep.item_rows))?;
        let angles = tape.polar_angles(axes, dirs, Arc::clone(&prep.antipodal))?;
        let edges = EdgeInputs {
            distance,
            pair: Arc::clone(&prep.pair),
            pair_species: tape.constant(prep.pair_species.clone()),
            plan: ScatterPlan {
                angles,
                rows: Arc::clone(&prep.item_rows),
                grid: Arc::clone(&prep.item_grid),
                grids: prep.source.len(),
            },
        };
        let mut h = init_messages(tape, bound, &l.init_dist, &l.init_embed, &edges)?;
        let mut messages = vec![h];
        for layer in &l.layers {
            h = update_messages(tape, bound, layer, h, &edges)?;
            messages.push(h);
        }
        let atom_species = tape.constant(prep.atom_species.clone());
        let node = tape.segment_sum(h, Arc::clone(&prep.target), n)?;
        let atom_energies = l.energy.forward(tape, bound, node, atom_species)?;
        let energy = tape.sum_all(atom_energies)?;
        let forces = match (&l.force, with_force_block) {
            (Some(fb), true) => {
                let axes = tape.constant(prep.force_axes.clone());
                let dirs = tape.gather_rows(unit, Arc::clone(&prep.force_rows))?;
                let no_flags: Arc<[bool]> = vec![false; prep.force_rows.len()].into();
                let angles = tape.polar_angles(axes, dirs, no_flags)?;
                let plan =
                    ScatterPlan { angles, rows: Arc::clone(&prep.force_rows), grid: Arc::clone(&prep.force_grid), grids: 3 * n };
                let conv = fb.conv.forward(tape, bound, h, &plan)?;
                let species = tape.constant(prep.force_species.clone());
                let a = fb.embed_in.forward(tape, bound, conv, species)?;
                let out = fb.embed_out.forward(tape, bound, a, species)?;
                Some(tape.reshape(out, vec![n, 3])?)
            }
            _ => None,
        };
        Ok(Forward { energy, atom_energies, messages, forces })
    }

    pub fn energy(&self, system: &AtomicSystem) -> Result<f64, ModelError> {
        let prep = self.prepare(system)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let pos = tape.constant(positions_tensor(&system.positions));
        let fwd = self.forward(&tape, &bound, &prep, pos, false)?;
        Ok(tape.value(fwd.energy).item())
    }

    /// Hidden messages `h⁰ … h^K`, one row per edge of the neighbor graph.
    pub fn messages(&self, system: &AtomicSystem) -> Result<(NeighborGraph, Vec<Tensor>), ModelError> {
        let prep = self.prepare(system)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let pos = tape.constant(positions_tensor(&system.positions));
        let fwd = self.forward(&tape, &bound, &prep, pos, false)?;
        let msgs = fwd.messages.iter().map(|&v| (*tape.value(v)).clone()).collect();
        Ok((prep.graph, msgs))
    }

    /// Energy and `-∂E/∂x`, whatever the variant.
    pub fn energy_and_gradient_forces(&self, system: &AtomicSystem) -> Result<Prediction, ModelError> {
        let prep = self.prepare(system)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let pos = tape.leaf(positions_tensor(&system.positions), true);
        let fwd = self.forward(&tape, &bound, &prep, pos, false)?;
        let grads = tape.backward(fwd.energy)?;
        let forces = rows_to_vec3(&grads.wrt(pos).map(|v| -v));
        Ok(Prediction { energy: tape.value(fwd.energy).item(), forces })
    }

    /// Energy and force-block output for the structure as given, without
    /// any rotation.
    pub fn force_block_forces(&self, system: &AtomicSystem) -> Result<Prediction, ModelError> {
        if self.layout.force.is_none() {
            return Err(ModelError::Config("energy-centric models have no force block".into()));
        }
        let prep = self.prepare(system)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let pos = tape.constant(positions_tensor(&system.positions));
        let fwd = self.forward(&tape, &bound, &prep, pos, true)?;
        let f = fwd.forces.expect("force block requested");
        Ok(Prediction { energy: tape.value(fwd.energy).item(), forces: rows_to_vec3(&tape.value(f)) })
    }

    /// Force-block estimate averaged over the given global rotations. Each
    /// estimate is computed on the rotated structure and rotated back.
    pub fn rotation_averaged(&self, system: &AtomicSystem, rotations: &[Mat3]) -> Result<Prediction, ModelError> {
        if rotations.is_empty() {
            return Err(ModelError::Config("at least one rotation is required".into()));
        }
        let n = system.len();
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; n];
        for q in rotations {
            let p = self.force_block_forces(&system.rotated(q))?;
            energy += p.energy;
            for (acc, f) in forces.iter_mut().zip(&p.forces) {
                let back = mat_t_vec(q, *f);
                for k in 0..3 {
                    acc[k] += back[k];
                }
            }
        }
        let r = rotations.len() as f64;
        for f in &mut forces {
            for v in f.iter_mut() {
                *v /= r;
            }
        }
        Ok(Prediction { energy: energy / r, forces })
    }

    /// Energy and forces by the configured variant. Force-centric models
    /// draw `rotation_samples` rotations from `rng`.
    pub fn predict<R: Rng + ?Sized>(&self, system: &AtomicSystem, rng: &mut R) -> Result<Prediction, ModelError> {
        match self.config.variant {
            Variant::EnergyCentric => self.energy_and_gradient_forces(system),
            Variant::ForceCentric => {
                let rotations: Vec<Mat3> = (0..self.config.rotation_samples).map(|_| random_rotation(rng)).collect();
                self.rotation_averaged(system, &rotations)
            }
        }
    }

    /// Distance from the points where the energy itself jumps: an edge
    /// crossing the cutoff, a change in which neighbors are kept, or an edge
    /// axis crossing the frame-axis switch.
    pub fn continuity_margin(&self, system: &AtomicSystem) -> Result<f64, ModelError> {
        let g = build_neighbor_graph(system, self.config.cutoff, self.config.max_neighbors)?;
        let mut margin = f64::INFINITY;
        for t in 0..system.len() {
            for s in 0..system.len() {
                if s != t {
                    let d = crate::geometry::norm(crate::geometry::sub(system.positions[s], system.positions[t]));
                    margin = margin.min((d - self.config.cutoff).abs());
                }
            }
            let mut ds: Vec<f64> = (0..system.len())
                .filter(|&s| s != t)
                .map(|s| crate::geometry::norm(crate::geometry::sub(system.positions[s], system.positions[t])))
                .filter(|&d| d < self.config.cutoff)
                .collect();
            ds.sort_by(f64::total_cmp);
            if ds.len() > self.config.max_neighbors {
                margin = margin.min(ds[self.config.max_neighbors] - ds[self.config.max_neighbors - 1]);
            }
        }
        for edge in &g.edges {
            margin = margin.min((edge.unit[2].abs() - FRAME_AXIS_SWITCH).abs());
        }
        Ok(margin)
    }

    /// Smallest distance from any non-smooth point of the energy surface:
    /// the cutoff, the neighbor-count truncation, the frame-axis switch, and
    /// grid node lines crossed by message projections. Lengths in Å, angles
    /// in radians.
    pub fn smoothness_margin(&self, system: &AtomicSystem) -> Result<f64, ModelError> {
        let prep = self.prepare(system)?;
        let g = &prep.graph;
        let mut margin = self.continuity_margin(system)?;
        let shape = self.config.grid();
        for i in 0..prep.item_rows.len() {
            if prep.antipodal[i] {
                continue;
            }
            let axis = &g.edges[prep.item_grid[i]];
            let dir = &g.edges[prep.item_rows[i]];
            let frame = edge_frame(axis.unit)?;
            let (phi, theta) = project_to_sphere(&frame, dir.unit);
            let fp = phi / shape.phi_step();
            margin = margin.min((fp - fp.round()).abs() * shape.phi_step());
            let ft = theta / shape.theta_step();
            margin = margin.min((ft - ft.round()).abs() * shape.theta_step());
        }
        Ok(margin)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .ids()
                .map(|id| {
                    let t = self.params.get(id);
                    NamedArray { name: self.params.name(id).to_string(), shape: t.shape().to_vec(), values: t.data().to_vec() }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, ModelError> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unexpected format tag {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let mut model = Self::new(ckpt.config)?;
        if ckpt.params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        for p in ckpt.params {
            let t = Tensor::new(p.shape, p.values).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", p.name)))?;
            model.params.set(&p.name, t)?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "spinconv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: the model config plus every parameter by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

//! Distance, embedding and spin-convolution blocks, and the message update.

use std::sync::Arc;

use crate::autodiff::{Result, Tape, Tensor, Var};
use crate::params::{glorot, name_rng, smooth_filters, Bound, ParamError, ParamId, ParamStore};
use crate::spherical::GridShape;

/// Which atomic numbers feed an embedding block's expert weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeciesInput {
    /// One-hot of source and target, concatenated.
    Pair,
    /// One-hot of the target only.
    Target,
}

fn linear(tape: &Tape, bound: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = tape.matmul(x, bound.var(w))?;
    tape.add_row(y, bound.var(b))
}

fn register_linear(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> std::result::Result<(ParamId, ParamId), ParamError> {
    let w = store.insert(&format!("{name}.w"), glorot(&mut name_rng(seed, name), fan_in, fan_out))?;
    let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok((w, b))
}

/// Gaussian basis means evenly spaced on `[0, cutoff]` and their shared width.
pub fn gaussian_basis(cutoff: f64, count: usize) -> (Arc<[f64]>, f64) {
    let spacing = cutoff / (count - 1) as f64;
    let means: Vec<f64> = (0..count).map(|i| i as f64 * spacing).collect();
    (means.into(), 3.0 * spacing)
}

/// Species-aware Gaussian expansion of edge lengths, mapped to `D` features.
#[derive(Clone, Debug)]
pub struct DistanceBlock {
    pub gain: ParamId,
    pub offset: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub means: Arc<[f64]>,
    pub sigma: f64,
}

impl DistanceBlock {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        species: usize,
        basis: usize,
        cutoff: f64,
        out: usize,
    ) -> std::result::Result<Self, ParamError> {
        let pairs = species * species;
        let gain = store.insert(&format!("{prefix}.gain"), Tensor::filled(&[pairs], 1.0))?;
        let offset = store.insert(&format!("{prefix}.offset"), Tensor::zeros(&[pairs]))?;
        let (weight, bias) = register_linear(store, seed, &format!("{prefix}.lin"), basis, out)?;
        let (means, sigma) = gaussian_basis(cutoff, basis);
        Ok(Self { gain, offset, weight, bias, means, sigma })
    }

    /// Raw basis values `[E, basis]` for edge lengths `d [E]` of the given
    /// ordered species pairs.
    pub fn basis(&self, tape: &Tape, bound: &Bound, d: Var, pair: &Arc<[usize]>) -> Result<Var> {
        let gain = tape.gather_rows(bound.var(self.gain), Arc::clone(pair))?;
        let offset = tape.gather_rows(bound.var(self.offset), Arc::clone(pair))?;
        let z = tape.mul(gain, d)?;
        let z = tape.add(z, offset)?;
        tape.gaussian(z, Arc::clone(&self.means), self.sigma)
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, d: Var, pair: &Arc<[usize]>) -> Result<Var> {
        let b = self.basis(tape, bound, d, pair)?;
        linear(tape, bound, b, self.weight, self.bias)
    }
}

/// Mixture of `B` expert projections weighted by a species-dependent softmax.
#[derive(Clone, Debug)]
pub struct EmbeddingBlock {
    pub values: (ParamId, ParamId),
    pub mix_hidden: (ParamId, ParamId),
    pub mix_out: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub species_input: SpeciesInput,
}

impl EmbeddingBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        input: usize,
        hidden: usize,
        experts: usize,
        species: usize,
        species_input: SpeciesInput,
        out: usize,
    ) -> std::result::Result<Self, ParamError> {
        let features = match species_input {
            SpeciesInput::Pair => 2 * species,
            SpeciesInput::Target => species,
        };
        Ok(Self {
            values: register_linear(store, seed, &format!("{prefix}.values"), input, hidden * experts)?,
            mix_hidden: register_linear(store, seed, &format!("{prefix}.mix1"), features, 2 * experts)?,
            mix_out: register_linear(store, seed, &format!("{prefix}.mix2"), 2 * experts, experts)?,
            output: register_linear(store, seed, &format!("{prefix}.out"), hidden, out)?,
            species_input,
        })
    }

    /// Softmax expert weights `[N, B]` from one-hot species features.
    pub fn expert_weights(&self, tape: &Tape, bound: &Bound, species: Var) -> Result<Var> {
        let h = linear(tape, bound, species, self.mix_hidden.0, self.mix_hidden.1)?;
        let h = tape.swish(h)?;
        let logits = linear(tape, bound, h, self.mix_out.0, self.mix_out.1)?;
        tape.softmax_rows(logits)
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var, species: Var) -> Result<Var> {
        let v = linear(tape, bound, x, self.values.0, self.values.1)?;
        let w = self.expert_weights(tape, bound, species)?;
        let mixed = tape.mixture(v, w)?;
        let mixed = tape.swish(mixed)?;
        linear(tape, bound, mixed, self.output.0, self.output.1)
    }
}

/// Spin convolution with its bias, pre-pool Swish, pooling over longitude,
/// and a normalization with per-channel affine.
#[derive(Clone, Debug)]
pub struct SpinConv {
    pub filters: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub shape: GridShape,
    pub groups: usize,
    pub eps: f64,
}

/// Scatter items for one spin convolution: item `i` deposits row `rows[i]`
/// of the value matrix into grid `grid[i]` at `angles[i]`.
#[derive(Clone, Debug)]
pub struct ScatterPlan {
    pub angles: Var,
    pub rows: Arc<[usize]>,
    pub grid: Arc<[usize]>,
    pub grids: usize,
}

impl SpinConv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        shape: GridShape,
        channels: usize,
        filters: usize,
        groups: usize,
        eps: f64,
    ) -> std::result::Result<Self, ParamError> {
        let name = format!("{prefix}.filters");
        let w = smooth_filters(&mut name_rng(seed, &name), filters, shape.phi_cells, shape.theta_cells, channels);
        Ok(Self {
            filters: store.insert(&name, w)?,
            bias: store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[filters]))?,
            gamma: store.insert(&format!("{prefix}.gamma"), Tensor::filled(&[filters], 1.0))?,
            beta: store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[filters]))?,
            shape,
            groups,
            eps,
        })
    }

    /// Pooled, normalized features `[grids, D]`.
    pub fn forward(&self, tape: &Tape, bound: &Bound, values: Var, plan: &ScatterPlan) -> Result<Var> {
        let filters = bound.var(self.filters);
        let d = tape.value(filters).shape()[0];
        let t = self.shape.theta_cells;
        let corr = tape.scatter_correlate(
            values,
            plan.angles,
            filters,
            Arc::clone(&plan.rows),
            Arc::clone(&plan.grid),
            plan.grids,
            self.shape,
        )?;
        let flat = tape.reshape(corr, vec![plan.grids * t, d])?;
        let flat = tape.add_row(flat, bound.var(self.bias))?;
        let act = tape.swish(flat)?;
        let act = tape.reshape(act, vec![plan.grids, t, d])?;
        let pooled = tape.mean_axis(act, 1)?;
        let normed = tape.group_norm(pooled, self.groups, self.eps)?;
        let scaled = tape.mul_row(normed, bound.var(self.gamma))?;
        tape.add_row(scaled, bound.var(self.beta))
    }
}

/// Per-edge quantities shared by every message layer.
#[derive(Clone, Debug)]
pub struct EdgeInputs {
    /// Edge lengths `[E]`.
    pub distance: Var,
    /// Ordered species-pair index of each edge.
    pub pair: Arc<[usize]>,
    /// One-hot source and target species `[E, 2S]`.
    pub pair_species: Var,
    /// Scatter of incoming messages onto each edge's sphere.
    pub plan: ScatterPlan,
}

/// `h⁰ = embed(distance(d))`, one row per edge.
pub fn init_messages(
    tape: &Tape,
    bound: &Bound,
    dist: &DistanceBlock,
    embed: &EmbeddingBlock,
    edges: &EdgeInputs,
) -> Result<Var> {
    let b = dist.forward(tape, bound, edges.distance, &edges.pair)?;
    embed.forward(tape, bound, b, edges.pair_species)
}

/// One residual message update.
#[derive(Clone, Debug)]
pub struct MessageLayer {
    pub conv: SpinConv,
    pub embed_in: EmbeddingBlock,
    pub dist: DistanceBlock,
    pub embed_out: EmbeddingBlock,
}

/// `h ← h + embed_out(embed_in(conv(h)) + distance(d))`.
pub fn update_messages(tape: &Tape, bound: &Bound, layer: &MessageLayer, h: Var, edges: &EdgeInputs) -> Result<Var> {
    let conv = layer.conv.forward(tape, bound, h, &edges.plan)?;
    let a = layer.embed_in.forward(tape, bound, conv, edges.pair_species)?;
    let b = layer.dist.forward(tape, bound, edges.distance, &edges.pair)?;
    let c = tape.add(a, b)?;
    let delta = layer.embed_out.forward(tape, bound, c, edges.pair_species)?;
    tape.add(h, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup_distance() -> (ParamStore, DistanceBlock) {
        let mut store = ParamStore::new();
        let block = DistanceBlock::register(&mut store, 0, "dist", 2, 64, 6.0, 4).unwrap();
        (store, block)
    }

    fn basis_at(store: &ParamStore, block: &DistanceBlock, d: f64) -> Vec<f64> {
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let dv = tape.constant(Tensor::vector(vec![d]));
        let pair: Arc<[usize]> = Arc::from(vec![1]);
        let b = block.basis(&tape, &bound, dv, &pair).unwrap();
        tape.value(b).data().to_vec()
    }

    #[test]
    fn basis_means_and_width() {
        let (means, sigma) = gaussian_basis(6.0, 64);
        assert!(means.windows(2).all(|w| w[1] > w[0]));
        assert!((sigma - 3.0 * (means[1] - means[0])).abs() < 1e-15);
        assert_eq!(means[63], 6.0);
    }

    #[test]
    fn gaussian_peaks_at_its_mean() {
        let (store, block) = setup_distance();
        let b = basis_at(&store, &block, block.means[10]);
        assert_eq!(b[10], 1.0);
        let b = basis_at(&store, &block, block.means[10] + block.sigma);
        assert!((b[10] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((b[10] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn basis_vanishes_far_outside_range() {
        let (store, block) = setup_distance();
        let far = 6.0 + 3.0 * block.sigma + 4.0;
        assert!(basis_at(&store, &block, far).iter().all(|&v| v < 1e-4));
        assert!(basis_at(&store, &block, -3.0 * block.sigma - 4.0).iter().all(|&v| v < 1e-4));
    }

    fn embedding(experts: usize, input: usize, out: usize) -> (ParamStore, EmbeddingBlock) {
        let mut store = ParamStore::new();
        let block =
            EmbeddingBlock::register(&mut store, 5, "emb", input, 2, experts, 2, SpeciesInput::Pair, out).unwrap();
        (store, block)
    }

    #[test]
    fn single_expert_gets_full_weight() {
        let (store, block) = embedding(1, 3, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let sp = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]]));
        let w = block.expert_weights(&tape, &bound, sp).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn expert_weights_sum_to_one_and_depend_only_on_species() {
        let (store, block) = embedding(4, 3, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let sp = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0], [1.0, 0.0, 0.0, 1.0]]));
        let w = tape.value(block.expert_weights(&tape, &bound, sp).unwrap());
        for i in 0..3 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert_eq!(w.row(0), w.row(2));
    }

    #[test]
    fn equal_logits_average_the_experts() {
        // Hand-set: D = 2, B = 2, identity value map, zero mixing network.
        let (mut store, block) = embedding(2, 4, 1);
        store.set("emb.values.w", Tensor::identity(4)).unwrap();
        store.set("emb.mix2.w", Tensor::zeros(&[4, 2])).unwrap();
        store.set("emb.out.w", Tensor::from_rows(&[[1.0], [10.0]])).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        // Columns d·B + b: feature 0 experts (1, 3), feature 1 experts (2, 6).
        let x = tape.constant(Tensor::from_rows(&[[1.0, 3.0, 2.0, 6.0]]));
        let sp = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 1.0]]));
        let y = block.forward(&tape, &bound, x, sp).unwrap();
        let swish = crate::spherical::swish;
        let expected = swish(2.0) + 10.0 * swish(4.0);
        assert!((tape.value(y).item() - expected).abs() < 1e-12);
    }
}

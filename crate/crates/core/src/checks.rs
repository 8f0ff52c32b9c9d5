//! Invariant checks on a model that hold by construction, before any
//! training: symmetry, gradient correctness, energy conservation and the
//! roll invariance of the spin convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::geometry::{random_rotation, AtomicSystem, Mat3, Vec3};
use crate::model::{Model, ModelConfig, ModelError};
use crate::spherical::{spin_convolution, Activation, GridShape, SphericalGrid, SpinFilter};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Measured error.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.to_string(), value, tolerance, passed: value < tolerance, detail }
    }
}

/// Random cluster of `n` atoms of the model's species with every pair at
/// least `min_distance` Å apart.
pub fn random_cluster(rng: &mut impl Rng, species: &[u32], n: usize, half_width: f64, min_distance: f64) -> AtomicSystem {
    loop {
        let positions: Vec<Vec3> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-half_width..half_width),
                    rng.gen_range(-half_width..half_width),
                    rng.gen_range(-half_width..half_width),
                ]
            })
            .collect();
        let numbers = (0..n).map(|_| species[rng.gen_range(0..species.len())]).collect();
        if let Ok(s) = AtomicSystem::new(positions, numbers) {
            if s.min_distance() >= min_distance {
                return s;
            }
        }
    }
}

/// Random cluster at least `margin` away from every non-smooth point of the
/// model's energy surface.
pub fn smooth_cluster(model: &Model, rng: &mut impl Rng, n: usize, margin: f64) -> Result<AtomicSystem, ModelError> {
    loop {
        let s = random_cluster(rng, &model.config().species, n, 2.5, 1.2);
        if model.smoothness_margin(&s)? > margin {
            return Ok(s);
        }
    }
}

/// Largest relative deviation between `-∂E/∂x` and a central difference of
/// the energy, per system; the value reported is the worst system.
pub fn gradient_check(model: &Model, systems: &[AtomicSystem], step: f64, tolerance: f64) -> Result<CheckOutcome, ModelError> {
    let mut worst: f64 = 0.0;
    for s in systems {
        let forces = model.energy_and_gradient_forces(s)?.forces;
        let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
        let mut probe = s.clone();
        for i in 0..s.len() {
            for k in 0..3 {
                let x0 = s.positions[i][k];
                probe.positions[i][k] = x0 + step;
                let plus = model.energy(&probe)?;
                probe.positions[i][k] = x0 - step;
                let minus = model.energy(&probe)?;
                probe.positions[i][k] = x0;
                let fd = -(plus - minus) / (2.0 * step);
                err = err.max((fd - forces[i][k]).abs());
                scale = scale.max(fd.abs());
            }
        }
        worst = worst.max(if scale > 0.0 { err / scale } else { err });
    }
    Ok(CheckOutcome::below(
        "gradient",
        worst,
        tolerance,
        format!("{} systems, central differences with step {step} Å", systems.len()),
    ))
}

/// Path `x(s) = x₀ + s·a + sin(πs)·b` on `[0, 1]` and its derivative.
struct Path {
    start: AtomicSystem,
    a: Vec<Vec3>,
    b: Vec<Vec3>,
}

impl Path {
    fn at(&self, s: f64) -> (AtomicSystem, Vec<Vec3>) {
        let w = (std::f64::consts::PI * s).sin();
        let dw = std::f64::consts::PI * (std::f64::consts::PI * s).cos();
        let mut sys = self.start.clone();
        let mut vel = Vec::with_capacity(sys.len());
        for ((x, a), b) in sys.positions.iter_mut().zip(&self.a).zip(&self.b) {
            for k in 0..3 {
                x[k] += s * a[k] + w * b[k];
            }
            vel.push([a[0] + dw * b[0], a[1] + dw * b[1], a[2] + dw * b[2]]);
        }
        (sys, vel)
    }
}

/// Energy change along a path versus the work done by the gradient forces,
/// integrated with composite Simpson's rule; the error is relative to the
/// energy change. Paths that would cross a point where the energy jumps, or
/// whose endpoints differ by less than a tenth of the energy variation along
/// the way, are redrawn.
pub fn conservation_check(
    model: &Model,
    rng: &mut impl Rng,
    paths: usize,
    intervals: usize,
    tolerance: f64,
) -> Result<CheckOutcome, ModelError> {
    let intervals = intervals + intervals % 2;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < paths {
        let n = rng.gen_range(4..=6);
        let start = random_cluster(rng, &model.config().species, n, 2.0, 1.3);
        let draw = |rng: &mut dyn rand::RngCore, sigma: f64| -> Vec<Vec3> {
            (0..n)
                .map(|_| {
                    [
                        sigma * rng.sample::<f64, _>(StandardNormal),
                        sigma * rng.sample::<f64, _>(StandardNormal),
                        sigma * rng.sample::<f64, _>(StandardNormal),
                    ]
                })
                .collect()
        };
        let a = draw(rng, 0.15);
        let b = draw(rng, 0.1);
        let path = Path { start, a, b };
        let h = 1.0 / intervals as f64;
        let mut work = 0.0;
        let mut variation = 0.0;
        let mut ok = true;
        let mut energies = (0.0, 0.0);
        for i in 0..=intervals {
            let (sys, vel) = path.at(i as f64 * h);
            if sys.validate().is_err() || model.continuity_margin(&sys)? < 1e-3 {
                ok = false;
                break;
            }
            let p = model.energy_and_gradient_forces(&sys)?;
            let power: f64 = p.forces.iter().zip(&vel).map(|(f, v)| f[0] * v[0] + f[1] * v[1] + f[2] * v[2]).sum();
            let w = if i == 0 || i == intervals { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            work += w * power;
            variation += w * power.abs();
            if i == 0 {
                energies.0 = p.energy;
            }
            if i == intervals {
                energies.1 = p.energy;
            }
        }
        if !ok {
            continue;
        }
        work *= h / 3.0;
        variation *= h / 3.0;
        let change = energies.1 - energies.0;
        // Loops that return near their starting energy make the ratio meaningless.
        if change.abs() < 0.1 * variation {
            continue;
        }
        worst = worst.max((change + work).abs() / change.abs());
        done += 1;
    }
    Ok(CheckOutcome::below(
        "conservation",
        worst,
        tolerance,
        format!("{paths} paths, {intervals} Simpson intervals, relative to the energy change"),
    ))
}

pub fn translation_check(model: &Model, systems: &[AtomicSystem], rng: &mut impl Rng) -> Result<CheckOutcome, ModelError> {
    let mut worst: f64 = 0.0;
    for s in systems {
        let shift = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
        worst = worst.max((model.energy(s)? - model.energy(&s.translated(shift))?).abs());
    }
    Ok(CheckOutcome::below("translation", worst, 1e-10, "absolute energy change, eV".into()))
}

pub fn permutation_check(model: &Model, systems: &[AtomicSystem], rng: &mut impl Rng) -> Result<CheckOutcome, ModelError> {
    use rand::seq::SliceRandom;
    let mut worst: f64 = 0.0;
    for s in systems {
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.shuffle(rng);
        worst = worst.max((model.energy(s)? - model.energy(&s.permuted(&perm))?).abs());
    }
    Ok(CheckOutcome::below("permutation", worst, 1e-10, "absolute energy change, eV".into()))
}

/// Relative energy change of `system` under each rotation.
pub fn rotation_errors(model: &Model, system: &AtomicSystem, rotations: &[Mat3]) -> Result<Vec<f64>, ModelError> {
    let e = model.energy(system)?;
    rotations.iter().map(|q| Ok(((model.energy(&system.rotated(q))? - e) / e).abs())).collect()
}

pub fn rotation_check(
    model: &Model,
    system: &AtomicSystem,
    rotations: &[Mat3],
    tolerance: f64,
) -> Result<CheckOutcome, ModelError> {
    let errs = rotation_errors(model, system, rotations)?;
    let max = errs.iter().copied().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    Ok(CheckOutcome::below(
        "rotation",
        max,
        tolerance,
        format!("{} rotations, mean relative error {mean:.3e}", rotations.len()),
    ))
}

/// Mean relative rotation error at the model's azimuth resolution and at
/// double that resolution; passes when the finer grid does better.
pub fn rotation_refinement_check(
    config: &ModelConfig,
    system: &AtomicSystem,
    rotations: &[Mat3],
) -> Result<CheckOutcome, ModelError> {
    let coarse = Model::new(config.clone())?;
    let fine = Model::new(ModelConfig { theta_cells: 2 * config.theta_cells, ..config.clone() })?;
    let mean = |m: &Model| -> Result<f64, ModelError> {
        let e = rotation_errors(m, system, rotations)?;
        Ok(e.iter().sum::<f64>() / e.len().max(1) as f64)
    };
    let (c, f) = (mean(&coarse)?, mean(&fine)?);
    Ok(CheckOutcome {
        name: "rotation-refinement".into(),
        value: f / c,
        tolerance: 1.0,
        passed: f < c,
        detail: format!(
            "mean relative error {c:.3e} at {} azimuth cells, {f:.3e} at {}",
            config.theta_cells,
            2 * config.theta_cells
        ),
    })
}

fn random_grid_and_filter(rng: &mut impl Rng, shape: GridShape, m: usize, d: usize, items: usize) -> (SphericalGrid, SpinFilter) {
    let hs: Vec<Vec<f64>> = (0..items).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let projections: Vec<(f64, f64, &[f64])> = hs
        .iter()
        .map(|h| (rng.gen_range(0.0..std::f64::consts::PI), rng.gen_range(0.0..std::f64::consts::TAU), h.as_slice()))
        .collect();
    let grid = SphericalGrid::scatter(shape, m, &projections).expect("angles drawn in range");
    let w = (0..d * shape.cells() * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    (grid, SpinFilter::new(shape, m, d, w, b).expect("sizes match"))
}

/// Whole-cell azimuth shifts of random grids leave the spin convolution unchanged.
pub fn roll_check(rng: &mut impl Rng, trials: usize, shape: GridShape, channels: usize, filters: usize) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (grid, filter) = random_grid_and_filter(rng, shape, channels, filters, 9);
        let base = spin_convolution(&grid, &filter, Activation::Swish).expect("shapes match");
        for k in 1..shape.theta_cells {
            let rolled = spin_convolution(&grid.rolled(k), &filter, Activation::Swish).expect("shapes match");
            for (a, b) in base.iter().zip(&rolled) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    CheckOutcome::below("roll-invariance", worst, 1e-12, format!("{trials} random grids, every whole-cell shift"))
}

/// With the identity activation, the pooled output depends only on row sums
/// of the grid and of the filter.
pub fn identity_collapse_check(rng: &mut impl Rng, trials: usize, shape: GridShape, channels: usize, filters: usize) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (grid, filter) = random_grid_and_filter(rng, shape, channels, filters, 7);
        let out = spin_convolution(&grid, &filter, Activation::Identity).expect("shapes match");
        let t = shape.theta_cells;
        for (d, value) in out.iter().enumerate() {
            let mut expected = filter.bias[d];
            for row in 0..shape.phi_cells {
                for c in 0..channels {
                    let g: f64 = (0..t).map(|col| grid.at(row, col)[c]).sum();
                    let w: f64 = (0..t).map(|col| filter.weight(d, row, col, c)).sum();
                    expected += g * w / t as f64;
                }
            }
            worst = worst.max((value - expected).abs());
        }
    }
    CheckOutcome::below("identity-collapse", worst, 1e-10, format!("{trials} random grids"))
}

/// Every check on a freshly initialized model of `config`, at sizes that run
/// in well under a minute.
pub fn run_suite(config: &ModelConfig, seed: u64) -> Result<Vec<CheckOutcome>, ModelError> {
    let model = Model::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let systems: Vec<AtomicSystem> =
        (0..5).map(|i| smooth_cluster(&model, &mut rng, 4 + i % 3, 1e-3)).collect::<Result<_, _>>()?;
    let rotations: Vec<Mat3> = (0..20).map(|_| random_rotation(&mut rng)).collect();
    let shape = config.grid();
    Ok(vec![
        translation_check(&model, &systems, &mut rng)?,
        permutation_check(&model, &systems, &mut rng)?,
        rotation_check(&model, &systems[0], &rotations, 1e-2)?,
        rotation_refinement_check(config, &systems[0], &rotations)?,
        gradient_check(&model, &systems, 1e-5, 1e-5)?,
        conservation_check(&model, &mut rng, 2, 1000, 1e-3)?,
        roll_check(&mut rng, 5, shape, config.message_dim, config.hidden_dim),
        identity_collapse_check(&mut rng, 5, shape, config.message_dim, config.hidden_dim),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            message_dim: 4,
            layers: 2,
            hidden_dim: 8,
            experts: 2,
            phi_cells: 8,
            theta_cells: 12,
            num_basis: 16,
            norm_groups: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn fresh_small_model_passes_every_check() {
        for outcome in run_suite(&small(), 3).unwrap() {
            assert!(outcome.passed, "{outcome:?}");
        }
    }

    #[test]
    fn coarse_differences_fail_the_gradient_check() {
        // The check must be able to fail: a 0.3 Å step is far outside the linear regime.
        let model = Model::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = smooth_cluster(&model, &mut rng, 4, 1e-3).unwrap();
        let fine = gradient_check(&model, std::slice::from_ref(&s), 1e-5, 1e-5).unwrap();
        assert!(fine.passed);
        let coarse = gradient_check(&model, &[s], 0.3, 1e-5).unwrap();
        assert!(!coarse.passed, "{coarse:?}");
    }
}

//! Steepest-descent structure relaxation and relaxation-quality metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{norm, AtomicSystem, Vec3};

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("force provider failed: {0}")]
    Provider(String),
    #[error("force provider returned {got} forces for {expected} atoms")]
    ForceCount { expected: usize, got: usize },
    #[error("structure {index}: {expected} atoms in the reference, {got} in the prediction")]
    AtomCount { index: usize, expected: usize, got: usize },
    #[error("{0} predicted structures but {1} references")]
    StructureCount(usize, usize),
    #[error("invalid relaxation config: {0}")]
    Config(String),
}

/// Anything that maps a structure to per-atom forces in eV/Å.
pub trait ForceProvider {
    fn forces(&mut self, system: &AtomicSystem) -> Result<Vec<Vec3>, RelaxError>;
}

impl<F> ForceProvider for F
where
    F: FnMut(&AtomicSystem) -> Result<Vec<Vec3>, RelaxError>,
{
    fn forces(&mut self, system: &AtomicSystem) -> Result<Vec<Vec3>, RelaxError> {
        self(system)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxConfig {
    pub max_iterations: usize,
    /// Convergence when every atom's force norm is below this, eV/Å.
    pub force_threshold: f64,
    /// Largest displacement of one atom in one step, Å.
    pub max_displacement: f64,
    /// Step `η` in Å²/eV for `x ← x + η f`.
    pub step_size: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self { max_iterations: 200, force_threshold: 0.05, max_displacement: 0.05, step_size: 0.01 }
    }
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<(), RelaxError> {
        if self.max_iterations == 0 {
            return Err(RelaxError::Config("max_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("force_threshold", self.force_threshold),
            ("max_displacement", self.max_displacement),
            ("step_size", self.step_size),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RelaxError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelaxStatus {
    Converged,
    MaxIterations,
    /// The provider returned NaN or infinite forces; the trajectory stops
    /// at the last finite frame.
    NonFinite,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Initial structure followed by one frame per step.
    pub frames: Vec<AtomicSystem>,
    /// Largest per-atom force norm at each evaluated frame.
    pub max_forces: Vec<f64>,
    pub status: RelaxStatus,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn last(&self) -> &AtomicSystem {
        self.frames.last().expect("trajectory holds the initial frame")
    }
}

pub fn max_force(forces: &[Vec3]) -> f64 {
    forces.iter().map(|f| norm(*f)).fold(0.0, f64::max)
}

/// Moves atoms along the provided forces until they fall below the
/// threshold or the iteration budget runs out.
pub fn relax(
    system: &AtomicSystem,
    provider: &mut impl ForceProvider,
    config: &RelaxConfig,
) -> Result<Trajectory, RelaxError> {
    config.validate()?;
    let mut frames = vec![system.clone()];
    let mut max_forces = Vec::new();
    let mut current = system.clone();
    for step in 0..=config.max_iterations {
        let forces = provider.forces(&current)?;
        if forces.len() != current.len() {
            return Err(RelaxError::ForceCount { expected: current.len(), got: forces.len() });
        }
        if forces.iter().flatten().any(|v| !v.is_finite()) {
            return Ok(Trajectory { frames, max_forces, status: RelaxStatus::NonFinite });
        }
        let fmax = max_force(&forces);
        max_forces.push(fmax);
        if fmax < config.force_threshold {
            return Ok(Trajectory { frames, max_forces, status: RelaxStatus::Converged });
        }
        if step == config.max_iterations {
            break;
        }
        for (x, f) in current.positions.iter_mut().zip(&forces) {
            let mut dx = [config.step_size * f[0], config.step_size * f[1], config.step_size * f[2]];
            let len = norm(dx);
            if len > config.max_displacement {
                let s = config.max_displacement / len;
                dx = [dx[0] * s, dx[1] * s, dx[2] * s];
            }
            for k in 0..3 {
                x[k] += dx[k];
            }
        }
        current.energy = None;
        current.forces = None;
        frames.push(current.clone());
    }
    Ok(Trajectory { frames, max_forces, status: RelaxStatus::MaxIterations })
}

/// Relaxes every structure, in parallel across structures. `make` builds
/// one provider per structure from its index.
pub fn relax_all<P, F>(systems: &[AtomicSystem], make: F, config: &RelaxConfig) -> Result<Vec<Trajectory>, RelaxError>
where
    P: ForceProvider,
    F: Fn(usize) -> P + Sync,
{
    config.validate()?;
    systems.par_iter().enumerate().map(|(i, s)| relax(s, &mut make(i), config)).collect()
}

/// Distance thresholds `0.01, 0.02, …, 0.5` Å.
pub fn distance_thresholds() -> Vec<f64> {
    (1..=50).map(|i| i as f64 * 0.01).collect()
}

/// Force thresholds `0.01, 0.02, …, 0.4` eV/Å.
pub fn force_thresholds() -> Vec<f64> {
    (1..=40).map(|i| i as f64 * 0.01).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxMetrics {
    /// Mean over distance thresholds of the fraction of atoms within the
    /// threshold of the reference position.
    pub adwt: f64,
    /// Mean over force thresholds of the fraction of structures whose
    /// reference max force at the predicted geometry is below the threshold.
    pub afbt: f64,
}

pub fn adwt(predicted: &[AtomicSystem], reference: &[AtomicSystem]) -> Result<f64, RelaxError> {
    check_pairs(predicted, reference)?;
    let mut dists = Vec::new();
    for (p, r) in predicted.iter().zip(reference) {
        for (a, b) in p.positions.iter().zip(&r.positions) {
            dists.push(norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
        }
    }
    if dists.is_empty() {
        return Ok(0.0);
    }
    let thresholds = distance_thresholds();
    let total: f64 = thresholds
        .iter()
        .map(|&beta| dists.iter().filter(|&&d| d < beta).count() as f64 / dists.len() as f64)
        .sum();
    Ok(total / thresholds.len() as f64)
}

pub fn relaxation_metrics(
    predicted: &[AtomicSystem],
    reference: &[AtomicSystem],
    oracle: &mut impl ForceProvider,
) -> Result<RelaxMetrics, RelaxError> {
    let adwt = adwt(predicted, reference)?;
    let mut fmax = Vec::with_capacity(predicted.len());
    for p in predicted {
        fmax.push(max_force(&oracle.forces(p)?));
    }
    let thresholds = force_thresholds();
    let afbt = if fmax.is_empty() {
        0.0
    } else {
        thresholds.iter().map(|&t| fmax.iter().filter(|&&f| f < t).count() as f64 / fmax.len() as f64).sum::<f64>()
            / thresholds.len() as f64
    };
    Ok(RelaxMetrics { adwt, afbt })
}

fn check_pairs(predicted: &[AtomicSystem], reference: &[AtomicSystem]) -> Result<(), RelaxError> {
    if predicted.len() != reference.len() {
        return Err(RelaxError::StructureCount(predicted.len(), reference.len()));
    }
    for (i, (p, r)) in predicted.iter().zip(reference).enumerate() {
        if p.len() != r.len() {
            return Err(RelaxError::AtomCount { index: i, expected: r.len(), got: p.len() });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, spacing: f64) -> AtomicSystem {
        AtomicSystem::new((0..n).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect(), vec![1; n]).unwrap()
    }

    #[test]
    fn zero_forces_converge_immediately() {
        let mut zero = |s: &AtomicSystem| Ok(vec![[0.0; 3]; s.len()]);
        let t = relax(&line(3, 2.0), &mut zero, &RelaxConfig::default()).unwrap();
        assert_eq!(t.status, RelaxStatus::Converged);
        assert_eq!(t.steps(), 0);
    }

    #[test]
    fn diverging_provider_stops_at_the_budget() {
        let mut calls = 0;
        let mut wild = |s: &AtomicSystem| {
            calls += 1;
            Ok(vec![[1e3 * calls as f64, 0.0, 0.0]; s.len()])
        };
        let cfg = RelaxConfig { max_iterations: 17, ..RelaxConfig::default() };
        let t = relax(&line(2, 2.0), &mut wild, &cfg).unwrap();
        assert_eq!(t.status, RelaxStatus::MaxIterations);
        assert_eq!(t.steps(), 17);
        // Clipped steps move each atom by exactly the cap.
        let dx = t.frames[1].positions[0][0] - t.frames[0].positions[0][0];
        assert!((dx - 0.05).abs() < 1e-15);
    }

    #[test]
    fn non_finite_forces_abort_with_partial_trajectory() {
        let mut n = 0;
        let mut bad = |s: &AtomicSystem| {
            n += 1;
            let v = if n < 4 { 1.0 } else { f64::NAN };
            Ok(vec![[v, 0.0, 0.0]; s.len()])
        };
        let t = relax(&line(2, 2.0), &mut bad, &RelaxConfig::default()).unwrap();
        assert_eq!(t.status, RelaxStatus::NonFinite);
        assert_eq!(t.steps(), 3);
    }

    #[test]
    fn adwt_examples() {
        let a = line(4, 2.0);
        assert_eq!(adwt(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 1.0);
        let far = a.translated([1.0, 0.0, 0.0]);
        assert_eq!(adwt(&[far], std::slice::from_ref(&a)).unwrap(), 0.0);
        let mut half = a.clone();
        half.positions[0][1] += 1.0;
        half.positions[1][1] += 1.0;
        assert_eq!(adwt(&[half], std::slice::from_ref(&a)).unwrap(), 0.5);
        assert!(adwt(&[line(3, 2.0)], &[a]).is_err());
    }

    #[test]
    fn config_is_validated() {
        let bad = RelaxConfig { max_displacement: 0.0, ..RelaxConfig::default() };
        assert!(bad.validate().is_err());
        assert!(RelaxConfig { max_iterations: 0, ..RelaxConfig::default() }.validate().is_err());
    }
}

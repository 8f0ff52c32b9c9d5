//! Atomic systems, neighbor graphs and per-edge reference frames.
//!
//! Directed edges run from a source atom `s` to a target atom `t`. The edge
//! offset is `x_s - x_t` and its unit vector `x̂_st` is what a [`LocalFrame`]
//! rotates onto the +z axis. Neighbors of `s` are then projected onto the
//! unit sphere in that frame as an inclination `φ ∈ [0, π]` and an azimuth
//! `θ ∈ [0, 2π)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Minimum allowed separation between two atoms, in Å.
pub const MIN_SEPARATION: f64 = 0.1;
/// Largest supported atomic number.
pub const MAX_ATOMIC_NUMBER: u32 = 100;
/// Threshold on `|x̂·ẑ|` above which the frame roll is fixed against x̂ instead of ẑ.
pub const FRAME_AXIS_SWITCH: f64 = 0.999;
/// In-plane radius below which a projected direction is treated as a pole.
pub const POLE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("system has no atoms")]
    Empty,
    #[error("{positions} positions but {numbers} atomic numbers")]
    LengthMismatch { positions: usize, numbers: usize },
    #[error("atom {index} has atomic number {number}, expected 1..={MAX_ATOMIC_NUMBER}")]
    BadAtomicNumber { index: usize, number: u32 },
    #[error("atom {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("atoms {i} and {j} are {distance:.4} Å apart (minimum {MIN_SEPARATION} Å)")]
    Overlap { i: usize, j: usize, distance: f64 },
    #[error("reference forces cover {got} atoms, system has {expected}")]
    ForceCount { expected: usize, got: usize },
    #[error("frame axis has norm {norm}, expected unit length")]
    NotUnit { norm: f64 },
    #[error("cutoff must be positive and max_neighbors at least 1")]
    BadNeighborParams,
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn determinant(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Positions and atomic numbers of a finite (non-periodic) cluster of atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    pub positions: Vec<Vec3>,
    pub numbers: Vec<u32>,
    /// Reference energy in eV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    /// Reference forces in eV/Å.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forces: Option<Vec<Vec3>>,
}

impl AtomicSystem {
    pub fn new(positions: Vec<Vec3>, numbers: Vec<u32>) -> Result<Self, GeometryError> {
        let system = Self { positions, numbers, energy: None, forces: None };
        system.validate()?;
        Ok(system)
    }

    pub fn with_reference(mut self, energy: f64, forces: Vec<Vec3>) -> Result<Self, GeometryError> {
        if forces.len() != self.len() {
            return Err(GeometryError::ForceCount { expected: self.len(), got: forces.len() });
        }
        self.energy = Some(energy);
        self.forces = Some(forces);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.positions.is_empty() {
            return Err(GeometryError::Empty);
        }
        if self.positions.len() != self.numbers.len() {
            return Err(GeometryError::LengthMismatch {
                positions: self.positions.len(),
                numbers: self.numbers.len(),
            });
        }
        for (index, &number) in self.numbers.iter().enumerate() {
            if number == 0 || number > MAX_ATOMIC_NUMBER {
                return Err(GeometryError::BadAtomicNumber { index, number });
            }
        }
        for (index, p) in self.positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::NonFinite { index });
            }
        }
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let distance = norm(sub(self.positions[i], self.positions[j]));
                if distance < MIN_SEPARATION {
                    return Err(GeometryError::Overlap { i, j, distance });
                }
            }
        }
        if let Some(f) = &self.forces {
            if f.len() != self.len() {
                return Err(GeometryError::ForceCount { expected: self.len(), got: f.len() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn translated(&self, shift: Vec3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = add(*p, shift);
        }
        out
    }

    /// Applies `x -> Q x` to positions and, when present, reference forces.
    pub fn rotated(&self, q: &Mat3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = mat_vec(q, *p);
        }
        if let Some(f) = &mut out.forces {
            for v in f.iter_mut() {
                *v = mat_vec(q, *v);
            }
        }
        out
    }

    /// Relabels atoms so that new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            numbers: perm.iter().map(|&i| self.numbers[i]).collect(),
            energy: self.energy,
            forces: self.forces.as_ref().map(|f| perm.iter().map(|&i| f[i]).collect()),
        }
    }

    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min(norm(sub(self.positions[i], self.positions[j])));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    /// `d_st` in Å.
    pub distance: f64,
    /// `x̂_st = (x_s - x_t) / d_st`.
    pub unit: Vec3,
}

/// Directed neighbor graph. Edges are grouped by target atom, and within a
/// target ordered by increasing distance (ties broken by source index).
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub n_atoms: usize,
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub edges: Vec<Edge>,
    /// Edge indices whose target is the given atom.
    pub incoming: Vec<Vec<usize>>,
    /// Atoms with no neighbors inside the cutoff.
    pub isolated: Vec<usize>,
}

impl NeighborGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_isolated_atoms(&self) -> bool {
        !self.isolated.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.source).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.target).collect()
    }
}

/// All-pairs neighbor search with per-target truncation to the nearest
/// `max_neighbors` sources.
pub fn build_neighbor_graph(
    system: &AtomicSystem,
    cutoff: f64,
    max_neighbors: usize,
) -> Result<NeighborGraph, GeometryError> {
    if !(cutoff > 0.0) || max_neighbors == 0 {
        return Err(GeometryError::BadNeighborParams);
    }
    let n = system.len();
    let mut edges = Vec::new();
    let mut incoming = Vec::with_capacity(n);
    let mut isolated = Vec::new();
    for t in 0..n {
        let mut candidates: Vec<(f64, usize, Vec3)> = (0..n)
            .filter(|&s| s != t)
            .filter_map(|s| {
                let offset = sub(system.positions[s], system.positions[t]);
                let d = norm(offset);
                (d < cutoff).then_some((d, s, offset))
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(max_neighbors);
        if candidates.is_empty() {
            isolated.push(t);
        }
        let mut ids = Vec::with_capacity(candidates.len());
        for (d, s, offset) in candidates {
            ids.push(edges.len());
            edges.push(Edge { source: s, target: t, distance: d, unit: scale(offset, 1.0 / d) });
        }
        incoming.push(ids);
    }
    Ok(NeighborGraph { n_atoms: n, cutoff, max_neighbors, edges, incoming, isolated })
}

/// Rotation `R` with `R x̂ = (0, 0, 1)`; rows are the frame axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub rotation: Mat3,
}

impl LocalFrame {
    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }
}

/// World axis used to fix the roll of a frame with z-axis `u`.
pub fn roll_reference(u: Vec3) -> Vec3 {
    if u[2].abs() > FRAME_AXIS_SWITCH {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    }
}

/// Frame axes `(e1, e2)` for an already-normalized direction `u`, plus the
/// norm of the un-normalized first axis.
pub(crate) fn frame_axes(u: Vec3) -> (Vec3, Vec3, f64) {
    let r = roll_reference(u);
    let w = sub(r, scale(u, dot(r, u)));
    let wn = norm(w);
    let e1 = scale(w, 1.0 / wn);
    (e1, cross(u, e1), wn)
}

pub fn edge_frame(unit: Vec3) -> Result<LocalFrame, GeometryError> {
    let n = norm(unit);
    if !(1.0 - 1e-6..=1.0 + 1e-6).contains(&n) {
        return Err(GeometryError::NotUnit { norm: n });
    }
    let (e1, e2, _) = frame_axes(unit);
    Ok(LocalFrame { rotation: [e1, e2, unit] })
}

/// Polar angles of an already-rotated direction; θ is 0 at the poles.
pub fn polar_angles(local: Vec3) -> (f64, f64) {
    let rho = local[0].hypot(local[1]);
    let phi = rho.atan2(local[2]);
    if rho < POLE_EPS {
        return (phi, 0.0);
    }
    let mut theta = local[1].atan2(local[0]);
    if theta < 0.0 {
        theta += 2.0 * PI;
    }
    if theta >= 2.0 * PI {
        theta = 0.0;
    }
    (phi, theta)
}

/// Inclination and azimuth of `direction` in the given frame.
pub fn project_to_sphere(frame: &LocalFrame, direction: Vec3) -> (f64, f64) {
    polar_angles(frame.apply(direction))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return quaternion_to_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        }
    }
}

/// Rotation by `angle` radians about the unit vector `axis`.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let a = scale(axis, 1.0 / norm(axis));
    let (s, c) = (angle / 2.0).sin_cos();
    quaternion_to_matrix([c, a[0] * s, a[1] * s, a[2] * s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        scale(v, 1.0 / norm(v))
    }

    fn random_system(rng: &mut ChaCha8Rng, n: usize, box_len: f64) -> AtomicSystem {
        loop {
            let positions: Vec<Vec3> = (0..n)
                .map(|_| [rng.gen::<f64>() * box_len, rng.gen::<f64>() * box_len, rng.gen::<f64>() * box_len])
                .collect();
            if let Ok(s) = AtomicSystem::new(positions, vec![1; n]) {
                if s.min_distance() > 0.8 {
                    return s;
                }
            }
        }
    }

    #[test]
    fn dimer_inside_and_outside_cutoff() {
        let near = AtomicSystem::new(vec![[0.0; 3], [3.0, 0.0, 0.0]], vec![1, 1]).unwrap();
        let g = build_neighbor_graph(&near, 6.0, 30).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!((g.edges[0].source, g.edges[0].target), (1, 0));
        assert_eq!((g.edges[1].source, g.edges[1].target), (0, 1));
        assert!(g.edges.iter().all(|e| e.distance == 3.0));
        assert_eq!(g.edges[0].unit, [1.0, 0.0, 0.0]);

        let far = AtomicSystem::new(vec![[0.0; 3], [7.0, 0.0, 0.0]], vec![1, 1]).unwrap();
        let g = build_neighbor_graph(&far, 6.0, 30).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.isolated, vec![0, 1]);
    }

    #[test]
    fn neighbor_cap_keeps_the_nearest() {
        // 35 atoms on a line-free spiral around the origin, all within 6 Å.
        let mut positions = vec![[0.0; 3]];
        for k in 0..35 {
            let r = 1.0 + 0.12 * k as f64;
            let a = 2.399963 * k as f64;
            let z = ((k as f64) / 35.0 - 0.5) * 1.5;
            positions.push([r * a.cos(), r * a.sin(), z]);
        }
        let system = AtomicSystem::new(positions.clone(), vec![6; 36]).unwrap();
        let g = build_neighbor_graph(&system, 6.0, 30).unwrap();
        let mut within: Vec<(f64, usize)> = (1..36)
            .map(|s| (norm(sub(positions[s], positions[0])), s))
            .filter(|(d, _)| *d < 6.0)
            .collect();
        assert_eq!(within.len(), 35);
        within.sort_by(|a, b| a.0.total_cmp(&b.0));
        let kept: Vec<usize> = g.incoming[0].iter().map(|&e| g.edges[e].source).collect();
        let expected: Vec<usize> = within[..30].iter().map(|&(_, s)| s).collect();
        assert_eq!(kept, expected);
        assert!(g.incoming.iter().all(|n| n.len() <= 30));
    }

    #[test]
    fn tie_break_prefers_lower_source() {
        let system = AtomicSystem::new(
            vec![[0.0; 3], [2.0, 0.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            vec![1; 4],
        )
        .unwrap();
        let g = build_neighbor_graph(&system, 6.0, 2).unwrap();
        let kept: Vec<usize> = g.incoming[0].iter().map(|&e| g.edges[e].source).collect();
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn rejects_overlap_and_bad_numbers() {
        assert!(matches!(
            AtomicSystem::new(vec![[0.0; 3], [0.05, 0.0, 0.0]], vec![1, 1]),
            Err(GeometryError::Overlap { .. })
        ));
        assert!(AtomicSystem::new(vec![[0.0; 3]], vec![101]).is_err());
        assert!(AtomicSystem::new(vec![], vec![]).is_err());
    }

    #[test]
    fn frame_for_z_axis_is_identity() {
        let f = edge_frame([0.0, 0.0, 1.0]).unwrap();
        assert_eq!(f.rotation, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn frame_for_antipode_uses_fallback_axis() {
        let f = edge_frame([0.0, 0.0, -1.0]).unwrap();
        assert_eq!(f.apply([0.0, 0.0, -1.0]), [0.0, 0.0, 1.0]);
        assert_eq!(f.rotation[0], [1.0, 0.0, 0.0]);
        assert!((determinant(&f.rotation) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frames_are_proper_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let u = random_unit(&mut rng);
            let f = edge_frame(u).unwrap();
            let z = f.apply(u);
            assert!((z[0]).abs() < 1e-12 && (z[1]).abs() < 1e-12 && (z[2] - 1.0).abs() < 1e-12);
            let rtr = mat_mul(&transpose(&f.rotation), &f.rotation);
            for i in 0..3 {
                for j in 0..3 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((rtr[i][j] - expected).abs() < 1e-12);
                }
            }
            assert!((determinant(&f.rotation) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_rejects_non_unit_axis() {
        assert!(edge_frame([0.0, 0.0, 1.01]).is_err());
        assert!(edge_frame([0.0, 0.0, 1.0 + 5e-7]).is_ok());
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let u = random_unit(&mut rng);
            let f = edge_frame(u).unwrap();
            assert!(project_to_sphere(&f, u).0.abs() < 1e-7);
            assert!((project_to_sphere(&f, scale(u, -1.0)).0 - PI).abs() < 1e-7);
            let w = random_unit(&mut rng);
            let perp = cross(u, w);
            let perp = scale(perp, 1.0 / norm(perp));
            let (phi, theta) = project_to_sphere(&f, perp);
            assert!((phi - PI / 2.0).abs() < 1e-12);
            assert!((0.0..2.0 * PI).contains(&theta));
        }
        // Exact poles report θ = 0.
        let f = edge_frame([0.0, 0.0, 1.0]).unwrap();
        assert_eq!(project_to_sphere(&f, [0.0, 0.0, 1.0]), (0.0, 0.0));
        assert_eq!(project_to_sphere(&f, [0.0, 0.0, -1.0]), (PI, 0.0));
    }

    #[test]
    fn translation_is_bitwise_for_dyadic_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = |v: f64| (v * 1024.0).round() / 1024.0;
        let mut system = random_system(&mut rng, 8, 5.0);
        for p in &mut system.positions {
            *p = [q(p[0]), q(p[1]), q(p[2])];
        }
        let shifted = system.translated([3.5, -2.25, 1.125]);
        let a = build_neighbor_graph(&system, 6.0, 30).unwrap();
        let b = build_neighbor_graph(&shifted, 6.0, 30).unwrap();
        assert_eq!(a, b);
        for (ea, eb) in a.edges.iter().zip(&b.edges) {
            let fa = edge_frame(ea.unit).unwrap();
            let fb = edge_frame(eb.unit).unwrap();
            assert_eq!(fa, fb);
            for &e in &a.incoming[ea.source] {
                assert_eq!(
                    project_to_sphere(&fa, a.edges[e].unit),
                    project_to_sphere(&fb, b.edges[e].unit)
                );
            }
        }
    }

    #[test]
    fn permutation_preserves_edge_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let system = random_system(&mut rng, 7, 5.0);
        let perm = vec![3, 0, 6, 1, 5, 2, 4];
        let permuted = system.permuted(&perm);
        let a = build_neighbor_graph(&system, 6.0, 30).unwrap();
        let b = build_neighbor_graph(&permuted, 6.0, 30).unwrap();
        assert_eq!(a.num_edges(), b.num_edges());
        for eb in &b.edges {
            let ea = a
                .edges
                .iter()
                .find(|e| e.source == perm[eb.source] && e.target == perm[eb.target])
                .unwrap();
            assert_eq!(ea.distance, eb.distance);
            assert_eq!(ea.unit, eb.unit);
        }
    }

    #[test]
    fn rotation_shifts_azimuths_uniformly_per_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let system = random_system(&mut rng, 6, 4.0);
        let q = random_rotation(&mut rng);
        let rotated = system.rotated(&q);
        let a = build_neighbor_graph(&system, 6.0, 30).unwrap();
        let b = build_neighbor_graph(&rotated, 6.0, 30).unwrap();
        for (ea, eb) in a.edges.iter().zip(&b.edges) {
            assert!((ea.distance - eb.distance).abs() < 1e-10);
            let fa = edge_frame(ea.unit).unwrap();
            let fb = edge_frame(eb.unit).unwrap();
            let mut offset = None;
            for &e in &a.incoming[ea.source] {
                if a.edges[e].source == ea.target {
                    continue;
                }
                let (pa, ta) = project_to_sphere(&fa, a.edges[e].unit);
                let (pb, tb) = project_to_sphere(&fb, b.edges[e].unit);
                assert!((pa - pb).abs() < 1e-10);
                let delta = (tb - ta).rem_euclid(2.0 * PI);
                match offset {
                    None => offset = Some(delta),
                    Some(o) => {
                        let diff = (delta - o).rem_euclid(2.0 * PI);
                        assert!(diff.min(2.0 * PI - diff) < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = random_rotation(&mut rng);
            assert!((determinant(&q) - 1.0).abs() < 1e-12);
            let qtq = mat_mul(&transpose(&q), &q);
            assert!((qtq[0][0] - 1.0).abs() < 1e-12 && qtq[0][1].abs() < 1e-12);
        }
    }
}

//! Rotation-equivariant message passing for atomic energies and forces.

pub mod autodiff;
pub mod blocks;
pub mod checks;
pub mod config;
pub mod data;
pub mod geometry;
pub mod model;
pub mod params;
pub mod relax;
pub mod spherical;
pub mod train;

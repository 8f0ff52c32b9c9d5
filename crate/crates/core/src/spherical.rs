//! Grid-based spherical representation and the spin convolution.
//!
//! Latitude nodes sit at `i·π/(Φ-1)` for `i = 0..Φ`, so rows `0` and `Φ-1`
//! are the poles. Longitude nodes sit at `j·2π/Θ` and wrap circularly, which
//! makes a roll of the frame by a whole cell an exact circular shift.
//!
//! Mass landing on a pole row is spread evenly over all `Θ` columns of that
//! row: the azimuth of a point at a pole is meaningless, and spreading keeps
//! the scatter continuous as a neighbor passes through a pole.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SphericalError {
    #[error("grid needs at least 2 latitude and 2 longitude cells, got {phi}x{theta}")]
    GridTooSmall { phi: usize, theta: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch { what: &'static str, expected: String, got: String },
    #[error("angle out of range: phi={phi}, theta={theta}")]
    AngleRange { phi: f64, theta: f64 },
}

/// Latitude (`Φ`) and longitude (`Θ`) cell counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub phi_cells: usize,
    pub theta_cells: usize,
}

impl GridShape {
    pub fn new(phi_cells: usize, theta_cells: usize) -> Result<Self, SphericalError> {
        if phi_cells < 2 || theta_cells < 2 {
            return Err(SphericalError::GridTooSmall { phi: phi_cells, theta: theta_cells });
        }
        Ok(Self { phi_cells, theta_cells })
    }

    pub fn cells(&self) -> usize {
        self.phi_cells * self.theta_cells
    }

    pub fn phi_step(&self) -> f64 {
        PI / (self.phi_cells - 1) as f64
    }

    pub fn theta_step(&self) -> f64 {
        2.0 * PI / self.theta_cells as f64
    }

    pub fn is_pole_row(&self, row: usize) -> bool {
        row == 0 || row + 1 == self.phi_cells
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.theta_cells + col
    }
}

/// One interpolation target of a scattered point, with the derivatives of
/// its weight with respect to the point's angles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corner {
    Cell { row: usize, col: usize, weight: f64, d_phi: f64, d_theta: f64 },
    /// Weight spread evenly over every column of a pole row.
    Ring { row: usize, weight: f64, d_phi: f64 },
}

impl Corner {
    pub fn weight(&self) -> f64 {
        match *self {
            Corner::Cell { weight, .. } | Corner::Ring { weight, .. } => weight,
        }
    }
}

/// Up to four interpolation corners of a point at `(φ, θ)`.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    items: [Corner; 4],
    len: usize,
}

impl Corners {
    pub fn as_slice(&self) -> &[Corner] {
        &self.items[..self.len]
    }
}

/// Bilinear interpolation corners; φ clamps at the poles, θ wraps.
pub fn bilinear_corners(shape: GridShape, phi: f64, theta: f64) -> Corners {
    let dphi = shape.phi_step();
    let dtheta = shape.theta_step();
    let fp = (phi / dphi).clamp(0.0, (shape.phi_cells - 1) as f64);
    let r0 = (fp.floor() as usize).min(shape.phi_cells - 2);
    let t = fp - r0 as f64;
    let ft = (theta / dtheta).rem_euclid(shape.theta_cells as f64);
    let c0f = ft.floor();
    let s = ft - c0f;
    let c0 = (c0f as usize) % shape.theta_cells;
    let c1 = (c0 + 1) % shape.theta_cells;

    let rows = [(r0, 1.0 - t, -1.0 / dphi), (r0 + 1, t, 1.0 / dphi)];
    let cols = [(c0, 1.0 - s, -1.0 / dtheta), (c1, s, 1.0 / dtheta)];
    let filler = Corner::Ring { row: 0, weight: 0.0, d_phi: 0.0 };
    let mut out = Corners { items: [filler; 4], len: 0 };
    for &(row, rw, drw) in &rows {
        if shape.is_pole_row(row) {
            out.items[out.len] = Corner::Ring { row, weight: rw, d_phi: drw };
            out.len += 1;
        } else {
            for &(col, cw, dcw) in &cols {
                out.items[out.len] =
                    Corner::Cell { row, col, weight: rw * cw, d_phi: drw * cw, d_theta: rw * dcw };
                out.len += 1;
            }
        }
    }
    out
}

/// `Φ × Θ × M` grid of message channels, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalGrid {
    pub shape: GridShape,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SphericalGrid {
    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        Self { shape, channels, data: vec![0.0; shape.cells() * channels] }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let o = self.shape.cell(row, col) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = self.shape.cell(row, col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Adds `weight · h` at the given corner.
    pub fn deposit(&mut self, corner: &Corner, h: &[f64]) {
        match *corner {
            Corner::Cell { row, col, weight, .. } => {
                for (g, v) in self.at_mut(row, col).iter_mut().zip(h) {
                    *g += weight * v;
                }
            }
            Corner::Ring { row, weight, .. } => {
                let w = weight / self.shape.theta_cells as f64;
                for col in 0..self.shape.theta_cells {
                    for (g, v) in self.at_mut(row, col).iter_mut().zip(h) {
                        *g += w * v;
                    }
                }
            }
        }
    }

    /// Scatters `(φ, θ, h)` projections with bilinear weights.
    pub fn scatter(
        shape: GridShape,
        channels: usize,
        projections: &[(f64, f64, &[f64])],
    ) -> Result<Self, SphericalError> {
        let mut grid = Self::zeros(shape, channels);
        for &(phi, theta, h) in projections {
            if !(0.0..=PI).contains(&phi) || !(0.0..2.0 * PI).contains(&theta) {
                return Err(SphericalError::AngleRange { phi, theta });
            }
            if h.len() != channels {
                return Err(SphericalError::Mismatch {
                    what: "message length",
                    expected: channels.to_string(),
                    got: h.len().to_string(),
                });
            }
            for corner in bilinear_corners(shape, phi, theta).as_slice() {
                grid.deposit(corner, h);
            }
        }
        Ok(grid)
    }

    /// Circular shift by `k` columns: new column `c` holds old column `c - k`.
    pub fn rolled(&self, k: usize) -> Self {
        let mut out = Self::zeros(self.shape, self.channels);
        let t = self.shape.theta_cells;
        for row in 0..self.shape.phi_cells {
            for col in 0..t {
                out.at_mut(row, (col + k) % t).copy_from_slice(self.at(row, col));
            }
        }
        out
    }

    /// Per-channel sum over all cells.
    pub fn channel_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.channels];
        for cell in self.data.chunks(self.channels) {
            for (m, v) in mass.iter_mut().zip(cell) {
                *m += v;
            }
        }
        mass
    }
}

/// `scatter_messages` under its public name.
pub fn scatter_messages(
    shape: GridShape,
    channels: usize,
    projections: &[(f64, f64, &[f64])],
) -> Result<SphericalGrid, SphericalError> {
    SphericalGrid::scatter(shape, channels, projections)
}

/// `D` full-coverage filters over a `Φ × Θ × M` grid, stored `[D][Φ][Θ][M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinFilter {
    pub shape: GridShape,
    pub channels: usize,
    pub filters: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SpinFilter {
    pub fn new(
        shape: GridShape,
        channels: usize,
        filters: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, SphericalError> {
        let expected = filters * shape.cells() * channels;
        if weights.len() != expected || bias.len() != filters {
            return Err(SphericalError::Mismatch {
                what: "filter size",
                expected: format!("{expected} weights and {filters} biases"),
                got: format!("{} weights and {} biases", weights.len(), bias.len()),
            });
        }
        Ok(Self { shape, channels, filters, weights, bias })
    }

    pub fn weight(&self, d: usize, row: usize, col: usize, m: usize) -> f64 {
        self.weights[((d * self.shape.phi_cells + row) * self.shape.theta_cells + col) * self.channels + m]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Swish,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Swish => swish(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn check_match(grid: &SphericalGrid, filter: &SpinFilter) -> Result<(), SphericalError> {
    if grid.shape != filter.shape || grid.channels != filter.channels {
        return Err(SphericalError::Mismatch {
            what: "grid/filter shape",
            expected: format!("{}x{}x{}", filter.shape.phi_cells, filter.shape.theta_cells, filter.channels),
            got: format!("{}x{}x{}", grid.shape.phi_cells, grid.shape.theta_cells, grid.channels),
        });
    }
    Ok(())
}

/// Pre-activation `Θ × D` map: entry `[j][d]` is the inner product of the
/// grid shifted by `j` columns with filter `d`, plus its bias.
pub fn correlation_map(grid: &SphericalGrid, filter: &SpinFilter) -> Result<Vec<f64>, SphericalError> {
    check_match(grid, filter)?;
    let (p, t, m, d_count) = (grid.shape.phi_cells, grid.shape.theta_cells, grid.channels, filter.filters);
    let mut out = vec![0.0; t * d_count];
    for j in 0..t {
        for d in 0..d_count {
            let mut acc = filter.bias[d];
            for row in 0..p {
                for col in 0..t {
                    let g = grid.at(row, (col + j) % t);
                    let base = ((d * p + row) * t + col) * m;
                    acc += g.iter().zip(&filter.weights[base..base + m]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            out[j * d_count + d] = acc;
        }
    }
    Ok(out)
}

/// Correlate over every longitudinal shift, apply `activation`, average over
/// the shifts. The result is unchanged by whole-cell rolls of the grid.
pub fn spin_convolution(
    grid: &SphericalGrid,
    filter: &SpinFilter,
    activation: Activation,
) -> Result<Vec<f64>, SphericalError> {
    let map = correlation_map(grid, filter)?;
    let t = grid.shape.theta_cells;
    let d_count = filter.filters;
    // Summing in sorted order makes the mean independent of which shift
    // comes first, so whole-cell rolls give bitwise identical output.
    let pooled = (0..d_count)
        .map(|d| {
            let mut vals: Vec<f64> = (0..t).map(|j| activation.apply(map[j * d_count + d])).collect();
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / t as f64
        })
        .collect();
    Ok(pooled)
}

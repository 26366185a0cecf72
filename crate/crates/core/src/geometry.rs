//! Cylinder kinematics and crank-angle quadrature.
//!
//! All physics modules share one [`Cylinder`]: the slider-crank geometry
//! sampled on a uniform crank-angle grid spanning one closed cycle
//! (`-180..=180` CAD after TDC). Integrals of the form `∫ x(θ) dV(θ)` use
//! the trapezoidal rule in the volume variable,
//! `Σ ½(x_a + x_{a+1})(V_{a+1} − V_a)`, which integrates `dV` exactly.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{CalibError, Result};

const DEG: f64 = PI / 180.0;

/// Uniform crank-angle grid over `[-180, 180]` CAD aTDC.
#[derive(Debug, Clone, PartialEq)]
pub struct CrankGrid {
    delta_ca: f64,
    theta: Vec<f64>,
}

impl CrankGrid {
    /// Builds a grid with resolution `delta_ca`, which must divide 360 CAD.
    pub fn new(delta_ca: f64) -> Result<Self> {
        if !(delta_ca.is_finite() && delta_ca > 0.0 && delta_ca <= 180.0) {
            return Err(CalibError::InvalidArgument(format!(
                "crank-angle resolution must lie in (0, 180], got {delta_ca}"
            )));
        }
        let steps = 360.0 / delta_ca;
        let n = steps.round();
        if (steps - n).abs() > 1e-9 * steps {
            return Err(CalibError::InvalidArgument(format!(
                "crank-angle resolution {delta_ca} does not divide 360 CAD"
            )));
        }
        let n = n as usize;
        let theta = (0..=n)
            .map(|i| {
                if i == n {
                    180.0
                } else {
                    -180.0 + i as f64 * delta_ca
                }
            })
            .collect();
        Ok(Self { delta_ca, theta })
    }

    pub fn delta_ca(&self) -> f64 {
        self.delta_ca
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Number of samples, `360 / delta_ca + 1`.
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Index of the grid point closest to `theta`.
    pub fn index_of(&self, theta: f64) -> usize {
        let i = ((theta + 180.0) / self.delta_ca).round();
        (i.max(0.0) as usize).min(self.len() - 1)
    }
}

impl Default for CrankGrid {
    fn default() -> Self {
        Self::new(0.2).expect("0.2 CAD divides 360")
    }
}

/// Slider-crank engine geometry. Lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineGeometry {
    pub bore: f64,
    pub stroke: f64,
    pub conrod_length: f64,
    pub compression_ratio: f64,
}

impl Default for EngineGeometry {
    /// Heavy-duty single cylinder: 130 mm bore, 162 mm stroke, r = 17.2.
    fn default() -> Self {
        Self {
            bore: 0.130,
            stroke: 0.162,
            conrod_length: 0.255,
            compression_ratio: 17.2,
        }
    }
}

impl EngineGeometry {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bore > 0.0
            && self.stroke > 0.0
            && self.compression_ratio > 1.0
            && self.conrod_length > self.crank_radius();
        if ok
            && [
                self.bore,
                self.stroke,
                self.conrod_length,
                self.compression_ratio,
            ]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(CalibError::InvalidArgument(format!(
                "non-physical engine geometry {self:?}"
            )))
        }
    }

    /// Swept volume `π/4 · bore² · stroke` [m³].
    pub fn displacement(&self) -> f64 {
        PI / 4.0 * self.bore * self.bore * self.stroke
    }

    /// Clearance volume `V_d / (r - 1)` [m³].
    pub fn clearance_volume(&self) -> f64 {
        self.displacement() / (self.compression_ratio - 1.0)
    }

    pub fn crank_radius(&self) -> f64 {
        self.stroke / 2.0
    }

    fn rod_ratio(&self) -> f64 {
        self.conrod_length / self.crank_radius()
    }
}

/// Cylinder volume at crank angle `theta` [CAD aTDC], in m³.
pub fn cylinder_volume(theta: f64, geom: &EngineGeometry) -> f64 {
    let t = theta * DEG;
    let ratio = geom.rod_ratio();
    let s = t.sin();
    geom.clearance_volume()
        + geom.displacement() / 2.0 * (ratio + 1.0 - t.cos() - (ratio * ratio - s * s).sqrt())
}

fn volume_slope(theta: f64, geom: &EngineGeometry) -> f64 {
    let t = theta * DEG;
    let ratio = geom.rod_ratio();
    let (s, c) = t.sin_cos();
    geom.displacement() / 2.0 * (s + s * c / (ratio * ratio - s * s).sqrt()) * DEG
}

/// Analytic `dV/dθ` [m³/CAD] sampled on the grid.
pub fn volume_derivative(grid: &CrankGrid, geom: &EngineGeometry) -> Vec<f64> {
    grid.theta()
        .iter()
        .map(|&t| volume_slope(t, geom))
        .collect()
}

/// Central differences on a uniform grid, one-sided at both ends.
pub fn central_difference(values: &[f64], delta: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| match i {
            0 => (values[1] - values[0]) / delta,
            i if i == n - 1 => (values[n - 1] - values[n - 2]) / delta,
            i => (values[i + 1] - values[i - 1]) / (2.0 * delta),
        })
        .collect()
}

/// Geometry and grid with cached volume, volume derivative and the
/// `dV` quadrature weights.
#[derive(Debug, Clone)]
pub struct Cylinder {
    geometry: EngineGeometry,
    grid: CrankGrid,
    volume: Vec<f64>,
    dvdtheta: Vec<f64>,
    dv_weights: Vec<f64>,
}

impl Cylinder {
    pub fn new(geometry: EngineGeometry, grid: CrankGrid) -> Result<Self> {
        geometry.validate()?;
        let volume: Vec<f64> = grid
            .theta()
            .iter()
            .map(|&t| cylinder_volume(t, &geometry))
            .collect();
        let dvdtheta = volume_derivative(&grid, &geometry);
        let n = volume.len();
        // Trapezoid in the volume variable: exact for ∫dV on any sub-interval.
        let dv_weights = (0..n)
            .map(|i| {
                let hi = volume[(i + 1).min(n - 1)];
                let lo = volume[i.saturating_sub(1)];
                0.5 * (hi - lo)
            })
            .collect();
        Ok(Self {
            geometry,
            grid,
            volume,
            dvdtheta,
            dv_weights,
        })
    }

    pub fn geometry(&self) -> &EngineGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &CrankGrid {
        &self.grid
    }

    pub fn volume(&self) -> &[f64] {
        &self.volume
    }

    pub fn dvdtheta(&self) -> &[f64] {
        &self.dvdtheta
    }

    /// Trapezoidal weights such that `∫ x dV ≈ Σ weights[a]·x[a]`.
    pub fn dv_weights(&self) -> &[f64] {
        &self.dv_weights
    }

    pub fn displacement(&self) -> f64 {
        self.geometry.displacement()
    }

    /// `∫ x(θ) dV(θ)` over the full cycle.
    pub fn integrate_dv(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.dv_weights.len());
        values
            .iter()
            .zip(&self.dv_weights)
            .map(|(x, w)| x * w)
            .sum()
    }

    /// `∫ x(θ) dV(θ)` over the grid index range `[from, to]`.
    pub fn integrate_dv_range(&self, values: &[f64], from: usize, to: usize) -> f64 {
        (from..to)
            .map(|i| 0.5 * (values[i] + values[i + 1]) * (self.volume[i + 1] - self.volume[i]))
            .sum()
    }
}

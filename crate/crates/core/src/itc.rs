//! Otto reference cycle and the quadratic energy-loss cost.
//!
//! The cost compares the gross indicated work of a predicted cycle with the
//! work an ideal Otto cycle would extract from the same fuel energy. In PC
//! weight space the work is linear, `W = gᵀw` with `g_i = ∫ f_i dV`, so the
//! squared loss is a rank-1 quadratic form `(w − w_itc)ᵀ g gᵀ (w − w_itc)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::{Cylinder, EngineGeometry};
use crate::pcd::{PcBasis, PressureTrace, WeightVector};

/// Default specific heat ratio.
pub const DEFAULT_KAPPA: f64 = 1.35;

const DEGENERATE_JUMP_TOL: f64 = 1e-6;

/// Otto cycle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OttoParams {
    pub kappa: f64,
    pub geometry: EngineGeometry,
}

impl OttoParams {
    pub fn new(kappa: f64, geometry: EngineGeometry) -> Result<Self> {
        if !(kappa > 1.0 && kappa < 2.0) {
            return Err(CalibError::InvalidArgument(format!(
                "specific heat ratio must lie in (1, 2), got {kappa}"
            )));
        }
        geometry.validate()?;
        Ok(Self { kappa, geometry })
    }

    /// `η = 1 − r^(1−κ)`.
    pub fn eta_itc(&self) -> f64 {
        otto_efficiency(self.geometry.compression_ratio, self.kappa)
    }
}

impl Default for OttoParams {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            geometry: EngineGeometry::default(),
        }
    }
}

pub fn otto_efficiency(compression_ratio: f64, kappa: f64) -> f64 {
    1.0 - compression_ratio.powf(1.0 - kappa)
}

/// Otto trace plus the constant-volume pressure after heat addition.
#[derive(Debug, Clone)]
pub struct OttoCycle {
    pub trace: PressureTrace,
    pub p_high: f64,
    /// Set when `p_high` does not exceed the compression end pressure.
    pub degenerate: bool,
}

/// Splits `∫ p dV` into the parts multiplying `p_low` and `p_high`.
fn branch_work(cylinder: &Cylinder, kappa: f64) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let v = cylinder.volume();
    let theta = cylinder.grid().theta();
    let v_bdc = v[0];
    let v_tdc = cylinder.geometry().clearance_volume();
    let mut comp = vec![0.0; v.len()];
    let mut exp = vec![0.0; v.len()];
    for (a, (&t, &va)) in theta.iter().zip(v).enumerate() {
        // θ = 0 belongs to the compression branch.
        if t <= 0.0 {
            comp[a] = (v_bdc / va).powf(kappa);
        } else {
            exp[a] = (v_tdc / va).powf(kappa);
        }
    }
    let wc = cylinder.integrate_dv(&comp);
    let we = cylinder.integrate_dv(&exp);
    (comp, exp, wc, we)
}

/// Otto cycle releasing `eta·q_fuel` of gross work, with `p_low = p_im`.
pub fn otto_pressure(
    q_fuel: f64,
    p_im: f64,
    params: &OttoParams,
    cylinder: &Cylinder,
) -> Result<OttoCycle> {
    if !(q_fuel > 0.0 && q_fuel.is_finite()) {
        return Err(CalibError::InvalidArgument(format!(
            "fuel energy must be positive, got {q_fuel}"
        )));
    }
    if !(p_im > 0.0) {
        return Err(CalibError::InvalidArgument(format!(
            "intake pressure must be positive, got {p_im}"
        )));
    }
    let (comp, exp, wc, we) = branch_work(cylinder, params.kappa);
    let p_high = (params.eta_itc() * q_fuel - p_im * wc) / we;
    let p_tdc = p_im * params.geometry.compression_ratio.powf(params.kappa);
    let pressure = comp
        .iter()
        .zip(&exp)
        .map(|(c, e)| p_im * c + p_high * e)
        .collect();
    Ok(OttoCycle {
        trace: PressureTrace::from_model(pressure, p_im),
        p_high,
        // The discrete work balance carries a small positive bias, so a jump
        // within the quadrature tolerance counts as no heat addition.
        degenerate: p_high < p_tdc * (1.0 + DEGENERATE_JUMP_TOL),
    })
}

/// Linear map `(q_fuel, p_im) ↦ w_itc` on a fixed basis.
///
/// The Otto residual is linear in both the fuel energy and the intake
/// pressure, so two projections define it everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ItcMap {
    per_joule: Vec<f64>,
    per_pascal: Vec<f64>,
}

impl ItcMap {
    pub fn new(params: &OttoParams, basis: &PcBasis) -> Self {
        let cylinder = basis.cylinder();
        let (comp, exp, wc, we) = branch_work(cylinder, params.kappa);
        let motored = basis.motored(1.0);
        // d p_high / d q and d p_high / d p_im.
        let dq = params.eta_itc() / we;
        let dp = -wc / we;
        let per_joule: Vec<f64> = exp.iter().map(|e| dq * e).collect();
        let per_pascal: Vec<f64> = comp
            .iter()
            .zip(&exp)
            .zip(&motored)
            .map(|((c, e), m)| c + dp * e - m)
            .collect();
        Self {
            per_joule: basis.project_residual(&per_joule).0,
            per_pascal: basis.project_residual(&per_pascal).0,
        }
    }

    pub fn weights(&self, q_fuel: f64, p_im: f64) -> WeightVector {
        WeightVector(
            self.per_joule
                .iter()
                .zip(&self.per_pascal)
                .map(|(a, b)| a * q_fuel + b * p_im)
                .collect(),
        )
    }

    /// `∂w_itc/∂q_fuel`.
    pub fn slope(&self) -> &[f64] {
        &self.per_joule
    }
}

/// Projects the Otto residual (Otto minus motored) onto the basis.
pub fn itc_weights(
    q_fuel: f64,
    p_im: f64,
    params: &OttoParams,
    basis: &PcBasis,
) -> Result<WeightVector> {
    let cycle = otto_pressure(q_fuel, p_im, params, basis.cylinder())?;
    let residual: Vec<f64> = cycle
        .trace
        .pressure()
        .iter()
        .zip(basis.motored(p_im))
        .map(|(p, m)| p - m)
        .collect();
    Ok(basis.project_residual(&residual))
}

/// Rank-1 cost operator `Z1 = g gᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostOperator {
    imep_vector: Vec<f64>,
}

impl CostOperator {
    pub fn from_imep_vector(imep_vector: Vec<f64>) -> Self {
        Self { imep_vector }
    }

    /// `g_i = ∫ f_i dV` [m³].
    pub fn imep_vector(&self) -> &[f64] {
        &self.imep_vector
    }

    pub fn n_pc(&self) -> usize {
        self.imep_vector.len()
    }

    /// Gross indicated work `gᵀw` [J].
    pub fn work(&self, w: &[f64]) -> f64 {
        self.imep_vector.iter().zip(w).map(|(g, x)| g * x).sum()
    }

    /// Dense `Z1`.
    pub fn z1(&self) -> DMatrix<f64> {
        let g = nalgebra::DVector::from_column_slice(&self.imep_vector);
        &g * g.transpose()
    }
}

pub fn build_cost_operator(basis: &PcBasis) -> CostOperator {
    let cyl = basis.cylinder();
    CostOperator {
        imep_vector: basis
            .components()
            .iter()
            .map(|f| cyl.integrate_dv(f))
            .collect(),
    }
}

/// `J = (w − w_itc)ᵀ Z1 (w − w_itc)` [J²].
pub fn cost(w: &WeightVector, w_itc: &WeightVector, op: &CostOperator) -> f64 {
    let d = op.work(w.as_slice()) - op.work(w_itc.as_slice());
    d * d
}

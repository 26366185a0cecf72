//! Gaussian constraint statistics and the total violation probability.
//!
//! All four constraints use the convention "h > 0 is a violation":
//!
//! | h  | quantity                                   |
//! |----|--------------------------------------------|
//! | h1 | `W_lo − gᵀw` (work below the IMEP band)    |
//! | h2 | `gᵀw − W_hi` (work above the IMEP band)    |
//! | h3 | `p(θ_pmax) − p_ub`                         |
//! | h4 | `dp/dθ(θ_dpmax) − dp_ub`                   |
//!
//! where the band is `IMEP_req·V_d·(1 ∓ ½cov_ub)` and the peak locations are
//! taken from the predicted mean trace.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{CalibError, Result};
use crate::geometry::central_difference;
use crate::itc::CostOperator;
use crate::pcd::PcBasis;

/// Limits in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// Gross IMEP target [Pa].
    pub imep_req: f64,
    /// Upper bound on cov(IMEP_g), also the relative IMEP band width.
    pub cov_ub: f64,
    /// Peak pressure limit [Pa].
    pub p_ub: f64,
    /// Pressure rise rate limit [Pa/CAD].
    pub dp_ub: f64,
    /// Maximum total violation probability.
    pub beta_max: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            imep_req: 4e5,
            cov_ub: 0.10,
            p_ub: 200e5,
            dp_ub: 25e5,
            beta_max: 0.05,
        }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.imep_req) && pos(self.cov_ub) && pos(self.p_ub) && pos(self.dp_ub)) {
            return Err(CalibError::InvalidArgument(format!(
                "constraint limits must be positive: {self:?}"
            )));
        }
        if !(self.beta_max > 0.0 && self.beta_max < 1.0) {
            return Err(CalibError::InvalidArgument(format!(
                "beta_max must lie in (0, 1), got {}",
                self.beta_max
            )));
        }
        Ok(())
    }

    /// IMEP band `[lower, upper]` in work units [J].
    pub fn work_band(&self, displacement: f64) -> (f64, f64) {
        let w = self.imep_req * displacement;
        (w * (1.0 - 0.5 * self.cov_ub), w * (1.0 + 0.5 * self.cov_ub))
    }
}

/// Means and variances of h1..h4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintStats {
    pub mean: [f64; 4],
    pub var: [f64; 4],
    pub theta_pmax: f64,
    pub theta_dpmax: f64,
}

/// Per-constraint and total violation probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub per_constraint: [f64; 4],
    pub total: f64,
}

/// Constraint evaluator bound to one basis and intake pressure.
#[derive(Debug, Clone)]
pub struct ConstraintModel {
    spec: ConstraintSpec,
    theta: Vec<f64>,
    /// `f_i(θ_a)` stored point-major: `[a * n_pc + i]`.
    f: Vec<f64>,
    df: Vec<f64>,
    p_mot: Vec<f64>,
    dp_mot: Vec<f64>,
    g: Vec<f64>,
    band: (f64, f64),
    n_pc: usize,
}

impl ConstraintModel {
    pub fn new(
        spec: ConstraintSpec,
        basis: &PcBasis,
        op: &CostOperator,
        p_im: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let n_pc = basis.n_pc();
        let grid = basis.grid();
        let n = grid.len();
        let mut f = vec![0.0; n * n_pc];
        let mut df = vec![0.0; n * n_pc];
        for i in 0..n_pc {
            let (c, d) = (basis.component(i), basis.component_derivative(i));
            for a in 0..n {
                f[a * n_pc + i] = c[a];
                df[a * n_pc + i] = d[a];
            }
        }
        let p_mot = basis.motored(p_im);
        let dp_mot = central_difference(&p_mot, grid.delta_ca());
        Ok(Self {
            spec,
            theta: grid.theta().to_vec(),
            f,
            df,
            p_mot,
            dp_mot,
            g: op.imep_vector().to_vec(),
            band: spec.work_band(basis.cylinder().displacement()),
            n_pc,
        })
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    fn argmax(&self, base: &[f64], rows: &[f64], w: &[f64]) -> usize {
        let n_pc = self.n_pc;
        let mut best = (0, f64::NEG_INFINITY);
        for (a, (b, row)) in base.iter().zip(rows.chunks_exact(n_pc)).enumerate() {
            let v = b + row.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
            if v > best.1 {
                best = (a, v);
            }
        }
        best.0
    }

    /// Peak pressure and peak pressure-rise rate of the reconstruction at `w`.
    pub fn peaks(&self, w: &[f64]) -> [f64; 2] {
        let value = |base: &[f64], rows: &[f64]| {
            let a = self.argmax(base, rows, w);
            base[a]
                + rows[a * self.n_pc..(a + 1) * self.n_pc]
                    .iter()
                    .zip(w)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
        };
        [value(&self.p_mot, &self.f), value(&self.dp_mot, &self.df)]
    }

    fn at(
        &self,
        a: usize,
        base: &[f64],
        rows: &[f64],
        mean: &[f64],
        var: &[f64],
        bound: f64,
    ) -> (f64, f64) {
        let row = &rows[a * self.n_pc..(a + 1) * self.n_pc];
        let mu = base[a] + row.iter().zip(mean).map(|(x, y)| x * y).sum::<f64>() - bound;
        let s2 = row.iter().zip(var).map(|(x, v)| x * x * v).sum();
        (mu, s2)
    }

    /// Statistics of h1..h4 for a weight belief.
    pub fn stats(&self, mean: &[f64], var: &[f64]) -> ConstraintStats {
        let work: f64 = self.g.iter().zip(mean).map(|(g, w)| g * w).sum();
        let work_var: f64 = self.g.iter().zip(var).map(|(g, v)| g * g * v).sum();
        let ip = self.argmax(&self.p_mot, &self.f, mean);
        let id = self.argmax(&self.dp_mot, &self.df, mean);
        let (m3, v3) = self.at(ip, &self.p_mot, &self.f, mean, var, self.spec.p_ub);
        let (m4, v4) = self.at(id, &self.dp_mot, &self.df, mean, var, self.spec.dp_ub);
        ConstraintStats {
            mean: [self.band.0 - work, work - self.band.1, m3, m4],
            var: [work_var, work_var, v3, v4],
            theta_pmax: self.theta[ip],
            theta_dpmax: self.theta[id],
        }
    }
}

/// `Pr(h > 0)` for `h ~ N(mean, var)`; a degenerate `h` is a step.
pub fn exceedance(mean: f64, var: f64) -> f64 {
    if var > 0.0 {
        0.5 * erfc(-mean / (2.0 * var).sqrt())
    } else if mean > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `β_i = β_{i−1}(1 − β̃_i) + β̃_i`, `β_0 = 0`.
pub fn combine(per_constraint: &[f64]) -> f64 {
    per_constraint.iter().fold(0.0, |b, &t| b * (1.0 - t) + t)
}

pub fn violation_probability(stats: &ConstraintStats) -> Violation {
    let per_constraint = std::array::from_fn(|i| exceedance(stats.mean[i], stats.var[i]));
    Violation {
        total: combine(&per_constraint),
        per_constraint,
    }
}

pub fn is_feasible(beta: f64, spec: &ConstraintSpec) -> bool {
    beta <= spec.beta_max
}

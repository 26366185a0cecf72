//! Improvement-based acquisition over the distribution of the ITC cost.
//!
//! With a Gaussian weight belief the cost `J = (w − w_itc)ᵀ Z1 (w − w_itc)`
//! is a generalized chi-squared variable. `Z1` has rank one, so `J` is the
//! square of the scalar Gaussian `X = gᵀ(w − w_itc)` and every sample costs
//! O(1) once the two scalar moments are known. Lower cost is better:
//! improvement means `J < J*`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CalibError, Result};
use crate::itc::CostOperator;
use crate::pcd::WeightVector;

/// Default Monte Carlo sample count.
pub const DEFAULT_N_MC: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AcquisitionKind {
    Ei,
    Nei,
    Pi,
    Npi,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 4] = [Self::Ei, Self::Nei, Self::Pi, Self::Npi];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ei => "EI",
            Self::Nei => "NEI",
            Self::Pi => "PI",
            Self::Npi => "NPI",
        }
    }

    /// Noisy variants compare against the incumbent's predicted distribution.
    pub fn is_noisy(self) -> bool {
        matches!(self, Self::Nei | Self::Npi)
    }
}

impl std::fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AcquisitionKind {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EI" => Ok(Self::Ei),
            "NEI" => Ok(Self::Nei),
            "PI" => Ok(Self::Pi),
            "NPI" => Ok(Self::Npi),
            other => Err(CalibError::InvalidArgument(format!(
                "unknown acquisition `{other}` (expected EI, NEI, PI or NPI)"
            ))),
        }
    }
}

/// Distribution of `J` induced by a weight belief.
///
/// The ITC weights may depend on an uncertain fuel energy:
/// `w_itc(q) = w_itc + itc_slope·(q − q̂)` with `q ~ N(q̂, q_var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDistribution {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub w_itc: WeightVector,
    pub itc_slope: Vec<f64>,
    pub q_var: f64,
    pub op: CostOperator,
}

impl CostDistribution {
    /// Distribution with a fixed fuel energy.
    pub fn new(
        mean: Vec<f64>,
        var: Vec<f64>,
        w_itc: WeightVector,
        op: CostOperator,
    ) -> Result<Self> {
        let n = op.n_pc();
        Self::with_fuel_uncertainty(mean, var, w_itc, vec![0.0; n], 0.0, op)
    }

    pub fn with_fuel_uncertainty(
        mean: Vec<f64>,
        var: Vec<f64>,
        w_itc: WeightVector,
        itc_slope: Vec<f64>,
        q_var: f64,
        op: CostOperator,
    ) -> Result<Self> {
        let n = op.n_pc();
        if mean.len() != n || var.len() != n || w_itc.len() != n || itc_slope.len() != n {
            return Err(CalibError::InvalidArgument(format!(
                "cost distribution needs {n} entries per vector"
            )));
        }
        if var
            .iter()
            .chain(std::iter::once(&q_var))
            .any(|v| !(*v >= 0.0))
        {
            return Err(CalibError::InvalidArgument(
                "variances must be non-negative".into(),
            ));
        }
        Ok(Self {
            mean,
            var,
            w_itc,
            itc_slope,
            q_var,
            op,
        })
    }

    /// Mean and standard deviation of `X = gᵀ(w − w_itc)`.
    pub fn scalar_moments(&self) -> ScalarCost {
        scalar_moments(
            &self.op,
            &self.mean,
            &self.var,
            self.w_itc.as_slice(),
            &self.itc_slope,
            self.q_var,
        )
    }

    /// Cost at the mean belief.
    pub fn deterministic_cost(&self) -> f64 {
        let m = self.scalar_moments().mean;
        m * m
    }

    /// `E[J] = m² + s²`.
    pub fn expected_cost(&self) -> f64 {
        let s = self.scalar_moments();
        s.mean * s.mean + s.std * s.std
    }
}

/// `J = X²` with `X ~ N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCost {
    pub mean: f64,
    pub std: f64,
}

impl ScalarCost {
    #[inline]
    pub fn sample(&self, z: f64) -> f64 {
        let x = self.mean + self.std * z;
        x * x
    }
}

pub fn scalar_moments(
    op: &CostOperator,
    mean: &[f64],
    var: &[f64],
    w_itc: &[f64],
    slope: &[f64],
    q_var: f64,
) -> ScalarCost {
    let g = op.imep_vector();
    let m: f64 = g
        .iter()
        .zip(mean)
        .zip(w_itc)
        .map(|((g, w), c)| g * (w - c))
        .sum();
    let s_w: f64 = g.iter().zip(var).map(|(g, v)| g * g * v).sum();
    let gs = op.work(slope);
    ScalarCost {
        mean: m,
        std: (s_w + gs * gs * q_var).sqrt(),
    }
}

/// Standard normals consumed per sample: one per PC plus one for the fuel.
fn raw_draws(n_pc: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * (n_pc + 1))
        .map(|_| rng.sample(StandardNormal))
        .collect()
}

/// Samples `J` by drawing the full weight vector and evaluating the dense
/// quadratic form with `Z1`.
pub fn sample_cost(d: &CostDistribution, n: usize, seed: u64) -> Vec<f64> {
    let n_pc = d.op.n_pc();
    let xi = raw_draws(n_pc, n, seed);
    let z1 = d.op.z1();
    let sq: Vec<f64> = d.var.iter().map(|v| v.sqrt()).collect();
    let sq_q = d.q_var.sqrt();
    xi.chunks_exact(n_pc + 1)
        .map(|x| {
            let dq = sq_q * x[n_pc];
            let diff = nalgebra::DVector::from_fn(n_pc, |i, _| {
                let w = d.mean[i] + sq[i] * x[i];
                let c = d.w_itc[i] + d.itc_slope[i] * dq;
                w - c
            });
            (diff.transpose() * &z1 * &diff)[0]
        })
        .collect()
}

/// Same draws as [`sample_cost`], evaluated through the rank-1 reduction.
pub fn sample_cost_reduced(d: &CostDistribution, n: usize, seed: u64) -> Vec<f64> {
    let n_pc = d.op.n_pc();
    let xi = raw_draws(n_pc, n, seed);
    let g = d.op.imep_vector();
    let m = d.scalar_moments().mean;
    let gs = d.op.work(&d.itc_slope);
    let coef: Vec<f64> = g.iter().zip(&d.var).map(|(g, v)| g * v.sqrt()).collect();
    let coef_q = -gs * d.q_var.sqrt();
    xi.chunks_exact(n_pc + 1)
        .map(|x| {
            let e: f64 = coef.iter().zip(x).map(|(c, z)| c * z).sum::<f64>() + coef_q * x[n_pc];
            let v = m + e;
            v * v
        })
        .collect()
}

/// Common random numbers shared by every candidate within one iteration.
///
/// Each stream is a stratified standard-normal sample: one draw per
/// probability stratum `[(i)/n, (i+1)/n)`, randomly ordered. Candidate and
/// incumbent streams are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnDraws {
    z: Vec<f64>,
    z_star: Vec<f64>,
}

fn stratified_normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::standard();
    let mut z: Vec<f64> = (0..n)
        .map(|i| {
            let u: f64 = rng.random();
            let p = ((i as f64 + u) / n as f64).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            normal.inverse_cdf(p)
        })
        .collect();
    z.shuffle(rng);
    z
}

impl CrnDraws {
    pub fn new(n_mc: usize, seed: u64) -> Result<Self> {
        if n_mc == 0 {
            return Err(CalibError::InvalidArgument("n_mc must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = stratified_normals(n_mc, &mut rng);
        let z_star = stratified_normals(n_mc, &mut rng);
        Ok(Self { z, z_star })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Acquisition value of a candidate with scalar moments `cand`.
    ///
    /// `incumbent` is used by the noisy variants, `j_star` by the others.
    pub fn alpha(
        &self,
        kind: AcquisitionKind,
        cand: ScalarCost,
        incumbent: ScalarCost,
        j_star: f64,
    ) -> f64 {
        let n = self.z.len() as f64;
        match kind {
            AcquisitionKind::Ei => {
                self.z
                    .iter()
                    .map(|&z| (j_star - cand.sample(z)).max(0.0))
                    .sum::<f64>()
                    / n
            }
            AcquisitionKind::Pi => {
                self.z.iter().filter(|&&z| cand.sample(z) < j_star).count() as f64 / n
            }
            AcquisitionKind::Nei => {
                self.z
                    .iter()
                    .zip(&self.z_star)
                    .map(|(&z, &zs)| (incumbent.sample(zs) - cand.sample(z)).max(0.0))
                    .sum::<f64>()
                    / n
            }
            AcquisitionKind::Npi => {
                self.z
                    .iter()
                    .zip(&self.z_star)
                    .filter(|(&z, &zs)| cand.sample(z) < incumbent.sample(zs))
                    .count() as f64
                    / n
            }
        }
    }
}

/// Monte Carlo acquisition value; deterministic per seed.
pub fn alpha(
    kind: AcquisitionKind,
    candidate: &CostDistribution,
    incumbent: &CostDistribution,
    j_star: f64,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    let draws = CrnDraws::new(n_mc, seed)?;
    Ok(draws.alpha(
        kind,
        candidate.scalar_moments(),
        incumbent.scalar_moments(),
        j_star,
    ))
}

/// Best observed cost and where it was observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incumbent {
    pub index: usize,
    pub cost: f64,
    pub location: [f64; 2],
}

/// Minimum cost over the given observations; ties keep the earliest.
pub fn best_observed<I>(observations: I) -> Result<Incumbent>
where
    I: IntoIterator<Item = (f64, [f64; 2])>,
{
    let mut best: Option<Incumbent> = None;
    for (index, (cost, location)) in observations.into_iter().enumerate() {
        if best.is_none_or(|b| cost < b.cost) {
            best = Some(Incumbent {
                index,
                cost,
                location,
            });
        }
    }
    best.ok_or(CalibError::EmptyHistory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn op() -> CostOperator {
        CostOperator::from_imep_vector(vec![2e-4, -1e-4, 5e-5, 3e-5])
    }

    fn dist(mean: [f64; 4], var: [f64; 4]) -> CostDistribution {
        CostDistribution::new(
            mean.to_vec(),
            var.to_vec(),
            WeightVector(vec![1e6, -2e5, 3e5, 0.0]),
            op(),
        )
        .unwrap()
    }

    #[test]
    fn zero_variance_samples_equal_the_deterministic_cost() {
        let d = dist([1.2e6, -1e5, 2e5, 4e4], [0.0; 4]);
        let j = d.deterministic_cost();
        assert!(j > 0.0);
        for s in sample_cost(&d, 100, 3) {
            assert_relative_eq!(s, j, max_relative = 1e-9);
        }
    }

    #[test]
    fn centred_unit_variance_is_chi_squared_one() {
        let g = op();
        let norm2: f64 = g.imep_vector().iter().map(|x| x * x).sum();
        // var_i = 1/|g|² makes gᵀw unit variance.
        let v = 1.0 / norm2;
        let itc = WeightVector(vec![1e6, -2e5, 3e5, 0.0]);
        let d = CostDistribution::new(itc.0.clone(), vec![v; 4], itc, g).unwrap();
        let n = 20_000;
        let s = sample_cost_reduced(&d, n, 17);
        let mean = s.iter().sum::<f64>() / n as f64;
        assert!(
            (mean - 1.0).abs() < 3.0 / (n as f64).sqrt() * 2f64.sqrt(),
            "mean {mean}"
        );
    }

    #[test]
    fn sample_mean_matches_closed_form() {
        let d = dist([1.1e6, -1.5e5, 2.5e5, 1e4], [4e8, 1e9, 2e8, 5e8]);
        let n = 20_000;
        let s = sample_cost(&d, n, 5);
        let mean = s.iter().sum::<f64>() / n as f64;
        assert_relative_eq!(
            mean,
            d.expected_cost(),
            max_relative = 5.0 / (n as f64).sqrt()
        );
    }

    #[test]
    fn full_and_reduced_sampling_agree_per_seed() {
        let mut d = dist([1.1e6, -1.5e5, 2.5e5, 1e4], [4e8, 1e9, 2e8, 5e8]);
        d.itc_slope = vec![300.0, -20.0, 10.0, 5.0];
        d.q_var = 400.0;
        let a = sample_cost(&d, 500, 8);
        let b = sample_cost_reduced(&d, 500, 8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn fuel_uncertainty_adds_variance() {
        let mut d = dist([1.1e6, -1.5e5, 2.5e5, 1e4], [4e8, 1e9, 2e8, 5e8]);
        let s0 = d.scalar_moments().std;
        d.itc_slope = vec![300.0, -20.0, 10.0, 5.0];
        d.q_var = 400.0;
        let gs = d.op.work(&d.itc_slope);
        assert_relative_eq!(
            d.scalar_moments().std.powi(2),
            s0 * s0 + gs * gs * 400.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn deterministic_candidate_edge_cases() {
        let draws = CrnDraws::new(4096, 1).unwrap();
        let inc = ScalarCost {
            mean: 3.0,
            std: 0.0,
        };
        let at = ScalarCost {
            mean: 3.0,
            std: 0.0,
        };
        assert_eq!(draws.alpha(AcquisitionKind::Ei, at, inc, 9.0), 0.0);
        assert_eq!(draws.alpha(AcquisitionKind::Pi, at, inc, 9.0), 0.0);
        let below = ScalarCost {
            mean: 2.0,
            std: 0.0,
        };
        assert_relative_eq!(
            draws.alpha(AcquisitionKind::Ei, below, inc, 9.0),
            5.0,
            max_relative = 1e-12
        );
        assert_eq!(draws.alpha(AcquisitionKind::Pi, below, inc, 9.0), 1.0);
        // Noisy variants collapse to the plain ones for a certain incumbent.
        assert_relative_eq!(
            draws.alpha(AcquisitionKind::Nei, below, inc, 0.0),
            5.0,
            max_relative = 1e-12
        );
        assert_eq!(draws.alpha(AcquisitionKind::Npi, below, inc, 0.0), 1.0);
    }

    #[test]
    fn nei_with_certain_incumbent_equals_ei() {
        let draws = CrnDraws::new(4096, 2).unwrap();
        let cand = ScalarCost {
            mean: 1.5,
            std: 0.7,
        };
        let inc = ScalarCost {
            mean: 1.8,
            std: 0.0,
        };
        let ei = draws.alpha(AcquisitionKind::Ei, cand, inc, 1.8 * 1.8);
        let nei = draws.alpha(AcquisitionKind::Nei, cand, inc, f64::NAN);
        assert_relative_eq!(ei, nei, max_relative = 1e-12);
    }

    /// `E[max(J* − X², 0)]` by composite Simpson over the Gaussian density.
    fn ei_quadrature(m: f64, s: f64, j_star: f64) -> f64 {
        let r = j_star.sqrt();
        let n = 20_000;
        let h = 2.0 * r / n as f64;
        let f = |x: f64| {
            (j_star - x * x) * (-(x - m).powi(2) / (2.0 * s * s)).exp()
                / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut acc = f(-r) + f(r);
        for i in 1..n {
            let x = -r + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * h / 3.0
    }

    #[test]
    fn ei_matches_one_dimensional_quadrature() {
        let draws = CrnDraws::new(DEFAULT_N_MC, 11).unwrap();
        for (m, s, j) in [
            (1.0, 0.5, 1.0),
            (0.3, 1.0, 0.5),
            (2.0, 0.4, 2.5),
            (-1.2, 0.8, 2.0),
        ] {
            let ei = draws.alpha(
                AcquisitionKind::Ei,
                ScalarCost { mean: m, std: s },
                ScalarCost {
                    mean: 0.0,
                    std: 0.0,
                },
                j,
            );
            let q = ei_quadrature(m, s, j);
            assert_relative_eq!(ei, q, max_relative = 0.02);
        }
    }

    #[test]
    fn alpha_is_deterministic_per_seed() {
        let a = dist([1.1e6, -1.5e5, 2.5e5, 1e4], [4e8, 1e9, 2e8, 5e8]);
        let b = dist([1.0e6, -1.0e5, 2.0e5, 1e4], [1e8, 1e8, 1e8, 1e8]);
        for kind in AcquisitionKind::ALL {
            let x = alpha(kind, &a, &b, 5.0, 4096, 99).unwrap();
            let y = alpha(kind, &a, &b, 5.0, 4096, 99).unwrap();
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn stratified_draws_have_unit_moments() {
        let d = CrnDraws::new(4096, 4).unwrap();
        let mean = d.z.iter().sum::<f64>() / 4096.0;
        let var = d.z.iter().map(|z| z * z).sum::<f64>() / 4096.0;
        assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-2);
        assert_ne!(d.z, d.z_star);
    }

    #[test]
    fn best_observed_scan() {
        assert!(matches!(
            best_observed(std::iter::empty()),
            Err(CalibError::EmptyHistory)
        ));
        let one = best_observed([(4.0, [0.8, -45.0])]).unwrap();
        assert_eq!((one.index, one.cost), (0, 4.0));
        let tie = best_observed([
            (5.0, [0.8, -45.0]),
            (2.0, [0.75, -50.0]),
            (2.0, [0.76, -55.0]),
        ])
        .unwrap();
        assert_eq!(tie.index, 1);
        assert_eq!(tie.location, [0.75, -50.0]);
    }

    #[test]
    fn kind_parsing() {
        for k in AcquisitionKind::ALL {
            assert_eq!(k.as_str().parse::<AcquisitionKind>().unwrap(), k);
        }
        assert_eq!(
            "nei".parse::<AcquisitionKind>().unwrap(),
            AcquisitionKind::Nei
        );
        assert!("UCB".parse::<AcquisitionKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{ProptestConfig, Strategy};
        use proptest::{prop_assert, proptest};

        fn scalar() -> impl Strategy<Value = ScalarCost> {
            (-3.0f64..3.0, 0.0f64..2.0).prop_map(|(mean, std)| ScalarCost { mean, std })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn ei_nonnegative_pi_in_unit_interval(c in scalar(), i in scalar(), j in 0.0f64..5.0, seed in 0u64..100) {
                let d = CrnDraws::new(1024, seed).unwrap();
                for kind in AcquisitionKind::ALL {
                    let a = d.alpha(kind, c, i, j);
                    prop_assert!(a >= 0.0);
                    if matches!(kind, AcquisitionKind::Pi | AcquisitionKind::Npi) {
                        prop_assert!(a <= 1.0);
                    }
                }
            }

            #[test]
            fn ei_grows_with_variance_at_fixed_mean_cost(c in 0.01f64..5.0, f in 0.0f64..1.0, df in 0.0f64..1.0,
                                                         j in 0.01f64..5.0, sign in proptest::bool::ANY) {
                // E[J] = m² + s² is held at c while s grows.
                let d = CrnDraws::new(DEFAULT_N_MC, 21).unwrap();
                let inc = ScalarCost { mean: 0.0, std: 0.0 };
                let at = |frac: f64| {
                    let s = (frac * c).sqrt();
                    let m = ((1.0 - frac) * c).sqrt();
                    ScalarCost { mean: if sign { m } else { -m }, std: s }
                };
                let f2 = (f + df * (1.0 - f)).min(1.0);
                let lo = d.alpha(AcquisitionKind::Ei, at(f), inc, j);
                let hi = d.alpha(AcquisitionKind::Ei, at(f2), inc, j);
                // Three standard errors of the MC estimate.
                let se = j / (DEFAULT_N_MC as f64).sqrt();
                prop_assert!(hi >= lo - 3.0 * se, "{lo} -> {hi}");
            }
        }
    }
}

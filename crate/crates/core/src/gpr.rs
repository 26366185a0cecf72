//! Gaussian process regression of PC weights over (BR, SOI_DI).
//!
//! Every output channel is an independent GP with a Matérn-3/2 kernel and
//! fixed, heteroscedastic observation noise: the per-point variances of the
//! buffered cycles are added to the Gram diagonal instead of a global noise
//! hyperparameter. Inputs and outputs are standardized by a [`Scaling`];
//! hyperparameters live in the scaled space.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::optim::nelder_mead;
use crate::seed;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Jitter levels, as multiples of `φ_f²`, tried in order.
const JITTER_LEVELS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

const LOG_PHI_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 4.605_170_185_988_092); // 1e-3 .. 1e2
const LOG_LEN_BOUNDS: (f64, f64) = (-2.995_732_273_553_991, 4.605_170_185_988_092); // 0.05 .. 1e2

/// Kernel hyperparameters in scaled units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub phi_f: f64,
    pub length_scales: [f64; 2],
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            phi_f: 1.0,
            length_scales: [1.0, 1.0],
        }
    }
}

impl Hyperparams {
    fn to_log(self) -> [f64; 3] {
        [
            self.phi_f.ln(),
            self.length_scales[0].ln(),
            self.length_scales[1].ln(),
        ]
    }

    fn from_log(t: &[f64]) -> Self {
        Self {
            phi_f: t[0].exp(),
            length_scales: [t[1].exp(), t[2].exp()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.phi_f) && self.length_scales.iter().all(|l| ok(*l)) {
            Ok(())
        } else {
            Err(CalibError::InvalidArgument(format!(
                "hyperparameters must be positive: {self:?}"
            )))
        }
    }
}

/// Matérn-3/2 covariance `φ_f² (1 + √3ρ) exp(−√3ρ)`.
pub fn kernel(x: &[f64; 2], y: &[f64; 2], hp: &Hyperparams) -> f64 {
    let r0 = (x[0] - y[0]) / hp.length_scales[0];
    let r1 = (x[1] - y[1]) / hp.length_scales[1];
    matern(r0 * r0 + r1 * r1, hp.phi_f)
}

#[inline]
fn matern(rho2: f64, phi_f: f64) -> f64 {
    let s = SQRT3 * rho2.sqrt();
    phi_f * phi_f * (1.0 + s) * (-s).exp()
}

/// Standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_mean: [f64; 2],
    pub input_std: [f64; 2],
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std > 1e-12 * (1.0 + mean.abs()) {
        (mean, std)
    } else {
        (mean, 1.0)
    }
}

impl Scaling {
    pub fn identity(n_outputs: usize) -> Self {
        Self {
            input_mean: [0.0; 2],
            input_std: [1.0; 2],
            output_mean: vec![0.0; n_outputs],
            output_std: vec![1.0; n_outputs],
        }
    }

    /// Mean/std per input dimension and per output; a zero spread maps to 1.
    pub fn from_data(inputs: &[[f64; 2]], outputs: &[Vec<f64>]) -> Result<Self> {
        let n_out = outputs.first().map(Vec::len).unwrap_or(0);
        if inputs.len() != outputs.len() || outputs.iter().any(|o| o.len() != n_out) {
            return Err(CalibError::InvalidArgument("ragged scaling data".into()));
        }
        let (m0, s0) = mean_std(inputs.iter().map(|x| x[0]));
        let (m1, s1) = mean_std(inputs.iter().map(|x| x[1]));
        let (output_mean, output_std) = (0..n_out)
            .map(|o| mean_std(outputs.iter().map(|y| y[o])))
            .unzip();
        Ok(Self {
            input_mean: [m0, m1],
            input_std: [s0, s1],
            output_mean,
            output_std,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.output_mean.len()
    }

    pub fn scale_input(&self, x: &[f64; 2]) -> [f64; 2] {
        [
            (x[0] - self.input_mean[0]) / self.input_std[0],
            (x[1] - self.input_mean[1]) / self.input_std[1],
        ]
    }
}

/// Summarized observations: one input, per-output mean and variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<[f64; 2]>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input: [f64; 2], mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != var.len() {
            return Err(CalibError::InvalidArgument(
                "mean and variance lengths differ".into(),
            ));
        }
        if let Some(first) = self.means.first() {
            if first.len() != mean.len() {
                return Err(CalibError::InvalidArgument(format!(
                    "expected {} outputs, got {}",
                    first.len(),
                    mean.len()
                )));
            }
        }
        if !input.iter().chain(&mean).all(|v| v.is_finite()) {
            return Err(CalibError::InvalidArgument(
                "training data must be finite".into(),
            ));
        }
        if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CalibError::InvalidArgument(
                "observation variances must be finite and >= 0".into(),
            ));
        }
        self.inputs.push(input);
        self.means.push(mean);
        self.vars.push(var);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_outputs(&self) -> usize {
        self.means.first().map(Vec::len).unwrap_or(0)
    }

    pub fn inputs(&self) -> &[[f64; 2]] {
        &self.inputs
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }
}

/// Predicted per-output mean and variance (diagonal covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBelief {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Cholesky factor of `K + N + jI` with the weights `α`.
#[derive(Debug, Clone)]
struct Factor {
    /// Row-major lower triangle.
    l: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    log_det: f64,
}

fn gram(x: &[[f64; 2]], noise: &[f64], hp: &Hyperparams) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&x[i], &x[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += noise[i];
    }
    k
}

/// Factorizes with the jitter ladder. A level is accepted only if the
/// factorization reproduces the data: `‖y − (K + N)α‖∞ ≤ 1e-6 (1 + ‖y‖∞)`.
fn factorize(x: &[[f64; 2]], y: &[f64], noise: &[f64], hp: &Hyperparams) -> Result<Factor> {
    let n = x.len();
    let k = gram(x, noise, hp);
    let y_vec = DVector::from_column_slice(y);
    let tol = 1e-6 * (1.0 + y.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let phi2 = hp.phi_f * hp.phi_f;
    for level in JITTER_LEVELS {
        let jitter = level * phi2;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        let Some(chol) = kj.cholesky() else { continue };
        let alpha = chol.solve(&y_vec);
        if !alpha.iter().all(|a| a.is_finite()) {
            continue;
        }
        let residual = (&y_vec - &k * &alpha).amax();
        if !(residual <= tol) {
            continue;
        }
        let lm = chol.l();
        let mut l = vec![0.0; n * n];
        let mut log_det = 0.0;
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = lm[(i, j)];
            }
            log_det += 2.0 * lm[(i, i)].ln();
        }
        return Ok(Factor {
            l,
            alpha: alpha.iter().copied().collect(),
            jitter,
            log_det,
        });
    }
    Err(CalibError::IllConditioned {
        jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1] * phi2,
    })
}

/// Log marginal likelihood of scaled data under `hp`.
pub fn log_marginal_likelihood(
    x: &[[f64; 2]],
    y: &[f64],
    noise: &[f64],
    hp: &Hyperparams,
) -> Result<f64> {
    let f = factorize(x, y, noise, hp)?;
    let fit: f64 = y.iter().zip(&f.alpha).map(|(a, b)| a * b).sum();
    Ok(-0.5 * fit - 0.5 * f.log_det - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Hyperparameter search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Likelihood evaluations per output, shared by all starts.
    pub budget: usize,
    /// Random starts in addition to the warm start.
    pub restarts: usize,
    /// Below this many points the default hyperparameters are used.
    pub min_points: usize,
    /// In a loop, hyperparameters are re-optimized every this many new
    /// points and reused in between.
    pub refit_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            budget: 200,
            restarts: 4,
            min_points: 3,
            refit_every: 5,
        }
    }
}

#[derive(Debug, Clone)]
struct OutputModel {
    hp: Hyperparams,
    factor: Factor,
}

/// Fitted multi-output GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    scaling: Scaling,
    raw_inputs: Vec<[f64; 2]>,
    x: Vec<[f64; 2]>,
    outputs: Vec<OutputModel>,
}

/// Serializable snapshot of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub scaling: Scaling,
    pub inputs: Vec<[f64; 2]>,
    pub hyperparams: Vec<Hyperparams>,
    pub jitter: Vec<f64>,
}

struct Scaled {
    x: Vec<[f64; 2]>,
    y: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

fn scale_training(ts: &TrainingSet, scaling: &Scaling) -> Result<Scaled> {
    let n_out = ts.n_outputs();
    if scaling.n_outputs() != n_out {
        return Err(CalibError::InvalidArgument(format!(
            "scaling has {} outputs, training set {n_out}",
            scaling.n_outputs()
        )));
    }
    let x = ts.inputs.iter().map(|p| scaling.scale_input(p)).collect();
    let y = (0..n_out)
        .map(|o| {
            ts.means
                .iter()
                .map(|m| (m[o] - scaling.output_mean[o]) / scaling.output_std[o])
                .collect()
        })
        .collect();
    let noise = (0..n_out)
        .map(|o| {
            ts.vars
                .iter()
                .map(|v| v[o] / scaling.output_std[o].powi(2))
                .collect()
        })
        .collect();
    Ok(Scaled { x, y, noise })
}

fn fit_output(
    x: &[[f64; 2]],
    y: &[f64],
    noise: &[f64],
    warm: Option<Hyperparams>,
    cfg: &FitConfig,
    seed: u64,
) -> Hyperparams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lower = [LOG_PHI_BOUNDS.0, LOG_LEN_BOUNDS.0, LOG_LEN_BOUNDS.0];
    let upper = [LOG_PHI_BOUNDS.1, LOG_LEN_BOUNDS.1, LOG_LEN_BOUNDS.1];
    let mut starts = vec![warm.unwrap_or_default().to_log()];
    for _ in 0..cfg.restarts {
        starts.push(std::array::from_fn(|d| {
            rng.random_range(lower[d]..upper[d])
        }));
    }
    let per_start = (cfg.budget / starts.len()).max(4);
    let objective = |t: &[f64]| {
        log_marginal_likelihood(x, y, noise, &Hyperparams::from_log(t))
            .map(|l| -l)
            .unwrap_or(f64::INFINITY)
    };
    let mut best: Option<(f64, [f64; 3])> = None;
    for s in &starts {
        let m = nelder_mead(objective, s, &[0.5, 0.5, 0.5], &lower, &upper, per_start);
        if best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, [m.x[0], m.x[1], m.x[2]]));
        }
    }
    match best {
        Some((v, t)) if v.is_finite() => Hyperparams::from_log(&t),
        _ => warm.unwrap_or_default(),
    }
}

impl GpModel {
    /// Builds the posterior for given hyperparameters (one per output).
    pub fn with_hyperparams(
        ts: &TrainingSet,
        scaling: &Scaling,
        hps: &[Hyperparams],
    ) -> Result<Self> {
        if ts.is_empty() {
            return Err(CalibError::InvalidArgument(
                "GP needs at least one training point".into(),
            ));
        }
        if hps.len() != ts.n_outputs() {
            return Err(CalibError::InvalidArgument(format!(
                "{} hyperparameter sets for {} outputs",
                hps.len(),
                ts.n_outputs()
            )));
        }
        for hp in hps {
            hp.validate()?;
        }
        let s = scale_training(ts, scaling)?;
        let outputs = hps
            .par_iter()
            .enumerate()
            .map(|(o, hp)| {
                factorize(&s.x, &s.y[o], &s.noise[o], hp)
                    .map(|factor| OutputModel { hp: *hp, factor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scaling: scaling.clone(),
            raw_inputs: ts.inputs.clone(),
            x: s.x,
            outputs,
        })
    }

    /// Maximizes the log marginal likelihood per output, then builds the
    /// posterior. `warm` seeds the first start of each output.
    pub fn fit(
        ts: &TrainingSet,
        scaling: &Scaling,
        warm: Option<&[Hyperparams]>,
        cfg: &FitConfig,
        seed: u64,
    ) -> Result<Self> {
        if ts.is_empty() {
            return Err(CalibError::InvalidArgument(
                "GP needs at least one training point".into(),
            ));
        }
        let n_out = ts.n_outputs();
        if let Some(w) = warm {
            if w.len() != n_out {
                return Err(CalibError::InvalidArgument(
                    "warm start has the wrong output count".into(),
                ));
            }
        }
        if ts.len() < cfg.min_points {
            let hps: Vec<Hyperparams> = match warm {
                Some(w) => w.to_vec(),
                None => vec![Hyperparams::default(); n_out],
            };
            return Self::with_hyperparams(ts, scaling, &hps);
        }
        let s = scale_training(ts, scaling)?;
        let hps: Vec<Hyperparams> = (0..n_out)
            .into_par_iter()
            .map(|o| {
                fit_output(
                    &s.x,
                    &s.y[o],
                    &s.noise[o],
                    warm.map(|w| w[o]),
                    cfg,
                    seed::derive(seed, o as u64),
                )
            })
            .collect();
        Self::with_hyperparams(ts, scaling, &hps)
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn hyperparams(&self) -> Vec<Hyperparams> {
        self.outputs.iter().map(|o| o.hp).collect()
    }

    pub fn jitter(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.factor.jitter).collect()
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn dump(&self) -> ModelDump {
        ModelDump {
            scaling: self.scaling.clone(),
            inputs: self.raw_inputs.clone(),
            hyperparams: self.hyperparams(),
            jitter: self.jitter(),
        }
    }

    /// Posterior mean only, descaled.
    pub fn predict_mean(&self, input: &[f64; 2]) -> Vec<f64> {
        let q = self.scaling.scale_input(input);
        self.outputs
            .iter()
            .enumerate()
            .map(|(o, out)| {
                let [l0, l1] = out.hp.length_scales;
                let (i0, i1) = (1.0 / (l0 * l0), 1.0 / (l1 * l1));
                let m: f64 = self
                    .x
                    .iter()
                    .zip(&out.factor.alpha)
                    .map(|(x, a)| {
                        let (d0, d1) = (q[0] - x[0], q[1] - x[1]);
                        a * matern(d0 * d0 * i0 + d1 * d1 * i1, out.hp.phi_f)
                    })
                    .sum();
                m * self.scaling.output_std[o] + self.scaling.output_mean[o]
            })
            .collect()
    }

    /// Posterior mean and latent variance at a raw input, descaled.
    pub fn predict(&self, input: &[f64; 2]) -> WeightBelief {
        let q = self.scaling.scale_input(input);
        let n = self.x.len();
        let d: Vec<[f64; 2]> = self.x.iter().map(|x| [q[0] - x[0], q[1] - x[1]]).collect();
        let mut mean = Vec::with_capacity(self.outputs.len());
        let mut var = Vec::with_capacity(self.outputs.len());
        let mut ks = vec![0.0; n];
        let mut v = vec![0.0; n];
        for (o, out) in self.outputs.iter().enumerate() {
            let [l0, l1] = out.hp.length_scales;
            let (i0, i1) = (1.0 / (l0 * l0), 1.0 / (l1 * l1));
            for (k, di) in ks.iter_mut().zip(&d) {
                *k = matern(di[0] * di[0] * i0 + di[1] * di[1] * i1, out.hp.phi_f);
            }
            let m: f64 = ks.iter().zip(&out.factor.alpha).map(|(a, b)| a * b).sum();
            // Forward substitution L v = k*.
            let l = &out.factor.l;
            for i in 0..n {
                let row = &l[i * n..i * n + i];
                let s: f64 = row.iter().zip(&v[..i]).map(|(a, b)| a * b).sum();
                v[i] = (ks[i] - s) / l[i * n + i];
            }
            let vv: f64 = v.iter().map(|x| x * x).sum();
            let prior = out.hp.phi_f * out.hp.phi_f;
            let s2 = (prior - vv).max(0.0);
            let sd = self.scaling.output_std[o];
            mean.push(m * sd + self.scaling.output_mean[o]);
            var.push(s2 * sd * sd);
        }
        WeightBelief { mean, var }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn one_output_set(points: &[([f64; 2], f64, f64)]) -> TrainingSet {
        let mut ts = TrainingSet::new();
        for (x, y, v) in points {
            ts.push(*x, vec![*y], vec![*v]).unwrap();
        }
        ts
    }

    #[test]
    fn kernel_values() {
        let hp = Hyperparams::default();
        assert_eq!(kernel(&[0.3, -1.0], &[0.3, -1.0], &hp), 1.0);
        let hp2 = Hyperparams { phi_f: 2.0, ..hp };
        assert_eq!(kernel(&[0.0, 0.0], &[0.0, 0.0], &hp2), 4.0);
        assert_relative_eq!(
            kernel(&[1.0, 0.0], &[0.0, 0.0], &hp),
            0.483_357_724_596_507_65,
            max_relative = 1e-15
        );
        let mut last = f64::INFINITY;
        for i in 0..200 {
            let k = kernel(&[i as f64 * 0.1, 0.0], &[0.0, 0.0], &hp);
            assert!(k < last || i == 0);
            last = k;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn noiseless_interpolation_and_prior_reversion() {
        let pts = [
            ([0.70, -70.0], 1.0, 0.0),
            ([0.74, -60.0], 2.5, 0.0),
            ([0.78, -50.0], 0.5, 0.0),
            ([0.80, -40.0], -1.0, 0.0),
            ([0.72, -45.0], 0.2, 0.0),
        ];
        let ts = one_output_set(&pts);
        let scaling = Scaling::from_data(ts.inputs(), ts.means()).unwrap();
        let hp = Hyperparams {
            phi_f: 1.3,
            length_scales: [0.8, 0.6],
        };
        let gp = GpModel::with_hyperparams(&ts, &scaling, &[hp]).unwrap();
        let sd2 = scaling.output_std[0].powi(2);
        for (x, y, _) in &pts {
            let b = gp.predict(x);
            assert!((b.mean[0] - y).abs() < 1e-6);
            assert!(b.var[0] <= 1e-8 * hp.phi_f.powi(2) * sd2);
        }
        for q in [[0.75, -52.0], [0.71, -66.0]] {
            assert_relative_eq!(
                gp.predict_mean(&q)[0],
                gp.predict(&q).mean[0],
                max_relative = 1e-12
            );
        }
        let far = gp.predict(&[50.0, 5000.0]);
        assert_relative_eq!(far.mean[0], scaling.output_mean[0], epsilon = 1e-9);
        assert_relative_eq!(far.var[0], hp.phi_f.powi(2) * sd2, max_relative = 1e-9);
    }

    /// Direct textbook posterior with an explicit matrix inverse.
    fn reference_posterior(
        x: &[f64],
        y: &[f64],
        noise: &[f64],
        hp: &Hyperparams,
        q: f64,
    ) -> (f64, f64) {
        let n = x.len();
        let k = |a: f64, b: f64| {
            let r = (a - b).abs() / hp.length_scales[0];
            hp.phi_f.powi(2) * (1.0 + 3f64.sqrt() * r) * (-(3f64.sqrt()) * r).exp()
        };
        let big = DMatrix::from_fn(n, n, |i, j| {
            k(x[i], x[j]) + if i == j { noise[i] } else { 0.0 }
        });
        let inv = big.try_inverse().unwrap();
        let ks = DVector::from_fn(n, |i, _| k(q, x[i]));
        let yv = DVector::from_column_slice(y);
        let mean = (ks.transpose() * &inv * yv)[0];
        let var = k(q, q) - (ks.transpose() * &inv * &ks)[0];
        (mean, var)
    }

    #[test]
    fn matches_textbook_formula_in_one_dimension() {
        let x = [-1.5, -0.4, 0.3, 1.1, 2.0];
        let y = [0.3, -0.8, 0.1, 1.4, 0.9];
        let noise = [0.01, 0.0, 0.05, 0.02, 0.0];
        let hp = Hyperparams {
            phi_f: 1.2,
            length_scales: [0.7, 1.0],
        };
        let mut ts = TrainingSet::new();
        for i in 0..5 {
            ts.push([x[i], 0.0], vec![y[i]], vec![noise[i]]).unwrap();
        }
        let gp = GpModel::with_hyperparams(&ts, &Scaling::identity(1), &[hp]).unwrap();
        for q in [-2.0, -0.9, 0.0, 0.3, 0.75, 1.7, 3.0] {
            let (m, v) = reference_posterior(&x, &y, &noise, &hp, q);
            let b = gp.predict(&[q, 0.0]);
            assert!((b.mean[0] - m).abs() < 1e-6, "mean at {q}");
            assert!((b.var[0] - v).abs() < 1e-6, "var at {q}");
        }
    }

    #[test]
    fn contradictory_noiseless_duplicates_fail() {
        let ts = one_output_set(&[
            ([0.0, 0.0], 0.0, 0.0),
            ([0.0, 0.0], 1.0, 0.0),
            ([1.0, 1.0], 0.5, 0.0),
        ]);
        let err = GpModel::with_hyperparams(&ts, &Scaling::identity(1), &[Hyperparams::default()])
            .unwrap_err();
        assert!(matches!(err, CalibError::IllConditioned { .. }));
        let err =
            GpModel::fit(&ts, &Scaling::identity(1), None, &FitConfig::default(), 1).unwrap_err();
        assert!(matches!(err, CalibError::IllConditioned { .. }));
    }

    #[test]
    fn consistent_noiseless_duplicates_use_jitter() {
        let ts = one_output_set(&[
            ([0.0, 0.0], 0.4, 0.0),
            ([0.0, 0.0], 0.4, 0.0),
            ([1.0, 1.0], 0.5, 0.0),
        ]);
        let gp = GpModel::with_hyperparams(&ts, &Scaling::identity(1), &[Hyperparams::default()])
            .unwrap();
        assert!(gp.jitter()[0] > 0.0);
        assert!((gp.predict(&[0.0, 0.0]).mean[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn constant_outputs_shrink_signal_scale() {
        let pts: Vec<_> = (0..6)
            .map(|i| ([0.7 + 0.02 * i as f64, -70.0 + 6.0 * i as f64], 3.25, 0.0))
            .collect();
        let ts = one_output_set(&pts);
        let scaling = Scaling::from_data(ts.inputs(), ts.means()).unwrap();
        let gp = GpModel::fit(&ts, &scaling, None, &FitConfig::default(), 3).unwrap();
        assert!(gp.hyperparams()[0].phi_f < 1e-2, "{:?}", gp.hyperparams());
        for q in [[0.71, -66.0], [0.75, -50.0], [0.9, -30.0]] {
            assert!((gp.predict(&q).mean[0] - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn recovers_generating_hyperparameters() {
        let truth = Hyperparams {
            phi_f: 1.5,
            length_scales: [0.6, 1.4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 150;
        let x: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let noise = vec![1e-3; n];
        let chol = gram(&x, &noise, &truth).cholesky().unwrap();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = chol.l() * z;
        let mut ts = TrainingSet::new();
        for i in 0..n {
            ts.push(x[i], vec![y[i]], vec![noise[i]]).unwrap();
        }
        let cfg = FitConfig {
            budget: 400,
            ..FitConfig::default()
        };
        let gp = GpModel::fit(&ts, &Scaling::identity(1), None, &cfg, 7).unwrap();
        let est = gp.hyperparams()[0];
        for (a, b) in est.to_log().iter().zip(truth.to_log()) {
            assert!((a - b).abs() < 0.5, "estimated {est:?}, truth {truth:?}");
        }
        let ys: Vec<f64> = y.iter().copied().collect();
        let l_est = log_marginal_likelihood(&x, &ys, &noise, &est).unwrap();
        let l_true = log_marginal_likelihood(&x, &ys, &noise, &truth).unwrap();
        assert!(l_est >= l_true - 1e-3, "{l_est} < {l_true}");
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let pts: Vec<_> = (0..8)
            .map(|i| {
                let t = i as f64;
                ([0.7 + 0.015 * t, -75.0 + 5.0 * t], (t * 0.7).sin(), 0.01)
            })
            .collect();
        let ts = one_output_set(&pts);
        let scaling = Scaling::from_data(ts.inputs(), ts.means()).unwrap();
        let a = GpModel::fit(&ts, &scaling, None, &FitConfig::default(), 9).unwrap();
        let b = GpModel::fit(&ts, &scaling, None, &FitConfig::default(), 9).unwrap();
        assert_eq!(a.hyperparams(), b.hyperparams());
        assert_eq!(a.predict(&[0.75, -52.0]), b.predict(&[0.75, -52.0]));
    }

    #[test]
    fn few_points_use_default_hyperparameters() {
        let ts = one_output_set(&[([0.8, -45.0], 1.0, 0.1)]);
        let gp = GpModel::fit(&ts, &Scaling::identity(1), None, &FitConfig::default(), 1).unwrap();
        assert_eq!(gp.hyperparams(), vec![Hyperparams::default()]);
    }

    #[test]
    fn rejects_bad_training_data() {
        let mut ts = TrainingSet::new();
        assert!(ts.push([0.0, 0.0], vec![1.0], vec![-1.0]).is_err());
        assert!(ts.push([0.0, f64::NAN], vec![1.0], vec![0.0]).is_err());
        ts.push([0.0, 0.0], vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert!(ts.push([1.0, 0.0], vec![1.0], vec![0.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{ProptestConfig, Strategy};
        use proptest::{prop_assert, proptest};

        fn data() -> impl Strategy<Value = Vec<([f64; 2], f64, f64)>> {
            proptest::collection::vec(
                (
                    (0.70f64..0.82, -75.0f64..-35.0),
                    -2.0f64..2.0,
                    0.001f64..0.3,
                )
                    .prop_map(|((a, b), y, v)| ([a, b], y, v)),
                2..12,
            )
        }

        fn hp() -> impl Strategy<Value = Hyperparams> {
            (0.2f64..3.0, 0.1f64..3.0, 0.1f64..3.0).prop_map(|(p, a, b)| Hyperparams {
                phi_f: p,
                length_scales: [a, b],
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn posterior_variance_bounded_by_prior(pts in data(), hp in hp(),
                                                   q in (0.68f64..0.84, -80.0f64..-30.0)) {
                let ts = one_output_set(&pts);
                let scaling = Scaling::from_data(ts.inputs(), ts.means()).unwrap();
                let gp = GpModel::with_hyperparams(&ts, &scaling, &[hp]).unwrap();
                let b = gp.predict(&[q.0, q.1]);
                prop_assert!(b.var[0] >= 0.0);
                prop_assert!(b.var[0] <= hp.phi_f.powi(2) * scaling.output_std[0].powi(2) + 1e-9);
            }

            #[test]
            fn extra_point_never_increases_variance(pts in data(), hp in hp(),
                                                    extra in ((0.70f64..0.82, -75.0f64..-35.0), -2.0f64..2.0, 0.001f64..0.3),
                                                    seed in 0u64..1000) {
                let ts = one_output_set(&pts);
                let mut more = ts.clone();
                more.push([extra.0.0, extra.0.1], vec![extra.1], vec![extra.2]).unwrap();
                let scaling = Scaling::identity(1);
                let scaled_hp = Hyperparams { phi_f: hp.phi_f, length_scales: [hp.length_scales[0] * 0.05, hp.length_scales[1] * 20.0] };
                let a = GpModel::with_hyperparams(&ts, &scaling, &[scaled_hp]).unwrap();
                let b = GpModel::with_hyperparams(&more, &scaling, &[scaled_hp]).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..50 {
                    let q = [rng.random_range(0.68..0.84), rng.random_range(-80.0..-30.0)];
                    prop_assert!(b.predict(&q).var[0] <= a.predict(&q).var[0] + 1e-9);
                }
            }

            #[test]
            fn shifting_soi_leaves_predictions_unchanged(pts in data(), hp in hp(), shift in -20.0f64..20.0,
                                                         q in (0.68f64..0.84, -80.0f64..-30.0)) {
                let ts = one_output_set(&pts);
                let shifted = one_output_set(&pts.iter().map(|(x, y, v)| ([x[0], x[1] + shift], *y, *v)).collect::<Vec<_>>());
                let sa = Scaling::from_data(ts.inputs(), ts.means()).unwrap();
                let sb = Scaling::from_data(shifted.inputs(), shifted.means()).unwrap();
                let a = GpModel::with_hyperparams(&ts, &sa, &[hp]).unwrap();
                let b = GpModel::with_hyperparams(&shifted, &sb, &[hp]).unwrap();
                let pa = a.predict(&[q.0, q.1]);
                let pb = b.predict(&[q.0, q.1 + shift]);
                prop_assert!((pa.mean[0] - pb.mean[0]).abs() <= 1e-9 * (1.0 + pa.mean[0].abs()));
                prop_assert!((pa.var[0] - pb.var[0]).abs() <= 1e-9 * (1.0 + pa.var[0]));
            }

            #[test]
            fn factorized_gram_is_positive_definite(pts in data(), hp in hp()) {
                let ts = one_output_set(&pts);
                let scaling = Scaling::from_data(ts.inputs(), ts.means()).unwrap();
                let gp = GpModel::with_hyperparams(&ts, &scaling, &[hp]).unwrap();
                let n = gp.len();
                let l = &gp.outputs[0].factor.l;
                for i in 0..n {
                    prop_assert!(l[i * n + i] > 0.0);
                }
            }
        }
    }
}

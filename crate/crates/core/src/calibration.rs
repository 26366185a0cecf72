//! The closed calibration loop.
//!
//! Each iteration fits the GP to the history, searches the acquisition with
//! the swarm under the violation-probability constraint, applies the winner,
//! lets the IMEP controller settle, buffers `n_sample` cycles and appends one
//! [`Record`]. The first record is the configured initial point.
//!
//! Two GP models are kept. The *mean* model regresses the buffer means of the
//! PC weights and of the fuel energy, with the buffer sample variances as
//! observation noise. The *cycle* model regresses the log of the per-cycle
//! weight variances. Acquisition uses the latent variance of the mean model;
//! the constraints add the predicted cycle variance because limits apply to
//! individual cycles.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acquisition::{scalar_moments, AcquisitionKind, CrnDraws, ScalarCost};
use crate::config::RunConfig;
use crate::constraints::{violation_probability, ConstraintModel, ConstraintSpec};
use crate::engine::{
    grid_oracle, metrics, oracle_point, settle, FuelSettings, ImepController, OraclePoint,
    OracleResult, Plant, CYCLE_SECONDS,
};
use crate::error::{CalibError, Result};
use crate::geometry::Cylinder;
use crate::gpr::{GpModel, Hyperparams, Scaling, TrainingSet};
use crate::itc::{build_cost_operator, cost, CostOperator, ItcMap, OttoParams};
use crate::pcd::{
    project_weights, train_basis, train_work_basis, PcBasis, PressureTrace, WeightVector,
};
use crate::pso::{self, Evaluation};
use crate::seed::derive_path;

const TAG_BOOTSTRAP: u64 = 1;
const TAG_PLANT: u64 = 2;
const TAG_GP: u64 = 3;
const TAG_PSO: u64 = 4;
const TAG_CRN: u64 = 5;

/// The GP hyperparameters are re-optimized at every fit up to this many points.
const EARLY_REFIT_POINTS: usize = 20;

/// Added to per-cycle weight variances before taking logs [Pa²].
const LOG_VAR_FLOOR: f64 = 1.0;

/// One applied setting and its buffered observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub iteration: usize,
    /// Cumulative engine time at the end of the buffer [s].
    pub engine_time: f64,
    pub br: f64,
    pub soi_di: f64,
    /// Buffer mean of the applied fuel energy [J].
    pub q_fuel: f64,
    /// Buffer sample variance of the fuel energy [J²].
    pub q_var: f64,
    /// Fuel energy the controller requests after the buffer [J].
    pub q_end: f64,
    /// Cycles spent settling before the buffer.
    pub controller_cycles: usize,
    pub converged: bool,
    pub saturated: bool,
    /// Buffer mean IMEP [Pa].
    pub imep: f64,
    pub cov: f64,
    /// Buffer work over buffer fuel energy.
    pub gie: f64,
    /// Buffer means of the per-cycle peaks.
    pub p_max: f64,
    pub dp_max: f64,
    /// Worst single cycle in the buffer.
    pub p_max_peak: f64,
    pub dp_max_peak: f64,
    /// Cost of the mean weights against the Otto reference at `q_fuel` [J²].
    pub j_itc: f64,
    /// Observed constraints satisfied (mean IMEP in band, cov, mean peaks,
    /// controller not saturated).
    pub feasible: bool,
    pub predicted_beta: Option<f64>,
    pub acquisition: Option<f64>,
    pub pso_feasible: Option<bool>,
    /// Buffer mean of observed minus basis-model peaks `[p_max, dp_max]`.
    pub peak_residual: [f64; 2],
    /// Buffer sample variance of the same residuals.
    pub peak_residual_var: [f64; 2],
    pub w_mean: Vec<f64>,
    pub w_var: Vec<f64>,
}

impl Record {
    pub fn location(&self) -> [f64; 2] {
        [self.br, self.soi_di]
    }
}

/// Append-only list of records with contiguous iteration numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    n_pc: usize,
    records: Vec<Record>,
}

const FIXED_COLUMNS: [&str; 27] = [
    "iteration",
    "engine_time",
    "br",
    "soi_di",
    "q_fuel",
    "q_var",
    "q_end",
    "controller_cycles",
    "converged",
    "saturated",
    "imep",
    "cov",
    "gie",
    "p_max",
    "dp_max",
    "p_max_peak",
    "dp_max_peak",
    "j_itc",
    "feasible",
    "predicted_beta",
    "acquisition",
    "pso_feasible",
    "p_resid",
    "dp_resid",
    "p_resid_var",
    "dp_resid_var",
    "n_pc",
];

fn parse_f64(s: &str, column: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| CalibError::Parse(format!("column {column}: bad number {s:?}")))
}

fn parse_bool(s: &str, column: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CalibError::Parse(format!(
            "column {column}: bad flag {s:?}"
        ))),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl History {
    pub fn new(n_pc: usize) -> Self {
        Self {
            n_pc,
            records: Vec::new(),
        }
    }

    pub fn n_pc(&self) -> usize {
        self.n_pc
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        if r.iteration != self.records.len() {
            return Err(CalibError::InvalidArgument(format!(
                "record {} does not continue a history of length {}",
                r.iteration,
                self.records.len()
            )));
        }
        if r.w_mean.len() != self.n_pc || r.w_var.len() != self.n_pc {
            return Err(CalibError::InvalidArgument(format!(
                "record needs {} weights",
                self.n_pc
            )));
        }
        self.records.push(r);
        Ok(())
    }

    /// Lowest-cost feasible record; ties keep the earliest.
    pub fn best_feasible(&self) -> Option<&Record> {
        self.records
            .iter()
            .filter(|r| r.feasible)
            .fold(None, |b: Option<&Record>, r| match b {
                Some(b) if b.j_itc <= r.j_itc => Some(b),
                _ => Some(r),
            })
    }

    /// Highest-GIE feasible record; ties keep the earliest.
    pub fn best_gie_record(&self) -> Option<&Record> {
        self.records
            .iter()
            .filter(|r| r.feasible)
            .fold(None, |b: Option<&Record>, r| match b {
                Some(b) if b.gie >= r.gie => Some(b),
                _ => Some(r),
            })
    }

    /// Running minimum of the feasible observed cost, per record.
    pub fn best_cost_trace(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.records
            .iter()
            .map(|r| {
                if r.feasible {
                    best = Some(best.map_or(r.j_itc, |b| b.min(r.j_itc)));
                }
                best
            })
            .collect()
    }

    /// Running maximum of the feasible observed GIE, per record.
    pub fn best_gie_trace(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.records
            .iter()
            .map(|r| {
                if r.feasible {
                    best = Some(best.map_or(r.gie, |b| b.max(r.gie)));
                }
                best
            })
            .collect()
    }

    pub fn header(n_pc: usize) -> Vec<String> {
        let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        h.extend((1..=n_pc).map(|i| format!("w_mean_{i}")));
        h.extend((1..=n_pc).map(|i| format!("w_var_{i}")));
        h
    }

    /// Comma-separated, LF-terminated, shortest round-trip floats.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(Self::header(self.n_pc))?;
        for r in &self.records {
            w.write_record(Self::row(r, self.n_pc))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Appends one record's row (no header) to an existing file body.
    pub fn write_row<W: Write>(&self, r: &Record, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(Self::row(r, self.n_pc))?;
        w.flush()?;
        Ok(())
    }

    fn row(r: &Record, n_pc: usize) -> Vec<String> {
        let mut row = vec![
            r.iteration.to_string(),
            r.engine_time.to_string(),
            r.br.to_string(),
            r.soi_di.to_string(),
            r.q_fuel.to_string(),
            r.q_var.to_string(),
            r.q_end.to_string(),
            r.controller_cycles.to_string(),
            r.converged.to_string(),
            r.saturated.to_string(),
            r.imep.to_string(),
            r.cov.to_string(),
            r.gie.to_string(),
            r.p_max.to_string(),
            r.dp_max.to_string(),
            r.p_max_peak.to_string(),
            r.dp_max_peak.to_string(),
            r.j_itc.to_string(),
            r.feasible.to_string(),
            opt(r.predicted_beta),
            opt(r.acquisition),
            opt(r.pso_feasible),
            r.peak_residual[0].to_string(),
            r.peak_residual[1].to_string(),
            r.peak_residual_var[0].to_string(),
            r.peak_residual_var[1].to_string(),
            n_pc.to_string(),
        ];
        row.extend(r.w_mean.iter().map(f64::to_string));
        row.extend(r.w_var.iter().map(f64::to_string));
        row
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let header = rdr.headers()?.clone();
        let n_fixed = FIXED_COLUMNS.len();
        if header.len() < n_fixed
            || header
                .iter()
                .take(n_fixed)
                .ne(FIXED_COLUMNS.iter().copied())
        {
            return Err(CalibError::Parse(
                "history header does not match the expected columns".into(),
            ));
        }
        let n_pc = (header.len() - n_fixed) / 2;
        if header.len() != n_fixed + 2 * n_pc
            || header
                .iter()
                .ne(Self::header(n_pc).iter().map(String::as_str))
        {
            return Err(CalibError::Parse(
                "history header has inconsistent weight columns".into(),
            ));
        }
        let mut h = History::new(n_pc);
        for row in rdr.records() {
            let row = row?;
            let f = |i: usize| parse_f64(&row[i], FIXED_COLUMNS[i]);
            let b = |i: usize| parse_bool(&row[i], FIXED_COLUMNS[i]);
            let of = |i: usize| {
                if row[i].is_empty() {
                    Ok(None)
                } else {
                    f(i).map(Some)
                }
            };
            let ob = |i: usize| {
                if row[i].is_empty() {
                    Ok(None)
                } else {
                    b(i).map(Some)
                }
            };
            let u = |i: usize| {
                row[i].parse::<usize>().map_err(|_| {
                    CalibError::Parse(format!(
                        "column {}: bad integer {:?}",
                        FIXED_COLUMNS[i], &row[i]
                    ))
                })
            };
            if u(26)? != n_pc {
                return Err(CalibError::Parse(
                    "n_pc column disagrees with the header".into(),
                ));
            }
            let weights = |from: usize| -> Result<Vec<f64>> {
                (from..from + n_pc)
                    .map(|i| parse_f64(&row[i], "weights"))
                    .collect()
            };
            h.push(Record {
                iteration: u(0)?,
                engine_time: f(1)?,
                br: f(2)?,
                soi_di: f(3)?,
                q_fuel: f(4)?,
                q_var: f(5)?,
                q_end: f(6)?,
                controller_cycles: u(7)?,
                converged: b(8)?,
                saturated: b(9)?,
                imep: f(10)?,
                cov: f(11)?,
                gie: f(12)?,
                p_max: f(13)?,
                dp_max: f(14)?,
                p_max_peak: f(15)?,
                dp_max_peak: f(16)?,
                j_itc: f(17)?,
                feasible: b(18)?,
                predicted_beta: of(19)?,
                acquisition: of(20)?,
                pso_feasible: ob(21)?,
                peak_residual: [f(22)?, f(23)?],
                peak_residual_var: [f(24)?, f(25)?],
                w_mean: weights(n_fixed)?,
                w_var: weights(n_fixed + n_pc)?,
            })
            .map_err(|e| CalibError::Parse(e.to_string()))?;
        }
        Ok(h)
    }
}

/// Per-component sample mean and sample variance (`n − 1`) of weight vectors.
pub fn weight_stats(weights: &[WeightVector]) -> Result<(Vec<f64>, Vec<f64>)> {
    if weights.len() < 2 {
        return Err(CalibError::InvalidArgument(
            "buffer statistics need at least two cycles".into(),
        ));
    }
    let n = weights.len() as f64;
    let dim = weights[0].len();
    if weights.iter().any(|w| w.len() != dim) {
        return Err(CalibError::InvalidArgument(
            "buffer weight vectors differ in length".into(),
        ));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|i| weights.iter().map(|w| w[i]).sum::<f64>() / n)
        .collect();
    let var = (0..dim)
        .map(|i| {
            weights
                .iter()
                .map(|w| (w[i] - mean[i]).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect();
    Ok((mean, var))
}

/// Mean and sample variance of the projected weights of buffered cycles.
pub fn summarize_buffer(cycles: &[PressureTrace], basis: &PcBasis) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = cycles
        .iter()
        .map(|t| project_weights(t, basis))
        .collect::<Result<Vec<_>>>()?;
    weight_stats(&w)
}

/// Gap between the mean observed peaks `[p_max, dp_max]` and the
/// basis-model peaks at the mean weights, with the per-cycle sample
/// variance of the observed peaks.
///
/// The gap is taken at the mean weights because that is where the
/// constraint model evaluates it; per-cycle reconstructions of a sharp
/// pressure rise scatter, and their peaks do not average to the peak of
/// the mean.
pub fn peak_residual_stats(
    model: &ConstraintModel,
    weights: &[WeightVector],
    observed: &[[f64; 2]],
) -> ([f64; 2], [f64; 2]) {
    let n_pc = weights.first().map_or(0, |w| w.len());
    let nw = weights.len() as f64;
    let w_mean: Vec<f64> = (0..n_pc)
        .map(|i| weights.iter().map(|w| w[i]).sum::<f64>() / nw)
        .collect();
    let m = model.peaks(&w_mean);
    let n = observed.len() as f64;
    let obs = [0, 1].map(|j| observed.iter().map(|x| x[j]).sum::<f64>() / n);
    let var = [0, 1].map(|j| {
        observed
            .iter()
            .map(|x| (x[j] - obs[j]).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0)
    });
    ([obs[0] - m[0], obs[1] - m[1]], var)
}

/// Convergence time from feasible observations `(time, gie)` in order.
///
/// Returns the time of the first new best within `tol` of the final best,
/// unless that is the very last observation of the run (`last_time`), in
/// which case the run has not been seen to settle.
pub fn convergence_time(observations: &[(f64, f64)], last_time: f64, tol: f64) -> Option<f64> {
    let mut best = f64::NEG_INFINITY;
    let mut events = Vec::new();
    for &(t, g) in observations {
        if g > best {
            best = g;
            events.push((t, g));
        }
    }
    let (t, _) = *events.iter().find(|(_, g)| *g >= best - tol)?;
    (t < last_time).then_some(t)
}

/// [`convergence_time`] over the feasible records of a history.
pub fn detect_convergence(history: &History, tol: f64) -> Option<f64> {
    let obs: Vec<(f64, f64)> = history
        .records()
        .iter()
        .filter(|r| r.feasible)
        .map(|r| (r.engine_time, r.gie))
        .collect();
    convergence_time(&obs, history.last()?.engine_time, tol)
}

/// Bilinear interpolant of the bootstrap point summaries over the actuator
/// box; the prior mean of the mean-model outputs. Away from visited
/// settings the GP then falls back to what the sweep measured there rather
/// than to a global average.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrior {
    lower: [f64; 2],
    upper: [f64; 2],
    n: usize,
    /// Row-major over (BR, SOI_DI) grid nodes.
    values: Vec<Vec<f64>>,
}

impl GridPrior {
    pub fn at(&self, x: &[f64; 2]) -> Vec<f64> {
        let cell = |d: usize| {
            let t = ((x[d] - self.lower[d]) / (self.upper[d] - self.lower[d])).clamp(0.0, 1.0)
                * (self.n - 1) as f64;
            let i = (t.floor() as usize).min(self.n - 2);
            (i, t - i as f64)
        };
        let ((i, a), (j, b)) = (cell(0), cell(1));
        let v = |i: usize, j: usize| &self.values[i * self.n + j];
        (0..self.values[0].len())
            .map(|c| {
                (1.0 - a) * (1.0 - b) * v(i, j)[c]
                    + a * (1.0 - b) * v(i + 1, j)[c]
                    + (1.0 - a) * b * v(i, j + 1)[c]
                    + a * b * v(i + 1, j + 1)[c]
            })
            .collect()
    }
}

/// Everything derived once at startup: basis, operators and GP scalings.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cylinder: Arc<Cylinder>,
    pub basis: Arc<PcBasis>,
    pub op: CostOperator,
    pub otto: OttoParams,
    pub itc: ItcMap,
    pub constraints: ConstraintModel,
    pub spec: ConstraintSpec,
    pub mean_scaling: Scaling,
    pub cycle_scaling: Scaling,
    pub prior: GridPrior,
    pub p_im: f64,
}

/// Bootstrap sweep: settle at each grid point and keep every buffered cycle.
struct Bootstrap {
    traces: Vec<PressureTrace>,
    /// Per grid point: input, trace index range, fuel energies.
    points: Vec<([f64; 2], std::ops::Range<usize>, Vec<f64>)>,
}

fn run_bootstrap(cfg: &RunConfig, cylinder: &Arc<Cylinder>) -> Result<Bootstrap> {
    let seed = derive_path(cfg.run.seed, &[TAG_BOOTSTRAP]);
    let mut plant = Plant::new(
        cfg.plant.clone(),
        cfg.air(),
        cfg.thermo.kappa,
        cylinder.clone(),
        seed,
    )?;
    let spec = cfg.constraint_spec();
    let bounds = cfg.actuators;
    let mut ctl = ImepController::new(cfg.controller, spec.imep_req);
    let n = cfg.basis.bootstrap_grid;
    let at = |r: [f64; 2], i: usize| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64;
    let v_d = cylinder.displacement();
    let mut q = cfg.run.initial_q_fuel;
    let mut traces = Vec::new();
    let mut points = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (br, soi_di) = (at(bounds.br, i), at(bounds.soi_di, j));
            q = settle(&mut plant, &mut ctl, br, soi_di, q, &bounds).q_fuel;
            let start = traces.len();
            let mut qs = Vec::with_capacity(cfg.basis.bootstrap_cycles);
            for _ in 0..cfg.basis.bootstrap_cycles {
                let t = plant.cycle(&FuelSettings {
                    q_fuel: q,
                    br,
                    soi_di,
                });
                let m = plant.metrics(&t, q);
                qs.push(q);
                traces.push(t);
                q = ctl.update(m.imep, q, v_d, bounds.q_fuel);
            }
            points.push(([br, soi_di], start..traces.len(), qs));
        }
    }
    Ok(Bootstrap { traces, points })
}

fn log_var(v: f64) -> f64 {
    (v + LOG_VAR_FLOOR).ln()
}

impl Setup {
    /// Runs the bootstrap sweep and freezes basis, operators and scalings.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let cylinder = Arc::new(Cylinder::new(cfg.geometry(), cfg.grid()?)?);
        let boot = run_bootstrap(cfg, &cylinder)?;
        let train = if cfg.basis.pin_work {
            train_work_basis
        } else {
            train_basis
        };
        let basis = Arc::new(train(
            &boot.traces,
            cfg.basis.n_pc,
            cfg.thermo.kappa,
            cylinder.clone(),
        )?);
        let op = build_cost_operator(&basis);
        let otto = OttoParams::new(cfg.thermo.kappa, cfg.geometry())?;
        let itc = ItcMap::new(&otto, &basis);
        let spec = cfg.constraint_spec();
        let p_im = cfg.air().p_im;
        let constraints = ConstraintModel::new(spec, &basis, &op, p_im)?;

        let mut inputs = Vec::new();
        let mut mean_out = Vec::new();
        let mut cycle_out = Vec::new();
        for (x, range, qs) in &boot.points {
            let traces = &boot.traces[range.clone()];
            let w = traces
                .iter()
                .map(|t| project_weights(t, &basis))
                .collect::<Result<Vec<_>>>()?;
            let (m, v) = weight_stats(&w)?;
            let peaks: Vec<[f64; 2]> = traces
                .iter()
                .map(|t| {
                    let c = metrics(t, 1.0, &cylinder);
                    [c.p_max, c.dp_max]
                })
                .collect();
            let (r, _) = peak_residual_stats(&constraints, &w, &peaks);
            let q_mean = qs.iter().sum::<f64>() / qs.len() as f64;
            inputs.push(*x);
            mean_out.push(
                m.into_iter()
                    .chain([q_mean, r[0], r[1]])
                    .collect::<Vec<f64>>(),
            );
            cycle_out.push(v.into_iter().map(log_var).collect::<Vec<f64>>());
        }
        // The mean model regresses deviations from the prior, so only the
        // spread of each output is taken from the sweep.
        let mut mean_scaling = Scaling::from_data(&inputs, &mean_out)?;
        mean_scaling.output_mean.fill(0.0);
        let a = &cfg.actuators;
        Ok(Self {
            mean_scaling,
            prior: GridPrior {
                lower: [a.br[0], a.soi_di[0]],
                upper: [a.br[1], a.soi_di[1]],
                n: cfg.basis.bootstrap_grid,
                values: mean_out,
            },
            cycle_scaling: Scaling::from_data(&inputs, &cycle_out)?,
            cylinder,
            basis,
            op,
            otto,
            itc,
            constraints,
            spec,
            p_im,
        })
    }

    pub fn n_pc(&self) -> usize {
        self.basis.n_pc()
    }
}

/// GP-based belief at one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub w_mean: Vec<f64>,
    /// Latent variance of the mean weights.
    pub w_var: Vec<f64>,
    /// Predicted per-cycle weight variance.
    pub cycle_var: Vec<f64>,
    pub q_fuel: f64,
    pub q_var: f64,
    /// Predicted gap between observed and basis-model peaks, and its latent variance.
    pub peak_residual: [f64; 2],
    pub peak_residual_var: [f64; 2],
}

/// Fitted mean and cycle-variance models.
#[derive(Debug, Clone)]
pub struct Models {
    pub mean: GpModel,
    pub cycle: GpModel,
    pub prior: GridPrior,
}

impl Models {
    pub fn predict(&self, x: &[f64; 2]) -> Prediction {
        let mut b = self.mean.predict(x);
        for (m, p) in b.mean.iter_mut().zip(self.prior.at(x)) {
            *m += p;
        }
        let n = b.mean.len() - 3;
        Prediction {
            w_mean: b.mean[..n].to_vec(),
            w_var: b.var[..n].to_vec(),
            cycle_var: self
                .cycle
                .predict_mean(x)
                .into_iter()
                .map(|l| (l.exp() - LOG_VAR_FLOOR).max(0.0))
                .collect(),
            q_fuel: b.mean[n],
            q_var: b.var[n],
            peak_residual: [b.mean[n + 1], b.mean[n + 2]],
            peak_residual_var: [b.var[n + 1], b.var[n + 2]],
        }
    }
}

impl Setup {
    /// Moments of the scalar loss `gᵀ(w − w_itc)` under a prediction.
    pub fn cost_moments(&self, p: &Prediction) -> ScalarCost {
        let w_itc = self.itc.weights(p.q_fuel, self.p_im);
        scalar_moments(
            &self.op,
            &p.w_mean,
            &p.w_var,
            w_itc.as_slice(),
            self.itc.slope(),
            p.q_var,
        )
    }

    /// Total violation probability of single cycles under a prediction.
    pub fn violation(&self, p: &Prediction) -> f64 {
        let var: Vec<f64> = p
            .w_var
            .iter()
            .zip(&p.cycle_var)
            .map(|(a, b)| a + b)
            .collect();
        let mut stats = self.constraints.stats(&p.w_mean, &var);
        for j in 0..2 {
            stats.mean[2 + j] += p.peak_residual[j];
            stats.var[2 + j] += p.peak_residual_var[j];
        }
        violation_probability(&stats).total
    }
}

/// Resumable loop state beyond the history itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub records: usize,
    pub mean_hyperparams: Option<Vec<Hyperparams>>,
    pub cycle_hyperparams: Option<Vec<Hyperparams>>,
}

pub struct Calibrator {
    cfg: RunConfig,
    setup: Setup,
    plant: Plant,
    controller: ImepController,
    history: History,
    mean_hp: Option<Vec<Hyperparams>>,
    cycle_hp: Option<Vec<Hyperparams>>,
}

impl Calibrator {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let setup = Setup::build(&cfg)?;
        Self::with_setup(cfg, setup)
    }

    pub fn with_setup(cfg: RunConfig, setup: Setup) -> Result<Self> {
        let plant = Plant::new(
            cfg.plant.clone(),
            cfg.air(),
            cfg.thermo.kappa,
            setup.cylinder.clone(),
            cfg.run.seed,
        )?;
        let controller = ImepController::new(cfg.controller, setup.spec.imep_req);
        let history = History::new(setup.n_pc());
        Ok(Self {
            cfg,
            setup,
            plant,
            controller,
            history,
            mean_hp: None,
            cycle_hp: None,
        })
    }

    /// Continues from a saved history and checkpoint.
    pub fn resume(cfg: RunConfig, history: History, checkpoint: Checkpoint) -> Result<Self> {
        let mut c = Self::new(cfg)?;
        if history.n_pc() != c.setup.n_pc() || checkpoint.records != history.len() {
            return Err(CalibError::InvalidArgument(
                "checkpoint does not match the history".into(),
            ));
        }
        c.history = history;
        c.mean_hp = checkpoint.mean_hyperparams;
        c.cycle_hp = checkpoint.cycle_hyperparams;
        Ok(c)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            records: self.history.len(),
            mean_hyperparams: self.mean_hp.clone(),
            cycle_hyperparams: self.cycle_hp.clone(),
        }
    }

    pub fn engine_time(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.engine_time)
    }

    /// Iteration or engine-time budget spent.
    pub fn finished(&self) -> bool {
        self.history.len() > self.cfg.run.max_iterations
            || self.engine_time() >= self.cfg.run.engine_budget_s
    }

    /// Runs until the budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    /// Evaluates the initial point or performs one optimization iteration.
    /// Returns `None` once the budget is spent.
    pub fn step(&mut self) -> Result<Option<&Record>> {
        if self.finished() {
            return Ok(None);
        }
        let record = if self.history.is_empty() {
            let r = &self.cfg.run;
            self.apply(r.initial_br, r.initial_soi_di, None, None, None)?
        } else {
            self.bo_iteration()?
        };
        self.history.push(record)?;
        Ok(self.history.last())
    }

    /// GP training set built from the history.
    fn training_sets(&self) -> Result<(TrainingSet, TrainingSet)> {
        let mut mean = TrainingSet::new();
        let mut cycle = TrainingSet::new();
        let log_noise = 2.0 / (self.cfg.run.n_sample as f64 - 1.0);
        for r in self.history.records() {
            let mut m = r.w_mean.clone();
            m.extend([r.q_fuel, r.peak_residual[0], r.peak_residual[1]]);
            for (m, p) in m.iter_mut().zip(self.setup.prior.at(&r.location())) {
                *m -= p;
            }
            let mut v = r.w_var.clone();
            v.extend([r.q_var, r.peak_residual_var[0], r.peak_residual_var[1]]);
            mean.push(r.location(), m, v)?;
            let lv = r.w_var.iter().map(|&v| log_var(v)).collect();
            cycle.push(r.location(), lv, vec![log_noise; r.w_var.len()])?;
        }
        Ok((mean, cycle))
    }

    /// Fits both GP models; hyperparameters warm-start the next fit.
    pub fn fit_models(&mut self) -> Result<Models> {
        let k = self.history.len() as u64;
        let (ts_mean, ts_cycle) = self.training_sets()?;
        let seed = derive_path(self.cfg.run.seed, &[TAG_GP, k]);
        let n = ts_mean.len();
        let reuse = match (&self.mean_hp, &self.cycle_hp) {
            (Some(m), Some(c)) if n > EARLY_REFIT_POINTS && n % self.cfg.gp.refit_every != 0 => {
                Some((m, c))
            }
            _ => None,
        };
        if let Some((m, c)) = reuse {
            return Ok(Models {
                mean: GpModel::with_hyperparams(&ts_mean, &self.setup.mean_scaling, m)?,
                cycle: GpModel::with_hyperparams(&ts_cycle, &self.setup.cycle_scaling, c)?,
                prior: self.setup.prior.clone(),
            });
        }
        let mean = GpModel::fit(
            &ts_mean,
            &self.setup.mean_scaling,
            self.mean_hp.as_deref(),
            &self.cfg.gp,
            seed,
        )?;
        let cycle = GpModel::fit(
            &ts_cycle,
            &self.setup.cycle_scaling,
            self.cycle_hp.as_deref(),
            &self.cfg.gp,
            derive_path(seed, &[1]),
        )?;
        if n >= self.cfg.gp.min_points {
            self.mean_hp = Some(mean.hyperparams());
            self.cycle_hp = Some(cycle.hyperparams());
        }
        Ok(Models {
            mean,
            cycle,
            prior: self.setup.prior.clone(),
        })
    }

    /// Fit, search and apply one candidate.
    pub fn bo_iteration(&mut self) -> Result<Record> {
        let k = self.history.len() as u64;
        let models = self.fit_models()?;
        let seed = self.cfg.run.seed;
        let kind = self.cfg.run.kind;
        let draws = CrnDraws::new(self.cfg.run.n_mc, derive_path(seed, &[TAG_CRN, k]))?;

        let (j_star, inc_loc) = match self.history.best_feasible() {
            Some(r) => (r.j_itc, r.location()),
            None => {
                // Nothing feasible yet: compare against the worst observation
                // and use the lowest-cost record as the noisy incumbent.
                let worst = self
                    .history
                    .records()
                    .iter()
                    .map(|r| r.j_itc)
                    .fold(f64::NEG_INFINITY, f64::max);
                let low = self
                    .history
                    .records()
                    .iter()
                    .fold(&self.history.records()[0], |b, r| {
                        if r.j_itc < b.j_itc {
                            r
                        } else {
                            b
                        }
                    });
                (worst, low.location())
            }
        };
        let setup = &self.setup;
        let incumbent = setup.cost_moments(&models.predict(&inc_loc));
        let evaluator = |x: &[f64; 2]| {
            let p = models.predict(x);
            Evaluation {
                value: draws.alpha(kind, setup.cost_moments(&p), incumbent, j_star),
                beta: setup.violation(&p),
            }
        };
        let out = pso::run(
            &self.cfg.swarm(),
            self.cfg.actuators.search_box(),
            &evaluator,
            derive_path(seed, &[TAG_PSO, k]),
        )?;
        let [br, soi_di] = out.best.position;
        self.apply(
            br,
            soi_di,
            Some(out.best.eval.beta),
            Some(out.best.eval.value),
            Some(out.feasible),
        )
    }

    /// Settles the controller at a setting and buffers `n_sample` cycles.
    fn apply(
        &mut self,
        br: f64,
        soi_di: f64,
        predicted_beta: Option<f64>,
        acquisition: Option<f64>,
        pso_feasible: Option<bool>,
    ) -> Result<Record> {
        let k = self.history.len();
        self.plant
            .reseed(derive_path(self.cfg.run.seed, &[TAG_PLANT, k as u64]));
        let bounds = self.cfg.actuators;
        let q_start = self
            .history
            .last()
            .map_or(self.cfg.run.initial_q_fuel, |r| r.q_end);
        let settled = settle(
            &mut self.plant,
            &mut self.controller,
            br,
            soi_di,
            q_start,
            &bounds,
        );

        let n = self.cfg.run.n_sample;
        let cyl = self.setup.cylinder.clone();
        let v_d = cyl.displacement();
        let mut q = settled.q_fuel;
        let (mut weights, mut imeps, mut qs) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let mut peaks = Vec::with_capacity(n);
        let (mut work, mut p_sum, mut dp_sum) = (0.0, 0.0, 0.0);
        let (mut p_peak, mut dp_peak) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let t = self.plant.cycle(&FuelSettings {
                q_fuel: q,
                br,
                soi_di,
            });
            let m = metrics(&t, q, &cyl);
            weights.push(project_weights(&t, &self.setup.basis)?);
            imeps.push(m.imep);
            qs.push(q);
            peaks.push([m.p_max, m.dp_max]);
            work += m.imep * v_d;
            p_sum += m.p_max;
            dp_sum += m.dp_max;
            p_peak = p_peak.max(m.p_max);
            dp_peak = dp_peak.max(m.dp_max);
            q = self.controller.update(m.imep, q, v_d, bounds.q_fuel);
        }
        let (peak_residual, peak_residual_var) =
            peak_residual_stats(&self.setup.constraints, &weights, &peaks);
        let (w_mean, w_var) = weight_stats(&weights)?;
        let nf = n as f64;
        let q_mean = qs.iter().sum::<f64>() / nf;
        let q_var = qs.iter().map(|x| (x - q_mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let imep = imeps.iter().sum::<f64>() / nf;
        let cov = crate::engine::cov_imep(&imeps).unwrap_or(f64::INFINITY);
        let w_itc = self.setup.itc.weights(q_mean, self.setup.p_im);
        let j_itc = cost(&WeightVector(w_mean.clone()), &w_itc, &self.setup.op);

        let spec = &self.setup.spec;
        let (lo, hi) = spec.work_band(v_d);
        let (p_max, dp_max) = (p_sum / nf, dp_sum / nf);
        let saturated = settled.saturated || self.controller.saturated();
        let feasible = !saturated
            && imep * v_d >= lo
            && imep * v_d <= hi
            && cov <= spec.cov_ub
            && p_max <= spec.p_ub
            && dp_max <= spec.dp_ub;
        let cycles: usize = self
            .history
            .records()
            .iter()
            .map(|r| r.controller_cycles + n)
            .sum::<usize>()
            + settled.cycles
            + n;
        Ok(Record {
            iteration: k,
            engine_time: cycles as f64 * CYCLE_SECONDS,
            br,
            soi_di,
            q_fuel: q_mean,
            q_var,
            q_end: q,
            controller_cycles: settled.cycles,
            converged: settled.converged,
            saturated,
            imep,
            cov,
            gie: work / qs.iter().sum::<f64>(),
            p_max,
            dp_max,
            p_max_peak: p_peak,
            dp_max_peak: dp_peak,
            j_itc,
            feasible,
            predicted_beta,
            acquisition,
            pso_feasible,
            peak_residual,
            peak_residual_var,
            w_mean,
            w_var,
        })
    }
}

/// Recommended point of a run and its plant-truth performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub iteration: usize,
    pub br: f64,
    pub soi_di: f64,
    pub q_fuel: f64,
    pub j_itc: f64,
    pub gie_observed: f64,
    pub gie_true: f64,
    pub j_itc_true: f64,
}

/// Oracle optimum as referenced by a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRef {
    pub br: f64,
    pub soi_di: f64,
    pub gie: f64,
    pub j_itc: f64,
}

/// Per-run summary written next to the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: AcquisitionKind,
    pub seed: u64,
    pub iterations: usize,
    pub engine_time_s: f64,
    pub best: Option<BestPoint>,
    pub oracle: Option<OracleRef>,
    pub delta_br: Option<f64>,
    pub delta_soi_di: Option<f64>,
    pub delta_j_itc: Option<f64>,
    /// Oracle GIE minus the true GIE at the recommended point.
    pub delta_gie: Option<f64>,
    pub convergence_time_s: Option<f64>,
    pub applied: usize,
    pub observed_infeasible: usize,
    pub saturated: usize,
    /// Applied settings whose noise-free peak pressure or rise rate exceeds its limit.
    pub truth_pressure_violations: usize,
    /// Applied settings whose observed cov exceeds its limit.
    pub cov_violations: usize,
}

/// Noise-free grid search over the actuator box at `cfg.oracle.resolution`.
pub fn grid_oracle_for(cfg: &RunConfig) -> Result<OracleResult> {
    cfg.validate()?;
    let cylinder = Arc::new(Cylinder::new(cfg.geometry(), cfg.grid()?)?);
    grid_oracle(
        &cfg.plant,
        &cfg.air(),
        cfg.thermo.kappa,
        &cylinder,
        &cfg.actuators,
        &cfg.constraint_spec(),
        &cfg.controller,
        cfg.oracle.resolution,
    )
}

/// Noise-free squared loss at an oracle point.
fn true_cost(p: &OraclePoint, setup: &Setup) -> f64 {
    let loss = p.imep * setup.cylinder.displacement() - setup.otto.eta_itc() * p.q_fuel;
    loss * loss
}

/// Summarizes a history against the plant truth and, if given, the oracle.
pub fn summarize_run(
    cfg: &RunConfig,
    setup: &Setup,
    history: &History,
    oracle: Option<&OraclePoint>,
) -> RunSummary {
    let truth = |br: f64, soi: f64| {
        oracle_point(
            &cfg.plant,
            &cfg.air(),
            cfg.thermo.kappa,
            &setup.cylinder,
            &cfg.actuators,
            &setup.spec,
            &cfg.controller,
            br,
            soi,
        )
    };
    let best = history.best_gie_record().map(|r| {
        let t = truth(r.br, r.soi_di);
        BestPoint {
            iteration: r.iteration,
            br: r.br,
            soi_di: r.soi_di,
            q_fuel: r.q_fuel,
            j_itc: r.j_itc,
            gie_observed: r.gie,
            gie_true: t.gie,
            j_itc_true: true_cost(&t, setup),
        }
    });
    let oracle_ref = oracle.map(|o| OracleRef {
        br: o.br,
        soi_di: o.soi_di,
        gie: o.gie,
        j_itc: true_cost(o, setup),
    });
    let both = best.as_ref().zip(oracle_ref.as_ref());
    let spec = &setup.spec;
    let truth_pressure_violations = history
        .records()
        .iter()
        .filter(|r| {
            let t = truth(r.br, r.soi_di);
            t.p_max > spec.p_ub || t.dp_max > spec.dp_ub
        })
        .count();
    RunSummary {
        kind: cfg.run.kind,
        seed: cfg.run.seed,
        iterations: history.len().saturating_sub(1),
        engine_time_s: history.last().map_or(0.0, |r| r.engine_time),
        delta_br: both.map(|(b, o)| b.br - o.br),
        delta_soi_di: both.map(|(b, o)| b.soi_di - o.soi_di),
        delta_j_itc: both.map(|(b, o)| b.j_itc_true - o.j_itc),
        delta_gie: both.map(|(b, o)| o.gie - b.gie_true),
        best,
        oracle: oracle_ref,
        convergence_time_s: detect_convergence(history, cfg.run.convergence_tol),
        applied: history.len(),
        observed_infeasible: history.records().iter().filter(|r| !r.feasible).count(),
        saturated: history.records().iter().filter(|r| r.saturated).count(),
        truth_pressure_violations,
        cov_violations: history
            .records()
            .iter()
            .filter(|r| r.cov > spec.cov_ub)
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(k: usize, t: f64, gie: f64, j: f64, feasible: bool) -> Record {
        Record {
            iteration: k,
            engine_time: t,
            br: 0.76 + 0.001 * k as f64,
            soi_di: -55.0,
            q_fuel: 1800.0,
            q_var: 4.0,
            q_end: 1801.5,
            controller_cycles: 4,
            converged: true,
            saturated: false,
            imep: 4e5,
            cov: 0.01,
            gie,
            p_max: 7e6,
            dp_max: 1.1e6,
            p_max_peak: 7.2e6,
            dp_max_peak: 1.3e6,
            j_itc: j,
            feasible,
            predicted_beta: (k > 0).then_some(0.01),
            acquisition: (k > 0).then_some(123.456),
            pso_feasible: (k > 0).then_some(true),
            peak_residual: [1.5e5, 3.2e4],
            peak_residual_var: [2.5e8, 1e8],
            w_mean: vec![1.5e6, -2.0e5, 1.0 / 3.0],
            w_var: vec![1e8, 2.5e7, 0.1],
        }
    }

    #[test]
    fn buffer_statistics() {
        let same = vec![WeightVector(vec![1.0, 2.0]); 4];
        let (m, v) = weight_stats(&same).unwrap();
        assert_eq!((m, v), (vec![1.0, 2.0], vec![0.0, 0.0]));
        // base ± δ on the first weight, alternating, n even.
        let (base, d) = (3.0, 0.5);
        let alt: Vec<_> = (0..6)
            .map(|i| WeightVector(vec![if i % 2 == 0 { base + d } else { base - d }, 7.0]))
            .collect();
        let (m, v) = weight_stats(&alt).unwrap();
        assert_relative_eq!(m[0], base, max_relative = 1e-15);
        // Sample variance: n·δ²/(n − 1).
        assert_relative_eq!(v[0], 6.0 * d * d / 5.0, max_relative = 1e-12);
        assert_eq!(v[1], 0.0);
        assert!(weight_stats(&alt[..1]).is_err());
    }

    #[test]
    fn convergence_examples() {
        // Monotone big improvements up to the last observation.
        let mono: Vec<(f64, f64)> = (1..=10)
            .map(|i| (i as f64 * 3.0, 0.3 + 0.01 * i as f64))
            .collect();
        assert_eq!(convergence_time(&mono, 30.0, 0.001), None);
        // Single improvement at 10 s, then flat.
        let flat = [
            (3.0, 0.40),
            (10.0, 0.45),
            (13.0, 0.45),
            (16.0, 0.449),
            (30.0, 0.45),
        ];
        assert_eq!(convergence_time(&flat, 30.0, 0.001), Some(10.0));
        // Small late improvements do not move the convergence time.
        let late = [
            (3.0, 0.40),
            (10.0, 0.45),
            (20.0, 0.4505),
            (25.0, 0.4509),
            (30.0, 0.44),
        ];
        assert_eq!(convergence_time(&late, 30.0, 0.001), Some(10.0));
        assert_eq!(convergence_time(&[], 30.0, 0.001), None);
    }

    #[test]
    fn history_traces_and_best() {
        let mut h = History::new(3);
        h.push(record(0, 3.0, 0.45, 9e4, true)).unwrap();
        h.push(record(1, 6.0, 0.47, 8e4, false)).unwrap();
        h.push(record(2, 9.0, 0.46, 8.5e4, true)).unwrap();
        h.push(record(3, 12.0, 0.44, 9.5e4, true)).unwrap();
        assert!(h.push(record(5, 15.0, 0.4, 1e5, true)).is_err());
        assert_eq!(h.best_feasible().unwrap().iteration, 2);
        assert_eq!(h.best_gie_record().unwrap().iteration, 2);
        assert_eq!(
            h.best_cost_trace(),
            vec![Some(9e4), Some(9e4), Some(8.5e4), Some(8.5e4)]
        );
        assert_eq!(
            h.best_gie_trace(),
            vec![Some(0.45), Some(0.45), Some(0.46), Some(0.46)]
        );
        assert_eq!(detect_convergence(&h, 0.001), Some(9.0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut h = History::new(3);
        h.push(record(0, 3.1, 0.451_234_567_890_123, 9.000_000_1e4, true))
            .unwrap();
        h.push(record(1, 6.2, 0.47, 8e4, false)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 3);
        let back = History::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, h);
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(again, buf);
        let empty = History::new(3);
        let mut e = Vec::new();
        empty.write_csv(&mut e).unwrap();
        assert_eq!(History::read_csv(e.as_slice()).unwrap(), empty);
    }
}

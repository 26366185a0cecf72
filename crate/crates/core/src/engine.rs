//! Synthetic stochastic dual-fuel engine, next-cycle IMEP controller and a
//! brute-force ground-truth oracle.
//!
//! The plant is a single-zone, constant-κ first-law model with one Wiebe heat
//! release. Phasing, burn duration and the fraction of fuel energy released
//! are smooth surfaces of the normalized blend ratio `u` and injection timing
//! `v` (both in `[-1, 1]` over the default actuator box). Each cycle draws one
//! Gaussian perturbation of CA50 and one of the released energy.
//!
//! The model is not a reproduction of any real engine. Its default tuning
//! puts the efficiency optimum inside the box, makes early injection with low
//! blend ratio approach the pressure-rise limit and makes late injection with
//! high blend ratio lose so much efficiency that the IMEP target becomes
//! unreachable.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::error::{CalibError, Result};
use crate::geometry::{central_difference, Cylinder};
use crate::pcd::{check_kappa, PressureTrace};
use crate::pso::SearchBox;

/// Engine seconds per cycle: four-stroke at 1200 rpm.
pub const CYCLE_SECONDS: f64 = 0.1;

/// Decision vector applied to the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelSettings {
    /// Total fuel energy per cycle [J].
    pub q_fuel: f64,
    pub br: f64,
    /// Direct-injection timing [CAD after TDC].
    pub soi_di: f64,
}

/// Actuator ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorBox {
    pub q_fuel: [f64; 2],
    pub br: [f64; 2],
    pub soi_di: [f64; 2],
}

impl Default for ActuatorBox {
    fn default() -> Self {
        Self {
            q_fuel: [1639.6, 2405.8],
            br: [0.7046, 0.8188],
            soi_di: [-75.0, -35.0],
        }
    }
}

impl ActuatorBox {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("q_fuel", self.q_fuel),
            ("br", self.br),
            ("soi_di", self.soi_di),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return Err(CalibError::InvalidArgument(format!(
                    "actuator range {name} must be increasing, got {r:?}"
                )));
            }
        }
        if self.q_fuel[0] <= 0.0 {
            return Err(CalibError::InvalidArgument(
                "fuel energy range must be positive".into(),
            ));
        }
        if self.br[0] < 0.0 || self.br[1] > 1.0 {
            return Err(CalibError::InvalidArgument(
                "blend ratio range must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// The (BR, SOI_DI) box searched by the optimizer.
    pub fn search_box(&self) -> SearchBox {
        SearchBox {
            lower: [self.br[0], self.soi_di[0]],
            upper: [self.br[1], self.soi_di[1]],
        }
    }

    pub fn contains(&self, s: &FuelSettings) -> bool {
        let inside = |x: f64, r: [f64; 2]| x >= r[0] && x <= r[1];
        inside(s.q_fuel, self.q_fuel) && inside(s.br, self.br) && inside(s.soi_di, self.soi_di)
    }
}

/// Air-path state, constant over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AirPath {
    /// Intake manifold pressure [Pa].
    pub p_im: f64,
    /// Intake manifold temperature [K]; carried for bookkeeping only.
    pub t_im: f64,
    pub egr: f64,
}

impl Default for AirPath {
    fn default() -> Self {
        Self {
            p_im: 1e5,
            t_im: 313.15,
            egr: 0.0,
        }
    }
}

/// `c + u·x + v·y + uu·x² + vv·y² + uv·x·y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadratic {
    pub c: f64,
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub uu: f64,
    #[serde(default)]
    pub vv: f64,
    #[serde(default)]
    pub uv: f64,
}

impl Quadratic {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.c + self.u * x + self.v * y + self.uu * x * x + self.vv * y * y + self.uv * x * y
    }

    fn is_finite(&self) -> bool {
        [self.c, self.u, self.v, self.uu, self.vv, self.uv]
            .iter()
            .all(|c| c.is_finite())
    }
}

/// `gain · max(0, offset + u·x + v·y)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hinge {
    pub gain: f64,
    pub offset: f64,
    pub u: f64,
    pub v: f64,
}

impl Hinge {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let s = (self.offset + self.u * x + self.v * y).max(0.0);
        self.gain * s * s
    }
}

/// Plant parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub wiebe_a: f64,
    pub wiebe_m: f64,
    /// Normalization `u = (BR − br_ref)/br_scale`.
    pub br_ref: f64,
    pub br_scale: f64,
    /// Normalization `v = (SOI − soi_ref)/soi_scale`.
    pub soi_ref: f64,
    pub soi_scale: f64,
    /// CA50 [CAD after TDC].
    pub ca50: Quadratic,
    /// Burn duration, start to 99.9 % burned [CAD].
    pub duration: Quadratic,
    /// Fraction of fuel energy released as heat.
    pub efficiency: Quadratic,
    /// Extra efficiency loss `late_burn_gain · max(0, CA50 − late_burn_onset)²`.
    pub late_burn_onset: f64,
    pub late_burn_gain: f64,
    /// Cycle-to-cycle standard deviation of CA50 [CAD].
    pub ca50_noise: f64,
    /// Relative standard deviation of released energy: `base + hinge(u, v)`.
    pub energy_noise_base: f64,
    pub energy_noise: Hinge,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            wiebe_a: 6.908,
            wiebe_m: 2.0,
            br_ref: 0.7617,
            br_scale: 0.0571,
            soi_ref: -55.0,
            soi_scale: 20.0,
            ca50: Quadratic {
                c: 6.0,
                u: 3.0,
                v: 3.0,
                uu: 0.0,
                vv: 0.0,
                uv: 0.0,
            },
            duration: Quadratic {
                c: 6.0,
                u: 1.6,
                v: 1.6,
                uu: 0.0,
                vv: 0.0,
                uv: 0.3,
            },
            // 0.80 − 0.07(u−0.05)² − 0.06(v−0.05)² − 0.04(u−0.05)(v−0.05), expanded.
            efficiency: Quadratic {
                c: 0.799_575,
                u: 0.009,
                v: 0.008,
                uu: -0.07,
                vv: -0.06,
                uv: -0.04,
            },
            late_burn_onset: 9.0,
            late_burn_gain: 0.02,
            ca50_noise: 0.6,
            energy_noise_base: 0.004,
            energy_noise: Hinge {
                gain: 0.08,
                offset: -0.3,
                u: 0.5,
                v: 1.0,
            },
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(CalibError::InvalidArgument(format!(
                "plant parameters: {msg}"
            )))
        };
        if !(self.wiebe_a > 0.0 && self.wiebe_m > -1.0) {
            return bad("Wiebe a must be positive and m > -1");
        }
        if !(self.br_scale > 0.0 && self.soi_scale > 0.0) {
            return bad("normalization scales must be positive");
        }
        if !(self.ca50_noise >= 0.0
            && self.energy_noise_base >= 0.0
            && self.energy_noise.gain >= 0.0)
        {
            return bad("noise standard deviations must be non-negative");
        }
        if !(self.late_burn_gain >= 0.0 && self.late_burn_onset.is_finite()) {
            return bad("late-burn penalty must be non-negative");
        }
        if !(self.ca50.is_finite() && self.duration.is_finite() && self.efficiency.is_finite()) {
            return bad("surface coefficients must be finite");
        }
        Ok(())
    }

    /// The same parameters with all cycle-to-cycle noise removed.
    pub fn noiseless(&self) -> Self {
        Self {
            ca50_noise: 0.0,
            energy_noise_base: 0.0,
            energy_noise: Hinge {
                gain: 0.0,
                ..self.energy_noise
            },
            ..self.clone()
        }
    }

    pub fn normalize(&self, br: f64, soi_di: f64) -> (f64, f64) {
        (
            (br - self.br_ref) / self.br_scale,
            (soi_di - self.soi_ref) / self.soi_scale,
        )
    }

    /// Noise-free combustion descriptors at (BR, SOI_DI).
    pub fn combustion(&self, br: f64, soi_di: f64) -> Combustion {
        let (u, v) = self.normalize(br, soi_di);
        let ca50 = self.ca50.eval(u, v);
        let late = (ca50 - self.late_burn_onset).max(0.0);
        Combustion {
            ca50,
            duration: self.duration.eval(u, v).max(1.0),
            efficiency: (self.efficiency.eval(u, v) - self.late_burn_gain * late * late)
                .clamp(0.0, 1.0),
            energy_noise: self.energy_noise_base + self.energy_noise.eval(u, v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combustion {
    pub ca50: f64,
    pub duration: f64,
    pub efficiency: f64,
    pub energy_noise: f64,
}

/// Per-cycle performance figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    /// Gross IMEP [Pa].
    pub imep: f64,
    /// Gross indicated efficiency.
    pub gie: f64,
    /// Peak pressure [Pa].
    pub p_max: f64,
    /// Peak pressure rise rate [Pa/CAD].
    pub dp_max: f64,
}

/// IMEP, GIE and peak values of one trace.
pub fn metrics(trace: &PressureTrace, q_fuel: f64, cylinder: &Cylinder) -> CycleMetrics {
    let p = trace.pressure();
    let work = cylinder.integrate_dv(p);
    let dp = central_difference(p, cylinder.grid().delta_ca());
    CycleMetrics {
        imep: work / cylinder.displacement(),
        gie: work / q_fuel,
        p_max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        dp_max: dp.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Sample coefficient of variation `s/μ` (with `n − 1` in the variance).
pub fn cov_imep(imeps: &[f64]) -> Result<f64> {
    if imeps.len() < 2 {
        return Err(CalibError::InvalidArgument(
            "cov needs at least two cycles".into(),
        ));
    }
    let n = imeps.len() as f64;
    let mean = imeps.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(CalibError::NonPositiveMean(mean));
    }
    let var = imeps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / mean)
}

/// Single-zone pressure for given phasing, duration and released energy.
///
/// Uses the exact relation `d(pV^κ) = (κ − 1)V^(κ−1) dQ` with the heat
/// released over each interval applied at the interval's mid volume, so a
/// cycle without heat release is exactly the motored trace.
pub fn single_zone_pressure(
    cylinder: &Cylinder,
    p_im: f64,
    kappa: f64,
    ca50: f64,
    duration: f64,
    released: f64,
    wiebe: (f64, f64),
) -> Vec<f64> {
    let (a, m) = wiebe;
    let theta = cylinder.grid().theta();
    let vol = cylinder.volume();
    let soc = ca50 - duration * (std::f64::consts::LN_2 / a).powf(1.0 / (m + 1.0));
    let burned = |t: f64| {
        let z = ((t - soc) / duration).max(0.0);
        1.0 - (-a * z.powf(m + 1.0)).exp()
    };
    let mut pv = p_im * vol[0].powf(kappa);
    let mut out = Vec::with_capacity(theta.len());
    out.push(p_im);
    let mut xb = burned(theta[0]);
    for i in 1..theta.len() {
        let xn = burned(theta[i]);
        let v_mid = 0.5 * (vol[i - 1] + vol[i]);
        pv += (kappa - 1.0) * released * (xn - xb) * v_mid.powf(kappa - 1.0);
        xb = xn;
        out.push(pv / vol[i].powf(kappa));
    }
    out
}

/// One plant cycle with explicit noise draws `z = (z_ca50, z_energy)`.
pub fn simulate_cycle_with(
    s: &FuelSettings,
    air: &AirPath,
    params: &PlantParams,
    cylinder: &Cylinder,
    kappa: f64,
    z: [f64; 2],
) -> PressureTrace {
    let c = params.combustion(s.br, s.soi_di);
    let ca50 = c.ca50 + params.ca50_noise * z[0];
    let released = (s.q_fuel * c.efficiency * (1.0 + c.energy_noise * z[1])).max(0.0);
    let p = single_zone_pressure(
        cylinder,
        air.p_im,
        kappa,
        ca50,
        c.duration,
        released,
        (params.wiebe_a, params.wiebe_m),
    );
    PressureTrace::from_model(p, air.p_im)
}

/// One plant cycle; always consumes exactly two standard normals from `rng`.
pub fn simulate_cycle(
    s: &FuelSettings,
    air: &AirPath,
    params: &PlantParams,
    cylinder: &Cylinder,
    kappa: f64,
    rng: &mut ChaCha8Rng,
) -> PressureTrace {
    let z = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
    simulate_cycle_with(s, air, params, cylinder, kappa, z)
}

/// Stateful plant: parameters plus one RNG stream.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: PlantParams,
    pub air: AirPath,
    pub kappa: f64,
    cylinder: Arc<Cylinder>,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(
        params: PlantParams,
        air: AirPath,
        kappa: f64,
        cylinder: Arc<Cylinder>,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if !(air.p_im > 0.0) {
            return Err(CalibError::InvalidArgument(
                "intake pressure must be positive".into(),
            ));
        }
        check_kappa(kappa)?;
        Ok(Self {
            params,
            air,
            kappa,
            cylinder,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn cylinder(&self) -> &Arc<Cylinder> {
        &self.cylinder
    }

    pub fn cycle(&mut self, s: &FuelSettings) -> PressureTrace {
        simulate_cycle(
            s,
            &self.air,
            &self.params,
            &self.cylinder,
            self.kappa,
            &mut self.rng,
        )
    }

    /// The cycle with both noise draws at zero.
    pub fn mean_cycle(&self, s: &FuelSettings) -> PressureTrace {
        simulate_cycle_with(
            s,
            &self.air,
            &self.params,
            &self.cylinder,
            self.kappa,
            [0.0, 0.0],
        )
    }

    pub fn metrics(&self, trace: &PressureTrace, q_fuel: f64) -> CycleMetrics {
        metrics(trace, q_fuel, &self.cylinder)
    }
}

/// `q' = clamp(q + K_I·(target − measured)·V_d)`; the flag reports clamping.
pub fn imep_controller_step(
    measured: f64,
    q_fuel: f64,
    target: f64,
    gain: f64,
    displacement: f64,
    q_range: [f64; 2],
) -> (f64, bool) {
    let raw = q_fuel + gain * (target - measured) * displacement;
    let q = raw.clamp(q_range[0], q_range[1]);
    (q, q != raw)
}

/// Controller settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub gain: f64,
    /// Relative tracking tolerance.
    pub tolerance: f64,
    /// Consecutive in-tolerance cycles needed for convergence.
    pub window: usize,
    /// Give up after this many cycles at one setting.
    pub max_cycles: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gain: 0.5,
            tolerance: 0.02,
            window: 3,
            max_cycles: 50,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0
            && self.tolerance > 0.0
            && self.window >= 1
            && self.max_cycles >= self.window)
        {
            return Err(CalibError::InvalidArgument(format!(
                "invalid controller settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Next-cycle IMEP tracker with convergence and saturation bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImepController {
    pub config: ControllerConfig,
    pub target: f64,
    in_band: usize,
    saturated_run: usize,
}

impl ImepController {
    pub fn new(config: ControllerConfig, target: f64) -> Self {
        Self {
            config,
            target,
            in_band: 0,
            saturated_run: 0,
        }
    }

    pub fn reset(&mut self) {
        self.in_band = 0;
        self.saturated_run = 0;
    }

    /// Feeds one measurement; returns the next fuel energy.
    pub fn update(
        &mut self,
        measured: f64,
        q_fuel: f64,
        displacement: f64,
        q_range: [f64; 2],
    ) -> f64 {
        if (measured - self.target).abs() <= self.config.tolerance * self.target {
            self.in_band += 1;
        } else {
            self.in_band = 0;
        }
        let (q, clamped) = imep_controller_step(
            measured,
            q_fuel,
            self.target,
            self.config.gain,
            displacement,
            q_range,
        );
        self.saturated_run = if clamped { self.saturated_run + 1 } else { 0 };
        q
    }

    pub fn converged(&self) -> bool {
        self.in_band >= self.config.window
    }

    /// Clamped on each of the last `window` updates.
    pub fn saturated(&self) -> bool {
        self.saturated_run >= self.config.window
    }
}

/// Outcome of driving the controller at fixed (BR, SOI_DI).
#[derive(Debug, Clone, PartialEq)]
pub struct Settled {
    /// Fuel energy to apply next.
    pub q_fuel: f64,
    pub cycles: usize,
    pub converged: bool,
    pub saturated: bool,
}

/// Runs cycles until the controller converges, saturates or gives up.
pub fn settle(
    plant: &mut Plant,
    controller: &mut ImepController,
    br: f64,
    soi_di: f64,
    q_start: f64,
    bounds: &ActuatorBox,
) -> Settled {
    controller.reset();
    let v_d = plant.cylinder.displacement();
    let mut q = q_start.clamp(bounds.q_fuel[0], bounds.q_fuel[1]);
    let mut cycles = 0;
    while cycles < controller.config.max_cycles {
        let s = FuelSettings {
            q_fuel: q,
            br,
            soi_di,
        };
        let trace = plant.cycle(&s);
        let m = plant.metrics(&trace, q);
        q = controller.update(m.imep, q, v_d, bounds.q_fuel);
        cycles += 1;
        if controller.converged() || controller.saturated() {
            break;
        }
    }
    Settled {
        q_fuel: q,
        cycles,
        converged: controller.converged(),
        saturated: controller.saturated(),
    }
}

/// One noiseless oracle grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub br: f64,
    pub soi_di: f64,
    pub q_fuel: f64,
    pub imep: f64,
    pub gie: f64,
    pub p_max: f64,
    pub dp_max: f64,
    pub converged: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best: OraclePoint,
    pub points: Vec<OraclePoint>,
    pub resolution: usize,
}

/// Noiseless evaluation at (BR, SOI_DI) with the controller driven to
/// convergence (or saturation) from the middle of the fuel range.
pub fn oracle_point(
    params: &PlantParams,
    air: &AirPath,
    kappa: f64,
    cylinder: &Arc<Cylinder>,
    bounds: &ActuatorBox,
    spec: &ConstraintSpec,
    controller: &ControllerConfig,
    br: f64,
    soi_di: f64,
) -> OraclePoint {
    let quiet = params.noiseless();
    let v_d = cylinder.displacement();
    let mut ctl = ImepController::new(*controller, spec.imep_req);
    let mut q = 0.5 * (bounds.q_fuel[0] + bounds.q_fuel[1]);
    let eval = |q: f64| {
        let s = FuelSettings {
            q_fuel: q,
            br,
            soi_di,
        };
        let t = simulate_cycle_with(&s, air, &quiet, cylinder, kappa, [0.0, 0.0]);
        metrics(&t, q, cylinder)
    };
    let mut m = eval(q);
    for _ in 0..controller.max_cycles {
        let next = ctl.update(m.imep, q, v_d, bounds.q_fuel);
        if ctl.converged() || ctl.saturated() {
            break;
        }
        q = next;
        m = eval(q);
    }
    let (lo, hi) = spec.work_band(v_d);
    let work = m.imep * v_d;
    let feasible = ctl.converged()
        && work >= lo
        && work <= hi
        && m.p_max <= spec.p_ub
        && m.dp_max <= spec.dp_ub;
    OraclePoint {
        br,
        soi_di,
        q_fuel: q,
        imep: m.imep,
        gie: m.gie,
        p_max: m.p_max,
        dp_max: m.dp_max,
        converged: ctl.converged(),
        feasible,
    }
}

/// Exhaustive noiseless sweep over a `resolution × resolution` grid of the
/// (BR, SOI_DI) box. Feasibility uses the true IMEP band, peak pressure and
/// pressure-rise limits; cycle-to-cycle variation is ignored.
#[allow(clippy::too_many_arguments)]
pub fn grid_oracle(
    params: &PlantParams,
    air: &AirPath,
    kappa: f64,
    cylinder: &Arc<Cylinder>,
    bounds: &ActuatorBox,
    spec: &ConstraintSpec,
    controller: &ControllerConfig,
    resolution: usize,
) -> Result<OracleResult> {
    if resolution < 2 {
        return Err(CalibError::InvalidArgument(
            "oracle resolution must be at least 2".into(),
        ));
    }
    params.validate()?;
    bounds.validate()?;
    let at = |r: [f64; 2], i: usize| r[0] + (r[1] - r[0]) * i as f64 / (resolution - 1) as f64;
    let cells: Vec<(usize, usize)> = (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| (i, j)))
        .collect();
    let points: Vec<OraclePoint> = cells
        .par_iter()
        .map(|&(i, j)| {
            oracle_point(
                params,
                air,
                kappa,
                cylinder,
                bounds,
                spec,
                controller,
                at(bounds.br, i),
                at(bounds.soi_di, j),
            )
        })
        .collect();
    let best = points
        .iter()
        .filter(|p| p.feasible)
        .fold(None::<&OraclePoint>, |b, p| match b {
            Some(b) if b.gie >= p.gie => Some(b),
            _ => Some(p),
        })
        .copied()
        .ok_or_else(|| CalibError::Degenerate("no feasible point on the oracle grid".into()))?;
    Ok(OracleResult {
        best,
        points,
        resolution,
    })
}

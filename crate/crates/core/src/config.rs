//! Run configuration: a TOML file with one table per component.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Pressures are given in bar and lengths in millimetres; [`RunConfig`]
//! converts them to SI for the library.

use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionKind, DEFAULT_N_MC};
use crate::constraints::ConstraintSpec;
use crate::engine::{ActuatorBox, AirPath, ControllerConfig, PlantParams};
use crate::error::{CalibError, Result};
use crate::geometry::{CrankGrid, EngineGeometry};
use crate::gpr::FitConfig;
use crate::itc::DEFAULT_KAPPA;
use crate::pso::SwarmConfig;

const BAR: f64 = 1e5;

/// Loop-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub kind: AcquisitionKind,
    pub seed: u64,
    pub max_iterations: usize,
    /// Engine-time budget [s]; no iteration starts after it is spent.
    pub engine_budget_s: f64,
    /// Cycles buffered per GP training point.
    pub n_sample: usize,
    /// Monte Carlo samples per acquisition evaluation.
    pub n_mc: usize,
    pub initial_br: f64,
    pub initial_soi_di: f64,
    /// Fuel energy the controller starts from [J].
    pub initial_q_fuel: f64,
    /// Absolute GIE tolerance of the convergence-time definition.
    pub convergence_tol: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::Nei,
            seed: 0,
            max_iterations: 100,
            engine_budget_s: 300.0,
            n_sample: 25,
            n_mc: DEFAULT_N_MC,
            initial_br: 0.8,
            initial_soi_di: -45.0,
            initial_q_fuel: 2022.7,
            convergence_tol: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub bore_mm: f64,
    pub stroke_mm: f64,
    pub conrod_mm: f64,
    pub compression_ratio: f64,
    /// Crank-angle resolution [CAD].
    pub delta_ca: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            bore_mm: 130.0,
            stroke_mm: 162.0,
            conrod_mm: 255.0,
            compression_ratio: 17.2,
            delta_ca: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermoSection {
    pub kappa: f64,
    pub p_im_bar: f64,
    pub t_im_k: f64,
    pub egr: f64,
}

impl Default for ThermoSection {
    fn default() -> Self {
        let air = AirPath::default();
        Self {
            kappa: DEFAULT_KAPPA,
            p_im_bar: air.p_im / BAR,
            t_im_k: air.t_im,
            egr: air.egr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    pub n_pc: usize,
    /// Bootstrap grid points per axis.
    pub bootstrap_grid: usize,
    /// Cycles recorded per bootstrap point.
    pub bootstrap_cycles: usize,
    /// Pin one component to the work functional (see `pcd::train_work_basis`).
    pub pin_work: bool,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self {
            n_pc: 8,
            bootstrap_grid: 5,
            bootstrap_cycles: 10,
            pin_work: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    pub imep_req_bar: f64,
    pub cov_ub: f64,
    pub p_ub_bar: f64,
    pub dp_ub_bar_per_cad: f64,
    pub beta_max: f64,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        let c = ConstraintSpec::default();
        Self {
            imep_req_bar: c.imep_req / BAR,
            cov_ub: c.cov_ub,
            p_ub_bar: c.p_ub / BAR,
            dp_ub_bar_per_cad: c.dp_ub / BAR,
            beta_max: c.beta_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Grid points per axis.
    pub resolution: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { resolution: 61 }
    }
}

/// Complete, validated run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub geometry: GeometrySection,
    pub thermo: ThermoSection,
    pub basis: BasisSection,
    pub gp: FitConfig,
    pub pso: SwarmConfig,
    pub constraints: ConstraintSection,
    pub actuators: ActuatorBox,
    pub controller: ControllerConfig,
    pub plant: PlantParams,
    pub oracle: OracleSection,
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CalibError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes with every default materialized.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CalibError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            CalibError::Config(msg) => CalibError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(CalibError::Config(msg));
        let r = &self.run;
        if r.max_iterations == 0 {
            return cfg("run.max_iterations must be at least 1".into());
        }
        if !(r.engine_budget_s > 0.0) {
            return cfg("run.engine_budget_s must be positive".into());
        }
        if r.n_sample < 2 {
            return cfg("run.n_sample must be at least 2".into());
        }
        if r.n_mc == 0 {
            return cfg("run.n_mc must be at least 1".into());
        }
        if !(r.convergence_tol > 0.0) {
            return cfg("run.convergence_tol must be positive".into());
        }
        let b = &self.basis;
        if b.n_pc == 0 || b.bootstrap_grid < 2 || b.bootstrap_cycles == 0 {
            return cfg("basis needs n_pc ≥ 1, bootstrap_grid ≥ 2 and bootstrap_cycles ≥ 1".into());
        }
        if b.bootstrap_grid * b.bootstrap_grid * b.bootstrap_cycles < b.n_pc {
            return cfg("basis bootstrap produces fewer traces than n_pc".into());
        }
        if self.gp.budget == 0 || self.gp.refit_every == 0 {
            return cfg("gp.budget and gp.refit_every must be at least 1".into());
        }
        if self.oracle.resolution < 2 {
            return cfg("oracle.resolution must be at least 2".into());
        }
        let wrap = |e: CalibError| match e {
            CalibError::InvalidArgument(m) => CalibError::Config(m),
            other => other,
        };
        self.geometry().validate().map_err(wrap)?;
        self.grid().map_err(wrap)?;
        self.constraint_spec().validate().map_err(wrap)?;
        self.swarm().validate().map_err(wrap)?;
        self.actuators.validate().map_err(wrap)?;
        self.controller.validate().map_err(wrap)?;
        self.plant.validate().map_err(wrap)?;
        let k = self.thermo.kappa;
        if !(k > 1.0 && k < 2.0) {
            return cfg(format!("thermo.kappa must lie in (1, 2), got {k}"));
        }
        if !(self.thermo.p_im_bar > 0.0) {
            return cfg("thermo.p_im_bar must be positive".into());
        }
        let a = &self.actuators;
        let inside = |x: f64, lim: [f64; 2]| x >= lim[0] && x <= lim[1];
        if !(inside(r.initial_br, a.br)
            && inside(r.initial_soi_di, a.soi_di)
            && inside(r.initial_q_fuel, a.q_fuel))
        {
            return cfg("initial point lies outside the actuator box".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> EngineGeometry {
        let g = &self.geometry;
        EngineGeometry {
            bore: g.bore_mm * 1e-3,
            stroke: g.stroke_mm * 1e-3,
            conrod_length: g.conrod_mm * 1e-3,
            compression_ratio: g.compression_ratio,
        }
    }

    pub fn grid(&self) -> Result<CrankGrid> {
        CrankGrid::new(self.geometry.delta_ca)
    }

    pub fn air(&self) -> AirPath {
        AirPath {
            p_im: self.thermo.p_im_bar * BAR,
            t_im: self.thermo.t_im_k,
            egr: self.thermo.egr,
        }
    }

    pub fn constraint_spec(&self) -> ConstraintSpec {
        let c = &self.constraints;
        ConstraintSpec {
            imep_req: c.imep_req_bar * BAR,
            cov_ub: c.cov_ub,
            p_ub: c.p_ub_bar * BAR,
            dp_ub: c.dp_ub_bar_per_cad * BAR,
            beta_max: c.beta_max,
        }
    }

    /// Swarm settings with the feasibility threshold taken from the constraints.
    pub fn swarm(&self) -> SwarmConfig {
        SwarmConfig {
            beta_max: self.constraints.beta_max,
            ..self.pso
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let spec = cfg.constraint_spec();
        assert_eq!(spec.imep_req, 4e5);
        assert_eq!(spec.p_ub, 200e5);
        assert_eq!(spec.dp_ub, 25e5);
        assert_eq!(spec.cov_ub, 0.10);
        assert_eq!(cfg.run.n_sample, 25);
        assert_eq!(
            (cfg.pso.n_pso, cfg.pso.c0, cfg.pso.c1, cfg.pso.c2),
            (100, 0.1, 0.01, 0.1)
        );
        assert_eq!(cfg.actuators, ActuatorBox::default());
        assert_eq!((cfg.run.initial_br, cfg.run.initial_soi_di), (0.8, -45.0));
        assert_eq!(cfg.geometry(), EngineGeometry::default());
    }

    #[test]
    fn round_trip_is_identity() {
        let text = "# overrides\n[run]\nkind = \"PI\"\nseed = 7\n\n[plant.efficiency]\nc = 0.75\n";
        let a = RunConfig::from_toml(text).unwrap();
        assert_eq!(a.run.kind, AcquisitionKind::Pi);
        assert_eq!(a.plant.efficiency.c, 0.75);
        assert_eq!(a.plant.efficiency.uu, 0.0);
        let b = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        let e = RunConfig::from_toml("[run]\nseeed = 3\n").unwrap_err();
        assert!(
            matches!(&e, CalibError::Config(m) if m.contains("seeed") && m.contains("line 2")),
            "{e}"
        );
        let e = RunConfig::from_toml("[run]\nn_sample = 1\n").unwrap_err();
        assert!(matches!(e, CalibError::Config(_)));
        let e = RunConfig::from_toml("[constraints]\nbeta_max = 1.5\n").unwrap_err();
        assert!(matches!(e, CalibError::Config(_)));
        let e = RunConfig::from_toml("[run]\ninitial_br = 0.9\n").unwrap_err();
        assert!(matches!(e, CalibError::Config(_)));
        let e = RunConfig::from_toml("[run]\nkind = \"UCB\"\n").unwrap_err();
        assert!(matches!(e, CalibError::Config(_)));
    }
}

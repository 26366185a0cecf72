//! Particle swarm search with feasibility rules.
//!
//! Candidates are ranked lexicographically: feasible beats infeasible,
//! feasible candidates compare by acquisition value (higher is better) and
//! infeasible ones by violation probability (lower is better). Ties keep the
//! incumbent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Acquisition value and total violation probability at a position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub beta: f64,
}

pub trait Evaluator: Sync {
    fn evaluate(&self, x: &[f64; 2]) -> Evaluation;
}

impl<F> Evaluator for F
where
    F: Fn(&[f64; 2]) -> Evaluation + Sync,
{
    fn evaluate(&self, x: &[f64; 2]) -> Evaluation {
        self(x)
    }
}

/// Axis-aligned search box over (BR, SOI_DI).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl SearchBox {
    pub fn new(lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        if (0..2).any(|d| !(lower[d].is_finite() && upper[d].is_finite() && lower[d] < upper[d])) {
            return Err(CalibError::InvalidArgument(format!(
                "search box needs lower < upper in every dimension, got {lower:?}..{upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> [f64; 2] {
        [self.upper[0] - self.lower[0], self.upper[1] - self.lower[1]]
    }

    pub fn contains(&self, x: &[f64; 2]) -> bool {
        (0..2).all(|d| x[d] >= self.lower[d] && x[d] <= self.upper[d])
    }

    /// `n` positions on a near-square lattice that includes the box edges.
    pub fn lattice(&self, n: usize) -> Vec<[f64; 2]> {
        let side = (n as f64).sqrt().ceil() as usize;
        let w = self.width();
        let coord = |d: usize, i: usize| {
            if side == 1 {
                self.lower[d] + 0.5 * w[d]
            } else {
                self.lower[d] + w[d] * i as f64 / (side - 1) as f64
            }
        };
        (0..side)
            .flat_map(|i| (0..side).map(move |j| (i, j)))
            .take(n)
            .map(|(i, j)| [coord(0, i), coord(1, j)])
            .collect()
    }
}

/// Swarm settings; defaults follow the reference calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmConfig {
    pub n_pso: usize,
    pub iterations: usize,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Feasibility threshold on the violation probability; set from the
    /// constraint block rather than read from the swarm config section.
    #[serde(skip, default = "default_beta_max")]
    pub beta_max: f64,
    /// Initial velocity standard deviation as a fraction of the box width.
    pub init_velocity: f64,
}

fn default_beta_max() -> f64 {
    0.05
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            n_pso: 100,
            iterations: 100,
            c0: 0.1,
            c1: 0.01,
            c2: 0.1,
            beta_max: 0.05,
            init_velocity: 0.05,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pso == 0 || self.iterations == 0 {
            return Err(CalibError::InvalidArgument(
                "n_pso and iterations must be at least 1".into(),
            ));
        }
        for (name, c) in [("c0", self.c0), ("c1", self.c1), ("c2", self.c2)] {
            if !(0.0..1.0).contains(&c) {
                return Err(CalibError::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {c}"
                )));
            }
        }
        if !(self.beta_max > 0.0 && self.beta_max < 1.0) {
            return Err(CalibError::InvalidArgument(
                "beta_max must lie in (0, 1)".into(),
            ));
        }
        if !(self.init_velocity >= 0.0) {
            return Err(CalibError::InvalidArgument(
                "init_velocity must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// An evaluated position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub position: [f64; 2],
    pub eval: Evaluation,
}

impl Scored {
    pub fn is_feasible(&self, beta_max: f64) -> bool {
        self.eval.beta <= beta_max
    }
}

/// Returns the winner of `candidate` against `incumbent`.
pub fn select_best<'a>(candidate: &'a Scored, incumbent: &'a Scored, beta_max: f64) -> &'a Scored {
    match (
        candidate.is_feasible(beta_max),
        incumbent.is_feasible(beta_max),
    ) {
        (true, true) if candidate.eval.value > incumbent.eval.value => candidate,
        (true, false) => candidate,
        (false, false) if candidate.eval.beta < incumbent.eval.beta => candidate,
        _ => incumbent,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub current: Evaluation,
    pub best: Scored,
}

#[derive(Debug, Clone)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    /// Best feasible position seen so far.
    pub global_best: Option<Scored>,
    /// Lowest-violation position seen so far (attractor until something is feasible).
    pub least_violating: Scored,
    config: SwarmConfig,
    bounds: SearchBox,
}

fn evaluate_all<E: Evaluator + ?Sized>(evaluator: &E, positions: &[[f64; 2]]) -> Vec<Evaluation> {
    positions
        .par_iter()
        .map(|x| evaluator.evaluate(x))
        .collect()
}

impl Swarm {
    /// Lattice positions, Gaussian velocities, evaluated once.
    pub fn initialize<E: Evaluator + ?Sized>(
        config: SwarmConfig,
        bounds: SearchBox,
        evaluator: &E,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let positions = bounds.lattice(config.n_pso);
        let w = bounds.width();
        let dists =
            [0, 1].map(|d| Normal::new(0.0, config.init_velocity * w[d]).expect("finite std"));
        let velocities: Vec<[f64; 2]> = positions
            .iter()
            .map(|_| [dists[0].sample(rng), dists[1].sample(rng)])
            .collect();
        let evals = evaluate_all(evaluator, &positions);
        let particles: Vec<Particle> = positions
            .iter()
            .zip(velocities)
            .zip(evals)
            .map(|((&position, velocity), current)| Particle {
                position,
                velocity,
                current,
                best: Scored {
                    position,
                    eval: current,
                },
            })
            .collect();
        let mut swarm = Self {
            least_violating: particles[0].best,
            particles,
            global_best: None,
            config,
            bounds,
        };
        swarm.update_global();
        Ok(swarm)
    }

    fn update_global(&mut self) {
        let beta_max = self.config.beta_max;
        for p in &self.particles {
            if p.best.eval.beta < self.least_violating.eval.beta {
                self.least_violating = p.best;
            }
            if p.best.is_feasible(beta_max) {
                self.global_best = Some(match self.global_best {
                    Some(g) => *select_best(&p.best, &g, beta_max),
                    None => p.best,
                });
            }
        }
    }

    fn attractor(&self) -> [f64; 2] {
        self.global_best.unwrap_or(self.least_violating).position
    }

    /// One velocity/position update, evaluation and best-bookkeeping pass.
    pub fn step<E: Evaluator + ?Sized>(&mut self, evaluator: &E, rng: &mut ChaCha8Rng) {
        let SwarmConfig { c0, c1, c2, .. } = self.config;
        let g = self.attractor();
        for p in &mut self.particles {
            let x1: f64 = rng.random();
            let x2: f64 = rng.random();
            for d in 0..2 {
                p.velocity[d] = c0 * p.velocity[d]
                    + c1 * x1 * (p.best.position[d] - p.position[d])
                    + c2 * x2 * (g[d] - p.position[d]);
                let next = p.position[d] + p.velocity[d];
                let clamped = next.clamp(self.bounds.lower[d], self.bounds.upper[d]);
                if clamped != next {
                    p.velocity[d] = 0.0;
                }
                p.position[d] = clamped;
            }
        }
        let positions: Vec<[f64; 2]> = self.particles.iter().map(|p| p.position).collect();
        let evals = evaluate_all(evaluator, &positions);
        let beta_max = self.config.beta_max;
        for (p, e) in self.particles.iter_mut().zip(evals) {
            p.current = e;
            let cand = Scored {
                position: p.position,
                eval: e,
            };
            p.best = *select_best(&cand, &p.best, beta_max);
        }
        self.update_global();
    }
}

/// Outcome of a swarm run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsoOutcome {
    pub best: Scored,
    /// `false` when no feasible position was found; `best` is then the
    /// lowest-violation position.
    pub feasible: bool,
}

pub fn run<E: Evaluator + ?Sized>(
    config: &SwarmConfig,
    bounds: SearchBox,
    evaluator: &E,
    seed: u64,
) -> Result<PsoOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swarm = Swarm::initialize(*config, bounds, evaluator, &mut rng)?;
    for _ in 0..config.iterations {
        swarm.step(evaluator, &mut rng);
    }
    Ok(match swarm.global_best {
        Some(best) => PsoOutcome {
            best,
            feasible: true,
        },
        None => PsoOutcome {
            best: swarm.least_violating,
            feasible: false,
        },
    })
}

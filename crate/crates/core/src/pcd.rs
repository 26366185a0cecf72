//! Principal component decomposition of in-cylinder pressure.
//!
//! A measured trace is split into the adiabatic motored pressure plus a
//! residual expressed in an orthonormal basis learned from training cycles:
//!
//! ```text
//! p(θ) = p_mot(θ, p_im) + Σ_i w_i f_i(θ)
//! ```
//!
//! The basis rows `f_i` are the leading unit eigenvectors of `P·Pᵀ`, where
//! the columns of `P` are training residuals `p − p_mot`. They are obtained
//! from a thin SVD of `P` when there are fewer training cycles than grid
//! points (same vectors, better conditioning), otherwise from the symmetric
//! eigen-decomposition of `P·Pᵀ`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CalibError, Result};
use crate::geometry::{central_difference, CrankGrid, Cylinder, EngineGeometry};

/// Default number of retained components.
pub const DEFAULT_N_PC: usize = 8;

/// One sampled combustion cycle on the shared crank grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureTrace {
    pressure: Vec<f64>,
    p_im: f64,
}

impl PressureTrace {
    /// Validates a measured trace: one finite, positive sample per grid point.
    pub fn new(grid: &CrankGrid, pressure: Vec<f64>, p_im: f64) -> Result<Self> {
        if pressure.len() != grid.len() {
            return Err(CalibError::GridMismatch {
                expected: grid.len(),
                got: pressure.len(),
            });
        }
        if let Some(bad) = pressure.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(CalibError::InvalidArgument(format!(
                "pressure samples must be finite and positive, found {bad}"
            )));
        }
        if !(p_im.is_finite() && p_im > 0.0) {
            return Err(CalibError::InvalidArgument(format!(
                "intake manifold pressure must be positive, got {p_im}"
            )));
        }
        Ok(Self { pressure, p_im })
    }

    /// Model-generated trace; skips the positivity check.
    pub(crate) fn from_model(pressure: Vec<f64>, p_im: f64) -> Self {
        Self { pressure, p_im }
    }

    pub fn pressure(&self) -> &[f64] {
        &self.pressure
    }

    pub fn p_im(&self) -> f64 {
        self.p_im
    }

    pub fn len(&self) -> usize {
        self.pressure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pressure.is_empty()
    }

    pub fn into_pressure(self) -> Vec<f64> {
        self.pressure
    }
}

/// PC weights of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Motored pressure ratio `(V(-180)/V(θ))^κ` on the grid.
pub fn motored_ratio(cylinder: &Cylinder, kappa: f64) -> Vec<f64> {
    let v = cylinder.volume();
    let v_bdc = v[0];
    v.iter().map(|vi| (v_bdc / vi).powf(kappa)).collect()
}

/// Adiabatic motored pressure `p_im · (V(-180)/V(θ))^κ` [Pa].
pub fn motored_pressure(
    grid: &CrankGrid,
    p_im: f64,
    kappa: f64,
    geom: &EngineGeometry,
) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    let cylinder = Cylinder::new(*geom, grid.clone())?;
    Ok(motored_ratio(&cylinder, kappa)
        .into_iter()
        .map(|r| p_im * r)
        .collect())
}

/// Orthonormal pressure basis.
#[derive(Debug, Clone)]
pub struct PcBasis {
    components: Vec<Vec<f64>>,
    derivatives: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
    kappa: f64,
    motored: Vec<f64>,
    cylinder: Arc<Cylinder>,
}

impl PcBasis {
    /// Assembles a basis from explicit rows; used by import and tests.
    pub fn from_components(
        components: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        total_variance: f64,
        kappa: f64,
        cylinder: Arc<Cylinder>,
    ) -> Result<Self> {
        let n_ca = cylinder.grid().len();
        if components.is_empty() {
            return Err(CalibError::InvalidArgument(
                "basis needs at least one component".into(),
            ));
        }
        if let Some(row) = components.iter().find(|r| r.len() != n_ca) {
            return Err(CalibError::GridMismatch {
                expected: n_ca,
                got: row.len(),
            });
        }
        if eigenvalues.len() != components.len() {
            return Err(CalibError::InvalidArgument(
                "one eigenvalue per component is required".into(),
            ));
        }
        check_kappa(kappa)?;
        let d = cylinder.grid().delta_ca();
        let derivatives = components
            .iter()
            .map(|r| central_difference(r, d))
            .collect();
        let motored = motored_ratio(&cylinder, kappa);
        Ok(Self {
            components,
            derivatives,
            eigenvalues,
            total_variance,
            kappa,
            motored,
            cylinder,
        })
    }

    pub fn n_pc(&self) -> usize {
        self.components.len()
    }

    /// Row `i`: `f_i(θ_a)` for every grid point.
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Central-difference `df_i/dθ` [1/CAD].
    pub fn component_derivative(&self, i: usize) -> &[f64] {
        &self.derivatives[i]
    }

    /// Eigenvalues of `P·Pᵀ` for the retained components, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Fraction of the training residual energy captured by the basis.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.eigenvalues.iter().sum::<f64>() / self.total_variance
        } else {
            0.0
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn cylinder(&self) -> &Arc<Cylinder> {
        &self.cylinder
    }

    pub fn grid(&self) -> &CrankGrid {
        self.cylinder.grid()
    }

    /// Motored pressure at `p_im` [Pa].
    pub fn motored(&self, p_im: f64) -> Vec<f64> {
        self.motored.iter().map(|r| r * p_im).collect()
    }

    pub(crate) fn motored_ratio(&self) -> &[f64] {
        &self.motored
    }

    /// Projects a residual (pressure minus motored) onto the basis.
    pub fn project_residual(&self, residual: &[f64]) -> WeightVector {
        WeightVector(
            self.components
                .iter()
                .map(|f| f.iter().zip(residual).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `Σ_i w_i f_i(θ)` on the grid.
    pub fn combine(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid().len()];
        for (wi, f) in w.iter().zip(&self.components) {
            for (o, fa) in out.iter_mut().zip(f) {
                *o += wi * fa;
            }
        }
        out
    }

    /// Writes the basis as a commented-metadata CSV matrix.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let g = self.cylinder.geometry();
        writeln!(out, "# n_pc={}", self.n_pc())?;
        writeln!(out, "# delta_ca={}", self.grid().delta_ca())?;
        writeln!(out, "# kappa={}", self.kappa)?;
        writeln!(out, "# bore={}", g.bore)?;
        writeln!(out, "# stroke={}", g.stroke)?;
        writeln!(out, "# conrod_length={}", g.conrod_length)?;
        writeln!(out, "# compression_ratio={}", g.compression_ratio)?;
        writeln!(out, "# total_variance={}", self.total_variance)?;
        let eig: Vec<String> = self.eigenvalues.iter().map(|e| e.to_string()).collect();
        writeln!(out, "# eigenvalues={}", eig.join(";"))?;
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["theta".to_string()];
        header.extend((1..=self.n_pc()).map(|i| format!("pc{i}")));
        wtr.write_record(&header)?;
        for (a, theta) in self.grid().theta().iter().enumerate() {
            let mut row = vec![theta.to_string()];
            row.extend(self.components.iter().map(|f| f[a].to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a basis written by [`PcBasis::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut meta = std::collections::BTreeMap::new();
        let mut body = String::new();
        for line in input.lines() {
            let line = line?;
            if let Some(kv) = line.strip_prefix("# ") {
                if let Some((k, v)) = kv.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let num = |key: &str| -> Result<f64> {
            meta.get(key)
                .ok_or_else(|| CalibError::Parse(format!("basis metadata is missing `{key}`")))?
                .parse::<f64>()
                .map_err(|e| CalibError::Parse(format!("basis metadata `{key}`: {e}")))
        };
        let geometry = EngineGeometry {
            bore: num("bore")?,
            stroke: num("stroke")?,
            conrod_length: num("conrod_length")?,
            compression_ratio: num("compression_ratio")?,
        };
        let cylinder = Arc::new(Cylinder::new(geometry, CrankGrid::new(num("delta_ca")?)?)?);
        let n_pc = num("n_pc")? as usize;
        let eigenvalues = meta
            .get("eigenvalues")
            .ok_or_else(|| CalibError::Parse("basis metadata is missing `eigenvalues`".into()))?
            .split(';')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| CalibError::Parse(format!("eigenvalue: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut components = vec![Vec::with_capacity(cylinder.grid().len()); n_pc];
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != n_pc + 1 {
                return Err(CalibError::Parse(format!(
                    "basis row has {} fields, expected {}",
                    rec.len(),
                    n_pc + 1
                )));
            }
            for (i, c) in components.iter_mut().enumerate() {
                c.push(
                    rec[i + 1]
                        .parse::<f64>()
                        .map_err(|e| CalibError::Parse(format!("basis value: {e}")))?,
                );
            }
        }
        Self::from_components(
            components,
            eigenvalues,
            num("total_variance")?,
            num("kappa")?,
            cylinder,
        )
    }
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 1.0 && kappa < 2.0 {
        Ok(())
    } else {
        Err(CalibError::InvalidArgument(format!(
            "specific heat ratio must lie in (1, 2), got {kappa}"
        )))
    }
}

/// Learns the leading `n_pc` components from training traces.
pub fn train_basis(
    traces: &[PressureTrace],
    n_pc: usize,
    kappa: f64,
    cylinder: Arc<Cylinder>,
) -> Result<PcBasis> {
    train(traces, n_pc, kappa, cylinder, false)
}

/// Like [`train_basis`], but the first direction is pinned to the normalized
/// volume-quadrature weights and the other `n_pc − 1` components are the
/// principal directions of the residuals with that direction removed.
///
/// The span then contains the work functional, so `gᵀw` equals the quadrature
/// work `∫(p − p_mot) dV` of any trace, not just its truncated reconstruction.
/// Components are still orthonormal and ordered by captured variance.
pub fn train_work_basis(
    traces: &[PressureTrace],
    n_pc: usize,
    kappa: f64,
    cylinder: Arc<Cylinder>,
) -> Result<PcBasis> {
    train(traces, n_pc, kappa, cylinder, true)
}

fn train(
    traces: &[PressureTrace],
    n_pc: usize,
    kappa: f64,
    cylinder: Arc<Cylinder>,
    pin_work: bool,
) -> Result<PcBasis> {
    check_kappa(kappa)?;
    let n_ca = cylinder.grid().len();
    if n_pc == 0 {
        return Err(CalibError::InvalidArgument(
            "n_pc must be at least 1".into(),
        ));
    }
    if traces.len() < n_pc {
        return Err(CalibError::InvalidArgument(format!(
            "{} training traces cannot define {n_pc} components",
            traces.len()
        )));
    }
    if let Some(t) = traces.iter().find(|t| t.len() != n_ca) {
        return Err(CalibError::GridMismatch {
            expected: n_ca,
            got: t.len(),
        });
    }

    let ratio = motored_ratio(&cylinder, kappa);
    let mut p = DMatrix::from_fn(n_ca, traces.len(), |a, b| {
        let t = &traces[b];
        t.pressure[a] - t.p_im * ratio[a]
    });
    let total_variance = p.norm_squared();
    if !(total_variance > 0.0) || !total_variance.is_finite() {
        return Err(CalibError::Degenerate(
            "training residuals are identically zero (traces equal the motored pressure)".into(),
        ));
    }

    let pinned = if pin_work {
        let c = DVector::from_column_slice(cylinder.dv_weights());
        let e = &c / c.norm();
        let coeffs = e.transpose() * &p;
        p -= &e * &coeffs;
        Some((
            coeffs.norm_squared(),
            e.iter().copied().collect::<Vec<f64>>(),
        ))
    } else {
        None
    };
    let n_free = n_pc - usize::from(pinned.is_some());

    let mut pairs: Vec<(f64, Vec<f64>)> = if traces.len() < n_ca {
        let svd = p.svd(true, false);
        let u = svd.u.ok_or(CalibError::EigenSolve)?;
        svd.singular_values
            .iter()
            .enumerate()
            .map(|(j, s)| (s * s, u.column(j).iter().copied().collect()))
            .collect()
    } else {
        let gram = &p * p.transpose();
        let eig = SymmetricEigen::try_new(gram, 1e-14, 10_000).ok_or(CalibError::EigenSolve)?;
        eig.eigenvalues
            .iter()
            .enumerate()
            .map(|(j, l)| {
                (
                    l.max(0.0),
                    eig.eigenvectors.column(j).iter().copied().collect(),
                )
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    if n_free > 0 && pairs[n_free - 1].0 <= 1e-20 * total_variance {
        return Err(CalibError::Degenerate(format!(
            "training residuals span fewer than {n_pc} directions"
        )));
    }
    pairs.truncate(n_free);
    pairs.extend(pinned);
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (eigenvalues, components): (Vec<f64>, Vec<Vec<f64>>) = pairs
        .into_iter()
        .map(|(l, mut f)| {
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = f
                .iter()
                .copied()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                f.iter_mut().for_each(|x| *x = -*x);
            }
            (l, f)
        })
        .unzip();
    PcBasis::from_components(components, eigenvalues, total_variance, kappa, cylinder)
}

/// `w_i = Σ_a (p(θ_a) − p_mot(θ_a)) f_i(θ_a)`.
pub fn project_weights(trace: &PressureTrace, basis: &PcBasis) -> Result<WeightVector> {
    if trace.len() != basis.grid().len() {
        return Err(CalibError::GridMismatch {
            expected: basis.grid().len(),
            got: trace.len(),
        });
    }
    let residual: Vec<f64> = trace
        .pressure
        .iter()
        .zip(basis.motored_ratio())
        .map(|(p, r)| p - trace.p_im * r)
        .collect();
    Ok(basis.project_residual(&residual))
}

/// `p(θ) = p_mot(θ, p_im) + wᵀ f(θ)`.
pub fn reconstruct(w: &WeightVector, basis: &PcBasis, p_im: f64) -> PressureTrace {
    let mut p = basis.combine(w.as_slice());
    for (pa, r) in p.iter_mut().zip(basis.motored_ratio()) {
        *pa += p_im * r;
    }
    PressureTrace::from_model(p, p_im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cylinder() -> Arc<Cylinder> {
        Arc::new(Cylinder::new(EngineGeometry::default(), CrankGrid::new(1.0).unwrap()).unwrap())
    }

    fn bump(cyl: &Cylinder, centre: f64, width: f64, height: f64) -> Vec<f64> {
        cyl.grid()
            .theta()
            .iter()
            .map(|t| height * (-((t - centre) / width).powi(2)).exp())
            .collect()
    }

    fn trace_from(cyl: &Cylinder, residual: &[f64], p_im: f64) -> PressureTrace {
        let ratio = motored_ratio(cyl, 1.35);
        let p = residual
            .iter()
            .zip(&ratio)
            .map(|(r, m)| r + p_im * m)
            .collect();
        PressureTrace::new(cyl.grid(), p, p_im).unwrap()
    }

    #[test]
    fn motored_pressure_endpoints() {
        let grid = CrankGrid::default();
        let geom = EngineGeometry::default();
        let p = motored_pressure(&grid, 1e5, 1.35, &geom).unwrap();
        assert_relative_eq!(p[0], 1e5, max_relative = 1e-12);
        // V(-180)/V(0) = r exactly, so p_mot(0) = p_im · r^κ.
        assert_relative_eq!(p[900], 1e5 * 46.554686165223041, max_relative = 1e-9);
        assert!(motored_pressure(&grid, 1e5, 1.0, &geom).is_err());
        let near_iso = motored_pressure(&grid, 1e5, 1.000001, &geom).unwrap();
        assert_relative_eq!(near_iso[900], 17.2e5, max_relative = 1e-5);
    }

    #[test]
    fn motored_cycle_does_no_work() {
        let cyl = Cylinder::new(EngineGeometry::default(), CrankGrid::default()).unwrap();
        let ratio = motored_ratio(&cyl, 1.35);
        let p: Vec<f64> = ratio.iter().map(|r| 1e5 * r).collect();
        assert!(cyl.integrate_dv(&p).abs() < 1e-6 * 1e5 * cyl.displacement());
    }

    #[test]
    fn work_basis_reproduces_quadrature_work_of_any_trace() {
        let cyl = cylinder();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let training: Vec<_> = (0..12)
            .map(|_| {
                let r = bump(
                    &cyl,
                    rng.random_range(0.0..20.0),
                    rng.random_range(5.0..15.0),
                    3e6,
                );
                trace_from(&cyl, &r, 1e5)
            })
            .collect();
        let basis = train_work_basis(&training, 4, 1.35, cyl.clone()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = basis
                    .component(i)
                    .iter()
                    .zip(basis.component(j))
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        assert!(basis.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let g: Vec<f64> = basis
            .components()
            .iter()
            .map(|f| cyl.integrate_dv(f))
            .collect();
        for _ in 0..5 {
            // Residual shapes unrelated to the training set.
            let r: Vec<f64> = cyl
                .grid()
                .theta()
                .iter()
                .map(|t| rng.random_range(-1e5..1e5) + 1e4 * (t / 7.0).sin())
                .collect();
            let t = trace_from(&cyl, &r, 1e5);
            let w = project_weights(&t, &basis).unwrap();
            assert_relative_eq!(w.dot(&g), cyl.integrate_dv(&r), max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_residual_is_degenerate() {
        let cyl = cylinder();
        let zero = vec![0.0; cyl.grid().len()];
        let traces: Vec<_> = (0..4).map(|_| trace_from(&cyl, &zero, 1e5)).collect();
        let err = train_basis(&traces, 2, 1.35, cyl).unwrap_err();
        assert!(matches!(err, CalibError::Degenerate(_)));
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let cyl = cylinder();
        let ok = trace_from(&cyl, &bump(&cyl, 10.0, 8.0, 1e6), 1e5);
        let other = CrankGrid::new(0.5).unwrap();
        let bad = PressureTrace::new(&other, vec![1e5; other.len()], 1e5).unwrap();
        let err = train_basis(&[ok, bad], 1, 1.35, cyl).unwrap_err();
        assert!(matches!(err, CalibError::GridMismatch { .. }));
    }

    /// Modified Gram-Schmidt on the two bump shapes, independent of the SVD route.
    fn gram_schmidt(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let q1: Vec<f64> = a.iter().map(|x| x / norm(a)).collect();
        let d: f64 = q1.iter().zip(b).map(|(x, y)| x * y).sum();
        let r: Vec<f64> = b.iter().zip(&q1).map(|(y, x)| y - d * x).collect();
        let q2 = r.iter().map(|x| x / norm(&r)).collect();
        (q1, q2)
    }

    #[test]
    fn two_bumps_span_the_first_two_components() {
        let cyl = cylinder();
        let b1 = bump(&cyl, 5.0, 10.0, 3e6);
        let b2 = bump(&cyl, 25.0, 15.0, 1e6);
        let traces = vec![trace_from(&cyl, &b1, 1e5), trace_from(&cyl, &b2, 1e5)];
        let basis = train_basis(&traces, 2, 1.35, cyl.clone()).unwrap();
        let (q1, q2) = gram_schmidt(&b1, &b2);
        // Projection of each Gram-Schmidt vector onto span(f1, f2) is lossless.
        for q in [&q1, &q2] {
            let w = basis.project_residual(q);
            let back = basis.combine(w.as_slice());
            let err: f64 = back
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-8, "projection residual {err}");
        }
        // Orthonormal rows.
        for i in 0..2 {
            for j in 0..2 {
                let d: f64 = basis
                    .component(i)
                    .iter()
                    .zip(basis.component(j))
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        assert!(basis.eigenvalues()[0] >= basis.eigenvalues()[1]);
    }

    #[test]
    fn projection_of_motored_and_component_shifts() {
        let cyl = cylinder();
        let traces: Vec<_> = [(0.0, 8.0), (10.0, 12.0), (20.0, 6.0), (-5.0, 9.0)]
            .iter()
            .map(|&(c, w)| trace_from(&cyl, &bump(&cyl, c, w, 2e6), 1e5))
            .collect();
        let basis = train_basis(&traces, 3, 1.35, cyl.clone()).unwrap();

        let motored = PressureTrace::new(cyl.grid(), basis.motored(1.2e5), 1.2e5).unwrap();
        let w = project_weights(&motored, &basis).unwrap();
        assert!(w.as_slice().iter().all(|x| x.abs() < 1e-6));

        let c = 4.2e6;
        let shifted: Vec<f64> = basis.component(0).iter().map(|f| c * f).collect();
        let w = project_weights(&trace_from(&cyl, &shifted, 1e5), &basis).unwrap();
        assert_relative_eq!(w[0], c, max_relative = 1e-9);
        assert!(w[1].abs() < 1e-6 * c && w[2].abs() < 1e-6 * c);

        let back = reconstruct(&WeightVector::zeros(3), &basis, 1e5);
        assert_eq!(back.pressure(), basis.motored(1e5).as_slice());
    }

    #[test]
    fn complete_basis_round_trips_training_traces() {
        let cyl = cylinder();
        let traces: Vec<_> = [(0.0, 8.0), (10.0, 12.0), (20.0, 6.0)]
            .iter()
            .map(|&(c, w)| trace_from(&cyl, &bump(&cyl, c, w, 2e6), 1e5))
            .collect();
        let basis = train_basis(&traces, 3, 1.35, cyl).unwrap();
        for t in &traces {
            let w = project_weights(t, &basis).unwrap();
            let back = reconstruct(&w, &basis, t.p_im());
            for (a, b) in back.pressure().iter().zip(t.pressure()) {
                assert_relative_eq!(a, b, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn truncation_error_equals_discarded_energy() {
        let cyl = cylinder();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traces: Vec<_> = (0..12)
            .map(|_| {
                let r = bump(
                    &cyl,
                    rng.random_range(-10.0..30.0),
                    rng.random_range(5.0..20.0),
                    2e6,
                );
                trace_from(&cyl, &r, 1e5)
            })
            .collect();
        // Full-rank reference: all 12 directions.
        let full = train_basis(&traces, 12, 1.35, cyl.clone()).unwrap();
        let basis = train_basis(&traces, 4, 1.35, cyl.clone()).unwrap();
        let probe = &traces[7];
        let w_full = project_weights(probe, &full).unwrap();
        let w = project_weights(probe, &basis).unwrap();
        let back = reconstruct(&w, &basis, probe.p_im());
        let residual: f64 = back
            .pressure()
            .iter()
            .zip(probe.pressure())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let discarded: f64 = w_full.as_slice()[4..].iter().map(|x| x * x).sum();
        assert_relative_eq!(residual, discarded, max_relative = 1e-6);
    }

    #[test]
    fn csv_round_trip() {
        let cyl = cylinder();
        let traces: Vec<_> = [(0.0, 8.0), (10.0, 12.0), (20.0, 6.0)]
            .iter()
            .map(|&(c, w)| trace_from(&cyl, &bump(&cyl, c, w, 2e6), 1e5))
            .collect();
        let basis = train_basis(&traces, 2, 1.35, cyl).unwrap();
        let mut buf = Vec::new();
        basis.write_csv(&mut buf).unwrap();
        let back = PcBasis::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.components(), basis.components());
        assert_eq!(back.eigenvalues(), basis.eigenvalues());
        assert_eq!(back.kappa(), basis.kappa());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
                                    c1 in -20.0f64..30.0, c2 in -20.0f64..30.0) {
                let cyl = cylinder();
                let traces: Vec<_> = [(0.0, 8.0), (10.0, 12.0), (20.0, 6.0)]
                    .iter()
                    .map(|&(c, w)| trace_from(&cyl, &bump(&cyl, c, w, 2e6), 1e5))
                    .collect();
                let basis = train_basis(&traces, 3, 1.35, cyl.clone()).unwrap();
                let r1 = bump(&cyl, c1, 9.0, 1e6);
                let r2 = bump(&cyl, c2, 14.0, 5e5);
                let mix: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| alpha * a + beta * b).collect();
                let w1 = basis.project_residual(&r1);
                let w2 = basis.project_residual(&r2);
                let wm = basis.project_residual(&mix);
                for i in 0..3 {
                    let lin = alpha * w1[i] + beta * w2[i];
                    prop_assert!((wm[i] - lin).abs() <= 1e-9 * (1.0 + lin.abs()));
                }
            }
        }
    }
}

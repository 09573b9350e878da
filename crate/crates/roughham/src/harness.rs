//! Experiment drivers: convergence studies against the truncated modified
//! flow, long-time energy studies, and phase-space domain studies.
//!
//! Studies are deterministic for a fixed base seed and sample count:
//! per-sample seeds are derived by hashing, work is distributed with
//! rayon but reduced in sample order with pairwise summation.

use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

use crate::core::Grid;
use crate::geometry::{evolve_domain, DomainPolygon};
use crate::integrators::{
    integrate, ExactKuboFlow, Method, MethodFlow, PathFlow, SolverConfig,
};
use crate::modified::{
    select_truncation_number, solve_truncated_modified, CoefficientTable, ModifiedFlow,
    TableKind, TruncationRule,
};
use crate::noise::{coarsen_path, pairwise_sum, sample_fbm_path, truncate_path, NoiseSpec};
use crate::systems::HamiltonianSystem;
use crate::{Error, Result};

/// splitmix64: the standard 64-bit finalizing mix.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-lane seed derivation; lanes never collide for distinct inputs.
pub fn sample_seed(base: u64, lane: u64) -> u64 {
    splitmix64(base ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// The closed coefficient table belonging to a method, if it has one.
pub fn table_kind_for(method: &Method) -> Option<TableKind> {
    match method {
        Method::Midpoint => Some(TableKind::Midpoint),
        Method::Erk2 => Some(TableKind::Erk2),
        Method::SparkKubo => Some(TableKind::SparkKubo),
        Method::Srk(_) => None,
    }
}

/// Configuration of a strong-convergence study: for each Hurst index and
/// each step size 2^-e the method is compared with the truncated modified
/// flow driven by the same truncated increments.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceStudy {
    pub method_label: String,
    pub table: TableKind,
    pub order_cap: u32,
    pub rule: TruncationRule,
    pub hursts: Vec<f64>,
    pub step_exponents: Vec<u32>,
    pub t_end: f64,
    pub initial: Vec<f64>,
    /// Micro step of the reference modified flow.
    pub delta: f64,
    pub samples: usize,
    pub base_seed: u64,
    /// Increment-truncation constant k in A_h = sqrt(k |ln h|).
    pub threshold_k: f64,
    /// Per-sample error over the whole grid instead of at t_end only.
    pub sup_over_grid: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConvergenceCell {
    pub hurst: f64,
    pub n_tilde: u32,
    pub h: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Monte-Carlo standard error of the mse estimate.
    pub se_mse: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub system: String,
    pub method: String,
    pub samples: usize,
    pub base_seed: u64,
    pub t_end: f64,
    pub cells: Vec<ConvergenceCell>,
}

impl ConvergenceReport {
    /// One row per cell: `H,n_tilde,h,mse,rmse`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "H,n_tilde,h,mse,rmse")?;
        for c in &self.cells {
            writeln!(
                w,
                "{:.16e},{},{:.16e},{:.16e},{:.16e}",
                c.hurst, c.n_tilde, c.h, c.mse, c.rmse
            )?;
        }
        Ok(())
    }

    /// Least-squares slope of log rmse against log h for one (H, n_tilde)
    /// curve.
    pub fn estimated_order(&self, hurst: f64, n_tilde: u32) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .cells
            .iter()
            .filter(|c| c.hurst == hurst && c.n_tilde == n_tilde)
            .map(|c| (c.h, c.rmse))
            .collect();
        let (hs, es): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        estimate_order(&hs, &es)
    }

    /// Distinct (hurst, n_tilde) curves present, in cell order.
    pub fn curves(&self) -> Vec<(f64, u32)> {
        let mut out: Vec<(f64, u32)> = Vec::new();
        for c in &self.cells {
            if !out.contains(&(c.hurst, c.n_tilde)) {
                out.push((c.hurst, c.n_tilde));
            }
        }
        out
    }

    pub fn merge(&mut self, other: ConvergenceReport) {
        self.cells.extend(other.cells);
    }
}

/// OLS slope of ln(err) on ln(h).
pub fn estimate_order(hs: &[f64], errs: &[f64]) -> Result<f64> {
    if hs.len() != errs.len() || hs.len() < 2 {
        return Err(Error::OrderEstimate(
            "need at least two (h, err) points".into(),
        ));
    }
    if hs.iter().any(|&h| !(h > 0.0)) || errs.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::OrderEstimate(
            "order estimation needs positive step sizes and errors".into(),
        ));
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx == 0.0 {
        return Err(Error::OrderEstimate("step sizes are all equal".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    Ok(sxy / sxx)
}

pub fn run_convergence_study(
    sys: &HamiltonianSystem,
    method: &Method,
    study: &ConvergenceStudy,
    solver: &SolverConfig,
) -> Result<ConvergenceReport> {
    if study.samples == 0 || study.hursts.is_empty() || study.step_exponents.is_empty() {
        return Err(Error::Domain(
            "convergence study needs samples, hursts, and step exponents".into(),
        ));
    }
    let table = CoefficientTable::new(sys, study.table, study.order_cap)?;
    let e_max = *study.step_exponents.iter().max().expect("nonempty");
    let fine_steps_f = study.t_end * (1u64 << e_max) as f64;
    let fine_steps = fine_steps_f.round();
    if (fine_steps_f - fine_steps).abs() > 1e-9 || fine_steps < 1.0 {
        return Err(Error::Domain(format!(
            "t_end {} is not commensurate with the finest step 2^-{e_max}",
            study.t_end
        )));
    }
    let fine_steps = fine_steps as usize;
    let fine_grid = Grid::new(study.t_end, fine_steps)?;

    let mut cells = Vec::new();
    for (ih, &hurst) in study.hursts.iter().enumerate() {
        let spec = NoiseSpec::new(hurst, sys.noise_dim())?;
        // per sample: one fine path, coarsened to every step size so the
        // comparisons share their driving noise
        let per_sample: Vec<Vec<f64>> = (0..study.samples)
            .into_par_iter()
            .map(|s| -> Result<Vec<f64>> {
                let seed = sample_seed(study.base_seed, ((ih as u64) << 32) | s as u64);
                let fine = sample_fbm_path(&spec, &fine_grid, seed)?;
                let mut errs = Vec::with_capacity(study.step_exponents.len());
                for &e in &study.step_exponents {
                    let factor = 1usize << (e_max - e);
                    let coarse = coarsen_path(&fine, factor)?;
                    let truncated = truncate_path(&coarse, study.threshold_k)?;
                    let m_traj =
                        integrate(sys, method, &study.initial, &truncated.path, solver)?;
                    let reference = solve_truncated_modified(
                        &table,
                        &truncated.path,
                        &study.initial,
                        &study.rule,
                        study.delta,
                    )?;
                    let err2 = if study.sup_over_grid {
                        m_traj
                            .states
                            .iter()
                            .zip(&reference.trajectory.states)
                            .map(|(a, b)| {
                                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                            })
                            .fold(0.0, f64::max)
                    } else {
                        let a = m_traj.terminal();
                        let b = reference.trajectory.terminal();
                        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
                    };
                    errs.push(err2);
                }
                Ok(errs)
            })
            .collect::<Result<Vec<_>>>()?;

        for (je, &e) in study.step_exponents.iter().enumerate() {
            let h = 1.0 / (1u64 << e) as f64;
            let errs: Vec<f64> = per_sample.iter().map(|v| v[je]).collect();
            let n = study.samples as f64;
            let mse = pairwise_sum(&errs) / n;
            let dev: Vec<f64> = errs.iter().map(|e2| (e2 - mse) * (e2 - mse)).collect();
            let se_mse = if study.samples > 1 {
                (pairwise_sum(&dev) / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            let n_tilde = select_truncation_number(&study.rule, h, study.order_cap)?;
            cells.push(ConvergenceCell {
                hurst,
                n_tilde,
                h,
                mse,
                rmse: mse.sqrt(),
                se_mse,
            });
        }
    }
    Ok(ConvergenceReport {
        system: sys.label().to_string(),
        method: study.method_label.clone(),
        samples: study.samples,
        base_seed: study.base_seed,
        t_end: study.t_end,
        cells,
    })
}

/// Long-time single-path energy study.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyStudy {
    pub t_end: f64,
    pub n_steps: usize,
    pub hurst: f64,
    pub seed: u64,
    pub initial: Vec<f64>,
    /// Truncation numbers of modified flows to track alongside each method.
    pub truncations: Vec<u32>,
    /// Micro step for the modified flows; required when truncations are set.
    pub delta: Option<f64>,
    /// Track the exact flow as well (Kubo only).
    pub include_exact: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergySeries {
    pub label: String,
    /// |H(y_n) - H(y_0)| at every node.
    pub energy_error: Vec<f64>,
    pub time_average: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub system: String,
    pub t: Vec<f64>,
    pub series: Vec<EnergySeries>,
    pub seed: u64,
    pub hurst: f64,
}

impl EnergyReport {
    /// Header `t,<label...>`, one column per series.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "t")?;
        for s in &self.series {
            write!(w, ",{}", s.label)?;
        }
        writeln!(w)?;
        for (i, t) in self.t.iter().enumerate() {
            write!(w, "{t:.16e}")?;
            for s in &self.series {
                write!(w, ",{:.16e}", s.energy_error[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn series_by_label(&self, label: &str) -> Option<&EnergySeries> {
        self.series.iter().find(|s| s.label == label)
    }
}

fn micro_substeps(h: f64, delta: f64) -> Result<usize> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!(
            "micro step must be positive, got {delta}"
        )));
    }
    let ratio = h / delta;
    let substeps = ratio.round();
    if substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
        return Err(Error::Domain(format!(
            "micro step {delta} does not divide the macro step {h}"
        )));
    }
    Ok(substeps as usize)
}

/// Modified-flow companions of a method: (label, table, n_tilde) triples.
fn modified_companions<'a>(
    sys: &'a HamiltonianSystem,
    method: &Method,
    truncations: &[u32],
) -> Result<Vec<(String, CoefficientTable<'a>, u32)>> {
    if truncations.is_empty() {
        return Ok(Vec::new());
    }
    let kind = table_kind_for(method).ok_or_else(|| {
        Error::Domain(format!(
            "method '{}' has no closed coefficient table; drop the truncations",
            method.label()
        ))
    })?;
    let mut out = Vec::new();
    for &n in truncations {
        let table = CoefficientTable::new(sys, kind, n)?;
        out.push((format!("{}-mod{}", method.label(), n), table, n));
    }
    Ok(out)
}

pub fn run_energy_study(
    sys: &HamiltonianSystem,
    methods: &[Method],
    study: &EnergyStudy,
    solver: &SolverConfig,
) -> Result<EnergyReport> {
    if sys.energy(&study.initial).is_none() {
        return Err(Error::Domain(format!(
            "system '{}' has no conserved energy to track",
            sys.label()
        )));
    }
    let grid = Grid::new(study.t_end, study.n_steps)?;
    let spec = NoiseSpec::new(study.hurst, sys.noise_dim())?;
    let path = sample_fbm_path(&spec, &grid, study.seed)?;
    let h0 = sys.energy(&study.initial).expect("checked");
    let series_of = |label: String, states: &[Vec<f64>]| -> EnergySeries {
        let errs: Vec<f64> = states
            .iter()
            .map(|y| (sys.energy(y).expect("checked") - h0).abs())
            .collect();
        let time_average = pairwise_sum(&errs) / errs.len() as f64;
        let max = errs.iter().cloned().fold(0.0, f64::max);
        EnergySeries {
            label,
            energy_error: errs,
            time_average,
            max,
        }
    };
    let mut series = Vec::new();
    for method in methods {
        let traj = integrate(sys, method, &study.initial, &path, solver)?;
        series.push(series_of(method.label(), &traj.states));
        for (label, table, n_tilde) in modified_companions(sys, method, &study.truncations)? {
            let delta = study.delta.ok_or_else(|| {
                Error::Domain("truncations need a micro step delta".into())
            })?;
            let sol = solve_truncated_modified(
                &table,
                &path,
                &study.initial,
                &TruncationRule::Fixed(n_tilde),
                delta,
            )?;
            series.push(series_of(label, &sol.trajectory.states));
        }
    }
    if study.include_exact {
        let params = sys.kubo_params().ok_or_else(|| {
            Error::Domain("the exact flow is only available for the kubo system".into())
        })?;
        let flow = ExactKuboFlow {
            params,
            path: &path,
        };
        let traj = crate::integrators::run_flow(&flow, &study.initial, &grid)?;
        series.push(series_of("exact".into(), &traj.states));
    }
    Ok(EnergyReport {
        system: sys.label().to_string(),
        t: grid.nodes(),
        series,
        seed: study.seed,
        hurst: study.hurst,
    })
}

/// Phase-space domain study: a polygon is pushed through each method along
/// one shared path and its signed area tracked.
#[derive(Clone, Debug, Serialize)]
pub struct DomainStudy {
    pub t_end: f64,
    pub n_steps: usize,
    pub hurst: f64,
    pub seed: u64,
    pub center: [f64; 2],
    pub radius: f64,
    pub n_vertices: usize,
    pub truncations: Vec<u32>,
    pub delta: Option<f64>,
    pub include_exact: bool,
    /// Steps at which full polygon snapshots are kept (areas are always
    /// recorded at every node).
    pub snapshot_steps: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainSeries {
    pub label: String,
    pub area: Vec<f64>,
    /// (step, vertices) pairs for the requested snapshot steps.
    pub snapshots: Vec<(usize, Vec<crate::core::PhasePoint>)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainReport {
    pub system: String,
    pub t: Vec<f64>,
    pub initial_area: f64,
    pub series: Vec<DomainSeries>,
    pub seed: u64,
    pub hurst: f64,
}

impl DomainReport {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "t")?;
        for s in &self.series {
            write!(w, ",{}", s.label)?;
        }
        writeln!(w)?;
        for (i, t) in self.t.iter().enumerate() {
            write!(w, "{t:.16e}")?;
            for s in &self.series {
                write!(w, ",{:.16e}", s.area[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn series_by_label(&self, label: &str) -> Option<&DomainSeries> {
        self.series.iter().find(|s| s.label == label)
    }
}

pub fn run_domain_study(
    sys: &HamiltonianSystem,
    methods: &[Method],
    study: &DomainStudy,
    solver: &SolverConfig,
) -> Result<DomainReport> {
    let grid = Grid::new(study.t_end, study.n_steps)?;
    let spec = NoiseSpec::new(study.hurst, sys.noise_dim())?;
    let path = sample_fbm_path(&spec, &grid, study.seed)?;
    let polygon = DomainPolygon::circle(study.center, study.radius, study.n_vertices)?;
    if let Some(&bad) = study.snapshot_steps.iter().find(|&&s| s > study.n_steps) {
        return Err(Error::Domain(format!(
            "snapshot step {bad} is past the last step {}",
            study.n_steps
        )));
    }

    let mut series = Vec::new();
    let mut push_flow = |label: String, flow: &dyn PathFlow| -> Result<()> {
        let snapshots = evolve_domain(flow, &polygon)?;
        let kept = study
            .snapshot_steps
            .iter()
            .map(|&s| (s, snapshots[s].vertices.clone()))
            .collect();
        series.push(DomainSeries {
            label,
            area: snapshots.iter().map(|p| p.area()).collect(),
            snapshots: kept,
        });
        Ok(())
    };
    for method in methods {
        let flow = MethodFlow {
            sys,
            method,
            path: &path,
            cfg: *solver,
        };
        push_flow(method.label(), &flow)?;
        for (label, table, n_tilde) in modified_companions(sys, method, &study.truncations)? {
            let delta = study.delta.ok_or_else(|| {
                Error::Domain("truncations need a micro step delta".into())
            })?;
            let flow = ModifiedFlow {
                table: &table,
                path: &path,
                n_tilde,
                substeps: micro_substeps(grid.h(), delta)?,
            };
            push_flow(label, &flow)?;
        }
    }
    if study.include_exact {
        let params = sys.kubo_params().ok_or_else(|| {
            Error::Domain("the exact flow is only available for the kubo system".into())
        })?;
        let flow = ExactKuboFlow {
            params,
            path: &path,
        };
        push_flow("exact".into(), &flow)?;
    }
    Ok(DomainReport {
        system: sys.label().to_string(),
        t: grid.nodes(),
        initial_area: polygon.area(),
        series,
        seed: study.seed,
        hurst: study.hurst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::kubo;
    use approx::assert_relative_eq;

    #[test]
    fn seed_derivation_is_stable_and_spread() {
        assert_eq!(sample_seed(7, 0), sample_seed(7, 0));
        assert_ne!(sample_seed(7, 0), sample_seed(7, 1));
        assert_ne!(sample_seed(7, 0), sample_seed(8, 0));
        // frozen value so report reproducibility is visible in reviews
        assert_eq!(sample_seed(0, 0), 16294208416658607535);
    }

    #[test]
    fn order_estimation_on_synthetic_power_law() {
        let hs: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = hs.iter().map(|h| 3.0 * h.powf(1.7)).collect();
        let slope = estimate_order(&hs, &errs).unwrap();
        assert_relative_eq!(slope, 1.7, epsilon = 1e-12);
        assert!(estimate_order(&hs[..1], &errs[..1]).is_err());
        assert!(estimate_order(&[0.1, 0.1], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn convergence_study_is_deterministic_and_orders_sanely() {
        // midpoint on kubo at H = 1/2, n_tilde = 2: pinning real slopes
        // needs hundreds of samples, so only determinism, error decrease,
        // and the report surface are asserted here
        let sys = kubo(1.0, 0.9);
        let study = ConvergenceStudy {
            method_label: "midpoint".into(),
            table: TableKind::Midpoint,
            order_cap: 4,
            rule: TruncationRule::Fixed(2),
            hursts: vec![0.5],
            step_exponents: vec![3, 4, 5],
            t_end: 1.0,
            initial: vec![1.0, 0.0],
            delta: 1.0 / 512.0,
            samples: 4,
            base_seed: 99,
            threshold_k: 4.0,
            sup_over_grid: false,
        };
        let solver = SolverConfig::default();
        let a = run_convergence_study(&sys, &Method::Midpoint, &study, &solver).unwrap();
        let b = run_convergence_study(&sys, &Method::Midpoint, &study, &solver).unwrap();
        assert_eq!(a.cells.len(), 3);
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.mse, cb.mse);
            assert!(ca.se_mse > 0.0);
        }
        assert!(a.cells[0].rmse > a.cells[2].rmse);
        assert_eq!(a.curves(), vec![(0.5, 2)]);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("H,n_tilde,h,mse,rmse\n"));
        assert_eq!(text.lines().count(), 4);

        // sup-over-grid error dominates the terminal error
        let sup = ConvergenceStudy {
            sup_over_grid: true,
            ..study
        };
        let c = run_convergence_study(&sys, &Method::Midpoint, &sup, &solver).unwrap();
        for (cc, ca) in c.cells.iter().zip(&a.cells) {
            assert!(cc.mse >= ca.mse);
        }
    }

    #[test]
    fn energy_study_tracks_midpoint_conservation() {
        let sys = kubo(1.0, 0.9);
        let study = EnergyStudy {
            t_end: 5.0,
            n_steps: 160,
            hurst: 0.5,
            seed: 42,
            initial: vec![1.0, 0.0],
            truncations: vec![],
            delta: None,
            include_exact: true,
        };
        let report = run_energy_study(
            &sys,
            &[Method::Midpoint, Method::Erk2],
            &study,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(report.series.len(), 3);
        assert_eq!(report.t.len(), 161);
        let midpoint = report.series_by_label("midpoint").unwrap();
        let erk2 = report.series_by_label("erk2").unwrap();
        let exact = report.series_by_label("exact").unwrap();
        assert!(midpoint.max < 1e-9, "midpoint drift {}", midpoint.max);
        assert!(erk2.max > midpoint.max * 1e3);
        assert!(exact.max < 1e-12);
    }

    #[test]
    fn energy_study_carries_modified_flow_series() {
        let sys = kubo(1.0, 0.9);
        let study = EnergyStudy {
            t_end: 1.0,
            n_steps: 32,
            hurst: 0.5,
            seed: 3,
            initial: vec![1.0, 0.0],
            truncations: vec![2, 3],
            delta: Some(1.0 / 256.0),
            include_exact: false,
        };
        let report = run_energy_study(
            &sys,
            &[Method::Midpoint],
            &study,
            &SolverConfig::default(),
        )
        .unwrap();
        let labels: Vec<&str> = report.series.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, vec!["midpoint", "midpoint-mod2", "midpoint-mod3"]);
        // the midpoint modified fields are skew of the energy gradient at
        // every order, so the truncated flows conserve it too
        for s in &report.series {
            assert!(s.max < 1e-7, "{} drift {}", s.label, s.max);
        }
        // truncations without a micro step must error
        let bad = EnergyStudy {
            delta: None,
            ..study
        };
        assert!(run_energy_study(&sys, &[Method::Midpoint], &bad, &SolverConfig::default())
            .is_err());
    }

    #[test]
    fn domain_study_reports_area_series() {
        let sys = kubo(1.0, 0.9);
        let study = DomainStudy {
            t_end: 2.0,
            n_steps: 64,
            hurst: 0.5,
            seed: 5,
            center: [1.0, 0.0],
            radius: 0.3,
            n_vertices: 16,
            truncations: vec![],
            delta: None,
            include_exact: true,
            snapshot_steps: vec![0, 32, 64],
        };
        let report = run_domain_study(
            &sys,
            &[Method::Midpoint, Method::Erk2],
            &study,
            &SolverConfig::default(),
        )
        .unwrap();
        let mid = report.series_by_label("midpoint").unwrap();
        let erk = report.series_by_label("erk2").unwrap();
        let exact = report.series_by_label("exact").unwrap();
        let a0 = report.initial_area;
        for a in &mid.area {
            assert_relative_eq!(*a, a0, epsilon = 1e-9);
        }
        for a in &exact.area {
            assert_relative_eq!(*a, a0, epsilon = 1e-12);
        }
        assert!(*erk.area.last().unwrap() > a0);
        assert_eq!(mid.snapshots.len(), 3);
        assert_eq!(mid.snapshots[0].0, 0);
        assert_eq!(mid.snapshots[0].1.len(), 16);
        // snapshot past the grid is rejected
        let bad = DomainStudy {
            snapshot_steps: vec![65],
            ..study
        };
        assert!(run_domain_study(&sys, &[Method::Midpoint], &bad, &SolverConfig::default())
            .is_err());
    }
}

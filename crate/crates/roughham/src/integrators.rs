//! One-step methods for dY = sum_l V_l(Y) dX^l.
//!
//! A step consumes a row c = (h, dX^1, ..., dX^d) and advances the state.
//! Implicit stages are solved by plain fixed-point sweeps (no Newton, no
//! damping): under max(h, |dX^l|) * Lip(V) small enough the sweep is a
//! contraction, and a step size too large for the contraction surfaces as
//! an explicit error instead of a silently degraded solve.

use serde::Serialize;

use crate::core::{Grid, Trajectory};
use crate::noise::DriverPath;
use crate::systems::{HamiltonianSystem, KuboParams};
use crate::{Error, Result};

/// Fixed-point solver knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Stop once the max-norm update falls below this.
    pub fp_tol: f64,
    /// Iteration budget before reporting a stall.
    pub fp_max_iter: usize,
    /// When set, run exactly this many sweeps with no tolerance check.
    /// The resulting map is smooth in its inputs (no stopping-rule jumps),
    /// which coefficient extraction relies on. Leave `None` for stepping.
    pub fixed_sweeps: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            fp_tol: 1e-14,
            fp_max_iter: 100,
            fixed_sweeps: None,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Fixed-point sweep x <- g(x) from `start`. Fails fast when the update
/// norm doubles (divergence) or the budget runs out (stall).
pub(crate) fn fixed_point(
    start: &[f64],
    cfg: &SolverConfig,
    mut g: impl FnMut(&[f64], &mut [f64]),
) -> Result<Vec<f64>> {
    let mut cur = start.to_vec();
    let mut next = vec![0.0; start.len()];
    if let Some(sweeps) = cfg.fixed_sweeps {
        let mut prev_update = f64::INFINITY;
        for it in 0..sweeps {
            g(&cur, &mut next);
            let update = max_abs_diff(&cur, &next);
            if !update.is_finite() || (it > 0 && update > 2.0 * prev_update && update > 1e-8) {
                return Err(Error::FixedPointDiverged {
                    iterations: it + 1,
                    last_update: update,
                });
            }
            prev_update = update.max(f64::MIN_POSITIVE);
            std::mem::swap(&mut cur, &mut next);
        }
        return Ok(cur);
    }
    let mut prev_update = f64::INFINITY;
    for it in 0..cfg.fp_max_iter {
        g(&cur, &mut next);
        let update = max_abs_diff(&cur, &next);
        std::mem::swap(&mut cur, &mut next);
        if update <= cfg.fp_tol {
            return Ok(cur);
        }
        if !update.is_finite() || (it > 0 && update > 2.0 * prev_update) {
            return Err(Error::FixedPointDiverged {
                iterations: it + 1,
                last_update: update,
            });
        }
        prev_update = update;
    }
    Err(Error::FixedPointStalled {
        iterations: cfg.fp_max_iter,
        last_update: prev_update,
    })
}

fn check_shapes(sys: &HamiltonianSystem, y: &[f64], row: &[f64]) -> Result<()> {
    if y.len() != sys.dim() {
        return Err(Error::Domain(format!(
            "state has dimension {}, system expects {}",
            y.len(),
            sys.dim()
        )));
    }
    if row.len() != sys.noise_dim() + 1 {
        return Err(Error::Domain(format!(
            "step row has {} entries, system expects {}",
            row.len(),
            sys.noise_dim() + 1
        )));
    }
    Ok(())
}

/// Implicit midpoint step: Y = y + W((y + Y)/2) with W = sum_l c_l V_l.
/// Symplectic for Hamiltonian fields.
pub fn step_midpoint(
    sys: &HamiltonianSystem,
    y: &[f64],
    row: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    check_shapes(sys, y, row)?;
    let dim = sys.dim();
    let mut mid = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    fixed_point(y, cfg, |cur, next| {
        for i in 0..dim {
            mid[i] = 0.5 * (y[i] + cur[i]);
        }
        sys.eval_w(&mid, row, &mut w, &mut scratch);
        for i in 0..dim {
            next[i] = y[i] + w[i];
        }
    })
}

/// Explicit two-stage step: Y = y + W(y + W(y)/2). Not symplectic.
pub fn step_explicit_rk2(sys: &HamiltonianSystem, y: &[f64], row: &[f64]) -> Result<Vec<f64>> {
    check_shapes(sys, y, row)?;
    let dim = sys.dim();
    let mut w = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    sys.eval_w(y, row, &mut w, &mut scratch);
    let half: Vec<f64> = (0..dim).map(|i| y[i] + 0.5 * w[i]).collect();
    sys.eval_w(&half, row, &mut w, &mut scratch);
    Ok((0..dim).map(|i| y[i] + w[i]).collect())
}

/// Symplectic partitioned RK step specialized to the Kubo oscillator:
///
/// ```text
///   P' = (P - a Q h - sigma Q S) / (1 + sigma^2 h),   S = dX^1 + dX^2,
///   Q' = Q + a P' h + sigma^2 Q h + sigma P' S.
/// ```
pub fn step_spark_kubo(params: &KuboParams, y: &[f64], row: &[f64]) -> Result<Vec<f64>> {
    if y.len() != 2 || row.len() != 3 {
        return Err(Error::Domain(
            "spark-kubo expects a planar state and two noise components".into(),
        ));
    }
    let (a, sigma) = (params.a, params.sigma);
    let h = row[0];
    let s = row[1] + row[2];
    let denom = 1.0 + sigma * sigma * h;
    if denom <= 0.0 {
        return Err(Error::Domain(format!(
            "spark-kubo step is singular: 1 + sigma^2 h = {denom}"
        )));
    }
    let p = (y[0] - a * y[1] * h - sigma * y[1] * s) / denom;
    let q = y[1] + a * p * h + sigma * sigma * y[1] * h + sigma * p * s;
    Ok(vec![p, q])
}

/// Runge-Kutta tableau applied to the combined field W:
/// stages g_i = y + sum_j a_ij W(g_j), output Y = y + sum_i b_i W(g_i).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Tableau {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let s = b.len();
        if s == 0 || a.len() != s || a.iter().any(|row| row.len() != s) {
            return Err(Error::Domain(
                "tableau needs a square a-matrix matching the b-row".into(),
            ));
        }
        Ok(Self { a, b })
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// True when every a_ij with j >= i vanishes (forward substitution works).
    pub fn is_explicit(&self) -> bool {
        self.a
            .iter()
            .enumerate()
            .all(|(i, row)| row[i..].iter().all(|&x| x == 0.0))
    }

    pub fn midpoint() -> Self {
        Self {
            a: vec![vec![0.5]],
            b: vec![1.0],
        }
    }

    pub fn explicit_rk2() -> Self {
        Self {
            a: vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            b: vec![0.0, 1.0],
        }
    }

    /// Parses the plain-text format: first line the stage count s, then s
    /// whitespace-separated rows of a, then the b row.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let s: usize = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tableau file".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("bad stage count: {e}")))?;
        if s == 0 {
            return Err(Error::Parse("tableau needs at least one stage".into()));
        }
        let mut parse_row = |what: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what} row")))?;
            let vals: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(|p| p.parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse(format!("bad {what} row: {e}")))?;
            if vals.len() != s {
                return Err(Error::Parse(format!(
                    "{what} row has {} entries, expected {s}",
                    vals.len()
                )));
            }
            Ok(vals)
        };
        let a: Result<Vec<Vec<f64>>> = (0..s).map(|i| parse_row(&format!("a[{i}]"))).collect();
        let a = a?;
        let b = parse_row("b")?;
        if lines.next().is_some() {
            return Err(Error::Parse("trailing content after the b row".into()));
        }
        Tableau::new(a, b)
    }
}

/// General stochastic RK step over the combined field.
pub fn step_srk(
    sys: &HamiltonianSystem,
    tableau: &Tableau,
    y: &[f64],
    row: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    check_shapes(sys, y, row)?;
    let dim = sys.dim();
    let s = tableau.stages();
    let mut w = vec![vec![0.0; dim]; s];
    let mut scratch = vec![0.0; dim];
    if tableau.is_explicit() {
        let mut stage = vec![0.0; dim];
        for i in 0..s {
            stage.copy_from_slice(y);
            for (j, wj) in w.iter().enumerate().take(i) {
                let aij = tableau.a[i][j];
                if aij != 0.0 {
                    for k in 0..dim {
                        stage[k] += aij * wj[k];
                    }
                }
            }
            let (head, tail) = w.split_at_mut(i);
            let _ = head;
            sys.eval_w(&stage, row, &mut tail[0], &mut scratch);
        }
    } else {
        // Jacobi sweeps over the stacked stage vector
        let flat0 = vec![y.to_vec(); s].concat();
        let flat = fixed_point(&flat0, cfg, |cur, next| {
            for (j, wj) in w.iter_mut().enumerate() {
                sys.eval_w(&cur[j * dim..(j + 1) * dim], row, wj, &mut scratch);
            }
            for i in 0..s {
                for k in 0..dim {
                    let mut acc = y[k];
                    for (j, wj) in w.iter().enumerate() {
                        acc += tableau.a[i][j] * wj[k];
                    }
                    next[i * dim + k] = acc;
                }
            }
        })?;
        for (j, wj) in w.iter_mut().enumerate() {
            sys.eval_w(&flat[j * dim..(j + 1) * dim], row, wj, &mut scratch);
        }
    }
    let mut out = y.to_vec();
    for (i, wi) in w.iter().enumerate() {
        let bi = tableau.b[i];
        if bi != 0.0 {
            for k in 0..dim {
                out[k] += bi * wi[k];
            }
        }
    }
    Ok(out)
}

/// Method selector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Method {
    Midpoint,
    Erk2,
    SparkKubo,
    Srk(Tableau),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Midpoint => "midpoint".into(),
            Method::Erk2 => "erk2".into(),
            Method::SparkKubo => "spark-kubo".into(),
            Method::Srk(t) => format!("srk({} stages)", t.stages()),
        }
    }

    /// One step from y over the row (h, dX...).
    pub fn step(
        &self,
        sys: &HamiltonianSystem,
        y: &[f64],
        row: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Vec<f64>> {
        match self {
            Method::Midpoint => step_midpoint(sys, y, row, cfg),
            Method::Erk2 => step_explicit_rk2(sys, y, row),
            Method::SparkKubo => {
                let params = sys.kubo_params().ok_or_else(|| {
                    Error::Domain("spark-kubo only applies to the kubo system".into())
                })?;
                step_spark_kubo(&params, y, row)
            }
            Method::Srk(t) => step_srk(sys, t, y, row, cfg),
        }
    }
}

/// Anything that advances a state across the macro-steps of one realized
/// path: a one-step method, a truncated modified flow, or an exact flow.
pub trait PathFlow {
    fn dim(&self) -> usize;
    fn n_steps(&self) -> usize;
    fn advance(&self, step: usize, y: &[f64]) -> Result<Vec<f64>>;
}

/// A numerical method driven by a realized path.
pub struct MethodFlow<'a> {
    pub sys: &'a HamiltonianSystem,
    pub method: &'a Method,
    pub path: &'a DriverPath,
    pub cfg: SolverConfig,
}

impl PathFlow for MethodFlow<'_> {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    fn n_steps(&self) -> usize {
        self.path.grid().n_steps()
    }

    fn advance(&self, step: usize, y: &[f64]) -> Result<Vec<f64>> {
        let row = self.path.step_row(step);
        self.method.step(self.sys, y, &row, &self.cfg)
    }
}

/// The exact Kubo flow along a realized path (a rotation per step).
pub struct ExactKuboFlow<'a> {
    pub params: KuboParams,
    pub path: &'a DriverPath,
}

impl PathFlow for ExactKuboFlow<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn n_steps(&self) -> usize {
        self.path.grid().n_steps()
    }

    fn advance(&self, step: usize, y: &[f64]) -> Result<Vec<f64>> {
        let h = self.path.grid().h();
        let s = self.path.increment(step, 1) + self.path.increment(step, 2);
        let theta = self.params.a * h + self.params.sigma * s;
        let (sn, cs) = theta.sin_cos();
        Ok(vec![y[0] * cs - y[1] * sn, y[1] * cs + y[0] * sn])
    }
}

/// Folds a flow over its path, recording states at every macro node.
pub fn run_flow(flow: &dyn PathFlow, z: &[f64], grid: &Grid) -> Result<Trajectory> {
    if z.len() != flow.dim() {
        return Err(Error::Domain(format!(
            "initial state has dimension {}, flow expects {}",
            z.len(),
            flow.dim()
        )));
    }
    if grid.n_steps() != flow.n_steps() {
        return Err(Error::Domain("grid does not match the flow's path".into()));
    }
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    states.push(z.to_vec());
    for n in 0..grid.n_steps() {
        let next = flow.advance(n, states.last().expect("nonempty"))?;
        states.push(next);
    }
    Trajectory::new(*grid, states)
}

/// Integrates a method along a realized path from z.
pub fn integrate(
    sys: &HamiltonianSystem,
    method: &Method,
    z: &[f64],
    path: &DriverPath,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if path.noise_dim() != sys.noise_dim() {
        return Err(Error::Domain(format!(
            "path drives {} components, system expects {}",
            path.noise_dim(),
            sys.noise_dim()
        )));
    }
    let flow = MethodFlow {
        sys,
        method,
        path,
        cfg: *cfg,
    };
    run_flow(&flow, z, path.grid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_fbm_path, NoiseSpec};
    use crate::systems::{example1, kubo};
    use approx::assert_relative_eq;

    /// Closed-form midpoint step for the linear Kubo field:
    /// (I - B/2)^{-1} (I + B/2) y with B = h A_0 + (dX^1 + dX^2) A_1.
    fn cayley_kubo(a: f64, sigma: f64, y: &[f64], row: &[f64]) -> Vec<f64> {
        let beta = a * row[0] + sigma * (row[1] + row[2]);
        // solve (I - B/2) x = (I + B/2) y with B = beta * [[0,-1],[1,0]]
        let (b11, b12, b21, b22) = (1.0, 0.5 * beta, -0.5 * beta, 1.0);
        let det = b11 * b22 - b12 * b21;
        let rhs = [y[0] + 0.5 * beta * (-y[1]), y[1] + 0.5 * beta * y[0]];
        vec![
            (b22 * rhs[0] - b12 * rhs[1]) / det,
            (-b21 * rhs[0] + b11 * rhs[1]) / det,
        ]
    }

    #[test]
    fn midpoint_matches_cayley_map_at_contractive_steps() {
        let sys = kubo(1.0, 0.9);
        let cfg = SolverConfig::default();
        for (h, dx1, dx2) in [(0.5, 0.0, 0.0), (0.1, 0.3, -0.2), (0.25, -0.1, 0.05)] {
            let row = [h, dx1, dx2];
            let y = [1.0, 0.0];
            let got = step_midpoint(&sys, &y, &row, &cfg).unwrap();
            let expect = cayley_kubo(1.0, 0.9, &y, &row);
            assert_relative_eq!(got[0], expect[0], epsilon = 1e-13);
            assert_relative_eq!(got[1], expect[1], epsilon = 1e-13);
        }
    }

    #[test]
    fn midpoint_cayley_rotation_target() {
        // at h = 2, a = 1 the Cayley map sends (1,0) to (0,1) exactly, but
        // the sweep is not a contraction there (spectral radius 1): the
        // solver must refuse rather than return something silently wrong
        let expect = cayley_kubo(1.0, 0.0, &[1.0, 0.0], &[2.0, 0.0, 0.0]);
        assert_relative_eq!(expect[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(expect[1], 1.0, epsilon = 1e-15);

        let sys = kubo(1.0, 0.9);
        let err = step_midpoint(&sys, &[1.0, 0.0], &[2.0, 0.0, 0.0], &SolverConfig::default());
        assert!(matches!(
            err,
            Err(Error::FixedPointStalled { .. }) | Err(Error::FixedPointDiverged { .. })
        ));
    }

    #[test]
    fn spark_kubo_oracle_and_guards() {
        let params = KuboParams { a: 1.0, sigma: 0.0 };
        let got = step_spark_kubo(&params, &[1.0, 0.0], &[0.1, 0.0, 0.0]).unwrap();
        assert_relative_eq!(got[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(got[1], 0.1, epsilon = 1e-15);

        let params = KuboParams { a: 1.0, sigma: 2.0 };
        assert!(step_spark_kubo(&params, &[1.0, 0.0], &[-0.3, 0.0, 0.0]).is_err());
        assert!(step_spark_kubo(&params, &[1.0], &[0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn erk2_one_step_taylor_structure() {
        // drift-free single-noise system: the step expands as
        // y + V dx + (1/2) V'V dx^2 + (1/8) V''(V,V) dx^3 + O(dx^4)
        let sys = HamiltonianSystem::builder("taylor-probe", 2, 1)
            .field(
                |_, out| out.fill(0.0),
                |_, _, out| out.fill(0.0),
                |_, _, _, out| out.fill(0.0),
            )
            .field(
                |y, out| {
                    out[0] = y[1].sin();
                    out[1] = y[0].cos();
                },
                |y, v, out| {
                    out[0] = y[1].cos() * v[1];
                    out[1] = -y[0].sin() * v[0];
                },
                |y, v, w, out| {
                    out[0] = -y[1].sin() * v[1] * w[1];
                    out[1] = -y[0].cos() * v[0] * w[0];
                },
            )
            .build()
            .unwrap();
        let y = [0.3, -0.6];
        let model = |dx: f64| -> Vec<f64> {
            let v = sys.v(1, &y);
            let mut dv = vec![0.0; 2];
            sys.eval_dv(1, &y, &v, &mut dv);
            let mut d2 = vec![0.0; 2];
            sys.eval_d2v(1, &y, &v, &v, &mut d2);
            (0..2)
                .map(|i| y[i] + v[i] * dx + 0.5 * dv[i] * dx * dx + 0.125 * d2[i] * dx.powi(3))
                .collect()
        };
        let defect = |dx: f64| -> f64 {
            let got = step_explicit_rk2(&sys, &y, &[0.0, dx]).unwrap();
            got.iter()
                .zip(model(dx))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (defect(0.08), defect(0.04));
        let rate = (e1 / e2).log2();
        assert!(rate > 3.7, "expected O(dx^4) defect, got rate {rate}");
    }

    #[test]
    fn srk_midpoint_tableau_matches_direct_midpoint() {
        let sys = example1();
        let cfg = SolverConfig::default();
        let tab = Tableau::midpoint();
        assert!(!tab.is_explicit());
        let mut state = vec![0.7, -0.2];
        for k in 0..20 {
            let t = k as f64;
            let row = [
                0.02 + 0.001 * t.sin(),
                0.05 * (1.3 * t).sin(),
                0.05 * (0.7 * t).cos(),
            ];
            let direct = step_midpoint(&sys, &state, &row, &cfg).unwrap();
            let via_srk = step_srk(&sys, &tab, &state, &row, &cfg).unwrap();
            for i in 0..2 {
                assert_relative_eq!(direct[i], via_srk[i], epsilon = 5e-13);
            }
            state = direct;
        }
    }

    #[test]
    fn srk_erk2_tableau_matches_direct_erk2() {
        let sys = example1();
        let tab = Tableau::explicit_rk2();
        assert!(tab.is_explicit());
        let y = [0.4, 0.9];
        let row = [0.03, -0.08, 0.11];
        let direct = step_explicit_rk2(&sys, &y, &row).unwrap();
        let via_srk = step_srk(&sys, &tab, &y, &row, &SolverConfig::default()).unwrap();
        for i in 0..2 {
            assert_relative_eq!(direct[i], via_srk[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn tableau_parsing() {
        let tab = Tableau::parse("2\n0 0\n0.5 0\n0 1\n").unwrap();
        assert_eq!(tab, Tableau::explicit_rk2());
        assert!(Tableau::parse("").is_err());
        assert!(Tableau::parse("0\n").is_err());
        assert!(Tableau::parse("2\n0 0\n0.5 0\n0 1\n7\n").is_err());
        assert!(Tableau::parse("2\n0 0\n0.5\n0 1\n").is_err());
        assert!(Tableau::parse("1\n0.5\n").is_err()); // missing b row
    }

    #[test]
    fn integrate_shapes_and_determinism() {
        let sys = kubo(1.0, 0.9);
        let grid = Grid::new(1.0, 32).unwrap();
        let spec = NoiseSpec::new(0.5, 2).unwrap();
        let path = sample_fbm_path(&spec, &grid, 3).unwrap();
        let cfg = SolverConfig::default();
        let a = integrate(&sys, &Method::Midpoint, &[1.0, 0.0], &path, &cfg).unwrap();
        let b = integrate(&sys, &Method::Midpoint, &[1.0, 0.0], &path, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 33);
        assert!(integrate(&sys, &Method::Midpoint, &[1.0], &path, &cfg).is_err());

        // midpoint conserves the Kubo invariant to solver tolerance
        for y in &a.states {
            assert_relative_eq!(y[0] * y[0] + y[1] * y[1], 1.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn spark_dispatch_requires_kubo() {
        let sys = example1();
        let err = Method::SparkKubo.step(&sys, &[0.1, 0.2], &[0.1, 0.0, 0.0], &SolverConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn exact_kubo_flow_matches_closed_form_trajectory() {
        let grid = Grid::new(2.0, 16).unwrap();
        let spec = NoiseSpec::new(0.5, 2).unwrap();
        let path = sample_fbm_path(&spec, &grid, 5).unwrap();
        let params = KuboParams { a: 1.0, sigma: 0.9 };
        let flow = ExactKuboFlow { params, path: &path };
        let traj = run_flow(&flow, &[1.0, 0.0], &grid).unwrap();
        let expect = crate::systems::kubo_exact(params, &[1.0, 0.0], &grid, &path).unwrap();
        for (a, b) in traj.states.iter().zip(&expect.states) {
            assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
            assert_relative_eq!(a[1], b[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn fixed_point_contraction_property() {
        // linear contraction x <- q x + 1 converges iff |q| < 1; q = 0.9
        // needs ~300 sweeps to close 1e-14 from unit distance
        let cfg = SolverConfig {
            fp_max_iter: 400,
            ..SolverConfig::default()
        };
        for q in [0.1, 0.5, 0.9] {
            let got = fixed_point(&[0.0], &cfg, |x, out| out[0] = q * x[0] + 1.0).unwrap();
            // stopping on |update| <= tol leaves a residual tol * q / (1 - q)
            let bound = cfg.fp_tol * q / (1.0 - q) + 1e-15;
            assert_relative_eq!(got[0], 1.0 / (1.0 - q), epsilon = bound);
        }
        let err = fixed_point(&[1.0], &cfg, |x, out| out[0] = 2.5 * x[0] + 1.0);
        assert!(matches!(err, Err(Error::FixedPointDiverged { .. })));
    }
}

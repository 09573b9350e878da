//! Structure diagnostics: symplectic defects, phase-space areas, energy
//! drift along trajectories.

use nalgebra::DMatrix;

use crate::core::{PhasePoint, Trajectory};
use crate::integrators::{run_flow, PathFlow};
use crate::systems::HamiltonianSystem;
use crate::{Error, Result};

/// The canonical form on R^{2m} with coordinates (p_1..p_m, q_1..q_m):
/// J = [[0, I], [-I, 0]].
pub fn standard_symplectic_matrix(dim: usize) -> Result<DMatrix<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Domain(format!(
            "symplectic form needs even dimension, got {dim}"
        )));
    }
    let m = dim / 2;
    let mut j = DMatrix::zeros(dim, dim);
    for i in 0..m {
        j[(i, m + i)] = 1.0;
        j[(m + i, i)] = -1.0;
    }
    Ok(j)
}

/// Jacobian of a map by central differences, column by column.
pub fn jacobian_fd(
    map: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    y: &[f64],
    eps: f64,
) -> Result<DMatrix<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let n = y.len();
    let probe = map(y)?;
    let m = probe.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut yp = y.to_vec();
    let mut ym = y.to_vec();
    for c in 0..n {
        yp[c] = y[c] + eps;
        ym[c] = y[c] - eps;
        let fp = map(&yp)?;
        let fm = map(&ym)?;
        for r in 0..m {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * eps);
        }
        yp[c] = y[c];
        ym[c] = y[c];
    }
    Ok(jac)
}

/// || M^T J M - J ||_F: zero exactly when M is symplectic.
pub fn symplectic_defect(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Domain("symplectic defect needs a square matrix".into()));
    }
    let j = standard_symplectic_matrix(m.nrows())?;
    Ok((m.transpose() * &j * m - j).norm())
}

/// Symplectic defect of a one-step map at y, Jacobian by central
/// differences with the given eps.
pub fn step_symplectic_defect(
    step: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    y: &[f64],
    eps: f64,
) -> Result<f64> {
    symplectic_defect(&jacobian_fd(step, y, eps)?)
}

/// A planar polygon tracked vertex by vertex through phase space.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPolygon {
    pub vertices: Vec<PhasePoint>,
}

impl DomainPolygon {
    pub fn new(vertices: Vec<PhasePoint>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Domain("polygon needs at least 3 vertices".into()));
        }
        if vertices.iter().any(|v| v.len() != 2) {
            return Err(Error::Domain("polygon vertices must be planar".into()));
        }
        Ok(Self { vertices })
    }

    /// Regular n-gon inscribed in the circle of given center and radius,
    /// first vertex at angle 0, counterclockwise.
    pub fn circle(center: [f64; 2], radius: f64, n_vertices: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Domain("circle radius must be positive".into()));
        }
        if n_vertices < 3 {
            return Err(Error::Domain("circle needs at least 3 vertices".into()));
        }
        let verts = (0..n_vertices)
            .map(|k| {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / n_vertices as f64;
                vec![center[0] + radius * phi.cos(), center[1] + radius * phi.sin()]
            })
            .collect();
        Self::new(verts)
    }

    /// Signed shoelace area; positive for counterclockwise orientation.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = &self.vertices[i];
            let b = &self.vertices[(i + 1) % n];
            acc += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * acc
    }
}

/// Pushes every vertex through the flow and reports the polygon at every
/// macro node (n_steps + 1 snapshots including the initial one).
pub fn evolve_domain(flow: &dyn PathFlow, initial: &DomainPolygon) -> Result<Vec<DomainPolygon>> {
    if flow.dim() != 2 {
        return Err(Error::Domain("domain evolution is defined for planar flows".into()));
    }
    let n_steps = flow.n_steps();
    let mut snapshots =
        vec![
            DomainPolygon {
                vertices: Vec::with_capacity(initial.vertices.len())
            };
            n_steps + 1
        ];
    for vertex in &initial.vertices {
        let mut y = vertex.clone();
        snapshots[0].vertices.push(y.clone());
        for step in 0..n_steps {
            y = flow.advance(step, &y)?;
            snapshots[step + 1].vertices.push(y.clone());
        }
    }
    Ok(snapshots)
}

/// |H(y_n) - H(y_0)| along a trajectory, when the system has an energy.
pub fn energy_error_series(sys: &HamiltonianSystem, traj: &Trajectory) -> Option<Vec<f64>> {
    let initial = sys.energy(traj.initial())?;
    Some(
        traj.states
            .iter()
            .map(|y| (sys.energy(y).expect("energy defined") - initial).abs())
            .collect(),
    )
}

/// Convenience: trajectory of a single vertex (reuses the flow fold).
pub fn flow_trajectory(
    flow: &dyn PathFlow,
    z: &[f64],
    grid: &crate::core::Grid,
) -> Result<Trajectory> {
    run_flow(flow, z, grid)
}

//! Truncated modified equations for one-step methods.
//!
//! A method applied to dY = sum_l V_l(Y) dX^l expands as
//!
//! ```text
//!   Y = y + sum_{|a| >= 1} d_a(y) c^a,     c = (h, dX^1, ..., dX^d),
//! ```
//!
//! with c^a the monomial h^{a_0} (dX^1)^{a_1} ... (dX^d)^{a_d}. The
//! modified-equation coefficients f_a are defined by
//!
//! ```text
//!   f_a = d_a                                                  |a| = 1,
//!   f_a = d_a - sum_{i=2}^{|a|} (1/i!) sum_{(k1..ki)}
//!               D_{k1} ... D_{k_{i-1}} f_{ki}                  |a| >= 2,
//! ```
//!
//! where (D_k g)(y) = g'(y) f_k(y) and the inner sum runs over ordered
//! i-tuples of nonzero multi-indices summing to a. Truncating the series
//! at order N gives a flow whose time-h map shadows the method step.
//!
//! Two routes to the f_a live here: closed-form tables for the built-in
//! methods, and a numerical route that extracts the d_a from the step map
//! by polynomial fitting and then runs the recursion.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::core::{multi_indices_up_to, MultiIndex, Trajectory};
use crate::integrators::{run_flow, Method, PathFlow, SolverConfig};
use crate::noise::DriverPath;
use crate::systems::{HamiltonianSystem, KuboParams};
use crate::{Error, Result};

/// How many series orders to keep for a given macro step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum TruncationRule {
    /// Always this order.
    Fixed(u32),
    /// floor(h0 * h^(-(1/2 - epsilon))), at least 1, clamped to the cap.
    Auto { h0: f64, epsilon: f64 },
}

pub fn select_truncation_number(rule: &TruncationRule, h: f64, order_cap: u32) -> Result<u32> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    if order_cap == 0 {
        return Err(Error::Domain("order cap must be at least 1".into()));
    }
    match *rule {
        TruncationRule::Fixed(n) => {
            if n == 0 || n > order_cap {
                Err(Error::Domain(format!(
                    "truncation number {n} outside 1..={order_cap}"
                )))
            } else {
                Ok(n)
            }
        }
        TruncationRule::Auto { h0, epsilon } => {
            if !(h0 > 0.0) || !(epsilon > 0.0 && epsilon < 0.5) {
                return Err(Error::Domain(format!(
                    "auto truncation needs h0 > 0 and epsilon in (0, 0.5), got h0={h0}, epsilon={epsilon}"
                )));
            }
            if h >= 1.0 {
                return Err(Error::Domain(format!(
                    "auto truncation needs h < 1, got {h}"
                )));
            }
            let raw = (h0 * h.powf(-(0.5 - epsilon))).floor();
            let n = if raw < 1.0 { 1 } else { raw as u32 };
            Ok(n.clamp(1, order_cap))
        }
    }
}

/// c^a over a step row (h, dX^1, ..., dX^d).
pub fn monomial_value(alpha: &MultiIndex, row: &[f64]) -> f64 {
    alpha
        .entries()
        .iter()
        .zip(row)
        .map(|(&e, &c)| c.powi(e as i32))
        .product()
}

/// Distinct orderings of a small multiset.
fn distinct_permutations(items: &[usize]) -> Vec<Vec<usize>> {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(items.len());
    let mut used = vec![false; items.len()];
    fn rec(
        sorted: &[usize],
        used: &mut [bool],
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if current.len() == sorted.len() {
            out.push(current.clone());
            return;
        }
        let mut last: Option<usize> = None;
        for i in 0..sorted.len() {
            if used[i] || last == Some(sorted[i]) {
                continue;
            }
            last = Some(sorted[i]);
            used[i] = true;
            current.push(sorted[i]);
            rec(sorted, used, current, out);
            current.pop();
            used[i] = false;
        }
    }
    rec(&sorted, &mut used, &mut current, &mut out);
    out
}

/// Ordered tuples (k1, ..., k_parts) of nonzero indices with sum alpha.
pub fn ordered_decompositions(alpha: &MultiIndex, parts: usize) -> Vec<Vec<MultiIndex>> {
    fn sub_indices(rem: &[u32], min_order: u32, max_order: u32) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut cur = vec![0u32; rem.len()];
        fn rec(rem: &[u32], pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if pos == rem.len() {
                out.push(cur.clone());
                return;
            }
            for v in 0..=rem[pos] {
                cur[pos] = v;
                rec(rem, pos + 1, cur, out);
            }
            cur[pos] = 0;
        }
        rec(rem, 0, &mut cur, &mut out);
        out.retain(|e| {
            let o: u32 = e.iter().sum();
            o >= min_order && o <= max_order
        });
        out
    }

    fn rec(
        rem: &[u32],
        parts_left: usize,
        current: &mut Vec<MultiIndex>,
        out: &mut Vec<Vec<MultiIndex>>,
    ) {
        let rem_order: u32 = rem.iter().sum();
        if parts_left == 1 {
            if rem_order >= 1 {
                current.push(MultiIndex::new(rem.to_vec()).expect("nonempty"));
                out.push(current.clone());
                current.pop();
            }
            return;
        }
        // leave at least parts_left - 1 orders for the remaining slots
        let max_take = rem_order.saturating_sub(parts_left as u32 - 1);
        for beta in sub_indices(rem, 1, max_take) {
            let next: Vec<u32> = rem.iter().zip(&beta).map(|(r, b)| r - b).collect();
            current.push(MultiIndex::new(beta).expect("nonempty"));
            rec(&next, parts_left - 1, current, out);
            current.pop();
        }
    }

    let mut out = Vec::new();
    if parts >= 1 && alpha.order() >= parts as u32 {
        rec(alpha.entries(), parts, &mut Vec::new(), &mut out);
    }
    out
}

/// Which closed-form coefficient table to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TableKind {
    Midpoint,
    Erk2,
    SparkKubo,
}

/// Closed-form modified-equation coefficients for the built-in methods.
///
/// Midpoint (any system, orders to 4; even orders vanish):
///   |a|=1: V_l
///   |a|=3: sum over distinct orderings (l1,l2,l3) of
///          -1/24 V_{l3}''(V_{l2}, V_{l1}) + 1/12 V_{l3}'(V_{l2}' V_{l1})
///
/// Explicit RK2 (any system, orders to 4):
///   |a|=3: -1/24 V''(V,V) - 1/6 V'V'V   (same ordering convention)
///   |a|=4: +1/16 V_{l4}'(V_{l3}''(V_{l2}, V_{l1})) + 1/8 V'V'V'V
///
/// Spark on the Kubo oscillator: every f_a is linear, f_a(y) = M_a y,
/// with the 2x2 matrices tabulated to order 3.
pub struct CoefficientTable<'a> {
    sys: &'a HamiltonianSystem,
    kind: TableKind,
    order_cap: u32,
    spark: Option<KuboParams>,
}

impl<'a> CoefficientTable<'a> {
    pub fn new(sys: &'a HamiltonianSystem, kind: TableKind, order_cap: u32) -> Result<Self> {
        let max_cap = match kind {
            TableKind::Midpoint | TableKind::Erk2 => 4,
            TableKind::SparkKubo => 3,
        };
        if order_cap == 0 || order_cap > max_cap {
            return Err(Error::Domain(format!(
                "{kind:?} table supports orders 1..={max_cap}, got cap {order_cap}"
            )));
        }
        let spark = match kind {
            TableKind::SparkKubo => Some(sys.kubo_params().ok_or_else(|| {
                Error::Domain("spark-kubo table only applies to the kubo system".into())
            })?),
            _ => None,
        };
        Ok(Self {
            sys,
            kind,
            order_cap,
            spark,
        })
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn order_cap(&self) -> u32 {
        self.order_cap
    }

    pub fn system(&self) -> &HamiltonianSystem {
        self.sys
    }

    /// All indices the table covers, in graded order.
    pub fn indices(&self) -> Vec<MultiIndex> {
        multi_indices_up_to(self.sys.noise_dim(), self.order_cap)
    }

    /// f_a(y). Zero coefficients are returned as zero vectors.
    pub fn eval_f(&self, alpha: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        let dim = self.sys.dim();
        if y.len() != dim {
            return Err(Error::Domain("state dimension mismatch".into()));
        }
        if alpha.noise_dim() != self.sys.noise_dim() {
            return Err(Error::Domain("multi-index dimension mismatch".into()));
        }
        let order = alpha.order();
        if order == 0 || order > self.order_cap {
            return Err(Error::Domain(format!(
                "index order {order} outside 1..={}",
                self.order_cap
            )));
        }
        if self.kind == TableKind::SparkKubo {
            let params = self.spark.as_ref().expect("validated");
            let m = spark_f_matrix(params, alpha)?;
            return Ok(vec![
                m[0][0] * y[0] + m[0][1] * y[1],
                m[1][0] * y[0] + m[1][1] * y[1],
            ]);
        }
        match order {
            1 => Ok(self.sys.v(alpha.first_active()?, y)),
            2 => Ok(vec![0.0; dim]),
            3 => {
                let chain_coef = match self.kind {
                    TableKind::Midpoint => 1.0 / 12.0,
                    TableKind::Erk2 => -1.0 / 6.0,
                    TableKind::SparkKubo => unreachable!(),
                };
                let mut acc = vec![0.0; dim];
                let mut t1 = vec![0.0; dim];
                let mut t2 = vec![0.0; dim];
                for perm in distinct_permutations(&alpha.component_multiset()) {
                    let (l1, l2, l3) = (perm[0], perm[1], perm[2]);
                    let v1 = self.sys.v(l1, y);
                    let v2 = self.sys.v(l2, y);
                    self.sys.eval_d2v(l3, y, &v2, &v1, &mut t1);
                    self.sys.eval_dv(l2, y, &v1, &mut t2);
                    let mut t3 = vec![0.0; dim];
                    self.sys.eval_dv(l3, y, &t2, &mut t3);
                    for i in 0..dim {
                        acc[i] += -t1[i] / 24.0 + chain_coef * t3[i];
                    }
                }
                Ok(acc)
            }
            4 => match self.kind {
                TableKind::Midpoint => Ok(vec![0.0; dim]),
                TableKind::Erk2 => {
                    let mut acc = vec![0.0; dim];
                    let mut t1 = vec![0.0; dim];
                    let mut t2 = vec![0.0; dim];
                    for perm in distinct_permutations(&alpha.component_multiset()) {
                        let (l1, l2, l3, l4) = (perm[0], perm[1], perm[2], perm[3]);
                        let v1 = self.sys.v(l1, y);
                        let v2 = self.sys.v(l2, y);
                        self.sys.eval_d2v(l3, y, &v2, &v1, &mut t1);
                        let mut ta = vec![0.0; dim];
                        self.sys.eval_dv(l4, y, &t1, &mut ta);
                        self.sys.eval_dv(l2, y, &v1, &mut t2);
                        let mut tb = vec![0.0; dim];
                        self.sys.eval_dv(l3, y, &t2, &mut tb);
                        let mut tc = vec![0.0; dim];
                        self.sys.eval_dv(l4, y, &tb, &mut tc);
                        for i in 0..dim {
                            acc[i] += ta[i] / 16.0 + tc[i] / 8.0;
                        }
                    }
                    Ok(acc)
                }
                TableKind::SparkKubo => unreachable!(),
            },
            _ => unreachable!("cap validated at construction"),
        }
    }

    /// Truncated modified velocity (1/h) sum_{|a| <= n_tilde} f_a(y) c^a,
    /// evaluated in collapsed form through the combined field W = sum c_l V_l.
    pub fn velocity(&self, y: &[f64], row: &[f64], n_tilde: u32) -> Result<Vec<f64>> {
        let dim = self.sys.dim();
        if y.len() != dim || row.len() != self.sys.noise_dim() + 1 {
            return Err(Error::Domain("velocity shape mismatch".into()));
        }
        if n_tilde == 0 || n_tilde > self.order_cap {
            return Err(Error::Domain(format!(
                "truncation number {n_tilde} outside 1..={}",
                self.order_cap
            )));
        }
        let h = row[0];
        if !(h > 0.0) {
            return Err(Error::Domain(format!("step size must be positive, got {h}")));
        }
        let mut scratch = vec![0.0; dim];
        let mut acc = vec![0.0; dim];
        if self.kind == TableKind::SparkKubo {
            let mut m = [[0.0f64; 2]; 2];
            let params = self.spark.as_ref().expect("validated");
            for alpha in multi_indices_up_to(2, n_tilde.min(3)) {
                let ma = spark_f_matrix(params, &alpha)?;
                let mono = monomial_value(&alpha, row);
                for r in 0..2 {
                    for c in 0..2 {
                        m[r][c] += mono * ma[r][c];
                    }
                }
            }
            acc[0] = m[0][0] * y[0] + m[0][1] * y[1];
            acc[1] = m[1][0] * y[0] + m[1][1] * y[1];
        } else {
            let mut w = vec![0.0; dim];
            self.sys.eval_w(y, row, &mut w, &mut scratch);
            acc.copy_from_slice(&w);
            if n_tilde >= 3 {
                // order-3 cluster: sum over all ordered triples collapses to
                // jets of W
                let mut ww = vec![0.0; dim];
                self.sys.eval_d2w(y, row, &w, &w, &mut ww, &mut scratch);
                let mut dw = vec![0.0; dim];
                self.sys.eval_dw(y, row, &w, &mut dw, &mut scratch);
                let mut ddw = vec![0.0; dim];
                self.sys.eval_dw(y, row, &dw, &mut ddw, &mut scratch);
                let chain_coef = match self.kind {
                    TableKind::Midpoint => 1.0 / 12.0,
                    TableKind::Erk2 => -1.0 / 6.0,
                    TableKind::SparkKubo => unreachable!(),
                };
                for i in 0..dim {
                    acc[i] += -ww[i] / 24.0 + chain_coef * ddw[i];
                }
                if n_tilde >= 4 && self.kind == TableKind::Erk2 {
                    let mut dww = vec![0.0; dim];
                    self.sys.eval_dw(y, row, &ww, &mut dww, &mut scratch);
                    let mut dddw = vec![0.0; dim];
                    self.sys.eval_dw(y, row, &ddw, &mut dddw, &mut scratch);
                    for i in 0..dim {
                        acc[i] += dww[i] / 16.0 + dddw[i] / 8.0;
                    }
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= h;
        }
        Ok(acc)
    }

    /// Same velocity summed index by index; reference for the collapsed form.
    pub fn velocity_by_terms(&self, y: &[f64], row: &[f64], n_tilde: u32) -> Result<Vec<f64>> {
        if n_tilde == 0 || n_tilde > self.order_cap {
            return Err(Error::Domain(format!(
                "truncation number {n_tilde} outside 1..={}",
                self.order_cap
            )));
        }
        let h = row[0];
        if !(h > 0.0) {
            return Err(Error::Domain(format!("step size must be positive, got {h}")));
        }
        let mut acc = vec![0.0; self.sys.dim()];
        for alpha in multi_indices_up_to(self.sys.noise_dim(), n_tilde) {
            let f = self.eval_f(&alpha, y)?;
            let mono = monomial_value(&alpha, row);
            for i in 0..acc.len() {
                acc[i] += f[i] * mono;
            }
        }
        for a in acc.iter_mut() {
            *a /= h;
        }
        Ok(acc)
    }
}

/// Spark f_a = M_a y on the Kubo oscillator, orders 1..=3 over (h, dX1, dX2).
fn spark_f_matrix(params: &KuboParams, alpha: &MultiIndex) -> Result<[[f64; 2]; 2]> {
    if alpha.noise_dim() != 2 {
        return Err(Error::Domain("spark table is indexed over two noise components".into()));
    }
    let (a, s) = (params.a, params.sigma);
    let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
    let e = alpha.entries();
    let m = match (e[0], e[1], e[2]) {
        (1, 0, 0) => [[-s2, -a], [a, s2]],
        (0, 1, 0) | (0, 0, 1) => [[0.0, -s], [s, 0.0]],
        (2, 0, 0) => {
            let g = (s4 + a * a) / 2.0;
            [[g, a * s2], [-a * s2, -g]]
        }
        (1, 1, 0) | (1, 0, 1) => [[a * s, s3], [-s3, -a * s]],
        (0, 2, 0) | (0, 0, 2) => [[s2 / 2.0, 0.0], [0.0, -s2 / 2.0]],
        (0, 1, 1) => [[s2, 0.0], [0.0, -s2]],
        (3, 0, 0) => {
            let g = s4 * s2 / 3.0 + 2.0 * a * a * s2 / 3.0;
            let off = 5.0 * a * s4 / 6.0 + a * a * a / 6.0;
            [[-g, -off], [off, g]]
        }
        (2, 1, 0) | (2, 0, 1) => {
            let g = 4.0 * a * s3 / 3.0;
            let off = 5.0 * s4 * s / 6.0 + a * a * s / 2.0;
            [[-g, -off], [off, g]]
        }
        // half the (1,1,1) entry: the step sees the noise only through
        // dX1 + dX2, so the h dXl^2 and h dX1 dX2 coefficients are locked
        (1, 2, 0) | (1, 0, 2) => [[-2.0 * s4 / 3.0, -a * s2 / 2.0], [a * s2 / 2.0, 2.0 * s4 / 3.0]],
        (1, 1, 1) => [[-4.0 * s4 / 3.0, -a * s2], [a * s2, 4.0 * s4 / 3.0]],
        (0, 3, 0) | (0, 0, 3) => [[0.0, -s3 / 6.0], [s3 / 6.0, 0.0]],
        (0, 2, 1) | (0, 1, 2) => [[0.0, -s3 / 2.0], [s3 / 2.0, 0.0]],
        _ => {
            return Err(Error::Domain(format!(
                "spark table has no entry for index {alpha} (orders 1..=3 only)"
            )))
        }
    };
    Ok(m)
}

/// Result of integrating the truncated modified equation along a path.
#[derive(Clone, Debug)]
pub struct ModifiedSolution {
    pub trajectory: Trajectory,
    pub n_tilde: u32,
    pub substeps_per_step: usize,
}

/// The truncated modified flow as a path flow: per macro step the row is
/// frozen and dy/dt = velocity(y) is integrated with classical RK4 in
/// `substeps` micro steps.
pub struct ModifiedFlow<'a> {
    pub table: &'a CoefficientTable<'a>,
    pub path: &'a DriverPath,
    pub n_tilde: u32,
    pub substeps: usize,
}

impl PathFlow for ModifiedFlow<'_> {
    fn dim(&self) -> usize {
        self.table.system().dim()
    }

    fn n_steps(&self) -> usize {
        self.path.grid().n_steps()
    }

    fn advance(&self, step: usize, y: &[f64]) -> Result<Vec<f64>> {
        let row = self.path.step_row(step);
        let h = row[0];
        let dim = y.len();
        let dt = h / self.substeps as f64;
        let mut cur = y.to_vec();
        for _ in 0..self.substeps {
            let k1 = self.table.velocity(&cur, &row, self.n_tilde)?;
            let y2: Vec<f64> = (0..dim).map(|i| cur[i] + 0.5 * dt * k1[i]).collect();
            let k2 = self.table.velocity(&y2, &row, self.n_tilde)?;
            let y3: Vec<f64> = (0..dim).map(|i| cur[i] + 0.5 * dt * k2[i]).collect();
            let k3 = self.table.velocity(&y3, &row, self.n_tilde)?;
            let y4: Vec<f64> = (0..dim).map(|i| cur[i] + dt * k3[i]).collect();
            let k4 = self.table.velocity(&y4, &row, self.n_tilde)?;
            for i in 0..dim {
                cur[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        Ok(cur)
    }
}

/// Integrates the truncated modified equation along a realized path. The
/// micro step delta must divide the macro step.
pub fn solve_truncated_modified(
    table: &CoefficientTable,
    path: &DriverPath,
    z: &[f64],
    rule: &TruncationRule,
    delta: f64,
) -> Result<ModifiedSolution> {
    let h = path.grid().h();
    let n_tilde = select_truncation_number(rule, h, table.order_cap())?;
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("micro step must be positive, got {delta}")));
    }
    let ratio = h / delta;
    let substeps = ratio.round();
    if substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
        return Err(Error::Domain(format!(
            "micro step {delta} does not divide the macro step {h}"
        )));
    }
    let flow = ModifiedFlow {
        table,
        path,
        n_tilde,
        substeps: substeps as usize,
    };
    let trajectory = run_flow(&flow, z, path.grid())?;
    Ok(ModifiedSolution {
        trajectory,
        n_tilde,
        substeps_per_step: substeps as usize,
    })
}

/// A one-step map y -> Phi(y; h, dX) whose expansion coefficients can be
/// extracted numerically.
pub trait OneStepMap: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn apply(&self, y: &[f64], row: &[f64]) -> Result<Vec<f64>>;
}

/// A built-in method as a one-step map.
pub struct MethodMap<'a> {
    pub sys: &'a HamiltonianSystem,
    pub method: &'a Method,
    pub cfg: SolverConfig,
}

impl<'a> MethodMap<'a> {
    /// For extraction, implicit solves run a fixed sweep count so that the
    /// map is smooth in its inputs; tolerance-based stopping would inject
    /// order-1e-14 jumps that finite differences amplify.
    pub fn for_extraction(sys: &'a HamiltonianSystem, method: &'a Method) -> Self {
        Self {
            sys,
            method,
            cfg: SolverConfig {
                fixed_sweeps: Some(40),
                ..SolverConfig::default()
            },
        }
    }
}

impl OneStepMap for MethodMap<'_> {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    fn noise_dim(&self) -> usize {
        self.sys.noise_dim()
    }

    fn apply(&self, y: &[f64], row: &[f64]) -> Result<Vec<f64>> {
        self.method.step(self.sys, y, row, &self.cfg)
    }
}

/// Stencil for extracting the d_a by joint polynomial least squares.
///
/// The fit runs over all monomials of order 1..=(order_cap + guard_orders);
/// the guard orders absorb genuine high-order content of the map so that it
/// does not alias into the reported coefficients. Samples are rows t*c for
/// random unit directions c and Chebyshev-spaced magnitudes t. Magnitudes
/// reaching 1e-1 look large but are what conditions the order separation;
/// narrower ranges lose the high orders to cancellation.
#[derive(Clone, Debug, Serialize)]
pub struct ExtractionConfig {
    pub guard_orders: u32,
    pub t_min: f64,
    pub t_max: f64,
    pub magnitudes: usize,
    /// Direction count; default covers the largest fitted order.
    pub directions: Option<usize>,
    pub seed: u64,
    pub max_rel_residual: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            guard_orders: 5,
            t_min: 1e-3,
            t_max: 1e-1,
            magnitudes: 20,
            directions: None,
            seed: 0x5eed_2026,
            max_rel_residual: 1e-8,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Fits Phi(y; t c) - y to a polynomial in t c and returns the coefficients
/// of the monomials with order <= order_cap, keyed by multi-index.
pub fn extract_d_alpha(
    map: &dyn OneStepMap,
    y: &[f64],
    order_cap: u32,
    cfg: &ExtractionConfig,
) -> Result<BTreeMap<MultiIndex, Vec<f64>>> {
    let dim = map.dim();
    let noise_dim = map.noise_dim();
    if y.len() != dim {
        return Err(Error::Domain("state dimension mismatch".into()));
    }
    if order_cap == 0 {
        return Err(Error::Domain("order cap must be at least 1".into()));
    }
    if !(cfg.t_min > 0.0 && cfg.t_min < cfg.t_max) {
        return Err(Error::Domain("extraction needs 0 < t_min < t_max".into()));
    }
    let fit_cap = order_cap + cfg.guard_orders;
    if cfg.magnitudes < fit_cap as usize + 1 {
        return Err(Error::Domain(format!(
            "need at least {} magnitudes to separate {fit_cap} orders",
            fit_cap + 1
        )));
    }
    let vars = noise_dim + 1;
    let monos = multi_indices_up_to(noise_dim, fit_cap);
    let n_mono = monos.len();
    let top_count = binomial(fit_cap as usize + vars - 1, vars - 1);
    let n_dirs = cfg.directions.unwrap_or_else(|| (top_count + 5).max(40));
    let n_samples = n_dirs * cfg.magnitudes;
    if n_samples < 2 * n_mono {
        return Err(Error::Domain(format!(
            "stencil of {n_samples} samples is too small for {n_mono} monomials"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_dirs);
    while dirs.len() < n_dirs {
        let c: Vec<f64> = (0..vars)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(c.iter().map(|x| x / norm).collect());
        }
    }
    let mid = 0.5 * (cfg.t_min + cfg.t_max);
    let half = 0.5 * (cfg.t_max - cfg.t_min);
    let m = cfg.magnitudes;
    let mags: Vec<f64> = (0..m)
        .map(|j| mid + half * (std::f64::consts::PI * (2 * j + 1) as f64 / (2 * m) as f64).cos())
        .collect();

    let mut design = DMatrix::zeros(n_samples, n_mono);
    let mut rhs = DMatrix::zeros(n_samples, dim);
    let mut row = vec![0.0; vars];
    let mut powers = vec![vec![0.0f64; fit_cap as usize + 1]; vars];
    let mut s = 0usize;
    for c in &dirs {
        for &t in &mags {
            for v in 0..vars {
                row[v] = t * c[v];
                powers[v][0] = 1.0;
                for p in 1..=fit_cap as usize {
                    powers[v][p] = powers[v][p - 1] * row[v];
                }
            }
            let image = map.apply(y, &row)?;
            for i in 0..dim {
                rhs[(s, i)] = image[i] - y[i];
            }
            for (j, alpha) in monos.iter().enumerate() {
                let mut val = 1.0;
                for (v, &e) in alpha.entries().iter().enumerate() {
                    val *= powers[v][e as usize];
                }
                design[(s, j)] = val;
            }
            s += 1;
        }
    }

    // column normalization keeps the cross-order scales comparable
    let mut col_scale = vec![0.0f64; n_mono];
    for j in 0..n_mono {
        let mut mx = 0.0f64;
        for i in 0..n_samples {
            mx = mx.max(design[(i, j)].abs());
        }
        if mx == 0.0 {
            return Err(Error::Extraction(format!(
                "degenerate stencil: monomial {} never sampled",
                monos[j]
            )));
        }
        col_scale[j] = mx;
        for i in 0..n_samples {
            design[(i, j)] /= mx;
        }
    }

    let svd = design.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let beta = svd
        .solve(&rhs, s_max * 1e-12)
        .map_err(|e| Error::Extraction(format!("least-squares solve failed: {e}")))?;

    let residual = (&design * &beta - &rhs).norm();
    let rhs_norm = rhs.norm().max(1e-300);
    if residual / rhs_norm > cfg.max_rel_residual {
        return Err(Error::Extraction(format!(
            "stencil fit residual {:.3e} exceeds {:.3e}; the map does not admit \
             a polynomial expansion at this accuracy",
            residual / rhs_norm,
            cfg.max_rel_residual
        )));
    }

    let mut out = BTreeMap::new();
    for (j, alpha) in monos.iter().enumerate() {
        if alpha.order() <= order_cap {
            let coef: Vec<f64> = (0..dim).map(|i| beta[(j, i)] / col_scale[j]).collect();
            out.insert(alpha.clone(), coef);
        }
    }
    Ok(out)
}

type DMap = BTreeMap<MultiIndex, Vec<f64>>;

/// Supplies d_a maps at arbitrary points, typically by stencil extraction.
pub type DProvider<'a> = Box<dyn Fn(&[f64]) -> Result<DMap> + Send + Sync + 'a>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OrderOneMode {
    /// d_{e_l} agrees with V_l: chains may use the analytic field jets.
    Fields,
    /// Order-one coefficients differ from the fields (e.g. spark): chains
    /// differentiate the provided coefficients instead. Limits the cap to 3
    /// because order 4 would need third derivatives of extracted data.
    Provider,
}

struct EngineState {
    mode: Option<OrderOneMode>,
    d_cache: HashMap<Vec<u64>, Arc<DMap>>,
    f_cache: HashMap<(MultiIndex, Vec<u64>), Vec<f64>>,
}

/// Evaluates the f_a recursion from a d_a provider.
///
/// Derivatives of extracted coefficients are taken by at most one level of
/// finite differencing (first derivatives by central differences, second
/// by a fourth-order five-point stencil plus polarization); deeper
/// derivative structure is expanded analytically through the field jets.
/// Stacked differences over extracted data would amplify the extraction
/// noise past usable accuracy.
pub struct RecursionEngine<'a> {
    provider: DProvider<'a>,
    sys: &'a HamiltonianSystem,
    order_cap: u32,
    eps_first: f64,
    eps_second: f64,
    eps_smooth: f64,
    consistency_tol: f64,
    state: Mutex<EngineState>,
}

/// Builds the recursion over an arbitrary provider.
pub fn recursion_f_from_d<'a>(
    provider: DProvider<'a>,
    sys: &'a HamiltonianSystem,
    order_cap: u32,
) -> Result<RecursionEngine<'a>> {
    if order_cap == 0 || order_cap > 4 {
        return Err(Error::Domain(format!(
            "recursion supports orders 1..=4, got cap {order_cap}"
        )));
    }
    Ok(RecursionEngine {
        provider,
        sys,
        order_cap,
        eps_first: 1e-4,
        eps_second: 3e-3,
        eps_smooth: 1e-5,
        consistency_tol: 1e-6,
        state: Mutex::new(EngineState {
            mode: None,
            d_cache: HashMap::new(),
            f_cache: HashMap::new(),
        }),
    })
}

impl<'a> RecursionEngine<'a> {
    /// Extraction-backed engine for a built-in method.
    pub fn from_method(
        sys: &'a HamiltonianSystem,
        method: &'a Method,
        order_cap: u32,
        extraction: ExtractionConfig,
    ) -> Result<Self> {
        let map = MethodMap::for_extraction(sys, method);
        let provider: DProvider<'a> =
            Box::new(move |y| extract_d_alpha(&map, y, order_cap, &extraction));
        recursion_f_from_d(provider, sys, order_cap)
    }

    pub fn order_cap(&self) -> u32 {
        self.order_cap
    }

    /// f_a(y) for all indices up to the cap.
    pub fn eval_all(&self, y: &[f64]) -> Result<DMap> {
        let mut out = BTreeMap::new();
        for alpha in multi_indices_up_to(self.sys.noise_dim(), self.order_cap) {
            out.insert(alpha.clone(), self.eval_f(&alpha, y)?);
        }
        Ok(out)
    }

    pub fn eval_f(&self, alpha: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        if alpha.noise_dim() != self.sys.noise_dim() {
            return Err(Error::Domain("multi-index dimension mismatch".into()));
        }
        if y.len() != self.sys.dim() {
            return Err(Error::Domain("state dimension mismatch".into()));
        }
        let order = alpha.order();
        if order == 0 || order > self.order_cap {
            return Err(Error::Domain(format!(
                "index order {order} outside 1..={}",
                self.order_cap
            )));
        }
        let key = (alpha.clone(), point_key(y));
        if let Some(hit) = self.state.lock().expect("engine lock").f_cache.get(&key) {
            return Ok(hit.clone());
        }
        let value = match order {
            1 => self.d_value(alpha, y)?,
            2 => self.f2_val(alpha, y)?,
            3 => self.f3_val(alpha, y)?,
            4 => self.f4_val(alpha, y)?,
            _ => unreachable!(),
        };
        self.state
            .lock()
            .expect("engine lock")
            .f_cache
            .insert(key, value.clone());
        Ok(value)
    }

    fn d_at(&self, y: &[f64]) -> Result<Arc<DMap>> {
        let key = point_key(y);
        if let Some(hit) = self.state.lock().expect("engine lock").d_cache.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let d = Arc::new((self.provider)(y)?);
        // order-one consistency decides (then polices) the chain mode
        let mut consistent = true;
        for l in 0..=self.sys.noise_dim() {
            let e = unit_index(l, self.sys.noise_dim());
            let dl = d.get(&e).ok_or_else(|| {
                Error::Extraction(format!("provider did not supply d for index {e}"))
            })?;
            if dl.len() != self.sys.dim() {
                return Err(Error::Extraction(format!(
                    "provider returned a coefficient of wrong dimension for {e}"
                )));
            }
            let vl = self.sys.v(l, y);
            let scale = 1.0 + vl.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let diff = dl
                .iter()
                .zip(&vl)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff > self.consistency_tol * scale {
                consistent = false;
            }
        }
        let mut state = self.state.lock().expect("engine lock");
        match state.mode {
            None => {
                state.mode = Some(if consistent {
                    OrderOneMode::Fields
                } else {
                    OrderOneMode::Provider
                });
            }
            Some(OrderOneMode::Fields) if !consistent => {
                return Err(Error::Extraction(
                    "order-one coefficients drifted away from the system fields".into(),
                ));
            }
            _ => {}
        }
        state.d_cache.insert(key, Arc::clone(&d));
        Ok(d)
    }

    fn mode(&self) -> OrderOneMode {
        self.state
            .lock()
            .expect("engine lock")
            .mode
            .expect("mode decided at first extraction")
    }

    fn d_value(&self, alpha: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        self.d_at(y)?
            .get(alpha)
            .cloned()
            .ok_or_else(|| Error::Extraction(format!("provider did not supply d for index {alpha}")))
    }

    /// d/dt d_a(y + t v) at t = 0, one central difference over the provider.
    fn d_dir(&self, alpha: &MultiIndex, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let n = l2(v);
        if n < 1e-300 {
            return Ok(vec![0.0; self.sys.dim()]);
        }
        let eps = self.eps_first;
        let yp = shifted(y, v, eps / n);
        let ym = shifted(y, v, -eps / n);
        let dp = self.d_value(alpha, &yp)?;
        let dm = self.d_value(alpha, &ym)?;
        Ok(dp
            .iter()
            .zip(&dm)
            .map(|(p, m)| (p - m) * n / (2.0 * eps))
            .collect())
    }

    /// d_a''(y)(z, z) by the fourth-order five-point stencil.
    fn d_second_axis(&self, alpha: &MultiIndex, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let n = l2(z);
        if n < 1e-300 {
            return Ok(vec![0.0; self.sys.dim()]);
        }
        let eps = self.eps_second;
        let f0 = self.d_value(alpha, y)?;
        let f1p = self.d_value(alpha, &shifted(y, z, eps / n))?;
        let f1m = self.d_value(alpha, &shifted(y, z, -eps / n))?;
        let f2p = self.d_value(alpha, &shifted(y, z, 2.0 * eps / n))?;
        let f2m = self.d_value(alpha, &shifted(y, z, -2.0 * eps / n))?;
        Ok((0..f0.len())
            .map(|i| {
                (-f2p[i] + 16.0 * f1p[i] - 30.0 * f0[i] + 16.0 * f1m[i] - f2m[i])
                    / (12.0 * eps * eps)
                    * n
                    * n
            })
            .collect())
    }

    /// d_a''(y)(v, w) by polarization over axis stencils.
    fn d_second(&self, alpha: &MultiIndex, y: &[f64], v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let vw: Vec<f64> = v.iter().zip(w).map(|(a, b)| a + b).collect();
        let svw = self.d_second_axis(alpha, y, &vw)?;
        let sv = self.d_second_axis(alpha, y, v)?;
        let sw = self.d_second_axis(alpha, y, w)?;
        Ok((0..svw.len())
            .map(|i| 0.5 * (svw[i] - sv[i] - sw[i]))
            .collect())
    }

    // order-one jets: analytic fields when consistent, provider stencils
    // otherwise

    fn g_val(&self, l: usize, y: &[f64]) -> Result<Vec<f64>> {
        match self.mode() {
            OrderOneMode::Fields => Ok(self.sys.v(l, y)),
            OrderOneMode::Provider => self.d_value(&unit_index(l, self.sys.noise_dim()), y),
        }
    }

    fn g_dir(&self, l: usize, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        match self.mode() {
            OrderOneMode::Fields => {
                let mut out = vec![0.0; self.sys.dim()];
                self.sys.eval_dv(l, y, v, &mut out);
                Ok(out)
            }
            OrderOneMode::Provider => self.d_dir(&unit_index(l, self.sys.noise_dim()), y, v),
        }
    }

    fn g_sec(&self, l: usize, y: &[f64], v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        match self.mode() {
            OrderOneMode::Fields => {
                let mut out = vec![0.0; self.sys.dim()];
                self.sys.eval_d2v(l, y, v, w, &mut out);
                Ok(out)
            }
            OrderOneMode::Provider => self.d_second(&unit_index(l, self.sys.noise_dim()), y, v, w),
        }
    }

    /// f_k(y) as used inside chains; order one goes through the jet source.
    fn chain_f_val(&self, k: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        if k.order() == 1 {
            self.g_val(k.first_active()?, y)
        } else {
            self.eval_f(k, y)
        }
    }

    /// Central difference along v of a vector function, one level only.
    fn fd_dir(
        &self,
        y: &[f64],
        v: &[f64],
        eps: f64,
        f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let n = l2(v);
        if n < 1e-300 {
            return Ok(vec![0.0; self.sys.dim()]);
        }
        let fp = f(&shifted(y, v, eps / n))?;
        let fm = f(&shifted(y, v, -eps / n))?;
        Ok(fp
            .iter()
            .zip(&fm)
            .map(|(p, m)| (p - m) * n / (2.0 * eps))
            .collect())
    }

    fn f2_val(&self, k2: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        let mut acc = self.d_value(k2, y)?;
        for pair in ordered_decompositions(k2, 2) {
            let (la, lb) = (pair[0].first_active()?, pair[1].first_active()?);
            let fa = self.g_val(la, y)?;
            let k = self.g_dir(lb, y, &fa)?;
            for i in 0..acc.len() {
                acc[i] -= 0.5 * k[i];
            }
        }
        Ok(acc)
    }

    /// f_{k2}'(y) v for |k2| = 2.
    fn f2_dir(&self, k2: &MultiIndex, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut acc = self.d_dir(k2, y, v)?;
        for pair in ordered_decompositions(k2, 2) {
            let (la, lb) = (pair[0].first_active()?, pair[1].first_active()?);
            let fa = self.g_val(la, y)?;
            let t1 = self.g_sec(lb, y, &fa, v)?;
            let dav = self.g_dir(la, y, v)?;
            let t2 = self.g_dir(lb, y, &dav)?;
            for i in 0..acc.len() {
                acc[i] -= 0.5 * (t1[i] + t2[i]);
            }
        }
        Ok(acc)
    }

    /// f_{k2}''(y)(z, w) for |k2| = 2; needs the analytic jet mode.
    fn f2_sec(&self, k2: &MultiIndex, y: &[f64], z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        debug_assert_eq!(self.mode(), OrderOneMode::Fields);
        let mut acc = self.d_second(k2, y, z, w)?;
        let w_owned = w.to_vec();
        for pair in ordered_decompositions(k2, 2) {
            let (la, lb) = (pair[0].first_active()?, pair[1].first_active()?);
            // K(x) = V_lb'(x) V_la(x); K''(z, w) by differencing K'(.)(w)
            // along z, staying one difference deep
            let kprime_w = |x: &[f64]| -> Result<Vec<f64>> {
                let fa = self.g_val(la, x)?;
                let t1 = self.g_sec(lb, x, &fa, &w_owned)?;
                let daw = self.g_dir(la, x, &w_owned)?;
                let t2 = self.g_dir(lb, x, &daw)?;
                Ok(t1.iter().zip(&t2).map(|(a, b)| a + b).collect())
            };
            let ksec = self.fd_dir(y, z, self.eps_smooth, &kprime_w)?;
            for i in 0..acc.len() {
                acc[i] -= 0.5 * ksec[i];
            }
        }
        Ok(acc)
    }

    /// d/dt [D_{ka} f_{kb}](y + t v) at t = 0, |ka| + |kb| <= 3.
    fn dchain2(&self, ka: &MultiIndex, kb: &MultiIndex, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let fa = self.chain_f_val(ka, y)?;
        // f_kb''(f_ka, v)
        let t1 = match kb.order() {
            1 => self.g_sec(kb.first_active()?, y, &fa, v)?,
            2 => self.f2_sec(kb, y, &fa, v)?,
            o => {
                return Err(Error::Domain(format!(
                    "chain differentiation not available for order-{o} tail"
                )))
            }
        };
        // f_ka'(v)
        let dav = match ka.order() {
            1 => self.g_dir(ka.first_active()?, y, v)?,
            2 => self.f2_dir(ka, y, v)?,
            o => {
                return Err(Error::Domain(format!(
                    "chain differentiation not available for order-{o} head"
                )))
            }
        };
        // f_kb'(f_ka' v)
        let t2 = match kb.order() {
            1 => self.g_dir(kb.first_active()?, y, &dav)?,
            2 => self.f2_dir(kb, y, &dav)?,
            _ => unreachable!(),
        };
        Ok(t1.iter().zip(&t2).map(|(a, b)| a + b).collect())
    }

    /// D_a D_b f_{e_c} evaluated at x, all parts of order one.
    fn chain3_units(&self, la: usize, lb: usize, lc: usize, x: &[f64]) -> Result<Vec<f64>> {
        let va = self.g_val(la, x)?;
        let vb = self.g_val(lb, x)?;
        let t1 = self.g_sec(lc, x, &vb, &va)?;
        let dba = self.g_dir(lb, x, &va)?;
        let t2 = self.g_dir(lc, x, &dba)?;
        Ok(t1.iter().zip(&t2).map(|(a, b)| a + b).collect())
    }

    fn f3_val(&self, k3: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        let mut acc = self.d_value(k3, y)?;
        for pair in ordered_decompositions(k3, 2) {
            let (k1, k2) = (&pair[0], &pair[1]);
            let f1 = self.chain_f_val(k1, y)?;
            // D_{k1} f_{k2} = f_{k2}'(y) f_{k1}(y)
            let chain = match k2.order() {
                1 => self.g_dir(k2.first_active()?, y, &f1)?,
                2 => self.f2_dir(k2, y, &f1)?,
                _ => unreachable!("order split of a 3-index"),
            };
            for i in 0..acc.len() {
                acc[i] -= 0.5 * chain[i];
            }
        }
        for triple in ordered_decompositions(k3, 3) {
            let f1 = self.chain_f_val(&triple[0], y)?;
            let chain = self.dchain2(&triple[1], &triple[2], y, &f1)?;
            for i in 0..acc.len() {
                acc[i] -= chain[i] / 6.0;
            }
        }
        Ok(acc)
    }

    /// f_{k3}'(y) v for |k3| = 3; needs the analytic jet mode.
    fn f3_dir(&self, k3: &MultiIndex, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        debug_assert_eq!(self.mode(), OrderOneMode::Fields);
        let mut acc = self.d_dir(k3, y, v)?;
        for pair in ordered_decompositions(k3, 2) {
            let chain = self.dchain2(&pair[0], &pair[1], y, v)?;
            for i in 0..acc.len() {
                acc[i] -= 0.5 * chain[i];
            }
        }
        for triple in ordered_decompositions(k3, 3) {
            let (la, lb, lc) = (
                triple[0].first_active()?,
                triple[1].first_active()?,
                triple[2].first_active()?,
            );
            let chain3fn = |x: &[f64]| self.chain3_units(la, lb, lc, x);
            let dchain = self.fd_dir(y, v, self.eps_smooth, &chain3fn)?;
            for i in 0..acc.len() {
                acc[i] -= dchain[i] / 6.0;
            }
        }
        Ok(acc)
    }

    fn f4_val(&self, k4: &MultiIndex, y: &[f64]) -> Result<Vec<f64>> {
        let mut acc = self.d_value(k4, y)?;
        if self.mode() == OrderOneMode::Provider {
            return Err(Error::Extraction(
                "order-4 recursion needs first-order coefficients matching the \
                 system fields; this map's order-one terms differ"
                    .into(),
            ));
        }
        for pair in ordered_decompositions(k4, 2) {
            let (k1, k2) = (&pair[0], &pair[1]);
            let chain = match (k1.order(), k2.order()) {
                (1, 3) => {
                    let f1 = self.chain_f_val(k1, y)?;
                    self.f3_dir(k2, y, &f1)?
                }
                (2, 2) => {
                    let f1 = self.f2_val(k1, y)?;
                    self.f2_dir(k2, y, &f1)?
                }
                (3, 1) => {
                    let f1 = self.f3_val(k1, y)?;
                    self.g_dir(k2.first_active()?, y, &f1)?
                }
                _ => unreachable!("order split of a 4-index"),
            };
            for i in 0..acc.len() {
                acc[i] -= 0.5 * chain[i];
            }
        }
        for triple in ordered_decompositions(k4, 3) {
            let f1 = self.chain_f_val(&triple[0], y)?;
            let chain = self.dchain2(&triple[1], &triple[2], y, &f1)?;
            for i in 0..acc.len() {
                acc[i] -= chain[i] / 6.0;
            }
        }
        for quad in ordered_decompositions(k4, 4) {
            let f1 = self.chain_f_val(&quad[0], y)?;
            let (la, lb, lc) = (
                quad[1].first_active()?,
                quad[2].first_active()?,
                quad[3].first_active()?,
            );
            let chain3fn = |x: &[f64]| self.chain3_units(la, lb, lc, x);
            let chain = self.fd_dir(y, &f1, self.eps_smooth, &chain3fn)?;
            for i in 0..acc.len() {
                acc[i] -= chain[i] / 24.0;
            }
        }
        Ok(acc)
    }
}

fn point_key(y: &[f64]) -> Vec<u64> {
    y.iter().map(|x| x.to_bits()).collect()
}

fn unit_index(l: usize, noise_dim: usize) -> MultiIndex {
    let mut e = vec![0u32; noise_dim + 1];
    e[l] = 1;
    MultiIndex::new(e).expect("nonempty")
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn shifted(y: &[f64], v: &[f64], scale: f64) -> Vec<f64> {
    y.iter().zip(v).map(|(a, b)| a + scale * b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Grid;
    use crate::systems::{example1, kubo};
    use approx::assert_relative_eq;

    fn assert_vec_close(got: &[f64], expect: &[f64], tol: f64, what: &str) {
        assert_eq!(got.len(), expect.len());
        for (i, (g, e)) in got.iter().zip(expect).enumerate() {
            assert!(
                (g - e).abs() <= tol,
                "{what}[{i}]: got {g}, expected {e} (tol {tol})"
            );
        }
    }

    fn idx(s: &str) -> MultiIndex {
        s.parse().unwrap()
    }

    #[test]
    fn truncation_number_selection() {
        let cap = 4;
        // h0 = 1, epsilon = 1/4: h = 1/16 -> h^{-1/4} = 2
        let rule = TruncationRule::Auto { h0: 1.0, epsilon: 0.25 };
        assert_eq!(select_truncation_number(&rule, 1.0 / 16.0, cap).unwrap(), 2);
        // tiny h clamps at the cap instead of erroring
        assert_eq!(select_truncation_number(&rule, 1e-12, cap).unwrap(), 4);
        // large-ish h floors at 1
        assert_eq!(select_truncation_number(&rule, 0.9, cap).unwrap(), 1);
        assert_eq!(
            select_truncation_number(&TruncationRule::Fixed(3), 0.1, cap).unwrap(),
            3
        );
        assert!(select_truncation_number(&TruncationRule::Fixed(5), 0.1, cap).is_err());
        assert!(select_truncation_number(&TruncationRule::Fixed(0), 0.1, cap).is_err());
        assert!(select_truncation_number(&rule, 1.5, cap).is_err());
    }

    #[test]
    fn ordered_decomposition_counts() {
        let a = idx("1,1,0");
        assert_eq!(ordered_decompositions(&a, 2).len(), 2);
        let b = idx("1,1,1");
        assert_eq!(ordered_decompositions(&b, 2).len(), 6);
        assert_eq!(ordered_decompositions(&b, 3).len(), 6);
        let c = idx("2,0,0");
        assert_eq!(ordered_decompositions(&c, 2).len(), 1);
        assert_eq!(ordered_decompositions(&c, 3).len(), 0);
        // every decomposition sums back to alpha
        for tuple in ordered_decompositions(&idx("1,2,1"), 3) {
            let mut sum = MultiIndex::zero(2);
            for part in &tuple {
                sum = sum.add(part).unwrap();
                assert!(part.order() >= 1);
            }
            assert_eq!(sum, idx("1,2,1"));
        }
    }

    #[test]
    fn distinct_permutation_counts() {
        assert_eq!(distinct_permutations(&[1, 1, 1]).len(), 1);
        assert_eq!(distinct_permutations(&[0, 1, 1]).len(), 3);
        assert_eq!(distinct_permutations(&[0, 1, 2]).len(), 6);
        assert_eq!(distinct_permutations(&[0, 0, 1, 2]).len(), 12);
    }

    #[test]
    fn spark_table_oracles() {
        // order-one noise coefficient is the field itself
        let sys = kubo(1.0, 0.9);
        let table = CoefficientTable::new(&sys, TableKind::SparkKubo, 3).unwrap();
        let f = table.eval_f(&idx("0,1,0"), &[1.0, 0.0]).unwrap();
        assert_vec_close(&f, &[0.0, 0.9], 1e-15, "f_(0,1,0)");

        let sys1 = kubo(1.0, 1.0);
        let table1 = CoefficientTable::new(&sys1, TableKind::SparkKubo, 3).unwrap();
        let f2 = table1.eval_f(&idx("0,2,0"), &[1.0, 0.0]).unwrap();
        assert_vec_close(&f2, &[0.5, 0.0], 1e-15, "f_(0,2,0)");

        // the spark table refuses on non-kubo systems and beyond order 3
        let e1 = example1();
        assert!(CoefficientTable::new(&e1, TableKind::SparkKubo, 3).is_err());
        assert!(table.eval_f(&idx("0,2,2"), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn midpoint_kubo_third_order_is_twelfth_of_cubed_generator() {
        // linear field: the only surviving order-3 cluster is V'V'V/12,
        // so f_(0,3,0) = (sigma J)^3 y / 12 = -sigma^3 J y / 12
        let sigma = 0.9;
        let sys = kubo(1.0, sigma);
        let table = CoefficientTable::new(&sys, TableKind::Midpoint, 4).unwrap();
        let y = [0.7, -0.4];
        let f = table.eval_f(&idx("0,3,0"), &y).unwrap();
        let jy = [-y[1], y[0]];
        let expect = [
            -sigma.powi(3) * jy[0] / 12.0,
            -sigma.powi(3) * jy[1] / 12.0,
        ];
        assert_vec_close(&f, &expect, 1e-14, "f_(0,3,0)");

        // even orders vanish for the midpoint table
        for name in ["2,0,0", "1,1,0", "0,1,1", "4,0,0", "2,1,1", "0,2,2"] {
            let f = table.eval_f(&idx(name), &y).unwrap();
            assert_vec_close(&f, &[0.0, 0.0], 0.0, name);
        }
    }

    #[test]
    fn collapsed_velocity_matches_term_by_term_sum() {
        let sys = example1();
        let kinds = [(TableKind::Midpoint, 4u32), (TableKind::Erk2, 4)];
        let y = [0.37, -0.81];
        let rows = [
            [0.05, 0.21, -0.13],
            [0.01, -0.04, 0.09],
            [0.125, 0.3, 0.17],
        ];
        for (kind, cap) in kinds {
            let table = CoefficientTable::new(&sys, kind, cap).unwrap();
            for row in &rows {
                for n in 1..=cap {
                    let fast = table.velocity(&y, row, n).unwrap();
                    let slow = table.velocity_by_terms(&y, row, n).unwrap();
                    assert_vec_close(&fast, &slow, 1e-12, "velocity");
                }
            }
        }
        let sysk = kubo(1.0, 0.9);
        let table = CoefficientTable::new(&sysk, TableKind::SparkKubo, 3).unwrap();
        for row in &rows {
            for n in 1..=3 {
                let fast = table.velocity(&[1.0, 0.2], row, n).unwrap();
                let slow = table.velocity_by_terms(&[1.0, 0.2], row, n).unwrap();
                assert_vec_close(&fast, &slow, 1e-13, "spark velocity");
            }
        }
    }

    #[test]
    fn order_one_modified_flow_is_exponential_of_combined_field() {
        // kubo, n_tilde = 1: dy/dt = W(y)/h, so over [0, h] the flow is the
        // rotation by a h + sigma (dX1 + dX2)
        let sys = kubo(1.0, 0.9);
        let table = CoefficientTable::new(&sys, TableKind::Midpoint, 4).unwrap();
        let grid = Grid::new(0.25, 1).unwrap();
        let path = DriverPath::from_increments(grid, 2, vec![0.11, -0.07]).unwrap();
        let sol = solve_truncated_modified(
            &table,
            &path,
            &[1.0, 0.0],
            &TruncationRule::Fixed(1),
            0.25 / 64.0,
        )
        .unwrap();
        assert_eq!(sol.n_tilde, 1);
        assert_eq!(sol.substeps_per_step, 64);
        let beta: f64 = 1.0 * 0.25 + 0.9 * (0.11 - 0.07);
        let expect = [beta.cos(), beta.sin()];
        let got = sol.trajectory.terminal();
        assert_vec_close(got, &expect, 1e-10, "rotation");
    }

    #[test]
    fn modified_flow_rejects_non_dividing_micro_step() {
        let sys = kubo(1.0, 0.9);
        let table = CoefficientTable::new(&sys, TableKind::Midpoint, 4).unwrap();
        let grid = Grid::new(0.25, 1).unwrap();
        let path = DriverPath::from_increments(grid, 2, vec![0.1, 0.0]).unwrap();
        let err = solve_truncated_modified(
            &table,
            &path,
            &[1.0, 0.0],
            &TruncationRule::Fixed(1),
            0.07,
        );
        assert!(err.is_err());
    }

    struct PolynomialMap {
        coeffs: Vec<(MultiIndex, Vec<f64>)>,
    }

    impl OneStepMap for PolynomialMap {
        fn dim(&self) -> usize {
            2
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn apply(&self, y: &[f64], row: &[f64]) -> Result<Vec<f64>> {
            let mut out = y.to_vec();
            for (alpha, c) in &self.coeffs {
                let mono = monomial_value(alpha, row);
                for i in 0..2 {
                    out[i] += c[i] * mono;
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn extraction_recovers_polynomial_coefficients() {
        let map = PolynomialMap {
            coeffs: vec![
                (idx("1,0"), vec![0.4, -1.1]),
                (idx("0,1"), vec![1.3, 0.2]),
                (idx("2,0"), vec![-0.7, 0.5]),
                (idx("1,1"), vec![0.9, -0.3]),
                (idx("0,3"), vec![0.25, 0.65]),
            ],
        };
        let got = extract_d_alpha(&map, &[0.0, 0.0], 3, &ExtractionConfig::default()).unwrap();
        for (alpha, want) in &map.coeffs {
            assert_vec_close(&got[alpha], want, 1e-9, &format!("d_{alpha}"));
        }
        // untouched indices come back as (numerically) zero
        assert_vec_close(&got[&idx("0,2")], &[0.0, 0.0], 1e-9, "d_(0,2)");
        assert_eq!(got.len(), multi_indices_up_to(1, 3).len());
    }

    struct KinkedMap;

    impl OneStepMap for KinkedMap {
        fn dim(&self) -> usize {
            2
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn apply(&self, y: &[f64], row: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![y[0] + row[1].abs(), y[1] + row[0]])
        }
    }

    #[test]
    fn extraction_rejects_non_polynomial_maps() {
        let err = extract_d_alpha(&KinkedMap, &[0.0, 0.0], 2, &ExtractionConfig::default());
        assert!(matches!(err, Err(Error::Extraction(_))));
    }

    /// Exact midpoint coefficients on the kubo oscillator: the step is the
    /// Cayley transform of B = (a h + sigma (dX1 + dX2)) J, whose series is
    /// y + sum_k 2^{1-k} B^k y.
    fn kubo_midpoint_provider(a: f64, sigma: f64) -> impl Fn(&[f64]) -> Result<DMap> {
        move |y: &[f64]| {
            let mut out = DMap::new();
            for alpha in multi_indices_up_to(2, 4) {
                let k = alpha.order();
                let e = alpha.entries();
                let mut multinom = 1.0;
                let mut left = k;
                for &ei in e {
                    multinom *= binomial(left as usize, ei as usize) as f64;
                    left -= ei;
                }
                let scale = (0.5f64).powi(k as i32 - 1)
                    * multinom
                    * a.powi(e[0] as i32)
                    * sigma.powi((k - e[0]) as i32);
                // J^k y cycles with period 4
                let jky = match k % 4 {
                    0 => [y[0], y[1]],
                    1 => [-y[1], y[0]],
                    2 => [-y[0], -y[1]],
                    _ => [y[1], -y[0]],
                };
                out.insert(alpha, vec![scale * jky[0], scale * jky[1]]);
            }
            Ok(out)
        }
    }

    #[test]
    fn recursion_from_exact_midpoint_coefficients_matches_closed_table() {
        let (a, sigma) = (1.0, 0.9);
        let sys = kubo(a, sigma);
        let provider: DProvider = Box::new(kubo_midpoint_provider(a, sigma));
        let engine = recursion_f_from_d(provider, &sys, 4).unwrap();
        let table = CoefficientTable::new(&sys, TableKind::Midpoint, 4).unwrap();
        for y in [[1.0, 0.0], [0.6, -0.8], [-0.3, 0.45]] {
            for alpha in table.indices() {
                let got = engine.eval_f(&alpha, &y).unwrap();
                let want = table.eval_f(&alpha, &y).unwrap();
                assert_vec_close(&got, &want, 2e-7, &format!("f_{alpha} at {y:?}"));
            }
        }
    }

    /// A planar system with quadratic fields driven by one noise component;
    /// third derivatives vanish, so the two-stage explicit step expands
    /// exactly as y + W + W'W/2 + W''(W,W)/8 with nothing at order 4.
    fn quadratic_system() -> HamiltonianSystem {
        HamiltonianSystem::builder("quadratic-probe", 2, 1)
            .field(
                |y, out| {
                    out[0] = 0.7 * y[1] * y[1];
                    out[1] = -0.4 * y[0] * y[0];
                },
                |y, u, out| {
                    out[0] = 1.4 * y[1] * u[1];
                    out[1] = -0.8 * y[0] * u[0];
                },
                |_, u, w, out| {
                    out[0] = 1.4 * u[1] * w[1];
                    out[1] = -0.8 * u[0] * w[0];
                },
            )
            .field(
                |y, out| {
                    out[0] = 0.5 * y[0] * y[1];
                    out[1] = 0.3 * (y[0] * y[0] + y[1] * y[1]);
                },
                |y, u, out| {
                    out[0] = 0.5 * (y[1] * u[0] + y[0] * u[1]);
                    out[1] = 0.6 * (y[0] * u[0] + y[1] * u[1]);
                },
                |_, u, w, out| {
                    out[0] = 0.5 * (u[0] * w[1] + u[1] * w[0]);
                    out[1] = 0.6 * (u[0] * w[0] + u[1] * w[1]);
                },
            )
            .build()
            .unwrap()
    }

    fn quadratic_erk2_provider(sys: Arc<HamiltonianSystem>) -> impl Fn(&[f64]) -> Result<DMap> {
        move |y: &[f64]| {
            let dim = 2;
            let mut out = DMap::new();
            for alpha in multi_indices_up_to(1, 4) {
                let k = alpha.order();
                let mut acc = vec![0.0; dim];
                match k {
                    1 => acc = sys.v(alpha.first_active()?, y),
                    2 => {
                        for perm in distinct_permutations(&alpha.component_multiset()) {
                            let inner = sys.v(perm[0], y);
                            let mut t = vec![0.0; dim];
                            sys.eval_dv(perm[1], y, &inner, &mut t);
                            for i in 0..dim {
                                acc[i] += 0.5 * t[i];
                            }
                        }
                    }
                    3 => {
                        // (1/8) W''(W, W): first slot carries the second
                        // derivative
                        for perm in distinct_permutations(&alpha.component_multiset()) {
                            let v1 = sys.v(perm[1], y);
                            let v2 = sys.v(perm[2], y);
                            let mut t = vec![0.0; dim];
                            sys.eval_d2v(perm[0], y, &v1, &v2, &mut t);
                            for i in 0..dim {
                                acc[i] += t[i] / 8.0;
                            }
                        }
                    }
                    _ => {}
                }
                out.insert(alpha, acc);
            }
            Ok(out)
        }
    }

    #[test]
    fn recursion_from_exact_erk2_coefficients_matches_closed_table() {
        // quadratic fields exercise the order-4 V'V''(V,V) cluster, whose
        // 1/16 weight the recursion must reproduce
        let sys = quadratic_system();
        let sys_arc = Arc::new(quadratic_system());
        let provider: DProvider = Box::new(quadratic_erk2_provider(sys_arc));
        let engine = recursion_f_from_d(provider, &sys, 4).unwrap();
        let table = CoefficientTable::new(&sys, TableKind::Erk2, 4).unwrap();
        for y in [[0.4, -0.3], [-0.2, 0.5]] {
            for alpha in table.indices() {
                let got = engine.eval_f(&alpha, &y).unwrap();
                let want = table.eval_f(&alpha, &y).unwrap();
                assert_vec_close(&got, &want, 1e-6, &format!("f_{alpha} at {y:?}"));
            }
        }
    }

    #[test]
    fn extraction_pipeline_matches_midpoint_table_on_kubo() {
        let sys = kubo(1.0, 0.9);
        let method = Method::Midpoint;
        let engine =
            RecursionEngine::from_method(&sys, &method, 4, ExtractionConfig::default()).unwrap();
        let table = CoefficientTable::new(&sys, TableKind::Midpoint, 4).unwrap();
        let y = [0.8, -0.5];
        for alpha in table.indices() {
            let got = engine.eval_f(&alpha, &y).unwrap();
            let want = table.eval_f(&alpha, &y).unwrap();
            assert_vec_close(&got, &want, 1e-6, &format!("f_{alpha}"));
        }
    }

    #[test]
    fn extraction_pipeline_matches_spark_table_on_kubo() {
        // spark order-one coefficients differ from the fields, so this
        // exercises the provider-jet mode
        let sys = kubo(1.0, 0.9);
        let method = Method::SparkKubo;
        let engine =
            RecursionEngine::from_method(&sys, &method, 3, ExtractionConfig::default()).unwrap();
        let table = CoefficientTable::new(&sys, TableKind::SparkKubo, 3).unwrap();
        let y = [0.9, 0.35];
        for alpha in table.indices() {
            let got = engine.eval_f(&alpha, &y).unwrap();
            let want = table.eval_f(&alpha, &y).unwrap();
            assert_vec_close(&got, &want, 1e-6, &format!("f_{alpha}"));
        }
    }

    #[test]
    fn monomial_and_index_conventions() {
        let row = [0.5, 2.0, -3.0];
        assert_relative_eq!(monomial_value(&idx("1,0,0"), &row), 0.5);
        assert_relative_eq!(monomial_value(&idx("0,2,1"), &row), 4.0 * -3.0);
        assert_relative_eq!(monomial_value(&idx("2,1,1"), &row), 0.25 * 2.0 * -3.0);
    }
}

//! Multi-indices, uniform grids, and trajectories.
//!
//! A multi-index a = (a_0, ..., a_d) in N^{d+1} labels the monomial
//! h^{a_0} (dX^1)^{a_1} ... (dX^d)^{a_d}; component 0 always refers to time.
//! The grading theta(a) = a_0 + (a_1 + ... + a_d)/2 counts time increments
//! with weight 1 and noise increments with weight 1/2, and is kept as the
//! exact integer 2*theta so truncation logic never compares floats.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Multi-index in N^{d+1}; entry 0 is the time exponent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    entries: Vec<u32>,
}

impl MultiIndex {
    /// Builds a multi-index from its entries (length d+1, d >= 0).
    pub fn new(entries: Vec<u32>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain(
                "multi-index needs at least the time entry".into(),
            ));
        }
        Ok(Self { entries })
    }

    /// The all-zero index over `noise_dim` noise components.
    pub fn zero(noise_dim: usize) -> Self {
        Self {
            entries: vec![0; noise_dim + 1],
        }
    }

    /// Entries (a_0, ..., a_d).
    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    /// Entry a_l.
    pub fn entry(&self, l: usize) -> u32 {
        self.entries[l]
    }

    /// Number of noise components d.
    pub fn noise_dim(&self) -> usize {
        self.entries.len() - 1
    }

    /// Order |a| = a_0 + ... + a_d.
    pub fn order(&self) -> u32 {
        self.entries.iter().sum()
    }

    /// Exact 2*theta(a) = 2 a_0 + a_1 + ... + a_d.
    pub fn theta_twice(&self) -> u32 {
        2 * self.entries[0] + self.entries[1..].iter().sum::<u32>()
    }

    /// theta(a) as a float, for display only.
    pub fn theta(&self) -> f64 {
        self.theta_twice() as f64 / 2.0
    }

    /// i(a): the smallest l with a_l >= 1. Errors on the zero index.
    pub fn first_active(&self) -> Result<usize> {
        self.entries
            .iter()
            .position(|&e| e > 0)
            .ok_or_else(|| Error::Domain("zero multi-index has no active component".into()))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&e| e == 0)
    }

    /// Componentwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Domain("multi-index dimension mismatch".into()));
        }
        Ok(Self {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// The components of `self` listed with multiplicity, e.g. (1,2,0) -> [0,1,1].
    pub fn component_multiset(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.order() as usize);
        for (l, &e) in self.entries.iter().enumerate() {
            for _ in 0..e {
                out.push(l);
            }
        }
        out
    }
}

/// Graded order; within a grade the monomial convention puts earlier
/// components first, i.e. (1,0,0) before (0,1,0) before (0,0,1).
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order()
            .cmp(&other.order())
            .then_with(|| other.entries.cmp(&self.entries))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for MultiIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let entries: std::result::Result<Vec<u32>, _> =
            s.split(',').map(|p| p.trim().parse::<u32>()).collect();
        match entries {
            Ok(e) if !e.is_empty() => MultiIndex::new(e),
            _ => Err(Error::Parse(format!("bad multi-index '{s}'"))),
        }
    }
}

/// Order, exact 2*theta, and first active component of a nonzero index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexStats {
    pub order: u32,
    pub theta_twice: u32,
    pub first_active: usize,
}

impl IndexStats {
    pub fn theta(&self) -> f64 {
        self.theta_twice as f64 / 2.0
    }
}

/// (|a|, theta(a), i(a)) for a nonzero index; errors on the zero index.
pub fn index_stats(alpha: &MultiIndex) -> Result<IndexStats> {
    Ok(IndexStats {
        order: alpha.order(),
        theta_twice: alpha.theta_twice(),
        first_active: alpha.first_active()?,
    })
}

/// All multi-indices with 1 <= |a| <= order_cap over d noise components,
/// in graded order (ties resolved by the monomial convention above).
pub fn multi_indices_up_to(noise_dim: usize, order_cap: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut entries = vec![0u32; noise_dim + 1];
    collect_indices(&mut entries, 0, order_cap, &mut out);
    out.retain(|a| a.order() >= 1);
    out.sort();
    out
}

fn collect_indices(entries: &mut Vec<u32>, pos: usize, cap: u32, out: &mut Vec<MultiIndex>) {
    if pos == entries.len() {
        out.push(MultiIndex {
            entries: entries.clone(),
        });
        return;
    }
    let used: u32 = entries[..pos].iter().sum();
    for v in 0..=(cap - used) {
        entries[pos] = v;
        collect_indices(entries, pos + 1, cap, out);
    }
    entries[pos] = 0;
}

/// Uniform grid on [0, t_end] with n_steps steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    t_end: f64,
    n_steps: usize,
}

impl Grid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::Domain(format!("grid needs t_end > 0, got {t_end}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Step size h = t_end / n_steps.
    pub fn h(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Node t_i = i * h, i = 0..=n_steps.
    pub fn node(&self, i: usize) -> f64 {
        self.t_end * (i as f64 / self.n_steps as f64)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }
}

/// Phase-space state y in R^{2m}.
pub type PhasePoint = Vec<f64>;

/// States attached to the nodes of a grid (n_steps + 1 states).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: Grid,
    pub states: Vec<PhasePoint>,
}

impl Trajectory {
    pub fn new(grid: Grid, states: Vec<PhasePoint>) -> Result<Self> {
        if states.len() != grid.n_steps() + 1 {
            return Err(Error::Domain(format!(
                "trajectory needs {} states, got {}",
                grid.n_steps() + 1,
                states.len()
            )));
        }
        Ok(Self { grid, states })
    }

    pub fn initial(&self) -> &PhasePoint {
        &self.states[0]
    }

    pub fn terminal(&self) -> &PhasePoint {
        self.states.last().expect("trajectory is never empty")
    }
}

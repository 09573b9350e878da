//! Catalogue of rough Hamiltonian systems and a builder for external ones.
//!
//! A system carries the fields V_0, ..., V_d of dY = sum_l V_l(Y) dX^l with
//! analytic jets to second order (V_l, V_l', V_l''). Component 0 is the
//! drift. Each field is Hamiltonian, V_l = J^{-1} grad H_l with
//! J = [[0, I], [-I, 0]], and the per-field Hamiltonians are exposed where
//! available. States are laid out as y = (p_1..p_m, q_1..q_m).

use serde::Serialize;

use crate::core::{Grid, Trajectory};
use crate::noise::DriverPath;
use crate::{Error, Result};

type VFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type DvFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
type D2vFn = Box<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One field with its first and second derivative actions.
struct FieldJet {
    v: VFn,
    dv: DvFn,
    d2v: D2vFn,
}

/// Kubo oscillator parameters (drift rate and noise coupling).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KuboParams {
    pub a: f64,
    pub sigma: f64,
}

/// A system dY = sum_l V_l(Y) dX^l with order-2 jets per field.
pub struct HamiltonianSystem {
    label: String,
    dim: usize,
    noise_dim: usize,
    additive: bool,
    fields: Vec<FieldJet>,
    hamiltonians: Vec<Option<ScalarFn>>,
    energy: Option<ScalarFn>,
    kubo: Option<KuboParams>,
}

impl HamiltonianSystem {
    pub fn builder(label: impl Into<String>, dim: usize, noise_dim: usize) -> SystemBuilder {
        SystemBuilder {
            label: label.into(),
            dim,
            noise_dim,
            additive: false,
            fields: Vec::new(),
            hamiltonians: Vec::new(),
            energy: None,
            kubo: None,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Phase dimension 2m.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of noise components d.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// True when every noise field is constant in y.
    pub fn is_additive(&self) -> bool {
        self.additive
    }

    /// Kubo parameters when this is the Kubo oscillator.
    pub fn kubo_params(&self) -> Option<KuboParams> {
        self.kubo
    }

    /// V_l(y) into `out`.
    pub fn eval_v(&self, l: usize, y: &[f64], out: &mut [f64]) {
        (self.fields[l].v)(y, out);
    }

    /// V_l'(y) v into `out`.
    pub fn eval_dv(&self, l: usize, y: &[f64], v: &[f64], out: &mut [f64]) {
        (self.fields[l].dv)(y, v, out);
    }

    /// V_l''(y)(v, w) into `out`.
    pub fn eval_d2v(&self, l: usize, y: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        (self.fields[l].d2v)(y, v, w, out);
    }

    /// H_l(y) when the per-field Hamiltonian is available.
    pub fn eval_h(&self, l: usize, y: &[f64]) -> Option<f64> {
        self.hamiltonians[l].as_ref().map(|f| f(y))
    }

    /// Conserved quantity when the system has one (Kubo: p^2 + q^2).
    pub fn energy(&self, y: &[f64]) -> Option<f64> {
        self.energy.as_ref().map(|f| f(y))
    }

    /// Combined field W(y) = sum_l c_l V_l(y) for a step row c = (h, dX...).
    pub fn eval_w(&self, y: &[f64], c: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.fill(0.0);
        for (l, &cl) in c.iter().enumerate() {
            if cl == 0.0 {
                continue;
            }
            self.eval_v(l, y, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += cl * s;
            }
        }
    }

    /// W'(y) v = sum_l c_l V_l'(y) v.
    pub fn eval_dw(&self, y: &[f64], c: &[f64], v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.fill(0.0);
        for (l, &cl) in c.iter().enumerate() {
            if cl == 0.0 {
                continue;
            }
            self.eval_dv(l, y, v, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += cl * s;
            }
        }
    }

    /// W''(y)(v, w) = sum_l c_l V_l''(y)(v, w).
    pub fn eval_d2w(
        &self,
        y: &[f64],
        c: &[f64],
        v: &[f64],
        w: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        out.fill(0.0);
        for (l, &cl) in c.iter().enumerate() {
            if cl == 0.0 {
                continue;
            }
            self.eval_d2v(l, y, v, w, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += cl * s;
            }
        }
    }

    /// Allocating convenience for tests and diagnostics.
    pub fn v(&self, l: usize, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_v(l, y, &mut out);
        out
    }
}

/// Builder for user-supplied systems; fields are pushed in order l = 0..=d.
pub struct SystemBuilder {
    label: String,
    dim: usize,
    noise_dim: usize,
    additive: bool,
    fields: Vec<FieldJet>,
    hamiltonians: Vec<Option<ScalarFn>>,
    energy: Option<ScalarFn>,
    kubo: Option<KuboParams>,
}

impl SystemBuilder {
    pub fn field(
        mut self,
        v: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        dv: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        d2v: impl Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.fields.push(FieldJet {
            v: Box::new(v),
            dv: Box::new(dv),
            d2v: Box::new(d2v),
        });
        self.hamiltonians.push(None);
        self
    }

    /// Attaches H_l for the most recently pushed field.
    pub fn hamiltonian(mut self, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        if let Some(slot) = self.hamiltonians.last_mut() {
            *slot = Some(Box::new(h));
        }
        self
    }

    pub fn additive(mut self, flag: bool) -> Self {
        self.additive = flag;
        self
    }

    pub fn energy(mut self, e: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.energy = Some(Box::new(e));
        self
    }

    fn kubo(mut self, params: KuboParams) -> Self {
        self.kubo = Some(params);
        self
    }

    pub fn build(self) -> Result<HamiltonianSystem> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Domain(format!(
                "phase dimension must be even and positive, got {}",
                self.dim
            )));
        }
        if self.fields.len() != self.noise_dim + 1 {
            return Err(Error::Domain(format!(
                "system needs {} fields (drift + {} noise), got {}",
                self.noise_dim + 1,
                self.noise_dim,
                self.fields.len()
            )));
        }
        Ok(HamiltonianSystem {
            label: self.label,
            dim: self.dim,
            noise_dim: self.noise_dim,
            additive: self.additive,
            fields: self.fields,
            hamiltonians: self.hamiltonians,
            energy: self.energy,
            kubo: self.kubo,
        })
    }
}

/// Two-noise trigonometric system:
/// dP = sin P sin Q dt - cos Q dX^2, dQ = cos P cos Q dt - sin P dX^1,
/// with H_0 = sin P cos Q, H_1 = cos P, H_2 = sin Q.
pub fn example1() -> HamiltonianSystem {
    HamiltonianSystem::builder("example1", 2, 2)
        .field(
            |y, out| {
                out[0] = y[0].sin() * y[1].sin();
                out[1] = y[0].cos() * y[1].cos();
            },
            |y, v, out| {
                let (sp, cp) = y[0].sin_cos();
                let (sq, cq) = y[1].sin_cos();
                out[0] = cp * sq * v[0] + sp * cq * v[1];
                out[1] = -sp * cq * v[0] - cp * sq * v[1];
            },
            |y, v, w, out| {
                let (sp, cp) = y[0].sin_cos();
                let (sq, cq) = y[1].sin_cos();
                out[0] = -sp * sq * v[0] * w[0]
                    + cp * cq * (v[0] * w[1] + v[1] * w[0])
                    - sp * sq * v[1] * w[1];
                out[1] = -cp * cq * v[0] * w[0]
                    + sp * sq * (v[0] * w[1] + v[1] * w[0])
                    - cp * cq * v[1] * w[1];
            },
        )
        .hamiltonian(|y| y[0].sin() * y[1].cos())
        .field(
            |y, out| {
                out[0] = 0.0;
                out[1] = -y[0].sin();
            },
            |y, v, out| {
                out[0] = 0.0;
                out[1] = -y[0].cos() * v[0];
            },
            |y, v, w, out| {
                out[0] = 0.0;
                out[1] = y[0].sin() * v[0] * w[0];
            },
        )
        .hamiltonian(|y| y[0].cos())
        .field(
            |y, out| {
                out[0] = -y[1].cos();
                out[1] = 0.0;
            },
            |y, v, out| {
                out[0] = y[1].sin() * v[1];
                out[1] = 0.0;
            },
            |y, v, w, out| {
                out[0] = y[1].cos() * v[1] * w[1];
                out[1] = 0.0;
            },
        )
        .hamiltonian(|y| y[1].sin())
        .build()
        .expect("catalogue system is well formed")
}

/// Taylor-Green flow with additive noise:
/// dP = -sin Q dt + sqrt(2) sigma dX^1, dQ = sin P dt + sqrt(2) sigma dX^2,
/// with H_0 = -cos P - cos Q, H_1 = -sqrt(2) sigma Q, H_2 = sqrt(2) sigma P.
pub fn taylor_green(sigma: f64) -> HamiltonianSystem {
    let s = std::f64::consts::SQRT_2 * sigma;
    HamiltonianSystem::builder("taylor-green", 2, 2)
        .field(
            |y, out| {
                out[0] = -y[1].sin();
                out[1] = y[0].sin();
            },
            |y, v, out| {
                out[0] = -y[1].cos() * v[1];
                out[1] = y[0].cos() * v[0];
            },
            |y, v, w, out| {
                out[0] = y[1].sin() * v[1] * w[1];
                out[1] = -y[0].sin() * v[0] * w[0];
            },
        )
        .hamiltonian(|y| -y[0].cos() - y[1].cos())
        .field(
            move |_, out| {
                out[0] = s;
                out[1] = 0.0;
            },
            |_, _, out| out.fill(0.0),
            |_, _, _, out| out.fill(0.0),
        )
        .hamiltonian(move |y| -s * y[1])
        .field(
            move |_, out| {
                out[0] = 0.0;
                out[1] = s;
            },
            |_, _, out| out.fill(0.0),
            |_, _, _, out| out.fill(0.0),
        )
        .hamiltonian(move |y| s * y[0])
        .additive(true)
        .build()
        .expect("catalogue system is well formed")
}

/// Kubo oscillator with two identical noise channels:
/// dP = -aQ dt - sigma Q (dX^1 + dX^2), dQ = aP dt + sigma P (dX^1 + dX^2).
/// Conserves P^2 + Q^2 exactly.
pub fn kubo(a: f64, sigma: f64) -> HamiltonianSystem {
    let rot = move |c: f64, y: &[f64], out: &mut [f64]| {
        out[0] = -c * y[1];
        out[1] = c * y[0];
    };
    let mut builder = HamiltonianSystem::builder("kubo", 2, 2)
        .field(
            move |y, out| rot(a, y, out),
            move |_, v, out| rot(a, v, out),
            |_, _, _, out| out.fill(0.0),
        )
        .hamiltonian(move |y| 0.5 * a * (y[0] * y[0] + y[1] * y[1]));
    for _ in 0..2 {
        builder = builder
            .field(
                move |y, out| rot(sigma, y, out),
                move |_, v, out| rot(sigma, v, out),
                |_, _, _, out| out.fill(0.0),
            )
            .hamiltonian(move |y| 0.5 * sigma * (y[0] * y[0] + y[1] * y[1]));
    }
    builder
        .energy(|y| y[0] * y[0] + y[1] * y[1])
        .kubo(KuboParams { a, sigma })
        .build()
        .expect("catalogue system is well formed")
}

/// Serializable handle for the catalogue, used by study configurations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "label")]
pub enum SystemSpec {
    #[serde(rename = "example1")]
    Example1,
    #[serde(rename = "taylor-green")]
    TaylorGreen { sigma: f64 },
    #[serde(rename = "kubo")]
    Kubo { a: f64, sigma: f64 },
}

impl SystemSpec {
    pub fn build(&self) -> HamiltonianSystem {
        match *self {
            SystemSpec::Example1 => example1(),
            SystemSpec::TaylorGreen { sigma } => taylor_green(sigma),
            SystemSpec::Kubo { a, sigma } => kubo(a, sigma),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SystemSpec::Example1 => "example1",
            SystemSpec::TaylorGreen { .. } => "taylor-green",
            SystemSpec::Kubo { .. } => "kubo",
        }
    }
}

/// Exact Kubo solution on the grid nodes: a rotation by
/// theta_n = a t_n + sigma (X^1 + X^2)(t_n) applied to z.
pub fn kubo_exact(
    params: KuboParams,
    z: &[f64],
    grid: &Grid,
    path: &DriverPath,
) -> Result<Trajectory> {
    if z.len() != 2 {
        return Err(Error::Domain("kubo state lives in R^2".into()));
    }
    if path.grid() != grid {
        return Err(Error::Domain("path grid does not match requested grid".into()));
    }
    if path.noise_dim() != 2 {
        return Err(Error::Domain("kubo drives two noise components".into()));
    }
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    let mut w_sum = 0.0;
    states.push(z.to_vec());
    for n in 0..grid.n_steps() {
        w_sum += path.increment(n, 1) + path.increment(n, 2);
        let theta = params.a * grid.node(n + 1) + params.sigma * w_sum;
        let (s, c) = theta.sin_cos();
        states.push(vec![z[0] * c - z[1] * s, z[1] * c + z[0] * s]);
    }
    Trajectory::new(*grid, states)
}

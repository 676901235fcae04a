//! Right-hand sides of the Laplacian flow, its DeTurck-gauged form, the
//! Laplacian co-flow and the modified co-flow (plain and gauged), with
//! explicit integrators and per-step diagnostics.
//!
//! The state is always the 3-form. Co-flows produce a velocity for the
//! 4-form, which is converted site by site with the inverse of the
//! linearization of `phi -> *phi`.

use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::forms::DIM;
use crate::g2::{inverse_linearized_psi_parts, tr_torsion_parts};
use crate::grid::{
    codiff, ext_d, hodge_field, hodge_laplacian, interior_field, l2_norm, FormField, GridError,
    MetricField, TorusGrid,
};

/// Smallest positivity margin accepted at the end of a step.
pub const MARGIN_FLOOR: f64 = 1e-6;

/// Retries with a halved step before giving up.
pub const MAX_HALVINGS: usize = 10;

pub const DEFAULT_CFL: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow left the positive cone at t = {time}: worst site {site:?}, margin {margin:e}")]
    LeftPositiveCone {
        time: f64,
        site: [usize; DIM],
        margin: f64,
    },
    #[error("non-finite values at t = {time}")]
    Divergence { time: f64 },
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    Laplacian,
    Deturck,
    Coflow,
    ModifiedCoflow { a: f64 },
    GaugedModifiedCoflow { a: f64 },
}

impl FlowKind {
    pub const NAMES: [&'static str; 5] = [
        "laplacian",
        "deturck",
        "coflow",
        "modified_coflow",
        "gauged_modified_coflow",
    ];

    pub fn from_name(name: &str, a: f64) -> Option<Self> {
        match name {
            "laplacian" => Some(FlowKind::Laplacian),
            "deturck" => Some(FlowKind::Deturck),
            "coflow" => Some(FlowKind::Coflow),
            "modified_coflow" => Some(FlowKind::ModifiedCoflow { a }),
            "gauged_modified_coflow" => Some(FlowKind::GaugedModifiedCoflow { a }),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FlowKind::Laplacian => "laplacian",
            FlowKind::Deturck => "deturck",
            FlowKind::Coflow => "coflow",
            FlowKind::ModifiedCoflow { .. } => "modified_coflow",
            FlowKind::GaugedModifiedCoflow { .. } => "gauged_modified_coflow",
        }
    }

    /// True for the flows written as equations for the 4-form.
    pub fn evolves_psi(&self) -> bool {
        matches!(
            self,
            FlowKind::Coflow | FlowKind::ModifiedCoflow { .. } | FlowKind::GaugedModifiedCoflow { .. }
        )
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKind::ModifiedCoflow { a } | FlowKind::GaugedModifiedCoflow { a } => {
                write!(f, "{}(A={a})", self.name())
            }
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

impl Method {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "euler" => Some(Method::Euler),
            "rk4" => Some(Method::Rk4),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        }
    }
}

/// The 3-form at time `t` with its metric and dual 4-form.
#[derive(Debug, Clone)]
pub struct FlowState {
    t: f64,
    phi: FormField,
    metric: MetricField,
    psi: FormField,
}

impl FlowState {
    pub fn new(phi: FormField, t: f64) -> Result<Self, FlowError> {
        FlowState::with_floor(phi, t, 0.0)
    }

    fn with_floor(phi: FormField, t: f64, floor: f64) -> Result<Self, FlowError> {
        if phi.degree() != 3 {
            return Err(GridError::Shape("flow state needs a 3-form field".into()).into());
        }
        if !phi.is_finite() {
            return Err(FlowError::Divergence { time: t });
        }
        let metric = match MetricField::from_phi_with_floor(&phi, floor) {
            Ok(m) => m,
            Err(GridError::NotPositive { site, margin }) => {
                return Err(FlowError::LeftPositiveCone {
                    time: t,
                    site,
                    margin,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let psi = hodge_field(&phi, &metric)?;
        Ok(FlowState {
            t,
            phi,
            metric,
            psi,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn phi(&self) -> &FormField {
        &self.phi
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn psi(&self) -> &FormField {
        &self.psi
    }

    pub fn grid(&self) -> &TorusGrid {
        self.phi.grid()
    }

    pub fn into_phi(self) -> FormField {
        self.phi
    }
}

/// `V^k = g^{ij} Gamma^k_ij` of the induced metric, relative to the flat
/// connection of the torus.
pub fn deturck_vector(state: &FlowState) -> Vec<[f64; DIM]> {
    deturck_vector_of(&state.metric)
}

/// `V^k = g^{kl} (g^{ij} d_i g_jl - 1/2 g^{ij} d_l g_ij)` from centered
/// differences of an arbitrary metric field.
pub fn deturck_vector_of(m: &MetricField) -> Vec<[f64; DIM]> {
    const N: usize = DIM * DIM;
    let grid = m.grid();
    let mut flat = vec![0.0; grid.sites() * N];
    for (chunk, metric) in flat.chunks_mut(N).zip(m.metrics()) {
        chunk.copy_from_slice(metric.g().transpose().as_slice());
    }
    // partials[a][site * 49 + i * 7 + j] = d_a g_ij
    let partials: Vec<Vec<f64>> = (0..DIM).map(|a| grid.partial(&flat, N, a)).collect();
    (0..grid.sites())
        .into_par_iter()
        .map(|site| {
            let g_inv = m.at(site).g_inv();
            let base = site * N;
            let mut w = [0.0; DIM];
            for (l, wl) in w.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..DIM {
                    for j in 0..DIM {
                        acc += g_inv[(i, j)]
                            * (partials[i][base + j * DIM + l]
                                - 0.5 * partials[l][base + i * DIM + j]);
                    }
                }
                *wl = acc;
            }
            let mut v = [0.0; DIM];
            for (k, vk) in v.iter_mut().enumerate() {
                *vk = (0..DIM).map(|l| g_inv[(k, l)] * w[l]).sum();
            }
            v
        })
        .collect()
}

/// Cartan formula `d i_v f + i_v d f`.
pub fn lie_derivative(v: &[[f64; DIM]], f: &FormField) -> Result<FormField, FlowError> {
    let k = f.degree();
    let mut out = FormField::zeros(f.grid(), k);
    if k > 0 {
        out = ext_d(&interior_field(v, f)?)?;
    }
    if k < DIM {
        out = out.add(&interior_field(v, &ext_d(f)?)?)?;
    }
    Ok(out)
}

/// `Tr T` at every site.
pub fn torsion_trace(state: &FlowState) -> Result<Vec<f64>, FlowError> {
    let dphi = ext_d(&state.phi)?;
    Ok((0..state.grid().sites())
        .into_par_iter()
        .map(|site| tr_torsion_parts(dphi.at(site), state.phi.at(site), state.metric.at(site)))
        .collect())
}

/// `Delta phi`.
pub fn rhs_laplacian(state: &FlowState) -> Result<FormField, FlowError> {
    Ok(hodge_laplacian(&state.phi, &state.metric)?)
}

/// `d (d* phi + i_V phi)`.
pub fn rhs_deturck(state: &FlowState) -> Result<FormField, FlowError> {
    let v = deturck_vector(state);
    let potential = codiff(&state.phi, &state.metric)?.add(&interior_field(&v, &state.phi)?)?;
    Ok(ext_d(&potential)?)
}

/// `-Delta psi`.
pub fn rhs_coflow(state: &FlowState) -> Result<FormField, FlowError> {
    Ok(hodge_laplacian(&state.psi, &state.metric)?.scaled(-1.0))
}

/// Ungauged: `Delta psi + 2 d((A - Tr T) phi)`.
/// Gauged: `d (d* psi + 2 (A - Tr T) phi + i_V psi)`.
pub fn rhs_modified_coflow(state: &FlowState, a: f64, gauged: bool) -> Result<FormField, FlowError> {
    let factors: Vec<f64> = torsion_trace(state)?.iter().map(|t| 2.0 * (a - t)).collect();
    let weighted = state.phi.scaled_pointwise(&factors)?;
    if gauged {
        let v = deturck_vector(state);
        let potential = codiff(&state.psi, &state.metric)?
            .add(&weighted)?
            .add(&interior_field(&v, &state.psi)?)?;
        Ok(ext_d(&potential)?)
    } else {
        Ok(hodge_laplacian(&state.psi, &state.metric)?.add(&ext_d(&weighted)?)?)
    }
}

/// Right-hand side of the chosen flow: a 3-form field for flows of phi, a
/// 4-form field for flows of psi.
pub fn rhs(state: &FlowState, kind: FlowKind) -> Result<FormField, FlowError> {
    match kind {
        FlowKind::Laplacian => rhs_laplacian(state),
        FlowKind::Deturck => rhs_deturck(state),
        FlowKind::Coflow => rhs_coflow(state),
        FlowKind::ModifiedCoflow { a } => rhs_modified_coflow(state, a, false),
        FlowKind::GaugedModifiedCoflow { a } => rhs_modified_coflow(state, a, true),
    }
}

/// The 3-form velocity whose image under the linearization of `*phi` is `chi`.
pub fn phi_velocity_from_psi(state: &FlowState, chi: &FormField) -> Result<FormField, FlowError> {
    if chi.degree() != 4 || chi.grid() != state.grid() {
        return Err(GridError::Shape("psi velocity must be a 4-form on the state grid".into()).into());
    }
    let data: Vec<f64> = (0..state.grid().sites())
        .into_par_iter()
        .flat_map_iter(|site| {
            inverse_linearized_psi_parts(
                chi.at(site),
                state.phi.at(site),
                state.psi.at(site),
                state.metric.at(site),
            )
        })
        .collect();
    Ok(FormField::from_data(state.grid(), 3, data)?)
}

/// `d phi / dt` for the chosen flow.
pub fn velocity(state: &FlowState, kind: FlowKind) -> Result<FormField, FlowError> {
    let r = rhs(state, kind)?;
    if !r.is_finite() {
        return Err(FlowError::Divergence { time: state.t });
    }
    if kind.evolves_psi() {
        phi_velocity_from_psi(state, &r)
    } else {
        Ok(r)
    }
}

fn stage(state: &FlowState, k: &FormField, h: f64) -> Result<FlowState, FlowError> {
    FlowState::with_floor(state.phi.axpy(h, k)?, state.t + h, 0.0)
}

/// One explicit step. The result must keep a positivity margin of at least
/// `MARGIN_FLOOR` at every site.
pub fn step(state: &FlowState, kind: FlowKind, dt: f64, method: Method) -> Result<FlowState, FlowError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FlowError::InvalidStep(dt));
    }
    let k1 = velocity(state, kind)?;
    let phi = match method {
        Method::Euler => state.phi.axpy(dt, &k1)?,
        Method::Rk4 => {
            let k2 = velocity(&stage(state, &k1, 0.5 * dt)?, kind)?;
            let k3 = velocity(&stage(state, &k2, 0.5 * dt)?, kind)?;
            let k4 = velocity(&stage(state, &k3, dt)?, kind)?;
            let sum = k1.add(&k4)?.axpy(2.0, &k2)?.axpy(2.0, &k3)?;
            state.phi.axpy(dt / 6.0, &sum)?
        }
    };
    FlowState::with_floor(phi, state.t + dt, MARGIN_FLOOR)
}

/// `step` with step rejection: on positivity loss the step is halved, up to
/// `MAX_HALVINGS` times. Returns the new state and the step actually taken.
pub fn advance(
    state: &FlowState,
    kind: FlowKind,
    dt: f64,
    method: Method,
) -> Result<(FlowState, f64), FlowError> {
    let mut dt = dt;
    let mut halvings = 0;
    loop {
        match step(state, kind, dt, method) {
            Ok(next) => return Ok((next, dt)),
            Err(e @ FlowError::LeftPositiveCone { .. }) => {
                if halvings == MAX_HALVINGS {
                    return Err(e);
                }
                halvings += 1;
                dt *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Diffusive step `cfl * min(h)^2 / max_sites(largest eigenvalue of g^-1)`.
pub fn default_dt(state: &FlowState, cfl: f64) -> f64 {
    let h = state.grid().min_spacing();
    cfl * h * h / state.metric.max_inverse_eigenvalue()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub t: f64,
    pub dphi_l2: f64,
    pub dphi_sup: f64,
    pub dpsi_l2: f64,
    pub dpsi_sup: f64,
    pub torsion_trace_min: f64,
    pub torsion_trace_max: f64,
    pub min_metric_eigenvalue: f64,
    pub volume: f64,
    pub rhs_l2: f64,
}

pub const CSV_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 12] = [
    "step",
    "t",
    "dt",
    "dphi_l2",
    "dphi_sup",
    "dpsi_l2",
    "dpsi_sup",
    "trace_torsion_min",
    "trace_torsion_max",
    "min_metric_eigenvalue",
    "volume",
    "rhs_l2",
];

pub fn write_csv_header<W: Write>(out: &mut W) -> io::Result<()> {
    writeln!(out, "# g2flow diagnostics v{CSV_VERSION}")?;
    writeln!(out, "{}", CSV_COLUMNS.join(","))
}

impl Diagnostics {
    pub fn csv_row(&self, step: usize, dt: f64) -> String {
        let values = [
            self.t,
            dt,
            self.dphi_l2,
            self.dphi_sup,
            self.dpsi_l2,
            self.dpsi_sup,
            self.torsion_trace_min,
            self.torsion_trace_max,
            self.min_metric_eigenvalue,
            self.volume,
            self.rhs_l2,
        ];
        let mut row = step.to_string();
        for v in values {
            row.push_str(&format!(",{v:.16e}"));
        }
        row
    }
}

pub fn monitors(state: &FlowState, kind: FlowKind) -> Result<Diagnostics, FlowError> {
    let r = rhs(state, kind)?;
    monitors_with_rhs(state, &r)
}

/// Diagnostics for a state whose flow right-hand side is already known.
pub fn monitors_with_rhs(state: &FlowState, rhs: &FormField) -> Result<Diagnostics, FlowError> {
    let m = &state.metric;
    let dphi = ext_d(&state.phi)?;
    let dpsi = ext_d(&state.psi)?;
    let trace = torsion_trace(state)?;
    Ok(Diagnostics {
        t: state.t,
        dphi_l2: l2_norm(&dphi, m)?,
        dphi_sup: dphi.sup_norm(),
        dpsi_l2: l2_norm(&dpsi, m)?,
        dpsi_sup: dpsi.sup_norm(),
        torsion_trace_min: trace.iter().copied().fold(f64::INFINITY, f64::min),
        torsion_trace_max: trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_metric_eigenvalue: m.min_eigenvalue(),
        volume: m.volume(),
        rhs_l2: l2_norm(rhs, m)?,
    })
}

//! Periodic grids on the flat 7-torus and the discrete exterior calculus on them.
//!
//! Fields are stored site-major with axis 0 varying fastest and the form
//! components innermost: `data[site * C(7,k) + component]` where
//! `site = i_0 + n i_1 + n^2 i_2 + ...`. Derivatives are centered finite
//! differences with periodic wraparound, so the discrete `d` squares to zero
//! and is exactly skew-adjoint to the constant-metric codifferential.

use std::f64::consts::TAU;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::forms::{
    form_dim, hodge_into, inner_into, interior_into, tables, FormError, KForm,
    Metric, DIM,
};
use crate::g2::{metric_from_components, standard_phi, G2Error};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least {min} sites per axis for this stencil, got {n}")]
    TooFewSites { n: usize, min: usize },
    #[error("axis length {0} must be positive and finite")]
    InvalidLength(f64),
    #[error("exterior derivative of a 7-form")]
    TopDegree,
    #[error("codifferential of a 0-form")]
    ZeroDegree,
    #[error("field shape mismatch: {0}")]
    Shape(String),
    #[error("not a positive 3-form at site {site:?} (margin {margin:e})")]
    NotPositive { site: [usize; DIM], margin: f64 },
    #[error("degenerate metric at site {site:?}")]
    DegenerateMetric { site: [usize; DIM] },
    #[error("invalid band {band} for n = {n} (need 1 <= band < n/2)")]
    InvalidBand { band: usize, n: usize },
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Form(#[from] FormError),
}

/// Accuracy order of the centered difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdOrder {
    Second,
    Fourth,
}

impl FdOrder {
    pub fn from_int(order: usize) -> Option<Self> {
        match order {
            2 => Some(FdOrder::Second),
            4 => Some(FdOrder::Fourth),
            _ => None,
        }
    }

    pub fn as_int(self) -> usize {
        match self {
            FdOrder::Second => 2,
            FdOrder::Fourth => 4,
        }
    }

    /// (offset, weight) pairs of the first-derivative stencil, unit spacing.
    fn stencil(self) -> &'static [(isize, f64)] {
        const SECOND: [(isize, f64); 2] = [(1, 0.5), (-1, -0.5)];
        const FOURTH: [(isize, f64); 4] =
            [(1, 2.0 / 3.0), (-1, -2.0 / 3.0), (2, -1.0 / 12.0), (-2, 1.0 / 12.0)];
        match self {
            FdOrder::Second => &SECOND,
            FdOrder::Fourth => &FOURTH,
        }
    }

    fn min_sites(self) -> usize {
        match self {
            FdOrder::Second => 4,
            FdOrder::Fourth => 6,
        }
    }
}

impl fmt::Display for FdOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_int())
    }
}

/// Periodic grid on the flat torus. Each axis has either at least the
/// stencil minimum of sites or exactly one site, in which case fields are
/// constant along it and derivatives in that direction vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusGrid {
    shape: [usize; DIM],
    lengths: [f64; DIM],
    order: FdOrder,
}

impl TorusGrid {
    pub fn new(n: usize, lengths: [f64; DIM], order: FdOrder) -> Result<Self, GridError> {
        if n < order.min_sites() {
            return Err(GridError::TooFewSites {
                n,
                min: order.min_sites(),
            });
        }
        TorusGrid::with_shape([n; DIM], lengths, order)
    }

    /// Anisotropic grid; an axis with one site is frozen.
    pub fn with_shape(
        shape: [usize; DIM],
        lengths: [f64; DIM],
        order: FdOrder,
    ) -> Result<Self, GridError> {
        if let Some(&n) = shape.iter().find(|&&n| n != 1 && n < order.min_sites()) {
            return Err(GridError::TooFewSites {
                n,
                min: order.min_sites(),
            });
        }
        if let Some(&bad) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(GridError::InvalidLength(bad));
        }
        Ok(TorusGrid {
            shape,
            lengths,
            order,
        })
    }

    /// All axes of length `2 pi`, so that integer modes have unit wavenumber.
    pub fn standard(n: usize, order: FdOrder) -> Result<Self, GridError> {
        TorusGrid::new(n, [TAU; DIM], order)
    }

    /// Sites per axis when all axes agree.
    pub fn uniform_n(&self) -> Option<usize> {
        let n = self.shape[0];
        self.shape.iter().all(|&m| m == n).then_some(n)
    }

    pub fn shape(&self) -> &[usize; DIM] {
        &self.shape
    }

    pub fn lengths(&self) -> &[f64; DIM] {
        &self.lengths
    }

    pub fn order(&self) -> FdOrder {
        self.order
    }

    pub fn sites(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.shape[axis] as f64
    }

    pub fn is_frozen(&self, axis: usize) -> bool {
        self.shape[axis] == 1
    }

    /// Smallest spacing over axes that carry derivatives.
    pub fn min_spacing(&self) -> f64 {
        (0..DIM)
            .filter(|&a| !self.is_frozen(a))
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn torus_volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..DIM).map(|a| self.spacing(a)).product()
    }

    pub fn coords(&self, site: usize) -> [usize; DIM] {
        let mut c = [0; DIM];
        let mut rest = site;
        for (x, n) in c.iter_mut().zip(&self.shape) {
            *x = rest % n;
            rest /= n;
        }
        c
    }

    pub fn site(&self, coords: &[usize; DIM]) -> usize {
        (0..DIM)
            .rev()
            .fold(0, |acc, a| acc * self.shape[a] + (coords[a] % self.shape[a]))
    }

    pub fn position(&self, site: usize) -> [f64; DIM] {
        let c = self.coords(site);
        let mut x = [0.0; DIM];
        for a in 0..DIM {
            x[a] = c[a] as f64 * self.spacing(a);
        }
        x
    }

    fn stride(&self, axis: usize) -> usize {
        self.shape[..axis].iter().product()
    }

    pub fn neighbor(&self, site: usize, axis: usize, offset: isize) -> usize {
        let n = self.shape[axis];
        let stride = self.stride(axis);
        let c = (site / stride) % n;
        let shifted = (c as isize + offset).rem_euclid(n as isize) as usize;
        site + shifted * stride - c * stride
    }

    /// Physical wavenumber `2 pi m / L_axis` of integer mode `m`.
    pub fn wavenumber(&self, axis: usize, mode: i64) -> f64 {
        TAU * mode as f64 / self.lengths[axis]
    }

    /// Magnitude of the symbol of the discrete derivative on mode `m`:
    /// `sin(kh)/h` for order 2, `(8 sin(kh) - sin(2kh)) / (6h)` for order 4.
    pub fn discrete_wavenumber(&self, axis: usize, mode: i64) -> f64 {
        let h = self.spacing(axis);
        let kh = self.wavenumber(axis, mode) * h;
        match self.order {
            FdOrder::Second => kh.sin() / h,
            FdOrder::Fourth => (8.0 * kh.sin() - (2.0 * kh).sin()) / (6.0 * h),
        }
    }

    /// Centered derivative along `axis` of every component at `site`.
    fn derivative_at(&self, data: &[f64], ncomp: usize, site: usize, axis: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.is_frozen(axis) {
            return;
        }
        let inv_h = 1.0 / self.spacing(axis);
        for &(offset, w) in self.order.stencil() {
            let nb = self.neighbor(site, axis, offset);
            let src = &data[nb * ncomp..(nb + 1) * ncomp];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv_h);
    }

    /// Centered derivative along `axis` of a field with `ncomp` values per site.
    pub fn partial(&self, data: &[f64], ncomp: usize, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        out.par_chunks_mut(ncomp)
            .enumerate()
            .for_each(|(site, chunk)| self.derivative_at(data, ncomp, site, axis, chunk));
        out
    }
}

/// A k-form at every site of a torus grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FormField {
    grid: TorusGrid,
    degree: usize,
    data: Vec<f64>,
}

impl FormField {
    pub fn zeros(grid: &TorusGrid, degree: usize) -> Self {
        FormField {
            grid: grid.clone(),
            degree,
            data: vec![0.0; grid.sites() * form_dim(degree)],
        }
    }

    pub fn from_data(grid: &TorusGrid, degree: usize, data: Vec<f64>) -> Result<Self, GridError> {
        let expected = grid.sites() * form_dim(degree);
        if degree > DIM || data.len() != expected {
            return Err(GridError::Shape(format!(
                "{} values for a {degree}-form field on {} sites",
                data.len(),
                grid.sites()
            )));
        }
        Ok(FormField {
            grid: grid.clone(),
            degree,
            data,
        })
    }

    pub fn constant(grid: &TorusGrid, form: &KForm) -> Self {
        let c = form.components();
        let mut data = Vec::with_capacity(grid.sites() * c.len());
        for _ in 0..grid.sites() {
            data.extend_from_slice(c);
        }
        FormField {
            grid: grid.clone(),
            degree: form.degree(),
            data,
        }
    }

    /// Sample `f(position)` at every site.
    pub fn from_fn<F>(grid: &TorusGrid, degree: usize, f: F) -> Self
    where
        F: Fn(&[f64; DIM]) -> KForm + Sync,
    {
        let ncomp = form_dim(degree);
        let mut field = FormField::zeros(grid, degree);
        field
            .data
            .par_chunks_mut(ncomp)
            .enumerate()
            .for_each(|(site, chunk)| {
                let value = f(&grid.position(site));
                assert_eq!(value.degree(), degree, "from_fn closure returned wrong degree");
                chunk.copy_from_slice(value.components());
            });
        field
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn ncomp(&self) -> usize {
        form_dim(self.degree)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, site: usize) -> &[f64] {
        let c = self.ncomp();
        &self.data[site * c..(site + 1) * c]
    }

    pub fn form_at(&self, site: usize) -> KForm {
        KForm::from_components(self.degree, self.at(site).to_vec()).expect("field layout")
    }

    fn check_compatible(&self, other: &FormField) -> Result<(), GridError> {
        if self.grid != other.grid || self.degree != other.degree {
            return Err(GridError::Shape(format!(
                "{}-form on {:?} vs {}-form on {:?}",
                self.degree, self.grid.shape, other.degree, other.grid.shape
            )));
        }
        Ok(())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &FormField) -> Result<FormField, GridError> {
        self.check_compatible(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + c * b)
            .collect();
        Ok(FormField {
            grid: self.grid.clone(),
            degree: self.degree,
            data,
        })
    }

    pub fn add(&self, other: &FormField) -> Result<FormField, GridError> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &FormField) -> Result<FormField, GridError> {
        self.axpy(-1.0, other)
    }

    pub fn scaled(&self, c: f64) -> FormField {
        FormField {
            grid: self.grid.clone(),
            degree: self.degree,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// Multiply the form at each site by a scalar function.
    pub fn scaled_pointwise(&self, scalars: &[f64]) -> Result<FormField, GridError> {
        if scalars.len() != self.grid.sites() {
            return Err(GridError::Shape("scalar field length".into()));
        }
        let c = self.ncomp();
        let mut out = self.clone();
        out.data
            .chunks_mut(c)
            .zip(scalars)
            .for_each(|(chunk, s)| chunk.iter_mut().for_each(|x| *x *= s));
        Ok(out)
    }

    /// Largest absolute component over all sites.
    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Translate the field by `shift` lattice sites along `axis`:
    /// the value at site x moves to x + shift.
    pub fn translated(&self, axis: usize, shift: isize) -> FormField {
        let c = self.ncomp();
        let mut out = self.clone();
        out.data
            .par_chunks_mut(c)
            .enumerate()
            .for_each(|(site, chunk)| {
                let src = self.grid.neighbor(site, axis, -shift);
                chunk.copy_from_slice(&self.data[src * c..(src + 1) * c]);
            });
        out
    }
}

/// A metric at every site, with its smallest eigenvalue as positivity margin.
#[derive(Debug, Clone)]
pub struct MetricField {
    grid: TorusGrid,
    metrics: Vec<Metric>,
}

impl MetricField {
    pub fn constant(grid: &TorusGrid, metric: &Metric) -> Self {
        MetricField {
            grid: grid.clone(),
            metrics: vec![metric.clone(); grid.sites()],
        }
    }

    pub fn from_metrics(grid: &TorusGrid, metrics: Vec<Metric>) -> Result<Self, GridError> {
        if metrics.len() != grid.sites() {
            return Err(GridError::Shape("metric count".into()));
        }
        Ok(MetricField {
            grid: grid.clone(),
            metrics,
        })
    }

    /// Induced metrics of a 3-form field; on failure reports the site with the
    /// worst margin.
    pub fn from_phi(phi: &FormField) -> Result<Self, GridError> {
        MetricField::from_phi_with_floor(phi, 0.0)
    }

    /// As `from_phi`, additionally rejecting sites whose positivity margin
    /// (smallest eigenvalue of B) is below `floor`.
    pub fn from_phi_with_floor(phi: &FormField, floor: f64) -> Result<Self, GridError> {
        if phi.degree != 3 {
            return Err(GridError::Shape("metric needs a 3-form field".into()));
        }
        let results: Vec<Result<Metric, f64>> = (0..phi.grid.sites())
            .into_par_iter()
            .map(|site| match metric_from_components(phi.at(site), floor) {
                Ok(m) => Ok(m),
                Err(G2Error::NotPositive { min_eigenvalue }) => Err(min_eigenvalue),
                Err(G2Error::MarginTooSmall(margin)) => Err(margin),
                Err(_) => Err(f64::NAN),
            })
            .collect();
        let mut worst: Option<(usize, f64)> = None;
        for (site, r) in results.iter().enumerate() {
            if let Err(margin) = r {
                let replace = match worst {
                    None => true,
                    Some((_, w)) => margin.is_nan() || *margin < w,
                };
                if replace {
                    worst = Some((site, *margin));
                }
            }
        }
        if let Some((site, margin)) = worst {
            return Err(GridError::NotPositive {
                site: phi.grid.coords(site),
                margin,
            });
        }
        let metrics = results.into_iter().map(|r| r.expect("checked")).collect();
        Ok(MetricField {
            grid: phi.grid.clone(),
            metrics,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn at(&self, site: usize) -> &Metric {
        &self.metrics[site]
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    /// Smallest metric eigenvalue over all sites.
    pub fn min_eigenvalue(&self) -> f64 {
        self.metrics
            .iter()
            .map(|m| m.min_eigenvalue())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest eigenvalue of the inverse metric over all sites.
    pub fn max_inverse_eigenvalue(&self) -> f64 {
        self.metrics
            .iter()
            .map(|m| m.max_inverse_eigenvalue())
            .fold(0.0, f64::max)
    }

    /// Total Riemannian volume.
    pub fn volume(&self) -> f64 {
        self.metrics.iter().map(|m| m.sqrt_det()).sum::<f64>() * self.grid.cell_volume()
    }
}

fn check_metric_grid(f: &FormField, m: &MetricField) -> Result<(), GridError> {
    if f.grid != m.grid {
        return Err(GridError::Shape("metric field lives on another grid".into()));
    }
    Ok(())
}

/// Discrete exterior derivative.
pub fn ext_d(f: &FormField) -> Result<FormField, GridError> {
    let k = f.degree;
    if k >= DIM {
        return Err(GridError::TopDegree);
    }
    let grid = &f.grid;
    let nin = f.ncomp();
    let mut out = FormField::zeros(grid, k + 1);
    let terms = tables().wedge_terms(1, k);
    let nout = out.ncomp();
    out.data
        .par_chunks_mut(nout)
        .enumerate()
        .for_each(|(site, chunk)| {
            let mut deriv = vec![0.0; DIM * nin];
            for axis in 0..DIM {
                grid.derivative_at(&f.data, nin, site, axis, &mut deriv[axis * nin..(axis + 1) * nin]);
            }
            for t in terms {
                chunk[t.out as usize] += t.sign * deriv[t.a as usize * nin + t.b as usize];
            }
        });
    Ok(out)
}

/// Pointwise Hodge star with the per-site metric.
pub fn hodge_field(f: &FormField, m: &MetricField) -> Result<FormField, GridError> {
    check_metric_grid(f, m)?;
    let k = f.degree;
    let mut out = FormField::zeros(&f.grid, DIM - k);
    let nout = out.ncomp();
    out.data
        .par_chunks_mut(nout)
        .enumerate()
        .for_each(|(site, chunk)| {
            let metric = &m.metrics[site];
            hodge_into(k, f.at(site), metric, chunk);
        });
    Ok(out)
}

/// Codifferential `d* = (-1)^k * d *` on k-forms.
pub fn codiff(f: &FormField, m: &MetricField) -> Result<FormField, GridError> {
    if f.degree == 0 {
        return Err(GridError::ZeroDegree);
    }
    let starred = hodge_field(f, m)?;
    let d = ext_d(&starred)?;
    let back = hodge_field(&d, m)?;
    Ok(if f.degree.is_multiple_of(2) { back } else { back.scaled(-1.0) })
}

/// Hodge Laplacian `d d* + d* d` (nonnegative spectrum).
pub fn hodge_laplacian(f: &FormField, m: &MetricField) -> Result<FormField, GridError> {
    let mut total = FormField::zeros(&f.grid, f.degree);
    if f.degree > 0 {
        total = total.add(&ext_d(&codiff(f, m)?)?)?;
    }
    if f.degree < DIM {
        total = total.add(&codiff(&ext_d(f)?, m)?)?;
    }
    Ok(total)
}

/// Contract a vector field into a form field.
pub fn interior_field(v: &[[f64; DIM]], f: &FormField) -> Result<FormField, GridError> {
    if f.degree == 0 {
        return Err(GridError::Form(FormError::InteriorOfScalar));
    }
    if v.len() != f.grid.sites() {
        return Err(GridError::Shape("vector field length".into()));
    }
    let mut out = FormField::zeros(&f.grid, f.degree - 1);
    let nout = out.ncomp();
    out.data
        .par_chunks_mut(nout)
        .enumerate()
        .for_each(|(site, chunk)| interior_into(&v[site], f.degree, f.at(site), chunk));
    Ok(out)
}

/// Pointwise inner products `<f, g>_m` at every site.
pub fn pointwise_inner(f: &FormField, g: &FormField, m: &MetricField) -> Result<Vec<f64>, GridError> {
    f.check_compatible(g)?;
    check_metric_grid(f, m)?;
    let k = f.degree;
    Ok((0..f.grid.sites())
        .into_par_iter()
        .map(|site| inner_into(k, f.at(site), g.at(site), &m.metrics[site]))
        .collect())
}

/// `sum_sites <f, g>_m vol_m prod h_a`, summed in site order.
pub fn l2_inner(f: &FormField, g: &FormField, m: &MetricField) -> Result<f64, GridError> {
    let local = pointwise_inner(f, g, m)?;
    let sum: f64 = local
        .iter()
        .zip(&m.metrics)
        .map(|(v, metric)| v * metric.sqrt_det())
        .sum();
    Ok(sum * f.grid.cell_volume())
}

pub fn l2_norm(f: &FormField, m: &MetricField) -> Result<f64, GridError> {
    Ok(l2_inner(f, f, m)?.max(0.0).sqrt())
}

/// Initial 3-form data.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    /// The constant model form everywhere.
    Standard,
    /// `phi0 + epsilon d(beta)` with `beta` a seeded band-limited random 2-form.
    ClosedPerturbation { epsilon: f64, seed: u64, band: usize },
    /// A snapshot file.
    File(std::path::PathBuf),
}

/// Random Fourier modes per component of the perturbation potential.
pub const MODES_PER_COMPONENT: usize = 3;

/// Band-limited pseudo-random 2-form: each component is a sum of
/// `MODES_PER_COMPONENT` cosines with integer wavevectors in `[-band, band]^7`.
pub fn random_band_limited(
    grid: &TorusGrid,
    degree: usize,
    seed: u64,
    band: usize,
) -> Result<FormField, GridError> {
    let active: Vec<usize> = (0..DIM).filter(|&a| !grid.is_frozen(a)).collect();
    let n_min = active.iter().map(|&a| grid.shape[a]).min().unwrap_or(1);
    if band == 0 || 2 * band >= n_min {
        return Err(GridError::InvalidBand { band, n: n_min });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = band as i64;
    let ncomp = form_dim(degree);
    let mut modes = Vec::with_capacity(ncomp * MODES_PER_COMPONENT);
    for _ in 0..ncomp {
        for _ in 0..MODES_PER_COMPONENT {
            let mut k = [0i64; DIM];
            while k.iter().all(|x| *x == 0) {
                for &a in &active {
                    k[a] = rng.random_range(-b..=b);
                }
            }
            let amp: f64 = rng.random_range(-1.0..1.0) / MODES_PER_COMPONENT as f64;
            let phase: f64 = rng.random_range(0.0..TAU);
            modes.push((k, amp, phase));
        }
    }
    Ok(FormField::from_fn(grid, degree, |x| {
        let mut comps = vec![0.0; ncomp];
        for (c, value) in comps.iter_mut().enumerate() {
            for (k, amp, phase) in &modes[c * MODES_PER_COMPONENT..(c + 1) * MODES_PER_COMPONENT] {
                let arg: f64 = (0..DIM).map(|a| grid.wavenumber(a, k[a]) * x[a]).sum();
                *value += amp * (arg + phase).cos();
            }
        }
        KForm::from_components(degree, comps).expect("component count")
    }))
}

pub fn make_initial_data(grid: &TorusGrid, kind: &InitialData) -> Result<FormField, GridError> {
    let phi = match kind {
        InitialData::Standard => FormField::constant(grid, &standard_phi()),
        InitialData::ClosedPerturbation {
            epsilon,
            seed,
            band,
        } => {
            let beta = random_band_limited(grid, 2, *seed, *band)?;
            let base = FormField::constant(grid, &standard_phi());
            base.axpy(*epsilon, &ext_d(&beta)?)?
        }
        InitialData::File(path) => {
            let (field, _) = read_snapshot(path)?;
            if field.degree != 3 || field.grid != *grid {
                return Err(GridError::Shape(format!(
                    "snapshot {} does not hold a 3-form on the configured grid",
                    path.display()
                )));
            }
            field
        }
    };
    MetricField::from_phi(&phi)?;
    Ok(phi)
}

pub const SNAPSHOT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header";

/// Write a snapshot: text header, then raw little-endian f64 data.
pub fn write_snapshot(path: &Path, field: &FormField, time: f64) -> Result<(), GridError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write_snapshot_to(&mut out, field, time)?;
    out.flush()?;
    Ok(())
}

pub fn write_snapshot_to<W: Write>(out: &mut W, field: &FormField, time: f64) -> Result<(), GridError> {
    let lengths: Vec<String> = field.grid.lengths.iter().map(|l| format!("{l:?}")).collect();
    writeln!(out, "g2flow-snapshot")?;
    writeln!(out, "format_version {SNAPSHOT_VERSION}")?;
    if let Some(n) = field.grid.uniform_n() {
        writeln!(out, "n {n}")?;
    }
    let shape: Vec<String> = field.grid.shape.iter().map(|n| n.to_string()).collect();
    writeln!(out, "shape {}", shape.join(" "))?;
    writeln!(out, "lengths {}", lengths.join(" "))?;
    writeln!(out, "degree {}", field.degree)?;
    writeln!(out, "fd_order {}", field.grid.order)?;
    writeln!(out, "time {time:?}")?;
    writeln!(out, "byte_order little-endian")?;
    writeln!(out, "layout site-major axis0-fastest component-innermost")?;
    writeln!(out, "values {}", field.data.len())?;
    writeln!(out, "{END_HEADER}")?;
    for v in &field.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(FormField, f64), GridError> {
    read_snapshot_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_snapshot_from<R: BufRead>(input: &mut R) -> Result<(FormField, f64), GridError> {
    let bad = |msg: &str| GridError::Format(msg.to_string());
    let mut header = std::collections::HashMap::new();
    let mut first = true;
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(bad("missing end_header"));
        }
        let line = line.trim_end();
        if first {
            if line != "g2flow-snapshot" {
                return Err(bad("missing magic line"));
            }
            first = false;
            continue;
        }
        if line == END_HEADER {
            break;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| bad("malformed header line"))?;
        header.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| header.get(key).ok_or_else(|| bad(&format!("missing key {key}")));
    let parse_usize = |key: &str| -> Result<usize, GridError> {
        get(key)?.parse().map_err(|_| bad(&format!("bad value for {key}")))
    };
    if parse_usize("format_version")? != SNAPSHOT_VERSION as usize {
        return Err(bad("unsupported format_version"));
    }
    if get("byte_order")? != "little-endian" {
        return Err(bad("unsupported byte_order"));
    }
    let lengths: Vec<f64> = get("lengths")?
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("bad lengths"))?;
    let lengths: [f64; DIM] = lengths.try_into().map_err(|_| bad("need 7 lengths"))?;
    let order = FdOrder::from_int(parse_usize("fd_order")?).ok_or_else(|| bad("bad fd_order"))?;
    let shape: Vec<usize> = get("shape")?
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("bad shape"))?;
    let shape: [usize; DIM] = shape.try_into().map_err(|_| bad("need 7 axis sizes"))?;
    let grid = TorusGrid::with_shape(shape, lengths, order)?;
    let degree = parse_usize("degree")?;
    if degree > DIM {
        return Err(bad("bad degree"));
    }
    let time: f64 = get("time")?.parse().map_err(|_| bad("bad time"))?;
    let count = parse_usize("values")?;
    if count != grid.sites() * form_dim(degree) {
        return Err(bad("value count does not match grid"));
    }
    let mut bytes = Vec::with_capacity(count * 8);
    input.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    Ok((FormField::from_data(&grid, degree, data)?, time))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::testing::random_metric;

    fn grid4() -> TorusGrid {
        TorusGrid::standard(4, FdOrder::Second).unwrap()
    }

    fn identity_field(grid: &TorusGrid) -> MetricField {
        MetricField::constant(grid, &Metric::identity())
    }

    #[test]
    fn grid_validation() {
        assert!(matches!(
            TorusGrid::standard(3, FdOrder::Second),
            Err(GridError::TooFewSites { n: 3, min: 4 })
        ));
        assert!(TorusGrid::standard(5, FdOrder::Fourth).is_err());
        assert!(TorusGrid::new(4, [1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0], FdOrder::Second).is_err());
    }

    #[test]
    fn site_indexing_is_axis0_fastest() {
        let g = grid4();
        assert_eq!(g.site(&[1, 0, 0, 0, 0, 0, 0]), 1);
        assert_eq!(g.site(&[0, 1, 0, 0, 0, 0, 0]), 4);
        assert_eq!(g.coords(4 * 4 + 3), [3, 0, 1, 0, 0, 0, 0]);
        assert_eq!(g.neighbor(3, 0, 1), 0);
        assert_eq!(g.neighbor(0, 1, -1), 12);
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let g = grid4();
        let f = FormField::constant(&g, &standard_phi());
        assert_eq!(ext_d(&f).unwrap().sup_norm(), 0.0);
        assert!(matches!(ext_d(&FormField::zeros(&g, 7)), Err(GridError::TopDegree)));
    }

    #[test]
    fn d_squared_vanishes_for_all_degrees() {
        for order in [FdOrder::Second, FdOrder::Fourth] {
            let n = if order == FdOrder::Second { 4 } else { 6 };
            let g = TorusGrid::new(n, [1.0, 2.0, 1.5, 1.0, 3.0, 1.0, 2.5], order).unwrap();
            for k in 0..=5 {
                let f = random_band_limited(&g, k, 40 + k as u64, 1).unwrap();
                let dd = ext_d(&ext_d(&f).unwrap()).unwrap();
                assert!(dd.sup_norm() < 1e-12 * f.sup_norm().max(1.0) * 10.0, "k={k}: {}", dd.sup_norm());
            }
        }
    }

    fn sine_error(n: usize, order: FdOrder) -> f64 {
        let g = TorusGrid::with_shape([n, n, 1, 1, 1, 1, 1], [2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], order)
            .unwrap();
        let k = TAU / 2.0;
        let f = FormField::from_fn(&g, 1, |x| {
            let mut c = [0.0; DIM];
            c[1] = (k * x[0]).sin();
            KForm::one_form(c)
        });
        let df = ext_d(&f).unwrap();
        let (pos, _) = crate::forms::resolve_indices(&[0, 1]).unwrap().unwrap();
        (0..g.sites())
            .map(|s| {
                let x = g.position(s);
                (df.at(s)[pos] - k * (k * x[0]).cos()).abs()
            })
            .fold(0.0, f64::max)
            / k
    }

    #[test]
    fn exterior_derivative_convergence_order() {
        // n=8 relative error is O(h^2); empirical order from 8 -> 16.
        let e8 = sine_error(8, FdOrder::Second);
        assert!(e8 < 0.15, "relative error {e8}");
        let order2 = (e8 / sine_error(16, FdOrder::Second)).log2();
        assert!((order2 - 2.0).abs() < 0.2, "order {order2}");
        let order4 = (sine_error(8, FdOrder::Fourth) / sine_error(16, FdOrder::Fourth)).log2();
        assert!((order4 - 4.0).abs() < 0.2, "order {order4}");
    }

    #[test]
    fn codifferential_is_adjoint_at_constant_metric() {
        let g = grid4();
        for (k, metric) in [(1, Metric::identity()), (3, Metric::identity()), (2, random_metric(&mut ChaCha8Rng::seed_from_u64(9)))] {
            let m = MetricField::constant(&g, &metric);
            let f = random_band_limited(&g, k, 1, 1).unwrap();
            let h = random_band_limited(&g, k + 1, 2, 1).unwrap();
            let lhs = l2_inner(&ext_d(&f).unwrap(), &h, &m).unwrap();
            let rhs = l2_inner(&f, &codiff(&h, &m).unwrap(), &m).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "k={k}: {lhs} vs {rhs}");
        }
        assert!(matches!(codiff(&FormField::zeros(&g, 0), &identity_field(&g)), Err(GridError::ZeroDegree)));
    }

    #[test]
    fn constant_fields_are_harmonic() {
        let g = grid4();
        let m = identity_field(&g);
        let phi = FormField::constant(&g, &standard_phi());
        assert_eq!(codiff(&phi, &m).unwrap().sup_norm(), 0.0);
        assert_eq!(hodge_laplacian(&phi, &m).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn scalar_laplacian_eigenfunction() {
        let g = TorusGrid::with_shape([8, 4, 4, 1, 1, 1, 1], [2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], FdOrder::Second)
            .unwrap();
        let m = identity_field(&g);
        let k = g.wavenumber(0, 1);
        let f = FormField::from_fn(&g, 0, |x| KForm::scalar((k * x[0]).sin()));
        let lap = hodge_laplacian(&f, &m).unwrap();
        // the centered stencil composed with itself has eigenvalue (sin(kh)/h)^2
        let lambda = g.discrete_wavenumber(0, 1).powi(2);
        for s in 0..g.sites() {
            assert!((lap.at(s)[0] - lambda * f.at(s)[0]).abs() < 1e-12);
        }
        assert!((lambda / (k * k) - 1.0).abs() < 0.2);
    }

    #[test]
    fn laplacian_commutes_with_d() {
        let g = grid4();
        let m = identity_field(&g);
        let f = random_band_limited(&g, 2, 5, 1).unwrap();
        let a = ext_d(&hodge_laplacian(&f, &m).unwrap()).unwrap();
        let b = hodge_laplacian(&ext_d(&f).unwrap(), &m).unwrap();
        assert!(a.sub(&b).unwrap().sup_norm() < 1e-11 * a.sup_norm().max(1.0));
    }

    #[test]
    fn l2_examples() {
        let g = grid4();
        let m = identity_field(&g);
        let phi = FormField::constant(&g, &standard_phi());
        let norm2 = l2_inner(&phi, &phi, &m).unwrap();
        assert!((norm2 - 7.0 * g.torus_volume()).abs() < 1e-9 * norm2);
        let a = random_band_limited(&g, 3, 1, 1).unwrap();
        let b = random_band_limited(&g, 3, 2, 1).unwrap();
        assert_eq!(l2_inner(&a, &b, &m).unwrap(), l2_inner(&b, &a, &m).unwrap());
        let c = 2.75;
        let lhs = l2_inner(&a.scaled(c), &b, &m).unwrap();
        let scale = l2_norm(&a.scaled(c), &m).unwrap() * l2_norm(&b, &m).unwrap();
        assert!((lhs - c * l2_inner(&a, &b, &m).unwrap()).abs() < 1e-14 * scale);
        assert!(l2_inner(&a, &FormField::zeros(&g, 2), &m).is_err());
    }

    #[test]
    fn initial_data_variants() {
        let g = grid4();
        let standard = make_initial_data(&g, &InitialData::Standard).unwrap();
        assert_eq!(ext_d(&standard).unwrap().sup_norm(), 0.0);
        let zero_eps = make_initial_data(
            &g,
            &InitialData::ClosedPerturbation { epsilon: 0.0, seed: 1, band: 1 },
        )
        .unwrap();
        assert_eq!(zero_eps, standard);
        let pert = make_initial_data(
            &g,
            &InitialData::ClosedPerturbation { epsilon: 0.01, seed: 1, band: 1 },
        )
        .unwrap();
        assert!(pert.sub(&standard).unwrap().sup_norm() > 1e-4);
        assert!(ext_d(&pert).unwrap().sup_norm() < 1e-12);
        let huge = make_initial_data(
            &g,
            &InitialData::ClosedPerturbation { epsilon: 50.0, seed: 1, band: 1 },
        );
        assert!(matches!(huge, Err(GridError::NotPositive { .. })));
        assert!(matches!(
            random_band_limited(&g, 2, 1, 2),
            Err(GridError::InvalidBand { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let g = grid4();
        let f = random_band_limited(&g, 3, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_snapshot_to(&mut buf, &f, 0.125).unwrap();
        let (back, t) = read_snapshot_from(&mut &buf[..]).unwrap();
        assert_eq!(t, 0.125);
        assert_eq!(back, f);
        let header_end = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(buf.len() - header_end, f.data().len() * 8);
        assert_eq!(&buf[header_end..header_end + 8], &f.data()[0].to_le_bytes());

        let mut truncated = buf.clone();
        truncated.pop();
        assert!(matches!(read_snapshot_from(&mut &truncated[..]), Err(GridError::Format(_))));
    }

    #[test]
    fn translation_commutes_with_d() {
        let g = grid4();
        let f = random_band_limited(&g, 2, 8, 1).unwrap();
        let a = ext_d(&f.translated(3, 1)).unwrap();
        let b = ext_d(&f).unwrap().translated(3, 1);
        assert_eq!(a, b);
    }
}

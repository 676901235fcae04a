//! Principal symbols of the linearized flow operators and the positivity
//! check on the kernel of the symbol of `d`.
//!
//! Sign convention: `S` is defined by `DE[eta e^{i s <xi,x>}] = (-s^2 S eta
//! + O(s)) e^{i s <xi,x>}`, so the heat operator `-Delta` on functions has
//! `S = |xi|^2`.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::forms::{form_dim, wedge_into, FormError, KForm, Matrix7, Vector, DIM};
use crate::flows::{rhs_deturck, rhs_laplacian, rhs_modified_coflow, FlowError, FlowState};
use crate::g2::{
    inverse_linearized_psi, is_positive, linearized_metric, linearized_psi_fast, standard_phi,
    G2Error, G2Structure,
};
use crate::grid::{hodge_laplacian, FdOrder, FormField, GridError, MetricField, TorusGrid};

/// Relative threshold (against the operator 2-norm of `S`) for a strictly
/// positive real part.
pub const POSITIVITY_TOLERANCE: f64 = 1e-8;

/// Eigenvalues of `M^T M` below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

const SCHUR_EPSILON: f64 = 1e-14;
const SCHUR_MAX_ITERATIONS: usize = 10_000;
const SCHUR_RETRIES: usize = 8;

#[derive(Debug, Error)]
pub enum SymbolError {
    #[error("covector must be a nonzero 1-form")]
    BadCovector,
    #[error("base point: {0}")]
    BasePoint(#[from] G2Error),
    #[error("kernel of the symbol of d on {degree}-forms has dimension {got}, expected {expected}")]
    KernelDimension {
        degree: usize,
        expected: usize,
        got: usize,
    },
    #[error("covector {xi:?} is not a wavevector of the grid; nearest compatible covector {suggestion:?}")]
    IncompatibleCovector { xi: [f64; DIM], suggestion: [f64; DIM] },
    #[error("plane-wave fit needs discrete wavevectors at k and 2k to be parallel: {0}")]
    UnfittableWave(String),
    #[error("eigenvalue iteration did not converge")]
    EigenSolver,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Form(#[from] FormError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatorKind {
    /// DeTurck-gauged Laplacian flow, acting on 3-forms.
    Deturck,
    /// Gauged modified co-flow, acting on 4-forms.
    GaugedModifiedCoflow { a: f64 },
    /// Ungauged Laplacian flow; exploratory, no positivity is expected.
    Laplacian,
}

impl OperatorKind {
    pub fn from_name(name: &str, a: f64) -> Option<Self> {
        match name {
            "deturck" => Some(OperatorKind::Deturck),
            "gauged_modified_coflow" => Some(OperatorKind::GaugedModifiedCoflow { a }),
            "laplacian" => Some(OperatorKind::Laplacian),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Deturck => "deturck",
            OperatorKind::GaugedModifiedCoflow { .. } => "gauged_modified_coflow",
            OperatorKind::Laplacian => "laplacian",
        }
    }

    /// Degree of the forms the linearized operator acts on.
    pub fn degree(&self) -> usize {
        match self {
            OperatorKind::GaugedModifiedCoflow { .. } => 4,
            _ => 3,
        }
    }

    pub fn a(&self) -> f64 {
        match self {
            OperatorKind::GaugedModifiedCoflow { a } => *a,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolProblem {
    kind: OperatorKind,
    structure: G2Structure,
    xi: [f64; DIM],
    negated: bool,
}

impl SymbolProblem {
    pub fn new(kind: OperatorKind, phi: KForm, xi: &KForm) -> Result<Self, SymbolError> {
        if xi.degree() != 1 || xi.max_abs() == 0.0 || !xi.components().iter().all(|x| x.is_finite()) {
            return Err(SymbolError::BadCovector);
        }
        let mut c = [0.0; DIM];
        c.copy_from_slice(xi.components());
        Ok(SymbolProblem {
            kind,
            structure: G2Structure::new(phi)?,
            xi: c,
            negated: false,
        })
    }

    /// Test hook: flip the sign of the operator.
    pub fn negated(mut self) -> Self {
        self.negated = !self.negated;
        self
    }

    pub fn with_xi(&self, xi: [f64; DIM]) -> Result<Self, SymbolError> {
        let mut p = SymbolProblem::new(self.kind, self.structure.phi().clone(), &KForm::one_form(xi))?;
        p.negated = self.negated;
        Ok(p)
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn phi(&self) -> &KForm {
        self.structure.phi()
    }

    pub fn xi(&self) -> [f64; DIM] {
        self.xi
    }

    pub fn is_negated(&self) -> bool {
        self.negated
    }
}

/// Matrix of `xi ^ .` from k-forms to (k+1)-forms.
pub fn sigma_l(xi: &KForm, degree: usize) -> Result<DMatrix<f64>, SymbolError> {
    if xi.degree() != 1 || xi.max_abs() == 0.0 {
        return Err(SymbolError::BadCovector);
    }
    if degree >= DIM {
        return Err(FormError::DegreeOverflow(1, degree).into());
    }
    let rows = form_dim(degree + 1);
    let cols = form_dim(degree);
    let mut m = DMatrix::zeros(rows, cols);
    for b in 0..cols {
        let mut e = vec![0.0; cols];
        e[b] = 1.0;
        let mut out = vec![0.0; rows];
        wedge_into(1, xi.components(), degree, &e, &mut out);
        m.set_column(b, &DVector::from_vec(out));
    }
    Ok(m)
}

/// `dim ker (xi ^ .)` on k-forms for nonzero xi: `C(6, k-1)`.
pub fn expected_kernel_dimension(degree: usize) -> usize {
    if degree == 0 {
        0
    } else {
        crate::forms::binomial(DIM - 1, degree - 1)
    }
}

/// Orthonormal basis (columns) of the null space, from the eigenvectors of
/// `M^T M` with eigenvalues below the rank tolerance.
fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let cols: Vec<DVector<f64>> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] <= RANK_TOLERANCE * max.max(f64::MIN_POSITIVE))
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(m.ncols(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn wedge_covector(xi: &[f64; DIM], k: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; form_dim(k + 1)];
    wedge_into(1, xi, k, a, &mut out);
    out
}

fn star(k: usize, a: &[f64], s: &G2Structure) -> Vec<f64> {
    let form = KForm::from_components(k, a.to_vec()).expect("component count");
    form.hodge(s.metric()).into_components()
}

/// `sigma_V^k = g^{kl} g^{ij} (xi_i h_jl - 1/2 xi_l h_ij)` for `h = Dg[eta]`.
fn vector_symbol(xi: &[f64; DIM], h: &Matrix7, g_inv: &Matrix7) -> [f64; DIM] {
    let mut w = [0.0; DIM];
    for (l, wl) in w.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..DIM {
            for j in 0..DIM {
                acc += g_inv[(i, j)] * (xi[i] * h[(j, l)] - 0.5 * xi[l] * h[(i, j)]);
            }
        }
        *wl = acc;
    }
    let mut v = [0.0; DIM];
    for (k, vk) in v.iter_mut().enumerate() {
        *vk = (0..DIM).map(|l| g_inv[(k, l)] * w[l]).sum();
    }
    v
}

/// `S eta` for a single basis direction.
fn symbol_column(p: &SymbolProblem, column: usize) -> Result<Vec<f64>, SymbolError> {
    let s = &p.structure;
    let xi = &p.xi;
    let k = p.kind.degree();
    let mut e = vec![0.0; form_dim(k)];
    e[column] = 1.0;
    let basis = KForm::from_components(k, e)?;
    let mut out = match p.kind {
        OperatorKind::Deturck | OperatorKind::Laplacian => {
            // d d* phi contributes -xi ^ *(xi ^ J eta)
            let j_eta = linearized_psi_fast(s, &basis)?;
            let inner = star(5, &wedge_covector(xi, 4, j_eta.components()), s);
            let mut col: Vec<f64> = wedge_covector(xi, 2, &inner).iter().map(|x| -x).collect();
            if p.kind == OperatorKind::Deturck {
                // d i_V phi contributes xi ^ i_{sigma_V} phi
                let h = linearized_metric(s, &basis)?;
                let v = vector_symbol(xi, &h, s.metric().g_inv());
                let contracted = s.phi().interior(&Vector(v))?;
                for (c, x) in col.iter_mut().zip(wedge_covector(xi, 2, contracted.components())) {
                    *c += x;
                }
            } else {
                // d* d phi contributes *(xi ^ *(xi ^ eta))
                let inner = star(4, &wedge_covector(xi, 3, basis.components()), s);
                let outer = star(4, &wedge_covector(xi, 3, &inner), s);
                for (c, x) in col.iter_mut().zip(outer) {
                    *c += x;
                }
            }
            col
        }
        OperatorKind::GaugedModifiedCoflow { .. } => {
            let eta = inverse_linearized_psi(s, &basis)?;
            let xi_eta = wedge_covector(xi, 3, eta.components());
            // d d* psi contributes xi ^ *(xi ^ eta)
            let mut col = wedge_covector(xi, 3, &star(4, &xi_eta, s));
            // -2 d(Tr T phi) contributes -1/2 <xi ^ eta, psi> xi ^ phi
            let four = KForm::from_components(4, xi_eta)?;
            let pairing = four.inner(s.psi(), s.metric())?;
            let xi_phi = wedge_covector(xi, 3, s.phi().components());
            for (c, x) in col.iter_mut().zip(&xi_phi) {
                *c -= 0.5 * pairing * x;
            }
            // d i_V psi contributes xi ^ i_{sigma_V} psi
            let h = linearized_metric(s, &eta)?;
            let v = vector_symbol(xi, &h, s.metric().g_inv());
            let contracted = s.psi().interior(&Vector(v))?;
            for (c, x) in col.iter_mut().zip(wedge_covector(xi, 3, contracted.components())) {
                *c += x;
            }
            col
        }
    };
    if p.negated {
        out.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(out)
}

/// The 35x35 principal symbol with coefficients frozen at the base point.
pub fn assemble_symbol_exact(p: &SymbolProblem) -> Result<DMatrix<f64>, SymbolError> {
    let n = form_dim(p.kind.degree());
    let mut m = DMatrix::zeros(n, n);
    for b in 0..n {
        m.set_column(b, &DVector::from_vec(symbol_column(p, b)?));
    }
    Ok(m)
}

/// Eigenvalues of a general real matrix. Restricted symbols are often close
/// to a multiple of the identity, a tight cluster the QR iteration will not
/// deflate, so the mean diagonal is shifted out first. If the iteration
/// still stalls the matrix is conjugated by seeded random rotations.
fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, SymbolError> {
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mu = m.trace() / n as f64;
    let m = m - DMatrix::<f64>::identity(n, n) * mu;
    let unshift = |s: Schur<f64, nalgebra::Dyn>| -> Vec<Complex<f64>> {
        s.complex_eigenvalues().iter().map(|z| z + mu).collect()
    };
    if let Some(s) = Schur::try_new(m.clone(), SCHUR_EPSILON, SCHUR_MAX_ITERATIONS) {
        return Ok(unshift(s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..SCHUR_RETRIES {
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let conjugated = q.transpose() * &m * &q;
        if let Some(s) = Schur::try_new(conjugated, SCHUR_EPSILON, SCHUR_MAX_ITERATIONS) {
            return Ok(unshift(s));
        }
    }
    Err(SymbolError::EigenSolver)
}

/// Result of `check_integrability`.
#[derive(Debug, Clone)]
pub struct SymbolReport {
    pub kind: OperatorKind,
    pub negated: bool,
    pub xi: [f64; DIM],
    pub symbol: DMatrix<f64>,
    /// Orthonormal columns spanning the kernel of `xi ^ .`.
    pub kernel_basis: DMatrix<f64>,
    /// Eigenvalues of `K^T S K`, sorted by real part.
    pub restricted_spectrum: Vec<Complex<f64>>,
    pub min_real_part: f64,
    /// Operator 2-norm of `S`.
    pub symbol_norm: f64,
    /// `|(I - K K^T) S K|_F / |S|_F`.
    pub invariance_defect: f64,
    pub verdict: bool,
}

pub fn check_integrability(p: &SymbolProblem) -> Result<SymbolReport, SymbolError> {
    let degree = p.kind.degree();
    let symbol = assemble_symbol_exact(p)?;
    let sl = sigma_l(&KForm::one_form(p.xi), degree)?;
    let kernel_basis = null_space(&sl);
    let expected = expected_kernel_dimension(degree);
    if kernel_basis.ncols() != expected {
        return Err(SymbolError::KernelDimension {
            degree,
            expected,
            got: kernel_basis.ncols(),
        });
    }
    let sk = &symbol * &kernel_basis;
    let restricted = kernel_basis.transpose() * &sk;
    let leak = &sk - &kernel_basis * &restricted;
    let frobenius = symbol.norm();
    let invariance_defect = if frobenius > 0.0 { leak.norm() / frobenius } else { 0.0 };
    let symbol_norm = symbol.singular_values().max();
    let mut restricted_spectrum = eigenvalues(&restricted)?;
    restricted_spectrum.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let min_real_part = restricted_spectrum
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    let verdict = min_real_part > POSITIVITY_TOLERANCE * symbol_norm;
    Ok(SymbolReport {
        kind: p.kind,
        negated: p.negated,
        xi: p.xi,
        symbol,
        kernel_basis,
        restricted_spectrum,
        min_real_part,
        symbol_norm,
        invariance_defect,
        verdict,
    })
}

/// Eigenvalues grouped by value, e.g. `{1.00000000 x15}`.
pub fn spectrum_summary(spectrum: &[Complex<f64>], tol: f64) -> String {
    let mut groups: Vec<(Complex<f64>, usize)> = Vec::new();
    for z in spectrum {
        match groups.iter_mut().find(|(c, _)| (c - z).norm() <= tol) {
            Some((_, count)) => *count += 1,
            None => groups.push((*z, 1)),
        }
    }
    let parts: Vec<String> = groups
        .iter()
        .map(|(z, count)| {
            if z.im.abs() <= tol {
                format!("{:.8} x{count}", z.re)
            } else {
                format!("{:.8}{:+.8}i x{count}", z.re, z.im)
            }
        })
        .collect();
    format!("{{{}}}", parts.join(", "))
}

impl SymbolReport {
    pub fn kernel_dimension(&self) -> usize {
        self.kernel_basis.ncols()
    }

    /// `key: value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let xi: Vec<String> = self.xi.iter().map(|x| format!("{x:.12}")).collect();
        let _ = writeln!(s, "operator: {}", self.kind.name());
        let _ = writeln!(s, "a: {}", self.kind.a());
        let _ = writeln!(s, "negated: {}", self.negated);
        let _ = writeln!(s, "degree: {}", self.kind.degree());
        let _ = writeln!(s, "xi: [{}]", xi.join(", "));
        let _ = writeln!(s, "kernel_dimension: {}", self.kernel_dimension());
        let _ = writeln!(s, "symbol_norm: {:.12e}", self.symbol_norm);
        let _ = writeln!(s, "invariance_defect: {:.3e}", self.invariance_defect);
        let _ = writeln!(s, "min_real_part: {:.12e}", self.min_real_part);
        let _ = writeln!(s, "spectrum: {}", spectrum_summary(&self.restricted_spectrum, 1e-8));
        let _ = writeln!(s, "verdict: {}", if self.verdict { "positive" } else { "not positive" });
        s
    }
}

pub const SPECTRA_CSV_VERSION: u32 = 1;

/// One row per restricted eigenvalue.
pub fn spectra_csv(reports: &[SymbolReport]) -> String {
    let mut s = format!("# g2flow symbol spectra v{SPECTRA_CSV_VERSION}\n");
    s.push_str("sample,operator,a,min_real_part,invariance_defect,verdict,index,re,im\n");
    for (i, r) in reports.iter().enumerate() {
        for (j, z) in r.restricted_spectrum.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{:.16e},{:.16e},{},{j},{:.16e},{:.16e}",
                r.kind.name(),
                r.kind.a(),
                r.min_real_part,
                r.invariance_defect,
                r.verdict,
                z.re,
                z.im
            );
        }
    }
    s
}

/// `phi0 + delta` with components of `delta` uniform in `[-radius, radius]`
/// (resampled until positive) and `xi` uniform on the unit sphere.
pub fn random_problem<R: Rng>(rng: &mut R, kind: OperatorKind, radius: f64) -> Result<SymbolProblem, SymbolError> {
    let base = standard_phi();
    let phi = loop {
        let mut phi = base.clone();
        for c in phi.components_mut() {
            *c += rng.random_range(-radius..=radius);
        }
        let p = is_positive(&phi);
        if p.positive && p.margin >= crate::g2::MIN_PROBE_MARGIN {
            break phi;
        }
    };
    let xi = loop {
        let v: [f64; DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    SymbolProblem::new(kind, phi, &KForm::one_form(xi))
}

/// `count` random problems drawn in order from `seed`.
pub fn sweep_problems(kind: OperatorKind, count: usize, radius: f64, seed: u64) -> Result<Vec<SymbolProblem>, SymbolError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_problem(&mut rng, kind, radius)).collect()
}

/// Checks problems in parallel; results are in input order.
pub fn check_all(problems: &[SymbolProblem]) -> Result<Vec<SymbolReport>, SymbolError> {
    problems.par_iter().map(check_integrability).collect()
}

pub fn sweep(kind: OperatorKind, count: usize, radius: f64, seed: u64) -> Result<Vec<SymbolReport>, SymbolError> {
    check_all(&sweep_problems(kind, count, radius, seed)?)
}

/// Symbol read off from discrete plane waves.
#[derive(Debug, Clone)]
pub struct PlaneWaveSymbol {
    /// Integer mode numbers of the wave.
    pub wavevector: [i64; DIM],
    /// Discrete wavevector the stencils actually see.
    pub xi_discrete: [f64; DIM],
    pub matrix: DMatrix<f64>,
}

/// Integer mode numbers of `xi` on the grid, or the nearest compatible covector.
pub fn grid_wavevector(grid: &TorusGrid, xi: &[f64; DIM]) -> Result<[i64; DIM], SymbolError> {
    let mut k = [0i64; DIM];
    let mut ok = true;
    for a in 0..DIM {
        let m = xi[a] * grid.lengths()[a] / TAU;
        let r = m.round();
        if (m - r).abs() > 1e-9 * m.abs().max(1.0) {
            ok = false;
        }
        k[a] = if grid.is_frozen(a) {
            if r != 0.0 {
                ok = false;
            }
            0
        } else {
            r as i64
        };
    }
    if !ok || k.iter().all(|x| *x == 0) {
        let suggestion = std::array::from_fn(|a| grid.wavenumber(a, k[a]));
        return Err(SymbolError::IncompatibleCovector { xi: *xi, suggestion });
    }
    Ok(k)
}

fn doubled(k: &[i64; DIM]) -> [i64; DIM] {
    k.map(|x| 2 * x)
}

fn discrete_xi(grid: &TorusGrid, k: &[i64; DIM]) -> [f64; DIM] {
    std::array::from_fn(|a| {
        if grid.is_frozen(a) {
            0.0
        } else {
            grid.discrete_wavenumber(a, k[a])
        }
    })
}

/// The ratio `c` with `xi_d(2k) = c xi_d(k)`.
fn doubling_ratio(grid: &TorusGrid, k: &[i64; DIM]) -> Result<f64, SymbolError> {
    let x1 = discrete_xi(grid, k);
    let x2 = discrete_xi(grid, &doubled(k));
    let mut ratio: Option<f64> = None;
    for a in (0..DIM).filter(|&a| k[a] != 0) {
        if x1[a].abs() <= 1e-12 * grid.wavenumber(a, k[a]).abs() {
            return Err(SymbolError::UnfittableWave(format!("mode {} on axis {a} is invisible to the stencil", k[a])));
        }
        let c = x2[a] / x1[a];
        match ratio {
            None => ratio = Some(c),
            Some(r) if (r - c).abs() <= 1e-10 * r.abs().max(1.0) => {}
            Some(_) => {
                return Err(SymbolError::UnfittableWave(
                    "use mode numbers with equal |k_a h_a| on all active axes".into(),
                ))
            }
        }
    }
    let c = ratio.expect("nonzero wavevector");
    if (1.0 - c * c).abs() < 1e-6 {
        return Err(SymbolError::UnfittableWave("k and 2k see the same discrete frequency".into()));
    }
    Ok(c)
}

/// Restriction of the grid to the axes a plane wave varies along. Fields
/// constant along the remaining axes evolve identically on the smaller grid.
fn active_grid(grid: &TorusGrid, k: &[i64; DIM]) -> Result<TorusGrid, SymbolError> {
    let shape = std::array::from_fn(|a| if k[a] != 0 { grid.shape()[a] } else { 1 });
    Ok(TorusGrid::with_shape(shape, *grid.lengths(), grid.order())?)
}

fn cosine_field(grid: &TorusGrid, wave: &[i64; DIM]) -> Vec<f64> {
    (0..grid.sites())
        .map(|site| {
            let x = grid.position(site);
            (0..DIM).map(|a| grid.wavenumber(a, wave[a]) * x[a]).sum::<f64>().cos()
        })
        .collect()
}

/// Cosine coefficient of every component of a field.
fn cosine_coefficients(field: &FormField, cosines: &[f64]) -> Vec<f64> {
    let n = field.ncomp();
    let norm2: f64 = cosines.iter().map(|c| c * c).sum();
    let mut out = vec![0.0; n];
    for (site, c) in cosines.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(field.at(site)) {
            *o += v * c;
        }
    }
    out.iter_mut().for_each(|o| *o /= norm2);
    out
}

fn operator_rhs(kind: OperatorKind, state: &FlowState) -> Result<FormField, SymbolError> {
    Ok(match kind {
        OperatorKind::Deturck => rhs_deturck(state)?,
        OperatorKind::Laplacian => rhs_laplacian(state)?,
        OperatorKind::GaugedModifiedCoflow { a } => rhs_modified_coflow(state, a, true)?,
    })
}

/// Cosine coefficient of the linearized response to `direction * cos(wave . x)`,
/// by a symmetric difference in the amplitude. For the co-flow the direction
/// is a 4-form perturbation of psi.
fn planewave_response(
    p: &SymbolProblem,
    grid: &TorusGrid,
    wave: &[i64; DIM],
    direction: &KForm,
) -> Result<Vec<f64>, SymbolError> {
    let eta = if p.kind.degree() == 4 {
        inverse_linearized_psi(&p.structure, direction)?
    } else {
        direction.clone()
    };
    let cosines = cosine_field(grid, wave);
    let norm = eta.coefficient_norm();
    if norm == 0.0 {
        return Ok(vec![0.0; form_dim(p.kind.degree())]);
    }
    let delta = 1e-4 * p.phi().coefficient_norm() / norm;
    let base = FormField::constant(grid, p.phi());
    let wave_field = FormField::constant(grid, &eta).scaled_pointwise(&cosines)?;
    let response = |h: f64| -> Result<FormField, SymbolError> {
        let state = FlowState::new(base.axpy(h, &wave_field)?, 0.0)?;
        operator_rhs(p.kind, &state)
    };
    let diff = response(delta)?.sub(&response(-delta)?)?.scaled(0.5 / delta);
    let sign = if p.negated { -1.0 } else { 1.0 };
    Ok(cosine_coefficients(&diff, &cosines).iter().map(|x| sign * x).collect())
}

/// Combine responses at k and 2k: `Re L(k) = -S(xi_d(k)) + C`.
fn fit_two_waves<F>(grid: &TorusGrid, k: &[i64; DIM], n: usize, column: F) -> Result<PlaneWaveSymbol, SymbolError>
where
    F: Fn(usize, &[i64; DIM]) -> Result<Vec<f64>, SymbolError> + Sync,
{
    let c = doubling_ratio(grid, k)?;
    let k2 = doubled(k);
    let columns = (0..n)
        .into_par_iter()
        .map(|b| -> Result<Vec<f64>, SymbolError> {
            let one = column(b, k)?;
            let two = column(b, &k2)?;
            Ok(one.iter().zip(&two).map(|(l1, l2)| (l2 - l1) / (1.0 - c * c)).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows = columns.first().map_or(0, |c| c.len());
    let matrix = DMatrix::from_fn(rows, n, |r, b| columns[b][r]);
    Ok(PlaneWaveSymbol {
        wavevector: *k,
        xi_discrete: discrete_xi(grid, k),
        matrix,
    })
}

/// Independent estimate of the symbol from the discrete flow operator on a
/// grid with coefficients frozen at the base point. The result belongs to
/// the discrete wavevector `xi_discrete`, not to `xi` itself.
pub fn extract_symbol_planewave(p: &SymbolProblem, grid: &TorusGrid) -> Result<PlaneWaveSymbol, SymbolError> {
    let k = grid_wavevector(grid, &p.xi)?;
    let work = active_grid(grid, &k)?;
    let degree = p.kind.degree();
    fit_two_waves(&work, &k, form_dim(degree), |b, wave| {
        let mut e = vec![0.0; form_dim(degree)];
        e[b] = 1.0;
        planewave_response(p, &work, wave, &KForm::from_components(degree, e)?)
    })
}

/// Plane-wave extraction for the heat operator `-Delta` on functions with the
/// flat metric; returns the 1x1 symbol.
pub fn extract_scalar_heat(grid: &TorusGrid, xi: &[f64; DIM]) -> Result<PlaneWaveSymbol, SymbolError> {
    let k = grid_wavevector(grid, xi)?;
    let work = active_grid(grid, &k)?;
    let metric = MetricField::constant(&work, &crate::forms::Metric::identity());
    fit_two_waves(&work, &k, 1, |_, wave| {
        let cosines = cosine_field(&work, wave);
        let u = FormField::from_data(&work, 0, cosines.clone())?;
        let heat = hodge_laplacian(&u, &metric)?.scaled(-1.0);
        Ok(cosine_coefficients(&heat, &cosines))
    })
}

/// Default grid for plane-wave extraction: `n` sites on every axis of
/// length `2 pi`, order-2 stencils.
pub fn planewave_grid(n: usize) -> Result<TorusGrid, SymbolError> {
    Ok(TorusGrid::standard(n, FdOrder::Second)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(a: usize) -> [f64; DIM] {
        let mut x = [0.0; DIM];
        x[a] = 1.0;
        x
    }

    fn problem(kind: OperatorKind, xi: [f64; DIM]) -> SymbolProblem {
        SymbolProblem::new(kind, standard_phi(), &KForm::one_form(xi)).unwrap()
    }

    fn perturbed_problem(kind: OperatorKind, seed: u64) -> SymbolProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_problem(&mut rng, kind, 0.1).unwrap()
    }

    fn assert_all_near(spectrum: &[Complex<f64>], value: f64, tol: f64) {
        for z in spectrum {
            assert!((z.re - value).abs() < tol && z.im.abs() < tol, "{z}");
        }
    }

    fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn kernel_dimensions() {
        let xi = KForm::one_form([0.3, -1.0, 0.2, 0.0, 0.5, 0.1, -0.7]);
        for (k, expected) in [(3, 15), (4, 20)] {
            let m = sigma_l(&xi, k).unwrap();
            assert_eq!(null_space(&m).ncols(), expected);
            assert_eq!(expected_kernel_dimension(k), expected);
        }
    }

    #[test]
    fn sigma_l_squares_to_zero() {
        let xi = KForm::one_form([0.3, -1.0, 0.2, 0.0, 0.5, 0.1, -0.7]);
        let composed = sigma_l(&xi, 3).unwrap() * sigma_l(&xi, 2).unwrap();
        assert!(composed.amax() < 1e-14);
    }

    #[test]
    fn zero_covector_is_rejected() {
        assert!(matches!(
            SymbolProblem::new(OperatorKind::Deturck, standard_phi(), &KForm::one_form([0.0; DIM])),
            Err(SymbolError::BadCovector)
        ));
    }

    #[test]
    fn deturck_at_standard_point_is_identity_on_kernel() {
        for a in 0..DIM {
            let r = check_integrability(&problem(OperatorKind::Deturck, axis(a))).unwrap();
            assert_eq!(r.kernel_dimension(), 15);
            assert_eq!(r.restricted_spectrum.len(), 15);
            assert_all_near(&r.restricted_spectrum, 1.0, 1e-8);
            assert!(r.invariance_defect < 1e-10, "{}", r.invariance_defect);
            assert!(r.verdict);
        }
    }

    #[test]
    fn coflow_at_standard_point_is_identity_on_kernel() {
        for a in [0.0, 1.0, -3.0] {
            let kind = OperatorKind::GaugedModifiedCoflow { a };
            let r = check_integrability(&problem(kind, axis(2))).unwrap();
            assert_eq!(r.kernel_dimension(), 20);
            assert_all_near(&r.restricted_spectrum, 1.0, 1e-8);
            assert!(r.verdict);
        }
    }

    #[test]
    fn spectrum_is_rotation_invariant_at_standard_point() {
        let xi = [0.5, -0.5, 0.5, 0.0, 0.5, 0.0, 0.0];
        let r = check_integrability(&problem(OperatorKind::Deturck, xi)).unwrap();
        assert_all_near(&r.restricted_spectrum, 1.0, 1e-8);
    }

    #[test]
    fn symbol_is_quadratic_in_xi() {
        let p = perturbed_problem(OperatorKind::Deturck, 3);
        let s1 = assemble_symbol_exact(&p).unwrap();
        let xi2 = p.xi().map(|x| 2.5 * x);
        let s2 = assemble_symbol_exact(&p.with_xi(xi2).unwrap()).unwrap();
        assert!(relative(&s2, &(s1 * 6.25)) < 1e-12);
    }

    #[test]
    fn negation_flips_verdict() {
        let p = problem(OperatorKind::Deturck, axis(0)).negated();
        let r = check_integrability(&p).unwrap();
        assert!(!r.verdict);
        assert_all_near(&r.restricted_spectrum, -1.0, 1e-8);
    }

    #[test]
    fn small_sweeps_are_positive() {
        for kind in [OperatorKind::Deturck, OperatorKind::GaugedModifiedCoflow { a: 0.5 }] {
            let reports = sweep(kind, 6, 0.1, 11).unwrap();
            assert_eq!(reports.len(), 6);
            for r in &reports {
                assert!(r.verdict, "{}", r.to_text());
            }
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let a = sweep(OperatorKind::Deturck, 3, 0.1, 5).unwrap();
        let b = sweep(OperatorKind::Deturck, 3, 0.1, 5).unwrap();
        assert_eq!(spectra_csv(&a), spectra_csv(&b));
    }

    #[test]
    fn report_text_has_keys() {
        let r = check_integrability(&problem(OperatorKind::Deturck, axis(1))).unwrap();
        let text = r.to_text();
        for key in ["operator:", "kernel_dimension: 15", "min_real_part:", "spectrum: {1.00000000 x15}", "verdict: positive"] {
            assert!(text.contains(key), "{text}");
        }
    }

    #[test]
    fn spectra_csv_rows() {
        let r = check_integrability(&problem(OperatorKind::GaugedModifiedCoflow { a: 1.0 }, axis(4))).unwrap();
        let csv = spectra_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# g2flow symbol spectra v1"));
        assert_eq!(lines.len(), 2 + 20);
    }

    #[test]
    fn incompatible_covector_suggests_grid_wave() {
        let grid = planewave_grid(4).unwrap();
        match grid_wavevector(&grid, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]) {
            Err(SymbolError::IncompatibleCovector { suggestion, .. }) => {
                assert!((suggestion[0] - 1.0).abs() < 1e-12 || suggestion[0].abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(grid_wavevector(&grid, &axis(3)).unwrap(), [0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn nyquist_doubling_is_fittable_but_parallel_failure_is_not() {
        let grid = planewave_grid(8).unwrap();
        assert!(doubling_ratio(&grid, &[1, 0, 0, 0, 0, 0, 0]).is_ok());
        assert!(matches!(
            doubling_ratio(&grid, &[1, 2, 0, 0, 0, 0, 0]),
            Err(SymbolError::UnfittableWave(_))
        ));
    }

    #[test]
    fn scalar_heat_extraction_matches_discrete_wavenumber() {
        let grid = planewave_grid(8).unwrap();
        let xi = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0];
        let ex = extract_scalar_heat(&grid, &xi).unwrap();
        let norm2: f64 = ex.xi_discrete.iter().map(|x| x * x).sum();
        assert!((ex.matrix[(0, 0)] - norm2).abs() < 1e-10 * norm2);
        assert!(norm2 < 3.0);
    }

    #[test]
    fn planewave_matches_exact_deturck_at_standard_point() {
        let grid = planewave_grid(4).unwrap();
        let p = problem(OperatorKind::Deturck, axis(0));
        let ex = extract_symbol_planewave(&p, &grid).unwrap();
        let exact = assemble_symbol_exact(&p.with_xi(ex.xi_discrete).unwrap()).unwrap();
        assert!(relative(&ex.matrix, &exact) < 1e-4, "{}", relative(&ex.matrix, &exact));
    }

    #[test]
    fn planewave_matches_exact_off_axis() {
        let grid = planewave_grid(4).unwrap();
        for kind in [OperatorKind::Deturck, OperatorKind::GaugedModifiedCoflow { a: 0.3 }] {
            let p = perturbed_problem(kind, 21)
                .with_xi([1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0])
                .unwrap();
            let ex = extract_symbol_planewave(&p, &grid).unwrap();
            let exact = assemble_symbol_exact(&p.with_xi(ex.xi_discrete).unwrap()).unwrap();
            assert!(relative(&ex.matrix, &exact) < 1e-4, "{kind:?} {}", relative(&ex.matrix, &exact));
        }
    }

    #[test]
    fn planewave_response_is_linear() {
        let grid = planewave_grid(4).unwrap();
        let p = perturbed_problem(OperatorKind::Deturck, 8).with_xi(axis(5)).unwrap();
        let k = grid_wavevector(&grid, &p.xi()).unwrap();
        let work = active_grid(&grid, &k).unwrap();
        let e = |i: usize| {
            let mut c = vec![0.0; 35];
            c[i] = 1.0;
            KForm::from_components(3, c).unwrap()
        };
        let r1 = planewave_response(&p, &work, &k, &e(4)).unwrap();
        let r2 = planewave_response(&p, &work, &k, &e(17)).unwrap();
        let combo = &e(4).scaled(2.0) + &e(17).scaled(-0.5);
        let r = planewave_response(&p, &work, &k, &combo).unwrap();
        let scale = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..35 {
            assert!((r[i] - (2.0 * r1[i] - 0.5 * r2[i])).abs() < 1e-8 * scale.max(1.0));
        }
    }

    #[test]
    fn laplacian_symbol_predicts_small_closed_wave() {
        // eta = e^0 ^ beta cos(x0) is discretely closed; the Laplacian acting on
        // phi0 + eps eta should be -S(xi_d) eta cos(x0) to first order in eps.
        let grid = planewave_grid(6).unwrap();
        let k = [1, 0, 0, 0, 0, 0, 0];
        let work = active_grid(&grid, &k).unwrap();
        let xi_d = discrete_xi(&work, &k);
        let mut beta = vec![0.0; 21];
        beta[7] = 1.0;
        beta[14] = -0.5;
        let eta = KForm::one_form(axis(0))
            .wedge(&KForm::from_components(2, beta).unwrap())
            .unwrap();
        let p = SymbolProblem::new(OperatorKind::Laplacian, standard_phi(), &KForm::one_form(xi_d)).unwrap();
        let s = assemble_symbol_exact(&p).unwrap();
        let predicted = -(&s * DVector::from_column_slice(eta.components()));
        let cosines = cosine_field(&work, &k);
        let base = FormField::constant(&work, &standard_phi());
        let wave = FormField::constant(&work, &eta).scaled_pointwise(&cosines).unwrap();
        let at = |eps: f64| -> Vec<f64> {
            let state = FlowState::new(base.axpy(eps, &wave).unwrap(), 0.0).unwrap();
            let r = rhs_laplacian(&state).unwrap();
            cosine_coefficients(&r, &cosines).iter().map(|x| x / eps).collect()
        };
        // Richardson in eps removes the quadratic term
        let (a, b) = (at(1e-4), at(2e-4));
        let err = (0..35)
            .map(|i| (2.0 * a[i] - b[i] - predicted[i]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6 * predicted.amax(), "{err}");
    }
}

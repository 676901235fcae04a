//! Pointwise G2 geometry: positivity of 3-forms, the induced metric, the
//! dual 4-form, the torsion trace, the type decomposition of 3-forms and the
//! derivative of `phi -> *_phi phi`.

use thiserror::Error;

use crate::forms::{hodge_into, interior_into, wedge_into, FormError, KForm, Matrix7, Metric, Vector, DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum G2Error {
    #[error("not a positive 3-form (smallest eigenvalue of B is {min_eigenvalue:e})")]
    NotPositive { min_eigenvalue: f64 },
    #[error("positivity margin {0:e} too small for a finite-difference probe")]
    MarginTooSmall(f64),
    #[error("expected a {expected}-form, got degree {got}")]
    WrongDegree { expected: usize, got: usize },
    #[error(transparent)]
    Form(#[from] FormError),
}

/// Relative eigenvalue threshold for positive-definiteness of B.
pub const POSITIVITY_THRESHOLD: f64 = 1e-10;

/// Smallest positivity margin at which finite-difference linearizations are attempted.
pub const MIN_PROBE_MARGIN: f64 = 1e-8;

const PHI0_TERMS: [([usize; 3], f64); 7] = [
    ([0, 1, 2], 1.0),
    ([0, 3, 4], 1.0),
    ([0, 5, 6], 1.0),
    ([1, 3, 5], 1.0),
    ([1, 4, 6], -1.0),
    ([2, 3, 6], -1.0),
    ([2, 4, 5], -1.0),
];

/// The model positive 3-form
/// `e123 + e145 + e167 + e246 - e257 - e347 - e356` (1-based labels).
pub fn standard_phi() -> KForm {
    let terms: Vec<(&[usize], f64)> = PHI0_TERMS.iter().map(|(i, c)| (&i[..], *c)).collect();
    KForm::from_terms(3, &terms).expect("static component list")
}

fn check_degree(form: &KForm, expected: usize) -> Result<(), G2Error> {
    if form.degree() != expected {
        return Err(G2Error::WrongDegree {
            expected,
            got: form.degree(),
        });
    }
    Ok(())
}

/// `sign * phi[p] * phi[q]` contributing to component `out` of a product.
#[derive(Clone, Copy)]
struct QuadTerm {
    p: u8,
    q: u8,
    out: u8,
    sign: f64,
}

/// Term lists for `omega_i = (i_{e_i} phi) ^ phi` (per axis, 5-form output)
/// and for the top coefficient of `(i_{e_j} phi) ^ omega` (per axis,
/// `p` indexing phi and `q` indexing omega).
struct BTables {
    omega: Vec<Vec<QuadTerm>>,
    top: Vec<Vec<QuadTerm>>,
}

fn b_tables() -> &'static BTables {
    static TABLES: std::sync::OnceLock<BTables> = std::sync::OnceLock::new();
    TABLES.get_or_init(|| {
        let t = crate::forms::tables();
        // i_{e_i} of a 3-form as (3-form index, 2-form index, sign)
        let interior: Vec<Vec<(usize, usize, f64)>> = (0..DIM)
            .map(|axis| {
                let mut list = Vec::new();
                for x in 0..35 {
                    let mut e = [0.0; 35];
                    e[x] = 1.0;
                    let mut out = [0.0; 21];
                    interior_into(&Vector::basis(axis).0, 3, &e, &mut out);
                    for (y, v) in out.iter().enumerate() {
                        if *v != 0.0 {
                            list.push((x, y, *v));
                        }
                    }
                }
                list
            })
            .collect();
        let wedge23 = t.wedge_terms(2, 3);
        let wedge25 = t.wedge_terms(2, 5);
        let mut omega = Vec::new();
        let mut top = Vec::new();
        for list in &interior {
            let mut om = Vec::new();
            let mut tp = Vec::new();
            for &(x, y, s_int) in list {
                for w in wedge23.iter().filter(|w| w.a as usize == y) {
                    om.push(QuadTerm {
                        p: x as u8,
                        q: w.b as u8,
                        out: w.out as u8,
                        sign: s_int * w.sign,
                    });
                }
                for w in wedge25.iter().filter(|w| w.a as usize == y) {
                    tp.push(QuadTerm {
                        p: x as u8,
                        q: w.b as u8,
                        out: 0,
                        sign: s_int * w.sign,
                    });
                }
            }
            omega.push(om);
            top.push(tp);
        }
        BTables { omega, top }
    })
}

/// `B_ij` defined by `(i_{e_i} phi) ^ (i_{e_j} phi) ^ phi = 6 B_ij e^{0..6}`.
pub fn b_matrix(phi: &[f64]) -> Matrix7 {
    let tables = b_tables();
    let mut omegas = [[0.0; 21]; DIM];
    for (om, terms) in omegas.iter_mut().zip(&tables.omega) {
        for t in terms {
            om[t.out as usize] += t.sign * phi[t.p as usize] * phi[t.q as usize];
        }
    }
    let mut b = Matrix7::zeros();
    for i in 0..DIM {
        for j in i..DIM {
            let om = &omegas[i];
            let v: f64 = tables.top[j]
                .iter()
                .map(|t| t.sign * phi[t.p as usize] * om[t.q as usize])
                .sum::<f64>()
                / 6.0;
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    b
}

/// Positivity verdict with the smallest eigenvalue of B as margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positivity {
    pub positive: bool,
    pub margin: f64,
}

fn positivity_threshold(b: &Matrix7) -> f64 {
    POSITIVITY_THRESHOLD * b.norm()
}

fn b_margin(b: &Matrix7) -> f64 {
    let min = b.symmetric_eigenvalues().min();
    if min.is_finite() {
        min
    } else {
        f64::NAN
    }
}

/// Metric of a 3-form given by components. Positivity is decided by a
/// Cholesky factorization of `B - tau I`; the smallest eigenvalue is only
/// computed on failure. A positive form whose margin is below `floor` gives
/// `MarginTooSmall`.
pub(crate) fn metric_from_components(phi: &[f64], floor: f64) -> Result<Metric, G2Error> {
    let b = b_matrix(phi);
    let tau = positivity_threshold(&b);
    let shift = tau.max(floor);
    let shifted = b - Matrix7::identity() * shift;
    if tau.is_nan() || tau <= 0.0 || shifted.cholesky().is_none() {
        let min = b_margin(&b);
        if min > tau && tau > 0.0 {
            return Err(G2Error::MarginTooSmall(min));
        }
        return Err(G2Error::NotPositive { min_eigenvalue: min });
    }
    let det = b
        .cholesky()
        .map(|c| c.determinant())
        .ok_or(G2Error::NotPositive { min_eigenvalue: b_margin(&b) })?;
    let g = b * det.powf(-1.0 / 9.0);
    Metric::new(g).map_err(|_| G2Error::NotPositive {
        min_eigenvalue: b_margin(&b),
    })
}

/// The metric induced by a positive 3-form, `g = B det(B)^{-1/9}`.
pub fn metric_from_phi(phi: &KForm) -> Result<Metric, G2Error> {
    check_degree(phi, 3)?;
    metric_from_components(phi.components(), 0.0)
}

pub fn is_positive(phi: &KForm) -> Positivity {
    if phi.degree() != 3 {
        return Positivity {
            positive: false,
            margin: f64::NAN,
        };
    }
    let b = b_matrix(phi.components());
    let margin = b_margin(&b);
    Positivity {
        positive: margin > positivity_threshold(&b) && margin.is_finite(),
        margin,
    }
}

/// `*_phi phi` from components.
pub(crate) fn psi_components(phi: &[f64], metric: &Metric) -> Vec<f64> {
    let mut psi = vec![0.0; 35];
    hodge_into(3, phi, metric, &mut psi);
    psi
}

/// A positive 3-form with its induced metric and dual 4-form.
#[derive(Debug, Clone, PartialEq)]
pub struct G2Structure {
    phi: KForm,
    metric: Metric,
    psi: KForm,
}

impl G2Structure {
    pub fn new(phi: KForm) -> Result<Self, G2Error> {
        let metric = metric_from_phi(&phi)?;
        let psi = phi.hodge(&metric);
        Ok(G2Structure { phi, metric, psi })
    }

    pub fn standard() -> Self {
        G2Structure::new(standard_phi()).expect("phi0 is positive")
    }

    pub fn phi(&self) -> &KForm {
        &self.phi
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn psi(&self) -> &KForm {
        &self.psi
    }
}

/// `Tr T = (1/4) <d phi, psi>`.
pub fn tr_torsion(s: &G2Structure, dphi: &KForm) -> Result<f64, G2Error> {
    check_degree(dphi, 4)?;
    Ok(tr_torsion_parts(dphi.components(), s.phi.components(), &s.metric))
}

/// `<x, psi> vol = x ^ phi`, so the trace needs no index raising.
pub(crate) fn tr_torsion_parts(dphi: &[f64], phi: &[f64], metric: &Metric) -> f64 {
    0.25 * top(4, dphi, 3, phi) / metric.sqrt_det()
}

/// Components of a 3-form in the 1-, 7- and 27-dimensional G2 summands.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition137 {
    pub p1: KForm,
    pub p7: KForm,
    pub p27: KForm,
}

fn top(j: usize, a: &[f64], k: usize, b: &[f64]) -> f64 {
    let mut out = [0.0];
    wedge_into(j, a, k, b, &mut out);
    out[0]
}

/// `(e^c ^ x ^ phi)` for each axis c, which is `sqrt_det <x, i_{e_c} psi>`
/// after lowering c with g.
fn against_span(x: &[f64], phi: &[f64]) -> [f64; DIM] {
    let mut six = [0.0; DIM];
    wedge_into(3, x, 3, phi, &mut six);
    let mut out = [0.0; DIM];
    for (c, o) in out.iter_mut().enumerate() {
        *o = top(1, &Vector::basis(c).0, 6, &six);
    }
    out
}

/// Type decomposition of a 3-form from raw components. Inner products with
/// phi and with `i_{e_a} psi` are evaluated as top-degree wedges, which holds
/// because `psi = *phi` for the metric of phi.
pub(crate) fn decompose_parts(
    eta: &[f64],
    phi: &[f64],
    psi: &[f64],
    metric: &Metric,
) -> [Vec<f64>; 3] {
    let c1 = top(3, eta, 4, psi) / top(3, phi, 4, psi);
    let p1: Vec<f64> = phi.iter().map(|x| c1 * x).collect();

    // Lambda^3_7 is spanned by i_{e_a} psi
    let mut span = [[0.0; 35]; DIM];
    for (a, s) in span.iter_mut().enumerate() {
        interior_into(&Vector::basis(a).0, 4, psi, s);
    }
    let g = metric.g();
    let scale = 1.0 / metric.sqrt_det();
    let lower = |u: [f64; DIM]| -> nalgebra::SVector<f64, 7> {
        nalgebra::SVector::<f64, 7>::from_fn(|b, _| {
            scale * (0..DIM).map(|c| g[(b, c)] * u[c]).sum::<f64>()
        })
    };
    let rhs = lower(against_span(eta, phi));
    let mut gram = Matrix7::zeros();
    for (a, s) in span.iter().enumerate() {
        gram.set_column(a, &lower(against_span(s, phi)));
    }
    let gram = (gram + gram.transpose()) * 0.5;
    let coeffs = gram
        .cholesky()
        .expect("Gram matrix of i_e psi is positive definite for positive phi")
        .solve(&rhs);
    let mut p7 = vec![0.0; 35];
    for a in 0..DIM {
        for (p, s) in p7.iter_mut().zip(span[a].iter()) {
            *p += coeffs[a] * s;
        }
    }
    let p27: Vec<f64> = (0..35).map(|i| eta[i] - p1[i] - p7[i]).collect();
    [p1, p7, p27]
}

pub fn decompose_137(eta: &KForm, s: &G2Structure) -> Result<Decomposition137, G2Error> {
    check_degree(eta, 3)?;
    let [p1, p7, p27] = decompose_parts(
        eta.components(),
        s.phi.components(),
        s.psi.components(),
        &s.metric,
    );
    Ok(Decomposition137 {
        p1: KForm::from_components(3, p1)?,
        p7: KForm::from_components(3, p7)?,
        p27: KForm::from_components(3, p27)?,
    })
}

/// Symmetric difference quotient at `eps` and `eps/2` combined by one
/// Richardson step, for a map into a flat vector of values.
pub(crate) fn richardson<F>(f: F, eps: f64) -> Result<Vec<f64>, G2Error>
where
    F: Fn(f64) -> Result<Vec<f64>, G2Error>,
{
    let central = |h: f64| -> Result<Vec<f64>, G2Error> {
        let plus = f(h)?;
        let minus = f(-h)?;
        Ok(plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect())
    };
    let coarse = central(eps)?;
    let fine = central(eps / 2.0)?;
    Ok(fine
        .iter()
        .zip(&coarse)
        .map(|(f, c)| (4.0 * f - c) / 3.0)
        .collect())
}

/// Default probe size `1e-5 |phi| / |eta|` (coefficient norms).
fn probe_step(s: &G2Structure, eta: &KForm) -> f64 {
    let eta_norm = eta.coefficient_norm();
    if eta_norm == 0.0 {
        return 0.0;
    }
    1e-5 * s.phi.coefficient_norm() / eta_norm
}

/// Run a probe, halving the step while `phi +- eps eta` leaves the positive cone.
fn probe<F>(s: &G2Structure, eta: &KForm, eps: f64, map: F) -> Result<Vec<f64>, G2Error>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, G2Error>,
{
    let margin = is_positive(&s.phi).margin;
    if margin.is_nan() || margin < MIN_PROBE_MARGIN {
        return Err(G2Error::MarginTooSmall(margin));
    }
    let mut eps = eps;
    for _ in 0..20 {
        let shifted = |h: f64| {
            let p: Vec<f64> = s
                .phi
                .components()
                .iter()
                .zip(eta.components())
                .map(|(a, b)| a + h * b)
                .collect();
            map(&p)
        };
        match richardson(shifted, eps) {
            Err(G2Error::NotPositive { .. }) => eps /= 2.0,
            other => return other,
        }
    }
    Err(G2Error::MarginTooSmall(margin))
}

/// Derivative of `phi -> *_phi phi` by finite differences with a caller-chosen step.
pub fn linearized_psi_with_step(s: &G2Structure, eta: &KForm, eps: f64) -> Result<KForm, G2Error> {
    check_degree(eta, 3)?;
    if eta.max_abs() == 0.0 {
        return Ok(KForm::zero(4));
    }
    let out = probe(s, eta, eps, |p| {
        let m = metric_from_components(p, 0.0)?;
        Ok(psi_components(p, &m))
    })?;
    Ok(KForm::from_components(4, out)?)
}

/// `J(phi)[eta]`, the derivative of `*_phi phi` in the direction `eta`.
pub fn linearized_psi(s: &G2Structure, eta: &KForm) -> Result<KForm, G2Error> {
    linearized_psi_with_step(s, eta, probe_step(s, eta))
}

/// Closed form `J(phi)[eta] = *((4/3) pi_1 eta + pi_7 eta - pi_27 eta)`.
pub fn linearized_psi_fast(s: &G2Structure, eta: &KForm) -> Result<KForm, G2Error> {
    let d = decompose_137(eta, s)?;
    let combined = &(&d.p1.scaled(4.0 / 3.0) + &d.p7) - &d.p27;
    Ok(combined.hodge(&s.metric))
}

pub(crate) fn inverse_linearized_psi_parts(
    chi: &[f64],
    phi: &[f64],
    psi: &[f64],
    metric: &Metric,
) -> Vec<f64> {
    let mut sigma = vec![0.0; 35];
    hodge_into(4, chi, metric, &mut sigma);
    let [p1, p7, p27] = decompose_parts(&sigma, phi, psi, metric);
    (0..35)
        .map(|i| 0.75 * p1[i] + p7[i] - p27[i])
        .collect()
}

/// The unique `eta` with `J(phi)[eta] = chi`.
pub fn inverse_linearized_psi(s: &G2Structure, chi: &KForm) -> Result<KForm, G2Error> {
    check_degree(chi, 4)?;
    let out = inverse_linearized_psi_parts(
        chi.components(),
        s.phi.components(),
        s.psi.components(),
        &s.metric,
    );
    Ok(KForm::from_components(3, out)?)
}

pub fn linearized_metric_with_step(
    s: &G2Structure,
    eta: &KForm,
    eps: f64,
) -> Result<Matrix7, G2Error> {
    check_degree(eta, 3)?;
    if eta.max_abs() == 0.0 {
        return Ok(Matrix7::zeros());
    }
    let out = probe(s, eta, eps, |p| {
        let m = metric_from_components(p, 0.0)?;
        Ok(m.g().iter().copied().collect())
    })?;
    let dg = Matrix7::from_column_slice(&out);
    Ok((dg + dg.transpose()) * 0.5)
}

/// `Dg(phi)[eta]`, derivative of the induced metric.
pub fn linearized_metric(s: &G2Structure, eta: &KForm) -> Result<Matrix7, G2Error> {
    linearized_metric_with_step(s, eta, probe_step(s, eta))
}

/// Numerical rank of a set of vectors (as columns) via SVD.
#[cfg(test)]
pub(crate) fn numerical_rank(columns: &[Vec<f64>], tol: f64) -> usize {
    let rows = columns[0].len();
    let m = nalgebra::DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r]);
    let sv = m.singular_values();
    let max = sv.max();
    sv.iter().filter(|s| **s > tol * max).count()
}

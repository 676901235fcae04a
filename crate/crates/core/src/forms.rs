//! Pointwise exterior algebra on an oriented 7-dimensional inner-product space.
//!
//! A k-form is stored as its `C(7, k)` components on the basis
//! `e^{i_1 ... i_k}` with `i_1 < ... < i_k`, in lexicographic order of the
//! multi-indices. Axes are 0-based in code (`e^0 ... e^6`). The orientation
//! is fixed by `e^{0123456}` having coefficient `+1` in the volume form.
//!
//! Multi-indices are handled internally as 7-bit masks; the structure
//! constants for wedge and interior products are tabulated once per process.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::OnceLock;

use nalgebra::SMatrix;
use thiserror::Error;

/// Dimension of the underlying vector space.
pub const DIM: usize = 7;

/// Dense 7x7 real matrix.
pub type Matrix7 = SMatrix<f64, 7, 7>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormError {
    #[error("wedge of a {0}-form with a {1}-form exceeds top degree 7")]
    DegreeOverflow(usize, usize),
    #[error("degree {0} is outside 0..=7")]
    InvalidDegree(usize),
    #[error("interior product needs a form of positive degree")]
    InteriorOfScalar,
    #[error("degree mismatch: {0} vs {1}")]
    DegreeMismatch(usize, usize),
    #[error("a {degree}-form has {expected} components, got {got}")]
    ComponentCount {
        degree: usize,
        expected: usize,
        got: usize,
    },
    #[error("metric is not positive definite")]
    DegenerateMetric,
    #[error("metric is not symmetric (asymmetry {0:e})")]
    AsymmetricMetric(f64),
    #[error("index {0} out of range 0..7")]
    IndexOutOfRange(usize),
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of components of a k-form in dimension 7.
pub fn form_dim(degree: usize) -> usize {
    binomial(DIM, degree)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct WedgeTerm {
    pub a: u16,
    pub b: u16,
    pub out: u16,
    pub sign: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct InteriorTerm {
    pub input: u16,
    pub output: u16,
    pub axis: u8,
    pub sign: f64,
}

pub(crate) struct Tables {
    masks: Vec<Vec<u8>>,
    index: [u16; 128],
    complement_sign: Vec<Vec<f64>>,
    wedge: Vec<Vec<Vec<WedgeTerm>>>,
    interior: Vec<Vec<InteriorTerm>>,
}

const FULL: u8 = 0x7f;

/// Sign of the shuffle that places the indices of `a` before those of `b`.
fn merge_sign(a: u8, b: u8) -> f64 {
    let mut inversions = 0;
    for i in 0..DIM {
        if a & (1 << i) != 0 {
            // count elements of b smaller than i
            inversions += (b & ((1u8 << i) - 1)).count_ones();
        }
    }
    if inversions.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn lex_masks(k: usize) -> Vec<u8> {
    fn rec(start: usize, left: usize, acc: u8, out: &mut Vec<u8>) {
        if left == 0 {
            out.push(acc);
            return;
        }
        for i in start..=(DIM - left) {
            rec(i + 1, left - 1, acc | (1 << i), out);
        }
    }
    let mut out = Vec::with_capacity(form_dim(k));
    rec(0, k, 0, &mut out);
    out
}

impl Tables {
    fn build() -> Self {
        let masks: Vec<Vec<u8>> = (0..=DIM).map(lex_masks).collect();
        let mut index = [0u16; 128];
        for list in &masks {
            for (i, &m) in list.iter().enumerate() {
                index[m as usize] = i as u16;
            }
        }
        let complement_sign = masks
            .iter()
            .map(|list| list.iter().map(|&m| merge_sign(m, FULL & !m)).collect())
            .collect();
        let mut wedge = Vec::with_capacity(DIM + 1);
        for j in 0..=DIM {
            let mut row = Vec::with_capacity(DIM + 1);
            for k in 0..=DIM {
                let mut terms = Vec::new();
                if j + k <= DIM {
                    for (ia, &ma) in masks[j].iter().enumerate() {
                        for (ib, &mb) in masks[k].iter().enumerate() {
                            if ma & mb == 0 {
                                terms.push(WedgeTerm {
                                    a: ia as u16,
                                    b: ib as u16,
                                    out: index[(ma | mb) as usize],
                                    sign: merge_sign(ma, mb),
                                });
                            }
                        }
                    }
                }
                row.push(terms);
            }
            wedge.push(row);
        }
        let mut interior = vec![Vec::new()];
        for level in &masks[1..=DIM] {
            let mut terms = Vec::new();
            for (ii, &m) in level.iter().enumerate() {
                let mut position = 0;
                for axis in 0..DIM {
                    if m & (1 << axis) != 0 {
                        terms.push(InteriorTerm {
                            input: ii as u16,
                            output: index[(m & !(1 << axis)) as usize],
                            axis: axis as u8,
                            sign: if position % 2 == 0 { 1.0 } else { -1.0 },
                        });
                        position += 1;
                    }
                }
            }
            interior.push(terms);
        }
        Tables {
            masks,
            index,
            complement_sign,
            wedge,
            interior,
        }
    }

    pub(crate) fn masks(&self, k: usize) -> &[u8] {
        &self.masks[k]
    }

    pub(crate) fn index_of(&self, mask: u8) -> usize {
        self.index[mask as usize] as usize
    }

    pub(crate) fn wedge_terms(&self, j: usize, k: usize) -> &[WedgeTerm] {
        &self.wedge[j][k]
    }

    pub(crate) fn interior_terms(&self, k: usize) -> &[InteriorTerm] {
        &self.interior[k]
    }
}

pub(crate) fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(Tables::build)
}

/// The increasing multi-index of the `position`-th basis k-form.
pub fn multi_index(degree: usize, position: usize) -> Vec<usize> {
    let m = tables().masks(degree)[position];
    (0..DIM).filter(|i| m & (1 << i) != 0).collect()
}

/// Resolve an arbitrary index list to `(canonical position, permutation sign)`.
/// Returns `Ok(None)` when an index repeats (the component is identically zero).
pub fn resolve_indices(indices: &[usize]) -> Result<Option<(usize, f64)>, FormError> {
    let mut mask = 0u8;
    let mut inversions = 0usize;
    for (p, &i) in indices.iter().enumerate() {
        if i >= DIM {
            return Err(FormError::IndexOutOfRange(i));
        }
        if mask & (1 << i) != 0 {
            return Ok(None);
        }
        mask |= 1 << i;
        inversions += indices[..p].iter().filter(|&&j| j > i).count();
    }
    let sign = if inversions.is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(Some((tables().index_of(mask), sign)))
}

// Slice kernels. Grid code calls these per site to avoid allocating.

pub(crate) fn wedge_into(j: usize, a: &[f64], k: usize, b: &[f64], out: &mut [f64]) {
    for t in tables().wedge_terms(j, k) {
        out[t.out as usize] += t.sign * a[t.a as usize] * b[t.b as usize];
    }
}

pub(crate) fn interior_into(v: &[f64; DIM], k: usize, a: &[f64], out: &mut [f64]) {
    for t in tables().interior_terms(k) {
        out[t.output as usize] += t.sign * v[t.axis as usize] * a[t.input as usize];
    }
}

#[derive(Debug, Clone, Copy)]
struct CofactorTerm {
    sign: f64,
    /// `lead * 7 + col` into the row-major matrix
    entry: u16,
    prev: u16,
}

/// Cofactor-expansion terms building the k-th compound from the (k-1)-th,
/// grouped per entry: `plans[k]` holds `C(7,k)^2 * k` terms in row-major
/// entry order.
fn cofactor_plans() -> &'static [Vec<CofactorTerm>] {
    static PLANS: OnceLock<Vec<Vec<CofactorTerm>>> = OnceLock::new();
    PLANS.get_or_init(|| {
        let t = tables();
        let mut plans = vec![Vec::new()];
        for level in 1..=DIM {
            let masks = t.masks(level);
            let prev_size = form_dim(level - 1);
            let mut terms = Vec::with_capacity(masks.len() * masks.len() * level);
            for &rm in masks {
                let lead = rm.trailing_zeros() as usize;
                let rest_row = t.index_of(rm & !(1 << lead));
                for &cm in masks {
                    let mut position = 0;
                    for col in 0..DIM {
                        if cm & (1 << col) != 0 {
                            let rest_col = t.index_of(cm & !(1 << col));
                            terms.push(CofactorTerm {
                                sign: if position % 2 == 0 { 1.0 } else { -1.0 },
                                entry: (lead * DIM + col) as u16,
                                prev: (rest_row * prev_size + rest_col) as u16,
                            });
                            position += 1;
                        }
                    }
                }
            }
            plans.push(terms);
        }
        plans
    })
}

/// k-th compound matrix (all k x k minors) of `m`, row-major over the
/// canonical k-subsets. Built by cofactor expansion from the (k-1)-th.
pub fn compound(m: &Matrix7, k: usize) -> Vec<f64> {
    let plans = cofactor_plans();
    let mut flat = [0.0; DIM * DIM];
    for r in 0..DIM {
        for c in 0..DIM {
            flat[r * DIM + c] = m[(r, c)];
        }
    }
    let mut prev = vec![1.0];
    for (level, plan) in plans.iter().enumerate().take(k + 1).skip(1) {
        let size = form_dim(level);
        let cur: Vec<f64> = plan
            .chunks_exact(level)
            .map(|terms| {
                terms
                    .iter()
                    .map(|t| t.sign * flat[t.entry as usize] * prev[t.prev as usize])
                    .sum()
            })
            .collect();
        debug_assert_eq!(cur.len(), size * size);
        prev = cur;
    }
    prev
}

/// `(-1)^(sum of indices)` for the canonical k-subset at `position`.
fn index_parity(k: usize, position: usize) -> f64 {
    let m = tables().masks(k)[position];
    let s: u32 = (0..DIM as u32).filter(|i| m & (1 << i) != 0).sum();
    if s.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn mat_vec(mat: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &mat[i * n..(i + 1) * n];
        *o = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

fn flatten(m: &Matrix7) -> [[f64; DIM]; DIM] {
    let mut f = [[0.0; DIM]; DIM];
    for (r, row) in f.iter_mut().enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            *x = m[(r, c)];
        }
    }
    f
}

/// Apply `m` to every slot of the k-form `a`, i.e. multiply by the k-th
/// compound of `m`, without forming the compound for k <= 3.
pub(crate) fn transform_into(m: &Matrix7, k: usize, a: &[f64], out: &mut [f64]) {
    let f = flatten(m);
    match k {
        0 => out[0] = a[0],
        1 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..DIM).map(|p| f[i][p] * a[p]).sum();
            }
        }
        2 => {
            let mut dense = [[0.0; DIM]; DIM];
            for (pos, &mask) in tables().masks(2).iter().enumerate() {
                let (p, q) = pair(mask);
                dense[p][q] = a[pos];
                dense[q][p] = -a[pos];
            }
            let mut half = [[0.0; DIM]; DIM];
            for i in 0..DIM {
                for q in 0..DIM {
                    half[i][q] = (0..DIM).map(|p| f[i][p] * dense[p][q]).sum();
                }
            }
            for (pos, &mask) in tables().masks(2).iter().enumerate() {
                let (i, j) = pair(mask);
                out[pos] = (0..DIM).map(|q| f[j][q] * half[i][q]).sum();
            }
        }
        3 => {
            let masks = tables().masks(3);
            // first slot raised, stored antisymmetric in the last two
            let mut t1 = [[[0.0; DIM]; DIM]; DIM];
            for (pos, &mask) in masks.iter().enumerate() {
                let x = a[pos];
                if x == 0.0 {
                    continue;
                }
                let [p, q, r] = triple(mask);
                for (i, row) in t1.iter_mut().enumerate() {
                    let (fp, fq, fr) = (f[i][p] * x, f[i][q] * x, f[i][r] * x);
                    row[q][r] += fp;
                    row[r][q] -= fp;
                    row[r][p] += fq;
                    row[p][r] -= fq;
                    row[p][q] += fr;
                    row[q][p] -= fr;
                }
            }
            let mut t2 = [[[0.0; DIM]; DIM]; DIM];
            for i in 0..DIM {
                for j in i + 1..DIM {
                    let acc = &mut t2[i][j];
                    for q in 0..DIM {
                        let c = f[j][q];
                        let src = &t1[i][q];
                        for r in 0..DIM {
                            acc[r] += c * src[r];
                        }
                    }
                }
            }
            for (pos, &mask) in masks.iter().enumerate() {
                let [i, j, l] = triple(mask);
                let (row, src) = (&f[l], &t2[i][j]);
                let mut acc = 0.0;
                for r in 0..DIM {
                    acc += row[r] * src[r];
                }
                out[pos] = acc;
            }
        }
        _ => mat_vec(&compound(m, k), a, out),
    }
}

fn pair(mask: u8) -> (usize, usize) {
    let p = mask.trailing_zeros() as usize;
    let q = (mask & !(1 << p)).trailing_zeros() as usize;
    (p, q)
}

fn triple(mask: u8) -> [usize; 3] {
    let p = mask.trailing_zeros() as usize;
    let rest = mask & !(1 << p);
    let q = rest.trailing_zeros() as usize;
    let r = (rest & !(1 << q)).trailing_zeros() as usize;
    [p, q, r]
}

/// Complementary dual `b_{I^c} = sign(I, I^c) a_I` (no metric factor).
fn dual_into(k: usize, a: &[f64], out: &mut [f64]) {
    let t = tables();
    for (i, &m) in t.masks(k).iter().enumerate() {
        out[t.index_of(FULL & !m)] = t.complement_sign[k][i] * a[i];
    }
}

/// Hodge star of a k-form. Raises k slots with `g^{-1}` for k <= 3,
/// otherwise dualizes first and lowers the 7-k complementary slots with `g`.
pub(crate) fn hodge_into(k: usize, a: &[f64], g: &Metric, out: &mut [f64]) {
    let mut tmp = [0.0; 35];
    if k <= 3 {
        transform_into(&g.g_inv, k, a, &mut tmp[..a.len()]);
        dual_into(k, &tmp[..a.len()], out);
        for o in out.iter_mut() {
            *o *= g.sqrt_det;
        }
    } else {
        let co = form_dim(DIM - k);
        dual_into(k, a, &mut tmp[..co]);
        transform_into(&g.g, DIM - k, &tmp[..co], out);
        let inv = 1.0 / g.sqrt_det;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
}

/// Induced inner product of two k-forms given as component slices.
pub(crate) fn inner_into(k: usize, a: &[f64], b: &[f64], g: &Metric) -> f64 {
    let mut tmp = [0.0; 35];
    if k <= 3 {
        let raised = &mut tmp[..b.len()];
        transform_into(&g.g_inv, k, b, raised);
        a.iter().zip(raised.iter()).map(|(x, y)| x * y).sum()
    } else {
        let co = form_dim(DIM - k);
        let mut da = [0.0; 35];
        dual_into(k, a, &mut da[..co]);
        dual_into(k, b, &mut tmp[..co]);
        let mut lowered = [0.0; 35];
        transform_into(&g.g, DIM - k, &tmp[..co], &mut lowered[..co]);
        let det = g.sqrt_det * g.sqrt_det;
        da[..co].iter().zip(&lowered[..co]).map(|(x, y)| x * y).sum::<f64>() / det
    }
}

/// Symmetric positive-definite metric with cached inverse and volume density.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    g: Matrix7,
    g_inv: Matrix7,
    sqrt_det: f64,
}

impl Metric {
    pub fn new(g: Matrix7) -> Result<Self, FormError> {
        let scale = g.amax().max(f64::MIN_POSITIVE);
        let asym = (g - g.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(FormError::AsymmetricMetric(asym));
        }
        let g = (g + g.transpose()) * 0.5;
        let chol = g.cholesky().ok_or(FormError::DegenerateMetric)?;
        let det = chol.determinant();
        if !det.is_finite() || det <= 0.0 {
            return Err(FormError::DegenerateMetric);
        }
        let g_inv = chol.inverse();
        let g_inv = (g_inv + g_inv.transpose()) * 0.5;
        Ok(Metric {
            g,
            g_inv,
            sqrt_det: det.sqrt(),
        })
    }

    pub fn identity() -> Self {
        Metric {
            g: Matrix7::identity(),
            g_inv: Matrix7::identity(),
            sqrt_det: 1.0,
        }
    }

    pub fn g(&self) -> &Matrix7 {
        &self.g
    }

    pub fn g_inv(&self) -> &Matrix7 {
        &self.g_inv
    }

    pub fn sqrt_det(&self) -> f64 {
        self.sqrt_det
    }

    /// Smallest eigenvalue of g.
    pub fn min_eigenvalue(&self) -> f64 {
        self.g.symmetric_eigenvalues().min()
    }

    pub fn max_inverse_eigenvalue(&self) -> f64 {
        self.g_inv.symmetric_eigenvalues().max()
    }

    /// Gram matrix of the induced inner product on k-forms, i.e. the k-th
    /// compound of the inverse metric. For k > 3 it is assembled from the
    /// (7-k)-th compound of g by Jacobi's complementary minor identity
    /// `det(g^{-1}[I,J]) = (-1)^(|I|+|J|) det(g[J^c, I^c]) / det g`.
    pub fn form_gram(&self, degree: usize) -> Vec<f64> {
        if degree <= 3 {
            return compound(&self.g_inv, degree);
        }
        let t = tables();
        let co = DIM - degree;
        let small = compound(&self.g, co);
        let n = form_dim(degree);
        let inv_det = 1.0 / (self.sqrt_det * self.sqrt_det);
        let comp: Vec<usize> = t.masks(degree).iter().map(|&m| t.index_of(FULL & !m)).collect();
        let parity: Vec<f64> = (0..n).map(|i| index_parity(degree, i)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = parity[i] * parity[j] * small[comp[j] * n + comp[i]] * inv_det;
            }
        }
        out
    }

    /// `sqrt_det * e^{0123456}`.
    pub fn volume_form(&self) -> KForm {
        KForm {
            degree: DIM,
            comps: vec![self.sqrt_det],
        }
    }
}

/// Contravariant vector in 7 dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vector(pub [f64; DIM]);

impl Vector {
    pub fn zero() -> Self {
        Vector([0.0; DIM])
    }

    pub fn basis(axis: usize) -> Self {
        let mut v = [0.0; DIM];
        v[axis] = 1.0;
        Vector(v)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Alternating k-form with components in canonical order.
#[derive(Clone, PartialEq)]
pub struct KForm {
    degree: usize,
    comps: Vec<f64>,
}

impl fmt::Debug for KForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KForm<{}>[", self.degree)?;
        let mut first = true;
        for (i, c) in self.comps.iter().enumerate() {
            if *c != 0.0 {
                if !first {
                    write!(f, ", ")?;
                }
                first = false;
                let idx: String = multi_index(self.degree, i)
                    .iter()
                    .map(|d| char::from(b'0' + *d as u8))
                    .collect();
                write!(f, "e{idx}: {c}")?;
            }
        }
        write!(f, "]")
    }
}

impl KForm {
    pub fn zero(degree: usize) -> Self {
        assert!(degree <= DIM, "degree {degree} exceeds 7");
        KForm {
            degree,
            comps: vec![0.0; form_dim(degree)],
        }
    }

    pub fn from_components(degree: usize, comps: Vec<f64>) -> Result<Self, FormError> {
        if degree > DIM {
            return Err(FormError::InvalidDegree(degree));
        }
        let expected = form_dim(degree);
        if comps.len() != expected {
            return Err(FormError::ComponentCount {
                degree,
                expected,
                got: comps.len(),
            });
        }
        Ok(KForm { degree, comps })
    }

    /// `e^{i_1} ^ ... ^ e^{i_k}` for 0-based, not necessarily sorted, indices.
    pub fn basis(indices: &[usize]) -> Result<Self, FormError> {
        let mut f = KForm::zero(indices.len());
        f.set(indices, 1.0)?;
        Ok(f)
    }

    /// Sum of `coefficient * e^{indices}` terms, all of the given degree.
    pub fn from_terms(degree: usize, terms: &[(&[usize], f64)]) -> Result<Self, FormError> {
        let mut f = KForm::zero(degree);
        for (idx, c) in terms {
            if idx.len() != degree {
                return Err(FormError::DegreeMismatch(degree, idx.len()));
            }
            if let Some((pos, sign)) = resolve_indices(idx)? {
                f.comps[pos] += sign * c;
            }
        }
        Ok(f)
    }

    pub fn one_form(coeffs: [f64; DIM]) -> Self {
        KForm {
            degree: 1,
            comps: coeffs.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        KForm {
            degree: 0,
            comps: vec![value],
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn components(&self) -> &[f64] {
        &self.comps
    }

    pub fn components_mut(&mut self) -> &mut [f64] {
        &mut self.comps
    }

    pub fn into_components(self) -> Vec<f64> {
        self.comps
    }

    /// Component for an arbitrary index order, including the permutation sign.
    pub fn get(&self, indices: &[usize]) -> Result<f64, FormError> {
        if indices.len() != self.degree {
            return Err(FormError::DegreeMismatch(self.degree, indices.len()));
        }
        Ok(resolve_indices(indices)?
            .map(|(pos, sign)| sign * self.comps[pos])
            .unwrap_or(0.0))
    }

    /// Set the component so that `get(indices) == value`. Repeated indices
    /// are ignored (the component is structurally zero).
    pub fn set(&mut self, indices: &[usize], value: f64) -> Result<(), FormError> {
        if indices.len() != self.degree {
            return Err(FormError::DegreeMismatch(self.degree, indices.len()));
        }
        if let Some((pos, sign)) = resolve_indices(indices)? {
            self.comps[pos] = sign * value;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Euclidean norm of the component vector (not the metric norm).
    pub fn coefficient_norm(&self) -> f64 {
        self.comps.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        KForm {
            degree: self.degree,
            comps: self.comps.iter().map(|x| c * x).collect(),
        }
    }

    pub fn wedge(&self, other: &KForm) -> Result<KForm, FormError> {
        if self.degree + other.degree > DIM {
            return Err(FormError::DegreeOverflow(self.degree, other.degree));
        }
        let mut out = KForm::zero(self.degree + other.degree);
        wedge_into(
            self.degree,
            &self.comps,
            other.degree,
            &other.comps,
            &mut out.comps,
        );
        Ok(out)
    }

    /// `i_v a`, contraction of v into the first slot.
    pub fn interior(&self, v: &Vector) -> Result<KForm, FormError> {
        if self.degree == 0 {
            return Err(FormError::InteriorOfScalar);
        }
        let mut out = KForm::zero(self.degree - 1);
        interior_into(&v.0, self.degree, &self.comps, &mut out.comps);
        Ok(out)
    }

    pub fn hodge(&self, g: &Metric) -> KForm {
        let mut out = KForm::zero(DIM - self.degree);
        hodge_into(self.degree, &self.comps, g, &mut out.comps);
        out
    }

    pub fn inner(&self, other: &KForm, g: &Metric) -> Result<f64, FormError> {
        if self.degree != other.degree {
            return Err(FormError::DegreeMismatch(self.degree, other.degree));
        }
        Ok(inner_into(self.degree, &self.comps, &other.comps, g))
    }

    /// Pullback by a constant linear map: `(A^* a)(x_1, ..) = a(A x_1, ..)`.
    pub fn pullback(&self, a: &Matrix7) -> KForm {
        // (A^*a)_I = sum_J a_J det(A[J, I])
        let c = compound(a, self.degree);
        let n = self.comps.len();
        let mut out = KForm::zero(self.degree);
        for (i, o) in out.comps.iter_mut().enumerate() {
            *o = (0..n).map(|j| self.comps[j] * c[j * n + i]).sum();
        }
        out
    }
}

pub fn sharp(alpha: &KForm, g: &Metric) -> Result<Vector, FormError> {
    if alpha.degree != 1 {
        return Err(FormError::DegreeMismatch(1, alpha.degree));
    }
    let mut v = [0.0; DIM];
    for (i, vi) in v.iter_mut().enumerate() {
        *vi = (0..DIM).map(|j| g.g_inv[(i, j)] * alpha.comps[j]).sum();
    }
    Ok(Vector(v))
}

pub fn flat(v: &Vector, g: &Metric) -> KForm {
    let mut c = [0.0; DIM];
    for (i, ci) in c.iter_mut().enumerate() {
        *ci = (0..DIM).map(|j| g.g[(i, j)] * v.0[j]).sum();
    }
    KForm::one_form(c)
}

impl Add for &KForm {
    type Output = KForm;
    fn add(self, rhs: &KForm) -> KForm {
        assert_eq!(self.degree, rhs.degree, "adding forms of different degree");
        KForm {
            degree: self.degree,
            comps: self.comps.iter().zip(&rhs.comps).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &KForm {
    type Output = KForm;
    fn sub(self, rhs: &KForm) -> KForm {
        assert_eq!(self.degree, rhs.degree, "subtracting forms of different degree");
        KForm {
            degree: self.degree,
            comps: self.comps.iter().zip(&rhs.comps).map(|(a, b)| a - b).collect(),
        }
    }
}

impl AddAssign<&KForm> for KForm {
    fn add_assign(&mut self, rhs: &KForm) {
        assert_eq!(self.degree, rhs.degree, "adding forms of different degree");
        for (a, b) in self.comps.iter_mut().zip(&rhs.comps) {
            *a += b;
        }
    }
}

impl Mul<&KForm> for f64 {
    type Output = KForm;
    fn mul(self, rhs: &KForm) -> KForm {
        rhs.scaled(self)
    }
}

impl Neg for &KForm {
    type Output = KForm;
    fn neg(self) -> KForm {
        self.scaled(-1.0)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::Rng;

    pub fn random_form<R: Rng>(rng: &mut R, degree: usize) -> KForm {
        let comps = (0..form_dim(degree))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        KForm::from_components(degree, comps).unwrap()
    }

    pub fn random_metric<R: Rng>(rng: &mut R) -> Metric {
        let mut a = Matrix7::identity();
        for v in a.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        Metric::new(a * a.transpose() + Matrix7::identity() * 0.2).unwrap()
    }

    pub fn random_vector<R: Rng>(rng: &mut R) -> Vector {
        let mut v = [0.0; DIM];
        for x in v.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        Vector(v)
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_forms_close(a: &KForm, b: &KForm, tol: f64) {
        assert_eq!(a.degree(), b.degree());
        let err = (a - b).max_abs();
        assert!(err <= tol, "forms differ by {err:e}: {a:?} vs {b:?}");
    }

    /// Direct sum over ordered index tuples, independent of the tables.
    fn wedge_direct(a: &KForm, b: &KForm) -> KForm {
        let (j, k) = (a.degree(), b.degree());
        let mut out = KForm::zero(j + k);
        for ia in 0..form_dim(j) {
            for ib in 0..form_dim(k) {
                let mut idx = multi_index(j, ia);
                idx.extend(multi_index(k, ib));
                if let Some((pos, sign)) = resolve_indices(&idx).unwrap() {
                    out.comps[pos] += sign * a.comps[ia] * b.comps[ib];
                }
            }
        }
        out
    }

    fn phi0() -> KForm {
        KForm::from_terms(
            3,
            &[
                (&[0, 1, 2], 1.0),
                (&[0, 3, 4], 1.0),
                (&[0, 5, 6], 1.0),
                (&[1, 3, 5], 1.0),
                (&[1, 4, 6], -1.0),
                (&[2, 3, 6], -1.0),
                (&[2, 4, 5], -1.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn canonical_order_is_lexicographic() {
        assert_eq!(multi_index(3, 0), vec![0, 1, 2]);
        assert_eq!(multi_index(3, 1), vec![0, 1, 3]);
        assert_eq!(multi_index(3, 34), vec![4, 5, 6]);
        assert_eq!(multi_index(2, 6), vec![1, 2]);
        for k in 0..=DIM {
            assert_eq!(tables().masks(k).len(), form_dim(k));
        }
    }

    #[test]
    fn permuted_access_carries_sign() {
        let f = KForm::basis(&[0, 2, 5]).unwrap();
        assert_eq!(f.get(&[2, 0, 5]).unwrap(), -1.0);
        assert_eq!(f.get(&[5, 0, 2]).unwrap(), 1.0);
        assert_eq!(f.get(&[0, 0, 5]).unwrap(), 0.0);
        assert!(f.get(&[0, 7, 5]).is_err());
    }

    #[test]
    fn wedge_of_basis_covectors() {
        let e1 = KForm::basis(&[0]).unwrap();
        let e2 = KForm::basis(&[1]).unwrap();
        let w = e1.wedge(&e2).unwrap();
        assert_eq!(w, KForm::basis(&[0, 1]).unwrap());
        assert_eq!(w.components().iter().filter(|c| **c != 0.0).count(), 1);
    }

    #[test]
    fn wedge_rejects_overflow() {
        let a = KForm::zero(4);
        assert_eq!(a.wedge(&a), Err(FormError::DegreeOverflow(4, 4)));
    }

    #[test]
    fn wedge_table_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for j in 0..=DIM {
            for k in 0..=(DIM - j) {
                let a = random_form(&mut rng, j);
                let b = random_form(&mut rng, k);
                assert_forms_close(&a.wedge(&b).unwrap(), &wedge_direct(&a, &b), 1e-13);
            }
        }
    }

    #[test]
    fn wedge_is_graded_commutative_and_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for j in 0..=3 {
            for k in 0..=(DIM - j).min(4) {
                let a = random_form(&mut rng, j);
                let b = random_form(&mut rng, k);
                let sign = if (j * k) % 2 == 0 { 1.0 } else { -1.0 };
                let diff = &a.wedge(&b).unwrap() - &b.wedge(&a).unwrap().scaled(sign);
                assert!(diff.max_abs() < 1e-13);
            }
        }
        let (a, b, c) = (
            random_form(&mut rng, 2),
            random_form(&mut rng, 2),
            random_form(&mut rng, 3),
        );
        let left = a.wedge(&b).unwrap().wedge(&c).unwrap();
        let right = a.wedge(&b.wedge(&c).unwrap()).unwrap();
        assert_forms_close(&left, &right, 1e-12);
    }

    #[test]
    fn phi0_wedge_psi0_is_seven_volumes() {
        let phi = phi0();
        let psi = phi.hodge(&Metric::identity());
        let top = wedge_direct(&phi, &psi);
        assert!((top.components()[0] - 7.0).abs() < 1e-14);
        assert!((phi.wedge(&psi).unwrap().components()[0] - 7.0).abs() < 1e-14);
    }

    #[test]
    fn interior_basic_identities() {
        let e12 = KForm::basis(&[0, 1]).unwrap();
        assert_eq!(e12.interior(&Vector::basis(0)).unwrap(), KForm::basis(&[1]).unwrap());
        assert_eq!(KForm::scalar(1.0).interior(&Vector::zero()), Err(FormError::InteriorOfScalar));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 2..=DIM {
            let a = random_form(&mut rng, k);
            let v = random_vector(&mut rng);
            let twice = a.interior(&v).unwrap().interior(&v).unwrap();
            assert!(twice.max_abs() < 1e-13);
        }
        for j in 1..=3 {
            for k in 1..=(DIM - j) {
                let a = random_form(&mut rng, j);
                let b = random_form(&mut rng, k);
                let v = random_vector(&mut rng);
                let lhs = a.wedge(&b).unwrap().interior(&v).unwrap();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let rhs = &a.interior(&v).unwrap().wedge(&b).unwrap()
                    + &a.wedge(&b.interior(&v).unwrap()).unwrap().scaled(sign);
                assert_forms_close(&lhs, &rhs, 1e-12);
            }
        }
    }

    #[test]
    fn interior_evaluates_first_slot() {
        // (i_v a)(x) = a(v, x) checked on basis vectors via components
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_form(&mut rng, 3);
        let v = random_vector(&mut rng);
        let iv = a.interior(&v).unwrap();
        for p in 0..DIM {
            for q in 0..DIM {
                let expected: f64 = (0..DIM).map(|r| v.0[r] * a.get(&[r, p, q]).unwrap()).sum();
                assert!((iv.get(&[p, q]).unwrap() - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn hodge_examples() {
        let id = Metric::identity();
        assert_eq!(
            KForm::basis(&[0, 1, 2]).unwrap().hodge(&id),
            KForm::basis(&[3, 4, 5, 6]).unwrap()
        );
        let c: f64 = 2.5;
        let g = Metric::new(Matrix7::identity() * c).unwrap();
        let vol = KForm::scalar(1.0).hodge(&g);
        assert!((vol.components()[0] - c.powf(3.5)).abs() < 1e-12);
        let bad = Matrix7::identity() * -1.0;
        assert_eq!(Metric::new(bad), Err(FormError::DegenerateMetric));
    }

    #[test]
    fn hodge_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let g = random_metric(&mut rng);
            let k = trial % (DIM + 1);
            let a = random_form(&mut rng, k);
            let back = a.hodge(&g).hodge(&g);
            assert_forms_close(&back, &a, 1e-12 * a.max_abs().max(1.0) * 10.0);
        }
    }

    #[test]
    fn hodge_defining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..=DIM {
            let g = random_metric(&mut rng);
            let a = random_form(&mut rng, k);
            let b = random_form(&mut rng, k);
            let lhs = b.wedge(&a.hodge(&g)).unwrap();
            let rhs = g.volume_form().scaled(a.inner(&b, &g).unwrap());
            assert_forms_close(&lhs, &rhs, 1e-11);
        }
    }

    #[test]
    fn inner_product_examples() {
        let id = Metric::identity();
        let e12 = KForm::basis(&[0, 1]).unwrap();
        assert_eq!(e12.inner(&e12, &id).unwrap(), 1.0);
        assert!((phi0().inner(&phi0(), &id).unwrap() - 7.0).abs() < 1e-15);
        assert_eq!(
            e12.inner(&KForm::zero(3), &id),
            Err(FormError::DegreeMismatch(2, 3))
        );
    }

    /// Full-tensor contraction (1/k!) a_{i..} b_{j..} g^{ij}.. for k = 2.
    #[test]
    fn inner_matches_tensor_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = random_metric(&mut rng);
        let a = random_form(&mut rng, 2);
        let b = random_form(&mut rng, 2);
        let gi = g.g_inv();
        let mut acc = 0.0;
        for i in 0..DIM {
            for j in 0..DIM {
                for p in 0..DIM {
                    for q in 0..DIM {
                        acc += a.get(&[i, j]).unwrap() * b.get(&[p, q]).unwrap() * gi[(i, p)] * gi[(j, q)];
                    }
                }
            }
        }
        assert!((acc / 2.0 - a.inner(&b, &g).unwrap()).abs() < 1e-12);
        assert!((a.inner(&b, &g).unwrap() - b.inner(&a, &g).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn interior_is_adjoint_to_wedge_with_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for k in 1..=DIM {
            let g = random_metric(&mut rng);
            let v = random_vector(&mut rng);
            let a = random_form(&mut rng, k);
            let b = random_form(&mut rng, k - 1);
            let lhs = a.interior(&v).unwrap().inner(&b, &g).unwrap();
            let rhs = a.inner(&flat(&v, &g).wedge(&b).unwrap(), &g).unwrap();
            assert!((lhs - rhs).abs() < 1e-11, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn musical_isomorphisms() {
        let e1 = KForm::basis(&[0]).unwrap();
        assert_eq!(sharp(&e1, &Metric::identity()).unwrap(), Vector::basis(0));
        let g4 = Metric::new(Matrix7::identity() * 4.0).unwrap();
        let v = sharp(&e1, &g4).unwrap();
        assert!((v.0[0] - 0.25).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = random_metric(&mut rng);
        let alpha = random_form(&mut rng, 1);
        let back = flat(&sharp(&alpha, &g).unwrap(), &g);
        assert_forms_close(&back, &alpha, 1e-12);
    }

    #[test]
    fn gram_matches_direct_compound_of_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_metric(&mut rng);
        for k in 0..=DIM {
            let direct = compound(g.g_inv(), k);
            let gram = g.form_gram(k);
            let err = direct.iter().zip(&gram).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "k={k}: {err:e}");
        }
    }

    #[test]
    fn slotwise_transform_matches_compound() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let m = Matrix7::from_fn(|_, _| rng.random_range(-1.0..1.0));
        for k in 0..=DIM {
            let a = random_form(&mut rng, k);
            let mut fast = vec![0.0; form_dim(k)];
            transform_into(&m, k, a.components(), &mut fast);
            let mut slow = vec![0.0; form_dim(k)];
            mat_vec(&compound(&m, k), a.components(), &mut slow);
            let err = fast.iter().zip(&slow).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "k={k}: {err:e}");
        }
    }

    #[test]
    fn compound_matches_determinants() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = random_metric(&mut rng);
        let c7 = compound(g.g(), 7);
        assert!((c7[0] - g.g().determinant()).abs() < 1e-12);
        let c2 = compound(g.g(), 2);
        // minor rows {0,2}, cols {1,3}
        let m = g.g();
        let expected = m[(0, 1)] * m[(2, 3)] - m[(0, 3)] * m[(2, 1)];
        let (r, _) = resolve_indices(&[0, 2]).unwrap().unwrap();
        let (c, _) = resolve_indices(&[1, 3]).unwrap().unwrap();
        assert!((c2[r * 21 + c] - expected).abs() < 1e-14);
    }
}

//! Python bindings: forms, G2 structures, flows on the torus grid and the
//! symbol checker. Errors surface as `ValueError`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use g2flow::flows::{self, FlowKind, FlowState, Method};
use g2flow::forms::{self, Metric, Vector, DIM};
use g2flow::g2;
use g2flow::grid::{self, FdOrder, InitialData, TorusGrid};
use g2flow::symbol::{self, OperatorKind, SymbolProblem};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn array7(v: &[f64], what: &str) -> PyResult<[f64; DIM]> {
    v.try_into()
        .map_err(|_| PyValueError::new_err(format!("{what} needs {DIM} components, got {}", v.len())))
}

fn metric_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Metric> {
    if rows.len() != DIM || rows.iter().any(|r| r.len() != DIM) {
        return Err(PyValueError::new_err("metric must be 7x7"));
    }
    Metric::new(forms::Matrix7::from_fn(|i, j| rows[i][j])).map_err(err)
}

fn rows(m: &forms::Matrix7) -> Vec<Vec<f64>> {
    (0..DIM).map(|i| (0..DIM).map(|j| m[(i, j)]).collect()).collect()
}

/// A constant-coefficient k-form on R^7, components in lexicographic order
/// of increasing index tuples.
#[pyclass(name = "KForm", from_py_object)]
#[derive(Clone)]
struct PyKForm {
    inner: forms::KForm,
}

#[pymethods]
impl PyKForm {
    #[new]
    fn new(degree: usize, components: Vec<f64>) -> PyResult<Self> {
        Ok(PyKForm {
            inner: forms::KForm::from_components(degree, components).map_err(err)?,
        })
    }

    #[staticmethod]
    fn basis(indices: Vec<usize>) -> PyResult<Self> {
        Ok(PyKForm {
            inner: forms::KForm::basis(&indices).map_err(err)?,
        })
    }

    #[getter]
    fn degree(&self) -> usize {
        self.inner.degree()
    }

    #[getter]
    fn components(&self) -> Vec<f64> {
        self.inner.components().to_vec()
    }

    fn get(&self, indices: Vec<usize>) -> PyResult<f64> {
        self.inner.get(&indices).map_err(err)
    }

    fn wedge(&self, other: &PyKForm) -> PyResult<Self> {
        Ok(PyKForm {
            inner: self.inner.wedge(&other.inner).map_err(err)?,
        })
    }

    fn interior(&self, v: Vec<f64>) -> PyResult<Self> {
        Ok(PyKForm {
            inner: self.inner.interior(&Vector(array7(&v, "vector")?)).map_err(err)?,
        })
    }

    /// Hodge star; the identity metric when `metric` is omitted.
    #[pyo3(signature = (metric=None))]
    fn hodge(&self, metric: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let g = metric.map(metric_from_rows).transpose()?.unwrap_or_else(Metric::identity);
        Ok(PyKForm {
            inner: self.inner.hodge(&g),
        })
    }

    #[pyo3(signature = (other, metric=None))]
    fn inner(&self, other: &PyKForm, metric: Option<Vec<Vec<f64>>>) -> PyResult<f64> {
        let g = metric.map(metric_from_rows).transpose()?.unwrap_or_else(Metric::identity);
        self.inner.inner(&other.inner, &g).map_err(err)
    }

    fn __add__(&self, other: &PyKForm) -> PyResult<Self> {
        if self.inner.degree() != other.inner.degree() {
            return Err(PyValueError::new_err("degrees differ"));
        }
        Ok(PyKForm {
            inner: &self.inner + &other.inner,
        })
    }

    fn __mul__(&self, c: f64) -> Self {
        PyKForm {
            inner: self.inner.scaled(c),
        }
    }

    fn __rmul__(&self, c: f64) -> Self {
        self.__mul__(c)
    }

    fn __repr__(&self) -> String {
        format!("KForm(degree={}, max_abs={:.6e})", self.inner.degree(), self.inner.max_abs())
    }
}

#[pyfunction]
fn standard_phi() -> PyKForm {
    PyKForm {
        inner: g2::standard_phi(),
    }
}

/// `(positive, margin)` with the margin the smallest eigenvalue of B.
#[pyfunction]
fn is_positive(phi: &PyKForm) -> (bool, f64) {
    let p = g2::is_positive(&phi.inner);
    (p.positive, p.margin)
}

#[pyfunction]
fn metric_from_phi(phi: &PyKForm) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(g2::metric_from_phi(&phi.inner).map_err(err)?.g()))
}

/// A positive 3-form with its metric and dual 4-form.
#[pyclass(name = "G2Structure")]
struct PyG2Structure {
    inner: g2::G2Structure,
}

#[pymethods]
impl PyG2Structure {
    #[new]
    fn new(phi: &PyKForm) -> PyResult<Self> {
        Ok(PyG2Structure {
            inner: g2::G2Structure::new(phi.inner.clone()).map_err(err)?,
        })
    }

    #[getter]
    fn phi(&self) -> PyKForm {
        PyKForm {
            inner: self.inner.phi().clone(),
        }
    }

    #[getter]
    fn psi(&self) -> PyKForm {
        PyKForm {
            inner: self.inner.psi().clone(),
        }
    }

    #[getter]
    fn metric(&self) -> Vec<Vec<f64>> {
        rows(self.inner.metric().g())
    }

    /// `J[eta]`, the derivative of psi along eta.
    fn linearized_psi(&self, eta: &PyKForm) -> PyResult<PyKForm> {
        Ok(PyKForm {
            inner: g2::linearized_psi(&self.inner, &eta.inner).map_err(err)?,
        })
    }

    fn inverse_linearized_psi(&self, chi: &PyKForm) -> PyResult<PyKForm> {
        Ok(PyKForm {
            inner: g2::inverse_linearized_psi(&self.inner, &chi.inner).map_err(err)?,
        })
    }

    fn linearized_metric(&self, eta: &PyKForm) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&g2::linearized_metric(&self.inner, &eta.inner).map_err(err)?))
    }

    /// `(p1, p7, p27)`.
    fn decompose(&self, eta: &PyKForm) -> PyResult<(PyKForm, PyKForm, PyKForm)> {
        let d = g2::decompose_137(&eta.inner, &self.inner).map_err(err)?;
        Ok((PyKForm { inner: d.p1 }, PyKForm { inner: d.p7 }, PyKForm { inner: d.p27 }))
    }
}

fn grid_from(n: usize, fd_order: usize, active_axes: usize) -> PyResult<TorusGrid> {
    let order = FdOrder::from_int(fd_order).ok_or_else(|| PyValueError::new_err("fd_order must be 2 or 4"))?;
    if !(1..=DIM).contains(&active_axes) {
        return Err(PyValueError::new_err("active_axes must be between 1 and 7"));
    }
    let shape = std::array::from_fn(|a| if a < active_axes { n } else { 1 });
    TorusGrid::with_shape(shape, [std::f64::consts::TAU; DIM], order).map_err(err)
}

/// A flow run on the torus of side `2 pi`.
#[pyclass(name = "Simulation")]
struct PySimulation {
    state: FlowState,
    kind: FlowKind,
    method: Method,
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (n=4, flow="deturck", a=0.0, method="rk4", initial="standard", epsilon=0.01, seed=1, band=1, fd_order=2, active_axes=7))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: usize,
        flow: &str,
        a: f64,
        method: &str,
        initial: &str,
        epsilon: f64,
        seed: u64,
        band: usize,
        fd_order: usize,
        active_axes: usize,
    ) -> PyResult<Self> {
        let grid = grid_from(n, fd_order, active_axes)?;
        let kind = FlowKind::from_name(flow, a).ok_or_else(|| PyValueError::new_err(format!("unknown flow {flow:?}")))?;
        let method =
            Method::from_name(method).ok_or_else(|| PyValueError::new_err(format!("unknown method {method:?}")))?;
        let data = match initial {
            "standard" => InitialData::Standard,
            "closed_perturbation" => InitialData::ClosedPerturbation { epsilon, seed, band },
            path => InitialData::File(path.into()),
        };
        let phi = grid::make_initial_data(&grid, &data).map_err(err)?;
        Ok(PySimulation {
            state: FlowState::new(phi, 0.0).map_err(err)?,
            kind,
            method,
        })
    }

    #[getter]
    fn t(&self) -> f64 {
        self.state.t()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.state.grid().shape().to_vec()
    }

    /// Step size from the diffusive bound.
    #[pyo3(signature = (cfl=flows::DEFAULT_CFL))]
    fn default_dt(&self, cfl: f64) -> f64 {
        flows::default_dt(&self.state, cfl)
    }

    /// Advance `steps` steps with step halving on positivity loss; returns
    /// the last step taken.
    #[pyo3(signature = (steps=1, dt=None))]
    fn run(&mut self, py: Python<'_>, steps: usize, dt: Option<f64>) -> PyResult<f64> {
        let mut used = 0.0;
        for _ in 0..steps {
            let h = dt.unwrap_or_else(|| flows::default_dt(&self.state, flows::DEFAULT_CFL));
            let (next, taken) = py
                .detach(|| flows::advance(&self.state, self.kind, h, self.method))
                .map_err(err)?;
            self.state = next;
            used = taken;
        }
        Ok(used)
    }

    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = py.detach(|| flows::monitors(&self.state, self.kind)).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("t", d.t)?;
        out.set_item("dphi_l2", d.dphi_l2)?;
        out.set_item("dphi_sup", d.dphi_sup)?;
        out.set_item("dpsi_l2", d.dpsi_l2)?;
        out.set_item("dpsi_sup", d.dpsi_sup)?;
        out.set_item("trace_torsion_min", d.torsion_trace_min)?;
        out.set_item("trace_torsion_max", d.torsion_trace_max)?;
        out.set_item("min_metric_eigenvalue", d.min_metric_eigenvalue)?;
        out.set_item("volume", d.volume)?;
        out.set_item("rhs_l2", d.rhs_l2)?;
        Ok(out)
    }

    /// Components of phi, site-major with axis 0 fastest.
    fn phi(&self) -> Vec<f64> {
        self.state.phi().data().to_vec()
    }

    fn write_snapshot(&self, path: &str) -> PyResult<()> {
        grid::write_snapshot(path.as_ref(), self.state.phi(), self.state.t()).map_err(err)
    }
}

/// Outcome of the positivity check on the kernel of `xi ^ .`.
#[pyclass(name = "SymbolReport", get_all)]
struct PySymbolReport {
    operator: String,
    kernel_dimension: usize,
    spectrum: Vec<(f64, f64)>,
    min_real_part: f64,
    symbol_norm: f64,
    invariance_defect: f64,
    verdict: bool,
    text: String,
}

impl From<symbol::SymbolReport> for PySymbolReport {
    fn from(r: symbol::SymbolReport) -> Self {
        PySymbolReport {
            operator: r.kind.name().to_string(),
            kernel_dimension: r.kernel_dimension(),
            spectrum: r.restricted_spectrum.iter().map(|z| (z.re, z.im)).collect(),
            min_real_part: r.min_real_part,
            symbol_norm: r.symbol_norm,
            invariance_defect: r.invariance_defect,
            verdict: r.verdict,
            text: r.to_text(),
        }
    }
}

#[pymethods]
impl PySymbolReport {
    fn __repr__(&self) -> String {
        format!(
            "SymbolReport(operator={:?}, min_real_part={:.6e}, verdict={})",
            self.operator, self.min_real_part, self.verdict
        )
    }
}

fn problem(operator: &str, a: f64, xi: &[f64], phi: Option<&PyKForm>, negate: bool) -> PyResult<SymbolProblem> {
    let kind = OperatorKind::from_name(operator, a)
        .ok_or_else(|| PyValueError::new_err(format!("unknown operator {operator:?}")))?;
    let phi = phi.map(|p| p.inner.clone()).unwrap_or_else(g2::standard_phi);
    let p = SymbolProblem::new(kind, phi, &forms::KForm::one_form(array7(xi, "xi")?)).map_err(err)?;
    Ok(if negate { p.negated() } else { p })
}

#[pyfunction]
#[pyo3(signature = (operator, xi, phi=None, a=0.0, negate=false))]
fn check_integrability(
    operator: &str,
    xi: Vec<f64>,
    phi: Option<PyRef<'_, PyKForm>>,
    a: f64,
    negate: bool,
) -> PyResult<PySymbolReport> {
    let p = problem(operator, a, &xi, phi.as_deref(), negate)?;
    Ok(symbol::check_integrability(&p).map_err(err)?.into())
}

#[pyfunction]
#[pyo3(signature = (operator, count, radius=0.1, seed=1, a=0.0))]
fn sweep(py: Python<'_>, operator: &str, count: usize, radius: f64, seed: u64, a: f64) -> PyResult<Vec<PySymbolReport>> {
    let kind = OperatorKind::from_name(operator, a)
        .ok_or_else(|| PyValueError::new_err(format!("unknown operator {operator:?}")))?;
    let reports = py.detach(|| symbol::sweep(kind, count, radius, seed)).map_err(err)?;
    Ok(reports.into_iter().map(Into::into).collect())
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// The principal symbol as a list of rows.
#[pyfunction]
#[pyo3(signature = (operator, xi, phi=None, a=0.0))]
fn assemble_symbol(operator: &str, xi: Vec<f64>, phi: Option<PyRef<'_, PyKForm>>, a: f64) -> PyResult<Vec<Vec<f64>>> {
    let p = problem(operator, a, &xi, phi.as_deref(), false)?;
    Ok(matrix_rows(&symbol::assemble_symbol_exact(&p).map_err(err)?))
}

/// Plane-wave estimate of the symbol on an `n`-site grid; returns the
/// discrete wavevector and the matrix.
#[pyfunction]
#[pyo3(signature = (operator, xi, phi=None, a=0.0, n=4))]
fn extract_symbol_planewave(
    py: Python<'_>,
    operator: &str,
    xi: Vec<f64>,
    phi: Option<PyRef<'_, PyKForm>>,
    a: f64,
    n: usize,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let p = problem(operator, a, &xi, phi.as_deref(), false)?;
    let grid = symbol::planewave_grid(n).map_err(err)?;
    let ex = py.detach(|| symbol::extract_symbol_planewave(&p, &grid)).map_err(err)?;
    Ok((ex.xi_discrete.to_vec(), matrix_rows(&ex.matrix)))
}

/// The invariant suite as `(name, passed, value, tolerance)` rows.
#[pyfunction]
#[pyo3(signature = (n=4))]
fn validate(py: Python<'_>, n: usize) -> PyResult<Vec<(String, bool, f64, f64)>> {
    if n < 4 {
        return Err(PyValueError::new_err("n must be at least 4"));
    }
    let checks = py.detach(|| g2flow::validate::run_suite(n, FdOrder::Second));
    Ok(checks
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.value, c.tolerance))
        .collect())
}

/// Runs the command-line interface in-process; returns the exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let (mut out, mut errs) = (Vec::new(), Vec::new());
        let status = g2flow::cli::run(&args, &mut out, &mut errs);
        (
            status,
            String::from_utf8_lossy(&out).into_owned(),
            String::from_utf8_lossy(&errs).into_owned(),
        )
    })
}

#[pymodule]
pub fn g2flow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKForm>()?;
    m.add_class::<PyG2Structure>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PySymbolReport>()?;
    m.add_function(wrap_pyfunction!(standard_phi, m)?)?;
    m.add_function(wrap_pyfunction!(is_positive, m)?)?;
    m.add_function(wrap_pyfunction!(metric_from_phi, m)?)?;
    m.add_function(wrap_pyfunction!(check_integrability, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_symbol, m)?)?;
    m.add_function(wrap_pyfunction!(extract_symbol_planewave, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("DIM", DIM)?;
    Ok(())
}

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(&Bound<'_, PyModule>) -> PyResult<()>>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "g2flow_py").unwrap();
        g2flow_py::g2flow_py(&m).unwrap();
        f(&m).unwrap();
    });
}

#[test]
fn symbol_check_round_trip() {
    with_module(|m| {
        let xi = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let report = m.getattr("check_integrability")?.call1(("deturck", xi.clone()))?;
        assert!(report.getattr("verdict")?.extract::<bool>()?);
        assert_eq!(report.getattr("kernel_dimension")?.extract::<usize>()?, 15);
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("negate", true)?;
        let negated = m.getattr("check_integrability")?.call(("deturck", xi), Some(&kwargs))?;
        assert!(!negated.getattr("verdict")?.extract::<bool>()?);
        Ok(())
    });
}

#[test]
fn forms_and_structure() {
    with_module(|m| {
        let phi = m.getattr("standard_phi")?.call0()?;
        let s = m.getattr("G2Structure")?.call1((phi.clone(),))?;
        let g: Vec<Vec<f64>> = s.getattr("metric")?.extract()?;
        for (i, row) in g.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                assert!((x - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let star: Vec<f64> = phi.call_method0("hodge")?.getattr("components")?.extract()?;
        let psi: Vec<f64> = s.getattr("psi")?.getattr("components")?.extract()?;
        assert!(star.iter().zip(&psi).all(|(a, b)| (a - b).abs() < 1e-14));
        let bad = m.getattr("KForm")?.call1((3, vec![0.0; 2]));
        assert!(bad.unwrap_err().is_instance_of::<pyo3::exceptions::PyValueError>(m.py()));
        Ok(())
    });
}

#[test]
fn simulation_keeps_fixed_point() {
    with_module(|m| {
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("active_axes", 2)?;
        let sim = m.getattr("Simulation")?.call((), Some(&kwargs))?;
        sim.call_method1("run", (2,))?;
        let d = sim.call_method0("diagnostics")?;
        let rhs: f64 = d.get_item("rhs_l2")?.extract()?;
        assert!(rhs < 1e-12);
        assert!(sim.getattr("t")?.extract::<f64>()? > 0.0);
        Ok(())
    });
}

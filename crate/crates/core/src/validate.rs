//! Invariant suite behind the `validate` command. Every check reports a
//! nonnegative defect and passes when it is at most its tolerance.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flows::{self, deturck_vector, rhs, step, FlowKind, FlowState, Method};
use crate::forms::{form_dim, KForm, Matrix7, Metric, Vector, DIM};
use crate::g2::{
    decompose_137, inverse_linearized_psi, is_positive, linearized_metric, linearized_psi, metric_from_phi,
    standard_phi, G2Structure,
};
use crate::grid::{
    codiff, ext_d, hodge_laplacian, l2_inner, make_initial_data, random_band_limited, read_snapshot_from,
    write_snapshot_to, FdOrder, FormField, InitialData, MetricField, TorusGrid,
};
use crate::symbol::{
    assemble_symbol_exact, check_integrability, extract_symbol_planewave, sigma_l, OperatorKind, SymbolProblem,
};

const SEED: u64 = 20240917;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check(name: &'static str, value: f64, tolerance: f64) -> Check {
    Check {
        name,
        value,
        tolerance,
        passed: value <= tolerance,
    }
}

/// A failed computation counts as an infinite defect.
fn defect<E>(r: Result<f64, E>) -> f64 {
    r.unwrap_or(f64::INFINITY)
}

fn random_form(rng: &mut ChaCha8Rng, degree: usize) -> KForm {
    let comps = (0..form_dim(degree)).map(|_| rng.random_range(-1.0..1.0)).collect();
    KForm::from_components(degree, comps).expect("component count")
}

fn random_metric(rng: &mut ChaCha8Rng) -> Metric {
    let a = Matrix7::from_fn(|i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
    Metric::new(a * a.transpose() + Matrix7::identity() * 0.2).expect("positive definite")
}

fn random_positive(rng: &mut ChaCha8Rng) -> KForm {
    loop {
        let mut phi = standard_phi();
        for c in phi.components_mut() {
            *c += rng.random_range(-0.2..0.2);
        }
        if is_positive(&phi).positive {
            return phi;
        }
    }
}

fn diff(a: &KForm, b: &KForm) -> f64 {
    (a - b).max_abs()
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let max = sv.max();
    sv.iter().filter(|s| **s > 1e-10 * max).count()
}

fn cos_mode(grid: &TorusGrid) -> FormField {
    FormField::from_fn(grid, 0, |x| KForm::scalar(x[0].cos()))
}

fn forms_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let g = random_metric(rng);
    let star_star = (0..=DIM)
        .map(|k| {
            let a = random_form(rng, k);
            diff(&a.hodge(&g).hodge(&g), &a)
        })
        .fold(0.0, f64::max);
    out.push(check("forms: star star = id", star_star, 1e-12));

    let a = random_form(rng, 2);
    let b = random_form(rng, 3);
    let graded = defect(a.wedge(&b).and_then(|ab| b.wedge(&a).map(|ba| diff(&ab, &ba))));
    out.push(check("forms: graded commutativity", graded, 1e-14));

    let v = Vector(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let leibniz = defect((|| {
        let lhs = a.wedge(&b)?.interior(&v)?;
        let rhs = &a.interior(&v)?.wedge(&b)? + &a.wedge(&b.interior(&v)?)?;
        Ok::<f64, crate::forms::FormError>(diff(&lhs, &rhs))
    })());
    out.push(check("forms: interior Leibniz rule", leibniz, 1e-13));

    let vol = g.volume_form();
    out.push(check("forms: |vol|_g = 1", defect(vol.inner(&vol, &g).map(|x| (x - 1.0).abs())), 1e-12));

    let c = random_form(rng, 3);
    let d = random_form(rng, 3);
    let pairing = defect((|| {
        let top = c.wedge(&d.hodge(&g))?;
        let expected = vol.scaled(c.inner(&d, &g)?);
        Ok::<f64, crate::forms::FormError>(diff(&top, &expected))
    })());
    out.push(check("forms: a ^ *b = <a,b> vol", pairing, 1e-12));
}

fn g2_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let phi0 = standard_phi();
    let s0 = G2Structure::standard();
    out.push(check(
        "g2: g(phi0) = identity",
        defect(metric_from_phi(&phi0).map(|m| (m.g() - Matrix7::identity()).amax())),
        1e-10,
    ));

    let phi = random_positive(rng);
    let mu: f64 = 1.7;
    let scaling = defect((|| {
        let g1 = metric_from_phi(&phi)?;
        let g2 = metric_from_phi(&phi.scaled(mu))?;
        Ok::<f64, crate::g2::G2Error>((g2.g() - g1.g() * mu.powf(2.0 / 3.0)).amax())
    })());
    out.push(check("g2: g(mu phi) = mu^(2/3) g(phi)", scaling, 1e-10));

    let seven = defect(s0.phi().wedge(s0.psi()).map(|top| (top.components()[0] - 7.0).abs()));
    out.push(check("g2: phi0 ^ psi0 = 7 vol", seven, 1e-12));

    let dg = defect(linearized_metric(&s0, &phi0).map(|h| (h - Matrix7::identity() * (2.0 / 3.0)).amax()));
    out.push(check("g2: Dg(phi0)[phi0] = 2/3 id", dg, 1e-8));

    let j = defect(linearized_psi(&s0, &phi0).map(|x| diff(&x, &s0.psi().scaled(4.0 / 3.0))));
    out.push(check("g2: J(phi0)[phi0] = 4/3 psi0", j, 1e-8));

    let roundtrip = defect((|| {
        let s = G2Structure::new(random_positive(rng))?;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let eta = random_form(rng, 3);
            let back = inverse_linearized_psi(&s, &linearized_psi(&s, &eta)?)?;
            worst = worst.max(diff(&back, &eta) / eta.max_abs());
        }
        Ok::<f64, crate::g2::G2Error>(worst)
    })());
    out.push(check("g2: J^-1 J = id (100 inputs)", roundtrip, 1e-8));

    let split = defect((|| {
        let s = G2Structure::new(random_positive(rng))?;
        let eta = random_form(rng, 3);
        let d = decompose_137(&eta, &s)?;
        let sum = &(&d.p1 + &d.p7) + &d.p27;
        let g = s.metric();
        let cross = d.p1.inner(&d.p7, g)?.abs() + d.p1.inner(&d.p27, g)?.abs() + d.p7.inner(&d.p27, g)?.abs();
        Ok::<f64, crate::g2::G2Error>(diff(&sum, &eta) + cross)
    })());
    out.push(check("g2: 1+7+27 split is orthogonal and complete", split, 1e-10));

    let ranks = defect((|| {
        let s = G2Structure::new(random_positive(rng))?;
        let mut m7 = DMatrix::zeros(35, 35);
        let mut m27 = DMatrix::zeros(35, 35);
        for b in 0..35 {
            let mut e = vec![0.0; 35];
            e[b] = 1.0;
            let d = decompose_137(&KForm::from_components(3, e)?, &s)?;
            m7.set_column(b, &nalgebra::DVector::from_column_slice(d.p7.components()));
            m27.set_column(b, &nalgebra::DVector::from_column_slice(d.p27.components()));
        }
        Ok::<f64, crate::g2::G2Error>((rank(&m7) as f64 - 7.0).abs() + (rank(&m27) as f64 - 27.0).abs())
    })());
    out.push(check("g2: summand dimensions 7 and 27", ranks, 0.0));

    let degenerate = KForm::basis(&[0, 1, 2]).expect("indices");
    out.push(check(
        "g2: e012 is not positive",
        if is_positive(&degenerate).positive { 1.0 } else { 0.0 },
        0.0,
    ));
}

fn grid_checks(grid: &TorusGrid, out: &mut Vec<Check>) {
    for (name, degree) in [("grid: d d = 0 on 1-forms", 1), ("grid: d d = 0 on 2-forms", 2)] {
        let dd = defect(random_band_limited(grid, degree, SEED, 1).and_then(|a| ext_d(&ext_d(&a)?)).map(|f| f.sup_norm()));
        out.push(check(name, dd, 1e-12));
    }

    let closed = make_initial_data(
        grid,
        &InitialData::ClosedPerturbation {
            epsilon: 0.05,
            seed: SEED,
            band: 1,
        },
    )
    .ok();
    let missing = || crate::grid::GridError::Shape("closed initial data".into());
    let adjoint = defect((|| {
        let phi = closed.clone().ok_or_else(missing)?;
        let m = MetricField::from_phi(&phi)?;
        let alpha = random_band_limited(grid, 2, SEED + 1, 1)?;
        let beta = random_band_limited(grid, 3, SEED + 2, 1)?;
        let lhs = l2_inner(&ext_d(&alpha)?, &beta, &m)?;
        let rhs = l2_inner(&alpha, &codiff(&beta, &m)?, &m)?;
        Ok::<f64, crate::grid::GridError>((lhs - rhs).abs() / lhs.abs().max(1.0))
    })());
    out.push(check("grid: <d a, b> = <a, d* b>", adjoint, 1e-12));

    let flat = MetricField::constant(grid, &Metric::identity());
    let constant = defect(hodge_laplacian(&FormField::constant(grid, &standard_phi()), &flat).map(|f| f.sup_norm()));
    out.push(check("grid: Laplacian of a constant form = 0", constant, 1e-12));

    let mode = cos_mode(grid);
    let lambda = grid.discrete_wavenumber(0, 1).powi(2);
    let eigen = defect(
        hodge_laplacian(&mode, &flat)
            .and_then(|l| l.axpy(-lambda, &mode))
            .map(|f| f.sup_norm()),
    );
    out.push(check("grid: Laplacian of cos x0 = |k_h|^2 cos x0", eigen, 1e-12));

    let roundtrip = defect((|| {
        let phi = closed.clone().ok_or_else(missing)?;
        let mut bytes = Vec::new();
        write_snapshot_to(&mut bytes, &phi, 0.25)?;
        let (back, t) = read_snapshot_from(&mut bytes.as_slice())?;
        Ok::<f64, crate::grid::GridError>(if back == phi && t == 0.25 { 0.0 } else { 1.0 })
    })());
    out.push(check("grid: snapshot round trip is exact", roundtrip, 0.0));

    let d_closed = defect(closed.ok_or_else(missing).and_then(|phi| ext_d(&phi)).map(|f| f.sup_norm()));
    out.push(check("grid: closed initial data has d phi = 0", d_closed, 1e-12));
}

fn flow_checks(grid: &TorusGrid, out: &mut Vec<Check>) {
    let base = FlowState::new(FormField::constant(grid, &standard_phi()), 0.0).expect("phi0 is positive");
    let names = [
        ("flows: phi0 is fixed by laplacian", FlowKind::Laplacian),
        ("flows: phi0 is fixed by deturck", FlowKind::Deturck),
        ("flows: phi0 is fixed by coflow", FlowKind::Coflow),
        ("flows: phi0 is fixed by modified_coflow", FlowKind::ModifiedCoflow { a: 0.0 }),
        ("flows: phi0 is fixed by gauged co-flow", FlowKind::GaugedModifiedCoflow { a: 1.0 }),
    ];
    for (name, kind) in names {
        out.push(check(name, defect(rhs(&base, kind).map(|r| r.sup_norm())), 1e-12));
    }
    let v = deturck_vector(&base).iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    out.push(check("flows: DeTurck vector vanishes at phi0", v, 1e-12));

    let dt = flows::default_dt(&base, flows::DEFAULT_CFL);
    let still = defect(
        step(&base, FlowKind::Deturck, dt, Method::Rk4)
            .map_err(|e| e.to_string())
            .and_then(|s| s.phi().sub(base.phi()).map_err(|e| e.to_string()))
            .map(|d| d.sup_norm()),
    );
    out.push(check("flows: RK4 step keeps phi0", still, 1e-12));

    let closedness = defect((|| {
        let phi = make_initial_data(
            grid,
            &InitialData::ClosedPerturbation {
                epsilon: 0.01,
                seed: SEED,
                band: 1,
            },
        )?;
        let state = FlowState::new(phi, 0.0)?;
        let dt = flows::default_dt(&state, flows::DEFAULT_CFL);
        let next = step(&state, FlowKind::Deturck, dt, Method::Rk4)?;
        Ok::<f64, flows::FlowError>(ext_d(next.phi())?.sup_norm() / next.phi().sup_norm())
    })());
    out.push(check("flows: deturck step keeps d phi = 0", closedness, 1e-10));
}

fn symbol_checks(rng: &mut ChaCha8Rng, out: &mut Vec<Check>) {
    let xi = KForm::one_form(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let kernel = defect((|| {
        let k3 = 35 - rank(&sigma_l(&xi, 3)?);
        let k4 = 35 - rank(&sigma_l(&xi, 4)?);
        Ok::<f64, crate::symbol::SymbolError>((k3 as f64 - 15.0).abs() + (k4 as f64 - 20.0).abs())
    })());
    out.push(check("symbol: ker sigma_L dimensions 15 and 20", kernel, 0.0));

    let mut e0 = [0.0; DIM];
    e0[0] = 1.0;
    let spectrum_defect = |kind: OperatorKind| {
        defect(
            SymbolProblem::new(kind, standard_phi(), &KForm::one_form(e0))
                .and_then(|p| check_integrability(&p))
                .map(|r| r.restricted_spectrum.iter().map(|z| (z - 1.0).norm()).fold(0.0, f64::max)),
        )
    };
    out.push(check("symbol: deturck spectrum at phi0 = {1}", spectrum_defect(OperatorKind::Deturck), 1e-8));
    let coflow = [0.0, 1.0, -3.0]
        .iter()
        .map(|&a| spectrum_defect(OperatorKind::GaugedModifiedCoflow { a }))
        .fold(0.0, f64::max);
    out.push(check("symbol: co-flow spectrum at phi0 = {1}", coflow, 1e-8));

    let negated = defect(
        SymbolProblem::new(OperatorKind::Deturck, standard_phi(), &KForm::one_form(e0))
            .and_then(|p| check_integrability(&p.negated()))
            .map(|r| if r.verdict { 1.0 } else { 0.0 }),
    );
    out.push(check("symbol: negated operator fails", negated, 0.0));

    let planewave = defect((|| {
        let grid = crate::symbol::planewave_grid(4)?;
        let p = SymbolProblem::new(OperatorKind::Deturck, random_positive(rng), &KForm::one_form(e0))?;
        let ex = extract_symbol_planewave(&p, &grid)?;
        let exact = assemble_symbol_exact(&p.with_xi(ex.xi_discrete)?)?;
        Ok::<f64, crate::symbol::SymbolError>((&ex.matrix - &exact).norm() / exact.norm())
    })());
    out.push(check("symbol: plane-wave extraction = exact", planewave, 1e-4));
}

/// All checks, in a fixed order, on a grid with `n` sites per axis.
pub fn run_suite(n: usize, order: FdOrder) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut out = Vec::new();
    forms_checks(&mut rng, &mut out);
    g2_checks(&mut rng, &mut out);
    match TorusGrid::standard(n, order) {
        Ok(grid) => {
            grid_checks(&grid, &mut out);
            flow_checks(&grid, &mut out);
        }
        Err(_) => out.push(check("grid: construction", f64::INFINITY, 0.0)),
    }
    symbol_checks(&mut rng, &mut out);
    out
}

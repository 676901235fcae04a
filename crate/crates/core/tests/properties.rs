use proptest::prelude::*;

use g2flow::cli::RawConfig;
use g2flow::forms::{form_dim, KForm, Matrix7, Metric};
use g2flow::g2::{is_positive, metric_from_phi, standard_phi};

fn form(degree: usize) -> impl Strategy<Value = KForm> {
    prop::collection::vec(-1.0f64..1.0, form_dim(degree)).prop_map(move |c| KForm::from_components(degree, c).unwrap())
}

fn metric() -> impl Strategy<Value = Metric> {
    prop::collection::vec(-0.3f64..0.3, 49).prop_map(|v| {
        let a = Matrix7::identity() + Matrix7::from_column_slice(&v);
        Metric::new(a * a.transpose() + Matrix7::identity() * 0.2).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_parsing_never_panics(text in "\\PC{0,200}") {
        if let Ok(raw) = RawConfig::parse_text(&text, "input") {
            let _ = raw.build(None);
        }
    }

    #[test]
    fn config_values_never_panic(key in prop::sample::select(g2flow::cli::KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>()), value in "\\PC{0,24}") {
        let mut raw = RawConfig::default();
        if raw.set(key, &value).is_ok() {
            let _ = raw.build(Some(g2flow::cli::Command::Validate));
        }
    }

    #[test]
    fn wedge_is_associative(a in form(1), b in form(2), c in form(2)) {
        let left = a.wedge(&b).unwrap().wedge(&c).unwrap();
        let right = a.wedge(&b.wedge(&c).unwrap()).unwrap();
        prop_assert!((&left - &right).max_abs() < 1e-13);
    }

    #[test]
    fn hodge_is_an_isometry(a in form(3), b in form(3), g in metric()) {
        let lhs = a.hodge(&g).inner(&b.hodge(&g), &g).unwrap();
        let rhs = a.inner(&b, &g).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn small_perturbations_of_phi0_are_positive(d in form(3)) {
        let phi = &standard_phi() + &d.scaled(0.05);
        prop_assert!(is_positive(&phi).positive);
        let g = metric_from_phi(&phi).unwrap();
        prop_assert!(g.min_eigenvalue() > 0.0);
    }
}

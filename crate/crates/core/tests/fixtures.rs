use cqa_core::cases::{builtin, reproduce, BUILTIN_NAMES};
use cqa_core::{newton_pf, build_ybus, NewtonOptions, Tolerances};

#[test]
fn repro_reports_pass() {
    let tol = Tolerances::default();
    for (which, alpha) in [("ex1", 1.0), ("ex1", 2.0), ("ex1", 0.5), ("ex2", 1.0), ("ex3", 1.0)] {
        let rep = reproduce(which, alpha, &tol).unwrap();
        for c in &rep.checks {
            println!("{which} {alpha}: {} {} {}", c.name, c.passed, c.detail);
        }
        assert!(rep.passed, "{}", rep.summary);
    }
}

#[test]
fn newton_from_flat_reaches_fixture_points() {
    for name in BUILTIN_NAMES {
        for alpha in [0.5, 1.0, 2.0] {
            let fx = builtin(name, alpha).unwrap();
            let y = build_ybus(&fx.case.network).unwrap();
            let sol = newton_pf(&fx.case.network, &y, &NewtonOptions::default(), None).unwrap();
            println!("{name} {alpha}: iters {} v {:?} th {:?}", sol.iterations, sol.state.v, sol.state.theta);
            assert!(sol.iterations <= 10);
            assert!(sol.mismatch <= 1e-10);
        }
    }
}

#[test]
fn fixtures_survive_json_round_trip() {
    for name in BUILTIN_NAMES {
        let fx = builtin(name, 1.5).unwrap();
        let text = fx.case_json().unwrap();
        let back = cqa_core::load_case(&text).unwrap();
        assert_eq!(back, fx.case, "{name}");
        assert_eq!(back.to_json().unwrap(), text, "{name}");
    }
}

#[test]
fn flat_no_load_point_has_zero_residual_and_zero_line_jacobian() {
    use cqa_core::cases::{example3, mesh3, radial5};
    use cqa_core::{param_jacobian, pf_residual, ModelKind};
    let shunt_free = |mut net: cqa_core::Network| {
        for l in &mut net.lines {
            l.b_shunt = 0.0;
            l.g_shunt = 0.0;
        }
        for b in &mut net.buses {
            b.b_shunt = 0.0;
            b.g_shunt = 0.0;
        }
        net
    };
    for net in [shunt_free(mesh3().unwrap()), shunt_free(radial5().unwrap())] {
        let fx = example3(&net).unwrap();
        let x = fx.case.start.clone().unwrap();
        let y = build_ybus(&fx.case.network).unwrap();
        let diag = (0..y.dim()).map(|k| y.g[(k, k)].abs().max(y.b[(k, k)].abs())).fold(0.0, f64::max);
        assert!(pf_residual(&fx.case.network, &y, &x).unwrap().amax() <= 8.0 * f64::EPSILON * diag);
        let j = param_jacobian(&ModelKind::Line, &fx.case.network, &x).unwrap();
        assert_eq!(j.amax(), 0.0);
    }
    assert!(example3(&mesh3().unwrap()).is_err());
}

#[test]
fn zero_trials_give_an_empty_report() {
    use cqa_core::{run_genericity_experiment, ModelKind, PerturbationModel};
    let fx = builtin("ex1", 1.0).unwrap();
    let model = PerturbationModel::default_for(ModelKind::Load, &fx.case.network).unwrap();
    let rep = run_genericity_experiment(&fx.case, &model, 0, 7, &Tolerances::default()).unwrap();
    assert_eq!(rep.trials, 0);
    assert!(rep.records.is_empty() && rep.failures.is_empty() && rep.sigma_min_sorted.is_empty());
    assert_eq!(rep.min_sigma_min(), None);
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().trim(), "trial,seed,feasible,licq,sigma_min");
}

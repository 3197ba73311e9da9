mod common;

use common::{fd_jacobian, max_rel_err, random_network, random_state, rng};
use cqa_core::perturb::{apply_parameters, nominal_parameters, param_jacobian, ModelKind};
use cqa_core::{build_ybus, pf_jacobian, pf_residual, OperationalConstraint, SystemState};
use nalgebra::DMatrix;
use rand::Rng;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-6;

#[test]
fn pf_jacobian_matches_central_differences() {
    let mut r = rng(1);
    for trial in 0..100 {
        let n = r.random_range(2..=5);
        let net = random_network(&mut r, n, trial % 2 == 0);
        let y = build_ybus(&net).unwrap();
        let x = random_state(&mut r, n);
        let analytic = pf_jacobian(&net, &y, &x).unwrap();
        let numeric = fd_jacobian(&x, 2 * n, STEP, |s| pf_residual(&net, &y, s).unwrap().as_slice().to_vec());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= REL_TOL, "trial {trial}: rel err {err:e}");
    }
}

fn catalog(n: usize, r: &mut impl Rng) -> Vec<OperationalConstraint> {
    let bus = r.random_range(0..n);
    let idx = r.random_range(0..4 * n);
    vec![
        OperationalConstraint::box_upper(idx, r.random_range(-1.0..1.0)),
        OperationalConstraint::box_lower(idx, r.random_range(-1.0..1.0)),
        OperationalConstraint::linear_eq(
            &[(idx, r.random_range(-2.0..2.0)), (r.random_range(0..4 * n), r.random_range(-2.0..2.0))],
            r.random_range(-1.0..1.0),
        ),
        OperationalConstraint::apparent_power(bus, r.random_range(0.1..2.0)),
        OperationalConstraint::exp_load_eq(bus, r.random_range(0.1..3.0), r.random_range(-1.0..1.0)),
    ]
}

#[test]
fn constraint_gradients_match_central_differences() {
    let mut r = rng(2);
    for trial in 0..100 {
        let n = r.random_range(1..=4);
        let x = random_state(&mut r, n);
        for c in catalog(n, &mut r) {
            let g = c.gradient(&x).unwrap();
            let analytic = DMatrix::from_row_slice(1, g.len(), &g);
            let numeric = fd_jacobian(&x, 1, STEP, |s| vec![c.value(s).unwrap()]);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= REL_TOL, "trial {trial} {:?}: rel err {err:e}", c.kind());
        }
    }
}

/// `∂F/∂ξ` by central differences over the parameter vector.
fn fd_param_jacobian(kind: &ModelKind, net: &cqa_core::Network, x: &SystemState) -> DMatrix<f64> {
    let xi0 = nominal_parameters(kind, net).unwrap();
    let n = net.n_bus();
    let mut jac = DMatrix::zeros(2 * n, xi0.len());
    for j in 0..xi0.len() {
        let eval = |d: f64| {
            let mut xi = xi0.clone();
            xi[j] += d;
            let moved = apply_parameters(kind, net, &xi).unwrap();
            let y = build_ybus(&moved).unwrap();
            pf_residual(&moved, &y, x).unwrap()
        };
        let col = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        jac.set_column(j, &col);
    }
    jac
}

#[test]
fn param_jacobians_match_central_differences() {
    let mut r = rng(3);
    for trial in 0..100 {
        let n = r.random_range(2..=5);
        let net = random_network(&mut r, n, true);
        let x = random_state(&mut r, n);
        let flags: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        for kind in [ModelKind::Load, ModelKind::Shunt, ModelKind::Line, ModelKind::Mixed { shunt_buses: flags.clone() }] {
            let analytic = param_jacobian(&kind, &net, &x).unwrap();
            let numeric = fd_param_jacobian(&kind, &net, &x);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= REL_TOL, "trial {trial} {kind:?}: rel err {err:e}");
        }
    }
}

#[test]
fn shunt_reactive_block_is_plus_v_squared() {
    let mut r = rng(4);
    let net = random_network(&mut r, 3, true);
    let x = random_state(&mut r, 3);
    let numeric = fd_param_jacobian(&ModelKind::Shunt, &net, &x);
    for k in 0..3 {
        let v2 = x.v[k] * x.v[k];
        assert!((numeric[(k, k)] + v2).abs() < 1e-8);
        assert!((numeric[(3 + k, 3 + k)] - v2).abs() < 1e-8);
    }
}

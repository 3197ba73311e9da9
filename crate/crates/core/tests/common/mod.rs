#![allow(dead_code)]

use cqa_core::{Bus, Line, Network, SystemState};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random connected network: slack at bus 0, a spanning chain plus a few
/// chords, random loads, optional shunts.
pub fn random_network<R: Rng>(rng: &mut R, n: usize, shunts: bool) -> Network {
    let mut buses = vec![Bus::slack(0, rng.random_range(0.95..1.05), rng.random_range(-0.2..0.2))];
    for k in 1..n {
        let mut b = if rng.random_bool(0.3) { Bus::pv(k, rng.random_range(0.95..1.05)) } else { Bus::pq(k) };
        b.p_load = rng.random_range(-0.5..0.5);
        b.q_load = rng.random_range(-0.3..0.3);
        if shunts {
            b.g_shunt = rng.random_range(-0.05..0.05);
            b.b_shunt = rng.random_range(-0.2..0.2);
        }
        buses.push(b);
    }
    let mut lines = Vec::new();
    let mut add = |from: usize, to: usize, rng: &mut R| {
        let mut l = Line::series(from, to, rng.random_range(0.0..3.0), rng.random_range(-10.0..-1.0));
        if shunts {
            l.g_shunt = rng.random_range(0.0..0.02);
            l.b_shunt = rng.random_range(0.0..0.2);
        }
        lines.push(l);
    };
    for k in 1..n {
        add(k - 1, k, rng);
    }
    for k in 2..n {
        if rng.random_bool(0.5) {
            add(0, k, rng);
        }
    }
    Network::new(buses, lines, vec![]).unwrap()
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize) -> SystemState {
    let mut x = SystemState::flat(n);
    for k in 0..n {
        x.p_gen[k] = rng.random_range(-1.0..1.0);
        x.q_gen[k] = rng.random_range(-1.0..1.0);
        x.v[k] = rng.random_range(0.1..1.5);
        x.theta[k] = rng.random_range(-1.0..1.0);
    }
    x
}

/// Central differences of a vector map over every flattened state entry.
pub fn fd_jacobian<F>(x: &SystemState, rows: usize, step: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&SystemState) -> Vec<f64>,
{
    let n = 4 * x.n_bus();
    let mut jac = DMatrix::zeros(rows, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.set(j, x.get(j) + step);
        xm.set(j, x.get(j) - step);
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..rows {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

/// Max of `|a - b| / max(1, |a|)` over all entries.
pub fn max_rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

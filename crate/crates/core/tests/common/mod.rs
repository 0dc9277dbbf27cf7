#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use vbphys::kinetics::{LevelGraph, Manifold, RateSpec, StateSpec};

/// Log-uniform draw in `[lo, hi]`.
pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Random graph with 2..=`max_states` states; every ordered pair carries an
/// edge with probability 0.4, with rates log-uniform in `[1e-3, 2e3]` MHz at
/// `reference_power` mW. With `power_edges`, some edges scale with power.
pub fn random_graph<R: Rng>(rng: &mut R, max_states: usize, power_edges: bool, reference_power: f64) -> LevelGraph {
    let n = rng.random_range(2..=max_states);
    let states: Vec<StateSpec> = (0..n)
        .map(|i| StateSpec::new(format!("s{i}"), Manifold::TripletGround, None))
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && (rng.random_bool(0.4) || (j == (i + 1) % n && edges.is_empty())) {
                let rate = log_uniform(rng, 1e-3, 2e3);
                let exponent: u8 = if power_edges { rng.random_range(0..=2) } else { 0 };
                let coefficient = rate / reference_power.powi(exponent as i32);
                edges.push(RateSpec::new(format!("s{i}"), format!("s{j}"), coefficient, exponent));
            }
        }
    }
    let weights = BTreeMap::from([("s0".to_string(), 1.0)]);
    LevelGraph::new(states, edges, weights).unwrap()
}

pub fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0) + 1e-3);
    let s = v.sum();
    v / s
}

/// Classical fixed-step RK4 for `dp/dt = M p` with `M` in MHz and times in ns.
/// Returns the state at each requested time (sorted ascending).
pub fn rk4(m: &DMatrix<f64>, p0: &DVector<f64>, h_ns: f64, times_ns: &[f64]) -> Vec<DVector<f64>> {
    let a = m * 1e-3;
    let mut p = p0.clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times_ns.len());
    for &target in times_ns {
        let steps = ((target - t) / h_ns).round() as usize;
        for _ in 0..steps {
            let k1 = &a * &p;
            let k2 = &a * (&p + &k1 * (h_ns / 2.0));
            let k3 = &a * (&p + &k2 * (h_ns / 2.0));
            let k4 = &a * (&p + &k3 * h_ns);
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h_ns / 6.0);
        }
        t += steps as f64 * h_ns;
        out.push(p.clone());
    }
    out
}

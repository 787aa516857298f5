mod common;

use common::*;
use confgen::dynamics::{dynamics_eval, jacobian_trace, DynamicsConfig, DynamicsNet, TraceMode};
use confgen::{Edge, MolecularGraph};
use proptest::prelude::*;

fn permuted(g: &MolecularGraph, perm: &[usize]) -> MolecularGraph {
    let mut atoms = g.atoms().to_vec();
    for (i, &p) in perm.iter().enumerate() {
        atoms[p] = g.atoms()[i];
    }
    let edges = g.edges().iter().map(|e| Edge { u: perm[e.u], v: perm[e.v], bond: e.bond });
    MolecularGraph::new(atoms, edges).unwrap()
}

fn fd_trace(net: &DynamicsNet, g: &MolecularGraph, d: &[f64], t: f64) -> f64 {
    let h = 1e-5;
    (0..d.len())
        .map(|i| {
            let (mut dp, mut dm) = (d.to_vec(), d.to_vec());
            dp[i] += h;
            dm[i] -= h;
            (dynamics_eval(net, g, &dp, t).unwrap()[i] - dynamics_eval(net, g, &dm, t).unwrap()[i]) / (2.0 * h)
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn drift_is_equivariant_under_atom_relabelling(n in 3usize..8, seed in 0u64..1000, t in 0.0f64..1.0) {
        let g = random_tree(n, seed);
        let net = DynamicsNet::new(DynamicsConfig::desk(), seed).unwrap();
        let d: Vec<f64> = confgen::flow::latent(&g, seed, 0).iter().map(|x| 1.5 + 0.3 * x).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut confgen::rng::stream(seed ^ 0xabc));
        let pg = permuted(&g, &perm);
        // Position of each original edge in the relabelled graph.
        let moved: Vec<usize> = g
            .edges()
            .iter()
            .map(|e| {
                let key = (perm[e.u].min(perm[e.v]), perm[e.u].max(perm[e.v]));
                pg.edges().iter().position(|pe| (pe.u, pe.v) == key).unwrap()
            })
            .collect();
        let mut pd = vec![0.0; d.len()];
        for (k, &j) in moved.iter().enumerate() {
            pd[j] = d[k];
        }
        let out = dynamics_eval(&net, &g, &d, t).unwrap();
        let pout = dynamics_eval(&net, &pg, &pd, t).unwrap();
        for (k, &j) in moved.iter().enumerate() {
            prop_assert!((out[k] - pout[j]).abs() < 1e-12, "edge {}: {} vs {}", k, out[k], pout[j]);
        }
    }

    #[test]
    fn exact_trace_matches_finite_differences(n in 3usize..8, seed in 0u64..1000, t in 0.0f64..1.0) {
        let g = random_tree(n, seed);
        let net = DynamicsNet::new(DynamicsConfig::desk(), seed + 1).unwrap();
        let d: Vec<f64> = confgen::flow::latent(&g, seed, 1).iter().map(|x| 1.5 + 0.3 * x).collect();
        let exact = jacobian_trace(&net, &g, &d, t, TraceMode::Exact, 0).unwrap();
        let fd = fd_trace(&net, &g, &d, t);
        prop_assert!((exact - fd).abs() < 1e-6 * exact.abs().max(1e-3), "{} vs {}", exact, fd);
    }
}

#[test]
fn zero_head_gives_zero_drift_everywhere() {
    let mut net = DynamicsNet::new(DynamicsConfig::desk(), 3).unwrap();
    net.zero_output_head();
    for seed in 0..5 {
        let g = random_tree(5, seed);
        let d: Vec<f64> = confgen::flow::latent(&g, seed, 0);
        assert!(dynamics_eval(&net, &g, &d, 0.4).unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(jacobian_trace(&net, &g, &d, 0.4, TraceMode::Exact, 0).unwrap(), 0.0);
    }
}

#[test]
fn mismatched_or_non_finite_input_is_rejected() {
    let net = DynamicsNet::new(DynamicsConfig::desk(), 3).unwrap();
    let g = random_tree(4, 1);
    assert!(dynamics_eval(&net, &g, &[1.0], 0.0).is_err());
    let mut d = vec![1.0; g.num_edges()];
    d[0] = f64::NAN;
    assert!(dynamics_eval(&net, &g, &d, 0.0).is_err());
}

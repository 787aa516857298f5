mod common;

use common::*;
use confgen::diffcore::{read_checkpoint, write_checkpoint, Tensor};
use confgen::dynamics::{dynamics_eval, jacobian_trace, DynamicsConfig, TraceMode};
use confgen::flow::*;
use confgen::synth::{synthesize, ToySpec};
use confgen::Element;
use nalgebra::DMatrix;

fn linear(a: &[f64], m: usize) -> LinearField {
    LinearField { a: Tensor::matrix(m, m, a.to_vec()).unwrap() }
}

fn settings(steps: usize) -> FlowSettings {
    FlowSettings { steps, ..FlowSettings::default() }
}

const A3: [f64; 9] = [0.3, -0.8, 0.1, 0.5, -0.2, 0.4, -0.3, 0.6, 0.1];

#[test]
fn linear_drift_matches_matrix_exponential() {
    let g = expanded_path(&[Element::C, Element::C, Element::O]);
    let f = linear(&A3, 3);
    let z = [0.7, -1.1, 0.4];
    let (d, logdet) = forward_with(&f, &settings(32), &g, &z).unwrap();
    let e = DMatrix::from_row_slice(3, 3, &A3).exp();
    let expected = e * nalgebra::DVector::from_row_slice(&z);
    assert!(max_abs_diff(&d, expected.as_slice()) < 1e-9);
    let trace = A3[0] + A3[4] + A3[8];
    assert!((logdet + trace).abs() < 1e-12);
    let lp = log_density_with(&f, &settings(32), &g, &d).unwrap();
    assert!((lp - (standard_normal_log_pdf(&z) - trace)).abs() < 1e-8);
}

#[test]
fn rk4_error_shrinks_at_fourth_order() {
    let g = expanded_path(&[Element::C, Element::C, Element::O]);
    let a: Vec<f64> = A3.iter().map(|x| 3.0 * x).collect();
    let f = linear(&a, 3);
    let z = [1.0, 0.5, -0.7];
    let exact = DMatrix::from_row_slice(3, 3, &a).exp() * nalgebra::DVector::from_row_slice(&z);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for steps in [2usize, 4, 8, 16] {
        let (d, _) = forward_with(&f, &settings(steps), &g, &z).unwrap();
        xs.push((steps as f64).ln());
        ys.push(max_abs_diff(&d, exact.as_slice()).ln());
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 4.0).abs() < 0.7, "slope {slope}");
}

#[test]
fn network_flow_round_trips_and_log_densities_agree() {
    for seed in 0..5u64 {
        let g = random_tree(3 + seed as usize, seed);
        let m = FlowModel::new(DynamicsConfig::desk(), settings(32), seed).unwrap();
        let z = latent(&g, seed, 0);
        let (d, logdet) = flow_forward(&m, &g, &z).unwrap();
        let (z2, delta) = flow_inverse(&m, &g, &d).unwrap();
        assert!(max_abs_diff(&z, &z2) < 1e-5);
        assert!((logdet - delta).abs() < 1e-6, "{logdet} vs {delta}");
        let lp = log_density(&m, &g, &d).unwrap();
        assert!((lp - (standard_normal_log_pdf(&z) + logdet)).abs() < 1e-5);
    }
}

#[test]
fn batched_nll_equals_mean_of_single_log_densities() {
    let m = FlowModel::new(DynamicsConfig::desk(), settings(8), 4).unwrap();
    let gs: Vec<_> = (0..4).map(|i| random_tree(3 + i, 10 + i as u64)).collect();
    let ds: Vec<Vec<f64>> = gs.iter().enumerate().map(|(i, g)| latent(g, 99, i).iter().map(|x| 1.4 + 0.2 * x).collect()).collect();
    let pairs: Vec<DistancePair<'_>> = gs.iter().zip(&ds).map(|(g, d)| (g, d.as_slice())).collect();
    let batched = nll_loss(&m, &pairs).unwrap();
    let single = -pairs.iter().map(|(g, d)| log_density(&m, g, d).unwrap()).sum::<f64>() / pairs.len() as f64;
    assert!((batched - single).abs() < 1e-10, "{batched} vs {single}");
    let pushed = push_latents(&m, &gs.iter().enumerate().map(|(i, g)| (g, latent(g, 5, i))).collect::<Vec<_>>()).unwrap();
    for (i, g) in gs.iter().enumerate() {
        let (d, _) = flow_forward(&m, g, &latent(g, 5, i)).unwrap();
        assert!(max_abs_diff(&d, &pushed[i]) < 1e-12);
    }
}

#[test]
fn zero_drift_samples_pass_a_normality_test() {
    let mut m = FlowModel::new(DynamicsConfig::desk(), settings(4), 2).unwrap();
    m.net.zero_output_head();
    let g = expanded_path(&[Element::C, Element::N, Element::C, Element::O]);
    let mut xs: Vec<f64> = sample_distances(&m, &g, 400, 17).unwrap().into_iter().flatten().collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = normal_cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample statistic.
    assert!(ks < 1.63 / n.sqrt(), "KS {ks}");
}

#[test]
fn hutchinson_trace_converges_to_exact() {
    let g = random_tree(6, 3);
    let m = FlowModel::new(DynamicsConfig::desk(), settings(4), 6).unwrap();
    let d: Vec<f64> = latent(&g, 1, 0).iter().map(|x| 1.5 + 0.3 * x).collect();
    let exact = jacobian_trace(&m.net, &g, &d, 0.3, TraceMode::Exact, 0).unwrap();
    let k = g.num_edges();
    let h = 1e-6;
    let mut jac = vec![vec![0.0; k]; k];
    for j in 0..k {
        let (mut dp, mut dm) = (d.clone(), d.clone());
        dp[j] += h;
        dm[j] -= h;
        let (fp, fm) = (dynamics_eval(&m.net, &g, &dp, 0.3).unwrap(), dynamics_eval(&m.net, &g, &dm, 0.3).unwrap());
        for i in 0..k {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let var: f64 = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).map(|(i, j)| (jac[i][j] + jac[j][i]).powi(2)).sum();
    let probes = 4000;
    let est = jacobian_trace(&m.net, &g, &d, 0.3, TraceMode::Hutchinson { probes }, 8).unwrap();
    assert!((est - exact).abs() < 5.0 * (var / probes as f64).sqrt() + 1e-12, "{est} vs {exact}");
}

#[test]
fn hutchinson_nll_gradient_matches_finite_differences() {
    let s = FlowSettings { steps: 4, trace_mode: TraceMode::Hutchinson { probes: 2 }, ..FlowSettings::default() };
    let m = FlowModel::new(DynamicsConfig::desk(), s, 8).unwrap();
    let g = random_tree(4, 2);
    let d: Vec<f64> = latent(&g, 3, 0).iter().map(|x| 1.4 + 0.2 * x).collect();
    let pairs = [(&g, d.as_slice())];
    let (_, grads) = nll_loss_and_grad(&m, &pairs, 0).unwrap();
    let analytic: Vec<f64> = grads.into_iter().flat_map(Tensor::into_data).collect();
    let base = m.net.params.flatten();
    let mut probe = m.clone();
    for i in (0..base.len()).step_by(7) {
        let mut x = base.clone();
        x[i] += 1e-5;
        probe.net.params.set_flat(&x).unwrap();
        let fp = nll_loss(&probe, &pairs).unwrap();
        x[i] -= 2e-5;
        probe.net.params.set_flat(&x).unwrap();
        let fm = nll_loss(&probe, &pairs).unwrap();
        let num = (fp - fm) / 2e-5;
        let err = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
        assert!(err < 1e-4, "coordinate {i}: {} vs {num}", analytic[i]);
    }
}

fn toy_data() -> DistanceDataset {
    let recs = synthesize(&ToySpec { num_molecules: 6, conformers_per_molecule: 4, ..ToySpec::default() }).unwrap();
    DistanceDataset::from_records(&recs).unwrap()
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = toy_data();
    let s = FlowSettings { steps: 4, trace_mode: TraceMode::Hutchinson { probes: 1 }, ..FlowSettings::default() };
    let cfg = FlowTrainConfig { batch_size: 8, lr: 1e-3, max_steps: 5, seed: 11 };
    let run = || {
        let mut m = FlowModel::new(DynamicsConfig::desk(), s, 1).unwrap();
        let rep = train_flow(&mut m, &data, &cfg).unwrap();
        (m, rep)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.history.len(), 5);
    assert!(ra.diverged.is_none());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.ckpt");
    write_checkpoint(&path, "flow", serde_json::json!({"width": 16}), 1, &a.net.params).unwrap();
    let (manifest, params) = read_checkpoint(&path).unwrap();
    assert_eq!(manifest.step, 5);
    assert_eq!(params, a.net.params);
    let mut resumed = a.clone();
    resumed.net.params = params;
    train_flow(&mut resumed, &data, &FlowTrainConfig { max_steps: 0, ..cfg }).unwrap();
    assert_eq!(resumed, a);
}

#[test]
fn training_lowers_the_loss_on_toy_data() {
    let data = toy_data();
    let s = FlowSettings { steps: 4, trace_mode: TraceMode::Exact, ..FlowSettings::default() };
    let mut m = FlowModel::new(DynamicsConfig::desk(), s, 2).unwrap();
    let pairs: Vec<DistancePair<'_>> = (0..data.len()).map(|i| data.pair(i)).collect();
    let before = nll_loss(&m, &pairs).unwrap();
    train_flow(&mut m, &data, &FlowTrainConfig { batch_size: 8, lr: 3e-3, max_steps: 60, seed: 1 }).unwrap();
    let after = nll_loss(&m, &pairs).unwrap();
    assert!(after < before, "{before} -> {after}");
}

mod common;

use common::*;
use confgen::geometry::{random_rotation, rigid_transform, rmsd};
use confgen::metrics::*;
use confgen::{Conformation, Element};
use nalgebra::{Matrix4, Vector3};
use rand::Rng;

/// RMSD by the quaternion eigenvalue method, all atoms.
fn horn_rmsd(a: &Conformation, b: &Conformation) -> f64 {
    let n = a.num_atoms() as f64;
    let ca: Vector3<f64> = a.coords.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let cb: Vector3<f64> = b.coords.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let (mut s, mut ga, mut gb) = ([[0.0; 3]; 3], 0.0, 0.0);
    for (p, q) in a.coords.iter().zip(&b.coords) {
        let x = Vector3::from(*p) - ca;
        let y = Vector3::from(*q) - cb;
        ga += x.norm_squared();
        gb += y.norm_squared();
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += x[i] * y[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let k = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let lmax = k.symmetric_eigen().eigenvalues.max();
    ((ga + gb - 2.0 * lmax).max(0.0) / n).sqrt()
}

fn random_set(k: usize, n: usize, seed: u64) -> Vec<Conformation> {
    let base = random_conformation(n, 1.5, seed);
    let mut r = confgen::rng::stream(seed + 1);
    (0..k)
        .map(|_| {
            let scale = r.random_range(0.05..0.6);
            let noise = confgen::rng::normals(&mut r, 3 * n);
            Conformation::from_flat(&base.flat().iter().zip(&noise).map(|(x, e)| x + scale * e).collect::<Vec<_>>())
        })
        .collect()
}

struct Oracle {
    cov: f64,
    mat: f64,
    junk: f64,
}

fn oracle(g: &[Conformation], r: &[Conformation], mask: &[bool], delta: f64) -> Oracle {
    let mut covered = 0usize;
    let mut mat = 0.0;
    for b in r {
        let mut hit = false;
        let mut best = f64::INFINITY;
        for a in g {
            let x = rmsd(a, b, mask).unwrap();
            if x < delta {
                hit = true;
            }
            if x < best {
                best = x;
            }
        }
        covered += hit as usize;
        mat += best;
    }
    let mut junk = 0usize;
    for a in g {
        let mut far = true;
        for b in r {
            if rmsd(a, b, mask).unwrap() <= delta {
                far = false;
            }
        }
        junk += far as usize;
    }
    Oracle {
        cov: covered as f64 / r.len() as f64,
        mat: mat / r.len() as f64,
        junk: junk as f64 / g.len() as f64,
    }
}

fn oracle_diversity(g: &[Conformation], mask: &[bool]) -> (f64, f64) {
    let mut v = Vec::new();
    for i in 0..g.len() {
        for j in 0..g.len() {
            if i < j {
                v.push(rmsd(&g[i], &g[j], mask).unwrap());
            }
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

#[test]
fn kabsch_rmsd_agrees_with_quaternion_rmsd() {
    for seed in 0..50 {
        let a = random_conformation(3 + seed as usize % 8, 1.5, seed);
        let b = random_conformation(a.num_atoms(), 1.5, seed + 1000);
        let mask = vec![true; a.num_atoms()];
        assert!((rmsd(&a, &b, &mask).unwrap() - horn_rmsd(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn ensemble_metrics_match_double_loops() {
    let mut r = confgen::rng::stream(77);
    for inst in 0..50u64 {
        let n = r.random_range(3..9);
        let ng = r.random_range(1..=20);
        let nr = r.random_range(1..=20);
        let g = random_set(ng, n, 1000 + inst);
        let refs = random_set(nr, n, 1000 + inst + 500);
        let mut mask = vec![true; n];
        if n > 3 {
            mask[n - 1] = false;
        }
        let delta = r.random_range(0.2..1.5);
        let o = oracle(&g, &refs, &mask, delta);
        assert_eq!(cov(&g, &refs, &mask, delta).unwrap(), o.cov);
        assert_eq!(mat(&g, &refs, &mask).unwrap(), o.mat);
        assert_eq!(junk(&g, &refs, &mask, delta).unwrap(), o.junk);
        if ng >= 2 {
            assert_eq!(diversity(&g, &mask).unwrap(), oracle_diversity(&g, &mask));
        }
    }
}

#[test]
fn threshold_equal_to_an_rmsd_is_unmatched_and_not_junk() {
    let g = random_set(3, 5, 1);
    let refs = random_set(2, 5, 2);
    let mask = vec![true; 5];
    let m = rmsd_matrix(&g, &refs, &mask).unwrap();
    // Smallest entry for reference 0 becomes the threshold.
    let (gi, delta) = (0..3).map(|i| (i, m[i][0])).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let o = oracle(&g, &refs, &mask, delta);
    assert_eq!(cov(&g, &refs, &mask, delta).unwrap(), o.cov);
    assert_eq!(junk(&g, &refs, &mask, delta).unwrap(), o.junk);
    assert!(!(m[gi][0] < delta));
    assert!(m[gi].iter().any(|&x| !(x > delta)));

    let boundary = vec![vec![0.5, 0.7], vec![0.9, 0.5]];
    assert_eq!(cov_from_matrix(&boundary, 2, 0.5).unwrap(), 0.0);
    assert_eq!(junk_from_matrix(&boundary, 0.5).unwrap(), 0.0);
    assert_eq!(cov_from_matrix(&boundary, 2, 0.5 + 1e-12).unwrap(), 1.0);
    assert_eq!(junk_from_matrix(&boundary, 0.5 - 1e-12).unwrap(), 1.0);
}

#[test]
fn enlarging_the_generated_set_helps_coverage_and_matching() {
    for seed in 0..20 {
        let g = random_set(12, 5, seed);
        let refs = random_set(6, 5, seed + 100);
        let mask = vec![true; 5];
        let (small, big) = (&g[..5], &g[..]);
        assert!(cov(big, &refs, &mask, 0.8).unwrap() >= cov(small, &refs, &mask, 0.8).unwrap());
        assert!(mat(big, &refs, &mask).unwrap() <= mat(small, &refs, &mask).unwrap());
    }
}

#[test]
fn reference_against_itself_is_perfect() {
    let refs = random_set(6, 5, 3);
    let mask = vec![true; 5];
    assert_eq!(cov(&refs, &refs, &mask, 0.01).unwrap(), 1.0);
    assert!(mat(&refs, &refs, &mask).unwrap() < 1e-12);
    assert_eq!(junk(&refs, &refs, &mask, 0.01).unwrap(), 0.0);
}

#[test]
fn metrics_ignore_rigid_motion_of_every_conformer() {
    let mut r = confgen::rng::stream(4);
    let g = random_set(8, 6, 5);
    let refs = random_set(4, 6, 6);
    let mask = vec![true; 6];
    let mut moved = |s: &[Conformation]| -> Vec<Conformation> {
        s.iter()
            .map(|c| {
                let rot = random_rotation(&mut r);
                let t = Vector3::from_iterator(confgen::rng::normals(&mut r, 3));
                rigid_transform(c, &rot, &t)
            })
            .collect()
    };
    let (g2, r2) = (moved(&g), moved(&refs));
    assert!((mat(&g, &refs, &mask).unwrap() - mat(&g2, &r2, &mask).unwrap()).abs() < 1e-9);
    let (d1, s1) = diversity(&g, &mask).unwrap();
    let (d2, s2) = diversity(&g2, &mask).unwrap();
    assert!((d1 - d2).abs() < 1e-9 && (s1 - s2).abs() < 1e-9);
    let m1 = rmsd_matrix(&g, &refs, &mask).unwrap();
    let m2 = rmsd_matrix(&g2, &r2, &mask).unwrap();
    for (a, b) in m1.iter().flatten().zip(m2.iter().flatten()) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn oracle_mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &Vec<f64>, b: &Vec<f64>| (-a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * sigma * sigma)).exp();
    let mean = |s: &[Vec<f64>], t: &[Vec<f64>]| s.iter().map(|a| t.iter().map(|b| k(a, b)).sum::<f64>()).sum::<f64>() / (s.len() * t.len()) as f64;
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

#[test]
fn mmd_matches_double_loop_and_separates_shifted_sets() {
    let mut r = confgen::rng::stream(8);
    let draw = |r: &mut rand_chacha::ChaCha8Rng, n: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| confgen::rng::normals(r, 3).iter().map(|v| v + shift).collect()).collect()
    };
    let x = draw(&mut r, 30, 0.0);
    let y = draw(&mut r, 30, 0.0);
    let z = draw(&mut r, 30, 2.0);
    let cfg = MmdConfig { bandwidth: Bandwidth::Fixed(1.3), ..MmdConfig::default() };
    let (v, s) = mmd(&x, &z, &cfg).unwrap();
    assert_eq!(s, 1.3);
    assert!((v - oracle_mmd(&x, &z, 1.3)).abs() < 1e-12);
    let same = mmd(&x, &y, &MmdConfig::default()).unwrap().0;
    let far = mmd(&x, &z, &MmdConfig::default()).unwrap().0;
    assert!(same >= 0.0 && far > 5.0 * same, "{same} {far}");
    assert!(mmd(&x, &x, &MmdConfig::default()).unwrap().0.abs() < 1e-12);
    let u = MmdConfig { unbiased: true, ..MmdConfig::default() };
    assert!(mmd(&x, &y, &u).unwrap().0 < same);
}

#[test]
fn median_bandwidth_is_the_pooled_median() {
    let x = vec![vec![0.0], vec![1.0]];
    let y = vec![vec![3.0]];
    // Pairwise distances 1, 3, 2.
    assert_eq!(median_bandwidth(&x, &y), 2.0);
    assert_eq!(median_bandwidth(&[vec![1.0]], &[vec![1.0]]), 1.0);
}

#[test]
fn mmd_report_of_reference_against_itself_is_zero() {
    let g = expanded_path(&[Element::C, Element::N, Element::C, Element::O]);
    let refs = random_set(6, 4, 9);
    let rep = mmd_report(&refs, &refs, &g, &MmdConfig::default()).unwrap();
    assert!(rep.all.abs() < 1e-12);
    assert!(rep.single.mean.abs() < 1e-12);
    assert!(rep.per_edge.iter().all(|e| e.mmd.abs() < 1e-12));
    // N-containing edges are filtered out.
    assert!(rep.per_edge.iter().all(|e| e.u != 1 && e.v != 1));
}

#[test]
fn summary_reports_mean_and_median() {
    let s = summarize(&[3.0, 1.0, 2.0, 10.0]).unwrap();
    assert_eq!((s.mean, s.median), (4.0, 2.5));
    assert!(summarize(&[]).is_none());
}

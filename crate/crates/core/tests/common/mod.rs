#![allow(dead_code)]

use confgen::{expand_graph, BondType, Conformation, Edge, Element, MolecularGraph};

pub fn path(n: usize) -> MolecularGraph {
    let edges = (0..n - 1).map(|i| Edge { u: i, v: i + 1, bond: BondType::Single });
    MolecularGraph::new(vec![Element::C; n], edges).unwrap()
}

pub fn expanded_path(elems: &[Element]) -> MolecularGraph {
    let edges = (0..elems.len() - 1).map(|i| Edge { u: i, v: i + 1, bond: BondType::Single });
    expand_graph(&MolecularGraph::new(elems.to_vec(), edges).unwrap()).unwrap()
}

/// Random tree over `n` atoms with mixed elements, expanded.
pub fn random_tree(n: usize, seed: u64) -> MolecularGraph {
    use rand::Rng;
    let mut r = confgen::rng::stream(seed);
    let edges: Vec<Edge> = (1..n).map(|v| Edge { u: r.random_range(0..v), v, bond: BondType::Single }).collect();
    let pool = [Element::C, Element::N, Element::O, Element::H];
    let atoms = (0..n).map(|_| pool[r.random_range(0..pool.len())]).collect();
    expand_graph(&MolecularGraph::new(atoms, edges).unwrap()).unwrap()
}

/// Tree embedded in 3D with bond lengths in [1.0, 1.6) Å.
pub fn random_molecule(n: usize, seed: u64) -> (MolecularGraph, Conformation) {
    use rand::Rng;
    let mut r = confgen::rng::stream(seed);
    let mut edges = Vec::new();
    let mut pos = vec![[0.0f64; 3]];
    for a in 1..n {
        let p = r.random_range(0..a);
        edges.push(Edge { u: p, v: a, bond: BondType::Single });
        let v = confgen::rng::normals(&mut r, 3);
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let l = r.random_range(1.0..1.6);
        pos.push([pos[p][0] + l * v[0] / norm, pos[p][1] + l * v[1] / norm, pos[p][2] + l * v[2] / norm]);
    }
    let pool = [Element::C, Element::N, Element::O];
    let atoms = (0..n).map(|_| pool[r.random_range(0..pool.len())]).collect();
    let g = expand_graph(&MolecularGraph::new(atoms, edges).unwrap()).unwrap();
    (g, Conformation::new(pos).unwrap())
}

pub fn random_conformation(n: usize, scale: f64, seed: u64) -> Conformation {
    let mut r = confgen::rng::stream(seed);
    Conformation::from_flat(&confgen::rng::normals(&mut r, 3 * n).iter().map(|x| x * scale).collect::<Vec<_>>())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Standard normal CDF (Abramowitz–Stegun 7.1.26, |error| < 1.5e-7).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * z);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-z * z).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

/// Largest `|a − n| / max(|a|, |n|, 1e-6)`. The floor sits above the
/// round-off noise of central differences on O(1) losses.
pub fn grad_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .enumerate()
        .fold((0.0, 0), |(b, bi), (i, e)| if e > b { (e, i) } else { (b, bi) })
}

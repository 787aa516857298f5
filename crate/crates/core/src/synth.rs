//! Synthetic molecules with a bimodal conformer distribution.
//!
//! Every molecule has a designated bond: the one bond of its last atom, which
//! is always a leaf and the only oxygen, so the bond can be told apart from
//! the other chain end by its neighbourhood.
//! Conformer `i` stretches that bond by `i mod 2` times the mode gap, moving
//! only the last atom along the bond direction, so two noise-free conformers
//! differ by exactly the gap on the designated edge. Coordinates then get
//! Gaussian noise and a random rigid motion.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_rotation, rigid_transform};
use crate::molgraph::{BondType, Conformation, Edge, Element, MolecularGraph, MoleculeRecord};
use crate::rng;

const BOND_LENGTH: f64 = 1.5;
const ZIGZAG_ANGLE_DEG: f64 = 112.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Chain,
    RingTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub family: Family,
    pub num_molecules: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    pub mode_separation: f64,
    pub conformers_per_molecule: usize,
    /// Standard deviation of the per-coordinate Gaussian noise, Å.
    pub noise: f64,
    /// Probability that an atom away from the designated bond is nitrogen
    /// rather than carbon.
    pub hetero_fraction: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            family: Family::Chain,
            num_molecules: 200,
            atoms_min: 3,
            atoms_max: 6,
            mode_separation: 0.6,
            conformers_per_molecule: 8,
            noise: 0.03,
            hetero_fraction: 0.25,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.atoms_min < 3 || self.atoms_max > 12 || self.atoms_min > self.atoms_max {
            return Err(Error::Config(format!(
                "atom range [{}, {}] must lie within [3, 12]",
                self.atoms_min, self.atoms_max
            )));
        }
        if self.family == Family::RingTail && self.atoms_min < 4 {
            return Err(Error::Config("ring-tail molecules need at least 4 atoms".into()));
        }
        if !(self.mode_separation > 0.0) {
            return Err(Error::Config("mode_separation must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.hetero_fraction) {
            return Err(Error::Config("noise must be nonnegative and hetero_fraction in [0, 1]".into()));
        }
        if self.conformers_per_molecule == 0 {
            return Err(Error::Config("conformers_per_molecule must be at least 1".into()));
        }
        Ok(())
    }
}

/// The bond whose length carries the two modes.
pub fn mode_edge(g: &MolecularGraph) -> (usize, usize) {
    let last = g.num_atoms() - 1;
    g.real_edges()
        .find(|e| e.v == last)
        .map(|e| (e.u, e.v))
        .expect("the last atom is bonded")
}

fn bond(u: usize, v: usize) -> Edge {
    Edge {
        u,
        v,
        bond: BondType::Single,
    }
}

/// Planar zigzag with atom `n − 1` at the end.
fn chain_geometry(n: usize) -> Vec<Vector3<f64>> {
    let half = (ZIGZAG_ANGLE_DEG.to_radians() / 2.0).sin();
    let rise = (ZIGZAG_ANGLE_DEG.to_radians() / 2.0).cos();
    (0..n)
        .map(|i| Vector3::new(i as f64 * BOND_LENGTH * half, (i % 2) as f64 * BOND_LENGTH * rise, 0.0))
        .collect()
}

/// Regular ring of `r` atoms in the plane with a straight radial tail.
fn ring_tail_geometry(n: usize, r: usize) -> Vec<Vector3<f64>> {
    let radius = BOND_LENGTH / (2.0 * (std::f64::consts::PI / r as f64).sin());
    let mut p: Vec<Vector3<f64>> = (0..r)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / r as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
        })
        .collect();
    for k in 1..=n - r {
        p.push(Vector3::new(radius + k as f64 * BOND_LENGTH, 0.0, 0.0));
    }
    p
}

fn molecule(spec: &ToySpec, index: usize) -> Result<MoleculeRecord> {
    let mut r: ChaCha8Rng = rng::stream(rng::derive(spec.seed, &[index as u64]));
    let n = r.random_range(spec.atoms_min..=spec.atoms_max);
    let (edges, base, prefix) = match spec.family {
        Family::Chain => ((1..n).map(|i| bond(i - 1, i)).collect::<Vec<_>>(), chain_geometry(n), "chain"),
        Family::RingTail => {
            let ring = (n - 1).clamp(3, 6);
            let mut e: Vec<Edge> = (0..ring).map(|k| bond(k, (k + 1) % ring)).collect();
            e.push(bond(0, ring));
            e.extend((ring + 1..n).map(|i| bond(i - 1, i)));
            (e, ring_tail_geometry(n, ring), "ringtail")
        }
    };
    let atoms: Vec<Element> = (0..n)
        .map(|i| {
            if i == n - 1 {
                Element::O
            } else if i >= n - 2 || !r.random_bool(spec.hetero_fraction) {
                Element::C
            } else {
                Element::N
            }
        })
        .collect();
    let graph = MolecularGraph::new(atoms, edges)?;
    let (a, b) = mode_edge(&graph);
    let dir = (base[b] - base[a]).normalize();
    let mut confs = Vec::with_capacity(spec.conformers_per_molecule);
    for i in 0..spec.conformers_per_molecule {
        let mut p = base.clone();
        p[b] += dir * spec.mode_separation * (i % 2) as f64;
        let noisy: Vec<[f64; 3]> = p
            .iter()
            .map(|v| {
                let w = rng::normals(&mut r, 3);
                [v.x + spec.noise * w[0], v.y + spec.noise * w[1], v.z + spec.noise * w[2]]
            })
            .collect();
        let rot = random_rotation(&mut r);
        let t = Vector3::from_iterator(rng::normals(&mut r, 3));
        confs.push(rigid_transform(&Conformation::new(noisy)?, &rot, &t));
    }
    MoleculeRecord::new(format!("{prefix}_{index:04}"), graph, confs)
}

/// Deterministic toy dataset.
pub fn synthesize(spec: &ToySpec) -> Result<Vec<MoleculeRecord>> {
    spec.validate()?;
    (0..spec.num_molecules).map(|i| molecule(spec, i)).collect()
}

/// Splits records into (train, held-out) with every `stride`-th molecule
/// held out.
pub fn split_held_out(records: Vec<MoleculeRecord>, stride: usize) -> (Vec<MoleculeRecord>, Vec<MoleculeRecord>) {
    let stride = stride.max(2);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, r) in records.into_iter().enumerate() {
        if i % stride == stride - 1 {
            held.push(r);
        } else {
            train.push(r);
        }
    }
    (train, held)
}

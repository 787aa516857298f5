//! Distances from coordinates, coordinate assembly from distances, and
//! aligned RMSD.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{BondType, Conformation, MolecularGraph};
use crate::rng;

/// Per-edge Euclidean distances in canonical edge order.
pub fn pairwise_distances(r: &Conformation, g: &MolecularGraph) -> Result<Vec<f64>> {
    if r.num_atoms() != g.num_atoms() {
        return Err(Error::shape(
            "pairwise_distances",
            format!("{} coordinate rows for {} atoms", r.num_atoms(), g.num_atoms()),
        ));
    }
    Ok(g.edges().iter().map(|e| dist(&r.coords[e.u], &r.coords[e.v])).collect())
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssemblyConfig {
    pub alpha_real: f64,
    pub alpha_2hop: f64,
    pub alpha_3hop: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub init_scale: f64,
    pub distance_floor: f64,
    pub norm_epsilon: f64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            alpha_real: 1.0,
            alpha_2hop: 0.5,
            alpha_3hop: 0.25,
            steps: 200,
            step_size: 0.05,
            restarts: 3,
            init_scale: 1.0,
            distance_floor: 1e-3,
            norm_epsilon: 1e-12,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_real", self.alpha_real),
            ("alpha_2hop", self.alpha_2hop),
            ("alpha_3hop", self.alpha_3hop),
            ("step_size", self.step_size),
            ("init_scale", self.init_scale),
            ("distance_floor", self.distance_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("assembly.{name} must be positive, got {v}")));
            }
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config("assembly.steps and assembly.restarts must be at least 1".into()));
        }
        if !(self.norm_epsilon >= 0.0) {
            return Err(Error::Config("assembly.norm_epsilon must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn weight(&self, bond: BondType) -> f64 {
        match bond {
            BondType::Virtual2Hop => self.alpha_2hop,
            BondType::Virtual3Hop => self.alpha_3hop,
            _ => self.alpha_real,
        }
    }

    /// Copy of `d` with every entry raised to the distance floor.
    pub fn clamp(&self, d: &[f64]) -> Vec<f64> {
        d.iter().map(|&x| x.max(self.distance_floor)).collect()
    }
}

fn check_target(g: &MolecularGraph, d: &[f64]) -> Result<()> {
    if d.len() != g.num_edges() {
        return Err(Error::shape(
            "assembly",
            format!("{} target distances for {} edges", d.len(), g.num_edges()),
        ));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("target distances".into()));
    }
    Ok(())
}

/// `−Σ α_uv (‖r_u − r_v‖ − d_uv)²` over flat coordinates, with its gradient
/// accumulated into `grad` when given. Norms are `√(‖·‖² + ε)`.
pub(crate) fn objective_flat(x: &[f64], d: &[f64], g: &MolecularGraph, cfg: &AssemblyConfig, mut grad: Option<&mut [f64]>) -> f64 {
    let mut total = 0.0;
    for (e, &target) in g.edges().iter().zip(d) {
        let a = cfg.weight(e.bond);
        let (pu, pv) = (3 * e.u, 3 * e.v);
        let delta = [x[pu] - x[pv], x[pu + 1] - x[pv + 1], x[pu + 2] - x[pv + 2]];
        let norm = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2] + cfg.norm_epsilon).sqrt();
        let res = norm - target;
        total -= a * res * res;
        if let Some(gr) = grad.as_deref_mut() {
            let coef = -2.0 * a * res / norm;
            for k in 0..3 {
                gr[pu + k] += coef * delta[k];
                gr[pv + k] -= coef * delta[k];
            }
        }
    }
    total
}

/// Unnormalized `log p(R | d, G)`: the assembly objective. `d` is used as
/// given; callers clamp it first.
pub fn assembly_log_density_unnorm(r: &Conformation, d: &[f64], g: &MolecularGraph, cfg: &AssemblyConfig) -> Result<f64> {
    check_target(g, d)?;
    if r.num_atoms() != g.num_atoms() {
        return Err(Error::shape("assembly", format!("{} coordinate rows for {} atoms", r.num_atoms(), g.num_atoms())));
    }
    Ok(objective_flat(&r.flat(), d, g, cfg, None))
}

/// Objective and its gradient with respect to the coordinates.
pub fn assembly_gradient(r: &Conformation, d: &[f64], g: &MolecularGraph, cfg: &AssemblyConfig) -> Result<(f64, Vec<[f64; 3]>)> {
    check_target(g, d)?;
    if r.num_atoms() != g.num_atoms() {
        return Err(Error::shape("assembly", format!("{} coordinate rows for {} atoms", r.num_atoms(), g.num_atoms())));
    }
    let mut grad = vec![0.0; 3 * r.num_atoms()];
    let v = objective_flat(&r.flat(), d, g, cfg, Some(&mut grad));
    Ok((v, grad.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

/// Plain gradient ascent from `init`. Returns the final coordinates and the
/// objective before the first step and after every step.
pub fn gradient_ascent(init: &Conformation, d: &[f64], g: &MolecularGraph, cfg: &AssemblyConfig) -> Result<(Conformation, Vec<f64>)> {
    check_target(g, d)?;
    let mut x = init.flat();
    let mut grad = vec![0.0; x.len()];
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|v| *v = 0.0);
        trace.push(objective_flat(&x, d, g, cfg, Some(&mut grad)));
        for (xi, gi) in x.iter_mut().zip(&grad) {
            *xi += cfg.step_size * gi;
        }
    }
    trace.push(objective_flat(&x, d, g, cfg, None));
    Ok((Conformation::from_flat(&x), trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub conformation: Conformation,
    pub objective: f64,
    /// Index of the winning restart.
    pub restart: usize,
    /// Restarts dropped for non-finite state.
    pub discarded: usize,
}

/// Random initializations followed by gradient ascent; the restart with the
/// highest final objective wins, lowest index on ties.
pub fn assemble_detailed(d: &[f64], g: &MolecularGraph, cfg: &AssemblyConfig, seed: u64) -> Result<Assembly> {
    cfg.validate()?;
    check_target(g, d)?;
    let target = cfg.clamp(d);
    let n = g.num_atoms();
    let mut best: Option<Assembly> = None;
    let mut discarded = 0;
    for restart in 0..cfg.restarts {
        let mut r = rng::stream(rng::derive(seed, &[rng::tag::ASSEMBLY, restart as u64]));
        let init: Vec<f64> = rng::normals(&mut r, 3 * n).into_iter().map(|v| v * cfg.init_scale).collect();
        let (conf, trace) = gradient_ascent(&Conformation::from_flat(&init), &target, g, cfg)?;
        let obj = *trace.last().expect("trace is never empty");
        if !conf.is_finite() || !obj.is_finite() {
            discarded += 1;
            continue;
        }
        if best.as_ref().is_none_or(|b| obj > b.objective) {
            best = Some(Assembly {
                conformation: conf,
                objective: obj,
                restart,
                discarded: 0,
            });
        }
    }
    let mut best = best.ok_or_else(|| Error::NonFinite(format!("all {} assembly restarts diverged", cfg.restarts)))?;
    best.discarded = discarded;
    Ok(best)
}

/// Coordinates realizing the (clamped) distance vector as well as the
/// ascent finds.
pub fn assemble(d: &[f64], g: &MolecularGraph, cfg: &AssemblyConfig, seed: u64) -> Result<Conformation> {
    assemble_detailed(d, g, cfg, seed).map(|a| a.conformation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Proper rotation; `aligned_i = rotation · r_i + translation`.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub aligned: Conformation,
}

fn masked_centroid(r: &Conformation, mask: &[bool]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    let mut k = 0.0;
    for (p, _) in r.coords.iter().zip(mask).filter(|(_, &m)| m) {
        c += Vector3::from(*p);
        k += 1.0;
    }
    c / k
}

fn check_pair(r: &Conformation, r_ref: &Conformation, mask: &[bool]) -> Result<usize> {
    if r.num_atoms() != r_ref.num_atoms() || mask.len() != r.num_atoms() {
        return Err(Error::shape(
            "kabsch",
            format!("{} vs {} atoms with a mask of {}", r.num_atoms(), r_ref.num_atoms(), mask.len()),
        ));
    }
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        return Err(Error::invalid("alignment mask selects no atoms"));
    }
    Ok(k)
}

/// Rigid motion taking `r` onto `r_ref` with least masked RMSD. Reflections
/// are excluded.
pub fn kabsch_align(r: &Conformation, r_ref: &Conformation, mask: &[bool]) -> Result<Alignment> {
    check_pair(r, r_ref, mask)?;
    let ca = masked_centroid(r, mask);
    let cb = masked_centroid(r_ref, mask);
    let mut h = Matrix3::zeros();
    for ((p, q), _) in r.coords.iter().zip(&r_ref.coords).zip(mask).filter(|(_, &m)| m) {
        h += (Vector3::from(*p) - ca) * (Vector3::from(*q) - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let sign = if (v * u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = v * fix * u.transpose();
    let translation = cb - rotation * ca;
    let aligned = r
        .coords
        .iter()
        .map(|p| {
            let q = rotation * Vector3::from(*p) + translation;
            [q.x, q.y, q.z]
        })
        .collect();
    Ok(Alignment {
        rotation,
        translation,
        aligned: Conformation { coords: aligned },
    })
}

/// Masked RMSD after optimal proper alignment of `r` onto `r_ref`.
pub fn rmsd(r: &Conformation, r_ref: &Conformation, mask: &[bool]) -> Result<f64> {
    let k = check_pair(r, r_ref, mask)?;
    let al = kabsch_align(r, r_ref, mask)?;
    let ss: f64 = al
        .aligned
        .coords
        .iter()
        .zip(&r_ref.coords)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, q), _)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .sum();
    Ok((ss / k as f64).sqrt())
}

/// Applies `x ↦ rotation · x + translation` to every atom.
pub fn rigid_transform(r: &Conformation, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Conformation {
    Conformation {
        coords: r
            .coords
            .iter()
            .map(|p| {
                let q = rotation * Vector3::from(*p) + translation;
                [q.x, q.y, q.z]
            })
            .collect(),
    }
}

/// Uniformly random proper rotation.
pub fn random_rotation(rng: &mut impl rand::Rng) -> Matrix3<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *q.to_rotation_matrix().matrix()
}

/// One XYZ block: atom count, a comment line with the molecule id and
/// sample index, then one `symbol x y z` line per atom.
pub fn write_xyz(out: &mut impl Write, id: &str, index: usize, g: &MolecularGraph, r: &Conformation) -> Result<()> {
    if r.num_atoms() != g.num_atoms() {
        return Err(Error::shape("write_xyz", format!("{} rows for {} atoms", r.num_atoms(), g.num_atoms())));
    }
    writeln!(out, "{}", g.num_atoms())?;
    writeln!(out, "id={id} sample={index}")?;
    for (a, p) in g.atoms().iter().zip(&r.coords) {
        writeln!(out, "{} {:.10} {:.10} {:.10}", a.symbol(), p[0], p[1], p[2])?;
    }
    Ok(())
}

/// Parses the blocks written by [`write_xyz`] back into
/// `(id, sample index, symbols, conformation)`.
pub fn parse_xyz(text: &str) -> Result<Vec<(String, usize, Vec<String>, Conformation)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    let bad = |line: usize, msg: &str| Error::Parse {
        path: "<xyz>".into(),
        line: line + 1,
        field: "xyz".into(),
        message: msg.into(),
    };
    while let Some((ln, count)) = lines.next() {
        let n: usize = count.trim().parse().map_err(|_| bad(ln, "expected an atom count"))?;
        let (cl, comment) = lines.next().ok_or_else(|| bad(ln, "missing comment line"))?;
        let mut id = None;
        let mut index = None;
        for tok in comment.split_whitespace() {
            if let Some(v) = tok.strip_prefix("id=") {
                id = Some(v.to_string());
            } else if let Some(v) = tok.strip_prefix("sample=") {
                index = v.parse().ok();
            }
        }
        let (id, index) = id.zip(index).ok_or_else(|| bad(cl, "comment needs id= and sample="))?;
        let mut symbols = Vec::with_capacity(n);
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let (al, atom) = lines.next().ok_or_else(|| bad(ln, "truncated block"))?;
            let parts: Vec<&str> = atom.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad(al, "expected `symbol x y z`"));
            }
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = parts[k + 1].parse().map_err(|_| bad(al, "bad coordinate"))?;
            }
            symbols.push(parts[0].to_string());
            coords.push(p);
        }
        out.push((id, index, symbols, Conformation::new(coords)?));
    }
    Ok(out)
}

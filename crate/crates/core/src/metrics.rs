//! Ensemble metrics over conformer sets and MMD over distance marginals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pairwise_distances, rmsd};
use crate::molgraph::{BondType, Conformation, Element, MolecularGraph};

/// `rmsd(generated[i], reference[j])` for every pair, row-major by
/// generated index.
pub fn rmsd_matrix(generated: &[Conformation], reference: &[Conformation], mask: &[bool]) -> Result<Vec<Vec<f64>>> {
    generated
        .iter()
        .map(|g| reference.iter().map(|r| rmsd(g, r, mask)).collect())
        .collect()
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("threshold must be positive, got {delta}")));
    }
    Ok(())
}

/// Coverage from a precomputed matrix (`m[i][j]`: generated i, reference j).
pub fn cov_from_matrix(m: &[Vec<f64>], n_ref: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if n_ref == 0 {
        return Err(Error::invalid("coverage needs a nonempty reference set"));
    }
    let covered = (0..n_ref).filter(|&j| m.iter().any(|row| row[j] < delta)).count();
    Ok(covered as f64 / n_ref as f64)
}

pub fn mat_from_matrix(m: &[Vec<f64>], n_ref: usize) -> Result<f64> {
    if n_ref == 0 || m.is_empty() {
        return Err(Error::invalid("matching distance needs both sets nonempty"));
    }
    let total: f64 = (0..n_ref)
        .map(|j| m.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / n_ref as f64)
}

pub fn junk_from_matrix(m: &[Vec<f64>], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if m.is_empty() {
        return Err(Error::invalid("junk rate needs a nonempty generated set"));
    }
    let junk = m.iter().filter(|row| row.iter().all(|&x| x > delta)).count();
    Ok(junk as f64 / m.len() as f64)
}

/// Fraction of references with some generated conformer closer than `delta`.
pub fn cov(generated: &[Conformation], reference: &[Conformation], mask: &[bool], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    cov_from_matrix(&rmsd_matrix(generated, reference, mask)?, reference.len(), delta)
}

/// Mean over references of the distance to the nearest generated conformer.
pub fn mat(generated: &[Conformation], reference: &[Conformation], mask: &[bool]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("matching distance needs both sets nonempty"));
    }
    mat_from_matrix(&rmsd_matrix(generated, reference, mask)?, reference.len())
}

/// Fraction of generated conformers farther than `delta` from every reference.
pub fn junk(generated: &[Conformation], reference: &[Conformation], mask: &[bool], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if generated.is_empty() {
        return Err(Error::invalid("junk rate needs a nonempty generated set"));
    }
    junk_from_matrix(&rmsd_matrix(generated, reference, mask)?, delta)
}

/// Mean and population standard deviation of RMSD over unordered pairs.
pub fn diversity(generated: &[Conformation], mask: &[bool]) -> Result<(f64, f64)> {
    if generated.len() < 2 {
        return Err(Error::invalid("diversity needs at least two samples"));
    }
    let mut vals = Vec::new();
    for i in 0..generated.len() {
        for j in i + 1..generated.len() {
            vals.push(rmsd(&generated[i], &generated[j], mask)?);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Bandwidth {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
    /// Edges count only when both endpoints have one of these elements.
    pub atom_filter: Vec<Element>,
    /// Use the unbiased U-statistic instead of the V-statistic.
    pub unbiased: bool,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth: Bandwidth::MedianHeuristic,
            atom_filter: vec![Element::C, Element::O],
            unbiased: false,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median of the pooled pairwise Euclidean distances; `1.0` when they are
/// all zero.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Squared MMD with a Gaussian kernel. Returns the estimate and the
/// bandwidth used.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &MmdConfig) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("MMD needs both sample sets nonempty"));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(Error::shape("mmd", "sample vectors have different dimensions"));
    }
    let sigma = match cfg.bandwidth {
        Bandwidth::MedianHeuristic => median_bandwidth(x, y),
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(Error::invalid(format!("fixed bandwidth must be positive, got {s}"))),
    };
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let within = |s: &[Vec<f64>]| -> Result<f64> {
        let n = s.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if cfg.unbiased && i == j {
                    continue;
                }
                total += k(&s[i], &s[j]);
            }
        }
        let pairs = if cfg.unbiased {
            if n < 2 {
                return Err(Error::invalid("unbiased MMD needs at least two samples per set"));
            }
            n * (n - 1)
        } else {
            n * n
        };
        Ok(total / pairs as f64)
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    cross /= (x.len() * y.len()) as f64;
    Ok((within(x)? + within(y)? - 2.0 * cross, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMmd {
    pub u: usize,
    pub v: usize,
    pub bond: String,
    pub mmd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median: if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub single: Summary,
    /// `None` when fewer than two edges pass the filter.
    pub pair: Option<Summary>,
    pub all: f64,
    pub pair_count: usize,
    pub per_edge: Vec<EdgeMmd>,
    pub bandwidth: String,
    pub unbiased: bool,
}

/// MMD over single-edge, edge-pair and full distance marginals of edges
/// whose endpoints both pass the atom filter. `g` must be expanded.
pub fn mmd_report(generated: &[Conformation], reference: &[Conformation], g: &MolecularGraph, cfg: &MmdConfig) -> Result<MmdReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("MMD report needs both sets nonempty"));
    }
    let keep: Vec<usize> = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| cfg.atom_filter.contains(&g.atoms()[e.u]) && cfg.atom_filter.contains(&g.atoms()[e.v]))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("no edge passes the MMD atom filter"));
    }
    let project = |set: &[Conformation]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|c| pairwise_distances(c, g).map(|d| keep.iter().map(|&i| d[i]).collect()))
            .collect()
    };
    let xg = project(generated)?;
    let xr = project(reference)?;
    let column = |s: &[Vec<f64>], idx: &[usize]| -> Vec<Vec<f64>> { s.iter().map(|v| idx.iter().map(|&i| v[i]).collect()).collect() };

    let mut per_edge = Vec::with_capacity(keep.len());
    let mut singles = Vec::with_capacity(keep.len());
    for (a, &ei) in keep.iter().enumerate() {
        let (v, _) = mmd(&column(&xg, &[a]), &column(&xr, &[a]), cfg)?;
        let e = g.edges()[ei];
        per_edge.push(EdgeMmd {
            u: e.u,
            v: e.v,
            bond: BondType::name(e.bond).to_string(),
            mmd: v,
        });
        singles.push(v);
    }
    let mut pairs = Vec::new();
    for a in 0..keep.len() {
        for b in a + 1..keep.len() {
            pairs.push(mmd(&column(&xg, &[a, b]), &column(&xr, &[a, b]), cfg)?.0);
        }
    }
    let (all, _) = mmd(&xg, &xr, cfg)?;
    Ok(MmdReport {
        single: summarize(&singles).expect("at least one edge"),
        pair_count: pairs.len(),
        pair: summarize(&pairs),
        all,
        per_edge,
        bandwidth: match cfg.bandwidth {
            Bandwidth::MedianHeuristic => "median_heuristic".into(),
            Bandwidth::Fixed(s) => format!("fixed({s})"),
        },
        unbiased: cfg.unbiased,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(p: &[[f64; 3]]) -> Conformation {
        Conformation::new(p.to_vec()).unwrap()
    }

    #[test]
    fn self_sets() {
        let a = c(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let b = c(&[[0.0; 3], [1.4, 0.0, 0.0], [0.0, 0.7, 0.2]]);
        let s = vec![a, b];
        let mask = [true; 3];
        assert_eq!(cov(&s, &s, &mask, 0.1).unwrap(), 1.0);
        assert!(mat(&s, &s, &mask).unwrap() < 1e-9);
        assert_eq!(junk(&s, &s, &mask, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn boundary_uses_strict_inequalities() {
        let m = vec![vec![0.5]];
        assert_eq!(cov_from_matrix(&m, 1, 0.5).unwrap(), 0.0);
        assert_eq!(junk_from_matrix(&m, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn diversity_of_two() {
        let a = c(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = c(&[[0.0; 3], [2.0, 0.0, 0.0]]);
        let (m, s) = diversity(&[a.clone(), b], &[true, true]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert_eq!(s, 0.0);
        assert!(diversity(&[a], &[true, true]).is_err());
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let x = vec![vec![1.0, 2.0], vec![0.5, 0.1], vec![3.0, -1.0]];
        let (v, _) = mmd(&x, &x, &MmdConfig::default()).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(mmd(&x, &[vec![1.0]], &MmdConfig::default()).is_err());
    }

    #[test]
    fn summary_median() {
        let s = summarize(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
    }
}

//! Two-stage conformation sampling.
//!
//! Stage one draws a distance vector from the flow and assembles
//! coordinates from it. Stage two runs Langevin dynamics on the tilted
//! energy `E_φ(R) − log mean_k exp(J(R, d_k))`, where `J` is the assembly
//! objective and the `d_k` are fresh flow draws at every step.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etm::{energy_gradient, EnergyModel};
use crate::flow::{latent, push_latents, sample_distances, FlowModel};
use crate::geometry::{assemble, objective_flat, AssemblyConfig};
use crate::molgraph::{Conformation, MolecularGraph};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub assembly: AssemblyConfig,
    pub langevin_steps: usize,
    pub langevin_step_size: f64,
    pub mc_samples: usize,
    /// Run the Langevin stage. Without an energy model the tilt is zero and
    /// only the flow-likelihood term drives the dynamics.
    pub use_etm: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            assembly: AssemblyConfig::default(),
            langevin_steps: 100,
            langevin_step_size: 1e-3,
            mc_samples: 8,
            use_etm: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.assembly.validate()?;
        if !(self.langevin_step_size > 0.0) || !self.langevin_step_size.is_finite() {
            return Err(Error::Config(format!(
                "sampler.langevin_step_size must be positive, got {}",
                self.langevin_step_size
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("sampler.mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    /// Raw flow output, before clamping.
    pub distances: Vec<f64>,
    pub conformation: Conformation,
}

/// Stage one for several (graph, seed) jobs; flow passes are batched.
pub fn stage_one_batch(flow: &FlowModel, jobs: &[(&MolecularGraph, u64)], assembly: &AssemblyConfig) -> Result<Vec<StageOne>> {
    let latents: Vec<(&MolecularGraph, Vec<f64>)> = jobs.iter().map(|&(g, s)| (g, latent(g, s, 0))).collect();
    let ds = push_latents(flow, &latents)?;
    jobs.iter()
        .zip(ds)
        .map(|(&(g, s), d)| {
            let conformation = assemble(&d, g, assembly, rng::derive(s, &[rng::tag::ASSEMBLY]))?;
            Ok(StageOne {
                distances: d,
                conformation,
            })
        })
        .collect()
}

pub fn stage_one(flow: &FlowModel, g: &MolecularGraph, assembly: &AssemblyConfig, seed: u64) -> Result<StageOne> {
    Ok(stage_one_batch(flow, &[(g, seed)], assembly)?.remove(0))
}

/// `K` flow draws clamped at the distance floor.
pub fn mc_distances(flow: &FlowModel, g: &MolecularGraph, k: usize, assembly: &AssemblyConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(sample_distances(flow, g, k, seed)?.iter().map(|d| assembly.clamp(d)).collect())
}

/// Tilted energy and its coordinate gradient for a fixed set of distance
/// draws. `etm = None` means a zero tilt.
pub fn tilted_energy_fixed(
    etm: Option<&EnergyModel>,
    g: &MolecularGraph,
    r: &Conformation,
    draws: &[Vec<f64>],
    assembly: &AssemblyConfig,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if draws.is_empty() {
        return Err(Error::invalid("tilted energy needs at least one distance draw"));
    }
    if r.num_atoms() != g.num_atoms() {
        return Err(Error::shape("tilted energy", format!("{} coordinate rows for {} atoms", r.num_atoms(), g.num_atoms())));
    }
    let x = r.flat();
    let mut values = Vec::with_capacity(draws.len());
    let mut grads = Vec::with_capacity(draws.len());
    for d in draws {
        if d.len() != g.num_edges() {
            return Err(Error::shape("tilted energy", format!("{} distances for {} edges", d.len(), g.num_edges())));
        }
        let mut gr = vec![0.0; x.len()];
        values.push(objective_flat(&x, d, g, assembly, Some(&mut gr)));
        grads.push(gr);
    }
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let lme = top + (z / draws.len() as f64).ln();
    let mut grad = vec![0.0; x.len()];
    for (w, gr) in weights.iter().zip(&grads) {
        for (o, gi) in grad.iter_mut().zip(gr) {
            *o -= w / z * gi;
        }
    }
    let mut value = -lme;
    if let Some(m) = etm {
        let (e, ge) = energy_gradient(m, g, r)?;
        value += e;
        for (o, gi) in grad.iter_mut().zip(ge.iter().flatten()) {
            *o += gi;
        }
    }
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tilted energy or its gradient".into()));
    }
    Ok((value, grad.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

/// Tilted energy with `K` fresh flow draws under `seed`.
pub fn tilted_energy(
    flow: &FlowModel,
    etm: Option<&EnergyModel>,
    g: &MolecularGraph,
    r: &Conformation,
    k: usize,
    assembly: &AssemblyConfig,
    seed: u64,
) -> Result<f64> {
    let draws = mc_distances(flow, g, k, assembly, rng::derive(seed, &[rng::tag::MC_DISTANCES]))?;
    Ok(tilted_energy_fixed(etm, g, r, &draws, assembly)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinRun {
    pub state: Vec<f64>,
    pub steps_done: usize,
    /// Why the run stopped early; the state is then the last finite iterate.
    pub aborted: Option<String>,
}

/// `x ← x − (ε/2) ∇E(x) + √ε ω` for `steps` iterations. `grad(n, x)` is the
/// energy gradient used at iteration `n`.
pub fn langevin_with(
    x0: &[f64],
    steps: usize,
    step_size: f64,
    seed: u64,
    mut grad: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<LangevinRun> {
    if !(step_size > 0.0) {
        return Err(Error::invalid("Langevin step size must be positive"));
    }
    let mut noise = rng::stream(rng::derive(seed, &[rng::tag::LANGEVIN]));
    let mut x = x0.to_vec();
    let scale = step_size.sqrt();
    for n in 0..steps {
        let gr = match grad(n, &x) {
            Ok(gr) => gr,
            Err(Error::NonFinite(why)) => {
                return Ok(LangevinRun {
                    state: x,
                    steps_done: n,
                    aborted: Some(why),
                })
            }
            Err(e) => return Err(e),
        };
        if gr.len() != x.len() {
            return Err(Error::shape("langevin", format!("gradient of {} for state of {}", gr.len(), x.len())));
        }
        let next: Vec<f64> = x
            .iter()
            .zip(&gr)
            .map(|(xi, gi)| {
                let w: f64 = StandardNormal.sample(&mut noise);
                xi - 0.5 * step_size * gi + scale * w
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(LangevinRun {
                state: x,
                steps_done: n,
                aborted: Some(format!("non-finite state at iteration {}", n + 1)),
            });
        }
        x = next;
    }
    Ok(LangevinRun {
        state: x,
        steps_done: steps,
        aborted: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub conformation: Conformation,
    pub aborted: Option<String>,
}

/// Langevin refinement on the tilted energy with fresh distance draws at
/// every iteration.
pub fn langevin_refine(
    flow: &FlowModel,
    etm: Option<&EnergyModel>,
    g: &MolecularGraph,
    r0: &Conformation,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Refinement> {
    cfg.validate()?;
    if r0.num_atoms() != g.num_atoms() || !r0.is_finite() {
        return Err(Error::invalid("initial conformation does not fit the graph or is not finite"));
    }
    let run = langevin_with(&r0.flat(), cfg.langevin_steps, cfg.langevin_step_size, seed, |n, x| {
        let draws = mc_distances(
            flow,
            g,
            cfg.mc_samples,
            &cfg.assembly,
            rng::derive(seed, &[rng::tag::MC_DISTANCES, n as u64]),
        )?;
        let (_, gr) = tilted_energy_fixed(etm, g, &Conformation::from_flat(x), &draws, &cfg.assembly)?;
        Ok(gr.into_iter().flatten().collect())
    })?;
    if let Some(why) = &run.aborted {
        log::warn!("Langevin refinement stopped early: {why}");
    }
    Ok(Refinement {
        conformation: Conformation::from_flat(&run.state),
        aborted: run.aborted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub conformation: Conformation,
    pub stage_one: StageOne,
    pub langevin_aborted: Option<String>,
}

fn finish(
    flow: &FlowModel,
    etm: Option<&EnergyModel>,
    g: &MolecularGraph,
    cfg: &SamplerConfig,
    seed: u64,
    s1: StageOne,
) -> Result<SampleRecord> {
    if !cfg.use_etm {
        return Ok(SampleRecord {
            conformation: s1.conformation.clone(),
            stage_one: s1,
            langevin_aborted: None,
        });
    }
    let refined = langevin_refine(flow, etm, g, &s1.conformation, cfg, rng::derive(seed, &[rng::tag::LANGEVIN]))?;
    Ok(SampleRecord {
        conformation: refined.conformation,
        stage_one: s1,
        langevin_aborted: refined.aborted,
    })
}

/// The full two-stage procedure for one sample. `g` must be expanded.
pub fn sample_conformation(
    flow: &FlowModel,
    etm: Option<&EnergyModel>,
    g: &MolecularGraph,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleRecord> {
    cfg.validate()?;
    let s1 = stage_one(flow, g, &cfg.assembly, seed)?;
    finish(flow, etm, g, cfg, seed, s1)
}

/// `sample_conformation` for each seed, with stage one batched. Results
/// equal the one-at-a-time calls.
pub fn sample_many(
    flow: &FlowModel,
    etm: Option<&EnergyModel>,
    g: &MolecularGraph,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let jobs: Vec<(&MolecularGraph, u64)> = seeds.iter().map(|&s| (g, s)).collect();
    let firsts = stage_one_batch(flow, &jobs, &cfg.assembly)?;
    seeds
        .iter()
        .zip(firsts)
        .map(|(&s, s1)| finish(flow, etm, g, cfg, s, s1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsConfig;
    use crate::flow::FlowSettings;
    use crate::molgraph::{expand_graph, BondType, Edge, Element};

    fn chain(n: usize) -> MolecularGraph {
        let edges = (0..n - 1).map(|i| Edge {
            u: i,
            v: i + 1,
            bond: BondType::Single,
        });
        expand_graph(&MolecularGraph::new(vec![Element::C; n], edges).unwrap()).unwrap()
    }

    fn flow() -> FlowModel {
        FlowModel::new(DynamicsConfig::desk(), FlowSettings { steps: 4, ..FlowSettings::default() }, 11).unwrap()
    }

    #[test]
    fn single_draw_without_tilt_is_negative_objective() {
        let g = chain(3);
        let r = Conformation::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [1.5, 0.8, 0.0]]).unwrap();
        let d = vec![1.2, 2.0, 0.9];
        let cfg = AssemblyConfig::default();
        let (e, _) = tilted_energy_fixed(None, &g, &r, std::slice::from_ref(&d), &cfg).unwrap();
        let j = crate::geometry::assembly_log_density_unnorm(&r, &d, &g, &cfg).unwrap();
        assert!((e + j).abs() < 1e-12);
    }

    #[test]
    fn zero_langevin_steps_keep_the_input() {
        let f = flow();
        let g = chain(3);
        let r0 = Conformation::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [1.5, 0.8, 0.0]]).unwrap();
        let cfg = SamplerConfig {
            langevin_steps: 0,
            ..SamplerConfig::default()
        };
        assert_eq!(langevin_refine(&f, None, &g, &r0, &cfg, 1).unwrap().conformation, r0);
    }

    #[test]
    fn stage_two_off_reproduces_stage_one() {
        let f = flow();
        let g = chain(4);
        let cfg = SamplerConfig {
            use_etm: false,
            ..SamplerConfig::default()
        };
        let s = sample_conformation(&f, None, &g, &cfg, 7).unwrap();
        let d = crate::flow::sample_distances(&f, &g, 1, 7).unwrap().remove(0);
        let direct = assemble(&d, &g, &cfg.assembly, rng::derive(7, &[rng::tag::ASSEMBLY])).unwrap();
        assert_eq!(s.conformation, direct);
        assert_eq!(s.stage_one.distances, d);
    }

    #[test]
    fn batched_sampling_matches_single() {
        let f = flow();
        let g = chain(4);
        let cfg = SamplerConfig {
            langevin_steps: 3,
            mc_samples: 2,
            ..SamplerConfig::default()
        };
        let many = sample_many(&f, None, &g, &cfg, &[3, 4, 5]).unwrap();
        for (s, rec) in [3u64, 4, 5].iter().zip(&many) {
            assert_eq!(&sample_conformation(&f, None, &g, &cfg, *s).unwrap(), rec);
        }
    }

    #[test]
    fn constant_energy_gives_random_walk_increments() {
        let run = langevin_with(&[0.0; 2000], 1, 0.04, 3, |_, x| Ok(vec![0.0; x.len()])).unwrap();
        let var = run.state.iter().map(|v| v * v).sum::<f64>() / run.state.len() as f64;
        assert!((var - 0.04).abs() < 0.006, "{var}");
    }
}

//! Invariant energy network over coordinates and its noise-contrastive
//! training against the flow.
//!
//! Atoms start from an element embedding. Each interaction layer adds, for
//! every atom, the features of all other atoms multiplied channel-wise by a
//! filter generated from the RBF-expanded pair distance. The features are
//! sum-pooled and mapped to one real by a small readout network.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Axis, BoundParams, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{BatchSampler, Divergence, FlowModel, TrainReport};
use crate::geometry::AssemblyConfig;
use crate::molgraph::{expand_graph, Conformation, Element, GraphBatch, MolecularGraph, MoleculeRecord};
use crate::rng;
use crate::sampler::stage_one_batch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtmConfig {
    pub width: usize,
    pub layers: usize,
    pub rbf_count: usize,
    pub rbf_max: f64,
    /// Gaussian width of the radial basis, `exp(−γ (r − μ_k)²)`.
    pub rbf_gamma: f64,
}

impl Default for EtmConfig {
    fn default() -> Self {
        EtmConfig {
            width: 128,
            layers: 6,
            rbf_count: 64,
            rbf_max: 10.0,
            rbf_gamma: 10.0,
        }
    }
}

impl EtmConfig {
    /// Small configuration used by tests and toy runs.
    pub fn desk() -> Self {
        EtmConfig {
            width: 16,
            layers: 3,
            rbf_count: 24,
            rbf_max: 6.0,
            rbf_gamma: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 {
            return Err(Error::invalid("energy network needs width ≥ 1 and layers ≥ 1"));
        }
        if self.rbf_count < 2 || !(self.rbf_max > 0.0) || !(self.rbf_gamma > 0.0) {
            return Err(Error::invalid("radial basis needs ≥ 2 centers, a positive range and a positive width"));
        }
        Ok(())
    }

    /// Equally spaced centers on `[0, rbf_max]`.
    pub fn rbf_centers(&self) -> Vec<f64> {
        let step = self.rbf_max / (self.rbf_count - 1) as f64;
        (0..self.rbf_count).map(|k| k as f64 * step).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub config: EtmConfig,
    pub params: ParameterStore,
}

impl EnergyModel {
    pub fn new(config: EtmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (w, k) = (config.width, config.rbf_count);
        let mut r = rng::stream(rng::derive(seed, &[rng::tag::INIT]));
        let mut p = ParameterStore::new();
        p.insert_uniform("embed", Element::COUNT, w, 1, &mut r)?;
        for l in 0..config.layers {
            p.insert_uniform(format!("filter{l}.w1"), k, w, k, &mut r)?;
            p.insert_uniform(format!("filter{l}.b1"), 1, w, k, &mut r)?;
            p.insert_uniform(format!("filter{l}.w2"), w, w, w, &mut r)?;
            p.insert_uniform(format!("filter{l}.b2"), 1, w, w, &mut r)?;
        }
        p.insert_uniform("readout.w1", w, w, w, &mut r)?;
        p.insert_uniform("readout.b1", 1, w, w, &mut r)?;
        p.insert_uniform("readout.w2", w, 1, w, &mut r)?;
        p.insert_uniform("readout.b2", 1, 1, w, &mut r)?;
        Ok(EnergyModel { config, params: p })
    }

    pub fn from_params(config: EtmConfig, params: ParameterStore) -> Result<Self> {
        let reference = EnergyModel::new(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} energy parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for e in reference.params.entries() {
            match params.get(&e.name) {
                Some(t) if t.dims() == e.value.dims() => {}
                _ => return Err(Error::invalid(format!("energy parameter `{}` missing or misshapen", e.name))),
            }
        }
        Ok(EnergyModel { config, params })
    }

    /// Zeroes every filter so the energy no longer depends on coordinates.
    pub fn zero_filters(&mut self) {
        for l in 0..self.config.layers {
            for s in ["w2", "b2"] {
                if let Some(t) = self.params.get_mut(&format!("filter{l}.{s}")) {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }

    /// Zeroes the readout output so the energy is identically zero.
    pub fn zero_readout(&mut self) {
        for name in ["readout.w2", "readout.b2"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Index structure for a batch of molecules with all intra-molecular pairs.
pub(crate) struct PairBatch {
    atoms: Arc<[usize]>,
    atom_component: Arc<[usize]>,
    first: Arc<[usize]>,
    second: Arc<[usize]>,
    /// `[second; first]` and `[first; second]`: message source and target.
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    num_atoms: usize,
    components: usize,
}

impl PairBatch {
    pub(crate) fn new(graphs: &[&MolecularGraph]) -> Self {
        let gb = GraphBatch::new(graphs);
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut offset = 0;
        for &n in gb.component_atom_counts() {
            for a in 0..n {
                for b in a + 1..n {
                    first.push(offset + a);
                    second.push(offset + b);
                }
            }
            offset += n;
        }
        let src: Vec<usize> = second.iter().chain(&first).copied().collect();
        let dst: Vec<usize> = first.iter().chain(&second).copied().collect();
        PairBatch {
            atoms: gb.atom_codes.clone().into(),
            atom_component: gb.atom_component.clone().into(),
            first: first.into(),
            second: second.into(),
            src: src.into(),
            dst: dst.into(),
            num_atoms: gb.num_atoms(),
            components: gb.num_components(),
        }
    }
}

/// Per-molecule energies `[C, 1]` for coordinates `coords` `[N, 3]`.
pub(crate) fn energy_on_tape<'t>(
    m: &EnergyModel,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    batch: &PairBatch,
    coords: Var<'t>,
) -> Result<Var<'t>> {
    if coords.dims() != (batch.num_atoms, 3) {
        return Err(Error::shape("energy", format!("coordinates {:?} for {} atoms", coords.shape(), batch.num_atoms)));
    }
    let mut x = p.var("embed")?.gather_rows(&batch.atoms)?;
    let npairs = batch.first.len();
    if npairs > 0 {
        let k = m.config.rbf_count;
        let delta = coords.gather_rows(&batch.first)?.sub(coords.gather_rows(&batch.second)?)?;
        let dist = delta.square().sum_axis(Axis::Cols).sqrt();
        let centers = tape.constant(Tensor::row(m.config.rbf_centers()));
        let rbf = dist
            .broadcast(npairs, k)?
            .sub(centers.broadcast(npairs, k)?)?
            .square()
            .scale(-m.config.rbf_gamma)
            .exp();
        for l in 0..m.config.layers {
            let hidden = rbf
                .matmul(p.var(&format!("filter{l}.w1"))?)?
                .add_broadcast(p.var(&format!("filter{l}.b1"))?)?
                .softplus();
            let filt = hidden
                .matmul(p.var(&format!("filter{l}.w2"))?)?
                .add_broadcast(p.var(&format!("filter{l}.b2"))?)?
                .tile_rows(2);
            let msg = x.gather_rows(&batch.src)?.mul(filt)?;
            x = x.add(msg.scatter_add_rows(&batch.dst, batch.num_atoms)?)?;
        }
    }
    let pooled = x.scatter_add_rows(&batch.atom_component, batch.components)?;
    pooled
        .matmul(p.var("readout.w1")?)?
        .add_broadcast(p.var("readout.b1")?)?
        .softplus()
        .matmul(p.var("readout.w2")?)?
        .add_broadcast(p.var("readout.b2")?)
}

fn check_items(items: &[(&MolecularGraph, &Conformation)]) -> Result<Vec<f64>> {
    let mut flat = Vec::new();
    for (g, r) in items {
        if r.num_atoms() != g.num_atoms() {
            return Err(Error::shape("energy", format!("{} coordinate rows for {} atoms", r.num_atoms(), g.num_atoms())));
        }
        flat.extend(r.flat());
    }
    Ok(flat)
}

/// Energies of several (graph, conformation) pairs in one pass.
pub fn energies(m: &EnergyModel, items: &[(&MolecularGraph, &Conformation)]) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let flat = check_items(items)?;
    let graphs: Vec<&MolecularGraph> = items.iter().map(|i| i.0).collect();
    let batch = PairBatch::new(&graphs);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let coords = tape.constant(Tensor::matrix(batch.num_atoms, 3, flat)?);
    Ok(energy_on_tape(m, &tape, &p, &batch, coords)?.value().into_data())
}

/// `E(R, G)`.
pub fn energy(m: &EnergyModel, g: &MolecularGraph, r: &Conformation) -> Result<f64> {
    Ok(energies(m, &[(g, r)])?[0])
}

/// `E(R, G)` and `∇_R E`.
pub fn energy_gradient(m: &EnergyModel, g: &MolecularGraph, r: &Conformation) -> Result<(f64, Vec<[f64; 3]>)> {
    let flat = check_items(&[(g, r)])?;
    let batch = PairBatch::new(&[g]);
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let coords = tape.var(Tensor::matrix(batch.num_atoms, 3, flat)?);
    let e = energy_on_tape(m, &tape, &p, &batch, coords)?;
    let grads = tape.backward(e)?;
    let gr = grads.wrt(coords);
    Ok((e.item(), gr.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

/// `mean softplus(E_data) + mean softplus(−E_noise)` on `tape`.
pub(crate) fn nce_on_tape<'t>(
    m: &EnergyModel,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    data: &[(&MolecularGraph, &Conformation)],
    noise: &[(&MolecularGraph, &Conformation)],
) -> Result<Var<'t>> {
    if data.is_empty() || noise.is_empty() {
        return Err(Error::invalid("noise-contrastive loss needs nonempty data and noise sets"));
    }
    let term = |items: &[(&MolecularGraph, &Conformation)], sign: f64| -> Result<Var<'t>> {
        let flat = check_items(items)?;
        let graphs: Vec<&MolecularGraph> = items.iter().map(|i| i.0).collect();
        let batch = PairBatch::new(&graphs);
        let coords = tape.constant(Tensor::matrix(batch.num_atoms, 3, flat)?);
        let e = energy_on_tape(m, tape, p, &batch, coords)?;
        Ok(e.scale(sign).softplus().sum().scale(1.0 / items.len() as f64))
    };
    let a = term(data, 1.0)?;
    let b = term(noise, -1.0)?;
    a.add(b)
}

/// The noise-contrastive loss: data labelled by low energy, noise by high.
pub fn nce_loss(m: &EnergyModel, data: &[(&MolecularGraph, &Conformation)], noise: &[(&MolecularGraph, &Conformation)]) -> Result<f64> {
    let tape = Tape::new();
    let p = m.params.bind_frozen(&tape);
    let v = nce_on_tape(m, &tape, &p, data, noise)?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("nce loss {v}")));
    }
    Ok(v)
}

pub fn nce_loss_and_grad(
    m: &EnergyModel,
    data: &[(&MolecularGraph, &Conformation)],
    noise: &[(&MolecularGraph, &Conformation)],
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = m.params.bind(&tape);
    let loss = nce_on_tape(m, &tape, &p, data, noise)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), p.collect(&grads)))
}

/// Probability that a random noise sample gets a higher energy than a
/// random data sample; ties count one half.
pub fn discrimination_auc(data_energies: &[f64], noise_energies: &[f64]) -> Result<f64> {
    if data_energies.is_empty() || noise_energies.is_empty() {
        return Err(Error::invalid("AUC needs both score sets nonempty"));
    }
    let mut wins = 0.0;
    for &d in data_energies {
        for &n in noise_energies {
            if n > d {
                wins += 1.0;
            } else if n == d {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (data_energies.len() * noise_energies.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtmTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Flow samples drawn per data conformation in every batch.
    pub noise_per_data: usize,
    pub seed: u64,
}

impl Default for EtmTrainConfig {
    fn default() -> Self {
        EtmTrainConfig {
            batch_size: 384,
            lr: 1e-3,
            max_steps: 1000,
            noise_per_data: 1,
            seed: 0,
        }
    }
}

/// Conformations in canonical order (molecule id, conformation index), with
/// expanded graphs for drawing flow noise.
pub struct ConformationDataset {
    pub graphs: Vec<MolecularGraph>,
    pub items: Vec<(usize, Conformation)>,
}

impl ConformationDataset {
    pub fn from_records(records: &[MoleculeRecord]) -> Result<Self> {
        let mut order: Vec<&MoleculeRecord> = records.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let mut graphs = Vec::with_capacity(order.len());
        let mut items = Vec::new();
        for r in order {
            for c in &r.conformations {
                items.push((graphs.len(), c.clone()));
            }
            graphs.push(expand_graph(&r.graph)?);
        }
        Ok(ConformationDataset { graphs, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Noise seed for flow sample `j` of training step `step`.
pub fn noise_seed(seed: u64, step: usize, j: usize) -> u64 {
    rng::derive(seed, &[rng::tag::NOISE, step as u64, j as u64])
}

/// Adam on the noise-contrastive loss with fresh flow noise every step. The
/// flow is only read.
pub fn train_etm_with(
    m: &mut EnergyModel,
    flow: &FlowModel,
    data: &ConformationDataset,
    assembly: &AssemblyConfig,
    cfg: &EtmTrainConfig,
    mut on_step: impl FnMut(usize, f64, &EnergyModel) -> Result<()>,
) -> Result<TrainReport> {
    let mut report = TrainReport {
        history: Vec::new(),
        diverged: None,
    };
    if cfg.max_steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::invalid("energy training needs a nonempty dataset"));
    }
    if cfg.batch_size == 0 || cfg.noise_per_data == 0 {
        return Err(Error::invalid("batch size and noise_per_data must be positive"));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    for step in 1..=cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let data_items: Vec<(&MolecularGraph, &Conformation)> =
            idx.iter().map(|&i| (&data.graphs[data.items[i].0], &data.items[i].1)).collect();
        let noise_jobs: Vec<(&MolecularGraph, u64)> = idx
            .iter()
            .flat_map(|&i| std::iter::repeat_n(&data.graphs[data.items[i].0], cfg.noise_per_data))
            .enumerate()
            .map(|(j, g)| (g, noise_seed(cfg.seed, step, j)))
            .collect();
        let noise = stage_one_batch(flow, &noise_jobs, assembly)?;
        let noise_items: Vec<(&MolecularGraph, &Conformation)> =
            noise_jobs.iter().zip(&noise).map(|((g, _), s)| (*g, &s.conformation)).collect();
        let outcome = nce_loss_and_grad(m, &data_items, &noise_items).and_then(|(loss, grads)| {
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss}")));
            }
            m.params.adam_step(&grads, &adam)?;
            Ok(loss)
        });
        match outcome {
            Ok(loss) => {
                report.history.push((step, loss));
                on_step(step, loss, m)?;
            }
            Err(Error::NonFinite(reason)) => {
                report.diverged = Some(Divergence { step, reason });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

pub fn train_etm(
    m: &mut EnergyModel,
    flow: &FlowModel,
    data: &ConformationDataset,
    assembly: &AssemblyConfig,
    cfg: &EtmTrainConfig,
) -> Result<TrainReport> {
    train_etm_with(m, flow, data, assembly, cfg, |_, _, _| Ok(()))
}

//! Conditional continuous normalizing flow over edge distances.
//!
//! `d = z + ∫_{t0}^{t1} f(d(t), t; G) dt` with `z ~ N(0, I)`, integrated by a
//! fixed-step scheme. The log-density follows the instantaneous change of
//! variables, `log p(d) = log N(z) − ∫ Tr(∂f/∂d) dt`, with the trace integral
//! accumulated on the same step grid as the state.

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, BoundParams, Tape, Tensor, Var};
use crate::dynamics::{DynamicsConfig, DynamicsNet, FieldEval, Probes, TraceMode, VectorField};
use crate::error::{Error, Result};
use crate::geometry::pairwise_distances;
use crate::molgraph::{expand_graph, GraphBatch, MolecularGraph, MoleculeRecord};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub scheme: Scheme,
    pub trace_mode: TraceMode,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            t0: 0.0,
            t1: 1.0,
            steps: 32,
            scheme: Scheme::Rk4,
            trace_mode: TraceMode::Exact,
        }
    }
}

impl FlowSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(Error::invalid(format!("need t1 > t0, got [{}, {}]", self.t0, self.t1)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("integrator needs at least one step"));
        }
        if let TraceMode::Hutchinson { probes: 0 } = self.trace_mode {
            return Err(Error::invalid("Hutchinson mode needs at least one probe"));
        }
        Ok(())
    }
}

/// Drift network plus integration settings; defines `p(d | G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub net: DynamicsNet,
    pub settings: FlowSettings,
}

impl FlowModel {
    pub fn new(config: DynamicsConfig, settings: FlowSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        Ok(FlowModel {
            net: DynamicsNet::new(config, seed)?,
            settings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

struct Integrated<'t> {
    end: Var<'t>,
    /// Per component, `Σ (h/6)(tr1 + 2 tr2 + 2 tr3 + tr4)` with signed `h`:
    /// `+∫ tr dt` forward, `−∫ tr dt` inverse.
    trace_sum: Option<Var<'t>>,
}

fn integrate<'t, F: VectorField>(
    field: &F,
    prep: &F::Prepared<'t>,
    tape: &'t Tape,
    start: Var<'t>,
    settings: &FlowSettings,
    direction: Direction,
) -> Result<Integrated<'t>> {
    settings.validate()?;
    let frozen = if field.freezes_edge_lengths() {
        if direction == Direction::Inverse {
            return Err(Error::Unsupported(
                "a drift with edges embedded at t0 cannot be integrated backwards".into(),
            ));
        }
        Some(start)
    } else {
        None
    };
    let span = settings.t1 - settings.t0;
    let (h, t_start) = match direction {
        Direction::Forward => (span / settings.steps as f64, settings.t0),
        Direction::Inverse => (-span / settings.steps as f64, settings.t1),
    };
    let eval = |x: Var<'t>, t: f64| -> Result<FieldEval<'t>> { field.eval(prep, x, tape.scalar(t), frozen) };
    let acc_trace = |acc: Option<Var<'t>>, tr: Option<Var<'t>>, w: f64| -> Result<Option<Var<'t>>> {
        Ok(match (acc, tr) {
            (a, None) => a,
            (None, Some(t)) => Some(t.scale(w)),
            (Some(a), Some(t)) => Some(a.add(t.scale(w))?),
        })
    };

    let mut x = start;
    let mut trace_sum: Option<Var<'t>> = None;
    for step in 0..settings.steps {
        let t = t_start + h * step as f64;
        match settings.scheme {
            Scheme::Euler => {
                let k1 = eval(x, t)?;
                x = x.add(k1.drift.scale(h))?;
                trace_sum = acc_trace(trace_sum, k1.trace, h)?;
            }
            Scheme::Rk4 => {
                let k1 = eval(x, t)?;
                let k2 = eval(x.add(k1.drift.scale(h / 2.0))?, t + h / 2.0)?;
                let k3 = eval(x.add(k2.drift.scale(h / 2.0))?, t + h / 2.0)?;
                let k4 = eval(x.add(k3.drift.scale(h))?, t + h)?;
                let incr = k1
                    .drift
                    .add(k2.drift.scale(2.0))?
                    .add(k3.drift.scale(2.0))?
                    .add(k4.drift)?
                    .scale(h / 6.0);
                x = x.add(incr)?;
                for (k, w) in [(k1, 1.0), (k2, 2.0), (k3, 2.0), (k4, 1.0)] {
                    trace_sum = acc_trace(trace_sum, k.trace, w * h / 6.0)?;
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("flow state after integration step {}", step + 1)));
        }
    }
    Ok(Integrated { end: x, trace_sum })
}

fn probes_for(settings: &FlowSettings, batch: &GraphBatch, seed: u64) -> Probes {
    match settings.trace_mode {
        TraceMode::Exact => Probes::exact(batch),
        TraceMode::Hutchinson { probes } => Probes::hutchinson(batch, probes, rng::derive(seed, &[rng::tag::PROBES])),
    }
}

fn check_vector(g: &MolecularGraph, x: &[f64], what: &str) -> Result<()> {
    if x.len() != g.num_edges() {
        return Err(Error::shape(
            "flow",
            format!("{what} has {} entries, graph has {} edges", x.len(), g.num_edges()),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn run_single<F: VectorField>(
    field: &F,
    settings: &FlowSettings,
    g: &MolecularGraph,
    start: &[f64],
    direction: Direction,
) -> Result<(Vec<f64>, f64)> {
    let batch = GraphBatch::new(&[g]);
    let probes = probes_for(settings, &batch, 0);
    let tape = Tape::new();
    let prep = field.prepare(&tape, &batch, Some(&probes), false)?;
    let x0 = tape.constant(Tensor::column(start.to_vec()));
    let out = integrate(field, &prep, &tape, x0, settings, direction)?;
    let acc = out.trace_sum.map_or(0.0, |v| v.item());
    let delta = match direction {
        Direction::Forward => -acc,
        Direction::Inverse => acc,
    };
    Ok((out.end.value().into_data(), delta))
}

/// Pushes a latent through the flow with an arbitrary vector field.
/// Returns `(d, logdet)` with `log p(d) = log N(z) + logdet`.
pub fn forward_with<F: VectorField>(field: &F, settings: &FlowSettings, g: &MolecularGraph, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_vector(g, z, "latent")?;
    run_single(field, settings, g, z, Direction::Forward)
}

/// Integrates `d` back to the latent. Returns `(z, delta)` with
/// `log p(d) = log N(z) + delta`.
pub fn inverse_with<F: VectorField>(field: &F, settings: &FlowSettings, g: &MolecularGraph, d: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_vector(g, d, "distance vector")?;
    run_single(field, settings, g, d, Direction::Inverse)
}

pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64) * LN_2PI - 0.5 * z.iter().map(|x| x * x).sum::<f64>()
}

pub fn log_density_with<F: VectorField>(field: &F, settings: &FlowSettings, g: &MolecularGraph, d: &[f64]) -> Result<f64> {
    let (z, delta) = inverse_with(field, settings, g, d)?;
    Ok(standard_normal_log_pdf(&z) + delta)
}

pub fn flow_forward(m: &FlowModel, g: &MolecularGraph, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    forward_with(&m.net, &m.settings, g, z)
}

pub fn flow_inverse(m: &FlowModel, g: &MolecularGraph, d: &[f64]) -> Result<(Vec<f64>, f64)> {
    inverse_with(&m.net, &m.settings, g, d)
}

/// `log p(d | G)`.
pub fn log_density(m: &FlowModel, g: &MolecularGraph, d: &[f64]) -> Result<f64> {
    log_density_with(&m.net, &m.settings, g, d)
}

/// Per-component `log p(d | G)` as a `[components, 1]` column; the graphs of
/// `batch` must line up with the concatenated `distances`.
pub fn log_prob_on_tape<'t, F: VectorField>(
    field: &F,
    prep: &F::Prepared<'t>,
    tape: &'t Tape,
    batch: &GraphBatch,
    distances: Vec<f64>,
    settings: &FlowSettings,
) -> Result<Var<'t>> {
    let c = batch.num_components();
    let d = tape.constant(Tensor::column(distances));
    let out = integrate(field, prep, tape, d, settings, Direction::Inverse)?;
    let comp: std::sync::Arc<[usize]> = batch.edge_component.clone().into();
    let sq = out.end.square().scatter_add_rows(&comp, c)?;
    let consts: Vec<f64> = batch
        .component_edge_counts()
        .iter()
        .map(|&m| -0.5 * m as f64 * LN_2PI)
        .collect();
    let mut logp = sq.scale(-0.5).add(tape.constant(Tensor::column(consts)))?;
    if let Some(tr) = out.trace_sum {
        logp = logp.add(tr)?;
    }
    Ok(logp)
}

/// Mean negative log-likelihood of a batch built on `tape`.
pub fn nll_on_tape<'t, F: VectorField>(
    field: &F,
    prep: &F::Prepared<'t>,
    tape: &'t Tape,
    batch: &GraphBatch,
    distances: Vec<f64>,
    settings: &FlowSettings,
) -> Result<Var<'t>> {
    let logp = log_prob_on_tape(field, prep, tape, batch, distances, settings)?;
    Ok(logp.sum().scale(-1.0 / batch.num_components() as f64))
}

/// Pairs of (expanded graph, distance vector).
pub type DistancePair<'a> = (&'a MolecularGraph, &'a [f64]);

fn batch_of(pairs: &[DistancePair<'_>]) -> Result<(GraphBatch, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut flat = Vec::new();
    for (g, d) in pairs {
        check_vector(g, d, "distance vector")?;
        flat.extend_from_slice(d);
    }
    let graphs: Vec<&MolecularGraph> = pairs.iter().map(|p| p.0).collect();
    Ok((GraphBatch::new(&graphs), flat))
}

/// Mean of `−log p(d | G)` over the pairs. Evaluated in chunks so large
/// evaluation sets stay within memory.
pub fn nll_loss(m: &FlowModel, pairs: &[DistancePair<'_>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let (batch, flat) = batch_of(chunk)?;
        let tape = Tape::new();
        let probes = probes_for(&m.settings, &batch, 0);
        let prep = m.net.prepare(&tape, &batch, Some(&probes), false)?;
        let loss = nll_on_tape(&m.net, &prep, &tape, &batch, flat, &m.settings)?;
        total += loss.item() * chunk.len() as f64;
    }
    let v = total / pairs.len() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("nll loss {v}")));
    }
    Ok(v)
}

/// `log p(d | G)` for each pair, evaluated in batched chunks.
pub fn log_densities(m: &FlowModel, pairs: &[DistancePair<'_>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let (batch, flat) = batch_of(chunk)?;
        let tape = Tape::new();
        let probes = probes_for(&m.settings, &batch, 0);
        let prep = m.net.prepare(&tape, &batch, Some(&probes), false)?;
        out.extend(log_prob_on_tape(&m.net, &prep, &tape, &batch, flat, &m.settings)?.value().into_data());
    }
    Ok(out)
}

/// Loss and parameter gradients (store order) for one batch.
pub fn nll_loss_and_grad(m: &FlowModel, pairs: &[DistancePair<'_>], probe_seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let (batch, flat) = batch_of(pairs)?;
    let tape = Tape::new();
    let probes = probes_for(&m.settings, &batch, probe_seed);
    let prep = m.net.prepare(&tape, &batch, Some(&probes), true)?;
    let loss = nll_on_tape(&m.net, &prep, &tape, &batch, flat, &m.settings)?;
    let grads = tape.backward(loss)?;
    let bound: &BoundParams<'_> = DynamicsNet::bound_params(&prep).expect("drift net has parameters");
    Ok((loss.item(), bound.collect(&grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            batch_size: 128,
            lr: 1e-3,
            max_steps: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(step, loss)` for every completed step, 1-based.
    pub history: Vec<(usize, f64)>,
    /// Set when training stopped on a non-finite loss or gradient; the model
    /// then holds the parameters from before the failing step.
    pub diverged: Option<Divergence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

/// Training pairs in canonical order: expanded graphs and distance vectors
/// for every conformation, sorted by molecule id then conformation index.
pub struct DistanceDataset {
    pub graphs: Vec<MolecularGraph>,
    /// `(graph index, distances)` per conformation.
    pub items: Vec<(usize, Vec<f64>)>,
}

impl DistanceDataset {
    pub fn from_records(records: &[MoleculeRecord]) -> Result<Self> {
        let mut order: Vec<&MoleculeRecord> = records.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let mut graphs = Vec::with_capacity(order.len());
        let mut items = Vec::new();
        for r in order {
            let g = expand_graph(&r.graph)?;
            for c in &r.conformations {
                items.push((graphs.len(), pairwise_distances(c, &g)?));
            }
            graphs.push(g);
        }
        Ok(DistanceDataset { graphs, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pair(&self, i: usize) -> DistancePair<'_> {
        let (g, d) = &self.items[i];
        (&self.graphs[*g], d.as_slice())
    }
}

/// Epoch-wise seeded shuffling; batches wrap across epochs.
pub(crate) struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(rng::derive(self.seed, &[rng::tag::BATCH, self.epoch]));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut r);
        self.pos = 0;
        self.epoch += 1;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Adam on the NLL. `on_step` runs after every completed step (for
/// checkpointing); returning an error aborts training.
pub fn train_flow_with(
    m: &mut FlowModel,
    data: &DistanceDataset,
    cfg: &FlowTrainConfig,
    mut on_step: impl FnMut(usize, f64, &FlowModel) -> Result<()>,
) -> Result<TrainReport> {
    let mut report = TrainReport {
        history: Vec::new(),
        diverged: None,
    };
    if cfg.max_steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::invalid("flow training needs a nonempty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    for step in 1..=cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let pairs: Vec<DistancePair<'_>> = idx.iter().map(|&i| data.pair(i)).collect();
        let probe_seed = rng::derive(cfg.seed, &[rng::tag::PROBES, step as u64]);
        let outcome = nll_loss_and_grad(m, &pairs, probe_seed).and_then(|(loss, grads)| {
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss}")));
            }
            m.net.params.adam_step(&grads, &adam)?;
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

pub fn train_flow(m: &mut FlowModel, data: &DistanceDataset, cfg: &FlowTrainConfig) -> Result<TrainReport> {
    train_flow_with(m, data, cfg, |_, _, _| Ok(()))
}

/// Largest number of graph copies integrated in one pass.
const EVAL_CHUNK: usize = 64;

/// Pushes the given latents through the flow without a trace. Each entry
/// pairs a graph with its latent; results come back in the same order.
pub fn push_latents(m: &FlowModel, items: &[(&MolecularGraph, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let graphs: Vec<&MolecularGraph> = chunk.iter().map(|c| c.0).collect();
        let batch = GraphBatch::new(&graphs);
        let flat: Vec<f64> = chunk.iter().flat_map(|c| c.1.iter().copied()).collect();
        let tape = Tape::new();
        let prep = m.net.prepare(&tape, &batch, None, false)?;
        let x0 = tape.constant(Tensor::column(flat));
        let end = integrate(&m.net, &prep, &tape, x0, &m.settings, Direction::Forward)?.end.value();
        out.extend(batch.split_edges(end.data()).into_iter().map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Integrates distance vectors back to their latents without a trace.
pub fn pull_distances(m: &FlowModel, items: &[DistancePair<'_>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let (batch, flat) = batch_of(chunk)?;
        let tape = Tape::new();
        let prep = m.net.prepare(&tape, &batch, None, false)?;
        let x0 = tape.constant(Tensor::column(flat));
        let end = integrate(&m.net, &prep, &tape, x0, &m.settings, Direction::Inverse)?.end.value();
        out.extend(batch.split_edges(end.data()).into_iter().map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// The latent used for draw `index` under `seed`.
pub fn latent(g: &MolecularGraph, seed: u64, index: usize) -> Vec<f64> {
    let mut r = rng::stream(rng::derive(seed, &[rng::tag::LATENT, index as u64]));
    rng::normals(&mut r, g.num_edges())
}

/// `n` i.i.d. draws from `p(d | G)`. Raw flow outputs; no clamping.
pub fn sample_distances(m: &FlowModel, g: &MolecularGraph, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let items: Vec<(&MolecularGraph, Vec<f64>)> = (0..n).map(|i| (g, latent(g, seed, i))).collect();
    push_latents(m, &items)
}

/// A fixed linear drift `d ↦ A d`, applied per component of a batch. Used
/// as an analytically solvable reference field.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: Tensor,
}

pub struct LinearPrepared<'t> {
    tape: &'t Tape,
    a_t: Var<'t>,
    m: usize,
    components: usize,
    probes: Option<(Probes, Var<'t>)>,
}

impl VectorField for LinearField {
    type Prepared<'t> = LinearPrepared<'t>;

    fn prepare<'t>(&self, tape: &'t Tape, batch: &GraphBatch, probes: Option<&Probes>, _trainable: bool) -> Result<LinearPrepared<'t>> {
        let (r, c) = self.a.dims();
        if r != c {
            return Err(Error::shape("linear field", format!("matrix is [{r}, {c}]")));
        }
        if batch.component_edge_counts().iter().any(|&m| m != r) {
            return Err(Error::shape("linear field", format!("every component needs {r} edges")));
        }
        Ok(LinearPrepared {
            tape,
            a_t: tape.constant(self.a.transpose()),
            m: r,
            components: batch.num_components(),
            probes: probes.map(|p| (p.clone(), p.seed_var(tape))),
        })
    }

    fn eval<'t>(&self, prep: &LinearPrepared<'t>, state: Var<'t>, _t: Var<'t>, _frozen: Option<Var<'t>>) -> Result<FieldEval<'t>> {
        let (m, c) = (prep.m, prep.components);
        let drift = state.reshape(c, m)?.matmul(prep.a_t)?.reshape(c * m, 1)?;
        let trace = match &prep.probes {
            Some((probes, seeds)) => {
                let k = probes.blocks();
                let tan = seeds.reshape(k * c, m)?.matmul(prep.a_t)?.reshape(k * c * m, 1)?;
                Some(probes.reduce(prep.tape, Some(tan), *seeds)?)
            }
            None => None,
        };
        Ok(FieldEval { drift, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{BondType, Edge, Element};

    fn path(n: usize) -> MolecularGraph {
        let edges = (0..n - 1).map(|i| Edge {
            u: i,
            v: i + 1,
            bond: BondType::Single,
        });
        MolecularGraph::new(vec![Element::C; n], edges).unwrap()
    }

    fn zero_flow() -> FlowModel {
        let mut f = FlowModel::new(DynamicsConfig::desk(), FlowSettings::default(), 1).unwrap();
        f.net.zero_output_head();
        f
    }

    #[test]
    fn zero_drift_is_identity() {
        let f = zero_flow();
        let g = path(3);
        let z = [0.3, -1.2];
        let (d, logdet) = flow_forward(&f, &g, &z).unwrap();
        assert_eq!(d, z.to_vec());
        assert_eq!(logdet, 0.0);
        let (z2, delta) = flow_inverse(&f, &g, &z).unwrap();
        assert_eq!(z2, z.to_vec());
        assert_eq!(delta, 0.0);
        let lp = log_density(&f, &g, &[0.0, 0.0]).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_drift_nll_is_prior_only() {
        let f = zero_flow();
        let g = path(3);
        let d1 = [1.0, 2.0];
        let d2 = [-0.5, 0.25];
        let loss = nll_loss(&f, &[(&g, &d1), (&g, &d2)]).unwrap();
        let expected = -(standard_normal_log_pdf(&d1) + standard_normal_log_pdf(&d2)) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn settings_validation() {
        let bad = FlowSettings {
            t0: 1.0,
            t1: 1.0,
            ..FlowSettings::default()
        };
        assert!(bad.validate().is_err());
        let bad = FlowSettings {
            steps: 0,
            ..FlowSettings::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frozen_edge_variant_cannot_invert() {
        let cfg = DynamicsConfig {
            edge_embed_at_t0: true,
            ..DynamicsConfig::desk()
        };
        let f = FlowModel::new(cfg, FlowSettings::default(), 2).unwrap();
        let g = path(3);
        assert!(flow_forward(&f, &g, &[0.1, 0.2]).is_ok());
        assert!(matches!(flow_inverse(&f, &g, &[0.1, 0.2]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_steps_training_is_a_no_op() {
        let mut f = FlowModel::new(DynamicsConfig::desk(), FlowSettings::default(), 3).unwrap();
        let before = f.clone();
        let data = DistanceDataset {
            graphs: vec![],
            items: vec![],
        };
        let cfg = FlowTrainConfig {
            max_steps: 0,
            ..FlowTrainConfig::default()
        };
        let rep = train_flow(&mut f, &data, &cfg).unwrap();
        assert!(rep.history.is_empty());
        assert_eq!(f, before);
    }

    #[test]
    fn batch_sampler_wraps_and_repeats() {
        let mut a = BatchSampler::new(5, 9);
        let mut b = BatchSampler::new(5, 9);
        let xa = a.next_batch(12);
        assert_eq!(xa, b.next_batch(12));
        let mut first: Vec<usize> = xa[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batched_helpers_match_single_graph_paths() {
        let f = FlowModel::new(DynamicsConfig::desk(), FlowSettings { steps: 8, ..FlowSettings::default() }, 4).unwrap();
        let (g3, g4) = (path(3), path(4));
        let d3 = vec![1.2, 1.4];
        let d4 = vec![1.1, 0.9, 1.5];
        let pairs: Vec<DistancePair<'_>> = vec![(&g3, &d3), (&g4, &d4)];
        let batched = log_densities(&f, &pairs).unwrap();
        let zs = pull_distances(&f, &pairs).unwrap();
        for (i, (g, d)) in pairs.iter().enumerate() {
            assert!((batched[i] - log_density(&f, g, d).unwrap()).abs() < 1e-12);
            let (z, _) = flow_inverse(&f, g, d).unwrap();
            assert!(z.iter().zip(&zs[i]).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}

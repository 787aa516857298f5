//! Message-passing drift network over edge distances.
//!
//! The network maps a distance vector `d(t)` (one entry per edge of an
//! expanded graph) and time `t` to `∂d/∂t`. Nodes are embedded from their
//! element, edges from their bond type and current length; `L` layers update
//! node states with `h_v ← MLP(h_v + Σ_u softplus(h_u + h_uv))`, and a head
//! reads `(h_u + h_v, h_uv, t)` per edge.
//!
//! Alongside the values, every layer carries a stack of tangent vectors
//! (forward-mode directional derivatives with respect to `d`). Probing with
//! coordinate directions gives the exact Jacobian trace as an ordinary tape
//! node, so its gradient with respect to the parameters comes out of the
//! same reverse sweep as everything else.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, BoundParams, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::molgraph::{BondType, Element, GraphBatch, MolecularGraph};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub width: usize,
    pub layers: usize,
    /// Embed edges from the lengths at the start of integration instead of
    /// the current state. The drift then no longer depends on the state and
    /// the flow cannot be inverted.
    pub edge_embed_at_t0: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            width: 128,
            layers: 3,
            edge_embed_at_t0: false,
        }
    }
}

impl DynamicsConfig {
    /// Small configuration used by tests and toy runs.
    pub fn desk() -> Self {
        DynamicsConfig {
            width: 16,
            layers: 2,
            edge_embed_at_t0: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TraceMode {
    /// One coordinate probe per edge; exact.
    Exact,
    /// Rademacher probes; unbiased estimate.
    Hutchinson { probes: usize },
}

/// Tangent directions pushed through a vector field to read off its
/// Jacobian trace, per component of a [`GraphBatch`].
#[derive(Debug, Clone)]
pub struct Probes {
    seeds: Tensor,
    comp_blk: Arc<[usize]>,
    blocks: usize,
    components: usize,
    norm: f64,
}

impl Probes {
    /// Coordinate probes. Components of a batch are independent, so probe
    /// `i` sets the `i`-th local edge of every component at once and the
    /// number of probes is the largest per-component edge count.
    pub fn exact(batch: &GraphBatch) -> Self {
        let m = batch.num_edges();
        let k = batch.max_component_edges();
        let mut seeds = vec![0.0; k * m];
        for (e, &local) in batch.edge_local.iter().enumerate() {
            seeds[local * m + e] = 1.0;
        }
        Probes::from_seeds(batch, seeds, k, 1.0)
    }

    /// `probes` Rademacher vectors drawn from `seed`.
    pub fn hutchinson(batch: &GraphBatch, probes: usize, seed: u64) -> Self {
        let m = batch.num_edges();
        let mut r = rng::stream(seed);
        let seeds = (0..probes * m)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Probes::from_seeds(batch, seeds, probes, probes as f64)
    }

    fn from_seeds(batch: &GraphBatch, seeds: Vec<f64>, blocks: usize, norm: f64) -> Self {
        let comp_blk: Vec<usize> = (0..blocks)
            .flat_map(|_| batch.edge_component.iter().copied())
            .collect();
        Probes {
            seeds: Tensor::column(seeds),
            comp_blk: comp_blk.into(),
            blocks,
            components: batch.num_components(),
            norm,
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// The stacked tangent of the state, `[blocks * m, 1]`.
    pub fn seed_var<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(self.seeds.clone())
    }

    /// Reduces the stacked output tangent to one trace per component.
    pub fn reduce<'t>(&self, tape: &'t Tape, tangent: Option<Var<'t>>, seeds: Var<'t>) -> Result<Var<'t>> {
        match tangent {
            None => Ok(tape.constant(Tensor::zeros(self.components, 1))),
            Some(t) => Ok(t
                .mul(seeds)?
                .scatter_add_rows(&self.comp_blk, self.components)?
                .scale(1.0 / self.norm)),
        }
    }
}

/// Drift output: `∂d/∂t` per edge and, when probes were supplied, the
/// (estimated) Jacobian trace per batch component.
pub struct FieldEval<'t> {
    pub drift: Var<'t>,
    pub trace: Option<Var<'t>>,
}

/// A time-dependent vector field over the edge distances of a graph batch.
pub trait VectorField {
    type Prepared<'t>;

    /// Binds parameters and per-batch constants to `tape`. Parameters are
    /// differentiable leaves only when `trainable` is set.
    fn prepare<'t>(
        &self,
        tape: &'t Tape,
        batch: &GraphBatch,
        probes: Option<&Probes>,
        trainable: bool,
    ) -> Result<Self::Prepared<'t>>;

    /// `frozen_lengths` replaces the state in the edge embedding when the
    /// field embeds edges at `t0`.
    fn eval<'t>(
        &self,
        prep: &Self::Prepared<'t>,
        state: Var<'t>,
        t: Var<'t>,
        frozen_lengths: Option<Var<'t>>,
    ) -> Result<FieldEval<'t>>;

    fn freezes_edge_lengths(&self) -> bool {
        false
    }

    /// Bound parameters, when the field has any.
    fn bound_params<'a, 't>(_prep: &'a Self::Prepared<'t>) -> Option<&'a BoundParams<'t>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    pub config: DynamicsConfig,
    pub params: ParameterStore,
}

impl DynamicsNet {
    pub fn new(config: DynamicsConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.layers == 0 {
            return Err(Error::invalid("drift network needs width ≥ 1 and layers ≥ 1"));
        }
        let w = config.width;
        let mut r = rng::stream(rng::derive(seed, &[rng::tag::INIT]));
        let mut p = ParameterStore::new();
        p.insert_uniform("node_embed", Element::COUNT, w, 1, &mut r)?;
        p.insert_uniform("bond_embed", BondType::COUNT, w, 1, &mut r)?;
        p.insert_uniform("edge.len_w", 1, w, 1, &mut r)?;
        p.insert_uniform("edge.len_b", 1, w, 1, &mut r)?;
        p.insert_uniform("edge.out_w", w, w, w, &mut r)?;
        p.insert_uniform("edge.out_b", 1, w, w, &mut r)?;
        for l in 0..config.layers {
            p.insert_uniform(format!("mp{l}.w1"), w, w, w, &mut r)?;
            p.insert_uniform(format!("mp{l}.b1"), 1, w, w, &mut r)?;
            p.insert_uniform(format!("mp{l}.w2"), w, w, w, &mut r)?;
            p.insert_uniform(format!("mp{l}.b2"), 1, w, w, &mut r)?;
        }
        p.insert_uniform("head.w1", 2 * w + 1, w, 2 * w + 1, &mut r)?;
        p.insert_uniform("head.b1", 1, w, 2 * w + 1, &mut r)?;
        p.insert_uniform("head.w2", w, 1, w, &mut r)?;
        p.insert_uniform("head.b2", 1, 1, w, &mut r)?;
        Ok(DynamicsNet { config, params: p })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(config: DynamicsConfig, params: ParameterStore) -> Result<Self> {
        let reference = DynamicsNet::new(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} drift parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for e in reference.params.entries() {
            match params.get(&e.name) {
                Some(t) if t.dims() == e.value.dims() => {}
                _ => return Err(Error::invalid(format!("drift parameter `{}` missing or misshapen", e.name))),
            }
        }
        Ok(DynamicsNet { config, params })
    }

    /// Zeroes the output layer so the drift vanishes identically.
    pub fn zero_output_head(&mut self) {
        for name in ["head.w2", "head.b2"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

fn arc(v: Vec<usize>) -> Arc<[usize]> {
    v.into()
}

/// Per-block copies of an index list, each block offset by `stride`.
fn blocked(idx: &[usize], blocks: usize, stride: usize) -> Arc<[usize]> {
    (0..blocks)
        .flat_map(|b| idx.iter().map(move |&i| b * stride + i))
        .collect::<Vec<_>>()
        .into()
}

pub struct DynamicsPrepared<'t> {
    tape: &'t Tape,
    params: BoundParams<'t>,
    atoms: usize,
    edges: usize,
    blocks: usize,
    h0: Var<'t>,
    bond_pre: Var<'t>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    eidx: Arc<[usize]>,
    u: Arc<[usize]>,
    v: Arc<[usize]>,
    src_blk: Arc<[usize]>,
    dst_blk: Arc<[usize]>,
    eidx_blk: Arc<[usize]>,
    u_blk: Arc<[usize]>,
    v_blk: Arc<[usize]>,
    probes: Option<(Probes, Var<'t>)>,
    zero_time_tangent: Option<Var<'t>>,
}

/// A value with an optional stack of tangents (`None` means all-zero).
#[derive(Clone, Copy)]
struct Dual<'t> {
    val: Var<'t>,
    tan: Option<Var<'t>>,
}

fn add_opt<'t>(a: Option<Var<'t>>, b: Option<Var<'t>>) -> Result<Option<Var<'t>>> {
    Ok(match (a, b) {
        (Some(x), Some(y)) => Some(x.add(y)?),
        (x, None) => x,
        (None, y) => y,
    })
}

impl<'t> DynamicsPrepared<'t> {
    fn p(&self, name: &str) -> Result<Var<'t>> {
        self.params.var(name)
    }

    /// `softplus(x)` with tangent `t ⊙ sigmoid(x)` per block.
    fn softplus(&self, x: Dual<'t>) -> Result<Dual<'t>> {
        match x.tan {
            None => Ok(Dual {
                val: x.val.softplus(),
                tan: None,
            }),
            Some(t) => {
                let (val, gate) = x.val.softplus_and_sigmoid();
                Ok(Dual {
                    val,
                    tan: Some(t.mul(gate.tile_rows(self.blocks))?),
                })
            }
        }
    }

    fn linear(&self, x: Dual<'t>, w: &str, b: &str) -> Result<Dual<'t>> {
        let w = self.p(w)?;
        let val = x.val.affine(w, self.p(b)?)?;
        let tan = x.tan.map(|t| t.matmul(w)).transpose()?;
        Ok(Dual { val, tan })
    }

    /// `a[ia] + b[ib]` with tangents gathered blockwise.
    fn gather_add(&self, a: Dual<'t>, ia: (&Arc<[usize]>, &Arc<[usize]>), b: Dual<'t>, ib: (&Arc<[usize]>, &Arc<[usize]>)) -> Result<Dual<'t>> {
        let tan = match (a.tan, b.tan) {
            (Some(x), Some(y)) => Some(x.gather_add(ia.1, y, ib.1)?),
            (Some(x), None) => Some(x.gather_rows(ia.1)?),
            (None, Some(y)) => Some(y.gather_rows(ib.1)?),
            (None, None) => None,
        };
        Ok(Dual {
            val: a.val.gather_add(ia.0, b.val, ib.0)?,
            tan,
        })
    }

    fn add(&self, a: Dual<'t>, b: Dual<'t>) -> Result<Dual<'t>> {
        Ok(Dual {
            val: a.val.add(b.val)?,
            tan: add_opt(a.tan, b.tan)?,
        })
    }
}

impl VectorField for DynamicsNet {
    type Prepared<'t> = DynamicsPrepared<'t>;

    fn prepare<'t>(
        &self,
        tape: &'t Tape,
        batch: &GraphBatch,
        probes: Option<&Probes>,
        trainable: bool,
    ) -> Result<DynamicsPrepared<'t>> {
        let params = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let n = batch.num_atoms();
        let m = batch.num_edges();
        let blocks = probes.map_or(0, Probes::blocks);

        let atom_idx = arc(batch.atom_codes.clone());
        let bond_idx = arc(batch.bond_codes.clone());
        let h0 = params.var("node_embed")?.gather_rows(&atom_idx)?;
        let bond_pre = params
            .var("bond_embed")?
            .gather_rows(&bond_idx)?
            .add_broadcast(params.var("edge.len_b")?)?;

        let mut src = batch.edge_u.clone();
        src.extend(&batch.edge_v);
        let mut dst = batch.edge_v.clone();
        dst.extend(&batch.edge_u);
        let eidx: Vec<usize> = (0..m).chain(0..m).collect();

        let prepared = DynamicsPrepared {
            tape,
            atoms: n,
            edges: m,
            blocks,
            h0,
            bond_pre,
            src_blk: blocked(&src, blocks, n),
            dst_blk: blocked(&dst, blocks, n),
            eidx_blk: blocked(&eidx, blocks, m),
            u_blk: blocked(&batch.edge_u, blocks, n),
            v_blk: blocked(&batch.edge_v, blocks, n),
            src: arc(src),
            dst: arc(dst),
            eidx: arc(eidx),
            u: arc(batch.edge_u.clone()),
            v: arc(batch.edge_v.clone()),
            probes: probes.map(|p| (p.clone(), p.seed_var(tape))),
            zero_time_tangent: (blocks > 0).then(|| tape.constant(Tensor::zeros(blocks * m, 1))),
            params,
        };
        Ok(prepared)
    }

    fn eval<'t>(
        &self,
        prep: &DynamicsPrepared<'t>,
        state: Var<'t>,
        t: Var<'t>,
        frozen_lengths: Option<Var<'t>>,
    ) -> Result<FieldEval<'t>> {
        let m = prep.edges;
        if state.dims() != (m, 1) {
            return Err(Error::shape("dynamics_eval", format!("state {:?} for {m} edges", state.shape())));
        }
        let w_len = prep.p("edge.len_w")?;

        // Edge embedding from the current (or frozen) lengths.
        let lengths = frozen_lengths.unwrap_or(state);
        let pre_val = prep.bond_pre.add(lengths.matmul(w_len)?)?;
        let pre_tan = match (&prep.probes, frozen_lengths) {
            (Some((_, seeds)), None) => Some(seeds.matmul(w_len)?),
            _ => None,
        };
        let pre = Dual {
            val: pre_val,
            tan: pre_tan,
        };
        let edge = prep.linear(prep.softplus(pre)?, "edge.out_w", "edge.out_b")?;

        let mut h = Dual {
            val: prep.h0,
            tan: None,
        };
        for l in 0..self.config.layers {
            let pre = prep.gather_add(h, (&prep.src, &prep.src_blk), edge, (&prep.eidx, &prep.eidx_blk))?;
            let msg = prep.softplus(pre)?;
            let agg = Dual {
                val: msg.val.scatter_add_rows(&prep.dst, prep.atoms)?,
                tan: msg
                    .tan
                    .map(|t| t.scatter_add_rows(&prep.dst_blk, prep.blocks * prep.atoms))
                    .transpose()?,
            };
            let x = prep.add(h, agg)?;
            let y = prep.softplus(prep.linear(x, &format!("mp{l}.w1"), &format!("mp{l}.b1"))?)?;
            h = prep.linear(y, &format!("mp{l}.w2"), &format!("mp{l}.b2"))?;
        }

        let pair = prep.gather_add(h, (&prep.u, &prep.u_blk), h, (&prep.v, &prep.v_blk))?;
        let tcol = t.broadcast(m, 1)?;
        let x_val = prep.tape.concat(&[pair.val, edge.val, tcol], Axis::Cols)?;
        let x_tan = match (pair.tan, edge.tan, prep.zero_time_tangent) {
            (None, None, _) | (_, _, None) => None,
            (pt, et, Some(z)) => {
                let zeros_w = || {
                    prep.tape
                        .constant(Tensor::zeros(prep.blocks * m, self.config.width))
                };
                let pt = pt.unwrap_or_else(zeros_w);
                let et = et.unwrap_or_else(zeros_w);
                Some(prep.tape.concat(&[pt, et, z], Axis::Cols)?)
            }
        };
        let x = Dual {
            val: x_val,
            tan: x_tan,
        };
        let y = prep.softplus(prep.linear(x, "head.w1", "head.b1")?)?;
        let out = prep.linear(y, "head.w2", "head.b2")?;

        let trace = match &prep.probes {
            Some((probes, seeds)) => Some(probes.reduce(prep.tape, out.tan, *seeds)?),
            None => None,
        };
        Ok(FieldEval {
            drift: out.val,
            trace,
        })
    }

    fn freezes_edge_lengths(&self) -> bool {
        self.config.edge_embed_at_t0
    }

    fn bound_params<'a, 't>(prep: &'a Self::Prepared<'t>) -> Option<&'a BoundParams<'t>> {
        Some(&prep.params)
    }
}

fn check_len(g: &MolecularGraph, d: &[f64]) -> Result<()> {
    if d.len() != g.num_edges() {
        return Err(Error::shape(
            "dynamics_eval",
            format!("distance vector has {} entries, graph has {} edges", d.len(), g.num_edges()),
        ));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("distance vector".into()));
    }
    Ok(())
}

/// `∂d/∂t` for one graph.
pub fn dynamics_eval<F: VectorField>(field: &F, g: &MolecularGraph, d: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(g, d)?;
    let tape = Tape::new();
    let batch = GraphBatch::new(&[g]);
    let prep = field.prepare(&tape, &batch, None, false)?;
    let state = tape.constant(Tensor::column(d.to_vec()));
    let out = field.eval(&prep, state, tape.scalar(t), None)?;
    Ok(out.drift.value().into_data())
}

/// `Tr(∂f/∂d)` at `(d, t)`; exact or Hutchinson-estimated per `mode`.
/// Hutchinson probes are processed in chunks of at most 256.
pub fn jacobian_trace<F: VectorField>(
    field: &F,
    g: &MolecularGraph,
    d: &[f64],
    t: f64,
    mode: TraceMode,
    seed: u64,
) -> Result<f64> {
    check_len(g, d)?;
    let batch = GraphBatch::new(&[g]);
    let run = |probes: &Probes| -> Result<f64> {
        let tape = Tape::new();
        let prep = field.prepare(&tape, &batch, Some(probes), false)?;
        let state = tape.constant(Tensor::column(d.to_vec()));
        let out = field.eval(&prep, state, tape.scalar(t), None)?;
        Ok(out.trace.map_or(0.0, |v| v.item()))
    };
    match mode {
        TraceMode::Exact => run(&Probes::exact(&batch)),
        TraceMode::Hutchinson { probes } => {
            if probes == 0 {
                return Err(Error::invalid("Hutchinson mode needs at least one probe"));
            }
            let mut total = 0.0;
            let mut done = 0;
            let mut chunk_id = 0u64;
            while done < probes {
                let k = (probes - done).min(256);
                let p = Probes::hutchinson(&batch, k, rng::derive(seed, &[rng::tag::PROBES, chunk_id]));
                total += run(&p)? * k as f64;
                done += k;
                chunk_id += 1;
            }
            Ok(total / probes as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{expand_graph, Edge};

    fn chain(elems: &[Element]) -> MolecularGraph {
        let edges = (0..elems.len() - 1).map(|i| Edge {
            u: i,
            v: i + 1,
            bond: BondType::Single,
        });
        expand_graph(&MolecularGraph::new(elems.to_vec(), edges).unwrap()).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_drift_and_trace() {
        let mut net = DynamicsNet::new(DynamicsConfig::desk(), 3).unwrap();
        net.zero_output_head();
        let g = chain(&[Element::C, Element::O, Element::N]);
        let f = dynamics_eval(&net, &g, &[1.0, -0.5, 2.0], 0.3).unwrap();
        assert!(f.iter().all(|&x| x == 0.0));
        let tr = jacobian_trace(&net, &g, &[1.0, -0.5, 2.0], 0.3, TraceMode::Exact, 0).unwrap();
        assert_eq!(tr, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let net = DynamicsNet::new(DynamicsConfig::desk(), 3).unwrap();
        let g = chain(&[Element::C, Element::O, Element::N]);
        assert!(matches!(dynamics_eval(&net, &g, &[1.0], 0.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let net = DynamicsNet::new(DynamicsConfig::desk(), 5).unwrap();
        let g = chain(&[Element::C, Element::C, Element::O, Element::C]);
        let d: Vec<f64> = (0..g.num_edges()).map(|i| 1.0 + 0.1 * i as f64).collect();
        assert_eq!(
            dynamics_eval(&net, &g, &d, 0.5).unwrap(),
            dynamics_eval(&net, &g, &d, 0.5).unwrap()
        );
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = DynamicsNet::new(DynamicsConfig::desk(), 1).unwrap();
        assert!(DynamicsNet::from_params(DynamicsConfig::desk(), net.params.clone()).is_ok());
        let wider = DynamicsConfig {
            width: 8,
            ..DynamicsConfig::desk()
        };
        assert!(DynamicsNet::from_params(wider, net.params).is_err());
    }
}
